"""Smoke test for the muda_py extension: build with
`pip install --no-build-isolation ./crates/python`, then run this file."""

import math
import sys
import tempfile
from pathlib import Path

import muda_py

CONFIG = """
name = "smoke"
[data]
kind = "moons"
n = 400
[train]
pretrain_epochs = 30
adapt_epochs = 10
lambda_div = 3.0
"""


def main() -> int:
    x, y = muda_py.two_moons(n=200, rotation_deg=30.0, seed=1)
    assert len(x) == 200 and len(x[0]) == 2 and sorted(set(y)) == [0, 1]

    (xs, ys), (xt, yt) = muda_py.shifted_blobs(90, 3, [1.0, -1.0], seed=2)
    assert ys == yt
    assert all(math.isclose(b[0] - a[0], 1.0, abs_tol=1e-12) for a, b in zip(xs, xt))

    same = [[[0.3, 0.7], [0.9, 0.1]]] * 4
    var, per_sample, mean = muda_py.predictive_variance(same)
    assert mean == 0.0 and per_sample == [0.0, 0.0]
    split = [[[1.0, 0.0]], [[0.0, 1.0]]]
    var, _, mean = muda_py.predictive_variance(split, "std_l2")
    assert var == [[0.25, 0.25]] and math.isclose(mean, math.sqrt(0.5))

    assert muda_py.disagreement_rate([0, 1, 1, 0], [0, 1, 0, 0]) == 0.25
    report = muda_py.disagreement_report(split)
    assert report["sup"] >= report["exp"] and report["identity_gap"] < 1e-12

    try:
        muda_py.predictive_variance(split, "l1")
    except muda_py.ConfigError:
        pass
    else:
        raise AssertionError("unknown norm accepted")

    grad_err, identity_gap = muda_py.selftest(instances=2)
    assert grad_err <= 1e-4 and identity_gap <= 1e-9

    with tempfile.TemporaryDirectory() as tmp:
        summary, nets = muda_py.train(CONFIG, seed=3, out=tmp)
        assert (Path(tmp) / "metrics.csv").exists()
        muda = nets["muda"]
        src_x, src_y = muda_py.two_moons(n=100, seed=5)
        assert len(muda.predict(src_x)) == 100
        scores = muda.scores(src_x[:3])
        assert all(math.isclose(sum(r), 1.0) for r in scores)
        path = Path(tmp) / "net.json"
        muda.save(str(path))
        again = muda_py.Network.load(str(path))
        assert again.scores(src_x) == muda.scores(src_x)
        ev = again.evaluate(src_x, src_y)
        print(
            f"source-only target {summary['source_only']['target']['accuracy']:.3f}, "
            f"muda target {summary['muda']['target']['accuracy']:.3f}, "
            f"fresh-source accuracy {ev['accuracy']:.3f}"
        )

    print("smoke test passed")
    return 0


if __name__ == "__main__":
    sys.exit(main())
