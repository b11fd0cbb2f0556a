//! Synthetic domain-shift benchmarks.
//!
//! Two moons: the outer arc `(cos t, sin t)` (label 0) and the inner arc
//! `(1 − cos t, 0.5 − sin t)` (label 1) for `t` evenly spaced on `[0, π]`,
//! translated by `(−0.5, −0.25)` so the noiseless configuration is centered
//! at the origin. Gaussian noise is added first, then every point is
//! rotated about the origin.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::DomainDataset;
use crate::error::{MudaError, Result};
use crate::ndcore::Tensor;

pub const MOONS_NOISE_STD: f64 = 0.1;
const MOONS_CENTER: (f64, f64) = (0.5, 0.25);

pub fn rotate_point(x: f64, y: f64, degrees: f64) -> (f64, f64) {
    let (s, c) = degrees.to_radians().sin_cos();
    (c * x - s * y, s * x + c * y)
}

pub fn make_two_moons(n: usize, noise_std: f64, rotation_deg: f64, seed: u64) -> Result<DomainDataset> {
    if n < 2 || !n.is_multiple_of(2) {
        return Err(MudaError::config(
            "data.n",
            format!("two moons needs an even n ≥ 2, got {n}"),
        ));
    }
    if !(noise_std >= 0.0 && noise_std.is_finite()) {
        return Err(MudaError::config("data.noise_std", "must be a non-negative number"));
    }
    let half = n / 2;
    let noise = Normal::new(0.0, noise_std).map_err(|e| MudaError::config("data.noise_std", e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    for moon in 0..2 {
        for i in 0..half {
            let t = if half == 1 {
                0.0
            } else {
                std::f64::consts::PI * i as f64 / (half - 1) as f64
            };
            let (x, y) = if moon == 0 {
                (t.cos(), t.sin())
            } else {
                (1.0 - t.cos(), 0.5 - t.sin())
            };
            let x = x - MOONS_CENTER.0 + noise.sample(&mut rng);
            let y = y - MOONS_CENTER.1 + noise.sample(&mut rng);
            let (x, y) = rotate_point(x, y, rotation_deg);
            data.push(x);
            data.push(y);
            labels.push(moon);
        }
    }
    let id = format!("moons_rot{rotation_deg}");
    DomainDataset::new(Tensor::new(vec![n, 2], data)?, Some(labels), id, 2)
}

/// Geometry of the Gaussian-blob benchmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlobSpec {
    pub n: usize,
    pub k: usize,
    #[serde(default = "default_blob_radius")]
    pub radius: f64,
    #[serde(default = "default_blob_std")]
    pub std: f64,
}

fn default_blob_radius() -> f64 {
    3.0
}

fn default_blob_std() -> f64 {
    0.8
}

impl BlobSpec {
    pub fn new(n: usize, k: usize) -> Self {
        BlobSpec {
            n,
            k,
            radius: default_blob_radius(),
            std: default_blob_std(),
        }
    }
}

/// Cluster centers evenly spaced on a circle of `radius` in the first two
/// coordinates; further coordinates are zero.
pub fn blob_centers(k: usize, dim: usize, radius: f64) -> Vec<Vec<f64>> {
    (0..k)
        .map(|c| {
            let angle = 2.0 * std::f64::consts::PI * c as f64 / k as f64;
            let mut center = vec![0.0; dim];
            center[0] = radius * angle.cos();
            if dim > 1 {
                center[1] = radius * angle.sin();
            }
            center
        })
        .collect()
}

/// One blob domain: `n` samples assigned round-robin to `k` classes, drawn
/// around the centers translated by `shift`.
pub fn make_blob_domain(spec: &BlobSpec, shift: &[f64], seed: u64, domain_id: &str) -> Result<DomainDataset> {
    if spec.k < 2 {
        return Err(MudaError::config("data.k", "blobs need at least 2 classes"));
    }
    if spec.n < 1 {
        return Err(MudaError::config("data.n", "need at least one sample"));
    }
    if shift.is_empty() {
        return Err(MudaError::config("data.shift", "shift vector must not be empty"));
    }
    if !(spec.std >= 0.0 && spec.std.is_finite()) {
        return Err(MudaError::config("data.std", "must be a non-negative number"));
    }
    let dim = shift.len();
    let centers = blob_centers(spec.k, dim, spec.radius);
    let noise = Normal::new(0.0, spec.std).map_err(|e| MudaError::config("data.std", e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(spec.n * dim);
    let mut labels = Vec::with_capacity(spec.n);
    for i in 0..spec.n {
        let c = i % spec.k;
        for (j, s) in shift.iter().enumerate() {
            data.push(centers[c][j] + noise.sample(&mut rng) + s);
        }
        labels.push(c);
    }
    DomainDataset::new(Tensor::new(vec![spec.n, dim], data)?, Some(labels), domain_id, spec.k)
}

/// Source blobs at the base centers and a target whose every point is the
/// corresponding source point translated by `shift`.
pub fn make_shifted_blobs(n: usize, k: usize, shift: &[f64], seed: u64) -> Result<(DomainDataset, DomainDataset)> {
    let spec = BlobSpec::new(n, k);
    let zero = vec![0.0; shift.len()];
    let source = make_blob_domain(&spec, &zero, seed, "blobs_source")?;
    let target = make_blob_domain(&spec, shift, seed, "blobs_target")?;
    Ok((source, target))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rotation_matrix() {
        let (x, y) = rotate_point(1.0, 0.0, 30.0);
        assert!((x - 0.8660254037844387).abs() < 1e-15);
        assert!((y - 0.5).abs() < 1e-15);
    }

    #[test]
    fn zero_rotation_is_identity() {
        let a = make_two_moons(100, 0.1, 0.0, 3).unwrap();
        let (x, y) = rotate_point(0.25, -0.75, 0.0);
        assert_eq!((x, y), (0.25, -0.75));
        assert_eq!(a.labels().unwrap().iter().filter(|&&l| l == 1).count(), 50);
    }

    #[test]
    fn rotated_target_is_rotated_source() {
        let src = make_two_moons(200, 0.1, 0.0, 9).unwrap();
        let tgt = make_two_moons(200, 0.1, 30.0, 9).unwrap();
        let (s, c) = (std::f64::consts::PI / 6.0).sin_cos();
        for r in 0..200 {
            let (x, y) = (src.inputs().get2(r, 0), src.inputs().get2(r, 1));
            assert!((tgt.inputs().get2(r, 0) - (c * x - s * y)).abs() < 1e-12);
            assert!((tgt.inputs().get2(r, 1) - (s * x + c * y)).abs() < 1e-12);
        }
        assert_eq!(src.labels(), tgt.labels());
    }

    #[test]
    fn noiseless_moons_are_centered() {
        let ds = make_two_moons(1000, 0.0, 0.0, 0).unwrap();
        let sum = ds.inputs().sum_rows();
        // linspace arcs: x means cancel exactly, y means cancel by symmetry
        assert!(sum.data()[0].abs() / 1000.0 < 1e-12);
        assert!(sum.data()[1].abs() / 1000.0 < 1e-12);
    }

    #[test]
    fn odd_n_is_rejected() {
        assert!(make_two_moons(11, 0.1, 0.0, 0).is_err());
    }

    #[test]
    fn blobs_shift() {
        let (s, t) = make_shifted_blobs(60, 3, &[0.0, 0.0], 1).unwrap();
        assert_eq!(s.inputs(), t.inputs());
        let (s, t) = make_shifted_blobs(60, 3, &[1.5, -2.0], 1).unwrap();
        for r in 0..60 {
            assert!((t.inputs().get2(r, 0) - s.inputs().get2(r, 0) - 1.5).abs() < 1e-12);
            assert!((t.inputs().get2(r, 1) - s.inputs().get2(r, 1) + 2.0).abs() < 1e-12);
        }
        assert_eq!(make_shifted_blobs(60, 3, &[1.5, -2.0], 1).unwrap().0, s);
        assert!(make_shifted_blobs(60, 1, &[0.0], 1).is_err());
    }
}
