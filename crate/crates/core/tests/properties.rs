use muda::analysis::{disagreement_rate, squared_disagreement_divergence, sup_vs_expectation};
use muda::data::{make_two_moons, split, DomainDataset};
use muda::ndcore::{one_hot, Tensor};
use muda::uncertainty::{predictive_variance, DivergenceNorm, McEnsemble};
use muda::{Network, ParamScope, TrainConfig, Trainer};
use proptest::prelude::*;

fn ensemble_strategy() -> impl Strategy<Value = McEnsemble> {
    (2usize..8, 1usize..12, 2usize..6).prop_flat_map(|(m, n, k)| {
        proptest::collection::vec(0.001f64..1.0, m * n * k).prop_map(move |raw| {
            let data: Vec<f64> = raw
                .chunks(k)
                .flat_map(|row| {
                    let z: f64 = row.iter().sum();
                    row.iter().map(move |v| v / z).collect::<Vec<_>>()
                })
                .collect();
            McEnsemble::new(Tensor::new(vec![m, n, k], data).unwrap()).unwrap()
        })
    })
}

fn permuted(e: &McEnsemble, order: &[usize]) -> McEnsemble {
    let passes: Vec<Tensor> = order.iter().map(|&p| e.pass(p)).collect();
    McEnsemble::from_passes(&passes).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn supremum_dominates_expectation(e in ensemble_strategy()) {
        let r = sup_vs_expectation(&e);
        prop_assert!(r.supremum >= r.expectation);
        prop_assert!(r.std >= 0.0);
        prop_assert!(squared_disagreement_divergence(&e) >= 0.0);
    }

    #[test]
    fn disagreement_is_symmetric(a in proptest::collection::vec(0usize..4, 1..40), seed in any::<u64>()) {
        let b: Vec<usize> = a.iter().enumerate().map(|(i, &x)| (x + (seed as usize >> (i % 32)) % 3) % 4).collect();
        prop_assert_eq!(disagreement_rate(&a, &b).unwrap(), disagreement_rate(&b, &a).unwrap());
        prop_assert_eq!(disagreement_rate(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn variance_is_nonnegative_and_pass_order_free(e in ensemble_strategy()) {
        let est = predictive_variance(&e, DivergenceNorm::StdL2).unwrap();
        prop_assert!(est.variance.data().iter().all(|&v| v >= 0.0));
        let rev: Vec<usize> = (0..e.passes()).rev().collect();
        let other = predictive_variance(&permuted(&e, &rev), DivergenceNorm::StdL2).unwrap();
        prop_assert!((est.mean_loss - other.mean_loss).abs() <= 1e-12);
    }

    #[test]
    fn identical_passes_have_zero_loss(e in ensemble_strategy()) {
        let first = e.pass(0);
        let copy = McEnsemble::from_passes(&vec![first; e.passes()]).unwrap();
        for norm in [DivergenceNorm::StdL2, DivergenceNorm::VarL2] {
            prop_assert_eq!(predictive_variance(&copy, norm).unwrap().mean_loss, 0.0);
        }
    }

    #[test]
    fn split_parts_are_disjoint_and_cover(n in 2usize..200, f in 0.05f64..0.95, seed in any::<u64>()) {
        let data: Vec<f64> = (0..n).flat_map(|i| [i as f64, 0.0]).collect();
        let ds = DomainDataset::new(Tensor::new(vec![n, 2], data).unwrap(), Some(vec![0; n]), "d", 2).unwrap();
        if let Ok(parts) = split(&ds, &[1.0 - f, f], seed) {
            let mut seen: Vec<usize> = parts
                .iter()
                .flat_map(|p| (0..p.len()).map(|r| p.inputs().get2(r, 0) as usize).collect::<Vec<_>>())
                .collect();
            seen.sort_unstable();
            prop_assert_eq!(seen, (0..n).collect::<Vec<_>>());
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn alternating_steps_touch_only_their_half(seed in any::<u64>(), lambda in 0.0f64..5.0) {
        let cfg = TrainConfig { lambda_div: lambda, seed, ..TrainConfig::default() };
        let trainer = Trainer::new(cfg, 1).unwrap();
        let mut state = trainer.adapt_state().unwrap();
        let mut net = Network::toy(seed);
        net.set_dropout_rates(0.5, 0.0).unwrap();
        let src = make_two_moons(64, 0.1, 0.0, seed).unwrap();
        let tgt = make_two_moons(64, 0.1, 30.0, seed ^ 1).unwrap();
        let ys = one_hot(src.labels().unwrap(), 2).unwrap();

        let (f0, c0) = (net.parameter_values(ParamScope::Feature), net.parameter_values(ParamScope::Classifier));
        trainer.c_update(&mut net, &mut state, src.inputs(), &ys).unwrap();
        let (f1, c1) = (net.parameter_values(ParamScope::Feature), net.parameter_values(ParamScope::Classifier));
        prop_assert_eq!(&f0, &f1);
        prop_assert_ne!(&c0, &c1);

        trainer.f_update(&mut net, &mut state, src.inputs(), &ys, Some(tgt.inputs())).unwrap();
        let (f2, c2) = (net.parameter_values(ParamScope::Feature), net.parameter_values(ParamScope::Classifier));
        prop_assert_eq!(&c1, &c2);
        prop_assert_ne!(&f1, &f2);
    }
}
