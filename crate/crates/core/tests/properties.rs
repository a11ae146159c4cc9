use proptest::prelude::*;

use rpcglass::clauses::{ClauseModel, GDist};
use rpcglass::fields::{FieldSampler, OrderParamH};
use rpcglass::finite_system::{log_partition, SystemSpec};
use rpcglass::mp_functional::{sample_a_alpha, Perturbation};
use rpcglass::optimizer::{logits_from_zetas, zetas_from_logits};
use rpcglass::rng::{stream, tags};

fn model(variant: u8, k: usize, beta: f64) -> ClauseModel {
    match variant {
        0 => ClauseModel::kspin(k, beta, GDist::Gaussian).unwrap(),
        1 => ClauseModel::kspin(k, beta, GDist::Rademacher).unwrap(),
        _ => ClauseModel::ksat(k, beta).unwrap(),
    }
}

fn permutation(n: usize) -> impl Strategy<Value = Vec<usize>> {
    Just((0..n).collect::<Vec<_>>()).prop_shuffle()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn free_energy_is_site_permutation_invariant(
        seed in any::<u64>(),
        variant in 0u8..3,
        k in 1usize..4,
        beta in 0.0f64..3.0,
        perm in permutation(9),
    ) {
        let spec = SystemSpec {
            n: 9,
            lambda: 1.2,
            model: model(variant, k, beta),
            perturbation: Some(Perturbation { eps_pert: 0.3, d_max: 4 }),
        };
        let inst = spec.instance(seed, 0).unwrap();
        let a = log_partition(&inst, 24).unwrap();
        let b = log_partition(&inst.permuted(&perm), 24).unwrap();
        prop_assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
    }

    #[test]
    fn ksat_clause_never_raises_free_energy(
        seed in any::<u64>(),
        k in 1usize..4,
        beta in 0.0f64..4.0,
        vars in proptest::collection::vec(0usize..8, 3),
    ) {
        let m = ClauseModel::ksat(k, beta).unwrap();
        let spec = SystemSpec { n: 8, lambda: 0.8, model: m.clone(), perturbation: None };
        let mut inst = spec.instance(seed, 1).unwrap();
        let before = log_partition(&inst, 24).unwrap();
        let mut rng = stream(seed, tags::INSTANCE, 2);
        inst.clauses.push(m.sample(&mut rng).with_vars(vars[..k].to_vec()));
        let after = log_partition(&inst, 24).unwrap();
        prop_assert!(after <= before + 1e-12, "{after} > {before}");
    }

    #[test]
    fn cavity_magnetization_stays_in_range(
        seed in any::<u64>(),
        variant in 0u8..3,
        k in 2usize..5,
        beta in 0.0f64..20.0,
        values in proptest::collection::vec(-1.0f64..=1.0, 3),
    ) {
        let h = OrderParamH::new(1, 3, values).unwrap();
        let sampler = FieldSampler::new(&h, 6, None).unwrap();
        let mut rng = stream(seed, tags::FIELDS, 0);
        let pert = Perturbation::new(0.5);
        let a = sample_a_alpha(&sampler, &model(variant, k, beta), 1.5, Some(&pert), &mut rng).unwrap();
        for x in a.xi() {
            prop_assert!(x.is_finite() && x.abs() <= 1.0, "ξ = {x}");
        }
    }

    #[test]
    fn logits_give_increasing_zetas_below_top(
        x in proptest::collection::vec(-30.0f64..30.0, 1..5),
        top in 0.5f64..0.99,
    ) {
        let z = zetas_from_logits(&x, top);
        prop_assert_eq!(z.len(), x.len());
        prop_assert!(z[0] > 0.0);
        prop_assert!(z.windows(2).all(|w| w[0] < w[1]), "{z:?}");
        prop_assert!(*z.last().unwrap() < top);
    }

    #[test]
    fn logits_round_trip(
        gaps in proptest::collection::vec(0.05f64..1.0, 1..4),
    ) {
        let top = 0.9;
        let total: f64 = gaps.iter().sum::<f64>() + 0.1;
        let z: Vec<f64> = gaps
            .iter()
            .scan(0.0, |acc, g| { *acc += top * g / total; Some(*acc) })
            .collect();
        let back = zetas_from_logits(&logits_from_zetas(&z, top), top);
        for (a, b) in z.iter().zip(&back) {
            prop_assert!((a - b).abs() <= 1e-12, "{z:?} vs {back:?}");
        }
    }
}
