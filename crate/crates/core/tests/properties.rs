use binmi_core::datagen::{generate_complete, Family, ScenarioSpec};
use binmi_core::estimands::{
    nearest_rank, standardized_estimates, stratified_resample, CounterfactualDesign, Method,
};
use binmi_core::imputation::{impute_monotone, ImputationConfig};
use binmi_core::missingness::{apply_dropout, DropoutConfig, Mechanism};
use binmi_core::rng::StreamRng;
use binmi_core::trial::{Arm, TrialDataset};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::SeedableRng;

fn dataset(seed: u64, n_per_arm: usize, mechanism: Mechanism) -> TrialDataset {
    let mut spec = ScenarioSpec::reference(Family::Mvnormal);
    spec.n_per_arm = Some(n_per_arm);
    let full = generate_complete(&spec, &mut StreamRng::seed_from_u64(seed)).unwrap();
    let cfg = match mechanism {
        Mechanism::Mcar => DropoutConfig::mcar(),
        Mechanism::Mar => DropoutConfig::mar(),
        Mechanism::None => DropoutConfig::none(6),
    };
    apply_dropout(&full, &cfg, &mut StreamRng::seed_from_u64(seed ^ 0x55)).unwrap()
}

fn is_monotone(ds: &TrialDataset) -> bool {
    ds.subjects().iter().all(|s| {
        s.outcomes[0].is_some() && s.outcomes.windows(2).all(|w| w[0].is_some() || w[1].is_none())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn dropout_is_monotone_and_keeps_observed_values(seed in any::<u64>(), mar in any::<bool>()) {
        let mech = if mar { Mechanism::Mar } else { Mechanism::Mcar };
        let mut spec = ScenarioSpec::reference(Family::Mvnormal);
        spec.n_per_arm = Some(60);
        let full = generate_complete(&spec, &mut StreamRng::seed_from_u64(seed)).unwrap();
        let cfg = if mar { DropoutConfig::mar() } else { DropoutConfig::mcar() };
        prop_assert_eq!(cfg.mechanism, mech);
        let out = apply_dropout(&full, &cfg, &mut StreamRng::seed_from_u64(seed.wrapping_add(1))).unwrap();
        prop_assert!(is_monotone(&out));
        for (a, b) in full.subjects().iter().zip(out.subjects()) {
            prop_assert_eq!(&a.id, &b.id);
            for (x, y) in a.outcomes.iter().zip(&b.outcomes) {
                if let Some(y) = y {
                    prop_assert_eq!(x.unwrap().to_bits(), y.to_bits());
                }
            }
        }
    }

    #[test]
    fn imputation_fills_only_missing_cells(seed in any::<u64>()) {
        let ds = dataset(seed, 60, Mechanism::Mcar);
        let cfg = ImputationConfig { m: 3, by_arm: true };
        let set = impute_monotone(&ds, &cfg, &mut StreamRng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(set.copies.len(), 3);
        for copy in &set.copies {
            prop_assert!(copy.is_complete());
            for (a, b) in ds.subjects().iter().zip(copy.subjects()) {
                prop_assert_eq!(a.arm, b.arm);
                for (x, y) in a.outcomes.iter().zip(&b.outcomes) {
                    let y = y.unwrap();
                    prop_assert!(y.is_finite());
                    if let Some(x) = x {
                        prop_assert_eq!(x.to_bits(), y.to_bits());
                    }
                }
            }
        }
    }

    #[test]
    fn resample_keeps_arm_sizes(seed in any::<u64>()) {
        let ds = dataset(seed, 25, Mechanism::Mar);
        let boot = stratified_resample(&ds, &mut StreamRng::seed_from_u64(seed));
        for arm in [Arm::Control, Arm::Treatment] {
            prop_assert_eq!(boot.arm_count(arm), ds.arm_count(arm));
        }
        prop_assert!(is_monotone(&boot));
    }

    #[test]
    fn standardized_estimates_are_coherent(
        beta in proptest::collection::vec(-2.0f64..2.0, 3),
        base in proptest::collection::vec(5.0f64..11.0, 1..40),
    ) {
        let beta = DVector::from_vec(vec![beta[0], beta[1] * 0.3, beta[2]]);
        let rows = |t: f64| base.iter().map(|b| vec![1.0, *b - 8.0, t]).collect::<Vec<_>>();
        let cfd = CounterfactualDesign::new(rows(0.0), rows(1.0)).unwrap();
        let cov = DMatrix::identity(3, 3) * 0.01;
        let (rd, lor) = standardized_estimates(&beta, &cov, &cfd, Method::Mi).unwrap();
        prop_assert!(rd.estimate.abs() <= 1.0);
        prop_assert!(rd.variance >= 0.0 && lor.variance >= 0.0);
        prop_assert!(rd.estimate == 0.0 || rd.estimate.signum() == lor.estimate.signum());
        prop_assert!(rd.ci_low <= rd.estimate && rd.estimate <= rd.ci_high);
    }

    #[test]
    fn nearest_rank_is_monotone_in_q(mut v in proptest::collection::vec(-1e3f64..1e3, 1..200), q1 in 0.0f64..1.0, q2 in 0.0f64..1.0) {
        v.sort_by(f64::total_cmp);
        let (lo, hi) = if q1 <= q2 { (q1, q2) } else { (q2, q1) };
        prop_assert!(nearest_rank(&v, lo) <= nearest_rank(&v, hi));
        prop_assert!(v.contains(&nearest_rank(&v, lo)));
    }
}
