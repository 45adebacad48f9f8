use ctrl_core::bonus::{bonus, BonusConfig, BonusMode, CovarianceState};
use ctrl_core::diffnet::{Activation, Mlp};
use ctrl_core::driver::{read_dataset, write_dataset};
use ctrl_core::lowrank::{BaseMeasure, LowRankConfig, LowRankModel};
use ctrl_core::mdp::{policy_values, softmax, Policy, TabularMdp};
use ctrl_core::planner::value_iteration;
use ctrl_core::rng;
use ctrl_core::spaces::{Point, Space, Transition};
use proptest::prelude::*;

fn normalize(raw: &[f64]) -> Vec<f64> {
    let z: f64 = raw.iter().sum();
    raw.iter().map(|v| v / z).collect()
}

/// Random MDP with `ns` states and `na` actions built from positive weights.
fn mdp_strategy() -> impl Strategy<Value = TabularMdp> {
    (1usize..5, 1usize..4).prop_flat_map(|(ns, na)| {
        (
            prop::collection::vec(prop::collection::vec(0.01f64..1.0, ns), ns * na),
            prop::collection::vec(0.0f64..1.0, ns * na),
            prop::collection::vec(0.01f64..1.0, ns),
        )
            .prop_map(move |(rows, r, rho)| {
                let p: Vec<f64> = rows.iter().flat_map(|row| normalize(row)).collect();
                TabularMdp::new(ns, na, p, r, normalize(&rho)).unwrap()
            })
    })
}

fn features(d: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-1.0f64..1.0, d), 1..40)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn tabular_text_round_trips(mdp in mdp_strategy()) {
        prop_assert_eq!(TabularMdp::parse(&mdp.to_text()).unwrap(), mdp);
    }

    #[test]
    fn value_iteration_dominates_every_deterministic_policy(mdp in mdp_strategy(), pick in prop::collection::vec(0usize..3, 4)) {
        let vi = value_iteration(&mdp, &mdp.r, 0.9, 1e-12).unwrap();
        let actions: Vec<usize> = (0..mdp.n_states).map(|s| pick[s % pick.len()] % mdp.n_actions).collect();
        let v = policy_values(&mdp, &Policy::greedy(mdp.n_actions, &actions).unwrap(), 0.9).unwrap();
        for (best, other) in vi.v.iter().zip(&v) {
            prop_assert!(*best >= other - 1e-8);
        }
    }

    #[test]
    fn softmax_is_a_distribution(logits in prop::collection::vec(-50.0f64..50.0, 1..10)) {
        let p = softmax(&logits);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(p.iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn bonus_stays_in_range_and_never_grows_with_data(
        data in features(4),
        probe in prop::collection::vec(-1.0f64..1.0, 4),
        alpha in 0.0f64..20.0,
        lambda in 0.01f64..10.0,
    ) {
        let cfg = BonusConfig::new(alpha, BonusMode::Bonus).unwrap();
        let mut cov = CovarianceState::new(4, lambda).unwrap();
        let mut last = bonus(&cov, &probe, &cfg).unwrap();
        for phi in &data {
            cov.rank_one_update(phi).unwrap();
            let b = bonus(&cov, &probe, &cfg).unwrap();
            prop_assert!((0.0..=2.0).contains(&b));
            prop_assert!(b <= last + 1e-12);
            last = b;
        }
    }

    #[test]
    fn incremental_inverse_matches_direct_inverse(data in features(5), lambda in 0.1f64..5.0) {
        let mut cov = CovarianceState::new(5, lambda).unwrap();
        for phi in &data {
            cov.rank_one_update(phi).unwrap();
        }
        let direct = CovarianceState::from_features(5, lambda, data.iter().map(|f| f.as_slice())).unwrap();
        let err = (cov.inverse() - direct.inverse()).abs().max();
        prop_assert!(err < 1e-9, "max entry error {}", err);
    }

    #[test]
    fn mlp_blob_round_trips(widths in prop::collection::vec(1usize..6, 2..5), seed in any::<u64>()) {
        let net = Mlp::new(&widths, Activation::Tanh, Activation::Identity, &mut rng(seed)).unwrap();
        let back = Mlp::from_bytes(&net.to_bytes()).unwrap();
        prop_assert_eq!(back.to_bytes(), net.to_bytes());
    }

    #[test]
    fn learned_kernel_rows_are_distributions(ns in 1usize..6, na in 1usize..4, seed in any::<u64>()) {
        let space = Space::discrete(ns).unwrap();
        let cfg = LowRankConfig { feature_dim: 3, hidden: vec![4], ..LowRankConfig::default() };
        let model = LowRankModel::new(space.clone(), Space::discrete(na).unwrap(), BaseMeasure::uniform(&space), &cfg, &mut rng(seed)).unwrap();
        let p = model.learned_kernel().unwrap();
        prop_assert_eq!(p.len(), ns * na * ns);
        for row in p.chunks(ns) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        let back = LowRankModel::from_bytes(&model.to_bytes()).unwrap();
        prop_assert_eq!(back.learned_kernel().unwrap(), p);
    }

    #[test]
    fn box_dataset_round_trips_bit_exactly(rows in prop::collection::vec((0.0f64..1.0, 0.0f64..1.0, 0usize..9, 0.0f64..=1.0, any::<bool>()), 0..20)) {
        let states = Space::boxed(vec![0.0, 0.0], vec![1.0, 1.0]).unwrap();
        let actions = Space::discrete(9).unwrap();
        let data: Vec<Transition> = rows
            .iter()
            .map(|&(x, y, a, r, done)| {
                Transition::new(Point::Continuous(vec![x, y]), Point::Discrete(a), r, Point::Continuous(vec![y, x]), done).unwrap()
            })
            .collect();
        let mut buf = vec![];
        write_dataset(&states, &actions, &data, &mut buf).unwrap();
        let back = read_dataset(buf.as_slice()).unwrap();
        prop_assert_eq!(back.transitions, data);
        prop_assert_eq!(back.states, states);
    }
}
