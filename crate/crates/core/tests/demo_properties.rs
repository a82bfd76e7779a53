mod support;

use proptest::prelude::*;

use elicit_core::demo::{
    decode_trajectory, encode_trajectory, format_set, load_set, parse_set, save_set, union, ActionVector,
    DemonstrationSet, StateVector, Step, Trajectory,
};

fn finite() -> impl Strategy<Value = f64> {
    prop_oneof![
        -1e6..1e6f64,
        Just(0.0),
        Just(-0.0),
        Just(f64::MIN_POSITIVE),
        Just(1e-300),
        Just(f64::MAX),
    ]
}

fn arb_trajectory(id: String) -> impl Strategy<Value = Trajectory> {
    (1usize..4, 1usize..3, 1usize..12, any::<bool>()).prop_flat_map(move |(sd, ad, n, ok)| {
        let id = id.clone();
        proptest::collection::vec(
            (
                proptest::collection::vec(finite(), sd),
                proptest::collection::vec(finite(), ad),
            ),
            n,
        )
        .prop_map(move |pairs| {
            let steps = pairs
                .into_iter()
                .map(|(s, a)| Step {
                    state: StateVector::new(s).unwrap(),
                    action: ActionVector::new(a).unwrap(),
                })
                .collect();
            Trajectory::new(id.clone(), "op", "task", steps, ok, 20).unwrap()
        })
    })
}

/// Sets sharing dims (2, 1) so they can be united.
fn arb_set(prefix: &'static str) -> impl Strategy<Value = DemonstrationSet> {
    proptest::collection::vec(proptest::collection::vec((finite(), finite(), finite()), 1..6), 0..4).prop_map(
        move |trajs| {
            let trajs = trajs
                .into_iter()
                .enumerate()
                .map(|(k, steps)| {
                    let steps = steps
                        .into_iter()
                        .map(|(a, b, c)| Step {
                            state: StateVector::new(vec![a, b]).unwrap(),
                            action: ActionVector::new(vec![c]).unwrap(),
                        })
                        .collect();
                    Trajectory::new(format!("{prefix}{k}"), "op", "task", steps, true, 10).unwrap()
                })
                .collect();
            DemonstrationSet::new(prefix, "task", trajs).unwrap()
        },
    )
}

fn bits(t: &Trajectory) -> Vec<u64> {
    t.steps()
        .iter()
        .flat_map(|s| {
            s.state
                .as_slice()
                .iter()
                .chain(s.action.as_slice())
                .map(|v| v.to_bits())
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn trajectory_records_round_trip_bit_exactly(t in arb_trajectory("t-1".into())) {
        let back = decode_trajectory(&encode_trajectory(&t)).unwrap();
        prop_assert_eq!(bits(&back), bits(&t));
        prop_assert_eq!(back, t);
    }

    #[test]
    fn sets_round_trip_through_text_and_files(s in arb_set("x")) {
        let text = format_set(&s);
        let parsed = parse_set("x", &text).unwrap();
        prop_assert_eq!(parsed.trajectories(), s.trajectories());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("set.jsonl");
        save_set(&s, &path).unwrap();
        let loaded = load_set(&path).unwrap();
        let a: Vec<Vec<u64>> = loaded.trajectories().iter().map(bits).collect();
        let b: Vec<Vec<u64>> = s.trajectories().iter().map(bits).collect();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn union_is_associative_with_empty_identity(a in arb_set("a"), b in arb_set("b"), c in arb_set("c")) {
        let left = union(&union(&a, &b).unwrap(), &c).unwrap();
        let right = union(&a, &union(&b, &c).unwrap()).unwrap();
        prop_assert_eq!(left.trajectories(), right.trajectories());
        let empty = DemonstrationSet::empty("e", "task");
        let (ae, ea) = (union(&a, &empty).unwrap(), union(&empty, &a).unwrap());
        prop_assert_eq!(ae.trajectories(), a.trajectories());
        prop_assert_eq!(ea.trajectories(), a.trajectories());
    }

    #[test]
    fn non_finite_values_are_rejected(v in prop_oneof![Just(f64::NAN), Just(f64::INFINITY), Just(f64::NEG_INFINITY)]) {
        prop_assert!(StateVector::new(vec![0.0, v]).is_err());
        prop_assert!(ActionVector::new(vec![v]).is_err());
        let line = r#"{"version":1,"id":"t","operator_id":"o","task_id":"k","success":true,"horizon_limit":5,"steps":[{"state":[1e999],"action":[0.0]}]}"#;
        prop_assert!(decode_trajectory(line).is_err());
    }
}
