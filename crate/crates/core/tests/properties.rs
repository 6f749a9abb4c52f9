use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

use ofo_core::adaptive::cosine_similarity;
use ofo_core::operators::{saddle_operator, SaddleOperatorData};
use ofo_core::projection::{membership, project, ConvexSet, Sense};
use ofo_core::qp::{BlockPartition, QuadraticProgram};
use ofo_core::scenario::{example1_scenario, vpp_step_scenario, NetworkParams, ScenarioTimeline};

fn vec_strategy(n: usize) -> impl Strategy<Value = DVector<f64>> {
    prop::collection::vec(-10.0..10.0f64, n).prop_map(DVector::from_vec)
}

fn set_strategy(n: usize) -> impl Strategy<Value = ConvexSet> {
    prop_oneof![
        (vec_strategy(n), prop::collection::vec(0.0..5.0f64, n)).prop_map(move |(lo, w)| {
            let hi = &lo + DVector::from_vec(w);
            ConvexSet::boxed(lo, hi).unwrap()
        }),
        (vec_strategy(n), -5.0..5.0f64)
            .prop_filter("nonzero normal", |(a, _)| a.norm() > 1e-3)
            .prop_map(|(a, b)| ConvexSet::halfspace(a, b, Sense::Le).unwrap()),
        (vec_strategy(n), 0.1..5.0f64).prop_map(|(c, r)| ConvexSet::ball(c, r).unwrap()),
        Just(ConvexSet::NonnegativeOrthant),
    ]
}

proptest! {
    #[test]
    fn projection_is_feasible_idempotent_and_nonexpansive(
        set in set_strategy(3),
        a in vec_strategy(3),
        b in vec_strategy(3),
    ) {
        let pa = project(&set, &a).unwrap();
        let pb = project(&set, &b).unwrap();
        prop_assert!(membership(&set, &pa, 1e-9));
        prop_assert!((project(&set, &pa).unwrap() - &pa).norm() <= 1e-9);
        prop_assert!((&pa - &pb).norm() <= (&a - &b).norm() + 1e-9);
    }

    #[test]
    fn similarity_is_bounded_and_symmetric(a in vec_strategy(4), b in vec_strategy(4)) {
        if let Some(s) = cosine_similarity(&a, &b) {
            prop_assert!((-1.0..=1.0).contains(&s));
            prop_assert!((s - cosine_similarity(&b, &a).unwrap()).abs() < 1e-12);
        }
    }

    #[test]
    fn saddle_operator_is_affine(
        z1 in vec_strategy(3),
        z2 in vec_strategy(3),
        gamma in prop::collection::vec(0.1..10.0f64, 3),
        p in 0.0..2.0f64,
    ) {
        let qp = QuadraticProgram::new(
            DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]),
            DVector::from_vec(vec![1.0, -1.0]),
            0.0,
            DMatrix::from_row_slice(1, 2, &[1.0, 2.0]),
            DVector::from_vec(vec![-0.5]),
            BlockPartition::single(2, ConvexSet::Unbounded).unwrap(),
        )
        .unwrap();
        let data = SaddleOperatorData::from_qp(&qp, DVector::from_vec(gamma), p).unwrap();
        let lhs = saddle_operator(&data, &z1).unwrap() - saddle_operator(&data, &z2).unwrap();
        let rhs = data.linear_part() * (&z1 - &z2);
        prop_assert!((lhs - rhs).amax() <= 1e-12 * (1.0 + (&z1 - &z2).amax() * 100.0));
    }
}

fn round_trip(s: &ScenarioTimeline) {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("scenario.toml");
    s.save(&path).unwrap();
    assert_eq!(&ScenarioTimeline::load(&path).unwrap(), s);
}

#[test]
fn scenarios_round_trip_through_toml() {
    round_trip(&example1_scenario(10).unwrap());
    let params = NetworkParams {
        horizon: 40,
        n_ders: 3,
        load_amplitude: 0.1,
        e_y: 1e-3,
        ..NetworkParams::default()
    };
    round_trip(&vpp_step_scenario(&params, &[20], &[1.0, 1.5]).unwrap());
}

#[test]
fn unknown_scenario_field_is_a_config_error() {
    let text = example1_scenario(3).unwrap().to_toml_string().unwrap();
    let broken = text.replacen("horizon", "horizn", 1);
    let err = ScenarioTimeline::from_toml_str(&broken).unwrap_err();
    assert!(err.to_string().contains("horizn"), "{err}");
}
