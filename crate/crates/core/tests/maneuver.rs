use salpgeo::maneuver::{bend, BendOptions, BendShape};
use salpgeo::planning::SolverOptions;
use salpgeo::presets::landsalp_model;
use salpgeo::sim::SimState;

fn run(shape: BendShape, direction: f64) -> Vec<f64> {
    let model = landsalp_model();
    let opts = BendOptions { shape, direction, ..Default::default() };
    let res = bend(&model, &SimState::at_shape(vec![0.0, 0.0]), &opts, &SolverOptions::default()).unwrap();
    assert!(res.trajectory.violation.is_none());
    assert_eq!(res.cycle_shapes.len(), opts.cycles + 1);
    res.final_shape().to_vec()
}

#[test]
fn c_bend_reaches_twenty_degrees_both_ways() {
    for dir in [1.0, -1.0] {
        let end = run(BendShape::C, dir);
        for a in &end {
            assert!((a.to_degrees() - 20.0 * dir).abs() <= 2.0, "{dir}: {end:?}");
        }
    }
}

#[test]
fn s_bend_alternates_the_joints() {
    let end = run(BendShape::S, 1.0);
    assert!((end[0].to_degrees() - 20.0).abs() <= 2.0, "{end:?}");
    assert!((end[1].to_degrees() + 20.0).abs() <= 2.0, "{end:?}");
}

#[test]
fn cycle_shapes_ramp_steadily() {
    let model = landsalp_model();
    let res = bend(&model, &SimState::at_shape(vec![0.0, 0.0]), &BendOptions::default(), &SolverOptions::default()).unwrap();
    for w in res.cycle_shapes.windows(2) {
        let step = (w[1][0] - w[0][0]).to_degrees();
        assert!((step - 5.0 / 3.0).abs() < 0.25, "{step}");
    }
}
