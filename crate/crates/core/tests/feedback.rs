mod common;

use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

use common::*;
use salpgeo::averaging::augmented_system;
use salpgeo::chain::ConfigVelocity;
use salpgeo::feedback::{lqr_gain, linearize, saturate_gait, synthesize, ErrorState, FeedbackLaw, FeedbackMode, FeedbackWeights};
use salpgeo::gait::FourierGait;
use salpgeo::linalg::{dare, spectral_radius};
use salpgeo::planning::{build_cost, plan_motion, solve_averaged, CostKind, GaitPlan, SolverOptions};
use salpgeo::presets::{landsalp_model, Direction, GAIT_FREQUENCY};
use salpgeo::se2::{Pose, Twist};
use salpgeo::sim::{run_gait, SimOptions, SimState};
use salpgeo::Error;

const ZERO: [f64; 2] = [0.0, 0.0];

fn plans() -> &'static Vec<(Direction, GaitPlan, FeedbackLaw)> {
    static PLANS: OnceLock<Vec<(Direction, GaitPlan, FeedbackLaw)>> = OnceLock::new();
    PLANS.get_or_init(|| {
        use rayon::prelude::*;
        let model = landsalp_model();
        Direction::SHIPPED
            .par_iter()
            .map(|&d| {
                let desired = d.desired_velocity(GAIT_FREQUENCY, 2);
                let (plan, cost) =
                    plan_motion(&model, &ZERO, &desired, GAIT_FREQUENCY, CostKind::Velocity, 1, true, &SolverOptions::default())
                        .unwrap();
                let law = synthesize(&model, &plan, &cost.r, &FeedbackWeights::default_for(2), FeedbackMode::Initial).unwrap();
                (d, plan, law)
            })
            .collect()
    })
}

fn forward() -> &'static (Direction, GaitPlan, FeedbackLaw) {
    plans().iter().find(|(d, _, _)| *d == Direction::Forward).unwrap()
}

// --------------------------------------------------------- linearization

#[test]
fn zero_gait_linearizes_to_identity_drift() {
    let model = landsalp_model();
    let avg = augmented_system(&model, &ZERO, GAIT_FREQUENCY).unwrap();
    let cost = build_cost(&model, &ZERO, CostKind::Velocity, 1).unwrap();
    let plan = solve_averaged(&avg, &cost, &ConfigVelocity::zero(2), &SolverOptions::default()).unwrap();
    let lin = linearize(&model, &plan).unwrap();
    assert!((&lin.a_d - DMatrix::<f64>::identity(5, 5)).amax() < 1e-12);
    let (_, g) = avg.velocity_and_jacobian(&[0.0; 9]);
    assert!((&lin.b_d - g * lin.period).amax() < 1e-12);
}

#[test]
fn position_error_enters_only_through_the_group() {
    let (_, plan, _) = forward();
    let lin = linearize(&landsalp_model(), plan).unwrap();
    // the field does not depend on position; what remains in the position
    // columns is the error transport -ad(xi_d)
    let avg = augmented_system(&landsalp_model(), &plan.nominal, plan.gait.omega).unwrap();
    let v = avg.velocity_from_params(plan.gait.to_params().as_slice());
    let ad = Twist::new(v[0], v[1], v[2]).ad_matrix();
    for r in 0..5 {
        for c in 0..3 {
            let want = if r < 3 { -ad[(r, c)] } else { 0.0 };
            assert!((lin.f[(r, c)] - want).abs() < 1e-12, "({r},{c})");
        }
    }
}

/// Error after one cycle from initial error `e0` under parameters
/// `theta0 + dtheta`, by RK4 on the homogeneous pose.
fn cycle_error(plan: &GaitPlan, e0: &[f64], dtheta: &[f64]) -> DVector<f64> {
    let model = landsalp_model();
    let period = plan.gait.period();
    let d = plan.desired.to_vector();
    // log(g^-1 g_d) = e  with g_d = identity  =>  g = exp(e)^-1
    let g0 = exp_series(&hat(&e0[..3]), 1.0).try_inverse().unwrap();
    let rd0 = &plan.start_shape;
    let r0: Vec<f64> = rd0.iter().zip(&e0[3..]).map(|(a, b)| a - b).collect();
    let theta = plan.gait.to_params() + DVector::from_column_slice(dtheta);
    let gait = FourierGait::from_params(3, plan.gait.omega, theta.as_slice()).unwrap();
    let (p, r1) = product_integral(&model, &r0, &gait, 4000);
    let g1 = g0 * hom(&p);
    let gd = exp_series(&hat(&[d[0], d[1], d[2]]), period);
    let err = pose_of(&(g1.try_inverse().unwrap() * gd));
    let mut e = log_oracle(&err).to_vec();
    e.extend((0..2).map(|j| rd0[j] + d[3 + j] * period - r1[j]));
    DVector::from_vec(e)
}

#[test]
fn discrete_pair_matches_the_simulated_cycle_map() {
    let (_, plan, law) = forward();
    let lin = &law.linearization;
    let h = 1e-4;
    let np = plan.gait.n_params();
    let mut a_fd = DMatrix::zeros(5, 5);
    for c in 0..5 {
        let mut ep = [0.0; 5];
        let mut em = [0.0; 5];
        ep[c] = h;
        em[c] = -h;
        let col = (cycle_error(plan, &ep, &vec![0.0; np]) - cycle_error(plan, &em, &vec![0.0; np])) / (2.0 * h);
        a_fd.set_column(c, &col);
    }
    let mut b_fd = DMatrix::zeros(5, np);
    for p in 0..np {
        let mut tp = vec![0.0; np];
        let mut tm = vec![0.0; np];
        tp[p] = h;
        tm[p] = -h;
        let col = -(cycle_error(plan, &[0.0; 5], &tp) - cycle_error(plan, &[0.0; 5], &tm)) / (2.0 * h);
        b_fd.set_column(p, &col);
    }
    let ea = (&a_fd - &lin.a_d).norm() / lin.a_d.norm();
    let eb = (&b_fd - &lin.b_d).norm() / lin.b_d.norm();
    assert!(ea <= 0.05, "A_d off by {ea}\n{a_fd}\n{}", lin.a_d);
    assert!(eb <= 0.05, "B_d off by {eb}\n{b_fd}\n{}", lin.b_d);
}

// ------------------------------------------------------------------ LQR

#[test]
fn scalar_riccati_gives_the_golden_ratio() {
    let one = DMatrix::from_element(1, 1, 1.0);
    let (p, k) = dare(&one, &one, &one, &one, 100_000).unwrap();
    // value iteration by hand
    let mut pv: f64 = 1.0;
    for _ in 0..200 {
        pv = 1.0 + pv - pv * pv / (1.0 + pv);
    }
    assert!((p[(0, 0)] - (1.0 + 5f64.sqrt()) / 2.0).abs() < 1e-10);
    assert!((p[(0, 0)] - pv).abs() < 1e-10);
    assert!((k[(0, 0)] - 0.618_034).abs() < 1e-6);
    // the update subtracts K e and the error map subtracts B dTheta, so the
    // regulator gain comes out with the opposite sign
    let kk = lqr_gain(&one, &one, &one, &one).unwrap();
    assert!((kk[(0, 0)] + 0.618_034).abs() < 1e-6);
}

#[test]
fn cheaper_inputs_contract_faster() {
    // decoupled unstable modes, where the ordering is guaranteed
    let mut g = rng(51);
    for _ in 0..5 {
        let a = DMatrix::from_diagonal(&DVector::from_fn(3, |_, _| uniform(&mut g, 0.5, 2.0)));
        let b = DMatrix::from_diagonal(&DVector::from_fn(3, |_, _| uniform(&mut g, 0.2, 1.0)));
        assert_monotone(&a, &b);
    }
    // and the forward cycle map itself
    let lin = &forward().2.linearization;
    assert_monotone(&lin.a_d, &lin.b_d);
}

fn assert_monotone(a: &DMatrix<f64>, b: &DMatrix<f64>) {
    let q = DMatrix::identity(a.nrows(), a.nrows());
    let mut last = f64::INFINITY;
    for r in [1.0, 0.1, 0.01] {
        let rin = DMatrix::identity(b.ncols(), b.ncols()) * r;
        let k = lqr_gain(a, b, &q, &rin).unwrap();
        let rho = spectral_radius(&(a + b * &k));
        assert!(rho < last + 1e-12 && rho < 1.0, "r {r}: {rho} after {last}");
        last = rho;
    }
}

#[test]
fn uncontrollable_pair_is_rejected() {
    let a = DMatrix::identity(2, 2);
    let b = DMatrix::zeros(2, 2);
    let err = lqr_gain(&a, &b, &DMatrix::identity(2, 2), &DMatrix::identity(2, 2)).unwrap_err();
    assert!(matches!(err, Error::NotStabilizable(_)));
}

#[test]
fn every_shipped_plan_is_stabilized() {
    for (d, _, law) in plans() {
        assert!(law.closed_loop_radius < 1.0, "{d:?}: {}", law.closed_loop_radius);
        let lin = &law.linearization;
        assert!((spectral_radius(&(&lin.a_d + &lin.b_d * &law.k)) - law.closed_loop_radius).abs() < 1e-12);
    }
}

// --------------------------------------------------------------- update

#[test]
fn zero_error_returns_the_feedforward_gait() {
    let (_, plan, law) = forward();
    let next = law.update(&ErrorState::zero(2));
    assert_eq!(next.to_params(), plan.gait.to_params());
}

#[test]
fn error_in_a_dead_gain_direction_changes_nothing() {
    let (_, plan, law) = forward();
    let mut law = law.clone();
    law.k.column_mut(2).fill(0.0);
    let e = ErrorState::from_slice(&[0.0, 0.0, 0.3, 0.0, 0.0]);
    assert_eq!(law.update(&e).to_params(), plan.gait.to_params());
}

#[test]
fn group_error_is_left_invariant() {
    let mut g = rng(52);
    for _ in 0..100 {
        let p = |g: &mut rand_chacha::ChaCha8Rng| Pose::new(uniform(g, -2.0, 2.0), uniform(g, -2.0, 2.0), uniform(g, -3.0, 3.0));
        let (a, b, h) = (p(&mut g), p(&mut g), p(&mut g));
        let e0 = ErrorState::between(&a, &b, &[0.1], &[0.2]).to_vector();
        let e1 = ErrorState::between(&h.compose(&a), &h.compose(&b), &[0.1], &[0.2]).to_vector();
        assert!((e0 - e1).amax() < 1e-10);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn saturation_keeps_direction_and_limits(
        ub in prop::collection::vec(-0.3..0.3f64, 3),
        s in prop::collection::vec(-0.3..0.3f64, 3),
        c in prop::collection::vec(-0.3..0.3f64, 3),
    ) {
        let u_max = landsalp_model().chain.u_max;
        let gait = FourierGait { u_bar: ub.clone(), a_sin: vec![s], a_cos: vec![c], omega: GAIT_FREQUENCY };
        let out = saturate_gait(&gait, &u_max, 64);
        let peak = out.peak_command(64);
        for i in 0..3 {
            prop_assert!(peak[i] <= u_max[i] * (1.0 + 1e-12));
            prop_assert!(out.u_bar[i] * ub[i] >= 0.0);
        }
        // u_bar only ever shrinks by one common factor
        let k = (0..3).find(|&i| ub[i] != 0.0).unwrap();
        let f = out.u_bar[k] / ub[k];
        prop_assert!(f > 0.0 && f <= 1.0);
        for i in 0..3 {
            prop_assert!((out.u_bar[i] - f * ub[i]).abs() <= 1e-15);
        }
    }
}

// ------------------------------------------------------------ closed loop

fn shape_errors(law: Option<&FeedbackLaw>, plan: &GaitPlan, kick: f64, cycles: usize) -> Vec<f64> {
    let model = landsalp_model();
    let start = SimState::at_shape(vec![plan.start_shape[0] + kick, plan.start_shape[1]]);
    let traj = run_gait(&model, &start, &plan.gait, cycles, law, &[], &SimOptions::default()).unwrap();
    assert!(traj.violation.is_none());
    traj.cycle_states.iter().map(|s| s.shape.iter().zip(&plan.start_shape).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)).collect()
}

#[test]
fn joint_kick_decays_within_five_cycles() {
    let (_, plan, law) = forward();
    let errs = shape_errors(Some(law), plan, 0.1, 5);
    assert!(errs[5] < 0.01, "{errs:?}");
    // the open loop just carries the kick along
    let open = shape_errors(None, plan, 0.1, 5);
    assert!(open[5] > 0.05, "{open:?}");
}

#[test]
fn integrated_error_law_also_recovers_from_a_kick() {
    let model = landsalp_model();
    let (_, plan, _) = forward();
    let cost = build_cost(&model, &ZERO, CostKind::Velocity, 1).unwrap();
    let law = synthesize(&model, plan, &cost.r, &FeedbackWeights::default_for(2), FeedbackMode::Integrated).unwrap();
    // the integrated error lags one cycle behind the initial-phase error
    let errs = shape_errors(Some(&law), plan, 0.1, 8);
    assert!(errs[8] < 0.01, "{errs:?}");
}
