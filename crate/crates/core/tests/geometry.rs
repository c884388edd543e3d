mod common;

use std::f64::consts::{FRAC_PI_2, FRAC_PI_6, PI};

use approx::assert_relative_eq;
use nalgebra::DVector;
use proptest::prelude::*;

use common::*;
use salpgeo::drag::{unit_wrench, CommandMode, DragModel};
use salpgeo::presets::{landsalp_chain, landsalp_metric, landsalp_model};
use salpgeo::se2::{group_diff, Pose, Twist};

fn close(a: &Pose, b: &Pose, tol: f64) -> bool {
    (a.x - b.x).abs() < tol && (a.y - b.y).abs() < tol && (a.theta - b.theta).abs() < tol
}

// ---------------------------------------------------------------- se2

#[test]
fn rotation_then_translation_matches_matrix_product() {
    let a = Pose::new(0.0, 0.0, FRAC_PI_2);
    let b = Pose::new(1.0, 0.0, 0.0);
    let want = pose_of(&(hom(&a) * hom(&b)));
    assert!(close(&a.compose(&b), &want, 1e-15));
    assert!(close(&a.compose(&b), &Pose::new(0.0, 1.0, FRAC_PI_2), 1e-15));
}

#[test]
fn exp_of_unit_speed_half_turn() {
    let g = Pose::exp(&Twist::new(1.0, 0.0, PI), 1.0);
    // fine integration of g' = g xi
    let mut m = nalgebra::Matrix3::identity();
    let steps = 1_000_000;
    let h = 1.0 / steps as f64;
    let step = exp_series(&hat(&[1.0, 0.0, PI]), h);
    for _ in 0..steps {
        m *= step;
    }
    let oracle = pose_of(&m);
    assert!(close(&g, &oracle, 1e-9));
    assert!(close(&g, &Pose::new(0.0, 2.0 / PI, PI), 1e-12));
    let back = g.log();
    assert_relative_eq!(back.vx, 1.0, epsilon = 1e-12);
    assert_relative_eq!(back.vy, 0.0, epsilon = 1e-12);
    assert_relative_eq!(back.omega, PI, epsilon = 1e-12);
}

#[test]
fn adjoint_matches_conjugation() {
    let g = Pose::new(1.0, 0.0, 0.0);
    let xi = [0.0, 0.0, 1.0];
    let conj = hom(&g) * hat(&xi) * hom(&g).try_inverse().unwrap();
    let want = vee(&conj);
    let got = g.adjoint() * nalgebra::Vector3::from(xi);
    for c in 0..3 {
        assert_relative_eq!(got[c], want[c], epsilon = 1e-15);
    }
    assert_relative_eq!(got, nalgebra::Vector3::new(0.0, -1.0, 1.0), epsilon = 1e-15);
}

#[test]
fn group_diff_recovers_constant_twists() {
    for (xi, dt, tol) in [([1.0, 0.0, 0.0], 0.1, 1e-12), ([0.3, 0.0, 1.2], 0.005, 1e-9)] {
        let t = Twist::from_slice(&xi);
        let poses: Vec<Pose> = (0..200).map(|k| Pose::exp(&t, k as f64 * dt)).collect();
        for v in group_diff(&poses, dt).unwrap() {
            assert!((v - t).norm() < tol, "{v:?}");
        }
    }
    let still = vec![Pose::new(0.2, -1.0, 0.4); 10];
    assert!(group_diff(&still, 0.01).unwrap().iter().all(|v| v.norm() == 0.0));
}

fn twist() -> impl Strategy<Value = Twist> {
    (-2.0..2.0f64, -2.0..2.0f64, -3.0..3.0f64).prop_map(|(a, b, c)| Twist::new(a, b, c))
}

fn pose() -> impl Strategy<Value = Pose> {
    (-3.0..3.0f64, -3.0..3.0f64, -3.1..3.1f64).prop_map(|(a, b, c)| Pose::new(a, b, c))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2000))]

    #[test]
    fn log_inverts_exp(xi in twist()) {
        let back = Pose::exp(&xi, 1.0).log();
        prop_assert!((back - xi).norm() <= 1e-10 * (1.0 + xi.norm()));
    }

    #[test]
    fn log_matches_closed_form(g in pose()) {
        let l = g.log();
        let o = log_oracle(&g);
        prop_assert!((l.vx - o[0]).abs() < 1e-9 && (l.vy - o[1]).abs() < 1e-9 && (l.omega - o[2]).abs() < 1e-12);
    }

    #[test]
    fn adjoint_is_a_homomorphism(a in pose(), b in pose()) {
        let lhs = a.compose(&b).adjoint();
        let rhs = a.adjoint() * b.adjoint();
        prop_assert!((lhs - rhs).amax() <= 1e-12 * (1.0 + rhs.amax()));
        prop_assert!((a.adjoint() * a.inverse().adjoint() - nalgebra::Matrix3::identity()).amax() < 1e-12);
    }

    #[test]
    fn exp_matches_matrix_exponential(xi in twist(), t in 0.0..2.0f64) {
        let want = pose_of(&exp_series(&hat(&[xi.vx, xi.vy, xi.omega]), t));
        let got = Pose::exp(&xi, t);
        prop_assert!(close(&got, &want, 1e-11));
    }
}

// -------------------------------------------------------------- chain

#[test]
fn zero_shape_unit_frames() {
    let c = landsalp_chain();
    let r = [0.0, 0.0];
    assert!(close(&c.unit_frame(&r, 2).unwrap(), &Pose::identity(), 1e-15));
    assert!(close(&c.unit_frame(&r, 1).unwrap(), &Pose::new(-0.27, 0.0, 0.0), 1e-15));
    assert!(close(&c.unit_frame(&r, 3).unwrap(), &Pose::new(0.27, 0.0, 0.0), 1e-15));
}

#[test]
fn bent_unit_frames_match_homogeneous_chain() {
    let c = landsalp_chain();
    for r in [[FRAC_PI_6, 0.0], [0.4, -0.7], [-1.0, 1.0]] {
        for i in 1..=3 {
            let want = pose_of(&(fk_body(c.link_length, &r).try_inverse().unwrap() * fk_links(c.link_length, &r)[i - 1]));
            assert!(close(&c.unit_frame(&r, i).unwrap(), &want, 1e-14), "{r:?} unit {i}");
        }
    }
}

#[test]
fn unit_jacobians_match_finite_differences() {
    let model = landsalp_model();
    let mut g = rng(3);
    for _ in 0..50 {
        let r = random_shape(&mut g, &model, 1.0);
        let zd = random_vec(&mut g, 5, 1.0);
        for i in 1..=3 {
            let j = model.chain.unit_jacobian(&r, i).unwrap();
            let got = &j * DVector::from_column_slice(&zd);
            let want = fd_unit_twist(&model, &r, &zd, i);
            for c in 0..3 {
                assert!((got[c] - want[c]).abs() < 1e-5, "{r:?} {i}: {got} vs {want:?}");
            }
            assert_eq!(&j * DVector::zeros(5), DVector::zeros(3));
        }
    }
    let j2 = model.chain.unit_jacobian(&[0.0, 0.0], 2).unwrap();
    assert_relative_eq!(j2.view((0, 0), (3, 3)).into_owned(), nalgebra::DMatrix::identity(3, 3), epsilon = 1e-15);
}

#[test]
fn stacked_wheel_rows_match_rotated_unit_twists() {
    let model = landsalp_model();
    let mut g = rng(4);
    for _ in 0..20 {
        let r = random_shape(&mut g, &model, 1.0);
        let zd = random_vec(&mut g, 5, 1.0);
        let (jz, ju) = model.chain.aggregate_jacobians(&r);
        let v = &jz * DVector::from_column_slice(&zd);
        for i in 1..=3 {
            let w = fd_wheel_twist(&model, &r, &zd, i);
            for c in 0..3 {
                assert!((v[3 * (i - 1) + c] - w[c]).abs() < 1e-5);
            }
        }
        for j in 0..2 {
            assert_eq!(v[9 + j], zd[3 + j]);
        }
        for col in 0..3 {
            let nz: Vec<usize> = (0..ju.nrows()).filter(|&row| ju[(row, col)] != 0.0).collect();
            assert_eq!(nz, vec![3 * col]);
            assert_eq!(ju[(3 * col, col)], 1.0);
        }
    }
}

// --------------------------------------------------------------- drag

#[test]
fn unit_wrench_hand_example() {
    let w = unit_wrench(&[2.0, 3.0, 1.0], &Twist::new(1.0, 0.0, 0.0), &Twist::new(0.5, 0.2, 0.0), CommandMode::Velocity);
    assert_relative_eq!(w.fx, 1.0);
    assert_relative_eq!(w.fy, -0.6);
    assert_relative_eq!(w.tau, 0.0);
    let eq = unit_wrench(&[2.0, 3.0, 1.0], &Twist::new(0.7, 0.0, 0.0), &Twist::new(0.7, 0.0, 0.0), CommandMode::Velocity);
    assert_eq!(eq.fx, 0.0);
}

#[test]
fn control_field_matches_assembled_balance() {
    let mut g = rng(5);
    for mode in [CommandMode::Velocity, CommandMode::Force] {
        let model = DragModel::new(landsalp_chain(), landsalp_metric(), mode).unwrap();
        for _ in 0..20 {
            let r = random_shape(&mut g, &model, 1.0);
            let u = random_vec(&mut g, 3, 0.2);
            let got = model.control_field(&r).unwrap().apply(&u);
            let want = oracle_velocity(&model, &r, &u);
            assert!(rel_err(got.as_slice(), want.as_slice()) < 1e-6, "{mode:?} {r:?}");
        }
    }
}

#[test]
fn balance_and_zero_net_power_on_random_draws() {
    let model = landsalp_model();
    let mut g = rng(6);
    for _ in 0..1000 {
        let r = random_shape(&mut g, &model, 1.0);
        let u = random_vec(&mut g, 3, 0.14);
        let (jz, ju) = model.chain.aggregate_jacobians(&r);
        let m = model.metric.aggregate();
        let a = model.control_field(&r).unwrap().a;
        let residual = jz.transpose() * &m * (&jz * &a + &ju);
        assert!(residual.amax() <= 1e-10, "{}", residual.amax());
        let zd = &a * DVector::from_column_slice(&u);
        let f = model.config_force(&r, zd.as_slice(), &u).unwrap();
        assert!(f.amax() <= 1e-10);
        assert!(f.dot(&zd).abs() <= 1e-9);
    }
    assert_eq!(model.config_force(&[0.1, 0.2], &[0.0; 5], &[0.0; 3]).unwrap(), DVector::zeros(5));
}

#[test]
fn center_wheel_translates_without_turning_and_bends_symmetrically() {
    let model = landsalp_model();
    let a = model.control_field(&[0.0, 0.0]).unwrap().a;
    let col = a.column(1);
    // the center unit sits on the symmetry point: the body translates
    // without turning (along a diagonal, since its jet points at -130 deg)
    assert!(col[0] > 0.1 && col[1].abs() > 0.1, "{col}");
    assert!(col[2].abs() < 1e-12);
    // and bends the chain into a C
    assert!(col[3].abs() > 1e-3);
    assert_relative_eq!(col[3], col[4], epsilon = 1e-12);
    // the outer units share translation and bending but turn opposite ways
    let (c1, c3) = (a.column(0), a.column(2));
    for k in [0, 1, 3, 4] {
        assert_relative_eq!(c1[k], c3[k], epsilon = 1e-12);
    }
    assert!(c1[2].abs() > 0.1);
    assert_relative_eq!(c1[2], -c3[2], epsilon = 1e-12);
}

#[test]
fn config_force_is_linear_in_the_metric() {
    let model = landsalp_model();
    let mut g = rng(7);
    let r = random_shape(&mut g, &model, 0.8);
    let zd = random_vec(&mut g, 5, 0.3);
    let u = random_vec(&mut g, 3, 0.1);
    let doubled = DragModel::new(model.chain.clone(), model.metric.scaled(2.0), model.mode).unwrap();
    let f1 = model.config_force(&r, &zd, &u).unwrap();
    let f2 = doubled.config_force(&r, &zd, &u).unwrap();
    assert_relative_eq!(f2, f1 * 2.0, epsilon = 1e-12);
}
