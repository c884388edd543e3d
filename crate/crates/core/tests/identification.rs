mod common;

use std::f64::consts::PI;
use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};

use common::*;
use salpgeo::dataset::TrajectoryDataset;
use salpgeo::drag::{CommandMode, DragModel, LocalMetric};
use salpgeo::ident::{
    build_regression, identify, rescale_objective, residual_gradients, sample_rows, PowerForm, RegressionOptions,
    RegressionSystem,
};
use salpgeo::presets::{landsalp_chain, landsalp_metric, landsalp_model};
use salpgeo::se2::{group_diff, Pose, Twist};
use salpgeo::signal::{differentiate, lowpass, resample, resample_poses};
use salpgeo::sim::{generate_identification_dataset, with_force_noise, DatasetOptions};

fn clean_data() -> &'static Vec<TrajectoryDataset> {
    static DATA: OnceLock<Vec<TrajectoryDataset>> = OnceLock::new();
    DATA.get_or_init(|| generate_identification_dataset(&landsalp_model(), 1, &DatasetOptions::default()).unwrap())
}

fn max_rel(got: &[f64], want: &[f64]) -> f64 {
    got.iter().zip(want).map(|(a, b)| ((a - b) / b).abs()).fold(0.0, f64::max)
}

fn amplitude_and_lag(y: &[f64], f: f64, rate: f64) -> (f64, f64) {
    // least-squares fit of a sin + b cos over the middle half
    let n = y.len();
    let (mut ss, mut cc, mut sc, mut ys, mut yc) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for k in n / 4..3 * n / 4 {
        let t = k as f64 / rate;
        let (s, c) = (2.0 * PI * f * t).sin_cos();
        ss += s * s;
        cc += c * c;
        sc += s * c;
        ys += y[k] * s;
        yc += y[k] * c;
    }
    let det = ss * cc - sc * sc;
    let a = (ys * cc - yc * sc) / det;
    let b = (yc * ss - ys * sc) / det;
    (a.hypot(b), b.atan2(a))
}

// ------------------------------------------------------------ signal

#[test]
fn lowpass_stops_ten_times_cutoff_and_passes_a_tenth() {
    let rate = 200.0;
    let cutoff = 1.0;
    let n = 8000;
    for (f, check) in [(10.0 * cutoff, 0), (cutoff / 10.0, 1)] {
        let x: Vec<f64> = (0..n).map(|k| (2.0 * PI * f * k as f64 / rate).sin()).collect();
        let y = lowpass(&x, cutoff, rate).unwrap();
        let (amp, phase) = amplitude_and_lag(&y, f, rate);
        if check == 0 {
            assert!(amp <= 0.01, "amplitude {amp}");
        } else {
            assert!((amp - 1.0).abs() <= 0.01, "amplitude {amp}");
            assert!(phase.abs() < 1e-6, "phase {phase}");
            // cross-correlation peaks at zero lag
            let corr = |lag: i64| -> f64 {
                (n / 4..3 * n / 4).map(|k| x[k] * y[(k as i64 + lag) as usize]).sum()
            };
            assert!(corr(0) > corr(1) && corr(0) > corr(-1));
        }
    }
    let flat = lowpass(&[2.5; 500], cutoff, rate).unwrap();
    assert!(flat.iter().all(|v| (v - 2.5).abs() < 1e-12));
}

#[test]
fn resampled_exponential_stays_on_its_subgroup() {
    let xi = Twist::new(0.3, -0.1, 0.8);
    let poses: Vec<Pose> = (0..480).map(|k| Pose::exp(&xi, k as f64 / 240.0)).collect();
    let out = resample_poses(&poses, 240.0, 200.0).unwrap();
    for v in group_diff(&out, 1.0 / 200.0).unwrap() {
        assert!((v - xi).norm() < 1e-9, "{v:?}");
    }
    let c = resample(&[4.0; 300], 240.0, 200.0).unwrap();
    assert!(c.iter().all(|v| *v == 4.0));
}

#[test]
fn differentiation_examples() {
    let rate = 200.0;
    let n = 400;
    let mut ds = TrajectoryDataset {
        rate,
        t: (0..n).map(|k| k as f64 / rate).collect(),
        poses: vec![Pose::new(0.1, 0.2, 0.3); n],
        shapes: vec![vec![0.2, -0.1]; n],
        commands: vec![vec![0.0; 3]; n],
        forces: vec![vec![0.0; 3]; n],
    };
    let still = differentiate(&ds).unwrap();
    assert!(still.xi.iter().all(|x| x.norm() < 1e-12));
    assert!(still.alpha_dot.iter().flatten().all(|a| a.abs() < 1e-12));

    ds.shapes = ds.t.iter().map(|t| vec![0.1 * t, 0.0]).collect();
    let ramp = differentiate(&ds).unwrap();
    assert!(ramp.alpha_dot.iter().all(|a| (a[0] - 0.1).abs() < 1e-12 && a[1].abs() < 1e-12));
}

#[test]
fn differentiation_recovers_simulated_velocities() {
    let model = landsalp_model();
    let ds = &clean_data()[5];
    let v = differentiate(ds).unwrap();
    let mut worst: f64 = 0.0;
    let mut scale: f64 = 0.0;
    for k in 0..ds.len() {
        let truth = model.control_field(&ds.shapes[k]).unwrap().apply(&ds.commands[k]);
        let est = v.zeta_dot(k);
        scale = scale.max(truth.amax());
        worst = worst.max(est.iter().zip(truth.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
    }
    assert!(worst / scale < 1e-3, "{}", worst / scale);
}

// -------------------------------------------------------- regression rows

#[test]
fn regressor_rows_reproduce_the_model_forces() {
    let mut g = rng(11);
    for mode in [CommandMode::Velocity, CommandMode::Force] {
        let model = DragModel::new(landsalp_chain(), landsalp_metric(), mode).unwrap();
        let m = DVector::from_vec(model.metric.to_vec());
        for _ in 0..50 {
            let r = random_shape(&mut g, &model, 1.0);
            let zd = random_vec(&mut g, 5, 0.5);
            let u = random_vec(&mut g, 3, 0.2);
            let rows = sample_rows(&model.chain, mode, &r, &zd, &u);
            let f = &rows.force * &m + &rows.force_offset;
            let want = model.actuator_forces(&r, &zd, &u);
            assert!(rel_err(f.as_slice(), &want) < 1e-12);
            let b = &rows.balance * &m + &rows.balance_offset;
            let want = model.config_force(&r, &zd, &u).unwrap();
            assert!(rel_err(b.as_slice(), want.as_slice()) < 1e-12);
            let p = rows.power.dot(&m) + rows.power_offset;
            assert!((p - want.dot(&DVector::from_column_slice(&zd))).abs() < 1e-12 * (1.0 + p.abs()));
        }
    }
}

// ------------------------------------------------------------ identify

#[test]
fn protocol_yields_three_minutes_at_two_hundred_hertz() {
    let data = clean_data();
    assert_eq!(data.len(), 8);
    let samples: usize = data.iter().map(TrajectoryDataset::len).sum();
    assert!((35_000..=37_000).contains(&samples), "{samples}");
    let again = generate_identification_dataset(&landsalp_model(), 1, &DatasetOptions::default()).unwrap();
    assert_eq!(&again, data);
}

#[test]
fn noiseless_recovery_without_regularization() {
    let model = landsalp_model();
    let opts = RegressionOptions { lambda: Some(0.0), ..Default::default() };
    let sys = build_regression(clean_data(), &model.chain, model.mode, &opts).unwrap();
    let res = identify(&sys).unwrap();
    assert!(max_rel(&res.metric.to_vec(), &model.metric.to_vec()) <= 1e-6);
    assert!(res.kkt_residual <= 1e-8);
    assert!(!res.warning);
    assert!(res.condition_report.weakly_observable.is_empty());
}

#[test]
fn one_percent_force_noise_over_twenty_seeds() {
    let model = landsalp_model();
    let truth = model.metric.to_vec();
    let mut worst: f64 = 0.0;
    for seed in 0..20 {
        let noisy = with_force_noise(clean_data(), 0.01, 100 + seed).unwrap();
        let sys = build_regression(&noisy, &model.chain, model.mode, &RegressionOptions::default()).unwrap();
        let res = identify(&sys).unwrap();
        worst = worst.max(max_rel(&res.metric.to_vec(), &truth));
    }
    assert!(worst <= 0.05, "{worst}");
}

#[test]
fn scaling_every_force_scales_the_metric() {
    let model = landsalp_model();
    let mut scaled = clean_data().clone();
    for ds in &mut scaled {
        ds.forces.iter_mut().flatten().for_each(|f| *f *= 3.0);
    }
    let opts = RegressionOptions::default();
    let a = identify(&build_regression(clean_data(), &model.chain, model.mode, &opts).unwrap()).unwrap();
    let b = identify(&build_regression(&scaled, &model.chain, model.mode, &opts).unwrap()).unwrap();
    let want: Vec<f64> = a.metric.to_vec().iter().map(|v| 3.0 * v).collect();
    assert!(max_rel(&b.metric.to_vec(), &want) < 1e-9);
}

#[test]
fn stronger_regularization_never_raises_net_power() {
    let model = landsalp_model();
    let noisy = with_force_noise(clean_data(), 0.01, 7).unwrap();
    let base = build_regression(&noisy, &model.chain, model.mode, &RegressionOptions::default()).unwrap();
    let mut last = f64::INFINITY;
    for lambda in [0.0, 1e-2, 1e-1, 1.0, 10.0, 100.0, 1e3] {
        let sys = RegressionSystem { lambda: Some(lambda), ..base.clone() };
        let p = identify(&sys).unwrap().power_value;
        assert!(p <= last * (1.0 + 1e-9), "lambda {lambda}: {p} > {last}");
        last = p;
    }
}

#[test]
fn linear_power_form_shrinks_towards_zero() {
    let model = landsalp_model();
    let truth = model.metric.to_vec();
    let exact = RegressionOptions { power_form: PowerForm::Linear, lambda: Some(0.0), ..Default::default() };
    let res = identify(&build_regression(clean_data(), &model.chain, model.mode, &exact).unwrap()).unwrap();
    assert!(max_rel(&res.metric.to_vec(), &truth) <= 1e-6);
    // on noisy data the linear penalty trades fit for lower dissipated power
    let noisy = with_force_noise(clean_data(), 0.01, 3).unwrap();
    let free = identify(&build_regression(&noisy, &model.chain, model.mode, &exact).unwrap()).unwrap();
    let opts = RegressionOptions { power_form: PowerForm::Linear, ..Default::default() };
    let res = identify(&build_regression(&noisy, &model.chain, model.mode, &opts).unwrap()).unwrap();
    assert!(res.lambda > 0.0);
    assert!(res.power_value < free.power_value);
    assert!(res.fit_value >= free.fit_value);
    let joints = &res.metric.to_vec()[9..];
    assert!(joints.iter().all(|j| *j < 0.3), "{joints:?}");
}

/// Regression with only force rows, built by hand.
fn synthetic(n_units: usize, rows: DMatrix<f64>, targets: DVector<f64>) -> RegressionSystem {
    let c = 4 * n_units - 1;
    let s = rows.nrows() / n_units;
    RegressionSystem {
        n_units,
        mode: CommandMode::Velocity,
        force_rows: rows,
        force_targets: targets,
        balance_rows: DMatrix::zeros(0, c),
        balance_offsets: DVector::zeros(0),
        power_rows: DMatrix::zeros(s, c),
        power_offsets: DVector::zeros(s),
        lambda: Some(0.0),
        power_form: PowerForm::Squared,
        balance_weight: 1.0,
        whitening: None,
    }
}

fn random_matrix(g: &mut rand_chacha::ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| uniform(g, -1.0, 1.0))
}

#[test]
fn interior_solution_equals_least_squares() {
    let mut g = rng(21);
    let a = random_matrix(&mut g, 3 * 40, 11);
    let m: DVector<f64> = DVector::from_fn(11, |_, _| uniform(&mut g, 0.5, 2.0));
    let noise = DVector::from_fn(120, |_, _| uniform(&mut g, -0.01, 0.01));
    let sys = synthetic(3, a.clone(), &a * &m + noise);
    let res = identify(&sys).unwrap();
    let ls = a.clone().svd(true, true).solve(&sys.force_targets, 1e-14).unwrap();
    assert!(ls.iter().all(|v| *v > 0.0));
    assert!(rel_err(&res.metric.to_vec(), ls.as_slice()) < 1e-10);
    let grads = residual_gradients(&sys, &res);
    let scale = (a.transpose() * &sys.force_targets).amax();
    assert!(grads.iter().all(|gk| gk.abs() <= 1e-8 * scale));
}

#[test]
fn pinned_coefficient_has_nonnegative_gradient() {
    let mut g = rng(22);
    let a = random_matrix(&mut g, 3 * 40, 11);
    let mut m: DVector<f64> = DVector::from_fn(11, |_, _| uniform(&mut g, 0.5, 2.0));
    m[4] = -1.0;
    let sys = synthetic(3, a.clone(), &a * &m);
    let res = identify(&sys).unwrap();
    let got = res.metric.to_vec();
    assert_eq!(got[4], 0.0);
    let grads = residual_gradients(&sys, &res);
    assert!(grads[4] > 0.0);
    assert!(res.kkt_residual <= 1e-8);
}

#[test]
fn hessian_diagonal_predicts_objective_curvature() {
    let model = landsalp_model();
    let noisy = with_force_noise(clean_data(), 0.01, 5).unwrap();
    let sys = build_regression(&noisy, &model.chain, model.mode, &RegressionOptions::default()).unwrap();
    let res = identify(&sys).unwrap();
    let m = res.metric.to_vec();
    let base = sys.objective(&m, res.lambda);
    let grads = residual_gradients(&sys, &res);
    for k in 0..m.len() {
        let d = 0.01 * m[k];
        let mut mp = m.clone();
        mp[k] += d;
        let rise = sys.objective(&mp, res.lambda) - base - grads[k] * d;
        let predicted = 0.5 * res.hessian_diagonal[k] * d * d;
        assert!((rise - predicted).abs() <= 0.05 * predicted, "coefficient {k}: {rise} vs {predicted}");
    }
}

#[test]
fn white_residuals_leave_the_system_alone() {
    let mut g = rng(23);
    let s = 60;
    // residual with identity covariance, one channel per sample
    let e = DVector::from_fn(3 * s, |i, _| {
        let (k, ch) = (i / 3, i % 3);
        if k % 3 == ch {
            3f64.sqrt() * if (k / 3) % 2 == 0 { 1.0 } else { -1.0 }
        } else {
            0.0
        }
    });
    let mut a = random_matrix(&mut g, 3 * s, 11);
    for mut col in a.column_iter_mut() {
        let p = col.dot(&e) / e.norm_squared();
        col -= &e * p;
    }
    let m = DVector::from_element(11, 1.0);
    let sys = synthetic(3, a.clone(), &a * &m + &e);
    let w = rescale_objective(&sys).unwrap();
    let (a0, b0) = sys.fit_system();
    let (a1, b1) = w.fit_system();
    assert!((a1 - a0).amax() < 1e-10 && (b1 - b0).amax() < 1e-10);
}

#[test]
fn noisier_channel_is_downweighted_tenfold() {
    let mut g = rng(24);
    let s = 80;
    let e = DVector::from_fn(2 * s, |i, _| {
        let (k, ch) = (i / 2, i % 2);
        let sign = if (k / 2) % 2 == 0 { 1.0 } else { -1.0 };
        match (k % 2, ch) {
            (0, 0) => 10.0 * 2f64.sqrt() * sign,
            (1, 1) => 2f64.sqrt() * sign,
            _ => 0.0,
        }
    });
    let mut a = random_matrix(&mut g, 2 * s, 7);
    for mut col in a.column_iter_mut() {
        let p = col.dot(&e) / e.norm_squared();
        col -= &e * p;
    }
    let m = DVector::from_element(7, 1.0);
    let sys = synthetic(2, a.clone(), &a * &m + &e);
    let w = rescale_objective(&sys).unwrap();
    let (a1, _) = w.fit_system();
    for k in 0..s {
        let r0 = a1.row(2 * k).norm() / a.row(2 * k).norm();
        let r1 = a1.row(2 * k + 1).norm() / a.row(2 * k + 1).norm();
        assert!((r0 / r1 - 0.1).abs() < 1e-9, "{r0} {r1}");
    }
}

#[test]
fn whitening_noiseless_data_changes_nothing() {
    let model = landsalp_model();
    let opts = RegressionOptions { lambda: Some(0.0), ..Default::default() };
    let sys = build_regression(clean_data(), &model.chain, model.mode, &opts).unwrap();
    let plain = identify(&sys).unwrap().metric.to_vec();
    let white = identify(&rescale_objective(&sys).unwrap()).unwrap().metric.to_vec();
    assert!(max_rel(&white, &plain) < 1e-6);
}

#[test]
fn passive_center_wheel_flags_what_it_cannot_separate() {
    let model = landsalp_model();
    let mut passive = model.clone();
    passive.chain.u_max[1] = 0.0;
    let data = generate_identification_dataset(&passive, 2, &DatasetOptions::default()).unwrap();
    assert!(data.iter().all(|d| d.commands.iter().all(|u| u[1] == 0.0)));
    let sys = build_regression(&data, &model.chain, model.mode, &RegressionOptions::default()).unwrap();
    let res = identify(&sys).unwrap();
    let report = &res.condition_report;
    // the unactuated unit is still dragged along, so its own coefficients stay
    // observable; what collapses is the cross-axis drag of the outer units
    let labels = LocalMetric::labels(3);
    let weak = &report.weakly_observable;
    assert!(!weak.is_empty());
    assert!(weak.iter().all(|w| !w.starts_with("unit2")), "{weak:?}");
    assert!(weak.contains(&"unit1_y".to_string()) && weak.contains(&"unit3_y".to_string()), "{weak:?}");
    assert_eq!(report.independent_share.len(), labels.len());
}
