mod common;

use nalgebra::Matrix3;

use common::*;
use salpgeo::body_frame::{offset_fiber_field, optimize_body_frame, reexpress, ShapeBox};
use salpgeo::presets::landsalp_model;
use salpgeo::se2::{Pose, Twist};

/// `sum |Ad_{h^-1} xi_i|^2` over the fiber columns, from matrix conjugation.
fn frobenius_after_offset(fiber: &[[f64; 3]], x: f64, y: f64) -> f64 {
    let h = trans(x, y);
    let hi: Matrix3<f64> = h.try_inverse().unwrap();
    fiber.iter().map(|c| vee(&(hi * hat(c) * h)).iter().map(|v| v * v).sum::<f64>()).sum()
}

#[test]
fn single_shape_offset_matches_a_dense_search() {
    let model = landsalp_model();
    let r = [0.25, -0.1];
    let field = optimize_body_frame(&model, &ShapeBox { lo: r, hi: r, points: [1, 1] }).unwrap();
    let a = model.control_field(&r).unwrap().a;
    let fiber: Vec<[f64; 3]> = (0..3).map(|c| [a[(0, c)], a[(1, c)], a[(2, c)]]).collect();

    let search = |cx: f64, cy: f64, half: f64, res: f64| {
        let n = (half / res).round() as i64;
        let mut best = (f64::INFINITY, 0.0, 0.0);
        for i in -n..=n {
            for j in -n..=n {
                let (x, y) = (cx + i as f64 * res, cy + j as f64 * res);
                let f = frobenius_after_offset(&fiber, x, y);
                if f < best.0 {
                    best = (f, x, y);
                }
            }
        }
        best
    };
    let (_, cx, cy) = search(0.0, 0.0, 1.0, 0.01);
    let (fbest, x, y) = search(cx, cy, 0.02, 0.001);

    let h = field.offsets[0];
    assert!(h.theta.abs() < 1e-12);
    assert!((h.x - x).abs() <= 1e-3 && (h.y - y).abs() <= 1e-3, "{h:?} vs ({x}, {y})");
    assert!(field.objective <= fbest * (1.0 + 1e-9));
    let moved = offset_fiber_field(&model, &r, &h).unwrap();
    assert!((moved.norm_squared() - field.objective).abs() <= 1e-9 * field.objective);
}

#[test]
fn symmetric_region_keeps_the_straight_shape_frame() {
    let model = landsalp_model();
    let field = optimize_body_frame(&model, &ShapeBox { lo: [-0.3, -0.3], hi: [0.3, 0.3], points: [5, 5] }).unwrap();
    let h = field.offset_at(&[0.0, 0.0]);
    assert!(h.x.abs() < 1e-6 && h.y.abs() < 1e-6 && h.theta.abs() < 1e-6, "{h:?}");
    assert!(field.reduction_ratio <= 1.0);
}

#[test]
fn optimized_frame_never_does_worse_than_the_default() {
    let model = landsalp_model();
    for region in [
        ShapeBox { lo: [0.1, -0.4], hi: [0.5, 0.0], points: [3, 4] },
        ShapeBox { lo: [-0.2, 0.3], hi: [-0.2, 0.6], points: [1, 4] },
    ] {
        let field = optimize_body_frame(&model, &region).unwrap();
        assert!(field.reduction_ratio <= 1.0 && field.objective <= field.default_objective);
        assert_eq!(field.offsets.len(), region.points[0] * region.points[1]);
    }
}

#[test]
fn bad_regions_are_rejected() {
    let model = landsalp_model();
    assert!(optimize_body_frame(&model, &ShapeBox { lo: [0.0, 0.0], hi: [0.1, 0.1], points: [0, 3] }).is_err());
    assert!(optimize_body_frame(&model, &ShapeBox { lo: [0.2, 0.0], hi: [0.1, 0.1], points: [2, 2] }).is_err());
    assert!(optimize_body_frame(&model, &ShapeBox { lo: [-5.0, 0.0], hi: [0.1, 0.1], points: [2, 2] }).is_err());
}

#[test]
fn reexpression_agrees_with_the_offset_field() {
    let model = landsalp_model();
    let mut g = rng(61);
    for _ in 0..20 {
        let r = random_shape(&mut g, &model, 0.8);
        let u = random_vec(&mut g, 3, 0.03);
        let h = Pose::new(uniform(&mut g, -0.2, 0.2), uniform(&mut g, -0.2, 0.2), uniform(&mut g, -1.0, 1.0));
        let v = model.control_field(&r).unwrap().apply(&u);
        let direct = reexpress(&Twist::new(v[0], v[1], v[2]), &h);
        let via = offset_fiber_field(&model, &r, &h).unwrap() * nalgebra::DVector::from_vec(u);
        let hm = hom(&h);
        let oracle = vee(&(hm.try_inverse().unwrap() * hat(&[v[0], v[1], v[2]]) * hm));
        for k in 0..3 {
            assert!((direct.to_vector()[k] - via[k]).abs() < 1e-12);
            assert!((via[k] - oracle[k]).abs() < 1e-12);
        }
    }
}
