//! Analytic gradients against central finite differences.

mod common;

use common::rel_err;
use glam::{DQuat, DVec3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use skinfield_core::field::{BoundingBox, Factor, FactorizedField, FieldGradients, GridDims};
use skinfield_core::raymarch::{composite, composite_backward};
use skinfield_core::skinning::{pose_mesh, AffineGrad, Pose, Skeleton, SkinnedTemplate, VertexWeights};

fn random_field(rng: &mut ChaCha8Rng) -> FactorizedField {
    let bbox = BoundingBox::new([-1.0, -0.5, -0.8], [1.0, 0.7, 0.6]).unwrap();
    FactorizedField::random(GridDims::new(5, 6, 7).unwrap(), bbox, 3, 2, 4.0, 0.6, rng).unwrap()
}

/// Scalar probe `a·σ + b·c` at `x`.
fn probe(field: &FactorizedField, x: DVec3, a: f64, b: [f64; 3]) -> f64 {
    let s = field.sample(x);
    a * s.sigma + (0..3).map(|k| b[k] * s.rgb[k]).sum::<f64>()
}

#[test]
fn field_parameter_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut field = random_field(&mut rng);
    let mut worst = 0.0f64;
    let mut probes = 0;
    for _ in 0..40 {
        let x = DVec3::new(rng.gen_range(-0.95..0.95), rng.gen_range(-0.45..0.65), rng.gen_range(-0.75..0.55));
        let a = rng.gen_range(-1.0..1.0);
        let b = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
        let mut g = FieldGradients::for_field(&field);
        field.backprop_sample(x, a, b, &mut g);
        for _ in 0..4 {
            let group = rng.gen_range(0..4);
            let f = Factor::ALL[rng.gen_range(0..6)];
            let t = g.groups()[group].get(f);
            // pick a touched entry
            let touched: Vec<usize> = (0..t.len()).filter(|k| t[*k].abs() > 1e-9).collect();
            if touched.is_empty() {
                continue;
            }
            let k = touched[rng.gen_range(0..touched.len())];
            let v = field.groups()[group].factors().get(f)[k];
            let h = 1e-3f32;
            field.groups_mut()[group].factors_mut().get_mut(f)[k] = v + h;
            let lp = probe(&field, x, a, b);
            field.groups_mut()[group].factors_mut().get_mut(f)[k] = v - h;
            let lm = probe(&field, x, a, b);
            field.groups_mut()[group].factors_mut().get_mut(f)[k] = v;
            let n = (lp - lm) / ((v + h) as f64 - (v - h) as f64);
            worst = worst.max(rel_err(t[k], n));
            probes += 1;
        }
    }
    assert!(probes >= 100, "{probes}");
    assert!(worst < 1e-3, "worst {worst}");
}

#[test]
fn field_spatial_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let field = random_field(&mut rng);
    let mut worst = 0.0f64;
    for _ in 0..60 {
        let x = DVec3::new(rng.gen_range(-0.9..0.9), rng.gen_range(-0.4..0.6), rng.gen_range(-0.7..0.5));
        let a = rng.gen_range(-1.0..1.0);
        let b = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
        let p = field.grid_point(x).unwrap();
        let g = field.backprop_at(&p, a, b, None, true);
        // stay inside one trilinear cell so the probe is smooth
        let h = 1e-7;
        for k in 0..3 {
            let e = DVec3::AXES[k] * h;
            let n = (probe(&field, x + e, a, b) - probe(&field, x - e, a, b)) / (2.0 * h);
            worst = worst.max(rel_err(g[k], n));
        }
    }
    assert!(worst < 1e-3, "worst {worst}");
}

#[test]
fn compositing_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let n = rng.gen_range(2..24);
        let step = rng.gen_range(0.01..0.2);
        let mut sig: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..20.0)).collect();
        let mut col: Vec<[f64; 3]> = (0..n).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect();
        let bg = [rng.gen(), rng.gen(), rng.gen()];
        let dc = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
        let loss = |s: &[f64], c: &[[f64; 3]]| {
            let r = composite(s, c, step, &[]).unwrap();
            (0..3).map(|k| dc[k] * (r.color[k] + (1.0 - r.opacity) * bg[k])).sum::<f64>()
        };
        let (mut ds, mut dcol) = (vec![0.0; n], vec![[0.0; 3]; n]);
        composite_backward(&sig, &col, step, bg, dc, &mut ds, &mut dcol);
        let h = 1e-6;
        for i in 0..n {
            let v = sig[i];
            sig[i] = v + h;
            let lp = loss(&sig, &col);
            sig[i] = v - h;
            let lm = loss(&sig, &col);
            sig[i] = v;
            let num = (lp - lm) / (2.0 * h);
            if ds[i].abs() > 1e-9 || num.abs() > 1e-9 {
                worst = worst.max(rel_err(ds[i], num));
            }
            for k in 0..3 {
                let v = col[i][k];
                col[i][k] = v + h;
                let lp = loss(&sig, &col);
                col[i][k] = v - h;
                let lm = loss(&sig, &col);
                col[i][k] = v;
                let num = (lp - lm) / (2.0 * h);
                if dcol[i][k].abs() > 1e-9 || num.abs() > 1e-9 {
                    worst = worst.max(rel_err(dcol[i][k], num));
                }
            }
        }
    }
    assert!(worst < 1e-3, "worst {worst}");
}

fn two_bone() -> (Skeleton, SkinnedTemplate) {
    let sk = Skeleton::new(vec![None, Some(0)], vec![[0.2, 0.1, 0.0], [1.0, 0.0, 0.0]], Pose::identity(2)).unwrap();
    let verts = vec![[0.5, 0.2, 0.1], [1.1, -0.1, 0.2], [1.6, 0.3, -0.2], [0.9, 0.0, 0.4]];
    let weights = vec![
        VertexWeights::one_hot(0),
        VertexWeights::from_dense(&[0.4, 0.6]),
        VertexWeights::one_hot(1),
        VertexWeights::from_dense(&[0.7, 0.3]),
    ];
    (sk, SkinnedTemplate::new(verts, vec![[0, 1, 2], [0, 2, 3]], weights).unwrap())
}

#[test]
fn inverse_warp_and_pose_gradients() {
    let (sk, tpl) = two_bone();
    let rots = vec![
        DQuat::from_scaled_axis(DVec3::new(0.2, -0.4, 0.3)),
        DQuat::from_scaled_axis(DVec3::new(-0.1, 0.2, 0.9)),
    ];
    let root = DVec3::new(0.1, -0.2, 0.3);
    let x = DVec3::new(0.7, 0.4, -0.1);
    let w = DVec3::new(0.3, -0.8, 0.5);
    // L = w · (A_v⁻¹ x) summed over vertices
    let loss = |rots: &[DQuat], root: DVec3| {
        let a = sk.affines_from(rots, root);
        let posed = pose_mesh(&tpl, &a);
        posed.inverse.iter().map(|m| w.dot(m.transform_point3(x))).sum::<f64>()
    };
    let a = sk.affines_from(&rots, root);
    let posed = pose_mesh(&tpl, &a);
    let mut ag = vec![AffineGrad::ZERO; 2];
    for v in 0..tpl.vertices.len() {
        posed.backprop_inverse(v, &tpl.weights[v], posed.inverse[v].transform_point3(x), w, &a, &mut ag);
    }
    let (rg, tg) = sk.pose_gradient_from(&rots, root, &a, &ag);
    let h = 1e-6;
    let mut worst = 0.0f64;
    for b in 0..2 {
        for k in 0..3 {
            let e = DVec3::AXES[k];
            let mut p = rots.clone();
            p[b] = DQuat::from_scaled_axis(e * h) * rots[b];
            let mut m = rots.clone();
            m[b] = DQuat::from_scaled_axis(-e * h) * rots[b];
            let n = (loss(&p, root) - loss(&m, root)) / (2.0 * h);
            worst = worst.max(rel_err(rg[b][k], n));
        }
    }
    for k in 0..3 {
        let e = DVec3::AXES[k] * h;
        let n = (loss(&rots, root + e) - loss(&rots, root - e)) / (2.0 * h);
        worst = worst.max(rel_err(tg[k], n));
    }
    assert!(worst < 1e-3, "worst {worst}");
}
