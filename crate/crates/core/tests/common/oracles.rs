//! Test oracles kept independent of the library's rendering path: a naive
//! per-pixel splatter with its own projection, seeded random scenes, and a
//! central-difference gradient checker.

#![allow(dead_code)]

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use semsplat::render::{render, render_backward, RenderedFrame, ResidualWeights};
use semsplat::{CameraIntrinsics, Gaussian, GaussianMap, Image, Pose};

pub struct Scene {
    pub map: GaussianMap,
    pub pose: Pose,
    pub intr: CameraIntrinsics,
}

/// Random scene with `count` splats in front of a 16×16 camera.
pub fn random_scene(seed: u64, count: usize, semantic_dim: usize) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let intr = CameraIntrinsics::new(20.0, 20.0, 8.0, 8.0, 16, 16).unwrap();
    let mut map = GaussianMap::new(semantic_dim).unwrap();
    for _ in 0..count {
        let mut semantic: Vec<f64> = (0..semantic_dim).map(|_| rng.random_range(0.05..1.0)).collect();
        let sum: f64 = semantic.iter().sum();
        semantic.iter_mut().for_each(|s| *s /= sum);
        let g = Gaussian {
            position: Vector3::new(
                rng.random_range(-0.35..0.35),
                rng.random_range(-0.35..0.35),
                rng.random_range(1.0..2.0),
            ),
            radius: rng.random_range(0.08..0.2),
            opacity: rng.random_range(0.3..0.9),
            color: Vector3::new(rng.random(), rng.random(), rng.random()),
            semantic,
        };
        map.push(g, 0).unwrap();
    }
    let axis = Vector3::new(
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
    )
    .normalize()
        * rng.random_range(0.0..0.08);
    let t = Vector3::new(
        rng.random_range(-0.05..0.05),
        rng.random_range(-0.05..0.05),
        rng.random_range(-0.05..0.05),
    );
    Scene {
        map,
        pose: Pose::from_axis_angle(axis, t),
        intr,
    }
}

pub struct NaiveFrame {
    pub color: Vec<f64>,
    pub depth: Vec<f64>,
    pub semantic: Vec<f64>,
    pub silhouette: Vec<f64>,
}

/// Straight per-pixel evaluation: every splat, own projection, full sort,
/// no tiling and no early termination.
pub fn naive_render(map: &GaussianMap, pose: &Pose, k: &CameraIntrinsics) -> NaiveFrame {
    let s = map.semantic_dim();
    let n = k.width * k.height;
    let rot = pose.rotation.to_rotation_matrix();
    let mut out = NaiveFrame {
        color: vec![0.0; 3 * n],
        depth: vec![0.0; n],
        semantic: vec![0.0; s * n],
        silhouette: vec![0.0; n],
    };
    for v in 0..k.height {
        for u in 0..k.width {
            let i = v * k.width + u;
            let mut hits: Vec<(f64, usize, f64)> = Vec::new();
            for (gi, g) in map.gaussians().iter().enumerate() {
                let xc = rot * g.position + pose.translation;
                let z = xc.z;
                if z <= 0.01 {
                    continue;
                }
                let mx = k.focal_x * xc.x / z + k.principal_x;
                let my = k.focal_y * xc.y / z + k.principal_y;
                let rho = k.focal_x * g.radius / z;
                let q = (u as f64 - mx).powi(2) + (v as f64 - my).powi(2);
                if q > 9.0 * rho * rho {
                    continue;
                }
                let f = (g.opacity * (-q / (2.0 * rho * rho)).exp()).clamp(0.0, 0.9999);
                if f > 0.0 {
                    hits.push((z, gi, f));
                }
            }
            hits.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
            let mut t = 1.0;
            for (z, gi, f) in hits {
                let g = &map.gaussians()[gi];
                let w = f * t;
                for c in 0..3 {
                    out.color[3 * i + c] += w * g.color[c];
                }
                out.depth[i] += w * z;
                for c in 0..s {
                    out.semantic[s * i + c] += w * g.semantic[c];
                }
                out.silhouette[i] += w;
                t *= 1.0 - f;
            }
        }
    }
    out
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Random linear functional over every rendered channel.
pub fn random_weights(seed: u64, k: &CameraIntrinsics, s: usize) -> ResidualWeights {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let mut fill = |w: usize, h: usize, c: usize| {
        Image::from_vec(w, h, c, (0..w * h * c).map(|_| rng.random_range(-1.0..1.0)).collect())
    };
    ResidualWeights {
        color: fill(k.width, k.height, 3),
        depth: fill(k.width, k.height, 1),
        semantic: fill(k.width, k.height, s),
        silhouette: fill(k.width, k.height, 1),
    }
}

pub fn functional(frame: &RenderedFrame, w: &ResidualWeights) -> f64 {
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    dot(frame.color.data(), w.color.data())
        + dot(frame.depth.data(), w.depth.data())
        + dot(frame.semantic.data(), w.semantic.data())
        + dot(frame.silhouette.data(), w.silhouette.data())
}

/// Per-pixel contributor identity, used to detect finite-difference probes
/// that straddle a cutoff, an order swap or an early stop.
fn signature(frame: &RenderedFrame) -> Vec<Vec<usize>> {
    (0..frame.width() * frame.height())
        .map(|i| {
            frame
                .contributors(i)
                .iter()
                .map(|c| frame.projected()[c.projected as usize].source_index)
                .collect()
        })
        .collect()
}

fn param_mut(g: &mut Gaussian, k: usize) -> &mut f64 {
    match k {
        0..=2 => &mut g.position[k],
        3 => &mut g.radius,
        4 => &mut g.opacity,
        5..=7 => &mut g.color[k - 5],
        _ => &mut g.semantic[k - 8],
    }
}

#[derive(Debug, Default)]
pub struct GradCheck {
    pub checked: usize,
    pub skipped_nonsmooth: usize,
    pub failures: Vec<String>,
    pub worst_rel: f64,
}

pub fn within(analytic: f64, numeric: f64) -> bool {
    let diff = (analytic - numeric).abs();
    diff <= 1e-7_f64.max(1e-4 * analytic.abs().max(numeric.abs()))
}

/// Compares every analytic partial against central differences.
pub fn gradient_check(scene: &Scene, weight_seed: u64, step: f64) -> GradCheck {
    let Scene { map, pose, intr } = scene;
    let s = map.semantic_dim();
    let weights = random_weights(weight_seed, intr, s);
    let base = render(map, pose, intr).unwrap();
    let grads = render_backward(map, pose, intr, &base, &weights).unwrap();
    let base_sig = signature(&base);
    let mut report = GradCheck::default();

    let mut record = |name: String, analytic: f64, plus: &RenderedFrame, minus: &RenderedFrame| {
        if signature(plus) != base_sig || signature(minus) != base_sig {
            report.skipped_nonsmooth += 1;
            return;
        }
        let numeric = (functional(plus, &weights) - functional(minus, &weights)) / (2.0 * step);
        report.checked += 1;
        let scale = analytic.abs().max(numeric.abs());
        if scale > 0.0 {
            report.worst_rel = report.worst_rel.max((analytic - numeric).abs() / scale.max(1e-3));
        }
        if !within(analytic, numeric) {
            report
                .failures
                .push(format!("{name}: analytic {analytic:.9e} numeric {numeric:.9e}"));
        }
    };

    for gi in 0..map.len() {
        for k in 0..8 + s {
            let mut plus = map.clone();
            *param_mut(&mut plus.gaussians_mut()[gi], k) += step;
            let mut minus = map.clone();
            *param_mut(&mut minus.gaussians_mut()[gi], k) -= step;
            let fp = render(&plus, pose, intr).unwrap();
            let fm = render(&minus, pose, intr).unwrap();
            record(format!("gaussian {gi} param {k}"), grads.gaussian(gi)[k], &fp, &fm);
        }
    }
    for k in 0..6 {
        let mut d = [0.0; 6];
        d[k] = step;
        let fp = render(map, &pose.retract(&d), intr).unwrap();
        d[k] = -step;
        let fm = render(map, &pose.retract(&d), intr).unwrap();
        record(format!("pose {k}"), grads.pose[k], &fp, &fm);
    }
    report
}
