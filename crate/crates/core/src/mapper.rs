//! Map growth and refinement with the camera poses held fixed.

use std::collections::HashSet;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::frame_consistency_loss;
use crate::image::LabelImage;
use crate::optim::Adam;
use crate::par;
use crate::render::{render, render_backward, Gradients, ResidualWeights, GAUSSIAN_PARAMS, NEAR_PLANE};
use crate::scene::{project_to_simplex, CameraIntrinsics, Gaussian, GaussianMap, Observation, Pose};
use crate::tracker::{frame_loss, LossWeights};

/// Splats fainter than this are dropped after refinement.
pub const PRUNE_OPACITY: f64 = 0.005;
pub const MIN_RADIUS: f64 = 1e-6;
pub const DENSIFY_STRIDE: usize = 2;
pub const DENSIFY_OPACITY: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MappingConfig {
    pub top_k: usize,
    pub refine_iterations: usize,
    /// Pixels rendered below this silhouette get new splats.
    pub densify_silhouette_threshold: f64,
    /// Multiplies the frame's median absolute depth error.
    pub densify_depth_error_factor: f64,
    /// Depth errors below this never trigger densification.
    pub densify_depth_error_floor: f64,
    pub sc_weight: f64,
    pub overlap_voxel: f64,
    pub weights: LossWeights,
    /// When set, only pixels whose silhouette exceeds this count toward
    /// the mapping loss; by default every pixel does.
    pub silhouette_gate: Option<f64>,
    pub position_step: f64,
    pub radius_step: f64,
    pub opacity_step: f64,
    pub color_step: f64,
    pub semantic_step: f64,
}

impl Default for MappingConfig {
    fn default() -> Self {
        Self {
            top_k: 5,
            refine_iterations: 60,
            densify_silhouette_threshold: 0.5,
            densify_depth_error_factor: 50.0,
            densify_depth_error_floor: 1e-3,
            sc_weight: 2.0,
            overlap_voxel: 0.05,
            weights: LossWeights::default(),
            silhouette_gate: None,
            position_step: 1e-3,
            radius_step: 5e-4,
            opacity_step: 2e-2,
            color_step: 5e-3,
            semantic_step: 1e-2,
        }
    }
}

impl MappingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.top_k == 0 {
            return Err(Error::Config("mapping.top_k must be at least 1".into()));
        }
        if !(self.densify_silhouette_threshold > 0.0 && self.densify_silhouette_threshold < 1.0) {
            return Err(Error::Config("mapping.densify_silhouette_threshold must lie in (0,1)".into()));
        }
        if !(self.densify_depth_error_factor > 0.0) || !(self.densify_depth_error_floor >= 0.0) {
            return Err(Error::Config("mapping depth-error trigger must be positive".into()));
        }
        if !(self.sc_weight >= 0.0) {
            return Err(Error::Config("mapping.sc_weight must be non-negative".into()));
        }
        if !(self.overlap_voxel > 0.0) {
            return Err(Error::Config("mapping.overlap_voxel must be positive".into()));
        }
        if self.silhouette_gate.is_some_and(|g| !(0.0..1.0).contains(&g)) {
            return Err(Error::Config("mapping.silhouette_gate must lie in [0,1)".into()));
        }
        let w = &self.weights;
        if !(w.rgb >= 0.0 && w.depth >= 0.0 && w.semantic >= 0.0) {
            return Err(Error::Config("mapping weights must be non-negative".into()));
        }
        let steps = [
            self.position_step,
            self.radius_step,
            self.opacity_step,
            self.color_step,
            self.semantic_step,
        ];
        if steps.iter().any(|s| !(*s >= 0.0)) {
            return Err(Error::Config("mapping step sizes must be non-negative".into()));
        }
        Ok(())
    }
}

/// A stored frame with its world-frame point cloud.
#[derive(Debug, Clone)]
pub struct Keyframe {
    pub frame_index: usize,
    pub pose: Pose,
    pub observation: Observation,
    pub point_cloud: Vec<Vector3<f64>>,
}

impl Keyframe {
    /// Back-projects every valid depth pixel into the world frame.
    pub fn new(pose: Pose, observation: Observation, intr: &CameraIntrinsics) -> Result<Self> {
        observation.validate(intr)?;
        let to_world = pose.inverse();
        let w = intr.width;
        let point_cloud = observation
            .depth
            .data()
            .iter()
            .enumerate()
            .filter(|(_, &z)| z > 0.0)
            .map(|(i, &z)| to_world.transform_point(&intr.back_project((i % w) as f64, (i / w) as f64, z)))
            .collect();
        Ok(Self {
            frame_index: observation.frame_index,
            pose,
            observation,
            point_cloud,
        })
    }
}

fn voxel_key(p: &Vector3<f64>, voxel: f64) -> (i64, i64, i64) {
    (
        (p.x / voxel).floor() as i64,
        (p.y / voxel).floor() as i64,
        (p.z / voxel).floor() as i64,
    )
}

fn voxel_set(points: &[Vector3<f64>], voxel: f64) -> HashSet<(i64, i64, i64)> {
    points.iter().map(|p| voxel_key(p, voxel)).collect()
}

fn overlap_with(current: &[Vector3<f64>], occupied: &HashSet<(i64, i64, i64)>, voxel: f64) -> f64 {
    let hits = current.iter().filter(|p| occupied.contains(&voxel_key(p, voxel))).count();
    hits as f64 / current.len() as f64
}

/// Fraction of the current cloud's points landing in voxels occupied by
/// the candidate's cloud.
pub fn overlap(current: &Keyframe, candidate: &Keyframe, voxel: f64) -> Result<f64> {
    if current.point_cloud.is_empty() {
        return Err(Error::invalid(format!(
            "frame {} has no valid depth to measure overlap from",
            current.frame_index
        )));
    }
    if !(voxel > 0.0) {
        return Err(Error::invalid(format!("voxel size must be positive, got {voxel}")));
    }
    let occupied = voxel_set(&candidate.point_cloud, voxel);
    Ok(overlap_with(&current.point_cloud, &occupied, voxel))
}

/// The current frame followed by the `top_k` history keyframes of highest
/// overlap, more recent frames first on ties.
pub fn select_keyframes<'a>(current: &'a Keyframe, history: &'a [Keyframe], cfg: &MappingConfig) -> Vec<&'a Keyframe> {
    let scores: Vec<f64> = if current.point_cloud.is_empty() {
        vec![0.0; history.len()]
    } else {
        par::map_slice(history, |k| {
            overlap_with(&current.point_cloud, &voxel_set(&k.point_cloud, cfg.overlap_voxel), cfg.overlap_voxel)
        })
    };
    let mut order: Vec<usize> = (0..history.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .total_cmp(&scores[a])
            .then(history[b].frame_index.cmp(&history[a].frame_index))
    });
    let mut out = vec![current];
    out.extend(order.into_iter().take(cfg.top_k).map(|i| &history[i]));
    out
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Adds one splat per uncovered or badly explained pixel on a stride-2
/// grid. Returns how many were added.
pub fn densify(
    map: &mut GaussianMap,
    obs: &Observation,
    pose: &Pose,
    intr: &CameraIntrinsics,
    cfg: &MappingConfig,
) -> Result<usize> {
    obs.validate(intr)?;
    if obs.valid_depth_count() == 0 {
        return Ok(0);
    }
    let s = map.semantic_dim();
    let n = intr.pixel_count();
    let (silhouette, rendered_depth) = if map.is_empty() {
        (vec![0.0; n], vec![0.0; n])
    } else {
        let f = render(map, pose, intr)?;
        (f.silhouette.into_vec(), f.depth.into_vec())
    };
    let obs_depth = obs.depth.data();
    let errors: Vec<f64> = (0..n)
        .filter(|&i| obs_depth[i] > 0.0)
        .map(|i| (rendered_depth[i] - obs_depth[i]).abs())
        .collect();
    let depth_trigger = (cfg.densify_depth_error_factor * median(errors)).max(cfg.densify_depth_error_floor);

    let to_world = pose.inverse();
    let mut added = Vec::new();
    for y in (0..intr.height).step_by(DENSIFY_STRIDE) {
        for x in (0..intr.width).step_by(DENSIFY_STRIDE) {
            let i = y * intr.width + x;
            let z = obs_depth[i];
            if !(z > NEAR_PLANE) {
                continue;
            }
            let uncovered = silhouette[i] < cfg.densify_silhouette_threshold;
            // something new in front of what the map explains
            let occluder = rendered_depth[i] > z && rendered_depth[i] - z > depth_trigger;
            if !(uncovered || occluder) {
                continue;
            }
            let label = obs.semantic.data()[i] as usize;
            if label >= s {
                return Err(Error::invalid(format!(
                    "observed label {label} out of range for {s} semantic channels"
                )));
            }
            let c = obs.rgb.at(i);
            let g = Gaussian::with_label(
                to_world.transform_point(&intr.back_project(x as f64, y as f64, z)),
                z / intr.focal_x,
                DENSIFY_OPACITY,
                Vector3::new(c[0], c[1], c[2]).map(|v| v.clamp(0.0, 1.0)),
                label,
                s,
            )?;
            added.push(g);
        }
    }
    let count = added.len();
    for g in added {
        map.push(g, obs.frame_index)?;
    }
    Ok(count)
}

/// Relabeled semantics of one frame, compared against the map's semantic
/// render at `pose`.
#[derive(Debug, Clone)]
pub struct ConsistencyFrame {
    pub frame_index: usize,
    pub pose: Pose,
    pub updated: LabelImage,
}

/// Components of the mapping objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MappingLoss {
    /// Sum of the frame losses over the keyframes.
    pub tracking: f64,
    pub consistency: f64,
    pub total: f64,
}

impl MappingLoss {
    pub fn compose(tracking: f64, consistency: f64, sc_weight: f64) -> Self {
        Self {
            tracking,
            consistency,
            total: tracking + sc_weight * consistency,
        }
    }
}

// One render per view: a keyframe, a consistency frame, or both when they
// share a frame index.
struct View<'a> {
    pose: Pose,
    observation: Option<&'a Observation>,
    updated: Option<&'a LabelImage>,
}

fn views<'a>(keyframes: &[&'a Keyframe], sc_frames: &'a [ConsistencyFrame], sc_weight: f64) -> Vec<View<'a>> {
    let mut views: Vec<(usize, View<'a>)> = keyframes
        .iter()
        .map(|k| {
            (
                k.frame_index,
                View {
                    pose: k.pose,
                    observation: Some(&k.observation),
                    updated: None,
                },
            )
        })
        .collect();
    if sc_weight > 0.0 {
        for f in sc_frames {
            match views.iter_mut().find(|(i, v)| *i == f.frame_index && v.updated.is_none()) {
                Some((_, v)) => v.updated = Some(&f.updated),
                None => views.push((
                    f.frame_index,
                    View {
                        pose: f.pose,
                        observation: None,
                        updated: Some(&f.updated),
                    },
                )),
            }
        }
    }
    // reductions run in ascending frame order
    views.sort_by_key(|(i, _)| *i);
    views.into_iter().map(|(_, v)| v).collect()
}

fn evaluate_views(
    map: &GaussianMap,
    views: &[View],
    intr: &CameraIntrinsics,
    cfg: &MappingConfig,
    with_grad: bool,
) -> Result<(MappingLoss, Option<Gradients>)> {
    let per_view = par::map_slice(views, |v| -> Result<(f64, f64, Option<Gradients>)> {
        let frame = render(map, &v.pose, intr)?;
        let mut tracking = 0.0;
        let mut consistency = 0.0;
        let mut weights = with_grad.then(|| ResidualWeights::zeros(intr.width, intr.height, map.semantic_dim()));
        if let Some(obs) = v.observation {
            let (l, g) = frame_loss(
                &frame,
                obs,
                &cfg.weights,
                cfg.silhouette_gate.unwrap_or(f64::NEG_INFINITY),
                with_grad,
            )?;
            tracking = l.value;
            if let Some(g) = g {
                weights = Some(g);
            }
        }
        if let Some(updated) = v.updated {
            let (l, g) = frame_consistency_loss(&frame.semantic, updated, with_grad)?;
            consistency = l;
            if let (Some(w), Some(g)) = (weights.as_mut(), g) {
                for (a, b) in w.semantic.data_mut().iter_mut().zip(g.data()) {
                    *a += cfg.sc_weight * b;
                }
            }
        }
        let grad = match weights {
            Some(w) => Some(render_backward(map, &v.pose, intr, &frame, &w)?),
            None => None,
        };
        Ok((tracking, consistency, grad))
    });
    let mut tracking = 0.0;
    let mut consistency = 0.0;
    let mut total_grad: Option<Gradients> = None;
    for r in per_view {
        let (t, c, g) = r?;
        tracking += t;
        consistency += c;
        if let Some(g) = g {
            match total_grad.as_mut() {
                Some(acc) => acc.add_scaled(&g, 1.0),
                None => total_grad = Some(g),
            }
        }
    }
    Ok((MappingLoss::compose(tracking, consistency, cfg.sc_weight), total_grad))
}

/// Evaluates the mapping objective without changing the map.
pub fn mapping_loss(
    map: &GaussianMap,
    keyframes: &[&Keyframe],
    sc_frames: &[ConsistencyFrame],
    intr: &CameraIntrinsics,
    cfg: &MappingConfig,
) -> Result<MappingLoss> {
    let v = views(keyframes, sc_frames, cfg.sc_weight);
    Ok(evaluate_views(map, &v, intr, cfg, false)?.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefineResult {
    pub initial: MappingLoss,
    pub final_loss: MappingLoss,
    /// Steps that improved on the best loss so far.
    pub iterations: usize,
    pub pruned: usize,
    /// Best total loss after each improving step, starting with the initial loss.
    pub loss_history: Vec<f64>,
}

fn project_parameters(g: &mut Gaussian) {
    g.opacity = g.opacity.clamp(0.0, 1.0);
    g.color = g.color.map(|c| c.clamp(0.0, 1.0));
    g.radius = g.radius.max(MIN_RADIUS);
    project_to_simplex(&mut g.semantic);
}

fn apply_step(map: &mut GaussianMap, step: &[f64]) {
    let stride = GAUSSIAN_PARAMS + map.semantic_dim();
    for (g, d) in map.gaussians_mut().iter_mut().zip(step.chunks_exact(stride)) {
        g.position += Vector3::new(d[0], d[1], d[2]);
        g.radius += d[3];
        g.opacity += d[4];
        g.color += Vector3::new(d[5], d[6], d[7]);
        for (s, ds) in g.semantic.iter_mut().zip(&d[GAUSSIAN_PARAMS..]) {
            *s += ds;
        }
        project_parameters(g);
    }
}

/// Minimizes the summed keyframe losses plus `sc_weight` times the
/// consistency loss over all splat parameters, then prunes faint splats.
///
/// Adam runs for `refine_iterations` steps and the best map seen is kept;
/// the loss has small jumps where pixels cross a splat's cutoff, which a
/// monotone line search cannot step over.
pub fn refine_map(
    map: &mut GaussianMap,
    keyframes: &[&Keyframe],
    sc_frames: &[ConsistencyFrame],
    intr: &CameraIntrinsics,
    cfg: &MappingConfig,
) -> Result<RefineResult> {
    cfg.validate()?;
    if keyframes.is_empty() {
        return Err(Error::invalid("refine_map needs at least one keyframe"));
    }
    let v = views(keyframes, sc_frames, cfg.sc_weight);
    let (initial, mut grad) = evaluate_views(map, &v, intr, cfg, true)?;
    let mut loss = initial;
    let mut history = vec![initial.total];
    let mut iterations = 0;

    if !map.is_empty() && cfg.refine_iterations > 0 {
        let stride = GAUSSIAN_PARAMS + map.semantic_dim();
        let mut per_splat = vec![cfg.position_step; 3];
        per_splat.push(cfg.radius_step);
        per_splat.push(cfg.opacity_step);
        per_splat.extend([cfg.color_step; 3]);
        per_splat.extend(vec![cfg.semantic_step; map.semantic_dim()]);
        debug_assert_eq!(per_splat.len(), stride);
        let lr: Vec<f64> = per_splat.iter().copied().cycle().take(stride * map.len()).collect();
        let mut adam = Adam::new(lr);
        let mut current = map.clone();
        for _ in 0..cfg.refine_iterations {
            let g = match grad.as_ref() {
                Some(g) if g.params().iter().any(|&x| x != 0.0) => g,
                _ => break,
            };
            let step = adam.step(g.params(), 1.0);
            apply_step(&mut current, &step);
            let (l, g) = evaluate_views(&current, &v, intr, cfg, true)?;
            grad = g;
            if l.total <= loss.total {
                *map = current.clone();
                loss = l;
                history.push(l.total);
                iterations += 1;
            }
        }
    }

    let pruned = map.retain(|g| g.opacity >= PRUNE_OPACITY);
    if pruned > 0 && !map.is_empty() {
        loss = evaluate_views(map, &v, intr, cfg, false)?.0;
    }
    Ok(RefineResult {
        initial,
        final_loss: loss,
        iterations,
        pruned,
        loss_history: history,
    })
}
