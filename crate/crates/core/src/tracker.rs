//! Camera tracking against a frozen map by minimizing the silhouette-gated
//! weighted L1 loss over depth, color and semantics.

use nalgebra::{UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::Adam;
use crate::render::{render, render_backward, RenderedFrame, ResidualWeights};
use crate::scene::{CameraIntrinsics, GaussianMap, Observation, Pose};

/// Per-term weights of the frame loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub rgb: f64,
    pub depth: f64,
    pub semantic: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            rgb: 0.5,
            depth: 1.0,
            semantic: 1.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrackingConfig {
    /// Maximum number of accepted descent steps.
    pub max_iterations: usize,
    /// Adam learning rate for the rotation increment (radians).
    pub rotation_step: f64,
    /// Adam learning rate for the translation increment (world units).
    pub translation_step: f64,
    /// Stop once an accepted step lowers the loss by less than this.
    pub convergence_tol: f64,
    /// Stop after this many consecutive step halvings.
    pub max_halvings: usize,
    pub weights: LossWeights,
    /// Pixels count only where the rendered silhouette exceeds this.
    pub silhouette_gate: f64,
}

impl Default for TrackingConfig {
    fn default() -> Self {
        Self {
            max_iterations: 60,
            rotation_step: 2e-3,
            translation_step: 1e-3,
            convergence_tol: 1e-6,
            max_halvings: 10,
            weights: LossWeights::default(),
            silhouette_gate: 0.99,
        }
    }
}

impl TrackingConfig {
    pub fn validate(&self) -> Result<()> {
        let w = &self.weights;
        if !(w.rgb >= 0.0 && w.depth >= 0.0 && w.semantic >= 0.0) || w.rgb + w.depth + w.semantic <= 0.0 {
            return Err(Error::Config("tracking weights must be non-negative and not all zero".into()));
        }
        if !(self.silhouette_gate > 0.0 && self.silhouette_gate < 1.0) {
            return Err(Error::Config("tracking.silhouette_gate must lie in (0,1)".into()));
        }
        if self.max_iterations == 0 {
            return Err(Error::Config("tracking.max_iterations must be at least 1".into()));
        }
        if !(self.rotation_step > 0.0 && self.translation_step > 0.0) {
            return Err(Error::Config("tracking step sizes must be positive".into()));
        }
        Ok(())
    }
}

/// Loss value and how many pixels passed the silhouette gate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameLoss {
    pub value: f64,
    pub gated_pixels: usize,
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Gated weighted L1 loss between a render and an observation, optionally
/// with its gradient with respect to the rendered channels.
///
/// A pixel counts when `s(p) > gate`. Pixels with invalid (zero) observed
/// depth drop only the depth term. Observed labels are one-hot encoded.
pub fn frame_loss(
    rendered: &RenderedFrame,
    observed: &Observation,
    weights: &LossWeights,
    gate: f64,
    with_grad: bool,
) -> Result<(FrameLoss, Option<ResidualWeights>)> {
    let (w, h, s) = (rendered.width(), rendered.height(), rendered.semantic_dim());
    if observed.rgb.width() != w
        || observed.rgb.height() != h
        || observed.depth.width() != w
        || observed.depth.height() != h
        || observed.semantic.width() != w
        || observed.semantic.height() != h
    {
        return Err(Error::invalid(format!(
            "observation is {}x{}, render is {w}x{h}",
            observed.rgb.width(),
            observed.rgb.height()
        )));
    }
    let mut grad = with_grad.then(|| ResidualWeights::zeros(w, h, s));
    let mut value = 0.0;
    let mut gated = 0;
    for i in 0..w * h {
        if !(rendered.silhouette.data()[i] > gate) {
            continue;
        }
        gated += 1;
        let label = observed.semantic.data()[i] as usize;
        if label >= s {
            return Err(Error::invalid(format!(
                "observed label {label} out of range for {s} semantic channels"
            )));
        }
        let obs_d = observed.depth.data()[i];
        if obs_d > 0.0 && weights.depth != 0.0 {
            let r = rendered.depth.data()[i] - obs_d;
            value += weights.depth * r.abs();
            if let Some(g) = grad.as_mut() {
                g.depth.data_mut()[i] = weights.depth * sign(r);
            }
        }
        if weights.rgb != 0.0 {
            let rc = rendered.color.at(i);
            let oc = observed.rgb.at(i);
            for ch in 0..3 {
                let r = rc[ch] - oc[ch];
                value += weights.rgb * r.abs();
                if let Some(g) = grad.as_mut() {
                    g.color.data_mut()[3 * i + ch] = weights.rgb * sign(r);
                }
            }
        }
        if weights.semantic != 0.0 {
            let rs = rendered.semantic.at(i);
            // rendered semantics lie in [0,1], so each residual's sign is
            // fixed by its one-hot target, even where it is zero
            for k in 0..s {
                let (r, slope) = if k == label { (1.0 - rs[k], -1.0) } else { (rs[k], 1.0) };
                value += weights.semantic * r.abs();
                if let Some(g) = grad.as_mut() {
                    g.semantic.data_mut()[s * i + k] = weights.semantic * slope;
                }
            }
        }
    }
    Ok((
        FrameLoss {
            value,
            gated_pixels: gated,
        },
        grad,
    ))
}

/// Frame loss with the default weights (0.5 rgb, 1 depth, 1.5 semantic)
/// and the 0.99 silhouette gate.
pub fn tracking_loss(rendered: &RenderedFrame, observed: &Observation) -> Result<f64> {
    let cfg = TrackingConfig::default();
    Ok(frame_loss(rendered, observed, &cfg.weights, cfg.silhouette_gate, false)?
        .0
        .value)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackingResult {
    pub pose: Pose,
    pub initial_loss: f64,
    pub final_loss: f64,
    /// Accepted descent steps.
    pub iterations: usize,
    /// No pixel passed the gate at the initial pose; the pose is unchanged.
    pub degenerate: bool,
    /// Loss after each accepted step, starting with the initial loss.
    pub loss_history: Vec<f64>,
}

/// Point on the optical axis at the mean normalized depth of the gated
/// pixels. Rotating about it instead of the camera center decouples the
/// rotation from the translation it would otherwise induce.
fn tangent_pivot(frame: &RenderedFrame, gate: f64) -> Vector3<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (&s, &d) in frame.silhouette.data().iter().zip(frame.depth.data()) {
        if s > gate && d > 0.0 {
            sum += d / s;
            n += 1;
        }
    }
    let z = if n > 0 { sum / n as f64 } else { 0.0 };
    Vector3::new(0.0, 0.0, z)
}

/// Estimates the pose of `obs` against a frozen map, starting at `init`.
///
/// Adam in the pose tangent space, with rotations taken about a pivot in
/// front of the camera. A free-running pass keeps the best pose it visits;
/// an accept/reject descent then refines it, halving the step scale on a
/// rejected trial and doubling it back after an accepted one.
pub fn track_frame(
    map: &GaussianMap,
    init: &Pose,
    obs: &Observation,
    intr: &CameraIntrinsics,
    cfg: &TrackingConfig,
) -> Result<TrackingResult> {
    cfg.validate()?;
    if map.is_empty() {
        return Err(Error::state("cannot track against an empty map"));
    }
    obs.validate(intr)?;
    let evaluate = |pose: &Pose| -> Result<(RenderedFrame, FrameLoss)> {
        let frame = render(map, pose, intr)?;
        let (loss, _) = frame_loss(&frame, obs, &cfg.weights, cfg.silhouette_gate, false)?;
        Ok((frame, loss))
    };
    let gradient = |pose: &Pose, frame: &RenderedFrame| -> Result<[f64; 6]> {
        let (_, g) = frame_loss(frame, obs, &cfg.weights, cfg.silhouette_gate, true)?;
        let g = g.expect("gradient requested");
        Ok(render_backward(map, pose, intr, frame, &g)?.pose)
    };

    let mut pose = *init;
    let (mut frame, loss0) = evaluate(&pose)?;
    if loss0.gated_pixels == 0 {
        return Ok(TrackingResult {
            pose,
            initial_loss: loss0.value,
            final_loss: loss0.value,
            iterations: 0,
            degenerate: true,
            loss_history: vec![loss0.value],
        });
    }

    let pivot = tangent_pivot(&frame, cfg.silhouette_gate);
    let to_pivot = |g: [f64; 6]| -> [f64; 6] {
        let w = Vector3::new(g[0], g[1], g[2]) - pivot.cross(&Vector3::new(g[3], g[4], g[5]));
        [w.x, w.y, w.z, g[3], g[4], g[5]]
    };
    let from_pivot = |d: [f64; 6]| -> [f64; 6] {
        let w = Vector3::new(d[0], d[1], d[2]);
        let v = Vector3::new(d[3], d[4], d[5]) + pivot - UnitQuaternion::from_scaled_axis(w) * pivot;
        [d[0], d[1], d[2], v.x, v.y, v.z]
    };
    let r = cfg.rotation_step;
    let t = cfg.translation_step;
    let mut adam = Adam::new(vec![r, r, r, t, t, t]);
    let mut loss = loss0.value;
    let mut history = vec![loss];
    let mut grad = gradient(&pose, &frame)?;
    let mut scale = 1.0;
    let mut halvings = 0;
    let mut iterations = 0;

    // coarse phase: free-running Adam keeping the best pose seen, which
    // crosses the small kinks that stall a monotone descent
    let mut best = (loss, pose, grad);
    let mut cur = pose;
    for _ in 0..cfg.max_iterations {
        if grad.iter().all(|&g| g == 0.0) {
            break;
        }
        let step = adam.step(&to_pivot(grad), 1.0);
        let delta: [f64; 6] = from_pivot(step.try_into().expect("six pose parameters"));
        cur = cur.retract(&delta);
        let (f, l) = evaluate(&cur)?;
        if l.gated_pixels == 0 {
            break;
        }
        grad = gradient(&cur, &f)?;
        if l.value < best.0 {
            best = (l.value, cur, grad);
        }
    }
    if best.0 < loss {
        history.push(best.0);
    }
    (loss, pose, grad) = best;
    adam = Adam::new(vec![r, r, r, t, t, t]);

    // fine phase: accept/reject descent from the best pose
    while iterations < cfg.max_iterations {
        if grad.iter().all(|&g| g == 0.0) {
            break;
        }
        let mut trial = adam.clone();
        let step = trial.step(&to_pivot(grad), scale);
        let delta: [f64; 6] = from_pivot(step.try_into().expect("six pose parameters"));
        let candidate = pose.retract(&delta);
        let (cand_frame, cand_loss) = evaluate(&candidate)?;
        if cand_loss.gated_pixels > 0 && cand_loss.value <= loss {
            let decrease = loss - cand_loss.value;
            adam = trial;
            pose = candidate;
            frame = cand_frame;
            loss = cand_loss.value;
            history.push(loss);
            iterations += 1;
            halvings = 0;
            // a tiny decrease only signals convergence at the full step
            if decrease < cfg.convergence_tol && scale >= 1.0 {
                break;
            }
            scale = (scale * 2.0).min(1.0);
            grad = gradient(&pose, &frame)?;
        } else {
            // stale momentum can point uphill near a kink; restart from the
            // current gradient with a shorter step
            adam.reset();
            scale *= 0.5;
            halvings += 1;
            if halvings > cfg.max_halvings {
                break;
            }
        }
    }

    Ok(TrackingResult {
        pose,
        initial_loss: loss0.value,
        final_loss: loss,
        iterations,
        degenerate: false,
        loss_history: history,
    })
}

/// Extrapolates the motion from `prev_prev` to `prev` one more frame.
pub fn constant_velocity_init(prev: &Pose, prev_prev: &Pose) -> Pose {
    let motion = prev.compose(&prev_prev.inverse());
    motion.compose(prev)
}
