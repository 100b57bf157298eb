//! Frame-by-frame SLAM loop: track, densify, relabel over the window, refine.

use serde::{Deserialize, Serialize};

use crate::dataset::{FeatureRecord, SequenceBundle};
use crate::error::{Error, Result};
use crate::graph::{build_graph, cluster, relabel_targets, MaskNode};
use crate::image::LabelImage;
use crate::mapper::{densify, refine_map, select_keyframes, ConsistencyFrame, Keyframe, MappingConfig};
use crate::metrics::{evaluate, FrameRender, MetricsReport};
use crate::render::render;
use crate::scene::{CameraIntrinsics, GaussianMap, Observation, Pose};
use crate::tracker::{constant_velocity_init, track_frame, TrackingConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GraphConfig {
    pub tau: f64,
    /// Largest frame gap an edge may span; also the relabeling window.
    pub window: usize,
}

impl Default for GraphConfig {
    fn default() -> Self {
        Self { tau: 0.8, window: 8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub tracking: TrackingConfig,
    pub mapping: MappingConfig,
    pub graph: GraphConfig,
    /// Refine the map on frame 0 and every this many frames after.
    pub keyframe_every: usize,
    pub semantic_enabled: bool,
    pub consistency_enabled: bool,
    /// Start at the first ground-truth pose when the bundle has one.
    pub anchor_to_ground_truth: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            tracking: TrackingConfig::default(),
            mapping: MappingConfig::default(),
            graph: GraphConfig::default(),
            keyframe_every: 5,
            semantic_enabled: true,
            consistency_enabled: true,
            anchor_to_ground_truth: true,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.tracking.validate()?;
        self.mapping.validate()?;
        if !(self.graph.tau > 0.0 && self.graph.tau <= 1.0) {
            return Err(Error::Config("graph.tau must lie in (0,1]".into()));
        }
        if self.graph.window == 0 {
            return Err(Error::Config("graph.window must be at least 1".into()));
        }
        if self.keyframe_every == 0 {
            return Err(Error::Config("keyframe_every must be at least 1".into()));
        }
        Ok(())
    }

    /// The three ablation settings: no semantics, semantics without the
    /// consistency term, and the full system.
    pub fn ablation(&self) -> [(&'static str, PipelineConfig); 3] {
        let with = |semantic, consistency| PipelineConfig {
            semantic_enabled: semantic,
            consistency_enabled: consistency,
            ..self.clone()
        };
        [
            ("no-seg", with(false, false)),
            ("seg", with(true, false)),
            ("seg+consistency", with(true, true)),
        ]
    }

    fn tracking_config(&self) -> TrackingConfig {
        let mut t = self.tracking.clone();
        if !self.semantic_enabled {
            t.weights.semantic = 0.0;
        }
        t
    }

    fn mapping_config(&self) -> MappingConfig {
        let mut m = self.mapping.clone();
        if !self.semantic_enabled {
            m.weights.semantic = 0.0;
        }
        if !(self.semantic_enabled && self.consistency_enabled) {
            m.sc_weight = 0.0;
        }
        m
    }
}

#[derive(Debug, Clone)]
pub struct PipelineState {
    pub map: GaussianMap,
    pub trajectory: Vec<Pose>,
    pub keyframes: Vec<Keyframe>,
    /// Mask nodes of the frames still inside the window.
    pub graph_window: Vec<MaskNode>,
    pub observed_semantics: Vec<LabelImage>,
    pub updated_semantics: Vec<LabelImage>,
    pub frame_cursor: usize,
}

impl PipelineState {
    pub fn new(semantic_dim: usize) -> Result<Self> {
        Ok(Self {
            map: GaussianMap::new(semantic_dim)?,
            trajectory: Vec::new(),
            keyframes: Vec::new(),
            graph_window: Vec::new(),
            observed_semantics: Vec::new(),
            updated_semantics: Vec::new(),
            frame_cursor: 0,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameReport {
    pub frame_index: usize,
    /// Frame loss at the tracked pose; absent for the first frame.
    pub tracking_loss: Option<f64>,
    pub tracking_iterations: usize,
    pub added: usize,
    pub relabeled: usize,
    /// Consistency loss at the end of refinement, when the map was refined.
    pub consistency_loss: Option<f64>,
    pub mapping_loss: Option<f64>,
    pub mapping_iterations: usize,
    pub pruned: usize,
    pub gaussian_count: usize,
    pub keyframes: Vec<usize>,
    pub warning: Option<String>,
}

/// Advances the pipeline by one frame. `anchor` fixes the first pose.
pub fn process_frame(
    state: &mut PipelineState,
    obs: &Observation,
    records: &[FeatureRecord],
    intr: &CameraIntrinsics,
    cfg: &PipelineConfig,
    anchor: Option<Pose>,
) -> Result<FrameReport> {
    let k = state.frame_cursor;
    if obs.frame_index != k {
        return Err(Error::state(format!("expected frame {k}, got frame {}", obs.frame_index)));
    }
    obs.validate(intr)?;
    let tracking = cfg.tracking_config();
    let mapping = cfg.mapping_config();
    let mut report = FrameReport {
        frame_index: k,
        tracking_loss: None,
        tracking_iterations: 0,
        added: 0,
        relabeled: 0,
        consistency_loss: None,
        mapping_loss: None,
        mapping_iterations: 0,
        pruned: 0,
        gaussian_count: 0,
        keyframes: Vec::new(),
        warning: None,
    };

    // (1)-(2) pose
    let pose = match k {
        0 => anchor.unwrap_or_else(Pose::identity),
        _ => {
            let t = &state.trajectory;
            let init = if k >= 2 {
                constant_velocity_init(&t[k - 1], &t[k - 2])
            } else {
                t[k - 1]
            };
            if state.map.is_empty() {
                report.warning = Some(format!("frame {k}: map is empty, keeping the initial pose"));
                init
            } else {
                let r = track_frame(&state.map, &init, obs, intr, &tracking)?;
                if r.degenerate {
                    report.warning = Some(format!("frame {k}: no pixel passed the silhouette gate, keeping the initial pose"));
                }
                report.tracking_loss = Some(r.final_loss);
                report.tracking_iterations = r.iterations;
                r.pose
            }
        }
    };
    state.trajectory.push(pose);

    // (3) growth
    report.added = densify(&mut state.map, obs, &pose, intr, &mapping)?;

    // (4) temporal consistency over the window
    state.observed_semantics.push(obs.semantic.clone());
    state.updated_semantics.push(obs.semantic.clone());
    let window = cfg.graph.window;
    let first = k.saturating_sub(window);
    if cfg.semantic_enabled && cfg.consistency_enabled {
        state.graph_window.retain(|n| n.frame_index >= first);
        for r in records {
            state.graph_window.push(MaskNode::from_record(r)?);
        }
        let graph = build_graph(state.graph_window.clone(), cfg.graph.tau, window)?;
        let result = cluster(&graph);
        let targets = relabel_targets(&result, &graph);
        for f in first..=k {
            state.updated_semantics[f] = state.observed_semantics[f].clone();
        }
        for (node, target) in graph.nodes().iter().zip(targets) {
            let frame = &mut state.updated_semantics[node.frame_index];
            if node.pixel_mask.width() != frame.width() || node.pixel_mask.height() != frame.height() {
                return Err(Error::invalid(format!(
                    "mask {} of frame {} does not fit the frame",
                    node.mask_id, node.frame_index
                )));
            }
            if let Some(label) = target {
                if node.frame_index == k {
                    report.relabeled += 1;
                }
                let data = frame.data_mut();
                for p in node.pixel_mask.indices() {
                    data[p] = label;
                }
            }
        }
    }

    // (5) refinement
    if k.is_multiple_of(cfg.keyframe_every) {
        let current = Keyframe::new(pose, obs.clone(), intr)?;
        let sc_frames: Vec<ConsistencyFrame> = if mapping.sc_weight > 0.0 {
            (first..=k)
                .map(|f| ConsistencyFrame {
                    frame_index: f,
                    pose: state.trajectory[f],
                    updated: state.updated_semantics[f].clone(),
                })
                .collect()
        } else {
            Vec::new()
        };
        let selected = select_keyframes(&current, &state.keyframes, &mapping);
        report.keyframes = selected.iter().map(|kf| kf.frame_index).collect();
        if !state.map.is_empty() {
            let r = refine_map(&mut state.map, &selected, &sc_frames, intr, &mapping)?;
            report.mapping_loss = Some(r.final_loss.total);
            report.consistency_loss = Some(r.final_loss.consistency);
            report.mapping_iterations = r.iterations;
            report.pruned = r.pruned;
        }
        state.keyframes.push(current);
    }

    report.gaussian_count = state.map.len();
    state.frame_cursor += 1;
    Ok(report)
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub trajectory: Vec<Pose>,
    pub map: GaussianMap,
    pub reports: Vec<FrameReport>,
    pub updated_semantics: Vec<LabelImage>,
    /// The final map rendered at every estimated pose.
    pub renders: Vec<FrameRender>,
    pub metrics: MetricsReport,
}

pub fn run_sequence(bundle: &SequenceBundle, cfg: &PipelineConfig) -> Result<RunOutput> {
    cfg.validate()?;
    bundle.validate()?;
    if bundle.is_empty() {
        return Err(Error::invalid("bundle has no frames"));
    }
    let anchor = match (&bundle.gt_poses, cfg.anchor_to_ground_truth) {
        (Some(gt), true) => Some(gt[0]),
        _ => None,
    };
    let intr = &bundle.intrinsics;
    let mut state = PipelineState::new(bundle.semantic_dim)?;
    let mut reports = Vec::with_capacity(bundle.len());
    for (k, obs) in bundle.frames.iter().enumerate() {
        let records = bundle.feature_records.get(k).map(Vec::as_slice).unwrap_or(&[]);
        reports.push(process_frame(&mut state, obs, records, intr, cfg, anchor)?);
    }
    let renders = state
        .trajectory
        .iter()
        .map(|p| render(&state.map, p, intr).map(|f| FrameRender::from(&f)))
        .collect::<Result<Vec<_>>>()?;
    let metrics = evaluate(bundle, &state.trajectory, &renders)?;
    Ok(RunOutput {
        trajectory: state.trajectory,
        map: state.map,
        reports,
        updated_semantics: state.updated_semantics,
        renders,
        metrics,
    })
}
