use nalgebra::{DVector, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{FeatureRecord, SequenceBundle};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::mask::RleMask;
use crate::render::render;
use crate::scene::{CameraIntrinsics, Gaussian, GaussianMap, Observation, Pose};

/// Observed depth is reported only where the ground-truth silhouette
/// reaches this value; elsewhere it is 0 (invalid).
pub const DEPTH_VALID_SILHOUETTE: f64 = 0.9;

/// Masks smaller than this are not reported as feature records.
const MIN_MASK_PIXELS: usize = 4;

const FRAME_RATE: f64 = 30.0;

/// Depth of the object slab relative to its width.
const SLAB_DEPTH: f64 = 0.25;

/// Camera circling the scene center while looking at it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OrbitConfig {
    pub radius: f64,
    pub height: f64,
    pub degrees_per_frame: f64,
}

impl Default for OrbitConfig {
    fn default() -> Self {
        Self {
            radius: 1.2,
            height: 0.4,
            degrees_per_frame: 1.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub seed: u64,
    pub gaussian_count: usize,
    pub orbit: OrbitConfig,
    pub frame_count: usize,
    pub width: usize,
    pub height: usize,
    /// Object classes; label ids `1..=class_count`, 0 is background and the
    /// last channel is the reserved novel slot.
    pub class_count: usize,
    pub label_flip_rate: f64,
    pub feature_noise: f64,
    pub feature_dim: usize,
    /// Focal length in pixels; 0 means "equal to the image width".
    pub focal: f64,
    /// Half-extent of the cube object centers are drawn from.
    pub object_extent: f64,
    /// Minimum distance between object centers, measured across the slab.
    pub object_gap: f64,
    /// Half-extent of the cube around each object center that its splats
    /// are drawn from.
    pub object_spread: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            gaussian_count: 50,
            orbit: OrbitConfig::default(),
            frame_count: 20,
            width: 64,
            height: 64,
            class_count: 6,
            label_flip_rate: 0.0,
            feature_noise: 0.02,
            feature_dim: 16,
            focal: 0.0,
            object_extent: 0.5,
            object_gap: 0.45,
            object_spread: 0.05,
        }
    }
}

impl SynthConfig {
    pub fn semantic_dim(&self) -> usize {
        self.class_count + 2
    }

    pub fn intrinsics(&self) -> Result<CameraIntrinsics> {
        let f = if self.focal > 0.0 { self.focal } else { self.width as f64 };
        CameraIntrinsics::new(f, f, self.width as f64 / 2.0, self.height as f64 / 2.0, self.width, self.height)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.orbit.radius > 0.0) {
            return Err(Error::invalid("orbit radius must be positive"));
        }
        if !self.orbit.height.is_finite() || !self.orbit.degrees_per_frame.is_finite() {
            return Err(Error::invalid("orbit parameters must be finite"));
        }
        if self.frame_count == 0 || self.gaussian_count == 0 {
            return Err(Error::invalid("frame_count and gaussian_count must be positive"));
        }
        if self.class_count == 0 || self.class_count + 2 > u16::MAX as usize {
            return Err(Error::invalid("class_count out of range"));
        }
        if !(0.0..=1.0).contains(&self.label_flip_rate) {
            return Err(Error::invalid("label_flip_rate must lie in [0,1]"));
        }
        if !(self.feature_noise >= 0.0) || self.feature_dim == 0 {
            return Err(Error::invalid("feature_noise must be >= 0 and feature_dim > 0"));
        }
        if !(self.object_spread >= 0.0) || !(self.object_extent >= 0.0) {
            return Err(Error::invalid("object_extent and object_spread must be >= 0"));
        }
        self.intrinsics()?;
        Ok(())
    }

    /// World-to-camera pose of frame `k`.
    pub fn orbit_pose(&self, k: usize) -> Result<Pose> {
        let theta = (k as f64 * self.orbit.degrees_per_frame).to_radians();
        let eye = Vector3::new(
            self.orbit.radius * theta.sin(),
            self.orbit.height,
            -self.orbit.radius * theta.cos(),
        );
        Pose::look_at(eye, Vector3::zeros(), Vector3::new(0.0, 1.0, 0.0))
    }
}

#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub bundle: SequenceBundle,
    pub gt_map: GaussianMap,
}

fn uniform_color(rng: &mut ChaCha8Rng) -> Vector3<f64> {
    Vector3::new(
        rng.random_range(0.1..0.9),
        rng.random_range(0.1..0.9),
        rng.random_range(0.1..0.9),
    )
}

fn gaussian_vector(rng: &mut ChaCha8Rng, dim: usize) -> DVector<f64> {
    DVector::from_iterator(dim, (0..dim).map(|_| StandardNormal.sample(rng)))
}

/// Class anchors: orthonormal when they fit in the embedding space,
/// otherwise independent random unit vectors.
fn class_anchors(rng: &mut ChaCha8Rng, classes: usize, dim: usize) -> Vec<DVector<f64>> {
    let mut anchors: Vec<DVector<f64>> = Vec::with_capacity(classes);
    while anchors.len() < classes {
        let mut v = gaussian_vector(rng, dim);
        if anchors.len() < dim {
            for a in &anchors {
                let proj = a.dot(&v);
                v -= a * proj;
            }
        }
        let n = v.norm();
        if n > 1e-6 {
            anchors.push(v / n);
        }
    }
    anchors
}

/// Unit embedding near `anchor`; the noise vector has expected norm about
/// `noise`. Entries are rounded through `f32` so files round-trip exactly.
fn noisy_embedding(rng: &mut ChaCha8Rng, anchor: &DVector<f64>, noise: f64) -> Vec<f64> {
    let dim = anchor.len();
    let v = anchor + gaussian_vector(rng, dim) * (noise / (dim as f64).sqrt());
    let v = v.normalize();
    v.iter().map(|&x| x as f32 as f64).collect()
}

/// Builds a ground-truth scene, renders it along the orbit, and emits
/// per-object mask records whose labels are flipped at `label_flip_rate`.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<SynthOutput> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let intr = cfg.intrinsics()?;
    let s = cfg.semantic_dim();
    let classes = cfg.class_count;

    // One object per class, splats assigned round-robin.
    // Objects sit side by side in a slab facing the start of the orbit so
    // that different objects rarely overlap on screen.
    let e = cfg.object_extent;
    let min_gap = cfg.object_gap;
    let mut centers: Vec<Vector3<f64>> = Vec::with_capacity(classes);
    let mut attempts = 0;
    while centers.len() < classes {
        let c = Vector3::new(
            rng.random_range(-e..=e),
            rng.random_range(-e..=e),
            rng.random_range(-e..=e) * SLAB_DEPTH,
        );
        attempts += 1;
        let clear = centers.iter().all(|o| (o.xy() - c.xy()).norm() >= min_gap);
        if clear || attempts > 10_000 {
            centers.push(c);
        }
    }
    let base_colors: Vec<Vector3<f64>> = (0..classes).map(|_| uniform_color(&mut rng)).collect();
    let mut gt_map = GaussianMap::new(s)?;
    for i in 0..cfg.gaussian_count {
        let obj = i % classes;
        let spread = cfg.object_spread;
        let offset = Vector3::new(
            rng.random_range(-spread..=spread),
            rng.random_range(-spread..=spread),
            rng.random_range(-spread..=spread),
        );
        let position = (centers[obj] + offset).map(|x| x.clamp(-0.5, 0.5));
        let color = base_colors[obj];
        let g = Gaussian::with_label(
            position,
            rng.random_range(0.05..0.08),
            rng.random_range(0.95..0.99),
            color,
            obj + 1,
            s,
        )?;
        gt_map.push(g, 0)?;
    }

    let anchors = class_anchors(&mut rng, classes, cfg.feature_dim);

    let mut frames = Vec::with_capacity(cfg.frame_count);
    let mut poses = Vec::with_capacity(cfg.frame_count);
    let mut records = Vec::with_capacity(cfg.frame_count);
    let mut clean = Vec::with_capacity(cfg.frame_count);
    for k in 0..cfg.frame_count {
        let pose = cfg.orbit_pose(k)?;
        let rendered = render(&gt_map, &pose, &intr)?;
        let depth: Vec<f64> = rendered
            .depth
            .data()
            .iter()
            .zip(rendered.silhouette.data())
            .map(|(&d, &sil)| if sil >= DEPTH_VALID_SILHOUETTE { d } else { 0.0 })
            .collect();
        let labels = rendered.label_image();
        let mut observed = labels.clone();

        let mut frame_records = Vec::new();
        for class in 1..=classes as u16 {
            let bits: Vec<bool> = labels.data().iter().map(|&l| l == class).collect();
            let mask = RleMask::from_bits(intr.width, intr.height, &bits);
            if mask.count() < MIN_MASK_PIXELS {
                continue;
            }
            let embedding = noisy_embedding(&mut rng, &anchors[class as usize - 1], cfg.feature_noise);
            let mut label = class;
            if classes > 1 && rng.random_bool(cfg.label_flip_rate) {
                let pick = rng.random_range(0..classes - 1) as u16 + 1;
                label = if pick >= class { pick + 1 } else { pick };
                for i in mask.indices() {
                    observed.data_mut()[i] = label;
                }
            }
            frame_records.push(FeatureRecord {
                frame_index: k,
                mask_id: frame_records.len() as u32,
                label,
                embedding,
                mask,
                gt_label: Some(class),
            });
        }

        frames.push(Observation {
            rgb: rendered.color.clone(),
            depth: Image::from_vec(intr.width, intr.height, 1, depth),
            semantic: observed,
            frame_index: k,
            timestamp: k as f64 / FRAME_RATE,
        });
        poses.push(pose);
        records.push(frame_records);
        clean.push(labels);
    }

    let mut label_vocab: Vec<(u16, String)> = vec![(0, "background".to_string())];
    label_vocab.extend((1..=classes as u16).map(|c| (c, format!("class_{c}"))));
    label_vocab.push(((s - 1) as u16, "novel".to_string()));

    let bundle = SequenceBundle {
        intrinsics: intr,
        frames,
        gt_poses: Some(poses),
        feature_records: records,
        label_vocab,
        semantic_dim: s,
        feature_dim: cfg.feature_dim,
        gt_semantics: Some(clean),
        geometric_only: false,
    };
    bundle.validate()?;
    Ok(SynthOutput { bundle, gt_map })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            frame_count: 4,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn clean_labels_without_flips() {
        let out = generate_synthetic(&small()).unwrap();
        let b = &out.bundle;
        assert!(b.feature_records.iter().flatten().count() > 0);
        for r in b.feature_records.iter().flatten() {
            assert_eq!(Some(r.label), r.gt_label);
        }
        assert_eq!(b.frames[0].semantic, b.gt_semantics.as_ref().unwrap()[0]);
    }

    #[test]
    fn forced_flip_with_two_classes() {
        let cfg = SynthConfig {
            class_count: 2,
            label_flip_rate: 1.0,
            ..small()
        };
        let out = generate_synthetic(&cfg).unwrap();
        let recs: Vec<_> = out.bundle.feature_records.iter().flatten().collect();
        assert!(!recs.is_empty());
        for r in recs {
            let gt = r.gt_label.unwrap();
            assert_eq!(r.label, 3 - gt);
            let frame = &out.bundle.frames[r.frame_index];
            assert!(r.mask.indices().all(|i| frame.semantic.data()[i] == r.label));
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let a = generate_synthetic(&small()).unwrap();
        let b = generate_synthetic(&small()).unwrap();
        assert_eq!(a.bundle, b.bundle);
        let c = generate_synthetic(&SynthConfig { seed: 7, ..small() }).unwrap();
        assert_ne!(a.bundle, c.bundle);
    }

    #[test]
    fn zero_radius_orbit_rejected() {
        let mut cfg = small();
        cfg.orbit.radius = 0.0;
        assert!(matches!(generate_synthetic(&cfg), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn frames_reproduce_ground_truth_render() {
        let out = generate_synthetic(&small()).unwrap();
        let b = &out.bundle;
        for (obs, pose) in b.frames.iter().zip(b.gt_poses.as_ref().unwrap()) {
            let f = render(&out.gt_map, pose, &b.intrinsics).unwrap();
            for (x, y) in f.color.data().iter().zip(obs.rgb.data()) {
                assert!((x - y).abs() < 1e-6);
            }
            for (i, &d) in obs.depth.data().iter().enumerate() {
                if d > 0.0 {
                    assert!((f.depth.data()[i] - d).abs() < 1e-6);
                }
            }
        }
    }
}
