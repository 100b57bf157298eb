//! Shared domain types: splats, cameras, poses, observations and the map.

use std::sync::atomic::{AtomicU64, Ordering};

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image, LabelImage};

/// Label id reserved for background pixels.
pub const BACKGROUND_LABEL: u16 = 0;

/// Tolerance on the semantic simplex sum.
pub const SIMPLEX_TOL: f64 = 1e-6;

/// One isotropic splat with an appended class-probability vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Gaussian {
    pub position: Vector3<f64>,
    pub radius: f64,
    pub opacity: f64,
    pub color: Vector3<f64>,
    pub semantic: Vec<f64>,
}

impl Gaussian {
    /// Splat whose semantic vector is one-hot at `label`.
    pub fn with_label(
        position: Vector3<f64>,
        radius: f64,
        opacity: f64,
        color: Vector3<f64>,
        label: usize,
        semantic_dim: usize,
    ) -> Result<Self> {
        if label >= semantic_dim {
            return Err(Error::invalid(format!(
                "label {label} out of range for semantic dimension {semantic_dim}"
            )));
        }
        let mut semantic = vec![0.0; semantic_dim];
        semantic[label] = 1.0;
        let g = Self {
            position,
            radius,
            opacity,
            color,
            semantic,
        };
        g.validate(semantic_dim)?;
        Ok(g)
    }

    pub fn validate(&self, semantic_dim: usize) -> Result<()> {
        if !(self.radius > 0.0) || !self.radius.is_finite() {
            return Err(Error::invalid(format!("radius must be > 0, got {}", self.radius)));
        }
        if !(0.0..=1.0).contains(&self.opacity) {
            return Err(Error::invalid(format!("opacity {} outside [0,1]", self.opacity)));
        }
        if self.color.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::invalid("color channel outside [0,1]"));
        }
        if !self.position.iter().all(|x| x.is_finite()) {
            return Err(Error::invalid("non-finite position"));
        }
        if self.semantic.len() != semantic_dim {
            return Err(Error::invalid(format!(
                "semantic vector has {} entries, map expects {semantic_dim}",
                self.semantic.len()
            )));
        }
        if self.semantic.iter().any(|s| !(0.0..=1.0).contains(s)) {
            return Err(Error::invalid("semantic entry outside [0,1]"));
        }
        let sum: f64 = self.semantic.iter().sum();
        if (sum - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::invalid(format!("semantic vector sums to {sum}, not 1")));
        }
        Ok(())
    }

    /// Index of the largest semantic entry (smallest index on ties).
    pub fn label(&self) -> usize {
        argmax(&self.semantic)
    }
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Clamps to `[0, ∞)` and renormalizes. A vector with no positive mass
/// becomes uniform.
pub fn project_to_simplex(v: &mut [f64]) {
    let mut sum = 0.0;
    for x in v.iter_mut() {
        if !(*x > 0.0) {
            *x = 0.0;
        }
        sum += *x;
    }
    if sum > 0.0 {
        for x in v.iter_mut() {
            *x = (*x / sum).min(1.0);
        }
    } else {
        let u = 1.0 / v.len() as f64;
        v.iter_mut().for_each(|x| *x = u);
    }
}

/// Pinhole intrinsics. Pixel `(u, v)` sits at integer image coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub focal_x: f64,
    pub focal_y: f64,
    pub principal_x: f64,
    pub principal_y: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(
        focal_x: f64,
        focal_y: f64,
        principal_x: f64,
        principal_y: f64,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let k = Self {
            focal_x,
            focal_y,
            principal_x,
            principal_y,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.focal_x > 0.0 && self.focal_y > 0.0) {
            return Err(Error::invalid("focal lengths must be positive"));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::invalid("image dimensions must be positive"));
        }
        let inside_x = (0.0..=self.width as f64).contains(&self.principal_x);
        let inside_y = (0.0..=self.height as f64).contains(&self.principal_y);
        if !(inside_x && inside_y) {
            return Err(Error::invalid("principal point outside the image"));
        }
        Ok(())
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    /// Camera-frame point seen at pixel `(u, v)` with depth `z`.
    pub fn back_project(&self, u: f64, v: f64, z: f64) -> Vector3<f64> {
        Vector3::new(
            (u - self.principal_x) * z / self.focal_x,
            (v - self.principal_y) * z / self.focal_y,
            z,
        )
    }
}

/// Rigid world-to-camera transform `x_cam = R x_world + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vector3<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: UnitQuaternion::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        let mut p = Self {
            rotation,
            translation,
        };
        p.renormalize();
        p
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Self::new(UnitQuaternion::identity(), t)
    }

    pub fn from_axis_angle(axis_angle: Vector3<f64>, translation: Vector3<f64>) -> Self {
        Self::new(UnitQuaternion::from_scaled_axis(axis_angle), translation)
    }

    /// Re-projects the quaternion onto the unit sphere.
    pub fn renormalize(&mut self) {
        let q = self.rotation.into_inner();
        self.rotation = UnitQuaternion::new_normalize(q);
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.rotation.to_rotation_matrix().into_inner()
    }

    #[inline]
    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn inverse(&self) -> Self {
        let r_inv = self.rotation.inverse();
        Self::new(r_inv, -(r_inv * self.translation))
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Pose) -> Self {
        Self::new(
            self.rotation * other.rotation,
            self.rotation * other.translation + self.translation,
        )
    }

    /// Left-composes a tangent increment `[ω; v]`: `R' = Exp(ω) R`,
    /// `t' = Exp(ω) t + v`, so camera points move as `x' = Exp(ω) x + v`.
    pub fn retract(&self, delta: &[f64; 6]) -> Self {
        let w = Vector3::new(delta[0], delta[1], delta[2]);
        let v = Vector3::new(delta[3], delta[4], delta[5]);
        let dr = UnitQuaternion::from_scaled_axis(w);
        Self::new(dr * self.rotation, dr * self.translation + v)
    }

    /// Camera center in world coordinates.
    pub fn camera_center(&self) -> Vector3<f64> {
        -(self.rotation.inverse() * self.translation)
    }

    /// Rotation angle (radians) of `self⁻¹ ∘ other`.
    pub fn rotation_distance(&self, other: &Pose) -> f64 {
        self.rotation.angle_to(&other.rotation)
    }

    /// World-to-camera pose of a camera at `eye` looking at `target`, with
    /// image-down roughly along `-up`.
    pub fn look_at(eye: Vector3<f64>, target: Vector3<f64>, up: Vector3<f64>) -> Result<Self> {
        let z = target - eye;
        if z.norm() < 1e-12 {
            return Err(Error::invalid("look_at: eye coincides with target"));
        }
        let z = z.normalize();
        let x = (-up).cross(&z);
        if x.norm() < 1e-12 {
            return Err(Error::invalid("look_at: view direction parallel to up"));
        }
        let x = x.normalize();
        let y = z.cross(&x);
        // Rows of the world-to-camera rotation are the camera axes.
        let r = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        let rot = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(r));
        let t = -(rot * eye);
        Ok(Self::new(rot, t))
    }
}

/// One RGB-D frame with its per-pixel label image.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub rgb: Image<f64>,
    pub depth: Image<f64>,
    pub semantic: LabelImage,
    pub frame_index: usize,
    pub timestamp: f64,
}

impl Observation {
    pub fn validate(&self, intr: &CameraIntrinsics) -> Result<()> {
        let (w, h) = (intr.width, intr.height);
        let ok = |iw: usize, ih: usize| iw == w && ih == h;
        if !ok(self.rgb.width(), self.rgb.height()) || self.rgb.channels() != 3 {
            return Err(Error::invalid("rgb image does not match intrinsics"));
        }
        if !ok(self.depth.width(), self.depth.height()) || self.depth.channels() != 1 {
            return Err(Error::invalid("depth image does not match intrinsics"));
        }
        if !ok(self.semantic.width(), self.semantic.height()) || self.semantic.channels() != 1 {
            return Err(Error::invalid("semantic image does not match intrinsics"));
        }
        if self.depth.data().iter().any(|d| !(*d >= 0.0)) {
            return Err(Error::invalid("negative or NaN depth"));
        }
        Ok(())
    }

    pub fn valid_depth_count(&self) -> usize {
        self.depth.data().iter().filter(|&&d| d > 0.0).count()
    }
}

static NEXT_STAMP: AtomicU64 = AtomicU64::new(1);

fn fresh_stamp() -> u64 {
    NEXT_STAMP.fetch_add(1, Ordering::Relaxed)
}

/// Ordered splat collection. Every mutable access takes a fresh stamp so
/// renders can detect that they have gone stale.
#[derive(Debug)]
pub struct GaussianMap {
    gaussians: Vec<Gaussian>,
    creation_frame: Vec<usize>,
    semantic_dim: usize,
    stamp: u64,
}

impl Clone for GaussianMap {
    fn clone(&self) -> Self {
        Self {
            gaussians: self.gaussians.clone(),
            creation_frame: self.creation_frame.clone(),
            semantic_dim: self.semantic_dim,
            stamp: fresh_stamp(),
        }
    }
}

impl GaussianMap {
    pub fn new(semantic_dim: usize) -> Result<Self> {
        if semantic_dim == 0 {
            return Err(Error::invalid("semantic_dim must be at least 1"));
        }
        Ok(Self {
            gaussians: Vec::new(),
            creation_frame: Vec::new(),
            semantic_dim,
            stamp: fresh_stamp(),
        })
    }

    pub fn semantic_dim(&self) -> usize {
        self.semantic_dim
    }

    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    pub fn gaussians(&self) -> &[Gaussian] {
        &self.gaussians
    }

    pub fn creation_frames(&self) -> &[usize] {
        &self.creation_frame
    }

    pub fn stamp(&self) -> u64 {
        self.stamp
    }

    pub fn push(&mut self, g: Gaussian, frame: usize) -> Result<()> {
        g.validate(self.semantic_dim)?;
        self.gaussians.push(g);
        self.creation_frame.push(frame);
        self.stamp = fresh_stamp();
        Ok(())
    }

    /// Mutable access to the splats. Callers must restore the `Gaussian`
    /// invariants before the next render.
    pub fn gaussians_mut(&mut self) -> &mut [Gaussian] {
        self.stamp = fresh_stamp();
        &mut self.gaussians
    }

    /// Keeps the splats for which `keep` returns true; returns how many
    /// were removed.
    pub fn retain(&mut self, mut keep: impl FnMut(&Gaussian) -> bool) -> usize {
        let before = self.gaussians.len();
        let mut frames = self.creation_frame.iter();
        let mut kept_frames = Vec::with_capacity(before);
        self.gaussians.retain(|g| {
            let f = *frames.next().expect("creation frames track gaussians");
            let k = keep(g);
            if k {
                kept_frames.push(f);
            }
            k
        });
        self.creation_frame = kept_frames;
        self.stamp = fresh_stamp();
        before - self.gaussians.len()
    }
}
