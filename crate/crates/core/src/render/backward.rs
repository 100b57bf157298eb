use nalgebra::Vector3;

use super::{weight_terms, RenderedFrame};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::par;
use crate::scene::{CameraIntrinsics, GaussianMap, Pose};

/// Upstream loss gradients with respect to each rendered channel.
#[derive(Debug, Clone)]
pub struct ResidualWeights {
    pub color: Image<f64>,
    pub depth: Image<f64>,
    pub semantic: Image<f64>,
    pub silhouette: Image<f64>,
}

impl ResidualWeights {
    pub fn zeros(width: usize, height: usize, semantic_dim: usize) -> Self {
        Self {
            color: Image::filled(width, height, 3, 0.0),
            depth: Image::filled(width, height, 1, 0.0),
            semantic: Image::filled(width, height, semantic_dim, 0.0),
            silhouette: Image::filled(width, height, 1, 0.0),
        }
    }

    fn shape_matches(&self, frame: &RenderedFrame) -> bool {
        self.color.same_shape(&frame.color)
            && self.depth.same_shape(&frame.depth)
            && self.semantic.same_shape(&frame.semantic)
            && self.silhouette.same_shape(&frame.silhouette)
    }

    fn is_zero_at(&self, i: usize) -> bool {
        self.depth.data()[i] == 0.0
            && self.silhouette.data()[i] == 0.0
            && self.color.at(i).iter().all(|&v| v == 0.0)
            && self.semantic.at(i).iter().all(|&v| v == 0.0)
    }
}

/// Parameters per splat in [`Gradients`]: position (3), radius, opacity,
/// color (3), then the semantic vector.
pub const GAUSSIAN_PARAMS: usize = 8;

pub(crate) const OFF_POSITION: usize = 0;
pub(crate) const OFF_RADIUS: usize = 3;
pub(crate) const OFF_OPACITY: usize = 4;
pub(crate) const OFF_COLOR: usize = 5;
pub(crate) const OFF_SEMANTIC: usize = 8;

/// Gradients for every splat of the map (indexed like the map) and for the
/// pose's tangent increment `[ω; v]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    stride: usize,
    params: Vec<f64>,
    pub pose: [f64; 6],
}

impl Gradients {
    pub(crate) fn zeros(count: usize, semantic_dim: usize) -> Self {
        let stride = GAUSSIAN_PARAMS + semantic_dim;
        Self {
            stride,
            params: vec![0.0; count * stride],
            pose: [0.0; 6],
        }
    }

    pub fn len(&self) -> usize {
        self.params.len() / self.stride
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Parameters per splat.
    pub fn stride(&self) -> usize {
        self.stride
    }

    /// Flat `len() × stride()` parameter gradient buffer.
    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn gaussian(&self, i: usize) -> &[f64] {
        &self.params[i * self.stride..(i + 1) * self.stride]
    }

    pub fn position(&self, i: usize) -> Vector3<f64> {
        let g = self.gaussian(i);
        Vector3::new(g[OFF_POSITION], g[OFF_POSITION + 1], g[OFF_POSITION + 2])
    }

    pub fn radius(&self, i: usize) -> f64 {
        self.gaussian(i)[OFF_RADIUS]
    }

    pub fn opacity(&self, i: usize) -> f64 {
        self.gaussian(i)[OFF_OPACITY]
    }

    pub fn color(&self, i: usize) -> Vector3<f64> {
        let g = self.gaussian(i);
        Vector3::new(g[OFF_COLOR], g[OFF_COLOR + 1], g[OFF_COLOR + 2])
    }

    pub fn semantic(&self, i: usize) -> &[f64] {
        &self.gaussian(i)[OFF_SEMANTIC..]
    }

    /// Adds `scale * other` in place.
    pub fn add_scaled(&mut self, other: &Gradients, scale: f64) {
        assert_eq!(self.params.len(), other.params.len());
        for (a, b) in self.params.iter_mut().zip(&other.params) {
            *a += scale * b;
        }
        for (a, b) in self.pose.iter_mut().zip(&other.pose) {
            *a += scale * b;
        }
    }
}

const BAND_ROWS: usize = 16;

// Image-space accumulator layout per projected splat.
const ACC_OPACITY: usize = 0;
const ACC_CENTER: usize = 1;
const ACC_RADIUS_2D: usize = 3;
const ACC_DEPTH: usize = 4;
const ACC_COLOR: usize = 5;
const ACC_SEMANTIC: usize = 8;

struct BandAccum {
    ids: Vec<u32>,
    values: Vec<f64>,
}

/// Exact gradients of `Σ_p weights(p) · rendered(p)` with respect to the
/// map parameters and the pose, given a frame rendered from the same inputs.
///
/// The sum is reduced over fixed row bands in order, so the result does
/// not depend on thread count.
pub fn render_backward(
    map: &GaussianMap,
    pose: &Pose,
    intr: &CameraIntrinsics,
    frame: &RenderedFrame,
    weights: &ResidualWeights,
) -> Result<Gradients> {
    if frame.map_stamp != map.stamp() || frame.pose != *pose || frame.intrinsics != *intr {
        return Err(Error::state(
            "rendered frame is stale: map, pose or intrinsics changed since render",
        ));
    }
    if !weights.shape_matches(frame) {
        return Err(Error::invalid("residual weights do not match the rendered frame"));
    }
    let s = map.semantic_dim();
    let stride = ACC_SEMANTIC + s;
    let projected = frame.projected();
    let w = intr.width;
    let h = intr.height;

    let bands = h.div_ceil(BAND_ROWS);
    let partials = par::map_range(bands, |b| {
        let mut slot = vec![u32::MAX; projected.len()];
        let mut acc = BandAccum {
            ids: Vec::new(),
            values: Vec::new(),
        };
        let mut trans = Vec::new();
        let mut vals = Vec::new();
        for y in b * BAND_ROWS..((b + 1) * BAND_ROWS).min(h) {
            for x in 0..w {
                let i = y * w + x;
                let list = frame.contributors(i);
                if list.is_empty() || weights.is_zero_at(i) {
                    continue;
                }
                let g_color = weights.color.at(i);
                let g_depth = weights.depth.data()[i];
                let g_sem = weights.semantic.at(i);
                let g_sil = weights.silhouette.data()[i];

                trans.clear();
                vals.clear();
                let mut t = 1.0;
                for c in list {
                    let pg = &projected[c.projected as usize];
                    trans.push(t);
                    let e = g_color[0] * pg.color.x
                        + g_color[1] * pg.color.y
                        + g_color[2] * pg.color.z
                        + g_depth * pg.depth
                        + g_sem.iter().zip(&pg.semantic).map(|(a, b)| a * b).sum::<f64>()
                        + g_sil;
                    vals.push(e);
                    t *= 1.0 - c.weight;
                }

                let p = [x as f64, y as f64];
                let mut suffix = 0.0;
                for k in (0..list.len()).rev() {
                    let c = list[k];
                    let pi = c.projected as usize;
                    let pg = &projected[pi];
                    let (f, t, e) = (c.weight, trans[k], vals[k]);
                    let d_weight = t * e - suffix / (1.0 - f);
                    suffix += t * f * e;
                    let tf = t * f;

                    if slot[pi] == u32::MAX {
                        slot[pi] = acc.ids.len() as u32;
                        acc.ids.push(pi as u32);
                        acc.values.extend(std::iter::repeat_n(0.0, stride));
                    }
                    let base = slot[pi] as usize * stride;
                    let a = &mut acc.values[base..base + stride];
                    for ch in 0..3 {
                        a[ACC_COLOR + ch] += g_color[ch] * tf;
                    }
                    for (dst, g) in a[ACC_SEMANTIC..].iter_mut().zip(g_sem) {
                        *dst += g * tf;
                    }
                    a[ACC_DEPTH] += g_depth * tf;

                    let terms = weight_terms(pg, p);
                    if !terms.clamped {
                        let rho = pg.radius_2d;
                        let rho2 = rho * rho;
                        a[ACC_OPACITY] += d_weight * terms.falloff;
                        let k_center = d_weight * f / rho2;
                        a[ACC_CENTER] += k_center * (p[0] - pg.center.x);
                        a[ACC_CENTER + 1] += k_center * (p[1] - pg.center.y);
                        a[ACC_RADIUS_2D] += d_weight * f * terms.dist_sq / (rho2 * rho);
                    }
                }
            }
        }
        acc
    });

    let mut image_space = vec![0.0; projected.len() * stride];
    for band in &partials {
        for (k, &pi) in band.ids.iter().enumerate() {
            let src = &band.values[k * stride..(k + 1) * stride];
            let dst = &mut image_space[pi as usize * stride..(pi as usize + 1) * stride];
            for (d, v) in dst.iter_mut().zip(src) {
                *d += v;
            }
        }
    }

    // Chain through the projection into world parameters and the pose.
    let rot_t = pose.rotation_matrix().transpose();
    let mut grads = Gradients::zeros(map.len(), s);
    let gstride = grads.stride();
    let mut g_rot = Vector3::zeros();
    let mut g_trans = Vector3::zeros();
    for (pi, pg) in projected.iter().enumerate() {
        let a = &image_space[pi * stride..(pi + 1) * stride];
        let xc = pg.camera_point;
        let z = xc.z;
        let (fx, fy) = (intr.focal_x, intr.focal_y);
        let radius = map.gaussians()[pg.source_index].radius;
        let g_mx = a[ACC_CENTER];
        let g_my = a[ACC_CENTER + 1];
        let g_rho = a[ACC_RADIUS_2D];
        let g_xc = Vector3::new(
            g_mx * fx / z,
            g_my * fy / z,
            -g_mx * fx * xc.x / (z * z) - g_my * fy * xc.y / (z * z) - g_rho * fx * radius / (z * z)
                + a[ACC_DEPTH],
        );
        let g_pos = rot_t * g_xc;

        let out = &mut grads.params_mut()[pg.source_index * gstride..(pg.source_index + 1) * gstride];
        out[OFF_POSITION] = g_pos.x;
        out[OFF_POSITION + 1] = g_pos.y;
        out[OFF_POSITION + 2] = g_pos.z;
        out[OFF_RADIUS] = g_rho * fx / z;
        out[OFF_OPACITY] = a[ACC_OPACITY];
        out[OFF_COLOR..OFF_COLOR + 3].copy_from_slice(&a[ACC_COLOR..ACC_COLOR + 3]);
        out[OFF_SEMANTIC..].copy_from_slice(&a[ACC_SEMANTIC..]);

        g_rot += xc.cross(&g_xc);
        g_trans += g_xc;
    }
    grads.pose = [g_rot.x, g_rot.y, g_rot.z, g_trans.x, g_trans.y, g_trans.z];
    Ok(grads)
}
