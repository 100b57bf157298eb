//! Front-to-back splatting of isotropic Gaussians into color, depth,
//! semantic and silhouette images, with an analytic backward pass.
//!
//! Per pixel, contributors are visited in ascending depth and composited as
//! `Σ v_i f_i Π_{j<i}(1 − f_j)` for every per-splat value `v` (color, depth,
//! semantic vector, and 1 for the silhouette).

mod backward;
mod project;

pub use backward::{render_backward, Gradients, ResidualWeights, GAUSSIAN_PARAMS};
pub use project::{eval_weight, project_gaussian, weight_terms, ProjectedGaussian, WeightTerms};

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::image::Image;
use crate::par;
use crate::scene::{CameraIntrinsics, GaussianMap, Pose};

/// Splats closer than this to the camera plane are culled.
pub const NEAR_PLANE: f64 = 0.01;
/// Per-splat weights are clamped here so transmittance never reaches 0.
pub const MAX_WEIGHT: f64 = 0.9999;
/// Support radius of a splat, in units of its projected radius.
pub const CUTOFF_RADII: f64 = 3.0;
/// Compositing stops once transmittance drops below this.
pub const MIN_TRANSMITTANCE: f64 = 1e-4;

const TILE: usize = 16;

/// One entry of a pixel's compositing list.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Contribution {
    /// Index into [`RenderedFrame::projected`].
    pub projected: u32,
    /// `f_i(p)` after cutoff and clamping.
    pub weight: f64,
}

/// Output of [`render`]. Keeps the per-pixel contributor lists and the
/// provenance needed by [`render_backward`].
#[derive(Debug, Clone)]
pub struct RenderedFrame {
    pub color: Image<f64>,
    pub depth: Image<f64>,
    pub semantic: Image<f64>,
    pub silhouette: Image<f64>,
    projected: Vec<ProjectedGaussian>,
    offsets: Vec<usize>,
    contributions: Vec<Contribution>,
    map_stamp: u64,
    pose: Pose,
    intrinsics: CameraIntrinsics,
}

impl RenderedFrame {
    pub fn width(&self) -> usize {
        self.intrinsics.width
    }

    pub fn height(&self) -> usize {
        self.intrinsics.height
    }

    pub fn semantic_dim(&self) -> usize {
        self.semantic.channels()
    }

    pub fn pose(&self) -> &Pose {
        &self.pose
    }

    pub fn intrinsics(&self) -> &CameraIntrinsics {
        &self.intrinsics
    }

    pub fn projected(&self) -> &[ProjectedGaussian] {
        &self.projected
    }

    /// Contributors of the pixel at row-major `index`, front to back.
    pub fn contributors(&self, index: usize) -> &[Contribution] {
        &self.contributions[self.offsets[index]..self.offsets[index + 1]]
    }

    /// `1 − Π(1 − f_i)` over the pixel's contributors.
    pub fn silhouette_product_form(&self, index: usize) -> f64 {
        1.0 - self
            .contributors(index)
            .iter()
            .map(|c| 1.0 - c.weight)
            .product::<f64>()
    }

    /// Per-pixel label: argmax over the semantic channels, with the
    /// uncovered mass `1 − s(p)` credited to the background channel.
    pub fn label_image(&self) -> Image<u16> {
        let s = self.semantic_dim();
        let labels = (0..self.color.pixel_count())
            .map(|i| {
                let sem = self.semantic.at(i);
                let bg = 1.0 - self.silhouette.data()[i];
                let mut best = 0usize;
                let mut best_v = sem[0] + bg;
                for (k, &v) in sem.iter().enumerate().skip(1).take(s - 1) {
                    if v > best_v {
                        best = k;
                        best_v = v;
                    }
                }
                best as u16
            })
            .collect();
        Image::from_vec(self.width(), self.height(), 1, labels)
    }
}

/// Projects every splat, dropping culled ones.
pub(crate) fn project_all(
    map: &GaussianMap,
    pose: &Pose,
    intr: &CameraIntrinsics,
) -> Result<Vec<ProjectedGaussian>> {
    let s = map.semantic_dim();
    if let Some(i) = map.gaussians().iter().position(|g| g.semantic.len() != s) {
        return Err(Error::invalid(format!(
            "gaussian {i} has semantic dimension {}, map has {s}",
            map.gaussians()[i].semantic.len()
        )));
    }
    let projected = par::map_slice(map.gaussians(), |g| project_gaussian(g, pose, intr));
    Ok(projected
        .into_iter()
        .enumerate()
        .filter_map(|(i, p)| {
            p.map(|mut p| {
                p.source_index = i;
                p
            })
        })
        .collect())
}

/// Integer pixel bounds `[x0, x1] × [y0, y1]` of the splat's support,
/// clipped to the image; `None` when empty.
pub(crate) fn pixel_bounds(
    pg: &ProjectedGaussian,
    width: usize,
    height: usize,
) -> Option<(usize, usize, usize, usize)> {
    let reach = CUTOFF_RADII * pg.radius_2d;
    let x0 = (pg.center.x - reach).ceil().max(0.0);
    let y0 = (pg.center.y - reach).ceil().max(0.0);
    let x1 = (pg.center.x + reach).floor().min(width as f64 - 1.0);
    let y1 = (pg.center.y + reach).floor().min(height as f64 - 1.0);
    if x0 > x1 || y0 > y1 {
        return None;
    }
    Some((x0 as usize, x1 as usize, y0 as usize, y1 as usize))
}

/// Depth-sorted candidate lists per 16×16 tile.
fn bin_tiles(projected: &[ProjectedGaussian], width: usize, height: usize) -> (usize, Vec<Vec<u32>>) {
    let tiles_x = width.div_ceil(TILE);
    let tiles_y = height.div_ceil(TILE);
    let mut tiles: Vec<Vec<u32>> = vec![Vec::new(); tiles_x * tiles_y];
    // Sort once globally so each tile list comes out in depth order.
    let mut order: Vec<u32> = (0..projected.len() as u32).collect();
    order.sort_by(|&a, &b| depth_order(&projected[a as usize], &projected[b as usize]));
    for &i in &order {
        if let Some((x0, x1, y0, y1)) = pixel_bounds(&projected[i as usize], width, height) {
            for ty in y0 / TILE..=y1 / TILE {
                for tx in x0 / TILE..=x1 / TILE {
                    tiles[ty * tiles_x + tx].push(i);
                }
            }
        }
    }
    (tiles_x, tiles)
}

/// Front-to-back order: ascending depth, then map index.
pub(crate) fn depth_order(a: &ProjectedGaussian, b: &ProjectedGaussian) -> std::cmp::Ordering {
    a.depth
        .total_cmp(&b.depth)
        .then(a.source_index.cmp(&b.source_index))
}

struct PixelOut {
    color: Vector3<f64>,
    depth: f64,
    silhouette: f64,
}

/// Renders the map from `pose`.
pub fn render(map: &GaussianMap, pose: &Pose, intr: &CameraIntrinsics) -> Result<RenderedFrame> {
    intr.validate()?;
    let (w, h, s) = (intr.width, intr.height, map.semantic_dim());
    let projected = project_all(map, pose, intr)?;
    let (tiles_x, tiles) = bin_tiles(&projected, w, h);

    // Each row is composited independently; rows are stitched in order.
    let rows = par::map_range(h, |y| {
        let mut outs = Vec::with_capacity(w);
        let mut sem = vec![0.0; w * s];
        let mut lists: Vec<Vec<Contribution>> = Vec::with_capacity(w);
        for x in 0..w {
            let tile = &tiles[(y / TILE) * tiles_x + x / TILE];
            let p = [x as f64, y as f64];
            let sem_px = &mut sem[x * s..(x + 1) * s];
            let mut out = PixelOut {
                color: Vector3::zeros(),
                depth: 0.0,
                silhouette: 0.0,
            };
            let mut list = Vec::new();
            let mut transmittance = 1.0;
            for &pi in tile {
                let pg = &projected[pi as usize];
                let f = eval_weight(pg, p);
                if f <= 0.0 {
                    continue;
                }
                let wgt = f * transmittance;
                out.color += pg.color * wgt;
                out.depth += pg.depth * wgt;
                out.silhouette += wgt;
                for (acc, v) in sem_px.iter_mut().zip(&pg.semantic) {
                    *acc += v * wgt;
                }
                list.push(Contribution {
                    projected: pi,
                    weight: f,
                });
                transmittance *= 1.0 - f;
                if transmittance < MIN_TRANSMITTANCE {
                    break;
                }
            }
            outs.push(out);
            lists.push(list);
        }
        (outs, sem, lists)
    });

    let n = w * h;
    let mut color = Vec::with_capacity(3 * n);
    let mut depth = Vec::with_capacity(n);
    let mut silhouette = Vec::with_capacity(n);
    let mut semantic = Vec::with_capacity(s * n);
    let mut offsets = Vec::with_capacity(n + 1);
    let mut contributions = Vec::new();
    offsets.push(0);
    for (outs, sem, lists) in rows {
        for (o, list) in outs.into_iter().zip(lists) {
            color.extend_from_slice(o.color.as_slice());
            depth.push(o.depth);
            silhouette.push(o.silhouette);
            contributions.extend(list);
            offsets.push(contributions.len());
        }
        semantic.extend(sem);
    }

    Ok(RenderedFrame {
        color: Image::from_vec(w, h, 3, color),
        depth: Image::from_vec(w, h, 1, depth),
        semantic: Image::from_vec(w, h, s, semantic),
        silhouette: Image::from_vec(w, h, 1, silhouette),
        projected,
        offsets,
        contributions,
        map_stamp: map.stamp(),
        pose: *pose,
        intrinsics: *intr,
    })
}
