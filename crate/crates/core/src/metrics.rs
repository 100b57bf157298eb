//! Trajectory, image and segmentation metrics.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::dataset::SequenceBundle;
use crate::error::{Error, Result};
use crate::image::{Image, LabelImage};
use crate::render::RenderedFrame;
use crate::scene::Pose;

/// PSNR reported for identical images.
pub const PSNR_CAP: f64 = 99.0;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

/// Least-squares rigid transform `(R, t)` taking `from` onto `to`.
pub fn rigid_alignment(from: &[Vector3<f64>], to: &[Vector3<f64>]) -> (Matrix3<f64>, Vector3<f64>) {
    let n = from.len() as f64;
    let mu_f = from.iter().sum::<Vector3<f64>>() / n;
    let mu_t = to.iter().sum::<Vector3<f64>>() / n;
    let mut cov = Matrix3::zeros();
    for (a, b) in from.iter().zip(to) {
        cov += (a - mu_f) * (b - mu_t).transpose();
    }
    let svd = cov.svd(true, true);
    let (u, v_t) = (svd.u.expect("u requested"), svd.v_t.expect("v requested"));
    let v = v_t.transpose();
    let d = (v * u.transpose()).determinant().signum();
    let fix = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d));
    let r = v * fix * u.transpose();
    (r, mu_t - r * mu_f)
}

/// Per-frame translational residuals after rigidly aligning the estimated
/// camera centers onto the ground truth.
pub fn ate_residuals(estimated: &[Pose], ground_truth: &[Pose]) -> Result<Vec<f64>> {
    if estimated.len() != ground_truth.len() {
        return Err(Error::invalid(format!(
            "trajectory lengths differ: estimated {}, ground truth {}",
            estimated.len(),
            ground_truth.len()
        )));
    }
    if estimated.len() < 2 {
        return Err(Error::invalid("ATE needs at least two poses"));
    }
    let est: Vec<Vector3<f64>> = estimated.iter().map(Pose::camera_center).collect();
    let gt: Vec<Vector3<f64>> = ground_truth.iter().map(Pose::camera_center).collect();
    let (r, t) = rigid_alignment(&est, &gt);
    Ok(est.iter().zip(&gt).map(|(p, q)| (r * p + t - q).norm()).collect())
}

pub fn ate_rmse(estimated: &[Pose], ground_truth: &[Pose]) -> Result<f64> {
    let res = ate_residuals(estimated, ground_truth)?;
    Ok(rms(&res))
}

fn rms(v: &[f64]) -> f64 {
    (v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64).sqrt()
}

fn check_shape<T, U>(a: &Image<T>, b: &Image<U>) -> Result<()> {
    if !a.same_shape(b) {
        return Err(Error::invalid(format!(
            "image shapes differ: {}x{}x{} vs {}x{}x{}",
            a.width(),
            a.height(),
            a.channels(),
            b.width(),
            b.height(),
            b.channels()
        )));
    }
    Ok(())
}

pub fn psnr(a: &Image<f64>, b: &Image<f64>, max_value: f64) -> Result<f64> {
    check_shape(a, b)?;
    if !(max_value > 0.0) {
        return Err(Error::invalid("psnr max_value must be positive"));
    }
    let n = a.data().len();
    if n == 0 {
        return Err(Error::UndefinedMetric("psnr of an empty image".into()));
    }
    let mse = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (max_value * max_value / mse).log10()).min(PSNR_CAP))
}

fn ssim_kernel() -> Vec<f64> {
    let c = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    let g: Vec<f64> = g.iter().map(|v| v / s).collect();
    let mut k = Vec::with_capacity(SSIM_WINDOW * SSIM_WINDOW);
    for gy in &g {
        for gx in &g {
            k.push(gy * gx);
        }
    }
    k
}

/// Mean SSIM over all full 11×11 Gaussian windows, averaged over channels.
pub fn ssim(a: &Image<f64>, b: &Image<f64>) -> Result<f64> {
    check_shape(a, b)?;
    let (w, h, c) = (a.width(), a.height(), a.channels());
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::invalid(format!(
            "image {w}x{h} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window"
        )));
    }
    let k = ssim_kernel();
    let (nx, ny) = (w - SSIM_WINDOW + 1, h - SSIM_WINDOW + 1);
    let mut total = 0.0;
    for ch in 0..c {
        for y0 in 0..ny {
            for x0 in 0..nx {
                let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for dy in 0..SSIM_WINDOW {
                    for dx in 0..SSIM_WINDOW {
                        let wgt = k[dy * SSIM_WINDOW + dx];
                        let i = ((y0 + dy) * w + x0 + dx) * c + ch;
                        let (va, vb) = (a.data()[i], b.data()[i]);
                        ma += wgt * va;
                        mb += wgt * vb;
                        saa += wgt * va * va;
                        sbb += wgt * vb * vb;
                        sab += wgt * va * vb;
                    }
                }
                let va = saa - ma * ma;
                let vb = sbb - mb * mb;
                let cov = sab - ma * mb;
                total += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                    / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
            }
        }
    }
    Ok(total / (c * nx * ny) as f64)
}

/// Mean absolute depth error over pixels with valid (> 0) observed depth.
pub fn depth_l1(rendered: &Image<f64>, observed: &Image<f64>) -> Result<f64> {
    check_shape(rendered, observed)?;
    let mut sum = 0.0;
    let mut n = 0usize;
    for (r, o) in rendered.data().iter().zip(observed.data()) {
        if *o > 0.0 {
            sum += (r - o).abs();
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::UndefinedMetric("no pixel has valid observed depth".into()));
    }
    Ok(sum / n as f64)
}

/// Mean one-hot L1 distance: 2 × the fraction of disagreeing pixels.
pub fn seg_l1(predicted: &LabelImage, reference: &LabelImage) -> Result<f64> {
    check_shape(predicted, reference)?;
    let n = predicted.data().len();
    if n == 0 {
        return Err(Error::UndefinedMetric("seg L1 of an empty image".into()));
    }
    let wrong = predicted.data().iter().zip(reference.data()).filter(|(a, b)| a != b).count();
    Ok(2.0 * wrong as f64 / n as f64)
}

/// The images metrics are computed from for one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameRender {
    pub rgb: Image<f64>,
    pub depth: Image<f64>,
    pub labels: LabelImage,
}

impl From<&RenderedFrame> for FrameRender {
    fn from(f: &RenderedFrame) -> Self {
        Self {
            rgb: f.color.clone(),
            depth: f.depth.clone(),
            labels: f.label_image(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameMetrics {
    pub frame_index: usize,
    /// Aligned translational error; absent without ground-truth poses.
    pub ate: Option<f64>,
    pub psnr: f64,
    pub ssim: f64,
    /// Absent when the frame has no valid depth.
    pub depth_l1: Option<f64>,
    pub seg_l1: f64,
}

/// Aggregates: RMSE over frames for ATE, means for the rest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub ate_rmse: Option<f64>,
    pub psnr: f64,
    pub ssim: f64,
    pub depth_l1: Option<f64>,
    pub seg_l1: f64,
    pub per_frame: Vec<FrameMetrics>,
}

fn mean(v: impl Iterator<Item = f64>) -> Option<f64> {
    let (mut s, mut n) = (0.0, 0usize);
    for x in v {
        s += x;
        n += 1;
    }
    (n > 0).then(|| s / n as f64)
}

/// Scores a run against the bundle. Segmentation is compared against the
/// clean labels when the bundle has them, else the observed ones.
pub fn evaluate(bundle: &SequenceBundle, trajectory: &[Pose], renders: &[FrameRender]) -> Result<MetricsReport> {
    let n = bundle.len();
    if trajectory.len() != n {
        return Err(Error::invalid(format!(
            "trajectory has {} poses, bundle has {n} frames",
            trajectory.len()
        )));
    }
    if renders.len() != n {
        return Err(Error::invalid(format!("{} renders for {n} frames", renders.len())));
    }
    if n == 0 {
        return Err(Error::UndefinedMetric("empty sequence".into()));
    }
    let ate = match &bundle.gt_poses {
        Some(gt) if n >= 2 => Some(ate_residuals(trajectory, gt)?),
        _ => None,
    };
    let mut per_frame = Vec::with_capacity(n);
    for (k, (obs, r)) in bundle.frames.iter().zip(renders).enumerate() {
        let reference = bundle
            .gt_semantics
            .as_ref()
            .map(|g| &g[k])
            .unwrap_or(&obs.semantic);
        let depth = match depth_l1(&r.depth, &obs.depth) {
            Ok(d) => Some(d),
            Err(Error::UndefinedMetric(_)) => None,
            Err(e) => return Err(e),
        };
        per_frame.push(FrameMetrics {
            frame_index: obs.frame_index,
            ate: ate.as_ref().map(|a| a[k]),
            psnr: psnr(&r.rgb, &obs.rgb, 1.0)?,
            ssim: ssim(&r.rgb, &obs.rgb)?,
            depth_l1: depth,
            seg_l1: seg_l1(&r.labels, reference)?,
        });
    }
    Ok(MetricsReport {
        ate_rmse: ate.as_deref().map(rms),
        psnr: mean(per_frame.iter().map(|f| f.psnr)).expect("nonempty"),
        ssim: mean(per_frame.iter().map(|f| f.ssim)).expect("nonempty"),
        depth_l1: mean(per_frame.iter().filter_map(|f| f.depth_l1)),
        seg_l1: mean(per_frame.iter().map(|f| f.seg_l1)).expect("nonempty"),
        per_frame,
    })
}
