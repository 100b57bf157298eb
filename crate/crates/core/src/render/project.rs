use nalgebra::{Vector2, Vector3};

use super::{pixel_bounds, CUTOFF_RADII, MAX_WEIGHT, NEAR_PLANE};
use crate::scene::{CameraIntrinsics, Gaussian, Pose};

/// A splat mapped to the image plane.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectedGaussian {
    /// Projected center in pixels.
    pub center: Vector2<f64>,
    /// Projected radius in pixels, `f r / d`.
    pub radius_2d: f64,
    /// Camera-frame z of the center.
    pub depth: f64,
    pub opacity: f64,
    pub color: Vector3<f64>,
    pub semantic: Vec<f64>,
    /// Index of the splat in its map.
    pub source_index: usize,
    /// Center in camera coordinates, kept for the backward pass.
    pub camera_point: Vector3<f64>,
}

/// Projects `g` through `pose` and `intr`. Returns `None` when the splat is
/// behind the near plane or its support misses the image entirely.
pub fn project_gaussian(
    g: &Gaussian,
    pose: &Pose,
    intr: &CameraIntrinsics,
) -> Option<ProjectedGaussian> {
    let xc = pose.transform_point(&g.position);
    let d = xc.z;
    if !(d > NEAR_PLANE) {
        return None;
    }
    let center = Vector2::new(
        intr.focal_x * xc.x / d + intr.principal_x,
        intr.focal_y * xc.y / d + intr.principal_y,
    );
    let pg = ProjectedGaussian {
        center,
        radius_2d: intr.focal_x * g.radius / d,
        depth: d,
        opacity: g.opacity,
        color: g.color,
        semantic: g.semantic.clone(),
        source_index: 0,
        camera_point: xc,
    };
    pixel_bounds(&pg, intr.width, intr.height)?;
    Some(pg)
}

/// Pieces of `f(p)` needed by the backward pass.
#[derive(Debug, Clone, Copy)]
pub struct WeightTerms {
    /// Final weight after cutoff and clamping.
    pub weight: f64,
    /// `exp(−q / 2ρ²)`, the opacity-free falloff.
    pub falloff: f64,
    /// Squared pixel distance to the center.
    pub dist_sq: f64,
    /// True when the clamp at [`MAX_WEIGHT`] is active (zero derivative).
    pub clamped: bool,
}

pub fn weight_terms(pg: &ProjectedGaussian, p: [f64; 2]) -> WeightTerms {
    let dx = p[0] - pg.center.x;
    let dy = p[1] - pg.center.y;
    let dist_sq = dx * dx + dy * dy;
    let rho2 = pg.radius_2d * pg.radius_2d;
    if dist_sq > CUTOFF_RADII * CUTOFF_RADII * rho2 {
        return WeightTerms {
            weight: 0.0,
            falloff: 0.0,
            dist_sq,
            clamped: false,
        };
    }
    let falloff = (-dist_sq / (2.0 * rho2)).exp();
    let raw = pg.opacity * falloff;
    let clamped = raw > MAX_WEIGHT;
    WeightTerms {
        weight: raw.clamp(0.0, MAX_WEIGHT),
        falloff,
        dist_sq,
        clamped,
    }
}

/// `f(p) = σ exp(−‖p − μ₂‖² / 2ρ²)`, zero beyond the cutoff radius and
/// clamped to `[0, MAX_WEIGHT]`.
pub fn eval_weight(pg: &ProjectedGaussian, p: [f64; 2]) -> f64 {
    weight_terms(pg, p).weight
}

#[cfg(test)]
mod tests {
    use super::*;

    fn k() -> CameraIntrinsics {
        CameraIntrinsics::new(100.0, 100.0, 50.0, 50.0, 100, 100).unwrap()
    }

    fn g(pos: [f64; 3], r: f64, o: f64) -> Gaussian {
        Gaussian::with_label(Vector3::from(pos), r, o, Vector3::new(0.5, 0.5, 0.5), 0, 1).unwrap()
    }

    #[test]
    fn projection_by_substitution() {
        let p = project_gaussian(&g([0.0, 0.0, 2.0], 0.1, 0.7), &Pose::identity(), &k()).unwrap();
        assert_eq!(p.center, Vector2::new(50.0, 50.0));
        assert!((p.radius_2d - 5.0).abs() < 1e-12);
        assert_eq!(p.depth, 2.0);
    }

    #[test]
    fn behind_camera_is_culled() {
        assert!(project_gaussian(&g([0.0, 0.0, -1.0], 0.1, 0.7), &Pose::identity(), &k()).is_none());
        assert!(project_gaussian(&g([0.0, 0.0, 0.005], 0.1, 0.7), &Pose::identity(), &k()).is_none());
    }

    #[test]
    fn off_image_is_culled() {
        assert!(project_gaussian(&g([5.0, 0.0, 1.0], 0.01, 0.7), &Pose::identity(), &k()).is_none());
    }

    #[test]
    fn translation_cancels_offset() {
        let pose = Pose::from_translation(Vector3::new(1.0, 0.0, 0.0));
        let p = project_gaussian(&g([-1.0, 0.0, 2.0], 0.1, 0.7), &pose, &k()).unwrap();
        assert!((p.center - Vector2::new(50.0, 50.0)).norm() < 1e-12);
    }

    #[test]
    fn weight_examples() {
        let p = project_gaussian(&g([0.0, 0.0, 2.0], 0.1, 0.7), &Pose::identity(), &k()).unwrap();
        assert!((eval_weight(&p, [50.0, 50.0]) - 0.7).abs() < 1e-15);

        let p1 = project_gaussian(&g([0.0, 0.0, 2.0], 0.1, 1.0), &Pose::identity(), &k()).unwrap();
        let at_r = eval_weight(&p1, [55.0, 50.0]);
        assert!((at_r - (-0.5f64).exp()).abs() < 1e-12);
        assert!((at_r - 0.6065).abs() < 1e-4);
        // Exactly at the center the clamp applies.
        assert_eq!(eval_weight(&p1, [50.0, 50.0]), MAX_WEIGHT);

        let p0 = project_gaussian(&g([0.0, 0.0, 2.0], 0.1, 0.0), &Pose::identity(), &k()).unwrap();
        for q in [[50.0, 50.0], [52.0, 49.0], [60.0, 60.0]] {
            assert_eq!(eval_weight(&p0, q), 0.0);
        }
        // Beyond three projected radii the weight is dropped.
        assert_eq!(eval_weight(&p1, [65.5, 50.0]), 0.0);
    }
}
