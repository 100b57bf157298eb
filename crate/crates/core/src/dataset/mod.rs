//! Sequence bundles, feature records, their on-disk layout and the
//! deterministic synthetic generator.

mod io;
mod pfm;
mod synth;
mod tum;

pub use io::{load_bundle, load_renders, save_bundle, save_renders, Manifest, VocabEntry};
pub use pfm::{read_pfm, write_pfm};
pub use synth::{generate_synthetic, OrbitConfig, SynthConfig, SynthOutput, DEPTH_VALID_SILHOUETTE};
pub use tum::{format_tum_line, parse_tum_line, read_trajectory, write_trajectory};

use crate::error::{Error, Result};
use crate::image::{Image, LabelImage};
use crate::mask::RleMask;
use crate::scene::{CameraIntrinsics, Observation, Pose};

/// One mask of one frame with its open-vocabulary embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRecord {
    pub frame_index: usize,
    pub mask_id: u32,
    pub label: u16,
    pub embedding: Vec<f64>,
    pub mask: RleMask,
    /// Uncorrupted label, when the producer knows it (synthetic data).
    pub gt_label: Option<u16>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceBundle {
    pub intrinsics: CameraIntrinsics,
    pub frames: Vec<Observation>,
    pub gt_poses: Option<Vec<Pose>>,
    pub feature_records: Vec<Vec<FeatureRecord>>,
    pub label_vocab: Vec<(u16, String)>,
    pub semantic_dim: usize,
    pub feature_dim: usize,
    /// Clean label images for evaluation, when known.
    pub gt_semantics: Option<Vec<LabelImage>>,
    /// Loaded from a depth-only sequence; semantic terms must stay off.
    pub geometric_only: bool,
}

impl SequenceBundle {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        self.intrinsics.validate()?;
        let n = self.frames.len();
        if let Some(gt) = &self.gt_poses {
            if gt.len() != n {
                return Err(Error::invalid(format!("{} gt poses for {n} frames", gt.len())));
            }
        }
        if self.feature_records.len() != n {
            return Err(Error::invalid(format!(
                "{} feature record lists for {n} frames",
                self.feature_records.len()
            )));
        }
        if let Some(gt) = &self.gt_semantics {
            if gt.len() != n {
                return Err(Error::invalid(format!("{} gt label images for {n} frames", gt.len())));
            }
        }
        let known = |l: u16| l == crate::scene::BACKGROUND_LABEL || self.label_vocab.iter().any(|(id, _)| *id == l);
        for (i, f) in self.frames.iter().enumerate() {
            f.validate(&self.intrinsics)?;
            if let Some(l) = f.semantic.data().iter().find(|&&l| !known(l)) {
                return Err(Error::invalid(format!("frame {i} uses label {l} missing from the vocabulary")));
            }
            if let Some(l) = f.semantic.data().iter().find(|&&l| l as usize >= self.semantic_dim) {
                return Err(Error::invalid(format!(
                    "frame {i} label {l} exceeds semantic dimension {}",
                    self.semantic_dim
                )));
            }
        }
        for (i, recs) in self.feature_records.iter().enumerate() {
            for r in recs {
                if r.embedding.len() != self.feature_dim {
                    return Err(Error::invalid(format!(
                        "frame {i} mask {} has embedding dimension {}, expected {}",
                        r.mask_id,
                        r.embedding.len(),
                        self.feature_dim
                    )));
                }
                if r.mask.width() != self.intrinsics.width || r.mask.height() != self.intrinsics.height {
                    return Err(Error::invalid(format!("frame {i} mask {} has wrong bounds", r.mask_id)));
                }
            }
        }
        Ok(())
    }
}

/// Expands a label image into `S` one-hot channels.
pub fn one_hot_encode(labels: &LabelImage, semantic_dim: usize) -> Result<Image<f64>> {
    let mut out = Image::filled(labels.width(), labels.height(), semantic_dim, 0.0);
    for (i, &l) in labels.data().iter().enumerate() {
        let l = l as usize;
        if l >= semantic_dim {
            return Err(Error::invalid(format!(
                "label {l} out of range for {semantic_dim} channels"
            )));
        }
        out.data_mut()[i * semantic_dim + l] = 1.0;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_hot_examples() {
        let img = Image::from_vec(2, 1, 1, vec![3u16, 0]);
        let oh = one_hot_encode(&img, 6).unwrap();
        assert_eq!(oh.at(0), &[0.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        assert_eq!(oh.at(1), &[1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);

        let bg = Image::filled(3, 3, 1, 0u16);
        let oh = one_hot_encode(&bg, 4).unwrap();
        assert!((0..9).all(|i| oh.at(i)[0] == 1.0 && oh.at(i)[1..].iter().all(|&v| v == 0.0)));

        let bad = Image::from_vec(1, 1, 1, vec![6u16]);
        assert!(matches!(one_hot_encode(&bad, 6), Err(Error::InvalidArgument(_))));
    }
}
