use std::fs;
use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageBuffer, Luma, Rgb};
use serde::{Deserialize, Serialize};

use super::pfm::{read_pfm, write_pfm};
use super::tum::{read_trajectory, write_trajectory};
use super::{FeatureRecord, SequenceBundle};
use crate::error::{Error, Result};
use crate::image::{Image, LabelImage};
use crate::mask::RleMask;
use crate::metrics::FrameRender;
use crate::scene::{CameraIntrinsics, Observation, Pose};

/// Metric depth scale of 16-bit TUM-RGBD depth PNGs.
const TUM_DEPTH_SCALE: f64 = 5000.0;
/// Maximum timestamp gap when matching TUM ground truth to frames.
const TUM_MATCH_SECONDS: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VocabEntry {
    pub id: u16,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub intrinsics: CameraIntrinsics,
    pub frame_count: usize,
    pub semantic_dim: usize,
    pub feature_dim: usize,
    pub label_vocab: Vec<VocabEntry>,
    pub has_gt_poses: bool,
    #[serde(default)]
    pub has_gt_semantics: bool,
    #[serde(default)]
    pub timestamps: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct FeatureJson {
    mask_id: u32,
    label: u16,
    embedding: Vec<f64>,
    rle: Vec<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    gt_label: Option<u16>,
}

fn frame_file(dir: &Path, sub: &str, k: usize, ext: &str) -> PathBuf {
    dir.join(sub).join(format!("{k:06}.{ext}"))
}

fn create_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn save_rgb(path: &Path, img: &Image<f64>) -> Result<()> {
    let bytes = img.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let buf: ImageBuffer<Rgb<u8>, Vec<u8>> =
        ImageBuffer::from_raw(img.width() as u32, img.height() as u32, bytes).expect("rgb buffer size");
    buf.save(path).map_err(|e| Error::load(path, e.to_string()))
}

fn save_labels(path: &Path, img: &LabelImage) -> Result<()> {
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(img.width() as u32, img.height() as u32, img.data().to_vec()).expect("label buffer size");
    buf.save(path).map_err(|e| Error::load(path, e.to_string()))
}

fn open_image(path: &Path) -> Result<DynamicImage> {
    if !path.exists() {
        return Err(Error::load(path, "missing file"));
    }
    image::open(path).map_err(|e| Error::load(path, e.to_string()))
}

fn load_rgb(path: &Path) -> Result<Image<f64>> {
    let img = open_image(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|b| b as f64 / 255.0).collect();
    Ok(Image::from_vec(w as usize, h as usize, 3, data))
}

/// Reads a single-channel 8- or 16-bit PNG without rescaling its values.
fn load_u16(path: &Path) -> Result<Image<u16>> {
    let (w, h, data) = match open_image(path)? {
        DynamicImage::ImageLuma16(b) => {
            let (w, h) = b.dimensions();
            (w, h, b.into_raw())
        }
        DynamicImage::ImageLuma8(b) => {
            let (w, h) = b.dimensions();
            (w, h, b.into_raw().into_iter().map(u16::from).collect())
        }
        _ => return Err(Error::load(path, "expected a single-channel image")),
    };
    Ok(Image::from_vec(w as usize, h as usize, 1, data))
}

fn check_size<T>(path: &Path, img: &Image<T>, intr: &CameraIntrinsics) -> Result<()> {
    if img.width() != intr.width || img.height() != intr.height {
        return Err(Error::load(
            path,
            format!("size {}x{} does not match {}x{}", img.width(), img.height(), intr.width, intr.height),
        ));
    }
    Ok(())
}

/// Files in `dir/sub` with extension `ext`.
fn count_files(dir: &Path, sub: &str, ext: &str) -> usize {
    fs::read_dir(dir.join(sub))
        .map(|rd| {
            rd.filter_map(|e| e.ok())
                .filter(|e| e.path().extension().is_some_and(|x| x == ext))
                .count()
        })
        .unwrap_or(0)
}

fn check_complete(dir: &Path, sub: &str, ext: &str, n: usize) -> Result<()> {
    let found = count_files(dir, sub, ext);
    if let Some(k) = (0..n).find(|&k| !frame_file(dir, sub, k, ext).exists()) {
        return Err(Error::load(
            frame_file(dir, sub, k, ext),
            format!("missing (manifest frame_count {n}, found {found} {sub} files)"),
        ));
    }
    if found != n {
        return Err(Error::load(
            dir.join(sub),
            format!("manifest frame_count {n} but {found} {sub} files"),
        ));
    }
    Ok(())
}

pub fn save_bundle(bundle: &SequenceBundle, dir: &Path) -> Result<()> {
    bundle.validate()?;
    let n = bundle.len();
    for sub in ["rgb", "depth", "sem", "features"] {
        create_dir(&dir.join(sub))?;
    }
    let manifest = Manifest {
        intrinsics: bundle.intrinsics,
        frame_count: n,
        semantic_dim: bundle.semantic_dim,
        feature_dim: bundle.feature_dim,
        label_vocab: bundle
            .label_vocab
            .iter()
            .map(|(id, name)| VocabEntry { id: *id, name: name.clone() })
            .collect(),
        has_gt_poses: bundle.gt_poses.is_some(),
        has_gt_semantics: bundle.gt_semantics.is_some(),
        timestamps: bundle.frames.iter().map(|f| f.timestamp).collect(),
    };
    let mpath = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&mpath, text).map_err(|e| Error::io(&mpath, e))?;

    for (k, f) in bundle.frames.iter().enumerate() {
        save_rgb(&frame_file(dir, "rgb", k, "png"), &f.rgb)?;
        write_pfm(&frame_file(dir, "depth", k, "pfm"), &f.depth)?;
        save_labels(&frame_file(dir, "sem", k, "png"), &f.semantic)?;
        let recs: Vec<FeatureJson> = bundle.feature_records[k]
            .iter()
            .map(|r| FeatureJson {
                mask_id: r.mask_id,
                label: r.label,
                embedding: r.embedding.clone(),
                rle: r.mask.runs().to_vec(),
                gt_label: r.gt_label,
            })
            .collect();
        let fpath = frame_file(dir, "features", k, "json");
        let text = serde_json::to_string(&recs).expect("features serialize");
        fs::write(&fpath, text).map_err(|e| Error::io(&fpath, e))?;
    }
    if let Some(gt) = &bundle.gt_semantics {
        create_dir(&dir.join("sem_gt"))?;
        for (k, img) in gt.iter().enumerate() {
            save_labels(&frame_file(dir, "sem_gt", k, "png"), img)?;
        }
    }
    if let Some(poses) = &bundle.gt_poses {
        let stamped: Vec<(f64, Pose)> = bundle.frames.iter().map(|f| f.timestamp).zip(poses.iter().cloned()).collect();
        write_trajectory(&dir.join("poses.txt"), &stamped)?;
    }
    Ok(())
}

/// Loads a bundle directory, or a TUM-RGBD sequence with
/// `associations.txt` in geometric-only mode.
pub fn load_bundle(dir: &Path) -> Result<SequenceBundle> {
    let mpath = dir.join("manifest.json");
    if !mpath.exists() {
        if dir.join("associations.txt").exists() {
            return load_tum_sequence(dir);
        }
        return Err(Error::load(mpath, "missing manifest"));
    }
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::load(&mpath, e.to_string()))?;
    m.intrinsics.validate().map_err(|e| Error::load(&mpath, e.to_string()))?;
    let n = m.frame_count;
    if !m.timestamps.is_empty() && m.timestamps.len() != n {
        return Err(Error::load(&mpath, format!("{} timestamps for {n} frames", m.timestamps.len())));
    }
    check_complete(dir, "rgb", "png", n)?;
    check_complete(dir, "depth", "pfm", n)?;
    check_complete(dir, "sem", "png", n)?;
    check_complete(dir, "features", "json", n)?;
    if m.has_gt_semantics {
        check_complete(dir, "sem_gt", "png", n)?;
    }

    let intr = &m.intrinsics;
    let mut frames = Vec::with_capacity(n);
    let mut feature_records = Vec::with_capacity(n);
    for k in 0..n {
        let rp = frame_file(dir, "rgb", k, "png");
        let rgb = load_rgb(&rp)?;
        check_size(&rp, &rgb, intr)?;
        let dp = frame_file(dir, "depth", k, "pfm");
        let depth = read_pfm(&dp)?;
        if depth.channels() != 1 {
            return Err(Error::load(&dp, "depth map must have one channel"));
        }
        check_size(&dp, &depth, intr)?;
        let sp = frame_file(dir, "sem", k, "png");
        let semantic = load_u16(&sp)?;
        check_size(&sp, &semantic, intr)?;
        frames.push(Observation {
            rgb,
            depth,
            semantic,
            frame_index: k,
            timestamp: m.timestamps.get(k).copied().unwrap_or(k as f64),
        });

        let fp = frame_file(dir, "features", k, "json");
        let text = fs::read_to_string(&fp).map_err(|e| Error::io(&fp, e))?;
        let raw: Vec<FeatureJson> = serde_json::from_str(&text).map_err(|e| Error::load(&fp, e.to_string()))?;
        let recs = raw
            .into_iter()
            .map(|r| {
                let mask = RleMask::from_runs(intr.width, intr.height, r.rle)
                    .map_err(|e| Error::load(&fp, format!("mask {}: {e}", r.mask_id)))?;
                Ok(FeatureRecord {
                    frame_index: k,
                    mask_id: r.mask_id,
                    label: r.label,
                    embedding: r.embedding,
                    mask,
                    gt_label: r.gt_label,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        feature_records.push(recs);
    }

    let gt_semantics = if m.has_gt_semantics {
        let mut v = Vec::with_capacity(n);
        for k in 0..n {
            let p = frame_file(dir, "sem_gt", k, "png");
            let img = load_u16(&p)?;
            check_size(&p, &img, intr)?;
            v.push(img);
        }
        Some(v)
    } else {
        None
    };

    let gt_poses = if m.has_gt_poses {
        let ppath = dir.join("poses.txt");
        if !ppath.exists() {
            return Err(Error::load(ppath, "manifest declares gt poses but the file is missing"));
        }
        let poses = read_trajectory(&ppath)?;
        if poses.len() != n {
            return Err(Error::load(ppath, format!("{} poses for {n} frames", poses.len())));
        }
        Some(poses.into_iter().map(|(_, p)| p).collect())
    } else {
        None
    };

    let bundle = SequenceBundle {
        intrinsics: m.intrinsics,
        frames,
        gt_poses,
        feature_records,
        label_vocab: m.label_vocab.into_iter().map(|e| (e.id, e.name)).collect(),
        semantic_dim: m.semantic_dim,
        feature_dim: m.feature_dim,
        gt_semantics,
        geometric_only: false,
    };
    bundle.validate().map_err(|e| Error::load(dir, e.to_string()))?;
    Ok(bundle)
}

/// Writes rendered frames under `dir` as `rgb/*.pfm`, `depth/*.pfm` and
/// `sem/*.png`.
pub fn save_renders(dir: &Path, renders: &[FrameRender]) -> Result<()> {
    for sub in ["rgb", "depth", "sem"] {
        create_dir(&dir.join(sub))?;
    }
    for (k, r) in renders.iter().enumerate() {
        write_pfm(&frame_file(dir, "rgb", k, "pfm"), &r.rgb)?;
        write_pfm(&frame_file(dir, "depth", k, "pfm"), &r.depth)?;
        save_labels(&frame_file(dir, "sem", k, "png"), &r.labels)?;
    }
    Ok(())
}

/// Reads `frame_count` rendered frames written by [`save_renders`].
pub fn load_renders(dir: &Path, frame_count: usize, intr: &CameraIntrinsics) -> Result<Vec<FrameRender>> {
    if !dir.is_dir() {
        return Err(Error::load(dir, "missing renders directory"));
    }
    check_complete(dir, "rgb", "pfm", frame_count)?;
    check_complete(dir, "depth", "pfm", frame_count)?;
    check_complete(dir, "sem", "png", frame_count)?;
    (0..frame_count)
        .map(|k| {
            let rp = frame_file(dir, "rgb", k, "pfm");
            let rgb = read_pfm(&rp)?;
            if rgb.channels() != 3 {
                return Err(Error::load(&rp, "rendered color must have three channels"));
            }
            check_size(&rp, &rgb, intr)?;
            let dp = frame_file(dir, "depth", k, "pfm");
            let depth = read_pfm(&dp)?;
            if depth.channels() != 1 {
                return Err(Error::load(&dp, "depth map must have one channel"));
            }
            check_size(&dp, &depth, intr)?;
            let sp = frame_file(dir, "sem", k, "png");
            let labels = load_u16(&sp)?;
            check_size(&sp, &labels, intr)?;
            Ok(FrameRender { rgb, depth, labels })
        })
        .collect()
}

fn load_tum_sequence(dir: &Path) -> Result<SequenceBundle> {
    let apath = dir.join("associations.txt");
    let text = fs::read_to_string(&apath).map_err(|e| Error::io(&apath, e))?;
    let mut entries = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = t.split_whitespace().collect();
        let ts = f.first().and_then(|s| s.parse::<f64>().ok());
        match (ts, f.len()) {
            (Some(ts), 4) => entries.push((ts, f[1].to_string(), f[3].to_string())),
            _ => return Err(Error::load(&apath, format!("line {}: expected `ts rgb ts depth`", i + 1))),
        }
    }
    if entries.is_empty() {
        return Err(Error::load(&apath, "no frames"));
    }

    let mut frames = Vec::with_capacity(entries.len());
    let mut intr: Option<CameraIntrinsics> = None;
    for (k, (ts, rgb_rel, depth_rel)) in entries.iter().enumerate() {
        let rp = dir.join(rgb_rel);
        let rgb = load_rgb(&rp)?;
        let intr = match &intr {
            Some(i) => *i,
            None => {
                let i = CameraIntrinsics::new(525.0, 525.0, 319.5, 239.5, rgb.width(), rgb.height())?;
                intr = Some(i);
                i
            }
        };
        check_size(&rp, &rgb, &intr)?;
        let dp = dir.join(depth_rel);
        let raw = load_u16(&dp)?;
        check_size(&dp, &raw, &intr)?;
        let depth = Image::from_vec(
            intr.width,
            intr.height,
            1,
            raw.data().iter().map(|&d| d as f64 / TUM_DEPTH_SCALE).collect(),
        );
        frames.push(Observation {
            rgb,
            depth,
            semantic: Image::filled(intr.width, intr.height, 1, 0),
            frame_index: k,
            timestamp: *ts,
        });
    }
    let intrinsics = intr.expect("at least one frame");

    let gt_path = dir.join("groundtruth.txt");
    let gt_poses = if gt_path.exists() {
        let gt = read_trajectory(&gt_path)?;
        let matched: Option<Vec<Pose>> = frames
            .iter()
            .map(|f| {
                gt.iter()
                    .min_by(|a, b| (a.0 - f.timestamp).abs().total_cmp(&(b.0 - f.timestamp).abs()))
                    .filter(|g| (g.0 - f.timestamp).abs() <= TUM_MATCH_SECONDS)
                    .map(|g| g.1)
            })
            .collect();
        matched
    } else {
        None
    };

    let n = frames.len();
    Ok(SequenceBundle {
        intrinsics,
        frames,
        gt_poses,
        feature_records: vec![Vec::new(); n],
        label_vocab: vec![(0, "background".to_string())],
        semantic_dim: 2,
        feature_dim: 0,
        gt_semantics: None,
        geometric_only: true,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_synthetic, SynthConfig};

    fn small_bundle() -> SequenceBundle {
        let cfg = SynthConfig {
            frame_count: 3,
            label_flip_rate: 0.3,
            ..SynthConfig::default()
        };
        generate_synthetic(&cfg).unwrap().bundle
    }

    #[test]
    fn round_trip() {
        let b = small_bundle();
        let dir = tempfile::tempdir().unwrap();
        save_bundle(&b, dir.path()).unwrap();
        let l = load_bundle(dir.path()).unwrap();
        assert_eq!(l.intrinsics, b.intrinsics);
        assert_eq!(l.label_vocab, b.label_vocab);
        assert_eq!(l.feature_records, b.feature_records);
        assert_eq!(l.gt_semantics, b.gt_semantics);
        for (x, y) in l.frames.iter().zip(&b.frames) {
            assert_eq!(x.semantic, y.semantic);
            assert_eq!(x.timestamp, y.timestamp);
            // 8-bit color: half a quantization step
            assert!(x.rgb.data().iter().zip(y.rgb.data()).all(|(a, b)| (a - b).abs() <= 0.5 / 255.0 + 1e-12));
            assert!(x.depth.data().iter().zip(y.depth.data()).all(|(a, b)| (a - b).abs() < 1e-6));
        }
        for (p, q) in l.gt_poses.unwrap().iter().zip(b.gt_poses.as_ref().unwrap()) {
            assert!(p.rotation_distance(q) < 1e-9);
            assert!((p.translation - q.translation).norm() < 1e-9);
        }
    }

    #[test]
    fn empty_directory_missing_manifest() {
        let dir = tempfile::tempdir().unwrap();
        match load_bundle(dir.path()) {
            Err(Error::Load { path, message }) => {
                assert!(path.ends_with("manifest.json"));
                assert!(message.contains("manifest"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn missing_depth_file_is_cited() {
        let cfg = SynthConfig {
            frame_count: 10,
            ..SynthConfig::default()
        };
        let b = generate_synthetic(&cfg).unwrap().bundle;
        let dir = tempfile::tempdir().unwrap();
        save_bundle(&b, dir.path()).unwrap();
        fs::remove_file(frame_file(dir.path(), "depth", 9, "pfm")).unwrap();
        match load_bundle(dir.path()) {
            Err(Error::Load { path, message }) => {
                assert!(path.ends_with("depth/000009.pfm"), "{path:?}");
                assert!(message.contains("10") && message.contains('9'), "{message}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn corrupt_rle_names_the_file() {
        let b = small_bundle();
        let dir = tempfile::tempdir().unwrap();
        save_bundle(&b, dir.path()).unwrap();
        let fp = frame_file(dir.path(), "features", 1, "json");
        fs::write(&fp, r#"[{"mask_id":0,"label":1,"embedding":[],"rle":[5,3]}]"#).unwrap();
        match load_bundle(dir.path()) {
            Err(Error::Load { path, .. }) => assert_eq!(path, fp),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn tum_associations_geometric_only() {
        let dir = tempfile::tempdir().unwrap();
        create_dir(&dir.path().join("rgb")).unwrap();
        create_dir(&dir.path().join("depth")).unwrap();
        let rgb: ImageBuffer<Rgb<u8>, Vec<u8>> = ImageBuffer::from_pixel(640, 480, Rgb([255, 0, 0]));
        rgb.save(dir.path().join("rgb/1.png")).unwrap();
        let depth: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_pixel(640, 480, Luma([5000]));
        depth.save(dir.path().join("depth/1.png")).unwrap();
        fs::write(dir.path().join("associations.txt"), "1.0 rgb/1.png 1.001 depth/1.png\n").unwrap();
        fs::write(dir.path().join("groundtruth.txt"), "1.005 0 0 1 0 0 0 1\n").unwrap();
        let b = load_bundle(dir.path()).unwrap();
        assert!(b.geometric_only);
        assert_eq!(b.frames[0].depth.get(3, 3), 1.0);
        assert_eq!(b.intrinsics.focal_x, 525.0);
        let gt = b.gt_poses.unwrap();
        assert!((gt[0].camera_center() - nalgebra::Vector3::new(0.0, 0.0, 1.0)).norm() < 1e-12);
    }

    #[test]
    fn renders_round_trip_through_f32() {
        let b = small_bundle();
        let renders: Vec<FrameRender> = b
            .frames
            .iter()
            .map(|f| FrameRender {
                rgb: f.rgb.clone(),
                depth: f.depth.clone(),
                labels: f.semantic.clone(),
            })
            .collect();
        let dir = tempfile::tempdir().unwrap();
        save_renders(dir.path(), &renders).unwrap();
        let back = load_renders(dir.path(), renders.len(), &b.intrinsics).unwrap();
        for (x, y) in back.iter().zip(&renders) {
            assert_eq!(x.labels, y.labels);
            for (a, b) in x.rgb.data().iter().zip(y.rgb.data()).chain(x.depth.data().iter().zip(y.depth.data())) {
                assert_eq!(*a, *b as f32 as f64);
            }
        }
        match load_renders(dir.path(), renders.len() + 1, &b.intrinsics) {
            Err(Error::Load { .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }
}
