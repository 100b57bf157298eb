use semsplat::dataset::{generate_synthetic, SynthConfig};
use semsplat::mapper::{refine_map, Keyframe, MappingConfig};
use semsplat::par;
use semsplat::render::{render, render_backward};
use semsplat::tracker::{frame_loss, LossWeights};

// The only test in this binary, so toggling the global mode is safe.
#[test]
fn sequential_and_parallel_paths_agree_bitwise() {
    let out = generate_synthetic(&SynthConfig::default()).unwrap();
    let b = &out.bundle;
    let gt = b.gt_poses.as_ref().unwrap();
    let kfs: Vec<Keyframe> = [0, 9]
        .iter()
        .map(|&k| Keyframe::new(gt[k], b.frames[k].clone(), &b.intrinsics).unwrap())
        .collect();
    let refs: Vec<&Keyframe> = kfs.iter().collect();
    let cfg = MappingConfig {
        refine_iterations: 5,
        ..MappingConfig::default()
    };

    let run = |parallel: bool| {
        par::set_parallel(parallel);
        let f = render(&out.gt_map, &gt[3], &b.intrinsics).unwrap();
        let (_, w) = frame_loss(&f, &b.frames[3], &LossWeights::default(), 0.5, true).unwrap();
        let g = render_backward(&out.gt_map, &gt[3], &b.intrinsics, &f, &w.unwrap()).unwrap();
        let mut map = out.gt_map.clone();
        let r = refine_map(&mut map, &refs, &[], &b.intrinsics, &cfg).unwrap();
        (f.color, f.depth, f.semantic, f.silhouette, g.params().to_vec(), g.pose, r, map.gaussians().to_vec())
    };
    let seq = run(false);
    let par_out = run(true);
    par::set_parallel(true);
    assert_eq!(seq, par_out);
}
