mod common;

use common::oracles::*;
use semsplat::render::render;

#[test]
fn matches_naive_reference() {
    for seed in 0..5 {
        let scene = random_scene(seed, 10, 4);
        let fast = render(&scene.map, &scene.pose, &scene.intr).unwrap();
        let slow = naive_render(&scene.map, &scene.pose, &scene.intr);
        assert!(max_abs_diff(fast.color.data(), &slow.color) < 1e-6);
        assert!(max_abs_diff(fast.depth.data(), &slow.depth) < 1e-6);
        assert!(max_abs_diff(fast.semantic.data(), &slow.semantic) < 1e-6);
        assert!(max_abs_diff(fast.silhouette.data(), &slow.silhouette) < 1e-6);
    }
}

#[test]
fn silhouette_two_ways() {
    for seed in 0..5 {
        let scene = random_scene(100 + seed, 10, 3);
        let f = render(&scene.map, &scene.pose, &scene.intr).unwrap();
        for i in 0..f.silhouette.pixel_count() {
            let s = f.silhouette.data()[i];
            assert!((0.0..=1.0).contains(&s));
            assert!((s - f.silhouette_product_form(i)).abs() < 1e-6);
        }
    }
}

#[test]
fn uniform_semantics_follow_silhouette() {
    let mut scene = random_scene(7, 8, 4);
    let shared = vec![0.1, 0.2, 0.3, 0.4];
    for g in scene.map.gaussians_mut() {
        g.semantic = shared.clone();
    }
    let f = render(&scene.map, &scene.pose, &scene.intr).unwrap();
    for i in 0..f.silhouette.pixel_count() {
        let s = f.silhouette.data()[i];
        for (k, v) in f.semantic.at(i).iter().enumerate() {
            assert!((v - s * shared[k]).abs() < 1e-6);
        }
    }
}

#[test]
fn front_opacity_never_raises_back_contribution() {
    for seed in 0..5 {
        let scene = random_scene(200 + seed, 10, 2);
        let base = render(&scene.map, &scene.pose, &scene.intr).unwrap();
        for i in 0..base.silhouette.pixel_count() {
            let list = base.contributors(i);
            if list.len() < 2 {
                continue;
            }
            let front = base.projected()[list[0].projected as usize].source_index;
            let mut map = scene.map.clone();
            let g = &mut map.gaussians_mut()[front];
            g.opacity = (g.opacity + 0.05).min(1.0);
            let bumped = render(&map, &scene.pose, &scene.intr).unwrap();
            let weight_of = |f: &semsplat::render::RenderedFrame, src: usize| -> f64 {
                let mut t = 1.0;
                for c in f.contributors(i) {
                    if f.projected()[c.projected as usize].source_index == src {
                        return c.weight * t;
                    }
                    t *= 1.0 - c.weight;
                }
                0.0
            };
            for c in &list[1..] {
                let src = base.projected()[c.projected as usize].source_index;
                assert!(weight_of(&bumped, src) <= weight_of(&base, src) + 1e-15);
            }
        }
    }
}

#[test]
fn analytic_gradients_match_central_differences() {
    for seed in 0..5 {
        let scene = random_scene(1000 + seed, 6, 4);
        let report = gradient_check(&scene, seed, 1e-5);
        assert!(report.failures.is_empty(), "seed {seed}: {:#?}", report.failures);
        assert!(report.checked > 0);
    }
}
