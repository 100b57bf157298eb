//! Graph oracles: edge rule, consistency scores and connected components
//! computed by direct enumeration.

#![allow(dead_code)]

use std::collections::BTreeSet;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use semsplat::graph::MaskNode;
use semsplat::mask::RleMask;

pub fn unit(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n).collect()
}

pub fn node(frame: usize, id: u32, label: u16, feature: &[f64]) -> MaskNode {
    let bits = vec![true; 4];
    MaskNode::new(frame, id, label, &unit(feature), RleMask::from_bits(2, 2, &bits)).unwrap()
}

/// Nodes spread over a few frames with features near a handful of anchors,
/// so graphs mix dense groups, bridges and isolated nodes.
pub fn random_nodes(rng: &mut ChaCha8Rng, count: usize) -> Vec<MaskNode> {
    let anchors: Vec<[f64; 3]> = (0..3)
        .map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
        .collect();
    (0..count)
        .map(|i| {
            let a = anchors[rng.random_range(0..anchors.len())];
            let noise = rng.random_range(0.0..0.6);
            let f: Vec<f64> = a.iter().map(|x| x + rng.random_range(-noise..=noise)).collect();
            let f = if f.iter().all(|x| x.abs() < 1e-9) { vec![1.0, 0.0, 0.0] } else { f };
            node(rng.random_range(0..5), i as u32, rng.random_range(1..4), &f)
        })
        .collect()
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Edge rule evaluated directly from the node list.
pub fn oracle_edges(nodes: &[MaskNode], tau: f64, window: usize) -> BTreeSet<(usize, usize)> {
    let mut out = BTreeSet::new();
    for i in 0..nodes.len() {
        for j in i + 1..nodes.len() {
            let (a, b) = (&nodes[i], &nodes[j]);
            if a.frame_index != b.frame_index
                && a.frame_index.abs_diff(b.frame_index) <= window
                && cosine(a.feature(), b.feature()) >= tau
            {
                out.insert((i, j));
            }
        }
    }
    out
}

/// All set partitions of `0..n` as block-id vectors in restricted growth form.
pub fn partitions(n: usize) -> Vec<Vec<usize>> {
    fn grow(prefix: &mut Vec<usize>, n: usize, out: &mut Vec<Vec<usize>>) {
        if prefix.len() == n {
            out.push(prefix.clone());
            return;
        }
        let next = prefix.iter().copied().max().map_or(0, |m| m + 1);
        for b in 0..=next {
            prefix.push(b);
            grow(prefix, n, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    grow(&mut Vec::new(), n, &mut out);
    out
}

/// Finest partition keeping every surviving edge inside one block, found by
/// exhaustive search.
pub fn brute_force_components(n: usize, edges: &[(usize, usize)]) -> Vec<BTreeSet<usize>> {
    let best = partitions(n)
        .into_iter()
        .filter(|p| edges.iter().all(|&(i, j)| p[i] == p[j]))
        .max_by_key(|p| p.iter().copied().max().map_or(0, |m| m + 1))
        .unwrap();
    let blocks = best.iter().copied().max().unwrap() + 1;
    (0..blocks)
        .map(|b| (0..n).filter(|&i| best[i] == b).collect())
        .collect()
}

pub fn as_blocks(members: &[Vec<usize>]) -> BTreeSet<BTreeSet<usize>> {
    members.iter().map(|m| m.iter().copied().collect()).collect()
}

/// Fraction of each node's neighbors sharing its label; 1 for isolated nodes.
pub fn oracle_scores(nodes: &[MaskNode], edges: &BTreeSet<(usize, usize)>) -> Vec<f64> {
    (0..nodes.len())
        .map(|i| {
            let nb: Vec<usize> = edges
                .iter()
                .filter_map(|&(a, b)| if a == i { Some(b) } else if b == i { Some(a) } else { None })
                .collect();
            if nb.is_empty() {
                1.0
            } else {
                nb.iter().filter(|&&j| nodes[j].label == nodes[i].label).count() as f64 / nb.len() as f64
            }
        })
        .collect()
}

/// Edges whose endpoints both score above 2/3.
pub fn oracle_surviving(edges: &BTreeSet<(usize, usize)>, scores: &[f64]) -> Vec<(usize, usize)> {
    edges
        .iter()
        .copied()
        .filter(|&(i, j)| scores[i] > 2.0 / 3.0 && scores[j] > 2.0 / 3.0)
        .collect()
}
