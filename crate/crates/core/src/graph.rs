//! Cross-frame mask graph: similarity edges, consistency scores, clustering
//! and relabeling of inconsistent masks.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::dataset::FeatureRecord;
use crate::error::{Error, Result};
use crate::image::{Image, LabelImage};
use crate::mask::RleMask;
use crate::par;

/// Nodes whose score is at or below this lose all their edges.
pub const PRUNE_SCORE: f64 = 2.0 / 3.0;

const UNIT_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct MaskNode {
    pub frame_index: usize,
    pub mask_id: u32,
    pub label: u16,
    feature: Vec<f64>,
    pub pixel_mask: RleMask,
}

impl MaskNode {
    /// Builds a node, normalizing `feature` to unit length.
    pub fn new(frame_index: usize, mask_id: u32, label: u16, feature: &[f64], pixel_mask: RleMask) -> Result<Self> {
        let norm = feature.iter().map(|x| x * x).sum::<f64>().sqrt();
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(Error::invalid(format!(
                "mask {mask_id} of frame {frame_index} has a zero or non-finite feature"
            )));
        }
        if pixel_mask.is_empty() {
            return Err(Error::invalid(format!("mask {mask_id} of frame {frame_index} is empty")));
        }
        Ok(Self {
            frame_index,
            mask_id,
            label,
            feature: feature.iter().map(|x| x / norm).collect(),
            pixel_mask,
        })
    }

    pub fn from_record(r: &FeatureRecord) -> Result<Self> {
        Self::new(r.frame_index, r.mask_id, r.label, &r.embedding, r.mask.clone())
    }

    pub fn feature(&self) -> &[f64] {
        &self.feature
    }

    pub fn similarity(&self, other: &MaskNode) -> f64 {
        self.feature.iter().zip(&other.feature).map(|(a, b)| a * b).sum()
    }
}

/// Nodes built from every record of `records`, skipping empty masks.
pub fn nodes_from_records(records: &[Vec<FeatureRecord>]) -> Result<Vec<MaskNode>> {
    records
        .iter()
        .flatten()
        .filter(|r| !r.mask.is_empty())
        .map(MaskNode::from_record)
        .collect()
}

#[derive(Debug, Clone)]
pub struct ConsistencyGraph {
    nodes: Vec<MaskNode>,
    edges: Vec<(usize, usize)>,
    adjacency: Vec<Vec<usize>>,
    tau: f64,
    window: usize,
}

impl ConsistencyGraph {
    pub fn nodes(&self) -> &[MaskNode] {
        &self.nodes
    }

    /// Edges as `(i, j)` with `i < j`, sorted.
    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.adjacency[i]
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.adjacency.get(i).is_some_and(|n| n.binary_search(&j).is_ok())
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn window(&self) -> usize {
        self.window
    }

    /// Same nodes and edges with labels replaced.
    pub fn with_labels(&self, labels: &[u16]) -> Self {
        assert_eq!(labels.len(), self.nodes.len());
        let mut g = self.clone();
        for (n, &l) in g.nodes.iter_mut().zip(labels) {
            n.label = l;
        }
        g
    }
}

pub fn build_graph(nodes: Vec<MaskNode>, tau: f64, window: usize) -> Result<ConsistencyGraph> {
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(Error::invalid(format!("tau must lie in (0,1], got {tau}")));
    }
    if window == 0 {
        return Err(Error::invalid("window must be at least 1"));
    }
    if let Some(n) = nodes.iter().find(|n| {
        let norm = n.feature.iter().map(|x| x * x).sum::<f64>().sqrt();
        (norm - 1.0).abs() > UNIT_TOL
    }) {
        return Err(Error::invalid(format!("mask {} has a non-unit feature", n.mask_id)));
    }
    if let Some(d) = nodes.windows(2).find(|w| w[0].feature.len() != w[1].feature.len()) {
        return Err(Error::invalid(format!(
            "feature dimensions differ ({} vs {})",
            d[0].feature.len(),
            d[1].feature.len()
        )));
    }
    let per_node: Vec<Vec<usize>> = par::map_range(nodes.len(), |i| {
        let a = &nodes[i];
        (i + 1..nodes.len())
            .filter(|&j| {
                let b = &nodes[j];
                a.frame_index != b.frame_index
                    && a.frame_index.abs_diff(b.frame_index) <= window
                    && a.similarity(b) >= tau
            })
            .collect()
    });
    let mut adjacency = vec![Vec::new(); nodes.len()];
    let mut edges = Vec::new();
    for (i, js) in per_node.into_iter().enumerate() {
        for j in js {
            edges.push((i, j));
            adjacency[i].push(j);
            adjacency[j].push(i);
        }
    }
    adjacency.iter_mut().for_each(|a| a.sort_unstable());
    Ok(ConsistencyGraph {
        nodes,
        edges,
        adjacency,
        tau,
        window,
    })
}

/// Fraction of the node's neighbors sharing its label; 1 for isolated nodes.
pub fn consistency_score(graph: &ConsistencyGraph, node: usize) -> f64 {
    let n = &graph.adjacency[node];
    if n.is_empty() {
        return 1.0;
    }
    let label = graph.nodes[node].label;
    let same = n.iter().filter(|&&j| graph.nodes[j].label == label).count();
    same as f64 / n.len() as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterResult {
    pub cluster_of: Vec<usize>,
    pub canonical_label: Vec<u16>,
    pub scores: Vec<f64>,
    /// Highest-scoring member carrying the canonical label.
    pub canonical_member: Vec<usize>,
    pub members: Vec<Vec<usize>>,
}

impl ClusterResult {
    pub fn cluster_count(&self) -> usize {
        self.members.len()
    }
}

struct DisjointSet {
    parent: Vec<usize>,
}

impl DisjointSet {
    fn new(n: usize) -> Self {
        Self { parent: (0..n).collect() }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            // smaller root wins so roots are stable
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.parent[hi] = lo;
        }
    }
}

/// Edges surviving the score pruning.
pub fn surviving_edges(graph: &ConsistencyGraph, scores: &[f64]) -> Vec<(usize, usize)> {
    graph
        .edges
        .iter()
        .copied()
        .filter(|&(i, j)| scores[i] > PRUNE_SCORE && scores[j] > PRUNE_SCORE)
        .collect()
}

pub fn cluster(graph: &ConsistencyGraph) -> ClusterResult {
    let n = graph.nodes.len();
    let scores: Vec<f64> = (0..n).map(|i| consistency_score(graph, i)).collect();
    let mut ds = DisjointSet::new(n);
    for (i, j) in surviving_edges(graph, &scores) {
        ds.union(i, j);
    }
    // cluster ids in order of each component's smallest node
    let mut id_of_root = BTreeMap::new();
    let mut cluster_of = vec![0; n];
    let mut members: Vec<Vec<usize>> = Vec::new();
    for (i, slot) in cluster_of.iter_mut().enumerate() {
        let root = ds.find(i);
        let id = *id_of_root.entry(root).or_insert_with(|| {
            members.push(Vec::new());
            members.len() - 1
        });
        *slot = id;
        members[id].push(i);
    }
    let mut canonical_label = Vec::with_capacity(members.len());
    let mut canonical_member = Vec::with_capacity(members.len());
    for m in &members {
        let mut counts: BTreeMap<u16, usize> = BTreeMap::new();
        for &i in m {
            *counts.entry(graph.nodes[i].label).or_default() += 1;
        }
        // BTreeMap iterates ascending, so the first maximum is the smallest id
        let mut best = (0u16, 0usize);
        for (&l, &c) in &counts {
            if c > best.1 {
                best = (l, c);
            }
        }
        let label = best.0;
        let rep = m
            .iter()
            .copied()
            .filter(|&i| graph.nodes[i].label == label)
            .fold(None, |acc: Option<usize>, i| match acc {
                Some(a) if scores[a] >= scores[i] => Some(a),
                _ => Some(i),
            })
            .expect("majority label has a member");
        canonical_label.push(label);
        canonical_member.push(rep);
    }
    ClusterResult {
        cluster_of,
        canonical_label,
        scores,
        canonical_member,
        members,
    }
}

/// Target label for each node after restoration, or `None` when it stays.
///
/// Members of multi-node clusters compare against their own cluster. A node
/// left alone by pruning takes the majority canonical label over the clusters
/// of its original neighbors (ties to the smallest id) and compares against
/// the most similar canonical member carrying that label.
pub fn relabel_targets(result: &ClusterResult, graph: &ConsistencyGraph) -> Vec<Option<u16>> {
    let nodes = &graph.nodes;
    (0..nodes.len())
        .map(|i| {
            let c = result.cluster_of[i];
            let (label, rep) = if result.members[c].len() > 1 {
                (result.canonical_label[c], result.canonical_member[c])
            } else {
                let mut votes: BTreeMap<u16, usize> = BTreeMap::new();
                for &j in graph.neighbors(i) {
                    *votes.entry(result.canonical_label[result.cluster_of[j]]).or_default() += 1;
                }
                let label = votes
                    .iter()
                    .fold(None, |acc: Option<(u16, usize)>, (&l, &n)| match acc {
                        Some((_, best)) if best >= n => acc,
                        _ => Some((l, n)),
                    })?
                    .0;
                let rep = graph
                    .neighbors(i)
                    .iter()
                    .map(|&j| result.canonical_member[result.cluster_of[j]])
                    .filter(|&m| result.canonical_label[result.cluster_of[m]] == label)
                    .map(|m| (nodes[i].similarity(&nodes[m]), m))
                    .fold(None, |acc: Option<(f64, usize)>, (s, m)| match acc {
                        Some((bs, bm)) if bs > s || (bs == s && bm <= m) => acc,
                        _ => Some((s, m)),
                    })?
                    .1;
                (label, rep)
            };
            (nodes[i].label != label && nodes[i].similarity(&nodes[rep]) > graph.tau).then_some(label)
        })
        .collect()
}

/// Overwrites the mask regions of relabeled nodes with their canonical labels.
pub fn relabel_frames(
    result: &ClusterResult,
    graph: &ConsistencyGraph,
    frames: &[LabelImage],
) -> Result<Vec<LabelImage>> {
    let mut out = frames.to_vec();
    for (node, target) in graph.nodes.iter().zip(relabel_targets(result, graph)) {
        let frame = out.get_mut(node.frame_index).ok_or_else(|| {
            Error::invalid(format!("mask {} refers to missing frame {}", node.mask_id, node.frame_index))
        })?;
        if node.pixel_mask.width() != frame.width() || node.pixel_mask.height() != frame.height() {
            return Err(Error::invalid(format!(
                "mask {} of frame {} does not fit the {}x{} label image",
                node.mask_id,
                node.frame_index,
                frame.width(),
                frame.height()
            )));
        }
        if let Some(label) = target {
            let data = frame.data_mut();
            for p in node.pixel_mask.indices() {
                data[p] = label;
            }
        }
    }
    Ok(out)
}

fn check_pair(splat: &Image<f64>, updated: &LabelImage) -> Result<()> {
    if splat.width() != updated.width() || splat.height() != updated.height() {
        return Err(Error::invalid("semantic render and label image differ in size"));
    }
    Ok(())
}

/// L1 distance between one S-channel render and a one-hot label image.
/// With `grad`, also returns the per-pixel per-channel derivative.
pub fn frame_consistency_loss(splat: &Image<f64>, updated: &LabelImage, grad: bool) -> Result<(f64, Option<Image<f64>>)> {
    check_pair(splat, updated)?;
    let s = splat.channels();
    let mut g = grad.then(|| Image::filled(splat.width(), splat.height(), s, 0.0));
    let mut total = 0.0;
    for (p, &label) in updated.data().iter().enumerate() {
        let l = label as usize;
        if l >= s {
            return Err(Error::invalid(format!("label {l} out of range for {s} channels")));
        }
        let px = splat.at(p);
        for (c, &v) in px.iter().enumerate() {
            let target = if c == l { 1.0 } else { 0.0 };
            total += (v - target).abs();
            if let Some(g) = g.as_mut() {
                // a rendered semantic entry lies in [0,1], so the slope
                // toward a one-hot target is fixed even at zero residual
                g.data_mut()[p * s + c] = if c == l { -1.0 } else { 1.0 };
            }
        }
    }
    Ok((total, g))
}

pub fn semantic_consistency_loss(splatted: &[Image<f64>], updated: &[LabelImage]) -> Result<f64> {
    if splatted.len() != updated.len() {
        return Err(Error::invalid(format!(
            "{} semantic renders for {} label images",
            splatted.len(),
            updated.len()
        )));
    }
    splatted
        .iter()
        .zip(updated)
        .map(|(s, u)| frame_consistency_loss(s, u, false).map(|(l, _)| l))
        .sum()
}

/// One line per cluster: id, size, canonical label, first and last frame.
pub fn cluster_report(result: &ClusterResult, graph: &ConsistencyGraph) -> String {
    let mut out = String::from("# cluster size label first_frame last_frame\n");
    for (id, m) in result.members.iter().enumerate() {
        let frames = m.iter().map(|&i| graph.nodes[i].frame_index);
        let lo = frames.clone().min().unwrap_or(0);
        let hi = frames.max().unwrap_or(0);
        let _ = writeln!(out, "{id} {} {} {lo} {hi}", m.len(), result.canonical_label[id]);
    }
    out
}
