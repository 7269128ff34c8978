//! Cut-point detection over segmented canes: octree voxelization, graph
//! construction with a configurable adjacency kernel, cycle removal by
//! minimum spanning tree with bud-edge preservation, root-based path
//! enumeration with prefix-similarity deduplication, spur-rule cut selection,
//! and full 6-DoF cut-pose computation.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cloud::{Point3, Vec3};
use crate::config::CutGraphConfig;
use crate::grid::{voxel_index, VoxelKey};

#[derive(Debug, Error)]
pub enum CutGraphError {
    #[error("cut pose needs two distinct bud positions")]
    CoincidentBuds,
    #[error("empty cane cloud")]
    EmptyCloud,
    #[error("adjacency kernel must be 6, 18, or 26, got {0}")]
    BadKernel(u8),
}

/// Undirected graph over octree centroids with distinguished bud vertices,
/// bud edges, and root vertices (cane-cordon intersections).
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct PruneGraph {
    pub vertices: Vec<Point3>,
    pub voxels: Vec<VoxelKey>,
    /// (u, v, weight) with u < v.
    pub edges: Vec<(u32, u32, f64)>,
    pub bud_vertices: BTreeSet<u32>,
    pub bud_edges: BTreeSet<(u32, u32)>,
    pub roots: Vec<u32>,
    /// Buds that could not be snapped to any vertex.
    pub orphan_buds: Vec<Point3>,
}

impl PruneGraph {
    pub fn adjacency(&self) -> Vec<Vec<u32>> {
        let mut adj = vec![Vec::new(); self.vertices.len()];
        for &(u, v, _) in &self.edges {
            adj[u as usize].push(v);
            adj[v as usize].push(u);
        }
        for list in &mut adj {
            list.sort_unstable();
        }
        adj
    }

    pub fn connected_components(&self) -> usize {
        let mut dsu = Dsu::new(self.vertices.len());
        for &(u, v, _) in &self.edges {
            dsu.union(u as usize, v as usize);
        }
        let mut roots = BTreeSet::new();
        for i in 0..self.vertices.len() {
            roots.insert(dsu.find(i));
        }
        roots.len()
    }

    pub fn total_weight(&self) -> f64 {
        self.edges.iter().map(|e| e.2).sum()
    }
}

/// Full 6-DoF pruning pose plus bookkeeping for metrics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CutPoint {
    pub position: Point3,
    /// Roll, pitch, yaw about the vine frame axes [rad], each in (-pi, pi].
    pub roll: f64,
    pub pitch: f64,
    pub yaw: f64,
    /// Segment/path the cut belongs to (pipeline-local id).
    pub cane_id: u32,
    /// The cut sits between ordered buds `bud_index` and `bud_index + 1`.
    pub bud_index: usize,
    /// Estimated cane diameter at the cut [mm].
    pub diameter_mm: f64,
}

/// One centroid per occupied octree leaf of the cane cloud.
pub fn voxelize_centroids(
    points: &[Point3],
    resolution: f64,
) -> Result<Vec<(VoxelKey, Point3)>, CutGraphError> {
    if points.is_empty() {
        return Err(CutGraphError::EmptyCloud);
    }
    let mut sums: BTreeMap<VoxelKey, (Vec3, usize)> = BTreeMap::new();
    for p in points {
        let e = sums.entry(voxel_index(p, resolution)).or_insert((Vec3::zeros(), 0));
        e.0 += p.coords;
        e.1 += 1;
    }
    Ok(sums
        .into_iter()
        .map(|(k, (s, n))| (k, Point3::from(s / n as f64)))
        .collect())
}

fn kernel_offsets(kernel: u8) -> Result<Vec<[i32; 3]>, CutGraphError> {
    let mut out = Vec::new();
    for dx in -1i32..=1 {
        for dy in -1i32..=1 {
            for dz in -1i32..=1 {
                let manhattan = dx.abs() + dy.abs() + dz.abs();
                if manhattan == 0 {
                    continue;
                }
                let keep = match kernel {
                    6 => manhattan == 1,
                    18 => manhattan <= 2,
                    26 => true,
                    other => return Err(CutGraphError::BadKernel(other)),
                };
                if keep {
                    out.push([dx, dy, dz]);
                }
            }
        }
    }
    Ok(out)
}

/// Builds the pruning graph: an edge joins centroids in kernel-adjacent
/// voxels; buds snap to their nearest vertex (dropped with a warning when
/// farther than one voxel diagonal); edges incident to bud vertices get the
/// smaller bud weight; roots snap to the nearest vertex.
pub fn build_graph(
    centroids: &[(VoxelKey, Point3)],
    buds: &[Point3],
    roots: &[Point3],
    cfg: &CutGraphConfig,
) -> Result<PruneGraph, CutGraphError> {
    let offsets = kernel_offsets(cfg.kernel)?;
    let mut g = PruneGraph::default();
    let mut by_voxel: HashMap<VoxelKey, u32> = HashMap::new();
    for (i, (k, c)) in centroids.iter().enumerate() {
        g.vertices.push(*c);
        g.voxels.push(*k);
        by_voxel.insert(*k, i as u32);
    }

    // Snap buds first so edge weights can be assigned in one pass.
    let max_snap = cfg.resolution * 3f64.sqrt();
    for bud in buds {
        let mut best: Option<(u32, f64)> = None;
        for (i, v) in g.vertices.iter().enumerate() {
            let d = (v - bud).norm();
            if best.map_or(true, |(_, bd)| d < bd) {
                best = Some((i as u32, d));
            }
        }
        match best {
            Some((i, d)) if d <= max_snap => {
                g.bud_vertices.insert(i);
            }
            _ => g.orphan_buds.push(*bud),
        }
    }

    for (i, key) in g.voxels.iter().enumerate() {
        for off in &offsets {
            let nk = [key[0] + off[0], key[1] + off[1], key[2] + off[2]];
            if let Some(&j) = by_voxel.get(&nk) {
                let (u, v) = if (i as u32) < j { (i as u32, j) } else { (j, i as u32) };
                if u == i as u32 {
                    // Each undirected edge is emitted once, from its lower endpoint.
                    let is_bud =
                        g.bud_vertices.contains(&u) || g.bud_vertices.contains(&v);
                    let w = if is_bud { cfg.w_bud } else { cfg.w_std };
                    g.edges.push((u, v, w));
                    if is_bud {
                        g.bud_edges.insert((u, v));
                    }
                }
            }
        }
    }
    g.edges.sort_unstable_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
    g.edges.dedup_by_key(|e| (e.0, e.1));

    for root in roots {
        let mut best: Option<(u32, f64)> = None;
        for (i, v) in g.vertices.iter().enumerate() {
            let d = (v - root).norm();
            if best.map_or(true, |(_, bd)| d < bd) {
                best = Some((i as u32, d));
            }
        }
        if let Some((i, _)) = best {
            if !g.roots.contains(&i) {
                g.roots.push(i);
            }
        }
    }
    Ok(g)
}

/// Minimum spanning forest by Kruskal with deterministic lexicographic
/// tie-breaks. Bud edges carry smaller weights, so they are examined first
/// and survive cycle removal.
pub fn min_span_tree(graph: &PruneGraph) -> PruneGraph {
    let mut edges = graph.edges.clone();
    edges.sort_by(|a, b| {
        a.2.partial_cmp(&b.2).unwrap().then_with(|| (a.0, a.1).cmp(&(b.0, b.1)))
    });
    let mut dsu = Dsu::new(graph.vertices.len());
    let mut kept = Vec::new();
    for e in edges {
        if dsu.union(e.0 as usize, e.1 as usize) {
            kept.push(e);
        }
    }
    kept.sort_unstable_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
    let kept_set: BTreeSet<(u32, u32)> = kept.iter().map(|e| (e.0, e.1)).collect();
    PruneGraph {
        vertices: graph.vertices.clone(),
        voxels: graph.voxels.clone(),
        edges: kept,
        bud_vertices: graph.bud_vertices.clone(),
        bud_edges: graph.bud_edges.iter().filter(|e| kept_set.contains(e)).copied().collect(),
        roots: graph.roots.clone(),
        orphan_buds: graph.orphan_buds.clone(),
    }
}

/// All root-to-leaf paths of the tree component containing `root`.
/// Returns an empty list when the root is isolated or has no leaves.
pub fn find_paths(tree: &PruneGraph, root: u32) -> Vec<Vec<u32>> {
    let adj = tree.adjacency();
    if (root as usize) >= adj.len() {
        return Vec::new();
    }
    let mut paths = Vec::new();
    let mut stack = vec![(root, u32::MAX, vec![root])];
    while let Some((v, parent, path)) = stack.pop() {
        let children: Vec<u32> =
            adj[v as usize].iter().copied().filter(|&c| c != parent).collect();
        if children.is_empty() {
            if path.len() > 1 || adj[v as usize].is_empty() {
                paths.push(path);
            }
            continue;
        }
        // Reverse so the lexicographically smallest child is explored first.
        for &c in children.iter().rev() {
            let mut next = path.clone();
            next.push(c);
            stack.push((c, v, next));
        }
    }
    paths.sort();
    paths
}

/// Longest-common-prefix similarity: |lcp| / max(|a|, |b|).
pub fn path_similarity(a: &[u32], b: &[u32]) -> f64 {
    let lcp = a.iter().zip(b.iter()).take_while(|(x, y)| x == y).count();
    lcp as f64 / a.len().max(b.len()).max(1) as f64
}

/// Drops redundant paths: whenever two paths are at least `threshold`
/// similar, only the longest survives (lexicographic order breaks ties).
pub fn dedupe_paths(paths: &[Vec<u32>], threshold: f64) -> Vec<Vec<u32>> {
    let mut order: Vec<&Vec<u32>> = paths.iter().collect();
    order.sort_by(|a, b| b.len().cmp(&a.len()).then_with(|| a.cmp(b)));
    let mut kept: Vec<Vec<u32>> = Vec::new();
    for p in order {
        if kept.iter().all(|k| path_similarity(k, p) < threshold) {
            kept.push(p.clone());
        }
    }
    kept.sort();
    kept
}

/// Spur-rule cut selection along deduplicated paths.
///
/// Bud vertices are ordered by discovery depth from the root; buds consumed
/// by an earlier path are not re-counted. A path with at least n+1 fresh buds
/// yields one cut at the midpoint of fresh buds n and n+1.
pub fn assign_cut_points(
    tree: &PruneGraph,
    unique_paths: &[Vec<u32>],
    rule_buds: usize,
    diameter_for: impl Fn(&Point3, &Point3) -> f64,
) -> Result<Vec<CutPoint>, CutGraphError> {
    let mut consumed: BTreeSet<u32> = BTreeSet::new();
    let mut cuts = Vec::new();
    for (path_id, path) in unique_paths.iter().enumerate() {
        let fresh: Vec<u32> = path
            .iter()
            .copied()
            .filter(|v| tree.bud_vertices.contains(v) && !consumed.contains(v))
            .collect();
        for &b in &fresh {
            consumed.insert(b);
        }
        if fresh.len() < rule_buds + 1 {
            continue;
        }
        let a = tree.vertices[fresh[rule_buds - 1] as usize];
        let b = tree.vertices[fresh[rule_buds] as usize];
        let (roll, pitch, yaw) = cut_pose(&a, &b)?;
        cuts.push(CutPoint {
            position: Point3::from((a.coords + b.coords) / 2.0),
            roll,
            pitch,
            yaw,
            cane_id: path_id as u32,
            bud_index: rule_buds,
            diameter_mm: diameter_for(&a, &b),
        });
    }
    Ok(cuts)
}

/// Plane-projection angles of the segment bud_n -> bud_n1.
///
/// For v = bud_n1 - bud_n: roll is the angle of v's YZ projection measured
/// from +Y, pitch the angle of the ZX projection from +Z, yaw the angle of
/// the XY projection from +X; all in (-pi, pi]. A projection shorter than
/// 1e-9 yields angle 0.
pub fn cut_pose(bud_n: &Point3, bud_n1: &Point3) -> Result<(f64, f64, f64), CutGraphError> {
    let v = bud_n1 - bud_n;
    if v.norm() < 1e-12 {
        return Err(CutGraphError::CoincidentBuds);
    }
    Ok((plane_angle(v.y, v.z), plane_angle(v.z, v.x), plane_angle(v.x, v.y)))
}

/// Reconstructs the unit direction encoded by [`cut_pose`] angles.
/// Exact inverse away from the degenerate-projection cases.
pub fn direction_from_angles(roll: f64, pitch: f64, yaw: f64) -> Vec3 {
    let (sg, cg) = yaw.sin_cos();
    let (sa, ca) = roll.sin_cos();
    let (sb, cb) = pitch.sin_cos();
    let v = if sg.abs() > 1e-9 {
        // y != 0, so cos(roll) != 0 and z = y * tan(roll)
        Vec3::new(cg, sg, sg * sa / ca)
    } else if cg.abs() > 1e-9 && sb.abs() > 1e-9 {
        // y == 0, x != 0: z from the ZX projection
        Vec3::new(cg, 0.0, cg * cb / sb)
    } else {
        Vec3::new(0.0, 0.0, if sa >= 0.0 { 1.0 } else { -1.0 })
    };
    v.normalize()
}

fn plane_angle(first: f64, second: f64) -> f64 {
    if (first * first + second * second).sqrt() < 1e-9 {
        return 0.0;
    }
    let a = second.atan2(first);
    // atan2 returns [-pi, pi]; fold -pi into +pi for the (-pi, pi] contract.
    if a <= -std::f64::consts::PI {
        std::f64::consts::PI
    } else {
        a
    }
}

/// Ground-truth interval a valid cut must land in: anywhere on the segment
/// between bud n and bud n+1 of a prunable cane, within `radius` of its axis.
#[derive(Debug, Clone)]
pub struct CutInterval {
    pub start: Point3,
    pub end: Point3,
    pub cane_id: u32,
}

impl CutInterval {
    pub fn contains(&self, p: &Point3, radius: f64) -> bool {
        let axis = self.end - self.start;
        let len2 = axis.norm_squared();
        if len2 < 1e-18 {
            return (p - self.start).norm() <= radius;
        }
        let t = (p - self.start).dot(&axis) / len2;
        if !(0.0..=1.0).contains(&t) {
            return false;
        }
        let closest = self.start + axis * t;
        (p - closest).norm() <= radius
    }
}

/// Fraction of ground-truth prunable canes whose predicted cut lies inside
/// the valid interval of the correct cane.
pub fn cutpoint_accuracy(predicted: &[CutPoint], intervals: &[CutInterval], radius: f64) -> f64 {
    if intervals.is_empty() {
        return 0.0;
    }
    let hit = intervals
        .iter()
        .filter(|iv| predicted.iter().any(|c| iv.contains(&c.position, radius)))
        .count();
    hit as f64 / intervals.len() as f64
}

struct Dsu {
    parent: Vec<usize>,
}

impl Dsu {
    fn new(n: usize) -> Self {
        Self { parent: (0..n).collect() }
    }
    fn find(&mut self, x: usize) -> usize {
        if self.parent[x] != x {
            let r = self.find(self.parent[x]);
            self.parent[x] = r;
        }
        self.parent[x]
    }
    fn union(&mut self, a: usize, b: usize) -> bool {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            false
        } else {
            self.parent[ra] = rb;
            true
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, PI};

    fn cfg() -> CutGraphConfig {
        CutGraphConfig::default()
    }

    #[test]
    fn voxelize_single_voxel_mean() {
        let pts = vec![Point3::new(0.01, 0.01, 0.01), Point3::new(0.03, 0.03, 0.03)];
        let cents = voxelize_centroids(&pts, 0.05).unwrap();
        assert_eq!(cents.len(), 1);
        assert_relative_eq!(cents[0].1.x, 0.02);
    }

    #[test]
    fn voxelize_straight_cane_count() {
        let pts: Vec<Point3> =
            (0..1000).map(|i| Point3::new(i as f64 * 0.001, 0.0, 0.0)).collect();
        let cents = voxelize_centroids(&pts, 0.05).unwrap();
        assert!((20..=21).contains(&cents.len()), "got {}", cents.len());
    }

    #[test]
    fn build_graph_adjacent_voxels_edge() {
        let cents = vec![
            ([0, 0, 0], Point3::new(0.02, 0.02, 0.02)),
            ([1, 0, 0], Point3::new(0.07, 0.02, 0.02)),
        ];
        let g = build_graph(&cents, &[], &[], &cfg()).unwrap();
        assert_eq!(g.edges.len(), 1);
    }

    #[test]
    fn build_graph_isolated_vertex_degree_zero() {
        let cents = vec![
            ([0, 0, 0], Point3::new(0.02, 0.02, 0.02)),
            ([5, 5, 5], Point3::new(0.27, 0.27, 0.27)),
        ];
        let g = build_graph(&cents, &[], &[], &cfg()).unwrap();
        assert!(g.edges.is_empty());
        assert_eq!(g.connected_components(), 2);
    }

    #[test]
    fn build_graph_orphan_bud_dropped_with_warning() {
        let cents = vec![([0, 0, 0], Point3::new(0.02, 0.02, 0.02))];
        let g = build_graph(&cents, &[Point3::new(5.0, 5.0, 5.0)], &[], &cfg()).unwrap();
        assert!(g.bud_vertices.is_empty());
        assert_eq!(g.orphan_buds.len(), 1);
    }

    #[test]
    fn mst_keeps_bud_edge_in_cycle() {
        // 4-cycle 0-1-2-3-0; bud at vertex 0 makes edges (0,1) and (0,3) light.
        let mut g = PruneGraph {
            vertices: (0..4)
                .map(|i| Point3::new(i as f64 * 0.05, 0.0, 0.0))
                .collect(),
            voxels: vec![[0, 0, 0], [1, 0, 0], [2, 0, 0], [3, 0, 0]],
            edges: vec![(0, 1, 0.1), (1, 2, 1.0), (2, 3, 1.0), (0, 3, 0.1)],
            bud_vertices: BTreeSet::from([0]),
            bud_edges: BTreeSet::from([(0, 1), (0, 3)]),
            roots: vec![],
            orphan_buds: vec![],
        };
        g.edges.sort_unstable_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        let mst = min_span_tree(&g);
        assert_eq!(mst.edges.len(), 3);
        assert!(mst.bud_edges.contains(&(0, 1)));
        assert!(mst.bud_edges.contains(&(0, 3)));
    }

    #[test]
    fn mst_tree_input_unchanged() {
        let g = PruneGraph {
            vertices: (0..3).map(|i| Point3::new(i as f64, 0.0, 0.0)).collect(),
            voxels: vec![[0, 0, 0], [1, 0, 0], [2, 0, 0]],
            edges: vec![(0, 1, 1.0), (1, 2, 1.0)],
            ..Default::default()
        };
        let mst = min_span_tree(&g);
        assert_eq!(mst.edges, g.edges);
    }

    #[test]
    fn find_paths_line_and_y() {
        // Path graph 0-1-2.
        let line = PruneGraph {
            vertices: (0..3).map(|i| Point3::new(i as f64, 0.0, 0.0)).collect(),
            voxels: vec![[0, 0, 0], [1, 0, 0], [2, 0, 0]],
            edges: vec![(0, 1, 1.0), (1, 2, 1.0)],
            ..Default::default()
        };
        let paths = find_paths(&line, 0);
        assert_eq!(paths, vec![vec![0, 1, 2]]);

        // Y: 0-1, 1-2, 1-3.
        let y = PruneGraph {
            vertices: (0..4).map(|i| Point3::new(i as f64, 0.0, 0.0)).collect(),
            voxels: vec![[0, 0, 0], [1, 0, 0], [2, 0, 0], [3, 0, 0]],
            edges: vec![(0, 1, 1.0), (1, 2, 1.0), (1, 3, 1.0)],
            ..Default::default()
        };
        let paths = find_paths(&y, 0);
        assert_eq!(paths, vec![vec![0, 1, 2], vec![0, 1, 3]]);
    }

    #[test]
    fn dedupe_merges_at_exact_threshold() {
        // 10-vertex paths sharing a 9-vertex prefix: similarity exactly 0.9.
        let a: Vec<u32> = (0..10).collect();
        let mut b = a.clone();
        b[9] = 99;
        assert_relative_eq!(path_similarity(&a, &b), 0.9);
        let unique = dedupe_paths(&[a.clone(), b], 0.9);
        assert_eq!(unique.len(), 1);

        // 50% shared prefix: both kept.
        let c: Vec<u32> = vec![0, 1, 2, 3];
        let d: Vec<u32> = vec![0, 1, 7, 8];
        let unique = dedupe_paths(&[c, d], 0.9);
        assert_eq!(unique.len(), 2);
    }

    #[test]
    fn dedupe_identical_paths_single_survivor() {
        let p: Vec<u32> = vec![0, 1, 2];
        assert_eq!(dedupe_paths(&[p.clone(), p.clone(), p], 0.9).len(), 1);
    }

    fn chain_graph(n: usize, buds: &[u32]) -> PruneGraph {
        PruneGraph {
            vertices: (0..n).map(|i| Point3::new(i as f64 * 0.05, 0.0, 0.0)).collect(),
            voxels: (0..n).map(|i| [i as i32, 0, 0]).collect(),
            edges: (0..n - 1).map(|i| (i as u32, i as u32 + 1, 1.0)).collect(),
            bud_vertices: buds.iter().copied().collect(),
            roots: vec![0],
            ..Default::default()
        }
    }

    #[test]
    fn spur_rule_cut_between_bud_4_and_5() {
        // Buds at vertices 1..=7 along a chain; n = 4 cuts between vertex 4 and 5.
        let g = chain_graph(9, &[1, 2, 3, 4, 5, 6, 7]);
        let paths = find_paths(&g, 0);
        let cuts = assign_cut_points(&g, &paths, 4, |_, _| 8.0).unwrap();
        assert_eq!(cuts.len(), 1);
        assert_relative_eq!(cuts[0].position.x, (0.20 + 0.25) / 2.0);
    }

    #[test]
    fn spur_rule_no_cut_with_three_buds() {
        let g = chain_graph(5, &[1, 2, 3]);
        let paths = find_paths(&g, 0);
        let cuts = assign_cut_points(&g, &paths, 4, |_, _| 8.0).unwrap();
        assert!(cuts.is_empty());
    }

    #[test]
    fn y_cane_two_cuts_stem_buds_counted_once() {
        // Stem 0-1-2 with buds at 1,2; branch A: 3..7, branch B: 8..12, buds on all.
        let mut vertices: Vec<Point3> =
            (0..13).map(|i| Point3::new(i as f64 * 0.05, 0.0, 0.0)).collect();
        // offset branch B so positions differ
        for v in vertices.iter_mut().skip(8) {
            v.y = 0.05;
        }
        let edges = vec![
            (0, 1, 1.0),
            (1, 2, 1.0),
            (2, 3, 1.0),
            (3, 4, 1.0),
            (4, 5, 1.0),
            (5, 6, 1.0),
            (6, 7, 1.0),
            (2, 8, 1.0),
            (8, 9, 1.0),
            (9, 10, 1.0),
            (10, 11, 1.0),
            (11, 12, 1.0),
        ];
        let g = PruneGraph {
            vertices,
            voxels: (0..13).map(|i| [i as i32, 0, 0]).collect(),
            edges,
            bud_vertices: BTreeSet::from([1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12]),
            roots: vec![0],
            ..Default::default()
        };
        let paths = find_paths(&g, 0);
        assert_eq!(paths.len(), 2);
        let unique = dedupe_paths(&paths, 0.9);
        assert_eq!(unique.len(), 2);
        let cuts = assign_cut_points(&g, &unique, 4, |_, _| 8.0).unwrap();
        // First path consumes stem buds 1,2 and cuts between its fresh buds
        // 4 and 5 (vertices 4,5); second path has 5 fresh buds (8..12) and
        // cuts between vertices 11 and 12.
        assert_eq!(cuts.len(), 2);
        assert_relative_eq!(cuts[0].position.x, (0.20 + 0.25) / 2.0);
        assert_relative_eq!(cuts[1].position.x, (0.55 + 0.60) / 2.0);
    }

    #[test]
    fn cut_pose_axis_aligned() {
        let (roll, pitch, yaw) =
            cut_pose(&Point3::origin(), &Point3::new(1.0, 0.0, 0.0)).unwrap();
        assert_relative_eq!(roll, 0.0); // degenerate YZ projection
        assert_relative_eq!(pitch, FRAC_PI_2); // ZX projection along +X
        assert_relative_eq!(yaw, 0.0);
    }

    #[test]
    fn cut_pose_diagonal_yaw() {
        let (_, _, yaw) = cut_pose(&Point3::origin(), &Point3::new(1.0, 1.0, 0.0)).unwrap();
        assert_relative_eq!(yaw, FRAC_PI_4);
    }

    #[test]
    fn cut_pose_coincident_rejected() {
        assert!(matches!(
            cut_pose(&Point3::origin(), &Point3::origin()),
            Err(CutGraphError::CoincidentBuds)
        ));
    }

    #[test]
    fn cut_pose_recomposition_oracle() {
        // Random non-degenerate directions: reconstructing from the three
        // plane angles reproduces the direction to 1e-9.
        use rand::Rng;
        let mut rng = crate::rng::derive(17, &[0xC7]);
        let mut checked = 0;
        while checked < 300 {
            let v = crate::cloud::Vec3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            );
            if v.norm() < 0.1
                || v.x.abs() < 1e-3
                || v.y.abs() < 1e-3
                || v.z.abs() < 1e-3
            {
                continue;
            }
            checked += 1;
            let a = Point3::new(0.3, -0.2, 1.7);
            let b = Point3::from(a.coords + v);
            let (roll, pitch, yaw) = cut_pose(&a, &b).unwrap();
            let rebuilt = direction_from_angles(roll, pitch, yaw);
            assert!(
                (rebuilt - v.normalize()).norm() < 1e-9,
                "direction {v:?} rebuilt as {rebuilt:?}"
            );
        }
    }

    #[test]
    fn cut_pose_angles_in_half_open_range() {
        let (roll, pitch, yaw) =
            cut_pose(&Point3::origin(), &Point3::new(-1.0, 0.0, 0.0)).unwrap();
        for a in [roll, pitch, yaw] {
            assert!(a > -PI && a <= PI, "angle {a} outside (-pi, pi]");
        }
        assert_relative_eq!(yaw, PI); // -X projects to angle pi from +X
    }

    #[test]
    fn accuracy_counts_only_correct_interval() {
        let iv = CutInterval {
            start: Point3::new(0.20, 0.0, 0.0),
            end: Point3::new(0.25, 0.0, 0.0),
            cane_id: 0,
        };
        let good = CutPoint {
            position: Point3::new(0.225, 0.0, 0.0),
            roll: 0.0,
            pitch: 0.0,
            yaw: 0.0,
            cane_id: 0,
            bud_index: 4,
            diameter_mm: 8.0,
        };
        let mut wrong = good.clone();
        wrong.position = Point3::new(0.15, 0.0, 0.0); // between buds 3 and 4
        assert_relative_eq!(cutpoint_accuracy(&[good], &[iv.clone()], 0.02), 1.0);
        assert_relative_eq!(cutpoint_accuracy(&[wrong], &[iv], 0.02), 0.0);
    }
}
