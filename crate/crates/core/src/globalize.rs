//! View graph, yaw rotation averaging, metric translation averaging and
//! registration of the largest connected component.
//!
//! Edge `(i, j)` with `i < j` carries a relative pose mapping frame-i
//! rectified camera coordinates to frame-j coordinates. With global poses
//! `world_from_i = (R_vert(φ_i), c_i)` this gives `φ_i = φ_j + yaw_ij` and
//! `c_i − c_j = R_vert(φ_j)·t_ij`.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{rot_vertical, wrap_angle, SE3Pose, Vec3};
use crate::matchcore::{CornerMatch, FrameId, ObjectMatch};
use crate::twoview::RelativePoseEstimate;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GlobalizeError {
    #[error("view graph has no edges")]
    EmptyGraph,
    #[error("duplicate edge ({0}, {1})")]
    DuplicateEdge(FrameId, FrameId),
    #[error("self edge on frame {0}")]
    SelfEdge(FrameId),
    #[error("no yaw for frame {0}")]
    MissingYaw(FrameId),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AveragingConfig {
    pub rotation_rounds: usize,
    pub rotation_threshold_deg: f64,
    pub translation_rounds: usize,
    pub translation_threshold_m: f64,
    /// Cauchy-weighted solves (scale = the round's outlier threshold)
    /// seeded from a cycle-consistent spanning tree; plain least squares
    /// from a breadth-first tree when off.
    pub robust: bool,
    pub cg_tolerance: f64,
    pub max_relinearizations: usize,
}

impl Default for AveragingConfig {
    fn default() -> Self {
        Self {
            rotation_rounds: 3,
            rotation_threshold_deg: 3.0,
            translation_rounds: 3,
            translation_threshold_m: 0.10,
            robust: true,
            cg_tolerance: 1e-10,
            max_relinearizations: 100,
        }
    }
}

impl RelativePoseEstimate {
    /// The same estimate seen from frame b.
    pub fn inverted(&self) -> Self {
        Self {
            pose: self.pose.inverse(),
            inlier_object_matches: self
                .inlier_object_matches
                .iter()
                .map(|m| ObjectMatch {
                    index_a: m.index_b,
                    index_b: m.index_a,
                    score: m.score,
                })
                .collect(),
            inlier_corner_matches: self
                .inlier_corner_matches
                .iter()
                .map(|c| CornerMatch {
                    corner_a: c.corner_b,
                    corner_b: c.corner_a,
                    ..*c
                })
                .collect(),
            mean_matching_error: self.mean_matching_error,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ViewGraph {
    pub nodes: BTreeSet<FrameId>,
    pub edges: BTreeMap<(FrameId, FrameId), RelativePoseEstimate>,
}

impl ViewGraph {
    pub fn neighbors(&self) -> BTreeMap<FrameId, Vec<FrameId>> {
        let mut adj: BTreeMap<FrameId, Vec<FrameId>> =
            self.nodes.iter().map(|&n| (n, Vec::new())).collect();
        for &(i, j) in self.edges.keys() {
            adj.entry(i).or_default().push(j);
            adj.entry(j).or_default().push(i);
        }
        adj
    }

    /// Connected components over nodes with at least one edge, each sorted,
    /// ordered by size (descending) then smallest frame id.
    pub fn components(&self) -> Vec<Vec<FrameId>> {
        let adj = self.neighbors();
        let mut seen = BTreeSet::new();
        let mut comps = Vec::new();
        for (&start, nbrs) in &adj {
            if nbrs.is_empty() || seen.contains(&start) {
                continue;
            }
            let mut comp = vec![start];
            seen.insert(start);
            let mut queue = VecDeque::from([start]);
            while let Some(u) = queue.pop_front() {
                for &v in &adj[&u] {
                    if seen.insert(v) {
                        comp.push(v);
                        queue.push_back(v);
                    }
                }
            }
            comp.sort_unstable();
            comps.push(comp);
        }
        comps.sort_by(|a, b| b.len().cmp(&a.len()).then(a[0].cmp(&b[0])));
        comps
    }

    fn retain_edges(&mut self, keep: impl Fn(&(FrameId, FrameId)) -> bool) -> usize {
        let before = self.edges.len();
        self.edges.retain(|k, _| keep(k));
        before - self.edges.len()
    }
}

/// Builds the graph from per-pair results; absent estimates only add nodes.
pub fn build_view_graph(
    pair_estimates: Vec<((FrameId, FrameId), Option<RelativePoseEstimate>)>,
) -> Result<ViewGraph, GlobalizeError> {
    let mut graph = ViewGraph::default();
    let mut seen = BTreeSet::new();
    for ((a, b), est) in pair_estimates {
        if a == b {
            return Err(GlobalizeError::SelfEdge(a));
        }
        let key = (a.min(b), a.max(b));
        if !seen.insert(key) {
            return Err(GlobalizeError::DuplicateEdge(key.0, key.1));
        }
        graph.nodes.insert(a);
        graph.nodes.insert(b);
        if let Some(e) = est {
            let e = if a < b { e } else { e.inverted() };
            graph.edges.insert(key, e);
        }
    }
    Ok(graph)
}

/// Weighted graph Laplacian restricted to one component, anchored at one node.
struct AnchoredSystem {
    index: BTreeMap<FrameId, usize>,
    anchor: FrameId,
    /// (u, v, weight) with local indices; the anchor maps to `usize::MAX`.
    edges: Vec<(usize, usize, f64)>,
    n: usize,
}

impl AnchoredSystem {
    fn new(comp: &[FrameId], anchor: FrameId) -> Self {
        let index: BTreeMap<FrameId, usize> = comp
            .iter()
            .filter(|&&f| f != anchor)
            .enumerate()
            .map(|(k, &f)| (f, k))
            .collect();
        let n = index.len();
        Self {
            index,
            anchor,
            edges: Vec::new(),
            n,
        }
    }

    fn local(&self, f: FrameId) -> usize {
        if f == self.anchor {
            usize::MAX
        } else {
            self.index[&f]
        }
    }

    fn matvec(&self, x: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        for &(u, v, w) in &self.edges {
            let xu = if u == usize::MAX { 0.0 } else { x[u] };
            let xv = if v == usize::MAX { 0.0 } else { x[v] };
            let d = w * (xu - xv);
            if u != usize::MAX {
                out[u] += d;
            }
            if v != usize::MAX {
                out[v] -= d;
            }
        }
    }

    /// Jacobi-preconditioned conjugate gradient on `L x = b`.
    fn solve(&self, b: &[f64], tol: f64) -> Vec<f64> {
        let n = self.n;
        let mut x = vec![0.0; n];
        let bnorm = b.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n == 0 || bnorm == 0.0 {
            return x;
        }
        let mut diag = vec![0.0; n];
        for &(u, v, w) in &self.edges {
            if u != usize::MAX {
                diag[u] += w;
            }
            if v != usize::MAX {
                diag[v] += w;
            }
        }
        let precond = |r: &[f64]| -> Vec<f64> {
            r.iter()
                .zip(&diag)
                .map(|(r, d)| if *d > 0.0 { r / d } else { *r })
                .collect()
        };
        let mut r = b.to_vec();
        let mut z = precond(&r);
        let mut p = z.clone();
        let mut rz: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
        let mut ap = vec![0.0; n];
        for _ in 0..(10 * n + 100) {
            self.matvec(&p, &mut ap);
            let pap: f64 = p.iter().zip(&ap).map(|(a, b)| a * b).sum();
            if pap <= 0.0 {
                break;
            }
            let alpha = rz / pap;
            for k in 0..n {
                x[k] += alpha * p[k];
                r[k] -= alpha * ap[k];
            }
            if r.iter().map(|v| v * v).sum::<f64>().sqrt() <= tol * bnorm {
                break;
            }
            z = precond(&r);
            let rz_new: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
            let beta = rz_new / rz;
            rz = rz_new;
            for k in 0..n {
                p[k] = z[k] + beta * p[k];
            }
        }
        x
    }
}

fn max_degree_node(comp: &[FrameId], adj: &BTreeMap<FrameId, Vec<FrameId>>) -> FrameId {
    let mut best = comp[0];
    for &f in comp {
        if adj[&f].len() > adj[&best].len() {
            best = f;
        }
    }
    best
}

/// Spanning tree of a component as parent links from `root`. Edges with more
/// consistent triangles are preferred; with all supports equal this is the
/// breadth-first tree.
fn spanning_tree(
    comp: &[FrameId],
    root: FrameId,
    adj: &BTreeMap<FrameId, Vec<FrameId>>,
    support: &BTreeMap<(FrameId, FrameId), usize>,
) -> Vec<(FrameId, FrameId)> {
    // Prim's algorithm keyed on (support desc, discovery order asc)
    let mut in_tree = BTreeSet::from([root]);
    let mut order = Vec::with_capacity(comp.len());
    let mut frontier: BTreeSet<(std::cmp::Reverse<usize>, u64, FrameId, FrameId)> = BTreeSet::new();
    let mut counter = 0u64;
    let mut push = |frontier: &mut BTreeSet<_>, u: FrameId, in_tree: &BTreeSet<FrameId>| {
        for &v in &adj[&u] {
            if !in_tree.contains(&v) {
                let s = support.get(&(u.min(v), u.max(v))).copied().unwrap_or(0);
                frontier.insert((std::cmp::Reverse(s), counter, u, v));
                counter += 1;
            }
        }
    };
    push(&mut frontier, root, &in_tree);
    while let Some(item) = frontier.pop_first() {
        let (_, _, u, v) = item;
        if !in_tree.insert(v) {
            continue;
        }
        order.push((u, v));
        push(&mut frontier, v, &in_tree);
    }
    order
}

fn cauchy_weight(r: f64, scale: f64) -> f64 {
    let q = r / scale;
    1.0 / (1.0 + q * q)
}

/// Yaw residual `wrap(φ_i − φ_j − yaw_ij)` of an edge.
pub fn rotation_residual(yaws: &BTreeMap<FrameId, f64>, key: (FrameId, FrameId), e: &RelativePoseEstimate) -> f64 {
    wrap_angle(yaws[&key.0] - yaws[&key.1] - e.pose.yaw)
}

/// Translation residual `‖c_i − c_j − R_vert(φ_j)·t_ij‖` of an edge.
pub fn translation_residual(
    yaws: &BTreeMap<FrameId, f64>,
    centers: &BTreeMap<FrameId, Vec3>,
    key: (FrameId, FrameId),
    e: &RelativePoseEstimate,
) -> f64 {
    (centers[&key.0] - centers[&key.1] - rot_vertical(yaws[&key.1]) * e.pose.t).norm()
}

fn rotation_support(graph: &ViewGraph, tol: f64) -> BTreeMap<(FrameId, FrameId), usize> {
    let adj = graph.neighbors();
    let directed = |u: FrameId, v: FrameId| -> Option<f64> {
        if u < v {
            graph.edges.get(&(u, v)).map(|e| e.pose.yaw)
        } else {
            graph.edges.get(&(v, u)).map(|e| -e.pose.yaw)
        }
    };
    let mut support = BTreeMap::new();
    for &(i, j) in graph.edges.keys() {
        let nj: BTreeSet<FrameId> = adj[&j].iter().copied().collect();
        let count = adj[&i]
            .iter()
            .filter(|k| nj.contains(k))
            .filter(|&&k| {
                let closure = directed(i, j).unwrap() + directed(j, k).unwrap() + directed(k, i).unwrap();
                wrap_angle(closure).abs() < tol
            })
            .count();
        support.insert((i, j), count);
    }
    support
}

/// Least-squares yaws for every component, one node per component at 0.
fn solve_yaws(graph: &ViewGraph, cfg: &AveragingConfig) -> BTreeMap<FrameId, f64> {
    let threshold = cfg.rotation_threshold_deg.to_radians();
    let adj = graph.neighbors();
    let support = if cfg.robust {
        rotation_support(graph, 2.0 * threshold)
    } else {
        BTreeMap::new()
    };
    let mut yaws: BTreeMap<FrameId, f64> = graph.nodes.iter().map(|&n| (n, 0.0)).collect();
    for comp in graph.components() {
        let root = max_degree_node(&comp, &adj);
        for (u, v) in spanning_tree(&comp, root, &adj, &support) {
            // φ_u = φ_v + yaw_uv
            let yaw_uv = if u < v {
                graph.edges[&(u, v)].pose.yaw
            } else {
                -graph.edges[&(v, u)].pose.yaw
            };
            let phi = wrap_angle(yaws[&u] - yaw_uv);
            yaws.insert(v, phi);
        }
        let comp_set: BTreeSet<FrameId> = comp.iter().copied().collect();
        let comp_edges: Vec<(&(FrameId, FrameId), &RelativePoseEstimate)> = graph
            .edges
            .iter()
            .filter(|(k, _)| comp_set.contains(&k.0))
            .collect();
        let mut system = AnchoredSystem::new(&comp, root);
        for _ in 0..cfg.max_relinearizations {
            let residuals: Vec<f64> = comp_edges.iter().map(|(k, e)| rotation_residual(&yaws, **k, e)).collect();
            system.edges = comp_edges
                .iter()
                .zip(&residuals)
                .map(|((k, _), r)| {
                    let w = if cfg.robust { cauchy_weight(*r, threshold) } else { 1.0 };
                    (system.local(k.0), system.local(k.1), w)
                })
                .collect();
            let mut b = vec![0.0; system.n];
            for (&(u, v, w), r) in system.edges.iter().zip(&residuals) {
                if u != usize::MAX {
                    b[u] -= w * r;
                }
                if v != usize::MAX {
                    b[v] += w * r;
                }
            }
            let delta = system.solve(&b, cfg.cg_tolerance);
            let mut max_step: f64 = 0.0;
            for (&f, &k) in &system.index {
                let y = yaws.get_mut(&f).unwrap();
                *y = wrap_angle(*y + delta[k]);
                max_step = max_step.max(delta[k].abs());
            }
            if max_step < 1e-13 {
                break;
            }
        }
    }
    yaws
}

/// Iterated yaw averaging with outlier-edge removal. Returns the yaws of the
/// last solve and the filtered graph; every surviving edge is within the
/// threshold of those yaws.
pub fn rotation_averaging(
    graph: &ViewGraph,
    cfg: &AveragingConfig,
) -> Result<(BTreeMap<FrameId, f64>, ViewGraph), GlobalizeError> {
    if graph.edges.is_empty() {
        return Err(GlobalizeError::EmptyGraph);
    }
    let threshold = cfg.rotation_threshold_deg.to_radians();
    let mut g = graph.clone();
    let mut yaws = BTreeMap::new();
    for _ in 0..cfg.rotation_rounds {
        yaws = solve_yaws(&g, cfg);
        let bad: BTreeSet<(FrameId, FrameId)> = g
            .edges
            .iter()
            .filter(|(k, e)| rotation_residual(&yaws, **k, e).abs() > threshold)
            .map(|(k, _)| *k)
            .collect();
        if g.retain_edges(|k| !bad.contains(k)) == 0 {
            break;
        }
    }
    Ok((yaws, g))
}

fn translation_support(
    graph: &ViewGraph,
    yaws: &BTreeMap<FrameId, f64>,
    tol: f64,
) -> BTreeMap<(FrameId, FrameId), usize> {
    let adj = graph.neighbors();
    // c_u − c_v
    let directed = |u: FrameId, v: FrameId| -> Vec3 {
        if u < v {
            rot_vertical(yaws[&v]) * graph.edges[&(u, v)].pose.t
        } else {
            -(rot_vertical(yaws[&u]) * graph.edges[&(v, u)].pose.t)
        }
    };
    let mut support = BTreeMap::new();
    for &(i, j) in graph.edges.keys() {
        let nj: BTreeSet<FrameId> = adj[&j].iter().copied().collect();
        let count = adj[&i]
            .iter()
            .filter(|k| nj.contains(k))
            .filter(|&&k| (directed(i, j) + directed(j, k) + directed(k, i)).norm() < tol)
            .count();
        support.insert((i, j), count);
    }
    support
}

fn solve_centers(
    graph: &ViewGraph,
    yaws: &BTreeMap<FrameId, f64>,
    cfg: &AveragingConfig,
) -> BTreeMap<FrameId, Vec3> {
    let threshold = cfg.translation_threshold_m;
    let adj = graph.neighbors();
    let support = if cfg.robust {
        translation_support(graph, yaws, 2.0 * threshold)
    } else {
        BTreeMap::new()
    };
    let mut centers: BTreeMap<FrameId, Vec3> = graph.nodes.iter().map(|&n| (n, Vec3::zeros())).collect();
    for comp in graph.components() {
        let root = max_degree_node(&comp, &adj);
        for (u, v) in spanning_tree(&comp, root, &adj, &support) {
            // c_v = c_u − (c_u − c_v)
            let d_uv = if u < v {
                rot_vertical(yaws[&v]) * graph.edges[&(u, v)].pose.t
            } else {
                -(rot_vertical(yaws[&u]) * graph.edges[&(v, u)].pose.t)
            };
            let c = centers[&u] - d_uv;
            centers.insert(v, c);
        }
        let comp_set: BTreeSet<FrameId> = comp.iter().copied().collect();
        let comp_edges: Vec<((FrameId, FrameId), Vec3)> = graph
            .edges
            .iter()
            .filter(|(k, _)| comp_set.contains(&k.0))
            .map(|(k, e)| (*k, rot_vertical(yaws[&k.1]) * e.pose.t))
            .collect();
        let mut system = AnchoredSystem::new(&comp, root);
        let iterations = if cfg.robust { cfg.max_relinearizations } else { 2 };
        for _ in 0..iterations {
            let residuals: Vec<Vec3> = comp_edges
                .iter()
                .map(|(k, d)| centers[&k.0] - centers[&k.1] - d)
                .collect();
            system.edges = comp_edges
                .iter()
                .zip(&residuals)
                .map(|((k, _), r)| {
                    let w = if cfg.robust { cauchy_weight(r.norm(), threshold) } else { 1.0 };
                    (system.local(k.0), system.local(k.1), w)
                })
                .collect();
            let mut max_step: f64 = 0.0;
            let mut deltas = Vec::with_capacity(3);
            for axis in 0..3 {
                let mut b = vec![0.0; system.n];
                for (&(u, v, w), r) in system.edges.iter().zip(&residuals) {
                    if u != usize::MAX {
                        b[u] -= w * r[axis];
                    }
                    if v != usize::MAX {
                        b[v] += w * r[axis];
                    }
                }
                deltas.push(system.solve(&b, cfg.cg_tolerance));
            }
            for (&f, &k) in &system.index {
                let step = Vec3::new(deltas[0][k], deltas[1][k], deltas[2][k]);
                *centers.get_mut(&f).unwrap() += step;
                max_step = max_step.max(step.norm());
            }
            if max_step < 1e-13 {
                break;
            }
        }
    }
    centers
}

/// Iterated fixed-scale center averaging with outlier-edge removal.
pub fn translation_averaging(
    graph: &ViewGraph,
    yaws: &BTreeMap<FrameId, f64>,
    cfg: &AveragingConfig,
) -> Result<(BTreeMap<FrameId, Vec3>, ViewGraph), GlobalizeError> {
    if graph.edges.is_empty() {
        return Err(GlobalizeError::EmptyGraph);
    }
    if let Some(&missing) = graph.nodes.iter().find(|n| !yaws.contains_key(n)) {
        return Err(GlobalizeError::MissingYaw(missing));
    }
    let mut g = graph.clone();
    let mut centers = BTreeMap::new();
    for _ in 0..cfg.translation_rounds {
        centers = solve_centers(&g, yaws, cfg);
        let bad: BTreeSet<(FrameId, FrameId)> = g
            .edges
            .iter()
            .filter(|(k, e)| translation_residual(yaws, &centers, **k, e) > cfg.translation_threshold_m)
            .map(|(k, _)| *k)
            .collect();
        if g.retain_edges(|k| !bad.contains(k)) == 0 {
            break;
        }
    }
    Ok((centers, g))
}

/// Global pose of one frame: yaw and center of the rectified camera, plus the
/// rotation taking raw camera coordinates to rectified ones.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FramePose {
    pub yaw: f64,
    pub center: Vec3,
    pub rectification: Matrix3<f64>,
}

impl FramePose {
    pub fn world_from_rectified(&self) -> SE3Pose {
        SE3Pose::new(rot_vertical(self.yaw), self.center)
    }

    pub fn world_from_camera(&self) -> SE3Pose {
        SE3Pose::new(rot_vertical(self.yaw) * self.rectification, self.center)
    }
}

/// Poses of the registered frames.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GlobalPoses {
    pub poses: BTreeMap<FrameId, FramePose>,
}

impl GlobalPoses {
    pub fn registered(&self) -> impl Iterator<Item = FrameId> + '_ {
        self.poses.keys().copied()
    }

    pub fn is_registered(&self, f: FrameId) -> bool {
        self.poses.contains_key(&f)
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    pub fn world_from_rectified(&self, f: FrameId) -> Option<SE3Pose> {
        self.poses.get(&f).map(FramePose::world_from_rectified)
    }

    pub fn world_from_camera(&self, f: FrameId) -> Option<SE3Pose> {
        self.poses.get(&f).map(FramePose::world_from_camera)
    }
}

/// Registers the largest connected component (ties: smallest frame id).
pub fn register(
    graph: &ViewGraph,
    yaws: &BTreeMap<FrameId, f64>,
    centers: &BTreeMap<FrameId, Vec3>,
    rectifications: &BTreeMap<FrameId, Matrix3<f64>>,
) -> GlobalPoses {
    let Some(largest) = graph.components().into_iter().next() else {
        return GlobalPoses::default();
    };
    let poses = largest
        .into_iter()
        .map(|f| {
            (
                f,
                FramePose {
                    yaw: yaws[&f],
                    center: centers[&f],
                    rectification: rectifications.get(&f).copied().unwrap_or_else(Matrix3::identity),
                },
            )
        })
        .collect();
    GlobalPoses { poses }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::YawPose;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn estimate(pose: YawPose) -> RelativePoseEstimate {
        RelativePoseEstimate {
            pose,
            inlier_object_matches: vec![ObjectMatch { index_a: 0, index_b: 1, score: 0.9 }],
            inlier_corner_matches: vec![],
            mean_matching_error: 0.0,
        }
    }

    /// Relative pose i→j from world poses.
    fn relative(wi: &YawPose, wj: &YawPose) -> YawPose {
        wj.inverse().compose(wi)
    }

    fn random_world(rng: &mut ChaCha8Rng, n: usize) -> Vec<YawPose> {
        (0..n)
            .map(|_| {
                YawPose::new(
                    rng.random_range(-3.1..3.1),
                    Vec3::new(rng.random_range(-4.0..4.0), rng.random_range(-0.2..0.2), rng.random_range(-4.0..4.0)),
                )
            })
            .collect()
    }

    fn graph_from(world: &[YawPose], pairs: &[(u32, u32)]) -> ViewGraph {
        let mut g = ViewGraph::default();
        for f in 0..world.len() as u32 {
            g.nodes.insert(f);
        }
        for &(i, j) in pairs {
            g.edges.insert((i, j), estimate(relative(&world[i as usize], &world[j as usize])));
        }
        g
    }

    fn dense_pairs(n: u32, rng: &mut ChaCha8Rng, p: f64) -> Vec<(u32, u32)> {
        let mut pairs = Vec::new();
        for i in 0..n {
            for j in (i + 1)..n {
                if j == i + 1 || rng.random_bool(p) {
                    pairs.push((i, j));
                }
            }
        }
        pairs
    }

    #[test]
    fn relative_convention_matches_constraints() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = random_world(&mut rng, 2);
        let rel = relative(&w[0], &w[1]);
        assert!(wrap_angle(w[0].yaw - w[1].yaw - rel.yaw).abs() < 1e-12);
        assert!((w[0].t - w[1].t - rot_vertical(w[1].yaw) * rel.t).norm() < 1e-12);
    }

    #[test]
    fn graph_construction_cases() {
        let e = || Some(estimate(YawPose::identity()));
        let tri = build_view_graph(vec![((0, 1), e()), ((1, 2), e()), ((0, 2), e())]).unwrap();
        assert_eq!(tri.edges.len(), 3);
        let path = build_view_graph(vec![((0, 1), e()), ((1, 2), e()), ((0, 2), None)]).unwrap();
        assert_eq!(path.edges.len(), 2);
        assert_eq!(path.nodes.len(), 3);
        assert_eq!(build_view_graph(vec![]).unwrap(), ViewGraph::default());
        assert_eq!(
            build_view_graph(vec![((0, 1), e()), ((1, 0), None)]),
            Err(GlobalizeError::DuplicateEdge(0, 1))
        );
    }

    #[test]
    fn reversed_keys_are_inverted() {
        let p = YawPose::new(0.7, Vec3::new(1.0, 0.0, 2.0));
        let g = build_view_graph(vec![((5, 2), Some(estimate(p)))]).unwrap();
        let e = &g.edges[&(2, 5)];
        assert!(wrap_angle(e.pose.yaw + 0.7).abs() < 1e-12);
        assert_eq!(e.inlier_object_matches[0].index_a, 1);
    }

    #[test]
    fn consistent_graph_is_recovered_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let world = random_world(&mut rng, 12);
        let pairs = dense_pairs(12, &mut rng, 0.3);
        let g = graph_from(&world, &pairs);
        let cfg = AveragingConfig::default();
        let (yaws, g1) = rotation_averaging(&g, &cfg).unwrap();
        assert_eq!(g1.edges.len(), g.edges.len());
        let (centers, g2) = translation_averaging(&g1, &yaws, &cfg).unwrap();
        assert_eq!(g2.edges.len(), g.edges.len());
        for (k, e) in &g2.edges {
            assert!(rotation_residual(&yaws, *k, e).abs() < 1e-9);
            assert!(translation_residual(&yaws, &centers, *k, e) < 1e-9);
        }
        // gauge: compare against truth after aligning the anchor-free offsets
        let poses = register(&g2, &yaws, &centers, &BTreeMap::new());
        assert_eq!(poses.len(), 12);
        let gauge = world[0].compose(&YawPose::new(yaws[&0], centers[&0]).inverse());
        for f in 0..12u32 {
            let est = gauge.compose(&YawPose::new(yaws[&f], centers[&f]));
            assert!(wrap_angle(est.yaw - world[f as usize].yaw).abs() < 1e-9);
            assert!((est.t - world[f as usize].t).norm() < 1e-9);
        }
    }

    #[test]
    fn corrupted_rotation_edge_is_removed() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let world = random_world(&mut rng, 10);
        let pairs = dense_pairs(10, &mut rng, 0.6);
        let mut g = graph_from(&world, &pairs);
        let key = pairs[pairs.len() / 2];
        g.edges.get_mut(&key).unwrap().pose.yaw += 20f64.to_radians();
        for robust in [true, false] {
            let cfg = AveragingConfig { robust, ..Default::default() };
            let (yaws, filtered) = rotation_averaging(&g, &cfg).unwrap();
            assert!(!filtered.edges.contains_key(&key));
            for (k, e) in &filtered.edges {
                assert!(rotation_residual(&yaws, *k, e).abs() <= 3f64.to_radians());
            }
            assert_eq!(filtered.components().len(), 1);
        }
    }

    #[test]
    fn corrupted_translation_edge_is_removed() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let world = random_world(&mut rng, 10);
        let pairs = dense_pairs(10, &mut rng, 0.6);
        let mut g = graph_from(&world, &pairs);
        let key = pairs[3];
        g.edges.get_mut(&key).unwrap().pose.t += Vec3::new(0.5, 0.0, 0.0);
        let cfg = AveragingConfig::default();
        let (yaws, g1) = rotation_averaging(&g, &cfg).unwrap();
        let (centers, g2) = translation_averaging(&g1, &yaws, &cfg).unwrap();
        assert!(!g2.edges.contains_key(&key));
        assert_eq!(g2.edges.len(), g.edges.len() - 1);
        for (k, e) in &g2.edges {
            assert!(translation_residual(&yaws, &centers, *k, e) <= 0.1);
        }
    }

    #[test]
    fn empty_graph_errors() {
        let g = ViewGraph::default();
        assert_eq!(rotation_averaging(&g, &AveragingConfig::default()), Err(GlobalizeError::EmptyGraph));
    }

    #[test]
    fn largest_component_is_registered() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let world = random_world(&mut rng, 11);
        let mut pairs: Vec<(u32, u32)> = (0..6).map(|i| (i, i + 1)).collect();
        pairs.extend([(7, 8), (8, 9)]);
        let g = graph_from(&world, &pairs);
        let cfg = AveragingConfig::default();
        let (yaws, g1) = rotation_averaging(&g, &cfg).unwrap();
        let (centers, g2) = translation_averaging(&g1, &yaws, &cfg).unwrap();
        let poses = register(&g2, &yaws, &centers, &BTreeMap::new());
        assert_eq!(poses.registered().collect::<Vec<_>>(), (0..7).collect::<Vec<_>>());
        assert!(!poses.is_registered(10));
        assert!((poses.len() as f64 / 10.0 - 0.7).abs() < 1e-12);
    }

    #[test]
    fn equal_components_prefer_smallest_frame_id() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let world = random_world(&mut rng, 6);
        let g = graph_from(&world, &[(3, 4), (4, 5), (0, 1), (1, 2)]);
        assert_eq!(g.components()[0], vec![0, 1, 2]);
    }

    #[test]
    fn gauge_change_leaves_residuals_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let world = random_world(&mut rng, 8);
        let gauge = YawPose::new(1.1, Vec3::new(3.0, 0.2, -1.0));
        let moved: Vec<YawPose> = world.iter().map(|w| gauge.compose(w)).collect();
        let pairs = dense_pairs(8, &mut rng, 0.5);
        let mut g1 = graph_from(&world, &pairs);
        let mut g2 = graph_from(&moved, &pairs);
        for g in [&mut g1, &mut g2] {
            g.edges.get_mut(&pairs[0]).unwrap().pose.t.x += 0.03;
        }
        let cfg = AveragingConfig::default();
        let (y1, _) = rotation_averaging(&g1, &cfg).unwrap();
        let (y2, _) = rotation_averaging(&g2, &cfg).unwrap();
        let (c1, _) = translation_averaging(&g1, &y1, &cfg).unwrap();
        let (c2, _) = translation_averaging(&g2, &y2, &cfg).unwrap();
        for (k, e) in &g1.edges {
            let e2 = &g2.edges[k];
            assert!((translation_residual(&y1, &c1, *k, e) - translation_residual(&y2, &c2, *k, e2)).abs() < 1e-9);
        }
    }
}
