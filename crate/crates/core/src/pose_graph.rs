//! SE(2) pose graph and its Levenberg–Marquardt optimizer.
//!
//! Residuals are `log(Z⁻¹ ⊕ (Xᵢ⁻¹ ⊕ Xⱼ))` with right-perturbation updates
//! `X ← X ⊕ exp(δ)`. The normal equations are assembled in 3×3 blocks and
//! solved with a sparse Cholesky factor under a minimum-degree ordering.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{right_jacobian_inv, Pose2, Tangent2};
use crate::sparse::{minimum_degree_order, Cholesky, CscUpper, Symbolic};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct NodeId(pub u32);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EdgeKind {
    Odometry,
    LoopIntra,
    LoopInter,
}

impl EdgeKind {
    pub fn is_loop(self) -> bool {
        !matches!(self, EdgeKind::Odometry)
    }

    fn token(self) -> &'static str {
        match self {
            EdgeKind::Odometry => "Odometry",
            EdgeKind::LoopIntra => "LoopIntra",
            EdgeKind::LoopInter => "LoopInter",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "Odometry" => Some(EdgeKind::Odometry),
            "LoopIntra" => Some(EdgeKind::LoopIntra),
            "LoopInter" => Some(EdgeKind::LoopInter),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GraphNode {
    pub id: NodeId,
    pub agent_id: u16,
    pub keyframe_id: u32,
    pub pose: Pose2,
    pub fixed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GraphEdge {
    pub from: NodeId,
    pub to: NodeId,
    pub measurement: Pose2,
    pub information: Matrix3<f64>,
    pub kind: EdgeKind,
}

/// Information matrices must be symmetric with strictly positive eigenvalues.
pub fn check_information(info: &Matrix3<f64>) -> Result<()> {
    let asym = (info - info.transpose()).abs().max();
    if !info.iter().all(|v| v.is_finite()) || asym > 1e-9 * info.abs().max().max(1.0) {
        return Err(Error::Parameter("information matrix is not symmetric".into()));
    }
    let eig = SymmetricEigen::new(*info);
    if eig.eigenvalues.iter().any(|&l| !(l > 0.0)) {
        return Err(Error::Parameter("information matrix is not positive definite".into()));
    }
    Ok(())
}

fn mat3(a: [[f64; 3]; 3]) -> Matrix3<f64> {
    Matrix3::new(
        a[0][0], a[0][1], a[0][2], a[1][0], a[1][1], a[1][2], a[2][0], a[2][1], a[2][2],
    )
}

/// Relative-pose residual of one edge given its endpoint poses.
pub fn residual(measurement: &Pose2, from: &Pose2, to: &Pose2) -> Tangent2 {
    measurement.inverse().compose(&from.between(to)).log()
}

/// Residual plus its Jacobians with respect to right perturbations of the
/// `from` and `to` poses.
pub fn residual_jacobians(
    measurement: &Pose2,
    from: &Pose2,
    to: &Pose2,
) -> (Tangent2, Matrix3<f64>, Matrix3<f64>) {
    let r = residual(measurement, from, to);
    let jr_inv = mat3(right_jacobian_inv(&r));
    let ad = mat3(to.between(from).adjoint());
    (r, -jr_inv * ad, jr_inv)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub max_iters: usize,
    /// Stop once the relative chi² decrease of an accepted step falls below this.
    pub rel_decrease_tol: f64,
    pub step_tol: f64,
    /// Cauchy kernel scale in meters of translational error; loop edges only.
    pub loop_kernel_scale: Option<f64>,
    pub initial_lambda: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            max_iters: 100,
            rel_decrease_tol: 1e-9,
            step_tol: 1e-8,
            loop_kernel_scale: Some(1.0),
            initial_lambda: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizeReport {
    pub initial_chi2: f64,
    pub final_chi2: f64,
    pub iterations: usize,
    pub max_pose_delta: f64,
    /// Cost after every accepted step, starting with the initial cost.
    pub chi2_history: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PoseGraph {
    nodes: Vec<GraphNode>,
    edges: Vec<GraphEdge>,
}

/// Robust kernel: returns (cost, weight) for squared Mahalanobis norm `s`.
fn robust(kind: EdgeKind, info: &Matrix3<f64>, s: f64, cfg: &OptimizerConfig) -> (f64, f64) {
    match cfg.loop_kernel_scale {
        Some(scale) if kind.is_loop() => {
            let c2 = info[(0, 0)].max(info[(1, 1)]) * scale * scale;
            (c2 * (s / c2).ln_1p(), 1.0 / (1.0 + s / c2))
        }
        _ => (s, 1.0),
    }
}

impl PoseGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn nodes(&self) -> &[GraphNode] {
        &self.nodes
    }

    pub fn edges(&self) -> &[GraphEdge] {
        &self.edges
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn add_node(&mut self, agent_id: u16, keyframe_id: u32, pose: Pose2, fixed: bool) -> NodeId {
        let id = NodeId(self.nodes.len() as u32);
        self.nodes.push(GraphNode { id, agent_id, keyframe_id, pose, fixed });
        id
    }

    pub fn node(&self, id: NodeId) -> Result<&GraphNode> {
        self.nodes
            .get(id.0 as usize)
            .ok_or_else(|| Error::Graph(format!("unknown node {id}")))
    }

    pub fn node_mut(&mut self, id: NodeId) -> Result<&mut GraphNode> {
        self.nodes
            .get_mut(id.0 as usize)
            .ok_or_else(|| Error::Graph(format!("unknown node {id}")))
    }

    pub fn pose(&self, id: NodeId) -> Option<Pose2> {
        self.nodes.get(id.0 as usize).map(|n| n.pose)
    }

    pub fn set_pose(&mut self, id: NodeId, pose: Pose2) -> Result<()> {
        self.node_mut(id)?.pose = pose;
        Ok(())
    }

    pub fn set_fixed(&mut self, id: NodeId, fixed: bool) -> Result<()> {
        self.node_mut(id)?.fixed = fixed;
        Ok(())
    }

    pub fn add_edge(&mut self, edge: GraphEdge) -> Result<()> {
        if edge.from == edge.to {
            return Err(Error::Graph(format!("self edge on node {}", edge.from)));
        }
        self.node(edge.from)?;
        self.node(edge.to)?;
        check_information(&edge.information)?;
        self.edges.push(edge);
        Ok(())
    }

    pub fn residual(&self, edge: &GraphEdge) -> Result<Tangent2> {
        let a = self.node(edge.from)?.pose;
        let b = self.node(edge.to)?.pose;
        Ok(residual(&edge.measurement, &a, &b))
    }

    /// Total (robustified) cost of the current poses.
    pub fn chi2(&self, cfg: &OptimizerConfig) -> f64 {
        self.cost_with(&self.poses(), cfg)
    }

    fn poses(&self) -> Vec<Pose2> {
        self.nodes.iter().map(|n| n.pose).collect()
    }

    fn cost_with(&self, poses: &[Pose2], cfg: &OptimizerConfig) -> f64 {
        self.edges
            .iter()
            .map(|e| {
                let r = residual(&e.measurement, &poses[e.from.0 as usize], &poses[e.to.0 as usize]);
                let v = Vector3::new(r.dx, r.dy, r.dtheta);
                let s = (v.transpose() * e.information * v)[(0, 0)];
                robust(e.kind, &e.information, s, cfg).0
            })
            .sum()
    }

    /// Connected components under edge connectivity, each sorted, ordered
    /// by smallest member.
    pub fn connected_components(&self) -> Vec<Vec<NodeId>> {
        let n = self.nodes.len();
        let mut uf = UnionFind::new(n);
        for e in &self.edges {
            uf.union(e.from.0 as usize, e.to.0 as usize);
        }
        let mut groups: BTreeMap<usize, Vec<NodeId>> = BTreeMap::new();
        for i in 0..n {
            groups.entry(uf.find(i)).or_default().push(NodeId(i as u32));
        }
        let mut out: Vec<Vec<NodeId>> = groups.into_values().collect();
        out.sort_by_key(|g| g[0]);
        out
    }

    pub fn optimize(&mut self, cfg: &OptimizerConfig) -> Result<OptimizeReport> {
        for comp in self.connected_components() {
            if !comp.iter().any(|id| self.nodes[id.0 as usize].fixed) {
                return Err(Error::Graph(format!(
                    "component containing node {} has no fixed anchor",
                    comp[0]
                )));
            }
        }
        for e in &self.edges {
            check_information(&e.information)?;
        }

        let start = self.poses();
        let initial = self.cost_with(&start, cfg);
        let mut report = OptimizeReport {
            initial_chi2: initial,
            final_chi2: initial,
            iterations: 0,
            max_pose_delta: 0.0,
            chi2_history: vec![initial],
        };

        // free-node block indices in elimination order
        let mut free_of = vec![usize::MAX; self.nodes.len()];
        let free: Vec<usize> = (0..self.nodes.len()).filter(|&i| !self.nodes[i].fixed).collect();
        if free.is_empty() || self.edges.is_empty() || initial <= 1e-300 {
            return Ok(report);
        }
        for (k, &i) in free.iter().enumerate() {
            free_of[i] = k;
        }
        let mut adjacency = vec![Vec::new(); free.len()];
        for e in &self.edges {
            let (a, b) = (free_of[e.from.0 as usize], free_of[e.to.0 as usize]);
            if a != usize::MAX && b != usize::MAX {
                adjacency[a].push(b);
                adjacency[b].push(a);
            }
        }
        let order = minimum_degree_order(&adjacency);
        let mut position = vec![0usize; free.len()];
        for (k, &blk) in order.iter().enumerate() {
            position[blk] = k;
        }
        let block_of = |node: usize| -> Option<usize> {
            let f = free_of[node];
            (f != usize::MAX).then(|| position[f])
        };

        let dim = 3 * free.len();
        let layout = HessianLayout::new(dim, &self.edges, &block_of);
        let mut poses = start.clone();
        let mut cost = initial;
        let mut lambda = cfg.initial_lambda;
        let symbolic = Symbolic::analyze(&layout.pattern);
        let mut hvals = vec![0.0f64; layout.pattern.values.len()];

        while report.iterations < cfg.max_iters {
            report.iterations += 1;
            // linearize
            hvals.fill(0.0);
            let mut grad = vec![0.0f64; dim];
            for (e, slots) in self.edges.iter().zip(&layout.edges) {
                let (ia, ib) = (e.from.0 as usize, e.to.0 as usize);
                let (r, ja, jb) = residual_jacobians(&e.measurement, &poses[ia], &poses[ib]);
                let rv = Vector3::new(r.dx, r.dy, r.dtheta);
                let s = (rv.transpose() * e.information * rv)[(0, 0)];
                let w = robust(e.kind, &e.information, s, cfg).1;
                let omega = e.information * w;
                for (b, j) in [(slots.a, &ja), (slots.b, &jb)] {
                    let Some(b) = b else { continue };
                    let g = j.transpose() * omega * rv;
                    for k in 0..3 {
                        grad[3 * b + k] += g[k];
                    }
                }
                let add = |hvals: &mut [f64], idx: &[usize; 9], m: Matrix3<f64>| {
                    for (k, &i) in idx.iter().enumerate() {
                        if i != usize::MAX {
                            hvals[i] += m[(k / 3, k % 3)];
                        }
                    }
                };
                if let Some(idx) = &slots.aa {
                    add(&mut hvals, idx, ja.transpose() * omega * ja);
                }
                if let Some(idx) = &slots.bb {
                    add(&mut hvals, idx, jb.transpose() * omega * jb);
                }
                if let Some((idx, a_first)) = &slots.ab {
                    let m = if *a_first { ja.transpose() * omega * jb } else { jb.transpose() * omega * ja };
                    add(&mut hvals, idx, m);
                }
            }

            let mut accepted = false;
            let mut converged = false;
            while !accepted {
                let mut h = layout.pattern.clone();
                h.values.copy_from_slice(&hvals);
                for &d in &layout.diag {
                    let v = h.values[d];
                    h.values[d] = v + lambda * v.max(1e-9) + 1e-12;
                }
                let mut step: Vec<f64> = grad.iter().map(|g| -g).collect();
                match Cholesky::factor(&symbolic, &h) {
                    Ok(l) => l.solve_in_place(&mut step),
                    Err(_) => {
                        lambda *= 10.0;
                        if lambda > 1e16 {
                            converged = true;
                            break;
                        }
                        continue;
                    }
                }
                let step_norm = step.iter().map(|v| v * v).sum::<f64>().sqrt();
                let mut candidate = poses.clone();
                for &node in &free {
                    let b = block_of(node).unwrap();
                    let d = Tangent2::new(step[3 * b], step[3 * b + 1], step[3 * b + 2]);
                    candidate[node] = poses[node].retract(&d);
                }
                let new_cost = self.cost_with(&candidate, cfg);
                if new_cost <= cost {
                    let rel = (cost - new_cost) / cost.max(1e-300);
                    poses = candidate;
                    cost = new_cost;
                    report.chi2_history.push(cost);
                    lambda = (lambda / 3.0).max(1e-12);
                    accepted = true;
                    if rel < cfg.rel_decrease_tol || step_norm < cfg.step_tol || cost <= 1e-300 {
                        converged = true;
                    }
                } else {
                    lambda *= 4.0;
                    if lambda > 1e16 || step_norm < cfg.step_tol {
                        converged = true;
                        break;
                    }
                }
            }
            if converged {
                break;
            }
        }

        report.final_chi2 = cost;
        report.max_pose_delta = start
            .iter()
            .zip(&poses)
            .map(|(a, b)| a.planar_distance(b))
            .fold(0.0, f64::max);
        for (n, p) in self.nodes.iter_mut().zip(poses) {
            n.pose = p;
        }
        Ok(report)
    }

    /// Text dump: one `NODE` or `EDGE` record per line.
    pub fn dump(&self) -> String {
        let mut s = String::new();
        for n in &self.nodes {
            let _ = writeln!(
                s,
                "NODE {} {} {} {} {} {} {}",
                n.id.0,
                n.agent_id,
                n.keyframe_id,
                n.pose.x,
                n.pose.y,
                n.pose.theta,
                u8::from(n.fixed)
            );
        }
        for e in &self.edges {
            let i = &e.information;
            let _ = writeln!(
                s,
                "EDGE {} {} {} {} {} {} {} {} {} {} {} {}",
                e.from.0,
                e.to.0,
                e.measurement.x,
                e.measurement.y,
                e.measurement.theta,
                i[(0, 0)],
                i[(0, 1)],
                i[(0, 2)],
                i[(1, 1)],
                i[(1, 2)],
                i[(2, 2)],
                e.kind.token()
            );
        }
        s
    }

    pub fn parse(text: &str) -> Result<PoseGraph> {
        fn num<T: std::str::FromStr>(tok: Option<&str>, line: usize) -> Result<T> {
            tok.and_then(|t| t.parse().ok())
                .ok_or_else(|| Error::Format(format!("graph dump line {line}: bad field")))
        }
        let mut g = PoseGraph::new();
        for (ln, line) in text.lines().enumerate() {
            let ln = ln + 1;
            let mut it = line.split_whitespace();
            match it.next() {
                None => continue,
                Some("NODE") => {
                    let id: u32 = num(it.next(), ln)?;
                    if id as usize != g.nodes.len() {
                        return Err(Error::Format(format!("graph dump line {ln}: node ids must be dense")));
                    }
                    let agent = num(it.next(), ln)?;
                    let kf = num(it.next(), ln)?;
                    let pose = Pose2 {
                        x: num(it.next(), ln)?,
                        y: num(it.next(), ln)?,
                        theta: num(it.next(), ln)?,
                    };
                    let fixed: u8 = num(it.next(), ln)?;
                    let nid = g.add_node(agent, kf, pose, fixed != 0);
                    g.nodes[nid.0 as usize].pose = pose;
                }
                Some("EDGE") => {
                    let from = NodeId(num(it.next(), ln)?);
                    let to = NodeId(num(it.next(), ln)?);
                    let measurement = Pose2 {
                        x: num(it.next(), ln)?,
                        y: num(it.next(), ln)?,
                        theta: num(it.next(), ln)?,
                    };
                    let v: Vec<f64> = (0..6).map(|_| num(it.next(), ln)).collect::<Result<_>>()?;
                    let information =
                        Matrix3::new(v[0], v[1], v[2], v[1], v[3], v[4], v[2], v[4], v[5]);
                    let kind = it
                        .next()
                        .and_then(EdgeKind::parse)
                        .ok_or_else(|| Error::Format(format!("graph dump line {ln}: bad kind")))?;
                    g.add_edge(GraphEdge { from, to, measurement, information, kind })?;
                }
                Some(other) => {
                    return Err(Error::Format(format!("graph dump line {ln}: unknown record {other}")))
                }
            }
        }
        Ok(g)
    }
}

#[derive(Debug, Clone)]
pub(crate) struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    pub(crate) fn new(n: usize) -> Self {
        Self { parent: (0..n).collect() }
    }

    pub(crate) fn push(&mut self) -> usize {
        self.parent.push(self.parent.len());
        self.parent.len() - 1
    }

    pub(crate) fn find(&mut self, mut i: usize) -> usize {
        while self.parent[i] != i {
            self.parent[i] = self.parent[self.parent[i]];
            i = self.parent[i];
        }
        i
    }

    /// Joins the sets; the smaller root index survives.
    pub(crate) fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.parent[hi] = lo;
        }
    }
}

/// Value slots of a 3x3 block; `usize::MAX` marks entries below the diagonal.
type BlockSlots = [usize; 9];

struct EdgeSlots {
    a: Option<usize>,
    b: Option<usize>,
    aa: Option<BlockSlots>,
    bb: Option<BlockSlots>,
    /// Off-diagonal block and whether `from` is its row block.
    ab: Option<(BlockSlots, bool)>,
}

/// Fixed sparsity pattern of the normal equations of one optimize call.
struct HessianLayout {
    pattern: CscUpper,
    diag: Vec<usize>,
    edges: Vec<EdgeSlots>,
}

impl HessianLayout {
    fn new(dim: usize, edges: &[GraphEdge], block_of: &impl Fn(usize) -> Option<usize>) -> Self {
        let mut trip = Vec::new();
        let push_block = |p: usize, q: usize, trip: &mut Vec<(usize, usize, f64)>| {
            for r in 0..3 {
                for c in 0..3 {
                    if p != q || r <= c {
                        trip.push((3 * p + r, 3 * q + c, 0.0));
                    }
                }
            }
        };
        for b in 0..dim / 3 {
            push_block(b, b, &mut trip);
        }
        for e in edges {
            if let (Some(a), Some(b)) = (block_of(e.from.0 as usize), block_of(e.to.0 as usize)) {
                if a != b {
                    push_block(a.min(b), a.max(b), &mut trip);
                }
            }
        }
        let pattern = CscUpper::from_triplets(dim, &mut trip);
        let find = |row: usize, col: usize| {
            let (lo, hi) = (pattern.col_ptr[col], pattern.col_ptr[col + 1]);
            lo + pattern.row_idx[lo..hi].binary_search(&row).expect("entry in pattern")
        };
        let block = |p: usize, q: usize| {
            let mut idx = [usize::MAX; 9];
            for r in 0..3 {
                for c in 0..3 {
                    if p != q || r <= c {
                        idx[3 * r + c] = find(3 * p + r, 3 * q + c);
                    }
                }
            }
            idx
        };
        let diag = (0..dim).map(|i| find(i, i)).collect();
        let edges = edges
            .iter()
            .map(|e| {
                let (a, b) = (block_of(e.from.0 as usize), block_of(e.to.0 as usize));
                let ab = match (a, b) {
                    (Some(a), Some(b)) if a < b => Some((block(a, b), true)),
                    (Some(a), Some(b)) if b < a => Some((block(b, a), false)),
                    _ => None,
                };
                EdgeSlots { a, b, aa: a.map(|a| block(a, a)), bb: b.map(|b| block(b, b)), ab }
            })
            .collect();
        Self { pattern, diag, edges }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn ident() -> Matrix3<f64> {
        Matrix3::identity()
    }

    fn edge(from: u32, to: u32, m: Pose2, kind: EdgeKind) -> GraphEdge {
        GraphEdge { from: NodeId(from), to: NodeId(to), measurement: m, information: ident(), kind }
    }

    #[test]
    fn residual_examples() {
        let m = Pose2::new(1.0, 0.0, 0.0);
        let r = residual(&m, &Pose2::identity(), &Pose2::new(1.0, 0.0, 0.0));
        assert_eq!(r.as_array(), [0.0, 0.0, 0.0]);
        let r = residual(&m, &Pose2::identity(), &Pose2::new(1.1, 0.0, 0.0));
        assert_abs_diff_eq!(r.dx, 0.1, epsilon = 1e-12);
        assert_abs_diff_eq!(r.dy, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(r.dtheta, 0.0, epsilon = 1e-12);
        let ten = 10f64.to_radians();
        let r = residual(&Pose2::identity(), &Pose2::identity(), &Pose2::new(0.0, 0.0, ten));
        assert_abs_diff_eq!(r.dx, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(r.dy, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(r.dtheta, ten, epsilon = 1e-12);
    }

    #[test]
    fn missing_node_is_graph_error() {
        let mut g = PoseGraph::new();
        g.add_node(0, 0, Pose2::identity(), true);
        assert!(matches!(
            g.add_edge(edge(0, 5, Pose2::identity(), EdgeKind::Odometry)),
            Err(Error::Graph(_))
        ));
        let e = edge(0, 5, Pose2::identity(), EdgeKind::Odometry);
        assert!(g.residual(&e).is_err());
    }

    #[test]
    fn odometry_only_is_dead_reckoning() {
        let mut g = PoseGraph::new();
        let steps = [Pose2::new(1.0, 0.2, 0.1), Pose2::new(0.5, -0.1, -0.3), Pose2::new(2.0, 0.0, 0.5)];
        let mut p = Pose2::identity();
        g.add_node(0, 0, p, true);
        for (i, s) in steps.iter().enumerate() {
            p = p.compose(s);
            g.add_node(0, i as u32 + 1, p, false);
            g.add_edge(edge(i as u32, i as u32 + 1, *s, EdgeKind::Odometry)).unwrap();
        }
        let before: Vec<Pose2> = g.nodes().iter().map(|n| n.pose).collect();
        let rep = g.optimize(&OptimizerConfig::default()).unwrap();
        assert!(rep.final_chi2 < 1e-20);
        for (n, b) in g.nodes().iter().zip(before) {
            assert_abs_diff_eq!(n.pose.x, b.x, epsilon = 1e-12);
            assert_abs_diff_eq!(n.pose.y, b.y, epsilon = 1e-12);
        }
    }

    #[test]
    fn three_node_collinear_loop() {
        // Quadratic cost so the 1-D brute-force answer applies exactly.
        let mut g = PoseGraph::new();
        g.add_node(0, 0, Pose2::identity(), true);
        g.add_node(0, 1, Pose2::new(1.0, 0.0, 0.0), false);
        g.add_node(0, 2, Pose2::new(2.0, 0.0, 0.0), false);
        g.add_edge(edge(0, 1, Pose2::new(1.0, 0.0, 0.0), EdgeKind::Odometry)).unwrap();
        g.add_edge(edge(1, 2, Pose2::new(1.0, 0.0, 0.0), EdgeKind::Odometry)).unwrap();
        g.add_edge(edge(0, 2, Pose2::new(1.8, 0.0, 0.0), EdgeKind::LoopIntra)).unwrap();
        let cfg = OptimizerConfig { loop_kernel_scale: None, ..Default::default() };
        let rep = g.optimize(&cfg).unwrap();

        // brute-force grid search over (x1, x2) refined around the optimum
        let f = |x1: f64, x2: f64| (x1 - 1.0).powi(2) + (x2 - x1 - 1.0).powi(2) + (x2 - 1.8).powi(2);
        let (mut bx1, mut bx2, mut best) = (0.0, 0.0, f64::INFINITY);
        let mut span = 1.0;
        let (mut c1, mut c2) = (1.0, 2.0);
        for _ in 0..12 {
            for i in -20..=20 {
                for j in -20..=20 {
                    let (x1, x2) = (c1 + span * i as f64 / 20.0, c2 + span * j as f64 / 20.0);
                    let v = f(x1, x2);
                    if v < best {
                        best = v;
                        bx1 = x1;
                        bx2 = x2;
                    }
                }
            }
            c1 = bx1;
            c2 = bx2;
            span /= 8.0;
        }
        assert_abs_diff_eq!(g.pose(NodeId(1)).unwrap().x, bx1, epsilon = 1e-6);
        assert_abs_diff_eq!(g.pose(NodeId(2)).unwrap().x, bx2, epsilon = 1e-6);
        assert_abs_diff_eq!(rep.final_chi2, best, epsilon = 1e-9);
        assert_abs_diff_eq!(bx1, 0.9333333, epsilon = 1e-6);
        assert_abs_diff_eq!(bx2, 1.8666667, epsilon = 1e-6);
        assert_abs_diff_eq!(best, 0.0133333, epsilon = 1e-6);

        // default (Cauchy on the loop) stays at the same answer to 3 digits
        let mut g2 = PoseGraph::parse(&g.dump()).unwrap();
        g2.set_pose(NodeId(1), Pose2::new(1.0, 0.0, 0.0)).unwrap();
        g2.set_pose(NodeId(2), Pose2::new(2.0, 0.0, 0.0)).unwrap();
        g2.optimize(&OptimizerConfig::default()).unwrap();
        assert_abs_diff_eq!(g2.pose(NodeId(1)).unwrap().x, 0.933, epsilon = 1e-3);
        assert_abs_diff_eq!(g2.pose(NodeId(2)).unwrap().x, 1.866, epsilon = 1e-3);
    }

    #[test]
    fn no_anchor_is_rejected() {
        let mut g = PoseGraph::new();
        g.add_node(0, 0, Pose2::identity(), false);
        g.add_node(0, 1, Pose2::identity(), false);
        g.add_edge(edge(0, 1, Pose2::new(1.0, 0.0, 0.0), EdgeKind::Odometry)).unwrap();
        assert!(matches!(g.optimize(&OptimizerConfig::default()), Err(Error::Graph(_))));
    }

    #[test]
    fn non_pd_information_rejected() {
        let mut g = PoseGraph::new();
        g.add_node(0, 0, Pose2::identity(), true);
        g.add_node(0, 1, Pose2::identity(), false);
        let mut e = edge(0, 1, Pose2::new(1.0, 0.0, 0.0), EdgeKind::Odometry);
        e.information[(2, 2)] = -1.0;
        assert!(matches!(g.add_edge(e), Err(Error::Parameter(_))));
    }

    #[test]
    fn components() {
        let mut g = PoseGraph::new();
        assert!(g.connected_components().is_empty());
        for a in 0..2u16 {
            for k in 0..3u32 {
                g.add_node(a, k, Pose2::identity(), k == 0);
            }
        }
        for a in 0..2u32 {
            for k in 0..2u32 {
                let i = a * 3 + k;
                g.add_edge(edge(i, i + 1, Pose2::new(1.0, 0.0, 0.0), EdgeKind::Odometry)).unwrap();
            }
        }
        assert_eq!(g.connected_components().len(), 2);
        g.add_edge(edge(2, 4, Pose2::identity(), EdgeKind::LoopInter)).unwrap();
        assert_eq!(g.connected_components().len(), 1);
    }

    #[test]
    fn perturbed_ring_descends() {
        let mut g = PoseGraph::new();
        let n = 20;
        let step = Pose2::new(3.0, 0.0, 2.0 * std::f64::consts::PI / n as f64);
        let mut p = Pose2::identity();
        g.add_node(0, 0, p, true);
        for k in 1..n {
            let noisy = Pose2::new(step.x + 0.05 * (k as f64).sin(), 0.02 * (k as f64).cos(), step.theta + 0.01);
            p = p.compose(&noisy);
            g.add_node(0, k, p, false);
            g.add_edge(edge(k - 1, k, step, EdgeKind::Odometry)).unwrap();
        }
        g.add_edge(edge(n - 1, 0, step, EdgeKind::LoopIntra)).unwrap();
        let rep = g.optimize(&OptimizerConfig::default()).unwrap();
        assert!(rep.final_chi2 < rep.initial_chi2);
        for w in rep.chi2_history.windows(2) {
            assert!(w[1] <= w[0] + 1e-9);
        }
    }

    #[test]
    fn dump_parse_round_trip() {
        let mut g = PoseGraph::new();
        g.add_node(3, 7, Pose2::new(1.25, -0.5, 0.3), true);
        g.add_node(3, 8, Pose2::new(2.0, 0.1, -2.9), false);
        let mut info = ident() * 4.0;
        info[(0, 1)] = 0.5;
        info[(1, 0)] = 0.5;
        g.add_edge(GraphEdge {
            from: NodeId(0),
            to: NodeId(1),
            measurement: Pose2::new(0.7, 0.6, 0.1),
            information: info,
            kind: EdgeKind::LoopInter,
        })
        .unwrap();
        let back = PoseGraph::parse(&g.dump()).unwrap();
        assert_eq!(back, g);
        assert!(PoseGraph::parse("NODE 0 0 0 x 0 0 1").is_err());
    }

    fn arb_pose() -> impl Strategy<Value = Pose2> {
        (-10.0..10.0f64, -10.0..10.0f64, -3.1..3.1f64).prop_map(|(x, y, t)| Pose2::new(x, y, t))
    }

    proptest! {
        #[test]
        fn jacobians_match_central_differences(m in arb_pose(), a in arb_pose(), b in arb_pose()) {
            let (r0, ja, jb) = residual_jacobians(&m, &a, &b);
            // stay away from the ±π cut of the residual angle
            prop_assume!(r0.dtheta.abs() < 3.0);
            let h = 1e-6;
            for k in 0..3 {
                let mut d = [0.0; 3];
                d[k] = h;
                let dp = Tangent2::new(d[0], d[1], d[2]);
                let dm = Tangent2::new(-d[0], -d[1], -d[2]);
                let fa = |p: Pose2| residual(&m, &p, &b).as_array();
                let fb = |p: Pose2| residual(&m, &a, &p).as_array();
                let (ap, am) = (fa(a.retract(&dp)), fa(a.retract(&dm)));
                let (bp, bm) = (fb(b.retract(&dp)), fb(b.retract(&dm)));
                for row in 0..3 {
                    let na = (ap[row] - am[row]) / (2.0 * h);
                    let nb = (bp[row] - bm[row]) / (2.0 * h);
                    prop_assert!((na - ja[(row, k)]).abs() < 1e-5, "ja[{row},{k}] {na} vs {}", ja[(row, k)]);
                    prop_assert!((nb - jb[(row, k)]).abs() < 1e-5, "jb[{row},{k}] {nb} vs {}", jb[(row, k)]);
                }
            }
        }
    }
}
