//! Non-recombining binary Brownian tree and node-indexed random fields.
//!
//! Nodes are stored in heap order: the root is node 0 and node `k` has the
//! up child `2k + 1` (increment `+sqrt(dt)`) and the down child `2k + 2`
//! (increment `-sqrt(dt)`). Every node at depth `d` carries probability
//! `2^-d`, so all expectations are exact dyadic averages.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::mesh::{SpatialField, SpatialMesh};

pub const MAX_STEPS: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ScenarioTree {
    pub n_steps: usize,
    pub horizon: f64,
    pub dt: f64,
    pub sqrt_dt: f64,
}

impl ScenarioTree {
    pub fn new(n_steps: usize, horizon: f64) -> Result<Self> {
        if !(1..=MAX_STEPS).contains(&n_steps) {
            return Err(Error::Tree(format!(
                "number of steps must be in 1..={MAX_STEPS}, got {n_steps}"
            )));
        }
        if !(horizon > 0.0 && horizon < 1.0) {
            return Err(Error::Tree(format!("horizon must lie in (0, 1), got {horizon}")));
        }
        let dt = horizon / n_steps as f64;
        Ok(Self { n_steps, horizon, dt, sqrt_dt: dt.sqrt() })
    }

    pub fn node_count(&self) -> usize {
        (1usize << (self.n_steps + 1)) - 1
    }

    /// Nodes strictly above the leaves.
    pub fn interior_count(&self) -> usize {
        (1usize << self.n_steps) - 1
    }

    pub fn depth_range(&self, depth: usize) -> std::ops::Range<usize> {
        let first = (1usize << depth) - 1;
        first..(2 * first + 1)
    }

    pub fn depth_of(node: usize) -> usize {
        (usize::BITS - 1 - (node + 1).leading_zeros()) as usize
    }

    pub fn children(node: usize) -> (usize, usize) {
        (2 * node + 1, 2 * node + 2)
    }

    pub fn parent(node: usize) -> Option<usize> {
        (node > 0).then(|| (node - 1) / 2)
    }

    pub fn is_up_child(node: usize) -> bool {
        node % 2 == 1
    }

    pub fn is_leaf(&self, node: usize) -> bool {
        Self::depth_of(node) == self.n_steps
    }

    pub fn probability(depth: usize) -> f64 {
        // exact power of two
        f64::powi(0.5, depth as i32)
    }

    /// Signed Brownian increment on the edge into `node`.
    pub fn increment(&self, node: usize) -> f64 {
        if Self::is_up_child(node) {
            self.sqrt_dt
        } else {
            -self.sqrt_dt
        }
    }

    pub fn time(&self, depth: usize) -> f64 {
        depth as f64 * self.dt
    }

    /// Path string of `u`/`d` moves from the root.
    pub fn path(node: usize) -> String {
        let mut moves = Vec::new();
        let mut k = node;
        while let Some(p) = Self::parent(k) {
            moves.push(if Self::is_up_child(k) { 'u' } else { 'd' });
            k = p;
        }
        moves.iter().rev().collect()
    }

    /// Value of the Brownian path W at `node`.
    pub fn brownian(&self, node: usize) -> f64 {
        let mut w = 0.0;
        let mut k = node;
        while let Some(p) = Self::parent(k) {
            w += self.increment(k);
            k = p;
        }
        w
    }
}

/// One spatial vector per tree node.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptedField {
    n_steps: usize,
    m: usize,
    data: Vec<f64>,
}

impl AdaptedField {
    pub fn zeros(tree: &ScenarioTree, m: usize) -> Self {
        Self { n_steps: tree.n_steps, m, data: vec![0.0; tree.node_count() * m] }
    }

    pub fn constant(tree: &ScenarioTree, values: &[f64]) -> Self {
        let mut f = Self::zeros(tree, values.len());
        for node in 0..tree.node_count() {
            f.node_mut(node).copy_from_slice(values);
        }
        f
    }

    pub fn from_fn(tree: &ScenarioTree, m: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut out = Self::zeros(tree, m);
        for node in 0..tree.node_count() {
            for i in 0..m {
                out.data[node * m + i] = f(node, i);
            }
        }
        out
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn node_count(&self) -> usize {
        self.data.len() / self.m.max(1)
    }

    pub fn node(&self, node: usize) -> &[f64] {
        &self.data[node * self.m..(node + 1) * self.m]
    }

    pub fn node_mut(&mut self, node: usize) -> &mut [f64] {
        &mut self.data[node * self.m..(node + 1) * self.m]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn matches(&self, tree: &ScenarioTree, m: usize) -> Result<()> {
        if self.n_steps != tree.n_steps || self.m != m {
            return Err(Error::Shape { expected: tree.node_count() * m, got: self.data.len() });
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0)
    }

    pub fn scaled(&self, c: f64) -> Self {
        let mut out = self.clone();
        out.data.iter_mut().for_each(|v| *v *= c);
        out
    }

    pub fn axpy(&mut self, alpha: f64, other: &Self) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |acc, v| acc.max(v.abs()))
    }

    /// Applies `f` to every node's spatial field.
    pub fn map_nodes(&self, f: impl Fn(&[f64]) -> SpatialField) -> Self {
        let mut out = self.clone();
        for node in 0..self.node_count() {
            let v = f(self.node(node));
            out.node_mut(node).copy_from_slice(&v);
        }
        out
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { n_steps: self.n_steps, m: self.m, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    /// Zeroes the entries outside `mask` at every node.
    pub fn restrict(&mut self, mask: &[bool]) {
        let m = self.m;
        for chunk in self.data.chunks_mut(m) {
            for (v, &keep) in chunk.iter_mut().zip(mask) {
                if !keep {
                    *v = 0.0;
                }
            }
        }
    }
}

/// Probability-weighted average of the node values at `depth`.
pub fn expectation(field: &AdaptedField, tree: &ScenarioTree, depth: usize) -> Result<SpatialField> {
    if depth > tree.n_steps {
        return Err(Error::Tree(format!("depth {depth} exceeds tree depth {}", tree.n_steps)));
    }
    let mut out = vec![0.0; field.m()];
    for node in tree.depth_range(depth) {
        for (o, v) in out.iter_mut().zip(field.node(node)) {
            *o += v;
        }
    }
    let p = ScenarioTree::probability(depth);
    out.iter_mut().for_each(|v| *v *= p);
    Ok(out)
}

/// Conditional expectation of the children of `node`.
pub fn conditional_mean(field: &AdaptedField, node: usize) -> SpatialField {
    let (up, down) = ScenarioTree::children(node);
    field.node(up).iter().zip(field.node(down)).map(|(u, d)| 0.5 * (u + d)).collect()
}

/// Exact two-point representation `X = E[X] + Z * dW`.
pub fn martingale_coefficient(child_up: &[f64], child_down: &[f64], dt: f64) -> SpatialField {
    let denom = 2.0 * dt.sqrt();
    child_up.iter().zip(child_down).map(|(u, d)| (u - d) / denom).collect()
}

/// Low-mode spatial profile used by all random generators.
#[derive(Debug, Clone)]
struct ModeProfile {
    coeffs: Vec<f64>,
    phases: Vec<f64>,
}

impl ModeProfile {
    fn random(rng: &mut ChaCha8Rng, modes: usize) -> Self {
        Self {
            coeffs: (0..modes).map(|_| rng.random_range(-1.0..1.0)).collect(),
            phases: (0..modes).map(|_| rng.random_range(0.0..std::f64::consts::TAU)).collect(),
        }
    }

    fn eval(&self, s: f64, t: f64) -> f64 {
        self.coeffs
            .iter()
            .zip(&self.phases)
            .enumerate()
            .map(|(j, (c, ph))| {
                let k = (j + 1) as f64;
                c * (k * std::f64::consts::PI * s).sin() * (ph + k * t).cos()
            })
            .sum::<f64>()
            / self.coeffs.len() as f64
    }
}

/// Elliptic coefficient `a(node, x) = clamp(base(x) + roughness * s(path, x), c0, c1)`.
///
/// `base` is a seed-dependent smooth profile inside `[c0, c1]`; `s` is a
/// bounded smooth functional of the path prefix (through the Brownian
/// value at the node) built from low trigonometric modes.
pub fn sample_adapted_coefficients(
    tree: &ScenarioTree,
    mesh: &SpatialMesh,
    seed: u64,
    c0: f64,
    c1: f64,
    roughness: f64,
) -> Result<AdaptedField> {
    if !(c0 > 0.0 && c0 < c1) {
        return Err(Error::Config(format!("need 0 < c0 < c1, got c0 = {c0}, c1 = {c1}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let tilt: f64 = rng.random_range(-0.2..0.2);
    let profile = ModeProfile::random(&mut rng, 3);
    let mid = 0.5 * (c0 + c1);
    let half = 0.5 * (c1 - c0);
    let len = mesh.b_end - mesh.a_end;
    let base = |s: f64| mid + half * (0.3 * (std::f64::consts::TAU * s + phase).cos() + tilt * s);
    let mut out = AdaptedField::zeros(tree, mesh.m);
    for node in 0..tree.node_count() {
        let w = tree.brownian(node);
        let t = tree.time(ScenarioTree::depth_of(node));
        let values = out.node_mut(node);
        for (i, v) in values.iter_mut().enumerate() {
            let s = (mesh.x(i) - mesh.a_end) / len;
            let noise = (3.0 * w).tanh() * profile.eval(s, t) * 3.0;
            *v = (base(s) + roughness * half * noise).clamp(c0, c1);
        }
    }
    Ok(out)
}

/// Random smooth adapted field: at every node an independent low-mode
/// profile times `amplitude`, optionally restricted to a mask.
pub fn sample_adapted_field(
    tree: &ScenarioTree,
    mesh: &SpatialMesh,
    rng: &mut ChaCha8Rng,
    amplitude: f64,
) -> AdaptedField {
    let mut out = AdaptedField::zeros(tree, mesh.m);
    let len = mesh.b_end - mesh.a_end;
    for node in 0..tree.node_count() {
        let profile = ModeProfile::random(rng, 4);
        let t = tree.time(ScenarioTree::depth_of(node));
        for (i, v) in out.node_mut(node).iter_mut().enumerate() {
            *v = amplitude * 2.0 * profile.eval((mesh.x(i) - mesh.a_end) / len, t);
        }
    }
    out
}

/// Random smooth spatial field (vanishing at the boundary).
pub fn sample_spatial_field(mesh: &SpatialMesh, rng: &mut ChaCha8Rng, amplitude: f64) -> SpatialField {
    let profile = ModeProfile::random(rng, 4);
    let len = mesh.b_end - mesh.a_end;
    mesh.sample(|x| amplitude * 2.0 * profile.eval((x - mesh.a_end) / len, 0.0))
}

/// Audits adaptedness of a solver output by recomputing every node's
/// children from the node's own stored value with `step(parent, value, child)`.
/// Checking each edge is equivalent to recomputing every subtree from its
/// root, by induction on depth.
pub fn measurability_probe<F>(field: &AdaptedField, tree: &ScenarioTree, tol: f64, step: F) -> bool
where
    F: Fn(usize, &[f64], usize) -> SpatialField,
{
    for node in 0..tree.interior_count() {
        let (up, down) = ScenarioTree::children(node);
        for child in [up, down] {
            let recomputed = step(node, field.node(node), child);
            let stored = field.node(child);
            let scale = stored.iter().fold(1.0f64, |a, v| a.max(v.abs()));
            if recomputed.iter().zip(stored).any(|(r, s)| (r - s).abs() > tol * scale) {
                return false;
            }
        }
    }
    true
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tree_sizes() {
        let t = ScenarioTree::new(3, 0.5).unwrap();
        assert_eq!(t.node_count(), 15);
        assert!((t.dt - 1.0 / 6.0).abs() < 1e-15);
        let t1 = ScenarioTree::new(1, 0.5).unwrap();
        assert_eq!(t1.node_count(), 3);
        assert_eq!(t1.increment(1), 0.5f64.sqrt());
        assert_eq!(t1.increment(2), -(0.5f64.sqrt()));
        let quarter = ScenarioTree::new(1, 0.25).unwrap();
        assert_eq!(quarter.increment(1), 0.5);
        assert!(ScenarioTree::new(20, 0.5).is_err());
        assert!(ScenarioTree::new(0, 0.5).is_err());
        assert!(ScenarioTree::new(4, 1.0).is_err());
    }

    #[test]
    fn indexing_helpers() {
        assert_eq!(ScenarioTree::depth_of(0), 0);
        assert_eq!(ScenarioTree::depth_of(1), 1);
        assert_eq!(ScenarioTree::depth_of(2), 1);
        assert_eq!(ScenarioTree::depth_of(6), 2);
        assert_eq!(ScenarioTree::depth_of(7), 3);
        assert_eq!(ScenarioTree::path(0), "");
        assert_eq!(ScenarioTree::path(1), "u");
        assert_eq!(ScenarioTree::path(5), "du");
        let t = ScenarioTree::new(4, 0.5).unwrap();
        assert_eq!(t.depth_range(2), 3..7);
    }

    #[test]
    fn increments_have_exact_moments() {
        let t = ScenarioTree::new(5, 0.4).unwrap();
        let up = t.increment(1);
        let down = t.increment(2);
        assert_eq!(0.5 * up + 0.5 * down, 0.0);
        assert!((0.5 * up * up + 0.5 * down * down - t.dt).abs() < 1e-16);
        let total: f64 = t.depth_range(t.n_steps).map(|_| ScenarioTree::probability(t.n_steps)).sum();
        assert_eq!(total, 1.0);
    }

    #[test]
    fn expectation_examples() {
        let t = ScenarioTree::new(3, 0.5).unwrap();
        let c = AdaptedField::constant(&t, &[2.5, -1.0]);
        for d in 0..=3 {
            assert_eq!(expectation(&c, &t, d).unwrap(), vec![2.5, -1.0]);
        }
        let mut f = AdaptedField::zeros(&t, 1);
        f.node_mut(1)[0] = 3.0;
        f.node_mut(2)[0] = 5.0;
        assert_eq!(expectation(&f, &t, 1).unwrap(), vec![4.0]);
        assert!(expectation(&f, &t, 4).is_err());
    }

    #[test]
    fn brownian_path_has_zero_mean() {
        let t = ScenarioTree::new(6, 0.5).unwrap();
        let w = AdaptedField::from_fn(&t, 1, |node, _| t.brownian(node));
        for d in 0..=t.n_steps {
            // brute force over the leaves below each depth-d node
            let mut acc = 0.0;
            for leaf in t.depth_range(t.n_steps) {
                let mut k = leaf;
                while ScenarioTree::depth_of(k) > d {
                    k = ScenarioTree::parent(k).unwrap();
                }
                acc += w.node(k)[0];
            }
            assert!(acc.abs() < 1e-12);
            assert!(expectation(&w, &t, d).unwrap()[0].abs() < 1e-15);
        }
    }

    #[test]
    fn martingale_coefficient_examples() {
        assert_eq!(martingale_coefficient(&[2.0], &[0.0], 0.01), vec![10.0]);
        assert_eq!(martingale_coefficient(&[1.5], &[1.5], 0.01), vec![0.0]);
        let dt: f64 = 0.037;
        let up = [1.25, -0.5];
        let down = [0.75, 2.0];
        let z = martingale_coefficient(&up, &down, dt);
        for i in 0..2 {
            let mean = 0.5 * (up[i] + down[i]);
            assert!((mean + z[i] * dt.sqrt() - up[i]).abs() < 1e-15);
            assert!((mean - z[i] * dt.sqrt() - down[i]).abs() < 1e-15);
        }
    }

    #[test]
    fn coefficients_respect_bounds() {
        let t = ScenarioTree::new(5, 0.5).unwrap();
        let mesh = SpatialMesh::new(0.0, 1.0, 21, (0.2, 0.6), (0.3, 0.5)).unwrap();
        let a = sample_adapted_coefficients(&t, &mesh, 7, 0.5, 2.0, 1.0).unwrap();
        assert!(a.as_slice().iter().all(|&v| (0.5..=2.0).contains(&v)));
        let b = sample_adapted_coefficients(&t, &mesh, 8, 0.5, 2.0, 1.0).unwrap();
        assert_ne!(a, b);
        assert!(b.as_slice().iter().all(|&v| v >= 0.5));

        let det = sample_adapted_coefficients(&t, &mesh, 7, 0.5, 2.0, 0.0).unwrap();
        for d in 0..=t.n_steps {
            let first = det.node(t.depth_range(d).start).to_vec();
            for node in t.depth_range(d) {
                assert_eq!(det.node(node), &first[..]);
            }
        }
        assert!(sample_adapted_coefficients(&t, &mesh, 7, 2.0, 1.0, 0.0).is_err());
    }

    #[test]
    fn probe_accepts_constant_and_rejects_future_dependence() {
        let t = ScenarioTree::new(4, 0.5).unwrap();
        let c = AdaptedField::constant(&t, &[1.0, 2.0, 3.0]);
        let identity = |_p: usize, v: &[f64], _c: usize| v.to_vec();
        assert!(measurability_probe(&c, &t, 1e-12, identity));

        // random walk X_child = X_parent + dW is adapted under its own step map
        let walk = AdaptedField::from_fn(&t, 1, |node, _| t.brownian(node));
        let step = |_p: usize, v: &[f64], c: usize| vec![v[0] + t.increment(c)];
        assert!(measurability_probe(&walk, &t, 1e-12, step));

        // overwrite an ancestor with data read from one of its leaves
        let mut bad = walk.clone();
        let leaf = t.depth_range(t.n_steps).start;
        let leaf_value = bad.node(leaf)[0];
        bad.node_mut(1)[0] = leaf_value;
        assert!(!measurability_probe(&bad, &t, 1e-12, step));
    }
}
