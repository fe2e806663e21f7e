//! Forward and backward SPDE integrators on the scenario tree.
//!
//! Both schemes share one step per tree edge: the diffusion is treated by
//! a theta-scheme frozen at the parent node, lower-order terms and sources
//! are explicit at the parent. Every solver has an exact reverse-mode
//! transpose, so discrete duality identities hold to rounding.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::mesh::{DiffusionOperator, SpatialField, SpatialMesh};
use crate::scenario::{AdaptedField, ScenarioTree};

/// Adapted coefficients of the linear part.
#[derive(Debug, Clone)]
pub struct Coefficients {
    /// Elliptic coefficient, `>= c0` everywhere.
    pub diffusion: AdaptedField,
    pub c0: f64,
    /// First-order coefficient multiplying the gradient.
    pub drift: Option<AdaptedField>,
    /// Zeroth-order coefficient.
    pub reaction: Option<AdaptedField>,
    /// Coefficient of the martingale component (backward equations only).
    pub coupling: Option<AdaptedField>,
}

impl Coefficients {
    pub fn heat(tree: &ScenarioTree, mesh: &SpatialMesh, a: f64) -> Self {
        Self {
            diffusion: AdaptedField::constant(tree, &vec![a; mesh.m]),
            c0: a,
            drift: None,
            reaction: None,
            coupling: None,
        }
    }

    pub fn with_diffusion(diffusion: AdaptedField, c0: f64) -> Self {
        Self { diffusion, c0, drift: None, reaction: None, coupling: None }
    }

    fn validate(&self, tree: &ScenarioTree, mesh: &SpatialMesh) -> Result<()> {
        self.diffusion.matches(tree, mesh.m)?;
        for f in [&self.drift, &self.reaction, &self.coupling].into_iter().flatten() {
            f.matches(tree, mesh.m)?;
            if !f.is_finite() {
                return Err(Error::Config("non-finite lower-order coefficient".into()));
            }
        }
        Ok(())
    }

    /// Guard on the explicit lower-order part:
    /// `dt * (drift_max^2 / a_min + reaction_max) <= 2`.
    fn stability_check(&self, dt: f64) -> Result<()> {
        let drift = self.drift.as_ref().map_or(0.0, AdaptedField::max_abs);
        let reaction = self.reaction.as_ref().map_or(0.0, AdaptedField::max_abs);
        let a_min = self.diffusion.as_slice().iter().copied().fold(f64::INFINITY, f64::min);
        let transport = if drift == 0.0 { 0.0 } else { drift * drift / a_min };
        let bound = dt * (transport + reaction);
        if !(bound <= 2.0) {
            return Err(Error::Stability(format!(
                "dt*(|drift|^2/a_min + |reaction|) = {bound:.3} exceeds 2; refine the tree"
            )));
        }
        Ok(())
    }
}

/// Per-node frozen operators shared by all solves on one coefficient set.
#[derive(Debug, Clone)]
pub struct Stepper {
    pub tree: ScenarioTree,
    pub mesh: SpatialMesh,
    pub coeffs: Coefficients,
    /// Weight of the implicit part of the diffusion, in `[1/2, 1]`.
    pub implicitness: f64,
    ops: Vec<DiffusionOperator>,
}

impl Stepper {
    pub fn new(tree: &ScenarioTree, mesh: &SpatialMesh, coeffs: Coefficients, implicitness: f64) -> Result<Self> {
        if !(0.5..=1.0).contains(&implicitness) {
            return Err(Error::Config(format!("implicitness must lie in [0.5, 1], got {implicitness}")));
        }
        coeffs.validate(tree, mesh)?;
        coeffs.stability_check(tree.dt)?;
        let ops = (0..tree.interior_count())
            .map(|p| DiffusionOperator::new(mesh, coeffs.diffusion.node(p), coeffs.c0))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { tree: *tree, mesh: mesh.clone(), coeffs, implicitness, ops })
    }

    fn m(&self) -> usize {
        self.mesh.m
    }

    /// `out = (I + (1 - theta) dt D_p) v`.
    fn explicit_diffusion(&self, p: usize, v: &[f64], out: &mut [f64]) {
        let s = (1.0 - self.implicitness) * self.tree.dt;
        if s == 0.0 {
            out.copy_from_slice(v);
        } else {
            self.ops[p].shifted_apply_into(s, v, out);
        }
    }

    /// In place `v <- (I - theta dt D_p)^-1 v`.
    fn implicit_solve(&self, p: usize, v: &mut [f64], scratch: &mut Vec<f64>) {
        self.ops[p].solve_shifted(self.implicitness * self.tree.dt, v, scratch);
    }

    /// `out += scale * K_p v` with `K = drift * grad + reaction`.
    fn lower_order_add(&self, p: usize, v: &[f64], scale: f64, out: &mut [f64], grad: &mut [f64]) {
        if let Some(drift) = &self.coeffs.drift {
            self.mesh.gradient_into(v, grad);
            for ((o, d), g) in out.iter_mut().zip(drift.node(p)).zip(grad.iter()) {
                *o += scale * d * g;
            }
        }
        if let Some(reaction) = &self.coeffs.reaction {
            for ((o, r), x) in out.iter_mut().zip(reaction.node(p)).zip(v) {
                *o += scale * r * x;
            }
        }
    }

    /// `out += scale * K_p^T v` (Euclidean transpose).
    fn lower_order_transpose_add(&self, p: usize, v: &[f64], scale: f64, out: &mut [f64], tmp: &mut [f64]) {
        if let Some(drift) = &self.coeffs.drift {
            for ((t, d), x) in tmp.iter_mut().zip(drift.node(p)).zip(v) {
                *t = d * x;
            }
            self.mesh.gradient_transpose_add(tmp, scale, out);
        }
        if let Some(reaction) = &self.coeffs.reaction {
            for ((o, r), x) in out.iter_mut().zip(reaction.node(p)).zip(v) {
                *o += scale * r * x;
            }
        }
    }

    /// Combined forcing `source + div(flux) + 1_ctrl * control` at every
    /// non-leaf node.
    pub fn forcing(
        &self,
        source: Option<&AdaptedField>,
        flux: Option<&AdaptedField>,
        control: Option<&AdaptedField>,
    ) -> Result<AdaptedField> {
        let m = self.m();
        let mut out = AdaptedField::zeros(&self.tree, m);
        let mut grad = vec![0.0; m];
        for f in [source, flux, control].into_iter().flatten() {
            f.matches(&self.tree, m)?;
        }
        for p in 0..self.tree.interior_count() {
            let o = out.node_mut(p);
            if let Some(s) = source {
                o.copy_from_slice(s.node(p));
            }
            if let Some(b) = flux {
                self.mesh.gradient_into(b.node(p), &mut grad);
                o.iter_mut().zip(&grad).for_each(|(x, g)| *x += g);
            }
            if let Some(u) = control {
                for ((x, v), &keep) in o.iter_mut().zip(u.node(p)).zip(&self.mesh.ctrl_mask) {
                    if keep {
                        *x += v;
                    }
                }
            }
        }
        Ok(out)
    }

    /// One forward step from `p` into `child`.
    pub fn forward_step(
        &self,
        p: usize,
        z_parent: &[f64],
        child: usize,
        forcing: &AdaptedField,
        noise: Option<&AdaptedField>,
    ) -> SpatialField {
        let m = self.m();
        let mut out = vec![0.0; m];
        let mut grad = vec![0.0; m];
        let mut scratch = Vec::new();
        self.forward_mean(p, z_parent, forcing, &mut out, &mut grad, &mut scratch);
        if let Some(g) = noise {
            let dw = self.tree.increment(child);
            out.iter_mut().zip(g.node(p)).for_each(|(o, gi)| *o += gi * dw);
        }
        out
    }

    fn forward_mean(
        &self,
        p: usize,
        z: &[f64],
        forcing: &AdaptedField,
        out: &mut [f64],
        grad: &mut [f64],
        scratch: &mut Vec<f64>,
    ) {
        let dt = self.tree.dt;
        self.explicit_diffusion(p, z, out);
        self.lower_order_add(p, z, dt, out, grad);
        out.iter_mut().zip(forcing.node(p)).for_each(|(o, f)| *o += dt * f);
        self.implicit_solve(p, out, scratch);
    }

    /// Forward solve: `z(0) = z0`, drift forcing `f` and noise `g` at
    /// the non-leaf nodes.
    pub fn solve_forward(&self, z0: &[f64], forcing: &AdaptedField, noise: Option<&AdaptedField>) -> Result<AdaptedField> {
        let m = self.m();
        self.mesh.check(z0)?;
        forcing.matches(&self.tree, m)?;
        if let Some(g) = noise {
            g.matches(&self.tree, m)?;
        }
        let mut z = AdaptedField::zeros(&self.tree, m);
        z.node_mut(0).copy_from_slice(z0);
        let sqrt_dt = self.tree.sqrt_dt;
        for depth in 0..self.tree.n_steps {
            let parents = self.tree.depth_range(depth);
            let split = parents.end * m;
            let (done, rest) = z.as_mut_slice().split_at_mut(split);
            let children = &mut rest[..2 * parents.len() * m];
            let body = |(j, pair): (usize, &mut [f64])| {
                let p = parents.start + j;
                let zp = &done[p * m..(p + 1) * m];
                let (up, down) = pair.split_at_mut(m);
                let mut grad = vec![0.0; m];
                let mut scratch = Vec::new();
                self.forward_mean(p, zp, forcing, up, &mut grad, &mut scratch);
                down.copy_from_slice(up);
                if let Some(g) = noise {
                    for ((u, d), gi) in up.iter_mut().zip(down.iter_mut()).zip(g.node(p)) {
                        *u += gi * sqrt_dt;
                        *d -= gi * sqrt_dt;
                    }
                }
            };
            if parents.len() >= PAR_THRESHOLD {
                children.par_chunks_mut(2 * m).enumerate().for_each(body);
            } else {
                children.chunks_mut(2 * m).enumerate().for_each(body);
            }
        }
        Ok(z)
    }

    /// Transpose of [`Self::solve_forward`]: given a cotangent on every
    /// node of `z`, returns cotangents on `(z0, forcing, noise)`.
    pub fn forward_transpose(&self, seed: &AdaptedField) -> Result<ForwardCotangent> {
        let m = self.m();
        seed.matches(&self.tree, m)?;
        let dt = self.tree.dt;
        let sqrt_dt = self.tree.sqrt_dt;
        let mut bar = seed.clone();
        let mut forcing = AdaptedField::zeros(&self.tree, m);
        let mut noise = AdaptedField::zeros(&self.tree, m);
        for depth in (0..self.tree.n_steps).rev() {
            let parents = self.tree.depth_range(depth);
            let split = parents.end * m;
            let (head, rest) = bar.as_mut_slice().split_at_mut(split);
            let children = &rest[..2 * parents.len() * m];
            let level = &mut head[parents.start * m..];
            let f_level = &mut forcing.as_mut_slice()[parents.start * m..parents.end * m];
            let g_level = &mut noise.as_mut_slice()[parents.start * m..parents.end * m];
            let body = |(j, ((zb, fb), gb)): (usize, ((&mut [f64], &mut [f64]), &mut [f64]))| {
                let p = parents.start + j;
                let up = &children[2 * j * m..(2 * j + 1) * m];
                let down = &children[(2 * j + 1) * m..(2 * j + 2) * m];
                let mut q: Vec<f64> = up.iter().zip(down).map(|(a, b)| a + b).collect();
                for ((gi, a), b) in gb.iter_mut().zip(up).zip(down) {
                    *gi = sqrt_dt * (a - b);
                }
                let mut scratch = Vec::new();
                self.implicit_solve(p, &mut q, &mut scratch);
                fb.iter_mut().zip(&q).for_each(|(f, v)| *f = dt * v);
                let mut tmp = vec![0.0; m];
                self.explicit_diffusion(p, &q, &mut tmp);
                let mut work = vec![0.0; m];
                self.lower_order_transpose_add(p, &q, dt, &mut tmp, &mut work);
                zb.iter_mut().zip(&tmp).for_each(|(z, t)| *z += t);
            };
            if parents.len() >= PAR_THRESHOLD {
                level
                    .par_chunks_mut(m)
                    .zip(f_level.par_chunks_mut(m))
                    .zip(g_level.par_chunks_mut(m))
                    .enumerate()
                    .for_each(body);
            } else {
                level.chunks_mut(m).zip(f_level.chunks_mut(m)).zip(g_level.chunks_mut(m)).enumerate().for_each(body);
            }
        }
        Ok(ForwardCotangent { initial: bar.node(0).to_vec(), forcing, noise })
    }

    /// Backward solve from leaf values `terminal` with forcing at the
    /// non-leaf nodes.
    pub fn solve_backward(&self, terminal: &AdaptedField, forcing: &AdaptedField) -> Result<StatePair> {
        let m = self.m();
        terminal.matches(&self.tree, m)?;
        forcing.matches(&self.tree, m)?;
        let mut state = AdaptedField::zeros(&self.tree, m);
        let mut martingale = AdaptedField::zeros(&self.tree, m);
        let leaves = self.tree.depth_range(self.tree.n_steps);
        state.as_mut_slice()[leaves.start * m..].copy_from_slice(&terminal.as_slice()[leaves.start * m..]);
        let dt = self.tree.dt;
        let denom = 2.0 * self.tree.sqrt_dt;
        for depth in (0..self.tree.n_steps).rev() {
            let parents = self.tree.depth_range(depth);
            let split = parents.end * m;
            let (head, rest) = state.as_mut_slice().split_at_mut(split);
            let children = &rest[..2 * parents.len() * m];
            let level = &mut head[parents.start * m..];
            let y_level = &mut martingale.as_mut_slice()[parents.start * m..parents.end * m];
            let body = |(j, (yp, mart)): (usize, (&mut [f64], &mut [f64]))| {
                let p = parents.start + j;
                let up = &children[2 * j * m..(2 * j + 1) * m];
                let down = &children[(2 * j + 1) * m..(2 * j + 2) * m];
                let mean: Vec<f64> = up.iter().zip(down).map(|(a, b)| 0.5 * (a + b)).collect();
                for ((z, a), b) in mart.iter_mut().zip(up).zip(down) {
                    *z = (a - b) / denom;
                }
                let mut grad = vec![0.0; m];
                self.explicit_diffusion(p, &mean, yp);
                self.lower_order_add(p, &mean, -dt, yp, &mut grad);
                if let Some(c) = &self.coeffs.coupling {
                    for ((o, ci), z) in yp.iter_mut().zip(c.node(p)).zip(mart.iter()) {
                        *o -= dt * ci * z;
                    }
                }
                yp.iter_mut().zip(forcing.node(p)).for_each(|(o, f)| *o -= dt * f);
                let mut scratch = Vec::new();
                self.implicit_solve(p, yp, &mut scratch);
            };
            if parents.len() >= PAR_THRESHOLD {
                level.par_chunks_mut(m).zip(y_level.par_chunks_mut(m)).enumerate().for_each(body);
            } else {
                level.chunks_mut(m).zip(y_level.chunks_mut(m)).enumerate().for_each(body);
            }
        }
        Ok(StatePair { state, martingale })
    }

    /// Transpose of [`Self::solve_backward`]: cotangents on `state` (all
    /// nodes) and `martingale` (non-leaf nodes) to cotangents on the
    /// forcing (non-leaf nodes) and the terminal values (leaves).
    pub fn backward_transpose(&self, seed_state: &AdaptedField, seed_martingale: &AdaptedField) -> Result<BackwardCotangent> {
        let m = self.m();
        seed_state.matches(&self.tree, m)?;
        seed_martingale.matches(&self.tree, m)?;
        let dt = self.tree.dt;
        let inv = 0.5 / self.tree.sqrt_dt;
        let mut bar = seed_state.clone();
        let mut forcing = AdaptedField::zeros(&self.tree, m);
        for depth in 0..self.tree.n_steps {
            let parents = self.tree.depth_range(depth);
            let split = parents.end * m;
            let (head, rest) = bar.as_mut_slice().split_at_mut(split);
            let children = &mut rest[..2 * parents.len() * m];
            let level = &head[parents.start * m..];
            let f_level = &mut forcing.as_mut_slice()[parents.start * m..parents.end * m];
            let body = |(j, (pair, fb)): (usize, (&mut [f64], &mut [f64]))| {
                let p = parents.start + j;
                let mut q = level[j * m..(j + 1) * m].to_vec();
                let mut scratch = Vec::new();
                self.implicit_solve(p, &mut q, &mut scratch);
                fb.iter_mut().zip(&q).for_each(|(f, v)| *f = -dt * v);
                let mut mean_bar = vec![0.0; m];
                self.explicit_diffusion(p, &q, &mut mean_bar);
                let mut work = vec![0.0; m];
                self.lower_order_transpose_add(p, &q, -dt, &mut mean_bar, &mut work);
                let mut mart_bar = seed_martingale.node(p).to_vec();
                if let Some(c) = &self.coeffs.coupling {
                    for ((z, ci), qi) in mart_bar.iter_mut().zip(c.node(p)).zip(&q) {
                        *z -= dt * ci * qi;
                    }
                }
                let (up, down) = pair.split_at_mut(m);
                for i in 0..m {
                    up[i] += 0.5 * mean_bar[i] + inv * mart_bar[i];
                    down[i] += 0.5 * mean_bar[i] - inv * mart_bar[i];
                }
            };
            if parents.len() >= PAR_THRESHOLD {
                children.par_chunks_mut(2 * m).zip(f_level.par_chunks_mut(m)).enumerate().for_each(body);
            } else {
                children.chunks_mut(2 * m).zip(f_level.chunks_mut(m)).enumerate().for_each(body);
            }
        }
        let leaves = self.tree.depth_range(self.tree.n_steps);
        let mut terminal = AdaptedField::zeros(&self.tree, m);
        terminal.as_mut_slice()[leaves.start * m..].copy_from_slice(&bar.as_slice()[leaves.start * m..]);
        Ok(BackwardCotangent { forcing, terminal })
    }
}

/// Levels with at least this many nodes are processed on the thread pool.
const PAR_THRESHOLD: usize = 64;

#[derive(Debug, Clone)]
pub struct ForwardCotangent {
    pub initial: SpatialField,
    pub forcing: AdaptedField,
    pub noise: AdaptedField,
}

#[derive(Debug, Clone)]
pub struct BackwardCotangent {
    pub forcing: AdaptedField,
    pub terminal: AdaptedField,
}

/// Solution `(y, Y)` of a backward equation; `martingale` is zero at the leaves.
#[derive(Debug, Clone, PartialEq)]
pub struct StatePair {
    pub state: AdaptedField,
    pub martingale: AdaptedField,
}

#[derive(Debug, Clone)]
pub struct ForwardProblem {
    pub coeffs: Coefficients,
    pub source: Option<AdaptedField>,
    pub flux: Option<AdaptedField>,
    pub noise: Option<AdaptedField>,
    pub initial: SpatialField,
}

#[derive(Debug, Clone)]
pub struct BackwardProblem {
    pub coeffs: Coefficients,
    pub source: Option<AdaptedField>,
    pub flux: Option<AdaptedField>,
    /// Leaf values; entries at other nodes are ignored.
    pub terminal: AdaptedField,
}

pub fn solve_forward(
    problem: &ForwardProblem,
    control: Option<&AdaptedField>,
    tree: &ScenarioTree,
    mesh: &SpatialMesh,
    implicitness: f64,
) -> Result<AdaptedField> {
    let stepper = Stepper::new(tree, mesh, problem.coeffs.clone(), implicitness)?;
    let forcing = stepper.forcing(problem.source.as_ref(), problem.flux.as_ref(), control)?;
    stepper.solve_forward(&problem.initial, &forcing, problem.noise.as_ref())
}

pub fn solve_backward(
    problem: &BackwardProblem,
    control: Option<&AdaptedField>,
    tree: &ScenarioTree,
    mesh: &SpatialMesh,
    implicitness: f64,
) -> Result<StatePair> {
    let stepper = Stepper::new(tree, mesh, problem.coeffs.clone(), implicitness)?;
    let forcing = stepper.forcing(problem.source.as_ref(), problem.flux.as_ref(), control)?;
    stepper.solve_backward(&problem.terminal, &forcing)
}

/// Probability times time step for every non-leaf node, times `h`.
pub fn interior_quadrature(tree: &ScenarioTree, mesh: &SpatialMesh) -> Vec<f64> {
    (0..tree.interior_count())
        .map(|p| ScenarioTree::probability(ScenarioTree::depth_of(p)) * tree.dt * mesh.h)
        .collect()
}

/// Adjoint of the control-to-state map `u -> y(u)` (zero terminal data,
/// zero sources) of the backward solver, in the inner product
/// `E sum_k dt h <., .>` on non-leaf nodes for both control and state.
pub fn apply_adjoint(stepper: &Stepper, w: &AdaptedField) -> Result<AdaptedField> {
    let m = stepper.mesh.m;
    w.matches(&stepper.tree, m)?;
    let weights = interior_quadrature(&stepper.tree, &stepper.mesh);
    let mut seed = AdaptedField::zeros(&stepper.tree, m);
    for (p, &wt) in weights.iter().enumerate() {
        seed.node_mut(p).iter_mut().zip(w.node(p)).for_each(|(s, v)| *s = wt * v);
    }
    let zero = AdaptedField::zeros(&stepper.tree, m);
    let cot = stepper.backward_transpose(&seed, &zero)?;
    let mut out = AdaptedField::zeros(&stepper.tree, m);
    for (p, &wt) in weights.iter().enumerate() {
        for ((o, v), &keep) in out.node_mut(p).iter_mut().zip(cot.forcing.node(p)).zip(&stepper.mesh.ctrl_mask) {
            *o = if keep { v / wt } else { 0.0 };
        }
    }
    Ok(out)
}

/// Control-to-state map matching [`apply_adjoint`]: state at non-leaf nodes.
pub fn apply_control_to_state(stepper: &Stepper, u: &AdaptedField) -> Result<AdaptedField> {
    let m = stepper.mesh.m;
    let forcing = stepper.forcing(None, None, Some(u))?;
    let zero = AdaptedField::zeros(&stepper.tree, m);
    let mut y = stepper.solve_backward(&zero, &forcing)?.state;
    let leaves = stepper.tree.depth_range(stepper.tree.n_steps);
    y.as_mut_slice()[leaves.start * m..].iter_mut().for_each(|v| *v = 0.0);
    Ok(y)
}

/// `E sum_k dt h <u, v>` over non-leaf nodes.
pub fn interior_inner(tree: &ScenarioTree, mesh: &SpatialMesh, u: &AdaptedField, v: &AdaptedField) -> f64 {
    interior_quadrature(tree, mesh)
        .iter()
        .enumerate()
        .map(|(p, w)| w * u.node(p).iter().zip(v.node(p)).map(|(a, b)| a * b).sum::<f64>())
        .sum()
}

/// Relative discrepancy `|<S u, w> - <u, S* w>| / (|<S u, w>| + |<u, S* w>|)`.
pub fn dot_product_test(stepper: &Stepper, u: &AdaptedField, w: &AdaptedField) -> Result<f64> {
    let mut u = u.clone();
    u.restrict(&stepper.mesh.ctrl_mask);
    let su = apply_control_to_state(stepper, &u)?;
    let sw = apply_adjoint(stepper, w)?;
    let lhs = interior_inner(&stepper.tree, &stepper.mesh, &su, w);
    let rhs = interior_inner(&stepper.tree, &stepper.mesh, &u, &sw);
    let scale = lhs.abs() + rhs.abs();
    Ok(if scale == 0.0 { 0.0 } else { (lhs - rhs).abs() / scale })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::{expectation, martingale_coefficient, sample_adapted_coefficients, sample_adapted_field};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(m: usize, n: usize) -> (ScenarioTree, SpatialMesh) {
        (
            ScenarioTree::new(n, 0.5).unwrap(),
            SpatialMesh::new(0.0, 1.0, m, (0.2, 0.6), (0.3, 0.5)).unwrap(),
        )
    }

    fn rough_coeffs(tree: &ScenarioTree, mesh: &SpatialMesh, seed: u64) -> Coefficients {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Coefficients {
            diffusion: sample_adapted_coefficients(tree, mesh, seed, 0.5, 2.0, 1.0).unwrap(),
            c0: 0.5,
            drift: Some(sample_adapted_field(tree, mesh, &mut rng, 1.0)),
            reaction: Some(sample_adapted_field(tree, mesh, &mut rng, 1.0)),
            coupling: Some(sample_adapted_field(tree, mesh, &mut rng, 1.0)),
        }
    }

    #[test]
    fn zero_data_gives_zero() {
        let (tree, mesh) = setup(11, 4);
        let st = Stepper::new(&tree, &mesh, rough_coeffs(&tree, &mesh, 1), 1.0).unwrap();
        let zero = AdaptedField::zeros(&tree, mesh.m);
        assert!(st.solve_forward(&mesh.zeros(), &zero, Some(&zero)).unwrap().is_zero());
        let pair = st.solve_backward(&zero, &zero).unwrap();
        assert!(pair.state.is_zero() && pair.martingale.is_zero());
    }

    #[test]
    fn heat_equation_matches_closed_form() {
        let (tree, mesh) = setup(99, 8);
        let z0 = mesh.sample(|x| (std::f64::consts::PI * x).sin());
        let zero = AdaptedField::zeros(&tree, mesh.m);
        let pi2 = std::f64::consts::PI.powi(2);
        for (theta, all_nodes) in [(0.5, true), (1.0, false)] {
            let st = Stepper::new(&tree, &mesh, Coefficients::heat(&tree, &mesh, 1.0), theta).unwrap();
            let z = st.solve_forward(&z0, &zero, None).unwrap();
            let depths: Vec<usize> = if all_nodes { (0..=tree.n_steps).collect() } else { vec![tree.n_steps] };
            for d in depths {
                let t = tree.time(d);
                for node in tree.depth_range(d) {
                    for i in 0..mesh.m {
                        let exact = (-pi2 * t).exp() * (std::f64::consts::PI * mesh.x(i)).sin();
                        assert!((z.node(node)[i] - exact).abs() < 2e-2, "theta={theta} d={d}");
                    }
                }
            }
        }
    }

    #[test]
    fn forward_is_affine() {
        let (tree, mesh) = setup(15, 4);
        let st = Stepper::new(&tree, &mesh, rough_coeffs(&tree, &mesh, 2), 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f1 = sample_adapted_field(&tree, &mesh, &mut rng, 1.0);
        let f2 = sample_adapted_field(&tree, &mesh, &mut rng, 1.0);
        let g1 = sample_adapted_field(&tree, &mesh, &mut rng, 1.0);
        let z1 = mesh.sample(|x| x * (1.0 - x));
        let a = st.solve_forward(&z1, &f1, Some(&g1)).unwrap();
        let b = st.solve_forward(&mesh.zeros(), &f2, None).unwrap();
        let mut sum_f = f1.clone();
        sum_f.axpy(1.0, &f2);
        let c = st.solve_forward(&z1, &sum_f, Some(&g1)).unwrap();
        let mut ab = a.clone();
        ab.axpy(1.0, &b);
        ab.axpy(-1.0, &c);
        assert!(ab.max_abs() < 1e-12);
    }

    #[test]
    fn pure_martingale_backward_solve() {
        let (tree, mesh) = setup(7, 4);
        let coeffs = Coefficients::with_diffusion(AdaptedField::zeros(&tree, mesh.m), 0.0);
        let st = Stepper::new(&tree, &mesh, coeffs, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let terminal = sample_adapted_field(&tree, &mesh, &mut rng, 1.0);
        let zero = AdaptedField::zeros(&tree, mesh.m);
        let pair = st.solve_backward(&terminal, &zero).unwrap();
        for p in 0..tree.interior_count() {
            // brute force over the leaves below p
            let d = ScenarioTree::depth_of(p);
            let span = 1usize << (tree.n_steps - d);
            let first_leaf = ((p + 1) << (tree.n_steps - d)) - 1;
            let mut mean = vec![0.0; mesh.m];
            for leaf in first_leaf..first_leaf + span {
                for i in 0..mesh.m {
                    mean[i] += terminal.node(leaf)[i] / span as f64;
                }
            }
            for i in 0..mesh.m {
                assert!((pair.state.node(p)[i] - mean[i]).abs() < 1e-13);
            }
            let (u, dn) = ScenarioTree::children(p);
            let z = martingale_coefficient(pair.state.node(u), pair.state.node(dn), tree.dt);
            assert_eq!(pair.martingale.node(p), &z[..]);
        }
        let root = expectation(&pair.state, &tree, 0).unwrap();
        let direct = expectation(&terminal, &tree, 4).unwrap();
        assert!(root.iter().zip(&direct).all(|(a, b)| (a - b).abs() < 1e-15));
    }

    #[test]
    fn deterministic_terminal_has_no_martingale_part() {
        let (tree, mesh) = setup(9, 4);
        let st = Stepper::new(&tree, &mesh, Coefficients::heat(&tree, &mesh, 1.0), 1.0).unwrap();
        let terminal = AdaptedField::constant(&tree, &mesh.sample(|x| x * (1.0 - x)));
        let pair = st.solve_backward(&terminal, &AdaptedField::zeros(&tree, mesh.m)).unwrap();
        assert!(pair.martingale.is_zero());
    }

    #[test]
    fn transposes_pass_dot_product_tests() {
        let (tree, mesh) = setup(13, 5);
        for theta in [0.5, 1.0] {
            let st = Stepper::new(&tree, &mesh, rough_coeffs(&tree, &mesh, 5), theta).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(6);
            // backward: <S(yT, f), (a, b)> = <(yT, f), S^T(a, b)>
            let y_t = sample_adapted_field(&tree, &mesh, &mut rng, 1.0);
            let f = sample_adapted_field(&tree, &mesh, &mut rng, 1.0);
            let a = sample_adapted_field(&tree, &mesh, &mut rng, 1.0);
            let mut b = sample_adapted_field(&tree, &mesh, &mut rng, 1.0);
            for leaf in tree.depth_range(tree.n_steps) {
                b.node_mut(leaf).iter_mut().for_each(|v| *v = 0.0);
            }
            let mut f_int = f.clone();
            for leaf in tree.depth_range(tree.n_steps) {
                f_int.node_mut(leaf).iter_mut().for_each(|v| *v = 0.0);
            }
            let pair = st.solve_backward(&y_t, &f_int).unwrap();
            let lhs = dot(&pair.state, &a) + dot(&pair.martingale, &b);
            let cot = st.backward_transpose(&a, &b).unwrap();
            let mut y_leaf = y_t.clone();
            for p in 0..tree.interior_count() {
                y_leaf.node_mut(p).iter_mut().for_each(|v| *v = 0.0);
            }
            let rhs = dot(&y_leaf, &cot.terminal) + dot(&f_int, &cot.forcing);
            assert!((lhs - rhs).abs() < 1e-11 * (lhs.abs() + rhs.abs()), "{lhs} {rhs}");

            // forward: <S(z0, f, g), a> = <(z0, f, g), S^T a>
            let z0 = mesh.sample(|x| (3.0 * x).sin() * x * (1.0 - x));
            let g = sample_adapted_field(&tree, &mesh, &mut rng, 1.0);
            let z = st.solve_forward(&z0, &f, Some(&g)).unwrap();
            let lhs = dot(&z, &a);
            let cot = st.forward_transpose(&a).unwrap();
            let rhs = z0.iter().zip(&cot.initial).map(|(x, y)| x * y).sum::<f64>()
                + dot(&f_int, &cot.forcing)
                + dot(&g, &cot.noise);
            assert!((lhs - rhs).abs() < 1e-11 * (lhs.abs() + rhs.abs()), "{lhs} {rhs}");
        }
    }

    fn dot(a: &AdaptedField, b: &AdaptedField) -> f64 {
        a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn weighted_adjoint_dot_product() {
        let (tree, mesh) = setup(21, 6);
        let st = Stepper::new(&tree, &mesh, rough_coeffs(&tree, &mesh, 7), 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..10 {
            let u = sample_adapted_field(&tree, &mesh, &mut rng, 1.0);
            let w = sample_adapted_field(&tree, &mesh, &mut rng, 1.0);
            assert!(dot_product_test(&st, &u, &w).unwrap() < 1e-11);
        }
        let zero = AdaptedField::zeros(&tree, mesh.m);
        assert!(apply_adjoint(&st, &zero).unwrap().is_zero());
    }

    #[test]
    fn stability_guard_rejects_coarse_steps() {
        let (tree, mesh) = setup(11, 2);
        let mut coeffs = Coefficients::heat(&tree, &mesh, 1.0);
        coeffs.reaction = Some(AdaptedField::constant(&tree, &vec![50.0; mesh.m]));
        assert!(matches!(Stepper::new(&tree, &mesh, coeffs, 1.0), Err(Error::Stability(_))));
    }

    #[test]
    fn energy_decays_without_forcing() {
        let (tree, mesh) = setup(31, 6);
        let coeffs = Coefficients::with_diffusion(sample_adapted_coefficients(&tree, &mesh, 9, 0.5, 2.0, 1.0).unwrap(), 0.5);
        for theta in [0.5, 1.0] {
            let st = Stepper::new(&tree, &mesh, coeffs.clone(), theta).unwrap();
            let z0 = mesh.sample(|x| if x < 0.5 { x } else { 1.0 - x });
            let z = st.solve_forward(&z0, &AdaptedField::zeros(&tree, mesh.m), None).unwrap();
            for p in 0..tree.interior_count() {
                let (c, _) = ScenarioTree::children(p);
                assert!(mesh.l2_norm_sq(z.node(c)) <= mesh.l2_norm_sq(z.node(p)) * (1.0 + 1e-14));
            }
        }
    }
}
