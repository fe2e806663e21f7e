//! Penalized HUM null-control synthesis.
//!
//! The penalized functional is minimized directly by preconditioned
//! conjugate gradients; gradients come from the exact transposes of the
//! tree solvers. The optimality system is only used afterwards, as a check.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::{SpatialField, SpatialMesh};
use crate::scenario::{sample_adapted_field, AdaptedField, ScenarioTree};
use crate::spde::{BackwardProblem, ForwardProblem, StatePair, Stepper};
use crate::weights::{log_sum_exp, Layout, LogTerm, PowerSpec, Slot, WeightSystem, WeightVariant};

/// Which system is steered to zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Direction {
    /// Backward equation, target `y(0) = 0`, control `u` on the control set.
    ControlBackwardSystem,
    /// Forward equation, target `z(T) = 0`, controls `(u, U)` with `U` in the noise.
    ControlForwardSystem,
}

/// How raw log-weights are shifted before clamping to `[-kappa, kappa]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightScaling {
    /// Control weights shifted so the cheapest control cell has weight 1,
    /// state weights shifted so the most penalized state cell has weight 1.
    Anchored,
    /// No shift; raw log-weights are clamped as they are.
    Raw,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HumConfig {
    pub eps: f64,
    pub cg_tol: f64,
    pub cg_max_iters: usize,
    pub kappa: f64,
    pub direction: Direction,
    /// Include the weighted `|grad y|^2` penalty.
    pub gradient_penalty: bool,
    pub implicitness: f64,
    pub scaling: WeightScaling,
}

impl Default for HumConfig {
    fn default() -> Self {
        Self {
            eps: 1e-2,
            cg_tol: 1e-10,
            cg_max_iters: 2000,
            kappa: 30.0,
            direction: Direction::ControlBackwardSystem,
            gradient_penalty: true,
            implicitness: 1.0,
            scaling: WeightScaling::Anchored,
        }
    }
}

impl HumConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(Error::Config(format!("eps must be positive, got {}", self.eps)));
        }
        if !(self.cg_tol > 0.0 && self.cg_tol < 1.0) {
            return Err(Error::Config(format!("cg_tol must lie in (0, 1), got {}", self.cg_tol)));
        }
        if self.cg_max_iters == 0 {
            return Err(Error::Config("cg_max_iters must be positive".into()));
        }
        if !(self.kappa >= 10.0) {
            return Err(Error::Config(format!("kappa must be at least 10, got {}", self.kappa)));
        }
        Ok(())
    }

    pub fn with_eps(mut self, eps: f64) -> Self {
        self.eps = eps;
        self
    }
}

/// Data of a control problem; the variant fixes the direction.
#[derive(Debug, Clone)]
pub enum ControlProblem {
    Backward(BackwardProblem),
    Forward(ForwardProblem),
}

impl ControlProblem {
    pub fn direction(&self) -> Direction {
        match self {
            Self::Backward(_) => Direction::ControlBackwardSystem,
            Self::Forward(_) => Direction::ControlForwardSystem,
        }
    }

    fn coeffs(&self) -> &crate::spde::Coefficients {
        match self {
            Self::Backward(p) => &p.coeffs,
            Self::Forward(p) => &p.coeffs,
        }
    }

    fn source(&self) -> Option<&AdaptedField> {
        match self {
            Self::Backward(p) => p.source.as_ref(),
            Self::Forward(p) => p.source.as_ref(),
        }
    }

    fn flux(&self) -> Option<&AdaptedField> {
        match self {
            Self::Backward(p) => p.flux.as_ref(),
            Self::Forward(p) => p.flux.as_ref(),
        }
    }

    /// Multiplies every data item (endpoint data and sources) by `c`.
    pub fn scaled_data(&self, c: f64) -> Self {
        let s = |f: &Option<AdaptedField>| f.as_ref().map(|v| v.scaled(c));
        match self {
            Self::Backward(p) => Self::Backward(BackwardProblem {
                coeffs: p.coeffs.clone(),
                source: s(&p.source),
                flux: s(&p.flux),
                terminal: p.terminal.scaled(c),
            }),
            Self::Forward(p) => Self::Forward(ForwardProblem {
                coeffs: p.coeffs.clone(),
                source: s(&p.source),
                flux: s(&p.flux),
                noise: s(&p.noise),
                initial: p.initial.iter().map(|v| c * v).collect(),
            }),
        }
    }
}

/// Linear-domain clamped weights of the functional, indexed `[step][point]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FunctionalWeights {
    pub control: Vec<Vec<f64>>,
    pub noise_control: Option<Vec<Vec<f64>>>,
    pub state: Vec<Vec<f64>>,
    pub gradient: Option<Vec<Vec<f64>>>,
    /// Log shift subtracted from the control weights before clamping.
    pub control_offset: f64,
    /// Log shift subtracted from the state weights before clamping.
    pub state_offset: f64,
}

/// The penalized functional as a quadratic form on stacked controls.
///
/// A control vector holds `u` at every non-leaf node and control point,
/// followed (forward direction) by `U` at every non-leaf node and point.
#[derive(Debug, Clone)]
pub struct HumFunctional {
    stepper: Stepper,
    direction: Direction,
    eps: f64,
    weights: FunctionalWeights,
    ctrl: Vec<usize>,
    base_forcing: AdaptedField,
    base_noise: Option<AdaptedField>,
    terminal: Option<AdaptedField>,
    initial: Option<SpatialField>,
}

fn weight_table(
    unreg: &WeightSystem,
    reg: &WeightSystem,
    spec: &PowerSpec,
    theta_from_reg: bool,
    n_steps: usize,
    m: usize,
) -> Vec<Vec<f64>> {
    // xi always comes from the unregularized profile, theta from the chosen one
    let p = &unreg.params;
    let base = spec.lambda * p.lambda.ln() + spec.mu * p.mu.ln() + spec.log_const;
    (0..n_steps)
        .map(|k| {
            let xi = unreg.log_xi(Slot::Step(k));
            let ell = if theta_from_reg { reg.ell(Slot::Step(k)) } else { unreg.ell(Slot::Step(k)) };
            (0..m).map(|i| base + spec.xi * xi[i] + spec.theta * ell[i]).collect()
        })
        .collect()
}

fn clamp_exp(table: &mut [Vec<f64>], offset: f64, kappa: f64) {
    for row in table {
        for v in row.iter_mut() {
            *v = (*v - offset).clamp(-kappa, kappa).exp();
        }
    }
}

pub(crate) fn control_spec() -> PowerSpec {
    PowerSpec::new(-3.0, -4.0, -3.0, -2.0)
}

pub(crate) fn second_order_spec() -> PowerSpec {
    PowerSpec::new(-2.0, -2.0, -3.0, -2.0)
}

impl HumFunctional {
    /// Assembles the functional. `system` must carry the regularized
    /// variant matching the direction.
    pub fn new(
        config: &HumConfig,
        problem: &ControlProblem,
        system: &WeightSystem,
        tree: &ScenarioTree,
        mesh: &SpatialMesh,
    ) -> Result<Self> {
        config.validate()?;
        let direction = config.direction;
        if problem.direction() != direction {
            return Err(Error::Config("problem data does not match the configured direction".into()));
        }
        let variant = system.params.variant;
        let expected = match direction {
            Direction::ControlBackwardSystem => WeightVariant::BackwardRegularized,
            Direction::ControlForwardSystem => WeightVariant::ForwardRegularized,
        };
        if variant != expected {
            if variant == expected.unregularized() {
                return Err(Error::Weights(format!(
                    "the state penalty needs the regularized weight; got {}",
                    variant.name()
                )));
            }
            return Err(Error::Weights(format!(
                "weight variant {} does not match the control direction",
                variant.name()
            )));
        }
        if system.n_steps != tree.n_steps || system.base.values.len() != mesh.m {
            return Err(Error::Weights("weight system was cached on a different grid".into()));
        }
        let unreg_params = system.params.with_variant(variant.unregularized(), 0.0)?;
        let unreg = WeightSystem::with_base(unreg_params, system.base.clone(), mesh, tree)?;

        let n = tree.n_steps;
        let m = mesh.m;
        let ctrl = mesh.ctrl_indices();
        let mut control = weight_table(&unreg, system, &control_spec(), false, n, m);
        let mut noise_control = (direction == Direction::ControlForwardSystem)
            .then(|| weight_table(&unreg, system, &second_order_spec(), false, n, m));
        let mut state = weight_table(&unreg, system, &PowerSpec::new(0.0, 0.0, 0.0, -2.0), true, n, m);
        let mut gradient =
            config.gradient_penalty.then(|| weight_table(&unreg, system, &second_order_spec(), true, n, m));

        let (control_offset, state_offset) = match config.scaling {
            WeightScaling::Raw => (0.0, 0.0),
            WeightScaling::Anchored => {
                let mut lo = f64::INFINITY;
                for row in &control {
                    lo = ctrl.iter().fold(lo, |a, &i| a.min(row[i]));
                }
                for row in noise_control.iter().flatten() {
                    lo = row.iter().fold(lo, |a, &v| a.min(v));
                }
                let mut hi = f64::NEG_INFINITY;
                for row in state.iter().chain(gradient.iter().flatten()) {
                    hi = row.iter().fold(hi, |a, &v| a.max(v));
                }
                (lo, hi)
            }
        };
        if !(control_offset.is_finite() && state_offset.is_finite()) {
            return Err(Error::Numerical("non-finite weight offset".into()));
        }
        clamp_exp(&mut control, control_offset, config.kappa);
        if let Some(t) = noise_control.as_mut() {
            clamp_exp(t, control_offset, config.kappa);
        }
        clamp_exp(&mut state, state_offset, config.kappa);
        if let Some(t) = gradient.as_mut() {
            clamp_exp(t, state_offset, config.kappa);
        }

        let stepper = Stepper::new(tree, mesh, problem.coeffs().clone(), config.implicitness)?;
        let base_forcing = stepper.forcing(problem.source(), problem.flux(), None)?;
        let (base_noise, terminal, initial) = match problem {
            ControlProblem::Backward(p) => {
                p.terminal.matches(tree, m)?;
                (None, Some(p.terminal.clone()), None)
            }
            ControlProblem::Forward(p) => {
                mesh.check(&p.initial)?;
                let noise = match &p.noise {
                    Some(g) => {
                        g.matches(tree, m)?;
                        g.clone()
                    }
                    None => AdaptedField::zeros(tree, m),
                };
                (Some(noise), None, Some(p.initial.clone()))
            }
        };
        let mut out = Self {
            stepper,
            direction,
            eps: config.eps,
            weights: FunctionalWeights { control, noise_control, state, gradient, control_offset, state_offset },
            ctrl,
            base_forcing,
            base_noise,
            terminal,
            initial,
        };
        if config.scaling == WeightScaling::Anchored {
            // measure eps in units of the endpoint authority of the controls
            let rho = out.endpoint_authority()?;
            if rho > 0.0 {
                let scale = |t: &mut Vec<Vec<f64>>| t.iter_mut().flatten().for_each(|v| *v *= rho);
                scale(&mut out.weights.control);
                out.weights.noise_control.as_mut().map(scale);
                out.weights.control_offset -= rho.ln();
            }
        }
        Ok(out)
    }

    /// Largest eigenvalue of `D^-1/2 S^T P S D^-1/2`, where `P` is the
    /// endpoint quadrature and `D` the control diagonal.
    pub fn endpoint_authority(&self) -> Result<f64> {
        let d = self.control_diagonal();
        let n = d.len();
        if n == 0 {
            return Ok(0.0);
        }
        let m = self.mesh().m;
        let depth = ScenarioTree::depth_of(self.endpoint_nodes().start);
        let c = ScenarioTree::probability(depth) * self.mesh().h;
        let mut v = vec![1.0 / (n as f64).sqrt(); n];
        let mut rho = 0.0;
        for _ in 0..200 {
            let x: Vec<f64> = v.iter().zip(&d).map(|(a, di)| a / di.sqrt()).collect();
            let state = self.state(&x, true)?;
            let mut seed = AdaptedField::zeros(self.tree(), m);
            for node in self.endpoint_nodes() {
                let y = state.state.node(node).to_vec();
                seed.node_mut(node).iter_mut().zip(&y).for_each(|(s, yi)| *s = c * yi);
            }
            let g = self.pullback(&seed)?;
            let w: Vec<f64> = g.iter().zip(&d).map(|(a, di)| a / di.sqrt()).collect();
            let norm = w.iter().map(|a| a * a).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Ok(0.0);
            }
            let next = norm;
            v = w.into_iter().map(|a| a / norm).collect();
            let done = (next - rho).abs() <= 1e-10 * next;
            rho = next;
            if done {
                break;
            }
        }
        Ok(rho)
    }

    pub fn direction(&self) -> Direction {
        self.direction
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    pub fn weights(&self) -> &FunctionalWeights {
        &self.weights
    }

    pub fn stepper(&self) -> &Stepper {
        &self.stepper
    }

    pub fn tree(&self) -> &ScenarioTree {
        &self.stepper.tree
    }

    pub fn mesh(&self) -> &SpatialMesh {
        &self.stepper.mesh
    }

    /// Same functional with every weight multiplied by `c` and `eps`
    /// divided by `c`, i.e. `c` times the original functional.
    pub fn rescaled(&self, c: f64) -> Self {
        let mut out = self.clone();
        let scale = |t: &mut Vec<Vec<f64>>| t.iter_mut().flatten().for_each(|v| *v *= c);
        scale(&mut out.weights.control);
        scale(&mut out.weights.state);
        out.weights.noise_control.as_mut().map(scale);
        out.weights.gradient.as_mut().map(scale);
        out.eps /= c;
        out
    }

    fn interior(&self) -> usize {
        self.stepper.tree.interior_count()
    }

    fn u_len(&self) -> usize {
        self.interior() * self.ctrl.len()
    }

    pub fn dim(&self) -> usize {
        let noise = if self.direction == Direction::ControlForwardSystem { self.interior() * self.mesh().m } else { 0 };
        self.u_len() + noise
    }

    /// Splits a control vector into `u` (zero off the control set) and `U`.
    pub fn unpack(&self, x: &[f64]) -> (AdaptedField, Option<AdaptedField>) {
        let tree = self.tree();
        let m = self.mesh().m;
        let nc = self.ctrl.len();
        let mut u = AdaptedField::zeros(tree, m);
        for p in 0..self.interior() {
            let row = u.node_mut(p);
            for (j, &i) in self.ctrl.iter().enumerate() {
                row[i] = x[p * nc + j];
            }
        }
        let big = (self.direction == Direction::ControlForwardSystem).then(|| {
            let mut f = AdaptedField::zeros(tree, m);
            let off = self.u_len();
            f.as_mut_slice()[..self.interior() * m].copy_from_slice(&x[off..off + self.interior() * m]);
            f
        });
        (u, big)
    }

    pub fn pack(&self, u: &AdaptedField, big: Option<&AdaptedField>) -> Vec<f64> {
        let m = self.mesh().m;
        let mut x = Vec::with_capacity(self.dim());
        for p in 0..self.interior() {
            let row = u.node(p);
            x.extend(self.ctrl.iter().map(|&i| row[i]));
        }
        if self.direction == Direction::ControlForwardSystem {
            match big {
                Some(f) => x.extend_from_slice(&f.as_slice()[..self.interior() * m]),
                None => x.resize(self.dim(), 0.0),
            }
        }
        x
    }

    /// Quadrature weight `2^-d dt h` of a node at depth `d`.
    fn q(&self, depth: usize) -> f64 {
        ScenarioTree::probability(depth) * self.tree().dt * self.mesh().h
    }

    /// Diagonal of the control term: the Jacobi preconditioner.
    pub fn control_diagonal(&self) -> Vec<f64> {
        let mut d = Vec::with_capacity(self.dim());
        for p in 0..self.interior() {
            let k = ScenarioTree::depth_of(p);
            let q = self.q(k);
            d.extend(self.ctrl.iter().map(|&i| q * self.weights.control[k][i]));
        }
        if let Some(w) = &self.weights.noise_control {
            for p in 0..self.interior() {
                let k = ScenarioTree::depth_of(p);
                let q = self.q(k);
                d.extend(w[k].iter().map(|v| q * v));
            }
        }
        d
    }

    /// State for control `x`; `homogeneous` drops all problem data.
    /// Forward states are returned with a zero martingale part.
    pub fn state(&self, x: &[f64], homogeneous: bool) -> Result<StatePair> {
        let tree = self.tree();
        let m = self.mesh().m;
        let (u, big) = self.unpack(x);
        let mut forcing = self.stepper.forcing(None, None, Some(&u))?;
        if !homogeneous {
            forcing.axpy(1.0, &self.base_forcing);
        }
        match self.direction {
            Direction::ControlBackwardSystem => {
                let zero;
                let terminal = if homogeneous {
                    zero = AdaptedField::zeros(tree, m);
                    &zero
                } else {
                    self.terminal.as_ref().expect("backward data")
                };
                self.stepper.solve_backward(terminal, &forcing)
            }
            Direction::ControlForwardSystem => {
                let mut noise = big.expect("stacked control");
                let z0 = if homogeneous {
                    vec![0.0; m]
                } else {
                    noise.axpy(1.0, self.base_noise.as_ref().expect("forward data"));
                    self.initial.clone().expect("forward data")
                };
                let state = self.stepper.solve_forward(&z0, &forcing, Some(&noise))?;
                Ok(StatePair { state, martingale: AdaptedField::zeros(tree, m) })
            }
        }
    }

    /// Nodes carrying the state penalty together with their step index.
    fn penalized_nodes(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let n = self.tree().n_steps;
        let shift = usize::from(self.direction == Direction::ControlForwardSystem);
        (0..n).flat_map(move |k| self.tree().depth_range(k + shift).map(move |node| (node, k)))
    }

    fn endpoint_nodes(&self) -> std::ops::Range<usize> {
        match self.direction {
            Direction::ControlBackwardSystem => 0..1,
            Direction::ControlForwardSystem => self.tree().depth_range(self.tree().n_steps),
        }
    }

    /// `E ||y(endpoint)||^2`: `y(0)` for the backward direction, `z(T)` forward.
    pub fn endpoint_residual(&self, state: &StatePair) -> f64 {
        let mesh = self.mesh();
        let depth = match self.direction {
            Direction::ControlBackwardSystem => 0,
            Direction::ControlForwardSystem => self.tree().n_steps,
        };
        let pr = ScenarioTree::probability(depth);
        self.endpoint_nodes().map(|node| pr * mesh.l2_norm_sq(state.state.node(node))).sum()
    }

    /// Vector `phi` with state part of the functional equal to `|phi|^2 / 2`;
    /// linear in the state.
    pub fn state_features(&self, state: &StatePair) -> Vec<f64> {
        let mesh = self.mesh();
        let shift = usize::from(self.direction == Direction::ControlForwardSystem);
        let mut out = Vec::new();
        let mut grad = vec![0.0; mesh.m];
        for (node, k) in self.penalized_nodes() {
            let q = self.q(k + shift);
            let y = state.state.node(node);
            out.extend(y.iter().zip(&self.weights.state[k]).map(|(v, w)| (q * w).sqrt() * v));
            if let Some(wg) = &self.weights.gradient {
                mesh.gradient_into(y, &mut grad);
                out.extend(grad.iter().zip(&wg[k]).map(|(g, w)| (q * w).sqrt() * g));
            }
        }
        let depth = ScenarioTree::depth_of(self.endpoint_nodes().start);
        let c = (ScenarioTree::probability(depth) * mesh.h / self.eps).sqrt();
        for node in self.endpoint_nodes() {
            out.extend(state.state.node(node).iter().map(|v| c * v));
        }
        out
    }

    /// Control part `<x, D x> / 2`.
    pub fn control_cost(&self, x: &[f64]) -> f64 {
        0.5 * self.control_diagonal().iter().zip(x).map(|(d, v)| d * v * v).sum::<f64>()
    }

    /// State part of the value and the cotangent seed on the state.
    fn state_part(&self, state: &StatePair) -> (f64, AdaptedField) {
        let mesh = self.mesh();
        let m = mesh.m;
        let shift = usize::from(self.direction == Direction::ControlForwardSystem);
        let mut seed = AdaptedField::zeros(self.tree(), m);
        let mut value = 0.0;
        let mut grad = vec![0.0; m];
        let mut tmp = vec![0.0; m];
        for (node, k) in self.penalized_nodes() {
            let q = self.q(k + shift);
            let y = state.state.node(node);
            let s = seed.node_mut(node);
            for ((si, yi), w) in s.iter_mut().zip(y).zip(&self.weights.state[k]) {
                value += 0.5 * q * w * yi * yi;
                *si += q * w * yi;
            }
            if let Some(wg) = &self.weights.gradient {
                mesh.gradient_into(y, &mut grad);
                for ((t, g), w) in tmp.iter_mut().zip(&grad).zip(&wg[k]) {
                    value += 0.5 * q * w * g * g;
                    *t = q * w * g;
                }
                mesh.gradient_transpose_add(&tmp, 1.0, s);
            }
        }
        let depth = ScenarioTree::depth_of(self.endpoint_nodes().start);
        let c = ScenarioTree::probability(depth) * mesh.h / self.eps;
        for node in self.endpoint_nodes() {
            let y = state.state.node(node).to_vec();
            let s = seed.node_mut(node);
            for (si, yi) in s.iter_mut().zip(&y) {
                value += 0.5 * c * yi * yi;
                *si += c * yi;
            }
        }
        (value, seed)
    }

    /// Pulls a state cotangent back to the control vector.
    fn pullback(&self, seed: &AdaptedField) -> Result<Vec<f64>> {
        let m = self.mesh().m;
        let (forcing, noise) = match self.direction {
            Direction::ControlBackwardSystem => {
                let zero = AdaptedField::zeros(self.tree(), m);
                (self.stepper.backward_transpose(seed, &zero)?.forcing, None)
            }
            Direction::ControlForwardSystem => {
                let cot = self.stepper.forward_transpose(seed)?;
                (cot.forcing, Some(cot.noise))
            }
        };
        Ok(self.pack(&forcing, noise.as_ref()))
    }

    fn eval(&self, x: &[f64], homogeneous: bool) -> Result<(f64, Vec<f64>, StatePair)> {
        if x.len() != self.dim() {
            return Err(Error::Shape { expected: self.dim(), got: x.len() });
        }
        let state = self.state(x, homogeneous)?;
        let (sv, seed) = self.state_part(&state);
        let mut g = self.pullback(&seed)?;
        let d = self.control_diagonal();
        let mut value = sv;
        for ((gi, di), xi) in g.iter_mut().zip(&d).zip(x) {
            value += 0.5 * di * xi * xi;
            *gi += di * xi;
        }
        Ok((value, g, state))
    }

    pub fn value(&self, x: &[f64]) -> Result<f64> {
        Ok(self.eval(x, false)?.0)
    }

    /// Euclidean gradient of the value with respect to the control vector.
    pub fn gradient(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.eval(x, false)?.1)
    }

    pub fn value_and_gradient(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        let (v, g, _) = self.eval(x, false)?;
        Ok((v, g))
    }

    /// Hessian-vector product.
    pub fn hessian_apply(&self, v: &[f64]) -> Result<Vec<f64>> {
        Ok(self.eval(v, true)?.1)
    }

    /// Dot-product test of the control-to-state map and its transpose on
    /// `pairs` random pairs; returns the worst relative discrepancy.
    pub fn adjoint_check(&self, pairs: usize, seed: u64) -> Result<f64> {
        let tree = *self.tree();
        let mesh = self.mesh().clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut worst = 0.0f64;
        for _ in 0..pairs {
            let uf = sample_adapted_field(&tree, &mesh, &mut rng, 1.0);
            let bf = sample_adapted_field(&tree, &mesh, &mut rng, 1.0);
            let x = self.pack(&uf, Some(&bf));
            let w = sample_adapted_field(&tree, &mesh, &mut rng, 1.0);
            let y = self.state(&x, true)?;
            let lhs: f64 = y.state.as_slice().iter().zip(w.as_slice()).map(|(a, b)| a * b).sum();
            let back = self.pullback(&w)?;
            let rhs: f64 = back.iter().zip(&x).map(|(a, b)| a * b).sum();
            let scale = lhs.abs() + rhs.abs();
            if scale > 0.0 {
                worst = worst.max((lhs - rhs).abs() / scale);
            }
        }
        Ok(worst)
    }

    /// Relative gap between `x` and the control recovered from the dual
    /// state, `-D^-1 S^T (dJ_state/dy)`, in the clamped control norm.
    pub fn dual_residual(&self, x: &[f64], state: &StatePair) -> Result<f64> {
        let (_, seed) = self.state_part(state);
        let dual = self.pullback(&seed)?;
        let d = self.control_diagonal();
        let mut num = 0.0;
        let mut den = 0.0;
        for ((xi, vi), di) in x.iter().zip(&dual).zip(&d) {
            let r = xi + vi / di;
            num += di * r * r;
            den += di * xi * xi;
        }
        Ok(if den == 0.0 { num.sqrt() } else { (num / den).sqrt() })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CgRecord {
    pub iter: usize,
    pub j: f64,
    pub rel_residual: f64,
}

#[derive(Debug, Clone)]
pub struct CgOutcome {
    pub x: Vec<f64>,
    pub trace: Vec<CgRecord>,
    pub converged: bool,
}

/// Jacobi-preconditioned CG for `H x = -grad J(0)`, started at `x0`.
/// The trace records the functional value, tracked through the residual.
pub fn minimize_cg(f: &HumFunctional, x0: Vec<f64>, tol: f64, max_iters: usize) -> Result<CgOutcome> {
    let (j0, g0) = f.value_and_gradient(&vec![0.0; f.dim()])?;
    let diag = f.control_diagonal();
    let b: Vec<f64> = g0.iter().map(|g| -g).collect();
    let pnorm = |r: &[f64]| r.iter().zip(&diag).map(|(v, d)| v * v / d).sum::<f64>().sqrt();
    let b_norm = pnorm(&b);
    let mut x = x0;
    let hx = f.hessian_apply(&x)?;
    let mut r: Vec<f64> = b.iter().zip(&hx).map(|(bi, h)| bi - h).collect();
    let value = |x: &[f64], r: &[f64]| j0 + 0.5 * g0.iter().zip(x).map(|(g, v)| g * v).sum::<f64>()
        - 0.5 * r.iter().zip(x).map(|(a, v)| a * v).sum::<f64>();
    let mut trace = vec![CgRecord { iter: 0, j: value(&x, &r), rel_residual: if b_norm == 0.0 { 0.0 } else { pnorm(&r) / b_norm } }];
    if b_norm == 0.0 || trace[0].rel_residual <= tol {
        return Ok(CgOutcome { x, trace, converged: true });
    }
    let mut z: Vec<f64> = r.iter().zip(&diag).map(|(v, d)| v / d).collect();
    let mut p = z.clone();
    let mut rz: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
    for iter in 1..=max_iters {
        let hp = f.hessian_apply(&p)?;
        let php: f64 = p.iter().zip(&hp).map(|(a, b)| a * b).sum();
        if !(php > 0.0) {
            return Err(Error::Numerical(format!("non-positive curvature {php:e} in CG")));
        }
        let alpha = rz / php;
        x.iter_mut().zip(&p).for_each(|(xi, pi)| *xi += alpha * pi);
        r.iter_mut().zip(&hp).for_each(|(ri, hi)| *ri -= alpha * hi);
        let rel = pnorm(&r) / b_norm;
        trace.push(CgRecord { iter, j: value(&x, &r), rel_residual: rel });
        if rel <= tol {
            return Ok(CgOutcome { x, trace, converged: true });
        }
        z.iter_mut().zip(&r).zip(&diag).for_each(|((zi, ri), d)| *zi = ri / d);
        let rz_new: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
        let beta = rz_new / rz;
        rz = rz_new;
        p.iter_mut().zip(&z).for_each(|(pi, zi)| *pi = zi + beta * *pi);
    }
    Ok(CgOutcome { x, trace, converged: false })
}

/// Log-domain ledger of both sides of the weighted energy estimate.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EnergyLedger {
    pub lhs: Vec<LogTerm>,
    pub rhs: Vec<LogTerm>,
    /// Reported alongside the left side but not summed into it.
    pub extra: Vec<LogTerm>,
    pub log_lhs: f64,
    pub log_rhs: f64,
    pub log_gap: f64,
    pub degenerate: bool,
}

#[derive(Debug, Clone)]
pub struct ControlResult {
    pub u_hat: AdaptedField,
    pub noise_control: Option<AdaptedField>,
    pub state: StatePair,
    pub residual: f64,
    pub j_value: f64,
    pub j_zero: f64,
    /// Clamped control cost `<x, D x> / 2`.
    pub control_cost: f64,
    pub dual_residual: f64,
    pub converged: bool,
    pub cg_trace: Vec<CgRecord>,
    pub energy: EnergyLedger,
    pub control_offset: f64,
    pub state_offset: f64,
}

impl ControlResult {
    pub fn cg_iters(&self) -> usize {
        self.cg_trace.last().map_or(0, |r| r.iter)
    }
}

/// Adjoint gate threshold for [`solve_null_control`].
pub const ADJOINT_GATE: f64 = 1e-9;

pub fn assemble_functional(
    config: &HumConfig,
    problem: &ControlProblem,
    system: &WeightSystem,
    tree: &ScenarioTree,
    mesh: &SpatialMesh,
) -> Result<HumFunctional> {
    HumFunctional::new(config, problem, system, tree, mesh)
}

pub fn solve_null_control(
    config: &HumConfig,
    problem: &ControlProblem,
    system: &WeightSystem,
    tree: &ScenarioTree,
    mesh: &SpatialMesh,
) -> Result<ControlResult> {
    solve_with_start(config, problem, system, tree, mesh, None)
}

/// As [`solve_null_control`], optionally warm-started; the start is kept
/// only if it beats the zero control.
pub fn solve_with_start(
    config: &HumConfig,
    problem: &ControlProblem,
    system: &WeightSystem,
    tree: &ScenarioTree,
    mesh: &SpatialMesh,
    warm: Option<&[f64]>,
) -> Result<ControlResult> {
    let f = HumFunctional::new(config, problem, system, tree, mesh)?;
    let gap = f.adjoint_check(3, 0x5eed)?;
    if !(gap <= ADJOINT_GATE) {
        return Err(Error::AdjointGate(gap));
    }
    let zero = vec![0.0; f.dim()];
    let j_zero = f.value(&zero)?;
    let start = match warm {
        Some(w) if w.len() == f.dim() && f.value(w)? < j_zero => w.to_vec(),
        _ => zero,
    };
    let cg = minimize_cg(&f, start, config.cg_tol, config.cg_max_iters)?;
    if !cg.converged {
        log::warn!("CG stopped after {} iterations above tolerance", config.cg_max_iters);
    }
    let mut x = cg.x;
    let mut j_value = f.value(&x)?;
    if j_value > j_zero {
        x = vec![0.0; f.dim()];
        j_value = j_zero;
    }
    let state = f.state(&x, false)?;
    let residual = f.endpoint_residual(&state);
    let dual_residual = f.dual_residual(&x, &state)?;
    let control_cost = f.control_cost(&x);
    let (u_hat, noise_control) = f.unpack(&x);
    let mut result = ControlResult {
        u_hat,
        noise_control,
        state,
        residual,
        j_value,
        j_zero,
        control_cost,
        dual_residual,
        converged: cg.converged,
        cg_trace: cg.trace,
        energy: EnergyLedger {
            lhs: Vec::new(),
            rhs: Vec::new(),
            extra: Vec::new(),
            log_lhs: f64::NEG_INFINITY,
            log_rhs: f64::NEG_INFINITY,
            log_gap: f64::NAN,
            degenerate: true,
        },
        control_offset: f.weights.control_offset,
        state_offset: f.weights.state_offset,
    };
    result.energy = verify_energy_estimate(&result, problem, system, mesh)?;
    Ok(result)
}

/// Both sides of the weighted energy estimate of a computed control, with
/// unclamped weights of the unregularized variant.
pub fn verify_energy_estimate(
    result: &ControlResult,
    problem: &ControlProblem,
    system: &WeightSystem,
    mesh: &SpatialMesh,
) -> Result<EnergyLedger> {
    let p = &system.params;
    let params = p.with_variant(p.variant.unregularized(), 0.0)?;
    let tree = ScenarioTree::new(system.n_steps, p.horizon)?;
    let ws = WeightSystem::with_base(params, system.base.clone(), mesh, &tree)?;
    let state_layout = match problem {
        ControlProblem::Backward(_) => Layout::Parent,
        ControlProblem::Forward(_) => Layout::Child,
    };
    let grad = result.state.state.map_nodes(|v| mesh.gradient(v).expect("mesh-sized node"));
    let term = |name: &str, v: f64| LogTerm { name: name.to_string(), log_value: v };
    let theta2 = PowerSpec::new(0.0, 0.0, 0.0, -2.0);
    let mut lhs = vec![
        term("state", ws.weighted_expectation_norm(&result.state.state, &theta2, state_layout, None)?),
        term("gradient", ws.weighted_expectation_norm(&grad, &second_order_spec(), state_layout, None)?),
    ];
    let mut extra = Vec::new();
    match problem {
        ControlProblem::Backward(_) => {
            let y = &result.state.martingale;
            lhs.push(term("martingale", ws.weighted_expectation_norm(y, &second_order_spec(), Layout::Parent, None)?));
            let xi2 = PowerSpec::new(-2.0, -2.0, -2.0, -2.0);
            extra.push(term("martingale-xi2", ws.weighted_expectation_norm(y, &xi2, Layout::Parent, None)?));
        }
        ControlProblem::Forward(_) => {
            if let Some(big) = &result.noise_control {
                lhs.push(term(
                    "noise-control",
                    ws.weighted_expectation_norm(big, &second_order_spec(), Layout::Parent, None)?,
                ));
            }
        }
    }
    lhs.push(term(
        "control",
        ws.weighted_expectation_norm(&result.u_hat, &control_spec(), Layout::Parent, Some(&mesh.ctrl_mask))?,
    ));

    let mut rhs = Vec::new();
    let (mu, m) = (p.mu, p.m);
    match problem {
        ControlProblem::Backward(bp) => {
            let leaves = AdaptedField::from_fn(&tree, mesh.m, |node, i| {
                if tree.is_leaf(node) {
                    bp.terminal.node(node)[i]
                } else {
                    0.0
                }
            });
            let growth = 4.0 * p.lambda * mu * (6.0 * mu * (m + 1.0)).exp() - 6.0 * mu * m;
            let spec = PowerSpec::new(-1.0, -2.0, 0.0, 0.0).with_const(growth);
            rhs.push(term("terminal", ws.weighted_expectation_norm(&leaves, &spec, Layout::Terminal, None)?));
        }
        ControlProblem::Forward(fp) => {
            let root = AdaptedField::from_fn(&tree, mesh.m, |node, i| if node == 0 { fp.initial[i] } else { 0.0 });
            let spec = PowerSpec::new(-1.0, -2.0, 0.0, -2.0).with_const(-6.0 * mu * m);
            rhs.push(term("initial", ws.weighted_expectation_norm(&root, &spec, Layout::Initial, None)?));
        }
    }
    if let Some(src) = problem.source() {
        rhs.push(term("source", ws.weighted_expectation_norm(src, &control_spec(), Layout::Parent, None)?));
    }
    if let Some(b) = problem.flux() {
        let spec = PowerSpec::new(-1.0, -2.0, -1.0, -2.0);
        rhs.push(term("flux", ws.weighted_expectation_norm(b, &spec, Layout::Parent, None)?));
    }
    let log_lhs = log_sum_exp(&lhs.iter().map(|t| t.log_value).collect::<Vec<_>>());
    let log_rhs = log_sum_exp(&rhs.iter().map(|t| t.log_value).collect::<Vec<_>>());
    let degenerate = log_rhs == f64::NEG_INFINITY;
    let log_gap = if degenerate { f64::NAN } else { log_lhs - log_rhs };
    Ok(EnergyLedger { lhs, rhs, extra, log_lhs, log_rhs, log_gap, degenerate })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SweepRow {
    pub eps: f64,
    pub residual: f64,
    pub j: f64,
    pub control_cost: f64,
    pub cg_iters: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
    /// Least-squares slope of `ln residual` against `ln eps`; `None`
    /// when some residual vanishes.
    pub slope: Option<f64>,
}

/// Solves the control problem for each penalization in `eps_list`.
pub fn epsilon_sweep(
    template: &HumConfig,
    problem: &ControlProblem,
    system: &WeightSystem,
    tree: &ScenarioTree,
    mesh: &SpatialMesh,
    eps_list: &[f64],
) -> Result<SweepTable> {
    if eps_list.len() < 3 {
        return Err(Error::Config("an epsilon sweep needs at least 3 values".into()));
    }
    if eps_list.windows(2).any(|w| !(w[1] < w[0])) {
        return Err(Error::Config("epsilon values must be strictly decreasing".into()));
    }
    let rows = eps_list
        .par_iter()
        .map(|&eps| {
            let r = solve_null_control(&template.with_eps(eps), problem, system, tree, mesh)?;
            Ok(SweepRow {
                eps,
                residual: r.residual,
                j: r.j_value,
                control_cost: r.control_cost,
                cg_iters: r.cg_iters(),
                converged: r.converged,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let slope = if rows.iter().all(|r| r.residual > 0.0) {
        let pts: Vec<(f64, f64)> = rows.iter().map(|r| (r.eps.ln(), r.residual.ln())).collect();
        Some(fit_slope(&pts))
    } else {
        None
    };
    Ok(SweepTable { rows, slope })
}

/// Ordinary least-squares slope.
pub fn fit_slope(pts: &[(f64, f64)]) -> f64 {
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    sxy / sxx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{dense_kkt_control, deterministic_hum, DeterministicProblem};
    use crate::scenario::{sample_adapted_coefficients, sample_spatial_field};
    use crate::spde::Coefficients;
    use crate::weights::WeightParams;

    struct Case {
        tree: ScenarioTree,
        mesh: SpatialMesh,
        system: WeightSystem,
        problem: ControlProblem,
    }

    fn case(m: usize, n: usize, direction: Direction, seed: u64) -> Case {
        let (ctrl, inner) = if m < 15 { ((0.2, 0.9), (0.3, 0.8)) } else { ((0.25, 0.45), (0.30, 0.40)) };
        let mesh = SpatialMesh::new(0.0, 1.0, m, ctrl, inner).unwrap();
        let tree = ScenarioTree::new(n, 0.5).unwrap();
        let a = sample_adapted_coefficients(&tree, &mesh, seed, 0.5, 1.5, 0.3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
        let mut coeffs = Coefficients::with_diffusion(a, 0.5);
        coeffs.reaction = Some(sample_adapted_field(&tree, &mesh, &mut rng, 0.5));
        coeffs.drift = Some(sample_adapted_field(&tree, &mesh, &mut rng, 0.3));
        let variant = match direction {
            Direction::ControlBackwardSystem => WeightVariant::BackwardRegularized,
            Direction::ControlForwardSystem => WeightVariant::ForwardRegularized,
        };
        let params = WeightParams::new(1.0, 1.0, 1.0, 0.5, variant, 0.01).unwrap();
        let system = WeightSystem::new(params, &mesh, &tree).unwrap();
        let problem = match direction {
            Direction::ControlBackwardSystem => {
                coeffs.coupling = Some(sample_adapted_field(&tree, &mesh, &mut rng, 0.2));
                ControlProblem::Backward(BackwardProblem {
                    coeffs,
                    source: Some(sample_adapted_field(&tree, &mesh, &mut rng, 0.1)),
                    flux: None,
                    terminal: sample_adapted_field(&tree, &mesh, &mut rng, 1.0),
                })
            }
            Direction::ControlForwardSystem => ControlProblem::Forward(ForwardProblem {
                coeffs,
                source: Some(sample_adapted_field(&tree, &mesh, &mut rng, 0.1)),
                flux: None,
                noise: Some(sample_adapted_field(&tree, &mesh, &mut rng, 0.1)),
                initial: sample_spatial_field(&mesh, &mut rng, 1.0),
            }),
        };
        Case { tree, mesh, system, problem }
    }

    fn config(direction: Direction) -> HumConfig {
        HumConfig { direction, eps: 1e-2, cg_tol: 1e-12, ..HumConfig::default() }
    }

    fn functional(c: &Case, cfg: &HumConfig) -> HumFunctional {
        assemble_functional(cfg, &c.problem, &c.system, &c.tree, &c.mesh).unwrap()
    }

    fn random_vec(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        use rand::Rng;
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn zero_data_gives_zero() {
        let c = case(9, 3, Direction::ControlBackwardSystem, 1);
        let problem = c.problem.scaled_data(0.0);
        let cfg = config(Direction::ControlBackwardSystem);
        let f = assemble_functional(&cfg, &problem, &c.system, &c.tree, &c.mesh).unwrap();
        assert_eq!(f.value(&vec![0.0; f.dim()]).unwrap(), 0.0);
        let r = solve_null_control(&cfg, &problem, &c.system, &c.tree, &c.mesh).unwrap();
        assert!(r.u_hat.is_zero());
        assert_eq!(r.residual, 0.0);
        assert!(r.energy.degenerate);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for direction in [Direction::ControlBackwardSystem, Direction::ControlForwardSystem] {
            let c = case(13, 4, direction, 2);
            let f = functional(&c, &config(direction));
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let x = random_vec(f.dim(), &mut rng);
            let g = f.gradient(&x).unwrap();
            for _ in 0..5 {
                let v = random_vec(f.dim(), &mut rng);
                let step = 1e-3;
                let xp: Vec<f64> = x.iter().zip(&v).map(|(a, b)| a + step * b).collect();
                let xm: Vec<f64> = x.iter().zip(&v).map(|(a, b)| a - step * b).collect();
                let fd = (f.value(&xp).unwrap() - f.value(&xm).unwrap()) / (2.0 * step);
                let an: f64 = g.iter().zip(&v).map(|(a, b)| a * b).sum();
                assert!((fd - an).abs() <= 1e-6 * an.abs().max(fd.abs()), "{direction:?}: {fd} vs {an}");
            }
        }
    }

    #[test]
    fn functional_is_exactly_quadratic() {
        let c = case(9, 3, Direction::ControlBackwardSystem, 3);
        let f = functional(&c, &config(Direction::ControlBackwardSystem));
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random_vec(f.dim(), &mut rng);
        let v = random_vec(f.dim(), &mut rng);
        let at = |t: f64| f.value(&x.iter().zip(&v).map(|(a, b)| a + t * b).collect::<Vec<_>>()).unwrap();
        let (j0, j1, jm) = (at(0.0), at(1.0), at(-1.0));
        let a2 = 0.5 * (j1 + jm) - j0;
        let a1 = 0.5 * (j1 - jm);
        for t in [-2.0, 0.5, 3.0] {
            let pred = j0 + a1 * t + a2 * t * t;
            assert!((at(t) - pred).abs() <= 1e-10 * at(t).abs().max(1.0));
        }
    }

    #[test]
    fn adjoint_check_is_tight() {
        for direction in [Direction::ControlBackwardSystem, Direction::ControlForwardSystem] {
            let c = case(13, 4, direction, 5);
            let f = functional(&c, &config(direction));
            assert!(f.adjoint_check(5, 1).unwrap() < 1e-12);
        }
    }

    #[test]
    fn solve_invariants() {
        for direction in [Direction::ControlBackwardSystem, Direction::ControlForwardSystem] {
            let c = case(11, 4, direction, 6);
            let cfg = config(direction);
            let r = solve_null_control(&cfg, &c.problem, &c.system, &c.tree, &c.mesh).unwrap();
            assert!(r.converged);
            assert!(r.j_value <= r.j_zero);
            assert!(r.residual >= 0.0 && r.residual <= 2.0 * cfg.eps * r.j_zero);
            assert!(r.cg_trace.windows(2).all(|w| w[1].j <= w[0].j + 1e-12 * w[0].j.abs()));
            for node in 0..c.tree.node_count() {
                for (v, &keep) in r.u_hat.node(node).iter().zip(&c.mesh.ctrl_mask) {
                    assert!(keep || *v == 0.0);
                }
            }
            assert!(r.dual_residual < 1e-6, "dual residual {}", r.dual_residual);
            assert_eq!(r.noise_control.is_some(), direction == Direction::ControlForwardSystem);
        }
    }

    #[test]
    fn cg_matches_dense_oracle() {
        let c = case(5, 3, Direction::ControlBackwardSystem, 7);
        let cfg = config(Direction::ControlBackwardSystem);
        let f = functional(&c, &cfg);
        let dense = dense_kkt_control(&f).unwrap();
        let cg = minimize_cg(&f, vec![0.0; f.dim()], 1e-14, 500).unwrap();
        let diff: f64 = dense.iter().zip(&cg.x).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let norm: f64 = dense.iter().map(|a| a * a).sum::<f64>().sqrt();
        assert!(diff <= 1e-8 * norm, "{diff} vs {norm}");
    }

    #[test]
    fn argmin_invariant_under_weight_scaling() {
        let c = case(9, 3, Direction::ControlBackwardSystem, 8);
        let f = functional(&c, &config(Direction::ControlBackwardSystem));
        let base = minimize_cg(&f, vec![0.0; f.dim()], 1e-12, 500).unwrap().x;
        let scaled = minimize_cg(&f.rescaled(37.0), vec![0.0; f.dim()], 1e-12, 500).unwrap().x;
        let diff: f64 = base.iter().zip(&scaled).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let norm: f64 = base.iter().map(|a| a * a).sum::<f64>().sqrt();
        assert!(diff <= 1e-8 * norm);
    }

    #[test]
    fn deterministic_case_matches_oracle() {
        let mesh = SpatialMesh::new(0.0, 1.0, 15, (0.25, 0.45), (0.30, 0.40)).unwrap();
        let tree = ScenarioTree::new(4, 0.5).unwrap();
        let a: Vec<f64> = mesh.points().iter().map(|x| 1.0 + 0.3 * x).collect();
        let coeffs = Coefficients::with_diffusion(AdaptedField::constant(&tree, &a), 1.0);
        let yt = mesh.sample(|x| (std::f64::consts::PI * x).sin());
        let problem = ControlProblem::Backward(BackwardProblem {
            coeffs,
            source: None,
            flux: None,
            terminal: AdaptedField::constant(&tree, &yt),
        });
        let params = WeightParams::new(1.0, 1.0, 1.0, 0.5, WeightVariant::BackwardRegularized, 0.01).unwrap();
        let system = WeightSystem::new(params, &mesh, &tree).unwrap();
        let cfg = config(Direction::ControlBackwardSystem);
        let r = solve_null_control(&cfg, &problem, &system, &tree, &mesh).unwrap();
        let f = assemble_functional(&cfg, &problem, &system, &tree, &mesh).unwrap();
        let det = DeterministicProblem {
            mesh: &mesh,
            diffusion: &a,
            c0: 1.0,
            implicitness: cfg.implicitness,
            dt: tree.dt,
            n_steps: tree.n_steps,
            terminal: &yt,
        };
        let oracle = deterministic_hum(&det, f.weights(), cfg.eps).unwrap();
        let mut num = 0.0;
        let mut den = 0.0;
        for p in 0..tree.interior_count() {
            let k = ScenarioTree::depth_of(p);
            let w = ScenarioTree::probability(k);
            for (x, y) in r.u_hat.node(p).iter().zip(&oracle.controls[k]) {
                num += w * (x - y).powi(2);
                den += w * y * y;
            }
        }
        assert!(num.sqrt() <= 1e-6 * den.sqrt());
        assert!((r.residual - oracle.residual).abs() <= 1e-6 * oracle.residual.max(1e-300));
        assert!(r.state.martingale.max_abs() < 1e-12);
    }

    #[test]
    fn unregularized_variant_is_rejected() {
        let c = case(9, 3, Direction::ControlBackwardSystem, 9);
        let params = c.system.params.with_variant(WeightVariant::Backward, 0.0).unwrap();
        let sys = WeightSystem::new(params, &c.mesh, &c.tree).unwrap();
        let err = assemble_functional(&config(Direction::ControlBackwardSystem), &c.problem, &sys, &c.tree, &c.mesh);
        assert!(matches!(err, Err(Error::Weights(_))));
        let wrong = config(Direction::ControlForwardSystem);
        assert!(assemble_functional(&wrong, &c.problem, &c.system, &c.tree, &c.mesh).is_err());
    }

    #[test]
    fn energy_ledger_is_homogeneous() {
        let c = case(11, 4, Direction::ControlBackwardSystem, 10);
        let problem = match &c.problem {
            ControlProblem::Backward(p) => ControlProblem::Backward(BackwardProblem { source: None, ..p.clone() }),
            other => other.clone(),
        };
        let cfg = config(Direction::ControlBackwardSystem);
        let r1 = solve_null_control(&cfg, &problem, &c.system, &c.tree, &c.mesh).unwrap();
        let r3 = solve_null_control(&cfg, &problem.scaled_data(3.0), &c.system, &c.tree, &c.mesh).unwrap();
        let l9 = 9f64.ln();
        assert!((r3.energy.log_lhs - r1.energy.log_lhs - l9).abs() < 1e-8);
        assert!((r3.energy.log_rhs - r1.energy.log_rhs - l9).abs() < 1e-10);
        assert!(r1.energy.log_gap.is_finite());
    }

    #[test]
    fn sweep_flags_zero_data() {
        let c = case(9, 3, Direction::ControlBackwardSystem, 11);
        let problem = c.problem.scaled_data(0.0);
        let t = epsilon_sweep(&config(Direction::ControlBackwardSystem), &problem, &c.system, &c.tree, &c.mesh, &[1e-1, 1e-2, 1e-3])
            .unwrap();
        assert!(t.slope.is_none());
        assert!(t.rows.iter().all(|r| r.residual == 0.0));
        assert!(epsilon_sweep(&config(Direction::ControlBackwardSystem), &problem, &c.system, &c.tree, &c.mesh, &[1e-2, 1e-1, 1e-3])
            .is_err());
    }

    #[test]
    fn slope_fit() {
        let pts: Vec<(f64, f64)> = (0..4).map(|i| (i as f64, 2.0 * i as f64 + 1.0)).collect();
        assert!((fit_slope(&pts) - 2.0).abs() < 1e-14);
    }
}
