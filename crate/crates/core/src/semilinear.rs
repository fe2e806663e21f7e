//! Picard drivers for semilinear null control.
//!
//! The nonlinear source is frozen at the previous iterate, the linear
//! control problem is solved with that source, and the nonlinearity is
//! re-evaluated on the controlled state. Distances between sources are
//! measured in the clamped control-weight norm of the HUM functional.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hum::{assemble_functional, control_spec, solve_with_start, ControlProblem, ControlResult, FunctionalWeights, HumConfig};
use crate::mesh::SpatialMesh;
use crate::scenario::{sample_adapted_field, AdaptedField, ScenarioTree};
use crate::spde::{BackwardProblem, ForwardProblem, StatePair};
use crate::weights::{Layout, WeightSystem};

/// Pointwise nonlinearity `F(t, x, y, dy/dx, Y)` with a declared
/// Lipschitz constant; forward-equation nonlinearities ignore `Y`.
pub trait Nonlinearity: Sync {
    fn lipschitz(&self) -> f64;
    fn eval(&self, t: f64, x: f64, y: f64, dy: f64, big_y: f64) -> f64;
    fn name(&self) -> String;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BuiltinKind {
    /// `0`.
    Zero,
    /// `L (sin y + tanh y_x + Y / 2)`.
    SinTanh,
    /// `L tanh y`.
    Saturation,
}

/// Built-in nonlinearity scaled by its Lipschitz constant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Builtin {
    pub kind: BuiltinKind,
    pub lipschitz: f64,
}

impl Builtin {
    pub fn new(kind: BuiltinKind, lipschitz: f64) -> Result<Self> {
        if !(lipschitz >= 0.0 && lipschitz.is_finite()) {
            return Err(Error::Config(format!("Lipschitz constant must be finite and nonnegative, got {lipschitz}")));
        }
        Ok(Self { kind, lipschitz })
    }

    pub fn zero() -> Self {
        Self { kind: BuiltinKind::Zero, lipschitz: 0.0 }
    }
}

impl Nonlinearity for Builtin {
    fn lipschitz(&self) -> f64 {
        match self.kind {
            BuiltinKind::Zero => 0.0,
            _ => self.lipschitz,
        }
    }

    fn eval(&self, _t: f64, _x: f64, y: f64, dy: f64, big_y: f64) -> f64 {
        match self.kind {
            BuiltinKind::Zero => 0.0,
            BuiltinKind::SinTanh => self.lipschitz * (y.sin() + dy.tanh() + 0.5 * big_y),
            BuiltinKind::Saturation => self.lipschitz * y.tanh(),
        }
    }

    fn name(&self) -> String {
        format!("{:?}(L={})", self.kind, self.lipschitz)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LipschitzAudit {
    /// Largest `|F(t, x, 0, 0, 0)|` seen.
    pub max_at_zero: f64,
    /// Largest `|dF| / (|dy| + |d grad| + |dY|)` seen.
    pub max_ratio: f64,
    pub samples: usize,
}

/// Randomized audit of `F(., ., 0, 0, 0) = 0` and of the declared
/// Lipschitz bound, with 1% slack, on `samples` argument pairs.
pub fn validate(f: &dyn Nonlinearity, samples: usize, seed: u64) -> Result<LipschitzAudit> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let l = f.lipschitz();
    let mut max_at_zero = 0.0f64;
    let mut max_ratio = 0.0f64;
    for _ in 0..samples {
        let t = rng.random_range(0.0..1.0);
        let x = rng.random_range(0.0..1.0);
        max_at_zero = max_at_zero.max(f.eval(t, x, 0.0, 0.0, 0.0).abs());
        let mut arg = || rng.random_range(-5.0..5.0);
        let a = [arg(), arg(), arg()];
        let b = [arg(), arg(), arg()];
        let df = (f.eval(t, x, a[0], a[1], a[2]) - f.eval(t, x, b[0], b[1], b[2])).abs();
        let d = (a[0] - b[0]).abs() + (a[1] - b[1]).abs() + (a[2] - b[2]).abs();
        if d > 0.0 {
            max_ratio = max_ratio.max(df / d);
        }
    }
    if max_at_zero != 0.0 {
        return Err(Error::Config(format!("{} does not vanish at zero (|F| = {max_at_zero:e})", f.name())));
    }
    if max_ratio > 1.01 * l {
        return Err(Error::Config(format!(
            "{} exceeds its declared Lipschitz constant {l}: observed {max_ratio}",
            f.name()
        )));
    }
    Ok(LipschitzAudit { max_at_zero, max_ratio, samples })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PicardConfig {
    /// Stop when the relative source update falls below this.
    pub tol: f64,
    pub max_iters: usize,
    /// Abort after this many consecutive ratios above one.
    pub divergence_run: usize,
}

impl Default for PicardConfig {
    fn default() -> Self {
        Self { tol: 1e-8, max_iters: 50, divergence_run: 5 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum PicardOutcome {
    Converged,
    IterationCap,
    Diverged,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PicardRecord {
    pub iteration: usize,
    /// `ln` of the relative source update in the weighted norm.
    pub log_residual_b: f64,
    /// Ratio of consecutive absolute updates; absent on the first step.
    pub rho: Option<f64>,
    pub residual_endpoint: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FixedPointTrace {
    pub records: Vec<PicardRecord>,
    pub outcome: PicardOutcome,
    pub converged: bool,
    pub iterations: usize,
    /// Unclamped `log E sum lambda^-3 mu^-4 xi^-3 theta^-2 phi^2` of the final source.
    pub log_source_norm: f64,
}

#[derive(Debug, Clone)]
pub struct PicardRun {
    pub result: ControlResult,
    pub trace: FixedPointTrace,
    /// Source the returned control was computed with.
    pub source: AdaptedField,
    /// `U - F2(y, grad y)` for the forward driver.
    pub effective_noise_control: Option<AdaptedField>,
}

/// `sqrt(E sum_k dt h w phi^2)` over non-leaf nodes with the clamped
/// control weights `w` of the functional.
pub fn b_norm(weights: &FunctionalWeights, tree: &ScenarioTree, mesh: &SpatialMesh, phi: &AdaptedField) -> f64 {
    let mut acc = 0.0;
    for p in 0..tree.interior_count() {
        let k = ScenarioTree::depth_of(p);
        let q = ScenarioTree::probability(k) * tree.dt * mesh.h;
        acc += q * phi.node(p).iter().zip(&weights.control[k]).map(|(v, w)| w * v * v).sum::<f64>();
    }
    acc.sqrt()
}

fn difference(a: &AdaptedField, b: &AdaptedField) -> AdaptedField {
    let mut d = a.clone();
    d.axpy(-1.0, b);
    d
}

/// `F` evaluated on a state at every non-leaf node; zero at the leaves.
pub fn evaluate_source(
    f: &dyn Nonlinearity,
    state: &StatePair,
    with_martingale: bool,
    tree: &ScenarioTree,
    mesh: &SpatialMesh,
) -> AdaptedField {
    let m = mesh.m;
    let mut out = AdaptedField::zeros(tree, m);
    let mut grad = vec![0.0; m];
    for p in 0..tree.interior_count() {
        let t = tree.time(ScenarioTree::depth_of(p));
        let y = state.state.node(p);
        mesh.gradient_into(y, &mut grad);
        let big = state.martingale.node(p);
        for (i, o) in out.node_mut(p).iter_mut().enumerate() {
            let yy = if with_martingale { big[i] } else { 0.0 };
            *o = f.eval(t, mesh.x(i), y[i], grad[i], yy);
        }
    }
    out
}

fn with_source(problem: &ControlProblem, phi: &AdaptedField) -> ControlProblem {
    let add = |s: &Option<AdaptedField>| {
        let mut out = phi.clone();
        if let Some(base) = s {
            out.axpy(1.0, base);
        }
        Some(out)
    };
    match problem {
        ControlProblem::Backward(p) => ControlProblem::Backward(BackwardProblem { source: add(&p.source), ..p.clone() }),
        ControlProblem::Forward(p) => ControlProblem::Forward(ForwardProblem { source: add(&p.source), ..p.clone() }),
    }
}

struct Driver<'a> {
    f: &'a dyn Nonlinearity,
    problem: &'a ControlProblem,
    system: &'a WeightSystem,
    config: &'a HumConfig,
    tree: &'a ScenarioTree,
    mesh: &'a SpatialMesh,
    weights: FunctionalWeights,
}

impl<'a> Driver<'a> {
    fn new(
        f: &'a dyn Nonlinearity,
        problem: &'a ControlProblem,
        system: &'a WeightSystem,
        config: &'a HumConfig,
        tree: &'a ScenarioTree,
        mesh: &'a SpatialMesh,
    ) -> Result<Self> {
        let weights = assemble_functional(config, problem, system, tree, mesh)?.weights().clone();
        Ok(Self { f, problem, system, config, tree, mesh, weights })
    }

    fn with_martingale(&self) -> bool {
        matches!(self.problem, ControlProblem::Backward(_))
    }

    /// Controlled solve with source `phi` and the image `K(phi)`.
    fn apply(&self, phi: &AdaptedField, warm: Option<&[f64]>) -> Result<(ControlResult, AdaptedField)> {
        let p = with_source(self.problem, phi);
        let r = solve_with_start(self.config, &p, self.system, self.tree, self.mesh, warm)?;
        let next = evaluate_source(self.f, &r.state, self.with_martingale(), self.tree, self.mesh);
        Ok((r, next))
    }

    fn norm(&self, phi: &AdaptedField) -> f64 {
        b_norm(&self.weights, self.tree, self.mesh, phi)
    }

    fn run(&self, picard: &PicardConfig) -> Result<(ControlResult, FixedPointTrace, AdaptedField)> {
        if self.f.lipschitz() > 0.0 {
            let params = &self.system.params;
            if params.lambda < 1.0 || params.mu < 1.0 {
                log::warn!("lambda, mu below 1: outside the regime where contraction is expected");
            }
        }
        let pack = |r: &ControlResult| {
            let f = assemble_functional(self.config, &with_source(self.problem, &AdaptedField::zeros(self.tree, self.mesh.m)), self.system, self.tree, self.mesh)?;
            Ok::<_, Error>(f.pack(&r.u_hat, r.noise_control.as_ref()))
        };
        let mut phi = AdaptedField::zeros(self.tree, self.mesh.m);
        let mut records = Vec::new();
        let mut prev_diff: Option<f64> = None;
        let mut above_one = 0;
        let mut warm: Option<Vec<f64>> = None;
        let mut outcome = PicardOutcome::IterationCap;
        let mut last;
        let mut iteration = 0;
        loop {
            iteration += 1;
            let (r, next) = self.apply(&phi, warm.as_deref())?;
            let diff = self.norm(&difference(&next, &phi));
            let scale = self.norm(&next).max(self.norm(&phi));
            let rel = if diff == 0.0 { 0.0 } else { diff / scale };
            let rho = prev_diff.map(|d| if d == 0.0 { 0.0 } else { diff / d });
            records.push(PicardRecord { iteration, log_residual_b: rel.ln(), rho, residual_endpoint: r.residual });
            above_one = if rho.is_some_and(|v| v > 1.0) { above_one + 1 } else { 0 };
            prev_diff = Some(diff);
            warm = Some(pack(&r)?);
            last = (r, phi);
            if rel < picard.tol {
                outcome = PicardOutcome::Converged;
                break;
            }
            if above_one >= picard.divergence_run {
                outcome = PicardOutcome::Diverged;
                break;
            }
            if iteration >= picard.max_iters {
                break;
            }
            phi = next;
        }
        let (result, source) = last;
        let log_source_norm = self.system_log_norm(&source)?;
        let trace = FixedPointTrace {
            records,
            outcome,
            converged: outcome == PicardOutcome::Converged,
            iterations: iteration,
            log_source_norm,
        };
        Ok((result, trace, source))
    }

    fn system_log_norm(&self, phi: &AdaptedField) -> Result<f64> {
        let p = &self.system.params;
        let params = p.with_variant(p.variant.unregularized(), 0.0)?;
        let ws = WeightSystem::with_base(params, self.system.base.clone(), self.mesh, self.tree)?;
        ws.weighted_expectation_norm(phi, &control_spec(), Layout::Parent, None)
    }
}

/// Semilinear backward system: source `F(y, grad y, Y)`, control steering `y(0)` to zero.
pub fn picard_backward(
    f: &dyn Nonlinearity,
    problem: &BackwardProblem,
    system: &WeightSystem,
    config: &HumConfig,
    picard: &PicardConfig,
    tree: &ScenarioTree,
    mesh: &SpatialMesh,
) -> Result<PicardRun> {
    let problem = ControlProblem::Backward(problem.clone());
    let driver = Driver::new(f, &problem, system, config, tree, mesh)?;
    let (result, trace, source) = driver.run(picard)?;
    Ok(PicardRun { result, trace, source, effective_noise_control: None })
}

/// Semilinear forward system with drift `F1(y, grad y)` and noise
/// `F2(y, grad y) + U`. The noise nonlinearity is absorbed into the
/// control: the iteration solves the `F2 = 0` problem and reports
/// `U* = U - F2(y, grad y)` as the control of the original system.
pub fn picard_forward(
    f1: &dyn Nonlinearity,
    f2: &dyn Nonlinearity,
    problem: &ForwardProblem,
    system: &WeightSystem,
    config: &HumConfig,
    picard: &PicardConfig,
    tree: &ScenarioTree,
    mesh: &SpatialMesh,
) -> Result<PicardRun> {
    let problem = ControlProblem::Forward(problem.clone());
    let driver = Driver::new(f1, &problem, system, config, tree, mesh)?;
    let (result, trace, source) = driver.run(picard)?;
    let f2_on_state = evaluate_source(f2, &result.state, false, tree, mesh);
    let effective = result.noise_control.as_ref().map(|u| difference(u, &f2_on_state));
    Ok(PicardRun { result, trace, source, effective_noise_control: effective })
}

/// Relative gap `|K(phi) - phi|_B / |phi|_B` of a finished run.
pub fn fixed_point_gap(
    f: &dyn Nonlinearity,
    run: &PicardRun,
    problem: &ControlProblem,
    system: &WeightSystem,
    config: &HumConfig,
    tree: &ScenarioTree,
    mesh: &SpatialMesh,
) -> Result<f64> {
    let driver = Driver::new(f, problem, system, config, tree, mesh)?;
    let again = evaluate_source(f, &run.result.state, driver.with_martingale(), tree, mesh);
    let diff = driver.norm(&difference(&again, &run.source));
    let scale = driver.norm(&again).max(driver.norm(&run.source));
    Ok(if diff == 0.0 { 0.0 } else { diff / scale })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ProbeRow {
    pub lambda: f64,
    pub mu: f64,
    pub pair: usize,
    pub ratio: f64,
}

/// Two-point contraction ratios `|K a - K b|_B / |a - b|_B` for `pairs`
/// random source pairs per `(lambda, mu)` cell. `build` returns the
/// weight system and problem of a cell.
pub fn contraction_probe<B>(
    f: &dyn Nonlinearity,
    grid: &[(f64, f64)],
    pairs: usize,
    seed: u64,
    config: &HumConfig,
    tree: &ScenarioTree,
    mesh: &SpatialMesh,
    build: B,
) -> Result<Vec<ProbeRow>>
where
    B: Fn(f64, f64) -> Result<(WeightSystem, ControlProblem)> + Sync,
{
    let cells = grid
        .par_iter()
        .map(|&(lambda, mu)| {
            let (system, problem) = build(lambda, mu)?;
            let driver = Driver::new(f, &problem, &system, config, tree, mesh)?;
            let mut rng = ChaCha8Rng::seed_from_u64(crate::seed::seed_split(seed, "probe-sources"));
            (0..pairs)
                .map(|pair| {
                    let a = sample_adapted_field(tree, mesh, &mut rng, 1.0);
                    let b = sample_adapted_field(tree, mesh, &mut rng, 1.0);
                    let (_, ka) = driver.apply(&a, None)?;
                    let (_, kb) = driver.apply(&b, None)?;
                    let den = driver.norm(&difference(&a, &b));
                    let ratio = driver.norm(&difference(&ka, &kb)) / den;
                    Ok(ProbeRow { lambda, mu, pair, ratio })
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(cells.into_iter().flatten().collect())
}

/// Largest ratio per grid cell, in grid order.
pub fn max_ratio_per_cell(rows: &[ProbeRow], grid: &[(f64, f64)]) -> Vec<f64> {
    grid.iter()
        .map(|&(l, m)| {
            rows.iter().filter(|r| r.lambda == l && r.mu == m).map(|r| r.ratio).fold(0.0, f64::max)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hum::{solve_null_control, Direction};
    use crate::scenario::{sample_adapted_coefficients, sample_spatial_field};
    use crate::spde::Coefficients;
    use crate::weights::{WeightParams, WeightVariant};

    fn grid() -> (ScenarioTree, SpatialMesh) {
        (ScenarioTree::new(4, 0.5).unwrap(), SpatialMesh::new(0.0, 1.0, 15, (0.2, 0.6), (0.3, 0.5)).unwrap())
    }

    fn backward(tree: &ScenarioTree, mesh: &SpatialMesh, lambda: f64, mu: f64) -> (WeightSystem, BackwardProblem) {
        let a = sample_adapted_coefficients(tree, mesh, 3, 0.5, 1.5, 0.3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let params = WeightParams::new(lambda, mu, 1.0, 0.5, WeightVariant::BackwardRegularized, 0.01).unwrap();
        let system = WeightSystem::new(params, mesh, tree).unwrap();
        let problem = BackwardProblem {
            coeffs: Coefficients::with_diffusion(a, 0.5),
            source: None,
            flux: None,
            terminal: sample_adapted_field(tree, mesh, &mut rng, 1.0),
        };
        (system, problem)
    }

    #[test]
    fn builtins_pass_audit() {
        for kind in [BuiltinKind::Zero, BuiltinKind::SinTanh, BuiltinKind::Saturation] {
            let f = Builtin::new(kind, 0.7).unwrap();
            let audit = validate(&f, 1000, 1).unwrap();
            assert_eq!(audit.max_at_zero, 0.0);
            assert!(audit.max_ratio <= 1.01 * f.lipschitz());
        }
        assert!(Builtin::new(BuiltinKind::SinTanh, -1.0).is_err());
    }

    struct Shifted;
    impl Nonlinearity for Shifted {
        fn lipschitz(&self) -> f64 {
            1.0
        }
        fn eval(&self, _: f64, _: f64, y: f64, _: f64, _: f64) -> f64 {
            y + 0.1
        }
        fn name(&self) -> String {
            "shifted".into()
        }
    }

    struct Steep;
    impl Nonlinearity for Steep {
        fn lipschitz(&self) -> f64 {
            1.0
        }
        fn eval(&self, _: f64, _: f64, y: f64, _: f64, _: f64) -> f64 {
            3.0 * y
        }
        fn name(&self) -> String {
            "steep".into()
        }
    }

    #[test]
    fn audit_rejects_bad_nonlinearities() {
        assert!(validate(&Shifted, 100, 2).is_err());
        assert!(validate(&Steep, 100, 2).is_err());
    }

    #[test]
    fn linear_case_is_one_step() {
        let (tree, mesh) = grid();
        let (system, problem) = backward(&tree, &mesh, 1.0, 1.0);
        let cfg = HumConfig::default();
        let run = picard_backward(&Builtin::zero(), &problem, &system, &cfg, &PicardConfig::default(), &tree, &mesh).unwrap();
        assert_eq!(run.trace.iterations, 1);
        assert!(run.trace.converged);
        let direct = solve_null_control(&cfg, &ControlProblem::Backward(problem), &system, &tree, &mesh).unwrap();
        assert_eq!(run.result.u_hat, direct.u_hat);
        assert_eq!(run.result.residual, direct.residual);
    }

    #[test]
    fn backward_picard_converges() {
        let (tree, mesh) = grid();
        let (system, problem) = backward(&tree, &mesh, 2.0, 2.0);
        let cfg = HumConfig::default();
        let f = Builtin::new(BuiltinKind::SinTanh, 0.5).unwrap();
        let run = picard_backward(&f, &problem, &system, &cfg, &PicardConfig::default(), &tree, &mesh).unwrap();
        assert!(run.trace.converged, "{:?}", run.trace.records);
        assert!(run.trace.records.iter().filter_map(|r| r.rho).all(|r| r < 1.0));
        let cp = ControlProblem::Backward(problem);
        let gap = fixed_point_gap(&f, &run, &cp, &system, &cfg, &tree, &mesh).unwrap();
        assert!(gap < 1e-8);
        assert!(run.result.residual <= 2.0 * cfg.eps * run.result.j_zero);
    }

    #[test]
    fn forward_absorbs_noise_nonlinearity() {
        let (tree, mesh) = grid();
        let a = sample_adapted_coefficients(&tree, &mesh, 5, 0.5, 1.5, 0.3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let params = WeightParams::new(2.0, 2.0, 1.0, 0.5, WeightVariant::ForwardRegularized, 0.01).unwrap();
        let system = WeightSystem::new(params, &mesh, &tree).unwrap();
        let problem = ForwardProblem {
            coeffs: Coefficients::with_diffusion(a, 0.5),
            source: None,
            flux: None,
            noise: None,
            initial: sample_spatial_field(&mesh, &mut rng, 1.0),
        };
        let cfg = HumConfig { direction: Direction::ControlForwardSystem, ..HumConfig::default() };
        let pc = PicardConfig::default();
        let f2 = Builtin::new(BuiltinKind::Saturation, 1.0).unwrap();
        let zero = Builtin::zero();
        let base = picard_forward(&zero, &zero, &problem, &system, &cfg, &pc, &tree, &mesh).unwrap();
        assert_eq!(base.trace.iterations, 1);
        let run = picard_forward(&zero, &f2, &problem, &system, &cfg, &pc, &tree, &mesh).unwrap();
        assert_eq!(run.result.state, base.result.state);
        let u = run.result.noise_control.as_ref().unwrap();
        let star = run.effective_noise_control.as_ref().unwrap();
        let f2y = evaluate_source(&f2, &run.result.state, false, &tree, &mesh);
        for p in 0..tree.interior_count() {
            for i in 0..mesh.m {
                assert_eq!(star.node(p)[i], u.node(p)[i] - f2y.node(p)[i]);
            }
        }
    }

    #[test]
    fn probe_scales_with_lipschitz_constant() {
        let (tree, mesh) = grid();
        let cfg = HumConfig::default();
        let build = |l: f64, m: f64| {
            let (s, p) = backward(&tree, &mesh, l, m);
            Ok((s, ControlProblem::Backward(p)))
        };
        let g = [(1.0, 1.0)];
        let zero = contraction_probe(&Builtin::zero(), &g, 2, 1, &cfg, &tree, &mesh, build).unwrap();
        assert!(zero.iter().all(|r| r.ratio == 0.0));
        let sat1 = Builtin::new(BuiltinKind::Saturation, 0.5).unwrap();
        let sat2 = Builtin::new(BuiltinKind::Saturation, 1.0).unwrap();
        let r1 = contraction_probe(&sat1, &g, 2, 1, &cfg, &tree, &mesh, build).unwrap();
        let r2 = contraction_probe(&sat2, &g, 2, 1, &cfg, &tree, &mesh, build).unwrap();
        for (a, b) in r1.iter().zip(&r2) {
            assert!((b.ratio / a.ratio - 2.0).abs() < 0.4);
        }
    }
}
