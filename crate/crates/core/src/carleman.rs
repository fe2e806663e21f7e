//! Both sides of the four Carleman estimates, evaluated in log domain on
//! solved trajectories, and the calibrate-then-test protocol for their
//! empirical constants.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::SpatialMesh;
use crate::scenario::{
    sample_adapted_coefficients, sample_adapted_field, sample_spatial_field, AdaptedField, ScenarioTree,
};
use crate::seed::seed_split;
use crate::spde::{BackwardProblem, Coefficients, ForwardProblem, StatePair, Stepper};
use crate::weights::{log_sum_exp, Layout, LogTerm, PowerSpec, WeightParams, WeightSystem, WeightVariant};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EstimateId {
    /// L2 estimate for the forward equation without divergence source.
    #[serde(rename = "C1-forward-L2", alias = "C1")]
    C1,
    /// Estimate for the forward equation with a divergence source.
    #[serde(rename = "C2-forward-Hminus1", alias = "C2")]
    C2,
    /// Estimate for the backward equation with a divergence source.
    #[serde(rename = "C3-backward-Hminus1", alias = "C3")]
    C3,
    /// L2 estimate for the backward equation without divergence source.
    #[serde(rename = "CB-backward-L2", alias = "CB")]
    CB,
}

impl EstimateId {
    pub const ALL: [Self; 4] = [Self::C1, Self::C2, Self::C3, Self::CB];

    pub fn tag(self) -> &'static str {
        match self {
            Self::C1 => "C1-forward-L2",
            Self::C2 => "C2-forward-Hminus1",
            Self::C3 => "C3-backward-Hminus1",
            Self::CB => "CB-backward-L2",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|id| {
            let tag = id.tag();
            s.eq_ignore_ascii_case(tag) || s.eq_ignore_ascii_case(&tag[..2])
        })
    }

    pub fn variant(self) -> WeightVariant {
        match self {
            Self::C1 | Self::C2 => WeightVariant::Backward,
            Self::C3 | Self::CB => WeightVariant::Forward,
        }
    }

    pub fn is_forward(self) -> bool {
        matches!(self, Self::C1 | Self::C2)
    }

    pub fn allows_flux(self) -> bool {
        matches!(self, Self::C2 | Self::C3)
    }
}

/// A solved trajectory together with its data.
#[derive(Debug, Clone, Copy)]
pub enum Trajectory<'a> {
    Forward { problem: &'a ForwardProblem, state: &'a AdaptedField },
    Backward { problem: &'a BackwardProblem, state: &'a StatePair },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CarlemanReport {
    pub estimate: EstimateId,
    pub lhs: Vec<LogTerm>,
    pub rhs: Vec<LogTerm>,
    pub log_lhs: f64,
    pub log_rhs: f64,
    pub log_c_emp: f64,
    pub lambda: f64,
    pub mu: f64,
    pub m: f64,
    pub seed: Option<u64>,
    pub degenerate: bool,
}

fn is_nonzero(f: Option<&AdaptedField>) -> bool {
    f.is_some_and(|v| !v.is_zero())
}

fn grad_field(f: &AdaptedField, mesh: &SpatialMesh) -> AdaptedField {
    f.map_nodes(|v| mesh.gradient(v).expect("mesh-sized node"))
}

/// Evaluates every term of estimate `id` on a solved trajectory.
/// `system` must be cached for the estimate's (unregularized) variant.
pub fn eval_estimate(
    id: EstimateId,
    trajectory: Trajectory<'_>,
    system: &WeightSystem,
    mesh: &SpatialMesh,
) -> Result<CarlemanReport> {
    if system.params.variant != id.variant() {
        return Err(Error::EstimateData(format!(
            "{} needs the {} weight, got {}",
            id.tag(),
            id.variant().name(),
            system.params.variant.name()
        )));
    }
    let p = &system.params;
    let (mu, m) = (p.mu, p.m);
    let norm = |f: &AdaptedField, spec: PowerSpec, layout: Layout, mask: Option<&[bool]>| {
        system.weighted_expectation_norm(f, &spec, layout, mask)
    };
    let term = |name: &str, v: f64| LogTerm { name: name.to_string(), log_value: v };
    let z_sq = PowerSpec::new(3.0, 4.0, 3.0, 2.0);
    let grad_sq = PowerSpec::new(1.0, 2.0, 1.0, 2.0);
    let theta_sq = PowerSpec::new(0.0, 0.0, 0.0, 2.0);
    let obs = Some(mesh.ctrl_mask.as_slice());
    let mut lhs = Vec::new();
    let mut rhs = Vec::new();

    match (id.is_forward(), trajectory) {
        (true, Trajectory::Forward { problem, state }) => {
            if !id.allows_flux() && is_nonzero(problem.flux.as_ref()) {
                return Err(Error::EstimateData(format!("{} requires a zero divergence source", id.tag())));
            }
            let grad = grad_field(state, mesh);
            match id {
                EstimateId::C1 => {
                    let c = 2.0 * mu * (6.0 * m + 1.0);
                    lhs.push(term("terminal", norm(state, PowerSpec::new(2.0, 3.0, 0.0, 2.0).with_const(c), Layout::Terminal, None)?));
                    lhs.push(term("terminal-gradient", norm(&grad, theta_sq, Layout::Terminal, None)?));
                }
                _ => {
                    lhs.push(term("terminal", norm(state, PowerSpec::new(1.0, 2.0, 1.0, 2.0), Layout::Terminal, None)?));
                }
            }
            lhs.push(term("gradient", norm(&grad, grad_sq, Layout::Child, None)?));
            lhs.push(term("state", norm(state, z_sq, Layout::Child, None)?));
            rhs.push(term("observation", norm(state, z_sq, Layout::Child, obs)?));
            if let Some(f) = &problem.source {
                rhs.push(term("source", norm(f, theta_sq, Layout::Parent, None)?));
            }
            match id {
                EstimateId::C1 => {
                    if let Some(g) = &problem.noise {
                        rhs.push(term("noise", norm(g, PowerSpec::new(2.0, 2.0, 3.0, 2.0), Layout::Parent, None)?));
                        rhs.push(term("noise-gradient", norm(&grad_field(g, mesh), theta_sq, Layout::Parent, None)?));
                    }
                }
                _ => {
                    let spec = PowerSpec::new(2.0, 2.0, 2.0, 2.0);
                    if let Some(g) = &problem.noise {
                        rhs.push(term("noise", norm(g, spec, Layout::Parent, None)?));
                    }
                    if let Some(b) = &problem.flux {
                        rhs.push(term("flux", norm(b, spec, Layout::Parent, None)?));
                    }
                }
            }
        }
        (false, Trajectory::Backward { problem, state }) => {
            if !id.allows_flux() && is_nonzero(problem.flux.as_ref()) {
                return Err(Error::EstimateData(format!("{} requires a zero divergence source", id.tag())));
            }
            let z = &state.state;
            let grad = grad_field(z, mesh);
            let c = 6.0 * mu * m;
            match id {
                EstimateId::C3 => {
                    lhs.push(term("initial", norm(z, PowerSpec::new(1.0, 2.0, 0.0, 2.0).with_const(c), Layout::Initial, None)?));
                }
                _ => {
                    lhs.push(term("initial", norm(z, PowerSpec::new(2.0, 3.0, 0.0, 2.0).with_const(c), Layout::Initial, None)?));
                    lhs.push(term("initial-gradient", norm(&grad, theta_sq, Layout::Initial, None)?));
                }
            }
            lhs.push(term("gradient", norm(&grad, grad_sq, Layout::Parent, None)?));
            lhs.push(term("state", norm(z, z_sq, Layout::Parent, None)?));
            rhs.push(term("observation", norm(z, z_sq, Layout::Parent, obs)?));
            if let Some(f) = &problem.source {
                rhs.push(term("source", norm(f, theta_sq, Layout::Parent, None)?));
            }
            let second = PowerSpec::new(2.0, 2.0, 3.0, 2.0);
            rhs.push(term("martingale", norm(&state.martingale, second, Layout::Parent, None)?));
            if id == EstimateId::C3 {
                if let Some(b) = &problem.flux {
                    rhs.push(term("flux", norm(b, second, Layout::Parent, None)?));
                }
            }
        }
        _ => {
            return Err(Error::EstimateData(format!("{} was given a trajectory of the wrong kind", id.tag())));
        }
    }

    let log_lhs = log_sum_exp(&lhs.iter().map(|t| t.log_value).collect::<Vec<_>>());
    let log_rhs = log_sum_exp(&rhs.iter().map(|t| t.log_value).collect::<Vec<_>>());
    let degenerate = log_lhs == f64::NEG_INFINITY || log_rhs == f64::NEG_INFINITY;
    let log_c_emp = if log_lhs == f64::NEG_INFINITY { f64::NEG_INFINITY } else { log_lhs - log_rhs };
    Ok(CarlemanReport {
        estimate: id,
        lhs,
        rhs,
        log_lhs,
        log_rhs,
        log_c_emp,
        lambda: p.lambda,
        mu: p.mu,
        m: p.m,
        seed: None,
        degenerate,
    })
}

/// Grid and generator settings of an estimate ensemble.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnsembleSetup {
    pub points: usize,
    pub n_steps: usize,
    pub horizon: f64,
    pub ctrl_interval: (f64, f64),
    pub inner_interval: (f64, f64),
    pub weight_m: f64,
    pub implicitness: f64,
    /// Scale of all random data; zero gives the degenerate ensemble.
    pub amplitude: f64,
}

impl Default for EnsembleSetup {
    fn default() -> Self {
        Self {
            points: 31,
            n_steps: 8,
            horizon: 0.5,
            ctrl_interval: (0.25, 0.45),
            inner_interval: (0.30, 0.40),
            weight_m: 1.0,
            implicitness: 1.0,
            amplitude: 1.0,
        }
    }
}

/// Random problem of estimate `id` drawn from `seed`, solved and evaluated.
///
/// Coefficients: diffusion in `[0.5, 1.5]` with path-dependent roughness
/// 0.3, drift amplitude 0.3, reaction 0.5 and (backward) coupling 0.2.
/// Data: smooth low-mode fields of unit amplitude times `setup.amplitude`;
/// noise and divergence sources at half that scale.
pub fn sample_report(
    id: EstimateId,
    setup: &EnsembleSetup,
    system: &WeightSystem,
    tree: &ScenarioTree,
    mesh: &SpatialMesh,
    seed: u64,
) -> Result<CarlemanReport> {
    let coeff_seed = seed_split(seed, "coefficients");
    let mut rng = ChaCha8Rng::seed_from_u64(seed_split(seed, "data"));
    let a = sample_adapted_coefficients(tree, mesh, coeff_seed, 0.5, 1.5, 0.3)?;
    let mut coeffs = Coefficients::with_diffusion(a, 0.5);
    coeffs.drift = Some(sample_adapted_field(tree, mesh, &mut rng, 0.3));
    coeffs.reaction = Some(sample_adapted_field(tree, mesh, &mut rng, 0.5));
    let amp = setup.amplitude;
    let mut report = if id.is_forward() {
        let stepper = Stepper::new(tree, mesh, coeffs.clone(), setup.implicitness)?;
        let problem = ForwardProblem {
            coeffs,
            source: Some(sample_adapted_field(tree, mesh, &mut rng, amp)),
            flux: id.allows_flux().then(|| sample_adapted_field(tree, mesh, &mut rng, 0.5 * amp)),
            noise: Some(sample_adapted_field(tree, mesh, &mut rng, 0.5 * amp)),
            initial: sample_spatial_field(mesh, &mut rng, amp),
        };
        let forcing = stepper.forcing(problem.source.as_ref(), problem.flux.as_ref(), None)?;
        let z = stepper.solve_forward(&problem.initial, &forcing, problem.noise.as_ref())?;
        eval_estimate(id, Trajectory::Forward { problem: &problem, state: &z }, system, mesh)?
    } else {
        coeffs.coupling = Some(sample_adapted_field(tree, mesh, &mut rng, 0.2));
        let stepper = Stepper::new(tree, mesh, coeffs.clone(), setup.implicitness)?;
        let problem = BackwardProblem {
            coeffs,
            source: Some(sample_adapted_field(tree, mesh, &mut rng, amp)),
            flux: id.allows_flux().then(|| sample_adapted_field(tree, mesh, &mut rng, 0.5 * amp)),
            terminal: sample_adapted_field(tree, mesh, &mut rng, amp),
        };
        let forcing = stepper.forcing(problem.source.as_ref(), problem.flux.as_ref(), None)?;
        let pair = stepper.solve_backward(&problem.terminal, &forcing)?;
        eval_estimate(id, Trajectory::Backward { problem: &problem, state: &pair }, system, mesh)?
    };
    report.seed = Some(seed);
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Calibration {
    pub estimate: EstimateId,
    /// Maximum of the finite empirical log-constants; `-inf` if none.
    pub log_c_cal: f64,
    /// Interquartile range of the finite empirical log-constants.
    pub dispersion: f64,
    pub degenerate: bool,
    pub reports: Vec<CarlemanReport>,
}

/// Builds grid and weights for an ensemble.
pub fn ensemble_context(
    id: EstimateId,
    setup: &EnsembleSetup,
    lambda: f64,
    mu: f64,
) -> Result<(ScenarioTree, SpatialMesh, WeightSystem)> {
    let mesh = SpatialMesh::new(0.0, 1.0, setup.points, setup.ctrl_interval, setup.inner_interval)?;
    let tree = ScenarioTree::new(setup.n_steps, setup.horizon)?;
    let params = WeightParams::new(lambda, mu, setup.weight_m, setup.horizon, id.variant(), 0.0)?;
    let system = WeightSystem::new(params, &mesh, &tree)?;
    Ok((tree, mesh, system))
}

/// Member `i` of an ensemble uses `seed_split(master, "member-i")`.
pub fn member_seed(master: u64, i: usize) -> u64 {
    seed_split(master, &format!("member-{i}"))
}

pub fn calibrate_constant(
    id: EstimateId,
    ensemble_size: usize,
    lambda: f64,
    mu: f64,
    seed: u64,
    setup: &EnsembleSetup,
) -> Result<Calibration> {
    if ensemble_size < 10 {
        return Err(Error::Config(format!("ensemble size must be at least 10, got {ensemble_size}")));
    }
    let (tree, mesh, system) = ensemble_context(id, setup, lambda, mu)?;
    let reports = (0..ensemble_size)
        .into_par_iter()
        .map(|i| sample_report(id, setup, &system, &tree, &mesh, member_seed(seed, i)))
        .collect::<Result<Vec<_>>>()?;
    let mut values: Vec<f64> = reports.iter().map(|r| r.log_c_emp).filter(|v| v.is_finite()).collect();
    values.sort_by(f64::total_cmp);
    let degenerate = values.is_empty();
    let (log_c_cal, dispersion) = if degenerate {
        (f64::NEG_INFINITY, f64::NAN)
    } else {
        let q = |f: f64| values[((values.len() - 1) as f64 * f).round() as usize];
        (values[values.len() - 1], q(0.75) - q(0.25))
    };
    Ok(Calibration { estimate: id, log_c_cal, dispersion, degenerate, reports })
}

#[derive(Debug, Clone)]
pub struct EnsembleTest {
    pub estimate: EstimateId,
    /// Members with `log_C_emp > log_c_cal + margin`.
    pub violations: usize,
    /// Largest `log_C_emp - log_c_cal` over the fresh members.
    pub max_excess: f64,
    pub reports: Vec<CarlemanReport>,
}

/// Fresh ensemble checked against a calibrated constant with a log-margin.
pub fn test_constant(
    cal: &Calibration,
    ensemble_size: usize,
    lambda: f64,
    mu: f64,
    seed: u64,
    setup: &EnsembleSetup,
    margin: f64,
) -> Result<EnsembleTest> {
    let fresh = calibrate_constant(cal.estimate, ensemble_size, lambda, mu, seed, setup)?;
    let excess = |r: &CarlemanReport| if r.log_c_emp.is_finite() { r.log_c_emp - cal.log_c_cal } else { f64::NEG_INFINITY };
    let violations = fresh.reports.iter().filter(|r| excess(r) > margin).count();
    let max_excess = fresh.reports.iter().map(excess).fold(f64::NEG_INFINITY, f64::max);
    Ok(EnsembleTest { estimate: cal.estimate, violations, max_excess, reports: fresh.reports })
}

/// CSV header matching [`CarlemanReport::csv_row`].
pub const REPORT_COLUMNS: [&str; 8] = ["estimate", "lambda", "mu", "m", "seed", "log_lhs", "log_rhs", "log_C_emp"];

impl CarlemanReport {
    pub fn csv_row(&self) -> [String; 8] {
        [
            self.estimate.tag().to_string(),
            self.lambda.to_string(),
            self.mu.to_string(),
            self.m.to_string(),
            self.seed.map_or(String::new(), |s| s.to_string()),
            self.log_lhs.to_string(),
            self.log_rhs.to_string(),
            self.log_c_emp.to_string(),
        ]
    }
}
