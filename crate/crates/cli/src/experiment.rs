//! Turns a validated configuration into meshes, trees, weights and problems.

use nullcontrol::carleman::EnsembleSetup;
use nullcontrol::hum::{ControlProblem, Direction, HumConfig};
use nullcontrol::scenario::{sample_adapted_coefficients, sample_adapted_field, sample_spatial_field};
use nullcontrol::semilinear::{validate, Builtin, PicardConfig};
use nullcontrol::spde::{BackwardProblem, Coefficients, ForwardProblem};
use nullcontrol::weights::{WeightParams, WeightSystem, WeightVariant};
use nullcontrol::{seed_split, ScenarioTree, SpatialMesh};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};

/// Child seeds; every random draw of a run comes from one of these.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct Seeds {
    pub master: u64,
    pub coefficients: u64,
    pub data: u64,
    pub source: u64,
    pub calibration: u64,
    pub test: u64,
    pub probe: u64,
    pub audit: u64,
}

/// Labels passed to `seed_split`; checked for collisions by `selftest`.
pub const SEED_LABELS: [&str; 7] = ["coefficients", "data", "source", "calibration", "test", "probe", "audit"];

impl Seeds {
    pub fn new(master: u64) -> Self {
        let s = |l| seed_split(master, l);
        Self {
            master,
            coefficients: s("coefficients"),
            data: s("data"),
            source: s("source"),
            calibration: s("calibration"),
            test: s("test"),
            probe: s("probe"),
            audit: s("audit"),
        }
    }
}

pub struct Experiment {
    pub config: ExperimentConfig,
    pub mesh: SpatialMesh,
    pub tree: ScenarioTree,
    pub seeds: Seeds,
}

pub fn direction_variant(direction: Direction) -> WeightVariant {
    match direction {
        Direction::ControlBackwardSystem => WeightVariant::BackwardRegularized,
        Direction::ControlForwardSystem => WeightVariant::ForwardRegularized,
    }
}

impl Experiment {
    /// Builds every derived object once so invariant violations surface at load.
    pub fn new(config: ExperimentConfig) -> CliResult<Self> {
        let mc = &config.mesh;
        let mesh = SpatialMesh::new(
            mc.domain[0],
            mc.domain[1],
            mc.points,
            (mc.control[0], mc.control[1]),
            (mc.inner[0], mc.inner[1]),
        )?;
        let tree = ScenarioTree::new(config.tree.steps, config.tree.horizon)?;
        let seeds = Seeds::new(config.seed);
        let exp = Self { config, mesh, tree, seeds };
        for v in WeightVariant::ALL {
            exp.params(v, exp.config.weights.lambda, exp.config.weights.mu)?;
        }
        exp.hum_config(Direction::ControlBackwardSystem).validate()?;
        let p = &exp.config.problem;
        if !(p.diffusion_min > 0.0 && p.diffusion_min < p.diffusion_max) {
            return Err(CliError::Validation(format!(
                "need 0 < diffusion_min < diffusion_max, got {} and {}",
                p.diffusion_min, p.diffusion_max
            )));
        }
        if !(p.data_amplitude >= 0.0 && p.source_amplitude >= 0.0) {
            return Err(CliError::Validation("amplitudes must be nonnegative".into()));
        }
        let h = &exp.config.hum;
        if h.eps_list.windows(2).any(|w| !(w[1] < w[0])) || h.eps_list.iter().any(|e| !(*e > 0.0)) {
            return Err(CliError::Validation("hum.eps_list must be positive and strictly decreasing".into()));
        }
        exp.nonlinearity()?;
        exp.noise_nonlinearity()?;
        let s = &exp.config.semilinear;
        if !(s.tol > 0.0) || s.max_iters == 0 || s.divergence_run == 0 || s.probe_pairs == 0 {
            return Err(CliError::Validation("semilinear tolerances and counts must be positive".into()));
        }
        Ok(exp)
    }

    pub fn params(&self, variant: WeightVariant, lambda: f64, mu: f64) -> CliResult<WeightParams> {
        let w = &self.config.weights;
        let eps = if variant.is_regularized() { w.eps } else { 0.0 };
        Ok(WeightParams::new(lambda, mu, w.m, self.tree.horizon, variant, eps)?)
    }

    pub fn system(&self, variant: WeightVariant, lambda: f64, mu: f64) -> CliResult<WeightSystem> {
        Ok(WeightSystem::new(self.params(variant, lambda, mu)?, &self.mesh, &self.tree)?)
    }

    pub fn default_system(&self, direction: Direction) -> CliResult<WeightSystem> {
        self.system(direction_variant(direction), self.config.weights.lambda, self.config.weights.mu)
    }

    pub fn hum_config(&self, direction: Direction) -> HumConfig {
        let h = &self.config.hum;
        HumConfig {
            eps: h.eps,
            cg_tol: h.cg_tol,
            cg_max_iters: h.cg_max_iters,
            kappa: self.config.weights.kappa,
            direction,
            gradient_penalty: h.gradient_penalty,
            implicitness: h.implicitness,
            scaling: h.scaling,
        }
    }

    pub fn picard_config(&self) -> PicardConfig {
        let s = &self.config.semilinear;
        PicardConfig { tol: s.tol, max_iters: s.max_iters, divergence_run: s.divergence_run }
    }

    pub fn coefficients(&self) -> CliResult<Coefficients> {
        let p = &self.config.problem;
        let a = sample_adapted_coefficients(
            &self.tree,
            &self.mesh,
            self.seeds.coefficients,
            p.diffusion_min,
            p.diffusion_max,
            p.roughness,
        )?;
        Ok(Coefficients::with_diffusion(a, p.diffusion_min))
    }

    fn source(&self) -> Option<nullcontrol::AdaptedField> {
        let amp = self.config.problem.source_amplitude;
        (amp > 0.0).then(|| {
            let mut rng = ChaCha8Rng::seed_from_u64(self.seeds.source);
            sample_adapted_field(&self.tree, &self.mesh, &mut rng, amp)
        })
    }

    pub fn backward_problem(&self) -> CliResult<BackwardProblem> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seeds.data);
        let terminal = sample_adapted_field(&self.tree, &self.mesh, &mut rng, self.config.problem.data_amplitude);
        Ok(BackwardProblem { coeffs: self.coefficients()?, source: self.source(), flux: None, terminal })
    }

    pub fn forward_problem(&self) -> CliResult<ForwardProblem> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seeds.data);
        let initial = sample_spatial_field(&self.mesh, &mut rng, self.config.problem.data_amplitude);
        Ok(ForwardProblem { coeffs: self.coefficients()?, source: self.source(), flux: None, noise: None, initial })
    }

    pub fn problem(&self, direction: Direction) -> CliResult<ControlProblem> {
        Ok(match direction {
            Direction::ControlBackwardSystem => ControlProblem::Backward(self.backward_problem()?),
            Direction::ControlForwardSystem => ControlProblem::Forward(self.forward_problem()?),
        })
    }

    /// Drift nonlinearity, audited against its declared properties.
    pub fn nonlinearity(&self) -> CliResult<Builtin> {
        let p = &self.config.problem;
        let f = Builtin::new(p.nonlinearity, p.lipschitz)?;
        validate(&f, 1000, self.seeds.audit)?;
        Ok(f)
    }

    pub fn noise_nonlinearity(&self) -> CliResult<Builtin> {
        let p = &self.config.problem;
        let f = Builtin::new(p.noise_nonlinearity, p.noise_lipschitz)?;
        validate(&f, 1000, self.seeds.audit)?;
        Ok(f)
    }

    pub fn ensemble_setup(&self) -> EnsembleSetup {
        let c = &self.config;
        EnsembleSetup {
            points: c.mesh.points,
            n_steps: c.tree.steps,
            horizon: c.tree.horizon,
            ctrl_interval: (c.mesh.control[0], c.mesh.control[1]),
            inner_interval: (c.mesh.inner[0], c.mesh.inner[1]),
            weight_m: c.weights.m,
            implicitness: c.hum.implicitness,
            amplitude: c.problem.data_amplitude,
        }
    }
}
