//! Subcommand bodies. Each writes its tables through the sink and returns
//! a JSON summary plus any numerical failures.

use std::path::Path;
use std::time::Instant;

use nullcontrol::carleman::{calibrate_constant, test_constant, REPORT_COLUMNS};
use nullcontrol::hum::{epsilon_sweep, solve_null_control, ControlProblem, ControlResult, Direction};
use nullcontrol::semilinear::{
    Nonlinearity,
    contraction_probe, fixed_point_gap, max_ratio_per_cell, picard_backward, picard_forward, validate, Builtin,
    BuiltinKind, PicardRun,
};
use nullcontrol::weights::{GammaCurve, WeightParams, WeightSystem, WeightVariant};
use nullcontrol::{AdaptedField, ScenarioTree};
use serde::Serialize;
use serde_json::{json, Value};

use crate::checks::{
    adjoint_gate, deterministic_gate, gradient_gate, junction_rows, oracle_gate, regularization_gate, seed_collisions, Gate,
};
use crate::config::ExperimentConfig;
use crate::error::CliResult;
use crate::experiment::{Experiment, Seeds, SEED_LABELS};
use crate::output::{num, LineChart, OutputFile, OutputSink, RowContext};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Weights,
    Carleman,
    HumBackward,
    HumForward,
    SemilinearBackward,
    SemilinearForward,
    ProbeContraction,
    Selftest,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Self::Weights => "weights",
            Self::Carleman => "carleman",
            Self::HumBackward => "hum-backward",
            Self::HumForward => "hum-forward",
            Self::SemilinearBackward => "semilinear-backward",
            Self::SemilinearForward => "semilinear-forward",
            Self::ProbeContraction => "probe-contraction",
            Self::Selftest => "selftest",
        }
    }
}

#[derive(Debug, Default)]
struct Outcome {
    summary: Value,
    /// Numerical failures; any entry maps to exit status 2.
    failures: Vec<String>,
}

#[derive(Serialize)]
pub struct RunManifest<'a> {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: &'static str,
    pub config: &'a ExperimentConfig,
    pub seeds: Seeds,
    pub threads: usize,
    pub status: &'static str,
    pub diagnostics: Vec<String>,
    pub summary: Value,
    pub outputs: &'a [OutputFile],
    pub wall_clock_seconds: f64,
}

#[derive(Debug)]
pub struct RunReport {
    pub exit_code: u8,
    pub summary: Value,
    pub diagnostics: Vec<String>,
    pub outputs: Vec<OutputFile>,
}

/// Runs `command` and always tries to leave a manifest in `out_dir`.
pub fn run(command: Command, config: ExperimentConfig, out_dir: &Path) -> CliResult<RunReport> {
    let start = Instant::now();
    let seeds = Seeds::new(config.seed);
    let exp = Experiment::new(config.clone())?;
    let mut sink = OutputSink::create(out_dir, exp.config.output.svg)?;
    let result = match command {
        Command::Weights => weights(&exp, &mut sink),
        Command::Carleman => carleman(&exp, &mut sink),
        Command::HumBackward => hum(&exp, &mut sink, Direction::ControlBackwardSystem),
        Command::HumForward => hum(&exp, &mut sink, Direction::ControlForwardSystem),
        Command::SemilinearBackward => semilinear(&exp, &mut sink, Direction::ControlBackwardSystem),
        Command::SemilinearForward => semilinear(&exp, &mut sink, Direction::ControlForwardSystem),
        Command::ProbeContraction => probe(&exp, &mut sink),
        Command::Selftest => selftest(&exp, &mut sink),
    };
    let (status, exit_code, outcome, diagnostics) = match result {
        Ok(o) if o.failures.is_empty() => ("ok", 0, o, Vec::new()),
        Ok(o) => {
            let d = o.failures.clone();
            ("numerical-failure", 2, o, d)
        }
        Err(e) => {
            let code = e.exit_code();
            let status = if code == 2 { "numerical-failure" } else { "invalid" };
            (status, code, Outcome::default(), vec![e.to_string()])
        }
    };
    let manifest = RunManifest {
        tool: "nullcontrol",
        version: env!("CARGO_PKG_VERSION"),
        command: command.name(),
        config: &exp.config,
        seeds,
        threads: rayon::current_num_threads(),
        status,
        diagnostics: diagnostics.clone(),
        summary: outcome.summary.clone(),
        outputs: sink.files(),
        wall_clock_seconds: start.elapsed().as_secs_f64(),
    };
    sink.manifest(&manifest)?;
    Ok(RunReport { exit_code, summary: outcome.summary, diagnostics, outputs: sink.files().to_vec() })
}

fn context(exp: &Experiment, lambda: f64, mu: f64) -> RowContext {
    let c = &exp.config;
    RowContext::new(&[
        ("seed", c.seed.to_string()),
        ("lambda", lambda.to_string()),
        ("mu", mu.to_string()),
        ("m", c.weights.m.to_string()),
        ("M", c.mesh.points.to_string()),
        ("N", c.tree.steps.to_string()),
    ])
}

fn weights(exp: &Experiment, sink: &mut OutputSink) -> CliResult<Outcome> {
    let w = &exp.config.weights;
    let ctx = context(exp, w.lambda, w.mu);
    let system = exp.system(w.variant, w.lambda, w.mu)?;
    let base = &system.base;
    sink.table(
        "beta.csv",
        &ctx,
        &["x", "beta", "beta_prime"],
        (0..exp.mesh.m).map(|i| {
            let x = exp.mesh.x(i);
            vec![num(x), num(base.beta(x)), num(base.beta_prime(x))]
        }),
    )?;

    let horizon = exp.tree.horizon;
    let mut gamma_rows = Vec::new();
    let mut chart = LineChart::new("time profiles", "t", "gamma").log_axes(false, true);
    for variant in WeightVariant::ALL {
        let curve = GammaCurve::new(exp.params(variant, w.lambda, w.mu)?)?;
        let mut pts = Vec::new();
        for j in 0..=400 {
            let t = horizon * j as f64 / 400.0;
            if let Ok([g, d, _]) = curve.eval(t) {
                gamma_rows.push(vec![variant.name().to_string(), num(t), num(g), num(d)]);
                pts.push((t, g));
            }
        }
        chart = chart.with_series(variant.name(), pts);
    }
    sink.table("gamma.csv", &ctx, &["variant", "t", "gamma", "dgamma"], gamma_rows)?;
    sink.chart("gamma.svg", &chart)?;

    let junctions = junction_rows(w.lambda, w.mu, w.m, horizon, w.eps)?;
    sink.table(
        "junctions.csv",
        &ctx,
        &["variant", "t", "jump_value", "jump_d1", "jump_d2", "passed"],
        junctions.iter().map(|j| {
            vec![
                j.variant.name().to_string(),
                num(j.t),
                num(j.jumps[0]),
                num(j.jumps[1]),
                num(j.jumps[2]),
                j.passed.to_string(),
            ]
        }),
    )?;
    sink.table(
        "weight_table.csv",
        &ctx,
        &["variant", "t", "x", "log_xi", "ell"],
        system
            .table_rows(&exp.mesh)
            .into_iter()
            .map(|r| vec![w.variant.name().to_string(), num(r[0]), num(r[1]), num(r[2]), num(r[3])]),
    )?;
    let gap = regularization_gate(w.lambda, w.mu, w.m, w.eps, &exp.mesh, &exp.tree)?;
    let mut failures = Vec::new();
    let bad = junctions.iter().filter(|j| !j.passed).count();
    if bad > 0 {
        failures.push(format!("{bad} junction checks failed"));
    }
    if gap > 0.0 {
        failures.push(format!("regularized weights exceed the unregularized ones by {gap:e}"));
    }
    Ok(Outcome {
        summary: json!({
            "variant": w.variant.name(),
            "sigma": exp.params(w.variant, w.lambda, w.mu)?.sigma(),
            "a0": base.a0,
            "beta_center": base.center,
            "junctions_passed": junctions.len() - bad,
            "junctions_total": junctions.len(),
            "regularization_gap": gap,
        }),
        failures,
    })
}

fn carleman(exp: &Experiment, sink: &mut OutputSink) -> CliResult<Outcome> {
    let c = &exp.config.carleman;
    let w = &exp.config.weights;
    let setup = exp.ensemble_setup();
    let cal = calibrate_constant(c.estimate, c.calibration_size, w.lambda, w.mu, exp.seeds.calibration, &setup)?;
    let test = test_constant(&cal, c.test_size, w.lambda, w.mu, exp.seeds.test, &setup, c.margin)?;
    let ctx = RowContext::new(&[
        ("master_seed", exp.config.seed.to_string()),
        ("M", exp.config.mesh.points.to_string()),
        ("N", exp.config.tree.steps.to_string()),
    ]);
    let mut header = vec!["phase"];
    header.extend(REPORT_COLUMNS);
    let rows = cal
        .reports
        .iter()
        .map(|r| ("calibration", r))
        .chain(test.reports.iter().map(|r| ("test", r)))
        .map(|(phase, r)| std::iter::once(phase.to_string()).chain(r.csv_row()).collect());
    sink.table("carleman.csv", &ctx, &header, rows)?;
    Ok(Outcome {
        summary: json!({
            "estimate": c.estimate.tag(),
            "log_c_cal": num(cal.log_c_cal),
            "dispersion": num(cal.dispersion),
            "degenerate": cal.degenerate,
            "margin": c.margin,
            "violations": test.violations,
            "max_excess": num(test.max_excess),
        }),
        failures: Vec::new(),
    })
}

fn control_rows(exp: &Experiment, r: &ControlResult, effective: Option<&AdaptedField>) -> Vec<Vec<String>> {
    let mut rows = Vec::new();
    for p in 0..exp.tree.interior_count() {
        let depth = ScenarioTree::depth_of(p);
        for i in 0..exp.mesh.m {
            let mut row = vec![
                p.to_string(),
                ScenarioTree::path(p),
                depth.to_string(),
                num(exp.tree.time(depth)),
                num(exp.mesh.x(i)),
                num(r.u_hat.node(p)[i]),
            ];
            if let Some(big) = &r.noise_control {
                row.push(num(big.node(p)[i]));
            }
            if let Some(e) = effective {
                row.push(num(e.node(p)[i]));
            }
            rows.push(row);
        }
    }
    rows
}

fn control_header(direction: Direction, effective: bool) -> Vec<&'static str> {
    let mut h = vec!["node", "path", "depth", "t", "x", "u"];
    if direction == Direction::ControlForwardSystem {
        h.push("U");
    }
    if effective {
        h.push("U_star");
    }
    h
}

fn write_result(exp: &Experiment, sink: &mut OutputSink, ctx: &RowContext, r: &ControlResult, direction: Direction) -> CliResult<()> {
    sink.table("control.csv", ctx, &control_header(direction, false), control_rows(exp, r, None))?;
    sink.table(
        "cg_trace.csv",
        ctx,
        &["iteration", "J", "relative_residual"],
        r.cg_trace.iter().map(|c| vec![c.iter.to_string(), num(c.j), num(c.rel_residual)]),
    )?;
    let energy = r
        .energy
        .lhs
        .iter()
        .map(|t| ("lhs", t))
        .chain(r.energy.rhs.iter().map(|t| ("rhs", t)))
        .chain(r.energy.extra.iter().map(|t| ("extra", t)))
        .map(|(side, t)| vec![side.to_string(), t.name.clone(), num(t.log_value)]);
    sink.table("energy.csv", ctx, &["side", "term", "log_value"], energy)?;
    Ok(())
}

fn result_summary(r: &ControlResult, eps: f64) -> Value {
    json!({
        "residual": r.residual,
        "j_value": r.j_value,
        "j_zero": r.j_zero,
        "residual_bound_holds": r.residual <= 2.0 * eps * r.j_zero,
        "control_cost": r.control_cost,
        "dual_residual": r.dual_residual,
        "cg_iterations": r.cg_iters(),
        "converged": r.converged,
        "control_offset": r.control_offset,
        "state_offset": r.state_offset,
        "energy_log_lhs": num(r.energy.log_lhs),
        "energy_log_rhs": num(r.energy.log_rhs),
        "energy_log_gap": num(r.energy.log_gap),
    })
}

fn hum(exp: &Experiment, sink: &mut OutputSink, direction: Direction) -> CliResult<Outcome> {
    let w = &exp.config.weights;
    let ctx = context(exp, w.lambda, w.mu);
    let system = exp.default_system(direction)?;
    let problem = exp.problem(direction)?;
    let cfg = exp.hum_config(direction);
    let r = solve_null_control(&cfg, &problem, &system, &exp.tree, &exp.mesh)?;
    write_result(exp, sink, &ctx, &r, direction)?;
    let mut failures = Vec::new();
    if !r.converged {
        failures.push(format!("CG stopped after {} iterations above tolerance", r.cg_iters()));
    }
    let mut summary = result_summary(&r, cfg.eps);
    let eps_list = &exp.config.hum.eps_list;
    if eps_list.len() >= 3 {
        let sweep = epsilon_sweep(&cfg, &problem, &system, &exp.tree, &exp.mesh, eps_list)?;
        sink.table(
            "sweep.csv",
            &ctx,
            &["eps", "residual", "J", "control_cost", "cg_iterations", "converged"],
            sweep.rows.iter().map(|s| {
                vec![num(s.eps), num(s.residual), num(s.j), num(s.control_cost), s.cg_iters.to_string(), s.converged.to_string()]
            }),
        )?;
        let chart = LineChart::new("penalization sweep", "eps", "E|endpoint|^2")
            .log_axes(true, true)
            .with_series("residual", sweep.rows.iter().map(|s| (s.eps, s.residual)).collect())
            .with_series("control cost", sweep.rows.iter().map(|s| (s.eps, s.control_cost)).collect());
        sink.chart("sweep.svg", &chart)?;
        let costs: Vec<f64> = sweep.rows.iter().map(|s| s.control_cost).collect();
        let spread = costs.iter().cloned().fold(0.0, f64::max) / costs.iter().cloned().fold(f64::INFINITY, f64::min);
        summary["sweep_slope"] = sweep.slope.map_or(Value::Null, |s| json!(s));
        summary["sweep_control_cost_spread"] = json!(num(spread));
        if let Some(bad) = sweep.rows.iter().find(|s| !s.converged) {
            failures.push(format!("CG did not converge at eps = {}", bad.eps));
        }
    }
    let chart = LineChart::new("CG convergence", "iteration", "relative residual")
        .log_axes(false, true)
        .with_series("residual", r.cg_trace.iter().map(|c| (c.iter as f64, c.rel_residual)).collect());
    sink.chart("cg.svg", &chart)?;
    Ok(Outcome { summary, failures })
}

fn semilinear(exp: &Experiment, sink: &mut OutputSink, direction: Direction) -> CliResult<Outcome> {
    let w = &exp.config.weights;
    let ctx = context(exp, w.lambda, w.mu);
    let system = exp.default_system(direction)?;
    let cfg = exp.hum_config(direction);
    let picard = exp.picard_config();
    let f = exp.nonlinearity()?;
    let (run, problem): (PicardRun, ControlProblem) = match direction {
        Direction::ControlBackwardSystem => {
            let p = exp.backward_problem()?;
            (picard_backward(&f, &p, &system, &cfg, &picard, &exp.tree, &exp.mesh)?, ControlProblem::Backward(p))
        }
        Direction::ControlForwardSystem => {
            let p = exp.forward_problem()?;
            let f2 = exp.noise_nonlinearity()?;
            (picard_forward(&f, &f2, &p, &system, &cfg, &picard, &exp.tree, &exp.mesh)?, ControlProblem::Forward(p))
        }
    };
    sink.table(
        "picard.csv",
        &ctx,
        &["iteration", "log_residual_B", "rho", "residual_endpoint"],
        run.trace.records.iter().map(|r| {
            vec![r.iteration.to_string(), num(r.log_residual_b), r.rho.map_or(String::new(), num), num(r.residual_endpoint)]
        }),
    )?;
    let effective = run.effective_noise_control.as_ref();
    sink.table(
        "control.csv",
        &ctx,
        &control_header(direction, effective.is_some()),
        control_rows(exp, &run.result, effective),
    )?;
    let chart = LineChart::new("Picard iteration", "iteration", "log relative update")
        .with_series("log residual", run.trace.records.iter().map(|r| (r.iteration as f64, r.log_residual_b)).collect());
    sink.chart("picard.svg", &chart)?;
    let gap = fixed_point_gap(&f, &run, &problem, &system, &cfg, &exp.tree, &exp.mesh)?;
    let mut summary = result_summary(&run.result, cfg.eps);
    summary["outcome"] = json!(run.trace.outcome);
    summary["iterations"] = json!(run.trace.iterations);
    summary["fixed_point_gap"] = json!(gap);
    summary["log_source_norm"] = json!(num(run.trace.log_source_norm));
    summary["nonlinearity"] = json!(f.name());
    let mut failures = Vec::new();
    if !run.trace.converged {
        failures.push(format!("Picard iteration stopped without converging ({:?})", run.trace.outcome));
    }
    if !run.result.converged {
        failures.push("inner CG solve did not converge".into());
    }
    Ok(Outcome { summary, failures })
}

fn probe(exp: &Experiment, sink: &mut OutputSink) -> CliResult<Outcome> {
    let s = &exp.config.semilinear;
    let grid: Vec<(f64, f64)> = s.probe_mus.iter().flat_map(|&mu| s.probe_lambdas.iter().map(move |&l| (l, mu))).collect();
    let f = exp.nonlinearity()?;
    let cfg = exp.hum_config(Direction::ControlBackwardSystem);
    let problem = exp.backward_problem()?;
    let build = |lambda: f64, mu: f64| {
        let c = &exp.config.weights;
        let params = WeightParams::new(lambda, mu, c.m, exp.tree.horizon, WeightVariant::BackwardRegularized, c.eps)?;
        let system = WeightSystem::new(params, &exp.mesh, &exp.tree)?;
        Ok((system, ControlProblem::Backward(problem.clone())))
    };
    let rows = contraction_probe(&f, &grid, s.probe_pairs, exp.seeds.probe, &cfg, &exp.tree, &exp.mesh, build)?;
    let ctx = RowContext::new(&[
        ("seed", exp.config.seed.to_string()),
        ("m", exp.config.weights.m.to_string()),
        ("M", exp.config.mesh.points.to_string()),
        ("N", exp.config.tree.steps.to_string()),
        ("lipschitz", f.lipschitz().to_string()),
    ]);
    sink.table(
        "probe.csv",
        &ctx,
        &["lambda", "mu", "pair", "ratio"],
        rows.iter().map(|r| vec![num(r.lambda), num(r.mu), r.pair.to_string(), num(r.ratio)]),
    )?;
    let maxima = max_ratio_per_cell(&rows, &grid);
    let trend = trend_holds(&grid, &maxima, s.trend_band);
    let mut chart = LineChart::new("contraction ratio", "lambda", "max ratio");
    for &mu in &s.probe_mus {
        let pts = grid.iter().zip(&maxima).filter(|((_, m), _)| *m == mu).map(|((l, _), r)| (*l, *r)).collect();
        chart = chart.with_series(&format!("mu = {mu}"), pts);
    }
    sink.chart("probe.svg", &chart)?;
    Ok(Outcome {
        summary: json!({
            "cells": grid.iter().zip(&maxima).map(|((l, m), r)| json!({"lambda": l, "mu": m, "max_ratio": r})).collect::<Vec<_>>(),
            "max_ratio": maxima.iter().cloned().fold(0.0, f64::max),
            "trend_nonincreasing_in_lambda": trend,
        }),
        failures: Vec::new(),
    })
}

/// Whether the ratio is nonincreasing in `lambda` at every fixed `mu`,
/// allowing each step to rise by the relative `band`.
pub fn trend_holds(grid: &[(f64, f64)], ratios: &[f64], band: f64) -> bool {
    let mut mus: Vec<f64> = grid.iter().map(|g| g.1).collect();
    mus.dedup();
    mus.iter().all(|&mu| {
        let mut cells: Vec<(f64, f64)> = grid.iter().zip(ratios).filter(|(g, _)| g.1 == mu).map(|(g, r)| (g.0, *r)).collect();
        cells.sort_by(|a, b| a.0.total_cmp(&b.0));
        cells.windows(2).all(|w| w[1].1 <= w[0].1 * (1.0 + band))
    })
}

/// Gate suite on fixed small instances, independent of the problem block.
pub fn selftest_gates(exp: &Experiment) -> CliResult<Vec<Gate>> {
    let seed = exp.seeds.master;
    let w = &exp.config.weights;
    let det = deterministic_gate(21, 6)?;
    let junctions = junction_rows(w.lambda, w.mu, w.m, exp.tree.horizon, w.eps)?;
    let failed = junctions.iter().filter(|j| !j.passed).count();
    let mut gates = vec![
        Gate::at_most("adjoint", adjoint_gate(21, 6, 10, seed)?, 1e-11),
        Gate::at_most("gradient", gradient_gate(21, 6, 10, seed)?, 1e-6),
        Gate::at_most("dense-oracle", oracle_gate(5, 3, seed)?, 1e-8),
        Gate::at_most("deterministic-control", det.control, 1e-6),
        Gate::at_most("deterministic-residual", det.residual, 1e-6),
        Gate::at_most("deterministic-martingale", det.martingale, 1e-12),
        Gate::at_most("junctions-failed", failed as f64, 0.0),
        Gate::at_most("regularization-gap", regularization_gate(w.lambda, w.mu, w.m, w.eps, &exp.mesh, &exp.tree)?, 0.0),
        Gate::at_most("seed-collisions", seed_collisions(&[seed], &SEED_LABELS, 1000) as f64, 0.0),
    ];
    for kind in [BuiltinKind::Zero, BuiltinKind::SinTanh, BuiltinKind::Saturation] {
        let f = Builtin::new(kind, 1.0)?;
        let audit = validate(&f, 1000, exp.seeds.audit);
        let ratio = audit.map_or(f64::INFINITY, |a| a.max_ratio);
        gates.push(Gate::at_most(&format!("lipschitz-{kind:?}"), ratio, 1.01 * f.lipschitz()));
    }
    Ok(gates)
}

fn selftest(exp: &Experiment, sink: &mut OutputSink) -> CliResult<Outcome> {
    let gates = selftest_gates(exp)?;
    let ctx = RowContext::new(&[("seed", exp.config.seed.to_string())]);
    sink.table(
        "selftest.csv",
        &ctx,
        &["gate", "value", "threshold", "passed"],
        gates.iter().map(|g| vec![g.name.clone(), num(g.value), num(g.threshold), g.passed.to_string()]),
    )?;
    let failures = gates.iter().filter(|g| !g.passed).map(|g| format!("gate {} failed: {:e}", g.name, g.value)).collect();
    Ok(Outcome { summary: json!({ "gates": gates }), failures })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trend_band() {
        let grid = [(1.0, 1.0), (2.0, 1.0), (4.0, 1.0)];
        assert!(trend_holds(&grid, &[0.5, 0.4, 0.3], 0.1));
        assert!(trend_holds(&grid, &[0.5, 0.54, 0.58], 0.1));
        assert!(!trend_holds(&grid, &[0.5, 0.6, 0.3], 0.1));
    }

    #[test]
    fn invalid_nesting_is_a_validation_error() {
        let mut c = ExperimentConfig::default();
        c.mesh.inner = [0.2, 0.4];
        let dir = std::env::temp_dir().join("nullcontrol-invalid-nesting");
        let e = run(Command::Selftest, c, &dir).unwrap_err();
        assert_eq!(e.exit_code(), 1);
        assert!(e.to_string().contains("inner"), "{e}");
    }
}
