//! WebAssembly front end for the static page in `www/`.
//!
//! Every export returns a JSON string; the plain Rust functions behind them
//! are usable (and tested) natively.

use nullcontrol::hum::{solve_null_control, ControlProblem, Direction, HumConfig};
use nullcontrol::scenario::{sample_adapted_coefficients, sample_adapted_field};
use nullcontrol::spde::{BackwardProblem, Coefficients};
use nullcontrol::weights::{GammaCurve, WeightParams, WeightSystem, WeightVariant};
use nullcontrol::{expectation, ScenarioTree, SpatialMesh};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use wasm_bindgen::prelude::*;

pub type DemoResult<T> = Result<T, nullcontrol::Error>;

#[derive(Debug, Serialize)]
pub struct Curve {
    pub variant: &'static str,
    /// `(t, gamma)`; singular samples are dropped.
    pub points: Vec<(f64, f64)>,
}

/// Time profiles of all four weight variants.
pub fn gamma_curves(lambda: f64, mu: f64, m: f64, horizon: f64, eps: f64, samples: usize) -> DemoResult<Vec<Curve>> {
    let samples = samples.max(2);
    WeightVariant::ALL
        .iter()
        .map(|&v| {
            let e = if v.is_regularized() { eps } else { 0.0 };
            let curve = GammaCurve::new(WeightParams::new(lambda, mu, m, horizon, v, e)?)?;
            let points = (0..=samples)
                .map(|k| horizon * k as f64 / samples as f64)
                .filter_map(|t| curve.eval(t).ok().map(|g| (t, g[0])))
                .filter(|p| p.1.is_finite())
                .collect();
            Ok(Curve { variant: v.name(), points })
        })
        .collect()
}

#[derive(Debug, Serialize)]
pub struct Heatmap {
    pub times: Vec<f64>,
    pub xs: Vec<f64>,
    /// `log xi` on `[time slot][grid point]`.
    pub values: Vec<Vec<f64>>,
}

fn demo_mesh(points: usize) -> DemoResult<SpatialMesh> {
    SpatialMesh::new(0.0, 1.0, points, (0.25, 0.45), (0.30, 0.40))
}

fn parse_variant(name: &str) -> DemoResult<WeightVariant> {
    WeightVariant::ALL
        .into_iter()
        .find(|v| v.name() == name)
        .ok_or_else(|| nullcontrol::Error::Config(format!("unknown weight variant {name:?}")))
}

/// Log of the spatial-temporal weight on the tree time slots.
pub fn weight_heatmap(lambda: f64, mu: f64, variant: &str, points: usize, steps: usize) -> DemoResult<Heatmap> {
    let variant = parse_variant(variant)?;
    let mesh = demo_mesh(points)?;
    let tree = ScenarioTree::new(steps, 0.5)?;
    let eps = if variant.is_regularized() { 0.01 } else { 0.0 };
    let sys = WeightSystem::new(WeightParams::new(lambda, mu, 1.0, 0.5, variant, eps)?, &mesh, &tree)?;
    let rows = sys.table_rows(&mesh);
    let values = rows.chunks(mesh.m).map(|r| r.iter().map(|row| row[2]).collect()).collect();
    Ok(Heatmap { times: sys.times().to_vec(), xs: mesh.points(), values })
}

#[derive(Debug, Serialize)]
pub struct HumSummary {
    pub j_zero: f64,
    pub j_value: f64,
    pub residual: f64,
    pub converged: bool,
    pub cg: Vec<f64>,
    pub xs: Vec<f64>,
    /// Expected control at each depth, `[depth][grid point]`.
    pub mean_control: Vec<Vec<f64>>,
}

/// Null control of a small backward problem with random rough coefficients.
pub fn hum_run(points: usize, steps: usize, eps: f64, seed: u64) -> DemoResult<HumSummary> {
    let mesh = demo_mesh(points)?;
    let tree = ScenarioTree::new(steps, 0.5)?;
    let a = sample_adapted_coefficients(&tree, &mesh, seed, 0.5, 1.5, 0.3)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let problem = ControlProblem::Backward(BackwardProblem {
        coeffs: Coefficients::with_diffusion(a, 0.5),
        source: None,
        flux: None,
        terminal: sample_adapted_field(&tree, &mesh, &mut rng, 1.0),
    });
    let params = WeightParams::new(1.0, 1.0, 1.0, 0.5, WeightVariant::BackwardRegularized, 0.01)?;
    let system = WeightSystem::new(params, &mesh, &tree)?;
    let cfg = HumConfig { direction: Direction::ControlBackwardSystem, eps, ..HumConfig::default() };
    let r = solve_null_control(&cfg, &problem, &system, &tree, &mesh)?;
    let mean_control = (0..tree.n_steps).map(|d| expectation(&r.u_hat, &tree, d)).collect::<DemoResult<_>>()?;
    Ok(HumSummary {
        j_zero: r.j_zero,
        j_value: r.j_value,
        residual: r.residual,
        converged: r.converged,
        cg: r.cg_trace.iter().map(|c| c.j).collect(),
        xs: mesh.points(),
        mean_control,
    })
}

fn to_js<T: Serialize>(value: DemoResult<T>) -> Result<String, JsError> {
    let value = value.map_err(|e| JsError::new(&e.to_string()))?;
    serde_json::to_string(&value).map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen(js_name = gammaCurves)]
pub fn gamma_curves_js(lambda: f64, mu: f64, m: f64, eps: f64, samples: usize) -> Result<String, JsError> {
    to_js(gamma_curves(lambda, mu, m, 0.5, eps, samples))
}

#[wasm_bindgen(js_name = weightHeatmap)]
pub fn weight_heatmap_js(lambda: f64, mu: f64, variant: &str, points: usize, steps: usize) -> Result<String, JsError> {
    to_js(weight_heatmap(lambda, mu, variant, points, steps))
}

#[wasm_bindgen(js_name = humRun)]
pub fn hum_run_js(points: usize, steps: usize, eps: f64, seed: u32) -> Result<String, JsError> {
    to_js(hum_run(points, steps, eps, seed as u64))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn curves_cover_all_variants() {
        let curves = gamma_curves(1.0, 1.0, 1.0, 0.5, 0.01, 50).unwrap();
        assert_eq!(curves.len(), 4);
        for c in &curves {
            assert!(c.points.len() >= 40, "{}: {}", c.variant, c.points.len());
            assert!(c.points.iter().all(|p| p.1 >= 1.0 - 1e-12));
        }
    }

    #[test]
    fn heatmap_shape() {
        let h = weight_heatmap(1.0, 1.0, "forward-regularized", 21, 4).unwrap();
        assert_eq!(h.times.len(), 6);
        assert!(h.values.iter().all(|r| r.len() == 21 && r.iter().all(|v| v.is_finite())));
        assert!(weight_heatmap(1.0, 1.0, "sideways", 21, 4).is_err());
    }

    #[test]
    fn small_hum_run_reduces_cost() {
        let s = hum_run(21, 4, 1e-2, 3).unwrap();
        assert!(s.converged);
        assert!(s.j_value <= s.j_zero);
        assert_eq!(s.mean_control.len(), 4);
        let json = serde_json::to_string(&s).unwrap();
        assert!(json.contains("\"cg\""));
    }
}
