//! Versioned TOML experiment configuration with leaf-key overrides.

use std::path::Path;

use nullcontrol::carleman::EstimateId;
use nullcontrol::hum::WeightScaling;
use nullcontrol::semilinear::BuiltinKind;
use nullcontrol::weights::WeightVariant;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default)]
    pub mesh: MeshConfig,
    #[serde(default)]
    pub tree: TreeConfig,
    #[serde(default)]
    pub weights: WeightsConfig,
    #[serde(default)]
    pub problem: ProblemConfig,
    #[serde(default)]
    pub hum: HumBlock,
    #[serde(default)]
    pub carleman: CarlemanBlock,
    #[serde(default)]
    pub semilinear: SemilinearBlock,
    #[serde(default)]
    pub output: OutputConfig,
}

fn default_seed() -> u64 {
    20240601
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            seed: default_seed(),
            mesh: MeshConfig::default(),
            tree: TreeConfig::default(),
            weights: WeightsConfig::default(),
            problem: ProblemConfig::default(),
            hum: HumBlock::default(),
            carleman: CarlemanBlock::default(),
            semilinear: SemilinearBlock::default(),
            output: OutputConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MeshConfig {
    /// Number of interior grid points.
    pub points: usize,
    pub domain: [f64; 2],
    pub control: [f64; 2],
    pub inner: [f64; 2],
}

impl Default for MeshConfig {
    fn default() -> Self {
        Self { points: 41, domain: [0.0, 1.0], control: [0.25, 0.45], inner: [0.30, 0.40] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TreeConfig {
    pub steps: usize,
    pub horizon: f64,
}

impl Default for TreeConfig {
    fn default() -> Self {
        Self { steps: 8, horizon: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WeightsConfig {
    pub lambda: f64,
    pub mu: f64,
    pub m: f64,
    /// Variant tabulated by `weights`; solvers always use the regularized
    /// variant of their direction.
    pub variant: WeightVariant,
    pub eps: f64,
    pub kappa: f64,
}

impl Default for WeightsConfig {
    fn default() -> Self {
        Self { lambda: 1.0, mu: 1.0, m: 1.0, variant: WeightVariant::BackwardRegularized, eps: 0.01, kappa: 30.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProblemConfig {
    /// Diffusion coefficients are drawn in `[diffusion_min, diffusion_max]`;
    /// `diffusion_min` is the ellipticity constant.
    pub diffusion_min: f64,
    pub diffusion_max: f64,
    pub roughness: f64,
    /// Amplitude of the terminal (backward) or initial (forward) data.
    pub data_amplitude: f64,
    /// Amplitude of an additional random source; zero disables it.
    pub source_amplitude: f64,
    pub nonlinearity: BuiltinKind,
    pub lipschitz: f64,
    /// Noise nonlinearity of the forward semilinear system.
    pub noise_nonlinearity: BuiltinKind,
    pub noise_lipschitz: f64,
}

impl Default for ProblemConfig {
    fn default() -> Self {
        Self {
            diffusion_min: 0.5,
            diffusion_max: 1.5,
            roughness: 0.3,
            data_amplitude: 1.0,
            source_amplitude: 0.0,
            nonlinearity: BuiltinKind::SinTanh,
            lipschitz: 1.0,
            noise_nonlinearity: BuiltinKind::Saturation,
            noise_lipschitz: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HumBlock {
    pub eps: f64,
    /// Strictly decreasing; fewer than three values skips the sweep.
    pub eps_list: Vec<f64>,
    pub cg_tol: f64,
    pub cg_max_iters: usize,
    pub gradient_penalty: bool,
    pub implicitness: f64,
    pub scaling: WeightScaling,
}

impl Default for HumBlock {
    fn default() -> Self {
        Self {
            eps: 1e-2,
            eps_list: vec![1e-1, 1e-2, 1e-3, 1e-4],
            cg_tol: 1e-10,
            cg_max_iters: 5000,
            gradient_penalty: true,
            implicitness: 1.0,
            scaling: WeightScaling::Anchored,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CarlemanBlock {
    pub estimate: EstimateId,
    pub calibration_size: usize,
    pub test_size: usize,
    /// Allowed excess of a test member over the calibrated constant, in log units.
    pub margin: f64,
}

impl Default for CarlemanBlock {
    fn default() -> Self {
        Self { estimate: EstimateId::C1, calibration_size: 100, test_size: 100, margin: 10f64.ln() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SemilinearBlock {
    pub tol: f64,
    pub max_iters: usize,
    pub divergence_run: usize,
    pub probe_lambdas: Vec<f64>,
    pub probe_mus: Vec<f64>,
    pub probe_pairs: usize,
    /// Relative band within which a rising ratio still counts as nonincreasing.
    pub trend_band: f64,
}

impl Default for SemilinearBlock {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iters: 50,
            divergence_run: 5,
            probe_lambdas: vec![1.0, 2.0, 4.0],
            probe_mus: vec![1.0, 2.0],
            probe_pairs: 4,
            trend_band: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub directory: String,
    pub svg: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { directory: "out".into(), svg: true }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str, overrides: &[String]) -> CliResult<Self> {
        let mut value: toml::Value =
            toml::from_str(text).map_err(|e| CliError::Validation(format!("config does not parse: {e}")))?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let config: Self =
            value.try_into().map_err(|e: toml::de::Error| CliError::Validation(format!("config rejected: {e}")))?;
        if config.version != CONFIG_VERSION {
            return Err(CliError::Validation(format!(
                "unsupported config version {} (expected {CONFIG_VERSION})",
                config.version
            )));
        }
        Ok(config)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> CliResult<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?,
            None => format!("version = {CONFIG_VERSION}\n"),
        };
        Self::from_toml_str(&text, overrides)
    }
}

/// Applies `dotted.key=value`; the value is read as a TOML literal and
/// falls back to a bare string.
fn apply_override(root: &mut toml::Value, spec: &str) -> CliResult<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| CliError::Validation(format!("override `{spec}` is not of the form key=value")))?;
    let key = key.trim();
    let parsed: toml::Value = toml::from_str::<toml::Table>(&format!("v = {}", raw.trim()))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.trim().to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Validation(format!("override key `{key}` is malformed")));
    }
    let mut node = root;
    for part in &parts[..parts.len() - 1] {
        let table = node
            .as_table_mut()
            .ok_or_else(|| CliError::Validation(format!("override `{key}` descends into a non-table")))?;
        node = table.entry(part.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    let table = node
        .as_table_mut()
        .ok_or_else(|| CliError::Validation(format!("override `{key}` descends into a non-table")))?;
    table.insert(parts[parts.len() - 1].to_string(), parsed);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let c = ExperimentConfig::default();
        let text = toml::to_string(&c).unwrap();
        assert_eq!(ExperimentConfig::from_toml_str(&text, &[]).unwrap(), c);
        assert_eq!(ExperimentConfig::from_toml_str("version = 1", &[]).unwrap(), c);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(ExperimentConfig::from_toml_str("version = 1\n[mesh]\npoint = 3", &[]).is_err());
        assert!(ExperimentConfig::from_toml_str("version = 1\nfoo = 3", &[]).is_err());
        assert!(ExperimentConfig::from_toml_str("version = 2", &[]).is_err());
        assert!(ExperimentConfig::from_toml_str("", &[]).is_err());
    }

    #[test]
    fn overrides_hit_leaves() {
        let c = ExperimentConfig::from_toml_str(
            "version = 1",
            &["hum.eps=1e-3".into(), "carleman.estimate=CB".into(), "mesh.control=[0.2, 0.5]".into()],
        )
        .unwrap();
        assert_eq!(c.hum.eps, 1e-3);
        assert_eq!(c.carleman.estimate, EstimateId::CB);
        assert_eq!(c.mesh.control, [0.2, 0.5]);
        assert!(ExperimentConfig::from_toml_str("version = 1", &["hum.epsilon=1".into()]).is_err());
        assert!(ExperimentConfig::from_toml_str("version = 1", &["noequals".into()]).is_err());
    }
}
