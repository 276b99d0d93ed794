use std::path::Path;

use dlcm::baselines::BaselineConfig;
use dlcm::dgp::DgpConfig;
use dlcm::em::EmConfig;
use dlcm::iblt::{CovariateSpec, ExpectationConfig};
use dlcm::panel::{DiscretizationConfig, PanelSchema, ScreeningConfig};
use dlcm::viterbi::ShareBands;
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Everything a run can be configured with. Every section is optional.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub schema: PanelSchema,
    pub screening: ScreeningConfig,
    pub expectation: ExpectationConfig,
    pub covariates: CovariateSpec,
    /// Applied to the panel before screening when present.
    pub discretization: Option<DiscretizationConfig>,
    pub em: EmConfig,
    pub dgp: DgpConfig,
    pub baseline: BaselineConfig,
    pub bands: ShareBands,
    pub report: ReportConfig,
}

/// Coefficients read by the `report` command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportConfig {
    pub travel_time: String,
    pub interactions: Vec<String>,
    /// Band midpoints for linear extrapolation, aligned with `interactions`.
    pub midpoints: Vec<f64>,
    pub extrapolate_to: Option<f64>,
}

impl Default for ReportConfig {
    fn default() -> Self {
        ReportConfig {
            travel_time: "choice.travel_time".into(),
            interactions: Vec::new(),
            midpoints: Vec::new(),
            extrapolate_to: None,
        }
    }
}

pub fn load(path: Option<&Path>) -> Result<RunConfig, CliError> {
    let Some(path) = path else {
        return Ok(RunConfig::default());
    };
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::usage(format!("cannot read config {}: {e}", path.display())))?;
    parse(&text).map_err(|e| CliError::usage(format!("invalid config {}: {e}", path.display())))
}

pub fn parse(text: &str) -> Result<RunConfig, toml::de::Error> {
    toml::from_str(text)
}

/// Parses `lo:hi:step` into the grid points, endpoints included.
pub fn parse_grid(spec: &str) -> Result<Vec<f64>, String> {
    let parts: Vec<&str> = spec.split(':').collect();
    let [lo, hi, step] = parts.as_slice() else {
        return Err(format!("grid `{spec}` is not of the form lo:hi:step"));
    };
    let num = |s: &str| {
        s.trim()
            .parse::<f64>()
            .map_err(|_| format!("grid `{spec}`: `{s}` is not a number"))
    };
    let (lo, hi, step) = (num(lo)?, num(hi)?, num(step)?);
    if !(step > 0.0) || hi < lo || lo < 0.0 {
        return Err(format!("grid `{spec}` needs 0 <= lo <= hi and step > 0"));
    }
    let n = ((hi - lo) / step + 1e-9).floor() as usize;
    // round to the step's decimals so 0.1 increments print cleanly
    Ok((0..=n)
        .map(|i| ((lo + i as f64 * step) * 1e9).round() / 1e9)
        .collect())
}
