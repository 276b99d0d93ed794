use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use dlcm::baselines::{self, BaselineResult, ChoiceData};
use dlcm::dgp;
use dlcm::em::{self, EmConfig, EstimationResult, GridPoint};
use dlcm::iblt::{CovariateSpec, DesignBuilder, ExpectationConfig};
use dlcm::model::{self, param_names, Theta};
use dlcm::panel::{self, PanelDataset};
use dlcm::pipeline::{self, Prepared};
use dlcm::viterbi::{self, ShareReport};
use serde::{Deserialize, Serialize};

use crate::config::{self, RunConfig};
use crate::manifest::ManifestBuilder;
use crate::{Cli, CliError, Command, ModelKind};

type Result<T> = std::result::Result<T, CliError>;

/// Estimation result with the covariate layout it was fitted on.
#[derive(Debug, Serialize)]
struct ResultDocument<'a> {
    model: &'static str,
    covariates: &'a CovariateSpec,
    expectation: ExpectationConfig,
    #[serde(flatten)]
    result: &'a EstimationResult,
}

/// Parameters needed to decode, read from a result or truth document.
#[derive(Debug, Deserialize)]
struct ParameterDocument {
    covariates: CovariateSpec,
    expectation: ExpectationConfig,
    theta_hat: Theta,
    draws: Option<usize>,
    seed: Option<u64>,
    antithetic: Option<bool>,
}

/// Named coefficients of any result document.
#[derive(Debug, Deserialize)]
struct CoefficientDocument {
    param_names: Vec<String>,
    estimates: Vec<f64>,
}

#[derive(Debug, Serialize)]
struct TruthDocument<'a> {
    model: &'static str,
    covariates: &'a CovariateSpec,
    expectation: ExpectationConfig,
    theta_hat: &'a Theta,
    param_names: Vec<String>,
    estimates: Vec<f64>,
}

#[derive(Debug, Serialize)]
struct BaselineDocument<'a> {
    covariates: &'a CovariateSpec,
    expectation: ExpectationConfig,
    #[serde(flatten)]
    result: &'a BaselineResult,
}

#[derive(Debug, Serialize)]
struct DecodeReport<'a> {
    shares: &'a ShareReport,
    accuracy: Option<f64>,
}

pub fn run(cli: &Cli) -> Result<()> {
    let mut cfg = config::load(cli.config.as_deref())?;
    std::fs::create_dir_all(&cli.out)
        .map_err(|e| CliError::data(format!("cannot create {}: {e}", cli.out.display())))?;
    match &cli.command {
        Command::Simulate => simulate(cli, &mut cfg),
        Command::Screen { panel } => screen(cli, &cfg, panel),
        Command::Estimate { panel, mu_grid, memory } => {
            let grid = mu_grid
                .as_deref()
                .map(config::parse_grid)
                .transpose()
                .map_err(CliError::usage)?;
            estimate(cli, &mut cfg, panel, grid, *memory)
        }
        Command::Decode { panel, result, truth } => decode(cli, &cfg, panel, result, truth.as_deref()),
        Command::Baseline { panel, model, memory } => {
            if *model == ModelKind::Dlcm {
                return estimate(cli, &mut cfg, panel, None, *memory);
            }
            baseline(cli, &mut cfg, panel, *model, *memory)
        }
        Command::Report { result } => report(cli, &cfg, result),
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::data(format!("cannot write {}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)
        .map_err(|e| CliError::data(format!("cannot write {}: {e}", path.display())))?;
    writeln!(w).and_then(|_| w.flush())
        .map_err(|e| CliError::data(format!("cannot write {}: {e}", path.display())))
}

fn write_lines(path: &Path, lines: impl IntoIterator<Item = String>) -> Result<()> {
    let mut w = create(path)?;
    let err = |e: std::io::Error| CliError::data(format!("cannot write {}: {e}", path.display()));
    for line in lines {
        writeln!(w, "{line}").map_err(err)?;
    }
    w.flush().map_err(err)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::data(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::data(format!("invalid document {}: {e}", path.display())))
}

fn finish(cli: &Cli, manifest: ManifestBuilder) -> Result<()> {
    write_json(&cli.out.join("manifest.json"), &manifest.finish())
}

fn num(v: f64) -> String {
    if v.is_finite() {
        format!("{v}")
    } else {
        String::new()
    }
}

fn load_panel(cfg: &RunConfig, path: &Path) -> Result<PanelDataset> {
    let data = panel::load_panel(path, &cfg.schema)?;
    match &cfg.discretization {
        Some(d) => Ok(panel::discretize_covariates(&data, d)?),
        None => Ok(data),
    }
}

fn simulate(cli: &Cli, cfg: &mut RunConfig) -> Result<()> {
    if let Some(s) = cli.seed {
        cfg.dgp.seed = s;
    }
    cfg.dgp.validate()?;
    let mut manifest = ManifestBuilder::start("simulate", cli.config.as_deref(), cfg);
    manifest.seed(cfg.dgp.seed);
    let sim = dgp::simulate(&cfg.dgp)?;
    eprintln!("simulated {} riders", sim.riders.len());

    let out = |name: &str| cli.out.join(name);
    let path = out("panel.csv");
    panel::write_panel(&sim.panel, create(&path)?)?;
    manifest.output(&path);
    let path = out("truth.csv");
    sim.write_truth(create(&path)?)?;
    manifest.output(&path);
    let path = out("attributes_full.csv");
    sim.write_full_attributes(create(&path)?)?;
    manifest.output(&path);
    let path = out("truth.json");
    let theta = &cfg.dgp.true_theta;
    write_json(
        &path,
        &TruthDocument {
            model: "dlcm",
            covariates: &cfg.dgp.covariates,
            expectation: cfg.dgp.expectation(),
            theta_hat: theta,
            param_names: param_names(&cfg.dgp.covariates),
            estimates: theta.to_vec(),
        },
    )?;
    manifest.output(&path);
    finish(cli, manifest)
}

fn screen(cli: &Cli, cfg: &RunConfig, panel_path: &Path) -> Result<()> {
    let mut manifest = ManifestBuilder::start("screen", cli.config.as_deref(), cfg);
    manifest.input(panel_path);
    let data = load_panel(cfg, panel_path)?;
    let (kept, report) = panel::screen_riders(&data, &cfg.screening);
    eprintln!("{} of {} riders survive screening", kept.riders.len(), report.input_riders);
    let path = cli.out.join("screening.json");
    write_json(&path, &report)?;
    manifest.output(&path);
    let path = cli.out.join("screened_panel.csv");
    panel::write_panel(&kept, create(&path)?)?;
    manifest.output(&path);
    finish(cli, manifest)
}

fn prepare(cfg: &RunConfig, data: &PanelDataset, mu: f64) -> Result<Prepared> {
    let expectation = ExpectationConfig { mu, ..cfg.expectation };
    Ok(pipeline::prepare(data, &cfg.screening, &cfg.covariates, expectation)?)
}

fn estimate(
    cli: &Cli,
    cfg: &mut RunConfig,
    panel_path: &Path,
    grid: Option<Vec<f64>>,
    memory: Option<usize>,
) -> Result<()> {
    if let Some(s) = cli.seed {
        cfg.em.seed = s;
    }
    if let Some(m) = memory {
        cfg.expectation.memory = m;
    }
    cfg.em.validate()?;
    cfg.expectation.validate()?;
    cfg.covariates.validate()?;
    let mut manifest = ManifestBuilder::start("estimate", cli.config.as_deref(), cfg);
    manifest.input(panel_path);
    manifest.seed(cfg.em.seed);
    let data = load_panel(cfg, panel_path)?;
    let names = param_names(&cfg.covariates);

    let base = prepare(cfg, &data, cfg.expectation.mu)?;
    let path = cli.out.join("screening.json");
    write_json(&path, &base.report)?;
    manifest.output(&path);
    eprintln!("estimating on {} riders", base.riders.len());

    let result = match grid {
        None => em::em_estimate(&base.riders, &cfg.em, names, cfg.expectation.mu, cfg.expectation.memory)?,
        Some(grid) => {
            let fit = em::grid_search_mu(
                |mu| prepare(cfg, &data, mu).map(|p| p.riders).map_err(|e| dlcm::Error::Validation(e.message)),
                &grid,
                &cfg.em,
                &names,
                cfg.expectation.memory,
                true,
            )?;
            let path = cli.out.join("mu_profile.csv");
            write_lines(&path, profile_rows(&fit.profile))?;
            manifest.output(&path);
            eprintln!("selected mu = {}", fit.best_mu);
            fit.best
        }
    };
    if !result.converged {
        eprintln!("warning: EM did not converge");
    }
    let expectation = ExpectationConfig { mu: result.mu, memory: result.memory };
    write_estimation(cli, &mut manifest, &cfg.covariates, expectation, &result)?;
    finish(cli, manifest)
}

fn profile_rows(profile: &[GridPoint]) -> Vec<String> {
    let mut rows = vec!["mu,loglik,iterations,converged,error".to_string()];
    rows.extend(profile.iter().map(|p| {
        format!(
            "{},{},{},{},{}",
            p.mu,
            p.loglik.map(num).unwrap_or_default(),
            p.iterations.map(|v| v.to_string()).unwrap_or_default(),
            p.converged.map(|v| v.to_string()).unwrap_or_default(),
            p.error.as_deref().unwrap_or("").replace(',', ";"),
        )
    }));
    rows
}

fn write_estimation(
    cli: &Cli,
    manifest: &mut ManifestBuilder,
    covariates: &CovariateSpec,
    expectation: ExpectationConfig,
    result: &EstimationResult,
) -> Result<()> {
    let path = cli.out.join("result.json");
    write_json(
        &path,
        &ResultDocument {
            model: "dlcm",
            covariates,
            expectation,
            result,
        },
    )?;
    manifest.output(&path);

    let path = cli.out.join("estimates.csv");
    let mut rows = vec!["parameter,estimate,std_error,z_value,gradient,at_bound".to_string()];
    for i in 0..result.estimates.len() {
        rows.push(format!(
            "{},{},{},{},{},{}",
            result.param_names[i],
            num(result.estimates[i]),
            num(result.std_errors[i]),
            num(result.z_values[i]),
            num(result.gradient_at_convergence[i]),
            result.at_bound[i],
        ));
    }
    write_lines(&path, rows)?;
    manifest.output(&path);

    let path = cli.out.join("loglik_trace.csv");
    let mut rows = vec!["iteration,loglik".to_string()];
    rows.extend(result.loglik_trace.iter().enumerate().map(|(i, v)| format!("{i},{}", num(*v))));
    write_lines(&path, rows)?;
    manifest.output(&path);
    Ok(())
}

/// Names the first covariate block whose size differs between the fitted
/// parameters and the covariate layout.
fn check_dims(theta: &Theta, spec: &CovariateSpec) -> Result<()> {
    let want = spec.dims();
    if theta.validate(&want).is_ok() {
        return Ok(());
    }
    let have = theta.dims();
    let blocks = [
        ("init_mismatch", have.init_mismatch, &spec.init_mismatch),
        ("init_history", have.init_history, &spec.init_history),
        ("transition_mismatch", have.transition_mismatch, &spec.transition_mismatch),
        ("transition_history", have.transition_history, &spec.transition_history),
        ("fixed", have.fixed, &spec.fixed),
        ("random", have.random, &spec.random),
        ("noncomp_history", have.noncomp_history, &spec.noncomp_history),
    ];
    for (block, n, names) in blocks {
        if n != names.len() {
            return Err(CliError::data(format!(
                "covariate mismatch in {block}: parameters have {n} entries, covariates are [{}]",
                names.join(", ")
            )));
        }
    }
    Err(CliError::data("parameters are inconsistent with the covariate layout"))
}

fn decode(cli: &Cli, cfg: &RunConfig, panel_path: &Path, result_path: &Path, truth: Option<&Path>) -> Result<()> {
    cfg.bands.validate()?;
    let mut manifest = ManifestBuilder::start("decode", cli.config.as_deref(), cfg);
    manifest.input(panel_path);
    manifest.input(result_path);
    let doc: ParameterDocument = read_json(result_path)?;
    check_dims(&doc.theta_hat, &doc.covariates)?;
    let data = load_panel(cfg, panel_path)?;
    for name in doc.covariates.required_attributes() {
        if data.attribute_index(name).is_none() {
            return Err(CliError::data(format!("covariate `{name}` of the fitted model is not in the panel")));
        }
    }
    let em_cfg = EmConfig {
        draws: doc.draws.unwrap_or(cfg.em.draws),
        seed: doc.seed.unwrap_or(cfg.em.seed),
        antithetic: doc.antithetic.unwrap_or(cfg.em.antithetic),
        ..cfg.em.clone()
    };
    manifest.seed(em_cfg.seed);

    let (kept, _) = panel::screen_riders(&data, &cfg.screening);
    let riders = if kept.riders.is_empty() {
        Vec::new()
    } else {
        DesignBuilder::new(&kept.attribute_names, &doc.covariates, doc.expectation, cfg.screening.init_rule())?
            .with_min_model_occasions(cfg.screening.min_model_occasions)
            .build_all(&kept)?
    };
    let draws = em_cfg.draw_set(riders.len(), doc.covariates.random.len());
    let decoded = viterbi::decode_all(&riders, &doc.theta_hat, &draws)?;
    let totals: Vec<usize> = riders.iter().map(|r| r.total_occasions()).collect();
    let shares = viterbi::class_share(&decoded, &totals, cfg.bands)?;

    let accuracy = match truth {
        Some(path) if !decoded.is_empty() => {
            manifest.input(path);
            let file = File::open(path).map_err(|e| CliError::data(format!("cannot read {}: {e}", path.display())))?;
            let truth = dgp::read_truth(file)?;
            let map: HashMap<&str, &[model::Class]> =
                truth.iter().map(|(k, v)| (k.as_str(), v.as_slice())).collect();
            Some(dgp::accuracy(&decoded, &map)?)
        }
        _ => None,
    };
    if let Some(a) = accuracy {
        eprintln!("accuracy {a:.4}");
    }

    let path = cli.out.join("decoded.csv");
    viterbi::write_decoded(&decoded, create(&path)?)?;
    manifest.output(&path);
    let path = cli.out.join("decode_report.json");
    write_json(&path, &DecodeReport { shares: &shares, accuracy })?;
    manifest.output(&path);
    finish(cli, manifest)
}

fn baseline(cli: &Cli, cfg: &mut RunConfig, panel_path: &Path, model: ModelKind, memory: Option<usize>) -> Result<()> {
    if let Some(s) = cli.seed {
        cfg.baseline.seed = s;
    }
    if let Some(m) = memory {
        cfg.expectation.memory = m;
    }
    cfg.baseline.validate()?;
    cfg.expectation.validate()?;
    cfg.covariates.validate()?;
    let mut manifest = ManifestBuilder::start("baseline", cli.config.as_deref(), cfg);
    manifest.input(panel_path);
    manifest.seed(cfg.baseline.seed);
    let data = load_panel(cfg, panel_path)?;
    let prepared = prepare(cfg, &data, cfg.expectation.mu)?;
    let choice = ChoiceData::from_processed(&prepared.riders)?;
    let spec = &cfg.covariates;
    let names: Vec<String> = spec
        .fixed
        .iter()
        .chain(&spec.random)
        .map(|n| format!("choice.{n}"))
        .collect();
    let result = match model {
        ModelKind::Mnl => baselines::fit_mnl(&choice, &names, &cfg.baseline)?,
        _ => baselines::fit_lc_mnl(&choice, &names, &cfg.baseline)?,
    };
    for flag in &result.flags {
        eprintln!("flag: {flag}");
    }
    let path = cli.out.join("baseline.json");
    write_json(
        &path,
        &BaselineDocument {
            covariates: spec,
            expectation: cfg.expectation,
            result: &result,
        },
    )?;
    manifest.output(&path);
    let path = cli.out.join("baseline_estimates.csv");
    let mut rows = vec!["parameter,estimate,std_error,z_value".to_string()];
    for i in 0..result.estimates.len() {
        rows.push(format!(
            "{},{},{},{}",
            result.param_names[i],
            num(result.estimates[i]),
            num(result.std_errors[i]),
            num(result.z_values[i]),
        ));
    }
    write_lines(&path, rows)?;
    manifest.output(&path);
    finish(cli, manifest)
}

fn report(cli: &Cli, cfg: &RunConfig, result_path: &Path) -> Result<()> {
    let mut manifest = ManifestBuilder::start("report", cli.config.as_deref(), cfg);
    manifest.input(result_path);
    let doc: CoefficientDocument = read_json(result_path)?;
    let rc = &cfg.report;
    let coef = |name: &str| -> Result<f64> {
        doc.param_names
            .iter()
            .position(|n| n == name)
            .and_then(|i| doc.estimates.get(i).copied())
            .ok_or_else(|| CliError::usage(format!("coefficient `{name}` is not in {}", result_path.display())))
    };
    let base = coef(&rc.travel_time)?;
    let interactions = rc
        .interactions
        .iter()
        .map(|n| coef(n).map(|c| (n.clone(), c)))
        .collect::<Result<Vec<_>>>()?;
    let multipliers = model::crowding_multipliers(base, &interactions)?;
    let mut rows = vec!["band,coefficient,multiplier".to_string()];
    rows.extend(
        multipliers
            .iter()
            .map(|m| format!("{},{},{}", m.band, num(m.coefficient), num(m.multiplier))),
    );
    let extrapolation = match rc.extrapolate_to {
        Some(target) => {
            if rc.midpoints.len() != multipliers.len() {
                return Err(CliError::usage(format!(
                    "report.midpoints has {} entries for {} interactions",
                    rc.midpoints.len(),
                    multipliers.len()
                )));
            }
            let points: Vec<(f64, f64)> =
                rc.midpoints.iter().zip(&multipliers).map(|(x, m)| (*x, m.multiplier)).collect();
            Some(model::extrapolate_multiplier(&points, target)?)
        }
        None => None,
    };
    let path = cli.out.join("multipliers.csv");
    write_lines(&path, rows)?;
    manifest.output(&path);
    let path = cli.out.join("multipliers.json");
    #[derive(Serialize)]
    struct Report<'a> {
        travel_time: f64,
        multipliers: &'a [model::BandMultiplier],
        extrapolation: Option<model::LinearExtrapolation>,
    }
    write_json(
        &path,
        &Report {
            travel_time: base,
            multipliers: &multipliers,
            extrapolation,
        },
    )?;
    manifest.output(&path);
    finish(cli, manifest)
}
