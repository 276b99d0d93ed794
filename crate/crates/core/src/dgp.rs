//! Synthetic panels drawn from the model itself, with the true classes.

use std::collections::HashMap;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::iblt::{CovariateSpec, ExpectationConfig, ASC_ROUTE1};
use crate::model::{logistic, noncomp_choice_prob, Class, Theta};
use crate::panel::{PanelDataset, RiderRecord, Route, TripRecord};
use crate::viterbi::DecodedSequence;

/// How choices in the initialisation phase are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitPhaseChoices {
    /// Fair first choice, then the non-compensatory kernel.
    NonCompensatory,
    /// Fair coin at every occasion.
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DgpConfig {
    pub n_riders: usize,
    /// Occasions in the initialisation phase.
    pub t_init: usize,
    /// Occasions governed by the class process.
    pub t_model: usize,
    pub attribute_mean: f64,
    pub attribute_sd: f64,
    pub memory: usize,
    pub mu: f64,
    pub seed: u64,
    /// Redraws of the initialisation phase allowed before giving up on a rider.
    pub max_init_attempts: usize,
    pub init_phase_choices: InitPhaseChoices,
    pub covariates: CovariateSpec,
    pub true_theta: Theta,
}

impl Default for DgpConfig {
    fn default() -> Self {
        DgpConfig {
            n_riders: 2000,
            t_init: 10,
            t_model: 20,
            attribute_mean: 1.5,
            attribute_sd: 0.3,
            memory: 3,
            mu: 1.0,
            seed: 1,
            max_init_attempts: 10_000,
            init_phase_choices: InitPhaseChoices::NonCompensatory,
            covariates: CovariateSpec::default(),
            true_theta: Theta::monte_carlo_truth(),
        }
    }
}

impl DgpConfig {
    pub fn expectation(&self) -> ExpectationConfig {
        ExpectationConfig {
            mu: self.mu,
            memory: self.memory,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_riders == 0 {
            return bad("dgp.n_riders must be >= 1".into());
        }
        if self.t_model < 2 {
            return bad("dgp.t_model must be >= 2".into());
        }
        if self.t_init < 2 {
            return bad("dgp.t_init must be >= 2".into());
        }
        if !(self.attribute_sd > 0.0) || !self.attribute_mean.is_finite() {
            return bad("dgp.attribute_sd must be positive and the mean finite".into());
        }
        if self.max_init_attempts == 0 {
            return bad("dgp.max_init_attempts must be >= 1".into());
        }
        self.expectation().validate()?;
        self.covariates.validate()?;
        let spec = &self.covariates;
        for name in spec.init_history.iter().chain(&spec.transition_history) {
            if name != "const" {
                return bad(format!(
                    "history covariate `{name}` cannot be simulated; only `const` is supported"
                ));
            }
        }
        if !spec.noncomp_history.is_empty() {
            return bad("non-compensatory history terms cannot be simulated".into());
        }
        self.true_theta
            .validate(&spec.dims())
            .map_err(|e| Error::Config(format!("dgp.true_theta: {e}")))
    }

    /// Panel columns, in order: the mismatch attributes, then the choice
    /// attributes, without duplicates.
    pub fn attribute_names(&self) -> Vec<String> {
        let spec = &self.covariates;
        let mut out: Vec<String> = Vec::new();
        for name in spec
            .init_mismatch
            .iter()
            .chain(&spec.transition_mismatch)
            .chain(&spec.fixed)
            .chain(&spec.random)
        {
            if name != ASC_ROUTE1 && !out.contains(name) {
                out.push(name.clone());
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedRider {
    pub record: RiderRecord,
    /// Classes at modelling occasions `1..=t_model`.
    pub classes: Vec<Class>,
    /// Random coefficients drawn for the rider.
    pub chi: Vec<f64>,
    /// Attributes of both routes: `[occasion][route][attribute]`, flattened.
    pub full_attributes: Vec<f64>,
    /// Initialisation phases drawn before one was valid.
    pub init_attempts: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedPanel {
    pub panel: PanelDataset,
    pub riders: Vec<SimulatedRider>,
    pub config: DgpConfig,
}

const STREAM_ATTRIBUTES: u64 = 0;
const STREAM_CHI: u64 = 1;
const STREAM_INIT: u64 = 2;
const STREAM_CLASSES: u64 = 3;
const STREAM_CHOICES: u64 = 4;

fn stream(seed: u64, rider: usize, component: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((rider as u64) << 3) | component);
    rng
}

struct Columns {
    init: Vec<usize>,
    trans: Vec<usize>,
    fixed: Vec<Option<usize>>,
    random: Vec<Option<usize>>,
}

struct RiderSim<'a> {
    cfg: &'a DgpConfig,
    n_attr: usize,
    attrs: Vec<f64>,
    choices: Vec<Route>,
}

impl<'a> RiderSim<'a> {
    fn attr(&self, t: usize, route: Route, a: usize) -> f64 {
        self.attrs[((t - 1) * 2 + route.index()) * self.n_attr + a]
    }

    /// Expected attribute of `route` at occasion `t` from the latest
    /// experiences before `t`.
    fn expected(&self, route: Route, t: usize, a: usize) -> Result<f64> {
        let past: Vec<usize> = (1..t)
            .rev()
            .filter(|&k| self.choices[k - 1] == route)
            .take(self.cfg.memory)
            .collect();
        if past.is_empty() {
            return Err(Error::UnavailableExpectation {
                route: route.label(),
                occasion: t as u32,
            });
        }
        let w: Vec<f64> = past.iter().map(|&k| ((t - k) as f64).powf(-self.cfg.mu)).collect();
        let total: f64 = w.iter().sum();
        Ok(past
            .iter()
            .zip(&w)
            .map(|(&k, wk)| wk / total * self.attr(k, route, a))
            .sum())
    }

    fn mismatch(&self, t: usize, cols: &[usize]) -> Result<Vec<f64>> {
        let route = self.choices[t - 1];
        cols.iter()
            .map(|&c| Ok(self.attr(t, route, c) - self.expected(route, t, c)?))
            .collect()
    }

    fn block(&self, route: Route, t: usize, cols: &[Option<usize>]) -> Result<Vec<f64>> {
        cols.iter()
            .map(|c| match c {
                Some(a) => self.expected(route, t, *a),
                None => Ok((route == Route::One) as u8 as f64),
            })
            .collect()
    }
}

fn draw_route(rng: &mut ChaCha8Rng, p_route1: f64) -> Route {
    if rng.gen::<f64>() < p_route1 {
        Route::One
    } else {
        Route::Two
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn init_phase_valid(choices: &[Route]) -> bool {
    let last = choices[choices.len() - 1];
    let earlier = &choices[..choices.len() - 1];
    earlier.contains(&last) && choices.contains(&last.other())
}

fn simulate_rider(cfg: &DgpConfig, cols: &Columns, n_attr: usize, names: &[String], i: usize) -> Result<SimulatedRider> {
    let theta = &cfg.true_theta;
    let total = cfg.t_init + cfg.t_model;
    let mut rng = stream(cfg.seed, i, STREAM_ATTRIBUTES);
    let attrs: Vec<f64> = (0..total * 2 * n_attr)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            cfg.attribute_mean + cfg.attribute_sd * z
        })
        .collect();
    let mut rng = stream(cfg.seed, i, STREAM_CHI);
    let chi: Vec<f64> = theta
        .varrho
        .iter()
        .zip(&theta.psi_diag)
        .map(|(m, v)| {
            let z: f64 = StandardNormal.sample(&mut rng);
            m + v.sqrt() * z
        })
        .collect();

    let mut sim = RiderSim {
        cfg,
        n_attr,
        attrs,
        choices: Vec::with_capacity(total),
    };
    let nc = |lag: Route| noncomp_choice_prob(lag, theta.lambda1, theta.lambda2, &[], &[])[0];

    let mut rng = stream(cfg.seed, i, STREAM_INIT);
    let mut attempts = 0;
    loop {
        attempts += 1;
        sim.choices.clear();
        sim.choices.push(draw_route(&mut rng, 0.5));
        for _ in 1..cfg.t_init {
            let lag = *sim.choices.last().unwrap_or(&Route::One);
            let p = match cfg.init_phase_choices {
                InitPhaseChoices::NonCompensatory => nc(lag),
                InitPhaseChoices::Uniform => 0.5,
            };
            sim.choices.push(draw_route(&mut rng, p));
        }
        if init_phase_valid(&sim.choices) {
            break;
        }
        if attempts >= cfg.max_init_attempts {
            return Err(Error::Numeric(format!(
                "rider {i}: no valid initialisation phase in {attempts} draws"
            )));
        }
    }

    let mut class_rng = stream(cfg.seed, i, STREAM_CLASSES);
    let mut choice_rng = stream(cfg.seed, i, STREAM_CHOICES);
    let ones = |n: usize| vec![1.0; n];
    let m0 = sim.mismatch(cfg.t_init, &cols.init)?;
    let p1 = logistic(dot(&theta.zeta0, &m0) + dot(&theta.zeta0_c, &ones(theta.zeta0_c.len())));
    let mut class = if class_rng.gen::<f64>() < p1 {
        Class::Compensatory
    } else {
        Class::NonCompensatory
    };
    let mut classes = Vec::with_capacity(cfg.t_model);
    for k in 1..=cfg.t_model {
        let t = cfg.t_init + k;
        classes.push(class);
        let lag = sim.choices[t - 2];
        let p_route1 = match class {
            Class::Compensatory => {
                let mut v = [0.0; 2];
                for r in Route::BOTH {
                    v[r.index()] = dot(&theta.gamma, &sim.block(r, t, &cols.fixed)?)
                        + dot(&chi, &sim.block(r, t, &cols.random)?);
                }
                logistic(v[0] - v[1])
            }
            Class::NonCompensatory => nc(lag),
        };
        sim.choices.push(draw_route(&mut choice_rng, p_route1));
        if k < cfg.t_model {
            let m = sim.mismatch(t, &cols.trans)?;
            let (zeta, zeta_c) = theta.transition_coefs(class);
            let p = logistic(dot(zeta, &m) + dot(zeta_c, &ones(zeta_c.len())));
            class = if class_rng.gen::<f64>() < p {
                Class::Compensatory
            } else {
                Class::NonCompensatory
            };
        }
    }

    let trips = (1..=total)
        .map(|t| {
            let route = sim.choices[t - 1];
            TripRecord {
                occasion: t as u32,
                chosen_route: route,
                attributes: (0..n_attr).map(|a| sim.attr(t, route, a)).collect(),
            }
        })
        .collect();
    debug_assert_eq!(names.len(), n_attr);
    Ok(SimulatedRider {
        record: RiderRecord {
            rider_id: format!("r{:05}", i + 1),
            od_pair: "A-B".into(),
            other_od_trips: 0,
            trips,
        },
        classes,
        chi,
        full_attributes: sim.attrs,
        init_attempts: attempts,
    })
}

/// Simulates a panel. Every rider draws from its own random streams, so the
/// output does not depend on the number of threads.
pub fn simulate(config: &DgpConfig) -> Result<SimulatedPanel> {
    config.validate()?;
    let names = config.attribute_names();
    let idx = |n: &String| names.iter().position(|m| m == n).expect("column listed");
    let opt = |n: &String| if n == ASC_ROUTE1 { None } else { Some(idx(n)) };
    let spec = &config.covariates;
    let cols = Columns {
        init: spec.init_mismatch.iter().map(idx).collect(),
        trans: spec.transition_mismatch.iter().map(idx).collect(),
        fixed: spec.fixed.iter().map(opt).collect(),
        random: spec.random.iter().map(opt).collect(),
    };
    let riders = (0..config.n_riders)
        .into_par_iter()
        .map(|i| simulate_rider(config, &cols, names.len(), &names, i))
        .collect::<Result<Vec<_>>>()?;
    Ok(SimulatedPanel {
        panel: PanelDataset {
            attribute_names: names,
            riders: riders.iter().map(|r| r.record.clone()).collect(),
        },
        riders,
        config: config.clone(),
    })
}

impl SimulatedPanel {
    /// Writes `rider_id,t,occasion,true_class`, where `t` counts modelling
    /// occasions and `occasion` is the position in the full sequence.
    pub fn write_truth<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let map = |e: csv::Error| Error::Validation(format!("writing truth: {e}"));
        w.write_record(["rider_id", "t", "occasion", "true_class"]).map_err(map)?;
        for r in &self.riders {
            for (k, c) in r.classes.iter().enumerate() {
                w.write_record([
                    r.record.rider_id.clone(),
                    (k + 1).to_string(),
                    (self.config.t_init + k + 1).to_string(),
                    c.label().to_string(),
                ])
                .map_err(map)?;
            }
        }
        w.flush().map_err(|e| Error::Validation(format!("writing truth: {e}")))
    }

    /// Writes the attributes of both routes at every occasion.
    pub fn write_full_attributes<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let map = |e: csv::Error| Error::Validation(format!("writing attributes: {e}"));
        let names = &self.panel.attribute_names;
        let mut header = vec!["rider_id".to_string(), "occasion".into(), "route".into()];
        header.extend(names.iter().cloned());
        w.write_record(&header).map_err(map)?;
        let n = names.len();
        for r in &self.riders {
            for (j, row) in r.full_attributes.chunks_exact(n.max(1)).enumerate() {
                let mut rec = vec![
                    r.record.rider_id.clone(),
                    (j / 2 + 1).to_string(),
                    (j % 2 + 1).to_string(),
                ];
                rec.extend(row.iter().map(|v| format!("{v}")));
                w.write_record(&rec).map_err(map)?;
            }
        }
        w.flush().map_err(|e| Error::Validation(format!("writing attributes: {e}")))
    }

    pub fn truth_map(&self) -> HashMap<&str, &[Class]> {
        self.riders
            .iter()
            .map(|r| (r.record.rider_id.as_str(), r.classes.as_slice()))
            .collect()
    }
}

/// Reads a truth file written by [`SimulatedPanel::write_truth`].
pub fn read_truth<R: std::io::Read>(reader: R) -> Result<HashMap<String, Vec<Class>>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let mut out: HashMap<String, Vec<(usize, Class)>> = HashMap::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 2;
        let rec = rec.map_err(|e| Error::Parse {
            row,
            message: e.to_string(),
        })?;
        let parse_err = |m: &str| Error::Parse {
            row,
            message: m.to_string(),
        };
        let id = rec.get(0).ok_or_else(|| parse_err("missing rider_id"))?;
        let t: usize = rec
            .get(1)
            .and_then(|v| v.trim().parse().ok())
            .ok_or_else(|| parse_err("bad t"))?;
        let class = rec
            .get(rec.len().saturating_sub(1))
            .and_then(|v| v.trim().parse::<u8>().ok())
            .and_then(Class::from_label)
            .ok_or_else(|| parse_err("bad true_class"))?;
        out.entry(id.to_string()).or_default().push((t, class));
    }
    Ok(out
        .into_iter()
        .map(|(id, mut v)| {
            v.sort_by_key(|(t, _)| *t);
            (id, v.into_iter().map(|(_, c)| c).collect())
        })
        .collect())
}

/// Share of decoded occasions whose class equals the true class.
pub fn accuracy<S: AsRef<[Class]>>(decoded: &[DecodedSequence], truth: &HashMap<&str, S>) -> Result<f64> {
    let mut hits = 0usize;
    let mut total = 0usize;
    for d in decoded {
        let t = truth
            .get(d.rider_id.as_str())
            .ok_or_else(|| Error::Shape(format!("no true classes for rider {}", d.rider_id)))?
            .as_ref();
        if t.len() != d.classes.len() {
            return Err(Error::Shape(format!(
                "rider {}: {} decoded occasions, {} true",
                d.rider_id,
                d.classes.len(),
                t.len()
            )));
        }
        hits += d.classes.iter().zip(t).filter(|(a, b)| a == b).count();
        total += t.len();
    }
    if total == 0 {
        return Err(Error::Shape("no decoded occasions".into()));
    }
    Ok(hits as f64 / total as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(n: usize, seed: u64) -> DgpConfig {
        DgpConfig {
            n_riders: n,
            seed,
            ..DgpConfig::default()
        }
    }

    #[test]
    fn dimensions_follow_config() {
        let sim = simulate(&small(40, 3)).unwrap();
        assert_eq!(sim.panel.riders.len(), 40);
        assert!(sim.panel.riders.iter().all(|r| r.trips.len() == 30));
        assert!(sim.riders.iter().all(|r| r.classes.len() == 20));
        assert_eq!(
            sim.panel.attribute_names,
            ["z1", "z2", "x1", "x2", "f1", "f2", "g1", "g2"]
        );
    }

    #[test]
    fn same_seed_same_panel() {
        let a = simulate(&small(30, 9)).unwrap();
        let b = simulate(&small(30, 9)).unwrap();
        let c = simulate(&small(30, 10)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.panel, c.panel);
    }

    #[test]
    fn attribute_moments() {
        let sim = simulate(&small(300, 4)).unwrap();
        let all: Vec<f64> = sim.riders.iter().flat_map(|r| r.full_attributes.iter().copied()).collect();
        let n = all.len() as f64;
        let mean = all.iter().sum::<f64>() / n;
        let var = all.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!((mean - 1.5).abs() < 3.0 * 0.3 / n.sqrt(), "{mean}");
        // sd of the sample variance is about sigma^2 sqrt(2 / n)
        assert!((var - 0.09).abs() < 3.0 * 0.09 * (2.0 / n).sqrt(), "{var}");
    }

    #[test]
    fn saturated_inertia_repeats_lagged_choice() {
        let mut cfg = small(200, 5);
        cfg.true_theta.lambda1 = 50.0;
        cfg.true_theta.lambda2 = 50.0;
        cfg.true_theta.psi_diag = vec![0.0, 0.0];
        cfg.init_phase_choices = InitPhaseChoices::Uniform;
        let sim = simulate(&cfg).unwrap();
        let (mut same, mut n) = (0usize, 0usize);
        for r in &sim.riders {
            let ch = r.record.choices();
            for (k, c) in r.classes.iter().enumerate() {
                let t = cfg.t_init + k;
                if *c == Class::NonCompensatory {
                    n += 1;
                    same += (ch[t] == ch[t - 1]) as usize;
                }
            }
        }
        assert!(n > 100);
        assert!(same as f64 / n as f64 > 0.9999);
    }

    #[test]
    fn initialisation_phase_is_valid() {
        let sim = simulate(&small(100, 6)).unwrap();
        for r in &sim.riders {
            assert!(init_phase_valid(&r.record.choices()[..10]));
        }
    }

    #[test]
    fn accuracy_bounds() {
        let sim = simulate(&small(10, 7)).unwrap();
        let truth = sim.truth_map();
        let decoded: Vec<DecodedSequence> = sim
            .riders
            .iter()
            .map(|r| DecodedSequence {
                rider_id: r.record.rider_id.clone(),
                classes: r.classes.clone(),
                log_joint: 0.0,
            })
            .collect();
        assert_eq!(accuracy(&decoded, &truth).unwrap(), 1.0);
        let flipped: Vec<DecodedSequence> = decoded
            .iter()
            .map(|d| DecodedSequence {
                classes: d.classes.iter().map(|c| Class::from_index(1 - c.index())).collect(),
                ..d.clone()
            })
            .collect();
        assert_eq!(accuracy(&flipped, &truth).unwrap(), 0.0);
        let mut short = decoded.clone();
        short[0].classes.pop();
        assert!(matches!(accuracy(&short, &truth), Err(Error::Shape(_))));
    }

    #[test]
    fn truth_round_trip() {
        let sim = simulate(&small(5, 8)).unwrap();
        let mut buf = Vec::new();
        sim.write_truth(&mut buf).unwrap();
        let back = read_truth(&buf[..]).unwrap();
        for r in &sim.riders {
            assert_eq!(back[&r.record.rider_id], r.classes);
        }
    }

    #[test]
    fn rejects_bad_config() {
        let mut cfg = small(5, 1);
        cfg.t_model = 1;
        assert!(matches!(simulate(&cfg), Err(Error::Config(_))));
        let mut cfg = small(5, 1);
        cfg.true_theta.gamma.push(0.0);
        assert!(matches!(simulate(&cfg), Err(Error::Config(_))));
    }
}
