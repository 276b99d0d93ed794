//! Instance-based learning expectations and the per-rider design.
//!
//! A rider's expectation of a route attribute at occasion `t` is a
//! power-law weighted average of that attribute over the rider's most
//! recent experiences of the route before `t`. The weights decay with the
//! lag `t - t'` measured in overall occasion units.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::panel::{
    history_from_choices, split_initialisation_with, InitRule, PanelDataset, RiderRecord, Route,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExpectationConfig {
    /// Memory decay.
    pub mu: f64,
    /// Number of most recent same-route experiences used.
    pub memory: usize,
}

impl Default for ExpectationConfig {
    fn default() -> Self {
        ExpectationConfig { mu: 1.0, memory: 3 }
    }
}

impl ExpectationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.mu.is_finite() && self.mu >= 0.0) {
            return Err(Error::Config(format!("mu must be >= 0, got {}", self.mu)));
        }
        if self.memory == 0 {
            return Err(Error::Config("memory must be >= 1".into()));
        }
        Ok(())
    }
}

/// Normalised power-law weights `(current - t')^(-mu)` for the given past
/// occasions, in input order.
pub fn decay_weights(current: u32, past: &[u32], mu: f64) -> Result<Vec<f64>> {
    if past.is_empty() {
        return Err(Error::Domain("no past occasions to weight".into()));
    }
    let mut w = Vec::with_capacity(past.len());
    for &p in past {
        if p >= current {
            return Err(Error::Domain(format!(
                "past occasion {p} is not before {current}"
            )));
        }
        w.push(((current - p) as f64).powf(-mu));
    }
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|x| *x /= total);
    Ok(w)
}

/// The last `memory` occasions before `t` on which `route` was chosen,
/// most recent first.
fn recent_experiences(choices: &[Route], route: Route, t: usize, memory: usize) -> Vec<usize> {
    (1..t)
        .rev()
        .filter(|&k| choices[k - 1] == route)
        .take(memory)
        .collect()
}

fn weighted_expectation(
    rider: &RiderRecord,
    choices: &[Route],
    route: Route,
    t: usize,
    config: &ExpectationConfig,
    columns: &[usize],
) -> Result<Vec<f64>> {
    let past = recent_experiences(choices, route, t, config.memory);
    if past.is_empty() {
        return Err(Error::UnavailableExpectation {
            route: route.label(),
            occasion: t as u32,
        });
    }
    let lags: Vec<u32> = past.iter().map(|&k| k as u32).collect();
    let w = decay_weights(t as u32, &lags, config.mu)?;
    let mut out = vec![0.0; columns.len()];
    for (wk, &k) in w.iter().zip(&past) {
        let attrs = &rider.trips[k - 1].attributes;
        for (o, &c) in out.iter_mut().zip(columns) {
            *o += wk * attrs[c];
        }
    }
    Ok(out)
}

/// Expected value of every attribute of `route` at occasion `t` (1-based,
/// original clock), from experiences strictly before `t`.
pub fn expected_attributes(
    rider: &RiderRecord,
    route: Route,
    t: usize,
    config: &ExpectationConfig,
) -> Result<Vec<f64>> {
    if t == 0 || t > rider.trips.len() + 1 {
        return Err(Error::Domain(format!(
            "occasion {t} outside 1..={}",
            rider.trips.len() + 1
        )));
    }
    let n_attr = rider.trips.first().map_or(0, |t| t.attributes.len());
    let columns: Vec<usize> = (0..n_attr).collect();
    weighted_expectation(rider, &rider.choices(), route, t, config, &columns)
}

/// Covariate selection for every model component.
///
/// Attribute names refer to panel columns; `asc_route1` is the route-1
/// constant. History names are those of
/// [`HistoryCovariates`](crate::panel::HistoryCovariates). The only
/// non-compensatory history term is `choice_proportion`, the difference of
/// the per-route choice proportions over the occasions before `t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CovariateSpec {
    pub init_mismatch: Vec<String>,
    pub init_history: Vec<String>,
    pub transition_mismatch: Vec<String>,
    pub transition_history: Vec<String>,
    pub fixed: Vec<String>,
    pub random: Vec<String>,
    pub noncomp_history: Vec<String>,
}

impl Default for CovariateSpec {
    /// The Monte Carlo layout: a constant and two mismatch attributes in the
    /// initialisation and transition models, two fixed and two random
    /// choice attributes.
    fn default() -> Self {
        let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect();
        CovariateSpec {
            init_mismatch: s(&["z1", "z2"]),
            init_history: s(&["const"]),
            transition_mismatch: s(&["x1", "x2"]),
            transition_history: s(&["const"]),
            fixed: s(&["f1", "f2"]),
            random: s(&["g1", "g2"]),
            noncomp_history: vec![],
        }
    }
}

pub const ASC_ROUTE1: &str = "asc_route1";
pub const CHOICE_PROPORTION: &str = "choice_proportion";

/// Dimensions of each covariate block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DesignDims {
    pub init_mismatch: usize,
    pub init_history: usize,
    pub transition_mismatch: usize,
    pub transition_history: usize,
    pub fixed: usize,
    pub random: usize,
    pub noncomp_history: usize,
}

impl CovariateSpec {
    pub fn dims(&self) -> DesignDims {
        DesignDims {
            init_mismatch: self.init_mismatch.len(),
            init_history: self.init_history.len(),
            transition_mismatch: self.transition_mismatch.len(),
            transition_history: self.transition_history.len(),
            fixed: self.fixed.len(),
            random: self.random.len(),
            noncomp_history: self.noncomp_history.len(),
        }
    }

    /// Attribute columns the spec needs from a panel.
    pub fn required_attributes(&self) -> Vec<&str> {
        let mut v: Vec<&str> = self
            .init_mismatch
            .iter()
            .chain(&self.transition_mismatch)
            .chain(&self.fixed)
            .chain(&self.random)
            .map(String::as_str)
            .filter(|n| *n != ASC_ROUTE1)
            .collect();
        v.sort_unstable();
        v.dedup();
        v
    }

    pub fn validate(&self) -> Result<()> {
        for name in self.init_history.iter().chain(&self.transition_history) {
            if !crate::panel::HistoryCovariates::NAMES.contains(&name.as_str()) {
                return Err(Error::Config(format!("unknown history covariate `{name}`")));
            }
        }
        for name in &self.noncomp_history {
            if name == ASC_ROUTE1 {
                return Err(Error::Config(
                    "a route-1 constant in the non-compensatory kernel is collinear with lambda1/lambda2"
                        .into(),
                ));
            }
            if name != CHOICE_PROPORTION {
                return Err(Error::Config(format!(
                    "unknown non-compensatory covariate `{name}`"
                )));
            }
        }
        for name in self.init_mismatch.iter().chain(&self.transition_mismatch) {
            if name == ASC_ROUTE1 {
                return Err(Error::Config(format!("`{ASC_ROUTE1}` is not a mismatch attribute")));
            }
        }
        Ok(())
    }
}

/// One modelling occasion of a processed rider.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelOccasion {
    pub choice: Route,
    pub lagged: Route,
    /// Expected fixed-coefficient attributes per route.
    pub fixed: [Vec<f64>; 2],
    /// Expected random-coefficient attributes per route.
    pub random: [Vec<f64>; 2],
    /// Experienced minus expected attributes of the chosen route; governs
    /// the class at the next occasion.
    pub mismatch: Vec<f64>,
    pub history: Vec<f64>,
    pub noncomp_history: Vec<f64>,
}

/// Estimation-ready rider: modelling occasion `t = 1` is original occasion
/// `init_occasions + 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProcessedRider {
    pub rider_id: String,
    pub init_occasions: usize,
    pub model_occasions: usize,
    /// Choice at original occasion `init_occasions`.
    pub lagged_choice: Route,
    pub init_mismatch: Vec<f64>,
    pub init_history: Vec<f64>,
    pub occasions: Vec<ModelOccasion>,
}

impl ProcessedRider {
    pub fn total_occasions(&self) -> usize {
        self.init_occasions + self.model_occasions
    }

    pub fn choices(&self) -> impl Iterator<Item = Route> + '_ {
        self.occasions.iter().map(|o| o.choice)
    }
}

/// Resolves a [`CovariateSpec`] against panel columns and builds
/// [`ProcessedRider`]s.
#[derive(Debug, Clone)]
pub struct DesignBuilder {
    spec: CovariateSpec,
    config: ExpectationConfig,
    init_rule: InitRule,
    min_model_occasions: usize,
    init_cols: Vec<usize>,
    trans_cols: Vec<usize>,
    fixed_cols: Vec<Option<usize>>,
    random_cols: Vec<Option<usize>>,
}

impl DesignBuilder {
    pub fn new(
        attribute_names: &[String],
        spec: &CovariateSpec,
        config: ExpectationConfig,
        init_rule: InitRule,
    ) -> Result<Self> {
        spec.validate()?;
        config.validate()?;
        let find = |name: &str| {
            attribute_names
                .iter()
                .position(|n| n == name)
                .ok_or_else(|| Error::Schema(format!("panel has no covariate column `{name}`")))
        };
        let find_or_asc = |name: &String| {
            if name == ASC_ROUTE1 {
                Ok(None)
            } else {
                find(name).map(Some)
            }
        };
        Ok(DesignBuilder {
            spec: spec.clone(),
            config,
            init_rule,
            min_model_occasions: 1,
            init_cols: spec.init_mismatch.iter().map(|n| find(n)).collect::<Result<_>>()?,
            trans_cols: spec
                .transition_mismatch
                .iter()
                .map(|n| find(n))
                .collect::<Result<_>>()?,
            fixed_cols: spec.fixed.iter().map(find_or_asc).collect::<Result<_>>()?,
            random_cols: spec.random.iter().map(find_or_asc).collect::<Result<_>>()?,
        })
    }

    pub fn with_min_model_occasions(mut self, n: usize) -> Self {
        self.min_model_occasions = n;
        self
    }

    pub fn config(&self) -> &ExpectationConfig {
        &self.config
    }

    pub fn spec(&self) -> &CovariateSpec {
        &self.spec
    }

    fn attribute_block(
        &self,
        rider: &RiderRecord,
        choices: &[Route],
        route: Route,
        t: usize,
        cols: &[Option<usize>],
    ) -> Result<Vec<f64>> {
        let real: Vec<usize> = cols.iter().flatten().copied().collect();
        let expected = weighted_expectation(rider, choices, route, t, &self.config, &real)?;
        let mut it = expected.into_iter();
        Ok(cols
            .iter()
            .map(|c| match c {
                Some(_) => it.next().unwrap_or(0.0),
                None => (route == Route::One) as u8 as f64,
            })
            .collect())
    }

    fn mismatch(
        &self,
        rider: &RiderRecord,
        choices: &[Route],
        t: usize,
        cols: &[usize],
    ) -> Result<Vec<f64>> {
        let route = choices[t - 1];
        let expected = weighted_expectation(rider, choices, route, t, &self.config, cols)?;
        let experienced = &rider.trips[t - 1].attributes;
        Ok(cols
            .iter()
            .zip(expected)
            .map(|(&c, e)| experienced[c] - e)
            .collect())
    }

    fn history(&self, choices: &[Route], t: usize, names: &[String]) -> Result<Vec<f64>> {
        let h = history_from_choices(choices, t)?;
        names
            .iter()
            .map(|n| {
                h.get(n)
                    .ok_or_else(|| Error::Config(format!("unknown history covariate `{n}`")))
            })
            .collect()
    }

    pub fn build(&self, rider: &RiderRecord) -> Result<ProcessedRider> {
        let (t_init, t_model) =
            split_initialisation_with(rider, self.init_rule, self.min_model_occasions)?;
        let choices = rider.choices();
        let wrap = |e: Error| match e {
            Error::UnavailableExpectation { route, occasion } => Error::Validation(format!(
                "rider {}: no experience of route {route} before occasion {occasion}",
                rider.rider_id
            )),
            other => other,
        };

        let init_mismatch = self.mismatch(rider, &choices, t_init, &self.init_cols).map_err(wrap)?;
        let init_history = self.history(&choices, t_init, &self.spec.init_history)?;
        let mut occasions = Vec::with_capacity(t_model);
        for k in 1..=t_model {
            let t = t_init + k;
            let fixed = [
                self.attribute_block(rider, &choices, Route::One, t, &self.fixed_cols),
                self.attribute_block(rider, &choices, Route::Two, t, &self.fixed_cols),
            ];
            let random = [
                self.attribute_block(rider, &choices, Route::One, t, &self.random_cols),
                self.attribute_block(rider, &choices, Route::Two, t, &self.random_cols),
            ];
            let [f1, f2] = fixed;
            let [g1, g2] = random;
            let noncomp_history = if self.spec.noncomp_history.is_empty() {
                Vec::new()
            } else {
                let prev = history_from_choices(&choices, t - 1)?;
                vec![prev.choice_prop[0] - prev.choice_prop[1]]
            };
            occasions.push(ModelOccasion {
                choice: choices[t - 1],
                lagged: choices[t - 2],
                fixed: [f1.map_err(wrap)?, f2.map_err(wrap)?],
                random: [g1.map_err(wrap)?, g2.map_err(wrap)?],
                mismatch: self.mismatch(rider, &choices, t, &self.trans_cols).map_err(wrap)?,
                history: self.history(&choices, t, &self.spec.transition_history)?,
                noncomp_history,
            });
        }
        Ok(ProcessedRider {
            rider_id: rider.rider_id.clone(),
            init_occasions: t_init,
            model_occasions: t_model,
            lagged_choice: choices[t_init - 1],
            init_mismatch,
            init_history,
            occasions,
        })
    }

    /// Builds every rider of `data`, in order.
    pub fn build_all(&self, data: &PanelDataset) -> Result<Vec<ProcessedRider>> {
        use rayon::prelude::*;
        data.riders.par_iter().map(|r| self.build(r)).collect()
    }
}

/// Convenience wrapper around [`DesignBuilder::build`].
pub fn build_design(
    rider: &RiderRecord,
    attribute_names: &[String],
    spec: &CovariateSpec,
    config: ExpectationConfig,
    init_rule: InitRule,
) -> Result<ProcessedRider> {
    DesignBuilder::new(attribute_names, spec, config, init_rule)?.build(rider)
}

/// Tab-separated dump of processed riders, one row per modelling occasion.
pub fn write_design_dump<W: std::io::Write>(riders: &[ProcessedRider], mut w: W) -> Result<()> {
    let io = |e| Error::io("design dump", e);
    writeln!(
        w,
        "rider_id\tt\tchoice\tlagged\tfixed_r1\tfixed_r2\trandom_r1\trandom_r2\tmismatch\thistory\tnoncomp_history"
    )
    .map_err(io)?;
    let join = |v: &[f64]| {
        v.iter()
            .map(|x| format!("{x}"))
            .collect::<Vec<_>>()
            .join(";")
    };
    for r in riders {
        writeln!(
            w,
            "{}\t0\t\t{}\t\t\t\t\t{}\t{}\t",
            r.rider_id,
            r.lagged_choice.label(),
            join(&r.init_mismatch),
            join(&r.init_history)
        )
        .map_err(io)?;
        for (k, o) in r.occasions.iter().enumerate() {
            writeln!(
                w,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                r.rider_id,
                k + 1,
                o.choice.label(),
                o.lagged.label(),
                join(&o.fixed[0]),
                join(&o.fixed[1]),
                join(&o.random[0]),
                join(&o.random[1]),
                join(&o.mismatch),
                join(&o.history),
                join(&o.noncomp_history)
            )
            .map_err(io)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::panel::TripRecord;

    fn rider(labels: &[u8], attrs: &[&[f64]]) -> RiderRecord {
        RiderRecord {
            rider_id: "r".into(),
            od_pair: String::new(),
            other_od_trips: 0,
            trips: labels
                .iter()
                .zip(attrs)
                .enumerate()
                .map(|(k, (&l, a))| TripRecord {
                    occasion: k as u32 + 1,
                    chosen_route: Route::from_label(l).unwrap(),
                    attributes: a.to_vec(),
                })
                .collect(),
        }
    }

    #[test]
    fn weight_examples() {
        let w = decay_weights(4, &[1, 2, 3], 0.0).unwrap();
        for x in w {
            assert!((x - 1.0 / 3.0).abs() < 1e-15);
        }
        // lags 1 and 2 from occasion 3
        let w = decay_weights(3, &[2, 1], 1.0).unwrap();
        assert!((w[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((w[1] - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(decay_weights(5, &[2], 1.7).unwrap(), vec![1.0]);
        assert!(decay_weights(3, &[3], 1.0).is_err());
        assert!(decay_weights(3, &[], 1.0).is_err());
    }

    #[test]
    fn expectation_examples() {
        // route 1 at occasions 1 (0.2) and 3 (0.4), query at 4
        let r = rider(&[1, 2, 1, 2], &[&[0.2], &[9.0], &[0.4], &[9.0]]);
        let cfg = ExpectationConfig { mu: 1.0, memory: 2 };
        let e = expected_attributes(&r, Route::One, 4, &cfg).unwrap();
        assert!((e[0] - 0.35).abs() < 1e-15);
        let cfg1 = ExpectationConfig { mu: 1.0, memory: 1 };
        assert_eq!(expected_attributes(&r, Route::One, 4, &cfg1).unwrap(), vec![0.4]);
        assert_eq!(expected_attributes(&r, Route::One, 2, &cfg).unwrap(), vec![0.2]);
        assert!(matches!(
            expected_attributes(&r, Route::Two, 2, &cfg),
            Err(Error::UnavailableExpectation { route: 2, occasion: 2 })
        ));
    }

    #[test]
    fn constant_experiences_give_zero_mismatch() {
        let labels = [1, 2, 1, 1, 2, 2, 1, 2];
        let attrs: Vec<&[f64]> = vec![&[0.5, 2.0]; 8];
        let r = rider(&labels, &attrs);
        let names = vec!["a".to_string(), "b".to_string()];
        let spec = CovariateSpec {
            init_mismatch: names.clone(),
            init_history: vec!["const".into()],
            transition_mismatch: names.clone(),
            transition_history: vec![],
            fixed: vec!["a".into(), ASC_ROUTE1.into()],
            random: vec!["b".into()],
            noncomp_history: vec![],
        };
        let p = build_design(&r, &names, &spec, ExpectationConfig::default(), InitRule::Earliest)
            .unwrap();
        assert_eq!(p.init_occasions, 3);
        assert_eq!(p.init_mismatch, vec![0.0, 0.0]);
        for o in &p.occasions {
            assert!(o.mismatch.iter().all(|m| m.abs() < 1e-15), "{:?}", o.mismatch);
            assert!((o.fixed[0][0] - 0.5).abs() < 1e-15 && o.fixed[0][1] == 1.0);
            assert!((o.fixed[1][0] - 0.5).abs() < 1e-15 && o.fixed[1][1] == 0.0);
        }
    }

    #[test]
    fn single_memory_is_mu_invariant() {
        let labels = [1, 2, 1, 1, 2, 2, 1, 2];
        let attrs: Vec<Vec<f64>> = (0..8).map(|k| vec![0.1 * k as f64 + 0.3]).collect();
        let attr_refs: Vec<&[f64]> = attrs.iter().map(|v| v.as_slice()).collect();
        let r = rider(&labels, &attr_refs);
        let names = vec!["x".to_string()];
        let spec = CovariateSpec {
            init_mismatch: names.clone(),
            init_history: vec![],
            transition_mismatch: names.clone(),
            transition_history: vec![],
            fixed: names.clone(),
            random: vec![],
            noncomp_history: vec![],
        };
        let a = build_design(&r, &names, &spec, ExpectationConfig { mu: 1.0, memory: 1 }, InitRule::Earliest)
            .unwrap();
        let b = build_design(&r, &names, &spec, ExpectationConfig { mu: 0.5, memory: 1 }, InitRule::Earliest)
            .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn spec_validation() {
        let mut s = CovariateSpec::default();
        s.noncomp_history = vec![ASC_ROUTE1.into()];
        assert!(s.validate().is_err());
        s.noncomp_history = vec![CHOICE_PROPORTION.into()];
        assert!(s.validate().is_ok());
        s.init_history = vec!["bogus".into()];
        assert!(s.validate().is_err());
    }
}
