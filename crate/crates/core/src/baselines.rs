//! Static benchmarks: a binary logit and a two-class latent class logit
//! with rider-level membership.

use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::iblt::ProcessedRider;
use crate::model::logistic;
use crate::optim::{self, BfgsSettings};
use crate::panel::Route;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaselineKind {
    Mnl,
    LcMnl,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineConfig {
    pub n_starts: usize,
    pub seed: u64,
    pub gradient_tolerance: f64,
    pub max_iterations: usize,
    pub em_tolerance: f64,
    pub max_em_iterations: usize,
    /// Coefficient whose ordering labels the latent classes (more negative
    /// is class 1); defaults to the first coefficient.
    pub anchor: Option<String>,
    pub separation_threshold: f64,
    pub degenerate_share: f64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig {
            n_starts: 5,
            seed: 1,
            gradient_tolerance: 1e-6,
            max_iterations: 500,
            em_tolerance: 1e-4,
            max_em_iterations: 200,
            anchor: None,
            separation_threshold: 50.0,
            degenerate_share: 1e-4,
        }
    }
}

impl BaselineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_starts == 0 {
            return Err(Error::Config("baseline.n_starts must be >= 1".into()));
        }
        if !(self.gradient_tolerance > 0.0) || !(self.em_tolerance > 0.0) {
            return Err(Error::Config("baseline tolerances must be positive".into()));
        }
        Ok(())
    }

    fn bfgs(&self) -> BfgsSettings {
        BfgsSettings {
            gtol: self.gradient_tolerance,
            max_iter: self.max_iterations,
        }
    }
}

/// Pooled binary choices: `x` holds route-1 minus route-2 covariates.
#[derive(Debug, Clone, PartialEq)]
pub struct ChoiceData {
    pub dim: usize,
    pub x: Vec<f64>,
    pub y: Vec<bool>,
    pub riders: Vec<Range<usize>>,
}

impl ChoiceData {
    pub fn new(dim: usize, x: Vec<f64>, y: Vec<bool>, riders: Vec<Range<usize>>) -> Result<Self> {
        if x.len() != dim * y.len() {
            return Err(Error::Shape(format!(
                "{} covariate values for {} observations of dimension {dim}",
                x.len(),
                y.len()
            )));
        }
        let mut next = 0;
        for r in &riders {
            if r.start != next || r.end < r.start {
                return Err(Error::Shape("rider ranges must tile the observations".into()));
            }
            next = r.end;
        }
        if next != y.len() {
            return Err(Error::Shape("rider ranges must tile the observations".into()));
        }
        Ok(ChoiceData { dim, x, y, riders })
    }

    /// Modelling occasions of processed riders, with the fixed and random
    /// choice covariates as fixed coefficients.
    pub fn from_processed(data: &[ProcessedRider]) -> Result<Self> {
        let dim = data
            .iter()
            .flat_map(|r| r.occasions.first())
            .map(|o| o.fixed[0].len() + o.random[0].len())
            .next()
            .ok_or_else(|| Error::Validation("no modelling occasions".into()))?;
        let mut x = Vec::new();
        let mut y = Vec::new();
        let mut riders = Vec::with_capacity(data.len());
        for r in data {
            let start = y.len();
            for o in &r.occasions {
                if o.fixed[0].len() + o.random[0].len() != dim {
                    return Err(Error::Shape(format!(
                        "rider {} has covariate blocks of different sizes",
                        r.rider_id
                    )));
                }
                for j in 0..o.fixed[0].len() {
                    x.push(o.fixed[0][j] - o.fixed[1][j]);
                }
                for j in 0..o.random[0].len() {
                    x.push(o.random[0][j] - o.random[1][j]);
                }
                y.push(o.choice == Route::One);
            }
            riders.push(start..y.len());
        }
        ChoiceData::new(dim, x, y, riders)
    }

    pub fn n_obs(&self) -> usize {
        self.y.len()
    }

    fn row(&self, n: usize) -> &[f64] {
        &self.x[n * self.dim..(n + 1) * self.dim]
    }

    /// Log-likelihood of observations in `range` and its gradient, scaled
    /// by `weight` and added to `grad`.
    fn block_loglik(&self, beta: &[f64], range: Range<usize>, weight: f64, grad: &mut [f64]) -> f64 {
        let mut total = 0.0;
        for n in range {
            let x = self.row(n);
            let z: f64 = x.iter().zip(beta).map(|(a, b)| a * b).sum();
            let (s, p) = if self.y[n] { (1.0, logistic(z)) } else { (-1.0, logistic(-z)) };
            total += p.max(crate::model::PROB_FLOOR).ln();
            // d ln p / dz = s (1 - p)
            let c = weight * s * (1.0 - p);
            for (g, xi) in grad.iter_mut().zip(x) {
                *g += c * xi;
            }
        }
        total
    }
}

/// Binary logit log-likelihood and gradient.
pub fn mnl_loglik(data: &ChoiceData, beta: &[f64], grad: &mut [f64]) -> f64 {
    grad.iter_mut().for_each(|g| *g = 0.0);
    data.block_loglik(beta, 0..data.n_obs(), 1.0, grad)
}

/// Latent class log-likelihood at `params = (beta1, beta2, kappa)` with
/// class-1 share `logistic(kappa)`, and its gradient.
pub fn lc_mnl_loglik(data: &ChoiceData, params: &[f64], grad: &mut [f64]) -> f64 {
    let d = data.dim;
    let (b1, rest) = params.split_at(d);
    let (b2, kappa) = rest.split_at(d);
    let kappa = kappa[0];
    let (lp1, lp2) = (ln_logistic(kappa), ln_logistic(-kappa));
    let share = logistic(kappa);
    grad.iter_mut().for_each(|g| *g = 0.0);
    let mut total = 0.0;
    let mut g1 = vec![0.0; d];
    let mut g2 = vec![0.0; d];
    for r in &data.riders {
        g1.iter_mut().for_each(|g| *g = 0.0);
        g2.iter_mut().for_each(|g| *g = 0.0);
        let l1 = lp1 + data.block_loglik(b1, r.clone(), 1.0, &mut g1);
        let l2 = lp2 + data.block_loglik(b2, r.clone(), 1.0, &mut g2);
        let m = l1.max(l2);
        let ll = m + ((l1 - m).exp() + (l2 - m).exp()).ln();
        let h1 = (l1 - ll).exp();
        let h2 = (l2 - ll).exp();
        total += ll;
        for j in 0..d {
            grad[j] += h1 * g1[j];
            grad[d + j] += h2 * g2[j];
        }
        grad[2 * d] += h1 - share;
    }
    total
}

fn ln_logistic(z: f64) -> f64 {
    if z >= 0.0 {
        -(-z).exp().ln_1p()
    } else {
        z - z.exp().ln_1p()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineResult {
    pub model: BaselineKind,
    pub param_names: Vec<String>,
    pub estimates: Vec<f64>,
    pub std_errors: Vec<f64>,
    pub z_values: Vec<f64>,
    pub loglik: f64,
    pub n_riders: usize,
    pub n_observations: usize,
    pub converged: bool,
    pub iterations: usize,
    /// Class-1 share for the latent class model.
    pub class1_share: Option<f64>,
    pub start_logliks: Vec<f64>,
    pub flags: Vec<String>,
}

fn numerical_std_errors<F>(f: F, x: &[f64], flags: &mut Vec<String>) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let h = optim::central_hessian(f, x, 1e-4, true)?;
    match optim::covariance_from_hessian(&h) {
        Ok(cov) => {
            if !cov.positive_definite {
                flags.push("hessian_not_negative_definite".into());
            }
            Ok(cov.std_errors())
        }
        Err(Error::SingularHessian { .. }) => {
            flags.push("singular_hessian".into());
            Ok(vec![f64::NAN; x.len()])
        }
        Err(e) => Err(e),
    }
}

fn z_values(est: &[f64], se: &[f64]) -> Vec<f64> {
    est.iter().zip(se).map(|(e, s)| e / s).collect()
}

fn check_names(names: &[String], dim: usize) -> Result<()> {
    if names.len() != dim {
        return Err(Error::Shape(format!("{} coefficient names for dimension {dim}", names.len())));
    }
    Ok(())
}

/// Maximum likelihood binary logit on pooled observations.
pub fn fit_mnl(data: &ChoiceData, names: &[String], config: &BaselineConfig) -> Result<BaselineResult> {
    config.validate()?;
    check_names(names, data.dim)?;
    if data.n_obs() == 0 {
        return Err(Error::Validation("no observations".into()));
    }
    let r = optim::maximize(|b, g| mnl_loglik(data, b, g), &vec![0.0; data.dim], &config.bfgs(), None)?;
    let mut flags = Vec::new();
    if !r.converged {
        flags.push("not_converged".into());
    }
    if r.x.iter().any(|v| v.abs() > config.separation_threshold) {
        flags.push("separation".into());
    }
    let mut g = vec![0.0; data.dim];
    let se = numerical_std_errors(|b| Ok(mnl_loglik(data, b, &mut g)), &r.x, &mut flags)?;
    Ok(BaselineResult {
        model: BaselineKind::Mnl,
        param_names: names.to_vec(),
        z_values: z_values(&r.x, &se),
        estimates: r.x,
        std_errors: se,
        loglik: r.value,
        n_riders: data.riders.len(),
        n_observations: data.n_obs(),
        converged: r.converged,
        iterations: r.iterations,
        class1_share: None,
        start_logliks: vec![r.value],
        flags,
    })
}

struct LcFit {
    params: Vec<f64>,
    loglik: f64,
    iterations: usize,
    converged: bool,
}

fn lc_em(data: &ChoiceData, start: Vec<f64>, config: &BaselineConfig) -> Result<LcFit> {
    let d = data.dim;
    let mut p = start;
    let mut g = vec![0.0; 2 * d + 1];
    let mut prev = lc_mnl_loglik(data, &p, &mut g);
    let mut iterations = 0;
    let mut em_converged = false;
    let settings = config.bfgs();
    while iterations < config.max_em_iterations {
        iterations += 1;
        // responsibilities
        let (lp1, lp2) = (ln_logistic(p[2 * d]), ln_logistic(-p[2 * d]));
        let mut scratch = vec![0.0; d];
        let h: Vec<f64> = data
            .riders
            .iter()
            .map(|r| {
                let l1 = lp1 + data.block_loglik(&p[..d], r.clone(), 0.0, &mut scratch);
                let l2 = lp2 + data.block_loglik(&p[d..2 * d], r.clone(), 0.0, &mut scratch);
                logistic(l1 - l2)
            })
            .collect();
        for (c, range) in [(0usize, 0..d), (1, d..2 * d)] {
            let weighted = |b: &[f64], grad: &mut [f64]| {
                grad.iter_mut().for_each(|v| *v = 0.0);
                let mut total = 0.0;
                for (r, hi) in data.riders.iter().zip(&h) {
                    let w = if c == 0 { *hi } else { 1.0 - hi };
                    if w > 0.0 {
                        total += w * data.block_loglik(b, r.clone(), w, grad);
                    }
                }
                total
            };
            let r = optim::maximize(weighted, &p[range.clone()], &settings, None)?;
            p[range].copy_from_slice(&r.x);
        }
        let share = (h.iter().sum::<f64>() / h.len() as f64).clamp(1e-12, 1.0 - 1e-12);
        p[2 * d] = (share / (1.0 - share)).ln();
        let ll = lc_mnl_loglik(data, &p, &mut g);
        if (ll - prev).abs() < config.em_tolerance {
            prev = ll;
            em_converged = true;
            break;
        }
        prev = ll;
    }
    // polish on the mixture likelihood directly
    let r = optim::maximize(|x, gr| lc_mnl_loglik(data, x, gr), &p, &settings, None)?;
    let (params, loglik) = if r.value >= prev { (r.x, r.value) } else { (p, prev) };
    Ok(LcFit {
        params,
        loglik,
        iterations,
        converged: em_converged || r.converged,
    })
}

/// Two-class latent class logit with one class per rider, fitted by EM
/// from several starts. Class 1 is the class with the more negative anchor
/// coefficient.
pub fn fit_lc_mnl(data: &ChoiceData, names: &[String], config: &BaselineConfig) -> Result<BaselineResult> {
    config.validate()?;
    check_names(names, data.dim)?;
    let d = data.dim;
    let anchor = match &config.anchor {
        Some(a) => names
            .iter()
            .position(|n| n == a)
            .ok_or_else(|| Error::Config(format!("anchor coefficient `{a}` is not in the model")))?,
        None => 0,
    };
    let mnl = fit_mnl(data, names, config)?;
    let b = &mnl.estimates;
    let mut starts = Vec::with_capacity(config.n_starts + 2);
    let stack = |b1: &[f64], b2: &[f64], k: f64| {
        let mut v = b1.to_vec();
        v.extend_from_slice(b2);
        v.push(k);
        v
    };
    starts.push(stack(b, b, 0.0));
    let lo: Vec<f64> = b.iter().map(|v| 1.5 * v).collect();
    let hi: Vec<f64> = b.iter().map(|v| 0.5 * v).collect();
    starts.push(stack(&lo, &hi, 0.0));
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    for _ in 0..config.n_starts {
        let b1: Vec<f64> = b.iter().map(|v| v + rng.gen_range(-1.0..1.0)).collect();
        let b2: Vec<f64> = b.iter().map(|v| v + rng.gen_range(-1.0..1.0)).collect();
        starts.push(stack(&b1, &b2, rng.gen_range(-1.0..1.0)));
    }
    let mut fits = Vec::with_capacity(starts.len());
    for s in starts {
        fits.push(lc_em(data, s, config)?);
    }
    let start_logliks: Vec<f64> = fits.iter().map(|f| f.loglik).collect();
    let best_idx = (0..fits.len()).fold(0, |b, i| if fits[i].loglik > fits[b].loglik { i } else { b });
    let best = fits.swap_remove(best_idx);
    let mut p = best.params;
    if p[anchor] > p[d + anchor] {
        let (a, rest) = p.split_at_mut(d);
        a.swap_with_slice(&mut rest[..d]);
        p[2 * d] = -p[2 * d];
    }
    let share = logistic(p[2 * d]);
    let mut flags = Vec::new();
    if !best.converged {
        flags.push("not_converged".into());
    }
    if share.min(1.0 - share) < config.degenerate_share {
        flags.push("degenerate_class".into());
    }
    if p[..2 * d].iter().any(|v| v.abs() > config.separation_threshold) {
        flags.push("separation".into());
    }
    let mut g = vec![0.0; 2 * d + 1];
    let se = numerical_std_errors(|x| Ok(lc_mnl_loglik(data, x, &mut g)), &p, &mut flags)?;
    let mut param_names: Vec<String> = names.iter().map(|n| format!("class1.{n}")).collect();
    param_names.extend(names.iter().map(|n| format!("class2.{n}")));
    param_names.push("class_probability".into());
    Ok(BaselineResult {
        model: BaselineKind::LcMnl,
        param_names,
        z_values: z_values(&p, &se),
        estimates: p,
        std_errors: se,
        loglik: best.loglik,
        n_riders: data.riders.len(),
        n_observations: data.n_obs(),
        converged: best.converged,
        iterations: best.iterations,
        class1_share: Some(share),
        start_logliks,
        flags,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    /// Plain logit panel: `n` riders with `t` occasions, coefficients `beta`.
    pub(crate) fn logit_panel(n: usize, t: usize, betas: &[(Vec<f64>, f64)], seed: u64) -> ChoiceData {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dim = betas[0].0.len();
        let (mut x, mut y, mut riders) = (Vec::new(), Vec::new(), Vec::new());
        for i in 0..n {
            // class by cumulative share
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            let mut beta = &betas[betas.len() - 1].0;
            for (b, s) in betas {
                acc += s;
                if u < acc {
                    beta = b;
                    break;
                }
            }
            let start = i * t;
            for _ in 0..t {
                let row: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
                let z: f64 = row.iter().zip(beta).map(|(a, b)| a * b).sum();
                y.push(rng.gen::<f64>() < logistic(z));
                x.extend(row);
            }
            riders.push(start..start + t);
        }
        ChoiceData::new(dim, x, y, riders).unwrap()
    }

    fn names(d: usize) -> Vec<String> {
        (0..d).map(|j| format!("b{j}")).collect()
    }

    fn fd_check(f: impl Fn(&[f64], &mut [f64]) -> f64, x: &[f64]) {
        let mut g = vec![0.0; x.len()];
        f(x, &mut g);
        let mut scratch = vec![0.0; x.len()];
        let num = optim::central_gradient(|v| Ok(f(v, &mut scratch)), x, |v| 1e-6 * v.abs().max(1.0))
            .unwrap();
        for (a, n) in g.iter().zip(&num) {
            let rel = (a - n).abs() / n.abs().max(1.0);
            assert!(rel < 1e-6, "analytical {a} numerical {n}");
        }
    }

    #[test]
    fn mnl_recovers_plain_logit() {
        let data = logit_panel(500, 10, &[(vec![-1.0, 0.5], 1.0)], 3);
        let r = fit_mnl(&data, &names(2), &BaselineConfig::default()).unwrap();
        assert!(r.converged);
        for (e, (t, s)) in r.estimates.iter().zip([-1.0, 0.5].iter().zip(&r.std_errors)) {
            assert!((e - t).abs() < 3.0 * s, "{e} vs {t} (se {s})");
        }
    }

    #[test]
    fn mnl_null_data_near_zero() {
        let data = logit_panel(300, 10, &[(vec![0.0, 0.0, 0.0], 1.0)], 4);
        let r = fit_mnl(&data, &names(3), &BaselineConfig::default()).unwrap();
        for (e, s) in r.estimates.iter().zip(&r.std_errors) {
            assert!(e.abs() < 3.0 * s);
        }
    }

    #[test]
    fn mnl_concave_starts_agree() {
        let data = logit_panel(200, 10, &[(vec![-1.0, 0.5], 1.0)], 5);
        let s = BfgsSettings { gtol: 1e-9, max_iter: 500 };
        let a = optim::maximize(|b, g| mnl_loglik(&data, b, g), &[0.0, 0.0], &s, None).unwrap();
        let b = optim::maximize(|b, g| mnl_loglik(&data, b, g), &[3.0, -2.0], &s, None).unwrap();
        assert!((a.value - b.value).abs() < 1e-6);
    }

    #[test]
    fn gradients_match_differences() {
        let data = logit_panel(30, 6, &[(vec![-1.0, 0.5, 0.2], 1.0)], 6);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10 {
            let b: Vec<f64> = (0..3).map(|_| rng.gen_range(-2.0..2.0)).collect();
            fd_check(|x, g| mnl_loglik(&data, x, g), &b);
            let p: Vec<f64> = (0..7).map(|_| rng.gen_range(-2.0..2.0)).collect();
            fd_check(|x, g| lc_mnl_loglik(&data, x, g), &p);
        }
    }

    #[test]
    fn lc_mnl_recovers_mixture() {
        let data = logit_panel(
            600,
            15,
            &[(vec![-3.0, 0.5], 0.6), (vec![-1.0, 0.5], 0.4)],
            7,
        );
        let r = fit_lc_mnl(&data, &names(2), &BaselineConfig::default()).unwrap();
        let truth = [-3.0, 0.5, -1.0, 0.5, (0.6f64 / 0.4).ln()];
        for ((e, t), s) in r.estimates.iter().zip(&truth).zip(&r.std_errors) {
            assert!((e - t).abs() < 3.0 * s, "{:?} vs {truth:?} (se {:?})", r.estimates, r.std_errors);
        }
        let m = fit_mnl(&data, &names(2), &BaselineConfig::default()).unwrap();
        assert!(r.loglik >= m.loglik - 1e-6);
        assert_eq!(r.param_names.len(), 5);
    }

    #[test]
    fn lc_mnl_nests_mnl_on_single_class() {
        let data = logit_panel(200, 8, &[(vec![-1.0, 0.5], 1.0)], 8);
        let r = fit_lc_mnl(&data, &names(2), &BaselineConfig::default()).unwrap();
        let m = fit_mnl(&data, &names(2), &BaselineConfig::default()).unwrap();
        assert!(r.loglik >= m.loglik - 1e-6);
    }

    #[test]
    fn bad_shapes_rejected() {
        assert!(ChoiceData::new(2, vec![0.0; 3], vec![true], vec![0..1]).is_err());
        assert!(ChoiceData::new(1, vec![0.0; 2], vec![true, false], vec![0..1]).is_err());
    }
}
