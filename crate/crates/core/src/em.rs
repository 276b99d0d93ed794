//! EM estimation with a scaled forward-backward E-step.
//!
//! The M-step splits into five independent weighted maximisations: a
//! weighted simulated mixed logit for the compensatory choice model, a
//! weighted binary logit for the non-compensatory choice model, one for the
//! initial class model and one per origin class for the transitions. Each is
//! solved by BFGS with analytical gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::iblt::{DesignDims, ProcessedRider};
use crate::model::{
    choice_sign, comp_emissions, logistic, Class, DrawSet, ParamLayout, RiderDraws, RiderKernels,
    Theta,
};
use crate::optim::{self, BfgsSettings};
use crate::panel::Route;

// ---------------------------------------------------------------------------
// Forward / backward

/// Scaled forward variables: each row sums to one, with the log of the
/// normaliser kept per occasion.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardPass {
    pub alpha: Vec<[f64; 2]>,
    pub log_scale: Vec<f64>,
}

impl ForwardPass {
    /// Log-likelihood of the rider's choices.
    pub fn loglik(&self) -> f64 {
        self.log_scale.iter().sum()
    }
}

pub fn forward_from_kernels(k: &RiderKernels, rider_id: &str) -> Result<ForwardPass> {
    let n = k.emission.len();
    let mut alpha = Vec::with_capacity(n);
    let mut log_scale = Vec::with_capacity(n);
    let mut prev = [0.0; 2];
    for t in 0..n {
        let mut row = [0.0; 2];
        for s in 0..2 {
            let prior = if t == 0 {
                k.init[s]
            } else {
                prev[0] * k.transition[t - 1][0][s] + prev[1] * k.transition[t - 1][1][s]
            };
            row[s] = prior * k.emission[t][s];
        }
        let c = row[0] + row[1];
        if !(c > 0.0 && c.is_finite()) {
            return Err(Error::Numeric(format!(
                "forward recursion vanished at rider {rider_id}, occasion {}",
                t + 1
            )));
        }
        row[0] /= c;
        row[1] /= c;
        alpha.push(row);
        log_scale.push(c.ln());
        prev = row;
    }
    Ok(ForwardPass { alpha, log_scale })
}

/// Backward variables scaled by the forward normalisers, so that
/// `alpha[t] . beta[t] = 1` at every occasion.
pub fn backward_from_kernels(k: &RiderKernels, fwd: &ForwardPass) -> Vec<[f64; 2]> {
    let n = k.emission.len();
    let mut beta = vec![[1.0; 2]; n];
    for t in (0..n.saturating_sub(1)).rev() {
        let c = fwd.log_scale[t + 1].exp();
        for s in 0..2 {
            let mut acc = 0.0;
            for s2 in 0..2 {
                acc += k.transition[t][s][s2] * k.emission[t + 1][s2] * beta[t + 1][s2];
            }
            beta[t][s] = acc / c;
        }
    }
    beta
}

pub fn forward(rider: &ProcessedRider, theta: &Theta, draws: RiderDraws<'_>) -> Result<ForwardPass> {
    let k = RiderKernels::compute(rider, theta, draws)?;
    forward_from_kernels(&k, &rider.rider_id)
}

/// Scaled backward variables; see [`backward_from_kernels`].
pub fn backward(rider: &ProcessedRider, theta: &Theta, draws: RiderDraws<'_>) -> Result<Vec<[f64; 2]>> {
    let k = RiderKernels::compute(rider, theta, draws)?;
    let fwd = forward_from_kernels(&k, &rider.rider_id)?;
    Ok(backward_from_kernels(&k, &fwd))
}

/// Per-rider conditional log-likelihoods, in rider order.
pub fn rider_logliks(data: &[ProcessedRider], theta: &Theta, draws: &DrawSet) -> Result<Vec<f64>> {
    draws.check(data.len(), theta.varrho.len())?;
    data.par_iter()
        .enumerate()
        .map(|(i, r)| forward(r, theta, draws.rider(i)).map(|f| f.loglik()))
        .collect()
}

// ---------------------------------------------------------------------------
// E-step

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiderPosterior {
    /// `pi[t][s]`, zero-based occasion.
    pub pi: Vec<[f64; 2]>,
    /// `omega[t - 1][r][s]`: class `r` at zero-based occasion `t - 1` and
    /// class `s` at `t`, for `t = 1..T`.
    pub omega: Vec<[[f64; 2]; 2]>,
    pub loglik: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Posteriors {
    pub riders: Vec<RiderPosterior>,
}

impl Posteriors {
    pub fn loglik(&self) -> f64 {
        self.riders.iter().map(|r| r.loglik).sum()
    }

    /// Largest violation of the normalisation and marginalisation identities.
    pub fn max_identity_violation(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for r in &self.riders {
            for p in &r.pi {
                worst = worst.max((p[0] + p[1] - 1.0).abs());
            }
            for (k, w) in r.omega.iter().enumerate() {
                let total = w[0][0] + w[0][1] + w[1][0] + w[1][1];
                worst = worst.max((total - 1.0).abs());
                for s in 0..2 {
                    worst = worst.max((w[0][s] + w[1][s] - r.pi[k + 1][s]).abs());
                    worst = worst.max((w[s][0] + w[s][1] - r.pi[k][s]).abs());
                }
            }
        }
        worst
    }
}

pub fn posterior_from_kernels(k: &RiderKernels, rider_id: &str) -> Result<RiderPosterior> {
    let fwd = forward_from_kernels(k, rider_id)?;
    let beta = backward_from_kernels(k, &fwd);
    let n = k.emission.len();
    let mut pi = Vec::with_capacity(n);
    for t in 0..n {
        let a = fwd.alpha[t];
        let b = beta[t];
        let z = a[0] * b[0] + a[1] * b[1];
        pi.push([a[0] * b[0] / z, a[1] * b[1] / z]);
    }
    let mut omega = Vec::with_capacity(n.saturating_sub(1));
    for t in 1..n {
        let mut w = [[0.0; 2]; 2];
        let mut z = 0.0;
        for r in 0..2 {
            for s in 0..2 {
                w[r][s] = fwd.alpha[t - 1][r] * k.transition[t - 1][r][s] * k.emission[t][s] * beta[t][s];
                z += w[r][s];
            }
        }
        for row in &mut w {
            row[0] /= z;
            row[1] /= z;
        }
        omega.push(w);
    }
    Ok(RiderPosterior {
        pi,
        omega,
        loglik: fwd.loglik(),
    })
}

pub fn e_step(data: &[ProcessedRider], theta: &Theta, draws: &DrawSet) -> Result<Posteriors> {
    draws.check(data.len(), theta.varrho.len())?;
    let riders = data
        .par_iter()
        .enumerate()
        .map(|(i, r)| {
            let k = RiderKernels::compute(r, theta, draws.rider(i))?;
            posterior_from_kernels(&k, &r.rider_id)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Posteriors { riders })
}

// ---------------------------------------------------------------------------
// M-step objectives

/// `ln logistic(z)`, stable for large `|z|`.
#[inline]
fn ln_logistic(z: f64) -> f64 {
    if z >= 0.0 {
        -(-z).exp().ln_1p()
    } else {
        z - z.exp().ln_1p()
    }
}

/// Weighted binary logit with fractional outcomes:
/// `sum_n w1_n ln p_n + w0_n ln(1 - p_n)`, `p_n = logistic(x_n . beta)`.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedLogit {
    pub dim: usize,
    pub design: Vec<f64>,
    pub w1: Vec<f64>,
    pub w0: Vec<f64>,
}

impl WeightedLogit {
    pub fn new(dim: usize) -> Self {
        WeightedLogit {
            dim,
            design: Vec::new(),
            w1: Vec::new(),
            w0: Vec::new(),
        }
    }

    pub fn push(&mut self, x: &[f64], w1: f64, w0: f64) {
        debug_assert_eq!(x.len(), self.dim);
        self.design.extend_from_slice(x);
        self.w1.push(w1);
        self.w0.push(w0);
    }

    pub fn len(&self) -> usize {
        self.w1.len()
    }

    pub fn is_empty(&self) -> bool {
        self.w1.is_empty()
    }

    pub fn value_grad(&self, beta: &[f64], grad: &mut [f64]) -> f64 {
        grad.iter_mut().for_each(|g| *g = 0.0);
        let mut total = 0.0;
        for (n, x) in self.design.chunks_exact(self.dim.max(1)).enumerate().take(self.len()) {
            let x = if self.dim == 0 { &[][..] } else { x };
            let z: f64 = x.iter().zip(beta).map(|(a, b)| a * b).sum();
            let (w1, w0) = (self.w1[n], self.w0[n]);
            total += w1 * ln_logistic(z) + w0 * ln_logistic(-z);
            let resid = w1 - (w1 + w0) * logistic(z);
            for (g, xi) in grad.iter_mut().zip(x) {
                *g += resid * xi;
            }
        }
        total
    }

    pub fn value(&self, beta: &[f64]) -> f64 {
        let mut g = vec![0.0; self.dim];
        self.value_grad(beta, &mut g)
    }
}

/// Weighted simulated mixed logit for the compensatory class, in
/// `(gamma, varrho, sd)` coordinates with `psi = sd^2`.
pub struct MixedLogitObjective<'a> {
    pub data: &'a [ProcessedRider],
    /// Per rider, per occasion weight (posterior of the compensatory class).
    pub weights: Vec<Vec<f64>>,
    pub draws: &'a DrawSet,
    pub n_fixed: usize,
    pub n_random: usize,
}

impl<'a> MixedLogitObjective<'a> {
    pub fn dim(&self) -> usize {
        self.n_fixed + 2 * self.n_random
    }

    fn rider_value_grad(&self, i: usize, x: &[f64], grad: &mut [f64]) -> f64 {
        let (nf, k) = (self.n_fixed, self.n_random);
        let gamma = &x[..nf];
        let varrho = &x[nf..nf + k];
        let sd = &x[nf + k..nf + 2 * k];
        let draws = self.draws.rider(i);
        let inv_r = 1.0 / draws.n_draws as f64;
        let rider = &self.data[i];
        let mut total = 0.0;
        let mut dg = vec![0.0; k];
        let mut scale = vec![0.0; k];
        let mut acc_d = vec![0.0; k];
        for (o, &w) in rider.occasions.iter().zip(&self.weights[i]) {
            if w == 0.0 {
                continue;
            }
            let s = choice_sign(o);
            let mut base = 0.0;
            for j in 0..nf {
                base += gamma[j] * (o.fixed[0][j] - o.fixed[1][j]);
            }
            for j in 0..k {
                dg[j] = o.random[0][j] - o.random[1][j];
                base += varrho[j] * dg[j];
                scale[j] = s * sd[j] * dg[j];
            }
            base *= s;
            let mut p_sum = 0.0;
            let mut d_sum = 0.0;
            acc_d.iter_mut().for_each(|a| *a = 0.0);
            for r in 0..draws.n_draws {
                let d = draws.row(r);
                let mut u = base;
                for j in 0..k {
                    u += scale[j] * d[j];
                }
                let p = logistic(u);
                let dp = p * (1.0 - p);
                p_sum += p;
                d_sum += dp;
                for j in 0..k {
                    acc_d[j] += dp * d[j];
                }
            }
            let p = (p_sum * inv_r).max(crate::model::PROB_FLOOR);
            total += w * p.ln();
            // d ln P / d theta = s * (1/P) * mean_r p_r (1 - p_r) dV/dtheta
            let c = w * s * inv_r / p;
            for j in 0..nf {
                grad[j] += c * d_sum * (o.fixed[0][j] - o.fixed[1][j]);
            }
            for j in 0..k {
                grad[nf + j] += c * d_sum * dg[j];
                grad[nf + k + j] += c * acc_d[j] * dg[j];
            }
        }
        total
    }

    pub fn value_grad(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        let dim = self.dim();
        let parts: Vec<(f64, Vec<f64>)> = (0..self.data.len())
            .into_par_iter()
            .map(|i| {
                let mut g = vec![0.0; dim];
                let v = self.rider_value_grad(i, x, &mut g);
                (v, g)
            })
            .collect();
        grad.iter_mut().for_each(|g| *g = 0.0);
        let mut total = 0.0;
        for (v, g) in parts {
            total += v;
            for (a, b) in grad.iter_mut().zip(&g) {
                *a += b;
            }
        }
        total
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        let mut g = vec![0.0; self.dim()];
        self.value_grad(x, &mut g)
    }
}

/// The five M-step subproblems for given posteriors.
pub struct MStepProblems<'a> {
    pub choice: MixedLogitObjective<'a>,
    pub noncomp: WeightedLogit,
    pub init: WeightedLogit,
    pub trans: [WeightedLogit; 2],
}

impl<'a> MStepProblems<'a> {
    pub fn build(
        data: &'a [ProcessedRider],
        posteriors: &Posteriors,
        draws: &'a DrawSet,
        dims: &DesignDims,
    ) -> Result<Self> {
        if posteriors.riders.len() != data.len() {
            return Err(Error::Shape(format!(
                "{} posteriors for {} riders",
                posteriors.riders.len(),
                data.len()
            )));
        }
        let init_dim = dims.init_history + dims.init_mismatch;
        let trans_dim = dims.transition_history + dims.transition_mismatch;
        let mut init = WeightedLogit::new(init_dim);
        let mut trans = [WeightedLogit::new(trans_dim), WeightedLogit::new(trans_dim)];
        let mut noncomp = WeightedLogit::new(2 + dims.noncomp_history);
        let mut weights = Vec::with_capacity(data.len());
        let mut x = Vec::new();
        for (rider, post) in data.iter().zip(&posteriors.riders) {
            x.clear();
            x.extend(&rider.init_history);
            x.extend(&rider.init_mismatch);
            init.push(&x, post.pi[0][0], post.pi[0][1]);
            for (t, w) in post.omega.iter().enumerate() {
                let o = &rider.occasions[t];
                x.clear();
                x.extend(&o.history);
                x.extend(&o.mismatch);
                for r in 0..2 {
                    trans[r].push(&x, w[r][0], w[r][1]);
                }
            }
            for (o, p) in rider.occasions.iter().zip(&post.pi) {
                x.clear();
                x.push(if o.lagged == Route::One { 1.0 } else { 0.0 });
                x.push(if o.lagged == Route::Two { -1.0 } else { 0.0 });
                x.extend(&o.noncomp_history);
                let w = p[1];
                if o.choice == Route::One {
                    noncomp.push(&x, w, 0.0);
                } else {
                    noncomp.push(&x, 0.0, w);
                }
            }
            weights.push(post.pi.iter().map(|p| p[0]).collect());
        }
        Ok(MStepProblems {
            choice: MixedLogitObjective {
                data,
                weights,
                draws,
                n_fixed: dims.fixed,
                n_random: dims.random,
            },
            noncomp,
            init,
            trans,
        })
    }

    /// Expected complete-data log-likelihood at `theta`.
    pub fn q_value(&self, theta: &Theta) -> f64 {
        let v = theta.to_vec();
        let l = theta.layout();
        self.choice.value(&choice_point(theta))
            + self.noncomp.value(&v[l.noncomp.clone()])
            + self.init.value(&v[l.init.clone()])
            + self.trans[0].value(&v[l.trans1.clone()])
            + self.trans[1].value(&v[l.trans2.clone()])
    }
}

/// `(gamma, varrho, sd)` for the mixed logit objective.
fn choice_point(theta: &Theta) -> Vec<f64> {
    let mut x = theta.gamma.clone();
    x.extend(&theta.varrho);
    x.extend(theta.psi_diag.iter().map(|v| v.max(0.0).sqrt()));
    x
}

// ---------------------------------------------------------------------------
// EM driver

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmConfig {
    /// Stop when successive log-likelihoods differ by less than this.
    pub tolerance: f64,
    pub max_iterations: usize,
    pub n_starts: usize,
    /// EM iterations given to each start before the best one is continued
    /// to convergence; `None` runs every start to convergence.
    pub start_iterations: Option<usize>,
    pub draws: usize,
    /// Follow every draw with its copies under all coordinate sign flips.
    pub antithetic: bool,
    pub seed: u64,
    /// Gradient tolerance of the inner BFGS solves.
    pub gradient_tolerance: f64,
    pub max_inner_iterations: usize,
    /// Random starts draw coefficients from `uniform(-w, w)`.
    pub start_half_width: f64,
    pub compute_std_errors: bool,
    /// Once successive log-likelihoods differ by less than this, maximise
    /// the log-likelihood directly by BFGS before resuming EM; `None`
    /// runs plain EM throughout.
    pub quasi_newton_switch: Option<f64>,
    pub quasi_newton_max_iterations: usize,
}

impl Default for EmConfig {
    fn default() -> Self {
        EmConfig {
            tolerance: 1e-6,
            max_iterations: 5000,
            n_starts: 5,
            start_iterations: None,
            draws: 200,
            antithetic: true,
            seed: 1,
            gradient_tolerance: 1e-6,
            max_inner_iterations: 200,
            start_half_width: 0.5,
            compute_std_errors: true,
            quasi_newton_switch: Some(1e-2),
            quasi_newton_max_iterations: 1000,
        }
    }
}

impl EmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tolerance > 0.0) {
            return Err(Error::Config("em.tolerance must be positive".into()));
        }
        if self.max_iterations == 0 {
            return Err(Error::Config("em.max_iterations must be >= 1".into()));
        }
        if self.n_starts == 0 {
            return Err(Error::Config("em.n_starts must be >= 1".into()));
        }
        if self.draws == 0 {
            return Err(Error::Config("em.draws must be >= 1".into()));
        }
        if !(self.gradient_tolerance > 0.0) {
            return Err(Error::Config("em.gradient_tolerance must be positive".into()));
        }
        Ok(())
    }

    fn bfgs(&self) -> BfgsSettings {
        BfgsSettings {
            gtol: self.gradient_tolerance,
            max_iter: self.max_inner_iterations,
        }
    }

    /// The draw set used for `n_riders` riders and `dim` random coefficients.
    pub fn draw_set(&self, n_riders: usize, dim: usize) -> DrawSet {
        DrawSet::halton_with(n_riders, self.draws, dim, self.seed, self.antithetic)
    }
}

/// Warm-start state carried between M-steps: the BFGS inverse Hessians of
/// the five subproblems.
#[derive(Debug, Clone, Default)]
pub struct MStepState {
    inv_hessians: [Option<Vec<f64>>; 5],
}

fn solve_block<F>(
    name: &str,
    mut f: F,
    x0: &[f64],
    settings: &BfgsSettings,
    warm: &mut Option<Vec<f64>>,
    seed: u64,
) -> Result<Vec<f64>>
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    match optim::maximize(&mut f, x0, settings, warm.as_deref()) {
        Ok(r) => {
            *warm = Some(r.inv_hessian);
            Ok(r.x)
        }
        Err(first) => {
            // retry from a perturbed start
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let start: Vec<f64> = x0.iter().map(|v| v + rng.gen_range(-0.1..0.1)).collect();
            *warm = None;
            let r = optim::maximize(&mut f, &start, settings, None).map_err(|e| {
                Error::Optimizer(format!("{name} subproblem: {first}; retry: {e}"))
            })?;
            let mut g = vec![0.0; x0.len()];
            let before = f(x0, &mut g);
            if before.is_finite() && before > r.value {
                return Ok(x0.to_vec());
            }
            *warm = Some(r.inv_hessian);
            Ok(r.x)
        }
    }
}

/// One M-step from `theta_prev`, warm-starting every subproblem.
pub fn m_step(
    data: &[ProcessedRider],
    posteriors: &Posteriors,
    theta_prev: &Theta,
    draws: &DrawSet,
    config: &EmConfig,
) -> Result<Theta> {
    m_step_with_state(data, posteriors, theta_prev, draws, config, &mut MStepState::default())
}

pub fn m_step_with_state(
    data: &[ProcessedRider],
    posteriors: &Posteriors,
    theta_prev: &Theta,
    draws: &DrawSet,
    config: &EmConfig,
    state: &mut MStepState,
) -> Result<Theta> {
    let dims = theta_prev.dims();
    let problems = MStepProblems::build(data, posteriors, draws, &dims)?;
    let settings = config.bfgs();
    let layout = theta_prev.layout();
    let v = theta_prev.to_vec();
    let mut next = v.clone();
    let [h_choice, h_nc, h_init, h_t1, h_t2] = &mut state.inv_hessians;

    // compensatory choice model
    let x0 = choice_point(theta_prev);
    let f0 = problems.choice.value(&x0);
    let mut x = solve_block(
        "choice",
        |x, g| problems.choice.value_grad(x, g),
        &x0,
        &settings,
        h_choice,
        config.seed ^ 0x11,
    )?;
    let (nf, k) = (dims.fixed, dims.random);
    for s in &mut x[nf + k..] {
        *s = s.abs();
    }
    if problems.choice.value(&x) >= f0 {
        next[layout.gamma.clone()].copy_from_slice(&x[..nf]);
        next[layout.varrho.clone()].copy_from_slice(&x[nf..nf + k]);
        for (p, s) in next[layout.psi.clone()].iter_mut().zip(&x[nf + k..]) {
            *p = s * s;
        }
    }

    let blocks: [(&str, &WeightedLogit, std::ops::Range<usize>, &mut Option<Vec<f64>>); 4] = [
        ("non-compensatory", &problems.noncomp, layout.noncomp.clone(), h_nc),
        ("initialisation", &problems.init, layout.init.clone(), h_init),
        ("transition from class 1", &problems.trans[0], layout.trans1.clone(), h_t1),
        ("transition from class 2", &problems.trans[1], layout.trans2.clone(), h_t2),
    ];
    for (j, (name, obj, range, warm)) in blocks.into_iter().enumerate() {
        let x = solve_block(
            name,
            |x, g| obj.value_grad(x, g),
            &v[range.clone()],
            &settings,
            warm,
            config.seed ^ (0x20 + j as u64),
        )?;
        next[range].copy_from_slice(&x);
    }
    Theta::from_vec(&dims, &next)
}

/// What an EM observer sees after each E-step.
pub struct IterationInfo<'a> {
    pub iteration: usize,
    pub loglik: f64,
    pub theta: &'a Theta,
    pub posteriors: &'a Posteriors,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmRun {
    pub theta: Theta,
    pub loglik: f64,
    pub trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

/// Runs EM from `theta0` for at most `max_iterations` M-steps.
pub fn em_run(
    data: &[ProcessedRider],
    theta0: &Theta,
    draws: &DrawSet,
    config: &EmConfig,
    max_iterations: usize,
    observer: &mut dyn FnMut(&IterationInfo<'_>),
) -> Result<EmRun> {
    let mut theta = theta0.clone();
    let mut state = MStepState::default();
    let mut trace = Vec::new();
    let mut iterations = 0;
    let mut polished = false;
    loop {
        let post = e_step(data, &theta, draws)?;
        let ll = post.loglik();
        if !ll.is_finite() {
            return Err(Error::Numeric(format!(
                "log-likelihood not finite at EM iteration {iterations}"
            )));
        }
        observer(&IterationInfo {
            iteration: iterations,
            loglik: ll,
            theta: &theta,
            posteriors: &post,
        });
        let change = trace.last().map(|prev: &f64| (ll - prev).abs());
        let converged = change.is_some_and(|d| d < config.tolerance);
        trace.push(ll);
        if converged || iterations >= max_iterations {
            return Ok(EmRun {
                theta,
                loglik: ll,
                trace,
                iterations,
                converged,
            });
        }
        iterations += 1;
        if let (Some(switch), false) = (config.quasi_newton_switch, polished) {
            if change.is_some_and(|d| d < switch) {
                polished = true;
                theta = maximize_loglik(data, &theta, draws, config)?;
                continue;
            }
        }
        theta = m_step_with_state(data, &post, &theta, draws, config, &mut state)?;
    }
}

/// Flat parameters with standard deviations in place of variances.
fn to_sd_space(theta: &Theta) -> Vec<f64> {
    let mut v = theta.to_vec();
    for p in &mut v[theta.layout().psi] {
        *p = p.max(0.0).sqrt();
    }
    v
}

fn from_sd_space(dims: &DesignDims, x: &[f64]) -> Result<Theta> {
    let mut v = x.to_vec();
    for p in &mut v[ParamLayout::new(dims).psi] {
        *p *= *p;
    }
    Theta::from_vec(dims, &v)
}

/// Log-likelihood and its gradient in standard-deviation coordinates,
/// the gradient taken as that of the expected complete-data
/// log-likelihood at the current posteriors.
pub fn loglik_score_sd(
    data: &[ProcessedRider],
    dims: &DesignDims,
    x: &[f64],
    draws: &DrawSet,
    grad: &mut [f64],
) -> Result<f64> {
    let theta = from_sd_space(dims, x)?;
    let post = e_step(data, &theta, draws)?;
    let problems = MStepProblems::build(data, &post, draws, dims)?;
    let layout = ParamLayout::new(dims);
    let choice = layout.choice();
    problems.choice.value_grad(&x[choice.clone()], &mut grad[choice]);
    for (obj, range) in [
        (&problems.noncomp, layout.noncomp.clone()),
        (&problems.init, layout.init.clone()),
        (&problems.trans[0], layout.trans1.clone()),
        (&problems.trans[1], layout.trans2.clone()),
    ] {
        obj.value_grad(&x[range.clone()], &mut grad[range]);
    }
    Ok(post.loglik())
}

/// Direct BFGS maximisation of the log-likelihood from `theta`.
fn maximize_loglik(data: &[ProcessedRider], theta: &Theta, draws: &DrawSet, config: &EmConfig) -> Result<Theta> {
    let dims = theta.dims();
    let x0 = to_sd_space(theta);
    let settings = BfgsSettings {
        gtol: config.gradient_tolerance,
        max_iter: config.quasi_newton_max_iterations,
    };
    let f = |x: &[f64], g: &mut [f64]| {
        loglik_score_sd(data, &dims, x, draws, g).unwrap_or(f64::NAN)
    };
    let r = optim::maximize(f, &x0, &settings, None)?;
    let mut x = r.x;
    for p in &mut x[ParamLayout::new(&dims).psi] {
        *p = p.abs();
    }
    from_sd_space(&dims, &x)
}

/// Random start: coefficients uniform in `(-w, w)`, both inertia parameters
/// at 1 and random-coefficient standard deviations at 0.5.
pub fn random_start(dims: &DesignDims, half_width: f64, rng: &mut impl Rng) -> Theta {
    let mut th = Theta::zeros(dims);
    let mut u = |v: &mut Vec<f64>| {
        for x in v.iter_mut() {
            *x = rng.gen_range(-half_width..half_width);
        }
    };
    u(&mut th.zeta0);
    u(&mut th.zeta0_c);
    u(&mut th.zeta1);
    u(&mut th.zeta1_c);
    u(&mut th.zeta2);
    u(&mut th.zeta2_c);
    u(&mut th.gamma);
    u(&mut th.varrho);
    u(&mut th.noncomp);
    th.psi_diag.iter_mut().for_each(|p| *p = 0.25);
    th.lambda1 = 1.0;
    th.lambda2 = 1.0;
    th
}

/// Block dimensions of a processed sample; riders must agree.
pub fn design_dims(data: &[ProcessedRider]) -> Result<DesignDims> {
    let first = data
        .first()
        .ok_or_else(|| Error::Validation("no riders to estimate on".into()))?;
    let o = first
        .occasions
        .first()
        .ok_or_else(|| Error::Validation(format!("rider {} has no modelling occasions", first.rider_id)))?;
    let dims = DesignDims {
        init_mismatch: first.init_mismatch.len(),
        init_history: first.init_history.len(),
        transition_mismatch: o.mismatch.len(),
        transition_history: o.history.len(),
        fixed: o.fixed[0].len(),
        random: o.random[0].len(),
        noncomp_history: o.noncomp_history.len(),
    };
    for r in data {
        let ok = r.init_mismatch.len() == dims.init_mismatch
            && r.init_history.len() == dims.init_history
            && r.occasions.iter().all(|o| {
                o.mismatch.len() == dims.transition_mismatch
                    && o.history.len() == dims.transition_history
                    && o.fixed.iter().all(|f| f.len() == dims.fixed)
                    && o.random.iter().all(|g| g.len() == dims.random)
                    && o.noncomp_history.len() == dims.noncomp_history
            });
        if !ok {
            return Err(Error::Shape(format!(
                "rider {} has covariate blocks of different sizes",
                r.rider_id
            )));
        }
    }
    Ok(dims)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimationResult {
    pub theta_hat: Theta,
    pub param_names: Vec<String>,
    pub estimates: Vec<f64>,
    pub std_errors: Vec<f64>,
    pub z_values: Vec<f64>,
    pub gradient_at_convergence: Vec<f64>,
    /// Variances estimated at the zero bound.
    pub at_bound: Vec<bool>,
    pub loglik: f64,
    pub loglik_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub hessian_positive_definite: Option<bool>,
    pub hessian_condition_number: Option<f64>,
    pub start_logliks: Vec<f64>,
    pub mu: f64,
    pub memory: usize,
    pub seed: u64,
    pub draws: usize,
    pub antithetic: bool,
    pub n_riders: usize,
    pub n_occasions: usize,
}

/// Variances below this are moved onto zero when that does not lower the
/// log-likelihood.
pub const BOUNDARY_SNAP: f64 = 1e-2;
/// Log-likelihood loss accepted when moving a variance onto zero.
pub const SNAP_TOLERANCE: f64 = 1e-8;

/// Fits the model by multi-start EM.
///
/// `param_names` label the flat parameter vector; `mu` and `memory` are
/// recorded in the result.
pub fn em_estimate(
    data: &[ProcessedRider],
    config: &EmConfig,
    param_names: Vec<String>,
    mu: f64,
    memory: usize,
) -> Result<EstimationResult> {
    em_estimate_from(data, config, param_names, mu, memory, None)
}

/// As [`em_estimate`], with an optional extra start (for example the
/// estimate at a neighbouring memory decay).
pub fn em_estimate_from(
    data: &[ProcessedRider],
    config: &EmConfig,
    param_names: Vec<String>,
    mu: f64,
    memory: usize,
    extra_start: Option<&Theta>,
) -> Result<EstimationResult> {
    config.validate()?;
    let dims = design_dims(data)?;
    if let Some(r) = data.iter().find(|r| r.occasions.len() < 2) {
        return Err(Error::Validation(format!(
            "rider {} has fewer than two modelling occasions",
            r.rider_id
        )));
    }
    let layout = ParamLayout::new(&dims);
    if param_names.len() != layout.len {
        return Err(Error::Shape(format!(
            "{} parameter names for {} parameters",
            param_names.len(),
            layout.len
        )));
    }
    let draws = config.draw_set(data.len(), dims.random);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut starts: Vec<Theta> = (0..config.n_starts)
        .map(|_| random_start(&dims, config.start_half_width, &mut rng))
        .collect();
    if let Some(th) = extra_start {
        th.validate(&dims)?;
        starts.insert(0, th.clone());
    }

    let budget = config.start_iterations.unwrap_or(config.max_iterations);
    let mut runs = Vec::with_capacity(starts.len());
    for th in &starts {
        runs.push(em_run(data, th, &draws, config, budget, &mut |_| {})?);
    }
    let start_logliks: Vec<f64> = runs.iter().map(|r| r.loglik).collect();
    let best_idx = start_logliks
        .iter()
        .enumerate()
        .fold(0, |b, (i, v)| if *v > start_logliks[b] { i } else { b });
    let mut best = runs.swap_remove(best_idx);
    if !best.converged && best.iterations < config.max_iterations {
        let more = em_run(
            data,
            &best.theta,
            &draws,
            config,
            config.max_iterations - best.iterations,
            &mut |_| {},
        )?;
        let mut trace = best.trace;
        trace.pop();
        trace.extend(more.trace);
        best = EmRun {
            theta: more.theta,
            loglik: more.loglik,
            trace,
            iterations: best.iterations + more.iterations,
            converged: more.converged,
        };
    }

    let mut evaluator = LoglikEvaluator::new(data, &draws, dims);
    let mut estimates = best.theta.to_vec();
    let mut current = evaluator.loglik(&estimates)?;
    for i in layout.psi.clone() {
        if estimates[i] > 0.0 && estimates[i] < BOUNDARY_SNAP {
            let mut x = estimates.clone();
            x[i] = 0.0;
            let ll = evaluator.loglik(&x)?;
            if ll >= current - SNAP_TOLERANCE {
                estimates = x;
                current = ll;
                best.loglik = best.loglik.max(ll);
                best.trace.push(best.loglik);
            }
        }
    }
    best.theta = Theta::from_vec(&dims, &estimates)?;
    let lower = variance_bounds(&layout);
    let gradient = optim::bounded_gradient(
        |x| evaluator.loglik(x),
        &estimates,
        |v| 1e-6 * v.abs().max(1.0),
        &lower,
    )?;
    let at_bound: Vec<bool> = estimates
        .iter()
        .zip(&lower)
        .map(|(v, lb)| lb.is_some_and(|b| *v <= b))
        .collect();
    let (std_errors, pd, cond) = if config.compute_std_errors {
        match std_errors_with(&mut evaluator, &estimates) {
            Ok(r) => (r.std_errors, Some(r.positive_definite), Some(r.condition_number)),
            Err(Error::SingularHessian { condition }) => {
                (vec![f64::NAN; estimates.len()], Some(false), Some(condition))
            }
            Err(e) => return Err(e),
        }
    } else {
        (vec![f64::NAN; estimates.len()], None, None)
    };
    let z_values = estimates
        .iter()
        .zip(&std_errors)
        .map(|(e, s)| e / s)
        .collect();
    Ok(EstimationResult {
        theta_hat: best.theta,
        param_names,
        estimates,
        std_errors,
        z_values,
        gradient_at_convergence: gradient,
        at_bound,
        loglik: best.loglik,
        loglik_trace: best.trace,
        iterations: best.iterations,
        converged: best.converged,
        hessian_positive_definite: pd,
        hessian_condition_number: cond,
        start_logliks,
        mu,
        memory,
        seed: config.seed,
        draws: config.draws,
        antithetic: config.antithetic,
        n_riders: data.len(),
        n_occasions: data.iter().map(|r| r.occasions.len()).sum(),
    })
}

// ---------------------------------------------------------------------------
// Log-likelihood evaluation and standard errors

/// Evaluates the conditional log-likelihood on flat parameter vectors,
/// caching the simulated compensatory emissions between calls that share
/// the choice-model block.
pub struct LoglikEvaluator<'a> {
    data: &'a [ProcessedRider],
    draws: &'a DrawSet,
    dims: DesignDims,
    layout: ParamLayout,
    cached_choice: Option<Vec<f64>>,
    cached_emissions: Vec<Vec<f64>>,
}

impl<'a> LoglikEvaluator<'a> {
    pub fn new(data: &'a [ProcessedRider], draws: &'a DrawSet, dims: DesignDims) -> Self {
        LoglikEvaluator {
            data,
            draws,
            dims,
            layout: ParamLayout::new(&dims),
            cached_choice: None,
            cached_emissions: Vec::new(),
        }
    }

    pub fn loglik(&mut self, x: &[f64]) -> Result<f64> {
        let theta = Theta::from_vec(&self.dims, x)?;
        let choice = &x[self.layout.choice()];
        if self.cached_choice.as_deref() != Some(choice) {
            self.draws.check(self.data.len(), self.dims.random)?;
            self.cached_emissions = self
                .data
                .par_iter()
                .enumerate()
                .map(|(i, r)| {
                    comp_emissions(r, &theta.gamma, &theta.varrho, &theta.psi_diag, self.draws.rider(i))
                })
                .collect::<Result<_>>()?;
            self.cached_choice = Some(choice.to_vec());
        }
        let parts: Vec<f64> = self
            .data
            .par_iter()
            .zip(&self.cached_emissions)
            .map(|(r, e)| {
                let k = RiderKernels::with_comp_emissions(r, &theta, e)?;
                forward_from_kernels(&k, &r.rider_id).map(|f| f.loglik())
            })
            .collect::<Result<_>>()?;
        Ok(parts.iter().sum())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StdErrorReport {
    /// NaN for parameters held at a bound.
    pub std_errors: Vec<f64>,
    /// Variances estimated exactly at zero.
    pub at_bound: Vec<bool>,
    pub positive_definite: bool,
    pub condition_number: f64,
}

/// Standard errors from the finite-difference Hessian of the conditional
/// log-likelihood (steps `1e-4 * max(1, |theta|)`, one Richardson step).
///
/// Variances at zero are treated as fixed at the bound: the Hessian block
/// of the remaining parameters is inverted and their own entries are NaN.
pub fn std_errors(data: &[ProcessedRider], theta_hat: &Theta, draws: &DrawSet) -> Result<StdErrorReport> {
    let mut evaluator = LoglikEvaluator::new(data, draws, theta_hat.dims());
    std_errors_with(&mut evaluator, &theta_hat.to_vec())
}

/// Lower bound zero on the variance entries, none elsewhere.
fn variance_bounds(layout: &ParamLayout) -> Vec<Option<f64>> {
    (0..layout.len)
        .map(|i| layout.psi.contains(&i).then_some(0.0))
        .collect()
}

fn std_errors_with(evaluator: &mut LoglikEvaluator<'_>, x: &[f64]) -> Result<StdErrorReport> {
    let lower = variance_bounds(&evaluator.layout);
    let at_bound: Vec<bool> = x
        .iter()
        .zip(&lower)
        .map(|(v, lb)| lb.is_some_and(|b| *v <= b))
        .collect();
    let free: Vec<usize> = (0..x.len()).filter(|&i| !at_bound[i]).collect();
    let h = optim::bounded_hessian(|v| evaluator.loglik(v), x, 1e-4, true, &lower)?;
    let h = h.select_rows(&free).select_columns(&free);
    let cov = optim::covariance_from_hessian(&h)?;
    let mut std_errors = vec![f64::NAN; x.len()];
    for (se, &i) in cov.std_errors().into_iter().zip(&free) {
        std_errors[i] = se;
    }
    Ok(StdErrorReport {
        std_errors,
        at_bound,
        positive_definite: cov.positive_definite,
        condition_number: cov.condition_number,
    })
}

/// Analytical gradient of the conditional log-likelihood, as the gradient of
/// the expected complete-data log-likelihood at the posteriors of `theta`.
/// Variance entries are differentiated with respect to `psi`; they are NaN
/// where `psi = 0`.
pub fn score(data: &[ProcessedRider], theta: &Theta, draws: &DrawSet) -> Result<Vec<f64>> {
    let dims = theta.dims();
    let post = e_step(data, theta, draws)?;
    let problems = MStepProblems::build(data, &post, draws, &dims)?;
    let layout = theta.layout();
    let v = theta.to_vec();
    let mut out = vec![0.0; layout.len];
    let x = choice_point(theta);
    let mut g = vec![0.0; x.len()];
    problems.choice.value_grad(&x, &mut g);
    let (nf, k) = (dims.fixed, dims.random);
    out[layout.gamma.clone()].copy_from_slice(&g[..nf]);
    out[layout.varrho.clone()].copy_from_slice(&g[nf..nf + k]);
    for j in 0..k {
        // d/dpsi = d/dsd / (2 sd)
        out[layout.psi.start + j] = g[nf + k + j] / (2.0 * x[nf + k + j]);
    }
    for (obj, range) in [
        (&problems.noncomp, layout.noncomp.clone()),
        (&problems.init, layout.init.clone()),
        (&problems.trans[0], layout.trans1.clone()),
        (&problems.trans[1], layout.trans2.clone()),
    ] {
        let mut g = vec![0.0; range.len()];
        obj.value_grad(&v[range.clone()], &mut g);
        out[range].copy_from_slice(&g);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Memory-decay grid search

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub mu: f64,
    pub loglik: Option<f64>,
    pub iterations: Option<usize>,
    pub converged: Option<bool>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSearchResult {
    pub best_mu: f64,
    pub profile: Vec<GridPoint>,
    pub best: EstimationResult,
}

/// Evaluates the fitted log-likelihood at each memory decay in `grid`.
///
/// `build` rebuilds the processed riders for a given decay. When
/// `warm_start` is set, each grid point also starts from the previous
/// point's estimate. Ties go to the smaller decay. Standard errors are
/// computed only for the selected point.
pub fn grid_search_mu<B>(
    mut build: B,
    grid: &[f64],
    config: &EmConfig,
    param_names: &[String],
    memory: usize,
    warm_start: bool,
) -> Result<GridSearchResult>
where
    B: FnMut(f64) -> Result<Vec<ProcessedRider>>,
{
    if grid.is_empty() {
        return Err(Error::Config("memory-decay grid is empty".into()));
    }
    let point_config = EmConfig {
        compute_std_errors: false,
        ..config.clone()
    };
    let mut profile = Vec::with_capacity(grid.len());
    let mut best: Option<(f64, f64, Theta)> = None;
    let mut previous: Option<Theta> = None;
    for &mu in grid {
        let fit = build(mu).and_then(|data| {
            let warm = if warm_start { previous.as_ref() } else { None };
            em_estimate_from(&data, &point_config, param_names.to_vec(), mu, memory, warm)
        });
        match fit {
            Ok(r) => {
                profile.push(GridPoint {
                    mu,
                    loglik: Some(r.loglik),
                    iterations: Some(r.iterations),
                    converged: Some(r.converged),
                    error: None,
                });
                let better = match &best {
                    None => true,
                    Some((bmu, bll, _)) => r.loglik > *bll || (r.loglik == *bll && mu < *bmu),
                };
                if better {
                    best = Some((mu, r.loglik, r.theta_hat.clone()));
                }
                previous = Some(r.theta_hat);
            }
            Err(e) => profile.push(GridPoint {
                mu,
                loglik: None,
                iterations: None,
                converged: None,
                error: Some(e.to_string()),
            }),
        }
    }
    let (best_mu, _, best_theta) =
        best.ok_or_else(|| Error::Numeric("every memory-decay grid point failed".into()))?;
    let data = build(best_mu)?;
    let final_config = EmConfig {
        n_starts: 1,
        ..config.clone()
    };
    let best_fit = em_estimate_from(
        &data,
        &final_config,
        param_names.to_vec(),
        best_mu,
        memory,
        Some(&best_theta),
    )?;
    Ok(GridSearchResult {
        best_mu,
        profile,
        best: best_fit,
    })
}

/// Class posterior used as a diagnostic alongside Viterbi paths: the
/// per-occasion argmax of `pi`, ties to class 1.
pub fn posterior_argmax(post: &RiderPosterior) -> Vec<Class> {
    post.pi
        .iter()
        .map(|p| {
            if p[1] > p[0] {
                Class::NonCompensatory
            } else {
                Class::Compensatory
            }
        })
        .collect()
}
