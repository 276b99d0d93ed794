//! Probability kernels of the dynamic latent class model.
//!
//! Class 1 is the compensatory class: route utilities are linear in the
//! expected attributes with normally distributed coefficients on the random
//! block. Class 2 is the non-compensatory class, whose choice depends on the
//! lagged choice. Initial class and class transition probabilities are
//! binary logits in the attribute mismatch and history covariates.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::iblt::{CovariateSpec, DesignDims, ProcessedRider};
use crate::panel::Route;

/// Lower clamp for emission and transition probabilities.
pub const PROB_FLOOR: f64 = 1e-300;

/// Latent decision-rule class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Class {
    Compensatory,
    NonCompensatory,
}

impl Class {
    pub const BOTH: [Class; 2] = [Class::Compensatory, Class::NonCompensatory];

    pub fn index(self) -> usize {
        match self {
            Class::Compensatory => 0,
            Class::NonCompensatory => 1,
        }
    }

    pub fn label(self) -> u8 {
        self.index() as u8 + 1
    }

    pub fn from_index(i: usize) -> Class {
        if i == 0 {
            Class::Compensatory
        } else {
            Class::NonCompensatory
        }
    }

    pub fn from_label(label: u8) -> Option<Class> {
        match label {
            1 => Some(Class::Compensatory),
            2 => Some(Class::NonCompensatory),
            _ => None,
        }
    }
}

impl TryFrom<u8> for Class {
    type Error = String;

    fn try_from(v: u8) -> std::result::Result<Self, Self::Error> {
        Class::from_label(v).ok_or_else(|| format!("class label {v} is not 1 or 2"))
    }
}

impl From<Class> for u8 {
    fn from(c: Class) -> u8 {
        c.label()
    }
}

#[inline]
pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Full parameter set for one value of the memory decay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Theta {
    pub zeta0: Vec<f64>,
    pub zeta0_c: Vec<f64>,
    pub zeta1: Vec<f64>,
    pub zeta1_c: Vec<f64>,
    pub zeta2: Vec<f64>,
    pub zeta2_c: Vec<f64>,
    pub gamma: Vec<f64>,
    pub varrho: Vec<f64>,
    /// Variances of the random coefficients.
    pub psi_diag: Vec<f64>,
    pub lambda1: f64,
    pub lambda2: f64,
    /// Coefficients of the non-compensatory history terms.
    pub noncomp: Vec<f64>,
}

/// Index ranges of each block within the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamLayout {
    pub init: std::ops::Range<usize>,
    pub trans1: std::ops::Range<usize>,
    pub trans2: std::ops::Range<usize>,
    pub gamma: std::ops::Range<usize>,
    pub varrho: std::ops::Range<usize>,
    pub psi: std::ops::Range<usize>,
    /// lambda1, lambda2 and the non-compensatory history coefficients.
    pub noncomp: std::ops::Range<usize>,
    pub len: usize,
}

impl ParamLayout {
    pub fn new(d: &DesignDims) -> Self {
        let mut at = 0;
        let mut take = |n: usize| {
            let r = at..at + n;
            at += n;
            r
        };
        let init = take(d.init_history + d.init_mismatch);
        let trans1 = take(d.transition_history + d.transition_mismatch);
        let trans2 = take(d.transition_history + d.transition_mismatch);
        let gamma = take(d.fixed);
        let varrho = take(d.random);
        let psi = take(d.random);
        let noncomp = take(2 + d.noncomp_history);
        ParamLayout {
            init,
            trans1,
            trans2,
            gamma,
            varrho,
            psi,
            noncomp,
            len: at,
        }
    }

    /// The choice-model block `(gamma, varrho, psi)`.
    pub fn choice(&self) -> std::ops::Range<usize> {
        self.gamma.start..self.psi.end
    }
}

impl Theta {
    pub fn zeros(d: &DesignDims) -> Self {
        Theta {
            zeta0: vec![0.0; d.init_mismatch],
            zeta0_c: vec![0.0; d.init_history],
            zeta1: vec![0.0; d.transition_mismatch],
            zeta1_c: vec![0.0; d.transition_history],
            zeta2: vec![0.0; d.transition_mismatch],
            zeta2_c: vec![0.0; d.transition_history],
            gamma: vec![0.0; d.fixed],
            varrho: vec![0.0; d.random],
            psi_diag: vec![0.0; d.random],
            lambda1: 0.0,
            lambda2: 0.0,
            noncomp: vec![0.0; d.noncomp_history],
        }
    }

    /// Parameter values of the Monte Carlo design, for the default
    /// [`CovariateSpec`].
    pub fn monte_carlo_truth() -> Self {
        Theta {
            zeta0_c: vec![-1.0],
            zeta0: vec![1.1, 0.9],
            zeta1_c: vec![-1.0],
            zeta1: vec![1.4, 1.5],
            zeta2_c: vec![-1.5],
            zeta2: vec![1.2, 1.1],
            gamma: vec![-1.0, -1.5],
            varrho: vec![1.5, -1.5],
            psi_diag: vec![1.0, 1.0],
            lambda1: 1.0,
            lambda2: 2.0,
            noncomp: vec![],
        }
    }

    pub fn dims(&self) -> DesignDims {
        DesignDims {
            init_mismatch: self.zeta0.len(),
            init_history: self.zeta0_c.len(),
            transition_mismatch: self.zeta1.len(),
            transition_history: self.zeta1_c.len(),
            fixed: self.gamma.len(),
            random: self.varrho.len(),
            noncomp_history: self.noncomp.len(),
        }
    }

    pub fn layout(&self) -> ParamLayout {
        ParamLayout::new(&self.dims())
    }

    /// Checks block dimensions against `d` and the sign of the variances.
    pub fn validate(&self, d: &DesignDims) -> Result<()> {
        let checks = [
            ("zeta0", self.zeta0.len(), d.init_mismatch),
            ("zeta0_c", self.zeta0_c.len(), d.init_history),
            ("zeta1", self.zeta1.len(), d.transition_mismatch),
            ("zeta1_c", self.zeta1_c.len(), d.transition_history),
            ("zeta2", self.zeta2.len(), d.transition_mismatch),
            ("zeta2_c", self.zeta2_c.len(), d.transition_history),
            ("gamma", self.gamma.len(), d.fixed),
            ("varrho", self.varrho.len(), d.random),
            ("psi_diag", self.psi_diag.len(), d.random),
            ("noncomp", self.noncomp.len(), d.noncomp_history),
        ];
        for (name, got, want) in checks {
            if got != want {
                return Err(Error::Shape(format!(
                    "{name} has {got} entries, covariates need {want}"
                )));
            }
        }
        if self.psi_diag.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::Domain("psi_diag must be non-negative".into()));
        }
        Ok(())
    }

    /// Flat vector: init (history, mismatch), class-1 and class-2
    /// transitions (history, mismatch), gamma, varrho, psi, lambda1,
    /// lambda2, non-compensatory history.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::new();
        v.extend(&self.zeta0_c);
        v.extend(&self.zeta0);
        v.extend(&self.zeta1_c);
        v.extend(&self.zeta1);
        v.extend(&self.zeta2_c);
        v.extend(&self.zeta2);
        v.extend(&self.gamma);
        v.extend(&self.varrho);
        v.extend(&self.psi_diag);
        v.push(self.lambda1);
        v.push(self.lambda2);
        v.extend(&self.noncomp);
        v
    }

    pub fn from_vec(d: &DesignDims, v: &[f64]) -> Result<Self> {
        let layout = ParamLayout::new(d);
        if v.len() != layout.len {
            return Err(Error::Shape(format!(
                "parameter vector has {} entries, expected {}",
                v.len(),
                layout.len
            )));
        }
        let split = |r: std::ops::Range<usize>, n_hist: usize| {
            (v[r.start..r.start + n_hist].to_vec(), v[r.start + n_hist..r.end].to_vec())
        };
        let (zeta0_c, zeta0) = split(layout.init.clone(), d.init_history);
        let (zeta1_c, zeta1) = split(layout.trans1.clone(), d.transition_history);
        let (zeta2_c, zeta2) = split(layout.trans2.clone(), d.transition_history);
        let nc = &v[layout.noncomp.clone()];
        Ok(Theta {
            zeta0,
            zeta0_c,
            zeta1,
            zeta1_c,
            zeta2,
            zeta2_c,
            gamma: v[layout.gamma].to_vec(),
            varrho: v[layout.varrho].to_vec(),
            psi_diag: v[layout.psi].to_vec(),
            lambda1: nc[0],
            lambda2: nc[1],
            noncomp: nc[2..].to_vec(),
        })
    }

    pub fn transition_coefs(&self, from: Class) -> (&[f64], &[f64]) {
        match from {
            Class::Compensatory => (&self.zeta1, &self.zeta1_c),
            Class::NonCompensatory => (&self.zeta2, &self.zeta2_c),
        }
    }
}

/// Names aligned with [`Theta::to_vec`].
pub fn param_names(spec: &CovariateSpec) -> Vec<String> {
    let mut names = Vec::new();
    let block = |prefix: &str, hist: &[String], mis: &[String], out: &mut Vec<String>| {
        out.extend(hist.iter().map(|h| format!("{prefix}.{h}")));
        out.extend(mis.iter().map(|m| format!("{prefix}.mismatch.{m}")));
    };
    block("init", &spec.init_history, &spec.init_mismatch, &mut names);
    block("trans1", &spec.transition_history, &spec.transition_mismatch, &mut names);
    block("trans2", &spec.transition_history, &spec.transition_mismatch, &mut names);
    names.extend(spec.fixed.iter().map(|f| format!("choice.{f}")));
    names.extend(spec.random.iter().map(|g| format!("choice.mean.{g}")));
    names.extend(spec.random.iter().map(|g| format!("choice.var.{g}")));
    names.push("noncomp.lambda1".into());
    names.push("noncomp.lambda2".into());
    names.extend(spec.noncomp_history.iter().map(|h| format!("noncomp.{h}")));
    names
}

// ---------------------------------------------------------------------------
// Simulation draws

/// Standard-normal draws for the random coefficients, one `R x K` block per
/// rider, fixed for a whole estimation run.
#[derive(Debug, Clone, PartialEq)]
pub struct DrawSet {
    seed: u64,
    n_draws: usize,
    dim: usize,
    n_riders: usize,
    values: Vec<f64>,
}

/// Draws of one rider, row-major `n_draws x dim`.
#[derive(Debug, Clone, Copy)]
pub struct RiderDraws<'a> {
    pub values: &'a [f64],
    pub n_draws: usize,
    pub dim: usize,
}

impl<'a> RiderDraws<'a> {
    pub fn row(&self, r: usize) -> &'a [f64] {
        &self.values[r * self.dim..(r + 1) * self.dim]
    }
}

const HALTON_SKIP: usize = 10;

fn primes(n: usize) -> Vec<u64> {
    let mut out = Vec::with_capacity(n);
    let mut c = 2u64;
    while out.len() < n {
        if out.iter().all(|p| c % p != 0) {
            out.push(c);
        }
        c += 1;
    }
    out
}

fn radical_inverse(mut n: u64, base: u64) -> f64 {
    let inv = 1.0 / base as f64;
    let mut f = inv;
    let mut x = 0.0;
    while n > 0 {
        x += (n % base) as f64 * f;
        n /= base;
        f *= inv;
    }
    x
}

impl DrawSet {
    /// Randomly shifted Halton draws mapped through the normal quantile.
    /// Riders take consecutive segments of the sequence; the shift per
    /// dimension comes from `seed`.
    pub fn halton(n_riders: usize, n_draws: usize, dim: usize, seed: u64) -> Self {
        Self::halton_with(n_riders, n_draws, dim, seed, false)
    }

    /// As [`DrawSet::halton`]; with `antithetic`, each Halton point is
    /// followed by its copies under every sign pattern of the coordinates,
    /// so with `n_draws` a multiple of `2^dim` simulated probabilities are
    /// even in each standard deviation separately.
    pub fn halton_with(n_riders: usize, n_draws: usize, dim: usize, seed: u64, antithetic: bool) -> Self {
        let bases = primes(dim);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shifts: Vec<f64> = (0..dim).map(|_| rng.gen::<f64>()).collect();
        let normal = Normal::new(0.0, 1.0).expect("standard normal");
        let flips = if antithetic && dim < usize::BITS as usize { 1usize << dim } else { 1 };
        let points = n_draws.div_ceil(flips);
        let mut values = Vec::with_capacity(n_riders * n_draws * dim);
        let mut row = vec![0.0; dim];
        for i in 0..n_riders {
            let mut emitted = 0;
            for r in 0..points {
                let idx = (HALTON_SKIP + i * points + r + 1) as u64;
                for k in 0..dim {
                    let u = (radical_inverse(idx, bases[k]) + shifts[k]).fract();
                    row[k] = normal.inverse_cdf(u.clamp(1e-12, 1.0 - 1e-12));
                }
                for pattern in 0..flips {
                    if emitted == n_draws {
                        break;
                    }
                    values.extend(
                        row.iter()
                            .enumerate()
                            .map(|(k, v)| if pattern >> k & 1 == 1 { -v } else { *v }),
                    );
                    emitted += 1;
                }
            }
        }
        DrawSet {
            seed,
            n_draws,
            dim,
            n_riders,
            values,
        }
    }

    pub fn from_values(n_riders: usize, n_draws: usize, dim: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != n_riders * n_draws * dim {
            return Err(Error::Shape(format!(
                "{} draw values for {n_riders} riders x {n_draws} draws x {dim} dims",
                values.len()
            )));
        }
        Ok(DrawSet {
            seed: 0,
            n_draws,
            dim,
            n_riders,
            values,
        })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn n_draws(&self) -> usize {
        self.n_draws
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_riders(&self) -> usize {
        self.n_riders
    }

    pub fn rider(&self, i: usize) -> RiderDraws<'_> {
        let block = self.n_draws * self.dim;
        RiderDraws {
            values: &self.values[i * block..(i + 1) * block],
            n_draws: self.n_draws,
            dim: self.dim,
        }
    }

    pub fn check(&self, n_riders: usize, dim: usize) -> Result<()> {
        if self.n_draws == 0 {
            return Err(Error::Config("number of draws must be positive".into()));
        }
        if self.n_riders < n_riders || self.dim != dim {
            return Err(Error::Shape(format!(
                "draw set covers {} riders x {} dims, data needs {n_riders} x {dim}",
                self.n_riders, self.dim
            )));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Kernels

fn occasion(rider: &ProcessedRider, t: usize) -> Result<&crate::iblt::ModelOccasion> {
    if t == 0 || t > rider.occasions.len() {
        return Err(Error::Domain(format!(
            "occasion {t} outside 1..={} for rider {}",
            rider.occasions.len(),
            rider.rider_id
        )));
    }
    Ok(&rider.occasions[t - 1])
}

fn shape_check(what: &str, coefs: &[f64], covs: &[f64]) -> Result<()> {
    if coefs.len() != covs.len() {
        return Err(Error::Shape(format!(
            "{what}: {} coefficients for {} covariates",
            coefs.len(),
            covs.len()
        )));
    }
    Ok(())
}

/// Initial class probabilities (class 1, class 2) after the initialisation phase.
pub fn init_class_prob(rider: &ProcessedRider, zeta0: &[f64], zeta0_c: &[f64]) -> Result<[f64; 2]> {
    shape_check("initialisation mismatch", zeta0, &rider.init_mismatch)?;
    shape_check("initialisation history", zeta0_c, &rider.init_history)?;
    let k = dot(zeta0, &rider.init_mismatch) + dot(zeta0_c, &rider.init_history);
    let p = logistic(k);
    Ok([p, 1.0 - p])
}

/// Probabilities of the class at `t + 1` given class `from` at `t`.
pub fn transition_prob(
    rider: &ProcessedRider,
    t: usize,
    from: Class,
    theta: &Theta,
) -> Result<[f64; 2]> {
    if t == 0 || t >= rider.occasions.len() {
        return Err(Error::Domain(format!(
            "transition at occasion {t} outside 1..{}",
            rider.occasions.len()
        )));
    }
    let o = &rider.occasions[t - 1];
    let (zeta, zeta_c) = theta.transition_coefs(from);
    shape_check("transition mismatch", zeta, &o.mismatch)?;
    shape_check("transition history", zeta_c, &o.history)?;
    let p = logistic(dot(zeta, &o.mismatch) + dot(zeta_c, &o.history));
    Ok([p, 1.0 - p])
}

/// Compensatory route probabilities for a realised random coefficient.
pub fn comp_choice_prob(
    rider: &ProcessedRider,
    t: usize,
    gamma: &[f64],
    chi: &[f64],
) -> Result<[f64; 2]> {
    let o = occasion(rider, t)?;
    shape_check("fixed attributes", gamma, &o.fixed[0])?;
    shape_check("random attributes", chi, &o.random[0])?;
    let v1 = dot(gamma, &o.fixed[0]) + dot(chi, &o.random[0]);
    let v2 = dot(gamma, &o.fixed[1]) + dot(chi, &o.random[1]);
    if !(v1.is_finite() && v2.is_finite()) {
        return Err(Error::Numeric(format!(
            "non-finite utility at rider {} occasion {t}",
            rider.rider_id
        )));
    }
    let p = logistic(v1 - v2);
    Ok([p, 1.0 - p])
}

/// Compensatory route probabilities averaged over the rider's draws.
pub fn comp_choice_prob_marginal(
    rider: &ProcessedRider,
    t: usize,
    gamma: &[f64],
    varrho: &[f64],
    psi_diag: &[f64],
    draws: RiderDraws<'_>,
) -> Result<[f64; 2]> {
    if draws.n_draws == 0 {
        return Err(Error::Config("number of draws must be positive".into()));
    }
    shape_check("random coefficient variances", psi_diag, varrho)?;
    if draws.dim != varrho.len() {
        return Err(Error::Shape(format!(
            "draws have {} dims, {} random coefficients",
            draws.dim,
            varrho.len()
        )));
    }
    let sd: Vec<f64> = psi_diag.iter().map(|v| v.max(0.0).sqrt()).collect();
    let mut chi = vec![0.0; varrho.len()];
    let mut p1 = 0.0;
    for r in 0..draws.n_draws {
        for ((c, (m, s)), d) in chi.iter_mut().zip(varrho.iter().zip(&sd)).zip(draws.row(r)) {
            *c = m + s * d;
        }
        p1 += comp_choice_prob(rider, t, gamma, &chi)?[0];
    }
    p1 /= draws.n_draws as f64;
    Ok([p1, 1.0 - p1])
}

/// Non-compensatory route probabilities given the lagged choice.
pub fn noncomp_choice_prob(
    lagged: Route,
    lambda1: f64,
    lambda2: f64,
    history: &[f64],
    coefs: &[f64],
) -> [f64; 2] {
    let base = match lagged {
        Route::One => lambda1,
        Route::Two => -lambda2,
    };
    let z = base + dot(history, coefs);
    [logistic(z), logistic(-z)]
}

/// Probability of the observed choice at `t` given the class.
pub fn emission_prob(
    rider: &ProcessedRider,
    t: usize,
    class: Class,
    theta: &Theta,
    draws: RiderDraws<'_>,
) -> Result<f64> {
    let o = occasion(rider, t)?;
    let probs = match class {
        Class::Compensatory => comp_choice_prob_marginal(
            rider,
            t,
            &theta.gamma,
            &theta.varrho,
            &theta.psi_diag,
            draws,
        )?,
        Class::NonCompensatory => {
            shape_check("non-compensatory history", &theta.noncomp, &o.noncomp_history)?;
            noncomp_choice_prob(
                o.lagged,
                theta.lambda1,
                theta.lambda2,
                &o.noncomp_history,
                &theta.noncomp,
            )
        }
    };
    Ok(probs[o.choice.index()])
}

/// `+1` when route 1 was chosen, `-1` otherwise; orients `V1 - V2` towards
/// the observed choice.
#[inline]
pub(crate) fn choice_sign(o: &crate::iblt::ModelOccasion) -> f64 {
    if o.choice == Route::One {
        1.0
    } else {
        -1.0
    }
}

/// Simulated probability of the observed choice under the compensatory
/// class, for every occasion of `rider`.
pub fn comp_emissions(
    rider: &ProcessedRider,
    gamma: &[f64],
    varrho: &[f64],
    psi_diag: &[f64],
    draws: RiderDraws<'_>,
) -> Result<Vec<f64>> {
    if draws.n_draws == 0 {
        return Err(Error::Config("number of draws must be positive".into()));
    }
    let k = varrho.len();
    if draws.dim != k || psi_diag.len() != k {
        return Err(Error::Shape(format!(
            "draws have {} dims, {} random coefficients, {} variances",
            draws.dim,
            k,
            psi_diag.len()
        )));
    }
    let sd: Vec<f64> = psi_diag.iter().map(|v| v.max(0.0).sqrt()).collect();
    let mut scale = vec![0.0; k];
    let inv_r = 1.0 / draws.n_draws as f64;
    let mut out = Vec::with_capacity(rider.occasions.len());
    for (t, o) in rider.occasions.iter().enumerate() {
        shape_check("fixed attributes", gamma, &o.fixed[0])?;
        shape_check("random attributes", varrho, &o.random[0])?;
        let s = choice_sign(o);
        let mut base = 0.0;
        for (g, (a, b)) in gamma.iter().zip(o.fixed[0].iter().zip(&o.fixed[1])) {
            base += g * (a - b);
        }
        for j in 0..k {
            let dg = o.random[0][j] - o.random[1][j];
            base += varrho[j] * dg;
            scale[j] = s * sd[j] * dg;
        }
        base *= s;
        if !base.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite utility at rider {} occasion {}",
                rider.rider_id,
                t + 1
            )));
        }
        let mut acc = 0.0;
        for r in 0..draws.n_draws {
            let d = draws.row(r);
            let mut u = base;
            for j in 0..k {
                u += scale[j] * d[j];
            }
            acc += logistic(u);
        }
        out.push(acc * inv_r);
    }
    Ok(out)
}

/// All kernel values a rider's forward/backward recursions need.
#[derive(Debug, Clone, PartialEq)]
pub struct RiderKernels {
    pub init: [f64; 2],
    /// Probability of the observed choice per occasion and class.
    pub emission: Vec<[f64; 2]>,
    /// `transition[t][from][to]`: class at `t + 2` given class at `t + 1`
    /// (zero-based `t`).
    pub transition: Vec<[[f64; 2]; 2]>,
}

impl RiderKernels {
    pub fn compute(rider: &ProcessedRider, theta: &Theta, draws: RiderDraws<'_>) -> Result<Self> {
        let e1 = comp_emissions(rider, &theta.gamma, &theta.varrho, &theta.psi_diag, draws)?;
        Self::with_comp_emissions(rider, theta, &e1)
    }

    /// Uses precomputed compensatory emissions (see [`comp_emissions`]).
    pub fn with_comp_emissions(rider: &ProcessedRider, theta: &Theta, comp: &[f64]) -> Result<Self> {
        let n = rider.occasions.len();
        if comp.len() != n {
            return Err(Error::Shape(format!(
                "{} compensatory emissions for {n} occasions",
                comp.len()
            )));
        }
        let init = init_class_prob(rider, &theta.zeta0, &theta.zeta0_c)?;
        let mut emission = Vec::with_capacity(n);
        for (o, &c) in rider.occasions.iter().zip(comp) {
            shape_check("non-compensatory history", &theta.noncomp, &o.noncomp_history)?;
            let nc = noncomp_choice_prob(
                o.lagged,
                theta.lambda1,
                theta.lambda2,
                &o.noncomp_history,
                &theta.noncomp,
            )[o.choice.index()];
            emission.push([c.max(PROB_FLOOR), nc.max(PROB_FLOOR)]);
        }
        let mut transition = Vec::with_capacity(n.saturating_sub(1));
        for t in 1..n {
            let mut row = [[0.0; 2]; 2];
            for from in Class::BOTH {
                let p = transition_prob(rider, t, from, theta)?;
                row[from.index()] = [p[0].max(PROB_FLOOR), p[1].max(PROB_FLOOR)];
            }
            transition.push(row);
        }
        Ok(RiderKernels {
            init,
            emission,
            transition,
        })
    }
}

/// Conditional log-likelihood of the sample, summed over riders.
pub fn conditional_loglik(data: &[ProcessedRider], theta: &Theta, draws: &DrawSet) -> Result<f64> {
    Ok(crate::em::rider_logliks(data, theta, draws)?.iter().sum())
}

// ---------------------------------------------------------------------------
// Crowding multipliers

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandMultiplier {
    pub band: String,
    pub coefficient: f64,
    pub multiplier: f64,
}

/// Value-of-time multiplier of each crowding band relative to the base
/// travel-time coefficient: `(base + interaction) / base`.
pub fn crowding_multipliers(
    travel_time_coef: f64,
    interactions: &[(String, f64)],
) -> Result<Vec<BandMultiplier>> {
    if travel_time_coef == 0.0 || !travel_time_coef.is_finite() {
        return Err(Error::Domain(
            "crowding multiplier undefined for a zero travel-time coefficient".into(),
        ));
    }
    Ok(interactions
        .iter()
        .map(|(band, c)| BandMultiplier {
            band: band.clone(),
            coefficient: *c,
            multiplier: (travel_time_coef + c) / travel_time_coef,
        })
        .collect())
}

/// Least-squares line through `(band midpoint, multiplier)` points,
/// evaluated at `target`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearExtrapolation {
    pub slope: f64,
    pub intercept: f64,
    pub target: f64,
    pub value: f64,
}

pub fn extrapolate_multiplier(points: &[(f64, f64)], target: f64) -> Result<LinearExtrapolation> {
    if points.len() < 2 {
        return Err(Error::Domain("extrapolation needs at least two points".into()));
    }
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::Domain("extrapolation points share one midpoint".into()));
    }
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    Ok(LinearExtrapolation {
        slope,
        intercept,
        target,
        value: intercept + slope * target,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::iblt::ModelOccasion;

    pub(crate) fn toy_rider(choices: &[u8]) -> ProcessedRider {
        let occ = choices
            .iter()
            .enumerate()
            .map(|(k, &c)| ModelOccasion {
                choice: Route::from_label(c).unwrap(),
                lagged: if k == 0 {
                    Route::One
                } else {
                    Route::from_label(choices[k - 1]).unwrap()
                },
                fixed: [vec![0.2], vec![0.4]],
                random: [vec![], vec![]],
                mismatch: vec![0.5, 0.5],
                history: vec![1.0],
                noncomp_history: vec![],
            })
            .collect();
        ProcessedRider {
            rider_id: "toy".into(),
            init_occasions: 3,
            model_occasions: choices.len(),
            lagged_choice: Route::One,
            init_mismatch: vec![0.0],
            init_history: vec![1.0],
            occasions: occ,
        }
    }

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn init_examples() {
        let r = toy_rider(&[1]);
        assert_eq!(init_class_prob(&r, &[0.0], &[0.0]).unwrap(), [0.5, 0.5]);
        let p = init_class_prob(&r, &[0.0], &[1.0]).unwrap();
        assert!(close(p[0], 0.7310585786300049, 1e-15));
        assert!(init_class_prob(&r, &[0.0, 1.0], &[1.0]).is_err());
    }

    #[test]
    fn transition_examples() {
        let r = toy_rider(&[1, 2]);
        let mut th = Theta::zeros(&DesignDims {
            init_mismatch: 1,
            init_history: 1,
            transition_mismatch: 2,
            transition_history: 1,
            fixed: 1,
            random: 0,
            noncomp_history: 0,
        });
        assert_eq!(transition_prob(&r, 1, Class::Compensatory, &th).unwrap(), [0.5, 0.5]);
        th.zeta2_c = vec![-1.5];
        th.zeta2 = vec![1.2, 1.1];
        let p = transition_prob(&r, 1, Class::NonCompensatory, &th).unwrap();
        // m = -1.5 + 0.6 + 0.55 = -0.35
        assert!(close(p[0], logistic(-0.35), 1e-15));
        assert!(close(p[0], 0.4134, 5e-5));
        assert!(transition_prob(&r, 2, Class::Compensatory, &th).is_err());
    }

    #[test]
    fn comp_examples() {
        let r = toy_rider(&[1]);
        let p = comp_choice_prob(&r, 1, &[-1.0], &[]).unwrap();
        assert!(close(p[0], logistic(0.2), 1e-15));
        assert!(close(p[0], 0.5498, 5e-5));
        let p0 = comp_choice_prob(&r, 1, &[0.0], &[]).unwrap();
        assert_eq!(p0, [0.5, 0.5]);
    }

    #[test]
    fn noncomp_examples() {
        let p = noncomp_choice_prob(Route::One, 1.0, 2.0, &[], &[]);
        assert!(close(p[0], 0.7311, 5e-5));
        let p = noncomp_choice_prob(Route::Two, 1.0, 2.0, &[], &[]);
        assert!(close(p[0], 0.1192, 5e-5));
        assert_eq!(noncomp_choice_prob(Route::Two, 0.0, 0.0, &[], &[]), [0.5, 0.5]);
        let p = noncomp_choice_prob(Route::One, 50.0, 2.0, &[], &[]);
        assert!(p[0] >= 1.0 - 1e-15 && p[1] > 0.0 && p[1] < 1e-20);
    }

    #[test]
    fn marginal_reduces_to_point_mass() {
        let mut r = toy_rider(&[2, 1]);
        for o in &mut r.occasions {
            o.random = [vec![1.3, 0.1], vec![0.7, 0.9]];
        }
        let draws = DrawSet::halton(1, 7, 2, 3);
        let m = comp_choice_prob_marginal(&r, 2, &[-1.0], &[0.5, -0.2], &[0.0, 0.0], draws.rider(0))
            .unwrap();
        let c = comp_choice_prob(&r, 2, &[-1.0], &[0.5, -0.2]).unwrap();
        assert!(close(m[0], c[0], 1e-15));

        // two draws, averaged by hand
        let two = DrawSet::from_values(1, 2, 2, vec![0.3, -1.1, -0.4, 0.8]).unwrap();
        let psi = [0.64, 2.25];
        let m = comp_choice_prob_marginal(&r, 1, &[-1.0], &[0.5, -0.2], &psi, two.rider(0)).unwrap();
        let a = comp_choice_prob(&r, 1, &[-1.0], &[0.5 + 0.8 * 0.3, -0.2 - 1.5 * 1.1]).unwrap();
        let b = comp_choice_prob(&r, 1, &[-1.0], &[0.5 - 0.8 * 0.4, -0.2 + 1.5 * 0.8]).unwrap();
        assert!(close(m[0], 0.5 * (a[0] + b[0]), 1e-12));

        // fast path agrees with the kernel
        let e = comp_emissions(&r, &[-1.0], &[0.5, -0.2], &psi, two.rider(0)).unwrap();
        assert!(close(e[0], m[1], 1e-15));

        let none = DrawSet::from_values(1, 0, 2, vec![]).unwrap();
        assert!(matches!(
            comp_choice_prob_marginal(&r, 1, &[-1.0], &[0.5, -0.2], &psi, none.rider(0)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn theta_vector_round_trip() {
        let th = Theta::monte_carlo_truth();
        let v = th.to_vec();
        assert_eq!(v.len(), 17);
        assert_eq!(v[0], -1.0);
        assert_eq!(Theta::from_vec(&th.dims(), &v).unwrap(), th);
        assert_eq!(param_names(&CovariateSpec::default()).len(), 17);
        assert!(th.validate(&CovariateSpec::default().dims()).is_ok());
    }

    #[test]
    fn halton_draws_deterministic() {
        let a = DrawSet::halton(3, 50, 2, 11);
        let b = DrawSet::halton(3, 50, 2, 11);
        let c = DrawSet::halton(3, 50, 2, 12);
        assert_eq!(a, b);
        assert_ne!(a, c);
        let mean: f64 = a.values.iter().sum::<f64>() / a.values.len() as f64;
        assert!(mean.abs() < 0.1);
    }

    #[test]
    fn antithetic_draws_symmetric_per_coordinate() {
        let d = DrawSet::halton_with(2, 40, 2, 3, true);
        for i in 0..2 {
            let rd = d.rider(i);
            let (mut m0, mut m1, mut c01, mut c0_11) = (0.0, 0.0, 0.0, 0.0);
            for r in 0..rd.n_draws {
                let x = rd.row(r);
                m0 += x[0];
                m1 += x[1];
                c01 += x[0] * x[1];
                c0_11 += x[0] * x[1] * x[1];
            }
            for v in [m0, m1, c01, c0_11] {
                assert!(v.abs() < 1e-12, "{v}");
            }
        }
    }

    #[test]
    fn multiplier_examples() {
        let m = crowding_multipliers(
            -5.0,
            &[
                ("c1_sp1".into(), -0.29),
                ("c1_sp2".into(), -0.44),
                ("c2_sp1".into(), -0.79),
                ("c2_sp2".into(), -0.97),
                ("none".into(), 0.0),
            ],
        )
        .unwrap();
        assert!(close(m[0].multiplier, 1.058, 1e-12));
        assert!(close(m[3].multiplier, 1.194, 1e-12));
        assert_eq!(m[4].multiplier, 1.0);
        assert!(crowding_multipliers(0.0, &[]).is_err());

        let line = extrapolate_multiplier(&[(1.5, 1.088), (2.5, 1.194)], 5.5).unwrap();
        assert!(close(line.slope, 0.106, 1e-12));
        assert!(close(line.value, 1.194 + 3.0 * 0.106, 1e-12));
    }
}
