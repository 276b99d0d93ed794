#![allow(dead_code)]

use dlcm::iblt::{ModelOccasion, ProcessedRider};
use dlcm::model::{Class, Theta};
use dlcm::panel::Route;
use rand::Rng;
use rand_distr::StandardNormal;

pub fn logistic(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normals(rng: &mut impl Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

fn route(rng: &mut impl Rng) -> Route {
    if rng.gen_bool(0.5) {
        Route::One
    } else {
        Route::Two
    }
}

/// Random riders with the Monte Carlo block sizes (plus, optionally, one
/// non-compensatory history term) and `2..=t_max` modelling occasions.
pub fn random_riders(rng: &mut impl Rng, n: usize, t_max: usize, noncomp: bool) -> Vec<ProcessedRider> {
    (0..n)
        .map(|i| {
            let t = rng.gen_range(2..=t_max);
            let mut lagged = route(rng);
            let occasions = (0..t)
                .map(|_| {
                    let choice = route(rng);
                    let o = ModelOccasion {
                        choice,
                        lagged,
                        fixed: [normals(rng, 2, 1.0), normals(rng, 2, 1.0)],
                        random: [normals(rng, 2, 1.0), normals(rng, 2, 1.0)],
                        mismatch: normals(rng, 2, 0.5),
                        history: vec![1.0],
                        noncomp_history: if noncomp { vec![rng.gen_range(-1.0..1.0)] } else { vec![] },
                    };
                    lagged = choice;
                    o
                })
                .collect();
            ProcessedRider {
                rider_id: format!("r{i}"),
                init_occasions: 4,
                model_occasions: t,
                lagged_choice: route(rng),
                init_mismatch: normals(rng, 2, 0.5),
                init_history: vec![1.0],
                occasions,
            }
        })
        .collect()
}

/// Random parameters of moderate size with all variances zero.
pub fn random_theta(rng: &mut impl Rng, noncomp: bool) -> Theta {
    let mut u = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect() };
    Theta {
        zeta0: u(2),
        zeta0_c: u(1),
        zeta1: u(2),
        zeta1_c: u(1),
        zeta2: u(2),
        zeta2_c: u(1),
        gamma: u(2),
        varrho: u(2),
        psi_diag: vec![0.0, 0.0],
        lambda1: u(1)[0] + 1.5,
        lambda2: u(1)[0] + 1.5,
        noncomp: if noncomp { u(1) } else { vec![] },
    }
}

/// Exhaustive results for one rider.
pub struct Enumerated {
    pub loglik: f64,
    pub pi: Vec<[f64; 2]>,
    pub omega: Vec<[[f64; 2]; 2]>,
    /// Lexicographically smallest sequence among those attaining the
    /// maximal joint probability (within `tie_tol` relative on the log scale).
    pub path: Vec<Class>,
}

/// Probabilities written out from the model definition with zero variances.
fn probabilities(rider: &ProcessedRider, theta: &Theta) -> ([f64; 2], Vec<[f64; 2]>, Vec<[[f64; 2]; 2]>) {
    let p1 = logistic(dot(&theta.zeta0, &rider.init_mismatch) + dot(&theta.zeta0_c, &rider.init_history));
    let init = [p1, 1.0 - p1];
    let mut emission = Vec::new();
    for o in &rider.occasions {
        let mut v = 0.0;
        for j in 0..2 {
            v += theta.gamma[j] * (o.fixed[0][j] - o.fixed[1][j]);
            v += theta.varrho[j] * (o.random[0][j] - o.random[1][j]);
        }
        let comp_route1 = logistic(v);
        let mut z = if o.lagged == Route::One { theta.lambda1 } else { -theta.lambda2 };
        z += dot(&theta.noncomp, &o.noncomp_history);
        let nc_route1 = logistic(z);
        emission.push(if o.choice == Route::One {
            [comp_route1, nc_route1]
        } else {
            [1.0 - comp_route1, 1.0 - nc_route1]
        });
    }
    let mut transition = Vec::new();
    for o in &rider.occasions[..rider.occasions.len() - 1] {
        let a = logistic(dot(&theta.zeta1, &o.mismatch) + dot(&theta.zeta1_c, &o.history));
        let b = logistic(dot(&theta.zeta2, &o.mismatch) + dot(&theta.zeta2_c, &o.history));
        transition.push([[a, 1.0 - a], [b, 1.0 - b]]);
    }
    (init, emission, transition)
}

pub fn enumerate(rider: &ProcessedRider, theta: &Theta, tie_tol: f64) -> Enumerated {
    let (init, emission, transition) = probabilities(rider, theta);
    let n = rider.occasions.len();
    let mut total = 0.0;
    let mut pi = vec![[0.0; 2]; n];
    let mut omega = vec![[[0.0; 2]; 2]; n - 1];
    let mut log_joints = Vec::with_capacity(1 << n);
    // bit (n - 1 - t) of `code` is the class at t, so codes run in
    // lexicographic order with class 1 first
    let class_at = |code: usize, t: usize| (code >> (n - 1 - t)) & 1;
    for code in 0..(1usize << n) {
        let mut p = init[class_at(code, 0)] * emission[0][class_at(code, 0)];
        for t in 1..n {
            let (r, s) = (class_at(code, t - 1), class_at(code, t));
            p *= transition[t - 1][r][s] * emission[t][s];
        }
        total += p;
        for t in 0..n {
            pi[t][class_at(code, t)] += p;
        }
        for t in 1..n {
            omega[t - 1][class_at(code, t - 1)][class_at(code, t)] += p;
        }
        log_joints.push(p.ln());
    }
    for row in &mut pi {
        row[0] /= total;
        row[1] /= total;
    }
    for w in &mut omega {
        for row in w.iter_mut() {
            row[0] /= total;
            row[1] /= total;
        }
    }
    let best = log_joints.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let code = log_joints
        .iter()
        .position(|&v| v >= best - tie_tol * best.abs().max(1.0))
        .unwrap();
    Enumerated {
        loglik: total.ln(),
        pi,
        omega,
        path: (0..n).map(|t| Class::from_index(class_at(code, t))).collect(),
    }
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

/// Largest relative error between an analytical gradient and central
/// differences of `f` at `x`.
pub fn gradient_error(f: &mut dyn FnMut(&[f64], &mut [f64]) -> f64, x: &[f64]) -> f64 {
    let mut g = vec![0.0; x.len()];
    f(x, &mut g);
    let mut scratch = vec![0.0; x.len()];
    let mut xp = x.to_vec();
    let mut worst: f64 = 0.0;
    let scale = g.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    for i in 0..x.len() {
        let h = 1e-5 * x[i].abs().max(1.0);
        xp[i] = x[i] + h;
        let fp = f(&xp, &mut scratch);
        xp[i] = x[i] - h;
        let fm = f(&xp, &mut scratch);
        xp[i] = x[i];
        let fd = (fp - fm) / (2.0 * h);
        worst = worst.max((g[i] - fd).abs() / scale);
    }
    worst
}
