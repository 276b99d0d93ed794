//! Quasi-Newton maximisation and finite-difference derivatives.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BfgsSettings {
    /// Stop when the largest absolute gradient entry falls below this.
    pub gtol: f64,
    pub max_iter: usize,
}

impl Default for BfgsSettings {
    fn default() -> Self {
        BfgsSettings {
            gtol: 1e-6,
            max_iter: 200,
        }
    }
}

#[derive(Debug, Clone)]
pub struct OptimResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub grad: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Final inverse-Hessian approximation of the negated objective, row-major.
    pub inv_hessian: Vec<f64>,
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Maximises `f` with BFGS and a backtracking Armijo line search.
///
/// `f(x, grad)` returns the objective and writes its gradient. `inv_h0`
/// warm-starts the inverse-Hessian approximation of `-f`. The returned point
/// never has a lower objective than `x0`.
pub fn maximize<F>(
    mut f: F,
    x0: &[f64],
    settings: &BfgsSettings,
    inv_h0: Option<&[f64]>,
) -> Result<OptimResult>
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    let n = x0.len();
    let mut x = DVector::from_column_slice(x0);
    let mut g = vec![0.0; n];
    let mut fx = f(x0, &mut g);
    if !fx.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return Err(Error::Optimizer("objective not finite at the start point".into()));
    }
    if n == 0 {
        return Ok(OptimResult {
            x: vec![],
            value: fx,
            grad: vec![],
            iterations: 0,
            converged: true,
            inv_hessian: vec![],
        });
    }
    // work with the negated problem: minimise -f, gradient -g
    let mut grad = -DVector::from_column_slice(&g);
    let mut h = match inv_h0 {
        Some(h0) if h0.len() == n * n && h0.iter().all(|v| v.is_finite()) => {
            DMatrix::from_row_slice(n, n, h0)
        }
        _ => DMatrix::identity(n, n),
    };
    let mut scaled = inv_h0.is_some();
    let mut trial_g = vec![0.0; n];
    let mut iterations = 0;
    let mut converged = max_abs(grad.as_slice()) <= settings.gtol;
    let mut failed_search = false;
    let mut stalls = 0;

    while !converged && iterations < settings.max_iter {
        iterations += 1;
        let mut dir = -(&h * &grad);
        let mut slope = grad.dot(&dir);
        if !(slope < 0.0) {
            // not a descent direction: reset to steepest descent
            h = DMatrix::identity(n, n);
            dir = -grad.clone();
            slope = grad.dot(&dir);
        }
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let trial = &x + &dir * step;
            let ft = f(trial.as_slice(), &mut trial_g);
            let finite = ft.is_finite() && trial_g.iter().all(|v| v.is_finite());
            let armijo = -ft <= -fx + 1e-4 * step * slope;
            // approximate Wolfe test for steps whose decrease is lost in rounding
            let approx_wolfe = finite && -ft <= -fx + 1e-12 * fx.abs().max(1.0) && {
                let slope_new: f64 = -trial_g.iter().zip(dir.iter()).map(|(a, b)| a * b).sum::<f64>();
                slope_new >= 0.9 * slope && slope_new <= -(1.0 - 2e-4) * slope
            };
            if finite && (armijo || approx_wolfe) {
                accepted = Some((trial, ft));
                break;
            }
            // quadratic interpolation, safeguarded
            let next = if ft.is_finite() {
                let denom = 2.0 * (-ft + fx - slope * step);
                if denom > 0.0 {
                    (-slope * step * step / denom).clamp(0.1 * step, 0.5 * step)
                } else {
                    0.5 * step
                }
            } else {
                0.25 * step
            };
            step = next;
        }
        let Some((x_new, f_new)) = accepted else {
            // no progress along this direction: retry once with a fresh metric
            if failed_search {
                break;
            }
            failed_search = true;
            h = DMatrix::identity(n, n);
            scaled = false;
            continue;
        };
        failed_search = false;
        let grad_new = -DVector::from_column_slice(&trial_g);
        let s = &x_new - &x;
        let y = &grad_new - &grad;
        let sy = s.dot(&y);
        let f_prev = fx;
        x = x_new;
        fx = f_new;
        grad = grad_new;
        if sy > 1e-12 * s.norm() * y.norm() {
            if !scaled {
                h = DMatrix::identity(n, n) * (sy / y.dot(&y));
                scaled = true;
            }
            let rho = 1.0 / sy;
            let hy = &h * &y;
            let yhy = y.dot(&hy);
            // H+ = H - rho (s hy' + hy s') + (rho^2 y'Hy + rho) s s'
            h -= (&s * hy.transpose() + &hy * s.transpose()) * rho;
            h += (&s * s.transpose()) * (rho * rho * yhy + rho);
        }
        converged = max_abs(grad.as_slice()) <= settings.gtol;
        if (fx - f_prev).abs() <= 1e-15 * fx.abs().max(1.0) {
            stalls += 1;
            if stalls >= 3 {
                break;
            }
        } else {
            stalls = 0;
        }
    }
    let mut inv = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            inv.push(h[(i, j)]);
        }
    }
    Ok(OptimResult {
        x: x.as_slice().to_vec(),
        value: fx,
        grad: grad.iter().map(|v| -v).collect(),
        iterations,
        converged,
        inv_hessian: inv,
    })
}

// Offsets (in steps) and weights of second-order difference stencils.
const FIRST_CENTRAL: &[(f64, f64)] = &[(-1.0, -0.5), (1.0, 0.5)];
const FIRST_FORWARD: &[(f64, f64)] = &[(0.0, -1.5), (1.0, 2.0), (2.0, -0.5)];
const SECOND_CENTRAL: &[(f64, f64)] = &[(-1.0, 1.0), (0.0, -2.0), (1.0, 1.0)];
const SECOND_FORWARD: &[(f64, f64)] = &[(0.0, 2.0), (1.0, -5.0), (2.0, 4.0), (3.0, -1.0)];

/// Whether coordinate `i` must be differenced forwards to stay above its
/// lower bound.
fn forward_at(x: &[f64], h: &[f64], lower: &[Option<f64>], i: usize) -> bool {
    lower
        .get(i)
        .copied()
        .flatten()
        .is_some_and(|lb| x[i] - h[i] < lb)
}

/// Central-difference gradient with per-coordinate step `step(x_i)`.
pub fn central_gradient<F, S>(f: F, x: &[f64], step: S) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
    S: Fn(f64) -> f64,
{
    bounded_gradient(f, x, step, &[])
}

/// Finite-difference gradient that switches to a second-order forward
/// stencil for coordinates within one step of their lower bound.
pub fn bounded_gradient<F, S>(mut f: F, x: &[f64], step: S, lower: &[Option<f64>]) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
    S: Fn(f64) -> f64,
{
    let h: Vec<f64> = x.iter().map(|v| step(*v)).collect();
    let mut f0 = None;
    let mut xp = x.to_vec();
    let mut g = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let stencil = if forward_at(x, &h, lower, i) {
            FIRST_FORWARD
        } else {
            FIRST_CENTRAL
        };
        let mut acc = 0.0;
        for &(k, w) in stencil {
            let v = if k == 0.0 {
                match f0 {
                    Some(v) => v,
                    None => *f0.insert(f(x)?),
                }
            } else {
                xp[i] = x[i] + k * h[i];
                let v = f(&xp)?;
                xp[i] = x[i];
                v
            };
            acc += w * v;
        }
        g.push(acc / h[i]);
    }
    Ok(g)
}

fn hessian_at_steps<F>(f: &mut F, x: &[f64], h: &[f64], f0: f64, lower: &[Option<f64>]) -> Result<DMatrix<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let n = x.len();
    let fwd: Vec<bool> = (0..n).map(|i| forward_at(x, h, lower, i)).collect();
    let mut m = DMatrix::zeros(n, n);
    let mut xp = x.to_vec();
    for i in 0..n {
        let stencil = if fwd[i] { SECOND_FORWARD } else { SECOND_CENTRAL };
        let mut acc = 0.0;
        for &(k, w) in stencil {
            let v = if k == 0.0 {
                f0
            } else {
                xp[i] = x[i] + k * h[i];
                let v = f(&xp)?;
                xp[i] = x[i];
                v
            };
            acc += w * v;
        }
        m[(i, i)] = acc / (h[i] * h[i]);
    }
    for i in 0..n {
        let si = if fwd[i] { FIRST_FORWARD } else { FIRST_CENTRAL };
        for j in (i + 1)..n {
            let sj = if fwd[j] { FIRST_FORWARD } else { FIRST_CENTRAL };
            let mut acc = 0.0;
            for &(ki, wi) in si {
                for &(kj, wj) in sj {
                    let v = if ki == 0.0 && kj == 0.0 {
                        f0
                    } else {
                        xp[i] = x[i] + ki * h[i];
                        xp[j] = x[j] + kj * h[j];
                        let v = f(&xp);
                        xp[i] = x[i];
                        xp[j] = x[j];
                        v?
                    };
                    acc += wi * wj * v;
                }
            }
            let v = acc / (h[i] * h[j]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
    Ok(m)
}

/// Central-difference Hessian with steps `rel_step * max(1, |x_i|)`,
/// optionally Richardson-extrapolated once with the halved step.
pub fn central_hessian<F>(f: F, x: &[f64], rel_step: f64, richardson: bool) -> Result<DMatrix<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    bounded_hessian(f, x, rel_step, richardson, &[])
}

/// As [`central_hessian`], with forward stencils for coordinates within
/// one step of their lower bound.
pub fn bounded_hessian<F>(
    mut f: F,
    x: &[f64],
    rel_step: f64,
    richardson: bool,
    lower: &[Option<f64>],
) -> Result<DMatrix<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let f0 = f(x)?;
    let h: Vec<f64> = x.iter().map(|v| rel_step * v.abs().max(1.0)).collect();
    let coarse = hessian_at_steps(&mut f, x, &h, f0, lower)?;
    if !richardson {
        return Ok(coarse);
    }
    let half: Vec<f64> = h.iter().map(|v| v / 2.0).collect();
    let fine = hessian_at_steps(&mut f, x, &half, f0, lower)?;
    Ok((fine * 4.0 - coarse) / 3.0)
}

/// Covariance estimate from the Hessian of a log-likelihood.
#[derive(Debug, Clone)]
pub struct Covariance {
    pub matrix: DMatrix<f64>,
    /// Whether the negative Hessian is positive definite.
    pub positive_definite: bool,
    pub condition_number: f64,
}

/// Inverts the negative Hessian. Fails when it is numerically singular.
pub fn covariance_from_hessian(hessian: &DMatrix<f64>) -> Result<Covariance> {
    let info = -hessian.clone();
    let sv = info.clone().singular_values();
    let max = sv.iter().cloned().fold(0.0, f64::max);
    let min = sv.iter().cloned().fold(f64::INFINITY, f64::min);
    let condition = if min > 0.0 { max / min } else { f64::INFINITY };
    if !condition.is_finite() || condition > 1e15 {
        return Err(Error::SingularHessian { condition });
    }
    let positive_definite = info.clone().cholesky().is_some();
    let matrix = info
        .try_inverse()
        .ok_or(Error::SingularHessian { condition })?;
    Ok(Covariance {
        matrix,
        positive_definite,
        condition_number: condition,
    })
}

impl Covariance {
    /// Square roots of the diagonal; NaN where the variance is negative.
    pub fn std_errors(&self) -> Vec<f64> {
        (0..self.matrix.nrows())
            .map(|i| {
                let v = self.matrix[(i, i)];
                if v >= 0.0 {
                    v.sqrt()
                } else {
                    f64::NAN
                }
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bfgs_finds_rosenbrock_maximum() {
        let f = |x: &[f64], g: &mut [f64]| {
            let (a, b) = (x[0], x[1]);
            g[0] = -(-2.0 * (1.0 - a) - 400.0 * a * (b - a * a));
            g[1] = -(200.0 * (b - a * a));
            -((1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2))
        };
        let r = maximize(f, &[-1.2, 1.0], &BfgsSettings { gtol: 1e-8, max_iter: 500 }, None).unwrap();
        assert!(r.converged);
        assert!((r.x[0] - 1.0).abs() < 1e-6 && (r.x[1] - 1.0).abs() < 1e-6, "{:?}", r.x);
    }

    #[test]
    fn quadratic_standard_errors_are_exact() {
        // log-likelihood -0.5 (x - m)' A (x - m) has covariance A^{-1}
        let a = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 0.0, 1.0, 3.0, 0.5, 0.0, 0.5, 2.0]);
        let m = [0.3, -1.2, 2.0];
        let ll = |x: &[f64]| -> Result<f64> {
            let d = DVector::from_iterator(3, x.iter().zip(&m).map(|(a, b)| a - b));
            Ok(-0.5 * d.dot(&(&a * &d)))
        };
        let h = central_hessian(ll, &m, 1e-4, true).unwrap();
        let cov = covariance_from_hessian(&h).unwrap();
        assert!(cov.positive_definite);
        let exact = a.clone().try_inverse().unwrap();
        for (se, i) in cov.std_errors().iter().zip(0..3) {
            assert!((se - exact[(i, i)].sqrt()).abs() < 1e-6);
        }
    }

    #[test]
    fn singular_hessian_rejected() {
        let h = DMatrix::from_row_slice(2, 2, &[-1.0, -1.0, -1.0, -1.0]);
        assert!(matches!(
            covariance_from_hessian(&h),
            Err(Error::SingularHessian { .. })
        ));
    }

    #[test]
    fn gradient_of_cubic() {
        let g = central_gradient(|x: &[f64]| Ok(x[0].powi(3) + 2.0 * x[1]), &[2.0, 5.0], |_| 1e-5)
            .unwrap();
        assert!((g[0] - 12.0).abs() < 1e-6);
        assert!((g[1] - 2.0).abs() < 1e-8);
    }

    #[test]
    fn forward_stencils_near_bound() {
        let f = |x: &[f64]| -> Result<f64> {
            if x[0] < 0.0 {
                return Err(Error::Numeric("below bound".into()));
            }
            Ok((x[0] + 1.0).ln() * x[1] - x[1] * x[1])
        };
        let lower = [Some(0.0), None];
        let x = [0.0, 0.7];
        let g = bounded_gradient(f, &x, |_| 1e-5, &lower).unwrap();
        assert!((g[0] - 0.7).abs() < 1e-7 && (g[1] - (-1.4)).abs() < 1e-7, "{g:?}");
        let h = bounded_hessian(f, &x, 1e-3, true, &lower).unwrap();
        assert!((h[(0, 0)] + 0.7).abs() < 1e-5, "{h}");
        assert!((h[(0, 1)] - 1.0).abs() < 1e-5 && (h[(1, 1)] + 2.0).abs() < 1e-6, "{h}");
    }
}
