//! Smooth convex minimization under linear inequalities `A x ≤ b` by an
//! augmented Lagrangian outer loop with damped Newton inner solves.

use nalgebra::{DMatrix, DVector};

use crate::error::{FairError, Result};

/// Objective value, gradient and Hessian at a point.
pub type Evaluation = (f64, DVector<f64>, DMatrix<f64>);

#[derive(Debug, Clone, PartialEq)]
pub struct LinearInequalities {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
}

impl LinearInequalities {
    pub fn none(n: usize) -> Self {
        LinearInequalities {
            a: DMatrix::zeros(0, n),
            b: DVector::zeros(0),
        }
    }

    /// `|aᵀx| ≤ c` for each row `a` of `rows`.
    pub fn two_sided(rows: &[DVector<f64>], thresholds: &[f64]) -> Self {
        let n = rows.first().map_or(0, |r| r.len());
        let m = rows.len();
        let mut a = DMatrix::zeros(2 * m, n);
        let mut b = DVector::zeros(2 * m);
        for (j, (row, &c)) in rows.iter().zip(thresholds).enumerate() {
            a.row_mut(2 * j).copy_from(&row.transpose());
            a.row_mut(2 * j + 1).copy_from(&(-row.transpose()));
            b[2 * j] = c;
            b[2 * j + 1] = c;
        }
        LinearInequalities { a, b }
    }

    pub fn len(&self) -> usize {
        self.b.len()
    }

    pub fn is_empty(&self) -> bool {
        self.b.is_empty()
    }

    fn residual(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.a * x - &self.b
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlSettings {
    /// Bound on stationarity and complementarity at exit.
    pub tol: f64,
    /// Bound on constraint violation at exit.
    pub feas_tol: f64,
    pub max_outer: usize,
    pub max_inner: usize,
}

impl Default for AlSettings {
    fn default() -> Self {
        AlSettings {
            tol: 1e-6,
            feas_tol: 1e-8,
            max_outer: 60,
            max_inner: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlOutcome {
    pub x: DVector<f64>,
    pub multipliers: DVector<f64>,
    /// Max of stationarity and complementarity residuals.
    pub kkt_residual: f64,
    pub violation: f64,
    pub outer_iters: usize,
}

/// Largest entry of `max(0, r)`.
fn violation(r: &DVector<f64>) -> f64 {
    r.iter().fold(0.0, |acc, &v| acc.max(v))
}

fn complementarity(lambda: &DVector<f64>, r: &DVector<f64>) -> f64 {
    lambda
        .iter()
        .zip(r.iter())
        .fold(0.0, |acc, (&l, &ri)| acc.max(l.min(-ri).abs()))
}

/// Solves `H d = -g`, shifting the diagonal until the factorization succeeds.
fn newton_direction(h: &DMatrix<f64>, g: &DVector<f64>) -> Result<DVector<f64>> {
    let scale = h.diagonal().amax().max(1.0);
    let mut shift = 0.0;
    for _ in 0..30 {
        let mut m = h.clone();
        for i in 0..m.nrows() {
            m[(i, i)] += shift;
        }
        if let Some(chol) = m.cholesky() {
            let d = chol.solve(&(-g));
            if d.iter().all(|v| v.is_finite()) {
                return Ok(d);
            }
        }
        shift = if shift == 0.0 { 1e-12 * scale } else { shift * 10.0 };
    }
    Err(FairError::Singular("newton system".into()))
}

/// Minimizes `L(x) = f(x) + (1/2ρ) Σ [max(0, λ + ρ r)² - λ²]` from `x`.
/// Returns the point and the final gradient norm.
fn inner_newton<F>(
    obj: &F,
    cons: &LinearInequalities,
    lambda: &DVector<f64>,
    rho: f64,
    mut x: DVector<f64>,
    tol: f64,
    max_iter: usize,
) -> Result<(DVector<f64>, f64)>
where
    F: Fn(&DVector<f64>) -> Result<Evaluation>,
{
    let eval = |x: &DVector<f64>, with_hessian: bool| -> Result<(f64, DVector<f64>, Option<DMatrix<f64>>)> {
        let (f, g, h) = obj(x)?;
        let shifted = lambda + cons.residual(x) * rho;
        let active = shifted.map(|v| v.max(0.0));
        let value = f + (active.norm_squared() - lambda.norm_squared()) / (2.0 * rho);
        let grad = g + cons.a.transpose() * &active;
        let hess = with_hessian.then(|| {
            let mut h = h;
            for (j, &s) in shifted.iter().enumerate() {
                if s > 0.0 {
                    let row = cons.a.row(j);
                    h += row.transpose() * row * rho;
                }
            }
            h
        });
        Ok((value, grad, hess))
    };

    let (mut value, mut grad, mut hess) = eval(&x, true)?;
    for _ in 0..max_iter {
        let gnorm = grad.amax();
        if gnorm <= tol {
            return Ok((x, gnorm));
        }
        let h = hess.take().expect("hessian requested");
        let mut d = newton_direction(&h, &grad)?;
        let mut slope = grad.dot(&d);
        if !(slope < 0.0) {
            d = -&grad;
            slope = -grad.norm_squared();
        }
        let mut step = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            let trial = &x + &d * step;
            let (tv, _, _) = eval(&trial, false)?;
            if tv.is_finite() && tv <= value + 1e-4 * step * slope {
                x = trial;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        let next = eval(&x, true)?;
        if !accepted {
            // No decrease representable in floating point: we are at the
            // numerical optimum.
            return Ok((x, next.1.amax()));
        }
        value = next.0;
        grad = next.1;
        hess = next.2;
    }
    let gnorm = grad.amax();
    Ok((x, gnorm))
}

/// Minimizes a smooth convex `f` subject to `A x ≤ b`.
pub fn minimize<F>(obj: F, x0: DVector<f64>, cons: &LinearInequalities, settings: &AlSettings) -> Result<AlOutcome>
where
    F: Fn(&DVector<f64>) -> Result<Evaluation>,
{
    if cons.a.ncols() != x0.len() && !cons.is_empty() {
        return Err(FairError::Dimension(format!(
            "constraints have {} columns, point has {} entries",
            cons.a.ncols(),
            x0.len()
        )));
    }
    let mut lambda = DVector::zeros(cons.len());
    let mut rho = 10.0;
    let mut x = x0;
    let mut last_violation = f64::INFINITY;
    let inner_tol = 0.1 * settings.tol;
    let mut outcome = None;
    for outer in 1..=settings.max_outer {
        let (xn, gnorm) = inner_newton(&obj, cons, &lambda, rho, x, inner_tol, settings.max_inner)?;
        x = xn;
        let r = cons.residual(&x);
        lambda = (&lambda + &r * rho).map(|v| v.max(0.0));
        let viol = violation(&r);
        let kkt = gnorm.max(complementarity(&lambda, &r));
        outcome = Some(AlOutcome {
            x: x.clone(),
            multipliers: lambda.clone(),
            kkt_residual: kkt,
            violation: viol,
            outer_iters: outer,
        });
        if kkt <= settings.tol && viol <= settings.feas_tol {
            break;
        }
        if viol > 0.25 * last_violation && rho < 1e12 {
            rho *= 10.0;
        }
        last_violation = viol;
    }
    let outcome = outcome.expect("at least one outer iteration");
    if outcome.kkt_residual > settings.tol || outcome.violation > settings.feas_tol {
        return Err(FairError::NotConverged {
            residual: outcome.kkt_residual,
            violation: outcome.violation,
        });
    }
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quadratic(center: DVector<f64>) -> impl Fn(&DVector<f64>) -> Result<Evaluation> {
        move |x: &DVector<f64>| {
            let d = x - &center;
            Ok((0.5 * d.norm_squared(), d, DMatrix::identity(x.len(), x.len())))
        }
    }

    #[test]
    fn unconstrained_quadratic() {
        let c = DVector::from_vec(vec![1.0, -2.0, 3.0]);
        let out = minimize(quadratic(c.clone()), DVector::zeros(3), &LinearInequalities::none(3), &AlSettings::default()).unwrap();
        assert!((out.x - c).amax() < 1e-10);
    }

    #[test]
    fn projection_onto_halfspace() {
        // Project (2, 2) onto x + y ≤ 1: (0.5, 0.5) with multiplier 1.5.
        let cons = LinearInequalities {
            a: DMatrix::from_row_slice(1, 2, &[1.0, 1.0]),
            b: DVector::from_element(1, 1.0),
        };
        let out = minimize(quadratic(DVector::from_vec(vec![2.0, 2.0])), DVector::zeros(2), &cons, &AlSettings::default()).unwrap();
        assert!((out.x[0] - 0.5).abs() < 1e-7 && (out.x[1] - 0.5).abs() < 1e-7);
        assert!((out.multipliers[0] - 1.5).abs() < 1e-6);
    }

    #[test]
    fn two_sided_zero_threshold_is_equality() {
        let a = DVector::from_vec(vec![1.0, -1.0]);
        let cons = LinearInequalities::two_sided(&[a.clone()], &[0.0]);
        let out = minimize(quadratic(DVector::from_vec(vec![3.0, 1.0])), DVector::zeros(2), &cons, &AlSettings::default()).unwrap();
        assert!(a.dot(&out.x).abs() < 1e-8);
        assert!((out.x[0] - 2.0).abs() < 1e-7);
    }

    #[test]
    fn inactive_constraint_leaves_optimum() {
        let cons = LinearInequalities::two_sided(&[DVector::from_vec(vec![1.0, 0.0])], &[10.0]);
        let out = minimize(quadratic(DVector::from_vec(vec![1.0, 1.0])), DVector::zeros(2), &cons, &AlSettings::default()).unwrap();
        assert!((out.x - DVector::from_vec(vec![1.0, 1.0])).amax() < 1e-10);
        assert_eq!(out.multipliers.amax(), 0.0);
    }
}
