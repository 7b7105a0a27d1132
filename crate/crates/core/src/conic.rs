//! Small builder over the Clarabel interior-point solver for the linear and
//! exponential-cone programs used by the w-steps.

use clarabel::algebra::CscMatrix;
use clarabel::solver::{
    DefaultSettingsBuilder, DefaultSolver, IPSolver, SolverStatus, SupportedConeT,
};
use nalgebra::DVector;

use crate::error::{FairError, Result};

/// Sparse linear expression `Σ coef·x[idx]`.
pub(crate) type Terms = Vec<(usize, f64)>;

#[derive(Debug, Clone, Copy, PartialEq)]
enum Block {
    Nonneg,
    Exp,
}

/// `minimize ½ xᵀ P x + qᵀx` over conic constraints, with `P` diagonal.
#[derive(Debug, Clone, Default)]
pub(crate) struct ConicProgram {
    cost: Vec<f64>,
    quad: Vec<(usize, f64)>,
    rows_i: Vec<usize>,
    rows_j: Vec<usize>,
    rows_v: Vec<f64>,
    rhs: Vec<f64>,
    blocks: Vec<Block>,
}

impl ConicProgram {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds `count` variables with the given linear cost and returns the
    /// index of the first.
    pub fn add_vars(&mut self, count: usize, cost: f64) -> usize {
        let first = self.cost.len();
        self.cost.resize(first + count, cost);
        first
    }

    pub fn add_quadratic(&mut self, var: usize, coef: f64) {
        self.quad.push((var, coef));
    }

    fn push_row(&mut self, terms: &[(usize, f64)], rhs: f64) {
        let row = self.rhs.len();
        for &(j, v) in terms {
            if v != 0.0 {
                self.rows_i.push(row);
                self.rows_j.push(j);
                self.rows_v.push(v);
            }
        }
        self.rhs.push(rhs);
    }

    /// `Σ terms ≤ rhs`.
    pub fn leq(&mut self, terms: &[(usize, f64)], rhs: f64) {
        // Unit-scale rows; tiny coefficients defeat the solver's equilibration.
        let scale = terms.iter().map(|t| t.1.abs()).fold(0.0, f64::max);
        if scale > 0.0 && scale != 1.0 {
            let scaled: Terms = terms.iter().map(|&(j, v)| (j, v / scale)).collect();
            self.push_row(&scaled, rhs / scale);
        } else {
            self.push_row(terms, rhs);
        }
        self.blocks.push(Block::Nonneg);
    }

    /// `(e1 + k1, e2 + k2, e3 + k3)` in the exponential cone
    /// `{(a, b, c) : b·exp(a/b) ≤ c, b > 0}`.
    pub fn exp_cone(&mut self, parts: [(&[(usize, f64)], f64); 3]) {
        for (terms, constant) in parts {
            let negated: Terms = terms.iter().map(|&(j, v)| (j, -v)).collect();
            self.push_row(&negated, constant);
        }
        self.blocks.push(Block::Exp);
    }

    /// `exp(e) ≤ var` for an affine expression `e = terms + constant`.
    pub fn exp_le(&mut self, terms: &[(usize, f64)], constant: f64, var: usize) {
        self.exp_cone([(terms, constant), (&[], 1.0), (&[(var, 1.0)], 0.0)]);
    }

    pub fn solve(&self) -> Result<DVector<f64>> {
        let n = self.cost.len();
        let m = self.rhs.len();
        let (pi, pj, pv) = {
            let mut diag = vec![0.0; n];
            for &(j, v) in &self.quad {
                diag[j] += v;
            }
            let nz: Vec<usize> = (0..n).filter(|&j| diag[j] != 0.0).collect();
            let vals = nz.iter().map(|&j| diag[j]).collect();
            (nz.clone(), nz, vals)
        };
        let p = CscMatrix::new_from_triplets(n, n, pi, pj, pv);
        let a = CscMatrix::new_from_triplets(m, n, self.rows_i.clone(), self.rows_j.clone(), self.rows_v.clone());
        let mut cones: Vec<SupportedConeT<f64>> = Vec::new();
        for block in &self.blocks {
            match block {
                Block::Nonneg => match cones.last_mut() {
                    Some(SupportedConeT::NonnegativeConeT(k)) => *k += 1,
                    _ => cones.push(SupportedConeT::NonnegativeConeT(1)),
                },
                Block::Exp => cones.push(SupportedConeT::ExponentialConeT()),
            }
        }
        // Exponential-cone programs occasionally stall on the duality gap;
        // a shorter step, no equilibration, or a rescaled objective gets past it.
        let attempts: [(f64, fn(&mut DefaultSettingsBuilder<f64>)); 4] = [
            (1.0, |_| {}),
            (1.0, |b| {
                b.max_step_fraction(0.9);
            }),
            (1.0, |b| {
                b.equilibrate_enable(false);
            }),
            (1e-2, |_| {}),
        ];
        let mut last = String::new();
        // Reduced-accuracy solutions are kept only if no attempt fully solves.
        let mut fallback = None;
        for (scale, tweak) in attempts {
            let mut builder = DefaultSettingsBuilder::default();
            builder.verbose(false).max_iter(500).tol_gap_abs(1e-10).tol_gap_rel(1e-10).tol_feas(1e-10);
            tweak(&mut builder);
            let settings = builder.build().map_err(|e| FairError::Lp(format!("settings: {e:?}")))?;
            let mut scaled_p = p.clone();
            scaled_p.nzval.iter_mut().for_each(|v| *v *= scale);
            let cost: Vec<f64> = self.cost.iter().map(|v| v * scale).collect();
            let mut solver = DefaultSolver::new(&scaled_p, &cost, &a, &self.rhs, &cones, settings)
                .map_err(|e| FairError::Lp(format!("setup: {e:?}")))?;
            solver.solve();
            let sol = &solver.solution;
            let gap = (sol.obj_val - sol.obj_val_dual).abs() / sol.obj_val.abs().max(1.0);
            // Stalls near the optimum are accepted when the certificates are tight.
            let stalled_ok = sol.status == SolverStatus::InsufficientProgress
                && sol.r_prim <= 1e-6
                && sol.r_dual <= 1e-6
                && gap <= 1e-6;
            let x = DVector::from_vec(sol.x.clone());
            let finite = x.iter().all(|v| v.is_finite());
            match sol.status {
                SolverStatus::PrimalInfeasible | SolverStatus::DualInfeasible => {
                    return Err(FairError::Lp(format!("{:?}", sol.status)))
                }
                SolverStatus::Solved if finite => return Ok(x),
                _ if stalled_ok && finite => return Ok(x),
                SolverStatus::AlmostSolved if finite => {
                    fallback.get_or_insert(x);
                }
                status => last = format!("{status:?}"),
            }
        }
        if let Some(x) = fallback {
            return Ok(x);
        }
        Err(FairError::Lp(last))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_lp() {
        // min -x - y  s.t. x + 2y ≤ 4, 3x + y ≤ 6, x, y ≥ 0  →  (1.6, 1.2)
        let mut p = ConicProgram::new();
        let x = p.add_vars(2, -1.0);
        p.leq(&[(x, 1.0), (x + 1, 2.0)], 4.0);
        p.leq(&[(x, 3.0), (x + 1, 1.0)], 6.0);
        p.leq(&[(x, -1.0)], 0.0);
        p.leq(&[(x + 1, -1.0)], 0.0);
        let sol = p.solve().unwrap();
        assert!((sol[0] - 1.6).abs() < 1e-6 && (sol[1] - 1.2).abs() < 1e-6);
    }

    #[test]
    fn softplus_epigraph() {
        // min t s.t. ln(1 + e^m) ≤ t at fixed m = 0.7
        let m = 0.7f64;
        let mut p = ConicProgram::new();
        let t = p.add_vars(1, 1.0);
        let u = p.add_vars(2, 0.0);
        p.leq(&[(u, 1.0), (u + 1, 1.0)], 1.0);
        p.exp_le(&[(t, -1.0)], 0.0, u);
        p.exp_le(&[(t, -1.0)], m, u + 1);
        let sol = p.solve().unwrap();
        let exact = (1.0 + m.exp()).ln();
        assert!((sol[t] - exact).abs() < 1e-6);
    }

    #[test]
    fn infeasible_reports_error() {
        let mut p = ConicProgram::new();
        let x = p.add_vars(1, 1.0);
        p.leq(&[(x, 1.0)], -1.0);
        p.leq(&[(x, -1.0)], -1.0);
        assert!(matches!(p.solve(), Err(FairError::Lp(_))));
    }
}
