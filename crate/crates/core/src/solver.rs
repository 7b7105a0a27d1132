//! Alternating optimization of the fairness-constrained semi-supervised
//! objective
//!
//! `J(w, y_u) = L(w; y_l, y_u) + α·yᵀUy + α·ε·‖y_u‖²`
//!
//! where `L` is the classifier loss over labeled and unlabeled rows, `U` the
//! graph Laplacian and `ε` a small ridge keeping the `y_u` system definite.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::conic::ConicProgram;
use crate::dataset::Dataset;
use crate::error::{FairError, Result};
use crate::fairness::{
    centered_weights, constraint_value, scope_groups, signed_distance, FairnessConstraintSpec, Metric, ScopeGroup,
};
use crate::graph::GraphLaplacian;
use crate::losses::{
    classifier_loss, design_matrix, label_derivative, labels_as_f64, lr_row_loss, sigmoid, signed_labels, svm_row_loss,
    Model, ModelParams,
};
use crate::optim::{self, AlSettings, Evaluation, LinearInequalities};

/// Total slack below which a CCP iterate counts as feasible.
pub const CCP_SLACK_TOL: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SolverConfig {
    pub alpha: f64,
    pub threshold: f64,
    pub max_outer_iters: usize,
    pub outer_tol: f64,
    pub ccp_tau: f64,
    pub ccp_mu: f64,
    pub ccp_max_iters: usize,
    pub wstep_tol: f64,
    pub ridge_eps: f64,
    /// L2 penalty on non-intercept weights. Zero disables it.
    pub weight_ridge: f64,
    pub seed: u64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            alpha: 1.0,
            threshold: 0.5,
            max_outer_iters: 50,
            outer_tol: 1e-5,
            ccp_tau: 1.0,
            ccp_mu: 1.2,
            ccp_max_iters: 100,
            wstep_tol: 1e-6,
            ridge_eps: 1e-8,
            weight_ridge: 0.0,
            seed: 0,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(FairError::InvalidArgument(what.to_string()));
        if !(self.alpha > 0.0) {
            return bad("alpha must be positive");
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return bad("threshold must lie in (0,1)");
        }
        if !(self.outer_tol > 0.0 && self.wstep_tol > 0.0 && self.ridge_eps > 0.0) {
            return bad("tolerances must be positive");
        }
        if !(self.ccp_mu > 1.0) {
            return bad("ccp_mu must exceed 1");
        }
        if !(self.ccp_tau > 0.0) {
            return bad("ccp_tau must be positive");
        }
        if !(self.weight_ridge >= 0.0) {
            return bad("weight_ridge must be non-negative");
        }
        if self.max_outer_iters == 0 || self.ccp_max_iters == 0 {
            return bad("iteration budgets must be positive");
        }
        Ok(())
    }
}

/// Stacked labeled and unlabeled rows as seen by one w-step.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingRows {
    pub design: DMatrix<f64>,
    pub labels: Vec<u8>,
    pub sensitive: Vec<u8>,
    pub n_labeled: usize,
}

impl TrainingRows {
    /// `y_u` supplies the labels of the unlabeled rows.
    pub fn new(labeled: &Dataset, unlabeled: &Dataset, y_u: &[u8]) -> Result<Self> {
        let y_l = labeled.require_labels()?;
        if y_u.len() != unlabeled.n_rows() {
            return Err(FairError::Dimension(format!(
                "{} unlabeled rows, {} labels",
                unlabeled.n_rows(),
                y_u.len()
            )));
        }
        let pool = labeled.concat(unlabeled)?;
        Ok(TrainingRows {
            design: design_matrix(pool.features()),
            labels: y_l.iter().chain(y_u).copied().collect(),
            sensitive: pool.sensitive().to_vec(),
            n_labeled: labeled.n_rows(),
        })
    }

    /// Labeled rows only.
    pub fn labeled(labeled: &Dataset) -> Result<Self> {
        Ok(TrainingRows {
            design: design_matrix(labeled.features()),
            labels: labeled.require_labels()?.to_vec(),
            sensitive: labeled.sensitive().to_vec(),
            n_labeled: labeled.n_rows(),
        })
    }

    pub fn n_rows(&self) -> usize {
        self.labels.len()
    }

    pub fn n_unlabeled(&self) -> usize {
        self.n_rows() - self.n_labeled
    }

    fn groups(&self, spec: &FairnessConstraintSpec) -> Result<Vec<ScopeGroup>> {
        scope_groups(spec, self.n_labeled, self.n_unlabeled())
    }

    /// `(value, threshold)` of every constraint in `spec` at `w`.
    pub fn constraint_values(&self, spec: &FairnessConstraintSpec, w: &ModelParams) -> Result<Vec<(f64, f64)>> {
        let y = spec.metric().is_mistreatment().then(|| signed_labels(&self.labels));
        let g = signed_distance(spec.metric(), w, &self.design, y.as_deref())?;
        self.groups(spec)?
            .iter()
            .map(|grp| {
                let gs = DVector::from_iterator(grp.rows.len(), grp.rows.iter().map(|&i| g[i]));
                let zs: Vec<u8> = grp.rows.iter().map(|&i| self.sensitive[i]).collect();
                Ok((constraint_value(&gs, &zs)?, grp.threshold))
            })
            .collect()
    }

    /// Centered group weights of one scope group, indexed like `grp.rows`.
    fn group_weights(&self, grp: &ScopeGroup) -> Result<DVector<f64>> {
        let zs: Vec<u8> = grp.rows.iter().map(|&i| self.sensitive[i]).collect();
        centered_weights(&zs)
    }

    /// `(1/K_g) Σ (z_i - z̄) x_i` for a scope group.
    fn di_vector(&self, grp: &ScopeGroup) -> Result<DVector<f64>> {
        let d = self.group_weights(grp)?;
        let mut a = DVector::zeros(self.design.ncols());
        for (pos, &i) in grp.rows.iter().enumerate() {
            a += self.design.row(i).transpose() * d[pos];
        }
        Ok(a)
    }
}

/// Result of a convex w-step.
#[derive(Debug, Clone, PartialEq)]
pub struct WStep {
    pub w: ModelParams,
    /// KKT residual of the augmented-Lagrangian solve; `None` for conic solves.
    pub kkt_residual: Option<f64>,
}

fn lr_objective(rows: &TrainingRows, ridge: f64) -> impl Fn(&DVector<f64>) -> Result<Evaluation> + '_ {
    let k = rows.n_rows() as f64;
    let y = labels_as_f64(&rows.labels);
    let n = rows.design.ncols();
    move |w: &DVector<f64>| {
        let margins = &rows.design * w;
        let mut loss = 0.0;
        let mut resid = DVector::zeros(margins.len());
        let mut curv = DVector::zeros(margins.len());
        for (i, &m) in margins.iter().enumerate() {
            loss += lr_row_loss(m, y[i]);
            let p = sigmoid(m);
            resid[i] = p - y[i];
            curv[i] = p * (1.0 - p);
        }
        if !loss.is_finite() {
            return Err(FairError::NonFinite("logistic loss".into()));
        }
        let mut grad = rows.design.transpose() * resid / k;
        let mut scaled = rows.design.clone();
        for (i, mut r) in scaled.row_iter_mut().enumerate() {
            r *= curv[i];
        }
        let mut hess = rows.design.transpose() * scaled / k;
        let mut value = loss / k;
        for j in 0..n - 1 {
            value += 0.5 * ridge * w[j] * w[j];
            grad[j] += ridge * w[j];
            hess[(j, j)] += ridge;
        }
        Ok((value, grad, hess))
    }
}

/// Adds the classifier loss epigraph over all rows to `p`. The weights occupy
/// variables `0..n`.
fn add_loss(p: &mut ConicProgram, model: Model, rows: &TrainingRows, ridge: f64) {
    let n = rows.design.ncols();
    let k = rows.n_rows();
    for j in 0..n - 1 {
        if ridge > 0.0 {
            p.add_quadratic(j, ridge);
        }
    }
    match model {
        Model::Lr => {
            // softplus(s·m) ≤ t  ⇔  e^{-t} ≤ u, e^{s·m - t} ≤ v, u + v ≤ 1
            let t0 = p.add_vars(k, 1.0);
            let u0 = p.add_vars(2 * k, 0.0);
            for i in 0..k {
                let sign = if rows.labels[i] == 1 { -1.0 } else { 1.0 };
                let (t, u, v) = (t0 + i, u0 + 2 * i, u0 + 2 * i + 1);
                p.leq(&[(u, 1.0), (v, 1.0)], 1.0);
                p.exp_le(&[(t, -1.0)], 0.0, u);
                let mut terms: Vec<(usize, f64)> = (0..n).map(|j| (j, sign * rows.design[(i, j)])).collect();
                terms.push((t, -1.0));
                p.exp_le(&terms, 0.0, v);
            }
        }
        Model::Svm => {
            let xi0 = p.add_vars(k, 1.0 / k as f64);
            for i in 0..k {
                let y = if rows.labels[i] == 1 { 1.0 } else { -1.0 };
                let mut terms: Vec<(usize, f64)> = (0..n).map(|j| (j, -y * rows.design[(i, j)])).collect();
                terms.push((xi0 + i, -1.0));
                p.leq(&terms, -1.0);
                p.leq(&[(xi0 + i, -1.0)], 0.0);
            }
        }
    }
}

fn dense_terms(coef: &DVector<f64>, scale: f64) -> Vec<(usize, f64)> {
    coef.iter().enumerate().map(|(j, &v)| (j, scale * v)).collect()
}

/// Loss minimization under `|a_gᵀw| ≤ c_g` for the disparate-impact
/// constraints of `spec`.
pub fn solve_w_convex(
    model: Model,
    rows: &TrainingRows,
    spec: &FairnessConstraintSpec,
    cfg: &SolverConfig,
) -> Result<WStep> {
    if spec.metric() != Metric::DisparateImpact {
        return Err(FairError::InvalidArgument("convex w-step needs the disparate impact metric".into()));
    }
    let groups = rows.groups(spec)?;
    let vectors = groups.iter().map(|g| rows.di_vector(g)).collect::<Result<Vec<_>>>()?;
    let thresholds: Vec<f64> = groups.iter().map(|g| g.threshold).collect();
    solve_w_linear(model, rows, &vectors, &thresholds, cfg)
}

/// Loss minimization with no fairness constraint.
pub fn solve_w_unconstrained(model: Model, rows: &TrainingRows, cfg: &SolverConfig) -> Result<WStep> {
    solve_w_linear(model, rows, &[], &[], cfg)
}

fn solve_w_linear(
    model: Model,
    rows: &TrainingRows,
    vectors: &[DVector<f64>],
    thresholds: &[f64],
    cfg: &SolverConfig,
) -> Result<WStep> {
    let n = rows.design.ncols();
    // Constraints whose vector vanishes (constant z) are dropped.
    let (vectors, thresholds): (Vec<DVector<f64>>, Vec<f64>) = vectors
        .iter()
        .zip(thresholds)
        .filter(|(a, c)| a.amax() > 0.0 && c.is_finite())
        .map(|(a, c)| (a.clone(), *c))
        .unzip();
    match model {
        Model::Lr => {
            let cons = if vectors.is_empty() {
                LinearInequalities::none(n)
            } else {
                LinearInequalities::two_sided(&vectors, &thresholds)
            };
            let settings = AlSettings {
                tol: cfg.wstep_tol,
                feas_tol: 1e-9,
                ..AlSettings::default()
            };
            let out = optim::minimize(lr_objective(rows, cfg.weight_ridge), DVector::zeros(n), &cons, &settings)?;
            Ok(WStep {
                w: ModelParams::new(out.x)?,
                kkt_residual: Some(out.kkt_residual),
            })
        }
        Model::Svm => {
            let mut p = ConicProgram::new();
            p.add_vars(n, 0.0);
            add_loss(&mut p, model, rows, cfg.weight_ridge);
            for (a, &c) in vectors.iter().zip(&thresholds) {
                p.leq(&dense_terms(a, 1.0), c);
                p.leq(&dense_terms(a, -1.0), c);
            }
            let x = p.solve()?;
            Ok(WStep {
                w: ModelParams::new(x.rows(0, n).into_owned())?,
                kkt_residual: None,
            })
        }
    }
}

/// Per-iteration record of a convex-concave solve.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CcpTrace {
    /// Total slack after each subproblem.
    pub slack: Vec<f64>,
    /// Slack penalty used by each subproblem.
    pub tau: Vec<f64>,
    /// Largest weight change of each subproblem.
    pub movement: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CcpOutcome {
    pub w: ModelParams,
    pub iterations: usize,
    /// Slack and movement both settled before the iteration budget ran out.
    pub converged: bool,
    pub trace: CcpTrace,
    pub constraint_values: Vec<(f64, f64)>,
}

/// Branch thresholds above this are first tried at this value; a far-off
/// right-hand side stalls the interior-point solver.
const THRESHOLD_CAP: f64 = 1e3;

/// Builds and solves one convexified subproblem linearized at `w_lin`.
/// Returns the new weights and the slack of each branch.
#[allow(clippy::too_many_arguments)]
fn ccp_subproblem(
    model: Model,
    rows: &TrainingRows,
    metric: Metric,
    groups: &[ScopeGroup],
    weights: &[DVector<f64>],
    w_lin: &DVector<f64>,
    tau: f64,
    ridge: f64,
    slack_cap: Option<f64>,
) -> Result<(DVector<f64>, Vec<f64>)> {
    let n = rows.design.ncols();
    let kappa: Vec<f64> = signed_labels(&rows.labels)
        .iter()
        .map(|&y| metric.mistreatment_coef(y))
        .collect();
    let lin_margins = &rows.design * w_lin;
    let mut p = ConicProgram::new();
    p.add_vars(n, 0.0);
    add_loss(&mut p, model, rows, ridge);

    // r_i ≥ max(0, κ_i x_iᵀw), allocated on first use.
    let mut hinge_var: Vec<Option<usize>> = vec![None; rows.n_rows()];
    let mut hinge = |p: &mut ConicProgram, i: usize| -> usize {
        if let Some(v) = hinge_var[i] {
            return v;
        }
        // A tiny cost keeps r on its lower envelope when the branch is slack.
        let r = p.add_vars(1, 1e-9);
        p.leq(&[(r, -1.0)], 0.0);
        let mut terms: Vec<(usize, f64)> = (0..n).map(|j| (j, kappa[i] * rows.design[(i, j)])).collect();
        terms.push((r, -1.0));
        p.leq(&terms, 0.0);
        hinge_var[i] = Some(r);
        r
    };

    let mut branches = Vec::new();
    let mut slack_vars = Vec::new();
    for (grp, d) in groups.iter().zip(weights) {
        for branch in [1.0, -1.0] {
            let s = p.add_vars(1, tau);
            p.leq(&[(s, -1.0)], 0.0);
            slack_vars.push(s);
            let mut lin = DVector::zeros(n);
            let mut terms = Vec::new();
            let mut hinged = Vec::new();
            for (pos, &i) in grp.rows.iter().enumerate() {
                let di = d[pos] * branch;
                if kappa[i] == 0.0 || di == 0.0 {
                    continue;
                }
                let xi = rows.design.row(i).transpose();
                // branch·d·min(0,h) = branch·d·h - branch·d·max(0,h)
                lin += &xi * (di * kappa[i]);
                if di < 0.0 {
                    terms.push((hinge(&mut p, i), -di));
                    hinged.push((i, -di));
                } else if kappa[i] * lin_margins[i] > 0.0 {
                    lin -= &xi * (di * kappa[i]);
                }
            }
            terms.extend(dense_terms(&lin, 1.0));
            let convexified = (lin, hinged);
            terms.push((s, -1.0));
            branches.push((terms, grp.threshold, convexified));
        }
    }

    // The previous iterate keeps its slack under the new linearization, so
    // capping total slack there keeps the subproblem feasible.
    if let Some(cap) = slack_cap {
        let terms: Vec<(usize, f64)> = slack_vars.iter().map(|&v| (v, 1.0)).collect();
        p.leq(&terms, cap + 1e-9);
    }
    let capped = branches.iter().any(|(_, c, _)| *c > THRESHOLD_CAP);
    for cap in [THRESHOLD_CAP, f64::INFINITY] {
        let mut q = p.clone();
        for (terms, c, _) in &branches {
            q.leq(terms, c.min(cap));
        }
        let x = q.solve()?;
        // A capped branch that is not tight leaves the optimum unchanged.
        let tight = branches.iter().any(|(terms, c, _)| {
            *c > cap && terms.iter().map(|&(j, v)| v * x[j]).sum::<f64>() > cap * (1.0 - 1e-6)
        });
        if !capped || !tight || cap.is_infinite() {
            // Violation of each convexified branch at w, with r on its envelope.
            let exact = |w: &DVector<f64>| -> Vec<f64> {
                let margins = &rows.design * w;
                branches
                    .iter()
                    .map(|(_, c, (lin, hinged))| {
                        let value = lin.dot(w)
                            + hinged.iter().map(|&(i, coef)| coef * (kappa[i] * margins[i]).max(0.0)).sum::<f64>();
                        (value - c).max(0.0)
                    })
                    .collect()
            };
            let w = x.rows(0, n).into_owned();
            let slacks = exact(&w);
            // An inexact solve can break the slack cap; the linearization
            // point satisfies it exactly, so it is kept instead.
            if let Some(limit) = slack_cap {
                if slacks.iter().sum::<f64>() > limit + 1e-9 {
                    return Ok((w_lin.clone(), exact(w_lin)));
                }
            }
            return Ok((w, slacks));
        }
    }
    unreachable!("the uncapped pass always returns")
}

/// Convex-concave procedure for the mistreatment constraints of `spec`,
/// starting from `w_init`.
pub fn solve_w_ccp(
    model: Model,
    rows: &TrainingRows,
    spec: &FairnessConstraintSpec,
    cfg: &SolverConfig,
    w_init: &ModelParams,
) -> Result<CcpOutcome> {
    if !spec.metric().is_mistreatment() {
        return Err(FairError::InvalidArgument("ccp w-step needs a mistreatment metric".into()));
    }
    if w_init.len() != rows.design.ncols() {
        return Err(FairError::Dimension("initial weights do not match the design".into()));
    }
    let groups = rows.groups(spec)?;
    let weights = groups.iter().map(|g| rows.group_weights(g)).collect::<Result<Vec<_>>>()?;
    let mut w = w_init.as_vector().clone();
    let mut tau = cfg.ccp_tau;
    let mut trace = CcpTrace {
        slack: Vec::new(),
        tau: Vec::new(),
        movement: Vec::new(),
    };
    let mut converged = false;
    for _ in 0..cfg.ccp_max_iters {
        let (w_new, slacks) =
            ccp_subproblem(model, rows, spec.metric(), &groups, &weights, &w, tau, cfg.weight_ridge, trace.slack.last().copied())?;
        let movement = (&w_new - &w).amax();
        let total: f64 = slacks.iter().sum();
        trace.slack.push(total);
        trace.tau.push(tau);
        trace.movement.push(movement);
        w = w_new;
        if total <= CCP_SLACK_TOL && movement <= cfg.wstep_tol.max(1e-6) * w.amax().max(1.0) {
            converged = true;
            break;
        }
        // Once feasible, a fixed penalty lets the iterates settle; growing it
        // further only degrades the conditioning of the subproblems.
        if total > CCP_SLACK_TOL {
            tau *= cfg.ccp_mu;
        }
    }
    let iterations = trace.slack.len();
    let final_slack = *trace.slack.last().expect("at least one ccp iteration");
    if final_slack > CCP_SLACK_TOL {
        return Err(FairError::Infeasible {
            c: spec.c(),
            slack: final_slack,
            iterations,
        });
    }
    let w = ModelParams::new(w)?;
    let constraint_values = rows.constraint_values(spec, &w)?;
    Ok(CcpOutcome {
        w,
        iterations,
        converged,
        trace,
        constraint_values,
    })
}

/// `y_i ≥ T` → 1, else 0.
pub fn threshold_labels(y_u: &DVector<f64>, threshold: f64) -> Vec<u8> {
    y_u.iter().map(|&v| u8::from(v >= threshold)).collect()
}

/// The `y_u` subproblem for fixed `w`, with `(U_uu + εI)` factorized once.
#[derive(Debug, Clone)]
pub struct LabelPropagation<'a> {
    lap: &'a GraphLaplacian,
    y_l: DVector<f64>,
    alpha: f64,
    ridge_eps: f64,
    chol: Cholesky<f64, Dyn>,
    /// `-U_ul y_l`.
    base_rhs: DVector<f64>,
}

impl<'a> LabelPropagation<'a> {
    pub fn new(lap: &'a GraphLaplacian, y_l: &[u8], alpha: f64, ridge_eps: f64) -> Result<Self> {
        if y_l.len() != lap.n_labeled() {
            return Err(FairError::Dimension(format!(
                "{} labels for {} labeled nodes",
                y_l.len(),
                lap.n_labeled()
            )));
        }
        if !(alpha > 0.0) {
            return Err(FairError::InvalidArgument("alpha must be positive".into()));
        }
        let mut m = lap.u_uu().into_owned();
        for i in 0..m.nrows() {
            m[(i, i)] += ridge_eps;
        }
        let chol = m.cholesky().ok_or_else(|| FairError::Singular("U_uu + ridge".into()))?;
        let y_l = DVector::from_iterator(y_l.len(), y_l.iter().map(|&v| v as f64));
        let base_rhs = -(lap.u_ul() * &y_l);
        Ok(LabelPropagation {
            lap,
            y_l,
            alpha,
            ridge_eps,
            chol,
            base_rhs,
        })
    }

    fn stacked(&self, y_u: &DVector<f64>) -> DVector<f64> {
        let mut y = DVector::zeros(self.lap.n_nodes());
        y.rows_mut(0, self.y_l.len()).copy_from(&self.y_l);
        y.rows_mut(self.y_l.len(), y_u.len()).copy_from(y_u);
        y
    }

    /// Minimizer over continuous `y_u` given the unlabeled margins `wᵀx`.
    /// `k_total` is the row count the SVM loss averages over.
    pub fn solve(&self, model: Model, margins_u: &DVector<f64>, k_total: usize) -> Result<DVector<f64>> {
        if margins_u.len() != self.lap.n_unlabeled() {
            return Err(FairError::Dimension("margins do not match unlabeled nodes".into()));
        }
        let dl = label_derivative(model, margins_u, k_total);
        let rhs = &self.base_rhs - dl / (2.0 * self.alpha);
        let y = self.chol.solve(&rhs);
        if y.iter().any(|v| !v.is_finite()) {
            return Err(FairError::Singular("label propagation produced non-finite values".into()));
        }
        Ok(y)
    }

    /// Terms of the objective that depend on `y_u`.
    pub fn objective(&self, model: Model, margins_u: &DVector<f64>, y_u: &DVector<f64>, k_total: usize) -> f64 {
        let k = k_total.max(1) as f64;
        let loss: f64 = margins_u
            .iter()
            .zip(y_u.iter())
            .map(|(&m, &y)| match model {
                Model::Lr => lr_row_loss(m, y),
                Model::Svm => svm_row_loss(m, y, k),
            })
            .sum();
        loss + self.alpha * self.lap.quadratic_form(&self.stacked(y_u)) + self.alpha * self.ridge_eps * y_u.norm_squared()
    }

    /// Gradient of [`objective`](Self::objective) in `y_u`.
    pub fn gradient(&self, model: Model, margins_u: &DVector<f64>, y_u: &DVector<f64>, k_total: usize) -> DVector<f64> {
        let l = self.y_l.len();
        let uy = self.lap.laplacian() * self.stacked(y_u);
        label_derivative(model, margins_u, k_total) + uy.rows(l, y_u.len()) * (2.0 * self.alpha)
            + y_u * (2.0 * self.alpha * self.ridge_eps)
    }
}

/// One-shot form of [`LabelPropagation::solve`]: `x_u` is the unlabeled
/// design matrix (with intercept column).
#[allow(clippy::too_many_arguments)]
pub fn solve_yu_closed_form(
    model: Model,
    w: &ModelParams,
    x_u: &DMatrix<f64>,
    y_l: &[u8],
    lap: &GraphLaplacian,
    alpha: f64,
    ridge_eps: f64,
    k_total: usize,
) -> Result<DVector<f64>> {
    if x_u.ncols() != w.len() {
        return Err(FairError::Dimension("unlabeled design does not match weights".into()));
    }
    LabelPropagation::new(lap, y_l, alpha, ridge_eps)?.solve(model, &(x_u * w.as_vector()), k_total)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Phase {
    WStep,
    YuContinuous,
    Threshold,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub w: ModelParams,
    pub y_u: Vec<u8>,
    pub y_u_continuous: DVector<f64>,
    /// Full objective after each outer iteration (post-threshold).
    pub objective_trace: Vec<f64>,
    /// Objective after every phase of every outer iteration.
    pub phase_trace: Vec<(usize, Phase, f64)>,
    /// Constraint `(value, threshold)` pairs at each iteration's w-step,
    /// evaluated with the labels that w-step saw.
    pub constraint_trace: Vec<Vec<(f64, f64)>>,
    pub ccp_traces: Vec<CcpTrace>,
    pub converged: bool,
    pub iters: usize,
}

impl TrainReport {
    pub fn final_constraints(&self) -> &[(f64, f64)] {
        self.constraint_trace.last().map_or(&[], |v| v.as_slice())
    }
}

fn full_objective(model: Model, rows: &TrainingRows, w: &ModelParams, prop: Option<&LabelPropagation>, y_u: &DVector<f64>) -> Result<f64> {
    let mut y = labels_as_f64(&rows.labels[..rows.n_labeled]);
    y.extend(y_u.iter());
    let loss = classifier_loss(model, w, &rows.design, &y)?;
    Ok(match prop {
        Some(p) => {
            let stacked = p.stacked(y_u);
            loss + p.alpha * p.lap.quadratic_form(&stacked) + p.alpha * p.ridge_eps * y_u.norm_squared()
        }
        None => loss,
    })
}

fn w_step(
    model: Model,
    rows: &TrainingRows,
    spec: &FairnessConstraintSpec,
    cfg: &SolverConfig,
    w_prev: Option<&ModelParams>,
) -> Result<(ModelParams, Option<CcpTrace>)> {
    if spec.metric().is_mistreatment() {
        let start = match w_prev {
            Some(w) => w.clone(),
            None => solve_w_unconstrained(model, rows, cfg)?.w,
        };
        let out = solve_w_ccp(model, rows, spec, cfg, &start)?;
        Ok((out.w, Some(out.trace)))
    } else {
        Ok((solve_w_convex(model, rows, spec, cfg)?.w, None))
    }
}

/// Alternates constrained w-steps with closed-form `y_u` steps. Without
/// unlabeled rows this is a single constrained fit on the labeled data.
pub fn train(
    labeled: &Dataset,
    unlabeled: &Dataset,
    lap: Option<&GraphLaplacian>,
    model: Model,
    spec: &FairnessConstraintSpec,
    cfg: &SolverConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    let y_l = labeled.require_labels()?;
    let n_u = unlabeled.n_rows();
    if n_u == 0 {
        let rows = TrainingRows::labeled(labeled)?;
        let (w, ccp) = w_step(model, &rows, spec, cfg, None).map_err(|e| at(1, e))?;
        let constraints = rows.constraint_values(spec, &w)?;
        let objective = full_objective(model, &rows, &w, None, &DVector::zeros(0))?;
        return Ok(TrainReport {
            w,
            y_u: Vec::new(),
            y_u_continuous: DVector::zeros(0),
            objective_trace: vec![objective],
            phase_trace: vec![(1, Phase::WStep, objective)],
            constraint_trace: vec![constraints],
            ccp_traces: ccp.into_iter().collect(),
            converged: true,
            iters: 1,
        });
    }
    let lap = lap.ok_or_else(|| FairError::InvalidArgument("unlabeled rows need a graph".into()))?;
    if lap.n_labeled() != labeled.n_rows() || lap.n_unlabeled() != n_u {
        return Err(FairError::Dimension(format!(
            "graph has {}+{} nodes, data has {}+{}",
            lap.n_labeled(),
            lap.n_unlabeled(),
            labeled.n_rows(),
            n_u
        )));
    }
    let prop = LabelPropagation::new(lap, y_l, cfg.alpha, cfg.ridge_eps)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut y_u: Vec<u8> = (0..n_u).map(|_| rng.gen_range(0..=1u8)).collect();
    let x_u = design_matrix(unlabeled.features());
    let k_total = labeled.n_rows() + n_u;

    let mut w: Option<ModelParams> = None;
    let mut y_cont = DVector::zeros(n_u);
    let mut objective_trace = Vec::new();
    let mut phase_trace = Vec::new();
    let mut constraint_trace = Vec::new();
    let mut ccp_traces = Vec::new();
    let mut converged = false;
    let mut iters = 0;
    for it in 1..=cfg.max_outer_iters {
        iters = it;
        let rows = TrainingRows::new(labeled, unlabeled, &y_u)?;
        let (w_new, ccp) = w_step(model, &rows, spec, cfg, w.as_ref()).map_err(|e| at(it, e))?;
        ccp_traces.extend(ccp);
        constraint_trace.push(rows.constraint_values(spec, &w_new)?);
        let y_bin = DVector::from_iterator(n_u, y_u.iter().map(|&v| v as f64));
        phase_trace.push((it, Phase::WStep, full_objective(model, &rows, &w_new, Some(&prop), &y_bin)?));

        let margins_u = &x_u * w_new.as_vector();
        y_cont = prop.solve(model, &margins_u, k_total).map_err(|e| at(it, e))?;
        phase_trace.push((it, Phase::YuContinuous, full_objective(model, &rows, &w_new, Some(&prop), &y_cont)?));

        y_u = threshold_labels(&y_cont, cfg.threshold);
        let y_bin = DVector::from_iterator(n_u, y_u.iter().map(|&v| v as f64));
        let objective = full_objective(model, &rows, &w_new, Some(&prop), &y_bin)?;
        phase_trace.push((it, Phase::Threshold, objective));
        w = Some(w_new);

        let previous = objective_trace.last().copied();
        objective_trace.push(objective);
        if let Some(prev) = previous {
            let prev: f64 = prev;
            if (objective - prev).abs() <= cfg.outer_tol * prev.abs().max(1e-12) {
                converged = true;
                break;
            }
        }
    }
    Ok(TrainReport {
        w: w.expect("at least one outer iteration"),
        y_u,
        y_u_continuous: y_cont,
        objective_trace,
        phase_trace,
        constraint_trace,
        ccp_traces,
        converged,
        iters,
    })
}

fn at(iteration: usize, e: FairError) -> FairError {
    FairError::AtIteration {
        iteration,
        source: Box::new(e),
    }
}
