//! Covariance-style fairness constraints and group discrimination metrics.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{FairError, Result};
use crate::losses::{design_matrix, signed_labels, ModelParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Metric {
    DisparateImpact,
    Omr,
    Fpr,
    Fnr,
}

impl Metric {
    pub const ALL: [Metric; 4] = [Metric::DisparateImpact, Metric::Omr, Metric::Fpr, Metric::Fnr];

    pub fn is_mistreatment(self) -> bool {
        self != Metric::DisparateImpact
    }

    /// Coefficient `κ` such that the mistreatment signed distance of a row
    /// with signed label `y` is `min(0, κ·wᵀx)`.
    pub fn mistreatment_coef(self, y_signed: f64) -> f64 {
        match self {
            Metric::DisparateImpact => 0.0,
            Metric::Omr => y_signed,
            Metric::Fpr => 0.5 * (1.0 - y_signed) * y_signed,
            Metric::Fnr => 0.5 * (1.0 + y_signed) * y_signed,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Metric::DisparateImpact => "di",
            Metric::Omr => "omr",
            Metric::Fpr => "fpr",
            Metric::Fnr => "fnr",
        }
    }
}

impl std::str::FromStr for Metric {
    type Err = FairError;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "di" | "disparate_impact" | "disparateimpact" => Ok(Metric::DisparateImpact),
            "omr" => Ok(Metric::Omr),
            "fpr" => Ok(Metric::Fpr),
            "fnr" => Ok(Metric::Fnr),
            other => Err(FairError::Config(format!("unknown metric `{other}`"))),
        }
    }
}

/// Rows the constraint is evaluated over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Scope {
    Labeled,
    Unlabeled,
    /// Separate constraints on labeled (`c`) and unlabeled (`c2`) rows.
    Combined,
    /// One constraint over labeled and unlabeled rows together.
    Mixed,
}

impl std::str::FromStr for Scope {
    type Err = FairError;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "labeled" => Ok(Scope::Labeled),
            "unlabeled" => Ok(Scope::Unlabeled),
            "combined" => Ok(Scope::Combined),
            "mixed" => Ok(Scope::Mixed),
            other => Err(FairError::Config(format!("unknown scope `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FairnessConstraintSpec {
    metric: Metric,
    scope: Scope,
    c: f64,
    c2: Option<f64>,
}

impl FairnessConstraintSpec {
    pub fn new(metric: Metric, scope: Scope, c: f64, c2: Option<f64>) -> Result<Self> {
        if !(c >= 0.0) {
            return Err(FairError::InvalidArgument(format!("threshold c must be >= 0, got {c}")));
        }
        match (scope, c2) {
            (Scope::Combined, Some(v)) if v >= 0.0 => {}
            (Scope::Combined, Some(v)) => {
                return Err(FairError::InvalidArgument(format!("threshold c2 must be >= 0, got {v}")))
            }
            (Scope::Combined, None) => {
                return Err(FairError::InvalidArgument("combined scope needs c2".into()))
            }
            (_, Some(_)) => {
                return Err(FairError::InvalidArgument("c2 is only valid for combined scope".into()))
            }
            (_, None) => {}
        }
        Ok(FairnessConstraintSpec { metric, scope, c, c2 })
    }

    pub fn metric(&self) -> Metric {
        self.metric
    }

    pub fn scope(&self) -> Scope {
        self.scope
    }

    pub fn c(&self) -> f64 {
        self.c
    }

    pub fn c2(&self) -> Option<f64> {
        self.c2
    }

    /// Same constraint with a different scope; `c2` defaults to `c`.
    pub fn with_scope(&self, scope: Scope) -> Self {
        let c2 = (scope == Scope::Combined).then(|| self.c2.unwrap_or(self.c));
        FairnessConstraintSpec { scope, c2, ..*self }
    }
}

/// Per-row signed distance `g_w`. `y` holds ±1 labels and is required for the
/// mistreatment metrics.
pub fn signed_distance(
    metric: Metric,
    w: &ModelParams,
    x: &DMatrix<f64>,
    y: Option<&[f64]>,
) -> Result<DVector<f64>> {
    if x.ncols() != w.len() {
        return Err(FairError::Dimension(format!(
            "design has {} columns, weights have {}",
            x.ncols(),
            w.len()
        )));
    }
    let margins = x * w.as_vector();
    if !metric.is_mistreatment() {
        return Ok(margins);
    }
    let y = y.ok_or_else(|| FairError::MissingLabels(format!("{} signed distance", metric.name())))?;
    if y.len() != margins.len() {
        return Err(FairError::Dimension(format!("{} rows, {} labels", margins.len(), y.len())));
    }
    if y.iter().any(|&v| v != 1.0 && v != -1.0) {
        return Err(FairError::InvalidArgument("signed labels must be -1 or +1".into()));
    }
    Ok(DVector::from_iterator(
        margins.len(),
        margins
            .iter()
            .zip(y)
            .map(|(&m, &yi)| (metric.mistreatment_coef(yi) * m).min(0.0)),
    ))
}

/// Centered group weights `(z_i - z̄) / K`.
pub fn centered_weights(z: &[u8]) -> Result<DVector<f64>> {
    if z.is_empty() {
        return Err(FairError::Empty("sensitive vector".into()));
    }
    let k = z.len() as f64;
    let mean = z.iter().map(|&v| v as f64).sum::<f64>() / k;
    Ok(DVector::from_iterator(z.len(), z.iter().map(|&v| (v as f64 - mean) / k)))
}

/// `(1/K) Σ g_i (z_i - z̄)`.
pub fn constraint_value(g: &DVector<f64>, z: &[u8]) -> Result<f64> {
    if g.len() != z.len() {
        return Err(FairError::Dimension(format!("{} distances, {} groups", g.len(), z.len())));
    }
    let d = centered_weights(z)?;
    // Summing group by group keeps the value exactly zero for constant z.
    let mut by_group = [0.0; 2];
    for (i, &zi) in z.iter().enumerate() {
        by_group[zi as usize] += g[i] * d[i];
    }
    Ok(by_group[0] + by_group[1])
}

/// Row indices into the stacked `[labeled; unlabeled]` rows covered by one
/// constraint, and its threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct ScopeGroup {
    pub rows: Vec<usize>,
    pub threshold: f64,
}

/// Resolves a scope into one or two row groups.
pub fn scope_groups(spec: &FairnessConstraintSpec, n_labeled: usize, n_unlabeled: usize) -> Result<Vec<ScopeGroup>> {
    if spec.scope != Scope::Labeled && n_unlabeled == 0 {
        return Err(FairError::InvalidArgument(format!(
            "{:?} scope needs unlabeled rows",
            spec.scope
        )));
    }
    let labeled: Vec<usize> = (0..n_labeled).collect();
    let unlabeled: Vec<usize> = (n_labeled..n_labeled + n_unlabeled).collect();
    let groups = match spec.scope {
        Scope::Labeled => vec![ScopeGroup { rows: labeled, threshold: spec.c }],
        Scope::Unlabeled => vec![ScopeGroup { rows: unlabeled, threshold: spec.c }],
        Scope::Combined => vec![
            ScopeGroup { rows: labeled, threshold: spec.c },
            ScopeGroup { rows: unlabeled, threshold: spec.c2.unwrap_or(spec.c) },
        ],
        Scope::Mixed => vec![ScopeGroup {
            rows: (0..n_labeled + n_unlabeled).collect(),
            threshold: spec.c,
        }],
    };
    if groups.iter().any(|g| g.rows.is_empty()) {
        return Err(FairError::Empty("constraint scope".into()));
    }
    Ok(groups)
}

/// Constraint `(value, threshold)` pairs at `w`. Unlabeled rows use `y_u` as
/// their labels for the mistreatment metrics.
pub fn constraint_values_for_scope(
    spec: &FairnessConstraintSpec,
    w: &ModelParams,
    labeled: &Dataset,
    unlabeled: &Dataset,
    y_u: &[u8],
) -> Result<Vec<(f64, f64)>> {
    let n_l = labeled.n_rows();
    let n_u = unlabeled.n_rows();
    let groups = scope_groups(spec, n_l, n_u)?;
    let pool = labeled.concat(unlabeled)?;
    let x = design_matrix(pool.features());
    let z = pool.sensitive();
    let y = if spec.metric.is_mistreatment() {
        let y_l = labeled.require_labels()?;
        if y_u.len() != n_u {
            return Err(FairError::Dimension(format!("{n_u} unlabeled rows, {} labels", y_u.len())));
        }
        let needs_u = spec.scope != Scope::Labeled;
        let stacked: Vec<u8> = if needs_u {
            y_l.iter().chain(y_u).copied().collect()
        } else {
            y_l.iter().copied().chain(std::iter::repeat(0).take(n_u)).collect()
        };
        Some(signed_labels(&stacked))
    } else {
        None
    };
    let g = signed_distance(spec.metric, w, &x, y.as_deref())?;
    groups
        .iter()
        .map(|grp| {
            let gs = DVector::from_iterator(grp.rows.len(), grp.rows.iter().map(|&i| g[i]));
            let zs: Vec<u8> = grp.rows.iter().map(|&i| z[i]).collect();
            Ok((constraint_value(&gs, &zs)?, grp.threshold))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiscriminationReport {
    pub metric: Metric,
    pub gamma0: f64,
    pub gamma1: f64,
    pub level: f64,
}

/// Per-group rates and their absolute difference. Disparate impact uses
/// `Pr(ŷ=1 | z)`; OMR, FPR and FNR use the misclassification rate conditioned
/// on the group (and on `y=0` or `y=1` for FPR and FNR).
pub fn discrimination_level(metric: Metric, y_hat: &[u8], y_true: &[u8], z: &[u8]) -> Result<DiscriminationReport> {
    if y_hat.len() != z.len() || (metric.is_mistreatment() && y_true.len() != z.len()) {
        return Err(FairError::Dimension(format!(
            "{} predictions, {} labels, {} groups",
            y_hat.len(),
            y_true.len(),
            z.len()
        )));
    }
    let mut hits = [0usize; 2];
    let mut totals = [0usize; 2];
    for i in 0..z.len() {
        let g = z[i] as usize;
        let (counted, hit) = match metric {
            Metric::DisparateImpact => (true, y_hat[i] == 1),
            Metric::Omr => (true, y_hat[i] != y_true[i]),
            Metric::Fpr => (y_true[i] == 0, y_hat[i] == 1),
            Metric::Fnr => (y_true[i] == 1, y_hat[i] == 0),
        };
        if counted {
            totals[g] += 1;
            hits[g] += usize::from(hit);
        }
    }
    for g in 0..2 {
        if totals[g] == 0 {
            let condition = match metric {
                Metric::Fpr => "y=0",
                Metric::Fnr => "y=1",
                _ => "any label",
            };
            return Err(FairError::EmptyCondition {
                group: g as u8,
                condition: condition.into(),
            });
        }
    }
    let gamma0 = hits[0] as f64 / totals[0] as f64;
    let gamma1 = hits[1] as f64 / totals[1] as f64;
    Ok(DiscriminationReport {
        metric,
        gamma0,
        gamma1,
        level: (gamma0 - gamma1).abs(),
    })
}
