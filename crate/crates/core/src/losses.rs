//! Logistic and hinge losses, their derivatives, and predictions.
//!
//! All functions take a design matrix whose last column is the constant 1
//! (see [`design_matrix`]); the last entry of the weight vector is therefore
//! the intercept.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{FairError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Model {
    /// Logistic regression with summed cross-entropy.
    Lr,
    /// Linear SVM with averaged hinge loss.
    Svm,
}

impl std::str::FromStr for Model {
    type Err = FairError;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "lr" | "logistic" => Ok(Model::Lr),
            "svm" => Ok(Model::Svm),
            other => Err(FairError::Config(format!("unknown model `{other}`"))),
        }
    }
}

/// Classifier weights; the last entry is the intercept.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams(pub DVector<f64>);

impl ModelParams {
    pub fn zeros(n_features: usize) -> Self {
        ModelParams(DVector::zeros(n_features + 1))
    }

    pub fn new(w: DVector<f64>) -> Result<Self> {
        if w.iter().any(|v| !v.is_finite()) {
            return Err(FairError::NonFinite("model weights".into()));
        }
        Ok(ModelParams(w))
    }

    pub fn as_vector(&self) -> &DVector<f64> {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn intercept(&self) -> f64 {
        self.0[self.0.len() - 1]
    }
}

/// Appends the constant intercept column.
pub fn design_matrix(features: &DMatrix<f64>) -> DMatrix<f64> {
    let (k, v) = features.shape();
    DMatrix::from_fn(k, v + 1, |r, c| if c < v { features[(r, c)] } else { 1.0 })
}

/// Maps {0,1} labels to {-1,+1}.
pub fn signed_labels(y: &[u8]) -> Vec<f64> {
    y.iter().map(|&v| 2.0 * v as f64 - 1.0).collect()
}

pub fn labels_as_f64(y: &[u8]) -> Vec<f64> {
    y.iter().map(|&v| v as f64).collect()
}

fn check_dims(w: &ModelParams, x: &DMatrix<f64>, n_labels: usize) -> Result<()> {
    if x.ncols() != w.len() {
        return Err(FairError::Dimension(format!(
            "design has {} columns, weights have {}",
            x.ncols(),
            w.len()
        )));
    }
    if x.nrows() != n_labels {
        return Err(FairError::Dimension(format!(
            "design has {} rows, {} labels",
            x.nrows(),
            n_labels
        )));
    }
    Ok(())
}

/// ln(1 + e^m) without overflow.
pub(crate) fn softplus(m: f64) -> f64 {
    if m > 0.0 {
        m + (-m).exp().ln_1p()
    } else {
        m.exp().ln_1p()
    }
}

pub(crate) fn sigmoid(m: f64) -> f64 {
    if m >= 0.0 {
        1.0 / (1.0 + (-m).exp())
    } else {
        let e = m.exp();
        e / (1.0 + e)
    }
}

/// Per-row loss of a logistic model at margin `m` against a soft label `y`.
pub(crate) fn lr_row_loss(m: f64, y: f64) -> f64 {
    // -y ln p - (1-y) ln(1-p) with ln p = -softplus(-m), ln(1-p) = -softplus(m)
    y * softplus(-m) + (1.0 - y) * softplus(m)
}

/// Summed cross-entropy and its gradient `Xᵀ(p - y)`. Labels may be soft
/// values in [0,1].
pub fn lr_loss_grad(w: &ModelParams, x: &DMatrix<f64>, y: &[f64]) -> Result<(f64, DVector<f64>)> {
    check_dims(w, x, y.len())?;
    let margins = x * &w.0;
    let mut loss = 0.0;
    let mut resid = DVector::zeros(y.len());
    for (i, (&m, &yi)) in margins.iter().zip(y).enumerate() {
        loss += lr_row_loss(m, yi);
        resid[i] = sigmoid(m) - yi;
    }
    Ok((loss, x.transpose() * resid))
}

/// `Xᵀ diag(p(1-p)) X`.
pub fn lr_hessian(w: &ModelParams, x: &DMatrix<f64>) -> DMatrix<f64> {
    let margins = x * &w.0;
    let weights = margins.map(|m| {
        let p = sigmoid(m);
        p * (1.0 - p)
    });
    let mut scaled = x.clone();
    for (i, mut row) in scaled.row_iter_mut().enumerate() {
        row *= weights[i];
    }
    x.transpose() * scaled
}

/// `(1/K) Σ max(0, 1 - y·wᵀx)` with labels in {-1,+1} and a subgradient.
/// Rows sitting exactly on the hinge contribute nothing to the subgradient.
pub fn svm_loss_subgrad(
    w: &ModelParams,
    x: &DMatrix<f64>,
    y: &[f64],
) -> Result<(f64, DVector<f64>)> {
    check_dims(w, x, y.len())?;
    let k = y.len().max(1) as f64;
    let margins = x * &w.0;
    let mut loss = 0.0;
    let mut coef = DVector::zeros(y.len());
    for (i, (&m, &yi)) in margins.iter().zip(y).enumerate() {
        let slack = 1.0 - yi * m;
        if slack > 0.0 {
            loss += slack;
            coef[i] = -yi;
        }
    }
    Ok((loss / k, x.transpose() * coef / k))
}

/// Hinge loss for soft labels, interpolating between the two hard labels.
pub(crate) fn svm_row_loss(m: f64, y: f64, k: f64) -> f64 {
    (y * (1.0 - m).max(0.0) + (1.0 - y) * (1.0 + m).max(0.0)) / k
}

/// Classifier loss over all rows for soft labels in [0,1].
pub fn classifier_loss(model: Model, w: &ModelParams, x: &DMatrix<f64>, y: &[f64]) -> Result<f64> {
    check_dims(w, x, y.len())?;
    let margins = x * &w.0;
    let k = y.len().max(1) as f64;
    Ok(match model {
        Model::Lr => margins.iter().zip(y).map(|(&m, &yi)| lr_row_loss(m, yi)).sum(),
        Model::Svm => margins
            .iter()
            .zip(y)
            .map(|(&m, &yi)| svm_row_loss(m, yi, k))
            .sum(),
    })
}

/// Derivative of the classifier loss with respect to each row's soft label.
/// Both losses are affine in the label, so this depends only on the margin.
pub fn label_derivative(model: Model, margins: &DVector<f64>, k_total: usize) -> DVector<f64> {
    let k = k_total.max(1) as f64;
    match model {
        // ln((1-p)/p) = -m
        Model::Lr => margins.map(|m| softplus(-m) - softplus(m)),
        Model::Svm => margins.map(|m| ((1.0 - m).max(0.0) - (1.0 + m).max(0.0)) / k),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    /// Probabilities (LR) or margins (SVM).
    pub scores: DVector<f64>,
    pub labels: Vec<u8>,
}

/// LR labels are `p ≥ T`; SVM labels are `margin ≥ 0`.
pub fn predict(model: Model, w: &ModelParams, x: &DMatrix<f64>, threshold: f64) -> Result<Prediction> {
    if x.ncols() != w.len() {
        return Err(FairError::Dimension(format!(
            "design has {} columns, weights have {}",
            x.ncols(),
            w.len()
        )));
    }
    let margins = x * &w.0;
    let (scores, labels) = match model {
        Model::Lr => {
            let p = margins.map(sigmoid);
            let labels = p.iter().map(|&v| u8::from(v >= threshold)).collect();
            (p, labels)
        }
        Model::Svm => {
            let labels = margins.iter().map(|&m| u8::from(m >= 0.0)).collect();
            (margins, labels)
        }
    };
    Ok(Prediction { scores, labels })
}
