//! Bootstrap estimate of the per-group bias, variance and noise of the
//! zero-one loss, and the mislabel rates of propagated labels.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::dataset::Dataset;
use crate::error::{FairError, Result};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DecompositionReport {
    /// Share of group-z points whose main prediction misses the optimal label.
    pub bias: [f64; 2],
    /// Signed variance: `+` where the main prediction is right, `-` where wrong.
    pub variance: [f64; 2],
    /// Unsigned disagreement with the main prediction.
    pub variance_raw: [f64; 2],
    /// Label-noise rate; zero unless clean labels were supplied.
    pub noise: [f64; 2],
    /// Mean zero-one error against the observed labels across resamples.
    pub error: [f64; 2],
    pub level_decomposed: f64,
    pub n_bootstrap: usize,
    pub main_predictions: Vec<u8>,
    /// Clean labels were supplied, so noise was estimated.
    pub synthetic: bool,
}

/// Trains on `train`, predicts `eval`. The seed varies per resample.
pub trait Trainer: Fn(&Dataset, &Dataset, u64) -> Result<Vec<u8>> + Sync {}
impl<F> Trainer for F where F: Fn(&Dataset, &Dataset, u64) -> Result<Vec<u8>> + Sync {}

/// Trains `trainer` on `n_bootstrap` resamples (with replacement, pool size)
/// of `pool` and decomposes its error on `eval`. Resample `b` uses seed
/// `seed + b`. With `clean_labels`, those act as the optimal labels and the
/// observed eval labels carry the noise; otherwise the observed labels are
/// taken as optimal and noise is zero.
pub fn estimate_decomposition<T: Trainer>(
    trainer: &T,
    pool: &Dataset,
    eval: &Dataset,
    n_bootstrap: usize,
    seed: u64,
    clean_labels: Option<&[u8]>,
) -> Result<DecompositionReport> {
    if n_bootstrap < 2 {
        return Err(FairError::InvalidArgument("need at least 2 bootstrap resamples".into()));
    }
    if pool.n_rows() == 0 {
        return Err(FairError::Empty("bootstrap pool".into()));
    }
    let observed = eval.require_labels()?;
    if let Some(clean) = clean_labels {
        if clean.len() != observed.len() {
            return Err(FairError::Dimension("clean labels do not match eval rows".into()));
        }
    }
    let z = eval.sensitive();
    for g in 0..2u8 {
        if !z.contains(&g) {
            return Err(FairError::EmptyCondition {
                group: g,
                condition: "eval rows".into(),
            });
        }
    }
    let k = pool.n_rows();
    let predictions: Vec<Vec<u8>> = (0..n_bootstrap)
        .into_par_iter()
        .map(|b| {
            let s = seed.wrapping_add(b as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let idx: Vec<usize> = (0..k).map(|_| rng.gen_range(0..k)).collect();
            let pred = trainer(&pool.select(&idx), eval, s)?;
            if pred.len() != eval.n_rows() {
                return Err(FairError::Dimension("trainer returned wrong prediction count".into()));
            }
            Ok(pred)
        })
        .collect::<Result<_>>()?;
    Ok(decompose(&predictions, observed, clean_labels, z))
}

/// Decomposes a fixed set of per-resample predictions.
pub fn decompose(predictions: &[Vec<u8>], observed: &[u8], clean: Option<&[u8]>, z: &[u8]) -> DecompositionReport {
    let n_b = predictions.len();
    let n = observed.len();
    let optimal = clean.unwrap_or(observed);
    let mut main = Vec::with_capacity(n);
    let mut sums = [[0.0f64; 5]; 2];
    let mut counts = [0usize; 2];
    for i in 0..n {
        let ones = predictions.iter().filter(|p| p[i] == 1).count();
        // Ties go to label 1.
        let ym = u8::from(2 * ones >= n_b);
        main.push(ym);
        let disagree = predictions.iter().filter(|p| p[i] != ym).count() as f64 / n_b as f64;
        let wrong = predictions.iter().filter(|p| p[i] != observed[i]).count() as f64 / n_b as f64;
        let bias = f64::from(u8::from(ym != optimal[i]));
        let sign = if ym == optimal[i] { 1.0 } else { -1.0 };
        let noise = f64::from(u8::from(optimal[i] != observed[i]));
        let g = z[i] as usize;
        counts[g] += 1;
        for (slot, v) in sums[g].iter_mut().zip([bias, sign * disagree, disagree, noise, wrong]) {
            *slot += v;
        }
    }
    let mean = |g: usize, j: usize| if counts[g] == 0 { 0.0 } else { sums[g][j] / counts[g] as f64 };
    let pick = |j: usize| [mean(0, j), mean(1, j)];
    let (bias, variance, variance_raw, noise, error) = (pick(0), pick(1), pick(2), pick(3), pick(4));
    let level_decomposed = ((bias[0] - bias[1]) + (variance[0] - variance[1]) + (noise[0] - noise[1])).abs();
    DecompositionReport {
        bias,
        variance,
        variance_raw,
        noise,
        error,
        level_decomposed,
        n_bootstrap: n_b,
        main_predictions: main,
        synthetic: clean.is_some(),
    }
}

/// Mislabel rates of propagated labels, indexed `[y][z]`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UnlabeledNoise {
    /// `Pr(ŷ ≠ y | y, z)`; `None` when no row has that `(y, z)`.
    pub rates: [[Option<f64>; 2]; 2],
    /// `|N_1 - N_0|` with `N_z` the sum of the present rates of group z.
    pub gap: f64,
    /// Some `(y, z)` cell was empty and left out of `gap`.
    pub incomplete: bool,
}

pub fn noise_terms_unlabeled(y_u: &[u8], truth: &[u8], z: &[u8]) -> Result<UnlabeledNoise> {
    if y_u.len() != truth.len() || truth.len() != z.len() {
        return Err(FairError::Dimension(format!(
            "{} propagated labels, {} true labels, {} groups",
            y_u.len(),
            truth.len(),
            z.len()
        )));
    }
    let mut wrong = [[0usize; 2]; 2];
    let mut total = [[0usize; 2]; 2];
    for i in 0..z.len() {
        let (y, g) = (truth[i] as usize, z[i] as usize);
        total[y][g] += 1;
        wrong[y][g] += usize::from(y_u[i] != truth[i]);
    }
    let mut rates = [[None; 2]; 2];
    let mut per_group = [0.0; 2];
    let mut incomplete = false;
    for y in 0..2 {
        for g in 0..2 {
            if total[y][g] == 0 {
                incomplete = true;
            } else {
                let r = wrong[y][g] as f64 / total[y][g] as f64;
                rates[y][g] = Some(r);
                per_group[g] += r;
            }
        }
    }
    Ok(UnlabeledNoise {
        rates,
        gap: (per_group[1] - per_group[0]).abs(),
        incomplete,
    })
}
