//! Gaussian two-class generators with a binary group attribute and optional
//! group-specific label noise.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::dataset::Dataset;
use crate::error::{FairError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub n_rows: usize,
    pub n_features: usize,
    /// Distance between the two class means along the first feature.
    pub separation: f64,
    /// Shift of the first feature for group z=1 (zero keeps groups symmetric).
    pub group_shift: f64,
    /// Probability that a row belongs to group 1.
    pub p_group1: f64,
    /// Probability of flipping the observed label, per group.
    pub flip_rate: [f64; 2],
    /// When set, rows are pushed at least this far from the class boundary
    /// along the first feature, making the clean labels separable.
    pub margin: Option<f64>,
    pub seed: u64,
}

impl SyntheticSpec {
    /// Overlapping classes, groups independent of features and labels.
    pub fn symmetric(n_rows: usize, seed: u64) -> Self {
        SyntheticSpec {
            n_rows,
            n_features: 2,
            separation: 2.0,
            group_shift: 0.0,
            p_group1: 0.5,
            flip_rate: [0.0, 0.0],
            margin: None,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    /// Rows carrying the observed (possibly flipped) labels.
    pub dataset: Dataset,
    pub clean_labels: Vec<u8>,
}

pub fn generate(spec: &SyntheticSpec) -> Result<SyntheticData> {
    if spec.n_rows < 2 || spec.n_features == 0 {
        return Err(FairError::InvalidArgument("need at least 2 rows and 1 feature".into()));
    }
    if !(0.0..=1.0).contains(&spec.p_group1) || spec.flip_rate.iter().any(|r| !(0.0..=1.0).contains(r)) {
        return Err(FairError::InvalidArgument("probabilities must lie in [0,1]".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (k, v) = (spec.n_rows, spec.n_features);
    let mut x = DMatrix::zeros(k, v);
    let mut z = Vec::with_capacity(k);
    let mut clean = Vec::with_capacity(k);
    let mut observed = Vec::with_capacity(k);
    for i in 0..k {
        // Alternate the first rows so both groups and classes always occur.
        let zi = if i < 2 { i as u8 } else { u8::from(rng.gen::<f64>() < spec.p_group1) };
        let yi = if i < 4 { (i / 2) as u8 } else { u8::from(rng.gen::<f64>() < 0.5) };
        let sign = 2.0 * yi as f64 - 1.0;
        for j in 0..v {
            x[(i, j)] = rng.sample::<f64, _>(StandardNormal);
        }
        x[(i, 0)] += sign * spec.separation / 2.0;
        if let Some(m) = spec.margin {
            x[(i, 0)] = sign * (m + (x[(i, 0)] * sign).max(0.0));
        }
        x[(i, 0)] += spec.group_shift * zi as f64;
        let flip = rng.gen::<f64>() < spec.flip_rate[zi as usize];
        z.push(zi);
        clean.push(yi);
        observed.push(if flip { 1 - yi } else { yi });
    }
    let names = (0..v).map(|j| format!("x{j}")).collect();
    Ok(SyntheticData {
        dataset: Dataset::new(x, z, Some(observed), names)?,
        clean_labels: clean,
    })
}
