//! Resampling baselines that equalize the four (group, class) cells of the
//! labeled set.

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::Dataset;
use crate::error::{FairError, Result};
use crate::losses::{design_matrix, predict, Model};
use crate::solver::{solve_w_unconstrained, SolverConfig, TrainingRows};

/// Row indices of each cell, indexed `[z][y]`, in original order.
fn cells(labeled: &Dataset) -> Result<[[Vec<usize>; 2]; 2]> {
    let y = labeled.require_labels()?;
    let mut out: [[Vec<usize>; 2]; 2] = Default::default();
    for (i, (&zi, &yi)) in labeled.sensitive().iter().zip(y).enumerate() {
        out[zi as usize][yi as usize].push(i);
    }
    for (z, row) in out.iter().enumerate() {
        for (y, cell) in row.iter().enumerate() {
            if cell.is_empty() {
                return Err(FairError::EmptyCondition {
                    group: z as u8,
                    condition: format!("y={y}"),
                });
            }
        }
    }
    Ok(out)
}

/// Size every cell is resampled to.
pub fn cell_target(n_rows: usize) -> usize {
    (n_rows as f64 / 4.0).round() as usize
}

/// Uniform sampling: cells above target are undersampled without
/// replacement, cells below are topped up by drawing with replacement, and
/// the result is shuffled.
pub fn uniform_sampling(labeled: &Dataset, seed: u64) -> Result<Dataset> {
    let cells = cells(labeled)?;
    let target = cell_target(labeled.n_rows());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = Vec::with_capacity(4 * target);
    for cell in cells.iter().flatten() {
        if cell.len() >= target {
            let mut chosen = index::sample(&mut rng, cell.len(), target).into_vec();
            chosen.sort_unstable();
            picked.extend(chosen.into_iter().map(|j| cell[j]));
        } else {
            picked.extend_from_slice(cell);
            for _ in cell.len()..target {
                picked.push(cell[rng.gen_range(0..cell.len())]);
            }
        }
    }
    picked.shuffle(&mut rng);
    Ok(labeled.select(&picked))
}

/// Preferential sampling: removals drop, and additions duplicate, the rows
/// whose score is closest to 0.5. Ties keep original row order.
pub fn preferential_sampling(labeled: &Dataset, scores: &[f64]) -> Result<Dataset> {
    if scores.len() != labeled.n_rows() {
        return Err(FairError::Dimension(format!(
            "{} scores for {} rows",
            scores.len(),
            labeled.n_rows()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(FairError::NonFinite("ranking scores".into()));
    }
    let cells = cells(labeled)?;
    let target = cell_target(labeled.n_rows());
    let mut picked = Vec::with_capacity(4 * target);
    for cell in cells.iter().flatten() {
        let mut ranked = cell.clone();
        ranked.sort_by(|&a, &b| (scores[a] - 0.5).abs().total_cmp(&(scores[b] - 0.5).abs()));
        if cell.len() >= target {
            let mut kept: Vec<usize> = ranked[cell.len() - target..].to_vec();
            kept.sort_unstable();
            picked.extend(kept);
        } else {
            picked.extend_from_slice(cell);
            picked.extend(ranked.iter().cycle().take(target - cell.len()));
        }
    }
    Ok(labeled.select(&picked))
}

/// Probabilities from an unconstrained logistic fit on `labeled`.
pub fn lr_scores(labeled: &Dataset, cfg: &SolverConfig) -> Result<Vec<f64>> {
    let rows = TrainingRows::labeled(labeled)?;
    let fit = solve_w_unconstrained(Model::Lr, &rows, cfg)?;
    let pred = predict(Model::Lr, &fit.w, &design_matrix(labeled.features()), cfg.threshold)?;
    Ok(pred.scores.iter().copied().collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;

    fn with_cells(sizes: [usize; 4]) -> Dataset {
        let mut z = Vec::new();
        let mut y = Vec::new();
        for (c, &n) in sizes.iter().enumerate() {
            for _ in 0..n {
                z.push((c / 2) as u8);
                y.push((c % 2) as u8);
            }
        }
        let k = z.len();
        let x = DMatrix::from_fn(k, 1, |r, _| r as f64);
        Dataset::new(x, z, Some(y), vec!["id".into()]).unwrap()
    }

    fn cell_counts(d: &Dataset) -> [usize; 4] {
        let mut c = [0; 4];
        for (z, y) in d.sensitive().iter().zip(d.labels().unwrap()) {
            c[(*z as usize) * 2 + *y as usize] += 1;
        }
        c
    }

    fn ids(d: &Dataset) -> Vec<usize> {
        d.features().column(0).iter().map(|&v| v as usize).collect()
    }

    #[test]
    fn balanced_input_is_permuted() {
        let d = with_cells([3, 3, 3, 3]);
        let mut out = ids(&uniform_sampling(&d, 9).unwrap());
        out.sort_unstable();
        assert_eq!(out, (0..12).collect::<Vec<_>>());
        let scores = vec![0.3; 12];
        assert_eq!(ids(&preferential_sampling(&d, &scores).unwrap()), (0..12).collect::<Vec<_>>());
    }

    #[test]
    fn unequal_cells_hit_target() {
        let d = with_cells([10, 10, 10, 2]);
        let out = uniform_sampling(&d, 1).unwrap();
        assert_eq!(cell_counts(&out), [8; 4]);
        assert_eq!(uniform_sampling(&d, 1).unwrap(), out);
        let scores: Vec<f64> = (0..32).map(|i| (i as f64 * 0.37).fract()).collect();
        assert_eq!(cell_counts(&preferential_sampling(&d, &scores).unwrap()), [8; 4]);
    }

    #[test]
    fn missing_cell_rejected() {
        let d = with_cells([4, 4, 4, 0]);
        assert!(matches!(uniform_sampling(&d, 0), Err(FairError::EmptyCondition { group: 1, .. })));
        assert!(preferential_sampling(&d, &[0.5; 12]).is_err());
    }

    #[test]
    fn removal_drops_boundary_closest_point() {
        // 13 rows → target 3; cell (0,0) has 4 rows and loses one.
        let d = with_cells([4, 3, 3, 3]);
        let mut scores = vec![0.9; 13];
        scores[2] = 0.45;
        let out = ids(&preferential_sampling(&d, &scores).unwrap());
        assert!(!out.contains(&2));
        assert_eq!(out.len(), 12);
    }

    #[test]
    fn additions_duplicate_boundary_closest_with_stable_ties() {
        // 14 rows → target 4 (3.5 rounds up); cell (1,1) has 2 rows.
        let d = with_cells([4, 4, 4, 2]);
        let mut scores = vec![0.2; 14];
        scores[12] = 0.6;
        scores[13] = 0.6;
        let out = ids(&preferential_sampling(&d, &scores).unwrap());
        let dupes: Vec<usize> = out.iter().copied().filter(|&i| i >= 12).collect();
        assert_eq!(dupes, vec![12, 13, 12, 13]);
    }
}
