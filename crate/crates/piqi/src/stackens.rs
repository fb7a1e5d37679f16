//! Bagged GPR members over random row/feature subsamples, combined by
//! forward stepwise linear regression on validation predictions.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::gpr::{self, GprModel, KernelParams};
use crate::parallel;

/// Defaults follow random-subspace convention; all are configurable.
pub const DEFAULT_N_MEMBERS: usize = 100;
pub const DEFAULT_ROW_FRACTION: f64 = 0.8;
pub const DEFAULT_FEATURE_FRACTION: f64 = 0.5;
/// Forward selection stops when relative RMSE improvement falls below this.
pub const STOP_REL_IMPROVEMENT: f64 = 1e-4;

#[derive(Debug, Clone, Copy)]
pub struct BagConfig {
    pub n_members: usize,
    pub row_fraction: f64,
    pub feature_fraction: f64,
    pub master_seed: u64,
    pub tune_budget: usize,
    /// Starting point for per-member tuning; `None` uses a data-driven
    /// heuristic. With `tune_budget == 1` this pins the hyperparameters.
    pub init_params: Option<KernelParams>,
}

impl Default for BagConfig {
    fn default() -> Self {
        Self {
            n_members: DEFAULT_N_MEMBERS,
            row_fraction: DEFAULT_ROW_FRACTION,
            feature_fraction: DEFAULT_FEATURE_FRACTION,
            master_seed: 0,
            tune_budget: gpr::DEFAULT_TUNE_BUDGET,
            init_params: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct MemberSpec {
    pub seed: u64,
    pub row_indices: Vec<usize>,
    pub feature_indices: Vec<usize>,
    pub model: GprModel,
    /// Set when the first fit was ill-conditioned and a reseeded refit was kept.
    pub refit_warning: bool,
}

impl MemberSpec {
    /// Predict from a full-width feature vector, touching only this
    /// member's own feature subset.
    pub fn predict(&self, full_x: &[f64]) -> Result<f64> {
        let restricted: Vec<f64> = self
            .feature_indices
            .iter()
            .map(|&j| {
                full_x.get(j).copied().ok_or(Error::FeatureDimension {
                    expected: j + 1,
                    got: full_x.len(),
                })
            })
            .collect::<Result<_>>()?;
        Ok(self.model.predict(&restricted)?.0)
    }
}

#[derive(Debug, Clone)]
pub struct StackedEnsemble {
    pub members: Vec<MemberSpec>,
    /// Member indices in selection order.
    pub selected: Vec<usize>,
    pub intercept: f64,
    /// One weight per selected member, same order.
    pub weights: Vec<f64>,
    /// (member_count, validation RMSE) trajectory, starting at the
    /// intercept-only baseline.
    pub curve: Vec<(usize, f64)>,
    pub feature_dim: usize,
    pub layout_version: String,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Per-member seed derived deterministically from the master seed.
pub fn member_seed(master_seed: u64, member: usize) -> u64 {
    splitmix64(master_seed ^ splitmix64(member as u64 + 1))
}

fn sample_sorted(rng: &mut ChaCha8Rng, population: usize, count: usize) -> Vec<usize> {
    let mut idx = rand::seq::index::sample(rng, population, count).into_vec();
    idx.sort_unstable();
    idx
}

fn fit_member(
    x: &[Vec<f64>],
    y: &[f64],
    cfg: &BagConfig,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>, GprModel)> {
    let n = x.len();
    let d = x[0].len();
    let n_rows = ((cfg.row_fraction * n as f64).ceil() as usize).clamp(2, n);
    let n_feats = ((cfg.feature_fraction * d as f64).ceil() as usize).clamp(1, d);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let row_indices = sample_sorted(&mut rng, n, n_rows);
    let feature_indices = sample_sorted(&mut rng, d, n_feats);
    let sub_x: Vec<Vec<f64>> = row_indices
        .iter()
        .map(|&i| feature_indices.iter().map(|&j| x[i][j]).collect())
        .collect();
    let sub_y: Vec<f64> = row_indices.iter().map(|&i| y[i]).collect();
    let init = cfg
        .init_params
        .map_or_else(|| KernelParams::new((n_feats as f64).sqrt(), 1.0, 0.1), Ok)?;
    let tuned = gpr::tune_hyperparams(&sub_x, &sub_y, init, cfg.tune_budget)?;
    let model = gpr::fit(&sub_x, &sub_y, tuned.params)?;
    Ok((row_indices, feature_indices, model))
}

/// Train the bagged member pool. Members are independent and train in
/// parallel; seeds derive from `master_seed` so output is run-stable.
pub fn bag_train(x: &[Vec<f64>], y: &[f64], cfg: &BagConfig, jobs: usize) -> Result<Vec<MemberSpec>> {
    if x.len() < 10 {
        return Err(Error::InsufficientSamples {
            need: 10,
            got: x.len(),
        });
    }
    if x.len() != y.len() {
        return Err(Error::FeatureDimension {
            expected: x.len(),
            got: y.len(),
        });
    }
    for frac in [cfg.row_fraction, cfg.feature_fraction] {
        if !(frac > 0.0 && frac <= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "fractions must lie in (0, 1], got {frac}"
            )));
        }
    }
    if cfg.n_members == 0 {
        return Err(Error::InvalidParameter("n_members must be >= 1".into()));
    }
    let member_ids: Vec<usize> = (0..cfg.n_members).collect();
    let results = parallel::map_indexed(&member_ids, jobs, |_, &m| -> Result<MemberSpec> {
        let seed = member_seed(cfg.master_seed, m);
        match fit_member(x, y, cfg, seed) {
            Ok((row_indices, feature_indices, model)) => Ok(MemberSpec {
                seed,
                row_indices,
                feature_indices,
                model,
                refit_warning: false,
            }),
            Err(Error::IllConditioned) => {
                // one reseeded retry, kept with a warning
                let fresh = splitmix64(seed);
                let (row_indices, feature_indices, model) = fit_member(x, y, cfg, fresh)?;
                Ok(MemberSpec {
                    seed: fresh,
                    row_indices,
                    feature_indices,
                    model,
                    refit_warning: true,
                })
            }
            Err(e) => Err(e),
        }
    });
    results.into_iter().collect()
}

/// Ordinary least squares of `y ~ intercept + columns`, via the normal
/// equations; `None` signals rank deficiency.
fn ols(columns: &[&[f64]], y: &[f64]) -> Option<(f64, Vec<f64>, f64)> {
    let v = y.len();
    let k = columns.len();
    let a = DMatrix::from_fn(v, k + 1, |i, j| if j == 0 { 1.0 } else { columns[j - 1][i] });
    let yv = DVector::from_column_slice(y);
    let ata = a.transpose() * &a;
    let aty = a.transpose() * &yv;
    let chol = Cholesky::new(ata)?;
    let coef = chol.solve(&aty);
    let resid = &a * &coef - &yv;
    let rmse = (resid.norm_squared() / v as f64).sqrt();
    let intercept = coef[0];
    let weights = coef.iter().skip(1).cloned().collect();
    Some((intercept, weights, rmse))
}

/// Forward stepwise selection over member predictions on the validation
/// set, with a full OLS refit at every step.
pub fn stepwise_stack(
    members: Vec<MemberSpec>,
    x_val: &[Vec<f64>],
    y_val: &[f64],
    layout_version: &str,
) -> Result<StackedEnsemble> {
    if x_val.len() < 5 {
        return Err(Error::InsufficientSamples {
            need: 5,
            got: x_val.len(),
        });
    }
    if x_val.len() != y_val.len() {
        return Err(Error::FeatureDimension {
            expected: x_val.len(),
            got: y_val.len(),
        });
    }
    let feature_dim = x_val[0].len();
    let v = y_val.len();
    // validation prediction matrix, column per member
    let preds: Vec<Vec<f64>> = members
        .iter()
        .map(|m| x_val.iter().map(|row| m.predict(row)).collect::<Result<_>>())
        .collect::<Result<_>>()?;

    let mean_y = y_val.iter().sum::<f64>() / v as f64;
    let baseline_rmse =
        (y_val.iter().map(|t| (t - mean_y).powi(2)).sum::<f64>() / v as f64).sqrt();
    let mut curve = vec![(0usize, baseline_rmse)];
    let mut selected: Vec<usize> = Vec::new();
    let mut intercept = mean_y;
    let mut weights: Vec<f64> = Vec::new();
    let mut current_rmse = baseline_rmse;

    loop {
        let mut best: Option<(usize, f64, Vec<f64>, f64)> = None;
        for cand in 0..members.len() {
            if selected.contains(&cand) {
                continue;
            }
            let cols: Vec<&[f64]> = selected
                .iter()
                .chain(std::iter::once(&cand))
                .map(|&i| preds[i].as_slice())
                .collect();
            let Some((b0, w, rmse)) = ols(&cols, y_val) else {
                continue; // rank-deficient refit: candidate skipped this step
            };
            if best.as_ref().map_or(true, |(_, _, _, r)| rmse < *r) {
                best = Some((cand, b0, w, rmse));
            }
        }
        let Some((cand, b0, w, rmse)) = best else {
            break;
        };
        if rmse >= current_rmse {
            break;
        }
        // the first member is always worth at least a weighted passthrough;
        // apply the plateau rule from the second step on
        if !selected.is_empty() {
            let rel = (current_rmse - rmse) / current_rmse.max(f64::MIN_POSITIVE);
            if current_rmse < 1e-12 || rel < STOP_REL_IMPROVEMENT {
                break;
            }
        }
        selected.push(cand);
        intercept = b0;
        weights = w;
        current_rmse = rmse;
        curve.push((selected.len(), rmse));
        if selected.len() == members.len() {
            break;
        }
    }

    Ok(StackedEnsemble {
        members,
        selected,
        intercept,
        weights,
        curve,
        feature_dim,
        layout_version: layout_version.to_string(),
    })
}

/// Weighted combination of the selected members' predictions.
pub fn ensemble_predict(e: &StackedEnsemble, x: &[f64]) -> Result<f64> {
    if x.len() != e.feature_dim {
        return Err(Error::FeatureDimension {
            expected: e.feature_dim,
            got: x.len(),
        });
    }
    let mut score = e.intercept;
    for (&idx, &w) in e.selected.iter().zip(&e.weights) {
        score += w * e.members[idx].predict(x)?;
    }
    Ok(score)
}

/// The recorded forward-selection trajectory (baseline first).
pub fn convergence_curve(e: &StackedEnsemble) -> &[(usize, f64)] {
    &e.curve
}

#[cfg(test)]
mod tests {
    use super::*;

    fn synthetic_data(n: usize, d: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<f64>) {
        let mut state = seed;
        let mut next = move || {
            state = state
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            (state >> 11) as f64 / (1u64 << 53) as f64
        };
        let x: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| next()).collect()).collect();
        let y: Vec<f64> = x
            .iter()
            .map(|row| row.iter().enumerate().map(|(j, v)| v * (j + 1) as f64).sum::<f64>() / d as f64)
            .collect();
        (x, y)
    }

    fn small_cfg(seed: u64, n_members: usize) -> BagConfig {
        BagConfig {
            n_members,
            row_fraction: 0.8,
            feature_fraction: 0.6,
            master_seed: seed,
            tune_budget: 3,
            init_params: None,
        }
    }

    #[test]
    fn bag_member_count_and_determinism() {
        let (x, y) = synthetic_data(20, 5, 11);
        let cfg = small_cfg(42, 4);
        let a = bag_train(&x, &y, &cfg, 1).unwrap();
        let b = bag_train(&x, &y, &cfg, 4).unwrap();
        assert_eq!(a.len(), 4);
        for (ma, mb) in a.iter().zip(&b) {
            assert_eq!(ma.seed, mb.seed);
            assert_eq!(ma.row_indices, mb.row_indices);
            assert_eq!(ma.feature_indices, mb.feature_indices);
            let q = vec![0.5; 5];
            assert_eq!(ma.predict(&q).unwrap(), mb.predict(&q).unwrap());
        }
    }

    #[test]
    fn bag_full_fractions_degenerate() {
        let (x, y) = synthetic_data(12, 4, 3);
        let cfg = BagConfig {
            n_members: 2,
            row_fraction: 1.0,
            feature_fraction: 1.0,
            master_seed: 9,
            tune_budget: 1,
            init_params: None,
        };
        let members = bag_train(&x, &y, &cfg, 1).unwrap();
        assert_eq!(members[0].row_indices, (0..12).collect::<Vec<_>>());
        assert_eq!(members[0].feature_indices, (0..4).collect::<Vec<_>>());
        assert_eq!(members[1].row_indices, members[0].row_indices);
    }

    #[test]
    fn bag_rejects_bad_config() {
        let (x, y) = synthetic_data(20, 4, 1);
        let mut cfg = small_cfg(1, 2);
        cfg.row_fraction = 0.0;
        assert!(bag_train(&x, &y, &cfg, 1).is_err());
        let (tiny_x, tiny_y) = synthetic_data(5, 4, 1);
        assert!(bag_train(&tiny_x, &tiny_y, &small_cfg(1, 2), 1).is_err());
    }

    #[test]
    fn member_ignores_excluded_features() {
        let (x, y) = synthetic_data(20, 8, 5);
        let cfg = BagConfig {
            feature_fraction: 0.4,
            ..small_cfg(7, 3)
        };
        let members = bag_train(&x, &y, &cfg, 1).unwrap();
        for m in &members {
            assert!(m.feature_indices.len() < 8);
            let mut probe = vec![0.3; 8];
            let base = m.predict(&probe).unwrap();
            for j in 0..8 {
                if !m.feature_indices.contains(&j) {
                    probe[j] = 123.0;
                }
            }
            assert_eq!(m.predict(&probe).unwrap(), base);
        }
    }

    #[test]
    fn stack_selects_planted_perfect_member() {
        let (x, y) = synthetic_data(30, 6, 21);
        let cfg = small_cfg(77, 6);
        let mut members = bag_train(&x[..20], &y[..20], &cfg, 1).unwrap();
        // plant a member trained on the validation relation itself
        let plant = gpr::fit(
            &x[20..].to_vec(),
            &y[20..],
            KernelParams::new(2.0, 1.0, gpr::NOISE_FLOOR).unwrap(),
        )
        .unwrap();
        members.push(MemberSpec {
            seed: 0,
            row_indices: (20..30).collect(),
            feature_indices: (0..6).collect(),
            model: plant,
            refit_warning: false,
        });
        let planted_idx = members.len() - 1;
        let e = stepwise_stack(members, &x[20..].to_vec(), &y[20..], "test").unwrap();
        assert_eq!(e.selected[0], planted_idx);
        assert!((e.weights[0] - 1.0).abs() < 1e-3, "weight {}", e.weights[0]);
        assert!(e.intercept.abs() < 1e-3);
    }

    #[test]
    fn stack_identical_members_collapse() {
        let (x, y) = synthetic_data(25, 4, 13);
        let cfg = BagConfig {
            row_fraction: 1.0,
            feature_fraction: 1.0,
            tune_budget: 1,
            ..small_cfg(3, 5)
        };
        let members = bag_train(&x[..15], &y[..15], &cfg, 1).unwrap();
        let e = stepwise_stack(members, &x[15..].to_vec(), &y[15..], "test").unwrap();
        assert_eq!(e.selected.len(), 1);
    }

    #[test]
    fn curve_monotone_and_bookkeeping() {
        let (x, y) = synthetic_data(40, 6, 31);
        let cfg = small_cfg(5, 8);
        let members = bag_train(&x[..28], &y[..28], &cfg, 1).unwrap();
        let e = stepwise_stack(members, &x[28..].to_vec(), &y[28..], "test").unwrap();
        let curve = convergence_curve(&e);
        assert_eq!(curve.len(), e.selected.len() + 1);
        for w in curve.windows(2) {
            assert!(w[1].1 <= w[0].1);
        }
        // final curve value equals the stacked validation RMSE
        let preds: Vec<f64> = x[28..]
            .iter()
            .map(|row| ensemble_predict(&e, row).unwrap())
            .collect();
        let rmse = (preds
            .iter()
            .zip(&y[28..])
            .map(|(p, t)| (p - t) * (p - t))
            .sum::<f64>()
            / preds.len() as f64)
            .sqrt();
        assert!((curve.last().unwrap().1 - rmse).abs() < 1e-9);
    }

    #[test]
    fn stacked_no_worse_than_best_member() {
        for seed in [1u64, 2, 3] {
            let (x, y) = synthetic_data(40, 5, seed * 100);
            let cfg = small_cfg(seed, 6);
            let members = bag_train(&x[..28], &y[..28], &cfg, 1).unwrap();
            let x_val = x[28..].to_vec();
            let y_val = &y[28..];
            let best_member_rmse = members
                .iter()
                .map(|m| {
                    let se: f64 = x_val
                        .iter()
                        .zip(y_val)
                        .map(|(row, t)| {
                            let p = m.predict(row).unwrap();
                            (p - t) * (p - t)
                        })
                        .sum();
                    (se / y_val.len() as f64).sqrt()
                })
                .fold(f64::INFINITY, f64::min);
            let e = stepwise_stack(members, &x_val, y_val, "test").unwrap();
            let stacked = convergence_curve(&e).last().unwrap().1;
            assert!(
                stacked <= best_member_rmse + 1e-12,
                "{stacked} vs {best_member_rmse}"
            );
        }
    }

    #[test]
    fn ensemble_predict_manual_combination() {
        let (x, y) = synthetic_data(20, 4, 17);
        let cfg = small_cfg(23, 3);
        let members = bag_train(&x[..14], &y[..14], &cfg, 1).unwrap();
        let e = stepwise_stack(members, &x[14..].to_vec(), &y[14..], "test").unwrap();
        let q = &x[0];
        let mut manual = e.intercept;
        for (&idx, &w) in e.selected.iter().zip(&e.weights) {
            manual += w * e.members[idx].predict(q).unwrap();
        }
        let got = ensemble_predict(&e, q).unwrap();
        assert!((got - manual).abs() < 1e-12);
    }

    #[test]
    fn ensemble_predict_dimension_check() {
        let (x, y) = synthetic_data(20, 4, 19);
        let cfg = small_cfg(29, 2);
        let members = bag_train(&x[..14], &y[..14], &cfg, 1).unwrap();
        let e = stepwise_stack(members, &x[14..].to_vec(), &y[14..], "test").unwrap();
        assert!(ensemble_predict(&e, &[0.0; 3]).is_err());
    }
}
