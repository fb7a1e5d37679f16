//! Correlation and error metrics, the repeated 70/15/15 split protocol
//! with median reporting, residual diagnostics, cross-dataset evaluation
//! and one-sided significance testing.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};

use crate::error::{Error, Result};
use crate::gpr::{self, KernelParams};
use crate::parallel;
use crate::stackens::{self, BagConfig, StackedEnsemble};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricReport {
    pub r2: f64,
    pub rmse: f64,
    pub plcc: f64,
    pub srocc: f64,
    pub krocc: f64,
    pub n: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitMode {
    RandomByImage,
    GroupByReference,
}

impl std::str::FromStr for SplitMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "random" => Ok(SplitMode::RandomByImage),
            "group" => Ok(SplitMode::GroupByReference),
            other => Err(format!("split mode must be 'random' or 'group', got '{other}'")),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SplitPlan {
    pub train_idx: Vec<usize>,
    pub val_idx: Vec<usize>,
    pub test_idx: Vec<usize>,
    pub seed: u64,
    pub mode: SplitMode,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn check_lengths(x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::FeatureDimension {
            expected: x.len(),
            got: y.len(),
        });
    }
    if x.len() < 2 {
        return Err(Error::InsufficientSamples {
            need: 2,
            got: x.len(),
        });
    }
    Ok(())
}

/// Pearson linear correlation.
pub fn plcc(x: &[f64], y: &[f64]) -> Result<f64> {
    check_lengths(x, y)?;
    let (mx, my) = (mean(x), mean(y));
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 {
        return Err(Error::ZeroVariance("first argument".into()));
    }
    if syy == 0.0 {
        return Err(Error::ZeroVariance("second argument".into()));
    }
    Ok(sxy / (sxx.sqrt() * syy.sqrt()))
}

pub fn rmse(x: &[f64], y: &[f64]) -> Result<f64> {
    check_lengths(x, y)?;
    let sse: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok((sse / x.len() as f64).sqrt())
}

/// Coefficient of determination of predictions `x` against truth `y`.
pub fn r2(x: &[f64], y: &[f64]) -> Result<f64> {
    check_lengths(x, y)?;
    let my = mean(y);
    let sst: f64 = y.iter().map(|v| (v - my) * (v - my)).sum();
    if sst == 0.0 {
        return Err(Error::ZeroVariance("truth".into()));
    }
    let sse: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(1.0 - sse / sst)
}

/// Average ranks with ties sharing their mean rank.
fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let n = xs.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| xs[a].partial_cmp(&xs[b]).expect("finite values"));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank-order correlation: Pearson on average ranks.
pub fn srocc(x: &[f64], y: &[f64]) -> Result<f64> {
    check_lengths(x, y)?;
    plcc(&average_ranks(x), &average_ranks(y)).map_err(|e| match e {
        Error::ZeroVariance(_) => Error::ZeroVariance("all-tied input".into()),
        other => other,
    })
}

/// Kendall tau-b (tie-corrected), O(n^2) pairwise scan.
pub fn krocc(x: &[f64], y: &[f64]) -> Result<f64> {
    check_lengths(x, y)?;
    let n = x.len();
    let mut concordant = 0i64;
    let mut discordant = 0i64;
    let mut ties_x = 0i64;
    let mut ties_y = 0i64;
    for i in 0..n {
        for j in i + 1..n {
            let dx = (x[i] - x[j]).partial_cmp(&0.0).expect("finite values");
            let dy = (y[i] - y[j]).partial_cmp(&0.0).expect("finite values");
            use std::cmp::Ordering::*;
            match (dx, dy) {
                (Equal, Equal) => {}
                (Equal, _) => ties_x += 1,
                (_, Equal) => ties_y += 1,
                (a, b) if a == b => concordant += 1,
                _ => discordant += 1,
            }
        }
    }
    let denom_x = (concordant + discordant + ties_x) as f64;
    let denom_y = (concordant + discordant + ties_y) as f64;
    if denom_x == 0.0 || denom_y == 0.0 {
        return Err(Error::ZeroVariance("all-tied input".into()));
    }
    Ok((concordant - discordant) as f64 / (denom_x * denom_y).sqrt())
}

/// Build one metric report from predictions against truth.
pub fn metric_report(predictions: &[f64], truth: &[f64]) -> Result<MetricReport> {
    Ok(MetricReport {
        r2: r2(predictions, truth)?,
        rmse: rmse(predictions, truth)?,
        plcc: plcc(predictions, truth)?,
        srocc: srocc(predictions, truth)?,
        krocc: krocc(predictions, truth)?,
        n: truth.len(),
    })
}

/// Seeded shuffle then 70/15/15 partition; in group mode every index
/// sharing a label lands in one partition.
pub fn make_splits(
    n: usize,
    groups: Option<&[usize]>,
    seed: u64,
    mode: SplitMode,
) -> Result<SplitPlan> {
    if n < 10 {
        return Err(Error::InsufficientSamples { need: 10, got: n });
    }
    let n_train = (0.70 * n as f64).round() as usize;
    let n_val = (0.15 * n as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (train_idx, val_idx, test_idx) = match mode {
        SplitMode::RandomByImage => {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(&mut rng);
            let train = idx[..n_train].to_vec();
            let val = idx[n_train..n_train + n_val].to_vec();
            let test = idx[n_train + n_val..].to_vec();
            (train, val, test)
        }
        SplitMode::GroupByReference => {
            let groups = groups.ok_or_else(|| {
                Error::InvalidParameter("group split mode requires group labels".into())
            })?;
            if groups.len() != n {
                return Err(Error::FeatureDimension {
                    expected: n,
                    got: groups.len(),
                });
            }
            let mut by_group: Vec<(usize, Vec<usize>)> = Vec::new();
            for (i, &g) in groups.iter().enumerate() {
                match by_group.iter_mut().find(|(label, _)| *label == g) {
                    Some((_, members)) => members.push(i),
                    None => by_group.push((g, vec![i])),
                }
            }
            if let Some((label, members)) = by_group
                .iter()
                .find(|(_, m)| m.len() as f64 > 0.70 * n as f64)
            {
                return Err(Error::InvalidParameter(format!(
                    "group {label} holds {} of {n} samples, larger than the train partition",
                    members.len()
                )));
            }
            by_group.shuffle(&mut rng);
            let mut train = Vec::new();
            let mut val = Vec::new();
            let mut test = Vec::new();
            for (_, members) in by_group {
                if train.len() < n_train {
                    train.extend(members);
                } else if val.len() < n_val {
                    val.extend(members);
                } else {
                    test.extend(members);
                }
            }
            (train, val, test)
        }
    };
    if train_idx.is_empty() || val_idx.is_empty() || test_idx.is_empty() {
        return Err(Error::InvalidParameter(
            "split produced an empty partition".into(),
        ));
    }
    Ok(SplitPlan {
        train_idx,
        val_idx,
        test_idx,
        seed,
        mode,
    })
}

#[derive(Debug, Clone)]
pub struct EvalConfig {
    pub bag: BagConfig,
    pub split_mode: SplitMode,
    /// Tune hyperparameters once on the full data and pin them for every
    /// member and iteration, instead of re-tuning per member.
    pub shared_tuning: bool,
    pub jobs: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            bag: BagConfig::default(),
            split_mode: SplitMode::RandomByImage,
            shared_tuning: false,
            jobs: 0,
        }
    }
}

fn gather(features: &[Vec<f64>], idx: &[usize]) -> Vec<Vec<f64>> {
    idx.iter().map(|&i| features[i].clone()).collect()
}

fn gather_scalar(scores: &[f64], idx: &[usize]) -> Vec<f64> {
    idx.iter().map(|&i| scores[i]).collect()
}

/// Train the full pipeline on one split: bag on train, stack on validation.
pub fn train_on_split(
    features: &[Vec<f64>],
    scores: &[f64],
    plan: &SplitPlan,
    bag: &BagConfig,
    jobs: usize,
    layout_version: &str,
) -> Result<StackedEnsemble> {
    let x_train = gather(features, &plan.train_idx);
    let y_train = gather_scalar(scores, &plan.train_idx);
    let x_val = gather(features, &plan.val_idx);
    let y_val = gather_scalar(scores, &plan.val_idx);
    let members = stackens::bag_train(&x_train, &y_train, bag, jobs)?;
    stackens::stepwise_stack(members, &x_val, &y_val, layout_version)
}

/// Evaluate a stacked ensemble on the given rows.
pub fn evaluate_rows(
    ensemble: &StackedEnsemble,
    features: &[Vec<f64>],
    scores: &[f64],
    idx: &[usize],
) -> Result<(Vec<f64>, MetricReport)> {
    let preds: Vec<f64> = idx
        .iter()
        .map(|&i| stackens::ensemble_predict(ensemble, &features[i]))
        .collect::<Result<_>>()?;
    let truth = gather_scalar(scores, idx);
    let report = metric_report(&preds, &truth)?;
    Ok((preds, report))
}

#[derive(Debug)]
pub struct RepeatedEval {
    pub median: MetricReport,
    /// Per-iteration reports for completed iterations, in iteration order.
    pub reports: Vec<MetricReport>,
    /// (iteration, reason) for iterations that failed.
    pub failures: Vec<(usize, String)>,
}

fn median_of(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).expect("finite metric"));
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

fn shared_init(
    features: &[Vec<f64>],
    scores: &[f64],
    cfg: &EvalConfig,
) -> Result<Option<KernelParams>> {
    if !cfg.shared_tuning {
        return Ok(None);
    }
    let d = features[0].len();
    let init = cfg
        .bag
        .init_params
        .map_or_else(|| KernelParams::new((d as f64).sqrt(), 1.0, 0.1), Ok)?;
    let tuned = gpr::tune_hyperparams(features, scores, init, cfg.bag.tune_budget)?;
    Ok(Some(tuned.params))
}

/// Repeat split/train/stack/test `iters` times with per-iteration derived
/// seeds; report the per-metric median plus the full per-iteration lists.
pub fn repeated_eval(
    features: &[Vec<f64>],
    scores: &[f64],
    groups: Option<&[usize]>,
    iters: usize,
    seed: u64,
    cfg: &EvalConfig,
) -> Result<RepeatedEval> {
    if iters < 1 {
        return Err(Error::InvalidParameter("iters must be >= 1".into()));
    }
    let shared = shared_init(features, scores, cfg)?;
    let iteration_ids: Vec<usize> = (0..iters).collect();
    let outcomes = parallel::map_indexed(&iteration_ids, cfg.jobs, |_, &it| -> Result<MetricReport> {
        let iter_seed = seed
            .wrapping_add(0x9e3779b97f4a7c15u64.wrapping_mul(it as u64 + 1));
        let plan = make_splits(features.len(), groups, iter_seed, cfg.split_mode)?;
        let mut bag = cfg.bag;
        bag.master_seed = iter_seed;
        if let Some(params) = shared {
            bag.init_params = Some(params);
            bag.tune_budget = 1;
        }
        // iterations parallelize at this level; member fits run sequentially
        let ensemble = train_on_split(features, scores, &plan, &bag, 1, "repeated")?;
        let (_, report) = evaluate_rows(&ensemble, features, scores, &plan.test_idx)?;
        Ok(report)
    });
    let mut reports = Vec::new();
    let mut failures = Vec::new();
    for (it, outcome) in outcomes.into_iter().enumerate() {
        match outcome {
            Ok(r) => reports.push(r),
            Err(e) => failures.push((it, e.to_string())),
        }
    }
    if reports.is_empty() {
        return Err(Error::InvalidParameter(
            "every evaluation iteration failed".into(),
        ));
    }
    let median = MetricReport {
        r2: median_of(reports.iter().map(|r| r.r2).collect()),
        rmse: median_of(reports.iter().map(|r| r.rmse).collect()),
        plcc: median_of(reports.iter().map(|r| r.plcc).collect()),
        srocc: median_of(reports.iter().map(|r| r.srocc).collect()),
        krocc: median_of(reports.iter().map(|r| r.krocc).collect()),
        n: reports[0].n,
    };
    Ok(RepeatedEval {
        median,
        reports,
        failures,
    })
}

/// Train entirely on dataset A (with an internal 70/15 train/validation
/// split for stacking) and evaluate on all of dataset B.
pub fn cross_dataset(
    features_a: &[Vec<f64>],
    scores_a: &[f64],
    features_b: &[Vec<f64>],
    scores_b: &[f64],
    seed: u64,
    cfg: &EvalConfig,
) -> Result<(Vec<f64>, MetricReport)> {
    let n = features_a.len();
    // 70/15 of A for train/val; the remaining 15% is unused here
    let plan = make_splits(n, None, seed, SplitMode::RandomByImage)?;
    let mut bag = cfg.bag;
    bag.master_seed = seed;
    let ensemble = train_on_split(features_a, scores_a, &plan, &bag, cfg.jobs, "crosseval")?;
    let idx: Vec<usize> = (0..features_b.len()).collect();
    evaluate_rows(&ensemble, features_b, scores_b, &idx)
}

#[derive(Debug, Clone)]
pub struct ResidualDiagnostics {
    pub residuals: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    pub skewness: f64,
    pub excess_kurtosis: f64,
    /// (theoretical normal quantile, observed quantile) pairs for a
    /// normal probability plot, in ascending order.
    pub quantile_pairs: Vec<(f64, f64)>,
}

/// Residual summary for normality inspection.
pub fn residual_diagnostics(predictions: &[f64], truth: &[f64]) -> ResidualDiagnostics {
    let residuals: Vec<f64> = predictions.iter().zip(truth).map(|(p, t)| p - t).collect();
    let n = residuals.len() as f64;
    let m = if residuals.is_empty() { 0.0 } else { mean(&residuals) };
    let var = residuals.iter().map(|r| (r - m) * (r - m)).sum::<f64>() / n.max(1.0);
    let std = var.sqrt();
    let (skewness, excess_kurtosis) = if std > 0.0 {
        let m3 = residuals.iter().map(|r| (r - m).powi(3)).sum::<f64>() / n;
        let m4 = residuals.iter().map(|r| (r - m).powi(4)).sum::<f64>() / n;
        (m3 / std.powi(3), m4 / (var * var) - 3.0)
    } else {
        (0.0, 0.0)
    };
    let mut sorted = residuals.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite residuals"));
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let quantile_pairs = sorted
        .iter()
        .enumerate()
        .map(|(i, &obs)| {
            let p = (i as f64 + 0.5) / n;
            (m + std * normal.inverse_cdf(p), obs)
        })
        .collect();
    ResidualDiagnostics {
        residuals,
        mean: m,
        std,
        skewness,
        excess_kurtosis,
        quantile_pairs,
    }
}

/// Welch one-sided t-test of mean(a) > mean(b) at level `alpha`:
/// 1 when a is significantly greater, -1 when b is (mirrored test),
/// 0 otherwise.
pub fn ttest_one_sided(a: &[f64], b: &[f64], alpha: f64) -> Result<i8> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::InsufficientSamples {
            need: 2,
            got: a.len().min(b.len()),
        });
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (ma, mb) = (mean(a), mean(b));
    let va = a.iter().map(|v| (v - ma) * (v - ma)).sum::<f64>() / (na - 1.0);
    let vb = b.iter().map(|v| (v - mb) * (v - mb)).sum::<f64>() / (nb - 1.0);
    let se2 = va / na + vb / nb;
    if se2 == 0.0 {
        // exact-equality shortcut for degenerate zero-variance pairs
        return Ok(if ma > mb {
            1
        } else if mb > ma {
            -1
        } else {
            0
        });
    }
    let t = (ma - mb) / se2.sqrt();
    let df = se2 * se2 / ((va / na).powi(2) / (na - 1.0) + (vb / nb).powi(2) / (nb - 1.0));
    let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| Error::InvalidParameter(e.to_string()))?;
    let p_a_greater = 1.0 - dist.cdf(t);
    let p_b_greater = 1.0 - dist.cdf(-t);
    Ok(if p_a_greater < alpha {
        1
    } else if p_b_greater < alpha {
        -1
    } else {
        0
    })
}
