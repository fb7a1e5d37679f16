//! Exact Gaussian process regression with an isotropic Matern-5/2 kernel:
//! Cholesky fit, predictive mean/variance, and marginal-likelihood tuning
//! by multi-start coordinate search in log space.

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::error::{Error, Result};

/// Floor applied to the observation-noise variance.
pub const NOISE_FLOOR: f64 = 1e-10;
/// Floor applied to per-column feature standard deviations.
const FEATURE_STD_FLOOR: f64 = 1e-12;
/// Default evaluation budget for hyperparameter tuning.
pub const DEFAULT_TUNE_BUDGET: usize = 60;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelParams {
    pub length_scale: f64,
    pub signal_variance: f64,
    pub noise_variance: f64,
}

impl KernelParams {
    pub fn new(length_scale: f64, signal_variance: f64, noise_variance: f64) -> Result<Self> {
        if length_scale <= 0.0 || signal_variance <= 0.0 {
            return Err(Error::InvalidParameter(
                "length scale and signal variance must be positive".into(),
            ));
        }
        Ok(Self {
            length_scale,
            signal_variance,
            noise_variance: noise_variance.max(NOISE_FLOOR),
        })
    }
}

/// Matern-5/2 covariance of two points at Euclidean distance `r`.
pub fn matern52(r: f64, length_scale: f64, signal_variance: f64) -> f64 {
    debug_assert!(r >= 0.0 && length_scale > 0.0 && signal_variance > 0.0);
    let s = 5.0_f64.sqrt() * r / length_scale;
    signal_variance * (1.0 + s + s * s / 3.0) * (-s).exp()
}

#[derive(Debug, Clone)]
pub struct GprModel {
    pub params: KernelParams,
    /// Standardized training inputs, one row per sample.
    train_inputs: DMatrix<f64>,
    /// Solved `(K + sigma_n^2 I)^-1 y` in standardized target units.
    weights: DVector<f64>,
    chol: Cholesky<f64, nalgebra::Dyn>,
    pub target_mean: f64,
    pub target_std: f64,
    pub feature_mean: Vec<f64>,
    pub feature_std: Vec<f64>,
    /// Jitter actually added to the kernel diagonal (0 when none was needed).
    pub jitter: f64,
    nlml: f64,
}

fn standardize_columns(x: &[Vec<f64>]) -> (DMatrix<f64>, Vec<f64>, Vec<f64>) {
    let n = x.len();
    let d = x[0].len();
    let mut mean = vec![0.0; d];
    for row in x {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut std = vec![0.0; d];
    for row in x {
        for j in 0..d {
            let dlt = row[j] - mean[j];
            std[j] += dlt * dlt;
        }
    }
    for s in &mut std {
        *s = (*s / n as f64).sqrt().max(FEATURE_STD_FLOOR);
    }
    let mat = DMatrix::from_fn(n, d, |i, j| (x[i][j] - mean[j]) / std[j]);
    (mat, mean, std)
}

fn pairwise_kernel(xs: &DMatrix<f64>, params: &KernelParams) -> DMatrix<f64> {
    let n = xs.nrows();
    let mut k = DMatrix::zeros(n, n);
    for i in 0..n {
        k[(i, i)] = params.signal_variance;
        for j in 0..i {
            let r = (xs.row(i) - xs.row(j)).norm();
            let v = matern52(r, params.length_scale, params.signal_variance);
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    k
}

/// Cholesky with jitter escalation: start at `1e-10 * mean(diag)`, double
/// until `1e-4 * mean(diag)`.
fn cholesky_with_jitter(
    k: &DMatrix<f64>,
    noise: f64,
) -> Result<(Cholesky<f64, nalgebra::Dyn>, f64)> {
    let n = k.nrows();
    let mean_diag = k.diagonal().sum() / n as f64 + noise;
    let mut m = k.clone();
    for i in 0..n {
        m[(i, i)] += noise;
    }
    if let Some(c) = Cholesky::new(m.clone()) {
        return Ok((c, 0.0));
    }
    let mut jitter = 1e-10 * mean_diag;
    let max_jitter = 1e-4 * mean_diag;
    while jitter <= max_jitter {
        let mut j = m.clone();
        for i in 0..n {
            j[(i, i)] += jitter;
        }
        if let Some(c) = Cholesky::new(j) {
            return Ok((c, jitter));
        }
        jitter *= 2.0;
    }
    Err(Error::IllConditioned)
}

/// Fit an exact GP: z-score features and targets, factor `K + sigma_n^2 I`,
/// solve the weight vector.
pub fn fit(x: &[Vec<f64>], y: &[f64], params: KernelParams) -> Result<GprModel> {
    if x.len() < 2 {
        return Err(Error::InsufficientSamples {
            need: 2,
            got: x.len(),
        });
    }
    if x.len() != y.len() {
        return Err(Error::FeatureDimension {
            expected: x.len(),
            got: y.len(),
        });
    }
    let d = x[0].len();
    if x.iter().any(|row| row.len() != d) {
        return Err(Error::InvalidParameter("ragged feature matrix".into()));
    }
    if x.iter().flatten().any(|v| !v.is_finite()) || y.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidParameter("non-finite training data".into()));
    }
    let params = KernelParams::new(
        params.length_scale,
        params.signal_variance,
        params.noise_variance,
    )?;
    let (xs, feature_mean, feature_std) = standardize_columns(x);
    let n = y.len() as f64;
    let target_mean = y.iter().sum::<f64>() / n;
    let target_std = (y.iter().map(|v| (v - target_mean).powi(2)).sum::<f64>() / n)
        .sqrt()
        .max(FEATURE_STD_FLOOR);
    let ys = DVector::from_iterator(y.len(), y.iter().map(|v| (v - target_mean) / target_std));
    let k = pairwise_kernel(&xs, &params);
    let (chol, jitter) = cholesky_with_jitter(&k, params.noise_variance)?;
    let weights = chol.solve(&ys);
    let data_fit = 0.5 * ys.dot(&weights);
    let log_det: f64 = chol.l().diagonal().iter().map(|v| v.ln()).sum();
    let nlml = data_fit + log_det + 0.5 * n * (2.0 * std::f64::consts::PI).ln();
    Ok(GprModel {
        params,
        train_inputs: xs,
        weights,
        chol,
        target_mean,
        target_std,
        feature_mean,
        feature_std,
        jitter,
        nlml,
    })
}

impl GprModel {
    pub fn input_dim(&self) -> usize {
        self.train_inputs.ncols()
    }

    pub fn train_len(&self) -> usize {
        self.train_inputs.nrows()
    }

    /// Predictive mean and variance (in de-standardized target units).
    pub fn predict(&self, x: &[f64]) -> Result<(f64, f64)> {
        let d = self.train_inputs.ncols();
        if x.len() != d {
            return Err(Error::FeatureDimension {
                expected: d,
                got: x.len(),
            });
        }
        let xs = DVector::from_iterator(
            d,
            x.iter()
                .enumerate()
                .map(|(j, v)| (v - self.feature_mean[j]) / self.feature_std[j]),
        );
        let n = self.train_inputs.nrows();
        let kstar = DVector::from_fn(n, |i, _| {
            let r = (self.train_inputs.row(i).transpose() - &xs).norm();
            matern52(r, self.params.length_scale, self.params.signal_variance)
        });
        let mean_std = kstar.dot(&self.weights);
        let mean = self.target_mean + self.target_std * mean_std;
        let v = self.chol.l().solve_lower_triangular(&kstar).ok_or(
            Error::IllConditioned,
        )?;
        let var_std =
            (self.params.signal_variance - v.norm_squared() + self.params.noise_variance).max(0.0);
        Ok((mean, var_std * self.target_std * self.target_std))
    }

    /// Negative log marginal likelihood of the standardized training targets.
    pub fn nlml(&self) -> f64 {
        self.nlml
    }

    /// Flatten the model into plain arrays for the on-disk container.
    pub fn to_data(&self) -> GprModelData {
        GprModelData {
            params: self.params,
            train_inputs: (0..self.train_inputs.nrows())
                .map(|i| self.train_inputs.row(i).iter().cloned().collect())
                .collect(),
            weights: self.weights.iter().cloned().collect(),
            target_mean: self.target_mean,
            target_std: self.target_std,
            feature_mean: self.feature_mean.clone(),
            feature_std: self.feature_std.clone(),
            jitter: self.jitter,
        }
    }

    /// Rebuild a model from container arrays. The Cholesky factor is
    /// recomputed from the stored inputs with the stored jitter, which is
    /// deterministic, so predictions match the original bit for bit.
    pub fn from_data(data: GprModelData) -> Result<Self> {
        let n = data.train_inputs.len();
        let d = data.train_inputs.first().map_or(0, |r| r.len());
        let xs = DMatrix::from_fn(n, d, |i, j| data.train_inputs[i][j]);
        let k = pairwise_kernel(&xs, &data.params);
        let mut m = k;
        for i in 0..n {
            m[(i, i)] += data.params.noise_variance + data.jitter;
        }
        let chol = Cholesky::new(m).ok_or(Error::IllConditioned)?;
        let weights = DVector::from_vec(data.weights);
        // data-fit term rebuilt algebraically; nlml is informational post-load
        let log_det: f64 = chol.l().diagonal().iter().map(|v| v.ln()).sum();
        let nlml = log_det + 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln();
        Ok(GprModel {
            params: data.params,
            train_inputs: xs,
            weights,
            chol,
            target_mean: data.target_mean,
            target_std: data.target_std,
            feature_mean: data.feature_mean,
            feature_std: data.feature_std,
            jitter: data.jitter,
            nlml,
        })
    }
}

/// Plain-array form of a fitted model, the unit of container serialization.
#[derive(Debug, Clone, PartialEq)]
pub struct GprModelData {
    pub params: KernelParams,
    pub train_inputs: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
    pub target_mean: f64,
    pub target_std: f64,
    pub feature_mean: Vec<f64>,
    pub feature_std: Vec<f64>,
    pub jitter: f64,
}

#[derive(Debug, Clone)]
pub struct TuneOutcome {
    pub params: KernelParams,
    pub nlml: Option<f64>,
    /// Set when every evaluation was ill-conditioned and `params` is the
    /// untouched initial guess.
    pub warned: bool,
}

/// Minimize NLML over log-parameterized (length scale, signal variance,
/// noise variance) with a deterministic multi-start coordinate search.
/// `budget` counts NLML evaluations; the result never scores worse than
/// the initial parameters.
pub fn tune_hyperparams(
    x: &[Vec<f64>],
    y: &[f64],
    init: KernelParams,
    budget: usize,
) -> Result<TuneOutcome> {
    if budget < 1 {
        return Err(Error::InvalidParameter("tune budget must be >= 1".into()));
    }
    let mut evals = 0usize;
    let mut best: Option<(f64, KernelParams)> = None;
    let mut evaluate = |p: [f64; 3], evals: &mut usize| -> Option<f64> {
        if *evals >= budget {
            return None;
        }
        *evals += 1;
        let params = KernelParams::new(p[0].exp(), p[1].exp(), p[2].exp()).ok()?;
        let model = fit(x, y, params).ok()?;
        let score = model.nlml();
        if score.is_finite() {
            if best.is_none() || score < best.as_ref().unwrap().0 {
                best = Some((score, params));
            }
            Some(score)
        } else {
            None
        }
    };

    let init_log = [
        init.length_scale.ln(),
        init.signal_variance.ln(),
        init.noise_variance.max(NOISE_FLOOR).ln(),
    ];
    let init_score = evaluate(init_log, &mut evals);
    if evals >= budget {
        // budget of one: return init unchanged
        return Ok(TuneOutcome {
            params: init,
            nlml: init_score,
            warned: init_score.is_none(),
        });
    }

    // deterministic starts: the init point plus coarse rescalings of it
    let starts = [
        init_log,
        [init_log[0] + 1.5, init_log[1], init_log[2]],
        [init_log[0] - 1.5, init_log[1], init_log[2] - 2.0],
    ];
    'outer: for start in starts {
        let mut current = start;
        let mut current_score = match evaluate(current, &mut evals) {
            Some(s) => s,
            None => {
                if evals >= budget {
                    break 'outer;
                }
                continue;
            }
        };
        let mut step = std::f64::consts::LN_2;
        while step > 0.05 {
            let mut improved = false;
            for coord in 0..3 {
                for dir in [1.0, -1.0] {
                    if evals >= budget {
                        break 'outer;
                    }
                    let mut cand = current;
                    cand[coord] += dir * step;
                    // keep noise variance at or above its floor
                    if coord == 2 && cand[2] < NOISE_FLOOR.ln() {
                        continue;
                    }
                    if let Some(score) = evaluate(cand, &mut evals) {
                        if score < current_score {
                            current = cand;
                            current_score = score;
                            improved = true;
                        }
                    }
                }
            }
            if !improved {
                step *= 0.5;
            }
        }
    }

    match (best, init_score) {
        (Some((score, params)), _) => Ok(TuneOutcome {
            params,
            nlml: Some(score),
            warned: false,
        }),
        (None, _) => Ok(TuneOutcome {
            params: init,
            nlml: None,
            warned: true,
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn default_params() -> KernelParams {
        KernelParams::new(1.0, 1.0, 1e-4).unwrap()
    }

    #[test]
    fn matern_spot_values() {
        assert_eq!(matern52(0.0, 2.0, 3.5), 3.5);
        let s5 = 5.0_f64.sqrt();
        let expect = (1.0 + s5 + 5.0 / 3.0) * (-s5).exp();
        assert!((matern52(1.0, 1.0, 1.0) - expect).abs() < 1e-15);
        assert!((expect - 0.5240).abs() < 1e-4);
        // decay
        let mut prev = matern52(0.5, 1.0, 1.0);
        for i in 1..100 {
            let v = matern52(0.5 + i as f64 * 0.5, 1.0, 1.0);
            assert!(v < prev);
            prev = v;
        }
        assert!(matern52(1e3, 1.0, 1.0) < 1e-300_f64.max(1e-12));
    }

    #[test]
    fn fit_rejects_single_point() {
        assert!(fit(&[vec![1.0]], &[1.0], default_params()).is_err());
    }

    #[test]
    fn noiseless_interpolation() {
        let x: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64, (i * i) as f64 * 0.1]).collect();
        let y: Vec<f64> = (0..6).map(|i| (i as f64 * 0.7).sin() + 2.0).collect();
        let params = KernelParams::new(1.0, 1.0, NOISE_FLOOR).unwrap();
        let model = fit(&x, &y, params).unwrap();
        for (xi, yi) in x.iter().zip(&y) {
            let (mean, _) = model.predict(xi).unwrap();
            assert!((mean - yi).abs() < 1e-4, "{mean} vs {yi}");
        }
    }

    #[test]
    fn training_targets_within_noise_band() {
        let x: Vec<Vec<f64>> = (0..8).map(|i| vec![i as f64]).collect();
        let y: Vec<f64> = (0..8).map(|i| (i as f64).cos()).collect();
        let params = KernelParams::new(2.0, 1.0, 1e-4).unwrap();
        let model = fit(&x, &y, params).unwrap();
        let sigma_n = params.noise_variance.sqrt();
        for (xi, yi) in x.iter().zip(&y) {
            let (mean, _) = model.predict(xi).unwrap();
            let std_units = (mean - yi).abs() / (model.target_std * sigma_n);
            assert!(std_units <= 2.0, "off by {std_units} sigma_n");
        }
    }

    #[test]
    fn three_point_dense_solve_oracle() {
        let x = vec![vec![0.0], vec![1.0], vec![2.5]];
        let y = vec![1.0, -0.5, 2.0];
        let params = KernelParams::new(1.3, 0.8, 1e-3).unwrap();
        let model = fit(&x, &y, params).unwrap();

        // independent dense solve in standardized space
        let (xs, _, _) = standardize_columns(&x);
        let ym = y.iter().sum::<f64>() / 3.0;
        let ystd = (y.iter().map(|v| (v - ym).powi(2)).sum::<f64>() / 3.0).sqrt();
        let k = pairwise_kernel(&xs, &params);
        let mut m = k;
        for i in 0..3 {
            m[(i, i)] += params.noise_variance;
        }
        let rhs = DVector::from_iterator(3, y.iter().map(|v| (v - ym) / ystd));
        let w = m.lu().solve(&rhs).unwrap();
        for q in [vec![0.3], vec![1.9], vec![5.0]] {
            let (mean, _) = model.predict(&q).unwrap();
            let qs = (q[0] - model.feature_mean[0]) / model.feature_std[0];
            let kstar = DVector::from_fn(3, |i, _| {
                matern52((xs[(i, 0)] - qs).abs(), params.length_scale, params.signal_variance)
            });
            let oracle = ym + ystd * kstar.dot(&w);
            assert!((mean - oracle).abs() < 1e-9, "{mean} vs {oracle}");
        }
    }

    #[test]
    fn prior_reversion_far_from_data() {
        let x: Vec<Vec<f64>> = (0..5).map(|i| vec![i as f64]).collect();
        let y = vec![2.0, 3.0, 1.5, 2.5, 2.2];
        let model = fit(&x, &y, default_params()).unwrap();
        let (mean, var) = model.predict(&[1e6]).unwrap();
        let target_mean = y.iter().sum::<f64>() / 5.0;
        assert!((mean - target_mean).abs() < 1e-9);
        let expect_var = (model.params.signal_variance + model.params.noise_variance)
            * model.target_std
            * model.target_std;
        assert!((var - expect_var).abs() / expect_var < 1e-9);
    }

    #[test]
    fn variance_grows_away_from_data() {
        let x: Vec<Vec<f64>> = (0..5).map(|i| vec![i as f64]).collect();
        let y = vec![0.1, 0.4, 0.2, 0.8, 0.5];
        let model = fit(&x, &y, default_params()).unwrap();
        let (_, var_at) = model.predict(&[2.0]).unwrap();
        let (_, var_far) = model.predict(&[2.0 + 10.0 * model.params.length_scale * 10.0]).unwrap();
        assert!(var_at <= var_far);
    }

    #[test]
    fn predict_dimension_mismatch() {
        let x = vec![vec![0.0, 1.0], vec![1.0, 0.0]];
        let model = fit(&x, &[0.0, 1.0], default_params()).unwrap();
        assert!(model.predict(&[1.0]).is_err());
    }

    #[test]
    fn predict_bit_reproducible() {
        let x: Vec<Vec<f64>> = (0..10).map(|i| vec![(i as f64).sin(), i as f64]).collect();
        let y: Vec<f64> = (0..10).map(|i| i as f64 * 0.1).collect();
        let model = fit(&x, &y, default_params()).unwrap();
        let q = [0.33, 4.2];
        assert_eq!(model.predict(&q).unwrap(), model.predict(&q).unwrap());
    }

    #[test]
    fn target_scaling_scales_means() {
        let x: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64]).collect();
        let y: Vec<f64> = (0..6).map(|i| (i as f64 * 0.9).sin()).collect();
        let c = 7.0;
        let yc: Vec<f64> = y.iter().map(|v| v * c).collect();
        let p = default_params();
        let m1 = fit(&x, &y, p).unwrap();
        let m2 = fit(&x, &yc, p).unwrap();
        for q in [0.5, 2.7, 4.9] {
            let (a, _) = m1.predict(&[q]).unwrap();
            let (b, _) = m2.predict(&[q]).unwrap();
            assert!((b - c * a).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_variance_column_tolerated() {
        let x = vec![vec![1.0, 5.0], vec![2.0, 5.0], vec![3.0, 5.0]];
        let model = fit(&x, &[0.0, 1.0, 0.5], default_params()).unwrap();
        assert!(model.predict(&[1.5, 5.0]).is_ok());
    }

    #[test]
    fn tune_budget_one_returns_init() {
        let x: Vec<Vec<f64>> = (0..5).map(|i| vec![i as f64]).collect();
        let y = vec![0.0, 1.0, 0.5, 0.7, 0.2];
        let init = default_params();
        let out = tune_hyperparams(&x, &y, init, 1).unwrap();
        assert_eq!(out.params, init);
    }

    #[test]
    fn tune_never_worse_than_init() {
        let x: Vec<Vec<f64>> = (0..12).map(|i| vec![i as f64 * 0.5]).collect();
        let y: Vec<f64> = (0..12).map(|i| (i as f64 * 0.4).sin()).collect();
        let init = KernelParams::new(0.1, 0.5, 0.5).unwrap();
        let init_nlml = fit(&x, &y, init).unwrap().nlml();
        let out = tune_hyperparams(&x, &y, init, 40).unwrap();
        assert!(out.nlml.unwrap() <= init_nlml + 1e-12);
        let refit = fit(&x, &y, out.params).unwrap();
        assert!((refit.nlml() - out.nlml.unwrap()).abs() < 1e-9);
    }

    #[test]
    fn data_round_trip_bit_exact_predictions() {
        let x: Vec<Vec<f64>> = (0..9).map(|i| vec![i as f64, (i as f64).cos()]).collect();
        let y: Vec<f64> = (0..9).map(|i| (i as f64 * 0.3).tan().atan()).collect();
        let model = fit(&x, &y, default_params()).unwrap();
        let rebuilt = GprModel::from_data(model.to_data()).unwrap();
        for q in [[0.5, 0.8], [3.3, -0.2], [10.0, 0.0]] {
            assert_eq!(model.predict(&q).unwrap(), rebuilt.predict(&q).unwrap());
        }
    }

    #[test]
    fn cholesky_diagonal_positive_after_jitter() {
        let x: Vec<Vec<f64>> = (0..6).map(|_| vec![1.0, 2.0]).collect(); // identical rows
        let y = vec![0.0, 0.1, 0.2, 0.3, 0.4, 0.5];
        let model = fit(&x, &y, KernelParams::new(1.0, 1.0, NOISE_FLOOR).unwrap()).unwrap();
        let min_diag = model
            .chol
            .l()
            .diagonal()
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min);
        assert!(min_diag > 0.0);
    }
}
