//! MSCN coefficients, generalized Gaussian fits of their distribution,
//! and asymmetric fits of the four adjacent-pair product maps.

use std::sync::OnceLock;

use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::imgio::Plane;

/// Default window half-extent (7x7 window).
pub const DEFAULT_K: usize = 3;
/// Default window half-extent.
pub const DEFAULT_L: usize = 3;
/// Default window Gaussian scale.
pub const DEFAULT_SIGMA_W: f64 = 7.0 / 6.0;
/// Scale factor applied before local standardization: the +1 stabilizer in
/// the MSCN denominator assumes intensities of 8-bit magnitude.
pub const MSCN_INTENSITY_SCALE: f64 = 255.0;

/// Shape-parameter search range and resolution for the moment-matching fits.
const ALPHA_MIN: f64 = 0.2;
const ALPHA_MAX: f64 = 10.0;
const ALPHA_STEP: f64 = 1e-3;
/// Scale assigned by the degenerate-sample fallbacks.
const FALLBACK_SCALE: f64 = 1e-6;

/// Normalized local-standardization window.
#[derive(Debug, Clone)]
pub struct MscnWindow {
    pub half_rows: usize,
    pub half_cols: usize,
    /// `(2K+1) x (2L+1)` nonnegative weights summing to 1, row-major.
    pub weights: Vec<f64>,
}

/// Locally standardized plane plus the window that produced it.
#[derive(Debug, Clone)]
pub struct MscnField {
    pub coeffs: Plane,
    pub window: MscnWindow,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GgdParams {
    pub alpha: f64,
    pub beta: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AggdParams {
    pub gamma: f64,
    pub beta_l: f64,
    pub beta_r: f64,
    pub eta: f64,
}

/// Circularly symmetric Gaussian window rescaled to sum to 1.
pub fn mscn_window(half_rows: usize, half_cols: usize, sigma_w: f64) -> Result<MscnWindow> {
    if half_rows < 1 || half_cols < 1 {
        return Err(Error::InvalidParameter("window half-extents must be >= 1".into()));
    }
    if sigma_w <= 0.0 {
        return Err(Error::InvalidParameter("sigma_w must be positive".into()));
    }
    let (rows, cols) = (2 * half_rows + 1, 2 * half_cols + 1);
    let mut weights = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        let k = r as f64 - half_rows as f64;
        for c in 0..cols {
            let l = c as f64 - half_cols as f64;
            weights.push((-(k * k + l * l) / (2.0 * sigma_w * sigma_w)).exp());
        }
    }
    let sum: f64 = weights.iter().sum();
    for w in &mut weights {
        *w /= sum;
    }
    Ok(MscnWindow {
        half_rows,
        half_cols,
        weights,
    })
}

pub fn default_window() -> MscnWindow {
    mscn_window(DEFAULT_K, DEFAULT_L, DEFAULT_SIGMA_W).expect("default window params valid")
}

/// Locally standardize: `(I - mu) / (sigma + 1)` with weighted local mean
/// and standard deviation, replicate-border padding.
pub fn mscn(p: &Plane, window: &MscnWindow) -> Result<MscnField> {
    let (rows, cols) = (2 * window.half_rows + 1, 2 * window.half_cols + 1);
    if p.width < cols || p.height < rows {
        return Err(Error::PlaneTooSmall {
            width: p.width,
            height: p.height,
            what: format!("{cols}x{rows} MSCN window"),
        });
    }
    let weighted = |x: usize, y: usize, f: &dyn Fn(f64) -> f64| -> f64 {
        let mut acc = 0.0;
        for r in 0..rows {
            let sy = y as isize + r as isize - window.half_rows as isize;
            for c in 0..cols {
                let sx = x as isize + c as isize - window.half_cols as isize;
                acc += window.weights[r * cols + c] * f(p.get_clamped(sx, sy));
            }
        }
        acc
    };
    let mut coeffs = vec![0.0; p.width * p.height];
    for y in 0..p.height {
        for x in 0..p.width {
            let mu = weighted(x, y, &|v| v);
            let var = weighted(x, y, &|v| (v - mu) * (v - mu));
            let sigma = var.max(0.0).sqrt();
            coeffs[y * p.width + x] = (p.get(x, y) - mu) / (sigma + 1.0);
        }
    }
    Ok(MscnField {
        coeffs: Plane::new(p.width, p.height, coeffs),
        window: window.clone(),
    })
}

/// ln of the moment ratio `rho(alpha) = G(1/a) G(3/a) / G(2/a)^2`,
/// strictly decreasing in `alpha`.
fn ln_rho(alpha: f64) -> f64 {
    ln_gamma(1.0 / alpha) + ln_gamma(3.0 / alpha) - 2.0 * ln_gamma(2.0 / alpha)
}

fn rho_grid() -> &'static (Vec<f64>, Vec<f64>) {
    static GRID: OnceLock<(Vec<f64>, Vec<f64>)> = OnceLock::new();
    GRID.get_or_init(|| {
        let n = ((ALPHA_MAX - ALPHA_MIN) / ALPHA_STEP).round() as usize + 1;
        let mut alphas = Vec::with_capacity(n);
        let mut ln_rhos = Vec::with_capacity(n);
        for i in 0..n {
            let a = ALPHA_MIN + i as f64 * ALPHA_STEP;
            let lr = ln_rho(a);
            if let Some(&prev) = ln_rhos.last() {
                // monotone precondition of the inversion
                assert!(lr < prev, "rho(alpha) grid not strictly decreasing at alpha={a}");
            }
            alphas.push(a);
            ln_rhos.push(lr);
        }
        (alphas, ln_rhos)
    })
}

/// Invert `rho(alpha) = target` by monotone grid lookup plus one bisection
/// refinement; clamps to the search range at the ends.
pub fn invert_rho(target: f64) -> f64 {
    let (alphas, ln_rhos) = rho_grid();
    let lt = target.ln();
    if lt >= ln_rhos[0] {
        return alphas[0];
    }
    if lt <= *ln_rhos.last().unwrap() {
        return *alphas.last().unwrap();
    }
    // first index with ln_rho < lt (grid is decreasing)
    let idx = ln_rhos.partition_point(|&v| v >= lt);
    let (mut lo, mut hi) = (alphas[idx - 1], alphas[idx]);
    let mid = 0.5 * (lo + hi);
    if ln_rho(mid) >= lt {
        lo = mid;
    } else {
        hi = mid;
    }
    0.5 * (lo + hi)
}

fn gamma_fn(x: f64) -> f64 {
    ln_gamma(x).exp()
}

/// Moment-matching GGD fit: invert the ratio `E[x^2] / E[|x|]^2`, then
/// recover the scale from the variance relation.
pub fn fit_ggd(samples: &[f64]) -> Result<GgdParams> {
    if samples.len() < 16 {
        return Err(Error::InsufficientSamples {
            need: 16,
            got: samples.len(),
        });
    }
    let n = samples.len() as f64;
    let mean_abs = samples.iter().map(|v| v.abs()).sum::<f64>() / n;
    let mean_sq = samples.iter().map(|v| v * v).sum::<f64>() / n;
    if mean_sq <= 1e-24 || mean_abs <= 1e-12 {
        return Ok(GgdParams {
            alpha: 2.0,
            beta: FALLBACK_SCALE,
        });
    }
    let rho_hat = mean_sq / (mean_abs * mean_abs);
    let alpha = invert_rho(rho_hat);
    let beta = (mean_sq * gamma_fn(1.0 / alpha) / gamma_fn(3.0 / alpha)).sqrt();
    Ok(GgdParams { alpha, beta })
}

/// Mean of the asymmetric GGD from its shape and scales.
pub fn aggd_mean(gamma: f64, beta_l: f64, beta_r: f64) -> f64 {
    (beta_r - beta_l) * gamma_fn(2.0 / gamma) / gamma_fn(1.0 / gamma)
}

/// Moment-based AGGD fit: one-sided second moments give the scales, the
/// asymmetry-corrected generalized ratio gives the shape.
pub fn fit_aggd(samples: &[f64]) -> Result<AggdParams> {
    if samples.len() < 16 {
        return Err(Error::InsufficientSamples {
            need: 16,
            got: samples.len(),
        });
    }
    let mut left_sq = 0.0;
    let mut right_sq = 0.0;
    let mut n_left = 0usize;
    let mut n_right = 0usize;
    let mut sum_abs = 0.0;
    let mut sum_sq = 0.0;
    for &v in samples {
        sum_abs += v.abs();
        sum_sq += v * v;
        if v < 0.0 {
            left_sq += v * v;
            n_left += 1;
        } else if v > 0.0 {
            right_sq += v * v;
            n_right += 1;
        }
    }
    let degenerate = AggdParams {
        gamma: 2.0,
        beta_l: FALLBACK_SCALE,
        beta_r: FALLBACK_SCALE,
        eta: 0.0,
    };
    if n_left == 0 || n_right == 0 || sum_sq <= 1e-24 {
        return Ok(degenerate);
    }
    let n = samples.len() as f64;
    let lsq = (left_sq / n_left as f64).sqrt();
    let rsq = (right_sq / n_right as f64).sqrt();
    if lsq <= 1e-12 || rsq <= 1e-12 {
        return Ok(degenerate);
    }
    let gamma_hat = lsq / rsq;
    let r_hat = (sum_abs / n) * (sum_abs / n) / (sum_sq / n);
    let r_norm = r_hat * (gamma_hat.powi(3) + 1.0) * (gamma_hat + 1.0)
        / (gamma_hat * gamma_hat + 1.0).powi(2);
    // r_norm estimates G(2/g)^2 / (G(1/g) G(3/g)), the reciprocal of rho
    let gamma = invert_rho(1.0 / r_norm);
    let conv = (gamma_fn(1.0 / gamma) / gamma_fn(3.0 / gamma)).sqrt();
    let beta_l = lsq * conv;
    let beta_r = rsq * conv;
    let eta = aggd_mean(gamma, beta_l, beta_r);
    Ok(AggdParams {
        gamma,
        beta_l,
        beta_r,
        eta,
    })
}

/// Four shifted-product maps in the fixed order
/// [horizontal, main-diagonal, anti-diagonal, vertical].
pub fn paired_products(m: &MscnField) -> Result<[Plane; 4]> {
    let c = &m.coeffs;
    if c.width < 2 || c.height < 2 {
        return Err(Error::PlaneTooSmall {
            width: c.width,
            height: c.height,
            what: "paired products".into(),
        });
    }
    let (w, h) = (c.width, c.height);
    let mut hmap = Vec::with_capacity(h * (w - 1));
    for y in 0..h {
        for x in 0..w - 1 {
            hmap.push(c.get(x, y) * c.get(x + 1, y));
        }
    }
    let mut d1 = Vec::with_capacity((h - 1) * (w - 1));
    for y in 0..h - 1 {
        for x in 0..w - 1 {
            d1.push(c.get(x, y) * c.get(x + 1, y + 1));
        }
    }
    let mut d2 = Vec::with_capacity((h - 1) * (w - 1));
    for y in 0..h - 1 {
        for x in 1..w {
            d2.push(c.get(x, y) * c.get(x - 1, y + 1));
        }
    }
    let mut vmap = Vec::with_capacity((h - 1) * w);
    for y in 0..h - 1 {
        for x in 0..w {
            vmap.push(c.get(x, y) * c.get(x, y + 1));
        }
    }
    Ok([
        Plane::new(w - 1, h, hmap),
        Plane::new(w - 1, h - 1, d1),
        Plane::new(w - 1, h - 1, d2),
        Plane::new(w, h - 1, vmap),
    ])
}

/// The 18 standardized-luminance features of one plane: `[alpha, beta]` of
/// the MSCN field, then `[gamma, beta_l, beta_r, eta]` per product map.
///
/// The input is expected in `[0,1]` and is rescaled to 8-bit magnitude
/// before standardization (see `MSCN_INTENSITY_SCALE`).
pub fn mscn_features(p: &Plane) -> Result<[f64; 18]> {
    let field = mscn(&p.scaled(MSCN_INTENSITY_SCALE), &default_window())?;
    let ggd = fit_ggd(&field.coeffs.data)?;
    let products = paired_products(&field)?;
    let mut out = [0.0; 18];
    out[0] = ggd.alpha;
    out[1] = ggd.beta;
    for (i, map) in products.iter().enumerate() {
        let fit = fit_aggd(&map.data)?;
        out[2 + 4 * i] = fit.gamma;
        out[2 + 4 * i + 1] = fit.beta_l;
        out[2 + 4 * i + 2] = fit.beta_r;
        out[2 + 4 * i + 3] = fit.eta;
    }
    Ok(out)
}
