//! Gradient maps (magnitude, relative orientation, relative magnitude)
//! from Gaussian partial derivatives, summarized by histogram variance.

use crate::error::{Error, Result};
use crate::imgio::Plane;

/// Default filter scale for the derivative stencils.
pub const DEFAULT_SIGMA: f64 = 0.5;
/// Default stencil radius (5x5 kernels).
pub const DEFAULT_RADIUS: usize = 2;
/// Default histogram bin count for the variance descriptor.
pub const DEFAULT_BINS: usize = 100;

/// Paired horizontal/vertical derivative stencils.
#[derive(Debug, Clone)]
pub struct DerivativeKernels {
    /// Horizontal derivative stencil (transpose of `ky`).
    pub kx: Vec<f64>,
    /// Vertical derivative stencil.
    pub ky: Vec<f64>,
    pub radius: usize,
    pub sigma: f64,
}

impl DerivativeKernels {
    pub fn size(&self) -> usize {
        2 * self.radius + 1
    }
}

#[derive(Debug, Clone)]
pub struct GradientMaps {
    /// Gradient magnitude, >= 0.
    pub gm: Plane,
    /// Relative orientation in (-pi, pi].
    pub ro: Plane,
    /// Relative gradient magnitude, >= 0.
    pub rm: Plane,
}

/// Sample the Gaussian partial derivative on `[-radius, radius]^2` and
/// mean-subtract so each stencil sums to zero exactly.
///
/// `ky(x, y) = -y / (2 pi sigma^4) * exp(-(x^2 + y^2) / (2 sigma^2))`
pub fn gaussian_derivative_kernels(sigma: f64, radius: usize) -> Result<DerivativeKernels> {
    if sigma <= 0.0 {
        return Err(Error::InvalidParameter(format!(
            "sigma must be positive, got {sigma}"
        )));
    }
    if radius < 1 {
        return Err(Error::InvalidParameter("radius must be >= 1".into()));
    }
    let size = 2 * radius + 1;
    let norm = -1.0 / (2.0 * std::f64::consts::PI * sigma.powi(4));
    let mut ky = vec![0.0; size * size];
    for iy in 0..size {
        let y = iy as f64 - radius as f64;
        for ix in 0..size {
            let x = ix as f64 - radius as f64;
            ky[iy * size + ix] = norm * y * (-(x * x + y * y) / (2.0 * sigma * sigma)).exp();
        }
    }
    let mean = ky.iter().sum::<f64>() / ky.len() as f64;
    for v in &mut ky {
        *v -= mean;
    }
    let mut kx = vec![0.0; size * size];
    for iy in 0..size {
        for ix in 0..size {
            kx[iy * size + ix] = ky[ix * size + iy];
        }
    }
    Ok(DerivativeKernels {
        kx,
        ky,
        radius,
        sigma,
    })
}

pub fn default_kernels() -> DerivativeKernels {
    gaussian_derivative_kernels(DEFAULT_SIGMA, DEFAULT_RADIUS).expect("default kernel params valid")
}

/// 2-D correlation with replicate-border padding.
fn correlate(p: &Plane, kernel: &[f64], radius: usize) -> Plane {
    let size = 2 * radius + 1;
    let mut out = vec![0.0; p.width * p.height];
    for y in 0..p.height {
        for x in 0..p.width {
            let mut acc = 0.0;
            for ky in 0..size {
                let sy = y as isize + ky as isize - radius as isize;
                for kx in 0..size {
                    let sx = x as isize + kx as isize - radius as isize;
                    acc += kernel[ky * size + kx] * p.get_clamped(sx, sy);
                }
            }
            out[y * p.width + x] = acc;
        }
    }
    Plane::new(p.width, p.height, out)
}

/// 3x3 box mean with replicate padding, used for the local gradient average.
fn box_mean_3x3(p: &Plane) -> Plane {
    let mut out = vec![0.0; p.width * p.height];
    for y in 0..p.height {
        for x in 0..p.width {
            let mut acc = 0.0;
            for dy in -1..=1isize {
                for dx in -1..=1isize {
                    acc += p.get_clamped(x as isize + dx, y as isize + dy);
                }
            }
            out[y * p.width + x] = acc / 9.0;
        }
    }
    Plane::new(p.width, p.height, out)
}

/// Wrap an angle into (-pi, pi].
#[inline]
fn wrap_angle(a: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut w = a % two_pi;
    if w <= -std::f64::consts::PI {
        w += two_pi;
    } else if w > std::f64::consts::PI {
        w -= two_pi;
    }
    w
}

/// Derivatives this small are rounding residue from the zero-sum kernels;
/// snapping them keeps orientation well defined on flat regions.
const DERIV_EPS: f64 = 1e-12;

/// Orientation via the two-argument arctangent; (near-)zero gradients map to 0.
#[inline]
fn orientation(iy: f64, ix: f64) -> f64 {
    let ix = if ix.abs() < DERIV_EPS { 0.0 } else { ix };
    let iy = if iy.abs() < DERIV_EPS { 0.0 } else { iy };
    if ix == 0.0 && iy == 0.0 {
        0.0
    } else {
        iy.atan2(ix)
    }
}

pub fn gradient_maps(p: &Plane, k: &DerivativeKernels) -> Result<GradientMaps> {
    if p.width < k.size() || p.height < k.size() {
        return Err(Error::PlaneTooSmall {
            width: p.width,
            height: p.height,
            what: format!("{}x{} derivative kernel", k.size(), k.size()),
        });
    }
    let ix = correlate(p, &k.kx, k.radius);
    let iy = correlate(p, &k.ky, k.radius);
    let ix_ave = box_mean_3x3(&ix);
    let iy_ave = box_mean_3x3(&iy);

    let n = p.width * p.height;
    let mut gm = Vec::with_capacity(n);
    let mut ro = Vec::with_capacity(n);
    let mut rm = Vec::with_capacity(n);
    for i in 0..n {
        let (gx, gy) = (ix.data[i], iy.data[i]);
        let (ax, ay) = (ix_ave.data[i], iy_ave.data[i]);
        gm.push((gx * gx + gy * gy).sqrt());
        ro.push(wrap_angle(orientation(gy, gx) - orientation(ay, ax)));
        let (dx, dy) = (gx - ax, gy - ay);
        rm.push((dx * dx + dy * dy).sqrt());
    }
    Ok(GradientMaps {
        gm: Plane::new(p.width, p.height, gm),
        ro: Plane::new(p.width, p.height, ro),
        rm: Plane::new(p.width, p.height, rm),
    })
}

/// Variance of the probability-normalized histogram over the map's
/// min-max range. A degenerate map (min = max) puts all mass in bin 0.
pub fn hist_variance(map: &Plane, bins: usize) -> Result<f64> {
    if bins < 2 {
        return Err(Error::InvalidParameter("bins must be >= 2".into()));
    }
    if map.data.is_empty() {
        return Err(Error::EmptyInput("histogram over empty map".into()));
    }
    let min = map.data.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = map.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut counts = vec![0usize; bins];
    if max > min {
        let scale = bins as f64 / (max - min);
        for &v in &map.data {
            let idx = (((v - min) * scale) as usize).min(bins - 1);
            counts[idx] += 1;
        }
    } else {
        counts[0] = map.data.len();
    }
    let total = map.data.len() as f64;
    let mean = 1.0 / bins as f64;
    Ok(counts
        .iter()
        .map(|&c| {
            let h = c as f64 / total;
            (h - mean) * (h - mean)
        })
        .sum())
}

/// `[V_GM, V_RO, V_RM]` in this fixed order.
pub fn gradient_features(p: &Plane, k: &DerivativeKernels, bins: usize) -> Result<[f64; 3]> {
    let maps = gradient_maps(p, k)?;
    Ok([
        hist_variance(&maps.gm, bins)?,
        hist_variance(&maps.ro, bins)?,
        hist_variance(&maps.rm, bins)?,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernel_rejects_bad_params() {
        assert!(gaussian_derivative_kernels(0.0, 2).is_err());
        assert!(gaussian_derivative_kernels(-1.0, 2).is_err());
        assert!(gaussian_derivative_kernels(0.5, 0).is_err());
    }

    #[test]
    fn kernel_center_zero_and_antisymmetric() {
        let k = gaussian_derivative_kernels(0.5, 2).unwrap();
        let size = k.size();
        let center = k.ky[k.radius * size + k.radius];
        assert!(center.abs() < 1e-15);
        for iy in 0..size {
            for ix in 0..size {
                let mirrored = k.ky[(size - 1 - iy) * size + ix];
                assert!((k.ky[iy * size + ix] + mirrored).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn kernel_sums_to_zero() {
        for sigma in [0.5, 1.0, 2.0] {
            let k = gaussian_derivative_kernels(sigma, 2).unwrap();
            assert!(k.kx.iter().sum::<f64>().abs() < 1e-12);
            assert!(k.ky.iter().sum::<f64>().abs() < 1e-12);
        }
    }

    #[test]
    fn kernel_closed_form_value() {
        // ky(0,1) with sigma = 0.5; antisymmetry makes mean-subtraction a no-op
        let sigma: f64 = 0.5;
        let expect = -1.0 / (2.0 * std::f64::consts::PI * sigma.powi(4))
            * (-1.0 / (2.0 * sigma * sigma)).exp();
        let k = gaussian_derivative_kernels(sigma, 2).unwrap();
        let size = k.size();
        let got = k.ky[(k.radius + 1) * size + k.radius];
        assert!((got - expect).abs() < 1e-15);
    }

    #[test]
    fn kx_is_transpose_of_ky() {
        let k = gaussian_derivative_kernels(0.7, 2).unwrap();
        let size = k.size();
        for iy in 0..size {
            for ix in 0..size {
                assert_eq!(k.kx[iy * size + ix], k.ky[ix * size + iy]);
            }
        }
    }

    #[test]
    fn constant_plane_zero_maps() {
        let p = Plane::filled(10, 10, 0.4);
        let maps = gradient_maps(&p, &default_kernels()).unwrap();
        assert!(maps.gm.data.iter().all(|&v| v.abs() < 1e-12));
        assert!(maps.rm.data.iter().all(|&v| v.abs() < 1e-12));
        assert!(maps.ro.data.iter().all(|&v| v.abs() < 1e-12));
    }

    #[test]
    fn uniform_ramp_interior_relative_maps_vanish() {
        let w = 16;
        let mut data = vec![0.0; w * w];
        for y in 0..w {
            for x in 0..w {
                data[y * w + x] = 0.05 * x as f64;
            }
        }
        let p = Plane::new(w, w, data);
        let maps = gradient_maps(&p, &default_kernels()).unwrap();
        // interior: away from the replicate border by kernel radius + box radius
        for y in 3..w - 3 {
            for x in 3..w - 3 {
                assert!(maps.ro.get(x, y).abs() < 1e-10);
                assert!(maps.rm.get(x, y).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn gm_invariant_under_offset() {
        let w = 12;
        let mut data = vec![0.0; w * w];
        for (i, v) in data.iter_mut().enumerate() {
            *v = ((i * 2654435761) % 1000) as f64 / 1000.0;
        }
        let p = Plane::new(w, w, data.clone());
        let shifted = Plane::new(w, w, data.iter().map(|v| v + 0.25).collect());
        let k = default_kernels();
        let a = gradient_maps(&p, &k).unwrap();
        let b = gradient_maps(&shifted, &k).unwrap();
        for i in 0..w * w {
            assert!((a.gm.data[i] - b.gm.data[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn hist_variance_constant_map() {
        let p = Plane::filled(5, 5, 0.3);
        let v = hist_variance(&p, 10).unwrap();
        assert!((v - 0.9).abs() < 1e-15);
    }

    #[test]
    fn hist_variance_uniform_histogram() {
        // 16 values spread exactly one per bin
        let data: Vec<f64> = (0..16).map(|i| i as f64).collect();
        let p = Plane::new(16, 1, data);
        let v = hist_variance(&p, 16).unwrap();
        assert!(v.abs() < 1e-15);
    }

    #[test]
    fn hist_variance_bounds() {
        let p = Plane::filled(4, 4, 1.0);
        for bins in [2, 10, 100] {
            let v = hist_variance(&p, bins).unwrap();
            assert!(v >= 0.0 && v <= 1.0 - 1.0 / bins as f64 + 1e-15);
        }
    }

    #[test]
    fn hist_variance_ramp_independent_oracle() {
        let data: Vec<f64> = (0..64).map(|i| (i as f64).sqrt()).collect();
        let p = Plane::new(64, 1, data.clone());
        let bins = 16;
        let got = hist_variance(&p, bins).unwrap();
        // second, independent histogram path: sort + linear scan
        let min = data.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let width = (max - min) / bins as f64;
        let mut counts = vec![0usize; bins];
        for &v in &data {
            let mut b = 0;
            while b + 1 < bins && v >= min + (b + 1) as f64 * width {
                b += 1;
            }
            counts[b] += 1;
        }
        let hbar = 1.0 / bins as f64;
        let expect: f64 = counts
            .iter()
            .map(|&c| (c as f64 / data.len() as f64 - hbar).powi(2))
            .sum();
        assert!((got - expect).abs() < 1e-12, "{got} vs {expect}");
    }

    #[test]
    fn gradient_features_constant_plane() {
        let p = Plane::filled(8, 8, 0.7);
        let f = gradient_features(&p, &default_kernels(), 100).unwrap();
        for v in f {
            assert!((v - 0.99).abs() < 1e-12);
        }
    }

    #[test]
    fn plane_smaller_than_kernel_rejected() {
        let p = Plane::filled(3, 3, 0.5);
        assert!(gradient_maps(&p, &default_kernels()).is_err());
    }
}
