//! Image loading, color space conversion and dyadic downscaling.
//!
//! All planes hold row-major `f64` intensities in `[0,1]`. Color math is
//! BT.601 full-range for luma/chroma and the Gonzalez-Woods formulation
//! for HSI, with achromatic pixels assigned H = S = 0.

use std::path::Path;

use image::DynamicImage;

use crate::error::{Error, Result};

/// A single channel of floating intensities in `[0,1]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Plane {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Plane {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), width * height);
        Self {
            width,
            height,
            data,
        }
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        Self::new(width, height, vec![value; width * height])
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    /// Clamped lookup used for replicate-border padding.
    #[inline]
    pub fn get_clamped(&self, x: isize, y: isize) -> f64 {
        let xc = x.clamp(0, self.width as isize - 1) as usize;
        let yc = y.clamp(0, self.height as isize - 1) as usize;
        self.data[yc * self.width + xc]
    }

    pub fn same_shape(&self, other: &Plane) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// Elementwise scaling, used to move `[0,1]` planes to `[0,255]`
    /// ahead of local standardization.
    pub fn scaled(&self, factor: f64) -> Plane {
        Plane::new(
            self.width,
            self.height,
            self.data.iter().map(|v| v * factor).collect(),
        )
    }
}

/// The ten channels every feature extractor draws from.
#[derive(Debug, Clone)]
pub struct ImagePlanes {
    pub gray: Plane,
    pub rgb: [Plane; 3],
    pub ycbcr: [Plane; 3],
    pub hsi: [Plane; 3],
}

impl ImagePlanes {
    /// Build every derived channel from the RGB triple.
    pub fn from_rgb(r: Plane, g: Plane, b: Plane) -> Result<Self> {
        let gray = to_grayscale(&r, &g, &b)?;
        let ycbcr = to_ycbcr(&r, &g, &b)?;
        let hsi = to_hsi(&r, &g, &b)?;
        Ok(Self {
            gray,
            rgb: [r, g, b],
            ycbcr,
            hsi,
        })
    }

    pub fn width(&self) -> usize {
        self.gray.width
    }

    pub fn height(&self) -> usize {
        self.gray.height
    }

    /// Recompute all channels from 2x2 mean-pooled RGB.
    pub fn downsample_half(&self) -> Result<Self> {
        let r = downsample_half(&self.rgb[0])?;
        let g = downsample_half(&self.rgb[1])?;
        let b = downsample_half(&self.rgb[2])?;
        Self::from_rgb(r, g, b)
    }
}

/// Decode an 8- or 16-bit raster into the ten-channel representation.
/// Grayscale inputs replicate to R = G = B.
pub fn load_image(path: &Path) -> Result<ImagePlanes> {
    let bytes = std::fs::read(path).map_err(|source| Error::UnreadableImage {
        path: path.to_path_buf(),
        source,
    })?;
    decode_image(&bytes, path)
}

/// Decode from an in-memory buffer (the cache layer hashes the same bytes).
pub fn decode_image(bytes: &[u8], path: &Path) -> Result<ImagePlanes> {
    let img = image::load_from_memory(bytes).map_err(|e| Error::UnsupportedFormat {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })?;
    if img.width() == 0 || img.height() == 0 {
        return Err(Error::ZeroArea {
            path: path.to_path_buf(),
        });
    }
    let (w, h) = (img.width() as usize, img.height() as usize);
    let (r, g, b) = match img {
        DynamicImage::ImageLuma16(_) | DynamicImage::ImageLumaA16(_) | DynamicImage::ImageRgb16(_)
        | DynamicImage::ImageRgba16(_) => {
            let rgb = img.to_rgb16();
            let mut r = Vec::with_capacity(w * h);
            let mut g = Vec::with_capacity(w * h);
            let mut b = Vec::with_capacity(w * h);
            for px in rgb.pixels() {
                r.push(px.0[0] as f64 / 65535.0);
                g.push(px.0[1] as f64 / 65535.0);
                b.push(px.0[2] as f64 / 65535.0);
            }
            (r, g, b)
        }
        _ => {
            let rgb = img.to_rgb8();
            let mut r = Vec::with_capacity(w * h);
            let mut g = Vec::with_capacity(w * h);
            let mut b = Vec::with_capacity(w * h);
            for px in rgb.pixels() {
                r.push(px.0[0] as f64 / 255.0);
                g.push(px.0[1] as f64 / 255.0);
                b.push(px.0[2] as f64 / 255.0);
            }
            (r, g, b)
        }
    };
    ImagePlanes::from_rgb(
        Plane::new(w, h, r),
        Plane::new(w, h, g),
        Plane::new(w, h, b),
    )
}

fn check_shapes(r: &Plane, g: &Plane, b: &Plane) -> Result<()> {
    if !r.same_shape(g) || !r.same_shape(b) {
        return Err(Error::DimensionMismatch(
            r.width, r.height, g.width, g.height,
        ));
    }
    Ok(())
}

/// BT.601 luma.
pub fn to_grayscale(r: &Plane, g: &Plane, b: &Plane) -> Result<Plane> {
    check_shapes(r, g, b)?;
    let data = r
        .data
        .iter()
        .zip(&g.data)
        .zip(&b.data)
        .map(|((&r, &g), &b)| (0.299 * r + 0.587 * g + 0.114 * b).clamp(0.0, 1.0))
        .collect();
    Ok(Plane::new(r.width, r.height, data))
}

/// BT.601 full-range YCbCr with Cb/Cr recentered into `[0,1]` by +0.5.
pub fn to_ycbcr(r: &Plane, g: &Plane, b: &Plane) -> Result<[Plane; 3]> {
    check_shapes(r, g, b)?;
    let n = r.data.len();
    let mut y = Vec::with_capacity(n);
    let mut cb = Vec::with_capacity(n);
    let mut cr = Vec::with_capacity(n);
    for i in 0..n {
        let (rv, gv, bv) = (r.data[i], g.data[i], b.data[i]);
        let yv = 0.299 * rv + 0.587 * gv + 0.114 * bv;
        y.push(yv.clamp(0.0, 1.0));
        cb.push(((bv - yv) / 1.772 + 0.5).clamp(0.0, 1.0));
        cr.push(((rv - yv) / 1.402 + 0.5).clamp(0.0, 1.0));
    }
    Ok([
        Plane::new(r.width, r.height, y),
        Plane::new(r.width, r.height, cb),
        Plane::new(r.width, r.height, cr),
    ])
}

/// HSI with H in `[0,1]` (angle / 2pi), S = 1 - 3 min/(R+G+B),
/// I = (R+G+B)/3. Achromatic pixels get H = S = 0.
pub fn to_hsi(r: &Plane, g: &Plane, b: &Plane) -> Result<[Plane; 3]> {
    check_shapes(r, g, b)?;
    let n = r.data.len();
    let mut h = Vec::with_capacity(n);
    let mut s = Vec::with_capacity(n);
    let mut i = Vec::with_capacity(n);
    for idx in 0..n {
        let (rv, gv, bv) = (r.data[idx], g.data[idx], b.data[idx]);
        let sum = rv + gv + bv;
        let intensity = sum / 3.0;
        i.push(intensity.clamp(0.0, 1.0));
        let minc = rv.min(gv).min(bv);
        let maxc = rv.max(gv).max(bv);
        if sum <= 0.0 || maxc - minc < 1e-15 {
            // achromatic convention
            h.push(0.0);
            s.push(0.0);
            continue;
        }
        s.push((1.0 - 3.0 * minc / sum).clamp(0.0, 1.0));
        let num = 0.5 * ((rv - gv) + (rv - bv));
        let den = ((rv - gv) * (rv - gv) + (rv - bv) * (gv - bv)).sqrt();
        let mut theta = (num / den).clamp(-1.0, 1.0).acos();
        if bv > gv {
            theta = 2.0 * std::f64::consts::PI - theta;
        }
        h.push((theta / (2.0 * std::f64::consts::PI)).clamp(0.0, 1.0));
    }
    Ok([
        Plane::new(r.width, r.height, h),
        Plane::new(r.width, r.height, s),
        Plane::new(r.width, r.height, i),
    ])
}

/// Non-overlapping 2x2 mean pooling; an odd trailing row/column is dropped.
pub fn downsample_half(p: &Plane) -> Result<Plane> {
    if p.width < 2 || p.height < 2 {
        return Err(Error::PlaneTooSmall {
            width: p.width,
            height: p.height,
            what: "2x2 mean pooling".into(),
        });
    }
    let (w, h) = (p.width / 2, p.height / 2);
    let mut data = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let a = p.get(2 * x, 2 * y);
            let b = p.get(2 * x + 1, 2 * y);
            let c = p.get(2 * x, 2 * y + 1);
            let d = p.get(2 * x + 1, 2 * y + 1);
            data.push(0.25 * (a + b + c + d));
        }
    }
    Ok(Plane::new(w, h, data))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plane1(v: f64) -> Plane {
        Plane::filled(2, 2, v)
    }

    #[test]
    fn grayscale_weights() {
        let p = to_grayscale(&plane1(1.0), &plane1(1.0), &plane1(1.0)).unwrap();
        assert!(p.data.iter().all(|&v| (v - 1.0).abs() < 1e-12));
        let p = to_grayscale(&plane1(0.0), &plane1(0.0), &plane1(0.0)).unwrap();
        assert!(p.data.iter().all(|&v| v == 0.0));
        let p = to_grayscale(&plane1(1.0), &plane1(0.0), &plane1(0.0)).unwrap();
        assert!(p.data.iter().all(|&v| (v - 0.299).abs() < 1e-12));
    }

    #[test]
    fn ycbcr_achromatic() {
        let [y, cb, cr] = to_ycbcr(&plane1(1.0), &plane1(1.0), &plane1(1.0)).unwrap();
        assert!((y.data[0] - 1.0).abs() < 1e-12);
        assert!((cb.data[0] - 0.5).abs() < 1e-12);
        assert!((cr.data[0] - 0.5).abs() < 1e-12);
        let [y, cb, cr] = to_ycbcr(&plane1(0.0), &plane1(0.0), &plane1(0.0)).unwrap();
        assert!(y.data[0] == 0.0 && (cb.data[0] - 0.5).abs() < 1e-12 && (cr.data[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn ycbcr_pure_red_matches_matrix() {
        // evaluate the BT.601 matrix directly for (1,0,0)
        let yv: f64 = 0.299;
        let cbv = (0.0 - yv) / 1.772 + 0.5;
        let crv = (1.0 - yv) / 1.402 + 0.5;
        let [y, cb, cr] = to_ycbcr(&plane1(1.0), &plane1(0.0), &plane1(0.0)).unwrap();
        assert!((y.data[0] - yv).abs() < 1e-12);
        assert!((cb.data[0] - cbv).abs() < 1e-12);
        assert!((cr.data[0] - crv.min(1.0)).abs() < 1e-12);
    }

    #[test]
    fn hsi_pure_red() {
        let [h, s, i] = to_hsi(&plane1(1.0), &plane1(0.0), &plane1(0.0)).unwrap();
        assert!(h.data[0].abs() < 1e-12);
        assert!((s.data[0] - 1.0).abs() < 1e-12);
        assert!((i.data[0] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn hsi_achromatic_convention() {
        let [h, s, i] = to_hsi(&plane1(1.0), &plane1(1.0), &plane1(1.0)).unwrap();
        assert!(h.data[0] == 0.0 && s.data[0] == 0.0 && (i.data[0] - 1.0).abs() < 1e-12);
        let [h, s, i] = to_hsi(&plane1(0.0), &plane1(0.0), &plane1(0.0)).unwrap();
        assert!(h.data[0] == 0.0 && s.data[0] == 0.0 && i.data[0] == 0.0);
    }

    /// HSI -> RGB inverse used only as a round-trip oracle.
    fn hsi_to_rgb(h: f64, s: f64, i: f64) -> (f64, f64, f64) {
        use std::f64::consts::PI;
        let hrad = h * 2.0 * PI;
        let third = 2.0 * PI / 3.0;
        let sector = |h: f64| {
            let x = i * (1.0 - s);
            let y = i * (1.0 + s * h.cos() / (PI / 3.0 - h).cos());
            let z = 3.0 * i - (x + y);
            (x, y, z)
        };
        if hrad < third {
            let (b, r, g) = sector(hrad);
            (r, g, b)
        } else if hrad < 2.0 * third {
            let (r, g, b) = sector(hrad - third);
            (r, g, b)
        } else {
            let (g, b, r) = sector(hrad - 2.0 * third);
            (r, g, b)
        }
    }

    #[test]
    fn hsi_round_trip() {
        let mut state = 0x12345u64;
        let mut next = move || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 11) as f64 / (1u64 << 53) as f64
        };
        for _ in 0..500 {
            let (r, g, b) = (next(), next(), next());
            if r + g + b <= 1e-9 {
                continue;
            }
            let rp = Plane::new(1, 1, vec![r]);
            let gp = Plane::new(1, 1, vec![g]);
            let bp = Plane::new(1, 1, vec![b]);
            let [h, s, i] = to_hsi(&rp, &gp, &bp).unwrap();
            let (r2, g2, b2) = hsi_to_rgb(h.data[0], s.data[0], i.data[0]);
            assert!((r - r2).abs() < 1e-9, "{r} vs {r2}");
            assert!((g - g2).abs() < 1e-9, "{g} vs {g2}");
            assert!((b - b2).abs() < 1e-9, "{b} vs {b2}");
        }
    }

    #[test]
    fn downsample_block_mean() {
        let p = Plane::new(2, 2, vec![0.0, 1.0, 1.0, 0.0]);
        let d = downsample_half(&p).unwrap();
        assert_eq!((d.width, d.height), (1, 1));
        assert!((d.data[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn downsample_odd_crops() {
        let p = Plane::new(3, 3, vec![1.0, 2.0, 9.0, 3.0, 4.0, 9.0, 9.0, 9.0, 9.0]);
        let d = downsample_half(&p).unwrap();
        assert_eq!((d.width, d.height), (1, 1));
        assert!((d.data[0] - 2.5).abs() < 1e-15);
    }

    #[test]
    fn downsample_too_small() {
        let p = Plane::new(1, 1, vec![0.5]);
        assert!(downsample_half(&p).is_err());
    }

    #[test]
    fn downsample_twice_quarter_dims() {
        let p = Plane::filled(13, 9, 0.25);
        let d1 = downsample_half(&p).unwrap();
        assert_eq!((d1.width, d1.height), (6, 4));
        let d2 = downsample_half(&d1).unwrap();
        assert_eq!((d2.width, d2.height), (3, 2));
        assert!(d2.data.iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn load_image_roundtrip_white_black() {
        let dir = tempfile::tempdir().unwrap();
        for (name, val) in [("white.png", 255u8), ("black.png", 0u8)] {
            let path = dir.path().join(name);
            let img = image::RgbImage::from_pixel(2, 2, image::Rgb([val, val, val]));
            img.save(&path).unwrap();
            let planes = load_image(&path).unwrap();
            let expect = val as f64 / 255.0;
            assert!((planes.gray.data[0] - expect).abs() < 1e-12);
            assert!((planes.ycbcr[0].data[0] - expect).abs() < 1e-12);
            assert!((planes.hsi[2].data[0] - expect).abs() < 1e-12);
            assert!(planes.hsi[1].data[0] == 0.0);
        }
    }

    #[test]
    fn load_image_shape_preserved() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rect.png");
        image::RgbImage::new(4, 3).save(&path).unwrap();
        let planes = load_image(&path).unwrap();
        assert_eq!((planes.width(), planes.height()), (4, 3));
        for p in planes
            .rgb
            .iter()
            .chain(planes.ycbcr.iter())
            .chain(planes.hsi.iter())
        {
            assert_eq!((p.width, p.height), (4, 3));
        }
    }

    #[test]
    fn load_image_errors_distinct() {
        let missing = load_image(Path::new("/nonexistent/file.png"));
        assert!(matches!(missing, Err(Error::UnreadableImage { .. })));
        let dir = tempfile::tempdir().unwrap();
        let bad = dir.path().join("junk.png");
        std::fs::write(&bad, b"not an image").unwrap();
        assert!(matches!(
            load_image(&bad),
            Err(Error::UnsupportedFormat { .. })
        ));
    }
}
