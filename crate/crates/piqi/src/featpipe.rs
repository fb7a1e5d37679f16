//! Per-image feature orchestration: three dyadic scales, ten channels,
//! consolidated into the fixed 192-entry descriptor.
//!
//! Per scale the layout is block-major:
//!   - 30 gradient histogram variances (grayscale + 9 color channels, 3 each)
//!   - 18 GGD parameters (alpha, beta per color channel)
//!   - 16 AGGD parameters (gamma, beta_l, beta_r, eta per product map of the
//!     grayscale MSCN field)
//! for 64 values per scale, scale-major across {1, 1/2, 1/4}.

use std::path::PathBuf;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::gradfeat::{self, DerivativeKernels};
use crate::imgio::{self, ImagePlanes, Plane};
use crate::manifest::DatasetManifest;
use crate::mscnfeat::{self, MSCN_INTENSITY_SCALE};
use crate::parallel;

/// Total descriptor length.
pub const FEATURE_COUNT: usize = 192;
/// Identifier tying feature dumps, caches and model containers to this layout.
pub const LAYOUT_VERSION: &str = "piqi-192-v1";
/// Minimum image side so the quarter scale still exceeds every window.
pub const MIN_IMAGE_SIDE: usize = 32;

const GRADIENT_CHANNELS: [&str; 10] = ["gray", "R", "G", "B", "Y", "Cb", "Cr", "H", "S", "I"];
const COLOR_CHANNELS: [&str; 9] = ["R", "G", "B", "Y", "Cb", "Cr", "H", "S", "I"];
const SCALES: [&str; 3] = ["1", "1/2", "1/4"];

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    pub values: Vec<f64>,
    pub layout_version: &'static str,
}

/// One layout entry: (scale label, channel label, feature name).
pub type LayoutEntry = (&'static str, &'static str, String);

#[derive(Debug, Clone)]
pub struct FeatureLayout {
    pub entries: Vec<LayoutEntry>,
}

impl FeatureLayout {
    pub fn column_names(&self) -> Vec<String> {
        self.entries
            .iter()
            .map(|(s, c, f)| format!("s{}_{}_{}", s.replace('/', ""), c, f))
            .collect()
    }
}

/// The canonical 192-entry index table used by `extract_features`.
pub fn layout() -> FeatureLayout {
    let mut entries = Vec::with_capacity(FEATURE_COUNT);
    for scale in SCALES {
        for ch in GRADIENT_CHANNELS {
            for f in ["V_GM", "V_RO", "V_RM"] {
                entries.push((scale, ch, f.to_string()));
            }
        }
        for ch in COLOR_CHANNELS {
            for f in ["ggd_alpha", "ggd_beta"] {
                entries.push((scale, ch, f.to_string()));
            }
        }
        for orient in ["H", "D1", "D2", "V"] {
            for f in ["aggd_gamma", "aggd_beta_l", "aggd_beta_r", "aggd_eta"] {
                entries.push((scale, "gray", format!("{orient}_{f}")));
            }
        }
    }
    debug_assert_eq!(entries.len(), FEATURE_COUNT);
    FeatureLayout { entries }
}

fn scale_features(img: &ImagePlanes, kernels: &DerivativeKernels, out: &mut Vec<f64>) -> Result<()> {
    let channels: [&Plane; 10] = [
        &img.gray,
        &img.rgb[0],
        &img.rgb[1],
        &img.rgb[2],
        &img.ycbcr[0],
        &img.ycbcr[1],
        &img.ycbcr[2],
        &img.hsi[0],
        &img.hsi[1],
        &img.hsi[2],
    ];
    for plane in channels {
        out.extend(gradfeat::gradient_features(
            plane,
            kernels,
            gradfeat::DEFAULT_BINS,
        )?);
    }
    let window = mscnfeat::default_window();
    for plane in &channels[1..] {
        let field = mscnfeat::mscn(&plane.scaled(MSCN_INTENSITY_SCALE), &window)?;
        let ggd = mscnfeat::fit_ggd(&field.coeffs.data)?;
        out.push(ggd.alpha);
        out.push(ggd.beta);
    }
    let gray_field = mscnfeat::mscn(&img.gray.scaled(MSCN_INTENSITY_SCALE), &window)?;
    for map in mscnfeat::paired_products(&gray_field)? {
        let fit = mscnfeat::fit_aggd(&map.data)?;
        out.push(fit.gamma);
        out.push(fit.beta_l);
        out.push(fit.beta_r);
        out.push(fit.eta);
    }
    Ok(())
}

/// Extract the full 192-value descriptor. Pure function of the pixel data.
pub fn extract_features(img: &ImagePlanes) -> Result<FeatureVector> {
    if img.width() < MIN_IMAGE_SIDE || img.height() < MIN_IMAGE_SIDE {
        return Err(Error::PlaneTooSmall {
            width: img.width(),
            height: img.height(),
            what: format!("feature extraction (minimum {MIN_IMAGE_SIDE}x{MIN_IMAGE_SIDE})"),
        });
    }
    let kernels = gradfeat::default_kernels();
    let mut values = Vec::with_capacity(FEATURE_COUNT);
    scale_features(img, &kernels, &mut values)?;
    let half = img.downsample_half()?;
    scale_features(&half, &kernels, &mut values)?;
    let quarter = half.downsample_half()?;
    scale_features(&quarter, &kernels, &mut values)?;
    debug_assert_eq!(values.len(), FEATURE_COUNT);
    debug_assert!(values.iter().all(|v| v.is_finite()));
    Ok(FeatureVector {
        values,
        layout_version: LAYOUT_VERSION,
    })
}

/// Result of batch extraction: successful rows keep manifest order;
/// failures carry the offending path and reason.
#[derive(Debug)]
pub struct BatchExtraction {
    pub paths: Vec<PathBuf>,
    pub features: Vec<Vec<f64>>,
    pub scores: Vec<f64>,
    pub failures: Vec<(PathBuf, String)>,
}

/// On-disk feature cache keyed by (file content hash, layout version),
/// rooted at `PIQI_CACHE_DIR` when that variable is set.
pub struct FeatureCache {
    dir: PathBuf,
}

impl FeatureCache {
    pub fn from_env() -> Option<Self> {
        let dir = std::env::var_os("PIQI_CACHE_DIR")?;
        let dir = PathBuf::from(dir);
        std::fs::create_dir_all(&dir).ok()?;
        Some(Self { dir })
    }

    fn entry_path(&self, content: &[u8]) -> PathBuf {
        let mut hasher = Sha256::new();
        hasher.update(content);
        let digest = hasher.finalize();
        let mut hex = String::with_capacity(64);
        for b in digest {
            hex.push_str(&format!("{b:02x}"));
        }
        self.dir.join(format!("{hex}-{LAYOUT_VERSION}.feat"))
    }

    fn get(&self, content: &[u8]) -> Option<Vec<f64>> {
        let bytes = std::fs::read(self.entry_path(content)).ok()?;
        if bytes.len() != FEATURE_COUNT * 8 {
            return None;
        }
        Some(
            bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        )
    }

    fn put(&self, content: &[u8], values: &[f64]) {
        let mut bytes = Vec::with_capacity(values.len() * 8);
        for v in values {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let dest = self.entry_path(content);
        let tmp = dest.with_extension(format!("tmp{}", std::process::id()));
        if std::fs::write(&tmp, &bytes).is_ok() {
            let _ = std::fs::rename(&tmp, &dest);
        }
    }
}

fn extract_one(path: &PathBuf, cache: Option<&FeatureCache>) -> Result<Vec<f64>> {
    let bytes = std::fs::read(path).map_err(|source| Error::UnreadableImage {
        path: path.clone(),
        source,
    })?;
    if let Some(cache) = cache {
        if let Some(values) = cache.get(&bytes) {
            return Ok(values);
        }
    }
    let planes = imgio::decode_image(&bytes, path)?;
    let fv = extract_features(&planes)?;
    if let Some(cache) = cache {
        cache.put(&bytes, &fv.values);
    }
    Ok(fv.values)
}

/// Extract features for every manifest row. Rows are processed with up to
/// `jobs` workers but emitted in manifest order. The batch aborts only when
/// more than 10% of images fail.
pub fn extract_batch(manifest: &DatasetManifest, jobs: usize) -> Result<BatchExtraction> {
    let cache = FeatureCache::from_env();
    let results = parallel::map_indexed(&manifest.rows, jobs, |_, (path, _)| {
        extract_one(path, cache.as_ref())
    });
    let mut out = BatchExtraction {
        paths: Vec::new(),
        features: Vec::new(),
        scores: Vec::new(),
        failures: Vec::new(),
    };
    for ((path, score), result) in manifest.rows.iter().zip(results) {
        match result {
            Ok(values) => {
                out.paths.push(path.clone());
                out.features.push(values);
                out.scores.push(*score);
            }
            Err(e) => out.failures.push((path.clone(), e.chain_string())),
        }
    }
    let total = manifest.rows.len();
    if total > 0 && out.failures.len() * 10 > total {
        return Err(Error::BatchFailure {
            failed: out.failures.len(),
            total,
        });
    }
    Ok(out)
}
