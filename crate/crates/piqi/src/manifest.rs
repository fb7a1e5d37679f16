//! Dataset manifests: image paths plus raw subjective scores with the
//! range/polarity metadata needed to normalize them.
//!
//! The on-disk format is CSV with a leading `# key=value` comment block:
//!
//! ```text
//! # dataset_name=csiq
//! # score_min=0
//! # score_max=1
//! # polarity=higher-worse
//! path,score
//! images/1600.dst.png,0.52
//! ```

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Polarity {
    HigherBetter,
    HigherWorse,
}

impl FromStr for Polarity {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "higher-better" => Ok(Polarity::HigherBetter),
            "higher-worse" => Ok(Polarity::HigherWorse),
            other => Err(format!(
                "polarity must be 'higher-better' or 'higher-worse', got '{other}'"
            )),
        }
    }
}

impl fmt::Display for Polarity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Polarity::HigherBetter => write!(f, "higher-better"),
            Polarity::HigherWorse => write!(f, "higher-worse"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct DatasetManifest {
    pub dataset_name: String,
    pub score_min: f64,
    pub score_max: f64,
    pub polarity: Polarity,
    pub rows: Vec<(PathBuf, f64)>,
}

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text, path)
    }

    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let malformed = |row: usize, detail: String| Error::MalformedManifest {
            path: origin.to_path_buf(),
            row,
            detail,
        };
        let mut dataset_name = None;
        let mut score_min = None;
        let mut score_max = None;
        let mut polarity = None;
        let mut rows = Vec::new();
        let base = origin.parent().unwrap_or(Path::new(""));
        for (idx, line) in text.lines().enumerate() {
            let row = idx + 1;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(meta) = line.strip_prefix('#') {
                let meta = meta.trim();
                let (key, value) = meta
                    .split_once('=')
                    .ok_or_else(|| malformed(row, format!("metadata line without '=': {meta}")))?;
                let (key, value) = (key.trim(), value.trim());
                match key {
                    "dataset_name" => dataset_name = Some(value.to_string()),
                    "score_min" => {
                        score_min = Some(value.parse::<f64>().map_err(|e| {
                            malformed(row, format!("score_min not a number: {e}"))
                        })?)
                    }
                    "score_max" => {
                        score_max = Some(value.parse::<f64>().map_err(|e| {
                            malformed(row, format!("score_max not a number: {e}"))
                        })?)
                    }
                    "polarity" => {
                        polarity =
                            Some(value.parse::<Polarity>().map_err(|e| malformed(row, e))?)
                    }
                    other => return Err(malformed(row, format!("unknown metadata key '{other}'"))),
                }
                continue;
            }
            if line == "path,score" {
                continue;
            }
            let (p, s) = line
                .rsplit_once(',')
                .ok_or_else(|| malformed(row, "expected 'path,score'".into()))?;
            let p = p.trim();
            if p.is_empty() {
                return Err(malformed(row, "empty image path".into()));
            }
            let score = s
                .trim()
                .parse::<f64>()
                .map_err(|e| malformed(row, format!("score not a number: {e}")))?;
            let path = if Path::new(p).is_absolute() {
                PathBuf::from(p)
            } else {
                base.join(p)
            };
            rows.push((path, score));
        }
        let dataset_name = dataset_name.unwrap_or_else(|| "unnamed".to_string());
        let score_min =
            score_min.ok_or_else(|| malformed(0, "missing '# score_min=' metadata".into()))?;
        let score_max =
            score_max.ok_or_else(|| malformed(0, "missing '# score_max=' metadata".into()))?;
        let polarity = polarity.unwrap_or(Polarity::HigherBetter);
        let m = DatasetManifest {
            dataset_name,
            score_min,
            score_max,
            polarity,
            rows,
        };
        for (idx, (_, s)) in m.rows.iter().enumerate() {
            if *s < m.score_min || *s > m.score_max {
                return Err(malformed(
                    idx + 1,
                    format!(
                        "score {s} outside declared range [{}, {}]",
                        m.score_min, m.score_max
                    ),
                ));
            }
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        out.push_str(&format!("# dataset_name={}\n", self.dataset_name));
        out.push_str(&format!("# score_min={}\n", self.score_min));
        out.push_str(&format!("# score_max={}\n", self.score_max));
        out.push_str(&format!("# polarity={}\n", self.polarity));
        out.push_str("path,score\n");
        for (p, s) in &self.rows {
            out.push_str(&format!("{},{}\n", p.display(), s));
        }
        std::fs::write(path, out).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    /// Affine compression of raw scores into `[0,1]`. With `unify_polarity`
    /// set, higher-worse scales are flipped so higher always means better.
    pub fn normalize_scores(&self, unify_polarity: bool) -> Result<Vec<f64>> {
        if self.score_max <= self.score_min {
            return Err(Error::InvalidParameter(format!(
                "score_max ({}) must exceed score_min ({})",
                self.score_max, self.score_min
            )));
        }
        let span = self.score_max - self.score_min;
        Ok(self
            .rows
            .iter()
            .map(|(_, s)| {
                let n = (s - self.score_min) / span;
                if unify_polarity && self.polarity == Polarity::HigherWorse {
                    1.0 - n
                } else {
                    n
                }
            })
            .collect())
    }

    /// Inverse of `normalize_scores` without polarity unification.
    pub fn denormalize(&self, normalized: f64) -> f64 {
        self.score_min + normalized * (self.score_max - self.score_min)
    }
}
