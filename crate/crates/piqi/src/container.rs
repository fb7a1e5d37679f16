//! On-disk model container: a little-endian binary layout holding a full
//! stacked ensemble plus training provenance. Loading reconstructs a model
//! whose predictions are bit-identical to the one that was saved.

use std::path::Path;

use crate::error::{Error, Result};
use crate::gpr::{GprModel, GprModelData, KernelParams};
use crate::stackens::{MemberSpec, StackedEnsemble};

const MAGIC: &[u8; 4] = b"PIQI";
pub const FORMAT_VERSION: u32 = 1;

/// Training provenance recorded alongside the model.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Provenance {
    pub dataset_name: String,
    pub n_train: u64,
    pub master_seed: u64,
    pub tool_version: String,
}

#[derive(Debug)]
pub struct ModelContainer {
    pub layout_version: String,
    pub provenance: Provenance,
    pub ensemble: StackedEnsemble,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u64(s.len() as u64);
        self.0.extend_from_slice(s.as_bytes());
    }
    fn usizes(&mut self, xs: &[usize]) {
        self.u64(xs.len() as u64);
        for &x in xs {
            self.u64(x as u64);
        }
    }
    fn f64s(&mut self, xs: &[f64]) {
        self.u64(xs.len() as u64);
        for &x in xs {
            self.f64(x);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    origin: &'a Path,
}

impl<'a> Reader<'a> {
    fn corrupt(&self, detail: &str) -> Error {
        Error::Container(format!(
            "{}: {detail} (offset {})",
            self.origin.display(),
            self.pos
        ))
    }
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(self.corrupt("truncated"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn len(&mut self) -> Result<usize> {
        let n = self.u64()? as usize;
        // any honest length is bounded by the bytes remaining
        if n > self.buf.len() {
            return Err(self.corrupt("implausible length"));
        }
        Ok(n)
    }
    fn str(&mut self) -> Result<String> {
        let n = self.len()?;
        let bytes = self.take(n)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| self.corrupt("invalid utf-8 string"))
    }
    fn usizes(&mut self) -> Result<Vec<usize>> {
        let n = self.len()?;
        (0..n).map(|_| Ok(self.u64()? as usize)).collect()
    }
    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.len()?;
        (0..n).map(|_| self.f64()).collect()
    }
}

fn write_model(w: &mut Writer, data: &GprModelData) {
    w.f64(data.params.length_scale);
    w.f64(data.params.signal_variance);
    w.f64(data.params.noise_variance);
    w.f64(data.jitter);
    w.f64(data.target_mean);
    w.f64(data.target_std);
    w.f64s(&data.feature_mean);
    w.f64s(&data.feature_std);
    w.f64s(&data.weights);
    let n = data.train_inputs.len();
    let d = data.train_inputs.first().map_or(0, |r| r.len());
    w.u64(n as u64);
    w.u64(d as u64);
    for row in &data.train_inputs {
        for &v in row {
            w.f64(v);
        }
    }
}

fn read_model(r: &mut Reader) -> Result<GprModelData> {
    let length_scale = r.f64()?;
    let signal_variance = r.f64()?;
    let noise_variance = r.f64()?;
    let params = KernelParams::new(length_scale, signal_variance, noise_variance)
        .map_err(|e| r.corrupt(&format!("bad kernel parameters: {e}")))?;
    let jitter = r.f64()?;
    let target_mean = r.f64()?;
    let target_std = r.f64()?;
    let feature_mean = r.f64s()?;
    let feature_std = r.f64s()?;
    let weights = r.f64s()?;
    let n = r.len()?;
    let d = r.len()?;
    if n != weights.len() || d != feature_mean.len() || d != feature_std.len() {
        return Err(r.corrupt("inconsistent model dimensions"));
    }
    let mut train_inputs = Vec::with_capacity(n);
    for _ in 0..n {
        let mut row = Vec::with_capacity(d);
        for _ in 0..d {
            row.push(r.f64()?);
        }
        train_inputs.push(row);
    }
    Ok(GprModelData {
        params,
        train_inputs,
        weights,
        target_mean,
        target_std,
        feature_mean,
        feature_std,
        jitter,
    })
}

impl ModelContainer {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.u32(FORMAT_VERSION);
        w.str(&self.layout_version);
        w.str(&self.provenance.dataset_name);
        w.u64(self.provenance.n_train);
        w.u64(self.provenance.master_seed);
        w.str(&self.provenance.tool_version);
        let e = &self.ensemble;
        w.u64(e.feature_dim as u64);
        w.f64(e.intercept);
        w.usizes(&e.selected);
        w.f64s(&e.weights);
        w.u64(e.curve.len() as u64);
        for &(k, rmse) in &e.curve {
            w.u64(k as u64);
            w.f64(rmse);
        }
        w.u64(e.members.len() as u64);
        for m in &e.members {
            w.u64(m.seed);
            w.usizes(&m.row_indices);
            w.usizes(&m.feature_indices);
            w.u8(m.refit_warning as u8);
            write_model(&mut w, &m.model.to_data());
        }
        w.0
    }

    pub fn from_bytes(buf: &[u8], origin: &Path) -> Result<Self> {
        let mut r = Reader {
            buf,
            pos: 0,
            origin,
        };
        if r.take(4)? != MAGIC {
            return Err(Error::Container(format!(
                "{}: not a model container (bad magic)",
                origin.display()
            )));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Container(format!(
                "{}: unsupported format version {version} (expected {FORMAT_VERSION})",
                origin.display()
            )));
        }
        let layout_version = r.str()?;
        let provenance = Provenance {
            dataset_name: r.str()?,
            n_train: r.u64()?,
            master_seed: r.u64()?,
            tool_version: r.str()?,
        };
        let feature_dim = r.len()?;
        let intercept = r.f64()?;
        let selected = r.usizes()?;
        let weights = r.f64s()?;
        let n_curve = r.len()?;
        let mut curve = Vec::with_capacity(n_curve);
        for _ in 0..n_curve {
            let k = r.u64()? as usize;
            let rmse = r.f64()?;
            curve.push((k, rmse));
        }
        let n_members = r.len()?;
        let mut members = Vec::with_capacity(n_members);
        for _ in 0..n_members {
            let seed = r.u64()?;
            let row_indices = r.usizes()?;
            let feature_indices = r.usizes()?;
            let refit_warning = r.u8()? != 0;
            let data = read_model(&mut r)?;
            if data.feature_mean.len() != feature_indices.len() {
                return Err(r.corrupt("member width disagrees with its feature subset"));
            }
            let model = GprModel::from_data(data)?;
            members.push(MemberSpec {
                seed,
                row_indices,
                feature_indices,
                model,
                refit_warning,
            });
        }
        if r.pos != buf.len() {
            return Err(r.corrupt("trailing bytes after payload"));
        }
        if selected.len() != weights.len() || selected.iter().any(|&i| i >= members.len()) {
            return Err(Error::Container(format!(
                "{}: selection bookkeeping out of range",
                origin.display()
            )));
        }
        Ok(ModelContainer {
            layout_version: layout_version.clone(),
            provenance,
            ensemble: StackedEnsemble {
                members,
                selected,
                intercept,
                weights,
                curve,
                feature_dim,
                layout_version,
            },
        })
    }

    /// Atomic save: write to a sibling temp file, then rename into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes();
        let dir = path.parent().unwrap_or(Path::new("."));
        let tmp = dir.join(format!(
            ".{}.tmp",
            path.file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_else(|| "model".into())
        ));
        let io_err = |source: std::io::Error| Error::Io {
            path: path.to_path_buf(),
            source,
        };
        std::fs::write(&tmp, &bytes).map_err(io_err)?;
        std::fs::rename(&tmp, path).map_err(io_err)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_bytes(&bytes, path)
    }
}
