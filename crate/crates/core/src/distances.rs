//! Fréchet and kernel distances between clip-level feature sets.
//!
//! Clip features are averages of a deterministic spectral map over half
//! overlapping windows. Fréchet distances are returned squared by
//! [`frechet_distance_squared`]; reports carry the square root.

use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, SymmetricEigen};
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{invalid, io_err, CoreError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct FeatureConfig {
    /// Window length in samples (even).
    pub window: usize,
    /// Number of lowest DFT bins kept.
    pub dim: usize,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self { window: 480, dim: 64 }
    }
}

impl FeatureConfig {
    pub fn hop(&self) -> usize {
        self.window / 2
    }

    pub fn validate(&self) -> Result<()> {
        if self.window < 2 || self.window % 2 != 0 {
            return Err(CoreError::Config(format!("feature window must be even and >= 2, got {}", self.window)));
        }
        if self.dim == 0 || self.dim > self.window / 2 + 1 {
            return Err(CoreError::Config(format!(
                "feature dim {} outside 1..={}",
                self.dim,
                self.window / 2 + 1
            )));
        }
        Ok(())
    }
}

/// `f(w) = log(1 + |DFT(hann ⊙ w)|²)` over the lowest `dim` bins.
pub struct SurrogateExtractor {
    cfg: FeatureConfig,
    taper: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
}

impl SurrogateExtractor {
    pub fn new(cfg: FeatureConfig) -> Result<Self> {
        cfg.validate()?;
        let w = cfg.window;
        // Periodic Hann.
        let taper = (0..w)
            .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / w as f64).cos())
            .collect();
        let fft = FftPlanner::new().plan_fft_forward(w);
        Ok(Self { cfg, taper, fft })
    }

    pub fn config(&self) -> FeatureConfig {
        self.cfg
    }

    pub fn window_features(&self, window: &[f64]) -> Result<Vec<f64>> {
        if window.len() != self.cfg.window {
            return Err(invalid(
                "surrogate_features",
                format!("window of {} samples, expected {}", window.len(), self.cfg.window),
            ));
        }
        let mut buf: Vec<Complex<f64>> = window
            .iter()
            .zip(&self.taper)
            .map(|(x, t)| Complex::new(x * t, 0.0))
            .collect();
        self.fft.process(&mut buf);
        Ok(buf[..self.cfg.dim].iter().map(|c| c.norm_sqr().ln_1p()).collect())
    }

    /// Number of windows at hop `w/2` in a clip of `len` samples.
    pub fn window_count(&self, len: usize) -> usize {
        if len < self.cfg.window {
            0
        } else {
            (len - self.cfg.window) / self.cfg.hop() + 1
        }
    }

    /// Mean of the window features over offsets `i·w/2`.
    pub fn clip_features(&self, audio: &[f64]) -> Result<Vec<f64>> {
        let m = self.window_count(audio.len());
        if m == 0 {
            return Err(invalid(
                "clip_features",
                format!("clip of {} samples is shorter than the window {}", audio.len(), self.cfg.window),
            ));
        }
        let mut acc = vec![0.0; self.cfg.dim];
        for i in 0..m {
            let start = i * self.cfg.hop();
            let f = self.window_features(&audio[start..start + self.cfg.window])?;
            acc.iter_mut().zip(&f).for_each(|(a, v)| *a += v);
        }
        acc.iter_mut().for_each(|a| *a /= m as f64);
        Ok(acc)
    }

    pub fn feature_matrix<A: AsRef<[f64]>>(&self, clips: &[A]) -> Result<FeatureMatrix> {
        let rows = clips
            .iter()
            .map(|c| self.clip_features(c.as_ref()))
            .collect::<Result<Vec<_>>>()?;
        FeatureMatrix::from_rows(&rows)
    }
}

/// `N × D` row-major features, one row per clip.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    n: usize,
    d: usize,
    data: Vec<f64>,
}

const GTFM_MAGIC: &[u8; 4] = b"GTFM";
const GTFM_VERSION: u32 = 1;

impl FeatureMatrix {
    pub fn new(n: usize, d: usize, data: Vec<f64>) -> Result<Self> {
        if n == 0 || d == 0 || data.len() != n * d {
            return Err(invalid("feature_matrix", format!("{} values for {n}x{d}", data.len())));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(invalid("feature_matrix", "non-finite feature"));
        }
        Ok(Self { n, d, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let d = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != d) {
            return Err(invalid("feature_matrix", "ragged rows"));
        }
        Self::new(rows.len(), d, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.n
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.d..(i + 1) * self.d]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Rows `start..start + len`.
    pub fn slice(&self, start: usize, len: usize) -> Result<Self> {
        if start + len > self.n {
            return Err(invalid("feature_matrix", format!("rows {start}..{} of {}", start + len, self.n)));
        }
        Self::new(len, self.d, self.data[start * self.d..(start + len) * self.d].to_vec())
    }

    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(GTFM_MAGIC)?;
        w.write_all(&GTFM_VERSION.to_le_bytes())?;
        w.write_all(&(self.n as u64).to_le_bytes())?;
        w.write_all(&(self.d as u64).to_le_bytes())?;
        for v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> std::result::Result<Self, String> {
        let mut b4 = [0u8; 4];
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b4).map_err(|e| e.to_string())?;
        if &b4 != GTFM_MAGIC {
            return Err("bad magic".into());
        }
        r.read_exact(&mut b4).map_err(|e| e.to_string())?;
        let version = u32::from_le_bytes(b4);
        if version != GTFM_VERSION {
            return Err(format!("unsupported version {version}"));
        }
        r.read_exact(&mut b8).map_err(|e| e.to_string())?;
        let n = u64::from_le_bytes(b8) as usize;
        r.read_exact(&mut b8).map_err(|e| e.to_string())?;
        let d = u64::from_le_bytes(b8) as usize;
        let total = n.checked_mul(d).ok_or("size overflow")?;
        let mut data = Vec::with_capacity(total.min(1 << 24));
        for _ in 0..total {
            r.read_exact(&mut b8).map_err(|e| format!("truncated payload: {e}"))?;
            data.push(f64::from_le_bytes(b8));
        }
        if r.read(&mut b4).map_err(|e| e.to_string())? != 0 {
            return Err("trailing bytes".into());
        }
        Self::new(n, d, data).map_err(|e| e.to_string())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(io_err(path))?;
        let mut w = std::io::BufWriter::new(f);
        self.write_to(&mut w).and_then(|_| w.flush()).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(io_err(path))?;
        Self::read_from(&mut std::io::BufReader::new(f)).map_err(|reason| CoreError::Format {
            path: path.to_path_buf(),
            reason,
        })
    }
}

/// `((xᵀy)/D + 1)³`.
pub fn poly_kernel(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.is_empty() {
        return Err(invalid("poly_kernel", format!("dimensions {} and {}", x.len(), y.len())));
    }
    Ok(kernel(x, y))
}

fn kernel(x: &[f64], y: &[f64]) -> f64 {
    let mut dot = 0.0;
    for (a, b) in x.iter().zip(y) {
        dot += a * b;
    }
    let t = dot / x.len() as f64 + 1.0;
    t * t * t
}

fn check_pair(op: &'static str, x: &FeatureMatrix, y: &FeatureMatrix) -> Result<()> {
    if x.rows() < 2 || y.rows() < 2 {
        return Err(invalid(op, format!("need at least 2 rows per side, got {} and {}", x.rows(), y.rows())));
    }
    if x.dim() != y.dim() {
        return Err(invalid(op, format!("feature dims {} and {}", x.dim(), y.dim())));
    }
    Ok(())
}

/// Unbiased MMD² with the cubic polynomial kernel.
pub fn mmd2_unbiased(x: &FeatureMatrix, y: &FeatureMatrix) -> Result<f64> {
    check_pair("mmd2_unbiased", x, y)?;
    let (m, n) = (x.rows(), y.rows());
    let mut sxx = 0.0;
    for i in 0..m {
        for j in 0..m {
            if i != j {
                sxx += kernel(x.row(i), x.row(j));
            }
        }
    }
    let mut syy = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                syy += kernel(y.row(i), y.row(j));
            }
        }
    }
    let mut sxy = 0.0;
    for i in 0..m {
        for j in 0..n {
            sxy += kernel(x.row(i), y.row(j));
        }
    }
    let (mf, nf) = (m as f64, n as f64);
    Ok(sxx / (mf * (mf - 1.0)) + syy / (nf * (nf - 1.0)) - 2.0 * sxy / (mf * nf))
}

fn mean_cov(x: &FeatureMatrix) -> (Vec<f64>, DMatrix<f64>) {
    let (n, d) = (x.rows(), x.dim());
    let mut mean = vec![0.0; d];
    for i in 0..n {
        mean.iter_mut().zip(x.row(i)).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let centered = DMatrix::from_fn(n, d, |i, j| x.row(i)[j] - mean[j]);
    let cov = centered.transpose() * &centered / (n as f64 - 1.0);
    (mean, cov)
}

/// Symmetric PSD square root, clamping negative eigenvalues. Returns the
/// root and the clamped negative mass.
fn psd_sqrt(a: &DMatrix<f64>) -> (DMatrix<f64>, f64) {
    let sym = (a + a.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let clamped: f64 = eig.eigenvalues.iter().filter(|&&l| l < 0.0).map(|l| -l).sum();
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    let q = &eig.eigenvectors;
    (q * DMatrix::from_diagonal(&roots) * q.transpose(), clamped)
}

fn warn_clamp(clamped: f64, spectrum: f64) {
    if clamped > 1e-6 * spectrum.max(f64::MIN_POSITIVE) {
        log::warn!("frechet: clamped negative eigenvalue mass {clamped:.3e} of spectrum {spectrum:.3e}");
    }
}

/// `‖μX − μY‖² + Tr(ΣX + ΣY − 2(ΣX ΣY)^½)` with covariance divisor `N − 1`.
pub fn frechet_distance_squared(x: &FeatureMatrix, y: &FeatureMatrix) -> Result<f64> {
    check_pair("frechet_distance", x, y)?;
    let (mx, cx) = mean_cov(x);
    let (my, cy) = mean_cov(y);
    let mean_term: f64 = mx.iter().zip(&my).map(|(a, b)| (a - b) * (a - b)).sum();
    let (sx, clamped_x) = psd_sqrt(&cx);
    warn_clamp(clamped_x, cx.trace().abs());
    let inner = &sx * &cy * &sx;
    let sym = (&inner + inner.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let clamped: f64 = eig.eigenvalues.iter().filter(|&&l| l < 0.0).map(|l| -l).sum();
    warn_clamp(clamped, eig.eigenvalues.iter().map(|l| l.abs()).sum());
    let cross: f64 = eig.eigenvalues.iter().map(|l| l.max(0.0).sqrt()).sum();
    Ok(mean_term + cx.trace() + cy.trace() - 2.0 * cross)
}

/// Square root of [`frechet_distance_squared`], negative estimates clamped to 0.
pub fn frechet_distance(x: &FeatureMatrix, y: &FeatureMatrix) -> Result<f64> {
    Ok(frechet_distance_squared(x, y)?.max(0.0).sqrt())
}

/// Surrogate distances. Fréchet entries are square roots of the squared estimate.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DistanceReport {
    pub fdsd_s: Option<f64>,
    pub kdsd_s: Option<f64>,
    pub cfdsd_s: Option<f64>,
    pub ckdsd_s: Option<f64>,
    pub n: usize,
    pub dim: usize,
}

impl DistanceReport {
    pub fn to_text(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.9e}"));
        format!(
            "# frechet values are square roots of the squared estimate\nn: {}\ndim: {}\nfdsd_s: {}\nkdsd_s: {}\ncfdsd_s: {}\nckdsd_s: {}\n",
            self.n,
            self.dim,
            fmt(self.fdsd_s),
            fmt(self.kdsd_s),
            fmt(self.cfdsd_s),
            fmt(self.ckdsd_s)
        )
    }
}

/// Distances of `gen` against a conditioning-matched real set and/or an
/// independent real set.
pub fn estimate_from_features(
    gen: &FeatureMatrix,
    matched: Option<&FeatureMatrix>,
    independent: Option<&FeatureMatrix>,
) -> Result<DistanceReport> {
    let mut r = DistanceReport {
        fdsd_s: None,
        kdsd_s: None,
        cfdsd_s: None,
        ckdsd_s: None,
        n: gen.rows(),
        dim: gen.dim(),
    };
    if let Some(m) = matched {
        if m.rows() != gen.rows() {
            return Err(invalid(
                "estimate_distances",
                format!("matched sets differ in size: {} vs {}", gen.rows(), m.rows()),
            ));
        }
        r.cfdsd_s = Some(frechet_distance(gen, m)?);
        r.ckdsd_s = Some(mmd2_unbiased(gen, m)?);
    }
    if let Some(i) = independent {
        r.fdsd_s = Some(frechet_distance(gen, i)?);
        r.kdsd_s = Some(mmd2_unbiased(gen, i)?);
    }
    Ok(r)
}

/// With `matched`, `real[..N]` is index-aligned with `gen` (same
/// conditioning) and `real[N..2N]`, when present, is the independent split.
/// Without it, `real[..N]` is the independent split.
pub fn estimate_distances<A: AsRef<[f64]>>(
    gen: &[A],
    real: &[A],
    matched: bool,
    ex: &SurrogateExtractor,
) -> Result<DistanceReport> {
    estimate_from_sets(&ex.feature_matrix(gen)?, &ex.feature_matrix(real)?, matched)
}

/// [`estimate_distances`] on clip features, one row per clip.
pub fn estimate_from_sets(gen: &FeatureMatrix, real: &FeatureMatrix, matched: bool) -> Result<DistanceReport> {
    let n = gen.rows();
    if matched {
        if real.rows() != n && real.rows() != 2 * n {
            return Err(invalid(
                "estimate_distances",
                format!("matched mode needs {n} or {} real clips, got {}", 2 * n, real.rows()),
            ));
        }
        let ind = if real.rows() == 2 * n {
            Some(real.slice(n, n)?)
        } else {
            None
        };
        estimate_from_features(gen, Some(&real.slice(0, n)?), ind.as_ref())
    } else {
        if real.rows() < n {
            return Err(invalid("estimate_distances", format!("need {n} real clips, got {}", real.rows())));
        }
        estimate_from_features(gen, None, Some(&real.slice(0, n)?))
    }
}
