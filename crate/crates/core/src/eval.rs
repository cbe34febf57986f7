//! Distribution and paired image metrics.

use std::collections::BTreeMap;
use std::fs::File;
use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::degrade::Image;
use crate::error::{invalid, Error, Result};
use crate::graph::Tape;
use crate::imageio::write_grid;
use crate::nets::{Conv, ParamStore};
use crate::tensor::Tensor;

/// Output width of the random-projection extractor.
pub const PROJECTION_DIM: usize = 64;
pub const DEFAULT_EXTRACTOR_SEED: u64 = 0x5eed;
pub const PSNR_CAP: f64 = 99.0;
pub const SSIM_WINDOW: usize = 8;
/// Relative eigenvalue tolerance for covariance matrices.
pub const PSD_TOL: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExtractorKind {
    /// Raw pixel values.
    Pixels,
    /// Fixed Gaussian projection of the pixels to [`PROJECTION_DIM`] values.
    RandProj,
    /// Untrained convolutional embedding with fixed weights.
    RandConv,
}

impl ExtractorKind {
    pub fn parse(name: &str) -> Result<Self> {
        match name.to_ascii_lowercase().as_str() {
            "pixels" => Ok(Self::Pixels),
            "randproj" => Ok(Self::RandProj),
            "randconv" => Ok(Self::RandConv),
            other => invalid(format!("unknown extractor {other:?} (pixels, randproj, randconv)")),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Pixels => "pixels",
            Self::RandProj => "randproj",
            Self::RandConv => "randconv",
        }
    }
}

enum Embedding {
    Pixels,
    Projection(DMatrix<f64>),
    Conv { store: ParamStore<f64>, c1: Conv, c2: Conv },
}

/// Image-to-vector map fixed by its kind, input shape and seed.
pub struct FeatureExtractor {
    kind: ExtractorKind,
    shape: (usize, usize, usize),
    embedding: Embedding,
}

impl FeatureExtractor {
    pub fn new(kind: ExtractorKind, shape: (usize, usize, usize), seed: u64) -> Result<Self> {
        let (c, h, w) = shape;
        if c == 0 || h == 0 || w == 0 {
            return invalid("extractor input shape must be non-empty");
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let embedding = match kind {
            ExtractorKind::Pixels => Embedding::Pixels,
            ExtractorKind::RandProj => {
                let d = c * h * w;
                let normal = Normal::new(0.0, 1.0 / (d as f64).sqrt()).expect("valid std");
                Embedding::Projection(DMatrix::from_fn(PROJECTION_DIM, d, |_, _| normal.sample(&mut rng)))
            }
            ExtractorKind::RandConv => {
                let mut store = ParamStore::new();
                let c1 = Conv::new(&mut store, "c1", c, 16, 3, &mut rng);
                let c2 = Conv::new(&mut store, "c2", 16, 32, 3, &mut rng);
                Embedding::Conv { store, c1, c2 }
            }
        };
        Ok(Self { kind, shape, embedding })
    }

    pub fn kind(&self) -> ExtractorKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        let (c, h, w) = self.shape;
        match self.embedding {
            Embedding::Pixels => c * h * w,
            Embedding::Projection(_) => PROJECTION_DIM,
            Embedding::Conv { .. } => 64,
        }
    }

    pub fn extract(&self, img: &Image<f64>) -> Result<Vec<f64>> {
        if (img.channels(), img.height(), img.width()) != self.shape {
            return invalid(format!(
                "extractor expects {:?}, got {:?}",
                self.shape,
                (img.channels(), img.height(), img.width())
            ));
        }
        match &self.embedding {
            Embedding::Pixels => Ok(img.data().to_vec()),
            Embedding::Projection(m) => Ok((m * DVector::from_column_slice(img.data())).iter().copied().collect()),
            Embedding::Conv { store, c1, c2 } => {
                // two conv stages, then per-channel mean and spread of the last map
                let (c, h, w) = self.shape;
                let mut tape = Tape::new();
                let p = store.bind(&mut tape, false);
                let x = tape.constant(Tensor::from_vec(&[1, c, h, w], img.data().to_vec())?);
                let x = tape.affine(x, 2.0, -1.0);
                let f = c1.forward(&mut tape, &p, x)?;
                let f = tape.relu(f);
                let f = if h % 2 == 0 && w % 2 == 0 { tape.avgpool2x(f)? } else { f };
                let f = c2.forward(&mut tape, &p, f)?;
                let f = tape.relu(f);
                let t = tape.value(f);
                let per = t.item_len() / 32;
                let mut out = Vec::with_capacity(64);
                for ch in 0..32 {
                    let v = &t.data()[ch * per..(ch + 1) * per];
                    let mean = v.iter().sum::<f64>() / per as f64;
                    out.push(mean);
                    out.push((v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / per as f64).sqrt());
                }
                Ok(out)
            }
        }
    }
}

/// Neumaier-compensated running sum.
#[derive(Clone, Copy, Debug, Default)]
struct Compensated {
    sum: f64,
    c: f64,
}

impl Compensated {
    fn add(&mut self, v: f64) {
        let t = self.sum + v;
        if self.sum.abs() >= v.abs() {
            self.c += (self.sum - t) + v;
        } else {
            self.c += (v - t) + self.sum;
        }
        self.sum = t;
    }

    fn merge(&mut self, o: &Compensated) {
        self.add(o.sum);
        self.add(o.c);
    }

    fn value(&self) -> f64 {
        self.sum + self.c
    }
}

/// Mergeable `(count, Σf, Σffᵀ)` accumulator.
#[derive(Clone, Debug)]
pub struct MomentAccumulator {
    dim: usize,
    count: usize,
    sum: Vec<Compensated>,
    outer: Vec<Compensated>,
}

impl MomentAccumulator {
    pub fn new(dim: usize) -> Self {
        Self { dim, count: 0, sum: vec![Compensated::default(); dim], outer: vec![Compensated::default(); dim * dim] }
    }

    pub fn push(&mut self, f: &[f64]) -> Result<()> {
        if f.len() != self.dim {
            return invalid(format!("feature length {} vs {}", f.len(), self.dim));
        }
        self.count += 1;
        for (i, &a) in f.iter().enumerate() {
            self.sum[i].add(a);
            for (j, &b) in f.iter().enumerate().skip(i) {
                self.outer[i * self.dim + j].add(a * b);
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &MomentAccumulator) -> Result<()> {
        if other.dim != self.dim {
            return invalid("cannot merge accumulators of different width");
        }
        self.count += other.count;
        self.sum.iter_mut().zip(&other.sum).for_each(|(a, b)| a.merge(b));
        self.outer.iter_mut().zip(&other.outer).for_each(|(a, b)| a.merge(b));
        Ok(())
    }

    pub fn count(&self) -> usize {
        self.count
    }

    /// Sample mean and unbiased covariance.
    pub fn finish(&self) -> Result<MomentStats> {
        if self.count < 2 {
            return invalid(format!("moments need at least 2 samples, got {}", self.count));
        }
        let n = self.count as f64;
        let d = self.dim;
        let mean = DVector::from_fn(d, |i, _| self.sum[i].value() / n);
        let mut cov = DMatrix::zeros(d, d);
        for i in 0..d {
            for j in i..d {
                let v = (self.outer[i * d + j].value() - n * mean[i] * mean[j]) / (n - 1.0);
                cov[(i, j)] = v;
                cov[(j, i)] = v;
            }
        }
        Ok(MomentStats { mean, cov, count: self.count })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MomentStats {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub count: usize,
}

impl MomentStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Mean and unbiased covariance of extracted features.
pub fn feature_moments(images: &[Image<f64>], extractor: &FeatureExtractor) -> Result<MomentStats> {
    if images.len() < 2 {
        return invalid(format!("moments need at least 2 images, got {}", images.len()));
    }
    let mut acc = MomentAccumulator::new(extractor.dim());
    for img in images {
        acc.push(&extractor.extract(img)?)?;
    }
    acc.finish()
}

fn symmetric_eigen(m: &DMatrix<f64>) -> SymmetricEigen<f64, nalgebra::Dyn> {
    let sym = (m + m.transpose()) * 0.5;
    SymmetricEigen::new(sym)
}

/// Eigendecomposition of a covariance, rejecting eigenvalues below
/// `−PSD_TOL·max(1, |λ|max)`.
fn checked_eigen(m: &DMatrix<f64>, label: &str) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    let eig = symmetric_eigen(m);
    let max = eig.eigenvalues.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
    let min = eig.eigenvalues.min();
    if min < -PSD_TOL * max.max(1.0) {
        return Err(Error::Numerical(format!(
            "{label} covariance is not PSD: smallest eigenvalue {min:e}, largest {max:e}, condition {:e}",
            max / min.abs().max(f64::MIN_POSITIVE)
        )));
    }
    Ok(eig)
}

/// Fréchet distance `‖m_a − m_b‖² + Tr(C_a + C_b − 2(C_a C_b)^{1/2})`, clamped
/// at 0. The trace of the root is taken from `C_b^{1/2} C_a C_b^{1/2}` with
/// negative eigenvalues clipped to 0.
pub fn fid(a: &MomentStats, b: &MomentStats) -> Result<f64> {
    if a.dim() != b.dim() || a.cov.shape() != (a.dim(), a.dim()) || b.cov.shape() != (b.dim(), b.dim()) {
        return invalid(format!("feature widths differ: {} vs {}", a.dim(), b.dim()));
    }
    checked_eigen(&a.cov, "first")?;
    let eb = checked_eigen(&b.cov, "second")?;
    let roots = eb.eigenvalues.map(|v| v.max(0.0).sqrt());
    let rb = &eb.eigenvectors * DMatrix::from_diagonal(&roots) * eb.eigenvectors.transpose();
    let inner = &rb * &a.cov * &rb;
    let tr_root: f64 = symmetric_eigen(&inner).eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
    let diff = &a.mean - &b.mean;
    let value = diff.norm_squared() + a.cov.trace() + b.cov.trace() - 2.0 * tr_root;
    Ok(value.max(0.0))
}

fn check_pair(a: &Image<f64>, b: &Image<f64>) -> Result<()> {
    if !a.same_shape(b) {
        return invalid(format!(
            "image shapes differ: {:?} vs {:?}",
            (a.channels(), a.height(), a.width()),
            (b.channels(), b.height(), b.width())
        ));
    }
    Ok(())
}

/// Peak signal-to-noise ratio for unit-range images, capped at 99 dB.
pub fn psnr(a: &Image<f64>, b: &Image<f64>) -> Result<f64> {
    check_pair(a, b)?;
    let n = a.data().len() as f64;
    let mse = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / n;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

/// Structural similarity with 8×8 uniform windows at stride 1 (smaller images
/// use one window per axis of their own size), averaged over windows and
/// channels.
pub fn ssim(a: &Image<f64>, b: &Image<f64>) -> Result<f64> {
    check_pair(a, b)?;
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let (h, w) = (a.height(), a.width());
    let (wh, ww) = (SSIM_WINDOW.min(h), SSIM_WINDOW.min(w));
    let np = (wh * ww) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for c in 0..a.channels() {
        let (pa, pb) = (a.plane(c), b.plane(c));
        for i in 0..=h - wh {
            for j in 0..=w - ww {
                let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for di in 0..wh {
                    for dj in 0..ww {
                        let (x, y) = (pa[(i + di) * w + j + dj], pb[(i + di) * w + j + dj]);
                        sa += x;
                        sb += y;
                        saa += x * x;
                        sbb += y * y;
                        sab += x * y;
                    }
                }
                let (ma, mb) = (sa / np, sb / np);
                // sample (unbiased) window statistics
                let corr = if np > 1.0 { np / (np - 1.0) } else { 1.0 };
                let va = (saa / np - ma * ma) * corr;
                let vb = (sbb / np - mb * mb) * corr;
                let cab = (sab / np - ma * mb) * corr;
                total += ((2.0 * ma * mb + c1) * (2.0 * cab + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

/// Stand-in for a learned perceptual distance: mean L2 distance between
/// extractor features of paired images.
pub fn proxy_perceptual(a: &[Image<f64>], b: &[Image<f64>], extractor: &FeatureExtractor) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return invalid(format!("paired sets differ in size: {} vs {}", a.len(), b.len()));
    }
    let mut total = 0.0;
    for (x, y) in a.iter().zip(b) {
        let (fx, fy) = (extractor.extract(x)?, extractor.extract(y)?);
        total += fx.iter().zip(&fy).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
    }
    Ok(total / a.len() as f64)
}

/// One `(model, setting, metric) → value` entry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub model: String,
    pub setting: String,
    pub metric: String,
    pub value: f64,
}

impl MetricRow {
    pub fn new(model: &str, setting: &str, metric: &str, value: f64) -> Self {
        Self { model: model.into(), setting: setting.into(), metric: metric.into(), value }
    }
}

/// Writes `metrics.csv` and `metrics.json`, one `table_<metric>.csv` pivot
/// (model rows × setting columns) per metric, and `grid_<name>.png` for each
/// named image set.
pub fn report(rows: &[MetricRow], grids: &[(&str, &[Image<f64>])], out_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let csv_path = out_dir.join("metrics.csv");
    let csv_err = |e: csv::Error| Error::Format { what: "metrics csv", reason: e.to_string() };
    let mut w = csv::Writer::from_path(&csv_path).map_err(csv_err)?;
    w.write_record(["model", "setting", "metric", "value"]).map_err(csv_err)?;
    for r in rows {
        w.write_record([r.model.as_str(), r.setting.as_str(), r.metric.as_str(), &r.value.to_string()])
            .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(&csv_path, e))?;

    let json_path = out_dir.join("metrics.json");
    let f = File::create(&json_path).map_err(|e| Error::io(&json_path, e))?;
    serde_json::to_writer_pretty(f, rows).map_err(|e| Error::Format { what: "metrics json", reason: e.to_string() })?;

    let mut by_metric: BTreeMap<&str, Vec<&MetricRow>> = BTreeMap::new();
    for r in rows {
        by_metric.entry(r.metric.as_str()).or_default().push(r);
    }
    for (metric, rs) in by_metric {
        let mut settings: Vec<&str> = rs.iter().map(|r| r.setting.as_str()).collect();
        settings.sort_unstable();
        settings.dedup();
        let mut models: Vec<&str> = Vec::new();
        for r in &rs {
            if !models.contains(&r.model.as_str()) {
                models.push(&r.model);
            }
        }
        let path = out_dir.join(format!("table_{metric}.csv"));
        let mut w = csv::Writer::from_path(&path).map_err(csv_err)?;
        let mut header = vec!["model"];
        header.extend(&settings);
        w.write_record(&header).map_err(csv_err)?;
        for m in models {
            let mut line = vec![m.to_string()];
            for s in &settings {
                let v = rs.iter().find(|r| r.model == m && r.setting == *s).map(|r| r.value.to_string());
                line.push(v.unwrap_or_default());
            }
            w.write_record(&line).map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
    }
    for (name, images) in grids {
        if !images.is_empty() {
            let cols = (images.len() as f64).sqrt().ceil() as usize;
            write_grid(&out_dir.join(format!("grid_{name}.png")), images, cols)?;
        }
    }
    Ok(())
}

/// Reads rows back from `metrics.json`.
pub fn read_report(out_dir: &Path) -> Result<Vec<MetricRow>> {
    let path = out_dir.join("metrics.json");
    let f = File::open(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_reader(f).map_err(|e| Error::Format { what: "metrics json", reason: e.to_string() })
}

/// FID between two image sets under one extractor.
pub fn fid_images(real: &[Image<f64>], fake: &[Image<f64>], extractor: &FeatureExtractor) -> Result<f64> {
    fid(&feature_moments(real, extractor)?, &feature_moments(fake, extractor)?)
}
