//! Degradation settings A–T and corpus preparation.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::degrade::{
    degrade_reference, disk_kernel, identity_kernel, motion_kernel, BlurKernel, DegradeFlags, Image, NoiseParams,
    QualityFactor,
};
use crate::error::{invalid, Error, Result};
use crate::imageio::{list_images, read_image, write_png};
use crate::scalar::Scalar;

/// log₁₀ ranges of the read/shot noise preset.
pub const NOISE_LOG10_READ: (f64, f64) = (-3.0, -1.5);
pub const NOISE_LOG10_SHOT: (f64, f64) = (-2.5, -1.0);

/// Kernel size used for the 32×32-scale settings.
pub const KERNEL_SIZE: usize = 9;
/// Kernel size used with [`DegradationSetting::enlarged`].
pub const LARGE_KERNEL_SIZE: usize = 15;

pub const MANIFEST_FILE: &str = "manifest.jsonl";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiskSpec {
    pub radius: (f64, f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MotionSpec {
    pub length: usize,
    pub exposures: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum BlurSpec {
    None,
    Disk(DiskSpec),
    Motion(MotionSpec),
    /// Disk with probability `disk_rate`, otherwise motion.
    Mixture {
        disk: DiskSpec,
        motion: MotionSpec,
        disk_rate: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum NoiseSpec {
    None,
    ReadShot { log10_read: (f64, f64), log10_shot: (f64, f64) },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum CompSpec {
    None,
    /// Integer quality factors drawn uniformly from `lo..=hi`.
    Quality {
        lo: u8,
        hi: u8,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApplyRates {
    pub blur: f64,
    pub noise: f64,
    pub comp: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DegradationSetting {
    pub id: char,
    pub blur: BlurSpec,
    pub noise: NoiseSpec,
    pub comp: CompSpec,
    pub apply_rate: ApplyRates,
    /// Whether each degradation is switched on by its own draw. Otherwise one
    /// draw decides for all of them.
    pub independent_selection: bool,
    pub kernel_size: usize,
}

fn disk_b() -> DiskSpec {
    DiskSpec { radius: (0.5, 2.0) }
}

fn motion_c() -> MotionSpec {
    MotionSpec { length: 5, exposures: vec![0.1, 0.5, 1.0] }
}

fn mixture_d() -> BlurSpec {
    BlurSpec::Mixture { disk: disk_b(), motion: motion_c(), disk_rate: 0.5 }
}

fn read_shot() -> NoiseSpec {
    NoiseSpec::ReadShot { log10_read: NOISE_LOG10_READ, log10_shot: NOISE_LOG10_SHOT }
}

/// Every catalog id.
pub const SETTING_IDS: [char; 20] =
    ['A', 'B', 'C', 'D', 'E', 'F', 'G', 'H', 'I', 'J', 'K', 'L', 'M', 'N', 'O', 'P', 'Q', 'R', 'S', 'T'];

/// Catalog entry for a setting letter.
pub fn build_setting(id: char) -> Result<DegradationSetting> {
    let id = id.to_ascii_uppercase();
    let (blur, noise, comp, rate, independent) = match id {
        'A' => (BlurSpec::None, NoiseSpec::None, CompSpec::None, 1.0, false),
        'B' => (BlurSpec::Disk(disk_b()), NoiseSpec::None, CompSpec::None, 1.0, false),
        'C' => (BlurSpec::Motion(motion_c()), NoiseSpec::None, CompSpec::None, 1.0, false),
        'D' => (mixture_d(), NoiseSpec::None, CompSpec::None, 1.0, false),
        'E' => (mixture_d(), NoiseSpec::None, CompSpec::None, 0.25, false),
        'F' => (mixture_d(), NoiseSpec::None, CompSpec::None, 0.5, false),
        'G' => (mixture_d(), NoiseSpec::None, CompSpec::None, 0.75, false),
        'H' => (BlurSpec::None, NoiseSpec::None, CompSpec::Quality { lo: 60, hi: 80 }, 1.0, false),
        'I' => (BlurSpec::None, NoiseSpec::None, CompSpec::Quality { lo: 80, hi: 100 }, 1.0, false),
        'J' => (BlurSpec::None, NoiseSpec::None, CompSpec::Quality { lo: 60, hi: 100 }, 1.0, false),
        'K' => (BlurSpec::None, NoiseSpec::None, CompSpec::Quality { lo: 60, hi: 100 }, 0.25, false),
        'L' => (BlurSpec::None, NoiseSpec::None, CompSpec::Quality { lo: 60, hi: 100 }, 0.5, false),
        'M' => (BlurSpec::None, NoiseSpec::None, CompSpec::Quality { lo: 60, hi: 100 }, 0.75, false),
        'N' => (mixture_d(), read_shot(), CompSpec::Quality { lo: 60, hi: 100 }, 1.0, true),
        'O' => (mixture_d(), read_shot(), CompSpec::Quality { lo: 60, hi: 100 }, 0.25, true),
        'P' => (mixture_d(), read_shot(), CompSpec::Quality { lo: 60, hi: 100 }, 0.5, true),
        'Q' => (mixture_d(), read_shot(), CompSpec::Quality { lo: 60, hi: 100 }, 0.75, true),
        'R' => (BlurSpec::None, read_shot(), CompSpec::None, 1.0, false),
        'S' => (BlurSpec::None, NoiseSpec::None, CompSpec::Quality { lo: 20, hi: 40 }, 1.0, false),
        'T' => (BlurSpec::None, NoiseSpec::None, CompSpec::Quality { lo: 40, hi: 60 }, 1.0, false),
        other => return invalid(format!("unknown degradation setting {other:?}")),
    };
    let on = |active: bool| if active { rate } else { 0.0 };
    let apply_rate = ApplyRates {
        blur: on(blur != BlurSpec::None),
        noise: on(noise != NoiseSpec::None),
        comp: on(comp != CompSpec::None),
    };
    Ok(DegradationSetting {
        id,
        blur,
        noise,
        comp,
        apply_rate,
        independent_selection: independent,
        kernel_size: KERNEL_SIZE,
    })
}

/// Shape of the blur kernel that was drawn.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum BlurDraw {
    Disk { radius: f64 },
    Motion { length: usize, exposure: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct DegradationSample {
    pub kernel: BlurKernel<f64>,
    pub blur: Option<BlurDraw>,
    /// Spatially constant `(σ_read, σ_shot)`.
    pub sigma: (f64, f64),
    pub q: QualityFactor,
    pub flags: DegradeFlags,
}

impl DegradationSetting {
    /// Larger blur for 128×128 images: radius up to 4, trajectory length 10,
    /// 15×15 kernels.
    pub fn enlarged(mut self) -> Self {
        self.blur = match self.blur {
            BlurSpec::Disk(_) => BlurSpec::Disk(DiskSpec { radius: (0.5, 4.0) }),
            BlurSpec::Motion(m) => BlurSpec::Motion(MotionSpec { length: 10, ..m }),
            BlurSpec::Mixture { motion, disk_rate, .. } => BlurSpec::Mixture {
                disk: DiskSpec { radius: (0.5, 4.0) },
                motion: MotionSpec { length: 10, ..motion },
                disk_rate,
            },
            BlurSpec::None => BlurSpec::None,
        };
        self.kernel_size = LARGE_KERNEL_SIZE;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let rates = [self.apply_rate.blur, self.apply_rate.noise, self.apply_rate.comp];
        if rates.iter().any(|r| !(0.0..=1.0).contains(r)) {
            return invalid("apply rates must lie in [0, 1]");
        }
        let ordered = |(lo, hi): (f64, f64)| lo.is_finite() && hi.is_finite() && lo <= hi;
        let disk_ok =
            |d: &DiskSpec| ordered(d.radius) && d.radius.0 > 0.0 && d.radius.1 <= self.kernel_size as f64 / 2.0;
        let motion_ok = |m: &MotionSpec| {
            m.length >= 1 && !m.exposures.is_empty() && m.exposures.iter().all(|e| *e > 0.0 && *e <= 1.0)
        };
        let blur_ok = match &self.blur {
            BlurSpec::None => true,
            BlurSpec::Disk(d) => disk_ok(d),
            BlurSpec::Motion(m) => motion_ok(m),
            BlurSpec::Mixture { disk, motion, disk_rate } => {
                disk_ok(disk) && motion_ok(motion) && (0.0..=1.0).contains(disk_rate)
            }
        };
        if !blur_ok {
            return invalid(format!("setting {}: malformed blur spec", self.id));
        }
        if let NoiseSpec::ReadShot { log10_read, log10_shot } = self.noise {
            if !ordered(log10_read) || !ordered(log10_shot) {
                return invalid(format!("setting {}: noise ranges must be ordered", self.id));
            }
        }
        if let CompSpec::Quality { lo, hi } = self.comp {
            if lo > hi || hi > 100 {
                return invalid(format!("setting {}: quality range must be ordered within [0, 100]", self.id));
            }
        }
        if self.kernel_size.is_multiple_of(2) {
            return invalid("kernel size must be odd");
        }
        Ok(())
    }

    /// Draws one set of degradation parameters.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<DegradationSample> {
        let shared: f64 = rng.random();
        let mut pick = |rate: f64| {
            if self.independent_selection {
                rng.random::<f64>() < rate
            } else {
                shared < rate
            }
        };
        let flags = DegradeFlags {
            blur: pick(self.apply_rate.blur),
            noise: pick(self.apply_rate.noise),
            jpeg: pick(self.apply_rate.comp),
        };
        let size = self.kernel_size;
        let (kernel, blur) = if flags.blur { self.sample_blur(rng)? } else { (identity_kernel(size)?, None) };
        let sigma = match (&self.noise, flags.noise) {
            (NoiseSpec::ReadShot { log10_read, log10_shot }, true) => {
                let r = rng.random_range(log10_read.0..=log10_read.1);
                let s = rng.random_range(log10_shot.0..=log10_shot.1);
                (10f64.powf(r), 10f64.powf(s))
            }
            _ => (0.0, 0.0),
        };
        let q = match (&self.comp, flags.jpeg) {
            (CompSpec::Quality { lo, hi }, true) => rng.random_range(*lo..=*hi) as f64,
            _ => 100.0,
        };
        Ok(DegradationSample { kernel, blur, sigma, q: QualityFactor::new(q)?, flags })
    }

    fn sample_blur<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<(BlurKernel<f64>, Option<BlurDraw>)> {
        let size = self.kernel_size;
        let disk = |d: &DiskSpec, rng: &mut R| -> Result<_> {
            let radius = rng.random_range(d.radius.0..=d.radius.1);
            Ok((disk_kernel(radius, size)?, Some(BlurDraw::Disk { radius })))
        };
        let motion = |m: &MotionSpec, rng: &mut R| -> Result<_> {
            let exposure = *m.exposures.choose(rng).expect("non-empty");
            Ok((motion_kernel(m.length, exposure, size, rng)?, Some(BlurDraw::Motion { length: m.length, exposure })))
        };
        match &self.blur {
            BlurSpec::None => Ok((identity_kernel(size)?, None)),
            BlurSpec::Disk(d) => disk(d, rng),
            BlurSpec::Motion(m) => motion(m, rng),
            BlurSpec::Mixture { disk: d, motion: m, disk_rate } => {
                if rng.random::<f64>() < *disk_rate {
                    disk(d, rng)
                } else {
                    motion(m, rng)
                }
            }
        }
    }
}

/// Draws one set of degradation parameters for `s`.
pub fn sample_degradation<R: Rng + ?Sized>(s: &DegradationSetting, rng: &mut R) -> Result<DegradationSample> {
    s.sample(rng)
}

impl DegradationSample {
    /// Degrades a clean image with the reference codec.
    pub fn apply<R: Rng + ?Sized>(&self, x: &Image<f64>, rng: &mut R) -> Result<Image<f64>> {
        let noise = NoiseParams::uniform(x.data().len(), self.sigma.0, self.sigma.1)?;
        degrade_reference(x, &self.kernel, &noise, self.q, rng, self.flags)
    }

    pub fn kernel_digest(&self) -> String {
        kernel_digest(&self.kernel)
    }
}

/// Hex SHA-256 of the kernel's little-endian `f64` values.
pub fn kernel_digest<T: Scalar>(k: &BlurKernel<T>) -> String {
    let mut h = Sha256::new();
    for v in k.data() {
        h.update(v.real().to_le_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Per-item generator: stream `index` of the ChaCha sequence for `seed`, so
/// results do not depend on processing order.
pub fn item_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// One line of `manifest.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub index: u64,
    pub file: String,
    pub setting: char,
    pub flags: DegradeFlags,
    pub blur: Option<BlurDraw>,
    pub kernel_sha256: String,
    pub sigma_read: f64,
    pub sigma_shot: f64,
    pub q: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ErrorPolicy {
    /// Skip bad items and report them.
    Continue,
    #[default]
    Abort,
}

#[derive(Debug, Default)]
pub struct DatasetReport {
    pub records: Vec<ManifestRecord>,
    pub failures: Vec<(PathBuf, String)>,
}

/// Degrades every PNG in `clean_dir` into `out_dir` and writes the manifest.
/// Outputs keep the input bit depth.
pub fn degrade_dataset(
    clean_dir: &Path,
    out_dir: &Path,
    setting: &DegradationSetting,
    seed: u64,
    policy: ErrorPolicy,
) -> Result<DatasetReport> {
    setting.validate()?;
    let files = list_images(clean_dir)?;
    if files.is_empty() {
        return invalid(format!("no PNG images in {}", clean_dir.display()));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut report = DatasetReport::default();
    let mut shape: Option<(usize, usize, usize)> = None;
    for (index, path) in files.iter().enumerate() {
        let result = degrade_one(path, out_dir, setting, seed, index as u64, &mut shape);
        match result {
            Ok(record) => report.records.push(record),
            Err(e) if policy == ErrorPolicy::Continue => report.failures.push((path.clone(), e.to_string())),
            Err(e) => return Err(e),
        }
    }
    let manifest = out_dir.join(MANIFEST_FILE);
    let file = File::create(&manifest).map_err(|e| Error::io(&manifest, e))?;
    let mut w = BufWriter::new(file);
    for r in &report.records {
        let line = serde_json::to_string(r).expect("serializable record");
        writeln!(w, "{line}").map_err(|e| Error::io(&manifest, e))?;
    }
    w.flush().map_err(|e| Error::io(&manifest, e))?;
    Ok(report)
}

fn degrade_one(
    path: &Path,
    out_dir: &Path,
    setting: &DegradationSetting,
    seed: u64,
    index: u64,
    shape: &mut Option<(usize, usize, usize)>,
) -> Result<ManifestRecord> {
    let (img, depth) = read_image(path)?;
    let s = (img.channels(), img.height(), img.width());
    match shape {
        Some(expected) if *expected != s => {
            return invalid(format!("{}: size {:?} differs from {:?}", path.display(), s, expected));
        }
        _ => *shape = Some(s),
    }
    let mut rng = item_rng(seed, index);
    let sample = setting.sample(&mut rng)?;
    let out = sample.apply(&img, &mut rng)?;
    let name = path.file_name().expect("listed file").to_string_lossy().into_owned();
    write_png(&out_dir.join(&name), &out, depth)?;
    Ok(ManifestRecord {
        index,
        file: name,
        setting: setting.id,
        flags: sample.flags,
        blur: sample.blur,
        kernel_sha256: sample.kernel_digest(),
        sigma_read: sample.sigma.0,
        sigma_shot: sample.sigma.1,
        q: sample.q.value(),
    })
}

/// Reads `manifest.jsonl` from a degraded corpus.
pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestRecord>> {
    let path = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::Format { what: "manifest", reason: e.to_string() }))
        .collect()
}
