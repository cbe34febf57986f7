//! Unsupervised restoration: a translator trained so that its re-degraded
//! outputs match the degraded data, with degradations drawn either from a
//! known setting or from trained degradation generators.

use std::fs::{self, File};
use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::degrade::Image;
use crate::error::{invalid, Error, Result};
use crate::eval::{fid_images, proxy_perceptual, psnr, ssim, FeatureExtractor, MetricRow};
use crate::graph::{Tape, Var};
use crate::imageio::{list_images, load_dir, read_image, write_grid, write_png};
use crate::losses::{nonsat_gan_loss, r1_penalty, Side};
use crate::nets::{Binding, Checkpoint, Discriminator, NetConfig, ParamStore, Translator};
use crate::scalar::Scalar;
use crate::settings::{build_setting, item_rng, DegradationSetting};
use crate::tensor::Tensor;
use crate::train::{
    degrade_generated, ema_update, load_generator, sample_latents, setting_degradation, Adam, AdamConfig,
    GeneratorBundle, NetSection, Part, Precision, Source,
};

pub const RESTORE_LOG_FILE: &str = "restore_log.csv";
pub const RESTORER_FINAL: &str = "restorer_final.ckpt";
pub const RESTORER_LATEST: &str = "restorer_latest.ckpt";
const CONFIG_FILE: &str = "restore_config.toml";
const STEP_SALT: u64 = 0x7e57_0000_0000_0000;
const INIT_SALT: u64 = 0x7e50_0000_0000_0000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DegradationSource {
    GroundTruth,
    BncrCheckpoint,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RestoreSection {
    pub source: DegradationSource,
    /// Setting used by the ground-truth source.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub setting: Option<char>,
    /// Generator checkpoint used by the learned source.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    /// Directory of degraded training images.
    pub data: PathBuf,
    pub out: PathBuf,
    pub iterations: u64,
    #[serde(default = "default_batch")]
    pub batch: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_lambda_rec")]
    pub lambda_rec: f64,
    #[serde(default = "default_lambda_id")]
    pub lambda_id: f64,
    #[serde(default = "default_lambda_r1")]
    pub lambda_r1: f64,
    #[serde(default = "default_ema")]
    pub ema_decay: f64,
    #[serde(default = "default_log_every")]
    pub log_every: u64,
    #[serde(default = "default_cadence")]
    pub checkpoint_every: u64,
    #[serde(default)]
    pub precision: Precision,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resume: Option<PathBuf>,
}

fn default_batch() -> usize {
    64
}
fn default_lambda_rec() -> f64 {
    1.0
}
fn default_lambda_id() -> f64 {
    0.1
}
fn default_lambda_r1() -> f64 {
    10.0
}
fn default_ema() -> f64 {
    0.999
}
fn default_log_every() -> u64 {
    100
}
fn default_cadence() -> u64 {
    1000
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RestoreConfig {
    pub restore: RestoreSection,
    #[serde(default)]
    pub adam: AdamConfig,
    #[serde(default)]
    pub nets: NetSection,
}

impl RestoreConfig {
    pub fn from_text(text: &str) -> Result<Self> {
        let cfg: Self = crate::config::parse_with_overrides(text, std::iter::empty::<(&str, &str)>())?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let cfg: Self = crate::config::load(path)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> Result<String> {
        crate::config::to_text(self)
    }

    pub fn validate(&self) -> Result<()> {
        let r = &self.restore;
        for (name, v) in [("lambda_rec", r.lambda_rec), ("lambda_id", r.lambda_id), ("lambda_r1", r.lambda_r1)] {
            if !(v.is_finite() && v >= 0.0) {
                return invalid(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        if r.iterations == 0 || r.batch == 0 || r.log_every == 0 || r.checkpoint_every == 0 {
            return invalid("iterations, batch and cadences must be positive");
        }
        if !(r.ema_decay > 0.0 && r.ema_decay < 1.0) {
            return invalid("ema_decay must lie in (0, 1)");
        }
        match r.source {
            DegradationSource::GroundTruth if r.setting.is_none() => {
                return invalid("ground-truth source needs a setting");
            }
            DegradationSource::BncrCheckpoint if r.checkpoint.is_none() => {
                return invalid("bncr-checkpoint source needs a checkpoint");
            }
            _ => {}
        }
        self.adam.validate()?;
        self.nets.resolve()?;
        Ok(())
    }
}

/// Source of the degradations applied to translated images.
#[derive(Clone, Debug)]
pub enum Degrader<T> {
    Setting(DegradationSetting),
    Generators(Box<GeneratorBundle<T>>),
}

impl<T: Scalar> Degrader<T> {
    pub fn from_config(cfg: &RestoreConfig) -> Result<Self> {
        let r = &cfg.restore;
        match r.source {
            DegradationSource::GroundTruth => {
                let id = r.setting.ok_or_else(|| Error::InvalidArgument("missing setting".into()))?;
                Ok(Self::Setting(build_setting(id)?))
            }
            DegradationSource::BncrCheckpoint => {
                let Some(path) = r.checkpoint.as_ref().filter(|p| p.is_file()) else {
                    return invalid(format!("degradation checkpoint {:?} not found", r.checkpoint));
                };
                let (_, bundle) = load_generator::<T>(path)?;
                Self::from_generators(bundle)
            }
        }
    }

    pub fn from_generators(bundle: GeneratorBundle<T>) -> Result<Self> {
        if bundle.variant.source() != Source::Learned {
            return invalid(format!("{} has no degradation generators", bundle.variant));
        }
        Ok(Self::Generators(Box::new(bundle)))
    }

    /// Degrades `x[B, C, H, W]` with fresh draws. Generator parameters are
    /// constants.
    pub fn degrade<R: Rng + ?Sized>(&self, tape: &mut Tape<T>, x: Var, rng: &mut R) -> Result<Var> {
        match self {
            Self::Setting(s) => setting_degradation(tape, s, x, rng),
            Self::Generators(bundle) => {
                let binds = bundle.bind(tape, false);
                let latents = sample_latents(bundle, tape.shape(x)[0], rng);
                Ok(degrade_generated(tape, bundle, &binds, &latents, x, rng)?.y)
            }
        }
    }

    pub fn image_size(&self) -> Option<usize> {
        match self {
            Self::Setting(_) => None,
            Self::Generators(b) => Some(b.config.image_size),
        }
    }
}

/// Same-shape image-to-image map on the tape.
pub trait ImageMap {
    fn apply<T: Scalar>(&self, tape: &mut Tape<T>, p: &Binding, y: Var) -> Result<Var>;
}

impl ImageMap for Translator {
    fn apply<T: Scalar>(&self, tape: &mut Tape<T>, p: &Binding, y: Var) -> Result<Var> {
        self.forward(tape, p, y)
    }
}

/// The identity map, a no-op restorer.
#[derive(Clone, Copy, Debug, Default)]
pub struct IdentityMap;

impl ImageMap for IdentityMap {
    fn apply<T: Scalar>(&self, _: &mut Tape<T>, _: &Binding, y: Var) -> Result<Var> {
        Ok(y)
    }
}

/// Restores `y[B, C, H, W]`.
pub fn translate<T: Scalar, M: ImageMap>(tape: &mut Tape<T>, translator: &M, p: &Binding, y: Var) -> Result<Var> {
    translator.apply(tape, p, y)
}

/// Single-image form of [`translate`].
pub fn translate_image<T: Scalar>(
    translator: &Translator,
    params: &ParamStore<T>,
    y: &Image<f64>,
) -> Result<Image<f64>> {
    let mut tape = Tape::new();
    let p = params.bind(&mut tape, false);
    let v = tape.constant(Image::batch(std::slice::from_ref(&y.cast::<T>()))?);
    let out = translate(&mut tape, translator, &p, v)?;
    Ok(Image::from_tensor(tape.value(out))?.cast())
}

/// Translator-side objective terms.
#[derive(Clone, Copy, Debug)]
pub struct UnirLosses {
    /// Non-saturating loss of the re-degraded translation.
    pub adv: Var,
    /// `mean (y^g − F'(T(y^g)))²` with `y^g = F(T(y))` held fixed and `F'` a
    /// fresh degradation draw.
    pub rec: Var,
    /// `mean (y − T(y))²`.
    pub id: Var,
    pub total: Var,
    /// The degraded translation `y^g`, for the discriminator.
    pub fake: Var,
}

fn mse<T: Scalar>(tape: &mut Tape<T>, a: Var, b: Var) -> Var {
    let d = tape.sub(a, b);
    let s = tape.square(d);
    tape.mean(s)
}

/// Translator losses on a batch of degraded images.
#[allow(clippy::too_many_arguments)]
pub fn unir_losses<T: Scalar, M: ImageMap, R: Rng + ?Sized>(
    tape: &mut Tape<T>,
    y_real: Var,
    translator: &M,
    tp: &Binding,
    degrader: &Degrader<T>,
    critic: &Discriminator,
    dp: &Binding,
    lambda_rec: f64,
    lambda_id: f64,
    rng: &mut R,
) -> Result<UnirLosses> {
    let x_hat = translate(tape, translator, tp, y_real)?;
    let fake = degrader.degrade(tape, x_hat, rng)?;
    let logits = critic.forward(tape, dp, fake)?;
    let adv = nonsat_gan_loss(tape, None, logits, Side::Generator)?;
    let target = tape.detach(fake);
    let x_again = translate(tape, translator, tp, target)?;
    let redegraded = degrader.degrade(tape, x_again, rng)?;
    let rec = mse(tape, target, redegraded);
    let id = mse(tape, y_real, x_hat);
    let r = tape.scale(rec, lambda_rec);
    let i = tape.scale(id, lambda_id);
    let s = tape.add(adv, r);
    let total = tape.add(s, i);
    Ok(UnirLosses { adv, rec, id, total, fake })
}

/// Restorer state during training.
#[derive(Clone, Debug)]
pub struct RestorerState<T> {
    pub translator: Part<Translator, T>,
    pub ema: ParamStore<T>,
    pub d: Part<Discriminator, T>,
    pub opt_t: Adam<T>,
    pub opt_d: Adam<T>,
    pub iteration: u64,
}

impl<T: Scalar> RestorerState<T> {
    pub fn new(net: &NetConfig, seed: u64) -> Result<Self> {
        let mut tp = ParamStore::new();
        let t = Translator::new(net, &mut tp, &mut item_rng(seed ^ INIT_SALT, 0))?;
        let mut dp = ParamStore::new();
        let d = Discriminator::new(net, &mut dp, &mut item_rng(seed ^ INIT_SALT, 1))?;
        Ok(Self {
            ema: tp.clone(),
            opt_t: Adam::new(&tp),
            opt_d: Adam::new(&dp),
            translator: Part { net: t, params: tp },
            d: Part { net: d, params: dp },
            iteration: 0,
        })
    }
}

/// Logged values of one restorer iteration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RestoreMetrics {
    pub iter: u64,
    pub d_loss: f64,
    pub r1: f64,
    pub adv: f64,
    pub rec: f64,
    pub id: f64,
}

fn value<T: Scalar>(tape: &Tape<T>, v: Var) -> f64 {
    tape.value(v).data()[0].real()
}

/// One discriminator update, then one translator update.
pub fn restore_step<T: Scalar, R: Rng + ?Sized>(
    state: &mut RestorerState<T>,
    real: &Tensor<T>,
    degrader: &Degrader<T>,
    cfg: &RestoreConfig,
    rng: &mut R,
) -> Result<RestoreMetrics> {
    let r = &cfg.restore;
    let iteration = state.iteration;
    let (d_loss, r1, d_grads) = {
        let mut tape = Tape::new();
        let tp = state.translator.params.bind(&mut tape, false);
        let y = tape.constant(real.clone());
        let x_hat = translate(&mut tape, &state.translator.net, &tp, y)?;
        let fake = degrader.degrade(&mut tape, x_hat, rng)?;
        let dp = state.d.params.bind(&mut tape, true);
        let lr = state.d.net.forward(&mut tape, &dp, y)?;
        let lf = state.d.net.forward(&mut tape, &dp, fake)?;
        let loss = nonsat_gan_loss(&mut tape, Some(lr), lf, Side::Discriminator)?;
        let mut grads = dp.gradients(&tape.grad(loss), &state.d.params);
        let mut r1 = 0.0;
        if r.lambda_r1 > 0.0 {
            let pen = r1_penalty(&state.d.net, &state.d.params, real)?;
            r1 = pen.value.real();
            let lam = T::of(r.lambda_r1);
            for (g, p) in grads.iter_mut().zip(&pen.param_grads) {
                *g = g.zip_map(p, |a, b| a + lam * b);
            }
        }
        (value(&tape, loss), r1, grads)
    };
    if !(d_loss.is_finite() && r1.is_finite() && d_grads.iter().all(Tensor::all_finite)) {
        return Err(Error::NonFinite { iteration, diagnostics: format!("d_loss={d_loss} r1={r1}") });
    }
    state.opt_d.step(&mut state.d.params, &d_grads, &cfg.adam)?;

    let mut tape = Tape::new();
    let tp = state.translator.params.bind(&mut tape, true);
    let dp = state.d.params.bind(&mut tape, false);
    let y = tape.constant(real.clone());
    let l = unir_losses(
        &mut tape,
        y,
        &state.translator.net,
        &tp,
        degrader,
        &state.d.net,
        &dp,
        r.lambda_rec,
        r.lambda_id,
        rng,
    )?;
    let grads = tp.gradients(&tape.grad(l.total), &state.translator.params);
    let m = RestoreMetrics {
        iter: iteration + 1,
        d_loss,
        r1,
        adv: value(&tape, l.adv),
        rec: value(&tape, l.rec),
        id: value(&tape, l.id),
    };
    if !(m.adv.is_finite() && m.rec.is_finite() && m.id.is_finite() && grads.iter().all(Tensor::all_finite)) {
        return Err(Error::NonFinite { iteration, diagnostics: format!("{m:?}") });
    }
    state.opt_t.step(&mut state.translator.params, &grads, &cfg.adam)?;
    ema_update(&mut state.ema, &state.translator.params, r.ema_decay)?;
    state.iteration += 1;
    Ok(m)
}

fn to_checkpoint<T: Scalar>(state: &RestorerState<T>, text: &str) -> Checkpoint {
    let mut ck = Checkpoint::new(text, state.iteration);
    ck.push_store("translator", &state.translator.params);
    ck.push_store("ema", &state.ema);
    ck.push_store("d", &state.d.params);
    for (name, opt) in [("translator", &state.opt_t), ("d", &state.opt_d)] {
        ck.push_store(&format!("adam.{name}.m"), &opt.m);
        ck.push_store(&format!("adam.{name}.v"), &opt.v);
        ck.push(format!("adam.{name}.t"), &Tensor::<f64>::scalar(opt.t as f64));
    }
    ck
}

fn from_checkpoint<T: Scalar>(ck: &Checkpoint) -> Result<(RestoreConfig, RestorerState<T>)> {
    let cfg = RestoreConfig::from_text(&ck.metadata)?;
    let mut state = RestorerState::<T>::new(&cfg.nets.resolve()?, cfg.restore.seed)?;
    ck.load_store("translator", &mut state.translator.params)?;
    ck.load_store("ema", &mut state.ema)?;
    ck.load_store("d", &mut state.d.params)?;
    for (name, opt) in [("translator", &mut state.opt_t), ("d", &mut state.opt_d)] {
        ck.load_store(&format!("adam.{name}.m"), &mut opt.m)?;
        ck.load_store(&format!("adam.{name}.v"), &mut opt.v)?;
        let t = ck
            .get(&format!("adam.{name}.t"))
            .ok_or_else(|| Error::Format { what: "checkpoint", reason: format!("missing adam.{name}.t") })?;
        opt.t = t.to_tensor::<f64>().data()[0] as u64;
    }
    state.iteration = ck.iteration;
    Ok((cfg, state))
}

/// Averaged translator of a restorer checkpoint.
pub fn load_translator<T: Scalar>(path: &Path) -> Result<(RestoreConfig, Part<Translator, T>)> {
    let ck = Checkpoint::load(path)?;
    let (cfg, state) = from_checkpoint::<T>(&ck)?;
    Ok((cfg, Part { net: state.translator.net, params: state.ema }))
}

#[derive(Clone, Debug)]
pub struct RestoreSummary {
    pub iterations: u64,
    pub final_checkpoint: PathBuf,
    pub last: Option<RestoreMetrics>,
}

pub fn train_restorer(cfg: &RestoreConfig) -> Result<RestoreSummary> {
    match cfg.restore.precision {
        Precision::F32 => train_typed::<f32>(cfg),
        Precision::F64 => train_typed::<f64>(cfg),
    }
}

fn log_err(path: &Path, e: csv::Error) -> Error {
    Error::Format { what: "restore log", reason: format!("{}: {e}", path.display()) }
}

fn train_typed<T: Scalar>(cfg: &RestoreConfig) -> Result<RestoreSummary> {
    let r = &cfg.restore;
    let net = cfg.nets.resolve()?;
    let degrader = Degrader::<T>::from_config(cfg)?;
    let images = load_dir(&r.data)?;
    let Some(first) = images.first() else {
        return invalid(format!("no images in {}", r.data.display()));
    };
    if first.channels() != net.channels || first.height() != first.width() || first.height() != net.image_size {
        return invalid("training images do not match the network configuration");
    }
    if degrader.image_size().is_some_and(|s| s != net.image_size) {
        return invalid("degradation generators were trained at a different image size");
    }
    let data: Vec<Tensor<T>> = images.iter().map(|im| im.cast::<T>().to_tensor()).collect();
    fs::create_dir_all(&r.out).map_err(|e| Error::io(&r.out, e))?;
    let mut stored = cfg.clone();
    stored.restore.resume = None;
    let text = stored.to_text()?;
    fs::write(r.out.join(CONFIG_FILE), &text).map_err(|e| Error::io(r.out.join(CONFIG_FILE), e))?;

    let mut state = match &r.resume {
        Some(path) => from_checkpoint::<T>(&Checkpoint::load(path)?)?.1,
        None => RestorerState::<T>::new(&net, r.seed)?,
    };
    let log_path = r.out.join(RESTORE_LOG_FILE);
    let kept: Vec<RestoreMetrics> = if state.iteration > 0 && log_path.exists() {
        let mut rd = csv::Reader::from_path(&log_path).map_err(|e| log_err(&log_path, e))?;
        rd.deserialize::<RestoreMetrics>()
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| log_err(&log_path, e))?
            .into_iter()
            .filter(|m| m.iter <= state.iteration)
            .collect()
    } else {
        Vec::new()
    };
    let file = File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let mut log = csv::WriterBuilder::new().has_headers(false).from_writer(file);
    log.write_record(["iter", "d_loss", "r1", "adv", "rec", "id"]).map_err(|e| log_err(&log_path, e))?;
    for m in &kept {
        log.serialize(m).map_err(|e| log_err(&log_path, e))?;
    }
    log.flush().map_err(|e| Error::io(&log_path, e))?;

    let mut last = None;
    while state.iteration < r.iterations {
        let mut rng = item_rng(r.seed ^ STEP_SALT, state.iteration);
        let idx: Vec<usize> = if r.batch <= data.len() {
            index::sample(&mut rng, data.len(), r.batch).into_vec()
        } else {
            (0..r.batch).map(|_| rng.random_range(0..data.len())).collect()
        };
        let real = Tensor::stack(&idx.iter().map(|&i| data[i].clone()).collect::<Vec<_>>())?;
        let m = restore_step(&mut state, &real, &degrader, cfg, &mut rng)?;
        let it = state.iteration;
        if it % r.log_every == 0 {
            log::info!("iter {it} d_loss {:.4} adv {:.4} rec {:.5} id {:.5}", m.d_loss, m.adv, m.rec, m.id);
            log.serialize(&m).map_err(|e| log_err(&log_path, e))?;
            log.flush().map_err(|e| Error::io(&log_path, e))?;
        }
        if it % r.checkpoint_every == 0 {
            let ck = to_checkpoint(&state, &text);
            ck.save(&r.out.join(format!("restorer_{it:07}.ckpt")))?;
            ck.save(&r.out.join(RESTORER_LATEST))?;
        }
        last = Some(m);
    }
    let ck = to_checkpoint(&state, &text);
    ck.save(&r.out.join(RESTORER_FINAL))?;
    ck.save(&r.out.join(RESTORER_LATEST))?;
    Ok(RestoreSummary { iterations: state.iteration, final_checkpoint: r.out.join(RESTORER_FINAL), last })
}

/// Restores every image of `in_dir` into `out_dir`, keeping file names and
/// bit depth. Returns the number of images written.
pub fn restore_dir(ckpt: &Path, in_dir: &Path, out_dir: &Path) -> Result<usize> {
    let (_, t) = load_translator::<f64>(ckpt)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let paths = list_images(in_dir)?;
    for p in &paths {
        let (y, depth) = read_image(p)?;
        let x = translate_image(&t.net, &t.params, &y)?;
        write_png(&out_dir.join(p.file_name().expect("listed file")), &x, depth)?;
    }
    Ok(paths.len())
}

/// Restores a list of images with a translator.
pub fn restore_images<T: Scalar>(t: &Part<Translator, T>, images: &[Image<f64>]) -> Result<Vec<Image<f64>>> {
    images.iter().map(|y| translate_image(&t.net, &t.params, y)).collect()
}

/// FID, proxy perceptual distance, mean PSNR and mean SSIM of `restored`
/// against `clean`, one row per metric labelled `model`.
pub fn restore_eval(
    model: &str,
    setting: &str,
    restored: &[Image<f64>],
    clean: &[Image<f64>],
    extractor: &FeatureExtractor,
) -> Result<Vec<MetricRow>> {
    if restored.len() != clean.len() || clean.is_empty() {
        return invalid(format!("{} restored images for {} clean images", restored.len(), clean.len()));
    }
    let n = clean.len() as f64;
    let mut p = 0.0;
    let mut s = 0.0;
    for (a, b) in restored.iter().zip(clean) {
        p += psnr(b, a)?;
        s += ssim(b, a)?;
    }
    Ok(vec![
        MetricRow::new(model, setting, "fid", fid_images(clean, restored, extractor)?),
        MetricRow::new(model, setting, "proxy_perceptual", proxy_perceptual(clean, restored, extractor)?),
        MetricRow::new(model, setting, "psnr", p / n),
        MetricRow::new(model, setting, "ssim", s / n),
    ])
}

/// Restoration rows plus the unrestored baseline rows, with a grid of
/// degraded, restored and clean examples.
pub fn restore_report(
    model: &str,
    setting: &str,
    degraded: &[Image<f64>],
    restored: &[Image<f64>],
    clean: &[Image<f64>],
    extractor: &FeatureExtractor,
    out_dir: &Path,
) -> Result<Vec<MetricRow>> {
    let mut rows = restore_eval("degraded", setting, degraded, clean, extractor)?;
    rows.extend(restore_eval(model, setting, restored, clean, extractor)?);
    let k = clean.len().min(8);
    let mut grid = Vec::with_capacity(3 * k);
    grid.extend_from_slice(&degraded[..k]);
    grid.extend_from_slice(&restored[..k]);
    grid.extend_from_slice(&clean[..k]);
    crate::eval::report(&rows, &[], out_dir)?;
    write_grid(&out_dir.join("grid_restoration.png"), &grid, k.max(1))?;
    Ok(rows)
}

#[cfg(test)]
mod tests;
