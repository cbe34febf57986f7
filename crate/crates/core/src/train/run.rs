//! Training loop: data, logging, sample grids, checkpoints and resume.

use std::fs::{self, File};
use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::Rng;

use super::bundle::gaussian;
use super::{train_step, Adam, GeneratorBundle, Precision, StepMetrics, TrainConfig, TrainState};
use crate::degrade::Image;
use crate::error::{invalid, Error, Result};
use crate::graph::Tape;
use crate::imageio::{load_dir, write_grid};
use crate::nets::{Checkpoint, ParamStore};
use crate::scalar::Scalar;
use crate::settings::item_rng;
use crate::tensor::Tensor;

pub const METRICS_FILE: &str = "train_log.csv";
pub const CHECKPOINT_LATEST: &str = "latest.ckpt";
pub const CHECKPOINT_FINAL: &str = "final.ckpt";
const CONFIG_FILE: &str = "config.toml";

const STEP_SALT: u64 = 0x57e9_0000_0000_0000;
const GRID_STREAM: u64 = u64::MAX;

/// Generator for iteration `iteration`: batches, latents and noise of a step
/// depend only on the seed and the iteration, so resumed runs replay exactly.
pub fn step_rng(seed: u64, iteration: u64) -> rand_chacha::ChaCha8Rng {
    item_rng(seed ^ STEP_SALT, iteration)
}

#[derive(Clone, Debug)]
pub struct RunSummary {
    pub iterations: u64,
    pub final_checkpoint: PathBuf,
    pub last: Option<StepMetrics>,
}

pub fn run(cfg: &TrainConfig) -> Result<RunSummary> {
    match cfg.train.precision {
        Precision::F32 => run_typed::<f32>(cfg),
        Precision::F64 => run_typed::<f64>(cfg),
    }
}

fn load_data<T: Scalar>(cfg: &TrainConfig) -> Result<Vec<Tensor<T>>> {
    let net = cfg.net_config()?;
    let images = load_dir(&cfg.train.data)?;
    let Some(first) = images.first() else {
        return invalid(format!("no images in {}", cfg.train.data.display()));
    };
    if (first.channels(), first.height(), first.width()) != (net.channels, net.image_size, net.image_size) {
        return invalid(format!(
            "images are {}×{}×{}, network expects {}×{}×{}",
            first.channels(),
            first.height(),
            first.width(),
            net.channels,
            net.image_size,
            net.image_size
        ));
    }
    Ok(images.iter().map(|im| im.cast::<T>().to_tensor()).collect())
}

fn draw_batch<T: Scalar, R: Rng + ?Sized>(data: &[Tensor<T>], batch: usize, rng: &mut R) -> Result<Tensor<T>> {
    let idx: Vec<usize> = if batch <= data.len() {
        index::sample(rng, data.len(), batch).into_vec()
    } else {
        (0..batch).map(|_| rng.random_range(0..data.len())).collect()
    };
    let items: Vec<Tensor<T>> = idx.into_iter().map(|i| data[i].clone()).collect();
    Tensor::stack(&items)
}

fn checkpoint<T: Scalar>(state: &TrainState<T>, config_text: &str) -> Checkpoint {
    let mut ck = Checkpoint::new(config_text, state.iteration);
    for ((name, store), opt) in state.bundle.stores().into_iter().zip(&state.opt_g) {
        ck.push_store(name, store);
        push_adam(&mut ck, name, opt);
    }
    ck.push_store("ema", &state.bundle.ema_x);
    ck.push_store("d", &state.d.params);
    push_adam(&mut ck, "d", &state.opt_d);
    ck
}

fn push_adam<T: Scalar>(ck: &mut Checkpoint, name: &str, opt: &Adam<T>) {
    ck.push_store(&format!("adam.{name}.m"), &opt.m);
    ck.push_store(&format!("adam.{name}.v"), &opt.v);
    ck.push(format!("adam.{name}.t"), &Tensor::<f64>::scalar(opt.t as f64));
}

fn load_adam<T: Scalar>(ck: &Checkpoint, name: &str, opt: &mut Adam<T>) -> Result<()> {
    ck.load_store(&format!("adam.{name}.m"), &mut opt.m)?;
    ck.load_store(&format!("adam.{name}.v"), &mut opt.v)?;
    let Some(t) = ck.get(&format!("adam.{name}.t")) else {
        return Err(Error::Format { what: "checkpoint", reason: format!("missing adam.{name}.t") });
    };
    opt.t = t.to_tensor::<f64>().data()[0] as u64;
    Ok(())
}

fn restore_state<T: Scalar>(cfg: &TrainConfig, ck: &Checkpoint) -> Result<TrainState<T>> {
    let mut state = TrainState::<T>::new(cfg)?;
    let names: Vec<&str> = state.bundle.stores().iter().map(|(n, _)| *n).collect();
    for (name, store) in state.bundle.stores_mut() {
        ck.load_store(name, store)?;
    }
    for (name, opt) in names.iter().zip(&mut state.opt_g) {
        load_adam(ck, name, opt)?;
    }
    ck.load_store("ema", &mut state.bundle.ema_x)?;
    ck.load_store("d", &mut state.d.params)?;
    load_adam(ck, "d", &mut state.opt_d)?;
    state.iteration = ck.iteration;
    Ok(state)
}

/// Generator of a training checkpoint with its configuration.
pub fn load_generator<T: Scalar>(path: &Path) -> Result<(TrainConfig, GeneratorBundle<T>)> {
    let ck = Checkpoint::load(path)?;
    let cfg = TrainConfig::from_text(&ck.metadata)?;
    let state = restore_state::<T>(&cfg, &ck)?;
    Ok((cfg, state.bundle))
}

/// `n` clean samples from the averaged (`ema`) or raw generator. Latents come
/// from `seed` alone.
pub fn sample_clean<T: Scalar>(bundle: &GeneratorBundle<T>, n: usize, seed: u64, ema: bool) -> Result<Vec<Image<f64>>> {
    const CHUNK: usize = 64;
    let params: &ParamStore<T> = if ema { &bundle.ema_x } else { &bundle.x.params };
    let mut out = Vec::with_capacity(n);
    for (c, start) in (0..n).step_by(CHUNK).enumerate() {
        let b = CHUNK.min(n - start);
        let z = gaussian::<T, _>(&[b, bundle.config.latent_dim], &mut item_rng(seed, c as u64));
        let mut tape = Tape::new();
        let p = params.bind(&mut tape, false);
        let zv = tape.constant(z);
        let x = bundle.x.net.forward(&mut tape, &p, zv)?;
        out.extend(Image::unbatch(tape.value(x))?.into_iter().map(|im| im.cast::<f64>()));
    }
    Ok(out)
}

fn write_samples<T: Scalar>(state: &TrainState<T>, cfg: &TrainConfig, path: &Path) -> Result<()> {
    let images = sample_clean(&state.bundle, cfg.train.grid_size, cfg.train.seed ^ GRID_STREAM, true)?;
    let cols = (cfg.train.grid_size as f64).sqrt().ceil() as usize;
    write_grid(path, &images, cols.max(1))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Format { what: "training log", reason: format!("{}: {e}", path.display()) }
}

/// Opens the log, keeping earlier rows up to `iteration` when resuming.
fn open_log(path: &Path, iteration: u64) -> Result<csv::Writer<File>> {
    let kept: Vec<StepMetrics> = if iteration > 0 && path.exists() {
        let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
        r.deserialize::<StepMetrics>()
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| csv_err(path, e))?
            .into_iter()
            .filter(|m| m.iter <= iteration)
            .collect()
    } else {
        Vec::new()
    };
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(file);
    w.write_record(["iter", "d_loss", "g_loss", "r1", "ac_blur", "ac_comp", "mean_q", "mean_entropy", "mean_m_q"])
        .map_err(|e| csv_err(path, e))?;
    for m in &kept {
        w.serialize(m).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(w)
}

fn save(ck: &Checkpoint, out: &Path, names: &[&str]) -> Result<()> {
    for n in names {
        ck.save(&out.join(n))?;
    }
    Ok(())
}

fn run_typed<T: Scalar>(cfg: &TrainConfig) -> Result<RunSummary> {
    let out = &cfg.train.out;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let data = load_data::<T>(cfg)?;
    let mut stored = cfg.clone();
    stored.train.resume = None;
    let config_text = stored.to_text()?;
    fs::write(out.join(CONFIG_FILE), &config_text).map_err(|e| Error::io(out.join(CONFIG_FILE), e))?;

    let mut state = match &cfg.train.resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            let saved = TrainConfig::from_text(&ck.metadata)?;
            if saved.train.variant != cfg.train.variant || saved.nets != cfg.nets {
                return invalid("checkpoint was trained with a different variant or network");
            }
            restore_state::<T>(cfg, &ck)?
        }
        None => TrainState::<T>::new(cfg)?,
    };
    let log_path = out.join(METRICS_FILE);
    let mut log = open_log(&log_path, state.iteration)?;

    let mut last = None;
    while state.iteration < cfg.train.iterations {
        let mut rng = step_rng(cfg.train.seed, state.iteration);
        let real = draw_batch(&data, cfg.train.batch, &mut rng)?;
        let metrics = match train_step(&mut state, &real, cfg, &mut rng) {
            Ok(m) => m,
            Err(e @ Error::NonFinite { .. }) => {
                let images: Vec<Image<f64>> = Image::unbatch(&real)?.into_iter().map(|im| im.cast::<f64>()).collect();
                write_grid(&out.join("nonfinite_batch.png"), &images, 8)?;
                fs::write(out.join("nonfinite.txt"), e.to_string()).map_err(|io| Error::io(out, io))?;
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        let it = state.iteration;
        if it % cfg.train.log_every == 0 {
            log::info!("iter {it} d_loss {:.4} g_loss {:.4} r1 {:.4}", metrics.d_loss, metrics.g_loss, metrics.r1);
            log.serialize(&metrics).map_err(|e| csv_err(&log_path, e))?;
            log.flush().map_err(|e| Error::io(&log_path, e))?;
        }
        if it % cfg.train.sample_every == 0 || it == cfg.train.iterations {
            write_samples(&state, cfg, &out.join(format!("grid_{it:07}.png")))?;
        }
        if it % cfg.train.checkpoint_every == 0 {
            let ck = checkpoint(&state, &config_text);
            save(&ck, out, &[&format!("ckpt_{it:07}.ckpt"), CHECKPOINT_LATEST])?;
        }
        last = Some(metrics);
    }
    let ck = checkpoint(&state, &config_text);
    save(&ck, out, &[CHECKPOINT_FINAL, CHECKPOINT_LATEST])?;
    Ok(RunSummary { iterations: state.iteration, final_checkpoint: out.join(CHECKPOINT_FINAL), last })
}
