//! Generator sets of each variant and the fake-image path through them.

use rand::Rng;
use rand_distr::StandardNormal;

use super::{Source, Stage, Variant};
use crate::degrade::{convolve_tape, diff_jpeg_tape, identity_kernel, sample_noise_tape, JpegRounding};
use crate::error::{invalid, Result};
use crate::graph::{Tape, Var};
use crate::nets::{
    compose_compressed_tape, compose_kernel_tape, Binding, ImageGenerator, KernelGenerator, NetConfig, NoiseGenerator,
    ParamId, ParamStore, QualityGenerator, SIGMA_INIT,
};
use crate::scalar::Scalar;
use crate::settings::{item_rng, BlurSpec, CompSpec, DegradationSetting, NoiseSpec};
use crate::tensor::Tensor;

/// A network together with its parameters.
#[derive(Clone, Debug)]
pub struct Part<N, T> {
    pub net: N,
    pub params: ParamStore<T>,
}

/// Salt of the initialization streams, so that variants share the weights of
/// the networks they have in common.
const INIT_SALT: u64 = 0x1a17_0000_0000_0000;

pub(crate) fn init_rng(seed: u64, stream: u64) -> rand_chacha::ChaCha8Rng {
    item_rng(seed ^ INIT_SALT, stream)
}

pub(crate) const STREAM_GX: u64 = 0;
pub(crate) const STREAM_GK: u64 = 1;
pub(crate) const STREAM_GN: u64 = 2;
pub(crate) const STREAM_GQ: u64 = 3;
pub(crate) const STREAM_D: u64 = 4;

fn part<N, T: Scalar>(
    build: impl FnOnce(&mut ParamStore<T>, &mut rand_chacha::ChaCha8Rng) -> Result<N>,
    seed: u64,
    stream: u64,
) -> Result<Part<N, T>> {
    let mut params = ParamStore::new();
    let net = build(&mut params, &mut init_rng(seed, stream))?;
    Ok(Part { net, params })
}

/// One kernel, noise level and quality factor shared by every image.
#[derive(Clone, Debug)]
pub struct ParametricDegradation {
    kernel: Option<ParamId>,
    kernel_size: usize,
    sigma: Option<(ParamId, ParamId)>,
    quality: Option<ParamId>,
    zero1: ParamId,
    zero_k: Option<ParamId>,
}

/// Logit of the initial quality factor, 90.
const QUALITY_LOGIT_INIT: f64 = 2.197_224_577_336_219_6;

fn inverse_softplus(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

impl ParametricDegradation {
    /// Stages follow the setting: a stage exists when the setting has it.
    pub fn new<T: Scalar>(setting: &DegradationSetting, store: &mut ParamStore<T>) -> Result<Self> {
        let k = setting.kernel_size;
        let (kernel, zero_k) = if setting.blur != BlurSpec::None {
            let k2 = k * k;
            let mut logits = vec![T::zero(); k2];
            logits[k2 / 2] = T::of((k2 as f64).ln());
            let w = store.add("kernel_logits", Tensor::from_vec(&[k2, 1], logits)?);
            let z = store.add("kernel_bias", Tensor::zeros(&[k2]));
            (Some(w), Some(z))
        } else {
            (None, None)
        };
        let sigma = (setting.noise != NoiseSpec::None).then(|| {
            let init = Tensor::full(&[1, 1], T::of(inverse_softplus(SIGMA_INIT)));
            (store.add("sigma_read", init.clone()), store.add("sigma_shot", init))
        });
        let quality = (setting.comp != CompSpec::None)
            .then(|| store.add("quality_logit", Tensor::full(&[1, 1], T::of(QUALITY_LOGIT_INIT))));
        let zero1 = store.add("bias1", Tensor::zeros(&[1]));
        Ok(Self { kernel, kernel_size: k, sigma, quality, zero1, zero_k })
    }

    fn broadcast<T: Scalar>(tape: &mut Tape<T>, p: &Binding, w: ParamId, bias: ParamId, batch: usize) -> Result<Var> {
        let ones = tape.constant(Tensor::full(&[batch, 1], T::one()));
        tape.linear(ones, p.var(w), p.var(bias))
    }

    /// Kernels `[B, K, K]`, σ maps shaped like `x`, and qualities `[B]`.
    #[allow(clippy::type_complexity)]
    pub fn params<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &Binding,
        x: Var,
    ) -> Result<(Option<Var>, Option<(Var, Var)>, Option<Var>)> {
        let shape = tape.shape(x).to_vec();
        let b = shape[0];
        let kernel = match (self.kernel, self.zero_k) {
            (Some(w), Some(z)) => {
                let logits = Self::broadcast(tape, p, w, z, b)?;
                let e = tape.exp(logits);
                let k = tape.normalize_rows(e);
                Some(tape.reshape(k, &[b, self.kernel_size, self.kernel_size])?)
            }
            _ => None,
        };
        let sigma = match self.sigma {
            Some((r, s)) => {
                let ones = tape.constant(Tensor::full(&shape, T::one()));
                let mut maps = [ones; 2];
                for (slot, id) in maps.iter_mut().zip([r, s]) {
                    let v = Self::broadcast(tape, p, id, self.zero1, b)?;
                    let v = tape.reshape(v, &[b])?;
                    let v = tape.softplus(v);
                    *slot = tape.mul_per_item(ones, v);
                }
                Some((maps[0], maps[1]))
            }
            None => None,
        };
        let quality = match self.quality {
            Some(id) => {
                let v = Self::broadcast(tape, p, id, self.zero1, b)?;
                let v = tape.reshape(v, &[b])?;
                let v = tape.sigmoid(v);
                Some(tape.scale(v, 100.0))
            }
            None => None,
        };
        Ok((kernel, sigma, quality))
    }
}

/// Networks and parameters of one variant. `ema_x` is the running average of
/// the clean-image generator.
#[derive(Clone, Debug)]
pub struct GeneratorBundle<T> {
    pub variant: Variant,
    pub config: NetConfig,
    pub setting: DegradationSetting,
    pub x: Part<ImageGenerator, T>,
    pub k: Option<Part<KernelGenerator, T>>,
    pub n: Option<Part<NoiseGenerator, T>>,
    pub q: Option<Part<QualityGenerator, T>>,
    pub p: Option<Part<ParametricDegradation, T>>,
    pub ema_x: ParamStore<T>,
}

impl<T: Scalar> GeneratorBundle<T> {
    pub fn new(variant: Variant, config: &NetConfig, setting: &DegradationSetting, seed: u64) -> Result<Self> {
        let x = part(|s, r| ImageGenerator::new(config, s, r), seed, STREAM_GX)?;
        let learned = variant.source() == Source::Learned;
        let k = (learned && variant.blur() != Stage::Off)
            .then(|| part(|s, r| KernelGenerator::new(config, s, r), seed, STREAM_GK))
            .transpose()?;
        let n = (learned && variant.noise())
            .then(|| part(|s, r| NoiseGenerator::new(config, s, r), seed, STREAM_GN))
            .transpose()?;
        let q = (learned && variant.comp() != Stage::Off)
            .then(|| part(|s, r| QualityGenerator::new(config, s, r), seed, STREAM_GQ))
            .transpose()?;
        let p = (variant.source() == Source::Parametric)
            .then(|| {
                let mut params = ParamStore::new();
                ParametricDegradation::new(setting, &mut params).map(|net| Part { net, params })
            })
            .transpose()?;
        let ema_x = x.params.clone();
        Ok(Self { variant, config: config.clone(), setting: setting.clone(), x, k, n, q, p, ema_x })
    }

    /// Trainable stores with their checkpoint prefixes, in a fixed order.
    pub fn stores(&self) -> Vec<(&'static str, &ParamStore<T>)> {
        let mut out = vec![("gx", &self.x.params)];
        if let Some(k) = &self.k {
            out.push(("gk", &k.params));
        }
        if let Some(n) = &self.n {
            out.push(("gn", &n.params));
        }
        if let Some(q) = &self.q {
            out.push(("gq", &q.params));
        }
        if let Some(p) = &self.p {
            out.push(("gp", &p.params));
        }
        out
    }

    pub fn stores_mut(&mut self) -> Vec<(&'static str, &mut ParamStore<T>)> {
        let mut out = vec![("gx", &mut self.x.params)];
        if let Some(k) = &mut self.k {
            out.push(("gk", &mut k.params));
        }
        if let Some(n) = &mut self.n {
            out.push(("gn", &mut n.params));
        }
        if let Some(q) = &mut self.q {
            out.push(("gq", &mut q.params));
        }
        if let Some(p) = &mut self.p {
            out.push(("gp", &mut p.params));
        }
        out
    }

    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Bindings {
        Bindings {
            x: self.x.params.bind(tape, trainable),
            k: self.k.as_ref().map(|p| p.params.bind(tape, trainable)),
            n: self.n.as_ref().map(|p| p.params.bind(tape, trainable)),
            q: self.q.as_ref().map(|p| p.params.bind(tape, trainable)),
            p: self.p.as_ref().map(|p| p.params.bind(tape, trainable)),
        }
    }
}

/// Tape handles of a bound [`GeneratorBundle`].
#[derive(Clone, Debug)]
pub struct Bindings {
    pub x: Binding,
    pub k: Option<Binding>,
    pub n: Option<Binding>,
    pub q: Option<Binding>,
    pub p: Option<Binding>,
}

impl Bindings {
    /// Gradients per trainable store, in [`GeneratorBundle::stores`] order.
    pub fn gradients<T: Scalar>(
        &self,
        grads: &crate::graph::Gradients<T>,
        bundle: &GeneratorBundle<T>,
    ) -> Vec<Vec<Tensor<T>>> {
        let bindings = [Some(&self.x), self.k.as_ref(), self.n.as_ref(), self.q.as_ref(), self.p.as_ref()];
        bindings.into_iter().flatten().zip(bundle.stores()).map(|(b, (_, store))| b.gradients(grads, store)).collect()
    }
}

/// Latent codes for each generator of a variant, `[B, latent_dim]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Latents<T> {
    pub x: Tensor<T>,
    pub k: Option<Tensor<T>>,
    pub n: Option<Tensor<T>>,
    pub q: Option<Tensor<T>>,
}

pub(crate) fn gaussian<T: Scalar, R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::of(rng.sample::<f64, _>(StandardNormal))).collect();
    Tensor::from_vec(shape, data).expect("shape")
}

pub fn sample_latents<T: Scalar, R: Rng + ?Sized>(
    bundle: &GeneratorBundle<T>,
    batch: usize,
    rng: &mut R,
) -> Latents<T> {
    let shape = [batch, bundle.config.latent_dim];
    let x = gaussian(&shape, rng);
    let k = bundle.k.as_ref().map(|_| gaussian(&shape, rng));
    let n = bundle.n.as_ref().map(|_| gaussian(&shape, rng));
    let q = bundle.q.as_ref().map(|_| gaussian(&shape, rng));
    Latents { x, k, n, q }
}

/// Compression stage input: a quality factor per item, optionally mixed with
/// the uncompressed image through a mask.
#[derive(Clone, Copy, Debug)]
pub enum Compression {
    Direct { q: Var },
    Masked { q: Var, m: Var },
}

/// Blur, then read/shot noise with clamping to `[0, 1]`, then compression.
/// Absent stages are skipped.
pub fn apply_degradation<T: Scalar, R: Rng + ?Sized>(
    tape: &mut Tape<T>,
    x: Var,
    kernel: Option<Var>,
    sigma: Option<(Var, Var)>,
    comp: Option<Compression>,
    rng: &mut R,
) -> Result<Var> {
    let mut y = x;
    if let Some(k) = kernel {
        y = convolve_tape(tape, y, k)?;
    }
    if let Some((sr, ss)) = sigma {
        let n = sample_noise_tape(tape, y, sr, ss, rng)?;
        let s = tape.add(y, n);
        y = tape.clamp(s, 0.0, 1.0);
    }
    match comp {
        Some(Compression::Direct { q }) => y = diff_jpeg_tape(tape, y, q, JpegRounding::Smooth)?,
        Some(Compression::Masked { q, m }) => y = compose_compressed_tape(tape, y, q, m)?,
        None => {}
    }
    Ok(y)
}

/// Intermediate values of the fake path.
#[derive(Clone, Copy, Debug)]
pub struct FakeOutput {
    /// Clean generator output.
    pub x: Var,
    /// Degraded image shown to the discriminator.
    pub y: Var,
    /// Applied kernels `[B, K, K]`.
    pub kernel: Option<Var>,
    pub sigma: Option<(Var, Var)>,
    pub q: Option<Var>,
    pub m_q: Option<Var>,
}

/// Generates clean images and degrades them as the variant prescribes.
pub fn fake_pipeline<T: Scalar, R: Rng + ?Sized>(
    tape: &mut Tape<T>,
    bundle: &GeneratorBundle<T>,
    binds: &Bindings,
    latents: &Latents<T>,
    rng: &mut R,
) -> Result<FakeOutput> {
    let zx = tape.constant(latents.x.clone());
    let x = bundle.x.net.forward(tape, &binds.x, zx)?;
    degrade_generated(tape, bundle, binds, latents, x, rng)
}

/// Degrades `x[B, C, H, W]` along the variant's degradation path. Only the
/// degradation latents of `latents` are read.
pub fn degrade_generated<T: Scalar, R: Rng + ?Sized>(
    tape: &mut Tape<T>,
    bundle: &GeneratorBundle<T>,
    binds: &Bindings,
    latents: &Latents<T>,
    x: Var,
    rng: &mut R,
) -> Result<FakeOutput> {
    let batch = tape.shape(x)[0];
    let mut out = FakeOutput { x, y: x, kernel: None, sigma: None, q: None, m_q: None };
    let mut comp = None;
    match bundle.variant.source() {
        Source::None => {}
        Source::Learned => {
            if let (Some(g), Some(b)) = (&bundle.k, &binds.k) {
                let Some(z) = &latents.k else {
                    return invalid("missing kernel latent");
                };
                let z = tape.constant(z.clone());
                let (k_hat, m) = g.net.heads(tape, b, z)?;
                let k = match bundle.variant.blur() {
                    Stage::Masked => compose_kernel_tape(tape, k_hat, m)?,
                    _ => k_hat,
                };
                let size = g.net.kernel_size();
                out.kernel = Some(tape.reshape(k, &[batch, size, size])?);
            }
            if let (Some(g), Some(b)) = (&bundle.n, &binds.n) {
                let Some(z) = &latents.n else {
                    return invalid("missing noise latent");
                };
                let z = tape.constant(z.clone());
                out.sigma = Some(g.net.sigmas(tape, b, z)?);
            }
            if let (Some(g), Some(b)) = (&bundle.q, &binds.q) {
                let Some(z) = &latents.q else {
                    return invalid("missing quality latent");
                };
                let z = tape.constant(z.clone());
                let (q, m) = g.net.heads(tape, b, z)?;
                out.q = Some(q);
                comp = Some(match bundle.variant.comp() {
                    Stage::Masked => {
                        out.m_q = Some(m);
                        Compression::Masked { q, m }
                    }
                    _ => Compression::Direct { q },
                });
            }
        }
        Source::Parametric => {
            let (Some(g), Some(b)) = (&bundle.p, &binds.p) else {
                return invalid("missing parametric degradation");
            };
            let (k, s, q) = g.net.params(tape, b, x)?;
            out.kernel = k;
            out.sigma = s;
            out.q = q;
            comp = q.map(|q| Compression::Direct { q });
        }
        Source::GroundTruth => {
            let (k, s, c) = ground_truth(tape, &bundle.setting, x, rng)?;
            out.kernel = k;
            out.sigma = s;
            comp = c;
            if let Some(Compression::Masked { q, m }) = c {
                out.q = Some(q);
                out.m_q = Some(m);
            }
        }
    }
    out.y = apply_degradation(tape, x, out.kernel, out.sigma, comp, rng)?;
    Ok(out)
}

/// Degrades `x[B, C, H, W]` with per-item draws from a setting.
pub fn setting_degradation<T: Scalar, R: Rng + ?Sized>(
    tape: &mut Tape<T>,
    setting: &DegradationSetting,
    x: Var,
    rng: &mut R,
) -> Result<Var> {
    let (k, s, c) = ground_truth(tape, setting, x, rng)?;
    apply_degradation(tape, x, k, s, c, rng)
}

/// Per-item draws from the true setting as tape constants. Items without a
/// stage get the identity kernel, zero noise or mask zero.
#[allow(clippy::type_complexity)]
fn ground_truth<T: Scalar, R: Rng + ?Sized>(
    tape: &mut Tape<T>,
    setting: &DegradationSetting,
    x: Var,
    rng: &mut R,
) -> Result<(Option<Var>, Option<(Var, Var)>, Option<Compression>)> {
    let shape = tape.shape(x).to_vec();
    let (b, item) = (shape[0], tape.value(x).item_len());
    let size = setting.kernel_size;
    let draws = (0..b).map(|_| setting.sample(rng)).collect::<Result<Vec<_>>>()?;
    let id = identity_kernel::<f64>(size)?;
    let kernel = draws.iter().any(|d| d.flags.blur).then(|| {
        let data = draws
            .iter()
            .flat_map(|d| if d.flags.blur { d.kernel.data() } else { id.data() }.iter().map(|&v| T::of(v)))
            .collect();
        tape.constant(Tensor::from_vec(&[b, size, size], data).expect("shape"))
    });
    let sigma = draws.iter().any(|d| d.flags.noise).then(|| {
        let map = |f: fn(&(f64, f64)) -> f64| {
            let data = draws
                .iter()
                .flat_map(|d| {
                    let v = if d.flags.noise { f(&d.sigma) } else { 0.0 };
                    std::iter::repeat_n(T::of(v), item)
                })
                .collect();
            Tensor::from_vec(&shape, data).expect("shape")
        };
        (tape.constant(map(|s| s.0)), tape.constant(map(|s| s.1)))
    });
    let comp = draws.iter().any(|d| d.flags.jpeg).then(|| {
        let q = draws.iter().map(|d| T::of(d.q.value())).collect();
        let m = draws.iter().map(|d| if d.flags.jpeg { T::one() } else { T::zero() }).collect();
        Compression::Masked {
            q: tape.constant(Tensor::from_vec(&[b], q).expect("shape")),
            m: tape.constant(Tensor::from_vec(&[b], m).expect("shape")),
        }
    });
    Ok((kernel, sigma, comp))
}
