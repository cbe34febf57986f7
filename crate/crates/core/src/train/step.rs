//! One discriminator update followed by one generator update.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::bundle::{init_rng, sample_latents, Part, STREAM_D};
use super::{ema_update, fake_pipeline, Adam, GeneratorBundle, TrainConfig};
use crate::degrade::kernel_entropy_tape;
use crate::error::{Error, Result};
use crate::graph::{Tape, Var};
use crate::losses::{ac_blur_tape, ac_comp_tape, diversity_reg, nonsat_gan_loss, r1_penalty, Side};
use crate::nets::{Discriminator, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Everything that evolves during training.
#[derive(Clone, Debug)]
pub struct TrainState<T> {
    pub bundle: GeneratorBundle<T>,
    pub d: Part<Discriminator, T>,
    /// One optimizer per store of [`GeneratorBundle::stores`].
    pub opt_g: Vec<Adam<T>>,
    pub opt_d: Adam<T>,
    /// Completed iterations.
    pub iteration: u64,
}

impl<T: Scalar> TrainState<T> {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        let net = cfg.net_config()?;
        let setting = cfg.degradation_setting()?;
        let bundle = GeneratorBundle::new(cfg.train.variant, &net, &setting, cfg.train.seed)?;
        let mut params = ParamStore::new();
        let d = Discriminator::new(&net, &mut params, &mut init_rng(cfg.train.seed, STREAM_D))?;
        let opt_g = bundle.stores().iter().map(|(_, s)| Adam::new(s)).collect();
        let opt_d = Adam::new(&params);
        Ok(Self { bundle, d: Part { net: d, params }, opt_g, opt_d, iteration: 0 })
    }

    fn diagnostics(&self) -> String {
        let mut parts: Vec<String> =
            self.bundle.stores().iter().map(|(name, s)| format!("|{name}|={:.4e}", s.norm())).collect();
        parts.push(format!("|d|={:.4e}", self.d.params.norm()));
        parts.join(" ")
    }
}

/// Values logged per iteration. Absent terms are `None`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub iter: u64,
    pub d_loss: f64,
    pub g_loss: f64,
    pub r1: f64,
    pub ac_blur: Option<f64>,
    pub ac_comp: Option<f64>,
    pub mean_q: Option<f64>,
    pub mean_entropy: Option<f64>,
    pub mean_m_q: Option<f64>,
}

fn scalar_of<T: Scalar>(tape: &Tape<T>, v: Var) -> f64 {
    tape.value(v).data()[0].real()
}

fn mean_of<T: Scalar>(tape: &Tape<T>, v: Var) -> f64 {
    let t = tape.value(v);
    t.sum().real() / t.len().max(1) as f64
}

fn all_finite<T: Scalar>(grads: &[Tensor<T>]) -> bool {
    grads.iter().all(Tensor::all_finite)
}

/// Weighted sum of scalar terms.
fn weighted_sum<T: Scalar>(tape: &mut Tape<T>, base: Var, terms: &[(f64, Var)]) -> Var {
    let mut total = base;
    for &(w, v) in terms {
        if w != 0.0 {
            let s = tape.scale(v, w);
            total = tape.add(total, s);
        }
    }
    total
}

/// Diversity terms for the degradation generators on one latent pair.
fn diversity_terms<T: Scalar, R: Rng + ?Sized>(
    tape: &mut Tape<T>,
    state: &TrainState<T>,
    binds: &super::Bindings,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<Vec<(f64, Var)>> {
    let bundle = &state.bundle;
    let pairs = cfg.train.diversity_pairs;
    let w = &cfg.losses;
    let mut out = Vec::new();
    let pair = |rng: &mut R| {
        let shape = [pairs, bundle.config.latent_dim];
        (super::bundle::gaussian::<T, R>(&shape, rng), super::bundle::gaussian::<T, R>(&shape, rng))
    };
    if let (Some(g), Some(b)) = (&bundle.k, &binds.k) {
        let (za, zb) = pair(rng);
        let masked = bundle.variant.blur() == super::Stage::Masked;
        let kernel = |tape: &mut Tape<T>, z: &Tensor<T>| -> Result<Var> {
            let z = tape.constant(z.clone());
            let (k, m) = g.net.heads(tape, b, z)?;
            if masked {
                crate::nets::compose_kernel_tape(tape, k, m)
            } else {
                Ok(k)
            }
        };
        let (ka, kb) = (kernel(tape, &za)?, kernel(tape, &zb)?);
        out.push((w.lambda_ds_k, diversity_reg(tape, ka, kb, &za, &zb)?));
    }
    if let (Some(g), Some(b)) = (&bundle.n, &binds.n) {
        let (za, zb) = pair(rng);
        let (va, vb) = (tape.constant(za.clone()), tape.constant(zb.clone()));
        let (ra, sa) = g.net.sigmas(tape, b, va)?;
        let (rb, sb) = g.net.sigmas(tape, b, vb)?;
        let dr = diversity_reg(tape, ra, rb, &za, &zb)?;
        let ds = diversity_reg(tape, sa, sb, &za, &zb)?;
        let sum = tape.add(dr, ds);
        out.push((w.lambda_ds_n, tape.scale(sum, 0.5)));
    }
    if let (Some(g), Some(b)) = (&bundle.q, &binds.q) {
        let (za, zb) = pair(rng);
        let heads = |tape: &mut Tape<T>, z: &Tensor<T>| -> Result<Var> {
            let z = tape.constant(z.clone());
            let (q, m) = g.net.heads(tape, b, z)?;
            let q = tape.scale(q, 0.01);
            let q = tape.reshape(q, &[pairs, 1])?;
            let m = tape.reshape(m, &[pairs, 1])?;
            tape.concat_cols(&[q, m])
        };
        let (ha, hb) = (heads(tape, &za)?, heads(tape, &zb)?);
        out.push((w.lambda_ds_q, diversity_reg(tape, ha, hb, &za, &zb)?));
    }
    Ok(out)
}

/// Runs one iteration on a real batch `[B, C, H, W]`. All randomness comes
/// from `rng`.
pub fn train_step<T: Scalar, R: Rng + ?Sized>(
    state: &mut TrainState<T>,
    real: &Tensor<T>,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<StepMetrics> {
    let batch = real.batch();
    let iteration = state.iteration;
    let weights = &cfg.losses;
    let non_finite = |state: &TrainState<T>, what: &str| Error::NonFinite {
        iteration,
        diagnostics: format!("{what}; {}", state.diagnostics()),
    };

    // discriminator
    let (d_loss, r1_value, d_grads) = {
        let mut tape = Tape::new();
        let gb = state.bundle.bind(&mut tape, false);
        let latents = sample_latents(&state.bundle, batch, rng);
        let fake = fake_pipeline(&mut tape, &state.bundle, &gb, &latents, rng)?;
        let db = state.d.params.bind(&mut tape, true);
        let yr = tape.constant(real.clone());
        let lr = state.d.net.forward(&mut tape, &db, yr)?;
        let lf = state.d.net.forward(&mut tape, &db, fake.y)?;
        let loss = nonsat_gan_loss(&mut tape, Some(lr), lf, Side::Discriminator)?;
        let mut grads = db.gradients(&tape.grad(loss), &state.d.params);
        let d_loss = scalar_of(&tape, loss);
        let mut r1_value = 0.0;
        if weights.lambda_r1 > 0.0 {
            let r1 = r1_penalty(&state.d.net, &state.d.params, real)?;
            r1_value = r1.value.real();
            let lam = T::of(weights.lambda_r1);
            for (g, p) in grads.iter_mut().zip(&r1.param_grads) {
                *g = g.zip_map(p, |a, b| a + lam * b);
            }
        }
        (d_loss, r1_value, grads)
    };
    if !(d_loss.is_finite() && r1_value.is_finite() && all_finite(&d_grads)) {
        return Err(non_finite(state, &format!("d_loss={d_loss} r1={r1_value}")));
    }
    state.opt_d.step(&mut state.d.params, &d_grads, &cfg.adam)?;

    // generators
    let mut tape = Tape::new();
    let gb = state.bundle.bind(&mut tape, true);
    let latents = sample_latents(&state.bundle, batch, rng);
    let fake = fake_pipeline(&mut tape, &state.bundle, &gb, &latents, rng)?;
    let db = state.d.params.bind(&mut tape, false);
    let lf = state.d.net.forward(&mut tape, &db, fake.y)?;
    let adv = nonsat_gan_loss(&mut tape, None, lf, Side::Generator)?;
    let variant = state.bundle.variant;
    let mut terms = Vec::new();
    let mut ac_blur = None;
    let mut ac_comp = None;
    if variant.ac_blur() {
        if let Some(k) = fake.kernel {
            let mu = if variant.adaptive_ac() { weights.mu_k } else { 0.0 };
            let v = ac_blur_tape(&mut tape, fake.x, k, mu)?;
            ac_blur = Some(scalar_of(&tape, v));
            terms.push((weights.lambda_ac, v));
        }
    }
    if variant.ac_comp() {
        if let Some(q) = fake.q {
            let mu = if variant.adaptive_ac() { weights.mu_q } else { 0.0 };
            let v = ac_comp_tape(&mut tape, fake.x, q, mu)?;
            ac_comp = Some(scalar_of(&tape, v));
            terms.push((weights.lambda_ac, v));
        }
    }
    terms.extend(diversity_terms(&mut tape, state, &gb, cfg, rng)?);
    let total = weighted_sum(&mut tape, adv, &terms);
    let g_loss = scalar_of(&tape, total);
    let g_grads = gb.gradients(&tape.grad(total), &state.bundle);
    let mean_q = fake.q.map(|q| mean_of(&tape, q));
    let mean_m_q = fake.m_q.map(|m| mean_of(&tape, m));
    let mean_entropy = fake.kernel.map(|k| {
        let kd = tape.detach(k);
        let h = kernel_entropy_tape(&mut tape, kd);
        mean_of(&tape, h)
    });
    if !(g_loss.is_finite() && g_grads.iter().all(|g| all_finite(g))) {
        return Err(non_finite(state, &format!("g_loss={g_loss}")));
    }
    let cfg_adam = &cfg.adam;
    for ((opt, (_, store)), grads) in state.opt_g.iter_mut().zip(state.bundle.stores_mut()).zip(&g_grads) {
        opt.step(store, grads, cfg_adam)?;
    }
    let bundle = &mut state.bundle;
    ema_update(&mut bundle.ema_x, &bundle.x.params, cfg.train.ema_decay)?;
    state.iteration += 1;
    Ok(StepMetrics {
        iter: state.iteration,
        d_loss,
        g_loss,
        r1: r1_value,
        ac_blur,
        ac_comp,
        mean_q,
        mean_entropy,
        mean_m_q,
    })
}
