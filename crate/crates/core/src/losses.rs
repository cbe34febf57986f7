//! Training objectives.

use serde::{Deserialize, Serialize};

use crate::degrade::{
    convolve, convolve_tape, diff_jpeg, diff_jpeg_tape, kernel_entropy, kernel_entropy_tape, BlurKernel, Image,
    JpegRounding, QualityFactor,
};
use crate::dual::Dual;
use crate::error::{invalid, Result};
use crate::graph::{Tape, Var};
use crate::nets::{Binding, Discriminator, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Lower clip of the diversity regularizer.
pub const DIVERSITY_CLIP: f64 = 10.0;
const DIVERSITY_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_r1: f64,
    pub lambda_ac: f64,
    pub mu_k: f64,
    pub mu_q: f64,
    pub lambda_ds_k: f64,
    pub lambda_ds_n: f64,
    pub lambda_ds_q: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_r1: 10.0,
            lambda_ac: 0.1,
            mu_k: 1.0,
            mu_q: 10.0,
            lambda_ds_k: 4e-4,
            lambda_ds_n: 0.02,
            lambda_ds_q: 1e-5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            ("lambda_r1", self.lambda_r1),
            ("lambda_ac", self.lambda_ac),
            ("mu_k", self.mu_k),
            ("mu_q", self.mu_q),
            ("lambda_ds_k", self.lambda_ds_k),
            ("lambda_ds_n", self.lambda_ds_n),
            ("lambda_ds_q", self.lambda_ds_q),
        ];
        for (name, v) in all {
            if !(v.is_finite() && v >= 0.0) {
                return invalid(format!("loss weight {name} must be finite and >= 0, got {v}"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    Generator,
    Discriminator,
}

/// Non-saturating adversarial loss over per-item logits. The discriminator
/// side needs `logits_real`; the generator side ignores it.
pub fn nonsat_gan_loss<T: Scalar>(
    tape: &mut Tape<T>,
    logits_real: Option<Var>,
    logits_fake: Var,
    side: Side,
) -> Result<Var> {
    match side {
        Side::Generator => {
            let n = tape.neg(logits_fake);
            let s = tape.softplus(n);
            Ok(tape.mean(s))
        }
        Side::Discriminator => {
            let Some(real) = logits_real else {
                return invalid("discriminator loss needs real logits");
            };
            let n = tape.neg(real);
            let sr = tape.softplus(n);
            let sr = tape.mean(sr);
            let sf = tape.softplus(logits_fake);
            let sf = tape.mean(sf);
            Ok(tape.add(sr, sf))
        }
    }
}

/// A network mapping an image batch to one logit per item.
pub trait Critic {
    fn logits<S: Scalar>(&self, tape: &mut Tape<S>, p: &Binding, y: Var) -> Result<Var>;
}

impl Critic for Discriminator {
    fn logits<S: Scalar>(&self, tape: &mut Tape<S>, p: &Binding, y: Var) -> Result<Var> {
        self.forward(tape, p, y)
    }
}

#[derive(Clone, Debug)]
pub struct R1Penalty<T> {
    /// `½·mean_b ‖∇_y D(y_b)‖²`.
    pub value: T,
    /// Per-item input gradients `∇_y D(y_b)`.
    pub input_grad: Tensor<T>,
    /// Gradient of `value` with respect to each parameter, in store order.
    pub param_grads: Vec<Tensor<T>>,
}

/// Real-data gradient penalty and its parameter gradient.
///
/// The parameter gradient `(1/B)·H_{θy}·g` is the tangent of `∇_θ ΣD` when the
/// input moves along `g = ∇_y ΣD`, obtained by replaying the critic on dual
/// numbers. The critic must treat batch items independently.
pub fn r1_penalty<T: Scalar, C: Critic>(critic: &C, params: &ParamStore<T>, real: &Tensor<T>) -> Result<R1Penalty<T>> {
    let batch = real.batch();
    if batch == 0 {
        return invalid("r1 penalty on an empty batch");
    }
    let mut tape = Tape::new();
    let p = params.bind(&mut tape, false);
    let y = tape.leaf(real.clone());
    let logits = critic.logits(&mut tape, &p, y)?;
    let total = tape.sum(logits);
    let input_grad = tape.grad(total).take(y).unwrap_or_else(|| Tensor::zeros(real.shape()));
    let value = T::of(0.5) * input_grad.sum_sq() / T::of(batch as f64);

    let dual_params = params.cast::<Dual<T>>();
    let mut dtape = Tape::<Dual<T>>::new();
    let dp = dual_params.bind(&mut dtape, true);
    let moved = Tensor::from_vec(
        real.shape(),
        real.data().iter().zip(input_grad.data()).map(|(&v, &g)| Dual::new(v, g)).collect(),
    )?;
    let dy = dtape.constant(moved);
    let dl = critic.logits(&mut dtape, &dp, dy)?;
    let dtotal = dtape.sum(dl);
    let inv_b = T::of(1.0 / batch as f64);
    let param_grads = dp
        .gradients(&dtape.grad(dtotal), &dual_params)
        .into_iter()
        .map(|g| Tensor::from_vec(g.shape(), g.data().iter().map(|d| d.eps * inv_b).collect()).expect("shape"))
        .collect();
    Ok(R1Penalty { value, input_grad, param_grads })
}

/// `exp(−μ_k·H(k))`: large for near-identity kernels.
pub fn ac_blur_weight(entropy: f64, mu_k: f64) -> f64 {
    (-mu_k * entropy).exp()
}

/// `exp(−μ_q·(100 − q)/100)`: large as quality approaches 100.
pub fn ac_comp_weight(q: f64, mu_q: f64) -> f64 {
    (-mu_q * (100.0 - q) / 100.0).exp()
}

fn weighted_residual<T: Scalar>(x: &Image<T>, degraded: &Image<T>, w: f64) -> T {
    let n = x.data().len().max(1) as f64;
    let sq: T = x.data().iter().zip(degraded.data()).map(|(&a, &b)| (a - b) * (a - b)).sum();
    T::of(w) * sq / T::of(n)
}

/// Adaptive blur consistency `w·mean((x − x∗k)²)` for a single image.
pub fn ac_blur<T: Scalar>(x: &Image<T>, k: &BlurKernel<T>, mu_k: f64) -> Result<T> {
    let blurred = convolve(x, k)?;
    Ok(weighted_residual(x, &blurred, ac_blur_weight(kernel_entropy(k).real(), mu_k)))
}

/// Adaptive compression consistency `w·mean((x − jpeg(x, q))²)` for a single image.
pub fn ac_comp<T: Scalar>(x: &Image<T>, q: QualityFactor, mu_q: f64) -> Result<T> {
    let compressed = diff_jpeg(x, q, JpegRounding::Smooth)?;
    Ok(weighted_residual(x, &compressed, ac_comp_weight(q.value(), mu_q)))
}

/// `mean_b w_b·mean((x_b − r_b)²)` where only `x` carries gradient.
fn consistency_tape<T: Scalar>(tape: &mut Tape<T>, x: Var, right: Var, weights: Vec<T>) -> Result<Var> {
    let batch = weights.len();
    let right = tape.detach(right);
    let d = tape.sub(x, right);
    let sq = tape.square(d);
    let per_item = tape.mean_per_item(sq);
    let w = tape.constant(Tensor::from_vec(&[batch], weights)?);
    let weighted = tape.mul(per_item, w);
    Ok(tape.mean(weighted))
}

/// Batched blur consistency for `x[B,C,H,W]` and `k[B,K,K]`. Gradient reaches
/// `x` only through the unblurred term; the kernel receives none.
pub fn ac_blur_tape<T: Scalar>(tape: &mut Tape<T>, x: Var, k: Var, mu_k: f64) -> Result<Var> {
    let xd = tape.detach(x);
    let kd = tape.detach(k);
    let blurred = convolve_tape(tape, xd, kd)?;
    let h = kernel_entropy_tape(tape, kd);
    let weights = tape.value(h).data().iter().map(|e| T::of(ac_blur_weight(e.real(), mu_k))).collect();
    consistency_tape(tape, x, blurred, weights)
}

/// Batched compression consistency for `x[B,C,H,W]` and `q[B]`. Gradient
/// reaches `x` only through the uncompressed term.
pub fn ac_comp_tape<T: Scalar>(tape: &mut Tape<T>, x: Var, q: Var, mu_q: f64) -> Result<Var> {
    let xd = tape.detach(x);
    let qd = tape.detach(q);
    let compressed = diff_jpeg_tape(tape, xd, qd, JpegRounding::Smooth)?;
    let weights = tape.value(qd).data().iter().map(|q| T::of(ac_comp_weight(q.real(), mu_q))).collect();
    consistency_tape(tape, x, compressed, weights)
}

/// Diversity-sensitive regularizer
/// `mean_b max(−mean|a_b − b_b| / (mean|z_a,b − z_b,b| + 1e-8), −10)`.
///
/// Minimizing it pushes outputs at different latents apart. Latents are
/// constants.
pub fn diversity_reg<T: Scalar>(
    tape: &mut Tape<T>,
    out_a: Var,
    out_b: Var,
    z_a: &Tensor<T>,
    z_b: &Tensor<T>,
) -> Result<Var> {
    let batch = tape.value(out_a).batch();
    if z_a.shape() != z_b.shape() || z_a.batch() != batch || tape.shape(out_b) != tape.shape(out_a) {
        return invalid("diversity regularizer needs matching batches");
    }
    let dz = z_a.zip_map(z_b, |a, b| (a - b).abs());
    let inv: Vec<T> = (0..batch)
        .map(|i| {
            T::one() / (dz.item(i).iter().copied().sum::<T>() / T::of(dz.item_len() as f64) + T::of(DIVERSITY_EPS))
        })
        .collect();
    let d = tape.sub(out_a, out_b);
    let d = tape.abs(d);
    let spread = tape.mean_per_item(d);
    let inv = tape.constant(Tensor::from_vec(&[batch], inv)?);
    let ratio = tape.mul(spread, inv);
    let neg = tape.neg(ratio);
    let clipped = tape.clamp_min(neg, -DIVERSITY_CLIP);
    Ok(tape.mean(clipped))
}

#[cfg(test)]
mod tests;
