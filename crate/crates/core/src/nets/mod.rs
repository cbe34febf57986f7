//! Generators, discriminator and translator, plus the two masking
//! compositions that let a degradation generator fall back to the identity.
//!
//! Images enter and leave every network on the `[0, 1]` scale. Networks that
//! end in Tanh are mapped affinely at the boundary.

mod checkpoint;
mod layers;
mod params;

pub use checkpoint::{config_digest, ArrayData, Checkpoint, NamedArray, CHECKPOINT_VERSION};
pub use layers::{Conv, Linear, MlpTrunk, ResBlock, ResBlockDown, ResBlockUp};
pub use params::{Binding, ParamId, ParamStore};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::degrade::{diff_jpeg_tape, identity_kernel, BlurKernel, Image, JpegRounding};
use crate::error::{invalid, Result};
use crate::graph::{Tape, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Initial per-pixel noise level of the σ heads.
pub const SIGMA_INIT: f64 = 1e-3;

/// Network sizes. Presets mirror the published architectures at full width
/// and provide narrow variants for CPU runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetConfig {
    pub image_size: usize,
    pub channels: usize,
    pub latent_dim: usize,
    /// Channels of the first generator feature map.
    pub gen_init_channels: usize,
    /// Output widths of the upsampling blocks; their count fixes the
    /// starting resolution `image_size / 2ⁿ`.
    pub gen_up_channels: Vec<usize>,
    pub disc_down_channels: Vec<usize>,
    pub disc_plain_channels: Vec<usize>,
    pub mlp_hidden: usize,
    pub kernel_size: usize,
    pub resblock_scale: f64,
    pub translator_width: usize,
    pub translator_blocks: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self::tiny(32)
    }
}

impl NetConfig {
    /// 32×32 colour images, width 128, 9×9 kernels.
    pub fn cifar10() -> Self {
        Self {
            image_size: 32,
            channels: 3,
            latent_dim: 128,
            gen_init_channels: 128,
            gen_up_channels: vec![128, 128, 128],
            disc_down_channels: vec![128, 128],
            disc_plain_channels: vec![128, 128],
            mlp_hidden: 128,
            kernel_size: 9,
            resblock_scale: 0.1,
            translator_width: 128,
            translator_blocks: 3,
        }
    }

    /// 128×128 faces, 15×15 kernels. Kept as a configuration only.
    pub fn ffhq() -> Self {
        Self {
            image_size: 128,
            channels: 3,
            latent_dim: 256,
            gen_init_channels: 1024,
            gen_up_channels: vec![1024, 512, 256, 128, 64],
            disc_down_channels: vec![64, 128, 256, 512, 1024],
            disc_plain_channels: vec![1024],
            mlp_hidden: 128,
            kernel_size: 15,
            resblock_scale: 0.1,
            translator_width: 128,
            translator_blocks: 3,
        }
    }

    /// Width-32 network for `image_size` (16, 28 or 32 in practice).
    pub fn tiny(image_size: usize) -> Self {
        let ups = up_blocks_for(image_size);
        Self {
            image_size,
            channels: 3,
            latent_dim: 128,
            gen_init_channels: 32,
            gen_up_channels: vec![32; ups],
            disc_down_channels: vec![32, 32],
            disc_plain_channels: vec![32, 32],
            mlp_hidden: 128,
            kernel_size: 9,
            resblock_scale: 0.1,
            translator_width: 32,
            translator_blocks: 3,
        }
    }

    /// Width-16, 16×16 network used by quick experiments and tests.
    pub fn micro() -> Self {
        Self {
            image_size: 16,
            latent_dim: 32,
            gen_init_channels: 16,
            gen_up_channels: vec![16, 16],
            disc_down_channels: vec![16, 16],
            disc_plain_channels: vec![16],
            mlp_hidden: 32,
            kernel_size: 9,
            translator_width: 16,
            translator_blocks: 2,
            ..Self::tiny(16)
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "cifar10" => Ok(Self::cifar10()),
            "ffhq" => Ok(Self::ffhq()),
            "tiny16" => Ok(Self::tiny(16)),
            "tiny28" => Ok(Self::tiny(28)),
            "tiny32" | "tiny" => Ok(Self::tiny(32)),
            "micro" => Ok(Self::micro()),
            other => invalid(format!("unknown network preset {other:?}")),
        }
    }

    pub fn start_size(&self) -> usize {
        self.image_size >> self.gen_up_channels.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels != 1 && self.channels != 3 {
            return invalid("channels must be 1 or 3");
        }
        if self.kernel_size.is_multiple_of(2) {
            return invalid(format!("kernel_size must be odd, got {}", self.kernel_size));
        }
        if !(self.resblock_scale > 0.0) {
            return invalid("resblock_scale must be positive");
        }
        let n = self.gen_up_channels.len();
        if self.start_size() == 0 || self.start_size() << n != self.image_size {
            return invalid(format!("image_size {} is not divisible by 2^{n}", self.image_size));
        }
        let d = self.disc_down_channels.len();
        if d == 0 || !self.image_size.is_multiple_of(1 << d) {
            return invalid(format!("image_size {} cannot be halved {d} times", self.image_size));
        }
        if [self.latent_dim, self.gen_init_channels, self.mlp_hidden, self.translator_width].contains(&0) {
            return invalid("network widths must be positive");
        }
        Ok(())
    }
}

/// Halve while even and at least 4 remains: 32 → 3, 28 → 2, 16 → 2.
fn up_blocks_for(size: usize) -> usize {
    let (mut s, mut n) = (size, 0);
    while s % 2 == 0 && s / 2 >= 4 {
        s /= 2;
        n += 1;
    }
    n
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum OutputHead {
    /// Tanh mapped to `[0, 1]`.
    Image,
    /// Softplus, for standard deviations.
    Positive,
}

/// Residual upsampling generator `z → [B, C_out, S, S]`.
#[derive(Clone, Debug)]
pub struct ImageGenerator {
    latent_dim: usize,
    start: usize,
    init_channels: usize,
    fc: Linear,
    blocks: Vec<ResBlockUp>,
    out: Conv,
    head: OutputHead,
}

impl ImageGenerator {
    /// Clean image generator `G_x`.
    pub fn new<T: Scalar, R: Rng + ?Sized>(cfg: &NetConfig, store: &mut ParamStore<T>, rng: &mut R) -> Result<Self> {
        Self::build(cfg, store, cfg.channels, OutputHead::Image, rng)
    }

    fn build<T: Scalar, R: Rng + ?Sized>(
        cfg: &NetConfig,
        store: &mut ParamStore<T>,
        out_channels: usize,
        head: OutputHead,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let start = cfg.start_size();
        let fc = Linear::new(store, "fc", cfg.latent_dim, start * start * cfg.gen_init_channels, rng);
        let mut blocks = Vec::new();
        let mut cin = cfg.gen_init_channels;
        for (i, &c) in cfg.gen_up_channels.iter().enumerate() {
            blocks.push(ResBlockUp::new(store, &format!("up{i}"), cin, c, cfg.resblock_scale, rng));
            cin = c;
        }
        let out = match head {
            OutputHead::Image => Conv::new(store, "out", cin, out_channels, 3, rng),
            // starts as a constant σ = SIGMA_INIT everywhere
            OutputHead::Positive => Conv::constant(store, "out", cin, out_channels, 3, inverse_softplus(SIGMA_INIT)),
        };
        Ok(Self { latent_dim: cfg.latent_dim, start, init_channels: cfg.gen_init_channels, fc, blocks, out, head })
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Binding, z: Var) -> Result<Var> {
        let zs = tape.shape(z).to_vec();
        if zs.len() != 2 || zs[1] != self.latent_dim {
            return invalid(format!("latent shape {zs:?}, expected [B, {}]", self.latent_dim));
        }
        let h = self.fc.forward(tape, p, z)?;
        let mut h = tape.reshape(h, &[zs[0], self.init_channels, self.start, self.start])?;
        for b in &self.blocks {
            h = b.forward(tape, p, h)?;
        }
        let h = tape.relu(h);
        let h = self.out.forward(tape, p, h)?;
        Ok(match self.head {
            OutputHead::Image => {
                let t = tape.tanh(h);
                tape.affine(t, 0.5, 0.5)
            }
            OutputHead::Positive => tape.softplus(h),
        })
    }
}

fn inverse_softplus(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

/// Noise generator `G_n`: the image generator with doubled output channels
/// through softplus, split into `σ_read` and `σ_shot` maps.
#[derive(Clone, Debug)]
pub struct NoiseGenerator {
    net: ImageGenerator,
    channels: usize,
}

impl NoiseGenerator {
    pub fn new<T: Scalar, R: Rng + ?Sized>(cfg: &NetConfig, store: &mut ParamStore<T>, rng: &mut R) -> Result<Self> {
        let net = ImageGenerator::build(cfg, store, 2 * cfg.channels, OutputHead::Positive, rng)?;
        Ok(Self { net, channels: cfg.channels })
    }

    /// `(σ_read, σ_shot)`, each `[B, C, S, S]`.
    pub fn sigmas<T: Scalar>(&self, tape: &mut Tape<T>, p: &Binding, z: Var) -> Result<(Var, Var)> {
        let s = self.net.forward(tape, p, z)?;
        let read = tape.narrow_channels(s, 0, self.channels)?;
        let shot = tape.narrow_channels(s, self.channels, self.channels)?;
        Ok((read, shot))
    }
}

/// Blur-kernel generator `G_k`: shared MLP trunk with a normalized kernel head
/// and a mask head.
#[derive(Clone, Debug)]
pub struct KernelGenerator {
    trunk: MlpTrunk,
    kernel: Linear,
    mask: Linear,
    size: usize,
}

impl KernelGenerator {
    pub fn new<T: Scalar, R: Rng + ?Sized>(cfg: &NetConfig, store: &mut ParamStore<T>, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let k2 = cfg.kernel_size * cfg.kernel_size;
        Ok(Self {
            trunk: MlpTrunk::new(store, "trunk", cfg.latent_dim, cfg.mlp_hidden, rng),
            kernel: Linear::new(store, "kernel", cfg.mlp_hidden, k2, rng),
            mask: Linear::new(store, "mask", cfg.mlp_hidden, k2, rng),
            size: cfg.kernel_size,
        })
    }

    pub fn kernel_size(&self) -> usize {
        self.size
    }

    /// `(k̂, m_k)`, both `[B, K·K]`; `k̂` rows sum to one, `m_k ∈ (0, 1)`.
    pub fn heads<T: Scalar>(&self, tape: &mut Tape<T>, p: &Binding, z: Var) -> Result<(Var, Var)> {
        let h = self.trunk.forward(tape, p, z)?;
        let k = self.kernel.forward(tape, p, h)?;
        let k = tape.sigmoid(k);
        let k = tape.normalize_rows(k);
        let m = self.mask.forward(tape, p, h)?;
        let m = tape.sigmoid(m);
        Ok((k, m))
    }
}

/// Quality-factor generator `G_q`.
#[derive(Clone, Debug)]
pub struct QualityGenerator {
    trunk: MlpTrunk,
    quality: Linear,
    mask: Linear,
}

impl QualityGenerator {
    pub fn new<T: Scalar, R: Rng + ?Sized>(cfg: &NetConfig, store: &mut ParamStore<T>, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            trunk: MlpTrunk::new(store, "trunk", cfg.latent_dim, cfg.mlp_hidden, rng),
            quality: Linear::new(store, "quality", cfg.mlp_hidden, 1, rng),
            mask: Linear::new(store, "mask", cfg.mlp_hidden, 1, rng),
        })
    }

    /// `(q, m_q)`, both `[B]`, with `q ∈ (0, 100)` and `m_q ∈ (0, 1)`.
    pub fn heads<T: Scalar>(&self, tape: &mut Tape<T>, p: &Binding, z: Var) -> Result<(Var, Var)> {
        let b = tape.shape(z)[0];
        let h = self.trunk.forward(tape, p, z)?;
        let q = self.quality.forward(tape, p, h)?;
        let q = tape.sigmoid(q);
        let q = tape.scale(q, 100.0);
        let q = tape.reshape(q, &[b])?;
        let m = self.mask.forward(tape, p, h)?;
        let m = tape.sigmoid(m);
        let m = tape.reshape(m, &[b])?;
        Ok((q, m))
    }
}

/// `m·k̂ + (1 − m)·k_I`, renormalized to sum one. `k̂, m: [B, K·K]`.
pub fn compose_kernel_tape<T: Scalar>(tape: &mut Tape<T>, k_hat: Var, m: Var) -> Result<Var> {
    let shape = tape.shape(k_hat).to_vec();
    if shape.len() != 2 || tape.shape(m) != shape.as_slice() {
        return invalid(format!("kernel and mask shapes {:?} vs {:?}", shape, tape.shape(m)));
    }
    let size = (shape[1] as f64).sqrt().round() as usize;
    let id = identity_kernel::<T>(size)?;
    let mut ids = Tensor::zeros(&shape);
    for b in 0..shape[0] {
        ids.item_mut(b).copy_from_slice(id.data());
    }
    let id = tape.constant(ids);
    let a = tape.mul(m, k_hat);
    let one_minus = tape.affine(m, -1.0, 1.0);
    let c = tape.mul(one_minus, id);
    let s = tape.add(a, c);
    Ok(tape.normalize_rows(s))
}

/// Single-kernel form of [`compose_kernel_tape`].
pub fn compose_kernel<T: Scalar>(k_hat: &BlurKernel<T>, m: &[T]) -> Result<BlurKernel<T>> {
    if m.len() != k_hat.data().len() {
        return invalid("mask and kernel sizes differ");
    }
    if m.iter().any(|v| !(v.real() >= 0.0 && v.real() <= 1.0)) {
        return invalid("mask entries must lie in [0, 1]");
    }
    let id = identity_kernel::<T>(k_hat.size())?;
    let mixed = k_hat.data().iter().zip(id.data()).zip(m).map(|((&k, &i), &w)| w * k + (T::one() - w) * i).collect();
    BlurKernel::normalized(k_hat.size(), mixed)
}

/// `m_q·jpeg(x, q) + (1 − m_q)·x` per item. `x: [B, C, H, W]`, `q, m_q: [B]`.
pub fn compose_compressed_tape<T: Scalar>(tape: &mut Tape<T>, x: Var, q: Var, m_q: Var) -> Result<Var> {
    let y = diff_jpeg_tape(tape, x, q, JpegRounding::Smooth)?;
    Ok(tape.mix_per_item(y, x, m_q))
}

/// Single-image form of [`compose_compressed_tape`].
pub fn compose_compressed<T: Scalar>(x: &Image<T>, q: T, m_q: T) -> Result<Image<T>> {
    let mut tape = Tape::new();
    let xv = tape.constant(Image::batch(std::slice::from_ref(x))?);
    let qv = tape.constant(Tensor::from_vec(&[1], vec![q])?);
    let mv = tape.constant(Tensor::from_vec(&[1], vec![m_q])?);
    let y = compose_compressed_tape(&mut tape, xv, qv, mv)?;
    Image::from_tensor(tape.value(y))
}

/// Residual discriminator returning one logit per image.
#[derive(Clone, Debug)]
pub struct Discriminator {
    image_size: usize,
    channels: usize,
    down: Vec<ResBlockDown>,
    plain: Vec<ResBlock>,
    fc: Linear,
}

impl Discriminator {
    pub fn new<T: Scalar, R: Rng + ?Sized>(cfg: &NetConfig, store: &mut ParamStore<T>, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let mut cin = cfg.channels;
        let mut down = Vec::new();
        for (i, &c) in cfg.disc_down_channels.iter().enumerate() {
            down.push(ResBlockDown::new(store, &format!("down{i}"), cin, c, cfg.resblock_scale, i == 0, rng));
            cin = c;
        }
        let mut plain = Vec::new();
        for (i, &c) in cfg.disc_plain_channels.iter().enumerate() {
            plain.push(ResBlock::new(store, &format!("block{i}"), cin, c, cfg.resblock_scale, rng));
            cin = c;
        }
        let fc = Linear::new(store, "fc", cin, 1, rng);
        Ok(Self { image_size: cfg.image_size, channels: cfg.channels, down, plain, fc })
    }

    /// Logits `[B]` for images `[B, C, S, S]` in `[0, 1]`.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Binding, y: Var) -> Result<Var> {
        let s = tape.shape(y).to_vec();
        if s.len() != 4 || s[1] != self.channels || s[2] != self.image_size || s[3] != self.image_size {
            return invalid(format!(
                "discriminator expects [B, {}, {}, {}], got {s:?}",
                self.channels, self.image_size, self.image_size
            ));
        }
        let mut h = tape.affine(y, 2.0, -1.0);
        for b in &self.down {
            h = b.forward(tape, p, h)?;
        }
        for b in &self.plain {
            h = b.forward(tape, p, h)?;
        }
        let h = tape.relu(h);
        let h = tape.global_avg_pool(h);
        let l = self.fc.forward(tape, p, h)?;
        tape.reshape(l, &[s[0]])
    }
}

/// Same-resolution image translator used for restoration.
#[derive(Clone, Debug)]
pub struct Translator {
    channels: usize,
    inp: Conv,
    blocks: Vec<ResBlock>,
    out: Conv,
}

impl Translator {
    pub fn new<T: Scalar, R: Rng + ?Sized>(cfg: &NetConfig, store: &mut ParamStore<T>, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let w = cfg.translator_width;
        let inp = Conv::new(store, "in", cfg.channels, w, 3, rng);
        let blocks = (0..cfg.translator_blocks)
            .map(|i| ResBlock::new(store, &format!("block{i}"), w, w, cfg.resblock_scale, rng))
            .collect();
        let out = Conv::new(store, "out", w, cfg.channels, 3, rng);
        Ok(Self { channels: cfg.channels, inp, blocks, out })
    }

    /// Restored images `[B, C, H, W]` in `[0, 1]`; any spatial size works.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Binding, y: Var) -> Result<Var> {
        let s = tape.shape(y).to_vec();
        if s.len() != 4 || s[1] != self.channels {
            return invalid(format!("translator expects [B, {}, H, W], got {s:?}", self.channels));
        }
        let h = tape.affine(y, 2.0, -1.0);
        let mut h = self.inp.forward(tape, p, h)?;
        for b in &self.blocks {
            h = b.forward(tape, p, h)?;
        }
        let h = tape.relu(h);
        let h = self.out.forward(tape, p, h)?;
        let t = tape.tanh(h);
        Ok(tape.affine(t, 0.5, 0.5))
    }
}

#[cfg(test)]
mod tests;
