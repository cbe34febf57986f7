use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{
    convolve, convolve_tape, diff_jpeg, diff_jpeg_tape, reference_jpeg, sample_noise, sample_noise_tape, BlurKernel,
    Image, JpegRounding, NoiseParams, QualityFactor,
};
use crate::error::{invalid, Result};
use crate::graph::{Tape, Var};
use crate::scalar::Scalar;

/// Which stages of `jpeg(clamp(x ∗ k + n), q)` are applied.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DegradeFlags {
    pub blur: bool,
    pub noise: bool,
    pub jpeg: bool,
}

impl DegradeFlags {
    pub const NONE: Self = Self { blur: false, noise: false, jpeg: false };
    pub const ALL: Self = Self { blur: true, noise: true, jpeg: true };

    pub fn any(self) -> bool {
        self.blur || self.noise || self.jpeg
    }
}

fn blur_and_noise<T: Scalar, R: Rng + ?Sized>(
    x: &Image<T>,
    k: &BlurKernel<T>,
    p: &NoiseParams<T>,
    rng: &mut R,
    flags: DegradeFlags,
) -> Result<Image<T>> {
    let mut y = if flags.blur { convolve(x, k)? } else { x.clone() };
    if flags.noise {
        let n = sample_noise(&y, p, rng)?;
        for (v, &nv) in y.data_mut().iter_mut().zip(n.data()) {
            *v = (*v + nv).max(T::zero()).min(T::one());
        }
    }
    Ok(y)
}

/// Blur, then additive noise clamped to `[0, 1]`, then smooth-rounding JPEG.
/// Disabled stages are skipped entirely, so all-off returns `x` unchanged.
pub fn degrade<T: Scalar, R: Rng + ?Sized>(
    x: &Image<T>,
    k: &BlurKernel<T>,
    p: &NoiseParams<T>,
    q: QualityFactor,
    rng: &mut R,
    flags: DegradeFlags,
) -> Result<Image<T>> {
    let y = blur_and_noise(x, k, p, rng, flags)?;
    if flags.jpeg {
        diff_jpeg(&y, q, JpegRounding::Smooth)
    } else {
        Ok(y)
    }
}

/// [`degrade`] with the reference codec. Used to build real corpora.
pub fn degrade_reference<R: Rng + ?Sized>(
    x: &Image<f64>,
    k: &BlurKernel<f64>,
    p: &NoiseParams<f64>,
    q: QualityFactor,
    rng: &mut R,
    flags: DegradeFlags,
) -> Result<Image<f64>> {
    let y = blur_and_noise(x, k, p, rng, flags)?;
    Ok(if flags.jpeg { reference_jpeg(&y, q) } else { y })
}

/// Tape inputs for [`degrade_tape`]; unused stages may be `None`.
pub struct DegradeVars {
    /// `[B, K, K]` kernels.
    pub kernel: Option<Var>,
    /// `[B, C, H, W]` read and shot standard deviations.
    pub sigma: Option<(Var, Var)>,
    /// `[B]` quality factors.
    pub quality: Option<Var>,
}

/// Batched, differentiable [`degrade`]. A stage runs when its flag is set and
/// its parameters are present.
pub fn degrade_tape<T: Scalar, R: Rng + ?Sized>(
    tape: &mut Tape<T>,
    x: Var,
    params: &DegradeVars,
    rng: &mut R,
    flags: DegradeFlags,
) -> Result<Var> {
    let mut y = x;
    if flags.blur {
        let Some(k) = params.kernel else {
            return invalid("blur stage needs a kernel");
        };
        y = convolve_tape(tape, y, k)?;
    }
    if flags.noise {
        let Some((sr, ss)) = params.sigma else {
            return invalid("noise stage needs sigmas");
        };
        let n = sample_noise_tape(tape, y, sr, ss, rng)?;
        let s = tape.add(y, n);
        y = tape.clamp(s, 0.0, 1.0);
    }
    if flags.jpeg {
        let Some(q) = params.quality else {
            return invalid("jpeg stage needs a quality");
        };
        y = diff_jpeg_tape(tape, y, q, JpegRounding::Smooth)?;
    }
    Ok(y)
}
