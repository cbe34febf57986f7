use rand::Rng;
use rand_distr::StandardNormal;

use super::{Image, NoiseParams};
use crate::error::{invalid, Result};
use crate::graph::{Tape, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Floor under the square root in the shot-noise derivative.
const SQRT_FLOOR: f64 = 1e-12;

/// Draws `(ε_read, ε_shot)` pairs, interleaved per value.
fn draw_eps<T: Scalar, R: Rng + ?Sized>(n: usize, rng: &mut R) -> (Vec<T>, Vec<T>) {
    let mut e1 = Vec::with_capacity(n);
    let mut e2 = Vec::with_capacity(n);
    for _ in 0..n {
        e1.push(T::of(rng.sample::<f64, _>(StandardNormal)));
        e2.push(T::of(rng.sample::<f64, _>(StandardNormal)));
    }
    (e1, e2)
}

/// Read/shot noise `n = σ_read·ε₁ + σ_shot·ε₂·√clamp(x, 0, 1)`, returned as a
/// `[C, H, W]` field (not clamped).
pub fn sample_noise<T: Scalar, R: Rng + ?Sized>(x: &Image<T>, p: &NoiseParams<T>, rng: &mut R) -> Result<Tensor<T>> {
    if p.len() != x.data().len() {
        return invalid(format!("noise parameters cover {} values, image has {}", p.len(), x.data().len()));
    }
    let (e1, e2) = draw_eps::<T, R>(p.len(), rng);
    let data = (0..p.len())
        .map(|i| {
            let cx = x.data()[i].max(T::zero()).min(T::one());
            p.sigma_read[i] * e1[i] + p.sigma_shot[i] * e2[i] * cx.sqrt()
        })
        .collect();
    Tensor::from_vec(&[x.channels(), x.height(), x.width()], data)
}

/// Tape form of [`sample_noise`] on `[B, C, H, W]` tensors. The standard normal
/// draws are constants, so gradients reach `x`, `sigma_read` and `sigma_shot`.
pub fn sample_noise_tape<T: Scalar, R: Rng + ?Sized>(
    tape: &mut Tape<T>,
    x: Var,
    sigma_read: Var,
    sigma_shot: Var,
    rng: &mut R,
) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    if tape.shape(sigma_read) != shape.as_slice() || tape.shape(sigma_shot) != shape.as_slice() {
        return invalid("noise parameters must match the image shape");
    }
    let n = tape.value(x).len();
    let (e1, e2) = draw_eps::<T, R>(n, rng);
    let (xv, sr, ss) = (tape.value(x), tape.value(sigma_read), tape.value(sigma_shot));
    let data = (0..n)
        .map(|i| {
            let cx = xv.data()[i].max(T::zero()).min(T::one());
            sr.data()[i] * e1[i] + ss.data()[i] * e2[i] * cx.sqrt()
        })
        .collect();
    let value = Tensor::from_vec(&shape, data)?;
    Ok(tape.custom(
        &[x, sigma_read, sigma_shot],
        value,
        Box::new(move |c| {
            let (xv, ss, g) = (c.inputs[0], c.inputs[2], c.grad);
            let floor = T::of(SQRT_FLOOR);
            let half = T::of(0.5);
            let gx = c.needs[0].then(|| {
                let data = (0..g.len())
                    .map(|i| {
                        let xi = xv.data()[i];
                        if xi > T::zero() && xi < T::one() {
                            g.data()[i] * ss.data()[i] * e2[i] * half / xi.max(floor).sqrt()
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                Tensor::from_vec(g.shape(), data).expect("shape")
            });
            let gr = c.needs[1].then(|| {
                Tensor::from_vec(g.shape(), g.data().iter().zip(&e1).map(|(&g, &e)| g * e).collect()).expect("shape")
            });
            let gs = c.needs[2].then(|| {
                let data = (0..g.len())
                    .map(|i| {
                        let cx = xv.data()[i].max(T::zero()).min(T::one());
                        g.data()[i] * e2[i] * cx.sqrt()
                    })
                    .collect();
                Tensor::from_vec(g.shape(), data).expect("shape")
            });
            vec![gx, gr, gs]
        }),
    ))
}
