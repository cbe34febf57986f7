use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::BlurKernel;
use crate::error::{invalid, Result};
use crate::graph::{Tape, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Offset inside the logarithm of [`kernel_entropy`].
pub const ENTROPY_EPS: f64 = 1e-12;

/// Heading perturbation (radians) between consecutive motion-trajectory steps.
const MOTION_HEADING_STD: f64 = 0.4;

pub fn identity_kernel<T: Scalar>(size: usize) -> Result<BlurKernel<T>> {
    if size == 0 || size.is_multiple_of(2) {
        return invalid(format!("kernel size must be odd and positive, got {size}"));
    }
    let mut data = vec![T::zero(); size * size];
    data[(size / 2) * size + size / 2] = T::one();
    BlurKernel::new(size, data)
}

/// Anti-aliased disk: each cell holds the exact area of its overlap with a
/// disk of the given radius centered on the middle cell.
pub fn disk_kernel<T: Scalar>(radius: f64, size: usize) -> Result<BlurKernel<T>> {
    if size == 0 || size.is_multiple_of(2) {
        return invalid(format!("kernel size must be odd and positive, got {size}"));
    }
    if !(radius > 0.0 && radius <= size as f64 / 2.0) {
        return invalid(format!("disk radius {radius} outside (0, {}]", size as f64 / 2.0));
    }
    let c = (size / 2) as f64;
    let mut data = Vec::with_capacity(size * size);
    for a in 0..size {
        for b in 0..size {
            let (y0, x0) = (a as f64 - c - 0.5, b as f64 - c - 0.5);
            data.push(T::of(disk_cell_area(radius, x0, x0 + 1.0, y0, y0 + 1.0)));
        }
    }
    BlurKernel::normalized(size, data)
}

/// Area of `{x² + y² ≤ r²} ∩ [x0, x1] × [y0, y1]`.
fn disk_cell_area(r: f64, x0: f64, x1: f64, y0: f64, y1: f64) -> f64 {
    let (lo, hi) = (x0.max(-r), x1.min(r));
    if lo >= hi {
        return 0.0;
    }
    let half_chord = |x: f64| (r * r - x * x).max(0.0).sqrt();
    // antiderivative of half_chord
    let prim = |x: f64| 0.5 * (x * half_chord(x) + r * r * (x / r).clamp(-1.0, 1.0).asin());
    let mut cuts = vec![lo, hi];
    for y in [y0.abs(), y1.abs()] {
        if y <= r {
            let x = (r * r - y * y).sqrt();
            for cut in [-x, x] {
                if cut > lo && cut < hi {
                    cuts.push(cut);
                }
            }
        }
    }
    cuts.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let mut area = 0.0;
    for w in cuts.windows(2) {
        let (a, b) = (w[0], w[1]);
        if b <= a {
            continue;
        }
        let mid = 0.5 * (a + b);
        let s = half_chord(mid);
        let top_is_chord = s < y1;
        let bottom_is_chord = -s > y0;
        let top = if top_is_chord { s } else { y1 };
        let bottom = if bottom_is_chord { -s } else { y0 };
        if top <= bottom {
            continue;
        }
        let top_int = if top_is_chord { prim(b) - prim(a) } else { y1 * (b - a) };
        let bottom_int = if bottom_is_chord { -(prim(b) - prim(a)) } else { y0 * (b - a) };
        area += top_int - bottom_int;
    }
    area
}

/// Motion blur from a seeded random walk.
///
/// The walk starts at the origin with a uniform random heading and takes unit
/// steps whose heading is perturbed by N(0, 0.4²) radians. Only the first
/// `⌈exposure · trajectory_len⌉` samples are kept; they are centered on their
/// mean, bilinearly splatted onto the grid and normalized.
pub fn motion_kernel<T: Scalar, R: Rng + ?Sized>(
    trajectory_len: usize,
    exposure: f64,
    size: usize,
    rng: &mut R,
) -> Result<BlurKernel<T>> {
    if trajectory_len == 0 {
        return invalid("trajectory length must be at least 1");
    }
    if !(exposure > 0.0 && exposure <= 1.0) {
        return invalid(format!("exposure {exposure} outside (0, 1]"));
    }
    if size == 0 || size.is_multiple_of(2) {
        return invalid(format!("kernel size must be odd and positive, got {size}"));
    }
    let heading_noise = Normal::new(0.0, MOTION_HEADING_STD).expect("valid std");
    let mut heading = rng.random_range(0.0..std::f64::consts::TAU);
    let mut points = Vec::with_capacity(trajectory_len);
    let (mut x, mut y) = (0.0f64, 0.0f64);
    points.push((x, y));
    for _ in 1..trajectory_len {
        heading += heading_noise.sample(rng);
        x += heading.cos();
        y += heading.sin();
        points.push((x, y));
    }
    let used = ((exposure * trajectory_len as f64).ceil() as usize).clamp(1, trajectory_len);
    let points = &points[..used];
    let (mx, my) = points.iter().fold((0.0, 0.0), |(sx, sy), &(px, py)| (sx + px, sy + py));
    let (mx, my) = (mx / used as f64, my / used as f64);

    let c = (size / 2) as f64;
    let max = (size - 1) as f64;
    let mut acc = vec![0.0f64; size * size];
    let w = 1.0 / used as f64;
    for &(px, py) in points {
        let col = (c + px - mx).clamp(0.0, max);
        let row = (c + py - my).clamp(0.0, max);
        let (r0, c0) = (row.floor(), col.floor());
        let (fr, fc) = (row - r0, col - c0);
        let (r0, c0) = (r0 as usize, c0 as usize);
        let (r1, c1) = ((r0 + 1).min(size - 1), (c0 + 1).min(size - 1));
        acc[r0 * size + c0] += w * (1.0 - fr) * (1.0 - fc);
        acc[r0 * size + c1] += w * (1.0 - fr) * fc;
        acc[r1 * size + c0] += w * fr * (1.0 - fc);
        acc[r1 * size + c1] += w * fr * fc;
    }
    BlurKernel::normalized(size, acc.into_iter().map(T::of).collect())
}

/// Shannon entropy `−Σ k ln(k + ε)`.
pub fn kernel_entropy<T: Scalar>(k: &BlurKernel<T>) -> T {
    let eps = T::of(ENTROPY_EPS);
    -k.data().iter().map(|&v| v * (v + eps).ln()).sum::<T>()
}

/// Per-item entropy of a `[B, K, K]` (or `[B, K·K]`) kernel batch → `[B]`.
pub fn kernel_entropy_tape<T: Scalar>(tape: &mut Tape<T>, k: Var) -> Var {
    let kv = tape.value(k);
    let eps = T::of(ENTROPY_EPS);
    let b = kv.batch();
    let data: Vec<T> = (0..b).map(|i| -kv.item(i).iter().map(|&v| v * (v + eps).ln()).sum::<T>()).collect();
    let value = Tensor::from_vec(&[b], data).expect("shape");
    tape.custom(
        &[k],
        value,
        Box::new(move |c| {
            let kv = c.inputs[0];
            let mut g = Tensor::zeros(kv.shape());
            for i in 0..b {
                let gi = c.grad.data()[i];
                for (dst, &v) in g.item_mut(i).iter_mut().zip(kv.item(i)) {
                    *dst = -gi * ((v + eps).ln() + v / (v + eps));
                }
            }
            vec![Some(g)]
        }),
    )
}
