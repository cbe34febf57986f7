//! Lossy JPEG round trip: colour conversion, 4:2:0 chroma subsampling, 8×8
//! DCT, quality-scaled quantization and the inverse path. No bitstream is
//! produced.
//!
//! [`diff_jpeg`] is the trainable version. [`reference_jpeg`] is a separate
//! straightforward implementation with integer tables and true rounding used to
//! build degraded corpora and to validate the trainable one.

use std::f64::consts::PI;

use super::{Image, QualityFactor};
use crate::error::{invalid, Result};
use crate::graph::{Tape, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Standard luminance quantization table (quality 50), row-major.
pub const LUMA_TABLE: [u16; 64] = [
    16, 11, 10, 16, 24, 40, 51, 61, //
    12, 12, 14, 19, 26, 58, 60, 55, //
    14, 13, 16, 24, 40, 57, 69, 56, //
    14, 17, 22, 29, 51, 87, 80, 62, //
    18, 22, 37, 56, 68, 109, 103, 77, //
    24, 35, 55, 64, 81, 104, 113, 92, //
    49, 64, 78, 87, 103, 121, 120, 101, //
    72, 92, 95, 98, 112, 100, 103, 99,
];

/// Standard chrominance quantization table (quality 50), row-major.
pub const CHROMA_TABLE: [u16; 64] = [
    17, 18, 24, 47, 99, 99, 99, 99, //
    18, 21, 26, 66, 99, 99, 99, 99, //
    24, 26, 56, 99, 99, 99, 99, 99, //
    47, 66, 99, 99, 99, 99, 99, 99, //
    99, 99, 99, 99, 99, 99, 99, 99, //
    99, 99, 99, 99, 99, 99, 99, 99, //
    99, 99, 99, 99, 99, 99, 99, 99, //
    99, 99, 99, 99, 99, 99, 99, 99,
];

/// How quantized coefficients are rounded.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum JpegRounding {
    /// `round(v) + (v − round(v))³` with continuous quality scaling; usable
    /// for gradients.
    Smooth,
    /// True rounding, integer quality and integer tables. Matches
    /// [`reference_jpeg`].
    Hard,
}

/// Luma plane internals of one encoded image (padded size, row-major).
#[derive(Clone, Debug, PartialEq)]
pub struct LumaPlanes {
    pub height: usize,
    pub width: usize,
    /// Dequantized DCT coefficients laid out block by block in place.
    pub dequantized: Vec<f64>,
    /// Decoded luma on the 0–255 scale before colour conversion and clamping.
    pub decoded: Vec<f64>,
}

const Y_FROM_RGB: [f64; 3] = [0.299, 0.587, 0.114];
const CB_FROM_RGB: [f64; 3] = [-0.168736, -0.331264, 0.5];
const CR_FROM_RGB: [f64; 3] = [0.5, -0.418688, -0.081312];
const R_FROM_CR: f64 = 1.402;
const G_FROM_CB: f64 = -0.344136;
const G_FROM_CR: f64 = -0.714136;
const B_FROM_CB: f64 = 1.772;

fn scale_factor(q: f64) -> f64 {
    if q < 50.0 {
        5000.0 / q
    } else {
        200.0 - 2.0 * q
    }
}

/// Luma and chroma quantization tables at quality `q`, with their derivative
/// with respect to `q` (zero in hard mode and where the table is clamped).
fn tables_with_grad<T: Scalar>(q: T, rounding: JpegRounding) -> ([[T; 64]; 2], [[T; 64]; 2]) {
    let mut tables = [[T::zero(); 64]; 2];
    let mut grads = [[T::zero(); 64]; 2];
    let (lo, hi) = (T::one(), T::of(255.0));
    match rounding {
        JpegRounding::Hard => {
            let qi = q.real().clamp(1.0, 100.0).round();
            let s = scale_factor(qi).floor();
            for (t, base) in [LUMA_TABLE, CHROMA_TABLE].iter().enumerate() {
                for i in 0..64 {
                    let v = ((base[i] as f64 * s + 50.0) / 100.0).floor().clamp(1.0, 255.0);
                    tables[t][i] = T::of(v);
                }
            }
        }
        JpegRounding::Smooth => {
            let inside = q > T::one() && q < T::of(100.0);
            let qc = q.max(T::one()).min(T::of(100.0));
            let fifty = T::of(50.0);
            let (s, ds) = if qc < fifty {
                (T::of(5000.0) / qc, T::of(-5000.0) / (qc * qc))
            } else {
                (T::of(200.0) - T::of(2.0) * qc, T::of(-2.0))
            };
            let hundred = T::of(100.0);
            for (t, base) in [LUMA_TABLE, CHROMA_TABLE].iter().enumerate() {
                for i in 0..64 {
                    let b = T::of(base[i] as f64);
                    let raw = (b * s + fifty) / hundred;
                    tables[t][i] = raw.max(lo).min(hi);
                    if inside && raw > lo && raw < hi {
                        grads[t][i] = b * ds / hundred;
                    }
                }
            }
        }
    }
    (tables, grads)
}

/// Luma and chroma quantization tables at quality `q`.
pub fn quant_tables<T: Scalar>(q: QualityFactor, rounding: JpegRounding) -> [[T; 64]; 2] {
    tables_with_grad(T::of(q.value()), rounding).0
}

fn dct_matrix<T: Scalar>() -> [T; 64] {
    let mut a = [T::zero(); 64];
    for u in 0..8 {
        let cu = if u == 0 { (0.5f64).sqrt() } else { 1.0 };
        for x in 0..8 {
            a[u * 8 + x] = T::of(cu / 2.0 * (((2 * x + 1) * u) as f64 * PI / 16.0).cos());
        }
    }
    a
}

fn transpose<T: Copy>(m: &[T; 64]) -> [T; 64] {
    let mut t = *m;
    for i in 0..8 {
        for j in 0..8 {
            t[i * 8 + j] = m[j * 8 + i];
        }
    }
    t
}

/// Replaces every 8×8 block `B` of a plane by `L · B · R`.
fn blockwise<T: Scalar>(plane: &mut [T], w: usize, left: &[T; 64], right: &[T; 64]) {
    let h = plane.len() / w;
    let mut blk = [T::zero(); 64];
    let mut tmp = [T::zero(); 64];
    for bi in (0..h).step_by(8) {
        for bj in (0..w).step_by(8) {
            for i in 0..8 {
                blk[i * 8..i * 8 + 8].copy_from_slice(&plane[(bi + i) * w + bj..][..8]);
            }
            T::gemm(8, 8, 8, left, 8, 1, &blk, 8, 1, &mut tmp, 8, 1, false);
            T::gemm(8, 8, 8, &tmp, 8, 1, right, 8, 1, &mut blk, 8, 1, false);
            for i in 0..8 {
                plane[(bi + i) * w + bj..][..8].copy_from_slice(&blk[i * 8..i * 8 + 8]);
            }
        }
    }
}

fn reflect(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i % period;
    if m < n {
        m
    } else {
        period - m
    }
}

fn round_with_slope<T: Scalar>(v: T, rounding: JpegRounding) -> (T, T) {
    let r = v.round();
    match rounding {
        JpegRounding::Hard => (r, T::zero()),
        JpegRounding::Smooth => {
            let d = v - r;
            (r + d * d * d, T::of(3.0) * d * d)
        }
    }
}

struct Codec<T> {
    channels: usize,
    h: usize,
    w: usize,
    hp: usize,
    wp: usize,
    rounding: JpegRounding,
    dct: [T; 64],
    dct_t: [T; 64],
}

/// Forward intermediates needed by the backward pass.
struct Cache<T> {
    /// Padded RGB (or gray) output on the 0–1 scale, before clamping.
    pre_clamp: Vec<T>,
    /// Coefficients divided by the quantization step, per plane.
    scaled: Vec<Vec<T>>,
    /// Derivatives of the quantization tables with respect to q.
    table_grads: [[T; 64]; 2],
    luma: Option<(Vec<T>, Vec<T>)>,
}

impl<T: Scalar> Codec<T> {
    fn new(channels: usize, h: usize, w: usize, rounding: JpegRounding) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return invalid(format!("jpeg expects 1 or 3 channels, got {channels}"));
        }
        let m = if channels == 3 { 16 } else { 8 };
        let dct = dct_matrix();
        Ok(Self { channels, h, w, hp: h.div_ceil(m) * m, wp: w.div_ceil(m) * m, rounding, dct, dct_t: transpose(&dct) })
    }

    /// Plane sizes in order Y, Cb, Cr (or just Y).
    fn plane_dims(&self, p: usize) -> (usize, usize) {
        if p == 0 {
            (self.hp, self.wp)
        } else {
            (self.hp / 2, self.wp / 2)
        }
    }

    fn forward(&self, x: &[T], q: T, keep_luma: bool) -> (Vec<T>, Cache<T>) {
        let (h, w, hp, wp) = (self.h, self.w, self.hp, self.wp);
        let n = hp * wp;
        let k255 = T::of(255.0);
        let k128 = T::of(128.0);
        // reflect-pad and scale to 0–255
        let mut rgb = vec![T::zero(); self.channels * n];
        for c in 0..self.channels {
            for i in 0..hp {
                for j in 0..wp {
                    rgb[c * n + i * wp + j] = x[(c * h + reflect(i, h)) * w + reflect(j, w)] * k255;
                }
            }
        }
        // colour transform and subsampling
        let mut planes: Vec<Vec<T>> = if self.channels == 1 {
            vec![rgb]
        } else {
            let coef = |m: [f64; 3]| [T::of(m[0]), T::of(m[1]), T::of(m[2])];
            let (my, mb, mr) = (coef(Y_FROM_RGB), coef(CB_FROM_RGB), coef(CR_FROM_RGB));
            let mut y = vec![T::zero(); n];
            let mut cb = vec![T::zero(); n];
            let mut cr = vec![T::zero(); n];
            for i in 0..n {
                let (r, g, b) = (rgb[i], rgb[n + i], rgb[2 * n + i]);
                y[i] = my[0] * r + my[1] * g + my[2] * b;
                cb[i] = mb[0] * r + mb[1] * g + mb[2] * b + k128;
                cr[i] = mr[0] * r + mr[1] * g + mr[2] * b + k128;
            }
            vec![y, pool2(&cb, hp, wp), pool2(&cr, hp, wp)]
        };
        let (tables, table_grads) = tables_with_grad(q, self.rounding);
        let mut scaled = Vec::with_capacity(planes.len());
        let mut luma = None;
        for (p, plane) in planes.iter_mut().enumerate() {
            let (_, pw) = self.plane_dims(p);
            plane.iter_mut().for_each(|v| *v -= k128);
            blockwise(plane, pw, &self.dct, &self.dct_t);
            let table = &tables[(p > 0) as usize];
            let mut s = vec![T::zero(); plane.len()];
            for (idx, v) in plane.iter_mut().enumerate() {
                let qstep = table[(idx / pw % 8) * 8 + idx % pw % 8];
                s[idx] = *v / qstep;
                *v = round_with_slope(s[idx], self.rounding).0 * qstep;
            }
            let deq = (keep_luma && p == 0).then(|| plane.clone());
            blockwise(plane, pw, &self.dct_t, &self.dct);
            plane.iter_mut().for_each(|v| *v += k128);
            if let Some(deq) = deq {
                luma = Some((deq, plane.clone()));
            }
            scaled.push(s);
        }
        // upsample chroma and convert back
        let inv255 = T::one() / k255;
        let pre_clamp = if self.channels == 1 {
            planes[0].iter().map(|&v| v * inv255).collect()
        } else {
            let cb = upsample2(&planes[1], hp / 2, wp / 2);
            let cr = upsample2(&planes[2], hp / 2, wp / 2);
            let y = &planes[0];
            let mut out = vec![T::zero(); 3 * n];
            let (rc, gb, gr, bb) = (T::of(R_FROM_CR), T::of(G_FROM_CB), T::of(G_FROM_CR), T::of(B_FROM_CB));
            for i in 0..n {
                let (cbv, crv) = (cb[i] - k128, cr[i] - k128);
                out[i] = (y[i] + rc * crv) * inv255;
                out[n + i] = (y[i] + gb * cbv + gr * crv) * inv255;
                out[2 * n + i] = (y[i] + bb * cbv) * inv255;
            }
            out
        };
        let mut out = Vec::with_capacity(self.channels * h * w);
        for c in 0..self.channels {
            for i in 0..h {
                for j in 0..w {
                    out.push(pre_clamp[c * n + i * wp + j].max(T::zero()).min(T::one()));
                }
            }
        }
        (out, Cache { pre_clamp, scaled, table_grads, luma })
    }

    /// Returns the input gradient and the gradient with respect to `q`.
    fn backward(&self, cache: &Cache<T>, g_out: &[T]) -> (Vec<T>, T) {
        let (h, w, hp, wp) = (self.h, self.w, self.hp, self.wp);
        let n = hp * wp;
        let inv255 = T::one() / T::of(255.0);
        let mut g_rgb = vec![T::zero(); self.channels * n];
        for c in 0..self.channels {
            for i in 0..h {
                for j in 0..w {
                    let idx = c * n + i * wp + j;
                    let v = cache.pre_clamp[idx];
                    if v >= T::zero() && v <= T::one() {
                        g_rgb[idx] = g_out[(c * h + i) * w + j] * inv255;
                    }
                }
            }
        }
        let mut g_planes: Vec<Vec<T>> = if self.channels == 1 {
            vec![g_rgb]
        } else {
            let (rc, gb, gr, bb) = (T::of(R_FROM_CR), T::of(G_FROM_CB), T::of(G_FROM_CR), T::of(B_FROM_CB));
            let mut gy = vec![T::zero(); n];
            let mut gcb = vec![T::zero(); n];
            let mut gcr = vec![T::zero(); n];
            for i in 0..n {
                let (r, g, b) = (g_rgb[i], g_rgb[n + i], g_rgb[2 * n + i]);
                gy[i] = r + g + b;
                gcb[i] = gb * g + bb * b;
                gcr[i] = rc * r + gr * g;
            }
            vec![gy, upsample2_adjoint(&gcb, hp / 2, wp / 2), upsample2_adjoint(&gcr, hp / 2, wp / 2)]
        };
        let mut g_q = T::zero();
        for (p, gp) in g_planes.iter_mut().enumerate() {
            let (_, pw) = self.plane_dims(p);
            // adjoint of the inverse DCT is the forward DCT
            blockwise(gp, pw, &self.dct, &self.dct_t);
            let t = (p > 0) as usize;
            let dtable = &cache.table_grads[t];
            for (idx, g) in gp.iter_mut().enumerate() {
                let k = (idx / pw % 8) * 8 + idx % pw % 8;
                let u = cache.scaled[p][idx];
                let (r, slope) = round_with_slope(u, self.rounding);
                g_q += *g * (r - slope * u) * dtable[k];
                *g *= slope;
            }
            blockwise(gp, pw, &self.dct_t, &self.dct);
        }
        let mut g_pad = if self.channels == 1 {
            g_planes.swap_remove(0)
        } else {
            let gy = &g_planes[0];
            let gcb = pool2_adjoint(&g_planes[1], hp / 2, wp / 2);
            let gcr = pool2_adjoint(&g_planes[2], hp / 2, wp / 2);
            let c = |m: [f64; 3]| [T::of(m[0]), T::of(m[1]), T::of(m[2])];
            let (my, mb, mr) = (c(Y_FROM_RGB), c(CB_FROM_RGB), c(CR_FROM_RGB));
            let mut out = vec![T::zero(); 3 * n];
            for i in 0..n {
                for ch in 0..3 {
                    out[ch * n + i] = my[ch] * gy[i] + mb[ch] * gcb[i] + mr[ch] * gcr[i];
                }
            }
            out
        };
        let k255 = T::of(255.0);
        g_pad.iter_mut().for_each(|v| *v *= k255);
        let mut gx = vec![T::zero(); self.channels * h * w];
        for c in 0..self.channels {
            for i in 0..hp {
                for j in 0..wp {
                    gx[(c * h + reflect(i, h)) * w + reflect(j, w)] += g_pad[c * n + i * wp + j];
                }
            }
        }
        (gx, g_q)
    }
}

fn pool2<T: Scalar>(p: &[T], h: usize, w: usize) -> Vec<T> {
    let quarter = T::of(0.25);
    let (ho, wo) = (h / 2, w / 2);
    let mut out = vec![T::zero(); ho * wo];
    for i in 0..ho {
        for j in 0..wo {
            let s = p[2 * i * w + 2 * j]
                + p[2 * i * w + 2 * j + 1]
                + p[(2 * i + 1) * w + 2 * j]
                + p[(2 * i + 1) * w + 2 * j + 1];
            out[i * wo + j] = s * quarter;
        }
    }
    out
}

fn pool2_adjoint<T: Scalar>(g: &[T], ho: usize, wo: usize) -> Vec<T> {
    let quarter = T::of(0.25);
    let w = 2 * wo;
    let mut out = vec![T::zero(); 4 * ho * wo];
    for i in 0..2 * ho {
        for j in 0..w {
            out[i * w + j] = g[(i / 2) * wo + j / 2] * quarter;
        }
    }
    out
}

fn upsample2<T: Scalar>(p: &[T], h: usize, w: usize) -> Vec<T> {
    let mut out = vec![T::zero(); 4 * h * w];
    for i in 0..2 * h {
        for j in 0..2 * w {
            out[i * 2 * w + j] = p[(i / 2) * w + j / 2];
        }
    }
    out
}

fn upsample2_adjoint<T: Scalar>(g: &[T], h: usize, w: usize) -> Vec<T> {
    let mut out = vec![T::zero(); h * w];
    for i in 0..2 * h {
        for j in 0..2 * w {
            out[(i / 2) * w + j / 2] += g[i * 2 * w + j];
        }
    }
    out
}

/// Trainable JPEG round trip of one image; output clamped to `[0, 1]`.
/// Sizes that are not multiples of the MCU (16, or 8 for grayscale) are
/// reflect-padded and cropped back.
pub fn diff_jpeg<T: Scalar>(x: &Image<T>, q: QualityFactor, rounding: JpegRounding) -> Result<Image<T>> {
    let codec = Codec::new(x.channels(), x.height(), x.width(), rounding)?;
    let (out, _) = codec.forward(x.data(), T::of(q.value()), false);
    Image::new(x.channels(), x.height(), x.width(), out)
}

/// Luma internals of [`diff_jpeg`].
pub fn diff_jpeg_luma_planes(x: &Image<f64>, q: QualityFactor, rounding: JpegRounding) -> Result<LumaPlanes> {
    let codec = Codec::<f64>::new(x.channels(), x.height(), x.width(), rounding)?;
    let (_, cache) = codec.forward(x.data(), q.value(), true);
    let (dequantized, decoded) = cache.luma.expect("luma requested");
    Ok(LumaPlanes { height: codec.hp, width: codec.wp, dequantized, decoded })
}

/// Batched [`diff_jpeg`]: `x: [B, C, H, W]`, one quality per item in `q: [B]`.
/// Differentiable with respect to both.
pub fn diff_jpeg_tape<T: Scalar>(tape: &mut Tape<T>, x: Var, q: Var, rounding: JpegRounding) -> Result<Var> {
    let (xv, qv) = (tape.value(x), tape.value(q));
    let [bsz, c, h, w] = *xv.shape() else {
        return invalid(format!("jpeg expects [B,C,H,W], got {:?}", xv.shape()));
    };
    if qv.len() != bsz {
        return invalid(format!("need one quality per item, got {} for {bsz}", qv.len()));
    }
    if let Some(bad) = qv.data().iter().find(|v| !(0.0..=100.0).contains(&v.real())) {
        return invalid(format!("quality factor must lie in [0, 100], got {}", bad.real()));
    }
    let codec = Codec::new(c, h, w, rounding)?;
    let mut out = Tensor::zeros(xv.shape());
    let mut caches = Vec::with_capacity(bsz);
    for b in 0..bsz {
        let (o, cache) = codec.forward(xv.item(b), qv.data()[b], false);
        out.item_mut(b).copy_from_slice(&o);
        caches.push(cache);
    }
    Ok(tape.custom(
        &[x, q],
        out,
        Box::new(move |ctx| {
            let mut gx = Tensor::zeros(ctx.inputs[0].shape());
            let mut gq = Tensor::zeros(ctx.inputs[1].shape());
            for (b, cache) in caches.iter().enumerate() {
                let (g, dq) = codec.backward(cache, ctx.grad.item(b));
                gx.item_mut(b).copy_from_slice(&g);
                gq.data_mut()[b] = dq;
            }
            vec![ctx.needs[0].then_some(gx), ctx.needs[1].then_some(gq)]
        }),
    ))
}

// ---- reference codec -----------------------------------------------------

fn reference_tables(q: QualityFactor) -> [[i32; 64]; 2] {
    let quality = (q.value().round() as i32).clamp(1, 100);
    let scale = if quality < 50 { 5000 / quality } else { 200 - 2 * quality };
    let mut out = [[0i32; 64]; 2];
    for (t, base) in [LUMA_TABLE, CHROMA_TABLE].iter().enumerate() {
        for i in 0..64 {
            out[t][i] = ((base[i] as i32 * scale + 50) / 100).clamp(1, 255);
        }
    }
    out
}

fn c(u: usize) -> f64 {
    if u == 0 {
        std::f64::consts::FRAC_1_SQRT_2
    } else {
        1.0
    }
}

fn reference_fdct(block: &[f64; 64]) -> [f64; 64] {
    let mut out = [0.0; 64];
    for u in 0..8 {
        for v in 0..8 {
            let mut s = 0.0;
            for x in 0..8 {
                for y in 0..8 {
                    s += block[x * 8 + y]
                        * (((2 * x + 1) * u) as f64 * PI / 16.0).cos()
                        * (((2 * y + 1) * v) as f64 * PI / 16.0).cos();
                }
            }
            out[u * 8 + v] = 0.25 * c(u) * c(v) * s;
        }
    }
    out
}

fn reference_idct(coef: &[f64; 64]) -> [f64; 64] {
    let mut out = [0.0; 64];
    for x in 0..8 {
        for y in 0..8 {
            let mut s = 0.0;
            for u in 0..8 {
                for v in 0..8 {
                    s += c(u)
                        * c(v)
                        * coef[u * 8 + v]
                        * (((2 * x + 1) * u) as f64 * PI / 16.0).cos()
                        * (((2 * y + 1) * v) as f64 * PI / 16.0).cos();
                }
            }
            out[x * 8 + y] = 0.25 * s;
        }
    }
    out
}

/// Quantizes and reconstructs one level-shifted plane in place; returns the
/// dequantized coefficients.
fn reference_plane(plane: &mut [f64], w: usize, table: &[i32; 64]) -> Vec<f64> {
    let h = plane.len() / w;
    let mut deq_plane = vec![0.0; plane.len()];
    for bi in (0..h).step_by(8) {
        for bj in (0..w).step_by(8) {
            let mut blk = [0.0; 64];
            for x in 0..8 {
                for y in 0..8 {
                    blk[x * 8 + y] = plane[(bi + x) * w + bj + y] - 128.0;
                }
            }
            let coef = reference_fdct(&blk);
            let mut deq = [0.0; 64];
            for k in 0..64 {
                let level = (coef[k] / table[k] as f64).round() as i64;
                deq[k] = (level * table[k] as i64) as f64;
            }
            let rec = reference_idct(&deq);
            for x in 0..8 {
                for y in 0..8 {
                    plane[(bi + x) * w + bj + y] = rec[x * 8 + y] + 128.0;
                    deq_plane[(bi + x) * w + bj + y] = deq[x * 8 + y];
                }
            }
        }
    }
    deq_plane
}

fn reference_impl(x: &Image<f64>, q: QualityFactor) -> (Image<f64>, LumaPlanes) {
    let (ch, h, w) = (x.channels(), x.height(), x.width());
    let mcu = if ch == 3 { 16 } else { 8 };
    let (hp, wp) = (h.div_ceil(mcu) * mcu, w.div_ceil(mcu) * mcu);
    let tables = reference_tables(q);
    let px = |c: usize, i: usize, j: usize| 255.0 * x.get(c, reflect(i, h), reflect(j, w));
    let mut planes: Vec<Vec<f64>> = Vec::new();
    if ch == 1 {
        planes.push((0..hp * wp).map(|k| px(0, k / wp, k % wp)).collect());
    } else {
        let conv = |m: [f64; 3], off: f64, i: usize, j: usize| {
            m[0] * px(0, i, j) + m[1] * px(1, i, j) + m[2] * px(2, i, j) + off
        };
        planes.push((0..hp * wp).map(|k| conv(Y_FROM_RGB, 0.0, k / wp, k % wp)).collect());
        for m in [CB_FROM_RGB, CR_FROM_RGB] {
            let (hc, wc) = (hp / 2, wp / 2);
            let mut sub = vec![0.0; hc * wc];
            for i in 0..hc {
                for j in 0..wc {
                    let mut s = 0.0;
                    for (di, dj) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        s += conv(m, 128.0, 2 * i + di, 2 * j + dj);
                    }
                    sub[i * wc + j] = s / 4.0;
                }
            }
            planes.push(sub);
        }
    }
    let luma_deq = reference_plane(&mut planes[0], wp, &tables[0]);
    for p in planes.iter_mut().skip(1) {
        reference_plane(p, wp / 2, &tables[1]);
    }
    let luma = LumaPlanes { height: hp, width: wp, dequantized: luma_deq, decoded: planes[0].clone() };
    let out = Image::from_fn(ch, h, w, |c, i, j| {
        let y = planes[0][i * wp + j];
        let v = if ch == 1 {
            y
        } else {
            let k = (i / 2) * (wp / 2) + j / 2;
            let (cb, cr) = (planes[1][k] - 128.0, planes[2][k] - 128.0);
            match c {
                0 => y + R_FROM_CR * cr,
                1 => y + G_FROM_CB * cb + G_FROM_CR * cr,
                _ => y + B_FROM_CB * cb,
            }
        };
        (v / 255.0).clamp(0.0, 1.0)
    })
    .expect("valid shape");
    (out, luma)
}

/// Reference JPEG round trip with true rounding and integer tables. The
/// quality is rounded to the nearest integer in `[1, 100]`.
pub fn reference_jpeg(x: &Image<f64>, q: QualityFactor) -> Image<f64> {
    reference_impl(x, q).0
}

/// Luma internals of [`reference_jpeg`].
pub fn reference_jpeg_luma_planes(x: &Image<f64>, q: QualityFactor) -> LumaPlanes {
    reference_impl(x, q).1
}
