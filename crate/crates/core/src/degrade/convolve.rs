use super::{BlurKernel, Image};
use crate::error::{invalid, Result};
use crate::graph::{Tape, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Mirror index without repeating the edge sample (`dcb|abcd|cba`).
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    (if m < n as isize { m } else { period - m }) as usize
}

/// Source index tables: `table[i * k + a]` is the input row read by output
/// row `i` at kernel row `a`.
fn taps(n: usize, k: usize) -> Vec<usize> {
    let p = (k / 2) as isize;
    let mut out = Vec::with_capacity(n * k);
    for i in 0..n as isize {
        for a in 0..k as isize {
            out.push(reflect(i + a - p, n));
        }
    }
    out
}

fn check_size(k: usize, h: usize, w: usize) -> Result<()> {
    if k > 2 * h.min(w) {
        return invalid(format!("kernel of size {k} is larger than twice the image side {}", h.min(w)));
    }
    Ok(())
}

struct Plan {
    h: usize,
    w: usize,
    k: usize,
    rows: Vec<usize>,
    cols: Vec<usize>,
}

impl Plan {
    fn new(h: usize, w: usize, k: usize) -> Self {
        Self { h, w, k, rows: taps(h, k), cols: taps(w, k) }
    }

    fn forward<T: Scalar>(&self, x: &[T], kernel: &[T], out: &mut [T]) {
        let (w, k) = (self.w, self.k);
        for i in 0..self.h {
            for j in 0..w {
                let mut acc = T::zero();
                for a in 0..k {
                    let src = &x[self.rows[i * k + a] * w..][..w];
                    let kr = &kernel[a * k..(a + 1) * k];
                    for (b, &kv) in kr.iter().enumerate() {
                        acc += kv * src[self.cols[j * k + b]];
                    }
                }
                out[i * w + j] = acc;
            }
        }
    }

    fn backward_x<T: Scalar>(&self, g: &[T], kernel: &[T], gx: &mut [T]) {
        let (w, k) = (self.w, self.k);
        for i in 0..self.h {
            for j in 0..w {
                let gv = g[i * w + j];
                for a in 0..k {
                    let row = self.rows[i * k + a] * w;
                    for b in 0..k {
                        gx[row + self.cols[j * k + b]] += gv * kernel[a * k + b];
                    }
                }
            }
        }
    }

    fn backward_k<T: Scalar>(&self, g: &[T], x: &[T], gk: &mut [T]) {
        let (w, k) = (self.w, self.k);
        for i in 0..self.h {
            for j in 0..w {
                let gv = g[i * w + j];
                for a in 0..k {
                    let src = &x[self.rows[i * k + a] * w..][..w];
                    for b in 0..k {
                        gk[a * k + b] += gv * src[self.cols[j * k + b]];
                    }
                }
            }
        }
    }
}

/// Per-channel correlation with reflect padding; output has the input shape.
pub fn convolve<T: Scalar>(x: &Image<T>, k: &BlurKernel<T>) -> Result<Image<T>> {
    let (h, w) = (x.height(), x.width());
    check_size(k.size(), h, w)?;
    let plan = Plan::new(h, w, k.size());
    let mut out = vec![T::zero(); x.data().len()];
    for (src, dst) in x.data().chunks(h * w).zip(out.chunks_mut(h * w)) {
        plan.forward(src, k.data(), dst);
    }
    Image::new(x.channels(), h, w, out)
}

/// Batched [`convolve`]: `x: [B, C, H, W]` with one kernel per item,
/// `k: [B, K, K]` (or `[B, K·K]`).
pub fn convolve_tape<T: Scalar>(tape: &mut Tape<T>, x: Var, k: Var) -> Result<Var> {
    let (xv, kv) = (tape.value(x), tape.value(k));
    let [bsz, ch, h, w] = *xv.shape() else {
        return invalid(format!("convolve expects [B,C,H,W], got {:?}", xv.shape()));
    };
    let kk = kv.item_len();
    let ks = (kk as f64).sqrt().round() as usize;
    if kv.batch() != bsz || ks * ks != kk || ks.is_multiple_of(2) {
        return invalid(format!("kernel batch {:?} does not match image batch {bsz}", kv.shape()));
    }
    check_size(ks, h, w)?;
    let plan = Plan::new(h, w, ks);
    let hw = h * w;
    let mut out = Tensor::zeros(xv.shape());
    for b in 0..bsz {
        let kern = kv.item(b);
        let (src, dst) = (xv.item(b), out.item_mut(b));
        for c in 0..ch {
            plan.forward(&src[c * hw..(c + 1) * hw], kern, &mut dst[c * hw..(c + 1) * hw]);
        }
    }
    Ok(tape.custom(
        &[x, k],
        out,
        Box::new(move |c| {
            let (xv, kv, g) = (c.inputs[0], c.inputs[1], c.grad);
            let gx = c.needs[0].then(|| {
                let mut gx = Tensor::zeros(xv.shape());
                for b in 0..bsz {
                    let kern = kv.item(b);
                    let gb = g.item(b);
                    let dst = gx.item_mut(b);
                    for ci in 0..ch {
                        plan.backward_x(&gb[ci * hw..(ci + 1) * hw], kern, &mut dst[ci * hw..(ci + 1) * hw]);
                    }
                }
                gx
            });
            let gk = c.needs[1].then(|| {
                let mut gk = Tensor::zeros(kv.shape());
                for b in 0..bsz {
                    let (gb, xb) = (g.item(b), xv.item(b));
                    let dst = gk.item_mut(b);
                    for ci in 0..ch {
                        plan.backward_k(&gb[ci * hw..(ci + 1) * hw], &xb[ci * hw..(ci + 1) * hw], dst);
                    }
                }
                gk
            });
            vec![gx, gk]
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::degrade::{disk_kernel, identity_kernel};
    use crate::gradcheck;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Image<f64> {
        Image::from_fn(c, h, w, |_, _, _| rng.random::<f64>()).unwrap()
    }

    /// Explicitly padded copy followed by a textbook nested loop.
    fn nested_loop_oracle(x: &[f64], h: usize, w: usize, k: &[f64], ks: usize) -> Vec<f64> {
        let p = ks / 2;
        let (ph, pw) = (h + 2 * p, w + 2 * p);
        let mut padded = vec![0.0; ph * pw];
        for i in 0..ph {
            for j in 0..pw {
                let si = i as isize - p as isize;
                let sj = j as isize - p as isize;
                let si = if si < 0 {
                    -si
                } else if si >= h as isize {
                    2 * (h as isize - 1) - si
                } else {
                    si
                };
                let sj = if sj < 0 {
                    -sj
                } else if sj >= w as isize {
                    2 * (w as isize - 1) - sj
                } else {
                    sj
                };
                padded[i * pw + j] = x[si as usize * w + sj as usize];
            }
        }
        let mut out = vec![0.0; h * w];
        for i in 0..h {
            for j in 0..w {
                for a in 0..ks {
                    for b in 0..ks {
                        out[i * w + j] += k[a * ks + b] * padded[(i + a) * pw + j + b];
                    }
                }
            }
        }
        out
    }

    #[test]
    fn reflect_indices() {
        let got: Vec<usize> = (-3..8).map(|i| reflect(i, 5)).collect();
        assert_eq!(got, vec![3, 2, 1, 0, 1, 2, 3, 4, 3, 2, 1]);
        assert_eq!(reflect(-4, 1), 0);
    }

    #[test]
    fn ramp_with_uniform_kernel_matches_oracle() {
        let x = Image::from_fn(1, 5, 5, |_, i, j| (i * 5 + j) as f64).unwrap();
        let k = BlurKernel::new(3, vec![1.0 / 9.0; 9]).unwrap();
        let y = convolve(&x, &k).unwrap();
        let oracle = nested_loop_oracle(x.data(), 5, 5, k.data(), 3);
        for (a, b) in y.data().iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-12);
        }
        // corner: rows {1,0,1} × cols {1,0,1} of the ramp
        let corner = [6.0, 5.0, 6.0, 1.0, 0.0, 1.0, 6.0, 5.0, 6.0].iter().sum::<f64>() / 9.0;
        assert!((y.get(0, 0, 0) - corner).abs() < 1e-12);
        // interior of a linear ramp is unchanged by a symmetric kernel
        assert!((y.get(0, 2, 2) - 12.0).abs() < 1e-12);
    }

    #[test]
    fn asymmetric_kernel_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random_image(&mut rng, 3, 6, 7);
        let raw: Vec<f64> = (0..25).map(|_| rng.random()).collect();
        let k = BlurKernel::normalized(5, raw).unwrap();
        let y = convolve(&x, &k).unwrap();
        for c in 0..3 {
            let oracle = nested_loop_oracle(x.plane(c), 6, 7, k.data(), 5);
            for (a, b) in y.plane(c).iter().zip(&oracle) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn identity_and_constant_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_image(&mut rng, 3, 8, 8);
        assert_eq!(convolve(&x, &identity_kernel(9).unwrap()).unwrap(), x);
        let c = Image::filled(3, 8, 8, 0.3f64).unwrap();
        let y = convolve(&c, &disk_kernel(2.0, 9).unwrap()).unwrap();
        assert!(y.data().iter().all(|v| (v - 0.3).abs() < 1e-12));
    }

    #[test]
    fn oversized_kernel_is_rejected() {
        let x = Image::filled(1, 4, 4, 0.5f64).unwrap();
        assert!(convolve(&x, &identity_kernel(9).unwrap()).is_err());
        assert!(convolve(&x, &identity_kernel(7).unwrap()).is_ok());
    }

    #[test]
    fn tape_matches_plain_and_gradchecks() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_image(&mut rng, 3, 8, 8);
        let k = BlurKernel::normalized(5, (0..25).map(|_| rng.random()).collect()).unwrap();
        let plain = convolve(&x, &k).unwrap();

        let xt = Image::batch(std::slice::from_ref(&x)).unwrap();
        let kt = Tensor::from_vec(&[1, 5, 5], k.data().to_vec()).unwrap();
        let mut tape = Tape::new();
        let (xv, kv) = (tape.constant(xt.clone()), tape.constant(kt.clone()));
        let y = convolve_tape(&mut tape, xv, kv).unwrap();
        assert_eq!(tape.value(y).data(), plain.data());

        let wts = Tensor::from_vec(&[1, 3, 8, 8], (0..192).map(|_| rng.random::<f64>() - 0.5).collect()).unwrap();
        let loss = |t: &mut Tape<f64>, y: Var| {
            let w = t.constant(wts.clone());
            let p = t.mul(y, w);
            t.sum(p)
        };
        let rx = gradcheck::check(&xt, 1e-6, |t, v| {
            let kv = t.constant(kt.clone());
            let y = convolve_tape(t, v, kv).unwrap();
            loss(t, y)
        });
        assert!(rx.relative_error() < 1e-7, "{}", rx.relative_error());
        let rk = gradcheck::check(&kt, 1e-6, |t, v| {
            let xv = t.constant(xt.clone());
            let y = convolve_tape(t, xv, v).unwrap();
            loss(t, y)
        });
        assert!(rk.relative_error() < 1e-7, "{}", rk.relative_error());
    }
}
