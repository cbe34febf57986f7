//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every operation as a node holding its value and a
//! backward closure. [`Tape::backward`] walks the nodes in reverse and
//! accumulates gradients. Nodes that do not depend on any gradient-requiring
//! input are never visited.

use crate::error::{invalid, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Inputs handed to a backward closure.
pub struct BackCtx<'a, T> {
    pub inputs: Vec<&'a Tensor<T>>,
    pub output: &'a Tensor<T>,
    pub grad: &'a Tensor<T>,
    /// Which inputs need a gradient; closures may skip the others.
    pub needs: Vec<bool>,
}

pub type BackwardFn<T> = Box<dyn Fn(&BackCtx<'_, T>) -> Vec<Option<Tensor<T>>>>;

struct Node<T> {
    value: Tensor<T>,
    parents: Vec<usize>,
    backward: Option<BackwardFn<T>>,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Leaf that gradients flow into.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push_raw(value, Vec::new(), None, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_raw(value, Vec::new(), None, false)
    }

    /// Copies the value of `v` into a new constant node (stop-gradient).
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    fn push_raw(
        &mut self,
        value: Tensor<T>,
        parents: Vec<usize>,
        backward: Option<BackwardFn<T>>,
        requires_grad: bool,
    ) -> Var {
        self.nodes.push(Node { value, parents, backward, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Records a custom operation. The closure returns one optional gradient
    /// per parent, in order.
    pub fn custom(&mut self, parents: &[Var], value: Tensor<T>, backward: BackwardFn<T>) -> Var {
        let requires = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        let parents: Vec<usize> = parents.iter().map(|p| p.0).collect();
        if requires {
            self.push_raw(value, parents, Some(backward), true)
        } else {
            self.push_raw(value, parents, None, false)
        }
    }

    /// Backpropagates `seed` (same shape as `root`) through the tape.
    pub fn backward(&self, root: Var, seed: Tensor<T>) -> Gradients<T> {
        assert_eq!(seed.shape(), self.value(root).shape(), "seed shape must match root");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[root.0].requires_grad {
            return Gradients { grads };
        }
        grads[root.0] = Some(seed);
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(g) = grads[idx].take() else { continue };
            let needs: Vec<bool> = node.parents.iter().map(|&p| self.nodes[p].requires_grad).collect();
            let ctx = BackCtx {
                inputs: node.parents.iter().map(|&p| &self.nodes[p].value).collect(),
                output: &node.value,
                grad: &g,
                needs,
            };
            let parent_grads = backward(&ctx);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (&p, pg) in node.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !self.nodes[p].requires_grad {
                    continue;
                }
                debug_assert_eq!(pg.shape(), self.nodes[p].value.shape(), "gradient shape mismatch");
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&pg),
                    slot @ None => *slot = Some(pg),
                }
            }
            // keep gradients of leaves and of the root's ancestors that callers may query
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    /// Backpropagates a scalar root with unit seed.
    pub fn grad(&self, root: Var) -> Gradients<T> {
        let seed = Tensor::full(self.value(root).shape(), T::one());
        self.backward(root, seed)
    }

    // ---- elementwise ------------------------------------------------------

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, df: impl Fn(T, T) -> T + 'static) -> Var {
        let value = self.value(x).map(f);
        self.custom(
            &[x],
            value,
            Box::new(move |c| {
                let data: Vec<T> = c
                    .grad
                    .data()
                    .iter()
                    .zip(c.inputs[0].data())
                    .zip(c.output.data())
                    .map(|((&g, &x), &y)| g * df(x, y))
                    .collect();
                vec![Some(Tensor::from_vec(c.grad.shape(), data).expect("shape"))]
            }),
        )
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(
            x,
            |v| if v > T::zero() { v } else { T::zero() },
            |x, _| if x > T::zero() { T::one() } else { T::zero() },
        )
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.tanh(), |_, y| T::one() - y * y)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, |_, y| y * (T::one() - y))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, softplus, |x, _| sigmoid(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.exp(), |_, y| y)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * v, |x, _| T::of(2.0) * x)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(
            x,
            |v| v.abs(),
            |x, _| {
                if x > T::zero() {
                    T::one()
                } else if x < T::zero() {
                    -T::one()
                } else {
                    T::zero()
                }
            },
        )
    }

    /// Clamps to `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let (l, h) = (T::of(lo), T::of(hi));
        self.unary(
            x,
            move |v| v.max(l).min(h),
            move |x, _| {
                if x >= l && x <= h {
                    T::one()
                } else {
                    T::zero()
                }
            },
        )
    }

    /// `max(x, lo)` elementwise.
    pub fn clamp_min(&mut self, x: Var, lo: f64) -> Var {
        let l = T::of(lo);
        self.unary(x, move |v| v.max(l), move |x, _| if x >= l { T::one() } else { T::zero() })
    }

    /// `a·x + b` with constant `a`, `b`.
    pub fn affine(&mut self, x: Var, a: f64, b: f64) -> Var {
        let (ta, tb) = (T::of(a), T::of(b));
        self.unary(x, move |v| ta * v + tb, move |_, _| ta)
    }

    pub fn scale(&mut self, x: Var, a: f64) -> Var {
        self.affine(x, a, 0.0)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.affine(x, -1.0, 0.0)
    }

    fn check_same(&self, a: Var, b: Var, op: &str) {
        assert_eq!(self.shape(a), self.shape(b), "{op}: shape mismatch");
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.check_same(a, b, "add");
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.custom(&[a, b], value, Box::new(|c| vec![Some(c.grad.clone()), Some(c.grad.clone())]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.check_same(a, b, "sub");
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.custom(&[a, b], value, Box::new(|c| vec![Some(c.grad.clone()), Some(c.grad.map(|g| -g))]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.check_same(a, b, "mul");
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.custom(
            &[a, b],
            value,
            Box::new(|c| {
                let ga = c.needs[0].then(|| c.grad.zip_map(c.inputs[1], |g, y| g * y));
                let gb = c.needs[1].then(|| c.grad.zip_map(c.inputs[0], |g, x| g * x));
                vec![ga, gb]
            }),
        )
    }

    /// Multiplies every element of item `b` of `x` by `s[b]`.
    pub fn mul_per_item(&mut self, x: Var, s: Var) -> Var {
        let xv = self.value(x);
        let sv = self.value(s);
        assert_eq!(sv.len(), xv.batch(), "mul_per_item: one scale per item");
        let n = xv.item_len();
        let mut out = xv.clone();
        for (b, &sb) in sv.data().iter().enumerate() {
            for v in &mut out.data_mut()[b * n..(b + 1) * n] {
                *v *= sb;
            }
        }
        self.custom(
            &[x, s],
            out,
            Box::new(move |c| {
                let (x, s) = (c.inputs[0], c.inputs[1]);
                let gx = c.needs[0].then(|| {
                    let mut g = c.grad.clone();
                    for (b, &sb) in s.data().iter().enumerate() {
                        for v in &mut g.data_mut()[b * n..(b + 1) * n] {
                            *v *= sb;
                        }
                    }
                    g
                });
                let gs = c.needs[1].then(|| {
                    let data = (0..s.len())
                        .map(|b| {
                            c.grad.data()[b * n..(b + 1) * n]
                                .iter()
                                .zip(&x.data()[b * n..(b + 1) * n])
                                .map(|(&g, &v)| g * v)
                                .sum()
                        })
                        .collect();
                    Tensor::from_vec(s.shape(), data).expect("shape")
                });
                vec![gx, gs]
            }),
        )
    }

    /// Per-item convex mix `m·a + (1 − m)·b` with `m` of shape `[batch]`.
    ///
    /// Items with `m = 0` return `b` exactly.
    pub fn mix_per_item(&mut self, a: Var, b: Var, m: Var) -> Var {
        self.check_same(a, b, "mix_per_item");
        let av = self.value(a);
        let bv = self.value(b);
        let mv = self.value(m);
        assert_eq!(mv.len(), av.batch(), "mix_per_item: one weight per item");
        let n = av.item_len();
        let mut out = Tensor::zeros(av.shape());
        for (i, &w) in mv.data().iter().enumerate() {
            let one_minus = T::one() - w;
            for j in i * n..(i + 1) * n {
                out.data_mut()[j] = w * av.data()[j] + one_minus * bv.data()[j];
            }
        }
        self.custom(
            &[a, b, m],
            out,
            Box::new(move |c| {
                let (av, bv, mv) = (c.inputs[0], c.inputs[1], c.inputs[2]);
                let g = c.grad;
                let ga = c.needs[0].then(|| {
                    let mut t = g.clone();
                    for (i, &w) in mv.data().iter().enumerate() {
                        t.data_mut()[i * n..(i + 1) * n].iter_mut().for_each(|v| *v *= w);
                    }
                    t
                });
                let gb = c.needs[1].then(|| {
                    let mut t = g.clone();
                    for (i, &w) in mv.data().iter().enumerate() {
                        let om = T::one() - w;
                        t.data_mut()[i * n..(i + 1) * n].iter_mut().for_each(|v| *v *= om);
                    }
                    t
                });
                let gm = c.needs[2].then(|| {
                    let data = (0..mv.len())
                        .map(|i| (i * n..(i + 1) * n).map(|j| g.data()[j] * (av.data()[j] - bv.data()[j])).sum())
                        .collect();
                    Tensor::from_vec(mv.shape(), data).expect("shape")
                });
                vec![ga, gb, gm]
            }),
        )
    }

    // ---- reductions -------------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        self.custom(&[x], value, Box::new(|c| vec![Some(Tensor::full(c.inputs[0].shape(), c.grad.data()[0]))]))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len();
        let s = self.sum(x);
        self.scale(s, 1.0 / n as f64)
    }

    /// Mean over all but the leading axis: `[B, ...] → [B]`.
    pub fn mean_per_item(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (b, n) = (xv.batch(), xv.item_len());
        let inv = T::of(1.0 / n as f64);
        let data: Vec<T> = (0..b).map(|i| xv.item(i).iter().copied().sum::<T>() * inv).collect();
        let value = Tensor::from_vec(&[b], data).expect("shape");
        self.custom(
            &[x],
            value,
            Box::new(move |c| {
                let mut g = Tensor::zeros(c.inputs[0].shape());
                for i in 0..b {
                    let gi = c.grad.data()[i] * inv;
                    g.item_mut(i).iter_mut().for_each(|v| *v = gi);
                }
                vec![Some(g)]
            }),
        )
    }

    /// Sum over all but the leading axis: `[B, ...] → [B]`.
    pub fn sum_per_item(&mut self, x: Var) -> Var {
        let n = self.value(x).item_len();
        let m = self.mean_per_item(x);
        self.scale(m, n as f64)
    }

    // ---- shape ------------------------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.custom(
            &[x],
            value,
            Box::new(|c| vec![Some(c.grad.clone().reshape(c.inputs[0].shape()).expect("shape"))]),
        ))
    }

    /// Channel slice `[B, C, ...] → [B, len, ...]` starting at `start`.
    pub fn narrow_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let shape = xv.shape().to_vec();
        if shape.len() < 2 || start + len > shape[1] {
            return invalid(format!("narrow {start}+{len} out of range for {shape:?}"));
        }
        let inner: usize = shape[2..].iter().product();
        let (b, ch) = (shape[0], shape[1]);
        let mut out_shape = shape.clone();
        out_shape[1] = len;
        let mut data = Vec::with_capacity(b * len * inner);
        for i in 0..b {
            let base = i * ch * inner + start * inner;
            data.extend_from_slice(&xv.data()[base..base + len * inner]);
        }
        let value = Tensor::from_vec(&out_shape, data)?;
        Ok(self.custom(
            &[x],
            value,
            Box::new(move |c| {
                let mut g = Tensor::zeros(c.inputs[0].shape());
                for i in 0..b {
                    let dst = i * ch * inner + start * inner;
                    let src = i * len * inner;
                    g.data_mut()[dst..dst + len * inner].copy_from_slice(&c.grad.data()[src..src + len * inner]);
                }
                vec![Some(g)]
            }),
        ))
    }

    /// Concatenates `[B, n_i]` matrices along the second axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let b = self.shape(parts[0])[0];
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).item_len()).collect();
        if parts.iter().any(|&p| self.shape(p)[0] != b) {
            return invalid("concat_cols: batch mismatch");
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(b * total);
        for i in 0..b {
            for &p in parts {
                data.extend_from_slice(self.value(p).item(i));
            }
        }
        let value = Tensor::from_vec(&[b, total], data)?;
        Ok(self.custom(
            parts,
            value,
            Box::new(move |c| {
                let mut out = Vec::with_capacity(widths.len());
                let mut offset = 0;
                for (k, &w) in widths.iter().enumerate() {
                    let mut g = Tensor::zeros(c.inputs[k].shape());
                    for i in 0..b {
                        g.item_mut(i).copy_from_slice(&c.grad.data()[i * total + offset..i * total + offset + w]);
                    }
                    offset += w;
                    out.push(Some(g));
                }
                out
            }),
        ))
    }

    /// Divides every row of `[B, N]` by its sum.
    pub fn normalize_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let mut out = xv.clone();
        let mut sums = Vec::with_capacity(xv.batch());
        for i in 0..xv.batch() {
            let s: T = xv.item(i).iter().copied().sum();
            sums.push(s);
            out.item_mut(i).iter_mut().for_each(|v| *v /= s);
        }
        self.custom(
            &[x],
            out,
            Box::new(move |c| {
                let y = c.output;
                let mut g = c.grad.clone();
                for (i, &s) in sums.iter().enumerate() {
                    let dot: T = c.grad.item(i).iter().zip(y.item(i)).map(|(&g, &y)| g * y).sum();
                    g.item_mut(i).iter_mut().for_each(|v| *v = (*v - dot) / s);
                }
                vec![Some(g)]
            }),
        )
    }

    // ---- layers -----------------------------------------------------------

    /// `x[B, in] · wᵀ + b` with `w: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, bias: Var) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        if xv.shape().len() != 2 || wv.shape().len() != 2 || xv.shape()[1] != wv.shape()[1] {
            return invalid(format!("linear: input {:?} vs weight {:?}", xv.shape(), wv.shape()));
        }
        let (bsz, fin, fout) = (xv.shape()[0], xv.shape()[1], wv.shape()[0]);
        let mut out = Tensor::zeros(&[bsz, fout]);
        for i in 0..bsz {
            out.item_mut(i).copy_from_slice(self.value(bias).data());
        }
        T::gemm(
            bsz,
            fin,
            fout,
            xv.data(),
            fin as isize,
            1,
            wv.data(),
            1,
            fin as isize,
            out.data_mut(),
            fout as isize,
            1,
            true,
        );
        Ok(self.custom(
            &[x, w, bias],
            out,
            Box::new(move |c| {
                let (xv, wv, g) = (c.inputs[0], c.inputs[1], c.grad);
                let gx = c.needs[0].then(|| {
                    let mut gx = Tensor::zeros(xv.shape());
                    T::gemm(
                        bsz,
                        fout,
                        fin,
                        g.data(),
                        fout as isize,
                        1,
                        wv.data(),
                        fin as isize,
                        1,
                        gx.data_mut(),
                        fin as isize,
                        1,
                        false,
                    );
                    gx
                });
                let gw = c.needs[1].then(|| {
                    let mut gw = Tensor::zeros(wv.shape());
                    T::gemm(
                        fout,
                        bsz,
                        fin,
                        g.data(),
                        1,
                        fout as isize,
                        xv.data(),
                        fin as isize,
                        1,
                        gw.data_mut(),
                        fin as isize,
                        1,
                        false,
                    );
                    gw
                });
                let gb = c.needs[2].then(|| {
                    let mut gb = Tensor::zeros(&[fout]);
                    for i in 0..bsz {
                        for (a, &v) in gb.data_mut().iter_mut().zip(g.item(i)) {
                            *a += v;
                        }
                    }
                    gb
                });
                vec![gx, gw, gb]
            }),
        ))
    }

    /// Stride-1 2-D convolution (cross-correlation) with zero padding `k/2`.
    ///
    /// `x: [B, Ci, H, W]`, `w: [Co, Ci, k, k]`, `b: [Co]`.
    pub fn conv2d(&mut self, x: Var, w: Var, bias: Var) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        let (xs, ws) = (xv.shape(), wv.shape());
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] || ws[2] != ws[3] || ws[2] % 2 == 0 {
            return invalid(format!("conv2d: input {xs:?} vs weight {ws:?}"));
        }
        let geo = ConvGeometry { ci: xs[1], h: xs[2], w: xs[3], co: ws[0], k: ws[2] };
        let bsz = xs[0];
        let mut out = Tensor::zeros(&[bsz, geo.co, geo.h, geo.w]);
        let hw = geo.h * geo.w;
        let ckk = geo.ci * geo.k * geo.k;
        let mut cols = vec![T::zero(); ckk * hw];
        let bias_v = self.value(bias).data().to_vec();
        for i in 0..bsz {
            geo.im2col(xv.item(i), &mut cols);
            let o = out.item_mut(i);
            for (co, &bv) in bias_v.iter().enumerate() {
                o[co * hw..(co + 1) * hw].iter_mut().for_each(|v| *v = bv);
            }
            T::gemm(geo.co, ckk, hw, wv.data(), ckk as isize, 1, &cols, hw as isize, 1, o, hw as isize, 1, true);
        }
        Ok(self.custom(
            &[x, w, bias],
            out,
            Box::new(move |c| {
                let (xv, wv, g) = (c.inputs[0], c.inputs[1], c.grad);
                let mut gx = c.needs[0].then(|| Tensor::zeros(xv.shape()));
                let mut gw = c.needs[1].then(|| Tensor::zeros(wv.shape()));
                let mut cols = vec![T::zero(); ckk * hw];
                let mut gcols = vec![T::zero(); ckk * hw];
                for i in 0..bsz {
                    let gi = g.item(i);
                    if let Some(gw) = gw.as_mut() {
                        geo.im2col(xv.item(i), &mut cols);
                        T::gemm(
                            geo.co,
                            hw,
                            ckk,
                            gi,
                            hw as isize,
                            1,
                            &cols,
                            1,
                            hw as isize,
                            gw.data_mut(),
                            ckk as isize,
                            1,
                            true,
                        );
                    }
                    if let Some(gx) = gx.as_mut() {
                        T::gemm(
                            ckk,
                            geo.co,
                            hw,
                            wv.data(),
                            1,
                            ckk as isize,
                            gi,
                            hw as isize,
                            1,
                            &mut gcols,
                            hw as isize,
                            1,
                            false,
                        );
                        geo.col2im(&gcols, gx.item_mut(i));
                    }
                }
                let gb = c.needs[2].then(|| {
                    let mut gb = Tensor::zeros(&[geo.co]);
                    for i in 0..bsz {
                        let gi = g.item(i);
                        for (co, a) in gb.data_mut().iter_mut().enumerate() {
                            *a += gi[co * hw..(co + 1) * hw].iter().copied().sum::<T>();
                        }
                    }
                    gb
                });
                vec![gx, gw, gb]
            }),
        ))
    }

    /// Nearest-neighbour 2× upsampling of `[B, C, H, W]`.
    pub fn upsample2x(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let s = xv.shape().to_vec();
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        let mut out = Tensor::zeros(&[s[0], s[1], 2 * h, 2 * w]);
        for p in 0..planes {
            let src = &xv.data()[p * h * w..(p + 1) * h * w];
            let dst = &mut out.data_mut()[p * 4 * h * w..(p + 1) * 4 * h * w];
            for i in 0..2 * h {
                for j in 0..2 * w {
                    dst[i * 2 * w + j] = src[(i / 2) * w + j / 2];
                }
            }
        }
        self.custom(
            &[x],
            out,
            Box::new(move |c| {
                let mut g = Tensor::zeros(c.inputs[0].shape());
                for p in 0..planes {
                    let src = &c.grad.data()[p * 4 * h * w..(p + 1) * 4 * h * w];
                    let dst = &mut g.data_mut()[p * h * w..(p + 1) * h * w];
                    for i in 0..2 * h {
                        for j in 0..2 * w {
                            dst[(i / 2) * w + j / 2] += src[i * 2 * w + j];
                        }
                    }
                }
                vec![Some(g)]
            }),
        )
    }

    /// 2×2 average pooling of `[B, C, H, W]` (H, W even).
    pub fn avgpool2x(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let s = xv.shape().to_vec();
        if !s[2].is_multiple_of(2) || !s[3].is_multiple_of(2) {
            return invalid(format!("avgpool2x needs even spatial dims, got {s:?}"));
        }
        let (planes, h, w) = (s[0] * s[1], s[2] / 2, s[3] / 2);
        let quarter = T::of(0.25);
        let mut out = Tensor::zeros(&[s[0], s[1], h, w]);
        for p in 0..planes {
            let src = &xv.data()[p * 4 * h * w..(p + 1) * 4 * h * w];
            let dst = &mut out.data_mut()[p * h * w..(p + 1) * h * w];
            for i in 0..h {
                for j in 0..w {
                    let a = src[2 * i * 2 * w + 2 * j] + src[2 * i * 2 * w + 2 * j + 1];
                    let b = src[(2 * i + 1) * 2 * w + 2 * j] + src[(2 * i + 1) * 2 * w + 2 * j + 1];
                    dst[i * w + j] = (a + b) * quarter;
                }
            }
        }
        Ok(self.custom(
            &[x],
            out,
            Box::new(move |c| {
                let mut g = Tensor::zeros(c.inputs[0].shape());
                for p in 0..planes {
                    let src = &c.grad.data()[p * h * w..(p + 1) * h * w];
                    let dst = &mut g.data_mut()[p * 4 * h * w..(p + 1) * 4 * h * w];
                    for i in 0..2 * h {
                        for j in 0..2 * w {
                            dst[i * 2 * w + j] = src[(i / 2) * w + j / 2] * quarter;
                        }
                    }
                }
                vec![Some(g)]
            }),
        ))
    }

    /// `[B, C, H, W] → [B, C]` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let s = xv.shape().to_vec();
        let hw = s[2] * s[3];
        let inv = T::of(1.0 / hw as f64);
        let data: Vec<T> = xv.data().chunks(hw).map(|plane| plane.iter().copied().sum::<T>() * inv).collect();
        let value = Tensor::from_vec(&[s[0], s[1]], data).expect("shape");
        self.custom(
            &[x],
            value,
            Box::new(move |c| {
                let mut g = Tensor::zeros(c.inputs[0].shape());
                for (plane, &gv) in g.data_mut().chunks_mut(hw).zip(c.grad.data()) {
                    plane.iter_mut().for_each(|v| *v = gv * inv);
                }
                vec![Some(g)]
            }),
        )
    }
}

#[inline]
pub fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub fn softplus<T: Scalar>(v: T) -> T {
    v.max(T::zero()) + (-v.abs()).exp().ln_1p()
}

#[derive(Clone, Copy)]
struct ConvGeometry {
    ci: usize,
    h: usize,
    w: usize,
    co: usize,
    k: usize,
}

impl ConvGeometry {
    fn im2col<T: Scalar>(&self, x: &[T], cols: &mut [T]) {
        let (h, w, k) = (self.h as isize, self.w as isize, self.k);
        let pad = (k / 2) as isize;
        let hw = self.h * self.w;
        for c in 0..self.ci {
            let plane = &x[c * hw..(c + 1) * hw];
            for a in 0..k {
                for b in 0..k {
                    let row = (c * k + a) * k + b;
                    let dst = &mut cols[row * hw..(row + 1) * hw];
                    let (da, db) = (a as isize - pad, b as isize - pad);
                    for i in 0..h {
                        let si = i + da;
                        let drow = &mut dst[(i * w) as usize..((i + 1) * w) as usize];
                        if si < 0 || si >= h {
                            drow.iter_mut().for_each(|v| *v = T::zero());
                            continue;
                        }
                        let srow = &plane[(si * w) as usize..((si + 1) * w) as usize];
                        for j in 0..w {
                            let sj = j + db;
                            drow[j as usize] = if sj < 0 || sj >= w { T::zero() } else { srow[sj as usize] };
                        }
                    }
                }
            }
        }
    }

    fn col2im<T: Scalar>(&self, cols: &[T], x: &mut [T]) {
        let (h, w, k) = (self.h as isize, self.w as isize, self.k);
        let pad = (k / 2) as isize;
        let hw = self.h * self.w;
        for c in 0..self.ci {
            let plane = &mut x[c * hw..(c + 1) * hw];
            for a in 0..k {
                for b in 0..k {
                    let row = (c * k + a) * k + b;
                    let src = &cols[row * hw..(row + 1) * hw];
                    let (da, db) = (a as isize - pad, b as isize - pad);
                    for i in 0..h {
                        let si = i + da;
                        if si < 0 || si >= h {
                            continue;
                        }
                        for j in 0..w {
                            let sj = j + db;
                            if sj >= 0 && sj < w {
                                plane[(si * w + sj) as usize] += src[(i * w + j) as usize];
                            }
                        }
                    }
                }
            }
        }
    }
}
