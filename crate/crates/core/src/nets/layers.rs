use rand::Rng;

use super::params::{Binding, ParamId, ParamStore};
use crate::error::Result;
use crate::graph::{Tape, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Linear {
    w: ParamId,
    b: ParamId,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        inp: usize,
        out: usize,
        rng: &mut R,
    ) -> Self {
        let w = store.add_fan_in(&format!("{name}.w"), &[out, inp], inp, rng);
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[out]));
        Self { w, b }
    }

    /// Zero weights and a constant bias.
    pub fn constant<T: Scalar>(store: &mut ParamStore<T>, name: &str, inp: usize, out: usize, bias: f64) -> Self {
        let w = store.add(format!("{name}.w"), Tensor::zeros(&[out, inp]));
        let b = store.add(format!("{name}.b"), Tensor::full(&[out], T::of(bias)));
        Self { w, b }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Binding, x: Var) -> Result<Var> {
        tape.linear(x, p.var(self.w), p.var(self.b))
    }
}

/// Stride-1, same-size convolution.
#[derive(Clone, Debug)]
pub struct Conv {
    w: ParamId,
    b: ParamId,
}

impl Conv {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        rng: &mut R,
    ) -> Self {
        let w = store.add_fan_in(&format!("{name}.w"), &[cout, cin, k, k], cin * k * k, rng);
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[cout]));
        Self { w, b }
    }

    /// Zero weights and a constant bias.
    pub fn constant<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        bias: f64,
    ) -> Self {
        let w = store.add(format!("{name}.w"), Tensor::zeros(&[cout, cin, k, k]));
        let b = store.add(format!("{name}.b"), Tensor::full(&[cout], T::of(bias)));
        Self { w, b }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Binding, x: Var) -> Result<Var> {
        tape.conv2d(x, p.var(self.w), p.var(self.b))
    }
}

fn residual_sum<T: Scalar>(tape: &mut Tape<T>, shortcut: Var, residual: Var, scale: f64) -> Var {
    let r = tape.scale(residual, scale);
    tape.add(shortcut, r)
}

/// Upsampling block: `up(x)·W₁ₓ₁ + s·conv(relu(conv(up(relu(x)))))`.
#[derive(Clone, Debug)]
pub struct ResBlockUp {
    c1: Conv,
    c2: Conv,
    sc: Conv,
    scale: f64,
}

impl ResBlockUp {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        scale: f64,
        rng: &mut R,
    ) -> Self {
        Self {
            c1: Conv::new(store, &format!("{name}.c1"), cin, cout, 3, rng),
            c2: Conv::new(store, &format!("{name}.c2"), cout, cout, 3, rng),
            sc: Conv::new(store, &format!("{name}.sc"), cin, cout, 1, rng),
            scale,
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Binding, x: Var) -> Result<Var> {
        let h = tape.relu(x);
        let h = tape.upsample2x(h);
        let h = self.c1.forward(tape, p, h)?;
        let h = tape.relu(h);
        let h = self.c2.forward(tape, p, h)?;
        let s = tape.upsample2x(x);
        let s = self.sc.forward(tape, p, s)?;
        Ok(residual_sum(tape, s, h, self.scale))
    }
}

/// Downsampling block. The first block of a discriminator skips the leading
/// activation, since its input is an image.
#[derive(Clone, Debug)]
pub struct ResBlockDown {
    c1: Conv,
    c2: Conv,
    sc: Conv,
    scale: f64,
    first: bool,
}

impl ResBlockDown {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        scale: f64,
        first: bool,
        rng: &mut R,
    ) -> Self {
        Self {
            c1: Conv::new(store, &format!("{name}.c1"), cin, cout, 3, rng),
            c2: Conv::new(store, &format!("{name}.c2"), cout, cout, 3, rng),
            sc: Conv::new(store, &format!("{name}.sc"), cin, cout, 1, rng),
            scale,
            first,
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Binding, x: Var) -> Result<Var> {
        let h = if self.first { x } else { tape.relu(x) };
        let h = self.c1.forward(tape, p, h)?;
        let h = tape.relu(h);
        let h = self.c2.forward(tape, p, h)?;
        let h = tape.avgpool2x(h)?;
        let s = if self.first {
            let s = tape.avgpool2x(x)?;
            self.sc.forward(tape, p, s)?
        } else {
            let s = self.sc.forward(tape, p, x)?;
            tape.avgpool2x(s)?
        };
        Ok(residual_sum(tape, s, h, self.scale))
    }
}

/// Same-resolution block with identity shortcut (or 1×1 when widths differ).
#[derive(Clone, Debug)]
pub struct ResBlock {
    c1: Conv,
    c2: Conv,
    sc: Option<Conv>,
    scale: f64,
}

impl ResBlock {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        scale: f64,
        rng: &mut R,
    ) -> Self {
        Self {
            c1: Conv::new(store, &format!("{name}.c1"), cin, cout, 3, rng),
            c2: Conv::new(store, &format!("{name}.c2"), cout, cout, 3, rng),
            sc: (cin != cout).then(|| Conv::new(store, &format!("{name}.sc"), cin, cout, 1, rng)),
            scale,
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Binding, x: Var) -> Result<Var> {
        let h = tape.relu(x);
        let h = self.c1.forward(tape, p, h)?;
        let h = tape.relu(h);
        let h = self.c2.forward(tape, p, h)?;
        let s = match &self.sc {
            Some(sc) => sc.forward(tape, p, x)?,
            None => x,
        };
        Ok(residual_sum(tape, s, h, self.scale))
    }
}

/// Two hidden ReLU layers shared by the kernel and quality generators.
#[derive(Clone, Debug)]
pub struct MlpTrunk {
    l1: Linear,
    l2: Linear,
}

impl MlpTrunk {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        inp: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            l1: Linear::new(store, &format!("{name}.l1"), inp, hidden, rng),
            l2: Linear::new(store, &format!("{name}.l2"), hidden, hidden, rng),
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Binding, z: Var) -> Result<Var> {
        let h = self.l1.forward(tape, p, z)?;
        let h = tape.relu(h);
        let h = self.l2.forward(tape, p, h)?;
        Ok(tape.relu(h))
    }
}
