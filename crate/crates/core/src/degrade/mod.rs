//! Image degradation `y = jpeg(clamp(x ∗ k + n), q)` and its ingredients.
//!
//! Every operator has a plain form working on [`Image`] and a tape form on
//! `[batch, channels, height, width]` tensors used during training.

mod convolve;
mod jpeg;
mod kernels;
mod noise;
mod pipeline;

pub use convolve::{convolve, convolve_tape};
pub use jpeg::{
    diff_jpeg, diff_jpeg_luma_planes, diff_jpeg_tape, quant_tables, reference_jpeg, reference_jpeg_luma_planes,
    JpegRounding, LumaPlanes, CHROMA_TABLE, LUMA_TABLE,
};
pub use kernels::{disk_kernel, identity_kernel, kernel_entropy, kernel_entropy_tape, motion_kernel, ENTROPY_EPS};
pub use noise::{sample_noise, sample_noise_tape};
pub use pipeline::{degrade, degrade_reference, degrade_tape, DegradeFlags, DegradeVars};

use crate::error::{invalid, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Planar `channels × height × width` image with intensities in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image<T> {
    data: Vec<T>,
    height: usize,
    width: usize,
    channels: usize,
}

impl<T: Scalar> Image<T> {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return invalid(format!("images have 1 or 3 channels, got {channels}"));
        }
        if height == 0 || width == 0 {
            return invalid("image dimensions must be positive");
        }
        if data.len() != channels * height * width {
            return invalid(format!(
                "image {channels}x{height}x{width} needs {} values, got {}",
                channels * height * width,
                data.len()
            ));
        }
        Ok(Self { data, height, width, channels })
    }

    pub fn filled(channels: usize, height: usize, width: usize, v: T) -> Result<Self> {
        Self::new(channels, height, width, vec![v; channels * height * width])
    }

    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> T,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for i in 0..height {
                for j in 0..width {
                    data.push(f(c, i, j));
                }
            }
        }
        Self::new(channels, height, width, data)
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }
    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }
    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }
    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }
    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, c: usize, i: usize, j: usize) -> T {
        self.data[(c * self.height + i) * self.width + j]
    }

    pub fn plane(&self, c: usize) -> &[T] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.channels == other.channels && self.height == other.height && self.width == other.width
    }

    pub fn clamped(&self) -> Self {
        let mut out = self.clone();
        out.data.iter_mut().for_each(|v| *v = v.max(T::zero()).min(T::one()));
        out
    }

    pub fn cast<U: Scalar>(&self) -> Image<U> {
        Image {
            data: self.data.iter().map(|v| U::of(v.real())).collect(),
            height: self.height,
            width: self.width,
            channels: self.channels,
        }
    }

    /// `[C, H, W]` tensor view.
    pub fn to_tensor(&self) -> Tensor<T> {
        Tensor::from_vec(&[self.channels, self.height, self.width], self.data.clone()).expect("shape")
    }

    pub fn from_tensor(t: &Tensor<T>) -> Result<Self> {
        match t.shape() {
            [c, h, w] => Self::new(*c, *h, *w, t.data().to_vec()),
            [1, c, h, w] => Self::new(*c, *h, *w, t.data().to_vec()),
            s => invalid(format!("expected [C,H,W] tensor, got {s:?}")),
        }
    }

    /// Stacks same-shaped images into a `[B, C, H, W]` batch.
    pub fn batch(images: &[Image<T>]) -> Result<Tensor<T>> {
        let Some(first) = images.first() else {
            return invalid("empty image batch");
        };
        let mut data = Vec::with_capacity(images.len() * first.data.len());
        for im in images {
            if !im.same_shape(first) {
                return invalid("images in a batch must share a shape");
            }
            data.extend_from_slice(&im.data);
        }
        Tensor::from_vec(&[images.len(), first.channels, first.height, first.width], data)
    }

    /// Splits a `[B, C, H, W]` batch.
    pub fn unbatch(t: &Tensor<T>) -> Result<Vec<Image<T>>> {
        let [_, c, h, w] = t.shape() else {
            return invalid(format!("expected [B,C,H,W] tensor, got {:?}", t.shape()));
        };
        t.unstack().iter().map(|item| Self::new(*c, *h, *w, item.data().to_vec())).collect()
    }
}

/// Odd-sized, non-negative, sum-to-one blur kernel.
#[derive(Clone, Debug, PartialEq)]
pub struct BlurKernel<T> {
    size: usize,
    data: Vec<T>,
}

/// Tolerance on `Σ k = 1`.
pub const KERNEL_SUM_TOL: f64 = 1e-5;

impl<T: Scalar> BlurKernel<T> {
    pub fn new(size: usize, data: Vec<T>) -> Result<Self> {
        if size == 0 || size.is_multiple_of(2) {
            return invalid(format!("kernel size must be odd and positive, got {size}"));
        }
        if data.len() != size * size {
            return invalid(format!("kernel {size}x{size} needs {} values", size * size));
        }
        if let Some(v) = data.iter().find(|v| !(v.real() >= 0.0)) {
            return invalid(format!("kernel entries must be non-negative, found {}", v.real()));
        }
        let sum: f64 = data.iter().map(|v| v.real()).sum();
        if (sum - 1.0).abs() > KERNEL_SUM_TOL {
            return invalid(format!("kernel must sum to 1, sums to {sum}"));
        }
        Ok(Self { size, data })
    }

    /// Normalizes non-negative weights to sum to one.
    pub fn normalized(size: usize, mut data: Vec<T>) -> Result<Self> {
        let sum: T = data.iter().copied().sum();
        if !(sum.real() > 0.0) {
            return invalid("kernel weights sum to zero");
        }
        data.iter_mut().for_each(|v| *v /= sum);
        Self::new(size, data)
    }

    #[inline]
    pub fn size(&self) -> usize {
        self.size
    }
    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }
    #[inline]
    pub fn get(&self, a: usize, b: usize) -> T {
        self.data[a * self.size + b]
    }

    pub fn cast<U: Scalar>(&self) -> BlurKernel<U> {
        BlurKernel { size: self.size, data: self.data.iter().map(|v| U::of(v.real())).collect() }
    }

    /// Zero-pads (centered) to a larger odd size.
    pub fn padded(&self, size: usize) -> Result<Self> {
        if size < self.size || size.is_multiple_of(2) {
            return invalid(format!("cannot pad kernel of size {} to {size}", self.size));
        }
        let off = (size - self.size) / 2;
        let mut data = vec![T::zero(); size * size];
        for a in 0..self.size {
            for b in 0..self.size {
                data[(a + off) * size + b + off] = self.get(a, b);
            }
        }
        Ok(Self { size, data })
    }
}

/// Per-pixel read and shot noise standard deviations.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseParams<T> {
    pub sigma_read: Vec<T>,
    pub sigma_shot: Vec<T>,
}

impl<T: Scalar> NoiseParams<T> {
    pub fn new(sigma_read: Vec<T>, sigma_shot: Vec<T>) -> Result<Self> {
        if sigma_read.len() != sigma_shot.len() {
            return invalid("sigma_read and sigma_shot must have the same shape");
        }
        if sigma_read.iter().chain(&sigma_shot).any(|v| !(v.real() >= 0.0)) {
            return invalid("noise standard deviations must be non-negative");
        }
        Ok(Self { sigma_read, sigma_shot })
    }

    /// Spatially constant parameters for an image with `len` values.
    pub fn uniform(len: usize, sigma_read: T, sigma_shot: T) -> Result<Self> {
        Self::new(vec![sigma_read; len], vec![sigma_shot; len])
    }

    pub fn zero(len: usize) -> Self {
        Self { sigma_read: vec![T::zero(); len], sigma_shot: vec![T::zero(); len] }
    }

    pub fn len(&self) -> usize {
        self.sigma_read.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sigma_read.is_empty()
    }
}

/// JPEG quality factor in `[0, 100]`.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd)]
pub struct QualityFactor(f64);

impl QualityFactor {
    pub fn new(q: f64) -> Result<Self> {
        if !(0.0..=100.0).contains(&q) {
            return invalid(format!("quality factor must lie in [0, 100], got {q}"));
        }
        Ok(Self(q))
    }

    #[inline]
    pub fn value(self) -> f64 {
        self.0
    }
}
