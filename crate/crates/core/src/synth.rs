//! Procedural clean images for smoke runs and tests.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::degrade::Image;
use crate::error::Result;
use crate::imageio::{write_png, BitDepth};

/// A smooth two-colour gradient with one to three flat disks or boxes.
pub fn shape_image<R: Rng + ?Sized>(channels: usize, size: usize, rng: &mut R) -> Result<Image<f64>> {
    let colour = |rng: &mut R| -> Vec<f64> { (0..channels).map(|_| rng.random_range(0.05..0.95)).collect() };
    let (c0, c1) = (colour(rng), colour(rng));
    let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let (dx, dy) = (angle.cos(), angle.sin());
    let s = size as f64;
    let mut img = Image::from_fn(channels, size, size, |c, i, j| {
        let t = 0.5 + ((j as f64 / s - 0.5) * dx + (i as f64 / s - 0.5) * dy) * 0.7;
        c0[c] * (1.0 - t) + c1[c] * t
    })?;
    for _ in 0..rng.random_range(1..=3) {
        let fill = colour(rng);
        let (cy, cx) = (rng.random_range(0.2..0.8) * s, rng.random_range(0.2..0.8) * s);
        let r = rng.random_range(0.12..0.3) * s;
        let disk = rng.random_bool(0.5);
        for i in 0..size {
            for j in 0..size {
                let (y, x) = (i as f64 + 0.5 - cy, j as f64 + 0.5 - cx);
                let inside = if disk { x * x + y * y <= r * r } else { x.abs() <= r && y.abs() <= r };
                if inside {
                    for (c, &v) in fill.iter().enumerate() {
                        img.data_mut()[(c * size + i) * size + j] = v;
                    }
                }
            }
        }
    }
    Ok(img)
}

pub fn shapes(n: usize, channels: usize, size: usize, seed: u64) -> Result<Vec<Image<f64>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| shape_image(channels, size, &mut rng)).collect()
}

/// Writes `img_00000.png`, `img_00001.png`, … as 8-bit files.
pub fn write_dataset(dir: &Path, images: &[Image<f64>]) -> Result<()> {
    for (i, img) in images.iter().enumerate() {
        write_png(&dir.join(format!("img_{i:05}.png")), img, BitDepth::Eight)?;
    }
    Ok(())
}
