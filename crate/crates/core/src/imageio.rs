//! Lossless image files.

use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageBuffer, Luma, Rgb};

use crate::degrade::Image;
use crate::error::{invalid, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BitDepth {
    Eight,
    Sixteen,
}

impl BitDepth {
    fn max(self) -> f64 {
        match self {
            BitDepth::Eight => 255.0,
            BitDepth::Sixteen => 65535.0,
        }
    }
}

fn image_err(path: &Path, source: image::ImageError) -> Error {
    Error::Image { path: path.to_path_buf(), source }
}

/// Reads a grayscale or RGB image into `[0, 1]`; alpha is dropped.
pub fn read_image(path: &Path) -> Result<(Image<f64>, BitDepth)> {
    let img = image::open(path).map_err(|e| image_err(path, e))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let sixteen = matches!(
        img,
        DynamicImage::ImageLuma16(_)
            | DynamicImage::ImageLumaA16(_)
            | DynamicImage::ImageRgb16(_)
            | DynamicImage::ImageRgba16(_)
    );
    let gray = matches!(
        img,
        DynamicImage::ImageLuma8(_)
            | DynamicImage::ImageLumaA8(_)
            | DynamicImage::ImageLuma16(_)
            | DynamicImage::ImageLumaA16(_)
    );
    let channels = if gray { 1 } else { 3 };
    let raw: Vec<f64> = match (gray, sixteen) {
        (true, false) => img.to_luma8().into_raw().into_iter().map(|v| v as f64 / 255.0).collect(),
        (true, true) => img.to_luma16().into_raw().into_iter().map(|v| v as f64 / 65535.0).collect(),
        (false, false) => img.to_rgb8().into_raw().into_iter().map(|v| v as f64 / 255.0).collect(),
        (false, true) => img.to_rgb16().into_raw().into_iter().map(|v| v as f64 / 65535.0).collect(),
    };
    // interleaved HWC to planar CHW
    let data =
        (0..channels).flat_map(|c| (0..h * w).map(move |p| (c, p))).map(|(c, p)| raw[p * channels + c]).collect();
    let depth = if sixteen { BitDepth::Sixteen } else { BitDepth::Eight };
    Ok((Image::new(channels, h, w, data)?, depth))
}

/// Writes a 1- or 3-channel image as PNG, rounding to the given depth.
pub fn write_png(path: &Path, img: &Image<f64>, depth: BitDepth) -> Result<()> {
    let (c, h, w) = (img.channels(), img.height(), img.width());
    if c != 1 && c != 3 {
        return invalid(format!("cannot write a {c}-channel image"));
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let max = depth.max();
    let interleaved: Vec<f64> =
        (0..h * w).flat_map(|p| (0..c).map(move |ch| (ch, p))).map(|(ch, p)| img.data()[ch * h * w + p]).collect();
    let q = |v: f64| (v.clamp(0.0, 1.0) * max).round();
    let (w32, h32) = (w as u32, h as u32);
    let dynamic = match (c, depth) {
        (1, BitDepth::Eight) => DynamicImage::ImageLuma8(
            ImageBuffer::<Luma<u8>, _>::from_raw(w32, h32, interleaved.iter().map(|&v| q(v) as u8).collect())
                .expect("size"),
        ),
        (1, BitDepth::Sixteen) => DynamicImage::ImageLuma16(
            ImageBuffer::<Luma<u16>, _>::from_raw(w32, h32, interleaved.iter().map(|&v| q(v) as u16).collect())
                .expect("size"),
        ),
        (_, BitDepth::Eight) => DynamicImage::ImageRgb8(
            ImageBuffer::<Rgb<u8>, _>::from_raw(w32, h32, interleaved.iter().map(|&v| q(v) as u8).collect())
                .expect("size"),
        ),
        (_, BitDepth::Sixteen) => DynamicImage::ImageRgb16(
            ImageBuffer::<Rgb<u16>, _>::from_raw(w32, h32, interleaved.iter().map(|&v| q(v) as u16).collect())
                .expect("size"),
        ),
    };
    dynamic.save_with_format(path, image::ImageFormat::Png).map_err(|e| image_err(path, e))
}

/// Rounds values to the grid a file of the given depth can hold.
pub fn quantize(img: &Image<f64>, depth: BitDepth) -> Image<f64> {
    let max = depth.max();
    let mut out = img.clone();
    out.data_mut().iter_mut().for_each(|v| *v = (v.clamp(0.0, 1.0) * max).round() / max);
    out
}

/// PNG files of a directory, sorted by name.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();
    for e in entries {
        let path = e.map_err(|e| Error::io(dir, e))?.path();
        let is_png = path.extension().and_then(|s| s.to_str()).is_some_and(|s| s.eq_ignore_ascii_case("png"));
        if path.is_file() && is_png {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

/// Loads every PNG of a directory; all must share one shape.
pub fn load_dir(dir: &Path) -> Result<Vec<Image<f64>>> {
    let mut out: Vec<Image<f64>> = Vec::new();
    for path in list_images(dir)? {
        let (img, _) = read_image(&path)?;
        if let Some(first) = out.first() {
            if !first.same_shape(&img) {
                return invalid(format!("{} has a different size from the rest of {}", path.display(), dir.display()));
            }
        }
        out.push(img);
    }
    Ok(out)
}

/// Tiles same-shaped images into one PNG with a 1-pixel gap.
pub fn write_grid(path: &Path, images: &[Image<f64>], cols: usize) -> Result<()> {
    let Some(first) = images.first() else {
        return invalid("empty grid");
    };
    let (c, h, w) = (first.channels(), first.height(), first.width());
    let cols = cols.clamp(1, images.len());
    let rows = images.len().div_ceil(cols);
    let (gh, gw) = (rows * (h + 1) - 1, cols * (w + 1) - 1);
    let mut data = vec![1.0; c * gh * gw];
    for (n, img) in images.iter().enumerate() {
        if !img.same_shape(first) {
            return invalid("grid images differ in shape");
        }
        let (oy, ox) = ((n / cols) * (h + 1), (n % cols) * (w + 1));
        for ch in 0..c {
            for i in 0..h {
                for j in 0..w {
                    data[ch * gh * gw + (oy + i) * gw + ox + j] = img.get(ch, i, j);
                }
            }
        }
    }
    write_png(path, &Image::new(c, gh, gw, data)?, BitDepth::Eight)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trips_on_the_depth_grid() {
        let dir = tempfile::tempdir().unwrap();
        let img = Image::from_fn(3, 5, 7, |c, i, j| ((c * 35 + i * 7 + j) % 256) as f64 / 255.0).unwrap();
        let p = dir.path().join("a.png");
        write_png(&p, &img, BitDepth::Eight).unwrap();
        let (back, depth) = read_image(&p).unwrap();
        assert_eq!(depth, BitDepth::Eight);
        assert_eq!(back, img);

        let gray = Image::from_fn(1, 4, 4, |_, i, j| (i * 4 + j) as f64 * 4000.0 / 65535.0).unwrap();
        let p16 = dir.path().join("b.png");
        write_png(&p16, &gray, BitDepth::Sixteen).unwrap();
        let (back, depth) = read_image(&p16).unwrap();
        assert_eq!(depth, BitDepth::Sixteen);
        assert_eq!(back, gray);
    }

    #[test]
    fn quantize_matches_file_contents() {
        let dir = tempfile::tempdir().unwrap();
        let img =
            Image::from_fn(3, 4, 4, |c, i, j| (c as f64 * 0.31 + i as f64 * 0.117 + j as f64 * 0.0413) % 1.0).unwrap();
        let p = dir.path().join("q.png");
        write_png(&p, &img, BitDepth::Eight).unwrap();
        assert_eq!(read_image(&p).unwrap().0, quantize(&img, BitDepth::Eight));
    }

    #[test]
    fn listing_is_sorted_and_filtered() {
        let dir = tempfile::tempdir().unwrap();
        let img = Image::filled(1, 2, 2, 0.5).unwrap();
        for name in ["b.png", "a.png", "c.PNG"] {
            write_png(&dir.path().join(name), &img, BitDepth::Eight).unwrap();
        }
        std::fs::write(dir.path().join("notes.txt"), "x").unwrap();
        let names: Vec<String> = list_images(dir.path())
            .unwrap()
            .iter()
            .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
            .collect();
        assert_eq!(names, ["a.png", "b.png", "c.PNG"]);
        write_png(&dir.path().join("d.png"), &Image::filled(1, 3, 2, 0.5).unwrap(), BitDepth::Eight).unwrap();
        assert!(load_dir(dir.path()).is_err());
    }

    #[test]
    fn grid_layout() {
        let dir = tempfile::tempdir().unwrap();
        let imgs: Vec<_> = (0..5).map(|n| Image::filled(3, 4, 4, n as f64 / 5.0).unwrap()).collect();
        let p = dir.path().join("g.png");
        write_grid(&p, &imgs, 3).unwrap();
        let (g, _) = read_image(&p).unwrap();
        assert_eq!((g.height(), g.width()), (9, 14));
        assert_eq!(g.get(0, 5, 5), (255.0f64 * 0.8).round() / 255.0);
        assert_eq!(g.get(0, 4, 0), 1.0);
    }
}
