//! Image and mask decoding, per-image standardization, and indexed-colour
//! label-map files.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use image::DynamicImage;

use crate::autograd::tensor::Tensor;
use crate::error::{Error, Result};
use crate::labels::LabelMap;
use crate::metrics::BinaryMask;
use crate::scalar::Scalar;

/// File extensions accepted as inputs.
pub const IMAGE_EXTENSIONS: [&str; 5] = ["png", "bmp", "pgm", "ppm", "pnm"];

/// Standardization guard added to the per-channel standard deviation.
pub const STD_EPS: f64 = 1e-8;

/// A decoded input image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSample {
    /// File stem.
    pub id: String,
    pub height: usize,
    pub width: usize,
    /// 1 for grayscale, 3 for colour.
    pub channels: usize,
    /// Interleaved `H×W×C` values.
    pub pixels: Vec<f64>,
    pub gt: Option<BinaryMask>,
    pub path: PathBuf,
}

impl ImageSample {
    pub fn at(&self, i: usize, j: usize, c: usize) -> f64 {
        self.pixels[(i * self.width + j) * self.channels + c]
    }
}

fn image_error(path: &Path, reason: impl ToString) -> Error {
    Error::Image { path: path.display().to_string(), reason: reason.to_string() }
}

fn has_image_extension(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

fn decode(path: &Path) -> Result<DynamicImage> {
    if !has_image_extension(path) {
        return Err(image_error(path, "unsupported format (expected png, bmp, pgm or ppm)"));
    }
    image::open(path).map_err(|e| image_error(path, e))
}

/// Grayscale sources keep one channel; everything else is read as RGB.
fn to_samples(img: &DynamicImage) -> (usize, usize, usize, Vec<f64>) {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let scale = |v: u8| f64::from(v) / 255.0;
    match img {
        DynamicImage::ImageLuma8(_) | DynamicImage::ImageLumaA8(_) | DynamicImage::ImageLuma16(_) | DynamicImage::ImageLumaA16(_) => {
            (h, w, 1, img.to_luma8().into_raw().into_iter().map(scale).collect())
        }
        _ => (h, w, 3, img.to_rgb8().into_raw().into_iter().map(scale).collect()),
    }
}

/// Reads a ground-truth mask, foreground where the intensity is ≥ 0.5.
pub fn load_mask(path: &Path) -> Result<BinaryMask> {
    let img = decode(path)?;
    let (h, w) = (img.height() as usize, img.width() as usize);
    let mask = img.to_luma8().into_raw().into_iter().map(|v| f64::from(v) / 255.0 >= 0.5).collect();
    BinaryMask::new(h, w, mask)
}

/// The sibling mask of `image`: same directory, stem plus `suffix`, any
/// accepted extension (the image's own extension is tried first).
pub fn find_mask(image: &Path, suffix: &str) -> Option<PathBuf> {
    let stem = image.file_stem()?.to_str()?;
    let dir = image.parent().unwrap_or_else(|| Path::new(""));
    let own = image.extension().and_then(|e| e.to_str()).map(str::to_string);
    own.into_iter()
        .chain(IMAGE_EXTENSIONS.iter().map(|e| e.to_string()))
        .map(|ext| dir.join(format!("{stem}{suffix}.{ext}")))
        .find(|p| p.is_file())
}

/// Decodes an image, scales it to `[0, 1]`, and attaches its sibling mask
/// when `mask_suffix` is given and such a file exists.
pub fn load_image(path: &Path, mask_suffix: Option<&str>) -> Result<ImageSample> {
    let img = decode(path)?;
    let (height, width, channels, pixels) = to_samples(&img);
    let gt = match mask_suffix.and_then(|s| find_mask(path, s)) {
        Some(mask_path) => {
            let mask = load_mask(&mask_path)?;
            if (mask.height, mask.width) != (height, width) {
                return Err(image_error(
                    &mask_path,
                    format!("mask is {}x{} but image is {height}x{width}", mask.height, mask.width),
                ));
            }
            Some(mask)
        }
        None => None,
    };
    let id = path.file_stem().and_then(|s| s.to_str()).unwrap_or("image").to_string();
    Ok(ImageSample { id, height, width, channels, pixels, gt, path: path.to_path_buf() })
}

/// Input images in `dir`, sorted by name, skipping files whose stem ends in
/// `mask_suffix`.
pub fn list_images(dir: &Path, mask_suffix: Option<&str>) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if !path.is_file() || !has_image_extension(&path) {
            continue;
        }
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("");
        if mask_suffix.is_some_and(|s| !s.is_empty() && stem.ends_with(s)) {
            continue;
        }
        out.push(path);
    }
    out.sort();
    Ok(out)
}

/// Per-channel standardization `(x − mean) / (std + 1e-8)` into a
/// `1×C×H×W` tensor.
pub fn preprocess<T: Scalar>(sample: &ImageSample) -> Result<Tensor<T>> {
    let (h, w, c) = (sample.height, sample.width, sample.channels);
    let n = (h * w) as f64;
    let mut data = vec![T::zero(); c * h * w];
    for ch in 0..c {
        let values = || (0..h * w).map(|p| sample.pixels[p * c + ch]);
        let mean = values().sum::<f64>() / n;
        let var = values().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let denom = var.sqrt() + STD_EPS;
        for (p, v) in values().enumerate() {
            data[ch * h * w + p] = T::lit((v - mean) / denom);
        }
    }
    Tensor::new(&[1, c, h, w], data)
}

/// RGB colour of cluster `id`: spread around the hue circle by the golden
/// ratio, alternating brightness so neighbouring ids stay distinct.
pub fn palette_color(id: usize) -> [u8; 3] {
    let hue = (id as f64 * 0.618_033_988_749_895).fract() * 6.0;
    let value = if id.is_multiple_of(2) { 1.0 } else { 0.7 };
    let sector = hue.floor();
    let f = hue - sector;
    let (p, q, t) = (value * 0.25, value * (1.0 - 0.75 * f), value * (0.25 + 0.75 * f));
    let (r, g, b) = match sector as u8 {
        0 => (value, t, p),
        1 => (q, value, p),
        2 => (p, value, t),
        3 => (p, q, value),
        4 => (t, p, value),
        _ => (value, p, q),
    };
    [r, g, b].map(|c| (c * 255.0).round() as u8)
}

/// Writes the label map as an 8-bit indexed PNG with the fixed palette.
pub fn write_label_png(path: &Path, labels: &LabelMap) -> Result<()> {
    if let Some(bad) = labels.labels.iter().find(|&&l| l > 255) {
        return Err(Error::Contract(format!("label {bad} does not fit an 8-bit palette")));
    }
    let file = BufWriter::new(File::create(path)?);
    let mut enc = png::Encoder::new(file, labels.width as u32, labels.height as u32);
    enc.set_color(png::ColorType::Indexed);
    enc.set_depth(png::BitDepth::Eight);
    let palette: Vec<u8> = (0..256).flat_map(palette_color).collect();
    enc.set_palette(palette);
    let mut writer = enc.write_header().map_err(|e| image_error(path, e))?;
    let data: Vec<u8> = labels.labels.iter().map(|&l| l as u8).collect();
    writer.write_image_data(&data).map_err(|e| image_error(path, e))?;
    writer.finish().map_err(|e| image_error(path, e))
}

/// Reads back the palette indices of an indexed PNG written by
/// [`write_label_png`].
pub fn read_label_png(path: &Path) -> Result<LabelMap> {
    let mut decoder = png::Decoder::new(File::open(path)?);
    decoder.set_transformations(png::Transformations::IDENTITY);
    let mut reader = decoder.read_info().map_err(|e| image_error(path, e))?;
    let info = reader.info();
    if info.color_type != png::ColorType::Indexed || info.bit_depth != png::BitDepth::Eight {
        return Err(image_error(path, "label maps must be 8-bit indexed PNGs"));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let mut buf = vec![0u8; reader.output_buffer_size()];
    let frame = reader.next_frame(&mut buf).map_err(|e| image_error(path, e))?;
    let stride = frame.line_size;
    let labels = (0..h).flat_map(|i| buf[i * stride..i * stride + w].iter().map(|&v| u32::from(v))).collect();
    LabelMap::new(h, w, labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(h: usize, w: usize, c: usize, pixels: Vec<f64>) -> ImageSample {
        ImageSample { id: "t".into(), height: h, width: w, channels: c, pixels, gt: None, path: PathBuf::new() }
    }

    #[test]
    fn constant_image_standardizes_to_zero() {
        let t: Tensor<f64> = preprocess(&sample(2, 3, 3, vec![0.4; 18])).unwrap();
        assert_eq!(t.shape(), &[1, 3, 2, 3]);
        assert!(t.data().iter().all(|&v| v.abs() < 1e-6));
    }

    #[test]
    fn balanced_binary_image_maps_to_unit_values() {
        let t: Tensor<f64> = preprocess(&sample(2, 2, 1, vec![0.0, 1.0, 1.0, 0.0])).unwrap();
        for (&v, want) in t.data().iter().zip([-1.0, 1.0, 1.0, -1.0]) {
            assert!((v - want).abs() < 1e-6);
        }
    }

    #[test]
    fn channels_are_standardized_independently() {
        let pixels: Vec<f64> = (0..12).map(|i| (i as f64 * 0.37).sin().abs()).collect();
        let t: Tensor<f64> = preprocess(&sample(2, 2, 3, pixels)).unwrap();
        for ch in 0..3 {
            let plane = &t.data()[ch * 4..(ch + 1) * 4];
            assert!(plane.iter().sum::<f64>().abs() / 4.0 < 1e-10);
        }
    }

    #[test]
    fn palette_is_deterministic_and_varied() {
        assert_eq!(palette_color(5), palette_color(5));
        let colors: std::collections::HashSet<_> = (0..256).map(palette_color).collect();
        assert!(colors.len() > 200);
    }
}
