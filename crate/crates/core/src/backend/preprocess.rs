//! CLIP-style image preprocessing for pretrained backends.

use std::path::Path;

use image::imageops::FilterType;

use crate::error::{Error, Result};

pub const INPUT_SIZE: u32 = 224;
pub const CLIP_MEAN: [f32; 3] = [0.481_454_66, 0.457_827_5, 0.408_210_73];
pub const CLIP_STD: [f32; 3] = [0.268_629_54, 0.261_302_58, 0.275_777_11];

/// Decodes to RGB, resizes the short side to 224, centre-crops 224x224 and
/// normalises per channel. Returns a channel-major `3 x 224 x 224` tensor.
pub fn clip_preprocess(path: &Path) -> Result<Vec<f32>> {
    let img = image::open(path).map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    Ok(preprocess_rgb(&img.to_rgb8()))
}

pub fn preprocess_rgb(rgb: &image::RgbImage) -> Vec<f32> {
    let (w, h) = rgb.dimensions();
    let scale = INPUT_SIZE as f64 / w.min(h) as f64;
    let nw = ((w as f64 * scale).round() as u32).max(INPUT_SIZE);
    let nh = ((h as f64 * scale).round() as u32).max(INPUT_SIZE);
    let resized = image::imageops::resize(rgb, nw, nh, FilterType::CatmullRom);
    let x0 = (nw - INPUT_SIZE) / 2;
    let y0 = (nh - INPUT_SIZE) / 2;
    let plane = (INPUT_SIZE * INPUT_SIZE) as usize;
    let mut out = vec![0.0f32; 3 * plane];
    for y in 0..INPUT_SIZE {
        for x in 0..INPUT_SIZE {
            let px = resized.get_pixel(x0 + x, y0 + y);
            let i = (y * INPUT_SIZE + x) as usize;
            for c in 0..3 {
                out[c * plane + i] = (px[c] as f32 / 255.0 - CLIP_MEAN[c]) / CLIP_STD[c];
            }
        }
    }
    out
}
