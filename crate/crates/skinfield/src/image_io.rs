//! 8-bit PNG images and masks.

use std::path::Path;

use image::{GrayImage, RgbImage};

pub fn quantize(c: f32) -> u8 {
    (c.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn save_rgb(path: &Path, width: u32, height: u32, pixels: &[[f32; 3]]) -> Result<(), String> {
    let raw = pixels.iter().flat_map(|p| p.map(quantize)).collect();
    let img = RgbImage::from_raw(width, height, raw).ok_or("pixel count does not match the image size")?;
    img.save(path).map_err(|e| e.to_string())
}

pub fn save_mask(path: &Path, width: u32, height: u32, mask: &[bool]) -> Result<(), String> {
    let raw = mask.iter().map(|m| if *m { 255 } else { 0 }).collect();
    let img = GrayImage::from_raw(width, height, raw).ok_or("pixel count does not match the image size")?;
    img.save(path).map_err(|e| e.to_string())
}

fn check_size(path: &Path, (w, h): (u32, u32), width: u32, height: u32) -> Result<(), String> {
    if (w, h) != (width, height) {
        return Err(format!("{}: {w}x{h} image, expected {width}x{height}", path.display()));
    }
    Ok(())
}

pub fn load_rgb(path: &Path, width: u32, height: u32) -> Result<Vec<[f32; 3]>, String> {
    let img = image::open(path).map_err(|e| e.to_string())?.to_rgb8();
    check_size(path, img.dimensions(), width, height)?;
    Ok(img.pixels().map(|p| p.0.map(|c| c as f32 / 255.0)).collect())
}

/// Pixels at or above half intensity are foreground.
pub fn load_mask(path: &Path, width: u32, height: u32) -> Result<Vec<bool>, String> {
    let img = image::open(path).map_err(|e| e.to_string())?.to_luma8();
    check_size(path, img.dimensions(), width, height)?;
    Ok(img.pixels().map(|p| p.0[0] >= 128).collect())
}
