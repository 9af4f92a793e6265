//! Image output helpers: PNG encoding and sample grids.

use std::path::Path;

use candle_core::Tensor;

use crate::error::{Error, Result};

fn to_u8(v: f32) -> u8 {
    (((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round()) as u8
}

/// Encodes a channel-major `3 × h × w` image in `[-1, 1]` as 8-bit RGB PNG bytes.
pub fn rgb_png_bytes(img: &[f32], h: usize, w: usize) -> Result<Vec<u8>> {
    if img.len() != 3 * h * w {
        return Err(Error::Shape(format!("expected {} values, got {}", 3 * h * w, img.len())));
    }
    let mut pixels = Vec::with_capacity(3 * h * w);
    for i in 0..h * w {
        for ch in 0..3 {
            pixels.push(to_u8(img[ch * h * w + i]));
        }
    }
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, w as u32, h as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header()?;
        writer.write_image_data(&pixels)?;
    }
    Ok(out)
}

pub fn write_rgb_png(path: &Path, img: &[f32], h: usize, w: usize) -> Result<()> {
    std::fs::write(path, rgb_png_bytes(img, h, w)?)?;
    Ok(())
}

/// Tiles a `(B, 3, r, r)` batch into a grid with `cols` columns, returning
/// the channel-major grid and its height and width.
pub fn grid(images: &Tensor, cols: usize) -> Result<(Vec<f32>, usize, usize)> {
    let (b, c, h, w) = images.dims4()?;
    if c != 3 {
        return Err(Error::Shape(format!("expected 3 channels, got {c}")));
    }
    let cols = cols.clamp(1, b.max(1));
    let rows = b.div_ceil(cols);
    let (gh, gw) = (rows * h, cols * w);
    let data: Vec<f32> = images.flatten_all()?.to_vec1()?;
    let mut out = vec![-1f32; 3 * gh * gw];
    for n in 0..b {
        let (oy, ox) = ((n / cols) * h, (n % cols) * w);
        for ch in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    out[ch * gh * gw + (oy + y) * gw + ox + x] = data[((n * 3 + ch) * h + y) * w + x];
                }
            }
        }
    }
    Ok((out, gh, gw))
}

pub fn write_grid_png(path: &Path, images: &Tensor, cols: usize) -> Result<()> {
    let (img, h, w) = grid(images, cols)?;
    write_rgb_png(path, &img, h, w)
}

/// Decodes an 8-bit RGB PNG back into channel-major `[-1, 1]` values.
pub fn read_rgb_png(bytes: &[u8]) -> Result<(Vec<f32>, usize, usize)> {
    let img = image::load_from_memory(bytes)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = vec![0f32; 3 * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        for ch in 0..3 {
            out[ch * h * w + y as usize * w + x as usize] = px[ch] as f32 / 127.5 - 1.0;
        }
    }
    Ok((out, h, w))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_within_quantization() {
        let img: Vec<f32> = (0..3 * 4 * 5).map(|i| (i as f32 / 30.0) - 1.0).collect();
        let bytes = rgb_png_bytes(&img, 4, 5).unwrap();
        let (back, h, w) = read_rgb_png(&bytes).unwrap();
        assert_eq!((h, w), (4, 5));
        for (a, b) in img.iter().zip(&back) {
            assert!((a - b).abs() <= 1.0 / 127.5);
        }
    }
}
