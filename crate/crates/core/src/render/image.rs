use std::io::{BufReader, BufWriter};
use std::path::Path;

use crate::diff::Tensor;
use crate::error::{contract, Error, Result};

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn png_error(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Parse {
        offset: 0,
        detail: format!("{}: {e}", path.display()),
    }
}

/// Writes `(width * height) x 3` pixel rows as 8-bit RGB, clamping to `[0, 1]`.
pub fn write_png(path: &Path, image: &Tensor, width: usize, height: usize) -> Result<()> {
    if image.shape() != [width * height, 3] {
        return contract("write_png", format!("image {:?} is not {width}x{height} RGB", image.shape()));
    }
    let bytes: Vec<u8> = image.data().iter().map(|&v| to_byte(v)).collect();
    write_raw(path, &bytes, width, height, png::ColorType::Rgb)
}

/// Writes a binary mask as an 8-bit grayscale image (255 = set).
pub fn write_mask_png(path: &Path, mask: &[bool], width: usize, height: usize) -> Result<()> {
    if mask.len() != width * height {
        return contract("write_mask_png", format!("{} mask entries for {width}x{height}", mask.len()));
    }
    let bytes: Vec<u8> = mask.iter().map(|&m| if m { 255 } else { 0 }).collect();
    write_raw(path, &bytes, width, height, png::ColorType::Grayscale)
}

fn write_raw(path: &Path, bytes: &[u8], width: usize, height: usize, color: png::ColorType) -> Result<()> {
    let file = BufWriter::new(std::fs::File::create(path)?);
    let mut enc = png::Encoder::new(file, width as u32, height as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| png_error(path, e))?;
    writer.write_image_data(bytes).map_err(|e| png_error(path, e))?;
    writer.finish().map_err(|e| png_error(path, e))?;
    Ok(())
}

/// Reads any 8- or 16-bit PNG as `[0, 1]` RGB pixel rows plus `(width, height)`.
pub fn read_png(path: &Path) -> Result<(Tensor, usize, usize)> {
    let mut dec = png::Decoder::new(BufReader::new(std::fs::File::open(path)?));
    dec.set_transformations(png::Transformations::normalize_to_color8());
    let mut reader = dec.read_info().map_err(|e| png_error(path, e))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| png_error(path, "image too large"))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(|e| png_error(path, e))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Indexed => return Err(png_error(path, "unexpanded palette")),
    };
    let mut data = Vec::with_capacity(w * h * 3);
    for row in 0..h {
        let line = &buf[row * info.line_size..];
        for col in 0..w {
            let px = &line[col * channels..];
            for c in 0..3 {
                let v = if channels < 3 { px[0] } else { px[c] };
                data.push(f64::from(v) / 255.0);
            }
        }
    }
    Ok((Tensor::new(vec![w * h, 3], data)?, w, h))
}

/// Reads a mask image; any nonzero first channel counts as set.
pub fn read_mask_png(path: &Path) -> Result<(Vec<bool>, usize, usize)> {
    let (img, w, h) = read_png(path)?;
    Ok(((0..w * h).map(|p| img.at2(p, 0) > 0.0).collect(), w, h))
}
