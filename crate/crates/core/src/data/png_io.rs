use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn png_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::ingestion(format!("png: {e}"), vec![path.to_path_buf()])
}

fn write_png(path: &Path, w: usize, h: usize, color: png::ColorType, depth: png::BitDepth, data: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(color);
    enc.set_depth(depth);
    let mut writer = enc.write_header().map_err(|e| png_err(path, e))?;
    writer.write_image_data(data).map_err(|e| png_err(path, e))?;
    writer.finish().map_err(|e| png_err(path, e))
}

struct Decoded {
    w: usize,
    h: usize,
    color: png::ColorType,
    depth: png::BitDepth,
    bytes: Vec<u8>,
}

fn read_png(path: &Path) -> Result<Decoded> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = png::Decoder::new(BufReader::new(file))
        .read_info()
        .map_err(|e| png_err(path, e))?;
    let mut buf = vec![0; reader.output_buffer_size().ok_or_else(|| png_err(path, "image too large"))?];
    let info = reader.next_frame(&mut buf).map_err(|e| png_err(path, e))?;
    buf.truncate(info.buffer_size());
    Ok(Decoded {
        w: info.width as usize,
        h: info.height as usize,
        color: info.color_type,
        depth: info.bit_depth,
        bytes: buf,
    })
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn to_u16(v: f64) -> u16 {
    (v.clamp(0.0, 1.0) * 65535.0).round() as u16
}

/// 8-bit RGB from a `[3, H, W]` tensor in `[0, 1]`.
pub fn write_rgb(path: &Path, rgb: &Tensor) -> Result<()> {
    let (h, w) = rgb.hw();
    let plane = h * w;
    let d = rgb.data();
    let bytes: Vec<u8> = (0..plane).flat_map(|i| [0, 1, 2].map(|c| to_u8(d[c * plane + i]))).collect();
    write_png(path, w, h, png::ColorType::Rgb, png::BitDepth::Eight, &bytes)
}

pub fn read_rgb(path: &Path) -> Result<Tensor> {
    let img = read_png(path)?;
    if img.color != png::ColorType::Rgb || img.depth != png::BitDepth::Eight {
        return Err(png_err(path, "expected 8-bit RGB"));
    }
    let plane = img.h * img.w;
    Ok(Tensor::from_fn(&[3, img.h, img.w], |i| {
        let (c, p) = (i / plane, i % plane);
        f64::from(img.bytes[p * 3 + c]) / 255.0
    }))
}

/// 16-bit grayscale from a `[1, H, W]` tensor in `[0, 1]`.
pub fn write_depth(path: &Path, depth: &Tensor) -> Result<()> {
    let (h, w) = depth.hw();
    let bytes: Vec<u8> = depth.data().iter().flat_map(|&v| to_u16(v).to_be_bytes()).collect();
    write_png(path, w, h, png::ColorType::Grayscale, png::BitDepth::Sixteen, &bytes)
}

pub fn read_depth(path: &Path) -> Result<Tensor> {
    let img = read_png(path)?;
    if img.color != png::ColorType::Grayscale || img.depth != png::BitDepth::Sixteen {
        return Err(png_err(path, "expected 16-bit grayscale"));
    }
    Ok(Tensor::from_fn(&[1, img.h, img.w], |i| {
        f64::from(u16::from_be_bytes([img.bytes[2 * i], img.bytes[2 * i + 1]])) / 65535.0
    }))
}

/// 1-bit grayscale; entries above 0.5 are set.
pub fn write_mask(path: &Path, mask: &Tensor) -> Result<()> {
    let (h, w) = mask.hw();
    let stride = w.div_ceil(8);
    let mut bytes = vec![0u8; stride * h];
    for y in 0..h {
        for x in 0..w {
            if mask.data()[y * w + x] > 0.5 {
                bytes[y * stride + x / 8] |= 0x80 >> (x % 8);
            }
        }
    }
    write_png(path, w, h, png::ColorType::Grayscale, png::BitDepth::One, &bytes)
}

pub fn read_mask(path: &Path) -> Result<Tensor> {
    let img = read_png(path)?;
    if img.color != png::ColorType::Grayscale {
        return Err(png_err(path, "expected grayscale mask"));
    }
    let (h, w) = (img.h, img.w);
    let bit = |y: usize, x: usize| -> bool {
        match img.depth {
            png::BitDepth::One => img.bytes[y * w.div_ceil(8) + x / 8] & (0x80 >> (x % 8)) != 0,
            png::BitDepth::Eight => img.bytes[y * w + x] > 127,
            _ => false,
        }
    };
    if !matches!(img.depth, png::BitDepth::One | png::BitDepth::Eight) {
        return Err(png_err(path, "expected 1-bit or 8-bit mask"));
    }
    Ok(Tensor::from_fn(&[1, h, w], |i| f64::from(bit(i / w, i % w))))
}
