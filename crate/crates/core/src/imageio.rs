//! Minimal PNG reading/writing for grayscale slices, binary masks, and RGB
//! figures.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use png::{BitDepth, ColorType};

use crate::error::{Error, Result};

/// Decoded grayscale image with samples widened to `u16`.
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub bit_depth: u8,
    pub samples: Vec<u16>,
}

pub fn read_gray(path: &Path) -> Result<GrayImage> {
    let decode_err = |message: String| Error::Decode { path: path.to_path_buf(), message };
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let decoder = png::Decoder::new(BufReader::new(file));
    let mut reader = decoder.read_info().map_err(|e| decode_err(e.to_string()))?;
    let size = reader.output_buffer_size().ok_or_else(|| decode_err("image too large".into()))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(|e| decode_err(e.to_string()))?;
    if info.color_type != ColorType::Grayscale {
        return Err(decode_err(format!("expected grayscale, got {:?}", info.color_type)));
    }
    let (width, height) = (info.width as usize, info.height as usize);
    let samples: Vec<u16> = match info.bit_depth {
        BitDepth::Eight => buf[..width * height].iter().map(|&b| u16::from(b)).collect(),
        BitDepth::Sixteen => buf[..width * height * 2].chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect(),
        other => return Err(decode_err(format!("unsupported bit depth {other:?}"))),
    };
    let bit_depth = if info.bit_depth == BitDepth::Eight { 8 } else { 16 };
    Ok(GrayImage { width, height, bit_depth, samples })
}

fn write_png(path: &Path, width: usize, height: usize, color: ColorType, depth: BitDepth, data: &[u8]) -> Result<()> {
    let encode_err = |message: String| Error::Encode { path: path.to_path_buf(), message };
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    encoder.set_color(color);
    encoder.set_depth(depth);
    let mut writer = encoder.write_header().map_err(|e| encode_err(e.to_string()))?;
    writer.write_image_data(data).map_err(|e| encode_err(e.to_string()))?;
    writer.finish().map_err(|e| encode_err(e.to_string()))
}

pub fn write_gray16(path: &Path, width: usize, height: usize, samples: &[u16]) -> Result<()> {
    let bytes: Vec<u8> = samples.iter().flat_map(|v| v.to_be_bytes()).collect();
    write_png(path, width, height, ColorType::Grayscale, BitDepth::Sixteen, &bytes)
}

pub fn write_gray8(path: &Path, width: usize, height: usize, samples: &[u8]) -> Result<()> {
    write_png(path, width, height, ColorType::Grayscale, BitDepth::Eight, samples)
}

pub fn write_rgb8(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    write_png(path, width, height, ColorType::Rgb, BitDepth::Eight, rgb)
}

/// Decodes an 8-bit RGB PNG into `(width, height, bytes)`.
pub fn read_rgb8(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let decode_err = |message: String| Error::Decode { path: path.to_path_buf(), message };
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = png::Decoder::new(BufReader::new(file)).read_info().map_err(|e| decode_err(e.to_string()))?;
    let size = reader.output_buffer_size().ok_or_else(|| decode_err("image too large".into()))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(|e| decode_err(e.to_string()))?;
    if info.color_type != ColorType::Rgb || info.bit_depth != BitDepth::Eight {
        return Err(decode_err("expected 8-bit RGB".into()));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    buf.truncate(w * h * 3);
    Ok((w, h, buf))
}
