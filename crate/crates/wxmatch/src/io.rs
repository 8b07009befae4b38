//! Image files: 8-bit RGB PNG and the lossless raw float format.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use wxmatch_core::Image;

use crate::error::{Error, Result};

const RAW_MAGIC: &[u8; 4] = b"MWIM";

/// Quantizes to 8 bits and writes an RGB PNG.
pub fn write_png(path: &Path, img: &Image) -> Result<()> {
    if img.channels() != 3 {
        return Err(Error::Png {
            path: path.into(),
            reason: format!("PNG output needs 3 channels, image has {}", img.channels()),
        });
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), img.width() as u32, img.height() as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let png_err = |e: png::EncodingError| Error::Png {
        path: path.into(),
        reason: e.to_string(),
    };
    let mut w = enc.write_header().map_err(png_err)?;
    let bytes: Vec<u8> = img.data().iter().map(|&v| quantize(v)).collect();
    w.write_image_data(&bytes).map_err(png_err)?;
    w.finish().map_err(png_err)
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Reads an 8-bit RGB PNG into `[0, 1]` intensities.
pub fn read_png(path: &Path) -> Result<Image> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let png_err = |reason: String| Error::Png {
        path: path.into(),
        reason,
    };
    let dec = png::Decoder::new(BufReader::new(file));
    let mut reader = dec.read_info().map_err(|e| png_err(e.to_string()))?;
    let info = reader.info();
    if info.bit_depth != png::BitDepth::Eight || info.color_type != png::ColorType::Rgb {
        return Err(png_err(format!(
            "unsupported PNG layout {:?}/{:?}, need 8-bit RGB",
            info.color_type, info.bit_depth
        )));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| png_err("image too large".into()))?;
    let mut buf = vec![0u8; size];
    let frame = reader.next_frame(&mut buf).map_err(|e| png_err(e.to_string()))?;
    let data = buf[..frame.buffer_size()].iter().map(|&b| b as f32 / 255.0).collect();
    Ok(Image::from_vec(h, w, 3, data)?)
}

/// Writes the raw float format: `MWIM`, u32 LE height, width, channels, f32 LE data.
pub fn write_raw(path: &Path, img: &Image) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut put = |bytes: &[u8]| w.write_all(bytes).map_err(|e| Error::io(path, e));
    put(RAW_MAGIC)?;
    for d in [img.height(), img.width(), img.channels()] {
        put(&(d as u32).to_le_bytes())?;
    }
    let mut body = Vec::with_capacity(img.data().len() * 4);
    for v in img.data() {
        body.extend_from_slice(&v.to_le_bytes());
    }
    put(&body)?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_raw(path: &Path) -> Result<Image> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    if bytes.len() < 16 || &bytes[..4] != RAW_MAGIC {
        return Err(Error::format(path, "missing MWIM header"));
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    let (h, w, c) = (dim(0), dim(1), dim(2));
    let n = h
        .checked_mul(w)
        .and_then(|v| v.checked_mul(c))
        .ok_or_else(|| Error::format(path, "dimensions overflow"))?;
    if bytes.len() != 16 + 4 * n {
        return Err(Error::format(
            path,
            format!("{h}x{w}x{c} needs {} data bytes, found {}", 4 * n, bytes.len() - 16),
        ));
    }
    let data = bytes[16..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    Ok(Image::from_vec(h, w, c, data)?)
}

/// Dispatches on the extension: `.png` or `.mwim`.
pub fn read_image(path: &Path) -> Result<Image> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("png") => read_png(path),
        Some("mwim") => read_raw(path),
        _ => Err(Error::format(path, "unknown image extension (use .png or .mwim)")),
    }
}

pub fn write_image(path: &Path, img: &Image) -> Result<()> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("png") => write_png(path, img),
        Some("mwim") => write_raw(path, img),
        _ => Err(Error::format(path, "unknown image extension (use .png or .mwim)")),
    }
}
