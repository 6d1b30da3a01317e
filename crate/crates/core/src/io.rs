//! File formats: grayscale PFM for float data, binary PGM for masks and
//! previews, PNG previews, and JSON documents.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::image::Image;
use crate::loss::CostMap;
use crate::warp::DisparityMap;

/// Writes a grayscale little-endian PFM (scale -1). Rows are stored
/// bottom-to-top as the format prescribes.
pub fn write_pfm_raw(path: &Path, width: usize, height: usize, data: &[f64]) -> Result<()> {
    let mut buf = Vec::with_capacity(32 + data.len() * 4);
    write!(buf, "Pf\n{width} {height}\n-1.0\n")?;
    for i in (0..height).rev() {
        for v in &data[i * width..(i + 1) * width] {
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    fs::write(path, buf)?;
    Ok(())
}

fn header_token<R: BufRead>(r: &mut R) -> Result<String> {
    let mut tok = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        if r.read(&mut byte)? == 0 {
            break;
        }
        if byte[0].is_ascii_whitespace() {
            if tok.is_empty() {
                continue;
            }
            break;
        }
        tok.push(byte[0]);
    }
    if tok.is_empty() {
        return Err(Error::Format("truncated header".into()));
    }
    String::from_utf8(tok).map_err(|_| Error::Format("non-ascii header".into()))
}

fn parse<T: std::str::FromStr>(tok: &str, what: &str) -> Result<T> {
    tok.parse().map_err(|_| Error::Format(format!("bad {what} '{tok}'")))
}

/// Reads a grayscale PFM into row-major top-to-bottom order.
pub fn read_pfm_raw(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let mut r = BufReader::new(fs::File::open(path)?);
    let magic = header_token(&mut r)?;
    if magic != "Pf" {
        return Err(Error::Format(format!("{}: expected grayscale PFM, got '{magic}'", path.display())));
    }
    let width: usize = parse(&header_token(&mut r)?, "width")?;
    let height: usize = parse(&header_token(&mut r)?, "height")?;
    let scale: f64 = parse(&header_token(&mut r)?, "scale")?;
    if scale == 0.0 || !scale.is_finite() {
        return Err(Error::Format(format!("bad PFM scale {scale}")));
    }
    let little = scale < 0.0;
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() != width * height * 4 {
        return Err(Error::Format(format!(
            "{}: expected {} bytes of pixel data, found {}",
            path.display(),
            width * height * 4,
            bytes.len()
        )));
    }
    let mut data = vec![0.0; width * height];
    for (k, chunk) in bytes.chunks_exact(4).enumerate() {
        let b: [u8; 4] = chunk.try_into().unwrap();
        let v = if little { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) };
        let (row_from_bottom, col) = (k / width, k % width);
        data[(height - 1 - row_from_bottom) * width + col] = v as f64;
    }
    Ok((width, height, data))
}

pub fn write_image_pfm(path: &Path, img: &Image) -> Result<()> {
    write_pfm_raw(path, img.width(), img.height(), img.data())
}

pub fn read_image_pfm(path: &Path) -> Result<Image> {
    let (w, h, data) = read_pfm_raw(path)?;
    Image::new(w, h, data).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// Disparity maps store invalid pixels as +inf.
pub fn write_disparity_pfm(path: &Path, d: &DisparityMap) -> Result<()> {
    let data: Vec<f64> = d
        .values()
        .iter()
        .zip(d.valid())
        .map(|(v, ok)| if *ok { *v } else { f64::INFINITY })
        .collect();
    write_pfm_raw(path, d.width(), d.height(), &data)
}

pub fn read_disparity_pfm(path: &Path) -> Result<DisparityMap> {
    let (w, h, data) = read_pfm_raw(path)?;
    let valid: Vec<bool> = data.iter().map(|v| v.is_finite() && *v >= 0.0).collect();
    let values = data.iter().zip(&valid).map(|(v, ok)| if *ok { *v } else { 0.0 }).collect();
    DisparityMap::new(w, h, values, valid)
}

/// Cost maps store invalid pixels as +inf.
pub fn write_costmap_pfm(path: &Path, c: &CostMap) -> Result<()> {
    let data: Vec<f64> = c
        .cost()
        .iter()
        .zip(c.valid())
        .map(|(v, ok)| if *ok { *v } else { f64::INFINITY })
        .collect();
    write_pfm_raw(path, c.width(), c.height(), &data)
}

/// Binary 8-bit PGM.
pub fn write_pgm(path: &Path, width: usize, height: usize, bytes: &[u8]) -> Result<()> {
    let mut buf = Vec::with_capacity(20 + bytes.len());
    write!(buf, "P5\n{width} {height}\n255\n")?;
    buf.extend_from_slice(bytes);
    fs::write(path, buf)?;
    Ok(())
}

pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let mut r = BufReader::new(fs::File::open(path)?);
    if header_token(&mut r)? != "P5" {
        return Err(Error::Format(format!("{}: expected binary PGM", path.display())));
    }
    let width: usize = parse(&header_token(&mut r)?, "width")?;
    let height: usize = parse(&header_token(&mut r)?, "height")?;
    let maxval: usize = parse(&header_token(&mut r)?, "maxval")?;
    if maxval != 255 {
        return Err(Error::Format(format!("unsupported PGM maxval {maxval}")));
    }
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() != width * height {
        return Err(Error::Format(format!("{}: truncated PGM data", path.display())));
    }
    Ok((width, height, bytes))
}

/// Masks as PGM, 255 for set pixels.
pub fn write_mask_pgm(path: &Path, width: usize, height: usize, mask: &[bool]) -> Result<()> {
    let bytes: Vec<u8> = mask.iter().map(|m| if *m { 255 } else { 0 }).collect();
    write_pgm(path, width, height, &bytes)
}

pub fn read_mask_pgm(path: &Path) -> Result<(usize, usize, Vec<bool>)> {
    let (w, h, bytes) = read_pgm(path)?;
    Ok((w, h, bytes.iter().map(|b| *b >= 128).collect()))
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// 8-bit preview with a linear clamp to `[0, 1]`.
pub fn write_preview_pgm(path: &Path, img: &Image) -> Result<()> {
    let bytes: Vec<u8> = img.data().iter().map(|v| to_u8(*v)).collect();
    write_pgm(path, img.width(), img.height(), &bytes)
}

pub fn write_preview_png(path: &Path, img: &Image) -> Result<()> {
    let bytes: Vec<u8> = img.data().iter().map(|v| to_u8(*v)).collect();
    let buf = image::GrayImage::from_raw(img.width() as u32, img.height() as u32, bytes)
        .ok_or_else(|| Error::Format("image buffer size".into()))?;
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n")?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}
