//! Image file I/O: 8-bit sRGB PNG, single-channel masks, and PFM floating
//! point maps (used for normal maps and linear renders).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use image::{GrayImage, ImageReader, RgbImage};
use nalgebra::Vector3;

use crate::envlight::Rgb;
use crate::error::{Error, Result};

pub fn srgb_encode(linear: f64) -> f64 {
    let l = linear.clamp(0.0, 1.0);
    if l <= 0.003_130_8 {
        12.92 * l
    } else {
        1.055 * l.powf(1.0 / 2.4) - 0.055
    }
}

pub fn srgb_decode(encoded: f64) -> f64 {
    let e = encoded.clamp(0.0, 1.0);
    if e <= 0.040_45 {
        e / 12.92
    } else {
        ((e + 0.055) / 1.055).powf(2.4)
    }
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes linear radiance as an 8-bit sRGB-encoded PNG.
pub fn write_png_rgb(path: &Path, width: usize, height: usize, rgb: &[Rgb]) -> Result<()> {
    if rgb.len() != width * height {
        return Err(Error::validation("pixel count does not match dimensions"));
    }
    let mut img = RgbImage::new(width as u32, height as u32);
    for (i, c) in rgb.iter().enumerate() {
        let x = (i % width) as u32;
        let y = (i / width) as u32;
        img.put_pixel(
            x,
            y,
            image::Rgb([
                to_u8(srgb_encode(c.x)),
                to_u8(srgb_encode(c.y)),
                to_u8(srgb_encode(c.z)),
            ]),
        );
    }
    img.save(path)?;
    Ok(())
}

/// Reads an sRGB PNG back into linear radiance.
pub fn read_png_rgb(path: &Path) -> Result<(usize, usize, Vec<Rgb>)> {
    let img = ImageReader::open(path)
        .map_err(|e| Error::io(path.display().to_string(), e))?
        .decode()?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let mut out = Vec::with_capacity((w * h) as usize);
    for p in img.pixels() {
        out.push(Rgb::new(
            srgb_decode(p.0[0] as f64 / 255.0),
            srgb_decode(p.0[1] as f64 / 255.0),
            srgb_decode(p.0[2] as f64 / 255.0),
        ));
    }
    Ok((w as usize, h as usize, out))
}

/// Binary mask as a grayscale PNG (255 inside, 0 outside).
pub fn write_png_mask(path: &Path, width: usize, height: usize, mask: &[bool]) -> Result<()> {
    if mask.len() != width * height {
        return Err(Error::validation("mask length does not match dimensions"));
    }
    let mut img = GrayImage::new(width as u32, height as u32);
    for (i, m) in mask.iter().enumerate() {
        img.put_pixel(
            (i % width) as u32,
            (i / width) as u32,
            image::Luma([if *m { 255 } else { 0 }]),
        );
    }
    img.save(path)?;
    Ok(())
}

pub fn read_png_mask(path: &Path) -> Result<(usize, usize, Vec<bool>)> {
    let img = ImageReader::open(path)
        .map_err(|e| Error::io(path.display().to_string(), e))?
        .decode()?
        .to_luma8();
    let (w, h) = img.dimensions();
    let out = img.pixels().map(|p| p.0[0] >= 128).collect();
    Ok((w as usize, h as usize, out))
}

/// Writes a 3-channel PFM (little-endian, scale -1.0, rows bottom-up).
pub fn write_pfm_rgb(path: &Path, width: usize, height: usize, rgb: &[Vector3<f64>]) -> Result<()> {
    if rgb.len() != width * height {
        return Err(Error::validation("pixel count does not match dimensions"));
    }
    let file = File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path.display().to_string(), e);
    write!(w, "PF\n{width} {height}\n-1.0\n").map_err(io)?;
    for row in (0..height).rev() {
        for col in 0..width {
            let c = &rgb[row * width + col];
            for v in [c.x, c.y, c.z] {
                w.write_all(&(v as f32).to_le_bytes()).map_err(io)?;
            }
        }
    }
    Ok(())
}

pub fn read_pfm_rgb(path: &Path) -> Result<(usize, usize, Vec<Vector3<f64>>)> {
    let file = File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut r = BufReader::new(file);
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut lines_end = 0;
    let mut newlines = 0;
    for (i, b) in bytes.iter().enumerate() {
        if *b == b'\n' {
            newlines += 1;
            if newlines == 3 {
                lines_end = i + 1;
                break;
            }
        }
    }
    let header = std::str::from_utf8(&bytes[..lines_end])
        .map_err(|_| Error::validation("pfm header is not utf-8"))?;
    let mut it = header.lines();
    let magic = it.next().unwrap_or("");
    if magic != "PF" {
        return Err(Error::validation(format!("bad pfm magic: {magic}")));
    }
    let dims = it.next().unwrap_or("");
    let mut d = dims.split_whitespace();
    let width: usize = d
        .next()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::validation("bad pfm width"))?;
    let height: usize = d
        .next()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::validation("bad pfm height"))?;
    let scale: f64 = it
        .next()
        .and_then(|s| s.trim().parse().ok())
        .ok_or_else(|| Error::validation("bad pfm scale"))?;
    if scale >= 0.0 {
        return Err(Error::validation("only little-endian pfm supported"));
    }
    let expected = width * height * 3 * 4;
    let payload = &bytes[lines_end..];
    if payload.len() != expected {
        return Err(Error::validation(format!(
            "pfm payload is {} bytes, expected {expected}",
            payload.len()
        )));
    }
    let mut out = vec![Vector3::zeros(); width * height];
    let mut off = 0;
    for row in (0..height).rev() {
        for col in 0..width {
            let mut v = [0.0f64; 3];
            for ch in &mut v {
                let b: [u8; 4] = payload[off..off + 4].try_into().unwrap();
                *ch = f32::from_le_bytes(b) as f64;
                off += 4;
            }
            out[row * width + col] = Vector3::new(v[0], v[1], v[2]);
        }
    }
    Ok((width, height, out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn srgb_transfer_round_trips() {
        for i in 0..=255u32 {
            let e = i as f64 / 255.0;
            let back = srgb_encode(srgb_decode(e));
            assert!((back - e).abs() < 1e-12);
        }
        assert_eq!(srgb_encode(0.0), 0.0);
        assert!((srgb_encode(1.0) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn png_round_trip_is_bit_exact_on_quantized_values() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("img.png");
        let w = 9;
        let h = 5;
        let rgb: Vec<Rgb> = (0..w * h)
            .map(|i| {
                // exactly representable values: decode an 8-bit code
                Rgb::new(
                    srgb_decode((i % 256) as f64 / 255.0),
                    srgb_decode((i * 7 % 256) as f64 / 255.0),
                    srgb_decode((i * 13 % 256) as f64 / 255.0),
                )
            })
            .collect();
        write_png_rgb(&path, w, h, &rgb).unwrap();
        let (rw, rh, back) = read_png_rgb(&path).unwrap();
        assert_eq!((rw, rh), (w, h));
        for (a, b) in rgb.iter().zip(&back) {
            assert!((a - b).amax() < 1e-12);
        }
        // and re-writing yields byte-identical files
        let path2 = dir.path().join("img2.png");
        write_png_rgb(&path2, w, h, &back).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn mask_round_trips() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("mask.png");
        let mask: Vec<bool> = (0..24).map(|i| i % 3 == 0).collect();
        write_png_mask(&path, 6, 4, &mask).unwrap();
        let (w, h, back) = read_png_mask(&path).unwrap();
        assert_eq!((w, h), (6, 4));
        assert_eq!(mask, back);
    }

    #[test]
    fn pfm_round_trips_bit_exactly() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("n.pfm");
        let w = 4;
        let h = 3;
        let data: Vec<Vector3<f64>> = (0..w * h)
            .map(|i| {
                Vector3::new(
                    (i as f32 * 0.25 - 1.0) as f64,
                    (i as f32 * -0.125) as f64,
                    ((i * i) as f32).sqrt() as f64,
                )
            })
            .collect();
        write_pfm_rgb(&path, w, h, &data).unwrap();
        let (rw, rh, back) = read_pfm_rgb(&path).unwrap();
        assert_eq!((rw, rh), (w, h));
        assert_eq!(data, back);
    }

    #[test]
    fn pfm_rejects_bad_headers() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.pfm");
        std::fs::write(&path, b"Pf\n2 2\n-1.0\n\0\0\0\0").unwrap();
        assert!(read_pfm_rgb(&path).is_err());
        let path2 = dir.path().join("bad2.pfm");
        std::fs::write(&path2, b"PF\n2 2\n1.0\n").unwrap();
        assert!(read_pfm_rgb(&path2).is_err());
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let dir = tempdir().unwrap();
        assert!(write_png_rgb(&dir.path().join("x.png"), 2, 2, &[Rgb::zeros()]).is_err());
        assert!(write_png_mask(&dir.path().join("m.png"), 2, 2, &[true]).is_err());
        assert!(write_pfm_rgb(&dir.path().join("p.pfm"), 2, 2, &[Vector3::zeros()]).is_err());
    }
}
