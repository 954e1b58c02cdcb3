//! Binary PGM (P5, maxval 255) codec plus PNG reading.

use std::path::Path;

use super::GrayImage;
use crate::error::{Error, Result};

fn skip_ws_and_comments(data: &[u8], mut pos: usize) -> usize {
    loop {
        while pos < data.len() && data[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < data.len() && data[pos] == b'#' {
            while pos < data.len() && data[pos] != b'\n' {
                pos += 1;
            }
        } else {
            return pos;
        }
    }
}

fn read_uint(data: &[u8], pos: usize) -> Result<(usize, usize)> {
    let pos = skip_ws_and_comments(data, pos);
    let end = data[pos..]
        .iter()
        .position(|b| !b.is_ascii_digit())
        .map_or(data.len(), |n| pos + n);
    if end == pos {
        return Err(Error::format("expected an unsigned integer in PGM header"));
    }
    let text = std::str::from_utf8(&data[pos..end]).expect("ascii digits");
    let value = text
        .parse()
        .map_err(|_| Error::format(format!("PGM header value `{text}` out of range")))?;
    Ok((value, end))
}

pub fn decode_pgm(data: &[u8]) -> Result<GrayImage> {
    if data.len() < 2 || &data[..2] != b"P5" {
        return Err(Error::format("not a binary PGM (missing P5 magic)"));
    }
    let (width, pos) = read_uint(data, 2)?;
    let (height, pos) = read_uint(data, pos)?;
    let (maxval, pos) = read_uint(data, pos)?;
    if maxval != 255 {
        return Err(Error::format(format!("unsupported PGM maxval {maxval}")));
    }
    // Exactly one whitespace byte separates the header from the raster.
    if pos >= data.len() || !data[pos].is_ascii_whitespace() {
        return Err(Error::format("truncated PGM header"));
    }
    let raster = &data[pos + 1..];
    let need = width
        .checked_mul(height)
        .ok_or_else(|| Error::format("PGM dimensions overflow"))?;
    if raster.len() < need {
        return Err(Error::format(format!(
            "PGM raster truncated: {} of {need} bytes",
            raster.len()
        )));
    }
    GrayImage::new(width, height, raster[..need].to_vec())
}

pub fn encode_pgm(img: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend_from_slice(img.pixels());
    out
}

pub fn read_pgm(path: impl AsRef<Path>) -> Result<GrayImage> {
    let path = path.as_ref();
    let data = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pgm(&data)
}

pub fn write_pgm(img: &GrayImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_pgm(img)).map_err(|e| Error::io(path, e))
}

/// Reads a PGM or PNG file; PNGs are converted to 8-bit luma.
pub fn read_image(path: impl AsRef<Path>) -> Result<GrayImage> {
    let path = path.as_ref();
    let data = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if data.starts_with(b"P5") {
        return decode_pgm(&data);
    }
    let decoded = image::load_from_memory_with_format(&data, image::ImageFormat::Png)
        .map_err(|e| Error::format(format!("{}: {e}", path.display())))?
        .into_luma8();
    let (w, h) = decoded.dimensions();
    GrayImage::new(w as usize, h as usize, decoded.into_raw())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn decodes_header_with_comments() {
        let mut data = b"P5\n# made by hand\n3 2\n# another\n255\n".to_vec();
        data.extend_from_slice(&[1, 2, 3, 4, 5, 6]);
        let img = decode_pgm(&data).unwrap();
        assert_eq!(img.dims(), (3, 2));
        assert_eq!(img.pixels(), &[1, 2, 3, 4, 5, 6]);
    }

    #[test]
    fn rejects_bad_magic_maxval_and_truncation() {
        assert!(decode_pgm(b"P2\n1 1\n255\n0").is_err());
        assert!(decode_pgm(b"P5\n1 1\n65535\n\0\0").is_err());
        assert!(decode_pgm(b"P5\n2 2\n255\n\0\0").is_err());
        assert!(decode_pgm(b"P5\n2").is_err());
    }

    #[test]
    fn png_read_matches_pixels() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.png");
        let buf = image::GrayImage::from_raw(2, 2, vec![0, 50, 100, 255]).unwrap();
        buf.save(&path).unwrap();
        let img = read_image(&path).unwrap();
        assert_eq!(img.pixels(), &[0, 50, 100, 255]);
    }

    proptest! {
        #[test]
        fn pgm_round_trip(w in 1usize..20, h in 1usize..20, seed in any::<u64>()) {
            let img = GrayImage::from_fn(w, h, |x, y| (seed.wrapping_mul(31).wrapping_add((x * 7 + y * 13) as u64) % 256) as u8);
            prop_assert_eq!(decode_pgm(&encode_pgm(&img)).unwrap(), img);
        }
    }
}
