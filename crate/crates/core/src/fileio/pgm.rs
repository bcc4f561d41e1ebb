//! Binary PGM ("P5") encode/decode for [-1, 1] grayscale tensors.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Map a [-1,1] value to a byte, rounding half away from zero.
fn encode_pixel(v: f32) -> u8 {
    let q = ((v + 1.0) / 2.0).clamp(0.0, 1.0) * 255.0;
    // q >= 0, so half away from zero == floor(q + 0.5)
    (q + 0.5).floor() as u8
}

fn decode_pixel(p: u8) -> f32 {
    (p as f32) / 255.0 * 2.0 - 1.0
}

pub fn write_pgm_to(w: &mut impl Write, img: &Tensor) -> Result<()> {
    let (h, wd) = image_dims(img)?;
    write!(w, "P5\n{wd} {h}\n255\n")?;
    for &v in img.data() {
        w.write_all(&[encode_pixel(v)])?;
    }
    Ok(())
}

pub fn write_pgm(path: impl AsRef<Path>, img: &Tensor) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_pgm_to(&mut w, img)?;
    w.flush()?;
    Ok(())
}

pub fn read_pgm_from(r: &mut impl Read) -> Result<Tensor> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let mut pos = 0usize;
    let magic = next_token(&bytes, &mut pos)?;
    if magic != b"P5" {
        return Err(Error::format("pgm", "expected P5 magic"));
    }
    let w: usize = parse_dim(next_token(&bytes, &mut pos)?)?;
    let h: usize = parse_dim(next_token(&bytes, &mut pos)?)?;
    let maxval: usize = parse_dim(next_token(&bytes, &mut pos)?)?;
    if maxval != 255 {
        return Err(Error::format("pgm", format!("unsupported maxval {maxval}")));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let n = w * h;
    if bytes.len() < pos + n {
        return Err(Error::format("pgm", "truncated raster"));
    }
    let data = bytes[pos..pos + n].iter().map(|&p| decode_pixel(p)).collect();
    Tensor::new(vec![h, w], data)
}

pub fn read_pgm(path: impl AsRef<Path>) -> Result<Tensor> {
    let mut r = BufReader::new(File::open(path)?);
    read_pgm_from(&mut r)
}

fn image_dims(img: &Tensor) -> Result<(usize, usize)> {
    match img.shape() {
        [h, w] => Ok((*h, *w)),
        s => Err(Error::ShapeMismatch { expected: vec![0, 0], got: s.to_vec() }),
    }
}

fn next_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a [u8]> {
    while *pos < bytes.len() {
        match bytes[*pos] {
            b' ' | b'\t' | b'\r' | b'\n' => *pos += 1,
            b'#' => {
                while *pos < bytes.len() && bytes[*pos] != b'\n' {
                    *pos += 1;
                }
            }
            _ => break,
        }
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::format("pgm", "truncated header"));
    }
    Ok(&bytes[start..*pos])
}

fn parse_dim(tok: &[u8]) -> Result<usize> {
    std::str::from_utf8(tok)
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::format("pgm", "bad header field"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_error_is_bounded() {
        let vals: Vec<f32> = (0..1024).map(|i| -1.0 + 2.0 * (i as f32) / 1023.0).collect();
        let img = Tensor::new(vec![32, 32], vals.clone()).unwrap();
        let mut buf = Vec::new();
        write_pgm_to(&mut buf, &img).unwrap();
        let back = read_pgm_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back.shape(), &[32, 32]);
        for (&v, &w) in vals.iter().zip(back.data()) {
            assert!((v - w).abs() <= 1.0 / 255.0 + 1e-6, "{v} vs {w}");
        }
    }

    #[test]
    fn rounding_is_half_away_from_zero() {
        assert_eq!(encode_pixel(-1.0), 0);
        assert_eq!(encode_pixel(1.0), 255);
        assert_eq!(encode_pixel(0.0), 128); // 127.5 rounds away from zero -> 128
        assert_eq!(encode_pixel(2.0), 255); // clamped
    }

    #[test]
    fn rejects_garbage() {
        assert!(read_pgm_from(&mut &b"P6\n2 2\n255\n...."[..]).is_err());
        assert!(read_pgm_from(&mut &b"P5\n2 2\n255\nab"[..]).is_err());
    }
}
