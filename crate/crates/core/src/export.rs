//! Plain-text and grayscale image dumps of attention masks.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{format_err, shape_err, Result};
use crate::tensor::Tensor;

fn dims2(t: &Tensor) -> Result<(usize, usize)> {
    match *t.shape() {
        [m, n] => Ok((m, n)),
        _ => shape_err(format!("expected an m×n map, got {:?}", t.shape())),
    }
}

/// One row per line, values comma-separated with 9 significant digits.
pub fn mask_to_csv(mask: &Tensor) -> Result<String> {
    let (m, n) = dims2(mask)?;
    let mut out = String::with_capacity(m * n * 16);
    for i in 0..m {
        for j in 0..n {
            if j > 0 {
                out.push(',');
            }
            write!(out, "{:.8e}", mask.data()[i * n + j]).expect("writing to a String");
        }
        out.push('\n');
    }
    Ok(out)
}

/// Parses the output of [`mask_to_csv`]. Every row must have the same
/// number of values.
pub fn parse_mask_csv(text: &str) -> Result<Tensor> {
    let mut data = Vec::new();
    let mut cols = None;
    let mut rows = 0;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        let before = data.len();
        for field in line.split(',') {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| crate::Error::Format(format!("line {}: {field:?} is not a number", lineno + 1)))?;
            data.push(v);
        }
        let width = data.len() - before;
        match cols {
            None => cols = Some(width),
            Some(c) if c != width => {
                return format_err(format!("line {} has {width} values, expected {c}", lineno + 1));
            }
            _ => {}
        }
        rows += 1;
    }
    let Some(cols) = cols else {
        return format_err("mask file is empty");
    };
    Tensor::new([rows, cols], data)
}

pub fn write_mask_csv(path: impl AsRef<Path>, mask: &Tensor) -> Result<()> {
    fs::write(path, mask_to_csv(mask)?)?;
    Ok(())
}

pub fn read_mask_csv(path: impl AsRef<Path>) -> Result<Tensor> {
    parse_mask_csv(&fs::read_to_string(path)?)
}

/// Binary 8-bit PGM with min-max scaling; the maximum maps to 255. A
/// constant map is written as all 255.
pub fn to_pgm(map: &Tensor) -> Result<Vec<u8>> {
    let (m, n) = dims2(map)?;
    let (lo, hi) = (map.min(), map.max());
    let mut out = format!("P5\n{n} {m}\n255\n").into_bytes();
    out.extend(map.data().iter().map(|&v| {
        if hi > lo {
            (255.0 * (v - lo) / (hi - lo)).round().clamp(0.0, 255.0) as u8
        } else {
            255
        }
    }));
    Ok(out)
}

pub fn write_pgm(path: impl AsRef<Path>, map: &Tensor) -> Result<()> {
    fs::write(path, to_pgm(map)?)?;
    Ok(())
}

/// Parses a binary PGM with maxval 255 into `(rows, cols, pixels)`.
pub fn parse_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let mut pos = 0;
    let mut token = || -> Result<&[u8]> {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return format_err("PGM header is truncated");
        }
        Ok(&bytes[start..pos])
    };
    if token()? != b"P5" {
        return format_err("not a binary PGM");
    }
    let mut number = |what: &str| -> Result<usize> {
        std::str::from_utf8(token()?)
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| crate::Error::Format(format!("bad PGM {what}")))
    };
    let cols = number("width")?;
    let rows = number("height")?;
    if number("maxval")? != 255 {
        return format_err("only 8-bit PGM is supported");
    }
    // exactly one whitespace byte separates the header from the raster
    let body = pos + 1;
    let len = rows.checked_mul(cols).ok_or_else(|| crate::Error::Format("PGM extents overflow".into()))?;
    if body > bytes.len() || bytes.len() - body != len {
        return format_err(format!("PGM raster should hold {len} bytes"));
    }
    Ok((rows, cols, bytes[body..].to_vec()))
}

/// Mean over channels of a `c×m×n` map.
pub fn channel_mean(map: &Tensor) -> Result<Tensor> {
    let &[c, m, n] = map.shape() else {
        return shape_err(format!("expected a c×m×n map, got {:?}", map.shape()));
    };
    let plane = m * n;
    let mut out = vec![0.0; plane];
    for chunk in map.data().chunks_exact(plane.max(1)) {
        out.iter_mut().zip(chunk).for_each(|(o, v)| *o += v);
    }
    let k = c.max(1) as f64;
    out.iter_mut().for_each(|v| *v /= k);
    Tensor::new([m, n], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn csv_round_trip_within_1e9() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mask = Tensor::uniform([5, 7], 0.0, 1.0, &mut rng);
        let back = parse_mask_csv(&mask_to_csv(&mask).unwrap()).unwrap();
        assert_eq!(back.shape(), &[5, 7]);
        assert!(back.max_abs_diff(&mask) < 1e-9);
    }

    #[test]
    fn csv_rejects_ragged_rows() {
        assert!(parse_mask_csv("1,2\n3\n").is_err());
        assert!(parse_mask_csv("").is_err());
        assert!(parse_mask_csv("1,x\n").is_err());
    }

    #[test]
    fn pgm_scales_max_to_255() {
        let map = Tensor::new([2, 2], vec![0.0, 0.5, 0.25, 1.0]).unwrap();
        let (rows, cols, px) = parse_pgm(&to_pgm(&map).unwrap()).unwrap();
        assert_eq!((rows, cols), (2, 2));
        assert_eq!(px, vec![0, 128, 64, 255]);
        let (_, _, flat) = parse_pgm(&to_pgm(&Tensor::full([1, 3], 0.2)).unwrap()).unwrap();
        assert_eq!(flat, vec![255; 3]);
    }

    #[test]
    fn channel_mean_averages() {
        let map = Tensor::new([2, 1, 2], vec![1.0, 2.0, 3.0, 6.0]).unwrap();
        assert_eq!(channel_mean(&map).unwrap().data(), &[2.0, 4.0]);
    }
}
