//! Digit bitmaps: a built-in 8×12 font and an IDX-file loader.

use crate::error::{contract_err, format_err, Error, Result};

/// A binary glyph, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Glyph {
    pub width: usize,
    pub height: usize,
    pub bits: Vec<bool>,
}

impl Glyph {
    pub fn area(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    fn at(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.width + col]
    }
}

/// One glyph per digit.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GlyphSet {
    pub glyphs: Vec<Glyph>,
    /// `"builtin"` or a description of the imported source.
    pub source: String,
}

pub const FONT_WIDTH: usize = 8;
pub const FONT_HEIGHT: usize = 12;

#[rustfmt::skip]
const FONT: [[&str; FONT_HEIGHT]; 10] = [
    ["..####..", ".##..##.", "##....##", "##...###", "##..####", "##.##.##",
     "####..##", "###...##", "##....##", ".##..##.", "..####..", "........"],
    ["...##...", "..###...", ".####...", "...##...", "...##...", "...##...",
     "...##...", "...##...", "...##...", "...##...", ".######.", "........"],
    ["..####..", ".##..##.", "##....##", "......##", ".....##.", "....##..",
     "...##...", "..##....", ".##.....", "##......", "########", "........"],
    [".#####..", "##...##.", "......##", "......##", ".....##.", "..####..",
     ".....##.", "......##", "......##", "##...##.", ".#####..", "........"],
    [".....##.", "....###.", "...####.", "..##.##.", ".##..##.", "##...##.",
     "########", ".....##.", ".....##.", ".....##.", ".....##.", "........"],
    ["#######.", "##......", "##......", "##......", "######..", ".....##.",
     "......##", "......##", "......##", "##...##.", ".#####..", "........"],
    ["..####..", ".##.....", "##......", "##......", "######..", "###..##.",
     "##....##", "##....##", "##....##", ".##..##.", "..####..", "........"],
    ["########", "......##", ".....##.", ".....##.", "....##..", "....##..",
     "...##...", "...##...", "..##....", "..##....", "..##....", "........"],
    ["..####..", ".##..##.", "##....##", ".##..##.", "..####..", ".##..##.",
     "##....##", "##....##", "##....##", ".##..##.", "..####..", "........"],
    ["..####..", ".##..##.", "##....##", "##....##", "##....##", ".##..###",
     "..######", "......##", "......##", ".....##.", "..####..", "........"],
];

impl GlyphSet {
    pub fn builtin() -> Self {
        let glyphs = FONT
            .iter()
            .map(|rows| Glyph {
                width: FONT_WIDTH,
                height: FONT_HEIGHT,
                bits: rows.iter().flat_map(|r| r.bytes().map(|b| b == b'#')).collect(),
            })
            .collect();
        Self { glyphs, source: "builtin".into() }
    }

    /// Largest glyph extents `(height, width)`.
    pub fn max_extent(&self) -> (usize, usize) {
        let h = self.glyphs.iter().map(|g| g.height).max().unwrap_or(0);
        let w = self.glyphs.iter().map(|g| g.width).max().unwrap_or(0);
        (h, w)
    }

    /// Builds a glyph set from IDX image and label files (the layout used
    /// by the common handwritten-digit distributions). The first image of
    /// each digit is thresholded at 128 and cropped to its ink.
    pub fn from_idx(images: &[u8], labels: &[u8]) -> Result<Self> {
        let (dims, pixels) = parse_idx(images, 3)?;
        let (ldims, label_bytes) = parse_idx(labels, 1)?;
        let (count, rows, cols) = (dims[0], dims[1], dims[2]);
        if ldims[0] != count {
            return format_err(format!("{count} images but {} labels", ldims[0]));
        }
        let mut found: Vec<Option<Glyph>> = vec![None; 10];
        for (k, &label) in label_bytes.iter().enumerate() {
            let d = label as usize;
            if d >= 10 {
                return format_err(format!("label {label} is not a digit"));
            }
            if found[d].is_some() {
                continue;
            }
            let img = &pixels[k * rows * cols..(k + 1) * rows * cols];
            found[d] = crop_ink(img, rows, cols);
            if found.iter().all(Option::is_some) {
                break;
            }
        }
        let glyphs = found
            .into_iter()
            .enumerate()
            .map(|(d, g)| g.ok_or_else(|| Error::Format(format!("no usable image of digit {d}"))))
            .collect::<Result<_>>()?;
        Ok(Self { glyphs, source: "idx".into() })
    }
}

fn crop_ink(img: &[u8], rows: usize, cols: usize) -> Option<Glyph> {
    let on = |r: usize, c: usize| img[r * cols + c] >= 128;
    let ink_rows: Vec<usize> = (0..rows).filter(|&r| (0..cols).any(|c| on(r, c))).collect();
    let ink_cols: Vec<usize> = (0..cols).filter(|&c| (0..rows).any(|r| on(r, c))).collect();
    let (&r0, &r1) = (ink_rows.first()?, ink_rows.last()?);
    let (&c0, &c1) = (ink_cols.first()?, ink_cols.last()?);
    let (height, width) = (r1 - r0 + 1, c1 - c0 + 1);
    let bits = (r0..=r1).flat_map(|r| (c0..=c1).map(move |c| (r, c))).map(|(r, c)| on(r, c)).collect();
    Some(Glyph { width, height, bits })
}

/// Parses an unsigned-byte IDX file of the given rank into
/// `(extents, payload)`.
pub fn parse_idx(bytes: &[u8], rank: usize) -> Result<(Vec<usize>, &[u8])> {
    if bytes.len() < 4 || bytes[0] != 0 || bytes[1] != 0 {
        return format_err("not an IDX file");
    }
    if bytes[2] != 0x08 {
        return format_err(format!("IDX element type 0x{:02x} is not unsigned byte", bytes[2]));
    }
    if bytes[3] as usize != rank {
        return format_err(format!("IDX rank {} where {rank} was expected", bytes[3]));
    }
    let header = 4 + 4 * rank;
    if bytes.len() < header {
        return format_err("IDX header is truncated");
    }
    let dims: Vec<usize> = bytes[4..header]
        .chunks_exact(4)
        .map(|c| u32::from_be_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    let len = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
    match len {
        Some(len) if bytes.len() - header == len => Ok((dims, &bytes[header..])),
        _ => format_err(format!("IDX payload does not match extents {dims:?}")),
    }
}

/// A glyph scaled and colored for placement at `(row, col)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sprite {
    pub row: usize,
    pub col: usize,
    pub height: usize,
    pub width: usize,
    pub mask: Vec<bool>,
    pub rgb: [f64; 3],
}

impl Sprite {
    pub fn area(&self) -> usize {
        self.mask.iter().filter(|&&b| b).count()
    }
}

pub const MIN_SCALE: f64 = 0.5;
pub const MAX_SCALE: f64 = 3.0;

/// Sprite extents of a glyph at `scale`: `round(extent·scale)`, at least 1.
pub fn scaled_extent(glyph: &Glyph, scale: f64) -> (usize, usize) {
    let h = ((glyph.height as f64 * scale).round() as usize).max(1);
    let w = ((glyph.width as f64 * scale).round() as usize).max(1);
    (h, w)
}

/// Nearest-neighbour scales `digit` and places its top-left corner at
/// `position` in an `image_size²` canvas.
pub fn render_digit(
    glyphs: &GlyphSet,
    digit: usize,
    scale: f64,
    rgb: [f64; 3],
    position: (usize, usize),
    image_size: usize,
) -> Result<Sprite> {
    if !(MIN_SCALE..=MAX_SCALE).contains(&scale) {
        return contract_err(format!("scale {scale} outside [{MIN_SCALE}, {MAX_SCALE}]"));
    }
    let Some(glyph) = glyphs.glyphs.get(digit) else {
        return contract_err(format!("no glyph for digit {digit}"));
    };
    let (h, w) = scaled_extent(glyph, scale);
    let (row, col) = position;
    if row + h > image_size || col + w > image_size {
        return Err(Error::Placement(format!(
            "{h}×{w} sprite at ({row}, {col}) leaves the {image_size}² canvas"
        )));
    }
    let mut mask = Vec::with_capacity(h * w);
    for y in 0..h {
        let gy = y * glyph.height / h;
        for x in 0..w {
            mask.push(glyph.at(gy, x * glyph.width / w));
        }
    }
    Ok(Sprite { row, col, height: h, width: w, mask, rgb })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_font_is_complete() {
        let set = GlyphSet::builtin();
        assert_eq!(set.glyphs.len(), 10);
        for g in &set.glyphs {
            assert_eq!(g.bits.len(), FONT_WIDTH * FONT_HEIGHT);
            assert!(g.area() > 10);
        }
        for a in 0..10 {
            for b in a + 1..10 {
                assert_ne!(set.glyphs[a], set.glyphs[b]);
            }
        }
    }

    #[test]
    fn unit_scale_keeps_extent_and_double_scale_quadruples_area() {
        let set = GlyphSet::builtin();
        for d in 0..10 {
            let one = render_digit(&set, d, 1.0, [1.0; 3], (0, 0), 40).unwrap();
            assert_eq!((one.height, one.width), (FONT_HEIGHT, FONT_WIDTH));
            assert_eq!(one.area(), set.glyphs[d].area());
            let two = render_digit(&set, d, 2.0, [1.0; 3], (0, 0), 40).unwrap();
            assert_eq!((two.height, two.width), (2 * FONT_HEIGHT, 2 * FONT_WIDTH));
            assert_eq!(two.area(), 4 * one.area());
        }
    }

    #[test]
    fn out_of_canvas_is_a_placement_error() {
        let set = GlyphSet::builtin();
        let r = render_digit(&set, 3, 1.0, [1.0; 3], (30, 0), 40);
        assert!(matches!(r, Err(Error::Placement(_))));
        assert!(matches!(render_digit(&set, 3, 3.5, [1.0; 3], (0, 0), 40), Err(Error::Contract(_))));
    }

    fn idx(rank_dims: &[u32], payload: &[u8]) -> Vec<u8> {
        let mut b = vec![0, 0, 8, rank_dims.len() as u8];
        for d in rank_dims {
            b.extend_from_slice(&d.to_be_bytes());
        }
        b.extend_from_slice(payload);
        b
    }

    #[test]
    fn idx_glyphs_are_cropped() {
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for d in 0..10u8 {
            let mut img = vec![0u8; 16];
            // a (d%3+1)-wide bar in a 4×4 image
            for r in 1..3 {
                for c in 0..=(d as usize % 3) {
                    img[r * 4 + c] = 200;
                }
            }
            images.extend(img);
            labels.push(d);
        }
        let set = GlyphSet::from_idx(&idx(&[10, 4, 4], &images), &idx(&[10], &labels)).unwrap();
        assert_eq!(set.glyphs[0].height, 2);
        assert_eq!(set.glyphs[2].width, 3);
        assert!(set.glyphs[2].bits.iter().all(|&b| b));
    }

    #[test]
    fn idx_rejects_bad_headers() {
        assert!(parse_idx(&[0, 0, 8], 1).is_err());
        assert!(parse_idx(&idx(&[3], &[1, 2]), 1).is_err());
        assert!(parse_idx(&idx(&[u32::MAX, u32::MAX, u32::MAX], &[]), 3).is_err());
        let mut wrong_type = idx(&[1], &[0]);
        wrong_type[2] = 0x0d;
        assert!(parse_idx(&wrong_type, 1).is_err());
    }
}
