//! Procedural colored-digit scenes.
//!
//! Each image holds several distinct digits in different colors and scales.
//! The query names one digit (color task) or one color (digit task) and the
//! label is the other attribute of that digit. The region of interest is
//! the set of the target digit's pixels left visible after drawing.

mod glyph;
mod io;
mod texture;

pub use glyph::{
    parse_idx, render_digit, scaled_extent, Glyph, GlyphSet, Sprite, FONT_HEIGHT, FONT_WIDTH, MAX_SCALE, MIN_SCALE,
};
pub use io::{
    decode_samples, encode_samples, read_dataset, read_manifest, write_dataset, Manifest, DATASET_MAGIC,
    MANIFEST_FILE, SAMPLES_FILE,
};
pub use texture::{tinted_texture, value_noise};

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{contract_err, Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    /// Black background.
    Ref,
    /// Black background plus Gaussian pixel noise.
    Dist,
    /// Tinted value-noise texture.
    Bg,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Ref => "REF",
            Variant::Dist => "DIST",
            Variant::Bg => "BG",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_uppercase().as_str() {
            "REF" => Some(Variant::Ref),
            "DIST" => Some(Variant::Dist),
            "BG" => Some(Variant::Bg),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Task {
    /// Query a digit, answer its color.
    ColorOfDigit,
    /// Query a color, answer the digit drawn in it.
    DigitOfColor,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::ColorOfDigit => "color-of-digit",
            Task::DigitOfColor => "digit-of-color",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "color-of-digit" | "color" => Some(Task::ColorOfDigit),
            "digit-of-color" | "digit" | "inverse" => Some(Task::DigitOfColor),
            _ => None,
        }
    }

    pub fn query_dim(self) -> usize {
        match self {
            Task::ColorOfDigit => 10,
            Task::DigitOfColor => COLORS.len(),
        }
    }

    pub fn classes(self) -> usize {
        match self {
            Task::ColorOfDigit => COLORS.len(),
            Task::DigitOfColor => 10,
        }
    }
}

/// Palette in label order: green, yellow, white, red, blue.
pub const COLORS: [[f64; 3]; 5] =
    [[0.0, 1.0, 0.0], [1.0, 1.0, 0.0], [1.0, 1.0, 1.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]];
pub const COLOR_NAMES: [&str; 5] = ["green", "yellow", "white", "red", "blue"];

/// Standard deviation of the pixel noise of the DIST variant.
pub const NOISE_SIGMA: f64 = 0.05;
/// Largest allowed bounding-box overlap, relative to the smaller box.
pub const MAX_OVERLAP: f64 = 0.3;
/// Layout attempts per image before giving up.
pub const MAX_ATTEMPTS: usize = 1000;
/// Position draws per digit within one layout attempt.
const POSITION_DRAWS: usize = 50;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|x| x.name() == s)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub variant: Variant,
    pub task: Task,
    pub image_size: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub digits_min: usize,
    pub digits_max: usize,
    pub scale_min: f64,
    pub scale_max: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            variant: Variant::Ref,
            task: Task::ColorOfDigit,
            image_size: 100,
            train: 30_000,
            val: 10_000,
            test: 10_000,
            digits_min: 5,
            digits_max: 9,
            scale_min: MIN_SCALE,
            scale_max: MAX_SCALE,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn count(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Val => self.val,
            Split::Test => self.test,
        }
    }

    fn validate(&self, glyphs: &GlyphSet) -> Result<()> {
        if self.digits_min == 0 || self.digits_min > self.digits_max || self.digits_max > 10 {
            return contract_err(format!(
                "digit count range [{}, {}] must lie in [1, 10]",
                self.digits_min, self.digits_max
            ));
        }
        if !(MIN_SCALE <= self.scale_min && self.scale_min <= self.scale_max && self.scale_max <= MAX_SCALE) {
            return contract_err(format!(
                "scale range [{}, {}] must lie in [{MIN_SCALE}, {MAX_SCALE}]",
                self.scale_min, self.scale_max
            ));
        }
        if self.task == Task::DigitOfColor && self.digits_min < 1 {
            return contract_err("inverse task needs at least one digit");
        }
        for g in &glyphs.glyphs {
            let (h, w) = scaled_extent(g, self.scale_max);
            if h > self.image_size || w > self.image_size {
                return contract_err(format!(
                    "a {h}×{w} glyph at scale {} does not fit a {}² image",
                    self.scale_max, self.image_size
                ));
            }
        }
        Ok(())
    }
}

/// One benchmark item.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub index: u32,
    /// `3×S×S`, values in `[0, 1]`, exactly representable as `f32`.
    pub image: Tensor,
    /// One-hot query of length [`Task::query_dim`].
    pub query: Tensor,
    pub label: usize,
    /// `S×S` of zeros and ones.
    pub roi: Tensor,
    pub target_scale: f64,
}

impl Sample {
    pub fn query_index(&self) -> usize {
        self.query.data().iter().position(|&v| v == 1.0).unwrap_or(0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub glyph_source: String,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[Sample] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

/// Index of the scale interval `[0.5,1.0) [1.0,1.5) [1.5,2.0) [2.0,2.5) [2.5,3.0]`.
pub fn scale_bucket(scale: f64) -> Result<usize> {
    if !(MIN_SCALE..=MAX_SCALE).contains(&scale) {
        return contract_err(format!("scale {scale} outside [{MIN_SCALE}, {MAX_SCALE}]"));
    }
    Ok((((scale - MIN_SCALE) / 0.5) as usize).min(4))
}

pub const SCALE_BUCKETS: usize = 5;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed of the random stream of one sample.
pub fn sample_seed(seed: u64, split: Split, index: usize) -> u64 {
    splitmix(splitmix(splitmix(seed) ^ split as u64) ^ index as u64)
}

fn overlap_ok(a: &Sprite, b: &Sprite) -> bool {
    let rows = (a.row + a.height).min(b.row + b.height).saturating_sub(a.row.max(b.row));
    let cols = (a.col + a.width).min(b.col + b.width).saturating_sub(a.col.max(b.col));
    let smaller = (a.height * a.width).min(b.height * b.width);
    (rows * cols) as f64 <= MAX_OVERLAP * smaller as f64
}

struct Layout {
    sprites: Vec<Sprite>,
    scales: Vec<f64>,
    target: usize,
    order: Vec<usize>,
}

fn try_layout(
    spec: &DatasetSpec,
    glyphs: &GlyphSet,
    digits: &[usize],
    colors: &[usize],
    target: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Option<Layout>> {
    let s = spec.image_size;
    let mut sprites: Vec<Sprite> = Vec::with_capacity(digits.len());
    let mut scales = Vec::with_capacity(digits.len());
    for (&d, &c) in digits.iter().zip(colors) {
        let scale = rng.random_range(spec.scale_min..=spec.scale_max);
        let (h, w) = scaled_extent(&glyphs.glyphs[d], scale);
        let mut placed = None;
        for _ in 0..POSITION_DRAWS {
            let pos = (rng.random_range(0..=s - h), rng.random_range(0..=s - w));
            let sprite = render_digit(glyphs, d, scale, COLORS[c], pos, s)?;
            if sprites.iter().all(|o| overlap_ok(o, &sprite)) {
                placed = Some((sprite, scale));
                break;
            }
        }
        let Some((sprite, scale)) = placed else {
            return Ok(None);
        };
        sprites.push(sprite);
        scales.push(scale);
    }
    let mut order: Vec<usize> = (0..sprites.len()).collect();
    order.shuffle(rng);
    Ok(Some(Layout { sprites, scales, target, order }))
}

/// Generates sample `index` of `split`.
pub fn generate_sample(spec: &DatasetSpec, glyphs: &GlyphSet, split: Split, index: usize) -> Result<Sample> {
    spec.validate(glyphs)?;
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(spec.seed, split, index));
    let s = spec.image_size;

    for _ in 0..MAX_ATTEMPTS {
        let k = rng.random_range(spec.digits_min..=spec.digits_max);
        let digits: Vec<usize> = index::sample(&mut rng, 10, k).into_iter().collect();
        let target = rng.random_range(0..k);
        let colors: Vec<usize> = match spec.task {
            Task::ColorOfDigit => (0..k).map(|_| rng.random_range(0..COLORS.len())).collect(),
            Task::DigitOfColor => {
                let tc = rng.random_range(0..COLORS.len());
                (0..k)
                    .map(|i| {
                        if i == target {
                            tc
                        } else {
                            let c = rng.random_range(0..COLORS.len() - 1);
                            c + usize::from(c >= tc)
                        }
                    })
                    .collect()
            }
        };
        let Some(layout) = try_layout(spec, glyphs, &digits, &colors, target, &mut rng)? else {
            continue;
        };

        let mut image = match spec.variant {
            Variant::Bg => tinted_texture(s, &mut rng),
            Variant::Ref | Variant::Dist => vec![0.0; 3 * s * s],
        };
        // owner[p] = sprite drawn last at pixel p
        let mut owner = vec![usize::MAX; s * s];
        for &i in &layout.order {
            let sp = &layout.sprites[i];
            for y in 0..sp.height {
                for x in 0..sp.width {
                    if sp.mask[y * sp.width + x] {
                        let p = (sp.row + y) * s + sp.col + x;
                        owner[p] = i;
                        for ch in 0..3 {
                            image[ch * s * s + p] = sp.rgb[ch];
                        }
                    }
                }
            }
        }
        let roi: Vec<f64> = owner.iter().map(|&o| if o == layout.target { 1.0 } else { 0.0 }).collect();
        if !roi.contains(&1.0) {
            continue;
        }
        if spec.variant == Variant::Dist {
            let noise = Normal::new(0.0, NOISE_SIGMA).expect("valid noise scale");
            image.iter_mut().for_each(|v| *v = (*v + noise.sample(&mut rng)).clamp(0.0, 1.0));
        }
        image.iter_mut().for_each(|v| *v = *v as f32 as f64);

        let (query_at, label) = match spec.task {
            Task::ColorOfDigit => (digits[target], colors[target]),
            Task::DigitOfColor => (colors[target], digits[target]),
        };
        let mut query = vec![0.0; spec.task.query_dim()];
        query[query_at] = 1.0;
        return Ok(Sample {
            index: index as u32,
            image: Tensor::new([3, s, s], image)?,
            query: Tensor::new([query.len()], query)?,
            label,
            roi: Tensor::new([s, s], roi)?,
            target_scale: layout.scales[target] as f32 as f64,
        });
    }
    Err(Error::Generation(format!(
        "no valid layout for sample {index} of {} after {MAX_ATTEMPTS} attempts",
        split.name()
    )))
}

/// Generates every split. Samples are produced in parallel and kept in
/// index order, so the result depends only on `spec` and `glyphs`.
pub fn generate(spec: &DatasetSpec, glyphs: &GlyphSet) -> Result<Dataset> {
    spec.validate(glyphs)?;
    let split = |split: Split| -> Result<Vec<Sample>> {
        (0..spec.count(split)).into_par_iter().map(|i| generate_sample(spec, glyphs, split, i)).collect()
    };
    Ok(Dataset {
        spec: spec.clone(),
        glyph_source: glyphs.source.clone(),
        train: split(Split::Train)?,
        val: split(Split::Val)?,
        test: split(Split::Test)?,
    })
}
