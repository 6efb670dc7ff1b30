//! On-disk dataset layout: `<dir>/meta.json` plus `<dir>/<split>/samples.bin`.
//!
//! `samples.bin` is little-endian:
//!
//! ```text
//! magic  b"ARNNDS01"
//! u32    image size S
//! u32    query length Q
//! u32    sample count
//! per sample:
//!   u32        index
//!   f32 × 3SS  image, channel-major
//!   u8  × Q    one-hot query
//!   u8         label
//!   u8  × ⌈SS/8⌉ roi bits, LSB first
//!   f32        target scale
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Dataset, DatasetSpec, Sample, Split, Task, Variant};
use crate::error::{format_err, Error, Result};
use crate::tensor::Tensor;

pub const DATASET_MAGIC: &[u8; 8] = b"ARNNDS01";
pub const SAMPLES_FILE: &str = "samples.bin";
pub const MANIFEST_FILE: &str = "meta.json";

/// Largest image side accepted by the decoder.
const MAX_IMAGE_SIZE: usize = 4096;

/// Contents of `meta.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub variant: String,
    pub task: String,
    pub image_size: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub digits_min: usize,
    pub digits_max: usize,
    pub scale_min: f64,
    pub scale_max: f64,
    pub seed: u64,
    pub glyphs: String,
    /// Free-form record of the invocation that produced the data.
    #[serde(default)]
    pub run: BTreeMap<String, String>,
}

impl Manifest {
    pub fn new(data: &Dataset, run: BTreeMap<String, String>) -> Self {
        let s = &data.spec;
        Self {
            variant: s.variant.name().into(),
            task: s.task.name().into(),
            image_size: s.image_size,
            train: s.train,
            val: s.val,
            test: s.test,
            digits_min: s.digits_min,
            digits_max: s.digits_max,
            scale_min: s.scale_min,
            scale_max: s.scale_max,
            seed: s.seed,
            glyphs: data.glyph_source.clone(),
            run,
        }
    }

    pub fn spec(&self) -> Result<DatasetSpec> {
        let variant = Variant::parse(&self.variant)
            .ok_or_else(|| Error::Format(format!("unknown variant {:?}", self.variant)))?;
        let task = Task::parse(&self.task).ok_or_else(|| Error::Format(format!("unknown task {:?}", self.task)))?;
        Ok(DatasetSpec {
            variant,
            task,
            image_size: self.image_size,
            train: self.train,
            val: self.val,
            test: self.test,
            digits_min: self.digits_min,
            digits_max: self.digits_max,
            scale_min: self.scale_min,
            scale_max: self.scale_max,
            seed: self.seed,
        })
    }

    pub fn parse(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Format(format!("bad manifest: {e}")))
    }
}

fn roi_bytes(size: usize) -> usize {
    (size * size).div_ceil(8)
}

pub fn encode_samples(image_size: usize, query_dim: usize, samples: &[Sample]) -> Result<Vec<u8>> {
    let plane = image_size * image_size;
    let record = 4 + 12 * plane + query_dim + 1 + roi_bytes(image_size) + 4;
    let mut out = Vec::with_capacity(20 + record * samples.len());
    out.extend_from_slice(DATASET_MAGIC);
    for v in [image_size, query_dim, samples.len()] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for s in samples {
        if s.image.shape() != [3, image_size, image_size]
            || s.query.shape() != [query_dim]
            || s.roi.shape() != [image_size, image_size]
        {
            return format_err(format!("sample {} does not match the {image_size}² layout", s.index));
        }
        out.extend_from_slice(&s.index.to_le_bytes());
        for &v in s.image.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        out.extend(s.query.data().iter().map(|&v| u8::from(v != 0.0)));
        out.push(s.label as u8);
        let mut bits = vec![0u8; roi_bytes(image_size)];
        for (k, &v) in s.roi.data().iter().enumerate() {
            if v != 0.0 {
                bits[k / 8] |= 1 << (k % 8);
            }
        }
        out.extend_from_slice(&bits);
        out.extend_from_slice(&(s.target_scale as f32).to_le_bytes());
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        match self.pos.checked_add(n) {
            Some(end) if end <= self.bytes.len() => {
                let out = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(out)
            }
            _ => format_err(format!("dataset truncated at byte {}", self.pos)),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

/// Decodes `samples.bin`, returning `(image_size, query_dim, samples)`.
pub fn decode_samples(bytes: &[u8]) -> Result<(usize, usize, Vec<Sample>)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != DATASET_MAGIC {
        return format_err("not a packed dataset");
    }
    let size = r.u32()? as usize;
    let qdim = r.u32()? as usize;
    let count = r.u32()? as usize;
    if size == 0 || size > MAX_IMAGE_SIZE || qdim == 0 || qdim > 256 {
        return format_err(format!("implausible header: size {size}, query length {qdim}"));
    }
    let plane = size * size;
    let record = 4 + 12 * plane + qdim + 1 + roi_bytes(size) + 4;
    if count.checked_mul(record) != Some(bytes.len() - r.pos) {
        return format_err(format!("{count} records of {record} bytes do not match the file length"));
    }
    let mut samples = Vec::with_capacity(count);
    for _ in 0..count {
        let index = r.u32()?;
        let image: Vec<f64> = r.take(12 * plane)?.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64).collect();
        let query: Vec<f64> = r.take(qdim)?.iter().map(|&b| f64::from(b)).collect();
        if query.iter().any(|&v| v > 1.0) || query.iter().sum::<f64>() != 1.0 {
            return format_err(format!("sample {index}: query is not one-hot"));
        }
        let label = r.take(1)?[0] as usize;
        let bits = r.take(roi_bytes(size))?;
        let roi: Vec<f64> = (0..plane).map(|k| f64::from((bits[k / 8] >> (k % 8)) & 1)).collect();
        let target_scale = r.f32()? as f64;
        samples.push(Sample {
            index,
            image: Tensor::new([3, size, size], image)?,
            query: Tensor::new([qdim], query)?,
            label,
            roi: Tensor::new([size, size], roi)?,
            target_scale,
        });
    }
    Ok((size, qdim, samples))
}

pub fn read_manifest(dir: impl AsRef<Path>) -> Result<Manifest> {
    Manifest::parse(&fs::read_to_string(dir.as_ref().join(MANIFEST_FILE))?)
}

/// Writes the manifest and the three split files under `dir`.
pub fn write_dataset(dir: impl AsRef<Path>, data: &Dataset, run: BTreeMap<String, String>) -> Result<()> {
    let dir = dir.as_ref();
    let spec = &data.spec;
    for split in Split::ALL {
        let sub = dir.join(split.name());
        fs::create_dir_all(&sub)?;
        let bytes = encode_samples(spec.image_size, spec.task.query_dim(), data.split(split))?;
        fs::write(sub.join(SAMPLES_FILE), bytes)?;
    }
    let manifest = serde_json::to_string_pretty(&Manifest::new(data, run)).expect("manifest serializes");
    fs::write(dir.join(MANIFEST_FILE), manifest + "\n")?;
    Ok(())
}

/// Loads a dataset written by [`write_dataset`] and checks it against its
/// manifest.
pub fn read_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let manifest = read_manifest(dir)?;
    let spec = manifest.spec()?;
    let mut splits = Vec::with_capacity(3);
    for split in Split::ALL {
        let (size, qdim, samples) = decode_samples(&fs::read(dir.join(split.name()).join(SAMPLES_FILE))?)?;
        if size != spec.image_size || qdim != spec.task.query_dim() || samples.len() != spec.count(split) {
            return format_err(format!("{} split disagrees with {MANIFEST_FILE}", split.name()));
        }
        if let Some(s) = samples.iter().find(|s| s.label >= spec.task.classes()) {
            return format_err(format!("sample {} has label {} out of range", s.index, s.label));
        }
        splits.push(samples);
    }
    let test = splits.pop().expect("three splits");
    let val = splits.pop().expect("three splits");
    let train = splits.pop().expect("three splits");
    Ok(Dataset { spec, glyph_source: manifest.glyphs, train, val, test })
}
