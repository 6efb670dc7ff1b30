//! Accuracy, per-scale accuracy and mask correctness.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use super::train::{argmax as predict_class, TrainConfig};
use super::AttributeNet;
use crate::datagen::{scale_bucket, Sample, SCALE_BUCKETS};
use crate::error::{shape_err, Result};
use crate::export::{channel_mean, write_mask_csv, write_pgm};
use crate::tensor::{ParamStore, Session, Tape, Tensor};

/// Nearest-neighbour resize of an `m×n` map to `rows×cols`.
pub fn upsample_nearest(map: &Tensor, rows: usize, cols: usize) -> Result<Tensor> {
    let &[m, n] = map.shape() else {
        return shape_err(format!("expected an m×n map, got {:?}", map.shape()));
    };
    if m == 0 || n == 0 {
        return shape_err("cannot upsample an empty map");
    }
    let d = map.data();
    Ok(Tensor::from_fn([rows, cols], |k| d[(k / cols) * m / rows * n + (k % cols) * n / cols]))
}

/// Share of the combined attention mass inside `roi`.
///
/// Every mask is upsampled to the `roi` grid and the masks are multiplied
/// pointwise; the result is `Σ M·roi / Σ M`, or 0 when `Σ M = 0`.
pub fn mask_correctness(masks: &[Tensor], roi: &Tensor) -> Result<f64> {
    let &[rows, cols] = roi.shape() else {
        return shape_err(format!("roi must be an m×n map, got {:?}", roi.shape()));
    };
    let mut combined = Tensor::ones([rows, cols]);
    for mask in masks {
        let up = upsample_nearest(mask, rows, cols)?;
        combined.data_mut().iter_mut().zip(up.data()).for_each(|(c, u)| *c *= u);
    }
    let total = combined.sum();
    if total == 0.0 {
        return Ok(0.0);
    }
    Ok(combined.dot(roi)? / total)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub samples: usize,
    pub accuracy: f64,
    pub loss: f64,
    pub bucket_counts: [usize; SCALE_BUCKETS],
    /// Accuracy per target-scale interval; 0 for an empty interval.
    pub bucket_accuracy: [f64; SCALE_BUCKETS],
    /// Mean over samples of [`mask_correctness`].
    pub mask_correctness: f64,
    pub runtime_secs: f64,
    /// Model and optimizer settings, `key=value` separated by spaces.
    pub config: String,
    /// Leading 16 hex digits of the SHA-256 of `config`.
    pub fingerprint: String,
}

pub fn fingerprint(config: &str) -> String {
    hex::encode(&Sha256::digest(config.as_bytes())[..8])
}

const BUCKET_LABELS: [&str; SCALE_BUCKETS] = ["0.5-1.0", "1.0-1.5", "1.5-2.0", "2.0-2.5", "2.5-3.0"];

impl EvalReport {
    /// Machine-readable form, one `key=value` per line.
    pub fn to_key_values(&self) -> String {
        let mut out = format!(
            "samples={}\naccuracy={:.6}\nloss={:.6}\nmask_correctness={:.6}\n",
            self.samples, self.accuracy, self.loss, self.mask_correctness
        );
        for (k, label) in BUCKET_LABELS.iter().enumerate() {
            out += &format!("bucket_{label}_count={}\n", self.bucket_counts[k]);
            out += &format!("bucket_{label}_accuracy={:.6}\n", self.bucket_accuracy[k]);
        }
        out += &format!("runtime_secs={:.3}\nfingerprint={}\nconfig={}\n", self.runtime_secs, self.fingerprint, self.config);
        out
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "samples   {}", self.samples)?;
        writeln!(f, "accuracy  {:.2}%", 100.0 * self.accuracy)?;
        writeln!(f, "loss      {:.4}", self.loss)?;
        writeln!(f, "corr.     {:.4}", self.mask_correctness)?;
        writeln!(f, "scale     {}", BUCKET_LABELS.map(|l| format!("{l:>8}")).join(""))?;
        let row: String = self.bucket_accuracy.iter().map(|a| format!("{:>8.2}", 100.0 * a)).collect();
        writeln!(f, "accuracy  {row}")?;
        let counts: String = self.bucket_counts.iter().map(|c| format!("{c:>8}")).collect();
        writeln!(f, "count     {counts}")?;
        writeln!(f, "runtime   {:.2}s", self.runtime_secs)?;
        write!(f, "config    {} ({})", self.fingerprint, self.config)
    }
}

struct Outcome {
    hit: bool,
    loss: f64,
    bucket: usize,
    correctness: f64,
}

fn evaluate_one(net: &AttributeNet, store: &ParamStore, sample: &Sample) -> Result<Outcome> {
    let tape = Tape::new();
    let mut s = Session::inference(&tape, store, 0);
    let image = s.constant(sample.image.clone());
    let query = s.constant(sample.query.clone());
    let out = net.forward(&mut s, image, query)?;
    let masks: Vec<Tensor> = out.masks.iter().map(|m| m.to_tensor()).collect();
    Ok(Outcome {
        hit: predict_class(&out.logits.to_tensor()) == sample.label,
        loss: out.logits.cross_entropy(sample.label)?.item(),
        bucket: scale_bucket(sample.target_scale)?,
        correctness: mask_correctness(&masks, &sample.roi)?,
    })
}

/// Scores `samples` with expectation decoding. Samples are evaluated in
/// parallel and reduced in index order.
pub fn evaluate(net: &AttributeNet, store: &ParamStore, samples: &[Sample], train: &TrainConfig) -> Result<EvalReport> {
    let start = Instant::now();
    let net = net.for_inference();
    let outcomes: Vec<Outcome> =
        samples.par_iter().map(|s| evaluate_one(&net, store, s)).collect::<Result<_>>()?;
    let mut counts = [0usize; SCALE_BUCKETS];
    let mut hits = [0usize; SCALE_BUCKETS];
    let (mut loss, mut corr) = (0.0, 0.0);
    for o in &outcomes {
        counts[o.bucket] += 1;
        hits[o.bucket] += usize::from(o.hit);
        loss += o.loss;
        corr += o.correctness;
    }
    let n = samples.len();
    let per = |x: f64| if n == 0 { 0.0 } else { x / n as f64 };
    let config = format!("{} {}", net.config.describe(), train.describe());
    Ok(EvalReport {
        samples: n,
        accuracy: per(hits.iter().sum::<usize>() as f64),
        loss: per(loss),
        bucket_counts: counts,
        bucket_accuracy: std::array::from_fn(|k| if counts[k] == 0 { 0.0 } else { hits[k] as f64 / counts[k] as f64 }),
        mask_correctness: per(corr),
        runtime_secs: start.elapsed().as_secs_f64(),
        fingerprint: fingerprint(&config),
        config,
    })
}

/// Writes, for every attention stage `k`, the mask as `<stem>_<k>.csv` and
/// `<stem>_<k>.pgm` and the channel mean of the attended features as
/// `<stem>_<k>_attended.pgm`. Returns the written paths.
pub fn export_attended_maps(
    net: &AttributeNet,
    store: &ParamStore,
    sample: &Sample,
    stem: &str,
    out_dir: impl AsRef<Path>,
) -> Result<Vec<PathBuf>> {
    let dir = out_dir.as_ref();
    fs::create_dir_all(dir)?;
    let net = net.for_inference();
    let tape = Tape::new();
    let mut s = Session::inference(&tape, store, 0);
    let image = s.constant(sample.image.clone());
    let query = s.constant(sample.query.clone());
    let out = net.forward(&mut s, image, query)?;
    let mut written = Vec::new();
    for (k, (mask, attended)) in out.masks.iter().zip(&out.attended).enumerate() {
        let mask = mask.to_tensor();
        let csv = dir.join(format!("{stem}_{k}.csv"));
        write_mask_csv(&csv, &mask)?;
        let pgm = dir.join(format!("{stem}_{k}.pgm"));
        write_pgm(&pgm, &mask)?;
        let feat = dir.join(format!("{stem}_{k}_attended.pgm"));
        write_pgm(&feat, &channel_mean(&attended.to_tensor())?)?;
        written.extend([csv, pgm, feat]);
    }
    Ok(written)
}
