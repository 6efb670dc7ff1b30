//! Minibatch Adam on softmax cross-entropy.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::AttributeNet;
use crate::datagen::{Dataset, Sample};
use crate::error::{contract_err, Error, Result};
use crate::tensor::{ParamStore, Session, Tape, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch: usize,
    pub epochs: usize,
    /// Drives shuffling and mask sampling.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, batch: 32, epochs: 15, seed: 0 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return contract_err(format!("learning rate must be positive, got {}", self.lr));
        }
        if self.batch == 0 {
            return contract_err("batch size must be at least 1");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return contract_err("Adam needs β₁, β₂ in [0, 1) and ε > 0");
        }
        Ok(())
    }

    pub fn describe(&self) -> String {
        format!(
            "optimizer=adam lr={} beta1={} beta2={} eps={} batch={} epochs={} train_seed={}",
            self.lr, self.beta1, self.beta2, self.eps, self.batch, self.epochs, self.seed
        )
    }
}

/// Adam state for every parameter of a store.
#[derive(Clone, Debug)]
pub struct Adam {
    config: TrainConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    steps: u64,
}

impl Adam {
    pub fn new(store: &ParamStore, config: TrainConfig) -> Self {
        let zeros = || store.iter().map(|p| vec![0.0; p.value.numel()]).collect();
        Self { config, m: zeros(), v: zeros(), steps: 0 }
    }

    /// Applies the accumulated gradients in `store`.
    pub fn step(&mut self, store: &mut ParamStore) {
        self.steps += 1;
        let TrainConfig { lr, beta1, beta2, eps, .. } = self.config;
        let c1 = 1.0 - beta1.powi(self.steps as i32);
        let c2 = 1.0 - beta2.powi(self.steps as i32);
        for ((p, m), v) in store.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let grad = p.grad.data().to_vec();
            for (((w, g), m), v) in p.value.data_mut().iter_mut().zip(grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                *w -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            }
        }
    }
}

/// One line of the loss curve.
#[derive(Clone, Debug, PartialEq)]
pub struct StepLog {
    pub epoch: usize,
    pub step: usize,
    pub split: &'static str,
    pub loss: f64,
    pub accuracy: f64,
}

impl StepLog {
    pub fn line(&self) -> String {
        format!("{},{},{},{:.6},{:.4}", self.epoch, self.step, self.split, self.loss, self.accuracy)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainHistory {
    pub entries: Vec<StepLog>,
}

impl TrainHistory {
    pub fn train_losses(&self) -> Vec<f64> {
        self.entries.iter().filter(|e| e.split == "train").map(|e| e.loss).collect()
    }
}

pub(crate) fn argmax(v: &Tensor) -> usize {
    v.data()
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (k, &x)| if x > best.1 { (k, x) } else { best })
        .0
}

fn norm(t: &Tensor) -> f64 {
    t.data().iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn check_compatible(net: &AttributeNet, data: &Dataset) -> Result<()> {
    let (c, s) = (&net.config, &data.spec);
    if c.query_dim != s.task.query_dim() || c.classes != s.task.classes() || c.image_size != s.image_size {
        return contract_err(format!(
            "model (query {}, classes {}, image {}) does not match dataset (query {}, classes {}, image {})",
            c.query_dim,
            c.classes,
            c.image_size,
            s.task.query_dim(),
            s.task.classes(),
            s.image_size
        ));
    }
    Ok(())
}

/// Loss and hit for one sample, accumulating `1/batch` of its gradient.
fn train_sample(net: &AttributeNet, store: &mut ParamStore, sample: &Sample, batch: usize, seed: u64) -> Result<(f64, bool)> {
    let tape = Tape::new();
    let mut s = Session::new(&tape, store, seed);
    let image = s.constant(sample.image.clone());
    let query = s.constant(sample.query.clone());
    let out = net.forward(&mut s, image, query)?;
    let loss = out.logits.cross_entropy(sample.label)?;
    let value = loss.item();
    if !value.is_finite() {
        let mut report = format!("non-finite loss on sample {}; activation norms:", sample.index);
        for (k, (m, a)) in out.masks.iter().zip(&out.attended).enumerate() {
            report += &format!(" stack{k}: mask {:.3e} features {:.3e};", norm(&m.to_tensor()), norm(&a.to_tensor()));
        }
        report += &format!(" logits {:.3e}", norm(&out.logits.to_tensor()));
        return Err(Error::Diverged(report));
    }
    let hit = argmax(&out.logits.to_tensor()) == sample.label;
    let grads = tape.backward(loss.scale(1.0 / batch as f64))?;
    store.accumulate(&s, &grads);
    Ok((value, hit))
}

fn session_seed(seed: u64, epoch: usize, index: u32) -> u64 {
    seed ^ ((epoch as u64) << 40) ^ u64::from(index).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

/// Trains `net` on the training split, writing `epoch,step,split,loss,accuracy`
/// lines to `log`: one per optimizer step for the training batch and one per
/// epoch for the validation split.
pub fn train(
    net: &AttributeNet,
    store: &mut ParamStore,
    data: &Dataset,
    config: &TrainConfig,
    log: &mut dyn Write,
) -> Result<TrainHistory> {
    config.validate()?;
    check_compatible(net, data)?;
    let mut adam = Adam::new(store, config.clone());
    let mut history = TrainHistory::default();
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut step = 0;
    writeln!(log, "epoch,step,split,loss,accuracy")?;
    for epoch in 0..config.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(epoch as u64));
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch) {
            store.zero_grad();
            let (mut loss, mut hits) = (0.0, 0);
            for &k in batch {
                let sample = &data.train[k];
                let (l, hit) =
                    train_sample(net, store, sample, batch.len(), session_seed(config.seed, epoch, sample.index))?;
                loss += l;
                hits += usize::from(hit);
            }
            adam.step(store);
            step += 1;
            let entry = StepLog {
                epoch,
                step,
                split: "train",
                loss: loss / batch.len() as f64,
                accuracy: hits as f64 / batch.len() as f64,
            };
            writeln!(log, "{}", entry.line())?;
            history.entries.push(entry);
        }
        if !data.val.is_empty() {
            let (loss, accuracy) = loss_and_accuracy(net, store, &data.val)?;
            let entry = StepLog { epoch, step, split: "val", loss, accuracy };
            writeln!(log, "{}", entry.line())?;
            history.entries.push(entry);
        }
        log.flush()?;
    }
    store.zero_grad();
    Ok(history)
}

/// Mean cross-entropy and accuracy in inference mode.
pub(crate) fn loss_and_accuracy(net: &AttributeNet, store: &ParamStore, samples: &[Sample]) -> Result<(f64, f64)> {
    use rayon::prelude::*;
    let net = net.for_inference();
    let per: Vec<(f64, bool)> = samples
        .par_iter()
        .map(|sample| {
            let tape = Tape::new();
            let mut s = Session::inference(&tape, store, 0);
            let image = s.constant(sample.image.clone());
            let query = s.constant(sample.query.clone());
            let logits = net.forward(&mut s, image, query)?.logits;
            let loss = logits.cross_entropy(sample.label)?.item();
            Ok((loss, argmax(&logits.to_tensor()) == sample.label))
        })
        .collect::<Result<_>>()?;
    let n = samples.len().max(1) as f64;
    let loss = per.iter().map(|p| p.0).sum::<f64>() / n;
    let acc = per.iter().filter(|p| p.1).count() as f64 / n;
    Ok((loss, acc))
}



#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate, DatasetSpec, GlyphSet};
    use crate::model::{AttentionKind, ModelConfig};

    fn tiny_data(train: usize) -> Dataset {
        let spec = DatasetSpec {
            image_size: 24,
            train,
            val: 4,
            test: 4,
            digits_min: 2,
            digits_max: 3,
            scale_max: 1.5,
            seed: 1,
            ..Default::default()
        };
        generate(&spec, &GlyphSet::builtin()).unwrap()
    }

    fn tiny_net(kind: AttentionKind, store: &mut ParamStore) -> AttributeNet {
        let config = ModelConfig { stacks: 2, channels: 8, hidden: 4, ..ModelConfig::new(kind, 24, 10, 5) };
        AttributeNet::new(store, config).unwrap()
    }

    #[test]
    fn loss_decreases_on_a_fixed_batch() {
        let data = tiny_data(10);
        let mut store = ParamStore::new();
        let net = tiny_net(AttentionKind::Arnn, &mut store);
        let config = TrainConfig { batch: 10, epochs: 8, ..Default::default() };
        let history = train(&net, &mut store, &data, &config, &mut Vec::new()).unwrap();
        let losses = history.train_losses();
        assert_eq!(losses.len(), 8);
        assert!(losses.last().unwrap() < &losses[0], "{losses:?}");
    }

    #[test]
    fn identical_seeds_give_identical_parameters() {
        let data = tiny_data(6);
        let run = || {
            let mut store = ParamStore::new();
            let net = tiny_net(AttentionKind::ArnnSample, &mut store);
            let config = TrainConfig { batch: 3, epochs: 2, seed: 5, ..Default::default() };
            let mut log = Vec::new();
            train(&net, &mut store, &data, &config, &mut log).unwrap();
            (store.iter().map(|p| p.value.clone()).collect::<Vec<_>>(), log)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn log_lines_have_five_fields() {
        let data = tiny_data(4);
        let mut store = ParamStore::new();
        let net = tiny_net(AttentionKind::None, &mut store);
        let mut log = Vec::new();
        train(&net, &mut store, &data, &TrainConfig { batch: 2, epochs: 1, ..Default::default() }, &mut log).unwrap();
        let text = String::from_utf8(log).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "epoch,step,split,loss,accuracy");
        assert_eq!(lines.len(), 1 + 2 + 1);
        assert!(lines[1..].iter().all(|l| l.split(',').count() == 5));
        assert!(lines[3].starts_with("0,2,val,"));
    }

    #[test]
    fn non_finite_loss_is_reported_with_norms() {
        let data = tiny_data(2);
        let mut store = ParamStore::new();
        let net = tiny_net(AttentionKind::Ctx, &mut store);
        let head = store.find("head.weight").unwrap();
        store.get_mut(head).value.data_mut()[0] = f64::INFINITY;
        let err = train(&net, &mut store, &data, &TrainConfig { batch: 2, epochs: 1, ..Default::default() }, &mut Vec::new())
            .unwrap_err();
        match err {
            Error::Diverged(msg) => assert!(msg.contains("stack1") && msg.contains("logits"), "{msg}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn mismatched_dataset_is_rejected() {
        let data = tiny_data(2);
        let mut store = ParamStore::new();
        let config = ModelConfig { stacks: 2, ..ModelConfig::new(AttentionKind::None, 24, 5, 10) };
        let net = AttributeNet::new(&mut store, config).unwrap();
        assert!(train(&net, &mut store, &data, &TrainConfig::default(), &mut Vec::new()).is_err());
        assert!(TrainConfig { lr: 0.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { batch: 0, ..Default::default() }.validate().is_err());
    }
}
