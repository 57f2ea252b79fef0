//! SGD-with-momentum training loop, the two learning-rate schedules, the
//! synthetic desk-scale dataset, and the ablation driver.
//!
//! Runs are bit-deterministic for a fixed seed: init, batch order, and every
//! reduction have a fixed order, and the parallel kernels write disjoint
//! outputs.

use serde::{Deserialize, Serialize};

use crate::analyzer::{analyze, CostReport};
use crate::arch::{ablation_variants, build_variant, ModelSpec, VariantToggles};
use crate::decision::GateMode;
use crate::error::{Error, Result};
use crate::model::SiNetModel;
use crate::rng::Rng;
use crate::tape::{BnMode, Tape};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Schedule {
    /// lr0 * rate^epoch.
    Exponential { rate: f64 },
    /// lr0 * factor^(epoch / every).
    Step { factor: f64, every: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr0: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub schedule: Schedule,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr0 <= 0.0 {
            return Err(Error::config(format!(
                "lr0 must be positive, got {}",
                self.lr0
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be >= 1".to_string()));
        }
        Ok(())
    }
}

/// Learning rate at a (0-based) epoch.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    match cfg.schedule {
        Schedule::Exponential { rate } => cfg.lr0 * rate.powi(epoch as i32),
        Schedule::Step { factor, every } => cfg.lr0 * factor.powi((epoch / every.max(1)) as i32),
    }
}

/// Classical momentum: v <- m * v + g; p <- p - lr * v.
pub fn sgd_step(
    params: &mut [f64],
    grads: &[f64],
    velocity: &mut [f64],
    lr: f64,
    momentum: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != velocity.len() {
        return Err(Error::shape(format!(
            "sgd_step buffers disagree: {} params, {} grads, {} velocity",
            params.len(),
            grads.len(),
            velocity.len()
        )));
    }
    for ((p, &g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        *v = momentum * *v + g;
        *p -= lr * *v;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Synthetic data
// ---------------------------------------------------------------------------

/// Reproducible dataset descriptor. Gaussian blobs: each class has a fixed
/// per-channel mean pattern; pixels add unit-variance noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetDescriptor {
    pub kind: String,
    pub classes: usize,
    pub per_class: usize,
    pub channels: usize,
    pub hw: usize,
    pub separation: f64,
    pub seed: u64,
}

impl DatasetDescriptor {
    pub fn blobs(
        classes: usize,
        per_class: usize,
        channels: usize,
        hw: usize,
        separation: f64,
        seed: u64,
    ) -> Self {
        DatasetDescriptor {
            kind: "blobs".to_string(),
            classes,
            per_class,
            channels,
            hw,
            separation,
            seed,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub samples: Tensor,
    pub labels: Vec<usize>,
    pub descriptor: DatasetDescriptor,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Generate from a descriptor; the same descriptor always produces the
    /// same tensors. Samples are interleaved round-robin across classes so
    /// every batch mixes classes.
    #[allow(clippy::needless_range_loop)]
    pub fn generate(desc: &DatasetDescriptor) -> Result<Dataset> {
        if desc.kind != "blobs" {
            return Err(Error::config(format!(
                "unknown dataset kind {:?}",
                desc.kind
            )));
        }
        if desc.classes < 2 || desc.per_class == 0 {
            return Err(Error::config(
                "blobs need >= 2 classes and >= 1 sample per class".to_string(),
            ));
        }
        let mut rng = Rng::new(desc.seed);
        // Per-class, per-channel mean levels.
        let means: Vec<Vec<f64>> = (0..desc.classes)
            .map(|_| {
                (0..desc.channels)
                    .map(|_| rng.uniform(-1.0, 1.0) * desc.separation)
                    .collect()
            })
            .collect();

        let n = desc.classes * desc.per_class;
        let img = desc.channels * desc.hw * desc.hw;
        let mut data = vec![0.0; n * img];
        let mut labels = vec![0usize; n];
        for i in 0..n {
            let class = i % desc.classes;
            labels[i] = class;
            for ch in 0..desc.channels {
                let mean = means[class][ch];
                let base = i * img + ch * desc.hw * desc.hw;
                for v in &mut data[base..base + desc.hw * desc.hw] {
                    *v = mean + rng.normal();
                }
            }
        }
        Ok(Dataset {
            samples: Tensor::new(vec![n, desc.channels, desc.hw, desc.hw], data)?,
            labels,
            descriptor: desc.clone(),
        })
    }

    fn batch(&self, start: usize, len: usize) -> (Tensor, Vec<usize>) {
        let img: usize = self.samples.shape()[1..].iter().product();
        let mut shape = self.samples.shape().to_vec();
        shape[0] = len;
        let data = self.samples.data()[start * img..(start + len) * img].to_vec();
        (
            Tensor::new(shape, data).expect("batch shape"),
            self.labels[start..start + len].to_vec(),
        )
    }
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

/// The desk-scale dataset: three Gaussian blob classes at 64x64x3, strongly
/// linearly separable (a plain logistic regression clears 95%).
pub fn desk_blobs_descriptor() -> DatasetDescriptor {
    DatasetDescriptor::blobs(3, 24, 3, 64, 2.0, 2024)
}

/// The desk-scale training recipe used by the acceptance run.
pub fn desk_train_config(seed: u64) -> TrainConfig {
    TrainConfig {
        lr0: 0.03,
        momentum: 0.9,
        batch_size: 12,
        epochs: 30,
        schedule: Schedule::Exponential { rate: 0.98 },
        seed,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochStats>,
}

impl History {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,lr,loss,accuracy\n");
        for e in &self.epochs {
            out.push_str(&format!("{},{},{},{}\n", e.epoch, e.lr, e.loss, e.accuracy));
        }
        out
    }

    pub fn final_accuracy(&self) -> f64 {
        self.epochs.last().map(|e| e.accuracy).unwrap_or(0.0)
    }
}

/// Train a model built from `spec` on the dataset. Deterministic per seed.
pub fn train(spec: &ModelSpec, data: &Dataset, cfg: &TrainConfig) -> Result<History> {
    cfg.validate()?;
    if let Some(&bad) = data.labels.iter().find(|&&l| l >= spec.classes) {
        return Err(Error::config(format!(
            "label {bad} out of range for {} classes",
            spec.classes
        )));
    }
    if data.samples.shape()[2] != spec.input {
        return Err(Error::config(format!(
            "dataset is {}x{} but the spec expects {}",
            data.samples.shape()[2],
            data.samples.shape()[3],
            spec.input
        )));
    }

    let mut model = SiNetModel::build(spec, cfg.seed)?;
    let mut velocity: Vec<Vec<f64>> = model
        .store
        .ids()
        .map(|id| vec![0.0; model.store.get(id).numel()])
        .collect();

    let n = data.len();
    let mut history = History::default();
    for epoch in 0..cfg.epochs {
        let lr = lr_at(epoch, cfg);
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        let mut start = 0usize;
        while start < n {
            let len = cfg.batch_size.min(n - start);
            let (batch, labels) = data.batch(start, len);
            start += len;

            let mut tape = Tape::new();
            let fwd = model.forward(&mut tape, &batch, BnMode::Train, GateMode::Learned)?;
            let loss = tape.nll_loss(fwd.probs, &labels)?;
            loss_sum += tape.value(loss).item() * len as f64;
            seen += len;

            let grads = tape.backward(loss)?;
            for &(id, var) in fwd.bindings.pairs() {
                if let Some(g) = grads.get(var) {
                    let g = g.data().to_vec();
                    sgd_step(
                        model.store.get_mut(id).data_mut(),
                        &g,
                        &mut velocity[id.0],
                        lr,
                        cfg.momentum,
                    )?;
                }
            }
        }

        let accuracy = evaluate(&mut model, data, cfg.batch_size)?;
        history.epochs.push(EpochStats {
            epoch,
            lr,
            loss: loss_sum / seen as f64,
            accuracy,
        });
    }
    Ok(history)
}

/// Accuracy over the whole dataset in eval mode (frozen batch-norm stats).
#[allow(clippy::needless_range_loop)]
pub fn evaluate(model: &mut SiNetModel, data: &Dataset, batch_size: usize) -> Result<f64> {
    let n = data.len();
    let mut correct = 0usize;
    let mut start = 0usize;
    while start < n {
        let len = batch_size.min(n - start);
        let (batch, labels) = data.batch(start, len);
        start += len;
        let mut tape = Tape::new();
        let fwd = model.forward(&mut tape, &batch, BnMode::Eval, GateMode::Learned)?;
        let probs = tape.value(fwd.probs);
        let (rows, k) = probs.dims2()?;
        for r in 0..rows {
            let row = &probs.data()[r * k..(r + 1) * k];
            let argmax = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite probs"))
                .expect("nonempty row")
                .0;
            if argmax == labels[r] {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / n as f64)
}

// ---------------------------------------------------------------------------
// Ablation driver
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitAblationRow {
    pub variant: String,
    pub groups: usize,
    pub exchange: bool,
    pub params: u64,
    pub madds: u64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionAblationRow {
    pub attention: bool,
    pub params: u64,
    pub madds: u64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub unit_rows: Vec<UnitAblationRow>,
    pub attention_rows: Vec<AttentionAblationRow>,
}

impl AblationReport {
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<8} {:>2} {:>4} {:>12} {:>14} {:>9}\n",
            "variant", "G", "EX", "params", "madds", "acc"
        ));
        for r in &self.unit_rows {
            out.push_str(&format!(
                "{:<8} {:>2} {:>4} {:>12} {:>14} {:>9.4}\n",
                r.variant,
                r.groups,
                if r.exchange { "yes" } else { "no" },
                r.params,
                r.madds,
                r.accuracy
            ));
        }
        out.push('\n');
        out.push_str(&format!(
            "{:<10} {:>12} {:>14} {:>9}\n",
            "attention", "params", "madds", "acc"
        ));
        for r in &self.attention_rows {
            out.push_str(&format!(
                "{:<10} {:>12} {:>14} {:>9.4}\n",
                if r.attention { "yes" } else { "no" },
                r.params,
                r.madds,
                r.accuracy
            ));
        }
        out
    }
}

/// Cost columns from the analyzer, accuracy from short training runs.
/// Accuracies are reported, never asserted against any published number.
pub fn run_ablation(base: &ModelSpec, data: &Dataset, cfg: &TrainConfig) -> Result<AblationReport> {
    let mut unit_rows = Vec::new();
    for (tag, spec) in ablation_variants(base)? {
        let report: CostReport = analyze(&spec)?;
        let history = train(&spec, data, cfg)?;
        unit_rows.push(UnitAblationRow {
            variant: tag.to_string(),
            groups: spec.groups,
            exchange: spec.exchange,
            params: report.total_params,
            madds: report.total_madds,
            accuracy: history.final_accuracy(),
        });
    }

    let mut attention_rows = Vec::new();
    for attention in [false, true] {
        let spec = build_variant(
            base,
            VariantToggles {
                groups: base.groups,
                exchange: base.exchange,
                attention,
            },
        )?;
        let report = analyze(&spec)?;
        let history = train(&spec, data, cfg)?;
        attention_rows.push(AttentionAblationRow {
            attention,
            params: report.total_params,
            madds: report.total_madds,
            accuracy: history.final_accuracy(),
        });
    }

    Ok(AblationReport {
        unit_rows,
        attention_rows,
    })
}
