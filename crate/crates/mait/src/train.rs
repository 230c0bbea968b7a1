//! Batch training loop over the tape-built model.
//!
//! Deterministic per seed: one ChaCha stream drives epoch shuffles and
//! stochastic-depth draws, gradients accumulate in sample order, and the
//! optimizer snaps parameters to f32 after each step.

use crate::error::{Error, Result};
use crate::maskgen::build_mask;
use crate::maskgen::MaskKind;
use crate::metrics::{als, AttentionRecord};
use crate::model::{
    build_forward, compile_masks, AdamW, DropPlan, ModelConfig, ModelParams, OptimizerConfig,
};
use crate::numerics::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
    pub opt: OptimizerConfig,
    /// Window side used for per-epoch ALS reporting.
    pub als_r: usize,
    /// Max probe samples (from the validation set) for ALS measurement.
    pub probe_samples: usize,
}

impl TrainOptions {
    pub fn toy(epochs: usize, train_len: usize, seed: u64) -> Self {
        let batch = 32;
        let steps = epochs * train_len.div_ceil(batch);
        TrainOptions {
            epochs,
            batch,
            seed,
            opt: OptimizerConfig::with_batch(batch, steps.max(1)),
            als_r: 3,
            probe_samples: 256,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub val_accuracy: f64,
    /// Per-layer ALS, averaged over heads, from the probe record.
    pub layer_als: Vec<f64>,
}

pub struct TrainOutcome {
    pub stats: Vec<EpochStats>,
    /// Probe-averaged attention record from the final measurement.
    pub record: Option<AttentionRecord>,
}

/// Argmax accuracy of eval-mode forwards over a labeled set.
pub fn evaluate(
    config: &ModelConfig,
    params: &ModelParams,
    data: &[(Tensor, usize)],
) -> Result<f64> {
    let masks = compile_masks(config)?;
    let mut correct = 0usize;
    for (img, label) in data {
        let g = build_forward(config, params, &masks, img, None, &DropPlan::eval(config.layers))?;
        let logits = g.tape.value(g.logits);
        let pred = logits
            .data()
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(i, _)| i)
            .unwrap();
        if pred == *label {
            correct += 1;
        }
    }
    Ok(correct as f64 / data.len().max(1) as f64)
}

/// Probe-batch attention record: element-wise mean of captured maps over
/// the probe samples (rows stay stochastic under averaging).
pub fn probe_record(
    config: &ModelConfig,
    params: &ModelParams,
    probe: &[(Tensor, usize)],
) -> Result<AttentionRecord> {
    if probe.is_empty() {
        return Err(Error::param("probe set is empty"));
    }
    let masks = compile_masks(config)?;
    let t = config.token_count();
    let mut sums: Vec<Vec<Tensor>> =
        vec![vec![Tensor::zeros(vec![t, t]); config.heads]; config.layers];
    for (img, _) in probe {
        let g = build_forward(config, params, &masks, img, None, &DropPlan::eval(config.layers))?;
        for (l, layer) in g.maps.iter().enumerate() {
            for (h, &m) in layer.iter().enumerate() {
                sums[l][h] = sums[l][h].add(g.tape.value(m))?;
            }
        }
    }
    let k = 1.0 / probe.len() as f64;
    for layer in &mut sums {
        for m in layer {
            *m = m.scale(k);
        }
    }
    Ok(AttentionRecord {
        maps: sums,
        grid: config.grid,
        scheme: config.scheme.clone(),
    })
}

/// ALS table (layer x head) for a record, scored against an R x R window.
pub fn als_table(record: &AttentionRecord, r: usize) -> Result<Vec<Vec<f64>>> {
    let mask = build_mask(record.grid, MaskKind::Hard, r)?;
    record
        .maps
        .iter()
        .map(|layer| layer.iter().map(|m| als(m, &mask)).collect())
        .collect()
}

/// Trains in place. Emits one [`EpochStats`] per epoch; epoch 0 runs no
/// steps and produces no stats.
pub fn train_loop(
    config: &ModelConfig,
    params: &mut ModelParams,
    train: &[(Tensor, usize)],
    val: &[(Tensor, usize)],
    opts: &TrainOptions,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::param("empty training set"));
    }
    let (h, w, c) = config.image_shape();
    for (img, label) in train.iter().chain(val) {
        if img.shape() != [h, w, c] {
            return Err(Error::dim(format!(
                "sample shape {:?} does not match config image {:?}",
                img.shape(),
                (h, w, c)
            )));
        }
        if *label >= config.classes {
            return Err(Error::Dataset(format!(
                "label {label} out of {} classes",
                config.classes
            )));
        }
    }
    let masks = compile_masks(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut opt = AdamW::new(opts.opt.clone(), params);
    let mut stats = Vec::with_capacity(opts.epochs);

    for epoch in 0..opts.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(opts.batch) {
            let mut grads: Vec<Tensor> = params
                .manifest()
                .iter()
                .map(|(_, t)| Tensor::zeros(t.shape().to_vec()))
                .collect();
            for &idx in chunk {
                let (img, label) = &train[idx];
                let drop = DropPlan::sample(config, &mut rng);
                let g = build_forward(config, params, &masks, img, Some(*label), &drop)?;
                let loss = g.loss.expect("label handed in");
                loss_sum += g.tape.value(loss).item();
                let back = g.tape.backward(loss)?;
                for (i, var) in g.params.vars.iter().enumerate() {
                    if let Some(gr) = back.wrt(*var) {
                        grads[i] = grads[i].add(gr)?;
                    }
                }
            }
            let scale = 1.0 / chunk.len() as f64;
            for g in &mut grads {
                *g = g.scale(scale);
            }
            opt.step(params, &grads)?;
        }
        let val_accuracy = if val.is_empty() {
            0.0
        } else {
            evaluate(config, params, val)?
        };
        let probe = &val[..val.len().min(opts.probe_samples)];
        let layer_als = if probe.is_empty() {
            vec![]
        } else {
            let record = probe_record(config, params, probe)?;
            als_table(&record, opts.als_r)?
                .iter()
                .map(|row| row.iter().sum::<f64>() / row.len() as f64)
                .collect()
        };
        stats.push(EpochStats {
            epoch,
            mean_loss: loss_sum / train.len() as f64,
            val_accuracy,
            layer_als,
        });
    }

    let record = if val.is_empty() {
        None
    } else {
        let probe = &val[..val.len().min(opts.probe_samples)];
        Some(probe_record(config, params, probe)?)
    };
    Ok(TrainOutcome { stats, record })
}
