//! Deterministic training and evaluation.
//!
//! Shuffling, augmentation, and parameter initialization all draw from
//! pinned generator streams derived from one seed, so a fixed config
//! reproduces bit-identical metrics and checkpoints. The training step is a
//! single logical writer; evaluation fans out over worker threads, each
//! with its own copy of the (read-only) model.

use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use geo_cnn_core::model::{
    build_model, prepare_cloud, stack_batch, GeoCnnConfig, Model, ModelGrads, PreparedCloud,
};
use geo_cnn_core::nn::{adam_step, softmax_cross_entropy_batch, AdamHyper, Mode};
use geo_cnn_core::pointcloud::{normalize_unit_sphere, rotate_z, sample_points, PointCloud};
use geo_cnn_core::rng::{derive_seed, Rng};

use crate::checkpoint::save_checkpoint;

/// Stream tags for the per-purpose generators.
const STREAM_SHUFFLE: u64 = 0x53485546;
const STREAM_AUGMENT: u64 = 0x41554746;
const STREAM_SAMPLE: u64 = 0x53414d50;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamHyper,
    /// Learning rate multiplier applied every `lr_decay_interval` epochs.
    pub lr_decay_factor: f64,
    pub lr_decay_interval: usize,
    pub seed: u64,
    /// Epochs between checkpoints; 0 writes only the final one.
    pub checkpoint_interval: usize,
    /// Re-draw a uniform z-rotation per sample per epoch.
    pub rotation_augment: bool,
    pub workers: usize,
    /// Stop early once the test overall accuracy reaches this value.
    pub target_accuracy: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 40,
            batch_size: 8,
            adam: AdamHyper::default(),
            lr_decay_factor: 0.7,
            lr_decay_interval: 20,
            seed: 42,
            checkpoint_interval: 0,
            rotation_augment: false,
            workers: std::thread::available_parallelism().map_or(1, |n| n.get()),
            target_accuracy: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss: f64,
    pub acc_overall: f64,
    pub acc_class: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalMetrics {
    pub n: usize,
    pub loss: f64,
    pub acc_overall: f64,
    /// Unweighted mean of per-class recalls over the classes present.
    pub acc_class: f64,
    pub per_class: Vec<f64>,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<u32>>,
}

/// Adam moments in [`Model::visit`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub t: u64,
    pub moments: Vec<(String, Vec<f32>, Vec<f32>)>,
}

impl AdamState {
    pub fn new(model: &Model<f32>) -> Self {
        let mut moments = Vec::new();
        model.visit(&mut |name, _, _, data| {
            moments.push((name.to_string(), vec![0.0; data.len()], vec![0.0; data.len()]));
        });
        AdamState { t: 0, moments }
    }

    /// One optimizer step over every parameter. Gradient order is pinned to
    /// [`Model::visit`] order (checked by name in debug builds).
    pub fn step(&mut self, model: &mut Model<f32>, grads: &ModelGrads<f32>, hyper: &AdamHyper) {
        self.t += 1;
        let t = self.t;
        let mut flat_grads: Vec<&[f32]> = Vec::with_capacity(self.moments.len());
        grads.visit(&mut |_, data| flat_grads.push(data));
        debug_assert_eq!(flat_grads.len(), self.moments.len());
        let moments = &mut self.moments;
        let mut idx = 0usize;
        model.visit_mut(&mut |name, param| {
            let (m_name, m, v) = &mut moments[idx];
            debug_assert_eq!(name, m_name.as_str(), "gradient order diverged");
            adam_step(param, flat_grads[idx], m, v, t, hyper);
            idx += 1;
        });
        debug_assert_eq!(idx, flat_grads.len());
    }
}

/// Draws `n_points` per cloud (seeded per index) and normalizes to the unit
/// sphere; clouds already at the target size are still passed through both
/// steps so preprocessing is uniform.
pub fn preprocess_clouds(
    clouds: &[PointCloud],
    n_points: usize,
    seed: u64,
) -> Result<Vec<PointCloud>> {
    clouds
        .iter()
        .enumerate()
        .map(|(i, cloud)| {
            let s = derive_seed(derive_seed(seed, STREAM_SAMPLE), i as u64);
            let sampled = sample_points(cloud, n_points, s)?;
            Ok(normalize_unit_sphere(&sampled))
        })
        .collect()
}

pub fn prepare_all(clouds: &[PointCloud], config: &GeoCnnConfig) -> Result<Vec<PreparedCloud>> {
    clouds
        .iter()
        .map(|c| prepare_cloud(c, config).map_err(anyhow::Error::from))
        .collect()
}

fn labels_of(clouds: &[PreparedCloud]) -> Result<Vec<u32>> {
    clouds
        .iter()
        .enumerate()
        .map(|(i, c)| c.label.with_context(|| format!("cloud {i} has no label")))
        .collect()
}

/// Learning rate for an epoch under the step-decay schedule.
pub fn epoch_lr(cfg: &TrainConfig, epoch: usize) -> f64 {
    let steps = if cfg.lr_decay_interval == 0 {
        0
    } else {
        epoch / cfg.lr_decay_interval
    };
    cfg.adam.lr * cfg.lr_decay_factor.powi(steps as i32)
}

/// Trains in place, evaluating on the test set after every epoch. Writes
/// `metrics.csv`, `summary.json`, `confusion.csv` and checkpoints into
/// `out_dir` when given. Returns the per-epoch history.
pub fn train(
    model: &mut Model<f32>,
    train_clouds: &[PointCloud],
    test_clouds: &[PointCloud],
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<Vec<EpochMetrics>> {
    if train_clouds.is_empty() || test_clouds.is_empty() {
        bail!("train and test sets must be non-empty");
    }
    if cfg.batch_size < 2 {
        bail!("batch_size must be at least 2 (batch statistics need 2 rows)");
    }
    if cfg.epochs == 0 {
        bail!("epochs must be at least 1");
    }
    let config = model.config.clone();
    let prepared_test = prepare_all(test_clouds, &config)?;
    let cached_train: Option<Vec<PreparedCloud>> = if cfg.rotation_augment {
        None
    } else {
        Some(prepare_all(train_clouds, &config)?)
    };
    for (i, c) in train_clouds.iter().enumerate() {
        c.label()
            .with_context(|| format!("training cloud {i} has no label"))?;
    }

    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("metrics.csv"), "epoch,loss,acc_overall,acc_class,seconds\n")?;
    }

    let mut shuffle_rng = Rng::from_seed_stream(cfg.seed, STREAM_SHUFFLE);
    let mut augment_rng = Rng::from_seed_stream(cfg.seed, STREAM_AUGMENT);
    let mut adam = AdamState::new(model);
    let mut history: Vec<EpochMetrics> = Vec::new();

    for epoch in 0..cfg.epochs {
        let t0 = Instant::now();
        let lr = epoch_lr(cfg, epoch);
        let mut order: Vec<u32> = (0..train_clouds.len() as u32).collect();
        shuffle_rng.shuffle(&mut order);

        let mut loss_sum = 0.0f64;
        let mut seen = 0usize;
        for batch_idx in order.chunks(cfg.batch_size) {
            // A trailing single-cloud batch cannot feed batch statistics.
            if batch_idx.len() < 2 {
                continue;
            }
            let members: Vec<PreparedCloud>;
            let refs: Vec<&PreparedCloud> = match &cached_train {
                Some(cache) => batch_idx.iter().map(|&i| &cache[i as usize]).collect(),
                None => {
                    members = batch_idx
                        .iter()
                        .map(|&i| {
                            let angle =
                                augment_rng.uniform(0.0, core::f64::consts::TAU) as f32;
                            let rotated = rotate_z(&train_clouds[i as usize], angle);
                            prepare_cloud(&rotated, &config).map_err(anyhow::Error::from)
                        })
                        .collect::<Result<Vec<_>>>()?;
                    members.iter().collect()
                }
            };
            let batch = stack_batch::<f32>(&refs)?;
            let labels = labels_of_batch(&batch.labels)?;
            let (logits, cache) = model.forward(&batch, Mode::Train)?;
            let (loss, grad) = softmax_cross_entropy_batch(&logits, &labels)?;
            let (grads, _) = model.backward(&cache, &grad)?;
            adam.step(model, &grads, &AdamHyper { lr, ..cfg.adam });
            loss_sum += loss as f64 * batch_idx.len() as f64;
            seen += batch_idx.len();
        }
        let train_loss = if seen > 0 { loss_sum / seen as f64 } else { f64::NAN };

        let eval = evaluate(model, &prepared_test, cfg.workers)?;
        let metrics = EpochMetrics {
            epoch,
            loss: train_loss,
            acc_overall: eval.acc_overall,
            acc_class: eval.acc_class,
            seconds: t0.elapsed().as_secs_f64(),
        };
        if let Some(dir) = out_dir {
            let mut f = std::fs::OpenOptions::new()
                .append(true)
                .open(dir.join("metrics.csv"))?;
            writeln!(
                f,
                "{},{},{},{},{}",
                metrics.epoch, metrics.loss, metrics.acc_overall, metrics.acc_class,
                metrics.seconds
            )?;
            let do_ckpt = cfg.checkpoint_interval > 0
                && (epoch + 1) % cfg.checkpoint_interval == 0;
            if do_ckpt {
                save_checkpoint(&dir.join(format!("checkpoint_{:04}.gck", epoch + 1)), model, Some(&adam))?;
            }
        }
        history.push(metrics);

        let reached = cfg
            .target_accuracy
            .is_some_and(|target| eval.acc_overall >= target);
        if reached {
            break;
        }
    }

    if let Some(dir) = out_dir {
        save_checkpoint(&dir.join("model.gck"), model, Some(&adam))?;
        let eval = evaluate(model, &prepared_test, cfg.workers)?;
        write_confusion(&dir.join("confusion.csv"), &eval.confusion)?;
        let last = history.last().expect("at least one epoch ran");
        let summary = format!(
            "{{\n  \"epochs_run\": {},\n  \"final_loss\": {},\n  \"final_acc_overall\": {},\n  \"final_acc_class\": {},\n  \"seed\": {}\n}}\n",
            history.len(),
            last.loss,
            last.acc_overall,
            last.acc_class,
            cfg.seed
        );
        std::fs::write(dir.join("summary.json"), summary)?;
    }
    Ok(history)
}

fn labels_of_batch(labels: &[Option<u32>]) -> Result<Vec<u32>> {
    labels
        .iter()
        .enumerate()
        .map(|(i, l)| l.with_context(|| format!("batch member {i} has no label")))
        .collect()
}

pub fn write_confusion(path: &Path, confusion: &[Vec<u32>]) -> Result<()> {
    let mut text = String::new();
    for row in confusion {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        text.push_str(&cells.join(","));
        text.push('\n');
    }
    std::fs::write(path, text)?;
    Ok(())
}

/// Evaluates in eval mode. The cloud set is split into contiguous chunks,
/// one worker (with its own model copy) per chunk; per-cloud predictions are
/// merged by index, so the result does not depend on the worker count.
pub fn evaluate(
    model: &Model<f32>,
    clouds: &[PreparedCloud],
    workers: usize,
) -> Result<EvalMetrics> {
    if clouds.is_empty() {
        bail!("cannot evaluate an empty set");
    }
    let labels = labels_of(clouds)?;
    let num_classes = model.config.num_classes;

    let eval_chunk = |model: &mut Model<f32>, chunk: &[PreparedCloud]| -> Result<Vec<(u32, f64)>> {
        let mut out = Vec::with_capacity(chunk.len());
        // Small stacks amortize the per-call overhead; eval mode has no
        // cross-cloud coupling so the grouping cannot change results.
        for group in chunk.chunks(8) {
            let refs: Vec<&PreparedCloud> = group.iter().collect();
            let batch = stack_batch::<f32>(&refs)?;
            let (logits, _) = model.forward(&batch, Mode::Eval)?;
            for (ci, member) in group.iter().enumerate() {
                let row = logits.row(ci);
                let mut best = 0usize;
                for (k, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = k;
                    }
                }
                let label = member.label.expect("checked above") as usize;
                let (loss, _) =
                    geo_cnn_core::nn::softmax_cross_entropy(row, label).map_err(anyhow::Error::from)?;
                out.push((best as u32, loss as f64));
            }
        }
        Ok(out)
    };

    let workers = workers.max(1).min(clouds.len());
    let results: Vec<(u32, f64)> = if workers == 1 {
        eval_chunk(&mut model.clone(), clouds)?
    } else {
        let chunk_size = clouds.len().div_ceil(workers);
        let chunks: Vec<&[PreparedCloud]> = clouds.chunks(chunk_size).collect();
        let outputs: Vec<Result<Vec<(u32, f64)>>> = std::thread::scope(|scope| {
            let handles: Vec<_> = chunks
                .into_iter()
                .map(|chunk| {
                    let mut local = model.clone();
                    scope.spawn(move || eval_chunk(&mut local, chunk))
                })
                .collect();
            handles.into_iter().map(|h| h.join().unwrap()).collect()
        });
        let mut merged = Vec::with_capacity(clouds.len());
        for out in outputs {
            merged.extend(out?);
        }
        merged
    };

    let mut confusion = vec![vec![0u32; num_classes]; num_classes];
    let mut loss_sum = 0.0;
    for ((pred, loss), &label) in results.iter().zip(&labels) {
        confusion[label as usize][*pred as usize] += 1;
        loss_sum += loss;
    }
    let total: u32 = confusion.iter().flatten().sum();
    let correct: u32 = (0..num_classes).map(|k| confusion[k][k]).sum();
    let mut per_class = vec![f64::NAN; num_classes];
    let mut class_sum = 0.0;
    let mut class_count = 0usize;
    for k in 0..num_classes {
        let row: u32 = confusion[k].iter().sum();
        if row > 0 {
            per_class[k] = confusion[k][k] as f64 / row as f64;
            class_sum += per_class[k];
            class_count += 1;
        }
    }
    Ok(EvalMetrics {
        n: clouds.len(),
        loss: loss_sum / clouds.len() as f64,
        acc_overall: correct as f64 / total as f64,
        acc_class: class_sum / class_count as f64,
        per_class,
        confusion,
    })
}
