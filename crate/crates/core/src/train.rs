//! Training and evaluation loops: Adam over per-sample tapes, k-fold
//! cross-validation, and reproducible metrics streams.
//!
//! Determinism contract: for a fixed config the fold split, the per-epoch
//! shuffles, the batch order, and the gradient reduction order are all
//! derived from the seed, and batch gradients are reduced in sample order
//! regardless of how many worker threads computed them. Two runs with the
//! same manifest therefore produce bit-identical metrics and checkpoints.
//!
//! Wall-clock timings are measured and reported on the side but kept out
//! of the serialized metrics lines, which must be reproducible.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::adam::{clip_global_norm, sgd_adam_step, AdamConfig, AdamState};
use crate::autodiff::{GradBundle, Tape};
use crate::error::{Error, Result};
use crate::layers::network::{build_network, HeadKind, Network, NetworkSpec, Output, TapeHead};
use crate::synth::{Dataset, LabeledSample, Target};

/// Loss value above which training aborts as divergent.
pub const DIVERGENCE_ABORT: f64 = 1e6;
/// Default gradient clipping threshold (global L2 norm).
pub const DEFAULT_CLIP_NORM: f64 = 10.0;

/// Training configuration. Defaults follow the experimental recipe:
/// Adam at learning rate 0.005, 10-fold cross-validation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub folds: usize,
    pub seed: u64,
    pub clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.005,
            epochs: 30,
            batch_size: 10,
            folds: 10,
            seed: 0,
            clip_norm: Some(DEFAULT_CLIP_NORM),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::InvalidSpec {
                index: None,
                reason: "epochs must be >= 1".into(),
            });
        }
        if !(self.lr > 0.0) {
            return Err(Error::InvalidSpec {
                index: None,
                reason: format!("learning rate must be > 0, got {}", self.lr),
            });
        }
        if self.batch_size == 0 || self.folds == 0 {
            return Err(Error::InvalidSpec {
                index: None,
                reason: "batch size and folds must be >= 1".into(),
            });
        }
        Ok(())
    }
}

/// One metrics line: epoch, split, loss, task metric, parameter count.
/// The measured wall-clock seconds ride along for console reporting but
/// are excluded from serialization so metrics streams stay bit-identical
/// across reruns.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub metric_name: String,
    pub metric: f64,
    pub param_count: usize,
    #[serde(skip)]
    pub wall_clock_secs: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FoldSummary {
    pub fold: usize,
    pub test_loss: f64,
    pub test_metric: f64,
}

/// Everything a training run produces.
#[derive(Debug)]
pub struct TrainReport {
    pub records: Vec<MetricsRecord>,
    pub fold_summaries: Vec<FoldSummary>,
    pub mean_test_metric: f64,
    pub std_test_metric: f64,
    pub final_train_metric: f64,
    pub metric_name: String,
    pub network: Network,
    pub wall_clock_secs: f64,
}

impl TrainReport {
    /// Line-delimited JSON metrics stream (reproducible: no timings).
    pub fn metrics_lines(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("record serializes"));
            out.push('\n');
        }
        out
    }
}

fn metric_name(head: HeadKind) -> &'static str {
    match head {
        HeadKind::Classification { .. } => "accuracy",
        HeadKind::Regression => "r2",
    }
}

fn check_task_match(head: HeadKind, samples: &[LabeledSample]) -> Result<()> {
    for s in samples {
        match (head, &s.target) {
            (HeadKind::Classification { classes }, Target::Class(c)) => {
                if *c >= classes {
                    return Err(Error::InvalidSpec {
                        index: None,
                        reason: format!("label {c} out of range for {classes} classes"),
                    });
                }
            }
            (HeadKind::Regression, Target::Scalar { .. }) => {}
            _ => {
                return Err(Error::InvalidSpec {
                    index: None,
                    reason: "dataset targets do not match the network head".into(),
                })
            }
        }
    }
    Ok(())
}

/// Per-sample loss, prediction, and gradient from one fresh tape.
fn sample_pass(net: &Network, sample: &LabeledSample) -> Result<(f64, f64, GradBundle)> {
    let mut tape = Tape::new(&net.params);
    let head = net.forward_on_tape(&mut tape, &sample.image)?;
    match (head, &sample.target) {
        (TapeHead::Logits(logits), Target::Class(label)) => {
            let loss = tape.softmax_cross_entropy(logits, *label)?;
            let loss_val = tape.value(loss).scalar()?;
            let z = tape.value(logits).mat()?;
            let pred = z
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .map(|(i, _)| i)
                .unwrap_or(0);
            let grads = tape.backward(loss)?;
            Ok((loss_val, pred as f64, grads))
        }
        (TapeHead::Scalar(pred_node), Target::Scalar { noisy, .. }) => {
            let neg_target = tape.constant_scalar(-noisy);
            let diff = tape.add(pred_node, neg_target)?;
            let loss = tape.scale(diff, diff)?;
            let loss_val = tape.value(loss).scalar()?;
            let pred = tape.value(pred_node).scalar()?;
            let grads = tape.backward(loss)?;
            Ok((loss_val, pred, grads))
        }
        _ => Err(Error::ContractViolation(
            "network head does not match sample target".into(),
        )),
    }
}

/// Forward-only loss and prediction.
fn predict(net: &Network, sample: &LabeledSample) -> Result<(f64, f64)> {
    match (net.forward(&sample.image)?, &sample.target) {
        (Output::Probs(p), Target::Class(label)) => {
            let pred = p
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .map(|(i, _)| i)
                .unwrap_or(0);
            let loss = -(p[*label].max(1e-300)).ln();
            Ok((loss, pred as f64))
        }
        (Output::Scalar(pred), Target::Scalar { noisy, .. }) => Ok(((pred - noisy).powi(2), pred)),
        _ => Err(Error::ContractViolation(
            "network head does not match sample target".into(),
        )),
    }
}

/// Task metric over (prediction, sample) pairs: classification accuracy,
/// or R^2 against the noise-free generating functional for regression.
fn compute_metric(head: HeadKind, preds: &[f64], samples: &[&LabeledSample]) -> f64 {
    match head {
        HeadKind::Classification { .. } => {
            let correct = preds
                .iter()
                .zip(samples.iter())
                .filter(|(p, s)| s.target.class() == Some(**p as usize))
                .count();
            correct as f64 / preds.len().max(1) as f64
        }
        HeadKind::Regression => {
            let truths: Vec<f64> = samples
                .iter()
                .map(|s| match &s.target {
                    Target::Scalar { clean, .. } => *clean,
                    Target::Class(_) => f64::NAN,
                })
                .collect();
            r_squared(preds, &truths)
        }
    }
}

/// Coefficient of determination.
pub fn r_squared(preds: &[f64], truths: &[f64]) -> f64 {
    if preds.is_empty() {
        return f64::NAN;
    }
    let mean = truths.iter().sum::<f64>() / truths.len() as f64;
    let ss_res: f64 = preds
        .iter()
        .zip(truths.iter())
        .map(|(p, t)| (p - t).powi(2))
        .sum();
    let ss_tot: f64 = truths.iter().map(|t| (t - mean).powi(2)).sum();
    if ss_tot == 0.0 {
        return if ss_res == 0.0 { 1.0 } else { f64::NEG_INFINITY };
    }
    1.0 - ss_res / ss_tot
}

fn mix_seed(seed: u64, salt: u64) -> u64 {
    let mut x = seed ^ salt.wrapping_mul(0x9E3779B97F4A7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D049BB133111EB);
    x ^ (x >> 31)
}

/// Trains one network on `train_idx`, appending per-epoch records.
fn train_one_fold(
    net: &mut Network,
    ds: &Dataset,
    train_idx: &[usize],
    cfg: &TrainConfig,
    fold: usize,
    records: &mut Vec<MetricsRecord>,
) -> Result<f64> {
    let head = net.head();
    let adam_cfg = AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    };
    let mut adam = AdamState::new(&net.params);
    let mut last_train_metric = 0.0;
    for epoch in 0..cfg.epochs {
        let t0 = Instant::now();
        let mut order = train_idx.to_vec();
        let mut rng =
            ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, ((fold as u64) << 32) | epoch as u64));
        order.shuffle(&mut rng);

        let mut epoch_loss = 0.0;
        let mut preds: Vec<f64> = Vec::with_capacity(order.len());
        let mut seen: Vec<&LabeledSample> = Vec::with_capacity(order.len());
        for batch in order.chunks(cfg.batch_size) {
            // parallel per-sample passes, reduced in batch order
            let results: Vec<Result<(f64, f64, GradBundle)>> = batch
                .par_iter()
                .map(|&i| sample_pass(net, &ds.samples[i]))
                .collect();
            let mut total = GradBundle::zeros_like(&net.params);
            for (&i, r) in batch.iter().zip(results.into_iter()) {
                let (loss, pred, grads) = r?;
                if !loss.is_finite() {
                    return Err(Error::PoisonedGradient {
                        node: 0,
                        op: "loss".into(),
                    });
                }
                if loss > DIVERGENCE_ABORT {
                    return Err(Error::Divergence { loss });
                }
                epoch_loss += loss;
                preds.push(pred);
                seen.push(&ds.samples[i]);
                total.accumulate(&grads);
            }
            total.scale(1.0 / batch.len() as f64);
            if let Some(max_norm) = cfg.clip_norm {
                clip_global_norm(&mut total, max_norm);
            }
            sgd_adam_step(&mut net.params, &total, &mut adam, &adam_cfg);
        }
        let train_loss = epoch_loss / order.len().max(1) as f64;
        let train_metric = compute_metric(head, &preds, &seen);
        last_train_metric = train_metric;
        records.push(MetricsRecord {
            epoch,
            split: format!("fold{fold}/train"),
            loss: train_loss,
            metric_name: metric_name(head).to_string(),
            metric: train_metric,
            param_count: net.param_count(),
            wall_clock_secs: t0.elapsed().as_secs_f64(),
        });
    }
    Ok(last_train_metric)
}

/// Evaluates a network over a sample subset; returns (mean loss, metric).
pub fn evaluate_subset(net: &Network, samples: &[&LabeledSample]) -> Result<(f64, f64)> {
    let head = net.head();
    let results: Vec<Result<(f64, f64)>> = samples.par_iter().map(|s| predict(net, s)).collect();
    let mut losses = Vec::with_capacity(samples.len());
    let mut preds = Vec::with_capacity(samples.len());
    for r in results {
        let (loss, pred) = r?;
        losses.push(loss);
        preds.push(pred);
    }
    let loss = losses.iter().sum::<f64>() / losses.len().max(1) as f64;
    Ok((loss, compute_metric(head, &preds, samples)))
}

/// Evaluation result for a whole dataset.
#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub loss: f64,
    pub metric_name: String,
    pub metric: f64,
    pub samples: usize,
    pub per_sample_secs: f64,
}

pub fn evaluate(net: &Network, ds: &Dataset) -> Result<EvalReport> {
    if ds.samples.is_empty() {
        return Err(Error::InvalidSpec {
            index: None,
            reason: "cannot evaluate on an empty dataset".into(),
        });
    }
    check_task_match(net.head(), &ds.samples)?;
    let refs: Vec<&LabeledSample> = ds.samples.iter().collect();
    let t0 = Instant::now();
    let (loss, metric) = evaluate_subset(net, &refs)?;
    let elapsed = t0.elapsed().as_secs_f64();
    Ok(EvalReport {
        loss,
        metric_name: metric_name(net.head()).to_string(),
        metric,
        samples: ds.samples.len(),
        per_sample_secs: elapsed / ds.samples.len() as f64,
    })
}

/// K-fold cross-validated training. `folds == 1` trains on everything
/// (no held-out split). Returns per-epoch records, per-fold summaries,
/// and the last fold's trained network.
pub fn train_kfold(ds: &Dataset, spec: &NetworkSpec, cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    let head = spec.validate()?;
    if ds.samples.is_empty() {
        return Err(Error::InvalidSpec {
            index: None,
            reason: "dataset is empty".into(),
        });
    }
    check_task_match(head, &ds.samples)?;
    if cfg.folds > 1 && ds.samples.len() < 2 * cfg.folds {
        return Err(Error::InvalidSpec {
            index: None,
            reason: format!(
                "{} samples cannot fill {} folds",
                ds.samples.len(),
                cfg.folds
            ),
        });
    }

    let t_start = Instant::now();
    let mut shuffled: Vec<usize> = (0..ds.samples.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 0xF01D));
    shuffled.shuffle(&mut rng);

    let mut records = Vec::new();
    let mut fold_summaries = Vec::new();
    let mut final_network = None;
    let mut final_train_metric = 0.0;

    for fold in 0..cfg.folds {
        let (train_idx, test_idx): (Vec<usize>, Vec<usize>) = if cfg.folds == 1 {
            (shuffled.clone(), Vec::new())
        } else {
            let test: Vec<usize> = shuffled
                .iter()
                .copied()
                .skip(fold)
                .step_by(cfg.folds)
                .collect();
            let test_set: std::collections::HashSet<usize> = test.iter().copied().collect();
            let train = shuffled
                .iter()
                .copied()
                .filter(|i| !test_set.contains(i))
                .collect();
            (train, test)
        };
        let mut net = build_network(spec, mix_seed(cfg.seed, 0xB00 + fold as u64))?;
        final_train_metric = train_one_fold(&mut net, ds, &train_idx, cfg, fold, &mut records)?;
        if !test_idx.is_empty() {
            let test_samples: Vec<&LabeledSample> =
                test_idx.iter().map(|&i| &ds.samples[i]).collect();
            let (test_loss, test_metric) = evaluate_subset(&net, &test_samples)?;
            records.push(MetricsRecord {
                epoch: cfg.epochs - 1,
                split: format!("fold{fold}/test"),
                loss: test_loss,
                metric_name: metric_name(head).to_string(),
                metric: test_metric,
                param_count: net.param_count(),
                wall_clock_secs: 0.0,
            });
            fold_summaries.push(FoldSummary {
                fold,
                test_loss,
                test_metric,
            });
        }
        final_network = Some(net);
    }

    let metrics: Vec<f64> = fold_summaries.iter().map(|f| f.test_metric).collect();
    let mean = if metrics.is_empty() {
        final_train_metric
    } else {
        metrics.iter().sum::<f64>() / metrics.len() as f64
    };
    let std = if metrics.len() > 1 {
        (metrics.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / metrics.len() as f64).sqrt()
    } else {
        0.0
    };

    Ok(TrainReport {
        records,
        fold_summaries,
        mean_test_metric: mean,
        std_test_metric: std,
        final_train_metric,
        metric_name: metric_name(head).to_string(),
        network: final_network.expect("at least one fold"),
        wall_clock_secs: t_start.elapsed().as_secs_f64(),
    })
}

/// Reproducibility manifest written next to every run's outputs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub seed: u64,
    pub crate_version: String,
    pub checkpoint_version: String,
    pub dataset_format: String,
    pub dataset_checksum: Option<String>,
    pub single_thread: bool,
    pub config: serde_json::Value,
}

impl RunManifest {
    pub fn new(command: &str, seed: u64, config: serde_json::Value) -> Self {
        RunManifest {
            command: command.to_string(),
            seed,
            crate_version: env!("CARGO_PKG_VERSION").to_string(),
            checkpoint_version: crate::layers::network::CHECKPOINT_VERSION.to_string(),
            dataset_format: "mvt-v1".to_string(),
            dataset_checksum: None,
            single_thread: false,
            config,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::network::{LayerSpec, NetworkSpec};
    use crate::layers::{AnchorPolicy, Padding, TreluBase};
    use crate::manifold::ManifoldId;
    use crate::synth::{generate, DatasetSpec, TaskKind};

    fn tiny_dataset(n: usize, noise: f64) -> Dataset {
        generate(&DatasetSpec {
            task: TaskKind::SpdImageClass,
            n_samples: n,
            dims: vec![3, 3],
            noise,
            classes: 2,
            seed: 5,
            angles_deg: None,
        })
        .unwrap()
    }

    fn tiny_net_spec() -> NetworkSpec {
        NetworkSpec {
            manifold: ManifoldId::Spd(3),
            input_dims: vec![3, 3],
            input_channels: 1,
            layers: vec![
                LayerSpec::Mvc {
                    window: vec![3, 3],
                    in_channels: 1,
                    out_channels: 1,
                    stride: vec![1, 1],
                    padding: Padding::Periodic,
                    anchor: AnchorPolicy::CenterPixel,
                },
                LayerSpec::TRelu {
                    base: TreluBase::CanonicalBase,
                },
                LayerSpec::Mvfc,
                LayerSpec::EuclideanFc {
                    in_dim: 9,
                    out_dim: 2,
                    relu: false,
                },
                LayerSpec::Softmax,
            ],
        }
    }

    #[test]
    fn memorizes_separable_data() {
        // zero noise, no hidden convolution needed: distance features on
        // raw pixels separate the templates immediately
        let ds = tiny_dataset(8, 0.0);
        let spec = NetworkSpec {
            manifold: ManifoldId::Spd(3),
            input_dims: vec![3, 3],
            input_channels: 1,
            layers: vec![
                LayerSpec::Mvfc,
                LayerSpec::EuclideanFc {
                    in_dim: 9,
                    out_dim: 2,
                    relu: false,
                },
                LayerSpec::Softmax,
            ],
        };
        let cfg = TrainConfig {
            epochs: 60,
            batch_size: 4,
            folds: 1,
            seed: 1,
            ..TrainConfig::default()
        };
        let report = train_kfold(&ds, &spec, &cfg).unwrap();
        assert!(
            report.final_train_metric == 1.0,
            "train accuracy {}",
            report.final_train_metric
        );
    }

    #[test]
    fn deterministic_across_runs() {
        let ds = tiny_dataset(8, 0.05);
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 4,
            folds: 2,
            seed: 9,
            ..TrainConfig::default()
        };
        let a = train_kfold(&ds, &tiny_net_spec(), &cfg).unwrap();
        let b = train_kfold(&ds, &tiny_net_spec(), &cfg).unwrap();
        assert_eq!(a.metrics_lines(), b.metrics_lines());
        let ca = crate::layers::network::checkpoint_bytes(&a.network, cfg.seed).unwrap();
        let cb = crate::layers::network::checkpoint_bytes(&b.network, cfg.seed).unwrap();
        assert_eq!(ca, cb);
    }

    #[test]
    fn eval_on_training_data_matches_logged_accuracy() {
        let ds = tiny_dataset(8, 0.0);
        let cfg = TrainConfig {
            epochs: 30,
            batch_size: 4,
            folds: 1,
            seed: 2,
            ..TrainConfig::default()
        };
        let report = train_kfold(&ds, &tiny_net_spec(), &cfg).unwrap();
        let eval = evaluate(&report.network, &ds).unwrap();
        assert!(eval.metric >= report.final_train_metric - 1e-9);
        assert!(eval.per_sample_secs > 0.0);
    }

    #[test]
    fn empty_dataset_is_usage_error() {
        let ds = Dataset {
            spec: tiny_dataset(4, 0.0).spec,
            samples: Vec::new(),
        };
        let net = build_network(&tiny_net_spec(), 1).unwrap();
        assert!(matches!(evaluate(&net, &ds), Err(Error::InvalidSpec { .. })));
    }

    #[test]
    fn metrics_lines_have_no_timing() {
        let ds = tiny_dataset(8, 0.05);
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 4,
            folds: 1,
            seed: 3,
            ..TrainConfig::default()
        };
        let report = train_kfold(&ds, &tiny_net_spec(), &cfg).unwrap();
        let lines = report.metrics_lines();
        assert!(lines.contains("\"split\":\"fold0/train\""));
        assert!(!lines.contains("wall_clock"));
    }

    #[test]
    fn r_squared_basics() {
        assert!((r_squared(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]) - 1.0).abs() < 1e-15);
        let r = r_squared(&[2.0, 2.0, 2.0], &[1.0, 2.0, 3.0]);
        assert!(r < 1.0);
    }
}
