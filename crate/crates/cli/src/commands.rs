//! The five subcommands. Every run that writes artifacts also writes a
//! `manifest.json` carrying the exact configuration, seed, versions, and
//! dataset checksum needed to reproduce it bit-for-bit in single-threaded
//! mode (multi-threaded runs reduce gradients in a fixed order, so they
//! reproduce too; the flag removes even scheduling variance).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use mvcnet_core::error::{Error, Result};
use mvcnet_core::layers::network::{
    build_network, checkpoint_bytes, load_checkpoint, NetworkSpec,
};
use mvcnet_core::presets::{preset, PRESET_NAMES};
use mvcnet_core::synth::format::{dataset_bytes, load_dataset, sha256_hex};
use mvcnet_core::synth::{generate, Dataset, DatasetSpec};
use mvcnet_core::train::{evaluate, train_kfold, RunManifest, TrainConfig, TrainReport};
use mvcnet_core::verify::{
    grad_check_suite, run_all, FaultMode, ManifoldChoice, PropertyResult, VerifyConfig,
};

/// Train-run configuration file (`--config`): dataset path, network
/// source, and the training recipe. Command-line flags override fields.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub dataset: PathBuf,
    /// Either a preset name or a path to a network-spec JSON file.
    pub preset: Option<String>,
    pub network_spec: Option<PathBuf>,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub folds: usize,
    pub seed: u64,
    pub out: PathBuf,
}

impl RunConfig {
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
        if !self.dataset.exists() {
            return Err(Error::InvalidSpec {
                index: None,
                reason: format!("dataset file {:?} does not exist", self.dataset),
            });
        }
        if let Some(path) = &self.network_spec {
            if !path.exists() {
                return Err(Error::InvalidSpec {
                    index: None,
                    reason: format!("network spec file {path:?} does not exist"),
                });
            }
        }
        if self.preset.is_none() && self.network_spec.is_none() {
            return Err(Error::InvalidSpec {
                index: None,
                reason: "either a preset name or a network spec path is required".into(),
            });
        }
        Ok(())
    }

    fn network(&self) -> Result<NetworkSpec> {
        if let Some(path) = &self.network_spec {
            let text = fs::read_to_string(path)?;
            return serde_json::from_str(&text)
                .map_err(|e| Error::Format(format!("network spec parse failed: {e}")));
        }
        let name = self.preset.as_deref().expect("validated");
        Ok(preset(name)?.network)
    }
}

fn write_manifest(dir: &Path, manifest: &RunManifest) -> Result<()> {
    let text = serde_json::to_string_pretty(manifest)
        .map_err(|e| Error::Format(format!("manifest serialization failed: {e}")))?;
    fs::write(dir.join("manifest.json"), text)?;
    Ok(())
}

/// Output of `gen`: where the file went, how many samples, checksum.
#[derive(Debug)]
pub struct GenOutput {
    pub path: PathBuf,
    pub samples: usize,
    pub checksum: String,
}

/// Generates a dataset from a preset name or a spec file and writes the
/// `mvt-v1` container.
pub fn cmd_gen(
    preset_name: Option<&str>,
    config: Option<&Path>,
    seed_override: Option<u64>,
    out: &Path,
) -> Result<GenOutput> {
    let mut spec: DatasetSpec = match (preset_name, config) {
        (Some(name), None) => preset(name)?.dataset,
        (None, Some(path)) => {
            let text = fs::read_to_string(path)?;
            serde_json::from_str(&text)
                .map_err(|e| Error::Format(format!("dataset spec parse failed: {e}")))?
        }
        _ => {
            return Err(Error::InvalidSpec {
                index: None,
                reason: format!(
                    "exactly one of --preset / --config is required; presets: {}",
                    PRESET_NAMES.join(", ")
                ),
            })
        }
    };
    if let Some(seed) = seed_override {
        spec.seed = seed;
    }
    spec.validate()?;
    let ds = generate(&spec)?;
    let bytes = dataset_bytes(&ds)?;
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    fs::write(out, &bytes)?;
    Ok(GenOutput {
        path: out.to_path_buf(),
        samples: ds.samples.len(),
        checksum: sha256_hex(&bytes),
    })
}

/// Output of `train`.
pub struct TrainOutput {
    pub report: TrainReport,
    pub checkpoint_path: PathBuf,
    pub metrics_path: PathBuf,
}

/// Trains per the run config, writing `metrics.jsonl`, `checkpoint.ckpt`,
/// and `manifest.json` into the output directory.
pub fn cmd_train(cfg: &RunConfig, single_thread: bool) -> Result<TrainOutput> {
    cfg.validate()?;
    let ds = load_dataset(&cfg.dataset)?;
    let net_spec = cfg.network()?;
    let train_cfg = TrainConfig {
        lr: cfg.lr,
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        folds: cfg.folds,
        seed: cfg.seed,
        clip_norm: Some(mvcnet_core::train::DEFAULT_CLIP_NORM),
    };
    let report = train_kfold(&ds, &net_spec, &train_cfg)?;

    fs::create_dir_all(&cfg.out)?;
    let metrics_path = cfg.out.join("metrics.jsonl");
    fs::write(&metrics_path, report.metrics_lines())?;
    let checkpoint_path = cfg.out.join("checkpoint.ckpt");
    fs::write(
        &checkpoint_path,
        checkpoint_bytes(&report.network, cfg.seed)?,
    )?;

    let dataset_raw = fs::read(&cfg.dataset)?;
    let mut manifest = RunManifest::new(
        "train",
        cfg.seed,
        serde_json::to_value(cfg).map_err(|e| Error::Format(e.to_string()))?,
    );
    manifest.dataset_checksum = Some(sha256_hex(&dataset_raw));
    manifest.single_thread = single_thread;
    write_manifest(&cfg.out, &manifest)?;

    Ok(TrainOutput {
        report,
        checkpoint_path,
        metrics_path,
    })
}

/// Evaluation output, serializable for scripting.
#[derive(Debug, Serialize)]
pub struct EvalOutput {
    pub loss: f64,
    pub metric_name: String,
    pub metric: f64,
    pub samples: usize,
    pub per_sample_secs: f64,
}

/// Evaluates a checkpoint on a dataset.
pub fn cmd_eval(checkpoint: &Path, data: &Path) -> Result<EvalOutput> {
    let (network, _seed) = load_checkpoint(checkpoint)?;
    let ds = load_dataset(data)?;
    let report = evaluate(&network, &ds)?;
    Ok(EvalOutput {
        loss: report.loss,
        metric_name: report.metric_name,
        metric: report.metric,
        samples: report.samples,
        per_sample_secs: report.per_sample_secs,
    })
}

/// Runs the property suites; returns the per-property results.
pub fn cmd_verify(
    manifold: ManifoldChoice,
    seed: u64,
    trials: usize,
    inject_fault: bool,
    grad_checks: bool,
) -> Result<Vec<PropertyResult>> {
    let cfg = VerifyConfig {
        seed,
        trials,
        fault: if inject_fault {
            FaultMode::SkewIsometry
        } else {
            FaultMode::None
        },
        grad_checks,
        manifolds: manifold,
    };
    run_all(&cfg)
}

/// Gradient checks only.
pub fn cmd_grad_check(seed: u64, coords: usize) -> Result<Vec<PropertyResult>> {
    grad_check_suite(seed, coords)
}

/// Loads a dataset and rebuilds a fresh network from a preset, as a
/// smoke-check helper for schema debugging.
pub fn preset_network(name: &str, seed: u64) -> Result<usize> {
    let p = preset(name)?;
    let net = build_network(&p.network, seed)?;
    Ok(net.param_count())
}

/// Convenience: dataset checksum of an existing file.
pub fn dataset_checksum(path: &Path) -> Result<(usize, String)> {
    let raw = fs::read(path)?;
    let ds: Dataset = mvcnet_core::synth::format::dataset_from_bytes(&raw)?;
    Ok((ds.samples.len(), sha256_hex(&raw)))
}
