//! Named dataset / network / training presets for the three synthetic
//! tasks, shared by the CLI and the acceptance suite.
//!
//! The two trained convolution presets use center-pixel anchors: the
//! anchor of the tangent combination may be any equivariant choice, and
//! the window's fixed center position avoids a mean iteration per output
//! site, which keeps desk-scale cross-validation runs in the minutes.

use crate::error::{Error, Result};
use crate::layers::network::{LayerSpec, NetworkSpec};
use crate::layers::{AnchorPolicy, Padding, TreluBase};
use crate::manifold::ManifoldId;
use crate::synth::{DatasetSpec, TaskKind};
use crate::train::TrainConfig;

/// A full experiment preset: data, architecture, training recipe.
#[derive(Debug, Clone)]
pub struct Preset {
    pub name: &'static str,
    pub dataset: DatasetSpec,
    pub network: NetworkSpec,
    pub train: TrainConfig,
}

/// All preset names, in a stable order.
pub const PRESET_NAMES: &[&str] = &[
    "spd-class-small",
    "spd-regression-small",
    "spd-seq-30-60",
    "spd-seq-10-15",
    "spd-seq-10-15-20",
];

/// Looks a preset up by name.
pub fn preset(name: &str) -> Result<Preset> {
    match name {
        "spd-class-small" => Ok(spd_class_small()),
        "spd-regression-small" => Ok(spd_regression_small()),
        "spd-seq-30-60" => Ok(spd_seq(&[30.0, 60.0], "spd-seq-30-60", 200, 13)),
        "spd-seq-10-15" => Ok(spd_seq(&[10.0, 15.0], "spd-seq-10-15", 200, 17)),
        "spd-seq-10-15-20" => Ok(spd_seq(&[10.0, 15.0, 20.0], "spd-seq-10-15-20", 210, 19)),
        other => Err(Error::InvalidSpec {
            index: None,
            reason: format!(
                "unknown preset {other:?}; available: {}",
                PRESET_NAMES.join(", ")
            ),
        }),
    }
}

fn mvc_trelu_block(
    window: Vec<usize>,
    in_c: usize,
    out_c: usize,
    padding: Padding,
    base: TreluBase,
) -> [LayerSpec; 2] {
    [
        LayerSpec::Mvc {
            window: window.clone(),
            in_channels: in_c,
            out_channels: out_c,
            stride: vec![1; window.len()],
            padding,
            anchor: AnchorPolicy::CenterPixel,
        },
        LayerSpec::TRelu { base },
    ]
}

/// Tensor-field classification: 200 samples of 5x5 SPD(3) fields at
/// sigma = 0.05; five convolution+tReLU blocks, the distance transform,
/// two fully-connected layers, softmax.
fn spd_class_small() -> Preset {
    let mut layers = Vec::new();
    let channels = [1usize, 2, 2, 2, 2, 2];
    for i in 0..5 {
        // One spatial window aggregates the neighborhood; the deeper
        // blocks mix channels per site (1x1 windows). Spatial windows
        // amplify field roughness multiplicatively, and on the
        // exponential scale of SPD activations a five-fold spatial stack
        // drifts out of the representable range. Image-mean tReLU bases
        // keep the clip relative to the data's own chart for the same
        // reason.
        let window = if i == 0 { vec![3, 3] } else { vec![1, 1] };
        layers.extend(mvc_trelu_block(
            window,
            channels[i],
            channels[i + 1],
            Padding::Periodic,
            TreluBase::ImageFM,
        ));
    }
    layers.push(LayerSpec::Mvfc);
    layers.push(LayerSpec::EuclideanFc {
        in_dim: 25 * 2,
        out_dim: 16,
        relu: true,
    });
    layers.push(LayerSpec::EuclideanFc {
        in_dim: 16,
        out_dim: 2,
        relu: false,
    });
    layers.push(LayerSpec::Softmax);
    Preset {
        name: "spd-class-small",
        dataset: DatasetSpec {
            task: TaskKind::SpdImageClass,
            n_samples: 200,
            dims: vec![5, 5],
            noise: 0.05,
            classes: 2,
            seed: 7,
            angles_deg: None,
        },
        network: NetworkSpec {
            manifold: ManifoldId::Spd(3),
            input_dims: vec![5, 5],
            input_channels: 1,
            layers,
        },
        train: TrainConfig {
            lr: 0.005,
            epochs: 12,
            batch_size: 10,
            folds: 10,
            seed: 7,
            clip_norm: Some(10.0),
        },
    }
}

/// Field-to-scalar regression: 40-site SPD(3) fields; three
/// convolution+tReLU blocks, distance transform, two fully-connected
/// layers to a scalar.
fn spd_regression_small() -> Preset {
    let mut layers = Vec::new();
    let channels = [1usize, 2, 2, 2];
    for i in 0..3 {
        let window = if i == 0 { vec![3] } else { vec![1] };
        layers.extend(mvc_trelu_block(
            window,
            channels[i],
            channels[i + 1],
            Padding::None,
            TreluBase::ImageFM,
        ));
    }
    // 40 -> 38 sites after the spatial window, 2 channels
    layers.push(LayerSpec::Mvfc);
    layers.push(LayerSpec::EuclideanFc {
        in_dim: 38 * 2,
        out_dim: 16,
        relu: true,
    });
    layers.push(LayerSpec::EuclideanFc {
        in_dim: 16,
        out_dim: 1,
        relu: false,
    });
    Preset {
        name: "spd-regression-small",
        dataset: DatasetSpec {
            task: TaskKind::SpdRegression,
            n_samples: 240,
            dims: vec![40],
            noise: 1.2,
            classes: 1,
            seed: 11,
            angles_deg: None,
        },
        network: NetworkSpec {
            manifold: ManifoldId::Spd(3),
            input_dims: vec![40],
            input_channels: 1,
            layers,
        },
        train: TrainConfig {
            lr: 0.005,
            epochs: 40,
            batch_size: 10,
            folds: 10,
            seed: 11,
            clip_norm: Some(10.0),
        },
    }
}

/// Covariance-descriptor sequence classification over motion angles:
/// five temporal convolution+tReLU blocks, distance transform, two
/// fully-connected layers, softmax.
fn spd_seq(angles: &[f64], name: &'static str, n_samples: usize, seed: u64) -> Preset {
    let classes = angles.len();
    let mut layers = Vec::new();
    for i in 0..5 {
        let window = if i == 0 { vec![3] } else { vec![1] };
        layers.extend(mvc_trelu_block(window, 1, 1, Padding::None, TreluBase::ImageFM));
    }
    // 20 -> 18 frames after the temporal window
    layers.push(LayerSpec::Mvfc);
    layers.push(LayerSpec::EuclideanFc {
        in_dim: 18,
        out_dim: 16,
        relu: true,
    });
    layers.push(LayerSpec::EuclideanFc {
        in_dim: 16,
        out_dim: classes,
        relu: false,
    });
    layers.push(LayerSpec::Softmax);
    Preset {
        name,
        dataset: DatasetSpec {
            task: TaskKind::SpdSequenceAngle,
            n_samples,
            dims: vec![20],
            noise: 0.01,
            classes,
            seed,
            angles_deg: Some(angles.to_vec()),
        },
        network: NetworkSpec {
            manifold: ManifoldId::Spd(4),
            input_dims: vec![20],
            input_channels: 1,
            layers,
        },
        train: TrainConfig {
            lr: 0.005,
            epochs: 15,
            batch_size: 10,
            folds: 10,
            seed,
            clip_norm: Some(10.0),
        },
    }
}
