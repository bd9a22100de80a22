//! Declarative network specs, parameter initialization, the
//! differentiable forward pass, and the checkpoint container.
//!
//! The pipeline shape is fixed: zero or more convolution / tangent-ReLU
//! layers on the manifold stage, exactly one distance transform, then
//! Euclidean fully-connected layers, optionally capped by a softmax.
//! Anchors taken as Fréchet means are stop-gradient on the tape; a
//! center-pixel anchor participates in differentiation through the
//! square-root factors of its chart.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AffineArg, NodeId, ParamId, ParamSet, Tape};
use crate::error::{Error, Result};
use crate::kernels::{ScalarFn, SpdMatrix};
use crate::layers::{conv_plan, input_site, ravel, unravel, AnchorPolicy, ManifoldImage, Padding, TreluBase};
use crate::manifold::ManifoldId;

/// Checkpoint container version string.
pub const CHECKPOINT_VERSION: &str = "mvcnet-ckpt-v1";

/// One layer of the stack.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum LayerSpec {
    Mvc {
        window: Vec<usize>,
        in_channels: usize,
        out_channels: usize,
        stride: Vec<usize>,
        padding: Padding,
        anchor: AnchorPolicy,
    },
    TRelu {
        base: TreluBase,
    },
    Mvfc,
    EuclideanFc {
        in_dim: usize,
        out_dim: usize,
        relu: bool,
    },
    Softmax,
}

/// Declarative description of a full stack, serializable into checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub manifold: ManifoldId,
    pub input_dims: Vec<usize>,
    pub input_channels: usize,
    pub layers: Vec<LayerSpec>,
}

/// Output head kind implied by a validated spec.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadKind {
    /// Softmax classifier over `classes` logits.
    Classification { classes: usize },
    /// Single regression scalar.
    Regression,
}

impl NetworkSpec {
    /// Validates the pipeline shape and returns the implied output head.
    /// Errors carry the index of the offending layer.
    pub fn validate(&self) -> Result<HeadKind> {
        self.manifold.validate()?;
        if self.input_dims.is_empty() || self.input_dims.len() > 3 {
            return Err(Error::InvalidSpec {
                index: None,
                reason: format!("input dims must have rank 1..=3, got {:?}", self.input_dims),
            });
        }
        let err = |index: usize, reason: String| Error::InvalidSpec {
            index: Some(index),
            reason,
        };
        let mut dims = self.input_dims.clone();
        let mut channels = self.input_channels;
        let mut mvfc_out: Option<usize> = None;
        let mut vec_dim: Option<usize> = None;
        let mut softmax_seen = false;

        for (i, layer) in self.layers.iter().enumerate() {
            if softmax_seen {
                return Err(err(i, "no layer may follow softmax".into()));
            }
            match layer {
                LayerSpec::Mvc {
                    window,
                    in_channels,
                    out_channels,
                    stride,
                    padding,
                    anchor,
                } => {
                    if mvfc_out.is_some() {
                        return Err(err(i, "convolution after the distance transform".into()));
                    }
                    if *in_channels != channels {
                        return Err(err(
                            i,
                            format!("expects {in_channels} channels, gets {channels}"),
                        ));
                    }
                    if window.iter().any(|w| w % 2 == 0 || *w == 0) {
                        return Err(err(i, format!("window sides must be odd: {window:?}")));
                    }
                    if let AnchorPolicy::FixedPoint(p) = anchor {
                        if p.manifold != self.manifold {
                            return Err(err(i, "fixed anchor on a different manifold".into()));
                        }
                    }
                    let plan = conv_plan(&dims, window, stride, *padding)
                        .map_err(|e| err(i, e.to_string()))?;
                    dims = plan.out_dims;
                    channels = *out_channels;
                }
                LayerSpec::TRelu { .. } => {
                    if mvfc_out.is_some() {
                        return Err(err(i, "tangent ReLU after the distance transform".into()));
                    }
                }
                LayerSpec::Mvfc => {
                    if mvfc_out.is_some() {
                        return Err(err(i, "distance transform appears twice".into()));
                    }
                    let n = dims.iter().product::<usize>() * channels;
                    mvfc_out = Some(n);
                    vec_dim = Some(n);
                }
                LayerSpec::EuclideanFc { in_dim, out_dim, .. } => {
                    let current = match vec_dim {
                        Some(v) => v,
                        None => {
                            return Err(err(
                                i,
                                "fully-connected layer before the distance transform".into(),
                            ))
                        }
                    };
                    if *in_dim != current {
                        return Err(err(
                            i,
                            format!("fc expects input {in_dim}, gets {current}"),
                        ));
                    }
                    if *out_dim == 0 {
                        return Err(err(i, "fc output dimension must be >= 1".into()));
                    }
                    vec_dim = Some(*out_dim);
                }
                LayerSpec::Softmax => {
                    let current = match vec_dim {
                        Some(v) => v,
                        None => return Err(err(i, "softmax before any vector output".into())),
                    };
                    if current < 2 {
                        return Err(err(i, "softmax needs at least 2 logits".into()));
                    }
                    softmax_seen = true;
                }
            }
        }
        let final_dim = match vec_dim {
            Some(v) => v,
            None => {
                return Err(Error::InvalidSpec {
                    index: None,
                    reason: "the stack must contain the distance transform".into(),
                })
            }
        };
        if softmax_seen {
            Ok(HeadKind::Classification { classes: final_dim })
        } else {
            if final_dim != 1 {
                return Err(Error::InvalidSpec {
                    index: None,
                    reason: format!(
                        "a regression stack must end in a single output, got {final_dim}"
                    ),
                });
            }
            Ok(HeadKind::Regression)
        }
    }
}

#[derive(Debug, Clone)]
enum LayerParams {
    Mvc { weights: ParamId },
    TRelu { threshold: ParamId },
    Fc { weight: ParamId, bias: ParamId },
    NoParams,
}

/// A parameterized network: spec plus registered trainable tensors.
#[derive(Debug, Clone)]
pub struct Network {
    pub spec: NetworkSpec,
    pub params: ParamSet,
    layer_params: Vec<LayerParams>,
    head: HeadKind,
}

/// Builds a network with freshly initialized parameters. Convolution and
/// fully-connected weights are i.i.d. uniform in
/// `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`; biases and thresholds start at 0.
pub fn build_network(spec: &NetworkSpec, seed: u64) -> Result<Network> {
    let head = spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamSet::new();
    let mut layer_params = Vec::with_capacity(spec.layers.len());
    for (i, layer) in spec.layers.iter().enumerate() {
        match layer {
            LayerSpec::Mvc {
                window,
                in_channels,
                out_channels,
                ..
            } => {
                let wl: usize = window.iter().product();
                let fan_in = in_channels * wl;
                let bound = 1.0 / (fan_in as f64).sqrt();
                let count = out_channels * in_channels * wl;
                let values = (0..count).map(|_| rng.random_range(-bound..bound)).collect();
                let id = params.register(&format!("layer{i}.mvc.weights"), *out_channels, in_channels * wl, values);
                layer_params.push(LayerParams::Mvc { weights: id });
            }
            LayerSpec::TRelu { .. } => {
                let id = params.register(&format!("layer{i}.trelu.threshold"), 1, 1, vec![0.0]);
                layer_params.push(LayerParams::TRelu { threshold: id });
            }
            LayerSpec::Mvfc | LayerSpec::Softmax => layer_params.push(LayerParams::NoParams),
            LayerSpec::EuclideanFc { in_dim, out_dim, .. } => {
                let bound = 1.0 / (*in_dim as f64).sqrt();
                let values = (0..in_dim * out_dim)
                    .map(|_| rng.random_range(-bound..bound))
                    .collect();
                let w = params.register(&format!("layer{i}.fc.weight"), *out_dim, *in_dim, values);
                let b = params.register(&format!("layer{i}.fc.bias"), *out_dim, 1, vec![0.0; *out_dim]);
                layer_params.push(LayerParams::Fc { weight: w, bias: b });
            }
        }
    }
    Ok(Network {
        spec: spec.clone(),
        params,
        layer_params,
        head,
    })
}

/// Result of a differentiable forward pass: the pre-head output node.
#[derive(Debug, Clone, Copy)]
pub enum TapeHead {
    /// Logits column vector node (classification).
    Logits(NodeId),
    /// Scalar prediction node (regression).
    Scalar(NodeId),
}

/// Recorded stop-gradient anchor values (Fréchet means) of one forward
/// pass, replayable into subsequent passes.
///
/// The tape treats mean anchors as constants, so its gradient is the
/// derivative of the forward map *with anchors frozen*. Finite-difference
/// verification must probe that same map: a base pass records every
/// anchor value in encounter order, and each perturbed pass replays them.
#[derive(Debug, Default, Clone)]
pub struct AnchorPins {
    values: Vec<DMatrix<f64>>,
    cursor: usize,
    replay: bool,
}

impl AnchorPins {
    /// Fresh recorder: anchors are computed and logged.
    pub fn recorder() -> Self {
        AnchorPins::default()
    }

    /// Switches recorded pins into replay mode (idempotent).
    pub fn start_replay(&mut self) {
        self.replay = true;
        self.cursor = 0;
    }
}

/// Inference output.
#[derive(Debug, Clone)]
pub enum Output {
    Probs(Vec<f64>),
    Scalar(f64),
}

impl Network {
    pub fn head(&self) -> HeadKind {
        self.head
    }

    pub fn param_count(&self) -> usize {
        self.params.scalar_count()
    }

    /// Records the full forward pass for `image` on `tape`.
    /// Differentiable forward is defined for SPD-valued images (the
    /// experiments' data); geometry-only sphere paths live in the plain
    /// layer functions.
    pub fn forward_on_tape(&self, tape: &mut Tape<'_>, image: &ManifoldImage) -> Result<TapeHead> {
        self.forward_impl(tape, image, &mut None)
    }

    /// Forward pass with stop-gradient anchors recorded into / replayed
    /// from `pins` (see [`AnchorPins`]).
    pub fn forward_on_tape_pinned(
        &self,
        tape: &mut Tape<'_>,
        image: &ManifoldImage,
        pins: &mut AnchorPins,
    ) -> Result<TapeHead> {
        let mut opt = Some(pins);
        self.forward_impl(tape, image, &mut opt)
    }

    fn forward_impl(
        &self,
        tape: &mut Tape<'_>,
        image: &ManifoldImage,
        pins: &mut Option<&mut AnchorPins>,
    ) -> Result<TapeHead> {
        match self.spec.manifold {
            ManifoldId::Spd(_) => {}
            ManifoldId::Sphere(_) => {
                return Err(Error::ContractViolation(
                    "differentiable forward supports SPD images".into(),
                ))
            }
        }
        if image.manifold != self.spec.manifold
            || image.dims() != self.spec.input_dims
            || image.channels() != self.spec.input_channels
        {
            return Err(Error::ContractViolation(format!(
                "image shape {:?}x{} does not match spec {:?}x{}",
                image.dims(),
                image.channels(),
                self.spec.input_dims,
                self.spec.input_channels
            )));
        }

        // manifold stage: one matrix node per (site, channel)
        let mut dims = image.dims().to_vec();
        let mut channels = image.channels();
        let mut nodes: Vec<NodeId> = image
            .points()
            .iter()
            .map(|p| tape.constant_mat(p.spd_matrix().into_inner()))
            .collect();
        let mut vector: Option<VecStage> = None;

        for (i, layer) in self.spec.layers.iter().enumerate() {
            match (layer, &self.layer_params[i]) {
                (
                    LayerSpec::Mvc {
                        window,
                        in_channels,
                        out_channels,
                        stride,
                        padding,
                        anchor,
                    },
                    LayerParams::Mvc { weights },
                ) => {
                    let (new_dims, new_nodes) = self.mvc_on_tape(
                        tape, &dims, channels, &nodes, window, *in_channels, *out_channels,
                        stride, *padding, anchor, *weights, pins,
                    )?;
                    dims = new_dims;
                    channels = *out_channels;
                    nodes = new_nodes;
                }
                (LayerSpec::TRelu { base }, LayerParams::TRelu { threshold }) => {
                    let t_node = tape.param_elem(*threshold, 0)?;
                    nodes = self.trelu_on_tape(tape, &nodes, *base, t_node, pins)?;
                }
                (LayerSpec::Mvfc, LayerParams::NoParams) => {
                    let mean = fm_anchor_node(tape, &nodes, pins)?;
                    let reference = spd_from_tape_value(tape.value(mean).mat()?);
                    let feats: Vec<NodeId> = nodes
                        .iter()
                        .map(|&x| tape.distance_to(x, &reference))
                        .collect::<Result<_>>()?;
                    vector = Some(VecStage::Scalars(feats));
                    nodes = Vec::new();
                }
                (
                    LayerSpec::EuclideanFc { relu, .. },
                    LayerParams::Fc { weight, bias },
                ) => {
                    let stage = vector.take().ok_or_else(|| {
                        Error::ContractViolation("fc before distance transform".into())
                    })?;
                    let w = tape.param_mat(*weight);
                    let b = tape.param_mat(*bias);
                    let arg = match stage {
                        VecStage::Scalars(ids) => AffineArg::Scalars(ids),
                        VecStage::Vector(id) => AffineArg::Vector(id),
                    };
                    let mut out = tape.affine(w, b, arg)?;
                    if *relu {
                        let zero = tape.constant_scalar(0.0);
                        out = tape.relu(out, zero)?;
                    }
                    vector = Some(VecStage::Vector(out));
                }
                (LayerSpec::Softmax, LayerParams::NoParams) => {
                    // softmax itself is fused into the loss / readout
                }
                _ => {
                    return Err(Error::ContractViolation(format!(
                        "layer {i}: spec and parameters out of sync"
                    )))
                }
            }
        }

        let out_node = match vector {
            Some(VecStage::Vector(id)) => id,
            Some(VecStage::Scalars(ids)) if ids.len() == 1 => {
                // a bare scalar stage; only valid for regression heads
                ids[0]
            }
            _ => {
                return Err(Error::ContractViolation(
                    "network produced no vector output".into(),
                ))
            }
        };
        match self.head {
            HeadKind::Classification { .. } => Ok(TapeHead::Logits(out_node)),
            HeadKind::Regression => {
                let m = tape.value(out_node);
                match m {
                    crate::autodiff::Value::Scalar(_) => Ok(TapeHead::Scalar(out_node)),
                    crate::autodiff::Value::Mat(mat) => {
                        if mat.shape() != (1, 1) {
                            return Err(Error::ContractViolation(format!(
                                "regression head needs a single output, got {:?}",
                                mat.shape()
                            )));
                        }
                        let s = tape.trace(out_node)?;
                        Ok(TapeHead::Scalar(s))
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn mvc_on_tape(
        &self,
        tape: &mut Tape<'_>,
        dims: &[usize],
        channels: usize,
        nodes: &[NodeId],
        window: &[usize],
        in_channels: usize,
        out_channels: usize,
        stride: &[usize],
        padding: Padding,
        anchor: &AnchorPolicy,
        weights: ParamId,
        pins: &mut Option<&mut AnchorPins>,
    ) -> Result<(Vec<usize>, Vec<NodeId>)> {
        if in_channels != channels {
            return Err(Error::ContractViolation(format!(
                "mvc layer expects {in_channels} channels, stage has {channels}"
            )));
        }
        let plan = conv_plan(dims, window, stride, padding)?;
        let window_len: usize = window.iter().product();
        let center_zlin = ravel(&window.iter().map(|&w| w / 2).collect::<Vec<_>>(), window);

        // weight element nodes, shared across all output sites
        let weight_nodes: Vec<NodeId> = (0..out_channels * in_channels * window_len)
            .map(|k| tape.param_elem(weights, k))
            .collect::<Result<_>>()?;

        // global anchor factors, when the policy is image-wide
        let global_factors = match anchor {
            AnchorPolicy::GlobalFM => {
                let mean = fm_anchor_node(tape, nodes, pins)?;
                Some(constant_chart_factors(tape, mean)?)
            }
            AnchorPolicy::FixedPoint(p) => {
                let c = tape.constant_mat(p.spd_matrix().into_inner());
                Some(constant_chart_factors(tape, c)?)
            }
            _ => None,
        };

        let out_sites: usize = plan.out_dims.iter().product();
        let mut out_nodes = Vec::with_capacity(out_sites * out_channels);
        for linear in 0..out_sites {
            let y = unravel(linear, &plan.out_dims);
            let mut gathered = Vec::with_capacity(in_channels * window_len);
            for c in 0..in_channels {
                for z in &plan.window_offsets {
                    let site = input_site(&y, z, stride, dims, padding);
                    gathered.push(nodes[ravel(&site, dims) * channels + c]);
                }
            }
            let (a, b) = match anchor {
                AnchorPolicy::WindowFM => {
                    let mean = fm_anchor_node(tape, &gathered, pins)?;
                    constant_chart_factors(tape, mean)?
                }
                AnchorPolicy::CenterPixel => {
                    let center = gathered[center_zlin];
                    let a = tape.eig_fn(center, ScalarFn::InvSqrt)?;
                    let b = tape.eig_fn(center, ScalarFn::Sqrt)?;
                    (a, b)
                }
                AnchorPolicy::GlobalFM | AnchorPolicy::FixedPoint(_) => {
                    global_factors.expect("factors precomputed")
                }
            };
            // logm(A x A) per gathered point, shared across output channels
            let logs: Vec<NodeId> = gathered
                .iter()
                .map(|&x| {
                    let ax = tape.matmul(a, x)?;
                    let s = tape.matmul(ax, a)?;
                    tape.eig_fn(s, ScalarFn::Log)
                })
                .collect::<Result<_>>()?;
            for o in 0..out_channels {
                let mut acc: Option<NodeId> = None;
                for (idx, &l) in logs.iter().enumerate() {
                    let c = idx / window_len;
                    let z = idx % window_len;
                    let w = weight_nodes[(o * in_channels + c) * window_len + z];
                    let term = tape.scale(w, l)?;
                    acc = Some(match acc {
                        None => term,
                        Some(prev) => tape.add(prev, term)?,
                    });
                }
                let v = acc.expect("window is non-empty");
                let e = tape.eig_fn(v, ScalarFn::Exp)?;
                let be = tape.matmul(b, e)?;
                let out = tape.matmul(be, b)?;
                out_nodes.push(out);
            }
        }
        Ok((plan.out_dims, out_nodes))
    }

    fn trelu_on_tape(
        &self,
        tape: &mut Tape<'_>,
        nodes: &[NodeId],
        base: TreluBase,
        threshold: NodeId,
        pins: &mut Option<&mut AnchorPins>,
    ) -> Result<Vec<NodeId>> {
        match base {
            TreluBase::CanonicalBase => nodes
                .iter()
                .map(|&x| {
                    let l = tape.eig_fn(x, ScalarFn::Log)?;
                    let r = tape.relu(l, threshold)?;
                    tape.eig_fn(r, ScalarFn::Exp)
                })
                .collect(),
            TreluBase::ImageFM => {
                let mean = fm_anchor_node(tape, nodes, pins)?;
                let (a, b) = constant_chart_factors(tape, mean)?;
                nodes
                    .iter()
                    .map(|&x| {
                        let ax = tape.matmul(a, x)?;
                        let s = tape.matmul(ax, a)?;
                        let l0 = tape.eig_fn(s, ScalarFn::Log)?;
                        // clip in the canonical coordinates of the base chart
                        let bl = tape.matmul(b, l0)?;
                        let lifted = tape.matmul(bl, b)?;
                        let r = tape.relu(lifted, threshold)?;
                        let ar = tape.matmul(a, r)?;
                        let s2 = tape.matmul(ar, a)?;
                        let e = tape.eig_fn(s2, ScalarFn::Exp)?;
                        let be = tape.matmul(b, e)?;
                        tape.matmul(be, b)
                    })
                    .collect()
            }
        }
    }

    /// Plain inference: records a scratch tape and reads off the head.
    pub fn forward(&self, image: &ManifoldImage) -> Result<Output> {
        let mut tape = Tape::new(&self.params);
        let head = self.forward_on_tape(&mut tape, image)?;
        match head {
            TapeHead::Logits(node) => {
                let z = tape.value(node).mat()?;
                Ok(Output::Probs(softmax(z.as_slice())))
            }
            TapeHead::Scalar(node) => Ok(Output::Scalar(tape.value(node).scalar()?)),
        }
    }
}

enum VecStage {
    Scalars(Vec<NodeId>),
    Vector(NodeId),
}

/// Stop-gradient Fréchet mean anchor node, honoring pin record/replay.
fn fm_anchor_node(
    tape: &mut Tape<'_>,
    inputs: &[NodeId],
    pins: &mut Option<&mut AnchorPins>,
) -> Result<NodeId> {
    if let Some(p) = pins {
        if p.replay {
            let value = p
                .values
                .get(p.cursor)
                .ok_or_else(|| {
                    Error::ContractViolation("anchor replay exhausted its recording".into())
                })?
                .clone();
            p.cursor += 1;
            return Ok(tape.constant_mat(value));
        }
    }
    let node = tape.frechet_mean_node(inputs)?;
    if let Some(p) = pins {
        p.values.push(tape.value(node).mat()?.clone());
    }
    Ok(node)
}

/// Tape values are symmetric only up to rounding; symmetrize before
/// treating one as an SPD point (positivity is checked where consumed).
fn spd_from_tape_value(m: &DMatrix<f64>) -> SpdMatrix {
    SpdMatrix::from_unchecked(crate::kernels::SymMatrix::symmetrize(m).into_inner())
}

/// Stop-gradient chart factors (`P^{-1/2}`, `P^{1/2}`) of an anchor node's
/// current value, recorded as constants.
fn constant_chart_factors(tape: &mut Tape<'_>, anchor: NodeId) -> Result<(NodeId, NodeId)> {
    let p = spd_from_tape_value(tape.value(anchor).mat()?);
    let a = crate::kernels::spd_invsqrtm(&p)?.into_inner();
    let b = crate::kernels::spd_sqrtm(&p)?.into_inner();
    Ok((tape.constant_mat(a), tape.constant_mat(b)))
}

/// Numerically-stable softmax.
pub fn softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
    let exps: Vec<f64> = z.iter().map(|&x| (x - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.iter().map(|e| e / total).collect()
}

// ---------------------------------------------------------------------------
// Checkpoint container
// ---------------------------------------------------------------------------

fn write_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn write_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn write_bytes(buf: &mut Vec<u8>, bytes: &[u8]) {
    write_u32(buf, bytes.len() as u32);
    buf.extend_from_slice(bytes);
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Reader { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format(format!(
                "unexpected end of data at offset {}",
                self.pos
            )));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn bytes(&mut self) -> Result<&'a [u8]> {
        let len = self.u32()? as usize;
        self.take(len)
    }

    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

/// Serializes a network plus its training seed into the checkpoint
/// container. The layout round-trips byte-exactly.
pub fn checkpoint_bytes(network: &Network, seed: u64) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    write_bytes(&mut buf, CHECKPOINT_VERSION.as_bytes());
    write_u64(&mut buf, seed);
    let spec_json = serde_json::to_vec(&network.spec)
        .map_err(|e| Error::Format(format!("spec serialization failed: {e}")))?;
    write_bytes(&mut buf, &spec_json);
    write_u32(&mut buf, network.params.len() as u32);
    for (_, entry) in network.params.iter() {
        write_bytes(&mut buf, entry.name.as_bytes());
        write_u32(&mut buf, entry.rows as u32);
        write_u32(&mut buf, entry.cols as u32);
        write_u64(&mut buf, entry.values.len() as u64);
        for v in &entry.values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(buf)
}

/// Parses a checkpoint container back into a network and its seed.
pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<(Network, u64)> {
    let mut r = Reader::new(bytes);
    let version = String::from_utf8(r.bytes()?.to_vec())
        .map_err(|_| Error::Format("version string is not utf-8".into()))?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: CHECKPOINT_VERSION.to_string(),
        });
    }
    let seed = r.u64()?;
    let spec: NetworkSpec = serde_json::from_slice(r.bytes()?)
        .map_err(|e| Error::Format(format!("spec parse failed: {e}")))?;
    let mut network = build_network(&spec, seed)?;
    let count = r.u32()? as usize;
    if count != network.params.len() {
        return Err(Error::Format(format!(
            "checkpoint has {count} parameter tensors, spec implies {}",
            network.params.len()
        )));
    }
    for id in 0..count {
        let name = String::from_utf8(r.bytes()?.to_vec())
            .map_err(|_| Error::Format("parameter name is not utf-8".into()))?;
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        let len = r.u64()? as usize;
        let entry = network.params.entry(id);
        if entry.name != name || entry.rows != rows || entry.cols != cols || entry.values.len() != len
        {
            return Err(Error::Format(format!(
                "parameter {id} mismatch: file has {name} {rows}x{cols}"
            )));
        }
        let mut values = Vec::with_capacity(len);
        for _ in 0..len {
            values.push(r.f64()?);
        }
        network.params.values_mut(id).copy_from_slice(&values);
    }
    if !r.done() {
        return Err(Error::Format("trailing bytes after checkpoint".into()));
    }
    Ok((network, seed))
}

pub fn save_checkpoint(network: &Network, seed: u64, path: &Path) -> Result<()> {
    let bytes = checkpoint_bytes(network, seed)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(Network, u64)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    checkpoint_from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifold::random_point;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_class_spec() -> NetworkSpec {
        NetworkSpec {
            manifold: ManifoldId::Spd(3),
            input_dims: vec![4],
            input_channels: 1,
            layers: vec![
                LayerSpec::Mvc {
                    window: vec![3],
                    in_channels: 1,
                    out_channels: 2,
                    stride: vec![1],
                    padding: Padding::None,
                    anchor: AnchorPolicy::CenterPixel,
                },
                LayerSpec::TRelu {
                    base: TreluBase::CanonicalBase,
                },
                LayerSpec::Mvfc,
                LayerSpec::EuclideanFc {
                    in_dim: 4,
                    out_dim: 3,
                    relu: true,
                },
                LayerSpec::EuclideanFc {
                    in_dim: 3,
                    out_dim: 2,
                    relu: false,
                },
                LayerSpec::Softmax,
            ],
        }
    }

    fn random_image(dims: Vec<usize>, channels: usize, seed: u64) -> ManifoldImage {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        ManifoldImage::from_fn(ManifoldId::Spd(3), dims, channels, |_, _| {
            random_point(ManifoldId::Spd(3), 0.4, &mut r).unwrap()
        })
        .unwrap()
    }

    #[test]
    fn spec_validation_catches_misordering() {
        let mut spec = tiny_class_spec();
        spec.layers.swap(2, 3); // fc before mvfc
        match spec.validate() {
            Err(Error::InvalidSpec { index: Some(i), .. }) => assert_eq!(i, 2),
            other => panic!("expected layer-indexed spec error, got {other:?}"),
        }
    }

    #[test]
    fn spec_requires_single_mvfc() {
        let mut spec = tiny_class_spec();
        spec.layers.insert(3, LayerSpec::Mvfc);
        assert!(matches!(
            spec.validate(),
            Err(Error::InvalidSpec { index: Some(3), .. })
        ));
    }

    #[test]
    fn degenerate_depth_runs_and_normalizes() {
        // zero convolution layers: distance transform on raw pixels + head
        let spec = NetworkSpec {
            manifold: ManifoldId::Spd(3),
            input_dims: vec![4],
            input_channels: 1,
            layers: vec![
                LayerSpec::Mvfc,
                LayerSpec::EuclideanFc {
                    in_dim: 4,
                    out_dim: 2,
                    relu: false,
                },
                LayerSpec::Softmax,
            ],
        };
        let net = build_network(&spec, 7).unwrap();
        for trial in 0..20 {
            let image = random_image(vec![4], 1, 100 + trial);
            match net.forward(&image).unwrap() {
                Output::Probs(p) => {
                    assert_eq!(p.len(), 2);
                    assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                    assert!(p.iter().all(|&x| x >= 0.0));
                }
                Output::Scalar(_) => panic!("expected probabilities"),
            }
        }
    }

    #[test]
    fn parameter_count_matches_closed_form() {
        let spec = tiny_class_spec();
        let net = build_network(&spec, 3).unwrap();
        // mvc: 2*1*3 weights; trelu: 1; fc1: 4*3+3; fc2: 3*2+2
        let want = 6 + 1 + (12 + 3) + (6 + 2);
        assert_eq!(net.param_count(), want);
    }

    #[test]
    fn forward_probabilities_sum_to_one() {
        let net = build_network(&tiny_class_spec(), 11).unwrap();
        for trial in 0..20 {
            let image = random_image(vec![4], 1, 200 + trial);
            if let Output::Probs(p) = net.forward(&image).unwrap() {
                assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            } else {
                panic!("expected probabilities");
            }
        }
    }

    #[test]
    fn checkpoint_round_trip_is_byte_exact() {
        let net = build_network(&tiny_class_spec(), 5).unwrap();
        let bytes = checkpoint_bytes(&net, 5).unwrap();
        let (loaded, seed) = checkpoint_from_bytes(&bytes).unwrap();
        assert_eq!(seed, 5);
        let again = checkpoint_bytes(&loaded, seed).unwrap();
        assert_eq!(bytes, again);
    }

    #[test]
    fn checkpoint_version_mismatch_reports_both() {
        let net = build_network(&tiny_class_spec(), 5).unwrap();
        let mut bytes = checkpoint_bytes(&net, 5).unwrap();
        bytes[4..18].copy_from_slice(b"mvcnet-ckpt-v9"); // same length, wrong version
        match checkpoint_from_bytes(&bytes) {
            Err(Error::VersionMismatch { found, expected }) => {
                assert_eq!(found, "mvcnet-ckpt-v9");
                assert_eq!(expected, CHECKPOINT_VERSION);
            }
            other => panic!("expected version mismatch, got {other:?}"),
        }
    }

    #[test]
    fn tape_and_plain_forward_agree() {
        let net = build_network(&tiny_class_spec(), 9).unwrap();
        let image = random_image(vec![4], 1, 42);
        let out1 = net.forward(&image).unwrap();
        let out2 = net.forward(&image).unwrap();
        match (out1, out2) {
            (Output::Probs(a), Output::Probs(b)) => {
                for (x, y) in a.iter().zip(b.iter()) {
                    assert_eq!(x.to_bits(), y.to_bits());
                }
            }
            _ => panic!("expected probabilities"),
        }
    }
}
