//! Manifold-valued layers: tangent-space convolution, tangent ReLU,
//! the distance-based fully-connected transform, and the covariance
//! descriptor block.
//!
//! The convolution maps each window of manifold points into the tangent
//! space of an anchor, takes the weighted combination there, and maps the
//! result back with the exponential map. Any equivariant anchor choice
//! (window mean, a fixed window position, the whole-image mean) preserves
//! equivariance of the layer under range isometries; the anchor policy is
//! therefore a configuration knob rather than a fixed rule.

pub mod network;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::SpdMatrix;
use crate::manifold::{
    dist, exp_map, frechet_mean, log_map, ManifoldId, ManifoldPoint, TangentVector,
};

/// Fréchet-mean settings used by anchor computations inside layers.
/// The iteration budget is generous: anchor means over well-spread
/// activations converge linearly with a rate that degrades with spread,
/// and an anchor is useless if it cannot be computed.
pub(crate) const ANCHOR_FM_TOL: f64 = 1e-10;
pub(crate) const ANCHOR_FM_MAX_ITER: usize = 1000;

/// An n-D grid (1-, 2- or 3-D) of manifold points with a channel axis.
/// Storage is row-major over sites, channels fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifoldImage {
    pub manifold: ManifoldId,
    dims: Vec<usize>,
    channels: usize,
    data: Vec<ManifoldPoint>,
}

impl ManifoldImage {
    pub fn new(
        manifold: ManifoldId,
        dims: Vec<usize>,
        channels: usize,
        data: Vec<ManifoldPoint>,
    ) -> Result<Self> {
        manifold.validate()?;
        if dims.is_empty() || dims.len() > 3 || dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidDimension(format!(
                "image dims must have rank 1..=3 with positive extents, got {dims:?}"
            )));
        }
        if channels == 0 {
            return Err(Error::InvalidDimension("channels must be >= 1".into()));
        }
        let expected = dims.iter().product::<usize>() * channels;
        if data.len() != expected {
            return Err(Error::InvalidDimension(format!(
                "expected {expected} points, got {}",
                data.len()
            )));
        }
        for p in &data {
            if p.manifold != manifold {
                return Err(Error::ContractViolation(
                    "image mixes points from different manifolds".into(),
                ));
            }
        }
        Ok(ManifoldImage {
            manifold,
            dims,
            channels,
            data,
        })
    }

    /// Builds an image by evaluating `f(site, channel)`.
    pub fn from_fn<F>(
        manifold: ManifoldId,
        dims: Vec<usize>,
        channels: usize,
        mut f: F,
    ) -> Result<Self>
    where
        F: FnMut(&[usize], usize) -> ManifoldPoint,
    {
        let site_count: usize = dims.iter().product();
        let mut data = Vec::with_capacity(site_count * channels);
        for linear in 0..site_count {
            let site = unravel(linear, &dims);
            for c in 0..channels {
                data.push(f(&site, c));
            }
        }
        ManifoldImage::new(manifold, dims, channels, data)
    }

    /// All pixels set to one point.
    pub fn constant(
        manifold: ManifoldId,
        dims: Vec<usize>,
        channels: usize,
        point: ManifoldPoint,
    ) -> Result<Self> {
        let n = dims.iter().product::<usize>() * channels;
        ManifoldImage::new(manifold, dims, channels, vec![point; n])
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn site_count(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn points(&self) -> &[ManifoldPoint] {
        &self.data
    }

    pub fn get(&self, site: &[usize], channel: usize) -> &ManifoldPoint {
        let linear = ravel(site, &self.dims);
        &self.data[linear * self.channels + channel]
    }

    pub fn get_linear(&self, site_linear: usize, channel: usize) -> &ManifoldPoint {
        &self.data[site_linear * self.channels + channel]
    }

    /// Cyclic shift by `t` along each axis (used by the domain-equivariance
    /// properties: shifting then convolving equals convolving then shifting
    /// under periodic padding).
    pub fn shift(&self, t: &[usize]) -> Result<Self> {
        if t.len() != self.dims.len() {
            return Err(Error::InvalidDimension(format!(
                "shift rank {} vs image rank {}",
                t.len(),
                self.dims.len()
            )));
        }
        ManifoldImage::from_fn(self.manifold, self.dims.clone(), self.channels, |site, c| {
            let src: Vec<usize> = site
                .iter()
                .zip(t.iter())
                .zip(self.dims.iter())
                .map(|((&s, &sh), &d)| (s + d - sh % d) % d)
                .collect();
            self.get(&src, c).clone()
        })
    }

    /// Applies a point map to every pixel.
    pub fn map_points<F>(&self, mut f: F) -> Result<Self>
    where
        F: FnMut(&ManifoldPoint) -> Result<ManifoldPoint>,
    {
        let data: Vec<ManifoldPoint> = self.data.iter().map(&mut f).collect::<Result<_>>()?;
        ManifoldImage::new(self.manifold, self.dims.clone(), self.channels, data)
    }
}

pub(crate) fn ravel(site: &[usize], dims: &[usize]) -> usize {
    let mut linear = 0;
    for (s, d) in site.iter().zip(dims.iter()) {
        debug_assert!(s < d);
        linear = linear * d + s;
    }
    linear
}

pub(crate) fn unravel(mut linear: usize, dims: &[usize]) -> Vec<usize> {
    let mut site = vec![0; dims.len()];
    for axis in (0..dims.len()).rev() {
        site[axis] = linear % dims[axis];
        linear /= dims[axis];
    }
    site
}

/// Boundary handling for the convolution window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Padding {
    /// The output grid shrinks; every window index must be in range.
    None,
    /// Indices wrap modulo the grid; output keeps `ceil(dims/stride)` sites.
    Periodic,
}

/// Where the tangent-space combination is anchored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum AnchorPolicy {
    /// Unweighted Fréchet mean of the gathered window points (default).
    WindowFM,
    /// The window's center point of input channel 0. Cheapest equivariant
    /// choice: no mean iteration.
    CenterPixel,
    /// Fréchet mean of the whole input image, matching the global form of
    /// the convolution definition. One mean per image.
    GlobalFM,
    /// A caller-supplied fixed anchor. Not equivariant; used by the
    /// layer-collapse analysis, which requires a shared chart.
    FixedPoint(ManifoldPoint),
}

/// Learnable convolution weights plus anchor policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MvcKernel {
    /// Window extents per axis; all odd.
    pub window: Vec<usize>,
    pub in_channels: usize,
    pub out_channels: usize,
    /// Shape `[out_channels][in_channels][window]`, window row-major.
    pub weights: Vec<f64>,
    pub anchor_policy: AnchorPolicy,
}

impl MvcKernel {
    pub fn new(
        window: Vec<usize>,
        in_channels: usize,
        out_channels: usize,
        weights: Vec<f64>,
        anchor_policy: AnchorPolicy,
    ) -> Result<Self> {
        if window.is_empty() || window.len() > 3 {
            return Err(Error::InvalidDimension(format!(
                "window rank must be 1..=3, got {}",
                window.len()
            )));
        }
        if window.iter().any(|&w| w == 0 || w % 2 == 0) {
            return Err(Error::InvalidDimension(format!(
                "window side lengths must be odd, got {window:?}"
            )));
        }
        if in_channels == 0 || out_channels == 0 {
            return Err(Error::InvalidDimension("channel counts must be >= 1".into()));
        }
        let expected = out_channels * in_channels * window.iter().product::<usize>();
        if weights.len() != expected {
            return Err(Error::InvalidDimension(format!(
                "expected {expected} weights, got {}",
                weights.len()
            )));
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::InvalidData("kernel weights must be finite".into()));
        }
        Ok(MvcKernel {
            window,
            in_channels,
            out_channels,
            weights,
            anchor_policy,
        })
    }

    pub fn window_len(&self) -> usize {
        self.window.iter().product()
    }

    pub fn fan_in(&self) -> usize {
        self.in_channels * self.window_len()
    }

    pub fn weight(&self, o: usize, c: usize, z: usize) -> f64 {
        self.weights[(o * self.in_channels + c) * self.window_len() + z]
    }

    /// Uniform init in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn random_init(
        window: Vec<usize>,
        in_channels: usize,
        out_channels: usize,
        anchor_policy: AnchorPolicy,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let len = out_channels * in_channels * window.iter().product::<usize>();
        let fan_in = in_channels * window.iter().product::<usize>();
        let bound = 1.0 / (fan_in as f64).sqrt();
        let weights = (0..len).map(|_| rng.random_range(-bound..bound)).collect();
        MvcKernel::new(window, in_channels, out_channels, weights, anchor_policy)
    }
}

/// The batched tangent combination at an anchor:
/// `Exp_m(sum_i w_i Log_m(x_i))`.
pub fn mvc_combine(
    points: &[ManifoldPoint],
    weights: &[f64],
    anchor: &ManifoldPoint,
) -> Result<ManifoldPoint> {
    if points.len() != weights.len() {
        return Err(Error::ContractViolation(format!(
            "{} points vs {} weights",
            points.len(),
            weights.len()
        )));
    }
    let len = anchor.manifold.coord_len();
    let mut acc = DVector::zeros(len);
    for (x, &w) in points.iter().zip(weights.iter()) {
        if w == 0.0 {
            continue;
        }
        acc += &log_map(anchor, x)?.coords * w;
    }
    let tangent = make_tangent(anchor.clone(), acc);
    exp_map(&tangent)
}

/// Builds a tangent without re-validating the (already consistent) coords.
fn make_tangent(anchor: ManifoldPoint, mut coords: DVector<f64>) -> TangentVector {
    if let ManifoldId::Sphere(_) = anchor.manifold {
        let drift = coords.dot(&anchor.coords);
        coords -= &anchor.coords * drift;
    }
    TangentVector {
        manifold: anchor.manifold,
        anchor,
        coords,
    }
}

/// Geometry of one convolution application, shared by the plain forward
/// pass and the differentiable network path.
pub(crate) struct ConvPlan {
    pub out_dims: Vec<usize>,
    pub window_offsets: Vec<Vec<usize>>,
}

pub(crate) fn conv_plan(
    dims: &[usize],
    window: &[usize],
    stride: &[usize],
    padding: Padding,
) -> Result<ConvPlan> {
    if window.len() != dims.len() || stride.len() != dims.len() {
        return Err(Error::InvalidDimension(format!(
            "rank mismatch: dims {dims:?}, window {window:?}, stride {stride:?}"
        )));
    }
    if stride.iter().any(|&s| s == 0) {
        return Err(Error::InvalidDimension("stride entries must be >= 1".into()));
    }
    let mut out_dims = Vec::with_capacity(dims.len());
    for axis in 0..dims.len() {
        let padded = match padding {
            Padding::None => {
                if window[axis] > dims[axis] {
                    return Err(Error::InvalidDimension(format!(
                        "window {} exceeds image extent {} on axis {axis} without padding",
                        window[axis], dims[axis]
                    )));
                }
                dims[axis]
            }
            Padding::Periodic => dims[axis] + window[axis] - 1,
        };
        out_dims.push((padded - window[axis]) / stride[axis] + 1);
    }
    let window_count: usize = window.iter().product();
    let window_offsets = (0..window_count).map(|z| unravel(z, window)).collect();
    Ok(ConvPlan {
        out_dims,
        window_offsets,
    })
}

/// Input site feeding window offset `z` of output site `y`; `None` when the
/// offset falls outside an unpadded image (prevented by construction).
pub(crate) fn input_site(
    y: &[usize],
    z: &[usize],
    stride: &[usize],
    dims: &[usize],
    padding: Padding,
) -> Vec<usize> {
    y.iter()
        .zip(z.iter())
        .zip(stride.iter().zip(dims.iter()))
        .map(|((&yi, &zi), (&si, &di))| match padding {
            Padding::None => yi * si + zi,
            Padding::Periodic => (yi * si + zi) % di,
        })
        .collect()
}

/// Manifold-valued convolution over an image.
///
/// For each output site the window's points are gathered across all input
/// channels, an anchor is chosen per the kernel's policy, and each output
/// channel is `Exp_m(sum_{c,z} w[o,c,z] Log_m(x[c,z]))`.
pub fn mvc_forward(
    image: &ManifoldImage,
    kernel: &MvcKernel,
    stride: &[usize],
    padding: Padding,
) -> Result<ManifoldImage> {
    if kernel.in_channels != image.channels {
        return Err(Error::ContractViolation(format!(
            "kernel expects {} input channels, image has {}",
            kernel.in_channels, image.channels
        )));
    }
    let plan = conv_plan(image.dims(), &kernel.window, stride, padding)?;
    let global_anchor = match kernel.anchor_policy {
        AnchorPolicy::GlobalFM => Some(image_fm(image)?),
        _ => None,
    };
    let out_sites: usize = plan.out_dims.iter().product();
    let window_len = kernel.window_len();
    let center_z = kernel
        .window
        .iter()
        .map(|&w| w / 2)
        .collect::<Vec<usize>>();
    let center_zlin = ravel(&center_z, &kernel.window);

    let mut out_data = Vec::with_capacity(out_sites * kernel.out_channels);
    for linear in 0..out_sites {
        let y = unravel(linear, &plan.out_dims);
        // gather window points, channel-major then window offset
        let mut gathered: Vec<&ManifoldPoint> =
            Vec::with_capacity(kernel.in_channels * window_len);
        for c in 0..kernel.in_channels {
            for z in &plan.window_offsets {
                let site = input_site(&y, z, stride, image.dims(), padding);
                gathered.push(image.get(&site, c));
            }
        }
        let at_site = |e: Error| Error::AtSite {
            site: y.clone(),
            source: Box::new(e),
        };
        let anchor: ManifoldPoint = match &kernel.anchor_policy {
            AnchorPolicy::WindowFM => {
                let pts: Vec<ManifoldPoint> = gathered.iter().map(|&p| p.clone()).collect();
                let w = vec![1.0 / pts.len() as f64; pts.len()];
                frechet_mean(&pts, &w, ANCHOR_FM_TOL, ANCHOR_FM_MAX_ITER).map_err(at_site)?
            }
            AnchorPolicy::CenterPixel => gathered[center_zlin].clone(),
            AnchorPolicy::GlobalFM => global_anchor.clone().unwrap(),
            AnchorPolicy::FixedPoint(p) => {
                if p.manifold != image.manifold {
                    return Err(Error::ContractViolation(
                        "fixed anchor lives on a different manifold".into(),
                    ));
                }
                p.clone()
            }
        };
        // one Log per gathered point, shared across output channels
        let logs: Vec<DVector<f64>> = gathered
            .iter()
            .map(|&x| log_map(&anchor, x).map(|t| t.coords).map_err(at_site))
            .collect::<Result<_>>()?;
        for o in 0..kernel.out_channels {
            let mut acc = DVector::zeros(anchor.manifold.coord_len());
            for (i, l) in logs.iter().enumerate() {
                let c = i / window_len;
                let z = i % window_len;
                let w = kernel.weight(o, c, z);
                if w != 0.0 {
                    acc += l * w;
                }
            }
            let out = exp_map(&make_tangent(anchor.clone(), acc)).map_err(at_site)?;
            out_data.push(out);
        }
    }
    ManifoldImage::new(
        image.manifold,
        plan.out_dims,
        kernel.out_channels,
        out_data,
    )
}

/// Unweighted Fréchet mean of every pixel (all sites, all channels).
pub fn image_fm(image: &ManifoldImage) -> Result<ManifoldPoint> {
    let pts = image.points();
    let w = vec![1.0 / pts.len() as f64; pts.len()];
    frechet_mean(pts, &w, ANCHOR_FM_TOL, ANCHOR_FM_MAX_ITER)
}

/// Base point selection for the tangent ReLU.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TreluBase {
    /// Identity matrix (SPD) / first basis vector pole (sphere).
    CanonicalBase,
    /// Fréchet mean of the whole image.
    ImageFM,
}

/// Canonical base point of a manifold (identity / pole).
pub fn canonical_base(manifold: ManifoldId) -> ManifoldPoint {
    match manifold {
        ManifoldId::Spd(n) => ManifoldPoint::from_spd(SpdMatrix::identity(n)),
        ManifoldId::Sphere(n) => {
            let mut v = DVector::zeros(n + 1);
            v[0] = 1.0;
            ManifoldPoint::sphere(v).expect("pole is a unit vector")
        }
    }
}

/// Tangent ReLU on a single point: log to the base, clip coordinates at
/// the threshold, exp back. SPD coordinates are the symmetric matrix
/// entries; sphere coordinates are the ambient entries, re-projected to
/// the tangent plane after clipping.
pub fn trelu_point(
    x: &ManifoldPoint,
    base: &ManifoldPoint,
    threshold: f64,
) -> Result<ManifoldPoint> {
    let v = log_map(base, x)?;
    let clipped = v.coords.map(|e| e.max(threshold));
    exp_map(&make_tangent(base.clone(), clipped))
}

/// Tangent ReLU over an image.
pub fn trelu(image: &ManifoldImage, base_policy: TreluBase, threshold: f64) -> Result<ManifoldImage> {
    let base = match base_policy {
        TreluBase::CanonicalBase => canonical_base(image.manifold),
        TreluBase::ImageFM => image_fm(image)?,
    };
    image.map_points(|p| trelu_point(p, &base, threshold))
}

/// Distance transform feeding the Euclidean fully-connected head:
/// replaces each point by its distance to the set's Fréchet mean.
pub fn mvfc(points: &[ManifoldPoint]) -> Result<Vec<f64>> {
    if points.is_empty() {
        return Err(Error::ContractViolation("mvfc needs at least one point".into()));
    }
    let w = vec![1.0 / points.len() as f64; points.len()];
    let mean = frechet_mean(points, &w, ANCHOR_FM_TOL, ANCHOR_FM_MAX_ITER)?;
    points.iter().map(|x| dist(x, &mean)).collect()
}

/// Dense per-frame feature stack: `channels x height x width` values.
#[derive(Debug, Clone)]
pub struct FeatureMap {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::InvalidDimension(format!(
                "expected {} feature values, got {}",
                channels * height * width,
                data.len()
            )));
        }
        Ok(FeatureMap {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn positions(&self) -> usize {
        self.height * self.width
    }

    pub fn get(&self, c: usize, i: usize, j: usize) -> f64 {
        self.data[(c * self.height + i) * self.width + j]
    }

    pub fn get_mut(&mut self, c: usize, i: usize, j: usize) -> &mut f64 {
        &mut self.data[(c * self.height + i) * self.width + j]
    }
}

/// Second-order descriptor: channel covariance over spatial positions with
/// the channel means appended, producing an SPD point of size `C+1`.
///
/// Layout: `[[Sigma + ridge*I, mu], [mu^T, 1]]`, with an additional uniform
/// diagonal bump when the assembled matrix misses the positivity floor.
pub fn covariance_block(features: &FeatureMap, ridge: f64) -> Result<ManifoldPoint> {
    if features.positions() < 2 {
        return Err(Error::InvalidDimension(
            "covariance needs at least 2 spatial positions".into(),
        ));
    }
    if features.data.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidData("features contain non-finite values".into()));
    }
    let c = features.channels;
    let n_pos = features.positions() as f64;
    let mut mean = vec![0.0; c];
    for ch in 0..c {
        for i in 0..features.height {
            for j in 0..features.width {
                mean[ch] += features.get(ch, i, j);
            }
        }
        mean[ch] /= n_pos;
    }
    let mut cov = DMatrix::<f64>::zeros(c, c);
    for i in 0..features.height {
        for j in 0..features.width {
            for a in 0..c {
                let da = features.get(a, i, j) - mean[a];
                for b in a..c {
                    let db = features.get(b, i, j) - mean[b];
                    cov[(a, b)] += da * db;
                }
            }
        }
    }
    let mut m = DMatrix::<f64>::zeros(c + 1, c + 1);
    for a in 0..c {
        for b in a..c {
            let v = cov[(a, b)] / n_pos;
            m[(a, b)] = v;
            m[(b, a)] = v;
        }
        m[(a, a)] += ridge;
        m[(a, c)] = mean[a];
        m[(c, a)] = mean[a];
    }
    m[(c, c)] = 1.0;

    let sym = crate::kernels::SymMatrix::symmetrize(&m);
    let decomp = crate::kernels::sym_eig(&sym)?;
    let min_eig = decomp.eigenvalues[0];
    if min_eig < crate::kernels::SPD_EIG_FLOOR {
        let bump = crate::kernels::SPD_EIG_FLOOR - min_eig + ridge;
        let mut fixed = sym.into_inner();
        for d in 0..=c {
            fixed[(d, d)] += bump;
        }
        return Ok(ManifoldPoint::from_spd(SpdMatrix::new(fixed)?));
    }
    Ok(ManifoldPoint::from_spd(SpdMatrix::new(sym.into_inner())?))
}

/// Weight transform behind the two-layer collapse identity: with a shared
/// fixed anchor, the cascade of two convolutions with first-layer weights
/// `w` (two filters of `N` inputs each) and second-layer weights `(h1, h2)`
/// equals a single convolution with weights `h1*w[..N], h2*w[N..]`.
///
/// Errors unless both layers use the same `FixedPoint` anchor, which is the
/// hypothesis of the identity.
pub fn collapse_two_layers(
    first_anchor: &AnchorPolicy,
    second_anchor: &AnchorPolicy,
    w: &[f64],
    h: (f64, f64),
) -> Result<Vec<f64>> {
    let (p1, p2) = match (first_anchor, second_anchor) {
        (AnchorPolicy::FixedPoint(a), AnchorPolicy::FixedPoint(b)) => (a, b),
        _ => {
            return Err(Error::ContractViolation(
                "collapse requires both layers anchored at the same fixed point".into(),
            ))
        }
    };
    if p1.manifold != p2.manifold || dist(p1, p2)? > 1e-12 {
        return Err(Error::ContractViolation(
            "collapse requires identical fixed anchors".into(),
        ));
    }
    if w.len() % 2 != 0 || w.is_empty() {
        return Err(Error::ContractViolation(format!(
            "first-layer weights must split into two filters, got {}",
            w.len()
        )));
    }
    let n = w.len() / 2;
    let mut out = Vec::with_capacity(w.len());
    out.extend(w[..n].iter().map(|&wi| h.0 * wi));
    out.extend(w[n..].iter().map(|&wi| h.1 * wi));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifold::{random_point, random_tangent};
    use nalgebra::DMatrix;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_spd_image(dims: Vec<usize>, channels: usize, seed: u64) -> ManifoldImage {
        let mut r = rng(seed);
        ManifoldImage::from_fn(ManifoldId::Spd(3), dims, channels, |_, _| {
            random_point(ManifoldId::Spd(3), 0.5, &mut r).unwrap()
        })
        .unwrap()
    }

    #[test]
    fn one_by_one_window_identity() {
        let image = random_spd_image(vec![4], 1, 1);
        let kernel = MvcKernel::new(vec![1], 1, 1, vec![1.0], AnchorPolicy::WindowFM).unwrap();
        let out = mvc_forward(&image, &kernel, &[1], Padding::None).unwrap();
        assert_eq!(out.dims(), image.dims());
        for (a, b) in out.points().iter().zip(image.points().iter()) {
            assert!(dist(a, b).unwrap() < 1e-9);
        }
    }

    #[test]
    fn constant_image_maps_to_anchor() {
        let mut r = rng(2);
        let p = random_point(ManifoldId::Spd(3), 0.5, &mut r).unwrap();
        let image = ManifoldImage::constant(ManifoldId::Spd(3), vec![5], 1, p.clone()).unwrap();
        let kernel = MvcKernel::new(
            vec![3],
            1,
            1,
            vec![0.3, -1.2, 2.5],
            AnchorPolicy::WindowFM,
        )
        .unwrap();
        let out = mvc_forward(&image, &kernel, &[1], Padding::None).unwrap();
        for q in out.points() {
            assert!(dist(q, &p).unwrap() < 1e-9);
        }
    }

    /// Independent straight-line transliteration of the convolution with a
    /// fixed identity anchor, using nalgebra's eigensolver directly.
    fn oracle_fixed_identity(xs: &[DMatrix<f64>], w: &[f64]) -> DMatrix<f64> {
        let logm = |m: &DMatrix<f64>| -> DMatrix<f64> {
            let e = m.clone().symmetric_eigen();
            let mut d = DMatrix::zeros(m.nrows(), m.nrows());
            for i in 0..m.nrows() {
                d[(i, i)] = e.eigenvalues[i].ln();
            }
            &e.eigenvectors * d * e.eigenvectors.transpose()
        };
        let expm = |m: &DMatrix<f64>| -> DMatrix<f64> {
            let e = m.clone().symmetric_eigen();
            let mut d = DMatrix::zeros(m.nrows(), m.nrows());
            for i in 0..m.nrows() {
                d[(i, i)] = e.eigenvalues[i].exp();
            }
            &e.eigenvectors * d * e.eigenvectors.transpose()
        };
        let mut acc = DMatrix::zeros(3, 3);
        for (x, &wi) in xs.iter().zip(w.iter()) {
            acc += logm(x) * wi;
        }
        expm(&acc)
    }

    #[test]
    fn matches_straight_line_oracle_identity_anchor() {
        let image = random_spd_image(vec![3], 1, 3);
        let weights = vec![0.7, -0.4, 1.1];
        let anchor = ManifoldPoint::from_spd(SpdMatrix::identity(3));
        let kernel = MvcKernel::new(
            vec![3],
            1,
            1,
            weights.clone(),
            AnchorPolicy::FixedPoint(anchor),
        )
        .unwrap();
        let out = mvc_forward(&image, &kernel, &[1], Padding::None).unwrap();
        assert_eq!(out.site_count(), 1);
        let xs: Vec<DMatrix<f64>> = image
            .points()
            .iter()
            .map(|p| p.spd_matrix().into_inner())
            .collect();
        let want = oracle_fixed_identity(&xs, &weights);
        let got = out.get_linear(0, 0).spd_matrix().into_inner();
        assert!((got - want).norm() < 1e-10);
    }

    /// Full chart transliteration at a center-pixel anchor: m^{1/2} and
    /// m^{-1/2} built from nalgebra's eigensolver, no shared code.
    #[test]
    fn matches_straight_line_oracle_center_anchor() {
        let image = random_spd_image(vec![3], 1, 4);
        let weights = vec![0.5, -0.9, 0.3];
        let kernel =
            MvcKernel::new(vec![3], 1, 1, weights.clone(), AnchorPolicy::CenterPixel).unwrap();
        let out = mvc_forward(&image, &kernel, &[1], Padding::None).unwrap();

        let m = image.get(&[1], 0).spd_matrix().into_inner();
        let e = m.clone().symmetric_eigen();
        let mut sq = DMatrix::zeros(3, 3);
        let mut isq = DMatrix::zeros(3, 3);
        for i in 0..3 {
            sq[(i, i)] = e.eigenvalues[i].sqrt();
            isq[(i, i)] = 1.0 / e.eigenvalues[i].sqrt();
        }
        let b = &e.eigenvectors * sq * e.eigenvectors.transpose();
        let a = &e.eigenvectors * isq * e.eigenvectors.transpose();
        let logm = |m: &DMatrix<f64>| -> DMatrix<f64> {
            let e = m.clone().symmetric_eigen();
            let mut d = DMatrix::zeros(3, 3);
            for i in 0..3 {
                d[(i, i)] = e.eigenvalues[i].ln();
            }
            &e.eigenvectors * d * e.eigenvectors.transpose()
        };
        let expm = |m: &DMatrix<f64>| -> DMatrix<f64> {
            let e = m.clone().symmetric_eigen();
            let mut d = DMatrix::zeros(3, 3);
            for i in 0..3 {
                d[(i, i)] = e.eigenvalues[i].exp();
            }
            &e.eigenvectors * d * e.eigenvectors.transpose()
        };
        let mut v = DMatrix::zeros(3, 3);
        for (idx, wi) in weights.iter().enumerate() {
            let x = image.get(&[idx], 0).spd_matrix().into_inner();
            v += &b * logm(&((&a * x) * &a)) * &b * *wi;
        }
        let want = &b * expm(&((&a * &v) * &a)) * &b;
        let got = out.get_linear(0, 0).spd_matrix().into_inner();
        assert!((got - &want).norm() / want.norm() < 1e-10);
    }

    #[test]
    fn output_grid_shapes() {
        let image = random_spd_image(vec![8, 8], 1, 5);
        let kernel = MvcKernel::new(
            vec![3, 3],
            1,
            1,
            vec![0.1; 9],
            AnchorPolicy::CenterPixel,
        )
        .unwrap();
        let shrunk = mvc_forward(&image, &kernel, &[1, 1], Padding::None).unwrap();
        assert_eq!(shrunk.dims(), &[6, 6]);
        let same = mvc_forward(&image, &kernel, &[1, 1], Padding::Periodic).unwrap();
        assert_eq!(same.dims(), &[8, 8]);
        let strided = mvc_forward(&image, &kernel, &[2, 2], Padding::Periodic).unwrap();
        assert_eq!(strided.dims(), &[4, 4]);
    }

    #[test]
    fn trelu_fixes_nonnegative_tangents() {
        let mut r = rng(6);
        // logm entries >= 0: expm of an entrywise-positive symmetric matrix
        let m = DMatrix::from_fn(3, 3, |_, _| r.random_range(0.1..0.5));
        let sym = crate::kernels::SymMatrix::symmetrize(&m);
        let p = ManifoldPoint::from_spd(crate::kernels::spd_expm(&sym).unwrap());
        let out = trelu_point(&p, &canonical_base(ManifoldId::Spd(3)), 0.0).unwrap();
        assert!(dist(&p, &out).unwrap() < 1e-9);
    }

    #[test]
    fn trelu_clips_all_negative_to_base() {
        let mut r = rng(7);
        let m = DMatrix::from_fn(3, 3, |_, _| r.random_range(0.1..0.6));
        let sym = crate::kernels::SymMatrix::symmetrize(&(-m));
        let p = ManifoldPoint::from_spd(crate::kernels::spd_expm(&sym).unwrap());
        let base = canonical_base(ManifoldId::Spd(3));
        let out = trelu_point(&p, &base, 0.0).unwrap();
        assert!(dist(&out, &base).unwrap() < 1e-9);
    }

    #[test]
    fn trelu_is_idempotent() {
        for manifold in [ManifoldId::Spd(3), ManifoldId::Sphere(2)] {
            let mut r = rng(8);
            let dims = vec![10, 10];
            let image = ManifoldImage::from_fn(manifold, dims, 1, |_, _| {
                random_point(manifold, 0.4, &mut r).unwrap()
            })
            .unwrap();
            let once = trelu(&image, TreluBase::CanonicalBase, 0.0).unwrap();
            let twice = trelu(&once, TreluBase::CanonicalBase, 0.0).unwrap();
            for (a, b) in once.points().iter().zip(twice.points().iter()) {
                assert!(dist(a, b).unwrap() < 1e-10);
            }
        }
    }

    #[test]
    fn mvfc_identical_points_zero_vector() {
        let mut r = rng(9);
        let p = random_point(ManifoldId::Spd(3), 0.5, &mut r).unwrap();
        let feats = mvfc(&[p.clone(), p.clone(), p]).unwrap();
        assert!(feats.iter().all(|&d| d < 1e-10));
    }

    #[test]
    fn mvfc_two_points_split_evenly() {
        let mut r = rng(10);
        let a = random_point(ManifoldId::Spd(3), 0.5, &mut r).unwrap();
        let b = random_point(ManifoldId::Spd(3), 0.5, &mut r).unwrap();
        let d = dist(&a, &b).unwrap();
        let feats = mvfc(&[a, b]).unwrap();
        assert!((feats[0] - d / 2.0).abs() < 1e-8);
        assert!((feats[1] - d / 2.0).abs() < 1e-8);
    }

    #[test]
    fn mvfc_invariant_under_isometries() {
        let mut r = rng(11);
        let points: Vec<ManifoldPoint> = (0..6)
            .map(|_| random_point(ManifoldId::Spd(3), 0.5, &mut r).unwrap())
            .collect();
        let g = DMatrix::from_fn(3, 3, |_, _| r.random_range(-1.0..1.0))
            + DMatrix::identity(3, 3) * 2.0;
        let phi = crate::manifold::IsometryAction::spd_congruence(g).unwrap();
        let mapped: Vec<ManifoldPoint> = points
            .iter()
            .map(|p| crate::manifold::apply_isometry(&phi, p).unwrap())
            .collect();
        let base = mvfc(&points).unwrap();
        let moved = mvfc(&mapped).unwrap();
        for (x, y) in base.iter().zip(moved.iter()) {
            assert!((x - y).abs() < 1e-8);
        }
    }

    #[test]
    fn covariance_constant_features() {
        // zero variance: the assembled matrix needs the diagonal fix to
        // clear the positivity floor, leaving means and zero covariances
        let fm = FeatureMap::new(2, 2, 2, vec![0.7; 8]).unwrap();
        let out = covariance_block(&fm, 1e-6).unwrap();
        let m = out.spd_matrix().into_inner();
        assert!(m[(0, 1)].abs() < 1e-15);
        assert!((m[(0, 2)] - 0.7).abs() < 1e-15);
        // uniform diagonal bump: corner stays 1 plus the same bump as the
        // covariance block
        assert!(m[(2, 2)] >= 1.0);
        assert!((m[(0, 0)] - m[(1, 1)]).abs() < 1e-15);
        assert!(((m[(2, 2)] - 1.0) - (m[(0, 0)] - 1e-6)).abs() < 1e-12);
        out.check_invariants().unwrap();
    }

    #[test]
    fn covariance_two_sample_variance() {
        let (a, b) = (-1.0, 1.0);
        let fm = FeatureMap::new(1, 1, 2, vec![a, b]).unwrap();
        let out = covariance_block(&fm, 0.0).unwrap();
        let m = out.spd_matrix().into_inner();
        let mu = (a + b) / 2.0;
        let var = ((a - mu).powi(2) + (b - mu).powi(2)) / 2.0;
        assert!((m[(0, 0)] - var).abs() < 1e-12);
        assert!((m[(0, 1)] - mu).abs() < 1e-12);
        assert!((m[(1, 1)] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn covariance_matches_two_pass_oracle() {
        let mut r = rng(12);
        let data: Vec<f64> = (0..4 * 5 * 5).map(|_| r.random_range(-1.0..1.0)).collect();
        let fm = FeatureMap::new(4, 5, 5, data.clone()).unwrap();
        let out = covariance_block(&fm, 1e-6).unwrap();
        let m = out.spd_matrix().into_inner();
        // independent two-pass computation over flat data
        let pos = 25;
        let mut mu = [0.0f64; 4];
        for c in 0..4 {
            for p in 0..pos {
                mu[c] += data[c * pos + p];
            }
            mu[c] /= pos as f64;
        }
        for a in 0..4 {
            for b in 0..4 {
                let mut cov = 0.0;
                for p in 0..pos {
                    cov += (data[a * pos + p] - mu[a]) * (data[b * pos + p] - mu[b]);
                }
                cov /= pos as f64;
                let want = cov + if a == b { 1e-6 } else { 0.0 };
                assert!((m[(a, b)] - want).abs() < 1e-12);
            }
            assert!((m[(a, 4)] - mu[a]).abs() < 1e-12);
        }
    }

    #[test]
    fn collapse_weight_transform() {
        let anchor = AnchorPolicy::FixedPoint(ManifoldPoint::from_spd(SpdMatrix::identity(3)));
        let w = vec![0.2, -0.5, 0.8, 0.1];
        let collapsed = collapse_two_layers(&anchor, &anchor, &w, (1.0, 0.0)).unwrap();
        assert_eq!(collapsed, vec![0.2, -0.5, 0.0, 0.0]);
        let err = collapse_two_layers(&AnchorPolicy::WindowFM, &anchor, &w, (1.0, 0.0));
        assert!(matches!(err, Err(Error::ContractViolation(_))));
    }

    #[test]
    fn collapse_cascade_equals_single_layer() {
        let mut r = rng(13);
        let anchor_pt = ManifoldPoint::from_spd(SpdMatrix::identity(3));
        let anchor = AnchorPolicy::FixedPoint(anchor_pt.clone());
        for _ in 0..20 {
            let points: Vec<ManifoldPoint> = (0..6)
                .map(|_| random_point(ManifoldId::Spd(3), 0.4, &mut r).unwrap())
                .collect();
            let w: Vec<f64> = (0..6).map(|_| r.random_range(-1.0..1.0)).collect();
            let h = (r.random_range(-1.0..1.0), r.random_range(-1.0..1.0));
            let m1 = mvc_combine(&points[..3], &w[..3], &anchor_pt).unwrap();
            let m2 = mvc_combine(&points[3..], &w[3..], &anchor_pt).unwrap();
            let cascade =
                mvc_combine(&[m1, m2], &[h.0, h.1], &anchor_pt).unwrap();
            let collapsed = collapse_two_layers(&anchor, &anchor, &w, h).unwrap();
            let single = mvc_combine(&points, &collapsed, &anchor_pt).unwrap();
            assert!(dist(&cascade, &single).unwrap() < 1e-8);
        }
    }

    #[test]
    fn collapse_zero_weights_yield_anchor() {
        let mut r = rng(14);
        let anchor_pt = ManifoldPoint::from_spd(SpdMatrix::identity(3));
        let points: Vec<ManifoldPoint> = (0..4)
            .map(|_| random_point(ManifoldId::Spd(3), 0.4, &mut r).unwrap())
            .collect();
        let w = vec![0.0; 4];
        let m1 = mvc_combine(&points[..2], &w[..2], &anchor_pt).unwrap();
        let m2 = mvc_combine(&points[2..], &w[2..], &anchor_pt).unwrap();
        let cascade = mvc_combine(&[m1, m2], &[0.0, 0.0], &anchor_pt).unwrap();
        assert!(dist(&cascade, &anchor_pt).unwrap() < 1e-12);
    }

    #[test]
    fn shift_round_trips() {
        let image = random_spd_image(vec![4, 3], 2, 15);
        let shifted = image.shift(&[1, 2]).unwrap();
        let back = shifted.shift(&[3, 1]).unwrap();
        for (a, b) in image.points().iter().zip(back.points().iter()) {
            assert_eq!(a.coords, b.coords);
        }
    }

    #[test]
    fn sphere_mvc_runs() {
        let mut r = rng(16);
        let image = ManifoldImage::from_fn(ManifoldId::Sphere(2), vec![5], 1, |_, _| {
            random_point(ManifoldId::Sphere(2), 0.2, &mut r).unwrap()
        })
        .unwrap();
        let kernel =
            MvcKernel::new(vec![3], 1, 2, vec![0.4, 0.3, 0.3, -0.2, 0.5, 0.1], AnchorPolicy::WindowFM)
                .unwrap();
        let out = mvc_forward(&image, &kernel, &[1], Padding::None).unwrap();
        assert_eq!(out.dims(), &[3]);
        assert_eq!(out.channels(), 2);
        for p in out.points() {
            p.check_invariants().unwrap();
        }
    }

    #[test]
    fn non_contraction_witness_exists() {
        // two images differing at one pixel; a large-weight kernel expands
        // that difference well past the input distance
        let mut r = rng(17);
        let id = ManifoldPoint::from_spd(SpdMatrix::identity(3));
        let base = ManifoldImage::constant(ManifoldId::Spd(3), vec![3], 1, id.clone()).unwrap();
        let bump = {
            let v = random_tangent(&id, 1.0, &mut r).unwrap();
            exp_map(&v.scaled(0.01 / v.norm().max(1e-15))).unwrap()
        };
        let mut pts = base.points().to_vec();
        pts[1] = bump.clone();
        let perturbed = ManifoldImage::new(ManifoldId::Spd(3), vec![3], 1, pts).unwrap();
        let kernel = MvcKernel::new(
            vec![3],
            1,
            1,
            vec![0.0, 100.0, 0.0],
            AnchorPolicy::FixedPoint(id.clone()),
        )
        .unwrap();
        let out_a = mvc_forward(&base, &kernel, &[1], Padding::None).unwrap();
        let out_b = mvc_forward(&perturbed, &kernel, &[1], Padding::None).unwrap();
        let d_in = dist(&id, &bump).unwrap();
        let d_out = dist(out_a.get_linear(0, 0), out_b.get_linear(0, 0)).unwrap();
        assert!(
            d_out / d_in > 10.0,
            "expansion ratio {} not > 10",
            d_out / d_in
        );
    }
}
