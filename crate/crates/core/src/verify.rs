//! Executable property suites: geometry round trips, metric axioms,
//! mean optimality, the equivariance identities, layer collapse, the
//! non-contraction witness, and gradient checks. The same functions back
//! the test suite and the `verify` CLI command, which reports counts and
//! the worst observed residual per property.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tape;
use crate::error::Result;
use crate::kernels::{self, SpdMatrix, SymMatrix};
use crate::layers::network::{build_network, softmax, AnchorPins, NetworkSpec, TapeHead};
use crate::layers::{
    collapse_two_layers, mvc_combine, mvc_forward, trelu, trelu_point, AnchorPolicy,
    ManifoldImage, MvcKernel, Padding, TreluBase,
};
use crate::manifold::{
    apply_isometry, apply_isometry_tangent, dist, exp_map, frechet_mean, log_map, metric_inner,
    random_point, random_tangent, IsometryAction, ManifoldId, ManifoldPoint, TangentVector,
};
use crate::synth::Target;

/// Outcome of one property run.
#[derive(Debug, Clone)]
pub struct PropertyResult {
    pub name: String,
    pub trials: usize,
    pub max_residual: f64,
    pub tolerance: f64,
    pub passed: bool,
    pub details: String,
}

impl PropertyResult {
    fn from_residual(name: &str, trials: usize, max_residual: f64, tolerance: f64) -> Self {
        PropertyResult {
            name: name.to_string(),
            trials,
            max_residual,
            tolerance,
            passed: max_residual <= tolerance,
            details: String::new(),
        }
    }

    fn vacuous(name: &str) -> Self {
        PropertyResult {
            name: name.to_string(),
            trials: 0,
            max_residual: 0.0,
            tolerance: 0.0,
            passed: true,
            details: "vacuous: zero trials requested".to_string(),
        }
    }

    pub fn line(&self) -> String {
        format!(
            "{} {:<38} trials={:<6} max_residual={:<12.3e} tol={:<9.1e}{}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.trials,
            self.max_residual,
            self.tolerance,
            if self.details.is_empty() {
                String::new()
            } else {
                format!("  ({})", self.details)
            }
        )
    }
}

/// Deliberate test-power faults for the verify command.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FaultMode {
    None,
    /// Skews the isometry matrix on one side of the equivariance
    /// comparison, which must make the property fail.
    SkewIsometry,
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_isometry(manifold: ManifoldId, r: &mut ChaCha8Rng) -> IsometryAction {
    match manifold {
        ManifoldId::Spd(n) => {
            let g = DMatrix::from_fn(n, n, |_, _| r.random_range(-1.0..1.0))
                + DMatrix::identity(n, n) * 2.0;
            IsometryAction::spd_congruence(g).expect("diagonally dominant matrix is invertible")
        }
        ManifoldId::Sphere(n) => {
            let m = DMatrix::from_fn(n + 1, n + 1, |_, _| r.random_range(-1.0..1.0));
            let q = kernels::sym_eig(&SymMatrix::symmetrize(&m))
                .expect("eig of random symmetric matrix")
                .eigenvectors;
            IsometryAction::sphere_rotation(q).expect("eigenvector matrix is orthogonal")
        }
    }
}

/// Exp/Log round trips in both directions, relative error.
pub fn exp_log_round_trips(manifold: ManifoldId, trials: usize, seed: u64) -> PropertyResult {
    if trials == 0 {
        return PropertyResult::vacuous("exp-log-round-trip");
    }
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let p = random_point(manifold, 0.7, &mut r).unwrap();
        let v = random_tangent(&p, 1.5, &mut r).unwrap();
        let q = exp_map(&v).unwrap();
        let back = log_map(&p, &q).unwrap();
        let rel = (&back.coords - &v.coords).norm() / v.coords.norm().max(1e-12);
        worst = worst.max(rel);

        let p2 = random_point(manifold, 0.7, &mut r).unwrap();
        let q2 = random_point(manifold, 0.7, &mut r).unwrap();
        let w = log_map(&p2, &q2).unwrap();
        let q2_back = exp_map(&w).unwrap();
        let rel2 = dist(&q2, &q2_back).unwrap() / dist(&p2, &q2).unwrap().max(1e-12);
        worst = worst.max(rel2);
    }
    PropertyResult::from_residual(
        &format!("exp-log-round-trip[{manifold:?}]"),
        trials,
        worst,
        1e-9,
    )
}

/// Metric axioms on random triples: symmetry, identity, triangle
/// inequality with slack.
pub fn metric_axioms(manifold: ManifoldId, trials: usize, seed: u64) -> PropertyResult {
    if trials == 0 {
        return PropertyResult::vacuous("metric-axioms");
    }
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let a = random_point(manifold, 0.6, &mut r).unwrap();
        let b = random_point(manifold, 0.6, &mut r).unwrap();
        let c = random_point(manifold, 0.6, &mut r).unwrap();
        let dab = dist(&a, &b).unwrap();
        let dba = dist(&b, &a).unwrap();
        let dac = dist(&a, &c).unwrap();
        let dcb = dist(&c, &b).unwrap();
        // symmetry within 1e-10, identity at 1e-10, triangle slack 1e-9
        worst = worst.max((dab - dba).abs() * 10.0); // scale onto the 1e-9 budget
        worst = worst.max(dist(&a, &a).unwrap() * 10.0);
        worst = worst.max(dab - (dac + dcb));
    }
    PropertyResult::from_residual(
        &format!("metric-axioms[{manifold:?}]"),
        trials,
        worst,
        1e-9,
    )
}

/// First-order optimality of the Fréchet mean: the weighted tangent
/// residual at the returned point is below the solver tolerance.
pub fn fm_optimality(manifold: ManifoldId, trials: usize, seed: u64) -> PropertyResult {
    if trials == 0 {
        return PropertyResult::vacuous("fm-optimality");
    }
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let n = r.random_range(3..9);
        let points: Vec<ManifoldPoint> = (0..n)
            .map(|_| random_point(manifold, 0.4, &mut r).unwrap())
            .collect();
        let w = vec![1.0 / n as f64; n];
        let m = frechet_mean(&points, &w, 1e-10, 200).unwrap();
        let mut acc = DVector::zeros(m.coords.len());
        for (x, &wi) in points.iter().zip(w.iter()) {
            acc += &log_map(&m, x).unwrap().coords * wi;
        }
        let residual_vec = TangentVector::new(m.clone(), {
            match manifold {
                ManifoldId::Sphere(_) => {
                    let drift = acc.dot(&m.coords);
                    &acc - &m.coords * drift
                }
                ManifoldId::Spd(_) => acc,
            }
        })
        .unwrap();
        worst = worst.max(metric_inner(&residual_vec, &residual_vec).unwrap().sqrt());
    }
    PropertyResult::from_residual(
        &format!("fm-optimality[{manifold:?}]"),
        trials,
        worst,
        1e-10,
    )
}

/// The mean commutes with isometries.
pub fn fm_equivariance(manifold: ManifoldId, trials: usize, seed: u64) -> PropertyResult {
    if trials == 0 {
        return PropertyResult::vacuous("fm-equivariance");
    }
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let n = r.random_range(3..7);
        let points: Vec<ManifoldPoint> = (0..n)
            .map(|_| random_point(manifold, 0.4, &mut r).unwrap())
            .collect();
        let w = vec![1.0 / n as f64; n];
        let phi = random_isometry(manifold, &mut r);
        let mapped: Vec<ManifoldPoint> = points
            .iter()
            .map(|p| apply_isometry(&phi, p).unwrap())
            .collect();
        let lhs = frechet_mean(&mapped, &w, 1e-12, 500).unwrap();
        let rhs = apply_isometry(&phi, &frechet_mean(&points, &w, 1e-12, 500).unwrap()).unwrap();
        worst = worst.max(dist(&lhs, &rhs).unwrap());
    }
    PropertyResult::from_residual(
        &format!("fm-equivariance[{manifold:?}]"),
        trials,
        worst,
        1e-7,
    )
}

/// `phi(Exp_p(v)) = Exp_phi(p)(dphi(v))`.
pub fn exp_commutes_with_isometries(
    manifold: ManifoldId,
    trials: usize,
    seed: u64,
) -> PropertyResult {
    if trials == 0 {
        return PropertyResult::vacuous("exp-isometry-commute");
    }
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let p = random_point(manifold, 0.6, &mut r).unwrap();
        let v = random_tangent(&p, 1.0, &mut r).unwrap();
        let phi = random_isometry(manifold, &mut r);
        let lhs = apply_isometry(&phi, &exp_map(&v).unwrap()).unwrap();
        let rhs = exp_map(&apply_isometry_tangent(&phi, &v).unwrap()).unwrap();
        worst = worst.max(dist(&lhs, &rhs).unwrap());
    }
    PropertyResult::from_residual(
        &format!("exp-isometry-commute[{manifold:?}]"),
        trials,
        worst,
        1e-8,
    )
}

/// Distance invariance under isometries.
pub fn dist_isometry_invariance(manifold: ManifoldId, trials: usize, seed: u64) -> PropertyResult {
    if trials == 0 {
        return PropertyResult::vacuous("dist-isometry-invariance");
    }
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let p = random_point(manifold, 0.7, &mut r).unwrap();
        let q = random_point(manifold, 0.7, &mut r).unwrap();
        let phi = random_isometry(manifold, &mut r);
        let d0 = dist(&p, &q).unwrap();
        let d1 = dist(
            &apply_isometry(&phi, &p).unwrap(),
            &apply_isometry(&phi, &q).unwrap(),
        )
        .unwrap();
        worst = worst.max((d0 - d1).abs());
    }
    PropertyResult::from_residual(
        &format!("dist-isometry-invariance[{manifold:?}]"),
        trials,
        worst,
        1e-9,
    )
}

fn random_test_image(manifold: ManifoldId, sites: usize, seed: u64) -> ManifoldImage {
    let mut r = rng(seed);
    ManifoldImage::from_fn(manifold, vec![sites], 1, |_, _| {
        random_point(manifold, 0.3, &mut r).unwrap()
    })
    .unwrap()
}

/// Range equivariance of the convolution: mapping every pixel by an
/// isometry commutes with convolving, for each anchor policy.
pub fn mvc_range_equivariance(
    manifold: ManifoldId,
    anchor: AnchorPolicy,
    trials: usize,
    seed: u64,
    fault: FaultMode,
) -> PropertyResult {
    let label = format!("mvc-range-equivariance[{manifold:?},{anchor:?}]");
    if trials == 0 {
        return PropertyResult::vacuous(&label);
    }
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for trial in 0..trials {
        let image = random_test_image(manifold, 5, seed ^ (trial as u64) << 8);
        let kernel = MvcKernel::random_init(vec![3], 1, 2, anchor.clone(), &mut r).unwrap();
        let phi = random_isometry(manifold, &mut r);
        let mapped = image.map_points(|p| apply_isometry(&phi, p)).unwrap();
        let lhs = mvc_forward(&mapped, &kernel, &[1], Padding::None).unwrap();
        let phi_out = match fault {
            FaultMode::None => phi.clone(),
            FaultMode::SkewIsometry => phi.skewed(0.05),
        };
        let rhs = mvc_forward(&image, &kernel, &[1], Padding::None)
            .unwrap()
            .map_points(|p| apply_isometry(&phi_out, p))
            .unwrap();
        for (a, b) in lhs.points().iter().zip(rhs.points().iter()) {
            worst = worst.max(dist(a, b).unwrap());
        }
    }
    PropertyResult::from_residual(&label, trials, worst, 1e-7)
}

/// Domain equivariance: under periodic padding and stride 1, cyclic
/// shifts commute with the convolution, for every shift of the grid.
pub fn mvc_shift_equivariance(seed: u64) -> PropertyResult {
    let mut r = rng(seed);
    let dims = vec![8, 8];
    let image = ManifoldImage::from_fn(ManifoldId::Spd(3), dims.clone(), 1, |_, _| {
        random_point(ManifoldId::Spd(3), 0.3, &mut r).unwrap()
    })
    .unwrap();
    let kernel = MvcKernel::random_init(vec![3, 3], 1, 1, AnchorPolicy::WindowFM, &mut r).unwrap();
    let base = mvc_forward(&image, &kernel, &[1, 1], Padding::Periodic).unwrap();
    let mut worst = 0.0f64;
    let mut trials = 0;
    for tx in 0..8 {
        for ty in 0..8 {
            trials += 1;
            let shifted = image.shift(&[tx, ty]).unwrap();
            let lhs = mvc_forward(&shifted, &kernel, &[1, 1], Padding::Periodic).unwrap();
            let rhs = base.shift(&[tx, ty]).unwrap();
            for (a, b) in lhs.points().iter().zip(rhs.points().iter()) {
                worst = worst.max(dist(a, b).unwrap());
            }
        }
    }
    PropertyResult::from_residual("mvc-shift-equivariance[8x8]", trials, worst, 1e-9)
}

/// Two cascaded tangent combinations with a shared fixed anchor equal the
/// single combination with collapsed weights.
pub fn collapse_property(trials: usize, seed: u64) -> PropertyResult {
    if trials == 0 {
        return PropertyResult::vacuous("collapse-two-layers");
    }
    let mut r = rng(seed);
    let anchor_pt = ManifoldPoint::from_spd(SpdMatrix::identity(3));
    let anchor = AnchorPolicy::FixedPoint(anchor_pt.clone());
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let n = r.random_range(2..6);
        let points: Vec<ManifoldPoint> = (0..2 * n)
            .map(|_| random_point(ManifoldId::Spd(3), 0.4, &mut r).unwrap())
            .collect();
        let w: Vec<f64> = (0..2 * n).map(|_| r.random_range(-1.0..1.0)).collect();
        let h = (r.random_range(-1.0..1.0), r.random_range(-1.0..1.0));
        let m1 = mvc_combine(&points[..n], &w[..n], &anchor_pt).unwrap();
        let m2 = mvc_combine(&points[n..], &w[n..], &anchor_pt).unwrap();
        let cascade = mvc_combine(&[m1, m2], &[h.0, h.1], &anchor_pt).unwrap();
        let collapsed = collapse_two_layers(&anchor, &anchor, &w, h).unwrap();
        let single = mvc_combine(&points, &collapsed, &anchor_pt).unwrap();
        worst = worst.max(dist(&cascade, &single).unwrap());
    }
    PropertyResult::from_residual("collapse-two-layers", trials, worst, 1e-8)
}

/// Negative control: inserting the tangent ReLU between the two layers
/// breaks the collapse identity for generic weights. Passes when at
/// least 95% of draws differ by more than 1e-3.
pub fn collapse_negative_control(trials: usize, seed: u64) -> PropertyResult {
    if trials == 0 {
        return PropertyResult::vacuous("collapse-negative-control");
    }
    let mut r = rng(seed);
    let anchor_pt = ManifoldPoint::from_spd(SpdMatrix::identity(3));
    let anchor = AnchorPolicy::FixedPoint(anchor_pt.clone());
    let mut broken = 0usize;
    for _ in 0..trials {
        let n = 3;
        let points: Vec<ManifoldPoint> = (0..2 * n)
            .map(|_| random_point(ManifoldId::Spd(3), 0.6, &mut r).unwrap())
            .collect();
        let w: Vec<f64> = (0..2 * n).map(|_| r.random_range(-1.0..1.0)).collect();
        let h = (r.random_range(-1.0..1.0), r.random_range(-1.0..1.0));
        let m1 = mvc_combine(&points[..n], &w[..n], &anchor_pt).unwrap();
        let m2 = mvc_combine(&points[n..], &w[n..], &anchor_pt).unwrap();
        let m1 = trelu_point(&m1, &anchor_pt, 0.0).unwrap();
        let m2 = trelu_point(&m2, &anchor_pt, 0.0).unwrap();
        let cascade = mvc_combine(&[m1, m2], &[h.0, h.1], &anchor_pt).unwrap();
        let collapsed = collapse_two_layers(&anchor, &anchor, &w, h).unwrap();
        let single = mvc_combine(&points, &collapsed, &anchor_pt).unwrap();
        if dist(&cascade, &single).unwrap() > 1e-3 {
            broken += 1;
        }
    }
    let fraction = broken as f64 / trials as f64;
    PropertyResult {
        name: "collapse-negative-control".to_string(),
        trials,
        max_residual: fraction,
        tolerance: 0.95,
        passed: fraction >= 0.95,
        details: format!("{broken}/{trials} draws broke the identity (need >= 95%)"),
    }
}

/// Concrete witness that the convolution is not a non-expansion: one
/// changed pixel, one large weight, output distance > 10x input distance.
pub fn non_contraction_witness(seed: u64) -> PropertyResult {
    let mut r = rng(seed);
    let id = ManifoldPoint::from_spd(SpdMatrix::identity(3));
    let base = ManifoldImage::constant(ManifoldId::Spd(3), vec![3], 1, id.clone()).unwrap();
    let v = random_tangent(&id, 1.0, &mut r).unwrap();
    let bump = exp_map(&v.scaled(0.01 / v.norm().max(1e-15))).unwrap();
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
    let ratio = d_out / d_in;
    PropertyResult {
        name: "non-contraction-witness".to_string(),
        trials: 1,
        max_residual: ratio,
        tolerance: 10.0,
        passed: ratio > 10.0,
        details: format!(
            "input distance {d_in:.3e}, output distance {d_out:.3e}, weight magnitude 100"
        ),
    }
}

/// Applying the tangent ReLU twice equals applying it once.
pub fn trelu_idempotence(manifold: ManifoldId, trials: usize, seed: u64) -> PropertyResult {
    if trials == 0 {
        return PropertyResult::vacuous("trelu-idempotence");
    }
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    let mut pixels = 0;
    for _ in 0..trials {
        let image = ManifoldImage::from_fn(manifold, vec![5, 5], 1, |_, _| {
            random_point(manifold, 0.4, &mut r).unwrap()
        })
        .unwrap();
        let once = trelu(&image, TreluBase::CanonicalBase, 0.0).unwrap();
        let twice = trelu(&once, TreluBase::CanonicalBase, 0.0).unwrap();
        for (a, b) in once.points().iter().zip(twice.points().iter()) {
            worst = worst.max(dist(a, b).unwrap());
            pixels += 1;
        }
    }
    PropertyResult::from_residual(
        &format!("trelu-idempotence[{manifold:?}]"),
        pixels,
        worst,
        1e-10,
    )
}

/// Softmax outputs are a probability vector.
pub fn softmax_normalization(trials: usize, seed: u64) -> PropertyResult {
    if trials == 0 {
        return PropertyResult::vacuous("softmax-normalization");
    }
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let z: Vec<f64> = (0..r.random_range(2..8))
            .map(|_| r.random_range(-30.0..30.0))
            .collect();
        let p = softmax(&z);
        worst = worst.max((p.iter().sum::<f64>() - 1.0).abs());
        if p.iter().any(|&x| x < 0.0) {
            worst = worst.max(1.0);
        }
    }
    PropertyResult::from_residual("softmax-normalization", trials, worst, 1e-12)
}

// ---------------------------------------------------------------------------
// Gradient checks
// ---------------------------------------------------------------------------

/// Central-finite-difference check of the tape gradient for a network
/// spec on one sample. Stop-gradient mean anchors are pinned to their
/// base values during the probes, so the differences probe exactly the
/// function the tape differentiates. Checks up to `max_coords` parameter
/// coordinates (all, when fewer exist).
pub fn grad_check_network(
    name: &str,
    spec: &NetworkSpec,
    image: &ManifoldImage,
    target: &Target,
    seed: u64,
    max_coords: usize,
) -> Result<PropertyResult> {
    let mut net = build_network(spec, seed)?;

    let run = |net: &crate::layers::network::Network,
               pins: &mut AnchorPins,
               want_grads: bool|
     -> Result<(f64, Option<crate::autodiff::GradBundle>)> {
        let mut tape = Tape::new(&net.params);
        let head = net.forward_on_tape_pinned(&mut tape, image, pins)?;
        let loss = match (head, target) {
            (TapeHead::Logits(logits), Target::Class(label)) => {
                tape.softmax_cross_entropy(logits, *label)?
            }
            (TapeHead::Scalar(pred), Target::Scalar { noisy, .. }) => {
                let neg = tape.constant_scalar(-noisy);
                let diff = tape.add(pred, neg)?;
                tape.scale(diff, diff)?
            }
            _ => {
                return Err(crate::error::Error::ContractViolation(
                    "target does not match network head".into(),
                ))
            }
        };
        let loss_val = tape.value(loss).scalar()?;
        let grads = if want_grads {
            Some(tape.backward(loss)?)
        } else {
            None
        };
        Ok((loss_val, grads))
    };

    let mut pins = AnchorPins::recorder();
    let (_, grads) = run(&net, &mut pins, true)?;
    let grads = grads.expect("gradients requested");
    pins.start_replay();

    // coordinate selection: everything, or a seeded subset
    let mut coords: Vec<(usize, usize)> = Vec::new();
    for (id, entry) in net.params.iter() {
        for k in 0..entry.values.len() {
            coords.push((id, k));
        }
    }
    let total = coords.len();
    if total > max_coords {
        let mut r = rng(seed ^ 0xC0DE);
        for i in 0..max_coords {
            let j = r.random_range(i..total);
            coords.swap(i, j);
        }
        coords.truncate(max_coords);
    }

    let eps = 1e-6;
    let mut worst = 0.0f64;
    for &(id, k) in &coords {
        let orig = net.params.values(id)[k];
        net.params.values_mut(id)[k] = orig + eps;
        pins.start_replay();
        let up = run(&net, &mut pins, false)?.0;
        net.params.values_mut(id)[k] = orig - eps;
        pins.start_replay();
        let down = run(&net, &mut pins, false)?.0;
        net.params.values_mut(id)[k] = orig;
        let fd = (up - down) / (2.0 * eps);
        let g = grads.get(id)[k];
        let scale = fd.abs().max(g.abs());
        // below the finite-difference noise floor, absolute agreement is
        // the only meaningful comparison
        let rel = if scale < 1e-7 {
            if (fd - g).abs() < 1e-7 {
                0.0
            } else {
                1.0
            }
        } else {
            (fd - g).abs() / scale
        };
        worst = worst.max(rel);
    }
    Ok(PropertyResult::from_residual(
        &format!("grad-check[{name}]"),
        coords.len(),
        worst,
        1e-5,
    ))
}

/// Standard gradient-check suite: one configuration per layer type plus
/// a composed two-layer network, on SPD(3) data.
pub fn grad_check_suite(seed: u64, max_coords: usize) -> Result<Vec<PropertyResult>> {
    use crate::layers::network::LayerSpec;
    let mut r = rng(seed);
    let image = ManifoldImage::from_fn(ManifoldId::Spd(3), vec![5], 1, |_, _| {
        random_point(ManifoldId::Spd(3), 0.4, &mut r).unwrap()
    })
    .unwrap();

    let manifold = ManifoldId::Spd(3);
    let mvc = |anchor: AnchorPolicy, in_c: usize, out_c: usize| LayerSpec::Mvc {
        window: vec![3],
        in_channels: in_c,
        out_channels: out_c,
        stride: vec![1],
        padding: Padding::None,
        anchor,
    };
    let fc = |i: usize, o: usize, relu: bool| LayerSpec::EuclideanFc {
        in_dim: i,
        out_dim: o,
        relu,
    };

    let mut results = Vec::new();
    let class_target = Target::Class(1);

    // mvc with the differentiable center-pixel anchor
    let spec = NetworkSpec {
        manifold,
        input_dims: vec![5],
        input_channels: 1,
        layers: vec![
            mvc(AnchorPolicy::CenterPixel, 1, 2),
            LayerSpec::Mvfc,
            fc(6, 2, false),
            LayerSpec::Softmax,
        ],
    };
    results.push(grad_check_network(
        "mvc-center-pixel",
        &spec,
        &image,
        &class_target,
        seed.wrapping_add(1),
        max_coords,
    )?);

    // mvc with stop-gradient window-mean anchors
    let spec = NetworkSpec {
        manifold,
        input_dims: vec![5],
        input_channels: 1,
        layers: vec![
            mvc(AnchorPolicy::WindowFM, 1, 2),
            LayerSpec::Mvfc,
            fc(6, 2, false),
            LayerSpec::Softmax,
        ],
    };
    results.push(grad_check_network(
        "mvc-window-fm",
        &spec,
        &image,
        &class_target,
        seed.wrapping_add(2),
        max_coords,
    )?);

    // mvc with the image-wide mean anchor
    let spec = NetworkSpec {
        manifold,
        input_dims: vec![5],
        input_channels: 1,
        layers: vec![
            mvc(AnchorPolicy::GlobalFM, 1, 2),
            LayerSpec::Mvfc,
            fc(6, 2, false),
            LayerSpec::Softmax,
        ],
    };
    results.push(grad_check_network(
        "mvc-global-fm",
        &spec,
        &image,
        &class_target,
        seed.wrapping_add(3),
        max_coords,
    )?);

    // tangent ReLU (trainable threshold) between convolution and head
    let spec = NetworkSpec {
        manifold,
        input_dims: vec![5],
        input_channels: 1,
        layers: vec![
            mvc(AnchorPolicy::CenterPixel, 1, 2),
            LayerSpec::TRelu {
                base: TreluBase::CanonicalBase,
            },
            LayerSpec::Mvfc,
            fc(6, 2, false),
            LayerSpec::Softmax,
        ],
    };
    results.push(grad_check_network(
        "trelu",
        &spec,
        &image,
        &class_target,
        seed.wrapping_add(4),
        max_coords,
    )?);

    // tangent ReLU clipped in the image-mean chart
    let spec = NetworkSpec {
        manifold,
        input_dims: vec![5],
        input_channels: 1,
        layers: vec![
            mvc(AnchorPolicy::CenterPixel, 1, 1),
            LayerSpec::TRelu {
                base: TreluBase::ImageFM,
            },
            LayerSpec::Mvfc,
            fc(3, 2, false),
            LayerSpec::Softmax,
        ],
    };
    results.push(grad_check_network(
        "trelu-image-fm",
        &spec,
        &image,
        &class_target,
        seed.wrapping_add(5),
        max_coords,
    )?);

    // distance transform + fully-connected stack alone
    let spec = NetworkSpec {
        manifold,
        input_dims: vec![5],
        input_channels: 1,
        layers: vec![
            LayerSpec::Mvfc,
            fc(5, 4, true),
            fc(4, 2, false),
            LayerSpec::Softmax,
        ],
    };
    results.push(grad_check_network(
        "mvfc-fc-softmax",
        &spec,
        &image,
        &class_target,
        seed.wrapping_add(6),
        max_coords,
    )?);

    // regression head (squared error)
    let spec = NetworkSpec {
        manifold,
        input_dims: vec![5],
        input_channels: 1,
        layers: vec![
            mvc(AnchorPolicy::CenterPixel, 1, 1),
            LayerSpec::Mvfc,
            fc(3, 1, false),
        ],
    };
    results.push(grad_check_network(
        "regression-head",
        &spec,
        &image,
        &Target::Scalar {
            noisy: 0.37,
            clean: 0.37,
        },
        seed.wrapping_add(7),
        max_coords,
    )?);

    // full two-layer network, every parameter coordinate
    let spec = NetworkSpec {
        manifold,
        input_dims: vec![5],
        input_channels: 1,
        layers: vec![
            mvc(AnchorPolicy::CenterPixel, 1, 2),
            LayerSpec::TRelu {
                base: TreluBase::CanonicalBase,
            },
            mvc(AnchorPolicy::CenterPixel, 2, 2),
            LayerSpec::TRelu {
                base: TreluBase::CanonicalBase,
            },
            LayerSpec::Mvfc,
            fc(2, 4, true),
            fc(4, 2, false),
            LayerSpec::Softmax,
        ],
    };
    results.push(grad_check_network(
        "two-layer-network-all-coords",
        &spec,
        &image,
        &class_target,
        seed.wrapping_add(8),
        usize::MAX,
    )?);

    Ok(results)
}

// ---------------------------------------------------------------------------
// Suite runner
// ---------------------------------------------------------------------------

/// Which manifolds a verify run covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ManifoldChoice {
    Both,
    Spd,
    Sphere,
}

impl ManifoldChoice {
    fn list(self) -> Vec<ManifoldId> {
        match self {
            ManifoldChoice::Both => vec![ManifoldId::Spd(3), ManifoldId::Sphere(2)],
            ManifoldChoice::Spd => vec![ManifoldId::Spd(3)],
            ManifoldChoice::Sphere => vec![ManifoldId::Sphere(2)],
        }
    }
}

/// Configuration of a full verify run.
#[derive(Debug, Clone, Copy)]
pub struct VerifyConfig {
    pub seed: u64,
    pub trials: usize,
    pub fault: FaultMode,
    /// Include the gradient checks (slower).
    pub grad_checks: bool,
    pub manifolds: ManifoldChoice,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        VerifyConfig {
            seed: 0,
            trials: 100,
            fault: FaultMode::None,
            grad_checks: true,
            manifolds: ManifoldChoice::Both,
        }
    }
}

/// Runs every property suite, returning one result per property.
pub fn run_all(cfg: &VerifyConfig) -> Result<Vec<PropertyResult>> {
    let manifolds = cfg.manifolds.list();
    let t = cfg.trials;
    let s = cfg.seed;
    let mut out = Vec::new();
    for (i, &m) in manifolds.iter().enumerate() {
        let ms = s.wrapping_add(1000 * i as u64);
        out.push(exp_log_round_trips(m, t, ms.wrapping_add(1)));
        out.push(metric_axioms(m, t * 10, ms.wrapping_add(2)));
        out.push(fm_optimality(m, t.div_ceil(2), ms.wrapping_add(3)));
        out.push(fm_equivariance(m, t.div_ceil(2), ms.wrapping_add(4)));
        out.push(exp_commutes_with_isometries(m, t, ms.wrapping_add(5)));
        out.push(dist_isometry_invariance(m, t, ms.wrapping_add(6)));
        for anchor in [
            AnchorPolicy::WindowFM,
            AnchorPolicy::CenterPixel,
            AnchorPolicy::GlobalFM,
        ] {
            out.push(mvc_range_equivariance(
                m,
                anchor,
                t.div_ceil(4),
                ms.wrapping_add(7),
                cfg.fault,
            ));
        }
        out.push(trelu_idempotence(m, t.div_ceil(10).max(1), ms.wrapping_add(8)));
    }
    if t > 0 {
        out.push(mvc_shift_equivariance(s.wrapping_add(21)));
        out.push(non_contraction_witness(s.wrapping_add(23)));
    }
    out.push(collapse_property(t * 2, s.wrapping_add(22)));
    out.push(collapse_negative_control(t * 2, s.wrapping_add(24)));
    out.push(softmax_normalization(t, s.wrapping_add(25)));
    if cfg.grad_checks && t > 0 {
        out.extend(grad_check_suite(s.wrapping_add(26), 50)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_suite_passes_without_grad_checks() {
        let cfg = VerifyConfig {
            seed: 3,
            trials: 10,
            fault: FaultMode::None,
            grad_checks: false,
            manifolds: ManifoldChoice::Both,
        };
        let results = run_all(&cfg).unwrap();
        for r in &results {
            assert!(r.passed, "{}", r.line());
        }
    }

    #[test]
    fn zero_trials_is_vacuous_pass() {
        let cfg = VerifyConfig {
            seed: 3,
            trials: 0,
            fault: FaultMode::None,
            grad_checks: false,
            manifolds: ManifoldChoice::Both,
        };
        let results = run_all(&cfg).unwrap();
        assert!(results.iter().all(|r| r.passed));
        assert!(results.iter().any(|r| r.details.contains("vacuous")));
    }

    #[test]
    fn injected_fault_breaks_equivariance() {
        let res = mvc_range_equivariance(
            ManifoldId::Spd(3),
            AnchorPolicy::CenterPixel,
            5,
            11,
            FaultMode::SkewIsometry,
        );
        assert!(!res.passed, "fault injection must fail: {}", res.line());
    }

    #[test]
    fn grad_checks_pass() {
        let results = grad_check_suite(7, 12).unwrap();
        for r in &results {
            assert!(r.passed, "{}", r.line());
        }
    }
}
