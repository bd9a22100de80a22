//! Riemannian manifold operations: Exp/Log maps, geodesic distance,
//! Fréchet means, and isometry actions.
//!
//! Two concrete geometries are provided behind one point/tangent API:
//!
//! * `Spd(n)` — symmetric positive definite matrices under the affine
//!   (GL-invariant) metric. Nonpositively curved, so Log and the Fréchet
//!   mean are globally defined and unique.
//! * `Sphere(n)` — the unit n-sphere embedded in `R^{n+1}`. Charts are
//!   local: the exponential map is restricted to tangent norms below pi
//!   and the log map rejects antipodal pairs.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{self, SpdMatrix, SymMatrix};

/// Unit-norm acceptance tolerance for sphere points.
pub const SPHERE_NORM_TOL: f64 = 1e-12;
/// Tangency tolerance for sphere tangent vectors.
pub const SPHERE_TANGENT_TOL: f64 = 1e-10;
/// Inner products at or below `-1 + CUT_LOCUS_TOL` are treated as antipodal.
pub const CUT_LOCUS_TOL: f64 = 1e-10;
/// Default Fréchet mean stopping tolerance on the update tangent norm.
pub const FM_DEFAULT_TOL: f64 = 1e-10;
/// Default Fréchet mean iteration cap.
pub const FM_DEFAULT_MAX_ITER: usize = 200;

/// Which manifold a point or tangent vector lives on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ManifoldId {
    /// n x n symmetric positive definite matrices, n >= 2.
    Spd(usize),
    /// Unit sphere S^n embedded in R^{n+1}, n >= 1.
    Sphere(usize),
}

impl ManifoldId {
    pub fn validate(self) -> Result<()> {
        match self {
            ManifoldId::Spd(n) if n < 2 => Err(Error::InvalidDimension(format!(
                "Spd({n}) requires n >= 2"
            ))),
            ManifoldId::Sphere(n) if n < 1 => Err(Error::InvalidDimension(format!(
                "Sphere({n}) requires n >= 1"
            ))),
            _ => Ok(()),
        }
    }

    /// Length of the flat coordinate vector for one point.
    pub fn coord_len(self) -> usize {
        match self {
            ManifoldId::Spd(n) => n * n,
            ManifoldId::Sphere(n) => n + 1,
        }
    }
}

/// A point on a manifold, carried with its manifold tag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifoldPoint {
    pub manifold: ManifoldId,
    /// SPD: n*n row-major matrix entries. Sphere: unit vector in R^{n+1}.
    pub coords: DVector<f64>,
}

impl ManifoldPoint {
    /// Wraps an SPD matrix as a point of `Spd(n)`.
    pub fn from_spd(p: SpdMatrix) -> Self {
        let n = p.dim();
        ManifoldPoint {
            manifold: ManifoldId::Spd(n),
            coords: flatten(p.mat()),
        }
    }

    /// Validates and wraps a sphere point (must already have unit norm).
    pub fn sphere(coords: DVector<f64>) -> Result<Self> {
        if coords.len() < 2 {
            return Err(Error::InvalidDimension(
                "sphere point needs ambient dimension >= 2".into(),
            ));
        }
        let norm = coords.norm();
        if (norm - 1.0).abs() > SPHERE_NORM_TOL {
            return Err(Error::InvalidData(format!(
                "sphere point norm {norm} deviates from 1 by more than {SPHERE_NORM_TOL:e}"
            )));
        }
        Ok(ManifoldPoint {
            manifold: ManifoldId::Sphere(coords.len() - 1),
            coords,
        })
    }

    /// Normalizes an ambient vector onto the sphere.
    pub fn sphere_normalized(coords: DVector<f64>) -> Result<Self> {
        let norm = coords.norm();
        if norm < 1e-300 {
            return Err(Error::InvalidData("cannot normalize a zero vector".into()));
        }
        ManifoldPoint::sphere(coords / norm)
    }

    /// Validates a raw (manifold, coords) pair.
    pub fn new(manifold: ManifoldId, coords: DVector<f64>) -> Result<Self> {
        manifold.validate()?;
        if coords.len() != manifold.coord_len() {
            return Err(Error::InvalidDimension(format!(
                "expected {} coords for {:?}, got {}",
                manifold.coord_len(),
                manifold,
                coords.len()
            )));
        }
        match manifold {
            ManifoldId::Spd(n) => {
                let p = SpdMatrix::new(unflatten(&coords, n))?;
                Ok(ManifoldPoint::from_spd(p))
            }
            ManifoldId::Sphere(_) => ManifoldPoint::sphere(coords),
        }
    }

    /// The SPD matrix behind an `Spd` point.
    pub fn spd_matrix(&self) -> SpdMatrix {
        match self.manifold {
            ManifoldId::Spd(n) => SpdMatrix::from_unchecked(unflatten(&self.coords, n)),
            ManifoldId::Sphere(_) => panic!("spd_matrix() called on a sphere point"),
        }
    }

    /// Validates the point invariants (used by generator sweeps).
    pub fn check_invariants(&self) -> Result<()> {
        match self.manifold {
            ManifoldId::Spd(n) => {
                SpdMatrix::new(unflatten(&self.coords, n))?;
            }
            ManifoldId::Sphere(_) => {
                let norm = self.coords.norm();
                if (norm - 1.0).abs() > SPHERE_NORM_TOL {
                    return Err(Error::InvalidData(format!(
                        "sphere norm drifted to {norm}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// A tangent vector anchored at a point.
#[derive(Debug, Clone, PartialEq)]
pub struct TangentVector {
    pub manifold: ManifoldId,
    pub anchor: ManifoldPoint,
    /// SPD: symmetric matrix entries. Sphere: ambient vector orthogonal to the anchor.
    pub coords: DVector<f64>,
}

impl TangentVector {
    pub fn new(anchor: ManifoldPoint, coords: DVector<f64>) -> Result<Self> {
        if coords.len() != anchor.manifold.coord_len() {
            return Err(Error::InvalidDimension(format!(
                "tangent coords length {} does not match {:?}",
                coords.len(),
                anchor.manifold
            )));
        }
        match anchor.manifold {
            ManifoldId::Spd(n) => {
                SymMatrix::new(unflatten(&coords, n))?;
            }
            ManifoldId::Sphere(_) => {
                let inner = coords.dot(&anchor.coords);
                if inner.abs() > SPHERE_TANGENT_TOL {
                    return Err(Error::InvalidData(format!(
                        "sphere tangent not orthogonal to anchor: <v,p> = {inner:e}"
                    )));
                }
            }
        }
        Ok(TangentVector {
            manifold: anchor.manifold,
            anchor,
            coords,
        })
    }

    pub fn zero(anchor: ManifoldPoint) -> Self {
        let len = anchor.manifold.coord_len();
        TangentVector {
            manifold: anchor.manifold,
            anchor,
            coords: DVector::zeros(len),
        }
    }

    pub fn sym_matrix(&self) -> SymMatrix {
        match self.manifold {
            ManifoldId::Spd(n) => SymMatrix::symmetrize(&unflatten(&self.coords, n)),
            ManifoldId::Sphere(_) => panic!("sym_matrix() called on a sphere tangent"),
        }
    }

    /// Riemannian norm at the anchor.
    pub fn norm(&self) -> f64 {
        metric_inner(self, self).map(f64::sqrt).unwrap_or(f64::NAN)
    }

    pub fn scaled(&self, s: f64) -> TangentVector {
        TangentVector {
            manifold: self.manifold,
            anchor: self.anchor.clone(),
            coords: &self.coords * s,
        }
    }
}

/// An isometry of the manifold: congruence `P -> G P G^T` on SPD,
/// rotation `p -> R p` on the sphere.
#[derive(Debug, Clone)]
pub struct IsometryAction {
    pub manifold: ManifoldId,
    matrix: DMatrix<f64>,
}

impl IsometryAction {
    /// SPD congruence action by an invertible matrix `g`.
    pub fn spd_congruence(g: DMatrix<f64>) -> Result<Self> {
        if g.nrows() != g.ncols() || g.nrows() < 2 {
            return Err(Error::InvalidDimension(format!(
                "congruence matrix must be square n>=2, got {}x{}",
                g.nrows(),
                g.ncols()
            )));
        }
        let det = g.clone().lu().determinant();
        if det.abs() < 1e-8 {
            return Err(Error::InvalidData(format!(
                "congruence matrix is numerically singular (|det| = {:e})",
                det.abs()
            )));
        }
        Ok(IsometryAction {
            manifold: ManifoldId::Spd(g.nrows()),
            matrix: g,
        })
    }

    /// Sphere rotation by an orthogonal matrix `r`.
    pub fn sphere_rotation(r: DMatrix<f64>) -> Result<Self> {
        if r.nrows() != r.ncols() || r.nrows() < 2 {
            return Err(Error::InvalidDimension(format!(
                "rotation matrix must be square n>=2, got {}x{}",
                r.nrows(),
                r.ncols()
            )));
        }
        let dev = (r.transpose() * &r - DMatrix::identity(r.nrows(), r.nrows())).norm();
        if dev > 1e-10 {
            return Err(Error::InvalidData(format!(
                "rotation matrix not orthogonal: ||R^T R - I|| = {dev:e}"
            )));
        }
        Ok(IsometryAction {
            manifold: ManifoldId::Sphere(r.nrows() - 1),
            matrix: r,
        })
    }

    pub fn identity(manifold: ManifoldId) -> Self {
        let n = match manifold {
            ManifoldId::Spd(n) => n,
            ManifoldId::Sphere(n) => n + 1,
        };
        IsometryAction {
            manifold,
            matrix: DMatrix::identity(n, n),
        }
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    /// Testing hook: perturbs the action matrix so it is no longer an
    /// isometry. Used by fault-injection modes to prove the equivariance
    /// checks have power.
    pub fn skewed(&self, eps: f64) -> IsometryAction {
        let mut m = self.matrix.clone();
        m[(0, 1)] += eps;
        IsometryAction {
            manifold: self.manifold,
            matrix: m,
        }
    }
}

fn flatten(m: &DMatrix<f64>) -> DVector<f64> {
    let (r, c) = (m.nrows(), m.ncols());
    let mut v = DVector::zeros(r * c);
    for i in 0..r {
        for j in 0..c {
            v[i * c + j] = m[(i, j)];
        }
    }
    v
}

fn unflatten(v: &DVector<f64>, n: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, n, |i, j| v[i * n + j])
}

fn check_same_manifold(a: ManifoldId, b: ManifoldId) -> Result<()> {
    if a != b {
        return Err(Error::ContractViolation(format!(
            "mixed manifolds {a:?} and {b:?}"
        )));
    }
    Ok(())
}

/// Cached square-root factors of an SPD anchor. All affine-invariant
/// formulas at a fixed base point share these, so hot paths (windowed
/// convolutions, Fréchet iterations) build the chart once per anchor.
pub(crate) struct SpdChart {
    pub sqrt: DMatrix<f64>,
    pub inv_sqrt: DMatrix<f64>,
}

impl SpdChart {
    pub fn at(p: &SpdMatrix) -> Result<SpdChart> {
        let decomp = kernels::sym_eig(&p.as_sym())?;
        if decomp.eigenvalues[0] < kernels::SPD_EIG_FLOOR {
            return Err(Error::NotPositiveDefinite {
                min_eig: decomp.eigenvalues[0],
            });
        }
        Ok(SpdChart {
            sqrt: decomp.apply_scalar(f64::sqrt),
            inv_sqrt: decomp.apply_scalar(|x| 1.0 / x.sqrt()),
        })
    }

    /// `Exp_P(V) = P^{1/2} expm(P^{-1/2} V P^{-1/2}) P^{1/2}`
    pub fn exp(&self, v: &SymMatrix) -> Result<SpdMatrix> {
        let inner = SymMatrix::symmetrize(&(&self.inv_sqrt * v.mat() * &self.inv_sqrt));
        let e = kernels::spd_expm(&inner)?;
        let out = &self.sqrt * e.mat() * &self.sqrt;
        Ok(SpdMatrix::from_unchecked((&out + out.transpose()) * 0.5))
    }

    /// `Log_P(Q) = P^{1/2} logm(P^{-1/2} Q P^{-1/2}) P^{1/2}`
    pub fn log(&self, q: &SpdMatrix) -> Result<SymMatrix> {
        let inner = SpdMatrix::from_unchecked(sym_product(&self.inv_sqrt, q.mat()));
        let l = kernels::spd_logm(&inner)?;
        Ok(SymMatrix::symmetrize(&(&self.sqrt * l.mat() * &self.sqrt)))
    }

    /// `d(P,Q) = ||logm(P^{-1/2} Q P^{-1/2})||_F`
    pub fn dist(&self, q: &SpdMatrix) -> Result<f64> {
        let inner = SpdMatrix::from_unchecked(sym_product(&self.inv_sqrt, q.mat()));
        Ok(kernels::spd_logm(&inner)?.frobenius_norm())
    }

    /// Riemannian norm of a tangent at this chart's base.
    pub fn tangent_norm(&self, v: &SymMatrix) -> f64 {
        (&self.inv_sqrt * v.mat() * &self.inv_sqrt).norm()
    }
}

/// `A M A` symmetrized, for symmetric `A`.
fn sym_product(a: &DMatrix<f64>, m: &DMatrix<f64>) -> DMatrix<f64> {
    let out = a * m * a;
    (&out + out.transpose()) * 0.5
}

/// Riemannian exponential map: follows the geodesic from the anchor with
/// initial velocity `v` for unit time.
pub fn exp_map(v: &TangentVector) -> Result<ManifoldPoint> {
    match v.manifold {
        ManifoldId::Spd(_) => {
            let chart = SpdChart::at(&v.anchor.spd_matrix())?;
            Ok(ManifoldPoint::from_spd(chart.exp(&v.sym_matrix())?))
        }
        ManifoldId::Sphere(_) => {
            let norm = v.coords.norm();
            if norm >= std::f64::consts::PI {
                return Err(Error::OutOfChart { norm });
            }
            if norm < 1e-12 {
                return Ok(v.anchor.clone());
            }
            let p = &v.anchor.coords;
            let out = p * norm.cos() + &v.coords * (norm.sin() / norm);
            ManifoldPoint::sphere_normalized(out)
        }
    }
}

/// Riemannian log map: the tangent vector at `p` whose geodesic reaches `q`.
pub fn log_map(p: &ManifoldPoint, q: &ManifoldPoint) -> Result<TangentVector> {
    check_same_manifold(p.manifold, q.manifold)?;
    match p.manifold {
        ManifoldId::Spd(_) => {
            let chart = SpdChart::at(&p.spd_matrix())?;
            let l = chart.log(&q.spd_matrix())?;
            Ok(TangentVector {
                manifold: p.manifold,
                anchor: p.clone(),
                coords: flatten(l.mat()),
            })
        }
        ManifoldId::Sphere(_) => {
            let inner = p.coords.dot(&q.coords).clamp(-1.0, 1.0);
            if inner <= -1.0 + CUT_LOCUS_TOL {
                return Err(Error::CutLocus { inner });
            }
            let residual = &q.coords - &p.coords * inner;
            let rnorm = residual.norm();
            // atan2 form of arccos<p,q>: keeps full precision near theta = 0
            let theta = rnorm.atan2(inner);
            if theta < 1e-12 {
                return Ok(TangentVector::zero(p.clone()));
            }
            let coords = residual * (theta / rnorm);
            // orthogonal to p by construction up to rounding
            let coords = &coords - &p.coords * coords.dot(&p.coords);
            Ok(TangentVector {
                manifold: p.manifold,
                anchor: p.clone(),
                coords,
            })
        }
    }
}

/// Geodesic distance.
pub fn dist(p: &ManifoldPoint, q: &ManifoldPoint) -> Result<f64> {
    check_same_manifold(p.manifold, q.manifold)?;
    match p.manifold {
        ManifoldId::Spd(_) => {
            let chart = SpdChart::at(&p.spd_matrix())?;
            chart.dist(&q.spd_matrix())
        }
        ManifoldId::Sphere(_) => {
            let inner = p.coords.dot(&q.coords).clamp(-1.0, 1.0);
            if inner <= -1.0 + CUT_LOCUS_TOL {
                return Err(Error::CutLocus { inner });
            }
            let residual = (&q.coords - &p.coords * inner).norm();
            Ok(residual.atan2(inner))
        }
    }
}

/// Riemannian inner product of two tangents sharing an anchor.
pub fn metric_inner(u: &TangentVector, v: &TangentVector) -> Result<f64> {
    check_same_manifold(u.manifold, v.manifold)?;
    if u.anchor.coords != v.anchor.coords {
        return Err(Error::AnchorMismatch);
    }
    match u.manifold {
        ManifoldId::Spd(_) => {
            // trace(P^{-1} U P^{-1} V) = <A U A, A V A>_F with A = P^{-1/2}
            let chart = SpdChart::at(&u.anchor.spd_matrix())?;
            let a = &chart.inv_sqrt;
            let lhs = a * u.sym_matrix().mat() * a;
            let rhs = a * v.sym_matrix().mat() * a;
            Ok(lhs.dot(&rhs))
        }
        ManifoldId::Sphere(_) => Ok(u.coords.dot(&v.coords)),
    }
}

/// Weighted Fréchet mean by fixed-point (Karcher) iteration
/// `m <- Exp_m(sum_i w_i Log_m(x_i))`, initialized at the first point.
///
/// Stops when the update tangent norm drops below `tol`; reaching
/// `max_iter` with a residual above `1e3 * tol` is a hard error. The
/// sphere path first checks that all points lie within a geodesic ball
/// of radius pi/2 around their normalized Euclidean mean, which
/// guarantees uniqueness; SPD needs no guard (nonpositive curvature).
pub fn frechet_mean(
    points: &[ManifoldPoint],
    weights: &[f64],
    tol: f64,
    max_iter: usize,
) -> Result<ManifoldPoint> {
    let (manifold, weights) = validate_mean_inputs(points, weights)?;
    if let ManifoldId::Sphere(_) = manifold {
        sphere_spread_guard(points)?;
    }
    if points.len() == 1 {
        return Ok(points[0].clone());
    }

    let mut mean = points[0].clone();
    let (mut step, mut residual) = mean_update(&mean, points, &weights)?;
    if std::env::var("MVCNET_FM_TRACE").is_ok() && points.len() > 1 {
        let mut maxd = 0.0f64;
        for (i, a) in points.iter().enumerate() {
            for b in points.iter().skip(i + 1).take(8) {
                maxd = maxd.max(dist(a, b).unwrap_or(f64::NAN));
            }
        }
        if maxd > 3.0 {
            eprintln!("FM input: {} points spread {maxd:.2} residual0 {residual:.3e}", points.len());
        }
    }
    // Step damping: the plain fixed-point update is a unit gradient step
    // on the squared-distance objective. For widely spread points on a
    // negatively curved space that step can overshoot and cycle, so a
    // step that fails to reduce the residual is retried shorter. On
    // concentrated configurations eta stays at 1 and the trajectory is
    // exactly the undamped iteration.
    let mut eta = 1.0f64;
    let mut iters = 0;
    let mut best_residual = residual;
    let mut since_progress = 0usize;
    while iters < max_iter {
        iters += 1;
        if residual < tol {
            return Ok(mean);
        }
        let candidate = exp_map(&step.scaled(eta))?;
        let (c_step, c_residual) = mean_update(&candidate, points, &weights)?;
        if c_residual < residual {
            mean = candidate;
            step = c_step;
            residual = c_residual;
            eta = (eta * 1.5).min(1.0);
        } else if eta > 1e-6 {
            eta *= 0.5;
        } else {
            since_progress = usize::MAX; // steps stopped descending outright
        }
        if residual < 0.9 * best_residual {
            best_residual = residual;
            since_progress = 0;
        } else {
            since_progress = since_progress.saturating_add(1);
        }
        // The residual is evaluated in finite arithmetic; its noise floor
        // scales with the points' condition numbers. When no meaningful
        // descent has happened for a window of iterations, the iterate is
        // the numerically attainable optimum.
        if since_progress >= 30 {
            return Ok(mean);
        }
        if std::env::var("MVCNET_FM_TRACE").is_ok() && iters % 50 == 0 {
            eprintln!("fm iter {iters}: residual {residual:.6e} eta {eta:.3e} best {best_residual:.6e} stall {since_progress}");
        }
    }
    if residual < tol {
        return Ok(mean);
    }
    if residual > 1e3 * tol {
        return Err(Error::MeanNonConvergence {
            residual,
            tol,
            iters,
        });
    }
    Ok(mean)
}

/// Single-pass inductive mean: cheaper than the fixed-point iteration for
/// large windows, at the price of order dependence and no optimality
/// residual. Opt-in fast path.
pub fn frechet_mean_incremental(points: &[ManifoldPoint], weights: &[f64]) -> Result<ManifoldPoint> {
    let (_, weights) = validate_mean_inputs(points, weights)?;
    let mut mean = points[0].clone();
    let mut mass = weights[0];
    for (x, &w) in points.iter().zip(weights.iter()).skip(1) {
        mass += w;
        if w == 0.0 {
            continue;
        }
        let v = log_map(&mean, x)?;
        mean = exp_map(&v.scaled(w / mass))?;
    }
    Ok(mean)
}

fn validate_mean_inputs<'w>(
    points: &[ManifoldPoint],
    weights: &'w [f64],
) -> Result<(ManifoldId, std::borrow::Cow<'w, [f64]>)> {
    if points.is_empty() {
        return Err(Error::ContractViolation(
            "frechet_mean needs at least one point".into(),
        ));
    }
    if points.len() != weights.len() {
        return Err(Error::ContractViolation(format!(
            "{} points but {} weights",
            points.len(),
            weights.len()
        )));
    }
    let manifold = points[0].manifold;
    for p in points {
        check_same_manifold(manifold, p.manifold)?;
    }
    let mut total = 0.0;
    for &w in weights {
        if !(w >= 0.0) {
            return Err(Error::ContractViolation(format!(
                "negative or NaN weight {w}"
            )));
        }
        total += w;
    }
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::ContractViolation(format!(
            "weights sum to {total}, expected 1"
        )));
    }
    Ok((manifold, std::borrow::Cow::Borrowed(weights)))
}

fn sphere_spread_guard(points: &[ManifoldPoint]) -> Result<()> {
    let dim = points[0].coords.len();
    let mut sum = DVector::zeros(dim);
    for p in points {
        sum += &p.coords;
    }
    if sum.norm() < 1e-12 {
        return Err(Error::NonUniqueMean {
            spread: std::f64::consts::PI,
        });
    }
    let center = ManifoldPoint::sphere_normalized(sum)?;
    let mut spread = 0.0f64;
    for p in points {
        spread = spread.max(dist(&center, p)?);
    }
    if spread >= std::f64::consts::FRAC_PI_2 {
        return Err(Error::NonUniqueMean { spread });
    }
    Ok(())
}

/// `sum_i w_i Log_m(x_i)` as a tangent at `m`, with its Riemannian norm.
fn mean_update(
    mean: &ManifoldPoint,
    points: &[ManifoldPoint],
    weights: &[f64],
) -> Result<(TangentVector, f64)> {
    match mean.manifold {
        ManifoldId::Spd(n) => {
            let chart = SpdChart::at(&mean.spd_matrix())?;
            let mut acc = DMatrix::zeros(n, n);
            for (x, &w) in points.iter().zip(weights.iter()) {
                if w == 0.0 {
                    continue;
                }
                acc += chart.log(&x.spd_matrix())?.mat() * w;
            }
            let norm = chart.tangent_norm(&SymMatrix::symmetrize(&acc));
            Ok((
                TangentVector {
                    manifold: mean.manifold,
                    anchor: mean.clone(),
                    coords: flatten(&acc),
                },
                norm,
            ))
        }
        ManifoldId::Sphere(_) => {
            let mut acc = DVector::zeros(mean.coords.len());
            for (x, &w) in points.iter().zip(weights.iter()) {
                if w == 0.0 {
                    continue;
                }
                acc += &log_map(mean, x)?.coords * w;
            }
            let norm = acc.norm();
            Ok((
                TangentVector {
                    manifold: mean.manifold,
                    anchor: mean.clone(),
                    coords: acc,
                },
                norm,
            ))
        }
    }
}

/// Applies an isometry to a point.
pub fn apply_isometry(phi: &IsometryAction, p: &ManifoldPoint) -> Result<ManifoldPoint> {
    check_same_manifold(phi.manifold, p.manifold)?;
    match phi.manifold {
        ManifoldId::Spd(_) => {
            let g = &phi.matrix;
            let out = g * p.spd_matrix().mat() * g.transpose();
            Ok(ManifoldPoint::from_spd(SpdMatrix::from_unchecked(
                (&out + out.transpose()) * 0.5,
            )))
        }
        ManifoldId::Sphere(_) => ManifoldPoint::sphere_normalized(&phi.matrix * &p.coords),
    }
}

/// The differential of an isometry, mapping a tangent at `p` to a tangent
/// at `phi(p)`.
pub fn apply_isometry_tangent(phi: &IsometryAction, v: &TangentVector) -> Result<TangentVector> {
    check_same_manifold(phi.manifold, v.manifold)?;
    let new_anchor = apply_isometry(phi, &v.anchor)?;
    match phi.manifold {
        ManifoldId::Spd(_) => {
            let g = &phi.matrix;
            let out = g * v.sym_matrix().mat() * g.transpose();
            let sym = (&out + out.transpose()) * 0.5;
            Ok(TangentVector {
                manifold: phi.manifold,
                anchor: new_anchor,
                coords: flatten(&sym),
            })
        }
        ManifoldId::Sphere(_) => {
            let out = &phi.matrix * &v.coords;
            // strip rounding drift off the new anchor direction
            let out = &out - &new_anchor.coords * out.dot(&new_anchor.coords);
            Ok(TangentVector {
                manifold: phi.manifold,
                anchor: new_anchor,
                coords: out,
            })
        }
    }
}

/// Standard normal draw (Box-Muller); keeps the crate free of an extra
/// distributions dependency.
pub(crate) fn gaussian(rng: &mut impl Rng) -> f64 {
    let u1: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.random_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Deterministic random point. SPD: `expm` of a symmetric matrix with
/// entries uniform in `[-spread, spread]`. Sphere: the fixed pole `e_1`
/// plus `spread` times a Gaussian vector, normalized — so `spread -> 0`
/// concentrates near the pole.
pub fn random_point(manifold: ManifoldId, spread: f64, rng: &mut impl Rng) -> Result<ManifoldPoint> {
    manifold.validate()?;
    if !(spread >= 0.0) {
        return Err(Error::ContractViolation(format!("bad spread {spread}")));
    }
    match manifold {
        ManifoldId::Spd(n) => {
            let m = DMatrix::from_fn(n, n, |_, _| {
                if spread == 0.0 {
                    0.0
                } else {
                    rng.random_range(-spread..spread)
                }
            });
            let sym = SymMatrix::symmetrize(&m);
            Ok(ManifoldPoint::from_spd(kernels::spd_expm(&sym)?))
        }
        ManifoldId::Sphere(n) => {
            let mut v = DVector::zeros(n + 1);
            v[0] = 1.0;
            for i in 0..=n {
                v[i] += spread * gaussian(rng);
            }
            ManifoldPoint::sphere_normalized(v)
        }
    }
}

/// Deterministic random tangent at `anchor` with Riemannian norm
/// `norm_bound * u`, `u ~ U[0,1)`: a uniform direction scaled into the
/// requested ball.
pub fn random_tangent(
    anchor: &ManifoldPoint,
    norm_bound: f64,
    rng: &mut impl Rng,
) -> Result<TangentVector> {
    if !(norm_bound >= 0.0) {
        return Err(Error::ContractViolation(format!(
            "bad norm bound {norm_bound}"
        )));
    }
    let raw = match anchor.manifold {
        ManifoldId::Spd(n) => {
            let m = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
            flatten(SymMatrix::symmetrize(&m).mat())
        }
        ManifoldId::Sphere(n) => {
            let mut v = DVector::from_fn(n + 1, |_, _| gaussian(rng));
            v -= &anchor.coords * v.dot(&anchor.coords);
            v
        }
    };
    let magnitude = norm_bound * rng.random_range(0.0..1.0);
    let direction = TangentVector {
        manifold: anchor.manifold,
        anchor: anchor.clone(),
        coords: raw,
    };
    let norm = direction.norm();
    if norm < 1e-14 || magnitude == 0.0 {
        return Ok(TangentVector::zero(anchor.clone()));
    }
    Ok(direction.scaled(magnitude / norm))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn north_pole(n: usize) -> ManifoldPoint {
        let mut v = DVector::zeros(n + 1);
        v[0] = 1.0;
        ManifoldPoint::sphere(v).unwrap()
    }

    #[test]
    fn spd_exp_at_identity_is_expm() {
        let mut r = rng(1);
        let anchor = ManifoldPoint::from_spd(SpdMatrix::identity(3));
        let v = random_tangent(&anchor, 1.0, &mut r).unwrap();
        let out = exp_map(&v).unwrap();
        let direct = kernels::spd_expm(&v.sym_matrix()).unwrap();
        assert!((out.spd_matrix().mat() - direct.mat()).norm() < 1e-12);
    }

    #[test]
    fn sphere_exp_of_zero_is_anchor() {
        let p = north_pole(2);
        let out = exp_map(&TangentVector::zero(p.clone())).unwrap();
        assert!((out.coords - p.coords).norm() < 1e-15);
    }

    #[test]
    fn sphere_exp_rejects_out_of_chart() {
        let p = north_pole(2);
        let mut v = DVector::zeros(3);
        v[1] = std::f64::consts::PI + 0.1;
        let t = TangentVector::new(p, v).unwrap();
        assert!(matches!(exp_map(&t), Err(Error::OutOfChart { .. })));
    }

    #[test]
    fn spd_round_trip_log_exp() {
        let mut r = rng(2);
        for _ in 0..30 {
            let p = random_point(ManifoldId::Spd(3), 0.8, &mut r).unwrap();
            let v = random_tangent(&p, 2.0, &mut r).unwrap();
            let q = exp_map(&v).unwrap();
            let back = log_map(&p, &q).unwrap();
            let rel = (&back.coords - &v.coords).norm() / v.coords.norm().max(1e-12);
            assert!(rel < 1e-8, "spd round trip residual {rel}");
        }
    }

    #[test]
    fn sphere_round_trip_log_exp() {
        let mut r = rng(3);
        for _ in 0..30 {
            let p = random_point(ManifoldId::Sphere(2), 0.5, &mut r).unwrap();
            let v = random_tangent(&p, 2.5, &mut r).unwrap();
            let q = exp_map(&v).unwrap();
            let back = log_map(&p, &q).unwrap();
            let err = (&back.coords - &v.coords).norm();
            assert!(err < 1e-9, "sphere round trip error {err}");
        }
    }

    #[test]
    fn log_of_same_point_is_zero() {
        let mut r = rng(4);
        let p = random_point(ManifoldId::Spd(3), 1.0, &mut r).unwrap();
        let v = log_map(&p, &p).unwrap();
        assert!(v.coords.norm() < 1e-10);
    }

    #[test]
    fn sphere_quarter_circle_log_norm() {
        let p = north_pole(2);
        let mut q = DVector::zeros(3);
        q[1] = 1.0;
        let q = ManifoldPoint::sphere(q).unwrap();
        let v = log_map(&p, &q).unwrap();
        assert!((v.coords.norm() - std::f64::consts::FRAC_PI_2).abs() < 1e-12);
    }

    #[test]
    fn spd_log_identity_to_diagonal() {
        let p = ManifoldPoint::from_spd(SpdMatrix::identity(3));
        let q = ManifoldPoint::from_spd(
            SpdMatrix::new(DMatrix::from_diagonal(&DVector::from_vec(vec![
                std::f64::consts::E,
                1.0,
                1.0,
            ])))
            .unwrap(),
        );
        let v = log_map(&p, &q).unwrap();
        let m = v.sym_matrix();
        assert!((m.mat()[(0, 0)] - 1.0).abs() < 1e-12);
        assert!(m.mat()[(1, 1)].abs() < 1e-12);
    }

    #[test]
    fn dist_diagonal_closed_form() {
        let p = ManifoldPoint::from_spd(SpdMatrix::identity(3));
        let q = ManifoldPoint::from_spd(
            SpdMatrix::new(DMatrix::from_diagonal(&DVector::from_vec(vec![
                std::f64::consts::E.powi(2),
                1.0,
                1.0,
            ])))
            .unwrap(),
        );
        assert!((dist(&p, &q).unwrap() - 2.0).abs() < 1e-10);
    }

    #[test]
    fn dist_matches_affine_invariant_formula() {
        let mut r = rng(5);
        for _ in 0..20 {
            let p = random_point(ManifoldId::Spd(3), 0.9, &mut r).unwrap();
            let q = random_point(ManifoldId::Spd(3), 0.9, &mut r).unwrap();
            // oracle: direct evaluation via invsqrt/logm kernels
            let is = kernels::spd_invsqrtm(&p.spd_matrix()).unwrap();
            let inner = is.mat() * q.spd_matrix().mat() * is.mat();
            let inner = SpdMatrix::from_unchecked((&inner + inner.transpose()) * 0.5);
            let want = kernels::spd_logm(&inner).unwrap().frobenius_norm();
            let got = dist(&p, &q).unwrap();
            assert!((got - want).abs() < 1e-10);
            // symmetry
            assert!((got - dist(&q, &p).unwrap()).abs() < 1e-10);
        }
    }

    #[test]
    fn metric_inner_at_identity_is_trace_product() {
        let mut r = rng(6);
        let anchor = ManifoldPoint::from_spd(SpdMatrix::identity(3));
        let u = random_tangent(&anchor, 1.0, &mut r).unwrap();
        let v = random_tangent(&anchor, 1.0, &mut r).unwrap();
        let got = metric_inner(&u, &v).unwrap();
        let want = (u.sym_matrix().mat() * v.sym_matrix().mat()).trace();
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn metric_inner_anchor_mismatch_is_error() {
        let mut r = rng(7);
        let p = random_point(ManifoldId::Spd(3), 0.5, &mut r).unwrap();
        let q = random_point(ManifoldId::Spd(3), 0.5, &mut r).unwrap();
        let u = random_tangent(&p, 1.0, &mut r).unwrap();
        let v = random_tangent(&q, 1.0, &mut r).unwrap();
        assert!(matches!(metric_inner(&u, &v), Err(Error::AnchorMismatch)));
    }

    #[test]
    fn metric_norm_matches_geodesic_speed() {
        let mut r = rng(8);
        for manifold in [ManifoldId::Spd(3), ManifoldId::Sphere(2)] {
            for _ in 0..10 {
                let p = random_point(manifold, 0.5, &mut r).unwrap();
                let v = random_tangent(&p, 0.05, &mut r).unwrap();
                let q = exp_map(&v).unwrap();
                let inner = metric_inner(&v, &v).unwrap();
                let d = dist(&p, &q).unwrap();
                assert!((inner - d * d).abs() < 1e-8, "{manifold:?}: {inner} vs {}", d * d);
            }
        }
    }

    #[test]
    fn frechet_single_point() {
        let mut r = rng(9);
        let p = random_point(ManifoldId::Spd(3), 1.0, &mut r).unwrap();
        let m = frechet_mean(&[p.clone()], &[1.0], 1e-10, 200).unwrap();
        assert_eq!(m.coords, p.coords);
    }

    #[test]
    fn frechet_two_points_is_midpoint() {
        let mut r = rng(10);
        for manifold in [ManifoldId::Spd(3), ManifoldId::Sphere(2)] {
            let a = random_point(manifold, 0.4, &mut r).unwrap();
            let b = random_point(manifold, 0.4, &mut r).unwrap();
            let m = frechet_mean(&[a.clone(), b.clone()], &[0.5, 0.5], 1e-12, 500).unwrap();
            let da = dist(&m, &a).unwrap();
            let db = dist(&m, &b).unwrap();
            let dab = dist(&a, &b).unwrap();
            assert!((da - db).abs() < 1e-8);
            assert!((da - dab / 2.0).abs() < 1e-8);
        }
    }

    #[test]
    fn frechet_is_local_minimum() {
        let mut r = rng(11);
        let points: Vec<_> = (0..10)
            .map(|_| random_point(ManifoldId::Spd(3), 0.6, &mut r).unwrap())
            .collect();
        let w = vec![0.1; 10];
        let m = frechet_mean(&points, &w, 1e-10, 200).unwrap();
        let objective = |c: &ManifoldPoint| -> f64 {
            points.iter().map(|x| dist(c, x).unwrap().powi(2)).sum()
        };
        let base = objective(&m);
        for _ in 0..1000 {
            let u = random_tangent(&m, 1e-3, &mut r).unwrap();
            if u.coords.norm() < 1e-15 {
                continue;
            }
            let perturbed = exp_map(&u).unwrap();
            assert!(objective(&perturbed) >= base - 1e-12);
        }
    }

    #[test]
    fn frechet_optimality_residual() {
        let mut r = rng(12);
        for manifold in [ManifoldId::Spd(3), ManifoldId::Sphere(2)] {
            let points: Vec<_> = (0..6)
                .map(|_| random_point(manifold, 0.3, &mut r).unwrap())
                .collect();
            let w = vec![1.0 / 6.0; 6];
            let m = frechet_mean(&points, &w, 1e-10, 200).unwrap();
            let residual = mean_update(&m, &points, &w).unwrap().1;
            assert!(residual < 1e-10, "{manifold:?} residual {residual}");
        }
    }

    #[test]
    fn frechet_sphere_guard_rejects_antipodal_spread() {
        let p = north_pole(2);
        let mut q = DVector::zeros(3);
        q[0] = -1.0;
        let q = ManifoldPoint::sphere(q).unwrap();
        let err = frechet_mean(&[p, q], &[0.5, 0.5], 1e-10, 200);
        assert!(matches!(err, Err(Error::NonUniqueMean { .. })));
    }

    #[test]
    fn frechet_incremental_close_to_fixed_point() {
        let mut r = rng(13);
        let points: Vec<_> = (0..8)
            .map(|_| random_point(ManifoldId::Spd(3), 0.3, &mut r).unwrap())
            .collect();
        let w = vec![0.125; 8];
        let fixed = frechet_mean(&points, &w, 1e-10, 200).unwrap();
        let incr = frechet_mean_incremental(&points, &w).unwrap();
        // alike but not identical: the incremental pass is an approximation
        assert!(dist(&fixed, &incr).unwrap() < 0.2);
    }

    #[test]
    fn isometry_identity_fixes_points() {
        let mut r = rng(14);
        let p = random_point(ManifoldId::Spd(3), 0.7, &mut r).unwrap();
        let phi = IsometryAction::identity(ManifoldId::Spd(3));
        let out = apply_isometry(&phi, &p).unwrap();
        assert!((out.coords - p.coords).norm() < 1e-15);
    }

    #[test]
    fn orthogonal_congruence_fixes_identity() {
        let mut r = rng(15);
        // orthogonal G from the eigenvectors of a random symmetric matrix
        let m = DMatrix::from_fn(3, 3, |_, _| r.random_range(-1.0..1.0));
        let q = kernels::sym_eig(&SymMatrix::symmetrize(&m)).unwrap().eigenvectors;
        let phi = IsometryAction::spd_congruence(q).unwrap();
        let id = ManifoldPoint::from_spd(SpdMatrix::identity(3));
        let out = apply_isometry(&phi, &id).unwrap();
        assert!((out.coords - id.coords).norm() < 1e-12);
    }

    #[test]
    fn isometries_preserve_distance() {
        let mut r = rng(16);
        for _ in 0..20 {
            let p = random_point(ManifoldId::Spd(3), 0.8, &mut r).unwrap();
            let q = random_point(ManifoldId::Spd(3), 0.8, &mut r).unwrap();
            let g = DMatrix::from_fn(3, 3, |_, _| r.random_range(-1.0..1.0))
                + DMatrix::identity(3, 3) * 2.0;
            let phi = IsometryAction::spd_congruence(g).unwrap();
            let d0 = dist(&p, &q).unwrap();
            let d1 = dist(
                &apply_isometry(&phi, &p).unwrap(),
                &apply_isometry(&phi, &q).unwrap(),
            )
            .unwrap();
            assert!((d0 - d1).abs() < 1e-9, "distance drift {}", (d0 - d1).abs());
        }
    }

    #[test]
    fn lemma_exp_commutes_with_isometry() {
        let mut r = rng(17);
        for _ in 0..50 {
            let p = random_point(ManifoldId::Spd(3), 0.6, &mut r).unwrap();
            let v = random_tangent(&p, 1.0, &mut r).unwrap();
            let g = DMatrix::from_fn(3, 3, |_, _| r.random_range(-1.0..1.0))
                + DMatrix::identity(3, 3) * 2.0;
            let phi = IsometryAction::spd_congruence(g).unwrap();
            let lhs = apply_isometry(&phi, &exp_map(&v).unwrap()).unwrap();
            let rhs = exp_map(&apply_isometry_tangent(&phi, &v).unwrap()).unwrap();
            assert!(dist(&lhs, &rhs).unwrap() < 1e-8);
        }
        for _ in 0..50 {
            let p = random_point(ManifoldId::Sphere(2), 0.5, &mut r).unwrap();
            let v = random_tangent(&p, 1.0, &mut r).unwrap();
            let rot = random_rotation(3, &mut r);
            let phi = IsometryAction::sphere_rotation(rot).unwrap();
            let lhs = apply_isometry(&phi, &exp_map(&v).unwrap()).unwrap();
            let rhs = exp_map(&apply_isometry_tangent(&phi, &v).unwrap()).unwrap();
            assert!(dist(&lhs, &rhs).unwrap() < 1e-8);
        }
    }

    /// Orthogonalizes a random matrix via symmetric-eigenvector columns.
    pub(crate) fn random_rotation(n: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        let m = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        kernels::sym_eig(&SymMatrix::symmetrize(&m)).unwrap().eigenvectors
    }

    #[test]
    fn random_point_determinism_and_invariants() {
        for manifold in [ManifoldId::Spd(3), ManifoldId::Sphere(2)] {
            let a = random_point(manifold, 0.7, &mut rng(42)).unwrap();
            let b = random_point(manifold, 0.7, &mut rng(42)).unwrap();
            assert_eq!(a.coords, b.coords);
        }
        let mut r = rng(18);
        for _ in 0..2000 {
            random_point(ManifoldId::Spd(3), 1.0, &mut r)
                .unwrap()
                .check_invariants()
                .unwrap();
            random_point(ManifoldId::Sphere(2), 1.0, &mut r)
                .unwrap()
                .check_invariants()
                .unwrap();
        }
    }

    #[test]
    fn random_point_small_spread_near_reference() {
        let mut r = rng(19);
        let p = random_point(ManifoldId::Spd(3), 1e-4, &mut r).unwrap();
        let id = ManifoldPoint::from_spd(SpdMatrix::identity(3));
        assert!(dist(&id, &p).unwrap() < 1e-3);
        let s = random_point(ManifoldId::Sphere(2), 1e-4, &mut r).unwrap();
        assert!(dist(&north_pole(2), &s).unwrap() < 1e-3);
    }

    #[test]
    fn frechet_mean_commutes_with_isometries() {
        let mut r = rng(20);
        let points: Vec<_> = (0..5)
            .map(|_| random_point(ManifoldId::Spd(3), 0.5, &mut r).unwrap())
            .collect();
        let w = vec![0.2; 5];
        let g = DMatrix::from_fn(3, 3, |_, _| r.random_range(-1.0..1.0))
            + DMatrix::identity(3, 3) * 2.0;
        let phi = IsometryAction::spd_congruence(g).unwrap();
        let mapped: Vec<_> = points
            .iter()
            .map(|p| apply_isometry(&phi, p).unwrap())
            .collect();
        let lhs = frechet_mean(&mapped, &w, 1e-12, 500).unwrap();
        let rhs = apply_isometry(&phi, &frechet_mean(&points, &w, 1e-12, 500).unwrap()).unwrap();
        assert!(dist(&lhs, &rhs).unwrap() < 1e-7);
    }
}
