//! Superquadric primitives, tapering, inside-outside functions and rigid poses.
//!
//! Every operation comes in two flavours: a plain `f64` version used for
//! inference, assignment and evaluation, and a tape version (suffix `_var`)
//! used inside the training loss. The two are tested against each other.

use std::f64::consts::{FRAC_PI_2, PI};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{signed_pow, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const EPSILON_RANGE: (f64, f64) = (0.1, 1.9);
pub const TAPER_RANGE: (f64, f64) = (-0.9, 0.9);
pub const ALPHA_RANGE: (f64, f64) = (0.01, 2.0);

/// Quaternions must have unit norm within this tolerance.
pub const UNIT_TOLERANCE: f64 = 1e-6;

/// Lower bound on the taper scale factor when inverting the taper. On the
/// surface the factor never drops below `1 - 0.9 = 0.1`.
const TAPER_FACTOR_FLOOR: f64 = 1e-2;

pub type Point = [f64; 3];

/// Size, shape and taper of one superquadric in its canonical frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuperquadricParams {
    pub alpha: [f64; 3],
    pub epsilon: [f64; 2],
    pub taper: [f64; 2],
}

impl SuperquadricParams {
    pub fn new(alpha: [f64; 3], epsilon: [f64; 2], taper: [f64; 2]) -> Result<Self> {
        let p = Self { alpha, epsilon, taper };
        p.validate()?;
        Ok(p)
    }

    /// A sphere-like ellipsoid with no taper.
    pub fn ellipsoid(alpha: [f64; 3]) -> Result<Self> {
        Self::new(alpha, [1.0, 1.0], [0.0, 0.0])
    }

    pub fn validate(&self) -> Result<()> {
        if self.alpha.iter().any(|a| !a.is_finite() || *a <= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "superquadric sizes must be positive and finite, got {:?}",
                self.alpha
            )));
        }
        let (lo, hi) = EPSILON_RANGE;
        if self.epsilon.iter().any(|e| !(lo..=hi).contains(e)) {
            return Err(Error::InvalidParameter(format!(
                "shape exponents must lie in [{lo}, {hi}], got {:?}",
                self.epsilon
            )));
        }
        let (lo, hi) = TAPER_RANGE;
        if self.taper.iter().any(|k| !(lo..=hi).contains(k)) {
            return Err(Error::InvalidParameter(format!(
                "taper must lie in [{lo}, {hi}], got {:?}",
                self.taper
            )));
        }
        Ok(())
    }
}

/// Rigid map `x -> R(q) x + t` from a part's canonical frame to the world frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    q: [f64; 4],
    t: [f64; 3],
}

impl Pose {
    /// Builds a pose, normalizing `q`.
    pub fn new(q: [f64; 4], t: [f64; 3]) -> Result<Self> {
        let n = quat_norm(&q);
        if !n.is_finite() || n < 1e-8 || t.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidParameter(format!("degenerate pose q={q:?} t={t:?}")));
        }
        Ok(Self { q: q.map(|x| x / n), t })
    }

    /// Builds a pose from a quaternion that must already be unit length.
    pub fn from_unit(q: [f64; 4], t: [f64; 3]) -> Result<Self> {
        check_unit(&q)?;
        Ok(Self { q, t })
    }

    pub fn identity() -> Self {
        Self { q: [1.0, 0.0, 0.0, 0.0], t: [0.0; 3] }
    }

    pub fn translation(t: [f64; 3]) -> Self {
        Self { q: [1.0, 0.0, 0.0, 0.0], t }
    }

    pub fn q(&self) -> [f64; 4] {
        self.q
    }

    pub fn t(&self) -> [f64; 3] {
        self.t
    }

    pub fn rotation(&self) -> [[f64; 3]; 3] {
        rotation_unchecked(&self.q)
    }

    pub fn forward(&self, p: &Point) -> Point {
        let r = self.rotation();
        let mut out = self.t;
        for i in 0..3 {
            for j in 0..3 {
                out[i] += r[i][j] * p[j];
            }
        }
        out
    }

    pub fn inverse(&self, p: &Point) -> Point {
        let r = self.rotation();
        let d = [p[0] - self.t[0], p[1] - self.t[1], p[2] - self.t[2]];
        let mut out = [0.0; 3];
        for i in 0..3 {
            for j in 0..3 {
                out[i] += r[j][i] * d[j];
            }
        }
        out
    }
}

/// An ordered, non-empty list of finite 3-D points.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointCloud {
    points: Vec<Point>,
}

impl PointCloud {
    pub fn new(points: Vec<Point>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Empty("point cloud"));
        }
        if points.iter().flatten().any(|x| !x.is_finite()) {
            return Err(Error::InvalidParameter("point cloud has non-finite coordinates".into()));
        }
        Ok(Self { points })
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        if t.cols() != 3 {
            return Err(Error::Shape(format!("point cloud tensor must be Nx3, got {:?}", t.shape())));
        }
        Self::new((0..t.rows()).map(|r| [t.get(r, 0), t.get(r, 1), t.get(r, 2)]).collect())
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_rows(&self.points)
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn into_points(self) -> Vec<Point> {
        self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    /// Always false; kept for API symmetry with `len`.
    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        Self::new(indices.iter().map(|&i| self.points[i]).collect())
    }

    pub fn centroid(&self) -> Point {
        let n = self.points.len() as f64;
        let mut c = [0.0; 3];
        for p in &self.points {
            for k in 0..3 {
                c[k] += p[k];
            }
        }
        c.map(|x| x / n)
    }

    fn map_points(&self, f: impl Fn(&Point) -> Point) -> Self {
        Self { points: self.points.iter().map(f).collect() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplingScheme {
    Grid,
    Random,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Inverse,
}

/// Surface parameters `(eta, omega)` of a set of superquadric samples.
#[derive(Clone, Debug, PartialEq)]
pub struct SurfaceAngles {
    pub eta: Vec<f64>,
    pub omega: Vec<f64>,
}

impl SurfaceAngles {
    pub fn new(count: usize, scheme: SamplingScheme, seed: u64) -> Result<Self> {
        if count == 0 {
            return Err(Error::InvalidParameter("sample count must be positive".into()));
        }
        let (eta, omega) = match scheme {
            SamplingScheme::Grid => {
                // Cells are square when there are twice as many omega steps as eta steps.
                let n_eta = ((count as f64 / 2.0).sqrt().ceil() as usize).max(1);
                let n_omega = count.div_ceil(n_eta);
                let total = n_eta * n_omega;
                (0..count)
                    .map(|k| {
                        let idx = k * total / count;
                        let (i, j) = (idx / n_omega, idx % n_omega);
                        let eta = -FRAC_PI_2 + PI * (i as f64 + 0.5) / n_eta as f64;
                        let omega = -PI + 2.0 * PI * j as f64 / n_omega as f64;
                        (eta, omega)
                    })
                    .unzip()
            }
            SamplingScheme::Random => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                (0..count)
                    .map(|_| (rng.random_range(-FRAC_PI_2..=FRAC_PI_2), rng.random_range(-PI..PI)))
                    .unzip()
            }
        };
        Ok(Self { eta, omega })
    }

    pub fn len(&self) -> usize {
        self.eta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eta.is_empty()
    }

    /// Columns `cos eta, sin eta, cos omega, sin omega`, each `S x 1`.
    fn trig_columns(&self) -> [Tensor; 4] {
        let col = |f: &dyn Fn(usize) -> f64| Tensor::column(&(0..self.len()).map(f).collect::<Vec<_>>());
        [
            col(&|i| self.eta[i].cos()),
            col(&|i| self.eta[i].sin()),
            col(&|i| self.omega[i].cos()),
            col(&|i| self.omega[i].sin()),
        ]
    }
}

/// Untapered surface point `r(eta, omega)` with signed powers.
pub fn surface_point(params: &SuperquadricParams, eta: f64, omega: f64) -> Point {
    let [e1, e2] = params.epsilon;
    let ce = signed_pow(eta.cos(), e1);
    [
        params.alpha[0] * ce * signed_pow(omega.cos(), e2),
        params.alpha[1] * ce * signed_pow(omega.sin(), e2),
        params.alpha[2] * signed_pow(eta.sin(), e1),
    ]
}

/// Canonical-frame surface samples (taper applied).
pub fn sample_superquadric(
    params: &SuperquadricParams,
    count: usize,
    scheme: SamplingScheme,
    seed: u64,
) -> Result<PointCloud> {
    params.validate()?;
    let angles = SurfaceAngles::new(count, scheme, seed)?;
    Ok(sample_at(params, &angles))
}

/// Tapered surface points at the given angles.
pub fn sample_at(params: &SuperquadricParams, angles: &SurfaceAngles) -> PointCloud {
    let points = angles
        .eta
        .iter()
        .zip(&angles.omega)
        .map(|(&eta, &omega)| taper_point(params, &surface_point(params, eta, omega)))
        .collect();
    PointCloud { points }
}

fn taper_point(params: &SuperquadricParams, p: &Point) -> Point {
    let s = p[2] / params.alpha[2];
    [(1.0 + params.taper[0] * s) * p[0], (1.0 + params.taper[1] * s) * p[1], p[2]]
}

/// Linear taper: scales x and y by `1 + k_i * z / alpha_z`.
pub fn apply_taper(params: &SuperquadricParams, pts: &PointCloud) -> PointCloud {
    pts.map_points(|p| taper_point(params, p))
}

pub fn invert_taper(params: &SuperquadricParams, p: &Point) -> Point {
    let s = p[2] / params.alpha[2];
    let fx = (1.0 + params.taper[0] * s).max(TAPER_FACTOR_FLOOR);
    let fy = (1.0 + params.taper[1] * s).max(TAPER_FACTOR_FLOOR);
    [p[0] / fx, p[1] / fy, p[2]]
}

/// Inside-outside function `F` of the untapered superquadric: `< 1` inside,
/// `1` on the surface, `> 1` outside.
pub fn inside_outside(params: &SuperquadricParams, p: &Point) -> f64 {
    let [ax, ay, az] = params.alpha;
    let [e1, e2] = params.epsilon;
    let xy = (p[0] / ax).abs().powf(2.0 / e2) + (p[1] / ay).abs().powf(2.0 / e2);
    xy.powf(e2 / e1) + (p[2] / az).abs().powf(2.0 / e1)
}

/// Smoothed indicator `H = F^eps1` of a posed, tapered primitive at a world point.
pub fn smoothed_indicator(params: &SuperquadricParams, pose: &Pose, p_world: &Point) -> f64 {
    let local = invert_taper(params, &pose.inverse(p_world));
    inside_outside(params, &local).powf(params.epsilon[0])
}

pub fn apply_pose(pose: &Pose, pts: &PointCloud, direction: Direction) -> Result<PointCloud> {
    check_unit(&pose.q)?;
    Ok(match direction {
        Direction::Forward => pts.map_points(|p| pose.forward(p)),
        Direction::Inverse => pts.map_points(|p| pose.inverse(p)),
    })
}

pub fn quaternion_to_rotation(q: [f64; 4]) -> Result<[[f64; 3]; 3]> {
    check_unit(&q)?;
    Ok(rotation_unchecked(&q))
}

fn rotation_unchecked(q: &[f64; 4]) -> [[f64; 3]; 3] {
    let e = crate::autograd::rotation_entries(q);
    [[e[0], e[1], e[2]], [e[3], e[4], e[5]], [e[6], e[7], e[8]]]
}

fn quat_norm(q: &[f64; 4]) -> f64 {
    q.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn check_unit(q: &[f64; 4]) -> Result<()> {
    let n = quat_norm(q);
    if !n.is_finite() || (n - 1.0).abs() > UNIT_TOLERANCE {
        return Err(Error::InvalidParameter(format!("quaternion {q:?} has norm {n}, expected 1")));
    }
    Ok(())
}

/// Differentiable primitive parameters for one shape: `alpha 1x3`, `epsilon 1x2`, `taper 1x2`.
#[derive(Clone, Copy, Debug)]
pub struct PrimitiveVars<'t> {
    pub alpha: Var<'t>,
    pub epsilon: Var<'t>,
    pub taper: Var<'t>,
}

impl<'t> PrimitiveVars<'t> {
    pub fn constant(tape: &'t Tape, p: &SuperquadricParams) -> Self {
        Self {
            alpha: tape.constant(Tensor::row(&p.alpha)),
            epsilon: tape.constant(Tensor::row(&p.epsilon)),
            taper: tape.constant(Tensor::row(&p.taper)),
        }
    }

    pub fn to_params(&self) -> SuperquadricParams {
        let a = self.alpha.value();
        let e = self.epsilon.value();
        let k = self.taper.value();
        SuperquadricParams {
            alpha: [a.data()[0], a.data()[1], a.data()[2]],
            epsilon: [e.data()[0], e.data()[1]],
            taper: [k.data()[0], k.data()[1]],
        }
    }
}

/// Differentiable pose: unit quaternion `1x4` and translation `1x3`.
#[derive(Clone, Copy, Debug)]
pub struct PoseVars<'t> {
    pub q: Var<'t>,
    pub t: Var<'t>,
}

impl<'t> PoseVars<'t> {
    pub fn constant(tape: &'t Tape, pose: &Pose) -> Self {
        Self { q: tape.constant(Tensor::row(&pose.q)), t: tape.constant(Tensor::row(&pose.t)) }
    }

    pub fn to_pose(&self) -> Pose {
        let q = self.q.value();
        let t = self.t.value();
        Pose {
            q: [q.data()[0], q.data()[1], q.data()[2], q.data()[3]],
            t: [t.data()[0], t.data()[1], t.data()[2]],
        }
    }

    /// `N x 3` canonical points to world frame.
    pub fn forward(&self, pts: Var<'t>) -> Var<'t> {
        pts.matmul(self.q.quat_to_rot().transpose()) + self.t
    }

    /// `N x 3` world points to canonical frame.
    pub fn inverse(&self, pts: Var<'t>) -> Var<'t> {
        (pts - self.t).matmul(self.q.quat_to_rot())
    }
}

fn column<'t>(v: Var<'t>, c: usize) -> Var<'t> {
    v.cols_range(c..c + 1)
}

/// Tapered canonical surface samples at fixed angles, `S x 3`.
pub fn surface_points_var<'t>(tape: &'t Tape, prim: &PrimitiveVars<'t>, angles: &SurfaceAngles) -> Var<'t> {
    let [ce, se, co, so] = angles.trig_columns().map(|t| tape.constant(t));
    let e1 = column(prim.epsilon, 0);
    let e2 = column(prim.epsilon, 1);
    let (ax, ay, az) = (column(prim.alpha, 0), column(prim.alpha, 1), column(prim.alpha, 2));
    let ce1 = ce.signed_pow(e1);
    let x = ax * ce1 * co.signed_pow(e2);
    let y = ay * ce1 * so.signed_pow(e2);
    let z = az * se.signed_pow(e1);
    let s = z / az;
    let fx = (column(prim.taper, 0) * s).add_scalar(1.0);
    let fy = (column(prim.taper, 1) * s).add_scalar(1.0);
    Var::concat_cols(&[fx * x, fy * y, z])
}

/// Smoothed indicator `H` of a posed primitive at `N x 3` world points, `N x 1`.
pub fn smoothed_indicator_var<'t>(prim: &PrimitiveVars<'t>, pose: &PoseVars<'t>, world: Var<'t>) -> Var<'t> {
    let local = pose.inverse(world);
    let (x, y, z) = (column(local, 0), column(local, 1), column(local, 2));
    let (ax, ay, az) = (column(prim.alpha, 0), column(prim.alpha, 1), column(prim.alpha, 2));
    let e1 = column(prim.epsilon, 0);
    let e2 = column(prim.epsilon, 1);
    let s = z / az;
    let fx = (column(prim.taper, 0) * s).add_scalar(1.0).clamp_min(TAPER_FACTOR_FLOOR);
    let fy = (column(prim.taper, 1) * s).add_scalar(1.0).clamp_min(TAPER_FACTOR_FLOOR);
    let two = prim.epsilon.tape().scalar(2.0);
    let p2 = two / e2;
    let p1 = two / e1;
    let xy = (x / fx / ax).abs().pow(p2) + (y / fy / ay).abs().pow(p2);
    let f = xy.pow(e2 / e1) + (z / az).abs().pow(p1);
    f.pow(e1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::gradcheck::max_rel_error;
    use proptest::prelude::*;

    fn sphere() -> SuperquadricParams {
        SuperquadricParams::ellipsoid([1.0, 1.0, 1.0]).unwrap()
    }

    #[test]
    fn unit_sphere_samples_have_unit_norm() {
        for scheme in [SamplingScheme::Grid, SamplingScheme::Random] {
            let pc = sample_superquadric(&sphere(), 500, scheme, 3).unwrap();
            assert_eq!(pc.len(), 500);
            for p in pc.points() {
                let n = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
                assert!((n - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn axis_point() {
        let p = SuperquadricParams::ellipsoid([2.0, 1.0, 1.0]).unwrap();
        let r = surface_point(&p, 0.0, 0.0);
        assert_eq!(r, [2.0, 0.0, 0.0]);
    }

    #[test]
    fn near_cube_limit_matches_dense_oracle() {
        let p = SuperquadricParams::new([1.0; 3], [0.1, 0.1], [0.0; 2]).unwrap();
        let pc = sample_superquadric(&p, 4096, SamplingScheme::Grid, 0).unwrap();
        let max = pc.points().iter().flatten().fold(0.0f64, |m, x| m.max(x.abs()));
        // Oracle: dense evaluation of the parametric form on a 400x800 lattice.
        let mut oracle: f64 = 0.0;
        for i in 0..400 {
            for j in 0..800 {
                let eta = -FRAC_PI_2 + PI * (i as f64 + 0.5) / 400.0;
                let omega = -PI + 2.0 * PI * j as f64 / 800.0;
                let r = surface_point(&p, eta, omega);
                oracle = oracle.max(r.iter().fold(0.0f64, |m, x| m.max(x.abs())));
            }
        }
        assert!((0.98..=1.0).contains(&oracle), "oracle {oracle}");
        assert!((0.98..=1.0).contains(&max), "sampled {max}");
    }

    #[test]
    fn grid_covers_both_hemispheres() {
        let a = SurfaceAngles::new(100, SamplingScheme::Grid, 0).unwrap();
        assert!(a.eta.iter().any(|&e| e < -1.0) && a.eta.iter().any(|&e| e > 1.0));
        assert!(a.omega.iter().all(|&w| (-PI..PI).contains(&w)));
    }

    #[test]
    fn sampling_rejects_bad_input() {
        assert!(sample_superquadric(&sphere(), 0, SamplingScheme::Grid, 0).is_err());
        let bad = SuperquadricParams { alpha: [1.0, -1.0, 1.0], epsilon: [1.0; 2], taper: [0.0; 2] };
        assert!(sample_superquadric(&bad, 4, SamplingScheme::Grid, 0).is_err());
        assert!(SuperquadricParams::new([1.0; 3], [2.5, 1.0], [0.0; 2]).is_err());
        assert!(SuperquadricParams::new([1.0; 3], [1.0, 1.0], [0.95, 0.0]).is_err());
    }

    #[test]
    fn taper_examples() {
        let pts = PointCloud::new(vec![[1.0, 1.0, 1.0], [1.0, 1.0, -1.0]]).unwrap();
        let none = SuperquadricParams::new([1.0; 3], [1.0; 2], [0.0, 0.0]).unwrap();
        assert_eq!(apply_taper(&none, &pts), pts);
        let k1 = SuperquadricParams::new([1.0; 3], [1.0; 2], [0.5, 0.0]).unwrap();
        assert_eq!(apply_taper(&k1, &pts).points()[0], [1.5, 1.0, 1.0]);
        let k2 = SuperquadricParams::new([1.0; 3], [1.0; 2], [0.5, 0.5]).unwrap();
        assert_eq!(apply_taper(&k2, &pts).points()[1], [0.5, 0.5, -1.0]);
    }

    #[test]
    fn inside_outside_examples() {
        assert_eq!(inside_outside(&sphere(), &[1.0, 0.0, 0.0]), 1.0);
        assert_eq!(inside_outside(&sphere(), &[0.0, 0.0, 0.0]), 0.0);
        assert!((inside_outside(&sphere(), &[1.0, 1.0, 1.0]) - 3.0).abs() < 1e-12);
    }

    #[test]
    fn smoothed_indicator_examples() {
        let id = Pose::identity();
        assert_eq!(smoothed_indicator(&sphere(), &id, &[0.0; 3]), 0.0);
        assert!((smoothed_indicator(&sphere(), &id, &[2.0, 0.0, 0.0]) - 4.0).abs() < 1e-12);
        let p = SuperquadricParams::new([0.5, 0.8, 0.3], [0.4, 1.6], [0.3, -0.6]).unwrap();
        let pose = Pose::new([0.8, 0.1, -0.4, 0.3], [0.2, -0.1, 0.5]).unwrap();
        let local = sample_superquadric(&p, 200, SamplingScheme::Random, 9).unwrap();
        let world = apply_pose(&pose, &local, Direction::Forward).unwrap();
        for w in world.points() {
            assert!((smoothed_indicator(&p, &pose, w) - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn pose_examples() {
        let pts = PointCloud::new(vec![[1.0, 0.0, 0.0]]).unwrap();
        let id = apply_pose(&Pose::identity(), &pts, Direction::Forward).unwrap();
        assert_eq!(id, pts);
        let half = std::f64::consts::FRAC_PI_4;
        let rz = Pose::from_unit([half.cos(), 0.0, 0.0, half.sin()], [0.0; 3]).unwrap();
        let out = apply_pose(&rz, &pts, Direction::Forward).unwrap().points()[0];
        assert!((out[0]).abs() < 1e-9 && (out[1] - 1.0).abs() < 1e-9 && out[2].abs() < 1e-9);
        let shift = Pose::translation([1.0, 2.0, 3.0]);
        let origin = PointCloud::new(vec![[0.0; 3]]).unwrap();
        let fwd = apply_pose(&shift, &origin, Direction::Forward).unwrap();
        assert_eq!(apply_pose(&shift, &fwd, Direction::Inverse).unwrap(), origin);
    }

    #[test]
    fn rotation_examples() {
        assert_eq!(
            quaternion_to_rotation([1.0, 0.0, 0.0, 0.0]).unwrap(),
            [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]
        );
        assert_eq!(
            quaternion_to_rotation([0.0, 1.0, 0.0, 0.0]).unwrap(),
            [[1.0, 0.0, 0.0], [0.0, -1.0, 0.0], [0.0, 0.0, -1.0]]
        );
        assert!(quaternion_to_rotation([0.0; 4]).is_err());
        assert!(quaternion_to_rotation([1.0, 0.1, 0.0, 0.0]).is_err());
        assert!(Pose::new([0.0; 4], [0.0; 3]).is_err());
    }

    fn det(r: &[[f64; 3]; 3]) -> f64 {
        r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1]) - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
            + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0])
    }

    fn params_strategy() -> impl Strategy<Value = SuperquadricParams> {
        (
            prop::array::uniform3(0.05f64..2.0),
            prop::array::uniform2(0.1f64..=1.9),
            prop::array::uniform2(-0.9f64..=0.9),
        )
            .prop_map(|(alpha, epsilon, taper)| SuperquadricParams { alpha, epsilon, taper })
    }

    fn pose_strategy() -> impl Strategy<Value = Pose> {
        (prop::array::uniform4(-1.0f64..1.0), prop::array::uniform3(-3.0f64..3.0))
            .prop_filter("non-degenerate", |(q, _)| quat_norm(q) > 0.1)
            .prop_map(|(q, t)| Pose::new(q, t).unwrap())
    }

    proptest! {
        #[test]
        fn untapered_samples_lie_on_the_surface(p in params_strategy(), seed in 0u64..1000) {
            let p = SuperquadricParams { taper: [0.0; 2], ..p };
            let pc = sample_superquadric(&p, 64, SamplingScheme::Random, seed).unwrap();
            for x in pc.points() {
                prop_assert!((inside_outside(&p, x) - 1.0).abs() < 1e-6);
            }
        }

        #[test]
        fn rotations_are_orthonormal(pose in pose_strategy()) {
            let r = pose.rotation();
            for i in 0..3 {
                for j in 0..3 {
                    let dot: f64 = (0..3).map(|k| r[k][i] * r[k][j]).sum();
                    let expect = if i == j { 1.0 } else { 0.0 };
                    prop_assert!((dot - expect).abs() < 1e-9);
                }
            }
            prop_assert!((det(&r) - 1.0).abs() < 1e-9);
        }

        #[test]
        fn pose_preserves_distances_and_round_trips(
            pose in pose_strategy(),
            pts in prop::collection::vec(prop::array::uniform3(-5.0f64..5.0), 2..20),
        ) {
            let pc = PointCloud::new(pts).unwrap();
            let fwd = apply_pose(&pose, &pc, Direction::Forward).unwrap();
            let back = apply_pose(&pose, &fwd, Direction::Inverse).unwrap();
            let d = |a: &Point, b: &Point| ((a[0]-b[0]).powi(2) + (a[1]-b[1]).powi(2) + (a[2]-b[2]).powi(2)).sqrt();
            for i in 0..pc.len() {
                for k in 0..3 {
                    prop_assert!((back.points()[i][k] - pc.points()[i][k]).abs() < 1e-9);
                }
                for j in 0..pc.len() {
                    let before = d(&pc.points()[i], &pc.points()[j]);
                    let after = d(&fwd.points()[i], &fwd.points()[j]);
                    prop_assert!((before - after).abs() < 1e-9);
                }
            }
        }

        #[test]
        fn indicator_grows_along_rays(
            p in params_strategy(),
            dir in prop::array::uniform3(-1.0f64..1.0),
            lambda in 0.05f64..3.0,
        ) {
            prop_assume!(dir.iter().map(|x| x * x).sum::<f64>() > 1e-3);
            let p = SuperquadricParams { taper: [0.0; 2], ..p };
            let id = Pose::identity();
            let h1 = smoothed_indicator(&p, &id, &dir.map(|x| x * lambda));
            let h2 = smoothed_indicator(&p, &id, &dir.map(|x| x * lambda * 1.01));
            prop_assert!(h2 > h1);
        }

        #[test]
        fn sampling_is_deterministic(p in params_strategy(), seed in 0u64..100) {
            for scheme in [SamplingScheme::Grid, SamplingScheme::Random] {
                let a = sample_superquadric(&p, 37, scheme, seed).unwrap();
                let b = sample_superquadric(&p, 37, scheme, seed).unwrap();
                prop_assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn tape_versions_match_plain_versions() {
        let p = SuperquadricParams::new([0.5, 0.8, 0.3], [0.4, 1.6], [0.3, -0.6]).unwrap();
        let pose = Pose::new([0.8, 0.1, -0.4, 0.3], [0.2, -0.1, 0.5]).unwrap();
        let angles = SurfaceAngles::new(50, SamplingScheme::Random, 4).unwrap();
        let tape = Tape::new();
        let prim = PrimitiveVars::constant(&tape, &p);
        let pv = PoseVars::constant(&tape, &pose);
        let local = surface_points_var(&tape, &prim, &angles);
        let plain = sample_at(&p, &angles).to_tensor();
        assert!(local.value().max_abs_diff(&plain) < 1e-12);
        let world = pv.forward(local);
        let plain_world = apply_pose(&pose, &sample_at(&p, &angles), Direction::Forward).unwrap();
        assert!(world.value().max_abs_diff(&plain_world.to_tensor()) < 1e-12);
        let query = tape.constant(Tensor::from_rows(&[[0.1, 0.2, 0.3], [1.0, -1.0, 0.5]]));
        let h = smoothed_indicator_var(&prim, &pv, query);
        for (i, q) in [[0.1, 0.2, 0.3], [1.0, -1.0, 0.5]].iter().enumerate() {
            let expect = smoothed_indicator(&p, &pose, q);
            assert!((h.value().data()[i] - expect).abs() < 1e-9 * expect.max(1.0));
        }
    }

    #[test]
    fn tape_geometry_gradients() {
        let angles = SurfaceAngles::new(12, SamplingScheme::Random, 2).unwrap();
        let inputs = [
            Tensor::row(&[0.5, 0.8, 0.3]),
            Tensor::row(&[0.4, 1.6]),
            Tensor::row(&[0.3, -0.6]),
            Tensor::row(&[0.8, 0.1, -0.4, 0.3]),
            Tensor::row(&[0.2, -0.1, 0.5]),
            Tensor::from_rows(&[[0.1, 0.2, 0.3], [0.4, -0.3, 0.2], [0.0, 0.1, -0.2]]),
        ];
        let err = max_rel_error(&inputs, 1e-6, 1e-6, |_, v| {
            let prim = PrimitiveVars { alpha: v[0], epsilon: v[1], taper: v[2] };
            let q = v[3].normalize_rows(1e-8, vec![1.0, 0.0, 0.0, 0.0]);
            let pose = PoseVars { q, t: v[4] };
            let s = pose.forward(surface_points_var(v[0].tape(), &prim, &angles));
            s.square().mean() + smoothed_indicator_var(&prim, &pose, v[5]).sum()
        });
        assert!(err < 1e-5, "{err}");
    }
}
