//! Reconstruction, primitive and overlap losses.
//!
//! Every term exists twice: a plain `f64` version on decoded shapes and a tape
//! version used for training. The two are kept independent so each can check
//! the other.

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::geometry::{self, PointCloud, Point, Pose, PoseVars, PrimitiveVars, SamplingScheme, SuperquadricParams, SurfaceAngles};
use crate::latent::{self, PosteriorParams};
use crate::networks::{self, Bound, DecodedShape, ModelParams};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub w_point: f64,
    pub w_prim: f64,
    pub omega_o: f64,
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { w_point: 1.0, w_prim: 1.0, omega_o: 1e-6, beta: 1e-3 }
    }
}

impl LossWeights {
    pub fn zero() -> Self {
        Self { w_point: 0.0, w_prim: 0.0, omega_o: 0.0, beta: 0.0 }
    }

    /// Default weights with the overlap weight tuned for a shape category and part count.
    pub fn for_category(category: &str, parts: usize) -> Self {
        let omega_o = match (category.trim_start_matches("toy"), parts) {
            ("chair", 3) => 1e-6,
            ("table", _) => 1e-10,
            _ => 1e-5,
        };
        Self { omega_o, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.w_point, self.w_prim, self.omega_o, self.beta];
        if all.iter().all(|w| w.is_finite() && *w >= 0.0) {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!("loss weights must be finite and non-negative: {self:?}")))
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_point: f64,
    pub l_prim: f64,
    pub l_overlap: f64,
    pub l_kl: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(l_point: f64, l_prim: f64, l_overlap: f64, l_kl: f64, w: &LossWeights) -> Self {
        let total = w.w_point * l_point + w.w_prim * l_prim + w.omega_o * l_overlap + w.beta * l_kl;
        Self { l_point, l_prim, l_overlap, l_kl, total }
    }

    /// Element-wise mean of several breakdowns.
    pub fn mean(items: &[LossBreakdown]) -> LossBreakdown {
        let n = items.len().max(1) as f64;
        let mut out = LossBreakdown::default();
        for b in items {
            out.l_point += b.l_point / n;
            out.l_prim += b.l_prim / n;
            out.l_overlap += b.l_overlap / n;
            out.l_kl += b.l_kl / n;
            out.total += b.total / n;
        }
        out
    }

    /// First non-finite term, if any.
    pub fn non_finite_term(&self) -> Option<&'static str> {
        [
            ("l_point", self.l_point),
            ("l_prim", self.l_prim),
            ("l_overlap", self.l_overlap),
            ("l_kl", self.l_kl),
            ("total", self.total),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(name, _)| name)
    }
}

fn sqdist(a: &Point, b: &Point) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
}

fn nearest_sqdist(p: &Point, set: &[Point]) -> f64 {
    set.iter().map(|q| sqdist(p, q)).fold(f64::INFINITY, f64::min)
}

fn mean_nearest(from: &[Point], to: &[Point]) -> f64 {
    from.iter().map(|p| nearest_sqdist(p, to)).sum::<f64>() / from.len() as f64
}

/// Symmetric Chamfer distance: half the mean nearest squared distance in each direction.
pub fn chamfer(x: &PointCloud, y: &PointCloud) -> f64 {
    0.5 * mean_nearest(x.points(), y.points()) + 0.5 * mean_nearest(y.points(), x.points())
}

/// Index of the part whose surface samples contain the nearest sample to each point.
///
/// `surfaces[m]` holds part `m`'s posed surface samples. Ties go to the lowest index.
pub fn assign_points_to_parts(x: &PointCloud, surfaces: &[PointCloud]) -> Vec<usize> {
    let sets: Vec<&[Point]> = surfaces.iter().map(PointCloud::points).collect();
    assign_to_sets(x.points(), &sets)
}

fn assign_to_sets(x: &[Point], sets: &[&[Point]]) -> Vec<usize> {
    x.iter()
        .map(|p| {
            let mut best = (f64::INFINITY, 0);
            for (m, s) in sets.iter().enumerate() {
                let d = nearest_sqdist(p, s);
                if d < best.0 {
                    best = (d, m);
                }
            }
            best.1
        })
        .collect()
}

fn partition(x: &PointCloud, assignment: &[usize], parts: usize) -> Vec<Vec<Point>> {
    let mut out = vec![Vec::new(); parts];
    for (p, &m) in x.points().iter().zip(assignment) {
        out[m].push(*p);
    }
    out
}

fn surfaces(decoded: &DecodedShape) -> Vec<PointCloud> {
    decoded.parts.iter().map(|p| p.surface.clone()).collect()
}

/// Sum over parts of the Chamfer distance between the part's assigned input
/// points (mapped to its canonical frame) and its decoded canonical points.
pub fn parts_point_loss(decoded: &DecodedShape, x: &PointCloud) -> f64 {
    let m = decoded.parts.len();
    let groups = partition(x, &assign_points_to_parts(x, &surfaces(decoded)), m);
    decoded
        .parts
        .iter()
        .zip(&groups)
        .filter(|(_, g)| !g.is_empty())
        .map(|(part, g)| {
            let local: Vec<Point> = g.iter().map(|p| part.pose.inverse(p)).collect();
            let canon = part.canonical.points();
            0.5 * mean_nearest(&local, canon) + 0.5 * mean_nearest(canon, &local)
        })
        .sum()
}

/// Chamfer-style distance between posed primitive samples and the input.
pub fn primitive_distance_loss(decoded: &DecodedShape, x: &PointCloud) -> f64 {
    let m = decoded.parts.len();
    let groups = partition(x, &assign_points_to_parts(x, &surfaces(decoded)), m);
    let p2x: f64 = decoded
        .parts
        .iter()
        .zip(&groups)
        .map(|(part, g)| {
            let target = if g.is_empty() { x.points() } else { g.as_slice() };
            mean_nearest(part.surface.points(), target)
        })
        .sum::<f64>()
        / m as f64;
    let all: Vec<Point> = decoded.parts.iter().flat_map(|p| p.surface.points().iter().copied()).collect();
    p2x + mean_nearest(x.points(), &all)
}

/// Mean penetration `max(1 - H_m(s), 0)` of other parts' samples into each primitive.
pub fn overlap_loss(parts: &[(SuperquadricParams, Pose)], samples: &[PointCloud]) -> f64 {
    let m = parts.len();
    if m < 2 {
        return 0.0;
    }
    let mut acc = 0.0;
    for (i, (prim, pose)) in parts.iter().enumerate() {
        let mut sum = 0.0;
        let mut count = 0usize;
        for (j, s) in samples.iter().enumerate() {
            if j == i {
                continue;
            }
            for p in s.points() {
                sum += (1.0 - geometry::smoothed_indicator(prim, pose, p)).max(0.0);
                count += 1;
            }
        }
        if count > 0 {
            acc += sum / count as f64;
        }
    }
    acc / m as f64
}

/// Per-part graph inputs of one shape for the tape losses.
#[derive(Clone, Copy, Debug)]
pub struct PartGraph<'t> {
    /// Decoded points in the part's canonical frame, `P x 3`.
    pub canonical: Var<'t>,
    pub pose: PoseVars<'t>,
    pub primitive: PrimitiveVars<'t>,
    /// Posed surface samples, `S x 3`.
    pub surface: Var<'t>,
}

impl<'t> PartGraph<'t> {
    /// Builds the graph for one part, sampling the primitive at `angles`.
    pub fn new(
        tape: &'t Tape,
        canonical: Var<'t>,
        pose: PoseVars<'t>,
        primitive: PrimitiveVars<'t>,
        angles: &SurfaceAngles,
    ) -> Self {
        let surface = pose.forward(geometry::surface_points_var(tape, &primitive, angles));
        Self { canonical, pose, primitive, surface }
    }
}

/// Tape Chamfer distance between two `N x 3` point sets.
pub fn chamfer_var<'t>(x: Var<'t>, y: Var<'t>) -> Var<'t> {
    (x.nn_sqdist(y).mean() + y.nn_sqdist(x).mean()).scale(0.5)
}

/// Hard assignment from the current surface sample values (not differentiated).
pub fn assignment_of(parts: &[PartGraph<'_>], x: &PointCloud) -> Vec<usize> {
    let surfaces: Vec<Vec<Point>> = parts
        .iter()
        .map(|p| {
            let v = p.surface.value();
            (0..v.rows()).map(|r| [v.get(r, 0), v.get(r, 1), v.get(r, 2)]).collect()
        })
        .collect();
    let sets: Vec<&[Point]> = surfaces.iter().map(Vec::as_slice).collect();
    assign_to_sets(x.points(), &sets)
}

fn groups_as_tensors(x: &PointCloud, assignment: &[usize], parts: usize) -> Vec<Option<Tensor>> {
    partition(x, assignment, parts)
        .into_iter()
        .map(|g| (!g.is_empty()).then(|| Tensor::from(g)))
        .collect()
}

pub fn parts_point_loss_var<'t>(parts: &[PartGraph<'t>], x: &PointCloud, assignment: &[usize]) -> Var<'t> {
    let tape = parts[0].canonical.tape();
    let mut acc = tape.scalar(0.0);
    for (part, g) in parts.iter().zip(groups_as_tensors(x, assignment, parts.len())) {
        if let Some(g) = g {
            let local = part.pose.inverse(tape.constant(g));
            acc = acc + chamfer_var(local, part.canonical);
        }
    }
    acc
}

pub fn primitive_distance_loss_var<'t>(parts: &[PartGraph<'t>], x: &PointCloud, assignment: &[usize]) -> Var<'t> {
    let tape = parts[0].canonical.tape();
    let all_x = tape.constant(x.to_tensor());
    let mut p2x = tape.scalar(0.0);
    for (part, g) in parts.iter().zip(groups_as_tensors(x, assignment, parts.len())) {
        let target = g.map_or(all_x, |g| tape.constant(g));
        p2x = p2x + part.surface.nn_sqdist(target).mean();
    }
    let surfaces: Vec<Var<'t>> = parts.iter().map(|p| p.surface).collect();
    let x2p = all_x.nn_sqdist(Var::concat_rows(&surfaces)).mean();
    p2x.scale(1.0 / parts.len() as f64) + x2p
}

pub fn overlap_loss_var<'t>(parts: &[PartGraph<'t>]) -> Var<'t> {
    let tape = parts[0].canonical.tape();
    let m = parts.len();
    if m < 2 {
        return tape.scalar(0.0);
    }
    let mut acc = tape.scalar(0.0);
    for (i, part) in parts.iter().enumerate() {
        let others: Vec<Var<'t>> = parts.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, p)| p.surface).collect();
        let h = geometry::smoothed_indicator_var(&part.primitive, &part.pose, Var::concat_rows(&others));
        acc = acc + h.scale(-1.0).add_scalar(1.0).relu().mean();
    }
    acc.scale(1.0 / m as f64)
}

/// Loss terms of a batch as tape variables; each term is averaged over the batch.
#[derive(Clone, Copy, Debug)]
pub struct LossVars<'t> {
    pub l_point: Var<'t>,
    pub l_prim: Var<'t>,
    pub l_overlap: Var<'t>,
    pub l_kl: Var<'t>,
    pub total: Var<'t>,
}

impl LossVars<'_> {
    pub fn breakdown(&self, w: &LossWeights) -> LossBreakdown {
        LossBreakdown::new(self.l_point.item(), self.l_prim.item(), self.l_overlap.item(), self.l_kl.item(), w)
    }
}

/// Surface sample angles of part `part` for the loss evaluation seeded by `seed`.
pub fn loss_angles(count: usize, seed: u64, part: usize) -> SurfaceAngles {
    let s = seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(part as u64);
    SurfaceAngles::new(count, SamplingScheme::Random, s).expect("count is positive")
}

/// Reparameterization noise for a batch, `B x D_z`.
pub fn loss_noise(rows: usize, dim: usize, seed: u64) -> Tensor {
    latent::standard_normal_tensor(rows, dim, seed ^ 0x005e_ed0f_5eed)
}

/// Full differentiable objective for a batch of clouds given posterior parameters.
///
/// `mu` and `logvar` are `B x D_z`, one row per cloud.
#[allow(clippy::too_many_arguments)]
pub fn batch_loss_var<'t>(
    model: &ModelParams,
    p: &Bound<'t>,
    clouds: &[PointCloud],
    mu: Var<'t>,
    logvar: Var<'t>,
    weights: &LossWeights,
    seed: u64,
) -> LossVars<'t> {
    let tape = p.tape();
    let cfg = model.config();
    let b = clouds.len();
    let noise = tape.constant(loss_noise(b, cfg.latent_dim, seed));
    let z = latent::reparameterize_var(mu, logvar, noise);
    let zl = networks::split_batch(model, p, z);
    let outputs = networks::decode_parts(model, p, zl);
    let angles: Vec<SurfaceAngles> = (0..cfg.parts).map(|m| loss_angles(cfg.surface_samples, seed, m)).collect();
    let per_part = cfg.points_per_part();

    let mut l_point = tape.scalar(0.0);
    let mut l_prim = tape.scalar(0.0);
    let mut l_overlap = tape.scalar(0.0);
    for (i, x) in clouds.iter().enumerate() {
        let parts: Vec<PartGraph<'t>> = outputs
            .iter()
            .zip(&angles)
            .map(|(o, a)| PartGraph::new(tape, o.canonical_points(i, per_part), o.pose(i), o.primitive(i), a))
            .collect();
        let assignment = assignment_of(&parts, x);
        l_point = l_point + parts_point_loss_var(&parts, x, &assignment);
        l_prim = l_prim + primitive_distance_loss_var(&parts, x, &assignment);
        if weights.omega_o > 0.0 {
            l_overlap = l_overlap + overlap_loss_var(&parts);
        }
    }
    let inv_b = 1.0 / b as f64;
    let (l_point, l_prim, l_overlap) = (l_point.scale(inv_b), l_prim.scale(inv_b), l_overlap.scale(inv_b));
    let l_kl = latent::kl_divergence_var(mu, logvar);
    let total = l_point.scale(weights.w_point)
        + l_prim.scale(weights.w_prim)
        + l_overlap.scale(weights.omega_o)
        + l_kl.scale(weights.beta);
    LossVars { l_point, l_prim, l_overlap, l_kl, total }
}

/// Loss of a single cloud under given posterior parameters.
///
/// The surface samples and reparameterization noise are drawn from `seed`.
pub fn total_loss(
    model: &ModelParams,
    x: &PointCloud,
    post: &PosteriorParams,
    weights: &LossWeights,
    seed: u64,
) -> Result<LossBreakdown> {
    weights.validate()?;
    if post.dim() != model.config().latent_dim {
        return Err(Error::Shape(format!("posterior has {} dims, model {}", post.dim(), model.config().latent_dim)));
    }
    let tape = Tape::new();
    let p = model.bind(&tape, false);
    let mu = tape.constant(Tensor::row(post.mu()));
    let logvar = tape.constant(Tensor::row(post.logvar()));
    let vars = batch_loss_var(model, &p, std::slice::from_ref(x), mu, logvar, weights, seed);
    let out = vars.breakdown(weights);
    if let Some(term) = out.non_finite_term() {
        return Err(Error::NonFinite { term, step: 0 });
    }
    Ok(out)
}
