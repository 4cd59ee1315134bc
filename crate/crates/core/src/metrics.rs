//! Set-level generative metrics and the part-level MCD score.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Point, PointCloud};
use crate::losses::chamfer;

/// Voxels per axis of the JSD occupancy grid over `[-1, 1]^3`.
pub const JSD_RESOLUTION: usize = 28;
/// Largest cloud size solved by exact assignment in [`emd`].
pub const EMD_EXACT_MAX: usize = 512;
pub const SINKHORN_REG: f64 = 1e-2;
pub const SINKHORN_ITERS: usize = 500;
const JSD_SMOOTHING: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Distance {
    Cd,
    Emd,
}

fn non_empty<T>(set: &[T], what: &'static str) -> Result<()> {
    if set.is_empty() {
        Err(Error::Empty(what))
    } else {
        Ok(())
    }
}

/// Occupancy histogram of pooled points, normalized to a distribution.
///
/// Points outside the cube fall into the nearest boundary voxel.
pub fn voxel_histogram(clouds: &[PointCloud], resolution: usize) -> Vec<f64> {
    let mut hist = vec![0.0; resolution.pow(3)];
    let cell = |v: f64| (((v + 1.0) / 2.0 * resolution as f64).floor().max(0.0) as usize).min(resolution - 1);
    let mut total = 0usize;
    for p in clouds.iter().flat_map(PointCloud::points) {
        hist[(cell(p[0]) * resolution + cell(p[1])) * resolution + cell(p[2])] += 1.0;
        total += 1;
    }
    hist.iter_mut().for_each(|h| *h /= total as f64);
    hist
}

/// Jensen-Shannon divergence in nats between two discrete distributions.
pub fn jsd_histograms(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() || p.is_empty() {
        return Err(Error::Shape("histograms must be non-empty and of equal length".into()));
    }
    let kl = |a: f64, m: f64| if a > 0.0 { a * ((a + JSD_SMOOTHING) / (m + JSD_SMOOTHING)).ln() } else { 0.0 };
    let js: f64 = p
        .iter()
        .zip(q)
        .map(|(&a, &b)| {
            let m = 0.5 * (a + b);
            0.5 * kl(a, m) + 0.5 * kl(b, m)
        })
        .sum();
    Ok(js.clamp(0.0, std::f64::consts::LN_2))
}

/// JSD between the pooled voxel occupancy of two sets of unit-normalized clouds.
pub fn jsd(gen: &[PointCloud], reference: &[PointCloud], resolution: usize) -> Result<f64> {
    non_empty(gen, "generated set")?;
    non_empty(reference, "reference set")?;
    if resolution == 0 {
        return Err(Error::InvalidParameter("resolution must be positive".into()));
    }
    jsd_histograms(&voxel_histogram(gen, resolution), &voxel_histogram(reference, resolution))
}

/// An EMD value and whether it came from the entropic approximation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmdValue {
    pub value: f64,
    pub approximate: bool,
}

fn dist(a: &Point, b: &Point) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

fn cost_matrix(x: &PointCloud, y: &PointCloud) -> Vec<f64> {
    x.points().iter().flat_map(|a| y.points().iter().map(move |b| dist(a, b))).collect()
}

fn same_size(x: &PointCloud, y: &PointCloud) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::Shape(format!("EMD needs equal cardinalities, got {} and {}", x.len(), y.len())));
    }
    Ok(())
}

/// Minimum-cost perfect matching of an `n x n` cost matrix (row to column).
pub fn min_cost_assignment(cost: &[f64], n: usize) -> Vec<usize> {
    assert_eq!(cost.len(), n * n);
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[(i0 - 1) * n + j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![0; n];
    for j in 1..=n {
        out[p[j] - 1] = j - 1;
    }
    out
}

/// Exact EMD: mean Euclidean distance under the optimal bijection.
pub fn emd_exact(x: &PointCloud, y: &PointCloud) -> Result<f64> {
    same_size(x, y)?;
    let n = x.len();
    let cost = cost_matrix(x, y);
    let assignment = min_cost_assignment(&cost, n);
    Ok(assignment.iter().enumerate().map(|(i, &j)| cost[i * n + j]).sum::<f64>() / n as f64)
}

fn logsumexp(vals: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = vals.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + vals.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Entropic EMD by log-domain Sinkhorn iterations with uniform marginals.
pub fn emd_sinkhorn(x: &PointCloud, y: &PointCloud, reg: f64, iters: usize) -> Result<f64> {
    same_size(x, y)?;
    if !(reg > 0.0) {
        return Err(Error::InvalidParameter("regularization must be positive".into()));
    }
    let n = x.len();
    let cost = cost_matrix(x, y);
    let log_w = -(n as f64).ln();
    let mut f = vec![0.0; n];
    let mut g = vec![0.0; n];
    for _ in 0..iters {
        f.par_iter_mut().enumerate().for_each(|(i, fi)| {
            let row = &cost[i * n..(i + 1) * n];
            *fi = reg * log_w - reg * logsumexp(row.iter().zip(&g).map(|(c, gj)| (gj - c) / reg));
        });
        g.par_iter_mut().enumerate().for_each(|(j, gj)| {
            *gj = reg * log_w - reg * logsumexp((0..n).map(|i| (f[i] - cost[i * n + j]) / reg));
        });
    }
    let total: f64 = (0..n)
        .into_par_iter()
        .map(|i| (0..n).map(|j| ((f[i] + g[j] - cost[i * n + j]) / reg).exp() * cost[i * n + j]).sum::<f64>())
        .sum();
    Ok(total)
}

/// EMD, exact up to [`EMD_EXACT_MAX`] points and entropic above.
pub fn emd(x: &PointCloud, y: &PointCloud) -> Result<EmdValue> {
    same_size(x, y)?;
    if x.len() <= EMD_EXACT_MAX {
        Ok(EmdValue { value: emd_exact(x, y)?, approximate: false })
    } else {
        Ok(EmdValue { value: emd_sinkhorn(x, y, SINKHORN_REG, SINKHORN_ITERS)?, approximate: true })
    }
}

fn distance(a: &PointCloud, b: &PointCloud, d: Distance) -> Result<f64> {
    match d {
        Distance::Cd => Ok(chamfer(a, b)),
        Distance::Emd => Ok(emd(a, b)?.value),
    }
}

/// `rows x cols` distances between every pair, computed in parallel.
pub fn pairwise(rows: &[PointCloud], cols: &[PointCloud], d: Distance) -> Result<Vec<Vec<f64>>> {
    rows.par_iter().map(|r| cols.iter().map(|c| distance(r, c, d)).collect()).collect()
}

fn mmd_from(matrix: &[Vec<f64>]) -> f64 {
    matrix.iter().map(|row| row.iter().copied().fold(f64::INFINITY, f64::min)).sum::<f64>() / matrix.len() as f64
}

fn coverage_from(gen_to_ref: &[Vec<f64>], n_ref: usize) -> f64 {
    let mut hit = vec![false; n_ref];
    for row in gen_to_ref {
        let best = row
            .iter()
            .enumerate()
            .fold((0, f64::INFINITY), |acc, (j, &d)| if d < acc.1 { (j, d) } else { acc });
        hit[best.0] = true;
    }
    100.0 * hit.iter().filter(|&&h| h).count() as f64 / n_ref as f64
}

/// Minimum matching distance: mean over references of the nearest generated cloud.
pub fn mmd(gen: &[PointCloud], reference: &[PointCloud], d: Distance) -> Result<f64> {
    non_empty(gen, "generated set")?;
    non_empty(reference, "reference set")?;
    Ok(mmd_from(&pairwise(reference, gen, d)?))
}

/// Percentage of references that are the nearest reference of some generated cloud.
pub fn coverage(gen: &[PointCloud], reference: &[PointCloud], d: Distance) -> Result<f64> {
    non_empty(gen, "generated set")?;
    non_empty(reference, "reference set")?;
    Ok(coverage_from(&pairwise(gen, reference, d)?, reference.len()))
}

/// Mean over discovered parts of the Chamfer distance to the closest ground-truth part.
pub fn mcd(parts: &[PointCloud], gt_parts: &[PointCloud]) -> Result<f64> {
    non_empty(parts, "part list")?;
    non_empty(gt_parts, "ground-truth part list")?;
    Ok(parts
        .iter()
        .map(|p| gt_parts.iter().map(|g| chamfer(p, g)).fold(f64::INFINITY, f64::min))
        .sum::<f64>()
        / parts.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Jsd,
    MmdCd,
    MmdEmd,
    CovCd,
    CovEmd,
}

impl std::str::FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "jsd" => Ok(Metric::Jsd),
            "mmd_cd" => Ok(Metric::MmdCd),
            "mmd_emd" => Ok(Metric::MmdEmd),
            "cov_cd" => Ok(Metric::CovCd),
            "cov_emd" => Ok(Metric::CovEmd),
            other => Err(Error::InvalidParameter(format!("unknown metric `{other}`"))),
        }
    }
}

/// Metrics that were requested; the others stay `None`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub jsd: Option<f64>,
    pub mmd_cd: Option<f64>,
    pub mmd_emd: Option<f64>,
    pub cov_cd: Option<f64>,
    pub cov_emd: Option<f64>,
    /// Set when any EMD used the entropic approximation.
    pub emd_approximate: bool,
    pub runtime_seconds: f64,
}

impl MetricReport {
    /// One `key=value` line per computed metric.
    pub fn to_key_values(&self) -> String {
        let mut out = String::new();
        for (k, v) in [
            ("jsd", self.jsd),
            ("mmd_cd", self.mmd_cd),
            ("mmd_emd", self.mmd_emd),
            ("cov_cd", self.cov_cd),
            ("cov_emd", self.cov_emd),
        ] {
            if let Some(v) = v {
                out.push_str(&format!("{k}={v}\n"));
            }
        }
        if self.mmd_emd.is_some() || self.cov_emd.is_some() {
            out.push_str(&format!("emd_approximate={}\n", self.emd_approximate));
        }
        out.push_str(&format!("runtime_seconds={:.3}\n", self.runtime_seconds));
        out
    }
}

/// Computes the requested metrics, sharing one distance matrix per distance kind.
pub fn evaluate(gen: &[PointCloud], reference: &[PointCloud], metrics: &[Metric]) -> Result<MetricReport> {
    non_empty(gen, "generated set")?;
    non_empty(reference, "reference set")?;
    let start = Instant::now();
    let mut report = MetricReport::default();
    if metrics.contains(&Metric::Jsd) {
        report.jsd = Some(jsd(gen, reference, JSD_RESOLUTION)?);
    }
    for (d, mmd_key, cov_key) in [(Distance::Cd, Metric::MmdCd, Metric::CovCd), (Distance::Emd, Metric::MmdEmd, Metric::CovEmd)] {
        let (want_mmd, want_cov) = (metrics.contains(&mmd_key), metrics.contains(&cov_key));
        if !want_mmd && !want_cov {
            continue;
        }
        let ref_to_gen = pairwise(reference, gen, d)?;
        let gen_to_ref: Vec<Vec<f64>> = (0..gen.len()).map(|g| ref_to_gen.iter().map(|row| row[g]).collect()).collect();
        let mmd = want_mmd.then(|| mmd_from(&ref_to_gen));
        let cov = want_cov.then(|| coverage_from(&gen_to_ref, reference.len()));
        match d {
            Distance::Cd => (report.mmd_cd, report.cov_cd) = (mmd, cov),
            Distance::Emd => {
                (report.mmd_emd, report.cov_emd) = (mmd, cov);
                report.emd_approximate = gen.iter().chain(reference).any(|c| c.len() > EMD_EXACT_MAX);
            }
        }
    }
    report.runtime_seconds = start.elapsed().as_secs_f64();
    Ok(report)
}
