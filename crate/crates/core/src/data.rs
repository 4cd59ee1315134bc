//! Point-cloud files, normalization and the synthetic toy datasets.
//!
//! Two on-disk formats are supported: ASCII `.xyz` with one `x y z [label]`
//! per line, and the binary `.pcb` layout `"PCB1"`, little-endian `u32` count,
//! `u8` label flag, `N x 3` `f32` coordinates, then `N` `u8` labels.

use std::f64::consts::PI;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Point, PointCloud};

const PCB_MAGIC: &[u8; 4] = b"PCB1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledCloud {
    pub cloud: PointCloud,
    /// Ground-truth part index per point, when known.
    pub labels: Option<Vec<usize>>,
    pub category: String,
}

impl LabeledCloud {
    /// The points of each label in `0..parts`.
    pub fn parts(&self, parts: usize) -> Option<Vec<Vec<Point>>> {
        let labels = self.labels.as_ref()?;
        let mut out = vec![Vec::new(); parts];
        for (p, &l) in self.cloud.points().iter().zip(labels) {
            out.get_mut(l)?.push(*p);
        }
        Some(out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Format {
    Xyz,
    Pcb,
}

fn format_of(path: &Path) -> Option<Format> {
    match path.extension()?.to_str()?.to_ascii_lowercase().as_str() {
        "xyz" | "txt" => Some(Format::Xyz),
        "pcb" => Some(Format::Pcb),
        _ => None,
    }
}

fn format_error(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Format { path: path.to_path_buf(), line, message: message.into() }
}

fn parse_xyz(path: &Path, bytes: &[u8]) -> Result<(Vec<Point>, Option<Vec<usize>>)> {
    let text = std::str::from_utf8(bytes).map_err(|_| format_error(path, 0, "not valid UTF-8"))?;
    let mut points = Vec::new();
    let mut labels = Vec::new();
    let mut labeled = None;
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 3 && fields.len() != 4 {
            return Err(format_error(path, i + 1, format!("expected 3 or 4 fields, found {}", fields.len())));
        }
        let has_label = fields.len() == 4;
        if *labeled.get_or_insert(has_label) != has_label {
            return Err(format_error(path, i + 1, "label column present on some lines only"));
        }
        let mut p = [0.0; 3];
        for (k, f) in fields[..3].iter().enumerate() {
            p[k] = f
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| format_error(path, i + 1, format!("bad coordinate `{f}`")))?;
        }
        points.push(p);
        if has_label {
            let l = fields[3]
                .parse::<usize>()
                .map_err(|_| format_error(path, i + 1, format!("bad label `{}`", fields[3])))?;
            labels.push(l);
        }
    }
    if points.is_empty() {
        return Err(format_error(path, 0, "file contains no points"));
    }
    Ok((points, labeled.unwrap_or(false).then_some(labels)))
}

fn parse_pcb(path: &Path, bytes: &[u8]) -> Result<(Vec<Point>, Option<Vec<usize>>)> {
    if bytes.len() < 9 || &bytes[..4] != PCB_MAGIC {
        return Err(format_error(path, 0, "missing PCB1 header"));
    }
    let n = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let has_labels = match bytes[8] {
        0 => false,
        1 => true,
        b => return Err(format_error(path, 0, format!("bad label flag {b}"))),
    };
    let expected = 9 + n * 12 + if has_labels { n } else { 0 };
    if bytes.len() != expected {
        return Err(format_error(path, 0, format!("expected {expected} bytes, found {}", bytes.len())));
    }
    if n == 0 {
        return Err(format_error(path, 0, "file contains no points"));
    }
    let coords = &bytes[9..9 + n * 12];
    let points: Vec<Point> = coords
        .chunks_exact(12)
        .map(|c| {
            let f = |k: usize| f32::from_le_bytes(c[4 * k..4 * k + 4].try_into().expect("4 bytes")) as f64;
            [f(0), f(1), f(2)]
        })
        .collect();
    if let Some(i) = points.iter().position(|p| p.iter().any(|v| !v.is_finite())) {
        return Err(format_error(path, 0, format!("non-finite coordinate at point {i}")));
    }
    let labels = has_labels.then(|| bytes[9 + n * 12..].iter().map(|&l| l as usize).collect());
    Ok((points, labels))
}

/// Reads one cloud file without resampling.
pub fn read_cloud(path: &Path) -> Result<LabeledCloud> {
    let format = format_of(path).ok_or_else(|| format_error(path, 0, "unknown extension (expected .xyz or .pcb)"))?;
    let bytes = fs::read(path)?;
    let (points, labels) = match format {
        Format::Xyz => parse_xyz(path, &bytes)?,
        Format::Pcb => parse_pcb(path, &bytes)?,
    };
    let category = path
        .parent()
        .and_then(Path::file_name)
        .and_then(|s| s.to_str())
        .unwrap_or_default()
        .to_string();
    Ok(LabeledCloud { cloud: PointCloud::new(points)?, labels, category })
}

/// Subsamples without replacement (or resamples with replacement when the
/// cloud is smaller) to exactly `n` points. A cloud of size `n` is returned as is.
pub fn resample(cloud: &LabeledCloud, n: usize, seed: u64) -> Result<LabeledCloud> {
    if n == 0 {
        return Err(Error::InvalidParameter("n_points must be positive".into()));
    }
    let len = cloud.cloud.len();
    if len == n {
        return Ok(cloud.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = if len > n {
        index::sample(&mut rng, len, n).into_vec()
    } else {
        (0..n).map(|_| rng.random_range(0..len)).collect()
    };
    idx.sort_unstable();
    Ok(LabeledCloud {
        cloud: cloud.cloud.select(&idx)?,
        labels: cloud.labels.as_ref().map(|l| idx.iter().map(|&i| l[i]).collect()),
        category: cloud.category.clone(),
    })
}

fn cloud_files(path: &Path) -> Result<Vec<PathBuf>> {
    if path.is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    let mut files: Vec<PathBuf> = fs::read_dir(path)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .filter(|p| p.is_file() && format_of(p).is_some())
        .collect();
    files.sort();
    Ok(files)
}

/// Loads a cloud file, or every `.xyz`/`.pcb` file of a directory in name
/// order, each resampled to `n_points` with a seed derived from its contents.
pub fn load_clouds(path: impl AsRef<Path>, n_points: usize) -> Result<Vec<LabeledCloud>> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("{} does not exist", path.display()),
        )));
    }
    let files = cloud_files(path)?;
    if files.is_empty() {
        return Err(Error::Empty("no .xyz or .pcb files found"));
    }
    files
        .iter()
        .map(|f| {
            let cloud = read_cloud(f)?;
            let seed = crc32fast::hash(&fs::read(f)?) as u64;
            resample(&cloud, n_points, seed)
        })
        .collect()
}

fn check_labels(cloud: &PointCloud, labels: Option<&[usize]>) -> Result<()> {
    if let Some(l) = labels {
        if l.len() != cloud.len() {
            return Err(Error::Shape(format!("{} labels for {} points", l.len(), cloud.len())));
        }
    }
    Ok(())
}

pub fn write_xyz(path: impl AsRef<Path>, cloud: &PointCloud, labels: Option<&[usize]>) -> Result<()> {
    check_labels(cloud, labels)?;
    let mut out = String::with_capacity(cloud.len() * 40);
    for (i, p) in cloud.points().iter().enumerate() {
        match labels {
            Some(l) => out.push_str(&format!("{} {} {} {}\n", p[0], p[1], p[2], l[i])),
            None => out.push_str(&format!("{} {} {}\n", p[0], p[1], p[2])),
        }
    }
    fs::write(path, out)?;
    Ok(())
}

/// Writes the binary format; coordinates are stored as `f32`.
pub fn write_pcb(path: impl AsRef<Path>, cloud: &PointCloud, labels: Option<&[usize]>) -> Result<()> {
    check_labels(cloud, labels)?;
    if labels.is_some_and(|l| l.iter().any(|&x| x > u8::MAX as usize)) {
        return Err(Error::InvalidParameter("binary labels must fit in a byte".into()));
    }
    let n = u32::try_from(cloud.len()).map_err(|_| Error::InvalidParameter("too many points".into()))?;
    let mut buf = Vec::with_capacity(9 + cloud.len() * 13);
    buf.extend_from_slice(PCB_MAGIC);
    buf.extend_from_slice(&n.to_le_bytes());
    buf.push(labels.is_some() as u8);
    for p in cloud.points() {
        for v in p {
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    if let Some(l) = labels {
        buf.extend(l.iter().map(|&x| x as u8));
    }
    fs::File::create(path)?.write_all(&buf)?;
    Ok(())
}

/// Centers on the centroid and scales to unit maximum norm.
///
/// Returns the normalized cloud with the center and scale that undo it.
pub fn normalize(cloud: &PointCloud) -> (PointCloud, [f64; 3], f64) {
    let c = cloud.centroid();
    let centered: Vec<Point> = cloud.points().iter().map(|p| [p[0] - c[0], p[1] - c[1], p[2] - c[2]]).collect();
    let max = centered.iter().map(|p| (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt()).fold(0.0, f64::max);
    let scale = if max > 0.0 { max } else { 1.0 };
    let points = centered.iter().map(|p| [p[0] / scale, p[1] / scale, p[2] / scale]).collect();
    (PointCloud::new(points).expect("same size as input"), c, scale)
}

pub fn denormalize(cloud: &PointCloud, center: [f64; 3], scale: f64) -> PointCloud {
    let points = cloud
        .points()
        .iter()
        .map(|p| [0, 1, 2].map(|k| p[k] * scale + center[k]))
        .collect();
    PointCloud::new(points).expect("same size as input")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ToyCategory {
    Toychair,
    Toytable,
    Toyplane,
}

impl ToyCategory {
    pub const ALL: [ToyCategory; 3] = [ToyCategory::Toychair, ToyCategory::Toytable, ToyCategory::Toyplane];

    pub fn name(self) -> &'static str {
        match self {
            ToyCategory::Toychair => "toychair",
            ToyCategory::Toytable => "toytable",
            ToyCategory::Toyplane => "toyplane",
        }
    }

    /// Names of the three labelled parts.
    pub fn part_names(self) -> [&'static str; 3] {
        match self {
            ToyCategory::Toychair => ["back", "seat", "legs"],
            ToyCategory::Toytable => ["top", "left legs", "right legs"],
            ToyCategory::Toyplane => ["body", "wings", "tail"],
        }
    }
}

impl std::str::FromStr for ToyCategory {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::UnknownCategory(s.to_string()))
    }
}

/// A solid whose surface is sampled: axis-aligned box or cylinder.
#[derive(Clone, Copy, Debug)]
enum Solid {
    Box { center: Point, size: [f64; 3] },
    /// Cylinder along coordinate `axis`.
    Cylinder { center: Point, radius: f64, length: f64, axis: usize },
}

impl Solid {
    fn area(&self) -> f64 {
        match *self {
            Solid::Box { size: [a, b, c], .. } => 2.0 * (a * b + b * c + a * c),
            Solid::Cylinder { radius, length, .. } => 2.0 * PI * radius * (radius + length),
        }
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> Point {
        match *self {
            Solid::Box { center, size } => {
                let faces = [size[1] * size[2], size[0] * size[2], size[0] * size[1]];
                let mut r = rng.random::<f64>() * (faces[0] + faces[1] + faces[2]);
                let mut axis = 0;
                while axis < 2 && r >= faces[axis] {
                    r -= faces[axis];
                    axis += 1;
                }
                let sign = if rng.random::<bool>() { 0.5 } else { -0.5 };
                let mut p = [0.0; 3];
                for k in 0..3 {
                    let off = if k == axis { sign } else { rng.random::<f64>() - 0.5 };
                    p[k] = center[k] + off * size[k];
                }
                p
            }
            Solid::Cylinder { center, radius, length, axis } => {
                let side = 2.0 * PI * radius * length;
                let cap = PI * radius * radius;
                let r = rng.random::<f64>() * (side + 2.0 * cap);
                let theta = rng.random::<f64>() * 2.0 * PI;
                let (rho, h) = if r < side {
                    (radius, (rng.random::<f64>() - 0.5) * length)
                } else {
                    let end = if r < side + cap { 0.5 } else { -0.5 };
                    (radius * rng.random::<f64>().sqrt(), end * length)
                };
                let (u, v) = ((axis + 1) % 3, (axis + 2) % 3);
                let mut p = center;
                p[axis] += h;
                p[u] += rho * theta.cos();
                p[v] += rho * theta.sin();
                p
            }
        }
    }
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    rng.random_range(lo..hi)
}

fn toy_chair(rng: &mut ChaCha8Rng) -> Vec<(Solid, usize)> {
    let w = uniform(rng, 0.8, 1.2);
    let d = uniform(rng, 0.8, 1.2);
    let t = uniform(rng, 0.08, 0.15);
    let h = uniform(rng, 0.8, 1.1);
    let back_h = uniform(rng, 0.8, 1.3);
    let back_t = uniform(rng, 0.06, 0.12);
    let leg = uniform(rng, 0.05, 0.1);
    let round_legs = rng.random::<bool>();
    let inset = uniform(rng, 0.0, 0.1);

    let mut out = vec![
        (Solid::Box { center: [0.0, -d / 2.0 + back_t / 2.0, h + t / 2.0 + back_h / 2.0], size: [w, back_t, back_h] }, 0),
        (Solid::Box { center: [0.0, 0.0, h], size: [w, d, t] }, 1),
    ];
    let leg_len = h - t / 2.0;
    for sx in [-1.0, 1.0] {
        for sy in [-1.0, 1.0] {
            let center = [sx * (w / 2.0 - leg / 2.0 - inset), sy * (d / 2.0 - leg / 2.0 - inset), leg_len / 2.0];
            let solid = if round_legs {
                Solid::Cylinder { center, radius: leg / 2.0, length: leg_len, axis: 2 }
            } else {
                Solid::Box { center, size: [leg, leg, leg_len] }
            };
            out.push((solid, 2));
        }
    }
    out
}

fn toy_table(rng: &mut ChaCha8Rng) -> Vec<(Solid, usize)> {
    let w = uniform(rng, 1.2, 1.8);
    let d = uniform(rng, 0.7, 1.1);
    let t = uniform(rng, 0.05, 0.12);
    let h = uniform(rng, 0.6, 0.9);
    let leg = uniform(rng, 0.06, 0.12);
    let inset = uniform(rng, 0.0, 0.15);
    let mut out = vec![(Solid::Box { center: [0.0, 0.0, h], size: [w, d, t] }, 0)];
    let leg_len = h - t / 2.0;
    for (sx, label) in [(-1.0, 1), (1.0, 2)] {
        for sy in [-1.0, 1.0] {
            let center = [sx * (w / 2.0 - leg / 2.0 - inset), sy * (d / 2.0 - leg / 2.0 - inset), leg_len / 2.0];
            out.push((Solid::Box { center, size: [leg, leg, leg_len] }, label));
        }
    }
    out
}

fn toy_plane(rng: &mut ChaCha8Rng) -> Vec<(Solid, usize)> {
    let len = uniform(rng, 1.6, 2.2);
    let r = uniform(rng, 0.1, 0.16);
    let span = uniform(rng, 1.6, 2.4);
    let chord = uniform(rng, 0.3, 0.5);
    let wing_x = uniform(rng, -0.1, 0.2);
    let fin_h = uniform(rng, 0.3, 0.45);
    let stab = uniform(rng, 0.5, 0.8);
    let tail_x = -len / 2.0 + 0.15;
    vec![
        (Solid::Cylinder { center: [0.0, 0.0, 0.0], radius: r, length: len, axis: 0 }, 0),
        (Solid::Box { center: [wing_x, 0.0, 0.0], size: [chord, span, 0.04] }, 1),
        (Solid::Box { center: [tail_x, 0.0, r + fin_h / 2.0], size: [0.25, 0.03, fin_h] }, 2),
        (Solid::Box { center: [tail_x, 0.0, r / 2.0], size: [0.2, stab, 0.03] }, 2),
    ]
}

/// Splits `n` samples across solids in proportion to area, at least one each
/// when possible (largest-remainder rounding).
fn allocate(areas: &[f64], n: usize) -> Vec<usize> {
    let total: f64 = areas.iter().sum();
    let floor_one = n >= areas.len();
    let base = if floor_one { areas.len() } else { 0 };
    let rest = n - base;
    let exact: Vec<f64> = areas.iter().map(|a| a / total * rest as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize + usize::from(floor_one)).collect();
    let mut order: Vec<usize> = (0..areas.len()).collect();
    order.sort_by(|&i, &j| (exact[j] - exact[j].floor()).total_cmp(&(exact[i] - exact[i].floor())).then(i.cmp(&j)));
    let assigned: usize = counts.iter().sum();
    for &i in order.iter().take(n - assigned) {
        counts[i] += 1;
    }
    counts
}

fn mix(a: u64, b: u64) -> u64 {
    let mut x = a ^ b.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    x ^= x >> 31;
    x = x.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x ^ (x >> 29)
}

/// One toy shape; deterministic in `(seed, index)`.
pub fn synth_toyshape(category: ToyCategory, n_points: usize, seed: u64, index: u64) -> Result<LabeledCloud> {
    if n_points == 0 {
        return Err(Error::InvalidParameter("n_points must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, index));
    let solids = match category {
        ToyCategory::Toychair => toy_chair(&mut rng),
        ToyCategory::Toytable => toy_table(&mut rng),
        ToyCategory::Toyplane => toy_plane(&mut rng),
    };
    let areas: Vec<f64> = solids.iter().map(|(s, _)| s.area()).collect();
    let mut points = Vec::with_capacity(n_points);
    let mut labels = Vec::with_capacity(n_points);
    for ((solid, label), count) in solids.iter().zip(allocate(&areas, n_points)) {
        for _ in 0..count {
            points.push(solid.sample(&mut rng));
            labels.push(*label);
        }
    }
    let (cloud, _, _) = normalize(&PointCloud::new(points)?);
    Ok(LabeledCloud { cloud, labels: Some(labels), category: category.name().to_string() })
}

/// `count` labelled toy clouds of `n_points` each, normalized to unit max norm.
pub fn synth_toyshapes(category: &str, count: usize, n_points: usize, seed: u64) -> Result<Vec<LabeledCloud>> {
    let category: ToyCategory = category.parse()?;
    if count == 0 {
        return Err(Error::InvalidParameter("count must be at least 1".into()));
    }
    (0..count as u64).map(|i| synth_toyshape(category, n_points, seed, i)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn max_norm(c: &PointCloud) -> f64 {
        c.points().iter().map(|p| (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt()).fold(0.0, f64::max)
    }

    #[test]
    fn toy_datasets_are_deterministic_and_labelled() {
        for cat in ToyCategory::ALL {
            let a = synth_toyshapes(cat.name(), 20, 256, 7).unwrap();
            assert_eq!(a, synth_toyshapes(cat.name(), 20, 256, 7).unwrap());
            assert_ne!(a, synth_toyshapes(cat.name(), 20, 256, 8).unwrap());
            for c in &a {
                let labels = c.labels.as_ref().unwrap();
                assert_eq!(labels.len(), 256);
                let mut distinct = labels.clone();
                distinct.sort_unstable();
                distinct.dedup();
                assert_eq!(distinct, vec![0, 1, 2], "{}", cat.name());
                assert!((max_norm(&c.cloud) - 1.0).abs() < 1e-12);
                assert!(c.cloud.points().iter().flatten().all(|v| v.is_finite()));
                let parts = c.parts(3).unwrap();
                assert_eq!(parts.iter().map(Vec::len).sum::<usize>(), 256);
            }
        }
        assert!(matches!(synth_toyshapes("toycouch", 1, 10, 0), Err(Error::UnknownCategory(_))));
    }

    #[test]
    fn allocation_is_exact_and_covers_every_solid() {
        assert_eq!(allocate(&[1.0, 1.0, 2.0], 8), vec![2, 2, 4]);
        let c = allocate(&[100.0, 0.01, 0.01], 10);
        assert_eq!(c.iter().sum::<usize>(), 10);
        assert!(c.iter().all(|&k| k >= 1));
        assert_eq!(allocate(&[1.0, 1.0, 1.0], 2).iter().sum::<usize>(), 2);
    }

    #[test]
    fn normalize_examples() {
        let base = synth_toyshape(ToyCategory::Toychair, 128, 1, 0).unwrap().cloud;
        let (again, c, s) = normalize(&base);
        assert!(again.to_tensor().max_abs_diff(&base.to_tensor()) < 1e-9);
        assert!(c.iter().all(|v| v.abs() < 1e-9) && (s - 1.0).abs() < 1e-9);

        let shifted = PointCloud::new(base.points().iter().map(|p| [p[0] + 10.0, p[1], p[2]]).collect()).unwrap();
        let (n, c, _) = normalize(&shifted);
        let cent = base.centroid();
        assert!((c[0] - 10.0 - cent[0]).abs() < 1e-9 && (c[1] - cent[1]).abs() < 1e-9);
        assert!(n.to_tensor().max_abs_diff(&base.to_tensor()) < 1e-9);

        let (d, c, s) = normalize(&PointCloud::new(vec![[2.0, 3.0, 4.0]; 5]).unwrap());
        assert_eq!((c, s), ([2.0, 3.0, 4.0], 1.0));
        assert!(d.points().iter().all(|p| *p == [0.0; 3]));
    }

    #[test]
    fn xyz_loading_and_resampling() {
        let dir = tempfile::tempdir().unwrap();
        let cloud = synth_toyshape(ToyCategory::Toytable, 5000, 2, 0).unwrap();
        let path = dir.path().join("a.xyz");
        write_xyz(&path, &cloud.cloud, cloud.labels.as_deref()).unwrap();
        let loaded = load_clouds(&path, 2048).unwrap();
        assert_eq!(loaded[0].cloud.len(), 2048);
        assert!(loaded[0].labels.as_ref().unwrap().iter().all(|&l| l < 3));
        assert_eq!(loaded, load_clouds(&path, 2048).unwrap());
        let up = load_clouds(&path, 6000).unwrap();
        assert_eq!(up[0].cloud.len(), 6000);
        let same = load_clouds(&path, 5000).unwrap();
        assert_eq!(same[0].cloud, cloud.cloud);
    }

    #[test]
    fn loading_errors() {
        let dir = tempfile::tempdir().unwrap();
        let empty = dir.path().join("empty.xyz");
        fs::write(&empty, "").unwrap();
        assert!(matches!(load_clouds(&empty, 10), Err(Error::Format { line: 0, .. })));
        let bad = dir.path().join("bad.xyz");
        fs::write(&bad, "0 0 0\n1 2 x\n").unwrap();
        match load_clouds(&bad, 10) {
            Err(Error::Format { path, line, .. }) => {
                assert_eq!(path, bad);
                assert_eq!(line, 2);
            }
            other => panic!("{other:?}"),
        }
        assert!(matches!(load_clouds(dir.path().join("missing"), 10), Err(Error::Io(_))));
        let trunc = dir.path().join("t.pcb");
        fs::write(&trunc, b"PCB1\x05\0\0\0\0abc").unwrap();
        assert!(matches!(read_cloud(&trunc), Err(Error::Format { .. })));
    }

    #[test]
    fn directory_loading_in_name_order() {
        let dir = tempfile::tempdir().unwrap();
        for (i, name) in ["b.pcb", "a.xyz", "c.txt"].iter().enumerate() {
            let c = synth_toyshape(ToyCategory::Toyplane, 64, 3, i as u64).unwrap();
            if name.ends_with("pcb") {
                write_pcb(dir.path().join(name), &c.cloud, None).unwrap();
            } else {
                write_xyz(dir.path().join(name), &c.cloud, None).unwrap();
            }
        }
        fs::write(dir.path().join("notes.md"), "ignored").unwrap();
        let all = load_clouds(dir.path(), 64).unwrap();
        assert_eq!(all.len(), 3);
        assert!(all.iter().all(|c| c.labels.is_none()));
    }

    proptest! {
        #[test]
        fn binary_round_trip_is_bit_exact(
            pts in prop::collection::vec(prop::array::uniform3(-100.0..100.0f32), 1..200),
            labelled in any::<bool>(),
        ) {
            let dir = tempfile::tempdir().unwrap();
            let cloud = PointCloud::new(pts.iter().map(|p| p.map(f64::from)).collect()).unwrap();
            let labels: Vec<usize> = (0..pts.len()).map(|i| i % 5).collect();
            let labels = labelled.then_some(labels);
            let a = dir.path().join("a.pcb");
            write_pcb(&a, &cloud, labels.as_deref()).unwrap();
            let first = read_cloud(&a).unwrap();
            let b = dir.path().join("b.pcb");
            write_pcb(&b, &first.cloud, first.labels.as_deref()).unwrap();
            let second = read_cloud(&b).unwrap();
            prop_assert_eq!(&first.cloud, &cloud);
            prop_assert_eq!(&first, &second);
            prop_assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
        }

        #[test]
        fn normalize_round_trip(
            pts in prop::collection::vec(prop::array::uniform3(-50.0..50.0f64), 1..100),
        ) {
            let cloud = PointCloud::new(pts).unwrap();
            let (n, c, s) = normalize(&cloud);
            let nm = max_norm(&n);
            prop_assert!(nm == 0.0 || (nm - 1.0).abs() < 1e-12);
            prop_assert!(denormalize(&n, c, s).to_tensor().max_abs_diff(&cloud.to_tensor()) < 1e-9);
        }
    }
}
