//! Global latent, its Gaussian posterior, and the linear split into per-part latents.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const LOGVAR_RANGE: (f64, f64) = (-10.0, 10.0);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GlobalLatent(pub Vec<f64>);

impl GlobalLatent {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    /// `(1 - w) * self + w * other`.
    pub fn lerp(&self, other: &GlobalLatent, w: f64) -> Result<GlobalLatent> {
        check_dims(self.dim(), other.dim(), "latent interpolation")?;
        Ok(GlobalLatent(self.0.iter().zip(&other.0).map(|(a, b)| (1.0 - w) * a + w * b).collect()))
    }
}

/// Diagonal Gaussian posterior over the global latent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PosteriorParams {
    mu: Vec<f64>,
    logvar: Vec<f64>,
}

impl PosteriorParams {
    /// Clamps `logvar` into [`LOGVAR_RANGE`].
    pub fn new(mu: Vec<f64>, logvar: Vec<f64>) -> Result<Self> {
        check_dims(mu.len(), logvar.len(), "posterior mean/log-variance")?;
        if mu.iter().chain(&logvar).any(|x| !x.is_finite()) {
            return Err(Error::InvalidParameter("posterior parameters must be finite".into()));
        }
        let (lo, hi) = LOGVAR_RANGE;
        Ok(Self { mu, logvar: logvar.into_iter().map(|v| v.clamp(lo, hi)).collect() })
    }

    /// The prior itself: zero mean, unit variance.
    pub fn standard(dim: usize) -> Self {
        Self { mu: vec![0.0; dim], logvar: vec![0.0; dim] }
    }

    pub fn mu(&self) -> &[f64] {
        &self.mu
    }

    pub fn logvar(&self) -> &[f64] {
        &self.logvar
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }
}

/// Widths of the style, pose and primitive latents of one part.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartDims {
    pub style: usize,
    pub pose: usize,
    pub primitive: usize,
}

impl Default for PartDims {
    fn default() -> Self {
        Self { style: 32, pose: 8, primitive: 8 }
    }
}

impl PartDims {
    pub fn total(&self) -> usize {
        self.style + self.pose + self.primitive
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartLatent {
    pub z_y: Vec<f64>,
    pub z_t: Vec<f64>,
    pub z_p: Vec<f64>,
}

impl PartLatent {
    fn from_slice(v: &[f64], dims: &PartDims) -> Self {
        let (y, rest) = v.split_at(dims.style);
        let (t, p) = rest.split_at(dims.pose);
        Self { z_y: y.to_vec(), z_t: t.to_vec(), z_p: p.to_vec() }
    }
}

/// A global latent together with its per-part latents.
///
/// `z` is `None` once part latents have been edited independently of it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentBundle {
    pub z: Option<GlobalLatent>,
    pub parts: Vec<PartLatent>,
}

impl LatentBundle {
    pub fn num_parts(&self) -> usize {
        self.parts.len()
    }

    /// Concatenated part latents `(z_Y | z_T | z_P)` per part.
    pub fn flatten(&self) -> Vec<f64> {
        self.parts
            .iter()
            .flat_map(|p| p.z_y.iter().chain(&p.z_t).chain(&p.z_p).copied())
            .collect()
    }

    pub fn from_flat(flat: &[f64], dims: &PartDims, parts: usize) -> Result<Self> {
        check_dims(flat.len(), parts * dims.total(), "part latent vector")?;
        Ok(Self {
            z: None,
            parts: flat.chunks(dims.total()).map(|c| PartLatent::from_slice(c, dims)).collect(),
        })
    }

    /// Part-wise `(1 - w) * self + w * other`.
    pub fn lerp(&self, other: &LatentBundle, w: f64) -> Result<LatentBundle> {
        let a = self.flatten();
        let b = other.flatten();
        check_dims(a.len(), b.len(), "bundle interpolation")?;
        let dims = PartDims {
            style: self.parts[0].z_y.len(),
            pose: self.parts[0].z_t.len(),
            primitive: self.parts[0].z_p.len(),
        };
        let flat: Vec<f64> = a.iter().zip(&b).map(|(x, y)| (1.0 - w) * x + w * y).collect();
        let mut out = Self::from_flat(&flat, &dims, self.num_parts())?;
        out.z = match (&self.z, &other.z) {
            (Some(za), Some(zb)) => Some(za.lerp(zb, w)?),
            _ => None,
        };
        Ok(out)
    }
}

/// `z = mu + exp(logvar / 2) * noise`.
pub fn reparameterize(post: &PosteriorParams, noise: &[f64]) -> Result<GlobalLatent> {
    check_dims(post.dim(), noise.len(), "reparameterization noise")?;
    Ok(GlobalLatent(
        post.mu
            .iter()
            .zip(&post.logvar)
            .zip(noise)
            .map(|((m, lv), n)| m + (0.5 * lv).exp() * n)
            .collect(),
    ))
}

/// Tape version over batches: `mu`, `logvar`, `noise` are all `B x D`.
pub fn reparameterize_var<'t>(mu: Var<'t>, logvar: Var<'t>, noise: Var<'t>) -> Var<'t> {
    mu + logvar.scale(0.5).exp() * noise
}

/// Closed-form KL divergence to the standard normal.
pub fn kl_divergence(post: &PosteriorParams) -> f64 {
    0.5 * post
        .mu
        .iter()
        .zip(&post.logvar)
        .map(|(m, lv)| m * m + lv.exp() - 1.0 - lv)
        .sum::<f64>()
}

/// Tape version: KL of each row, averaged over the `B` rows.
pub fn kl_divergence_var<'t>(mu: Var<'t>, logvar: Var<'t>) -> Var<'t> {
    let rows = mu.rows() as f64;
    (mu.square() + logvar.exp() - logvar).add_scalar(-1.0).sum().scale(0.5 / rows)
}

/// Linear map from the global latent to concatenated part latents, `(M * part) x D_z`.
pub fn init_global_map(parts: usize, dims: &PartDims, d_z: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0 / (d_z as f64).sqrt()).expect("valid std");
    let rows = parts * dims.total();
    Tensor::from_vec(rows, d_z, (0..rows * d_z).map(|_| normal.sample(&mut rng)).collect())
}

/// `z_l = A z`, partitioned into `M` blocks of `(z_Y | z_T | z_P)`.
pub fn split_latent(a: &Tensor, z: &GlobalLatent, dims: &PartDims, parts: usize) -> Result<LatentBundle> {
    if a.rows() != parts * dims.total() || a.cols() != z.dim() {
        return Err(Error::Shape(format!(
            "global map is {}x{}, expected {}x{}",
            a.rows(),
            a.cols(),
            parts * dims.total(),
            z.dim()
        )));
    }
    let zl = a.matmul(&Tensor::column(z.as_slice()));
    let mut bundle = LatentBundle::from_flat(zl.data(), dims, parts)?;
    bundle.z = Some(z.clone());
    Ok(bundle)
}

/// The no-map ablation: part latents are contiguous slices of `z`.
pub fn slice_latent(z: &GlobalLatent, dims: &PartDims, parts: usize) -> Result<LatentBundle> {
    let mut bundle = LatentBundle::from_flat(z.as_slice(), dims, parts)?;
    bundle.z = Some(z.clone());
    Ok(bundle)
}

/// `n` i.i.d. standard normal latents of dimension `dim`.
pub fn sample_prior(seed: u64, n: usize, dim: usize) -> Vec<GlobalLatent> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| GlobalLatent((0..dim).map(|_| StandardNormal.sample(&mut rng)).collect()))
        .collect()
}

pub(crate) fn standard_normal_tensor(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| StandardNormal.sample(&mut rng)).collect())
}

fn check_dims(a: usize, b: usize, what: &str) -> Result<()> {
    if a != b {
        return Err(Error::Shape(format!("{what}: dimension {a} vs {b}")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::gradcheck::max_rel_error;
    use proptest::prelude::*;

    #[test]
    fn reparameterize_examples() {
        let noise = vec![0.3, -1.2];
        let std = PosteriorParams::standard(2);
        assert_eq!(reparameterize(&std, &noise).unwrap().0, noise);
        let post = PosteriorParams::new(vec![1.0, 2.0], vec![4f64.ln(); 2]).unwrap();
        assert_eq!(reparameterize(&post, &[0.0, 0.0]).unwrap().0, vec![1.0, 2.0]);
        let z = reparameterize(&post, &[1.0, 1.0]).unwrap();
        assert!((z.0[0] - 3.0).abs() < 1e-12 && (z.0[1] - 4.0).abs() < 1e-12);
        assert!(reparameterize(&post, &[1.0]).is_err());
    }

    #[test]
    fn logvar_is_clamped() {
        let p = PosteriorParams::new(vec![0.0; 2], vec![-50.0, 50.0]).unwrap();
        assert_eq!(p.logvar(), &[-10.0, 10.0]);
        assert!(PosteriorParams::new(vec![0.0], vec![0.0, 0.0]).is_err());
    }

    #[test]
    fn kl_examples() {
        assert_eq!(kl_divergence(&PosteriorParams::standard(8)), 0.0);
        let p = PosteriorParams::new(vec![1.0], vec![0.0]).unwrap();
        assert!((kl_divergence(&p) - 0.5).abs() < 1e-12);
        // Oracle: 0.5 * (4 - 1 - ln 4).
        let oracle = 0.5 * (4.0 - 1.0 - 4f64.ln());
        let p = PosteriorParams::new(vec![0.0], vec![4f64.ln()]).unwrap();
        assert!((kl_divergence(&p) - oracle).abs() < 1e-12);
        assert!((oracle - 0.80685).abs() < 1e-5);
    }

    #[test]
    fn kl_gradient_matches_finite_differences() {
        let mu = Tensor::from_rows(&[[0.3, -1.2, 0.7], [0.0, 0.5, -0.1]]);
        let lv = Tensor::from_rows(&[[0.2, -0.4, 1.1], [-2.0, 0.0, 0.3]]);
        let err = max_rel_error(&[mu, lv], 1e-5, 1e-8, |_, v| kl_divergence_var(v[0], v[1]));
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn split_with_identity_rows_slices_z() {
        let dims = PartDims { style: 2, pose: 1, primitive: 1 };
        let z = GlobalLatent((0..8).map(|i| i as f64).collect());
        let b = split_latent(&Tensor::identity(8), &z, &dims, 2).unwrap();
        assert_eq!(b.parts[0].z_y, vec![0.0, 1.0]);
        assert_eq!(b.parts[1].z_t, vec![6.0]);
        assert_eq!(b, slice_latent(&z, &dims, 2).unwrap());
    }

    #[test]
    fn default_dimensions_partition() {
        let dims = PartDims::default();
        let a = init_global_map(3, &dims, 256, 0);
        assert_eq!(a.shape(), (144, 256));
        let z = &sample_prior(1, 1, 256)[0];
        let b = split_latent(&a, z, &dims, 3).unwrap();
        assert_eq!(b.flatten().len(), 144);
        for p in &b.parts {
            assert_eq!((p.z_y.len(), p.z_t.len(), p.z_p.len()), (32, 8, 8));
        }
        assert!(split_latent(&a, &GlobalLatent(vec![0.0; 10]), &dims, 3).is_err());
    }

    #[test]
    fn prior_samples() {
        assert!(sample_prior(0, 0, 4).is_empty());
        assert_eq!(sample_prior(5, 3, 4), sample_prior(5, 3, 4));
        let n = 10_000;
        let d = 256;
        let s = sample_prior(11, n, d);
        for k in 0..d {
            let mean = s.iter().map(|z| z.0[k]).sum::<f64>() / n as f64;
            let var = s.iter().map(|z| (z.0[k] - mean).powi(2)).sum::<f64>() / n as f64;
            assert!(mean.abs() <= 0.05, "dim {k} mean {mean}");
            assert!((0.9..=1.1).contains(&var), "dim {k} var {var}");
        }
    }

    proptest! {
        #[test]
        fn kl_is_non_negative(mu in prop::collection::vec(-5.0f64..5.0, 4), lv in prop::collection::vec(-10.0f64..10.0, 4)) {
            let p = PosteriorParams::new(mu, lv).unwrap();
            prop_assert!(kl_divergence(&p) >= 0.0);
        }

        #[test]
        fn split_commutes_with_affine_combinations(a in -2.0f64..2.0, b in -2.0f64..2.0, seed in 0u64..50) {
            let dims = PartDims { style: 4, pose: 2, primitive: 2 };
            let map = init_global_map(3, &dims, 16, seed);
            let z = sample_prior(seed + 1, 2, 16);
            let mix = GlobalLatent(z[0].0.iter().zip(&z[1].0).map(|(x, y)| a * x + b * y).collect());
            let lhs = split_latent(&map, &mix, &dims, 3).unwrap().flatten();
            let r1 = split_latent(&map, &z[0], &dims, 3).unwrap().flatten();
            let r2 = split_latent(&map, &z[1], &dims, 3).unwrap().flatten();
            for i in 0..lhs.len() {
                prop_assert!((lhs[i] - (a * r1[i] + b * r2[i])).abs() < 1e-12);
            }
        }
    }
}
