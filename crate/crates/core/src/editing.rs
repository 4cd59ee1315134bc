//! Generation and part-level latent edits.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::PointCloud;
use crate::latent::{self, GlobalLatent, LatentBundle};
use crate::networks::{self, DecodedShape, ModelParams};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EditMode {
    Mix,
    Resample,
}

/// Parts touched by an edit.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditSelection {
    pub part_indices: Vec<usize>,
    pub mode: EditMode,
}

impl EditSelection {
    /// Sorts and deduplicates `parts`.
    pub fn new(mut parts: Vec<usize>, mode: EditMode) -> Self {
        parts.sort_unstable();
        parts.dedup();
        Self { part_indices: parts, mode }
    }

    pub fn validate(&self, parts: usize) -> Result<()> {
        if let Some(&index) = self.part_indices.iter().find(|&&i| i >= parts) {
            return Err(Error::PartIndex { index, parts });
        }
        let mut seen = self.part_indices.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != self.part_indices.len() {
            return Err(Error::InvalidParameter("duplicate part index in selection".into()));
        }
        Ok(())
    }

    pub fn contains(&self, part: usize) -> bool {
        self.part_indices.contains(&part)
    }
}

fn check_bundle(model: &ModelParams, b: &LatentBundle) -> Result<()> {
    let cfg = model.config();
    let dims = cfg.part_dims;
    let ok = b.num_parts() == cfg.parts
        && b.parts.iter().all(|p| p.z_y.len() == dims.style && p.z_t.len() == dims.pose && p.z_p.len() == dims.primitive);
    if !ok {
        return Err(Error::Shape("latent bundle does not match the model configuration".into()));
    }
    Ok(())
}

/// `n` prior samples with their part latents and decodes; deterministic in `seed`.
pub fn generate_with_latents(model: &ModelParams, seed: u64, n: usize) -> Result<Vec<(LatentBundle, DecodedShape)>> {
    latent::sample_prior(seed, n, model.config().latent_dim)
        .par_iter()
        .map(|z| {
            let bundle = networks::split(model, z)?;
            let shape = networks::decode_bundle(model, &bundle)?;
            Ok((bundle, shape))
        })
        .collect()
}

pub fn generate(model: &ModelParams, seed: u64, n: usize) -> Result<Vec<DecodedShape>> {
    Ok(generate_with_latents(model, seed, n)?.into_iter().map(|(_, s)| s).collect())
}

/// Encodes a cloud; `deterministic` uses the posterior mean, otherwise a seeded sample.
pub fn encode_shape(model: &ModelParams, x: &PointCloud, deterministic: bool, seed: u64) -> Result<LatentBundle> {
    let post = networks::encoder_forward(model, x)?;
    let z = if deterministic {
        GlobalLatent(post.mu().to_vec())
    } else {
        let noise = latent::sample_prior(seed, 1, post.dim()).remove(0);
        latent::reparameterize(&post, noise.as_slice())?
    };
    networks::split(model, &z)
}

/// Copies the selected parts' style latents (and optionally primitive latents)
/// from `reference` into `target`.
pub fn mix_bundles(
    target: &LatentBundle,
    reference: &LatentBundle,
    sel: &EditSelection,
    transfer_primitive: bool,
) -> Result<LatentBundle> {
    if target.num_parts() != reference.num_parts() {
        return Err(Error::Shape("bundles have different part counts".into()));
    }
    sel.validate(target.num_parts())?;
    let mut out = target.clone();
    for &m in &sel.part_indices {
        out.parts[m].z_y = reference.parts[m].z_y.clone();
        if transfer_primitive {
            out.parts[m].z_p = reference.parts[m].z_p.clone();
        }
    }
    if !sel.part_indices.is_empty() {
        out.z = None;
    }
    Ok(out)
}

/// Style-only part mixing, decoded.
pub fn mix_parts(
    model: &ModelParams,
    target: &LatentBundle,
    reference: &LatentBundle,
    sel: &EditSelection,
) -> Result<DecodedShape> {
    check_bundle(model, target)?;
    check_bundle(model, reference)?;
    networks::decode_bundle(model, &mix_bundles(target, reference, sel, false)?)
}

/// Replaces the selected parts' style latents with those of a fresh prior draw.
pub fn resample_bundle(model: &ModelParams, bundle: &LatentBundle, sel: &EditSelection, seed: u64) -> Result<LatentBundle> {
    check_bundle(model, bundle)?;
    sel.validate(bundle.num_parts())?;
    let fresh = networks::split(model, &latent::sample_prior(seed, 1, model.config().latent_dim).remove(0))?;
    let mut out = bundle.clone();
    for &m in &sel.part_indices {
        out.parts[m].z_y = fresh.parts[m].z_y.clone();
    }
    if !sel.part_indices.is_empty() {
        out.z = None;
    }
    Ok(out)
}

/// Resamples the selected parts' styles with poses and primitives fixed, decoded.
pub fn resample_parts(model: &ModelParams, bundle: &LatentBundle, sel: &EditSelection, seed: u64) -> Result<DecodedShape> {
    networks::decode_bundle(model, &resample_bundle(model, bundle, sel, seed)?)
}

fn check_weights(weights: &[f64]) -> Result<()> {
    if let Some(w) = weights.iter().find(|w| !(0.0..=1.0).contains(*w)) {
        return Err(Error::InvalidParameter(format!("interpolation weight {w} outside [0, 1]")));
    }
    Ok(())
}

/// Decodes `(1 - w) z1 + w z2` for each weight.
pub fn interpolate(model: &ModelParams, z1: &GlobalLatent, z2: &GlobalLatent, weights: &[f64]) -> Result<Vec<DecodedShape>> {
    check_weights(weights)?;
    weights.iter().map(|&w| networks::decode_shape(model, &z1.lerp(z2, w)?)).collect()
}

/// Part-wise interpolation of two bundles, which also works after edits.
pub fn interpolate_bundles(
    model: &ModelParams,
    a: &LatentBundle,
    b: &LatentBundle,
    weights: &[f64],
) -> Result<Vec<(LatentBundle, DecodedShape)>> {
    check_weights(weights)?;
    check_bundle(model, a)?;
    check_bundle(model, b)?;
    weights
        .iter()
        .map(|&w| {
            let bundle = a.lerp(b, w)?;
            let shape = networks::decode_bundle(model, &bundle)?;
            Ok((bundle, shape))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::networks::ModelConfig;

    fn model() -> ModelParams {
        ModelParams::new(ModelConfig { latent_dim: 64, seed: 4, ..ModelConfig::default() }).unwrap()
    }

    #[test]
    fn generate_examples() {
        let m = model();
        assert!(generate(&m, 1, 0).unwrap().is_empty());
        let a = generate(&m, 1, 5).unwrap();
        assert_eq!(a, generate(&m, 1, 5).unwrap());
        for s in &a {
            assert_eq!(s.assembled().0.len(), 768);
            assert_eq!(s.primitives().len(), 3);
        }
    }

    #[test]
    fn encode_examples() {
        let m = model();
        let x = generate(&m, 2, 1).unwrap()[0].assembled().0;
        let a = encode_shape(&m, &x, true, 0).unwrap();
        assert_eq!(a, encode_shape(&m, &x, true, 9).unwrap());
        assert_eq!(a.num_parts(), 3);
        assert!(a.parts.iter().all(|p| (p.z_y.len(), p.z_t.len(), p.z_p.len()) == (32, 8, 8)));
        assert_ne!(encode_shape(&m, &x, false, 1).unwrap(), encode_shape(&m, &x, false, 2).unwrap());
    }

    #[test]
    fn mixing_is_local() {
        let m = model();
        let g = generate_with_latents(&m, 3, 2).unwrap();
        let (target, reference) = (&g[0].0, &g[1].0);
        let plain = networks::decode_bundle(&m, target).unwrap();
        let none = EditSelection::new(vec![], EditMode::Mix);
        assert_eq!(mix_parts(&m, target, reference, &none).unwrap(), plain);

        let mixed = mix_parts(&m, target, reference, &EditSelection::new(vec![0], EditMode::Mix)).unwrap();
        assert_eq!(mixed.parts[1..], plain.parts[1..]);
        assert_eq!(mixed.parts[0].pose, plain.parts[0].pose);
        assert_eq!(mixed.parts[0].primitive, plain.parts[0].primitive);
        assert_eq!(mixed.parts[0].canonical, g[1].1.parts[0].canonical);

        let all = mix_parts(&m, target, reference, &EditSelection::new(vec![0, 1, 2], EditMode::Mix)).unwrap();
        for k in 0..3 {
            assert_eq!(all.parts[k].canonical, g[1].1.parts[k].canonical);
            assert_eq!(all.parts[k].pose, plain.parts[k].pose);
        }
        let bad = EditSelection { part_indices: vec![3], mode: EditMode::Mix };
        assert!(matches!(mix_parts(&m, target, reference, &bad), Err(Error::PartIndex { index: 3, parts: 3 })));
    }

    #[test]
    fn primitive_transfer_option() {
        let m = model();
        let g = generate_with_latents(&m, 3, 2).unwrap();
        let sel = EditSelection::new(vec![1], EditMode::Mix);
        let b = mix_bundles(&g[0].0, &g[1].0, &sel, true).unwrap();
        assert_eq!(b.parts[1].z_p, g[1].0.parts[1].z_p);
        assert_eq!(b.parts[1].z_t, g[0].0.parts[1].z_t);
        assert!(b.z.is_none());
    }

    #[test]
    fn resampling_keeps_poses() {
        let m = model();
        let (bundle, plain) = generate_with_latents(&m, 5, 1).unwrap().remove(0);
        let sel = EditSelection::new(vec![2], EditMode::Resample);
        let outs: Vec<DecodedShape> = (0..3).map(|s| resample_parts(&m, &bundle, &sel, s).unwrap()).collect();
        for o in &outs {
            for k in 0..3 {
                assert_eq!(o.parts[k].pose, plain.parts[k].pose);
            }
            assert_eq!(o.parts[..2], plain.parts[..2]);
        }
        assert_ne!(outs[0].parts[2].canonical, outs[1].parts[2].canonical);
        assert_ne!(outs[1].parts[2].canonical, outs[2].parts[2].canonical);
        let none = EditSelection::new(vec![], EditMode::Resample);
        assert_eq!(resample_parts(&m, &bundle, &none, 7).unwrap(), plain);
    }

    #[test]
    fn interpolation_examples() {
        let m = model();
        let z = latent::sample_prior(8, 2, 64);
        let ends = interpolate(&m, &z[0], &z[1], &[0.0, 1.0]).unwrap();
        assert_eq!(ends[0], networks::decode_shape(&m, &z[0]).unwrap());
        assert_eq!(ends[1], networks::decode_shape(&m, &z[1]).unwrap());
        assert_eq!(interpolate(&m, &z[0], &z[1], &[0.2, 0.5, 0.8]).unwrap().len(), 3);
        assert!(interpolate(&m, &z[0], &z[1], &[1.2]).is_err());

        let (b0, b1) = (networks::split(&m, &z[0]).unwrap(), networks::split(&m, &z[1]).unwrap());
        for w in [0.2, 0.5, 0.8] {
            let direct = networks::split(&m, &z[0].lerp(&z[1], w).unwrap()).unwrap().flatten();
            let partwise = b0.lerp(&b1, w).unwrap().flatten();
            for (a, b) in direct.iter().zip(&partwise) {
                assert!((a - b).abs() < 1e-6);
            }
        }
        let via_bundles = interpolate_bundles(&m, &b0, &b1, &[0.5]).unwrap();
        let via_global = interpolate(&m, &z[0], &z[1], &[0.5]).unwrap();
        let (a, b) = (via_bundles[0].1.assembled().0, via_global[0].assembled().0);
        assert!(a.to_tensor().max_abs_diff(&b.to_tensor()) < 1e-6);
    }
}
