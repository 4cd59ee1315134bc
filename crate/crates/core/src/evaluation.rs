//! Model-level evaluation: primitive segmentation, part MCD against labels,
//! and the reference baselines used to judge generated sets.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::LabeledCloud;
use crate::editing;
use crate::error::{Error, Result};
use crate::geometry::{Point, PointCloud};
use crate::losses;
use crate::metrics::{self, Distance};
use crate::networks::{self, ModelParams};

/// Labels each point of `cloud` with the part whose posed primitive surface is
/// nearest, after encoding the cloud with the posterior mean.
pub fn segment_by_primitives(model: &ModelParams, cloud: &PointCloud) -> Result<Vec<usize>> {
    let bundle = editing::encode_shape(model, cloud, true, 0)?;
    let decoded = networks::decode_bundle(model, &bundle)?;
    let surfaces: Vec<PointCloud> = decoded.parts.iter().map(|p| p.surface.clone()).collect();
    Ok(losses::assign_points_to_parts(cloud, &surfaces))
}

/// Splits a cloud into its non-empty label groups.
pub fn split_by_label(cloud: &PointCloud, labels: &[usize], parts: usize) -> Result<Vec<PointCloud>> {
    if labels.len() != cloud.len() {
        return Err(Error::Shape(format!("{} labels for {} points", labels.len(), cloud.len())));
    }
    let mut groups: Vec<Vec<Point>> = vec![Vec::new(); parts];
    for (p, &l) in cloud.points().iter().zip(labels) {
        groups.get_mut(l).ok_or(Error::PartIndex { index: l, parts })?.push(*p);
    }
    groups.into_iter().filter(|g| !g.is_empty()).map(PointCloud::new).collect()
}

fn ground_truth(c: &LabeledCloud, parts: usize) -> Result<Vec<PointCloud>> {
    let labels = c.labels.as_ref().ok_or(Error::Empty("ground-truth labels"))?;
    split_by_label(&c.cloud, labels, parts)
}

fn mean_mcd(clouds: &[LabeledCloud], gt_parts: usize, mut predict: impl FnMut(&LabeledCloud) -> Result<Vec<PointCloud>>) -> Result<f64> {
    if clouds.is_empty() {
        return Err(Error::Empty("labeled clouds"));
    }
    let mut total = 0.0;
    for c in clouds {
        total += metrics::mcd(&predict(c)?, &ground_truth(c, gt_parts)?)?;
    }
    Ok(total / clouds.len() as f64)
}

/// Mean MCD between the model's primitive segmentation and the ground-truth labels.
pub fn learned_part_mcd(model: &ModelParams, clouds: &[LabeledCloud], gt_parts: usize) -> Result<f64> {
    let parts = model.config().parts;
    mean_mcd(clouds, gt_parts, |c| split_by_label(&c.cloud, &segment_by_primitives(model, &c.cloud)?, parts))
}

/// Mean MCD of a uniform random `parts`-way partition of each cloud.
pub fn random_partition_mcd(clouds: &[LabeledCloud], gt_parts: usize, parts: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    mean_mcd(clouds, gt_parts, |c| {
        let labels: Vec<usize> = (0..c.cloud.len()).map(|_| rng.random_range(0..parts)).collect();
        split_by_label(&c.cloud, &labels, parts)
    })
}

/// Uniform subsample without replacement; clouds already at or below `n` are returned whole.
pub fn subsample(cloud: &PointCloud, n: usize, seed: u64) -> PointCloud {
    if cloud.len() <= n {
        return cloud.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = index::sample(&mut rng, cloud.len(), n).into_vec();
    idx.sort_unstable();
    cloud.select(&idx).expect("indices in range")
}

/// `n` prior samples, each assembled and subsampled to `points` points.
pub fn generated_clouds(model: &ModelParams, seed: u64, n: usize, points: usize) -> Result<Vec<PointCloud>> {
    Ok(editing::generate(model, seed, n)?
        .iter()
        .enumerate()
        .map(|(i, s)| subsample(&s.assembled().0, points, seed ^ i as u64))
        .collect())
}

/// Index of the Chamfer medoid: the member with the smallest summed distance to the rest.
pub fn medoid(clouds: &[PointCloud]) -> Result<usize> {
    if clouds.is_empty() {
        return Err(Error::Empty("cloud set"));
    }
    let d = metrics::pairwise(clouds, clouds, Distance::Cd)?;
    Ok((0..clouds.len())
        .min_by(|&a, &b| d[a].iter().sum::<f64>().total_cmp(&d[b].iter().sum::<f64>()))
        .expect("non-empty"))
}

/// The mean occupancy shape of an aligned set: all points pooled, then
/// subsampled to `points`.
pub fn mean_shape(clouds: &[PointCloud], points: usize, seed: u64) -> Result<PointCloud> {
    let pooled: Vec<Point> = clouds.iter().flat_map(|c| c.points().iter().copied()).collect();
    Ok(subsample(&PointCloud::new(pooled)?, points, seed))
}

/// MMD-CD of a generator that always outputs the same cloud.
pub fn constant_shape_mmd(shape: &PointCloud, reference: &[PointCloud]) -> Result<f64> {
    metrics::mmd(std::slice::from_ref(shape), reference, Distance::Cd)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data;

    #[test]
    fn ground_truth_segmentation_scores_zero() {
        let clouds = data::synth_toyshapes("toychair", 3, 128, 4).unwrap();
        let total = mean_mcd(&clouds, 3, |c| ground_truth(c, 3)).unwrap();
        assert_eq!(total, 0.0);
        let random = random_partition_mcd(&clouds, 3, 3, 1).unwrap();
        assert!(random > 0.0);
    }

    #[test]
    fn split_rejects_bad_labels() {
        let cloud = PointCloud::new(vec![[0.0; 3], [1.0; 3]]).unwrap();
        assert!(matches!(split_by_label(&cloud, &[0, 5], 3), Err(Error::PartIndex { index: 5, parts: 3 })));
        assert!(split_by_label(&cloud, &[0], 3).is_err());
        assert_eq!(split_by_label(&cloud, &[2, 2], 3).unwrap().len(), 1);
    }

    #[test]
    fn medoid_is_central() {
        let c = |x: f64| PointCloud::new(vec![[x, 0.0, 0.0]]).unwrap();
        let set = vec![c(0.0), c(1.0), c(1.1), c(5.0)];
        // Squared distances pull the medoid toward the outlier.
        assert_eq!(medoid(&set).unwrap(), 2);
        assert!(subsample(&set[0], 10, 0).len() == 1);
        let mean = mean_shape(&set, 2, 0).unwrap();
        assert_eq!(mean.len(), 2);
        assert!(mean.points().iter().all(|p| [0.0, 1.0, 1.1, 5.0].contains(&p[0])));
    }
}
