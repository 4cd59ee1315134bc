//! Optimizer state, single training steps and the epoch loop.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::error::{Error, Result};
use crate::geometry::PointCloud;
use crate::losses::{self, LossBreakdown, LossWeights};
use crate::networks::{self, ModelConfig, ModelParams, NormMode};
use crate::tensor::Tensor;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub weights: LossWeights,
    pub points_per_cloud: usize,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub grad_clip: Option<f64>,
    /// Invoke the checkpoint hook every this many epochs.
    pub checkpoint_every: Option<usize>,
    /// Seed for shuffling, reparameterization noise and loss sampling.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            learning_rate: 1e-4,
            epochs: 1000,
            batch_size: 30,
            weights: LossWeights::default(),
            points_per_cloud: 2048,
            grad_clip: Some(10.0),
            checkpoint_every: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.weights.validate()?;
        let lr_ok = self.learning_rate.is_finite() && self.learning_rate > 0.0;
        let clip_ok = self.grad_clip.is_none_or(|c| c.is_finite() && c > 0.0);
        if !lr_ok || !clip_ok || self.batch_size == 0 || self.points_per_cloud == 0 || self.checkpoint_every == Some(0) {
            return Err(Error::InvalidParameter(
                "learning rate, batch size, points per cloud, clip norm and checkpoint cadence must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// First and second moment estimates of Adam, one pair per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl OptimizerState {
    pub fn new(model: &ModelParams) -> Self {
        let zeros = || model.store().tensors().iter().map(|t| Tensor::zeros(t.rows(), t.cols())).collect();
        Self { step: 0, m: zeros(), v: zeros() }
    }

    fn matches(&self, model: &ModelParams) -> bool {
        let shapes = model.store().tensors().iter().map(Tensor::shape);
        self.m.len() == model.store().len()
            && self.v.len() == model.store().len()
            && shapes.clone().zip(&self.m).all(|(s, m)| s == m.shape())
            && shapes.zip(&self.v).all(|(s, v)| s == v.shape())
    }
}

fn stack(batch: &[PointCloud], n: usize) -> Result<Tensor> {
    if batch.iter().any(|c| c.len() != n) {
        return Err(Error::Shape(format!("every cloud in a batch must have {n} points")));
    }
    let tensors: Vec<Tensor> = batch.iter().map(PointCloud::to_tensor).collect();
    Ok(Tensor::concat_rows(&tensors.iter().collect::<Vec<_>>()))
}

/// One Adam update on a batch; returns the batch-mean loss breakdown.
///
/// On a non-finite loss or gradient the model and optimizer are left untouched.
pub fn train_step(
    model: &mut ModelParams,
    opt: &mut OptimizerState,
    batch: &[PointCloud],
    cfg: &TrainConfig,
    step_seed: u64,
) -> Result<LossBreakdown> {
    if batch.is_empty() {
        return Err(Error::Empty("training batch"));
    }
    if !opt.matches(model) {
        return Err(Error::Shape("optimizer state does not match model parameters".into()));
    }
    let n = batch[0].len();
    let x = stack(batch, n)?;

    let tape = Tape::new();
    let p = model.bind(&tape, true);
    let enc = networks::encode_batch(model, &p, tape.constant(x), n, NormMode::Train);
    let vars = losses::batch_loss_var(model, &p, batch, enc.mu, enc.logvar, &cfg.weights, step_seed);
    let breakdown = vars.breakdown(&cfg.weights);
    if let Some(term) = breakdown.non_finite_term() {
        return Err(Error::NonFinite { term, step: opt.step });
    }

    let grads = tape.backward(vars.total);
    let mut g: Vec<Tensor> = p.vars().iter().map(|v| grads.wrt(*v)).collect();
    if !g.iter().all(Tensor::is_finite) {
        return Err(Error::NonFinite { term: "gradient", step: opt.step });
    }
    if let Some(max_norm) = cfg.grad_clip {
        let norm = g.iter().flat_map(|t| t.data()).map(|x| x * x).sum::<f64>().sqrt();
        if norm > max_norm {
            let s = max_norm / norm;
            g.iter_mut().for_each(|t| *t = t.scale(s));
        }
    }

    opt.step += 1;
    let t = opt.step as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    let lr = cfg.learning_rate;
    for (((param, grad), m), v) in model.store_mut().tensors_mut().iter_mut().zip(&g).zip(&mut opt.m).zip(&mut opt.v) {
        let (pd, gd) = (param.data_mut(), grad.data());
        for i in 0..gd.len() {
            let m_i = &mut m.data_mut()[i];
            *m_i = ADAM_BETA1 * *m_i + (1.0 - ADAM_BETA1) * gd[i];
            let m_hat = *m_i / c1;
            let v_i = &mut v.data_mut()[i];
            *v_i = ADAM_BETA2 * *v_i + (1.0 - ADAM_BETA2) * gd[i] * gd[i];
            let v_hat = *v_i / c2;
            pd[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
    model.update_running(&enc.batch_stats);
    Ok(breakdown)
}

/// Per-epoch averages, written to the training log as one JSON object per line.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Optimizer steps taken so far.
    pub step: u64,
    pub l_point: f64,
    pub l_prim: f64,
    pub l_overlap: f64,
    pub l_kl: f64,
    pub total: f64,
}

impl EpochRecord {
    fn new(epoch: usize, step: u64, b: &LossBreakdown) -> Self {
        Self { epoch, step, l_point: b.l_point, l_prim: b.l_prim, l_overlap: b.l_overlap, l_kl: b.l_kl, total: b.total }
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("record serializes")
    }
}

/// Everything the training loop owns.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: ModelParams,
    pub optimizer: OptimizerState,
    pub log: Vec<EpochRecord>,
}

impl TrainState {
    pub fn new(model: ModelParams) -> Self {
        let optimizer = OptimizerState::new(&model);
        Self { model, optimizer, log: Vec::new() }
    }
}

/// Hooks invoked by [`train`]. All methods default to no-ops.
pub trait TrainObserver {
    fn epoch_end(&mut self, _record: &EpochRecord) {}

    /// Called every `checkpoint_every` epochs and after the final epoch.
    fn checkpoint(&mut self, _state: &TrainState, _cfg: &TrainConfig) -> Result<()> {
        Ok(())
    }
}

impl TrainObserver for () {}

/// Writes each epoch record to the `log` facade.
pub struct LogObserver;

impl TrainObserver for LogObserver {
    fn epoch_end(&mut self, record: &EpochRecord) {
        log::info!("{}", record.to_json_line());
    }
}

fn mix(a: u64, b: u64) -> u64 {
    let mut x = a ^ b.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    x ^= x >> 33;
    x = x.wrapping_mul(0xff51_afd7_ed55_8ccd);
    x ^ (x >> 33)
}

/// Trains a freshly initialized model for `cfg.epochs` epochs.
pub fn train(dataset: &[PointCloud], cfg: &TrainConfig, observer: &mut dyn TrainObserver) -> Result<TrainState> {
    cfg.validate()?;
    let state = TrainState::new(ModelParams::new(cfg.model.clone())?);
    train_from(state, dataset, cfg, observer)
}

/// Continues training from an existing state for `cfg.epochs` further epochs.
pub fn train_from(
    mut state: TrainState,
    dataset: &[PointCloud],
    cfg: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<TrainState> {
    cfg.validate()?;
    if cfg.epochs == 0 {
        return Ok(state);
    }
    if dataset.is_empty() {
        return Err(Error::Empty("training dataset"));
    }
    if let Some(c) = dataset.iter().find(|c| c.len() != cfg.points_per_cloud) {
        return Err(Error::Shape(format!("cloud has {} points, expected {}", c.len(), cfg.points_per_cloud)));
    }
    let first_epoch = state.log.last().map_or(0, |r| r.epoch + 1);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    for epoch in first_epoch..first_epoch + cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, epoch as u64));
        order.shuffle(&mut rng);
        let mut sum = LossBreakdown::default();
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<PointCloud> = chunk.iter().map(|&i| dataset[i].clone()).collect();
            let step_seed = mix(cfg.seed ^ 0x7a1, state.optimizer.step);
            let b = train_step(&mut state.model, &mut state.optimizer, &batch, cfg, step_seed)?;
            let w = chunk.len() as f64 / dataset.len() as f64;
            sum.l_point += w * b.l_point;
            sum.l_prim += w * b.l_prim;
            sum.l_overlap += w * b.l_overlap;
            sum.l_kl += w * b.l_kl;
            sum.total += w * b.total;
        }
        let record = EpochRecord::new(epoch, state.optimizer.step, &sum);
        observer.epoch_end(&record);
        state.log.push(record);
        let done = epoch + 1 == first_epoch + cfg.epochs;
        if done || cfg.checkpoint_every.is_some_and(|k| (epoch + 1 - first_epoch).is_multiple_of(k)) {
            observer.checkpoint(&state, cfg)?;
        }
    }
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{self, SamplingScheme, SuperquadricParams};
    use crate::latent::PartDims;

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            model: ModelConfig {
                parts: 2,
                latent_dim: 12,
                part_dims: PartDims { style: 4, pose: 3, primitive: 3 },
                encoder_widths: vec![8, 16],
                tree_features: vec![4, 8, 3],
                tree_branching: vec![4, 8],
                loop_supports: 2,
                surface_samples: 16,
                seed: 3,
                ..ModelConfig::default()
            },
            learning_rate: 1e-2,
            epochs: 2,
            batch_size: 4,
            points_per_cloud: 32,
            weights: LossWeights { omega_o: 1e-3, ..LossWeights::default() },
            seed: 5,
            ..TrainConfig::default()
        }
    }

    fn clouds(n: usize, pts: usize) -> Vec<PointCloud> {
        (0..n)
            .map(|i| {
                let a = 0.3 + 0.05 * i as f64;
                let prim = SuperquadricParams::ellipsoid([a, 0.4, 0.2]).unwrap();
                geometry::sample_superquadric(&prim, pts, SamplingScheme::Random, i as u64).unwrap()
            })
            .collect()
    }

    #[test]
    fn zero_weights_leave_parameters_unchanged() {
        let cfg = TrainConfig { weights: LossWeights::zero(), ..small_cfg() };
        let mut model = ModelParams::new(cfg.model.clone()).unwrap();
        let before = model.store().clone();
        let mut opt = OptimizerState::new(&model);
        let b = train_step(&mut model, &mut opt, &clouds(3, 32), &cfg, 1).unwrap();
        assert_eq!(b.total, 0.0);
        assert_eq!(opt.step, 1);
        assert_eq!(model.store(), &before);
    }

    #[test]
    fn overfits_a_single_batch() {
        let cfg = small_cfg();
        let mut model = ModelParams::new(cfg.model.clone()).unwrap();
        let mut opt = OptimizerState::new(&model);
        let batch = clouds(4, 32);
        let first = train_step(&mut model, &mut opt, &batch, &cfg, 0).unwrap().total;
        let mut last = first;
        for s in 1..200 {
            last = train_step(&mut model, &mut opt, &batch, &cfg, s).unwrap().total;
            assert!(model.store().all_finite());
        }
        assert!(last < 0.5 * first, "{first} -> {last}");
    }

    #[test]
    fn training_is_deterministic() {
        let cfg = small_cfg();
        let data = clouds(6, 32);
        let a = train(&data, &cfg, &mut ()).unwrap();
        let b = train(&data, &cfg, &mut ()).unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(a.model.store(), b.model.store());
        assert_eq!(a.log.len(), 2);
        assert_eq!(a.log[1].step, 4);
    }

    #[test]
    fn zero_epochs_returns_initial_model() {
        let cfg = TrainConfig { epochs: 0, ..small_cfg() };
        let out = train(&[], &cfg, &mut ()).unwrap();
        assert!(out.log.is_empty());
        assert_eq!(out.model.store(), ModelParams::new(cfg.model.clone()).unwrap().store());
    }

    #[test]
    fn checkpoint_cadence() {
        struct Count(Vec<usize>);
        impl TrainObserver for Count {
            fn checkpoint(&mut self, state: &TrainState, _: &TrainConfig) -> Result<()> {
                self.0.push(state.log.len());
                Ok(())
            }
        }
        let cfg = TrainConfig { epochs: 5, checkpoint_every: Some(2), ..small_cfg() };
        let mut obs = Count(Vec::new());
        train(&clouds(4, 32), &cfg, &mut obs).unwrap();
        assert_eq!(obs.0, vec![2, 4, 5]);
    }

    #[test]
    fn non_finite_loss_names_the_term() {
        let cfg = small_cfg();
        let mut model = ModelParams::new(cfg.model.clone()).unwrap();
        let mut opt = OptimizerState::new(&model);
        for t in model.store_mut().tensors_mut() {
            t.data_mut().iter_mut().for_each(|x| *x = f64::NAN);
        }
        let err = train_step(&mut model, &mut opt, &clouds(2, 32), &cfg, 0).unwrap_err();
        assert!(matches!(err, Error::NonFinite { step: 0, .. }), "{err}");
        assert_eq!(opt.step, 0);
    }

    #[test]
    fn rejects_mismatched_clouds() {
        let cfg = small_cfg();
        let mut data = clouds(3, 32);
        data.push(clouds(1, 16).remove(0));
        assert!(matches!(train(&data, &cfg, &mut ()), Err(Error::Shape(_))));
    }
}
