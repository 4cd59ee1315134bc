//! Encoder and per-part decoder branches.
//!
//! Parameters live in a flat, named [`ParamStore`]; the architecture refers to
//! them by [`ParamId`]. A forward pass binds every parameter to a tape
//! variable (tracked for training, constant for inference) and runs the whole
//! batch through the graph.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::geometry::{
    self, PointCloud, Pose, PoseVars, PrimitiveVars, SamplingScheme, SuperquadricParams, SurfaceAngles,
    ALPHA_RANGE, EPSILON_RANGE, TAPER_RANGE,
};
use crate::latent::{self, GlobalLatent, LatentBundle, PartDims, PosteriorParams};
use crate::tensor::Tensor;

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;
const QUAT_MIN_NORM: f64 = 1e-8;
const QUAT_FALLBACK: [f64; 4] = [1.0, 0.0, 0.0, 0.0];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Number of parts `M`.
    pub parts: usize,
    /// Global latent width `D_z`.
    pub latent_dim: usize,
    pub part_dims: PartDims,
    pub encoder_widths: Vec<usize>,
    pub leaky_slope: f64,
    /// Node feature width per tree level; the first equals the style latent width.
    pub tree_features: Vec<usize>,
    /// Children per node between consecutive tree levels.
    pub tree_branching: Vec<usize>,
    pub loop_supports: usize,
    pub max_translation: f64,
    /// `false` selects the no-map ablation, which requires `latent_dim = parts * part_dims.total()`.
    pub use_global_map: bool,
    /// Surface samples drawn per primitive.
    pub surface_samples: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            parts: 3,
            latent_dim: 256,
            part_dims: PartDims::default(),
            encoder_widths: vec![64, 128, 128, 256],
            leaky_slope: 0.2,
            tree_features: vec![32, 32, 16, 16, 3],
            tree_branching: vec![1, 2, 4, 32],
            loop_supports: 10,
            max_translation: 1.0,
            use_global_map: true,
            surface_samples: 64,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidParameter(msg));
        if self.parts == 0 || self.latent_dim == 0 || self.surface_samples == 0 {
            return bad("parts, latent_dim and surface_samples must be positive".into());
        }
        if self.encoder_widths.is_empty() || self.encoder_widths.contains(&0) {
            return bad("encoder widths must be non-empty and positive".into());
        }
        if self.tree_features.len() != self.tree_branching.len() + 1 {
            return bad("tree needs one more feature width than branching factors".into());
        }
        if self.tree_features.first() != Some(&self.part_dims.style) {
            return bad("tree root width must equal the style latent width".into());
        }
        if self.tree_features.last() != Some(&3) {
            return bad("tree leaves must be 3-D points".into());
        }
        if self.tree_branching.contains(&0) || self.loop_supports == 0 {
            return bad("branching factors and loop supports must be positive".into());
        }
        if !self.use_global_map && self.latent_dim != self.parts * self.part_dims.total() {
            return bad(format!(
                "without the global map latent_dim must be {} (parts x part width), got {}",
                self.parts * self.part_dims.total(),
                self.latent_dim
            ));
        }
        Ok(())
    }

    /// Points produced per part by the tree decoder.
    pub fn points_per_part(&self) -> usize {
        self.tree_branching.iter().product()
    }

    pub fn part_latent_width(&self) -> usize {
        self.parts * self.part_dims.total()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Named trainable tensors in creation order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    fn add(&mut self, name: String, t: Tensor) -> ParamId {
        self.names.push(name);
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }
}

#[derive(Clone, Debug)]
struct Linear {
    weight: ParamId,
    bias: ParamId,
}

#[derive(Clone, Debug)]
struct EncoderStage {
    linear: Linear,
    gamma: ParamId,
    beta: ParamId,
}

#[derive(Clone, Debug)]
struct Encoder {
    stages: Vec<EncoderStage>,
    mu: Linear,
    logvar: Linear,
}

#[derive(Clone, Debug)]
struct TreeLevel {
    branch: ParamId,
    ancestors: Vec<ParamId>,
    loop_in: ParamId,
    loop_out: ParamId,
    bias: ParamId,
}

#[derive(Clone, Debug)]
struct Branch {
    tree: Vec<TreeLevel>,
    pose: Linear,
    primitive: Linear,
}

#[derive(Clone, Debug)]
struct Architecture {
    encoder: Encoder,
    global_map: Option<ParamId>,
    branches: Vec<Branch>,
}

/// Running batch-norm statistics of one encoder stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// All model state: configuration, trainable parameters and normalization buffers.
#[derive(Clone, Debug)]
pub struct ModelParams {
    config: ModelConfig,
    store: ParamStore,
    arch: Architecture,
    running: Vec<RunningStats>,
}

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    fn normal(&mut self, rows: usize, cols: usize, std: f64) -> Tensor {
        let n = Normal::new(0.0, std).expect("valid std");
        Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| n.sample(&mut self.rng)).collect())
    }
}

fn linear(store: &mut ParamStore, init: &mut Init, name: &str, inp: usize, out: usize, gain: f64) -> Linear {
    let weight = store.add(format!("{name}.weight"), init.normal(inp, out, gain / (inp as f64).sqrt()));
    let bias = store.add(format!("{name}.bias"), Tensor::zeros(1, out));
    Linear { weight, bias }
}

impl ModelParams {
    /// Freshly initialized parameters, deterministic in `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::default();
        let mut init = Init { rng: ChaCha8Rng::seed_from_u64(config.seed) };

        let mut stages = Vec::new();
        let mut width = 3;
        for (i, &w) in config.encoder_widths.iter().enumerate() {
            let linear = linear(&mut store, &mut init, &format!("encoder.stage{i}"), width, w, 1.0);
            let gamma = store.add(format!("encoder.stage{i}.bn.gamma"), Tensor::full(1, w, 1.0));
            let beta = store.add(format!("encoder.stage{i}.bn.beta"), Tensor::zeros(1, w));
            stages.push(EncoderStage { linear, gamma, beta });
            width = w;
        }
        let d_z = config.latent_dim;
        let mu = linear(&mut store, &mut init, "encoder.mu", width, d_z, 0.1);
        let logvar = linear(&mut store, &mut init, "encoder.logvar", width, d_z, 0.1);
        let encoder = Encoder { stages, mu, logvar };

        let global_map = config.use_global_map.then(|| {
            let a = latent::init_global_map(config.parts, &config.part_dims, d_z, config.seed ^ 0xa11ce);
            store.add("global_map".into(), a)
        });

        let dims = config.part_dims;
        let feats = &config.tree_features;
        let k = config.loop_supports;
        let mut branches = Vec::new();
        for m in 0..config.parts {
            let mut tree = Vec::new();
            for (l, &b) in config.tree_branching.iter().enumerate() {
                let (d, next) = (feats[l], feats[l + 1]);
                let p = format!("part{m}.tree{l}");
                let branch = store.add(format!("{p}.branch"), init.normal(d, b * d, 1.0 / (d as f64).sqrt()));
                let ancestors = (0..=l)
                    .map(|a| {
                        let std = 1.0 / (feats[a] as f64).sqrt();
                        store.add(format!("{p}.ancestor{a}"), init.normal(feats[a], next, std))
                    })
                    .collect();
                let loop_in = store.add(format!("{p}.loop_in"), init.normal(d, k * d, 1.0 / (d as f64).sqrt()));
                let loop_out =
                    store.add(format!("{p}.loop_out"), init.normal(k * d, next, 1.0 / ((k * d) as f64).sqrt()));
                let bias = store.add(format!("{p}.bias"), Tensor::zeros(1, next));
                tree.push(TreeLevel { branch, ancestors, loop_in, loop_out, bias });
            }

            let pose = linear(&mut store, &mut init, &format!("part{m}.pose"), dims.pose, 7, 0.5);
            let mut pose_bias = vec![1.0, 0.0, 0.0, 0.0];
            pose_bias.extend(init.normal(1, 3, 0.5).into_data());
            store.tensors[pose.bias.0] = Tensor::row(&pose_bias);

            let primitive = linear(&mut store, &mut init, &format!("part{m}.primitive"), dims.primitive, 7, 0.5);
            // Start from small ellipsoids: alpha ~ 0.25, epsilon = 1, no taper.
            let a0 = logit((0.25 - ALPHA_RANGE.0) / (ALPHA_RANGE.1 - ALPHA_RANGE.0));
            store.tensors[primitive.bias.0] = Tensor::row(&[a0, a0, a0, 0.0, 0.0, 0.0, 0.0]);
            branches.push(Branch { tree, pose, primitive });
        }

        let running = config
            .encoder_widths
            .iter()
            .map(|&w| RunningStats { mean: vec![0.0; w], var: vec![1.0; w] })
            .collect();
        Ok(Self { config, store, arch: Architecture { encoder, global_map, branches }, running })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn running_stats(&self) -> &[RunningStats] {
        &self.running
    }

    /// Replaces the normalization buffers; lengths must match the encoder widths.
    pub fn set_running_stats(&mut self, stats: Vec<RunningStats>) -> Result<()> {
        let ok = stats.len() == self.config.encoder_widths.len()
            && stats
                .iter()
                .zip(&self.config.encoder_widths)
                .all(|(s, &w)| s.mean.len() == w && s.var.len() == w);
        if !ok {
            return Err(Error::Shape("running statistics do not match encoder widths".into()));
        }
        self.running = stats;
        Ok(())
    }

    pub fn global_map(&self) -> Option<&Tensor> {
        self.arch.global_map.map(|id| self.store.get(id))
    }

    /// Overwrites the global map (test fixtures).
    pub fn set_global_map(&mut self, a: Tensor) -> Result<()> {
        let id = self
            .arch
            .global_map
            .ok_or_else(|| Error::InvalidParameter("model has no global map".into()))?;
        if a.shape() != self.store.get(id).shape() {
            return Err(Error::Shape(format!("global map must be {:?}", self.store.get(id).shape())));
        }
        self.store.tensors[id.0] = a;
        Ok(())
    }

    /// Parameter ids owned by part `m`'s branch.
    pub fn branch_param_ids(&self, m: usize) -> Vec<ParamId> {
        let b = &self.arch.branches[m];
        let mut ids = Vec::new();
        for level in &b.tree {
            ids.extend([level.branch, level.loop_in, level.loop_out, level.bias]);
            ids.extend(&level.ancestors);
        }
        ids.extend([b.pose.weight, b.pose.bias, b.primitive.weight, b.primitive.bias]);
        ids
    }

    /// Binds every parameter to the tape; `trainable` selects tracked variables.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> Bound<'t> {
        let vars = self
            .store
            .tensors
            .iter()
            .map(|t| if trainable { tape.var(t.clone()) } else { tape.constant(t.clone()) })
            .collect();
        Bound { tape, vars }
    }

    pub(crate) fn update_running(&mut self, batch: &[RunningStats]) {
        for (run, b) in self.running.iter_mut().zip(batch) {
            for (r, x) in run.mean.iter_mut().zip(&b.mean) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * x;
            }
            for (r, x) in run.var.iter_mut().zip(&b.var) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * x;
            }
        }
    }
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Parameters bound to a tape.
pub struct Bound<'t> {
    tape: &'t Tape,
    vars: Vec<Var<'t>>,
}

impl<'t> Bound<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn var(&self, id: ParamId) -> Var<'t> {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var<'t>] {
        &self.vars
    }

    fn linear(&self, l: &Linear, x: Var<'t>) -> Var<'t> {
        x.matmul(self.var(l.weight)) + self.var(l.bias)
    }
}

/// Batch-norm behaviour of an encoder pass.
pub enum NormMode<'a> {
    /// Normalize with batch statistics and report them.
    Train,
    /// Normalize with stored running statistics.
    Eval(&'a [RunningStats]),
}

pub struct EncoderOutput<'t> {
    pub mu: Var<'t>,
    pub logvar: Var<'t>,
    /// Batch statistics per stage (train mode only).
    pub batch_stats: Vec<RunningStats>,
}

/// Encodes `B` clouds of `n` points each, stacked as a `(B*n) x 3` tensor.
pub fn encode_batch<'t>(
    model: &ModelParams,
    p: &Bound<'t>,
    points: Var<'t>,
    n: usize,
    mode: NormMode<'_>,
) -> EncoderOutput<'t> {
    let tape = p.tape;
    let enc = &model.arch.encoder;
    let mut h = points;
    let mut batch_stats = Vec::new();
    for (i, stage) in enc.stages.iter().enumerate() {
        let pre = p.linear(&stage.linear, h);
        let normed = match mode {
            NormMode::Train => {
                let mean = pre.mean_rows();
                let centered = pre - mean;
                let var = centered.square().mean_rows();
                batch_stats.push(RunningStats {
                    mean: mean.value().data().to_vec(),
                    var: var.value().data().to_vec(),
                });
                centered / var.add_scalar(BN_EPS).sqrt()
            }
            NormMode::Eval(stats) => {
                let s = &stats[i];
                let mean = tape.constant(Tensor::row(&s.mean));
                let inv_std: Vec<f64> = s.var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
                (pre - mean) * tape.constant(Tensor::row(&inv_std))
            }
        };
        h = (normed * p.var(stage.gamma) + p.var(stage.beta)).leaky_relu(model.config.leaky_slope);
    }
    let pooled = h.block_max_rows(n);
    let (lo, hi) = latent::LOGVAR_RANGE;
    EncoderOutput {
        mu: p.linear(&enc.mu, pooled),
        logvar: p.linear(&enc.logvar, pooled).clamp(lo, hi),
        batch_stats,
    }
}

/// Maps a `B x D_z` batch of global latents to `B x (M * part width)` part latents.
pub fn split_batch<'t>(model: &ModelParams, p: &Bound<'t>, z: Var<'t>) -> Var<'t> {
    match model.arch.global_map {
        Some(a) => z.matmul(p.var(a).transpose()),
        None => z,
    }
}

/// Differentiable outputs of one part branch for a batch of `B` shapes.
#[derive(Clone, Copy, Debug)]
pub struct PartVars<'t> {
    /// `(B * points_per_part) x 3`, canonical frame.
    pub points: Var<'t>,
    /// `B x 4` unit quaternions.
    pub q: Var<'t>,
    /// `B x 3`.
    pub t: Var<'t>,
    /// `B x 3`.
    pub alpha: Var<'t>,
    /// `B x 2`.
    pub epsilon: Var<'t>,
    /// `B x 2`.
    pub taper: Var<'t>,
}

impl<'t> PartVars<'t> {
    pub fn pose(&self, b: usize) -> PoseVars<'t> {
        PoseVars { q: self.q.rows_range(b..b + 1), t: self.t.rows_range(b..b + 1) }
    }

    pub fn primitive(&self, b: usize) -> PrimitiveVars<'t> {
        PrimitiveVars {
            alpha: self.alpha.rows_range(b..b + 1),
            epsilon: self.epsilon.rows_range(b..b + 1),
            taper: self.taper.rows_range(b..b + 1),
        }
    }

    pub fn canonical_points(&self, b: usize, per_part: usize) -> Var<'t> {
        self.points.rows_range(b * per_part..(b + 1) * per_part)
    }
}

/// Tree-structured point generator: style latents `B x d0` to `(B * 256) x 3`.
fn tree_forward<'t>(model: &ModelParams, p: &Bound<'t>, levels: &[TreeLevel], z_y: Var<'t>) -> Var<'t> {
    let cfg = &model.config;
    let depth = levels.len();
    let mut feats: Vec<Var<'t>> = vec![z_y];
    let mut nodes = vec![1usize];
    for (l, level) in levels.iter().enumerate() {
        let parent = feats[l];
        let (d, b) = (cfg.tree_features[l], cfg.tree_branching[l]);
        let rows = parent.rows();
        let children = parent.matmul(p.var(level.branch)).reshape(rows * b, d);
        let child_nodes = nodes[l] * b;
        let mut acc = children.matmul(p.var(level.loop_in)).matmul(p.var(level.loop_out));
        for (a, &u) in level.ancestors.iter().enumerate() {
            let term = feats[a].matmul(p.var(u)).repeat_rows(child_nodes / nodes[a]);
            acc = acc + term;
        }
        acc = acc + p.var(level.bias);
        if l + 1 < depth {
            acc = acc.leaky_relu(cfg.leaky_slope);
        }
        feats.push(acc);
        nodes.push(child_nodes);
    }
    feats[depth]
}

fn pose_forward<'t>(model: &ModelParams, p: &Bound<'t>, l: &Linear, z_t: Var<'t>) -> (Var<'t>, Var<'t>) {
    let raw = p.linear(l, z_t);
    let q = raw.cols_range(0..4).normalize_rows(QUAT_MIN_NORM, QUAT_FALLBACK.to_vec());
    let t = raw.cols_range(4..7).tanh().scale(model.config.max_translation);
    (q, t)
}

fn primitive_forward<'t>(p: &Bound<'t>, l: &Linear, z_p: Var<'t>) -> (Var<'t>, Var<'t>, Var<'t>) {
    let raw = p.linear(l, z_p);
    let squash = |v: Var<'t>, (lo, hi): (f64, f64)| v.sigmoid().scale(hi - lo).add_scalar(lo);
    let alpha = squash(raw.cols_range(0..3), ALPHA_RANGE);
    let epsilon = squash(raw.cols_range(3..5), EPSILON_RANGE);
    let taper = raw.cols_range(5..7).tanh().scale(TAPER_RANGE.1);
    (alpha, epsilon, taper)
}

/// Runs every part branch on `B x (M * part width)` part latents.
pub fn decode_parts<'t>(model: &ModelParams, p: &Bound<'t>, zl: Var<'t>) -> Vec<PartVars<'t>> {
    let dims = model.config.part_dims;
    model
        .arch
        .branches
        .iter()
        .enumerate()
        .map(|(m, branch)| {
            let off = m * dims.total();
            let z_y = zl.cols_range(off..off + dims.style);
            let z_t = zl.cols_range(off + dims.style..off + dims.style + dims.pose);
            let z_p = zl.cols_range(off + dims.style + dims.pose..off + dims.total());
            let points = tree_forward(model, p, &branch.tree, z_y);
            let (q, t) = pose_forward(model, p, &branch.pose, z_t);
            let (alpha, epsilon, taper) = primitive_forward(p, &branch.primitive, z_p);
            PartVars { points, q, t, alpha, epsilon, taper }
        })
        .collect()
}

/// Encoder in evaluation mode.
pub fn encoder_forward(model: &ModelParams, cloud: &PointCloud) -> Result<PosteriorParams> {
    let tape = Tape::new();
    let p = model.bind(&tape, false);
    let x = tape.constant(cloud.to_tensor());
    let out = encode_batch(model, &p, x, cloud.len(), NormMode::Eval(&model.running));
    PosteriorParams::new(out.mu.value().data().to_vec(), out.logvar.value().data().to_vec())
}

fn check_len(v: &[f64], n: usize, what: &str) -> Result<()> {
    if v.len() != n {
        return Err(Error::Shape(format!("{what} must have {n} entries, got {}", v.len())));
    }
    Ok(())
}

fn single_part_model_check(model: &ModelParams, part: usize) -> Result<()> {
    if part >= model.config.parts {
        return Err(Error::PartIndex { index: part, parts: model.config.parts });
    }
    Ok(())
}

/// Point branch of part `part` on one style latent.
pub fn point_decoder_forward(model: &ModelParams, part: usize, z_y: &[f64]) -> Result<PointCloud> {
    single_part_model_check(model, part)?;
    check_len(z_y, model.config.part_dims.style, "style latent")?;
    let tape = Tape::new();
    let p = model.bind(&tape, false);
    let out = tree_forward(model, &p, &model.arch.branches[part].tree, tape.constant(Tensor::row(z_y)));
    PointCloud::from_tensor(&out.value())
}

/// Pose branch of part `part` on one pose latent.
pub fn pose_decoder_forward(model: &ModelParams, part: usize, z_t: &[f64]) -> Result<Pose> {
    single_part_model_check(model, part)?;
    check_len(z_t, model.config.part_dims.pose, "pose latent")?;
    let tape = Tape::new();
    let p = model.bind(&tape, false);
    let (q, t) = pose_forward(model, &p, &model.arch.branches[part].pose, tape.constant(Tensor::row(z_t)));
    Ok(PoseVars { q, t }.to_pose())
}

/// Primitive branch of part `part` on one primitive latent.
pub fn primitive_decoder_forward(model: &ModelParams, part: usize, z_p: &[f64]) -> Result<SuperquadricParams> {
    single_part_model_check(model, part)?;
    check_len(z_p, model.config.part_dims.primitive, "primitive latent")?;
    let tape = Tape::new();
    let p = model.bind(&tape, false);
    let (alpha, epsilon, taper) =
        primitive_forward(&p, &model.arch.branches[part].primitive, tape.constant(Tensor::row(z_p)));
    Ok(PrimitiveVars { alpha, epsilon, taper }.to_params())
}

/// One decoded part: canonical points, primitive, pose and their world-frame images.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodedPart {
    pub canonical: PointCloud,
    pub primitive: SuperquadricParams,
    pub pose: Pose,
    /// `T(canonical)`.
    pub world: PointCloud,
    /// Posed primitive surface samples.
    pub surface: PointCloud,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodedShape {
    pub parts: Vec<DecodedPart>,
}

impl DecodedShape {
    /// Union of all parts' world points with each point's part index.
    pub fn assembled(&self) -> (PointCloud, Vec<usize>) {
        let mut points = Vec::new();
        let mut labels = Vec::new();
        for (m, part) in self.parts.iter().enumerate() {
            points.extend_from_slice(part.world.points());
            labels.extend(std::iter::repeat_n(m, part.world.len()));
        }
        (PointCloud::new(points).expect("decoded parts are non-empty"), labels)
    }

    pub fn primitives(&self) -> Vec<(SuperquadricParams, Pose)> {
        self.parts.iter().map(|p| (p.primitive, p.pose)).collect()
    }
}

/// Decodes part latents (bypassing the global map), sampling primitive surfaces on a grid.
pub fn decode_bundle(model: &ModelParams, bundle: &LatentBundle) -> Result<DecodedShape> {
    let grid = SurfaceAngles::new(model.config.surface_samples, SamplingScheme::Grid, 0)?;
    decode_bundle_with_angles(model, bundle, &vec![grid; model.config.parts])
}

/// Like [`decode_bundle`] with explicit surface sample angles per part.
pub fn decode_bundle_with_angles(
    model: &ModelParams,
    bundle: &LatentBundle,
    angles: &[SurfaceAngles],
) -> Result<DecodedShape> {
    let cfg = &model.config;
    if bundle.num_parts() != cfg.parts || angles.len() != cfg.parts {
        return Err(Error::Shape(format!(
            "bundle has {} parts and {} angle sets, model {}",
            bundle.num_parts(),
            angles.len(),
            cfg.parts
        )));
    }
    let flat = bundle.flatten();
    check_len(&flat, cfg.part_latent_width(), "part latents")?;
    let tape = Tape::new();
    let p = model.bind(&tape, false);
    let zl = tape.constant(Tensor::row(&flat));
    let parts = decode_parts(model, &p, zl)
        .iter()
        .zip(angles)
        .map(|(pv, angles)| {
            let canonical = PointCloud::from_tensor(&pv.points.value())?;
            let primitive = pv.primitive(0).to_params();
            let pose = pv.pose(0).to_pose();
            let world = geometry::apply_pose(&pose, &canonical, geometry::Direction::Forward)?;
            let surface =
                geometry::apply_pose(&pose, &geometry::sample_at(&primitive, angles), geometry::Direction::Forward)?;
            Ok(DecodedPart { canonical, primitive, pose, world, surface })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DecodedShape { parts })
}

/// Splits a global latent into part latents with the model's map (or slicing in the ablation).
pub fn split(model: &ModelParams, z: &GlobalLatent) -> Result<LatentBundle> {
    let cfg = &model.config;
    if z.dim() != cfg.latent_dim {
        return Err(Error::Shape(format!("latent has {} dims, model {}", z.dim(), cfg.latent_dim)));
    }
    match model.global_map() {
        Some(a) => latent::split_latent(a, z, &cfg.part_dims, cfg.parts),
        None => latent::slice_latent(z, &cfg.part_dims, cfg.parts),
    }
}

pub fn decode_shape(model: &ModelParams, z: &GlobalLatent) -> Result<DecodedShape> {
    decode_bundle(model, &split(model, z)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::gradcheck::max_rel_error;

    fn small_config() -> ModelConfig {
        ModelConfig {
            parts: 2,
            latent_dim: 12,
            part_dims: PartDims { style: 4, pose: 3, primitive: 3 },
            encoder_widths: vec![8, 16],
            tree_features: vec![4, 4, 3],
            tree_branching: vec![2, 4],
            loop_supports: 2,
            surface_samples: 16,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn default_config_is_valid() {
        let cfg = ModelConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.points_per_part(), 256);
        assert_eq!(cfg.part_latent_width(), 144);
        let bad = ModelConfig { use_global_map: false, ..ModelConfig::default() };
        assert!(bad.validate().is_err());
        let ok = ModelConfig { use_global_map: false, latent_dim: 144, ..ModelConfig::default() };
        ok.validate().unwrap();
    }

    #[test]
    fn encoder_output_shape_on_paper_sized_input() {
        let model = ModelParams::new(ModelConfig::default()).unwrap();
        let cloud = geometry::sample_superquadric(
            &SuperquadricParams::ellipsoid([0.5, 0.3, 0.2]).unwrap(),
            2048,
            SamplingScheme::Random,
            1,
        )
        .unwrap();
        let post = encoder_forward(&model, &cloud).unwrap();
        assert_eq!(post.mu().len(), 256);
        assert_eq!(post.logvar().len(), 256);
    }

    #[test]
    fn encoder_is_permutation_and_duplication_invariant() {
        let model = ModelParams::new(small_config()).unwrap();
        let pts: Vec<[f64; 3]> = (0..40).map(|i| {
            let f = i as f64;
            [(f * 0.37).sin(), (f * 0.91).cos(), (f * 0.13).sin()]
        }).collect();
        let cloud = PointCloud::new(pts.clone()).unwrap();
        let mut rev = pts.clone();
        rev.reverse();
        let mut doubled = pts.clone();
        doubled.extend_from_slice(&pts);
        let a = encoder_forward(&model, &cloud).unwrap();
        let b = encoder_forward(&model, &PointCloud::new(rev).unwrap()).unwrap();
        let c = encoder_forward(&model, &PointCloud::new(doubled).unwrap()).unwrap();
        for (x, y) in a.mu().iter().zip(b.mu()).chain(a.mu().iter().zip(c.mu())) {
            assert!((x - y).abs() < 1e-6);
        }
        for (x, y) in a.logvar().iter().zip(b.logvar()).chain(a.logvar().iter().zip(c.logvar())) {
            assert!((x - y).abs() < 1e-6);
        }
        // Oracle for the duplication case: max over a multiset ignores multiplicity.
        assert_eq!(a, c);
    }

    #[test]
    fn point_decoder_shape_and_determinism() {
        let model = ModelParams::new(ModelConfig::default()).unwrap();
        let z: Vec<f64> = (0..32).map(|i| (i as f64 * 0.3).sin()).collect();
        let a = point_decoder_forward(&model, 1, &z).unwrap();
        assert_eq!(a.len(), 256);
        assert!(a.points().iter().flatten().all(|x| x.is_finite()));
        assert_eq!(a, point_decoder_forward(&model, 1, &z).unwrap());
        assert!(point_decoder_forward(&model, 3, &z).is_err());
        assert!(point_decoder_forward(&model, 0, &z[..5]).is_err());
    }

    fn zero_params(model: &mut ModelParams, part: usize) {
        for id in model.branch_param_ids(part) {
            let t = &mut model.store.tensors[id.0];
            *t = Tensor::zeros(t.rows(), t.cols());
        }
    }

    #[test]
    fn zero_pose_and_primitive_layers() {
        let mut model = ModelParams::new(small_config()).unwrap();
        zero_params(&mut model, 0);
        let pose = pose_decoder_forward(&model, 0, &[0.4, -1.0, 2.0]).unwrap();
        assert_eq!(pose.q(), [1.0, 0.0, 0.0, 0.0]);
        assert_eq!(pose.t(), [0.0; 3]);
        let prim = primitive_decoder_forward(&model, 0, &[0.4, -1.0, 2.0]).unwrap();
        for a in prim.alpha {
            assert!((a - 1.005).abs() < 1e-12);
        }
        for e in prim.epsilon {
            assert!((e - 1.0).abs() < 1e-12);
        }
        assert_eq!(prim.taper, [0.0, 0.0]);
    }

    #[test]
    fn decoder_outputs_respect_parameter_ranges() {
        let model = ModelParams::new(small_config()).unwrap();
        for s in 0..50 {
            let z: Vec<f64> = (0..3).map(|i| ((s * 3 + i) as f64 * 1.3).sin() * 20.0).collect();
            let pose = pose_decoder_forward(&model, 1, &z).unwrap();
            let n: f64 = pose.q().iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-6);
            assert!(pose.t().iter().all(|t| t.abs() <= 1.0));
            let prim = primitive_decoder_forward(&model, 1, &z).unwrap();
            prim.validate().unwrap();
        }
    }

    #[test]
    fn branch_gradients_match_finite_differences() {
        let model = ModelParams::new(small_config()).unwrap();
        let branch = model.arch.branches[0].clone();
        let zy = Tensor::row(&[0.3, -0.2, 0.5, 0.1]);
        let err = max_rel_error(&[zy], 1e-5, 1e-6, |tape, v| {
            let p = model.bind(tape, false);
            tree_forward(&model, &p, &branch.tree, v[0]).mean()
        });
        assert!(err < 1e-4, "point decoder {err}");
        let zt = Tensor::row(&[0.3, -0.2, 0.5]);
        let err = max_rel_error(&[zt], 1e-5, 1e-6, |tape, v| {
            let p = model.bind(tape, false);
            let (q, t) = pose_forward(&model, &p, &branch.pose, v[0]);
            t.sum() + q.cols_range(1..2).sum()
        });
        assert!(err < 1e-4, "pose decoder {err}");
        let zp = Tensor::row(&[0.3, -0.2, 0.5]);
        let err = max_rel_error(&[zp], 1e-5, 1e-6, |tape, v| {
            let p = model.bind(tape, false);
            let (a, e, k) = primitive_forward(&p, &branch.primitive, v[0]);
            a.sum() + e.square().sum() + k.sum()
        });
        assert!(err < 1e-4, "primitive decoder {err}");
    }

    #[test]
    fn decode_shape_structure_and_determinism() {
        let model = ModelParams::new(ModelConfig { latent_dim: 64, ..ModelConfig::default() }).unwrap();
        let z = &latent::sample_prior(3, 1, 64)[0];
        let a = decode_shape(&model, z).unwrap();
        let (cloud, labels) = a.assembled();
        assert_eq!(cloud.len(), 768);
        assert!(labels.iter().all(|&l| l < 3));
        assert_eq!(a, decode_shape(&model, z).unwrap());
    }

    #[test]
    fn block_diagonal_map_isolates_parts() {
        let cfg = ModelConfig { latent_dim: 144, ..ModelConfig::default() };
        let mut model = ModelParams::new(cfg).unwrap();
        // Oracle fixture: z entries 0..48 feed only part 0.
        let mut a = Tensor::zeros(144, 144);
        let dense = latent::init_global_map(1, &PartDims::default(), 48, 7);
        for blk in 0..3 {
            for r in 0..48 {
                for c in 0..48 {
                    a.set(blk * 48 + r, blk * 48 + c, dense.get(r, c));
                }
            }
        }
        model.set_global_map(a).unwrap();
        let z = latent::sample_prior(5, 1, 144).remove(0);
        let mut z2 = z.clone();
        for v in &mut z2.0[..48] {
            *v += 0.7;
        }
        let a = decode_shape(&model, &z).unwrap();
        let b = decode_shape(&model, &z2).unwrap();
        assert_ne!(a.parts[0], b.parts[0]);
        assert_eq!(a.parts[1..], b.parts[1..]);
    }

    #[test]
    fn no_map_matches_identity_map() {
        let base = ModelConfig { latent_dim: 144, seed: 9, ..ModelConfig::default() };
        let mut with_map = ModelParams::new(base.clone()).unwrap();
        let without = ModelParams::new(ModelConfig { use_global_map: false, ..base }).unwrap();
        with_map.set_global_map(Tensor::identity(144)).unwrap();
        // Align branch parameters: the map occupies one slot before the branches.
        let names = without.store.names().to_vec();
        for (i, name) in names.iter().enumerate() {
            let j = with_map.store.names().iter().position(|n| n == name).unwrap();
            with_map.store.tensors[j] = without.store.tensors[i].clone();
        }
        let z = latent::sample_prior(8, 1, 144).remove(0);
        let a = decode_shape(&with_map, &z).unwrap();
        let b = decode_shape(&without, &z).unwrap();
        for (pa, pb) in a.parts.iter().zip(&b.parts) {
            assert!(pa.world.to_tensor().max_abs_diff(&pb.world.to_tensor()) < 1e-12);
        }
    }

    #[test]
    fn branches_do_not_share_parameters() {
        let model = ModelParams::new(ModelConfig::default()).unwrap();
        let sets: Vec<Vec<ParamId>> = (0..3).map(|m| model.branch_param_ids(m)).collect();
        for i in 0..3 {
            for j in i + 1..3 {
                assert!(sets[i].iter().all(|id| !sets[j].contains(id)));
            }
        }
    }
}
