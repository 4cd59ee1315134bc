//! Command-line front end. The `partvae` binary is a thin wrapper around [`run`].

use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};

use crate::checkpoint::{self, Checkpoint};
use crate::data::{self, LabeledCloud};
use crate::editing::{self, EditMode, EditSelection};
use crate::error::{Error, Result};
use crate::evaluation;
use crate::geometry::PointCloud;
use crate::latent::LatentBundle;
use crate::losses::LossWeights;
use crate::metrics::{self, Metric};
use crate::networks::{DecodedShape, ModelConfig};
use crate::service::{self, ServiceState};
use crate::training::{self, EpochRecord, TrainConfig, TrainObserver, TrainState};

#[derive(Parser, Debug)]
#[command(name = "partvae", version, about = "Parts-aware point cloud VAE: train, generate, evaluate, edit, serve")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a model on a directory of clouds or a synthetic toy category.
    Train(TrainArgs),
    /// Sample shapes from the prior and write per-part labeled clouds.
    Generate(GenerateArgs),
    /// Score generated shapes against a reference set.
    Eval(EvalArgs),
    /// Part-level editing of encoded shapes.
    #[command(subcommand)]
    Edit(EditCommand),
    /// Serve the JSON editing API.
    Serve(ServeArgs),
}

#[derive(Args, Debug)]
#[group(id = "source", required = true, multiple = false)]
struct Source {
    /// Directory (or file) of .xyz/.pcb clouds.
    #[arg(long, group = "source")]
    data: Option<PathBuf>,
    /// Synthetic toy category: toychair, toytable or toyplane.
    #[arg(long, group = "source")]
    toy: Option<String>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    source: Source,
    /// Number of toy shapes to synthesize.
    #[arg(long, default_value_t = 200)]
    toy_count: usize,
    #[arg(long, default_value_t = 3)]
    parts: usize,
    #[arg(long, default_value_t = 256)]
    latent_dim: usize,
    #[arg(long, default_value_t = 1000)]
    epochs: usize,
    /// KL weight; defaults to 1e-3.
    #[arg(long)]
    beta: Option<f64>,
    /// Overlap weight; defaults to a per-category value.
    #[arg(long)]
    omega_o: Option<f64>,
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    #[arg(long, default_value_t = 30)]
    batch_size: usize,
    /// Points per training cloud.
    #[arg(long, default_value_t = 2048)]
    points: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Save the checkpoint every this many epochs as well as at the end.
    #[arg(long)]
    checkpoint_every: Option<usize>,
    /// Drop the linear map and slice the global latent directly.
    #[arg(long)]
    no_global_map: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, default_value_t = 16)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Also write per-part colored ASCII PLY files.
    #[arg(long)]
    colored: bool,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Directory of reference clouds.
    #[arg(long = "ref")]
    reference: PathBuf,
    /// Comma-separated subset of jsd,mmd-cd,mmd-emd,cov-cd,cov-emd.
    #[arg(long, value_delimiter = ',', default_value = "jsd,mmd-cd,mmd-emd,cov-cd,cov-emd")]
    metrics: Vec<String>,
    /// Also report MCD of the model's primitive segmentation against reference labels.
    #[arg(long)]
    mcd: bool,
    /// Generated shapes; defaults to the reference count.
    #[arg(long)]
    n: Option<usize>,
    /// Points per reference and generated cloud.
    #[arg(long, default_value_t = 2048)]
    points: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Subcommand, Debug)]
pub enum EditCommand {
    /// Transfer part styles from a reference cloud into a target cloud.
    Mix(MixArgs),
    /// Resample part styles of a cloud, keeping poses and primitives.
    Resample(ResampleArgs),
    /// Interpolate between two clouds in latent space.
    Interp(InterpArgs),
}

#[derive(Args, Debug)]
pub struct MixArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    target: PathBuf,
    #[arg(long = "reference")]
    reference: PathBuf,
    /// Comma-separated part indices to take from the reference.
    #[arg(long, value_delimiter = ',')]
    parts: Vec<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ResampleArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long, value_delimiter = ',')]
    parts: Vec<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
pub struct InterpArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    a: PathBuf,
    #[arg(long)]
    b: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "0.2,0.5,0.8")]
    weights: Vec<f64>,
    /// Output directory, one file per weight.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ServeArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, default_value_t = 8080)]
    port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    host: std::net::IpAddr,
    #[arg(long, default_value_t = service::DEFAULT_STORE_CAPACITY)]
    store_capacity: usize,
}

/// Parses `argv` and runs the command. Returns the process exit code:
/// 0 on success, 2 on usage errors, 1 on runtime errors.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

pub fn execute(command: Command) -> Result<()> {
    match command {
        Command::Train(a) => train(a),
        Command::Generate(a) => generate(a),
        Command::Eval(a) => eval(a),
        Command::Edit(EditCommand::Mix(a)) => edit_mix(a),
        Command::Edit(EditCommand::Resample(a)) => edit_resample(a),
        Command::Edit(EditCommand::Interp(a)) => edit_interp(a),
        Command::Serve(a) => serve(a),
    }
}

fn load_dataset(args: &TrainArgs) -> Result<(Vec<LabeledCloud>, String)> {
    match (&args.source.data, &args.source.toy) {
        (Some(dir), _) => {
            let clouds = data::load_clouds(dir, args.points)?;
            let category = clouds.first().map(|c| c.category.clone()).unwrap_or_default();
            Ok((clouds, category))
        }
        (None, Some(toy)) => Ok((data::synth_toyshapes(toy, args.toy_count, args.points, args.seed)?, toy.clone())),
        (None, None) => Err(Error::InvalidParameter("one of --data or --toy is required".into())),
    }
}

struct CliObserver<'a> {
    out: &'a Path,
    category: &'a str,
}

impl TrainObserver for CliObserver<'_> {
    fn epoch_end(&mut self, record: &EpochRecord) {
        println!("{}", record.to_json_line());
    }

    fn checkpoint(&mut self, state: &TrainState, cfg: &TrainConfig) -> Result<()> {
        let ckpt = Checkpoint {
            config: cfg.clone(),
            category: Some(self.category.to_string()),
            model: state.model.clone(),
            optimizer: Some(state.optimizer.clone()),
            log_tail: state.log.clone(),
        };
        checkpoint::save_checkpoint(&ckpt, self.out)
    }
}

fn train(args: TrainArgs) -> Result<()> {
    let (clouds, category) = load_dataset(&args)?;
    let defaults = LossWeights::for_category(&category, args.parts);
    let weights = LossWeights {
        beta: args.beta.unwrap_or(defaults.beta),
        omega_o: args.omega_o.unwrap_or(defaults.omega_o),
        ..defaults
    };
    let cfg = TrainConfig {
        model: ModelConfig {
            parts: args.parts,
            latent_dim: args.latent_dim,
            use_global_map: !args.no_global_map,
            seed: args.seed,
            ..ModelConfig::default()
        },
        learning_rate: args.lr,
        epochs: args.epochs,
        batch_size: args.batch_size,
        weights,
        points_per_cloud: args.points,
        checkpoint_every: args.checkpoint_every,
        seed: args.seed,
        ..TrainConfig::default()
    };
    let dataset: Vec<PointCloud> = clouds.into_iter().map(|c| c.cloud).collect();
    log::info!("training on {} clouds of `{category}`", dataset.len());
    let mut observer = CliObserver { out: &args.out, category: &category };
    training::train(&dataset, &cfg, &mut observer)?;
    eprintln!("wrote {}", args.out.display());
    Ok(())
}

const PART_COLORS: [[u8; 3]; 8] = [
    [228, 26, 28],
    [55, 126, 184],
    [77, 175, 74],
    [152, 78, 163],
    [255, 127, 0],
    [255, 255, 51],
    [166, 86, 40],
    [247, 129, 191],
];

fn write_colored_ply(path: &Path, cloud: &PointCloud, labels: &[usize]) -> Result<()> {
    use std::fmt::Write;
    let mut s = String::new();
    let _ = write!(
        s,
        "ply\nformat ascii 1.0\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\n\
         property uchar red\nproperty uchar green\nproperty uchar blue\nproperty int part\nend_header\n",
        cloud.len()
    );
    for (p, &l) in cloud.points().iter().zip(labels) {
        let [r, g, b] = PART_COLORS[l % PART_COLORS.len()];
        let _ = writeln!(s, "{} {} {} {r} {g} {b} {l}", p[0] as f32, p[1] as f32, p[2] as f32);
    }
    fs::write(path, s)?;
    Ok(())
}

fn write_shape(path: &Path, shape: &DecodedShape, colored: bool) -> Result<()> {
    let (cloud, labels) = shape.assembled();
    data::write_xyz(path, &cloud, Some(&labels))?;
    if colored {
        write_colored_ply(&path.with_extension("ply"), &cloud, &labels)?;
    }
    Ok(())
}

fn generate(args: GenerateArgs) -> Result<()> {
    let ckpt = checkpoint::load_checkpoint(&args.ckpt)?;
    fs::create_dir_all(&args.out)?;
    for (i, shape) in editing::generate(&ckpt.model, args.seed, args.n)?.iter().enumerate() {
        write_shape(&args.out.join(format!("shape_{i:04}.xyz")), shape, args.colored)?;
    }
    eprintln!("wrote {} shapes to {}", args.n, args.out.display());
    Ok(())
}

fn eval(args: EvalArgs) -> Result<()> {
    let metric_list = args.metrics.iter().map(|m| m.parse()).collect::<Result<Vec<Metric>>>()?;
    let ckpt = checkpoint::load_checkpoint(&args.ckpt)?;
    let reference = data::load_clouds(&args.reference, args.points)?;
    if reference.is_empty() {
        return Err(Error::Empty("reference set"));
    }
    let n = args.n.unwrap_or(reference.len());
    let gen = evaluation::generated_clouds(&ckpt.model, args.seed, n, args.points)?;
    let ref_clouds: Vec<PointCloud> = reference.iter().map(|c| c.cloud.clone()).collect();
    let report = metrics::evaluate(&gen, &ref_clouds, &metric_list)?;
    println!("{}", report.to_key_values());
    if args.mcd {
        let gt_parts = reference
            .iter()
            .filter_map(|c| c.labels.as_ref())
            .flat_map(|l| l.iter().copied())
            .max()
            .map(|m| m + 1)
            .ok_or(Error::Empty("reference labels"))?;
        let learned = evaluation::learned_part_mcd(&ckpt.model, &reference, gt_parts)?;
        let random = evaluation::random_partition_mcd(&reference, gt_parts, ckpt.model.config().parts, args.seed)?;
        println!("mcd={learned:.6}\nmcd_random_partition={random:.6}");
    }
    Ok(())
}

fn encode_file(ckpt: &Checkpoint, path: &Path) -> Result<LatentBundle> {
    let cloud = data::read_cloud(path)?.cloud;
    editing::encode_shape(&ckpt.model, &cloud, true, 0)
}

fn edit_mix(args: MixArgs) -> Result<()> {
    let ckpt = checkpoint::load_checkpoint(&args.ckpt)?;
    let target = encode_file(&ckpt, &args.target)?;
    let reference = encode_file(&ckpt, &args.reference)?;
    let sel = EditSelection::new(args.parts, EditMode::Mix);
    write_shape(&args.out, &editing::mix_parts(&ckpt.model, &target, &reference, &sel)?, false)
}

fn edit_resample(args: ResampleArgs) -> Result<()> {
    let ckpt = checkpoint::load_checkpoint(&args.ckpt)?;
    let bundle = encode_file(&ckpt, &args.input)?;
    let sel = EditSelection::new(args.parts, EditMode::Resample);
    write_shape(&args.out, &editing::resample_parts(&ckpt.model, &bundle, &sel, args.seed)?, false)
}

fn edit_interp(args: InterpArgs) -> Result<()> {
    let ckpt = checkpoint::load_checkpoint(&args.ckpt)?;
    let a = encode_file(&ckpt, &args.a)?;
    let b = encode_file(&ckpt, &args.b)?;
    fs::create_dir_all(&args.out)?;
    let za = a.z.as_ref().expect("encoded bundles carry z");
    let zb = b.z.as_ref().expect("encoded bundles carry z");
    for (w, shape) in args.weights.iter().zip(editing::interpolate(&ckpt.model, za, zb, &args.weights)?) {
        write_shape(&args.out.join(format!("interp_{w:.3}.xyz")), &shape, false)?;
    }
    Ok(())
}

fn serve(args: ServeArgs) -> Result<()> {
    let ckpt = checkpoint::load_checkpoint(&args.ckpt)?;
    let state = Arc::new(ServiceState::new(ckpt.model, ckpt.category, args.store_capacity));
    let addr = SocketAddr::new(args.host, args.port);
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(service::serve(state, addr))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn usage_errors_exit_with_two() {
        assert_eq!(run(["partvae"]), 2);
        assert_eq!(run(["partvae", "frobnicate"]), 2);
        assert_eq!(run(["partvae", "train", "--out", "x.ckpt"]), 2);
        assert_eq!(run(["partvae", "train", "--toy", "toychair", "--data", "d", "--out", "x"]), 2);
        assert_eq!(run(["partvae", "--help"]), 0);
    }

    #[test]
    fn runtime_errors_exit_with_one() {
        assert_eq!(run(["partvae", "generate", "--ckpt", "/nonexistent/m.ckpt", "--out", "/tmp/x"]), 1);
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("m.ckpt");
        let out = out.to_str().unwrap();
        assert_eq!(run(["partvae", "train", "--toy", "toysofa", "--epochs", "1", "--out", out]), 1);
    }
}
