//! Trains on the synthetic toy chairs and writes a checkpoint.
//!
//! ```bash
//! cargo run --release --example train_toy -- toychair.ckpt 30
//! ```

use partvae::checkpoint::{self, Checkpoint};
use partvae::data;
use partvae::geometry::PointCloud;
use partvae::losses::LossWeights;
use partvae::networks::ModelConfig;
use partvae::training::{self, EpochRecord, TrainConfig, TrainObserver};

struct Progress;

impl TrainObserver for Progress {
    fn epoch_end(&mut self, r: &EpochRecord) {
        println!(
            "epoch {:>3}  total {:.4}  point {:.4}  prim {:.4}  overlap {:.4}  kl {:.3}",
            r.epoch, r.total, r.l_point, r.l_prim, r.l_overlap, r.l_kl
        );
    }
}

fn main() -> partvae::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = args.next().unwrap_or_else(|| "toychair.ckpt".into());
    let epochs = args.next().map_or(30, |e| e.parse().expect("epoch count"));

    let clouds: Vec<PointCloud> = data::synth_toyshapes("toychair", 200, 256, 1)?.into_iter().map(|c| c.cloud).collect();
    let cfg = TrainConfig {
        model: ModelConfig { parts: 3, latent_dim: 64, seed: 1, ..ModelConfig::default() },
        learning_rate: 1e-3,
        epochs,
        batch_size: 5,
        points_per_cloud: 256,
        weights: LossWeights { beta: 1e-2, ..LossWeights::for_category("toychair", 3) },
        seed: 1,
        ..TrainConfig::default()
    };
    let state = training::train(&clouds, &cfg, &mut Progress)?;
    let ckpt = Checkpoint {
        config: cfg,
        category: Some("toychair".into()),
        model: state.model,
        optimizer: Some(state.optimizer),
        log_tail: state.log,
    };
    checkpoint::save_checkpoint(&ckpt, &out)?;
    println!("saved {out}");
    Ok(())
}
