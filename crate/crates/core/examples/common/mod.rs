//! Shared setup for the examples: load a checkpoint given as the first
//! argument, or train a small toy model on the spot.

use partvae::checkpoint;
use partvae::data;
use partvae::geometry::PointCloud;
use partvae::losses::LossWeights;
use partvae::networks::{ModelConfig, ModelParams};
use partvae::training::{self, TrainConfig};

#[allow(dead_code)]
pub fn quick_config(epochs: usize) -> TrainConfig {
    TrainConfig {
        model: ModelConfig { latent_dim: 64, seed: 1, ..ModelConfig::default() },
        learning_rate: 1e-3,
        epochs,
        batch_size: 8,
        points_per_cloud: 256,
        weights: LossWeights { beta: 1e-2, ..LossWeights::for_category("toychair", 3) },
        seed: 1,
        ..TrainConfig::default()
    }
}

#[allow(dead_code)]
pub fn model_from_args() -> ModelParams {
    if let Some(path) = std::env::args().nth(1) {
        println!("loading {path}");
        return checkpoint::load_checkpoint(&path).expect("readable checkpoint").model;
    }
    println!("no checkpoint given, training a small toychair model (pass a .ckpt path to skip)");
    let clouds: Vec<PointCloud> =
        data::synth_toyshapes("toychair", 64, 256, 1).unwrap().into_iter().map(|c| c.cloud).collect();
    training::train(&clouds, &quick_config(5), &mut ()).unwrap().model
}
