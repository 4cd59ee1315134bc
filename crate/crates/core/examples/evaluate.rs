//! Generative metrics (JSD, MMD, coverage) and part MCD for a model against
//! held-out toy chairs.
//!
//! ```bash
//! cargo run --release --example evaluate -- toychair.ckpt
//! ```

mod common;

use partvae::data;
use partvae::evaluation;
use partvae::geometry::PointCloud;
use partvae::metrics::{self, Metric};

fn main() -> partvae::Result<()> {
    let model = common::model_from_args();
    let held = data::synth_toyshapes("toychair", 32, 256, 2)?;
    let reference: Vec<PointCloud> = held.iter().map(|c| c.cloud.clone()).collect();

    let generated = evaluation::generated_clouds(&model, 77, 32, 256)?;
    let all = [Metric::Jsd, Metric::MmdCd, Metric::MmdEmd, Metric::CovCd, Metric::CovEmd];
    let report = metrics::evaluate(&generated, &reference, &all)?;
    println!("model:\n{}", report.to_key_values());

    // Real samples from the same generator give the best achievable numbers.
    let fresh: Vec<PointCloud> = data::synth_toyshapes("toychair", 32, 256, 3)?.into_iter().map(|c| c.cloud).collect();
    let ceiling = metrics::evaluate(&fresh, &reference, &[Metric::Jsd, Metric::MmdCd, Metric::CovCd])?;
    println!("fresh toy samples:\n{}", ceiling.to_key_values());

    let learned = evaluation::learned_part_mcd(&model, &held, 3)?;
    let random = evaluation::random_partition_mcd(&held, 3, 3, 0)?;
    println!("part mcd {learned:.5} (random partition {random:.5})");
    Ok(())
}
