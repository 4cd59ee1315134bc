//! Samples shapes from the prior and writes one part-labeled cloud per shape.
//!
//! ```bash
//! cargo run --release --example generate -- toychair.ckpt
//! ```

mod common;

use partvae::{data, editing};

fn main() -> partvae::Result<()> {
    let model = common::model_from_args();
    let out = std::path::Path::new("generated");
    std::fs::create_dir_all(out)?;

    let shapes = editing::generate(&model, 7, 8)?;
    for (i, shape) in shapes.iter().enumerate() {
        let (cloud, labels) = shape.assembled();
        data::write_xyz(out.join(format!("shape_{i}.xyz")), &cloud, Some(&labels))?;
        let summary: Vec<String> = shape
            .parts
            .iter()
            .map(|p| {
                let [x, y, z] = p.pose.t();
                format!("[{x:+.2} {y:+.2} {z:+.2}] eps {:.2}/{:.2}", p.primitive.epsilon[0], p.primitive.epsilon[1])
            })
            .collect();
        println!("shape {i}: {}", summary.join(" | "));
    }
    println!("wrote {} shapes to {}", shapes.len(), out.display());
    Ok(())
}
