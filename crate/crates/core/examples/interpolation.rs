//! Linear interpolation between two encoded shapes in the global latent space.
//!
//! ```bash
//! cargo run --release --example interpolation -- toychair.ckpt
//! ```

mod common;

use partvae::{data, editing, losses};

fn main() -> partvae::Result<()> {
    let model = common::model_from_args();
    let chairs = data::synth_toyshapes("toychair", 2, 256, 5)?;
    let a = editing::encode_shape(&model, &chairs[0].cloud, true, 0)?;
    let b = editing::encode_shape(&model, &chairs[1].cloud, true, 0)?;
    let (za, zb) = (a.z.expect("encoded"), b.z.expect("encoded"));

    let weights = [0.0, 0.2, 0.5, 0.8, 1.0];
    let out = std::path::Path::new("interpolation");
    std::fs::create_dir_all(out)?;
    for (w, shape) in weights.iter().zip(editing::interpolate(&model, &za, &zb, &weights)?) {
        let (cloud, labels) = shape.assembled();
        println!(
            "w = {w:.1}: chamfer to A {:.4}, to B {:.4}",
            losses::chamfer(&cloud, &chairs[0].cloud),
            losses::chamfer(&cloud, &chairs[1].cloud)
        );
        data::write_xyz(out.join(format!("w{w:.1}.xyz")), &cloud, Some(&labels))?;
    }
    Ok(())
}
