//! Superquadric primitives: surface sampling, tapering, poses and the
//! inside-outside function used by the overlap loss.
//!
//! ```bash
//! cargo run --release --example superquadrics -- /tmp/primitives
//! ```

use std::path::PathBuf;

use partvae::data;
use partvae::geometry::{self, Direction, Pose, SamplingScheme, SuperquadricParams};

fn main() -> partvae::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "primitives".into()));
    std::fs::create_dir_all(&out)?;

    let shapes = [
        ("sphere", SuperquadricParams::ellipsoid([0.5, 0.5, 0.5])?),
        ("box", SuperquadricParams::new([0.6, 0.3, 0.2], [0.1, 0.1], [0.0, 0.0])?),
        ("cylinder", SuperquadricParams::new([0.2, 0.2, 0.6], [0.1, 1.0], [0.0, 0.0])?),
        ("tapered", SuperquadricParams::new([0.4, 0.4, 0.5], [1.0, 1.0], [-0.8, -0.8])?),
        ("octahedron", SuperquadricParams::new([0.5, 0.5, 0.5], [1.9, 1.9], [0.0, 0.0])?),
    ];
    // Rotate 90 degrees about x and lift by 0.5.
    let h = std::f64::consts::FRAC_1_SQRT_2;
    let pose = Pose::new([h, h, 0.0, 0.0], [0.0, 0.0, 0.5])?;

    for (name, sq) in &shapes {
        let local = geometry::sample_superquadric(sq, 2000, SamplingScheme::Grid, 0)?;
        let world = geometry::apply_pose(&pose, &local, Direction::Forward)?;
        data::write_xyz(out.join(format!("{name}.xyz")), &world, None)?;

        // Surface points sit on the level set F = 1.
        let worst = local
            .points()
            .iter()
            .map(|p| (geometry::inside_outside(sq, &geometry::invert_taper(sq, p)) - 1.0).abs())
            .fold(0.0, f64::max);
        let inside = geometry::smoothed_indicator(sq, &pose, &pose.t());
        println!("{name:>10}: 2000 samples, max |F - 1| = {worst:.2e}, H at center = {inside:.3}");
    }
    println!("wrote clouds to {}", out.display());
    Ok(())
}
