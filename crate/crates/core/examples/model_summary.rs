//! Parameter counts of MPU-Net and the plain 3D U-Net for each feature flag.
//!
//! `cargo run --example model_summary`

use voxelseg::networks::{build_mpunet, build_unet3d, count_parameters, ModelConfig};

fn main() -> voxelseg::Result<()> {
    let micro = ModelConfig::micro();
    let unet = build_unet3d(&micro)?;
    println!("3D U-Net: {} parameters", count_parameters(&unet));
    for (pam, gates, ms) in [(true, false, false), (false, true, false), (false, false, true), (true, true, true)] {
        let cfg = ModelConfig { use_pam: pam, use_gates: gates, use_multiscale: ms, ..micro.clone() };
        println!("MPU-Net pam={pam:<5} gates={gates:<5} multiscale={ms:<5}: {} parameters", count_parameters(&build_mpunet(&cfg)?));
    }
    print!("{}", build_mpunet(&micro)?.summary());
    Ok(())
}
