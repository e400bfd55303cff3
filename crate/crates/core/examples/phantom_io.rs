//! Generates a synthetic CT phantom, writes it as gzipped NIfTI, reads it
//! back and runs the preprocessing pipeline.
//!
//! `cargo run --example phantom_io -- [size]`

use voxelseg::io::{generate_phantom, preprocess, read_nifti, write_nifti, Datatype, NiftiHeader, Preprocessed, PreprocessConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let size = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(32);
    let p = generate_phantom(7, size, 2)?;
    println!("{} of {} lesions placed, lesion fraction {:.4}", p.lesions, p.requested, p.lesion_fraction());

    let dir = std::env::temp_dir().join("voxelseg-phantom-io");
    std::fs::create_dir_all(&dir)?;
    let shape = [size; 3];
    let path = dir.join("phantom.nii.gz");
    write_nifti(&path, &NiftiHeader::for_shape(&shape, Datatype::I16)?, &p.sample.image.reshape(&shape)?, true)?;
    let (header, voxels) = read_nifti(&path)?;
    print!("{}", header.dump());
    println!("read back identical: {}", voxels.bitwise_eq(&p.sample.image.reshape(&shape)?));

    let cfg = PreprocessConfig { min_slices: 8, inplane: Some([size / 2, size / 2]), ..PreprocessConfig::default() };
    match preprocess(p.raw_sample(), &cfg)? {
        Preprocessed::Sample(s) => {
            let (lo, hi) = s.image.data().iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
            println!("preprocessed to {:?}, intensities in [{lo:.3}, {hi:.3}], foreground voxels {}", s.dims(), s.label.sum());
        }
        Preprocessed::Rejected(why) => println!("rejected: {why}"),
    }
    Ok(())
}
