use std::fs;
use std::path::Path;

use clap::Parser;
use voxelseg::cli::{cmd_phantom, run, Cli};
use voxelseg::io::{read_nifti, write_nifti, Datatype, NiftiHeader};
use voxelseg::Tensor;

/// Runs the command line in-process, returning (stdout, stderr) or the error text.
fn voxelseg(args: &[&str]) -> Result<(String, String), String> {
    let cli = Cli::try_parse_from(std::iter::once("voxelseg").chain(args.iter().copied())).map_err(|e| e.to_string())?;
    let (mut out, mut err) = (Vec::new(), Vec::new());
    run(cli, &mut out, &mut err).map_err(|e| e.to_string())?;
    Ok((String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap()))
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const SMOKE: &str = "manifest = data/manifest.csv
levels = 3
base_channels = 4
patch_size = 2
embed_dim = 16
n_heads = 2
input_shape = 16x16x16
min_slices = 16
inplane = native
initial_lr = 0.01
validate_every = 5
max_iterations = 20
";

#[test]
fn phantom_splits_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let m = cmd_phantom(&dir.path().join("a"), 13, 16, 5).unwrap();
    let counts: Vec<usize> = ["train", "val", "test"].iter().map(|s| m.split(s.parse().unwrap()).count()).collect();
    assert_eq!(counts, [9, 2, 2]);
    cmd_phantom(&dir.path().join("b"), 13, 16, 5).unwrap();
    for f in ["case_000.nii.gz", "case_012_label.nii.gz", "manifest.csv"] {
        assert_eq!(fs::read(dir.path().join("a").join(f)).unwrap(), fs::read(dir.path().join("b").join(f)).unwrap(), "{f}");
    }
    let (img, lab) = (read_nifti(dir.path().join("a/case_003.nii.gz")).unwrap(), read_nifti(dir.path().join("a/case_003_label.nii.gz")).unwrap());
    assert_eq!(img.0.datatype, Datatype::I16);
    assert_eq!(lab.0.datatype, Datatype::U8);
    assert!(lab.1.data().iter().all(|&v| v == 0.0 || v == 1.0 || v == 2.0));

    let (out, _) = voxelseg(&["phantom", "--out", p(&dir.path().join("none")), "--count", "0"]).unwrap();
    assert!(out.contains("wrote 0"));
    let listing: Vec<_> = fs::read_dir(dir.path().join("none")).unwrap().collect();
    assert_eq!(listing.len(), 1);
    assert_eq!(fs::read_to_string(dir.path().join("none/manifest.csv")).unwrap().trim(), "image,label,split");
}

#[test]
fn train_evaluate_segment_inspect() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    voxelseg(&["phantom", "--out", p(&root.join("data")), "--count", "13", "--size", "16", "--seed", "2"]).unwrap();
    fs::write(root.join("run.cfg"), SMOKE).unwrap();

    let run_dir = root.join("run");
    let (out, _) = voxelseg(&["train", "--config", p(&root.join("run.cfg")), "--out", p(&run_dir)]).unwrap();
    assert!(out.contains("20 iterations"), "{out}");
    let mut files: Vec<String> = fs::read_dir(&run_dir).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    files.sort();
    assert_eq!(files, ["best.ckpt", "config.txt", "history.csv"]);
    assert_eq!(fs::read_to_string(run_dir.join("history.csv")).unwrap().lines().count(), 21);

    // the echoed config reproduces the run exactly
    let again = root.join("again");
    voxelseg(&["train", "--config", p(&run_dir.join("config.txt")), "--out", p(&again)]).unwrap();
    assert_eq!(fs::read(run_dir.join("best.ckpt")).unwrap(), fs::read(again.join("best.ckpt")).unwrap());
    assert_eq!(fs::read(run_dir.join("history.csv")).unwrap(), fs::read(again.join("history.csv")).unwrap());

    let ckpt = run_dir.join("best.ckpt");
    let manifest = root.join("data/manifest.csv");
    let (table, _) = voxelseg(&["evaluate", "--checkpoint", p(&ckpt), "--manifest", p(&manifest)]).unwrap();
    let rows: Vec<&str> = table.lines().collect();
    assert_eq!(rows[0], "img,Dice,Accuracy,Precision,Specificity,IOU,MCC");
    assert_eq!(rows.len(), 4);
    assert!(rows[3].starts_with("AVE,"));
    for r in &rows[1..3] {
        let v: Vec<f64> = r.split(',').skip(1).map(|x| x.parse().unwrap()).collect();
        assert!((v[4] - v[0] / (2.0 - v[0])).abs() < 1e-6, "{r}");
    }

    let vol = root.join("data/case_012.nii.gz");
    let mask = root.join("mask.nii");
    voxelseg(&["segment", "--checkpoint", p(&ckpt), "--in", p(&vol), "--out", p(&mask)]).unwrap();
    let (hin, _) = read_nifti(&vol).unwrap();
    let (hout, m) = read_nifti(&mask).unwrap();
    assert_eq!(hout.datatype, Datatype::U8);
    assert_eq!((hout.srow_x, hout.srow_y, hout.srow_z), (hin.srow_x, hin.srow_y, hin.srow_z));
    assert_eq!((hout.qform_code, hout.sform_code, hout.pixdim), (hin.qform_code, hin.sform_code, hin.pixdim));
    assert_eq!(m.shape(), [16, 16, 16]);
    assert!(m.data().iter().all(|&v| v == 0.0 || v == 1.0));

    let (dump, _) = voxelseg(&["inspect", "--in", p(&vol)]).unwrap();
    assert!(dump.contains("dim=[3, 16, 16, 16, 1, 1, 1, 1]"), "{dump}");
}

#[test]
fn evaluate_empty_split_warns() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    voxelseg(&["phantom", "--out", p(&root.join("data")), "--count", "3", "--size", "16"]).unwrap();
    fs::write(root.join("run.cfg"), SMOKE.replace("max_iterations = 20", "max_iterations = 2")).unwrap();
    // 3 volumes split 2/1/0, so the test split is empty
    voxelseg(&["train", "--config", p(&root.join("run.cfg")), "--out", p(&root.join("run"))]).unwrap();
    let ckpt = root.join("run/best.ckpt");
    let (table, warn) = voxelseg(&["evaluate", "--checkpoint", p(&ckpt), "--manifest", p(&root.join("data/manifest.csv"))]).unwrap();
    assert_eq!(table, "img,Dice,Accuracy,Precision,Specificity,IOU,MCC\n");
    assert!(warn.contains("empty"), "{warn}");
}

#[test]
fn dataset_and_config_errors() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    voxelseg(&["phantom", "--out", p(&root.join("data")), "--count", "4", "--size", "16"]).unwrap();
    fs::remove_file(root.join("data/case_001_label.nii.gz")).unwrap();
    fs::write(root.join("run.cfg"), SMOKE).unwrap();
    let e = voxelseg(&["train", "--config", p(&root.join("run.cfg"))]).unwrap_err();
    assert!(e.contains("manifest entry 2") && e.contains("case_001_label.nii.gz"), "{e}");

    fs::write(root.join("bad.cfg"), "levels = 3\nlearning_rate = 0.1\n").unwrap();
    let e = voxelseg(&["train", "--config", p(&root.join("bad.cfg"))]).unwrap_err();
    assert!(e.contains("bad.cfg:2") && e.contains("learning_rate"), "{e}");
    let e = voxelseg(&["train", "--config", p(&root.join("run.cfg")), "--model", "resnet"]).unwrap_err();
    assert!(e.contains("resnet"), "{e}");
    assert!(voxelseg(&["inspect", "--in", p(&root.join("missing.nii"))]).is_err());
}

#[test]
fn inspect_fixtures() {
    let dir = tempfile::tempdir().unwrap();
    let t = Tensor::from_fn(&[4, 4, 4], |i| (i[0] * 16 + i[1] * 4 + i[2]) as f64);
    let mut h = NiftiHeader::for_shape(&[4, 4, 4], Datatype::I16).unwrap();
    write_nifti(dir.path().join("v.nii"), &h, &t, false).unwrap();
    write_nifti(dir.path().join("v.nii.gz"), &h, &t, true).unwrap();
    h.big_endian = true;
    write_nifti(dir.path().join("swapped.nii"), &h, &t, false).unwrap();

    let (plain, _) = voxelseg(&["inspect", "--in", p(&dir.path().join("v.nii"))]).unwrap();
    let (gz, _) = voxelseg(&["inspect", "--in", p(&dir.path().join("v.nii.gz"))]).unwrap();
    assert_eq!(plain, gz);
    assert!(plain.contains("dim=[3, 4, 4, 4,"), "{plain}");
    assert!(plain.contains("endianness=little"));
    let (big, _) = voxelseg(&["inspect", "--in", p(&dir.path().join("swapped.nii"))]).unwrap();
    assert!(big.contains("endianness=big"));
    assert_eq!(big.replace("endianness=big", "endianness=little"), plain);

    fs::write(dir.path().join("junk.nii"), b"not a nifti file").unwrap();
    let e = voxelseg(&["inspect", "--in", p(&dir.path().join("junk.nii"))]).unwrap_err();
    assert!(e.contains("NIfTI"), "{e}");
}
