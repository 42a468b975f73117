use std::path::{Path, PathBuf};
use std::process::Command;

use dmrimap::cli::{run, RunManifest, EXIT_OK, EXIT_USAGE, MANIFEST_NAME};
use dmrimap::volume::{read_nifti, write_nifti, Volume};

fn cli(args: &[&str]) -> i32 {
    let mut all = vec!["dmrimap"];
    all.extend_from_slice(args);
    run(all)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn manifest(path: &Path) -> RunManifest {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

const DWI_JOB: &str = r#"{
  "kind": "dwi",
  "phantom": {
    "dims": [6, 5, 3],
    "regions": [
      {"shape": {"kind": "box", "min": [0, 0, 0], "max": [6, 5, 3]}, "tensor": [0.0008, 0.0008, 0.0008, 0, 0, 0], "s0": 900},
      {"shape": {"kind": "sphere", "center": [3, 2, 1], "radius": 1.6}, "tensor": [0.0017, 0.0003, 0.0003, 0.0001, 0, 0], "s0": 1000}
    ]
  },
  "n_dirs": 20
}"#;

fn dwi_phantom(dir: &Path) -> PathBuf {
    let job = write(dir, "dwi.json", DWI_JOB);
    let out = dir.join("phantom");
    assert_eq!(cli(&["phantom", "--job", s(&job), "--out-dir", s(&out)]), EXIT_OK);
    out
}

fn dwi_files(ph: &Path) -> Vec<String> {
    let mut v: Vec<String> = std::fs::read_dir(ph)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.file_name().unwrap().to_str().unwrap().starts_with("dwi_"))
        .map(|p| p.to_str().unwrap().to_string())
        .collect();
    v.sort();
    v
}

#[test]
fn fit_dti_reproduces_phantom_truth() {
    let dir = tempfile::tempdir().unwrap();
    let ph = dwi_phantom(dir.path());
    let out = dir.path().join("fit");
    let files = dwi_files(&ph);
    assert_eq!(files.len(), 21);
    let mut args = vec!["fit-dti", "--dwi"];
    args.extend(files.iter().map(String::as_str));
    let (bv, bc, mask) = (ph.join("bvals"), ph.join("bvecs"), ph.join("mask.nii"));
    args.extend(["--bvals", s(&bv), "--bvecs", s(&bc), "--mask", s(&mask), "--out-dir", s(&out)]);
    assert_eq!(cli(&args), EXIT_OK);

    let fa = read_nifti(out.join("fa.nii")).unwrap();
    let truth = read_nifti(ph.join("truth_fa.nii")).unwrap();
    let worst = fa
        .data()
        .iter()
        .zip(truth.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    // NIfTI payloads are float32
    assert!(worst < 1e-6, "{worst}");
    for name in ["md.nii", "s0.nii", "tensor_dxx.nii", "tensor_dyz.nii"] {
        assert!(out.join(name).exists(), "{name}");
    }
    let m = manifest(&out.join(MANIFEST_NAME));
    assert_eq!(m.subcommand, "fit-dti");
    assert_eq!(m.summary["fitted_voxels"], 90);
    assert_eq!(m.inputs.len(), 24);
}

fn binary() -> Command {
    Command::new(env!("CARGO_BIN_EXE_dmrimap"))
}

#[test]
fn missing_bvecs_exits_with_usage_code() {
    let out = binary().args(["fit-dti", "--dwi", "a.nii", "--bvals", "b.txt", "--out-dir", "o"]).output().unwrap();
    assert_eq!(out.status.code(), Some(EXIT_USAGE));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--bvecs"));
}

#[test]
fn empty_mask_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let ph = dwi_phantom(dir.path());
    let zeros = Volume::filled([6, 5, 3], [1.0; 3], 0.0).unwrap();
    let mask = dir.path().join("empty.nii");
    write_nifti(&zeros, &mask).unwrap();
    let files = dwi_files(&ph);
    let out = dir.path().join("fit");
    let mut args = vec!["fit-dti", "--dwi"];
    args.extend(files.iter().map(String::as_str));
    let (bv, bc) = (ph.join("bvals"), ph.join("bvecs"));
    args.extend(["--bvals", s(&bv), "--bvecs", s(&bc), "--mask", s(&mask), "--out-dir", s(&out)]);
    let res = binary().args(&args).output().unwrap();
    assert_eq!(res.status.code(), Some(EXIT_USAGE));
    assert!(String::from_utf8_lossy(&res.stderr).contains("empty mask"));
}

#[test]
fn ssim_of_a_volume_with_itself_is_one_per_slice() {
    let dir = tempfile::tempdir().unwrap();
    let data = (0..24 * 24 * 20).map(|i| ((i * 31) % 97) as f64 / 97.0).collect();
    let vol = Volume::new([24, 24, 20], [1.0; 3], data).unwrap();
    let p = dir.path().join("v.nii");
    write_nifti(&vol, &p).unwrap();
    let out = dir.path().join("scores.csv");
    let slices = "1,2,3,4,5,6,7,8,9,10,11,12,13,14,15,16,17";
    assert_eq!(cli(&["ssim", "--a", s(&p), "--b", s(&p), "--slices", slices, "--out", s(&out)]), EXIT_OK);
    let csv = std::fs::read_to_string(&out).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 17);
    for r in rows {
        let v: f64 = r.split(',').nth(1).unwrap().parse().unwrap();
        assert_eq!(v, 1.0);
    }
    assert_eq!(manifest(&dir.path().join("scores.run.json")).subcommand, "ssim");
}

#[test]
fn phantoms_are_seeded() {
    let dir = tempfile::tempdir().unwrap();
    let job = write(dir.path(), "w.json", r#"{"kind": "warp", "dims": [24, 24], "amplitude": 2, "sigma": 6}"#);
    let gen = |name: &str, extra: &[&str]| {
        let out = dir.path().join(name);
        let mut args = vec!["phantom", "--job", s(&job), "--out-dir", s(&out)];
        args.extend_from_slice(extra);
        assert_eq!(cli(&args), EXIT_OK);
        std::fs::read(out.join("warp.nii")).unwrap()
    };
    let (a, b, c) = (gen("a", &[]), gen("b", &[]), gen("c", &["--seed", "9"]));
    assert_eq!(a, b);
    assert_ne!(a, c);
    assert_eq!(manifest(&dir.path().join("c").join(MANIFEST_NAME)).seed, 9);
}

#[test]
fn unknown_config_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let job = write(dir.path(), "w.json", r#"{"kind": "warp", "dims": [24, 24], "amplitude": 2, "sigma": 6, "amplitdue": 3}"#);
    let out = dir.path().join("o");
    assert_eq!(cli(&["phantom", "--job", s(&job), "--out-dir", s(&out)]), EXIT_USAGE);
}

const TINY_TRAIN: &str = r#"{
  "generator": {"base_channels": 4, "n_res_blocks": 1},
  "discriminator": {"n_convs": 3, "base_channels": 4},
  "train": {"epochs": 1}
}"#;

fn trained(dir: &Path) -> (PathBuf, PathBuf) {
    let job = write(dir, "pairs.json", r#"{"kind": "translation", "n_images": 4, "dims": [16, 16], "seed": 3}"#);
    let data = dir.join("pairs");
    assert_eq!(cli(&["phantom", "--job", s(&job), "--out-dir", s(&data)]), EXIT_OK);
    let cfg = write(dir, "train.json", TINY_TRAIN);
    let run_dir = dir.join("run");
    let (a, b) = (data.join("set_a.nii"), data.join("set_b.nii"));
    let code = cli(&[
        "train", "--config", s(&cfg), "--data-a", s(&a), "--data-b", s(&b), "--out-dir", s(&run_dir), "--seed", "4",
    ]);
    assert_eq!(code, EXIT_OK);
    (run_dir, data)
}

#[test]
fn train_then_translate_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let (run_dir, data) = trained(dir.path());
    let csv = std::fs::read_to_string(run_dir.join("loss.csv")).unwrap();
    assert!(csv.starts_with("step,lr,d_a_loss,d_b_loss,g_adv_loss,cycle_loss,total\n"));
    assert_eq!(csv.lines().count(), 5);
    let m = manifest(&run_dir.join(MANIFEST_NAME));
    assert_eq!((m.subcommand.as_str(), m.seed), ("train", 4));

    let ckpt = run_dir.join("checkpoint");
    let input = data.join("set_a.nii");
    let go = |name: &str, threads: &str| {
        let out = dir.path().join(name);
        let code = cli(&["translate", "--checkpoint", s(&ckpt), "--in", s(&input), "--out", s(&out), "--threads", threads]);
        assert_eq!(code, EXIT_OK);
        std::fs::read(&out).unwrap()
    };
    let (x, y, z) = (go("x.nii", "1"), go("y.nii", "1"), go("z.nii", "3"));
    assert_eq!(x, y);
    assert_eq!(x, z);
    let v = read_nifti(dir.path().join("x.nii")).unwrap();
    assert!(v.data().iter().all(|p| (0.0..=1.0).contains(p)));
}

#[test]
fn register_writes_warp_and_resampled_image() {
    let dir = tempfile::tempdir().unwrap();
    let job = write(
        dir.path(),
        "d.json",
        r#"{"kind": "distortion", "n_slices": 1, "dims": [32, 32], "amplitude": 2, "sigma": 6, "seed": 1}"#,
    );
    let ph = dir.path().join("ph");
    assert_eq!(cli(&["phantom", "--job", s(&job), "--out-dir", s(&ph)]), EXIT_OK);
    let (w, r) = (dir.path().join("warp.nii"), dir.path().join("res.nii"));
    let (mv, fx) = (ph.join("distorted_fa.nii"), ph.join("truth_fa.nii"));
    let code = cli(&["register", "--moving", s(&mv), "--fixed", s(&fx), "--out-warp", s(&w), "--out-resampled", s(&r)]);
    assert_eq!(code, EXIT_OK);
    assert_eq!(read_nifti(&w).unwrap().dims(), [32, 32, 2]);
    assert_eq!(read_nifti(&r).unwrap().dims(), [32, 32, 1]);
    let m = manifest(&dir.path().join("warp.run.json"));
    assert!(m.summary["min_jacobian"].as_f64().unwrap() > 0.0);
}

#[test]
fn distortion_correct_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let (run_dir, _) = trained(dir.path());
    let job = write(
        dir.path(),
        "d.json",
        r#"{"kind": "distortion", "n_slices": 2, "dims": [16, 16], "amplitude": 1, "sigma": 4}"#,
    );
    let ph = dir.path().join("ph");
    assert_eq!(cli(&["phantom", "--job", s(&job), "--out-dir", s(&ph)]), EXIT_OK);
    let out = dir.path().join("dc");
    let (d, t1, truth) = (ph.join("distorted_fa.nii"), ph.join("t1.nii"), ph.join("truth_fa.nii"));
    let ckpt = run_dir.join("checkpoint");
    let code = cli(&[
        "distortion-correct", "--distorted-fa", s(&d), "--t1", s(&t1), "--checkpoint", s(&ckpt), "--truth", s(&truth),
        "--out-dir", s(&out),
    ]);
    assert_eq!(code, EXIT_OK);
    assert_eq!(read_nifti(out.join("corrected_fa.nii")).unwrap().dims(), [16, 16, 2]);
    assert!(out.join("warps").join("warp_001.nii").exists());
    assert_eq!(std::fs::read_to_string(out.join("mssim.csv")).unwrap().lines().count(), 3);
    let m = manifest(&out.join(MANIFEST_NAME));
    assert_eq!(m.summary["slices"].as_array().unwrap().len(), 2);
}

#[test]
fn zero_threads_is_rejected() {
    let out = binary().args(["--threads", "0", "ssim", "--a", "a", "--b", "b", "--out", "o.csv"]).output().unwrap();
    assert_eq!(out.status.code(), Some(EXIT_USAGE));
}
