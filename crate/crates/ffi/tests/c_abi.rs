use std::ffi::{CStr, CString};
use std::ptr;

use dmrimap_ffi::*;

fn last_error() -> String {
    let p = dmr_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn scalar_measures() {
    assert!((dmr_fa(2.0, 1.0, 1.0) - 0.408_248_290_463_863).abs() < 1e-12);
    assert_eq!(dmr_fa(1.0, 0.0, 0.0), 1.0);
    assert_eq!(dmr_md(3.0, 0.0, 0.0), 1.0);
    let v = unsafe { CStr::from_ptr(dmr_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

#[test]
fn volume_round_trip_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("v.nii").to_str().unwrap()).unwrap();
    let dims = [3usize, 2, 2];
    let spacing = [1.0, 1.5, 2.0];
    let data: Vec<f64> = (0..12).map(|i| i as f64 * 0.25).collect();
    let mut v = ptr::null_mut();
    unsafe {
        assert_eq!(dmr_volume_new(dims.as_ptr(), spacing.as_ptr(), data.as_ptr(), 12, &mut v), DmrStatus::Ok);
        assert_eq!(dmr_volume_write(v, path.as_ptr()), DmrStatus::Ok);
        let mut w = ptr::null_mut();
        assert_eq!(dmr_volume_read(path.as_ptr(), &mut w), DmrStatus::Ok);
        let mut d = [0usize; 3];
        assert_eq!(dmr_volume_dims(w, d.as_mut_ptr()), DmrStatus::Ok);
        assert_eq!(d, dims);
        let mut back = vec![0.0; 12];
        assert_eq!(dmr_volume_copy_data(w, back.as_mut_ptr(), 12), DmrStatus::Ok);
        assert_eq!(back, data);
        assert_eq!(dmr_volume_copy_data(w, back.as_mut_ptr(), 11), DmrStatus::BufferTooSmall);
        dmr_volume_free(v);
        dmr_volume_free(w);
        dmr_volume_free(ptr::null_mut());
    }
}

#[test]
fn errors_set_status_and_message() {
    let mut v = ptr::null_mut();
    let missing = CString::new("/nonexistent/dir/x.nii").unwrap();
    unsafe {
        assert_eq!(dmr_volume_read(missing.as_ptr(), &mut v), DmrStatus::Io);
        assert!(last_error().contains("nonexistent"));
        assert!(v.is_null());
        assert_eq!(dmr_volume_read(ptr::null(), &mut v), DmrStatus::NullArgument);
        assert!(last_error().contains("path"));
        let dims = [2usize, 2, 2];
        let spacing = [1.0; 3];
        let data = [0.0; 7];
        assert_eq!(
            dmr_volume_new(dims.as_ptr(), spacing.as_ptr(), data.as_ptr(), 7, &mut v),
            DmrStatus::Invalid
        );
    }
}

#[test]
fn error_message_is_per_thread() {
    unsafe {
        let mut v = ptr::null_mut();
        assert_eq!(dmr_volume_read(ptr::null(), &mut v), DmrStatus::NullArgument);
    }
    let other = std::thread::spawn(|| dmr_last_error().is_null()).join().unwrap();
    assert!(other);
}

#[test]
fn fit_recovers_isotropic_diffusion() {
    let n_dirs = 6;
    let s = 0.5f64.sqrt();
    let dirs: Vec<f64> = vec![
        0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0, s, s, 0.0, s, 0.0, s, 0.0, s, s,
    ];
    let mut bvals = vec![0.0];
    bvals.extend(std::iter::repeat(1000.0).take(n_dirs));
    let d = 0.7e-3;
    let dims = [2usize, 2, 1];
    let spacing = [1.0; 3];
    let mut handles = Vec::new();
    for &b in &bvals {
        let data = vec![100.0 * f64::exp(-b * d); 4];
        let mut v = ptr::null_mut();
        unsafe { assert_eq!(dmr_volume_new(dims.as_ptr(), spacing.as_ptr(), data.as_ptr(), 4, &mut v), DmrStatus::Ok) };
        handles.push(v as *const DmrVolume);
    }
    let (mut fa, mut md) = (ptr::null_mut(), ptr::null_mut());
    unsafe {
        let st = dmr_fit_dti(handles.as_ptr(), 7, bvals.as_ptr(), dirs.as_ptr(), ptr::null(), &mut fa, &mut md);
        assert_eq!(st, DmrStatus::Ok, "{}", last_error());
        let mut out = [0.0; 4];
        dmr_volume_copy_data(md, out.as_mut_ptr(), 4);
        assert!(out.iter().all(|v| (v - d).abs() < 1e-12));
        dmr_volume_copy_data(fa, out.as_mut_ptr(), 4);
        assert!(out.iter().all(|v| v.abs() < 1e-9));
        dmr_volume_free(fa);
        dmr_volume_free(md);
        for h in handles {
            dmr_volume_free(h as *mut DmrVolume);
        }
    }
}

#[test]
fn mssim_of_identical_images_is_one() {
    let img: Vec<f64> = (0..256).map(|i| ((i * 37) % 17) as f64 / 17.0).collect();
    let mut out = 0.0;
    unsafe {
        assert_eq!(dmr_mssim(img.as_ptr(), img.as_ptr(), 16, 16, f64::NAN, &mut out), DmrStatus::Ok);
        assert_eq!(out, 1.0);
        assert_eq!(dmr_mssim(img.as_ptr(), img.as_ptr(), 16, 16, 1.0, ptr::null_mut()), DmrStatus::NullArgument);
    }
}

#[test]
fn registration_of_identical_images_is_near_zero() {
    let img: Vec<f64> = (0..32 * 32)
        .map(|i| {
            let (x, y) = ((i % 32) as f64 - 16.0, (i / 32) as f64 - 16.0);
            (-(x * x + y * y) / 60.0).exp()
        })
        .collect();
    let (mut dx, mut dy, mut res) = (vec![0.0; 1024], vec![0.0; 1024], vec![0.0; 1024]);
    unsafe {
        let st = dmr_register(img.as_ptr(), img.as_ptr(), 32, 32, dx.as_mut_ptr(), dy.as_mut_ptr(), res.as_mut_ptr());
        assert_eq!(st, DmrStatus::Ok);
    }
    let mean = dx.iter().zip(&dy).map(|(a, b)| a.hypot(*b)).sum::<f64>() / 1024.0;
    assert!(mean < 0.05, "{mean}");
}

#[test]
fn model_load_failure_and_missing_handle() {
    let mut m = ptr::null_mut();
    let dir = tempfile::tempdir().unwrap();
    let p = CString::new(dir.path().to_str().unwrap()).unwrap();
    unsafe {
        assert_eq!(dmr_model_load(p.as_ptr(), &mut m), DmrStatus::Io);
        let img = [0.0; 64];
        let mut out = [0.0; 64];
        assert_eq!(
            dmr_model_translate(ptr::null(), DmrDirection::AToB, img.as_ptr(), 8, 8, out.as_mut_ptr()),
            DmrStatus::NullArgument
        );
        dmr_model_free(ptr::null_mut());
    }
}

#[test]
fn model_translates_through_checkpoint() {
    use dmrimap::cyclegan::{CycleGan, DiscriminatorConfig, GeneratorConfig};
    let gen = GeneratorConfig {
        base_channels: 2,
        n_res_blocks: 1,
        ..GeneratorConfig::default()
    };
    let disc = DiscriminatorConfig {
        n_convs: 2,
        base_channels: 2,
    };
    let model = CycleGan::new(gen, disc, 3).unwrap();
    let dir = tempfile::tempdir().unwrap();
    model.save(dir.path(), None).unwrap();
    let p = CString::new(dir.path().to_str().unwrap()).unwrap();
    let img: Vec<f64> = (0..64).map(|i| (i % 8) as f64 / 8.0).collect();
    let mut m = ptr::null_mut();
    let (mut x, mut y) = (vec![0.0; 64], vec![0.0; 64]);
    unsafe {
        assert_eq!(dmr_model_load(p.as_ptr(), &mut m), DmrStatus::Ok);
        assert_eq!(dmr_model_translate(m, DmrDirection::BToA, img.as_ptr(), 8, 8, x.as_mut_ptr()), DmrStatus::Ok);
        assert_eq!(dmr_model_translate(m, DmrDirection::BToA, img.as_ptr(), 8, 8, y.as_mut_ptr()), DmrStatus::Ok);
        dmr_model_free(m);
    }
    assert_eq!(x, y);
    assert!(x.iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn header_declares_the_api() {
    let h = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/dmrimap.h")).unwrap();
    for name in [
        "dmr_last_error",
        "dmr_volume_read",
        "dmr_fit_dti",
        "dmr_mssim",
        "dmr_model_translate",
        "dmr_register",
        "typedef struct DmrVolume DmrVolume",
        "DMR_STATUS_OK",
    ] {
        assert!(h.contains(name), "{name} missing from header");
    }
}
