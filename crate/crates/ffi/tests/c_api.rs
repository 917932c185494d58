use std::ffi::{CStr, CString};
use std::ptr;

use sphdiff::config::RunConfig;
use sphdiff::pipeline::{demos, train_run, CHECKPOINT_FILE};
use sphdiff::so3::{wigner_d, Rotation};
use sphdiff_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(sphdiff_last_error()) }.to_string_lossy().into_owned()
}

fn cstr(p: &std::path::Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

#[test]
fn version_is_crate_version() {
    let v = unsafe { CStr::from_ptr(sphdiff_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

#[test]
fn wigner_matches_library() {
    let r = Rotation::from_axis_angle(nalgebra::Vector3::new(1.0, 2.0, -0.5), 0.7);
    let rot = r.to_row_major();
    let mut out = vec![0.0; 25];
    let s = unsafe { sphdiff_wigner_d(2, rot.as_ptr(), out.as_mut_ptr(), out.len()) };
    assert_eq!(s, SphdiffStatus::Ok);
    assert_eq!(last_error(), "");
    let d = wigner_d(2, &r).unwrap();
    for i in 0..5 {
        for j in 0..5 {
            assert_eq!(out[i * 5 + j], d[(i, j)]);
        }
    }
}

#[test]
fn wigner_reports_errors() {
    let rot = Rotation::identity().to_row_major();
    let mut out = vec![0.0; 8];
    let s = unsafe { sphdiff_wigner_d(1, rot.as_ptr(), out.as_mut_ptr(), out.len()) };
    assert_eq!(s, SphdiffStatus::BufferTooSmall);
    assert!(last_error().contains("need 9"));

    let s = unsafe { sphdiff_wigner_d(1, ptr::null(), out.as_mut_ptr(), out.len()) };
    assert_eq!(s, SphdiffStatus::NullPointer);

    let bad = [2.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
    let s = unsafe { sphdiff_wigner_d(1, bad.as_ptr(), out.as_mut_ptr(), out.len()) };
    assert_ne!(s, SphdiffStatus::Ok);

    let mut big = vec![0.0; 400];
    let s = unsafe { sphdiff_wigner_d(9, rot.as_ptr(), big.as_mut_ptr(), big.len()) };
    assert_eq!(s, SphdiffStatus::InvalidArgument);
    assert!(!last_error().is_empty());
}

#[test]
fn gen_demos_writes_jsonl() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("demos.jsonl");
    let s = unsafe { sphdiff_gen_demos(ptr::null(), 3, 7, cstr(&out).as_ptr()) };
    assert_eq!(s, SphdiffStatus::Ok, "{}", last_error());
    let text = std::fs::read_to_string(&out).unwrap();
    assert_eq!(text.lines().count(), 3);

    let s = unsafe { sphdiff_gen_demos(cstr(&dir.path().join("missing.toml")).as_ptr(), 3, 7, cstr(&out).as_ptr()) };
    assert_eq!(s, SphdiffStatus::Io);
    let s = unsafe { sphdiff_gen_demos(ptr::null(), 3, 7, ptr::null()) };
    assert_eq!(s, SphdiffStatus::NullPointer);
}

#[test]
fn policy_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig { widths: vec![2, 4], encoder_hidden: vec![4], encoder_out: 4, epochs: 1, demos: 2, ..Default::default() };
    train_run(&cfg, &demos(&cfg).unwrap(), dir.path(), |_| {}).unwrap();
    let ckpt = cstr(&dir.path().join(CHECKPOINT_FILE));

    let mut policy = ptr::null_mut();
    let s = unsafe { sphdiff_policy_load(ckpt.as_ptr(), ptr::null(), &mut policy) };
    assert_eq!(s, SphdiffStatus::Ok, "{}", last_error());
    let (mut history, mut horizon) = (0usize, 0usize);
    assert_eq!(unsafe { sphdiff_policy_shape(policy, &mut history, &mut horizon) }, SphdiffStatus::Ok);
    assert_eq!((history, horizon), (cfg.history, cfg.horizon));

    let points = [0.3, 0.0, 0.0, 0.4, 0.0, 0.0, 0.3, 0.1, 0.0, 0.3, 0.0, 0.05];
    let colors = [1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
    let mut frame = vec![0.0, 0.0, 0.25];
    frame.extend(Rotation::identity().to_row_major());
    frame.push(1.0);
    let frames: Vec<f64> = frame.iter().copied().cycle().take(SPHDIFF_POSE_LEN * history).collect();
    let act = |seed: u64, out: &mut Vec<f64>| unsafe {
        sphdiff_policy_act(policy, points.as_ptr(), colors.as_ptr(), 4, frames.as_ptr(), history, seed, out.as_mut_ptr(), out.len())
    };
    let mut a = vec![0.0; SPHDIFF_POSE_LEN * horizon];
    let mut b = a.clone();
    assert_eq!(act(3, &mut a), SphdiffStatus::Ok, "{}", last_error());
    assert_eq!(act(3, &mut b), SphdiffStatus::Ok);
    assert_eq!(a, b);
    assert!(a.iter().all(|v| v.is_finite()));
    let mut short = vec![0.0; 5];
    assert_eq!(act(3, &mut short), SphdiffStatus::BufferTooSmall);

    unsafe { sphdiff_policy_free(policy) };
    unsafe { sphdiff_policy_free(ptr::null_mut()) };

    let wrong = cstr(&dir.path().join("nope.json"));
    let mut p2 = ptr::null_mut();
    let s = unsafe { sphdiff_policy_load(wrong.as_ptr(), ptr::null(), &mut p2) };
    assert_eq!(s, SphdiffStatus::Io);
    assert!(p2.is_null());
}

#[test]
fn header_declares_every_export() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/sphdiff.h")).unwrap();
    for f in [
        "sphdiff_last_error",
        "sphdiff_version",
        "sphdiff_wigner_d",
        "sphdiff_verify",
        "sphdiff_gen_demos",
        "sphdiff_policy_load",
        "sphdiff_policy_free",
        "sphdiff_policy_shape",
        "sphdiff_policy_act",
    ] {
        assert!(header.contains(&format!("{f}(")), "{f} missing from header");
    }
    assert!(header.contains("typedef struct SphdiffPolicy SphdiffPolicy;"));
}
