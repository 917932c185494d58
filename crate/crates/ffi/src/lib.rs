//! C interface to `sphdiff`.
//!
//! Every function returns a [`SphdiffStatus`]; on failure the message is
//! available from [`sphdiff_last_error`] on the same thread. Policies are
//! opaque handles created by [`sphdiff_policy_load`] and released with
//! [`sphdiff_policy_free`].
//!
//! A pose is 13 doubles: position (3), rotation matrix row-major (9) and
//! gripper aperture (1).

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sphdiff::autodiff::ParamStore;
use sphdiff::bench::{gen_demos, CoupledNoise, Policy, TaskSpec};
use sphdiff::canonical::{EndEffectorState, SceneObservation, StateFrame, StateWindow};
use sphdiff::so3::{wigner_d, Rotation};
use sphdiff::verify::{run_suite, VerifyOptions};
use sphdiff::Error;

/// Doubles per pose.
pub const SPHDIFF_POSE_LEN: usize = 13;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SphdiffStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Io = 4,
    Checkpoint = 5,
    DegenerateRotation = 6,
    BufferTooSmall = 7,
    Panic = 8,
}

/// Trained policy: configuration plus parameters.
pub struct SphdiffPolicy {
    policy: Policy,
    params: ParamStore,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

struct Fail(SphdiffStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::InvalidArgument(_) | Error::UnsupportedDegree { .. } | Error::Json(_) => SphdiffStatus::InvalidArgument,
            Error::Config { .. } => SphdiffStatus::Config,
            Error::Io(_) => SphdiffStatus::Io,
            Error::Checkpoint(_) => SphdiffStatus::Checkpoint,
            Error::DegenerateRotation(_) => SphdiffStatus::DegenerateRotation,
        };
        Fail(status, e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(SphdiffStatus::NullPointer, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> SphdiffStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            SphdiffStatus::Ok
        }
        Ok(Err(Fail(s, m))) => {
            set_error(&m);
            s
        }
        Err(_) => {
            set_error("internal panic");
            SphdiffStatus::Panic
        }
    }
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    let s = CStr::from_ptr(p).to_str().map_err(|_| Fail(SphdiffStatus::InvalidArgument, format!("{what} is not UTF-8")))?;
    Ok(PathBuf::from(s))
}

unsafe fn slice_arg<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

fn pose(v: &[f64]) -> Result<EndEffectorState, Fail> {
    let rot = Rotation::from_row_major(&v[3..12])?;
    Ok(EndEffectorState::new(Vector3::new(v[0], v[1], v[2]), rot, v[12]))
}

/// Message of the last failed call on this thread; empty after a success.
/// Valid until the next call on this thread.
#[no_mangle]
pub extern "C" fn sphdiff_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version, static storage.
#[no_mangle]
pub extern "C" fn sphdiff_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Writes the `(2l+1)²` Wigner matrix of degree `l` for the row-major
/// rotation `rot` into `out`, row-major.
///
/// # Safety
/// `rot` must point to 9 doubles and `out` to `out_len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn sphdiff_wigner_d(l: u32, rot: *const f64, out: *mut f64, out_len: usize) -> SphdiffStatus {
    guard(|| {
        let r = Rotation::from_row_major(slice_arg(rot, 9, "rot")?)?;
        let d = wigner_d(l as usize, &r)?;
        let n = d.nrows();
        if out.is_null() {
            return Err(null("out"));
        }
        if out_len < n * n {
            return Err(Fail(SphdiffStatus::BufferTooSmall, format!("need {} doubles, got {out_len}", n * n)));
        }
        let out = std::slice::from_raw_parts_mut(out, n * n);
        for i in 0..n {
            for j in 0..n {
                out[i * n + j] = d[(i, j)];
            }
        }
        Ok(())
    })
}

/// Runs the invariant suite with default trial counts; `*passed` is 1 when
/// every check passes. `report_path` (nullable) receives the JSON report.
///
/// # Safety
/// `passed` must be writable; `report_path` null or a C string.
#[no_mangle]
pub unsafe extern "C" fn sphdiff_verify(seed: u64, report_path: *const c_char, passed: *mut i32) -> SphdiffStatus {
    guard(|| {
        if passed.is_null() {
            return Err(null("passed"));
        }
        let report = run_suite(VerifyOptions { seed, ..Default::default() })?;
        if !report_path.is_null() {
            let p = path_arg(report_path, "report_path")?;
            let json = serde_json::to_string_pretty(&report).map_err(Error::from)?;
            std::fs::write(p, json).map_err(Error::from)?;
        }
        *passed = i32::from(report.passed);
        Ok(())
    })
}

/// Writes `n` demonstrations of the default task (or the TOML task at
/// `spec_path`, nullable) to `out_path` as JSON Lines.
///
/// # Safety
/// `out_path` must be a C string; `spec_path` null or a C string.
#[no_mangle]
pub unsafe extern "C" fn sphdiff_gen_demos(spec_path: *const c_char, n: usize, seed: u64, out_path: *const c_char) -> SphdiffStatus {
    guard(|| {
        let out = path_arg(out_path, "out_path")?;
        let spec = if spec_path.is_null() { TaskSpec::default() } else { TaskSpec::load(&path_arg(spec_path, "spec_path")?)? };
        gen_demos(&spec, n, &mut ChaCha8Rng::seed_from_u64(seed))?.save(&out)?;
        Ok(())
    })
}

/// Loads a checkpoint. `config_path` may be null to use the resolved config
/// stored next to the checkpoint. On success `*out` owns a new handle.
///
/// # Safety
/// `ckpt_path` must be a C string, `config_path` null or a C string, `out`
/// writable.
#[no_mangle]
pub unsafe extern "C" fn sphdiff_policy_load(ckpt_path: *const c_char, config_path: *const c_char, out: *mut *mut SphdiffPolicy) -> SphdiffStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = std::ptr::null_mut();
        let ckpt = path_arg(ckpt_path, "ckpt_path")?;
        let cfg = if config_path.is_null() { None } else { Some(path_arg(config_path, "config_path")?) };
        let (_, policy, params) = sphdiff::pipeline::load_policy(&ckpt, cfg.as_deref().map(Path::new))?;
        *out = Box::into_raw(Box::new(SphdiffPolicy { policy, params }));
        Ok(())
    })
}

/// Releases a handle; null is ignored.
///
/// # Safety
/// `policy` must come from [`sphdiff_policy_load`] and not be used again.
#[no_mangle]
pub unsafe extern "C" fn sphdiff_policy_free(policy: *mut SphdiffPolicy) {
    if !policy.is_null() {
        drop(Box::from_raw(policy));
    }
}

/// Frames the policy conditions on and steps it returns per call.
///
/// # Safety
/// `policy` must be a live handle; `history` and `horizon` writable.
#[no_mangle]
pub unsafe extern "C" fn sphdiff_policy_shape(policy: *const SphdiffPolicy, history: *mut usize, horizon: *mut usize) -> SphdiffStatus {
    guard(|| {
        let p = policy.as_ref().ok_or_else(|| null("policy"))?;
        if history.is_null() || horizon.is_null() {
            return Err(null("history/horizon"));
        }
        *history = p.policy.config().encoder.history;
        *horizon = p.policy.config().sdtu.horizon;
        Ok(())
    })
}

/// Samples an action chunk. The point cloud (`n_points` xyz and rgb
/// triples) is shared by all `n_frames` frames, whose gripper poses are in
/// `frames` (`n_frames × 13`, oldest first); `n_frames` must equal the
/// policy history. `out` receives `horizon × 13` doubles in world frame.
/// The same `seed` gives the same chunk.
///
/// # Safety
/// All pointers must reference the stated number of doubles.
#[no_mangle]
pub unsafe extern "C" fn sphdiff_policy_act(
    policy: *const SphdiffPolicy,
    points: *const f64,
    colors: *const f64,
    n_points: usize,
    frames: *const f64,
    n_frames: usize,
    seed: u64,
    out: *mut f64,
    out_len: usize,
) -> SphdiffStatus {
    guard(|| {
        let p = policy.as_ref().ok_or_else(|| null("policy"))?;
        let pts = slice_arg(points, 3 * n_points, "points")?;
        let cols = slice_arg(colors, 3 * n_points, "colors")?;
        let fr = slice_arg(frames, SPHDIFF_POSE_LEN * n_frames, "frames")?;
        let obs = SceneObservation::new(
            pts.chunks(3).map(|c| Vector3::new(c[0], c[1], c[2])).collect(),
            cols.chunks(3).map(|c| [c[0], c[1], c[2]]).collect(),
        )?;
        let frames = fr
            .chunks(SPHDIFF_POSE_LEN)
            .map(|f| Ok(StateFrame { obs: obs.clone(), ee: vec![pose(f)?] }))
            .collect::<Result<Vec<_>, Fail>>()?;
        let horizon = p.policy.config().sdtu.horizon;
        if out.is_null() {
            return Err(null("out"));
        }
        if out_len < horizon * SPHDIFF_POSE_LEN {
            return Err(Fail(SphdiffStatus::BufferTooSmall, format!("need {} doubles, got {out_len}", horizon * SPHDIFF_POSE_LEN)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut noise = CoupledNoise::new(&mut rng, Rotation::identity(), 1);
        let chunk = p.policy.act(&p.params, &StateWindow { frames }, &mut noise)?;
        let out = std::slice::from_raw_parts_mut(out, horizon * SPHDIFF_POSE_LEN);
        for (dst, step) in out.chunks_mut(SPHDIFF_POSE_LEN).zip(&chunk.steps) {
            let e = &step[0];
            dst[..3].copy_from_slice(e.position.as_slice());
            dst[3..12].copy_from_slice(&e.rotation.to_row_major());
            dst[12] = e.aperture;
        }
        Ok(())
    })
}
