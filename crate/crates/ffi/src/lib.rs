//! C ABI over `avedit`.
//!
//! Objects cross the boundary as opaque handles that the caller frees with the
//! matching `*_free` function. Every fallible call returns an [`AveditStatus`];
//! on failure, `avedit_last_error()` describes what went wrong on the calling
//! thread. Panics are caught and reported as `AVEDIT_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use avedit::codec::CodecConfig;
use avedit::metrics::{ctx_f1, IntervalSet};
use avedit::model::{load_checkpoint, Model};
use avedit::pipeline::{edit_scene, EditOutput};
use avedit::sampler::{GuidanceConfig, GuidanceMode};
use avedit::world::{generate_scene, read_scene, Scene, WorldConfig};
use avedit::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AveditStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Runtime = 4,
    Panic = 5,
}

/// A loaded checkpoint.
pub struct AveditModel {
    model: Model,
}

/// A synthetic scene with the world and codec it was made under.
pub struct AveditScene {
    scene: Scene,
    world: WorldConfig,
    codec: CodecConfig,
}

/// The outcome of one edit.
pub struct AveditEdit {
    out: EditOutput,
}

/// Guidance settings; see `avedit_guidance_default`.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AveditGuidance {
    pub steps: u32,
    pub tau: u32,
    pub s_ctx: f64,
    pub s_v: f64,
    pub s_a: f64,
    /// Non-zero for plain joint sampling (one forward per step).
    pub plain: u8,
}

/// Interval-overlap scores.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct AveditCtxF1 {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> AveditStatus {
    match e {
        Error::Io(_) | Error::File { .. } => AveditStatus::Io,
        Error::Invalid(_) | Error::Shape { .. } | Error::ConfigMismatch { .. } => AveditStatus::InvalidArgument,
        _ => AveditStatus::Runtime,
    }
}

/// Runs `f`, converting errors and panics into a status plus the last-error message.
fn guard(f: impl FnOnce() -> Result<(), (AveditStatus, String)>) -> AveditStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => AveditStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            AveditStatus::Panic
        }
    }
}

fn core(e: Error) -> (AveditStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (AveditStatus, String) {
    (AveditStatus::NullPointer, format!("{what} is null"))
}

/// # Safety
/// `p` must be null or a valid NUL-terminated string.
unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, (AveditStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    // SAFETY: non-null and NUL-terminated per the caller's contract.
    let s = unsafe { CStr::from_ptr(p) };
    s.to_str()
        .map(PathBuf::from)
        .map_err(|_| (AveditStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

/// Message for the most recent failure on this thread, or null.
///
/// The pointer stays valid until the next `avedit_*` call on the same thread.
#[no_mangle]
pub extern "C" fn avedit_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn avedit_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

#[no_mangle]
pub extern "C" fn avedit_guidance_default() -> AveditGuidance {
    let g = GuidanceConfig::default();
    AveditGuidance {
        steps: g.steps as u32,
        tau: g.tau as u32,
        s_ctx: g.s_ctx,
        s_v: g.s_v,
        s_a: g.s_a,
        plain: 0,
    }
}

/// Loads a checkpoint written by `avedit train`.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn avedit_model_load(path: *const c_char, out: *mut *mut AveditModel) -> AveditStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        // SAFETY: forwarded caller contract.
        let path = unsafe { path_arg(path, "path") }?;
        let (model, _) = load_checkpoint(&path).map_err(core)?;
        // SAFETY: `out` is non-null and writable.
        unsafe { *out = Box::into_raw(Box::new(AveditModel { model })) };
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a handle from `avedit_model_load` not yet freed.
#[no_mangle]
pub unsafe extern "C" fn avedit_model_free(model: *mut AveditModel) {
    if !model.is_null() {
        // SAFETY: ownership returns to Rust exactly once.
        drop(unsafe { Box::from_raw(model) });
    }
}

/// # Safety
/// `model` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn avedit_model_num_parameters(model: *const AveditModel, out: *mut u64) -> AveditStatus {
    guard(|| {
        // SAFETY: live handle per contract.
        let m = unsafe { model.as_ref() }.ok_or_else(|| null("model"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        // SAFETY: checked non-null.
        unsafe { *out = m.model.num_parameters() as u64 };
        Ok(())
    })
}

/// Generates the default-world scene for `seed`.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn avedit_scene_generate(seed: u64, out: *mut *mut AveditScene) -> AveditStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let (world, codec) = (WorldConfig::default(), CodecConfig::default());
        let scene = generate_scene(seed, &world, &codec).map_err(core)?;
        // SAFETY: checked non-null.
        unsafe { *out = Box::into_raw(Box::new(AveditScene { scene, world, codec })) };
        Ok(())
    })
}

/// Reads a scene file; world and codec come from the dataset manifest beside it.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn avedit_scene_read(path: *const c_char, out: *mut *mut AveditScene) -> AveditStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        // SAFETY: forwarded caller contract.
        let path = unsafe { path_arg(path, "path") }?;
        let scene = read_scene(&path).map_err(core)?;
        let (world, codec) = match path.parent().map(avedit::world::read_manifest) {
            Some(Ok(m)) => (m.world, m.codec),
            _ => (WorldConfig::default(), CodecConfig::default()),
        };
        // SAFETY: checked non-null.
        unsafe { *out = Box::into_raw(Box::new(AveditScene { scene, world, codec })) };
        Ok(())
    })
}

/// # Safety
/// `scene` must be null or a live scene handle.
#[no_mangle]
pub unsafe extern "C" fn avedit_scene_free(scene: *mut AveditScene) {
    if !scene.is_null() {
        // SAFETY: ownership returns to Rust exactly once.
        drop(unsafe { Box::from_raw(scene) });
    }
}

/// The scene's target band.
///
/// # Safety
/// `scene` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn avedit_scene_band(scene: *const AveditScene, out: *mut u32) -> AveditStatus {
    guard(|| {
        // SAFETY: live handle per contract.
        let s = unsafe { scene.as_ref() }.ok_or_else(|| null("scene"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        // SAFETY: checked non-null.
        unsafe { *out = s.scene.meta.band as u32 };
        Ok(())
    })
}

/// Edits `scene`; `band < 0` keeps the scene's own band.
///
/// # Safety
/// Handles must be live; `guidance` must be readable; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn avedit_edit(
    model: *const AveditModel,
    scene: *const AveditScene,
    band: i32,
    guidance: *const AveditGuidance,
    seed: u64,
    out: *mut *mut AveditEdit,
) -> AveditStatus {
    guard(|| {
        // SAFETY: live handles per contract.
        let m = unsafe { model.as_ref() }.ok_or_else(|| null("model"))?;
        // SAFETY: as above.
        let s = unsafe { scene.as_ref() }.ok_or_else(|| null("scene"))?;
        // SAFETY: readable per contract.
        let g = unsafe { guidance.as_ref() }.ok_or_else(|| null("guidance"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let cfg = GuidanceConfig {
            steps: g.steps as usize,
            tau: g.tau as usize,
            s_ctx: g.s_ctx,
            s_v: g.s_v,
            s_a: g.s_a,
            mode: if g.plain != 0 { GuidanceMode::Plain } else { GuidanceMode::TwoStage },
        };
        let band = usize::try_from(band).ok();
        let res = edit_scene(&m.model, &s.scene, &s.world, &s.codec, band, &cfg, seed).map_err(core)?;
        // SAFETY: checked non-null.
        unsafe { *out = Box::into_raw(Box::new(AveditEdit { out: res })) };
        Ok(())
    })
}

/// # Safety
/// `edit` must be null or a live edit handle.
#[no_mangle]
pub unsafe extern "C" fn avedit_edit_free(edit: *mut AveditEdit) {
    if !edit.is_null() {
        // SAFETY: ownership returns to Rust exactly once.
        drop(unsafe { Box::from_raw(edit) });
    }
}

/// Model forwards the edit took.
///
/// # Safety
/// `edit` must be a live handle; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn avedit_edit_total_forwards(edit: *const AveditEdit, out: *mut u64) -> AveditStatus {
    guard(|| {
        // SAFETY: live handle per contract.
        let e = unsafe { edit.as_ref() }.ok_or_else(|| null("edit"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        // SAFETY: checked non-null.
        unsafe { *out = e.out.accounting.total as u64 };
        Ok(())
    })
}

/// Context scores, sync lag in frames, and whether the requested band dominates.
///
/// # Safety
/// `edit` must be a live handle; every output pointer writable.
#[no_mangle]
pub unsafe extern "C" fn avedit_edit_scores(
    edit: *const AveditEdit,
    ctx: *mut AveditCtxF1,
    sync_lag: *mut i64,
    band_dominant: *mut u8,
) -> AveditStatus {
    guard(|| {
        // SAFETY: live handle per contract.
        let e = unsafe { edit.as_ref() }.ok_or_else(|| null("edit"))?;
        if ctx.is_null() || sync_lag.is_null() || band_dominant.is_null() {
            return Err(null("output pointer"));
        }
        let s = &e.out.scores;
        // SAFETY: all checked non-null.
        unsafe {
            *ctx = AveditCtxF1 {
                precision: s.ctx.precision,
                recall: s.ctx.recall,
                f1: s.ctx.f1,
            };
            *sync_lag = s.sync_lag;
            *band_dominant = u8::from(s.band_check.dominant);
        }
        Ok(())
    })
}

/// Copies the generated audio envelope into `buf`.
///
/// `*len` is the buffer capacity on input and the envelope length on output.
/// A null `buf` only queries the length. A short buffer fails with
/// `AVEDIT_STATUS_INVALID_ARGUMENT` after reporting the needed length.
///
/// # Safety
/// `edit` must be live; `len` writable; `buf` null or valid for `*len` doubles.
#[no_mangle]
pub unsafe extern "C" fn avedit_edit_envelope(edit: *const AveditEdit, buf: *mut f64, len: *mut usize) -> AveditStatus {
    guard(|| {
        // SAFETY: live handle per contract.
        let e = unsafe { edit.as_ref() }.ok_or_else(|| null("edit"))?;
        // SAFETY: writable per contract.
        let len = unsafe { len.as_mut() }.ok_or_else(|| null("len"))?;
        let env = &e.out.envelope;
        let cap = std::mem::replace(len, env.len());
        if buf.is_null() {
            return Ok(());
        }
        if cap < env.len() {
            return Err((AveditStatus::InvalidArgument, format!("buffer holds {cap}, need {}", env.len())));
        }
        // SAFETY: `buf` is valid for `cap >= env.len()` doubles.
        unsafe { ptr::copy_nonoverlapping(env.as_ptr(), buf, env.len()) };
        Ok(())
    })
}

/// # Safety
/// `spans` must be null with `n == 0`, or valid for `2 * n` doubles.
unsafe fn spans_arg(spans: *const f64, n: usize, what: &str) -> Result<IntervalSet, (AveditStatus, String)> {
    if n == 0 {
        return Ok(IntervalSet::default());
    }
    if spans.is_null() {
        return Err(null(what));
    }
    // SAFETY: valid for 2n doubles per contract.
    let flat = unsafe { std::slice::from_raw_parts(spans, 2 * n) };
    if flat.iter().any(|v| !v.is_finite()) {
        return Err((AveditStatus::InvalidArgument, format!("{what} holds a non-finite bound")));
    }
    Ok(IntervalSet::new(flat.chunks_exact(2).map(|c| [c[0], c[1]]).collect()))
}

/// Interval Ctx-F1. Each set is `n` `[start, end)` pairs in seconds, flattened.
///
/// # Safety
/// Each span pointer must be valid for twice its count of doubles (or null
/// with a zero count); `out` writable.
#[no_mangle]
pub unsafe extern "C" fn avedit_ctx_f1(
    generated: *const f64,
    n_generated: usize,
    protected_spans: *const f64,
    n_protected: usize,
    reference: *const f64,
    n_reference: usize,
    out: *mut AveditCtxF1,
) -> AveditStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        // SAFETY: forwarded caller contract for all three.
        let (g, p, r) = unsafe {
            (
                spans_arg(generated, n_generated, "generated")?,
                spans_arg(protected_spans, n_protected, "protected")?,
                spans_arg(reference, n_reference, "reference")?,
            )
        };
        let c = ctx_f1(&g, &p, &r);
        // SAFETY: checked non-null.
        unsafe {
            *out = AveditCtxF1 {
                precision: c.precision,
                recall: c.recall,
                f1: c.f1,
            }
        };
        Ok(())
    })
}
