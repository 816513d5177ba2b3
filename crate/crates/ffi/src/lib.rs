//! C ABI over `mimforge`.
//!
//! Every fallible call returns an [`MfStatus`]; on failure the message is kept
//! per thread and read back with [`mf_last_error`]. Handles are opaque and must
//! be released with their matching `*_free` function. Panics never cross the
//! boundary; they surface as [`MfStatus::Panic`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use mimforge::config::RunConfig;
use mimforge::data::{Dataset, ImageRecord};
use mimforge::error::Error;
use mimforge::probe::{extract_features, robustness_gap, FeatureKind};
use mimforge::runner::{self, RunDir};
use mimforge::vit::{count_parameters, EncoderConfig, EncoderState};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MfStatus {
    Ok = 0,
    NullArgument = 1,
    Config = 2,
    Numeric = 3,
    Io = 4,
    Format = 5,
    InvalidArgument = 6,
    Shape = 7,
    Other = 8,
    Panic = 9,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MfFeature {
    Cls = 0,
    MeanPatch = 1,
}

/// Run configuration.
pub struct MfConfig {
    inner: RunConfig,
}

/// Frozen encoder ready for feature extraction.
pub struct MfEncoder {
    state: EncoderState<f32>,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> MfStatus {
    match e {
        Error::Config(_) => MfStatus::Config,
        e if e.is_numeric() => MfStatus::Numeric,
        Error::Io(_) => MfStatus::Io,
        Error::Format(_) => MfStatus::Format,
        Error::InvalidArgument(_) | Error::OutOfRange { .. } => MfStatus::InvalidArgument,
        Error::Dim { .. } | Error::Shape(_) | Error::Mismatch(_) | Error::Tensor { .. } => MfStatus::Shape,
        _ => MfStatus::Other,
    }
}

enum Fail {
    Null(&'static str),
    Lib(Error),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Lib(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> MfStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            MfStatus::Ok
        }
        Ok(Err(Fail::Null(arg))) => {
            set_error(format!("{arg} is null"));
            MfStatus::NullArgument
        }
        Ok(Err(Fail::Lib(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(p) => {
            let msg = p.downcast_ref::<&str>().map(|s| s.to_string()).or_else(|| p.downcast_ref::<String>().cloned());
            set_error(format!("panic: {}", msg.unwrap_or_default()));
            MfStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &'static str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(Fail::Null(name));
    }
    CStr::from_ptr(p).to_str().map_err(|_| Fail::Lib(Error::InvalidArgument(format!("{name} is not UTF-8"))))
}

unsafe fn mut_arg<'a, T>(p: *mut T, name: &'static str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or(Fail::Null(name))
}

unsafe fn ref_arg<'a, T>(p: *const T, name: &'static str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or(Fail::Null(name))
}

/// Message of the calling thread's most recent failure; empty after a success.
/// Valid until the next call on this thread.
#[no_mangle]
pub extern "C" fn mf_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn mf_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Default configuration (the toy recipe).
#[no_mangle]
pub extern "C" fn mf_config_new() -> *mut MfConfig {
    Box::into_raw(Box::new(MfConfig { inner: RunConfig::default() }))
}

/// Parses `key = value` text on top of the defaults and validates it.
///
/// # Safety
/// `text` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mf_config_parse(text: *const c_char, out: *mut *mut MfConfig) -> MfStatus {
    guard(|| {
        let text = str_arg(text, "text")?;
        let out = mut_arg(out, "out")?;
        *out = Box::into_raw(Box::new(MfConfig { inner: RunConfig::parse(text)? }));
        Ok(())
    })
}

/// Sets one key. The whole config is revalidated; on failure it is left unchanged.
///
/// # Safety
/// `cfg` must come from this library; `key` and `value` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn mf_config_set(cfg: *mut MfConfig, key: *const c_char, value: *const c_char) -> MfStatus {
    guard(|| {
        let cfg = mut_arg(cfg, "cfg")?;
        let (key, value) = (str_arg(key, "key")?, str_arg(value, "value")?);
        let mut next = cfg.inner.clone();
        next.set(key, value)?;
        next.validate()?;
        cfg.inner = next;
        Ok(())
    })
}

/// Writes the config snapshot text into `buf` (NUL-terminated) and its length,
/// excluding the NUL, into `needed`. Pass a null `buf` to query the size.
///
/// # Safety
/// `buf` must hold `cap` bytes when non-null.
#[no_mangle]
pub unsafe extern "C" fn mf_config_text(cfg: *const MfConfig, buf: *mut c_char, cap: usize, needed: *mut usize) -> MfStatus {
    guard(|| {
        let text = ref_arg(cfg, "cfg")?.inner.to_text(true);
        *mut_arg(needed, "needed")? = text.len();
        if !buf.is_null() {
            if cap <= text.len() {
                return Err(Error::InvalidArgument(format!("buffer of {cap} bytes cannot hold {} + 1", text.len())).into());
            }
            std::ptr::copy_nonoverlapping(text.as_ptr(), buf.cast::<u8>(), text.len());
            *buf.add(text.len()) = 0;
        }
        Ok(())
    })
}

/// # Safety
/// `cfg` must come from this library and not be used afterwards. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn mf_config_free(cfg: *mut MfConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

/// Encoder parameter count (pretext head excluded).
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mf_count_parameters(
    image_size: usize,
    patch_size: usize,
    depth: usize,
    width: usize,
    mlp_width: usize,
    heads: usize,
    out: *mut u64,
) -> MfStatus {
    guard(|| {
        let out = mut_arg(out, "out")?;
        let cfg = EncoderConfig { image_size, patch_size, depth, width, mlp_width, heads, drop_path_rate: 0.0, teacher_dim: 1 };
        cfg.validate()?;
        *out = count_parameters(&cfg);
        Ok(())
    })
}

/// Mean of the variant accuracies and the gap from `original`.
///
/// # Safety
/// `variants` must point to `count` values; `avg` and `delta` must be valid.
#[no_mangle]
pub unsafe extern "C" fn mf_robustness_gap(original: f64, variants: *const f64, count: usize, avg: *mut f64, delta: *mut f64) -> MfStatus {
    guard(|| {
        if variants.is_null() {
            return Err(Fail::Null("variants"));
        }
        let r = robustness_gap(original, std::slice::from_raw_parts(variants, count))?;
        *mut_arg(avg, "avg")? = r.avg;
        *mut_arg(delta, "delta")? = r.delta;
        Ok(())
    })
}

/// The encoder of `cfg`, loaded from `checkpoint` or freshly initialized from
/// the config seed when `checkpoint` is null.
///
/// # Safety
/// `cfg` must come from this library, `checkpoint` be null or NUL-terminated,
/// and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn mf_encoder_load(cfg: *const MfConfig, checkpoint: *const c_char, out: *mut *mut MfEncoder) -> MfStatus {
    guard(|| {
        let cfg = ref_arg(cfg, "cfg")?;
        let out = mut_arg(out, "out")?;
        let path = if checkpoint.is_null() { None } else { Some(PathBuf::from(str_arg(checkpoint, "checkpoint")?)) };
        let state = runner::load_encoder(&cfg.inner, path.as_deref())?;
        *out = Box::into_raw(Box::new(MfEncoder { state }));
        Ok(())
    })
}

/// Feature width of the encoder.
///
/// # Safety
/// `enc` must come from this library or be null (returns 0).
#[no_mangle]
pub unsafe extern "C" fn mf_encoder_width(enc: *const MfEncoder) -> usize {
    enc.as_ref().map_or(0, |e| e.state.encoder.cfg.width)
}

/// Features of `count` images given as channel-major 8-bit pixels
/// (`count · 3 · S · S` bytes, S the encoder image size). Writes
/// `count · width` floats to `out`.
///
/// # Safety
/// Buffers must be valid for the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn mf_encoder_features(
    enc: *const MfEncoder,
    pixels: *const u8,
    count: usize,
    kind: MfFeature,
    out: *mut f32,
    out_len: usize,
) -> MfStatus {
    guard(|| {
        let enc = ref_arg(enc, "enc")?;
        if pixels.is_null() {
            return Err(Fail::Null("pixels"));
        }
        if out.is_null() {
            return Err(Fail::Null("out"));
        }
        let cfg = &enc.state.encoder.cfg;
        let px = 3 * cfg.image_size * cfg.image_size;
        if count == 0 || out_len != count * cfg.width {
            return Err(Error::InvalidArgument(format!("{count} images need an output of {} floats, got {out_len}", count * cfg.width)).into());
        }
        let src = std::slice::from_raw_parts(pixels, count * px);
        let records = src.chunks(px).map(|p| ImageRecord { pixels: p.to_vec(), label: 0 }).collect();
        let ds = Dataset { image_size: cfg.image_size, class_count: 1, records };
        let kind = match kind {
            MfFeature::Cls => FeatureKind::Cls,
            MfFeature::MeanPatch => FeatureKind::MeanPatch,
        };
        let f = extract_features(&enc.state.encoder, &enc.state.params, &ds, kind)?;
        std::slice::from_raw_parts_mut(out, out_len).copy_from_slice(f.data());
        Ok(())
    })
}

/// # Safety
/// `enc` must come from this library and not be used afterwards. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn mf_encoder_free(enc: *mut MfEncoder) {
    if !enc.is_null() {
        drop(Box::from_raw(enc));
    }
}

/// Pretrains per `cfg` into `run_dir` (or the default run directory when
/// null) and reports the optimizer step reached and the last step's loss.
///
/// # Safety
/// `cfg` must come from this library; `run_dir` null or NUL-terminated;
/// `steps` and `final_loss` valid.
#[no_mangle]
pub unsafe extern "C" fn mf_pretrain(cfg: *const MfConfig, run_dir: *const c_char, steps: *mut u64, final_loss: *mut f64) -> MfStatus {
    guard(|| {
        let mut cfg = ref_arg(cfg, "cfg")?.inner.clone();
        if !run_dir.is_null() {
            cfg.run.dir = Some(PathBuf::from(str_arg(run_dir, "run_dir")?));
        }
        let steps = mut_arg(steps, "steps")?;
        let final_loss = mut_arg(final_loss, "final_loss")?;
        let mut dir = RunDir::create(&cfg, "pretrain")?;
        let out = runner::pretrain_command(&cfg, &mut dir, None)?;
        *steps = out.opt.step;
        *final_loss = out.tail_loss(1);
        Ok(())
    })
}
