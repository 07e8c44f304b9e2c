//! C ABI over the `scaseg` decoder.
//!
//! Every fallible function returns a [`ScasegStatus`] and writes its result
//! through an out-pointer. On failure a message is kept per thread and can be
//! read with [`scaseg_last_error`]. Objects are opaque handles released with
//! the matching `*_free` function; passing NULL to a free function is a no-op.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use scaseg::analysis::closed_form_flops;
use scaseg::attention::MixerKind;
use scaseg::config::RunConfig;
use scaseg::decoder::{self, DecoderParams};
use scaseg::synth::{generate_pyramid, splitmix64_next, FeaturePyramid};
use scaseg::tensor::io as scat;
use scaseg::{Error, Tensor};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScasegStatus {
    Ok = 0,
    /// A required pointer argument was NULL.
    NullPointer = 1,
    /// An argument was malformed (bad UTF-8, zero extent, short buffer...).
    InvalidArgument = 2,
    /// The configuration failed to parse or validate.
    Config = 3,
    /// Tensor shapes are inconsistent with the operation.
    Shape = 4,
    /// A file could not be read or written.
    Io = 5,
    /// A file is not valid SCAT.
    Format = 6,
    /// An internal invariant failed; the library caught the panic.
    Internal = 7,
}

/// Token mixer selector.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScasegMixer {
    Sa = 0,
    Ca = 1,
    Sca = 2,
}

impl From<ScasegMixer> for MixerKind {
    fn from(m: ScasegMixer) -> Self {
        match m {
            ScasegMixer::Sa => MixerKind::Sa,
            ScasegMixer::Ca => MixerKind::Ca,
            ScasegMixer::Sca => MixerKind::Sca,
        }
    }
}

/// Dense fp64 tensor.
pub struct ScasegTensor(Tensor);

/// A resolved run configuration with its initialized decoder parameters.
pub struct ScasegDecoder {
    config: RunConfig,
    params: DecoderParams,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(ScasegStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            _ if e.is_config() => ScasegStatus::Config,
            Error::Io { .. } => ScasegStatus::Io,
            Error::Format { .. } => ScasegStatus::Format,
            Error::InstrumentationDisabled => ScasegStatus::InvalidArgument,
            _ => ScasegStatus::Shape,
        };
        Failure(status, e.to_string())
    }
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(ScasegStatus::InvalidArgument, msg.into())
}

fn set_last_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior NULs removed");
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(c));
}

/// Runs `f`, records any failure and converts panics into `Internal`.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> ScasegStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|slot| *slot.borrow_mut() = None);
            ScasegStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_last_error(msg);
            status
        }
        Err(panic) => {
            let msg = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".to_string());
            set_last_error(format!("internal error: {msg}"));
            ScasegStatus::Internal
        }
    }
}

fn non_null<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    // SAFETY: callers pass either NULL or a pointer obtained from this library
    // (or a valid C object of type T) that outlives the call.
    unsafe { p.as_ref() }.ok_or_else(|| Failure(ScasegStatus::NullPointer, format!("{what} is NULL")))
}

fn out_ptr<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    // SAFETY: as for `non_null`; the caller owns the pointee for writing.
    unsafe { p.as_mut() }.ok_or_else(|| Failure(ScasegStatus::NullPointer, format!("{what} is NULL")))
}

fn c_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure(ScasegStatus::NullPointer, format!("{what} is NULL")));
    }
    // SAFETY: non-NULL and documented to be NUL-terminated.
    unsafe { CStr::from_ptr(p) }
        .to_str()
        .map_err(|_| invalid(format!("{what} is not valid UTF-8")))
}

fn boxed<T>(v: T) -> *mut T {
    Box::into_raw(Box::new(v))
}

/// Message of the last failed call on this thread, or NULL after a success.
/// The pointer stays valid until the next call into the library on this
/// thread.
#[no_mangle]
pub extern "C" fn scaseg_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn scaseg_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Releases a string returned by this library.
///
/// # Safety
/// `s` must be NULL or a string returned by this library, freed once.
#[no_mangle]
pub unsafe extern "C" fn scaseg_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

// ------------------------------------------------------------------ tensors

/// Copies `shape[0..rank]` and `numel` doubles from `data` into a new tensor.
///
/// # Safety
/// `shape` must point to `rank` extents and `data` to their product of
/// doubles (`data` may be NULL when that product is zero).
#[no_mangle]
pub unsafe extern "C" fn scaseg_tensor_new(
    shape: *const usize,
    rank: usize,
    data: *const f64,
    out: *mut *mut ScasegTensor,
) -> ScasegStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        if rank > 0 && shape.is_null() {
            return Err(Failure(ScasegStatus::NullPointer, "shape is NULL".into()));
        }
        let dims = if rank == 0 { Vec::new() } else { std::slice::from_raw_parts(shape, rank).to_vec() };
        let numel = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| invalid("shape overflows"))?;
        let values = if numel == 0 {
            Vec::new()
        } else if data.is_null() {
            return Err(Failure(ScasegStatus::NullPointer, "data is NULL".into()));
        } else {
            std::slice::from_raw_parts(data, numel).to_vec()
        };
        *out = boxed(ScasegTensor(Tensor::new(dims, values)?));
        Ok(())
    })
}

/// Number of axes.
///
/// # Safety
/// `t` must be NULL or a live tensor handle.
#[no_mangle]
pub unsafe extern "C" fn scaseg_tensor_rank(t: *const ScasegTensor) -> usize {
    t.as_ref().map_or(0, |t| t.0.ndim())
}

/// Number of elements.
///
/// # Safety
/// `t` must be NULL or a live tensor handle.
#[no_mangle]
pub unsafe extern "C" fn scaseg_tensor_numel(t: *const ScasegTensor) -> usize {
    t.as_ref().map_or(0, |t| t.0.numel())
}

/// Copies the extents into `shape`, which holds `capacity` entries.
///
/// # Safety
/// `t` must be a live tensor handle and `shape` must hold `capacity` entries.
#[no_mangle]
pub unsafe extern "C" fn scaseg_tensor_shape(t: *const ScasegTensor, shape: *mut usize, capacity: usize) -> ScasegStatus {
    guard(|| {
        let t = &non_null(t, "tensor")?.0;
        if shape.is_null() {
            return Err(Failure(ScasegStatus::NullPointer, "shape is NULL".into()));
        }
        if capacity < t.ndim() {
            return Err(invalid(format!("shape buffer holds {capacity} entries, tensor has rank {}", t.ndim())));
        }
        std::slice::from_raw_parts_mut(shape, t.ndim()).copy_from_slice(t.shape());
        Ok(())
    })
}

/// Row-major element buffer, valid while the tensor lives.
///
/// # Safety
/// `t` must be NULL or a live tensor handle.
#[no_mangle]
pub unsafe extern "C" fn scaseg_tensor_data(t: *const ScasegTensor) -> *const f64 {
    t.as_ref().map_or(ptr::null(), |t| t.0.data().as_ptr())
}

/// Reads a SCAT file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn scaseg_tensor_read_scat(path: *const c_char, out: *mut *mut ScasegTensor) -> ScasegStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let path = PathBuf::from(c_str(path, "path")?);
        *out = boxed(ScasegTensor(scat::read(path)?));
        Ok(())
    })
}

/// Writes a SCAT file (values stored as f32).
///
/// # Safety
/// `t` must be a live tensor handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn scaseg_tensor_write_scat(t: *const ScasegTensor, path: *const c_char) -> ScasegStatus {
    guard(|| {
        let t = &non_null(t, "tensor")?.0;
        scat::write(c_str(path, "path")?, t)?;
        Ok(())
    })
}

/// # Safety
/// `t` must be NULL or a tensor handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn scaseg_tensor_free(t: *mut ScasegTensor) {
    if !t.is_null() {
        drop(Box::from_raw(t));
    }
}

// ------------------------------------------------------------------ decoder

/// Builds a decoder from a JSON run configuration (`"{}"` for defaults).
/// Parameters are initialized from the configuration's `seed`.
///
/// # Safety
/// `json` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn scaseg_decoder_new(json: *const c_char, out: *mut *mut ScasegDecoder) -> ScasegStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let config = RunConfig::from_json(c_str(json, "json")?)?;
        let params = DecoderParams::init(&config.decoder, config.pyramid.channels, config.seed)?;
        *out = boxed(ScasegDecoder { config, params });
        Ok(())
    })
}

/// The resolved configuration as JSON; release with [`scaseg_string_free`].
///
/// # Safety
/// `d` must be a live decoder handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn scaseg_decoder_config_json(d: *const ScasegDecoder, out: *mut *mut c_char) -> ScasegStatus {
    guard(|| {
        let d = non_null(d, "decoder")?;
        let out = out_ptr(out, "out")?;
        *out = CString::new(d.config.to_json()).expect("JSON has no NUL").into_raw();
        Ok(())
    })
}

/// Decodes four feature maps `[B, Cᵢ, Hᵢ, Wᵢ]` (stage 1 first) into the class
/// logits `[B, num_classes, H₁, W₁]`.
///
/// # Safety
/// `d` must be a live decoder handle, `features` must point to four live
/// tensor handles, and `mask` must be writable.
#[no_mangle]
pub unsafe extern "C" fn scaseg_decoder_forward(
    d: *const ScasegDecoder,
    features: *const *const ScasegTensor,
    mask: *mut *mut ScasegTensor,
) -> ScasegStatus {
    guard(|| {
        let d = non_null(d, "decoder")?;
        let mask = out_ptr(mask, "mask")?;
        if features.is_null() {
            return Err(Failure(ScasegStatus::NullPointer, "features is NULL".into()));
        }
        let handles = std::slice::from_raw_parts(features, 4);
        let mut stages = Vec::with_capacity(4);
        for (i, &h) in handles.iter().enumerate() {
            stages.push(non_null(h, &format!("features[{i}]"))?.0.clone());
        }
        let pyramid = FeaturePyramid {
            features: stages.try_into().expect("four stages"),
        };
        *mask = boxed(ScasegTensor(decoder::decode(&pyramid, &d.params)?.mask));
        Ok(())
    })
}

/// Decodes the synthetic pyramid described by the configuration.
///
/// # Safety
/// `d` must be a live decoder handle and `mask` writable.
#[no_mangle]
pub unsafe extern "C" fn scaseg_decoder_forward_synthetic(d: *const ScasegDecoder, mask: *mut *mut ScasegTensor) -> ScasegStatus {
    guard(|| {
        let d = non_null(d, "decoder")?;
        let mask = out_ptr(mask, "mask")?;
        let pyramid = generate_pyramid(&d.config.pyramid)?;
        *mask = boxed(ScasegTensor(decoder::decode(&pyramid, &d.params)?.mask));
        Ok(())
    })
}

/// Multiply-accumulates of one decode of the synthetic pyramid.
///
/// # Safety
/// `d` must be a live decoder handle and `macs` writable.
#[no_mangle]
pub unsafe extern "C" fn scaseg_decoder_count_macs(d: *const ScasegDecoder, macs: *mut u64) -> ScasegStatus {
    guard(|| {
        let d = non_null(d, "decoder")?;
        let macs = out_ptr(macs, "macs")?;
        let pyramid = generate_pyramid(&d.config.pyramid)?;
        *macs = decoder::count_decode_macs(&pyramid, &d.params)?;
        Ok(())
    })
}

/// # Safety
/// `d` must be NULL or a decoder handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn scaseg_decoder_free(d: *mut ScasegDecoder) {
    if !d.is_null() {
        drop(Box::from_raw(d));
    }
}

// ------------------------------------------------------------------ utility

/// Attention MACs of one mixer on `n` tokens with `c` channels and a single
/// head: `2·n²·c` for SA/CA, `n² + n²·c` for SCA.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn scaseg_closed_form_flops(mixer: ScasegMixer, n: u64, c: u64, out: *mut u64) -> ScasegStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let sa = n.checked_mul(n).and_then(|n2| n2.checked_mul(c)).and_then(|x| x.checked_mul(2));
        if sa.is_none() {
            return Err(invalid(format!("n={n} c={c} overflows 64 bits")));
        }
        *out = closed_form_flops(mixer.into(), n, c);
        Ok(())
    })
}

/// One splitmix64 step: returns the output and advances `*state`.
///
/// # Safety
/// `state` must be NULL or writable; NULL returns 0.
#[no_mangle]
pub unsafe extern "C" fn scaseg_splitmix64_next(state: *mut u64) -> u64 {
    match state.as_mut() {
        Some(s) => {
            let (value, next) = splitmix64_next(*s);
            *s = next;
            value
        }
        None => 0,
    }
}
