//! C interface to the tokenizer.
//!
//! Every fallible function returns an [`InfotokStatus`]; on failure the
//! message is available from [`infotok_last_error`] on the same thread.
//! Images cross the boundary as row-major `height × width × channels` arrays
//! of `double` in `[0, 1]`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use infotok::dtf::DtfConfig;
use infotok::imagegrid::Image;
use infotok::infotheory::{self, RateDistortionQuery};
use infotok::nanonet::checkpoint::Checkpoint;
use infotok::pipeline::{Selection, TokenStream, Tokenizer};
use infotok::Error;

pub const INFOTOK_DEFAULT_EPSILON: f64 = 0.05;
pub const INFOTOK_DEFAULT_ALPHA: f64 = 0.3;

#[repr(i32)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InfotokStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Parse = 4,
    UnsupportedFormat = 5,
    InvalidLayout = 6,
    Config = 7,
    Capacity = 8,
    Domain = 9,
    Estimation = 10,
    ModelMismatch = 11,
    TrainingDiverged = 12,
    OracleTooLarge = 13,
    Panic = 14,
}

impl From<&Error> for InfotokStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Parse(_) => Self::Parse,
            Error::UnsupportedFormat(_) => Self::UnsupportedFormat,
            Error::InvalidLayout(_) => Self::InvalidLayout,
            Error::Config(_) => Self::Config,
            Error::Capacity { .. } => Self::Capacity,
            Error::Domain(_) => Self::Domain,
            Error::Estimation(_) => Self::Estimation,
            Error::OracleTooLarge(_) => Self::OracleTooLarge,
            Error::ModelMismatch { .. } => Self::ModelMismatch,
            Error::TrainingDiverged { .. } => Self::TrainingDiverged,
            Error::Io { .. } => Self::Io,
        }
    }
}

/// Opaque handle to a loaded checkpoint.
pub struct InfotokModel {
    checkpoint: Checkpoint,
}

/// Shape of the images a model accepts.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct InfotokModelInfo {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub num_global: usize,
    pub patch_count: usize,
    pub codebook_size: usize,
    pub checksum: u32,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

struct Failure(InfotokStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(InfotokStatus::from(&e), e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(InfotokStatus::NullPointer, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> InfotokStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            InfotokStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            InfotokStatus::Panic
        }
    }
}

unsafe fn model<'a>(handle: *const InfotokModel) -> Result<&'a Checkpoint, Failure> {
    handle.as_ref().map(|m| &m.checkpoint).ok_or_else(|| null("model"))
}

unsafe fn slice<'a, T>(data: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if data.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(data, len))
}

fn leak<T>(v: Vec<T>, out: *mut *mut T, out_len: *mut usize) {
    let boxed = v.into_boxed_slice();
    unsafe {
        *out_len = boxed.len();
        *out = Box::into_raw(boxed) as *mut T;
    }
}

/// Message of the last failure on this thread; empty after a success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn infotok_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Loads a checkpoint file. On success `*out` owns a handle to be released
/// with [`infotok_model_free`].
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn infotok_model_load(path: *const c_char, out: *mut *mut InfotokModel) -> InfotokStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let p = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| Failure(InfotokStatus::InvalidArgument, "path is not UTF-8".into()))?;
        let checkpoint = Checkpoint::load(p)?;
        *out = Box::into_raw(Box::new(InfotokModel { checkpoint }));
        Ok(())
    })
}

/// Parses a checkpoint held in memory.
///
/// # Safety
/// `bytes` must point to `len` readable bytes and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn infotok_model_from_bytes(
    bytes: *const u8,
    len: usize,
    out: *mut *mut InfotokModel,
) -> InfotokStatus {
    guard(|| {
        let data = slice(bytes, len, "bytes")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let checkpoint = Checkpoint::from_bytes(data)?;
        *out = Box::into_raw(Box::new(InfotokModel { checkpoint }));
        Ok(())
    })
}

/// Releases a handle from [`infotok_model_load`]. Null is ignored.
///
/// # Safety
/// `handle` must be null or a live handle that is not used afterwards.
#[no_mangle]
pub unsafe extern "C" fn infotok_model_free(handle: *mut InfotokModel) {
    if !handle.is_null() {
        drop(Box::from_raw(handle));
    }
}

/// # Safety
/// `handle` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn infotok_model_info(handle: *const InfotokModel, out: *mut InfotokModelInfo) -> InfotokStatus {
    guard(|| {
        let ck = model(handle)?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let c = &ck.params.config;
        *out = InfotokModelInfo {
            height: c.image_height,
            width: c.image_width,
            channels: c.channels,
            num_global: c.num_global,
            patch_count: c.layout()?.patch_count(),
            codebook_size: c.codebook_size,
            checksum: ck.checksum(),
        };
        Ok(())
    })
}

/// Encodes an image with entropy-driven token filtering. `*out_bytes`
/// receives a serialized token stream to be released with
/// [`infotok_bytes_free`].
///
/// # Safety
/// `pixels` must point to `len` doubles; `out_bytes` and `out_len` must be
/// writable.
#[no_mangle]
pub unsafe extern "C" fn infotok_tokenize(
    handle: *const InfotokModel,
    pixels: *const f64,
    len: usize,
    epsilon: f64,
    alpha: f64,
    out_bytes: *mut *mut u8,
    out_len: *mut usize,
) -> InfotokStatus {
    guard(|| {
        let ck = model(handle)?;
        let data = slice(pixels, len, "pixels")?;
        if out_bytes.is_null() || out_len.is_null() {
            return Err(null("output"));
        }
        let c = &ck.params.config;
        let img = Image::new(c.image_height, c.image_width, c.channels, data.to_vec())?;
        let mut cfg = DtfConfig::new(c.layout()?.pixel_count());
        cfg.epsilon = epsilon;
        cfg.alpha = alpha;
        cfg.validate()?;
        let enc = Tokenizer::new(ck).encode(&img, &Selection::Dtf(cfg))?;
        leak(enc.stream.to_bytes()?, out_bytes, out_len);
        Ok(())
    })
}

/// Decodes a serialized token stream. `*out_pixels` receives
/// `height × width × channels` doubles to be released with
/// [`infotok_pixels_free`].
///
/// # Safety
/// `bytes` must point to `len` readable bytes; `out_pixels` and `out_len`
/// must be writable.
#[no_mangle]
pub unsafe extern "C" fn infotok_detokenize(
    handle: *const InfotokModel,
    bytes: *const u8,
    len: usize,
    out_pixels: *mut *mut f64,
    out_len: *mut usize,
) -> InfotokStatus {
    guard(|| {
        let ck = model(handle)?;
        let data = slice(bytes, len, "bytes")?;
        if out_pixels.is_null() || out_len.is_null() {
            return Err(null("output"));
        }
        let stream = TokenStream::from_bytes(data)?;
        let img = Tokenizer::new(ck).decode(&stream)?;
        leak(img.into_data(), out_pixels, out_len);
        Ok(())
    })
}

/// # Safety
/// `data`/`len` must come from [`infotok_tokenize`], or `data` be null.
#[no_mangle]
pub unsafe extern "C" fn infotok_bytes_free(data: *mut u8, len: usize) {
    if !data.is_null() {
        drop(Box::from_raw(ptr::slice_from_raw_parts_mut(data, len)));
    }
}

/// # Safety
/// `data`/`len` must come from [`infotok_detokenize`], or `data` be null.
#[no_mangle]
pub unsafe extern "C" fn infotok_pixels_free(data: *mut f64, len: usize) {
    if !data.is_null() {
        drop(Box::from_raw(ptr::slice_from_raw_parts_mut(data, len)));
    }
}

/// Gaussian rate-distortion function in bits.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn infotok_rate_distortion(sigma2: f64, d0: f64, pixel_count: usize, out: *mut f64) -> InfotokStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = infotheory::rate_distortion(RateDistortionQuery { sigma2, d0, pixel_count })?;
        Ok(())
    })
}

/// Bits per pixel of `n` tokens from a codebook of `k` entries.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn infotok_code_rate(
    n: usize,
    k: usize,
    height: usize,
    width: usize,
    channels: usize,
    out: *mut f64,
) -> InfotokStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = infotheory::code_rate(n, k, height, width, channels)?;
        Ok(())
    })
}

/// Distortion bound `d_min · 2^(−2·delta_r)`.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn infotok_distortion_bound(d_min: f64, delta_r: f64, out: *mut f64) -> InfotokStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = infotheory::rate_gain_distortion_bound(d_min, delta_r)?;
        Ok(())
    })
}
