//! C ABI for embedding the recognizer. Models are opaque handles behind
//! pointers; every fallible call returns a [`FerliteStatus`] and records a
//! human-readable message retrievable with [`ferlite_last_error_message`].
//!
//! The matching C header is generated into `include/ferlite.h` at build
//! time.
//!
//! # Safety contract
//! Pointer arguments must be valid for the duration of the call (or null,
//! which is reported as [`FerliteStatus::NullArgument`]). Handles come from
//! `ferlite_model_build`/`ferlite_model_load`, are not thread-safe to
//! mutate, and must be released exactly once with `ferlite_model_free`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use ferlite::checkpoint::{load_checkpoint, save_checkpoint};
use ferlite::data::{load_image, PreprocessSpec};
use ferlite::model::{build, count_params, predict, EcaPlacement, ModelConfig, ModelParams};
use ferlite::Tensor;

/// Result of every fallible call.
#[repr(u32)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FerliteStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullArgument = 1,
    /// The configuration is rejected (e.g. fewer than two classes).
    InvalidConfig = 2,
    /// Reading or decoding input data failed.
    DataError = 3,
    /// Loading or saving a checkpoint failed.
    CheckpointError = 4,
    /// An input had the wrong shape or size.
    ShapeError = 5,
    /// An output buffer is too small for the result.
    BufferTooSmall = 6,
    /// A string argument was not valid UTF-8.
    Utf8Error = 7,
    /// An internal invariant failed; the handle is still valid.
    InternalPanic = 8,
}

/// Architecture switches, mirroring the library defaults.
#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct FerliteConfig {
    /// Number of expression classes (>= 2).
    pub num_classes: u32,
    /// Width of each head's feature vector (>= 1).
    pub feature_dim: u32,
    /// Enable channel attention.
    pub eca_enabled: bool,
    /// Apply one attention block before partitioning instead of one per
    /// branch after it.
    pub eca_before_partition: bool,
    /// Keep the whole-map head.
    pub global_head: bool,
    /// Keep the four local patch heads.
    pub ensemble: bool,
}

/// An opaque trained or initialized model.
pub struct FerliteModel {
    config: ModelConfig,
    params: ModelParams,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let sanitized = msg.replace('\0', " ");
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(sanitized).unwrap_or_default();
    });
}

fn fail(status: FerliteStatus, msg: &str) -> FerliteStatus {
    set_error(msg);
    status
}

/// Runs `f`, converting panics into [`FerliteStatus::InternalPanic`] instead
/// of unwinding across the ABI boundary.
fn guarded<F: FnOnce() -> FerliteStatus>(f: F) -> FerliteStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(status) => status,
        Err(_) => fail(FerliteStatus::InternalPanic, "internal panic"),
    }
}

fn config_from(c: &FerliteConfig) -> Result<ModelConfig, FerliteStatus> {
    let config = ModelConfig {
        num_classes: c.num_classes as usize,
        feature_dim: c.feature_dim as usize,
        eca_enabled: c.eca_enabled,
        eca_placement: if c.eca_before_partition {
            EcaPlacement::BeforePartition
        } else {
            EcaPlacement::AfterPartition
        },
        global_head: c.global_head,
        ensemble: c.ensemble,
        ..ModelConfig::default()
    };
    config.validate().map_err(|e| fail(FerliteStatus::InvalidConfig, &e.to_string()))?;
    Ok(config)
}

unsafe fn path_from(ptr: *const c_char) -> Result<PathBuf, FerliteStatus> {
    if ptr.is_null() {
        return Err(fail(FerliteStatus::NullArgument, "path is null"));
    }
    match CStr::from_ptr(ptr).to_str() {
        Ok(s) => Ok(PathBuf::from(s)),
        Err(_) => Err(fail(FerliteStatus::Utf8Error, "path is not valid UTF-8")),
    }
}

/// The default configuration: 8 classes, attention per branch, all five
/// heads.
#[no_mangle]
pub extern "C" fn ferlite_config_default() -> FerliteConfig {
    let d = ModelConfig::default();
    FerliteConfig {
        num_classes: d.num_classes as u32,
        feature_dim: d.feature_dim as u32,
        eca_enabled: d.eca_enabled,
        eca_before_partition: d.eca_placement == EcaPlacement::BeforePartition,
        global_head: d.global_head,
        ensemble: d.ensemble,
    }
}

/// Builds a freshly initialized model. On success `*out` owns the handle.
///
/// # Safety
/// `config` and `out` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn ferlite_model_build(
    config: *const FerliteConfig,
    seed: u64,
    out: *mut *mut FerliteModel,
) -> FerliteStatus {
    guarded(|| {
        if config.is_null() || out.is_null() {
            return fail(FerliteStatus::NullArgument, "config or out is null");
        }
        let model_config = match config_from(&*config) {
            Ok(c) => c,
            Err(status) => return status,
        };
        match build(&model_config, seed) {
            Ok(params) => {
                *out = Box::into_raw(Box::new(FerliteModel { config: model_config, params }));
                FerliteStatus::Ok
            }
            Err(e) => fail(FerliteStatus::ShapeError, &e.to_string()),
        }
    })
}

/// Loads a checkpoint that must cover exactly the parameters of `config`.
///
/// # Safety
/// `config`, `path`, and `out` must be valid pointers; `path` is a
/// NUL-terminated UTF-8 string.
#[no_mangle]
pub unsafe extern "C" fn ferlite_model_load(
    config: *const FerliteConfig,
    path: *const c_char,
    out: *mut *mut FerliteModel,
) -> FerliteStatus {
    guarded(|| {
        if config.is_null() || out.is_null() {
            return fail(FerliteStatus::NullArgument, "config or out is null");
        }
        let model_config = match config_from(&*config) {
            Ok(c) => c,
            Err(status) => return status,
        };
        let path = match path_from(path) {
            Ok(p) => p,
            Err(status) => return status,
        };
        match load_checkpoint(&path, &model_config) {
            Ok(params) => {
                *out = Box::into_raw(Box::new(FerliteModel { config: model_config, params }));
                FerliteStatus::Ok
            }
            Err(e) => fail(FerliteStatus::CheckpointError, &e.to_string()),
        }
    })
}

/// Writes the model's parameters as a checkpoint file.
///
/// # Safety
/// `model` must be a live handle; `path` a valid NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn ferlite_model_save(
    model: *const FerliteModel,
    path: *const c_char,
) -> FerliteStatus {
    guarded(|| {
        if model.is_null() {
            return fail(FerliteStatus::NullArgument, "model is null");
        }
        let path = match path_from(path) {
            Ok(p) => p,
            Err(status) => return status,
        };
        match save_checkpoint(&(*model).params, &path) {
            Ok(()) => FerliteStatus::Ok,
            Err(e) => fail(FerliteStatus::CheckpointError, &e.to_string()),
        }
    })
}

/// Total learnable parameter count of the handle's architecture.
///
/// # Safety
/// `model` and `out_total` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn ferlite_model_param_count(
    model: *const FerliteModel,
    out_total: *mut u64,
) -> FerliteStatus {
    guarded(|| {
        if model.is_null() || out_total.is_null() {
            return fail(FerliteStatus::NullArgument, "model or out_total is null");
        }
        *out_total = count_params(&(*model).params).total as u64;
        FerliteStatus::Ok
    })
}

/// Number of classes the handle predicts (the required `probs` length for
/// [`ferlite_predict`]).
///
/// # Safety
/// `model` and `out_classes` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn ferlite_model_num_classes(
    model: *const FerliteModel,
    out_classes: *mut u32,
) -> FerliteStatus {
    guarded(|| {
        if model.is_null() || out_classes.is_null() {
            return fail(FerliteStatus::NullArgument, "model or out_classes is null");
        }
        *out_classes = (*model).config.num_classes as u32;
        FerliteStatus::Ok
    })
}

/// Class probabilities for one preprocessed square grayscale image.
///
/// `pixels` holds `side * side` floats in [-1, 1], row-major, where `side`
/// is a positive multiple of 8 (128 for the native input; see
/// [`ferlite_preprocess_image`]). With `mirror`, the prediction is averaged
/// with the horizontally flipped input. `probs` receives exactly
/// `num_classes` values summing to 1.
///
/// # Safety
/// `model`, `pixels`, and `probs` must be valid for the given lengths.
#[no_mangle]
pub unsafe extern "C" fn ferlite_predict(
    model: *const FerliteModel,
    pixels: *const f32,
    pixel_count: usize,
    mirror: bool,
    probs: *mut f32,
    probs_len: usize,
) -> FerliteStatus {
    guarded(|| {
        if model.is_null() || pixels.is_null() || probs.is_null() {
            return fail(FerliteStatus::NullArgument, "model, pixels, or probs is null");
        }
        let model = &*model;
        let side = (pixel_count as f64).sqrt() as usize;
        if side == 0 || side * side != pixel_count {
            return fail(
                FerliteStatus::ShapeError,
                &format!("pixel_count {pixel_count} is not a positive perfect square"),
            );
        }
        if probs_len < model.config.num_classes {
            return fail(
                FerliteStatus::BufferTooSmall,
                &format!(
                    "probs buffer holds {probs_len} values, need {}",
                    model.config.num_classes
                ),
            );
        }
        let data = std::slice::from_raw_parts(pixels, pixel_count);
        let image = Tensor::from_vec(vec![1, side, side], data.to_vec());
        match predict(&model.params, &model.config, &image, mirror) {
            Ok(p) => {
                std::slice::from_raw_parts_mut(probs, model.config.num_classes)
                    .copy_from_slice(&p);
                FerliteStatus::Ok
            }
            Err(e) => fail(FerliteStatus::ShapeError, &e.to_string()),
        }
    })
}

/// Decodes an image file and preprocesses it to the network's native input:
/// grayscale, bilinearly resized to 128x128, normalized to [-1, 1]. `out`
/// receives `128 * 128` floats.
///
/// # Safety
/// `path` must be a valid NUL-terminated string and `out` valid for
/// `out_len` floats.
#[no_mangle]
pub unsafe extern "C" fn ferlite_preprocess_image(
    path: *const c_char,
    out: *mut f32,
    out_len: usize,
) -> FerliteStatus {
    guarded(|| {
        if out.is_null() {
            return fail(FerliteStatus::NullArgument, "out is null");
        }
        let path = match path_from(path) {
            Ok(p) => p,
            Err(status) => return status,
        };
        let spec = PreprocessSpec::default();
        let needed = spec.target * spec.target;
        if out_len < needed {
            return fail(
                FerliteStatus::BufferTooSmall,
                &format!("out buffer holds {out_len} values, need {needed}"),
            );
        }
        match load_image(&path, &spec) {
            Ok(image) => {
                std::slice::from_raw_parts_mut(out, needed).copy_from_slice(image.data());
                FerliteStatus::Ok
            }
            Err(e) => fail(FerliteStatus::DataError, &e.to_string()),
        }
    })
}

/// Releases a handle. Null is a no-op.
///
/// # Safety
/// `model` must come from this library and not have been freed before.
#[no_mangle]
pub unsafe extern "C" fn ferlite_model_free(model: *mut FerliteModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// The message of this thread's most recent failure. The pointer stays
/// valid until the next failing call on the same thread; never free it.
#[no_mangle]
pub extern "C" fn ferlite_last_error_message() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

#[cfg(test)]
mod tests {
    use std::ptr;

    use super::*;

    fn default_handle() -> *mut FerliteModel {
        let config = ferlite_config_default();
        let mut handle: *mut FerliteModel = ptr::null_mut();
        let status = unsafe { ferlite_model_build(&config, 7, &mut handle) };
        assert_eq!(status, FerliteStatus::Ok);
        assert!(!handle.is_null());
        handle
    }

    fn last_error() -> String {
        unsafe { CStr::from_ptr(ferlite_last_error_message()) }
            .to_string_lossy()
            .into_owned()
    }

    #[test]
    fn config_default_matches_library_default() {
        let c = ferlite_config_default();
        assert_eq!(c.num_classes, 8);
        assert_eq!(c.feature_dim, 256);
        assert!(c.eca_enabled && c.global_head && c.ensemble);
        assert!(!c.eca_before_partition);
    }

    #[test]
    fn build_predict_free_round_trip() {
        let handle = default_handle();
        let mut total = 0u64;
        assert_eq!(
            unsafe { ferlite_model_param_count(handle, &mut total) },
            FerliteStatus::Ok
        );
        assert_eq!(total, 1_445_921);

        let mut classes = 0u32;
        assert_eq!(
            unsafe { ferlite_model_num_classes(handle, &mut classes) },
            FerliteStatus::Ok
        );
        assert_eq!(classes, 8);

        // 16x16 inputs exercise the same code path at test speed.
        let pixels = vec![0.25f32; 16 * 16];
        let mut probs = vec![0.0f32; classes as usize];
        let status = unsafe {
            ferlite_predict(handle, pixels.as_ptr(), pixels.len(), true, probs.as_mut_ptr(), probs.len())
        };
        assert_eq!(status, FerliteStatus::Ok);
        let sum: f32 = probs.iter().sum();
        assert!((sum - 1.0).abs() < 1e-4, "probabilities sum to {sum}");
        unsafe { ferlite_model_free(handle) };
    }

    #[test]
    fn save_and_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = CString::new(dir.path().join("m.ckpt").to_str().unwrap()).unwrap();
        let handle = default_handle();
        assert_eq!(unsafe { ferlite_model_save(handle, path.as_ptr()) }, FerliteStatus::Ok);

        let config = ferlite_config_default();
        let mut loaded: *mut FerliteModel = ptr::null_mut();
        assert_eq!(
            unsafe { ferlite_model_load(&config, path.as_ptr(), &mut loaded) },
            FerliteStatus::Ok
        );
        let pixels = vec![-0.5f32; 16 * 16];
        let mut a = vec![0.0f32; 8];
        let mut b = vec![0.0f32; 8];
        unsafe {
            assert_eq!(
                ferlite_predict(handle, pixels.as_ptr(), pixels.len(), false, a.as_mut_ptr(), 8),
                FerliteStatus::Ok
            );
            assert_eq!(
                ferlite_predict(loaded, pixels.as_ptr(), pixels.len(), false, b.as_mut_ptr(), 8),
                FerliteStatus::Ok
            );
            ferlite_model_free(handle);
            ferlite_model_free(loaded);
        }
        assert_eq!(a, b, "loaded model must predict identically");
    }

    #[test]
    fn status_codes_and_messages() {
        let config = ferlite_config_default();
        let mut handle: *mut FerliteModel = ptr::null_mut();

        assert_eq!(
            unsafe { ferlite_model_build(ptr::null(), 0, &mut handle) },
            FerliteStatus::NullArgument
        );

        let bad = FerliteConfig { num_classes: 1, ..config };
        assert_eq!(
            unsafe { ferlite_model_build(&bad, 0, &mut handle) },
            FerliteStatus::InvalidConfig
        );
        assert!(last_error().contains("num_classes"), "{}", last_error());

        let missing = CString::new("/nonexistent/m.ckpt").unwrap();
        assert_eq!(
            unsafe { ferlite_model_load(&config, missing.as_ptr(), &mut handle) },
            FerliteStatus::CheckpointError
        );

        let handle = default_handle();
        let pixels = [0.0f32; 10]; // not a perfect square
        let mut probs = vec![0.0f32; 8];
        assert_eq!(
            unsafe {
                ferlite_predict(handle, pixels.as_ptr(), pixels.len(), false, probs.as_mut_ptr(), 8)
            },
            FerliteStatus::ShapeError
        );
        let pixels = vec![0.0f32; 16 * 16];
        assert_eq!(
            unsafe {
                ferlite_predict(handle, pixels.as_ptr(), pixels.len(), false, probs.as_mut_ptr(), 3)
            },
            FerliteStatus::BufferTooSmall
        );
        assert!(last_error().contains("need 8"), "{}", last_error());
        unsafe { ferlite_model_free(handle) };

        let mut out = vec![0.0f32; 128 * 128];
        let nofile = CString::new("/nonexistent/face.png").unwrap();
        assert_eq!(
            unsafe { ferlite_preprocess_image(nofile.as_ptr(), out.as_mut_ptr(), out.len()) },
            FerliteStatus::DataError
        );

        unsafe { ferlite_model_free(ptr::null_mut()) }; // tolerated
    }

    #[test]
    fn preprocess_image_fills_native_buffer() {
        let dir = tempfile::tempdir().unwrap();
        let pgm = dir.path().join("face.pgm");
        let mut raw = b"P5\n64 64\n255\n".to_vec();
        raw.extend(std::iter::repeat_n(127u8, 64 * 64));
        std::fs::write(&pgm, raw).unwrap();

        let path = CString::new(pgm.to_str().unwrap()).unwrap();
        let mut out = vec![9.0f32; 128 * 128];
        assert_eq!(
            unsafe { ferlite_preprocess_image(path.as_ptr(), out.as_mut_ptr(), out.len()) },
            FerliteStatus::Ok
        );
        assert!(out.iter().all(|v| (-1.0..=1.0).contains(v)));
        assert!((out[0] - (127.0 / 255.0 - 0.5) / 0.5).abs() < 1e-6);

        let mut small = vec![0.0f32; 10];
        assert_eq!(
            unsafe { ferlite_preprocess_image(path.as_ptr(), small.as_mut_ptr(), small.len()) },
            FerliteStatus::BufferTooSmall
        );
    }
}
