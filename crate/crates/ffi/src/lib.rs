//! C ABI over the warpbench toolkit.
//!
//! Every function returns a [`WbStatus`]; results come back through out
//! pointers. Objects are opaque handles released with their `_free`
//! function. On failure the calling thread's last error message is set and
//! can be read with [`wb_last_error`].
//!
//! Panics never cross the boundary; they surface as `WB_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use warpbench::eval::{epe, evaluate, EvalOptions};
use warpbench::synth::{generate_sample, GenConfig, SampleBundle};
use warpbench::warpfield::{angle_from_backward_map, apply_backward_map};
use warpbench::{BackwardMap, BinaryMask, Error, FloatMap2D, Image, WarpField};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WbStatus {
    Ok = 0,
    /// Null pointer, bad UTF-8, or a value outside its domain.
    InvalidArgument = 1,
    Format = 2,
    Shape = 3,
    Io = 4,
    Degenerate = 5,
    Panic = 6,
}

/// Float raster, `height × width × channels`, row-major interleaved.
pub struct WbFloatMap(FloatMap2D);

/// 8-bit raster, `height × width × channels`, row-major interleaved.
pub struct WbImage(Image);

/// Backward map with its validity mask.
pub struct WbBackwardMap(BackwardMap);

/// Generated sample bundle.
pub struct WbSample(SampleBundle);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Failure(WbStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Format(_) | Error::Json(_) => WbStatus::Format,
            Error::Shape { .. } => WbStatus::Shape,
            Error::Io { .. } => WbStatus::Io,
            Error::Degenerate(_) => WbStatus::Degenerate,
            _ => WbStatus::InvalidArgument,
        };
        Failure(status, e.to_string())
    }
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(WbStatus::InvalidArgument, msg.into())
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> WbStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => WbStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_last_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_last_error(format!("panic: {msg}"));
            WbStatus::Panic
        }
    }
}

unsafe fn get<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| invalid(format!("{what} is null")))
}

unsafe fn path(p: *const c_char, what: &str) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(invalid(format!("{what} is null")));
    }
    let s = CStr::from_ptr(p).to_str().map_err(|_| invalid(format!("{what} is not UTF-8")))?;
    Ok(PathBuf::from(s))
}

unsafe fn put<T>(out: *mut *mut T, value: T) -> Result<(), Failure> {
    if out.is_null() {
        return Err(invalid("output pointer is null"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

unsafe fn release<T>(p: *mut T) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn wb_version() -> *const c_char {
    static VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), "\0");
    VERSION.as_ptr().cast()
}

/// Message of the last failure on this thread, or null if none. Valid until
/// the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn wb_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// # Safety
/// `data` must point to `height * width * channels` floats; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn wb_fmap_new(height: usize, width: usize, channels: usize, data: *const f32, out: *mut *mut WbFloatMap) -> WbStatus {
    guard(|| {
        let n = height.checked_mul(width).and_then(|v| v.checked_mul(channels)).ok_or_else(|| invalid("size overflows"))?;
        if data.is_null() && n > 0 {
            return Err(invalid("data is null"));
        }
        let values = if n == 0 { Vec::new() } else { std::slice::from_raw_parts(data, n).to_vec() };
        put(out, WbFloatMap(FloatMap2D::new(height, width, channels, values)?))
    })
}

/// # Safety
/// `path_utf8` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn wb_fmap_read(path_utf8: *const c_char, out: *mut *mut WbFloatMap) -> WbStatus {
    guard(|| put(out, WbFloatMap(FloatMap2D::read_fmap(path(path_utf8, "path")?)?)))
}

/// # Safety
/// `map` must be a live handle; `path_utf8` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn wb_fmap_write(map: *const WbFloatMap, path_utf8: *const c_char) -> WbStatus {
    guard(|| Ok(get(map, "map")?.0.write_fmap(path(path_utf8, "path")?)?))
}

/// Any of the out pointers may be null.
///
/// # Safety
/// `map` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn wb_fmap_shape(map: *const WbFloatMap, height: *mut usize, width: *mut usize, channels: *mut usize) -> WbStatus {
    guard(|| {
        let m = &get(map, "map")?.0;
        for (p, v) in [(height, m.height()), (width, m.width()), (channels, m.channels())] {
            if !p.is_null() {
                *p = v;
            }
        }
        Ok(())
    })
}

/// Borrowed pointer to the map's values; valid while the handle lives.
///
/// # Safety
/// `map` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn wb_fmap_data(map: *const WbFloatMap) -> *const f32 {
    map.as_ref().map_or(ptr::null(), |m| m.0.data().as_ptr())
}

/// # Safety
/// `map` must be a handle from this library or null; it is invalid afterwards.
#[no_mangle]
pub unsafe extern "C" fn wb_fmap_free(map: *mut WbFloatMap) {
    release(map)
}

/// Reads a binary PGM or PPM.
///
/// # Safety
/// `path_utf8` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn wb_image_read(path_utf8: *const c_char, out: *mut *mut WbImage) -> WbStatus {
    guard(|| put(out, WbImage(Image::read_pnm(path(path_utf8, "path")?)?)))
}

/// # Safety
/// `image` must be a live handle; `path_utf8` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn wb_image_write(image: *const WbImage, path_utf8: *const c_char) -> WbStatus {
    guard(|| Ok(get(image, "image")?.0.write_pnm(path(path_utf8, "path")?)?))
}

/// Any of the out pointers may be null.
///
/// # Safety
/// `image` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn wb_image_shape(image: *const WbImage, height: *mut usize, width: *mut usize, channels: *mut usize) -> WbStatus {
    guard(|| {
        let m = &get(image, "image")?.0;
        for (p, v) in [(height, m.height()), (width, m.width()), (channels, m.channels())] {
            if !p.is_null() {
                *p = v;
            }
        }
        Ok(())
    })
}

/// Borrowed pointer to the pixel bytes; valid while the handle lives.
///
/// # Safety
/// `image` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn wb_image_data(image: *const WbImage) -> *const u8 {
    image.as_ref().map_or(ptr::null(), |m| m.0.data().as_ptr())
}

/// # Safety
/// `image` must be a handle from this library or null.
#[no_mangle]
pub unsafe extern "C" fn wb_image_free(image: *mut WbImage) {
    release(image)
}

/// Builds a backward map from a 2-channel coordinate map and an optional
/// 1-channel mask (nonzero is valid). Without a mask, validity is the
/// in-range test on the coordinates.
///
/// # Safety
/// `coords` must be a live handle, `mask` a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn wb_backward_map_new(coords: *const WbFloatMap, mask: *const WbFloatMap, out: *mut *mut WbBackwardMap) -> WbStatus {
    guard(|| {
        let coords = get(coords, "coords")?.0.clone();
        let mask = match mask.as_ref() {
            Some(m) => Some(BinaryMask::from_float_map(&m.0)?),
            None => None,
        };
        put(out, WbBackwardMap(BackwardMap::from_field(WarpField::new_clipped(coords, mask.as_ref())?)))
    })
}

/// # Safety
/// `coords_path` must be a NUL-terminated string, `mask_path` one or null.
#[no_mangle]
pub unsafe extern "C" fn wb_backward_map_read(coords_path: *const c_char, mask_path: *const c_char, out: *mut *mut WbBackwardMap) -> WbStatus {
    guard(|| {
        let coords = path(coords_path, "coords path")?;
        let mask = if mask_path.is_null() { None } else { Some(path(mask_path, "mask path")?) };
        put(out, WbBackwardMap(BackwardMap::read(coords, mask.as_deref())?))
    })
}

/// Copies of the coordinates (2 channels) and mask (1 channel, 0 or 1).
/// Either out pointer may be null.
///
/// # Safety
/// `map` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn wb_backward_map_parts(map: *const WbBackwardMap, coords: *mut *mut WbFloatMap, mask: *mut *mut WbFloatMap) -> WbStatus {
    guard(|| {
        let b = &get(map, "map")?.0;
        if !coords.is_null() {
            put(coords, WbFloatMap(b.coords().clone()))?;
        }
        if !mask.is_null() {
            put(mask, WbFloatMap(b.valid().to_float_map()))?;
        }
        Ok(())
    })
}

/// # Safety
/// `map` must be a handle from this library or null.
#[no_mangle]
pub unsafe extern "C" fn wb_backward_map_free(map: *mut WbBackwardMap) {
    release(map)
}

/// Local warp angles of a backward map: values `θx, θy, ρx, ρy` (4 channels)
/// and the mask of pixels where they are defined (1 channel).
///
/// # Safety
/// `map` must be a live handle; `values` and `mask` must be writable.
#[no_mangle]
pub unsafe extern "C" fn wb_backward_map_angles(map: *const WbBackwardMap, values: *mut *mut WbFloatMap, mask: *mut *mut WbFloatMap) -> WbStatus {
    guard(|| {
        if values.is_null() || mask.is_null() {
            return Err(invalid("output pointer is null"));
        }
        let a = angle_from_backward_map(&get(map, "map")?.0)?;
        put(values, WbFloatMap(a.values().clone()))?;
        put(mask, WbFloatMap(a.valid().to_float_map()))
    })
}

/// Resamples `image` through `map`; pixels the map marks invalid are black.
///
/// # Safety
/// `image` and `map` must be live handles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn wb_rectify(image: *const WbImage, map: *const WbBackwardMap, out: *mut *mut WbImage) -> WbStatus {
    guard(|| {
        let img = &get(image, "image")?.0;
        let fill = vec![0u8; img.channels()];
        put(out, WbImage(apply_backward_map(img, &get(map, "map")?.0, &fill)?))
    })
}

/// Mean end-point error between two backward maps, in normalized units.
///
/// # Safety
/// Both maps must be live handles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn wb_epe(predicted: *const WbBackwardMap, truth: *const WbBackwardMap, out: *mut f64) -> WbStatus {
    guard(|| {
        if out.is_null() {
            return Err(invalid("output pointer is null"));
        }
        *out = epe(&get(predicted, "predicted")?.0, &get(truth, "truth")?.0)?;
        Ok(())
    })
}

/// Generates a sample with default settings apart from the given fields.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn wb_sample_generate(resolution: usize, folds: usize, seed: u64, out: *mut *mut WbSample) -> WbStatus {
    guard(|| {
        let cfg = GenConfig { resolution, folds, seed, ..GenConfig::default() };
        put(out, WbSample(generate_sample(&cfg)?))
    })
}

/// Generates a sample from a JSON configuration; missing fields take defaults.
///
/// # Safety
/// `config_json` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn wb_sample_generate_json(config_json: *const c_char, out: *mut *mut WbSample) -> WbStatus {
    guard(|| {
        if config_json.is_null() {
            return Err(invalid("config is null"));
        }
        let text = CStr::from_ptr(config_json).to_str().map_err(|_| invalid("config is not UTF-8"))?;
        let cfg: GenConfig = serde_json::from_str(text).map_err(Error::from)?;
        put(out, WbSample(generate_sample(&cfg)?))
    })
}

/// # Safety
/// `dir_utf8` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn wb_sample_load(dir_utf8: *const c_char, out: *mut *mut WbSample) -> WbStatus {
    guard(|| put(out, WbSample(SampleBundle::load(path(dir_utf8, "dir")?)?)))
}

/// # Safety
/// `sample` must be a live handle; `dir_utf8` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn wb_sample_save(sample: *const WbSample, dir_utf8: *const c_char) -> WbStatus {
    guard(|| Ok(get(sample, "sample")?.0.save(path(dir_utf8, "dir")?)?))
}

/// Copy of the sample's ground-truth backward map.
///
/// # Safety
/// `sample` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn wb_sample_backward_map(sample: *const WbSample, out: *mut *mut WbBackwardMap) -> WbStatus {
    guard(|| put(out, WbBackwardMap(get(sample, "sample")?.0.backward.clone())))
}

/// Copy of the sample's warped image.
///
/// # Safety
/// `sample` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn wb_sample_warped(sample: *const WbSample, out: *mut *mut WbImage) -> WbStatus {
    guard(|| put(out, WbImage(get(sample, "sample")?.0.warped.clone())))
}

/// # Safety
/// `sample` must be a handle from this library or null.
#[no_mangle]
pub unsafe extern "C" fn wb_sample_free(sample: *mut WbSample) {
    release(sample)
}

/// Evaluates `predicted` against the sample and writes the report as a JSON
/// string, released with [`wb_string_free`]. `options_json` may be null for
/// defaults.
///
/// # Safety
/// `sample` and `predicted` must be live handles, `options_json` a
/// NUL-terminated string or null; `out_json` must be writable.
#[no_mangle]
pub unsafe extern "C" fn wb_evaluate(sample: *const WbSample, predicted: *const WbBackwardMap, options_json: *const c_char, out_json: *mut *mut c_char) -> WbStatus {
    guard(|| {
        if out_json.is_null() {
            return Err(invalid("output pointer is null"));
        }
        let opts = if options_json.is_null() {
            EvalOptions::default()
        } else {
            let text = CStr::from_ptr(options_json).to_str().map_err(|_| invalid("options are not UTF-8"))?;
            serde_json::from_str(text).map_err(Error::from)?
        };
        let e = evaluate(&get(sample, "sample")?.0, &get(predicted, "predicted")?.0, &opts)?;
        let json = serde_json::to_string(&e.report).map_err(Error::from)?;
        *out_json = CString::new(json).map_err(|_| invalid("report contains NUL"))?.into_raw();
        Ok(())
    })
}

/// # Safety
/// `s` must be a string returned by this library or null.
#[no_mangle]
pub unsafe extern "C" fn wb_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
