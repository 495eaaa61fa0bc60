//! C ABI over `pgmfuse`.
//!
//! Objects cross the boundary as opaque handles created by `pgmf_*_new`,
//! `pgmf_*_load` or `pgmf_*_read` and released with the matching `_free`.
//! Every fallible call returns a [`PgmfStatus`]; the message of the last
//! failure on the calling thread is available from
//! [`pgmf_last_error_message`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use pgmfuse::geometry::{spherical_project, FovSpec, PgmFrame};
use pgmfuse::kitti_io::{read_pgm, write_pgm, Point, PointCloud};
use pgmfuse::models::{check_grid, read_checkpoint, Model, ModelKind, CKPT_MAGIC};
use pgmfuse::quantize::{calibrate, decode_quantized, quantize_model, write_quantized, QuantizedModel};
use pgmfuse::Error;

/// Result codes. The first four match the command line exit codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PgmfStatus {
    Ok = 0,
    /// Bad argument value.
    Usage = 1,
    /// I/O, format, parse, consistency or contract failure.
    Data = 2,
    /// Non-finite values during computation.
    Numeric = 3,
    NullPointer = 4,
    /// A Rust panic was caught at the boundary.
    Internal = 5,
}

/// Model kinds, numbered as in checkpoint files.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PgmfKind {
    Lidar = 0,
    Early = 1,
    Mid = 2,
    Late = 3,
    Image = 4,
}

impl From<ModelKind> for PgmfKind {
    fn from(k: ModelKind) -> Self {
        match k {
            ModelKind::Lidar => Self::Lidar,
            ModelKind::Early => Self::Early,
            ModelKind::Mid => Self::Mid,
            ModelKind::Late => Self::Late,
            ModelKind::Image => Self::Image,
        }
    }
}

/// Field of view in degrees.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct PgmfFov {
    pub yaw_left: f64,
    pub yaw_right: f64,
    pub pitch_up: f64,
    pub pitch_down: f64,
}

/// A float or INT8 model.
pub struct PgmfModel {
    inner: Inner,
}

enum Inner {
    Float(Model),
    Quant(QuantizedModel),
}

/// A polar grid frame.
pub struct PgmfFrame {
    frame: PgmFrame,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn status_of(e: &Error) -> PgmfStatus {
    match e.exit_code() {
        1 => PgmfStatus::Usage,
        3 => PgmfStatus::Numeric,
        _ => PgmfStatus::Data,
    }
}

fn guard(f: impl FnOnce() -> Result<(), (PgmfStatus, String)>) -> PgmfStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => PgmfStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            PgmfStatus::Internal
        }
    }
}

fn lib_err(e: Error) -> (PgmfStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (PgmfStatus, String) {
    (PgmfStatus::NullPointer, format!("{what} is null"))
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, (PgmfStatus, String)> {
    if p.is_null() {
        return Err(null("path"));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| (PgmfStatus::Usage, "path is not valid UTF-8".to_string()))?;
    Ok(PathBuf::from(s))
}

/// Copies the last error message of this thread into `buf` (NUL-terminated,
/// truncated to `len`). Returns the full message length without the NUL.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn pgmf_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            std::ptr::copy_nonoverlapping(msg.as_ptr(), buf as *mut u8, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn pgmf_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Builds a freshly initialized float model.
///
/// # Safety
/// `out` must be a valid pointer to a handle slot.
#[no_mangle]
pub unsafe extern "C" fn pgmf_model_new(kind: PgmfKind, seed: u64, out: *mut *mut PgmfModel) -> PgmfStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let kind = ModelKind::from_code(kind as u8).ok_or((PgmfStatus::Usage, "bad kind".into()))?;
        let model = Model::build(kind, seed).map_err(lib_err)?;
        *out = Box::into_raw(Box::new(PgmfModel { inner: Inner::Float(model) }));
        Ok(())
    })
}

/// Loads a float or quantized checkpoint.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid handle slot.
#[no_mangle]
pub unsafe extern "C" fn pgmf_model_load(path: *const c_char, out: *mut *mut PgmfModel) -> PgmfStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let path = path_arg(path)?;
        let bytes = std::fs::read(&path).map_err(|e| lib_err(Error::io(&path, e)))?;
        let inner = if bytes.len() > 6 && &bytes[..4] == CKPT_MAGIC && bytes[6] & 0x80 != 0 {
            Inner::Quant(decode_quantized(&bytes, &path).map_err(lib_err)?)
        } else {
            Inner::Float(read_checkpoint(&path).map_err(lib_err)?)
        };
        *out = Box::into_raw(Box::new(PgmfModel { inner }));
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a handle from this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn pgmf_model_free(model: *mut PgmfModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn pgmf_model_kind(model: *const PgmfModel, out: *mut PgmfKind) -> PgmfStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = match &m.inner {
            Inner::Float(f) => f.kind,
            Inner::Quant(q) => q.kind,
        }
        .into();
        Ok(())
    })
}

/// Trainable parameter count; 0 for quantized models.
///
/// # Safety
/// `model` must be null or valid.
#[no_mangle]
pub unsafe extern "C" fn pgmf_model_param_count(model: *const PgmfModel) -> u64 {
    match model.as_ref().map(|m| &m.inner) {
        Some(Inner::Float(f)) => f.param_count() as u64,
        _ => 0,
    }
}

/// 1 when the model runs on the INT8 path.
///
/// # Safety
/// `model` must be null or valid.
#[no_mangle]
pub unsafe extern "C" fn pgmf_model_is_quantized(model: *const PgmfModel) -> i32 {
    matches!(model.as_ref().map(|m| &m.inner), Some(Inner::Quant(_))) as i32
}

/// Quantizes a float model using `count` calibration frames and returns a
/// new handle.
///
/// # Safety
/// `frames` must point to `count` valid frame handles; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn pgmf_model_quantize(
    model: *const PgmfModel,
    frames: *const *const PgmfFrame,
    count: usize,
    out: *mut *mut PgmfModel,
) -> PgmfStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if out.is_null() || frames.is_null() {
            return Err(null(if out.is_null() { "out" } else { "frames" }));
        }
        let Inner::Float(f) = &m.inner else {
            return Err((PgmfStatus::Usage, "model is already quantized".into()));
        };
        let mut calib = Vec::with_capacity(count);
        for i in 0..count {
            let fr = (*frames.add(i)).as_ref().ok_or_else(|| null("frame"))?;
            calib.push(fr.frame.clone());
        }
        let obs = calibrate(f, &calib).map_err(lib_err)?;
        let q = quantize_model(f, &obs).map_err(lib_err)?;
        *out = Box::into_raw(Box::new(PgmfModel { inner: Inner::Quant(q) }));
        Ok(())
    })
}

/// Writes a quantized model to `path`.
///
/// # Safety
/// `model` and `path` must be valid.
#[no_mangle]
pub unsafe extern "C" fn pgmf_model_save_quantized(model: *const PgmfModel, path: *const c_char) -> PgmfStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let path = path_arg(path)?;
        match &m.inner {
            Inner::Quant(q) => write_quantized(q, &path).map_err(lib_err),
            Inner::Float(_) => Err((PgmfStatus::Usage, "model is not quantized".into())),
        }
    })
}

/// Projects `count` points (`x, y, z, intensity` quadruples) onto an
/// `h × w` grid. A null `fov` selects the default field of view.
///
/// # Safety
/// `points` must point to `4 * count` floats; `fov` must be null or valid;
/// `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn pgmf_frame_project(
    points: *const f32,
    count: usize,
    fov: *const PgmfFov,
    h: u32,
    w: u32,
    out: *mut *mut PgmfFrame,
) -> PgmfStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        if points.is_null() && count > 0 {
            return Err(null("points"));
        }
        let fov = match fov.as_ref() {
            Some(f) => FovSpec {
                yaw_left: f.yaw_left,
                yaw_right: f.yaw_right,
                pitch_up: f.pitch_up,
                pitch_down: f.pitch_down,
            },
            None => FovSpec::default(),
        };
        fov.validate().map_err(lib_err)?;
        if h == 0 || w == 0 {
            return Err((PgmfStatus::Usage, "grid dimensions must be positive".into()));
        }
        let raw = if count == 0 { &[][..] } else { std::slice::from_raw_parts(points, count * 4) };
        let pts: Vec<Point> = raw
            .chunks_exact(4)
            .filter(|c| c.iter().all(|v| v.is_finite()))
            .map(|c| Point::new(c[0], c[1], c[2], c[3].clamp(0.0, 1.0)))
            .collect();
        if pts.len() != count {
            return Err((PgmfStatus::Data, "points contain non-finite values".into()));
        }
        let frame = spherical_project(&PointCloud::from_points(pts), &fov, h as usize, w as usize);
        *out = Box::into_raw(Box::new(PgmfFrame { frame }));
        Ok(())
    })
}

/// Reads a PGM frame file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid handle slot.
#[no_mangle]
pub unsafe extern "C" fn pgmf_frame_read(path: *const c_char, out: *mut *mut PgmfFrame) -> PgmfStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let frame = read_pgm(path_arg(path)?).map_err(lib_err)?;
        *out = Box::into_raw(Box::new(PgmfFrame { frame }));
        Ok(())
    })
}

/// # Safety
/// `frame` and `path` must be valid.
#[no_mangle]
pub unsafe extern "C" fn pgmf_frame_write(frame: *const PgmfFrame, path: *const c_char) -> PgmfStatus {
    guard(|| {
        let f = frame.as_ref().ok_or_else(|| null("frame"))?;
        write_pgm(&f.frame, path_arg(path)?).map_err(lib_err)
    })
}

/// Grid rows, columns, channels and masked-cell count.
///
/// # Safety
/// `frame` must be valid; output pointers may be null.
#[no_mangle]
pub unsafe extern "C" fn pgmf_frame_dims(
    frame: *const PgmfFrame,
    h: *mut u32,
    w: *mut u32,
    c: *mut u32,
    masked: *mut u64,
) -> PgmfStatus {
    guard(|| {
        let f = &frame.as_ref().ok_or_else(|| null("frame"))?.frame;
        if let Some(h) = h.as_mut() {
            *h = f.h as u32;
        }
        if let Some(w) = w.as_mut() {
            *w = f.w as u32;
        }
        if let Some(c) = c.as_mut() {
            *c = f.c as u32;
        }
        if let Some(m) = masked.as_mut() {
            *m = f.masked_cells() as u64;
        }
        Ok(())
    })
}

/// # Safety
/// `frame` must be null or a handle from this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn pgmf_frame_free(frame: *mut PgmfFrame) {
    if !frame.is_null() {
        drop(Box::from_raw(frame));
    }
}

/// Per-cell classes (row-major, `h * w` entries) for a frame.
///
/// # Safety
/// `model` and `frame` must be valid; `classes` must point to `len`
/// writable `u32`s.
#[no_mangle]
pub unsafe extern "C" fn pgmf_infer(
    model: *const PgmfModel,
    frame: *const PgmfFrame,
    classes: *mut u32,
    len: usize,
) -> PgmfStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let f = &frame.as_ref().ok_or_else(|| null("frame"))?.frame;
        if classes.is_null() {
            return Err(null("classes"));
        }
        if len != f.cells() {
            return Err((PgmfStatus::Usage, format!("output holds {len} cells, frame has {}", f.cells())));
        }
        check_grid(f.h, f.w).map_err(lib_err)?;
        let pred = match &m.inner {
            Inner::Float(model) => model.infer(f),
            Inner::Quant(q) => q.infer(f),
        }
        .map_err(lib_err)?;
        std::slice::from_raw_parts_mut(classes, len).copy_from_slice(&pred);
        Ok(())
    })
}
