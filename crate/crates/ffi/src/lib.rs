//! C ABI over the editing pipeline.
//!
//! Every call returns an [`ExgStatus`]; on failure the message is kept per
//! thread and read with [`exg_last_error`]. Images cross the boundary as
//! interleaved 8-bit RGB, row-major.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use expressgan::aucode::AuVector;
use expressgan::facedata::{FaceBox, ImageTensor};
use expressgan::inference::{self, EditRequest};
use expressgan::models::Model;
use expressgan::training::checkpoint;
use expressgan::Error;

/// Status codes returned by every function.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExgStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidArgument = 2,
    AuLength = 3,
    Io = 4,
    Checkpoint = 5,
    Internal = 6,
}

/// Face box in host-image pixels.
#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct ExgBox {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

/// Loaded model; opaque to C.
pub struct ExgModel {
    model: Model<f32>,
    id: CString,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> ExgStatus {
    match e {
        Error::AuLength { .. } => ExgStatus::AuLength,
        Error::Io(_) | Error::MissingImage(_) => ExgStatus::Io,
        Error::Checkpoint(_) | Error::CheckpointVersion { .. } | Error::Truncated(_) | Error::Digest(_) => {
            ExgStatus::Checkpoint
        }
        Error::NonFinite { .. } => ExgStatus::Internal,
        _ => ExgStatus::InvalidArgument,
    }
}

fn guard(f: impl FnOnce() -> Result<(), (ExgStatus, String)>) -> ExgStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => ExgStatus::Ok,
        Ok(Err((s, msg))) => {
            set_error(&msg);
            s
        }
        Err(_) => {
            set_error("internal panic");
            ExgStatus::Internal
        }
    }
}

fn lib<T>(r: expressgan::Result<T>) -> Result<T, (ExgStatus, String)> {
    r.map_err(|e| (status_of(&e), e.to_string()))
}

fn null(what: &str) -> (ExgStatus, String) {
    (ExgStatus::NullArgument, format!("{what} is null"))
}

/// Message of the last failed call on this thread (empty if none). Valid
/// until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn exg_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Loads a checkpoint. On success `*out` owns a model to release with
/// [`exg_model_free`].
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn exg_model_load(path: *const c_char, out: *mut *mut ExgModel) -> ExgStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let p = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| (ExgStatus::InvalidArgument, "path is not UTF-8".to_string()))?;
        let id = lib(checkpoint::file_digest(Path::new(p)))?;
        let ck = lib(checkpoint::load(Path::new(p)))?;
        let m = Box::new(ExgModel {
            model: ck.model,
            id: CString::new(id).unwrap_or_default(),
        });
        *out = Box::into_raw(m);
        Ok(())
    })
}

/// Releases a model from [`exg_model_load`]. Null is ignored.
///
/// # Safety
/// `model` must come from [`exg_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn exg_model_free(model: *mut ExgModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Square side the model works at, 0 for null.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn exg_model_image_size(model: *const ExgModel) -> u32 {
    model.as_ref().map_or(0, |m| m.model.image_size() as u32)
}

/// Number of AUs in the model's schema, 0 for null.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn exg_model_num_aus(model: *const ExgModel) -> u32 {
    model.as_ref().map_or(0, |m| m.model.num_aus() as u32)
}

/// SHA-256 of the checkpoint file as hex; owned by the handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn exg_model_id(model: *const ExgModel) -> *const c_char {
    model.as_ref().map_or(ptr::null(), |m| m.id.as_ptr())
}

/// Edits an RGB image. Without a box the image must be model-sized; with
/// one, pixels outside it are copied unchanged. `alpha < 0` means no
/// blending. `source` may be null (estimated when blending). `rgb_out`
/// receives `height * width * 3` bytes.
///
/// # Safety
/// Buffers must hold the stated number of elements; `face_box` and `source`
/// may be null.
#[no_mangle]
pub unsafe extern "C" fn exg_edit(
    model: *const ExgModel,
    rgb_in: *const u8,
    height: u32,
    width: u32,
    target: *const f64,
    num_aus: u32,
    alpha: f64,
    source: *const f64,
    face_box: *const ExgBox,
    rgb_out: *mut u8,
) -> ExgStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if rgb_in.is_null() {
            return Err(null("rgb_in"));
        }
        if target.is_null() {
            return Err(null("target"));
        }
        if rgb_out.is_null() {
            return Err(null("rgb_out"));
        }
        let (h, w, n) = (height as usize, width as usize, num_aus as usize);
        let bytes = std::slice::from_raw_parts(rgb_in, h * w * 3);
        let image = lib(ImageTensor::from_rgb8(h, w, bytes))?;
        let mut req = EditRequest::new(AuVector::clamped(std::slice::from_raw_parts(target, n).to_vec()));
        if alpha >= 0.0 {
            req.alpha = Some(alpha);
        }
        if !source.is_null() {
            req.source = Some(AuVector::clamped(std::slice::from_raw_parts(source, n).to_vec()));
        }
        if let Some(b) = face_box.as_ref() {
            req.face_box = Some(FaceBox::new(b.x as usize, b.y as usize, b.w as usize, b.h as usize));
        }
        let out = lib(inference::edit(&m.model, &image, &req))?;
        let rgb = out.image.to_rgb8();
        std::slice::from_raw_parts_mut(rgb_out, rgb.len()).copy_from_slice(&rgb);
        Ok(())
    })
}
