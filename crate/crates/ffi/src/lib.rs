//! C ABI over the `dynroute` library.
//!
//! Every function returns a [`DrStatus`]. On failure a human-readable message
//! is kept per thread and can be read with [`dr_last_error_message`].
//! Networks are opaque [`DrNetwork`] handles created by
//! [`dr_network_load`] and released with [`dr_network_free`]. Images are
//! passed as row-major `f64` pixels in [0, 1], `size * size` per image.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use dynroute::data::{load_checkpoint, restore_network};
use dynroute::evaluation::{auc, detect};
use dynroute::matrix::Matrix;
use dynroute::model::{Network, TAP_PRE_POOL};
use dynroute::routing::{route_conv1x1_kernel, Conv1x1CapsuleParams};
use dynroute::{Error, Tensor};

/// Result codes shared by every entry point.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DrStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    ShapeMismatch = 3,
    Numerical = 4,
    Io = 5,
    Format = 6,
    Config = 7,
    /// The quantity is not defined for this input (e.g. AUC of one class).
    Undefined = 8,
    Internal = 9,
}

/// Box in pixel coordinates covering columns `x..x+w` and rows `y..y+h`.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct DrBox {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

/// Opaque handle to a loaded network.
pub struct DrNetwork {
    net: Network,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(err: &Error) -> DrStatus {
    match err {
        Error::ShapeMismatch { .. } => DrStatus::ShapeMismatch,
        Error::InvalidArgument(_) => DrStatus::InvalidArgument,
        Error::Numerical(_) => DrStatus::Numerical,
        Error::Config(_) => DrStatus::Config,
        Error::Format(_) | Error::Parse { .. } => DrStatus::Format,
        Error::Io(_) => DrStatus::Io,
    }
}

struct Failure(DrStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(DrStatus::NullPointer, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> DrStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            DrStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            DrStatus::Internal
        }
    }
}

unsafe fn slice<'a, T>(ptr: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if ptr.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(ptr, len))
}

unsafe fn slice_mut<'a, T>(ptr: *mut T, len: usize, what: &str) -> Result<&'a mut [T], Failure> {
    if len == 0 {
        return Ok(&mut []);
    }
    if ptr.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(ptr, len))
}

unsafe fn network<'a>(handle: *const DrNetwork) -> Result<&'a Network, Failure> {
    handle.as_ref().map(|h| &h.net).ok_or_else(|| null("network handle"))
}

/// Message describing the most recent failure on this thread; empty after
/// a success. The pointer stays valid until the next call on this thread.
#[no_mangle]
pub extern "C" fn dr_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a NUL-terminated string with static lifetime.
#[no_mangle]
pub extern "C" fn dr_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a checkpoint written by `dynroute train`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dr_network_load(path: *const c_char, out: *mut *mut DrNetwork) -> DrStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let p = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| Failure(DrStatus::InvalidArgument, "path is not UTF-8".into()))?;
        let net = restore_network(&load_checkpoint(Path::new(p))?)?;
        *out = Box::into_raw(Box::new(DrNetwork { net }));
        Ok(())
    })
}

/// Releases a handle from [`dr_network_load`]; null is ignored.
///
/// # Safety
/// `handle` must come from [`dr_network_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn dr_network_free(handle: *mut DrNetwork) {
    if !handle.is_null() {
        drop(Box::from_raw(handle));
    }
}

/// Side length of the square input images.
///
/// # Safety
/// `handle` must be a live network handle; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dr_network_input_size(handle: *const DrNetwork, out: *mut usize) -> DrStatus {
    guard(|| {
        let net = network(handle)?;
        *out.as_mut().ok_or_else(|| null("out"))? = net.config.input_size;
        Ok(())
    })
}

/// Number of classes scored by the network.
///
/// # Safety
/// `handle` must be a live network handle; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dr_network_n_classes(handle: *const DrNetwork, out: *mut usize) -> DrStatus {
    guard(|| {
        let net = network(handle)?;
        *out.as_mut().ok_or_else(|| null("out"))? = net.config.n_classes;
        Ok(())
    })
}

fn batch(net: &Network, pixels: &[f64], n_images: usize) -> Result<Tensor, Failure> {
    let s = net.config.input_size;
    Ok(Tensor::new(vec![n_images, 1, s, s], pixels.to_vec())?)
}

/// Class scores (capsule norms) for `n_images` images; writes
/// `n_images * n_classes` values to `scores`.
///
/// # Safety
/// `pixels` must hold `n_images * size * size` values and `scores`
/// room for `n_images * n_classes`.
#[no_mangle]
pub unsafe extern "C" fn dr_network_predict(
    handle: *const DrNetwork,
    pixels: *const f64,
    n_images: usize,
    scores: *mut f64,
) -> DrStatus {
    guard(|| {
        let net = network(handle)?;
        if n_images == 0 {
            return Err(Failure(DrStatus::InvalidArgument, "n_images must be >= 1".into()));
        }
        let s = net.config.input_size;
        let px = slice(pixels, n_images * s * s, "pixels")?;
        let out = slice_mut(scores, n_images * net.config.n_classes, "scores")?;
        let pass = net.forward_eval(&batch(net, px, n_images)?)?;
        out.copy_from_slice(pass.scores().data());
        Ok(())
    })
}

/// Grad-CAM of one image for `class`, upsampled to the input size and
/// normalized to [0, 1]. `detected` is set to 1 and `bbox` filled when a
/// region exceeds `tau`, otherwise `detected` is 0.
///
/// # Safety
/// `pixels` and `heatmap` must each hold `size * size` values; `bbox`
/// and `detected` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn dr_network_gradcam(
    handle: *const DrNetwork,
    pixels: *const f64,
    class: usize,
    tau: f64,
    heatmap: *mut f64,
    bbox: *mut DrBox,
    detected: *mut u8,
) -> DrStatus {
    guard(|| {
        let net = network(handle)?;
        let s = net.config.input_size;
        let px = slice(pixels, s * s, "pixels")?;
        let hm = slice_mut(heatmap, s * s, "heatmap")?;
        let bbox = bbox.as_mut().ok_or_else(|| null("bbox"))?;
        let detected = detected.as_mut().ok_or_else(|| null("detected"))?;
        let d = detect(net, &batch(net, px, 1)?, &[class], TAP_PRE_POOL, tau)?.remove(0);
        hm.copy_from_slice(&d.upsampled);
        match d.region.bbox {
            Some(b) => {
                *bbox = DrBox {
                    x: b.x,
                    y: b.y,
                    w: b.w,
                    h: b.h,
                };
                *detected = 1;
            }
            None => {
                *bbox = DrBox::default();
                *detected = 0;
            }
        }
        Ok(())
    })
}

/// Gram-matrix routing of a 1x1 capsule layer. `gram` is `n_in x n_in`,
/// `weights` is `n_in x n_out`, both row-major. Writes the final couplings
/// (`n_in x n_out`) and output norms (`n_out`).
///
/// # Safety
/// All pointers must reference buffers of the stated sizes.
#[no_mangle]
pub unsafe extern "C" fn dr_route_conv1x1_kernel(
    gram: *const f64,
    n_in: usize,
    weights: *const f64,
    n_out: usize,
    iterations: usize,
    couplings: *mut f64,
    norms: *mut f64,
) -> DrStatus {
    guard(|| {
        let g = Matrix::from_vec(n_in, n_in, slice(gram, n_in * n_in, "gram")?.to_vec())?;
        let w = Matrix::from_vec(n_in, n_out, slice(weights, n_in * n_out, "weights")?.to_vec())?;
        let c_out = slice_mut(couplings, n_in * n_out, "couplings")?;
        let n_out_buf = slice_mut(norms, n_out, "norms")?;
        let r = route_conv1x1_kernel(&g, &Conv1x1CapsuleParams::new(w, iterations)?)?;
        c_out.copy_from_slice(r.couplings.as_slice());
        n_out_buf.copy_from_slice(&r.norms);
        Ok(())
    })
}

/// Area under the ROC curve for binary `labels` (nonzero = positive), ties
/// counted one half. Returns `DR_STATUS_UNDEFINED` unless both classes occur.
///
/// # Safety
/// `scores` and `labels` must hold `n` values; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn dr_auc(scores: *const f64, labels: *const u8, n: usize, out: *mut f64) -> DrStatus {
    guard(|| {
        let s = slice(scores, n, "scores")?;
        let l: Vec<bool> = slice(labels, n, "labels")?.iter().map(|&v| v != 0).collect();
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        match auc(s, &l) {
            Some(a) => {
                *out = a;
                Ok(())
            }
            None => Err(Failure(
                DrStatus::Undefined,
                "AUC needs both positive and negative labels".into(),
            )),
        }
    })
}
