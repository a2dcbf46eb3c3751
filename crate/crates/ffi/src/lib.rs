//! C interface to trained uGMM-NN and FFNN checkpoints.
//!
//! A checkpoint is loaded into an opaque `UgmmNetwork` handle that callers
//! free with `ugmm_network_free`. Every function returns a `UgmmStatus`;
//! on failure a description is kept per thread and can be copied out with
//! `ugmm_last_error_message`. Panics never cross the boundary: they are
//! caught and reported as `UGMM_STATUS_PANIC`.
//!
//! Matrices are dense, row-major `double` arrays.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use ugmm_nn::data::load_checkpoint;
use ugmm_nn::net::{predict, Layer, NetworkParams};
use ugmm_nn::numkit::Matrix;
use ugmm_nn::ugmm::{self, UgmmLayerParams};
use ugmm_nn::{Error, Mode, ModelKind};

/// Result of every call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UgmmStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullPointer = 1,
    /// A size, index or string argument is out of range or malformed.
    InvalidArgument = 2,
    /// The file could not be read.
    Io = 3,
    /// The file is not a valid checkpoint.
    Checkpoint = 4,
    /// Array dimensions do not match the network.
    Shape = 5,
    /// Non-finite values or another numerical failure.
    Numerical = 6,
    /// A bug inside the library; the message holds the panic payload.
    Panic = 7,
}

/// Which kind of network a handle holds.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UgmmModelKind {
    Ugmm = 0,
    Ffnn = 1,
}

/// A loaded network. Opaque to C.
pub struct UgmmNetwork {
    params: NetworkParams,
    kind: ModelKind,
    mode: Mode,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

struct Failure(UgmmStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Io { .. } => UgmmStatus::Io,
            Error::Checkpoint(_) | Error::Data(_) => UgmmStatus::Checkpoint,
            Error::Shape(_) => UgmmStatus::Shape,
            Error::Numerical(_) | Error::EmptyMixture => UgmmStatus::Numerical,
            Error::Index(_) | Error::Config { .. } => UgmmStatus::InvalidArgument,
        };
        Failure(status, e.to_string())
    }
}

fn fail<T>(status: UgmmStatus, msg: impl Into<String>) -> Result<T, Failure> {
    Err(Failure(status, msg.into()))
}

/// Runs `body`, records any failure for `ugmm_last_error_message`, and turns
/// panics into `UGMM_STATUS_PANIC`.
fn guard(body: impl FnOnce() -> Result<(), Failure>) -> UgmmStatus {
    let outcome = catch_unwind(AssertUnwindSafe(body)).unwrap_or_else(|payload| {
        let msg = payload
            .downcast_ref::<&str>()
            .map(|s| s.to_string())
            .or_else(|| payload.downcast_ref::<String>().cloned())
            .unwrap_or_else(|| "unknown panic".into());
        Err(Failure(UgmmStatus::Panic, format!("panic: {msg}")))
    });
    let (status, msg) = match outcome {
        Ok(()) => (UgmmStatus::Ok, String::new()),
        Err(Failure(s, m)) => (s, m),
    };
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
    status
}

fn non_null<T>(p: *const T, name: &str) -> Result<(), Failure> {
    if p.is_null() {
        return fail(UgmmStatus::NullPointer, format!("`{name}` is null"));
    }
    Ok(())
}

unsafe fn network<'a>(net: *const UgmmNetwork) -> Result<&'a UgmmNetwork, Failure> {
    non_null(net, "net")?;
    Ok(&*net)
}

/// Copies `rows × cols` doubles into a matrix, rejecting overflow and NaN.
unsafe fn read_matrix(x: *const f64, rows: usize, cols: usize, name: &str) -> Result<Matrix, Failure> {
    non_null(x, name)?;
    let len = rows
        .checked_mul(cols)
        .ok_or_else(|| Failure(UgmmStatus::InvalidArgument, format!("`{name}` dimensions overflow")))?;
    let data = std::slice::from_raw_parts(x, len).to_vec();
    if data.iter().any(|v| v.is_nan()) {
        return fail(UgmmStatus::Numerical, format!("`{name}` contains NaN"));
    }
    Ok(Matrix::from_vec(rows, cols, data)?)
}

unsafe fn write_out(out: *mut f64, out_len: usize, values: &[f64], name: &str) -> Result<(), Failure> {
    non_null(out, name)?;
    if out_len < values.len() {
        return fail(
            UgmmStatus::Shape,
            format!("`{name}` holds {out_len} values, {} needed", values.len()),
        );
    }
    std::slice::from_raw_parts_mut(out, values.len()).copy_from_slice(values);
    Ok(())
}

/// Loads a checkpoint written by `ugmm-nn train`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer. On
/// success `*out` owns a handle to release with `ugmm_network_free`.
#[no_mangle]
pub unsafe extern "C" fn ugmm_network_load(path: *const c_char, out: *mut *mut UgmmNetwork) -> UgmmStatus {
    guard(|| {
        non_null(path, "path")?;
        non_null(out, "out")?;
        *out = std::ptr::null_mut();
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| Failure(UgmmStatus::InvalidArgument, "`path` is not UTF-8".into()))?;
        let ckpt = load_checkpoint(Path::new(path))?;
        let net = UgmmNetwork { params: ckpt.params, kind: ckpt.spec.kind, mode: ckpt.spec.mode };
        *out = Box::into_raw(Box::new(net));
        Ok(())
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `net` must come from `ugmm_network_load` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ugmm_network_free(net: *mut UgmmNetwork) {
    if !net.is_null() {
        drop(Box::from_raw(net));
    }
}

/// Model kind of a loaded network.
///
/// # Safety
/// `net` must be a live handle and `kind` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ugmm_network_kind(net: *const UgmmNetwork, kind: *mut UgmmModelKind) -> UgmmStatus {
    guard(|| {
        let net = network(net)?;
        non_null(kind, "kind")?;
        *kind = match net.kind {
            ModelKind::Ugmm => UgmmModelKind::Ugmm,
            ModelKind::Ffnn => UgmmModelKind::Ffnn,
        };
        Ok(())
    })
}

/// Layer widths, input first. Writes at most `cap` entries to `widths`
/// (which may be null when `cap` is 0) and always stores the full count in
/// `*len`, so a first call with `cap = 0` sizes the buffer.
///
/// # Safety
/// `net` must be a live handle, `widths` must hold `cap` entries and `len`
/// must be valid.
#[no_mangle]
pub unsafe extern "C" fn ugmm_network_widths(
    net: *const UgmmNetwork,
    widths: *mut usize,
    cap: usize,
    len: *mut usize,
) -> UgmmStatus {
    guard(|| {
        let net = network(net)?;
        non_null(len, "len")?;
        let w = net.params.widths();
        *len = w.len();
        if cap > 0 {
            non_null(widths, "widths")?;
            let n = cap.min(w.len());
            std::slice::from_raw_parts_mut(widths, n).copy_from_slice(&w[..n]);
        }
        Ok(())
    })
}

/// Inference pass (no dropout) over `rows` samples of `cols` features.
/// Writes `rows × classes` outputs: class logits for discriminative models,
/// joint log-densities `log P(y=c, x)` for generative ones.
///
/// # Safety
/// `x` must hold `rows × cols` doubles and `out` `out_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn ugmm_network_forward(
    net: *const UgmmNetwork,
    x: *const f64,
    rows: usize,
    cols: usize,
    out: *mut f64,
    out_len: usize,
) -> UgmmStatus {
    guard(|| {
        let net = network(net)?;
        let x = read_matrix(x, rows, cols, "x")?;
        let y = net.params.infer(&x)?;
        write_out(out, out_len, y.as_slice(), "out")
    })
}

/// Predicted class per row: the argmax output, lowest index on ties.
///
/// # Safety
/// `x` must hold `rows × cols` doubles and `labels` `rows` entries.
#[no_mangle]
pub unsafe extern "C" fn ugmm_network_predict(
    net: *const UgmmNetwork,
    x: *const f64,
    rows: usize,
    cols: usize,
    labels: *mut usize,
) -> UgmmStatus {
    guard(|| {
        let net = network(net)?;
        let x = read_matrix(x, rows, cols, "x")?;
        non_null(labels, "labels")?;
        let y = predict(&net.params.infer(&x)?, net.mode);
        std::slice::from_raw_parts_mut(labels, rows).copy_from_slice(&y);
        Ok(())
    })
}

/// Mixture density of uGMM neuron `neuron` in layer `layer` (0-based over
/// parameter layers) at each of the `n` grid points.
///
/// # Safety
/// `grid` and `out` must each hold `n` doubles.
#[no_mangle]
pub unsafe extern "C" fn ugmm_network_density_curve(
    net: *const UgmmNetwork,
    layer: usize,
    neuron: usize,
    grid: *const f64,
    n: usize,
    out: *mut f64,
) -> UgmmStatus {
    guard(|| {
        let net = network(net)?;
        let g = read_matrix(grid, 1, n, "grid")?;
        let layers = net.params.layers();
        let Some(l) = layers.get(layer) else {
            return fail(
                UgmmStatus::InvalidArgument,
                format!("layer {layer} of a network with {} layers", layers.len()),
            );
        };
        let Layer::Ugmm(p) = l else {
            return fail(UgmmStatus::InvalidArgument, format!("layer {layer} is not a uGMM layer"));
        };
        let d = ugmm::density_curve(p, neuron, g.as_slice())?;
        write_out(out, n, &d, "out")
    })
}

/// Stateless uGMM layer: `out[b, j] = log Σ_k π_jk N(x[b, k]; μ_jk, σ_jk²)`
/// with `π_j = softmax(pi_logit[j, :])` and `σ = exp(log_sigma)`. Parameter
/// arrays are `n_out × n_in`, `x` is `batch × n_in`, `out` is `batch × n_out`.
///
/// # Safety
/// Every pointer must reference an array of the stated size.
#[no_mangle]
pub unsafe extern "C" fn ugmm_layer_forward(
    mu: *const f64,
    log_sigma: *const f64,
    pi_logit: *const f64,
    n_out: usize,
    n_in: usize,
    x: *const f64,
    batch: usize,
    out: *mut f64,
) -> UgmmStatus {
    guard(|| {
        if n_out == 0 || n_in == 0 {
            return fail(UgmmStatus::InvalidArgument, "layer needs at least one input and one neuron");
        }
        let params = UgmmLayerParams::new(
            read_matrix(mu, n_out, n_in, "mu")?,
            read_matrix(log_sigma, n_out, n_in, "log_sigma")?,
            read_matrix(pi_logit, n_out, n_in, "pi_logit")?,
        )?;
        let x = read_matrix(x, batch, n_in, "x")?;
        let a = ugmm::forward(&params, &x, None)?;
        write_out(out, batch * n_out, a.as_slice(), "out")
    })
}

/// Copies the calling thread's last error message (empty after a success)
/// into `buf` as a NUL-terminated string, truncating to `cap - 1` bytes.
/// Returns the buffer size needed for the whole message.
///
/// # Safety
/// `buf` must hold `cap` bytes, or be null with `cap` 0.
#[no_mangle]
pub unsafe extern "C" fn ugmm_last_error_message(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        let bytes = msg.as_bytes();
        if !buf.is_null() && cap > 0 {
            let n = bytes.len().min(cap - 1);
            std::ptr::copy_nonoverlapping(bytes.as_ptr(), buf as *mut u8, n);
            *buf.add(n) = 0;
        }
        bytes.len() + 1
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ugmm_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}
