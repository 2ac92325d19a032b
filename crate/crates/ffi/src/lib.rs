#![allow(clippy::neg_cmp_op_on_partial_ord)]

//! C ABI over the `ditherprop` engine.
//!
//! Every fallible entry point returns a [`DpStatus`]; on failure the message
//! is kept per thread and can be read with [`dp_last_error_message`].
//! Handles are opaque and must be released with their `_free` function.
//! Sample buffers are row-major with one sample per row.

use std::cell::RefCell;
use std::ffi::{c_char, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::slice;

use ditherprop::data::{Dataset, Split};
use ditherprop::model::{BackpropMode, DitherKey, ModelSpec, Network, TopK};
use ditherprop::quant::{bitwidth_of, nsd_quantize, NsdConfig};
use ditherprop::tensor::{Matrix, Rng};
use ditherprop::theory::{predict_sparsity, predict_sparsity_delta, InputPdf};
use ditherprop::train::{evaluate, Sgd};
use ditherprop::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DpStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    ShapeMismatch = 3,
    Diverged = 4,
    Io = 5,
    Panic = 6,
    Internal = 7,
}

/// Backward-pass treatment selected through [`DpTrainOptions`].
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DpMode {
    Exact = 0,
    Dithered = 1,
    Meprop = 2,
    Dithered8Bit = 3,
}

/// Options of one training step. `knob` is the scale factor for the
/// dithered modes and the keep fraction (< 1) or count (>= 1) for top-k.
#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct DpTrainOptions {
    pub mode: DpMode,
    pub knob: f64,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

/// Statistics of one quantized buffer.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default)]
pub struct DpQuantStats {
    pub sparsity: f64,
    pub delta: f64,
    pub max_abs_level: u32,
    pub nonzero_bitwidth: u32,
}

/// Outcome of one training step.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default)]
pub struct DpStepReport {
    pub loss: f64,
    /// Mean sparsity of the preactivation gradients over the layers.
    pub sparsity: f64,
    pub worst_bitwidth: u32,
}

/// Opaque random stream.
pub struct DpRng(Rng);

/// Opaque network plus its optimiser state and step counter.
pub struct DpModel {
    net: Network,
    seed: u64,
    iteration: u64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> DpStatus {
    match e {
        Error::Shape { .. } => DpStatus::ShapeMismatch,
        Error::Config(_) | Error::Parse { .. } => DpStatus::InvalidArgument,
        Error::Diverged { .. } => DpStatus::Diverged,
        Error::Io(_) => DpStatus::Io,
        _ => DpStatus::Internal,
    }
}

enum Fail {
    Null(&'static str),
    Arg(String),
    Engine(Error),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Engine(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> DpStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => DpStatus::Ok,
        Ok(Err(Fail::Null(what))) => {
            set_error(format!("null pointer: {what}"));
            DpStatus::NullPointer
        }
        Ok(Err(Fail::Arg(msg))) => {
            set_error(msg);
            DpStatus::InvalidArgument
        }
        Ok(Err(Fail::Engine(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_error("panic inside ditherprop".into());
            DpStatus::Panic
        }
    }
}

unsafe fn slice_in<'a, T>(p: *const T, n: usize, what: &'static str) -> Result<&'a [T], Fail> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    Ok(unsafe { slice::from_raw_parts(p, n) })
}

unsafe fn mut_ref<'a, T>(p: *mut T, what: &'static str) -> Result<&'a mut T, Fail> {
    unsafe { p.as_mut() }.ok_or(Fail::Null(what))
}

fn elements(rows: usize, cols: usize) -> Result<usize, Fail> {
    if rows == 0 || cols == 0 {
        return Err(Fail::Arg(format!("empty shape {rows}x{cols}")));
    }
    rows.checked_mul(cols).ok_or_else(|| Fail::Arg("shape overflows".into()))
}

fn mode_of(o: &DpTrainOptions) -> Result<BackpropMode, Fail> {
    let mode = match o.mode {
        DpMode::Exact => BackpropMode::Exact,
        DpMode::Dithered => BackpropMode::Dithered { scale: o.knob },
        DpMode::Dithered8Bit => BackpropMode::Dithered8Bit { scale: o.knob },
        DpMode::Meprop if o.knob >= 1.0 && o.knob.fract() == 0.0 => BackpropMode::Meprop {
            k: TopK::Count(o.knob as usize),
        },
        DpMode::Meprop => BackpropMode::Meprop { k: TopK::Fraction(o.knob) },
    };
    mode.validate()?;
    Ok(mode)
}

/// Message of the last failed call on this thread, or null. The pointer is
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn dp_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn dp_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

#[no_mangle]
pub extern "C" fn dp_rng_new(seed: u64) -> *mut DpRng {
    Box::into_raw(Box::new(DpRng(Rng::new(seed))))
}

/// # Safety
/// `rng` must come from [`dp_rng_new`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn dp_rng_free(rng: *mut DpRng) {
    if !rng.is_null() {
        drop(unsafe { Box::from_raw(rng) });
    }
}

/// Dithered quantization of a `rows x cols` buffer with `Δ = scale·σ`.
/// Writes the reconstructed values `Δ·level` to `out` and the stats to
/// `stats` (may be null).
///
/// # Safety
/// `input` and `out` must hold `rows*cols` doubles; `rng` must be live.
#[no_mangle]
pub unsafe extern "C" fn dp_nsd_quantize(
    input: *const f64,
    rows: usize,
    cols: usize,
    scale: f64,
    rng: *mut DpRng,
    out: *mut f64,
    stats: *mut DpQuantStats,
) -> DpStatus {
    guard(|| {
        let n = elements(rows, cols)?;
        let x = unsafe { slice_in(input, n, "input") }?;
        let rng = unsafe { mut_ref(rng, "rng") }?;
        if out.is_null() {
            return Err(Fail::Null("out"));
        }
        let m = Matrix::from_vec(rows, cols, x.to_vec())?;
        let (q, st) = nsd_quantize(&m, &NsdConfig::new(scale)?, &mut rng.0)?;
        let dense = q.to_dense();
        unsafe { slice::from_raw_parts_mut(out, n) }.copy_from_slice(dense.data());
        if let Some(s) = unsafe { stats.as_mut() } {
            *s = DpQuantStats {
                sparsity: st.sparsity,
                delta: st.delta,
                max_abs_level: st.max_abs_level,
                nonzero_bitwidth: st.nonzero_bitwidth,
            };
        }
        Ok(())
    })
}

/// Bits (sign included) needed for the largest level; 0 if all are zero.
///
/// # Safety
/// `levels` must hold `n` values (may be null when `n == 0`).
#[no_mangle]
pub unsafe extern "C" fn dp_bitwidth(levels: *const i32, n: usize) -> u32 {
    match unsafe { slice_in(levels, n, "levels") } {
        Ok(l) => bitwidth_of(l),
        Err(_) => 0,
    }
}

/// Predicted zero fraction of a quantized `N(0, σ²)` gradient at scale `s`.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dp_predict_sparsity_gaussian(scale: f64, out: *mut f64) -> DpStatus {
    guard(|| {
        let out = unsafe { mut_ref(out, "out") }?;
        *out = predict_sparsity(&InputPdf::Gaussian { sigma: 1.0 }, scale)?;
        Ok(())
    })
}

/// Predicted zero fraction of a quantized zero-mean Laplace(b) gradient
/// with step `delta`.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dp_predict_sparsity_laplace(b: f64, delta: f64, out: *mut f64) -> DpStatus {
    guard(|| {
        let out = unsafe { mut_ref(out, "out") }?;
        *out = predict_sparsity_delta(&InputPdf::Laplace { b }, delta)?;
        Ok(())
    })
}

/// Builds a ReLU MLP with layer widths `sizes[0..n]` (input first).
///
/// # Safety
/// `sizes` must hold `n` values and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dp_mlp_new(sizes: *const usize, n: usize, seed: u64, out: *mut *mut DpModel) -> DpStatus {
    guard(|| {
        let out = unsafe { mut_ref(out, "out") }?;
        *out = ptr::null_mut();
        let sizes = unsafe { slice_in(sizes, n, "sizes") }?;
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Fail::Arg("an MLP needs at least two positive layer widths".into()));
        }
        let net = Network::new(&ModelSpec::mlp(sizes), seed)?;
        *out = Box::into_raw(Box::new(DpModel { net, seed, iteration: 0 }));
        Ok(())
    })
}

/// # Safety
/// `model` must come from [`dp_mlp_new`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn dp_model_free(model: *mut DpModel) {
    if !model.is_null() {
        drop(unsafe { Box::from_raw(model) });
    }
}

/// Samples as rows plus checked labels.
fn samples(net: &Network, x: &[f64], labels: &[u32]) -> Result<(Matrix, Vec<usize>), Fail> {
    let classes = net.output_features();
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= classes) {
        return Err(Fail::Arg(format!("label {bad} out of range for {classes} classes")));
    }
    let rows = Matrix::from_vec(labels.len(), net.input_features(), x.to_vec())?;
    Ok((rows, labels.iter().map(|&l| l as usize).collect()))
}

/// One SGD step on `batch` samples (`x` is `batch x input_features`).
///
/// # Safety
/// `x` must hold `batch*input_features` doubles, `labels` `batch` values;
/// `report` may be null.
#[no_mangle]
pub unsafe extern "C" fn dp_model_train_batch(
    model: *mut DpModel,
    x: *const f64,
    labels: *const u32,
    batch: usize,
    options: *const DpTrainOptions,
    report: *mut DpStepReport,
) -> DpStatus {
    guard(|| {
        let model = unsafe { mut_ref(model, "model") }?;
        let opts = unsafe { options.as_ref() }.ok_or(Fail::Null("options"))?;
        let n = elements(batch, model.net.input_features())?;
        let x = unsafe { slice_in(x, n, "x") }?;
        let labels = unsafe { slice_in(labels, batch, "labels") }?;
        let mode = mode_of(opts)?;
        if !(opts.lr >= 0.0) || !(0.0..1.0).contains(&opts.momentum) || !(opts.weight_decay >= 0.0) {
            return Err(Fail::Arg("need lr >= 0, momentum in [0, 1) and weight_decay >= 0".into()));
        }
        let (rows, ls) = samples(&model.net, x, labels)?;
        let xm = rows.transpose();
        let key = DitherKey::new(model.seed, 0, model.iteration);
        let (loss, g) = model.net.loss_and_grad(&xm, &ls, &mode, key)?;
        if !loss.is_finite() {
            return Err(Error::Diverged {
                iteration: model.iteration,
                loss,
            }
            .into());
        }
        let sgd = Sgd {
            momentum: opts.momentum,
            weight_decay: opts.weight_decay,
        };
        sgd.step(&mut model.net, &g.params, opts.lr)?;
        model.iteration += 1;
        if let Some(r) = unsafe { report.as_mut() } {
            *r = DpStepReport {
                loss,
                sparsity: g.stats.iter().map(|s| s.sparsity).sum::<f64>() / g.stats.len() as f64,
                worst_bitwidth: g.stats.iter().map(|s| s.nonzero_bitwidth).max().unwrap_or(0),
            };
        }
        Ok(())
    })
}

/// Classification accuracy on `n` samples.
///
/// # Safety
/// `x` must hold `n*input_features` doubles, `labels` `n` values and
/// `accuracy` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dp_model_evaluate(
    model: *const DpModel,
    x: *const f64,
    labels: *const u32,
    n: usize,
    accuracy: *mut f64,
) -> DpStatus {
    guard(|| {
        let model = unsafe { model.as_ref() }.ok_or(Fail::Null("model"))?;
        let acc = unsafe { mut_ref(accuracy, "accuracy") }?;
        let len = elements(n, model.net.input_features())?;
        let x = unsafe { slice_in(x, len, "x") }?;
        let labels = unsafe { slice_in(labels, n, "labels") }?;
        let (rows, ls) = samples(&model.net, x, labels)?;
        let ds = Dataset::new(rows, ls, model.net.output_features(), Split::Test)?;
        *acc = evaluate(&model.net, &ds, false)?;
        Ok(())
    })
}

/// Bit-exact hash of the weights and biases; 0 for a null handle.
///
/// # Safety
/// `model` must be null or live.
#[no_mangle]
pub unsafe extern "C" fn dp_model_param_hash(model: *const DpModel) -> u64 {
    unsafe { model.as_ref() }.map_or(0, |m| m.net.param_hash())
}

/// Number of SGD steps taken so far; 0 for a null handle.
///
/// # Safety
/// `model` must be null or live.
#[no_mangle]
pub unsafe extern "C" fn dp_model_iterations(model: *const DpModel) -> u64 {
    unsafe { model.as_ref() }.map_or(0, |m| m.iteration)
}
