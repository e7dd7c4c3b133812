// SPDX-License-Identifier: MIT OR Apache-2.0

//! C ABI for loading checkpoints and embedding files, encoding, decoding,
//! latent edits and evaluation.
//!
//! Conventions:
//! - every fallible function returns an [`MsaeStatus`]; on failure
//!   [`msae_last_error`] describes the problem (per thread);
//! - handles are opaque and freed with the matching `_free` function;
//! - matrices are row-major `double` buffers whose lengths are passed
//!   explicitly and checked.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use msae::apps::{build_index_with_stats, Edit, ManipulationRequest, Query, ReturnSpace};
use msae::embedset::load_embeddings;
use msae::metrics::{evaluate, EvalOptions, DEFAULT_CKNNA_SAMPLES};
use msae::sae::{decode, encode};
use msae::train::load_checkpoint;
use msae::{Checkpoint, EmbeddingSet, MsaeError};
use ndarray::{ArrayView1, ArrayView2};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MsaeStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Shape = 5,
    NotFound = 6,
    Numeric = 7,
    Panic = 8,
}

impl From<&MsaeError> for MsaeStatus {
    fn from(e: &MsaeError) -> Self {
        match e {
            MsaeError::InvalidArgument(_) | MsaeError::NonFinite(_) => MsaeStatus::InvalidArgument,
            MsaeError::Io { .. } => MsaeStatus::Io,
            MsaeError::Shape(_) => MsaeStatus::Shape,
            MsaeError::NotFound(_) => MsaeStatus::NotFound,
            e if e.is_numeric_error() => MsaeStatus::Numeric,
            _ => MsaeStatus::Format,
        }
    }
}

/// Loaded checkpoint.
pub struct MsaeModel {
    ckpt: Checkpoint,
}

/// Loaded embedding file.
pub struct MsaeEmbeddings {
    set: EmbeddingSet,
}

/// Evaluation metrics; `l0` is the mean fraction of zero activations.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct MsaeMetrics {
    pub l0: f64,
    pub fvu: f64,
    pub evr: f64,
    pub cs: f64,
    pub cknna: f64,
    pub decoder_orthogonality: f64,
    pub dead_neurons: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("no interior nul");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn fail(status: MsaeStatus, msg: impl Into<String>) -> MsaeStatus {
    set_error(msg.into());
    status
}

fn guard(f: impl FnOnce() -> Result<(), MsaeStatus>) -> MsaeStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => MsaeStatus::Ok,
        Ok(Err(s)) => s,
        Err(_) => fail(MsaeStatus::Panic, "internal panic"),
    }
}

fn lift<T>(r: msae::Result<T>) -> Result<T, MsaeStatus> {
    r.map_err(|e| fail(MsaeStatus::from(&e), e.to_string()))
}

unsafe fn path_arg<'a>(p: *const c_char) -> Result<&'a str, MsaeStatus> {
    if p.is_null() {
        return Err(fail(MsaeStatus::NullPointer, "path is null"));
    }
    CStr::from_ptr(p).to_str().map_err(|_| fail(MsaeStatus::InvalidArgument, "path is not valid UTF-8"))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], MsaeStatus> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(fail(MsaeStatus::NullPointer, format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut_arg<'a, T>(p: *mut T, len: usize, what: &str) -> Result<&'a mut [T], MsaeStatus> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(fail(MsaeStatus::NullPointer, format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn handle<'a, T>(p: *const T) -> Result<&'a T, MsaeStatus> {
    p.as_ref().ok_or_else(|| fail(MsaeStatus::NullPointer, "handle is null"))
}

fn area(rows: usize, cols: usize) -> Result<usize, MsaeStatus> {
    rows.checked_mul(cols).ok_or_else(|| fail(MsaeStatus::InvalidArgument, "buffer size overflows"))
}

fn check_len(got: usize, want: usize, what: &str) -> Result<(), MsaeStatus> {
    if got != want {
        return Err(fail(MsaeStatus::Shape, format!("{what}: expected {want} values, got {got}")));
    }
    Ok(())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn msae_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failure on this thread, or NULL. Valid until the next
/// failing call on the same thread.
#[no_mangle]
pub extern "C" fn msae_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Loads an SAE1 checkpoint.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn msae_model_load(path: *const c_char, out: *mut *mut MsaeModel) -> MsaeStatus {
    guard(|| {
        if out.is_null() {
            return Err(fail(MsaeStatus::NullPointer, "out is null"));
        }
        let ckpt = lift(load_checkpoint(path_arg(path)?))?;
        *out = Box::into_raw(Box::new(MsaeModel { ckpt }));
        Ok(())
    })
}

/// # Safety
/// `model` must come from [`msae_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn msae_model_free(model: *mut MsaeModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Input dimension `n` and latent count `d`.
///
/// # Safety
/// `model` must be a live handle; `n` and `d` must be writable.
#[no_mangle]
pub unsafe extern "C" fn msae_model_dims(model: *const MsaeModel, n: *mut usize, d: *mut usize) -> MsaeStatus {
    guard(|| {
        let m = handle(model)?;
        if n.is_null() || d.is_null() {
            return Err(fail(MsaeStatus::NullPointer, "output pointer is null"));
        }
        *n = m.ckpt.config.n;
        *d = m.ckpt.config.d;
        Ok(())
    })
}

/// Infer-mode activations of `rows` raw vectors (`rows * n` values) into
/// `out` (`rows * d` values). Inputs are normalized with the training stats.
///
/// # Safety
/// Buffers must hold the stated number of values.
#[no_mangle]
pub unsafe extern "C" fn msae_model_encode(
    model: *const MsaeModel,
    raw: *const f64,
    raw_len: usize,
    rows: usize,
    out: *mut f64,
    out_len: usize,
) -> MsaeStatus {
    guard(|| {
        let m = handle(model)?;
        let (n, d) = (m.ckpt.config.n, m.ckpt.config.d);
        check_len(raw_len, area(rows, n)?, "raw")?;
        check_len(out_len, area(rows, d)?, "out")?;
        if rows == 0 {
            return Ok(());
        }
        let raw = slice_arg(raw, raw_len, "raw")?;
        let out = slice_mut_arg(out, out_len, "out")?;
        let x = ArrayView2::from_shape((rows, n), raw).expect("length checked");
        let x = lift(m.ckpt.train_stats().normalize_matrix(x))?;
        let z = lift(encode(&m.ckpt.params, &m.ckpt.config, x.view()))?;
        out.copy_from_slice(z.as_standard_layout().as_slice().expect("standard layout"));
        Ok(())
    })
}

/// Decodes `rows` activation vectors (`rows * d`) to raw space (`rows * n`).
///
/// # Safety
/// Buffers must hold the stated number of values.
#[no_mangle]
pub unsafe extern "C" fn msae_model_decode(
    model: *const MsaeModel,
    z: *const f64,
    z_len: usize,
    rows: usize,
    out: *mut f64,
    out_len: usize,
) -> MsaeStatus {
    guard(|| {
        let m = handle(model)?;
        let (n, d) = (m.ckpt.config.n, m.ckpt.config.d);
        check_len(z_len, area(rows, d)?, "z")?;
        check_len(out_len, area(rows, n)?, "out")?;
        if rows == 0 {
            return Ok(());
        }
        let z = slice_arg(z, z_len, "z")?;
        let out = slice_mut_arg(out, out_len, "out")?;
        let z = ArrayView2::from_shape((rows, d), z).expect("length checked");
        let x = lift(decode(&m.ckpt.params, z))?;
        let raw = lift(m.ckpt.train_stats().denormalize_matrix(x.view()))?;
        out.copy_from_slice(raw.as_standard_layout().as_slice().expect("standard layout"));
        Ok(())
    })
}

/// Sets `neurons[i]` to `magnitudes[i]` in the activations of one raw vector
/// and writes the decoded raw vector to `out` (`n` values). `displacement`,
/// if not NULL, receives the raw-space L2 distance to the unedited
/// reconstruction.
///
/// # Safety
/// Buffers must hold the stated number of values.
#[no_mangle]
pub unsafe extern "C" fn msae_model_manipulate(
    model: *const MsaeModel,
    raw: *const f64,
    n: usize,
    neurons: *const usize,
    magnitudes: *const f64,
    edits: usize,
    out: *mut f64,
    displacement: *mut f64,
) -> MsaeStatus {
    guard(|| {
        let m = handle(model)?;
        check_len(n, m.ckpt.config.n, "raw")?;
        let raw = slice_arg(raw, n, "raw")?;
        let neurons = slice_arg(neurons, edits, "neurons")?;
        let magnitudes = slice_arg(magnitudes, edits, "magnitudes")?;
        let out = slice_mut_arg(out, n, "out")?;
        // A one-row index over the input itself.
        let one = lift(EmbeddingSet::new(
            ArrayView1::from(raw).insert_axis(ndarray::Axis(0)).to_owned(),
            m.ckpt.train_modality,
        ))?;
        let index = lift(build_index_with_stats(&m.ckpt, &one, m.ckpt.train_stats().clone()))?;
        let edits = neurons.iter().zip(magnitudes).map(|(&neuron, &magnitude)| Edit { neuron, magnitude }).collect();
        let r = lift(index.manipulate(&ManipulationRequest {
            source: Query::Vector(raw.to_vec()),
            edits,
            return_space: ReturnSpace::Raw,
        }))?;
        out.copy_from_slice(&r.edited_raw);
        if !displacement.is_null() {
            *displacement = r.displacement;
        }
        Ok(())
    })
}

/// Loads an EMB1 embedding file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn msae_embeddings_load(path: *const c_char, out: *mut *mut MsaeEmbeddings) -> MsaeStatus {
    guard(|| {
        if out.is_null() {
            return Err(fail(MsaeStatus::NullPointer, "out is null"));
        }
        let set = lift(load_embeddings(path_arg(path)?))?;
        *out = Box::into_raw(Box::new(MsaeEmbeddings { set }));
        Ok(())
    })
}

/// # Safety
/// `set` must come from [`msae_embeddings_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn msae_embeddings_free(set: *mut MsaeEmbeddings) {
    if !set.is_null() {
        drop(Box::from_raw(set));
    }
}

/// Row count and dimension.
///
/// # Safety
/// `set` must be a live handle; `rows` and `n` must be writable.
#[no_mangle]
pub unsafe extern "C" fn msae_embeddings_dims(set: *const MsaeEmbeddings, rows: *mut usize, n: *mut usize) -> MsaeStatus {
    guard(|| {
        let s = handle(set)?;
        if rows.is_null() || n.is_null() {
            return Err(fail(MsaeStatus::NullPointer, "output pointer is null"));
        }
        *rows = s.set.rows();
        *n = s.set.dim();
        Ok(())
    })
}

/// Copies the matrix (`rows * n` values, row-major) into `out`.
///
/// # Safety
/// `out` must hold `out_len` values.
#[no_mangle]
pub unsafe extern "C" fn msae_embeddings_copy(set: *const MsaeEmbeddings, out: *mut f64, out_len: usize) -> MsaeStatus {
    guard(|| {
        let s = handle(set)?;
        check_len(out_len, s.set.rows() * s.set.dim(), "out")?;
        let out = slice_mut_arg(out, out_len, "out")?;
        for (dst, src) in out.iter_mut().zip(s.set.data().iter()) {
            *dst = *src;
        }
        Ok(())
    })
}

/// Evaluates `model` on `set` using the checkpoint's stats for the set's
/// modality. `cknna_k = 0` selects the default of 10.
///
/// # Safety
/// Handles must be live; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn msae_evaluate(
    model: *const MsaeModel,
    set: *const MsaeEmbeddings,
    cknna_k: usize,
    seed: u64,
    out: *mut MsaeMetrics,
) -> MsaeStatus {
    guard(|| {
        let m = handle(model)?;
        let s = handle(set)?;
        if out.is_null() {
            return Err(fail(MsaeStatus::NullPointer, "out is null"));
        }
        let stats = m.ckpt.stats_for(s.set.modality()).ok_or_else(|| {
            fail(MsaeStatus::NotFound, format!("checkpoint has no stats for modality {}", s.set.modality()))
        })?;
        let opts = EvalOptions {
            cknna_k: if cknna_k == 0 { msae::metrics::DEFAULT_CKNNA_K } else { cknna_k },
            cknna_samples: DEFAULT_CKNNA_SAMPLES,
            seed,
            top_k: None,
        };
        let r = lift(evaluate(&m.ckpt, &s.set, stats, None, &opts))?;
        *out = MsaeMetrics {
            l0: r.l0,
            fvu: r.fvu,
            evr: r.evr,
            cs: r.cs,
            cknna: r.cknna,
            decoder_orthogonality: r.do_score,
            dead_neurons: r.ndn,
        };
        Ok(())
    })
}
