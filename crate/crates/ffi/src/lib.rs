//! C ABI over `srpl-core`.
//!
//! Every fallible function returns an [`SrplStatus`]; on failure the message
//! is available from [`srpl_last_error_message`] on the same thread. Handles
//! are opaque and must be released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;
use std::slice;

use srpl_core::model::{build_model, read_checkpoint, write_checkpoint, Model, ModelConfig};
use srpl_core::rope::{self, PhaseInit, RotationEngineKind, Side, SpectralBasis, PHASE_NOISE_STD};
use srpl_core::tasks;
use srpl_core::tensor::Tensor;
use srpl_core::SrplError;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SrplStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Numeric = 3,
    State = 4,
    Format = 5,
    Missing = 6,
    Io = 7,
    BufferTooSmall = 8,
    Panic = 9,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SrplEngine {
    Standard = 0,
    Spectral = 1,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SrplSide {
    Query = 0,
    Key = 1,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SrplBasisField {
    Omega = 0,
    Amplitude = 1,
    PhaseQ = 2,
    PhaseK = 3,
}

/// Model hyperparameters. Spectral bases start from zero phases.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct SrplModelConfig {
    pub vocab_size: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub num_layers: usize,
    pub max_seq_len: usize,
    pub rope_base: f64,
    pub engine: SrplEngine,
    pub untied_phase: bool,
}

/// Opaque spectral basis handle.
pub struct SrplBasis(SpectralBasis);

/// Opaque model handle.
pub struct SrplModel(Model);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn status_of(e: &SrplError) -> SrplStatus {
    match e {
        SrplError::Dimension { .. } | SrplError::Contract(_) | SrplError::Index { .. } | SrplError::Input(_) => {
            SrplStatus::InvalidArgument
        }
        SrplError::NonFinite { .. } | SrplError::Numeric { .. } => SrplStatus::Numeric,
        SrplError::State(_) => SrplStatus::State,
        SrplError::Format(_) => SrplStatus::Format,
        SrplError::Missing(_) => SrplStatus::Missing,
        SrplError::Io(io) if io.kind() == std::io::ErrorKind::NotFound => SrplStatus::Missing,
        SrplError::Io(_) => SrplStatus::Io,
    }
}

struct Fail(SrplStatus, String);

impl From<SrplError> for Fail {
    fn from(e: SrplError) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(SrplStatus::NullPointer, format!("`{what}` is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> SrplStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            SrplStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            SrplStatus::Panic
        }
    }
}

unsafe fn slice_in<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts(p, len))
}

unsafe fn slice_out<'a, T>(p: *mut T, len: usize, what: &str) -> Result<&'a mut [T], Fail> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts_mut(p, len))
}

unsafe fn str_in<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(SrplStatus::InvalidArgument, format!("`{what}` is not UTF-8")))
}

unsafe fn put<T>(out: *mut *mut T, value: T) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null("out"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

fn too_small(need: usize, have: usize) -> Fail {
    Fail(
        SrplStatus::BufferTooSmall,
        format!("output buffer holds {have} values, {need} required"),
    )
}

/// Copies the calling thread's last error message into `buf` (NUL
/// terminated, truncated to `len`). Returns the full message length
/// including the terminator, or 0 when there is no error.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn srpl_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        let Some(msg) = e.as_ref() else {
            return 0;
        };
        let bytes = msg.as_bytes_with_nul();
        if !buf.is_null() && len > 0 {
            let n = bytes.len().min(len);
            ptr::copy_nonoverlapping(bytes.as_ptr().cast::<c_char>(), buf, n);
            *buf.add(n - 1) = 0;
        }
        bytes.len()
    })
}

/// Geometric basis for rotary dimension `d`. With `surgical` the phases are
/// zero; otherwise they carry Gaussian noise seeded by `noise_seed`.
///
/// # Safety
/// `out` must be a valid pointer to a handle slot.
#[no_mangle]
pub unsafe extern "C" fn srpl_basis_geometric(
    d: usize,
    base: f64,
    surgical: bool,
    noise_seed: u64,
    out: *mut *mut SrplBasis,
) -> SrplStatus {
    guard(|| {
        let init = if surgical {
            PhaseInit::Surgical
        } else {
            PhaseInit::Noise {
                std: PHASE_NOISE_STD,
                seed: noise_seed,
            }
        };
        put(out, SrplBasis(rope::geometric_init(d, base, init)?))
    })
}

/// Basis from explicit vectors of length `half`. `phase_k` null means the
/// phases are tied to `phase_q`.
///
/// # Safety
/// Non-null array pointers must reference `half` readable doubles.
#[no_mangle]
pub unsafe extern "C" fn srpl_basis_from_arrays(
    half: usize,
    omega: *const f64,
    amplitude: *const f64,
    phase_q: *const f64,
    phase_k: *const f64,
    out: *mut *mut SrplBasis,
) -> SrplStatus {
    guard(|| {
        if half == 0 {
            return Err(Fail(SrplStatus::InvalidArgument, "basis needs at least one pair".into()));
        }
        let mut b = rope::geometric_init(2 * half, 10000.0, PhaseInit::Surgical)?;
        b.omega = slice_in(omega, half, "omega")?.to_vec();
        b.amplitude = slice_in(amplitude, half, "amplitude")?.to_vec();
        b.phase_q = slice_in(phase_q, half, "phase_q")?.to_vec();
        if phase_k.is_null() {
            b.phase_k = b.phase_q.clone();
        } else {
            b = b.untied();
            b.phase_k = slice_in(phase_k, half, "phase_k")?.to_vec();
        }
        b.validate()?;
        put(out, SrplBasis(b))
    })
}

/// # Safety
/// `basis` must be null or a handle from this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn srpl_basis_free(basis: *mut SrplBasis) {
    if !basis.is_null() {
        drop(Box::from_raw(basis));
    }
}

/// Number of dimension pairs, or 0 for a null handle.
///
/// # Safety
/// `basis` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn srpl_basis_half_dim(basis: *const SrplBasis) -> usize {
    basis.as_ref().map_or(0, |b| b.0.half_dim())
}

/// Copies one basis vector into `out` (`len` ≥ half dimension).
///
/// # Safety
/// `basis` must be a live handle; `out` must reference `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn srpl_basis_get(
    basis: *const SrplBasis,
    field: SrplBasisField,
    out: *mut f64,
    len: usize,
) -> SrplStatus {
    guard(|| {
        let b = &basis.as_ref().ok_or_else(|| null("basis"))?.0;
        let src = match field {
            SrplBasisField::Omega => &b.omega,
            SrplBasisField::Amplitude => &b.amplitude,
            SrplBasisField::PhaseQ => &b.phase_q,
            SrplBasisField::PhaseK => &b.phase_k,
        };
        if len < src.len() {
            return Err(too_small(src.len(), len));
        }
        slice_out(out, src.len(), "out")?.copy_from_slice(src);
        Ok(())
    })
}

/// Rotates `rows × d` row-major `x` at `positions` into `out` (same shape).
///
/// # Safety
/// `x` and `out` must reference `rows * d` doubles, `positions` `rows` entries.
#[no_mangle]
pub unsafe extern "C" fn srpl_spectral_rotate(
    basis: *const SrplBasis,
    x: *const f64,
    rows: usize,
    d: usize,
    positions: *const usize,
    side: SrplSide,
    out: *mut f64,
) -> SrplStatus {
    guard(|| {
        let b = &basis.as_ref().ok_or_else(|| null("basis"))?.0;
        let n = rows
            .checked_mul(d)
            .ok_or_else(|| Fail(SrplStatus::InvalidArgument, "rows * d overflows".into()))?;
        let xt = Tensor::new(vec![rows, d], slice_in(x, n, "x")?.to_vec())?;
        let pos = slice_in(positions, rows, "positions")?;
        let side = match side {
            SrplSide::Query => Side::Query,
            SrplSide::Key => Side::Key,
        };
        let r = rope::spectral_rotate(&xt, pos, b, side)?;
        slice_out(out, n, "out")?.copy_from_slice(r.data());
        Ok(())
    })
}

/// Score between `q` rotated at `m` and `k` rotated at `n`.
///
/// # Safety
/// `q` and `k` must reference `d` doubles; `out` one writable double.
#[no_mangle]
pub unsafe extern "C" fn srpl_pairwise_score(
    basis: *const SrplBasis,
    q: *const f64,
    k: *const f64,
    d: usize,
    m: usize,
    n: usize,
    out: *mut f64,
) -> SrplStatus {
    guard(|| {
        let b = &basis.as_ref().ok_or_else(|| null("basis"))?.0;
        let s = rope::pairwise_score(slice_in(q, d, "q")?, slice_in(k, d, "k")?, m, n, b)?;
        *out.as_mut().ok_or_else(|| null("out"))? = s;
        Ok(())
    })
}

/// Writes `2πk/N` for `k = 1..=k_max` into `out`.
///
/// # Safety
/// `out` must reference `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn srpl_resonance_frequencies(n: usize, k_max: usize, out: *mut f64, len: usize) -> SrplStatus {
    guard(|| {
        if n == 0 || k_max == 0 {
            return Err(Fail(SrplStatus::InvalidArgument, "N and k_max must be >= 1".into()));
        }
        if len < k_max {
            return Err(too_small(k_max, len));
        }
        slice_out(out, k_max, "out")?.copy_from_slice(&rope::resonance_frequencies(n, k_max));
        Ok(())
    })
}

/// Builds a model deterministically from `seed`.
///
/// # Safety
/// `config` must point to a valid config; `out` to a handle slot.
#[no_mangle]
pub unsafe extern "C" fn srpl_model_build(config: *const SrplModelConfig, seed: u64, out: *mut *mut SrplModel) -> SrplStatus {
    guard(|| {
        let c = config.as_ref().ok_or_else(|| null("config"))?;
        let engine = match c.engine {
            SrplEngine::Standard => RotationEngineKind::Standard,
            SrplEngine::Spectral => RotationEngineKind::Spectral,
        };
        let mut cfg = ModelConfig::new(c.vocab_size, engine);
        cfg.hidden_dim = c.hidden_dim;
        cfg.num_heads = c.num_heads;
        cfg.num_layers = c.num_layers;
        cfg.max_seq_len = c.max_seq_len;
        cfg.rope_base = c.rope_base;
        cfg.untied_phase = c.untied_phase;
        cfg.basis_init = srpl_core::model::BasisInit::Surgical;
        put(out, SrplModel(build_model(cfg, seed)?))
    })
}

/// # Safety
/// `path` must be a NUL-terminated string; `out` a handle slot.
#[no_mangle]
pub unsafe extern "C" fn srpl_model_load(path: *const c_char, out: *mut *mut SrplModel) -> SrplStatus {
    guard(|| {
        let p = str_in(path, "path")?;
        let (model, _) = read_checkpoint(Path::new(p))?;
        put(out, SrplModel(model))
    })
}

/// # Safety
/// `model` must be a live handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn srpl_model_save(model: *const SrplModel, path: *const c_char) -> SrplStatus {
    guard(|| {
        let m = &model.as_ref().ok_or_else(|| null("model"))?.0;
        write_checkpoint(Path::new(str_in(path, "path")?), m, &[])?;
        Ok(())
    })
}

/// Vocabulary size, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn srpl_model_vocab_size(model: *const SrplModel) -> usize {
    model.as_ref().map_or(0, |m| m.0.config().vocab_size)
}

/// Causal logits for `tokens`, written row-major into `out`
/// (`len` ≥ `n_tokens * vocab_size`).
///
/// # Safety
/// `tokens` must reference `n_tokens` entries and `out` `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn srpl_model_forward(
    model: *const SrplModel,
    tokens: *const usize,
    n_tokens: usize,
    out: *mut f64,
    len: usize,
) -> SrplStatus {
    guard(|| {
        let m = &model.as_ref().ok_or_else(|| null("model"))?.0;
        let logits = m.forward(slice_in(tokens, n_tokens, "tokens")?)?;
        let need = logits.numel();
        if len < need {
            return Err(too_small(need, len));
        }
        slice_out(out, need, "out")?.copy_from_slice(logits.data());
        Ok(())
    })
}

/// Spectral copy of a standard-engine model with identical outputs.
///
/// # Safety
/// `model` must be a live handle; `out` a handle slot.
#[no_mangle]
pub unsafe extern "C" fn srpl_model_surgical_swap(model: *const SrplModel, out: *mut *mut SrplModel) -> SrplStatus {
    guard(|| {
        let m = &model.as_ref().ok_or_else(|| null("model"))?.0;
        put(out, SrplModel(m.surgical_swap()?))
    })
}

/// # Safety
/// `model` must be null or a handle from this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn srpl_model_free(model: *mut SrplModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Reverse complement of a DNA string into `out` (NUL terminated).
///
/// # Safety
/// `dna` must be NUL terminated; `out` must reference `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn srpl_reverse_complement(dna: *const c_char, out: *mut c_char, len: usize) -> SrplStatus {
    guard(|| {
        let rc = tasks::reverse_complement(str_in(dna, "dna")?)?;
        if len < rc.len() + 1 {
            return Err(too_small(rc.len() + 1, len));
        }
        let dst = slice_out(out.cast::<u8>(), rc.len() + 1, "out")?;
        dst[..rc.len()].copy_from_slice(rc.as_bytes());
        dst[rc.len()] = 0;
        Ok(())
    })
}

/// Pushdown check of a bracket string over `()[]{}`.
///
/// # Safety
/// `s` must be NUL terminated; `valid` and `max_depth` writable.
#[no_mangle]
pub unsafe extern "C" fn srpl_dyck_validate(s: *const c_char, valid: *mut bool, max_depth: *mut usize) -> SrplStatus {
    guard(|| {
        let v = tasks::dyck_validate(str_in(s, "s")?)?;
        *valid.as_mut().ok_or_else(|| null("valid"))? = v.valid;
        *max_depth.as_mut().ok_or_else(|| null("max_depth"))? = v.max_depth;
        Ok(())
    })
}
