//! C ABI over the `moalign` core.
//!
//! Models are opaque handles created by [`moalign_model_load`] or
//! [`moalign_model_new`] and released with [`moalign_model_free`]. Every
//! fallible function returns a [`MoalignStatus`]; on failure the message is
//! available from [`moalign_last_error`] on the same thread. Strings returned
//! through out-pointers are owned by the caller and released with
//! [`moalign_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use moalign::decode::{cost_estimate, decode, BoundaryCriteria, DecodeConfig, DecodeMode, SamplingConfig, StepScorer};
use moalign::policy::{check_simplex, HeadSource, ModelDims, PolicyModel, TokenizerSpec};
use moalign::synthtasks::{parse_prompt, verify, OracleScorer};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MoalignStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Model = 4,
    Decode = 5,
    Panic = 6,
}

/// Decoding mode of [`moalign_decode`].
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MoalignDecodeMode {
    CacheCarry = 0,
    ReEncode = 1,
}

/// Opaque policy handle.
pub struct MoalignModel {
    inner: PolicyModel,
}

/// Settings of one [`moalign_decode`] call.
#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct MoalignDecodeOptions {
    /// Candidates per step; 1 without guidance reproduces plain sampling.
    pub k: usize,
    pub t_max: usize,
    pub chunk_cap: usize,
    pub seed: u64,
    pub mode: MoalignDecodeMode,
    /// Score candidates with the exact arithmetic verifier.
    pub oracle_guidance: bool,
    pub temperature: f64,
}

/// Token-forward accounting of one decode call.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default)]
pub struct MoalignLedger {
    pub prompt_len: usize,
    pub committed_tokens: usize,
    pub steps: usize,
    pub candidates: usize,
    pub token_forwards: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

struct Failure(MoalignStatus, String);

fn fail(status: MoalignStatus, e: impl std::fmt::Display) -> Failure {
    Failure(status, e.to_string())
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> MoalignStatus {
    clear_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => MoalignStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            MoalignStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(fail(MoalignStatus::NullPointer, format!("{name} is null")));
    }
    // SAFETY: non-null and, by contract, NUL-terminated and live for the call.
    CStr::from_ptr(p).to_str().map_err(|e| fail(MoalignStatus::InvalidArgument, format!("{name}: {e}")))
}

fn out_string(out: *mut *mut c_char, s: String) -> Result<(), Failure> {
    let c = CString::new(s).map_err(|e| fail(MoalignStatus::InvalidArgument, e))?;
    // SAFETY: `out` was checked non-null by the caller of this helper.
    unsafe { *out = c.into_raw() };
    Ok(())
}

/// Message of the last failed call on this thread, or null. The pointer is
/// valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn moalign_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |s| s.as_ptr()))
}

/// Loads a policy checkpoint.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn moalign_model_load(path: *const c_char, out: *mut *mut MoalignModel) -> MoalignStatus {
    guard(|| {
        if out.is_null() {
            return Err(fail(MoalignStatus::NullPointer, "out is null"));
        }
        let path = str_arg(path, "path")?;
        let inner = PolicyModel::load(Path::new(path)).map_err(|e| {
            let status = if matches!(e, moalign::policy::ModelError::Io(_)) { MoalignStatus::Io } else { MoalignStatus::Model };
            fail(status, e)
        })?;
        *out = Box::into_raw(Box::new(MoalignModel { inner }));
        Ok(())
    })
}

/// Creates a randomly initialized policy over the default arithmetic
/// tokenizer.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn moalign_model_new(
    hidden_dim: usize,
    layers: usize,
    attn_heads: usize,
    objective_heads: usize,
    max_positions: usize,
    seed: u64,
    out: *mut *mut MoalignModel,
) -> MoalignStatus {
    guard(|| {
        if out.is_null() {
            return Err(fail(MoalignStatus::NullPointer, "out is null"));
        }
        let tok = TokenizerSpec::default();
        let dims = ModelDims { vocab_size: tok.vocab_size(), hidden_dim, layers, attn_heads, max_positions, objective_heads };
        let inner = PolicyModel::new(dims, tok, seed).map_err(|e| fail(MoalignStatus::InvalidArgument, e))?;
        *out = Box::into_raw(Box::new(MoalignModel { inner }));
        Ok(())
    })
}

/// Saves a policy checkpoint.
///
/// # Safety
/// `model` must come from this library and `path` be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn moalign_model_save(model: *const MoalignModel, path: *const c_char) -> MoalignStatus {
    guard(|| {
        let model = model.as_ref().ok_or_else(|| fail(MoalignStatus::NullPointer, "model is null"))?;
        let path = str_arg(path, "path")?;
        model.inner.save(Path::new(path)).map_err(|e| fail(MoalignStatus::Io, e))
    })
}

/// Number of objective heads, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or come from this library.
#[no_mangle]
pub unsafe extern "C" fn moalign_model_heads(model: *const MoalignModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.num_heads())
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn moalign_model_free(model: *mut MoalignModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Default options: `K = 5`, `T_max = 80`, chunk cap 16, cache-carry,
/// oracle guidance, temperature 1.
#[no_mangle]
pub extern "C" fn moalign_decode_options_default() -> MoalignDecodeOptions {
    MoalignDecodeOptions {
        k: 5,
        t_max: 80,
        chunk_cap: 16,
        seed: 0,
        mode: MoalignDecodeMode::CacheCarry,
        oracle_guidance: true,
        temperature: 1.0,
    }
}

/// Decodes a response to `prompt` under the head mixture `weights`
/// (`n_weights` must equal the number of heads). Steps end at newlines.
///
/// # Safety
/// `model` must come from this library, `prompt` be NUL-terminated,
/// `weights` point to `n_weights` doubles, and `out_text` be valid.
/// `ledger` may be null.
#[no_mangle]
pub unsafe extern "C" fn moalign_decode(
    model: *const MoalignModel,
    prompt: *const c_char,
    weights: *const f64,
    n_weights: usize,
    options: *const MoalignDecodeOptions,
    out_text: *mut *mut c_char,
    ledger: *mut MoalignLedger,
) -> MoalignStatus {
    guard(|| {
        let model = &model.as_ref().ok_or_else(|| fail(MoalignStatus::NullPointer, "model is null"))?.inner;
        let opts = options.as_ref().ok_or_else(|| fail(MoalignStatus::NullPointer, "options is null"))?;
        if out_text.is_null() || weights.is_null() {
            return Err(fail(MoalignStatus::NullPointer, "weights or out_text is null"));
        }
        let prompt = str_arg(prompt, "prompt")?;
        let w = std::slice::from_raw_parts(weights, n_weights).to_vec();
        check_simplex(&w, model.num_heads()).map_err(|e| fail(MoalignStatus::InvalidArgument, e))?;
        let tok = model.tokenizer();
        let ids = tok.encode_prompt(prompt).map_err(|e| fail(MoalignStatus::InvalidArgument, e))?;
        let cfg = DecodeConfig {
            k: opts.k,
            t_max: opts.t_max,
            chunk_cap: opts.chunk_cap,
            boundary: BoundaryCriteria::Separator(tok.separator()),
            sampling: SamplingConfig { temperature: opts.temperature, ..SamplingConfig::default() },
            seed: opts.seed,
            mode: match opts.mode {
                MoalignDecodeMode::CacheCarry => DecodeMode::CacheCarry,
                MoalignDecodeMode::ReEncode => DecodeMode::ReEncode,
            },
            source: HeadSource::Ensemble(w),
        };
        let oracle = OracleScorer::new(tok.clone());
        let scorer: Option<&dyn StepScorer> = opts.oracle_guidance.then_some(&oracle as &dyn StepScorer);
        let o = decode(model, scorer, &ids, &cfg).map_err(|e| {
            let status = match e {
                moalign::decode::DecodeError::Config(_) => MoalignStatus::InvalidArgument,
                moalign::decode::DecodeError::Model(_) => MoalignStatus::Model,
                _ => MoalignStatus::Decode,
            };
            fail(status, e)
        })?;
        if let Some(l) = ledger.as_mut() {
            *l = MoalignLedger {
                prompt_len: o.ledger.prompt_len,
                committed_tokens: o.ledger.committed_tokens,
                steps: o.ledger.steps,
                candidates: o.ledger.candidates,
                token_forwards: o.ledger.token_forwards,
            };
        }
        out_string(out_text, tok.decode(&o.response))
    })
}

/// Predicted token forwards of both decoding modes.
///
/// # Safety
/// `cache_carry` and `reencode` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn moalign_cost_estimate(
    prompt_len: usize,
    steps: usize,
    k: usize,
    mean_len: f64,
    cache_carry: *mut f64,
    reencode: *mut f64,
) -> MoalignStatus {
    guard(|| {
        if cache_carry.is_null() || reencode.is_null() {
            return Err(fail(MoalignStatus::NullPointer, "output pointer is null"));
        }
        if !(mean_len.is_finite() && mean_len >= 0.0) {
            return Err(fail(MoalignStatus::InvalidArgument, "mean_len must be finite and non-negative"));
        }
        let est = cost_estimate(prompt_len, steps, k, mean_len);
        *cache_carry = est.cache_carry;
        *reencode = est.reencode;
        Ok(())
    })
}

/// Verifies an arithmetic response: `z` is 1 for a correct final answer,
/// `correct_steps` counts equation steps with reward 1.
///
/// # Safety
/// `prompt` and `response` must be NUL-terminated; `z` valid;
/// `correct_steps` may be null.
#[no_mangle]
pub unsafe extern "C" fn moalign_verify(
    prompt: *const c_char,
    response: *const c_char,
    z: *mut u8,
    correct_steps: *mut usize,
) -> MoalignStatus {
    guard(|| {
        if z.is_null() {
            return Err(fail(MoalignStatus::NullPointer, "z is null"));
        }
        let problem = parse_prompt(str_arg(prompt, "prompt")?).map_err(|e| fail(MoalignStatus::InvalidArgument, e))?;
        let v = verify(&problem, str_arg(response, "response")?);
        *z = v.z;
        if let Some(c) = correct_steps.as_mut() {
            *c = v.step_rewards.iter().filter(|r| **r == 1.0).count();
        }
        Ok(())
    })
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must be null or a string from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn moalign_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
