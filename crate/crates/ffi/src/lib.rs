//! C ABI over `agrl-core`.
//!
//! Configs and policies cross the boundary as opaque handles that the caller
//! frees with the matching `*_free` function. Every fallible call returns an
//! [`AgrlStatus`]; on failure [`agrl_last_error`] describes the cause on the
//! calling thread. Strings returned by the library are freed with
//! [`agrl_string_free`].

use std::cell::RefCell;
use std::ffi::{CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use libc::{c_char, size_t};

use agrl_core::config;
use agrl_core::experiment::ExperimentConfig;
use agrl_core::harness;
use agrl_core::metrics::{classification_metrics, ConfusionMatrix};
use agrl_core::policy::{Checkpoint, PolicyParams, SamplerConfig};
use agrl_core::reward::{score_with_table, GoldLabels};
use agrl_core::rules::{derive_relevance, DerivationTable};
use agrl_core::trajectory::{Trajectory, SLOT_COUNT};
use agrl_core::world::FEATURE_DIM;
use agrl_core::{Error, Tier};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AgrlStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    InvalidConfig = 3,
    InvalidArgument = 4,
    Checkpoint = 5,
    Io = 6,
    Runtime = 7,
    Panic = 8,
}

/// Opaque experiment configuration.
pub struct AgrlConfig {
    inner: ExperimentConfig,
}

/// Opaque trained policy.
pub struct AgrlPolicy {
    params: PolicyParams,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default)]
pub struct AgrlReward {
    pub r_format: f64,
    pub r_rele: f64,
    pub r_cate: f64,
    pub r_attr: f64,
    pub r_reason: f64,
    pub gate: f64,
    pub total: f64,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default)]
pub struct AgrlClassMetrics {
    pub per_class_f1: [f64; 4],
    pub macro_f1: f64,
    pub good_f1: f64,
    pub accuracy: f64,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default)]
pub struct AgrlRunSummary {
    pub macro_f1: f64,
    pub good_f1: f64,
    pub accuracy: f64,
    pub rar: f64,
    pub mean_kept_ratio: f64,
    pub cumulative_reward_delta: f64,
    pub final_entropy: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> AgrlStatus {
    match e {
        Error::InvalidConfig { .. } | Error::TableParse { .. } => AgrlStatus::InvalidConfig,
        Error::Checkpoint(_) | Error::Json(_) => AgrlStatus::Checkpoint,
        Error::Io { .. } | Error::Locked(_) | Error::Incomplete(_) => AgrlStatus::Io,
        Error::DimensionMismatch { .. }
        | Error::TokenOutOfRange { .. }
        | Error::BadTokenCount { .. }
        | Error::InvalidTrajectory
        | Error::EmptyInput(_) => AgrlStatus::InvalidArgument,
    }
}

/// Runs `f`, recording any error or panic for `agrl_last_error`.
fn guard(f: impl FnOnce() -> Result<(), (AgrlStatus, String)>) -> AgrlStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => AgrlStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            AgrlStatus::Panic
        }
    }
}

fn core_err(e: Error) -> (AgrlStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (AgrlStatus, String) {
    (AgrlStatus::NullArgument, format!("{what} is null"))
}

/// # Safety
/// `s` is null or a NUL-terminated string.
unsafe fn str_arg<'a>(s: *const c_char, what: &str) -> Result<&'a str, (AgrlStatus, String)> {
    if s.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(s)
        .to_str()
        .map_err(|_| (AgrlStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

fn tier_arg(ordinal: u8, what: &str) -> Result<Tier, (AgrlStatus, String)> {
    Tier::from_ordinal(ordinal).ok_or_else(|| (AgrlStatus::InvalidArgument, format!("{what}: tier ordinal {ordinal} outside 1..=4")))
}

/// Message for the last failed call on this thread, or null. Valid until the
/// next failing call on the same thread.
#[no_mangle]
pub extern "C" fn agrl_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version, a static string.
#[no_mangle]
pub extern "C" fn agrl_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// # Safety
/// `s` is null or was returned by this library and not yet freed.
#[no_mangle]
pub unsafe extern "C" fn agrl_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Relevance derived from category and attribute tiers (ordinals 1..=4).
///
/// # Safety
/// `out` is null or points to a writable byte.
#[no_mangle]
pub unsafe extern "C" fn agrl_derive_relevance(category: u8, attribute: u8, out: *mut u8) -> AgrlStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let r = derive_relevance(tier_arg(category, "category")?, tier_arg(attribute, "attribute")?);
        *out = r.ordinal();
        Ok(())
    })
}

/// Default config.
///
/// # Safety
/// `out` is null or writable.
#[no_mangle]
pub unsafe extern "C" fn agrl_config_new(out: *mut *mut AgrlConfig) -> AgrlStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = Box::into_raw(Box::new(AgrlConfig { inner: ExperimentConfig::default() }));
        Ok(())
    })
}

/// Parses `key = value` config text over the defaults.
///
/// # Safety
/// `text` is a NUL-terminated string; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn agrl_config_parse(text: *const c_char, out: *mut *mut AgrlConfig) -> AgrlStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let inner = config::parse(str_arg(text, "text")?).map_err(core_err)?;
        *out = Box::into_raw(Box::new(AgrlConfig { inner }));
        Ok(())
    })
}

/// Sets one config key. On error the config is left unchanged. Cross-field
/// checks wait for [`agrl_config_validate`] so that related keys can be set
/// one at a time.
///
/// # Safety
/// `cfg` is a live handle; `key` and `value` are NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn agrl_config_set(cfg: *mut AgrlConfig, key: *const c_char, value: *const c_char) -> AgrlStatus {
    guard(|| {
        let cfg = cfg.as_mut().ok_or_else(|| null("cfg"))?;
        let mut next = cfg.inner.clone();
        config::apply(&mut next, str_arg(key, "key")?, str_arg(value, "value")?).map_err(core_err)?;
        cfg.inner = next;
        Ok(())
    })
}

/// # Safety
/// `cfg` is a live handle.
#[no_mangle]
pub unsafe extern "C" fn agrl_config_validate(cfg: *const AgrlConfig) -> AgrlStatus {
    guard(|| {
        let cfg = cfg.as_ref().ok_or_else(|| null("cfg"))?;
        cfg.inner.validate().map_err(core_err)
    })
}

/// Canonical config text; free with `agrl_string_free`.
///
/// # Safety
/// `cfg` is a live handle; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn agrl_config_to_text(cfg: *const AgrlConfig, out: *mut *mut c_char) -> AgrlStatus {
    guard(|| {
        let cfg = cfg.as_ref().ok_or_else(|| null("cfg"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let text = CString::new(config::to_text(&cfg.inner)).map_err(|e| (AgrlStatus::Runtime, e.to_string()))?;
        *out = text.into_raw();
        Ok(())
    })
}

/// # Safety
/// `cfg` is null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn agrl_config_free(cfg: *mut AgrlConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

/// Scores a token sequence under the config's reward against gold tiers
/// given as ordinals.
///
/// # Safety
/// `cfg` is a live handle; `tokens` points to `n_tokens` values; `out` is
/// writable.
#[no_mangle]
pub unsafe extern "C" fn agrl_score(
    cfg: *const AgrlConfig,
    tokens: *const size_t,
    n_tokens: size_t,
    gold_category: u8,
    gold_attribute: u8,
    gold_relevance: u8,
    out: *mut AgrlReward,
) -> AgrlStatus {
    guard(|| {
        let cfg = cfg.as_ref().ok_or_else(|| null("cfg"))?;
        if tokens.is_null() {
            return Err(null("tokens"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let toks = std::slice::from_raw_parts(tokens, n_tokens);
        let traj = Trajectory::from_tokens(toks, vec![0.0; toks.len()], false).map_err(core_err)?;
        let gold = GoldLabels {
            category: tier_arg(gold_category, "gold_category")?,
            attribute: tier_arg(gold_attribute, "gold_attribute")?,
            relevance: tier_arg(gold_relevance, "gold_relevance")?,
        };
        let table = cfg.inner.table().map_err(core_err)?;
        let b = score_with_table(&traj, &gold, &cfg.inner.reward_config(), &table).map_err(core_err)?;
        *out = AgrlReward {
            r_format: b.r_format,
            r_rele: b.r_rele,
            r_cate: b.r_cate,
            r_attr: b.r_attr,
            r_reason: b.r_reason,
            gate: b.gate,
            total: b.total,
        };
        Ok(())
    })
}

/// Per-class F1, macro F1, Good F1 and accuracy of a confusion matrix given
/// row-major as `counts[gold * 4 + predicted]`, with malformed predictions
/// per gold class.
///
/// # Safety
/// `counts` points to 16 values, `malformed` to 4; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn agrl_classification_metrics(
    counts: *const u64,
    malformed: *const u64,
    out: *mut AgrlClassMetrics,
) -> AgrlStatus {
    guard(|| {
        if counts.is_null() || malformed.is_null() || out.is_null() {
            return Err(null("counts, malformed or out"));
        }
        let c = std::slice::from_raw_parts(counts, 16);
        let mut cm = ConfusionMatrix::default();
        for g in 0..4 {
            cm.counts[g].copy_from_slice(&c[g * 4..g * 4 + 4]);
        }
        cm.malformed.copy_from_slice(std::slice::from_raw_parts(malformed, 4));
        let m = classification_metrics(&cm).map_err(core_err)?;
        *out = AgrlClassMetrics {
            per_class_f1: m.per_class_f1,
            macro_f1: m.macro_f1,
            good_f1: m.good_f1,
            accuracy: m.accuracy,
        };
        Ok(())
    })
}

/// Trains the configured variant into `out_dir` and evaluates it.
///
/// # Safety
/// `cfg` is a live handle; `out_dir` is a NUL-terminated path; `out` is null
/// or writable.
#[no_mangle]
pub unsafe extern "C" fn agrl_train(cfg: *const AgrlConfig, out_dir: *const c_char, out: *mut AgrlRunSummary) -> AgrlStatus {
    guard(|| {
        let cfg = cfg.as_ref().ok_or_else(|| null("cfg"))?;
        let dir = str_arg(out_dir, "out_dir")?;
        let o = harness::train(&cfg.inner, dir).map_err(core_err)?;
        if let Some(out) = out.as_mut() {
            let m = &o.eval.metrics;
            *out = AgrlRunSummary {
                macro_f1: m.macro_f1,
                good_f1: m.good_f1,
                accuracy: m.accuracy,
                rar: m.rar,
                mean_kept_ratio: o.eval.summary.mean_kept_ratio,
                cumulative_reward_delta: o.eval.summary.cumulative_reward_delta,
                final_entropy: o.eval.summary.final_entropy,
            };
        }
        Ok(())
    })
}

/// Loads a checkpoint written by training.
///
/// # Safety
/// `path` is a NUL-terminated path; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn agrl_policy_load(path: *const c_char, out: *mut *mut AgrlPolicy) -> AgrlStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let ck = Checkpoint::load(Path::new(str_arg(path, "path")?)).map_err(core_err)?;
        *out = Box::into_raw(Box::new(AgrlPolicy { params: ck.params }));
        Ok(())
    })
}

/// # Safety
/// `policy` is null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn agrl_policy_free(policy: *mut AgrlPolicy) {
    if !policy.is_null() {
        drop(Box::from_raw(policy));
    }
}

/// Number of instance features the synthetic world produces.
#[no_mangle]
pub extern "C" fn agrl_feature_dim() -> size_t {
    FEATURE_DIM
}

/// Number of tokens in a trajectory.
#[no_mangle]
pub extern "C" fn agrl_slot_count() -> size_t {
    SLOT_COUNT
}

/// Greedy unguided decoding of one instance into `agrl_slot_count()` tokens.
///
/// # Safety
/// `policy` is a live handle; `features` points to `n_features` values;
/// `out_tokens` points to `agrl_slot_count()` writable values.
#[no_mangle]
pub unsafe extern "C" fn agrl_policy_decode(
    policy: *const AgrlPolicy,
    features: *const f64,
    n_features: size_t,
    out_tokens: *mut size_t,
) -> AgrlStatus {
    guard(|| {
        let policy = policy.as_ref().ok_or_else(|| null("policy"))?;
        if features.is_null() || out_tokens.is_null() {
            return Err(null("features or out_tokens"));
        }
        let layout = policy.params.layout();
        if n_features != layout.instance_dim {
            return Err(core_err(Error::DimensionMismatch { expected: layout.instance_dim, got: n_features }));
        }
        let mut x = std::slice::from_raw_parts(features, n_features).to_vec();
        x.resize(layout.feature_dim(), 0.0);
        let greedy = SamplerConfig { top_k: 1, ..SamplerConfig::default() };
        let traj = policy.params.sample(&x, &greedy).map_err(core_err)?;
        std::slice::from_raw_parts_mut(out_tokens, SLOT_COUNT).copy_from_slice(&traj.tokens());
        Ok(())
    })
}

/// Whether a derivation table text parses; a cheap validity probe for rule
/// files before they are referenced from a config.
///
/// # Safety
/// `text` is a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn agrl_rules_check(text: *const c_char) -> AgrlStatus {
    guard(|| {
        DerivationTable::parse(str_arg(text, "text")?).map_err(core_err)?;
        Ok(())
    })
}
