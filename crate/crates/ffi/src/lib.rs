//! C ABI over the `maxclust` engine.
//!
//! Objects are opaque handles created by `*_new`/`*_from_*` calls and released
//! with the matching `*_free`. Every fallible call returns a
//! [`MaxclustStatus`]; the message of the last failure on the calling thread
//! is available from [`maxclust_last_error`]. Strings are UTF-8 and
//! NUL-terminated. Output strings are copied into caller buffers: the call
//! writes at most `cap` bytes (including the NUL) and stores the full length
//! (without the NUL) in `*len`, so a too-small buffer can be retried.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use maxclust::clusters::{label_clusters, max_cluster};
use maxclust::extremes::replica_field;
use maxclust::harness::{run, ExperimentConfig, Kind, RunOutput};
use maxclust::hitting::{tau_event, EventSpec, LazyBernoulli, Rule};
use maxclust::oracles::longest_run_cdf;
use maxclust::sampler::{Model, SeedSpec, SiteConfig};
use maxclust::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaxclustStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    /// A parameter is out of range.
    InvalidArgument = 3,
    /// The configuration was rejected; the message names the key.
    Config = 4,
    /// The computation failed (degenerate data, budget, censoring).
    Runtime = 5,
    Io = 6,
    /// Output buffer too small; `*len` holds the required length.
    BufferTooSmall = 7,
    /// A bug in the library; the handle arguments are left untouched.
    Panic = 8,
}

/// Experiment kinds, mirroring the CLI subcommands.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaxclustKind {
    Sample = 0,
    Extremes = 1,
    Tails = 2,
    Hitting = 3,
    BcCompare = 4,
    Oracle = 5,
    Sweep = 6,
}

/// Witness rule of a hitting time.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaxclustRule {
    Box = 0,
    Interior = 1,
    Ambient = 2,
}

/// Experiment configuration.
pub struct MaxclustConfig(ExperimentConfig);

/// A finished run: output directory and summary row.
pub struct MaxclustRun(RunOutput);

/// A zero-boundary site configuration on `B_n`.
pub struct MaxclustField(SiteConfig);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("no interior NUL");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> MaxclustStatus {
    match e {
        Error::Config { .. } => MaxclustStatus::Config,
        Error::Parameter { .. } | Error::Geometry(_) | Error::Capacity { .. } | Error::EnumerationCap { .. } => {
            MaxclustStatus::InvalidArgument
        }
        Error::Io(_) => MaxclustStatus::Io,
        _ => MaxclustStatus::Runtime,
    }
}

struct Fail(MaxclustStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> MaxclustStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => MaxclustStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            MaxclustStatus::Panic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(MaxclustStatus::NullPointer, format!("`{what}` is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|e| Fail(MaxclustStatus::InvalidUtf8, format!("`{what}`: {e}")))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn handle_mut<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn put<T>(p: *mut T, what: &str, value: T) -> Result<(), Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    p.write(value);
    Ok(())
}

unsafe fn copy_str(s: &str, buf: *mut c_char, cap: usize, len: *mut usize) -> Result<(), Fail> {
    put(len, "len", s.len())?;
    if cap <= s.len() {
        return Err(Fail(
            MaxclustStatus::BufferTooSmall,
            format!("need {} bytes, buffer holds {cap}", s.len() + 1),
        ));
    }
    if buf.is_null() {
        return Err(null("buf"));
    }
    ptr::copy_nonoverlapping(s.as_ptr(), buf.cast::<u8>(), s.len());
    *buf.add(s.len()) = 0;
    Ok(())
}

fn kind_of(k: MaxclustKind) -> Kind {
    match k {
        MaxclustKind::Sample => Kind::Sample,
        MaxclustKind::Extremes => Kind::Extremes,
        MaxclustKind::Tails => Kind::Tails,
        MaxclustKind::Hitting => Kind::Hitting,
        MaxclustKind::BcCompare => Kind::BcCompare,
        MaxclustKind::Oracle => Kind::Oracle,
        MaxclustKind::Sweep => Kind::Sweep,
    }
}

/// Message of the last failed call on this thread, or NULL. Valid until the
/// next failing call on the same thread.
#[no_mangle]
pub extern "C" fn maxclust_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version, static.
#[no_mangle]
pub extern "C" fn maxclust_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Default configuration of `kind`.
///
/// # Safety
/// `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn maxclust_config_new(kind: MaxclustKind, out: *mut *mut MaxclustConfig) -> MaxclustStatus {
    guard(|| {
        let cfg = Box::new(MaxclustConfig(ExperimentConfig::new(kind_of(kind))));
        put(out, "out", Box::into_raw(cfg))
    })
}

/// Parses a TOML configuration. The document must set `kind`.
///
/// # Safety
/// `toml` must be a NUL-terminated string and `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn maxclust_config_from_toml(
    toml: *const c_char,
    out: *mut *mut MaxclustConfig,
) -> MaxclustStatus {
    guard(|| {
        let text = str_arg(toml, "toml")?;
        let cfg = ExperimentConfig::from_toml(text, None)?;
        put(out, "out", Box::into_raw(Box::new(MaxclustConfig(cfg))))
    })
}

/// Serializes the configuration as TOML.
///
/// # Safety
/// `cfg` must be a live handle; `buf` holds `cap` bytes; `len` is writable.
#[no_mangle]
pub unsafe extern "C" fn maxclust_config_to_toml(
    cfg: *const MaxclustConfig,
    buf: *mut c_char,
    cap: usize,
    len: *mut usize,
) -> MaxclustStatus {
    guard(|| copy_str(&handle(cfg, "cfg")?.0.to_toml(), buf, cap, len))
}

/// Hex SHA-256 digest of the configuration (64 characters).
///
/// # Safety
/// As for [`maxclust_config_to_toml`].
#[no_mangle]
pub unsafe extern "C" fn maxclust_config_digest(
    cfg: *const MaxclustConfig,
    buf: *mut c_char,
    cap: usize,
    len: *mut usize,
) -> MaxclustStatus {
    guard(|| copy_str(&handle(cfg, "cfg")?.0.digest(), buf, cap, len))
}

/// Sets the master seed.
///
/// # Safety
/// `cfg` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn maxclust_config_set_seed(cfg: *mut MaxclustConfig, seed: u64) -> MaxclustStatus {
    guard(|| {
        handle_mut(cfg, "cfg")?.0.master_seed = seed;
        Ok(())
    })
}

/// Releases a configuration. NULL is ignored.
///
/// # Safety
/// `cfg` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn maxclust_config_free(cfg: *mut MaxclustConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

/// Runs an experiment, writing its files into `out_dir`.
///
/// # Safety
/// `cfg` must be a live handle, `out_dir` a NUL-terminated path and `out`
/// valid for writes.
#[no_mangle]
pub unsafe extern "C" fn maxclust_run(
    cfg: *const MaxclustConfig,
    out_dir: *const c_char,
    out: *mut *mut MaxclustRun,
) -> MaxclustStatus {
    guard(|| {
        let cfg = handle(cfg, "cfg")?;
        let dir = str_arg(out_dir, "out_dir")?;
        let r = run(&cfg.0, Path::new(dir))?;
        put(out, "out", Box::into_raw(Box::new(MaxclustRun(r))))
    })
}

/// Summary value `key` of a run, as text.
///
/// # Safety
/// `run` must be a live handle, `key` NUL-terminated; see the module notes
/// for `buf`, `cap` and `len`.
#[no_mangle]
pub unsafe extern "C" fn maxclust_run_summary_get(
    run: *const MaxclustRun,
    key: *const c_char,
    buf: *mut c_char,
    cap: usize,
    len: *mut usize,
) -> MaxclustStatus {
    guard(|| {
        let run = handle(run, "run")?;
        let key = str_arg(key, "key")?;
        let v = run.0.summary.get(key).ok_or_else(|| {
            Fail(MaxclustStatus::InvalidArgument, format!("no summary column `{key}`"))
        })?;
        copy_str(v, buf, cap, len)
    })
}

/// The summary row as two-line CSV.
///
/// # Safety
/// As for [`maxclust_run_summary_get`].
#[no_mangle]
pub unsafe extern "C" fn maxclust_run_summary_csv(
    run: *const MaxclustRun,
    buf: *mut c_char,
    cap: usize,
    len: *mut usize,
) -> MaxclustStatus {
    guard(|| copy_str(&handle(run, "run")?.0.summary.to_csv(), buf, cap, len))
}

/// Releases a run handle (the files stay). NULL is ignored.
///
/// # Safety
/// `run` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn maxclust_run_free(run: *mut MaxclustRun) {
    if !run.is_null() {
        drop(Box::from_raw(run));
    }
}

/// Samples replica `replica` of Bernoulli(`p`) on `B_radius` in `dim`
/// dimensions, identical to the field the harness uses for that replica.
///
/// # Safety
/// `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn maxclust_field_sample(
    dim: usize,
    radius: usize,
    p: f64,
    master_seed: u64,
    replica: u64,
    out: *mut *mut MaxclustField,
) -> MaxclustStatus {
    guard(|| {
        let model = Model::bernoulli(p)?;
        let f = replica_field(dim, radius, &model, master_seed, replica)?;
        put(out, "out", Box::into_raw(Box::new(MaxclustField(f))))
    })
}

/// Number of sites of the field's box.
///
/// # Safety
/// `field` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn maxclust_field_site_count(field: *const MaxclustField, out: *mut usize) -> MaxclustStatus {
    guard(|| put(out, "out", handle(field, "field")?.0.geometry().site_count()))
}

/// Copies the occupation pattern (row-major lexicographic order, 1 =
/// occupied) into `buf`, which must hold the site count.
///
/// # Safety
/// `field` must be a live handle and `buf` hold `cap` bytes.
#[no_mangle]
pub unsafe extern "C" fn maxclust_field_occupied(
    field: *const MaxclustField,
    buf: *mut u8,
    cap: usize,
) -> MaxclustStatus {
    guard(|| {
        let occ = handle(field, "field")?.0.occupied();
        if cap < occ.len() {
            return Err(Fail(
                MaxclustStatus::BufferTooSmall,
                format!("need {} bytes, buffer holds {cap}", occ.len()),
            ));
        }
        if buf.is_null() {
            return Err(null("buf"));
        }
        for (i, &o) in occ.iter().enumerate() {
            *buf.add(i) = u8::from(o);
        }
        Ok(())
    })
}

/// Size of the largest cluster (zero boundary).
///
/// # Safety
/// `field` must be a live handle and `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn maxclust_field_max_cluster(field: *const MaxclustField, out: *mut u64) -> MaxclustStatus {
    guard(|| {
        let f = handle(field, "field")?;
        put(out, "out", max_cluster(&label_clusters(&f.0)) as u64)
    })
}

/// Releases a field. NULL is ignored.
///
/// # Safety
/// `field` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn maxclust_field_free(field: *mut MaxclustField) {
    if !field.is_null() {
        drop(Box::from_raw(field));
    }
}

/// Exact `P(longest run of successes <= m)` among `len` Bernoulli(`p`)
/// trials.
///
/// # Safety
/// `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn maxclust_longest_run_cdf(len: u64, p: f64, m: u64, out: *mut f64) -> MaxclustStatus {
    guard(|| {
        if !(0.0..=1.0).contains(&p) {
            return Err(Fail(MaxclustStatus::InvalidArgument, format!("p = {p} is not a probability")));
        }
        put(out, "out", longest_run_cdf(len, p, m))
    })
}

/// Hitting time of the event "a cluster of at least `m` sites" for replica
/// `replica` of the lazy Bernoulli field. `*tau` is the volume of the first
/// box with a witness, or of `B_{k_max}` with `*censored = 1`.
///
/// # Safety
/// `tau` and `censored` must be valid for writes.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn maxclust_hitting_time(
    dim: usize,
    p: f64,
    m: u64,
    rule: MaxclustRule,
    k_max: u64,
    master_seed: u64,
    replica: u64,
    tau: *mut u64,
    censored: *mut u8,
) -> MaxclustStatus {
    guard(|| {
        let ev = EventSpec::new(m)?;
        let rule = match rule {
            MaxclustRule::Box => Rule::Box,
            MaxclustRule::Interior => Rule::Interior,
            MaxclustRule::Ambient => Rule::Ambient,
        };
        let field = LazyBernoulli::new(dim, p, SeedSpec::new(master_seed, replica))?;
        let rec = tau_event(&field, &ev, k_max, rule)?;
        put(tau, "tau", rec.tau)?;
        put(censored, "censored", u8::from(rec.censored))
    })
}
