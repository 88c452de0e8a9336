//! C ABI over the simulator.
//!
//! Every function returns an [`LcfedStatus`]; on failure the message is
//! available from [`lcfed_last_error`] on the same thread. Handles are
//! opaque and must be released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::ptr;

use lcfed_core::config::ExperimentConfig;
use lcfed_core::experiment::{self, RunOutcome};
use lcfed_core::metrics::{self, Mask};
use lcfed_core::{hc, report, Error, Tensor};

/// Result of every call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LcfedStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    Config = 4,
    File = 5,
    Checkpoint = 6,
    NonFinite = 7,
    EmptyDataset = 8,
    Internal = 9,
}

/// Experiment configuration.
pub struct LcfedConfig {
    inner: ExperimentConfig,
}

/// Outcome of a finished or stopped run.
pub struct LcfedRun {
    inner: RunOutcome,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("no interior nul");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> LcfedStatus {
    match e {
        Error::Shape(_) => LcfedStatus::Shape,
        Error::Autodiff(_) | Error::Invalid(_) => LcfedStatus::InvalidArgument,
        Error::NonFinite(_) => LcfedStatus::NonFinite,
        Error::EmptyDataset(_) => LcfedStatus::EmptyDataset,
        Error::Config(_) => LcfedStatus::Config,
        Error::Checkpoint(_) => LcfedStatus::Checkpoint,
        Error::File { .. } | Error::Io(_) => LcfedStatus::File,
    }
}

fn guard(f: impl FnOnce() -> Result<(), LcfedStatusError>) -> LcfedStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => LcfedStatus::Ok,
        Ok(Err(LcfedStatusError(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            LcfedStatus::Internal
        }
    }
}

struct LcfedStatusError(LcfedStatus, String);

impl From<Error> for LcfedStatusError {
    fn from(e: Error) -> Self {
        LcfedStatusError(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> LcfedStatusError {
    LcfedStatusError(LcfedStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: impl Into<String>) -> LcfedStatusError {
    LcfedStatusError(LcfedStatus::InvalidArgument, msg.into())
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, LcfedStatusError> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| invalid(format!("{what} is not UTF-8")))
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], LcfedStatusError> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a, T>(p: *mut T, len: usize, what: &str) -> Result<&'a mut [T], LcfedStatusError> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn out<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, LcfedStatusError> {
    p.as_mut().ok_or_else(|| null(what))
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next failing call on the same thread.
#[no_mangle]
pub extern "C" fn lcfed_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Default configuration.
///
/// # Safety
/// `out_cfg` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn lcfed_config_new(out_cfg: *mut *mut LcfedConfig) -> LcfedStatus {
    guard(|| {
        *out(out_cfg, "out_cfg")? = Box::into_raw(Box::new(LcfedConfig {
            inner: ExperimentConfig::default(),
        }));
        Ok(())
    })
}

/// Configuration from `key = value` text.
///
/// # Safety
/// `text` must be a nul-terminated string and `out_cfg` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn lcfed_config_parse(text: *const c_char, out_cfg: *mut *mut LcfedConfig) -> LcfedStatus {
    guard(|| {
        let cfg = ExperimentConfig::parse(self::text(text, "text")?)?;
        *out(out_cfg, "out_cfg")? = Box::into_raw(Box::new(LcfedConfig { inner: cfg }));
        Ok(())
    })
}

/// Sets one entry.
///
/// # Safety
/// `cfg` must come from this library; `key` and `value` must be
/// nul-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn lcfed_config_set(cfg: *mut LcfedConfig, key: *const c_char, value: *const c_char) -> LcfedStatus {
    guard(|| {
        let cfg = out(cfg, "cfg")?;
        cfg.inner.set(text(key, "key")?, text(value, "value")?)?;
        Ok(())
    })
}

/// Writes the config digest (nul-terminated) into `buf` of `len` bytes.
///
/// # Safety
/// `cfg` must come from this library and `buf` hold `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn lcfed_config_digest(cfg: *const LcfedConfig, buf: *mut c_char, len: usize) -> LcfedStatus {
    guard(|| {
        let cfg = cfg.as_ref().ok_or_else(|| null("cfg"))?;
        let d = cfg.inner.digest();
        let dst = slice_mut(buf, len, "buf")?;
        if dst.len() < d.len() + 1 {
            return Err(invalid(format!("buffer needs {} bytes", d.len() + 1)));
        }
        for (o, b) in dst.iter_mut().zip(d.bytes()) {
            *o = b as c_char;
        }
        dst[d.len()] = 0;
        Ok(())
    })
}

/// # Safety
/// `cfg` must come from this library or be null.
#[no_mangle]
pub unsafe extern "C" fn lcfed_config_free(cfg: *mut LcfedConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

/// Runs the experiment to completion.
///
/// # Safety
/// `cfg` must come from this library and `out_run` be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn lcfed_run(cfg: *const LcfedConfig, out_run: *mut *mut LcfedRun) -> LcfedStatus {
    guard(|| {
        let cfg = cfg.as_ref().ok_or_else(|| null("cfg"))?;
        let o = experiment::run_experiment(&cfg.inner)?;
        *out(out_run, "out_run")? = Box::into_raw(Box::new(LcfedRun { inner: o }));
        Ok(())
    })
}

/// Continues a run from a checkpoint; `out_dir` may be null to write next
/// to the checkpoint.
///
/// # Safety
/// String arguments must be nul-terminated; `out_run` must be valid.
#[no_mangle]
pub unsafe extern "C" fn lcfed_resume(checkpoint: *const c_char, out_dir: *const c_char, out_run: *mut *mut LcfedRun) -> LcfedStatus {
    guard(|| {
        let ck = PathBuf::from(text(checkpoint, "checkpoint")?);
        let dir = if out_dir.is_null() {
            None
        } else {
            Some(PathBuf::from(text(out_dir, "out_dir")?))
        };
        let o = experiment::resume(&ck, dir.as_deref(), None)?;
        *out(out_run, "out_run")? = Box::into_raw(Box::new(LcfedRun { inner: o }));
        Ok(())
    })
}

/// Number of sites and completed rounds of a run.
///
/// # Safety
/// `run` must come from this library; outputs must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn lcfed_run_info(run: *const LcfedRun, out_sites: *mut usize, out_rounds: *mut u64) -> LcfedStatus {
    guard(|| {
        let run = run.as_ref().ok_or_else(|| null("run"))?;
        *out(out_sites, "out_sites")? = run.inner.reports.len();
        *out(out_rounds, "out_rounds")? = run.inner.rounds_done;
        Ok(())
    })
}

/// Final averaged IoU and ASSD of `site`.
///
/// # Safety
/// `run` must come from this library; outputs must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn lcfed_run_site_metrics(run: *const LcfedRun, site: usize, out_iou: *mut f64, out_assd: *mut f64) -> LcfedStatus {
    guard(|| {
        let run = run.as_ref().ok_or_else(|| null("run"))?;
        let r = run
            .inner
            .reports
            .get(site)
            .ok_or_else(|| invalid(format!("site {site} out of range")))?;
        *out(out_iou, "out_iou")? = r.mean_iou;
        *out(out_assd, "out_assd")? = r.mean_assd;
        Ok(())
    })
}

/// # Safety
/// `run` must come from this library or be null.
#[no_mangle]
pub unsafe extern "C" fn lcfed_run_free(run: *mut LcfedRun) {
    if !run.is_null() {
        drop(Box::from_raw(run));
    }
}

/// Regenerates the summary and curves of a run directory.
///
/// # Safety
/// `dir` must be a nul-terminated string.
#[no_mangle]
pub unsafe extern "C" fn lcfed_emit_report(dir: *const c_char) -> LcfedStatus {
    guard(|| {
        report::emit_report(Path::new(text(dir, "dir")?))?;
        Ok(())
    })
}

unsafe fn masks(pred: *const u8, gt: *const u8, h: usize, w: usize) -> Result<(Mask, Mask), LcfedStatusError> {
    let n = h.checked_mul(w).ok_or_else(|| invalid("mask size overflows"))?;
    let p = slice(pred, n, "pred")?;
    let g = slice(gt, n, "gt")?;
    Ok((
        Mask::new(h, w, p.iter().map(|&v| v != 0).collect())?,
        Mask::new(h, w, g.iter().map(|&v| v != 0).collect())?,
    ))
}

/// IoU of two `h×w` masks (nonzero bytes are foreground).
///
/// # Safety
/// `pred` and `gt` must hold `h*w` bytes; `out_value` must be valid.
#[no_mangle]
pub unsafe extern "C" fn lcfed_iou(pred: *const u8, gt: *const u8, h: usize, w: usize, out_value: *mut f64) -> LcfedStatus {
    guard(|| {
        let (p, g) = masks(pred, gt, h, w)?;
        *out(out_value, "out_value")? = metrics::iou(&p, &g)?;
        Ok(())
    })
}

/// Average symmetric surface distance of two `h×w` masks, in pixels.
///
/// # Safety
/// `pred` and `gt` must hold `h*w` bytes; `out_value` must be valid.
#[no_mangle]
pub unsafe extern "C" fn lcfed_assd(pred: *const u8, gt: *const u8, h: usize, w: usize, out_value: *mut f64) -> LcfedStatus {
    guard(|| {
        let (p, g) = masks(pred, gt, h, w)?;
        *out(out_value, "out_value")? = metrics::assd(&p, &g)?;
        Ok(())
    })
}

unsafe fn planes(input: *const f64, n: usize, h: usize, w: usize) -> Result<Tensor<f64>, LcfedStatusError> {
    let len = n
        .checked_mul(h)
        .and_then(|v| v.checked_mul(w))
        .ok_or_else(|| invalid("map size overflows"))?;
    Ok(Tensor::new(&[n, h, w], slice(input, len, "input")?.to_vec())?)
}

/// Peak suppression over `n` planes of `h×w`; `output` may alias nothing.
///
/// # Safety
/// `input` and `output` must each hold `n*h*w` doubles.
#[no_mangle]
pub unsafe extern "C" fn lcfed_nms2d(input: *const f64, n: usize, h: usize, w: usize, delta: usize, output: *mut f64) -> LcfedStatus {
    guard(|| {
        let r = hc::nms2d(&planes(input, n, h, w)?, delta)?;
        slice_mut(output, r.len(), "output")?.copy_from_slice(r.data());
        Ok(())
    })
}

/// Zero-padded peak-normalized Gaussian spread over `n` planes of `h×w`.
///
/// # Safety
/// `input` and `output` must each hold `n*h*w` doubles.
#[no_mangle]
pub unsafe extern "C" fn lcfed_gaussian_spread(
    input: *const f64,
    n: usize,
    h: usize,
    w: usize,
    size: usize,
    sigma: f64,
    output: *mut f64,
) -> LcfedStatus {
    guard(|| {
        let r = hc::gaussian_spread(&planes(input, n, h, w)?, size, sigma)?;
        slice_mut(output, r.len(), "output")?.copy_from_slice(r.data());
        Ok(())
    })
}

/// Disagreement of map `site` against all `sites` maps of `len` values each,
/// stored one after another in `maps`.
///
/// # Safety
/// `maps` must hold `sites*len` doubles and `output` `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn lcfed_disagreement(maps: *const f64, sites: usize, len: usize, site: usize, output: *mut f64) -> LcfedStatus {
    guard(|| {
        if len == 0 || sites == 0 {
            return Err(invalid("need at least one map of positive length"));
        }
        let all = slice(maps, sites.checked_mul(len).ok_or_else(|| invalid("size overflows"))?, "maps")?;
        let ts = all
            .chunks(len)
            .map(|c| Tensor::new(&[1, len], c.to_vec()))
            .collect::<Result<Vec<_>, _>>()?;
        let u = hc::disagreement_map(&ts, site)?;
        slice_mut(output, len, "output")?.copy_from_slice(u.data());
        Ok(())
    })
}
