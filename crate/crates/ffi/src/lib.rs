//! C ABI over the prfcl library.
//!
//! Every function returns a `PrfclStatus`; on failure the message is kept
//! per thread and read with `prfcl_last_error`. Handles are opaque and must
//! be released with their matching `*_free` function. Strings returned by
//! the library are released with `prfcl_string_free`.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use prfcl::analysis::aggregate_forgetting;
use prfcl::analysis::sweep::{run_config, seeded};
use prfcl::backbone::BackboneState;
use prfcl::config::Config;
use prfcl::data::{generate_synthetic, Dataset};
use prfcl::engine::pretrain::pretrain_backbone;
use prfcl::engine::RunRecord;
use prfcl::weights::{load_backbone, save_backbone};
use prfcl::Error;

/// Status codes. The non-zero values below 5 match the CLI exit codes.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PrfclStatus {
    Ok = 0,
    InvalidArgument = 1,
    Config = 2,
    Format = 3,
    Numeric = 4,
    NullPointer = 5,
    Panic = 6,
}

pub struct PrfclConfig(Config);
pub struct PrfclDataset(Dataset);
pub struct PrfclBackbone(BackboneState);
pub struct PrfclRecord(RunRecord);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

enum Fail {
    Lib(Error),
    Null(&'static str),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Lib(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> PrfclStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => PrfclStatus::Ok,
        Ok(Err(Fail::Null(what))) => {
            set_error(format!("null pointer: {what}"));
            PrfclStatus::NullPointer
        }
        Ok(Err(Fail::Lib(e))) => {
            set_error(e.to_string());
            match e.exit_code() {
                2 => PrfclStatus::Config,
                3 => PrfclStatus::Format,
                4 => PrfclStatus::Numeric,
                _ => PrfclStatus::InvalidArgument,
            }
        }
        Err(_) => {
            set_error("internal panic".into());
            PrfclStatus::Panic
        }
    }
}

unsafe fn obj<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or(Fail::Null(what))
}

unsafe fn out<'a, T>(p: *mut T, what: &'static str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or(Fail::Null(what))
}

unsafe fn text<'a>(p: *const c_char, what: &'static str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail::Lib(Error::InvalidArgument(format!("{what} is not UTF-8"))))
}

fn boxed<T>(v: T) -> *mut T {
    Box::into_raw(Box::new(v))
}

unsafe fn free<T>(p: *mut T) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

/// Message of the last failure on this thread, or NULL. Valid until the
/// next failing call on the same thread.
#[no_mangle]
pub extern "C" fn prfcl_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

#[no_mangle]
pub unsafe extern "C" fn prfcl_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

#[no_mangle]
pub unsafe extern "C" fn prfcl_config_default(cfg: *mut *mut PrfclConfig) -> PrfclStatus {
    guard(|| {
        *out(cfg, "cfg")? = boxed(PrfclConfig(Config::default()));
        Ok(())
    })
}

/// Parses TOML config text.
#[no_mangle]
pub unsafe extern "C" fn prfcl_config_parse(toml: *const c_char, cfg: *mut *mut PrfclConfig) -> PrfclStatus {
    guard(|| {
        let c = Config::parse(text(toml, "toml")?)?;
        *out(cfg, "cfg")? = boxed(PrfclConfig(c));
        Ok(())
    })
}

/// Sets both the stream seed and the training seed.
#[no_mangle]
pub unsafe extern "C" fn prfcl_config_set_seed(cfg: *mut PrfclConfig, seed: u64) -> PrfclStatus {
    guard(|| {
        let c = out(cfg, "cfg")?;
        c.0 = seeded(&c.0, seed);
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn prfcl_config_free(cfg: *mut PrfclConfig) {
    free(cfg)
}

#[no_mangle]
pub unsafe extern "C" fn prfcl_dataset_generate(cfg: *const PrfclConfig, ds: *mut *mut PrfclDataset) -> PrfclStatus {
    guard(|| {
        let d = generate_synthetic(&obj(cfg, "cfg")?.0.synthetic_spec())?;
        *out(ds, "ds")? = boxed(PrfclDataset(d));
        Ok(())
    })
}

/// Reads a CILB file.
#[no_mangle]
pub unsafe extern "C" fn prfcl_dataset_read(path: *const c_char, ds: *mut *mut PrfclDataset) -> PrfclStatus {
    guard(|| {
        let d = Dataset::read(Path::new(text(path, "path")?))?;
        *out(ds, "ds")? = boxed(PrfclDataset(d));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn prfcl_dataset_write(ds: *const PrfclDataset, path: *const c_char) -> PrfclStatus {
    guard(|| {
        obj(ds, "ds")?.0.write(Path::new(text(path, "path")?))?;
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn prfcl_dataset_len(ds: *const PrfclDataset, len: *mut usize) -> PrfclStatus {
    guard(|| {
        *out(len, "len")? = obj(ds, "ds")?.0.len();
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn prfcl_dataset_free(ds: *mut PrfclDataset) {
    free(ds)
}

/// Pretrains a backbone as described by the config's [backbone] and [pretrain] sections.
#[no_mangle]
pub unsafe extern "C" fn prfcl_backbone_pretrain(cfg: *const PrfclConfig, bb: *mut *mut PrfclBackbone) -> PrfclStatus {
    guard(|| {
        let b = pretrain_backbone(&obj(cfg, "cfg")?.0)?;
        *out(bb, "bb")? = boxed(PrfclBackbone(b));
        Ok(())
    })
}

/// Loads PTW1 weights; the shapes must match the config's [backbone] section.
#[no_mangle]
pub unsafe extern "C" fn prfcl_backbone_load(
    cfg: *const PrfclConfig,
    path: *const c_char,
    bb: *mut *mut PrfclBackbone,
) -> PrfclStatus {
    guard(|| {
        let b = load_backbone(&obj(cfg, "cfg")?.0.backbone, Path::new(text(path, "path")?))?;
        *out(bb, "bb")? = boxed(PrfclBackbone(b));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn prfcl_backbone_save(bb: *const PrfclBackbone, path: *const c_char) -> PrfclStatus {
    guard(|| {
        save_backbone(&obj(bb, "bb")?.0, Path::new(text(path, "path")?))?;
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn prfcl_backbone_free(bb: *mut PrfclBackbone) {
    free(bb)
}

/// Runs the configured method over the whole stream.
#[no_mangle]
pub unsafe extern "C" fn prfcl_run(
    cfg: *const PrfclConfig,
    ds: *const PrfclDataset,
    bb: *const PrfclBackbone,
    record: *mut *mut PrfclRecord,
) -> PrfclStatus {
    guard(|| {
        let r = run_config(&obj(cfg, "cfg")?.0, &obj(ds, "ds")?.0, &obj(bb, "bb")?.0)?;
        *out(record, "record")? = boxed(PrfclRecord(r));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn prfcl_record_num_tasks(record: *const PrfclRecord, tasks: *mut usize) -> PrfclStatus {
    guard(|| {
        *out(tasks, "tasks")? = obj(record, "record")?.0.accuracy.num_tasks();
        Ok(())
    })
}

/// Accuracy on task `s` after training task `t` (s ≤ t), in [0, 1].
#[no_mangle]
pub unsafe extern "C" fn prfcl_record_accuracy(
    record: *const PrfclRecord,
    t: usize,
    s: usize,
    acc: *mut f64,
) -> PrfclStatus {
    guard(|| {
        let a = obj(record, "record")?
            .0
            .accuracy
            .get(t, s)
            .ok_or_else(|| Error::InvalidArgument(format!("no accuracy entry ({t}, {s})")))?;
        *out(acc, "acc")? = a;
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn prfcl_record_final_accuracy(record: *const PrfclRecord, acc: *mut f64) -> PrfclStatus {
    guard(|| {
        let a = obj(record, "record")?
            .0
            .final_accuracy()
            .ok_or_else(|| Error::InvalidArgument("record has no tasks".into()))?;
        *out(acc, "acc")? = a;
        Ok(())
    })
}

/// Mean forgetting over all but the last task.
#[no_mangle]
pub unsafe extern "C" fn prfcl_record_forgetting(record: *const PrfclRecord, value: *mut f64) -> PrfclStatus {
    guard(|| {
        let f = aggregate_forgetting(&obj(record, "record")?.0.accuracy)
            .ok_or_else(|| Error::InvalidArgument("forgetting needs at least two tasks".into()))?;
        *out(value, "value")? = f;
        Ok(())
    })
}

/// P_sim after the last task; NaN when the method inserts no prompts.
#[no_mangle]
pub unsafe extern "C" fn prfcl_record_p_sim(record: *const PrfclRecord, value: *mut f64) -> PrfclStatus {
    guard(|| {
        let p = obj(record, "record")?.0.p_sim.last().copied().flatten();
        *out(value, "value")? = p.unwrap_or(f64::NAN);
        Ok(())
    })
}

/// Serializes the record as JSON; release with `prfcl_string_free`.
#[no_mangle]
pub unsafe extern "C" fn prfcl_record_to_json(record: *const PrfclRecord, json: *mut *mut c_char) -> PrfclStatus {
    guard(|| {
        let s = serde_json::to_string(&obj(record, "record")?.0).map_err(Error::from)?;
        *out(json, "json")? = CString::new(s).map_err(|e| Error::InvalidArgument(e.to_string()))?.into_raw();
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn prfcl_record_free(record: *mut PrfclRecord) {
    free(record)
}

/// P_sim of `rows` prompt vectors of length `cols`, stored row-major.
#[no_mangle]
pub unsafe extern "C" fn prfcl_prompt_similarity(
    data: *const f64,
    rows: usize,
    cols: usize,
    value: *mut f64,
) -> PrfclStatus {
    guard(|| {
        if data.is_null() {
            return Err(Fail::Null("data"));
        }
        let flat = std::slice::from_raw_parts(data, rows * cols);
        let prompts: Vec<Vec<f64>> = flat.chunks(cols.max(1)).map(<[f64]>::to_vec).collect();
        *out(value, "value")? = prfcl::analysis::prompt_similarity(&prompts)?.value;
        Ok(())
    })
}
