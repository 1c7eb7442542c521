//! C ABI over `spadapt`.
//!
//! Objects are opaque heap handles released with their `_free` function.
//! Every fallible call returns a status code (`SPADAPT_OK` on success) and
//! leaves a message retrievable with `spadapt_last_error` on the calling
//! thread. Output pointers are written only on success.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use spadapt::adapter_file::{self, AdapterFile};
use spadapt::cli::{load_config, merge_spec, setup, Common};
use spadapt::harness::accuracy;
use spadapt::merging::{merge, Expert, MergeMethod, MergeSpec, Merged};
use spadapt::model::{Model, NoDelta, WeightDelta};
use spadapt::taskgen::{Dataset, Suite};
use spadapt::trainer::{train_sparse, TrainConfig};
use spadapt::Error;

pub const SPADAPT_OK: i32 = 0;
pub const SPADAPT_ERR_INPUT: i32 = 1;
pub const SPADAPT_ERR_DIMENSION: i32 = 2;
pub const SPADAPT_ERR_NUMERIC: i32 = 3;
pub const SPADAPT_ERR_TRAINING: i32 = 4;
pub const SPADAPT_ERR_CONFIG: i32 = 5;
pub const SPADAPT_ERR_IO: i32 = 6;
pub const SPADAPT_ERR_BAD_MAGIC: i32 = 7;
pub const SPADAPT_ERR_UNSUPPORTED_VERSION: i32 = 8;
pub const SPADAPT_ERR_TRUNCATED: i32 = 9;
pub const SPADAPT_ERR_CORRUPT: i32 = 10;
pub const SPADAPT_ERR_NULL_POINTER: i32 = 11;
pub const SPADAPT_ERR_UTF8: i32 = 12;
pub const SPADAPT_ERR_PANIC: i32 = 13;
pub const SPADAPT_ERR_INDEX: i32 = 14;

pub const SPADAPT_KIND_SPARSE: i32 = 0;
pub const SPADAPT_KIND_DENSE: i32 = 1;
pub const SPADAPT_KIND_LORA: i32 = 2;

/// A sparse, dense or low-rank expert loaded from or destined for a file.
pub struct SpadaptAdapter {
    file: AdapterFile,
}

/// A base model plus the task suite generated from an experiment config.
pub struct SpadaptExperiment {
    model: Model,
    suite: Suite,
    train: TrainConfig,
}

impl SpadaptExperiment {
    fn task(&self, index: usize) -> Option<&Dataset> {
        self.suite.all().nth(index)
    }
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

struct Failure(i32, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(e.code(), e.to_string())
    }
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> i32 {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            SPADAPT_OK
        }
        Ok(Err(Failure(code, msg))) => {
            set_error(msg);
            code
        }
        Err(_) => {
            set_error("internal panic".into());
            SPADAPT_ERR_PANIC
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(SPADAPT_ERR_NULL_POINTER, format!("{what} is null"))
}

/// # Safety
/// `p` must be null or a valid NUL-terminated string.
unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(SPADAPT_ERR_UTF8, format!("{what} is not UTF-8")))
}

/// # Safety
/// `p` must be null or point to a live object of type `T`.
unsafe fn ref_arg<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(what))
}

fn out_arg<T>(p: *mut T, what: &str) -> Result<*mut T, Failure> {
    if p.is_null() {
        Err(null(what))
    } else {
        Ok(p)
    }
}

/// Copies `s` into `buf` (NUL-terminated, truncated to fit) and returns the
/// full byte length of `s`.
///
/// # Safety
/// `buf` must be null or valid for `len` bytes.
unsafe fn copy_out(s: &str, buf: *mut c_char, len: usize) -> usize {
    if !buf.is_null() && len > 0 {
        let n = s.len().min(len - 1);
        std::ptr::copy_nonoverlapping(s.as_ptr().cast::<c_char>(), buf, n);
        *buf.add(n) = 0;
    }
    s.len()
}

/// Copies the calling thread's last error message into `buf` and returns
/// its full length; pass a null `buf` to query the length.
///
/// # Safety
/// `buf` must be null or valid for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn spadapt_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| copy_out(&e.borrow(), buf, len))
}

/// Reads an adapter file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn spadapt_adapter_read(
    path: *const c_char,
    out: *mut *mut SpadaptAdapter,
) -> i32 {
    guard(|| {
        let path = str_arg(path, "path")?;
        let out = out_arg(out, "out")?;
        let (file, _) = adapter_file::read_file(&PathBuf::from(path))?;
        *out = Box::into_raw(Box::new(SpadaptAdapter { file }));
        Ok(())
    })
}

/// Writes an adapter file atomically.
///
/// # Safety
/// `adapter` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn spadapt_adapter_write(
    adapter: *const SpadaptAdapter,
    path: *const c_char,
) -> i32 {
    guard(|| {
        let a = ref_arg(adapter, "adapter")?;
        let path = str_arg(path, "path")?;
        adapter_file::write_file(&PathBuf::from(path), &a.file)?;
        Ok(())
    })
}

/// Releases an adapter handle; null is ignored.
///
/// # Safety
/// `adapter` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn spadapt_adapter_free(adapter: *mut SpadaptAdapter) {
    if !adapter.is_null() {
        drop(Box::from_raw(adapter));
    }
}

/// Payload kind: one of the `SPADAPT_KIND_*` constants.
///
/// # Safety
/// `adapter` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn spadapt_adapter_kind(
    adapter: *const SpadaptAdapter,
    out: *mut i32,
) -> i32 {
    guard(|| {
        let a = ref_arg(adapter, "adapter")?;
        let out = out_arg(out, "out")?;
        *out = match a.file.expert {
            Expert::Sparse(_) => SPADAPT_KIND_SPARSE,
            Expert::Dense(_) => SPADAPT_KIND_DENSE,
            Expert::Lora(_) => SPADAPT_KIND_LORA,
        };
        Ok(())
    })
}

/// Copies the task id into `buf` and stores its full length in `out_len`.
///
/// # Safety
/// `adapter` must be a live handle, `buf` null or valid for `len` bytes and
/// `out_len` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn spadapt_adapter_task_id(
    adapter: *const SpadaptAdapter,
    buf: *mut c_char,
    len: usize,
    out_len: *mut usize,
) -> i32 {
    guard(|| {
        let a = ref_arg(adapter, "adapter")?;
        let out_len = out_arg(out_len, "out_len")?;
        *out_len = copy_out(a.file.expert.task_id(), buf, len);
        Ok(())
    })
}

/// Number of stored parameters: masked entries for sparse adapters, all
/// entries otherwise.
///
/// # Safety
/// `adapter` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn spadapt_adapter_param_count(
    adapter: *const SpadaptAdapter,
    out: *mut usize,
) -> i32 {
    guard(|| {
        let a = ref_arg(adapter, "adapter")?;
        let out = out_arg(out, "out")?;
        *out = match &a.file.expert {
            Expert::Sparse(s) => s.trainable_count(),
            Expert::Dense(t) => t.layers.values().map(|m| m.len()).sum(),
            Expert::Lora(l) => l.layers.values().map(|x| x.a.len() + x.b.len()).sum(),
        };
        Ok(())
    })
}

/// Merges `count` adapters. `method` is a merge method name such as
/// `"sparse-overlap"` or `"ties"`; a NaN `lambda` selects the method's
/// default. The result lists no provenance since handles carry no file
/// hashes.
///
/// # Safety
/// `method` must be a NUL-terminated string, `adapters` valid for `count`
/// live handles and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn spadapt_merge(
    method: *const c_char,
    lambda: f64,
    adapters: *const *const SpadaptAdapter,
    count: usize,
    out: *mut *mut SpadaptAdapter,
) -> i32 {
    guard(|| {
        let method = str_arg(method, "method")?;
        let out = out_arg(out, "out")?;
        if adapters.is_null() {
            return Err(null("adapters"));
        }
        let handles = std::slice::from_raw_parts(adapters, count);
        let experts = handles
            .iter()
            .map(|h| ref_arg(*h, "adapter").map(|a| &a.file.expert))
            .collect::<Result<Vec<_>, _>>()?;
        let spec = merge_spec(
            &MergeSpec::new(MergeMethod::SparseOverlap),
            Some(method),
            (!lambda.is_nan()).then_some(lambda),
            None,
        )?;
        let expert = match merge(&spec, &experts)? {
            Merged::Sparse(a) => Expert::Sparse(a),
            Merged::Dense(t) => Expert::Dense(t),
        };
        *out = Box::into_raw(Box::new(SpadaptAdapter {
            file: AdapterFile::new(expert),
        }));
        Ok(())
    })
}

/// Builds the base model and task suite from an experiment config file
/// (null for defaults). A negative `seed` keeps the config's seeds.
///
/// # Safety
/// `config_path` must be null or a NUL-terminated string and `out` a valid
/// pointer.
#[no_mangle]
pub unsafe extern "C" fn spadapt_experiment_new(
    config_path: *const c_char,
    seed: i64,
    out: *mut *mut SpadaptExperiment,
) -> i32 {
    guard(|| {
        let out = out_arg(out, "out")?;
        let config = if config_path.is_null() {
            None
        } else {
            Some(PathBuf::from(str_arg(config_path, "config_path")?))
        };
        let cfg = load_config(&Common {
            config,
            seed: u64::try_from(seed).ok(),
            out_dir: None,
            workers: None,
        })?;
        let (model, suite) = setup(&cfg)?;
        *out = Box::into_raw(Box::new(SpadaptExperiment {
            model,
            suite,
            train: cfg.desk.train,
        }));
        Ok(())
    })
}

/// Releases an experiment handle; null is ignored.
///
/// # Safety
/// `exp` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn spadapt_experiment_free(exp: *mut SpadaptExperiment) {
    if !exp.is_null() {
        drop(Box::from_raw(exp));
    }
}

/// Number of tasks, held-in first, then held-out.
///
/// # Safety
/// `exp` must be a live handle and the outputs valid pointers.
#[no_mangle]
pub unsafe extern "C" fn spadapt_experiment_task_count(
    exp: *const SpadaptExperiment,
    held_in: *mut usize,
    held_out: *mut usize,
) -> i32 {
    guard(|| {
        let e = ref_arg(exp, "experiment")?;
        let held_in = out_arg(held_in, "held_in")?;
        let held_out = out_arg(held_out, "held_out")?;
        *held_in = e.suite.held_in.len();
        *held_out = e.suite.held_out.len();
        Ok(())
    })
}

/// Trains a sparse adapter on task `task` with the config's training
/// settings and keep ratio `kr`.
///
/// # Safety
/// `exp` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn spadapt_experiment_train_sparse(
    exp: *const SpadaptExperiment,
    task: usize,
    kr: f64,
    out: *mut *mut SpadaptAdapter,
) -> i32 {
    guard(|| {
        let e = ref_arg(exp, "experiment")?;
        let out = out_arg(out, "out")?;
        let data = e
            .task(task)
            .ok_or_else(|| Failure(SPADAPT_ERR_INDEX, format!("task index {task} out of range")))?;
        let cfg = TrainConfig {
            kr,
            ..e.train.clone()
        };
        let adapter = train_sparse(&e.model, data, &cfg)?;
        *out = Box::into_raw(Box::new(SpadaptAdapter {
            file: AdapterFile::new(Expert::Sparse(adapter)),
        }));
        Ok(())
    })
}

/// Test accuracy on task `task` with `adapter` applied, or of the base
/// model when `adapter` is null.
///
/// # Safety
/// `exp` must be a live handle, `adapter` null or a live handle and `out` a
/// valid pointer.
#[no_mangle]
pub unsafe extern "C" fn spadapt_experiment_evaluate(
    exp: *const SpadaptExperiment,
    adapter: *const SpadaptAdapter,
    task: usize,
    out: *mut f64,
) -> i32 {
    guard(|| {
        let e = ref_arg(exp, "experiment")?;
        let out = out_arg(out, "out")?;
        let data = e
            .task(task)
            .ok_or_else(|| Failure(SPADAPT_ERR_INDEX, format!("task index {task} out of range")))?;
        let delta: &dyn WeightDelta = match adapter.as_ref() {
            None => &NoDelta,
            Some(a) => match &a.file.expert {
                Expert::Sparse(s) => s,
                Expert::Dense(t) => t,
                Expert::Lora(l) => l,
            },
        };
        *out = accuracy(&e.model, delta, &data.test)?;
        Ok(())
    })
}
