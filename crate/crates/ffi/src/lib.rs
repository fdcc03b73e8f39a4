//! C ABI for `ceat-core`.
//!
//! Ensembles are opaque `CeatEnsemble*` handles created by
//! `ceat_ensemble_new` or `ceat_ensemble_load` and released with
//! `ceat_ensemble_free`. Every function returns a `CeatStatus`; on failure
//! `ceat_last_error()` describes the problem until the next call on the same
//! thread. Inputs are row-major `double` buffers of `n * input_len` values in
//! [0, 1].
//!
//! ```c
//! CeatEnsemble *e = NULL;
//! size_t shape[1] = {2};
//! if (ceat_ensemble_new(CEAT_ARCH_MLP, 3, shape, 1, 2, 7, &e) != CEAT_STATUS_OK) {
//!     fprintf(stderr, "%s\n", ceat_last_error());
//! }
//! ceat_ensemble_free(e);
//! ```

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::slice;

use ceat_core::attacks::{run_attack, AttackKind, AttackSpec, AttackTarget};
use ceat_core::cli::{checkpoint_path, load_members};
use ceat_core::data::Dataset;
use ceat_core::ensemble::{ensemble_probs, Ensemble, SgdSettings};
use ceat_core::nn::Arch;
use ceat_core::trainer::{disparity_weight, train_epoch, CeatConfig};
use ceat_core::{Error, Tensor};

/// Result of every exported function.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CeatStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Dimension = 3,
    Io = 4,
    Format = 5,
    Config = 6,
    Numeric = 7,
    Usage = 8,
    Panic = 9,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CeatArch {
    Mlp = 0,
    Cnn = 1,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CeatAttack {
    Fgsm = 0,
    Pgd = 1,
    Mim = 2,
    Cw = 3,
}

/// Opaque ensemble handle.
pub struct CeatEnsemble {
    inner: Ensemble,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_last_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(err: &Error) -> CeatStatus {
    match err {
        Error::Dimension(_) => CeatStatus::Dimension,
        Error::Input(_) => CeatStatus::InvalidArgument,
        Error::Usage(_) => CeatStatus::Usage,
        Error::Config(_) => CeatStatus::Config,
        Error::Format(_) | Error::Json(_) => CeatStatus::Format,
        Error::Numeric { .. } => CeatStatus::Numeric,
        Error::Io(_) => CeatStatus::Io,
    }
}

struct Fail(CeatStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(CeatStatus::NullPointer, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> CeatStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_last_error("");
            CeatStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_last_error(&msg);
            status
        }
        Err(_) => {
            set_last_error("internal panic");
            CeatStatus::Panic
        }
    }
}

unsafe fn handle<'a>(e: *const CeatEnsemble) -> Result<&'a Ensemble, Fail> {
    e.as_ref().map(|h| &h.inner).ok_or_else(|| null("ensemble"))
}

unsafe fn input_slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts(p, len))
}

unsafe fn output_slice<'a, T>(p: *mut T, len: usize, what: &str) -> Result<&'a mut [T], Fail> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts_mut(p, len))
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(null("path"));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(CeatStatus::InvalidArgument, "path is not valid UTF-8".into()))?;
    Ok(PathBuf::from(s))
}

fn default_sgd() -> SgdSettings {
    SgdSettings { learning_rate: 0.01, momentum: 0.9, schedule: Vec::new(), clip_norm: Some(5.0) }
}

fn batch_tensor(ens: &Ensemble, x: &[f64], n: usize) -> Result<Tensor, Fail> {
    let mut shape = vec![n];
    shape.extend_from_slice(ens.input_shape());
    Ok(Tensor::new(shape, x.to_vec())?)
}

fn input_len(ens: &Ensemble) -> usize {
    ens.input_shape().iter().product()
}

unsafe fn store(out: *mut *mut CeatEnsemble, ens: Ensemble) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null("out"));
    }
    *out = Box::into_raw(Box::new(CeatEnsemble { inner: ens }));
    Ok(())
}

/// Creates `members` freshly initialised models with input shape
/// `shape[0..rank]` (excluding the batch axis).
///
/// # Safety
/// `shape` must point to `rank` values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ceat_ensemble_new(
    arch: CeatArch,
    members: usize,
    shape: *const usize,
    rank: usize,
    num_classes: usize,
    seed: u64,
    out: *mut *mut CeatEnsemble,
) -> CeatStatus {
    guard(|| {
        let shape = input_slice(shape, rank, "shape")?;
        let arch = match arch {
            CeatArch::Mlp => Arch::Mlp,
            CeatArch::Cnn => Arch::Cnn,
        };
        let ens = Ensemble::init(arch, members, shape, num_classes, seed, &default_sgd())?;
        store(out, ens)
    })
}

/// Loads `member_0.ckpt ..` from `dir`.
///
/// # Safety
/// `dir` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ceat_ensemble_load(dir: *const c_char, members: usize, out: *mut *mut CeatEnsemble) -> CeatStatus {
    guard(|| {
        let dir = path_arg(dir)?;
        let models = load_members(&dir, members)?;
        store(out, Ensemble::with_fresh_optimizers(models, &default_sgd())?)
    })
}

/// Writes `member_<i>.ckpt` for every member into an existing directory.
///
/// # Safety
/// `e` must come from this library; `dir` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn ceat_ensemble_save(e: *const CeatEnsemble, dir: *const c_char) -> CeatStatus {
    guard(|| {
        let ens = handle(e)?;
        let dir = path_arg(dir)?;
        for (i, m) in ens.members().iter().enumerate() {
            m.save_checkpoint(checkpoint_path(&dir, i))?;
        }
        Ok(())
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `e` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ceat_ensemble_free(e: *mut CeatEnsemble) {
    if !e.is_null() {
        drop(Box::from_raw(e));
    }
}

/// Reports member count, class count and flattened input length.
///
/// # Safety
/// `e` must be a live handle; each out pointer may be null.
#[no_mangle]
pub unsafe extern "C" fn ceat_ensemble_info(
    e: *const CeatEnsemble,
    members: *mut usize,
    num_classes: *mut usize,
    input_len_out: *mut usize,
) -> CeatStatus {
    guard(|| {
        let ens = handle(e)?;
        if let Some(m) = members.as_mut() {
            *m = ens.len();
        }
        if let Some(k) = num_classes.as_mut() {
            *k = ens.num_classes();
        }
        if let Some(d) = input_len_out.as_mut() {
            *d = input_len(ens);
        }
        Ok(())
    })
}

/// Averaged member softmax, `n * num_classes` values written to `out`.
///
/// # Safety
/// `x` holds `n * input_len` doubles; `out` has room for `n * num_classes`.
#[no_mangle]
pub unsafe extern "C" fn ceat_ensemble_probs(e: *const CeatEnsemble, x: *const f64, n: usize, out: *mut f64) -> CeatStatus {
    guard(|| {
        let ens = handle(e)?;
        let x = input_slice(x, n * input_len(ens), "x")?;
        let out = output_slice(out, n * ens.num_classes(), "out")?;
        let probs = ensemble_probs(ens.members(), &batch_tensor(ens, x, n)?)?;
        out.copy_from_slice(probs.values());
        Ok(())
    })
}

/// Ensemble class predictions.
///
/// # Safety
/// `x` holds `n * input_len` doubles; `labels` has room for `n` values.
#[no_mangle]
pub unsafe extern "C" fn ceat_ensemble_predict(e: *const CeatEnsemble, x: *const f64, n: usize, labels: *mut usize) -> CeatStatus {
    guard(|| {
        let ens = handle(e)?;
        let x = input_slice(x, n * input_len(ens), "x")?;
        let labels = output_slice(labels, n, "labels")?;
        let pred = ceat_core::ensemble::ensemble_predict(ens.members(), &batch_tensor(ens, x, n)?)?;
        labels.copy_from_slice(&pred);
        Ok(())
    })
}

/// Crafts L∞ adversarial inputs against the averaged ensemble into `x_adv`.
/// FGSM ignores `alpha` and `steps`.
///
/// # Safety
/// `x` and `x_adv` hold `n * input_len` doubles; `labels` holds `n` values.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn ceat_ensemble_attack(
    e: *const CeatEnsemble,
    kind: CeatAttack,
    epsilon: f64,
    alpha: f64,
    steps: usize,
    seed: u64,
    x: *const f64,
    labels: *const usize,
    n: usize,
    x_adv: *mut f64,
) -> CeatStatus {
    guard(|| {
        let ens = handle(e)?;
        let d = n * input_len(ens);
        let x = input_slice(x, d, "x")?;
        let y = input_slice(labels, n, "labels")?;
        let out = output_slice(x_adv, d, "x_adv")?;
        let kind = match kind {
            CeatAttack::Fgsm => AttackKind::Fgsm,
            CeatAttack::Pgd => AttackKind::Pgd,
            CeatAttack::Mim => AttackKind::Mim,
            CeatAttack::Cw => AttackKind::Cw,
        };
        let spec = AttackSpec::new(kind, epsilon, alpha, steps).with_target(AttackTarget::Ensemble);
        let adv = run_attack(ens.members(), &batch_tensor(ens, x, n)?, y, &spec, seed)?;
        out.copy_from_slice(adv.x_adv.values());
        Ok(())
    })
}

/// One CEAT epoch over `(x, labels)` with PGD-10 (ε = 0.031) training
/// examples. `lambda = mu = 0` reproduces plain ensemble adversarial training.
///
/// # Safety
/// `x` holds `n * input_len` doubles; `labels` holds `n` values.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn ceat_ensemble_train_epoch(
    e: *mut CeatEnsemble,
    x: *const f64,
    labels: *const usize,
    n: usize,
    lambda: f64,
    mu: f64,
    batch_size: usize,
    seed: u64,
    epoch: usize,
) -> CeatStatus {
    guard(|| {
        let ens = &mut e.as_mut().ok_or_else(|| null("ensemble"))?.inner;
        let xs = input_slice(x, n * input_len(ens), "x")?;
        let y = input_slice(labels, n, "labels")?;
        let ds = Dataset::new(batch_tensor(ens, xs, n)?, y.to_vec(), ens.num_classes(), "ffi")?;
        let cfg = CeatConfig { batch_size, seed, ..CeatConfig::new(lambda, mu) };
        train_epoch(ens, &ds, &cfg, epoch)?;
        Ok(())
    })
}

/// `exp(amplifier · |h_b − h_c|)` for `n` samples.
///
/// # Safety
/// `h_b`, `h_c` and `out` each hold `n` doubles.
#[no_mangle]
pub unsafe extern "C" fn ceat_disparity_weight(
    h_b: *const f64,
    h_c: *const f64,
    n: usize,
    amplifier: f64,
    out: *mut f64,
) -> CeatStatus {
    guard(|| {
        let b = input_slice(h_b, n, "h_b")?;
        let c = input_slice(h_c, n, "h_c")?;
        let out = output_slice(out, n, "out")?;
        out.copy_from_slice(&disparity_weight(&[b.to_vec(), c.to_vec()], amplifier)?);
        Ok(())
    })
}

/// Message for the last failed call on this thread; empty after success.
/// Valid until the next call into the library on the same thread.
#[no_mangle]
pub extern "C" fn ceat_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ceat_version() -> *const c_char {
    static VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), "\0");
    VERSION.as_ptr().cast()
}
