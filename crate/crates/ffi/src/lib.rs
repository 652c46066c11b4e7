//! C ABI over `rml-core`.
//!
//! Datasets and models are opaque heap handles created by `rml_*` constructors
//! and released with the matching `_free`. Every fallible call returns an
//! [`RmlStatus`]; on failure the message is available from
//! [`rml_last_error_message`] until the next failing call on the same thread.
//! Panics are caught at the boundary and reported as [`RmlStatus::Panic`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use rml::encoder::EncoderParams;
use rml::eval::evaluate_model;
use rml::losses::{loss, BatchSimilarities, Branch, LabelMatrix, LossConfig, LossVariant};
use rml::math::Matrix;
use rml::synth_data::{generate, inject_noise, DatasetConfig, NoiseSpec, PairDataset};
use rml::trainer::{train, TrainConfig};
use rml::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RmlStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    NoiseInjection = 4,
    Shape = 5,
    Numeric = 6,
    Contract = 7,
    Degenerate = 8,
    Evaluation = 9,
    Parse = 10,
    Diverged = 11,
    Io = 12,
    Panic = 13,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RmlLossVariant {
    Tal = 0,
    Trl = 1,
    TrlS = 2,
}

impl From<RmlLossVariant> for LossVariant {
    fn from(v: RmlLossVariant) -> Self {
        match v {
            RmlLossVariant::Tal => LossVariant::Tal,
            RmlLossVariant::Trl => LossVariant::Trl,
            RmlLossVariant::TrlS => LossVariant::TrlS,
        }
    }
}

/// Opaque dataset handle.
pub struct RmlDataset(PairDataset);

/// Opaque model handle.
pub struct RmlModel(EncoderParams);

#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct RmlDatasetConfig {
    pub num_identities: usize,
    pub images_per_identity: usize,
    pub captions_per_image: usize,
    pub raw_dim: usize,
    pub intra_identity_noise_std: f64,
    pub prototype_offset: f64,
    pub seed: u64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct RmlTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Cosine decay with linear warm-up when true, constant otherwise.
    pub cosine_schedule: bool,
    pub warmup_epochs: usize,
    pub lr_warmup_epochs: usize,
    pub margin: f64,
    pub tau: f64,
    pub loss_variant: RmlLossVariant,
    pub embed_dim: usize,
    pub num_tokens: usize,
    pub select_ratio: f64,
    pub division: bool,
    pub threshold: f64,
    pub seed: u64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct RmlMetrics {
    pub rank1: f64,
    pub rank5: f64,
    pub rank10: f64,
    pub map: f64,
    pub minp: f64,
    pub num_queries: usize,
    pub num_gallery: usize,
    pub similarity_std: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> RmlStatus {
    match e {
        Error::Config(_) => RmlStatus::Config,
        Error::NoiseInjection(_) => RmlStatus::NoiseInjection,
        Error::Shape(_) => RmlStatus::Shape,
        Error::Numeric(_) => RmlStatus::Numeric,
        Error::Contract(_) => RmlStatus::Contract,
        Error::Degenerate(_) => RmlStatus::Degenerate,
        Error::Evaluation(_) => RmlStatus::Evaluation,
        Error::Parse { .. } => RmlStatus::Parse,
        Error::Diverged { .. } => RmlStatus::Diverged,
        Error::File { .. } | Error::Io(_) | Error::Csv(_) => RmlStatus::Io,
    }
}

enum Fail {
    Status(RmlStatus, String),
    Core(Error),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Core(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> RmlStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => RmlStatus::Ok,
        Ok(Err(Fail::Status(s, msg))) => {
            set_error(&msg);
            s
        }
        Ok(Err(Fail::Core(e))) => {
            set_error(&e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_error("panic inside rml");
            RmlStatus::Panic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail::Status(RmlStatus::NullPointer, format!("{what} is null"))
}

unsafe fn borrow<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn path_arg(p: *const c_char) -> Result<String, Fail> {
    if p.is_null() {
        return Err(null("path"));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(str::to_owned)
        .map_err(|_| Fail::Status(RmlStatus::InvalidArgument, "path is not UTF-8".into()))
}

unsafe fn put<T>(out: *mut *mut T, value: T) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null("output handle"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

/// Message of the last failed call on this thread; empty if none. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn rml_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

#[no_mangle]
pub extern "C" fn rml_dataset_config_default() -> RmlDatasetConfig {
    let d = DatasetConfig::default();
    RmlDatasetConfig {
        num_identities: d.num_identities,
        images_per_identity: d.images_per_identity,
        captions_per_image: d.captions_per_image,
        raw_dim: d.raw_dim,
        intra_identity_noise_std: d.intra_identity_noise_std,
        prototype_offset: d.prototype_offset,
        seed: d.seed,
    }
}

#[no_mangle]
pub extern "C" fn rml_train_config_default() -> RmlTrainConfig {
    let d = TrainConfig::default();
    RmlTrainConfig {
        epochs: d.epochs,
        batch_size: d.batch_size,
        learning_rate: d.learning_rate,
        cosine_schedule: d.lr_schedule == rml::trainer::LrSchedule::CosineWarmup,
        warmup_epochs: d.warmup_epochs,
        lr_warmup_epochs: d.lr_warmup_epochs,
        margin: d.loss_cfg.margin,
        tau: d.loss_cfg.tau,
        loss_variant: RmlLossVariant::Tal,
        embed_dim: d.embed_dim,
        num_tokens: d.num_tokens,
        select_ratio: d.select_ratio,
        division: d.division,
        threshold: d.threshold,
        seed: d.seed,
    }
}

/// # Safety
/// `config` must point to a valid config; `out` to writable storage.
#[no_mangle]
pub unsafe extern "C" fn rml_dataset_generate(
    config: *const RmlDatasetConfig,
    out: *mut *mut RmlDataset,
) -> RmlStatus {
    guard(|| {
        let c = borrow(config, "config")?;
        let cfg = DatasetConfig {
            num_identities: c.num_identities,
            images_per_identity: c.images_per_identity,
            captions_per_image: c.captions_per_image,
            raw_dim: c.raw_dim,
            intra_identity_noise_std: c.intra_identity_noise_std,
            prototype_offset: c.prototype_offset,
            seed: c.seed,
        };
        put(out, RmlDataset(generate(&cfg)?))
    })
}

/// Returns a new, corrupted copy; the input is unchanged.
///
/// # Safety
/// `dataset` must be a live handle; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn rml_dataset_inject_noise(
    dataset: *const RmlDataset,
    noise_rate: f64,
    seed: u64,
    out: *mut *mut RmlDataset,
) -> RmlStatus {
    guard(|| {
        let d = borrow(dataset, "dataset")?;
        let noisy = inject_noise(&d.0, &NoiseSpec { noise_rate, seed })?;
        put(out, RmlDataset(noisy))
    })
}

/// # Safety
/// `path` must be a NUL-terminated string; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn rml_dataset_load(path: *const c_char, out: *mut *mut RmlDataset) -> RmlStatus {
    guard(|| {
        let p = path_arg(path)?;
        put(out, RmlDataset(PairDataset::load(p)?))
    })
}

/// # Safety
/// `dataset` must be a live handle; `path` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn rml_dataset_save(dataset: *const RmlDataset, path: *const c_char) -> RmlStatus {
    guard(|| {
        let d = borrow(dataset, "dataset")?;
        d.0.save(path_arg(path)?)?;
        Ok(())
    })
}

/// Number of pairs; 0 for a null handle.
///
/// # Safety
/// `dataset` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn rml_dataset_len(dataset: *const RmlDataset) -> usize {
    dataset.as_ref().map_or(0, |d| d.0.len())
}

/// Number of pairs whose hidden flag marks them as corrupted.
///
/// # Safety
/// `dataset` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn rml_dataset_num_noisy(dataset: *const RmlDataset) -> usize {
    dataset.as_ref().map_or(0, |d| d.0.num_noisy())
}

/// # Safety
/// `dataset` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn rml_dataset_free(dataset: *mut RmlDataset) {
    if !dataset.is_null() {
        drop(Box::from_raw(dataset));
    }
}

/// Train on every pair of `dataset`.
///
/// # Safety
/// `dataset` and `config` must be valid; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn rml_train(
    dataset: *const RmlDataset,
    config: *const RmlTrainConfig,
    out: *mut *mut RmlModel,
) -> RmlStatus {
    guard(|| {
        let d = borrow(dataset, "dataset")?;
        let c = borrow(config, "config")?;
        let cfg = TrainConfig {
            epochs: c.epochs,
            batch_size: c.batch_size,
            learning_rate: c.learning_rate,
            lr_schedule: if c.cosine_schedule {
                rml::trainer::LrSchedule::CosineWarmup
            } else {
                rml::trainer::LrSchedule::Constant
            },
            warmup_epochs: c.warmup_epochs,
            lr_warmup_epochs: c.lr_warmup_epochs,
            loss_cfg: LossConfig::new(c.margin, c.tau)?,
            loss_variant: c.loss_variant.into(),
            embed_dim: c.embed_dim,
            num_tokens: c.num_tokens,
            select_ratio: c.select_ratio,
            division: c.division,
            threshold: c.threshold,
            adam: Default::default(),
            seed: c.seed,
        };
        let state = train(&d.0, &cfg)?;
        put(out, RmlModel(state.params))
    })
}

/// # Safety
/// `path` must be NUL-terminated; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn rml_model_load(path: *const c_char, out: *mut *mut RmlModel) -> RmlStatus {
    guard(|| {
        let p = path_arg(path)?;
        put(out, RmlModel(EncoderParams::load(p)?))
    })
}

/// # Safety
/// `model` must be a live handle; `path` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn rml_model_save(model: *const RmlModel, path: *const c_char) -> RmlStatus {
    guard(|| {
        let m = borrow(model, "model")?;
        m.0.save(path_arg(path)?)?;
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn rml_model_free(model: *mut RmlModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Retrieval metrics of `model` with the clean pairs of `dataset` as queries.
///
/// # Safety
/// Handles must be live; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn rml_evaluate(
    model: *const RmlModel,
    dataset: *const RmlDataset,
    out: *mut RmlMetrics,
) -> RmlStatus {
    guard(|| {
        let m = borrow(model, "model")?;
        let d = borrow(dataset, "dataset")?;
        if out.is_null() {
            return Err(null("output metrics"));
        }
        let e = evaluate_model(&m.0, &d.0)?;
        *out = RmlMetrics {
            rank1: e.metrics.rank1,
            rank5: e.metrics.rank5,
            rank10: e.metrics.rank10,
            map: e.metrics.map,
            minp: e.metrics.minp,
            num_queries: e.num_queries,
            num_gallery: e.num_gallery,
            similarity_std: e.similarity_std,
        };
        Ok(())
    })
}

/// Per-pair loss of a `k × k` row-major similarity matrix with a row-major
/// 0/1 label matrix. Writes the total to `out_total` and, if `out_per_pair`
/// is non-null, `k` per-pair values.
///
/// # Safety
/// `sims` and `labels` must hold `k*k` elements; `out_per_pair` null or `k`.
#[no_mangle]
pub unsafe extern "C" fn rml_batch_loss(
    sims: *const f64,
    labels: *const u8,
    k: usize,
    variant: RmlLossVariant,
    margin: f64,
    tau: f64,
    out_total: *mut f64,
    out_per_pair: *mut f64,
) -> RmlStatus {
    guard(|| {
        if sims.is_null() {
            return Err(null("sims"));
        }
        if labels.is_null() {
            return Err(null("labels"));
        }
        if out_total.is_null() {
            return Err(null("out_total"));
        }
        let n = k
            .checked_mul(k)
            .ok_or_else(|| Fail::Status(RmlStatus::InvalidArgument, "k overflows".into()))?;
        let s = std::slice::from_raw_parts(sims, n).to_vec();
        let l = std::slice::from_raw_parts(labels, n);
        let labels = LabelMatrix::from_fn(k, |i, j| l[i * k + j] != 0);
        let batch = BatchSimilarities::new(Matrix::from_vec(k, k, s)?, labels, Branch::Bge)?;
        let v = loss(&batch, variant.into(), &LossConfig::new(margin, tau)?)?;
        *out_total = v.total;
        if !out_per_pair.is_null() {
            ptr::copy_nonoverlapping(v.per_pair.as_ptr(), out_per_pair, k);
        }
        Ok(())
    })
}

/// Crate version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn rml_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}
