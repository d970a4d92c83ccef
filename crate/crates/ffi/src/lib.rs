//! C ABI over the `autolabel` engine.
//!
//! Every fallible call returns an [`AlStatus`]; on failure the message is
//! available from [`al_last_error`] on the same thread until the next call.
//! Handles are opaque and must be released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use autolabel::backends::{DetectionNoise, PropagationDegradation};
use autolabel::chunker::{CheckpointStore, ModeUsed, RunOptions};
use autolabel::config::{PipelineConfig, RunMode};
use autolabel::geometry::BinaryMask;
use autolabel::io::{mot_to_frames, read_mot, AnnotationDocument};
use autolabel::metrics::{evaluate, FrameObjects, Scores, TrackedBox};
use autolabel::pipeline::{annotate_sequence, write_outputs, DatasetSequence};
use autolabel::smart_od::{dynamic_threshold, ThresholdMethod};
use autolabel::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AlStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    InvalidConfig = 3,
    Io = 4,
    Parse = 5,
    Geometry = 6,
    Backend = 7,
    Checkpoint = 8,
    Interrupted = 9,
    Panic = 10,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AlRunMode {
    Full = 0,
    Chunk = 1,
    Auto = 2,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AlThresholdMethod {
    MeanStd = 0,
    Kmeans = 1,
    KmeansMeanStd = 2,
    DoubleKmeans = 3,
}

/// Tracking scores; mirrors the engine's evaluation report.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct AlScores {
    pub gt: u64,
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub idsw: u64,
    pub idtp: u64,
    pub precision: f64,
    pub recall: f64,
    pub mota: f64,
    pub idf1: f64,
}

impl From<&Scores> for AlScores {
    fn from(s: &Scores) -> Self {
        AlScores {
            gt: s.gt,
            tp: s.tp,
            fp: s.fp,
            fn_: s.fn_,
            idsw: s.idsw,
            idtp: s.idtp,
            precision: s.precision,
            recall: s.recall,
            mota: s.mota,
            idf1: s.idf1,
        }
    }
}

/// Configured engine.
pub struct AlPipeline {
    config: PipelineConfig,
}

/// Annotations of one sequence plus the ground truth it was produced from.
pub struct AlAnnotation {
    document: AnnotationDocument,
    ground_truth: Vec<FrameObjects>,
    eval_iou: f64,
    chunked: bool,
    fell_back: bool,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Failure(AlStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Config { .. } => AlStatus::InvalidConfig,
            Error::Io { .. } => AlStatus::Io,
            Error::Parse { .. } => AlStatus::Parse,
            Error::Geometry(_) | Error::DimensionMismatch { .. } | Error::Misaligned(_) => AlStatus::Geometry,
            Error::Backend(_) | Error::Propagation { .. } | Error::BudgetExceeded { .. } | Error::BothModesFailed { .. } => {
                AlStatus::Backend
            }
            Error::Checkpoint { .. } => AlStatus::Checkpoint,
            Error::Interrupted(_) => AlStatus::Interrupted,
        };
        Failure(status, e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(AlStatus::NullArgument, format!("{what} is null"))
}

/// Runs `f`, recording failures and containing panics.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> AlStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => AlStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal error: {msg}"));
            AlStatus::Panic
        }
    }
}

/// # Safety
/// `s` is null or a NUL-terminated string.
unsafe fn opt_str<'a>(s: *const c_char, what: &str) -> Result<Option<&'a str>, Failure> {
    if s.is_null() {
        return Ok(None);
    }
    CStr::from_ptr(s).to_str().map(Some).map_err(|_| Failure(AlStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

/// # Safety
/// As [`opt_str`].
unsafe fn req_str<'a>(s: *const c_char, what: &str) -> Result<&'a str, Failure> {
    opt_str(s, what)?.ok_or_else(|| null(what))
}

/// Library version, static storage.
#[no_mangle]
pub extern "C" fn al_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next `al_` call on the same thread.
#[no_mangle]
pub extern "C" fn al_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Creates a pipeline from a TOML document; null `config_toml` gives defaults.
///
/// # Safety
/// `config_toml` is null or NUL-terminated; `out` is a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn al_pipeline_new(config_toml: *const c_char, out: *mut *mut AlPipeline) -> AlStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let config = match opt_str(config_toml, "config_toml")? {
            Some(s) => PipelineConfig::from_toml_str(s)?,
            None => PipelineConfig::default(),
        };
        config.validate()?;
        *out = Box::into_raw(Box::new(AlPipeline { config }));
        Ok(())
    })
}

/// # Safety
/// `p` is null or a handle from [`al_pipeline_new`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn al_pipeline_free(p: *mut AlPipeline) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

/// Replaces every seed in the configuration.
///
/// # Safety
/// `p` is a live pipeline handle.
#[no_mangle]
pub unsafe extern "C" fn al_pipeline_set_seed(p: *mut AlPipeline, seed: u64) -> AlStatus {
    guard(|| {
        let p = p.as_mut().ok_or_else(|| null("pipeline"))?;
        p.config = p.config.clone().with_seed(seed);
        p.config.deployment.qa_seed = seed;
        Ok(())
    })
}

/// # Safety
/// `p` is a live pipeline handle.
#[no_mangle]
pub unsafe extern "C" fn al_pipeline_set_mode(p: *mut AlPipeline, mode: AlRunMode) -> AlStatus {
    guard(|| {
        let p = p.as_mut().ok_or_else(|| null("pipeline"))?;
        p.config.run.mode = match mode {
            AlRunMode::Full => RunMode::Full,
            AlRunMode::Chunk => RunMode::Chunk,
            AlRunMode::Auto => RunMode::Auto,
        };
        Ok(())
    })
}

/// Annotates the synthetic sequence described by the pipeline's world,
/// noise and propagation settings. With a non-null `checkpoint_dir` progress
/// is checkpointed there and `resume` continues from the latest checkpoint.
///
/// # Safety
/// `p` is a live pipeline handle; strings are null or NUL-terminated;
/// `out` is a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn al_annotate_synthetic(
    p: *const AlPipeline,
    sequence_id: *const c_char,
    checkpoint_dir: *const c_char,
    resume: bool,
    out: *mut *mut AlAnnotation,
) -> AlStatus {
    guard(|| {
        let p = p.as_ref().ok_or_else(|| null("pipeline"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let id = req_str(sequence_id, "sequence_id")?;
        let cfg = &p.config;
        let seq = DatasetSequence::synthetic(id, &cfg.world, cfg.noise.clone(), cfg.propagation.clone())?;
        let store = opt_str(checkpoint_dir, "checkpoint_dir")?
            .map(|d| CheckpointStore::new(PathBuf::from(d), id))
            .transpose()?;
        if let (Some(s), false) = (&store, resume) {
            s.clear()?;
        }
        let digest = cfg.digest();
        let opts = RunOptions {
            checkpoints: store.as_ref(),
            resume,
            config_digest: &digest,
            rng_seed: cfg.world.rng_seed,
            ..Default::default()
        };
        let res = annotate_sequence(&seq, cfg, cfg.run.mode, opts)?;
        let (w, h) = seq.size();
        let document = AnnotationDocument::from_masklets(&seq.id, w, h, seq.num_frames(), &res.masklets);
        let ground_truth = seq
            .frames
            .iter()
            .map(|f| FrameObjects {
                frame_index: f.frame_index,
                objects: f.visible_objects().filter_map(|o| o.bbox.map(|b| TrackedBox::new(o.id, b))).collect(),
            })
            .collect();
        *out = Box::into_raw(Box::new(AlAnnotation {
            document,
            ground_truth,
            eval_iou: cfg.run.eval_iou,
            chunked: res.mode == ModeUsed::Chunk,
            fell_back: res.fell_back,
        }));
        Ok(())
    })
}

/// # Safety
/// `a` is null or a handle from [`al_annotate_synthetic`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn al_annotation_free(a: *mut AlAnnotation) {
    if !a.is_null() {
        drop(Box::from_raw(a));
    }
}

/// Distinct track ids, or 0 for a null handle.
///
/// # Safety
/// `a` is null or a live annotation handle.
#[no_mangle]
pub unsafe extern "C" fn al_annotation_track_count(a: *const AlAnnotation) -> usize {
    a.as_ref().map_or(0, |a| {
        let mut ids: Vec<u64> = a.document.frames.iter().flat_map(|f| f.objects.iter().map(|o| o.track_id)).collect();
        ids.sort_unstable();
        ids.dedup();
        ids.len()
    })
}

/// Frames in the annotated sequence, or 0 for a null handle.
///
/// # Safety
/// `a` is null or a live annotation handle.
#[no_mangle]
pub unsafe extern "C" fn al_annotation_frame_count(a: *const AlAnnotation) -> usize {
    a.as_ref().map_or(0, |a| a.document.header.num_frames)
}

/// Whether the run finished in chunk mode, and whether it got there by
/// falling back from full mode. Either pointer may be null.
///
/// # Safety
/// `a` is a live annotation handle; non-null outputs are writable.
#[no_mangle]
pub unsafe extern "C" fn al_annotation_mode(a: *const AlAnnotation, chunked: *mut bool, fell_back: *mut bool) -> AlStatus {
    guard(|| {
        let a = a.as_ref().ok_or_else(|| null("annotation"))?;
        if let Some(c) = chunked.as_mut() {
            *c = a.chunked;
        }
        if let Some(f) = fell_back.as_mut() {
            *f = a.fell_back;
        }
        Ok(())
    })
}

/// Writes `<id>.jsonl` and `<id>.mot.txt` into `dir`.
///
/// # Safety
/// `a` is a live annotation handle; `dir` is NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn al_annotation_write(a: *const AlAnnotation, dir: *const c_char) -> AlStatus {
    guard(|| {
        let a = a.as_ref().ok_or_else(|| null("annotation"))?;
        let dir = PathBuf::from(req_str(dir, "dir")?);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        write_outputs(&a.document, &dir)?;
        Ok(())
    })
}

/// Scores the annotation against the synthetic ground truth.
///
/// # Safety
/// `a` is a live annotation handle; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn al_annotation_evaluate(a: *const AlAnnotation, out: *mut AlScores) -> AlStatus {
    guard(|| {
        let a = a.as_ref().ok_or_else(|| null("annotation"))?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let pred = a.document.to_frame_objects()?;
        let r = evaluate(&a.document.header.sequence_id, &pred, &a.ground_truth, a.eval_iou)?;
        *out = AlScores::from(&r.scores);
        Ok(())
    })
}

/// Scores a MOT prediction file against a MOT ground-truth file.
///
/// # Safety
/// Paths are NUL-terminated; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn al_evaluate_mot(pred: *const c_char, gt: *const c_char, iou: f64, out: *mut AlScores) -> AlStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let p = read_mot(std::path::Path::new(req_str(pred, "pred")?))?;
        let g = read_mot(std::path::Path::new(req_str(gt, "gt")?))?;
        let n = p.keys().chain(g.keys()).copied().max().unwrap_or(0) as usize;
        let r = evaluate("sequence", &mot_to_frames(&p, n)?, &mot_to_frames(&g, n)?, iou)?;
        *out = AlScores::from(&r.scores);
        Ok(())
    })
}

/// Confidence threshold for `n` scores.
///
/// # Safety
/// `scores` points to `n` readable doubles (may be null when `n` is 0);
/// `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn al_dynamic_threshold(
    scores: *const f64,
    n: usize,
    method: AlThresholdMethod,
    theta_min: f64,
    out: *mut f64,
) -> AlStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let s: &[f64] = match (scores.is_null(), n) {
            (_, 0) => &[],
            (true, _) => return Err(null("scores")),
            (false, _) => std::slice::from_raw_parts(scores, n),
        };
        let m = match method {
            AlThresholdMethod::MeanStd => ThresholdMethod::MeanStd,
            AlThresholdMethod::Kmeans => ThresholdMethod::Kmeans,
            AlThresholdMethod::KmeansMeanStd => ThresholdMethod::KmeansMeanStd,
            AlThresholdMethod::DoubleKmeans => ThresholdMethod::DoubleKmeans,
        };
        *out = dynamic_threshold(s, m, theta_min);
        Ok(())
    })
}

/// IoU of two row-major `width` x `height` masks (nonzero bytes are set).
///
/// # Safety
/// `a` and `b` point to `width * height` readable bytes; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn al_mask_iou(a: *const u8, b: *const u8, width: u32, height: u32, out: *mut f64) -> AlStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        if a.is_null() || b.is_null() {
            return Err(null("mask"));
        }
        let n = width as usize * height as usize;
        let mask = |p: *const u8| {
            let bytes = std::slice::from_raw_parts(p, n);
            BinaryMask::from_fn(width, height, |x, y| bytes[y as usize * width as usize + x as usize] != 0)
        };
        *out = autolabel::geometry::iou_mask(&mask(a)?, &mask(b)?)?;
        Ok(())
    })
}

/// Switches detection noise and propagation degradation off.
///
/// # Safety
/// `p` is a live pipeline handle.
#[no_mangle]
pub unsafe extern "C" fn al_pipeline_use_oracle(p: *mut AlPipeline) -> AlStatus {
    guard(|| {
        let p = p.as_mut().ok_or_else(|| null("pipeline"))?;
        p.config.noise = DetectionNoise::zero();
        p.config.propagation = PropagationDegradation::default();
        Ok(())
    })
}

/// ABI revision; bumped on incompatible signature changes.
#[no_mangle]
pub extern "C" fn al_abi_version() -> u32 {
    1
}
