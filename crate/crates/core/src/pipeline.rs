//! Dataset-level deployment: pick the most crowded sequence, tune the
//! verification parameters on its busiest frame, cross-check them on
//! another sequence, annotate every sequence and sample the result for QA.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ash::Masklet;
use crate::backends::{
    rng_for, DetectionNoise, Detector, FrameRef, GroundTruthFrame, OracleDetector, OraclePropagator,
    PropagationDegradation, Propagator, SyntheticWorldConfig, generate_synthetic_sequence,
};
use crate::chunker::{run_sequence, CheckpointStore, ModeUsed, RunOptions, SequenceInput, SequenceResult, StageConfigs};
use crate::config::{PipelineConfig, RunMode};
use crate::error::{Error, Result};
use crate::geometry::{iou_mask, BBox};
use crate::io::{write_annotations, write_mot, AnnotationDocument};
use crate::metrics::match_frame;
use crate::smart_od::{run_smart_od, SmartOdConfig, ThresholdMethod};

/// Candidate values per tunable parameter. An empty list keeps the base
/// configuration's value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ParameterGrid {
    pub theta_c: Vec<f64>,
    pub theta_v: Vec<f64>,
    pub theta_min: Vec<f64>,
    pub threshold_method: Vec<ThresholdMethod>,
}

impl Default for ParameterGrid {
    fn default() -> Self {
        ParameterGrid {
            theta_c: Vec::new(),
            theta_v: vec![0.03],
            theta_min: vec![0.05, 0.1, 0.2],
            threshold_method: ThresholdMethod::ALL.to_vec(),
        }
    }
}

impl ParameterGrid {
    /// Cartesian product in declaration order, last parameter varying
    /// fastest.
    pub fn expand(&self, base: &SmartOdConfig) -> Vec<SmartOdConfig> {
        fn or_base<T: Clone>(v: &[T], b: T) -> Vec<T> {
            if v.is_empty() {
                vec![b]
            } else {
                v.to_vec()
            }
        }
        let mut out = Vec::new();
        for &c in &or_base(&self.theta_c, base.theta_c) {
            for &v in &or_base(&self.theta_v, base.theta_v) {
                for &m in &or_base(&self.theta_min, base.theta_min) {
                    for &t in &or_base(&self.threshold_method, base.threshold_method) {
                        out.push(SmartOdConfig { theta_c: c, theta_v: v, theta_min: m, threshold_method: t, ..base.clone() });
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DeploymentConfig {
    /// Recall weight of the tuning objective.
    pub alpha_weight: f64,
    /// Cross-validation tolerance.
    pub gamma: f64,
    /// Minimum QA score before a sequence is flagged.
    pub tau_qa: f64,
    pub qa_sample_fraction: f64,
    pub qa_seed: u64,
    pub grid: ParameterGrid,
}

impl Default for DeploymentConfig {
    fn default() -> Self {
        DeploymentConfig {
            alpha_weight: 0.5,
            gamma: 0.9,
            tau_qa: 0.9,
            qa_sample_fraction: 0.1,
            qa_seed: 0,
            grid: ParameterGrid::default(),
        }
    }
}

impl DeploymentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha_weight) {
            return Err(Error::config("deployment.alpha_weight", "must be in [0, 1]"));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::config("deployment.gamma", "must be in (0, 1]"));
        }
        if !(self.tau_qa > 0.0 && self.tau_qa < 1.0) {
            return Err(Error::config("deployment.tau_qa", "must be in (0, 1)"));
        }
        if !(self.qa_sample_fraction > 0.0 && self.qa_sample_fraction <= 1.0) {
            return Err(Error::config("deployment.qa_sample_fraction", "must be in (0, 1]"));
        }
        for c in self.grid.expand(&SmartOdConfig::default()) {
            c.validate().map_err(|e| Error::config("deployment.grid", e.to_string()))?;
        }
        Ok(())
    }
}

/// Index of the sequence whose busiest frame holds the most objects, and
/// that frame. Ties go to the first sequence and the lowest frame.
pub fn select_representative(counts: &[Vec<usize>]) -> Option<(usize, usize)> {
    let mut best: Option<(usize, usize, usize)> = None;
    for (s, c) in counts.iter().enumerate() {
        let Some(peak) = c.iter().copied().max() else { continue };
        let frame = c.iter().position(|&n| n == peak).expect("max exists");
        if best.is_none_or(|(_, _, b)| peak > b) {
            best = Some((s, frame, peak));
        }
    }
    best.map(|(s, f, _)| (s, f))
}

/// Detection-level counts at a fixed IoU.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MatchCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl MatchCounts {
    pub fn of(pred: &[BBox], gt: &[BBox], iou: f64) -> Self {
        let p: Vec<(u64, BBox)> = pred.iter().enumerate().map(|(i, b)| (i as u64, *b)).collect();
        let g: Vec<(u64, BBox)> = gt.iter().enumerate().map(|(i, b)| (i as u64, *b)).collect();
        let m = match_frame(&p, &g, iou);
        MatchCounts { tp: m.matches.len() as u64, fp: m.false_positives.len() as u64, fn_: m.false_negatives.len() as u64 }
    }

    /// 1 when there is nothing to find and nothing was predicted; 0 when
    /// nothing was predicted but objects exist.
    pub fn precision(&self) -> f64 {
        match self.tp + self.fp {
            0 if self.fn_ == 0 => 1.0,
            0 => 0.0,
            n => self.tp as f64 / n as f64,
        }
    }

    /// 1 when there is nothing to find.
    pub fn recall(&self) -> f64 {
        match self.tp + self.fn_ {
            0 => 1.0,
            n => self.tp as f64 / n as f64,
        }
    }

    pub fn min_metric(&self) -> f64 {
        self.precision().min(self.recall())
    }
}

impl std::ops::Add for MatchCounts {
    type Output = MatchCounts;

    fn add(self, o: MatchCounts) -> MatchCounts {
        MatchCounts { tp: self.tp + o.tp, fp: self.fp + o.fp, fn_: self.fn_ + o.fn_ }
    }
}

pub fn objective(alpha: f64, precision: f64, recall: f64) -> f64 {
    alpha * recall + (1.0 - alpha) * precision
}

#[derive(Debug, Clone, PartialEq)]
pub struct Optimized {
    pub config: SmartOdConfig,
    pub j: f64,
    pub counts: MatchCounts,
    /// Objective of every grid point, in grid order.
    pub scores: Vec<f64>,
}

/// Exhaustive grid search of verification settings on one frame, scored at
/// IoU 0.5. Ties keep the earliest grid point.
pub fn optimize_parameters(
    frame: FrameRef,
    gt: &[BBox],
    detector: &dyn Detector,
    base: &SmartOdConfig,
    grid: &ParameterGrid,
    alpha: f64,
) -> Result<Optimized> {
    let cands = grid.expand(base);
    let mut scores = Vec::with_capacity(cands.len());
    let mut best: Option<(usize, f64, MatchCounts)> = None;
    for (i, c) in cands.iter().enumerate() {
        let v = run_smart_od(frame, detector, c)?;
        let pred: Vec<BBox> = v.detections.iter().map(|d| d.bbox).collect();
        let counts = MatchCounts::of(&pred, gt, 0.5);
        let j = objective(alpha, counts.precision(), counts.recall());
        scores.push(j);
        if best.is_none_or(|(_, b, _)| j > b) {
            best = Some((i, j, counts));
        }
    }
    let (i, j, counts) = best.ok_or_else(|| Error::config("deployment.grid", "grid is empty"))?;
    Ok(Optimized { config: cands[i].clone(), j, counts, scores })
}

/// Validation passes when its weaker metric reaches `gamma` times the
/// representative's weaker metric.
pub fn cross_validate(rep: &MatchCounts, val: &MatchCounts, gamma: f64) -> bool {
    val.min_metric() >= gamma * rep.min_metric()
}

/// One sequence of a dataset: reference annotations plus the oracle
/// backend settings that stand in for the neural models.
#[derive(Debug, Clone)]
pub struct DatasetSequence {
    pub id: String,
    pub frames: Arc<Vec<GroundTruthFrame>>,
    pub noise: DetectionNoise,
    pub degradation: PropagationDegradation,
}

impl DatasetSequence {
    pub fn synthetic(
        id: impl Into<String>,
        world: &SyntheticWorldConfig,
        noise: DetectionNoise,
        degradation: PropagationDegradation,
    ) -> Result<Self> {
        Ok(DatasetSequence { id: id.into(), frames: Arc::new(generate_synthetic_sequence(world)?), noise, degradation })
    }

    pub fn num_frames(&self) -> usize {
        self.frames.len()
    }

    pub fn size(&self) -> (u32, u32) {
        self.frames.first().map(|f| (f.width, f.height)).unwrap_or((0, 0))
    }

    pub fn object_counts(&self) -> Vec<usize> {
        self.frames.iter().map(|f| f.visible_objects().count()).collect()
    }

    pub fn gt_boxes(&self, t: usize) -> Vec<BBox> {
        self.frames[t].visible_objects().filter_map(|o| o.bbox).collect()
    }

    pub fn detector(&self) -> OracleDetector {
        OracleDetector::new(self.frames.clone(), self.noise.clone())
    }

    pub fn propagator(&self) -> OraclePropagator {
        OraclePropagator::new(self.frames.clone(), self.degradation.clone())
    }

    /// Verified-detection counts over every frame.
    pub fn detection_counts(&self, cfg: &SmartOdConfig) -> Result<MatchCounts> {
        let det = self.detector();
        let per: Vec<MatchCounts> = (0..self.num_frames())
            .into_par_iter()
            .map(|t| {
                let v = run_smart_od(self.frames[t].frame_ref(), &det, cfg)?;
                let pred: Vec<BBox> = v.detections.iter().map(|d| d.bbox).collect();
                Ok(MatchCounts::of(&pred, &self.gt_boxes(t), 0.5))
            })
            .collect::<Result<_>>()?;
        Ok(per.into_iter().fold(MatchCounts::default(), |a, b| a + b))
    }
}

/// Runs verification and whole-sequence processing with the sequence's
/// oracle backends.
pub fn annotate_sequence(
    seq: &DatasetSequence,
    cfg: &PipelineConfig,
    mode: RunMode,
    opts: RunOptions<'_>,
) -> Result<SequenceResult> {
    annotate_with(seq, cfg, mode, opts, &seq.propagator())
}

/// As [`annotate_sequence`] with a caller-supplied propagator.
pub fn annotate_with(
    seq: &DatasetSequence,
    cfg: &PipelineConfig,
    mode: RunMode,
    opts: RunOptions<'_>,
    propagator: &dyn Propagator,
) -> Result<SequenceResult> {
    let det = seq.detector();
    let frames = seq.frames.clone();
    let detections = move |t: usize| Ok(run_smart_od(frames[t].frame_ref(), &det, &cfg.smart_od)?.detections);
    let (w, h) = seq.size();
    let input = SequenceInput {
        sequence_id: &seq.id,
        num_frames: seq.num_frames(),
        width: w,
        height: h,
        detections: &detections,
        propagator,
    };
    let stages = StageConfigs { assoc: &cfg.assoc, ash: &cfg.ash, chunker: &cfg.chunker };
    run_sequence(&input, mode, stages, opts)
}

fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3))
}

/// Stratified frame sample: `ceil(fraction * T)` equal strata, one seeded
/// frame from each.
pub fn qa_sample(num_frames: usize, fraction: f64, seed: u64, sequence_id: &str) -> Vec<usize> {
    if num_frames == 0 {
        return Vec::new();
    }
    let k = ((fraction * num_frames as f64).ceil() as usize).clamp(1, num_frames);
    (0..k)
        .map(|i| {
            let (lo, hi) = (i * num_frames / k, (i + 1) * num_frames / k);
            let mut rng = rng_for(&[seed, fnv1a(sequence_id), i as u64]);
            rng.random_range(lo..hi)
        })
        .collect()
}

/// Mean mask IoU of reference objects on `frames`, each paired with at most
/// one annotated mask (greedy by IoU). Unpaired reference objects score 0;
/// no reference objects scores 1.
pub fn qa_score(masklets: &[Masklet], reference: &[GroundTruthFrame], frames: &[usize]) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for &f in frames {
        let gt: Vec<_> = reference[f].visible_objects().collect();
        let pred: Vec<_> = masklets.iter().filter_map(|m| m.visible_at(f)).collect();
        let mut pairs = Vec::new();
        for (i, g) in gt.iter().enumerate() {
            for (j, p) in pred.iter().enumerate() {
                let v = iou_mask(&g.mask, &p.mask).unwrap_or(0.0);
                if v > 0.0 {
                    pairs.push((v, i, j));
                }
            }
        }
        pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let (mut used_g, mut used_p) = (vec![false; gt.len()], vec![false; pred.len()]);
        for (v, i, j) in pairs {
            if !used_g[i] && !used_p[j] {
                used_g[i] = true;
                used_p[j] = true;
                sum += v;
            }
        }
        n += gt.len();
    }
    if n == 0 {
        1.0
    } else {
        sum / n as f64
    }
}

#[derive(Debug, Clone, Default)]
pub struct DatasetOptions {
    /// Writes `<id>.jsonl` and `<id>.mot.txt` here when set.
    pub out_dir: Option<PathBuf>,
    /// Per-sequence checkpoint directories are created under this root.
    pub checkpoint_root: Option<PathBuf>,
    pub resume: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub enum SequenceOutcome {
    Done {
        mode: ModeUsed,
        fell_back: bool,
        qa_frames: Vec<usize>,
        qa_score: f64,
        flagged: bool,
        document: AnnotationDocument,
    },
    Failed {
        reason: String,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceReport {
    pub sequence_id: String,
    pub outcome: SequenceOutcome,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DatasetReport {
    pub sequences: Vec<SequenceReport>,
    /// Sequences whose QA score fell below the threshold, for reprocessing.
    pub flagged: Vec<String>,
}

/// Annotates every sequence with bounded parallelism, writes outputs and
/// scores a stratified QA sample. A failing sequence is reported and the
/// rest still run.
pub fn run_dataset(dataset: &[DatasetSequence], cfg: &PipelineConfig, opts: &DatasetOptions) -> Result<DatasetReport> {
    if let Some(d) = &opts.out_dir {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.run.workers)
        .build()
        .map_err(|e| Error::config("run.workers", e.to_string()))?;
    let digest = cfg.digest();
    let sequences: Vec<SequenceReport> = pool.install(|| {
        dataset
            .par_iter()
            .map(|seq| {
                let outcome = match process_one(seq, cfg, opts, &digest) {
                    Ok(o) => o,
                    Err(e) => {
                        log::error!("sequence {} failed: {e}", seq.id);
                        SequenceOutcome::Failed { reason: e.to_string() }
                    }
                };
                SequenceReport { sequence_id: seq.id.clone(), outcome }
            })
            .collect()
    });
    let flagged = sequences
        .iter()
        .filter(|r| matches!(r.outcome, SequenceOutcome::Done { flagged: true, .. }))
        .map(|r| r.sequence_id.clone())
        .collect();
    Ok(DatasetReport { sequences, flagged })
}

fn process_one(seq: &DatasetSequence, cfg: &PipelineConfig, opts: &DatasetOptions, digest: &str) -> Result<SequenceOutcome> {
    let store = match &opts.checkpoint_root {
        Some(root) => Some(CheckpointStore::new(root.join(&seq.id), &seq.id)?),
        None => None,
    };
    let run_opts = RunOptions {
        checkpoints: store.as_ref(),
        resume: opts.resume,
        config_digest: digest,
        rng_seed: cfg.world.rng_seed,
        ..Default::default()
    };
    let res = annotate_sequence(seq, cfg, cfg.run.mode, run_opts)?;
    let (w, h) = seq.size();
    let document = AnnotationDocument::from_masklets(&seq.id, w, h, seq.num_frames(), &res.masklets);
    if let Some(d) = &opts.out_dir {
        write_outputs(&document, d)?;
    }
    let qa_frames = qa_sample(seq.num_frames(), cfg.deployment.qa_sample_fraction, cfg.deployment.qa_seed, &seq.id);
    let qa = qa_score(&res.masklets, &seq.frames, &qa_frames);
    let flagged = qa < cfg.deployment.tau_qa;
    if flagged {
        log::warn!("sequence {} QA score {qa:.3} below {}", seq.id, cfg.deployment.tau_qa);
    }
    Ok(SequenceOutcome::Done { mode: res.mode, fell_back: res.fell_back, qa_frames, qa_score: qa, flagged, document })
}

/// Writes `<dir>/<id>.jsonl` and `<dir>/<id>.mot.txt`.
pub fn write_outputs(doc: &AnnotationDocument, dir: &Path) -> Result<()> {
    let id = &doc.header.sequence_id;
    write_annotations(doc, &dir.join(format!("{id}.jsonl")))?;
    write_mot(&doc.to_mot(), &dir.join(format!("{id}.mot.txt")))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeployReport {
    pub representative: String,
    pub crowded_frame: usize,
    pub tuned: Optimized,
    pub representative_counts: MatchCounts,
    /// `(sequence id, counts, passed)`; `None` for a one-sequence dataset.
    pub validation: Option<(String, MatchCounts, bool)>,
    /// Absent when cross-validation failed.
    pub dataset: Option<DatasetReport>,
}

/// Selection, tuning, cross-validation, then the dataset run.
pub fn deploy(dataset: &[DatasetSequence], cfg: &PipelineConfig, opts: &DatasetOptions, seed: u64) -> Result<DeployReport> {
    let counts: Vec<Vec<usize>> = dataset.iter().map(|s| s.object_counts()).collect();
    let (rep_idx, frame) = select_representative(&counts).ok_or_else(|| Error::config("dataset", "no sequences"))?;
    let rep = &dataset[rep_idx];
    let tuned = optimize_parameters(
        rep.frames[frame].frame_ref(),
        &rep.gt_boxes(frame),
        &rep.detector(),
        &cfg.smart_od,
        &cfg.deployment.grid,
        cfg.deployment.alpha_weight,
    )?;
    log::info!("representative {} frame {frame}: J = {:.4}", rep.id, tuned.j);
    let rep_counts = rep.detection_counts(&tuned.config)?;
    let validation = if dataset.len() > 1 {
        let mut rng = rng_for(&[seed, 0x7661_6c69_6461_7465]);
        let mut k = rng.random_range(0..dataset.len() - 1);
        if k >= rep_idx {
            k += 1;
        }
        let val = &dataset[k];
        let vc = val.detection_counts(&tuned.config)?;
        Some((val.id.clone(), vc, cross_validate(&rep_counts, &vc, cfg.deployment.gamma)))
    } else {
        None
    };
    let passed = validation.as_ref().is_none_or(|v| v.2);
    let dataset_report = if passed {
        let mut tuned_cfg = cfg.clone();
        tuned_cfg.smart_od = tuned.config.clone();
        Some(run_dataset(dataset, &tuned_cfg, opts)?)
    } else {
        log::warn!("cross-validation failed; supply an alternate grid and rerun");
        None
    };
    Ok(DeployReport {
        representative: rep.id.clone(),
        crowded_frame: frame,
        tuned,
        representative_counts: rep_counts,
        validation,
        dataset: dataset_report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::{Detection, DetectorParams};
    use crate::error::BackendError;
    use proptest::prelude::*;

    #[test]
    fn representative_examples() {
        let a = vec![3, 12, 5];
        let b = vec![30, 2, 30];
        let c = vec![7];
        assert_eq!(select_representative(&[a.clone(), b, c]), Some((1, 0)));
        assert_eq!(select_representative(std::slice::from_ref(&a)), Some((0, 1)));
        assert_eq!(select_representative(&[vec![4, 4], vec![4]]), Some((0, 0)));
        assert_eq!(select_representative(&[]), None);
    }

    #[test]
    fn objective_hand_arithmetic() {
        // X: P 0.9, R 0.2; Y: P 0.5, R 0.6; alpha 0.7
        assert!((objective(0.7, 0.9, 0.2) - 0.41).abs() < 1e-12);
        assert!((objective(0.7, 0.5, 0.6) - 0.57).abs() < 1e-12);
    }

    #[test]
    fn cross_validation_examples() {
        let mk = |p: u64| MatchCounts { tp: p, fp: 10 - p, fn_: 10 - p };
        assert!(cross_validate(&mk(9), &mk(9), 0.9));
        assert!(!cross_validate(&mk(9), &mk(7), 0.9));
        assert!(cross_validate(&mk(9), &mk(1), 1e-9));
    }

    /// Returns a fixed list; which entries survive depends only on theta_c.
    struct Fixed(Vec<Detection>);
    impl Detector for Fixed {
        fn detect(&self, _: FrameRef, region: Option<&BBox>, p: &DetectorParams) -> std::result::Result<Vec<Detection>, BackendError> {
            Ok(self
                .0
                .iter()
                .filter(|d| d.confidence >= p.confidence)
                .filter(|d| region.is_none_or(|r| r.contains(&d.bbox)))
                .cloned()
                .collect())
        }
    }

    fn fixed_world() -> (FrameRef, Vec<BBox>, Fixed) {
        let b = |x: f64| BBox::new(x, 100.0, x + 40.0, 140.0).unwrap();
        let gt = vec![b(100.0), b(300.0)];
        let dets = vec![
            Detection::new(b(100.0), "obj", 0.9).unwrap(),
            Detection::new(b(300.0), "obj", 0.4).unwrap(),
            Detection::new(b(500.0), "obj", 0.35).unwrap(),
        ];
        (FrameRef { index: 0, width: 640, height: 480 }, gt, Fixed(dets))
    }

    #[test]
    fn single_point_grid_returns_it() {
        let (f, gt, det) = fixed_world();
        let grid = ParameterGrid { theta_c: vec![0.5], theta_v: vec![], theta_min: vec![], threshold_method: vec![] };
        let o = optimize_parameters(f, &gt, &det, &SmartOdConfig::default(), &grid, 0.5).unwrap();
        assert_eq!(o.config.theta_c, 0.5);
        assert_eq!(o.scores.len(), 1);
    }

    #[test]
    fn recall_only_weight_picks_max_recall() {
        let (f, gt, det) = fixed_world();
        let base = SmartOdConfig { threshold_method: ThresholdMethod::MeanStd, theta_min: 0.01, ..Default::default() };
        let grid = ParameterGrid { theta_c: vec![0.95, 0.5, 0.3], theta_v: vec![], theta_min: vec![], threshold_method: vec![] };
        let o = optimize_parameters(f, &gt, &det, &base, &grid, 1.0).unwrap();
        assert_eq!(o.counts.recall(), 1.0);
        for (c, s) in grid.expand(&base).iter().zip(&o.scores) {
            assert!(o.j >= *s, "{} beat the winner", c.theta_c);
        }
        // with precision weight only, the single sure detection wins
        let p = optimize_parameters(f, &gt, &det, &base, &grid, 0.0).unwrap();
        assert_eq!(p.counts.precision(), 1.0);
    }

    #[test]
    fn qa_sample_is_reproducible_and_stratified() {
        let a = qa_sample(200, 0.1, 7, "seq");
        assert_eq!(a, qa_sample(200, 0.1, 7, "seq"));
        assert_eq!(a.len(), 20);
        for (i, f) in a.iter().enumerate() {
            assert!((i * 10..(i + 1) * 10).contains(f));
        }
        assert_ne!(a, qa_sample(200, 0.1, 8, "seq"));
        assert_eq!(qa_sample(3, 0.01, 0, "x").len(), 1);
        assert!(qa_sample(0, 0.5, 0, "x").is_empty());
    }

    #[test]
    fn empty_dataset_gives_empty_report() {
        let r = run_dataset(&[], &PipelineConfig::default(), &DatasetOptions::default()).unwrap();
        assert_eq!(r, DatasetReport::default());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn representative_is_global_max(counts in prop::collection::vec(prop::collection::vec(0usize..20, 1..6), 1..6)) {
            let (s, f) = select_representative(&counts).unwrap();
            let best = counts.iter().flatten().copied().max().unwrap();
            prop_assert_eq!(counts[s][f], best);
            prop_assert!(counts[..s].iter().all(|c| c.iter().all(|&n| n < best)));
            prop_assert!(counts[s][..f].iter().all(|&n| n < best));
        }

        #[test]
        fn qa_sample_within_bounds(t in 1usize..500, frac in 0.001f64..1.0, seed in any::<u64>()) {
            let s = qa_sample(t, frac, seed, "p");
            prop_assert!(!s.is_empty() && s.len() <= t);
            prop_assert!(s.windows(2).all(|w| w[0] < w[1]));
            prop_assert!(s.iter().all(|&f| f < t));
        }
    }
}
