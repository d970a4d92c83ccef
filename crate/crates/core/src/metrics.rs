//! Tracking evaluation: per-frame matching, precision and recall, MOTA,
//! identity switches and IDF1.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;

use pathfinding::prelude::{kuhn_munkres, Matrix};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou_box, BBox};

/// One box with its identity in one frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackedBox {
    pub id: u64,
    pub bbox: BBox,
    #[serde(default)]
    pub class_label: Option<String>,
}

impl TrackedBox {
    pub fn new(id: u64, bbox: BBox) -> Self {
        TrackedBox { id, bbox, class_label: None }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FrameObjects {
    pub frame_index: usize,
    pub objects: Vec<TrackedBox>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct FrameMatch {
    /// `(prediction index, ground-truth index)` pairs.
    pub matches: Vec<(usize, usize)>,
    pub false_positives: Vec<usize>,
    pub false_negatives: Vec<usize>,
}

/// Greedy matching in descending IoU order; pairs need IoU at least
/// `iou_threshold`. Ties resolve to the lower prediction, then the lower
/// ground-truth index.
pub fn match_frame(pred: &[(u64, BBox)], gt: &[(u64, BBox)], iou_threshold: f64) -> FrameMatch {
    let mut pairs = Vec::new();
    for (i, (_, p)) in pred.iter().enumerate() {
        for (j, (_, g)) in gt.iter().enumerate() {
            let iou = iou_box(p, g);
            if iou >= iou_threshold && iou > 0.0 {
                pairs.push((iou, i, j));
            }
        }
    }
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut pu = vec![false; pred.len()];
    let mut gu = vec![false; gt.len()];
    let mut out = FrameMatch::default();
    for (_, i, j) in pairs {
        if !pu[i] && !gu[j] {
            pu[i] = true;
            gu[j] = true;
            out.matches.push((i, j));
        }
    }
    out.matches.sort_unstable();
    out.false_positives = (0..pred.len()).filter(|&i| !pu[i]).collect();
    out.false_negatives = (0..gt.len()).filter(|&j| !gu[j]).collect();
    out
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Scores {
    pub gt: u64,
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub idsw: u64,
    pub idtp: u64,
    pub precision: f64,
    pub recall: f64,
    pub mota: f64,
    pub idf1: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalReport {
    pub sequence: String,
    #[serde(flatten)]
    pub scores: Scores,
    pub per_class: BTreeMap<String, Scores>,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Maximum total weight of a one-to-one assignment between rows and
/// columns of `w` (non-negative weights).
pub fn max_assignment(w: &[Vec<u64>]) -> u64 {
    let rows = w.len();
    let cols = w.first().map_or(0, |r| r.len());
    if rows == 0 || cols == 0 {
        return 0;
    }
    let (small, large, get): (usize, usize, Box<dyn Fn(usize, usize) -> u64>) = if rows <= cols {
        (rows, cols, Box::new(|s, l| w[s][l]))
    } else {
        (cols, rows, Box::new(|s, l| w[l][s]))
    };
    if small <= 12 {
        // dp over subsets of the smaller side, scanning the larger side
        let full = 1usize << small;
        let mut dp = vec![0u64; full];
        for l in 0..large {
            for mask in (0..full).rev() {
                let base = dp[mask];
                for s in 0..small {
                    if mask & (1 << s) == 0 {
                        let v = base + get(s, l);
                        let m2 = mask | (1 << s);
                        if v > dp[m2] {
                            dp[m2] = v;
                        }
                    }
                }
            }
        }
        dp.into_iter().max().unwrap_or(0)
    } else {
        let m = Matrix::from_fn(small, large, |(s, l)| get(s, l) as i64);
        kuhn_munkres(&m).0.max(0) as u64
    }
}

fn score(pred: &[FrameObjects], gt: &[FrameObjects], thr: f64) -> Scores {
    let mut s = Scores::default();
    let mut last_match: BTreeMap<u64, u64> = BTreeMap::new();
    let gt_ids: Vec<u64> = gt.iter().flat_map(|f| f.objects.iter().map(|o| o.id)).collect::<BTreeSet<_>>().into_iter().collect();
    let pr_ids: Vec<u64> = pred.iter().flat_map(|f| f.objects.iter().map(|o| o.id)).collect::<BTreeSet<_>>().into_iter().collect();
    let gi: BTreeMap<u64, usize> = gt_ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
    let pi: BTreeMap<u64, usize> = pr_ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
    let mut overlap = vec![vec![0u64; pr_ids.len()]; gt_ids.len()];
    let mut n_pred = 0u64;
    for (pf, gf) in pred.iter().zip(gt) {
        let p: Vec<(u64, BBox)> = pf.objects.iter().map(|o| (o.id, o.bbox)).collect();
        let g: Vec<(u64, BBox)> = gf.objects.iter().map(|o| (o.id, o.bbox)).collect();
        n_pred += p.len() as u64;
        s.gt += g.len() as u64;
        let m = match_frame(&p, &g, thr);
        s.tp += m.matches.len() as u64;
        s.fp += m.false_positives.len() as u64;
        s.fn_ += m.false_negatives.len() as u64;
        for &(i, j) in &m.matches {
            let (gid, pid) = (g[j].0, p[i].0);
            if let Some(prev) = last_match.insert(gid, pid) {
                if prev != pid {
                    s.idsw += 1;
                }
            }
        }
        for (gid, gb) in &g {
            for (pid, pb) in &p {
                let iou = iou_box(gb, pb);
                if iou >= thr && iou > 0.0 {
                    overlap[gi[gid]][pi[pid]] += 1;
                }
            }
        }
    }
    s.idtp = max_assignment(&overlap);
    s.precision = ratio(s.tp, s.tp + s.fp);
    s.recall = ratio(s.tp, s.tp + s.fn_);
    let errors = (s.fp + s.fn_ + s.idsw) as f64;
    s.mota = 1.0 - errors / (s.gt.max(1)) as f64;
    s.idf1 = if s.gt + n_pred == 0 { 1.0 } else { 2.0 * s.idtp as f64 / (s.gt + n_pred) as f64 };
    s
}

fn check_aligned(pred: &[FrameObjects], gt: &[FrameObjects]) -> Result<()> {
    if pred.len() != gt.len() {
        return Err(Error::Misaligned(format!("{} prediction frames vs {} ground-truth frames", pred.len(), gt.len())));
    }
    for (p, g) in pred.iter().zip(gt) {
        if p.frame_index != g.frame_index {
            return Err(Error::Misaligned(format!("prediction frame {} paired with ground-truth frame {}", p.frame_index, g.frame_index)));
        }
    }
    Ok(())
}

fn filter_class(frames: &[FrameObjects], class: &str) -> Vec<FrameObjects> {
    frames
        .iter()
        .map(|f| FrameObjects {
            frame_index: f.frame_index,
            objects: f.objects.iter().filter(|o| o.class_label.as_deref() == Some(class)).cloned().collect(),
        })
        .collect()
}

/// Scores a predicted sequence against ground truth. Both sequences must
/// list the same frames in the same order.
pub fn evaluate(sequence: &str, pred: &[FrameObjects], gt: &[FrameObjects], iou_threshold: f64) -> Result<EvalReport> {
    check_aligned(pred, gt)?;
    let scores = score(pred, gt, iou_threshold);
    let classes: BTreeSet<String> =
        gt.iter().chain(pred).flat_map(|f| f.objects.iter().filter_map(|o| o.class_label.clone())).collect();
    let per_class = classes
        .into_iter()
        .map(|c| {
            let s = score(&filter_class(pred, &c), &filter_class(gt, &c), iou_threshold);
            (c, s)
        })
        .collect();
    Ok(EvalReport { sequence: sequence.to_string(), scores, per_class })
}

fn score_rows(prefix: &str, s: &Scores) -> Vec<(String, f64)> {
    [
        ("gt", s.gt as f64),
        ("tp", s.tp as f64),
        ("fp", s.fp as f64),
        ("fn", s.fn_ as f64),
        ("idsw", s.idsw as f64),
        ("idtp", s.idtp as f64),
        ("precision", s.precision),
        ("recall", s.recall),
        ("mota", s.mota),
        ("idf1", s.idf1),
    ]
    .into_iter()
    .map(|(k, v)| (format!("{prefix}{k}"), v))
    .collect()
}

impl EvalReport {
    /// Flat `(metric, value)` rows; per-class rows are prefixed `<class>.`.
    pub fn rows(&self) -> Vec<(String, f64)> {
        let mut rows = score_rows("", &self.scores);
        for (c, s) in &self.per_class {
            rows.extend(score_rows(&format!("{c}."), s));
        }
        rows
    }
}

/// Writes `sequence,metric,value` rows for each report.
pub fn write_reports_csv(reports: &[EvalReport], path: &Path) -> Result<()> {
    let mut out = Vec::new();
    writeln!(out, "sequence,metric,value").unwrap();
    for r in reports {
        for (k, v) in r.rows() {
            writeln!(out, "{},{},{:.6}", r.sequence, k, v).unwrap();
        }
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn write_reports_json(reports: &[EvalReport], path: &Path) -> Result<()> {
    let s = serde_json::to_string_pretty(reports).expect("reports serialize");
    std::fs::write(path, s + "\n").map_err(|e| Error::io(path, e))
}
