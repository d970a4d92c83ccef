//! Detection verification: area filtering, proximity clustering into regions
//! of interest, per-frame dynamic confidence thresholds and sliced
//! re-detection of each region.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backends::{Detection, Detector, DetectorParams, FrameRef};
use crate::error::{Error, Result};
use crate::geometry::{iou_box, BBox};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdMethod {
    MeanStd,
    Kmeans,
    KmeansMeanStd,
    DoubleKmeans,
}

impl ThresholdMethod {
    pub const ALL: [ThresholdMethod; 4] =
        [ThresholdMethod::MeanStd, ThresholdMethod::Kmeans, ThresholdMethod::KmeansMeanStd, ThresholdMethod::DoubleKmeans];
}

impl std::str::FromStr for ThresholdMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean_std" => Ok(Self::MeanStd),
            "kmeans" => Ok(Self::Kmeans),
            "kmeans_mean_std" => Ok(Self::KmeansMeanStd),
            "double_kmeans" => Ok(Self::DoubleKmeans),
            _ => Err(Error::config("smart_od.threshold_method", format!("unknown method `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SmartOdConfig {
    pub theta_c: f64,
    pub theta_i: f64,
    pub theta_n: f64,
    pub theta_v: f64,
    pub theta_min_area: f64,
    pub theta_max_area: f64,
    pub epsilon_dbscan: f64,
    pub mu_dbscan: usize,
    pub theta_min: f64,
    pub threshold_method: ThresholdMethod,
    pub slice_size: f64,
    pub slice_overlap: f64,
}

impl Default for SmartOdConfig {
    fn default() -> Self {
        SmartOdConfig {
            theta_c: 0.001,
            theta_i: 0.1,
            theta_n: 0.1,
            theta_v: 0.03,
            theta_min_area: 0.0008,
            theta_max_area: 0.20,
            epsilon_dbscan: 100.0,
            mu_dbscan: 1,
            theta_min: 0.1,
            threshold_method: ThresholdMethod::KmeansMeanStd,
            slice_size: 256.0,
            slice_overlap: 0.2,
        }
    }
}

impl SmartOdConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::config(format!("smart_od.{name}"), "must be in [0, 1]"))
            }
        };
        unit("theta_c", self.theta_c)?;
        unit("theta_i", self.theta_i)?;
        unit("theta_n", self.theta_n)?;
        unit("theta_v", self.theta_v)?;
        unit("theta_min", self.theta_min)?;
        if !(0.0 <= self.theta_min_area && self.theta_min_area < self.theta_max_area && self.theta_max_area <= 1.0) {
            return Err(Error::config("smart_od.theta_min_area", "need 0 <= theta_min_area < theta_max_area <= 1"));
        }
        if !(self.epsilon_dbscan > 0.0 && self.epsilon_dbscan.is_finite()) {
            return Err(Error::config("smart_od.epsilon_dbscan", "must be > 0"));
        }
        if self.mu_dbscan < 1 {
            return Err(Error::config("smart_od.mu_dbscan", "must be >= 1"));
        }
        if !(self.slice_size >= 1.0 && self.slice_size.is_finite()) {
            return Err(Error::config("smart_od.slice_size", "must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.slice_overlap) {
            return Err(Error::config("smart_od.slice_overlap", "must be in [0, 1)"));
        }
        Ok(())
    }

    pub fn detector_params(&self) -> DetectorParams {
        DetectorParams { confidence: self.theta_c, nms_iou: self.theta_i }
    }
}

/// Region of interest built from one cluster of detections.
#[derive(Debug, Clone, PartialEq)]
pub struct Roi {
    pub bbox: BBox,
    /// Indices into the clustered detection list, ascending.
    pub members: Vec<usize>,
}

/// Keeps detections whose area share of the frame lies strictly inside
/// `(theta_min_area, theta_max_area)`.
pub fn filter_area_ratio(dets: &[Detection], frame_area: f64, cfg: &SmartOdConfig) -> Vec<Detection> {
    dets.iter()
        .filter(|d| {
            let r = d.bbox.area() / frame_area;
            cfg.theta_min_area < r && r < cfg.theta_max_area
        })
        .cloned()
        .collect()
}

/// DBSCAN over box centers. Noise points (possible only when
/// `mu_dbscan > 1`) belong to no region.
pub fn cluster_and_build_rois(dets: &[Detection], cfg: &SmartOdConfig) -> Vec<Roi> {
    let n = dets.len();
    let centers: Vec<_> = dets.iter().map(|d| d.bbox.center()).collect();
    let eps = cfg.epsilon_dbscan;
    let neighbors: Vec<Vec<usize>> =
        (0..n).map(|i| (0..n).filter(|&j| (centers[i].0 - centers[j].0).hypot(centers[i].1 - centers[j].1) <= eps).collect()).collect();
    let core: Vec<bool> = neighbors.iter().map(|nb| nb.len() >= cfg.mu_dbscan).collect();
    let mut label: Vec<Option<usize>> = vec![None; n];
    let mut clusters: Vec<Vec<usize>> = Vec::new();
    for i in 0..n {
        if label[i].is_some() || !core[i] {
            continue;
        }
        let c = clusters.len();
        let mut members = vec![i];
        label[i] = Some(c);
        let mut stack = vec![i];
        while let Some(p) = stack.pop() {
            if !core[p] {
                continue;
            }
            for &q in &neighbors[p] {
                if label[q].is_none() {
                    label[q] = Some(c);
                    members.push(q);
                    stack.push(q);
                }
            }
        }
        members.sort_unstable();
        clusters.push(members);
    }
    clusters
        .into_iter()
        .map(|members| {
            let bbox = BBox::envelope(members.iter().map(|&i| &dets[i].bbox)).expect("cluster is nonempty");
            Roi { bbox, members }
        })
        .collect()
}

/// Exact 1-D k-means on ascending `sorted` values: returns the `k` cluster
/// boundaries as half-open index ranges. Ties between equal-cost partitions
/// resolve to the earliest split points.
pub fn kmeans_1d(sorted: &[f64], k: usize) -> Vec<std::ops::Range<usize>> {
    let n = sorted.len();
    assert!(k >= 1 && k <= n, "need 1 <= k <= n");
    // cost[i][j]: within-cluster sum of squares of sorted[i..j]
    let mut cost = vec![vec![0.0f64; n + 1]; n + 1];
    for j in 1..=n {
        let (mut cnt, mut mean, mut m2) = (0.0f64, 0.0f64, 0.0f64);
        for i in (0..j).rev() {
            let x = sorted[i];
            cnt += 1.0;
            let delta = x - mean;
            mean += delta / cnt;
            m2 += delta * (x - mean);
            cost[i][j] = m2;
        }
    }
    let inf = f64::INFINITY;
    // best[m][j]: optimal cost of sorted[..j] in m clusters
    let mut best = vec![vec![inf; n + 1]; k + 1];
    let mut split = vec![vec![0usize; n + 1]; k + 1];
    best[0][0] = 0.0;
    for m in 1..=k {
        for j in m..=n {
            for i in (m - 1)..j {
                let c = best[m - 1][i] + cost[i][j];
                if c < best[m][j] {
                    best[m][j] = c;
                    split[m][j] = i;
                }
            }
        }
    }
    let mut ranges = Vec::with_capacity(k);
    let mut j = n;
    for m in (1..=k).rev() {
        let i = split[m][j];
        ranges.push(i..j);
        j = i;
    }
    ranges.reverse();
    ranges
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Spread below which a score set is treated as constant.
pub const CONSTANT_SCORE_SPREAD: f64 = 1e-12;

/// Per-frame confidence threshold, already floored at `theta_min` and
/// capped at 1. Returns `theta_min` for empty or constant score sets.
pub fn dynamic_threshold(scores: &[f64], method: ThresholdMethod, theta_min: f64) -> f64 {
    if scores.is_empty() {
        return theta_min.clamp(0.0, 1.0);
    }
    let mut s = scores.to_vec();
    s.sort_by(f64::total_cmp);
    if s[s.len() - 1] - s[0] <= CONSTANT_SCORE_SPREAD {
        return theta_min.clamp(0.0, 1.0);
    }
    let needed = match method {
        ThresholdMethod::MeanStd => 1,
        ThresholdMethod::Kmeans | ThresholdMethod::KmeansMeanStd => 3,
        ThresholdMethod::DoubleKmeans => 2,
    };
    let method = if s.len() < needed {
        log::debug!("{} scores are fewer than {needed} clusters; using mean_std", s.len());
        ThresholdMethod::MeanStd
    } else {
        method
    };
    let theta_d = match method {
        ThresholdMethod::MeanStd => {
            let (m, sd) = mean_std(&s);
            m - sd
        }
        ThresholdMethod::Kmeans => {
            let r = kmeans_1d(&s, 3);
            s[r[1].start]
        }
        ThresholdMethod::KmeansMeanStd => {
            let r = kmeans_1d(&s, 3);
            let (m, sd) = mean_std(&s[r[0].clone()]);
            m + 2.0 * sd
        }
        ThresholdMethod::DoubleKmeans => {
            let r = kmeans_1d(&s, 2);
            let lower = &s[r[0].clone()];
            if lower.len() < 2 {
                lower[lower.len() - 1]
            } else {
                let rr = kmeans_1d(lower, 2);
                lower[rr[0].end - 1]
            }
        }
    };
    theta_d.max(theta_min).clamp(0.0, 1.0)
}

/// Overlapping tiles of side `size` covering `region`; regions no larger
/// than a tile yield the region itself. The last tile in each axis is
/// aligned to the region's far edge.
pub fn slice_grid(region: &BBox, size: f64, overlap: f64) -> Vec<BBox> {
    fn starts(lo: f64, hi: f64, size: f64, overlap: f64) -> Vec<(f64, f64)> {
        if hi - lo <= size {
            return vec![(lo, hi)];
        }
        let step = (size * (1.0 - overlap)).max(1.0);
        let mut out = Vec::new();
        let mut s = lo;
        while s + size < hi {
            out.push((s, s + size));
            s += step;
        }
        out.push((hi - size, hi));
        out
    }
    let xs = starts(region.x1, region.x2, size, overlap);
    let ys = starts(region.y1, region.y2, size, overlap);
    ys.iter().flat_map(|&(y1, y2)| xs.iter().map(move |&(x1, x2)| BBox { x1, y1, x2, y2 })).collect()
}

/// Class-agnostic non-maximum suppression: keeps detections in descending
/// confidence (ties by input order), dropping any whose IoU with a kept
/// one exceeds `iou_thresh`.
pub fn nms(mut dets: Vec<Detection>, iou_thresh: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].confidence.total_cmp(&dets[a].confidence).then(a.cmp(&b)));
    let mut keep: Vec<usize> = Vec::new();
    for i in order {
        if keep.iter().all(|&k| iou_box(&dets[k].bbox, &dets[i].bbox) <= iou_thresh) {
            keep.push(i);
        }
    }
    let mut taken: Vec<Option<Detection>> = dets.drain(..).map(Some).collect();
    keep.into_iter().map(|i| taken[i].take().unwrap()).collect()
}

/// Predictions from re-running the detector over the tiles of `roi`,
/// merged by NMS at `theta_n`.
pub fn sliced_predictions(
    detector: &dyn Detector,
    frame: FrameRef,
    roi: &BBox,
    cfg: &SmartOdConfig,
) -> Result<Vec<Detection>> {
    let params = cfg.detector_params();
    let mut all = Vec::new();
    for tile in slice_grid(roi, cfg.slice_size, cfg.slice_overlap) {
        all.extend(detector.detect(frame, Some(&tile), &params)?);
    }
    Ok(nms(all, cfg.theta_n))
}

/// Indices of `candidates` passing both checks: best IoU with a sliced
/// prediction above `theta_v` and confidence above `theta_final`.
pub fn verify_roi(candidates: &[Detection], sliced: &[Detection], theta_final: f64, cfg: &SmartOdConfig) -> Vec<usize> {
    candidates
        .iter()
        .enumerate()
        .filter(|(_, d)| {
            let best = sliced.iter().map(|p| iou_box(&d.bbox, &p.bbox)).fold(0.0, f64::max);
            best > cfg.theta_v && d.confidence > theta_final
        })
        .map(|(i, _)| i)
        .collect()
}

/// Outcome of verifying one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct VerifiedFrame {
    pub detections: Vec<Detection>,
    pub threshold: f64,
    pub roi_count: usize,
    pub candidate_count: usize,
}

/// Detect, filter by area, cluster, threshold and verify one frame.
/// Accepted detections keep their original confidences and order.
pub fn run_smart_od(frame: FrameRef, detector: &dyn Detector, cfg: &SmartOdConfig) -> Result<VerifiedFrame> {
    let raw = detector.detect(frame, None, &cfg.detector_params())?;
    let frame_area = frame.width as f64 * frame.height as f64;
    let dets = filter_area_ratio(&raw, frame_area, cfg);
    let rois = cluster_and_build_rois(&dets, cfg);
    let scores: Vec<f64> = dets.iter().map(|d| d.confidence).collect();
    let threshold = dynamic_threshold(&scores, cfg.threshold_method, cfg.theta_min);
    let per_roi: Vec<Vec<usize>> = rois
        .par_iter()
        .map(|roi| {
            let sliced = sliced_predictions(detector, frame, &roi.bbox, cfg)?;
            let members: Vec<Detection> = roi.members.iter().map(|&i| dets[i].clone()).collect();
            Ok(verify_roi(&members, &sliced, threshold, cfg).into_iter().map(|k| roi.members[k]).collect())
        })
        .collect::<Result<_>>()?;
    let mut accepted: Vec<usize> = per_roi.into_iter().flatten().collect();
    accepted.sort_unstable();
    Ok(VerifiedFrame {
        detections: accepted.into_iter().map(|i| dets[i].clone()).collect(),
        threshold,
        roi_count: rois.len(),
        candidate_count: dets.len(),
    })
}

/// Detector output after the area filter only; the comparison point for
/// measuring what verification removes.
pub fn run_unverified(frame: FrameRef, detector: &dyn Detector, cfg: &SmartOdConfig) -> Result<Vec<Detection>> {
    let raw = detector.detect(frame, None, &cfg.detector_params())?;
    Ok(filter_area_ratio(&raw, frame.width as f64 * frame.height as f64, cfg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn det(x1: f64, y1: f64, x2: f64, y2: f64, c: f64) -> Detection {
        Detection { bbox: BBox::new(x1, y1, x2, y2).unwrap(), class_label: "obj".into(), confidence: c }
    }

    #[test]
    fn area_filter_examples() {
        let cfg = SmartOdConfig::default();
        let area = 1920.0 * 1080.0;
        // 800 px^2 -> 0.000386
        let small = det(0.0, 0.0, 40.0, 20.0, 0.9);
        // 25% of the frame
        let big = det(0.0, 0.0, 960.0, 540.0, 0.9);
        // 5%
        let mid = det(0.0, 0.0, 480.0, 216.0, 0.9);
        let kept = filter_area_ratio(&[small, big, mid.clone()], area, &cfg);
        assert_eq!(kept, vec![mid]);
    }

    #[test]
    fn clustering_examples() {
        let cfg = SmartOdConfig::default();
        assert!(cluster_and_build_rois(&[], &cfg).is_empty());
        let a = det(0.0, 0.0, 20.0, 20.0, 0.5);
        let b = det(50.0, 0.0, 70.0, 20.0, 0.5);
        let rois = cluster_and_build_rois(&[a.clone(), b], &cfg);
        assert_eq!(rois.len(), 1);
        assert_eq!(rois[0].bbox, BBox::new(0.0, 0.0, 70.0, 20.0).unwrap());
        assert_eq!(rois[0].members, vec![0, 1]);
        let far = det(500.0, 0.0, 520.0, 20.0, 0.5);
        let rois = cluster_and_build_rois(&[a, far], &cfg);
        assert_eq!(rois.len(), 2);
        assert!(rois.iter().all(|r| r.members.len() == 1));
    }

    #[test]
    fn chained_points_join_one_cluster() {
        let cfg = SmartOdConfig::default();
        let d: Vec<_> = (0..4).map(|i| det(i as f64 * 90.0, 0.0, i as f64 * 90.0 + 10.0, 10.0, 0.5)).collect();
        assert_eq!(cluster_and_build_rois(&d, &cfg).len(), 1);
        let strict = SmartOdConfig { mu_dbscan: 3, ..cfg };
        // ends have two neighbours (self + one), middles three: ends are border points
        let rois = cluster_and_build_rois(&d, &strict);
        assert_eq!(rois.len(), 1);
        assert_eq!(rois[0].members, vec![0, 1, 2, 3]);
    }

    #[test]
    fn threshold_examples() {
        assert_abs_diff_eq!(
            dynamic_threshold(&[0.2, 0.4, 0.6, 0.8], ThresholdMethod::MeanStd, 0.1),
            0.5 - 0.05f64.sqrt(),
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(dynamic_threshold(&[0.2, 0.4, 0.6, 0.8], ThresholdMethod::MeanStd, 0.1), 0.2764, epsilon = 1e-4);
        assert_eq!(dynamic_threshold(&[0.05, 0.05], ThresholdMethod::MeanStd, 0.1), 0.1);
        assert_eq!(dynamic_threshold(&[0.01, 0.05], ThresholdMethod::MeanStd, 0.1), 0.1);
        assert_eq!(dynamic_threshold(&[0.1, 0.11, 0.5, 0.52, 0.9, 0.91], ThresholdMethod::Kmeans, 0.0), 0.5);
        let r = kmeans_1d(&[0.1, 0.11, 0.5, 0.52, 0.9, 0.91], 3);
        assert_eq!(r, vec![0..2, 2..4, 4..6]);
    }

    #[test]
    fn threshold_other_methods_by_hand() {
        let s = [0.1, 0.11, 0.5, 0.52, 0.9, 0.91];
        // lowest cluster {0.1, 0.11}: mean 0.105, sd 0.005
        assert_abs_diff_eq!(dynamic_threshold(&s, ThresholdMethod::KmeansMeanStd, 0.0), 0.115, epsilon = 1e-12);
        // 2-split: {0.1,0.11} | rest (SSE 0.15635 vs 0.16435 for the 4|2 split); then {0.1} | {0.11}
        assert_eq!(dynamic_threshold(&s, ThresholdMethod::DoubleKmeans, 0.0), 0.1);
        // lower half with a clear inner gap: {0.1,0.12,0.4,0.42} | {0.9,0.92}, then {0.1,0.12} | {0.4,0.42}
        let s2 = [0.1, 0.12, 0.4, 0.42, 0.9, 0.92];
        assert_eq!(dynamic_threshold(&s2, ThresholdMethod::DoubleKmeans, 0.0), 0.12);
        // fewer scores than clusters falls back to mean_std
        assert_abs_diff_eq!(dynamic_threshold(&[0.4, 0.8], ThresholdMethod::Kmeans, 0.0), 0.4, epsilon = 1e-12);
    }

    #[test]
    fn verify_examples() {
        let cfg = SmartOdConfig::default();
        let d = det(0.0, 0.0, 10.0, 10.0, 0.9);
        let p = det(5.0, 0.0, 15.0, 10.0, 0.8);
        let half = det(0.0, 0.0, 10.0, 5.0, 0.8);
        assert_eq!(verify_roi(std::slice::from_ref(&d), std::slice::from_ref(&half), 0.3, &cfg), vec![0]);
        let low = det(0.0, 0.0, 10.0, 10.0, 0.2);
        assert!(verify_roi(&[low], &[half], 0.3, &cfg).is_empty());
        let far = det(100.0, 100.0, 110.0, 110.0, 0.8);
        assert!(verify_roi(std::slice::from_ref(&d), &[far], 0.3, &cfg).is_empty());
        assert_eq!(verify_roi(&[d], &[p], 0.3, &cfg), vec![0]);
    }

    #[test]
    fn slice_grid_covers_region() {
        let r = BBox::new(10.0, 20.0, 610.0, 220.0).unwrap();
        let tiles = slice_grid(&r, 256.0, 0.2);
        assert!(tiles.iter().all(|t| r.contains(t)));
        assert_eq!(tiles.iter().map(|t| t.x1).fold(f64::MAX, f64::min), 10.0);
        assert_eq!(tiles.iter().map(|t| t.x2).fold(f64::MIN, f64::max), 610.0);
        assert!(tiles.iter().all(|t| t.y1 == 20.0 && t.y2 == 220.0));
        let small = BBox::new(0.0, 0.0, 50.0, 50.0).unwrap();
        assert_eq!(slice_grid(&small, 256.0, 0.2), vec![small]);
    }

    #[test]
    fn nms_keeps_highest() {
        let out = nms(vec![det(0.0, 0.0, 10.0, 10.0, 0.5), det(1.0, 0.0, 11.0, 10.0, 0.9), det(50.0, 0.0, 60.0, 10.0, 0.1)], 0.1);
        assert_eq!(out.iter().map(|d| d.confidence).collect::<Vec<_>>(), vec![0.9, 0.1]);
    }

    proptest! {
        #[test]
        fn threshold_within_bounds(scores in prop::collection::vec(0.0f64..=1.0, 1..20), tmin in 0.0f64..=1.0, m in 0usize..4) {
            let t = dynamic_threshold(&scores, ThresholdMethod::ALL[m], tmin);
            prop_assert!(t >= tmin && t <= 1.0);
        }
    }
}
