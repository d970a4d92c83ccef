//! Backend contracts for the three neural roles and a synthetic world that
//! implements all of them as seeded oracles.
//!
//! The synthetic world renders filled ellipses moving at constant velocity.
//! Its detector and propagator read the ground truth directly and add
//! configurable noise, so every downstream stage can be checked against
//! known answers.

use std::collections::BTreeSet;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{BackendError, Error, Result};
use crate::geometry::{iou_box, BBox, BinaryMask};
use crate::smart_od::nms;

/// One candidate object in one frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub class_label: String,
    pub confidence: f64,
}

impl Detection {
    pub fn new(bbox: BBox, class_label: impl Into<String>, confidence: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&confidence) {
            return Err(Error::Geometry(format!("confidence {confidence} outside [0, 1]")));
        }
        if !bbox.is_valid() {
            return Err(Error::Geometry("detection box is invalid".into()));
        }
        Ok(Detection { bbox, class_label: class_label.into(), confidence })
    }
}

/// Minimal frame handle passed to backends.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FrameRef {
    pub index: usize,
    pub width: u32,
    pub height: u32,
}

/// Detector-side thresholds (confidence cut and internal NMS IoU).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectorParams {
    pub confidence: f64,
    pub nms_iou: f64,
}

/// Open-vocabulary detector. `region` restricts detection to a sub-window
/// of the frame (used for sliced re-verification).
pub trait Detector: Sync {
    fn detect(
        &self,
        frame: FrameRef,
        region: Option<&BBox>,
        params: &DetectorParams,
    ) -> std::result::Result<Vec<Detection>, BackendError>;
}

/// Automatic mask generator settings (stability score threshold and offset,
/// box NMS threshold).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskGeneratorParams {
    pub stability_score_thresh: f64,
    pub stability_score_offset: f64,
    pub box_nms_thresh: f64,
}

impl Default for MaskGeneratorParams {
    fn default() -> Self {
        MaskGeneratorParams { stability_score_thresh: 0.90, stability_score_offset: 0.7, box_nms_thresh: 0.7 }
    }
}

/// Class-agnostic instance mask generator. No pipeline stage depends on it
/// yet; it exists so a real segmentation model can be attached.
pub trait MaskGenerator: Sync {
    fn generate(
        &self,
        frame: FrameRef,
        params: &MaskGeneratorParams,
    ) -> std::result::Result<Vec<BinaryMask>, BackendError>;
}

/// Initial object handed to the propagator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropagationPrompt {
    pub object_id: u64,
    pub bbox: BBox,
}

/// Memory-based mask propagator: given prompts at `start_frame`, returns one
/// mask per prompt for every frame in `start_frame..=end_frame`.
pub trait Propagator: Sync {
    fn propagate(
        &self,
        prompts: &[PropagationPrompt],
        start_frame: usize,
        end_frame: usize,
    ) -> std::result::Result<Vec<Vec<BinaryMask>>, BackendError>;
}

/// Explicit object in a synthetic world.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectSpec {
    /// Center at frame 0.
    pub center: [f64; 2],
    /// Pixels per frame.
    pub velocity: [f64; 2],
    /// Ellipse semi-axes.
    pub axes: [f64; 2],
    #[serde(default = "default_class")]
    pub class_label: String,
}

fn default_class() -> String {
    "person".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticWorldConfig {
    pub frame_width: u32,
    pub frame_height: u32,
    pub num_objects: usize,
    pub num_frames: usize,
    /// Upper bound on randomly drawn speeds, px/frame.
    pub max_speed: f64,
    /// Range for randomly drawn ellipse semi-axes, px.
    pub min_axis: f64,
    pub max_axis: f64,
    pub rng_seed: u64,
    pub occlusion_enabled: bool,
    /// Resample random trajectories until no two objects ever touch and every
    /// object stays fully inside the frame.
    pub separated: bool,
    pub class_labels: Vec<String>,
    /// Explicit objects; when non-empty these replace random generation and
    /// `num_objects` must equal their count.
    pub objects: Vec<ObjectSpec>,
}

impl Default for SyntheticWorldConfig {
    fn default() -> Self {
        SyntheticWorldConfig {
            frame_width: 640,
            frame_height: 480,
            num_objects: 8,
            num_frames: 200,
            max_speed: 1.0,
            min_axis: 12.0,
            max_axis: 24.0,
            rng_seed: 0,
            occlusion_enabled: true,
            separated: false,
            class_labels: vec![default_class()],
            objects: Vec::new(),
        }
    }
}

impl SyntheticWorldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frame_width == 0 || self.frame_height == 0 {
            return Err(Error::config("world.frame_width", "frame dimensions must be >= 1"));
        }
        if self.num_objects == 0 {
            return Err(Error::config("world.num_objects", "must be >= 1"));
        }
        if self.num_frames == 0 {
            return Err(Error::config("world.num_frames", "must be >= 1"));
        }
        if !(self.min_axis >= 1.0 && self.min_axis <= self.max_axis) {
            return Err(Error::config("world.min_axis", "need 1 <= min_axis <= max_axis"));
        }
        if !(self.max_speed >= 0.0 && self.max_speed.is_finite()) {
            return Err(Error::config("world.max_speed", "must be finite and >= 0"));
        }
        if self.class_labels.is_empty() {
            return Err(Error::config("world.class_labels", "need at least one label"));
        }
        let (w, h) = (self.frame_width as f64, self.frame_height as f64);
        if self.objects.is_empty() && 2.0 * self.max_axis > w.min(h) {
            return Err(Error::config("world.max_axis", "objects must fit inside the frame"));
        }
        if !self.objects.is_empty() {
            if self.objects.len() != self.num_objects {
                return Err(Error::config("world.objects", "count must equal num_objects"));
            }
            for (i, o) in self.objects.iter().enumerate() {
                let [cx, cy] = o.center;
                let [a, b] = o.axes;
                if !(a > 0.0 && b > 0.0) || cx - a < 0.0 || cy - b < 0.0 || cx + a > w || cy + b > h {
                    return Err(Error::config(format!("world.objects[{i}]"), "object must fit inside the frame at t = 0"));
                }
            }
        }
        Ok(())
    }

    /// Objects of the world, drawing random ones when none are given.
    pub fn resolve_objects(&self) -> Result<Vec<ObjectSpec>> {
        self.validate()?;
        if !self.objects.is_empty() {
            return Ok(self.objects.clone());
        }
        let mut rng = rng_for(&[self.rng_seed, 0x5eed_0b1e]);
        let (w, h) = (self.frame_width as f64, self.frame_height as f64);
        let last = (self.num_frames - 1) as f64;
        let mut out: Vec<ObjectSpec> = Vec::with_capacity(self.num_objects);
        for i in 0..self.num_objects {
            let mut attempts = 0;
            let spec = loop {
                attempts += 1;
                if attempts > 20_000 {
                    return Err(Error::config(
                        "world.separated",
                        format!("could not place object {i} without contact; use a larger frame or fewer objects"),
                    ));
                }
                let a = rng.random_range(self.min_axis..=self.max_axis);
                let b = rng.random_range(self.min_axis..=self.max_axis);
                let cx = rng.random_range(a..=w - a);
                let cy = rng.random_range(b..=h - b);
                let angle = rng.random_range(0.0..std::f64::consts::TAU);
                let speed = rng.random_range(0.0..=self.max_speed);
                let spec = ObjectSpec {
                    center: [cx, cy],
                    velocity: [speed * angle.cos(), speed * angle.sin()],
                    axes: [a, b],
                    class_label: self.class_labels[i % self.class_labels.len()].clone(),
                };
                if !self.separated {
                    break spec;
                }
                let end = [cx + spec.velocity[0] * last, cy + spec.velocity[1] * last];
                let inside = end[0] - a >= 1.0 && end[0] + a <= w - 1.0 && end[1] - b >= 1.0 && end[1] + b <= h - 1.0
                    && cx - a >= 1.0 && cx + a <= w - 1.0 && cy - b >= 1.0 && cy + b <= h - 1.0;
                if inside && out.iter().all(|o| min_center_distance(o, &spec, last) > radius(o) + radius(&spec) + 3.0) {
                    break spec;
                }
            };
            out.push(spec);
        }
        Ok(out)
    }
}

fn radius(o: &ObjectSpec) -> f64 {
    o.axes[0].max(o.axes[1])
}

/// Minimum distance between two linearly moving centers over `[0, last]`.
fn min_center_distance(a: &ObjectSpec, b: &ObjectSpec, last: f64) -> f64 {
    let d0 = [a.center[0] - b.center[0], a.center[1] - b.center[1]];
    let dv = [a.velocity[0] - b.velocity[0], a.velocity[1] - b.velocity[1]];
    let vv = dv[0] * dv[0] + dv[1] * dv[1];
    let t = if vv > 0.0 { (-(d0[0] * dv[0] + d0[1] * dv[1]) / vv).clamp(0.0, last) } else { 0.0 };
    (d0[0] + dv[0] * t).hypot(d0[1] + dv[1] * t)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthObject {
    pub id: u64,
    pub class_label: String,
    /// Visible (unoccluded, in-frame) part of the object.
    pub mask: BinaryMask,
    /// Tight box of `mask`; `None` when nothing is visible.
    pub bbox: Option<BBox>,
    /// Visible pixel count over the full unclipped ellipse pixel count.
    pub visibility: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthFrame {
    pub frame_index: usize,
    pub width: u32,
    pub height: u32,
    pub objects: Vec<GroundTruthObject>,
}

impl GroundTruthFrame {
    pub fn frame_ref(&self) -> FrameRef {
        FrameRef { index: self.frame_index, width: self.width, height: self.height }
    }

    pub fn visible_objects(&self) -> impl Iterator<Item = &GroundTruthObject> {
        self.objects.iter().filter(|o| o.visibility > 0.0 && o.bbox.is_some())
    }
}

fn ellipse_full_count(cx: f64, cy: f64, a: f64, b: f64) -> u64 {
    let (x0, x1) = ((cx - a).floor() as i64 - 1, (cx + a).ceil() as i64 + 1);
    let (y0, y1) = ((cy - b).floor() as i64 - 1, (cy + b).ceil() as i64 + 1);
    let mut n = 0;
    for y in y0..=y1 {
        for x in x0..=x1 {
            if in_ellipse(x as f64, y as f64, cx, cy, a, b) {
                n += 1;
            }
        }
    }
    n
}

#[inline]
fn in_ellipse(x: f64, y: f64, cx: f64, cy: f64, a: f64, b: f64) -> bool {
    let dx = (x + 0.5 - cx) / a;
    let dy = (y + 0.5 - cy) / b;
    dx * dx + dy * dy <= 1.0
}

fn rasterize_ellipse(width: u32, height: u32, cx: f64, cy: f64, a: f64, b: f64) -> BinaryMask {
    let x0 = (cx - a).floor().max(0.0).min(width as f64) as u32;
    let y0 = (cy - b).floor().max(0.0).min(height as f64) as u32;
    let x1 = ((cx + a).ceil() + 1.0).max(0.0).min(width as f64) as u32;
    let y1 = ((cy + b).ceil() + 1.0).max(0.0).min(height as f64) as u32;
    BinaryMask::from_region(width, height, x0, y0, x1.saturating_sub(x0), y1.saturating_sub(y0), |x, y| {
        in_ellipse(x as f64, y as f64, cx, cy, a, b)
    })
}

/// Renders the ground truth of a synthetic world. Deterministic given the
/// configuration (including its seed). Objects may leave the frame; masks
/// are clipped to it. With occlusion enabled, higher ids are drawn on top.
pub fn generate_synthetic_sequence(cfg: &SyntheticWorldConfig) -> Result<Vec<GroundTruthFrame>> {
    let objects = cfg.resolve_objects()?;
    let (w, h) = (cfg.frame_width, cfg.frame_height);
    let mut frames = Vec::with_capacity(cfg.num_frames);
    for t in 0..cfg.num_frames {
        let tf = t as f64;
        let full: Vec<(BinaryMask, u64)> = objects
            .iter()
            .map(|o| {
                let cx = o.center[0] + o.velocity[0] * tf;
                let cy = o.center[1] + o.velocity[1] * tf;
                (rasterize_ellipse(w, h, cx, cy, o.axes[0], o.axes[1]), ellipse_full_count(cx, cy, o.axes[0], o.axes[1]))
            })
            .collect();
        let mut out = Vec::with_capacity(objects.len());
        for (i, o) in objects.iter().enumerate() {
            let mut mask = full[i].0.clone();
            if cfg.occlusion_enabled {
                for (occluder, _) in &full[i + 1..] {
                    if !mask.is_empty() && !occluder.is_empty() {
                        mask = mask.difference(occluder)?;
                    }
                }
            }
            let visibility = if full[i].1 == 0 { 0.0 } else { mask.count() as f64 / full[i].1 as f64 };
            out.push(GroundTruthObject {
                id: i as u64,
                class_label: o.class_label.clone(),
                bbox: mask.tight_bbox(),
                mask,
                visibility,
            });
        }
        frames.push(GroundTruthFrame { frame_index: t, width: w, height: h, objects: out });
    }
    Ok(frames)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectionNoise {
    pub miss_rate: f64,
    /// Expected false positives per full frame.
    pub fp_rate: f64,
    pub jitter_sigma: f64,
    pub tp_confidence_range: [f64; 2],
    pub fp_confidence_range: [f64; 2],
    /// Side length range of false-positive boxes, px.
    pub fp_size_range: [f64; 2],
    pub fp_class_label: String,
    pub rng_seed: u64,
}

impl Default for DetectionNoise {
    fn default() -> Self {
        DetectionNoise {
            miss_rate: 0.0,
            fp_rate: 0.0,
            jitter_sigma: 0.0,
            tp_confidence_range: [0.6, 0.95],
            fp_confidence_range: [0.0, 0.3],
            fp_size_range: [20.0, 60.0],
            fp_class_label: default_class(),
            rng_seed: 0,
        }
    }
}

impl DetectionNoise {
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn is_noiseless(&self) -> bool {
        self.miss_rate == 0.0 && self.fp_rate == 0.0 && self.jitter_sigma == 0.0
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.miss_rate) {
            return Err(Error::config("noise.miss_rate", "must be in [0, 1]"));
        }
        if !(self.fp_rate >= 0.0 && self.fp_rate.is_finite()) {
            return Err(Error::config("noise.fp_rate", "must be finite and >= 0"));
        }
        if !(self.jitter_sigma >= 0.0 && self.jitter_sigma.is_finite()) {
            return Err(Error::config("noise.jitter_sigma", "must be finite and >= 0"));
        }
        for (name, [lo, hi]) in
            [("noise.tp_confidence_range", self.tp_confidence_range), ("noise.fp_confidence_range", self.fp_confidence_range)]
        {
            if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
                return Err(Error::config(name, "need 0 <= lo <= hi <= 1"));
            }
        }
        let [lo, hi] = self.fp_size_range;
        if !(1.0 <= lo && lo <= hi) {
            return Err(Error::config("noise.fp_size_range", "need 1 <= lo <= hi"));
        }
        Ok(())
    }
}

/// Deterministic RNG keyed by a tuple of integers.
pub(crate) fn rng_for(parts: &[u64]) -> ChaCha8Rng {
    let mut h = 0x9e37_79b9_7f4a_7c15u64;
    for &p in parts {
        h = splitmix(h ^ p);
    }
    ChaCha8Rng::seed_from_u64(h)
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn uniform(rng: &mut ChaCha8Rng, [lo, hi]: [f64; 2]) -> f64 {
    if hi > lo {
        rng.random_range(lo..=hi)
    } else {
        lo
    }
}

fn region_key(region: Option<&BBox>) -> u64 {
    region.map_or(u64::MAX, |r| {
        splitmix(r.x1.to_bits() ^ splitmix(r.y1.to_bits() ^ splitmix(r.x2.to_bits() ^ splitmix(r.y2.to_bits()))))
    })
}

/// Noisy detection straight from ground truth over the full frame.
pub fn oracle_detect(gt: &GroundTruthFrame, noise: &DetectionNoise) -> Vec<Detection> {
    oracle_detect_region(gt, noise, None)
}

/// Noisy detection restricted to `region`. True positives are the visible
/// objects whose (jittered) box overlaps the region by at least 10% of its
/// area, clipped to the region; false positives are Poisson with a rate
/// scaled by the region's share of the frame. Deterministic per
/// `(seed, frame, region)`.
pub fn oracle_detect_region(gt: &GroundTruthFrame, noise: &DetectionNoise, region: Option<&BBox>) -> Vec<Detection> {
    let frame_box = BBox { x1: 0.0, y1: 0.0, x2: gt.width as f64, y2: gt.height as f64 };
    let area = region.and_then(|r| r.intersection(&frame_box)).unwrap_or(frame_box);
    let mut rng = rng_for(&[noise.rng_seed, gt.frame_index as u64, region_key(region)]);
    let noiseless = noise.is_noiseless();
    let jitter = (noise.jitter_sigma > 0.0).then(|| Normal::new(0.0, noise.jitter_sigma).unwrap());
    let mut out = Vec::new();
    for obj in gt.visible_objects() {
        let missed = rng.random::<f64>() < noise.miss_rate;
        let mut b = obj.bbox.expect("visible objects have boxes");
        if let Some(j) = &jitter {
            let mut c = [b.x1, b.y1, b.x2, b.y2];
            for v in &mut c {
                *v += j.sample(&mut rng);
            }
            b = BBox { x1: c[0].min(c[2]), y1: c[1].min(c[3]), x2: c[0].max(c[2]), y2: c[1].max(c[3]) };
            b = b.intersection(&frame_box).unwrap_or(BBox { x1: 0.0, y1: 0.0, x2: 0.0, y2: 0.0 });
        }
        let confidence = if noiseless {
            0.5 * (noise.tp_confidence_range[0] + noise.tp_confidence_range[1])
        } else {
            uniform(&mut rng, noise.tp_confidence_range)
        };
        if missed || b.area() <= 0.0 {
            continue;
        }
        if region.is_some() {
            match b.intersection(&area) {
                Some(clip) if clip.area() >= 0.1 * b.area() => b = clip,
                _ => continue,
            }
        }
        out.push(Detection { bbox: b, class_label: obj.class_label.clone(), confidence });
    }
    if noise.fp_rate > 0.0 {
        let rate = noise.fp_rate * area.area() / frame_box.area();
        let count = if rate > 0.0 { Poisson::new(rate).unwrap().sample(&mut rng) as usize } else { 0 };
        for _ in 0..count {
            let w = uniform(&mut rng, noise.fp_size_range).min(area.width());
            let h = uniform(&mut rng, noise.fp_size_range).min(area.height());
            let x = uniform(&mut rng, [area.x1, area.x2 - w]);
            let y = uniform(&mut rng, [area.y1, area.y2 - h]);
            let confidence = uniform(&mut rng, noise.fp_confidence_range);
            out.push(Detection {
                bbox: BBox { x1: x, y1: y, x2: x + w, y2: y + h },
                class_label: noise.fp_class_label.clone(),
                confidence,
            });
        }
    }
    out
}

/// Synthetic detector over a rendered sequence.
#[derive(Debug, Clone)]
pub struct OracleDetector {
    frames: Arc<Vec<GroundTruthFrame>>,
    noise: DetectionNoise,
}

impl OracleDetector {
    pub fn new(frames: Arc<Vec<GroundTruthFrame>>, noise: DetectionNoise) -> Self {
        OracleDetector { frames, noise }
    }
}

impl Detector for OracleDetector {
    fn detect(
        &self,
        frame: FrameRef,
        region: Option<&BBox>,
        params: &DetectorParams,
    ) -> std::result::Result<Vec<Detection>, BackendError> {
        let gt = self
            .frames
            .get(frame.index)
            .ok_or_else(|| BackendError::new("oracle-detector", format!("frame {} out of range", frame.index)))?;
        let mut dets = oracle_detect_region(gt, &self.noise, region);
        dets.retain(|d| d.confidence >= params.confidence);
        Ok(nms(dets, params.nms_iou))
    }
}

/// Returns the ground-truth visible masks as generated instances.
#[derive(Debug, Clone)]
pub struct OracleMaskGenerator {
    frames: Arc<Vec<GroundTruthFrame>>,
}

impl OracleMaskGenerator {
    pub fn new(frames: Arc<Vec<GroundTruthFrame>>) -> Self {
        OracleMaskGenerator { frames }
    }
}

impl MaskGenerator for OracleMaskGenerator {
    fn generate(
        &self,
        frame: FrameRef,
        _params: &MaskGeneratorParams,
    ) -> std::result::Result<Vec<BinaryMask>, BackendError> {
        let gt = self
            .frames
            .get(frame.index)
            .ok_or_else(|| BackendError::new("oracle-mask-generator", format!("frame {} out of range", frame.index)))?;
        Ok(gt.visible_objects().map(|o| o.mask.clone()).collect())
    }
}

/// Degradation applied by the oracle propagator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PropagationDegradation {
    /// Cumulative drift, px per frame since the start frame.
    pub drift: [f64; 2],
    /// Probability that a frame's mask is dropped.
    pub dropout: f64,
    pub rng_seed: u64,
}

impl Default for PropagationDegradation {
    fn default() -> Self {
        PropagationDegradation { drift: [0.0, 0.0], dropout: 0.0, rng_seed: 0 }
    }
}

impl PropagationDegradation {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.dropout) {
            return Err(Error::config("propagation.dropout", "must be in [0, 1]"));
        }
        if !self.drift.iter().all(|d| d.is_finite()) {
            return Err(Error::config("propagation.drift", "must be finite"));
        }
        Ok(())
    }
}

/// Minimum box IoU for the oracle propagator to lock onto an object.
pub const PROPAGATION_MATCH_IOU: f64 = 0.3;

/// Propagates the ground-truth object best matching `object_box` at
/// `start_frame` through `frames`. Returns all-empty masks when no object
/// overlaps the prompt with IoU above [`PROPAGATION_MATCH_IOU`].
pub fn oracle_propagate(
    object_box: &BBox,
    start_frame: usize,
    frames: std::ops::RangeInclusive<usize>,
    gt: &[GroundTruthFrame],
    degradation: &PropagationDegradation,
) -> Vec<BinaryMask> {
    let Some(first) = gt.first() else { return Vec::new() };
    let (w, h) = (first.width, first.height);
    let target = gt.get(start_frame).and_then(|f| {
        let mut best: Option<(u64, f64)> = None;
        for o in f.visible_objects() {
            let iou = iou_box(object_box, o.bbox.as_ref().unwrap());
            if iou > PROPAGATION_MATCH_IOU && best.is_none_or(|(_, b)| iou > b) {
                best = Some((o.id, iou));
            }
        }
        best.map(|(id, _)| id)
    });
    let mut rng = rng_for(&[degradation.rng_seed, start_frame as u64, region_key(Some(object_box))]);
    frames
        .map(|f| {
            let dropped = degradation.dropout > 0.0 && rng.random::<f64>() < degradation.dropout;
            let mask = target.and_then(|id| gt.get(f).and_then(|fr| fr.objects.iter().find(|o| o.id == id)));
            match mask {
                Some(o) if !dropped => {
                    let k = f.saturating_sub(start_frame) as f64;
                    let dx = (degradation.drift[0] * k).round() as i64;
                    let dy = (degradation.drift[1] * k).round() as i64;
                    if dx == 0 && dy == 0 {
                        o.mask.clone()
                    } else {
                        o.mask.translate(dx, dy)
                    }
                }
                _ => BinaryMask::empty(w, h).expect("frame dims are valid"),
            }
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct OraclePropagator {
    frames: Arc<Vec<GroundTruthFrame>>,
    degradation: PropagationDegradation,
}

impl OraclePropagator {
    pub fn new(frames: Arc<Vec<GroundTruthFrame>>, degradation: PropagationDegradation) -> Self {
        OraclePropagator { frames, degradation }
    }
}

impl Propagator for OraclePropagator {
    fn propagate(
        &self,
        prompts: &[PropagationPrompt],
        start_frame: usize,
        end_frame: usize,
    ) -> std::result::Result<Vec<Vec<BinaryMask>>, BackendError> {
        if start_frame > end_frame || end_frame >= self.frames.len() {
            return Err(BackendError::new(
                "oracle-propagator",
                format!("invalid frame range {start_frame}..={end_frame} for {} frames", self.frames.len()),
            ));
        }
        Ok(prompts
            .iter()
            .map(|p| oracle_propagate(&p.bbox, start_frame, start_frame..=end_frame, &self.frames, &self.degradation))
            .collect())
    }
}

/// Wraps a propagator and fails any request that covers one of the given
/// frames with a span longer than `max_span` frames, mimicking a memory
/// ceiling hit on long propagation windows.
#[derive(Debug, Clone)]
pub struct FaultyPropagator<P> {
    inner: P,
    fail_frames: BTreeSet<usize>,
    max_span: usize,
}

impl<P: Propagator> FaultyPropagator<P> {
    pub fn new(inner: P, fail_frames: impl IntoIterator<Item = usize>, max_span: usize) -> Self {
        FaultyPropagator { inner, fail_frames: fail_frames.into_iter().collect(), max_span }
    }
}

impl<P: Propagator> Propagator for FaultyPropagator<P> {
    fn propagate(
        &self,
        prompts: &[PropagationPrompt],
        start_frame: usize,
        end_frame: usize,
    ) -> std::result::Result<Vec<Vec<BinaryMask>>, BackendError> {
        let span = end_frame.saturating_sub(start_frame) + 1;
        if span > self.max_span {
            if let Some(f) = self.fail_frames.range(start_frame..=end_frame).next() {
                return Err(BackendError::new(
                    "injected-fault",
                    format!("propagation window {start_frame}..={end_frame} ({span} frames) exhausted resources at frame {f}"),
                ));
            }
        }
        self.inner.propagate(prompts, start_frame, end_frame)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::match_frame;

    fn one_static() -> SyntheticWorldConfig {
        SyntheticWorldConfig {
            frame_width: 64,
            frame_height: 48,
            num_objects: 1,
            num_frames: 5,
            objects: vec![ObjectSpec { center: [30.0, 20.0], velocity: [0.0, 0.0], axes: [8.0, 6.0], class_label: "person".into() }],
            ..Default::default()
        }
    }

    #[test]
    fn static_object_has_identical_masks() {
        let frames = generate_synthetic_sequence(&one_static()).unwrap();
        assert_eq!(frames.len(), 5);
        for f in &frames {
            assert_eq!(f.objects[0].mask, frames[0].objects[0].mask);
            assert_eq!(f.objects[0].visibility, 1.0);
            assert_eq!(f.objects[0].bbox, f.objects[0].mask.tight_bbox());
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = SyntheticWorldConfig { num_frames: 10, rng_seed: 42, ..Default::default() };
        assert_eq!(generate_synthetic_sequence(&cfg).unwrap(), generate_synthetic_sequence(&cfg).unwrap());
    }

    #[test]
    fn crossing_objects_occlude() {
        // two circles of radius 6 crossing at frame 5, the second drawn on top
        let cfg = SyntheticWorldConfig {
            frame_width: 80,
            frame_height: 40,
            num_objects: 2,
            num_frames: 11,
            occlusion_enabled: true,
            objects: vec![
                ObjectSpec { center: [20.0, 20.0], velocity: [2.0, 0.0], axes: [6.0, 6.0], class_label: "a".into() },
                ObjectSpec { center: [50.0, 20.0], velocity: [-2.0, 0.0], axes: [6.0, 6.0], class_label: "b".into() },
            ],
            ..Default::default()
        };
        let frames = generate_synthetic_sequence(&cfg).unwrap();
        let f = &frames[5];
        // at frame 5 the centers are 30 and 40 apart by 10 px: lens overlap
        let lower = &f.objects[0];
        let upper = &f.objects[1];
        assert_eq!(upper.visibility, 1.0);
        assert!(lower.visibility < 1.0);
        assert_eq!(lower.mask.intersection_count(&upper.mask).unwrap(), 0);
        // independently count the lens: pixels inside both circles
        let full_lower = rasterize_ellipse(80, 40, 30.0, 20.0, 6.0, 6.0);
        let full_upper = rasterize_ellipse(80, 40, 40.0, 20.0, 6.0, 6.0);
        let lens = (0..40u32)
            .flat_map(|y| (0..80u32).map(move |x| (x, y)))
            .filter(|&(x, y)| {
                let d1 = (x as f64 + 0.5 - 30.0).powi(2) + (y as f64 + 0.5 - 20.0).powi(2);
                let d2 = (x as f64 + 0.5 - 40.0).powi(2) + (y as f64 + 0.5 - 20.0).powi(2);
                d1 <= 36.0 && d2 <= 36.0
            })
            .count() as u64;
        assert!(lens > 0);
        assert_eq!(lower.mask.count(), full_lower.count() - lens);
        assert_eq!(full_upper.count(), upper.mask.count());
        assert!((lower.visibility - (full_lower.count() - lens) as f64 / full_lower.count() as f64).abs() < 1e-12);
    }

    #[test]
    fn zero_noise_detects_ground_truth_exactly() {
        let cfg = SyntheticWorldConfig { num_frames: 3, rng_seed: 3, ..Default::default() };
        let frames = generate_synthetic_sequence(&cfg).unwrap();
        let noise = DetectionNoise::zero();
        for f in &frames {
            let dets = oracle_detect(f, &noise);
            let gt: Vec<BBox> = f.visible_objects().map(|o| o.bbox.unwrap()).collect();
            assert_eq!(dets.iter().map(|d| d.bbox).collect::<Vec<_>>(), gt);
            assert!(dets.iter().all(|d| (d.confidence - 0.775).abs() < 1e-12));
            let pred: Vec<(u64, BBox)> = dets.iter().enumerate().map(|(i, d)| (i as u64, d.bbox)).collect();
            let truth: Vec<(u64, BBox)> = gt.iter().enumerate().map(|(i, b)| (i as u64, *b)).collect();
            let m = match_frame(&pred, &truth, 0.5);
            assert_eq!((m.false_positives.len(), m.false_negatives.len()), (0, 0));
        }
    }

    #[test]
    fn full_miss_rate_emits_only_false_positives() {
        let cfg = SyntheticWorldConfig { num_frames: 4, ..Default::default() };
        let frames = generate_synthetic_sequence(&cfg).unwrap();
        let noise = DetectionNoise { miss_rate: 1.0, fp_rate: 3.0, fp_class_label: "fp".into(), ..Default::default() };
        let n: usize = frames
            .iter()
            .map(|f| {
                let d = oracle_detect(f, &noise);
                assert!(d.iter().all(|d| d.class_label == "fp" && d.confidence <= 0.3));
                d.len()
            })
            .sum();
        assert!(n > 0);
    }

    #[test]
    fn false_positive_count_matches_poisson_rate() {
        let cfg = SyntheticWorldConfig { frame_width: 64, frame_height: 64, num_objects: 1, num_frames: 1000, max_speed: 0.0, min_axis: 4.0, max_axis: 6.0, ..Default::default() };
        let frames = generate_synthetic_sequence(&cfg).unwrap();
        let noise = DetectionNoise { miss_rate: 1.0, fp_rate: 2.0, fp_size_range: [4.0, 10.0], rng_seed: 11, ..Default::default() };
        let total: usize = frames.iter().map(|f| oracle_detect(f, &noise).len()).sum();
        // Poisson(2) per frame over 1000 frames: mean 2000, sd sqrt(2000)
        let sd = 2000f64.sqrt();
        assert!(((total as f64) - 2000.0).abs() < 3.0 * sd, "total {total}");
    }

    #[test]
    fn propagate_examples() {
        let frames = generate_synthetic_sequence(&one_static()).unwrap();
        let gt_box = frames[0].objects[0].bbox.unwrap();
        let masks = oracle_propagate(&gt_box, 0, 0..=4, &frames, &PropagationDegradation::default());
        assert!(masks.iter().all(|m| *m == frames[0].objects[0].mask));

        let bg = BBox::new(0.0, 0.0, 5.0, 5.0).unwrap();
        let empty = oracle_propagate(&bg, 0, 0..=4, &frames, &PropagationDegradation::default());
        assert!(empty.iter().all(|m| m.is_empty()));

        let cfg = SyntheticWorldConfig {
            frame_width: 100,
            frame_height: 60,
            num_frames: 11,
            objects: vec![ObjectSpec { center: [30.0, 30.0], velocity: [0.0, 0.0], axes: [8.0, 6.0], class_label: "person".into() }],
            num_objects: 1,
            ..Default::default()
        };
        let frames = generate_synthetic_sequence(&cfg).unwrap();
        let deg = PropagationDegradation { drift: [1.0, 0.0], ..Default::default() };
        let masks = oracle_propagate(&frames[0].objects[0].bbox.unwrap(), 0, 0..=10, &frames, &deg);
        let last = masks[10].tight_bbox().unwrap();
        let truth = frames[10].objects[0].bbox.unwrap();
        assert_eq!(last.x1 - truth.x1, 10.0);
        assert_eq!(masks[10], frames[10].objects[0].mask.translate(10, 0));
    }

    #[test]
    fn faulty_propagator_fails_only_long_windows() {
        let frames = Arc::new(generate_synthetic_sequence(&one_static()).unwrap());
        let p = FaultyPropagator::new(OraclePropagator::new(frames.clone(), Default::default()), [3], 2);
        let prompt = [PropagationPrompt { object_id: 0, bbox: frames[0].objects[0].bbox.unwrap() }];
        assert!(p.propagate(&prompt, 0, 4).is_err());
        assert!(p.propagate(&prompt, 3, 4).is_ok());
        assert!(p.propagate(&prompt, 0, 2).is_ok());
    }
}
