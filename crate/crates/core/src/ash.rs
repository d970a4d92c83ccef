//! Mask propagation of newly identified objects and the post-processing
//! passes over the resulting masklets: trailing-empty pruning, recursive
//! polygon smoothing and per-frame duplicate merging.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backends::{PropagationPrompt, Propagator};
use crate::error::{Error, Result};
use crate::geometry::{iou_polygon, mask_to_polygon, polygon_to_bbox, resample_polygon, BBox, BinaryMask, Point, Polygon};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AshConfig {
    pub beta: usize,
    pub alpha: f64,
    pub tau_merge: f64,
    pub epsilon_mask: u64,
    pub resample_n: usize,
    /// Scale the smoothing factor up with centroid speed.
    pub adaptive_smoothing: bool,
    /// Speed (px/frame) at which the adaptive factor doubles.
    pub adaptive_speed_scale: f64,
}

impl Default for AshConfig {
    fn default() -> Self {
        AshConfig {
            beta: 5,
            alpha: 0.2,
            tau_merge: 0.3,
            epsilon_mask: 3,
            resample_n: 64,
            adaptive_smoothing: false,
            adaptive_speed_scale: 5.0,
        }
    }
}

impl AshConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beta < 1 {
            return Err(Error::config("ash.beta", "must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::config("ash.alpha", "must be in [0, 1]"));
        }
        if !(self.tau_merge > 0.0 && self.tau_merge < 1.0) {
            return Err(Error::config("ash.tau_merge", "must be in (0, 1)"));
        }
        if self.epsilon_mask < 1 {
            return Err(Error::config("ash.epsilon_mask", "must be >= 1"));
        }
        if self.resample_n < 3 {
            return Err(Error::config("ash.resample_n", "must be >= 3"));
        }
        if !(self.adaptive_speed_scale > 0.0 && self.adaptive_speed_scale.is_finite()) {
            return Err(Error::config("ash.adaptive_speed_scale", "must be > 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskletEntry {
    pub mask: BinaryMask,
    /// Contour of the mask; `None` when the mask is below the content threshold.
    pub polygon: Option<Polygon>,
    pub bbox: Option<BBox>,
    pub confidence: f64,
}

impl MaskletEntry {
    pub fn from_mask(mask: BinaryMask, confidence: f64, epsilon_mask: u64) -> Self {
        let polygon = mask_to_polygon(&mask, epsilon_mask);
        let bbox = polygon.as_ref().map(polygon_to_bbox);
        MaskletEntry { mask, polygon, bbox, confidence }
    }
}

/// One object's masks over a span of frames.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Masklet {
    pub object_id: u64,
    pub class_label: String,
    pub entries: BTreeMap<usize, MaskletEntry>,
}

impl Masklet {
    pub fn first_frame(&self) -> Option<usize> {
        self.entries.keys().next().copied()
    }

    pub fn last_frame(&self) -> Option<usize> {
        self.entries.keys().next_back().copied()
    }

    /// Entry at `frame` with a nonempty mask.
    pub fn visible_at(&self, frame: usize) -> Option<&MaskletEntry> {
        self.entries.get(&frame).filter(|e| !e.mask.is_empty())
    }
}

/// Object handed to propagation at its initialization frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NewObject {
    pub object_id: u64,
    pub class_label: String,
    pub bbox: BBox,
    pub confidence: f64,
}

pub fn partition_batches<T: Clone>(items: &[T], beta: usize) -> Vec<Vec<T>> {
    items.chunks(beta.max(1)).map(|c| c.to_vec()).collect()
}

/// Propagates one batch from `start` through `end` inclusive.
pub fn propagate_batch(
    batch: &[NewObject],
    batch_index: usize,
    start: usize,
    end: usize,
    propagator: &dyn Propagator,
    cfg: &AshConfig,
) -> Result<Vec<Masklet>> {
    if start > end {
        return Err(Error::Misaligned(format!("propagation start {start} after end {end}")));
    }
    let prompts: Vec<PropagationPrompt> =
        batch.iter().map(|o| PropagationPrompt { object_id: o.object_id, bbox: o.bbox }).collect();
    let masks = propagator.propagate(&prompts, start, end).map_err(|source| Error::Propagation {
        batch: batch_index,
        frame: start,
        object_ids: batch.iter().map(|o| o.object_id).collect(),
        source,
    })?;
    if masks.len() != batch.len() || masks.iter().any(|m| m.len() != end - start + 1) {
        return Err(Error::Propagation {
            batch: batch_index,
            frame: start,
            object_ids: batch.iter().map(|o| o.object_id).collect(),
            source: crate::error::BackendError::new("propagator", "returned a malformed mask list"),
        });
    }
    Ok(batch
        .iter()
        .zip(masks)
        .map(|(o, per_frame)| Masklet {
            object_id: o.object_id,
            class_label: o.class_label.clone(),
            entries: per_frame
                .into_iter()
                .enumerate()
                .map(|(k, m)| (start + k, MaskletEntry::from_mask(m, o.confidence, cfg.epsilon_mask)))
                .collect(),
        })
        .collect())
}

/// Partitions `objects` into batches and propagates them concurrently.
/// Output order follows input order.
pub fn propagate_new_objects(
    objects: &[NewObject],
    start: usize,
    end: usize,
    propagator: &dyn Propagator,
    cfg: &AshConfig,
) -> Result<Vec<Masklet>> {
    let batches = partition_batches(objects, cfg.beta);
    let out: Vec<Vec<Masklet>> = batches
        .par_iter()
        .enumerate()
        .map(|(k, b)| propagate_batch(b, k, start, end, propagator, cfg))
        .collect::<Result<_>>()?;
    Ok(out.into_iter().flatten().collect())
}

/// Drops entries after the last frame whose mask holds more than
/// `epsilon_mask` pixels; returns `None` when no frame qualifies.
pub fn remove_trailing_empty(mut m: Masklet, epsilon_mask: u64) -> Option<Masklet> {
    let last = m.entries.iter().rev().find(|(_, e)| e.mask.count() > epsilon_mask).map(|(&f, _)| f)?;
    m.entries.retain(|&f, _| f <= last);
    Some(m)
}

fn centroid(p: &Polygon) -> Point {
    p.centroid()
}

/// Rotation of `prev` whose start vertex, after shifting `prev` onto the
/// centroid of `cur`, is nearest to the start vertex of `cur`.
fn align_to(prev: &Polygon, cur: &Polygon) -> Polygon {
    let (pc, cc) = (centroid(prev), centroid(cur));
    let target = Point { x: cur.vertices()[0].x - cc.x + pc.x, y: cur.vertices()[0].y - cc.y + pc.y };
    let k = prev
        .vertices()
        .iter()
        .enumerate()
        .min_by(|(i, a), (j, b)| a.dist(&target).total_cmp(&b.dist(&target)).then(i.cmp(j)))
        .map(|(i, _)| i)
        .unwrap_or(0);
    prev.rotate_start(k)
}

/// Recursive vertex-wise smoothing of consecutive frames' polygons. The
/// recursion restarts after any frame without a polygon. Boxes follow the
/// smoothed polygons; masks are left untouched.
pub fn smooth_polygons(mut m: Masklet, cfg: &AshConfig) -> Masklet {
    if cfg.alpha >= 1.0 && !cfg.adaptive_smoothing {
        return m;
    }
    let mut prev: Option<(usize, Polygon, Point)> = None;
    for (&f, e) in m.entries.iter_mut() {
        let Some(raw) = e.polygon.as_ref() else {
            prev = None;
            continue;
        };
        let Ok(cur) = resample_polygon(raw, cfg.resample_n) else {
            prev = None;
            continue;
        };
        let raw_centroid = centroid(raw);
        let smoothed = match &prev {
            Some((pf, p, pc)) if *pf + 1 == f => {
                let alpha = if cfg.adaptive_smoothing {
                    let speed = raw_centroid.dist(pc);
                    (cfg.alpha * (1.0 + speed / cfg.adaptive_speed_scale)).min(1.0)
                } else {
                    cfg.alpha
                };
                let aligned = align_to(p, &cur);
                let verts: Vec<Point> = cur
                    .vertices()
                    .iter()
                    .zip(aligned.vertices())
                    .map(|(c, q)| Point { x: alpha * c.x + (1.0 - alpha) * q.x, y: alpha * c.y + (1.0 - alpha) * q.y })
                    .collect();
                Polygon::new(verts).unwrap_or(cur)
            }
            _ => cur,
        };
        e.bbox = Some(polygon_to_bbox(&smoothed));
        e.polygon = Some(smoothed.clone());
        prev = Some((f, smoothed, raw_centroid));
    }
    m
}

fn find(parent: &mut [usize], i: usize) -> usize {
    let mut r = i;
    while parent[r] != r {
        r = parent[r];
    }
    let mut c = i;
    while parent[c] != r {
        let n = parent[c];
        parent[c] = r;
        c = n;
    }
    r
}

/// Merges entries at `frame` whose polygons overlap with IoU above
/// `tau_merge` into the lowest id of each overlapping group, repeating
/// until no pair exceeds the threshold. Masklets left empty are dropped.
/// `masklets` must be sorted by ascending id.
pub fn merge_redundant_frame(masklets: &mut Vec<Masklet>, frame: usize, cfg: &AshConfig) {
    loop {
        let present: Vec<usize> =
            (0..masklets.len()).filter(|&i| masklets[i].entries.get(&frame).is_some_and(|e| e.polygon.is_some())).collect();
        if present.len() < 2 {
            break;
        }
        let (w, h) = masklets[present[0]].entries[&frame].mask.dims();
        let mut parent: Vec<usize> = (0..present.len()).collect();
        let mut any = false;
        for a in 0..present.len() {
            for b in a + 1..present.len() {
                let ea = &masklets[present[a]].entries[&frame];
                let eb = &masklets[present[b]].entries[&frame];
                let iou = iou_polygon(ea.polygon.as_ref().unwrap(), eb.polygon.as_ref().unwrap(), w, h).unwrap_or(0.0);
                if iou > cfg.tau_merge {
                    any = true;
                    let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
                    if ra != rb {
                        parent[ra.max(rb)] = ra.min(rb);
                    }
                }
            }
        }
        if !any {
            break;
        }
        for k in 0..present.len() {
            let root = find(&mut parent, k);
            if root == k {
                continue;
            }
            let absorbed = masklets[present[k]].entries.remove(&frame).expect("present");
            let keep = masklets[present[root]].entries.get_mut(&frame).expect("present");
            let mask = keep.mask.union(&absorbed.mask).expect("frame masks share dimensions");
            let confidence = keep.confidence.max(absorbed.confidence);
            *keep = MaskletEntry::from_mask(mask, confidence, cfg.epsilon_mask);
        }
    }
    masklets.retain(|m| !m.entries.is_empty());
}

/// Pruning, smoothing and duplicate merging, in that order.
pub fn post_process(masklets: Vec<Masklet>, cfg: &AshConfig) -> Vec<Masklet> {
    let mut out: Vec<Masklet> = masklets
        .into_par_iter()
        .filter_map(|m| remove_trailing_empty(m, cfg.epsilon_mask))
        .map(|m| smooth_polygons(m, cfg))
        .collect();
    out.sort_by_key(|m| m.object_id);
    let frames: std::collections::BTreeSet<usize> = out.iter().flat_map(|m| m.entries.keys().copied()).collect();
    for f in frames {
        merge_redundant_frame(&mut out, f, cfg);
    }
    out
}

/// Propagates each frame's new objects through `end` and post-processes
/// the result.
pub fn run_ash(
    new_objects: &BTreeMap<usize, Vec<NewObject>>,
    end: usize,
    propagator: &dyn Propagator,
    cfg: &AshConfig,
) -> Result<Vec<Masklet>> {
    let mut all = Vec::new();
    for (&t, objs) in new_objects {
        if t > end {
            continue;
        }
        all.extend(propagate_new_objects(objs, t, end, propagator, cfg)?);
    }
    Ok(post_process(all, cfg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::{generate_synthetic_sequence, ObjectSpec, OraclePropagator, PropagationDegradation, SyntheticWorldConfig};
    use std::sync::Arc;

    fn square_mask(w: u32, h: u32, x: u32, y: u32, s: u32) -> BinaryMask {
        BinaryMask::from_fn(w, h, |px, py| px >= x && px < x + s && py >= y && py < y + s).unwrap()
    }

    fn masklet(id: u64, frames: &[(usize, BinaryMask)]) -> Masklet {
        Masklet {
            object_id: id,
            class_label: "obj".into(),
            entries: frames.iter().map(|(f, m)| (*f, MaskletEntry::from_mask(m.clone(), 0.8, 3))).collect(),
        }
    }

    #[test]
    fn batches() {
        let sizes = |n: usize| partition_batches(&vec![0; n], 5).iter().map(|b| b.len()).collect::<Vec<_>>();
        assert_eq!(sizes(12), vec![5, 5, 2]);
        assert_eq!(sizes(3), vec![3]);
        assert!(sizes(0).is_empty());
    }

    #[test]
    fn trailing_empty_examples() {
        let full = square_mask(20, 20, 2, 2, 4);
        let empty = BinaryMask::empty(20, 20).unwrap();
        let m = masklet(0, &(1..=10).map(|f| (f, if f <= 5 { full.clone() } else { empty.clone() })).collect::<Vec<_>>());
        let r = remove_trailing_empty(m, 3).unwrap();
        assert_eq!(r.first_frame(), Some(1));
        assert_eq!(r.last_frame(), Some(5));

        let m = masklet(0, &(1..=4).map(|f| (f, full.clone())).collect::<Vec<_>>());
        assert_eq!(remove_trailing_empty(m.clone(), 3), Some(m));

        let two = BinaryMask::from_fn(20, 20, |x, y| y == 0 && x < 2).unwrap();
        let mut frames: Vec<_> = (1..=6).map(|f| (f, full.clone())).collect();
        frames.push((7, two));
        let r = remove_trailing_empty(masklet(0, &frames), 3).unwrap();
        assert_eq!(r.last_frame(), Some(6));

        assert!(remove_trailing_empty(masklet(0, &[(0, empty)]), 3).is_none());
    }

    #[test]
    fn smoothing_examples() {
        let a = square_mask(64, 64, 10, 10, 20);
        let b = square_mask(64, 64, 20, 10, 20);
        let m = masklet(0, &[(0, a.clone()), (1, b.clone())]);
        let identity = smooth_polygons(m.clone(), &AshConfig { alpha: 1.0, ..Default::default() });
        assert_eq!(identity, m);

        let s = smooth_polygons(m, &AshConfig::default());
        let b0 = s.entries[&0].bbox.unwrap();
        let b1 = s.entries[&1].bbox.unwrap();
        assert_eq!(b0, BBox::new(10.0, 10.0, 30.0, 30.0).unwrap());
        assert!((b1.x1 - 12.0).abs() < 1e-9 && (b1.x2 - 32.0).abs() < 1e-9);
        assert_eq!(s.entries[&1].polygon.as_ref().unwrap().len(), 64);
        // masks are untouched
        assert_eq!(s.entries[&1].mask, b);

        let constant = masklet(0, &[(0, a.clone()), (1, a.clone()), (2, a.clone())]);
        let s = smooth_polygons(constant, &AshConfig::default());
        let p0 = s.entries[&0].polygon.clone().unwrap();
        for f in 1..3 {
            let p = s.entries[&f].polygon.as_ref().unwrap();
            for (u, v) in p.vertices().iter().zip(p0.vertices()) {
                assert!(u.dist(v) < 1e-9);
            }
        }
    }

    #[test]
    fn gap_restarts_smoothing() {
        let a = square_mask(64, 64, 10, 10, 20);
        let b = square_mask(64, 64, 20, 10, 20);
        let s = smooth_polygons(masklet(0, &[(0, a), (2, b)]), &AshConfig::default());
        assert_eq!(s.entries[&2].bbox.unwrap().x1, 20.0);
    }

    #[test]
    fn merge_examples() {
        let cfg = AshConfig::default();
        let a = square_mask(40, 40, 0, 0, 10);
        let near = square_mask(40, 40, 0, 0, 9);
        let mut ms = vec![masklet(3, &[(0, a.clone())]), masklet(7, &[(0, near)])];
        merge_redundant_frame(&mut ms, 0, &cfg);
        assert_eq!(ms.len(), 1);
        assert_eq!(ms[0].object_id, 3);
        assert_eq!(ms[0].entries[&0].mask, a);

        // 10x10 squares offset by 8: IoU 20 / 180
        let b = square_mask(40, 40, 8, 0, 10);
        let mut ms = vec![masklet(0, &[(0, a.clone())]), masklet(1, &[(0, b)])];
        merge_redundant_frame(&mut ms, 0, &cfg);
        assert_eq!(ms.len(), 2);

        // three squares offset by 2: pairwise IoU 80/120 and 60/140
        let ms3 = [0u32, 2, 4].map(|x| square_mask(40, 40, x, 0, 10));
        let mut ms: Vec<_> = ms3.iter().enumerate().map(|(i, m)| masklet(i as u64, &[(0, m.clone())])).collect();
        merge_redundant_frame(&mut ms, 0, &cfg);
        assert_eq!(ms.len(), 1);
        assert_eq!(ms[0].entries[&0].mask.count(), 140);
    }

    #[test]
    fn propagation_static_and_leaving() {
        let cfg = SyntheticWorldConfig {
            frame_width: 100,
            frame_height: 60,
            num_objects: 2,
            num_frames: 8,
            objects: vec![
                ObjectSpec { center: [30.0, 30.0], velocity: [0.0, 0.0], axes: [8.0, 6.0], class_label: "a".into() },
                ObjectSpec { center: [80.0, 30.0], velocity: [10.0, 0.0], axes: [6.0, 6.0], class_label: "b".into() },
            ],
            ..Default::default()
        };
        let gt = Arc::new(generate_synthetic_sequence(&cfg).unwrap());
        let prop = OraclePropagator::new(gt.clone(), PropagationDegradation::default());
        let objs: Vec<NewObject> = gt[0]
            .objects
            .iter()
            .map(|o| NewObject { object_id: o.id, class_label: o.class_label.clone(), bbox: o.bbox.unwrap(), confidence: 0.8 })
            .collect();
        let ms = propagate_new_objects(&objs, 0, 4, &prop, &AshConfig::default()).unwrap();
        assert_eq!(ms.len(), 2);
        assert_eq!(ms[0].entries.len(), 5);
        assert!(ms[0].entries.values().all(|e| e.mask == gt[0].objects[0].mask));
        // second object center reaches 100 at frame 2 and is gone by frame 3
        assert!(ms[1].entries[&3].mask.is_empty() && ms[1].entries[&4].mask.is_empty());
        let pruned = remove_trailing_empty(ms[1].clone(), 3).unwrap();
        assert!(pruned.last_frame().unwrap() <= 2);
    }

    #[test]
    fn duplicate_detection_collapses() {
        let cfg = SyntheticWorldConfig { num_frames: 6, num_objects: 3, separated: true, rng_seed: 5, ..Default::default() };
        let gt = Arc::new(generate_synthetic_sequence(&cfg).unwrap());
        let prop = OraclePropagator::new(gt.clone(), PropagationDegradation::default());
        let mut objs: Vec<NewObject> = gt[0]
            .objects
            .iter()
            .map(|o| NewObject { object_id: o.id, class_label: o.class_label.clone(), bbox: o.bbox.unwrap(), confidence: 0.8 })
            .collect();
        let mut dup = objs[1].clone();
        dup.object_id = 3;
        dup.bbox = dup.bbox.translate(1.0, 0.0);
        objs.push(dup);
        let out = run_ash(&BTreeMap::from([(0, objs)]), 5, &prop, &AshConfig::default()).unwrap();
        assert_eq!(out.iter().map(|m| m.object_id).collect::<Vec<_>>(), vec![0, 1, 2]);
        assert!(run_ash(&BTreeMap::new(), 5, &prop, &AshConfig::default()).unwrap().is_empty());
    }
}
