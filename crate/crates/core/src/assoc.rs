//! Online association of per-frame detections to persistent track ids.

use serde::{Deserialize, Serialize};

use crate::backends::Detection;
use crate::error::{Error, Result};
use crate::geometry::{iou_box, BBox};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AssocConfig {
    pub tau_track_det: f64,
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub margin: f64,
    pub aspect_range: [f64; 2],
    pub track_buffer: usize,
    /// Carried for compatibility with tracker configs; does not gate detections.
    pub track_thresh: f64,
    /// Carried for compatibility with tracker configs; matching uses `tau_track_det`.
    pub match_thresh: f64,
}

impl Default for AssocConfig {
    fn default() -> Self {
        AssocConfig {
            tau_track_det: 0.5,
            lambda_min: 10.0,
            lambda_max: 1000.0,
            margin: 0.5,
            aspect_range: [0.2, 5.0],
            track_buffer: 20,
            track_thresh: 0.6,
            match_thresh: 0.7,
        }
    }
}

impl AssocConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_track_det > 0.0 && self.tau_track_det <= 1.0) {
            return Err(Error::config("assoc.tau_track_det", "must be in (0, 1]"));
        }
        if !(0.0 <= self.lambda_min && self.lambda_min < self.lambda_max) {
            return Err(Error::config("assoc.lambda_min", "need 0 <= lambda_min < lambda_max"));
        }
        if !(self.margin >= 0.0 && self.margin.is_finite()) {
            return Err(Error::config("assoc.margin", "must be finite and >= 0"));
        }
        let [lo, hi] = self.aspect_range;
        if !(0.0 < lo && lo <= hi && hi.is_finite()) {
            return Err(Error::config("assoc.aspect_range", "need 0 < lo <= hi"));
        }
        for (name, v) in [("assoc.track_thresh", self.track_thresh), ("assoc.match_thresh", self.match_thresh)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(name, "must be in [0, 1]"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoxVerdict {
    Accept,
    /// A side lies outside `[lambda_min, lambda_max]`.
    Size,
    /// The box leaves the frame interior shrunk by `margin`.
    Bounds,
    /// Width over height lies outside `aspect_range`.
    Aspect,
}

pub fn validate_box(b: &BBox, frame_w: f64, frame_h: f64, cfg: &AssocConfig) -> BoxVerdict {
    let (w, h) = (b.width(), b.height());
    let side_ok = |s: f64| cfg.lambda_min <= s && s <= cfg.lambda_max;
    if !side_ok(w) || !side_ok(h) {
        return BoxVerdict::Size;
    }
    let m = cfg.margin;
    if b.x1 < m || b.y1 < m || b.x2 > frame_w - m || b.y2 > frame_h - m {
        return BoxVerdict::Bounds;
    }
    let aspect = w / h;
    if aspect < cfg.aspect_range[0] || aspect > cfg.aspect_range[1] {
        return BoxVerdict::Aspect;
    }
    BoxVerdict::Accept
}

pub const RESCALE_LO: f64 = 0.7;
pub const RESCALE_HI: f64 = 0.95;

/// Affine map of `[min, max]` of the scores onto `[lo, hi]`; a constant
/// input maps to the midpoint.
pub fn rescale_confidence(scores: &[f64], lo: f64, hi: f64) -> Vec<f64> {
    let min = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(max > min) {
        return vec![0.5 * (lo + hi); scores.len()];
    }
    scores.iter().map(|s| (lo + (s - min) / (max - min) * (hi - lo)).clamp(lo, hi)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Track {
    pub id: u64,
    pub last_box: BBox,
    pub last_seen_frame: usize,
    pub class_label: String,
    /// Frames since the last match or observation.
    pub age: usize,
}

/// Result of associating one frame.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FrameAssociation {
    /// `(detection index, track id)` for detections matched to live tracks.
    pub matches: Vec<(usize, u64)>,
    /// `(detection index, fresh id)` for unmatched detections, in detection order.
    pub new_objects: Vec<(usize, u64)>,
}

/// Track store with a strictly increasing id counter.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Associator {
    tracks: Vec<Track>,
    next_id: u64,
    last_frame: Option<usize>,
}

impl Associator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn tracks(&self) -> &[Track] {
        &self.tracks
    }

    pub fn next_id(&self) -> u64 {
        self.next_id
    }

    /// Keeps fresh ids at or above `n` (ids below are reserved for injection).
    pub fn reserve_ids(&mut self, n: u64) {
        self.next_id = self.next_id.max(n);
    }

    /// Adds a track with a caller-chosen id (objects carried across a chunk
    /// boundary). Later fresh ids stay above it.
    pub fn inject(&mut self, id: u64, bbox: BBox, class_label: &str, frame: usize) {
        self.tracks.retain(|t| t.id != id);
        self.tracks.push(Track { id, last_box: bbox, last_seen_frame: frame, class_label: class_label.to_string(), age: 0 });
        self.tracks.sort_by_key(|t| t.id);
        self.next_id = self.next_id.max(id + 1);
    }

    /// Refreshes a live track's position from an external observation such
    /// as its propagated mask.
    pub fn observe(&mut self, id: u64, bbox: BBox, frame: usize) {
        if let Some(t) = self.tracks.iter_mut().find(|t| t.id == id) {
            t.last_box = bbox;
            t.last_seen_frame = frame;
            t.age = 0;
        }
    }

    /// Greedy IoU association of one frame's detections.
    pub fn associate(&mut self, dets: &[Detection], frame: usize, cfg: &AssocConfig) -> Result<FrameAssociation> {
        if let Some(last) = self.last_frame {
            if frame <= last {
                return Err(Error::Misaligned(format!("association frame {frame} does not follow frame {last}")));
            }
        }
        self.last_frame = Some(frame);
        for t in &mut self.tracks {
            t.age = frame - t.last_seen_frame;
        }
        self.tracks.retain(|t| t.age <= cfg.track_buffer);

        let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
        for (k, t) in self.tracks.iter().enumerate() {
            for (i, d) in dets.iter().enumerate() {
                let iou = iou_box(&t.last_box, &d.bbox);
                if iou > cfg.tau_track_det {
                    pairs.push((iou, k, i));
                }
            }
        }
        // tracks are kept sorted by id, so k order is id order
        pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut track_used = vec![false; self.tracks.len()];
        let mut det_track: Vec<Option<u64>> = vec![None; dets.len()];
        for (_, k, i) in pairs {
            if track_used[k] || det_track[i].is_some() {
                continue;
            }
            track_used[k] = true;
            det_track[i] = Some(self.tracks[k].id);
            let t = &mut self.tracks[k];
            t.last_box = dets[i].bbox;
            t.last_seen_frame = frame;
            t.age = 0;
        }
        let mut out = FrameAssociation::default();
        for (i, d) in dets.iter().enumerate() {
            match det_track[i] {
                Some(id) => out.matches.push((i, id)),
                None => {
                    let id = self.next_id;
                    self.next_id += 1;
                    self.tracks.push(Track {
                        id,
                        last_box: d.bbox,
                        last_seen_frame: frame,
                        class_label: d.class_label.clone(),
                        age: 0,
                    });
                    out.new_objects.push((i, id));
                }
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn det(x1: f64, y1: f64, x2: f64, y2: f64) -> Detection {
        Detection { bbox: BBox::new(x1, y1, x2, y2).unwrap(), class_label: "obj".into(), confidence: 0.9 }
    }

    #[test]
    fn validate_box_examples() {
        let cfg = AssocConfig::default();
        let v = |b: BBox| validate_box(&b, 640.0, 480.0, &cfg);
        assert_eq!(v(BBox::new(100.0, 100.0, 105.0, 105.0).unwrap()), BoxVerdict::Size);
        assert_eq!(v(BBox::new(100.0, 100.0, 160.0, 110.0).unwrap()), BoxVerdict::Aspect);
        assert_eq!(v(BBox::new(100.0, 100.0, 200.0, 200.0).unwrap()), BoxVerdict::Accept);
        assert_eq!(v(BBox::new(0.0, 100.0, 100.0, 200.0).unwrap()), BoxVerdict::Bounds);
    }

    #[test]
    fn rescale_examples() {
        let r = rescale_confidence(&[0.1, 0.5, 0.9], RESCALE_LO, RESCALE_HI);
        for (a, b) in r.iter().zip([0.7, 0.825, 0.95]) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(rescale_confidence(&[0.4, 0.4], RESCALE_LO, RESCALE_HI), vec![0.825, 0.825]);
    }

    #[test]
    fn first_frame_creates_ids_in_order() {
        let mut a = Associator::new();
        let cfg = AssocConfig::default();
        let r = a.associate(&[det(0.0, 0.0, 10.0, 10.0), det(50.0, 0.0, 60.0, 10.0), det(100.0, 0.0, 110.0, 10.0)], 0, &cfg).unwrap();
        assert_eq!(r.new_objects, vec![(0, 0), (1, 1), (2, 2)]);
        assert!(r.matches.is_empty());
    }

    #[test]
    fn matching_and_new_object() {
        let cfg = AssocConfig::default();
        let mut a = Associator::new();
        a.associate(&[det(0.0, 0.0, 10.0, 10.0)], 0, &cfg).unwrap();
        let r = a.associate(&[det(0.0, 0.0, 10.0, 10.0)], 1, &cfg).unwrap();
        assert_eq!(r.matches, vec![(0, 0)]);
        assert!(r.new_objects.is_empty());

        let mut a = Associator::new();
        a.associate(&[det(0.0, 0.0, 10.0, 10.0)], 0, &cfg).unwrap();
        // IoU 40 / 160 = 0.25
        assert!((iou_box(&det(0.0, 0.0, 10.0, 10.0).bbox, &det(6.0, 0.0, 16.0, 10.0).bbox) - 0.25).abs() < 1e-12);
        let r = a.associate(&[det(6.0, 0.0, 16.0, 10.0)], 1, &cfg).unwrap();
        assert_eq!(r.new_objects, vec![(0, 1)]);
        let old = a.tracks().iter().find(|t| t.id == 0).unwrap();
        assert_eq!(old.age, 1);
    }

    #[test]
    fn stale_tracks_retire() {
        let cfg = AssocConfig { track_buffer: 2, ..Default::default() };
        let mut a = Associator::new();
        a.associate(&[det(0.0, 0.0, 10.0, 10.0)], 0, &cfg).unwrap();
        a.associate(&[], 2, &cfg).unwrap();
        assert_eq!(a.tracks().len(), 1);
        a.associate(&[], 3, &cfg).unwrap();
        assert!(a.tracks().is_empty());
        let r = a.associate(&[det(0.0, 0.0, 10.0, 10.0)], 4, &cfg).unwrap();
        assert_eq!(r.new_objects, vec![(0, 1)]);
    }

    #[test]
    fn non_increasing_frame_is_rejected() {
        let mut a = Associator::new();
        let cfg = AssocConfig::default();
        a.associate(&[], 3, &cfg).unwrap();
        assert!(a.associate(&[], 3, &cfg).is_err());
    }

    proptest! {
        #[test]
        fn rescale_is_bounded_and_monotone(v in prop::collection::vec(0.0f64..=1.0, 1..20)) {
            let r = rescale_confidence(&v, RESCALE_LO, RESCALE_HI);
            for i in 0..v.len() {
                prop_assert!((RESCALE_LO..=RESCALE_HI).contains(&r[i]));
                for j in 0..v.len() {
                    if v[i] < v[j] { prop_assert!(r[i] <= r[j]); }
                }
            }
        }
    }
}
