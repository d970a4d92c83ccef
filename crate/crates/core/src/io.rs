//! File formats: MOT-Challenge CSV, line-delimited polygon annotations and
//! the pipeline configuration file.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::ash::Masklet;
use crate::backends::{DetectionNoise, GroundTruthFrame, PropagationDegradation, SyntheticWorldConfig};
use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::geometry::{BBox, Point, Polygon};
use crate::metrics::{FrameObjects, TrackedBox};

/// One row of the 9-column MOT-Challenge layout.
#[derive(Debug, Clone, PartialEq)]
pub struct MotRecord {
    /// 1-based.
    pub frame: u64,
    /// -1 for raw detections.
    pub id: i64,
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
    pub conf: f64,
    pub class_id: i64,
    pub visibility: f64,
}

impl MotRecord {
    pub fn bbox(&self) -> Result<BBox> {
        BBox::from_xywh(self.x, self.y, self.w, self.h)
    }

    /// Record for a 0-based frame index.
    pub fn from_box(frame_index: usize, id: i64, b: &BBox, conf: f64, class_id: i64, visibility: f64) -> Self {
        let [x, y, w, h] = b.to_xywh();
        MotRecord { frame: frame_index as u64 + 1, id, x, y, w, h, conf, class_id, visibility }
    }
}

fn parse_field<T: std::str::FromStr>(rec: &csv::StringRecord, i: usize, name: &str, path: &Path, line: u64) -> Result<T> {
    let raw = rec.get(i).unwrap_or("").trim();
    raw.parse().map_err(|_| Error::Parse { path: path.into(), line, reason: format!("{name}: `{raw}` is not a number") })
}

/// Reads MOT rows grouped by frame, keeping file order within a frame.
/// Rows need at least the six leading columns; missing trailing columns
/// default to conf 1, class -1, visibility 1.
pub fn read_mot(path: &Path) -> Result<BTreeMap<u64, Vec<MotRecord>>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(fs::File::open(path).map_err(|e| Error::io(path, e))?);
    let mut out: BTreeMap<u64, Vec<MotRecord>> = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            Error::Parse { path: path.into(), line, reason: e.to_string() }
        })?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        if rec.iter().all(|f| f.is_empty()) {
            continue;
        }
        if rec.len() < 6 || rec.len() > 10 {
            return Err(Error::Parse { path: path.into(), line, reason: format!("expected 6 to 10 columns, found {}", rec.len()) });
        }
        let frame: f64 = parse_field(&rec, 0, "frame", path, line)?;
        let id: f64 = parse_field(&rec, 1, "id", path, line)?;
        let opt = |i: usize, name: &str, default: f64| -> Result<f64> {
            if rec.len() > i {
                parse_field(&rec, i, name, path, line)
            } else {
                Ok(default)
            }
        };
        let r = MotRecord {
            frame: frame as u64,
            id: id as i64,
            x: parse_field(&rec, 2, "x", path, line)?,
            y: parse_field(&rec, 3, "y", path, line)?,
            w: parse_field(&rec, 4, "w", path, line)?,
            h: parse_field(&rec, 5, "h", path, line)?,
            conf: opt(6, "conf", 1.0)?,
            class_id: opt(7, "class", -1.0)? as i64,
            visibility: opt(8, "visibility", 1.0)?,
        };
        if frame < 1.0 || frame.fract() != 0.0 {
            return Err(Error::Parse { path: path.into(), line, reason: "frame must be an integer >= 1".into() });
        }
        if !(r.w > 0.0 && r.h > 0.0) {
            return Err(Error::Parse { path: path.into(), line, reason: "w and h must be > 0".into() });
        }
        out.entry(r.frame).or_default().push(r);
    }
    Ok(out)
}

pub fn write_mot(records: &[MotRecord], path: &Path) -> Result<()> {
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    for r in records {
        writeln!(
            w,
            "{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{},{:.6}",
            r.frame, r.id, r.x, r.y, r.w, r.h, r.conf, r.class_id, r.visibility
        )
        .map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Groups MOT rows into per-frame objects with 0-based frame indices.
pub fn mot_to_frames(records: &BTreeMap<u64, Vec<MotRecord>>, num_frames: usize) -> Result<Vec<FrameObjects>> {
    let mut frames: Vec<FrameObjects> = (0..num_frames).map(|i| FrameObjects { frame_index: i, objects: Vec::new() }).collect();
    for (&f, rows) in records {
        let idx = (f - 1) as usize;
        if idx >= num_frames {
            return Err(Error::Misaligned(format!("MOT frame {f} beyond sequence length {num_frames}")));
        }
        for r in rows {
            frames[idx].objects.push(TrackedBox::new(r.id.max(0) as u64, r.bbox()?));
        }
    }
    Ok(frames)
}

/// Visible ground-truth objects as MOT rows.
pub fn ground_truth_to_mot(frames: &[GroundTruthFrame]) -> Vec<MotRecord> {
    let mut out = Vec::new();
    for f in frames {
        for o in f.visible_objects() {
            let b = o.bbox.expect("visible objects have boxes");
            out.push(MotRecord::from_box(f.frame_index, o.id as i64, &b, 1.0, 1, o.visibility));
        }
    }
    out
}

pub const ANNOTATION_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationHeader {
    pub schema_version: u32,
    pub sequence_id: String,
    pub width: u32,
    pub height: u32,
    pub num_frames: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotatedObject {
    pub track_id: u64,
    pub class_label: String,
    pub confidence: f64,
    /// `[x, y]` vertices, clockwise in image coordinates.
    pub polygon: Vec<[f64; 2]>,
    /// `[x1, y1, x2, y2]`.
    pub bbox: [f64; 4],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotatedFrame {
    pub frame: usize,
    pub objects: Vec<AnnotatedObject>,
}

/// Header line followed by one line per frame.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotationDocument {
    pub header: AnnotationHeader,
    pub frames: Vec<AnnotatedFrame>,
}

impl AnnotationDocument {
    /// Polygons of post-processed masklets; every frame of the sequence
    /// gets a line, objects ordered by track id.
    pub fn from_masklets(sequence_id: &str, width: u32, height: u32, num_frames: usize, masklets: &[Masklet]) -> Self {
        let mut sorted: Vec<&Masklet> = masklets.iter().collect();
        sorted.sort_by_key(|m| m.object_id);
        let frames = (0..num_frames)
            .map(|f| AnnotatedFrame {
                frame: f,
                objects: sorted
                    .iter()
                    .filter_map(|m| {
                        let e = m.entries.get(&f)?;
                        let (p, b) = (e.polygon.as_ref()?, e.bbox?);
                        Some(AnnotatedObject {
                            track_id: m.object_id,
                            class_label: m.class_label.clone(),
                            confidence: e.confidence,
                            polygon: p.vertices().iter().map(|v| [v.x, v.y]).collect(),
                            bbox: [b.x1, b.y1, b.x2, b.y2],
                        })
                    })
                    .collect(),
            })
            .collect();
        AnnotationDocument {
            header: AnnotationHeader {
                schema_version: ANNOTATION_SCHEMA_VERSION,
                sequence_id: sequence_id.to_string(),
                width,
                height,
                num_frames,
            },
            frames,
        }
    }

    /// Annotated boxes per frame, for evaluation.
    pub fn to_frame_objects(&self) -> Result<Vec<FrameObjects>> {
        self.frames
            .iter()
            .map(|f| {
                let objects = f
                    .objects
                    .iter()
                    .map(|o| {
                        let b = BBox::new(o.bbox[0], o.bbox[1], o.bbox[2], o.bbox[3])?;
                        Ok(TrackedBox { id: o.track_id, bbox: b, class_label: Some(o.class_label.clone()) })
                    })
                    .collect::<Result<_>>()?;
                Ok(FrameObjects { frame_index: f.frame, objects })
            })
            .collect()
    }

    pub fn to_mot(&self) -> Vec<MotRecord> {
        let mut out = Vec::new();
        for f in &self.frames {
            for o in &f.objects {
                let b = BBox { x1: o.bbox[0], y1: o.bbox[1], x2: o.bbox[2], y2: o.bbox[3] };
                out.push(MotRecord::from_box(f.frame, o.track_id as i64, &b, o.confidence, 1, 1.0));
            }
        }
        out
    }

    pub fn polygon(o: &AnnotatedObject) -> Result<Polygon> {
        Polygon::new(o.polygon.iter().map(|v| Point::new(v[0], v[1])).collect())
    }
}

pub fn write_annotations(doc: &AnnotationDocument, path: &Path) -> Result<()> {
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    let enc = |e: serde_json::Error| Error::Parse { path: path.into(), line: 0, reason: e.to_string() };
    let mut line = serde_json::to_string(&doc.header).map_err(enc)?;
    writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    for fr in &doc.frames {
        line = serde_json::to_string(fr).map_err(enc)?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_annotations(path: &Path) -> Result<AnnotationDocument> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(f).lines().enumerate();
    let bad = |line: usize, reason: String| Error::Parse { path: path.into(), line: line as u64 + 1, reason };
    let header: AnnotationHeader = match lines.next() {
        Some((i, l)) => {
            let l = l.map_err(|e| Error::io(path, e))?;
            serde_json::from_str(&l).map_err(|e| bad(i, e.to_string()))?
        }
        None => return Err(bad(0, "missing header line".into())),
    };
    if header.schema_version != ANNOTATION_SCHEMA_VERSION {
        return Err(bad(0, format!("unsupported schema version {}", header.schema_version)));
    }
    let mut frames = Vec::new();
    for (i, l) in lines {
        let l = l.map_err(|e| Error::io(path, e))?;
        if l.trim().is_empty() {
            continue;
        }
        frames.push(serde_json::from_str(&l).map_err(|e| bad(i, e.to_string()))?);
    }
    Ok(AnnotationDocument { header, frames })
}

/// Sequence descriptor (`seqinfo.toml`). Synthetic sequences are
/// regenerated from their world settings, which also drive the oracle
/// backends.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SequenceInfo {
    pub name: String,
    #[serde(default)]
    pub world: SyntheticWorldConfig,
    #[serde(default)]
    pub noise: DetectionNoise,
    #[serde(default)]
    pub propagation: PropagationDegradation,
}

pub const SEQINFO_FILE: &str = "seqinfo.toml";

pub fn read_sequence_info(dir: &Path) -> Result<SequenceInfo> {
    let path = dir.join(SEQINFO_FILE);
    let s = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let info: SequenceInfo = toml::from_str(&s).map_err(|e| Error::config(SEQINFO_FILE, e.message().to_string()))?;
    info.world.validate()?;
    info.noise.validate()?;
    info.propagation.validate()?;
    Ok(info)
}

pub fn write_sequence_info(dir: &Path, info: &SequenceInfo) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(SEQINFO_FILE);
    let s = toml::to_string(info).map_err(|e| Error::config(SEQINFO_FILE, e.to_string()))?;
    fs::write(&path, s).map_err(|e| Error::io(&path, e))
}

/// Parses and validates a TOML configuration; absent fields take defaults.
pub fn read_config(path: &Path) -> Result<PipelineConfig> {
    let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    PipelineConfig::from_toml_str(&s)
}

pub fn write_config(cfg: &PipelineConfig, path: &Path) -> Result<()> {
    fs::write(path, cfg.to_toml_string()).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ash::MaskletEntry;
    use crate::geometry::BinaryMask;
    use proptest::prelude::*;

    #[test]
    fn parses_detection_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("det.txt");
        fs::write(&p, "1,-1,100,200,50,80,0.9,1,1.0\n").unwrap();
        let m = read_mot(&p).unwrap();
        let r = &m[&1][0];
        assert_eq!(r.id, -1);
        assert_eq!(r.bbox().unwrap(), BBox::new(100.0, 200.0, 150.0, 280.0).unwrap());
        assert_eq!(r.conf, 0.9);
    }

    #[test]
    fn empty_file_gives_empty_map() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.txt");
        fs::write(&p, "").unwrap();
        assert!(read_mot(&p).unwrap().is_empty());
    }

    #[test]
    fn malformed_line_reports_location() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.txt");
        fs::write(&p, "1,1,0,0,5,5,1,1,1\n2,1,abc,0,5,5,1,1,1\n").unwrap();
        match read_mot(&p) {
            Err(Error::Parse { line, reason, .. }) => {
                assert_eq!(line, 2);
                assert!(reason.contains("x"));
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn mot_round_trip_and_determinism() {
        let dir = tempfile::tempdir().unwrap();
        let recs: Vec<MotRecord> = (0..10_000)
            .map(|i| MotRecord {
                frame: (i / 7 + 1) as u64,
                id: (i % 7) as i64,
                x: i as f64 * 0.123457,
                y: 3.5,
                w: 1.0 + (i % 13) as f64 * 0.5,
                h: 2.25,
                conf: (i % 100) as f64 / 100.0,
                class_id: 1,
                visibility: 0.5,
            })
            .collect();
        let (a, b) = (dir.path().join("a.txt"), dir.path().join("b.txt"));
        write_mot(&recs, &a).unwrap();
        write_mot(&recs, &b).unwrap();
        assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
        let back: Vec<MotRecord> = read_mot(&a).unwrap().into_values().flatten().collect();
        assert_eq!(back.len(), recs.len());
        for (x, y) in back.iter().zip(&recs) {
            assert_eq!((x.frame, x.id, x.class_id), (y.frame, y.id, y.class_id));
            for (u, v) in [(x.x, y.x), (x.y, y.y), (x.w, y.w), (x.h, y.h), (x.conf, y.conf), (x.visibility, y.visibility)] {
                assert!((u - v).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn square_polygon_is_one_line_with_four_vertices() {
        let mask = BinaryMask::from_fn(20, 20, |x, y| (2..6).contains(&x) && (2..6).contains(&y)).unwrap();
        let m = Masklet {
            object_id: 3,
            class_label: "person".into(),
            entries: [(0, MaskletEntry::from_mask(mask, 0.9, 1))].into_iter().collect(),
        };
        let doc = AnnotationDocument::from_masklets("s", 20, 20, 1, &[m]);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.jsonl");
        write_annotations(&doc, &p).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(doc.frames[0].objects[0].polygon.len(), 4);
        assert_eq!(read_annotations(&p).unwrap(), doc);
    }

    #[test]
    fn config_file_defaults_and_rejection() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        fs::write(&p, "").unwrap();
        assert_eq!(read_config(&p).unwrap(), PipelineConfig::default());
        fs::write(&p, "[chunker]\nomega = 60\n").unwrap();
        assert!(matches!(read_config(&p), Err(Error::Config { .. })));
        let mut c = PipelineConfig::default();
        c.ash.beta = 7;
        write_config(&c, &p).unwrap();
        assert_eq!(read_config(&p).unwrap(), c);
    }

    #[test]
    fn sequence_info_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut info = SequenceInfo {
            name: "seq01".into(),
            world: SyntheticWorldConfig::default(),
            noise: DetectionNoise::default(),
            propagation: PropagationDegradation::default(),
        };
        info.noise.miss_rate = 0.25;
        write_sequence_info(dir.path(), &info).unwrap();
        assert_eq!(read_sequence_info(dir.path()).unwrap(), info);
    }

    fn arb_object() -> impl Strategy<Value = AnnotatedObject> {
        (0u64..50, 0.0f64..1.0, prop::collection::vec((-1e4f64..1e4, -1e4f64..1e4), 3..8), 0.0f64..100.0)
            .prop_map(|(id, c, pts, x)| AnnotatedObject {
                track_id: id,
                class_label: "obj".into(),
                confidence: c,
                polygon: pts.into_iter().map(|(a, b)| [a, b]).collect(),
                bbox: [x, x, x + 1.0, x + 2.0],
            })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn annotation_round_trip(frames in prop::collection::vec(prop::collection::vec(arb_object(), 0..4), 0..5)) {
            let doc = AnnotationDocument {
                header: AnnotationHeader { schema_version: 1, sequence_id: "p".into(), width: 10, height: 10, num_frames: frames.len() },
                frames: frames.into_iter().enumerate().map(|(i, objects)| AnnotatedFrame { frame: i, objects }).collect(),
            };
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("a.jsonl");
            write_annotations(&doc, &p).unwrap();
            prop_assert_eq!(read_annotations(&p).unwrap(), doc);
        }
    }
}
