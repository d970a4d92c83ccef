//! Whole-sequence processing: per-frame association and propagation, the
//! chunked fallback for sequences that exhaust resources, identity
//! reconciliation across chunk overlaps, and crash-safe checkpoints.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::ash::{post_process, propagate_new_objects, AshConfig, Masklet, NewObject};
use crate::assoc::{rescale_confidence, validate_box, AssocConfig, Associator, BoxVerdict, RESCALE_HI, RESCALE_LO};
use crate::backends::{Detection, Propagator};
use crate::config::RunMode;
use crate::error::{Error, Result};
use crate::geometry::{iou_mask, BBox};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChunkerConfig {
    pub chi: usize,
    pub omega: usize,
    pub tau_overlap: f64,
    /// Half-width of the boundary search window; defaults to `omega`.
    pub window: Option<usize>,
    /// Frames between checkpoints.
    pub checkpoint_interval: usize,
    /// Ceiling on frame-object entries held by one processing pass.
    pub max_entries: Option<u64>,
}

impl Default for ChunkerConfig {
    fn default() -> Self {
        ChunkerConfig { chi: 50, omega: 10, tau_overlap: 0.7, window: None, checkpoint_interval: 10, max_entries: None }
    }
}

impl ChunkerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.chi < 2 {
            return Err(Error::config("chunker.chi", "must be >= 2"));
        }
        if self.omega >= self.chi {
            return Err(Error::config("chunker.omega", format!("must be < chi ({})", self.chi)));
        }
        if !(self.tau_overlap > 0.0 && self.tau_overlap < 1.0) {
            return Err(Error::config("chunker.tau_overlap", "must be in (0, 1)"));
        }
        if self.checkpoint_interval < 1 {
            return Err(Error::config("chunker.checkpoint_interval", "must be >= 1"));
        }
        Ok(())
    }

    pub fn search_window(&self) -> usize {
        self.window.unwrap_or(self.omega)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkPlan {
    /// Inclusive `[start, end]` frame intervals.
    pub chunks: Vec<(usize, usize)>,
    pub omega: usize,
}

/// Static plan: first chunk from frame 0, each next start `omega` frames
/// before the previous end (and always after the previous start).
pub fn plan_chunks(num_frames: usize, cfg: &ChunkerConfig) -> ChunkPlan {
    let mut chunks = Vec::new();
    if num_frames == 0 {
        return ChunkPlan { chunks, omega: cfg.omega };
    }
    let last = num_frames - 1;
    let mut s = 0;
    loop {
        let e = (s + cfg.chi - 1).min(last);
        chunks.push((s, e));
        if e == last {
            break;
        }
        s = e.saturating_sub(cfg.omega).max(s + 1);
    }
    ChunkPlan { chunks, omega: cfg.omega }
}

/// Frame with the most objects within `[c - w, c + w]`, clipped to the
/// frames covered by `counts`. Ties resolve to the lowest frame.
pub fn find_optimal_frame(counts: &[usize], c: usize, w: usize) -> usize {
    if counts.is_empty() {
        return c;
    }
    let lo = c.saturating_sub(w).min(counts.len() - 1);
    let hi = (c + w).min(counts.len() - 1);
    let mut best = lo;
    for f in lo..=hi {
        if counts[f] > counts[best] {
            best = f;
        }
    }
    best
}

/// Outcome of matching the next chunk's objects to the stitched ones.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct OverlapMatch {
    /// `(next-chunk id, inherited id, mean IoU)`.
    pub inherited: Vec<(u64, u64, f64)>,
    /// Next-chunk ids with no partner.
    pub fresh: Vec<u64>,
}

/// Mean mask IoU over the overlap frames where at least one of the two has
/// a nonempty mask.
pub fn mean_overlap_iou(a: &Masklet, b: &Masklet, overlap: std::ops::RangeInclusive<usize>) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for f in overlap {
        let (ma, mb) = (a.visible_at(f), b.visible_at(f));
        match (ma, mb) {
            (None, None) => {}
            (Some(x), Some(y)) => {
                sum += iou_mask(&x.mask, &y.mask).unwrap_or(0.0);
                n += 1;
            }
            _ => n += 1,
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Greedy descending-IoU assignment of `b` objects to `a` objects over the
/// overlap; each `a` id is inherited at most once and only above `tau`.
pub fn merge_chunk_overlap(a: &[Masklet], b: &[Masklet], overlap: std::ops::RangeInclusive<usize>, tau: f64) -> OverlapMatch {
    let mut pairs = Vec::new();
    for mb in b {
        for ma in a {
            let v = mean_overlap_iou(ma, mb, overlap.clone());
            if v > tau {
                pairs.push((v, ma.object_id, mb.object_id));
            }
        }
    }
    pairs.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.2.cmp(&y.2)).then(x.1.cmp(&y.1)));
    let mut used_a = std::collections::BTreeSet::new();
    let mut got: BTreeMap<u64, (u64, f64)> = BTreeMap::new();
    for (v, ia, ib) in pairs {
        if used_a.contains(&ia) || got.contains_key(&ib) {
            continue;
        }
        used_a.insert(ia);
        got.insert(ib, (ia, v));
    }
    let mut out = OverlapMatch::default();
    for mb in b {
        match got.get(&mb.object_id) {
            Some(&(ia, v)) => out.inherited.push((mb.object_id, ia, v)),
            None => out.fresh.push(mb.object_id),
        }
    }
    out
}

/// Object handed from the stitched result into the next chunk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CarriedObject {
    pub local_id: u64,
    pub frame: usize,
    pub bbox: BBox,
    pub class_label: String,
    pub confidence: f64,
}

/// State of one processing pass over `[start, end]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkState {
    pub start: usize,
    pub end: usize,
    pub next_frame: usize,
    pub associator: Associator,
    /// Sorted by id.
    pub masklets: Vec<Masklet>,
    pub carried: Vec<CarriedObject>,
}

/// Settings shared by every processing pass.
#[derive(Debug, Clone, Copy)]
pub struct StageConfigs<'a> {
    pub assoc: &'a AssocConfig,
    pub ash: &'a AshConfig,
    pub chunker: &'a ChunkerConfig,
}

impl WorkState {
    pub fn new(start: usize, end: usize, carried: Vec<CarriedObject>) -> Self {
        let mut associator = Associator::new();
        associator.reserve_ids(carried.len() as u64);
        WorkState { start, end, next_frame: start, associator, masklets: Vec::new(), carried }
    }

    pub fn entry_count(&self) -> u64 {
        self.masklets.iter().map(|m| m.entries.len() as u64).sum()
    }

    fn insert(&mut self, new: Vec<Masklet>) {
        self.masklets.extend(new);
        self.masklets.sort_by_key(|m| m.object_id);
    }

    /// Processes frame `next_frame`: injects carried objects, refreshes
    /// tracks from propagated masks, validates, rescales and associates the
    /// detections, then propagates new objects through `end`.
    pub fn step(
        &mut self,
        dets: &[Detection],
        frame_w: u32,
        frame_h: u32,
        propagator: &dyn Propagator,
        cfg: StageConfigs<'_>,
    ) -> Result<()> {
        let t = self.next_frame;
        let (now, later): (Vec<_>, Vec<_>) = std::mem::take(&mut self.carried).into_iter().partition(|c| c.frame == t);
        self.carried = later;
        if !now.is_empty() {
            for c in &now {
                self.associator.inject(c.local_id, c.bbox, &c.class_label, t);
            }
            let objs: Vec<NewObject> = now
                .iter()
                .map(|c| NewObject { object_id: c.local_id, class_label: c.class_label.clone(), bbox: c.bbox, confidence: c.confidence })
                .collect();
            let ms = propagate_new_objects(&objs, t, self.end, propagator, cfg.ash)?;
            self.insert(ms);
        }
        for m in &self.masklets {
            if let Some(b) = m.visible_at(t).and_then(|e| e.mask.tight_bbox()) {
                self.associator.observe(m.object_id, b, t);
            }
        }
        let valid: Vec<Detection> = dets
            .iter()
            .filter(|d| validate_box(&d.bbox, frame_w as f64, frame_h as f64, cfg.assoc) == BoxVerdict::Accept)
            .cloned()
            .collect();
        let scores: Vec<f64> = valid.iter().map(|d| d.confidence).collect();
        let rescaled = if valid.is_empty() { Vec::new() } else { rescale_confidence(&scores, RESCALE_LO, RESCALE_HI) };
        let valid: Vec<Detection> =
            valid.into_iter().zip(rescaled).map(|(d, c)| Detection { confidence: c, ..d }).collect();
        let assoc = self.associator.associate(&valid, t, cfg.assoc)?;
        if !assoc.new_objects.is_empty() {
            let objs: Vec<NewObject> = assoc
                .new_objects
                .iter()
                .map(|&(i, id)| NewObject {
                    object_id: id,
                    class_label: valid[i].class_label.clone(),
                    bbox: valid[i].bbox,
                    confidence: valid[i].confidence,
                })
                .collect();
            let ms = propagate_new_objects(&objs, t, self.end, propagator, cfg.ash)?;
            self.insert(ms);
        }
        self.next_frame = t + 1;
        if let Some(limit) = cfg.chunker.max_entries {
            let used = self.entry_count();
            if used > limit {
                return Err(Error::BudgetExceeded { used, limit });
            }
        }
        Ok(())
    }

    pub fn is_done(&self) -> bool {
        self.next_frame > self.end
    }
}

/// Chunk-mode progress: the stitched result so far plus the chunk in flight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChunkState {
    pub chunk_index: usize,
    /// Stitched masklets under global ids, sorted by id.
    pub stitched: Vec<Masklet>,
    pub next_global_id: u64,
    /// End frame of the last stitched chunk.
    pub stitched_end: Option<usize>,
    pub chunks: Vec<(usize, usize)>,
    pub work: WorkState,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum ModeState {
    Full { work: WorkState },
    Chunk { chunk: ChunkState },
}

pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub schema_version: u32,
    pub sequence_id: String,
    pub config_digest: String,
    /// Highest frame fully processed; -1 before any frame.
    pub last_completed_frame: i64,
    pub rng_seed: u64,
    pub finished: bool,
    pub state: ModeState,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub enum CheckpointTag {
    Initial,
    Frame(usize),
    Final,
}

impl CheckpointTag {
    pub fn name(&self) -> String {
        match self {
            CheckpointTag::Initial => "initial".into(),
            CheckpointTag::Final => "final".into(),
            CheckpointTag::Frame(n) => format!("frame_{n:04}"),
        }
    }

    pub fn parse(tag: &str) -> Option<Self> {
        match tag {
            "initial" => Some(CheckpointTag::Initial),
            "final" => Some(CheckpointTag::Final),
            _ => tag.strip_prefix("frame_").and_then(|n| n.parse().ok()).map(CheckpointTag::Frame),
        }
    }
}

/// Frame the checkpoint named `name` stands for: -1 for the initial one,
/// `max_processed` for the final one, otherwise the tagged frame.
pub fn resume_frame(name: &str, max_processed: i64) -> Result<i64> {
    let base = Path::new(name).file_name().and_then(|s| s.to_str()).unwrap_or(name);
    let base = base.strip_suffix(".bak").unwrap_or(base);
    let base = base.strip_suffix(".json").unwrap_or(base);
    let tag = base.rsplit_once("ckpt_").map(|(_, t)| t).unwrap_or(base);
    match CheckpointTag::parse(tag) {
        Some(CheckpointTag::Initial) => Ok(-1),
        Some(CheckpointTag::Final) => Ok(max_processed),
        Some(CheckpointTag::Frame(n)) => Ok(n as i64),
        None => Err(Error::Checkpoint { path: PathBuf::from(name), reason: format!("unrecognized checkpoint tag `{tag}`") }),
    }
}

/// Crash point for exercising the save protocol.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FaultPoint {
    /// Temporary file written, nothing else.
    AfterTemp,
    /// Temporary file written and the existing checkpoint backed up.
    AfterBackup,
}

/// Directory of checkpoints for one sequence.
#[derive(Debug, Clone)]
pub struct CheckpointStore {
    dir: PathBuf,
    sequence_id: String,
    /// Frame checkpoints retained after each save.
    pub keep_frames: usize,
}

impl CheckpointStore {
    pub fn new(dir: impl Into<PathBuf>, sequence_id: &str) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(CheckpointStore { dir, sequence_id: sequence_id.to_string(), keep_frames: 2 })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path_for(&self, tag: &CheckpointTag) -> PathBuf {
        self.dir.join(format!("{}_ckpt_{}.json", self.sequence_id, tag.name()))
    }

    pub fn save(&self, ckpt: &Checkpoint, tag: &CheckpointTag) -> Result<PathBuf> {
        self.save_inner(ckpt, tag, None)
    }

    /// Runs the save protocol up to `fault` and stops there.
    pub fn save_with_fault(&self, ckpt: &Checkpoint, tag: &CheckpointTag, fault: FaultPoint) -> Result<PathBuf> {
        self.save_inner(ckpt, tag, Some(fault))
    }

    fn save_inner(&self, ckpt: &Checkpoint, tag: &CheckpointTag, fault: Option<FaultPoint>) -> Result<PathBuf> {
        let path = self.path_for(tag);
        let tmp = path.with_extension("json.tmp");
        let bak = path.with_extension("json.bak");
        let bytes = serde_json::to_vec(ckpt).map_err(|e| Error::Checkpoint { path: path.clone(), reason: e.to_string() })?;
        {
            let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
            f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
            f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        }
        if fault == Some(FaultPoint::AfterTemp) {
            return Ok(tmp);
        }
        if path.exists() {
            fs::copy(&path, &bak).map_err(|e| Error::io(&bak, e))?;
        }
        if fault == Some(FaultPoint::AfterBackup) {
            return Ok(tmp);
        }
        fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))?;
        if matches!(tag, CheckpointTag::Frame(_)) {
            self.collect_garbage()?;
        }
        Ok(path)
    }

    fn listed(&self) -> Result<Vec<(CheckpointTag, bool, PathBuf)>> {
        let prefix = format!("{}_ckpt_", self.sequence_id);
        let mut out = Vec::new();
        let rd = fs::read_dir(&self.dir).map_err(|e| Error::io(&self.dir, e))?;
        for entry in rd {
            let entry = entry.map_err(|e| Error::io(&self.dir, e))?;
            let name = entry.file_name().to_string_lossy().to_string();
            let Some(rest) = name.strip_prefix(&prefix) else { continue };
            let (tag, primary) = if let Some(t) = rest.strip_suffix(".json") {
                (t, true)
            } else if let Some(t) = rest.strip_suffix(".json.bak") {
                (t, false)
            } else {
                continue;
            };
            if let Some(tag) = CheckpointTag::parse(tag) {
                out.push((tag, primary, entry.path()));
            }
        }
        // final, then frames descending, then initial; primaries before backups
        out.sort_by(|a, b| b.0.cmp(&a.0).then(b.1.cmp(&a.1)));
        Ok(out)
    }

    fn collect_garbage(&self) -> Result<()> {
        let frames: Vec<usize> = self
            .listed()?
            .into_iter()
            .filter_map(|(t, p, _)| match t {
                CheckpointTag::Frame(n) if p => Some(n),
                _ => None,
            })
            .collect();
        for &n in frames.iter().skip(self.keep_frames) {
            let p = self.path_for(&CheckpointTag::Frame(n));
            let _ = fs::remove_file(&p);
            let _ = fs::remove_file(p.with_extension("json.bak"));
        }
        Ok(())
    }

    /// Removes every checkpoint of this sequence.
    pub fn clear(&self) -> Result<()> {
        for (_, _, p) in self.listed()? {
            fs::remove_file(&p).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }

    /// Removes frame checkpoints (used when switching processing mode).
    pub fn purge_frames(&self) -> Result<()> {
        for (t, _, p) in self.listed()? {
            if matches!(t, CheckpointTag::Frame(_)) {
                fs::remove_file(&p).map_err(|e| Error::io(&p, e))?;
            }
        }
        Ok(())
    }

    /// Loads and checks one checkpoint file.
    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = fs::read(path).map_err(|e| Error::Checkpoint { path: path.into(), reason: e.to_string() })?;
        let ckpt: Checkpoint = serde_json::from_slice(&bytes)
            .map_err(|e| Error::Checkpoint { path: path.into(), reason: format!("corrupt checkpoint: {e}") })?;
        if ckpt.schema_version != CHECKPOINT_SCHEMA_VERSION {
            return Err(Error::Checkpoint {
                path: path.into(),
                reason: format!("schema version {} (expected {CHECKPOINT_SCHEMA_VERSION})", ckpt.schema_version),
            });
        }
        Ok(ckpt)
    }

    /// Most advanced loadable checkpoint, skipping unreadable files.
    /// `None` means start from scratch.
    pub fn latest(&self) -> Result<Option<(PathBuf, Checkpoint)>> {
        for (_, _, path) in self.listed()? {
            match Self::load(&path) {
                Ok(c) if c.sequence_id == self.sequence_id => return Ok(Some((path, c))),
                Ok(_) => log::warn!("{}: checkpoint belongs to another sequence; skipped", path.display()),
                Err(e) => log::warn!("{e}; trying an older checkpoint"),
            }
        }
        Ok(None)
    }

    pub fn latest_path(&self) -> Option<PathBuf> {
        self.listed().ok().and_then(|l| l.into_iter().next().map(|(_, _, p)| p))
    }
}

/// Per-sequence inputs to [`run_sequence`].
pub struct SequenceInput<'a> {
    pub sequence_id: &'a str,
    pub num_frames: usize,
    pub width: u32,
    pub height: u32,
    /// Verified detections of one frame; must be deterministic.
    pub detections: &'a (dyn Fn(usize) -> Result<Vec<Detection>> + Sync),
    pub propagator: &'a dyn Propagator,
}

/// Run controls beyond the stage settings.
#[derive(Default, Clone, Copy)]
pub struct RunOptions<'a> {
    pub checkpoints: Option<&'a CheckpointStore>,
    /// Continue from the latest checkpoint when one exists.
    pub resume: bool,
    pub config_digest: &'a str,
    pub rng_seed: u64,
    /// Stop with [`Error::Interrupted`] once this frame is complete.
    pub stop_after_frame: Option<usize>,
    /// Called each time a new frame is completed, after any checkpoint.
    pub frame_hook: Option<&'a (dyn Fn(usize) + Sync)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeUsed {
    Full,
    Chunk,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceResult {
    pub masklets: Vec<Masklet>,
    pub mode: ModeUsed,
    pub fell_back: bool,
    /// Chunk intervals actually processed (chunk mode only).
    pub chunks: Vec<(usize, usize)>,
}

struct Runner<'a, 'b> {
    input: &'b SequenceInput<'a>,
    cfg: StageConfigs<'b>,
    opts: RunOptions<'b>,
    high_water: i64,
}

impl Runner<'_, '_> {
    fn checkpoint(&self, state: &ModeState, tag: CheckpointTag, finished: bool) -> Result<()> {
        let Some(store) = self.opts.checkpoints else { return Ok(()) };
        let ckpt = Checkpoint {
            schema_version: CHECKPOINT_SCHEMA_VERSION,
            sequence_id: self.input.sequence_id.to_string(),
            config_digest: self.opts.config_digest.to_string(),
            last_completed_frame: self.high_water,
            rng_seed: self.opts.rng_seed,
            finished,
            state: state.clone(),
        };
        store.save(&ckpt, &tag)?;
        Ok(())
    }

    /// Bookkeeping after a frame: checkpoint on interval, hook, stop.
    fn frame_done(&mut self, t: usize, state: &ModeState) -> Result<()> {
        if t as i64 <= self.high_water {
            return Ok(());
        }
        self.high_water = t as i64;
        if (t + 1).is_multiple_of(self.cfg.chunker.checkpoint_interval) {
            self.checkpoint(state, CheckpointTag::Frame(t), false)?;
        }
        if let Some(hook) = self.opts.frame_hook {
            hook(t);
        }
        if self.opts.stop_after_frame == Some(t) {
            return Err(Error::Interrupted(t));
        }
        Ok(())
    }

    fn run_full(&mut self, mut work: WorkState) -> Result<Vec<Masklet>> {
        while !work.is_done() {
            let t = work.next_frame;
            let dets = (self.input.detections)(t)?;
            work.step(&dets, self.input.width, self.input.height, self.input.propagator, self.cfg)?;
            let state = ModeState::Full { work };
            self.frame_done(t, &state)?;
            let ModeState::Full { work: w } = state else { unreachable!() };
            work = w;
        }
        let state = ModeState::Full { work };
        self.checkpoint(&state, CheckpointTag::Final, true)?;
        let ModeState::Full { work } = state else { unreachable!() };
        Ok(work.masklets)
    }

    fn first_chunk(&self) -> ChunkState {
        let end = (self.cfg.chunker.chi - 1).min(self.input.num_frames - 1);
        ChunkState {
            chunk_index: 0,
            stitched: Vec::new(),
            next_global_id: 0,
            stitched_end: None,
            chunks: vec![(0, end)],
            work: WorkState::new(0, end, Vec::new()),
        }
    }

    fn run_chunks(&mut self, mut cs: ChunkState) -> Result<(Vec<Masklet>, Vec<(usize, usize)>)> {
        let last = self.input.num_frames - 1;
        loop {
            while !cs.work.is_done() {
                let t = cs.work.next_frame;
                let dets = (self.input.detections)(t)?;
                cs.work.step(&dets, self.input.width, self.input.height, self.input.propagator, self.cfg)?;
                let state = ModeState::Chunk { chunk: cs };
                self.frame_done(t, &state)?;
                let ModeState::Chunk { chunk } = state else { unreachable!() };
                cs = chunk;
            }
            stitch(&mut cs, self.cfg.chunker.tau_overlap);
            let (start, end) = (cs.work.start, cs.work.end);
            if end >= last {
                break;
            }
            let counts: Vec<usize> =
                (0..=end).map(|f| cs.stitched.iter().filter(|m| m.visible_at(f).is_some()).count()).collect();
            let c = end + 1;
            let optimal = find_optimal_frame(&counts, c, self.cfg.chunker.search_window());
            let chi = self.cfg.chunker.chi;
            let next_start = optimal.saturating_sub(self.cfg.chunker.omega).max(start + 1).max((end + 2).saturating_sub(chi));
            let next_end = (next_start + chi - 1).min(last);
            let carried = carried_objects(&cs.stitched, next_start, end);
            cs.chunk_index += 1;
            cs.chunks.push((next_start, next_end));
            cs.work = WorkState::new(next_start, next_end, carried);
        }
        let chunks = cs.chunks.clone();
        let state = ModeState::Chunk { chunk: cs };
        self.checkpoint(&state, CheckpointTag::Final, true)?;
        let ModeState::Chunk { chunk } = state else { unreachable!() };
        Ok((chunk.stitched, chunks))
    }
}

/// Objects visible anywhere in `[from, to]`, with local ids in stitched id
/// order, each entering at its first visible frame in that range.
fn carried_objects(stitched: &[Masklet], from: usize, to: usize) -> Vec<CarriedObject> {
    let mut out = Vec::new();
    for m in stitched {
        let first = (from..=to).find_map(|f| m.visible_at(f).map(|e| (f, e)));
        if let Some((f, e)) = first {
            out.push(CarriedObject {
                local_id: out.len() as u64,
                frame: f,
                bbox: e.mask.tight_bbox().expect("visible mask has a box"),
                class_label: m.class_label.clone(),
                confidence: e.confidence,
            });
        }
    }
    out
}

/// Folds the finished chunk in `cs.work` into the stitched result.
fn stitch(cs: &mut ChunkState, tau: f64) {
    let work = std::mem::take(&mut cs.work.masklets);
    match cs.stitched_end {
        None => {
            cs.next_global_id = work.iter().map(|m| m.object_id + 1).max().unwrap_or(0).max(cs.work.associator.next_id());
            cs.stitched = work;
        }
        Some(prev_end) => {
            let overlap = cs.work.start..=prev_end;
            let matched = merge_chunk_overlap(&cs.stitched, &work, overlap, tau);
            let by_id: BTreeMap<u64, Masklet> = work.into_iter().map(|m| (m.object_id, m)).collect();
            for (b, a, _) in &matched.inherited {
                let src = &by_id[b];
                let dst = cs.stitched.iter_mut().find(|m| m.object_id == *a).expect("inherited id exists");
                for (&f, e) in src.entries.range(prev_end + 1..) {
                    dst.entries.insert(f, e.clone());
                }
            }
            for b in &matched.fresh {
                let mut m = by_id[b].clone();
                m.object_id = cs.next_global_id;
                cs.next_global_id += 1;
                cs.stitched.push(m);
            }
            cs.stitched.sort_by_key(|m| m.object_id);
        }
    }
    cs.stitched_end = Some(cs.work.end);
}

fn is_resource_failure(e: &Error) -> bool {
    matches!(e, Error::Propagation { .. } | Error::BudgetExceeded { .. } | Error::Backend(_))
}

/// Annotates one sequence. `Auto` tries a single full pass and falls back
/// to chunks on propagation failure or budget overrun; the fallback starts
/// over from frame 0. Both modes end with the same post-processing.
pub fn run_sequence(
    input: &SequenceInput<'_>,
    mode: RunMode,
    cfg: StageConfigs<'_>,
    opts: RunOptions<'_>,
) -> Result<SequenceResult> {
    if input.num_frames == 0 {
        return Err(Error::config("world.num_frames", "sequence has no frames"));
    }
    let mut runner = Runner { input, cfg, opts, high_water: -1 };
    let mut resumed: Option<ModeState> = None;
    if let (true, Some(store)) = (opts.resume, opts.checkpoints) {
        if let Some((path, ckpt)) = store.latest()? {
            if ckpt.config_digest != opts.config_digest {
                return Err(Error::Checkpoint { path, reason: "configuration differs from the one that wrote this checkpoint".into() });
            }
            log::info!("resuming {} from {} (frame {})", input.sequence_id, path.display(), ckpt.last_completed_frame);
            runner.high_water = ckpt.last_completed_frame;
            resumed = Some(ckpt.state);
        }
    }
    let full_state = match (&resumed, mode) {
        (Some(ModeState::Chunk { .. }), _) | (None, RunMode::Chunk) => None,
        (Some(ModeState::Full { work }), _) => Some(work.clone()),
        (None, _) => Some(WorkState::new(0, input.num_frames - 1, Vec::new())),
    };
    let mut fell_back = false;
    if let Some(work) = full_state {
        if resumed.is_none() {
            runner.checkpoint(&ModeState::Full { work: work.clone() }, CheckpointTag::Initial, false)?;
        }
        match runner.run_full(work) {
            Ok(m) => {
                return Ok(SequenceResult { masklets: post_process(m, cfg.ash), mode: ModeUsed::Full, fell_back: false, chunks: Vec::new() })
            }
            Err(e) if mode == RunMode::Auto && is_resource_failure(&e) => {
                log::warn!("full-sequence processing of {} failed ({e}); switching to chunks", input.sequence_id);
                fell_back = true;
                resumed = None;
                if let Some(store) = opts.checkpoints {
                    store.purge_frames()?;
                }
                runner.high_water = -1;
            }
            Err(e) => return Err(e),
        }
    }
    let cs = match resumed {
        Some(ModeState::Chunk { chunk }) => chunk,
        _ => {
            let cs = runner.first_chunk();
            runner.checkpoint(&ModeState::Chunk { chunk: cs.clone() }, CheckpointTag::Initial, false)?;
            cs
        }
    };
    match runner.run_chunks(cs) {
        Ok((m, chunks)) => Ok(SequenceResult { masklets: post_process(m, cfg.ash), mode: ModeUsed::Chunk, fell_back, chunks }),
        Err(e) if fell_back && !matches!(e, Error::Interrupted(_)) => Err(Error::BothModesFailed {
            reason: e.to_string(),
            checkpoint: opts.checkpoints.and_then(|s| s.latest_path()),
        }),
        Err(e) => Err(e),
    }
}
