use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use autolabel::backends::{generate_synthetic_sequence, FrameRef};
use autolabel::chunker::{CheckpointStore, RunOptions};
use autolabel::config::{PipelineConfig, RunMode};
use autolabel::io::{
    ground_truth_to_mot, mot_to_frames, read_config, read_mot, read_sequence_info, write_mot, write_sequence_info,
    AnnotationDocument, MotRecord, SequenceInfo, SEQINFO_FILE,
};
use autolabel::metrics::{evaluate, write_reports_csv, write_reports_json};
use autolabel::pipeline::{annotate_sequence, deploy, write_outputs, DatasetOptions, DatasetSequence, SequenceOutcome};
use autolabel::smart_od::run_smart_od;

#[derive(Parser)]
#[command(name = "autolabel", version, about = "Automated multi-object video annotation")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Pipeline configuration (TOML); absent fields take defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Sequences processed concurrently (0 = one per core).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// full, chunk or auto.
    #[arg(long, global = true)]
    mode: Option<RunMode>,
    /// Log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic sequence: seqinfo.toml and gt/gt.txt.
    Simulate {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "synthetic")]
        name: String,
    },
    /// Verified detections only, as MOT rows with id -1.
    Detect {
        #[arg(long)]
        seq: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Full pipeline for one sequence.
    Annotate(RunArgs),
    /// Continue an interrupted annotate run from its latest checkpoint.
    Resume(RunArgs),
    /// Score a MOT prediction file against MOT ground truth.
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Report file; `.json` writes JSON, anything else CSV.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value = "sequence")]
        name: String,
    },
    /// Select, tune, cross-validate and annotate a whole dataset.
    Deploy {
        /// Sequence directories, or directories of sequence directories.
        #[arg(long, required = true)]
        seq: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        checkpoint_dir: Option<PathBuf>,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    seq: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    checkpoint_dir: Option<PathBuf>,
    /// Abort the process right after this frame completes (crash testing).
    #[arg(long, hide = true)]
    abort_at_frame: Option<usize>,
}

fn load_config(g: &Global) -> anyhow::Result<PipelineConfig> {
    let mut cfg = match &g.config {
        Some(p) => read_config(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = g.seed {
        cfg = cfg.with_seed(s);
        cfg.deployment.qa_seed = s;
    }
    if let Some(w) = g.workers {
        cfg.run.workers = w;
    }
    if let Some(m) = g.mode {
        cfg.run.mode = m;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Loads a sequence directory; its world settings replace the
/// configuration's so the checkpoint digest reflects the data.
fn load_sequence(dir: &Path, cfg: &mut PipelineConfig) -> anyhow::Result<DatasetSequence> {
    let info = read_sequence_info(dir)?;
    cfg.world = info.world.clone();
    cfg.noise = info.noise.clone();
    cfg.propagation = info.propagation.clone();
    Ok(DatasetSequence::synthetic(info.name, &info.world, info.noise, info.propagation)?)
}

fn sequence_dirs(roots: &[PathBuf]) -> anyhow::Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for r in roots {
        if r.join(SEQINFO_FILE).exists() {
            out.push(r.clone());
            continue;
        }
        let mut subs: Vec<PathBuf> = fs::read_dir(r)
            .with_context(|| format!("reading {}", r.display()))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.join(SEQINFO_FILE).exists())
            .collect();
        if subs.is_empty() {
            bail!("{}: no {SEQINFO_FILE} found", r.display());
        }
        subs.sort();
        out.extend(subs);
    }
    Ok(out)
}

fn run_annotate(g: &Global, a: &RunArgs, resume: bool) -> anyhow::Result<()> {
    let mut cfg = load_config(g)?;
    let seq = load_sequence(&a.seq, &mut cfg)?;
    let store = match &a.checkpoint_dir {
        Some(d) => Some(CheckpointStore::new(d, &seq.id)?),
        None if resume => bail!("resume needs --checkpoint-dir"),
        None => None,
    };
    if let (Some(s), false) = (&store, resume) {
        s.clear()?;
    }
    let digest = cfg.digest();
    let abort_at = a.abort_at_frame;
    let hook = move |t: usize| {
        if Some(t) == abort_at {
            std::process::abort();
        }
    };
    let opts = RunOptions {
        checkpoints: store.as_ref(),
        resume,
        config_digest: &digest,
        rng_seed: cfg.world.rng_seed,
        stop_after_frame: None,
        frame_hook: Some(&hook),
    };
    let res = annotate_sequence(&seq, &cfg, cfg.run.mode, opts)?;
    let (w, h) = seq.size();
    let doc = AnnotationDocument::from_masklets(&seq.id, w, h, seq.num_frames(), &res.masklets);
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    write_outputs(&doc, &a.out)?;
    log::info!("{}: {} objects, mode {:?}, fell back: {}", seq.id, res.masklets.len(), res.mode, res.fell_back);
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let g = &cli.global;
    match &cli.command {
        Command::Simulate { out, name } => {
            let cfg = load_config(g)?;
            let info = SequenceInfo {
                name: name.clone(),
                world: cfg.world.clone(),
                noise: cfg.noise.clone(),
                propagation: cfg.propagation.clone(),
            };
            let frames = generate_synthetic_sequence(&info.world)?;
            write_sequence_info(out, &info)?;
            let gt_dir = out.join("gt");
            fs::create_dir_all(&gt_dir).with_context(|| format!("creating {}", gt_dir.display()))?;
            write_mot(&ground_truth_to_mot(&frames), &gt_dir.join("gt.txt"))?;
        }
        Command::Detect { seq, out } => {
            let mut cfg = load_config(g)?;
            let s = load_sequence(seq, &mut cfg)?;
            let det = s.detector();
            let (w, h) = s.size();
            let mut rows = Vec::new();
            for t in 0..s.num_frames() {
                let v = run_smart_od(FrameRef { index: t, width: w, height: h }, &det, &cfg.smart_od)?;
                rows.extend(v.detections.iter().map(|d| MotRecord::from_box(t, -1, &d.bbox, d.confidence, 1, 1.0)));
            }
            fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
            write_mot(&rows, &out.join(format!("{}.det.txt", s.id)))?;
        }
        Command::Annotate(a) => run_annotate(g, a, false)?,
        Command::Resume(a) => run_annotate(g, a, true)?,
        Command::Evaluate { pred, gt, out, name } => {
            let cfg = load_config(g)?;
            let (p, t) = (read_mot(pred)?, read_mot(gt)?);
            let n = p.keys().chain(t.keys()).copied().max().unwrap_or(0) as usize;
            let report = evaluate(name, &mot_to_frames(&p, n)?, &mot_to_frames(&t, n)?, cfg.run.eval_iou)?;
            for (k, v) in report.rows() {
                println!("{k}\t{v:.6}");
            }
            match out {
                Some(o) if o.extension().is_some_and(|e| e == "json") => write_reports_json(&[report], o)?,
                Some(o) => write_reports_csv(&[report], o)?,
                None => {}
            }
        }
        Command::Deploy { seq, out, checkpoint_dir } => {
            let cfg = load_config(g)?;
            let mut dataset = Vec::new();
            for d in sequence_dirs(seq)? {
                let info = read_sequence_info(&d)?;
                dataset.push(DatasetSequence::synthetic(info.name, &info.world, info.noise, info.propagation)?);
            }
            let opts = DatasetOptions { out_dir: Some(out.clone()), checkpoint_root: checkpoint_dir.clone(), resume: false };
            let r = deploy(&dataset, &cfg, &opts, g.seed.unwrap_or(0))?;
            println!("representative\t{}\tframe {}", r.representative, r.crowded_frame);
            println!("objective\t{:.6}", r.tuned.j);
            if let Some((id, c, ok)) = &r.validation {
                println!("validation\t{id}\tmin(P,R) {:.6}\t{}", c.min_metric(), if *ok { "pass" } else { "fail" });
            }
            match &r.dataset {
                Some(d) => {
                    for s in &d.sequences {
                        match &s.outcome {
                            SequenceOutcome::Done { qa_score, flagged, .. } => {
                                println!("qa\t{}\t{qa_score:.6}{}", s.sequence_id, if *flagged { "\tflagged" } else { "" })
                            }
                            SequenceOutcome::Failed { reason } => println!("failed\t{}\t{reason}", s.sequence_id),
                        }
                    }
                }
                None => bail!("cross-validation failed; rerun with an alternate deployment.grid"),
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.global.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e.downcast_ref::<autolabel::Error>().map(|e| e.exit_code()).unwrap_or(1);
            ExitCode::from(code as u8)
        }
    }
}
