use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use quadtrack_core::harness::gradcheck::{format_table, run_suite, DEFAULT_INSTANCES};
use quadtrack_core::harness::records::{
    by_frame, read_gt, read_manifest, read_trajectories, write_jsonl, DescriptorRecord, TrajectoryRecord,
};
use quadtrack_core::harness::synth::{frame_tensors, scenario_from_toml, scenario_to_toml, write_sequence};
use quadtrack_core::harness::{bench_files, bench_tensors, BenchReport, Pipeline, RunConfig, StageTiming};
use quadtrack_core::metrics::{detection_prf, mot_metrics};
use quadtrack_core::synthlab::{generate_sequence, ScenarioConfig};
use quadtrack_core::Error;

const THREADS_VAR: &str = "QUADTRACK_THREADS";

/// Online tracking of quadrangle text instances.
#[derive(Parser)]
#[command(name = "quadtrack", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the tracker over a frame manifest.
    Track(TrackArgs),
    /// Precision, recall and F-measure of per-frame detections.
    EvalDet(EvalArgs),
    /// CLEAR-MOT accuracy and precision of trajectories.
    EvalMot(EvalArgs),
    /// Write a synthetic sequence.
    Synth(SynthArgs),
    /// Compare analytic gradients with finite differences.
    Gradcheck(GradcheckArgs),
    /// Per-stage latency of the pipeline.
    Bench(BenchArgs),
}

#[derive(Args)]
struct TrackArgs {
    /// TOML run config; defaults apply to anything left out.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Print the effective config and exit.
    #[arg(long)]
    print_config: bool,
    #[arg(long, required_unless_present = "print_config")]
    manifest: Option<PathBuf>,
    /// Output directory.
    #[arg(long, required_unless_present = "print_config")]
    out: Option<PathBuf>,
    /// Also write every frame's descriptors.
    #[arg(long)]
    descriptors: bool,
    /// Per-frame stage times as JSONL. Not deterministic.
    #[arg(long)]
    timing: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    gt: PathBuf,
    /// Trajectory JSONL as written by `track`.
    #[arg(long)]
    hyp: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    iou: f64,
    /// JSON report path.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    /// TOML scenario; defaults apply to anything left out.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Print the effective scenario and exit.
    #[arg(long)]
    print_config: bool,
    #[arg(long, required_unless_present = "print_config")]
    out: Option<PathBuf>,
    /// Overrides the scenario seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = DEFAULT_INSTANCES)]
    instances: usize,
    /// Added to every analytic gradient entry; a non-zero value must fail.
    #[arg(long, default_value_t = 0.0)]
    perturb: f64,
    /// JSON table path.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Frame manifest; a synthetic sequence is generated in memory when absent.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Frames of the synthetic sequence.
    #[arg(long, default_value_t = 100)]
    frames: usize,
    /// Instances in the synthetic sequence.
    #[arg(long, default_value_t = 10)]
    instances: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// JSON report path.
    #[arg(long)]
    out: Option<PathBuf>,
}

enum Failure {
    Usage(String),
    Data(String),
    Check(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Usage(_) => Failure::Usage(e.to_string()),
            _ => Failure::Data(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Data(e.to_string())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Data(e.to_string())
    }
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let result = configure_threads().and_then(|()| match cli.cmd {
        Cmd::Track(a) => track(a),
        Cmd::EvalDet(a) => eval_det(a),
        Cmd::EvalMot(a) => eval_mot(a),
        Cmd::Synth(a) => synth(a),
        Cmd::Gradcheck(a) => gradcheck(a),
        Cmd::Bench(a) => bench(a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {}", m);
            ExitCode::from(1)
        }
        Err(Failure::Data(m)) => {
            eprintln!("error: {}", m);
            ExitCode::from(2)
        }
        Err(Failure::Check(m)) => {
            eprintln!("check failed: {}", m);
            ExitCode::from(3)
        }
    }
}

fn configure_threads() -> Outcome {
    let Ok(raw) = std::env::var(THREADS_VAR) else {
        return Ok(());
    };
    let n: usize = raw
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Failure::Usage(format!("{}={} is not a positive integer", THREADS_VAR, raw)))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::Usage(e.to_string()))
}

fn load_config(path: Option<&Path>) -> Result<(RunConfig, PathBuf), Failure> {
    match path {
        Some(p) => Ok(RunConfig::load(p)?),
        None => Ok((RunConfig::default(), PathBuf::from("."))),
    }
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Outcome {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn track(a: TrackArgs) -> Outcome {
    let (cfg, base) = load_config(a.config.as_deref())?;
    if a.print_config {
        print!("{}", cfg.to_toml());
        return Ok(());
    }
    let (manifest, out) = (a.manifest.expect("required"), a.out.expect("required"));
    let frames = read_manifest(&manifest)?;
    fs::create_dir_all(&out)?;
    let mut pipeline = Pipeline::new(&cfg, &base)?;
    let mut confirmed = Vec::new();
    let mut descriptors = Vec::new();
    let mut timings: Vec<StageTiming> = Vec::new();
    for f in &frames {
        let o = pipeline.process_files(&f.feature_map, f.detections.as_deref())?;
        confirmed.extend(o.confirmed.iter().map(TrajectoryRecord::from));
        if a.descriptors {
            descriptors.extend(o.descriptors.into_iter().map(|d| DescriptorRecord {
                frame: f.frame,
                proposal_index: d.proposal,
                agd: d.values,
            }));
        }
        timings.push(o.timing);
    }
    // Per-frame output D_t, then the same boxes grouped into trajectories.
    write_jsonl(&out.join("detections.jsonl"), &confirmed)?;
    confirmed.sort_by_key(|r| (r.track_id, r.frame));
    write_jsonl(&out.join("trajectories.jsonl"), &confirmed)?;
    if a.descriptors {
        write_jsonl(&out.join("descriptors.jsonl"), &descriptors)?;
    }
    if let Some(path) = &a.timing {
        let rows: Vec<serde_json::Value> = timings
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let mut row = serde_json::Map::new();
                row.insert("frame".into(), i.into());
                for (name, d) in StageTiming::STAGES.iter().zip(t.values()) {
                    row.insert(format!("{}_ms", name), (d.as_secs_f64() * 1e3).into());
                }
                serde_json::Value::Object(row)
            })
            .collect();
        write_jsonl(path, &rows)?;
    }
    let total: f64 = timings.iter().map(|t| t.total().as_secs_f64()).sum();
    let tracks = confirmed
        .iter()
        .map(|r| r.track_id)
        .collect::<std::collections::BTreeSet<_>>()
        .len();
    eprintln!(
        "{} frames, {} confirmed boxes, {} trajectories, {:.1} ms/frame",
        frames.len(),
        confirmed.len(),
        tracks,
        if frames.is_empty() {
            0.0
        } else {
            1e3 * total / frames.len() as f64
        }
    );
    Ok(())
}

fn report(text: &str, out: Option<&Path>, json: &impl serde::Serialize) -> Outcome {
    print!("{}", text);
    std::io::stdout().flush()?;
    if let Some(p) = out {
        write_json(p, json)?;
    }
    Ok(())
}

fn check_iou(iou: f64) -> Outcome {
    if iou > 0.0 && iou <= 1.0 {
        Ok(())
    } else {
        Err(Failure::Usage(format!("--iou {} is outside (0, 1]", iou)))
    }
}

fn eval_det(a: EvalArgs) -> Outcome {
    check_iou(a.iou)?;
    let gt = read_gt(&a.gt)?;
    let hyp = read_trajectories(&a.hyp)?;
    let gt_boxes = gt.iter().flat_map(|t| t.frames.iter().map(|(&f, q)| (f, q.clone())));
    let frames = gt
        .iter()
        .filter_map(|t| t.frames.keys().next_back())
        .chain(hyp.iter().map(|h| &h.frame))
        .max()
        .map_or(0, |&f| f + 1);
    let g = by_frame(gt_boxes, frames);
    let h = by_frame(hyp.into_iter().map(|h| (h.frame, h.quad)), frames);
    let r = detection_prf(&g, &h, a.iou)?;
    let text = format!(
        "precision {:.4}\nrecall    {:.4}\nf-measure {:.4}\ntp {} fp {} fn {}\n",
        r.precision, r.recall, r.f_measure, r.true_positives, r.false_positives, r.misses
    );
    report(&text, a.out.as_deref(), &r)
}

fn eval_mot(a: EvalArgs) -> Outcome {
    check_iou(a.iou)?;
    let gt = read_gt(&a.gt)?;
    let hyp = read_trajectories(&a.hyp)?;
    let r = mot_metrics(&gt, &hyp, a.iou)?;
    let motp = if r.motp_defined {
        format!("{:.2}", r.motp)
    } else {
        "undefined (no matches)".to_string()
    };
    let text = format!(
        "MOTA {:.2}\nMOTP {}\nfp {} fn {} idsw {} gt {} matches {} frames {}\n",
        r.mota, motp, r.false_positives, r.misses, r.id_switches, r.gt_total, r.matches, r.frames
    );
    report(&text, a.out.as_deref(), &r)
}

fn synth(a: SynthArgs) -> Outcome {
    let mut cfg = match &a.config {
        Some(p) => {
            let text =
                fs::read_to_string(p).map_err(|e| Failure::Usage(format!("cannot read {}: {}", p.display(), e)))?;
            scenario_from_toml(&text)?
        }
        None => ScenarioConfig::default(),
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if a.print_config {
        print!("{}", scenario_to_toml(&cfg));
        return Ok(());
    }
    if !cfg.render {
        return Err(Failure::Usage("synth writes feature maps; render must be true".into()));
    }
    cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    let out = a.out.expect("required");
    let seq = generate_sequence(&cfg).map_err(|e| Failure::Usage(e.to_string()))?;
    write_sequence(&seq, &out)?;
    eprintln!(
        "{} frames, {} tracks, digest {}",
        seq.frames.len(),
        seq.tracks.len(),
        seq.digest()
    );
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> Outcome {
    if a.instances == 0 {
        return Err(Failure::Usage("--instances must be positive".into()));
    }
    let rows = run_suite(a.seed, a.instances, a.perturb)?;
    print!("{}", format_table(&rows));
    std::io::stdout().flush()?;
    if let Some(p) = &a.out {
        write_json(p, &rows)?;
    }
    let failed: Vec<&str> = rows.iter().filter(|r| !r.passed).map(|r| r.name).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Check(format!(
            "{} of {} checks failed: {}",
            failed.len(),
            rows.len(),
            failed.join(", ")
        )))
    }
}

fn bench(a: BenchArgs) -> Outcome {
    let (cfg, base) = load_config(a.config.as_deref())?;
    let r: BenchReport = match &a.manifest {
        Some(m) => bench_files(&cfg, &base, &read_manifest(m)?)?,
        None => {
            let scenario = ScenarioConfig {
                frames: a.frames,
                instances: a.instances,
                seed: a.seed,
                ..Default::default()
            };
            let seq = generate_sequence(&scenario).map_err(|e| Failure::Usage(e.to_string()))?;
            let frames: Vec<_> = frame_tensors(&seq)?.into_iter().map(|t| (t, None)).collect();
            bench_tensors(&cfg, &base, &frames)?
        }
    };
    report(&r.to_text(), a.out.as_deref(), &r)
}
