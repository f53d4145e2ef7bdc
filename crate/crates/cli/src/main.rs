use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

use moment_core::curve::{condition, smooth_fitted, CurveFile, LoadedCurve};
use moment_core::grounding::{default_window, ground, interval_iou, moment_center, DEFAULT_THETA};
use moment_core::harness::{
    compare_strategies, gen_scenario, run_traced, Scenario, ScenarioConfig,
};
use moment_core::matching::{
    find_loss, find_loss_grad, grad_check, similarity_matrix, TokenFile, DEFAULT_GRAD_STEP,
};
use moment_core::metrics::per_frame_jf;
use moment_core::propagation::{run_forward_baseline, MockTracker, DEFAULT_LAMBDA};
use moment_core::sampling::sample;
use moment_core::{Interval, RngStream, RunParams, SimilarityCurve, SmoothParams, Strategy};

#[derive(Parser)]
#[command(
    name = "moment",
    version,
    about = "Moment-centric grounding, sampling and propagation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Locate the moment center and thresholded segments of a curve.
    Ground(GroundArgs),
    /// Pick keyframes from a curve with one strategy.
    Sample(SampleArgs),
    /// Evaluate the find-token loss and its gradient.
    Loss(LossArgs),
    /// Run one scenario end to end and report per-frame quality.
    Propagate(PropagateArgs),
    /// Write a seeded scenario file.
    Gen(GenArgs),
    /// Compare strategies over a corpus of scenarios.
    Compare(CompareArgs),
}

#[derive(Args)]
struct CurveArgs {
    /// Curve JSON: {"length": T, "values": [...], "raw": false}.
    #[arg(long)]
    curve: PathBuf,
    /// Resample raw curves to this many frames (defaults to their length).
    #[arg(long)]
    frames: Option<usize>,
    /// Gaussian-smooth the curve. Raw curves are always smoothed.
    #[arg(long)]
    smooth: bool,
}

#[derive(Args)]
struct GroundArgs {
    #[command(flatten)]
    curve: CurveArgs,
    #[arg(long, default_value_t = DEFAULT_THETA)]
    theta: f64,
    /// Window length; defaults to a tenth of the curve.
    #[arg(long)]
    window: Option<usize>,
    /// Ground-truth interval as `start,end` (inclusive frames).
    #[arg(long, value_parser = parse_interval)]
    gt: Option<(usize, usize)>,
}

#[derive(Args)]
struct SampleArgs {
    #[command(flatten)]
    curve: CurveArgs,
    #[arg(long)]
    strategy: Strategy,
    #[arg(long, default_value_t = 8)]
    k: usize,
    #[arg(long)]
    window: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct LossArgs {
    /// Token JSON with find, frames, labels and optional tau, lambda_p, omega.
    #[arg(long)]
    tokens: PathBuf,
    /// Also compare the gradient against central differences.
    #[arg(long)]
    grad_check: bool,
}

#[derive(Args)]
struct PropagateArgs {
    #[arg(long)]
    scenario: PathBuf,
    #[arg(long, default_value = "mcs")]
    anchors_from: Strategy,
    #[arg(long, default_value_t = 8)]
    k: usize,
    #[arg(long, default_value_t = DEFAULT_LAMBDA)]
    lambda: f64,
    /// Sampling seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also run plain forward tracking from frame 0.
    #[arg(long)]
    baseline: bool,
    /// Emit one CSV row per frame instead of JSON.
    #[arg(long)]
    csv: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    LateTargetDrift,
    PerfectTracker,
}

#[derive(Args)]
struct GenArgs {
    /// Scenario config JSON.
    #[arg(long, conflicts_with = "preset", required_unless_present = "preset")]
    config: Option<PathBuf>,
    /// Built-in config instead of a file.
    #[arg(long, value_enum)]
    preset: Option<Preset>,
    #[arg(long)]
    seed: u64,
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Args)]
struct CompareArgs {
    /// Directory of scenario JSON files, read in name order.
    #[arg(long)]
    corpus: PathBuf,
    #[arg(
        long,
        value_delimiter = ',',
        default_value = "firstk,uniform,random,topk,nearbyk,mcs"
    )]
    strategies: Vec<Strategy>,
    #[arg(long, default_value_t = 8)]
    k: usize,
    /// Sampling seeds: `a..b` (inclusive) or a comma list.
    #[arg(long, value_parser = parse_seeds, default_value = "0..19")]
    seeds: SeedList,
    #[arg(long, default_value_t = DEFAULT_THETA)]
    theta: f64,
    #[arg(long, default_value_t = DEFAULT_LAMBDA)]
    lambda: f64,
    #[arg(long)]
    window: Option<usize>,
    /// Worker threads; defaults to one per core.
    #[arg(long)]
    workers: Option<usize>,
    /// Per-run CSV; the summary goes next to it as `<stem>.summary.csv`.
    #[arg(short, long)]
    output: Option<PathBuf>,
    /// Write a JSON twin of every CSV.
    #[arg(long)]
    json: bool,
}

#[derive(Clone)]
struct SeedList(Vec<u64>);

fn parse_seeds(s: &str) -> std::result::Result<SeedList, String> {
    if let Some((a, b)) = s.split_once("..") {
        let a: u64 = a
            .trim()
            .parse()
            .map_err(|e| format!("bad seed range start: {e}"))?;
        let b: u64 = b
            .trim()
            .parse()
            .map_err(|e| format!("bad seed range end: {e}"))?;
        if a > b {
            return Err(format!("empty seed range {a}..{b}"));
        }
        return Ok(SeedList((a..=b).collect()));
    }
    s.split(',')
        .map(|x| {
            x.trim()
                .parse::<u64>()
                .map_err(|e| format!("bad seed {x:?}: {e}"))
        })
        .collect::<std::result::Result<Vec<_>, _>>()
        .map(SeedList)
}

fn parse_interval(s: &str) -> std::result::Result<(usize, usize), String> {
    let (a, b) = s.split_once(',').ok_or("expected start,end")?;
    let a: usize = a.trim().parse().map_err(|e| format!("bad start: {e}"))?;
    let b: usize = b.trim().parse().map_err(|e| format!("bad end: {e}"))?;
    if a > b {
        return Err(format!("start {a} is after end {b}"));
    }
    Ok((a, b))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn load_curve(args: &CurveArgs) -> Result<SimilarityCurve> {
    let file: CurveFile = read_json(&args.curve)?;
    let curve = match file.into_curve()? {
        LoadedCurve::Raw(raw) => {
            let frames = args.frames.unwrap_or(raw.len());
            condition(&raw, frames, Some(SmoothParams::default()))?
        }
        LoadedCurve::Similarity(c) if args.smooth => smooth_fitted(&c, SmoothParams::default())?,
        LoadedCurve::Similarity(c) => c,
    };
    Ok(curve)
}

fn cmd_ground(args: GroundArgs) -> Result<()> {
    let curve = load_curve(&args.curve)?;
    let window = args.window.unwrap_or_else(|| default_window(curve.len()));
    let g = ground(&curve, window, args.theta)?;
    let iou = args.gt.map(|(s, e)| {
        interval_iou(
            Interval::frames(g.predicted.0, g.predicted.1),
            Interval::frames(s, e),
        )
    });
    let mut out = json!({
        "center": g.moment.center,
        "window": [g.moment.window_start, g.moment.window_end()],
        "segments": g.segments,
        "best": g.best,
        "predicted": [g.predicted.0, g.predicted.1],
    });
    if let Some(iou) = iou {
        out["iou"] = json!(iou);
    }
    print_json(&out)
}

fn cmd_sample(args: SampleArgs) -> Result<()> {
    let curve = load_curve(&args.curve)?;
    let window = args.window.unwrap_or_else(|| default_window(curve.len()));
    let center = moment_center(&curve, window)?.center;
    let stream = RngStream::new(args.seed, format!("sample/{}", args.strategy));
    let out = sample(args.strategy, &curve, args.k, Some(center), &stream)?;
    print_json(&json!({
        "indices": out.set.indices,
        "center": center,
        "k_left": out.k_left,
        "k_right": out.k_right,
        "fallback": out.fallback,
    }))
}

fn cmd_loss(args: LossArgs) -> Result<()> {
    let file: TokenFile = read_json(&args.tokens)?;
    let tm = file.into_matrix()?;
    let logits = similarity_matrix(&tm);
    let loss = find_loss(&logits, &tm)?;
    let grad = find_loss_grad(&logits, &tm)?;
    let mut out = json!({
        "loss": loss,
        "logits": logits.outer_iter().map(|r| r.to_vec()).collect::<Vec<_>>(),
        "grad": grad.outer_iter().map(|r| r.to_vec()).collect::<Vec<_>>(),
    });
    if args.grad_check {
        let check = grad_check(&logits, &tm, DEFAULT_GRAD_STEP)?;
        out["grad_check"] = json!({
            "step": DEFAULT_GRAD_STEP,
            "max_abs_err": check.max_abs_err,
            "max_rel_err": check.max_rel_err,
            "checked": check.checked,
        });
    }
    print_json(&out)
}

#[derive(Serialize)]
struct FrameRow {
    frame: usize,
    j: f64,
    f: f64,
    score: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    baseline_j: Option<f64>,
}

fn cmd_propagate(args: PropagateArgs) -> Result<()> {
    let scenario: Scenario = read_json(&args.scenario)?;
    let m = scenario.materialize()?;
    let params = RunParams {
        k: args.k,
        lambda: args.lambda,
        ..RunParams::default()
    };
    let (run, out) = run_traced(&scenario, &m, args.anchors_from, &params, args.seed)?;
    let baseline = if args.baseline {
        let tracker = MockTracker::new(scenario.config.tracker, m.gt_masks.clone())?;
        let base = run_forward_baseline(m.gt_masks.len(), &tracker)?;
        Some(per_frame_jf(&base.masks, &m.gt_masks, params.boundary_tol)?)
    } else {
        None
    };

    let rows: Vec<FrameRow> = (0..run.per_frame_j.len())
        .map(|t| FrameRow {
            frame: t,
            j: run.per_frame_j[t],
            f: run.per_frame_f[t],
            score: out.scores[t],
            baseline_j: baseline.as_ref().map(|b| b[t].0),
        })
        .collect();
    if args.csv {
        let mut w = csv::Writer::from_writer(std::io::stdout());
        for row in &rows {
            w.serialize(row)?;
        }
        w.flush()?;
        return Ok(());
    }

    let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
    let mut report = json!({
        "scenario": run.scenario,
        "strategy": run.strategy,
        "seed": run.seed,
        "k": run.k,
        "lambda": args.lambda,
        "anchor": run.anchor,
        "anchor_protocol": run.anchor_protocol,
        "checkpoints": run.sample.indices,
        "frames": rows,
        "updates": out.log.events,
        "mean_j": run.jf.j_mean,
        "jf": run.jf.jf,
    });
    if let Some(b) = &baseline {
        let j: Vec<f64> = b.iter().map(|x| x.0).collect();
        let f: Vec<f64> = b.iter().map(|x| x.1).collect();
        report["baseline"] = json!({
            "mean_j": mean(&j),
            "jf": (mean(&j) + mean(&f)) / 2.0,
        });
    }
    print_json(&report)
}

fn cmd_gen(args: GenArgs) -> Result<()> {
    let config = match (args.config, args.preset) {
        (Some(path), _) => read_json::<ScenarioConfig>(&path)?,
        (None, Some(Preset::LateTargetDrift)) => ScenarioConfig::late_target_drift(),
        (None, Some(Preset::PerfectTracker)) => ScenarioConfig::perfect_tracker(),
        (None, None) => bail!("either --config or --preset is required"),
    };
    let config = ScenarioConfig {
        name: format!("{}-{}", config.name, args.seed),
        ..config
    };
    let (scenario, _) = gen_scenario(config, args.seed)?;
    write_file(
        &args.output,
        &(serde_json::to_string_pretty(&scenario)? + "\n"),
    )
}

fn load_corpus(dir: &Path) -> Result<Vec<Scenario>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading corpus {}", dir.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    paths.retain(|p| p.extension().is_some_and(|x| x == "json"));
    paths.sort();
    paths.iter().map(|p| read_json(p)).collect()
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    path.with_file_name(format!("{stem}{suffix}"))
}

fn cmd_compare(args: CompareArgs) -> Result<()> {
    let corpus = load_corpus(&args.corpus)?;
    let params = RunParams {
        k: args.k,
        theta: args.theta,
        lambda: args.lambda,
        window: args.window,
        ..RunParams::default()
    };
    let table = compare_strategies(
        &corpus,
        &args.strategies,
        &params,
        &args.seeds.0,
        args.workers,
    )?;
    let runs_csv = table.runs_csv()?;
    let summary_csv = table.summary_csv()?;
    let Some(out) = args.output else {
        print!("{runs_csv}");
        return Ok(());
    };
    write_file(&out, &runs_csv)?;
    write_file(&sibling(&out, ".summary.csv"), &summary_csv)?;
    if args.json {
        write_file(
            &sibling(&out, ".json"),
            &(serde_json::to_string_pretty(&table.runs)? + "\n"),
        )?;
        let summary = json!({ "anchor_protocol": table.anchor_protocol, "summary": table.summary });
        write_file(
            &sibling(&out, ".summary.json"),
            &(serde_json::to_string_pretty(&summary)? + "\n"),
        )?;
    }
    print!("{summary_csv}");
    Ok(())
}

fn is_validation(err: &anyhow::Error) -> bool {
    err.chain()
        .any(|e| e.is::<moment_core::Error>() || e.is::<serde_json::Error>())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Ground(a) => cmd_ground(a),
        Command::Sample(a) => cmd_sample(a),
        Command::Loss(a) => cmd_loss(a),
        Command::Propagate(a) => cmd_propagate(a),
        Command::Gen(a) => cmd_gen(a),
        Command::Compare(a) => cmd_compare(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            if is_validation(&err) {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
