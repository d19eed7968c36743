//! Command-line driver: simulate, track, eval, bench and render.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use voxtrack_core::bench::{bench_table, run_bench, scene_occupancy};
use voxtrack_core::config::{parse_grid, OutputFormat, RunConfig};
use voxtrack_core::error::{Error, Result};
use voxtrack_core::io::{read_jsonl, write_json, write_jsonl, TRACKS_FILE};
use voxtrack_core::metrics::evaluate;
use voxtrack_core::pipeline::{eval_frames, Estimator, Pipeline, StageTimes};
use voxtrack_core::render::write_renders;
use voxtrack_core::simulator::{export_dataset, sample_scene, Dataset};
use voxtrack_core::skeleton::{LIMBS, NUM_JOINTS};
use voxtrack_core::tracker::TrackRecord;

#[derive(Debug, Parser)]
#[command(
    name = "voxtrack",
    version,
    about = "Voxel-based multi-view 3D pose estimation and tracking"
)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// JSON run configuration; missing fields take their defaults.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Output directory (simulate, render) or file (track, eval, bench).
    #[arg(long, global = true, value_name = "PATH")]
    pub out: Option<PathBuf>,
    /// Override the scenario seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Camera count for simulate; number of leading views used by track.
    #[arg(long, global = true)]
    pub views: Option<usize>,
    /// Voxel counts, e.g. 160x160x64.
    #[arg(long, global = true, value_name = "XxYxZ")]
    pub grid: Option<String>,
    #[arg(long, global = true, value_enum)]
    pub format: Option<Format>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Table,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample a scene and write cameras, ground truth and optional heatmap dumps.
    Simulate {
        /// Also write per-view heatmap and Re-ID dumps.
        #[arg(long)]
        dump_heatmaps: bool,
    },
    /// Estimate and track poses on a dataset directory.
    Track { dataset: PathBuf },
    /// Score tracks against the dataset ground truth.
    Eval {
        dataset: PathBuf,
        /// Track records (defaults to DATASET/tracks.jsonl).
        #[arg(long)]
        tracks: Option<PathBuf>,
    },
    /// Time dense against sparse 3D convolution.
    Bench,
    /// Write SVG views of tracks and a top-down trajectory plot.
    Render {
        dataset: PathBuf,
        #[arg(long)]
        tracks: Option<PathBuf>,
    },
}

/// Process exit code for an error: 1 validation, 2 I/O, 3 invariant.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Io { .. } => 2,
        Error::Invariant(_) => 3,
        Error::Contract(_) | Error::Config { .. } | Error::Parse { .. } | Error::Data { .. } => 1,
    }
}

/// Parse `args` (including the program name), run, and return the exit code.
pub fn main_with<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let text = e.render().to_string();
            let _ = if code == 0 {
                write!(out, "{text}")
            } else {
                write!(err, "{text}")
            };
            return code;
        }
    };
    match run(cli, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}

/// Load the configuration and apply command-line overrides.
pub fn load_config(g: &GlobalArgs) -> Result<RunConfig> {
    let mut cfg = match &g.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = g.seed {
        cfg.scenario.seed = s;
    }
    if let Some(v) = g.views {
        cfg.scenario.cameras.count = v;
    }
    if let Some(s) = &g.grid {
        cfg.grid_bins = parse_grid(s)?;
    }
    if let Some(f) = g.format {
        cfg.output.format = match f {
            Format::Json => OutputFormat::Json,
            Format::Table => OutputFormat::Table,
        };
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn run(cli: Cli, out: &mut dyn Write) -> Result<()> {
    let cfg = load_config(&cli.global)?;
    let g = &cli.global;
    let text = match cli.command {
        Command::Simulate { dump_heatmaps } => simulate(&cfg, g, dump_heatmaps)?,
        Command::Track { dataset } => track(&cfg, g, &dataset)?,
        Command::Eval { dataset, tracks } => eval(&cfg, g, &dataset, tracks)?,
        Command::Bench => bench(&cfg, g)?,
        Command::Render { dataset, tracks } => render(&cfg, g, &dataset, tracks)?,
    };
    out.write_all(text.as_bytes())
        .map_err(|e| Error::io(Path::new("<stdout>"), e))
}

fn require_out(g: &GlobalArgs, cmd: &str) -> Result<PathBuf> {
    g.out
        .clone()
        .ok_or_else(|| Error::config("out", format!("{cmd} needs --out DIR")))
}

fn pretty(v: &serde_json::Value) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("json values serialize");
    s.push('\n');
    s
}

fn simulate(cfg: &RunConfig, g: &GlobalArgs, dump: bool) -> Result<String> {
    let dir = require_out(g, "simulate")?;
    let scene = sample_scene(&cfg.scenario)?;
    export_dataset(&scene, &dir, dump || cfg.output.dump_heatmaps)?;
    let (frames, persons, views) = (cfg.scenario.frames, scene.num_persons(), scene.cameras.len());
    Ok(match cfg.output.format {
        OutputFormat::Json => pretty(&json!({
            "dataset": dir.display().to_string(),
            "frames": frames,
            "persons": persons,
            "views": views,
        })),
        OutputFormat::Table => format!(
            "wrote {} ({frames} frames, {persons} persons, {views} views)\n",
            dir.display()
        ),
    })
}

/// Records of every frame plus per-frame stage timings.
pub fn track_dataset(
    cfg: &RunConfig,
    dataset: &Dataset,
    views: Option<usize>,
) -> Result<(Vec<TrackRecord>, Vec<StageTimes>)> {
    let available = dataset.cameras.len();
    let n = views.unwrap_or(available);
    if n == 0 || n > available {
        return Err(Error::config(
            "views",
            format!("dataset has {available} views, asked for {n}"),
        ));
    }
    let grid = dataset.config.grid(cfg.grid_bins)?;
    let est = Estimator::new(
        &grid,
        dataset.cameras[..n].to_vec(),
        dataset.config.heatmap_stride,
        cfg.pipeline,
    )?;
    let mut pipeline = Pipeline::new(est, cfg.tracker)?;
    let mut records = Vec::new();
    let mut times = Vec::new();
    for f in 0..dataset.config.frames {
        let mut obs = dataset.observations(f)?;
        obs.heatmaps.truncate(n);
        obs.reid.truncate(n);
        let step = pipeline.step(&obs)?;
        records.extend(step.records);
        times.push(step.times);
    }
    Ok((records, times))
}

fn track(cfg: &RunConfig, g: &GlobalArgs, dir: &Path) -> Result<String> {
    let dataset = Dataset::load(dir)?;
    let (records, times) = track_dataset(cfg, &dataset, g.views)?;
    let path = g.out.clone().unwrap_or_else(|| dir.join(TRACKS_FILE));
    write_jsonl(&path, &records)?;
    let m = StageTimes::mean(&times);
    Ok(match cfg.output.format {
        OutputFormat::Json => pretty(&json!({
            "tracks": path.display().to_string(),
            "frames": times.len(),
            "records": records.len(),
            "mean_ms": m,
            "mean_total_ms": m.total_ms(),
        })),
        OutputFormat::Table => {
            let mut s = format!(
                "wrote {} ({} records, {} frames)\n",
                path.display(),
                records.len(),
                times.len()
            );
            s.push_str(&format!("{:<18} {:>10}\n", "stage", "mean ms"));
            for (name, v) in [
                ("feature volume", m.volume_ms),
                ("joint estimation", m.jen_ms),
                ("pose decoding", m.arn_ms),
                ("re-id fusion", m.reid_ms),
                ("tracking", m.tracking_ms),
                ("total", m.total_ms()),
            ] {
                s.push_str(&format!("{name:<18} {v:>10.2}\n"));
            }
            s
        }
    })
}

fn eval(cfg: &RunConfig, g: &GlobalArgs, dir: &Path, tracks: Option<PathBuf>) -> Result<String> {
    let dataset = Dataset::load(dir)?;
    let tracks = tracks.unwrap_or_else(|| dir.join(TRACKS_FILE));
    let records: Vec<TrackRecord> = read_jsonl(&tracks)?;
    let frames = eval_frames(&dataset.gt, &records)?;
    let report = evaluate(&frames, &LIMBS, NUM_JOINTS, &cfg.metrics, &cfg.ap_thresholds_mm)?;
    if let Some(p) = &g.out {
        write_json(p, &report)?;
    }
    Ok(match cfg.output.format {
        OutputFormat::Json => pretty(&serde_json::to_value(&report).expect("report serializes")),
        OutputFormat::Table => report.to_table(),
    })
}

fn bench(cfg: &RunConfig, g: &GlobalArgs) -> Result<String> {
    let rows = run_bench(&cfg.bench)?;
    let occupancy = scene_occupancy(&cfg.scenario, cfg.grid_bins, cfg.pipeline.sparsify_threshold)?;
    let doc = json!({ "rows": rows, "scene_occupancy": occupancy });
    if let Some(p) = &g.out {
        write_json(p, &doc)?;
    }
    Ok(match cfg.output.format {
        OutputFormat::Json => pretty(&doc),
        OutputFormat::Table => format!(
            "{}scene occupancy at {}x{}x{}: {:.2}%\n",
            bench_table(&rows),
            cfg.grid_bins[0],
            cfg.grid_bins[1],
            cfg.grid_bins[2],
            100.0 * occupancy
        ),
    })
}

fn render(cfg: &RunConfig, g: &GlobalArgs, dir: &Path, tracks: Option<PathBuf>) -> Result<String> {
    let out = require_out(g, "render")?;
    let dataset = Dataset::load(dir)?;
    let tracks = tracks.unwrap_or_else(|| dir.join(TRACKS_FILE));
    let records: Vec<TrackRecord> = read_jsonl(&tracks)?;
    let space = &dataset.config.space;
    let area = [
        space.origin[0],
        space.origin[1],
        space.origin[0] + space.extent[0],
        space.origin[1] + space.extent[1],
    ];
    let n = write_renders(&out, &records, &dataset.cameras, dataset.config.frames, area)?;
    Ok(match cfg.output.format {
        OutputFormat::Json => pretty(&json!({ "dir": out.display().to_string(), "files": n })),
        OutputFormat::Table => format!("wrote {n} files to {}\n", out.display()),
    })
}
