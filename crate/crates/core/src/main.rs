use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;
use serde::Serialize;

use agcp::config::{validate_config, ConfigError, RunConfig};
use agcp::detector::DetectionsFile;
use agcp::metrics::{evaluate, MetricsReport, Sample};
use agcp::par;
use agcp::pipeline::{ablate, ablation_variants, run, scene_ground_truth, scene_seed, Axis};
use agcp::scenesim::generate_scene;

#[derive(Parser)]
#[command(name = "agcp", version, about = "Aerial-ground collaborative 3D detection on synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON config; missing keys take their defaults
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    scenes: Option<usize>,
    /// Worker threads (0 = all cores)
    #[arg(long, default_value_t = 0)]
    jobs: usize,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the scene set and write one scene file per scene
    Simulate(Common),
    /// Run the configured pipeline and write metrics.json and detections
    Run(Common),
    /// Re-score stored detection files against regenerated ground truth
    Eval {
        #[command(flatten)]
        common: Common,
        /// Directory of scene_XXXX.json detection files
        #[arg(long)]
        detections: PathBuf,
    },
    /// Sweep ablation axes on a shared scene set
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Comma-separated subset of agents,use_cdo,use_cdca,lambda
        #[arg(long, value_delimiter = ',', required = true)]
        axes: Vec<String>,
        /// Row label that deltas are taken against (default: first row)
        #[arg(long)]
        baseline: Option<String>,
    },
}

enum Failure {
    Config(Vec<ConfigError>),
    Runtime(String),
}

impl From<agcp::Error> for Failure {
    fn from(e: agcp::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

fn config_error(path: &str, message: impl Into<String>) -> Failure {
    Failure::Config(vec![ConfigError {
        path: path.into(),
        message: message.into(),
    }])
}

fn load_config(c: &Common) -> Result<RunConfig, Failure> {
    let text = match &c.config {
        Some(p) => fs::read_to_string(p).map_err(|e| config_error("", format!("cannot read {}: {e}", p.display())))?,
        None => String::new(),
    };
    let mut cfg = validate_config(&text).map_err(Failure::Config)?;
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(n) = c.scenes {
        cfg.scenes = n;
    }
    if let Some(o) = &c.out {
        cfg.output.dir = o.to_string_lossy().into_owned();
    }
    // overrides go through the same checks as the file
    let text = serde_json::to_string(&cfg)?;
    validate_config(&text).map_err(Failure::Config)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), Failure> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn scene_file_name(id: usize) -> String {
    format!("scene_{id:04}.json")
}

/// Row labels contain `/` and `=`; keep them as single path components.
fn label_dir(label: &str) -> String {
    label.chars().map(|c| if c.is_ascii_alphanumeric() || c == '+' || c == '-' { c } else { '_' }).collect()
}

#[derive(Serialize)]
struct MetricsFile<'a> {
    report: &'a MetricsReport,
    per_scene_map: &'a [f64],
    config: &'a RunConfig,
}

#[derive(Serialize)]
struct AblationFile<'a> {
    ablation: &'a agcp::pipeline::AblationReport,
    config: &'a RunConfig,
}

fn cmd_simulate(cfg: &RunConfig) -> Result<(), Failure> {
    let grid = cfg.grid.grid()?;
    let dir = Path::new(&cfg.output.dir).join("scenes");
    fs::create_dir_all(&dir)?;
    let scenes = par::map_range(cfg.scenes, |i| {
        generate_scene(&cfg.scene, &cfg.rig, &grid, scene_seed(cfg.seed, i)).map_err(|e| agcp::Error::Scene {
            scene_id: i,
            source: Box::new(e),
        })
    });
    for (i, s) in scenes.into_iter().enumerate() {
        write_json(&dir.join(scene_file_name(i)), &s?.to_file())?;
    }
    info!("wrote {} scenes to {}", cfg.scenes, dir.display());
    Ok(())
}

fn cmd_run(cfg: &RunConfig) -> Result<(), Failure> {
    let out = run(cfg)?;
    let dir = Path::new(&cfg.output.dir);
    if cfg.output.write_detections {
        for d in &out.detections {
            write_json(&dir.join("detections").join(scene_file_name(d.scene_id)), d)?;
        }
    }
    write_json(
        &dir.join("metrics.json"),
        &MetricsFile {
            report: &out.report,
            per_scene_map: &out.per_scene_map,
            config: cfg,
        },
    )?;
    println!("mAP {:.4}  NDS {:.4}", out.report.map, out.report.nds);
    Ok(())
}

fn cmd_eval(cfg: &RunConfig, det_dir: &Path) -> Result<(), Failure> {
    let grid = cfg.grid.grid()?;
    let mut paths: Vec<PathBuf> = fs::read_dir(det_dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Failure::Runtime(format!("no detection files in {}", det_dir.display())));
    }
    let mut samples = Vec::with_capacity(paths.len());
    for p in &paths {
        let f = DetectionsFile::from_json(&fs::read_to_string(p)?)?;
        let scene = generate_scene(&cfg.scene, &cfg.rig, &grid, f.seed).map_err(|e| agcp::Error::Scene {
            scene_id: f.scene_id,
            source: Box::new(e),
        })?;
        samples.push(Sample {
            preds: f.boxes,
            gts: scene_ground_truth(cfg, &scene)?,
        });
    }
    let report = evaluate(&samples, &cfg.metrics)?;
    let per_scene_map = samples
        .iter()
        .map(|s| evaluate(std::slice::from_ref(s), &cfg.metrics).map(|r| r.map))
        .collect::<agcp::Result<Vec<_>>>()?;
    write_json(
        &Path::new(&cfg.output.dir).join("metrics.json"),
        &MetricsFile {
            report: &report,
            per_scene_map: &per_scene_map,
            config: cfg,
        },
    )?;
    println!("mAP {:.4}  NDS {:.4}", report.map, report.nds);
    Ok(())
}

fn cmd_ablate(cfg: &RunConfig, axes: &[String], baseline: Option<&str>) -> Result<(), Failure> {
    let axes = axes
        .iter()
        .map(|a| Axis::parse(a))
        .collect::<agcp::Result<Vec<_>>>()
        .map_err(|e| config_error("axes", e.to_string()))?;
    let rows = ablation_variants(cfg, &axes).map_err(|e| config_error("axes", e.to_string()))?;
    if let Some(b) = baseline {
        if !rows.iter().any(|v| v.label == b) {
            let labels: Vec<&str> = rows.iter().map(|v| v.label.as_str()).collect();
            return Err(config_error("baseline", format!("`{b}` is not one of {labels:?}")));
        }
    }
    let report = ablate(cfg, &axes, baseline)?;
    let dir = Path::new(&cfg.output.dir);
    fs::create_dir_all(dir)?;
    let csv = report.to_csv();
    fs::write(dir.join("ablation.csv"), &csv)?;
    write_json(&dir.join("ablation.json"), &AblationFile { ablation: &report, config: cfg })?;
    if cfg.output.write_detections {
        for row in &report.rows {
            for (i, (seed, boxes)) in report.scene_seeds.iter().zip(&row.detections).enumerate() {
                let f = DetectionsFile::new(i, *seed, &row.label, boxes.clone());
                write_json(&dir.join("detections").join(label_dir(&row.label)).join(scene_file_name(i)), &f)?;
            }
        }
    }
    print!("{csv}");
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let common = match &cli.cmd {
        Cmd::Simulate(c) | Cmd::Run(c) => c,
        Cmd::Eval { common, .. } | Cmd::Ablate { common, .. } => common,
    };
    let result = load_config(common).and_then(|cfg| {
        par::with_threads(common.jobs, || match &cli.cmd {
            Cmd::Simulate(_) => cmd_simulate(&cfg),
            Cmd::Run(_) => cmd_run(&cfg),
            Cmd::Eval { detections, .. } => cmd_eval(&cfg, detections),
            Cmd::Ablate { axes, baseline, .. } => cmd_ablate(&cfg, axes, baseline.as_deref()),
        })
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(errs)) => {
            for e in errs {
                eprintln!("config error: {e}");
            }
            ExitCode::from(2)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(3)
        }
    }
}
