//! The `hg3` command line: `gen`, `train`, `render`, `eval` and `ablate`.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::evalio::{write_pfm, write_png};
use crate::geometry::Split;
use crate::scenes::{generate_dataset, read_json, write_json, GenConfig, SceneDataset};
use crate::training::{
    ablation_rows, evaluate, load_model, prepare_output, render_view, train, write_table, AblationRow, EvalReport,
    RunFiles, TrainConfig, TrainError,
};

#[derive(Debug, Parser)]
#[command(name = "hg3", version, about = "Sparse-view radiance fields with depth and semantic guidance")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset.
    Gen(GenArgs),
    /// Train coarse and fine fields.
    Train(TrainArgs),
    /// Render a split with a trained checkpoint.
    Render(RenderArgs),
    /// Render and score a split.
    Eval(EvalArgs),
    /// Run the five comparison configurations.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
pub struct Common {
    /// Overwrite a non-empty output directory.
    #[arg(long)]
    pub force: bool,
    /// Worker threads (pins the pool size for reproducibility).
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    /// Generation config (JSON); defaults are used when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of training views.
    #[arg(long, value_parser = parse_views)]
    pub views: Option<usize>,
    /// Keypoint mismatch used when triangulating priors.
    #[arg(long)]
    pub mismatch: Option<f64>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Run config (JSON).
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub iters: Option<u64>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum SplitArg {
    Train,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
    /// Run config providing sample counts; defaults to `config.json` beside the checkpoint.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Base run config; the toy preset when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub iters: Option<u64>,
    #[command(flatten)]
    pub common: Common,
}

fn parse_views(s: &str) -> Result<usize, String> {
    match s {
        "3" | "6" | "9" => Ok(s.parse().expect("literal digit")),
        _ => Err(format!("expected 3, 6 or 9, got {s:?}")),
    }
}

/// A training run as one JSON document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: PathBuf,
    pub out: PathBuf,
    #[serde(default = "TrainConfig::toy")]
    pub train: TrainConfig,
}

/// Parses arguments, runs the command and maps failures to exit codes:
/// 2 for a non-finite loss, 1 for anything else.
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::new().filter_or("HG3_LOG", "info")).try_init();
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(64) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            if let Some(TrainError::NonFinite { dump, .. }) = e.downcast_ref::<TrainError>() {
                eprintln!("error: {e:#}");
                eprintln!("diagnostic dump: {dump}");
                return ExitCode::from(2);
            }
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

pub fn run(cmd: Command) -> anyhow::Result<()> {
    match cmd {
        Command::Gen(a) => cmd_gen(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Render(a) => cmd_render(&a),
        Command::Eval(a) => cmd_eval(&a).map(|_| ()),
        Command::Ablate(a) => cmd_ablate(&a).map(|_| ()),
    }
}

fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> anyhow::Result<T> {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads.unwrap_or(0)).build()?;
    Ok(pool.install(f))
}

pub fn cmd_gen(a: &GenArgs) -> anyhow::Result<()> {
    let mut cfg: GenConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => GenConfig::default(),
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(v) = a.views {
        cfg.rig.n_train = v;
    }
    if let Some(m) = a.mismatch {
        cfg.priors.mismatch_delta = m;
    }
    let ds = with_threads(a.common.threads, || generate_dataset(&cfg))??;
    ds.save(&a.out, a.common.force)?;
    log::info!(
        "wrote {} views and {} priors to {}",
        ds.records.len(),
        ds.priors.len(),
        a.out.display()
    );
    Ok(())
}

fn load_run_config(path: &Path) -> anyhow::Result<RunConfig> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

pub fn cmd_train(a: &TrainArgs) -> anyhow::Result<()> {
    let mut run = load_run_config(&a.config)?;
    if let Some(o) = &a.out {
        run.out = o.clone();
    }
    if let Some(d) = &a.dataset {
        run.dataset = d.clone();
    }
    if let Some(s) = a.seed {
        run.train.seed = s;
    }
    if let Some(n) = a.iters {
        run.train.total_iterations = n;
    }
    if let Some(t) = a.common.threads {
        run.train.threads = t;
    }
    run.train.validate()?;
    let ds = SceneDataset::load(&run.dataset)?;
    prepare_output(&run.out, a.common.force)?;
    write_json(&run.out.join("config.json"), &run)?;
    let files = RunFiles { dir: run.out.clone() };
    let state = train(&ds, &run.train, Some(&files))?;
    log::info!("finished {} iterations; model at {}", state.iteration, files.model().display());
    Ok(())
}

fn render_config_for(checkpoint: &Path, explicit: Option<&Path>) -> anyhow::Result<TrainConfig> {
    let beside = checkpoint.parent().map(|p| p.join("config.json"));
    let path = explicit.map(Path::to_path_buf).or(beside.filter(|p| p.exists()));
    Ok(match path {
        Some(p) => load_run_config(&p)?.train,
        None => TrainConfig::toy(),
    })
}

pub fn cmd_render(a: &RenderArgs) -> anyhow::Result<()> {
    let ds = SceneDataset::load(&a.dataset)?;
    let cfg = render_config_for(&a.checkpoint, a.config.as_deref())?;
    let (coarse, fine) = load_model(&a.checkpoint, ds.bounds())?;
    prepare_output(&a.out, a.common.force)?;
    let views = ds.indices(a.split.into());
    if views.is_empty() {
        bail!("split has no views");
    }
    with_threads(a.common.threads, || -> anyhow::Result<()> {
        for &v in &views {
            let r = render_view(&coarse, &fine, &ds.cameras[v], &cfg.render, v as u64)?;
            let name = &ds.records[v].image;
            write_png(&a.out.join(format!("{name}.png")), &r.image)?;
            write_pfm(&a.out.join(format!("{name}_depth.pfm")), &r.depth)?;
        }
        Ok(())
    })??;
    Ok(())
}

pub fn cmd_eval(a: &EvalArgs) -> anyhow::Result<EvalReport> {
    let ds = SceneDataset::load(&a.dataset)?;
    let cfg = render_config_for(&a.checkpoint, a.config.as_deref())?;
    let (coarse, fine) = load_model(&a.checkpoint, ds.bounds())?;
    if let Some(o) = &a.out {
        prepare_output(o, a.common.force)?;
    }
    let views = ds.indices(a.split.into());
    let report = with_threads(a.common.threads, || {
        evaluate(&ds, &views, &coarse, &fine, &cfg.render, a.out.as_deref())
    })??;
    println!(
        "psnr {:.3}  ssim {:.4}  depth_rmse {}",
        report.psnr,
        report.ssim,
        report.depth_rmse.map_or("-".into(), |d| format!("{d:.4}"))
    );
    if let Some(o) = &a.out {
        write_json(&o.join("metrics.json"), &report)?;
    }
    Ok(report)
}

pub fn cmd_ablate(a: &AblateArgs) -> anyhow::Result<Vec<AblationRow>> {
    let ds = SceneDataset::load(&a.dataset)?;
    let mut base = match &a.config {
        Some(p) => load_run_config(p)?.train,
        None => TrainConfig::toy(),
    };
    if let Some(s) = a.seed {
        base.seed = s;
    }
    if let Some(n) = a.iters {
        base.total_iterations = n;
    }
    if let Some(t) = a.common.threads {
        base.threads = t;
    }
    prepare_output(&a.out, a.common.force)?;
    let mut rows = Vec::new();
    for (name, cfg) in ablation_rows(&base) {
        let dir = a.out.join(name.replace('+', "_"));
        std::fs::create_dir_all(&dir)?;
        let run = RunConfig {
            dataset: a.dataset.clone(),
            out: dir.clone(),
            train: cfg.clone(),
        };
        write_json(&dir.join("config.json"), &run)?;
        log::info!("ablation row {name}");
        let state = train(&ds, &cfg, Some(&RunFiles { dir: dir.clone() }))?;
        let report = with_threads(a.common.threads, || {
            evaluate(&ds, &ds.test(), &state.coarse, &state.fine, &cfg.render, None)
        })??;
        write_json(&dir.join("metrics.json"), &report)?;
        rows.push(AblationRow {
            name: name.to_string(),
            psnr: report.psnr,
            ssim: report.ssim,
            depth_rmse: report.depth_rmse,
        });
    }
    write_table(&a.out, &rows)?;
    for r in &rows {
        println!(
            "{:<14} psnr {:>7.3}  ssim {:.4}  depth_rmse {}",
            r.name,
            r.psnr,
            r.ssim,
            r.depth_rmse.map_or("-".into(), |d| format!("{d:.4}"))
        );
    }
    Ok(rows)
}
