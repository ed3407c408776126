use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use shade4d::checkpoint::Checkpoint;
use shade4d::parallel::Parallelism;
use shade4d::pipeline::{
    checkpoint_poses, evaluate, model_from_checkpoint, run_gradcheck, run_pretrain, run_train, view_sweep, TrainConfig, CHECKPOINT_FILE,
    METRICS_FILE, PRETRAIN_CHECKPOINT_FILE, SWEEP_VIEWS,
};
use shade4d::renderer::{render_image, RenderMode};
use shade4d::scenegen::{generate_dataset, load_scene_record, load_split, GenerateOptions, SceneSpec, Split};
use shade4d::Real;

#[derive(Parser)]
#[command(name = "shade4d", version, about = "Dynamic scene reconstruction with tri-plane fields and latent refinement")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic scene into a dataset directory.
    Gen(GenArgs),
    /// Fit the latent prior on a dataset.
    Pretrain(PretrainArgs),
    /// Train the full model on a dataset.
    Train(TrainArgs),
    /// Render one frame from a checkpoint.
    Render(RenderArgs),
    /// Score a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Compare analytic and finite-difference gradients.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct GenArgs {
    /// Scene description (JSON); `moving_sphere` selects the built-in scene.
    #[arg(long)]
    spec: String,
    #[arg(long, default_value_t = 5)]
    views: usize,
    #[arg(long, default_value_t = 8)]
    times: usize,
    /// Image size as WIDTHxHEIGHT.
    #[arg(long, default_value = "64x64", value_parser = parse_size)]
    size: (usize, usize),
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    exec: ExecArgs,
}

#[derive(Args)]
struct ExecArgs {
    /// Run on a single thread.
    #[arg(long)]
    sequential: bool,
}

impl ExecArgs {
    fn parallelism(&self) -> Option<Parallelism> {
        self.sequential.then_some(Parallelism::Sequential)
    }
}

/// Flags shared by both training stages; each overrides its config key.
#[derive(Args)]
struct CommonTrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr: Option<Real>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    rays_per_frame: Option<usize>,
    #[command(flatten)]
    exec: ExecArgs,
}

#[derive(Args)]
struct PretrainArgs {
    #[command(flatten)]
    common: CommonTrainArgs,
    /// Overrides `pretrain_steps`.
    #[arg(long)]
    steps: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: CommonTrainArgs,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    plane_lr: Option<Real>,
    #[arg(long)]
    no_deformation: bool,
    #[arg(long)]
    no_diffusion: bool,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    time: Real,
    /// Index into the training poses stored with the checkpoint.
    #[arg(long, default_value_t = 0)]
    pose: usize,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    exec: ExecArgs,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Retrain at several view counts and score each run.
    #[arg(long)]
    view_sweep: bool,
    #[command(flatten)]
    exec: ExecArgs,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long)]
    module: Option<String>,
}

fn parse_size(s: &str) -> Result<(usize, usize), String> {
    let (w, h) = s.split_once(['x', 'X']).ok_or_else(|| format!("expected WIDTHxHEIGHT, got `{s}`"))?;
    let parse = |v: &str| v.trim().parse::<usize>().ok().filter(|&n| n > 0).ok_or_else(|| format!("bad image size `{s}`"));
    Ok((parse(w)?, parse(h)?))
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<shade4d::Error> for Failure {
    fn from(e: shade4d::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

type CliResult = Result<(), Failure>;

fn usage(e: impl std::fmt::Display) -> Failure {
    Failure::Usage(e.to_string())
}

fn print_json(value: &impl serde::Serialize) -> CliResult {
    let text = serde_json::to_string_pretty(value).map_err(|e| Failure::Runtime(e.to_string()))?;
    println!("{text}");
    Ok(())
}

fn load_spec(arg: &str) -> Result<SceneSpec, Failure> {
    let spec = if arg == "moving_sphere" {
        SceneSpec::moving_sphere()
    } else {
        let text = std::fs::read_to_string(arg).map_err(|e| usage(format!("{arg}: {e}")))?;
        serde_json::from_str(&text).map_err(|e| usage(format!("{arg}: {e}")))?
    };
    spec.validate().map_err(usage)?;
    Ok(spec)
}

fn gen(a: GenArgs) -> CliResult {
    let spec = load_spec(&a.spec)?;
    if a.views == 0 || a.times == 0 {
        return Err(usage("--views and --times must be positive"));
    }
    let opts = GenerateOptions {
        views: a.views,
        times: a.times,
        width: a.size.0,
        height: a.size.1,
        seed: a.seed,
    };
    let data = generate_dataset(&spec, &opts, &a.out, a.exec.parallelism().unwrap_or_default())?;
    eprintln!("wrote {} training frames to {}", data.len(), a.out.display());
    Ok(())
}

fn load_config(c: &CommonTrainArgs) -> Result<TrainConfig, Failure> {
    let mut cfg = TrainConfig::load(&c.config).map_err(usage)?;
    if let Some(v) = &c.data {
        cfg.data = Some(v.clone());
    }
    if let Some(v) = &c.out {
        cfg.out = Some(v.clone());
    }
    if let Some(v) = &c.resume {
        cfg.resume = Some(v.clone());
    }
    if let Some(v) = c.seed {
        cfg.seed = v;
    }
    if let Some(v) = c.lr {
        cfg.lr = v;
    }
    if let Some(v) = c.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = c.rays_per_frame {
        cfg.rays_per_frame = v;
    }
    if let Some(p) = c.exec.parallelism() {
        cfg.render.parallelism = p;
    }
    Ok(cfg)
}

fn finish_config(cfg: &TrainConfig) -> CliResult {
    cfg.validate().map_err(usage)?;
    for (key, v) in [("data", &cfg.data), ("out", &cfg.out)] {
        if v.is_none() {
            return Err(usage(format!("`{key}` must be set in the config or with --{key}")));
        }
    }
    Ok(())
}

fn pretrain_cmd(a: PretrainArgs) -> CliResult {
    let mut cfg = load_config(&a.common)?;
    if let Some(v) = a.steps {
        cfg.pretrain_steps = v;
    }
    finish_config(&cfg)?;
    let outcome = run_pretrain(&cfg)?;
    if let Some(out) = &cfg.out {
        eprintln!("wrote {}", out.join(PRETRAIN_CHECKPOINT_FILE).display());
    }
    print_json(&outcome.metrics)
}

fn train_cmd(a: TrainArgs) -> CliResult {
    let mut cfg = load_config(&a.common)?;
    if let Some(v) = a.steps {
        cfg.steps = v;
    }
    if let Some(v) = a.plane_lr {
        cfg.plane_lr = Some(v);
    }
    cfg.ablation.no_deformation |= a.no_deformation;
    cfg.ablation.no_diffusion |= a.no_diffusion;
    finish_config(&cfg)?;
    let outcome = run_train(&cfg)?;
    let last = outcome.metrics.records.last();
    if let (Some(out), Some(r)) = (&cfg.out, last) {
        eprintln!(
            "step {}: total {:.6} ({}, {})",
            r.step,
            r.total,
            out.join(CHECKPOINT_FILE).display(),
            out.join(METRICS_FILE).display()
        );
    }
    Ok(())
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint, Failure> {
    if !path.exists() {
        return Err(usage(format!("{}: no such checkpoint", path.display())));
    }
    Ok(Checkpoint::load(path)?)
}

fn render_cmd(a: RenderArgs) -> CliResult {
    if !(0.0..=1.0).contains(&a.time) {
        return Err(usage("--time must lie in [0, 1]"));
    }
    let ckpt = load_checkpoint(&a.ckpt)?;
    let (model, mut cfg) = model_from_checkpoint(&ckpt)?;
    if let Some(p) = a.exec.parallelism() {
        cfg.render.parallelism = p;
    }
    let poses = checkpoint_poses(&ckpt)?;
    if a.pose >= poses.poses.len() {
        return Err(usage(format!("--pose {} out of range (checkpoint has {} poses)", a.pose, poses.poses.len())));
    }
    let cam = poses.camera(a.pose)?;
    let mode = RenderMode {
        deform: !cfg.ablation.no_deformation,
        refine: cfg.uses_refinement(),
    };
    let img = render_image(&model, &cam, a.time, &cfg.render, mode)?;
    img.save_png(&a.out)?;
    eprintln!("wrote {}", a.out.display());
    Ok(())
}

fn eval_cmd(a: EvalArgs) -> CliResult {
    let ckpt = load_checkpoint(&a.ckpt)?;
    let (model, mut cfg) = model_from_checkpoint(&ckpt)?;
    if let Some(p) = a.exec.parallelism() {
        cfg.render.parallelism = p;
    }
    let split = if a.data.join(Split::Test.metadata_file()).exists() {
        Split::Test
    } else {
        Split::Train
    };
    let data = load_split(&a.data, split, cfg.render.background)?;
    if a.view_sweep {
        let (spec, gen) = load_scene_record(&a.data)?;
        let work = tempfile::tempdir().map_err(|e| Failure::Runtime(format!("work directory: {e}")))?;
        let rows = view_sweep(&cfg, &spec, &gen, &data, work.path(), &SWEEP_VIEWS)?;
        return print_json(&serde_json::json!({ "split": split.name(), "sweep": rows }));
    }
    let report = evaluate(&model, &cfg, &data)?;
    print_json(&serde_json::json!({ "split": split.name(), "report": report }))
}

fn gradcheck_cmd(a: GradcheckArgs) -> CliResult {
    if let Some(m) = &a.module {
        if !shade4d::pipeline::MODULES.contains(&m.as_str()) {
            return Err(usage(format!(
                "unknown module `{m}`; expected one of {}",
                shade4d::pipeline::MODULES.join(", ")
            )));
        }
    }
    let reports = run_gradcheck(a.module.as_deref())?;
    for r in &reports {
        println!(
            "{} {:<20} max rel error {:.3e}",
            if r.passed { "PASS" } else { "FAIL" },
            r.module,
            r.max_rel_error
        );
    }
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed).map(|r| r.module.as_str()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Runtime(format!("gradient check failed for {}", failed.join(", "))))
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Gen(a) => gen(a),
        Command::Pretrain(a) => pretrain_cmd(a),
        Command::Train(a) => train_cmd(a),
        Command::Render(a) => render_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Gradcheck(a) => gradcheck_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
