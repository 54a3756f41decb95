use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use casgnn::ablation::{run_ablation, write_csv, AblationConfig};
use casgnn::checkpoint::Checkpoint;
use casgnn::config::RunConfig;
use casgnn::data::{
    generate_dataset, load_dataset, read_pgm, read_ppm, save_dataset, write_pgm, GenConfig, Regime, SceneSample,
};
use casgnn::metrics::write_report;
use casgnn::model::{parse_size, Mode, Model};
use casgnn::tensor::OpKind;
use casgnn::train::{evaluate, evaluate_with, train, write_loss_log};
use casgnn::verify::{run_suite, Scope};
use casgnn::{Error, Result};

/// Exit code when a verification suite reports a failure.
const VERIFY_FAILED: u8 = 5;

/// Cascade graph reasoning for RGB-D salient object detection.
#[derive(Parser)]
#[command(name = "casgnn", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic RGB-D dataset.
    GenData(GenDataArgs),
    /// Train a model and write a checkpoint plus `loss.csv` beside it.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset; writes metrics.csv and pr_curve.csv.
    Eval(EvalArgs),
    /// Predict the saliency map of one image pair.
    Infer(InferArgs),
    /// Run finite-difference gradient checks at double precision.
    Gradcheck(GradcheckArgs),
    /// Train and score every ablation arm; writes ablation.csv.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 16)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Side length in pixels, or HxW.
    #[arg(long, default_value = "64", value_parser = size_arg)]
    size: (usize, usize),
    /// color, depth, both or mixed.
    #[arg(long, default_value = "mixed", value_parser = regime_arg)]
    regime: Regime,
    /// Accepted for symmetry; generation is always reproducible.
    #[arg(long)]
    deterministic: bool,
}

/// Training overrides. Each flag beats the config file, which beats the
/// built-in default.
#[derive(Args, Clone, Default)]
struct TrainFlags {
    /// key=value file (`#` comments); see the README for the keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// fusion, hr or cgr.
    #[arg(long, value_parser = mode_arg)]
    mode: Option<Mode>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Seeds both initialization and batch order.
    #[arg(long)]
    seed: Option<u64>,
    /// Accepted for symmetry; training is always reproducible.
    #[arg(long)]
    deterministic: bool,
}

impl TrainFlags {
    /// Defaults, then the file, then the flags. Returns whether `data.size`
    /// was given explicitly.
    fn resolve(&self) -> Result<(RunConfig, bool)> {
        let mut cfg = RunConfig::default();
        let mut sized = false;
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path).map_err(|e| io_error(path, e))?;
            cfg.apply_text(&text, path)?;
            sized = text
                .lines()
                .any(|l| l.split('#').next().unwrap_or("").trim_start().starts_with("data.size"));
        }
        if let Some(m) = self.mode {
            cfg.model.mode = m;
        }
        if let Some(v) = self.steps {
            cfg.train.steps = v;
        }
        if let Some(v) = self.batch {
            cfg.train.batch = v;
        }
        if let Some(v) = self.lr {
            cfg.train.lr = v;
        }
        if let Some(v) = self.seed {
            cfg.model.seed = v;
            cfg.train.seed = v;
        }
        Ok((cfg, sized))
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    flags: TrainFlags,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, required_unless_present = "oracle_gt")]
    ckpt: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Refuse checkpoints trained with a different head.
    #[arg(long, value_parser = mode_arg)]
    mode: Option<Mode>,
    /// Testing hook: score the ground truth itself instead of a model.
    #[arg(long)]
    oracle_gt: bool,
    #[arg(long)]
    deterministic: bool,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    rgb: PathBuf,
    #[arg(long)]
    depth: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    deterministic: bool,
}

#[derive(Args)]
struct GradcheckArgs {
    /// ops, gr, cascade or all.
    #[arg(long, default_value = "all")]
    scope: String,
    /// Testing hook: corrupt the backward rule of this operation.
    #[arg(long, value_parser = op_arg)]
    inject_fault: Option<OpKind>,
}

#[derive(Args)]
struct AblateArgs {
    /// Training samples.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 3)]
    seeds: u64,
    /// Evaluation samples; without it 64 held-out scenes are generated.
    #[arg(long)]
    eval: Option<PathBuf>,
    /// Worker threads.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[command(flatten)]
    flags: TrainFlags,
}

fn size_arg(s: &str) -> std::result::Result<(usize, usize), String> {
    parse_size(s).map_err(|e| e.to_string())
}

fn regime_arg(s: &str) -> std::result::Result<Regime, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn mode_arg(s: &str) -> std::result::Result<Mode, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn op_arg(s: &str) -> std::result::Result<OpKind, String> {
    OpKind::from_name(s).ok_or_else(|| {
        let names: Vec<_> = OpKind::DIFFERENTIABLE.iter().map(|k| k.name()).collect();
        format!("unknown operation `{s}` (one of {})", names.join(", "))
    })
}

fn io_error(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.to_owned(),
        source: e,
    }
}

fn gen_data(a: GenDataArgs) -> Result<u8> {
    let cfg = GenConfig {
        size: a.size,
        regime: a.regime,
        ..GenConfig::default()
    };
    let samples = generate_dataset(a.seed, a.count, &cfg)?;
    save_dataset(&a.out, &samples)?;
    eprintln!("wrote {} samples to {}", samples.len(), a.out.display());
    Ok(0)
}

fn load_sized(dir: &Path) -> Result<(Vec<SceneSample>, (usize, usize))> {
    let data = load_dataset(dir)?;
    let size = data
        .first()
        .map(SceneSample::size)
        .ok_or_else(|| Error::Usage(format!("dataset {} is empty", dir.display())))?;
    if let Some(s) = data.iter().find(|s| s.size() != size) {
        return Err(Error::Usage(format!(
            "sample {} is {:?}, others are {:?}",
            s.id,
            s.size(),
            size
        )));
    }
    Ok((data, size))
}

/// Points the model at the dataset size unless the config pinned one.
fn fit_size(cfg: &mut RunConfig, sized: bool, size: (usize, usize)) -> Result<()> {
    if sized && cfg.model.input_size != size {
        return Err(Error::Usage(format!(
            "config asks for input {:?} but the dataset is {:?}",
            cfg.model.input_size, size
        )));
    }
    cfg.model.input_size = size;
    Ok(())
}

fn train_cmd(a: TrainArgs) -> Result<u8> {
    let (mut cfg, sized) = a.flags.resolve()?;
    let (data, size) = load_sized(&a.data)?;
    fit_size(&mut cfg, sized, size)?;
    let mut store = casgnn::tensor::ParamStore::new();
    let model = Model::new(cfg.model.clone(), &mut store)?;
    let every = (cfg.train.steps / 20).max(1);
    let outcome = train(&model, &mut store, &data, &cfg.train, |r| {
        if (r.step + 1) % every == 0 {
            eprintln!("step {:>6}  lr {:.3e}  loss {:.5}", r.step + 1, r.lr, r.loss);
        }
    })?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
    }
    Checkpoint::new(cfg.model, store, Some(&outcome.optimizer)).save(&a.out)?;
    let log = a.out.parent().unwrap_or(Path::new(".")).join("loss.csv");
    write_loss_log(&log, &outcome.log)?;
    eprintln!("wrote {} and {}", a.out.display(), log.display());
    Ok(0)
}

fn eval_cmd(a: EvalArgs) -> Result<u8> {
    let (data, size) = load_sized(&a.data)?;
    let report = match (&a.ckpt, a.oracle_gt) {
        (_, true) => evaluate_with(&data, |s| Ok(s.mask.clone()))?,
        (Some(path), false) => {
            let ck = Checkpoint::load(path)?;
            if let Some(m) = a.mode {
                if m != ck.model.mode {
                    return Err(Error::Usage(format!(
                        "checkpoint holds a {} model, not {m}",
                        ck.model.mode
                    )));
                }
            }
            if ck.model.input_size != size {
                return Err(Error::Usage(format!(
                    "checkpoint expects {:?} inputs, dataset is {:?}",
                    ck.model.input_size, size
                )));
            }
            let model = ck.build_model()?;
            evaluate(&model, &ck.params, &data)?
        }
        (None, false) => return Err(Error::Usage("--ckpt is required".into())),
    };
    write_report(&report, &a.out)?;
    let m = &report.mean;
    println!(
        "mae {:.6}  f_beta {:.6}  s_alpha {:.6}  e_xi {:.6}",
        m.mae, m.f_beta, m.s_alpha, m.e_xi
    );
    Ok(0)
}

fn infer_cmd(a: InferArgs) -> Result<u8> {
    let ck = Checkpoint::load(&a.ckpt)?;
    let rgb = read_ppm(&a.rgb)?;
    let depth = read_pgm(&a.depth)?;
    let (r, d) = (rgb.shape(), depth.shape());
    if (r.h, r.w) != (d.h, d.w) {
        return Err(Error::Usage(format!(
            "rgb is {}x{} but depth is {}x{}",
            r.h, r.w, d.h, d.w
        )));
    }
    if (r.h, r.w) != ck.model.input_size {
        return Err(Error::Usage(format!(
            "images are {}x{} but the model expects {:?}",
            r.h, r.w, ck.model.input_size
        )));
    }
    let model = ck.build_model()?;
    let probs = model.forward(&ck.params, &rgb, &depth)?;
    write_pgm(&a.out, &probs)?;
    Ok(0)
}

fn gradcheck_cmd(a: GradcheckArgs) -> Result<u8> {
    let scopes = if a.scope == "all" {
        Scope::ALL.to_vec()
    } else {
        vec![a.scope.parse()?]
    };
    let t0 = std::time::Instant::now();
    let report = run_suite(&scopes, a.inject_fault)?;
    print!("{}", report.table());
    if let Some(k) = report.injected {
        println!("injected fault: {k}");
    }
    let failed: Vec<_> = report.failures().map(|r| r.name.as_str()).collect();
    println!(
        "{} checks, {} failed, {:.1}s",
        report.rows.len(),
        failed.len(),
        t0.elapsed().as_secs_f64()
    );
    if failed.is_empty() {
        Ok(0)
    } else {
        eprintln!("gradient check failed: {}", failed.join(", "));
        Ok(VERIFY_FAILED)
    }
}

fn ablate_cmd(a: AblateArgs) -> Result<u8> {
    let (mut cfg, sized) = a.flags.resolve()?;
    let (train_set, size) = load_sized(&a.data)?;
    fit_size(&mut cfg, sized, size)?;
    let eval_set = match &a.eval {
        Some(dir) => load_dataset(dir)?,
        None => generate_dataset(
            1_000_000,
            64,
            &GenConfig {
                size,
                ..GenConfig::default()
            },
        )?,
    };
    let ab = AblationConfig {
        model: cfg.model,
        train: cfg.train,
        seeds: (0..a.seeds).collect(),
        jobs: a.jobs,
    };
    let t0 = std::time::Instant::now();
    let rows = run_ablation(&ab, &train_set, &eval_set, |run, out| {
        let t = t0.elapsed().as_secs_f64();
        match out {
            Ok((f, m)) => eprintln!(
                "[{t:>6.0}s] {} n={} t={} seed={}: f_beta {f:.4} mae {m:.4}",
                run.mode, run.scales, run.iterations, run.seed
            ),
            Err(e) => eprintln!(
                "[{t:>6.0}s] {} n={} t={} seed={} failed: {e}",
                run.mode, run.scales, run.iterations, run.seed
            ),
        }
    })?;
    std::fs::create_dir_all(&a.out).map_err(|e| io_error(&a.out, e))?;
    let path = a.out.join("ablation.csv");
    write_csv(&path, &rows)?;
    eprintln!("wrote {}", path.display());
    let failed = rows.iter().filter(|r| r.outcome.is_err()).count();
    Ok(if failed == 0 { 0 } else { 4 })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Infer(a) => infer_cmd(a),
        Command::Gradcheck(a) => gradcheck_cmd(a),
        Command::Ablate(a) => ablate_cmd(a),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
