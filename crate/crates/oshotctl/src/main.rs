use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use oshot::config::RunConfig;
use oshot::evalkit::{emit_report, error_analysis, voc_ap, ApResult, EvalReport, GammaPoint};
use oshot::gradsuite::{run_gradient_suite, GRAD_TOLERANCE};
use oshot::minidet::{load_checkpoint, save_checkpoint, Group, ModelParams};
use oshot::pipeline::{evaluate_stream_logged, pretrain, AdaptConfig, RotationInput};
use oshot::scenes::{build_dataset, read_dataset, write_dataset, Annotation, ImageSample, CLASS_NAMES};
use oshot::Error;

#[derive(Parser)]
#[command(name = "oshotctl", version, about = "One-shot rotation-adapted detection on synthetic scenes")]
struct Cli {
    /// Run configuration (JSON); missing keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Print the default configuration and exit.
    #[arg(long)]
    print_defaults: bool,
    /// Worker threads for per-image evaluation and dataset generation.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic dataset to disk.
    Gen(GenArgs),
    /// Train detector and rotation head from scratch.
    Pretrain(PretrainArgs),
    /// Adapt to each test image, detect, and report AP and error counts.
    Eval(EvalArgs),
    /// mAP as a function of the number of adaptation iterations.
    Sweep(SweepArgs),
    /// Compare rotation inputs for adaptation: none, whole image, pseudo-boxes.
    Ablate(EvalArgs),
    /// Error breakdown of the most confident detections.
    Errors(ErrorsArgs),
    /// Finite-difference checks of every differentiable op.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct DataArgs {
    /// Read scenes from this directory instead of generating them.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    data_seed: Option<u64>,
    #[arg(long)]
    first: Option<u64>,
    #[arg(long)]
    count: Option<usize>,
    /// `plain`, `mixed`, or a comma list such as `fog,posterize`.
    #[arg(long)]
    styles: Option<String>,
}

#[derive(Args)]
struct GenArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Same as `--data-seed`.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PretrainArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Checkpoint path; the training log and run files go next to it.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Rotation-loss weight; 0 trains a plain detector.
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long, value_parser = parse_rotation_input)]
    rotation_input: Option<RotationInput>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct AdaptArgs {
    /// Checkpoint written by `pretrain`.
    #[arg(long, alias = "model")]
    ckpt: PathBuf,
    #[arg(long, allow_negative_numbers = true)]
    gamma: Option<i64>,
    #[arg(long = "adapt-lambda")]
    adapt_lambda: Option<f64>,
    #[arg(long = "adapt-lr")]
    adapt_lr: Option<f64>,
    /// Rotation input during adaptation: `pseudobox` or `image`.
    #[arg(long, alias = "adapt-input", value_parser = parse_rotation_input)]
    mode: Option<RotationInput>,
    #[arg(long)]
    rotations_per_iter: Option<usize>,
    #[arg(long = "adapt-seed")]
    adapt_seed: Option<u64>,
    #[arg(long)]
    score_thresh: Option<f64>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    adapt: AdaptArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    adapt: AdaptArgs,
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated adaptation lengths.
    #[arg(long, value_delimiter = ',')]
    gammas: Option<Vec<i64>>,
}

#[derive(Args)]
struct ErrorsArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    adapt: AdaptArgs,
    #[arg(long)]
    out: PathBuf,
    #[arg(long = "topk", alias = "top-k")]
    top_k: Option<usize>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Also write the per-case table here.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_rotation_input(s: &str) -> Result<RotationInput, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| format!("unknown rotation input {s:?} (image, boxcrop, pseudobox)"))
}

/// Failure with its exit status: 1 for contract violations, 2 for IO and
/// configuration problems.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = if matches!(e, Error::Contract(_)) { 1 } else { 2 };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

type CliResult<T = ()> = Result<T, Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn run(cli: Cli) -> CliResult {
    if cli.print_defaults {
        print!("{}", RunConfig::default().to_json());
        return Ok(());
    }
    if cli.jobs == 0 {
        return Err(Error::Config("--jobs must be at least 1".into()).into());
    }
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let Some(command) = cli.command else {
        return Err(Error::Config("no subcommand given (try --help)".into()).into());
    };
    let started = chrono::Utc::now();
    let clock = Instant::now();
    let (name, out, extra) = match command {
        Command::Gen(a) => {
            a.data.apply(&mut cfg);
            set(&mut cfg.data.seed, a.seed);
            cfg.validate()?;
            let data = load_data(&a.data, &cfg, cli.jobs)?;
            write_dataset(&data, &a.out)?;
            eprintln!("wrote {} scenes to {}", data.len(), a.out.display());
            ("gen", a.out, serde_json::json!({ "images": data.len() }))
        }
        Command::Pretrain(a) => {
            a.data.apply(&mut cfg);
            let p = &mut cfg.pretrain;
            set(&mut p.steps, a.steps);
            set(&mut p.lr, a.lr);
            set(&mut p.lambda, a.lambda);
            set(&mut p.rotation_input, a.rotation_input);
            set(&mut p.seed, a.seed);
            cfg.validate()?;
            let dir = match a.out.parent() {
                Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
                _ => PathBuf::from("."),
            };
            let extra = cmd_pretrain(&cfg, &a.data, &a.out, &dir, cli.jobs)?;
            ("pretrain", dir, extra)
        }
        Command::Eval(a) => {
            a.data.apply(&mut cfg);
            a.adapt.apply(&mut cfg);
            cfg.validate()?;
            let extra = cmd_eval(&cfg, &a, cli.jobs)?;
            ("eval", a.out, extra)
        }
        Command::Sweep(a) => {
            a.data.apply(&mut cfg);
            a.adapt.apply(&mut cfg);
            set(&mut cfg.eval.gammas, a.gammas.clone());
            cfg.validate()?;
            let extra = cmd_sweep(&cfg, &a, cli.jobs)?;
            ("sweep", a.out, extra)
        }
        Command::Ablate(a) => {
            a.data.apply(&mut cfg);
            a.adapt.apply(&mut cfg);
            cfg.validate()?;
            let extra = cmd_ablate(&cfg, &a, cli.jobs)?;
            ("ablate", a.out, extra)
        }
        Command::Errors(a) => {
            a.data.apply(&mut cfg);
            a.adapt.apply(&mut cfg);
            if a.top_k.is_some() {
                cfg.eval.top_k = a.top_k;
            }
            cfg.validate()?;
            let extra = cmd_errors(&cfg, &a, cli.jobs)?;
            ("errors", a.out, extra)
        }
        Command::Gradcheck(a) => return cmd_gradcheck(&a),
    };
    write_text(&out.join("effective_config.json"), &cfg.to_json())?;
    let meta = serde_json::json!({
        "command": name,
        "started": started.to_rfc3339(),
        "finished": chrono::Utc::now().to_rfc3339(),
        "elapsed_s": clock.elapsed().as_secs_f64(),
        "jobs": cli.jobs,
        "version": env!("CARGO_PKG_VERSION"),
        "result": extra,
    });
    write_text(&out.join("run_meta.json"), &(serde_json::to_string_pretty(&meta).expect("json") + "\n"))?;
    Ok(())
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

impl DataArgs {
    fn apply(&self, cfg: &mut RunConfig) {
        set(&mut cfg.data.seed, self.data_seed);
        set(&mut cfg.data.first, self.first);
        set(&mut cfg.data.count, self.count);
        set(&mut cfg.data.styles, self.styles.clone());
    }
}

impl AdaptArgs {
    fn apply(&self, cfg: &mut RunConfig) {
        let a = &mut cfg.adapt;
        set(&mut a.gamma, self.gamma);
        set(&mut a.lambda, self.adapt_lambda);
        set(&mut a.lr, self.adapt_lr);
        set(&mut a.rotation_input, self.mode);
        set(&mut a.rotations_per_iter, self.rotations_per_iter);
        set(&mut a.seed, self.adapt_seed);
        set(&mut cfg.eval.score_thresh, self.score_thresh);
    }
}

fn write_text(path: &Path, text: &str) -> CliResult {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| oshot_io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| oshot_io(path, e))?;
    Ok(())
}

fn oshot_io(path: &Path, e: std::io::Error) -> Failure {
    Failure {
        code: 2,
        message: format!("{}: {e}", path.display()),
    }
}

fn load_data(args: &DataArgs, cfg: &RunConfig, jobs: usize) -> CliResult<Vec<ImageSample>> {
    if let Some(dir) = &args.data {
        return Ok(read_dataset(dir)?);
    }
    let styles = cfg.data.style_mix()?;
    let pool = thread_pool(jobs)?;
    Ok(pool.install(|| build_dataset(cfg.data.seed, cfg.data.first, cfg.data.count, &styles)))
}

fn thread_pool(jobs: usize) -> CliResult<oshot::ThreadPool> {
    oshot::thread_pool(jobs).map_err(Failure::from)
}

fn load_model(path: &Path, cfg: &RunConfig) -> CliResult<ModelParams<f32>> {
    let params = load_checkpoint(path)?;
    params
        .check_layout(&cfg.model)
        .map_err(|e| Failure::from(Error::Config(format!("{}: {e}", path.display()))))?;
    Ok(params)
}

fn cmd_pretrain(cfg: &RunConfig, data: &DataArgs, ckpt: &Path, dir: &Path, jobs: usize) -> CliResult<serde_json::Value> {
    let samples = load_data(data, cfg, jobs)?;
    fs::create_dir_all(dir).map_err(|e| oshot_io(dir, e))?;
    let log_path = dir.join("train_log.jsonl");
    let file = fs::File::create(&log_path).map_err(|e| oshot_io(&log_path, e))?;
    let mut log = BufWriter::new(file);
    let mut log_err = None;
    let every = (cfg.pretrain.steps / 20).max(1);
    let params = pretrain(&samples, &cfg.model, &cfg.pretrain, |r| {
        if let Err(e) = writeln!(log, "{}", serde_json::to_string(r).expect("log serializes")) {
            log_err.get_or_insert(e);
        }
        if (r.step + 1) % every == 0 {
            eprintln!(
                "step {}/{} L_d {:.4} L_r {}",
                r.step + 1,
                cfg.pretrain.steps,
                r.l_d.unwrap_or(f64::NAN),
                r.l_r.map_or("-".into(), |v| format!("{v:.4}"))
            );
        }
    })?;
    if let Some(e) = log_err {
        return Err(oshot_io(&log_path, e));
    }
    log.flush().map_err(|e| oshot_io(&log_path, e))?;
    save_checkpoint(&params, ckpt)?;
    Ok(serde_json::json!({
        "images": samples.len(),
        "group_hashes": group_hashes(&params),
    }))
}

fn group_hashes(params: &ModelParams<f32>) -> serde_json::Value {
    Group::ALL
        .iter()
        .map(|&g| (g.prefix().trim_end_matches('.').to_string(), hex::encode(params.group_hash(g)).into()))
        .collect::<serde_json::Map<_, _>>()
        .into()
}

fn ground_truth(data: &[ImageSample]) -> Vec<Vec<Annotation>> {
    data.iter().map(|s| s.annotations.clone()).collect()
}

struct Evaluated {
    per_gamma: Vec<ApResult>,
    detections: Vec<Vec<Vec<oshot::minidet::Detection>>>,
}

/// Runs adaptation once to the largest of `gammas` and scores each.
fn evaluate(
    params: &ModelParams<f32>,
    cfg: &RunConfig,
    adapt: &AdaptConfig,
    data: &[ImageSample],
    gammas: &[i64],
    jobs: usize,
    log: Option<&Path>,
) -> CliResult<Evaluated> {
    let out = evaluate_stream_logged(params, &cfg.model, adapt, &cfg.eval.detect_config(), data, gammas, jobs)?;
    if let Some(path) = log {
        let mut text = String::new();
        for (i, records) in out.records.iter().enumerate() {
            for r in records {
                text += &serde_json::to_string(&r.log(i)).expect("log serializes");
                text.push('\n');
            }
        }
        write_text(path, &text)?;
    }
    let gts = ground_truth(data);
    let per_gamma = out
        .detections
        .iter()
        .map(|d| voc_ap(d, &gts, cfg.model.num_classes, cfg.eval.iou_thresh))
        .collect::<oshot::Result<_>>()?;
    Ok(Evaluated {
        per_gamma,
        detections: out.detections,
    })
}

fn class_names() -> Vec<String> {
    CLASS_NAMES.iter().map(|s| s.to_string()).collect()
}

fn cmd_eval(cfg: &RunConfig, a: &EvalArgs, jobs: usize) -> CliResult<serde_json::Value> {
    let params = load_model(&a.adapt.ckpt, cfg)?;
    let data = load_data(&a.data, cfg, jobs)?;
    let mut ev = evaluate(&params, cfg, &cfg.adapt, &data, &[cfg.adapt.gamma], jobs, Some(&a.out.join("adapt_log.jsonl")))?;
    let detections = ev.detections.pop().expect("one gamma");
    let ap = ev.per_gamma.pop().expect("one gamma");
    let top_k = cfg.eval.top_k.unwrap_or(data.len());
    let errors = error_analysis(&detections, &ground_truth(&data), top_k)?;
    let report = EvalReport {
        class_names: class_names(),
        ap,
        errors: Some(errors),
        gamma_curve: Vec::new(),
        detections,
    };
    emit_report(&report, &a.out)?;
    eprintln!("mAP {:.4} over {} images (gamma {})", report.ap.map, data.len(), cfg.adapt.gamma);
    Ok(serde_json::json!({ "mAP": report.ap.map }))
}

fn cmd_sweep(cfg: &RunConfig, a: &SweepArgs, jobs: usize) -> CliResult<serde_json::Value> {
    let params = load_model(&a.adapt.ckpt, cfg)?;
    let data = load_data(&a.data, cfg, jobs)?;
    let mut gammas = cfg.eval.gammas.clone();
    if !gammas.contains(&cfg.adapt.gamma) {
        gammas.push(cfg.adapt.gamma);
    }
    let ev = evaluate(&params, cfg, &cfg.adapt, &data, &gammas, jobs, None)?;
    let at = gammas.iter().position(|&g| g == cfg.adapt.gamma).expect("included above");
    let curve: Vec<GammaPoint> = cfg
        .eval
        .gammas
        .iter()
        .zip(&ev.per_gamma)
        .map(|(&gamma, ap)| GammaPoint { gamma, map: ap.map })
        .collect();
    for p in &curve {
        eprintln!("gamma {:>4}: mAP {:.4}", p.gamma, p.map);
    }
    let report = EvalReport {
        class_names: class_names(),
        ap: ev.per_gamma[at].clone(),
        errors: None,
        gamma_curve: curve,
        detections: ev.detections[at].clone(),
    };
    emit_report(&report, &a.out)?;
    Ok(serde_json::to_value(&report.gamma_curve).expect("json"))
}

#[derive(Serialize)]
struct AblationRow {
    mode: &'static str,
    #[serde(rename = "mAP")]
    map: f64,
    per_class: Vec<Option<f64>>,
}

fn cmd_ablate(cfg: &RunConfig, a: &EvalArgs, jobs: usize) -> CliResult<serde_json::Value> {
    let params = load_model(&a.adapt.ckpt, cfg)?;
    let data = load_data(&a.data, cfg, jobs)?;
    let mut rows = Vec::new();
    let none = AdaptConfig {
        gamma: 0,
        ..cfg.adapt.clone()
    };
    let modes = [
        ("none", none),
        (
            "image",
            AdaptConfig {
                rotation_input: RotationInput::Image,
                ..cfg.adapt.clone()
            },
        ),
        (
            "pseudobox",
            AdaptConfig {
                rotation_input: RotationInput::Pseudobox,
                ..cfg.adapt.clone()
            },
        ),
    ];
    for (mode, adapt) in modes {
        let mut ev = evaluate(&params, cfg, &adapt, &data, &[adapt.gamma], jobs, None)?;
        let ap = ev.per_gamma.pop().expect("one gamma");
        eprintln!("{mode:>9}: mAP {:.4}", ap.map);
        rows.push(AblationRow {
            mode,
            map: ap.map,
            per_class: ap.per_class,
        });
    }
    let mut csv = String::from("mode,mAP\n");
    for r in &rows {
        csv += &format!("{},{}\n", r.mode, r.map);
    }
    write_text(&a.out.join("ablation.csv"), &csv)?;
    write_text(
        &a.out.join("ablation.json"),
        &(serde_json::to_string_pretty(&rows).expect("json") + "\n"),
    )?;
    Ok(serde_json::to_value(&rows).expect("json"))
}

fn cmd_errors(cfg: &RunConfig, a: &ErrorsArgs, jobs: usize) -> CliResult<serde_json::Value> {
    let params = load_model(&a.adapt.ckpt, cfg)?;
    let data = load_data(&a.data, cfg, jobs)?;
    let mut ev = evaluate(&params, cfg, &cfg.adapt, &data, &[cfg.adapt.gamma], jobs, None)?;
    let detections = ev.detections.pop().expect("one gamma");
    let top_k = cfg.eval.top_k.unwrap_or(data.len());
    let errors = error_analysis(&detections, &ground_truth(&data), top_k)?;
    eprintln!(
        "top {top_k}: correct {} mislocalized {} background {}",
        errors.correct, errors.mislocalized, errors.background
    );
    let report = EvalReport {
        class_names: class_names(),
        ap: ev.per_gamma.pop().expect("one gamma"),
        errors: Some(errors),
        gamma_curve: Vec::new(),
        detections,
    };
    emit_report(&report, &a.out)?;
    Ok(serde_json::to_value(errors).expect("json"))
}

fn cmd_gradcheck(a: &GradcheckArgs) -> CliResult {
    let cases = run_gradient_suite()?;
    let mut table = String::from("case,max_rel_err,probes,pass\n");
    for c in &cases {
        println!(
            "{:<36} max rel err {:.3e} over {:>4} probes  {}",
            c.name,
            c.report.max_rel_err,
            c.report.probes,
            if c.passed() { "ok" } else { "FAIL" }
        );
        table += &format!("{},{},{},{}\n", c.name, c.report.max_rel_err, c.report.probes, c.passed());
    }
    if let Some(dir) = &a.out {
        write_text(&dir.join("gradcheck.csv"), &table)?;
    }
    let failed = cases.iter().filter(|c| !c.passed()).count();
    if failed > 0 {
        return Err(Failure {
            code: 1,
            message: format!("{failed} gradient case(s) exceed relative error {GRAD_TOLERANCE:e}"),
        });
    }
    Ok(())
}
