//! `auvic`: generates the benchmark, trains the base model, runs the
//! unlearning methods and writes every evaluation table.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.

mod config;
mod gnuplot;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use auvic_core::experiment::{ablation_csv, ablation_markdown, verify_labels, Experiment, Verification};
use auvic_core::metrics::{decisions_csv, reports_csv, reports_markdown, MetricsReport};
use auvic_core::model::{load_checkpoint, save_checkpoint, ModelState};
use auvic_core::unlearn::Method;
use auvic_core::vcubench::Benchmark;
use clap::{Args, Parser, Subcommand};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] auvic_core::Error),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Core(e) if e.is_usage() => 1,
            _ => 2,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(name = "auvic", version, about = "Targeted visual-concept unlearning experiments")]
struct Cli {
    /// Experiment configuration (TOML). Defaults apply to anything missing.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one configuration value, e.g. `--set unlearn.auvic.steps=50`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Override the experiment seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output root.
    #[arg(long, env = "AUVIC_OUT", default_value = "runs", global = true)]
    out: PathBuf,
    /// Worker threads for the matrix, the ablation and method sweeps.
    #[arg(long, default_value_t = 1, global = true)]
    jobs: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Inputs {
    /// Base checkpoint [default: <out>/base/model.ckpt].
    #[arg(long)]
    base: Option<PathBuf>,
    /// Benchmark directory [default: <out>/data].
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build the synthetic benchmark into <out>/data.
    GenData,
    /// Train the base model into <out>/base.
    TrainBase,
    /// Unlearn one identity with one method.
    Unlearn {
        #[arg(long)]
        method: String,
        /// Identity id, e.g. id_0.
        #[arg(long)]
        target: String,
        #[arg(long)]
        base: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the benchmark.
    Eval {
        /// Model to evaluate [default: the base checkpoint].
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Targets to evaluate [default: eval.targets].
        #[arg(long)]
        target: Vec<String>,
        /// Row label and output subdirectory.
        #[arg(long, default_value = "model")]
        label: String,
        #[command(flatten)]
        inputs: Inputs,
    },
    /// Gradient-ascent forgetting matrix over every identity.
    ForgettingMatrix {
        #[command(flatten)]
        inputs: Inputs,
        #[arg(long)]
        emit_gnuplot: bool,
    },
    /// Component ablation of the adversarial method.
    Ablate {
        /// Targets [default: eval.targets].
        #[arg(long)]
        target: Vec<String>,
        #[command(flatten)]
        inputs: Inputs,
        #[arg(long)]
        emit_gnuplot: bool,
    },
    /// Every method, the ablation and the forgetting matrix in one report.
    Report {
        #[command(flatten)]
        inputs: Inputs,
        /// Leave out the forgetting matrix.
        #[arg(long)]
        no_matrix: bool,
        #[arg(long)]
        emit_gnuplot: bool,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    if cli.jobs == 0 {
        return Err(CliError::Usage("--jobs must be at least 1".into()));
    }
    let cfg = config::load(cli.config.as_deref(), &cli.overrides, cli.seed)?;
    let exp = Experiment::new(cfg)?;
    let out = &cli.out;
    match cli.command {
        Command::GenData => gen_data(&exp, out),
        Command::TrainBase => train(&exp, out),
        Command::Unlearn { method, target, base } => {
            let method: Method = method.parse().map_err(|e: auvic_core::Error| CliError::Usage(e.to_string()))?;
            unlearn(&exp, out, method, &target, base)
        }
        Command::Eval {
            checkpoint,
            target,
            label,
            inputs,
        } => eval(&exp, out, checkpoint, target, &label, inputs),
        Command::ForgettingMatrix { inputs, emit_gnuplot } => matrix(&exp, out, inputs, cli.jobs, emit_gnuplot),
        Command::Ablate {
            target,
            inputs,
            emit_gnuplot,
        } => ablate(&exp, out, target, inputs, cli.jobs, emit_gnuplot),
        Command::Report {
            inputs,
            no_matrix,
            emit_gnuplot,
        } => report(&exp, out, inputs, cli.jobs, !no_matrix, emit_gnuplot),
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Creates `dir` and stores the exact configuration used inside it.
fn output_dir(exp: &Experiment, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|source| CliError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    write(&dir.join("config.toml"), exp.config.to_toml()?)
}

fn to_json<T: serde::Serialize>(value: &T) -> Result<String> {
    serde_json::to_string_pretty(value)
        .map(|mut s| {
            s.push('\n');
            s
        })
        .map_err(|e| CliError::Core(auvic_core::Error::Contract(format!("serialise: {e}"))))
}

fn check_targets(exp: &Experiment, targets: Vec<String>) -> Result<Vec<String>> {
    let targets = if targets.is_empty() {
        exp.config.eval.targets.clone()
    } else {
        targets
    };
    for t in &targets {
        exp.target_index(t)?;
    }
    Ok(targets)
}

fn base_path(out: &Path, explicit: Option<PathBuf>) -> PathBuf {
    explicit.unwrap_or_else(|| out.join("base").join("model.ckpt"))
}

fn load_model(exp: &Experiment, path: &Path) -> Result<ModelState> {
    let state = load_checkpoint(path)?;
    exp.check_model(&state)?;
    Ok(state)
}

/// Base model plus the benchmark with samples the base model gets wrong
/// removed.
fn load_inputs(exp: &Experiment, out: &Path, inputs: Inputs) -> Result<(ModelState, Benchmark, Verification)> {
    let base = load_model(exp, &base_path(out, inputs.base))?;
    let dir = inputs.data.unwrap_or_else(|| out.join("data"));
    let mut bench = Benchmark::read(&dir)?;
    let ids: Vec<&str> = bench.roster.identities.iter().map(|s| s.id.as_str()).collect();
    let expected: Vec<&str> = exp.roster.identities.iter().map(|s| s.id.as_str()).collect();
    if ids != expected || bench.roster != exp.roster {
        return Err(CliError::Usage(format!(
            "{}: benchmark roster does not match this configuration",
            dir.display()
        )));
    }
    let v = verify_labels(&mut bench, &base, exp.config.eval.max_rejection)?;
    log::info!("label check rejected {}/{} benchmark samples", v.rejected, v.checked);
    Ok((base, bench, v))
}

fn gen_data(exp: &Experiment, out: &Path) -> Result<()> {
    let bench = exp.benchmark()?;
    let dir = out.join("data");
    output_dir(exp, &dir)?;
    bench.write(&dir)?;
    log::info!("wrote {} samples to {}", bench.samples.len(), dir.display());
    Ok(())
}

fn train(exp: &Experiment, out: &Path) -> Result<()> {
    let t = Instant::now();
    let (state, report) = exp.train_base()?;
    let dir = out.join("base");
    output_dir(exp, &dir)?;
    save_checkpoint(&state, &dir.join("model.ckpt"))?;
    write(&dir.join("train_report.json"), to_json(&report)?)?;
    log::info!(
        "base model: single recall {:.4}, group recall {:.4} after {} epochs ({:.1?})",
        report.single_recall,
        report.group_recall,
        report.epochs.len(),
        t.elapsed()
    );
    Ok(())
}

fn unlearn(exp: &Experiment, out: &Path, method: Method, target: &str, base: Option<PathBuf>) -> Result<()> {
    let t = exp.target_index(target)?;
    let base = load_model(exp, &base_path(out, base))?;
    let start = Instant::now();
    let result = exp.unlearn(&base, method, t)?;
    let dir = out.join("unlearn").join(format!("{}-{target}", method.as_str()));
    output_dir(exp, &dir)?;
    save_checkpoint(&result.state, &dir.join("model.ckpt"))?;
    result.log.write(&dir.join("log.jsonl"))?;
    if let Some(g) = &result.generator {
        write(&dir.join("generator.json"), to_json(g)?)?;
    }
    log::info!("{} on {target}: {} steps in {:.1?}", method.label(), result.log.records.len(), start.elapsed());
    Ok(())
}

fn eval(exp: &Experiment, out: &Path, checkpoint: Option<PathBuf>, targets: Vec<String>, label: &str, inputs: Inputs) -> Result<()> {
    let targets = check_targets(exp, targets)?;
    if label.is_empty() || label.contains(['/', '\\']) {
        return Err(CliError::Usage(format!("label '{label}' cannot name a directory")));
    }
    let (base, bench, _) = load_inputs(exp, out, inputs)?;
    let model = match checkpoint {
        Some(p) => load_model(exp, &p)?,
        None => base,
    };
    let held = exp.generality_set()?;
    let mut rows = Vec::new();
    let mut dumps = String::new();
    for t in &targets {
        let ev = exp.evaluate(&model, &bench, t, label, &held)?;
        let csv = decisions_csv(&ev.decisions);
        if dumps.is_empty() {
            dumps.push_str(&csv);
        } else {
            dumps.extend(csv.lines().skip(1).map(|l| format!("{l}\n")));
        }
        rows.push(ev.report);
    }
    let dir = out.join("eval").join(label);
    output_dir(exp, &dir)?;
    write(&dir.join("metrics.csv"), reports_csv(&rows))?;
    write(&dir.join("metrics.md"), reports_markdown(&rows))?;
    write(&dir.join("decisions.csv"), dumps)?;
    print!("{}", reports_markdown(&rows));
    Ok(())
}

fn matrix(exp: &Experiment, out: &Path, inputs: Inputs, jobs: usize, emit_gnuplot: bool) -> Result<()> {
    let (base, bench, _) = load_inputs(exp, out, inputs)?;
    let m = exp.forgetting_matrix(&base, &bench, jobs)?;
    let dir = out.join("matrix");
    output_dir(exp, &dir)?;
    write(&dir.join("matrix.csv"), m.to_csv())?;
    write(&dir.join("matrix.md"), m.to_markdown())?;
    if emit_gnuplot {
        let p = gnuplot::heatmap(&m, "matrix");
        write(&dir.join("matrix.dat"), p.data)?;
        write(&dir.join("matrix.gp"), p.script)?;
    }
    let (similar, dissimilar) = m.spillover(&exp.roster);
    print!("{}", m.to_markdown());
    println!("mean spillover: similar pairs {similar:.3}, dissimilar pairs {dissimilar:.3}");
    Ok(())
}

fn ablate(exp: &Experiment, out: &Path, targets: Vec<String>, inputs: Inputs, jobs: usize, emit_gnuplot: bool) -> Result<()> {
    let targets = check_targets(exp, targets)?;
    let (base, bench, _) = load_inputs(exp, out, inputs)?;
    let mut rows = Vec::new();
    for t in &targets {
        rows.extend(exp.ablation(&base, &bench, t, jobs)?);
    }
    let dir = out.join("ablation");
    output_dir(exp, &dir)?;
    write(&dir.join("ablation.csv"), ablation_csv(&rows))?;
    write(&dir.join("ablation.md"), ablation_markdown(&rows))?;
    if emit_gnuplot {
        let labels: Vec<String> = rows.iter().map(|r| format!("{} {}", r.variant, r.target)).collect();
        let values: Vec<Vec<f64>> = rows.iter().map(|r| vec![r.tfa, r.ntra, r.grf_f1]).collect();
        let p = gnuplot::bars(&labels, &["TFA", "NTRA", "GRF-F1"], &values, "ablation", "percent");
        write(&dir.join("ablation.dat"), p.data)?;
        write(&dir.join("ablation.gp"), p.script)?;
    }
    print!("{}", ablation_markdown(&rows));
    Ok(())
}

fn report(exp: &Experiment, out: &Path, inputs: Inputs, jobs: usize, with_matrix: bool, emit_gnuplot: bool) -> Result<()> {
    let (base, bench, v) = load_inputs(exp, out, inputs)?;
    let start = Instant::now();
    let r = exp.run_report(&base, &bench, v.rate(), jobs, with_matrix)?;
    let wall = start.elapsed().as_secs_f64();
    let dir = out.join("report");
    output_dir(exp, &dir)?;
    write(&dir.join("report.json"), to_json(&r)?)?;
    write(
        &dir.join("timing.json"),
        to_json(&serde_json::json!({ "config_hash": r.config_hash, "wall_seconds": wall }))?,
    )?;
    write(&dir.join("metrics.csv"), reports_csv(&r.methods))?;
    write(&dir.join("metrics.md"), reports_markdown(&r.methods))?;
    write(&dir.join("ablation.csv"), ablation_csv(&r.ablation))?;
    write(&dir.join("ablation.md"), ablation_markdown(&r.ablation))?;
    if let Some(m) = &r.matrix {
        write(&dir.join("matrix.csv"), m.to_csv())?;
        write(&dir.join("matrix.md"), m.to_markdown())?;
    }
    if emit_gnuplot {
        let p = method_bars(&r.methods);
        write(&dir.join("methods.dat"), p.data)?;
        write(&dir.join("methods.gp"), p.script)?;
        if let Some(m) = &r.matrix {
            let p = gnuplot::heatmap(m, "matrix");
            write(&dir.join("matrix.dat"), p.data)?;
            write(&dir.join("matrix.gp"), p.script)?;
        }
    }
    print!("{}", reports_markdown(&r.methods));
    print!("{}", ablation_markdown(&r.ablation));
    Ok(())
}

fn method_bars(rows: &[MetricsReport]) -> gnuplot::Plot {
    let labels: Vec<String> = rows.iter().map(|r| format!("{} {}", r.method, r.target)).collect();
    let values: Vec<Vec<f64>> = rows.iter().map(|r| vec![r.tfa, r.ntra, r.grf_f1]).collect();
    gnuplot::bars(&labels, &["TFA", "NTRA", "GRF-F1"], &values, "methods", "percent")
}
