use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use lacmfer::data::{generate, load_dir};
use lacmfer::eval::{
    accuracy, export_embeddings, feature_geometry, run_ablation, configure_threads, EvalData, GeometryScope, Sweeps,
};
use lacmfer::gradsuite::{run_suite, LossKind, SuiteOptions};
use lacmfer::training::train_with;
use lacmfer::{Error, ModelParams, RunConfig};

const CONFIG_FILE: &str = "config.json";

#[derive(Parser, Debug)]
#[command(name = "lacmfer", version, about = "Multi-source domain adaptation on synthetic problems")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate one file per domain and split.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and write a checkpoint, the step log and final metrics.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print target accuracy and feature geometry as JSON.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Run the ablation ladder over several seeds.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated training seeds.
        #[arg(long, value_delimiter = ',', required = true)]
        seeds: Vec<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Also compare voting against separate pseudo labeling.
        #[arg(long)]
        pseudo_sweep: bool,
        /// Also compare every consistency mode.
        #[arg(long)]
        consistency_sweep: bool,
    },
    /// Finite-difference check of every loss.
    GradCheck {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 10)]
        instances: usize,
    },
    /// Write global-branch embeddings of every sample as CSV.
    Export {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Failure with its exit code.
enum Failure {
    Lib(Error),
    /// A check ran to completion and did not pass.
    Check(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Lib(Error::Numerical(_)) | Failure::Check(_) => 3,
            Failure::Lib(_) => 2,
        }
    }
}

type CliResult = Result<(), Failure>;

fn prepare_out_dir(dir: &Path, cfg: &RunConfig) -> Result<(), Error> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    cfg.save(&dir.join(CONFIG_FILE))
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<(), Error> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn gen_data(config: &Path, out: &Path) -> CliResult {
    let cfg = RunConfig::load(config)?;
    let problem = generate(&cfg.data, cfg.arch.input_dim, cfg.arch.num_classes)?;
    prepare_out_dir(out, &cfg)?;
    let written = problem.save_dir(out)?;
    eprintln!("wrote {} files to {}", written.len(), out.display());
    Ok(())
}

fn train_cmd(config: &Path, data: &Path, out: &Path) -> CliResult {
    let cfg = RunConfig::load(config)?;
    let datasets = load_dir(data)?;
    let eval = EvalData::from_datasets(&datasets)?;
    prepare_out_dir(out, &cfg)?;

    let log_path = out.join("diagnostics.jsonl");
    let file = File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let mut log = BufWriter::new(file);
    let mut write_err = None;
    let outcome = train_with(&cfg, &eval.train, |d| {
        if write_err.is_some() {
            return;
        }
        let line = serde_json::to_string(d).expect("diagnostics serialize");
        if let Err(e) = writeln!(log, "{line}") {
            write_err = Some(e);
        }
    })?;
    if let Some(e) = write_err {
        return Err(Error::io(&log_path, e).into());
    }
    log.flush().map_err(|e| Error::io(&log_path, e))?;

    outcome.params.save_checkpoint(&out.join("model.ckpt"))?;
    let metrics = serde_json::json!({
        "iterations": cfg.total_iters,
        "target_accuracy": accuracy(&outcome.params, &eval.target_eval)?,
        "target_geometry": feature_geometry(&outcome.params, &eval.target_eval, GeometryScope::Target)?,
        "source_geometry": feature_geometry(&outcome.params, &eval.sources_pooled, GeometryScope::SourcesPooled)?,
    });
    write_json(&out.join("metrics.json"), &metrics)?;
    eprintln!("target accuracy {:.4}", metrics["target_accuracy"]);
    Ok(())
}

fn eval_cmd(checkpoint: &Path, data: &Path) -> CliResult {
    let params = ModelParams::load_checkpoint(checkpoint)?;
    let eval = EvalData::from_datasets(&load_dir(data)?)?;
    let report = serde_json::json!({
        "accuracy": accuracy(&params, &eval.target_eval)?,
        "target_geometry": feature_geometry(&params, &eval.target_eval, GeometryScope::Target)?,
        "source_geometry": feature_geometry(&params, &eval.sources_pooled, GeometryScope::SourcesPooled)?,
    });
    println!("{}", serde_json::to_string_pretty(&report).map_err(Error::from)?);
    Ok(())
}

fn ablate_cmd(config: &Path, data: &Path, seeds: &[u64], out: &Path, sweeps: Sweeps) -> CliResult {
    let cfg = RunConfig::load(config)?;
    let eval = EvalData::from_datasets(&load_dir(data)?)?;
    prepare_out_dir(out, &cfg)?;
    let report = run_ablation(&cfg, &eval, seeds, sweeps)?;
    write_json(&out.join("ablation.json"), &serde_json::to_value(&report).map_err(Error::from)?)?;
    for s in &report.summaries {
        println!(
            "{:<24} {:.4} +- {:.4}  ratio_r {:.3}  intra_l2 {:.4}",
            s.label, s.mean_accuracy, s.std_accuracy, s.target_geometry.ratio_r, s.target_geometry.intra_l2
        );
    }
    Ok(())
}

fn grad_check_cmd(config: &Path, instances: usize) -> CliResult {
    let cfg = RunConfig::load(config)?;
    let opts = SuiteOptions {
        instances,
        ..SuiteOptions::default()
    };
    let report = run_suite(&cfg, &LossKind::ALL, &opts)?;
    print!("{}", report.table());
    if report.passed() {
        Ok(())
    } else {
        Err(Failure::Check(format!(
            "gradient check failed at tolerance {:e}",
            report.tolerance
        )))
    }
}

fn export_cmd(checkpoint: &Path, data: &Path, out: &Path) -> CliResult {
    let params = ModelParams::load_checkpoint(checkpoint)?;
    let datasets = load_dir(data)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let rows = export_embeddings(&params, &datasets, out)?;
    eprintln!("wrote {rows} rows to {}", out.display());
    Ok(())
}

fn run(cli: Cli) -> CliResult {
    match cli.command {
        Command::GenData { config, out } => gen_data(&config, &out),
        Command::Train { config, data, out } => train_cmd(&config, &data, &out),
        Command::Eval { checkpoint, data } => eval_cmd(&checkpoint, &data),
        Command::Ablate {
            config,
            data,
            seeds,
            out,
            pseudo_sweep,
            consistency_sweep,
        } => ablate_cmd(
            &config,
            &data,
            &seeds,
            &out,
            Sweeps {
                pseudo: pseudo_sweep,
                consistency: consistency_sweep,
            },
        ),
        Command::GradCheck { config, instances } => grad_check_cmd(&config, instances),
        Command::Export { checkpoint, data, out } => export_cmd(&checkpoint, &data, &out),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    configure_threads();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            match &f {
                Failure::Lib(e) => eprintln!("error: {e}"),
                Failure::Check(m) => eprintln!("error: {m}"),
            }
            ExitCode::from(f.code())
        }
    }
}
