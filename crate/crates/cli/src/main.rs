use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mutexmatch::checkpoint::Checkpoint;
use mutexmatch::config::TrainConfig;
use mutexmatch::data::SplitIndices;
use mutexmatch::run::{self, GridPoint};
use mutexmatch::{Error, Result};

#[derive(Parser)]
#[command(name = "mutexmatch", version, about = "Semi-supervised training with mutex-based consistency")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Config file: JSON object, key=value lines, or a run manifest.json.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. --set tau=0.5. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train one run per seed.
    Train {
        #[command(flatten)]
        common: Common,
        /// Number of consecutive seeds, starting at the configured seed.
        #[arg(long, default_value_t = 1)]
        seeds: usize,
        #[arg(long, default_value = "runs/train")]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on the eval split of a config or manifest.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        common: Common,
        /// Directory to write eval.json into.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a sweep grid over seeds and aggregate test accuracy.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Axis KEY=v1,v2,...; repeatable, combined as a cartesian product.
        #[arg(long = "sweep", value_name = "KEY=V1,V2")]
        sweeps: Vec<String>,
        /// Named design: tb_ab, k, tau or lr.
        #[arg(long, conflicts_with = "sweeps")]
        preset: Option<String>,
        #[arg(long, default_value_t = 1)]
        seeds: usize,
        #[arg(long, default_value = "runs/ablate")]
        out: PathBuf,
    },
    /// Collect the final eval of every run below the given directories.
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        /// Where to write report.csv; printed to stdout either way.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn resolve_config(common: &Common) -> Result<(TrainConfig, Option<String>)> {
    let (mut cfg, fingerprint) = match &common.config {
        Some(path) => run::load_config(path)?,
        None => (TrainConfig::default(), None),
    };
    cfg.apply_overrides(&common.overrides)?;
    cfg.validate()?;
    Ok((cfg, fingerprint))
}

fn print_eval(label: &str, r: &mutexmatch::metrics::EvalRecord) {
    println!(
        "{label}: step {} test_accuracy {:.4} pseudo_label_accuracy {:.4} complementary_error_m1 {:.4}",
        r.step,
        r.test_accuracy,
        r.pseudo_label.unfiltered,
        r.complementary_error.first().copied().unwrap_or(0.0)
    );
}

fn cmd_train(common: &Common, seeds: usize, out: &Path) -> Result<()> {
    if seeds == 0 {
        return Err(Error::Config("--seeds must be at least 1".into()));
    }
    let (cfg, fingerprint) = resolve_config(common)?;
    for s in 0..seeds {
        let mut c = cfg.clone();
        c.seed = cfg.seed + s as u64;
        let dir = if seeds == 1 { out.to_path_buf() } else { out.join(format!("seed-{}", c.seed)) };
        let r = run::run_training(&c, &dir, fingerprint.as_deref())?;
        print_eval(&dir.display().to_string(), &r.final_eval);
    }
    Ok(())
}

fn cmd_eval(checkpoint: &Path, common: &Common, out: Option<&Path>) -> Result<()> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let (cfg, _) = resolve_config(common)?;
    let split = match &common.config {
        Some(path) => {
            let split_path = path.with_file_name("split.txt");
            match fs::read_to_string(&split_path) {
                Ok(text) if path.file_name().is_some_and(|n| n == "manifest.json") => {
                    Some(SplitIndices::from_manifest(&text)?)
                }
                _ => None,
            }
        }
        None => None,
    };
    let record = run::evaluate_checkpoint(&ckpt, &cfg, split.as_ref())?;
    print_eval(&checkpoint.display().to_string(), &record);
    let json = serde_json::to_string_pretty(&record).map_err(|e| Error::Usage(e.to_string()))?;
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("eval.json");
        fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

fn cmd_ablate(common: &Common, sweeps: &[String], preset: Option<&str>, seeds: usize, out: &Path) -> Result<()> {
    let (cfg, _) = resolve_config(common)?;
    let points: Vec<GridPoint> = match preset {
        Some(name) => run::preset(name)?,
        None => {
            let axes = sweeps.iter().map(|s| run::parse_sweep(s)).collect::<Result<Vec<_>>>()?;
            run::grid(&axes)
        }
    };
    let summaries = run::run_sweep(&cfg, &points, seeds, out, run::thread_cap())?;
    for (i, s) in summaries.iter().enumerate() {
        println!(
            "point-{i:03} {:<40} acc {:.4} +- {:.4} ({} seeds)",
            s.label,
            s.mean,
            s.std,
            s.accuracies.len()
        );
    }
    println!("wrote {}", out.join("comparison.csv").display());
    Ok(())
}

fn find_runs(dir: &Path, found: &mut Vec<PathBuf>) -> Result<()> {
    if dir.join("manifest.json").is_file() {
        found.push(dir.to_path_buf());
        return Ok(());
    }
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    entries.sort();
    for e in entries {
        find_runs(&e, found)?;
    }
    Ok(())
}

fn cmd_report(runs: &[PathBuf], out: Option<&Path>) -> Result<()> {
    let mut found = Vec::new();
    for r in runs {
        if !r.exists() {
            return Err(Error::Data(format!("{} does not exist", r.display())));
        }
        find_runs(r, &mut found)?;
    }
    if found.is_empty() {
        return Err(Error::Data("no run directories found".into()));
    }
    let mut table = format!("run,seed,{}\n", mutexmatch::metrics::SUMMARY_HEADER);
    for dir in &found {
        let manifest = run::RunManifest::load(&dir.join("manifest.json"))?;
        let summary_path = dir.join("summary.csv");
        let summary = fs::read_to_string(&summary_path).map_err(|e| Error::io(&summary_path, e))?;
        let last = summary
            .lines()
            .skip(1)
            .last()
            .ok_or_else(|| Error::Data(format!("{} has no eval rows", summary_path.display())))?;
        table.push_str(&format!("{},{},{last}\n", dir.display(), manifest.seed));
    }
    print!("{table}");
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("report.csv");
        fs::write(&path, &table).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train { common, seeds, out } => cmd_train(common, *seeds, out),
        Command::Eval { checkpoint, common, out } => cmd_eval(checkpoint, common, out.as_deref()),
        Command::Ablate {
            common,
            sweeps,
            preset,
            seeds,
            out,
        } => cmd_ablate(common, sweeps, preset.as_deref(), *seeds, out),
        Command::Report { runs, out } => cmd_report(runs, out.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
