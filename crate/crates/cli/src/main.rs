use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::Value;

use cdal::config::{parse_override, RunConfig};
use cdal::diagnostics::{format_table, gradcheck_suite};
use cdal::eval::evaluate;
use cdal::experiment::{export_attention, run_ablation, runs_csv, summarize, summary_csv, AblationAxis};
use cdal::model::Model;
use cdal::synth::{build_dataset, Dataset};
use cdal::trainer::{read_checkpoint, train, write_checkpoint, write_trace};
use cdal::{CdalError, Result};

const CHECKPOINT_FILE: &str = "checkpoint.cdal";
const TRACE_FILE: &str = "loss_trace.csv";

#[derive(Parser)]
#[command(
    name = "cdal",
    version,
    about = "Open-world model attribution with counterfactually decoupled attention",
    after_help = help_keys()
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON file of flat dotted config keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set train.epochs=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Run seed (same as `--set seed=N`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (same as `--set out=DIR`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic benchmark into --out.
    #[command(after_help = help_keys())]
    GenData,
    /// Train on the labeled split; writes a checkpoint and loss trace.
    #[command(after_help = help_keys())]
    Train {
        #[arg(long)]
        data: PathBuf,
    },
    /// Evaluate a checkpoint on the unlabeled split.
    #[command(after_help = help_keys())]
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Train and evaluate every variant of one ablation axis over several seeds.
    #[command(after_help = help_keys())]
    Ablate {
        #[arg(long)]
        data: PathBuf,
        /// counterfactual | experts | components
        #[arg(long)]
        axis: String,
        /// Number of consecutive seeds starting at the run seed.
        #[arg(long, default_value_t = 5)]
        seeds: u64,
    },
    /// Write factual and counterfactual maps of k samples as CDT1 and PGM.
    #[command(after_help = help_keys())]
    ExportAttention {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 8)]
        samples: usize,
    },
    /// Finite-difference check of every differentiable op and the full objective.
    Gradcheck,
}

fn help_keys() -> String {
    format!("Config keys (default, description):\n{}", RunConfig::help_table())
}

fn load_config(c: &Common) -> Result<RunConfig> {
    let base = match &c.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    let mut over: BTreeMap<String, Value> = BTreeMap::new();
    for s in &c.overrides {
        let (k, v) = parse_override(s)?;
        over.insert(k, v);
    }
    if let Some(seed) = c.seed {
        over.insert("seed".into(), Value::from(seed));
    }
    if let Some(out) = &c.out {
        over.insert("out".into(), Value::from(out.to_string_lossy().into_owned()));
    }
    base.with_overrides(&over)
}

fn out_dir(cfg: &RunConfig) -> Result<&Path> {
    fs::create_dir_all(&cfg.out)?;
    Ok(&cfg.out)
}

fn read_data(dir: &Path) -> Result<Dataset> {
    if !dir.is_dir() {
        return Err(CdalError::Data(format!("dataset directory {} does not exist", dir.display())));
    }
    Dataset::read(dir)
}

fn load_checkpoint(path: &Path, ds: &Dataset) -> Result<Model> {
    if !path.is_file() {
        return Err(CdalError::Data(format!("checkpoint {} does not exist", path.display())));
    }
    let (model, _) = read_checkpoint(path)?;
    let m = &ds.manifest;
    if model.in_channels != m.channels || model.classes != m.known_generators.len() {
        return Err(CdalError::Data(format!(
            "checkpoint expects {} channels and {} known classes, dataset has {} and {}",
            model.in_channels,
            model.classes,
            m.channels,
            m.known_generators.len()
        )));
    }
    Ok(model)
}

fn print_params(model: &Model) {
    let r = model.param_report();
    println!("parameters backbone+head: {}", r.baseline_total());
    println!("parameters cdal: {} ({:.2}% of backbone+head)", r.cdal, 100.0 * r.overhead());
}

/// Pulls the JSON payload out of a numeric-failure message.
fn diagnostics_payload(msg: &str) -> Option<&str> {
    msg.find('{').map(|i| &msg[i..])
}

fn run(cli: Cli) -> Result<()> {
    if let Command::Gradcheck = cli.command {
        let rows = gradcheck_suite()?;
        print!("{}", format_table(&rows));
        let failed: Vec<&str> = rows.iter().filter(|r| !r.pass).map(|r| r.name.as_str()).collect();
        if !failed.is_empty() {
            return Err(CdalError::Numeric(format!("gradient check failed: {}", failed.join(" "))));
        }
        return Ok(());
    }
    let cfg = load_config(&cli.common)?;
    match cli.command {
        Command::GenData => {
            let out = out_dir(&cfg)?;
            let ds = build_dataset(&cfg.data)?;
            ds.write(out)?;
            println!(
                "wrote {} samples ({} labeled) to {}",
                ds.samples.len(),
                ds.manifest.labeled,
                out.display()
            );
        }
        Command::Train { data } => {
            let ds = read_data(&data)?;
            let out = out_dir(&cfg)?;
            let outcome = match train(&cfg.train, &ds) {
                Err(CdalError::Numeric(msg)) => {
                    let dump = out.join("diagnostics.json");
                    fs::write(&dump, diagnostics_payload(&msg).unwrap_or("{}"))?;
                    return Err(CdalError::Numeric(format!("{msg} (dump: {})", dump.display())));
                }
                r => r?,
            };
            write_checkpoint(&out.join(CHECKPOINT_FILE), &outcome.model, cfg.seed)?;
            write_trace(&out.join(TRACE_FILE), &outcome.trace)?;
            fs::write(out.join("config.json"), cfg.to_json_pretty() + "\n")?;
            print_params(&outcome.model);
            if let (Some(first), Some(last)) = (outcome.trace.first(), outcome.trace.last()) {
                println!(
                    "steps {} l_original {:.4} -> {:.4} l_total {:.4} -> {:.4}",
                    outcome.trace.len(),
                    first.l_original,
                    last.l_original,
                    first.l_total,
                    last.l_total
                );
            }
            println!("wrote {}", out.join(CHECKPOINT_FILE).display());
        }
        Command::Eval { checkpoint, data } => {
            let ds = read_data(&data)?;
            let model = load_checkpoint(&checkpoint, &ds)?;
            let out = out_dir(&cfg)?;
            let report = evaluate(&model, &ds, &cfg.eval, cfg.seed)?;
            report.write_json(&out.join("eval_report.json"))?;
            let csv = out.join("results.csv");
            if csv.exists() {
                fs::remove_file(&csv)?;
            }
            report.append_csv(&csv)?;
            print_params(&model);
            println!(
                "known_acc {:.4} novel_acc {:.4} novel_nmi {:.4} novel_ari {:.4} novel_purity {:.4} auc {:.4} oscr {:.4}",
                report.known_acc,
                report.novel_acc,
                report.novel_nmi,
                report.novel_ari,
                report.novel_purity,
                report.auc,
                report.oscr
            );
        }
        Command::Ablate { data, axis, seeds } => {
            let axis: AblationAxis = axis.parse()?;
            let ds = read_data(&data)?;
            let out = out_dir(&cfg)?;
            let seed_list: Vec<u64> = (0..seeds).map(|i| cfg.seed + i).collect();
            let runs = run_ablation(axis, &cfg.train, &cfg.eval, &ds, &seed_list)?;
            let summary = summarize(&runs);
            let table = summary_csv(&summary);
            fs::write(out.join(format!("ablation_{axis}.csv")), &table)?;
            fs::write(out.join(format!("ablation_{axis}_runs.csv")), runs_csv(&runs))?;
            print!("{table}");
        }
        Command::ExportAttention {
            checkpoint,
            data,
            samples,
        } => {
            let ds = read_data(&data)?;
            let model = load_checkpoint(&checkpoint, &ds)?;
            let out = out_dir(&cfg)?;
            let index = export_attention(&model, &ds, samples, cfg.seed, &out.join("attention"))?;
            println!("wrote {}", index.display());
        }
        Command::Gradcheck => unreachable!("handled above"),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let line = serde_json::json!({ "error": e.kind(), "code": e.exit_code(), "message": e.to_string() });
            eprintln!("{line}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
