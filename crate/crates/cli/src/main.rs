use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;

use pgnn_core::config::ExperimentConfig;
use pgnn_core::run::{self, SweepAxis};
use pgnn_core::Error;

#[derive(Parser)]
#[command(
    name = "pgnn",
    version,
    about = "Patch-level graph attention pseudo-labelling at toy scale"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset, its ground truth and proposal boxes.
    GenerateData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train P-GNN and write attention maps, pseudo-labels and metrics to a run directory.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset directory from generate-data; generated from the config when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Box file (`image_id top left height width score` per line) for proposal mode.
        #[arg(long)]
        boxes: Option<PathBuf>,
        #[arg(long)]
        run: PathBuf,
    },
    /// Train the segmenter on a run's pseudo-labels with mutual-complementary updates.
    RefineLabels {
        #[arg(long)]
        run: PathBuf,
    },
    /// Compare label maps in two directories of PGM files.
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Foreground class count; defaults to the largest label present.
        #[arg(long)]
        classes: Option<usize>,
        #[arg(long)]
        include_background: bool,
        /// Ground-truth value to skip, e.g. 255.
        #[arg(long)]
        ignore: Option<u8>,
        /// Write the report here as well as to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// One pseudo-label run per value of `patch_count` or `lambda`; writes sweep.csv.
    Sweep {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        axis: SweepAxis,
        #[arg(long)]
        out: PathBuf,
    },
    /// Recompute attention maps from a run's checkpoint as PGM and raw float files.
    ExportMaps {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig, Error> {
    match path {
        Some(p) => ExperimentConfig::load(p),
        None => Ok(ExperimentConfig::default()),
    }
}

fn execute(cmd: Command) -> Result<serde_json::Value, Error> {
    match cmd {
        Command::GenerateData { config, out } => {
            let cfg = load_config(config.as_deref())?;
            let data = run::generate_data(&cfg, &out)?;
            Ok(json!({"scenes": data.scenes.len(), "out": out}))
        }
        Command::Train {
            config,
            data,
            boxes,
            run: dir,
        } => {
            let cfg = load_config(config.as_deref())?;
            let metrics = run::train(&cfg, data.as_deref(), boxes.as_deref(), &dir)?;
            Ok(json!({"run": dir, "metrics": metrics}))
        }
        Command::RefineLabels { run: dir } => run::refine(&dir),
        Command::Evaluate {
            pred,
            gt,
            classes,
            include_background,
            ignore,
            out,
        } => {
            let report = run::evaluate(&pred, &gt, classes, include_background, ignore)?;
            if let Some(p) = out {
                let text = serde_json::to_string_pretty(&report).expect("json serializes");
                std::fs::write(&p, text + "\n").map_err(|e| Error::Io { path: p, source: e })?;
            }
            Ok(report)
        }
        Command::Sweep { config, axis, out } => {
            let cfg = load_config(config.as_deref())?;
            let rows = run::sweep(&cfg, axis, &out)?;
            Ok(json!({"rows": rows.len(), "csv": out.join(run::SWEEP_CSV)}))
        }
        Command::ExportMaps { run: dir, out } => {
            let n = run::export_maps(&dir, &out)?;
            Ok(json!({"maps": n, "out": out}))
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let report = json!({"error": {"kind": "usage", "message": e.render().to_string()}});
            eprintln!("{report}");
            return ExitCode::from(2);
        }
    };
    match execute(cli.command) {
        Ok(v) => {
            // a closed pipe on stdout is not a failure of the command
            let _ = writeln!(
                std::io::stdout(),
                "{}",
                serde_json::to_string_pretty(&v).expect("json serializes")
            );
            ExitCode::SUCCESS
        }
        Err(e) => {
            let report = json!({"error": {"kind": e.kind(), "message": e.to_string()}});
            eprintln!("{report}");
            ExitCode::FAILURE
        }
    }
}
