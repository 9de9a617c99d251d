use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use hyq_core::harness::{self, AggregateCurve, ExperimentConfig, Fault, PlotSeries};
use hyq_core::Error;

/// Hybrid offline/online RL experiments.
#[derive(Parser)]
#[command(name = "hyq", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every replicate of an experiment config and aggregate the curves.
    Run {
        config: PathBuf,
        /// Overrides $HYQ_OUTPUT_ROOT.
        #[arg(long)]
        output_root: Option<PathBuf>,
    },
    /// Check the analysis identities and numeric kernels on a random corpus.
    Props {
        #[arg(long, default_value_t = 1000)]
        corpus: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Where failing-case reproducers are written.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Shift one residual term by this amount (negative control).
        #[arg(long, hide = true)]
        inject_fault: Option<f64>,
    },
    /// Render aggregate curves as an SVG line chart.
    Plot {
        #[arg(required = true)]
        aggregates: Vec<PathBuf>,
        /// Horizontal reference line, `name=value`.
        #[arg(long = "baseline", value_parser = parse_baseline)]
        baselines: Vec<(String, f64)>,
        #[arg(short, long)]
        output: PathBuf,
    },
}

fn parse_baseline(s: &str) -> Result<(String, f64), String> {
    let (name, value) = s.split_once('=').ok_or("expected name=value")?;
    let value: f64 = value.parse().map_err(|e| format!("bad value {value:?}: {e}"))?;
    Ok((name.to_string(), value))
}

/// Context marking errors that come from reading or parsing a config file.
#[derive(Debug)]
struct LoadingConfig(PathBuf);

impl std::fmt::Display for LoadingConfig {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "loading {}", self.0.display())
    }
}

enum Outcome {
    Ok,
    PropertyFailure,
}

fn run(cli: Cli) -> Result<Outcome> {
    match cli.command {
        Command::Run { config, output_root } => {
            let cfg = ExperimentConfig::load(&config).context(LoadingConfig(config.clone()))?;
            let root = output_root.unwrap_or_else(harness::output_root);
            let out = harness::run_experiment(&cfg, &root)?;
            for (seed, rec) in &out.records {
                for w in &rec.warnings {
                    eprintln!("warning (seed {seed}): {w}");
                }
            }
            match out.curve.points.last() {
                Some(p) => println!(
                    "{}: {} replicates, final median {:.4} (p20 {:.4}, p80 {:.4}) at {} samples",
                    cfg.id,
                    p.n_replicates,
                    p.median,
                    p.p20,
                    p.p80,
                    p.x
                ),
                None => println!("{}: no checkpoints recorded", cfg.id),
            }
            println!("wrote {}", out.dir.display());
            Ok(Outcome::Ok)
        }
        Command::Props {
            corpus,
            seed,
            out,
            inject_fault,
        } => {
            let fault = inject_fault.map_or(Fault::None, Fault::PerturbResidual);
            let dir = out.unwrap_or_else(|| harness::output_root().join("props"));
            let report = harness::run_property_suite(corpus, seed, fault, Some(&dir))?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            Ok(if report.passed() {
                Outcome::Ok
            } else {
                Outcome::PropertyFailure
            })
        }
        Command::Plot {
            aggregates,
            baselines,
            output,
        } => {
            let mut curves = Vec::new();
            for path in &aggregates {
                let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                let label = path
                    .parent()
                    .and_then(|p| p.file_name())
                    .or_else(|| path.file_stem())
                    .map_or_else(|| path.display().to_string(), |s| s.to_string_lossy().into_owned());
                curves.push((label, AggregateCurve::from_csv_str(&text)?));
            }
            let series: Vec<PlotSeries> = curves
                .iter()
                .map(|(label, curve)| PlotSeries { label, curve })
                .collect();
            if let Some(dir) = output.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            fs::write(&output, harness::plot_svg(&series, &baselines))?;
            Ok(Outcome::Ok)
        }
    }
}

fn is_config_error(err: &anyhow::Error) -> bool {
    err.downcast_ref::<LoadingConfig>().is_some()
        || err.chain().any(|e| {
            matches!(
                e.downcast_ref::<Error>(),
                Some(Error::Config { .. } | Error::Unknown { .. } | Error::Json(_))
            )
        })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(Outcome::Ok) => ExitCode::SUCCESS,
        Ok(Outcome::PropertyFailure) => ExitCode::from(1),
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(if is_config_error(&err) { 2 } else { 1 })
        }
    }
}
