use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use imbal_core::data::{class_profile, curate_exponential, load_csv};
use imbal_core::diagnostics::{boundary_grid, collapse_report, minority_majority_classes, minority_margin, Bounds};
use imbal_core::harness::{
    run_experiment, run_ratio_grid, run_sweep, write_json, ExperimentConfig, ImprovementMode, SweepAxis, SweepMetric,
    SweepOptions,
};
use imbal_core::models::{argmax_rows, Model};
use imbal_core::{Error, Result};

#[derive(Parser)]
#[command(name = "imbal", version, about = "Class-imbalanced training experiments and diagnostics")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Subsample a CSV dataset to an exponential class profile.
    Curate {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Smallest-to-largest class size ratio in (0, 1].
        #[arg(long)]
        ratio: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "label")]
        label_col: String,
    },
    /// Train every seed of a config and write reports, checkpoints and the aggregate.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a config at several values of one axis.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// batch_size, r_train, r_test, n_majority, method, or ratio_grid
        /// (train and test ratios both taken from --values).
        #[arg(long)]
        axis: String,
        #[arg(long, value_delimiter = ',')]
        values: Vec<String>,
        #[arg(long)]
        out: PathBuf,
        /// Axis value used as the reference for percent improvement.
        #[arg(long)]
        baseline: Option<String>,
        #[arg(long, default_value = "overall")]
        metric: String,
        /// divide_by_candidate or divide_by_baseline.
        #[arg(long)]
        improvement: Option<String>,
    },
    /// Evaluate a 2-D classifier on a grid and write the decision map as CSV.
    Boundary {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 200)]
        resolution: usize,
        #[arg(long)]
        out: PathBuf,
        /// x0_min,x0_max,x1_min,x1_max; defaults to the padded extent of --data.
        #[arg(long, value_delimiter = ',', num_args = 4)]
        bounds: Option<Vec<f64>>,
        /// Labelled CSV; its minority-class margins are printed as JSON.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "label")]
        label_col: String,
    },
    /// Print neural-collapse metrics of a checkpoint on a labelled CSV.
    Collapse {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "label")]
        label_col: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn parse_enum<T: for<'de> serde::Deserialize<'de>>(what: &str, s: &str) -> Result<T> {
    serde_json::from_value(serde_json::Value::String(s.into()))
        .map_err(|_| Error::Config(format!("unknown {what} `{s}`")))
}

fn sweep(
    config: &Path,
    axis: &str,
    values: &[String],
    out: &Path,
    baseline: Option<String>,
    metric: &str,
    improvement: Option<String>,
) -> Result<()> {
    let config = ExperimentConfig::load(config)?;
    if values.is_empty() {
        return Err(Error::Config("--values must not be empty".into()));
    }
    std::fs::create_dir_all(out)?;
    if axis == "ratio_grid" {
        let ratios = values
            .iter()
            .map(|v| v.trim().parse::<f64>().map_err(|_| Error::Config(format!("invalid ratio `{v}`"))))
            .collect::<Result<Vec<_>>>()?;
        let grid = run_ratio_grid(&config, &ratios, &ratios)?;
        write_json(&out.join("ratio_grid.json"), &grid)?;
        println!(
            "misalignment {:.4} +/- {:.4}",
            grid.misalignment.mean, grid.misalignment.stderr
        );
        return Ok(());
    }
    let options = SweepOptions {
        metric: metric.parse::<SweepMetric>()?,
        baseline,
        improvement_mode: improvement
            .map(|m| parse_enum::<ImprovementMode>("improvement mode", &m))
            .transpose()?,
    };
    let result = run_sweep(&config, axis.parse::<SweepAxis>()?, values, &options, Some(out))?;
    for row in &result.rows {
        let m = row.summary.metric(result.metric);
        match row.percent_improvement {
            Some(p) => println!("{}\t{:.4} +/- {:.4}\t{:+.4}", row.value, m.mean, m.stderr, p),
            None => println!("{}\t{:.4} +/- {:.4}", row.value, m.mean, m.stderr),
        }
    }
    Ok(())
}

fn boundary(
    checkpoint: &Path,
    resolution: usize,
    out: &Path,
    bounds: Option<Vec<f64>>,
    data: Option<&Path>,
    label_col: &str,
) -> Result<()> {
    let model = Model::load_checkpoint(checkpoint)?;
    let dataset = data.map(|p| load_csv(p, label_col)).transpose()?;
    let bounds = match (bounds, &dataset) {
        (Some(b), _) => Bounds {
            x_min: b[0],
            x_max: b[1],
            y_min: b[2],
            y_max: b[3],
        },
        (None, Some(d)) => Bounds::around(d.x(), 1.0)?,
        (None, None) => return Err(Error::Config("boundary needs --bounds or --data".into())),
    };
    let grid = boundary_grid(&model, bounds, resolution)?;
    grid.write_csv(out)?;
    if let Some(d) = dataset {
        let (minority, _) = minority_majority_classes(&class_profile(&d)?);
        let points: Vec<[f64; 2]> = (0..d.len())
            .filter(|&i| minority.contains(&d.y()[i]))
            .map(|i| [d.x().row(i)[0], d.x().row(i)[1]])
            .filter(|p| bounds.contains(*p))
            .collect();
        print_json(&minority_margin(&grid, &points)?)?;
    }
    Ok(())
}

fn collapse(checkpoint: &Path, data: &Path, label_col: &str, out: Option<&Path>) -> Result<()> {
    let model = Model::load_checkpoint(checkpoint)?;
    let d = load_csv(data, label_col)?;
    let profile = class_profile(&d)?;
    if profile.n_classes != model.mlp.output_dim() {
        return Err(Error::Data(format!(
            "data has {} classes, model predicts {}",
            profile.n_classes,
            model.mlp.output_dim()
        )));
    }
    let (minority, _) = minority_majority_classes(&profile);
    let (logits, features) = model.mlp.infer(d.x())?;
    let report = collapse_report(&features, d.y(), profile.n_classes, &argmax_rows(&logits), &minority)?;
    if let Some(path) = out {
        write_json(path, &report)?;
    }
    print_json(&report)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Curate {
            input,
            output,
            ratio,
            seed,
            label_col,
        } => {
            let d = load_csv(&input, &label_col)?;
            let curated = curate_exponential(&d, ratio, seed)?;
            curated.write_csv(&output, &label_col)?;
            println!("class counts {:?}", curated.counts());
            Ok(())
        }
        Command::Train { config, out } => {
            let config = ExperimentConfig::load(&config)?;
            let (summary, _) = run_experiment(&config, Some(&out))?;
            println!(
                "config {}: test accuracy {:.4} +/- {:.4}, minority {:.4} +/- {:.4}",
                summary.config_hash,
                summary.overall_accuracy.mean,
                summary.overall_accuracy.stderr,
                summary.minority_accuracy.mean,
                summary.minority_accuracy.stderr
            );
            Ok(())
        }
        Command::Sweep {
            config,
            axis,
            values,
            out,
            baseline,
            metric,
            improvement,
        } => sweep(&config, &axis, &values, &out, baseline, &metric, improvement),
        Command::Boundary {
            checkpoint,
            resolution,
            out,
            bounds,
            data,
            label_col,
        } => boundary(&checkpoint, resolution, &out, bounds, data.as_deref(), &label_col),
        Command::Collapse {
            checkpoint,
            data,
            label_col,
            out,
        } => collapse(&checkpoint, &data, &label_col, out.as_deref()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
