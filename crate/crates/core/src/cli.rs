//! Command-line surface: `train`, `eval`, `ga`, `landscape` and `check`.

use std::ffi::OsString;
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::attacks::{Linearized, PgdConfig};
use crate::config::{read_config, Settings};
use crate::error::{Error, Result};
use crate::eval::{ga_score, loss_landscape, robust_accuracy, standard_accuracy};
use crate::models::{load_checkpoint, save_checkpoint};
use crate::oracle::suite::run_checks;
use crate::trainers::{train_with, METRICS_HEADER};

#[derive(Parser, Debug)]
#[command(
    name = "fastbat",
    version,
    about = "Bi-level adversarial training toolkit"
)]
struct Cli {
    /// Flat `key = value` config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override any config key, e.g. `--set lr_peak=0.1`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    /// Seed for every random stream.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model and write per-epoch metrics as CSV.
    Train(TrainArgs),
    /// Standard and robust accuracy of a checkpoint on the test split.
    Eval(CheckpointArgs),
    /// Gradient-alignment score of a checkpoint on the test split.
    Ga(GaArgs),
    /// Loss landscape around one test input, as a CSV grid.
    Landscape(LandscapeArgs),
    /// Run the oracle verification suite.
    Check,
}

#[derive(Args, Debug)]
struct DataArgs {
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long)]
    epsilon: Option<f64>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    /// Metrics CSV path; stdout when absent.
    #[arg(long)]
    metrics_out: Option<PathBuf>,
    #[arg(long)]
    checkpoint_out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct CheckpointArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    checkpoint: PathBuf,
}

#[derive(Args, Debug)]
struct GaArgs {
    #[command(flatten)]
    inner: CheckpointArgs,
    #[arg(long, default_value_t = 16)]
    samples: usize,
}

#[derive(Args, Debug)]
struct LandscapeArgs {
    #[command(flatten)]
    inner: CheckpointArgs,
    /// Row of the test split.
    #[arg(long, default_value_t = 0)]
    index: usize,
    /// Half-width of the grid; defaults to `2ε`.
    #[arg(long)]
    extent: Option<f64>,
    #[arg(long, default_value_t = 21)]
    grid_n: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn push<T: ToString>(v: &mut Vec<(String, String)>, key: &str, value: &Option<T>) {
    if let Some(x) = value {
        v.push((key.into(), x.to_string()));
    }
}

fn overrides(cli: &Cli) -> Result<Vec<(String, String)>> {
    let mut v = Vec::new();
    for s in &cli.set {
        let (k, val) = s
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got '{s}'")))?;
        v.push((k.trim().to_string(), val.trim().to_string()));
    }
    let data = match &cli.command {
        Command::Train(a) => Some(&a.data),
        Command::Eval(a) => Some(&a.data),
        Command::Ga(a) => Some(&a.inner.data),
        Command::Landscape(a) => Some(&a.inner.data),
        Command::Check => None,
    };
    if let Some(d) = data {
        push(&mut v, "dataset", &d.dataset);
        push(&mut v, "epsilon", &d.epsilon);
    }
    if let Command::Train(a) = &cli.command {
        push(&mut v, "method", &a.method);
        push(&mut v, "epochs", &a.epochs);
        push(&mut v, "batch_size", &a.batch_size);
        push(&mut v, "lambda", &a.lambda);
        push(
            &mut v,
            "metrics_out",
            &a.metrics_out.as_ref().map(|p| p.display()),
        );
        push(
            &mut v,
            "checkpoint_out",
            &a.checkpoint_out.as_ref().map(|p| p.display()),
        );
    }
    push(&mut v, "seed", &cli.seed);
    Ok(v)
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).map_err(|e| Error::io(p, e))?,
        )),
        None => Box::new(io::stdout().lock()),
    })
}

fn write_line(out: &mut dyn Write, path: Option<&Path>, line: &str) -> Result<()> {
    writeln!(out, "{line}").map_err(|e| Error::io(path.unwrap_or(Path::new("<stdout>")), e))
}

fn run_train(s: &Settings) -> Result<()> {
    let ds = s.load_dataset()?;
    let spec = s.model_spec(&ds);
    let path = s.metrics_out.as_deref();
    let mut out = output(path)?;
    write_line(&mut *out, path, METRICS_HEADER)?;
    let mut failure = None;
    let result = train_with(&s.train, &spec, &ds, &Linearized, |row| {
        if failure.is_none() {
            failure = write_line(&mut *out, path, &row.to_csv())
                .and_then(|_| {
                    out.flush()
                        .map_err(|e| Error::io(path.unwrap_or(Path::new("<stdout>")), e))
                })
                .err();
        }
    })?;
    if let Some(e) = failure {
        return Err(e);
    }
    out.flush()
        .map_err(|e| Error::io(path.unwrap_or(Path::new("<stdout>")), e))?;
    if let Some(ck) = &s.checkpoint_out {
        save_checkpoint(ck, &result.theta)?;
    }
    eprintln!(
        "trained {} for {} epochs; kept epoch {}",
        s.train.method.name(),
        result.history.len(),
        result.epoch
    );
    Ok(())
}

fn load_for_eval(
    s: &Settings,
    checkpoint: &Path,
) -> Result<(
    crate::models::ModelSpec,
    crate::autodiff::ParamVector,
    crate::tensor::Tensor,
    Vec<usize>,
)> {
    let ds = s.load_dataset()?;
    let spec = s.model_spec(&ds);
    let theta = load_checkpoint(checkpoint)?;
    spec.check_params(&theta)?;
    let (x, y) = ds.test_split();
    if y.is_empty() {
        return Err(Error::Config("test split is empty".into()));
    }
    Ok((spec, theta, x, y))
}

fn run_eval(s: &Settings, a: &CheckpointArgs) -> Result<()> {
    let (spec, theta, x, y) = load_for_eval(s, &a.checkpoint)?;
    let t = &s.train;
    let pgd = PgdConfig::for_epsilon(t.epsilon, t.eval_pgd_steps, t.eval_pgd_restarts, t.seed);
    let sa = standard_accuracy(&spec, &theta, &x, &y)?;
    let ra = robust_accuracy(&spec, &theta, &x, &y, t.epsilon, &pgd)?;
    println!("sa,ra_pgd");
    println!("{sa},{ra}");
    Ok(())
}

fn run_ga(s: &Settings, a: &GaArgs) -> Result<()> {
    let (spec, theta, x, y) = load_for_eval(s, &a.inner.checkpoint)?;
    let g = ga_score(&spec, &theta, &x, &y, s.train.epsilon, a.samples, s.seed())?;
    println!("ga_score,std_error");
    println!("{},{}", g.mean, g.std_error);
    Ok(())
}

fn run_landscape(s: &Settings, a: &LandscapeArgs) -> Result<()> {
    let (spec, theta, x, y) = load_for_eval(s, &a.inner.checkpoint)?;
    if a.index >= y.len() {
        return Err(Error::Config(format!(
            "index {} out of range for a test split of {}",
            a.index,
            y.len()
        )));
    }
    let extent = a.extent.unwrap_or(2.0 * s.train.epsilon);
    let grid = loss_landscape(
        &spec,
        &theta,
        x.row(a.index),
        y[a.index],
        extent,
        a.grid_n,
        s.seed(),
    )?;
    let path = a.out.as_deref();
    let mut out = output(path)?;
    out.write_all(grid.to_csv().as_bytes())
        .and_then(|_| out.flush())
        .map_err(|e| Error::io(path.unwrap_or(Path::new("<stdout>")), e))
}

fn run_check(s: &Settings) -> Result<bool> {
    let mut all = true;
    for outcome in run_checks(s.seed())? {
        println!("{outcome}");
        all &= outcome.passed();
    }
    Ok(all)
}

/// Parses `argv` (including the program name) and runs the selected command.
/// Returns 0 on success, 1 on runtime failure or a failed check, 2 on usage errors.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let settings = overrides(&cli).and_then(|o| {
        let file = match &cli.config {
            Some(p) => read_config(p)?,
            None => Vec::new(),
        };
        Settings::layered(&file, &o)
    });
    let settings = match settings {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error: {e}");
            return 2;
        }
    };
    let result = match &cli.command {
        Command::Train(_) => run_train(&settings).map(|_| true),
        Command::Eval(a) => run_eval(&settings, a).map(|_| true),
        Command::Ga(a) => run_ga(&settings, a).map(|_| true),
        Command::Landscape(a) => run_landscape(&settings, a).map(|_| true),
        Command::Check => run_check(&settings),
    };
    match result {
        Ok(true) => 0,
        Ok(false) => 1,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
