//! `booster`: train, evaluate, analyze, and sweep frame-signal runs.
//!
//! Exit codes: 0 success, 2 configuration error (including bad flags),
//! 3 data error (missing/corrupt datasets or checkpoints).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use booster_core::analysis::{self, SignalMode, METRICS_HEADER};
use booster_core::attack;
use booster_core::checkpoint;
use booster_core::data::{self, Dataset, SynthConfig};
use booster_core::error::Error;
use booster_core::train::{self, TrainPlan, Trainer};
use booster_core::{BoosterSignal, Result};

#[derive(Parser)]
#[command(
    name = "booster",
    version,
    about = "Adversarial training with a trainable frame signal"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a run (resumes if OUT already holds one)
    Train {
        /// JSON training plan
        #[arg(long)]
        plan: PathBuf,
        /// Dataset directory (IDX or binary color batches)
        #[arg(long)]
        data: PathBuf,
        /// Run directory to create or resume
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint under an attack
    Eval {
        /// Run directory produced by `train`
        #[arg(long)]
        ckpt: PathBuf,
        /// Dataset directory; the test split is scored
        #[arg(long)]
        data: PathBuf,
        /// none, fgsm, pgd7, pgd20, or cw
        #[arg(long, default_value = "pgd20")]
        attack: String,
        /// Which frame the scored inputs carry
        #[arg(long, value_enum, default_value_t = SignalArg::Booster)]
        signal: SignalArg,
    },
    /// Diagnostics over a trained run
    Analyze {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        mode: AnalyzeMode,
        /// Also write the CSV here (stdout regardless)
        #[arg(long)]
        out: Option<PathBuf>,
        /// Test image index for landscape mode
        #[arg(long, default_value_t = 0)]
        image: usize,
        /// Comma-separated epsilons for curve mode
        #[arg(long, value_delimiter = ',')]
        eps: Vec<f32>,
    },
    /// Train one run per value of a plan field
    Sweep {
        #[arg(long, value_enum)]
        kind: SweepKind,
        /// Comma-separated widths or subset sizes
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<usize>,
        #[arg(long)]
        plan: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate the synthetic stroke-digit corpus in IDX format
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 6000)]
        train: usize,
        #[arg(long, default_value_t = 1000)]
        test: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SignalArg {
    Null,
    Booster,
    Pool,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum AnalyzeMode {
    Gradnorm,
    Landscape,
    Curve,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SweepKind {
    Width,
    Subset,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Data(_) | Error::Format(_) | Error::Corruption(_) | Error::Io(_) => 3,
        Error::Config(_) | Error::Shape(_) | Error::Numerical { .. } => 2,
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Train { plan, data, out } => cmd_train(&plan, &data, &out),
        Cmd::Eval {
            ckpt,
            data,
            attack,
            signal,
        } => cmd_eval(&ckpt, &data, &attack, signal),
        Cmd::Analyze {
            ckpt,
            data,
            mode,
            out,
            image,
            eps,
        } => cmd_analyze(&ckpt, &data, mode, out.as_deref(), image, &eps),
        Cmd::Sweep {
            kind,
            values,
            plan,
            data,
            out,
        } => cmd_sweep(kind, &values, &plan, &data, &out),
        Cmd::Synth { out, train, test, seed } => {
            data::write_synth_corpus(&out, train, test, seed, &SynthConfig::default())
        }
    }
}

/// Test split with the plan's optional truncation applied.
fn load_splits(plan: &TrainPlan, dir: &Path) -> Result<(Dataset, Dataset)> {
    let (train, test) = data::load_dir(dir)?;
    let train = match plan.train_limit {
        Some(n) => train.take(n)?,
        None => train,
    };
    let test = match plan.test_limit {
        Some(n) => test.take(n)?,
        None => test,
    };
    Ok((train, test))
}

fn cmd_train(plan_path: &Path, data_dir: &Path, out: &Path) -> Result<()> {
    let plan = TrainPlan::from_json_file(plan_path)?;
    let (train, test) = load_splits(&plan, data_dir)?;
    let mut trainer = if out.join("state.json").exists() {
        let t = Trainer::load(out)?;
        let stored = serde_json::to_string(&t.plan).map_err(|e| Error::format(e.to_string()))?;
        let asked = serde_json::to_string(&plan).map_err(|e| Error::format(e.to_string()))?;
        if stored != asked {
            return Err(Error::config(format!(
                "{} holds a run with a different plan; pick a fresh --out to retrain",
                out.display()
            )));
        }
        t
    } else {
        Trainer::new(plan, train.dims(), train.num_classes, out)?
    };
    let rows = trainer.run(&train, &test)?;
    println!("{METRICS_HEADER}");
    for r in &rows {
        println!("{}", r.csv_row());
    }
    Ok(())
}

/// Model, final signal, and per-epoch signal pool from a run directory.
fn load_ckpt(ckpt: &Path) -> Result<(Trainer, Vec<BoosterSignal>)> {
    if !ckpt.join("state.json").exists() {
        return Err(Error::data(format!("{}: checkpoint not found", ckpt.display())));
    }
    let t = Trainer::load(ckpt)?;
    let mut pool = Vec::new();
    for e in 0..t.epochs_done() {
        let sig = checkpoint::load_signal(&train::epoch_dir(ckpt, e).join("signal.sig"))?;
        if sig.width() > 0 {
            pool.push(sig);
        }
    }
    Ok((t, pool))
}

fn signal_mode<'a>(arg: SignalArg, t: &'a Trainer, pool: &'a [BoosterSignal]) -> SignalMode<'a> {
    match arg {
        SignalArg::Null => SignalMode::Null(t.signal().width()),
        SignalArg::Booster => SignalMode::Single(t.signal()),
        SignalArg::Pool => SignalMode::Pool(pool),
    }
}

fn cmd_eval(ckpt: &Path, data_dir: &Path, attack_name: &str, signal: SignalArg) -> Result<()> {
    let (t, pool) = load_ckpt(ckpt)?;
    let (_, test) = load_splits(&t.plan, data_dir)?;
    let mode = signal_mode(signal, &t, &pool);
    let spec = match attack_name {
        "none" => None,
        name => Some(attack::profile(name, t.plan.epsilon)?),
    };
    let row = analysis::evaluate(
        t.model(),
        &test,
        &mode,
        spec.as_ref(),
        "test",
        t.plan.eval_batch,
        t.plan.seed,
        t.epochs_done() as u64,
    )?;
    println!("{METRICS_HEADER}");
    println!("{}", row.csv_row());
    Ok(())
}

fn emit(csv: String, out: Option<&Path>) -> Result<()> {
    if let Some(path) = out {
        std::fs::write(path, &csv)?;
    }
    print!("{csv}");
    Ok(())
}

fn cmd_analyze(
    ckpt: &Path,
    data_dir: &Path,
    mode: AnalyzeMode,
    out: Option<&Path>,
    image: usize,
    eps: &[f32],
) -> Result<()> {
    let (t, pool) = load_ckpt(ckpt)?;
    let (_, test) = load_splits(&t.plan, data_dir)?;
    let width = t.signal().width();
    let sig_mode = if width > 0 {
        signal_mode(SignalArg::Booster, &t, &pool)
    } else {
        SignalMode::Null(0)
    };

    match mode {
        AnalyzeMode::Gradnorm => {
            let norms = analysis::grad_norm_distribution(t.model(), &test, &sig_mode, t.plan.eval_batch, t.plan.seed)?;
            let mut csv = String::from("bin_lo,bin_hi,count\n");
            for (lo, hi, n) in analysis::histogram(&norms, 30) {
                csv.push_str(&format!("{},{},{}\n", lo, hi, n));
            }
            emit(csv, out)
        }
        AnalyzeMode::Landscape => {
            if image >= test.len() {
                return Err(Error::config(format!(
                    "--image {} out of range for a {}-example test split",
                    image,
                    test.len()
                )));
            }
            let (x, y) = test.batch(&[image])?;
            let canvas = match &sig_mode {
                SignalMode::Single(s) => s.inject_batch(&x)?,
                _ => x,
            };
            let (rows, range) =
                analysis::landscape(t.model(), &canvas, y[0], t.plan.epsilon, 21, t.plan.seed, image as u64)?;
            let mut csv = String::from("a,b,loss\n");
            for (a, b, loss) in rows {
                csv.push_str(&format!("{},{},{}\n", a, b, loss));
            }
            eprintln!("grid range (max - min): {range}");
            emit(csv, out)
        }
        AnalyzeMode::Curve => {
            let grid: Vec<f32> = if eps.is_empty() {
                vec![0.0, 2.0 / 255.0, 4.0 / 255.0, 8.0 / 255.0, 12.0 / 255.0, 16.0 / 255.0]
            } else {
                eps.to_vec()
            };
            let rows = analysis::robustness_curve(
                t.model(),
                &test,
                &sig_mode,
                &t.plan.eval_attack,
                &grid,
                t.plan.eval_batch,
                t.plan.seed,
            )?;
            let mut csv = String::from("epsilon,accuracy\n");
            for (e, a) in rows {
                csv.push_str(&format!("{},{}\n", e, a));
            }
            emit(csv, out)
        }
    }
}

fn cmd_sweep(kind: SweepKind, values: &[usize], plan_path: &Path, data_dir: &Path, out: &Path) -> Result<()> {
    let plan = TrainPlan::from_json_file(plan_path)?;
    let (train, test) = load_splits(&plan, data_dir)?;
    let rows = match kind {
        SweepKind::Width => train::sweep_width(&plan, values, &train, &test, out)?,
        SweepKind::Subset => train::sweep_subset(&plan, values, &train, &test, out)?,
    };
    train::write_sweep_csv(&out.join("sweep.csv"), &rows)?;
    println!("value,natural_accuracy,robust_accuracy");
    for (v, nat, rob) in &rows {
        println!("{},{},{}", v, nat, rob);
    }
    Ok(())
}
