//! Command-line driver: simulation, dataset generation, training,
//! evaluation, integrator comparison, convergence studies, and the toy
//! precession demo. Emits CSV for tables and JSON for reports.
//!
//! Exit codes: 0 success, 1 usage/config error, 2 numerical divergence,
//! 3 I/O error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use liet2::autodiff::checkpoint::Checkpoint;
use liet2::config::RunConfig;
use liet2::error::Error;
use liet2::integrators::{rollout, StepContext, StepScheme, Storage};
use liet2::learning::dataset::{generate_dataset, save_trajectory, Dataset};
use liet2::learning::model::LearnedDynamics;
use liet2::learning::train::{
    baseline_train_matrix, predict_rollout, train, EpochRecord, TrainOutcome,
};
use liet2::metrics::{convergence_csv, convergence_study, evaluate_model, metric_trajectory};
use liet2::potentials::ZeroForcing;

#[derive(Parser)]
#[command(
    name = "liet2",
    about = "Structure-preserving rigid-body N-body integration and residual-dynamics learning",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// Run configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output file or directory, depending on the subcommand.
    #[arg(long)]
    out: PathBuf,
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the simulation scheme.
    #[arg(long)]
    scheme: Option<String>,
    /// Override the simulation step count.
    #[arg(long)]
    steps: Option<usize>,
    /// Override the simulation step size.
    #[arg(long)]
    h: Option<f64>,
    /// Override the evaluation/training substeps per observation.
    #[arg(long)]
    substeps: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Integrate the configured system and write a trajectory file.
    Simulate(CommonArgs),
    /// Generate a ground-truth dataset from the config's data section.
    GenData(CommonArgs),
    /// Train the residual model on a dataset; writes checkpoint + curve.
    Train {
        #[command(flatten)]
        common: CommonArgs,
        /// Dataset file produced by gen-data.
        #[arg(long)]
        data: PathBuf,
    },
    /// Evaluate a trained checkpoint on a dataset; writes a JSON report.
    Evaluate {
        #[command(flatten)]
        common: CommonArgs,
        /// Dataset file produced by gen-data.
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint file produced by train.
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Train every scheme identically and report per-scheme metrics.
    CompareIntegrators {
        #[command(flatten)]
        common: CommonArgs,
        /// Reuse an existing dataset instead of generating one.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Step-size convergence study; writes the slope table as CSV.
    Convergence(CommonArgs),
    /// Toy precession demo: emits point-truth, rigid-truth, and learned
    /// trajectories for plotting.
    PrecessDemo(CommonArgs),
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let code = match e {
                Error::Divergence { .. }
                | Error::SingularConfiguration { .. }
                | Error::TrainingDiverged { .. } => 2,
                Error::Io(_) => 3,
                _ => 1,
            };
            ExitCode::from(code)
        }
    }
}

fn load_config(common: &CommonArgs) -> liet2::Result<RunConfig> {
    let mut config = RunConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        config.seed = seed;
        if let Some(t) = &mut config.train {
            t.seed = seed;
        }
    }
    if let Some(scheme) = &common.scheme {
        config.sim.scheme = scheme.parse()?;
    }
    if let Some(steps) = common.steps {
        config.sim.steps = steps;
    }
    if let Some(h) = common.h {
        config.sim.h = h;
    }
    if let Some(substeps) = common.substeps {
        let mut eval = config.eval.unwrap_or_default();
        eval.substeps = substeps;
        config.eval = Some(eval);
        if let Some(t) = &mut config.train {
            t.substeps = substeps;
        }
    }
    config.validate()?;
    Ok(config)
}

fn run(command: Command) -> liet2::Result<()> {
    match command {
        Command::Simulate(common) => simulate(&common),
        Command::GenData(common) => gen_data(&common),
        Command::Train { common, data } => cmd_train(&common, &data),
        Command::Evaluate { common, data, checkpoint } => {
            cmd_evaluate(&common, &data, &checkpoint)
        }
        Command::CompareIntegrators { common, data } => {
            compare_integrators(&common, data.as_deref())
        }
        Command::Convergence(common) => cmd_convergence(&common),
        Command::PrecessDemo(common) => precess_demo(&common),
    }
}

fn simulate(common: &CommonArgs) -> liet2::Result<()> {
    let config = load_config(common)?;
    let (params, init) = config.to_system()?;
    let potential = config.truth.build()?;
    let forcing = ZeroForcing;
    let ctx = StepContext::new(&params, potential.as_ref(), &forcing, config.sim.h);
    let states = rollout(
        config.sim.scheme,
        &init,
        &ctx,
        config.sim.steps,
        Storage::Stride(config.sim.stride),
    )?;
    save_trajectory(&common.out, &states)?;
    println!(
        "simulate: {} steps of {} at h = {} -> {} snapshots -> {}",
        config.sim.steps,
        config.sim.scheme,
        config.sim.h,
        states.len(),
        common.out.display()
    );
    Ok(())
}

fn data_section(config: &RunConfig) -> liet2::Result<liet2::config::DataConfig> {
    config.data.ok_or_else(|| {
        Error::Config("this subcommand needs a 'data' section in the config".into())
    })
}

fn generate_from_config(config: &RunConfig) -> liet2::Result<Dataset> {
    let (params, init) = config.to_system()?;
    let data = data_section(config)?;
    let potential = config.truth.build()?;
    let mut ds = generate_dataset(
        potential.as_ref(),
        &ZeroForcing,
        &params,
        &init,
        data.l,
        data.k,
        data.dt,
        data.fine_h,
        data.noise_sigma,
        config.seed,
    )?;
    ds.truth = config.truth.name().to_string();
    Ok(ds)
}

fn gen_data(common: &CommonArgs) -> liet2::Result<()> {
    let config = load_config(common)?;
    let ds = generate_from_config(&config)?;
    ds.save(&common.out)?;
    println!(
        "gen-data: {} trajectories ({} train) of {} observations -> {}",
        ds.trajectories.len(),
        ds.n_train(),
        ds.k(),
        common.out.display()
    );
    Ok(())
}

fn curve_csv(curve: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,train_loss,val_loss,diverged_samples\n");
    for r in curve {
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.epoch, r.train_loss, r.val_loss, r.diverged_samples
        ));
    }
    out
}

fn cmd_train(common: &CommonArgs, data: &Path) -> liet2::Result<()> {
    let config = load_config(common)?;
    let train_config = config
        .train
        .clone()
        .ok_or_else(|| Error::Config("train needs a 'train' section in the config".into()))?;
    let dataset = Dataset::load(data)?;
    let (model, curve) = train(&dataset, &train_config)?;

    std::fs::create_dir_all(&common.out)?;
    let ckpt_path = common.out.join("model.ckpt");
    model.to_checkpoint(train_config.hash()).save(&ckpt_path)?;
    let curve_path = common.out.join("curve.csv");
    std::fs::write(&curve_path, curve_csv(&curve))?;
    let last = curve.last().expect("training always records epochs");
    println!(
        "train: {} epochs with {}, final train loss {}, val loss {} -> {}",
        curve.len(),
        train_config.scheme,
        last.train_loss,
        last.val_loss,
        common.out.display()
    );
    Ok(())
}

fn cmd_evaluate(common: &CommonArgs, data: &Path, checkpoint: &Path) -> liet2::Result<()> {
    let config = load_config(common)?;
    let dataset = Dataset::load(data)?;
    let model = LearnedDynamics::from_checkpoint(&Checkpoint::load(checkpoint)?)?;
    let eval = config.eval.unwrap_or_default();
    let truth = config.truth.build()?;
    let report = evaluate_model(
        &model,
        &dataset,
        Some(truth.as_ref()),
        eval.horizon,
        eval.substeps,
        config.sim.scheme,
    )?;
    let json = serde_json::to_string_pretty(&report)
        .map_err(|e| Error::Format(e.to_string()))?;
    std::fs::write(&common.out, &json)?;
    println!("{json}");
    Ok(())
}

#[derive(Serialize)]
struct SchemeReport {
    scheme: StepScheme,
    trained: bool,
    diverged_at_epoch: Option<usize>,
    report: liet2::metrics::MetricsReport,
}

fn compare_integrators(common: &CommonArgs, data: Option<&Path>) -> liet2::Result<()> {
    let config = load_config(common)?;
    let train_config = config.train.clone().ok_or_else(|| {
        Error::Config("compare-integrators needs a 'train' section in the config".into())
    })?;
    let dataset = match data {
        Some(path) => Dataset::load(path)?,
        None => generate_from_config(&config)?,
    };
    let eval = config.eval.unwrap_or_default();
    let truth = config.truth.build()?;

    let matrix = baseline_train_matrix(&dataset, &StepScheme::ALL, &train_config)?;
    let mut reports = Vec::new();
    for (scheme, outcome) in &matrix {
        let report = evaluate_model(
            outcome.model(),
            &dataset,
            Some(truth.as_ref()),
            eval.horizon,
            eval.substeps,
            *scheme,
        )?;
        let diverged_at_epoch = match outcome {
            TrainOutcome::Trained { .. } => None,
            TrainOutcome::Diverged { epoch, .. } => Some(*epoch),
        };
        reports.push(SchemeReport {
            scheme: *scheme,
            trained: diverged_at_epoch.is_none(),
            diverged_at_epoch,
            report,
        });
    }
    let json = serde_json::to_string_pretty(&reports)
        .map_err(|e| Error::Format(e.to_string()))?;
    std::fs::write(&common.out, &json)?;
    println!("{json}");
    Ok(())
}

fn cmd_convergence(common: &CommonArgs) -> liet2::Result<()> {
    let config = load_config(common)?;
    let conv = config.convergence.clone().ok_or_else(|| {
        Error::Config("convergence needs a 'convergence' section in the config".into())
    })?;
    let (params, init) = config.to_system()?;
    let potential = config.truth.build()?;
    let table = convergence_study(
        &params,
        potential.as_ref(),
        &init,
        &conv.schemes,
        &conv.hs,
        conv.t_end,
        conv.h_ref,
    )?;
    let csv = convergence_csv(&table);
    std::fs::write(&common.out, &csv)?;
    print!("{csv}");
    Ok(())
}

fn precess_demo(common: &CommonArgs) -> liet2::Result<()> {
    let config = load_config(common)?;
    let (params, init) = config.to_system()?;
    let data = data_section(&config)?;
    let train_config = config.train.clone().ok_or_else(|| {
        Error::Config("precess-demo needs a 'train' section in the config".into())
    })?;
    let eval = config.eval.unwrap_or_default();
    std::fs::create_dir_all(&common.out)?;

    // ground truth with rigid-body (quadrupole) coupling
    let dataset = generate_from_config(&config)?;
    let horizon = eval.horizon;
    let truth_potential = config.truth.build()?;
    let forcing = ZeroForcing;
    let fine_ctx = StepContext::new(&params, truth_potential.as_ref(), &forcing, data.fine_h);
    let m = (data.dt / data.fine_h).round() as usize;
    let rigid_truth =
        rollout(StepScheme::LieT2, &init, &fine_ctx, horizon * m, Storage::Stride(m))?;

    // zero-correction baseline: plain point-mass gravity
    let baseline = LearnedDynamics::baseline(params.n_bodies());
    let point_truth = predict_rollout(
        &baseline,
        &params,
        &init,
        data.dt,
        eval.substeps,
        horizon,
        StepScheme::LieT2,
    )?;

    // learned correction trained on the rigid-truth dataset
    let (model, _) = train(&dataset, &train_config)?;
    let learned = predict_rollout(
        &model,
        &params,
        &init,
        data.dt,
        eval.substeps,
        horizon,
        StepScheme::LieT2,
    )?;

    save_trajectory(&common.out.join("rigid_truth.txt"), &rigid_truth)?;
    save_trajectory(&common.out.join("point_truth.txt"), &point_truth)?;
    save_trajectory(&common.out.join("learned.txt"), &learned)?;

    let (dq_base, _) = metric_trajectory(&point_truth, &rigid_truth)?;
    let (dq_learned, _) = metric_trajectory(&learned, &rigid_truth)?;
    println!(
        "precess-demo: {horizon}-step mean position error vs rigid truth: \
         zero-correction {dq_base}, learned {dq_learned} (improvement {}x)",
        dq_base / dq_learned
    );
    Ok(())
}
