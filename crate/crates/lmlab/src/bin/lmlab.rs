//! Batch experiment runner. Every subcommand is a pure function of
//! (config, seed): rerunning with the same inputs reproduces identical
//! output files, including under --jobs > 1.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use lmlab::config::ExperimentConfig;
use lmlab::experiment::{
    self, build_world_and_task, fit_logz, quad_verify, run_experiment, sweep_and_fit_sqrt,
    train_reference_model, CertificateDoc, ModelDoc, WorldDoc,
};
use lmlab::linear_eval::{natural_certificate, FitOpts};

#[derive(Parser)]
#[command(name = "lmlab", version, about = "Synthetic language-model worlds and transfer-bound verification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment configuration (JSON)
    #[arg(long)]
    config: PathBuf,
    /// Output directory for artifacts
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Override the config seed
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for sweep points
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize the world (and task) -> world.json
    Synth(Common),
    /// Train the configured model -> model.json
    Train(Common),
    /// Certify the task as (tau, B)-natural -> certificate.json
    Certify(Common),
    /// Run the theorem bound sweep -> bounds.csv + JSON bundle
    Bound(Common),
    /// Compare gradient-trained Quad to its closed form -> quad_verify.json
    QuadVerify(Common),
    /// Fit the log-partition quadratic -> quadfit.json
    FitLogz(Common),
    /// Epsilon sweep with square-root trend fit -> sweep.csv + sqrtfit.json
    Sweep(Common),
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Synth(c)
            | Command::Train(c)
            | Command::Certify(c)
            | Command::Bound(c)
            | Command::QuadVerify(c)
            | Command::FitLogz(c)
            | Command::Sweep(c) => c,
        }
    }
}

fn load_config(common: &Common) -> lmlab::Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> lmlab::Result<bool> {
    let common = cli.command.common().clone();
    let cfg = load_config(&common)?;
    let out = common.out.as_path();
    match cli.command {
        Command::Synth(_) => {
            let (gt, task, _) = build_world_and_task(&cfg)?;
            experiment::write_world(out, &WorldDoc::new(&gt, Some(&task)))?;
            println!("wrote {}", out.join("world.json").display());
            Ok(true)
        }
        Command::Train(_) => {
            let (gt, _, _) = build_world_and_task(&cfg)?;
            let model = train_reference_model(&cfg, &gt)?;
            experiment::write_model(out, &ModelDoc::new(&model))?;
            println!("wrote {}", out.join("model.json").display());
            Ok(true)
        }
        Command::Certify(_) => {
            let (gt, task, _) = build_world_and_task(&cfg)?;
            let subspace = if cfg.theorems.iter().any(|t| t == "T4.2") {
                Some(experiment::build_phi(&cfg, &gt)?)
            } else {
                None
            };
            let cert = natural_certificate(&gt, &task, cfg.task.b, subspace.as_ref(), &FitOpts::default())?;
            experiment::write_certificate(out, &CertificateDoc::new(&cert))?;
            println!("tau = {}, B = {}", cert.tau, cert.b);
            println!("wrote {}", out.join("certificate.json").display());
            Ok(true)
        }
        Command::Bound(_) => {
            let run = run_experiment(&cfg, common.jobs)?;
            experiment::write_run(out, &run)?;
            for r in &run.reports {
                println!("{}", r.csv_row());
            }
            println!(
                "{} reports, holds: {}, solver flags: {}",
                run.reports.len(),
                run.all_hold,
                run.any_solver_flag
            );
            Ok(run.all_hold && !run.any_solver_flag)
        }
        Command::QuadVerify(_) => {
            let report = quad_verify(&cfg)?;
            std::fs::create_dir_all(out)?;
            std::fs::write(
                out.join("quad_verify.json"),
                serde_json::to_string_pretty(&report)? + "\n",
            )?;
            println!(
                "closed form {} vs trained {} (gap {:.3e}, max angle {:.3e})",
                report.closed_form_value, report.trained_loss, report.loss_gap, report.max_principal_angle
            );
            Ok(report.ok)
        }
        Command::FitLogz(_) => {
            let doc = fit_logz(&cfg)?;
            std::fs::create_dir_all(out)?;
            std::fs::write(out.join("quadfit.json"), serde_json::to_string_pretty(&doc)? + "\n")?;
            println!("regression mse {}, residual ratio {}", doc.regression_mse, doc.residual_ratio);
            Ok(true)
        }
        Command::Sweep(_) => {
            let (rows, fit) = sweep_and_fit_sqrt(&cfg, common.jobs)?;
            experiment::write_sweep(out, &rows, &fit)?;
            println!("sqrt fit: a={} b={} c={} r={}", fit.a, fit.b, fit.c, fit.r_value);
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
