use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use tgrbf::gradcheck::run_gradcheck;
use tgrbf::harness::{
    compare_controllers, export_comparison, export_run, identify, prepare_network, run_scenario, ControllerKind,
    ScenarioConfig,
};
use tgrbf::net::save_checkpoint;
use tgrbf::offline::{generate_dataset, write_dataset};
use tgrbf::Error;

const EXIT_INVALID: u8 = 2;
const EXIT_ABORTED: u8 = 3;

#[derive(Parser)]
#[command(name = "tgrbf", version, about = "TGRBF identification and adaptive tracking control")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the nominal dataset, train offline and save a checkpoint.
    Identify(Common),
    /// Run one closed-loop scenario.
    Run {
        #[command(flatten)]
        common: Common,
        /// tgrbf_nc, nc_fixed or pid (default: the config's controller, else tgrbf_nc).
        #[arg(long)]
        controller: Option<String>,
    },
    /// Run all three controllers and write the comparison table.
    Compare(Common),
    /// Compare analytic Jacobians with central finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 200)]
        pairs: usize,
    },
}

#[derive(Args)]
struct Common {
    /// Scenario JSON; the default step scenario when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the scenario seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

impl Common {
    fn scenario(&self) -> tgrbf::Result<ScenarioConfig> {
        let mut cfg = match &self.config {
            Some(path) => ScenarioConfig::load(path)?,
            None => ScenarioConfig::step(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Diverged { .. } => ExitCode::from(EXIT_ABORTED),
                Error::Config(_) | Error::InvalidParameter(_) | Error::Io { .. } | Error::Json(_) => {
                    ExitCode::from(EXIT_INVALID)
                }
                _ => ExitCode::FAILURE,
            }
        }
    }
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> tgrbf::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn create_dir(dir: &Path) -> tgrbf::Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn execute(command: Command) -> tgrbf::Result<ExitCode> {
    match command {
        Command::Identify(common) => {
            let cfg = common.scenario()?;
            create_dir(&common.out)?;
            write_dataset(
                &generate_dataset(&cfg.network.identify.dataset)?,
                common.out.join("dataset.csv"),
            )?;
            let (net, outcome) = identify(&cfg)?;
            save_checkpoint(&net, common.out.join("checkpoint.json"))?;
            if let Some(o) = outcome {
                println!(
                    "holdout mse {:.6e} r2 {:.6} ({} epochs, {} rejected)",
                    o.holdout.mse, o.holdout.r2, o.epochs_run, o.rejected_epochs
                );
                write_json(&common.out.join("fit.json"), &o)?;
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Run { common, controller } => {
            let cfg = common.scenario()?;
            let kind = match controller {
                Some(name) => ControllerKind::from_name(&name)
                    .ok_or_else(|| Error::Config(format!("unknown controller {name:?}")))?,
                None => cfg.controller.kind.unwrap_or(ControllerKind::TgrbfNc),
            };
            let (net, _) = prepare_network(&cfg)?;
            let (trace, metrics) = run_scenario(&cfg, kind, &net)?;
            export_run(&trace, &metrics, &common.out, "")?;
            println!(
                "{}: iae {:.6e} ise {:.6e} itae {:.6e} updates {}",
                kind.name(),
                metrics.iae,
                metrics.ise,
                metrics.itae,
                metrics.update_count
            );
            if let Some(reason) = &trace.meta.aborted {
                eprintln!("aborted: {reason}");
                return Ok(ExitCode::from(EXIT_ABORTED));
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Compare(common) => {
            let cfg = common.scenario()?;
            let (net, _) = prepare_network(&cfg)?;
            let cmp = compare_controllers(&cfg, &net)?;
            export_comparison(&cmp, &common.out)?;
            for row in &cmp.rows {
                let m = &row.metrics;
                println!(
                    "{:<9} iae {:.4e} ise {:.4e} itae {:.4e}{}",
                    row.controller.name(),
                    m.iae,
                    m.ise,
                    m.itae,
                    if row.aborted { " (aborted)" } else { "" }
                );
            }
            for o in &cmp.orderings {
                println!("{} {}", if o.holds { "holds" } else { "FAILS" }, o.name);
            }
            if cmp.rows.iter().any(|r| r.aborted) {
                return Ok(ExitCode::from(EXIT_ABORTED));
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Gradcheck { seed, pairs } => {
            let report = run_gradcheck(pairs, seed)?;
            println!(
                "pairs {} rejected {} max relative error {:.3e} (params {:.3e}, input {:.3e}, replay {:.3e})",
                report.pairs,
                report.rejected,
                report.max_rel(),
                report.max_rel_param,
                report.max_rel_input,
                report.max_rel_replay
            );
            Ok(if report.max_rel() < 1e-5 {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            })
        }
    }
}
