use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use emi_core::emi::RegularizeTarget;
use emi_core::envs::EnvKind;
use emi_core::mi::{mi_gaussian_check, GaussianCheckConfig};
use emi_core::model::{Checkpoint, EmiModel};
use emi_harness::align::AlignmentTable;
use emi_harness::boundary::{collect_random, error_norms, BoundaryReport};
use emi_harness::boximage::{boximage_embed, write_boximage_artifacts, BoximageConfig};
use emi_harness::config::RunConfig;
use emi_harness::run::run_experiment;
use emi_harness::{HarnessError, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Parser)]
#[command(name = "emi", version, about = "Exploration with mutual-information embeddings")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Target {
    Action,
    State,
}

#[derive(Subcommand)]
enum Command {
    /// Train an exploring agent from a TOML config.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Override `max_iter` from the config.
        #[arg(long)]
        max_iter: Option<usize>,
        /// Override `intrinsic.eta` from the config.
        #[arg(long)]
        eta: Option<f64>,
    },
    /// Learn 2-D embeddings of BoxImage from random actions.
    BoximageEmbed {
        #[arg(long, default_value_t = 30_000)]
        samples: usize,
        #[arg(long, value_enum)]
        regularize: Target,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lambda_info: Option<f64>,
        #[arg(long)]
        lambda_kl: Option<f64>,
    },
    /// Train a critic on correlated Gaussians and report the JSD bound.
    MiCheck {
        #[arg(long, allow_hyphen_values = true)]
        rho: f64,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Affine-fit R² of the phi_*/psi_* columns of a CSV against the others.
    EvalAlign {
        #[arg(long)]
        embeddings: PathBuf,
    },
    /// Compare error-model norms on clipped and interior transitions.
    BoundaryAnalysis {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10_000)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    match dispatch(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Run {
            config,
            seed,
            out,
            max_iter,
            eta,
        } => {
            let mut cfg = RunConfig::load(&config)?;
            cfg.seed = seed;
            if let Some(m) = max_iter {
                cfg.max_iter = m;
            }
            if let Some(e) = eta {
                cfg.intrinsic.eta = e;
            }
            let summary = run_experiment(&cfg, &out)?;
            let last = summary.records.last().expect("at least one iteration");
            println!(
                "{} iterations, {} steps, last mean return {:.4}",
                summary.records.len(),
                last.steps,
                last.mean_return
            );
            match summary.first_success {
                Some(i) => println!("first success at iteration {i}"),
                None => println!("no successful iteration"),
            }
            println!("artifacts in {}", out.display());
        }
        Command::BoximageEmbed {
            samples,
            regularize,
            seed,
            out,
            epochs,
            lambda_info,
            lambda_kl,
        } => {
            let target = match regularize {
                Target::Action => RegularizeTarget::Action,
                Target::State => RegularizeTarget::State,
            };
            let mut cfg = BoximageConfig::new(samples, target, seed);
            if let Some(e) = epochs {
                cfg.epochs = e;
            }
            if let Some(l) = lambda_info {
                cfg.lambda_info = l;
            }
            if let Some(l) = lambda_kl {
                cfg.lambda_kl = l;
            }
            let outcome = boximage_embed(&cfg)?;
            write_boximage_artifacts(&outcome, &cfg, &out)?;
            let r = &outcome.report;
            println!("state R² {:.4}", r.state_r2);
            println!("action R² {:.4}", r.action_r2);
            println!("embedding spread {:.4}", r.spread);
            println!("{}", r.boundary.describe());
        }
        Command::MiCheck { rho, seed, steps } => {
            let mut cfg = GaussianCheckConfig::new(rho);
            if let Some(s) = steps {
                cfg.steps = s;
            }
            let r = mi_gaussian_check(&cfg, seed)?;
            println!("rho {:.4}", r.rho);
            println!("initial jsd bound {:.6}", r.initial_bound);
            println!("trained jsd bound {:.6}", r.bound);
            println!("trained dv bound {:.6}", r.kl_bound);
            println!("true mutual information {:.6}", r.true_mi);
        }
        Command::EvalAlign { embeddings } => {
            let table = AlignmentTable::read(&embeddings)?;
            println!(
                "R² {:.6} ({} rows, [{}] -> [{}])",
                table.r2()?,
                table.embeddings.len(),
                table.embedding_columns.join(", "),
                table.target_columns.join(", ")
            );
        }
        Command::BoundaryAnalysis {
            checkpoint,
            out,
            samples,
            seed,
        } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let model = EmiModel::from_checkpoint(&ck)?;
            let env_name = ck.meta_value("env").unwrap_or("box_image");
            let kind = EnvKind::from_name(env_name)
                .ok_or_else(|| HarnessError::Input(format!("unknown env `{env_name}` in checkpoint")))?;
            let mut env = kind.build();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let transitions = collect_random(env.as_mut(), samples, &mut rng)?;
            let norms = error_norms(&model, &transitions)?;
            let flags: Vec<bool> = transitions.iter().map(|t| t.clipped).collect();
            let report = BoundaryReport::from_norms(&norms, &flags);
            std::fs::create_dir_all(&out).map_err(|e| HarnessError::Io {
                path: out.clone(),
                source: e,
            })?;
            let mut w = csv::Writer::from_path(out.join("boundary.csv"))?;
            w.write_record(["clipped", "err_norm"])?;
            for (c, n) in flags.iter().zip(&norms) {
                w.write_record([u8::from(*c).to_string(), format!("{n:?}")])?;
            }
            w.flush().map_err(|e| HarnessError::Io {
                path: out.join("boundary.csv"),
                source: e,
            })?;
            println!("{}", report.describe());
        }
    }
    Ok(())
}
