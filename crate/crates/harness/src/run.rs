//! The outer training loop: collect, reward, fit embeddings, update policy.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use emi_core::agent::{collect_rollouts, Policy, PolicyTrainer};
use emi_core::emi::{augment_rewards, embed_observations, intrinsic_rewards, EmbeddingTrainer, LossReport};
use emi_core::envs::Transition;
use emi_core::model::EmiModel;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{io_err, Result};
use crate::plot::scatter_svg;

/// One row of progress.csv.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub steps: usize,
    pub mean_return: f64,
    pub std_return: f64,
    pub dyn_loss: f64,
    pub err_penalty: f64,
    pub info_loss: f64,
    pub kl_reg: f64,
    pub mean_err_norm: f64,
    pub mean_r_int: f64,
    pub seconds: f64,
}

pub const PROGRESS_COLUMNS: [&str; 11] = [
    "iteration",
    "steps",
    "mean_return",
    "std_return",
    "dyn_loss",
    "err_penalty",
    "info_loss",
    "kl_reg",
    "mean_err_norm",
    "mean_r_int",
    "seconds",
];

#[derive(Clone, Debug)]
pub struct RunSummary {
    pub out: PathBuf,
    pub records: Vec<IterationRecord>,
    /// First iteration whose mean return exceeded `success_return`.
    pub first_success: Option<usize>,
}

impl RunSummary {
    pub fn succeeded(&self) -> bool {
        self.first_success.is_some()
    }
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Runs the configured experiment and writes its artifacts into `out`:
/// progress.csv, config.toml, model.ckpt, policy.ckpt, embeddings.csv and
/// embeddings.svg.
pub fn run_experiment(cfg: &RunConfig, out: &Path) -> Result<RunSummary> {
    cfg.validate()?;
    let cfg = cfg.resolved();
    let loss_cfg = cfg.loss_config();
    loss_cfg.validate()?;
    let intr_cfg = cfg.intrinsic_config();
    intr_cfg.validate()?;
    let ppo_cfg = cfg.ppo_config();
    ppo_cfg.validate()?;

    fs::create_dir_all(out).map_err(io_err(out))?;
    let cfg_path = out.join("config.toml");
    fs::write(&cfg_path, cfg.to_toml()?).map_err(io_err(&cfg_path))?;
    let progress_path = out.join("progress.csv");
    let file = fs::File::create(&progress_path).map_err(io_err(&progress_path))?;
    let mut progress = csv::WriterBuilder::new().has_headers(false).from_writer(file);
    progress.write_record(PROGRESS_COLUMNS)?;
    progress.flush().map_err(io_err(&progress_path))?;

    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut env = cfg.env.kind().build();
    let mut model = EmiModel::new(cfg.model_config(), &mut rng)?;
    let mut policy = Policy::new(env.spec(), &cfg.policy_config(), &mut rng)?;
    let mut emb_trainer = EmbeddingTrainer::new(&model, loss_cfg.lr);
    let mut ppo = PolicyTrainer::new(&policy, ppo_cfg);

    let mut records = Vec::new();
    let mut first_success = None;
    let mut last: Vec<Transition> = Vec::new();
    let mut steps = 0;
    for iteration in 1..=cfg.max_iter {
        let mut buf = collect_rollouts(env.as_mut(), &policy, cfg.steps_per_iter, &mut rng)?;
        steps += buf.len();
        // Rewards come from the embeddings as they stood when the samples were
        // collected, before this iteration's fit.
        let intr = intrinsic_rewards(&model, &buf.transitions, &intr_cfg)?;
        let epochs = emb_trainer.train(&mut model, &buf.transitions, &loss_cfg, &mut rng)?;
        let loss = LossReport::mean_of(&epochs);
        buf.rewards = augment_rewards(&buf.env_rewards(), &intr.rewards, intr_cfg.eta)?;
        ppo.update(&mut policy, &mut buf, &mut rng)?;
        if policy.params().iter().chain(policy.baseline_params()).any(|p| p.data().iter().any(|v| !v.is_finite())) {
            return Err(emi_core::Error::NonFinite(format!("policy parameters after iteration {iteration}")).into());
        }

        let (mean_return, std_return) = mean_std(&buf.reported_returns());
        let record = IterationRecord {
            iteration,
            steps,
            mean_return,
            std_return,
            dyn_loss: loss.dynamics_loss,
            err_penalty: loss.error_penalty,
            info_loss: loss.info_loss,
            kl_reg: loss.kl_reg,
            mean_err_norm: loss.mean_error_norm,
            mean_r_int: mean_std(&intr.rewards).0,
            seconds: if cfg.wall_clock { start.elapsed().as_secs_f64() } else { 0.0 },
        };
        progress.serialize(record)?;
        progress.flush().map_err(io_err(&progress_path))?;
        records.push(record);
        last = buf.transitions;
        if first_success.is_none() && mean_return > cfg.success_return {
            first_success = Some(iteration);
            if cfg.stop_on_success {
                break;
            }
        }
    }

    let mut model_ck = model.to_checkpoint();
    model_ck.meta.push(("env".into(), cfg.env.kind().name().into()));
    model_ck.save(&out.join("model.ckpt"))?;
    policy.to_checkpoint().save(&out.join("policy.ckpt"))?;
    write_embeddings(&model, &last, out)?;

    Ok(RunSummary {
        out: out.to_path_buf(),
        records,
        first_success,
    })
}

/// Dumps φ of the given states as embeddings.csv and embeddings.svg.
fn write_embeddings(model: &EmiModel, transitions: &[Transition], out: &Path) -> Result<()> {
    let e = embed_observations(model, transitions.iter().map(|t| t.s.as_ref()))?;
    let d = e.cols();
    let path = out.join("embeddings.csv");
    let file = fs::File::create(&path).map_err(io_err(&path))?;
    let mut w = csv::Writer::from_writer(file);
    let mut header = vec!["step".to_string()];
    header.extend((1..=d).map(|j| format!("phi_{j}")));
    w.write_record(&header)?;
    let mut points = Vec::with_capacity(e.rows());
    for i in 0..e.rows() {
        let row = e.row(i);
        let mut rec = vec![i.to_string()];
        rec.extend(row.iter().map(|v| format!("{v:?}")));
        w.write_record(&rec)?;
        points.push(if d >= 2 { [row[0], row[1]] } else { [i as f64, row[0]] });
    }
    w.flush().map_err(io_err(&path))?;
    let steps: Vec<f64> = (0..points.len()).map(|i| i as f64).collect();
    let svg = scatter_svg(&points, Some(&steps), "state embeddings, last iteration");
    let svg_path = out.join("embeddings.svg");
    let mut f = fs::File::create(&svg_path).map_err(io_err(&svg_path))?;
    f.write_all(svg.as_bytes()).map_err(io_err(&svg_path))?;
    Ok(())
}

/// Reads a progress.csv back into records, checking the header.
pub fn read_progress(path: &Path) -> Result<Vec<IterationRecord>> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut rdr = csv::Reader::from_reader(file);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if header != PROGRESS_COLUMNS {
        return Err(crate::HarnessError::Input(format!(
            "{}: unexpected progress header {header:?}",
            path.display()
        )));
    }
    Ok(rdr.deserialize().collect::<std::result::Result<Vec<_>, _>>()?)
}
