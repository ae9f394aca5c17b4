//! Embedding recovery on BoxImage from uniformly random actions.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use emi_core::emi::{embed_observations, EmbeddingTrainer, EmiLossConfig, LossReport, RegularizeTarget};
use emi_core::envs::{Action, BoxImage, Environment, Transition};
use emi_core::model::{EmiModel, ModelConfig};
use emi_core::numcore::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::align::eval_embedding_alignment;
use crate::boundary::{boundary_error_analysis, BoundaryReport};
use crate::error::{io_err, HarnessError, Result};
use crate::plot::scatter_svg;

#[derive(Clone, Debug, PartialEq)]
pub struct BoximageConfig {
    pub samples: usize,
    pub regularize: RegularizeTarget,
    pub seed: u64,
    pub epochs: usize,
    /// Steps per collection episode before the disk is re-placed.
    pub episode_len: usize,
    pub lambda_error: f64,
    pub lambda_info: f64,
    pub lambda_kl: f64,
    pub minibatch: usize,
    pub lr: f64,
    /// Number of leading states used for the pairwise-distance spread.
    pub spread_rows: usize,
}

impl BoximageConfig {
    pub fn new(samples: usize, regularize: RegularizeTarget, seed: u64) -> Self {
        Self {
            samples,
            regularize,
            seed,
            epochs: 40,
            episode_len: 100,
            lambda_error: 100.0,
            lambda_info: 0.01,
            lambda_kl: 1.0,
            minibatch: 512,
            lr: 1e-3,
            spread_rows: 1000,
        }
    }

    pub fn loss_config(&self) -> EmiLossConfig {
        EmiLossConfig {
            lambda_error: self.lambda_error,
            lambda_info: self.lambda_info,
            lambda_kl: self.lambda_kl,
            regularize: self.regularize,
            epochs: 1,
            minibatch: self.minibatch,
            lr: self.lr,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.samples < self.minibatch {
            return Err(HarnessError::Config {
                field: "samples".into(),
                message: format!("need at least one minibatch ({}), got {}", self.minibatch, self.samples),
            });
        }
        if self.epochs == 0 || self.episode_len == 0 || self.spread_rows < 2 {
            return Err(HarnessError::Config {
                field: "epochs".into(),
                message: "epochs and episode_len must be >= 1, spread_rows >= 2".into(),
            });
        }
        self.loss_config().validate()?;
        Ok(())
    }
}

/// Random-action BoxImage transitions together with the true position of
/// each source state.
pub struct BoximageSamples {
    pub transitions: Vec<Transition>,
    pub positions: Vec<[f64; 2]>,
}

pub fn collect_boximage<R: Rng>(n: usize, episode_len: usize, rng: &mut R) -> Result<BoximageSamples> {
    let mut env = BoxImage::new();
    let mut transitions = Vec::with_capacity(n);
    let mut positions = Vec::with_capacity(n);
    let mut obs = Arc::new(env.reset(rng));
    let mut t = 0;
    while transitions.len() < n {
        let a = Action::Continuous(vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]);
        positions.push(env.position());
        let step = env.step(&a, rng)?;
        let next = Arc::new(step.observation);
        t += 1;
        let done = step.truncated || step.terminal || t % episode_len == 0;
        transitions.push(Transition {
            s: obs,
            a,
            s_next: Arc::clone(&next),
            r_env: step.reward,
            done,
            terminal: step.terminal,
            clipped: step.clipped,
        });
        obs = if done {
            t = 0;
            Arc::new(env.reset(rng))
        } else {
            next
        };
    }
    Ok(BoximageSamples { transitions, positions })
}

#[derive(Clone, Debug)]
pub struct BoximageReport {
    pub state_r2: f64,
    pub action_r2: f64,
    /// Mean pairwise distance between state embeddings.
    pub spread: f64,
    pub boundary: BoundaryReport,
    /// Mean loss of each epoch.
    pub epochs: Vec<LossReport>,
}

pub struct BoximageOutcome {
    pub report: BoximageReport,
    pub model: EmiModel,
    pub samples: BoximageSamples,
    pub state_embeddings: Matrix,
    pub action_embeddings: Matrix,
}

pub fn mean_pairwise_distance(rows: &Matrix) -> f64 {
    let n = rows.rows();
    let mut sum = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            let d2: f64 = rows.row(i).iter().zip(rows.row(j)).map(|(a, b)| (a - b).powi(2)).sum();
            sum += d2.sqrt();
        }
    }
    sum / (n * (n - 1) / 2) as f64
}

fn rows_of(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|i| m.row(i).to_vec()).collect()
}

pub fn boximage_embed(cfg: &BoximageConfig) -> Result<BoximageOutcome> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let samples = collect_boximage(cfg.samples, cfg.episode_len, &mut rng)?;
    let spec = BoxImage::new().spec().clone();
    let mut model = EmiModel::new(ModelConfig::new(spec.observation, spec.action, 2), &mut rng)?;
    let loss_cfg = cfg.loss_config();
    let mut trainer = EmbeddingTrainer::new(&model, cfg.lr);
    let mut epochs = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        epochs.extend(trainer.train(&mut model, &samples.transitions, &loss_cfg, &mut rng)?);
    }

    let states = embed_observations(&model, samples.transitions.iter().map(|t| t.s.as_ref()))?;
    let raw_actions = model.encode_actions(samples.transitions.iter().map(|t| &t.a))?;
    let actions = model.embed_actions(&raw_actions)?;
    let positions: Vec<Vec<f64>> = samples.positions.iter().map(|p| p.to_vec()).collect();
    let state_r2 = eval_embedding_alignment(&rows_of(&states), &positions)?;
    let action_r2 = eval_embedding_alignment(&rows_of(&actions), &rows_of(&raw_actions))?;
    let spread = mean_pairwise_distance(&states.slice_rows(0, cfg.spread_rows.min(states.rows())));
    let boundary = boundary_error_analysis(&model, &samples.transitions)?;
    Ok(BoximageOutcome {
        report: BoximageReport {
            state_r2,
            action_r2,
            spread,
            boundary,
            epochs,
        },
        model,
        samples,
        state_embeddings: states,
        action_embeddings: actions,
    })
}

/// Writes states.csv, actions.csv, states.svg, model.ckpt and summary.txt.
pub fn write_boximage_artifacts(outcome: &BoximageOutcome, cfg: &BoximageConfig, out: &Path) -> Result<()> {
    fs::create_dir_all(out).map_err(io_err(out))?;
    let fmt = |v: f64| format!("{v:?}");

    let path = out.join("states.csv");
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["true_x", "true_y", "phi_1", "phi_2"])?;
    for (p, i) in outcome.samples.positions.iter().zip(0..) {
        let e = outcome.state_embeddings.row(i);
        w.write_record([fmt(p[0]), fmt(p[1]), fmt(e[0]), fmt(e[1])])?;
    }
    w.flush().map_err(io_err(&path))?;

    let path = out.join("actions.csv");
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["a_1", "a_2", "psi_1", "psi_2"])?;
    for (t, i) in outcome.samples.transitions.iter().zip(0..) {
        let Action::Continuous(a) = &t.a else { unreachable!("BoxImage actions are continuous") };
        let e = outcome.action_embeddings.row(i);
        w.write_record([fmt(a[0]), fmt(a[1]), fmt(e[0]), fmt(e[1])])?;
    }
    w.flush().map_err(io_err(&path))?;

    let points: Vec<[f64; 2]> = (0..outcome.state_embeddings.rows())
        .map(|i| [outcome.state_embeddings.get(i, 0), outcome.state_embeddings.get(i, 1)])
        .collect();
    let shade: Vec<f64> = outcome.samples.positions.iter().map(|p| p[0]).collect();
    let svg = scatter_svg(&points, Some(&shade), "BoxImage state embeddings (colour: true x)");
    let path = out.join("states.svg");
    fs::write(&path, svg).map_err(io_err(&path))?;

    let mut ck = outcome.model.to_checkpoint();
    ck.meta.push(("env".into(), "box_image".into()));
    ck.save(&out.join("model.ckpt"))?;

    let r = &outcome.report;
    let summary = format!(
        "seed {}\nsamples {}\nregularize {}\nepochs {}\nstate_r2 {:.6}\naction_r2 {:.6}\nspread {:.6}\nboundary {}\n",
        cfg.seed,
        cfg.samples,
        cfg.regularize.name(),
        cfg.epochs,
        r.state_r2,
        r.action_r2,
        r.spread,
        r.boundary.describe()
    );
    let path = out.join("summary.txt");
    fs::write(&path, summary).map_err(io_err(&path))?;
    Ok(())
}
