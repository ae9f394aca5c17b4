//! WebAssembly bindings for the static page in `www/`.

use std::sync::Arc;

use emi_core::emi::{embed_observations, EmbeddingTrainer, EmiLossConfig};
use emi_core::envs::{render_boximage, Action, BoxImage, Environment, Transition};
use emi_core::mi::{mi_gaussian_check, GaussianCheckConfig};
use emi_core::model::{EmiModel, ModelConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wasm_bindgen::prelude::*;

fn js_err(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

/// An interactive BoxImage instance.
#[wasm_bindgen]
pub struct BoxWorld {
    env: BoxImage,
    rng: ChaCha8Rng,
}

#[wasm_bindgen]
impl BoxWorld {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u64) -> BoxWorld {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut env = BoxImage::new();
        env.reset(&mut rng);
        BoxWorld { env, rng }
    }

    /// Applies action `(ax, ay)` and returns whether the wall clipped it.
    pub fn step(&mut self, ax: f64, ay: f64) -> Result<bool, JsError> {
        let step = self
            .env
            .step(&Action::Continuous(vec![ax, ay]), &mut self.rng)
            .map_err(js_err)?;
        Ok(step.clipped)
    }

    pub fn x(&self) -> f64 {
        self.env.position()[0]
    }

    pub fn y(&self) -> f64 {
        self.env.position()[1]
    }

    /// The 52x52 observation, row-major, one byte per pixel.
    pub fn pixels(&self) -> Vec<u8> {
        render_boximage(self.env.position())
    }
}

/// Runs the correlated-Gaussian estimator check and returns
/// `[initial bound, trained JSD bound, trained DV bound, true MI]`.
#[wasm_bindgen]
pub fn mi_check(rho: f64, steps: usize, seed: u64) -> Result<Vec<f64>, JsError> {
    let mut cfg = GaussianCheckConfig::new(rho);
    cfg.steps = steps;
    cfg.eval_samples = 4000;
    let r = mi_gaussian_check(&cfg, seed).map_err(js_err)?;
    Ok(vec![r.initial_bound, r.bound, r.kl_bound, r.true_mi])
}

/// Trains embeddings on `samples` random BoxImage transitions and returns
/// rows of `[true x, true y, phi_1, phi_2]`, flattened.
#[wasm_bindgen]
pub fn embed_box(samples: usize, epochs: usize, seed: u64) -> Result<Vec<f64>, JsError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut env = BoxImage::new();
    let spec = env.spec().clone();
    let mut transitions = Vec::with_capacity(samples);
    let mut positions = Vec::with_capacity(samples);
    let mut obs = Arc::new(env.reset(&mut rng));
    while transitions.len() < samples {
        let a = Action::Continuous(vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]);
        positions.push(env.position());
        let step = env.step(&a, &mut rng).map_err(js_err)?;
        let next = Arc::new(step.observation);
        let done = step.truncated || step.terminal;
        transitions.push(Transition {
            s: obs,
            a,
            s_next: Arc::clone(&next),
            r_env: step.reward,
            done,
            terminal: step.terminal,
            clipped: step.clipped,
        });
        obs = if done { Arc::new(env.reset(&mut rng)) } else { next };
    }

    let mut model = EmiModel::new(ModelConfig::new(spec.observation.clone(), spec.action, 2), &mut rng)
        .map_err(js_err)?;
    let mut loss = EmiLossConfig::for_observation(&spec.observation);
    loss.epochs = epochs;
    loss.minibatch = loss.minibatch.min(samples);
    let mut trainer = EmbeddingTrainer::new(&model, loss.lr);
    trainer.train(&mut model, &transitions, &loss, &mut rng).map_err(js_err)?;

    let phi = embed_observations(&model, transitions.iter().map(|t| t.s.as_ref())).map_err(js_err)?;
    let mut out = Vec::with_capacity(4 * samples);
    for (i, p) in positions.iter().enumerate() {
        out.extend_from_slice(&[p[0], p[1], phi.get(i, 0), phi.get(i, 1)]);
    }
    Ok(out)
}
