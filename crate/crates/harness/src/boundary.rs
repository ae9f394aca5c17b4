//! Size of the error model's output at the box walls versus the interior.

use std::sync::Arc;

use emi_core::envs::{Action, ActionSpace, Environment, Transition};
use emi_core::model::EmiModel;
use rand::{Rng, RngCore};

use crate::error::Result;

/// Mean `‖S(s, a)‖` over transitions where clipping changed the motion and
/// over those where it did not. A mean is `None` when its group is empty.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoundaryReport {
    pub clipped_count: usize,
    pub interior_count: usize,
    pub clipped_mean: Option<f64>,
    pub interior_mean: Option<f64>,
}

impl BoundaryReport {
    pub fn from_norms(norms: &[f64], clipped: &[bool]) -> Self {
        assert_eq!(norms.len(), clipped.len(), "one flag per norm");
        let (mut sc, mut si, mut nc, mut ni) = (0.0, 0.0, 0usize, 0usize);
        for (&n, &c) in norms.iter().zip(clipped) {
            if c {
                sc += n;
                nc += 1;
            } else {
                si += n;
                ni += 1;
            }
        }
        Self {
            clipped_count: nc,
            interior_count: ni,
            clipped_mean: (nc > 0).then(|| sc / nc as f64),
            interior_mean: (ni > 0).then(|| si / ni as f64),
        }
    }

    /// `clipped / interior`; `None` if either group is empty or the interior
    /// mean is zero.
    pub fn ratio(&self) -> Option<f64> {
        match (self.clipped_mean, self.interior_mean) {
            (Some(c), Some(i)) if i > 0.0 => Some(c / i),
            _ => None,
        }
    }

    pub fn describe(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(|| "unavailable".to_string(), |v| format!("{v:.6}"));
        format!(
            "clipped mean ‖S‖ {} (n={}), interior mean ‖S‖ {} (n={}), ratio {}",
            fmt(self.clipped_mean),
            self.clipped_count,
            fmt(self.interior_mean),
            self.interior_count,
            fmt(self.ratio()),
        )
    }
}

/// Norm of the error model's output for every transition.
pub fn error_norms(model: &EmiModel, transitions: &[Transition]) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(transitions.len());
    for chunk in transitions.chunks(512) {
        let s = model.encode_states(chunk.iter().map(|t| t.s.as_ref()))?;
        let a = model.encode_actions(chunk.iter().map(|t| &t.a))?;
        let err = model.eval_error(&s, &a)?;
        out.extend((0..err.rows()).map(|i| err.row(i).iter().map(|v| v * v).sum::<f64>().sqrt()));
    }
    Ok(out)
}

pub fn boundary_error_analysis(model: &EmiModel, transitions: &[Transition]) -> Result<BoundaryReport> {
    let norms = error_norms(model, transitions)?;
    let flags: Vec<bool> = transitions.iter().map(|t| t.clipped).collect();
    Ok(BoundaryReport::from_norms(&norms, &flags))
}

/// Transitions under uniformly random actions, resetting whenever an
/// episode ends.
pub fn collect_random<R: RngCore>(env: &mut dyn Environment, n: usize, rng: &mut R) -> Result<Vec<Transition>> {
    let space = env.spec().action.clone();
    let mut out = Vec::with_capacity(n);
    let mut obs = Arc::new(env.reset(rng));
    while out.len() < n {
        let a = match space {
            ActionSpace::Continuous { dim, low, high } => {
                Action::Continuous((0..dim).map(|_| rng.random_range(low..high)).collect())
            }
            ActionSpace::Discrete { n } => Action::Discrete(rng.random_range(0..n)),
        };
        let step = env.step(&a, rng)?;
        let next = Arc::new(step.observation);
        let done = step.terminal || step.truncated;
        out.push(Transition {
            s: obs,
            a,
            s_next: Arc::clone(&next),
            r_env: step.reward,
            done,
            terminal: step.terminal,
            clipped: step.clipped,
        });
        obs = if done { Arc::new(env.reset(rng)) } else { next };
    }
    Ok(out)
}
