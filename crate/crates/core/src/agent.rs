//! Stochastic policies, rollout collection and a clipped-surrogate policy
//! gradient update with a learned value baseline.

use std::f64::consts::PI;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore};
use rand_distr::{Distribution, StandardNormal};

use crate::envs::{Action, ActionSpace, EnvSpec, Environment, Observation, ObservationKind, Transition};
use crate::error::{invalid, Error, Result};
use crate::model::{
    action_meta, encode_observations, observation_meta, parse_action, parse_observation,
    parse_shape, shape_meta, Activation, Checkpoint, Mlp, MlpSpec, NetShape,
};
use crate::numcore::{Adam, AdamConfig, Graph, Matrix, NodeId, ParamId};

#[derive(Clone, Debug, PartialEq)]
pub struct PolicyConfig {
    pub net: NetShape,
    pub baseline: NetShape,
    /// Initial log standard deviation of the Gaussian head.
    pub init_log_std: f64,
    /// Scale of the initial policy output layer; small values start every
    /// action distribution close to uniform or zero-mean.
    pub output_init_scale: f64,
    /// Lower bound on the Gaussian log-std, enforced after every update.
    pub min_log_std: Option<f64>,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            net: NetShape::new(&[64, 32], Activation::Tanh),
            baseline: NetShape::new(&[64, 32], Activation::Tanh),
            init_log_std: -1.0,
            output_init_scale: 0.01,
            min_log_std: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Head {
    /// Mean from the network, log-std from a free `1 x dim` parameter.
    Gaussian { dim: usize },
    Categorical { n: usize },
}

/// Policy network plus value baseline, with separate parameter lists.
#[derive(Clone, Debug, PartialEq)]
pub struct Policy {
    pub observation: ObservationKind,
    pub action: ActionSpace,
    pub head: Head,
    params: Vec<Matrix>,
    net: Mlp,
    /// Index of the log-std row in `params` for Gaussian heads.
    log_std: Option<usize>,
    min_log_std: Option<f64>,
    baseline_params: Vec<Matrix>,
    baseline: Mlp,
}

impl Policy {
    pub fn new<R: Rng + ?Sized>(spec: &EnvSpec, cfg: &PolicyConfig, rng: &mut R) -> Result<Self> {
        let input = spec.observation.flat_len();
        let head = match spec.action {
            ActionSpace::Continuous { dim, .. } => Head::Gaussian { dim },
            ActionSpace::Discrete { n } => Head::Categorical { n },
        };
        let out = match head {
            Head::Gaussian { dim } => dim,
            Head::Categorical { n } => n,
        };
        let mut params = Vec::new();
        let net = Mlp::init(
            MlpSpec {
                input,
                hidden: cfg.net.hidden.clone(),
                activation: cfg.net.activation,
                output: out,
            },
            &mut params,
            cfg.output_init_scale,
            rng,
        )?;
        let log_std = match head {
            Head::Gaussian { dim } => {
                params.push(Matrix::filled(1, dim, cfg.init_log_std));
                Some(params.len() - 1)
            }
            Head::Categorical { .. } => None,
        };
        let mut baseline_params = Vec::new();
        let baseline = Mlp::init(
            MlpSpec {
                input,
                hidden: cfg.baseline.hidden.clone(),
                activation: cfg.baseline.activation,
                output: 1,
            },
            &mut baseline_params,
            // A zero value head keeps all-zero rewards from producing
            // spurious advantages.
            0.0,
            rng,
        )?;
        Ok(Self {
            observation: spec.observation.clone(),
            action: spec.action.clone(),
            head,
            params,
            net,
            log_std,
            min_log_std: cfg.min_log_std,
            baseline_params,
            baseline,
        })
    }

    pub fn params(&self) -> &[Matrix] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Matrix] {
        &mut self.params
    }

    pub fn baseline_params(&self) -> &[Matrix] {
        &self.baseline_params
    }

    pub fn baseline_params_mut(&mut self) -> &mut [Matrix] {
        &mut self.baseline_params
    }

    pub fn log_std(&self) -> Option<&[f64]> {
        self.log_std.map(|i| self.params[i].data())
    }

    /// Raises any log-std entry below the configured floor.
    fn apply_log_std_floor(&mut self) {
        if let (Some(i), Some(floor)) = (self.log_std, self.min_log_std) {
            for v in self.params[i].data_mut() {
                *v = v.max(floor);
            }
        }
    }

    pub fn set_log_std(&mut self, value: f64) {
        if let Some(i) = self.log_std {
            self.params[i].data_mut().fill(value);
        }
    }

    pub fn encode(&self, observations: &[&Observation]) -> Result<Matrix> {
        encode_observations(&self.observation, observations.iter().copied())
    }

    /// Gaussian means or categorical logits, one row per observation.
    pub fn outputs(&self, x: &Matrix) -> Result<Matrix> {
        let raw = self.net.eval(&self.params, x)?;
        Ok(match self.mean_box() {
            Some((center, half)) => raw.map(|z| center + half * z.tanh()),
            None => raw,
        })
    }

    /// Gaussian means are squashed into the action box, `c + h·tanh(z)`, so
    /// that a confident policy keeps sampling actions on both sides of its
    /// mean instead of pushing the mean past the bound.
    fn mean_box(&self) -> Option<(f64, f64)> {
        match (&self.head, &self.action) {
            (Head::Gaussian { .. }, ActionSpace::Continuous { low, high, .. })
                if low.is_finite() && high.is_finite() && high > low =>
            {
                Some(((low + high) / 2.0, (high - low) / 2.0))
            }
            _ => None,
        }
    }

    fn outputs_graph(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let out = self.net.forward(g, &self.params, x)?;
        Ok(match self.mean_box() {
            Some((center, half)) => {
                let t = g.tanh(out);
                let t = g.scale(t, half);
                g.add_const(t, Matrix::scalar(center))?
            }
            None => out,
        })
    }

    pub fn values(&self, x: &Matrix) -> Result<Vec<f64>> {
        Ok(self.baseline.eval(&self.baseline_params, x)?.into_vec())
    }

    /// Draws an action and returns it with its exact log-probability.
    pub fn sample_action<R: Rng + ?Sized>(&self, obs: &Observation, rng: &mut R) -> Result<(Action, f64)> {
        let x = self.encode(&[obs])?;
        let out = self.outputs(&x)?;
        Ok(self.sample_from(out.row(0), rng))
    }

    fn sample_from<R: Rng + ?Sized>(&self, out: &[f64], rng: &mut R) -> (Action, f64) {
        match self.head {
            Head::Gaussian { .. } => {
                let log_std = self.log_std().expect("gaussian head");
                let a: Vec<f64> = out
                    .iter()
                    .zip(log_std)
                    .map(|(mu, ls)| {
                        let z: f64 = StandardNormal.sample(rng);
                        mu + ls.exp() * z
                    })
                    .collect();
                let lp = gaussian_log_prob(&a, out, log_std);
                (Action::Continuous(a), lp)
            }
            Head::Categorical { .. } => {
                let lsm = log_softmax(out);
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let mut pick = lsm.len() - 1;
                for (i, l) in lsm.iter().enumerate() {
                    acc += l.exp();
                    if u < acc {
                        pick = i;
                        break;
                    }
                }
                (Action::Discrete(pick), lsm[pick])
            }
        }
    }

    /// Log-probability of `action` under the current policy.
    pub fn log_prob(&self, obs: &Observation, action: &Action) -> Result<f64> {
        let out = self.outputs(&self.encode(&[obs])?)?;
        match (&self.head, action) {
            (Head::Gaussian { dim }, Action::Continuous(a)) if a.len() == *dim => Ok(
                gaussian_log_prob(a, out.row(0), self.log_std().expect("gaussian head")),
            ),
            (Head::Categorical { n }, Action::Discrete(i)) if i < n => Ok(log_softmax(out.row(0))[*i]),
            _ => Err(invalid(format!("action {action:?} does not fit the policy head"))),
        }
    }

    /// Per-row log-probabilities of the encoded actions on the graph.
    fn log_prob_graph(&self, g: &mut Graph, x: NodeId, actions: &Matrix) -> Result<NodeId> {
        let out = self.outputs_graph(g, x)?;
        match self.head {
            Head::Gaussian { dim } => {
                let li = self.log_std.expect("gaussian head");
                let ls = g.param(ParamId(li), &self.params[li]);
                let a = g.constant(actions.clone());
                let diff = g.sub(a, out)?;
                let neg_ls = g.scale(ls, -1.0);
                let inv_std = g.exp(neg_ls);
                let z = g.mul(diff, inv_std)?;
                let z2 = g.square(z);
                let quad = g.row_sums(z2)?;
                let quad = g.scale(quad, -0.5);
                let ls_sum = g.sum(ls);
                let lp = g.sub(quad, ls_sum)?;
                g.add_const(lp, Matrix::scalar(-0.5 * dim as f64 * (2.0 * PI).ln()))
            }
            Head::Categorical { .. } => {
                let logits = g.value(out);
                let shift = Matrix::from_fn(logits.rows(), 1, |r, _| {
                    logits.row(r).iter().copied().fold(f64::NEG_INFINITY, f64::max)
                });
                let neg_shift = shift.map(|v| -v);
                let shifted = g.add_const(out, neg_shift)?;
                let e = g.exp(shifted);
                let z = g.row_sums(e)?;
                let log_z = g.log(z);
                let lsm = g.sub(shifted, log_z)?;
                let picked = g.mul_const(lsm, actions.clone())?;
                g.row_sums(picked)
            }
        }
    }

    /// Mean entropy of the action distributions at the given inputs.
    pub fn entropy(&self, x: &Matrix) -> Result<f64> {
        match self.head {
            Head::Gaussian { dim } => {
                let ls: f64 = self.log_std().expect("gaussian head").iter().sum();
                Ok(ls + 0.5 * dim as f64 * (1.0 + (2.0 * PI).ln()))
            }
            Head::Categorical { .. } => {
                let out = self.outputs(x)?;
                let mut total = 0.0;
                for r in 0..out.rows() {
                    total -= log_softmax(out.row(r)).iter().map(|l| l.exp() * l).sum::<f64>();
                }
                Ok(total / out.rows().max(1) as f64)
            }
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::default();
        ck.meta.push(("kind".into(), "policy".into()));
        ck.meta.push(("observation".into(), observation_meta(&self.observation)));
        ck.meta.push(("action".into(), action_meta(&self.action)));
        ck.meta.push(("net.policy".into(), shape_meta(&self.net.spec)));
        ck.meta.push(("net.baseline".into(), shape_meta(&self.baseline.spec)));
        if let Some(floor) = self.min_log_std {
            ck.meta.push(("min_log_std".into(), format!("{floor:?}")));
        }
        for (i, p) in self.params.iter().enumerate() {
            ck.params.push((format!("policy.{i}"), p.clone()));
        }
        for (i, p) in self.baseline_params.iter().enumerate() {
            ck.params.push((format!("baseline.{i}"), p.clone()));
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.meta_value("kind") != Some("policy") {
            return Err(Error::Checkpoint("not a policy checkpoint".into()));
        }
        let field = |k: &str| {
            ck.meta_value(k)
                .ok_or_else(|| Error::Checkpoint(format!("missing meta field {k}")))
        };
        let observation = parse_observation(field("observation")?)?;
        let action = parse_action(field("action")?)?;
        let cfg = PolicyConfig {
            net: parse_shape(field("net.policy")?)?,
            baseline: parse_shape(field("net.baseline")?)?,
            min_log_std: ck
                .meta_value("min_log_std")
                .map(|v| {
                    v.parse::<f64>()
                        .map_err(|_| Error::Checkpoint(format!("bad min_log_std `{v}`")))
                })
                .transpose()?,
            ..PolicyConfig::default()
        };
        let spec = EnvSpec {
            observation,
            action,
            max_episode_len: 1,
            discount_hint: 1.0,
        };
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let mut policy = Self::new(&spec, &cfg, &mut rng)?;
        let total = policy.params.len() + policy.baseline_params.len();
        if ck.params.len() != total {
            return Err(Error::Checkpoint(format!(
                "expected {total} parameter matrices, found {}",
                ck.params.len()
            )));
        }
        let slots = policy
            .params
            .iter_mut()
            .chain(policy.baseline_params.iter_mut());
        for (slot, (name, m)) in slots.zip(&ck.params) {
            if slot.shape() != m.shape() {
                return Err(Error::Checkpoint(format!("{name}: shape mismatch")));
            }
            *slot = m.clone();
        }
        Ok(policy)
    }
}

/// `-½Σ((a-μ)/σ)² - Σ log σ - (d/2) log 2π`.
pub fn gaussian_log_prob(a: &[f64], mean: &[f64], log_std: &[f64]) -> f64 {
    let mut lp = -0.5 * a.len() as f64 * (2.0 * PI).ln();
    for ((x, mu), ls) in a.iter().zip(mean).zip(log_std) {
        let z = (x - mu) / ls.exp();
        lp -= 0.5 * z * z + ls;
    }
    lp
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lz = mx + logits.iter().map(|l| (l - mx).exp()).sum::<f64>().ln();
    logits.iter().map(|l| l - lz).collect()
}

/// Samples from one iteration of interaction.
#[derive(Clone, Debug, Default)]
pub struct RolloutBuffer {
    pub transitions: Vec<Transition>,
    pub log_probs: Vec<f64>,
    /// Rewards used for learning; equal to the environment rewards until
    /// intrinsic rewards are added.
    pub rewards: Vec<f64>,
    /// Environment return and length of each finished episode.
    pub episode_returns: Vec<f64>,
    pub episode_lengths: Vec<usize>,
    /// Environment return and length of the unfinished last episode.
    pub partial_return: f64,
    pub partial_length: usize,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

impl RolloutBuffer {
    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn env_rewards(&self) -> Vec<f64> {
        self.transitions.iter().map(|t| t.r_env).collect()
    }

    /// Environment returns of finished episodes, or of the partial episode if
    /// none finished.
    pub fn reported_returns(&self) -> Vec<f64> {
        if self.episode_returns.is_empty() {
            vec![self.partial_return]
        } else {
            self.episode_returns.clone()
        }
    }
}

/// Runs episodes from a fresh reset until `n` transitions are gathered.
pub fn collect_rollouts<R: RngCore>(
    env: &mut dyn Environment,
    policy: &Policy,
    n: usize,
    rng: &mut R,
) -> Result<RolloutBuffer> {
    if n == 0 {
        return Err(invalid("rollouts need at least one step"));
    }
    let mut buf = RolloutBuffer::default();
    let mut obs = Arc::new(env.reset(rng));
    let (mut ep_return, mut ep_len) = (0.0, 0usize);
    while buf.len() < n {
        let (action, lp) = policy.sample_action(&obs, rng)?;
        let step = env.step(&action, rng)?;
        if !step.reward.is_finite() {
            return Err(Error::NonFinite("environment reward".into()));
        }
        let next = Arc::new(step.observation);
        let done = step.terminal || step.truncated;
        ep_return += step.reward;
        ep_len += 1;
        buf.transitions.push(Transition {
            s: obs,
            a: action,
            s_next: Arc::clone(&next),
            r_env: step.reward,
            done,
            terminal: step.terminal,
            clipped: step.clipped,
        });
        buf.log_probs.push(lp);
        buf.rewards.push(step.reward);
        if done {
            buf.episode_returns.push(ep_return);
            buf.episode_lengths.push(ep_len);
            ep_return = 0.0;
            ep_len = 0;
            obs = Arc::new(env.reset(rng));
        } else {
            obs = next;
        }
    }
    buf.partial_return = ep_return;
    buf.partial_length = ep_len;
    Ok(buf)
}

/// Discounted returns `R_t = r_t + γ R_{t+1}`, restarting at every `done`
/// and seeded with `tail[t]` after a step that ends a segment without a
/// terminal state (`tail[t]` is ignored elsewhere).
pub fn discounted_returns(rewards: &[f64], ends: &[bool], tail: &[f64], discount: f64) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut next = 0.0;
    for t in (0..rewards.len()).rev() {
        if ends[t] || t + 1 == rewards.len() {
            next = tail[t];
        }
        next = rewards[t] + discount * next;
        out[t] = next;
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct PpoConfig {
    pub discount: f64,
    pub clip: f64,
    pub epochs: usize,
    pub minibatch: usize,
    pub lr: f64,
    pub baseline_lr: f64,
    pub entropy_coef: f64,
    pub normalize_advantages: bool,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            discount: 0.995,
            clip: 0.2,
            epochs: 10,
            minibatch: 64,
            lr: 3e-4,
            baseline_lr: 1e-3,
            entropy_coef: 0.0,
            normalize_advantages: true,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.discount) {
            return Err(invalid("discount must lie in [0, 1]"));
        }
        if !(self.clip > 0.0) {
            return Err(invalid("clip must be positive"));
        }
        if self.epochs == 0 || self.minibatch == 0 {
            return Err(invalid("epochs and minibatch must be at least 1"));
        }
        if !(self.lr >= 0.0 && self.baseline_lr >= 0.0) {
            return Err(invalid("learning rates must be >= 0"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct UpdateStats {
    pub mean_return: f64,
    pub entropy: f64,
    pub clip_fraction: f64,
    pub surrogate: f64,
    pub baseline_loss: f64,
}

/// Optimizer state for the policy and the baseline.
#[derive(Clone, Debug)]
pub struct PolicyTrainer {
    pub cfg: PpoConfig,
    policy_adam: Adam,
    baseline_adam: Adam,
}

impl PolicyTrainer {
    pub fn new(policy: &Policy, cfg: PpoConfig) -> Self {
        Self {
            policy_adam: Adam::new(AdamConfig::with_lr(cfg.lr), policy.params()),
            baseline_adam: Adam::new(AdamConfig::with_lr(cfg.baseline_lr), policy.baseline_params()),
            cfg,
        }
    }

    /// Fills `buf.returns` and `buf.advantages` from `buf.rewards`. Tails cut
    /// by the episode cap or the end of the buffer bootstrap from the
    /// baseline's value of the next state.
    pub fn compute_advantages(&self, policy: &Policy, buf: &mut RolloutBuffer) -> Result<()> {
        let n = buf.len();
        let mut tail = vec![0.0; n];
        let cut: Vec<usize> = (0..n)
            .filter(|&t| {
                let tr = &buf.transitions[t];
                !tr.terminal && (tr.done || t + 1 == n)
            })
            .collect();
        if !cut.is_empty() {
            let obs: Vec<&Observation> = cut.iter().map(|&t| buf.transitions[t].s_next.as_ref()).collect();
            let v = policy.values(&policy.encode(&obs)?)?;
            for (&t, v) in cut.iter().zip(v) {
                tail[t] = v;
            }
        }
        let ends: Vec<bool> = buf.transitions.iter().map(|t| t.done).collect();
        buf.returns = discounted_returns(&buf.rewards, &ends, &tail, self.cfg.discount);
        let mut values = Vec::with_capacity(n);
        for chunk in buf.transitions.chunks(512) {
            let obs: Vec<&Observation> = chunk.iter().map(|t| t.s.as_ref()).collect();
            values.extend(policy.values(&policy.encode(&obs)?)?);
        }
        let mut adv: Vec<f64> = buf.returns.iter().zip(&values).map(|(r, v)| r - v).collect();
        if self.cfg.normalize_advantages && n > 1 {
            let mean = adv.iter().sum::<f64>() / n as f64;
            let var = adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n as f64;
            let std = var.sqrt();
            for a in &mut adv {
                *a = (*a - mean) / (std + 1e-8);
            }
        }
        if adv.iter().any(|a| !a.is_finite()) {
            return Err(Error::NonFinite("advantages".into()));
        }
        buf.advantages = adv;
        Ok(())
    }

    /// Advantage computation followed by clipped-surrogate epochs on the
    /// policy and squared-error regression of the baseline on the returns.
    pub fn update<R: Rng + ?Sized>(
        &mut self,
        policy: &mut Policy,
        buf: &mut RolloutBuffer,
        rng: &mut R,
    ) -> Result<UpdateStats> {
        self.cfg.validate()?;
        if buf.is_empty() {
            return Err(invalid("cannot update from an empty buffer"));
        }
        if buf.rewards.len() != buf.len() {
            return Err(invalid("reward and transition counts differ"));
        }
        self.compute_advantages(policy, buf)?;
        self.policy_adam.config.lr = self.cfg.lr;
        self.baseline_adam.config.lr = self.cfg.baseline_lr;
        let n = buf.len();
        let mut order: Vec<usize> = (0..n).collect();
        let (mut clipped, mut counted, mut surrogate, mut bl_loss, mut batches) = (0usize, 0usize, 0.0, 0.0, 0usize);
        for _ in 0..self.cfg.epochs {
            order.shuffle(rng);
            for chunk in order.chunks(self.cfg.minibatch) {
                let obs: Vec<&Observation> = chunk.iter().map(|&i| buf.transitions[i].s.as_ref()).collect();
                let x = policy.encode(&obs)?;
                let acts = encode_policy_actions(policy, chunk.iter().map(|&i| &buf.transitions[i].a))?;
                let (s, c) = self.policy_step(policy, &x, &acts, chunk, buf)?;
                surrogate += s;
                clipped += c;
                counted += chunk.len();
                let returns: Vec<f64> = chunk.iter().map(|&i| buf.returns[i]).collect();
                bl_loss += self.baseline_step(policy, &x, &returns)?;
                batches += 1;
            }
        }
        let returns = buf.reported_returns();
        let sample: Vec<&Observation> = buf.transitions.iter().take(512).map(|t| t.s.as_ref()).collect();
        Ok(UpdateStats {
            mean_return: returns.iter().sum::<f64>() / returns.len() as f64,
            entropy: policy.entropy(&policy.encode(&sample)?)?,
            clip_fraction: clipped as f64 / counted.max(1) as f64,
            surrogate: surrogate / batches.max(1) as f64,
            baseline_loss: bl_loss / batches.max(1) as f64,
        })
    }

    fn policy_step(
        &mut self,
        policy: &mut Policy,
        x: &Matrix,
        acts: &Matrix,
        rows: &[usize],
        buf: &RolloutBuffer,
    ) -> Result<(f64, usize)> {
        let m = rows.len();
        let mut g = Graph::new();
        let xn = g.constant(x.clone());
        let lp = policy.log_prob_graph(&mut g, xn, acts)?;
        let old = Matrix::from_fn(m, 1, |r, _| -buf.log_probs[rows[r]]);
        let log_ratio = g.add_const(lp, old)?;
        let ratio = g.exp(log_ratio);
        // The clipped branch is constant in θ, so rows where it is the
        // minimum contribute no gradient.
        let (lo, hi) = (1.0 - self.cfg.clip, 1.0 + self.cfg.clip);
        let mut weights = Matrix::zeros(m, 1);
        let mut surrogate = 0.0;
        let mut clipped = 0;
        for (r, &i) in rows.iter().enumerate() {
            let a = buf.advantages[i];
            let rv = g.value(ratio).get(r, 0);
            let unclipped = rv * a;
            let clipped_term = rv.clamp(lo, hi) * a;
            if unclipped <= clipped_term {
                weights.set(r, 0, a);
            }
            if rv < lo || rv > hi {
                clipped += 1;
            }
            surrogate += unclipped.min(clipped_term);
        }
        let weighted = g.mul_const(ratio, weights)?;
        let mean = g.mean(weighted);
        let mut loss = g.scale(mean, -1.0);
        if self.cfg.entropy_coef != 0.0 {
            let ent = entropy_graph(policy, &mut g, xn)?;
            let bonus = g.scale(ent, -self.cfg.entropy_coef);
            loss = g.add(loss, bonus)?;
        }
        let grads = g.backward(loss)?;
        self.policy_adam.step_with(policy.params_mut(), &grads, 0)?;
        policy.apply_log_std_floor();
        if policy.params().iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite("policy parameters".into()));
        }
        Ok((surrogate / m as f64, clipped))
    }

    fn baseline_step(&mut self, policy: &mut Policy, x: &Matrix, returns: &[f64]) -> Result<f64> {
        let mut g = Graph::new();
        let xn = g.constant(x.clone());
        let v = policy.baseline.forward(&mut g, &policy.baseline_params, xn)?;
        let target = Matrix::from_vec(returns.len(), 1, returns.iter().map(|r| -r).collect())?;
        let diff = g.add_const(v, target)?;
        let sq = g.square(diff);
        let loss = g.mean(sq);
        let value = g.value(loss).item()?;
        let grads = g.backward(loss)?;
        self.baseline_adam
            .step_with(policy.baseline_params_mut(), &grads, 0)?;
        if policy.baseline_params().iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite("baseline parameters".into()));
        }
        Ok(value)
    }
}

fn entropy_graph(policy: &Policy, g: &mut Graph, x: NodeId) -> Result<NodeId> {
    match policy.head {
        Head::Gaussian { .. } => {
            let li = policy.log_std.expect("gaussian head");
            let ls = g.param(ParamId(li), &policy.params[li]);
            Ok(g.sum(ls))
        }
        Head::Categorical { .. } => {
            let out = policy.net.forward(g, &policy.params, x)?;
            let logits = g.value(out);
            let shift = Matrix::from_fn(logits.rows(), 1, |r, _| {
                -logits.row(r).iter().copied().fold(f64::NEG_INFINITY, f64::max)
            });
            let shifted = g.add_const(out, shift)?;
            let e = g.exp(shifted);
            let z = g.row_sums(e)?;
            let log_z = g.log(z);
            let lsm = g.sub(shifted, log_z)?;
            let p = g.exp(lsm);
            let plogp = g.mul(p, lsm)?;
            let s = g.row_sums(plogp)?;
            let m = g.mean(s);
            Ok(g.scale(m, -1.0))
        }
    }
}

/// Raw continuous actions, or one-hot rows for discrete ones.
fn encode_policy_actions<'a, I>(policy: &Policy, actions: I) -> Result<Matrix>
where
    I: IntoIterator<Item = &'a Action>,
{
    let width = policy.action.encoded_len();
    let mut data = Vec::new();
    let mut rows = 0;
    for a in actions {
        let start = data.len();
        data.resize(start + width, 0.0);
        policy.action.encode_into(a, &mut data[start..])?;
        rows += 1;
    }
    Matrix::from_vec(rows, width, data)
}

/// Exposes the policy's graph pieces for gradient checks.
pub mod graph_access {
    use super::*;

    /// Mean log-probability of `actions` (encoded) under the policy.
    pub fn mean_log_prob(policy: &Policy, g: &mut Graph, x: NodeId, actions: &Matrix) -> Result<NodeId> {
        let lp = policy.log_prob_graph(g, x, actions)?;
        Ok(g.mean(lp))
    }

    /// Sum of baseline outputs.
    pub fn baseline_sum(policy: &Policy, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let v = policy.baseline.forward(g, &policy.baseline_params, x)?;
        Ok(g.sum(v))
    }

    pub fn encode_actions<'a, I>(policy: &Policy, actions: I) -> Result<Matrix>
    where
        I: IntoIterator<Item = &'a Action>,
    {
        encode_policy_actions(policy, actions)
    }
}
