//! The EMI objective, embedding training, and the two intrinsic rewards.
//!
//! The objective ties the embeddings to a linear latent model
//! `φ(s') ≈ φ(s) + ψ(a) + S(s, a)`, keeps the error model `S` small, and
//! keeps the embeddings informative through `L_info`. An optional moment
//! matching KL term pulls the action (or state) embeddings towards `N(0, I)`.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::envs::{ObservationKind, Transition};
use crate::error::{invalid, Result};
use crate::mi::{l_info_graph, Batch};
use crate::model::EmiModel;
use crate::numcore::{Adam, AdamConfig, Graph, Matrix, NodeId};

/// Lower bound applied to per-dimension batch variances in the KL term.
pub const VARIANCE_FLOOR: f64 = 1e-8;

/// Which embedding the KL regularizer acts on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RegularizeTarget {
    Action,
    State,
    None,
}

impl RegularizeTarget {
    pub fn name(self) -> &'static str {
        match self {
            Self::Action => "action",
            Self::State => "state",
            Self::None => "none",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "action" => Some(Self::Action),
            "state" => Some(Self::State),
            "none" => Some(Self::None),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmiLossConfig {
    pub lambda_error: f64,
    pub lambda_info: f64,
    pub lambda_kl: f64,
    pub regularize: RegularizeTarget,
    pub epochs: usize,
    pub minibatch: usize,
    pub lr: f64,
}

impl EmiLossConfig {
    /// Defaults for an observation kind: the KL term is on for images and
    /// off for vector observations.
    pub fn for_observation(kind: &ObservationKind) -> Self {
        let image = matches!(kind, ObservationKind::Image { .. });
        Self {
            lambda_error: 100.0,
            lambda_info: 0.01,
            lambda_kl: if image { 1.0 } else { 0.0 },
            regularize: RegularizeTarget::Action,
            epochs: 3,
            minibatch: 512,
            lr: 1e-3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_error", self.lambda_error),
            ("lambda_info", self.lambda_info),
            ("lambda_kl", self.lambda_kl),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(invalid(format!("{name} must be a finite value >= 0")));
            }
        }
        if self.minibatch < 2 {
            return Err(invalid("minibatch must be at least 2"));
        }
        if self.epochs == 0 {
            return Err(invalid("epochs must be at least 1"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(invalid("lr must be a finite value >= 0"));
        }
        Ok(())
    }
}

/// Component values of the objective on one minibatch (or averaged over an
/// epoch).
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossReport {
    pub dynamics_loss: f64,
    pub error_penalty: f64,
    pub info_loss: f64,
    pub kl_reg: f64,
    pub total: f64,
    /// Mean Euclidean norm of `S(s, a)` over the rows.
    pub mean_error_norm: f64,
    pub bound_state: f64,
    pub bound_action: f64,
}

impl LossReport {
    fn accumulate(&mut self, other: &Self) {
        self.dynamics_loss += other.dynamics_loss;
        self.error_penalty += other.error_penalty;
        self.info_loss += other.info_loss;
        self.kl_reg += other.kl_reg;
        self.total += other.total;
        self.mean_error_norm += other.mean_error_norm;
        self.bound_state += other.bound_state;
        self.bound_action += other.bound_action;
    }

    fn scaled(mut self, c: f64) -> Self {
        self.dynamics_loss *= c;
        self.error_penalty *= c;
        self.info_loss *= c;
        self.kl_reg *= c;
        self.total *= c;
        self.mean_error_norm *= c;
        self.bound_state *= c;
        self.bound_action *= c;
        self
    }

    /// Element-wise mean of several reports.
    pub fn mean_of(reports: &[Self]) -> Self {
        let mut acc = Self::default();
        for r in reports {
            acc.accumulate(r);
        }
        acc.scaled(1.0 / reports.len().max(1) as f64)
    }
}

/// Mean over rows of the squared row norms of `x`.
fn mean_row_sq_norm(g: &mut Graph, x: NodeId) -> NodeId {
    let rows = g.value(x).rows() as f64;
    let sq = g.square(x);
    let total = g.sum(sq);
    g.scale(total, 1.0 / rows)
}

/// KL divergence from the diagonal Gaussian fitted to the rows of `x` (batch
/// mean, biased variance floored at [`VARIANCE_FLOOR`]) to `N(0, I)`.
pub fn kl_to_standard_normal_graph(g: &mut Graph, x: NodeId) -> Result<NodeId> {
    if g.value(x).rows() < 2 {
        return Err(invalid("moment matching needs at least two rows"));
    }
    let mu = g.col_means(x)?;
    let centered = g.sub(x, mu)?;
    let sq = g.square(centered);
    let var = g.col_means(sq)?;
    let var = g.floor_at(var, VARIANCE_FLOOR);
    let mu2 = g.square(mu);
    let log_var = g.log(var);
    let t = g.add(mu2, var)?;
    let t = g.sub(t, log_var)?;
    let t = g.add_const(t, Matrix::scalar(-1.0))?;
    let s = g.sum(t);
    Ok(g.scale(s, 0.5))
}

pub fn kl_to_standard_normal(rows: &Matrix) -> Result<f64> {
    let mut g = Graph::new();
    let x = g.constant(rows.clone());
    let kl = kl_to_standard_normal_graph(&mut g, x)?;
    g.value(kl).item()
}

/// Builds the full objective on the graph and returns its scalar node with
/// the component values.
pub fn emi_loss_graph(
    model: &EmiModel,
    g: &mut Graph,
    batch: &Batch,
    cfg: &EmiLossConfig,
) -> Result<(NodeId, LossReport)> {
    let s = g.constant(batch.states.clone());
    let a = g.constant(batch.actions.clone());
    let n = g.constant(batch.next_states.clone());
    let phi_s = model.phi(g, s)?;
    let psi_a = model.psi(g, a)?;
    let phi_n = model.phi(g, n)?;
    let err = model.error_model(g, s, a)?;

    let pred = g.add(phi_s, psi_a)?;
    let pred = g.add(pred, err)?;
    let residual = g.sub(phi_n, pred)?;
    let dynamics = mean_row_sq_norm(g, residual);
    let penalty = mean_row_sq_norm(g, err);
    let info = l_info_graph(model, g, phi_s, psi_a, phi_n)?;

    let wp = g.scale(penalty, cfg.lambda_error);
    let wi = g.scale(info.loss, cfg.lambda_info);
    let mut total = g.add(dynamics, wp)?;
    total = g.add(total, wi)?;
    let kl_value = match cfg.regularize {
        RegularizeTarget::None => 0.0,
        target => {
            let x = if target == RegularizeTarget::Action {
                psi_a
            } else {
                phi_s
            };
            let kl = kl_to_standard_normal_graph(g, x)?;
            let v = g.value(kl).item()?;
            if cfg.lambda_kl != 0.0 {
                let wk = g.scale(kl, cfg.lambda_kl);
                total = g.add(total, wk)?;
            }
            v
        }
    };

    let err_rows = g.value(err);
    let mean_error_norm = (0..err_rows.rows())
        .map(|r| err_rows.row(r).iter().map(|v| v * v).sum::<f64>().sqrt())
        .sum::<f64>()
        / err_rows.rows() as f64;
    let report = LossReport {
        dynamics_loss: g.value(dynamics).item()?,
        error_penalty: g.value(penalty).item()?,
        info_loss: g.value(info.loss).item()?,
        kl_reg: kl_value,
        total: g.value(total).item()?,
        mean_error_norm,
        bound_state: info.bound_state,
        bound_action: info.bound_action,
    };
    Ok((total, report))
}

pub fn emi_loss(model: &EmiModel, batch: &Batch, cfg: &EmiLossConfig) -> Result<LossReport> {
    let mut g = Graph::new();
    Ok(emi_loss_graph(model, &mut g, batch, cfg)?.1)
}

/// Encodes the selected transitions into a [`Batch`].
pub fn encode_batch(model: &EmiModel, samples: &[Transition], rows: &[usize]) -> Result<Batch> {
    let states = model.encode_states(rows.iter().map(|&i| samples[i].s.as_ref()))?;
    let actions = model.encode_actions(rows.iter().map(|&i| &samples[i].a))?;
    let next = model.encode_states(rows.iter().map(|&i| samples[i].s_next.as_ref()))?;
    Batch::new(states, actions, next)
}

/// Trains all five networks with one Adam state that persists across calls.
#[derive(Clone, Debug)]
pub struct EmbeddingTrainer {
    adam: Adam,
}

impl EmbeddingTrainer {
    pub fn new(model: &EmiModel, lr: f64) -> Self {
        Self {
            adam: Adam::new(AdamConfig::with_lr(lr), model.params()),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.adam.step_count()
    }

    /// Runs `cfg.epochs` passes of `⌊n/m⌋` shuffled minibatches and returns
    /// the mean report of each epoch.
    pub fn train<R: Rng + ?Sized>(
        &mut self,
        model: &mut EmiModel,
        samples: &[Transition],
        cfg: &EmiLossConfig,
        rng: &mut R,
    ) -> Result<Vec<LossReport>> {
        cfg.validate()?;
        let m = cfg.minibatch;
        if samples.len() < m {
            return Err(invalid(format!(
                "need at least {m} samples for one minibatch, got {}",
                samples.len()
            )));
        }
        let mut order: Vec<usize> = (0..samples.len()).collect();
        let mut epochs = Vec::with_capacity(cfg.epochs);
        for _ in 0..cfg.epochs {
            order.shuffle(rng);
            let mut reports = Vec::new();
            for chunk in order.chunks_exact(m) {
                let batch = encode_batch(model, samples, chunk)?;
                reports.push(self.step(model, &batch, cfg)?);
            }
            epochs.push(LossReport::mean_of(&reports));
        }
        Ok(epochs)
    }

    /// One Adam step on one minibatch; returns the pre-step report.
    pub fn step(&mut self, model: &mut EmiModel, batch: &Batch, cfg: &EmiLossConfig) -> Result<LossReport> {
        let mut g = Graph::new();
        let (total, report) = emi_loss_graph(model, &mut g, batch, cfg)?;
        let grads = g.backward(total)?;
        self.adam.config.lr = cfg.lr;
        self.adam.step_with(model.params_mut(), &grads, 0)?;
        Ok(report)
    }
}

/// Squared residual of the linear latent model for each transition.
pub fn prediction_error_rewards(model: &EmiModel, samples: &[Transition]) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(samples.len());
    let rows: Vec<usize> = (0..samples.len()).collect();
    for chunk in rows.chunks(512) {
        let s = model.encode_states(chunk.iter().map(|&i| samples[i].s.as_ref()))?;
        let a = model.encode_actions(chunk.iter().map(|&i| &samples[i].a))?;
        let n = model.encode_states(chunk.iter().map(|&i| samples[i].s_next.as_ref()))?;
        let phi_s = model.embed_states(&s)?;
        let psi_a = model.embed_actions(&a)?;
        let phi_n = model.embed_states(&n)?;
        let err = model.eval_error(&s, &a)?;
        for r in 0..chunk.len() {
            let mut sq = 0.0;
            for k in 0..model.d() {
                let res = phi_s.get(r, k) + psi_a.get(r, k) + err.get(r, k) - phi_n.get(r, k);
                sq += res * res;
            }
            out.push(sq);
        }
    }
    Ok(out)
}

pub fn prediction_error_reward(model: &EmiModel, t: &Transition) -> Result<f64> {
    Ok(prediction_error_rewards(model, std::slice::from_ref(t))?[0])
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Kernel density `g(e) = (1/n) Σ exp(-‖e - e_i‖² / 2σ²)` over the rows of
/// `reference`.
pub fn kernel_density(e: &[f64], reference: &Matrix, sigma: f64) -> f64 {
    let inv = 1.0 / (2.0 * sigma * sigma);
    let n = reference.rows();
    (0..n)
        .map(|i| (-sq_dist(e, reference.row(i)) * inv).exp())
        .sum::<f64>()
        / n as f64
}

/// `g(s_t) - g(s_t')` for embedded states.
pub fn diversity_reward(e: &[f64], e_next: &[f64], reference: &Matrix, sigma: f64) -> Result<f64> {
    if reference.rows() == 0 {
        return Err(invalid("diversity reward needs a reference set"));
    }
    if !(sigma > 0.0) {
        return Err(invalid("sigma must be positive"));
    }
    Ok(kernel_density(e, reference, sigma) - kernel_density(e_next, reference, sigma))
}

/// Median of all pairwise Euclidean distances between rows, or `None` when
/// fewer than two rows are given.
pub fn median_pairwise_distance(rows: &Matrix) -> Option<f64> {
    let n = rows.rows();
    if n < 2 {
        return None;
    }
    let mut d = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            d.push(sq_dist(rows.row(i), rows.row(j)).sqrt());
        }
    }
    let mid = d.len() / 2;
    let (_, m, _) = d.select_nth_unstable_by(mid, f64::total_cmp);
    Some(*m)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum IntrinsicMode {
    /// Squared residual of the linear latent model.
    PredictionError,
    /// Potential difference of a kernel density in state-embedding space.
    Diversity,
}

impl IntrinsicMode {
    pub fn name(self) -> &'static str {
        match self {
            Self::PredictionError => "prediction_error",
            Self::Diversity => "diversity",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "prediction_error" => Some(Self::PredictionError),
            "diversity" => Some(Self::Diversity),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IntrinsicConfig {
    pub mode: IntrinsicMode,
    pub eta: f64,
    /// Kernel bandwidth; `None` uses the median pairwise embedding distance
    /// of the reference set.
    pub sigma: Option<f64>,
    /// Reference states are the first `n` collected states of the iteration;
    /// `None` uses all of them.
    pub reference_size: Option<usize>,
}

impl Default for IntrinsicConfig {
    fn default() -> Self {
        Self {
            mode: IntrinsicMode::PredictionError,
            eta: 0.001,
            sigma: None,
            reference_size: None,
        }
    }
}

impl IntrinsicConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(invalid("eta must be a finite value >= 0"));
        }
        if let Some(s) = self.sigma {
            if !(s > 0.0 && s.is_finite()) {
                return Err(invalid("sigma must be positive"));
            }
        }
        if self.reference_size == Some(0) {
            return Err(invalid("reference_size must be at least 1"));
        }
        Ok(())
    }
}

/// Per-transition intrinsic rewards and the bandwidth used, if any.
#[derive(Clone, Debug, PartialEq)]
pub struct IntrinsicRewards {
    pub rewards: Vec<f64>,
    pub sigma: Option<f64>,
}

/// Embeds the states of `samples` in chunks.
pub fn embed_observations<'a, I>(model: &EmiModel, observations: I) -> Result<Matrix>
where
    I: IntoIterator<Item = &'a crate::envs::Observation>,
{
    let obs: Vec<&crate::envs::Observation> = observations.into_iter().collect();
    let d = model.d();
    let mut data = Vec::with_capacity(obs.len() * d);
    for chunk in obs.chunks(512) {
        let x = model.encode_states(chunk.iter().copied())?;
        data.extend_from_slice(model.embed_states(&x)?.data());
    }
    Matrix::from_vec(obs.len(), d, data)
}

pub fn intrinsic_rewards(
    model: &EmiModel,
    samples: &[Transition],
    cfg: &IntrinsicConfig,
) -> Result<IntrinsicRewards> {
    cfg.validate()?;
    match cfg.mode {
        IntrinsicMode::PredictionError => Ok(IntrinsicRewards {
            rewards: prediction_error_rewards(model, samples)?,
            sigma: None,
        }),
        IntrinsicMode::Diversity => {
            let e = embed_observations(model, samples.iter().map(|t| t.s.as_ref()))?;
            let e_next = embed_observations(model, samples.iter().map(|t| t.s_next.as_ref()))?;
            let n = cfg.reference_size.unwrap_or(samples.len()).min(samples.len());
            let reference = e.slice_rows(0, n);
            let sigma = match cfg.sigma {
                Some(s) => s,
                None => median_pairwise_distance(&reference)
                    .filter(|s| *s > 0.0)
                    .unwrap_or(1.0),
            };
            let rewards = (0..samples.len())
                .map(|i| diversity_reward(e.row(i), e_next.row(i), &reference, sigma))
                .collect::<Result<Vec<f64>>>()?;
            Ok(IntrinsicRewards {
                rewards,
                sigma: Some(sigma),
            })
        }
    }
}

/// `r_env + η·r_int`, elementwise.
pub fn augment_rewards(env: &[f64], intrinsic: &[f64], eta: f64) -> Result<Vec<f64>> {
    if env.len() != intrinsic.len() {
        return Err(invalid(format!(
            "reward lengths differ: {} vs {}",
            env.len(),
            intrinsic.len()
        )));
    }
    Ok(env.iter().zip(intrinsic).map(|(r, i)| r + eta * i).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{
        render_boximage, Action, ActionSpace, BoxImage, Environment, Observation, IMAGE_SIDE,
    };
    use crate::mi::l_info;
    use crate::model::{Activation, ModelConfig, NetShape};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    const LN2: f64 = std::f64::consts::LN_2;

    fn vector_model(seed: u64) -> EmiModel {
        let mut cfg = ModelConfig::new(
            ObservationKind::Vector { dim: 3 },
            ActionSpace::Continuous {
                dim: 2,
                low: -1.0,
                high: 1.0,
            },
            2,
        );
        cfg.phi = NetShape::new(&[8, 8], Activation::Tanh);
        cfg.error = cfg.phi.clone();
        EmiModel::new(cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    fn random_batch(m: usize, seed: u64) -> Batch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut mk = |c| Matrix::from_fn(m, c, |_, _| rng.random_range(-2.0..2.0));
        let s = mk(3);
        let a = mk(2);
        let n = mk(3);
        Batch::new(s, a, n).unwrap()
    }

    fn cfg(le: f64, li: f64, lk: f64) -> EmiLossConfig {
        EmiLossConfig {
            lambda_error: le,
            lambda_info: li,
            lambda_kl: lk,
            regularize: RegularizeTarget::Action,
            epochs: 1,
            minibatch: 8,
            lr: 1e-3,
        }
    }

    fn zero_net(model: &mut EmiModel, which: &str) {
        let r = model
            .networks()
            .iter()
            .find(|(n, _)| *n == which)
            .unwrap()
            .1
            .param_range();
        for p in &mut model.params_mut()[r] {
            p.data_mut().fill(0.0);
        }
    }

    #[test]
    fn kl_closed_forms() {
        // Mean 0 and unit biased variance.
        let x = Matrix::from_rows(&[vec![1.0, -1.0], vec![-1.0, 1.0]]).unwrap();
        assert_eq!(kl_to_standard_normal(&x).unwrap(), 0.0);
        // d = 1, mean 1, variance 1.
        let x = Matrix::from_rows(&[vec![0.0], vec![2.0]]).unwrap();
        assert_eq!(kl_to_standard_normal(&x).unwrap(), 0.5);
        // d = 2, mean (0.5, -0.5), variance (2, 0.25).
        let r2 = std::f64::consts::SQRT_2;
        let x = Matrix::from_rows(&[vec![0.5 + r2, -0.5 + 0.5], vec![0.5 - r2, -0.5 - 0.5]])
            .unwrap();
        let expected = 0.5 * (0.25 + 2.0 - 2f64.ln() - 1.0) + 0.5 * (0.25 + 0.25 - 0.25f64.ln() - 1.0);
        let got = kl_to_standard_normal(&x).unwrap();
        assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
        assert!((got - 0.721_573_590_279_972_6).abs() < 1e-12, "{got}");
        assert!(kl_to_standard_normal(&Matrix::zeros(1, 2)).is_err());
    }

    #[test]
    fn kl_floors_collapsed_variance() {
        let x = Matrix::filled(4, 1, 0.0);
        let got = kl_to_standard_normal(&x).unwrap();
        let expected = 0.5 * (VARIANCE_FLOOR - VARIANCE_FLOOR.ln() - 1.0);
        assert!((got - expected).abs() < 1e-12);
    }

    #[test]
    fn exact_linear_model_leaves_only_info_term() {
        // φ ≡ 0 and ψ ≡ 0 satisfy the linear model; S ≡ 0; T ≡ 0.
        let mut model = vector_model(0);
        for n in ["phi", "psi", "error", "t_state", "t_action"] {
            zero_net(&mut model, n);
        }
        let c = cfg(100.0, 0.01, 0.0);
        let rep = emi_loss(&model, &random_batch(8, 1), &c).unwrap();
        assert_eq!(rep.dynamics_loss, 0.0);
        assert_eq!(rep.error_penalty, 0.0);
        assert!((rep.total - 0.01 * 4.0 * LN2).abs() < 1e-15);
    }

    #[test]
    fn zero_lambdas_leave_dynamics_loss() {
        let model = vector_model(3);
        let rep = emi_loss(&model, &random_batch(8, 2), &cfg(0.0, 0.0, 0.0)).unwrap();
        assert_eq!(rep.total, rep.dynamics_loss);
    }

    #[test]
    fn components_match_straight_line_evaluation() {
        let model = vector_model(0);
        let batch = random_batch(8, 0);
        let c = cfg(100.0, 0.01, 1.0);
        let rep = emi_loss(&model, &batch, &c).unwrap();

        let m = 8;
        let (mut dynamics, mut penalty, mut norms) = (0.0, 0.0, 0.0);
        let mut psis = Vec::new();
        for r in 0..m {
            let row = |x: &Matrix| Matrix::from_vec(1, x.cols(), x.row(r).to_vec()).unwrap();
            let phi_s = model.embed_states(&row(&batch.states)).unwrap();
            let psi_a = model.embed_actions(&row(&batch.actions)).unwrap();
            let phi_n = model.embed_states(&row(&batch.next_states)).unwrap();
            let err = model
                .eval_error(&row(&batch.states), &row(&batch.actions))
                .unwrap();
            let mut res2 = 0.0;
            let mut e2 = 0.0;
            for k in 0..2 {
                let res = phi_n.data()[k] - phi_s.data()[k] - psi_a.data()[k] - err.data()[k];
                res2 += res * res;
                e2 += err.data()[k] * err.data()[k];
            }
            dynamics += res2 / m as f64;
            penalty += e2 / m as f64;
            norms += e2.sqrt() / m as f64;
            psis.push(psi_a.into_vec());
        }
        let mut kl = 0.0;
        for k in 0..2 {
            let mu = psis.iter().map(|p| p[k]).sum::<f64>() / m as f64;
            let var = psis.iter().map(|p| (p[k] - mu).powi(2)).sum::<f64>() / m as f64;
            kl += 0.5 * (mu * mu + var - var.ln() - 1.0);
        }
        let info = l_info(&model, &batch).unwrap().loss;

        assert!((rep.dynamics_loss - dynamics).abs() < 1e-12);
        assert!((rep.error_penalty - penalty).abs() < 1e-12);
        assert!((rep.mean_error_norm - norms).abs() < 1e-12);
        assert!((rep.kl_reg - kl).abs() < 1e-12);
        assert!((rep.info_loss - info).abs() < 1e-12);
        let total = dynamics + 100.0 * penalty + 0.01 * info + kl;
        assert!((rep.total - total).abs() < 1e-9);
    }

    #[test]
    fn state_target_regularizes_phi() {
        let model = vector_model(1);
        let batch = random_batch(8, 4);
        let mut c = cfg(1.0, 1.0, 1.0);
        c.regularize = RegularizeTarget::State;
        let rep = emi_loss(&model, &batch, &c).unwrap();
        let phi = model.embed_states(&batch.states).unwrap();
        assert!((rep.kl_reg - kl_to_standard_normal(&phi).unwrap()).abs() < 1e-12);
        c.regularize = RegularizeTarget::None;
        assert_eq!(emi_loss(&model, &batch, &c).unwrap().kl_reg, 0.0);
    }

    #[test]
    fn objective_gradient_matches_finite_differences() {
        use crate::numcore::gradcheck::GradCheck;
        let model = vector_model(2);
        let batch = random_batch(6, 5);
        let c = cfg(2.0, 0.5, 0.3);
        let report = GradCheck::default()
            .run(model.params(), |g, _| Ok(emi_loss_graph(&model, g, &batch, &c)?.0))
            .unwrap();
        assert!(report.passes(1e-4), "{report:?}");
    }

    fn vector_transitions(n: usize, seed: u64) -> Vec<Transition> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let v = |rng: &mut ChaCha8Rng| {
                    Arc::new(Observation::Vector(
                        (0..3).map(|_| rng.random_range(-1.0..1.0)).collect(),
                    ))
                };
                Transition {
                    s: v(&mut rng),
                    a: Action::Continuous(vec![rng.random_range(-1.0..1.0), 0.3]),
                    s_next: v(&mut rng),
                    r_env: 0.0,
                    done: false,
                    terminal: false,
                    clipped: false,
                }
            })
            .collect()
    }

    #[test]
    fn one_epoch_over_one_minibatch_is_one_step() {
        let mut model = vector_model(0);
        let samples = vector_transitions(8, 1);
        let mut trainer = EmbeddingTrainer::new(&model, 1e-3);
        let c = cfg(1.0, 1.0, 0.0);
        let reports = trainer
            .train(&mut model, &samples, &c, &mut ChaCha8Rng::seed_from_u64(0))
            .unwrap();
        assert_eq!(reports.len(), 1);
        assert_eq!(trainer.steps_taken(), 1);
        let mut c3 = c.clone();
        c3.epochs = 3;
        let more = vector_transitions(20, 2);
        trainer
            .train(&mut model, &more, &c3, &mut ChaCha8Rng::seed_from_u64(0))
            .unwrap();
        assert_eq!(trainer.steps_taken(), 1 + 3 * 2);
    }

    #[test]
    fn zero_lr_leaves_model_but_reports() {
        let mut model = vector_model(0);
        let before = model.clone();
        let samples = vector_transitions(16, 1);
        let mut c = cfg(1.0, 1.0, 1.0);
        c.lr = 0.0;
        c.epochs = 2;
        let mut trainer = EmbeddingTrainer::new(&model, 0.0);
        let reports = trainer
            .train(&mut model, &samples, &c, &mut ChaCha8Rng::seed_from_u64(0))
            .unwrap();
        assert_eq!(reports.len(), 2);
        assert_eq!(model, before);
        assert!(reports.iter().all(|r| r.total.is_finite()));
        assert!(trainer
            .train(&mut model, &samples[..4], &c, &mut ChaCha8Rng::seed_from_u64(0))
            .is_err());
    }

    #[test]
    fn training_reduces_the_objective() {
        let mut model = vector_model(0);
        let samples = vector_transitions(256, 3);
        let mut c = cfg(1.0, 0.1, 0.0);
        c.minibatch = 64;
        c.epochs = 30;
        let mut trainer = EmbeddingTrainer::new(&model, 3e-3);
        let reports = trainer
            .train(&mut model, &samples, &c, &mut ChaCha8Rng::seed_from_u64(0))
            .unwrap();
        assert!(reports.last().unwrap().total < 0.5 * reports[0].total);
    }

    #[test]
    fn prediction_error_matches_four_forward_passes() {
        let cfg = ModelConfig::new(
            ObservationKind::Image {
                height: IMAGE_SIDE,
                width: IMAGE_SIDE,
            },
            ActionSpace::Continuous {
                dim: 2,
                low: -1.0,
                high: 1.0,
            },
            2,
        );
        let model = EmiModel::new(cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let mut env = BoxImage::new();
        env.set_position([40.0, 80.0]);
        let s = Observation::Image(render_boximage([40.0, 80.0]));
        let a = Action::Continuous(vec![0.5, -1.0]);
        let step = env.step(&a, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let t = Transition {
            s: Arc::new(s.clone()),
            a: a.clone(),
            s_next: Arc::new(step.observation.clone()),
            r_env: 0.0,
            done: false,
            terminal: false,
            clipped: false,
        };
        let phi_s = model.embed_state(&s).unwrap();
        let psi_a = model.embed_action(&a).unwrap();
        let err = model.error_of(&s, &a).unwrap();
        let phi_n = model.embed_state(&step.observation).unwrap();
        let expected: f64 = (0..2)
            .map(|k| (phi_s[k] + psi_a[k] + err[k] - phi_n[k]).powi(2))
            .sum();
        let got = prediction_error_reward(&model, &t).unwrap();
        assert!((got - expected).abs() < 1e-12);
        assert!(got >= 0.0);
    }

    #[test]
    fn prediction_error_of_exact_model_is_zero_and_per_row() {
        let mut model = vector_model(1);
        for n in ["phi", "psi", "error"] {
            zero_net(&mut model, n);
        }
        let samples = vector_transitions(5, 0);
        assert!(prediction_error_rewards(&model, &samples)
            .unwrap()
            .iter()
            .all(|&r| r == 0.0));
        let model = vector_model(1);
        let fwd = prediction_error_rewards(&model, &samples).unwrap();
        let rev: Vec<Transition> = samples.iter().rev().cloned().collect();
        let mut back = prediction_error_rewards(&model, &rev).unwrap();
        back.reverse();
        assert_eq!(fwd, back);
    }

    #[test]
    fn diversity_kernel_values() {
        let reference = Matrix::from_rows(&[vec![0.0, 0.0]]).unwrap();
        assert_eq!(
            diversity_reward(&[0.3, 0.1], &[0.3, 0.1], &reference, 0.7).unwrap(),
            0.0
        );
        // ‖φ(s) − φ(s')‖² = 2σ² with the reference at φ(s).
        let sigma = 0.5;
        let r = diversity_reward(&[0.0, 0.0], &[0.5, 0.5], &reference, sigma).unwrap();
        assert!((r - (1.0 - (-1.0f64).exp())).abs() < 1e-15);
        assert!((r - 0.632_12).abs() < 1e-5);

        let reference = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 2.0], vec![-1.0, -1.0]])
            .unwrap();
        // Squared distances from the origin: 1, 4, 2; from (1, 1): 1, 2, 8.
        let s2: f64 = 2.0 * 0.8 * 0.8;
        let g0 = ((-1.0 / s2).exp() + (-4.0 / s2).exp() + (-2.0 / s2).exp()) / 3.0;
        let g1 = ((-1.0 / s2).exp() + (-2.0 / s2).exp() + (-8.0 / s2).exp()) / 3.0;
        let r = diversity_reward(&[0.0, 0.0], &[1.0, 1.0], &reference, 0.8).unwrap();
        assert!((r - (g0 - g1)).abs() < 1e-15);
        assert!((r - 0.014_002_159_829_059_918).abs() < 1e-12, "{r}");
        assert!(diversity_reward(&[0.0, 0.0], &[1.0, 1.0], &reference, 0.0).is_err());
    }

    #[test]
    fn diversity_rewards_telescope_along_a_trajectory() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let reference = Matrix::from_fn(20, 2, |_, _| rng.random_range(-1.0..1.0));
        let path: Vec<[f64; 2]> = (0..30)
            .map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
            .collect();
        let sum: f64 = path
            .windows(2)
            .map(|w| diversity_reward(&w[0], &w[1], &reference, 0.4).unwrap())
            .sum();
        let direct = kernel_density(&path[0], &reference, 0.4)
            - kernel_density(path.last().unwrap(), &reference, 0.4);
        assert!((sum - direct).abs() < 1e-12);
    }

    #[test]
    fn median_heuristic() {
        let x = Matrix::from_rows(&[vec![0.0], vec![1.0], vec![3.0]]).unwrap();
        // Distances 1, 3, 2.
        assert_eq!(median_pairwise_distance(&x), Some(2.0));
        assert_eq!(median_pairwise_distance(&Matrix::zeros(1, 2)), None);
    }

    #[test]
    fn diversity_mode_uses_median_bandwidth() {
        let model = vector_model(0);
        let samples = vector_transitions(30, 9);
        let cfg = IntrinsicConfig {
            mode: IntrinsicMode::Diversity,
            eta: 0.1,
            sigma: None,
            reference_size: Some(10),
        };
        let out = intrinsic_rewards(&model, &samples, &cfg).unwrap();
        let e = embed_observations(&model, samples.iter().map(|t| t.s.as_ref())).unwrap();
        let sigma = median_pairwise_distance(&e.slice_rows(0, 10)).unwrap();
        assert_eq!(out.sigma, Some(sigma));
        assert_eq!(out.rewards.len(), 30);
        let mut fixed = cfg.clone();
        fixed.sigma = Some(0.0);
        assert!(intrinsic_rewards(&model, &samples, &fixed).is_err());
    }

    #[test]
    fn augmentation() {
        assert_eq!(augment_rewards(&[1.0, 0.0], &[5.0, 7.0], 0.0).unwrap(), vec![1.0, 0.0]);
        let r = augment_rewards(&[0.0], &[2.0], 0.001).unwrap();
        assert!((r[0] - 0.002).abs() < 1e-18);
        let r = augment_rewards(&[1.0, 0.0, 0.0], &[0.5, 0.5, 0.0], 0.1).unwrap();
        assert_eq!(r, vec![1.05, 0.05, 0.0]);
        assert!(augment_rewards(&[1.0], &[], 0.1).is_err());
    }

    #[test]
    fn untrained_info_term_starts_near_four_log2() {
        let model = vector_model(4);
        let rep = emi_loss(&model, &random_batch(16, 3), &cfg(1.0, 1.0, 0.0)).unwrap();
        assert!((rep.info_loss - 4.0 * LN2).abs() < 1e-2);
        assert!((rep.bound_state).abs() < 1e-2 && rep.bound_state != rep.bound_action);
    }
}
