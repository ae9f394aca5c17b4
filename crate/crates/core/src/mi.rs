//! Variational mutual-information estimation: half-shift marginal shuffling,
//! the Jensen-Shannon and Donsker-Varadhan lower bounds, and the `L_info`
//! term that trains both statistics networks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{invalid, Error, Result};
use crate::model::{Activation, EmiModel, Mlp, MlpSpec, StatSide, STAT_OUTPUT_INIT_SCALE};
use crate::numcore::{softplus, Adam, AdamConfig, Graph, Matrix, NodeId, ParamId};

pub const LOG4: f64 = 2.0 * std::f64::consts::LN_2;

/// Encoded transitions, one row per `(s, a, s')`.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub states: Matrix,
    pub actions: Matrix,
    pub next_states: Matrix,
}

impl Batch {
    pub fn new(states: Matrix, actions: Matrix, next_states: Matrix) -> Result<Self> {
        let m = states.rows();
        if actions.rows() != m || next_states.rows() != m {
            return Err(Error::Shape(format!(
                "batch rows disagree: {m}, {}, {}",
                actions.rows(),
                next_states.rows()
            )));
        }
        if states.cols() != next_states.cols() {
            return Err(Error::Shape("state and next-state widths differ".into()));
        }
        if m < 2 {
            return Err(invalid("a batch needs at least two rows"));
        }
        Ok(Self {
            states,
            actions,
            next_states,
        })
    }

    pub fn rows(&self) -> usize {
        self.states.rows()
    }
}

/// Row indices of one `(s, a, s')` triple.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Triple {
    pub s: usize,
    pub a: usize,
    pub s_next: usize,
}

/// Joint samples and the two product-of-marginals sample sets.
#[derive(Clone, Debug, PartialEq)]
pub struct ShuffledTriples {
    pub joint: Vec<Triple>,
    /// Row `l`'s `(s, a)` with row `l + h`'s `s'`.
    pub state_shuffled: Vec<Triple>,
    /// Row `l`'s `(s, s')` with row `l + h`'s `a`.
    pub action_shuffled: Vec<Triple>,
}

/// Builds the half-shift scheme for a minibatch of `m` rows, `h = m / 2`.
/// With odd `m` the last row only contributes as a shift partner.
pub fn shuffled_triples(m: usize) -> Result<ShuffledTriples> {
    if m < 2 {
        return Err(invalid(format!("shuffling needs m >= 2, got {m}")));
    }
    let h = m / 2;
    let joint = (0..h).map(|l| Triple { s: l, a: l, s_next: l }).collect();
    let state_shuffled = (0..h)
        .map(|l| Triple { s: l, a: l, s_next: l + h })
        .collect();
    let action_shuffled = (0..h)
        .map(|l| Triple { s: l, a: l + h, s_next: l })
        .collect();
    Ok(ShuffledTriples {
        joint,
        state_shuffled,
        action_shuffled,
    })
}

pub fn build_shuffled_triples(batch: &Batch) -> Result<ShuffledTriples> {
    shuffled_triples(batch.rows())
}

fn non_empty(joint: &[f64], marginal: &[f64]) -> Result<()> {
    if joint.is_empty() || marginal.is_empty() {
        return Err(invalid("bound needs joint and marginal samples"));
    }
    Ok(())
}

/// Mean taken relative to the first element, so constant inputs are exact.
fn mean(mut xs: impl ExactSizeIterator<Item = f64>) -> f64 {
    let n = xs.len() as f64;
    let Some(first) = xs.next() else {
        return f64::NAN;
    };
    first + xs.map(|x| x - first).sum::<f64>() / n
}

/// `mean(-sp(-T_joint)) - mean(sp(T_marginal)) + log 4`.
pub fn jsd_bound(joint: &[f64], marginal: &[f64]) -> Result<f64> {
    non_empty(joint, marginal)?;
    let j = mean(joint.iter().map(|&t| -softplus(-t)));
    let m = mean(marginal.iter().map(|&t| softplus(t)));
    Ok(j - m + LOG4)
}

/// `mean(T_joint) - log(mean(exp(T_marginal)))`, shifted by the max.
pub fn kl_dv_bound(joint: &[f64], marginal: &[f64]) -> Result<f64> {
    non_empty(joint, marginal)?;
    let j = mean(joint.iter().copied());
    let mx = marginal.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !mx.is_finite() {
        return Err(Error::NonFinite("marginal statistics".into()));
    }
    let lme = mx + mean(marginal.iter().map(|&t| (t - mx).exp())).ln();
    Ok(j - lme)
}

/// Graph nodes of `L_info` plus the two bound values it implies.
#[derive(Clone, Copy, Debug)]
pub struct InfoTerms {
    pub loss: NodeId,
    pub bound_state: f64,
    pub bound_action: f64,
}

/// `mean sp(-T(joint)) + mean sp(T(marginal))` for one side, plus the bound.
fn side_loss(g: &mut Graph, joint: NodeId, marginal: NodeId) -> Result<(NodeId, f64)> {
    let bound = jsd_bound(g.value(joint).data(), g.value(marginal).data())?;
    let neg = g.scale(joint, -1.0);
    let sp_j = g.softplus(neg);
    let sp_m = g.softplus(marginal);
    let mj = g.mean(sp_j);
    let mm = g.mean(sp_m);
    Ok((g.add(mj, mm)?, bound))
}

/// Builds `L_info` from embedded minibatch rows `Φ`, `Ψ`, `Φ'`.
pub fn l_info_graph(
    model: &EmiModel,
    g: &mut Graph,
    phi_s: NodeId,
    psi_a: NodeId,
    phi_next: NodeId,
) -> Result<InfoTerms> {
    let m = g.value(phi_s).rows();
    // Validates m and documents the index scheme the slices implement.
    let _ = shuffled_triples(m)?;
    let h = m / 2;
    let s0 = g.slice_rows(phi_s, 0, h)?;
    let a0 = g.slice_rows(psi_a, 0, h)?;
    let a1 = g.slice_rows(psi_a, h, 2 * h)?;
    let n0 = g.slice_rows(phi_next, 0, h)?;
    let n1 = g.slice_rows(phi_next, h, 2 * h)?;

    let ts_joint = model.statistics(g, StatSide::State, s0, a0, n0)?;
    let ts_marg = model.statistics(g, StatSide::State, s0, a0, n1)?;
    let ta_joint = model.statistics(g, StatSide::Action, s0, a0, n0)?;
    let ta_marg = model.statistics(g, StatSide::Action, s0, a1, n0)?;

    let (loss_s, bound_state) = side_loss(g, ts_joint, ts_marg)?;
    let (loss_a, bound_action) = side_loss(g, ta_joint, ta_marg)?;
    Ok(InfoTerms {
        loss: g.add(loss_s, loss_a)?,
        bound_state,
        bound_action,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InfoReport {
    pub loss: f64,
    pub bound_state: f64,
    pub bound_action: f64,
}

/// Evaluates `L_info` on a batch without keeping the graph.
pub fn l_info(model: &EmiModel, batch: &Batch) -> Result<InfoReport> {
    let mut g = Graph::new();
    let s = g.constant(batch.states.clone());
    let a = g.constant(batch.actions.clone());
    let n = g.constant(batch.next_states.clone());
    let phi_s = model.phi(&mut g, s)?;
    let psi_a = model.psi(&mut g, a)?;
    let phi_n = model.phi(&mut g, n)?;
    let terms = l_info_graph(model, &mut g, phi_s, psi_a, phi_n)?;
    Ok(InfoReport {
        loss: g.value(terms.loss).item()?,
        bound_state: terms.bound_state,
        bound_action: terms.bound_action,
    })
}

/// Settings for training a statistics network on a correlated Gaussian pair.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianCheckConfig {
    pub rho: f64,
    pub steps: usize,
    /// Rows drawn per step; half become joint samples.
    pub minibatch: usize,
    pub lr: f64,
    pub hidden: Vec<usize>,
    /// Fresh rows used to evaluate the trained bound.
    pub eval_samples: usize,
}

impl GaussianCheckConfig {
    pub fn new(rho: f64) -> Self {
        Self {
            rho,
            steps: 1500,
            minibatch: 512,
            lr: 1e-3,
            hidden: vec![64, 64],
            eval_samples: 20_000,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GaussianCheckReport {
    pub rho: f64,
    /// JSD bound of the untrained network on the evaluation sample.
    pub initial_bound: f64,
    /// JSD bound after training, on the same evaluation sample.
    pub bound: f64,
    /// Donsker-Varadhan bound of the trained network, for reference.
    pub kl_bound: f64,
    /// `-0.5 ln(1 - rho^2)`, the true mutual information in nats.
    pub true_mi: f64,
}

fn gaussian_pairs<R: Rng + ?Sized>(rho: f64, n: usize, rng: &mut R) -> Matrix {
    let c = (1.0 - rho * rho).sqrt();
    let mut data = Vec::with_capacity(2 * n);
    for _ in 0..n {
        let x: f64 = StandardNormal.sample(rng);
        let z: f64 = StandardNormal.sample(rng);
        data.push(x);
        data.push(rho * x + c * z);
    }
    Matrix::from_vec(n, 2, data).expect("sizes agree")
}

/// Pairs each of the first `h` rows' x with row `l + h`'s y.
fn half_shift(pairs: &Matrix) -> (Matrix, Matrix) {
    let h = pairs.rows() / 2;
    let joint = pairs.slice_rows(0, h);
    let marginal = Matrix::from_fn(h, 2, |r, c| {
        if c == 0 {
            pairs.get(r, 0)
        } else {
            pairs.get(r + h, 1)
        }
    });
    (joint, marginal)
}

/// Trains a fresh statistics network to separate joint samples of a
/// bivariate standard Gaussian with correlation `rho` from half-shifted
/// ones, and reports the resulting bound on held-out samples.
pub fn mi_gaussian_check(cfg: &GaussianCheckConfig, seed: u64) -> Result<GaussianCheckReport> {
    if !(cfg.rho.abs() < 1.0) {
        return Err(invalid(format!("correlation must satisfy |rho| < 1, got {}", cfg.rho)));
    }
    if cfg.minibatch < 2 || cfg.eval_samples < 2 {
        return Err(invalid("minibatch and eval_samples must be at least 2"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = Vec::new();
    let net = Mlp::init(
        MlpSpec {
            input: 2,
            hidden: cfg.hidden.clone(),
            activation: Activation::Relu,
            output: 1,
        },
        &mut params,
        STAT_OUTPUT_INIT_SCALE,
        &mut rng,
    )?;
    let eval_pairs = gaussian_pairs(cfg.rho, cfg.eval_samples, &mut rng);
    let (eval_joint, eval_marg) = half_shift(&eval_pairs);
    let bounds = |params: &[Matrix]| -> Result<(f64, f64)> {
        let tj = net.eval(params, &eval_joint)?;
        let tm = net.eval(params, &eval_marg)?;
        Ok((
            jsd_bound(tj.data(), tm.data())?,
            kl_dv_bound(tj.data(), tm.data())?,
        ))
    };
    let (initial_bound, _) = bounds(&params)?;

    let mut adam = Adam::new(AdamConfig::with_lr(cfg.lr), &params);
    for _ in 0..cfg.steps {
        let pairs = gaussian_pairs(cfg.rho, cfg.minibatch, &mut rng);
        let (joint, marginal) = half_shift(&pairs);
        let mut g = Graph::new();
        let xj = g.constant(joint);
        let xm = g.constant(marginal);
        let tj = net.forward(&mut g, &params, xj)?;
        let tm = net.forward(&mut g, &params, xm)?;
        let (loss, _) = side_loss(&mut g, tj, tm)?;
        let grads = g.backward(loss)?;
        let refs: Vec<Option<&Matrix>> =
            (0..params.len()).map(|i| grads.param(ParamId(i))).collect();
        adam.step(&mut params, &refs)?;
    }
    let (bound, kl_bound) = bounds(&params)?;
    Ok(GaussianCheckReport {
        rho: cfg.rho,
        initial_bound,
        bound,
        kl_bound,
        true_mi: -0.5 * (1.0 - cfg.rho * cfg.rho).ln(),
    })
}
