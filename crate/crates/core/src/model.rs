//! The five EMI networks: state embedder φ, action embedder ψ, error model
//! S and the two statistics networks T_S, T_A.
//!
//! All parameters live in one flat list so a single [`Adam`] instance can
//! update them jointly; each [`Mlp`] knows its slice of that list and
//! registers its matrices in a [`Graph`] as `ParamId(index)`.
//!
//! [`Adam`]: crate::numcore::Adam

use std::fmt::Write as _;
use std::ops::Range;

use rand::Rng;

use crate::envs::{Action, ActionSpace, Observation, ObservationKind};
use crate::error::{invalid, Error, Result};
use crate::numcore::{Graph, Matrix, NodeId, ParamId};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Self::Tanh => "tanh",
            Self::Relu => "relu",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "tanh" => Some(Self::Tanh),
            "relu" => Some(Self::Relu),
            _ => None,
        }
    }

    fn apply(self, x: f64) -> f64 {
        match self {
            Self::Tanh => x.tanh(),
            Self::Relu => x.max(0.0),
        }
    }
}

/// Hidden widths and activation of a fully connected network.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpSpec {
    pub input: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub output: usize,
}

impl MlpSpec {
    fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input];
        w.extend(&self.hidden);
        w.push(self.output);
        w
    }

    pub fn param_count(&self) -> usize {
        2 * (self.hidden.len() + 1)
    }
}

/// A fully connected network whose weights sit at `offset..` of a shared
/// parameter list as `[w0, b0, w1, b1, ...]`; `w_i` is `fan_in x fan_out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub spec: MlpSpec,
    offset: usize,
}

impl Mlp {
    /// Appends freshly initialized parameters to `params`: Glorot-uniform
    /// weights, zero biases, and the last layer's weights multiplied by
    /// `out_scale`.
    pub fn init<R: Rng + ?Sized>(
        spec: MlpSpec,
        params: &mut Vec<Matrix>,
        out_scale: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if spec.hidden.is_empty() {
            return Err(invalid("an MLP needs at least one hidden layer"));
        }
        let offset = params.len();
        let widths = spec.widths();
        let layers = widths.len() - 1;
        for (l, pair) in widths.windows(2).enumerate() {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let scale = if l + 1 == layers { out_scale } else { 1.0 };
            let w = Matrix::from_fn(fan_in, fan_out, |_, _| {
                scale * rng.random_range(-bound..=bound)
            });
            params.push(w);
            params.push(Matrix::zeros(1, fan_out));
        }
        Ok(Self { spec, offset })
    }

    pub fn param_range(&self) -> Range<usize> {
        self.offset..self.offset + self.spec.param_count()
    }

    pub fn forward(&self, g: &mut Graph, params: &[Matrix], x: NodeId) -> Result<NodeId> {
        let n_layers = self.spec.hidden.len() + 1;
        let mut h = x;
        for l in 0..n_layers {
            let wi = self.offset + 2 * l;
            let w = g.param(ParamId(wi), &params[wi]);
            let b = g.param(ParamId(wi + 1), &params[wi + 1]);
            h = g.matmul(h, w)?;
            h = g.add(h, b)?;
            if l + 1 < n_layers {
                h = match self.spec.activation {
                    Activation::Tanh => g.tanh(h),
                    Activation::Relu => g.relu(h),
                };
            }
        }
        Ok(h)
    }

    /// Graph-free forward pass.
    pub fn eval(&self, params: &[Matrix], x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.spec.input {
            return Err(Error::Shape(format!(
                "network expects {} inputs, got {}",
                self.spec.input,
                x.cols()
            )));
        }
        let n_layers = self.spec.hidden.len() + 1;
        let mut h = x.clone();
        for l in 0..n_layers {
            let wi = self.offset + 2 * l;
            h = h.matmul(&params[wi])?;
            let b = params[wi + 1].data();
            let last = l + 1 == n_layers;
            for r in 0..h.rows() {
                for (v, bj) in h.row_mut(r).iter_mut().zip(b) {
                    *v += bj;
                    if !last {
                        *v = self.spec.activation.apply(*v);
                    }
                }
            }
        }
        Ok(h)
    }
}

/// Hidden layout of one network, input and output sizes aside.
#[derive(Clone, Debug, PartialEq)]
pub struct NetShape {
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl NetShape {
    pub fn new(hidden: &[usize], activation: Activation) -> Self {
        Self {
            hidden: hidden.to_vec(),
            activation,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub d: usize,
    pub observation: ObservationKind,
    pub action: ActionSpace,
    pub phi: NetShape,
    pub psi: NetShape,
    pub error: NetShape,
    pub statistics: NetShape,
}

impl ModelConfig {
    /// Default layouts: image φ is a (256, 64) ReLU MLP, vector φ a (64, 32)
    /// tanh MLP; ψ has 64 ReLU units; the statistics networks are (64, 64)
    /// ReLU; the error model mirrors φ.
    pub fn new(observation: ObservationKind, action: ActionSpace, d: usize) -> Self {
        let phi = match observation {
            ObservationKind::Image { .. } => NetShape::new(&[256, 64], Activation::Relu),
            ObservationKind::Vector { .. } => NetShape::new(&[64, 32], Activation::Tanh),
        };
        Self {
            d,
            observation,
            action,
            error: phi.clone(),
            phi,
            psi: NetShape::new(&[64], Activation::Relu),
            statistics: NetShape::new(&[64, 64], Activation::Relu),
        }
    }
}

/// Selects one of the two statistics networks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StatSide {
    /// T_S: scores `(φ(s), ψ(a), φ(s'))` against shuffled next states.
    State,
    /// T_A: scores `(φ(s), ψ(a), φ(s'))` against shuffled actions.
    Action,
}

/// Scale of the statistics networks' initial output layer, so that T starts
/// close to zero where the Jensen-Shannon bound is zero.
pub const STAT_OUTPUT_INIT_SCALE: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct EmiModel {
    pub config: ModelConfig,
    params: Vec<Matrix>,
    phi: Mlp,
    psi: Mlp,
    err: Mlp,
    t_state: Mlp,
    t_action: Mlp,
}

impl EmiModel {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        if config.d == 0 {
            return Err(invalid("embedding dimension must be positive"));
        }
        let obs_len = config.observation.flat_len();
        let act_len = config.action.encoded_len();
        let d = config.d;
        let spec = |input: usize, shape: &NetShape, output: usize| MlpSpec {
            input,
            hidden: shape.hidden.clone(),
            activation: shape.activation,
            output,
        };
        let mut params = Vec::new();
        let phi = Mlp::init(spec(obs_len, &config.phi, d), &mut params, 1.0, rng)?;
        let psi = Mlp::init(spec(act_len, &config.psi, d), &mut params, 1.0, rng)?;
        let err = Mlp::init(spec(obs_len + act_len, &config.error, d), &mut params, 1.0, rng)?;
        let t_state = Mlp::init(
            spec(3 * d, &config.statistics, 1),
            &mut params,
            STAT_OUTPUT_INIT_SCALE,
            rng,
        )?;
        let t_action = Mlp::init(
            spec(3 * d, &config.statistics, 1),
            &mut params,
            STAT_OUTPUT_INIT_SCALE,
            rng,
        )?;
        Ok(Self {
            config,
            params,
            phi,
            psi,
            err,
            t_state,
            t_action,
        })
    }

    pub fn d(&self) -> usize {
        self.config.d
    }

    pub fn params(&self) -> &[Matrix] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Matrix] {
        &mut self.params
    }

    pub fn phi_net(&self) -> &Mlp {
        &self.phi
    }

    pub fn psi_net(&self) -> &Mlp {
        &self.psi
    }

    pub fn error_net(&self) -> &Mlp {
        &self.err
    }

    pub fn statistics_net(&self, side: StatSide) -> &Mlp {
        match side {
            StatSide::State => &self.t_state,
            StatSide::Action => &self.t_action,
        }
    }

    /// `(name, network)` pairs in parameter order.
    pub fn networks(&self) -> [(&'static str, &Mlp); 5] {
        [
            ("phi", &self.phi),
            ("psi", &self.psi),
            ("error", &self.err),
            ("t_state", &self.t_state),
            ("t_action", &self.t_action),
        ]
    }

    /// Sets every weight and bias to zero.
    pub fn zero_all(&mut self) {
        for p in &mut self.params {
            p.data_mut().fill(0.0);
        }
    }

    /// Stacks observations into network input rows.
    pub fn encode_states<'a, I>(&self, observations: I) -> Result<Matrix>
    where
        I: IntoIterator<Item = &'a Observation>,
    {
        encode_observations(&self.config.observation, observations)
    }

    pub fn encode_actions<'a, I>(&self, actions: I) -> Result<Matrix>
    where
        I: IntoIterator<Item = &'a Action>,
    {
        let width = self.config.action.encoded_len();
        let mut data = Vec::new();
        let mut rows = 0;
        for a in actions {
            let start = data.len();
            data.resize(start + width, 0.0);
            self.config.action.encode_into(a, &mut data[start..])?;
            rows += 1;
        }
        Matrix::from_vec(rows, width, data)
    }

    pub fn phi(&self, g: &mut Graph, states: NodeId) -> Result<NodeId> {
        self.phi.forward(g, &self.params, states)
    }

    pub fn psi(&self, g: &mut Graph, actions: NodeId) -> Result<NodeId> {
        self.psi.forward(g, &self.params, actions)
    }

    pub fn error_model(&self, g: &mut Graph, states: NodeId, actions: NodeId) -> Result<NodeId> {
        let x = g.concat(&[states, actions])?;
        self.err.forward(g, &self.params, x)
    }

    /// `T([φ(s); ψ(a); φ(s')])`, one scalar per row.
    pub fn statistics(
        &self,
        g: &mut Graph,
        side: StatSide,
        phi_s: NodeId,
        psi_a: NodeId,
        phi_next: NodeId,
    ) -> Result<NodeId> {
        let d = self.d();
        for n in [phi_s, psi_a, phi_next] {
            if g.value(n).cols() != d {
                return Err(Error::Shape(format!(
                    "statistics inputs must be {d}-wide, got {}",
                    g.value(n).cols()
                )));
            }
        }
        let x = g.concat(&[phi_s, psi_a, phi_next])?;
        self.statistics_net(side).forward(g, &self.params, x)
    }

    pub fn embed_states(&self, states: &Matrix) -> Result<Matrix> {
        self.phi.eval(&self.params, states)
    }

    pub fn embed_actions(&self, actions: &Matrix) -> Result<Matrix> {
        self.psi.eval(&self.params, actions)
    }

    pub fn eval_error(&self, states: &Matrix, actions: &Matrix) -> Result<Matrix> {
        let x = Matrix::concat_cols(&[states, actions])?;
        self.err.eval(&self.params, &x)
    }

    pub fn eval_statistics(
        &self,
        side: StatSide,
        phi_s: &Matrix,
        psi_a: &Matrix,
        phi_next: &Matrix,
    ) -> Result<Matrix> {
        let x = Matrix::concat_cols(&[phi_s, psi_a, phi_next])?;
        self.statistics_net(side).eval(&self.params, &x)
    }

    pub fn embed_state(&self, s: &Observation) -> Result<Vec<f64>> {
        Ok(self.embed_states(&self.encode_states([s])?)?.into_vec())
    }

    pub fn embed_action(&self, a: &Action) -> Result<Vec<f64>> {
        Ok(self.embed_actions(&self.encode_actions([a])?)?.into_vec())
    }

    pub fn error_of(&self, s: &Observation, a: &Action) -> Result<Vec<f64>> {
        let states = self.encode_states([s])?;
        let actions = self.encode_actions([a])?;
        Ok(self.eval_error(&states, &actions)?.into_vec())
    }

    pub fn statistics_of(
        &self,
        side: StatSide,
        phi_s: &[f64],
        psi_a: &[f64],
        phi_next: &[f64],
    ) -> Result<f64> {
        let d = self.d();
        let row = |v: &[f64]| Matrix::from_vec(1, d, v.to_vec());
        self.eval_statistics(side, &row(phi_s)?, &row(psi_a)?, &row(phi_next)?)?
            .item()
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::default();
        ck.meta.push(("kind".into(), "emi-model".into()));
        ck.meta.push(("d".into(), self.d().to_string()));
        ck.meta
            .push(("observation".into(), observation_meta(&self.config.observation)));
        ck.meta.push(("action".into(), action_meta(&self.config.action)));
        for (name, net) in self.networks() {
            ck.meta.push((format!("net.{name}"), shape_meta(&net.spec)));
            for (k, i) in net.param_range().enumerate() {
                let label = if k % 2 == 0 { "w" } else { "b" };
                ck.params
                    .push((format!("{name}.{label}{}", k / 2), self.params[i].clone()));
            }
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.meta_value("kind") != Some("emi-model") {
            return Err(Error::Checkpoint("not an emi-model checkpoint".into()));
        }
        let d: usize = parse_meta(ck, "d")?;
        let observation = parse_observation(ck.require("observation")?)?;
        let action = parse_action(ck.require("action")?)?;
        let shape = |name: &str| parse_shape(ck.require(&format!("net.{name}"))?);
        let config = ModelConfig {
            d,
            observation,
            action,
            phi: shape("phi")?,
            psi: shape("psi")?,
            error: shape("error")?,
            statistics: shape("t_state")?,
        };
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let mut model = Self::new(config, &mut rng)?;
        if ck.params.len() != model.params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter matrices, found {}",
                model.params.len(),
                ck.params.len()
            )));
        }
        for (slot, (name, m)) in model.params.iter_mut().zip(&ck.params) {
            if slot.shape() != m.shape() {
                return Err(Error::Checkpoint(format!(
                    "{name}: expected {:?}, found {:?}",
                    slot.shape(),
                    m.shape()
                )));
            }
            *slot = m.clone();
        }
        Ok(model)
    }
}

pub(crate) fn encode_observations<'a, I>(kind: &ObservationKind, observations: I) -> Result<Matrix>
where
    I: IntoIterator<Item = &'a Observation>,
{
    let width = kind.flat_len();
    let mut data = Vec::new();
    let mut rows = 0;
    for o in observations {
        let ok = matches!(
            (kind, o),
            (ObservationKind::Vector { .. }, Observation::Vector(_))
                | (ObservationKind::Image { .. }, Observation::Image(_))
        );
        if !ok || o.len() != width {
            return Err(Error::Shape(format!(
                "observation of length {} does not match {kind:?}",
                o.len()
            )));
        }
        let start = data.len();
        data.resize(start + width, 0.0);
        o.write_into(&mut data[start..]);
        rows += 1;
    }
    Matrix::from_vec(rows, width, data)
}

/// Named parameter matrices plus string metadata, stored as text.
///
/// ```text
/// emi-checkpoint 1
/// meta <key> <value...>
/// param <name> <rows> <cols>
/// <row 0 values separated by spaces>
/// ...
/// ```
///
/// Values are written in Rust's shortest round-trip form, so reading a
/// checkpoint back reproduces every bit.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: Vec<(String, String)>,
    pub params: Vec<(String, Matrix)>,
}

const CHECKPOINT_MAGIC: &str = "emi-checkpoint 1";

impl Checkpoint {
    pub fn meta_value(&self, key: &str) -> Option<&str> {
        self.meta
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    fn require(&self, key: &str) -> Result<&str> {
        self.meta_value(key)
            .ok_or_else(|| Error::Checkpoint(format!("missing meta field {key}")))
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(CHECKPOINT_MAGIC);
        out.push('\n');
        for (k, v) in &self.meta {
            let _ = writeln!(out, "meta {k} {v}");
        }
        for (name, m) in &self.params {
            let _ = writeln!(out, "param {name} {} {}", m.rows(), m.cols());
            for r in 0..m.rows() {
                let mut first = true;
                for v in m.row(r) {
                    if !first {
                        out.push(' ');
                    }
                    first = false;
                    let _ = write!(out, "{v:?}");
                }
                out.push('\n');
            }
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |msg: String| Error::Checkpoint(msg);
        let mut lines = text.lines();
        if lines.next() != Some(CHECKPOINT_MAGIC) {
            return Err(bad("missing header".into()));
        }
        let mut ck = Self::default();
        while let Some(line) = lines.next() {
            if line.is_empty() {
                continue;
            }
            let mut parts = line.splitn(2, ' ');
            match (parts.next(), parts.next()) {
                (Some("meta"), Some(rest)) => {
                    let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
                    ck.meta.push((k.to_string(), v.to_string()));
                }
                (Some("param"), Some(rest)) => {
                    let f: Vec<&str> = rest.split(' ').collect();
                    if f.len() != 3 {
                        return Err(bad(format!("bad param line: {line}")));
                    }
                    let rows: usize = f[1].parse().map_err(|_| bad(format!("rows in {line}")))?;
                    let cols: usize = f[2].parse().map_err(|_| bad(format!("cols in {line}")))?;
                    let mut data = Vec::with_capacity(rows * cols);
                    for r in 0..rows {
                        let row = lines
                            .next()
                            .ok_or_else(|| bad(format!("{}: missing row {r}", f[0])))?;
                        for tok in row.split(' ').filter(|t| !t.is_empty()) {
                            data.push(
                                tok.parse::<f64>()
                                    .map_err(|_| bad(format!("{}: bad value {tok}", f[0])))?,
                            );
                        }
                    }
                    let m = Matrix::from_vec(rows, cols, data)
                        .map_err(|e| bad(format!("{}: {e}", f[0])))?;
                    ck.params.push((f[0].to_string(), m));
                }
                _ => return Err(bad(format!("unrecognized line: {line}"))),
            }
        }
        Ok(ck)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

pub(crate) fn observation_meta(o: &ObservationKind) -> String {
    match o {
        ObservationKind::Vector { dim } => format!("vector {dim}"),
        ObservationKind::Image { height, width } => format!("image {height} {width}"),
    }
}

pub(crate) fn action_meta(a: &ActionSpace) -> String {
    match a {
        ActionSpace::Continuous { dim, low, high } => format!("continuous {dim} {low:?} {high:?}"),
        ActionSpace::Discrete { n } => format!("discrete {n}"),
    }
}

pub(crate) fn shape_meta(spec: &MlpSpec) -> String {
    let widths: Vec<String> = spec.hidden.iter().map(usize::to_string).collect();
    format!("{} {}", spec.activation.name(), widths.join(" "))
}

fn meta_err(what: &str, v: &str) -> Error {
    Error::Checkpoint(format!("cannot parse {what} from '{v}'"))
}

fn parse_meta<T: std::str::FromStr>(ck: &Checkpoint, key: &str) -> Result<T> {
    let v = ck.require(key)?;
    v.parse().map_err(|_| meta_err(key, v))
}

pub(crate) fn parse_observation(v: &str) -> Result<ObservationKind> {
    let f: Vec<&str> = v.split(' ').collect();
    let num = |s: &str| s.parse::<usize>().map_err(|_| meta_err("observation", v));
    match f.as_slice() {
        ["vector", dim] => Ok(ObservationKind::Vector { dim: num(dim)? }),
        ["image", h, w] => Ok(ObservationKind::Image {
            height: num(h)?,
            width: num(w)?,
        }),
        _ => Err(meta_err("observation", v)),
    }
}

pub(crate) fn parse_action(v: &str) -> Result<ActionSpace> {
    let f: Vec<&str> = v.split(' ').collect();
    let err = || meta_err("action", v);
    match f.as_slice() {
        ["continuous", dim, low, high] => Ok(ActionSpace::Continuous {
            dim: dim.parse().map_err(|_| err())?,
            low: low.parse().map_err(|_| err())?,
            high: high.parse().map_err(|_| err())?,
        }),
        ["discrete", n] => Ok(ActionSpace::Discrete {
            n: n.parse().map_err(|_| err())?,
        }),
        _ => Err(err()),
    }
}

pub(crate) fn parse_shape(v: &str) -> Result<NetShape> {
    let mut f = v.split(' ');
    let activation = f
        .next()
        .and_then(Activation::from_name)
        .ok_or_else(|| meta_err("activation", v))?;
    let hidden = f
        .map(|w| w.parse::<usize>().map_err(|_| meta_err("width", v)))
        .collect::<Result<Vec<_>>>()?;
    Ok(NetShape { hidden, activation })
}
