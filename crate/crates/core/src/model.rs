//! Event-level recurrence, classifier head, loss, optimizer and training.
//!
//! A jet-level model scores the root embedding of each jet directly. An
//! event-level model runs a GRU over the jets of an event, hardest first,
//! with input `x_t = [h_jet; (pt, eta, phi, E, m)]`:
//!
//! ```text
//! z_t = sigmoid(W_z x_t + U_z h_{t-1} + b_z)
//! r_t = sigmoid(W_r x_t + U_r h_{t-1} + b_r)
//! h~_t = tanh(W_h x_t + U_h (r_t * h_{t-1}) + b_h)
//! h_t = (1 - z_t) * h_{t-1} + z_t * h~_t
//! ```
//!
//! and scores the final state. The head is one relu layer followed by a
//! sigmoid output. Training minimizes the mean binary cross-entropy with Adam.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{self, affine_into, dot, AutodiffError, ParamId, Parameters, Tape, Tensor, Var};
use crate::clustering::{mix_seed, ClusterError, Topology};
use crate::datagen::{standardize_fit, JetRecord, Standardizer};
use crate::eval::{self, EvalError};
use crate::kinematics::{to_kinvec, FeatureSet, KinematicsError};
use crate::treenn::{
    embed, embed_batched, embed_on_tape, glorot, init_params, levelize, Activation, EmbedError, GateInput,
    JetInput, RecNNParams, RecNNVars,
};

/// Jet kinematics appended to each embedding at event level:
/// `(pt, eta, phi, E, m)` of the jet.
pub const JET_KIN: usize = 5;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("training data needs both classes; got {positives} signal and {negatives} background samples")]
    SingleClassDataset { positives: usize, negatives: usize },
    #[error("non-finite loss {loss} at step {step} (epoch {epoch})")]
    NonFiniteLoss { step: usize, epoch: usize, loss: f64 },
    #[error("event has no jets")]
    EmptyEvent,
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("record {record}: {source}")]
    Cluster {
        record: usize,
        #[source]
        source: ClusterError,
    },
    #[error("record {record}: {source}")]
    Kinematics {
        record: usize,
        #[source]
        source: KinematicsError,
    },
    #[error("record {0} has no event_id, which event-level training needs")]
    MissingEventId(usize),
    #[error("event {0} mixes signal and background jets")]
    MixedEventLabels(u64),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> ModelError + '_ {
    move |source| ModelError::Io { path: path.display().to_string(), source }
}

// ---------------------------------------------------------------------------
// GRU

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GruParams {
    /// Hidden size.
    pub s: usize,
    /// Input size.
    pub d: usize,
    pub w_z: Tensor,
    pub u_z: Tensor,
    pub b_z: Tensor,
    pub w_r: Tensor,
    pub u_r: Tensor,
    pub b_r: Tensor,
    pub w_h: Tensor,
    pub u_h: Tensor,
    pub b_h: Tensor,
}

pub fn init_gru(s: usize, d: usize, seed: u64) -> GruParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |cols| glorot(&mut rng, s, cols);
    let (w_z, u_z, w_r, u_r, w_h, u_h) = (draw(d), draw(s), draw(d), draw(s), draw(d), draw(s));
    let zero = || Tensor::zeros(s, 1);
    GruParams { s, d, w_z, u_z, b_z: zero(), w_r, u_r, b_r: zero(), w_h, u_h, b_h: zero() }
}

impl Parameters for GruParams {
    fn tensors(&self) -> Vec<(&'static str, &Tensor)> {
        vec![
            ("gru.w_z", &self.w_z),
            ("gru.u_z", &self.u_z),
            ("gru.b_z", &self.b_z),
            ("gru.w_r", &self.w_r),
            ("gru.u_r", &self.u_r),
            ("gru.b_r", &self.b_r),
            ("gru.w_h", &self.w_h),
            ("gru.u_h", &self.u_h),
            ("gru.b_h", &self.b_h),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.w_z,
            &mut self.u_z,
            &mut self.b_z,
            &mut self.w_r,
            &mut self.u_r,
            &mut self.b_r,
            &mut self.w_h,
            &mut self.u_h,
            &mut self.b_h,
        ]
    }
}

/// `W x + U h + b`, summed in the same order as the taped version.
fn gru_affine(w: &Tensor, u: &Tensor, b: &Tensor, x: &[f64], h: &[f64]) -> Vec<f64> {
    (0..w.rows()).map(|i| (dot(w.row(i), x) + dot(u.row(i), h)) + b.data()[i]).collect()
}

/// One recurrence step.
pub fn gru_step(gru: &GruParams, x: &[f64], h: &[f64]) -> Vec<f64> {
    let z: Vec<f64> = gru_affine(&gru.w_z, &gru.u_z, &gru.b_z, x, h).into_iter().map(autodiff::sigmoid).collect();
    let r: Vec<f64> = gru_affine(&gru.w_r, &gru.u_r, &gru.b_r, x, h).into_iter().map(autodiff::sigmoid).collect();
    let rh: Vec<f64> = r.iter().zip(h).map(|(a, b)| a * b).collect();
    let cand: Vec<f64> = gru_affine(&gru.w_h, &gru.u_h, &gru.b_h, x, &rh).into_iter().map(f64::tanh).collect();
    (0..gru.s).map(|i| (1.0 - z[i]) * h[i] + z[i] * cand[i]).collect()
}

/// Final GRU state over `jets`, given in recurrence order as
/// `(embedding, jet kinematics)` pairs. Starts from `h_0 = 0`.
pub fn event_embed(jets: &[(&[f64], [f64; JET_KIN])], gru: &GruParams) -> Result<Vec<f64>, ModelError> {
    if jets.is_empty() {
        return Err(ModelError::EmptyEvent);
    }
    let mut h = vec![0.0; gru.s];
    for (emb, kin) in jets {
        if emb.len() + JET_KIN != gru.d {
            return Err(ModelError::DimMismatch(format!(
                "GRU input is {}, got a {}-dim embedding plus {JET_KIN} kinematics",
                gru.d,
                emb.len()
            )));
        }
        let x = [*emb, kin.as_slice()].concat();
        h = gru_step(gru, &x, &h);
    }
    Ok(h)
}

#[derive(Debug, Clone, Copy)]
struct GruVars([Var; 9]);

fn gru_on_tape(tape: &mut Tape, v: GruVars, s: usize, xs: &[Var]) -> Result<Var, ModelError> {
    if xs.is_empty() {
        return Err(ModelError::EmptyEvent);
    }
    let [w_z, u_z, b_z, w_r, u_r, b_r, w_h, u_h, b_h] = v.0;
    let mut h = tape.input(Tensor::zeros(s, 1));
    let affine3 = |tape: &mut Tape, w, u, b, x, h| -> Result<Var, AutodiffError> {
        let wx = tape.matvec(w, x)?;
        let uh = tape.matvec(u, h)?;
        let sum = tape.add(wx, uh)?;
        tape.add(sum, b)
    };
    for &x in xs {
        let pre_z = affine3(tape, w_z, u_z, b_z, x, h)?;
        let z = tape.sigmoid(pre_z);
        let pre_r = affine3(tape, w_r, u_r, b_r, x, h)?;
        let r = tape.sigmoid(pre_r);
        let rh = tape.hadamard(r, h)?;
        let pre_c = affine3(tape, w_h, u_h, b_h, x, rh)?;
        let cand = tape.tanh(pre_c);
        let keep = tape.one_minus(z);
        let old = tape.hadamard(keep, h)?;
        let new = tape.hadamard(z, cand)?;
        h = tape.add(old, new)?;
    }
    Ok(h)
}

// ---------------------------------------------------------------------------
// Head and loss

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadParams {
    /// `hidden x input`
    pub w1: Tensor,
    pub b1: Tensor,
    /// `1 x hidden`
    pub w2: Tensor,
    pub b2: Tensor,
}

pub fn init_head(input: usize, hidden: usize, seed: u64) -> HeadParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w1 = glorot(&mut rng, hidden, input);
    let w2 = glorot(&mut rng, 1, hidden);
    HeadParams { w1, b1: Tensor::zeros(hidden, 1), w2, b2: Tensor::zeros(1, 1) }
}

impl HeadParams {
    pub fn input_dim(&self) -> usize {
        self.w1.cols()
    }
}

impl Parameters for HeadParams {
    fn tensors(&self) -> Vec<(&'static str, &Tensor)> {
        vec![("head.w1", &self.w1), ("head.b1", &self.b1), ("head.w2", &self.w2), ("head.b2", &self.b2)]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }
}

/// Signal probability for the summary vector `h`.
pub fn classify(h: &[f64], head: &HeadParams) -> Result<f64, ModelError> {
    if h.len() != head.input_dim() {
        return Err(ModelError::DimMismatch(format!("head expects {} inputs, got {}", head.input_dim(), h.len())));
    }
    let mut a = vec![0.0; head.w1.rows()];
    affine_into(&head.w1, head.b1.data(), h, &mut a);
    for v in a.iter_mut() {
        *v = autodiff::relu(*v);
    }
    Ok(autodiff::sigmoid(dot(head.w2.row(0), &a) + head.b2.data()[0]))
}

fn head_on_tape(tape: &mut Tape, [w1, b1, w2, b2]: [Var; 4], h: Var) -> Result<Var, AutodiffError> {
    let pre = tape.affine(w1, h, b1)?;
    let a = tape.relu(pre);
    let logit = tape.affine(w2, a, b2)?;
    Ok(tape.sigmoid(logit))
}

/// Binary cross-entropy with the probability clamped to `[1e-12, 1 - 1e-12]`.
pub fn bce_loss(p: f64, y: u8) -> f64 {
    autodiff::bce(p, y as f64)
}

/// Mean cross-entropy over a batch.
pub fn bce_mean(ps: &[f64], ys: &[u8]) -> f64 {
    assert_eq!(ps.len(), ys.len());
    ps.iter().zip(ys).map(|(&p, &y)| bce_loss(p, y)).sum::<f64>() / ps.len() as f64
}

// ---------------------------------------------------------------------------
// Adam

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    /// Steps taken so far.
    pub t: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new<P: Parameters + ?Sized>(params: &P) -> Self {
        let zeros: Vec<Tensor> = params.tensors().iter().map(|(_, t)| Tensor::zeros(t.rows(), t.cols())).collect();
        Self { t: 0, m: zeros.clone(), v: zeros }
    }
}

/// One bias-corrected Adam update. Increments `state.t` first, so the first
/// call uses `t = 1`.
pub fn adam_step(params: &mut [&mut Tensor], grads: &[Tensor], state: &mut AdamState, cfg: &AdamConfig) {
    assert_eq!(params.len(), grads.len(), "one gradient per parameter tensor");
    assert_eq!(params.len(), state.m.len(), "optimizer state does not match parameters");
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (k, p) in params.iter_mut().enumerate() {
        let (m, v) = (state.m[k].data_mut(), state.v[k].data_mut());
        for (i, (theta, &g)) in p.data_mut().iter_mut().zip(grads[k].data()).enumerate() {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            *theta -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
}

// ---------------------------------------------------------------------------
// Configuration

/// Whether samples are single jets or events of several jets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Level {
    #[default]
    Jet,
    Event,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub q: usize,
    pub gated: bool,
    pub gate_input: GateInput,
    pub activation: Activation,
    pub feature_set: FeatureSet,
    pub topology: Topology,
    /// Jet radius in the clustering distance.
    pub r: f64,
    pub level: Level,
    /// GRU state size (event level only).
    pub gru_hidden: usize,
    pub head_hidden: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Fraction of samples held out for validation.
    pub val_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch_size: 64,
            epochs: 10,
            seed: 0,
            q: 16,
            gated: true,
            gate_input: GateInput::default(),
            activation: Activation::default(),
            feature_set: FeatureSet::default(),
            topology: Topology::KT,
            r: 1.0,
            level: Level::Jet,
            gru_hidden: 16,
            head_hidden: 64,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            val_fraction: 0.2,
        }
    }
}

impl TrainConfig {
    /// `lr = 0` is accepted and freezes the parameters.
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be finite and >= 0, got {}", self.lr));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if self.q == 0 || self.head_hidden == 0 || self.gru_hidden == 0 {
            return bad("q, head_hidden and gru_hidden must be >= 1".into());
        }
        if !(self.r > 0.0) {
            return bad(format!("r must be positive, got {}", self.r));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("beta1 and beta2 must lie in [0, 1)".into());
        }
        if !(self.adam_eps > 0.0) {
            return bad("adam_eps must be positive".into());
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad(format!("val_fraction must lie in [0, 1), got {}", self.val_fraction));
        }
        if let Topology::GenKt { alpha } = self.topology {
            if !alpha.is_finite() {
                return bad("topology alpha must be finite".into());
            }
        }
        if self.topology == Topology::External {
            return bad("training builds its own trees; external topology is not supported".into());
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, beta1: self.beta1, beta2: self.beta2, eps: self.adam_eps }
    }
}

const SALT_RECNN: u64 = 1;
const SALT_GRU: u64 = 2;
const SALT_HEAD: u64 = 3;
const SALT_SPLIT: u64 = 4;
const SALT_EPOCH: u64 = 1 << 32;

// ---------------------------------------------------------------------------
// Data

/// One training example: a jet, or the jets of an event in recurrence order.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub jets: Vec<usize>,
    pub label: u8,
}

/// Trees, node features and samples built from a list of records.
#[derive(Debug, Clone)]
pub struct Dataset {
    /// One entry per record, in record order.
    pub inputs: Vec<JetInput>,
    /// Jet kinematics of every record (used at event level).
    pub kin: Vec<[f64; JET_KIN]>,
    pub samples: Vec<Sample>,
}

/// Feature scaling fitted on the training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub nodes: Standardizer,
    /// Present for event-level models.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub jet_kin: Option<Standardizer>,
}

impl Dataset {
    /// Clusters every record (in parallel) and groups records into samples.
    /// Features are raw until [`Dataset::standardize`] is applied.
    pub fn build(
        records: &[JetRecord],
        topology: Topology,
        r: f64,
        feature_set: FeatureSet,
        level: Level,
    ) -> Result<Self, ModelError> {
        let built: Vec<(JetInput, [f64; JET_KIN])> = records
            .par_iter()
            .enumerate()
            .map(|(i, rec)| {
                let tree = topology
                    .build(&rec.particles, r, i as u64)
                    .map_err(|source| ModelError::Cluster { record: i, source })?;
                let k = to_kinvec(tree.root_momentum()).map_err(|source| ModelError::Kinematics { record: i, source })?;
                let input =
                    JetInput::new(tree, feature_set).map_err(|source| ModelError::Kinematics { record: i, source })?;
                Ok((input, [k.pt, k.eta, k.phi, k.e, k.m]))
            })
            .collect::<Result<_, ModelError>>()?;
        let (inputs, kin): (Vec<_>, Vec<_>) = built.into_iter().unzip();
        let samples = match level {
            Level::Jet => records.iter().enumerate().map(|(i, rec)| Sample { jets: vec![i], label: rec.label }).collect(),
            Level::Event => group_events(records, &kin)?,
        };
        Ok(Self { inputs, kin, samples })
    }

    pub fn labels(&self, ids: &[usize]) -> Vec<u8> {
        ids.iter().map(|&i| self.samples[i].label).collect()
    }

    /// Fits node (and, at event level, jet-kinematics) scaling on the jets of
    /// `ids`.
    pub fn fit_standardization(&self, ids: &[usize], level: Level) -> Standardization {
        let jets = || ids.iter().flat_map(|&s| self.samples[s].jets.iter().copied());
        let nodes = standardize_fit(jets().flat_map(|j| self.inputs[j].features.rows()));
        let jet_kin = (level == Level::Event).then(|| standardize_fit(jets().map(|j| self.kin[j].as_slice())));
        Standardization { nodes, jet_kin }
    }

    pub fn standardize(&mut self, stats: &Standardization) {
        for input in &mut self.inputs {
            for row in input.features.rows_mut() {
                stats.nodes.apply_in_place(row);
            }
        }
        if let Some(k) = &stats.jet_kin {
            for row in &mut self.kin {
                k.apply_in_place(row);
            }
        }
    }
}

/// Groups records by `event_id` in order of first appearance; jets within an
/// event are ordered by descending pt, ties by record order.
fn group_events(records: &[JetRecord], kin: &[[f64; JET_KIN]]) -> Result<Vec<Sample>, ModelError> {
    let mut index: BTreeMap<u64, usize> = BTreeMap::new();
    let mut samples: Vec<(u64, Sample)> = Vec::new();
    for (i, rec) in records.iter().enumerate() {
        let id = rec.event_id.ok_or(ModelError::MissingEventId(i))?;
        match index.get(&id) {
            Some(&k) => {
                if samples[k].1.label != rec.label {
                    return Err(ModelError::MixedEventLabels(id));
                }
                samples[k].1.jets.push(i);
            }
            None => {
                index.insert(id, samples.len());
                samples.push((id, Sample { jets: vec![i], label: rec.label }));
            }
        }
    }
    Ok(samples
        .into_iter()
        .map(|(_, mut s)| {
            s.jets.sort_by(|&a, &b| kin[b][0].total_cmp(&kin[a][0]).then(a.cmp(&b)));
            s
        })
        .collect())
}

/// Seeded train/validation partition of sample indices. Both lists are in
/// ascending order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

impl Split {
    pub fn new(n: usize, val_fraction: f64, seed: u64) -> Self {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(seed, SALT_SPLIT)));
        let n_val = ((n as f64) * val_fraction).round() as usize;
        let mut val = order[..n_val].to_vec();
        let mut train = order[n_val..].to_vec();
        val.sort_unstable();
        train.sort_unstable();
        Self { train, val }
    }
}

fn class_counts(labels: &[u8]) -> (usize, usize) {
    let pos = labels.iter().filter(|&&l| l == 1).count();
    (pos, labels.len() - pos)
}

// ---------------------------------------------------------------------------
// Model

/// All trainable parameters plus the shape of the network.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub level: Level,
    pub recnn: RecNNParams,
    pub gru: Option<GruParams>,
    pub head: HeadParams,
}

impl Model {
    /// Freshly initialized parameters for `cfg`; deterministic in `cfg.seed`.
    pub fn init(cfg: &TrainConfig) -> Self {
        let (q, f) = (cfg.q, cfg.feature_set.len());
        let mut recnn = init_params(q, f, mix_seed(cfg.seed, SALT_RECNN), cfg.gated);
        recnn.activation = cfg.activation;
        recnn.gate_input = cfg.gate_input;
        let gru = (cfg.level == Level::Event).then(|| init_gru(cfg.gru_hidden, q + JET_KIN, mix_seed(cfg.seed, SALT_GRU)));
        let head_in = gru.as_ref().map_or(q, |g| g.s);
        let head = init_head(head_in, cfg.head_hidden, mix_seed(cfg.seed, SALT_HEAD));
        Self { level: cfg.level, recnn, gru, head }
    }

    fn n_recnn(&self) -> usize {
        self.recnn.tensors().len()
    }

    fn gru(&self) -> Result<&GruParams, ModelError> {
        self.gru.as_ref().ok_or_else(|| ModelError::DimMismatch("event-level model without GRU parameters".into()))
    }

    fn summarize(&self, data: &Dataset, sample: &Sample, embeddings: &[&[f64]]) -> Result<f64, ModelError> {
        match self.level {
            Level::Jet => {
                let [emb] = embeddings else {
                    return Err(ModelError::DimMismatch(format!("jet-level sample with {} jets", embeddings.len())));
                };
                classify(emb, &self.head)
            }
            Level::Event => {
                let jets: Vec<(&[f64], [f64; JET_KIN])> =
                    embeddings.iter().zip(&sample.jets).map(|(e, &j)| (*e, data.kin[j])).collect();
                classify(&event_embed(&jets, self.gru()?)?, &self.head)
            }
        }
    }

    /// Score of one sample through the per-tree forward.
    pub fn score_one(&self, data: &Dataset, sample: usize) -> Result<f64, ModelError> {
        let s = &data.samples[sample];
        let embs = s.jets.iter().map(|&j| embed(&data.inputs[j], &self.recnn)).collect::<Result<Vec<_>, _>>()?;
        let refs: Vec<&[f64]> = embs.iter().map(Vec::as_slice).collect();
        self.summarize(data, s, &refs)
    }

    /// Scores of `samples`, embedding all their jets in one batched sweep.
    /// Identical to [`Model::score_one`] bit for bit.
    pub fn score(&self, data: &Dataset, samples: &[usize]) -> Result<Vec<f64>, ModelError> {
        let jets: Vec<usize> = samples.iter().flat_map(|&s| data.samples[s].jets.iter().copied()).collect();
        let inputs: Vec<JetInput> = jets.iter().map(|&j| data.inputs[j].clone()).collect();
        let schedule = levelize(inputs.iter().map(|i| &i.tree));
        let emb = embed_batched(&schedule, &inputs, &self.recnn, self.recnn.variant())?;
        let mut offsets = Vec::with_capacity(samples.len());
        let mut at = 0;
        for &s in samples {
            offsets.push(at);
            at += data.samples[s].jets.len();
        }
        samples
            .par_iter()
            .zip(offsets)
            .map(|(&s, off)| {
                let sample = &data.samples[s];
                let rows: Vec<&[f64]> = (off..off + sample.jets.len()).map(|r| emb.row(r)).collect();
                self.summarize(data, sample, &rows)
            })
            .collect()
    }

    /// Records the loss of one sample on `tape`; `vars` are this model's
    /// parameters as returned by [`Parameters::register`].
    pub fn record_loss(&self, tape: &mut Tape, vars: &[Var], data: &Dataset, sample: usize) -> Result<Var, ModelError> {
        let p = self.record_probability(tape, vars, data, sample)?;
        Ok(tape.bce(p, data.samples[sample].label as f64)?)
    }

    pub fn record_probability(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        data: &Dataset,
        sample: usize,
    ) -> Result<Var, ModelError> {
        let n_rec = self.n_recnn();
        let n_gru = if self.gru.is_some() { 9 } else { 0 };
        if vars.len() != n_rec + n_gru + 4 {
            return Err(ModelError::DimMismatch(format!("{} parameter variables for this model", vars.len())));
        }
        let rec_vars = RecNNVars::from_vars(&vars[..n_rec]);
        let s = &data.samples[sample];
        let variant = self.recnn.variant();
        let roots = s
            .jets
            .iter()
            .map(|&j| embed_on_tape(tape, &rec_vars, &data.inputs[j], &self.recnn, variant))
            .collect::<Result<Vec<_>, _>>()?;
        let summary = match self.level {
            Level::Jet => match roots.as_slice() {
                [root] => *root,
                _ => return Err(ModelError::DimMismatch(format!("jet-level sample with {} jets", roots.len()))),
            },
            Level::Event => {
                let gru = self.gru()?;
                let gv = GruVars(vars[n_rec..n_rec + 9].try_into().expect("nine GRU tensors"));
                let mut xs = Vec::with_capacity(roots.len());
                for (&root, &j) in roots.iter().zip(&s.jets) {
                    let kin = tape.input(Tensor::vector(data.kin[j].to_vec()));
                    xs.push(tape.concat(&[root, kin])?);
                }
                gru_on_tape(tape, gv, gru.s, &xs)?
            }
        };
        let hv: [Var; 4] = vars[n_rec + n_gru..].try_into().expect("four head tensors");
        Ok(head_on_tape(tape, hv, summary)?)
    }

    /// Loss and parameter gradients of one sample, in canonical order.
    pub fn sample_gradients(&self, data: &Dataset, sample: usize) -> Result<(f64, Vec<Tensor>), ModelError> {
        let mut tape = Tape::new();
        let vars = self.register(&mut tape, 0);
        let loss = self.record_loss(&mut tape, &vars, data, sample)?;
        let value = tape.value(loss).data()[0];
        let grads = tape.backward(loss)?;
        let out = self
            .tensors()
            .iter()
            .enumerate()
            .map(|(k, (_, t))| grads.get(ParamId(k)).cloned().unwrap_or_else(|| Tensor::zeros(t.rows(), t.cols())))
            .collect();
        Ok((value, out))
    }

    /// Mean loss and mean gradients over `batch`. Per-sample work runs in
    /// parallel; the reduction follows `batch` order.
    pub fn batch_gradients(&self, data: &Dataset, batch: &[usize]) -> Result<(Vec<f64>, Vec<Tensor>), ModelError> {
        let per: Vec<(f64, Vec<Tensor>)> =
            batch.par_iter().map(|&s| self.sample_gradients(data, s)).collect::<Result<_, _>>()?;
        let mut losses = Vec::with_capacity(per.len());
        let mut total: Option<Vec<Tensor>> = None;
        for (loss, grads) in per {
            losses.push(loss);
            match &mut total {
                None => total = Some(grads),
                Some(acc) => {
                    for (a, g) in acc.iter_mut().zip(&grads) {
                        a.add_assign(g);
                    }
                }
            }
        }
        let mut total = total.ok_or_else(|| ModelError::Config("empty batch".into()))?;
        for g in &mut total {
            g.scale(1.0 / batch.len() as f64);
        }
        Ok((losses, total))
    }
}

impl Parameters for Model {
    fn tensors(&self) -> Vec<(&'static str, &Tensor)> {
        let mut out = self.recnn.tensors();
        if let Some(g) = &self.gru {
            out.extend(g.tensors());
        }
        out.extend(self.head.tensors());
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.recnn.tensors_mut();
        if let Some(g) = &mut self.gru {
            out.extend(g.tensors_mut());
        }
        out.extend(self.head.tensors_mut());
        out
    }
}

// ---------------------------------------------------------------------------
// Training

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Mean training loss over the epoch, each sample's loss taken before the
    /// update of its batch.
    pub loss: f64,
    /// `None` when the validation split is empty or single-class.
    pub val_auc: Option<f64>,
}

/// AUC of `model` on `ids`, or `None` if they do not cover both classes.
pub fn split_auc(model: &Model, data: &Dataset, ids: &[usize]) -> Result<Option<f64>, ModelError> {
    let (pos, neg) = class_counts(&data.labels(ids));
    if pos == 0 || neg == 0 {
        return Ok(None);
    }
    let scores = model.score(data, ids)?;
    Ok(Some(eval::auc(&scores, &data.labels(ids))?))
}

/// Runs `cfg.epochs` epochs of minibatch Adam on `model` over `split.train`.
/// `on_epoch` sees every history record as it is produced.
pub fn fit(
    model: &mut Model,
    data: &Dataset,
    split: &Split,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<Vec<EpochRecord>, ModelError> {
    cfg.validate()?;
    if split.train.is_empty() {
        return Err(ModelError::Config("training split is empty".into()));
    }
    let adam = cfg.adam();
    let mut state = AdamState::new(model);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut losses = vec![0.0; data.samples.len()];
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        let mut order = split.train.clone();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, SALT_EPOCH + epoch as u64)));
        for batch in order.chunks(cfg.batch_size) {
            step += 1;
            let (batch_losses, grads) = model.batch_gradients(data, batch)?;
            let mean = batch_losses.iter().sum::<f64>() / batch.len() as f64;
            if !mean.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                return Err(ModelError::NonFiniteLoss { step, epoch, loss: mean });
            }
            for (&s, l) in batch.iter().zip(batch_losses) {
                losses[s] = l;
            }
            adam_step(&mut model.tensors_mut(), &grads, &mut state, &adam);
        }
        // summed in sample order so the value does not depend on the shuffle
        let loss = split.train.iter().map(|&s| losses[s]).sum::<f64>() / split.train.len() as f64;
        let record = EpochRecord { epoch, loss, val_auc: split_auc(model, data, &split.val)? };
        on_epoch(&record);
        history.push(record);
    }
    Ok(history)
}

/// Everything a training run produces.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub model: Model,
    pub split: Split,
}

pub fn train(records: &[JetRecord], cfg: &TrainConfig) -> Result<TrainOutcome, ModelError> {
    train_with(records, cfg, |_| {})
}

/// Full pipeline: cluster, split, standardize on the training split, fit.
pub fn train_with(
    records: &[JetRecord],
    cfg: &TrainConfig,
    on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome, ModelError> {
    cfg.validate()?;
    let mut data = Dataset::build(records, cfg.topology, cfg.r, cfg.feature_set, cfg.level)?;
    let all: Vec<usize> = (0..data.samples.len()).collect();
    let (positives, negatives) = class_counts(&data.labels(&all));
    if positives == 0 || negatives == 0 {
        return Err(ModelError::SingleClassDataset { positives, negatives });
    }
    let split = Split::new(data.samples.len(), cfg.val_fraction, cfg.seed);
    let (positives, negatives) = class_counts(&data.labels(&split.train));
    if positives == 0 || negatives == 0 {
        return Err(ModelError::SingleClassDataset { positives, negatives });
    }
    let stats = data.fit_standardization(&split.train, cfg.level);
    data.standardize(&stats);
    let mut model = Model::init(cfg);
    let history = fit(&mut model, &data, &split, cfg, on_epoch)?;
    let checkpoint = Checkpoint::new(&model, cfg, stats, history);
    Ok(TrainOutcome { checkpoint, model, split })
}

pub fn write_history_csv<W: Write>(history: &[EpochRecord], w: &mut W) -> std::io::Result<()> {
    writeln!(w, "epoch,loss,val_auc")?;
    for r in history {
        match r.val_auc {
            Some(a) => writeln!(w, "{},{},{a}", r.epoch, r.loss)?,
            None => writeln!(w, "{},{},", r.epoch, r.loss)?,
        }
    }
    Ok(())
}

pub fn export_history_csv(history: &[EpochRecord], path: &Path) -> Result<(), ModelError> {
    let mut w = BufWriter::new(File::create(path).map_err(io_err(path))?);
    write_history_csv(history, &mut w).map_err(io_err(path))?;
    w.flush().map_err(io_err(path))
}

// ---------------------------------------------------------------------------
// Checkpoints

pub const CHECKPOINT_FORMAT: &str = "jetrec-checkpoint/1";

/// Trained parameters with everything needed to score new data.
///
/// Arrays are flat row-major lists keyed by parameter name; shapes follow
/// from `config`. Numbers are written in shortest round-trip form, so saving
/// and loading reproduces every value exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub q: usize,
    pub f: usize,
    pub gated: bool,
    pub seed: u64,
    pub config: TrainConfig,
    pub standardization: Standardization,
    pub arrays: BTreeMap<String, Vec<f64>>,
    pub history: Vec<EpochRecord>,
}

impl Checkpoint {
    pub fn new(model: &Model, cfg: &TrainConfig, standardization: Standardization, history: Vec<EpochRecord>) -> Self {
        let arrays = model.tensors().into_iter().map(|(n, t)| (n.to_string(), t.data().to_vec())).collect();
        Self {
            format: CHECKPOINT_FORMAT.into(),
            q: model.recnn.q,
            f: model.recnn.f,
            gated: model.recnn.gates.is_some(),
            seed: cfg.seed,
            config: cfg.clone(),
            standardization,
            arrays,
            history,
        }
    }

    /// Rebuilds the model, checking that every array is present with the
    /// right length and that no unknown arrays remain.
    pub fn model(&self) -> Result<Model, ModelError> {
        let bad = |m: String| Err(ModelError::Checkpoint(m));
        if self.format != CHECKPOINT_FORMAT {
            return bad(format!("unsupported format {:?}", self.format));
        }
        self.config.validate()?;
        if self.q != self.config.q || self.f != self.config.feature_set.len() || self.gated != self.config.gated {
            return bad("q, f or gated disagree with the stored config".into());
        }
        if self.standardization.nodes.mean.len() != self.f {
            return bad("node standardization does not match the feature count".into());
        }
        let mut model = Model::init(&self.config);
        let names: Vec<&'static str> = model.tensors().iter().map(|(n, _)| *n).collect();
        if names.len() != self.arrays.len() {
            return bad(format!("expected {} arrays, found {}", names.len(), self.arrays.len()));
        }
        for (name, t) in names.into_iter().zip(model.tensors_mut()) {
            let Some(values) = self.arrays.get(name) else {
                return bad(format!("missing array {name}"));
            };
            if values.len() != t.len() {
                return bad(format!("array {name} has {} values, expected {}", values.len(), t.len()));
            }
            t.data_mut().copy_from_slice(values);
        }
        Ok(model)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("checkpoint values are finite")
    }

    pub fn from_json(text: &str) -> Result<Self, ModelError> {
        serde_json::from_str(text).map_err(|e| ModelError::Checkpoint(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        std::fs::write(path, self.to_json() + "\n").map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        Self::from_json(&std::fs::read_to_string(path).map_err(io_err(path))?)
    }

    /// Prepares `records` exactly as training did: same trees, same scaling.
    pub fn dataset(&self, records: &[JetRecord]) -> Result<Dataset, ModelError> {
        let c = &self.config;
        let mut data = Dataset::build(records, c.topology, c.r, c.feature_set, c.level)?;
        data.standardize(&self.standardization);
        Ok(data)
    }

    /// The training/validation partition of a dataset with `n` samples.
    pub fn split(&self, n: usize) -> Split {
        Split::new(n, self.config.val_fraction, self.config.seed)
    }
}
