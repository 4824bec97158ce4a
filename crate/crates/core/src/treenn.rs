//! Recursive jet embeddings over [`ClusterTree`]s.
//!
//! One set of weights is applied at every node, children before parents.
//! Every node first maps its kinematic features to
//!
//! ```text
//! u_k = act(W_u g(o_k) + b_u)
//! ```
//!
//! A leaf's embedding is `u_k`. In the simple variant an internal node
//! combines its children with
//!
//! ```text
//! h_k = act(W_h [h_L; h_R; u_k] + b_h)
//! ```
//!
//! and in the gated variant with reset gates `r = sigmoid(W_r [h_L; h_R; u_k] + b_r)`,
//! a candidate `h~ = act(W_h [r_L*h_L; r_R*h_R; r_N*u_k] + b_h)` and update
//! gates `(z_H, z_L, z_R, z_N)`, normalised per component across the four
//! branches by a softmax, blending
//!
//! ```text
//! h_k = z_H*h~ + z_L*h_L + z_R*h_R + z_N*u_k
//! ```
//!
//! The update gates read `[h~; h_L; h_R; u_k]` ([`GateInput::Candidate`],
//! default) or `[h_L; h_R; u_k; 0]` ([`GateInput::Children`]). The root
//! embedding is returned as is, without a further nonlinearity.
//!
//! Three evaluation paths exist and agree to the bit: [`embed_simple`] /
//! [`embed_gated`] walk one tree, [`embed_batched`] sweeps a [`LevelSchedule`]
//! bucket by bucket across many trees, and [`embed_on_tape`] records the
//! forward for training.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{self, affine_into, AutodiffError, Parameters, Tape, Tensor, Var};
use crate::clustering::ClusterTree;
use crate::kinematics::{node_features_with, FeatureSet, KinematicsError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EmbedError {
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("variant needs gate parameters, which these parameters lack")]
    MissingGates,
    #[error(transparent)]
    Kinematics(#[from] KinematicsError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => autodiff::relu(x),
            Activation::Tanh => x.tanh(),
        }
    }

    fn record(self, tape: &mut Tape, x: Var) -> Var {
        match self {
            Activation::Relu => tape.relu(x),
            Activation::Tanh => tape.tanh(x),
        }
    }
}

/// What the update gates of the gated variant see.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GateInput {
    /// `[h~; h_L; h_R; u_k]`.
    #[default]
    Candidate,
    /// `[h_L; h_R; u_k]`, zero-padded to `4q`.
    Children,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Simple,
    #[default]
    Gated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateParams {
    /// `3q x 3q`
    pub w_r: Tensor,
    pub b_r: Tensor,
    /// `4q x 4q`
    pub w_z: Tensor,
    pub b_z: Tensor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecNNParams {
    pub q: usize,
    pub f: usize,
    pub activation: Activation,
    pub gate_input: GateInput,
    /// `q x f`
    pub w_u: Tensor,
    pub b_u: Tensor,
    /// `q x 3q`
    pub w_h: Tensor,
    pub b_h: Tensor,
    pub gates: Option<GateParams>,
}

pub(crate) fn glorot(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(-bound..=bound)).collect())
}

/// Glorot-uniform weights, zero biases. Deterministic per seed.
pub fn init_params(q: usize, f: usize, seed: u64, gated: bool) -> RecNNParams {
    assert!(q >= 1 && f >= 1, "embedding and feature dimensions must be positive");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w_u = glorot(&mut rng, q, f);
    let w_h = glorot(&mut rng, q, 3 * q);
    let gates = gated.then(|| GateParams {
        w_r: glorot(&mut rng, 3 * q, 3 * q),
        b_r: Tensor::zeros(3 * q, 1),
        w_z: glorot(&mut rng, 4 * q, 4 * q),
        b_z: Tensor::zeros(4 * q, 1),
    });
    RecNNParams {
        q,
        f,
        activation: Activation::Relu,
        gate_input: GateInput::default(),
        w_u,
        b_u: Tensor::zeros(q, 1),
        w_h,
        b_h: Tensor::zeros(q, 1),
        gates,
    }
}

impl RecNNParams {
    pub fn variant(&self) -> Variant {
        if self.gates.is_some() {
            Variant::Gated
        } else {
            Variant::Simple
        }
    }

    pub fn check_shapes(&self) -> Result<(), EmbedError> {
        let (q, f) = (self.q, self.f);
        let mut expected = vec![
            ("w_u", (q, f)),
            ("b_u", (q, 1)),
            ("w_h", (q, 3 * q)),
            ("b_h", (q, 1)),
        ];
        if self.gates.is_some() {
            expected.extend([("w_r", (3 * q, 3 * q)), ("b_r", (3 * q, 1)), ("w_z", (4 * q, 4 * q)), ("b_z", (4 * q, 1))]);
        }
        for ((name, t), (_, shape)) in self.tensors().into_iter().zip(expected) {
            if t.shape() != shape {
                return Err(EmbedError::DimMismatch(format!("{name} is {:?}, expected {shape:?}", t.shape())));
            }
        }
        Ok(())
    }
}

impl Parameters for RecNNParams {
    fn tensors(&self) -> Vec<(&'static str, &Tensor)> {
        let mut out = vec![("recnn.w_u", &self.w_u), ("recnn.b_u", &self.b_u), ("recnn.w_h", &self.w_h), ("recnn.b_h", &self.b_h)];
        if let Some(g) = &self.gates {
            out.extend([("recnn.w_r", &g.w_r), ("recnn.b_r", &g.b_r), ("recnn.w_z", &g.w_z), ("recnn.b_z", &g.b_z)]);
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.w_u, &mut self.b_u, &mut self.w_h, &mut self.b_h];
        if let Some(g) = &mut self.gates {
            out.extend([&mut g.w_r, &mut g.b_r, &mut g.w_z, &mut g.b_z]);
        }
        out
    }
}

/// Per-node feature rows of one tree, indexed like `tree.nodes`.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeFeatures {
    pub f: usize,
    pub data: Vec<f64>,
}

impl NodeFeatures {
    /// Raw features of every node, with jet totals taken from the root.
    pub fn compute(tree: &ClusterTree, set: FeatureSet) -> Result<Self, KinematicsError> {
        let totals = tree.root_momentum();
        let f = set.len();
        let mut data = Vec::with_capacity(f * tree.len());
        for node in &tree.nodes {
            data.extend(node_features_with(set, node.momentum, totals)?);
        }
        Ok(Self { f, data })
    }

    pub fn row(&self, node: usize) -> &[f64] {
        &self.data[node * self.f..(node + 1) * self.f]
    }

    pub fn rows(&self) -> std::slice::ChunksExact<'_, f64> {
        self.data.chunks_exact(self.f)
    }

    pub fn rows_mut(&mut self) -> impl Iterator<Item = &mut [f64]> {
        self.data.chunks_exact_mut(self.f)
    }
}

/// A tree together with the (possibly standardized) features of its nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct JetInput {
    pub tree: ClusterTree,
    pub features: NodeFeatures,
}

impl JetInput {
    pub fn new(tree: ClusterTree, set: FeatureSet) -> Result<Self, KinematicsError> {
        let features = NodeFeatures::compute(&tree, set)?;
        Ok(Self { tree, features })
    }

    fn check(&self, params: &RecNNParams) -> Result<(), EmbedError> {
        if self.features.f != params.f {
            return Err(EmbedError::DimMismatch(format!(
                "nodes carry {} features, parameters expect {}",
                self.features.f, params.f
            )));
        }
        if self.features.data.len() != self.features.f * self.tree.len() {
            return Err(EmbedError::DimMismatch("feature rows do not match tree nodes".into()));
        }
        params.check_shapes()
    }
}

fn leaf_map(params: &RecNNParams, x: &[f64], out: &mut [f64]) {
    affine_into(&params.w_u, params.b_u.data(), x, out);
    for v in out.iter_mut() {
        *v = params.activation.apply(*v);
    }
}

/// Simple combiner for one node. `scratch` holds `3q` values.
fn simple_node(params: &RecNNParams, hl: &[f64], hr: &[f64], u: &[f64], scratch: &mut Vec<f64>, out: &mut [f64]) {
    scratch.clear();
    scratch.extend_from_slice(hl);
    scratch.extend_from_slice(hr);
    scratch.extend_from_slice(u);
    affine_into(&params.w_h, params.b_h.data(), scratch, out);
    for v in out.iter_mut() {
        *v = params.activation.apply(*v);
    }
}

fn gated_node(params: &RecNNParams, gates: &GateParams, hl: &[f64], hr: &[f64], u: &[f64], out: &mut [f64]) {
    let q = params.q;
    let children = [hl, hr, u].concat();
    let mut r = vec![0.0; 3 * q];
    affine_into(&gates.w_r, gates.b_r.data(), &children, &mut r);
    for v in r.iter_mut() {
        *v = autodiff::sigmoid(*v);
    }
    let reset: Vec<f64> = r.iter().zip(&children).map(|(a, b)| a * b).collect();
    let mut cand = vec![0.0; q];
    affine_into(&params.w_h, params.b_h.data(), &reset, &mut cand);
    for v in cand.iter_mut() {
        *v = params.activation.apply(*v);
    }
    let gate_in = match params.gate_input {
        GateInput::Candidate => [cand.as_slice(), hl, hr, u].concat(),
        GateInput::Children => {
            let mut g = children.clone();
            g.resize(4 * q, 0.0);
            g
        }
    };
    let mut z = vec![0.0; 4 * q];
    affine_into(&gates.w_z, gates.b_z.data(), &gate_in, &mut z);
    let z = autodiff::blockwise_softmax(&z, 4);
    for c in 0..q {
        out[c] = z[c] * cand[c] + z[q + c] * hl[c] + z[2 * q + c] * hr[c] + z[3 * q + c] * u[c];
    }
}

fn embed_tree(input: &JetInput, params: &RecNNParams, variant: Variant) -> Result<Vec<f64>, EmbedError> {
    input.check(params)?;
    let gates = match variant {
        Variant::Simple => None,
        Variant::Gated => Some(params.gates.as_ref().ok_or(EmbedError::MissingGates)?),
    };
    let q = params.q;
    let tree = &input.tree;
    let mut u = vec![0.0; q * tree.len()];
    let mut h = vec![0.0; q * tree.len()];
    let mut scratch = Vec::with_capacity(3 * q);
    for id in tree.postorder() {
        let u_id = id * q;
        leaf_map(params, input.features.row(id), &mut u[u_id..u_id + q]);
        let u_k = &u[u_id..u_id + q];
        match tree.nodes[id].children {
            None => {
                let copy = u_k.to_vec();
                h[u_id..u_id + q].copy_from_slice(&copy);
            }
            Some((l, r)) => {
                let hl = h[l * q..(l + 1) * q].to_vec();
                let hr = h[r * q..(r + 1) * q].to_vec();
                let mut out = vec![0.0; q];
                match gates {
                    None => simple_node(params, &hl, &hr, u_k, &mut scratch, &mut out),
                    Some(g) => gated_node(params, g, &hl, &hr, u_k, &mut out),
                }
                h[u_id..u_id + q].copy_from_slice(&out);
            }
        }
    }
    let root = tree.root;
    Ok(h[root * q..(root + 1) * q].to_vec())
}

/// Root embedding under the simple combiner. Gate parameters, if present,
/// are ignored.
pub fn embed_simple(input: &JetInput, params: &RecNNParams) -> Result<Vec<f64>, EmbedError> {
    embed_tree(input, params, Variant::Simple)
}

/// Root embedding under the gated combiner.
pub fn embed_gated(input: &JetInput, params: &RecNNParams) -> Result<Vec<f64>, EmbedError> {
    embed_tree(input, params, Variant::Gated)
}

/// Root embedding with the variant implied by `params`.
pub fn embed(input: &JetInput, params: &RecNNParams) -> Result<Vec<f64>, EmbedError> {
    embed_tree(input, params, params.variant())
}

/// Tape variables of [`RecNNParams`], in canonical order.
#[derive(Debug, Clone)]
pub struct RecNNVars {
    w_u: Var,
    b_u: Var,
    w_h: Var,
    b_h: Var,
    gates: Option<[Var; 4]>,
}

impl RecNNVars {
    pub fn register(params: &RecNNParams, tape: &mut Tape, base: usize) -> Self {
        Self::from_vars(&params.register(tape, base))
    }

    pub fn from_vars(vars: &[Var]) -> Self {
        Self {
            w_u: vars[0],
            b_u: vars[1],
            w_h: vars[2],
            b_h: vars[3],
            gates: (vars.len() >= 8).then(|| [vars[4], vars[5], vars[6], vars[7]]),
        }
    }
}

/// Records the embedding of one tree on `tape` and returns the root variable.
pub fn embed_on_tape(
    tape: &mut Tape,
    vars: &RecNNVars,
    input: &JetInput,
    params: &RecNNParams,
    variant: Variant,
) -> Result<Var, EmbedError> {
    input.check(params)?;
    let gates = match variant {
        Variant::Simple => None,
        Variant::Gated => Some(vars.gates.ok_or(EmbedError::MissingGates)?),
    };
    let q = params.q;
    let act = params.activation;
    let tree = &input.tree;
    let mut h: Vec<Option<Var>> = vec![None; tree.len()];
    for id in tree.postorder() {
        let x = tape.input(Tensor::vector(input.features.row(id).to_vec()));
        let pre = tape.affine(vars.w_u, x, vars.b_u)?;
        let u = act.record(tape, pre);
        let node = match tree.nodes[id].children {
            None => u,
            Some((l, r)) => {
                let (hl, hr) = (h[l].expect("postorder"), h[r].expect("postorder"));
                match gates {
                    None => {
                        let cat = tape.concat(&[hl, hr, u])?;
                        let pre = tape.affine(vars.w_h, cat, vars.b_h)?;
                        act.record(tape, pre)
                    }
                    Some([w_r, b_r, w_z, b_z]) => {
                        let children = tape.concat(&[hl, hr, u])?;
                        let pre_r = tape.affine(w_r, children, b_r)?;
                        let r = tape.sigmoid(pre_r);
                        let reset = tape.hadamard(r, children)?;
                        let pre_c = tape.affine(vars.w_h, reset, vars.b_h)?;
                        let cand = act.record(tape, pre_c);
                        let gate_in = match params.gate_input {
                            GateInput::Candidate => tape.concat(&[cand, hl, hr, u])?,
                            GateInput::Children => {
                                let pad = tape.input(Tensor::zeros(q, 1));
                                tape.concat(&[hl, hr, u, pad])?
                            }
                        };
                        let pre_z = tape.affine(w_z, gate_in, b_z)?;
                        let z = tape.blockwise_softmax(pre_z, 4)?;
                        let mut acc: Option<Var> = None;
                        for (k, branch) in [cand, hl, hr, u].into_iter().enumerate() {
                            let zk = tape.slice(z, k * q, q)?;
                            let term = tape.hadamard(zk, branch)?;
                            acc = Some(match acc {
                                None => term,
                                Some(a) => tape.add(a, term)?,
                            });
                        }
                        acc.expect("four branches")
                    }
                }
            }
        };
        h[id] = Some(node);
    }
    Ok(h[tree.root].expect("root visited"))
}

/// Nodes of a batch of trees grouped by height, leaves first.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelSchedule {
    /// `buckets[k]` holds `(tree, node)` pairs of height `k`, in tree order
    /// and node-id order within a tree.
    pub buckets: Vec<Vec<(usize, usize)>>,
    pub n_trees: usize,
    node_counts: Vec<usize>,
}

impl LevelSchedule {
    pub fn n_nodes(&self) -> usize {
        self.buckets.iter().map(Vec::len).sum()
    }
}

pub fn levelize<'a>(trees: impl IntoIterator<Item = &'a ClusterTree>) -> LevelSchedule {
    let mut buckets: Vec<Vec<(usize, usize)>> = Vec::new();
    let mut node_counts = Vec::new();
    for (t, tree) in trees.into_iter().enumerate() {
        let heights = tree.heights();
        for (id, &hgt) in heights.iter().enumerate() {
            if buckets.len() <= hgt {
                buckets.resize_with(hgt + 1, Vec::new);
            }
            buckets[hgt].push((t, id));
        }
        node_counts.push(tree.len());
    }
    LevelSchedule { n_trees: node_counts.len(), buckets, node_counts }
}

/// Evaluates all trees of a schedule together, one height bucket at a time.
/// Row `i` of the result is the root embedding of `inputs[i]`.
///
/// Within a bucket every node depends only on lower buckets, so the rows of a
/// bucket are computed in parallel; each row is produced by the same kernel
/// as the per-tree walk.
pub fn embed_batched(
    schedule: &LevelSchedule,
    inputs: &[JetInput],
    params: &RecNNParams,
    variant: Variant,
) -> Result<Tensor, EmbedError> {
    if inputs.len() != schedule.n_trees {
        return Err(EmbedError::DimMismatch(format!(
            "schedule covers {} trees, got {}",
            schedule.n_trees,
            inputs.len()
        )));
    }
    for (input, &n) in inputs.iter().zip(&schedule.node_counts) {
        if input.tree.len() != n {
            return Err(EmbedError::DimMismatch("tree does not match schedule".into()));
        }
        input.check(params)?;
    }
    let gates = match variant {
        Variant::Simple => None,
        Variant::Gated => Some(params.gates.as_ref().ok_or(EmbedError::MissingGates)?),
    };
    let q = params.q;
    // per-tree offsets into flat node storage
    let mut offsets = Vec::with_capacity(inputs.len());
    let mut total = 0;
    for input in inputs {
        offsets.push(total);
        total += input.tree.len();
    }
    let mut h = vec![0.0; total * q];

    for bucket in &schedule.buckets {
        let rows: Vec<Vec<f64>> = bucket
            .par_iter()
            .with_min_len(64)
            .map_init(
                || Vec::with_capacity(3 * q),
                |scratch, &(t, id)| {
                    let input = &inputs[t];
                    let mut u = vec![0.0; q];
                    leaf_map(params, input.features.row(id), &mut u);
                    match input.tree.nodes[id].children {
                        None => u,
                        Some((l, r)) => {
                            let base = offsets[t];
                            let hl = &h[(base + l) * q..(base + l + 1) * q];
                            let hr = &h[(base + r) * q..(base + r + 1) * q];
                            let mut out = vec![0.0; q];
                            match gates {
                                None => simple_node(params, hl, hr, &u, scratch, &mut out),
                                Some(g) => gated_node(params, g, hl, hr, &u, &mut out),
                            }
                            out
                        }
                    }
                },
            )
            .collect();
        for (&(t, id), row) in bucket.iter().zip(rows) {
            let at = (offsets[t] + id) * q;
            h[at..at + q].copy_from_slice(&row);
        }
    }

    let mut out = Vec::with_capacity(inputs.len() * q);
    for (input, &base) in inputs.iter().zip(&offsets) {
        let at = (base + input.tree.root) * q;
        out.extend_from_slice(&h[at..at + q]);
    }
    Ok(Tensor::matrix(inputs.len(), q, out))
}
