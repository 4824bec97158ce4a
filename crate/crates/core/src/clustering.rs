//! Binary trees over particle lists.
//!
//! [`cluster`] reclusters a particle list with the generalized-kt measure
//!
//! ```text
//! d_ij = min(pt_i^(2 alpha), pt_j^(2 alpha)) * dR_ij^2 / R^2
//! ```
//!
//! merging the closest pair (E-scheme) until a single pseudojet is left.
//! `alpha = 1` is kt, `0` Cambridge/Aachen and `-1` anti-kt. There is no beam
//! distance: every input ends up in the one tree.
//!
//! Node layout is fixed: leaves `0..n` in input order, then one node per merge
//! in merge order, so the root is always the last node. The left child of a
//! merge is the pseudojet created earlier. Ties on the minimal `d_ij`
//! (bitwise equal) go to the lexicographically smallest pair of creation
//! indices.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kinematics::{recombine, wrap_phi, FourMomentum, KinVec, ETA_MAX};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ClusterError {
    #[error("cannot cluster an empty particle list")]
    EmptyInput,
    #[error("jet radius must be positive, got {0}")]
    InvalidRadius(f64),
    #[error("invalid tree: {0}")]
    InvalidTree(String),
}

/// How a particle list is turned into a tree.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Topology {
    /// Generalized-kt sequential recombination with exponent `alpha`.
    GenKt { alpha: f64 },
    /// Uniformly random pair merged at every step.
    RandomTree { seed: u64 },
    /// Chain over leaves sorted by descending pt; the hardest leaf joins last.
    PtDescChain,
    /// Chain over leaves sorted by ascending pt; the softest leaf joins last.
    PtAscChain,
    /// Trees supplied from outside (tree JSON).
    External,
}

impl Topology {
    pub const KT: Topology = Topology::GenKt { alpha: 1.0 };
    pub const CAMBRIDGE_AACHEN: Topology = Topology::GenKt { alpha: 0.0 };
    pub const ANTI_KT: Topology = Topology::GenKt { alpha: -1.0 };

    /// Builds the tree for `particles`. Random trees mix `salt` (usually the
    /// jet index) into the seed so that each jet gets its own draw.
    pub fn build(&self, particles: &[FourMomentum], r: f64, salt: u64) -> Result<ClusterTree, ClusterError> {
        match *self {
            Topology::GenKt { alpha } => cluster(particles, alpha, r),
            Topology::RandomTree { seed } => random_tree(particles, mix_seed(seed, salt)),
            Topology::PtDescChain => pt_chain(particles, ChainOrder::Descending),
            Topology::PtAscChain => pt_chain(particles, ChainOrder::Ascending),
            Topology::External => Err(ClusterError::InvalidTree(
                "external topology has no builder; load trees from JSON".into(),
            )),
        }
    }
}

pub(crate) fn mix_seed(seed: u64, salt: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ salt.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeNode {
    pub momentum: FourMomentum,
    pub children: Option<(usize, usize)>,
    pub leaf_particle: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterTree {
    pub nodes: Vec<TreeNode>,
    pub root: usize,
    pub n_leaves: usize,
}

impl ClusterTree {
    fn with_leaves(particles: &[FourMomentum]) -> Result<Self, ClusterError> {
        if particles.is_empty() {
            return Err(ClusterError::EmptyInput);
        }
        let mut nodes = Vec::with_capacity(2 * particles.len() - 1);
        nodes.extend(particles.iter().enumerate().map(|(i, &p)| TreeNode {
            momentum: p,
            children: None,
            leaf_particle: Some(i),
        }));
        Ok(Self { nodes, root: 0, n_leaves: particles.len() })
    }

    /// Appends the merge of `a` and `b` (ordered by creation) and returns its id.
    fn merge(&mut self, a: usize, b: usize) -> usize {
        let (l, r) = if a < b { (a, b) } else { (b, a) };
        let momentum = recombine(self.nodes[l].momentum, self.nodes[r].momentum);
        self.nodes.push(TreeNode { momentum, children: Some((l, r)), leaf_particle: None });
        self.root = self.nodes.len() - 1;
        self.root
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn root_momentum(&self) -> FourMomentum {
        self.nodes[self.root].momentum
    }

    /// Node ids ordered so that children precede parents.
    pub fn postorder(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.nodes.len());
        let mut stack = vec![(self.root, false)];
        while let Some((id, expanded)) = stack.pop() {
            match (self.nodes[id].children, expanded) {
                (Some((l, r)), false) => {
                    stack.push((id, true));
                    stack.push((r, false));
                    stack.push((l, false));
                }
                _ => out.push(id),
            }
        }
        out
    }

    /// Height of every node above its deepest leaf (leaves are 0).
    pub fn heights(&self) -> Vec<usize> {
        let mut h = vec![0usize; self.nodes.len()];
        for id in self.postorder() {
            if let Some((l, r)) = self.nodes[id].children {
                h[id] = 1 + h[l].max(h[r]);
            }
        }
        h
    }

    /// Depth of every node below the root.
    pub fn depths(&self) -> Vec<usize> {
        let mut d = vec![0usize; self.nodes.len()];
        let order = self.postorder();
        for &id in order.iter().rev() {
            if let Some((l, r)) = self.nodes[id].children {
                d[l] = d[id] + 1;
                d[r] = d[id] + 1;
            }
        }
        d
    }

    /// Checks the structural invariants and E-scheme conservation at
    /// relative tolerance `rel_tol`.
    pub fn validate(&self, rel_tol: f64) -> Result<(), ClusterError> {
        let bad = |msg: String| Err(ClusterError::InvalidTree(msg));
        if self.n_leaves == 0 || self.nodes.len() != 2 * self.n_leaves - 1 {
            return bad(format!("{} nodes for {} leaves", self.nodes.len(), self.n_leaves));
        }
        if self.root >= self.nodes.len() {
            return bad(format!("root {} out of range", self.root));
        }
        let mut parents = vec![0usize; self.nodes.len()];
        let mut leaves = 0;
        for (id, node) in self.nodes.iter().enumerate() {
            match node.children {
                Some((l, r)) => {
                    if l >= self.nodes.len() || r >= self.nodes.len() || l == r || l == id || r == id {
                        return bad(format!("node {id} has invalid children ({l}, {r})"));
                    }
                    parents[l] += 1;
                    parents[r] += 1;
                    let sum = recombine(self.nodes[l].momentum, self.nodes[r].momentum);
                    if !close(&sum, &node.momentum, rel_tol) {
                        return bad(format!("node {id} is not the sum of its children"));
                    }
                }
                None => {
                    if node.leaf_particle.is_none() {
                        return bad(format!("leaf {id} has no particle index"));
                    }
                    leaves += 1;
                }
            }
        }
        if leaves != self.n_leaves {
            return bad(format!("{leaves} leaves, expected {}", self.n_leaves));
        }
        for (id, &n) in parents.iter().enumerate() {
            let expected = usize::from(id != self.root);
            if n != expected {
                return bad(format!("node {id} has {n} parents"));
            }
        }
        if self.postorder().len() != self.nodes.len() {
            return bad("tree is not connected".into());
        }
        Ok(())
    }

    /// Leaf-particle sets of all internal nodes, sorted; equal for trees that
    /// differ only by node numbering.
    pub fn canonical_clusters(&self) -> Vec<Vec<usize>> {
        let mut sets: Vec<Vec<usize>> = vec![Vec::new(); self.nodes.len()];
        for id in self.postorder() {
            let node = &self.nodes[id];
            sets[id] = match node.children {
                Some((l, r)) => {
                    let mut s = [sets[l].as_slice(), sets[r].as_slice()].concat();
                    s.sort_unstable();
                    s
                }
                None => vec![node.leaf_particle.unwrap_or(id)],
            };
        }
        let mut internal: Vec<Vec<usize>> = self
            .nodes
            .iter()
            .zip(sets)
            .filter(|(n, _)| n.children.is_some())
            .map(|(_, s)| s)
            .collect();
        internal.sort();
        internal
    }
}

fn close(a: &FourMomentum, b: &FourMomentum, rel_tol: f64) -> bool {
    let scale = a.e.abs().max(b.e.abs()).max(a.p2().sqrt()).max(1e-300);
    a.to_array().iter().zip(b.to_array()).all(|(x, y)| (x - y).abs() <= rel_tol * scale)
}

/// Cached per-pseudojet quantities entering the distance.
#[derive(Debug, Clone, Copy)]
struct Kin {
    weight: f64,
    eta: f64,
    phi: f64,
}

impl Kin {
    fn new(p: &FourMomentum, alpha: f64) -> Self {
        let pt2 = p.pt2();
        let weight = if alpha == 0.0 {
            1.0
        } else if alpha == 1.0 {
            pt2
        } else if alpha == -1.0 {
            1.0 / pt2
        } else {
            pt2.powf(alpha)
        };
        let (eta, phi) = if pt2 == 0.0 {
            (if p.pz == 0.0 { 0.0 } else { ETA_MAX.copysign(p.pz) }, 0.0)
        } else {
            let pt = pt2.sqrt();
            (( p.pz / pt).asinh(), p.py.atan2(p.px))
        };
        Self { weight, eta, phi }
    }

    fn as_kinvec(&self) -> KinVec {
        KinVec { eta: self.eta, phi: self.phi, ..Default::default() }
    }
}

/// `d_ij` for `i` created before `j`.
fn pair_distance(i: &Kin, j: &Kin, inv_r2: f64) -> f64 {
    let deta = i.eta - j.eta;
    let dphi = wrap_phi(i.phi - j.phi);
    i.weight.min(j.weight) * (deta * deta + dphi * dphi) * inv_r2
}

/// The `d_ij` between two momenta.
pub fn gen_kt_distance(a: &FourMomentum, b: &FourMomentum, alpha: f64, r: f64) -> f64 {
    pair_distance(&Kin::new(a, alpha), &Kin::new(b, alpha), 1.0 / (r * r))
}

/// Pseudorapidity/azimuth view used by the distance; exposed for diagnostics.
pub fn distance_coordinates(p: &FourMomentum) -> KinVec {
    Kin::new(p, 0.0).as_kinvec()
}

/// Generalized-kt reclustering with a per-pseudojet nearest-neighbour cache.
///
/// Each active pseudojet `i` caches its nearest neighbour among pseudojets
/// created after it. A merge invalidates only the entries pointing at the two
/// merged pseudojets; the new pseudojet is newer than everything else and is
/// offered to every cache entry once.
pub fn cluster(particles: &[FourMomentum], alpha: f64, r: f64) -> Result<ClusterTree, ClusterError> {
    if !(r > 0.0) {
        return Err(ClusterError::InvalidRadius(r));
    }
    let mut tree = ClusterTree::with_leaves(particles)?;
    let n = particles.len();
    let inv_r2 = 1.0 / (r * r);
    let total = 2 * n - 1;

    let mut kin: Vec<Kin> = Vec::with_capacity(total);
    kin.extend(particles.iter().map(|p| Kin::new(p, alpha)));
    // active pseudojets in creation order
    let mut active: Vec<usize> = (0..n).collect();
    let mut nn = vec![usize::MAX; total];
    let mut nn_dist = vec![f64::INFINITY; total];

    let rescan = |i: usize, active: &[usize], kin: &[Kin], nn: &mut [usize], nn_dist: &mut [f64]| {
        let mut best = f64::INFINITY;
        let mut best_j = usize::MAX;
        for &j in active.iter().filter(|&&j| j > i) {
            let d = pair_distance(&kin[i], &kin[j], inv_r2);
            if d < best || (best_j == usize::MAX && d == best) {
                best = d;
                best_j = j;
            }
        }
        nn[i] = best_j;
        nn_dist[i] = best;
    };

    for &i in &active {
        rescan(i, &active, &kin, &mut nn, &mut nn_dist);
    }

    while active.len() > 1 {
        // smallest (d, i); nn[i] is already the smallest j for that i
        let mut a = usize::MAX;
        let mut best = f64::INFINITY;
        for &i in &active {
            if nn[i] == usize::MAX {
                continue;
            }
            if a == usize::MAX || nn_dist[i] < best {
                best = nn_dist[i];
                a = i;
            }
        }
        let b = nn[a];
        let c = tree.merge(a, b);
        kin.push(Kin::new(&tree.nodes[c].momentum, alpha));
        active.retain(|&k| k != a && k != b);
        active.push(c);

        for idx in 0..active.len() - 1 {
            let i = active[idx];
            if nn[i] == a || nn[i] == b {
                rescan(i, &active, &kin, &mut nn, &mut nn_dist);
            } else {
                let d = pair_distance(&kin[i], &kin[c], inv_r2);
                // c is the newest pseudojet, so an exact tie keeps the older neighbour
                if d < nn_dist[i] || nn[i] == usize::MAX {
                    nn[i] = c;
                    nn_dist[i] = d;
                }
            }
        }
        nn[c] = usize::MAX;
        nn_dist[c] = f64::INFINITY;
    }
    Ok(tree)
}

/// Reference implementation of [`cluster`]: rebuilds the full distance table
/// before every merge.
pub fn cluster_oracle(particles: &[FourMomentum], alpha: f64, r: f64) -> Result<ClusterTree, ClusterError> {
    if !(r > 0.0) {
        return Err(ClusterError::InvalidRadius(r));
    }
    let mut tree = ClusterTree::with_leaves(particles)?;
    let inv_r2 = 1.0 / (r * r);
    let mut active: Vec<usize> = (0..particles.len()).collect();
    while active.len() > 1 {
        let kin: Vec<Kin> = active.iter().map(|&k| Kin::new(&tree.nodes[k].momentum, alpha)).collect();
        let mut table = Vec::with_capacity(active.len() * active.len() / 2);
        for x in 0..active.len() {
            for y in x + 1..active.len() {
                table.push((pair_distance(&kin[x], &kin[y], inv_r2), active[x], active[y]));
            }
        }
        let mut best = table[0];
        for &entry in &table[1..] {
            let (d, i, j) = entry;
            if d < best.0 || (d == best.0 && (i, j) < (best.1, best.2)) {
                best = entry;
            }
        }
        let (_, a, b) = best;
        let c = tree.merge(a, b);
        active.retain(|&k| k != a && k != b);
        active.push(c);
    }
    Ok(tree)
}

/// Merges a uniformly chosen pair of active pseudojets at every step.
pub fn random_tree(particles: &[FourMomentum], seed: u64) -> Result<ClusterTree, ClusterError> {
    let mut tree = ClusterTree::with_leaves(particles)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut active: Vec<usize> = (0..particles.len()).collect();
    while active.len() > 1 {
        let m = active.len();
        let x = rng.random_range(0..m);
        let mut y = rng.random_range(0..m - 1);
        if y >= x {
            y += 1;
        }
        let (a, b) = (active[x], active[y]);
        let c = tree.merge(a, b);
        active.retain(|&k| k != a && k != b);
        active.push(c);
    }
    Ok(tree)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ChainOrder {
    Descending,
    Ascending,
}

/// Fully unbalanced tree. Leaves are sorted by pt (ties by input index) and
/// folded from the far end, so the first leaf of the sorted order is a child
/// of the root at depth 1 and the last two form the innermost merge.
pub fn pt_chain(particles: &[FourMomentum], order: ChainOrder) -> Result<ClusterTree, ClusterError> {
    let mut tree = ClusterTree::with_leaves(particles)?;
    let pts: Vec<f64> = particles.iter().map(|p| p.pt2()).collect();
    let mut sorted: Vec<usize> = (0..particles.len()).collect();
    sorted.sort_by(|&i, &j| {
        let by_pt = match order {
            ChainOrder::Descending => pts[j].total_cmp(&pts[i]),
            ChainOrder::Ascending => pts[i].total_cmp(&pts[j]),
        };
        by_pt.then(i.cmp(&j))
    });
    let mut acc = *sorted.last().expect("non-empty");
    for &leaf in sorted.iter().rev().skip(1) {
        acc = tree.merge(leaf, acc);
    }
    Ok(tree)
}

pub fn pt_desc_chain(particles: &[FourMomentum]) -> Result<ClusterTree, ClusterError> {
    pt_chain(particles, ChainOrder::Descending)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TreeStats {
    pub depth: usize,
    pub n_leaves: usize,
    /// `depth / ceil(log2 n_leaves)`; 1 for a single leaf.
    pub imbalance: f64,
}

pub fn tree_stats(tree: &ClusterTree) -> TreeStats {
    let depth = tree.heights()[tree.root];
    let balanced = ceil_log2(tree.n_leaves);
    let imbalance = if balanced == 0 { 1.0 } else { depth as f64 / balanced as f64 };
    TreeStats { depth, n_leaves: tree.n_leaves, imbalance }
}

pub fn ceil_log2(n: usize) -> usize {
    if n <= 1 {
        0
    } else {
        (usize::BITS - (n - 1).leading_zeros()) as usize
    }
}
