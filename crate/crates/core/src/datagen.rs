//! Synthetic labelled jets and the JSONL dataset format.
//!
//! Signal jets (label 1) have two prongs separated by `dR_prong`; background
//! jets (label 0) have a single, wider core. All constituents are massless.
//!
//! One record per line:
//!
//! ```text
//! {"label":1,"event_id":7,"particles":[[E,px,py,pz],...]}
//! ```
//!
//! `event_id` is omitted for jets that do not belong to an event. Numbers are
//! written in their shortest round-tripping decimal form (at most 17
//! significant digits), so a write/read cycle is lossless.

use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kinematics::{delta_r, to_kinvec, FourMomentum, KinVec};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("line {line}: {reason}")]
    Schema { line: usize, reason: String },
    #[error("invalid generator config: {0}")]
    Config(String),
}

impl DataError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        DataError::Io { path: path.display().to_string(), source }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JetRecord {
    pub label: u8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub event_id: Option<u64>,
    #[serde(with = "particle_arrays")]
    pub particles: Vec<FourMomentum>,
}

mod particle_arrays {
    use super::FourMomentum;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(ps: &[FourMomentum], s: S) -> Result<S::Ok, S::Error> {
        let arrays: Vec<[f64; 4]> = ps.iter().map(|p| p.to_array()).collect();
        arrays.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<FourMomentum>, D::Error> {
        let arrays = Vec::<[f64; 4]>::deserialize(d)?;
        Ok(arrays.into_iter().map(FourMomentum::from).collect())
    }
}

impl JetRecord {
    /// Checks the record invariants: binary label, at least one particle,
    /// every particle physical (`E >= |p| (1 - 1e-9)`).
    pub fn validate(&self) -> Result<(), String> {
        if self.label > 1 {
            return Err(format!("label must be 0 or 1, got {}", self.label));
        }
        if self.particles.is_empty() {
            return Err("jet has no particles".into());
        }
        for (i, p) in self.particles.iter().enumerate() {
            let pabs = p.p2().sqrt();
            if !p.to_array().iter().all(|v| v.is_finite()) || p.e < pabs * (1.0 - 1e-9) {
                return Err(format!("particle {i} is not physical: {:?}", p.to_array()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    pub n_jets: usize,
    pub min_constituents: usize,
    pub max_constituents: usize,
    pub min_prong_dr: f64,
    pub max_prong_dr: f64,
    /// Gaussian angular width around each signal prong axis.
    pub signal_smear: f64,
    /// Gaussian angular width around the background core.
    pub background_smear: f64,
    /// Mean of the exponential constituent pt spectrum, GeV.
    pub pt_mean: f64,
    /// Jet axes are drawn with `|eta| < max_axis_eta`.
    pub max_axis_eta: f64,
    /// Group consecutive jets into events of this size; 0 disables events.
    pub jets_per_event: usize,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            n_jets: 1000,
            min_constituents: 8,
            max_constituents: 40,
            min_prong_dr: 0.4,
            max_prong_dr: 1.0,
            signal_smear: 0.1,
            background_smear: 0.2,
            pt_mean: 20.0,
            max_axis_eta: 1.5,
            jets_per_event: 0,
            seed: 0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: &str| Err(DataError::Config(m.into()));
        if self.min_constituents < 2 || self.min_constituents > self.max_constituents {
            return bad("constituent range must satisfy 2 <= min_constituents <= max_constituents");
        }
        if !(self.min_prong_dr > 0.0 && self.min_prong_dr <= self.max_prong_dr) {
            return bad("prong separation range must satisfy 0 < min_prong_dr <= max_prong_dr");
        }
        if !(self.signal_smear > 0.0 && self.background_smear > 0.0 && self.pt_mean > 0.0) {
            return bad("smear widths and pt_mean must be positive");
        }
        if !(self.max_axis_eta >= 0.0) {
            return bad("max_axis_eta must be non-negative");
        }
        Ok(())
    }
}

/// Generator-side truth that is not written to disk.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JetTruth {
    pub axis: KinVec,
    /// Prong separation for signal jets.
    pub prong_dr: Option<f64>,
}

/// Smallest allowed `dR` between two constituents of one jet.
pub const MIN_PAIR_DR: f64 = 1e-6;

pub fn gen_jet(label: u8, cfg: &GenConfig, rng: &mut ChaCha8Rng) -> JetRecord {
    gen_jet_with_truth(label, cfg, rng).0
}

pub fn gen_jet_with_truth(label: u8, cfg: &GenConfig, rng: &mut ChaCha8Rng) -> (JetRecord, JetTruth) {
    let n = rng.random_range(cfg.min_constituents..=cfg.max_constituents);
    let axis_eta = if cfg.max_axis_eta > 0.0 { rng.random_range(-cfg.max_axis_eta..cfg.max_axis_eta) } else { 0.0 };
    let axis_phi = rng.random_range(-PI..PI);
    let spectrum = Exp::new(1.0 / cfg.pt_mean).expect("positive rate");
    let mut pts: Vec<f64> = (0..n).map(|_| spectrum.sample(rng) + 1e-3).collect();

    // (eta, phi) centre and width for every constituent
    let mut centres = Vec::with_capacity(n);
    let prong_dr = if label == 1 {
        let dr = rng.random_range(cfg.min_prong_dr..=cfg.max_prong_dr);
        let theta = rng.random_range(0.0..2.0 * PI);
        let (dx, dy) = (0.5 * dr * theta.cos(), 0.5 * dr * theta.sin());
        let share = rng.random_range(0.3..=0.7);
        let n1 = ((share * n as f64).round() as usize).clamp(1, n - 1);
        let (first, second): (f64, f64) = (pts[..n1].iter().sum(), pts[n1..].iter().sum());
        let total = first + second;
        for (i, pt) in pts.iter_mut().enumerate() {
            if i < n1 {
                *pt *= share * total / first;
                centres.push((axis_eta + dx, axis_phi + dy, cfg.signal_smear));
            } else {
                *pt *= (1.0 - share) * total / second;
                centres.push((axis_eta - dx, axis_phi - dy, cfg.signal_smear));
            }
        }
        Some(dr)
    } else {
        centres.resize(n, (axis_eta, axis_phi, cfg.background_smear));
        None
    };

    let mut particles: Vec<FourMomentum> = Vec::with_capacity(n);
    let mut coords: Vec<KinVec> = Vec::with_capacity(n);
    for (&pt, &(ce, cp, width)) in pts.iter().zip(&centres) {
        let smear = Normal::new(0.0, width).expect("positive width");
        loop {
            let eta = ce + smear.sample(rng);
            let phi = cp + smear.sample(rng);
            let p = FourMomentum::massless(pt, eta, phi);
            let k = to_kinvec(p).expect("pt > 0");
            if coords.iter().all(|c| delta_r(c, &k) >= MIN_PAIR_DR) {
                particles.push(p);
                coords.push(k);
                break;
            }
        }
    }
    let axis = KinVec { pt: 0.0, eta: axis_eta, phi: axis_phi, e: 0.0, m: 0.0 };
    (JetRecord { label, event_id: None, particles }, JetTruth { axis, prong_dr })
}

/// Generates `cfg.n_jets` jets with alternating labels (background first),
/// so the classes differ in size by at most one. With `jets_per_event > 0`
/// labels alternate per event instead and all jets of an event share it.
pub fn generate(cfg: &GenConfig) -> Result<Vec<JetRecord>, DataError> {
    Ok(generate_with_truth(cfg)?.into_iter().map(|(r, _)| r).collect())
}

pub fn generate_with_truth(cfg: &GenConfig) -> Result<Vec<(JetRecord, JetTruth)>, DataError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = Vec::with_capacity(cfg.n_jets);
    for i in 0..cfg.n_jets {
        let (label, event_id) = if cfg.jets_per_event > 0 {
            let ev = (i / cfg.jets_per_event) as u64;
            ((ev % 2) as u8, Some(ev))
        } else {
            ((i % 2) as u8, None)
        };
        let (mut rec, truth) = gen_jet_with_truth(label, cfg, &mut rng);
        rec.event_id = event_id;
        out.push((rec, truth));
    }
    Ok(out)
}

pub fn write_jsonl(records: &[JetRecord], path: &Path) -> Result<(), DataError> {
    let file = File::create(path).map_err(|e| DataError::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_jsonl_to(records, &mut w).map_err(|e| DataError::io(path, e))?;
    w.flush().map_err(|e| DataError::io(path, e))
}

pub fn write_jsonl_to<W: Write>(records: &[JetRecord], w: &mut W) -> std::io::Result<()> {
    for rec in records {
        serde_json::to_writer(&mut *w, rec)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<JetRecord>, DataError> {
    let file = File::open(path).map_err(|e| DataError::io(path, e))?;
    read_jsonl_from(BufReader::new(file)).map_err(|e| match e {
        DataError::Io { source, .. } => DataError::io(path, source),
        other => other,
    })
}

/// Parses JSONL from any reader. Blank lines are skipped; line numbers in
/// errors are 1-based.
pub fn read_jsonl_from<R: BufRead>(reader: R) -> Result<Vec<JetRecord>, DataError> {
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|source| DataError::Io { path: "<reader>".into(), source })?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: JetRecord = serde_json::from_str(&line).map_err(|e| {
            let reason = e.to_string();
            if e.is_data() {
                DataError::Schema { line: line_no, reason }
            } else {
                DataError::Parse { line: line_no, reason }
            }
        })?;
        rec.validate().map_err(|reason| DataError::Schema { line: line_no, reason })?;
        out.push(rec);
    }
    Ok(out)
}

/// Per-feature z-score statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Lower bound on the standard deviation used when scaling.
pub const MIN_STD: f64 = 1e-8;

/// Fits mean and (population) standard deviation over feature rows.
///
/// # Panics
/// If `rows` is empty or the rows differ in length.
pub fn standardize_fit<'a>(rows: impl IntoIterator<Item = &'a [f64]> + Clone) -> Standardizer {
    let mut n = 0usize;
    let mut sum: Vec<f64> = Vec::new();
    for row in rows.clone() {
        if sum.is_empty() {
            sum = vec![0.0; row.len()];
        }
        assert_eq!(row.len(), sum.len(), "feature rows differ in length");
        for (s, v) in sum.iter_mut().zip(row) {
            *s += v;
        }
        n += 1;
    }
    assert!(n > 0, "cannot fit standardization on an empty set");
    let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
    let mut sq = vec![0.0; mean.len()];
    for row in rows {
        for ((s, v), m) in sq.iter_mut().zip(row).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    let std = sq.iter().map(|s| (s / n as f64).sqrt()).collect();
    Standardizer { mean, std }
}

impl Standardizer {
    pub fn apply_in_place(&self, row: &mut [f64]) {
        for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
            *v = (*v - m) / s.max(MIN_STD);
        }
    }
}

pub fn standardize_apply(stats: &Standardizer, features: &[f64]) -> Vec<f64> {
    let mut out = features.to_vec();
    stats.apply_in_place(&mut out);
    out
}
