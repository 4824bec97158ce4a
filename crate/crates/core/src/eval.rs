//! ROC curves, AUC and background rejection at a working point.
//!
//! The curve sweeps the unique scores from high to low. It starts at a
//! threshold of `+inf` with `(tpr, fpr) = (0, 0)` and ends at the lowest
//! score with `(1, 1)`. A sample is accepted when `score >= threshold`.
//!
//! The AUC is the Mann-Whitney statistic: the fraction of (signal,
//! background) pairs in which the signal scores higher, ties counting one
//! half. Background rejection is `1 / fpr` at the largest threshold whose
//! signal efficiency reaches the target.

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("ROC needs both classes; got {positives} positives and {negatives} negatives")]
    SingleClass { positives: usize, negatives: usize },
    #[error("{0} scores but {1} labels")]
    LengthMismatch(usize, usize),
    #[error("score {0} is not a number")]
    NanScore(usize),
    #[error("signal efficiency {0} is never reached")]
    UnreachableEfficiency(f64),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("ROC CSV line {line}: {reason}")]
    Format { line: usize, reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    /// Strictly decreasing; the first entry is `+inf`.
    pub thresholds: Vec<f64>,
    pub tpr: Vec<f64>,
    pub fpr: Vec<f64>,
    pub auc: f64,
}

/// Builds the ROC curve of `scores` against binary `labels` (1 = signal).
pub fn roc(scores: &[f64], labels: &[u8]) -> Result<RocCurve, EvalError> {
    if scores.len() != labels.len() {
        return Err(EvalError::LengthMismatch(scores.len(), labels.len()));
    }
    if let Some(i) = scores.iter().position(|s| s.is_nan()) {
        return Err(EvalError::NanScore(i));
    }
    let positives = labels.iter().filter(|&&l| l == 1).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(EvalError::SingleClass { positives, negatives });
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let (np, nn) = (positives as f64, negatives as f64);
    let mut thresholds = vec![f64::INFINITY];
    let mut tpr = vec![0.0];
    let mut fpr = vec![0.0];
    let (mut tp, mut fp) = (0usize, 0usize);
    // Mann-Whitney numerator in half-units: each win counts 2, each tie 1
    let mut wins_x2: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        let (mut grp_p, mut grp_n) = (0usize, 0usize);
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] == 1 {
                grp_p += 1;
            } else {
                grp_n += 1;
            }
            i += 1;
        }
        // positives in this group beat every negative scored strictly lower
        let lower_neg = negatives - fp - grp_n;
        wins_x2 += 2 * (grp_p as u128) * (lower_neg as u128) + (grp_p as u128) * (grp_n as u128);
        tp += grp_p;
        fp += grp_n;
        thresholds.push(s);
        tpr.push(tp as f64 / np);
        fpr.push(fp as f64 / nn);
    }
    let auc = wins_x2 as f64 / (2.0 * np * nn);
    Ok(RocCurve { thresholds, tpr, fpr, auc })
}

pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64, EvalError> {
    Ok(roc(scores, labels)?.auc)
}

/// Background rejection `1 / fpr` at a working point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Rejection {
    Finite { threshold: f64, tpr: f64, fpr: f64, rejection: f64 },
    /// No background passes the chosen threshold.
    NoBackgroundPasses { threshold: f64, tpr: f64 },
}

impl Rejection {
    /// `+inf` for [`Rejection::NoBackgroundPasses`].
    pub fn value(&self) -> f64 {
        match *self {
            Rejection::Finite { rejection, .. } => rejection,
            Rejection::NoBackgroundPasses { .. } => f64::INFINITY,
        }
    }

    pub fn threshold(&self) -> f64 {
        match *self {
            Rejection::Finite { threshold, .. } | Rejection::NoBackgroundPasses { threshold, .. } => threshold,
        }
    }
}

impl fmt::Display for Rejection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Rejection::Finite { rejection, .. } => write!(f, "{rejection}"),
            Rejection::NoBackgroundPasses { .. } => write!(f, "inf (no background passes)"),
        }
    }
}

/// Takes the largest threshold whose tpr reaches `target_eff`; no
/// interpolation between thresholds.
pub fn rejection_at(curve: &RocCurve, target_eff: f64) -> Result<Rejection, EvalError> {
    let k = curve
        .tpr
        .iter()
        .position(|&t| t >= target_eff)
        .ok_or(EvalError::UnreachableEfficiency(target_eff))?;
    let (threshold, tpr, fpr) = (curve.thresholds[k], curve.tpr[k], curve.fpr[k]);
    Ok(if fpr == 0.0 {
        Rejection::NoBackgroundPasses { threshold, tpr }
    } else {
        Rejection::Finite { threshold, tpr, fpr, rejection: 1.0 / fpr }
    })
}

/// Writes `threshold,tpr,fpr` rows in descending threshold order followed by
/// a `# auc,<value>` trailer. Numbers use the shortest round-tripping form.
pub fn export_roc_csv(curve: &RocCurve, path: &Path) -> Result<(), EvalError> {
    let io = |source| EvalError::Io { path: path.display().to_string(), source };
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    write_roc_csv(curve, &mut w).map_err(io)?;
    w.flush().map_err(io)
}

pub fn write_roc_csv<W: Write>(curve: &RocCurve, w: &mut W) -> std::io::Result<()> {
    assert!(!curve.thresholds.is_empty(), "ROC curve has no points");
    assert!(
        curve.thresholds.windows(2).all(|p| p[0] > p[1])
            && curve.tpr.windows(2).all(|p| p[0] <= p[1])
            && curve.fpr.windows(2).all(|p| p[0] <= p[1]),
        "ROC columns are not monotone"
    );
    writeln!(w, "threshold,tpr,fpr")?;
    for ((t, tp), fp) in curve.thresholds.iter().zip(&curve.tpr).zip(&curve.fpr) {
        writeln!(w, "{t},{tp},{fp}")?;
    }
    writeln!(w, "# auc,{}", curve.auc)
}

pub fn read_roc_csv(path: &Path) -> Result<RocCurve, EvalError> {
    let io = |source| EvalError::Io { path: path.display().to_string(), source };
    let reader = BufReader::new(File::open(path).map_err(io)?);
    let mut curve = RocCurve { thresholds: Vec::new(), tpr: Vec::new(), fpr: Vec::new(), auc: f64::NAN };
    let mut saw_auc = false;
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(io)?;
        let line_no = idx + 1;
        let bad = |reason: String| EvalError::Format { line: line_no, reason };
        if idx == 0 {
            if line != "threshold,tpr,fpr" {
                return Err(bad(format!("unexpected header {line:?}")));
            }
            continue;
        }
        if let Some(rest) = line.strip_prefix("# auc,") {
            curve.auc = rest.parse().map_err(|e| bad(format!("{e}")))?;
            saw_auc = true;
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 3 {
            return Err(bad(format!("expected 3 columns, got {}", cols.len())));
        }
        let parse = |s: &str| s.parse::<f64>().map_err(|e| bad(format!("{s:?}: {e}")));
        curve.thresholds.push(parse(cols[0])?);
        curve.tpr.push(parse(cols[1])?);
        curve.fpr.push(parse(cols[2])?);
    }
    if !saw_auc {
        return Err(EvalError::Format { line: 0, reason: "missing `# auc` trailer".into() });
    }
    Ok(curve)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Brute-force pair counting.
    fn pair_auc(scores: &[f64], labels: &[u8]) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for (i, &si) in scores.iter().enumerate() {
            for (j, &sj) in scores.iter().enumerate() {
                if labels[i] == 1 && labels[j] == 0 {
                    den += 1.0;
                    if si > sj {
                        num += 1.0;
                    } else if si == sj {
                        num += 0.5;
                    }
                }
            }
        }
        num / den
    }

    #[test]
    fn worked_auc() {
        let r = roc(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1]).unwrap();
        assert_eq!(r.auc, 0.75);
        assert_eq!(r.thresholds[0], f64::INFINITY);
        assert_eq!((r.tpr[0], r.fpr[0]), (0.0, 0.0));
        assert_eq!((*r.tpr.last().unwrap(), *r.fpr.last().unwrap()), (1.0, 1.0));
    }

    #[test]
    fn separated_and_tied() {
        assert_eq!(auc(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1]).unwrap(), 1.0);
        assert_eq!(auc(&[0.3; 6], &[0, 1, 0, 1, 1, 0]).unwrap(), 0.5);
        assert!(matches!(roc(&[0.1, 0.2], &[1, 1]), Err(EvalError::SingleClass { .. })));
        assert!(matches!(roc(&[0.1], &[1, 0]), Err(EvalError::LengthMismatch(1, 2))));
        assert!(matches!(roc(&[f64::NAN, 0.2], &[1, 0]), Err(EvalError::NanScore(0))));
    }

    #[test]
    fn worked_rejection() {
        let scores = [0.9, 0.8, 0.3, 0.2, 0.85, 0.6, 0.5, 0.1];
        let labels = [1, 1, 1, 1, 0, 0, 0, 0];
        let curve = roc(&scores, &labels).unwrap();
        match rejection_at(&curve, 0.5).unwrap() {
            Rejection::Finite { threshold, fpr, rejection, .. } => {
                assert_eq!((threshold, fpr, rejection), (0.8, 0.25, 4.0));
            }
            other => panic!("{other:?}"),
        }
        assert_eq!(rejection_at(&curve, 1.0).unwrap().threshold(), 0.2);
        assert!(rejection_at(&curve, 1.5).is_err());
    }

    #[test]
    fn no_background_passes() {
        let curve = roc(&[0.9, 0.8, 0.1, 0.2], &[1, 1, 0, 0]).unwrap();
        assert!(matches!(rejection_at(&curve, 0.5).unwrap(), Rejection::NoBackgroundPasses { .. }));
        assert_eq!(rejection_at(&curve, 1.0).unwrap().value(), f64::INFINITY);
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("roc.csv");
        let scores: Vec<f64> = (0..50).map(|i| ((i * 37) % 17) as f64 / 7.0 + 1e-3 / (i + 1) as f64).collect();
        let labels: Vec<u8> = (0..50).map(|i| ((i * 13) % 3 == 0) as u8).collect();
        let curve = roc(&scores, &labels).unwrap();
        export_roc_csv(&curve, &path).unwrap();
        assert_eq!(read_roc_csv(&path).unwrap(), curve);
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("threshold,tpr,fpr\ninf,0,0\n"));
        assert!(text.ends_with(&format!("# auc,{}\n", curve.auc)));
    }

    fn scored() -> impl Strategy<Value = (Vec<f64>, Vec<u8>)> {
        prop::collection::vec((0u8..20, 0u8..2), 2..60)
            .prop_map(|v| {
                let mut v = v;
                v[0].1 = 0;
                v[1].1 = 1;
                (v.iter().map(|(s, _)| *s as f64 / 4.0).collect(), v.iter().map(|(_, l)| *l).collect())
            })
    }

    proptest! {
        #[test]
        fn auc_matches_pair_counting((scores, labels) in scored()) {
            let r = roc(&scores, &labels).unwrap();
            prop_assert!((r.auc - pair_auc(&scores, &labels)).abs() < 1e-12);
            prop_assert!(r.tpr.windows(2).all(|p| p[0] <= p[1]));
            prop_assert!(r.fpr.windows(2).all(|p| p[0] <= p[1]));
            prop_assert!(r.thresholds.windows(2).all(|p| p[0] > p[1]));
        }

        #[test]
        fn invariant_under_monotone_transform((scores, labels) in scored()) {
            let a = roc(&scores, &labels).unwrap();
            let t: Vec<f64> = scores.iter().map(|s| (2.0 * s).exp() - 3.0).collect();
            let b = roc(&t, &labels).unwrap();
            prop_assert_eq!(a.auc, b.auc);
            prop_assert_eq!(&a.tpr, &b.tpr);
            prop_assert_eq!(&a.fpr, &b.fpr);
            for eff in [0.1, 0.5, 0.9] {
                prop_assert_eq!(rejection_at(&a, eff).unwrap().value(), rejection_at(&b, eff).unwrap().value());
            }
        }

        #[test]
        fn rejection_non_increasing((scores, labels) in scored()) {
            let c = roc(&scores, &labels).unwrap();
            let mut last = f64::INFINITY;
            for k in 0..=20 {
                let r = rejection_at(&c, k as f64 / 20.0).unwrap().value();
                prop_assert!(r <= last);
                last = r;
            }
        }
    }
}
