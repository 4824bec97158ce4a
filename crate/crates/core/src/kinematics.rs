//! Four-momentum arithmetic, collider coordinates and the per-node feature map.
//!
//! Every tree node carries a [`FourMomentum`] `(E, px, py, pz)` in GeV. The
//! clustering distance and the embedding inputs are computed from its
//! `(pt, eta, phi)` view, [`KinVec`].

use std::f64::consts::PI;
use std::ops::{Add, AddAssign};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Pseudorapidity reported for particles travelling along the beam axis.
pub const ETA_MAX: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum KinematicsError {
    #[error("four-momentum has all components equal to zero")]
    ZeroMomentum,
    /// `pt = 0` with `pz != 0`. The clamped coordinates are still available.
    #[error("pseudorapidity overflow (pt = 0, pz = {pz}); clamped to {:+}", clamped.eta)]
    EtaOverflow { pz: f64, clamped: KinVec },
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct FourMomentum {
    pub e: f64,
    pub px: f64,
    pub py: f64,
    pub pz: f64,
}

impl FourMomentum {
    pub const ZERO: FourMomentum = FourMomentum { e: 0.0, px: 0.0, py: 0.0, pz: 0.0 };

    pub const fn new(e: f64, px: f64, py: f64, pz: f64) -> Self {
        Self { e, px, py, pz }
    }

    /// Massless momentum with the given transverse momentum and direction.
    pub fn massless(pt: f64, eta: f64, phi: f64) -> Self {
        let px = pt * phi.cos();
        let py = pt * phi.sin();
        let pz = pt * eta.sinh();
        let p = (px * px + py * py + pz * pz).sqrt();
        Self { e: p, px, py, pz }
    }

    pub fn pt2(&self) -> f64 {
        self.px * self.px + self.py * self.py
    }

    pub fn pt(&self) -> f64 {
        self.pt2().sqrt()
    }

    pub fn p2(&self) -> f64 {
        self.pt2() + self.pz * self.pz
    }

    /// Invariant mass squared; may be slightly negative for massless rounding.
    pub fn m2(&self) -> f64 {
        self.e * self.e - self.p2()
    }

    pub fn is_zero(&self) -> bool {
        self.e == 0.0 && self.px == 0.0 && self.py == 0.0 && self.pz == 0.0
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.e, self.px, self.py, self.pz]
    }
}

impl From<[f64; 4]> for FourMomentum {
    fn from([e, px, py, pz]: [f64; 4]) -> Self {
        Self { e, px, py, pz }
    }
}

impl Add for FourMomentum {
    type Output = FourMomentum;

    fn add(self, rhs: FourMomentum) -> FourMomentum {
        recombine(self, rhs)
    }
}

impl AddAssign for FourMomentum {
    fn add_assign(&mut self, rhs: FourMomentum) {
        *self = recombine(*self, rhs);
    }
}

impl std::iter::Sum for FourMomentum {
    fn sum<I: Iterator<Item = FourMomentum>>(iter: I) -> Self {
        iter.fold(FourMomentum::ZERO, recombine)
    }
}

/// Collider coordinates of a four-momentum.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct KinVec {
    pub pt: f64,
    pub eta: f64,
    /// Azimuth in `(-pi, pi]`.
    pub phi: f64,
    pub e: f64,
    pub m: f64,
}

/// Wraps an angle difference into `(-pi, pi]`.
pub fn wrap_phi(dphi: f64) -> f64 {
    let mut d = dphi;
    if d > PI || d <= -PI {
        d -= 2.0 * PI * (d / (2.0 * PI)).round();
        // round() can land on the excluded -pi edge
        if d <= -PI {
            d += 2.0 * PI;
        } else if d > PI {
            d -= 2.0 * PI;
        }
    }
    d
}

fn azimuth(px: f64, py: f64) -> f64 {
    if px == 0.0 && py == 0.0 {
        return 0.0;
    }
    let phi = py.atan2(px);
    // atan2 returns -pi for (negative, -0.0)
    if phi <= -PI {
        PI
    } else {
        phi
    }
}

/// Converts to `(pt, eta, phi, E, m)`.
///
/// Rest-frame momenta (`pt = pz = 0`, `E != 0`) map to `eta = phi = 0`.
/// Momenta along the beam axis report [`KinematicsError::EtaOverflow`] with
/// `eta` clamped to `±ETA_MAX`.
pub fn to_kinvec(p: FourMomentum) -> Result<KinVec, KinematicsError> {
    if p.is_zero() {
        return Err(KinematicsError::ZeroMomentum);
    }
    let pt = p.pt();
    let phi = azimuth(p.px, p.py);
    let m = p.m2().max(0.0).sqrt();
    if pt == 0.0 {
        if p.pz == 0.0 {
            return Ok(KinVec { pt, eta: 0.0, phi: 0.0, e: p.e, m });
        }
        let clamped = KinVec { pt, eta: ETA_MAX.copysign(p.pz), phi, e: p.e, m };
        return Err(KinematicsError::EtaOverflow { pz: p.pz, clamped });
    }
    let eta = (p.pz / pt).asinh();
    Ok(KinVec { pt, eta, phi, e: p.e, m })
}

/// Inverse of [`to_kinvec`]; the energy is taken from `k.e`.
pub fn to_fourmomentum(k: KinVec) -> FourMomentum {
    FourMomentum {
        e: k.e,
        px: k.pt * k.phi.cos(),
        py: k.pt * k.phi.sin(),
        pz: k.pt * k.eta.sinh(),
    }
}

pub fn delta_r2(a: &KinVec, b: &KinVec) -> f64 {
    let deta = a.eta - b.eta;
    let dphi = wrap_phi(a.phi - b.phi);
    deta * deta + dphi * dphi
}

pub fn delta_r(a: &KinVec, b: &KinVec) -> f64 {
    delta_r2(a, b).sqrt()
}

/// E-scheme recombination.
pub fn recombine(a: FourMomentum, b: FourMomentum) -> FourMomentum {
    FourMomentum {
        e: a.e + b.e,
        px: a.px + b.px,
        py: a.py + b.py,
        pz: a.pz + b.pz,
    }
}

/// Which kinematic quantities make up a node's feature vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureSet {
    /// `(pt, eta, phi, E, m, E/E_jet, pt/pt_jet)`.
    #[default]
    Standard,
    /// `(|p|, eta, theta, phi, E, pt)`.
    Momentum,
}

impl FeatureSet {
    pub fn len(self) -> usize {
        match self {
            FeatureSet::Standard => 7,
            FeatureSet::Momentum => 6,
        }
    }

    pub fn names(self) -> &'static [&'static str] {
        match self {
            FeatureSet::Standard => &["pt", "eta", "phi", "e", "m", "e_frac", "pt_frac"],
            FeatureSet::Momentum => &["p", "eta", "theta", "phi", "e", "pt"],
        }
    }
}

/// Features of one node, given the totals of the jet it belongs to.
///
/// The first five entries of the standard set, `(pt, eta, phi, E, m)`, double
/// as the jet kinematics fed to the event-level recurrence.
pub fn node_features(node_p: FourMomentum, jet_totals: FourMomentum) -> Result<Vec<f64>, KinematicsError> {
    node_features_with(FeatureSet::Standard, node_p, jet_totals)
}

pub fn node_features_with(
    set: FeatureSet,
    node_p: FourMomentum,
    jet_totals: FourMomentum,
) -> Result<Vec<f64>, KinematicsError> {
    let k = to_kinvec(node_p)?;
    Ok(match set {
        FeatureSet::Standard => {
            let jet_pt = jet_totals.pt();
            let e_frac = if jet_totals.e != 0.0 { k.e / jet_totals.e } else { 0.0 };
            let pt_frac = if jet_pt != 0.0 { k.pt / jet_pt } else { 0.0 };
            vec![k.pt, k.eta, k.phi, k.e, k.m, e_frac, pt_frac]
        }
        FeatureSet::Momentum => {
            let p = node_p.p2().sqrt();
            let theta = k.pt.atan2(node_p.pz);
            vec![p, k.eta, theta, k.phi, k.e, k.pt]
        }
    })
}
