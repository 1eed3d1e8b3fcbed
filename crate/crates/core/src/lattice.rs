//! The information lattice: irreducible information per position and
//! scale, its gradient, and the four directed local currents with their
//! per-scale totals.
//!
//! Values are reported in bits. A point (nu, l) holds the information in
//! the segment of diameter l centered at nu/2 that is not present in any
//! proper sub-segment:
//!   i^0 = I(site),  i^1 = mutual information of the two sites,
//!   i^l = I(C^l) - I(C^{l-1}_left) - I(C^{l-1}_right) + I(C^{l-2}).

use crate::error::{Error, Result};
use crate::hamiltonian::Hamiltonian;
use crate::hermitian::{
    trace_inner, von_neumann_information, HermitianOperator, EIG_FLOOR, LN_2,
};
use crate::local_state::{BoundaryMode, OperatorWindow};
use crate::matutil::embed_commutator_i;
use std::collections::BTreeMap;

/// Marginal windows of one state at every scale from `top` down to 0.
pub struct MarginalTower {
    levels: Vec<OperatorWindow>,
}

impl MarginalTower {
    /// Build by repeated tracing from the given window.
    pub fn from_window(top: &OperatorWindow) -> Result<Self> {
        let mut levels = Vec::with_capacity(top.scale() as usize + 1);
        levels.push(top.clone());
        let mut cur = top.clone();
        while cur.scale() > 0 {
            cur = cur.trace_step()?;
            levels.push(cur.clone());
        }
        levels.reverse();
        Ok(MarginalTower { levels })
    }

    pub fn top_scale(&self) -> i64 {
        self.levels.len() as i64 - 1
    }

    pub fn level(&self, scale: i64) -> Option<&OperatorWindow> {
        if scale < 0 {
            return None;
        }
        self.levels.get(scale as usize)
    }

    pub fn marginal(&self, scale: i64, nu: i64) -> Option<&HermitianOperator> {
        self.level(scale).and_then(|w| w.element_at_nu(nu))
    }

    pub fn is_translation_invariant(&self) -> bool {
        self.levels[0].boundary() == BoundaryMode::TranslationInvariant
    }
}

/// Mutual information I(A;B) = I(AB) - I(A) - I(B) in bits, for disjoint
/// A and B whose union is the range of `rho_ab`. The provided marginals
/// are checked against the joint state.
pub fn mutual_information(
    rho_ab: &HermitianOperator,
    rho_a: &HermitianOperator,
    rho_b: &HermitianOperator,
) -> Result<f64> {
    for part in [rho_a, rho_b] {
        let from_joint = rho_ab.partial_trace(part.range())?;
        let defect = from_joint.sub(part)?.max_abs();
        if defect > 1e-8 {
            return Err(Error::InconsistentMarginals(defect));
        }
    }
    let mi = von_neumann_information(rho_ab)? - von_neumann_information(rho_a)? - von_neumann_information(rho_b)?;
    if mi < -1e-10 {
        return Err(Error::NumericalHealth(format!("negative mutual information {mi:.3e}")));
    }
    Ok(mi.max(0.0))
}

/// Information values on the lattice, keyed by (l, nu).
#[derive(Clone, Debug)]
pub struct InfoLattice {
    values: BTreeMap<(i64, i64), f64>,
    translation_invariant: bool,
}

impl InfoLattice {
    /// Assemble from a marginal tower. Values in [-neg_tol, 0) are clamped
    /// to zero; anything below -neg_tol is a numerical-health error.
    pub fn from_tower(tower: &MarginalTower, neg_tol: f64) -> Result<Self> {
        // Information of every marginal, then the four-term combination.
        let top = tower.top_scale();
        let mut info: Vec<BTreeMap<i64, f64>> = Vec::with_capacity(top as usize + 1);
        for s in 0..=top {
            let w = tower.level(s).unwrap();
            let mut m = BTreeMap::new();
            for k in 0..w.len() {
                m.insert(w.nu_of(k), von_neumann_information(w.element(k))?);
            }
            info.push(m);
        }
        let ti = tower.is_translation_invariant();
        let mut values = BTreeMap::new();
        for s in 0..=top {
            let level = &info[s as usize];
            for (&nu, &i_l) in level {
                let v = if s == 0 {
                    i_l
                } else if ti {
                    let low = &info[s as usize - 1];
                    let &i_lm1 = low.values().next().unwrap();
                    let i_lm2 = if s >= 2 {
                        *info[s as usize - 2].values().next().unwrap()
                    } else {
                        0.0
                    };
                    i_l - 2.0 * i_lm1 + i_lm2
                } else {
                    let low = &info[s as usize - 1];
                    let (left, right) = match (low.get(&(nu - 1)), low.get(&(nu + 1))) {
                        (Some(&a), Some(&b)) => (a, b),
                        _ => continue,
                    };
                    let i_lm2 = if s >= 2 {
                        match info[s as usize - 2].get(&nu) {
                            Some(&x) => x,
                            None => continue,
                        }
                    } else {
                        0.0
                    };
                    i_l - left - right + i_lm2
                };
                let v = if v < 0.0 {
                    if v < -neg_tol {
                        return Err(Error::NumericalHealth(format!(
                            "information lattice value {v:.3e} at (nu={nu}, l={s})"
                        )));
                    }
                    0.0
                } else {
                    v
                };
                values.insert((s, nu), v);
            }
        }
        Ok(InfoLattice { values, translation_invariant: ti })
    }

    pub fn value(&self, nu: i64, l: i64) -> Option<f64> {
        if self.translation_invariant {
            return self.values.range((l, i64::MIN)..=(l, i64::MAX)).next().map(|(_, &v)| v);
        }
        self.values.get(&(l, nu)).copied()
    }

    pub fn is_translation_invariant(&self) -> bool {
        self.translation_invariant
    }

    pub fn iter(&self) -> impl Iterator<Item = ((i64, i64), f64)> + '_ {
        self.values.iter().map(|(&k, &v)| (k, v))
    }

    pub fn max_scale(&self) -> i64 {
        self.values.keys().map(|&(l, _)| l).max().unwrap_or(-1)
    }

    /// Total information at one scale. For translation-invariant lattices
    /// this is the per-site value.
    pub fn scale_total(&self, l: i64) -> f64 {
        self.values.range((l, i64::MIN)..=(l, i64::MAX)).map(|(_, &v)| v).sum()
    }

    /// Sum of every lattice value; equals I(rho) when the lattice covers
    /// the whole state.
    pub fn total(&self) -> f64 {
        self.values.values().sum()
    }

    /// Triangle sum: all values on sub-segments of C(nu, l); reproduces
    /// I(C_n^l) by the telescoping identity.
    pub fn triangle_sum(&self, nu: i64, l: i64) -> Result<f64> {
        let mut acc = 0.0;
        for lp in 0..=l {
            if self.translation_invariant {
                let v = self
                    .value(0, lp)
                    .ok_or_else(|| Error::Config(format!("missing lattice scale {lp}")))?;
                acc += v * (l - lp + 1) as f64;
            } else {
                for step in 0..=(l - lp) {
                    let nup = nu - (l - lp) + 2 * step;
                    let v = self
                        .values
                        .get(&(lp, nup))
                        .ok_or_else(|| Error::Config(format!("missing lattice value (nu={nup}, l={lp})")))?;
                    acc += v;
                }
            }
        }
        Ok(acc)
    }
}

/// Gradient of i_n^l with respect to the top-scale marginal, as an
/// operator on C_n^l, in nats:
/// ln rho_l + ln rho_{l-2} - ln rho_{l-1,left} - ln rho_{l-1,right},
/// the smaller logs identity-embedded. Scales below zero are absent.
pub fn info_gradient(tower: &MarginalTower, nu: i64, l: i64, floor: f64) -> Result<HermitianOperator> {
    let rho_l = tower
        .marginal(l, nu)
        .ok_or_else(|| Error::Config(format!("missing marginal (nu={nu}, l={l})")))?;
    let range = rho_l.range();
    let mut grad = rho_l.matrix_log(floor)?;
    if l >= 1 {
        let left = tower
            .marginal(l - 1, nu - 1)
            .ok_or_else(|| Error::Config(format!("missing marginal (nu={}, l={})", nu - 1, l - 1)))?;
        let right = tower
            .marginal(l - 1, nu + 1)
            .ok_or_else(|| Error::Config(format!("missing marginal (nu={}, l={})", nu + 1, l - 1)))?;
        // Stored representatives of translation-invariant towers sit at a
        // fixed position; align each log with its sub-window explicitly.
        let lg = left.matrix_log(floor)?.with_range(range.shrink_right(1))?.embed(range)?;
        grad.add_scaled(&lg, -1.0)?;
        let rg = right.matrix_log(floor)?.with_range(range.shrink_left(1))?.embed(range)?;
        grad.add_scaled(&rg, -1.0)?;
    }
    if l >= 2 {
        let mid = tower
            .marginal(l - 2, nu)
            .ok_or_else(|| Error::Config(format!("missing marginal (nu={nu}, l={})", l - 2)))?;
        let mg = mid
            .matrix_log(floor)?
            .with_range(range.shrink_left(1).shrink_right(1))?
            .embed(range)?;
        grad.add_scaled(&mg, 1.0)?;
    }
    Ok(grad)
}

/// One lattice point's four incoming currents, in bits per unit time.
/// `None` marks channels whose neighborhood is outside the window
/// (boundary policy); structurally absent Hamiltonian bonds give zero.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct CurrentEntry {
    pub down_left: Option<f64>,
    pub down_right: Option<f64>,
    pub up_left: Option<f64>,
    pub up_right: Option<f64>,
}

impl CurrentEntry {
    /// d i / dt as the sum of available channels.
    pub fn divergence(&self) -> Option<f64> {
        match (self.down_left, self.down_right, self.up_left, self.up_right) {
            (Some(a), Some(b), Some(c), Some(d)) => Some(a + b + c + d),
            _ => None,
        }
    }

    /// Outgoing current into the two points one scale up.
    pub fn upward_out(&self) -> Option<f64> {
        match (self.up_left, self.up_right) {
            (Some(a), Some(b)) => Some(-(a + b)),
            _ => None,
        }
    }
}

/// Directed local currents at one scale plus totals.
#[derive(Clone, Debug)]
pub struct CurrentField {
    pub scale: i64,
    pub entries: BTreeMap<i64, CurrentEntry>,
    translation_invariant: bool,
}

impl CurrentField {
    /// Total current from this scale to the next, summed over interior
    /// positions with complete upward channels. `None` if no position
    /// qualifies.
    pub fn total_upward(&self) -> Option<f64> {
        let mut acc = 0.0;
        let mut any = false;
        for e in self.entries.values() {
            if let Some(v) = e.upward_out() {
                acc += v;
                any = true;
            }
        }
        if self.translation_invariant {
            // One representative element: the sum is already per site.
        }
        any.then_some(acc)
    }

    /// Total upward current per position (the per-site current of
    /// translation-invariant windows).
    pub fn per_site_upward(&self) -> Option<f64> {
        let count = self.entries.values().filter(|e| e.upward_out().is_some()).count();
        self.total_upward().map(|t| t / count.max(1) as f64)
    }

    pub fn is_translation_invariant(&self) -> bool {
        self.translation_invariant
    }
}

/// The four directed currents into every point of one scale.
///
/// Orientation: the bond at the left edge inside C_n^l drives the current
/// from the right sub-segment, j_{(n+1/2, l-1) -> (n,l)}, and mirrored for
/// the right edge; the bonds sticking out drive the currents from scale
/// l+1. Only the pure bond parts contribute (on-site terms commute
/// through every containing window).
pub fn local_currents(tower: &MarginalTower, ham: &Hamiltonian, l: i64) -> Result<CurrentField> {
    let level = tower
        .level(l)
        .ok_or_else(|| Error::Config(format!("tower lacks scale {l}")))?;
    let d = level.local_dim();
    let ti = tower.is_translation_invariant();
    let mut entries = BTreeMap::new();
    for k in 0..level.len() {
        let nu = level.nu_of(k);
        let grad = info_gradient(tower, nu, l, EIG_FLOOR)?;
        let rho_l = level.element(k);
        let range = rho_l.range();
        let a = range.left();
        let b = range.right();
        let mut entry = CurrentEntry::default();

        // Down currents: commutators with the edge bonds inside C_n^l.
        if l >= 1 {
            entry.down_right = Some(bond_current(ham, rho_l, a, &grad, d)?);
            entry.down_left = Some(bond_current(ham, rho_l, b - 1, &grad, d)?);
        } else {
            entry.down_left = Some(0.0);
            entry.down_right = Some(0.0);
        }

        // Up currents: commutators with the sticking-out bonds, evaluated
        // on the scale-(l+1) marginals and traced back down.
        entry.up_left = up_current(tower, ham, l, nu, -1, &grad, d)?;
        entry.up_right = up_current(tower, ham, l, nu, 1, &grad, d)?;
        entries.insert(nu, entry);
    }
    Ok(CurrentField { scale: l, entries, translation_invariant: ti })
}

fn bond_current(
    ham: &Hamiltonian,
    rho: &HermitianOperator,
    bond: i64,
    grad: &HermitianOperator,
    d: usize,
) -> Result<f64> {
    let k = match ham.k_term(bond) {
        Some(k) => k,
        None => return Ok(0.0),
    };
    let off = (bond - rho.range().left()) as usize;
    // i [rho, k]: the Heisenberg-direction contribution of this bond.
    let comm = embed_commutator_i(&k.view(), off, 2, d, &rho.matrix().view());
    let comm = HermitianOperator::from_parts(rho.range(), d, comm);
    Ok(-trace_inner(grad, &comm)? / LN_2)
}

fn up_current(
    tower: &MarginalTower,
    ham: &Hamiltonian,
    l: i64,
    nu: i64,
    side: i64,
    grad: &HermitianOperator,
    d: usize,
) -> Result<Option<f64>> {
    let upper = match tower.marginal(l + 1, nu + side) {
        Some(x) => x,
        None => return Ok(None),
    };
    // Geometry relative to the stored upper element (translation-invariant
    // towers store a representative whose absolute position stands in for
    // every position).
    let urange = upper.range();
    let bond = if side < 0 { urange.left() } else { urange.right() - 1 };
    let k = match ham.k_term(bond) {
        Some(k) => k,
        None => return Ok(Some(0.0)),
    };
    let off = (bond - urange.left()) as usize;
    let comm = embed_commutator_i(&k.view(), off, 2, d, &upper.matrix().view());
    let comm = HermitianOperator::from_parts(urange, d, comm);
    // Trace the commutator down onto the window of (nu, l): the sub-range
    // of the upper window sharing the opposite edge.
    let keep = if side < 0 { urange.shrink_left(1) } else { urange.shrink_right(1) };
    let traced = comm.partial_trace(keep)?;
    let traced = traced.with_range(grad.range())?;
    Ok(Some(-trace_inner(grad, &traced)? / LN_2))
}
