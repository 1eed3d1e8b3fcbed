//! Brute-force ground truth: dense evolution of the full density matrix on
//! small chains, exact marginal windows, exact information lattices, and
//! finite-difference currents. The verification backbone for every other
//! module.

use crate::error::{Error, Result};
use crate::hamiltonian::{up_x_projector, Hamiltonian, IsingParams};
use crate::hermitian::{hermitize, HermitianOperator, SiteRange, Spectrum};
use crate::lattice::{InfoLattice, MarginalTower};
use crate::local_state::{BoundaryMode, OperatorWindow};
use ndarray::Array2;
use num_complex::Complex64 as C64;
use serde::{Deserialize, Serialize};

pub const MAX_DENSE_SITES: usize = 12;

/// Which quench initial state to build.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QuenchKind {
    /// Homogeneous product state rho_n = 2/3 |up><up| + 1/3 |down><down|.
    Quench1,
    /// Maximally mixed everywhere except one site polarized along +x.
    Quench2,
}

/// The mixed-field Ising chain on `n` sites with the symmetric on-site
/// split (half of each field term on each adjacent bond).
pub fn build_hamiltonian(params: IsingParams, n: usize) -> Result<(Hamiltonian, HermitianOperator)> {
    if n > MAX_DENSE_SITES {
        return Err(Error::Config(format!("dense oracle capped at {MAX_DENSE_SITES} sites, got {n}")));
    }
    if n < 2 {
        return Err(Error::Config("need at least two sites".into()));
    }
    let ham = Hamiltonian::mixed_field_ising_finite(params, n);
    let dense = ham.dense_on(SiteRange::from_span(0, n));
    Ok((ham, dense))
}

/// Product initial state for the two quenches on a finite chain; the
/// quench-2 up-x site sits at `n0 = n / 2`.
pub fn initial_state(kind: QuenchKind, n: usize) -> Result<HermitianOperator> {
    if n > MAX_DENSE_SITES {
        return Err(Error::Config(format!("dense oracle capped at {MAX_DENSE_SITES} sites, got {n}")));
    }
    let site = |k: usize| -> Array2<C64> {
        match kind {
            QuenchKind::Quench1 => {
                let mut m = Array2::<C64>::zeros((2, 2));
                m[(0, 0)] = C64::new(2.0 / 3.0, 0.0);
                m[(1, 1)] = C64::new(1.0 / 3.0, 0.0);
                m
            }
            QuenchKind::Quench2 => {
                if k == n / 2 {
                    up_x_projector()
                } else {
                    Array2::from_diag_elem(2, C64::new(0.5, 0.0))
                }
            }
        }
    };
    let mut rho = HermitianOperator::new(SiteRange::from_span(0, 1), 2, site(0))?;
    for k in 1..n {
        let next = HermitianOperator::new(SiteRange::from_span(k as i64, 1), 2, site(k))?;
        rho = rho.tensor(&next)?;
    }
    Ok(rho)
}

/// Single-site density matrix of the quench-1 product state.
pub fn quench1_site() -> HermitianOperator {
    let mut m = Array2::<C64>::zeros((2, 2));
    m[(0, 0)] = C64::new(2.0 / 3.0, 0.0);
    m[(1, 1)] = C64::new(1.0 / 3.0, 0.0);
    HermitianOperator::new(SiteRange::from_span(0, 1), 2, m).unwrap()
}

/// Exact propagator rho(t) = e^{-iHt} rho e^{iHt} via one spectral
/// decomposition of H.
pub struct Propagator {
    spec: Spectrum,
    range: SiteRange,
    d: usize,
}

impl Propagator {
    pub fn new(h: &HermitianOperator) -> Result<Self> {
        Ok(Propagator { spec: h.eig()?, range: h.range(), d: h.local_dim() })
    }

    pub fn evolve(&self, rho0: &HermitianOperator, t: f64) -> Result<HermitianOperator> {
        if rho0.range() != self.range {
            return Err(Error::RangeMismatch(rho0.range().to_string(), self.range.to_string()));
        }
        let u = &self.spec.vectors;
        let udag = u.t().map(|z| z.conj());
        // In the energy eigenbasis the propagator is a phase sandwich.
        let mut m = udag.dot(rho0.matrix()).dot(u);
        let n = m.nrows();
        for i in 0..n {
            for j in 0..n {
                let phase = -(self.spec.eigenvalues[i] - self.spec.eigenvalues[j]) * t;
                m[(i, j)] *= C64::from_polar(1.0, phase);
            }
        }
        let mut out = u.dot(&m).dot(&udag);
        hermitize(&mut out);
        Ok(HermitianOperator::new(self.range, self.d, out)?)
    }

    /// d rho / dt = i [rho, H].
    pub fn derivative(&self, rho: &HermitianOperator) -> Result<HermitianOperator> {
        let h = HermitianOperator::new(self.range, self.d, self.spec.reconstruct())?;
        crate::hermitian::commutator_i(rho, &h)
    }
}

/// All scale-l marginals of a state on a finite chain, as a window.
pub fn marginals(rho: &HermitianOperator, l: i64) -> Result<OperatorWindow> {
    let range = rho.range();
    if l < 0 || l > range.l() {
        return Err(Error::Config(format!("scale {l} outside chain of diameter {}", range.l())));
    }
    let count = (range.l() - l + 1) as usize;
    let mut elements = Vec::with_capacity(count);
    for k in 0..count {
        let keep = SiteRange::from_span(range.left() + k as i64, l as usize + 1);
        elements.push(rho.partial_trace(keep)?);
    }
    OperatorWindow::new(BoundaryMode::Finite, elements)
}

/// The complete marginal tower of a dense state.
pub fn tower(rho: &HermitianOperator) -> Result<MarginalTower> {
    let top = OperatorWindow::new(BoundaryMode::Finite, vec![rho.clone()])?;
    MarginalTower::from_window(&top)
}

/// Exact information lattice of a dense state.
pub fn exact_lattice(rho: &HermitianOperator) -> Result<InfoLattice> {
    InfoLattice::from_tower(&tower(rho)?, 1e-9)
}
