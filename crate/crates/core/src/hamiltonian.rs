//! Nearest-neighbor spin-chain Hamiltonians split into pure bond terms and
//! on-site terms, plus the bond superoperator algebra (trace-Liouvillian
//! maps and their pseudoinverses) used by the derivative machinery.
//!
//! A full two-site term h on (m, m+1) is canonically decomposed as
//! h = k + vL x 1 + 1 x vR with both single-site partial traces of k zero.
//! Only k requires knowledge of marginals one scale up; the on-site parts
//! act inside every window containing the site.

use crate::eig::zheevd;
use crate::error::{Error, Result};
use crate::hermitian::{hermitize, HermitianOperator, SiteRange};
use crate::matutil::{apply_end_superop, superop_matrix, End};
use ndarray::{Array2, ArrayView2};
use num_complex::Complex64 as C64;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::sync::Arc;

pub fn spin_x() -> Array2<C64> {
    ndarray::array![
        [C64::new(0.0, 0.0), C64::new(0.5, 0.0)],
        [C64::new(0.5, 0.0), C64::new(0.0, 0.0)]
    ]
}

pub fn spin_y() -> Array2<C64> {
    ndarray::array![
        [C64::new(0.0, 0.0), C64::new(0.0, -0.5)],
        [C64::new(0.0, 0.5), C64::new(0.0, 0.0)]
    ]
}

pub fn spin_z() -> Array2<C64> {
    ndarray::array![
        [C64::new(0.5, 0.0), C64::new(0.0, 0.0)],
        [C64::new(0.0, 0.0), C64::new(-0.5, 0.0)]
    ]
}

/// Projector onto the spin-up state along x.
pub fn up_x_projector() -> Array2<C64> {
    Array2::from_elem((2, 2), C64::new(0.5, 0.0))
}

/// Mixed-field Ising couplings, in units of J.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct IsingParams {
    pub j: f64,
    pub h_l: f64,
    pub h_t: f64,
}

impl IsingParams {
    /// The quench parameters used throughout: h_L = 0.25 J, h_T = -0.525 J.
    pub fn paper() -> Self {
        IsingParams { j: 1.0, h_l: 0.25, h_t: -0.525 }
    }

    /// Full two-site term J sz sz + (hL (sz+sz) + hT (sx+sx)) / 2.
    pub fn bond_term(&self) -> Array2<C64> {
        let sz = spin_z();
        let sx = spin_x();
        let id = Array2::<C64>::eye(2);
        let mut h = crate::hermitian::kron(&sz.view(), &sz.view());
        h.map_inplace(|z| *z *= self.j);
        let field = {
            let mut f = sz.clone();
            f.map_inplace(|z| *z *= self.h_l);
            let mut fx = sx.clone();
            fx.map_inplace(|z| *z *= self.h_t);
            f + &fx
        };
        let mut side = crate::hermitian::kron(&field.view(), &id.view());
        side = side + &crate::hermitian::kron(&id.view(), &field.view());
        side.map_inplace(|z| *z *= 0.5);
        h + &side
    }
}

/// Precomputed linear maps attached to one pure bond term k: the
/// trace-Liouvillian TL(X) = Tr_end(i[k, X]) on two sites, its
/// Moore-Penrose pseudoinverse, and the derived projectors.
#[derive(Clone)]
pub struct BondMaps {
    /// 4 x 16 (d^2 x d^4): two-site matrix -> one-site matrix.
    pub tl: Array2<C64>,
    /// 16 x 4 pseudoinverse.
    pub tl_pinv: Array2<C64>,
    /// 4 x 4 projector onto im(TL), acting on the surviving end site.
    pub img: Array2<C64>,
    /// 16 x 16 projector onto the orthogonal complement of ker(TL).
    pub q: Array2<C64>,
}

fn pinv_via_gram(a: &Array2<C64>, cutoff_rel: f64) -> Result<Array2<C64>> {
    // A^+ = A^dagger (A A^dagger)^+, with (A A^dagger) small and Hermitian.
    let adag = a.t().map(|z| z.conj());
    let gram = a.dot(&adag);
    let (w, u) = zheevd(&gram)?;
    let wmax = w.iter().fold(0.0f64, |m, &x| m.max(x.abs()));
    let cutoff = cutoff_rel * cutoff_rel * wmax;
    let mut inv = Array2::<C64>::zeros(gram.raw_dim());
    for (j, &wj) in w.iter().enumerate() {
        if wj > cutoff && wj > 0.0 {
            let col = u.column(j);
            let s = 1.0 / wj;
            for r in 0..inv.nrows() {
                for c in 0..inv.ncols() {
                    inv[(r, c)] += col[r] * col[c].conj() * s;
                }
            }
        }
    }
    Ok(adag.dot(&inv))
}

impl BondMaps {
    /// Build the maps for a pure bond term (both partial traces zero),
    /// tracing out the site on `traced` side.
    pub fn build(k: &ArrayView2<C64>, d: usize, traced: End, cutoff_rel: f64) -> Result<Self> {
        let tl = superop_matrix(d * d, d, |x| {
            // Heisenberg direction: i [X, k].
            let xk = x.dot(k);
            let kx = k.dot(x);
            let mut comm = xk;
            comm.zip_mut_with(&kx, |a, b| *a = (*a - *b) * C64::new(0.0, 1.0));
            // trace out the first (Left) or second (Right) site
            let mut out = Array2::<C64>::zeros((d, d));
            for r in 0..d {
                for c in 0..d {
                    let mut acc = C64::default();
                    for t in 0..d {
                        let (i, j) = match traced {
                            End::Left => (t * d + r, t * d + c),
                            End::Right => (r * d + t, c * d + t),
                        };
                        acc += comm[(i, j)];
                    }
                    out[(r, c)] = acc;
                }
            }
            out
        });
        let tl_pinv = pinv_via_gram(&tl, cutoff_rel)?;
        let img = tl.dot(&tl_pinv);
        let q = tl_pinv.dot(&tl);
        Ok(BondMaps { tl, tl_pinv, img, q })
    }
}

/// Nearest-neighbor Hamiltonian, either uniform (defined for every bond,
/// used by infinite-window and translation-invariant evolutions) or finite
/// (explicit bond set; edge sites receive only one half of the field).
#[derive(Clone)]
pub struct Hamiltonian {
    d: usize,
    uniform: bool,
    /// Pure bond part per bond index m (bond couples sites m, m+1).
    k: BTreeMap<i64, Array2<C64>>,
    /// Accumulated on-site term per site.
    v: BTreeMap<i64, Array2<C64>>,
    /// Uniform-mode terms.
    k0: Option<Array2<C64>>,
    v0: Option<Array2<C64>>,
    /// Superop cache shared across clones: maps keyed by (bond, end).
    maps: Arc<BTreeMap<(i64, bool), BondMaps>>,
    maps0: Option<Arc<(BondMaps, BondMaps)>>,
    pinv_cutoff: f64,
}

fn split_bond(h: &Array2<C64>, d: usize) -> (Array2<C64>, Array2<C64>, Array2<C64>) {
    let dd = d as f64;
    let tr: C64 = h.diag().iter().sum();
    // Partial traces of the two-site term.
    let mut tr_r = Array2::<C64>::zeros((d, d));
    let mut tr_l = Array2::<C64>::zeros((d, d));
    for r in 0..d {
        for c in 0..d {
            let mut acc_r = C64::default();
            let mut acc_l = C64::default();
            for t in 0..d {
                acc_r += h[(r * d + t, c * d + t)];
                acc_l += h[(t * d + r, t * d + c)];
            }
            tr_r[(r, c)] = acc_r;
            tr_l[(r, c)] = acc_l;
        }
    }
    let half_scalar = tr / (2.0 * dd);
    let mut v_l = tr_r;
    let mut v_r = tr_l;
    for i in 0..d {
        v_l[(i, i)] -= half_scalar;
        v_r[(i, i)] -= half_scalar;
    }
    v_l.map_inplace(|z| *z /= dd);
    v_r.map_inplace(|z| *z /= dd);
    let id = Array2::<C64>::eye(d);
    let mut k = h.clone();
    k = k - &crate::hermitian::kron(&v_l.view(), &id.view());
    k = k - &crate::hermitian::kron(&id.view(), &v_r.view());
    hermitize(&mut k);
    hermitize(&mut v_l);
    hermitize(&mut v_r);
    (k, v_l, v_r)
}

impl Hamiltonian {
    /// Uniform chain: the same two-site term on every bond. Every site
    /// carries the full on-site term (halves from both adjacent bonds).
    pub fn uniform(d: usize, bond: Array2<C64>) -> Result<Self> {
        let cutoff = 1e-10;
        let (k, v_l, v_r) = split_bond(&bond, d);
        let v = &v_l + &v_r;
        let left = BondMaps::build(&k.view(), d, End::Left, cutoff)?;
        let right = BondMaps::build(&k.view(), d, End::Right, cutoff)?;
        Ok(Hamiltonian {
            d,
            uniform: true,
            k: BTreeMap::new(),
            v: BTreeMap::new(),
            k0: Some(k),
            v0: Some(v),
            maps: Arc::new(BTreeMap::new()),
            maps0: Some(Arc::new((left, right))),
            pinv_cutoff: cutoff,
        })
    }

    /// Finite chain with explicit two-site terms per bond.
    pub fn finite(d: usize, bonds: BTreeMap<i64, Array2<C64>>) -> Result<Self> {
        let cutoff = 1e-10;
        let mut k = BTreeMap::new();
        let mut v: BTreeMap<i64, Array2<C64>> = BTreeMap::new();
        let mut maps = BTreeMap::new();
        for (&m, h) in &bonds {
            let (km, v_l, v_r) = split_bond(h, d);
            maps.insert((m, false), BondMaps::build(&km.view(), d, End::Left, cutoff)?);
            maps.insert((m, true), BondMaps::build(&km.view(), d, End::Right, cutoff)?);
            k.insert(m, km);
            for (site, part) in [(m, v_l), (m + 1, v_r)] {
                v.entry(site).and_modify(|acc| *acc = &*acc + &part).or_insert(part);
            }
        }
        Ok(Hamiltonian {
            d,
            uniform: false,
            k,
            v,
            k0: None,
            v0: None,
            maps: Arc::new(maps),
            maps0: None,
            pinv_cutoff: cutoff,
        })
    }

    pub fn mixed_field_ising_uniform(p: IsingParams) -> Self {
        Hamiltonian::uniform(2, p.bond_term()).expect("ising bond maps")
    }

    /// Finite mixed-field Ising chain on sites [0, n).
    pub fn mixed_field_ising_finite(p: IsingParams, n: usize) -> Self {
        let bond = p.bond_term();
        let bonds: BTreeMap<i64, Array2<C64>> = (0..n as i64 - 1).map(|m| (m, bond.clone())).collect();
        Hamiltonian::finite(2, bonds).expect("ising bond maps")
    }

    pub fn local_dim(&self) -> usize {
        self.d
    }

    pub fn is_uniform(&self) -> bool {
        self.uniform
    }

    pub fn has_bond(&self, m: i64) -> bool {
        self.uniform || self.k.contains_key(&m)
    }

    pub fn k_term(&self, m: i64) -> Option<&Array2<C64>> {
        if self.uniform {
            self.k0.as_ref()
        } else {
            self.k.get(&m)
        }
    }

    pub fn v_term(&self, site: i64) -> Option<&Array2<C64>> {
        if self.uniform {
            self.v0.as_ref()
        } else {
            self.v.get(&site)
        }
    }

    pub fn bond_maps(&self, m: i64, traced: End) -> Option<&BondMaps> {
        if self.uniform {
            self.maps0.as_deref().map(|pair| match traced {
                End::Left => &pair.0,
                End::Right => &pair.1,
            })
        } else {
            self.maps.get(&(m, traced == End::Right))
        }
    }

    /// Full two-site term for a bond, reassembled from the split.
    pub fn bond_operator(&self, m: i64) -> Option<HermitianOperator> {
        let k = self.k_term(m)?;
        let range = SiteRange::from_span(m, 2);
        Some(HermitianOperator::from_parts(range, self.d, k.clone()))
    }

    /// Dense sum of all terms intersecting `range`, with the on-site parts
    /// of the covered sites included. For finite chains covering all bonds
    /// this is the global Hamiltonian.
    pub fn dense_on(&self, range: SiteRange) -> HermitianOperator {
        let dim = range.dim(self.d);
        let mut m = Array2::<C64>::zeros((dim, dim));
        let x = Array2::<C64>::eye(dim);
        self.add_h_times(&range, &x.view(), &mut m);
        hermitize(&mut m);
        HermitianOperator::from_parts(range, self.d, m)
    }

    /// acc += H_range * X for the window-restricted Hamiltonian (internal
    /// bonds and all on-site terms of sites in `range`).
    fn add_h_times(&self, range: &SiteRange, x: &ArrayView2<C64>, acc: &mut Array2<C64>) {
        use crate::matutil::embed_mul_left;
        let a = range.left();
        let b = range.right();
        for m in a..b {
            if let Some(k) = self.k_term(m) {
                let off = (m - a) as usize;
                *acc += &embed_mul_left(&k.view(), off, 2, self.d, x);
            }
        }
        for site in a..=b {
            if let Some(v) = self.v_term(site) {
                let off = (site - a) as usize;
                *acc += &embed_mul_left(&v.view(), off, 1, self.d, x);
            }
        }
    }

    /// Window-restricted Liouvillian in the Heisenberg direction:
    /// L zeta = i sum_m [zeta, k_m] + i sum_site [zeta, v_site], over bonds
    /// and sites inside the range. Applied to a state this is the part of
    /// d zeta / dt generated by the window-internal terms.
    pub fn liouvillian(&self, zeta: &HermitianOperator) -> HermitianOperator {
        use crate::matutil::embed_commutator_i;
        let range = zeta.range();
        let a = range.left();
        let b = range.right();
        let dim = zeta.dim();
        let mut acc = Array2::<C64>::zeros((dim, dim));
        for m in a..b {
            if let Some(k) = self.k_term(m) {
                let off = (m - a) as usize;
                acc -= &embed_commutator_i(&k.view(), off, 2, self.d, &zeta.matrix().view());
            }
        }
        for site in a..=b {
            if let Some(v) = self.v_term(site) {
                let off = (site - a) as usize;
                acc -= &embed_commutator_i(&v.view(), off, 1, self.d, &zeta.matrix().view());
            }
        }
        hermitize(&mut acc);
        HermitianOperator::from_parts(range, self.d, acc)
    }

    /// TL_end zeta: i[k, zeta] with k the edge bond inside zeta's range,
    /// followed by tracing out the edge site. Maps scale l to scale l-1.
    pub fn tl(&self, end: End, zeta: &HermitianOperator) -> Result<HermitianOperator> {
        let range = zeta.range();
        if range.l() < 1 {
            return Err(Error::WindowTooSmall("TL needs at least two sites".into()));
        }
        let bond = match end {
            End::Left => range.left(),
            End::Right => range.right() - 1,
        };
        let maps = self
            .bond_maps(bond, end)
            .ok_or_else(|| Error::WindowTooSmall(format!("no bond at {bond}")))?;
        let out = apply_end_superop(&maps.tl.view(), 2, 1, self.d, end, &zeta.matrix().view());
        let new_range = match end {
            End::Left => range.shrink_left(1),
            End::Right => range.shrink_right(1),
        };
        Ok(HermitianOperator::from_parts(new_range, self.d, out))
    }

    /// Pseudoinverse of `tl`: maps scale l-1 back to scale l, adding one
    /// site on the indicated end (the bond is the edge bond of the target).
    pub fn tl_pinv(&self, end: End, zeta: &HermitianOperator) -> Result<HermitianOperator> {
        let range = zeta.range();
        let (new_range, bond) = match end {
            End::Left => (range.grow_left(1), range.left() - 1),
            End::Right => (range.grow_right(1), range.right()),
        };
        let maps = self
            .bond_maps(bond, end)
            .ok_or_else(|| Error::WindowTooSmall(format!("no bond at {bond}")))?;
        let out = apply_end_superop(&maps.tl_pinv.view(), 1, 2, self.d, end, &zeta.matrix().view());
        Ok(HermitianOperator::from_parts(new_range, self.d, out))
    }

    /// Projector onto im(TL_end), acting on the end site of a scale-(l-1)
    /// object whose absent neighbor bond is `bond`.
    pub fn img_tl(&self, end: End, bond: i64, zeta: &HermitianOperator) -> Result<HermitianOperator> {
        let maps = self
            .bond_maps(bond, end)
            .ok_or_else(|| Error::WindowTooSmall(format!("no bond at {bond}")))?;
        let out = apply_end_superop(&maps.img.view(), 1, 1, self.d, end, &zeta.matrix().view());
        Ok(HermitianOperator::from_parts(zeta.range(), self.d, out))
    }

    /// Projector onto the complement of ker(TL_end), acting on the two end
    /// sites of a scale-l object (the bond is the edge bond inside).
    pub fn q_tl(&self, end: End, zeta: &HermitianOperator) -> Result<HermitianOperator> {
        let range = zeta.range();
        let bond = match end {
            End::Left => range.left(),
            End::Right => range.right() - 1,
        };
        let maps = self
            .bond_maps(bond, end)
            .ok_or_else(|| Error::WindowTooSmall(format!("no bond at {bond}")))?;
        let out = apply_end_superop(&maps.q.view(), 2, 2, self.d, end, &zeta.matrix().view());
        Ok(HermitianOperator::from_parts(range, self.d, out))
    }

    pub fn pinv_cutoff(&self) -> f64 {
        self.pinv_cutoff
    }
}
