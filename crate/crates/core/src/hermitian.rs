//! Dense Hermitian operator algebra on contiguous site ranges.
//!
//! Everything downstream (marginal windows, information values, recovery
//! maps, derivative policies) is built from the operations here: partial
//! traces, identity embeddings, spectral decompositions, matrix functions,
//! and the entropy/information primitives.
//!
//! Conventions:
//! * site ranges use doubled center coordinates, `nu = 2n`, so half-integer
//!   centers (odd diameters) stay integral;
//! * the leftmost site is the most significant tensor factor;
//! * logarithms are natural internally; bits appear only at reporting
//!   boundaries (divide by ln 2).

use crate::eig::zheevd;
use crate::error::{Error, Result};
use ndarray::{Array2, ArrayView2};
use num_complex::Complex64 as C64;
use serde::{Deserialize, Serialize};
use std::fmt;

/// Default local Hilbert-space dimension (spin-1/2 chains).
pub const DEFAULT_LOCAL_DIM: usize = 2;

/// Hermiticity drift tolerance enforced after every composite operation.
pub const HERMITICITY_TOL: f64 = 1e-12;

/// Default eigenvalue floor applied before logarithms and inverse roots.
pub const EIG_FLOOR: f64 = 1e-12;

pub const LN_2: f64 = std::f64::consts::LN_2;

/// A contiguous line segment of the chain with diameter `l` centered at
/// `nu/2`. Site count is `l + 1`; odd diameters have half-integer centers.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SiteRange {
    nu: i64,
    l: i64,
}

impl SiteRange {
    pub fn new(nu: i64, l: i64) -> Result<Self> {
        if l < 0 || (nu - l).rem_euclid(2) != 0 {
            return Err(Error::BadParity { nu, l });
        }
        Ok(SiteRange { nu, l })
    }

    /// Range covering `count` sites starting at `left`.
    pub fn from_span(left: i64, count: usize) -> Self {
        let l = count as i64 - 1;
        SiteRange { nu: 2 * left + l, l }
    }

    pub fn nu(&self) -> i64 {
        self.nu
    }

    /// Diameter (= site count - 1, also the scale index).
    pub fn l(&self) -> i64 {
        self.l
    }

    pub fn left(&self) -> i64 {
        (self.nu - self.l) / 2
    }

    pub fn right(&self) -> i64 {
        (self.nu + self.l) / 2
    }

    pub fn site_count(&self) -> usize {
        (self.l + 1) as usize
    }

    pub fn dim(&self, d: usize) -> usize {
        d.pow(self.site_count() as u32)
    }

    pub fn contains(&self, other: &SiteRange) -> bool {
        self.left() <= other.left() && other.right() <= self.right()
    }

    /// Drop `k` sites from the left edge.
    pub fn shrink_left(&self, k: usize) -> Self {
        SiteRange::from_span(self.left() + k as i64, self.site_count() - k)
    }

    /// Drop `k` sites from the right edge.
    pub fn shrink_right(&self, k: usize) -> Self {
        SiteRange::from_span(self.left(), self.site_count() - k)
    }

    /// Grow by `k` sites on the left.
    pub fn grow_left(&self, k: usize) -> Self {
        SiteRange::from_span(self.left() - k as i64, self.site_count() + k)
    }

    /// Grow by `k` sites on the right.
    pub fn grow_right(&self, k: usize) -> Self {
        SiteRange::from_span(self.left(), self.site_count() + k)
    }
}

impl fmt::Display for SiteRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "C({}/2,{})=[{},{}]", self.nu, self.l, self.left(), self.right())
    }
}

impl fmt::Debug for SiteRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

/// Eigendecomposition of a Hermitian operator. Eigenvalues ascend; the
/// columns of `vectors` are the eigenvectors.
#[derive(Clone)]
pub struct Spectrum {
    pub eigenvalues: Vec<f64>,
    pub vectors: Array2<C64>,
}

impl Spectrum {
    /// U diag(f(kappa)) U^dagger as a dense matrix.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Array2<C64> {
        // Scale the columns of U by f(kappa), then close with U^dagger.
        let mut scaled = self.vectors.clone();
        for (j, &k) in self.eigenvalues.iter().enumerate() {
            let fv = f(k);
            scaled.column_mut(j).map_inplace(|z| *z *= fv);
        }
        let mut m = scaled.dot(&self.vectors.t().map(|z| z.conj()));
        hermitize(&mut m);
        m
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.eigenvalues.first().copied().unwrap_or(0.0)
    }

    pub fn reconstruct(&self) -> Array2<C64> {
        self.map(|k| k)
    }
}

/// Dense Hermitian matrix on a contiguous site range. The universal value
/// type: states, Hamiltonian terms, gradients, derivatives.
#[derive(Clone)]
pub struct HermitianOperator {
    range: SiteRange,
    d: usize,
    mat: Array2<C64>,
}

pub fn hermitize(m: &mut Array2<C64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let a = m[(i, j)];
            let b = m[(j, i)];
            let avg = (a + b.conj()) * 0.5;
            m[(i, j)] = avg;
            m[(j, i)] = avg.conj();
        }
        m[(i, i)] = C64::new(m[(i, i)].re, 0.0);
    }
}

pub(crate) fn hermiticity_defect(m: &ArrayView2<C64>) -> f64 {
    let n = m.nrows();
    let mut defect = 0.0f64;
    for i in 0..n {
        defect = defect.max(m[(i, i)].im.abs());
        for j in (i + 1)..n {
            defect = defect.max((m[(i, j)] - m[(j, i)].conj()).norm());
        }
    }
    defect
}

impl HermitianOperator {
    /// Wrap a matrix, checking shape and Hermiticity, then re-symmetrizing.
    pub fn new(range: SiteRange, d: usize, mat: Array2<C64>) -> Result<Self> {
        let dim = range.dim(d);
        if mat.nrows() != mat.ncols() {
            return Err(Error::NotSquare(mat.nrows(), mat.ncols()));
        }
        if mat.nrows() != dim {
            return Err(Error::DimensionMismatch { dim: mat.nrows(), sites: range.site_count(), d });
        }
        let defect = hermiticity_defect(&mat.view());
        // Scale tolerance with the matrix magnitude so large Hamiltonian
        // sums are not rejected for benign roundoff.
        let scale = mat.iter().fold(0.0f64, |m, z| m.max(z.norm())).max(1.0);
        if defect > 1e-8 * scale {
            return Err(Error::NotHermitian(defect));
        }
        let mut mat = mat;
        hermitize(&mut mat);
        Ok(HermitianOperator { range, d, mat })
    }

    /// Wrap without checking; used internally where Hermiticity is
    /// guaranteed by construction.
    pub(crate) fn from_parts(range: SiteRange, d: usize, mat: Array2<C64>) -> Self {
        HermitianOperator { range, d, mat }
    }

    pub fn zero(range: SiteRange, d: usize) -> Self {
        let dim = range.dim(d);
        HermitianOperator { range, d, mat: Array2::zeros((dim, dim)) }
    }

    /// Full identity (trace = dim).
    pub fn identity(range: SiteRange, d: usize) -> Self {
        let dim = range.dim(d);
        HermitianOperator { range, d, mat: Array2::eye(dim) }
    }

    /// Identity / dim: the maximally mixed density matrix.
    pub fn maximally_mixed(range: SiteRange, d: usize) -> Self {
        let dim = range.dim(d);
        let mut m = Array2::eye(dim);
        m.map_inplace(|z| *z /= dim as f64);
        HermitianOperator { range, d, mat: m }
    }

    pub fn range(&self) -> SiteRange {
        self.range
    }

    pub fn local_dim(&self) -> usize {
        self.d
    }

    pub fn dim(&self) -> usize {
        self.mat.nrows()
    }

    pub fn matrix(&self) -> &Array2<C64> {
        &self.mat
    }

    pub fn matrix_mut(&mut self) -> &mut Array2<C64> {
        &mut self.mat
    }

    pub fn into_matrix(self) -> Array2<C64> {
        self.mat
    }

    /// Reinterpret the same matrix on a shifted range (same site count).
    pub fn with_range(&self, range: SiteRange) -> Result<Self> {
        if range.site_count() != self.range.site_count() {
            return Err(Error::RangeMismatch(self.range.to_string(), range.to_string()));
        }
        Ok(HermitianOperator { range, d: self.d, mat: self.mat.clone() })
    }

    pub fn trace(&self) -> f64 {
        self.mat.diag().iter().map(|z| z.re).sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.mat.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.mat.iter().fold(0.0f64, |m, z| m.max(z.norm()))
    }

    pub fn scaled(&self, c: f64) -> Self {
        let mut m = self.mat.clone();
        m.map_inplace(|z| *z *= c);
        HermitianOperator { range: self.range, d: self.d, mat: m }
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.check_same_shape(other)?;
        Ok(HermitianOperator { range: self.range, d: self.d, mat: &self.mat + &other.mat })
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.check_same_shape(other)?;
        Ok(HermitianOperator { range: self.range, d: self.d, mat: &self.mat - &other.mat })
    }

    pub fn add_scaled(&mut self, other: &Self, c: f64) -> Result<()> {
        self.check_same_shape(other)?;
        self.mat.zip_mut_with(&other.mat, |a, b| *a += b * c);
        Ok(())
    }

    fn check_same_shape(&self, other: &Self) -> Result<()> {
        if self.range != other.range || self.d != other.d {
            return Err(Error::RangeMismatch(self.range.to_string(), other.range.to_string()));
        }
        Ok(())
    }

    /// Tensor product with an operator on the adjacent range to the right.
    pub fn tensor(&self, right: &Self) -> Result<Self> {
        if right.range.left() != self.range.right() + 1 || self.d != right.d {
            return Err(Error::RangeMismatch(self.range.to_string(), right.range.to_string()));
        }
        let range = SiteRange::from_span(self.range.left(), self.range.site_count() + right.range.site_count());
        Ok(HermitianOperator { range, d: self.d, mat: kron(&self.mat.view(), &right.mat.view()) })
    }

    /// Embed into a larger range, padding missing sites with the full
    /// identity. Suitable for trace pairings and commutators.
    pub fn embed(&self, into: SiteRange) -> Result<Self> {
        self.embed_scaled(into, 1.0)
    }

    /// Embed into a larger range, padding missing sites with identity / d.
    /// Suitable for extending density matrices by maximally mixed sites.
    pub fn embed_mixed(&self, into: SiteRange) -> Result<Self> {
        let pad = (into.site_count() - self.range.site_count()) as i32;
        self.embed_scaled(into, (self.d as f64).powi(-pad))
    }

    fn embed_scaled(&self, into: SiteRange, scale: f64) -> Result<Self> {
        if !into.contains(&self.range) {
            return Err(Error::NotSubRange(self.range.to_string(), into.to_string()));
        }
        let nl = (self.range.left() - into.left()) as usize;
        let nr = (into.right() - self.range.right()) as usize;
        let dl = self.d.pow(nl as u32);
        let dr = self.d.pow(nr as u32);
        let dk = self.dim();
        let dim = dl * dk * dr;
        let mut out = Array2::<C64>::zeros((dim, dim));
        let src = &self.mat;
        for a in 0..dl {
            for k in 0..dk {
                for kp in 0..dk {
                    let v = src[(k, kp)] * scale;
                    if v.norm_sqr() == 0.0 {
                        continue;
                    }
                    for c in 0..dr {
                        let i = (a * dk + k) * dr + c;
                        let j = (a * dk + kp) * dr + c;
                        out[(i, j)] = v;
                    }
                }
            }
        }
        Ok(HermitianOperator { range: into, d: self.d, mat: out })
    }

    /// Partial trace onto a contiguous sub-range. Linear, trace preserving.
    pub fn partial_trace(&self, keep: SiteRange) -> Result<Self> {
        if !self.range.contains(&keep) {
            return Err(Error::NotSubRange(keep.to_string(), self.range.to_string()));
        }
        if keep == self.range {
            return Ok(self.clone());
        }
        let nl = (keep.left() - self.range.left()) as usize;
        let nr = (self.range.right() - keep.right()) as usize;
        let dl = self.d.pow(nl as u32);
        let dr = self.d.pow(nr as u32);
        let dk = keep.dim(self.d);
        let mut out = Array2::<C64>::zeros((dk, dk));
        let src = &self.mat;
        for k in 0..dk {
            for kp in 0..dk {
                let mut acc = C64::default();
                for a in 0..dl {
                    let row_base = (a * dk + k) * dr;
                    let col_base = (a * dk + kp) * dr;
                    for c in 0..dr {
                        acc += src[(row_base + c, col_base + c)];
                    }
                }
                out[(k, kp)] = acc;
            }
        }
        Ok(HermitianOperator { range: keep, d: self.d, mat: out })
    }

    /// Trace out the leftmost site.
    pub fn trace_left_site(&self) -> Result<Self> {
        if self.range.l() < 1 {
            return Err(Error::WindowTooSmall("cannot trace a single-site operator".into()));
        }
        self.partial_trace(self.range.shrink_left(1))
    }

    /// Trace out the rightmost site.
    pub fn trace_right_site(&self) -> Result<Self> {
        if self.range.l() < 1 {
            return Err(Error::WindowTooSmall("cannot trace a single-site operator".into()));
        }
        self.partial_trace(self.range.shrink_right(1))
    }

    pub fn eig(&self) -> Result<Spectrum> {
        let defect = hermiticity_defect(&self.mat.view());
        let scale = self.max_abs().max(1.0);
        if defect > 1e-8 * scale {
            return Err(Error::NotHermitian(defect));
        }
        let (eigenvalues, vectors) = zheevd(&self.mat)?;
        Ok(Spectrum { eigenvalues, vectors })
    }

    /// Spectral exponential.
    pub fn matrix_exp(&self) -> Result<Self> {
        let spec = self.eig()?;
        Ok(HermitianOperator { range: self.range, d: self.d, mat: spec.map(f64::exp) })
    }

    /// Natural matrix logarithm with eigenvalues clipped below `floor`.
    pub fn matrix_log(&self, floor: f64) -> Result<Self> {
        if floor <= 0.0 {
            return Err(Error::BadFloor(floor));
        }
        let spec = self.eig()?;
        Ok(HermitianOperator { range: self.range, d: self.d, mat: spec.map(|k| k.max(floor).ln()) })
    }

    /// Base-2 matrix logarithm with eigenvalue floor.
    pub fn matrix_log2(&self, floor: f64) -> Result<Self> {
        let ln = self.matrix_log(floor)?;
        Ok(ln.scaled(1.0 / LN_2))
    }

    /// Principal square root (negative eigenvalues clipped to zero).
    pub fn matrix_sqrt(&self) -> Result<Self> {
        let spec = self.eig()?;
        Ok(HermitianOperator { range: self.range, d: self.d, mat: spec.map(|k| k.max(0.0).sqrt()) })
    }

    /// Inverse square root with pseudoinverse semantics: eigenvalues at or
    /// below `floor` map to zero.
    pub fn matrix_inv_sqrt(&self, floor: f64) -> Result<Self> {
        if floor <= 0.0 {
            return Err(Error::BadFloor(floor));
        }
        let spec = self.eig()?;
        Ok(HermitianOperator {
            range: self.range,
            d: self.d,
            mat: spec.map(|k| if k > floor { 1.0 / k.sqrt() } else { 0.0 }),
        })
    }

    pub fn dot(&self, other: &Self) -> Result<Array2<C64>> {
        self.check_same_shape(other)?;
        Ok(self.mat.dot(&other.mat))
    }

    /// Re-symmetrize in place, suppressing Hermiticity drift.
    pub fn resymmetrize(&mut self) {
        hermitize(&mut self.mat);
    }

    pub fn hermiticity_defect(&self) -> f64 {
        hermiticity_defect(&self.mat.view())
    }

    /// Validate density-matrix refinement: unit trace and spectrum bounded
    /// below by `-psd_tol`.
    pub fn validate_density(&self, trace_tol: f64, psd_tol: f64) -> Result<()> {
        let tr = self.trace();
        if (tr - 1.0).abs() > trace_tol {
            return Err(Error::NotDensity(format!("trace = {tr}")));
        }
        let spec = self.eig()?;
        let min = spec.min_eigenvalue();
        if min < -psd_tol {
            return Err(Error::NotDensity(format!("min eigenvalue = {min:.3e}")));
        }
        Ok(())
    }

    /// Smallest eigenvalue.
    pub fn min_eigenvalue(&self) -> Result<f64> {
        Ok(self.eig()?.min_eigenvalue())
    }

    /// Spatially reflected operator on the same range: site order reversed.
    pub fn reflected(&self) -> Self {
        let m = self.range.site_count();
        let d = self.d;
        let dim = self.dim();
        let rev = |mut idx: usize| -> usize {
            let mut out = 0usize;
            for _ in 0..m {
                out = out * d + idx % d;
                idx /= d;
            }
            out
        };
        let perm: Vec<usize> = (0..dim).map(rev).collect();
        let mut out = Array2::<C64>::zeros((dim, dim));
        for i in 0..dim {
            for j in 0..dim {
                out[(perm[i], perm[j])] = self.mat[(i, j)];
            }
        }
        HermitianOperator { range: self.range, d, mat: out }
    }

    /// Max-norm of the deviation from the reflected image.
    pub fn reflection_defect(&self) -> f64 {
        self.reflected().sub(self).map(|x| x.max_abs()).unwrap_or(f64::INFINITY)
    }

    /// Cholesky-based check that every eigenvalue exceeds `bound`.
    pub fn min_eig_above(&self, bound: f64) -> bool {
        crate::eig::min_eig_above(&self.mat, bound)
    }

    /// Eigendecomposition exploiting reflection symmetry: the matrix is
    /// block diagonal in the +-1 eigenspaces of the site-reversal operator,
    /// so two smaller solves replace one large one. The input must satisfy
    /// R M R = M; the caller is responsible for having checked it.
    pub fn eig_reflection_blocked(&self) -> Result<Spectrum> {
        let m = self.range.site_count();
        let d = self.d;
        let dim = self.dim();
        let rev = |mut idx: usize| -> usize {
            let mut out = 0usize;
            for _ in 0..m {
                out = out * d + idx % d;
                idx /= d;
            }
            out
        };
        // Sector basis vectors as sparse (index, weight) lists:
        // symmetric (e_i + e_{rev i})/sqrt2 plus palindrome fixed points,
        // antisymmetric (e_i - e_{rev i})/sqrt2.
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let mut plus: Vec<Vec<(usize, f64)>> = Vec::new();
        let mut minus: Vec<Vec<(usize, f64)>> = Vec::new();
        for i in 0..dim {
            let r = rev(i);
            if r == i {
                plus.push(vec![(i, 1.0)]);
            } else if i < r {
                plus.push(vec![(i, s), (r, s)]);
                minus.push(vec![(i, s), (r, -s)]);
            }
        }
        let project = |basis: &[Vec<(usize, f64)>]| -> Array2<C64> {
            let k = basis.len();
            let mut block = Array2::<C64>::zeros((k, k));
            for (a, va) in basis.iter().enumerate() {
                for (b, vb) in basis.iter().enumerate() {
                    let mut acc = C64::default();
                    for &(ia, wa) in va {
                        for &(ib, wb) in vb {
                            acc += self.mat[(ia, ib)] * (wa * wb);
                        }
                    }
                    block[(a, b)] = acc;
                }
            }
            block
        };
        let (wp, vp) = zheevd(&project(&plus))?;
        let (wm, vm) = zheevd(&project(&minus))?;
        // Merge ascending and scatter eigenvectors back to the full basis.
        let mut merged: Vec<(f64, bool, usize)> = Vec::with_capacity(dim);
        for (j, &w) in wp.iter().enumerate() {
            merged.push((w, true, j));
        }
        for (j, &w) in wm.iter().enumerate() {
            merged.push((w, false, j));
        }
        merged.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        let mut eigenvalues = Vec::with_capacity(dim);
        let mut vectors = Array2::<C64>::zeros((dim, dim));
        for (col, &(w, in_plus, j)) in merged.iter().enumerate() {
            eigenvalues.push(w);
            let (basis, coeffs) = if in_plus { (&plus, &vp) } else { (&minus, &vm) };
            for (a, va) in basis.iter().enumerate() {
                let c = coeffs[(a, j)];
                for &(idx, wgt) in va {
                    vectors[(idx, col)] += c * wgt;
                }
            }
        }
        Ok(Spectrum { eigenvalues, vectors })
    }
}

impl fmt::Debug for HermitianOperator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "HermitianOperator({}, d={}, dim={})", self.range, self.d, self.dim())
    }
}

/// Kronecker product, left factor most significant.
pub fn kron(a: &ArrayView2<C64>, b: &ArrayView2<C64>) -> Array2<C64> {
    let (ar, ac) = a.dim();
    let (br, bc) = b.dim();
    let mut out = Array2::<C64>::zeros((ar * br, ac * bc));
    for i in 0..ar {
        for j in 0..ac {
            let v = a[(i, j)];
            if v.norm_sqr() == 0.0 {
                continue;
            }
            for k in 0..br {
                for l in 0..bc {
                    out[(i * br + k, j * bc + l)] = v * b[(k, l)];
                }
            }
        }
    }
    out
}

/// Trace inner product Tr(ab) of two Hermitian operators on the same range.
/// Always real; symmetric and bilinear.
pub fn trace_inner(a: &HermitianOperator, b: &HermitianOperator) -> Result<f64> {
    if a.range() != b.range() || a.local_dim() != b.local_dim() {
        return Err(Error::RangeMismatch(a.range().to_string(), b.range().to_string()));
    }
    // Tr(ab) = sum_ij a_ij b_ji = sum_ij a_ij conj(b_ij) for Hermitian b.
    let mut acc = 0.0f64;
    for (x, y) in a.matrix().iter().zip(b.matrix().iter()) {
        acc += x.re * y.re + x.im * y.im;
    }
    Ok(acc)
}

/// i[a, b] on the union range; Hermitian whenever a and b are.
pub fn commutator_i(a: &HermitianOperator, b: &HermitianOperator) -> Result<HermitianOperator> {
    let (a, b) = if a.range() == b.range() {
        (a.clone(), b.clone())
    } else {
        let left = a.range().left().min(b.range().left());
        let right = a.range().right().max(b.range().right());
        let union = SiteRange::from_span(left, (right - left + 1) as usize);
        (a.embed(union)?, b.embed(union)?)
    };
    let ab = a.mat.dot(&b.mat);
    let mut m = Array2::<C64>::zeros(ab.raw_dim());
    let i = C64::new(0.0, 1.0);
    // i(ab - ba) with ba = (ab)^dagger for Hermitian a, b.
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            m[(r, c)] = i * (ab[(r, c)] - ab[(c, r)].conj());
        }
    }
    hermitize(&mut m);
    Ok(HermitianOperator { range: a.range, d: a.d, mat: m })
}

/// Shannon term -k ln k with the 0 ln 0 = 0 convention, in nats.
fn entropy_term(k: f64) -> f64 {
    if k > 0.0 {
        -k * k.ln()
    } else {
        0.0
    }
}

/// Von Neumann entropy in nats, eigenvalues clamped at zero.
pub fn entropy_nats(rho: &HermitianOperator) -> Result<f64> {
    let spec = rho.eig()?;
    entropy_nats_of(&spec)
}

pub fn entropy_nats_of(spec: &Spectrum) -> Result<f64> {
    let min = spec.min_eigenvalue();
    if min < -1e-8 {
        return Err(Error::NegativeEigenvalue(min));
    }
    Ok(spec.eigenvalues.iter().map(|&k| entropy_term(k)).sum())
}

/// Von Neumann information in bits: log2(dim) - S(rho). The entropy deficit;
/// zero for the maximally mixed state, log2(dim) for pure states.
pub fn von_neumann_information(rho: &HermitianOperator) -> Result<f64> {
    let dim = rho.dim() as f64;
    Ok((dim.ln() - entropy_nats(rho)?) / LN_2)
}

pub fn von_neumann_information_of(dim: usize, spec: &Spectrum) -> Result<f64> {
    Ok(((dim as f64).ln() - entropy_nats_of(spec)?) / LN_2)
}

/// Trace distance Tr|a - b| between Hermitian operators on the same range.
pub fn trace_distance(a: &HermitianOperator, b: &HermitianOperator) -> Result<f64> {
    let diff = a.sub(b)?;
    let spec = diff.eig()?;
    Ok(spec.eigenvalues.iter().map(|k| k.abs()).sum())
}
