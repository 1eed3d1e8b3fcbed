//! Seeded random-state generation: Hilbert-Schmidt density matrices,
//! pure states, Hermitian operators, and unitaries, plus an orthonormal
//! Hermitian basis. Deterministic under a fixed seed; used by the
//! verification suites.

use crate::hermitian::{hermitize, HermitianOperator, SiteRange};
use ndarray::Array2;
use num_complex::Complex64 as C64;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller; plenty for test fixtures.
    let u1: f64 = rng.gen_range(1e-12..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

pub fn random_hermitian(rng: &mut ChaCha8Rng, range: SiteRange, d: usize, scale: f64) -> HermitianOperator {
    let dim = range.dim(d);
    let mut m = Array2::<C64>::zeros((dim, dim));
    for i in 0..dim {
        for j in i..dim {
            let re = gaussian(rng) * scale;
            let im = if i == j { 0.0 } else { gaussian(rng) * scale };
            m[(i, j)] = C64::new(re, im);
            m[(j, i)] = C64::new(re, -im);
        }
    }
    HermitianOperator::new(range, d, m).expect("random hermitian")
}

/// Hilbert-Schmidt random density matrix: G G^dagger normalized.
pub fn random_density(rng: &mut ChaCha8Rng, range: SiteRange, d: usize) -> HermitianOperator {
    let dim = range.dim(d);
    let g = Array2::from_shape_fn((dim, dim), |_| C64::new(gaussian(rng), gaussian(rng)));
    let mut rho = g.dot(&g.t().map(|z| z.conj()));
    let tr: f64 = rho.diag().iter().map(|z| z.re).sum();
    rho.map_inplace(|z| *z /= tr);
    hermitize(&mut rho);
    HermitianOperator::new(range, d, rho).expect("random density")
}

/// Random pure-state projector.
pub fn random_pure(rng: &mut ChaCha8Rng, range: SiteRange, d: usize) -> HermitianOperator {
    let dim = range.dim(d);
    let v: Vec<C64> = (0..dim).map(|_| C64::new(gaussian(rng), gaussian(rng))).collect();
    let norm: f64 = v.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
    let mut m = Array2::<C64>::zeros((dim, dim));
    for i in 0..dim {
        for j in 0..dim {
            m[(i, j)] = v[i] * v[j].conj() / (norm * norm);
        }
    }
    HermitianOperator::new(range, d, m).expect("random pure state")
}

/// Unitary from the eigenbasis of a random Hermitian matrix.
pub fn random_unitary(rng: &mut ChaCha8Rng, dim: usize) -> Array2<C64> {
    let range = SiteRange::from_span(0, 1);
    let _ = range;
    let mut m = Array2::<C64>::zeros((dim, dim));
    for i in 0..dim {
        for j in i..dim {
            let re = gaussian(rng);
            let im = if i == j { 0.0 } else { gaussian(rng) };
            m[(i, j)] = C64::new(re, im);
            m[(j, i)] = C64::new(re, -im);
        }
    }
    let (_, v) = crate::eig::zheevd(&m).expect("random unitary");
    v
}

/// Random traceless Hermitian operator.
pub fn random_traceless(rng: &mut ChaCha8Rng, range: SiteRange, d: usize, scale: f64) -> HermitianOperator {
    let mut h = random_hermitian(rng, range, d, scale);
    let shift = h.trace() / h.dim() as f64;
    let dim = h.dim();
    for i in 0..dim {
        h.matrix_mut()[(i, i)] -= shift;
    }
    h
}

/// Orthonormal basis of Hermitian matrices on the given dimension, with
/// respect to the trace inner product.
pub fn hermitian_basis(dim: usize) -> Vec<Array2<C64>> {
    let mut out = Vec::with_capacity(dim * dim);
    let s = std::f64::consts::FRAC_1_SQRT_2;
    for i in 0..dim {
        let mut m = Array2::<C64>::zeros((dim, dim));
        m[(i, i)] = C64::new(1.0, 0.0);
        out.push(m);
        for j in (i + 1)..dim {
            let mut m = Array2::<C64>::zeros((dim, dim));
            m[(i, j)] = C64::new(s, 0.0);
            m[(j, i)] = C64::new(s, 0.0);
            out.push(m);
            let mut m = Array2::<C64>::zeros((dim, dim));
            m[(i, j)] = C64::new(0.0, -s);
            m[(j, i)] = C64::new(0.0, s);
            out.push(m);
        }
    }
    out
}
