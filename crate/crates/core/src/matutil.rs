//! Dense tensor helpers: multiplication by operators acting on a few
//! adjacent sites, and application of superoperators attached to the left
//! or right end of a window. These keep the cost of local Hamiltonian
//! terms linear in the matrix size instead of cubic.

use ndarray::{s, Array2, ArrayView2};
use num_complex::Complex64 as C64;

/// Y = (1_left ⊗ K ⊗ 1_right) X where K acts on `nk` sites starting
/// `offset` sites from the left of X's range. X is dim x dim over m sites.
pub fn embed_mul_left(k: &ArrayView2<C64>, offset: usize, nk: usize, d: usize, x: &ArrayView2<C64>) -> Array2<C64> {
    let n = x.nrows();
    let dk = d.pow(nk as u32);
    debug_assert_eq!(k.nrows(), dk);
    let dl = d.pow(offset as u32);
    let dr = n / (dl * dk);
    let mut y = Array2::<C64>::zeros((n, n));
    // Rows decompose as (a, u, r) with a < dl, u < dk, r < dr. For each a,
    // the row block is a (dk*dr x n) matrix, reshaped (dk, dr*n) so K can
    // multiply from the left in one gemm.
    for a in 0..dl {
        let lo = a * dk * dr;
        let hi = lo + dk * dr;
        let block = x.slice(s![lo..hi, ..]);
        let block = block.to_shape((dk, dr * n)).expect("row block reshape");
        let prod = k.dot(&block);
        let prod = prod.to_shape((dk * dr, n)).expect("reshape back");
        y.slice_mut(s![lo..hi, ..]).assign(&prod);
    }
    y
}

/// Y = X (1_left ⊗ K ⊗ 1_right), the right-multiplication analogue.
pub fn embed_mul_right(k: &ArrayView2<C64>, offset: usize, nk: usize, d: usize, x: &ArrayView2<C64>) -> Array2<C64> {
    // X E = (E^T X^T)^T and E^T = embed(K^T).
    let kt = k.t().as_standard_layout().to_owned();
    let xt = x.t().as_standard_layout().to_owned();
    let yt = embed_mul_left(&kt.view(), offset, nk, d, &xt.view());
    yt.t().as_standard_layout().to_owned()
}

/// i [embed(K), X] for K on `nk` sites at `offset`.
pub fn embed_commutator_i(k: &ArrayView2<C64>, offset: usize, nk: usize, d: usize, x: &ArrayView2<C64>) -> Array2<C64> {
    let kx = embed_mul_left(k, offset, nk, d, x);
    let xk = embed_mul_right(k, offset, nk, d, x);
    let mut out = kx;
    out.zip_mut_with(&xk, |a, b| {
        let v = (*a - *b) * C64::new(0.0, 1.0);
        *a = v;
    });
    out
}

/// Which end of the window a superoperator is attached to.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum End {
    Left,
    Right,
}

/// Apply a superoperator S : Mat(d^nin) -> Mat(d^nout) to the `nin` sites
/// at one end of X, acting as the identity elsewhere.
///
/// S is stored as a (dout^2 x din^2) matrix over row-major vectorized
/// matrices: S[(s*dout+s'), (u*din+u')] maps E_{u,u'} to sum S * E_{s,s'}.
pub fn apply_end_superop(
    s_mat: &ArrayView2<C64>,
    din_sites: usize,
    dout_sites: usize,
    d: usize,
    end: End,
    x: &ArrayView2<C64>,
) -> Array2<C64> {
    let n = x.nrows();
    let din = d.pow(din_sites as u32);
    let dout = d.pow(dout_sites as u32);
    debug_assert_eq!(s_mat.nrows(), dout * dout);
    debug_assert_eq!(s_mat.ncols(), din * din);
    let rest = n / din;
    // Gather X into P[(u,u'), (r,r')].
    let mut p = Array2::<C64>::zeros((din * din, rest * rest));
    match end {
        End::Left => {
            for u in 0..din {
                for up in 0..din {
                    let row = u * din + up;
                    for r in 0..rest {
                        for rp in 0..rest {
                            p[(row, r * rest + rp)] = x[(u * rest + r, up * rest + rp)];
                        }
                    }
                }
            }
        }
        End::Right => {
            for u in 0..din {
                for up in 0..din {
                    let row = u * din + up;
                    for r in 0..rest {
                        for rp in 0..rest {
                            p[(row, r * rest + rp)] = x[(r * din + u, rp * din + up)];
                        }
                    }
                }
            }
        }
    }
    let g = s_mat.dot(&p);
    let nout = dout * rest;
    let mut y = Array2::<C64>::zeros((nout, nout));
    match end {
        End::Left => {
            for s in 0..dout {
                for sp in 0..dout {
                    let row = s * dout + sp;
                    for r in 0..rest {
                        for rp in 0..rest {
                            y[(s * rest + r, sp * rest + rp)] = g[(row, r * rest + rp)];
                        }
                    }
                }
            }
        }
        End::Right => {
            for s in 0..dout {
                for sp in 0..dout {
                    let row = s * dout + sp;
                    for r in 0..rest {
                        for rp in 0..rest {
                            y[(r * dout + s, rp * dout + sp)] = g[(row, r * rest + rp)];
                        }
                    }
                }
            }
        }
    }
    y
}

/// Matrix representation of a superoperator given its action on matrix
/// units, for small end spaces.
pub fn superop_matrix(din: usize, dout: usize, mut action: impl FnMut(&ArrayView2<C64>) -> Array2<C64>) -> Array2<C64> {
    let mut s = Array2::<C64>::zeros((dout * dout, din * din));
    let mut basis = Array2::<C64>::zeros((din, din));
    for u in 0..din {
        for up in 0..din {
            basis[(u, up)] = C64::new(1.0, 0.0);
            let img = action(&basis.view());
            basis[(u, up)] = C64::new(0.0, 0.0);
            for r in 0..dout {
                for c in 0..dout {
                    s[(r * dout + c, u * din + up)] = img[(r, c)];
                }
            }
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hermitian::kron;

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    fn rand_mat(n: usize, seed: u64) -> Array2<C64> {
        let mut state = seed.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(1);
        let mut next = move || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        };
        Array2::from_shape_fn((n, n), |_| c(next(), next()))
    }

    #[test]
    fn embed_mul_matches_dense_kron() {
        let d = 2;
        let k = rand_mat(4, 7); // 2-site operator
        let x = rand_mat(16, 3); // 4-site matrix
        let id2 = Array2::<C64>::eye(2);
        // K on sites 1..2 of 4: 1 x K x 1.
        let e = kron(&kron(&id2.view(), &k.view()).view(), &id2.view());
        let want = e.dot(&x);
        let got = embed_mul_left(&k.view(), 1, 2, d, &x.view());
        let diff = (&want - &got).iter().fold(0.0f64, |m, z| m.max(z.norm()));
        assert!(diff < 1e-13);
        let want = x.dot(&e);
        let got = embed_mul_right(&k.view(), 1, 2, d, &x.view());
        let diff = (&want - &got).iter().fold(0.0f64, |m, z| m.max(z.norm()));
        assert!(diff < 1e-13);
    }

    #[test]
    fn end_superop_matches_explicit_sum() {
        let d = 2;
        // A random superop from 2-site matrices to 1-site matrices.
        let s = rand_mat(4, 11);
        let s = {
            let mut m = Array2::<C64>::zeros((4, 16));
            for i in 0..4 {
                for j in 0..16 {
                    m[(i, j)] = s[(i % 4, (j * 7 + i) % 4)] + c(0.1 * i as f64, 0.01 * j as f64);
                }
            }
            m
        };
        let x = rand_mat(16, 5); // 4 sites
        let y = apply_end_superop(&s.view(), 2, 1, d, End::Left, &x.view());
        assert_eq!(y.nrows(), 8);
        // Explicit: Y[(a,r),(a',r')] = sum_{u,u'} S[(a,a'),(u,u')] X[(u,r),(u',r')]
        for a in 0..2 {
            for ap in 0..2 {
                for r in 0..4 {
                    for rp in 0..4 {
                        let mut acc = c(0.0, 0.0);
                        for u in 0..4 {
                            for up in 0..4 {
                                acc += s[(a * 2 + ap, u * 4 + up)] * x[(u * 4 + r, up * 4 + rp)];
                            }
                        }
                        let got = y[(a * 4 + r, ap * 4 + rp)];
                        assert!((acc - got).norm() < 1e-13);
                    }
                }
            }
        }
        // Right end: compare against the mirrored construction.
        let y = apply_end_superop(&s.view(), 2, 1, d, End::Right, &x.view());
        for a in 0..2 {
            for ap in 0..2 {
                for r in 0..4 {
                    for rp in 0..4 {
                        let mut acc = c(0.0, 0.0);
                        for u in 0..4 {
                            for up in 0..4 {
                                acc += s[(a * 2 + ap, u * 4 + up)] * x[(r * 4 + u, rp * 4 + up)];
                            }
                        }
                        let got = y[(r * 2 + a, rp * 2 + ap)];
                        assert!((acc - got).norm() < 1e-13);
                    }
                }
            }
        }
    }
}
