//! Thin wrapper around LAPACK's divide-and-conquer Hermitian eigensolver.

use crate::error::{Error, Result};
use ndarray::Array2;
use num_complex::Complex64 as C64;

extern crate openblas_src;

/// Eigendecomposition of a Hermitian matrix: ascending eigenvalues and the
/// unitary whose columns are the corresponding eigenvectors. Uses the
/// divide-and-conquer driver, falling back to the QR driver on the rare
/// convergence failures of the former.
pub fn zheevd(a: &Array2<C64>) -> Result<(Vec<f64>, Array2<C64>)> {
    match zheevd_driver(a) {
        Err(Error::EigFailed(info)) if info > 0 => zheev_driver(a),
        other => other,
    }
}

fn zheev_driver(a: &Array2<C64>) -> Result<(Vec<f64>, Array2<C64>)> {
    let n = a.nrows();
    if n == 0 {
        return Ok((Vec::new(), Array2::zeros((0, 0))));
    }
    let mut m: Vec<C64> = Vec::with_capacity(n * n);
    for j in 0..n {
        for i in 0..n {
            m.push(a[(i, j)]);
        }
    }
    let mut w = vec![0.0f64; n];
    let mut info = 0i32;
    let jobz = b'V' as core::ffi::c_char;
    let uplo = b'L' as core::ffi::c_char;
    let nn = n as i32;
    let mut rwork = vec![0.0f64; (3 * n - 2).max(1)];
    unsafe {
        let lwork_q = -1i32;
        let mut wq = C64::default();
        lapack_sys::zheev_(
            &jobz,
            &uplo,
            &nn,
            m.as_mut_ptr() as *mut _,
            &nn,
            w.as_mut_ptr(),
            &mut wq as *mut _ as *mut _,
            &lwork_q,
            rwork.as_mut_ptr(),
            &mut info,
        );
        if info != 0 {
            return Err(Error::EigFailed(info));
        }
        let lwork = wq.re as i32;
        let mut work = vec![C64::default(); lwork.max(1) as usize];
        lapack_sys::zheev_(
            &jobz,
            &uplo,
            &nn,
            m.as_mut_ptr() as *mut _,
            &nn,
            w.as_mut_ptr(),
            work.as_mut_ptr() as *mut _,
            &lwork,
            rwork.as_mut_ptr(),
            &mut info,
        );
    }
    if info != 0 {
        return Err(Error::EigFailed(info));
    }
    let v = Array2::from_shape_fn((n, n), |(i, j)| m[j * n + i]);
    Ok((w, v))
}

fn zheevd_driver(a: &Array2<C64>) -> Result<(Vec<f64>, Array2<C64>)> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::NotSquare(n, a.ncols()));
    }
    if n == 0 {
        return Ok((Vec::new(), Array2::zeros((0, 0))));
    }
    // Column-major copy; LAPACK overwrites it with the eigenvectors.
    let mut m: Vec<C64> = Vec::with_capacity(n * n);
    for j in 0..n {
        for i in 0..n {
            m.push(a[(i, j)]);
        }
    }
    let mut w = vec![0.0f64; n];
    let mut info = 0i32;
    let jobz = b'V' as core::ffi::c_char;
    let uplo = b'L' as core::ffi::c_char;
    let nn = n as i32;
    unsafe {
        // Workspace query.
        let (lwork_q, lrwork_q, liwork_q) = (-1i32, -1i32, -1i32);
        let (mut wq, mut rwq, mut iwq) = (C64::default(), 0.0f64, 0i32);
        lapack_sys::zheevd_(
            &jobz,
            &uplo,
            &nn,
            m.as_mut_ptr() as *mut _,
            &nn,
            w.as_mut_ptr(),
            &mut wq as *mut _ as *mut _,
            &lwork_q,
            &mut rwq,
            &lrwork_q,
            &mut iwq,
            &liwork_q,
            &mut info,
        );
        if info != 0 {
            return Err(Error::EigFailed(info));
        }
        let lwork = wq.re as i32;
        let lrwork = rwq as i32;
        let liwork = iwq;
        let mut work = vec![C64::default(); lwork.max(1) as usize];
        let mut rwork = vec![0.0f64; lrwork.max(1) as usize];
        let mut iwork = vec![0i32; liwork.max(1) as usize];
        lapack_sys::zheevd_(
            &jobz,
            &uplo,
            &nn,
            m.as_mut_ptr() as *mut _,
            &nn,
            w.as_mut_ptr(),
            work.as_mut_ptr() as *mut _,
            &lwork,
            rwork.as_mut_ptr(),
            &lrwork,
            iwork.as_mut_ptr(),
            &liwork,
            &mut info,
        );
    }
    if info != 0 {
        return Err(Error::EigFailed(info));
    }
    let v = Array2::from_shape_fn((n, n), |(i, j)| m[j * n + i]);
    Ok((w, v))
}

/// Cheap test whether all eigenvalues exceed `bound`, via Cholesky of
/// A - bound * I. Much faster than a full eigendecomposition.
pub fn min_eig_above(a: &Array2<C64>, bound: f64) -> bool {
    let n = a.nrows();
    if n == 0 {
        return true;
    }
    let mut m: Vec<C64> = Vec::with_capacity(n * n);
    for j in 0..n {
        for i in 0..n {
            let mut v = a[(i, j)];
            if i == j {
                v -= bound;
            }
            m.push(v);
        }
    }
    let mut info = 0i32;
    let uplo = b'L' as core::ffi::c_char;
    let nn = n as i32;
    unsafe {
        lapack_sys::zpotrf_(&uplo, &nn, m.as_mut_ptr() as *mut _, &nn, &mut info);
    }
    info == 0
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn min_eig_above_matches_spectrum() {
        let mut a = Array2::<C64>::zeros((6, 6));
        for i in 0..6 {
            a[(i, i)] = C64::new(i as f64 - 2.0, 0.0);
            if i > 0 {
                a[(i, i - 1)] = C64::new(0.3, 0.1);
                a[(i - 1, i)] = C64::new(0.3, -0.1);
            }
        }
        let (w, _) = zheevd(&a).unwrap();
        let min = w[0];
        assert!(min_eig_above(&a, min - 1e-9));
        assert!(!min_eig_above(&a, min + 1e-9));
    }

    #[test]
    fn residual_small_on_random_hermitian() {
        let n = 48;
        let mut a = Array2::<C64>::zeros((n, n));
        for i in 0..n {
            for j in i..n {
                let v = C64::new(((i * 7 + j * 13) % 11) as f64 - 5.0, (i as f64 - j as f64) * 0.3);
                a[(i, j)] = v;
                a[(j, i)] = v.conj();
            }
            a[(i, i)] = C64::new(a[(i, i)].re, 0.0);
        }
        let (w, v) = zheevd(&a).unwrap();
        assert!(w.windows(2).all(|p| p[0] <= p[1]));
        let av = a.dot(&v);
        let mut resid = 0.0f64;
        for j in 0..n {
            for i in 0..n {
                resid = resid.max((av[(i, j)] - v[(i, j)] * w[j]).norm());
            }
        }
        assert!(resid < 1e-10 * (1.0 + w.last().unwrap().abs()), "resid = {resid:e}");
    }
}
