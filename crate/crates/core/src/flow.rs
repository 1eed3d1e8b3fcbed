//! The information-flow derivative policy: close the evolution of a
//! scale-l window by pinning the total information current out of the top
//! scale to (I_l / I_{l-1}) times the current one scale below, then fixing
//! the remaining freedom by minimizing the second-order expansion of the
//! truncated total information. The quadratic solve runs preconditioned
//! conjugate gradients with the inverse entropy Hessian as conditioner.
//!
//! Internal logarithms and Hessians are natural-base; the current
//! condition is a ratio and therefore base-free; currents converted to
//! bits only in reports.

use crate::error::{Error, Result};
use crate::hamiltonian::Hamiltonian;
use crate::hermitian::{HermitianOperator, Spectrum, LN_2};
use crate::local_state::{chi_bar, image_project_full, phi, BoundaryMode, OperatorWindow};
use ndarray::Array2;
use serde::Serialize;

/// Tunables of the flow solve; defaults follow the design notes.
#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct FlowOptions {
    /// Relative CG residual target.
    pub cg_tol: f64,
    /// CG iteration cap.
    pub cg_max_iter: usize,
    /// Eigenvalue floor before logarithms and Hessians.
    pub floor: f64,
    /// Reject when flooring would move an eigenvalue by more than this.
    pub floor_reject: f64,
    /// Per-site current below which the policy signals Petz fallback.
    pub current_threshold: f64,
    /// Per-site information below which the policy signals fallback.
    pub info_threshold: f64,
    /// Hysteresis factor between switch-on and switch-off.
    pub hysteresis: f64,
    /// Skip the fallback thresholds (tests and diagnostics).
    pub force: bool,
}

impl Default for FlowOptions {
    fn default() -> Self {
        FlowOptions {
            cg_tol: 1e-9,
            cg_max_iter: 200,
            floor: 1e-10,
            floor_reject: 1e-6,
            current_threshold: 1e-6,
            info_threshold: 1e-8,
            hysteresis: 2.0,
            force: false,
        }
    }
}

/// Diagnostics of one flow solve, serialized into run logs.
#[derive(Clone, Copy, Debug, Default, Serialize)]
pub struct FlowSolveReport {
    pub alpha: f64,
    pub cg_iterations: usize,
    pub residual: f64,
    /// Current out of the top scale realized by the returned derivative,
    /// bits per time.
    pub achieved_current: f64,
    /// Current-condition target, bits per time.
    pub target_current: f64,
    pub min_marginal_eigenvalue: f64,
    /// Total information at the top scale and one below, bits.
    pub info_top: f64,
    pub info_below: f64,
}

/// Why the flow policy declined to produce a derivative.
#[derive(Clone, Debug)]
pub enum FlowDecline {
    /// Information or current at the reference scale below threshold;
    /// evolve with the Petz policy instead.
    FallbackToPetz { info_per_site: f64, current_per_site: f64 },
}

/// Per-element spectral data of a window: eigendecompositions, floored
/// logarithms, and the entropy-Hessian kernel.
pub struct WindowSpectral {
    specs: Vec<Spectrum>,
    logs: OperatorWindow,
    kernels: Vec<Array2<f64>>,
    pub min_eigenvalue: f64,
}

impl WindowSpectral {
    pub fn analyze(omega: &OperatorWindow, floor: f64) -> Result<Self> {
        use rayon::prelude::*;
        let analyzed: Result<Vec<_>> = if omega.len() >= 8 {
            omega.elements().par_iter().map(|e| analyze_element(e, floor)).collect()
        } else {
            omega.elements().iter().map(|e| analyze_element(e, floor)).collect()
        };
        let mut specs = Vec::with_capacity(omega.len());
        let mut logs = Vec::with_capacity(omega.len());
        let mut kernels = Vec::with_capacity(omega.len());
        let mut min_eigenvalue = f64::INFINITY;
        for (spec, log, kernel) in analyzed? {
            min_eigenvalue = min_eigenvalue.min(spec.min_eigenvalue());
            specs.push(spec);
            logs.push(log);
            kernels.push(kernel);
        }
        Ok(WindowSpectral {
            specs,
            logs: OperatorWindow::new(omega.boundary(), logs)?,
            kernels,
            min_eigenvalue,
        })
    }

    /// {ln Omega_n} as a window, natural base, floored.
    pub fn log_window(&self) -> &OperatorWindow {
        &self.logs
    }

    pub fn spectrum(&self, k: usize) -> &Spectrum {
        &self.specs[k]
    }

    /// Apply the Hessian of sum_n S(Omega_n) elementwise (nats; negative
    /// definite on traceless inputs for strictly positive marginals).
    pub fn hessian_apply(&self, x: &OperatorWindow) -> Result<OperatorWindow> {
        self.kernel_apply(x, false)
    }

    /// Apply the exact inverse of the entropy Hessian.
    pub fn hessian_inverse_apply(&self, x: &OperatorWindow) -> Result<OperatorWindow> {
        self.kernel_apply(x, true)
    }

    fn kernel_apply(&self, x: &OperatorWindow, invert: bool) -> Result<OperatorWindow> {
        use rayon::prelude::*;
        let one = |(k, e): (usize, &HermitianOperator)| -> HermitianOperator {
            let spec = &self.specs[k];
            let u = &spec.vectors;
            let udag = u.t().map(|z| z.conj());
            let mut m = udag.dot(e.matrix()).dot(u);
            let kern = &self.kernels[k];
            for i in 0..m.nrows() {
                for j in 0..m.ncols() {
                    let factor = if invert { 1.0 / kern[(i, j)] } else { kern[(i, j)] };
                    m[(i, j)] *= factor;
                }
            }
            let mut back = u.dot(&m).dot(&udag);
            crate::hermitian::hermitize(&mut back);
            HermitianOperator::from_parts(e.range(), e.local_dim(), back)
        };
        let out: Vec<HermitianOperator> = if x.len() >= 8 {
            x.elements().par_iter().enumerate().map(one).collect()
        } else {
            x.elements().iter().enumerate().map(one).collect()
        };
        OperatorWindow::new(x.boundary(), out)
    }
}

fn analyze_element(
    e: &HermitianOperator,
    floor: f64,
) -> Result<(Spectrum, HermitianOperator, Array2<f64>)> {
    let spec = e.eig()?;
    let floored: Vec<f64> = spec.eigenvalues.iter().map(|&k| k.max(floor)).collect();
    let log = HermitianOperator::from_parts(e.range(), e.local_dim(), spec.map(|k| k.max(floor).ln()));
    let kernel = hessian_kernel(&floored);
    Ok((spec, log, kernel))
}

/// Entropy-Hessian kernel in the eigenbasis: the divided difference of
/// -ln, K_ij = -ln(k_i / k_j) / (k_i - k_j), with the analytic limit
/// -1/k_i on the diagonal and near-degenerate pairs.
fn hessian_kernel(kappa: &[f64]) -> Array2<f64> {
    let n = kappa.len();
    let mut k = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            let (ki, kj) = (kappa[i], kappa[j]);
            let diff = ki - kj;
            k[(i, j)] = if diff.abs() <= 1e-12 * (ki + kj) {
                -2.0 / (ki + kj)
            } else {
                -(ki / kj).ln() / diff
            };
        }
    }
    k
}

/// chi_bar via the closed form:
/// L Omega_n + T_R^+ TL_L Omega_{n-1} + T_L^+ TL_R Omega_{n+1}.
/// Equals Phi of the minimum-norm extension.
pub fn chi_bar_closed_form(ham: &Hamiltonian, omega: &OperatorWindow) -> Result<OperatorWindow> {
    use crate::matutil::End;
    let mut out = Vec::with_capacity(omega.len());
    for n in 0..omega.len() {
        let e = omega.element(n);
        let mut acc = ham.liouvillian(e);
        if let Some(left) = omega.neighbor(n, -1).into_option() {
            if ham.has_bond(left.range().left()) {
                let tl = ham.tl(End::Left, &left)?;
                let lifted = crate::local_state::trace_end_pinv(End::Right, &tl);
                acc.add_scaled(&lifted.with_range(e.range())?, 1.0)?;
            }
        }
        if let Some(right) = omega.neighbor(n, 1).into_option() {
            if ham.has_bond(right.range().right() - 1) {
                let tl = ham.tl(End::Right, &right)?;
                let lifted = crate::local_state::trace_end_pinv(End::Left, &tl);
                acc.add_scaled(&lifted.with_range(e.range())?, 1.0)?;
            }
        }
        acc.resymmetrize();
        out.push(acc);
    }
    OperatorWindow::new(omega.boundary(), out)
}

/// Inner product with the first and last elements excluded (the primed
/// sums of the boundary bookkeeping); translation-invariant windows have
/// no edges and use the plain inner product.
fn inner_primed(a: &OperatorWindow, b: &OperatorWindow) -> Result<f64> {
    a.check_shape(b)?;
    if a.boundary() == BoundaryMode::TranslationInvariant {
        return a.inner(b);
    }
    let mut acc = 0.0;
    for k in 1..a.len().saturating_sub(1) {
        acc += crate::hermitian::trace_inner(a.element(k), b.element(k))?;
    }
    Ok(acc)
}

/// Marginal cascade with spectral data at the top three scales.
pub struct FlowContext {
    pub top: WindowSpectral,
    pub below: WindowSpectral,
    pub below2: Option<WindowSpectral>,
    pub omega_below: OperatorWindow,
    pub omega_below2: Option<OperatorWindow>,
}

impl FlowContext {
    pub fn analyze(omega: &OperatorWindow, floor: f64) -> Result<Self> {
        if omega.scale() < 2 {
            return Err(Error::WindowTooSmall("flow policy needs scale >= 2".into()));
        }
        let omega_below = omega.trace_step()?;
        let omega_below2 = omega_below.trace_step()?;
        Ok(FlowContext {
            top: WindowSpectral::analyze(omega, floor)?,
            below: WindowSpectral::analyze(&omega_below, floor)?,
            below2: Some(WindowSpectral::analyze(&omega_below2, floor)?),
            omega_below,
            omega_below2: Some(omega_below2),
        })
    }

    /// Total lattice information at the top scale and one below, in bits.
    fn scale_infos(&self) -> (f64, f64) {
        let info = |ws: &WindowSpectral, dim: usize| -> Vec<f64> {
            ws.specs
                .iter()
                .map(|s| {
                    ((dim as f64).ln()
                        - s.eigenvalues.iter().map(|&k| if k > 0.0 { -k * k.ln() } else { 0.0 }).sum::<f64>())
                        / LN_2
                })
                .collect()
        };
        let d = self.omega_below.local_dim();
        let dim_top = d.pow(self.omega_below.scale() as u32 + 2);
        let dim_b = dim_top / d;
        let dim_b2 = dim_b / d;
        let i_top = info(&self.top, dim_top);
        let i_b = info(&self.below, dim_b);
        let i_b2 = info(self.below2.as_ref().unwrap(), dim_b2);
        let ti = self.omega_below.boundary() == BoundaryMode::TranslationInvariant;
        let lattice_total = |upper: &[f64], lower: &[f64], lower2: &[f64]| -> f64 {
            if ti {
                return upper[0] - 2.0 * lower[0] + lower2[0];
            }
            let mut acc = 0.0;
            for (k, &iu) in upper.iter().enumerate() {
                // i_n^l = I_l - I_{l-1,left} - I_{l-1,right} + I_{l-2}.
                acc += iu - lower[k] - lower[k + 1] + lower2[k + 1];
            }
            acc
        };
        // One more cascade level for the lower scale's lattice values.
        let i_total_top = lattice_total(&i_top, &i_b, &i_b2);
        let i_total_below = {
            if let Some(b2w) = &self.omega_below2 {
                if b2w.scale() >= 1 {
                    let b3 = b2w.trace_step().expect("scale >= 1");
                    let specs3 = WindowSpectral::analyze(&b3, 1e-12).expect("analyze");
                    let i_b3 = info(&specs3, dim_b2 / d);
                    lattice_total(&i_b, &i_b2, &i_b3)
                } else {
                    // l - 2 = 0: i^1 values come from mutual informations.
                    if ti {
                        i_b[0] - 2.0 * i_b2[0]
                    } else {
                        let mut acc = 0.0;
                        for (k, &ib) in i_b.iter().enumerate() {
                            acc += ib - i_b2[k] - i_b2[k + 1];
                        }
                        acc
                    }
                }
            } else {
                0.0
            }
        };
        (i_total_top.max(0.0), i_total_below.max(0.0))
    }
}

/// The total current J_{l -> l+1} realized by a derivative chi of the
/// scale-l window, in nats:
/// <Phi(Omega^l) | logs^{l-1}>' - <chi | logs^l>.
fn current_of(
    lower_derivative: &OperatorWindow,
    chi: &OperatorWindow,
    ctx: &FlowContext,
) -> Result<f64> {
    let primed = inner_primed(lower_derivative, ctx.below.log_window())?;
    Ok(primed - chi.inner(ctx.top.log_window())?)
}

/// The current one scale below is fully determined by the window itself.
fn current_below(
    ham: &Hamiltonian,
    lower_derivative: &OperatorWindow,
    ctx: &FlowContext,
) -> Result<f64> {
    let deriv_b2 = phi(ham, &ctx.omega_below)?;
    let primed = inner_primed(&deriv_b2, ctx.below2.as_ref().unwrap().log_window())?;
    Ok(primed - lower_derivative.inner(ctx.below.log_window())?)
}

/// Projector onto S_perp: the image of Phi P_T, minus the component along
/// the projected log window.
pub struct SPerpProjector<'a> {
    ham: &'a Hamiltonian,
    /// I_Phi applied to the log window.
    g: OperatorWindow,
    denom: f64,
}

impl<'a> SPerpProjector<'a> {
    pub fn build(ham: &'a Hamiltonian, ctx: &FlowContext) -> Result<Self> {
        let logs = ctx.top.log_window();
        let g = image_project_full(ham, logs)?;
        let denom = logs.inner(&g)?;
        Ok(SPerpProjector { ham, g, denom })
    }

    pub fn degenerate(&self) -> bool {
        self.denom.abs() < 1e-14
    }

    /// The projected log direction and its squared norm under I_Phi.
    pub fn log_direction(&self) -> (&OperatorWindow, f64) {
        (&self.g, self.denom)
    }

    pub fn apply(&self, x: &OperatorWindow, logs: &OperatorWindow) -> Result<OperatorWindow> {
        let mut projected = image_project_full(self.ham, x)?;
        if !self.degenerate() {
            let overlap = logs.inner(&projected)?;
            projected.axpy(-overlap / self.denom, &self.g)?;
        }
        Ok(projected)
    }
}

/// Solve P H P y = P H chi_dbar on S_perp by preconditioned CG with
/// M = P H^{-1} P, returning y and iteration diagnostics. H here is the
/// negated entropy Hessian (positive definite on the subspace).
pub fn solve_flow_correction(
    proj: &SPerpProjector,
    ws: &WindowSpectral,
    rhs_source: &OperatorWindow,
    warm: Option<&OperatorWindow>,
    opts: &FlowOptions,
) -> Result<(OperatorWindow, usize, f64)> {
    let logs = ws.log_window();
    let apply_a = |x: &OperatorWindow| -> Result<OperatorWindow> {
        let hx = ws.hessian_apply(x)?.scaled(-1.0);
        proj.apply(&hx, logs)
    };
    let apply_m = |r: &OperatorWindow| -> Result<OperatorWindow> {
        let mr = ws.hessian_inverse_apply(r)?.scaled(-1.0);
        proj.apply(&mr, logs)
    };
    let b = {
        let h = ws.hessian_apply(rhs_source)?.scaled(-1.0);
        proj.apply(&h, logs)?
    };
    let bnorm = b.norm();
    if bnorm == 0.0 {
        return Ok((b.zeros_like(), 0, 0.0));
    }
    let mut x = match warm {
        Some(w) if w.check_shape(&b).is_ok() => proj.apply(w, logs)?,
        _ => b.zeros_like(),
    };
    let mut r = b.sub(&apply_a(&x)?)?;
    r = proj.apply(&r, logs)?;
    let mut z = apply_m(&r)?;
    let mut p = z.clone();
    let mut rz = r.inner(&z)?;
    let mut iterations = 0;
    let mut resid = r.norm() / bnorm;
    while resid > opts.cg_tol && iterations < opts.cg_max_iter {
        let ap = apply_a(&p)?;
        let pap = p.inner(&ap)?;
        if pap <= 0.0 {
            return Err(Error::DegenerateState(format!(
                "negative curvature in flow solve: p.Ap = {pap:.3e} at iteration {iterations}"
            )));
        }
        let alpha = rz / pap;
        x.axpy(alpha, &p)?;
        r.axpy(-alpha, &ap)?;
        // Re-orthogonalize against the constraint direction.
        r = proj.apply(&r, logs)?;
        resid = r.norm() / bnorm;
        iterations += 1;
        if resid <= opts.cg_tol {
            break;
        }
        z = apply_m(&r)?;
        let rz_new = r.inner(&z)?;
        let beta = rz_new / rz;
        rz = rz_new;
        let mut p_new = z.clone();
        p_new.axpy(beta, &p)?;
        p = p_new;
    }
    if resid > opts.cg_tol {
        return Err(Error::NoConvergence(format!(
            "flow CG residual {resid:.3e} after {iterations} iterations"
        )));
    }
    Ok((x, iterations, resid))
}

/// The outcome of a flow-policy evaluation. `correction` is the CG
/// solution, reusable as a warm start for nearby states.
pub enum FlowOutcome {
    Solved {
        chi: OperatorWindow,
        report: FlowSolveReport,
        correction: OperatorWindow,
    },
    Declined(FlowDecline),
}

/// Assemble the information-flow derivative of a scale-l window:
/// chi = chi_bar + alpha-correction + CG minimizer on S_perp.
pub fn psi_flow(
    ham: &Hamiltonian,
    omega: &OperatorWindow,
    opts: &FlowOptions,
    warm: Option<&OperatorWindow>,
) -> Result<FlowOutcome> {
    if crate::petz::closes_exactly(ham, omega) {
        let deriv = ham.liouvillian(omega.element(0));
        let chi = OperatorWindow::new(omega.boundary(), vec![deriv])?;
        let correction = chi.zeros_like();
        return Ok(FlowOutcome::Solved { chi, report: FlowSolveReport::default(), correction });
    }
    let ctx = FlowContext::analyze(omega, opts.floor)?;
    if ctx.top.min_eigenvalue < -(opts.floor_reject) {
        return Err(Error::NumericalHealth(format!(
            "marginal eigenvalue {:.3e} below flow floor tolerance",
            ctx.top.min_eigenvalue
        )));
    }
    let (info_top, info_below) = ctx.scale_infos();
    let sites = omega.len() as f64;
    let lower_derivative = phi(ham, omega)?;
    let j_below = current_below(ham, &lower_derivative, &ctx)? / LN_2;
    if !opts.force {
        let info_ps = info_below / sites;
        let current_ps = j_below.abs() / sites;
        if info_ps <= opts.info_threshold || current_ps <= opts.current_threshold {
            return Ok(FlowOutcome::Declined(FlowDecline::FallbackToPetz {
                info_per_site: info_ps,
                current_per_site: current_ps,
            }));
        }
    }
    let ratio = if info_below > 0.0 { info_top / info_below } else { 0.0 };
    let target_nats = ratio * j_below * LN_2;

    let base = chi_bar(ham, omega)?;
    let proj = SPerpProjector::build(ham, &ctx)?;
    let logs = ctx.top.log_window();
    // alpha: the inner product <chi_tilde | logs> required by the current
    // condition, realized along the projected log direction.
    let primed = inner_primed(&lower_derivative, ctx.below.log_window())?;
    let alpha = primed - base.inner(logs)? - target_nats;
    let (gdir, denom) = proj.log_direction();
    let mut chi_dbar = base.clone();
    if alpha.abs() > 1e-15 {
        if proj.degenerate() {
            return Err(Error::DegenerateState(
                "vanishing <log | I_Phi log> with a nonzero current correction".into(),
            ));
        }
        chi_dbar.axpy(alpha / denom, gdir)?;
    }
    let (y, cg_iterations, residual) = solve_flow_correction(&proj, &ctx.top, &chi_dbar, warm, opts)?;
    let mut chi = chi_dbar;
    chi.axpy(-1.0, &y)?;
    let achieved = current_of(&lower_derivative, &chi, &ctx)? / LN_2;
    let report = FlowSolveReport {
        alpha,
        cg_iterations,
        residual,
        achieved_current: achieved,
        target_current: ratio * j_below,
        min_marginal_eigenvalue: ctx.top.min_eigenvalue,
        info_top,
        info_below,
    };
    Ok(FlowOutcome::Solved { chi, report, correction: y })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hamiltonian::IsingParams;
    use crate::hermitian::{trace_inner, SiteRange};
    use crate::local_state::{hamiltonian_window_set, kernel_project_window, min_norm_extension};
    use crate::oracle;
    use crate::random::{random_density, random_traceless, rng};

    fn ising(n: usize) -> Hamiltonian {
        Hamiltonian::mixed_field_ising_finite(IsingParams::paper(), n)
    }

    fn evolved_window(n: usize, l: i64, t: f64) -> OperatorWindow {
        let (_, h) = oracle::build_hamiltonian(IsingParams::paper(), n).unwrap();
        let prop = oracle::Propagator::new(&h).unwrap();
        let rho0 = oracle::initial_state(oracle::QuenchKind::Quench2, n).unwrap();
        let rho = prop.evolve(&rho0, t).unwrap();
        oracle::marginals(&rho, l).unwrap()
    }

    #[test]
    fn chi_bar_closed_form_matches_composition() {
        let ham = ising(6);
        let omega = evolved_window(6, 3, 0.8);
        let a = chi_bar(&ham, &omega).unwrap();
        let b = chi_bar_closed_form(&ham, &omega).unwrap();
        assert!(a.sub(&b).unwrap().max_abs() < 1e-10);
        // Traceless elements.
        for e in a.elements() {
            assert!(e.trace().abs() < 1e-11);
        }
    }

    #[test]
    fn chi_bar_vanishes_for_commuting_stationary_state() {
        let p = IsingParams { j: 1.0, h_l: 0.3, h_t: 0.0 };
        let ham = Hamiltonian::mixed_field_ising_finite(p, 5);
        let mut m = ndarray::Array2::<num_complex::Complex64>::zeros((2, 2));
        m[(0, 0)] = num_complex::Complex64::new(0.8, 0.0);
        m[(1, 1)] = num_complex::Complex64::new(0.2, 0.0);
        let site = HermitianOperator::new(SiteRange::from_span(0, 1), 2, m).unwrap();
        let mut rho = site.clone();
        for k in 1..5 {
            rho = rho.tensor(&site.with_range(SiteRange::from_span(k, 1)).unwrap()).unwrap();
        }
        let omega = oracle::marginals(&rho, 2).unwrap();
        let cb = chi_bar_closed_form(&ham, &omega).unwrap();
        assert!(cb.max_abs() < 1e-13);
    }

    #[test]
    fn hessian_maximally_mixed_and_finite_differences() {
        let mut rng = rng(80);
        // Maximally mixed qubit: kernel -1/kappa = -2, so H x = -2 x in
        // nats (the arctanh form of the same kernel carries an extra 1/2).
        let mm = OperatorWindow::new(
            BoundaryMode::Finite,
            vec![HermitianOperator::maximally_mixed(SiteRange::from_span(0, 1), 2)],
        )
        .unwrap();
        let ws = WindowSpectral::analyze(&mm, 1e-12).unwrap();
        let x = OperatorWindow::new(
            BoundaryMode::Finite,
            vec![random_traceless(&mut rng, SiteRange::from_span(0, 1), 2, 1.0)],
        )
        .unwrap();
        let hx = ws.hessian_apply(&x).unwrap();
        let want = x.scaled(-2.0);
        assert!(hx.sub(&want).unwrap().max_abs() < 1e-12);

        // <x, H x> against the centered second difference of S(rho + eps x)
        // for a unit-norm direction.
        let r = SiteRange::from_span(0, 3);
        let rho = {
            let raw = random_density(&mut rng, r, 2);
            let mm = HermitianOperator::maximally_mixed(r, 2);
            raw.scaled(0.6).add(&mm.scaled(0.4)).unwrap()
        };
        let w = OperatorWindow::new(BoundaryMode::Finite, vec![rho.clone()]).unwrap();
        let ws = WindowSpectral::analyze(&w, 1e-12).unwrap();
        let x = {
            let raw = random_traceless(&mut rng, r, 2, 1.0);
            raw.scaled(1.0 / raw.frobenius_norm())
        };
        let xw = OperatorWindow::new(BoundaryMode::Finite, vec![x.clone()]).unwrap();
        let quad = xw.inner(&ws.hessian_apply(&xw).unwrap()).unwrap();
        let eps = 1e-4;
        let s_at = |c: f64| -> f64 {
            let mut p = rho.clone();
            p.add_scaled(&x, c).unwrap();
            crate::hermitian::entropy_nats(&p).unwrap()
        };
        let fd = (s_at(eps) - 2.0 * s_at(0.0) + s_at(-eps)) / (eps * eps);
        assert!(
            (quad - fd).abs() < 1e-5 * (1.0 + quad.abs()),
            "quadratic form {quad} vs finite diff {fd}"
        );
        assert!(quad < 0.0);

        // Diagonal perturbations reduce to per-eigenvalue 1D second
        // differences of -k ln k.
        let spec = rho.eig().unwrap();
        let mut diag = ndarray::Array2::<num_complex::Complex64>::zeros((8, 8));
        let dir: Vec<f64> = (0..8).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
        for i in 0..8 {
            diag[(i, i)] = num_complex::Complex64::new(dir[i], 0.0);
        }
        let u = &spec.vectors;
        let x_diag = u.dot(&diag).dot(&u.t().map(|z| z.conj()));
        let x_diag = HermitianOperator::new(r, 2, x_diag).unwrap();
        let xw = OperatorWindow::new(BoundaryMode::Finite, vec![x_diag]).unwrap();
        let quad = xw.inner(&ws.hessian_apply(&xw).unwrap()).unwrap();
        let direct: f64 = spec.eigenvalues.iter().zip(&dir).map(|(&k, &c)| -c * c / k).sum();
        assert!((quad - direct).abs() < 1e-9 * direct.abs());
    }

    #[test]
    fn hessian_inverse_roundtrip_and_linearity() {
        let mut rng = rng(81);
        let omega = evolved_window(5, 2, 0.7);
        let ws = WindowSpectral::analyze(&omega, 1e-12).unwrap();
        let mut x = omega.zeros_like();
        for k in 0..x.len() {
            let r = x.element(k).range();
            *x.element_mut(k) = random_traceless(&mut rng, r, 2, 1.0);
        }
        let round = ws.hessian_inverse_apply(&ws.hessian_apply(&x).unwrap()).unwrap();
        assert!(round.sub(&x).unwrap().max_abs() < 1e-10 * (1.0 + x.max_abs()));
        // Scaling linearity.
        let hx2 = ws.hessian_apply(&x.scaled(2.0)).unwrap();
        let want = ws.hessian_apply(&x).unwrap().scaled(2.0);
        assert!(hx2.sub(&want).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn s_perp_projector_properties() {
        let mut rng = rng(82);
        let ham = ising(6);
        let omega = evolved_window(6, 2, 0.9);
        let ctx = FlowContext::analyze(&omega, 1e-10).unwrap();
        let proj = SPerpProjector::build(&ham, &ctx).unwrap();
        let logs = ctx.top.log_window();
        let mut x = omega.zeros_like();
        for k in 0..x.len() {
            let r = x.element(k).range();
            *x.element_mut(k) = random_traceless(&mut rng, r, 2, 1.0);
        }
        let px = proj.apply(&x, logs).unwrap();
        let ppx = proj.apply(&px, logs).unwrap();
        assert!(ppx.sub(&px).unwrap().max_abs() < 1e-9, "idempotence {}", ppx.sub(&px).unwrap().max_abs());
        // Orthogonal to the log window.
        assert!(px.inner(logs).unwrap().abs() < 1e-9 * (1.0 + logs.norm()));
        // Zero maps to zero.
        assert!(proj.apply(&x.zeros_like(), logs).unwrap().max_abs() == 0.0);
    }

    #[test]
    fn flow_correction_matches_dense_solve_on_tiny_window() {
        // l = 2 on a 4-site chain: small enough to solve the projected
        // system densely over a basis of S_perp.
        let ham = ising(4);
        let omega = evolved_window(4, 2, 0.8);
        let ctx = FlowContext::analyze(&omega, 1e-10).unwrap();
        let proj = SPerpProjector::build(&ham, &ctx).unwrap();
        let logs = ctx.top.log_window();
        let base = chi_bar(&ham, &omega).unwrap();
        let opts = FlowOptions::default();
        let (y, iters, _) = solve_flow_correction(&proj, &ctx.top, &base, None, &opts).unwrap();
        assert!(iters <= opts.cg_max_iter);
        // Dense reference: basis of the window space, projected.
        let mut basis: Vec<OperatorWindow> = Vec::new();
        for k in 0..omega.len() {
            let dim = omega.element(k).dim();
            for b in crate::random::hermitian_basis(dim) {
                let mut w = omega.zeros_like();
                *w.element_mut(k) = HermitianOperator::new(omega.element(k).range(), 2, b).unwrap();
                let pw = proj.apply(&w, logs).unwrap();
                if pw.norm() > 1e-12 {
                    basis.push(pw);
                }
            }
        }
        let m = basis.len();
        let mut amat = ndarray::Array2::<num_complex::Complex64>::zeros((m, m));
        let mut bvec = vec![0.0f64; m];
        let hbase = ctx.top.hessian_apply(&base).unwrap().scaled(-1.0);
        for i in 0..m {
            let abi = proj
                .apply(&ctx.top.hessian_apply(&basis[i]).unwrap().scaled(-1.0), logs)
                .unwrap();
            for j in 0..m {
                amat[(i, j)] = num_complex::Complex64::new(basis[j].inner(&abi).unwrap(), 0.0);
            }
            bvec[i] = basis[i].inner(&hbase).unwrap();
        }
        // Solve the (singular, consistent) normal system by spectral
        // pseudo-inversion.
        let (w, u) = crate::eig::zheevd(&amat).unwrap();
        let wmax = w.iter().cloned().fold(0.0, f64::max);
        let mut coeff = vec![0.0f64; m];
        for (j, &wj) in w.iter().enumerate() {
            if wj > 1e-10 * wmax {
                let mut ub = 0.0;
                for i in 0..m {
                    ub += (u[(i, j)].conj() * num_complex::Complex64::new(bvec[i], 0.0)).re;
                }
                let s = ub / wj;
                for i in 0..m {
                    coeff[i] += (u[(i, j)] * s).re;
                }
            }
        }
        let mut reference = omega.zeros_like();
        for (i, c) in coeff.iter().enumerate() {
            reference.axpy(*c, &basis[i]).unwrap();
        }
        let diff = y.sub(&reference).unwrap().norm();
        assert!(diff < 1e-7 * (1.0 + reference.norm()), "dense solve mismatch {diff:e}");
    }

    #[test]
    fn quadratic_form_negative_on_random_directions() {
        let mut rng = rng(83);
        let omega = evolved_window(5, 2, 1.1);
        let ws = WindowSpectral::analyze(&omega, 1e-12).unwrap();
        for _ in 0..10 {
            let mut x = omega.zeros_like();
            for k in 0..x.len() {
                let r = x.element(k).range();
                *x.element_mut(k) = random_traceless(&mut rng, r, 2, 1.0);
            }
            let q = x.inner(&ws.hessian_apply(&x).unwrap()).unwrap();
            assert!(q < 0.0, "entropy Hessian not negative: {q}");
        }
    }

    #[test]
    fn psi_flow_is_compatible_and_meets_current_condition() {
        let ham = ising(7);
        let omega = evolved_window(7, 3, 1.4);
        let opts = FlowOptions { force: true, ..Default::default() };
        let outcome = psi_flow(&ham, &omega, &opts, None).unwrap();
        let (chi, report) = match outcome {
            FlowOutcome::Solved { chi, report, .. } => (chi, report),
            FlowOutcome::Declined(_) => panic!("forced flow declined"),
        };
        // Compatibility.
        let (ok, resid) = crate::local_state::compatibility_check(&ham, &chi, &omega).unwrap();
        assert!(ok, "flow derivative incompatible: {resid:e}");
        // Current condition.
        let err = (report.achieved_current - report.target_current).abs();
        assert!(
            err <= 1e-8 * (1.0 + report.target_current.abs()),
            "current condition violated: achieved {} target {}",
            report.achieved_current,
            report.target_current
        );
        // Energy conservation.
        let hset = hamiltonian_window_set(&ham, &omega).unwrap();
        assert!(chi.inner(&hset).unwrap().abs() < 1e-10);
        // Trace-step consistency of the derivative (it is Phi of an
        // extension, so its lower marginal derivative matches phi of the
        // window).
        let lower = chi.trace_step().unwrap();
        let want = phi(&ham, &omega).unwrap();
        assert!(lower.sub(&want).unwrap().max_abs() < 1e-10);
    }

    #[test]
    fn minimizer_is_stationary_on_s_perp() {
        let ham = ising(6);
        let omega = evolved_window(6, 2, 1.0);
        let opts = FlowOptions { force: true, ..Default::default() };
        let ctx = FlowContext::analyze(&omega, opts.floor).unwrap();
        let chi = match psi_flow(&ham, &omega, &opts, None).unwrap() {
            FlowOutcome::Solved { chi, .. } => chi,
            _ => panic!("declined"),
        };
        // b(chi + eps v) has vanishing first-order term for v in S_perp:
        // the gradient H chi projected onto S_perp is ~ 0.
        let proj = SPerpProjector::build(&ham, &ctx).unwrap();
        let logs = ctx.top.log_window();
        let grad = proj.apply(&ctx.top.hessian_apply(&chi).unwrap(), logs).unwrap();
        let scale = ctx.top.hessian_apply(&chi).unwrap().norm().max(1.0);
        assert!(grad.norm() / scale < 1e-7, "stationarity residual {}", grad.norm() / scale);
    }

    #[test]
    fn fallback_triggers_below_thresholds() {
        // The t = 0 quench-2 window has (numerically) zero current.
        let ham = ising(6);
        let omega = evolved_window(6, 3, 0.0);
        let opts = FlowOptions::default();
        match psi_flow(&ham, &omega, &opts, None).unwrap() {
            FlowOutcome::Declined(FlowDecline::FallbackToPetz { .. }) => {}
            FlowOutcome::Solved { .. } => panic!("expected fallback at t = 0"),
        }
    }

    #[test]
    fn alpha_is_zero_for_stationary_zero_info_state() {
        // Maximally mixed window: no current, no top-scale information,
        // derivative identically zero.
        let ham = ising(6);
        let mm: Vec<_> = (0..3)
            .map(|k| HermitianOperator::maximally_mixed(SiteRange::from_span(k, 4), 2))
            .collect();
        let omega = OperatorWindow::new(BoundaryMode::Finite, mm).unwrap();
        let opts = FlowOptions { force: true, ..Default::default() };
        match psi_flow(&ham, &omega, &opts, None).unwrap() {
            FlowOutcome::Solved { chi, report, .. } => {
                assert!(report.alpha.abs() < 1e-12);
                assert!(chi.max_abs() < 1e-12);
            }
            _ => panic!("declined"),
        }
    }

    #[test]
    fn early_time_flow_tracks_oracle() {
        // Information has not reached the cutoff: the flow derivative
        // agrees with the dense oracle derivative. The quench-2 state is
        // evolved in shifted form, (rho + mm) / 2, exactly as production
        // runs do: the unshifted state has vanishing eigenvalues that sit
        // on the logarithm floor.
        let n = 7;
        let l = 4i64;
        let t = 0.25;
        let ham = ising(n);
        let (_, h) = oracle::build_hamiltonian(IsingParams::paper(), n).unwrap();
        let prop = oracle::Propagator::new(&h).unwrap();
        let rho0 = oracle::initial_state(oracle::QuenchKind::Quench2, n).unwrap();
        let full = rho0.range();
        let shifted0 = rho0
            .scaled(0.5)
            .add(&HermitianOperator::maximally_mixed(full, 2).scaled(0.5))
            .unwrap();
        let rho = prop.evolve(&shifted0, t).unwrap();
        let omega = oracle::marginals(&rho, l).unwrap();
        let opts = FlowOptions { force: true, ..Default::default() };
        let chi = match psi_flow(&ham, &omega, &opts, None).unwrap() {
            FlowOutcome::Solved { chi, .. } => chi,
            _ => panic!("declined"),
        };
        let want = oracle::marginals(&prop.derivative(&rho).unwrap(), l).unwrap();
        let mut worst = 0.0f64;
        for k in 0..chi.len() {
            worst = worst.max(chi.element(k).sub(want.element(k)).unwrap().max_abs());
        }
        assert!(worst < 1e-6, "early-time flow deviates from oracle by {worst:e}");
    }

    #[test]
    fn log_pairing_current_matches_entropy_derivative() {
        // The nats current functional applied to the exact derivative
        // equals d/dt [sum_n S(Omega_n^l) - sum'_n S(Omega_n^{l-1})] by
        // finite differences of the oracle evolution.
        let n = 6;
        let l = 3i64;
        let t = 1.0;
        let ham = ising(n);
        let (_, h) = oracle::build_hamiltonian(IsingParams::paper(), n).unwrap();
        let prop = oracle::Propagator::new(&h).unwrap();
        let rho0 = oracle::initial_state(oracle::QuenchKind::Quench2, n).unwrap();
        let rho = prop.evolve(&rho0, t).unwrap();
        let omega = oracle::marginals(&rho, l).unwrap();
        let ctx = FlowContext::analyze(&omega, 1e-12).unwrap();
        let chi = oracle::marginals(&prop.derivative(&rho).unwrap(), l).unwrap();
        let lower_derivative = phi(&ham, &omega).unwrap();
        let j = current_of(&lower_derivative, &chi, &ctx).unwrap();
        let trapezoid = |rho: &HermitianOperator| -> f64 {
            let upper = oracle::marginals(rho, l).unwrap();
            let lower = oracle::marginals(rho, l - 1).unwrap();
            let mut acc = 0.0;
            for e in upper.elements() {
                acc += crate::hermitian::entropy_nats(e).unwrap();
            }
            for k in 1..lower.len() - 1 {
                acc -= crate::hermitian::entropy_nats(lower.element(k)).unwrap();
            }
            acc
        };
        let dt = 1e-5;
        let plus = prop.evolve(&rho0, t + dt).unwrap();
        let minus = prop.evolve(&rho0, t - dt).unwrap();
        let fd = (trapezoid(&plus) - trapezoid(&minus)) / (2.0 * dt);
        assert!((j - fd).abs() < 1e-6, "current {j} vs trapezoid derivative {fd}");
        let _ = trace_inner;
        let _ = min_norm_extension;
        let _ = kernel_project_window;
    }
}
