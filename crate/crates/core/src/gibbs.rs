//! l-local Gibbs states: maximum-entropy extension of a window by a
//! ladder of Newton minimizations of the truncated total information,
//! error certificates from the trace-norm recovery bound, and recovery of
//! the local terms of the Gibbs logarithm.

use crate::error::{Error, Result};
use crate::flow::WindowSpectral;
use crate::hamiltonian::Hamiltonian;
use crate::hermitian::{HermitianOperator, SiteRange, LN_2};
use crate::lattice::{local_currents, CurrentField, MarginalTower};
use crate::local_state::{BoundaryMode, OperatorWindow};
use serde::Serialize;

/// Ladder and Newton tunables.
#[derive(Clone, Copy, Debug)]
pub struct GibbsOptions {
    /// Projected-gradient norm at which a stage counts as converged.
    pub grad_tol: f64,
    pub max_newton_iterations: usize,
    /// Backtracking factor of the Armijo line search.
    pub backtrack: f64,
    /// Ladder cap relative to the input scale.
    pub lambda_margin: i64,
    /// Inter-stage output-marginal change below which the ladder stops.
    pub stage_tol: f64,
    pub cg_tol: f64,
    pub cg_max_iter: usize,
    /// Eigenvalue floor for logarithms inside the objective.
    pub floor: f64,
}

impl Default for GibbsOptions {
    fn default() -> Self {
        GibbsOptions {
            grad_tol: 1e-10,
            max_newton_iterations: 80,
            backtrack: 0.5,
            lambda_margin: 6,
            stage_tol: 1e-10,
            cg_tol: 1e-10,
            cg_max_iter: 300,
            floor: 1e-12,
        }
    }
}

/// Affine feasibility of a stage: adjacent-overlap consistency plus the
/// pinned scale-l marginals. Directions live in the kernel of the stacked
/// constraint map; projection solves the small Gram system by CG.
struct FeasibleSpace {
    targets: OperatorWindow,
    ti: bool,
}

impl FeasibleSpace {
    fn new(omega_l: &OperatorWindow) -> Self {
        FeasibleSpace {
            ti: omega_l.boundary() == BoundaryMode::TranslationInvariant,
            targets: omega_l.clone(),
        }
    }

    /// Stacked constraints A(x): overlap disagreements (scale lambda-1)
    /// followed by scale-l marginals of canonical covering elements.
    fn apply_a(&self, x: &OperatorWindow) -> Result<Vec<HermitianOperator>> {
        let mut out = Vec::new();
        if self.ti {
            let e = x.element(0);
            let l = e.trace_left_site()?;
            let r = e.trace_right_site()?.with_range(l.range())?;
            out.push(l.sub(&r)?);
            let w = self.targets.element(0).range();
            let keep = SiteRange::from_span(e.range().left(), w.site_count());
            out.push(e.partial_trace(keep)?);
            return Ok(out);
        }
        for k in 0..x.len() - 1 {
            let l = x.element(k).trace_left_site()?;
            let r = x.element(k + 1).trace_right_site()?;
            out.push(l.sub(&r)?);
        }
        let l_sites = self.targets.element(0).range().site_count();
        for m in 0..self.targets.len() {
            let w = self.targets.element(m).range();
            let holder = canonical_holder(x, w);
            out.push(x.element(holder).partial_trace(SiteRange::from_span(w.left(), l_sites))?);
        }
        Ok(out)
    }

    fn apply_at(&self, y: &[HermitianOperator], like: &OperatorWindow) -> Result<OperatorWindow> {
        let mut out = like.zeros_like();
        if self.ti {
            let e = like.element(0);
            let lifted_l = y[0].with_range(e.range().shrink_left(1))?.embed(e.range())?;
            let lifted_r = y[0].with_range(e.range().shrink_right(1))?.embed(e.range())?;
            out.element_mut(0).add_scaled(&lifted_l, 1.0)?;
            out.element_mut(0).add_scaled(&lifted_r, -1.0)?;
            out.element_mut(0).add_scaled(&y[1].embed(e.range())?, 1.0)?;
            return Ok(out);
        }
        let pairs = like.len() - 1;
        for (k, yk) in y.iter().take(pairs).enumerate() {
            let ek = like.element(k).range();
            let ek1 = like.element(k + 1).range();
            out.element_mut(k).add_scaled(&yk.embed(ek)?, 1.0)?;
            out.element_mut(k + 1)
                .add_scaled(&yk.with_range(ek1.shrink_right(1))?.embed(ek1)?, -1.0)?;
        }
        for (m, ym) in y.iter().skip(pairs).enumerate() {
            let w = self.targets.element(m).range();
            let holder = canonical_holder(like, w);
            let target = like.element(holder).range();
            out.element_mut(holder).add_scaled(&ym.embed(target)?, 1.0)?;
        }
        Ok(out)
    }

    /// Project a direction onto the kernel of the constraints.
    fn project_direction(&self, x: &OperatorWindow, opts: &GibbsOptions) -> Result<OperatorWindow> {
        let b = self.apply_a(x)?;
        let z = self.solve_gram(&b, x, opts)?;
        let mut out = x.clone();
        out.axpy(-1.0, &self.apply_at(&z, x)?)?;
        Ok(out)
    }

    /// Restore feasibility of a drifted iterate: x <- x - A^T (AA^T)^+ (A x - b0).
    fn restore(&self, x: &mut OperatorWindow, opts: &GibbsOptions) -> Result<()> {
        let mut defect = self.apply_a(x)?;
        // Subtract the affine targets: zero for overlaps, Omega_l for the
        // marginal rows.
        let pairs = defect.len() - self.targets.len();
        for (m, row) in defect.iter_mut().skip(pairs).enumerate() {
            let tgt = self.targets.element(m).with_range(row.range())?;
            *row = row.sub(&tgt)?;
        }
        let worst = defect.iter().fold(0.0f64, |m, r| m.max(r.max_abs()));
        if worst < 1e-13 {
            return Ok(());
        }
        let z = self.solve_gram(&defect, x, opts)?;
        x.axpy(-1.0, &self.apply_at(&z, x)?)?;
        x.resymmetrize();
        Ok(())
    }

    fn solve_gram(
        &self,
        b: &[HermitianOperator],
        like: &OperatorWindow,
        opts: &GibbsOptions,
    ) -> Result<Vec<HermitianOperator>> {
        let dot = |a: &[HermitianOperator], c: &[HermitianOperator]| -> f64 {
            a.iter().zip(c).map(|(x, y)| crate::hermitian::trace_inner(x, y).unwrap()).sum()
        };
        let mut z: Vec<HermitianOperator> =
            b.iter().map(|x| HermitianOperator::zero(x.range(), x.local_dim())).collect();
        let mut r = b.to_vec();
        let bnorm = dot(&r, &r).sqrt();
        if bnorm <= 1e-300 {
            return Ok(z);
        }
        // The constraint rows are redundant (marginal rows overlap the
        // consistency rows), so the Gram is singular; CG lives in the
        // range component and must stop on stagnation before roundoff
        // sends the null component wandering.
        let mut p = r.clone();
        let mut rr = dot(&r, &r);
        let mut stagnant = 0usize;
        for _ in 0..opts.cg_max_iter {
            if rr.sqrt() <= (opts.cg_tol * bnorm).max(1e-16) {
                break;
            }
            let ap = self.apply_a(&self.apply_at(&p, like)?)?;
            let pap = dot(&p, &ap);
            if pap <= 1e-300 {
                break;
            }
            let alpha = rr / pap;
            for (zk, pk) in z.iter_mut().zip(&p) {
                zk.add_scaled(pk, alpha)?;
            }
            for (rk, apk) in r.iter_mut().zip(&ap) {
                rk.add_scaled(apk, -alpha)?;
            }
            let rr_new = dot(&r, &r);
            if rr_new > rr * 0.9999 {
                stagnant += 1;
                if stagnant > 4 {
                    break;
                }
            } else {
                stagnant = 0;
            }
            let beta = rr_new / rr;
            rr = rr_new;
            for (pk, rk) in p.iter_mut().zip(&r) {
                let mut next = rk.clone();
                next.add_scaled(pk, beta)?;
                *pk = next;
            }
        }
        Ok(z)
    }
}

fn canonical_holder(x: &OperatorWindow, w: SiteRange) -> usize {
    let k = (w.left() - x.first_left()).clamp(0, x.len() as i64 - 1) as usize;
    // The clamped leftmost element containing w.
    let mut k = k;
    while k > 0 && x.element(k).range().left() > w.left() {
        k -= 1;
    }
    k
}

/// The truncated total information I_tot^lambda of a stage window, nats:
/// sum_n I(Omega_n^lambda) - sum'_n I(mu_m), with the primed sum dropping
/// the leftmost and rightmost lower marginals.
fn truncated_info_nats(x: &OperatorWindow) -> Result<f64> {
    let d = x.local_dim() as f64;
    let dim_top = d.powi(x.scale() as i32 + 1);
    let mut acc = 0.0;
    for e in x.elements() {
        acc += dim_top.ln() - crate::hermitian::entropy_nats(e)?;
    }
    let mu = x.trace_step()?;
    let dim_b = dim_top / d;
    if x.boundary() == BoundaryMode::TranslationInvariant {
        acc -= dim_b.ln() - crate::hermitian::entropy_nats(mu.element(0))?;
    } else {
        for k in 1..mu.len() - 1 {
            acc -= dim_b.ln() - crate::hermitian::entropy_nats(mu.element(k))?;
        }
    }
    Ok(acc)
}

/// Gradient of the truncated information with respect to the stage window
/// (raw, before projection onto feasible directions), nats.
fn info_gradient_raw(x: &OperatorWindow, floor: f64) -> Result<OperatorWindow> {
    let mut grad = x.zeros_like();
    for (k, e) in x.elements().iter().enumerate() {
        *grad.element_mut(k) = e.matrix_log(floor)?;
    }
    let mu = x.trace_step()?;
    if x.boundary() == BoundaryMode::TranslationInvariant {
        let lifted = mu.element(0).matrix_log(floor)?.embed(x.element(0).range())?;
        grad.element_mut(0).add_scaled(&lifted, -1.0)?;
        return Ok(grad);
    }
    // Primed lower marginals mu_k, k = 1..K-1, each the right trace of
    // element k; the pullback embeds with a full identity.
    for k in 1..mu.len() - 1 {
        if k < x.len() {
            let lifted = mu.element(k).matrix_log(floor)?.embed(x.element(k).range())?;
            grad.element_mut(k).add_scaled(&lifted, -1.0)?;
        }
    }
    Ok(grad)
}

/// Hessian application of the truncated information (nats): the negated
/// entropy Hessians of the stage elements minus the pulled-back negated
/// Hessians of the primed lower marginals.
struct StageHessian {
    top: WindowSpectral,
    below: WindowSpectral,
    ti: bool,
}

impl StageHessian {
    fn analyze(x: &OperatorWindow, floor: f64) -> Result<Self> {
        let mu = x.trace_step()?;
        Ok(StageHessian {
            top: WindowSpectral::analyze(x, floor)?,
            below: WindowSpectral::analyze(&mu, floor)?,
            ti: x.boundary() == BoundaryMode::TranslationInvariant,
        })
    }

    fn apply(&self, zeta: &OperatorWindow) -> Result<OperatorWindow> {
        let mut out = self.top.hessian_apply(zeta)?.scaled(-1.0);
        let mu_zeta = zeta.trace_step()?;
        let h_mu = self.below.hessian_apply(&mu_zeta)?;
        if self.ti {
            let lifted = h_mu.element(0).embed(zeta.element(0).range())?;
            out.element_mut(0).add_scaled(&lifted, 1.0)?;
            return Ok(out);
        }
        for k in 1..h_mu.len() - 1 {
            if k < zeta.len() {
                let lifted = h_mu.element(k).embed(zeta.element(k).range())?;
                out.element_mut(k).add_scaled(&lifted, 1.0)?;
            }
        }
        Ok(out)
    }

    /// Preconditioner: inverse of the dominant (top-scale) term.
    fn precondition(&self, r: &OperatorWindow) -> Result<OperatorWindow> {
        Ok(self.top.hessian_inverse_apply(r)?.scaled(-1.0))
    }
}

/// One ladder stage result.
#[derive(Clone, Debug, Serialize)]
pub struct StageReport {
    pub lambda: i64,
    /// Minimized truncated total information, bits.
    pub min_info_bits: f64,
    pub newton_iterations: usize,
    pub projected_gradient_norm: f64,
    /// Negative curvature was encountered (possible for lambda > l+1).
    pub indefinite: bool,
}

/// Ladder output: the extension at the requested scale with certificates.
pub struct LadderResult {
    pub omega_k: OperatorWindow,
    pub top: OperatorWindow,
    pub stages: Vec<StageReport>,
    pub converged: bool,
    /// Trace-norm certificate from the recovery bound, bits-based.
    pub certificate: f64,
    /// [min I_tot^{lambda_top}, min I_tot^{l+1}] bracket, bits.
    pub bracket: (f64, f64),
}

/// Minimize the truncated total information over extensions of `omega_l`
/// at scale `lambda`, starting from a feasible point. Newton-Raphson with
/// projected CG directions and an Armijo backtracking line search.
pub fn minimize_truncated_info(
    omega_l: &OperatorWindow,
    start: &OperatorWindow,
    opts: &GibbsOptions,
) -> Result<(OperatorWindow, StageReport)> {
    let lambda = start.scale();
    if lambda <= omega_l.scale() {
        return Err(Error::Config("stage scale must exceed the pinned scale".into()));
    }
    let feasible = FeasibleSpace::new(omega_l);
    let mut x = start.clone();
    feasible.restore(&mut x, opts)?;
    let mut indefinite = false;
    let mut iterations = 0;
    let mut grad_norm = f64::INFINITY;
    let mut best_grad = f64::INFINITY;
    let mut since_best = 0usize;
    while iterations < opts.max_newton_iterations {
        // The raw gradient carries the full logarithms (norm of order
        // ten); projecting twice pushes the feasibility-solve error below
        // the gradient tolerance.
        let grad_raw = info_gradient_raw(&x, opts.floor)?;
        let once = feasible.project_direction(&grad_raw, opts)?;
        let grad = feasible.project_direction(&once, opts)?;
        grad_norm = grad.norm();
        if grad_norm <= opts.grad_tol {
            break;
        }
        // Stall guard: stop when Newton no longer makes progress (the
        // achievable floor is set by the feasibility solve).
        if grad_norm < 0.5 * best_grad {
            best_grad = grad_norm;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= 8 {
                break;
            }
        }
        let hess = StageHessian::analyze(&x, opts.floor)?;
        // Projected CG on H delta = -grad; fall back to the
        // preconditioned gradient direction on negative curvature.
        let (delta, went_indefinite) = projected_newton_direction(&feasible, &hess, &grad, opts)?;
        indefinite |= went_indefinite;
        if !delta.norm().is_finite() || delta.norm() > 1e6 * (1.0 + x.norm()) {
            break;
        }
        // Backtracking with a positivity guard. Near convergence the
        // objective differences drop below roundoff while the gradient is
        // still resolvable; there the quadratic model is trusted and only
        // positivity is enforced.
        let need_armijo = grad_norm > 1e-5;
        let f0 = truncated_info_nats(&x)?;
        let slope = grad.inner(&delta)?;
        let mut t = 1.0f64;
        let mut moved = false;
        for _ in 0..40 {
            let mut cand = x.clone();
            cand.axpy(t, &delta)?;
            let mut ok = true;
            for e in cand.elements() {
                if !e.min_eig_above(1e-14) {
                    ok = false;
                    break;
                }
            }
            if ok {
                let accept = if need_armijo {
                    let f1 = truncated_info_nats(&cand)?;
                    f1 <= f0 + 1e-4 * t * slope
                } else {
                    true
                };
                if accept {
                    x = cand;
                    moved = true;
                    break;
                }
            }
            t *= opts.backtrack;
        }
        iterations += 1;
        if !moved {
            break;
        }
        feasible.restore(&mut x, opts)?;
    }
    let report = StageReport {
        lambda,
        min_info_bits: truncated_info_nats(&x)? / LN_2,
        newton_iterations: iterations,
        projected_gradient_norm: grad_norm,
        indefinite,
    };
    Ok((x, report))
}

fn projected_newton_direction(
    feasible: &FeasibleSpace,
    hess: &StageHessian,
    grad: &OperatorWindow,
    opts: &GibbsOptions,
) -> Result<(OperatorWindow, bool)> {
    let apply = |v: &OperatorWindow| -> Result<OperatorWindow> {
        feasible.project_direction(&hess.apply(v)?, opts)
    };
    let precond = |r: &OperatorWindow| -> Result<OperatorWindow> {
        feasible.project_direction(&hess.precondition(r)?, opts)
    };
    let b = grad.scaled(-1.0);
    let mut x = b.zeros_like();
    let mut r = b.clone();
    let bnorm = r.norm();
    let mut z = precond(&r)?;
    let mut p = z.clone();
    let mut rz = r.inner(&z)?;
    let mut indefinite = false;
    for _ in 0..opts.cg_max_iter {
        let rnorm = r.norm();
        if rnorm <= opts.cg_tol.max(1e-12) * bnorm.max(1e-300) {
            break;
        }
        let ap = apply(&p)?;
        let pap = p.inner(&ap)?;
        if pap <= 1e-12 * p.norm().powi(2) {
            // Vanishing or negative curvature: stop before the step size
            // explodes; flag genuine negative curvature above roundoff.
            if rnorm > 1e-9 * bnorm.max(1e-300) && pap < -1e-12 * p.norm().powi(2) {
                indefinite = true;
            }
            break;
        }
        let alpha = rz / pap;
        x.axpy(alpha, &p)?;
        r.axpy(-alpha, &ap)?;
        z = precond(&r)?;
        let rz_new = r.inner(&z)?;
        let beta = rz_new / rz;
        rz = rz_new;
        let mut p_new = z.clone();
        p_new.axpy(beta, &p)?;
        p = p_new;
    }
    if x.norm() == 0.0 {
        // Pure (preconditioned) descent as a fallback direction.
        let d = precond(&b)?;
        let slope = grad.inner(&d)?;
        if slope < 0.0 {
            return Ok((d, indefinite));
        }
        return Ok((b, indefinite));
    }
    // Guarantee descent; otherwise fall back to the gradient.
    if grad.inner(&x)? >= 0.0 {
        return Ok((b, true));
    }
    Ok((x, indefinite))
}

/// Run the ladder lambda = l+1, l+2, ... and return the k-local marginals
/// of the maximum-entropy extension, the Kim-type certificate, and the
/// stage reports.
pub fn gibbs_ladder(omega_l: &OperatorWindow, target_k: i64, opts: &GibbsOptions) -> Result<LadderResult> {
    let l = omega_l.scale();
    if target_k <= l {
        return Err(Error::Config(format!("target scale {target_k} must exceed {l}")));
    }
    let mut cap = l + opts.lambda_margin.max(target_k - l);
    if omega_l.boundary() != BoundaryMode::TranslationInvariant {
        // A finite window cannot extend past its own span.
        let top = omega_l.span().l();
        if target_k > top {
            return Err(Error::Config(format!(
                "target scale {target_k} exceeds the window span diameter {top}"
            )));
        }
        cap = cap.min(top);
    }
    let mut stages = Vec::new();
    let mut current = omega_l.clone();
    let mut prev_output: Option<OperatorWindow> = None;
    let mut converged = false;
    let mut top = omega_l.clone();
    for lambda in (l + 1)..=cap {
        let (start, _) = crate::petz::extend_petz_tol(&current, 1e-6)?;
        let (optimum, report) = minimize_truncated_info(omega_l, &start, opts)?;
        stages.push(report);
        top = optimum.clone();
        if lambda >= target_k {
            let output = optimum.trace_to(target_k)?;
            if let Some(prev) = &prev_output {
                let diff = output.sub(prev).map(|d| d.max_abs()).unwrap_or(f64::INFINITY);
                if diff < opts.stage_tol {
                    converged = true;
                    prev_output = Some(output);
                    break;
                }
            }
            prev_output = Some(output);
        }
        current = optimum;
    }
    let omega_k = match prev_output {
        Some(o) => o,
        None => top.trace_to(target_k.min(top.scale()))?,
    };
    // Certificate: recovery bound from the estimated interface
    // information one scale above the final stage.
    let certificate = {
        let est = crate::petz::extend_petz_tol(&top, 1e-5)
            .ok()
            .map(|(ext, _)| {
                let mut worst = 0.0f64;
                for e in ext.elements() {
                    if let Ok(cmi) = crate::petz::interface_information(e) {
                        worst = worst.max(cmi.max(0.0));
                    }
                }
                worst
            })
            .unwrap_or(f64::NAN);
        2.0 * (2.0 * est).max(0.0).sqrt()
    };
    let bracket = (
        stages.last().map(|s| s.min_info_bits).unwrap_or(f64::NAN),
        stages.first().map(|s| s.min_info_bits).unwrap_or(f64::NAN),
    );
    Ok(LadderResult { omega_k, top, stages, converged, certificate, bracket })
}

/// Recover the l-local terms of the Gibbs logarithm from a converged
/// ladder: the minimum-norm window `omega` with
/// sum_m embed(omega_m) = -ln rho_Gibbs (up to an identity shift), solved
/// as least squares over the embedding Gram by CG. Only the reconstructed
/// state exp(-sum omega) is gauge invariant; compare marginals, never raw
/// tensors.
pub fn recover_log_terms(ladder_top: &OperatorWindow, scale_l: i64, opts: &GibbsOptions) -> Result<OperatorWindow> {
    if ladder_top.boundary() == BoundaryMode::TranslationInvariant {
        return Err(Error::Config("log-term recovery runs on finite windows".into()));
    }
    let lambda = ladder_top.scale();
    if scale_l >= lambda {
        return Err(Error::Config("ladder top must exceed the recovery scale".into()));
    }
    let mu = ladder_top.trace_step()?;
    let d = ladder_top.local_dim();
    // B_n = 1_{left site} x ln(mu_{n+1/2}) - ln(Omega_n^lambda), with the
    // lifted term dropped on the rightmost element.
    let mut b = Vec::with_capacity(ladder_top.len());
    for (n, e) in ladder_top.elements().iter().enumerate() {
        let mut bn = e.matrix_log(opts.floor)?.scaled(-1.0);
        // mu index n+1 is the left trace of element n (its right
        // sub-window); the lifted term is dropped on the rightmost
        // element.
        if n + 1 < ladder_top.len() {
            let lifted = mu.element(n + 1).matrix_log(opts.floor)?.embed(e.range())?;
            bn.add_scaled(&lifted, 1.0)?;
        }
        b.push(bn);
    }
    let b = OperatorWindow::new(ladder_top.boundary(), b)?;
    // Geometry of the output window: all scale-l sub-windows of the span.
    let span = ladder_top.span();
    let count = (span.l() - scale_l + 1) as usize;
    let omega_geom: Vec<HermitianOperator> = (0..count)
        .map(|k| HermitianOperator::zero(SiteRange::from_span(span.left() + k as i64, scale_l as usize + 1), d))
        .collect();
    let omega_geom = OperatorWindow::new(BoundaryMode::Finite, omega_geom)?;
    // Normal equations: G omega = rhs with G the embedding Gram. All
    // global factors d^{N - |union|} are normalized by d^{-N}.
    let pair_weight = |a: SiteRange, c: SiteRange| -> f64 {
        let left = a.left().min(c.left());
        let right = a.right().max(c.right());
        (d as f64).powi(-((right - left + 1) as i32))
    };
    let cross = |x: &HermitianOperator, target: SiteRange| -> Result<HermitianOperator> {
        // Marginal of embed(x) onto target, normalized per site of the
        // union: trace the part of x outside target, embed mixed.
        let xr = x.range();
        let keep_left = xr.left().max(target.left());
        let keep_right = xr.right().min(target.right());
        if keep_left > keep_right {
            // Disjoint windows: embed(x) marginalizes to Tr(x) times the
            // identity, with the union weight.
            let w = pair_weight(xr, target);
            return Ok(HermitianOperator::identity(target, d).scaled(x.trace() * w));
        }
        let keep = SiteRange::from_span(keep_left, (keep_right - keep_left + 1) as usize);
        let traced = x.partial_trace(keep)?;
        let w = pair_weight(xr, target);
        Ok(traced.embed(target)?.scaled(w))
    };
    let apply_g = |w: &OperatorWindow| -> Result<OperatorWindow> {
        let mut out = w.zeros_like();
        for m in 0..w.len() {
            let target = w.element(m).range();
            for mp in 0..w.len() {
                let c = cross(w.element(mp), target)?;
                out.element_mut(m).add_scaled(&c, 1.0)?;
            }
        }
        Ok(out)
    };
    let rhs = {
        let mut out = omega_geom.zeros_like();
        for m in 0..out.len() {
            let target = out.element(m).range();
            for n in 0..b.len() {
                let c = cross(b.element(n), target)?;
                out.element_mut(m).add_scaled(&c, 1.0)?;
            }
        }
        out
    };
    // CG on the PSD Gram; starting from zero yields the minimum-norm
    // solution of the (consistent) normal equations.
    let mut x = omega_geom.zeros_like();
    let mut r = rhs.sub(&apply_g(&x)?)?;
    let bnorm = r.norm().max(1e-300);
    let mut p = r.clone();
    let mut rr = r.inner(&r)?;
    for _ in 0..opts.cg_max_iter.max(500) {
        if rr.sqrt() <= 1e-12 * bnorm {
            break;
        }
        let ap = apply_g(&p)?;
        let pap = p.inner(&ap)?;
        if pap <= 0.0 {
            break;
        }
        let alpha = rr / pap;
        x.axpy(alpha, &p)?;
        r.axpy(-alpha, &ap)?;
        let rr_new = r.inner(&r)?;
        let beta = rr_new / rr;
        rr = rr_new;
        let mut p_new = r.clone();
        p_new.axpy(beta, &p)?;
        p = p_new;
    }
    Ok(x)
}

/// Reconstruct the global state exp(-sum_m embed(omega_m)) (trace
/// normalized) on the window span; the gauge-invariant validation surface
/// of `recover_log_terms`.
pub fn reconstruct_from_log_terms(omega: &OperatorWindow) -> Result<HermitianOperator> {
    let span = omega.span();
    let mut exponent = HermitianOperator::zero(span, omega.local_dim());
    for e in omega.elements() {
        exponent.add_scaled(&e.embed(span)?, -1.0)?;
    }
    let raw = exponent.matrix_exp()?;
    let tr = raw.trace();
    Ok(raw.scaled(1.0 / tr))
}

/// Currents of the maximum-entropy extension, for comparison against the
/// currents of the actual evolved state at the same scales.
pub fn gibbs_current_comparison(
    omega_l: &OperatorWindow,
    ham: &Hamiltonian,
    target_k: i64,
    opts: &GibbsOptions,
) -> Result<(Vec<(i64, CurrentField)>, LadderResult)> {
    let ladder = gibbs_ladder(omega_l, target_k, opts)?;
    let tower = MarginalTower::from_window(&ladder.top)?;
    let mut fields = Vec::new();
    for l in 1..ladder.top.scale() {
        fields.push((l, local_currents(&tower, ham, l)?));
    }
    Ok((fields, ladder))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hamiltonian::IsingParams;
    use crate::random::{random_hermitian, rng};

    #[test]
    fn feasible_space_adjoint_property() {
        let mut rng = rng(200);
        let (_, rho) = gibbs_state(5, 0.5);
        let omega1 = oracle::marginals(&rho, 1).unwrap();
        let (start, _) = crate::petz::extend_petz(&omega1).unwrap();
        let feas = FeasibleSpace::new(&omega1);
        let mut x = start.zeros_like();
        for k in 0..x.len() {
            let r = x.element(k).range();
            *x.element_mut(k) = random_hermitian(&mut rng, r, 2, 1.0);
        }
        let ax = feas.apply_a(&x).unwrap();
        let y: Vec<HermitianOperator> = ax
            .iter()
            .map(|row| random_hermitian(&mut rng, row.range(), 2, 1.0))
            .collect();
        let lhs: f64 = ax
            .iter()
            .zip(&y)
            .map(|(a, b)| crate::hermitian::trace_inner(a, b).unwrap())
            .sum();
        let aty = feas.apply_at(&y, &start).unwrap();
        let rhs = x.inner(&aty).unwrap();
        assert!((lhs - rhs).abs() < 1e-9 * (1.0 + lhs.abs()), "adjoint broken: {lhs} vs {rhs}");
    }
    use crate::hermitian::trace_distance;
    use crate::oracle;

    fn gibbs_state(n: usize, beta: f64) -> (Hamiltonian, HermitianOperator) {
        let (ham, h) = oracle::build_hamiltonian(IsingParams::paper(), n).unwrap();
        let e = h.scaled(-beta).matrix_exp().unwrap();
        let tr = e.trace();
        (ham, e.scaled(1.0 / tr))
    }

    #[test]
    fn maximally_mixed_ladder_is_fixed() {
        let mm: Vec<_> = (0..4)
            .map(|k| HermitianOperator::maximally_mixed(SiteRange::from_span(k, 2), 2))
            .collect();
        let omega1 = OperatorWindow::new(BoundaryMode::Finite, mm).unwrap();
        let opts = GibbsOptions::default();
        let out = gibbs_ladder(&omega1, 3, &opts).unwrap();
        for e in out.omega_k.elements() {
            let want = HermitianOperator::maximally_mixed(e.range(), 2);
            assert!(e.sub(&want).unwrap().max_abs() < 1e-10);
        }
        // Identity input: certificate is (numerically) zero.
        assert!(out.certificate < 1e-5, "certificate {}", out.certificate);
        for s in &out.stages {
            assert!(s.min_info_bits.abs() < 1e-9);
        }
    }

    #[test]
    fn ladder_monotonicity_of_stage_minima() {
        // Nested feasible sets: min I_tot^{lambda+1} >= min I_tot^lambda.
        let (_, rho) = gibbs_state(5, 0.5);
        let omega1 = oracle::marginals(&rho, 1).unwrap();
        let opts = GibbsOptions::default();
        let out = gibbs_ladder(&omega1, 4, &opts).unwrap();
        for w in out.stages.windows(2) {
            assert!(
                w[1].min_info_bits >= w[0].min_info_bits - 1e-9,
                "stage minima not monotone: {} then {}",
                w[0].min_info_bits,
                w[1].min_info_bits
            );
        }
    }

    #[test]
    fn ladder_reconstructs_global_gibbs_marginals() {
        // A 5-site global Gibbs state is the maximum-entropy state of its
        // 1-local marginals... not exactly (its log has 2-local terms),
        // but of its 2-local marginals it is. Reconstruction from the
        // 2-local marginals reproduces the global 4-scale marginals.
        let (_, rho) = gibbs_state(5, 0.5);
        let omega2 = oracle::marginals(&rho, 2).unwrap();
        let opts = GibbsOptions::default();
        let out = gibbs_ladder(&omega2, 4, &opts).unwrap();
        let want = oracle::marginals(&rho, 4).unwrap();
        for (a, b) in out.omega_k.elements().iter().zip(want.elements()) {
            let dist = trace_distance(a, b).unwrap();
            assert!(dist < 1e-7, "trace distance {dist:e}");
        }
    }

    #[test]
    fn stationarity_at_stage_minimum() {
        let (_, rho) = gibbs_state(4, 0.6);
        let omega1 = oracle::marginals(&rho, 1).unwrap();
        let opts = GibbsOptions::default();
        let (start, _) = crate::petz::extend_petz(&omega1).unwrap();
        let (opt, report) = minimize_truncated_info(&omega1, &start, &opts).unwrap();
        assert!(report.projected_gradient_norm <= 1e-8, "residual {}", report.projected_gradient_norm);
        // Random feasible perturbations do not lower the objective.
        let feas = FeasibleSpace::new(&omega1);
        let mut rng = crate::random::rng(101);
        let f0 = truncated_info_nats(&opt).unwrap();
        for _ in 0..5 {
            let mut dir = opt.zeros_like();
            for k in 0..dir.len() {
                let r = dir.element(k).range();
                *dir.element_mut(k) = crate::random::random_traceless(&mut rng, r, 2, 1.0);
            }
            let dir = feas.project_direction(&dir, &opts).unwrap();
            let dir = dir.scaled(1e-5 / dir.norm().max(1e-300));
            let mut cand = opt.clone();
            cand.axpy(1.0, &dir).unwrap();
            let f1 = truncated_info_nats(&cand).unwrap();
            assert!(f1 >= f0 - 1e-12, "perturbation lowered the minimum: {f0} -> {f1}");
        }
    }

    #[test]
    fn every_iterate_reproduces_the_pinned_marginals() {
        let (_, rho) = gibbs_state(5, 0.4);
        let omega1 = oracle::marginals(&rho, 1).unwrap();
        let opts = GibbsOptions::default();
        let out = gibbs_ladder(&omega1, 3, &opts).unwrap();
        let back = out.top.trace_to(1).unwrap();
        for (a, b) in back.elements().iter().zip(omega1.elements()) {
            assert!(a.sub(b).unwrap().max_abs() < 1e-10);
        }
    }

    #[test]
    fn log_terms_roundtrip_uniform_and_varying_beta() {
        // exp(-sum omega) rebuilt from the recovered terms matches the
        // true Gibbs state's marginals. Uniform beta and spatially
        // varying beta_n.
        let n = 5;
        let (_, hdense) = oracle::build_hamiltonian(IsingParams::paper(), n).unwrap();
        for varying in [false, true] {
            let exponent = if varying {
                let betas = [0.3, 0.5, 0.4, 0.6];
                let mut acc = HermitianOperator::zero(hdense.range(), 2);
                let ham = Hamiltonian::mixed_field_ising_finite(IsingParams::paper(), n);
                for (m, &beta) in betas.iter().enumerate() {
                    // Full bond term h_m embedded and scaled by -beta_m.
                    let k = ham.bond_operator(m as i64).unwrap();
                    acc.add_scaled(&k.embed(hdense.range()).unwrap(), -beta).unwrap();
                }
                // On-site parts with the same spatial profile.
                for site in 0..n as i64 {
                    if let Some(v) = ham.v_term(site) {
                        let beta = betas[(site as usize).min(betas.len() - 1)];
                        let vop = HermitianOperator::new(
                            SiteRange::from_span(site, 1),
                            2,
                            v.clone(),
                        )
                        .unwrap();
                        acc.add_scaled(&vop.embed(hdense.range()).unwrap(), -beta).unwrap();
                    }
                }
                acc
            } else {
                hdense.scaled(-0.5)
            };
            let raw = exponent.matrix_exp().unwrap();
            let rho = raw.scaled(1.0 / raw.trace());
            // Ladder from the 2-local marginals to the top scale.
            let omega2 = oracle::marginals(&rho, 2).unwrap();
            let opts = GibbsOptions::default();
            let ladder = gibbs_ladder(&omega2, 4, &opts).unwrap();
            let terms = recover_log_terms(&ladder.top, 2, &opts).unwrap();
            let rebuilt = reconstruct_from_log_terms(&terms).unwrap();
            for l in [1i64, 2, 3] {
                let want = oracle::marginals(&rho, l).unwrap();
                let got = oracle::marginals(&rebuilt, l).unwrap();
                for (a, b) in got.elements().iter().zip(want.elements()) {
                    let dist = trace_distance(a, b).unwrap();
                    assert!(dist < 1e-6, "varying={varying} l={l}: distance {dist:e}");
                }
            }
        }
    }

    #[test]
    fn log_terms_of_maximally_mixed_state() {
        let mm: Vec<_> = (0..3)
            .map(|k| HermitianOperator::maximally_mixed(SiteRange::from_span(k, 3), 2))
            .collect();
        let omega = OperatorWindow::new(BoundaryMode::Finite, mm).unwrap();
        let opts = GibbsOptions::default();
        let ladder = gibbs_ladder(&omega, 4, &opts).unwrap();
        let terms = recover_log_terms(&ladder.top, 2, &opts).unwrap();
        let rebuilt = reconstruct_from_log_terms(&terms).unwrap();
        let want = HermitianOperator::maximally_mixed(rebuilt.range(), 2);
        assert!(trace_distance(&rebuilt, &want).unwrap() < 1e-8);
    }

    #[test]
    fn equilibrium_current_ratio_is_near_one() {
        // Gibbs extension of a Gibbs state: currents match the original.
        let (ham, rho) = gibbs_state(6, 0.5);
        let omega2 = oracle::marginals(&rho, 2).unwrap();
        let opts = GibbsOptions::default();
        let (fields, _) = gibbs_current_comparison(&omega2, &ham, 4, &opts).unwrap();
        let tower = oracle::tower(&rho).unwrap();
        for (l, field) in &fields {
            let reference = local_currents(&tower, &ham, *l).unwrap();
            // Equilibrium: both essentially zero.
            let a = field.total_upward().unwrap_or(0.0);
            let b = reference.total_upward().unwrap_or(0.0);
            assert!(a.abs() < 1e-6 && b.abs() < 1e-6, "l={l}: {a} vs {b}");
        }
    }

    #[test]
    fn product_state_currents_vanish_for_extension_too() {
        let mut rng = crate::random::rng(102);
        let mut rho = crate::random::random_density(&mut rng, SiteRange::from_span(0, 1), 2);
        for k in 1..5 {
            rho = rho
                .tensor(&crate::random::random_density(&mut rng, SiteRange::from_span(k, 1), 2))
                .unwrap();
        }
        let ham = Hamiltonian::mixed_field_ising_finite(IsingParams::paper(), 5);
        let omega = oracle::marginals(&rho, 1).unwrap();
        let opts = GibbsOptions::default();
        let (fields, _) = gibbs_current_comparison(&omega, &ham, 3, &opts).unwrap();
        // The extension of a product window is close to the product state whose
        // currents at scales >= 1 are small.
        for (l, field) in &fields {
            if let Some(total) = field.total_upward() {
                assert!(total.abs() < 1e-4, "l={l}: unexpected current {total}");
            }
        }
    }
}
