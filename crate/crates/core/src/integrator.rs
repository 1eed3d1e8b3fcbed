//! Time stepping of local-state windows: adaptive embedded Runge-Kutta
//! with exact conservation of window-local constants of motion, the
//! maximally-mixed shift trick, a Suzuki-Trotter fallback that preserves
//! positivity, infinite-window growth and pruning, and symmetry-reduced
//! evolution.

use crate::error::{Error, Result};
use crate::flow::{psi_flow, FlowDecline, FlowOptions, FlowOutcome, FlowSolveReport};
use crate::hamiltonian::Hamiltonian;
use crate::hermitian::{HermitianOperator, SiteRange};
use crate::local_state::{BoundaryMode, OperatorWindow};
use crate::matutil::{embed_mul_left, embed_mul_right};
use crate::petz::psi_petz;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::sync::OnceLock;

/// Embedded Runge-Kutta coefficients, loaded from a vendored data file
/// whose integrity is checksummed.
#[derive(Clone, Debug)]
pub struct ButcherTableau {
    pub label: String,
    pub order: usize,
    pub embedded_order: usize,
    pub fsal: bool,
    pub c: Vec<f64>,
    pub a: Vec<Vec<f64>>,
    pub b: Vec<f64>,
    pub b_err: Vec<f64>,
}

#[derive(Deserialize)]
struct TableauFile {
    label: String,
    order: usize,
    embedded_order: usize,
    fsal: bool,
    c: Vec<[i64; 2]>,
    a: Vec<Vec<[i64; 2]>>,
    b: Vec<[i64; 2]>,
    b_hat: Vec<[i64; 2]>,
}

fn rat(p: [i64; 2]) -> f64 {
    p[0] as f64 / p[1] as f64
}

impl ButcherTableau {
    pub fn from_json(text: &str, expected_sha256: Option<&str>) -> Result<Self> {
        if let Some(want) = expected_sha256 {
            let got = hex_digest(text.as_bytes());
            if got != want {
                return Err(Error::BadTableau(format!("checksum mismatch: {got} != {want}")));
            }
        }
        let file: TableauFile = serde_json::from_str(text)?;
        let stages = file.b.len();
        if file.b_hat.len() != stages || file.c.len() != stages || file.a.len() != stages {
            return Err(Error::BadTableau("inconsistent stage counts".into()));
        }
        let c: Vec<f64> = file.c.iter().map(|&p| rat(p)).collect();
        let a: Vec<Vec<f64>> = file.a.iter().map(|row| row.iter().map(|&p| rat(p)).collect()).collect();
        let b: Vec<f64> = file.b.iter().map(|&p| rat(p)).collect();
        let b_hat: Vec<f64> = file.b_hat.iter().map(|&p| rat(p)).collect();
        // Basic sanity: both weight rows sum to one, nodes match row sums.
        let sum_b: f64 = b.iter().sum();
        let sum_bh: f64 = b_hat.iter().sum();
        if (sum_b - 1.0).abs() > 1e-14 || (sum_bh - 1.0).abs() > 1e-14 {
            return Err(Error::BadTableau("weights do not sum to 1".into()));
        }
        for (i, row) in a.iter().enumerate() {
            let rs: f64 = row.iter().sum();
            if (rs - c[i]).abs() > 1e-13 {
                return Err(Error::BadTableau(format!("row {i} sum {rs} != c {}", c[i])));
            }
        }
        let b_err = b.iter().zip(&b_hat).map(|(x, y)| x - y).collect();
        Ok(ButcherTableau {
            label: file.label,
            order: file.order,
            embedded_order: file.embedded_order,
            fsal: file.fsal,
            c,
            a,
            b,
            b_err,
        })
    }

    pub fn stages(&self) -> usize {
        self.b.len()
    }
}

fn hex_digest(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    let out = h.finalize();
    out.iter().map(|b| format!("{b:02x}")).collect()
}

const DOPRI54_JSON: &str = include_str!("../data/dopri54.json");
const DOPRI54_SHA256: &str = "17aa72e67d4ff1b589f9e340aea2b8748ddee788b55ad3f62a379f8a09415729";

/// The default embedded pair: Dormand-Prince 5(4).
pub fn dopri54() -> &'static ButcherTableau {
    static CELL: OnceLock<ButcherTableau> = OnceLock::new();
    CELL.get_or_init(|| {
        ButcherTableau::from_json(DOPRI54_JSON, Some(DOPRI54_SHA256)).expect("vendored tableau")
    })
}

/// Accept/reject loop parameters; the defaults follow the run setup
/// (absolute step-error tolerance 1e-5).
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct StepController {
    pub tolerance: f64,
    pub dt_min: f64,
    pub dt_max: f64,
    pub dt_initial: f64,
    pub safety: f64,
    pub factor_min: f64,
    pub factor_max: f64,
}

impl Default for StepController {
    fn default() -> Self {
        StepController {
            tolerance: 1e-5,
            dt_min: 1e-10,
            dt_max: 0.5,
            dt_initial: 1e-3,
            safety: 0.9,
            factor_min: 0.2,
            factor_max: 5.0,
        }
    }
}

/// Health channels reported by one policy evaluation.
#[derive(Clone, Copy, Debug, Default, Serialize)]
pub struct PolicyHealth {
    pub min_eigenvalue: f64,
    pub used_fallback: bool,
    pub flow: Option<FlowSolveReport>,
}

impl PolicyHealth {
    fn merge(&mut self, other: &PolicyHealth) {
        self.min_eigenvalue = self.min_eigenvalue.min(other.min_eigenvalue);
        self.used_fallback |= other.used_fallback;
        if other.flow.is_some() {
            self.flow = other.flow;
        }
    }
}

/// A closed, compatible time-derivative function of the window.
pub trait DerivativePolicy {
    fn name(&self) -> &'static str;
    fn derivative(&mut self, omega: &OperatorWindow) -> Result<(OperatorWindow, PolicyHealth)>;
}

/// Exact closure: valid when the window covers a whole finite chain, so
/// no bond sticks out and Phi needs no extension.
pub struct ExactPolicy {
    pub ham: Hamiltonian,
}

impl DerivativePolicy for ExactPolicy {
    fn name(&self) -> &'static str {
        "oracle"
    }

    fn derivative(&mut self, omega: &OperatorWindow) -> Result<(OperatorWindow, PolicyHealth)> {
        let span = omega.span();
        if omega.boundary() != BoundaryMode::Finite
            || omega.len() != 1
            || self.ham.has_bond(span.left() - 1)
            || self.ham.has_bond(span.right())
        {
            return Err(Error::Config(
                "exact policy needs a single element covering the whole finite chain".into(),
            ));
        }
        let deriv = self.ham.liouvillian(omega.element(0));
        Ok((
            OperatorWindow::new(omega.boundary(), vec![deriv])?,
            PolicyHealth { min_eigenvalue: f64::INFINITY, ..Default::default() },
        ))
    }
}

/// Petz-recovery derivative policy.
pub struct PetzPolicy {
    pub ham: Hamiltonian,
    /// Use reflection-block eigensolves (valid when every element is
    /// reflection symmetric, e.g. homogeneous translation-invariant runs).
    pub reflection_blocks: bool,
}

impl PetzPolicy {
    pub fn new(ham: Hamiltonian) -> Self {
        PetzPolicy { ham, reflection_blocks: false }
    }
}

impl DerivativePolicy for PetzPolicy {
    fn name(&self) -> &'static str {
        "petz"
    }

    fn derivative(&mut self, omega: &OperatorWindow) -> Result<(OperatorWindow, PolicyHealth)> {
        let (psi, health) = if self.reflection_blocks {
            crate::petz::psi_petz_blocked(&self.ham, omega)?
        } else {
            psi_petz(&self.ham, omega)?
        };
        Ok((
            psi,
            PolicyHealth {
                min_eigenvalue: health.min_eigenvalue,
                used_fallback: false,
                flow: None,
            },
        ))
    }
}

/// Information-flow derivative policy with automatic Petz fallback below
/// the information/current thresholds (hysteresis avoids oscillation).
pub struct FlowPolicy {
    pub ham: Hamiltonian,
    pub opts: FlowOptions,
    warm: Option<OperatorWindow>,
    flow_active: bool,
}

impl FlowPolicy {
    pub fn new(ham: Hamiltonian, opts: FlowOptions) -> Self {
        FlowPolicy { ham, opts, warm: None, flow_active: false }
    }

    pub fn reset_warm_start(&mut self) {
        self.warm = None;
    }
}

impl DerivativePolicy for FlowPolicy {
    fn name(&self) -> &'static str {
        "flow"
    }

    fn derivative(&mut self, omega: &OperatorWindow) -> Result<(OperatorWindow, PolicyHealth)> {
        // Hysteresis: to switch on, metrics must exceed the thresholds by
        // the hysteresis factor; once on, plain thresholds apply.
        let mut opts = self.opts;
        if !self.flow_active {
            opts.current_threshold *= self.opts.hysteresis;
            opts.info_threshold *= self.opts.hysteresis;
        }
        match psi_flow(&self.ham, omega, &opts, self.warm.as_ref())? {
            FlowOutcome::Solved { chi, report, correction } => {
                self.flow_active = true;
                // Warm-start the next solve only while the window geometry
                // is unchanged.
                self.warm = if std::env::var("FLOW_NO_WARM").is_ok() { None } else { Some(correction) };
                Ok((
                    chi,
                    PolicyHealth {
                        min_eigenvalue: report.min_marginal_eigenvalue,
                        used_fallback: false,
                        flow: Some(report),
                    },
                ))
            }
            FlowOutcome::Declined(FlowDecline::FallbackToPetz { .. }) => {
                self.flow_active = false;
                let (psi, health) = psi_petz(&self.ham, omega)?;
                Ok((
                    psi,
                    PolicyHealth {
                        min_eigenvalue: health.min_eigenvalue,
                        used_fallback: true,
                        flow: None,
                    },
                ))
            }
        }
    }
}

/// Outcome of one embedded step attempt.
pub struct StepOutcome {
    pub next: OperatorWindow,
    pub error_estimate: f64,
    pub health: PolicyHealth,
}

/// One embedded Runge-Kutta step. Every stage evaluation goes through the
/// policy; a stage whose marginals dip below the eigenvalue guard is a
/// rejection signal (Err(NumericalHealth)). Compatibility of the policy
/// makes every window-local constant of motion exact per step, regardless
/// of dt.
pub fn rk_step(
    policy: &mut dyn DerivativePolicy,
    tableau: &ButcherTableau,
    omega: &OperatorWindow,
    dt: f64,
    stage_eig_guard: f64,
) -> Result<StepOutcome> {
    let stages = tableau.stages();
    let mut k: Vec<OperatorWindow> = Vec::with_capacity(stages);
    let mut health = PolicyHealth { min_eigenvalue: f64::INFINITY, ..Default::default() };
    for i in 0..stages {
        let mut arg = omega.clone();
        for (j, kj) in k.iter().enumerate() {
            let aij = tableau.a[i].get(j).copied().unwrap_or(0.0);
            if aij != 0.0 {
                arg.axpy(dt * aij, kj)?;
            }
        }
        if i > 0 {
            for e in arg.elements() {
                if !e.min_eig_above(stage_eig_guard) {
                    return Err(Error::NumericalHealth(format!(
                        "stage {i} marginal below eigenvalue guard {stage_eig_guard:.1e}"
                    )));
                }
            }
        }
        let (ki, h) = policy.derivative(&arg)?;
        health.merge(&h);
        k.push(ki);
    }
    let mut next = omega.clone();
    let mut err = omega.zeros_like();
    for (i, ki) in k.iter().enumerate() {
        if tableau.b[i] != 0.0 {
            next.axpy(dt * tableau.b[i], ki)?;
        }
        if tableau.b_err[i] != 0.0 {
            err.axpy(dt * tableau.b_err[i], ki)?;
        }
    }
    next.resymmetrize();
    let error_estimate = err
        .elements()
        .iter()
        .fold(0.0f64, |m, e| m.max(e.frobenius_norm()));
    Ok(StepOutcome { next, error_estimate, health })
}

/// Growth and pruning policy for infinite windows.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct WindowPolicy {
    /// Product-extended elements added per side before each step.
    pub pad: usize,
    /// Frobenius threshold of the product-deviation prune test.
    pub prune_epsilon: f64,
    /// Hard cap on the element count.
    pub max_len: usize,
}

impl Default for WindowPolicy {
    fn default() -> Self {
        WindowPolicy { pad: 4, prune_epsilon: 1e-9, max_len: 4096 }
    }
}

/// Pad an infinite window with `k` product-extended elements per side.
pub fn pad_window(omega: &OperatorWindow, k: usize) -> Result<OperatorWindow> {
    if omega.boundary() != BoundaryMode::InfiniteWindow {
        return Err(Error::Config("padding applies to infinite windows".into()));
    }
    let mut elements: Vec<HermitianOperator> = omega.elements().to_vec();
    for _ in 0..k {
        let first = elements.first().unwrap();
        let tr = first.trace_right_site()?;
        let target = first.range().grow_left(1).shrink_right(1);
        elements.insert(0, tr.embed_mixed(target)?);
        let last = elements.last().unwrap();
        let tl = last.trace_left_site()?;
        let target = last.range().grow_right(1).shrink_left(1);
        elements.push(tl.embed_mixed(target)?);
    }
    OperatorWindow::new(BoundaryMode::InfiniteWindow, elements)
}

/// Deviation of an edge element from the product continuation, Frobenius.
fn product_deviation(e: &HermitianOperator, left_edge: bool) -> Result<f64> {
    let approx = if left_edge {
        e.trace_left_site()?.embed_mixed(e.range())?
    } else {
        e.trace_right_site()?.embed_mixed(e.range())?
    };
    Ok(approx.sub(e)?.frobenius_norm())
}

/// Remove edge elements passing the product test; returns how many were
/// pruned on each side.
pub fn prune_window(omega: &OperatorWindow, eps: f64) -> Result<(OperatorWindow, usize, usize)> {
    let mut elements: Vec<HermitianOperator> = omega.elements().to_vec();
    let mut left = 0usize;
    let mut right = 0usize;
    // Alternate sides so a (nearly) all-product window shrinks evenly.
    loop {
        let mut changed = false;
        if elements.len() > 1 && product_deviation(elements.first().unwrap(), true)? < eps {
            elements.remove(0);
            left += 1;
            changed = true;
        }
        if elements.len() > 1 && product_deviation(elements.last().unwrap(), false)? < eps {
            elements.pop();
            right += 1;
            changed = true;
        }
        if !changed {
            break;
        }
    }
    Ok((OperatorWindow::new(omega.boundary(), elements)?, left, right))
}

/// One record of the run log.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct StepRecord {
    pub t: f64,
    pub dt: f64,
    pub error_estimate: f64,
    pub accepted: bool,
    pub window_len: usize,
    pub health: PolicyHealth,
}

/// Evolution options bundling the controller and the window machinery.
#[derive(Clone, Debug)]
pub struct EvolveOptions {
    pub controller: StepController,
    pub tableau: &'static ButcherTableau,
    pub window: Option<WindowPolicy>,
    /// Evolve the shifted state (omega + mm)/2 and unshift for sampling.
    pub shift: bool,
    /// Stage eigenvalue rejection guard.
    pub stage_eig_guard: f64,
    /// Re-project overlapping-marginal consistency after accepted steps.
    pub reproject_consistency: bool,
}

impl Default for EvolveOptions {
    fn default() -> Self {
        EvolveOptions {
            controller: StepController::default(),
            tableau: dopri54(),
            window: None,
            shift: false,
            stage_eig_guard: -1e-8,
            reproject_consistency: true,
        }
    }
}

/// Shift with the maximally mixed window: (omega + mm) / 2.
pub fn shift_window(omega: &OperatorWindow) -> OperatorWindow {
    let elements = omega
        .elements()
        .iter()
        .map(|e| {
            let mm = HermitianOperator::maximally_mixed(e.range(), e.local_dim());
            e.scaled(0.5).add(&mm.scaled(0.5)).unwrap()
        })
        .collect();
    OperatorWindow::new(omega.boundary(), elements).unwrap()
}

/// Undo the shift: 2 omega_shift - mm.
pub fn unshift_window(omega: &OperatorWindow) -> OperatorWindow {
    let elements = omega
        .elements()
        .iter()
        .map(|e| {
            let mm = HermitianOperator::maximally_mixed(e.range(), e.local_dim());
            e.scaled(2.0).sub(&mm).unwrap()
        })
        .collect();
    OperatorWindow::new(omega.boundary(), elements).unwrap()
}

/// Adaptive evolution sampling the (unshifted) state at the requested
/// times. Samples are produced by integrating exactly onto each time.
#[allow(clippy::too_many_arguments)]
pub fn adaptive_evolve(
    policy: &mut dyn DerivativePolicy,
    omega0: &OperatorWindow,
    t_end: f64,
    opts: &EvolveOptions,
    sample_times: &[f64],
    mut on_sample: impl FnMut(f64, &OperatorWindow) -> Result<()>,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<OperatorWindow> {
    let mut state = if opts.shift { shift_window(omega0) } else { omega0.clone() };
    let mut t = 0.0f64;
    let mut dt = opts.controller.dt_initial.min(opts.controller.dt_max);
    let mut samples = sample_times.iter().copied().filter(|&s| s >= 0.0).collect::<Vec<_>>();
    samples.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut next_sample = 0usize;
    let emit = |t: f64, state: &OperatorWindow, on_sample: &mut dyn FnMut(f64, &OperatorWindow) -> Result<()>| -> Result<()> {
        if opts.shift {
            on_sample(t, &unshift_window(state))
        } else {
            on_sample(t, state)
        }
    };
    while next_sample < samples.len() && samples[next_sample] <= t + 1e-14 {
        emit(t, &state, &mut on_sample)?;
        next_sample += 1;
    }
    if t_end <= 0.0 {
        return Ok(if opts.shift { unshift_window(&state) } else { state });
    }
    let mut pad = opts.window.map(|w| w.pad).unwrap_or(0);
    let order = opts.tableau.embedded_order.min(opts.tableau.order) as f64;
    while t < t_end - 1e-14 {
        // Clip onto the next sample time or the end.
        let mut target = t_end;
        if next_sample < samples.len() {
            target = target.min(samples[next_sample]);
        }
        let dt_try = dt.min(target - t).max(opts.controller.dt_min);
        // Window padding before the attempt.
        let (pre_state, padded) = if let Some(_wp) = &opts.window {
            let p = pad_window(&state, pad)?;
            (state.clone(), p)
        } else {
            (state.clone(), state.clone())
        };
        let attempt = rk_step(policy, opts.tableau, &padded, dt_try, opts.stage_eig_guard);
        match attempt {
            Ok(outcome) => {
                let err = outcome.error_estimate;
                if err <= opts.controller.tolerance {
                    // Accept; prune and possibly redo with more padding.
                    let mut accepted = outcome.next;
                    if let Some(wp) = &opts.window {
                        let (pruned, l, r) = prune_window(&accepted, wp.prune_epsilon)?;
                        if (l == 0 || r == 0) && pad < 64 {
                            // The window filled up: redo with more room.
                            state = pre_state;
                            pad *= 2;
                            continue;
                        }
                        if pruned.len() > wp.max_len {
                            return Err(Error::NumericalHealth(format!(
                                "window grew past the cap: {} elements",
                                pruned.len()
                            )));
                        }
                        accepted = pruned;
                        pad = opts.window.map(|w| w.pad).unwrap_or(pad);
                    }
                    if opts.reproject_consistency {
                        crate::local_state::project_consistent(&mut accepted, 1e-13, 40)?;
                    }
                    state = accepted;
                    t += dt_try;
                    on_step(&StepRecord {
                        t,
                        dt: dt_try,
                        error_estimate: err,
                        accepted: true,
                        window_len: state.len(),
                        health: outcome.health,
                    });
                    while next_sample < samples.len() && samples[next_sample] <= t + 1e-12 {
                        emit(t, &state, &mut on_sample)?;
                        next_sample += 1;
                    }
                    let grow = opts.controller.safety
                        * (opts.controller.tolerance / err.max(1e-300)).powf(1.0 / (order + 1.0));
                    let suggestion = (dt_try
                        * grow.clamp(opts.controller.factor_min, opts.controller.factor_max))
                    .min(opts.controller.dt_max);
                    // A step clipped onto a sample time should not shrink
                    // the controller's suggestion.
                    let clipped = dt_try < dt * (1.0 - 1e-12);
                    dt = if clipped { dt.max(suggestion) } else { suggestion };
                } else {
                    on_step(&StepRecord {
                        t,
                        dt: dt_try,
                        error_estimate: err,
                        accepted: false,
                        window_len: state.len(),
                        health: outcome.health,
                    });
                    let shrink = opts.controller.safety
                        * (opts.controller.tolerance / err).powf(1.0 / (order + 1.0));
                    dt = dt_try * shrink.clamp(opts.controller.factor_min, 0.9);
                    if dt < opts.controller.dt_min {
                        return Err(Error::StepUnderflow { t, dt });
                    }
                }
            }
            Err(Error::NumericalHealth(_)) => {
                // Stage left the policy domain: halve the step.
                dt = dt_try * 0.5;
                if dt < opts.controller.dt_min {
                    return Err(Error::StepUnderflow { t, dt });
                }
            }
            Err(e) => return Err(e),
        }
    }
    while next_sample < samples.len() && samples[next_sample] <= t + 1e-9 {
        emit(t, &state, &mut on_sample)?;
        next_sample += 1;
    }
    Ok(if opts.shift { unshift_window(&state) } else { state })
}

/// An extension function lifting a window one scale up (the Suzuki-Trotter
/// integrator applies boundary-crossing gates through it).
pub trait ExtensionMap {
    fn extend(&self, omega: &OperatorWindow) -> Result<OperatorWindow>;
}

/// Petz-recovery extension.
pub struct PetzExtension;

impl ExtensionMap for PetzExtension {
    fn extend(&self, omega: &OperatorWindow) -> Result<OperatorWindow> {
        Ok(crate::petz::extend_petz(omega)?.0)
    }
}

/// Conjugate every element of the window by the two-site gate
/// exp(-i theta h_bond), extending (once or twice) where the gate crosses
/// an element boundary.
fn apply_gate_layer<E: ExtensionMap>(
    ham: &Hamiltonian,
    ext: &E,
    omega: &OperatorWindow,
    bonds: &[i64],
    theta: f64,
) -> Result<OperatorWindow> {
    let d = omega.local_dim();
    // Gate matrices per distinct bond.
    let gate = |bond: i64| -> Result<ndarray::Array2<num_complex::Complex64>> {
        let h = ham
            .bond_operator(bond)
            .ok_or_else(|| Error::Config(format!("no bond at {bond}")))?;
        // Distribute the accumulated on-site terms over the adjacent gates
        // so that the gate sum reproduces H exactly: each site's term is
        // shared by however many of its bonds exist (edges get weight 1).
        let mut full = h.matrix().clone();
        let id = ndarray::Array2::eye(d);
        let weight = |site: i64| -> f64 {
            let mut n = 0.0;
            if ham.has_bond(site - 1) {
                n += 1.0;
            }
            if ham.has_bond(site) {
                n += 1.0;
            }
            if n == 0.0 {
                0.0
            } else {
                1.0 / n
            }
        };
        if let Some(vl) = ham.v_term(bond) {
            let w = weight(bond);
            full = full + &crate::hermitian::kron(&vl.view(), &id.view()).map(|z| z * w);
        }
        if let Some(vr) = ham.v_term(bond + 1) {
            let w = weight(bond + 1);
            full = full + &crate::hermitian::kron(&id.view(), &vr.view()).map(|z| z * w);
        }
        let op = HermitianOperator::new(SiteRange::from_span(bond, 2), d, full)?;
        let spec = op.eig()?;
        // U = exp(-i theta h) columns from the spectrum.
        let mut u = spec.vectors.clone();
        for (j, &w) in spec.eigenvalues.iter().enumerate() {
            let phase = num_complex::Complex64::from_polar(1.0, -theta * w);
            u.column_mut(j).map_inplace(|z| *z *= phase);
        }
        Ok(u.dot(&spec.vectors.t().map(|z| z.conj())))
    };
    let mut out = Vec::with_capacity(omega.len());
    let mut ext1: Option<OperatorWindow> = None;
    let mut ext2: Option<OperatorWindow> = None;
    for (idx, e) in omega.elements().iter().enumerate() {
        let r = e.range();
        let needs_left = bonds.contains(&(r.left() - 1)) && ham.has_bond(r.left() - 1);
        let needs_right = bonds.contains(&r.right()) && ham.has_bond(r.right());
        // Choose the working element: the original, a one-site extension,
        // or a two-site extension when gates cross both edges. Extensions
        // are built lazily; fully internal layers never need them.
        if (needs_left || needs_right) && ext1.is_none() {
            ext1 = Some(ext.extend(omega)?);
        }
        if needs_left && needs_right && ext2.is_none() {
            ext2 = Some(ext.extend(ext1.as_ref().unwrap())?);
        }
        let mut work = if needs_left && needs_right {
            ext2.as_ref()
                .unwrap()
                .element_at_nu(r.nu())
                .ok_or_else(|| Error::WindowTooSmall("no doubly extended element".into()))?
                .clone()
        } else if needs_left {
            ext1.as_ref()
                .unwrap()
                .element_at_nu(r.nu() - 1)
                .ok_or_else(|| Error::WindowTooSmall("no left extension".into()))?
                .clone()
        } else if needs_right {
            ext1.as_ref()
                .unwrap()
                .element_at_nu(r.nu() + 1)
                .ok_or_else(|| Error::WindowTooSmall("no right extension".into()))?
                .clone()
        } else {
            e.clone()
        };
        let wr = work.range();
        for &bond in bonds {
            if bond >= wr.left() && bond + 1 <= wr.right() {
                let u = gate(bond)?;
                let off = (bond - wr.left()) as usize;
                let m = embed_mul_left(&u.view(), off, 2, d, &work.matrix().view());
                let udag = u.t().map(|z| z.conj());
                let m = embed_mul_right(&udag.view(), off, 2, d, &m.view());
                work = HermitianOperator::from_parts(wr, d, m);
            }
        }
        let mut back = work.partial_trace(r)?;
        back.resymmetrize();
        out.push(back);
        let _ = idx;
    }
    OperatorWindow::new(omega.boundary(), out)
}

/// Second-order (Strang) Suzuki-Trotter step over odd/even bond layers,
/// using the extension map for boundary-crossing gates. Positivity is
/// preserved by construction; constants of motion are not exact (unlike
/// the Runge-Kutta path).
pub fn trotter_step<E: ExtensionMap>(
    ham: &Hamiltonian,
    ext: &E,
    omega: &OperatorWindow,
    dt: f64,
) -> Result<OperatorWindow> {
    if omega.boundary() == BoundaryMode::TranslationInvariant {
        return Err(Error::Config(
            "Suzuki-Trotter layers break one-site translation invariance".into(),
        ));
    }
    let span = omega.span();
    let mut odd = Vec::new();
    let mut even = Vec::new();
    for bond in (span.left() - 1)..=span.right() {
        if ham.has_bond(bond) {
            if bond.rem_euclid(2) == 1 {
                odd.push(bond);
            } else {
                even.push(bond);
            }
        }
    }
    let half = apply_gate_layer(ham, ext, omega, &odd, dt / 2.0)?;
    let mid = apply_gate_layer(ham, ext, &half, &even, dt)?;
    apply_gate_layer(ham, ext, &mid, &odd, dt / 2.0)
}

/// Verify a discrete symmetry of the window and return the reduced
/// representation: translation invariance collapses to one element;
/// reflection symmetry is verified and flagged for block-diagonalized
/// spectral calls.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SymmetryMode {
    Translation,
    Reflection,
}

pub fn symmetry_reduce(omega: &OperatorWindow, mode: SymmetryMode, tol: f64) -> Result<OperatorWindow> {
    match mode {
        SymmetryMode::Translation => {
            for k in 1..omega.len() {
                let shifted = omega.element(k).with_range(omega.element(0).range())?;
                let defect = shifted.sub(omega.element(0))?.max_abs();
                if defect > tol {
                    return Err(Error::SymmetryViolation(format!(
                        "translation defect {defect:.3e} at element {k}"
                    )));
                }
            }
            Ok(OperatorWindow::translation_invariant(omega.element(0).clone()))
        }
        SymmetryMode::Reflection => {
            for (k, e) in omega.elements().iter().enumerate() {
                let defect = e.reflection_defect();
                if defect > tol {
                    return Err(Error::SymmetryViolation(format!(
                        "reflection defect {defect:.3e} at element {k}"
                    )));
                }
            }
            Ok(omega.clone())
        }
    }
}
