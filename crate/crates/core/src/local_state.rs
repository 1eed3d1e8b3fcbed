//! Windows of operators on consecutive same-scale segments: the evolved
//! object (sets of l-local density matrices) and the linear-operator
//! algebra on such sets — trace maps and their pseudoinverses, kernel and
//! image projectors, the derivative map Phi, minimum-norm extensions, and
//! compatibility checks.

use crate::error::{Error, Result};
use crate::hamiltonian::Hamiltonian;
use crate::hermitian::{HermitianOperator, SiteRange};
use crate::matutil::End;
use ndarray::Array2;
use num_complex::Complex64 as C64;

/// How a window relates to the rest of the chain.
#[derive(Clone, Copy, PartialEq, Eq, Debug, serde::Serialize, serde::Deserialize)]
pub enum BoundaryMode {
    /// The chain ends where the window ends; no bonds stick out.
    Finite,
    /// The chain continues as an exact product of the edge marginal with
    /// maximally mixed sites; managed by padding and pruning.
    InfiniteWindow,
    /// One element represents every position of an infinite chain.
    TranslationInvariant,
}

/// Reference to a window neighbor: present, synthesized from the boundary
/// policy, or absent.
pub enum Neighbor<'a> {
    Present(&'a HermitianOperator),
    Virtual(HermitianOperator),
    Absent,
}

impl Neighbor<'_> {
    pub fn into_option(self) -> Option<HermitianOperator> {
        match self {
            Neighbor::Present(x) => Some(x.clone()),
            Neighbor::Virtual(x) => Some(x),
            Neighbor::Absent => None,
        }
    }
}

/// An ordered window of Hermitian operators on consecutive segments of one
/// scale. Used both for sets of density matrices and for general Hermitian
/// sets (derivatives, gradients, corrections).
#[derive(Clone)]
pub struct OperatorWindow {
    scale: i64,
    d: usize,
    boundary: BoundaryMode,
    elements: Vec<HermitianOperator>,
}

impl OperatorWindow {
    pub fn new(boundary: BoundaryMode, elements: Vec<HermitianOperator>) -> Result<Self> {
        if elements.is_empty() {
            return Err(Error::WindowTooSmall("empty window".into()));
        }
        let scale = elements[0].range().l();
        let d = elements[0].local_dim();
        if boundary == BoundaryMode::TranslationInvariant && elements.len() != 1 {
            return Err(Error::Config("translation-invariant windows hold exactly one element".into()));
        }
        let first_left = elements[0].range().left();
        for (k, e) in elements.iter().enumerate() {
            if e.range().l() != scale || e.local_dim() != d || e.range().left() != first_left + k as i64 {
                return Err(Error::RangeMismatch(
                    elements[0].range().to_string(),
                    e.range().to_string(),
                ));
            }
        }
        Ok(OperatorWindow { scale, d, boundary, elements })
    }

    pub fn translation_invariant(element: HermitianOperator) -> Self {
        let scale = element.range().l();
        let d = element.local_dim();
        OperatorWindow { scale, d, boundary: BoundaryMode::TranslationInvariant, elements: vec![element] }
    }

    pub fn scale(&self) -> i64 {
        self.scale
    }

    pub fn local_dim(&self) -> usize {
        self.d
    }

    pub fn boundary(&self) -> BoundaryMode {
        self.boundary
    }

    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    pub fn element(&self, k: usize) -> &HermitianOperator {
        &self.elements[k]
    }

    pub fn element_mut(&mut self, k: usize) -> &mut HermitianOperator {
        &mut self.elements[k]
    }

    pub fn elements(&self) -> &[HermitianOperator] {
        &self.elements
    }

    pub fn into_elements(self) -> Vec<HermitianOperator> {
        self.elements
    }

    pub fn first_left(&self) -> i64 {
        self.elements[0].range().left()
    }

    /// Doubled center coordinate of element k.
    pub fn nu_of(&self, k: usize) -> i64 {
        self.elements[k].range().nu()
    }

    pub fn element_at_nu(&self, nu: i64) -> Option<&HermitianOperator> {
        if self.boundary == BoundaryMode::TranslationInvariant {
            return Some(&self.elements[0]);
        }
        let idx = (nu - self.nu_of(0)) / 2;
        if (nu - self.nu_of(0)) % 2 != 0 || idx < 0 {
            return None;
        }
        self.elements.get(idx as usize)
    }

    /// The union of all element ranges.
    pub fn span(&self) -> SiteRange {
        let left = self.first_left();
        SiteRange::from_span(left, self.scale as usize + self.elements.len())
    }

    /// Neighbor of element k at offset `step` (in element units). For
    /// translation-invariant windows every neighbor is the element itself;
    /// for infinite windows, out-of-range neighbors are synthesized as
    /// products of the edge marginal with a maximally mixed site.
    pub fn neighbor(&self, k: usize, step: i64) -> Neighbor<'_> {
        if self.boundary == BoundaryMode::TranslationInvariant {
            return Neighbor::Present(&self.elements[0]);
        }
        let idx = k as i64 + step;
        if idx >= 0 && (idx as usize) < self.elements.len() {
            return Neighbor::Present(&self.elements[idx as usize]);
        }
        if self.boundary == BoundaryMode::InfiniteWindow {
            // Only single-step synthesis is supported; pad further out.
            if step == -1 && k == 0 {
                let e = &self.elements[0];
                let tr = e.trace_right_site().expect("scale >= 1 window");
                let target = e.range().grow_left(1).shrink_right(1);
                return Neighbor::Virtual(tr.embed_mixed(target).expect("virtual left"));
            }
            if step == 1 && k == self.elements.len() - 1 {
                let e = &self.elements[k];
                let tr = e.trace_left_site().expect("scale >= 1 window");
                let target = e.range().grow_right(1).shrink_left(1);
                return Neighbor::Virtual(tr.embed_mixed(target).expect("virtual right"));
            }
        }
        Neighbor::Absent
    }

    pub fn zeros_like(&self) -> Self {
        let elements = self.elements.iter().map(|e| HermitianOperator::zero(e.range(), self.d)).collect();
        OperatorWindow { scale: self.scale, d: self.d, boundary: self.boundary, elements }
    }

    pub fn scaled(&self, c: f64) -> Self {
        let elements = self.elements.iter().map(|e| e.scaled(c)).collect();
        OperatorWindow { scale: self.scale, d: self.d, boundary: self.boundary, elements }
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.check_shape(other)?;
        let elements = self
            .elements
            .iter()
            .zip(&other.elements)
            .map(|(a, b)| a.add(b))
            .collect::<Result<Vec<_>>>()?;
        Ok(OperatorWindow { scale: self.scale, d: self.d, boundary: self.boundary, elements })
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        Ok(self.add(&other.scaled(-1.0))?)
    }

    /// self += c * other.
    pub fn axpy(&mut self, c: f64, other: &Self) -> Result<()> {
        self.check_shape(other)?;
        for (a, b) in self.elements.iter_mut().zip(&other.elements) {
            a.add_scaled(b, c)?;
        }
        Ok(())
    }

    pub fn check_shape(&self, other: &Self) -> Result<()> {
        if self.scale != other.scale
            || self.d != other.d
            || self.elements.len() != other.elements.len()
            || self.first_left() != other.first_left()
        {
            return Err(Error::RangeMismatch(
                format!("window l={} len={} at {}", self.scale, self.elements.len(), self.first_left()),
                format!("window l={} len={} at {}", other.scale, other.elements.len(), other.first_left()),
            ));
        }
        Ok(())
    }

    /// Set inner product: sum of trace pairings of matching elements.
    pub fn inner(&self, other: &Self) -> Result<f64> {
        self.check_shape(other)?;
        let mut acc = 0.0;
        for (a, b) in self.elements.iter().zip(&other.elements) {
            acc += crate::hermitian::trace_inner(a, b)?;
        }
        Ok(acc)
    }

    pub fn norm(&self) -> f64 {
        self.elements.iter().map(|e| e.frobenius_norm().powi(2)).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.elements.iter().fold(0.0, |m, e| m.max(e.max_abs()))
    }

    pub fn resymmetrize(&mut self) {
        for e in &mut self.elements {
            e.resymmetrize();
        }
    }

    /// Largest disagreement between overlapping marginals of adjacent
    /// elements (and the self-consistency of a translation-invariant one).
    pub fn consistency_defect(&self) -> f64 {
        if self.scale == 0 {
            return 0.0;
        }
        if self.boundary == BoundaryMode::TranslationInvariant {
            let e = &self.elements[0];
            let l = e.trace_left_site().unwrap();
            let r = e.trace_right_site().unwrap().with_range(l.range()).unwrap();
            return l.sub(&r).map(|x| x.max_abs()).unwrap_or(f64::INFINITY);
        }
        let mut worst = 0.0f64;
        for k in 0..self.elements.len().saturating_sub(1) {
            let l = self.elements[k].trace_left_site().unwrap();
            let r = self.elements[k + 1].trace_right_site().unwrap();
            let diff = l.sub(&r).map(|x| x.max_abs()).unwrap_or(f64::INFINITY);
            worst = worst.max(diff);
        }
        worst
    }

    /// Validate that every element is a density matrix.
    pub fn check_density(&self, trace_tol: f64, psd_tol: f64) -> Result<()> {
        for e in &self.elements {
            e.validate_density(trace_tol, psd_tol)?;
        }
        Ok(())
    }

    /// Smallest eigenvalue over all elements.
    pub fn min_eigenvalue(&self) -> Result<f64> {
        let mut min = f64::INFINITY;
        for e in &self.elements {
            min = min.min(e.min_eigenvalue()?);
        }
        Ok(min)
    }

    /// The set trace map T_{l -> l-1}: the right-traced marginal of every
    /// element, plus the left-traced marginal of the rightmost element.
    /// Translation-invariant windows map to a single element.
    pub fn trace_step(&self) -> Result<OperatorWindow> {
        if self.scale < 1 {
            return Err(Error::WindowTooSmall("cannot trace below scale 0".into()));
        }
        let mut out = Vec::with_capacity(self.elements.len() + 1);
        for e in &self.elements {
            out.push(e.trace_right_site()?);
        }
        if self.boundary != BoundaryMode::TranslationInvariant {
            out.push(self.elements.last().unwrap().trace_left_site()?);
        }
        OperatorWindow::new(self.boundary, out)
    }

    /// Repeated trace_step down to `scale`.
    pub fn trace_to(&self, scale: i64) -> Result<OperatorWindow> {
        if scale > self.scale {
            return Err(Error::Config(format!("cannot trace up from {} to {}", self.scale, scale)));
        }
        let mut w = self.clone();
        while w.scale > scale {
            w = w.trace_step()?;
        }
        Ok(w)
    }

    /// Spatially reflected window (element order and site order reversed).
    pub fn reflected(&self) -> Self {
        let first_left = self.first_left();
        let count = self.elements.len();
        let elements: Vec<HermitianOperator> = (0..count)
            .map(|k| {
                let src = &self.elements[count - 1 - k];
                let refl = src.reflected();
                refl.with_range(SiteRange::from_span(first_left + k as i64, self.scale as usize + 1)).unwrap()
            })
            .collect();
        OperatorWindow { scale: self.scale, d: self.d, boundary: self.boundary, elements }
    }
}

impl std::fmt::Debug for OperatorWindow {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "OperatorWindow(l={}, {} elements at {}, {:?})",
            self.scale,
            self.elements.len(),
            self.first_left(),
            self.boundary
        )
    }
}

/// Sets of l-local density matrices are operator windows whose elements are
/// states; the alias marks intent in signatures.
pub type LocalStateSet = OperatorWindow;

/// T_L / T_R on a single element: trace out the leftmost / rightmost site.
pub fn trace_end(end: End, x: &HermitianOperator) -> Result<HermitianOperator> {
    match end {
        End::Left => x.trace_left_site(),
        End::Right => x.trace_right_site(),
    }
}

/// Pseudoinverse of the end trace: tensor a maximally mixed site onto the
/// indicated end, so that T o T+ is the identity.
pub fn trace_end_pinv(end: End, x: &HermitianOperator) -> HermitianOperator {
    let target = match end {
        End::Left => x.range().grow_left(1),
        End::Right => x.range().grow_right(1),
    };
    x.embed_mixed(target).expect("grow embed")
}

/// Kernel projector of the end trace: X - T+ T X.
pub fn kernel_project_end(end: End, x: &HermitianOperator) -> Result<HermitianOperator> {
    let t = trace_end(end, x)?;
    let back = trace_end_pinv(end, &t);
    x.sub(&back)
}

/// Kernel projector of the set trace map, elementwise: both single-site
/// traces of every element vanish afterwards.
pub fn kernel_project_trace(x: &HermitianOperator) -> Result<HermitianOperator> {
    // 1 - QL - QR + QL QR with commuting QL, QR.
    let tl = trace_end(End::Left, x)?;
    let tr = trace_end(End::Right, x)?;
    let trl = trace_end(End::Right, &tl)?;
    let mut out = x.clone();
    out.add_scaled(&trace_end_pinv(End::Left, &tl), -1.0)?;
    out.add_scaled(&trace_end_pinv(End::Right, &tr), -1.0)?;
    out.add_scaled(&trace_end_pinv(End::Left, &trace_end_pinv(End::Right, &trl)), 1.0)?;
    Ok(out)
}

pub fn kernel_project_window(x: &OperatorWindow) -> Result<OperatorWindow> {
    let elements = x.elements().iter().map(kernel_project_trace).collect::<Result<Vec<_>>>()?;
    OperatorWindow::new(x.boundary(), elements)
}

/// The derivative map Phi: from a scale-(l+1) set to the time derivative
/// of its scale-l trace. Exact when the input is the true marginal set.
///
/// Psi_m = L psi^l_m + TL_L psi^{l+1}_{m-1/2} + TL_R psi^{l+1}_{m+1/2},
/// where psi^l = T(psi^{l+1}). Missing neighbors at finite chain ends are
/// exact omissions (no bond); for infinite windows the omission is exact
/// for product continuation because TL of a mixed-site product vanishes.
pub fn phi(ham: &Hamiltonian, upper: &OperatorWindow) -> Result<OperatorWindow> {
    let lower = upper.trace_step()?;
    let mut out = Vec::with_capacity(lower.len());
    for m in 0..lower.len() {
        let base = lower.element(m);
        let mut acc = ham.liouvillian(base);
        // Element of `upper` whose right trace is `base` sits at index m;
        // its left-bond Liouvillian feeds this element. The element whose
        // left trace is `base` sits at index m-1.
        let right_src = if upper.boundary() == BoundaryMode::TranslationInvariant {
            Some(upper.element(0))
        } else if m < upper.len() {
            Some(upper.element(m))
        } else {
            None
        };
        let left_src = if upper.boundary() == BoundaryMode::TranslationInvariant {
            Some(upper.element(0))
        } else if m >= 1 {
            Some(upper.element(m - 1))
        } else {
            None
        };
        // TL_R of the element extending to the right of `base`.
        if let Some(src) = right_src {
            let bond = base.range().right();
            if ham.has_bond(bond) {
                let contrib = ham.tl(End::Right, src)?;
                debug_assert_eq!(contrib.range().left(), base.range().left());
                acc.add_scaled(&contrib.with_range(base.range())?, 1.0)?;
            }
        } else if upper.boundary() == BoundaryMode::Finite && ham.has_bond(base.range().right()) {
            return Err(Error::WindowTooSmall(format!(
                "missing scale-{} neighbor right of {}",
                upper.scale(),
                base.range()
            )));
        }
        // TL_L of the element extending to the left.
        if let Some(src) = left_src {
            let bond = base.range().left() - 1;
            if ham.has_bond(bond) {
                let contrib = ham.tl(End::Left, src)?;
                acc.add_scaled(&contrib.with_range(base.range())?, 1.0)?;
            }
        } else if upper.boundary() == BoundaryMode::Finite && ham.has_bond(base.range().left() - 1) {
            return Err(Error::WindowTooSmall(format!(
                "missing scale-{} neighbor left of {}",
                upper.scale(),
                base.range()
            )));
        }
        acc.resymmetrize();
        out.push(acc);
    }
    OperatorWindow::new(upper.boundary(), out)
}

/// Phi restricted to the kernel of the set trace map:
/// Gamma_m = TL_L P_{T_R} gamma_{m-1/2} + TL_R P_{T_L} gamma_{m+1/2}.
/// Equals `phi` on kernel inputs (checked against `kernel_tol`).
pub fn phi_kernel_action(ham: &Hamiltonian, gamma: &OperatorWindow, kernel_tol: f64) -> Result<OperatorWindow> {
    let lower = gamma.trace_step()?;
    let defect = lower.max_abs();
    if defect > kernel_tol {
        return Err(Error::NotInKernel(defect));
    }
    let mut out = Vec::with_capacity(lower.len());
    for m in 0..lower.len() {
        let base_range = lower.element(m).range();
        let mut acc = HermitianOperator::zero(base_range, gamma.local_dim());
        let (right_src, left_src) = if gamma.boundary() == BoundaryMode::TranslationInvariant {
            (Some(gamma.element(0)), Some(gamma.element(0)))
        } else {
            (
                if m < gamma.len() { Some(gamma.element(m)) } else { None },
                if m >= 1 { Some(gamma.element(m - 1)) } else { None },
            )
        };
        if let Some(src) = right_src {
            if ham.has_bond(base_range.right()) {
                let proj = kernel_project_end(End::Left, src)?;
                let contrib = ham.tl(End::Right, &proj)?;
                acc.add_scaled(&contrib.with_range(base_range)?, 1.0)?;
            }
        }
        if let Some(src) = left_src {
            if ham.has_bond(base_range.left() - 1) {
                let proj = kernel_project_end(End::Right, src)?;
                let contrib = ham.tl(End::Left, &proj)?;
                acc.add_scaled(&contrib.with_range(base_range)?, 1.0)?;
            }
        }
        acc.resymmetrize();
        out.push(acc);
    }
    OperatorWindow::new(gamma.boundary(), out)
}

/// Diagonal part of the projector onto im(Phi P_T), elementwise:
/// I_{TL_L} P_{T_R} + I_{TL_R} P_{T_L} - I_{TL_R} I_{TL_L}.
/// The image projectors act on the end sites with the bonds that stick out
/// of the element's range; a missing bond drops its term.
pub fn image_project_diag(ham: &Hamiltonian, x: &HermitianOperator) -> Result<HermitianOperator> {
    let range = x.range();
    let left_bond = range.left() - 1;
    let right_bond = range.right();
    let has_l = ham.has_bond(left_bond);
    let has_r = ham.has_bond(right_bond);
    let mut acc = HermitianOperator::zero(range, x.local_dim());
    if has_l {
        let pr = kernel_project_end(End::Right, x)?;
        acc.add_scaled(&ham.img_tl(End::Left, left_bond, &pr)?, 1.0)?;
    }
    if has_r {
        let pl = kernel_project_end(End::Left, x)?;
        acc.add_scaled(&ham.img_tl(End::Right, right_bond, &pl)?, 1.0)?;
    }
    if has_l && has_r {
        let il = ham.img_tl(End::Left, left_bond, x)?;
        acc.add_scaled(&ham.img_tl(End::Right, right_bond, &il)?, -1.0)?;
    }
    Ok(acc)
}

/// Non-diagonal part of the image projector (stencil over neighbors):
/// (I^{ND} sigma)_n = TL_R^+ TL_L sigma_{n-1} / 2
///                  + (1 - (Q_{TL_L} + Q_{TL_R}) / 2) sigma_n
///                  + TL_L^+ TL_R sigma_{n+1} / 2,
/// with all maps one scale down using the edge bonds inside each window.
pub fn image_project_nondiag(ham: &Hamiltonian, x: &OperatorWindow) -> Result<OperatorWindow> {
    let mut out = Vec::with_capacity(x.len());
    for n in 0..x.len() {
        let e = x.element(n);
        let mut acc = e.clone();
        acc.add_scaled(&ham.q_tl(End::Left, e)?, -0.5)?;
        acc.add_scaled(&ham.q_tl(End::Right, e)?, -0.5)?;
        if let Some(left) = x.neighbor(n, -1).into_option() {
            let contrib = ham.tl_pinv(End::Right, &ham.tl(End::Left, &left)?)?;
            acc.add_scaled(&contrib.with_range(e.range())?, 0.5)?;
        }
        if let Some(right) = x.neighbor(n, 1).into_option() {
            let contrib = ham.tl_pinv(End::Left, &ham.tl(End::Right, &right)?)?;
            acc.add_scaled(&contrib.with_range(e.range())?, 0.5)?;
        }
        out.push(acc);
    }
    OperatorWindow::new(x.boundary(), out)
}

/// Projector onto im(Phi P_T): the non-diagonal stencil composed with the
/// elementwise diagonal projector.
pub fn image_project_full(ham: &Hamiltonian, x: &OperatorWindow) -> Result<OperatorWindow> {
    let diag = OperatorWindow::new(
        x.boundary(),
        x.elements().iter().map(|e| image_project_diag(ham, e)).collect::<Result<Vec<_>>>()?,
    )?;
    image_project_nondiag(ham, &diag)
}

/// Minimum-norm solution of T psi = omega for a consistent scale-l window:
/// psi_n = T_R^+ Omega_{n-1/2} + T_L^+ Omega_{n+1/2} - T_L^+ T_R^+ mu_n,
/// with mu_n the shared overlap marginal. Orthogonal to the elementwise
/// kernel of the trace map, and exact under trace_step.
pub fn min_norm_extension(omega: &OperatorWindow, consistency_tol: f64) -> Result<OperatorWindow> {
    let defect = omega.consistency_defect();
    if defect > consistency_tol {
        return Err(Error::InconsistentMarginals(defect));
    }
    if omega.boundary() == BoundaryMode::TranslationInvariant {
        let e = omega.element(0);
        let mu = e.trace_left_site()?;
        let mut ext = trace_end_pinv(End::Right, e);
        ext.add_scaled(&trace_end_pinv(End::Left, e).with_range(ext.range())?, 1.0)?;
        let mu_embedded = trace_end_pinv(End::Left, &trace_end_pinv(End::Right, &mu)).with_range(ext.range())?;
        ext.add_scaled(&mu_embedded, -1.0)?;
        return Ok(OperatorWindow::translation_invariant(ext));
    }
    if omega.len() < 2 {
        return Err(Error::WindowTooSmall("extension needs at least two elements".into()));
    }
    let mut out = Vec::with_capacity(omega.len() - 1);
    for n in 0..omega.len() - 1 {
        let left = omega.element(n);
        let right = omega.element(n + 1);
        let mut mu = left.trace_left_site()?;
        mu.add_scaled(&right.trace_right_site()?.with_range(mu.range())?, 1.0)?;
        let mu = mu.scaled(0.5);
        let mut ext = trace_end_pinv(End::Right, left);
        ext.add_scaled(&trace_end_pinv(End::Left, right).with_range(ext.range())?, 1.0)?;
        let mu_embedded = trace_end_pinv(End::Left, &trace_end_pinv(End::Right, &mu)).with_range(ext.range())?;
        ext.add_scaled(&mu_embedded, -1.0)?;
        out.push(ext);
    }
    OperatorWindow::new(omega.boundary(), out)
}

/// chi_bar: Phi applied to the minimum-norm extension, in closed form.
pub fn chi_bar(ham: &Hamiltonian, omega: &OperatorWindow) -> Result<OperatorWindow> {
    let ext = min_norm_extension(omega, 1e-6)?;
    phi(ham, &ext)
}

/// Membership residual of a candidate derivative in the affine space
/// Phi(extensions of omega): || (1 - I_Phi)(psi - chi_bar) ||.
pub fn compatibility_check(
    ham: &Hamiltonian,
    psi_candidate: &OperatorWindow,
    omega: &OperatorWindow,
) -> Result<(bool, f64)> {
    let base = chi_bar(ham, omega)?;
    let diff = psi_candidate.sub(&base)?;
    let projected = image_project_full(ham, &diff)?;
    let residual = diff.sub(&projected)?.norm();
    Ok((residual <= 1e-8 * (1.0 + diff.norm()), residual))
}

/// Total energy of the window: every Hamiltonian bond inside the span,
/// evaluated on a containing element's two-site marginal, plus the on-site
/// terms. For translation-invariant windows this is the energy per site.
pub fn energy(ham: &Hamiltonian, omega: &OperatorWindow) -> Result<f64> {
    let d = omega.local_dim();
    if omega.boundary() == BoundaryMode::TranslationInvariant {
        let e = omega.element(0);
        let a = e.range().left();
        let bond_rho = e.partial_trace(SiteRange::from_span(a, 2))?;
        let site_rho = e.partial_trace(SiteRange::from_span(a, 1))?;
        let mut acc = 0.0;
        if let Some(k) = ham.k_term(a) {
            let kop = HermitianOperator::from_parts(bond_rho.range(), d, k.clone());
            acc += crate::hermitian::trace_inner(&bond_rho, &kop)?;
        }
        if let Some(v) = ham.v_term(a) {
            let vop = HermitianOperator::from_parts(site_rho.range(), d, v.clone());
            acc += crate::hermitian::trace_inner(&site_rho, &vop)?;
        }
        return Ok(acc);
    }
    let span = omega.span();
    let mut acc = 0.0;
    for bond in span.left()..span.right() {
        if let Some(k) = ham.k_term(bond) {
            let holder = containing_element(omega, bond, bond + 1)
                .ok_or_else(|| Error::WindowTooSmall(format!("no element covers bond {bond}")))?;
            let rho2 = holder.partial_trace(SiteRange::from_span(bond, 2))?;
            let kop = HermitianOperator::from_parts(rho2.range(), d, k.clone());
            acc += crate::hermitian::trace_inner(&rho2, &kop)?;
        }
    }
    for site in span.left()..=span.right() {
        if let Some(v) = ham.v_term(site) {
            let holder = containing_element(omega, site, site)
                .ok_or_else(|| Error::WindowTooSmall(format!("no element covers site {site}")))?;
            let rho1 = holder.partial_trace(SiteRange::from_span(site, 1))?;
            let vop = HermitianOperator::from_parts(rho1.range(), d, v.clone());
            acc += crate::hermitian::trace_inner(&rho1, &vop)?;
        }
    }
    Ok(acc)
}

fn containing_element<'a>(omega: &'a OperatorWindow, left: i64, right: i64) -> Option<&'a HermitianOperator> {
    let k0 = (left - omega.first_left()).clamp(0, omega.len() as i64 - 1) as usize;
    for k in (0..=k0).rev() {
        let r = omega.element(k).range();
        if r.left() <= left && right <= r.right() {
            return Some(omega.element(k));
        }
    }
    None
}

/// The Hamiltonian terms assembled as an l-local operator set on the
/// window's geometry: each bond and site term embedded into one canonical
/// covering element. The pairing of this set with any compatible
/// derivative vanishes (energy conservation by compatibility).
pub fn hamiltonian_window_set(ham: &Hamiltonian, omega: &OperatorWindow) -> Result<OperatorWindow> {
    let d = omega.local_dim();
    let mut elements: Vec<HermitianOperator> =
        omega.elements().iter().map(|e| HermitianOperator::zero(e.range(), d)).collect();
    if omega.boundary() == BoundaryMode::TranslationInvariant {
        let e = omega.element(0);
        let a = e.range().left();
        let mut acc = HermitianOperator::zero(e.range(), d);
        if let Some(k) = ham.k_term(a) {
            let kop = HermitianOperator::from_parts(SiteRange::from_span(a, 2), d, k.clone());
            acc.add_scaled(&kop.embed(e.range())?, 1.0)?;
        }
        if let Some(v) = ham.v_term(a) {
            let vop = HermitianOperator::from_parts(SiteRange::from_span(a, 1), d, v.clone());
            acc.add_scaled(&vop.embed(e.range())?, 1.0)?;
        }
        elements[0] = acc;
        return OperatorWindow::new(omega.boundary(), elements);
    }
    let span = omega.span();
    let first = omega.first_left();
    let last_idx = omega.len() as i64 - 1;
    for bond in span.left()..span.right() {
        if let Some(k) = ham.k_term(bond) {
            let idx = (bond - first).clamp(0, last_idx) as usize;
            let kop = HermitianOperator::from_parts(SiteRange::from_span(bond, 2), d, k.clone());
            let target = elements[idx].range();
            elements[idx].add_scaled(&kop.embed(target)?, 1.0)?;
        }
    }
    for site in span.left()..=span.right() {
        if let Some(v) = ham.v_term(site) {
            let idx = (site - first).clamp(0, last_idx) as usize;
            let vop = HermitianOperator::from_parts(SiteRange::from_span(site, 1), d, v.clone());
            let target = elements[idx].range();
            elements[idx].add_scaled(&vop.embed(target)?, 1.0)?;
        }
    }
    OperatorWindow::new(omega.boundary(), elements)
}

/// Binary checkpoint encoding of a window.
///
/// Layout: magic "ILTW", version u32, d u32, scale i64, boundary u8,
/// first_left i64, element count u64, then each element as dim u64
/// followed by row-major (re, im) little-endian f64 pairs.
pub fn write_checkpoint<W: std::io::Write>(w: &mut W, window: &OperatorWindow) -> Result<()> {
    w.write_all(b"ILTW")?;
    w.write_all(&1u32.to_le_bytes())?;
    w.write_all(&(window.local_dim() as u32).to_le_bytes())?;
    w.write_all(&window.scale().to_le_bytes())?;
    let b = match window.boundary() {
        BoundaryMode::Finite => 0u8,
        BoundaryMode::InfiniteWindow => 1,
        BoundaryMode::TranslationInvariant => 2,
    };
    w.write_all(&[b])?;
    w.write_all(&window.first_left().to_le_bytes())?;
    w.write_all(&(window.len() as u64).to_le_bytes())?;
    for e in window.elements() {
        w.write_all(&(e.dim() as u64).to_le_bytes())?;
        for row in e.matrix().rows() {
            for z in row {
                w.write_all(&z.re.to_le_bytes())?;
                w.write_all(&z.im.to_le_bytes())?;
            }
        }
    }
    Ok(())
}

pub fn read_checkpoint<R: std::io::Read>(r: &mut R) -> Result<OperatorWindow> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != b"ILTW" {
        return Err(Error::Config("bad checkpoint magic".into()));
    }
    let mut u32b = [0u8; 4];
    r.read_exact(&mut u32b)?;
    let version = u32::from_le_bytes(u32b);
    if version != 1 {
        return Err(Error::Config(format!("unsupported checkpoint version {version}")));
    }
    r.read_exact(&mut u32b)?;
    let d = u32::from_le_bytes(u32b) as usize;
    let mut i64b = [0u8; 8];
    r.read_exact(&mut i64b)?;
    let scale = i64::from_le_bytes(i64b);
    let mut b1 = [0u8; 1];
    r.read_exact(&mut b1)?;
    let boundary = match b1[0] {
        0 => BoundaryMode::Finite,
        1 => BoundaryMode::InfiniteWindow,
        2 => BoundaryMode::TranslationInvariant,
        x => return Err(Error::Config(format!("bad boundary tag {x}"))),
    };
    r.read_exact(&mut i64b)?;
    let first_left = i64::from_le_bytes(i64b);
    let mut u64b = [0u8; 8];
    r.read_exact(&mut u64b)?;
    let count = u64::from_le_bytes(u64b) as usize;
    let mut elements = Vec::with_capacity(count);
    for k in 0..count {
        r.read_exact(&mut u64b)?;
        let dim = u64::from_le_bytes(u64b) as usize;
        let mut m = Array2::<C64>::zeros((dim, dim));
        let mut f64b = [0u8; 8];
        for i in 0..dim {
            for j in 0..dim {
                r.read_exact(&mut f64b)?;
                let re = f64::from_le_bytes(f64b);
                r.read_exact(&mut f64b)?;
                let im = f64::from_le_bytes(f64b);
                m[(i, j)] = C64::new(re, im);
            }
        }
        let range = SiteRange::from_span(first_left + k as i64, scale as usize + 1);
        elements.push(HermitianOperator::new(range, d, m)?);
    }
    OperatorWindow::new(boundary, elements)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hamiltonian::IsingParams;
    use crate::hermitian::trace_inner;
    use crate::oracle;
    use crate::random::{hermitian_basis, random_density, random_hermitian, rng};
    use ndarray::Array2;
    use num_complex::Complex64 as C64;

    fn ising(n: usize) -> Hamiltonian {
        Hamiltonian::mixed_field_ising_finite(IsingParams::paper(), n)
    }

    fn window_of(rho: &HermitianOperator, l: i64) -> OperatorWindow {
        oracle::marginals(rho, l).unwrap()
    }

    #[test]
    fn trace_maps_basics() {
        let mut rng = rng(51);
        let r2 = SiteRange::from_span(0, 2);
        let rho = random_density(&mut rng, r2, 2);
        // rho x I2 under T_R gives rho back.
        let ext = trace_end_pinv(End::Right, &rho);
        let back = trace_end(End::Right, &ext).unwrap();
        assert!(back.sub(&rho).unwrap().max_abs() < 1e-13);
        // T_L and T_R commute (disjoint sites).
        let r3 = SiteRange::from_span(0, 3);
        let x = random_hermitian(&mut rng, r3, 2, 1.0);
        let a = trace_end(End::Left, &trace_end(End::Right, &x).unwrap()).unwrap();
        let b = trace_end(End::Right, &trace_end(End::Left, &x).unwrap()).unwrap();
        assert!(a.sub(&b).unwrap().max_abs() < 1e-13);
        // Index-loop oracle for T_L on 3 sites.
        let tl = trace_end(End::Left, &x).unwrap();
        for i in 0..4usize {
            for j in 0..4usize {
                let mut acc = C64::default();
                for t in 0..2usize {
                    acc += x.matrix()[(t * 4 + i, t * 4 + j)];
                }
                assert!((tl.matrix()[(i, j)] - acc).norm() < 1e-13);
            }
        }
    }

    #[test]
    fn trace_step_consistency_and_ti() {
        let mut rng = rng(52);
        let rho = random_density(&mut rng, SiteRange::from_span(0, 5), 2);
        let w3 = window_of(&rho, 3);
        assert!(w3.consistency_defect() < 1e-12);
        let w2 = w3.trace_step().unwrap();
        assert!(w2.consistency_defect() < 1e-12);
        assert_eq!(w2.len(), w3.len() + 1);
        // Against direct marginals of the global state.
        let direct = window_of(&rho, 2);
        for k in 0..w2.len() {
            assert!(w2.element(k).sub(direct.element(k)).unwrap().max_abs() < 1e-12);
        }
        // Translation-invariant windows stay single-element.
        let site = oracle::quench1_site();
        let mut elem = site.clone();
        for k in 1..4 {
            elem = elem.tensor(&site.with_range(SiteRange::from_span(k, 1)).unwrap()).unwrap();
        }
        let ti = OperatorWindow::translation_invariant(elem);
        let down = ti.trace_step().unwrap();
        assert_eq!(down.len(), 1);
        assert_eq!(down.scale(), 2);
    }

    #[test]
    fn kernel_projector_properties() {
        let mut rng = rng(53);
        let r = SiteRange::from_span(0, 3);
        let x = random_hermitian(&mut rng, r, 2, 1.0);
        let p = kernel_project_trace(&x).unwrap();
        // Idempotent.
        let pp = kernel_project_trace(&p).unwrap();
        assert!(pp.sub(&p).unwrap().max_abs() < 1e-12);
        // Output has vanishing single-site end traces.
        assert!(trace_end(End::Left, &p).unwrap().max_abs() < 1e-12);
        assert!(trace_end(End::Right, &p).unwrap().max_abs() < 1e-12);
        // Self-adjoint under the trace inner product.
        let y = random_hermitian(&mut rng, r, 2, 1.0);
        let py = kernel_project_trace(&y).unwrap();
        let a = trace_inner(&p, &y).unwrap();
        let b = trace_inner(&x, &py).unwrap();
        assert!((a - b).abs() < 1e-11);
        // P of I2 x psi has zero left trace by construction.
        let small = random_hermitian(&mut rng, SiteRange::from_span(1, 2), 2, 1.0);
        let lifted = trace_end_pinv(End::Left, &small);
        let plifted = kernel_project_trace(&lifted).unwrap();
        assert!(trace_end(End::Left, &plifted).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn phi_matches_oracle_derivative() {
        // 5-site chain, l = 2: Phi of the exact scale-3 marginals equals
        // the partial traces of the dense derivative.
        let n = 5;
        let ham = ising(n);
        let (_, hdense) = oracle::build_hamiltonian(IsingParams::paper(), n).unwrap();
        let prop = oracle::Propagator::new(&hdense).unwrap();
        let rho0 = oracle::initial_state(oracle::QuenchKind::Quench2, n).unwrap();
        let rho = prop.evolve(&rho0, 0.37).unwrap();
        let drho = prop.derivative(&rho).unwrap();
        for l in 1..n as i64 - 1 {
            let upper = window_of(&rho, l + 1);
            let psi = phi(&ham, &upper).unwrap();
            let want = oracle::marginals(&drho, l).unwrap();
            for k in 0..psi.len() {
                let diff = psi.element(k).sub(want.element(k)).unwrap().max_abs();
                assert!(diff < 1e-10, "l={l} element {k}: diff {diff:e}");
                assert!(psi.element(k).trace().abs() < 1e-11);
            }
        }
    }

    #[test]
    fn phi_is_linear() {
        let mut rng = rng(54);
        let ham = ising(6);
        let rho_a = random_density(&mut rng, SiteRange::from_span(0, 6), 2);
        let rho_b = random_density(&mut rng, SiteRange::from_span(0, 6), 2);
        let wa = window_of(&rho_a, 3);
        let wb = window_of(&rho_b, 3);
        let combo = wa.scaled(0.3).add(&wb.scaled(0.7)).unwrap();
        let lhs = phi(&ham, &combo).unwrap();
        let mut rhs = phi(&ham, &wa).unwrap().scaled(0.3);
        rhs.axpy(0.7, &phi(&ham, &wb).unwrap()).unwrap();
        assert!(lhs.sub(&rhs).unwrap().max_abs() < 1e-11);
    }

    #[test]
    fn phi_zero_for_commuting_state() {
        // Diagonal product state with a z-only Hamiltonian: [H, rho] = 0.
        let p = IsingParams { j: 1.0, h_l: 0.4, h_t: 0.0 };
        let ham = Hamiltonian::mixed_field_ising_finite(p, 5);
        let mut diag = Array2::<C64>::zeros((2, 2));
        diag[(0, 0)] = C64::new(0.8, 0.0);
        diag[(1, 1)] = C64::new(0.2, 0.0);
        let site = HermitianOperator::new(SiteRange::from_span(0, 1), 2, diag).unwrap();
        let mut rho = site.clone();
        for k in 1..5 {
            rho = rho.tensor(&site.with_range(SiteRange::from_span(k, 1)).unwrap()).unwrap();
        }
        let w = window_of(&rho, 2);
        let psi = phi(&ham, &w).unwrap();
        assert!(psi.max_abs() < 1e-13);
    }

    #[test]
    fn phi_kernel_action_agrees_with_phi() {
        let mut rng = rng(55);
        let ham = ising(6);
        // Random kernel element at scale 3 on a 6-site chain.
        let rho = random_density(&mut rng, SiteRange::from_span(0, 6), 2);
        let w = window_of(&rho, 3);
        let gamma = kernel_project_window(&w).unwrap();
        assert!(gamma.trace_step().unwrap().max_abs() < 1e-12);
        let via_kernel = phi_kernel_action(&ham, &gamma, 1e-8).unwrap();
        let via_phi = phi(&ham, &gamma).unwrap();
        assert!(via_kernel.sub(&via_phi).unwrap().max_abs() < 1e-10);
        // Zero input gives zero.
        let zero = gamma.zeros_like();
        assert!(phi_kernel_action(&ham, &zero, 1e-8).unwrap().max_abs() == 0.0);
        // Output is fixed by the image projector.
        let img = image_project_full(&ham, &via_kernel).unwrap();
        assert!(img.sub(&via_kernel).unwrap().max_abs() < 1e-9, "projector does not fix Phi(ker)");
    }

    #[test]
    fn image_projector_idempotent_and_self_adjoint() {
        let mut rng = rng(56);
        let ham = ising(6);
        let rho = random_density(&mut rng, SiteRange::from_span(0, 6), 2);
        let geometry = phi(&ham, &window_of(&rho, 3)).unwrap().zeros_like();
        let rand_window = |rng: &mut rand_chacha::ChaCha8Rng| {
            let mut w = geometry.clone();
            for k in 0..w.len() {
                let r = w.element(k).range();
                *w.element_mut(k) = random_hermitian(rng, r, 2, 1.0);
            }
            w
        };
        let x = rand_window(&mut rng);
        let y = rand_window(&mut rng);
        let px = image_project_full(&ham, &x).unwrap();
        let ppx = image_project_full(&ham, &px).unwrap();
        assert!(ppx.sub(&px).unwrap().max_abs() < 1e-9, "idempotence defect {}", ppx.sub(&px).unwrap().max_abs());
        let py = image_project_full(&ham, &y).unwrap();
        let a = px.inner(&y).unwrap();
        let b = x.inner(&py).unwrap();
        assert!((a - b).abs() < 1e-9, "self-adjointness defect {}", (a - b).abs());
    }

    #[test]
    fn image_projector_matches_numeric_reference() {
        // Build the projector onto im(Phi P_T) numerically from a basis
        // and compare. Small case: 5-site chain, scale 2 -> kernel at 3.
        let n = 5;
        let ham = ising(n);
        let mut rng = rng(57);
        let rho = random_density(&mut rng, SiteRange::from_span(0, n), 2);
        let upper = window_of(&rho, 3);
        let lower_geom = phi(&ham, &upper).unwrap().zeros_like();
        // Collect images of Phi P_T over a basis of the upper set space.
        let mut images: Vec<OperatorWindow> = Vec::new();
        for k in 0..upper.len() {
            let dim = upper.element(k).dim();
            for b in hermitian_basis(dim) {
                let mut probe = upper.zeros_like();
                *probe.element_mut(k) =
                    HermitianOperator::new(upper.element(k).range(), 2, b).unwrap();
                let projected = kernel_project_window(&probe).unwrap();
                images.push(phi(&ham, &projected).unwrap());
            }
        }
        // Gram matrix of the images; the numeric projector is G G^+.
        let m = images.len();
        let mut g = Array2::<C64>::zeros((m, m));
        for i in 0..m {
            for j in 0..m {
                g[(i, j)] = C64::new(images[i].inner(&images[j]).unwrap(), 0.0);
            }
        }
        let (w, u) = crate::eig::zheevd(&g).unwrap();
        let wmax = w.iter().cloned().fold(0.0, f64::max);
        // Project a random window onto span(images) via least squares:
        // coefficients c = G^+ b with b_i = <im_i, x>.
        let x = {
            let mut w = lower_geom.clone();
            for k in 0..w.len() {
                let r = w.element(k).range();
                *w.element_mut(k) = random_hermitian(&mut rng, r, 2, 1.0);
            }
            w
        };
        let b: Vec<f64> = images.iter().map(|im| im.inner(&x).unwrap()).collect();
        let mut c = vec![0.0f64; m];
        for (j, &wj) in w.iter().enumerate() {
            if wj > 1e-10 * wmax {
                let mut ub = 0.0;
                for i in 0..m {
                    ub += (u[(i, j)].conj() * C64::new(b[i], 0.0)).re;
                }
                let scale = ub / wj;
                for i in 0..m {
                    c[i] += (u[(i, j)] * scale).re;
                }
            }
        }
        let mut reference = lower_geom.clone();
        for (i, ci) in c.iter().enumerate() {
            reference.axpy(*ci, &images[i]).unwrap();
        }
        let ours = image_project_full(&ham, &x).unwrap();
        let diff = ours.sub(&reference).unwrap().norm();
        assert!(diff < 1e-8 * (1.0 + x.norm()), "projector mismatch {diff:e}");
    }

    #[test]
    fn min_norm_extension_properties() {
        let mut rng = rng(58);
        let rho = random_density(&mut rng, SiteRange::from_span(0, 5), 2);
        let omega = window_of(&rho, 2);
        let ext = min_norm_extension(&omega, 1e-8).unwrap();
        // Round trip through the trace map is exact.
        let back = ext.trace_step().unwrap();
        for k in 0..omega.len() {
            assert!(back.element(k).sub(omega.element(k)).unwrap().max_abs() < 1e-12);
        }
        // Orthogonal to every kernel element.
        for _ in 0..5 {
            let mut probe = ext.zeros_like();
            for k in 0..probe.len() {
                let r = probe.element(k).range();
                *probe.element_mut(k) = random_hermitian(&mut rng, r, 2, 1.0);
            }
            let gamma = kernel_project_window(&probe).unwrap();
            assert!(ext.inner(&gamma).unwrap().abs() < 1e-10);
        }
        // Maximally mixed fixed point.
        let mm_elems: Vec<_> = (0..3)
            .map(|k| HermitianOperator::maximally_mixed(SiteRange::from_span(k, 3), 2))
            .collect();
        let mm = OperatorWindow::new(BoundaryMode::Finite, mm_elems).unwrap();
        let ext = min_norm_extension(&mm, 1e-12).unwrap();
        for e in ext.elements() {
            let want = HermitianOperator::maximally_mixed(e.range(), 2);
            assert!(e.sub(&want).unwrap().max_abs() < 1e-13);
        }
        // Inconsistent input is rejected.
        let mut bad = omega.clone();
        *bad.element_mut(0) = random_density(&mut rng, bad.element(0).range(), 2);
        assert!(matches!(min_norm_extension(&bad, 1e-8), Err(Error::InconsistentMarginals(_))));
    }

    #[test]
    fn compatibility_check_cases() {
        let mut rng = rng(59);
        let n = 5;
        let ham = ising(n);
        let rho = random_density(&mut rng, SiteRange::from_span(0, n), 2);
        let omega = window_of(&rho, 2);
        // Phi of the minimum-norm extension: compatible, residual ~ 0.
        let candidate = phi(&ham, &min_norm_extension(&omega, 1e-8).unwrap()).unwrap();
        let (ok, resid) = compatibility_check(&ham, &candidate, &omega).unwrap();
        assert!(ok && resid < 1e-10);
        // Phi of the exact marginals: compatible.
        let candidate = phi(&ham, &window_of(&rho, 3)).unwrap();
        let (ok, resid) = compatibility_check(&ham, &candidate, &omega).unwrap();
        assert!(ok, "exact derivative flagged incompatible, residual {resid:e}");
        // A random traceless set: generically incompatible.
        let mut probe = candidate.zeros_like();
        for k in 0..probe.len() {
            let r = probe.element(k).range();
            *probe.element_mut(k) = crate::random::random_traceless(&mut rng, r, 2, 1.0);
        }
        let (ok, resid) = compatibility_check(&ham, &probe, &omega).unwrap();
        assert!(!ok && resid > 1e-3);
    }

    #[test]
    fn conserved_quantities_are_annihilated() {
        // Brute-force all 2-local conserved operators on a 4-site chain,
        // then check that compatible derivatives pair to zero with them.
        let n = 4;
        let l = 2i64;
        let ham = ising(n);
        let (_, hdense) = oracle::build_hamiltonian(IsingParams::paper(), n).unwrap();
        let full = SiteRange::from_span(0, n);
        let mut rng = rng(60);
        let rho = random_density(&mut rng, full, 2);
        let omega = window_of(&rho, l);
        let geometry = omega.zeros_like();
        // Basis of the l-local set space embedded globally.
        let mut basis_sets: Vec<OperatorWindow> = Vec::new();
        let mut commutator_vecs: Vec<HermitianOperator> = Vec::new();
        for k in 0..geometry.len() {
            let dim = geometry.element(k).dim();
            for b in hermitian_basis(dim) {
                let mut set = geometry.clone();
                *set.element_mut(k) = HermitianOperator::new(geometry.element(k).range(), 2, b).unwrap();
                let embedded = set
                    .elements()
                    .iter()
                    .fold(HermitianOperator::zero(full, 2), |acc, e| {
                        acc.add(&e.embed(full).unwrap()).unwrap()
                    });
                commutator_vecs.push(crate::hermitian::commutator_i(&embedded, &hdense).unwrap());
                basis_sets.push(set);
            }
        }
        let m = basis_sets.len();
        let mut gram = Array2::<C64>::zeros((m, m));
        for i in 0..m {
            for j in i..m {
                let v = trace_inner(&commutator_vecs[i], &commutator_vecs[j]).unwrap();
                gram[(i, j)] = C64::new(v, 0.0);
                gram[(j, i)] = C64::new(v, 0.0);
            }
        }
        let (w, u) = crate::eig::zheevd(&gram).unwrap();
        let scale = w.last().copied().unwrap_or(1.0).max(1.0);
        // Null vectors of the Gram matrix are conserved combinations.
        let mut conserved: Vec<OperatorWindow> = Vec::new();
        for (j, &wj) in w.iter().enumerate() {
            if wj < 1e-10 * scale {
                let mut set = geometry.clone();
                for i in 0..m {
                    let c = u[(i, j)].re;
                    if c.abs() > 1e-14 {
                        set.axpy(c, &basis_sets[i]).unwrap();
                    }
                }
                conserved.push(set);
            }
        }
        assert!(!conserved.is_empty(), "the Hamiltonian itself is 2-local conserved");
        // Compatible derivative: Phi of the exact scale-(l+1) marginals.
        let psi = phi(&ham, &window_of(&rho, l + 1)).unwrap();
        for (idx, setw) in conserved.iter().enumerate() {
            let pairing = psi.inner(setw).unwrap();
            assert!(pairing.abs() < 1e-11, "conserved operator {idx} drifts: {pairing:e}");
        }
    }

    #[test]
    fn energy_matches_dense_expectation() {
        let mut rng = rng(61);
        let n = 5;
        let ham = ising(n);
        let (_, hdense) = oracle::build_hamiltonian(IsingParams::paper(), n).unwrap();
        let rho = random_density(&mut rng, SiteRange::from_span(0, n), 2);
        let direct = trace_inner(&rho, &hdense).unwrap();
        for l in 1..n as i64 {
            let w = window_of(&rho, l);
            let e = energy(&ham, &w).unwrap();
            assert!((e - direct).abs() < 1e-11, "l={l}: {e} vs {direct}");
            // The assembled window set gives the same pairing.
            let hset = hamiltonian_window_set(&ham, &w).unwrap();
            let via_set = w.inner(&hset).unwrap();
            assert!((via_set - direct).abs() < 1e-11);
        }
    }

    #[test]
    fn checkpoint_roundtrip() {
        let mut rng = rng(62);
        let rho = random_density(&mut rng, SiteRange::from_span(0, 4), 2);
        let w = window_of(&rho, 2);
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &w).unwrap();
        let back = read_checkpoint(&mut buf.as_slice()).unwrap();
        assert_eq!(back.len(), w.len());
        assert_eq!(back.scale(), w.scale());
        assert_eq!(back.boundary(), w.boundary());
        for k in 0..w.len() {
            assert!(back.element(k).sub(w.element(k)).unwrap().max_abs() == 0.0);
        }
    }

    #[test]
    fn reflection_roundtrip() {
        let mut rng = rng(63);
        let rho = random_density(&mut rng, SiteRange::from_span(0, 5), 2);
        let w = window_of(&rho, 2);
        let rr = w.reflected().reflected();
        for k in 0..w.len() {
            assert!(rr.element(k).sub(w.element(k)).unwrap().max_abs() == 0.0);
        }
        // R^2 = identity on basis states, and single-site reflection is
        // trivial.
        let site = w.element(0).partial_trace(SiteRange::from_span(0, 1)).unwrap();
        assert!(site.reflected().sub(&site).unwrap().max_abs() == 0.0);
    }
}

#[cfg(test)]
mod superop_direction_tests {
    use super::*;
    use crate::hamiltonian::IsingParams;
    use crate::random::{random_hermitian, rng};

    #[test]
    fn tl_is_traced_heisenberg_commutator() {
        // TL_end X = Tr_end(i [X, k]) with k the edge bond inside X's
        // range; the sign matters for the derivative maps built on it.
        let mut rng = rng(77);
        let ham = Hamiltonian::mixed_field_ising_finite(IsingParams::paper(), 5);
        let r = SiteRange::from_span(0, 3);
        let x = random_hermitian(&mut rng, r, 2, 1.0);
        for end in [End::Left, End::Right] {
            let via_superop = ham.tl(end, &x).unwrap();
            let bond = match end {
                End::Left => 0,
                End::Right => 1,
            };
            let k = HermitianOperator::from_parts(
                SiteRange::from_span(bond, 2),
                2,
                ham.k_term(bond).unwrap().clone(),
            );
            let comm = crate::hermitian::commutator_i(&x, &k.embed(r).unwrap()).unwrap();
            let direct = match end {
                End::Left => comm.trace_left_site().unwrap(),
                End::Right => comm.trace_right_site().unwrap(),
            };
            let diff = via_superop.sub(&direct).unwrap().max_abs();
            assert!(diff < 1e-12, "{end:?}: diff {diff:e}");
        }
    }
}

/// Orthogonal projection onto the consistent affine subspace (overlapping
/// marginals of adjacent elements agree), used to suppress roundoff drift
/// after integrator steps. Solves the small Gram system of the adjacency
/// constraints by conjugate gradients. Returns the defect before
/// projection.
pub fn project_consistent(omega: &mut OperatorWindow, tol: f64, max_iter: usize) -> Result<f64> {
    if omega.scale() < 1 || omega.len() == 0 {
        return Ok(0.0);
    }
    let ti = omega.boundary() == BoundaryMode::TranslationInvariant;
    if !ti && omega.len() < 2 {
        return Ok(0.0);
    }
    // A(x): the list of overlap disagreements.
    let apply_a = |x: &OperatorWindow| -> Result<Vec<HermitianOperator>> {
        let mut out = Vec::new();
        if ti {
            let e = x.element(0);
            let l = e.trace_left_site()?;
            let r = e.trace_right_site()?.with_range(l.range())?;
            out.push(l.sub(&r)?);
        } else {
            for k in 0..x.len() - 1 {
                let l = x.element(k).trace_left_site()?;
                let r = x.element(k + 1).trace_right_site()?;
                out.push(l.sub(&r)?);
            }
        }
        Ok(out)
    };
    // A^T(y): adjoint embeddings with full identities.
    let apply_at = |y: &[HermitianOperator], like: &OperatorWindow| -> Result<OperatorWindow> {
        let mut out = like.zeros_like();
        if ti {
            let e = like.element(0);
            let lifted_l = y[0].with_range(e.range().shrink_left(1))?.embed(e.range())?;
            let lifted_r = y[0].with_range(e.range().shrink_right(1))?.embed(e.range())?;
            out.element_mut(0).add_scaled(&lifted_l, 1.0)?;
            out.element_mut(0).add_scaled(&lifted_r, -1.0)?;
        } else {
            for (k, yk) in y.iter().enumerate() {
                let ek = like.element(k).range();
                let ek1 = like.element(k + 1).range();
                out.element_mut(k).add_scaled(&yk.embed(ek)?, 1.0)?;
                out.element_mut(k + 1).add_scaled(&yk.with_range(ek1.shrink_right(1))?.embed(ek1)?, -1.0)?;
            }
        }
        Ok(out)
    };
    let dot = |a: &[HermitianOperator], b: &[HermitianOperator]| -> f64 {
        a.iter().zip(b).map(|(x, y)| crate::hermitian::trace_inner(x, y).unwrap()).sum()
    };
    let b = apply_a(omega)?;
    let defect0 = b.iter().fold(0.0f64, |m, x| m.max(x.max_abs()));
    if defect0 <= 1e-300 {
        return Ok(0.0);
    }
    // CG on (A A^T) z = b.
    let mut z: Vec<HermitianOperator> = b.iter().map(|x| HermitianOperator::zero(x.range(), x.local_dim())).collect();
    let mut r = b.clone();
    let mut p = r.clone();
    let mut rr = dot(&r, &r);
    let bnorm = rr.sqrt().max(1e-300);
    for _ in 0..max_iter {
        if rr.sqrt() <= tol * bnorm {
            break;
        }
        let ap = apply_a(&apply_at(&p, omega)?)?;
        let pap = dot(&p, &ap);
        if pap <= 0.0 {
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
        let beta = rr_new / rr;
        rr = rr_new;
        for (pk, rk) in p.iter_mut().zip(&r) {
            let mut next = rk.clone();
            next.add_scaled(pk, beta)?;
            *pk = next;
        }
    }
    let correction = apply_at(&z, omega)?;
    omega.axpy(-1.0, &correction)?;
    omega.resymmetrize();
    Ok(defect0)
}
