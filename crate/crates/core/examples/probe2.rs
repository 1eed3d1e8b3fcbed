use infolattice::experiments::{quench2_window, ExperimentConfig, PolicyKind};
use infolattice::flow::{psi_flow, FlowOptions, FlowOutcome};
use infolattice::hamiltonian::{Hamiltonian, IsingParams};
use infolattice::integrator::{adaptive_evolve, pad_window};
use infolattice::oracle::QuenchKind;

fn main() {
    let config = ExperimentConfig {
        initial_state: QuenchKind::Quench2,
        policy: PolicyKind::Auto,
        l_c: 4,
        shift: true,
        output_times: vec![0.0],
        ..Default::default()
    };
    let mut policy = config.build_policy();
    let opts = config.evolve_options(true);
    let omega0 = quench2_window(config.l_c, config.initial_radius);
    let state = adaptive_evolve(policy.as_mut(), &omega0, 4.22, &opts, &[], |_, _| Ok(()), |_| {}).unwrap();
    // state is unshifted output; reshift for probing the policy domain
    let state = infolattice::integrator::shift_window(&state);
    let state = pad_window(&state, 4).unwrap();
    let ham = Hamiltonian::mixed_field_ising_uniform(IsingParams::paper());
    let fopts = FlowOptions { force: true, ..Default::default() };
    let solve = |omega: &infolattice::local_state::OperatorWindow| -> (infolattice::local_state::OperatorWindow, f64, usize) {
        match psi_flow(&ham, omega, &fopts, None).unwrap() {
            FlowOutcome::Solved { chi, report, .. } => (chi, report.alpha, report.cg_iterations),
            _ => panic!("declined"),
        }
    };
    let (chi0, alpha0, cg0) = solve(&state);
    let (chi0b, _, _) = solve(&state);
    eprintln!("determinism: diff {:.3e}", chi0.sub(&chi0b).unwrap().max_abs());
    eprintln!("alpha0 {alpha0:.6e} cg {cg0} |chi| {:.3e}", chi0.norm());
    // sensitivity: displace along the derivative by tiny dt
    for eps in [1e-7, 1e-6, 1e-5, 1e-4, 1e-3] {
        let mut displaced = state.clone();
        displaced.axpy(eps, &chi0).unwrap();
        let (chi1, alpha1, cg1) = solve(&displaced);
        let d = chi1.sub(&chi0).unwrap().norm();
        eprintln!("eps {eps:.1e}: |dchi| {d:.3e} ratio {:.3e} alpha {alpha1:.6e} cg {cg1}", d / (eps * chi0.norm()));
    }
}
