use infolattice::experiments::{quench2_window, ExperimentConfig, PolicyKind};
use infolattice::integrator::adaptive_evolve;
use infolattice::oracle::QuenchKind;

fn main() {
    let config = ExperimentConfig {
        initial_state: QuenchKind::Quench2,
        policy: PolicyKind::Auto,
        l_c: 4,
        shift: true,
        output_times: vec![0.0, 5.0],
        ..Default::default()
    };
    let mut policy = config.build_policy();
    let opts = config.evolve_options(true);
    let omega0 = quench2_window(config.l_c, config.initial_radius);
    let t0 = std::time::Instant::now();
    let _ = adaptive_evolve(
        policy.as_mut(),
        &omega0,
        5.0,
        &opts,
        &[],
        |_, _| Ok(()),
        |r| {
            let flow = r.health.flow;
            eprintln!(
                "[{:7.2}s] t={:.4} dt={:.5} err={:.2e} acc={} len={} fb={} cg={:?} alpha={:?} J=({:?},{:?}) I=({:?},{:?})",
                t0.elapsed().as_secs_f64(),
                r.t,
                r.dt,
                r.error_estimate,
                r.accepted,
                r.window_len,
                r.health.used_fallback,
                flow.map(|f| f.cg_iterations),
                flow.map(|f| format!("{:.3e}", f.alpha)),
                flow.map(|f| format!("{:.3e}", f.achieved_current)),
                flow.map(|f| format!("{:.3e}", f.target_current)),
                flow.map(|f| format!("{:.3e}", f.info_top)),
                flow.map(|f| format!("{:.3e}", f.info_below)),
            );
        },
    )
    .unwrap();
    eprintln!("done in {:.1}s", t0.elapsed().as_secs_f64());
}
