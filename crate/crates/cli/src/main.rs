//! Command-line front end: run the quench experiments, cutoff-convergence
//! ladders, Gibbs extensions of checkpointed windows, information-lattice
//! snapshots, and the dense-oracle verification suite, emitting CSV/JSON
//! data files.
//!
//! Exit codes: 0 success, 2 configuration error, 3 numerical-health
//! abort, 4 convergence failure.

use clap::{Args, Parser, Subcommand};
use infolattice::error::Error;
use infolattice::experiments::{
    diffusion_coefficient, run_convergence, run_gibbs_compare, run_quench1, run_quench2,
    ExperimentConfig, PolicyKind,
};
use infolattice::gibbs::{gibbs_ladder, recover_log_terms, GibbsOptions};
use infolattice::hamiltonian::{Hamiltonian, IsingParams};
use infolattice::lattice::{local_currents, InfoLattice, MarginalTower};
use infolattice::local_state::{read_checkpoint, write_checkpoint};
use infolattice::oracle::QuenchKind;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "ilt", about = "Information-lattice dynamics of spin chains", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// JSON experiment configuration; omitted fields take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the cutoff scale.
    #[arg(long)]
    l_c: Option<i64>,
    /// Override the policy (petz | flow | auto | oracle).
    #[arg(long)]
    policy: Option<String>,
    /// Override the step-error tolerance.
    #[arg(long)]
    tolerance: Option<f64>,
    /// Replace the output-time grid with 0..=t-end at the given spacing.
    #[arg(long)]
    t_end: Option<f64>,
    #[arg(long, default_value_t = 0.5)]
    t_step: f64,
    /// Directory for the emitted data files.
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Homogeneous quench: information-lattice movie and per-site currents.
    Quench1(ConfigArgs),
    /// Localized quench: currents, polarization, diffusion length.
    Quench2(ConfigArgs),
    /// Run the localized quench at several cutoffs and report relative errors.
    Converge {
        #[command(flatten)]
        common: ConfigArgs,
        /// Comma-separated cutoff list, e.g. 3,4,5.
        #[arg(long, value_delimiter = ',')]
        cutoffs: Vec<i64>,
    },
    /// Information lattice and currents of a checkpointed window.
    Lattice {
        /// Binary window checkpoint.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "out")]
        out_dir: PathBuf,
    },
    /// Maximum-entropy extension of a checkpointed window.
    Gibbs {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Scale whose marginals are held fixed.
        #[arg(long)]
        local_scale: i64,
        /// Scale of the emitted extension.
        #[arg(long)]
        target_k: i64,
        /// Also compare currents against the checkpointed state.
        #[arg(long, default_value_t = false)]
        compare_currents: bool,
        #[arg(long, default_value = "out")]
        out_dir: PathBuf,
    },
    /// Dense-oracle property suite on small chains.
    OracleVerify {
        /// Chain length (capped by the dense oracle).
        #[arg(long, default_value_t = 6)]
        sites: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let code = match e {
                Error::Config(_) | Error::Serde(_) | Error::BadTableau(_) => 2,
                Error::NoConvergence(_) | Error::StepUnderflow { .. } => 4,
                _ => 3,
            };
            ExitCode::from(code)
        }
    }
}

fn load_config(args: &ConfigArgs, default_state: QuenchKind) -> Result<ExperimentConfig, Error> {
    let mut config = match &args.config {
        Some(path) => ExperimentConfig::from_json(&fs::read_to_string(path)?)?,
        None => ExperimentConfig { initial_state: default_state, ..Default::default() },
    };
    if let Some(l_c) = args.l_c {
        config.l_c = l_c;
    }
    if let Some(policy) = &args.policy {
        config.policy = match policy.as_str() {
            "petz" => PolicyKind::Petz,
            "flow" => PolicyKind::Flow,
            "auto" => PolicyKind::Auto,
            "oracle" => PolicyKind::Oracle,
            other => return Err(Error::Config(format!("unknown policy {other}"))),
        };
    }
    if let Some(tol) = args.tolerance {
        config.controller.tolerance = tol;
    }
    if let Some(t_end) = args.t_end {
        let steps = (t_end / args.t_step).round() as usize;
        config.output_times = (0..=steps).map(|k| k as f64 * args.t_step).collect();
    }
    config.validate()?;
    Ok(config)
}

fn write_file(dir: &Path, name: &str, contents: &str) -> Result<(), Error> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(name), contents)?;
    Ok(())
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Quench1(args) => {
            let mut config = load_config(&args, QuenchKind::Quench1)?;
            config.initial_state = QuenchKind::Quench1;
            let digest = config.digest();
            let out = run_quench1(&config)?;
            write_file(&args.out_dir, "config.json", &config.to_json())?;
            write_file(&args.out_dir, "lattice.csv", &out.lattice.to_csv(&digest))?;
            write_file(&args.out_dir, "lattice.json", &out.lattice.to_json(&digest))?;
            let mut cur = format!("# config-sha256: {digest}\nt,l,j_per_site\n");
            for (t, l, j) in &out.currents {
                let _ = writeln!(cur, "{t:.12e},{l},{j:.12e}");
            }
            write_file(&args.out_dir, "currents.csv", &cur)?;
            write_file(&args.out_dir, "run-log.jsonl", &run_log(&out.records))?;
            println!("quench1: {} snapshots -> {}", out.lattice.snapshots.len(), args.out_dir.display());
            Ok(())
        }
        Command::Quench2(args) => {
            let mut config = load_config(&args, QuenchKind::Quench2)?;
            config.initial_state = QuenchKind::Quench2;
            config.shift = true;
            let digest = config.digest();
            let out = run_quench2(&config)?;
            write_file(&args.out_dir, "config.json", &config.to_json())?;
            write_file(&args.out_dir, "observables.csv", &out.series.to_csv(&digest))?;
            let d = diffusion_coefficient(&out.series.times, &out.series.channels["L2[sites^2]"]);
            let mut dcsv = format!("# config-sha256: {digest}\nt,D[J]\n");
            for (t, dv) in &d {
                let _ = writeln!(dcsv, "{t:.12e},{dv:.12e}");
            }
            write_file(&args.out_dir, "diffusion.csv", &dcsv)?;
            let mut cur = format!("# config-sha256: {digest}\nt,l,J_total\n");
            for (t, l, j) in &out.total_currents {
                let _ = writeln!(cur, "{t:.12e},{l},{j:.12e}");
            }
            write_file(&args.out_dir, "currents.csv", &cur)?;
            write_file(&args.out_dir, "run-log.jsonl", &run_log(&out.records))?;
            if let Some((t, snap)) = out.snapshots.last() {
                let mut buf = Vec::new();
                write_checkpoint(&mut buf, snap)?;
                fs::create_dir_all(&args.out_dir)?;
                fs::write(args.out_dir.join(format!("window-t{t:.3}.bin")), buf)?;
            }
            println!("quench2: {} samples -> {}", out.series.times.len(), args.out_dir.display());
            Ok(())
        }
        Command::Converge { common, cutoffs } => {
            if cutoffs.len() < 2 {
                return Err(Error::Config("need at least two cutoffs".into()));
            }
            let mut config = load_config(&common, QuenchKind::Quench2)?;
            config.initial_state = QuenchKind::Quench2;
            config.shift = true;
            let digest = config.digest();
            let report = run_convergence(&config, &cutoffs)?;
            let mut csv = format!("# config-sha256: {digest}\nl_c_small,l_c_big,channel,max_rel_err\n");
            for (a, b, channel, err) in &report.pairwise {
                let _ = writeln!(csv, "{a},{b},{channel},{err:.6e}");
            }
            write_file(&common.out_dir, "convergence.csv", &csv)?;
            for m in &report.members {
                write_file(
                    &common.out_dir,
                    &format!("observables-lc{}.csv", m.l_c),
                    &m.series.to_csv(&digest),
                )?;
            }
            println!("converge: {} pairs -> {}", report.pairwise.len(), common.out_dir.display());
            Ok(())
        }
        Command::Lattice { checkpoint, out_dir } => {
            let window = read_checkpoint(&mut fs::File::open(&checkpoint)?)?;
            let tower = MarginalTower::from_window(&window)?;
            let lattice = InfoLattice::from_tower(&tower, 1e-8)?;
            let mut csv = String::from("t,nu,l,value\n");
            for ((l, nu), v) in lattice.iter() {
                let _ = writeln!(csv, "0,{nu},{l},{v:.12e}");
            }
            write_file(&out_dir, "lattice.csv", &csv)?;
            let ham = Hamiltonian::mixed_field_ising_uniform(IsingParams::paper());
            let mut cur = String::from("l,J_total\n");
            for l in 0..window.scale() {
                let field = local_currents(&tower, &ham, l)?;
                if let Some(j) = field.total_upward() {
                    let _ = writeln!(cur, "{l},{j:.12e}");
                }
            }
            write_file(&out_dir, "currents.csv", &cur)?;
            println!("lattice: scale {} window -> {}", window.scale(), out_dir.display());
            Ok(())
        }
        Command::Gibbs { checkpoint, local_scale, target_k, compare_currents, out_dir } => {
            let window = read_checkpoint(&mut fs::File::open(&checkpoint)?)?;
            let omega_l = window.trace_to(local_scale)?;
            let opts = GibbsOptions::default();
            let ladder = gibbs_ladder(&omega_l, target_k, &opts)?;
            let mut buf = Vec::new();
            write_checkpoint(&mut buf, &ladder.omega_k)?;
            fs::create_dir_all(&out_dir)?;
            fs::write(out_dir.join(format!("gibbs-omega{target_k}.bin")), buf)?;
            let mut report = String::new();
            let _ = writeln!(report, "converged,{}", ladder.converged);
            let _ = writeln!(report, "certificate,{:.6e}", ladder.certificate);
            let _ = writeln!(report, "bracket_low,{:.6e}", ladder.bracket.0);
            let _ = writeln!(report, "bracket_high,{:.6e}", ladder.bracket.1);
            for s in &ladder.stages {
                let _ = writeln!(
                    report,
                    "stage,{},{:.12e},{},{}",
                    s.lambda, s.min_info_bits, s.newton_iterations, s.indefinite
                );
            }
            write_file(&out_dir, "gibbs-report.csv", &report)?;
            let terms = recover_log_terms(&ladder.top, local_scale, &opts)?;
            let mut tbuf = Vec::new();
            write_checkpoint(&mut tbuf, &terms)?;
            fs::write(out_dir.join("gibbs-log-terms.bin"), tbuf)?;
            if compare_currents {
                let ham = Hamiltonian::mixed_field_ising_uniform(IsingParams::paper());
                let cmp = run_gibbs_compare(&ham, &window, local_scale, target_k)?;
                let mut csv = String::from("l,J_state,J_gibbs\n");
                for (l, a, b) in &cmp.rows {
                    let _ = writeln!(csv, "{l},{a:.12e},{b:.12e}");
                }
                write_file(&out_dir, "gibbs-currents.csv", &csv)?;
            }
            println!("gibbs: ladder of {} stages -> {}", ladder.stages.len(), out_dir.display());
            Ok(())
        }
        Command::OracleVerify { sites, seed } => oracle_verify(sites, seed),
    }
}

fn run_log(records: &[infolattice::integrator::StepRecord]) -> String {
    let mut out = String::new();
    for r in records {
        let _ = writeln!(out, "{}", serde_json::to_string(r).unwrap());
    }
    out
}

/// Property checks of the evolution machinery against the dense oracle.
fn oracle_verify(sites: usize, seed: u64) -> Result<(), Error> {
    use infolattice::hermitian::trace_distance;
    use infolattice::integrator::{adaptive_evolve, EvolveOptions, PetzPolicy, StepController};
    use infolattice::oracle;

    let n = sites.clamp(3, 8);
    let params = IsingParams::paper();
    let (ham, hdense) = oracle::build_hamiltonian(params, n)?;
    let prop = oracle::Propagator::new(&hdense)?;
    let mut rng = infolattice::random::rng(seed);
    let mut failures = 0usize;
    let mut check = |name: &str, ok: bool| {
        println!("{}: {}", name, if ok { "PASS" } else { "FAIL" });
        if !ok {
            failures += 1;
        }
    };

    // Marginal consistency of evolved dense states.
    let rho0 = oracle::initial_state(QuenchKind::Quench2, n)?;
    let rho = prop.evolve(&rho0, 0.9)?;
    let mut worst: f64 = 0.0;
    for l in 1..n as i64 - 1 {
        worst = worst.max(oracle::marginals(&rho, l)?.consistency_defect());
    }
    check("marginal-consistency", worst < 1e-11);

    // Lattice total equals the state information.
    let mixed = infolattice::random::random_density(
        &mut rng,
        infolattice::hermitian::SiteRange::from_span(0, n.min(6)),
        2,
    );
    let lat = oracle::exact_lattice(&mixed)?;
    let direct = infolattice::hermitian::von_neumann_information(&mixed)?;
    check("lattice-total", (lat.total() - direct).abs() < 1e-9);

    // Petz-policy trajectory at full cutoff matches the dense propagator.
    let l_c = n as i64 - 1;
    let omega0 = oracle::marginals(&rho0, l_c)?;
    let shifted = infolattice::integrator::shift_window(&omega0);
    let mut policy = PetzPolicy::new(ham.clone());
    let opts = EvolveOptions {
        controller: StepController { tolerance: 1e-8, ..Default::default() },
        ..Default::default()
    };
    let t_end = 1.0;
    let out = adaptive_evolve(&mut policy, &shifted, t_end, &opts, &[], |_, _| Ok(()), |_| {})?;
    let out = infolattice::integrator::unshift_window(&out);
    let want = oracle::marginals(&prop.evolve(&rho0, t_end)?, l_c)?;
    let mut worst: f64 = 0.0;
    for (a, b) in out.elements().iter().zip(want.elements()) {
        worst = worst.max(trace_distance(a, b)?);
    }
    check("petz-full-cutoff-oracle", worst < 1e-6);

    // Energy conservation along the trajectory.
    let e0 = infolattice::local_state::energy(&ham, &omega0)?;
    let e1 = infolattice::local_state::energy(&ham, &out)?;
    check("energy-conservation", (e1 - e0).abs() < 1e-9);

    // Checkpoint round trip.
    check("checkpoint-roundtrip", {
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &omega0)?;
        let back = read_checkpoint(&mut buf.as_slice())?;
        back.len() == omega0.len() && back.scale() == omega0.scale()
    });

    if failures > 0 {
        Err(Error::NumericalHealth(format!("{failures} oracle checks failed")))
    } else {
        println!("all oracle checks passed (N = {n}, seed {seed})");
        Ok(())
    }
}
