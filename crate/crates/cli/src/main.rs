//! `mbs` — simulate, gradient-check, and optimize multibody systems with
//! smooth joint friction.

use clap::{Args, Parser, Subcommand};
use mbs_core::cases::{build_case, optimize_case, override_friction_mu, CaseId, CaseStudy};
use mbs_core::dynamics::{constraint_residuals, kinetic_energy, potential_energy};
use mbs_core::io;
use mbs_core::model::{Controller, MbModel};
use mbs_core::objective::ObjectiveSpec;
use mbs_core::optimizer::OptimizeConfig;
use mbs_core::sensitivity::{
    gradient_oracle, simulate, simulate_with_sensitivities, OracleMethod, SimOptions, SimRun,
};
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(
    name = "mbs",
    about = "Multibody dynamics with joint friction: simulation, direct sensitivities, co-design optimization"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonArgs {
    /// Built-in case study: pendulum | governor | slidercrank.
    #[arg(long, conflicts_with = "model")]
    case: Option<String>,
    /// Model description file (JSON).
    #[arg(long)]
    model: Option<PathBuf>,
    /// Objective file (JSON); required for gradcheck/optimize with --model.
    #[arg(long)]
    objective: Option<PathBuf>,
    /// Simulation horizon in seconds (default: the case's horizon).
    #[arg(long)]
    tf: Option<f64>,
    /// Relative integration tolerance.
    #[arg(long, default_value_t = 1e-6)]
    rtol: f64,
    /// Absolute integration tolerance.
    #[arg(long, default_value_t = 1e-8)]
    atol: f64,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Evaluation-model friction override "mu_s,mu_d" (model-mismatch runs).
    #[arg(long, value_parser = parse_mu)]
    sim_mu: Option<(f64, f64)>,
    /// Number of dense-output samples for CSV files.
    #[arg(long, default_value_t = 400)]
    samples: usize,
    /// Also write a python plotting script next to the CSV outputs.
    #[arg(long)]
    emit_plot_script: bool,
}

fn parse_mu(s: &str) -> Result<(f64, f64), String> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 2 {
        return Err("expected `mu_s,mu_d`".into());
    }
    let a = parts[0].trim().parse().map_err(|e| format!("{}", e))?;
    let b = parts[1].trim().parse().map_err(|e| format!("{}", e))?;
    Ok((a, b))
}

#[derive(Subcommand)]
enum Command {
    /// Integrate the dynamics and write a trajectory CSV plus a summary.
    Simulate(CommonArgs),
    /// Compare the TLM gradient against complex-step and central
    /// differences; non-zero exit when any relative error exceeds the
    /// threshold.
    Gradcheck {
        #[command(flatten)]
        common: CommonArgs,
        /// Failure threshold on the pairwise relative errors.
        #[arg(long, default_value_t = 1e-4)]
        threshold: f64,
    },
    /// Run the bound-constrained co-design optimization.
    Optimize {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, default_value_t = 40)]
        max_iter: usize,
        /// L-BFGS curvature-pair memory.
        #[arg(long, default_value_t = 10)]
        memory: usize,
    },
}

struct Problem {
    name: String,
    model: MbModel,
    objective: Option<ObjectiveSpec>,
    horizon: f64,
}

fn load_problem(common: &CommonArgs) -> Result<Problem, String> {
    match (&common.case, &common.model) {
        (Some(case), None) => {
            let id: CaseId = case.parse()?;
            let CaseStudy {
                model,
                objective,
                horizon,
            } = build_case(id).map_err(|e| e.to_string())?;
            Ok(Problem {
                name: case.clone(),
                model,
                objective: Some(objective),
                horizon,
            })
        }
        (None, Some(path)) => {
            let model = io::read_model_json(path).map_err(|e| e.to_string())?;
            let objective = match &common.objective {
                Some(p) => {
                    let text = std::fs::read_to_string(p).map_err(|e| e.to_string())?;
                    Some(serde_json::from_str(&text).map_err(|e| e.to_string())?)
                }
                None => None,
            };
            Ok(Problem {
                name: model.name.clone(),
                model,
                objective,
                horizon: 1.0,
            })
        }
        _ => Err("exactly one of --case or --model is required".into()),
    }
}

fn sim_options(common: &CommonArgs, horizon: f64) -> SimOptions {
    let tf = common.tf.unwrap_or(horizon);
    let samples: Vec<f64> = (0..=common.samples)
        .map(|i| tf * i as f64 / common.samples.max(1) as f64)
        .collect();
    SimOptions {
        t0: 0.0,
        tf,
        rtol: common.rtol,
        atol: common.atol,
        sample_times: Some(samples),
        store_steps: false,
        ..Default::default()
    }
}

/// Conservative means friction-free, actuator-free, and damper-free.
fn is_conservative(model: &MbModel) -> bool {
    use mbs_core::model::ForceElement;
    model.frictions.is_empty()
        && matches!(model.controller, Controller::None)
        && model.forces.iter().all(|f| match f {
            ForceElement::Tsd { c_s, .. } => c_s.eval::<f64>(&model.rho0) == 0.0,
            _ => true,
        })
}

fn total_energy(model: &MbModel, rho: &[f64], run: &SimRun<f64>) -> f64 {
    let em = model.instantiate(rho).expect("instantiate");
    let n = model.n();
    let y = &run.result.y_final;
    kinetic_energy(&em, &y[..n], &y[n..2 * n]) + potential_energy(&em, &y[..n])
}

fn write(path: &Path, contents: &str) -> Result<(), String> {
    std::fs::write(path, contents).map_err(|e| format!("write {}: {}", path.display(), e))
}

fn cmd_simulate(common: &CommonArgs) -> Result<(), String> {
    let problem = load_problem(common)?;
    let mut model = problem.model.clone();
    if let Some((mu_s, mu_d)) = common.sim_mu {
        override_friction_mu(&mut model, mu_s, mu_d);
    }
    let opts = sim_options(common, problem.horizon);
    let run = simulate(&model, &model.rho0, problem.objective.as_ref(), &opts)
        .map_err(|e| e.to_string())?;
    std::fs::create_dir_all(&common.out).map_err(|e| e.to_string())?;
    let traj = common.out.join(format!("{}_trajectory.csv", problem.name));
    write(&traj, &io::trajectory_csv(&run, &run.layout))?;

    let n = model.n();
    let y = &run.result.y_final;
    let (phi, phidot) = constraint_residuals(&model, &model.rho0, &y[..n], &y[n..2 * n]);
    let summary = io::SimSummary {
        case: problem.name.clone(),
        t_final: opts.tf,
        psi: run.psi,
        phi_inf: phi,
        phidot_inf: phidot,
        energy: is_conservative(&model).then(|| total_energy(&model, &model.rho0, &run)),
        steps_accepted: run.result.stats.accepted,
        steps_rejected: run.result.stats.rejected,
        rhs_evals: run.result.stats.rhs_evals,
        jacobian_evals: run.result.stats.jacobian_evals,
    };
    let spath = common.out.join(format!("{}_summary.json", problem.name));
    write(
        &spath,
        &serde_json::to_string_pretty(&summary).map_err(|e| e.to_string())?,
    )?;
    if common.emit_plot_script {
        let script = io::plot_script(&[traj.to_str().unwrap_or("trajectory.csv")]);
        write(&common.out.join("plot.py"), &script)?;
    }
    println!(
        "{}: t_f = {}, psi = {:?}, |phi| = {:.3e}, steps = {} (+{} rejected)",
        problem.name, opts.tf, run.psi, phi, run.result.stats.accepted, run.result.stats.rejected
    );
    println!("wrote {}", traj.display());
    println!("wrote {}", spath.display());
    Ok(())
}

fn cmd_gradcheck(common: &CommonArgs, threshold: f64) -> Result<(), String> {
    let problem = load_problem(common)?;
    let objective = problem
        .objective
        .as_ref()
        .ok_or("gradcheck needs an objective (--case or --objective)")?;
    let model = &problem.model;
    let opts = SimOptions {
        sample_times: None,
        store_steps: true,
        ..sim_options(common, problem.horizon)
    };

    let run = simulate_with_sensitivities(model, &model.rho0, Some(objective), &opts)
        .map_err(|e| e.to_string())?;
    let g_tlm = run.gradient.clone().expect("gradient");

    // the oracles replay the TLM run's accepted grid so the comparison
    // isolates the derivative route from step-sequence differences
    let oracle_opts = SimOptions {
        forced_steps: Some(run.result.t.clone()),
        store_steps: false,
        ..opts.clone()
    };
    let (g_cs, g_fd) = std::thread::scope(|scope| {
        let h1 = scope.spawn(|| {
            gradient_oracle(
                model,
                &model.rho0,
                objective,
                &oracle_opts,
                OracleMethod::ComplexStep,
            )
        });
        let h2 = scope.spawn(|| {
            gradient_oracle(
                model,
                &model.rho0,
                objective,
                &oracle_opts,
                OracleMethod::CentralDifference,
            )
        });
        (h1.join().expect("join"), h2.join().expect("join"))
    });
    let g_cs = g_cs.map_err(|e| e.to_string())?;
    let g_fd = g_fd.map_err(|e| e.to_string())?;

    // write the sensitivity trajectory alongside the report
    std::fs::create_dir_all(&common.out).map_err(|e| e.to_string())?;
    let opts_s = SimOptions {
        sample_times: sim_options(common, problem.horizon).sample_times,
        ..opts.clone()
    };
    if let Ok(run_s) = simulate_with_sensitivities(model, &model.rho0, Some(objective), &opts_s) {
        let spath = common.out.join(format!("{}_sensitivities.csv", problem.name));
        write(&spath, &io::sensitivity_csv(&run_s, &run_s.layout))?;
        println!("wrote {}", spath.display());
    }

    println!(
        "{:>4}  {:>24}  {:>24}  {:>24}  {:>12}  {:>12}",
        "k", "tlm", "complex-step", "central-diff", "rel(tlm,cs)", "rel(cs,fd)"
    );
    // errors are measured relative to the gradient's infinity norm; a
    // componentwise quotient is meaningless for nearly-inert parameters
    let gnorm = g_cs.iter().fold(1e-300f64, |a, g| a.max(g.abs()));
    let mut worst = 0.0f64;
    for k in 0..model.n_param {
        let e1 = (g_tlm[k] - g_cs[k]).abs() / gnorm;
        let e2 = (g_cs[k] - g_fd[k]).abs() / gnorm;
        worst = worst.max(e1);
        println!(
            "{:>4}  {:>24.16e}  {:>24.16e}  {:>24.16e}  {:>12.3e}  {:>12.3e}",
            k, g_tlm[k], g_cs[k], g_fd[k], e1, e2
        );
    }
    if worst > threshold {
        return Err(format!(
            "gradient check failed: worst relative error {:.3e} > {:.3e}",
            worst, threshold
        ));
    }
    println!("gradient check passed (worst rel err {:.3e})", worst);
    Ok(())
}

fn cmd_optimize(common: &CommonArgs, max_iter: usize, memory: usize) -> Result<(), String> {
    let problem = load_problem(common)?;
    let objective = problem
        .objective
        .as_ref()
        .ok_or("optimize needs an objective (--case or --objective)")?;
    let model = &problem.model;
    let opts = SimOptions {
        sample_times: None,
        store_steps: false,
        ..sim_options(common, problem.horizon)
    };
    let cfg = OptimizeConfig {
        max_iter,
        memory,
        ..Default::default()
    };
    let (rho_star, trace) =
        optimize_case(model, objective, &opts, &cfg).map_err(|e| e.to_string())?;

    std::fs::create_dir_all(&common.out).map_err(|e| e.to_string())?;
    let cpath = common.out.join(format!("{}_convergence.csv", problem.name));
    write(&cpath, &io::convergence_csv(&trace))?;

    let psi0 = trace.iterates.first().map(|it| it.psi).unwrap_or(f64::NAN);
    let psi_star = trace.iterates.last().map(|it| it.psi).unwrap_or(f64::NAN);
    let active: Vec<usize> = (0..model.n_param)
        .filter(|&k| rho_star[k] <= model.lower[k] || rho_star[k] >= model.upper[k])
        .collect();
    println!("converged: {} ({})", trace.converged, trace.message);
    println!("rho0  = {:?}", model.rho0);
    println!("rho*  = {:?}", rho_star);
    println!(
        "psi: {:.6e} -> {:.6e} (reduction factor {:.3})",
        psi0,
        psi_star,
        psi0 / psi_star
    );
    println!("bound-active parameters: {:?}", active);

    // evaluation runs at rho0 / rho*, optionally with the friction override
    let mut eval_model = model.clone();
    if let Some((mu_s, mu_d)) = common.sim_mu {
        override_friction_mu(&mut eval_model, mu_s, mu_d);
        println!("evaluation model uses mu = [{}, {}]", mu_s, mu_d);
    }
    let eval_opts = sim_options(common, problem.horizon);
    for (tag, rho) in [("initial", &model.rho0), ("optimal", &rho_star)] {
        match simulate(&eval_model, rho, Some(objective), &eval_opts) {
            Ok(run) => {
                let path = common
                    .out
                    .join(format!("{}_{}_trajectory.csv", problem.name, tag));
                write(&path, &io::trajectory_csv(&run, &run.layout))?;
                println!(
                    "{} run: psi = {:.6e}, wrote {}",
                    tag,
                    run.psi.unwrap(),
                    path.display()
                );
            }
            Err(e) => println!("{} evaluation run failed: {}", tag, e),
        }
    }

    let report = serde_json::json!({
        "case": problem.name,
        "converged": trace.converged,
        "message": trace.message,
        "rho0": model.rho0,
        "rho_star": rho_star,
        "psi0": psi0,
        "psi_star": psi_star,
        "reduction_factor": psi0 / psi_star,
        "bound_active": active,
        "iterations": trace.iterates.len(),
        "function_evaluations": trace.n_feval,
        "gradient_evaluations": trace.n_geval,
    });
    let rpath = common.out.join(format!("{}_report.json", problem.name));
    write(
        &rpath,
        &serde_json::to_string_pretty(&report).map_err(|e| e.to_string())?,
    )?;
    println!("wrote {}", cpath.display());
    println!("wrote {}", rpath.display());
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Simulate(common) => cmd_simulate(common),
        Command::Gradcheck { common, threshold } => cmd_gradcheck(common, *threshold),
        Command::Optimize {
            common,
            max_iter,
            memory,
        } => cmd_optimize(common, *max_iter, *memory),
    };
    if let Err(msg) = result {
        eprintln!("error: {}", msg);
        std::process::exit(1);
    }
}
