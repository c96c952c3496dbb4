use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use flowgrad::config::{cavity_viscosity, Experiment, ExperimentConfig};
use flowgrad::fem::{Component, NodalField};
use flowgrad::inverse::{Problem, Progress, RunOptions, RunOutput};
use flowgrad::solver::{cavity_dirichlet, ns_jacobian};
use flowgrad::tape::DEFAULT_FD_STEP;
use flowgrad::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde_json::json;

const GRADCHECK_TOL: f64 = 1e-4;

#[derive(Parser)]
#[command(name = "flowgrad", version, about = "Coefficient-field inversion through a differentiable Navier-Stokes solver")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (TOML)
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    /// Output directory, overriding `[output] dir`
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Stream Newton and optimizer progress as JSON lines on stderr
    #[arg(long)]
    verbose: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the coefficient field and write the report and field CSVs
    Run {
        #[command(flatten)]
        common: Common,
        /// Spot-check the gradient against finite differences at every step
        #[arg(long)]
        debug_gradcheck: bool,
    },
    /// Solve the forward problem with the reference coefficient only
    Forward {
        #[command(flatten)]
        common: Common,
        /// Also write the final Newton matrix in MatrixMarket format
        #[arg(long, value_name = "PATH")]
        export_matrix: Option<PathBuf>,
    },
    /// Compare reverse-mode gradients with central differences
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Number of randomly chosen parameters to probe
        #[arg(long, default_value_t = 5)]
        samples: usize,
        #[arg(long, hide = true)]
        inject_adjoint_fault: bool,
    },
}

enum Failure {
    Check(String),
    Validation(String),
    Numerical(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::GradientCheck { .. } => Failure::Check(e.to_string()),
            Error::Config(_) | Error::Contract(_) | Error::Io(_) => Failure::Validation(e.to_string()),
            _ => Failure::Numerical(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Validation(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { common, debug_gradcheck } => cmd_run(&common, debug_gradcheck),
        Command::Forward { common, export_matrix } => cmd_forward(&common, export_matrix.as_deref()),
        Command::Gradcheck {
            common,
            samples,
            inject_adjoint_fault,
        } => cmd_gradcheck(&common, samples, inject_adjoint_fault),
    };
    match result {
        Ok(code) => code,
        Err(Failure::Check(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Validation(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Numerical(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(3)
        }
    }
}

fn load(common: &Common) -> Result<ExperimentConfig, Failure> {
    let mut config = ExperimentConfig::load(&common.config)?;
    if let Some(out) = &common.out {
        config.output.dir = out.clone();
    }
    config.validate()?;
    Ok(config)
}

fn threads() -> Result<Option<usize>, Failure> {
    match std::env::var("FLOWGRAD_THREADS") {
        Ok(s) => match s.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(Failure::Validation(format!("FLOWGRAD_THREADS must be a positive integer, got `{s}`"))),
        },
        Err(_) => Ok(None),
    }
}

fn create(path: &Path) -> Result<BufWriter<File>, Failure> {
    Ok(BufWriter::new(File::create(path)?))
}

fn write_field(dir: &Path, name: &str, field: &NodalField) -> Result<(), Failure> {
    let mut w = create(&dir.join(format!("{name}.csv")))?;
    field.write_csv(&mut w)?;
    w.flush()?;
    Ok(())
}

fn trace_line(value: serde_json::Value) {
    eprintln!("{value}");
}

fn progress_line(label: Option<f64>, p: &Progress) {
    let mut v = serde_json::to_value(p).expect("progress serializes");
    v["event"] = json!("step");
    if let Some(eps) = label {
        v["noise_epsilon"] = json!(eps);
    }
    trace_line(v);
}

fn cmd_run(common: &Common, debug_gradcheck: bool) -> Result<ExitCode, Failure> {
    let config = load(common)?;
    let levels = config.noise_levels();
    let root = config.output.dir.clone();
    let verbose = common.verbose;

    let run_level = |eps: f64, dir: PathBuf, label: Option<f64>| -> Result<RunOutput, Failure> {
        let problem = Problem::new(&config.with_noise(eps))?;
        let mut cb = |p: &Progress| progress_line(label, p);
        let options = RunOptions {
            debug_gradcheck,
            progress: if verbose { Some(&mut cb) } else { None },
        };
        let out = problem.run_with(options)?;
        write_run(&dir, &problem, &out)?;
        Ok(out)
    };

    if let [eps] = levels[..] {
        let out = run_level(eps, root, None)?;
        println!(
            "{}: relative error {:.4}% after {} steps (loss {:.3e} -> {:.3e})",
            out.report.experiment, out.report.relative_mse_percent, out.report.steps, out.report.initial_loss, out.report.final_loss
        );
        return Ok(ExitCode::SUCCESS);
    }

    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads()? {
        pool = pool.num_threads(n);
    }
    let pool = pool.build().map_err(|e| Failure::Validation(e.to_string()))?;
    let results: Vec<Result<RunOutput, Failure>> = pool.install(|| {
        levels
            .par_iter()
            .map(|&eps| run_level(eps, root.join(format!("noise_{eps}")), Some(eps)))
            .collect()
    });
    let mut summary = Vec::new();
    for (eps, r) in levels.iter().zip(results) {
        let out = r?;
        println!(
            "noise {eps}: relative error {:.4}% after {} steps",
            out.report.relative_mse_percent, out.report.steps
        );
        summary.push(json!({
            "noise_epsilon": eps,
            "relative_mse_percent": out.report.relative_mse_percent,
            "final_loss": out.report.final_loss,
            "steps": out.report.steps,
        }));
    }
    let mut w = create(&root.join("sweep.json"))?;
    writeln!(w, "{}", serde_json::to_string_pretty(&summary).expect("summary serializes"))?;
    w.flush()?;
    Ok(ExitCode::SUCCESS)
}

fn write_run(dir: &Path, problem: &Problem, out: &RunOutput) -> Result<(), Failure> {
    fs::create_dir_all(dir)?;
    let mut w = create(&dir.join("report.json"))?;
    writeln!(w, "{}", out.report.to_json())?;
    w.flush()?;

    let coef = problem.config.name().coefficient_name();
    let difference: Vec<f64> = out
        .estimate
        .values()
        .iter()
        .zip(out.reference.values())
        .map(|(e, r)| e - r)
        .collect();
    write_field(dir, &format!("{coef}_reference"), &out.reference)?;
    write_field(dir, &format!("{coef}_estimate"), &out.estimate)?;
    write_field(dir, &format!("{coef}_difference"), &NodalField::new(&problem.grid, difference)?)?;

    let mut w = create(&dir.join("model.bin"))?;
    out.model.write_checkpoint(&mut w)?;
    w.flush()?;

    if let Some(flow) = &out.flow {
        for (i, c) in ["u", "v", "p"].iter().enumerate() {
            write_field(dir, &format!("{c}_estimate"), &flow.estimate[i])?;
            write_field(dir, &format!("{c}_reference"), &flow.reference[i])?;
        }
    }
    Ok(())
}

fn cmd_forward(common: &Common, export_matrix: Option<&Path>) -> Result<ExitCode, Failure> {
    let config = load(common)?.with_noise(0.0);
    let problem = Problem::new(&config)?;
    let sim = problem.simulate_traced(problem.reference.values())?;
    if common.verbose {
        for (i, r) in sim.newton_residuals.iter().enumerate() {
            trace_line(json!({ "event": "newton", "iteration": i, "residual": r }));
        }
    }

    let dir = config.output.dir.clone();
    fs::create_dir_all(&dir)?;
    for (c, values) in &sim.fields {
        write_field(&dir, c.as_str(), &NodalField::new(&problem.grid, values.clone())?)?;
    }
    let coef = config.name().coefficient_name();
    write_field(&dir, coef, &problem.reference)?;
    let trace = json!({
        "experiment": config.name(),
        "newton_iterations": sim.newton_residuals.len().saturating_sub(1),
        "newton_residuals": sim.newton_residuals,
        "tol_residual": config.solver.tol_residual,
    });
    let mut w = create(&dir.join("trace.json"))?;
    writeln!(w, "{}", serde_json::to_string_pretty(&trace).expect("trace serializes"))?;
    w.flush()?;

    if let Some(path) = export_matrix {
        let field = |c: Component| {
            sim.fields
                .iter()
                .find(|(k, _)| *k == c)
                .map(|(_, v)| v.as_slice())
                .expect("every experiment solves the flow")
        };
        let (u, v, p) = (field(Component::U), field(Component::V), field(Component::P));
        let x: Vec<f64> = (0..u.len()).flat_map(|a| [u[a], v[a], p[a]]).collect();
        let nu = match config.name() {
            Experiment::ConjugateHeat => NodalField::from_fn(&problem.grid, cavity_viscosity).into_values(),
            _ => problem.reference.values().to_vec(),
        };
        let bc = cavity_dirichlet(&problem.grid, config.boundary.lid_velocity)?;
        let jac = ns_jacobian(&problem.grid, &x, &nu, &config.physics, &bc)?;
        let mut w = create(path)?;
        jac.write_matrix_market(&mut w)?;
        w.flush()?;
    }
    let last = sim.newton_residuals.last().copied().unwrap_or(0.0);
    println!(
        "{}: {} Newton iterations, final residual {last:.3e}",
        config.name(),
        sim.newton_residuals.len().saturating_sub(1)
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_gradcheck(common: &Common, samples: usize, inject_fault: bool) -> Result<ExitCode, Failure> {
    if samples == 0 {
        return Err(Failure::Validation("--samples must be at least 1".into()));
    }
    let config = load(common)?.with_noise(0.0);
    if inject_fault {
        flowgrad::sparse::corrupt_solve_adjoint(true);
    }
    let problem = Problem::new(&config)?;
    let model = problem.initial_model();
    let n = model.param_count();
    if samples > n {
        return Err(Failure::Validation(format!("--samples {samples} exceeds the {n} model parameters")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.model.seed);
    rng.set_stream(3);
    let mut indices = rand::seq::index::sample(&mut rng, n, samples).into_vec();
    indices.sort_unstable();
    let check = problem.gradcheck(&model, &model.params, &indices, DEFAULT_FD_STEP)?;
    for ((i, a), f) in check.indices.iter().zip(&check.analytic).zip(&check.numeric) {
        let rel = (a - f).abs() / (f.abs() + 1e-12);
        if common.verbose {
            trace_line(json!({ "event": "probe", "index": i, "analytic": a, "numeric": f, "relative_error": rel }));
        }
        println!("param {i:>5}: reverse {a:+.10e}  central {f:+.10e}  rel {rel:.2e}");
    }
    println!("max relative error {:.3e} (tolerance {GRADCHECK_TOL:e})", check.max_rel_error);
    if check.max_rel_error < GRADCHECK_TOL {
        Ok(ExitCode::SUCCESS)
    } else {
        Ok(ExitCode::from(1))
    }
}
