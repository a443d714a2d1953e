use clap::{Args, Parser, Subcommand};
use slowfast::averaging::{averaged_at, CellBank, XtGrid};
use slowfast::catalog::{build_model, model_names};
use slowfast::cell::build_cell;
use slowfast::harness::{run_experiment, ExperimentConfig};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

/// Cell solvers, averaged coefficients and Monte Carlo fluctuation checks
/// for two-scale diffusions.
#[derive(Parser)]
#[command(name = "slowfast", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ModelArgs {
    /// Catalog model name.
    #[arg(long, default_value = "ou")]
    model: String,
    /// Numeric model parameter, repeatable: --param gamma=0.5
    #[arg(long = "param", value_parser = parse_kv)]
    params: Vec<(String, f64)>,
    /// Scale-separation parameter override.
    #[arg(long)]
    eps: Option<f64>,
}

#[derive(Args, Clone)]
struct RunOverrides {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    paths: Option<usize>,
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long)]
    dt: Option<f64>,
    /// Comparable kind override (identity | drift-shift | entropy-production | housekeeping).
    #[arg(long)]
    functional: Option<String>,
    /// Stopping rule override (fixed | first-exit).
    #[arg(long)]
    rule: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the fast cell problems at one slow point and write the grid data.
    CellSolve {
        #[command(flatten)]
        model: ModelArgs,
        /// Slow point, comma-separated.
        #[arg(long, default_value = "0.0", value_delimiter = ',')]
        x: Vec<f64>,
        #[arg(long, default_value_t = 0.0)]
        t: f64,
        /// Grid nodes per fast axis.
        #[arg(long, default_value_t = 129)]
        nodes: usize,
        #[arg(long, default_value = "cell.csv")]
        out: PathBuf,
        /// Use the finite-difference backend even when an analytic cell exists.
        #[arg(long)]
        numeric: bool,
    },
    /// Tabulate averaged drift and diffusion over a slow grid.
    Average {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value_t = -3.0)]
        x_lo: f64,
        #[arg(long, default_value_t = 3.0)]
        x_hi: f64,
        #[arg(long, default_value_t = 25)]
        nx: usize,
        #[arg(long, default_value_t = 129)]
        nodes: usize,
        #[arg(long, default_value = "averaged.csv")]
        out: PathBuf,
    },
    /// Run a configured Monte Carlo experiment and write per-path results.
    Simulate {
        #[command(flatten)]
        run: RunOverrides,
    },
    /// Run a configured experiment with its statistical checks; exit nonzero
    /// on any failed check.
    Verify {
        #[command(flatten)]
        run: RunOverrides,
    },
    /// Print the report of a previously run experiment.
    Report {
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
}

fn parse_kv(s: &str) -> Result<(String, f64), String> {
    let (k, v) = s.split_once('=').ok_or("expected key=value")?;
    Ok((k.to_string(), v.parse().map_err(|e| format!("{e}"))?))
}

fn main() -> ExitCode {
    if let Ok(threads) = std::env::var("SLOWFAST_THREADS") {
        if let Ok(k) = threads.parse::<usize>() {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(k).build_global();
        }
    }
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> slowfast::Result<ExitCode> {
    match cli.command {
        Command::CellSolve {
            model,
            x,
            t,
            nodes,
            out,
            numeric,
        } => {
            let m = build_model_args(&model)?;
            let analytic = if numeric { None } else { m.analytic_cell.as_ref() };
            let sol = build_cell(&m.coeffs, analytic, &x, t, &m.fast_grid(nodes), None, None)?;
            sol.check_invariants()?;
            sol.write_csv(std::fs::File::create(&out)?)?;
            println!(
                "cell solved at x={x:?} t={t} on {} nodes ({} backend) -> {}",
                sol.grid.len(),
                if analytic.is_some() { "analytic" } else { "fd" },
                out.display()
            );
        }
        Command::Average {
            model,
            x_lo,
            x_hi,
            nx,
            nodes,
            out,
        } => {
            let m = build_model_args(&model)?;
            if m.coeffs.m != 1 {
                return Err(slowfast::Error::dim(
                    "average tabulation is 1-D in the slow variable; use the library for m > 1",
                ));
            }
            let bank = CellBank::new(
                m.coeffs.clone(),
                m.analytic_cell.clone(),
                m.fast_grid(nodes),
                None,
            );
            let grid = XtGrid::line(x_lo, x_hi, nx, vec![0.0]);
            let mut f = std::fs::File::create(&out)?;
            writeln!(f, "x,w,A")?;
            for xp in &grid.xpoints {
                let p = averaged_at(&bank, None, xp, 0.0)?;
                writeln!(f, "{:.17e},{:.17e},{:.17e}", xp[0], p.w[0], p.a[(0, 0)])?;
            }
            println!("averaged table ({nx} points) -> {}", out.display());
        }
        Command::Simulate { run } => {
            let mut cfg = load_config(&run)?;
            cfg.checks = Default::default();
            let rep = run_experiment(&cfg, &run.out)?;
            println!(
                "{} paths finished ({} truncated); per-path values in {}",
                rep.n_paths,
                rep.truncated,
                run.out.join("results.csv").display()
            );
        }
        Command::Verify { run } => {
            let cfg = load_config(&run)?;
            let rep = run_experiment(&cfg, &run.out)?;
            for c in &rep.checks {
                println!("{}", c.line());
            }
            if !rep.all_pass {
                return Ok(ExitCode::from(1));
            }
        }
        Command::Report { out } => {
            let path = out.join("report.txt");
            let text = std::fs::read_to_string(&path)?;
            print!("{text}");
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn load_config(run: &RunOverrides) -> slowfast::Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::from_path(&run.config)?;
    if let Some(s) = run.seed {
        cfg.run.seed = s;
    }
    if let Some(p) = run.paths {
        cfg.run.paths = p;
    }
    if let Some(e) = run.eps {
        cfg.model.eps = Some(e);
    }
    if let Some(dt) = run.dt {
        cfg.run.dt = dt;
    }
    if let Some(f) = &run.functional {
        cfg.comparable.kind = f.clone();
    }
    if let Some(r) = &run.rule {
        cfg.run.rule = r.clone();
    }
    Ok(cfg)
}

fn build_model_args(args: &ModelArgs) -> slowfast::Result<slowfast::model::MultiscaleModel> {
    let params: BTreeMap<String, f64> = args.params.iter().cloned().collect();
    let mut m = build_model(&args.model, &params).map_err(|e| {
        slowfast::Error::config(format!("{e}; known models: {}", model_names().join(", ")))
    })?;
    if let Some(e) = args.eps {
        m.epsilon = e;
    }
    Ok(m)
}
