//! `tbs`: command-line front end for the tensor B-spline solver.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};

use tbspline::bspline::{BSplineBasis, Extension, SplineField};
use tbspline::io::{self, ProblemFile, RawTensorFile, StudyFile, TensorData};
use tbspline::kernels::{bilinear_kernel, trilinear_kernel};
use tbspline::pde::solve_problem;
use tbspline::verify::run_convergence;
use tbspline::{bench, Precision, TbsError};

const EXIT_USAGE: u8 = 1;
const EXIT_RUNTIME: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;

#[derive(Parser, Debug)]
#[command(name = "tbs", version, about = "Tensor B-spline Ritz-Galerkin solver for elliptic PDEs on uniform grids")]
struct Cli {
    /// Worker threads (default: TBS_THREADS, else 1).
    #[arg(long, global = true, env = "TBS_THREADS")]
    threads: Option<usize>,
    /// Floating-point precision, overriding the input file.
    #[arg(long, global = true, value_enum)]
    precision: Option<PrecisionArg>,
    /// Seed for randomized inputs.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory for output files, overriding the input file.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Solve the problem in a TOML problem file.
    ///
    /// Sections: [grid] nodes, lower, upper | step, mask;
    /// [fields] degree, param_degree, source_degree, diffusion, absorption, source,
    /// projection (interpolation | l2), extension (mirror | zero | replicate);
    /// fields are numbers, { file = "x.tbsf" }, { gaussian = { center, width, amplitude } }
    /// or { cosine = { wavenumbers, amplitude } };
    /// [bc] kind = neumann | robin (gamma) | penalty (g, epsilon), or faces = [ ... ] per face;
    /// [solver] tol, max_iter, precond (none | jacobi), coarse_init, strategy (sparse | block | onthefly),
    /// threads, precision (f32 | f64), record_history, memory_budget;
    /// [output] dir, solution, report, history, vtk.
    Solve { problem: PathBuf },
    /// Run a convergence study from a TOML study file.
    ///
    /// Keys: degrees, levels, [family] kind = diffusion1d | cosine2d plus family parameters,
    /// [solver] as for solve, [output] dir, csv, gnuplot.
    Convergence { study: PathBuf },
    /// Time operator applications from a TOML bench plan.
    ///
    /// Keys: grids, degrees, strategies, threads, precisions, repetitions, warmup, seed,
    /// memory_budget, block_bytes.
    Bench {
        #[arg(long)]
        plan: PathBuf,
    },
    /// Convert node samples to spline coefficients (direct) or back (indirect).
    Transform {
        input: PathBuf,
        output: PathBuf,
        #[arg(long)]
        degree: usize,
        #[arg(long, value_enum)]
        direction: Direction,
        #[arg(long, default_value = "mirror")]
        extension: Extension,
    },
    /// Print a univariate kernel table as CSV.
    Kernels {
        #[arg(long)]
        nb: usize,
        /// Parameter degree; omit for the bilinear kernel.
        #[arg(long)]
        np: Option<usize>,
        #[arg(long, default_value_t = 0)]
        da: usize,
        #[arg(long, default_value_t = 0)]
        db: usize,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PrecisionArg {
    F32,
    F64,
}

impl From<PrecisionArg> for Precision {
    fn from(p: PrecisionArg) -> Self {
        match p {
            PrecisionArg::F32 => Precision::F32,
            PrecisionArg::F64 => Precision::F64,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Direction {
    Direct,
    Indirect,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            let numerical = e
                .chain()
                .filter_map(|c| c.downcast_ref::<TbsError>())
                .any(|t| t.is_numerical() || matches!(t, TbsError::Determinism(_)));
            ExitCode::from(if numerical { EXIT_NUMERICAL } else { EXIT_RUNTIME })
        }
    }
}

fn out_dir(cli: &Cli, from_file: Option<&Path>, base: &Path) -> PathBuf {
    match (&cli.out_dir, from_file) {
        (Some(d), _) => d.clone(),
        (None, Some(d)) if d.is_absolute() => d.to_path_buf(),
        (None, Some(d)) => base.join(d),
        (None, None) => PathBuf::from("."),
    }
}

fn base_dir(file: &Path) -> PathBuf {
    file.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn run(cli: &Cli) -> anyhow::Result<ExitCode> {
    match &cli.command {
        Command::Solve { problem } => solve(cli, problem),
        Command::Convergence { study } => convergence(cli, study),
        Command::Bench { plan } => bench_cmd(cli, plan),
        Command::Transform {
            input,
            output,
            degree,
            direction,
            extension,
        } => transform(input, output, *degree, *direction, *extension),
        Command::Kernels { nb, np, da, db } => {
            print!("{}", kernels_csv(*nb, *np, *da, *db)?);
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn solve(cli: &Cli, path: &Path) -> anyhow::Result<ExitCode> {
    let file = ProblemFile::read(path).with_context(|| format!("reading {}", path.display()))?;
    let base = base_dir(path);
    let mut spec = file.to_spec(&base)?;
    let mut cfg = file.run_config()?;
    if let Some(p) = cli.precision {
        spec.precision = p.into();
    }
    if let Some(t) = cli.threads {
        cfg.operator.threads = t;
    }
    let sol = solve_problem(&spec, &cfg)?;
    let dir = out_dir(cli, file.output.dir.as_deref(), &base);
    io::write_tensor(
        &dir.join(&file.output.solution),
        &RawTensorFile {
            degree: Some(spec.nb),
            data: TensorData::F64(sol.coefficients().clone()),
        },
    )?;
    let mut report = String::from("key,value\n");
    let classes = sol.node_classes.as_ref();
    let rows: Vec<(&str, String)> = vec![
        ("strategy", sol.strategy.name().to_string()),
        ("precision", format!("{:?}", spec.precision).to_lowercase()),
        ("degree", spec.nb.to_string()),
        ("nodes", format!("{:?}", spec.grid().nodes()).replace(", ", "x")),
        ("unknowns", sol.coefficients().len().to_string()),
        ("iterations", sol.report.iterations.to_string()),
        ("relative_residual", format!("{:e}", sol.report.relative_residual)),
        ("converged", sol.report.converged.to_string()),
        ("separable_nodes", classes.map_or(sol.coefficients().len(), |c| c.separable).to_string()),
        ("stored_nodes", classes.map_or(0, |c| c.stored).to_string()),
        ("inactive_nodes", classes.map_or(0, |c| c.inactive).to_string()),
        ("clamped_diffusion", sol.clamped.to_string()),
        ("coarse_iterations", sol.coarse.as_ref().map_or(0, |c| c.iterations).to_string()),
        ("seconds", format!("{:.3}", sol.report.seconds)),
    ];
    for (k, v) in &rows {
        let _ = writeln!(report, "{k},{v}");
    }
    io::write_atomic(&dir.join(&file.output.report), report.as_bytes())?;
    if let Some(h) = &file.output.history {
        io::write_atomic(&dir.join(h), sol.report.history_csv().as_bytes())?;
    }
    if let Some(v) = &file.output.vtk {
        io::export_vtk(&dir.join(v), &sol.samples, spec.grid())?;
    }
    println!(
        "{} after {} iterations, relative residual {:e}; outputs in {}",
        if sol.report.converged { "converged" } else { "NOT converged" },
        sol.report.iterations,
        sol.report.relative_residual,
        dir.display()
    );
    Ok(if sol.report.converged {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(EXIT_NUMERICAL)
    })
}

fn convergence(cli: &Cli, path: &Path) -> anyhow::Result<ExitCode> {
    let file = StudyFile::read(path).with_context(|| format!("reading {}", path.display()))?;
    let mut cfg = file.run_config()?;
    if let Some(t) = cli.threads {
        cfg.operator.threads = t;
    }
    let study = run_convergence(&file.family, &file.degrees, &file.levels, &cfg)?;
    let csv = study.to_csv();
    let dir = out_dir(cli, file.output.dir.as_deref(), &base_dir(path));
    let name = file.output.csv.clone().unwrap_or_else(|| "convergence.csv".into());
    io::write_atomic(&dir.join(&name), csv.as_bytes())?;
    if let Some(gp) = &file.output.gnuplot {
        io::write_atomic(&dir.join(gp), study.gnuplot_script(&name).as_bytes())?;
    }
    print!("{csv}");
    Ok(ExitCode::SUCCESS)
}

fn bench_cmd(cli: &Cli, path: &Path) -> anyhow::Result<ExitCode> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut plan = io::parse_bench_plan(&text)?;
    if let Some(s) = cli.seed {
        plan.seed = s;
    }
    if let Some(p) = cli.precision {
        plan.precisions = vec![p.into()];
    }
    if let Some(t) = cli.threads {
        plan.threads = vec![t];
    }
    let results = bench::run_bench(&plan)?;
    let csv = bench::results_csv(&results);
    let dir = out_dir(cli, None, Path::new("."));
    io::write_atomic(&dir.join("bench.csv"), csv.as_bytes())?;
    print!("{csv}");
    Ok(ExitCode::SUCCESS)
}

fn transform(input: &Path, output: &Path, degree: usize, direction: Direction, ext: Extension) -> anyhow::Result<ExitCode> {
    let file = io::read_tensor(input).with_context(|| format!("reading {}", input.display()))?;
    let data = file.data.to_f64();
    let dim = data.dim();
    let basis = BSplineBasis::unit(degree, dim)?;
    let out = match direction {
        Direction::Direct => {
            let f = SplineField::interpolate(&data, &basis, vec![0.0; dim], ext)?;
            RawTensorFile {
                degree: Some(degree),
                data: TensorData::F64(f.into_coefficients()),
            }
        }
        Direction::Indirect => {
            if let Some(d) = file.degree.filter(|&d| d != degree) {
                anyhow::bail!("input holds degree-{d} coefficients, --degree is {degree}");
            }
            let f = SplineField::from_coefficients(data, &basis, vec![0.0; dim])?;
            RawTensorFile {
                degree: None,
                data: TensorData::F64(f.sample_nodes()),
            }
        }
    };
    io::write_tensor(output, &out)?;
    Ok(ExitCode::SUCCESS)
}

fn kernels_csv(nb: usize, np: Option<usize>, da: usize, db: usize) -> anyhow::Result<String> {
    let mut s = String::from("kind,k_minus_l,m_minus_l,value\n");
    match np {
        Some(np) => {
            let k = trilinear_kernel(nb, np, da, db)?;
            let t = &k.table;
            for r in t.row_min..=t.row_max() {
                for c in t.col_min..=t.col_max() {
                    let _ = writeln!(s, "trilinear,{r},{c},{}", t.get(r, c));
                }
            }
            for (i, v) in t.row_sums().iter().enumerate() {
                let _ = writeln!(s, "collapsed,{},,{v}", t.row_min + i as isize);
            }
        }
        None => {
            let k = bilinear_kernel(nb, nb, da, db)?;
            for (i, v) in k.values.iter().enumerate() {
                let _ = writeln!(s, "bilinear,{},,{v}", k.offset_min + i as isize);
            }
        }
    }
    Ok(s)
}
