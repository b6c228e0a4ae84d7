//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Run a subset with `cargo test -p tbspline --test acceptance -- 3 5`.

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tbspline::bench::{self, BenchPlan};
use tbspline::bspline::{indirect_transform, Extension, SplineField};
use tbspline::domain::{Domain, Grid, MaskDomain};
use tbspline::io;
use tbspline::kernels::{bilinear_kernel, trilinear_kernel};
use tbspline::operator::{
    block_tensor_bytes, build_operator, BoundaryWeights, Discretization, OperatorConfig, OperatorHandle, Strategy,
};
use tbspline::pde::{
    assemble_system, solve_problem, Analytic, BcSpec, BoundaryCondition, FieldSpec, ProblemSpec, RunConfig,
};
use tbspline::solver::{pcg, DenseMatrix, Preconditioner, SolveConfig};
use tbspline::verify::{run_convergence, ConvergenceStudy, Cosine2d, Diffusion1d, ProblemFamily};
use tbspline::{CoeffTensor, Precision};

enum Outcome {
    Pass(String),
    Fail(String),
    /// Preconditions of the criterion are not met on this machine.
    Skip(String),
}

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Outcome::Pass(detail)
    } else {
        Outcome::Fail(detail)
    }
}

fn out_dir() -> PathBuf {
    let d = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    std::fs::create_dir_all(&d).expect("create output directory");
    d
}

// ---------------------------------------------------------------- oracles

fn binom(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

fn factorial(n: usize) -> f64 {
    (1..=n).map(|i| i as f64).product()
}

/// Centered B-spline from the truncated-power expansion.
fn beta(n: usize, x: f64) -> f64 {
    let h = (n + 1) as f64 / 2.0;
    if x <= -h || x >= h {
        return 0.0;
    }
    if n == 0 {
        return 1.0;
    }
    let s: f64 = (0..=n + 1)
        .map(|k| {
            let t = x + h - k as f64;
            if t > 0.0 {
                (-1f64).powi(k as i32) * binom(n + 1, k) * t.powi(n as i32)
            } else {
                0.0
            }
        })
        .sum();
    s / factorial(n)
}

fn beta_d(n: usize, x: f64, order: usize) -> f64 {
    if order == 0 {
        beta(n, x)
    } else {
        beta_d(n - 1, x + 0.5, order - 1) - beta_d(n - 1, x - 0.5, order - 1)
    }
}

/// Gauss-Legendre nodes and weights on `[0, 1]` by Newton iteration on `P_n`.
fn gauss_legendre(n: usize) -> Vec<(f64, f64)> {
    (0..n)
        .map(|i| {
            let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
            let mut dp = 0.0;
            for _ in 0..100 {
                let (mut p0, mut p1) = (1.0, x);
                for k in 2..=n {
                    let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                    p0 = p1;
                    p1 = p2;
                }
                dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
                let dx = p1 / dp;
                x -= dx;
                if dx.abs() < 1e-16 {
                    break;
                }
            }
            let w = 2.0 / ((1.0 - x * x) * dp * dp);
            ((1.0 - x) / 2.0, w / 2.0)
        })
        .collect()
}

/// Integral over `[a, b]` split at every half-integer, 24-point rule per piece.
fn integrate(a: f64, b: f64, f: impl Fn(f64) -> f64) -> f64 {
    let rule = gauss_legendre(24);
    let mut s = 0.0;
    let mut lo = a;
    while lo < b {
        let hi = ((lo * 2.0).floor() + 1.0) / 2.0;
        let hi = hi.min(b);
        s += rule.iter().map(|(u, w)| w * f(lo + u * (hi - lo))).sum::<f64>() * (hi - lo);
        lo = hi;
    }
    s
}

// ---------------------------------------------------------------- criteria

fn kernel_exactness() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut entries = 0usize;
    for nb in 1..=3 {
        for np in [0, 1, 3] {
            for (da, db) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                let k = trilinear_kernel(nb, np, da, db).expect("kernel");
                let t = &k.table;
                let span = (nb + np + 4) as f64;
                for r in t.row_min..=t.row_max() {
                    for c in t.col_min..=t.col_max() {
                        let o = integrate(-span, span, |x| {
                            beta_d(nb, x - r as f64, da) * beta_d(nb, x, db) * beta(np, x - c as f64)
                        });
                        worst = worst.max((t.get(r, c) - o).abs());
                        entries += 1;
                    }
                }
                // Collapse over the parameter index reproduces the bilinear kernel.
                let bl = bilinear_kernel(nb, nb, da, db).expect("kernel");
                for (i, s) in t.row_sums().iter().enumerate() {
                    worst = worst.max((s - bl.at(t.row_min + i as isize)).abs());
                }
            }
        }
    }
    for n1 in 0..=3 {
        for n2 in 0..=3 {
            let bl = bilinear_kernel(n1, n2, 0, 0).expect("kernel");
            for off in -4isize..=4 {
                let span = (n1 + n2 + 4) as f64;
                let o = integrate(-span, span, |x| beta(n1, x - off as f64) * beta(n2, x));
                worst = worst.max((bl.at(off) - o).abs());
                // Scalar-product identity: ∫ β^a(x - k) β^b(x) dx = β^{a+b+1}(k).
                worst = worst.max((bl.at(off) - beta(n1 + n2 + 1, off as f64)).abs());
                entries += 1;
            }
        }
    }
    for n in 1..=3 {
        let st = bilinear_kernel(n, n, 1, 1).expect("kernel");
        for off in -4isize..=4 {
            // ∫ β'(x - k) β'(x) dx = -β^{2n+1}''(k).
            worst = worst.max((st.at(off) + beta_d(2 * n + 1, off as f64, 2)).abs());
        }
    }
    check(worst < 1e-12, format!("{entries} entries, max deviation {worst:.2e} (tol 1e-12)"))
}

fn random_domain(rng: &mut ChaCha8Rng) -> Domain {
    let dim = rng.gen_range(2..=3);
    let nodes: Vec<usize> = (0..dim).map(|_| rng.gen_range(4..=16)).collect();
    let step: Vec<f64> = (0..dim).map(|_| rng.gen_range(0.05..0.5)).collect();
    let grid = Grid::new(nodes, step, vec![0.0; dim]).expect("grid");
    if rng.gen_bool(0.5) {
        return Domain::boxed(grid);
    }
    let cells = grid.cell_count();
    let c: Vec<f64> = grid.cells().iter().map(|&n| n as f64 / 2.0).collect();
    let r = rng.gen_range(0.35..0.6) * grid.cells().iter().cloned().min().unwrap() as f64;
    let ext = grid.cells();
    let occ: Vec<bool> = (0..cells)
        .map(|mut f| {
            let mut d2 = 0.0;
            for a in (0..dim).rev() {
                let i = f % ext[a];
                f /= ext[a];
                d2 += (i as f64 + 0.5 - c[a]).powi(2);
            }
            d2 <= r * r || rng.gen_bool(0.05)
        })
        .collect();
    Domain::Mask(MaskDomain::new(grid, occ).expect("mask"))
}

fn cross_strategy() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst: f64 = 0.0;
    let mut nondeterministic = Vec::new();
    let (mut boxes, mut masks) = (0, 0);
    for case in 0..50 {
        let domain = random_domain(&mut rng);
        let dim = domain.grid().dim();
        let nb = rng.gen_range(1..=3);
        let np = rng.gen_range(0..=3);
        if domain.is_box() {
            boxes += 1;
        } else {
            masks += 1;
        }
        let pext = domain.grid().coeff_extents(np);
        let n: usize = pext.iter().product();
        let d = CoeffTensor::from_vec(pext.clone(), (0..n).map(|_| rng.gen_range(0.2..2.0)).collect()).unwrap();
        let mu = CoeffTensor::from_vec(pext, (0..n).map(|_| rng.gen_range(0.0..0.5)).collect()).unwrap();
        let boundary = if domain.is_box() {
            BoundaryWeights {
                edge: (0..2 * dim).map(|_| if rng.gen_bool(0.5) { rng.gen_range(0.0..3.0) } else { 0.0 }).collect(),
                interior: 0.0,
            }
        } else {
            BoundaryWeights::uniform(dim, rng.gen_range(0.0..3.0))
        };
        let disc = Discretization {
            domain,
            nb,
            np,
            diffusion: d,
            absorption: mu,
            boundary,
        };
        let cext = disc.coeff_extents();
        let m: usize = cext.iter().product();
        let c = CoeffTensor::from_vec(cext, (0..m).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let mut outputs: Vec<Vec<f64>> = Vec::new();
        for strategy in Strategy::ALL {
            let mut first: Option<Vec<u64>> = None;
            for threads in [1, 2, 4, 8] {
                let cfg = OperatorConfig {
                    strategy,
                    threads,
                    ..Default::default()
                };
                let op = build_operator(disc.clone(), &cfg).expect("operator");
                let y = op.apply(&c).expect("apply");
                let bits: Vec<u64> = y.data().iter().map(|v: &f64| v.to_bits()).collect();
                match &first {
                    None => {
                        first = Some(bits);
                        outputs.push(y.data().to_vec());
                    }
                    Some(b) if *b != bits => nondeterministic.push(format!("case {case} {} {threads}t", strategy.name())),
                    _ => {}
                }
            }
        }
        let scale = outputs[0].iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for o in &outputs[1..] {
            let diff = o.iter().zip(&outputs[0]).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            worst = worst.max(diff / scale);
        }
    }
    check(
        worst < 1e-12 && nondeterministic.is_empty(),
        format!(
            "50 problems ({boxes} box, {masks} mask), max relative difference {worst:.2e} (tol 1e-12), thread-count mismatches: {}",
            if nondeterministic.is_empty() { "none".to_string() } else { nondeterministic.join("; ") }
        ),
    )
}

fn studies() -> (ConvergenceStudy, ConvergenceStudy) {
    let cfg = RunConfig {
        solve: SolveConfig {
            tol: 1e-13,
            ..Default::default()
        },
        ..Default::default()
    };
    let s1 = run_convergence(&ProblemFamily::Diffusion1d(Diffusion1d::default()), &[1, 2, 3], &[0, 1, 2, 3], &cfg)
        .expect("1-D study");
    let s2 = run_convergence(&ProblemFamily::Cosine2d(Cosine2d::default()), &[1, 2, 3], &[0, 1, 2, 3], &cfg)
        .expect("2-D study");
    (s1, s2)
}

fn convergence_orders(s1: &ConvergenceStudy, s2: &ConvergenceStudy) -> Outcome {
    let mut ok = true;
    let mut parts = Vec::new();
    for s in [s1, s2] {
        for c in &s.curves {
            let n = c.degree as f64;
            let good = (c.l2_order - (n + 1.0)).abs() <= 0.3 && (c.h1_order - n).abs() <= 0.3;
            ok &= good;
            parts.push(format!("{} n={} L2 {:.2} H1 {:.2}", s.family, c.degree, c.l2_order, c.h1_order));
        }
    }
    if let Some(e) = s1.reference_error {
        let coarsest = s1.curves.iter().flat_map(|c| c.reports.iter().map(|r| r.l2_error)).fold(f64::INFINITY, f64::min);
        parts.push(format!("1-D reference error {e:.1e} vs smallest measured {coarsest:.1e}"));
    }
    check(ok, format!("{} (tol ±0.3)", parts.join(", ")))
}

fn higher_order_superiority(s1: &ConvergenceStudy) -> Outcome {
    let mut ok = true;
    let mut parts = Vec::new();
    let c: Vec<_> = [1, 2, 3].iter().map(|&d| s1.curve(d).expect("degree present")).collect();
    for i in 0..c[0].reports.len() {
        let e: Vec<f64> = c.iter().map(|c| c.reports[i].l2_error).collect();
        ok &= e[2] < e[1] && e[1] < e[0];
        parts.push(format!("h={}: {:.1e} > {:.1e} > {:.1e}", c[0].reports[i].h, e[0], e[1], e[2]));
    }
    check(ok, parts.join(", "))
}

/// `φ = 20(1 - x/3)` on the unit square: penalty `g = 20` at `x = 0`, Robin at `x = 1`, Neumann in y.
fn penalty_problem(epsilon: Option<f64>, nb: usize) -> ProblemSpec {
    let grid = Grid::spanning(&[0.0, 0.0], &[1.0, 1.0], &[17, 17]).unwrap();
    let low = match epsilon {
        Some(e) => BoundaryCondition::DirichletPenalty { g: 20.0, epsilon: Some(e) },
        None => BoundaryCondition::Neumann,
    };
    ProblemSpec::new(
        Domain::boxed(grid),
        nb,
        FieldSpec::Constant(1.0),
        FieldSpec::Constant(0.0),
        FieldSpec::Constant(0.0),
        BcSpec::PerFace(vec![low, BoundaryCondition::Robin { gamma: 1.0 }, BoundaryCondition::Neumann, BoundaryCondition::Neumann]),
    )
}

fn dirichlet_penalty() -> Outcome {
    let nb = 2;
    let cfg = RunConfig {
        solve: SolveConfig {
            tol: 1e-13,
            max_iter: 100_000,
            ..Default::default()
        },
        ..Default::default()
    };
    let mut devs = Vec::new();
    let mut last = None;
    for eps in [1e-2, 1e-3, 1e-4] {
        let sol = solve_problem(&penalty_problem(Some(eps), nb), &cfg).expect("penalty solve");
        let dev = (0..17)
            .map(|j| (sol.field.eval(&[0.0, j as f64 / 16.0]).unwrap() - 20.0).abs())
            .fold(0.0, f64::max);
        devs.push(dev);
        last = Some(sol);
    }
    let penalty = last.unwrap();
    // Dense oracle: same operator without the penalty face, trace pinned to 20 by Lagrange multipliers.
    let ocfg = OperatorConfig {
        strategy: Strategy::Sparse,
        ..Default::default()
    };
    let sys = assemble_system::<f64>(&penalty_problem(None, nb), &ocfg).expect("assemble");
    let OperatorHandle::Sparse(op) = &sys.operator else { unreachable!() };
    let ext = sys.rhs.extents().to_vec();
    let n = sys.rhs.len();
    let pad = nb / 2;
    // Trace at x = 0: Σ_k c_{k,j} β(0 - (k - pad)) = 20 for every tangential index j.
    let trace: Vec<(usize, f64)> = (0..ext[0]).map(|k| (k, beta(nb, -(k as f64 - pad as f64)))).filter(|(_, w)| *w != 0.0).collect();
    let m = ext[1];
    let mut kkt = DenseMatrix::zeros(n + m);
    for i in 0..n {
        for (j, v) in op.row(i) {
            kkt.set(i, j, v);
        }
    }
    for j in 0..m {
        for &(k, w) in &trace {
            let idx = k * ext[1] + j;
            kkt.set(n + j, idx, w);
            kkt.set(idx, n + j, w);
        }
    }
    let mut rhs = vec![0.0; n + m];
    rhs[n..].iter_mut().for_each(|v| *v = 20.0);
    let x = kkt.solve(&rhs).expect("dense solve");
    let oracle = SplineField::from_coefficients(
        CoeffTensor::from_vec(ext, x[..n].to_vec()).unwrap(),
        &penalty.field.basis(),
        vec![0.0, 0.0],
    )
    .unwrap();
    let (mut rel, mut exact_dev): (f64, f64) = (0.0, 0.0);
    for i in 0..17 {
        for j in 0..17 {
            let p = [i as f64 / 16.0, j as f64 / 16.0];
            let o = oracle.eval(&p).unwrap();
            rel = rel.max((penalty.field.eval(&p).unwrap() - o).abs() / o.abs());
            exact_dev = exact_dev.max((o - 20.0 * (1.0 - p[0] / 3.0)).abs());
        }
    }
    let monotone = devs.windows(2).all(|w| w[1] < w[0]);
    check(
        monotone && rel < 1e-3,
        format!(
            "trace deviation {:.2e}, {:.2e}, {:.2e} for ε = 1e-2, 1e-3, 1e-4; ε=1e-4 vs dense constrained oracle {rel:.2e} relative (tol 1e-3); oracle vs 20(1-x/3) {exact_dev:.1e}",
            devs[0], devs[1], devs[2]
        ),
    )
}

/// 33³ nodes, degree 2, strongly varying diffusion, Robin faces.
fn cg_benchmark() -> ProblemSpec {
    let grid = Grid::spanning(&[0.0; 3], &[1.0; 3], &[33, 33, 33]).unwrap();
    let tau = 2.0 * std::f64::consts::PI;
    ProblemSpec::new(
        Domain::boxed(grid),
        2,
        FieldSpec::custom(move |x| (1.5 * ((tau * x[0]).sin() * (tau * x[1]).cos() + 0.6 * (tau * x[2]).sin())).exp()),
        FieldSpec::Constant(0.1),
        FieldSpec::Analytic(Analytic::Gaussian {
            center: vec![0.4, 0.5, 0.6],
            width: 0.2,
            amplitude: 100.0,
        }),
        BcSpec::Global(BoundaryCondition::Robin { gamma: 1.0 }),
    )
}

fn cg_correctness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut worst: f64 = 0.0;
    let mut systems = 0;
    let strict = SolveConfig {
        tol: 1e-14,
        max_iter: 10_000,
        ..Default::default()
    };
    // Random dense SPD systems.
    for n in [1, 2, 3, 5, 8, 13, 21, 34, 55, 64] {
        let b: Vec<f64> = (0..n * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut a = DenseMatrix::zeros(n);
        for i in 0..n {
            for j in 0..n {
                let v: f64 = (0..n).map(|k| b[k * n + i] * b[k * n + j]).sum();
                a.set(i, j, v + if i == j { 0.5 } else { 0.0 });
            }
        }
        let rhs: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        for precond in [Preconditioner::None, Preconditioner::Jacobi] {
            let cfg = SolveConfig { precond, ..strict.clone() };
            let (x, _) = pcg(&a, &CoeffTensor::from_vec(vec![n], rhs.clone()).unwrap(), &cfg).expect("pcg");
            let o = a.solve(&rhs).unwrap();
            let norm = o.iter().map(|v| v * v).sum::<f64>().sqrt();
            let err = x.data().iter().zip(&o).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt() / norm;
            worst = worst.max(err);
            systems += 1;
        }
    }
    // Small spline systems from each strategy.
    for (nodes, nb) in [(vec![9], 1), (vec![6], 3), (vec![5, 5], 1), (vec![4, 4], 2), (vec![3, 3, 3], 1)] {
        let dim = nodes.len();
        let grid = Grid::spanning(&vec![0.0; dim], &vec![1.0; dim], &nodes).unwrap();
        let mut spec = ProblemSpec::new(
            Domain::boxed(grid),
            nb,
            FieldSpec::custom(|x| 1.0 + x[0]),
            FieldSpec::Constant(0.3),
            FieldSpec::custom(|x| x.iter().sum::<f64>().sin() + 1.0),
            BcSpec::Global(BoundaryCondition::Robin { gamma: 0.5 }),
        );
        spec.np = 1;
        for strategy in Strategy::ALL {
            let ocfg = OperatorConfig {
                strategy,
                ..Default::default()
            };
            let sys = assemble_system::<f64>(&spec, &ocfg).expect("assemble");
            let n = sys.rhs.len();
            assert!(n <= 64, "oracle systems stay small");
            let mut a = DenseMatrix::zeros(n);
            let mut e = vec![0.0; n];
            for j in 0..n {
                e.iter_mut().for_each(|v| *v = 0.0);
                e[j] = 1.0;
                let col = sys.operator.apply(&CoeffTensor::from_vec(sys.rhs.extents().to_vec(), e.clone()).unwrap()).unwrap();
                for i in 0..n {
                    a.set(i, j, col.data()[i]);
                }
            }
            let o = a.solve(sys.rhs.data()).unwrap();
            let (x, _) = pcg(&sys.operator, &sys.rhs, &strict).expect("pcg");
            let norm = o.iter().map(|v| v * v).sum::<f64>().sqrt();
            let err = x.data().iter().zip(&o).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt() / norm;
            worst = worst.max(err);
            systems += 1;
        }
    }
    // Iteration counts on the variable-coefficient benchmark.
    let spec = cg_benchmark();
    let run = |precond, coarse_init, max_iter| {
        let cfg = RunConfig {
            solve: SolveConfig {
                tol: 1e-8,
                max_iter,
                precond,
                coarse_init,
                ..Default::default()
            },
            operator: OperatorConfig {
                strategy: Strategy::Sparse,
                ..Default::default()
            },
        };
        let s = solve_problem(&spec, &cfg).expect("benchmark solve");
        (s.report.iterations, s.report.converged)
    };
    // An unconverged plain run bounds its iteration count from below.
    let cap = 1500;
    let (plain, c0) = run(Preconditioner::None, None, cap);
    let (jacobi, c1) = run(Preconditioner::Jacobi, None, cap);
    let (coarse, c2) = run(Preconditioner::Jacobi, Some(2), cap);
    let plain_text = if c0 { plain.to_string() } else { format!("> {cap} (not converged)") };
    check(
        worst < 1e-8 && c1 && c2 && jacobi < plain && coarse < jacobi,
        format!(
            "{systems} systems, max relative error {worst:.1e} (tol 1e-8); iterations to 1e-8 on the 33³ node variable-D benchmark: none {plain_text}, jacobi {jacobi}, jacobi + coarse init {coarse}"
        ),
    )
}

const PROBE_FLAG: &str = "--memory-probe";

/// Runs one memory probe in a fresh process so earlier allocations cannot mask growth.
fn probe_in_child(nodes: usize, nb: usize) -> Result<bench::MemoryProbe, String> {
    let exe = std::env::current_exe().map_err(|e| e.to_string())?;
    let out = std::process::Command::new(exe)
        .args([PROBE_FLAG, &nodes.to_string(), &nb.to_string()])
        .output()
        .map_err(|e| e.to_string())?;
    let text = String::from_utf8_lossy(&out.stdout);
    let line = text.lines().find(|l| l.starts_with("probe ")).ok_or_else(|| {
        format!("probe failed: {}", String::from_utf8_lossy(&out.stderr))
    })?;
    let f: Vec<u64> = line.split_whitespace().skip(1).map(|w| w.parse().unwrap()).collect();
    Ok(bench::MemoryProbe {
        degree: nb,
        field_bytes: f[0],
        growth_bytes: f[1],
    })
}

fn memory_model() -> Outcome {
    let mut ratios = Vec::new();
    let mut parts = Vec::new();
    for nb in 1..=3 {
        match probe_in_child(128, nb) {
            Ok(p) => {
                parts.push(format!("n={nb} growth/field {:.3}", p.ratio()));
                ratios.push(p.ratio());
            }
            Err(e) => return Outcome::Fail(e),
        }
    }
    let max = ratios.iter().cloned().fold(0.0, f64::max);
    let min = ratios.iter().cloned().fold(f64::INFINITY, f64::min);
    let spread = max / min - 1.0;
    let b1 = block_tensor_bytes(&[128; 3], 1, 8) as f64;
    let b3 = block_tensor_bytes(&[128; 3], 3, 8) as f64;
    let want = (7.0f64 / 3.0).powi(3);
    let block_err = (b3 / b1 / want - 1.0).abs();
    // The estimate matches the assembled block tensor.
    let grid = Grid::spanning(&[0.0; 3], &[1.0; 3], &[12, 12, 12]).unwrap();
    let disc = Discretization::<f64>::constant(Domain::boxed(grid), 3, 3, 1.0, 0.1, BoundaryWeights::none(3));
    let op = build_operator(disc, &OperatorConfig {
        strategy: Strategy::Block,
        ..Default::default()
    })
    .unwrap();
    let est_ok = op.memory_bytes() as u64 == block_tensor_bytes(&[12; 3], 3, 8);
    check(
        max < 1.2 && spread < 0.05 && block_err < 0.1 && est_ok,
        format!(
            "on-the-fly at 128³: {} (tol < 1.2), spread {:.1}% (tol 5%); block tensor n=3/n=1 {:.2} vs (7/3)³ = {want:.2}, off by {:.1}% (tol 10%); estimate matches assembly: {est_ok}",
            parts.join(", "),
            spread * 100.0,
            b3 / b1,
            block_err * 100.0
        ),
    )
}

fn scalability() -> Outcome {
    let cores = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    let plan = BenchPlan {
        grids: vec![vec![128, 128, 128]],
        degrees: vec![3],
        strategies: vec![Strategy::Onthefly],
        threads: vec![1, 4],
        precisions: vec![Precision::F64],
        repetitions: 3,
        warmup: 0,
        ..Default::default()
    };
    let results = match bench::run_bench(&plan) {
        Ok(r) => r,
        Err(e) => return Outcome::Fail(format!("bench failed: {e}")),
    };
    let csv = out_dir().join("scaling.csv");
    if let Err(e) = io::write_atomic(&csv, bench::results_csv(&results).as_bytes()) {
        return Outcome::Fail(format!("cannot write CSV: {e}"));
    }
    let speedup = results.iter().find(|r| r.threads == 4).map(|r| r.speedup).unwrap_or(f64::NAN);
    let detail = format!(
        "128³ n=3 on-the-fly: 4-thread speedup {speedup:.2} (need >= 2.0), output bitwise identical across 1 and 4 threads, CSV at {}",
        csv.display()
    );
    if cores < 4 {
        return Outcome::Skip(format!("{detail}; only {cores} core(s) available, criterion requires >= 4"));
    }
    check(speedup >= 2.0, detail)
}

/// Tapered limb along axis 0 with a bone and an artery running its length.
fn leg_problem() -> ProblemSpec {
    let cells = [240usize, 60, 60];
    let h = 1.0;
    let radius = |z: f64| 26.0 - 6.0 * z / 240.0;
    let in_leg = |z: f64, y: f64, x: f64| ((y - 30.0) / 1.05).powi(2) + (x - 30.0).powi(2) <= radius(z).powi(2);
    let in_bone = |y: f64, x: f64| (y - 31.0).powi(2) + (x - 28.0).powi(2) <= 49.0;
    let in_artery = |y: f64, x: f64| (y - 38.0).powi(2) + (x - 37.0).powi(2) <= 9.0;
    let mut occ = Vec::with_capacity(cells.iter().product());
    for k in 0..cells[0] {
        for j in 0..cells[1] {
            for i in 0..cells[2] {
                occ.push(in_leg(k as f64 + 0.5, j as f64 + 0.5, i as f64 + 0.5));
            }
        }
    }
    let grid = Grid::new(cells.iter().map(|c| c + 1).collect(), vec![h; 3], vec![0.0; 3]).unwrap();
    let nodes = grid.nodes().to_vec();
    let diffusion = CoeffTensor::from_fn(nodes.clone(), |p| {
        let (y, x) = (p[1] as f64, p[2] as f64);
        if in_bone(y, x) {
            0.3
        } else if in_artery(y, x) {
            0.55
        } else {
            0.5
        }
    });
    let source = CoeffTensor::from_fn(nodes, |p| if in_artery(p[1] as f64, p[2] as f64) { 0.5 } else { 0.0 });
    ProblemSpec::new(
        Domain::Mask(MaskDomain::new(grid, occ).unwrap()),
        1,
        FieldSpec::Sampled(diffusion),
        FieldSpec::Constant(0.0),
        FieldSpec::Sampled(source),
        BcSpec::Global(BoundaryCondition::DirichletPenalty { g: 20.0, epsilon: None }),
    )
}

fn masked_end_to_end() -> Outcome {
    let start = Instant::now();
    let spec = leg_problem();
    let cfg = RunConfig {
        solve: SolveConfig {
            tol: 1e-6,
            max_iter: 20_000,
            coarse_init: Some(5),
            ..Default::default()
        },
        ..Default::default()
    };
    let sol = match solve_problem(&spec, &cfg) {
        Ok(s) => s,
        Err(e) => return Outcome::Fail(format!("solve failed: {e}")),
    };
    let classes = sol.node_classes.clone().expect("mask domains classify nodes");
    let path = out_dir().join("leg.vtk");
    let vtk = io::export_vtk(&path, &sol.samples, spec.grid())
        .and_then(|_| std::fs::read_to_string(&path).map_err(Into::into))
        .and_then(|t| io::validate_vtk(&t));
    let secs = start.elapsed().as_secs_f64();
    let max_t = sol.samples.data().iter().cloned().fold(f64::MIN, f64::max);
    let detail = format!(
        "241x61x61 nodes, {} iterations (+{} coarse), residual {:.1e} (tol 1e-6), kernel split {} separable / {} stored / {} inactive, peak {max_t:.2} °C, VTK {}, {secs:.0} s (limit 600)",
        sol.report.iterations,
        sol.coarse.as_ref().map_or(0, |c| c.iterations),
        sol.report.relative_residual,
        classes.separable,
        classes.stored,
        classes.inactive,
        match &vtk {
            Ok(h) => format!("valid ({} points) at {}", h.points, path.display()),
            Err(e) => format!("invalid: {e}"),
        }
    );
    check(
        sol.report.converged && sol.report.relative_residual <= 1e-6 && vtk.is_ok() && classes.stored > 0 && classes.separable > 0 && secs < 600.0,
        detail,
    )
}

fn transform_round_trips() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut worst: f64 = 0.0;
    let mut cases = 0;
    for n in [2, 3] {
        for nodes in [vec![64], vec![16, 23], vec![17, 16, 20]] {
            let dim = nodes.len();
            let grid = Grid::new(nodes.clone(), vec![0.5; dim], vec![-1.0; dim]).unwrap();
            let samples = CoeffTensor::from_fn(nodes.clone(), |_| rng.gen_range(-10.0..10.0));
            let scale = samples.max_abs();
            for ext in [Extension::Mirror, Extension::Zero, Extension::Replicate] {
                let f = SplineField::interpolate(&samples, &grid.basis(n).unwrap(), grid.origin().to_vec(), ext).unwrap();
                let back = f.sample_nodes();
                let d = back.data().iter().zip(samples.data()).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
                worst = worst.max(d / scale);
                // Pointwise evaluation at the nodes as an independent path.
                let pts: Vec<Vec<f64>> = (0..samples.len()).step_by(7).map(|i| {
                    let mut rem = i;
                    let mut p = vec![0.0; dim];
                    for a in (0..dim).rev() {
                        p[a] = -1.0 + 0.5 * (rem % nodes[a]) as f64;
                        rem /= nodes[a];
                    }
                    p
                }).collect();
                let vals = indirect_transform(&f, &pts).unwrap();
                for (k, v) in vals.iter().enumerate() {
                    worst = worst.max((v - samples.data()[k * 7]).abs() / scale);
                }
                cases += 1;
            }
        }
    }
    check(worst < 1e-10, format!("{cases} fields, max relative deviation {worst:.2e} (tol 1e-10)"))
}

fn run_probe(args: &[String]) -> ExitCode {
    let nodes: usize = args[0].parse().expect("node count");
    let nb: usize = args[1].parse().expect("degree");
    match bench::probe_onthefly_memory::<f64>(&[nodes; 3], nb, 7, 1) {
        Ok(p) => {
            println!("probe {} {}", p.field_bytes, p.growth_bytes);
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{e}");
            ExitCode::FAILURE
        }
    }
}

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.first().map(String::as_str) == Some(PROBE_FLAG) {
        return run_probe(&args[1..]);
    }
    let selected: Vec<usize> = args.iter().filter_map(|a| a.parse().ok()).collect();
    let want = |i: usize| selected.is_empty() || selected.contains(&i);
    let mut study: Option<(ConvergenceStudy, ConvergenceStudy)> = None;
    let mut get_study = || study.get_or_insert_with(studies).clone();
    let mut failed = 0;
    let mut skipped = 0;
    for id in 1..=10 {
        if !want(id) {
            continue;
        }
        let t = Instant::now();
        let outcome = match id {
            1 => kernel_exactness(),
            2 => cross_strategy(),
            3 => {
                let (a, b) = get_study();
                convergence_orders(&a, &b)
            }
            4 => higher_order_superiority(&get_study().0),
            5 => dirichlet_penalty(),
            6 => cg_correctness(),
            7 => memory_model(),
            8 => scalability(),
            9 => masked_end_to_end(),
            _ => transform_round_trips(),
        };
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Outcome::Pass(d) => println!("PASS criterion {id:>2} [{secs:.1} s]: {d}"),
            Outcome::Fail(d) => {
                failed += 1;
                println!("FAIL criterion {id:>2} [{secs:.1} s]: {d}");
            }
            Outcome::Skip(d) => {
                skipped += 1;
                println!("SKIP criterion {id:>2} [{secs:.1} s]: {d}");
            }
        }
    }
    println!("acceptance: {failed} failed, {skipped} skipped");
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
