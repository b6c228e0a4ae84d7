//! Error norms, manufactured-solution families and convergence-order studies.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::sync::Arc;

use crate::bspline::SplineField;
use crate::domain::{Domain, Grid};
use crate::error::{Result, TbsError};
use crate::kernels::gauss_rule;
use crate::operator::{OperatorConfig, OperatorHandle, Strategy};
use crate::pde::{
    assemble_system, solve_problem, Analytic, BcSpec, BoundaryCondition, FieldSpec, ProblemSpec, RunConfig,
};
use crate::solver::BandMatrix;

type ScalarFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;
type VectorFn = Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>;

/// Field an approximation is measured against.
#[derive(Clone)]
pub enum Reference {
    Zero,
    Analytic { value: ScalarFn, gradient: VectorFn },
    Spline(SplineField<f64>),
}

impl std::fmt::Debug for Reference {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Reference::Zero => write!(f, "Zero"),
            Reference::Analytic { .. } => write!(f, "Analytic"),
            Reference::Spline(s) => write!(f, "Spline(degree {}, nodes {:?})", s.degree(), s.nodes()),
        }
    }
}

impl Reference {
    pub fn analytic(
        value: impl Fn(&[f64]) -> f64 + Send + Sync + 'static,
        gradient: impl Fn(&[f64]) -> Vec<f64> + Send + Sync + 'static,
    ) -> Self {
        Reference::Analytic {
            value: Arc::new(value),
            gradient: Arc::new(gradient),
        }
    }

    fn value(&self, x: &[f64]) -> Result<f64> {
        match self {
            Reference::Zero => Ok(0.0),
            Reference::Analytic { value, .. } => Ok(value(x)),
            Reference::Spline(s) => s.eval(x),
        }
    }

    fn gradient(&self, x: &[f64]) -> Result<Vec<f64>> {
        match self {
            Reference::Zero => Ok(vec![0.0; x.len()]),
            Reference::Analytic { gradient, .. } => Ok(gradient(x)),
            Reference::Spline(s) => s.gradient(x),
        }
    }

    /// Sub-cells per field cell so that quadrature never straddles a reference knot.
    fn subdivisions(&self, step: &[f64]) -> usize {
        match self {
            Reference::Spline(s) => step
                .iter()
                .zip(s.step())
                .map(|(h, r)| (h / r).round().max(1.0) as usize)
                .max()
                .unwrap_or(1),
            _ => 1,
        }
    }

    fn degree(&self) -> usize {
        match self {
            Reference::Spline(s) => s.degree(),
            Reference::Zero => 0,
            Reference::Analytic { .. } => 4,
        }
    }
}

/// Error norms of one solve.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct ErrorReport {
    pub l2_error: f64,
    pub h1_error: f64,
    /// Largest grid step.
    pub h: f64,
    pub degree: usize,
    pub dofs: usize,
}

fn check_grid(field: &SplineField<f64>, grid: &Grid) -> Result<()> {
    let same = field.nodes() == grid.nodes()
        && field
            .step()
            .iter()
            .zip(grid.step())
            .all(|(a, b)| (a - b).abs() <= 1e-12 * b.abs())
        && field
            .origin()
            .iter()
            .zip(grid.origin())
            .all(|(a, b)| (a - b).abs() <= 1e-12 * (1.0 + b.abs()));
    if same {
        Ok(())
    } else {
        Err(TbsError::InputValidation(
            "field and domain grids differ".into(),
        ))
    }
}

/// `(∫|e|², ∫|∇e|²)` over the occupied cells, `e = field - reference`.
fn error_integrals(field: &SplineField<f64>, reference: &Reference, domain: &Domain, gradient: bool) -> Result<(f64, f64)> {
    let grid = domain.grid();
    check_grid(field, grid)?;
    if gradient && field.degree() == 0 {
        return Err(TbsError::Smoothness { degree: 0, order: 1 });
    }
    let dim = grid.dim();
    let sub = reference.subdivisions(grid.step());
    let q = (field.degree().max(reference.degree()) + 2).min(16);
    let rule = gauss_rule(q)?;
    let cells = grid.cells();
    let h = grid.step();
    let sub_h: Vec<f64> = h.iter().map(|h| h / sub as f64).collect();
    let w_cell: f64 = sub_h.iter().product();
    let per_cell = (sub * q).pow(dim as u32);
    let pts_axis = sub * q;
    let mut x = vec![0.0; dim];
    let (mut v2, mut g2) = (0.0, 0.0);
    let mut idx = vec![0usize; dim];
    for c in 0..grid.cell_count() {
        let mut rem = c;
        for a in (0..dim).rev() {
            idx[a] = rem % cells[a];
            rem /= cells[a];
        }
        if !domain.occupied(&idx) {
            continue;
        }
        let (mut cv, mut cg) = (0.0, 0.0);
        for p in 0..per_cell {
            let mut rem = p;
            let mut w = w_cell;
            for a in (0..dim).rev() {
                let k = rem % pts_axis;
                rem /= pts_axis;
                let (s, qi) = (k / q, k % q);
                w *= rule.weights[qi];
                x[a] = grid.origin()[a] + idx[a] as f64 * h[a] + (s as f64 + rule.nodes[qi]) * sub_h[a];
            }
            let e = field.eval(&x)? - reference.value(&x)?;
            cv += w * e * e;
            if gradient {
                let gf = field.gradient(&x)?;
                let gr = reference.gradient(&x)?;
                cg += w * gf.iter().zip(&gr).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
            }
        }
        v2 += cv;
        g2 += cg;
    }
    Ok((v2, g2))
}

/// `‖field - reference‖_{L²}` over the occupied cells of `domain`.
pub fn l2_norm(field: &SplineField<f64>, reference: &Reference, domain: &Domain) -> Result<f64> {
    Ok(error_integrals(field, reference, domain, false)?.0.sqrt())
}

/// `‖field - reference‖_{H¹} = (∫|e|² + ∫|∇e|²)^{1/2}`.
pub fn h1_norm(field: &SplineField<f64>, reference: &Reference, domain: &Domain) -> Result<f64> {
    let (v, g) = error_integrals(field, reference, domain, true)?;
    Ok((v + g).sqrt())
}

pub fn error_report(field: &SplineField<f64>, reference: &Reference, domain: &Domain) -> Result<ErrorReport> {
    let (v, g) = error_integrals(field, reference, domain, field.degree() > 0)?;
    Ok(ErrorReport {
        l2_error: v.sqrt(),
        h1_error: (v + g).sqrt(),
        h: domain.grid().step().iter().cloned().fold(0.0, f64::max),
        degree: field.degree(),
        dofs: field.coefficients().len(),
    })
}

/// Least-squares slope of `log e` against `log h`.
pub fn fit_order(h: &[f64], e: &[f64]) -> f64 {
    let pts: Vec<(f64, f64)> = h
        .iter()
        .zip(e)
        .filter(|(h, e)| **h > 0.0 && **e > 0.0)
        .map(|(h, e)| (h.ln(), e.ln()))
        .collect();
    let n = pts.len() as f64;
    if pts.len() < 2 {
        return f64::NAN;
    }
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    sxy / sxx
}

/// 1-D diffusion on `[-L, L]`: `-(D φ')' + μ_a φ = exp(-(x/w)²)` with Robin ends.
#[derive(Debug, Clone, PartialEq, serde::Deserialize, serde::Serialize)]
#[serde(default, deny_unknown_fields)]
pub struct Diffusion1d {
    pub half_width: f64,
    pub diffusion: f64,
    pub absorption: f64,
    pub gamma: f64,
    pub source_width: f64,
    /// Step at level 0.
    pub base_step: f64,
    pub reference_degree: usize,
    pub reference_refinement: usize,
}

impl Default for Diffusion1d {
    fn default() -> Self {
        Self {
            half_width: 25.0,
            diffusion: 1.0,
            absorption: 0.1,
            gamma: 1.0,
            source_width: 2.0,
            base_step: 1.0,
            reference_degree: 5,
            reference_refinement: 16,
        }
    }
}

/// `φ = Π cos(π x_i)` on the unit square, `D = 1`, `μ_a` given, Neumann.
#[derive(Debug, Clone, PartialEq, serde::Deserialize, serde::Serialize)]
#[serde(default, deny_unknown_fields)]
pub struct Cosine2d {
    pub absorption: f64,
    pub base_step: f64,
}

impl Default for Cosine2d {
    fn default() -> Self {
        Self {
            absorption: 1.0,
            base_step: 0.25,
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Deserialize, serde::Serialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ProblemFamily {
    Diffusion1d(Diffusion1d),
    Cosine2d(Cosine2d),
}

impl ProblemFamily {
    pub fn name(&self) -> &'static str {
        match self {
            ProblemFamily::Diffusion1d(_) => "diffusion1d",
            ProblemFamily::Cosine2d(_) => "cosine2d",
        }
    }

    fn base_step(&self) -> f64 {
        match self {
            ProblemFamily::Diffusion1d(p) => p.base_step,
            ProblemFamily::Cosine2d(p) => p.base_step,
        }
    }

    /// Problem at grid step `h` and basis degree `nb`.
    pub fn problem(&self, h: f64, nb: usize) -> Result<ProblemSpec> {
        match self {
            ProblemFamily::Diffusion1d(p) => {
                let cells = 2.0 * p.half_width / h;
                if (cells - cells.round()).abs() > 1e-9 {
                    return Err(TbsError::Configuration(format!(
                        "step {h} does not divide the interval [-{0}, {0}]",
                        p.half_width
                    )));
                }
                let grid = Grid::new(vec![cells.round() as usize + 1], vec![h], vec![-p.half_width])?;
                Ok(ProblemSpec::new(
                    Domain::boxed(grid),
                    nb,
                    FieldSpec::Constant(p.diffusion),
                    FieldSpec::Constant(p.absorption),
                    FieldSpec::Analytic(Analytic::Gaussian {
                        center: vec![0.0],
                        width: p.source_width,
                        amplitude: 1.0,
                    }),
                    BcSpec::Global(BoundaryCondition::Robin { gamma: p.gamma }),
                ))
            }
            ProblemFamily::Cosine2d(p) => {
                let cells = 1.0 / h;
                if (cells - cells.round()).abs() > 1e-9 {
                    return Err(TbsError::Configuration(format!("step {h} does not divide the unit square")));
                }
                let n = cells.round() as usize + 1;
                let grid = Grid::new(vec![n, n], vec![h, h], vec![0.0, 0.0])?;
                Ok(ProblemSpec::new(
                    Domain::boxed(grid),
                    nb,
                    FieldSpec::Constant(1.0),
                    FieldSpec::Constant(p.absorption),
                    FieldSpec::Analytic(Analytic::CosineProduct {
                        amplitude: 2.0 * PI * PI + p.absorption,
                        wavenumbers: vec![PI, PI],
                    }),
                    BcSpec::Global(BoundaryCondition::Neumann),
                ))
            }
        }
    }

    fn analytic_reference(&self) -> Option<Reference> {
        match self {
            ProblemFamily::Cosine2d(_) => Some(Reference::analytic(
                |x| (PI * x[0]).cos() * (PI * x[1]).cos(),
                |x| {
                    vec![
                        -PI * (PI * x[0]).sin() * (PI * x[1]).cos(),
                        -PI * (PI * x[0]).cos() * (PI * x[1]).sin(),
                    ]
                },
            )),
            ProblemFamily::Diffusion1d(_) => None,
        }
    }
}

/// Solves a problem; 1-D systems use a band Cholesky factorization.
pub fn solve_field(spec: &ProblemSpec, cfg: &RunConfig) -> Result<SplineField<f64>> {
    if spec.grid().dim() != 1 {
        return Ok(solve_problem(spec, cfg)?.field);
    }
    let ocfg = OperatorConfig {
        strategy: Strategy::Sparse,
        ..cfg.operator.clone()
    };
    let sys = assemble_system::<f64>(spec, &ocfg)?;
    let OperatorHandle::Sparse(op) = &sys.operator else {
        unreachable!("sparse strategy requested")
    };
    let c = BandMatrix::from_sparse(op).solve(sys.rhs.data())?;
    SplineField::from_coefficients(
        crate::CoeffTensor::from_vec(sys.rhs.extents().to_vec(), c)?,
        &spec.grid().basis(spec.nb)?,
        spec.grid().origin().to_vec(),
    )
}

/// Error curve of one degree.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct DegreeCurve {
    pub degree: usize,
    pub reports: Vec<ErrorReport>,
    pub l2_order: f64,
    pub h1_order: f64,
    /// Errors decrease at every refinement.
    pub monotone: bool,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct ConvergenceStudy {
    pub family: String,
    pub curves: Vec<DegreeCurve>,
    /// Estimated L2 error of the fine reference, when one is used.
    pub reference_error: Option<f64>,
}

/// Minimum refinement levels in a study.
pub const MIN_LEVELS: usize = 3;

/// Runs `family` at `h = h0·2^{-μ}` for each level `μ` and degree.
pub fn run_convergence(family: &ProblemFamily, degrees: &[usize], levels: &[usize], cfg: &RunConfig) -> Result<ConvergenceStudy> {
    if levels.len() < MIN_LEVELS {
        return Err(TbsError::Configuration(format!(
            "a convergence study needs at least {MIN_LEVELS} levels, got {}",
            levels.len()
        )));
    }
    if degrees.is_empty() {
        return Err(TbsError::Configuration("no degrees given".into()));
    }
    let h0 = family.base_step();
    let steps: Vec<f64> = levels.iter().map(|&m| h0 * 0.5f64.powi(m as i32)).collect();
    let (reference, reference_error) = match family {
        ProblemFamily::Diffusion1d(p) => {
            let h_min = steps.iter().cloned().fold(f64::INFINITY, f64::min);
            let fine = p.reference_refinement.max(2) as f64;
            let r = solve_field(&family.problem(h_min / fine, p.reference_degree)?, cfg)?;
            let half = solve_field(&family.problem(2.0 * h_min / fine, p.reference_degree)?, cfg)?;
            let dom = family.problem(2.0 * h_min / fine, p.reference_degree)?.domain;
            let est = l2_norm(&half, &Reference::Spline(r.clone()), &dom)?;
            (Reference::Spline(r), Some(est))
        }
        _ => (family.analytic_reference().expect("analytic family"), None),
    };
    let mut curves = Vec::new();
    for &nb in degrees {
        let mut reports = Vec::new();
        for &h in &steps {
            let spec = family.problem(h, nb)?;
            let field = solve_field(&spec, cfg)?;
            let rep = error_report(&field, &reference, &spec.domain)?;
            log::info!("{} nb={nb} h={h}: l2={:e} h1={:e}", family.name(), rep.l2_error, rep.h1_error);
            reports.push(rep);
        }
        let hs: Vec<f64> = reports.iter().map(|r| r.h).collect();
        let l2: Vec<f64> = reports.iter().map(|r| r.l2_error).collect();
        let h1: Vec<f64> = reports.iter().map(|r| r.h1_error).collect();
        let mut order: Vec<usize> = (0..reports.len()).collect();
        order.sort_by(|&a, &b| hs[b].total_cmp(&hs[a]));
        let monotone = order
            .windows(2)
            .all(|w| l2[w[1]] < l2[w[0]] && h1[w[1]] < h1[w[0]]);
        if !monotone {
            log::warn!("{} nb={nb}: error does not decrease monotonically", family.name());
        }
        curves.push(DegreeCurve {
            degree: nb,
            l2_order: fit_order(&hs, &l2),
            h1_order: fit_order(&hs, &h1),
            reports,
            monotone,
        });
    }
    Ok(ConvergenceStudy {
        family: family.name().to_string(),
        curves,
        reference_error,
    })
}

impl ConvergenceStudy {
    pub fn curve(&self, degree: usize) -> Option<&DegreeCurve> {
        self.curves.iter().find(|c| c.degree == degree)
    }

    /// `degree,h,dof,l2,h1,l2_order,h1_order,monotone`, one row per solve.
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        if let Some(e) = self.reference_error {
            let _ = writeln!(s, "# {} reference L2 error estimate {e:.3e}", self.family);
        }
        s.push_str("degree,h,dof,l2,h1,l2_order,h1_order,monotone\n");
        for c in &self.curves {
            for r in &c.reports {
                let _ = writeln!(
                    s,
                    "{},{},{},{:.6e},{:.6e},{:.4},{:.4},{}",
                    c.degree, r.h, r.dofs, r.l2_error, r.h1_error, c.l2_order, c.h1_order, c.monotone
                );
            }
        }
        s
    }

    /// Gnuplot script plotting the error curves from `csv`.
    pub fn gnuplot_script(&self, csv: &str) -> String {
        let mut s = format!(
            "set datafile separator ','\nset logscale xy\nset key left top\nset xlabel 'h'\nset ylabel 'error'\nset title '{}'\nplot ",
            self.family
        );
        let plots: Vec<String> = self
            .curves
            .iter()
            .flat_map(|c| {
                let d = c.degree;
                [
                    format!("'{csv}' using ($1=={d}?$2:1/0):4 with linespoints title 'L2 n={d}'"),
                    format!("'{csv}' using ($1=={d}?$2:1/0):5 with linespoints title 'H1 n={d}'"),
                ]
            })
            .collect();
        s.push_str(&plots.join(", \\\n     "));
        s.push('\n');
        s
    }
}
