//! Problem assembly: input fields to spline coefficients, right-hand side,
//! boundary conditions, and the end-to-end solve.
//!
//! The weak form is `∫ D ∇φ·∇ψ + ∫ μ_a φ ψ + Σ_f ρ_f ∫_f φ ψ = ∫ q ψ + Σ_f ρ_f g_f ∫_f ψ`
//! with `ρ = 1/(2γ)` for Robin, `ρ = 1/ε` for the Dirichlet penalty and `ρ = 0`
//! for natural Neumann faces.

use std::sync::Arc;
use std::time::Instant;

use crate::bspline::{bspline, interpolation_coefficients, BSplineBasis, Extension, SplineField};
use crate::domain::{Domain, Grid, MaskDomain, NodeClassification};
use crate::error::{Result, TbsError};
use crate::kernels::{cell_offsets, gauss_rule, CellBilinear, Side};
use crate::operator::{
    build_operator, BoundaryWeights, Discretization, OpStats, OperatorConfig, OperatorHandle, Strategy,
};
use crate::real::{Precision, Real};
use crate::solver::{pcg_from, SolveConfig, SolveReport};
use crate::tensor::{embed3, CoeffTensor};

/// Closed-form scalar fields.
#[derive(Clone)]
pub enum Analytic {
    /// `amplitude · exp(-Σ ((x_i - c_i) / width)²)`.
    Gaussian {
        center: Vec<f64>,
        width: f64,
        amplitude: f64,
    },
    /// `amplitude · Π cos(k_i x_i)`.
    CosineProduct { amplitude: f64, wavenumbers: Vec<f64> },
    Custom(Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>),
}

impl std::fmt::Debug for Analytic {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Analytic::Gaussian {
                center,
                width,
                amplitude,
            } => write!(f, "Gaussian({center:?}, {width}, {amplitude})"),
            Analytic::CosineProduct {
                amplitude,
                wavenumbers,
            } => write!(f, "CosineProduct({amplitude}, {wavenumbers:?})"),
            Analytic::Custom(_) => write!(f, "Custom"),
        }
    }
}

impl Analytic {
    pub fn eval(&self, x: &[f64]) -> f64 {
        match self {
            Analytic::Gaussian {
                center,
                width,
                amplitude,
            } => {
                let r2: f64 = x
                    .iter()
                    .zip(center)
                    .map(|(a, c)| ((a - c) / width).powi(2))
                    .sum();
                amplitude * (-r2).exp()
            }
            Analytic::CosineProduct {
                amplitude,
                wavenumbers,
            } => amplitude * x.iter().zip(wavenumbers).map(|(a, k)| (k * a).cos()).product::<f64>(),
            Analytic::Custom(f) => f(x),
        }
    }
}

/// A coefficient or source field.
#[derive(Debug, Clone)]
pub enum FieldSpec {
    Constant(f64),
    /// Node samples over the grid (extents = grid nodes).
    Sampled(CoeffTensor<f64>),
    Analytic(Analytic),
}

impl FieldSpec {
    pub fn custom(f: impl Fn(&[f64]) -> f64 + Send + Sync + 'static) -> Self {
        FieldSpec::Analytic(Analytic::Custom(Arc::new(f)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum BoundaryCondition {
    /// Natural condition `D ∂φ/∂n = 0`.
    Neumann,
    /// `2γ D ∂φ/∂n + φ = 0`.
    Robin {
        #[serde(default = "default_gamma")]
        gamma: f64,
    },
    /// `D ∂φ/∂n = (g - φ)/ε`; `ε` defaults to `1e-4·h`.
    #[serde(alias = "penalty")]
    DirichletPenalty {
        g: f64,
        #[serde(default)]
        epsilon: Option<f64>,
    },
    /// Representable, not realized.
    Cauchy,
    /// Exact Dirichlet; use the penalty form instead.
    Dirichlet { g: f64 },
}

fn default_gamma() -> f64 {
    1.0
}

/// Penalty parameter relative to the smallest grid step.
pub const DEFAULT_PENALTY_SCALE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub enum BcSpec {
    Global(BoundaryCondition),
    /// One condition per grid face, indexed `2·axis + side` (low = 0). Box domains only.
    PerFace(Vec<BoundaryCondition>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProjectionMode {
    #[default]
    Interpolation,
    L2,
}

/// Full problem description.
#[derive(Debug, Clone)]
pub struct ProblemSpec {
    pub domain: Domain,
    pub nb: usize,
    pub np: usize,
    pub ns: usize,
    pub diffusion: FieldSpec,
    pub absorption: FieldSpec,
    pub source: FieldSpec,
    pub bc: BcSpec,
    pub precision: Precision,
    pub projection: ProjectionMode,
    pub extension: Extension,
}

impl ProblemSpec {
    /// Defaults: `n_p = n_s = n_b`, interpolation, mirror extension, double precision.
    pub fn new(domain: Domain, nb: usize, diffusion: FieldSpec, absorption: FieldSpec, source: FieldSpec, bc: BcSpec) -> Self {
        Self {
            domain,
            nb,
            np: nb,
            ns: nb,
            diffusion,
            absorption,
            source,
            bc,
            precision: Precision::F64,
            projection: ProjectionMode::Interpolation,
            extension: Extension::Mirror,
        }
    }

    pub fn grid(&self) -> &Grid {
        self.domain.grid()
    }
}

/// Spline coefficients of the inputs (padded extents per their degrees).
#[derive(Debug, Clone)]
pub struct SplineInputs {
    pub diffusion: CoeffTensor<f64>,
    pub absorption: CoeffTensor<f64>,
    pub source: CoeffTensor<f64>,
    /// Diffusion coefficients clamped from negative to zero.
    pub clamped: usize,
}

fn node_positions(grid: &Grid) -> impl Iterator<Item = Vec<f64>> + '_ {
    let n = grid.nodes().to_vec();
    let total: usize = n.iter().product();
    (0..total).map(move |mut f| {
        let mut x = vec![0.0; n.len()];
        for a in (0..n.len()).rev() {
            let i = f % n[a];
            f /= n[a];
            x[a] = grid.origin()[a] + i as f64 * grid.step()[a];
        }
        x
    })
}

/// Node samples of a field over the grid.
pub fn sample_field(field: &FieldSpec, grid: &Grid) -> Result<CoeffTensor<f64>> {
    match field {
        FieldSpec::Constant(v) => Ok(CoeffTensor::filled(grid.nodes().to_vec(), *v)),
        FieldSpec::Sampled(t) => {
            t.check_extents(grid.nodes())?;
            Ok(t.clone())
        }
        FieldSpec::Analytic(f) => {
            let data: Vec<f64> = node_positions(grid).map(|x| f.eval(&x)).collect();
            CoeffTensor::from_vec(grid.nodes().to_vec(), data)
        }
    }
}

/// Spline coefficients (padded) of one field at `degree`.
pub fn field_coefficients(
    field: &FieldSpec,
    grid: &Grid,
    degree: usize,
    mode: ProjectionMode,
    ext: Extension,
) -> Result<CoeffTensor<f64>> {
    let basis = grid.basis(degree)?;
    match (field, mode) {
        (FieldSpec::Constant(v), _) => {
            if !v.is_finite() {
                return Err(TbsError::InputValidation(format!("non-finite constant {v}")));
            }
            Ok(CoeffTensor::filled(grid.coeff_extents(degree), *v))
        }
        (FieldSpec::Analytic(f), ProjectionMode::L2) => l2_projection(f, grid, degree),
        _ => interpolation_coefficients(&sample_field(field, grid)?, &basis, ext),
    }
}

/// Best approximation in `L²` over the grid box: solves the spline mass system.
pub fn l2_projection(f: &Analytic, grid: &Grid, degree: usize) -> Result<CoeffTensor<f64>> {
    if degree == 0 {
        return Err(TbsError::Configuration("L2 projection needs degree >= 1".into()));
    }
    let dim = grid.dim();
    let lay_nodes = embed3(grid.nodes());
    let pad = (degree / 2) as isize;
    let ext = grid.coeff_extents(degree);
    let ext3 = embed3(&ext);
    let mut load = vec![0.0; ext.iter().product()];
    let rule = gauss_rule((degree + 4).min(16))?;
    let (kmin, kw) = cell_offsets(degree);
    let h = grid.step();
    let vol = grid.cell_volume();
    let cells: Vec<usize> = (0..3).map(|a| if a >= 3 - dim { lay_nodes[a] - 1 } else { 1 }).collect();
    let q = rule.nodes.len();
    let qn = q.pow(dim as u32);
    let kprod = kw.pow(dim as u32);
    let mut x = vec![0.0; dim];
    let mut vals = vec![vec![0.0; kw]; dim];
    for j0 in 0..cells[0] {
        for j1 in 0..cells[1] {
            for j2 in 0..cells[2] {
                let j3 = [j0, j1, j2];
                let j = &j3[3 - dim..];
                for qf in 0..qn {
                    let mut rem = qf;
                    let mut w = vol;
                    for a in (0..dim).rev() {
                        let qi = rem % q;
                        rem /= q;
                        let u = rule.nodes[qi];
                        w *= rule.weights[qi];
                        x[a] = grid.origin()[a] + (j[a] as f64 + u) * h[a];
                        for (i, v) in vals[a].iter_mut().enumerate() {
                            *v = bspline(degree, u - (kmin + i as isize) as f64);
                        }
                    }
                    let fx = f.eval(&x) * w;
                    for kf in 0..kprod {
                        let mut rem = kf;
                        let mut v = fx;
                        let mut idx = 0usize;
                        let mut kk = [0usize; 3];
                        for a in (0..dim).rev() {
                            let i = rem % kw;
                            rem /= kw;
                            v *= vals[a][i];
                            kk[a] = (j[a] as isize + kmin + i as isize + pad) as usize;
                        }
                        for a in 0..dim {
                            idx = idx * ext[a] + kk[a];
                        }
                        load[idx] += v;
                    }
                }
            }
        }
    }
    let _ = ext3;
    let disc = Discretization::<f64>::constant(Domain::boxed(grid.clone()), degree, 0, 0.0, 1.0, BoundaryWeights::none(dim));
    let op = build_operator(disc, &OperatorConfig::default())?;
    let rhs = CoeffTensor::from_vec(ext, load)?;
    let cfg = SolveConfig {
        tol: 1e-13,
        max_iter: 10_000,
        ..Default::default()
    };
    let (c, _) = pcg_from(&op, &rhs, None, &cfg)?;
    Ok(c)
}

/// Prefilters `D`, `μ_a` at `n_p` and `q` at `n_s`; negative `D` coefficients are clamped to 0.
pub fn transform_inputs(spec: &ProblemSpec) -> Result<SplineInputs> {
    let g = spec.grid();
    let mut diffusion = field_coefficients(&spec.diffusion, g, spec.np, spec.projection, spec.extension)?;
    let absorption = field_coefficients(&spec.absorption, g, spec.np, spec.projection, spec.extension)?;
    let source = field_coefficients(&spec.source, g, spec.ns, spec.projection, spec.extension)?;
    let mut clamped = 0;
    for v in diffusion.data_mut() {
        if *v < 0.0 {
            *v = 0.0;
            clamped += 1;
        }
    }
    if clamped > 0 {
        log::warn!("clamped {clamped} negative diffusion coefficients to zero");
    }
    Ok(SplineInputs {
        diffusion,
        absorption,
        source,
        clamped,
    })
}

/// Surface weights `ρ` and loads `ρ·g` per face.
#[derive(Debug, Clone, PartialEq)]
pub struct BcRealization {
    pub weights: BoundaryWeights,
    pub loads: BoundaryWeights,
}

fn realize_one(bc: BoundaryCondition, h: f64) -> Result<(f64, f64)> {
    match bc {
        BoundaryCondition::Neumann => Ok((0.0, 0.0)),
        BoundaryCondition::Robin { gamma } => {
            if !(gamma > 0.0 && gamma.is_finite()) {
                return Err(TbsError::Configuration(format!("Robin gamma must be > 0, got {gamma}")));
            }
            Ok((1.0 / (2.0 * gamma), 0.0))
        }
        BoundaryCondition::DirichletPenalty { g, epsilon } => {
            let eps = epsilon.unwrap_or(DEFAULT_PENALTY_SCALE * h);
            if !(eps > 0.0 && eps.is_finite()) || !g.is_finite() {
                return Err(TbsError::Configuration(format!("penalty needs finite g and ε > 0, got g={g}, ε={eps}")));
            }
            Ok((1.0 / eps, g / eps))
        }
        BoundaryCondition::Cauchy => Err(TbsError::Configuration(
            "Cauchy boundary conditions are not realized; use Robin or DirichletPenalty".into(),
        )),
        BoundaryCondition::Dirichlet { .. } => Err(TbsError::Configuration(
            "exact Dirichlet conditions are not realized; use DirichletPenalty".into(),
        )),
    }
}

/// Maps boundary conditions to surface weights and loads.
pub fn realize_bc(spec: &ProblemSpec) -> Result<BcRealization> {
    let g = spec.grid();
    let dim = g.dim();
    let h = g.step().iter().cloned().fold(f64::INFINITY, f64::min);
    match (&spec.domain, &spec.bc) {
        (Domain::Mask(_), BcSpec::PerFace(_)) => Err(TbsError::Configuration(
            "mask domains take one global boundary condition".into(),
        )),
        (Domain::Mask(_), BcSpec::Global(bc)) => {
            if !matches!(bc, BoundaryCondition::Neumann | BoundaryCondition::DirichletPenalty { .. }) {
                return Err(TbsError::Configuration(format!(
                    "{bc:?} is not supported on mask domains (use Neumann or DirichletPenalty)"
                )));
            }
            let (rho, load) = realize_one(*bc, h)?;
            Ok(BcRealization {
                weights: BoundaryWeights::uniform(dim, rho),
                loads: BoundaryWeights::uniform(dim, load),
            })
        }
        (Domain::Box(_), bc) => {
            let faces: Vec<BoundaryCondition> = match bc {
                BcSpec::Global(b) => vec![*b; 2 * dim],
                BcSpec::PerFace(v) => {
                    if v.len() != 2 * dim {
                        return Err(TbsError::Configuration(format!(
                            "{} face conditions given for {} faces",
                            v.len(),
                            2 * dim
                        )));
                    }
                    v.clone()
                }
            };
            let mut weights = BoundaryWeights::none(dim);
            let mut loads = BoundaryWeights::none(dim);
            for (i, bc) in faces.into_iter().enumerate() {
                let (rho, load) = realize_one(bc, h)?;
                weights.edge[i] = rho;
                loads.edge[i] = load;
            }
            Ok(BcRealization { weights, loads })
        }
    }
}

/// Right-hand side `t_l = Σ_j q_j ∫_Ω β^{n_s}_j β^{n_b}_l + Σ_f ρ_f g_f ∫_f β_l`,
/// integrated cell by cell over the occupied cells.
pub fn assemble_rhs(spec: &ProblemSpec, source: &CoeffTensor<f64>, bc: &BcRealization) -> Result<CoeffTensor<f64>> {
    let g = spec.grid();
    source.check_extents(&g.coeff_extents(spec.ns))?;
    let dim = g.dim();
    let (nb, ns) = (spec.nb, spec.ns);
    let nodes = embed3(g.nodes());
    let real = |a: usize| a >= 3 - dim;
    let cells: [usize; 3] = std::array::from_fn(|a| if real(a) { nodes[a] - 1 } else { 1 });
    let slots: [usize; 3] = std::array::from_fn(|a| if real(a) { nodes[a] + 2 * (nb / 2) } else { 1 });
    let qslots: [usize; 3] = std::array::from_fn(|a| if real(a) { nodes[a] + 2 * (ns / 2) } else { 1 });
    let h3: [f64; 3] = std::array::from_fn(|a| if real(a) { g.step()[a + dim - 3] } else { 1.0 });
    let cb = CellBilinear::new(ns, nb, 0, 0)?;
    let (kb_min, kb) = cell_offsets(nb);
    let (ks_min, ks) = cell_offsets(ns);
    let rb: [usize; 3] = std::array::from_fn(|a| if real(a) { kb } else { 1 });
    let rs: [usize; 3] = std::array::from_fn(|a| if real(a) { ks } else { 1 });
    // tab[a][aj][al]
    let tab: [Vec<f64>; 3] = std::array::from_fn(|a| if real(a) { cb.data.clone() } else { vec![1.0] });
    let lin: Vec<f64> = (0..kb)
        .map(|i| crate::kernels::integrate_piecewise(0.0, 1.0, nb, |x| bspline(nb, x - (kb_min + i as isize) as f64)))
        .collect();
    let occ = spec.domain.occupancy3();
    let vol = g.cell_volume();
    let q = source.data();
    let mut t = vec![0.0; slots.iter().product()];
    let mut win = vec![0.0; rs.iter().product()];
    let mut s2 = vec![0.0; rs[0] * rs[1] * rb[2]];
    let mut s1 = vec![0.0; rs[0] * rb[1] * rb[2]];
    let mut s0 = vec![0.0; rb[0] * rb[1] * rb[2]];
    let base = |a: usize, j: isize, min: isize, pad: usize| -> usize {
        if real(a) {
            (j + min + pad as isize) as usize
        } else {
            0
        }
    };
    for j0 in 0..cells[0] as isize {
        for j1 in 0..cells[1] as isize {
            for j2 in 0..cells[2] as isize {
                let j = [j0, j1, j2];
                if !occ.get(j) {
                    continue;
                }
                let qb: [usize; 3] = std::array::from_fn(|a| base(a, j[a], ks_min, ns / 2));
                let mut p = 0;
                for i0 in 0..rs[0] {
                    for i1 in 0..rs[1] {
                        let row = ((qb[0] + i0) * qslots[1] + qb[1] + i1) * qslots[2] + qb[2];
                        for i2 in 0..rs[2] {
                            win[p] = q[row + i2];
                            p += 1;
                        }
                    }
                }
                // Staged contraction of the source window against the cell tables.
                for p01 in 0..rs[0] * rs[1] {
                    for l2 in 0..rb[2] {
                        s2[p01 * rb[2] + l2] = (0..rs[2]).map(|i| tab[2][i * rb[2] + l2] * win[p01 * rs[2] + i]).sum();
                    }
                }
                for i0 in 0..rs[0] {
                    for l1 in 0..rb[1] {
                        for l2 in 0..rb[2] {
                            s1[(i0 * rb[1] + l1) * rb[2] + l2] = (0..rs[1])
                                .map(|i| tab[1][i * rb[1] + l1] * s2[(i0 * rs[1] + i) * rb[2] + l2])
                                .sum();
                        }
                    }
                }
                for l0 in 0..rb[0] {
                    for l12 in 0..rb[1] * rb[2] {
                        s0[l0 * rb[1] * rb[2] + l12] =
                            (0..rs[0]).map(|i| tab[0][i * rb[0] + l0] * s1[i * rb[1] * rb[2] + l12]).sum();
                    }
                }
                let lb: [usize; 3] = std::array::from_fn(|a| base(a, j[a], kb_min, nb / 2));
                for l0 in 0..rb[0] {
                    for l1 in 0..rb[1] {
                        let row = ((lb[0] + l0) * slots[1] + lb[1] + l1) * slots[2] + lb[2];
                        for l2 in 0..rb[2] {
                            t[row + l2] += vol * s0[(l0 * rb[1] + l1) * rb[2] + l2];
                        }
                    }
                }
                // Penalty loads on exposed faces.
                for a in 3 - dim..3 {
                    for side in [Side::Low, Side::High] {
                        if !occ.exposed(j, a, side) {
                            continue;
                        }
                        let mut nbr = j;
                        nbr[a] += if side == Side::Low { -1 } else { 1 };
                        let load = if nbr[a] < 0 || nbr[a] >= cells[a] as isize {
                            bc.loads.face(a + dim - 3, side)
                        } else {
                            bc.loads.interior
                        };
                        if load == 0.0 {
                            continue;
                        }
                        let xf = if side == Side::Low { 0.0 } else { 1.0 };
                        let coef = load * vol / h3[a];
                        for l0 in 0..rb[0] {
                            for l1 in 0..rb[1] {
                                for l2 in 0..rb[2] {
                                    let l = [l0, l1, l2];
                                    let mut v = coef;
                                    for i in 3 - dim..3 {
                                        v *= if i == a {
                                            bspline(nb, xf - (kb_min + l[i] as isize) as f64)
                                        } else {
                                            lin[l[i]]
                                        };
                                    }
                                    let row = ((lb[0] + l0) * slots[1] + lb[1] + l1) * slots[2] + lb[2] + l2;
                                    t[row] += v;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    CoeffTensor::from_vec(g.coeff_extents(nb), t)
}

/// Operator, right-hand side and bookkeeping of one problem.
#[derive(Debug, Clone)]
pub struct AssembledSystem<T: Real = f64> {
    pub operator: OperatorHandle<T>,
    pub rhs: CoeffTensor<T>,
    pub inputs: SplineInputs,
    pub bc: BcRealization,
}

/// Settings for [`solve_problem`].
#[derive(Debug, Clone, Default)]
pub struct RunConfig {
    pub solve: SolveConfig,
    pub operator: OperatorConfig,
}

/// Builds the operator and right-hand side in precision `T`.
pub fn assemble_system<T: Real>(spec: &ProblemSpec, cfg: &OperatorConfig) -> Result<AssembledSystem<T>> {
    let inputs = transform_inputs(spec)?;
    let bc = realize_bc(spec)?;
    let rhs = assemble_rhs(spec, &inputs.source, &bc)?;
    let disc = Discretization {
        domain: spec.domain.clone(),
        nb: spec.nb,
        np: spec.np,
        diffusion: inputs.diffusion.cast::<T>(),
        absorption: inputs.absorption.cast::<T>(),
        boundary: bc.weights.clone(),
    };
    let operator = build_operator(disc, cfg)?;
    Ok(AssembledSystem {
        operator,
        rhs: rhs.cast::<T>(),
        inputs,
        bc,
    })
}

/// Result of [`solve_problem`].
#[derive(Debug, Clone)]
pub struct Solution {
    /// Spline coefficients (padded extents).
    pub field: SplineField<f64>,
    /// Solution values at the grid nodes.
    pub samples: CoeffTensor<f64>,
    pub report: SolveReport,
    pub node_classes: Option<NodeClassification>,
    pub clamped: usize,
    pub coarse: Option<CoarseReport>,
    pub operator_stats: OpStats,
    pub strategy: Strategy,
}

impl Solution {
    pub fn coefficients(&self) -> &CoeffTensor<f64> {
        self.field.coefficients()
    }
}

/// Transform, assemble, solve and sample the solution at the nodes.
pub fn solve_problem(spec: &ProblemSpec, cfg: &RunConfig) -> Result<Solution> {
    match spec.precision {
        Precision::F64 => solve_typed::<f64>(spec, cfg, None),
        Precision::F32 => solve_typed::<f32>(spec, cfg, None),
    }
}

/// As [`solve_problem`] starting from coefficients `x0`.
pub fn solve_problem_from(spec: &ProblemSpec, cfg: &RunConfig, x0: &CoeffTensor<f64>) -> Result<Solution> {
    match spec.precision {
        Precision::F64 => solve_typed::<f64>(spec, cfg, Some(x0)),
        Precision::F32 => solve_typed::<f32>(spec, cfg, Some(x0)),
    }
}

fn solve_typed<T: Real>(spec: &ProblemSpec, cfg: &RunConfig, x0: Option<&CoeffTensor<f64>>) -> Result<Solution> {
    let start = Instant::now();
    let (init, coarse) = match (x0, cfg.solve.coarse_init) {
        (Some(x), _) => (Some(x.cast::<T>()), None),
        (None, Some(f)) => {
            let (c, rep) = coarse_initialize(spec, f, cfg)?;
            (Some(c.cast::<T>()), Some(rep))
        }
        (None, None) => (None, None),
    };
    let sys = assemble_system::<T>(spec, &cfg.operator)?;
    let (c, mut report) = pcg_from(&sys.operator, &sys.rhs, init.as_ref(), &cfg.solve)?;
    report.seconds = start.elapsed().as_secs_f64();
    let basis = spec.grid().basis(spec.nb)?;
    let field = SplineField::from_coefficients(c.cast::<f64>(), &basis, spec.grid().origin().to_vec())?;
    let samples = field.sample_nodes();
    Ok(Solution {
        samples,
        field,
        report,
        node_classes: sys.operator.node_classes().cloned(),
        clamped: sys.inputs.clamped,
        coarse,
        operator_stats: sys.operator.flop_byte_report(),
        strategy: sys.operator.strategy(),
    })
}

/// Outcome of a coarse-grid initialization.
#[derive(Debug, Clone)]
pub struct CoarseReport {
    pub factor: usize,
    pub coarse_nodes: Vec<usize>,
    /// The coarse grid extends past the fine grid because cells were not divisible.
    pub padded: bool,
    pub iterations: usize,
    pub seconds: f64,
}

/// Solves on a grid coarsened by `factor` and prolongates the result to
/// fine-grid coefficients (spline evaluation at fine nodes, then the direct transform).
pub fn coarse_initialize(spec: &ProblemSpec, factor: usize, cfg: &RunConfig) -> Result<(CoeffTensor<f64>, CoarseReport)> {
    if factor < 2 {
        return Err(TbsError::Configuration(format!("coarse factor must be >= 2, got {factor}")));
    }
    let start = Instant::now();
    let fine = spec.grid();
    let dim = fine.dim();
    let fine_cells = fine.cells();
    let coarse_cells: Vec<usize> = fine_cells.iter().map(|c| c.div_ceil(factor)).collect();
    let padded = fine_cells.iter().any(|c| c % factor != 0);
    if padded {
        log::info!("coarse grid padded: fine cells {fine_cells:?} not divisible by {factor}");
    }
    let coarse_nodes: Vec<usize> = coarse_cells.iter().map(|c| c + 1).collect();
    let coarse_grid = Grid::new(
        coarse_nodes.clone(),
        fine.step().iter().map(|h| h * factor as f64).collect(),
        fine.origin().to_vec(),
    )?;
    let domain = match &spec.domain {
        Domain::Box(_) => Domain::boxed(coarse_grid.clone()),
        Domain::Mask(m) => {
            let fc3 = embed3(&fine_cells);
            let cc3 = embed3(&coarse_cells);
            let mut occ = vec![false; cc3.iter().product()];
            let f = |a: usize| if a >= 3 - dim { factor } else { 1 };
            for i in 0..fc3[0] {
                for j in 0..fc3[1] {
                    for k in 0..fc3[2] {
                        if m.occupancy()[(i * fc3[1] + j) * fc3[2] + k] {
                            occ[((i / f(0)) * cc3[1] + j / f(1)) * cc3[2] + k / f(2)] = true;
                        }
                    }
                }
            }
            Domain::Mask(MaskDomain::new(coarse_grid.clone(), occ)?)
        }
    };
    // Restrict the inputs by evaluating their fine splines at the coarse nodes.
    let inputs = transform_inputs(spec)?;
    let restrict = |coeffs: &CoeffTensor<f64>, degree: usize| -> Result<FieldSpec> {
        let field = SplineField::from_coefficients(coeffs.clone(), &fine.basis(degree)?, fine.origin().to_vec())?;
        let hi: Vec<f64> = fine.origin().iter().zip(fine.lengths()).map(|(o, l)| o + l).collect();
        let data = node_positions(&coarse_grid)
            .map(|x| {
                let p: Vec<f64> = x.iter().zip(fine.origin()).zip(&hi).map(|((v, lo), hi)| v.clamp(*lo, *hi)).collect();
                field.eval(&p)
            })
            .collect::<Result<Vec<f64>>>()?;
        Ok(FieldSpec::Sampled(CoeffTensor::from_vec(coarse_nodes.clone(), data)?))
    };
    let coarse_spec = ProblemSpec {
        domain,
        diffusion: restrict(&inputs.diffusion, spec.np)?,
        absorption: restrict(&inputs.absorption, spec.np)?,
        source: restrict(&inputs.source, spec.ns)?,
        projection: ProjectionMode::Interpolation,
        ..spec.clone()
    };
    let mut coarse_cfg = cfg.clone();
    coarse_cfg.solve.coarse_init = None;
    let sol = solve_problem(&coarse_spec, &coarse_cfg)?;
    // Prolongate: coarse spline at the fine nodes, then interpolate.
    let samples: Vec<f64> = node_positions(fine)
        .map(|x| sol.field.eval(&x))
        .collect::<Result<Vec<f64>>>()?;
    let samples = CoeffTensor::from_vec(fine.nodes().to_vec(), samples)?;
    let basis: BSplineBasis = fine.basis(spec.nb)?;
    let c = interpolation_coefficients(&samples, &basis, Extension::Mirror)?;
    Ok((
        c,
        CoarseReport {
            factor,
            coarse_nodes,
            padded,
            iterations: sol.report.iterations,
            seconds: start.elapsed().as_secs_f64(),
        },
    ))
}
