//! Jacobi-preconditioned conjugate gradients with deterministic reductions,
//! and coarse-grid initialization.

use std::time::Instant;

use rayon::prelude::*;

use crate::error::{Result, TbsError};
use crate::operator::{jacobi_diagonal, LinearOperator, Parallelism, SparseMatrixOperator};
use crate::real::Real;
use crate::tensor::CoeffTensor;

/// Elements per partial sum of a deterministic dot product.
pub const DOT_CHUNK: usize = 1024;
/// Residual growth (relative to the initial residual) treated as divergence.
pub const DIVERGENCE_FACTOR: f64 = 1e3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preconditioner {
    None,
    #[default]
    Jacobi,
}

impl std::str::FromStr for Preconditioner {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "none" => Ok(Preconditioner::None),
            "jacobi" => Ok(Preconditioner::Jacobi),
            other => Err(format!("unknown preconditioner '{other}' (expected none or jacobi)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolveConfig {
    /// Target for `‖F(c) − t‖ / ‖t‖`.
    pub tol: f64,
    pub max_iter: usize,
    pub precond: Preconditioner,
    /// Coarse-grid reduction factor for the initial guess.
    pub coarse_init: Option<usize>,
    pub record_history: bool,
}

impl Default for SolveConfig {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 10_000,
            precond: Preconditioner::Jacobi,
            coarse_init: None,
            record_history: false,
        }
    }
}

impl SolveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) {
            return Err(TbsError::Configuration(format!("tol must be > 0, got {}", self.tol)));
        }
        if self.max_iter == 0 {
            return Err(TbsError::Configuration("max_iter must be >= 1".into()));
        }
        if let Some(f) = self.coarse_init {
            if f < 2 {
                return Err(TbsError::Configuration(format!("coarse factor must be >= 2, got {f}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HistoryEntry {
    pub iteration: usize,
    /// `‖r‖ / ‖t‖`.
    pub relative_residual: f64,
    /// `sqrt(rᵀ M⁻¹ r) / ‖t‖`.
    pub preconditioned: f64,
}

#[derive(Debug, Clone, Default)]
pub struct SolveReport {
    pub iterations: usize,
    pub relative_residual: f64,
    pub converged: bool,
    pub history: Vec<HistoryEntry>,
    pub seconds: f64,
    /// Active unknowns whose diagonal was not positive.
    pub diagonal_warnings: Vec<usize>,
}

impl SolveReport {
    /// History as CSV lines `iteration,residual,preconditioned`.
    pub fn history_csv(&self) -> String {
        let mut s = String::from("iteration,residual,preconditioned\n");
        for h in &self.history {
            s.push_str(&format!("{},{:e},{:e}\n", h.iteration, h.relative_residual, h.preconditioned));
        }
        s
    }
}

/// Sum of `a[i]·b[i]` in f64 with a fixed reduction order: partial sums over
/// chunks of [`DOT_CHUNK`], then a pairwise tree. Bitwise independent of the
/// worker count.
pub fn deterministic_dot<T: Real>(a: &[T], b: &[T], par: Option<&Parallelism>) -> f64 {
    let chunk = |(x, y): (&[T], &[T])| -> f64 {
        x.iter().zip(y).map(|(&u, &v)| u.as_f64() * v.as_f64()).sum()
    };
    let partials: Vec<f64> = match par {
        Some(p) if p.threads() > 1 => p.install(|| {
            a.par_chunks(DOT_CHUNK)
                .zip(b.par_chunks(DOT_CHUNK))
                .map(chunk)
                .collect()
        }),
        _ => a.chunks(DOT_CHUNK).zip(b.chunks(DOT_CHUNK)).map(chunk).collect(),
    };
    pairwise(&partials)
}

fn pairwise(v: &[f64]) -> f64 {
    match v.len() {
        0 => 0.0,
        1 => v[0],
        n => pairwise(&v[..n / 2]) + pairwise(&v[n / 2..]),
    }
}

fn map2<T: Real>(par: Option<&Parallelism>, out: &mut [T], src: &[T], f: impl Fn(&mut T, T) + Sync + Send) {
    match par {
        Some(p) if p.threads() > 1 => p.install(|| {
            out.par_chunks_mut(DOT_CHUNK)
                .zip(src.par_chunks(DOT_CHUNK))
                .for_each(|(o, s)| o.iter_mut().zip(s).for_each(|(o, &s)| f(o, s)))
        }),
        _ => out.iter_mut().zip(src).for_each(|(o, &s)| f(o, s)),
    }
}

/// Solves `A c = t` from a zero initial guess.
pub fn pcg<T: Real>(
    op: &impl LinearOperator<T>,
    rhs: &CoeffTensor<T>,
    cfg: &SolveConfig,
) -> Result<(CoeffTensor<T>, SolveReport)> {
    pcg_from(op, rhs, None, cfg)
}

/// Solves `A c = t` from `x0` (zero if `None`).
pub fn pcg_from<T: Real>(
    op: &impl LinearOperator<T>,
    rhs: &CoeffTensor<T>,
    x0: Option<&CoeffTensor<T>>,
    cfg: &SolveConfig,
) -> Result<(CoeffTensor<T>, SolveReport)> {
    cfg.validate()?;
    let n = op.len();
    if rhs.len() != n {
        return Err(TbsError::ExtentMismatch {
            expected: vec![n],
            actual: rhs.extents().to_vec(),
        });
    }
    rhs.ensure_finite()?;
    let start = Instant::now();
    let par = op.parallelism();
    let extents = rhs.extents().to_vec();
    let b = rhs.data();
    let bnorm = deterministic_dot(b, b, par).sqrt();
    let mut report = SolveReport::default();
    if bnorm == 0.0 {
        report.converged = true;
        report.seconds = start.elapsed().as_secs_f64();
        return Ok((CoeffTensor::zeros(extents), report));
    }
    let mut x = match x0 {
        Some(x0) => {
            x0.check_extents(&extents)?;
            x0.ensure_finite()?;
            x0.data().to_vec()
        }
        None => vec![T::zero(); n],
    };
    let inv_diag: Option<Vec<T>> = match cfg.precond {
        Preconditioner::None => None,
        Preconditioner::Jacobi => {
            let (diag, bad) = jacobi_diagonal(op);
            report.diagonal_warnings = bad;
            Some(
                diag.iter()
                    .map(|&d| if d.as_f64() > 0.0 { T::one() / d } else { T::one() })
                    .collect(),
            )
        }
    };
    let mut r = vec![T::zero(); n];
    let mut ap = vec![T::zero(); n];
    if x0.is_some() {
        op.apply_into(&x, &mut ap);
        r.iter_mut().zip(b).zip(&ap).for_each(|((r, &b), &a)| *r = b - a);
    } else {
        r.copy_from_slice(b);
    }
    let precondition = |r: &[T], z: &mut [T]| match &inv_diag {
        Some(m) => {
            z.copy_from_slice(r);
            map2(par, z, m, |z, m| *z *= m);
        }
        None => z.copy_from_slice(r),
    };
    let mut z = vec![T::zero(); n];
    precondition(&r, &mut z);
    let mut rz = deterministic_dot(&r, &z, par);
    let mut rel = deterministic_dot(&r, &r, par).sqrt() / bnorm;
    let initial = rel;
    if cfg.record_history {
        report.history.push(HistoryEntry {
            iteration: 0,
            relative_residual: rel,
            preconditioned: rz.max(0.0).sqrt() / bnorm,
        });
    }
    let mut p = z.clone();
    let mut it = 0;
    while rel > cfg.tol && it < cfg.max_iter {
        op.apply_into(&p, &mut ap);
        let pap = deterministic_dot(&p, &ap, par);
        if !(pap > 0.0) {
            return Err(TbsError::IndefiniteOperator {
                iteration: it,
                curvature: pap,
            });
        }
        let alpha = rz / pap;
        let a = T::of(alpha);
        map2(par, &mut x, &p, |x, p| *x += a * p);
        map2(par, &mut r, &ap, |r, q| *r -= a * q);
        it += 1;
        rel = deterministic_dot(&r, &r, par).sqrt() / bnorm;
        if !rel.is_finite() || rel > DIVERGENCE_FACTOR * initial.max(1.0) {
            return Err(TbsError::Divergence {
                iteration: it,
                growth: rel / initial,
            });
        }
        precondition(&r, &mut z);
        let rz_new = deterministic_dot(&r, &z, par);
        if cfg.record_history {
            report.history.push(HistoryEntry {
                iteration: it,
                relative_residual: rel,
                preconditioned: rz_new.max(0.0).sqrt() / bnorm,
            });
        }
        let beta = T::of(rz_new / rz);
        rz = rz_new;
        map2(par, &mut p, &z, |p, z| *p = z + beta * *p);
    }
    report.iterations = it;
    report.relative_residual = rel;
    report.converged = rel <= cfg.tol;
    report.seconds = start.elapsed().as_secs_f64();
    if !report.converged {
        log::warn!("pcg stopped after {it} iterations at relative residual {rel:e}");
    }
    Ok((CoeffTensor::from_raw(extents, x), report))
}

/// Dense symmetric matrix, mainly for oracles and small systems.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    pub n: usize,
    pub data: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(n: usize) -> Self {
        Self {
            n,
            data: vec![0.0; n * n],
        }
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.n + j] = v;
    }

    /// Solves `A x = b` by Gaussian elimination with partial pivoting.
    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>> {
        let n = self.n;
        let mut a = self.data.clone();
        let mut x = b.to_vec();
        for col in 0..n {
            let piv = (col..n)
                .max_by(|&i, &j| a[i * n + col].abs().total_cmp(&a[j * n + col].abs()))
                .unwrap_or(col);
            if a[piv * n + col] == 0.0 {
                return Err(TbsError::InputValidation("singular matrix".into()));
            }
            if piv != col {
                for k in 0..n {
                    a.swap(col * n + k, piv * n + k);
                }
                x.swap(col, piv);
            }
            for row in col + 1..n {
                let f = a[row * n + col] / a[col * n + col];
                if f != 0.0 {
                    for k in col..n {
                        a[row * n + k] -= f * a[col * n + k];
                    }
                    x[row] -= f * x[col];
                }
            }
        }
        for col in (0..n).rev() {
            let s: f64 = (col + 1..n).map(|k| a[col * n + k] * x[k]).sum();
            x[col] = (x[col] - s) / a[col * n + col];
        }
        Ok(x)
    }
}

impl LinearOperator<f64> for DenseMatrix {
    fn len(&self) -> usize {
        self.n
    }

    fn apply_into(&self, x: &[f64], y: &mut [f64]) {
        for (i, yi) in y.iter_mut().enumerate() {
            *yi = self.data[i * self.n..(i + 1) * self.n]
                .iter()
                .zip(x)
                .map(|(a, b)| a * b)
                .sum();
        }
    }

    fn diagonal(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.get(i, i)).collect()
    }
}

/// Symmetric positive definite band matrix (lower band stored row-wise).
#[derive(Debug, Clone, PartialEq)]
pub struct BandMatrix {
    pub n: usize,
    /// Number of sub-diagonals.
    pub bandwidth: usize,
    /// `data[i·(bandwidth+1) + (bandwidth - (i - j))]` holds `A[i][j]` for `i - bandwidth <= j <= i`.
    data: Vec<f64>,
}

impl BandMatrix {
    pub fn zeros(n: usize, bandwidth: usize) -> Self {
        Self {
            n,
            bandwidth,
            data: vec![0.0; n * (bandwidth + 1)],
        }
    }

    /// Lower band of a sparse operator; rows without entries get a unit diagonal.
    pub fn from_sparse(op: &SparseMatrixOperator<f64>) -> Self {
        let n = op.rows();
        let bw = (0..n)
            .flat_map(|i| op.row(i).map(move |(j, _)| i.abs_diff(j)))
            .max()
            .unwrap_or(0);
        let mut m = Self::zeros(n, bw);
        for i in 0..n {
            let mut any = false;
            for (j, v) in op.row(i) {
                any |= v != 0.0;
                if j <= i {
                    m.set(i, j, v);
                }
            }
            if !any {
                m.set(i, i, 1.0);
            }
        }
        m
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (i, j) = if i >= j { (i, j) } else { (j, i) };
        if i - j > self.bandwidth {
            0.0
        } else {
            self.data[i * (self.bandwidth + 1) + self.bandwidth - (i - j)]
        }
    }

    /// Sets `A[i][j]` for `j <= i` within the band.
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        assert!(j <= i && i - j <= self.bandwidth, "entry ({i}, {j}) outside the lower band");
        self.data[i * (self.bandwidth + 1) + self.bandwidth - (i - j)] = v;
    }

    /// Solves `A x = b` by band Cholesky factorization.
    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>> {
        let (n, w) = (self.n, self.bandwidth);
        if b.len() != n {
            return Err(TbsError::ExtentMismatch {
                expected: vec![n],
                actual: vec![b.len()],
            });
        }
        let mut l = self.data.clone();
        let at = |i: usize, j: usize| i * (w + 1) + w - (i - j);
        for i in 0..n {
            let j0 = i.saturating_sub(w);
            for j in j0..=i {
                let k0 = j0.max(j.saturating_sub(w));
                let mut s = l[at(i, j)];
                for k in k0..j {
                    s -= l[at(i, k)] * l[at(j, k)];
                }
                if i == j {
                    if !(s > 0.0) {
                        return Err(TbsError::IndefiniteOperator {
                            iteration: i,
                            curvature: s,
                        });
                    }
                    l[at(i, i)] = s.sqrt();
                } else {
                    l[at(i, j)] = s / l[at(j, j)];
                }
            }
        }
        let mut x = b.to_vec();
        for i in 0..n {
            let mut s = x[i];
            for k in i.saturating_sub(w)..i {
                s -= l[at(i, k)] * x[k];
            }
            x[i] = s / l[at(i, i)];
        }
        for i in (0..n).rev() {
            let mut s = x[i];
            for k in i + 1..(i + w + 1).min(n) {
                s -= l[at(k, i)] * x[k];
            }
            x[i] = s / l[at(i, i)];
        }
        Ok(x)
    }
}

pub use crate::pde::{coarse_initialize, CoarseReport};
