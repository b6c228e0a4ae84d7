//! System operator `F(c)_l = Σ_k c_k P^{kl}` with
//! `P^{kl} = Σ_m d_m w^{klm} + Σ_m μ_m f^{klm} + Σ_faces ρ_f h_f^{kl}`.
//!
//! Three realizations share one interface:
//! - [`OnTheFlyOperator`] contracts the separable kernels with the fields at
//!   every application (memory O(fields));
//! - [`BlockTensorOperator`] stores the contracted stencil of every node;
//! - [`SparseMatrixOperator`] is a CSR matrix assembled cell by cell.
//!
//! Problems of dimension < 3 are embedded in three axes; trivial axes have a
//! single slot and 1×1 tables.

use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;

use crate::bspline::bspline;
use crate::domain::{classify_nodes, Domain, NodeClass, NodeClassification, Occupancy};
use crate::error::{Result, TbsError};
use crate::kernels::{
    cell_offsets, param_reach, truncated_bilinear, truncated_trilinear, AxisTables, CellBilinear,
    CellTrilinear, OffsetTable, Side,
};
use crate::real::Real;
use crate::tensor::{embed3, CoeffTensor};

/// Which realization of the operator to build.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Sparse,
    #[serde(alias = "block_tensor", alias = "block-tensor")]
    Block,
    #[serde(alias = "on_the_fly", alias = "on-the-fly")]
    Onthefly,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::Sparse, Strategy::Block, Strategy::Onthefly];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Sparse => "sparse",
            Strategy::Block => "block",
            Strategy::Onthefly => "onthefly",
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "sparse" | "csr" => Ok(Strategy::Sparse),
            "block" | "blocktensor" => Ok(Strategy::Block),
            "onthefly" | "matrixfree" => Ok(Strategy::Onthefly),
            other => Err(format!(
                "unknown strategy '{other}' (expected sparse, block or onthefly)"
            )),
        }
    }
}

/// Default block-tensor memory budget in bytes.
pub const DEFAULT_MEMORY_BUDGET: u64 = 16_000_000_000;
/// Default per-block working-set target in bytes.
pub const DEFAULT_BLOCK_BYTES: usize = 64 * 1024;

/// Worker pool and block sizing shared by all parallel primitives.
#[derive(Clone)]
pub struct Parallelism {
    pool: Arc<rayon::ThreadPool>,
    threads: usize,
    pub block_bytes: usize,
}

impl std::fmt::Debug for Parallelism {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Parallelism")
            .field("threads", &self.threads)
            .field("block_bytes", &self.block_bytes)
            .finish()
    }
}

impl Parallelism {
    pub fn new(threads: usize) -> Result<Self> {
        let threads = threads.max(1);
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| TbsError::Configuration(format!("thread pool: {e}")))?;
        Ok(Self {
            pool: Arc::new(pool),
            threads,
            block_bytes: DEFAULT_BLOCK_BYTES,
        })
    }

    pub fn single() -> Self {
        Self::new(1).expect("single-thread pool")
    }

    pub fn with_block_bytes(mut self, bytes: usize) -> Self {
        self.block_bytes = bytes.max(1);
        self
    }

    pub fn threads(&self) -> usize {
        self.threads
    }

    pub fn install<R: Send>(&self, f: impl FnOnce() -> R + Send) -> R {
        self.pool.install(f)
    }
}

/// Robin-type surface weights `ρ` per face.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryWeights {
    /// Grid-edge faces, indexed `2·axis + side` (low = 0).
    pub edge: Vec<f64>,
    /// Exposed faces between occupied and unoccupied cells (mask domains).
    pub interior: f64,
}

impl BoundaryWeights {
    pub fn none(dim: usize) -> Self {
        Self {
            edge: vec![0.0; 2 * dim],
            interior: 0.0,
        }
    }

    pub fn uniform(dim: usize, rho: f64) -> Self {
        Self {
            edge: vec![rho; 2 * dim],
            interior: rho,
        }
    }

    pub fn face(&self, axis: usize, side: Side) -> f64 {
        self.edge[2 * axis + (side == Side::High) as usize]
    }
}

/// Everything the operator needs: domain, degrees, coefficient fields and
/// boundary weights. Field extents are the degree-`np` coefficient extents.
#[derive(Debug, Clone)]
pub struct Discretization<T: Real = f64> {
    pub domain: Domain,
    pub nb: usize,
    pub np: usize,
    pub diffusion: CoeffTensor<T>,
    pub absorption: CoeffTensor<T>,
    pub boundary: BoundaryWeights,
}

impl<T: Real> Discretization<T> {
    /// Constant `D` and `μ_a` on `domain`.
    pub fn constant(domain: Domain, nb: usize, np: usize, d: f64, mu: f64, boundary: BoundaryWeights) -> Self {
        let ext = domain.grid().coeff_extents(np);
        Self {
            domain,
            nb,
            np,
            diffusion: CoeffTensor::filled(ext.clone(), T::of(d)),
            absorption: CoeffTensor::filled(ext, T::of(mu)),
            boundary,
        }
    }

    pub fn coeff_extents(&self) -> Vec<usize> {
        self.domain.grid().coeff_extents(self.nb)
    }

    pub fn validate(&self) -> Result<()> {
        crate::bspline::check_degree(self.nb)?;
        crate::bspline::check_degree(self.np)?;
        if self.nb == 0 {
            return Err(TbsError::Smoothness { degree: 0, order: 1 });
        }
        let ext = self.domain.grid().coeff_extents(self.np);
        self.diffusion.check_extents(&ext)?;
        self.absorption.check_extents(&ext)?;
        self.diffusion.ensure_finite()?;
        self.absorption.ensure_finite()?;
        let dim = self.domain.grid().dim();
        if self.boundary.edge.len() != 2 * dim {
            return Err(TbsError::InputValidation(format!(
                "{} boundary weights for {} faces",
                self.boundary.edge.len(),
                2 * dim
            )));
        }
        if self
            .boundary
            .edge
            .iter()
            .chain([&self.boundary.interior])
            .any(|r| !(r.is_finite() && *r >= 0.0))
        {
            return Err(TbsError::InputValidation("boundary weights must be finite and >= 0".into()));
        }
        Ok(())
    }
}

/// Analytic operation counts and measured wall time of one application.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct OpStats {
    pub flops: f64,
    pub bytes_read: f64,
    pub bytes_written: f64,
    pub seconds: f64,
}

impl OpStats {
    pub fn gflops(&self) -> f64 {
        if self.seconds > 0.0 {
            self.flops / self.seconds * 1e-9
        } else {
            0.0
        }
    }
}

/// A symmetric linear operator on a flat coefficient vector.
pub trait LinearOperator<T: Real>: Sync {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `y = A x` without validation.
    fn apply_into(&self, x: &[T], y: &mut [T]);

    fn diagonal(&self) -> Vec<T>;

    /// Unknowns excluded from the system (their rows and columns are zero).
    fn inactive(&self, _index: usize) -> bool {
        false
    }

    fn parallelism(&self) -> Option<&Parallelism> {
        None
    }
}

/// Geometry of the coefficient lattices on the embedded 3-D grid.
#[derive(Debug, Clone)]
struct Layout {
    dim: usize,
    nb: usize,
    np: usize,
    pb: isize,
    pp: isize,
    slots: [usize; 3],
    pslots: [usize; 3],
    cells: [usize; 3],
    h: [f64; 3],
    vol: f64,
}

impl Layout {
    fn new(domain: &Domain, nb: usize, np: usize) -> Self {
        let g = domain.grid();
        let dim = g.dim();
        let nodes = embed3(g.nodes());
        let pb = nb / 2;
        let pp = np / 2;
        let mut slots = [1; 3];
        let mut pslots = [1; 3];
        let mut cells = [1; 3];
        let mut h = [1.0; 3];
        for a in 3 - dim..3 {
            slots[a] = nodes[a] + 2 * pb;
            pslots[a] = nodes[a] + 2 * pp;
            cells[a] = nodes[a] - 1;
            h[a] = g.step()[a + dim - 3];
        }
        Self {
            dim,
            nb,
            np,
            pb: pb as isize,
            pp: pp as isize,
            slots,
            pslots,
            cells,
            h,
            vol: g.cell_volume(),
        }
    }

    fn real(&self, a: usize) -> bool {
        a >= 3 - self.dim
    }

    fn total(&self) -> usize {
        self.slots.iter().product()
    }

    /// Stencil rows per axis (`2nb+1` on real axes).
    fn k(&self) -> [usize; 3] {
        std::array::from_fn(|a| if self.real(a) { 2 * self.nb + 1 } else { 1 })
    }

    fn kmin(&self) -> [isize; 3] {
        std::array::from_fn(|a| if self.real(a) { -(self.nb as isize) } else { 0 })
    }

    fn mreach(&self) -> isize {
        param_reach(self.nb, self.np)
    }

    fn m(&self) -> [usize; 3] {
        std::array::from_fn(|a| if self.real(a) { (2 * self.mreach() + 1) as usize } else { 1 })
    }

    fn mmin(&self) -> [isize; 3] {
        std::array::from_fn(|a| if self.real(a) { -self.mreach() } else { 0 })
    }

    fn stiff_scale(&self, a: usize) -> f64 {
        if self.real(a) {
            self.vol / (self.h[a] * self.h[a])
        } else {
            0.0
        }
    }

    fn area(&self, a: usize) -> f64 {
        self.vol / self.h[a]
    }

    fn user_axis(&self, a: usize) -> usize {
        a + self.dim - 3
    }

    /// Grid index of slot `s`.
    fn index(&self, a: usize, s: usize) -> isize {
        if self.real(a) {
            s as isize - self.pb
        } else {
            0
        }
    }

    fn unflatten(&self, flat: usize) -> [usize; 3] {
        let s2 = flat % self.slots[2];
        let r = flat / self.slots[2];
        [r / self.slots[1], r % self.slots[1], s2]
    }
}

/// Scratch buffers for the staged contraction.
struct Scratch<T> {
    dwin: Vec<T>,
    mwin: Vec<T>,
    none2: Vec<T>,
    done2: Vec<T>,
    none1: Vec<T>,
    done1: Vec<T>,
    p: Vec<T>,
}

impl<T: Real> Scratch<T> {
    fn new(rows: [usize; 3], cols: [usize; 3]) -> Self {
        let cprod = cols.iter().product();
        let s2 = cols[0] * cols[1] * rows[2];
        let s1 = cols[0] * rows[1] * rows[2];
        Self {
            dwin: vec![T::zero(); cprod],
            mwin: vec![T::zero(); cprod],
            none2: vec![T::zero(); s2],
            done2: vec![T::zero(); s2],
            none1: vec![T::zero(); s1],
            done1: vec![T::zero(); s1],
            p: vec![T::zero(); rows.iter().product()],
        }
    }
}

/// Fused FMA count of [`contract`] for the given table shapes.
fn contract_fma(rows: [usize; 3], cols: [usize; 3]) -> usize {
    let [r0, r1, r2] = rows;
    let [c0, c1, c2] = cols;
    3 * c0 * c1 * r2 * c2 + 3 * c0 * r1 * r2 * c1 + 2 * r0 * r1 * r2 * c0
}

/// Staged separable contraction of one node's stencil:
/// `P[o] = Σ_a Π_i (i == a ? W_i : F_i) · d + mass · Π_i F_i · μ`,
/// innermost axis first. `w` tables are pre-scaled by their stiffness factor.
/// Tables are row-major `rows[a] × cols[a]`; windows are row-major over `cols`.
#[allow(clippy::too_many_arguments)]
fn contract<T: Real>(
    w: [&[T]; 3],
    f: [&[T]; 3],
    rows: [usize; 3],
    cols: [usize; 3],
    mass: T,
    s: &mut Scratch<T>,
) {
    let [r0, r1, r2] = rows;
    let [c0, c1, c2] = cols;
    // Axis 2.
    for p01 in 0..c0 * c1 {
        let drow = &s.dwin[p01 * c2..(p01 + 1) * c2];
        let mrow = &s.mwin[p01 * c2..(p01 + 1) * c2];
        for o2 in 0..r2 {
            let frow = &f[2][o2 * c2..(o2 + 1) * c2];
            let wrow = &w[2][o2 * c2..(o2 + 1) * c2];
            let mut fd = T::zero();
            let mut wd = T::zero();
            let mut fm = T::zero();
            for i in 0..c2 {
                fd += frow[i] * drow[i];
                wd += wrow[i] * drow[i];
                fm += frow[i] * mrow[i];
            }
            s.none2[p01 * r2 + o2] = fd;
            s.done2[p01 * r2 + o2] = wd + mass * fm;
        }
    }
    // Axis 1.
    let plane = r1 * r2;
    s.none1[..c0 * plane].iter_mut().for_each(|v| *v = T::zero());
    s.done1[..c0 * plane].iter_mut().for_each(|v| *v = T::zero());
    for i0 in 0..c0 {
        for o1 in 0..r1 {
            let out = (i0 * r1 + o1) * r2;
            for i1 in 0..c1 {
                let fv = f[1][o1 * c1 + i1];
                let wv = w[1][o1 * c1 + i1];
                let src = (i0 * c1 + i1) * r2;
                for o2 in 0..r2 {
                    let n2 = s.none2[src + o2];
                    s.none1[out + o2] += fv * n2;
                    s.done1[out + o2] += fv * s.done2[src + o2] + wv * n2;
                }
            }
        }
    }
    // Axis 0.
    s.p.iter_mut().for_each(|v| *v = T::zero());
    for o0 in 0..r0 {
        let out = &mut s.p[o0 * plane..(o0 + 1) * plane];
        for i0 in 0..c0 {
            let fv = f[0][o0 * c0 + i0];
            let wv = w[0][o0 * c0 + i0];
            let done = &s.done1[i0 * plane..(i0 + 1) * plane];
            let none = &s.none1[i0 * plane..(i0 + 1) * plane];
            for j in 0..plane {
                out[j] += fv * done[j] + wv * none[j];
            }
        }
    }
}

/// [`contract`] with compile-time extents for fully 3-D stencils.
fn contract_fixed<T: Real, const K: usize, const M: usize>(
    w: [&[T]; 3],
    f: [&[T]; 3],
    mass: T,
    s: &mut Scratch<T>,
) {
    let dwin: &[T] = &s.dwin[..M * M * M];
    let mwin: &[T] = &s.mwin[..M * M * M];
    let none2: &mut [T] = &mut s.none2[..M * M * K];
    let done2: &mut [T] = &mut s.done2[..M * M * K];
    // Transposed axis-2 tables so the inner loop runs over output rows.
    let mut ft = [[T::zero(); K]; M];
    let mut wt = [[T::zero(); K]; M];
    for o in 0..K {
        for i in 0..M {
            ft[i][o] = f[2][o * M + i];
            wt[i][o] = w[2][o * M + i];
        }
    }
    for p01 in 0..M * M {
        let drow = &dwin[p01 * M..p01 * M + M];
        let mrow = &mwin[p01 * M..p01 * M + M];
        let mut fd = [T::zero(); K];
        let mut wd = [T::zero(); K];
        let mut fm = [T::zero(); K];
        for i in 0..M {
            let (dv, mv) = (drow[i], mrow[i]);
            for o in 0..K {
                fd[o] += ft[i][o] * dv;
                wd[o] += wt[i][o] * dv;
                fm[o] += ft[i][o] * mv;
            }
        }
        for o in 0..K {
            none2[p01 * K + o] = fd[o];
            done2[p01 * K + o] = wd[o] + mass * fm[o];
        }
    }
    let none1: &mut [T] = &mut s.none1[..];
    let done1: &mut [T] = &mut s.done1[..];
    for i0 in 0..M {
        for o1 in 0..K {
            let mut n_acc = [T::zero(); K];
            let mut d_acc = [T::zero(); K];
            for i1 in 0..M {
                let fv = f[1][o1 * M + i1];
                let wv = w[1][o1 * M + i1];
                let src = (i0 * M + i1) * K;
                for o2 in 0..K {
                    let n2 = none2[src + o2];
                    n_acc[o2] += fv * n2;
                    d_acc[o2] += fv * done2[src + o2] + wv * n2;
                }
            }
            let out = (i0 * K + o1) * K;
            none1[out..out + K].copy_from_slice(&n_acc);
            done1[out..out + K].copy_from_slice(&d_acc);
        }
    }
    let p: &mut [T] = &mut s.p[..K * K * K];
    p.iter_mut().for_each(|v| *v = T::zero());
    for o0 in 0..K {
        let out = &mut p[o0 * K * K..(o0 + 1) * K * K];
        for i0 in 0..M {
            let fv = f[0][o0 * M + i0];
            let wv = w[0][o0 * M + i0];
            let done = &done1[i0 * K * K..(i0 + 1) * K * K];
            let none = &none1[i0 * K * K..(i0 + 1) * K * K];
            for j in 0..K * K {
                out[j] += fv * done[j] + wv * none[j];
            }
        }
    }
}

/// Dense per-slot tables of one axis.
#[derive(Debug, Clone)]
struct DenseAxis<T> {
    index: Vec<u16>,
    w: Vec<Vec<T>>,
    f: Vec<Vec<T>>,
    /// Undifferentiated `(nb, nb)` bilinear rows for tangential face factors.
    b_index: Vec<u16>,
    b: Vec<Vec<T>>,
}

fn dense_rows<T: Real>(t: &OffsetTable, scale: f64) -> Vec<T> {
    t.data.iter().map(|&v| T::of(v * scale)).collect()
}

impl<T: Real> DenseAxis<T> {
    fn trivial() -> Self {
        Self {
            index: vec![0],
            w: vec![vec![T::zero()]],
            f: vec![vec![T::one()]],
            b_index: vec![0],
            b: vec![vec![T::one()]],
        }
    }

    fn build(lay: &Layout, a: usize, cw: &CellTrilinear, cf: &CellTrilinear, cb: &CellBilinear) -> Self {
        if !lay.real(a) {
            return Self::trivial();
        }
        let cells = lay.cells[a];
        let pad = lay.pb as usize;
        let tw = AxisTables::build(cells, pad, lay.nb, |l, c| truncated_trilinear(cw, l, c));
        let tf = AxisTables::build(cells, pad, lay.nb, |l, c| truncated_trilinear(cf, l, c));
        let tb = AxisTables::build(cells, pad, lay.nb, |l, c| truncated_bilinear(cb, l, c));
        debug_assert_eq!(tw.index, tf.index);
        let s = lay.stiff_scale(a);
        Self {
            index: tw.index.clone(),
            w: tw.tables.iter().map(|t| dense_rows(t, s)).collect(),
            f: tf.tables.iter().map(|t| dense_rows(t, 1.0)).collect(),
            b_index: tb.index.clone(),
            b: tb.tables.iter().map(|t| dense_rows(t, 1.0)).collect(),
        }
    }
}

/// Surface term of one grid-edge face in separable form.
#[derive(Debug, Clone)]
struct FaceTerm<T> {
    axis: usize,
    /// Normal factors `ρ·area·β(x_f - l - o)β(x_f - l)` per slot; empty when zero.
    normal: Vec<Vec<T>>,
}

/// Cell-level tables of one axis, sliced by the local index of the test function.
#[derive(Debug, Clone)]
struct CellAxis {
    /// Local offsets of the nb functions: `kb_min .. kb_min + kb`.
    kb_min: isize,
    kb: usize,
    kp_min: isize,
    kp: usize,
    /// `w[al]`, `f[al]`: `kb × kp` row-major, `w` pre-scaled.
    w: Vec<Vec<f64>>,
    f: Vec<Vec<f64>>,
    /// Undifferentiated bilinear `[ak][al]`.
    b: Vec<f64>,
}

impl CellAxis {
    fn build(lay: &Layout, a: usize, cw: &CellTrilinear, cf: &CellTrilinear, cb: &CellBilinear) -> Self {
        if !lay.real(a) {
            return Self {
                kb_min: 0,
                kb: 1,
                kp_min: 0,
                kp: 1,
                w: vec![vec![0.0]],
                f: vec![vec![1.0]],
                b: vec![1.0],
            };
        }
        let (kb_min, kb) = cell_offsets(lay.nb);
        let (kp_min, kp) = cell_offsets(lay.np);
        let s = lay.stiff_scale(a);
        let slice = |t: &CellTrilinear, scale: f64| -> Vec<Vec<f64>> {
            (0..kb)
                .map(|il| {
                    let mut out = Vec::with_capacity(kb * kp);
                    for ik in 0..kb {
                        for im in 0..kp {
                            out.push(t.data[(ik * kb + il) * kp + im] * scale);
                        }
                    }
                    out
                })
                .collect()
        };
        Self {
            kb_min,
            kb,
            kp_min,
            kp,
            w: slice(cw, s),
            f: slice(cf, 1.0),
            b: cb.data.clone(),
        }
    }
}

/// Cell-local element assembly shared by the stored-stencil path and the CSR
/// assembler.
struct CellAssembler<'a, T: Real> {
    lay: &'a Layout,
    axes: [CellAxis; 3],
    occ: Occupancy,
    boundary: BoundaryWeights,
    d: &'a [T],
    mu: &'a [T],
}

impl<'a, T: Real> CellAssembler<'a, T> {
    fn new(disc: &'a Discretization<T>, lay: &'a Layout) -> Result<Self> {
        let cw = CellTrilinear::new(lay.nb, lay.np, 1, 1)?;
        let cf = CellTrilinear::new(lay.nb, lay.np, 0, 0)?;
        let cb = CellBilinear::new(lay.nb, lay.nb, 0, 0)?;
        Ok(Self {
            lay,
            axes: std::array::from_fn(|a| CellAxis::build(lay, a, &cw, &cf, &cb)),
            occ: disc.domain.occupancy3(),
            boundary: disc.boundary.clone(),
            d: disc.diffusion.data(),
            mu: disc.absorption.data(),
        })
    }

    fn rows(&self) -> [usize; 3] {
        std::array::from_fn(|a| self.axes[a].kb)
    }

    fn cols(&self) -> [usize; 3] {
        std::array::from_fn(|a| self.axes[a].kp)
    }

    fn scratch(&self) -> Scratch<f64> {
        Scratch::new(self.rows(), self.cols())
    }

    /// Loads the parameter windows of cell `j`.
    fn gather(&self, j: [isize; 3], s: &mut Scratch<f64>) {
        let lay = self.lay;
        let [c0, c1, c2] = self.cols();
        let ps = lay.pslots;
        let base: [isize; 3] = std::array::from_fn(|a| {
            if lay.real(a) {
                j[a] + self.axes[a].kp_min + lay.pp
            } else {
                0
            }
        });
        let mut q = 0;
        for i0 in 0..c0 {
            for i1 in 0..c1 {
                let row = ((base[0] as usize + i0) * ps[1] + base[1] as usize + i1) * ps[2];
                for i2 in 0..c2 {
                    let idx = row + base[2] as usize + i2;
                    s.dwin[q] = self.d[idx].as_f64();
                    s.mwin[q] = self.mu[idx].as_f64();
                    q += 1;
                }
            }
        }
    }

    /// Row of test function `al` (local) on the gathered cell: `P` over local `ak`.
    fn cell_row(&self, al: [usize; 3], s: &mut Scratch<f64>) {
        let w = std::array::from_fn(|a| self.axes[a].w[al[a]].as_slice());
        let f = std::array::from_fn(|a| self.axes[a].f[al[a]].as_slice());
        contract(w, f, self.rows(), self.cols(), self.lay.vol, s);
    }

    /// Robin weight of the face of cell `j` on `(a, side)`, zero if not exposed.
    fn face_weight(&self, j: [isize; 3], a: usize, side: Side) -> f64 {
        if !self.occ.exposed(j, a, side) {
            return 0.0;
        }
        let mut nb = j;
        nb[a] += if side == Side::Low { -1 } else { 1 };
        let on_edge = nb[a] < 0 || nb[a] >= self.lay.cells[a] as isize;
        if on_edge {
            self.boundary.face(self.lay.user_axis(a), side)
        } else {
            self.boundary.interior
        }
    }

    /// Adds the exposed-face terms of cell `j` for test function `al` into `p` (local `ak` layout).
    fn add_faces(&self, j: [isize; 3], al: [usize; 3], p: &mut [f64]) {
        let lay = self.lay;
        let rows = self.rows();
        for a in 3 - lay.dim..3 {
            for side in [Side::Low, Side::High] {
                let rho = self.face_weight(j, a, side);
                if rho == 0.0 {
                    continue;
                }
                // Normal position of the face relative to the cell start.
                let xf = if side == Side::Low { 0.0 } else { 1.0 };
                let ax = &self.axes[a];
                let nl = bspline(lay.nb, xf - (ax.kb_min + al[a] as isize) as f64);
                if nl == 0.0 {
                    continue;
                }
                let coef = rho * lay.area(a) * nl;
                for (q, v) in p.iter_mut().enumerate() {
                    let ak = [q / (rows[1] * rows[2]), (q / rows[2]) % rows[1], q % rows[2]];
                    let mut t = coef * bspline(lay.nb, xf - (ax.kb_min + ak[a] as isize) as f64);
                    if t == 0.0 {
                        continue;
                    }
                    for i in 0..3 {
                        if i != a {
                            let c = &self.axes[i];
                            t *= c.b[ak[i] * c.kb + al[i]];
                        }
                    }
                    *v += t;
                }
            }
        }
    }

    /// Stencil of node `l` (grid indices) summed over its occupied support cells,
    /// on the `K^3` window.
    fn node_stencil(&self, l: [isize; 3], s: &mut Scratch<f64>, out: &mut [f64]) {
        let lay = self.lay;
        let k = lay.k();
        let kmin = lay.kmin();
        out.iter_mut().for_each(|v| *v = 0.0);
        let mut lo = [0isize; 3];
        let mut hi = [0isize; 3];
        for a in 3 - lay.dim..3 {
            let r = crate::kernels::support_cells(lay.nb, l[a], Some(lay.cells[a]));
            lo[a] = *r.start();
            hi[a] = *r.end();
        }
        let rows = self.rows();
        crate::domain::for_cells(lo, hi, |j| {
            if !self.occ.get(j) {
                return;
            }
            let al: [usize; 3] =
                std::array::from_fn(|a| (l[a] - j[a] - self.axes[a].kb_min) as usize);
            self.gather(j, s);
            self.cell_row(al, s);
            let mut p = std::mem::take(&mut s.p);
            self.add_faces(j, al, &mut p);
            for (q, &v) in p.iter().enumerate() {
                if v == 0.0 {
                    continue;
                }
                let ak = [q / (rows[1] * rows[2]), (q / rows[2]) % rows[1], q % rows[2]];
                let mut o = [0usize; 3];
                let mut inside = true;
                for a in 0..3 {
                    let off = j[a] + self.axes[a].kb_min + ak[a] as isize - l[a] - kmin[a];
                    if off < 0 || off >= k[a] as isize {
                        inside = false;
                        break;
                    }
                    o[a] = off as usize;
                }
                if inside {
                    out[(o[0] * k[1] + o[1]) * k[2] + o[2]] += v;
                }
            }
            s.p = p;
        });
    }
}

const TAG_SEPARABLE: u32 = u32::MAX;
const TAG_INACTIVE: u32 = u32::MAX - 1;

/// Per-node stencil generator used by the on-the-fly and block-tensor operators.
#[derive(Debug, Clone)]
struct Engine<T: Real> {
    lay: Layout,
    axes: [DenseAxis<T>; 3],
    faces: Vec<FaceTerm<T>>,
    mass: T,
    d: CoeffTensor<T>,
    mu: CoeffTensor<T>,
    /// Mask domains: node tag (separable, inactive or stored index) and stored stencils.
    tags: Option<Vec<u32>>,
    stored: Vec<T>,
    classes: Option<NodeClassification>,
}

impl<T: Real> Engine<T> {
    fn new(disc: Discretization<T>) -> Result<Self> {
        disc.validate()?;
        let lay = Layout::new(&disc.domain, disc.nb, disc.np);
        let cw = CellTrilinear::new(lay.nb, lay.np, 1, 1)?;
        let cf = CellTrilinear::new(lay.nb, lay.np, 0, 0)?;
        let cb = CellBilinear::new(lay.nb, lay.nb, 0, 0)?;
        let axes = std::array::from_fn(|a| DenseAxis::build(&lay, a, &cw, &cf, &cb));
        let k = lay.k();
        let mut faces = Vec::new();
        for a in 3 - lay.dim..3 {
            for side in [Side::Low, Side::High] {
                let rho = disc.boundary.face(lay.user_axis(a), side);
                if rho == 0.0 {
                    continue;
                }
                let xf = if side == Side::Low { 0.0 } else { lay.cells[a] as f64 };
                let coef = rho * lay.area(a);
                let normal = (0..lay.slots[a])
                    .map(|s| {
                        let l = lay.index(a, s) as f64;
                        let bl = bspline(lay.nb, xf - l);
                        if bl == 0.0 {
                            return Vec::new();
                        }
                        (0..k[a])
                            .map(|o| {
                                let off = lay.kmin()[a] + o as isize;
                                T::of(coef * bl * bspline(lay.nb, xf - l - off as f64))
                            })
                            .collect()
                    })
                    .collect();
                faces.push(FaceTerm { axis: a, normal });
            }
        }
        let mut engine = Self {
            mass: T::of(lay.vol),
            axes,
            faces,
            lay,
            d: CoeffTensor::zeros(vec![1]),
            mu: CoeffTensor::zeros(vec![1]),
            tags: None,
            stored: Vec::new(),
            classes: None,
        };
        if let Domain::Mask(_) = disc.domain {
            let classes = classify_nodes(&disc.domain, disc.nb);
            let asm = CellAssembler::new(&disc, &engine.lay)?;
            let kprod: usize = k.iter().product();
            let stored_nodes: Vec<usize> = classes
                .classes
                .iter()
                .enumerate()
                .filter(|(_, c)| **c == NodeClass::Stored)
                .map(|(i, _)| i)
                .collect();
            let lay = &engine.lay;
            let mut stored = vec![T::zero(); stored_nodes.len() * kprod];
            stored
                .par_chunks_mut(kprod)
                .zip(stored_nodes.par_iter())
                .for_each_init(
                    || (asm.scratch(), vec![0.0; kprod]),
                    |(s, buf), (out, &node)| {
                        let sl = lay.unflatten(node);
                        let l = std::array::from_fn(|a| lay.index(a, sl[a]));
                        asm.node_stencil(l, s, buf);
                        for (o, v) in out.iter_mut().zip(buf.iter()) {
                            *o = T::of(*v);
                        }
                    },
                );
            let mut next = 0u32;
            let tags = classes
                .classes
                .iter()
                .map(|c| match c {
                    NodeClass::Separable => TAG_SEPARABLE,
                    NodeClass::Inactive => TAG_INACTIVE,
                    NodeClass::Stored => {
                        next += 1;
                        next - 1
                    }
                })
                .collect::<Vec<_>>();
            // Zero columns of inactive unknowns inside stored stencils.
            if classes.inactive > 0 {
                for (i, &node) in stored_nodes.iter().enumerate() {
                    let sl = lay.unflatten(node);
                    let st = &mut stored[i * kprod..(i + 1) * kprod];
                    for (q, v) in st.iter_mut().enumerate() {
                        if let Some(kf) = neighbor(lay, sl, q) {
                            if tags[kf] == TAG_INACTIVE {
                                *v = T::zero();
                            }
                        }
                    }
                }
            }
            engine.tags = Some(tags);
            engine.stored = stored;
            engine.classes = Some(classes);
        }
        engine.d = disc.diffusion;
        engine.mu = disc.absorption;
        Ok(engine)
    }

    fn kprod(&self) -> usize {
        self.lay.k().iter().product()
    }

    fn scratch(&self) -> Scratch<T> {
        Scratch::new(self.lay.k(), self.lay.m())
    }

    fn tag(&self, flat: usize) -> u32 {
        match &self.tags {
            Some(t) => t[flat],
            None => TAG_SEPARABLE,
        }
    }

    /// Computes the stencil of slot `sl` into `s.p`; returns false for inactive nodes.
    fn stencil(&self, sl: [usize; 3], flat: usize, s: &mut Scratch<T>) -> bool {
        let tag = self.tag(flat);
        if tag == TAG_INACTIVE {
            return false;
        }
        let kprod = self.kprod();
        if tag != TAG_SEPARABLE {
            let start = tag as usize * kprod;
            s.p.copy_from_slice(&self.stored[start..start + kprod]);
            return true;
        }
        let lay = &self.lay;
        let m = lay.m();
        let mmin = lay.mmin();
        let ps = lay.pslots;
        // Gather the parameter windows, zero outside the coefficient lattice.
        let base: [isize; 3] =
            std::array::from_fn(|a| lay.index(a, sl[a]) + mmin[a] + if lay.real(a) { lay.pp } else { 0 });
        let dd = self.d.data();
        let md = self.mu.data();
        let mut q = 0;
        for i0 in 0..m[0] {
            let p0 = base[0] + i0 as isize;
            for i1 in 0..m[1] {
                let p1 = base[1] + i1 as isize;
                let row_ok = p0 >= 0 && p0 < ps[0] as isize && p1 >= 0 && p1 < ps[1] as isize;
                let row = if row_ok {
                    (p0 as usize * ps[1] + p1 as usize) * ps[2]
                } else {
                    0
                };
                for i2 in 0..m[2] {
                    let p2 = base[2] + i2 as isize;
                    if row_ok && p2 >= 0 && p2 < ps[2] as isize {
                        s.dwin[q] = dd[row + p2 as usize];
                        s.mwin[q] = md[row + p2 as usize];
                    } else {
                        s.dwin[q] = T::zero();
                        s.mwin[q] = T::zero();
                    }
                    q += 1;
                }
            }
        }
        let w = std::array::from_fn(|a| self.axes[a].w[self.axes[a].index[sl[a]] as usize].as_slice());
        let f = std::array::from_fn(|a| self.axes[a].f[self.axes[a].index[sl[a]] as usize].as_slice());
        match (lay.dim, lay.k()[2], m[2]) {
            (3, 3, 3) => contract_fixed::<T, 3, 3>(w, f, self.mass, s),
            (3, 3, 5) => contract_fixed::<T, 3, 5>(w, f, self.mass, s),
            (3, 5, 3) => contract_fixed::<T, 5, 3>(w, f, self.mass, s),
            (3, 5, 5) => contract_fixed::<T, 5, 5>(w, f, self.mass, s),
            (3, 5, 7) => contract_fixed::<T, 5, 7>(w, f, self.mass, s),
            (3, 7, 5) => contract_fixed::<T, 7, 5>(w, f, self.mass, s),
            (3, 7, 7) => contract_fixed::<T, 7, 7>(w, f, self.mass, s),
            _ => contract(w, f, lay.k(), m, self.mass, s),
        }
        let k = lay.k();
        for face in &self.faces {
            let a = face.axis;
            let normal = &face.normal[sl[a]];
            if normal.is_empty() {
                continue;
            }
            let tang: [&[T]; 3] = std::array::from_fn(|i| {
                let ax = &self.axes[i];
                ax.b[ax.b_index[sl[i]] as usize].as_slice()
            });
            for o0 in 0..k[0] {
                for o1 in 0..k[1] {
                    for o2 in 0..k[2] {
                        let o = [o0, o1, o2];
                        let mut v = normal[o[a]];
                        for i in 0..3 {
                            if i != a {
                                v *= tang[i][o[i]];
                            }
                        }
                        s.p[(o0 * k[1] + o1) * k[2] + o2] += v;
                    }
                }
            }
        }
        true
    }

    /// FMA count of one node (contraction plus output dot product).
    fn node_fma(&self) -> usize {
        contract_fma(self.lay.k(), self.lay.m()) + self.kprod()
    }

    fn inactive(&self, flat: usize) -> bool {
        self.tag(flat) == TAG_INACTIVE
    }
}

/// Flat index of the neighbor at stencil position `q` of slot `sl`, if in range.
fn neighbor(lay: &Layout, sl: [usize; 3], q: usize) -> Option<usize> {
    let k = lay.k();
    let kmin = lay.kmin();
    let o = [q / (k[1] * k[2]), (q / k[2]) % k[1], q % k[2]];
    let mut flat = 0usize;
    for a in 0..3 {
        let s = sl[a] as isize + kmin[a] + o[a] as isize;
        if s < 0 || s >= lay.slots[a] as isize {
            return None;
        }
        flat = flat * lay.slots[a] + s as usize;
    }
    Some(flat)
}

/// `Σ_o p[o] c[l + o]` over the in-range part of the window.
#[inline]
fn stencil_dot<T: Real>(lay: &Layout, sl: [usize; 3], p: &[T], c: &[T]) -> T {
    let k = lay.k();
    let kmin = lay.kmin();
    let mut lo = [0usize; 3];
    let mut hi = [0usize; 3];
    for a in 0..3 {
        let start = sl[a] as isize + kmin[a];
        lo[a] = (-start).max(0) as usize;
        hi[a] = ((lay.slots[a] as isize - start).min(k[a] as isize)).max(0) as usize;
    }
    let mut acc = T::zero();
    for o0 in lo[0]..hi[0] {
        let c0 = (sl[0] as isize + kmin[0] + o0 as isize) as usize;
        for o1 in lo[1]..hi[1] {
            let c1 = (sl[1] as isize + kmin[1] + o1 as isize) as usize;
            let crow = (c0 * lay.slots[1] + c1) * lay.slots[2];
            let prow = (o0 * k[1] + o1) * k[2];
            let cs = (sl[2] as isize + kmin[2]) as usize;
            for o2 in lo[2]..hi[2] {
                acc += p[prow + o2] * c[crow + cs.wrapping_add(o2)];
            }
        }
    }
    acc
}

/// Lines of the output lattice per parallel block.
fn lines_per_block(lay: &Layout, par: &Parallelism, bytes: usize) -> usize {
    let line = lay.slots[2] * bytes.max(1);
    (par.block_bytes / line).max(1)
}

/// Runs `f(slot, flat)` over every output node, output-centric and block-parallel.
fn for_each_node<T: Real, S: Send>(
    lay: &Layout,
    par: &Parallelism,
    out: &mut [T],
    init: impl Fn() -> S + Sync + Send,
    f: impl Fn(&mut S, [usize; 3], usize) -> T + Sync + Send,
) {
    let n2 = lay.slots[2];
    let lines = lines_per_block(lay, par, T::BYTES * 8);
    par.install(|| {
        out.par_chunks_mut(lines * n2)
            .enumerate()
            .for_each_init(&init, |state, (b, chunk)| {
                let first = b * lines * n2;
                for (i, v) in chunk.iter_mut().enumerate() {
                    let flat = first + i;
                    let sl = lay.unflatten(flat);
                    *v = f(state, sl, flat);
                }
            });
    });
}

/// Matrix-free operator: stencils are contracted from the kernels at every application.
#[derive(Debug, Clone)]
pub struct OnTheFlyOperator<T: Real = f64> {
    engine: Engine<T>,
    par: Parallelism,
    extents: Vec<usize>,
}

impl<T: Real> OnTheFlyOperator<T> {
    pub fn new(disc: Discretization<T>, par: Parallelism) -> Result<Self> {
        let extents = disc.coeff_extents();
        Ok(Self {
            engine: Engine::new(disc)?,
            par,
            extents,
        })
    }

    pub fn node_classes(&self) -> Option<&NodeClassification> {
        self.engine.classes.as_ref()
    }

    /// Bytes held by the operator beyond its parameter fields.
    pub fn table_bytes(&self) -> usize {
        let tables: usize = self
            .engine
            .axes
            .iter()
            .map(|a| {
                (a.w.iter().chain(&a.f).chain(&a.b).map(|t| t.len()).sum::<usize>()) * T::BYTES
                    + (a.index.len() + a.b_index.len()) * 2
            })
            .sum();
        let tags = self.engine.tags.as_ref().map_or(0, |t| t.len() * 4);
        tables + tags + self.engine.stored.len() * T::BYTES
    }
}

impl<T: Real> LinearOperator<T> for OnTheFlyOperator<T> {
    fn len(&self) -> usize {
        self.engine.lay.total()
    }

    fn apply_into(&self, c: &[T], t: &mut [T]) {
        let e = &self.engine;
        for_each_node(
            &e.lay,
            &self.par,
            t,
            || e.scratch(),
            |s, sl, flat| {
                if e.stencil(sl, flat, s) {
                    stencil_dot(&e.lay, sl, &s.p, c)
                } else {
                    T::zero()
                }
            },
        );
    }

    fn diagonal(&self) -> Vec<T> {
        let e = &self.engine;
        let center = e.kprod() / 2;
        let mut out = vec![T::zero(); self.len()];
        for_each_node(
            &e.lay,
            &self.par,
            &mut out,
            || e.scratch(),
            |s, sl, flat| {
                if e.stencil(sl, flat, s) {
                    s.p[center]
                } else {
                    T::zero()
                }
            },
        );
        out
    }

    fn inactive(&self, index: usize) -> bool {
        self.engine.inactive(index)
    }

    fn parallelism(&self) -> Option<&Parallelism> {
        Some(&self.par)
    }
}

/// Bytes a block tensor needs for `nodes` (per axis) at degree `nb`.
pub fn block_tensor_bytes(nodes: &[usize], nb: usize, bytes_per_value: usize) -> u64 {
    let pb = nb / 2;
    let slots: u64 = nodes.iter().map(|&n| (n + 2 * pb) as u64).product();
    slots * ((2 * nb + 1) as u64).pow(nodes.len() as u32) * bytes_per_value as u64
}

/// Precomputed per-node stencils `P^{kl}`.
#[derive(Debug, Clone)]
pub struct BlockTensorOperator<T: Real = f64> {
    lay: Layout,
    stencils: Vec<T>,
    tags: Option<Vec<u32>>,
    classes: Option<NodeClassification>,
    par: Parallelism,
    extents: Vec<usize>,
}

/// Precontracts every node's stencil; fails if it would exceed `budget` bytes.
pub fn assemble_block_tensor<T: Real>(
    disc: Discretization<T>,
    par: Parallelism,
    budget: u64,
) -> Result<BlockTensorOperator<T>> {
    let required = block_tensor_bytes(disc.domain.grid().nodes(), disc.nb, T::BYTES);
    if required > budget {
        return Err(TbsError::ResourceBudget { required, budget });
    }
    let extents = disc.coeff_extents();
    let engine = Engine::new(disc)?;
    let kprod = engine.kprod();
    let lay = engine.lay.clone();
    let mut stencils = vec![T::zero(); lay.total() * kprod];
    par.install(|| {
        stencils
            .par_chunks_mut(kprod)
            .enumerate()
            .for_each_init(
                || engine.scratch(),
                |s, (flat, out)| {
                    let sl = lay.unflatten(flat);
                    if engine.stencil(sl, flat, s) {
                        out.copy_from_slice(&s.p);
                    }
                },
            )
    });
    Ok(BlockTensorOperator {
        lay,
        stencils,
        tags: engine.tags,
        classes: engine.classes,
        par,
        extents,
    })
}

impl<T: Real> BlockTensorOperator<T> {
    pub fn memory_bytes(&self) -> usize {
        self.stencils.len() * T::BYTES
    }

    pub fn node_classes(&self) -> Option<&NodeClassification> {
        self.classes.as_ref()
    }

    /// Stencil of the node at coefficient index `idx`, row-major over the window.
    pub fn stencil(&self, flat: usize) -> &[T] {
        let k = self.lay.k().iter().product::<usize>();
        &self.stencils[flat * k..(flat + 1) * k]
    }
}

impl<T: Real> LinearOperator<T> for BlockTensorOperator<T> {
    fn len(&self) -> usize {
        self.lay.total()
    }

    fn apply_into(&self, c: &[T], t: &mut [T]) {
        let kprod: usize = self.lay.k().iter().product();
        for_each_node(
            &self.lay,
            &self.par,
            t,
            || (),
            |_, sl, flat| stencil_dot(&self.lay, sl, &self.stencils[flat * kprod..(flat + 1) * kprod], c),
        );
    }

    fn diagonal(&self) -> Vec<T> {
        let kprod: usize = self.lay.k().iter().product();
        (0..self.len()).map(|i| self.stencils[i * kprod + kprod / 2]).collect()
    }

    fn inactive(&self, index: usize) -> bool {
        self.tags.as_ref().is_some_and(|t| t[index] == TAG_INACTIVE)
    }

    fn parallelism(&self) -> Option<&Parallelism> {
        Some(&self.par)
    }
}

/// Compressed sparse row matrix over the coefficient lattice.
#[derive(Debug, Clone)]
pub struct SparseMatrixOperator<T: Real = f64> {
    rows: usize,
    row_ptr: Vec<usize>,
    cols: Vec<u32>,
    values: Vec<T>,
    inactive: Vec<bool>,
    par: Parallelism,
    extents: Vec<usize>,
}

/// Assembles the CSR matrix by element loops over occupied cells.
pub fn assemble_sparse<T: Real>(disc: Discretization<T>, par: Parallelism) -> Result<SparseMatrixOperator<T>> {
    disc.validate()?;
    let lay = Layout::new(&disc.domain, disc.nb, disc.np);
    let asm = CellAssembler::new(&disc, &lay)?;
    let total = lay.total();
    let k = lay.k();
    let kmin = lay.kmin();
    // Pattern: the clipped K-window of every row.
    let window = |sl: [usize; 3], a: usize| -> (usize, usize) {
        let lo = (sl[a] as isize + kmin[a]).max(0) as usize;
        let hi = ((sl[a] as isize + kmin[a] + k[a] as isize).min(lay.slots[a] as isize)) as usize;
        (lo, hi)
    };
    let mut row_ptr = Vec::with_capacity(total + 1);
    row_ptr.push(0usize);
    for flat in 0..total {
        let sl = lay.unflatten(flat);
        let n: usize = (0..3).map(|a| { let (lo, hi) = window(sl, a); hi - lo }).product();
        row_ptr.push(row_ptr[flat] + n);
    }
    let nnz = row_ptr[total];
    let mut cols = vec![0u32; nnz];
    for flat in 0..total {
        let sl = lay.unflatten(flat);
        let (l0, h0) = window(sl, 0);
        let (l1, h1) = window(sl, 1);
        let (l2, h2) = window(sl, 2);
        let mut p = row_ptr[flat];
        for c0 in l0..h0 {
            for c1 in l1..h1 {
                for c2 in l2..h2 {
                    cols[p] = ((c0 * lay.slots[1] + c1) * lay.slots[2] + c2) as u32;
                    p += 1;
                }
            }
        }
    }
    let position = |row: usize, col: usize| -> usize {
        let sl = lay.unflatten(row);
        let sc = lay.unflatten(col);
        let (l0, h0) = window(sl, 0);
        let (l1, h1) = window(sl, 1);
        let (l2, h2) = window(sl, 2);
        let _ = h0;
        row_ptr[row] + ((sc[0] - l0) * (h1 - l1) + (sc[1] - l1)) * (h2 - l2) + (sc[2] - l2)
    };
    let mut values = vec![0.0f64; nnz];
    let mut s = asm.scratch();
    let rows = asm.rows();
    let occ = disc.domain.occupancy3();
    let slot_of = |a: usize, g: isize| -> usize { (g + if lay.real(a) { lay.pb } else { 0 }) as usize };
    for j0 in 0..lay.cells[0] as isize {
        for j1 in 0..lay.cells[1] as isize {
            for j2 in 0..lay.cells[2] as isize {
                let j = [j0, j1, j2];
                if !occ.get(j) {
                    continue;
                }
                asm.gather(j, &mut s);
                for al0 in 0..rows[0] {
                    for al1 in 0..rows[1] {
                        for al2 in 0..rows[2] {
                            let al = [al0, al1, al2];
                            asm.cell_row(al, &mut s);
                            let mut p = std::mem::take(&mut s.p);
                            asm.add_faces(j, al, &mut p);
                            let l: [isize; 3] = std::array::from_fn(|a| j[a] + asm.axes[a].kb_min + al[a] as isize);
                            let row = (slot_of(0, l[0]) * lay.slots[1] + slot_of(1, l[1])) * lay.slots[2]
                                + slot_of(2, l[2]);
                            for (q, &v) in p.iter().enumerate() {
                                if v == 0.0 {
                                    continue;
                                }
                                let ak = [q / (rows[1] * rows[2]), (q / rows[2]) % rows[1], q % rows[2]];
                                let kk: [isize; 3] =
                                    std::array::from_fn(|a| j[a] + asm.axes[a].kb_min + ak[a] as isize);
                                if (0..3).any(|a| (kk[a] - l[a]).abs() > -kmin[a]) {
                                    continue;
                                }
                                let col = (slot_of(0, kk[0]) * lay.slots[1] + slot_of(1, kk[1])) * lay.slots[2]
                                    + slot_of(2, kk[2]);
                                values[position(row, col)] += v;
                            }
                            s.p = p;
                        }
                    }
                }
            }
        }
    }
    let mut inactive = vec![false; total];
    if let Domain::Mask(_) = disc.domain {
        let classes = classify_nodes(&disc.domain, disc.nb);
        for (i, c) in classes.classes.iter().enumerate() {
            inactive[i] = *c == NodeClass::Inactive;
        }
        for row in 0..total {
            for p in row_ptr[row]..row_ptr[row + 1] {
                if inactive[row] || inactive[cols[p] as usize] {
                    values[p] = 0.0;
                }
            }
        }
    }
    Ok(SparseMatrixOperator {
        rows: total,
        row_ptr,
        cols,
        values: values.into_iter().map(T::of).collect(),
        inactive,
        par,
        extents: disc.domain.grid().coeff_extents(disc.nb),
    })
}

impl<T: Real> SparseMatrixOperator<T> {
    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn memory_bytes(&self) -> usize {
        self.values.len() * (T::BYTES + 4) + self.row_ptr.len() * 8
    }

    /// `A[row][col]`, zero outside the pattern.
    pub fn get(&self, row: usize, col: usize) -> T {
        let r = self.row_ptr[row]..self.row_ptr[row + 1];
        match self.cols[r.clone()].binary_search(&(col as u32)) {
            Ok(p) => self.values[r.start + p],
            Err(_) => T::zero(),
        }
    }

    /// Iterates `(col, value)` over row `row`.
    pub fn row(&self, row: usize) -> impl Iterator<Item = (usize, T)> + '_ {
        let r = self.row_ptr[row]..self.row_ptr[row + 1];
        self.cols[r.clone()].iter().map(|&c| c as usize).zip(self.values[r].iter().copied())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }
}

impl<T: Real> LinearOperator<T> for SparseMatrixOperator<T> {
    fn len(&self) -> usize {
        self.rows
    }

    fn apply_into(&self, c: &[T], t: &mut [T]) {
        let rows_per_block = (self.par.block_bytes / (T::BYTES * 64)).max(1);
        self.par.install(|| {
            t.par_chunks_mut(rows_per_block).enumerate().for_each(|(b, chunk)| {
                for (i, v) in chunk.iter_mut().enumerate() {
                    let row = b * rows_per_block + i;
                    let mut acc = T::zero();
                    for p in self.row_ptr[row]..self.row_ptr[row + 1] {
                        acc += self.values[p] * c[self.cols[p] as usize];
                    }
                    *v = acc;
                }
            })
        });
    }

    fn diagonal(&self) -> Vec<T> {
        (0..self.rows).map(|r| self.get(r, r)).collect()
    }

    fn inactive(&self, index: usize) -> bool {
        self.inactive[index]
    }

    fn parallelism(&self) -> Option<&Parallelism> {
        Some(&self.par)
    }
}

/// One of the three operator realizations.
#[derive(Debug, Clone)]
pub enum OperatorHandle<T: Real = f64> {
    Sparse(SparseMatrixOperator<T>),
    Block(BlockTensorOperator<T>),
    OnTheFly(OnTheFlyOperator<T>),
}

/// Build settings for [`build_operator`].
#[derive(Debug, Clone)]
pub struct OperatorConfig {
    pub strategy: Strategy,
    pub threads: usize,
    pub block_bytes: usize,
    pub memory_budget: u64,
}

impl Default for OperatorConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Onthefly,
            threads: 1,
            block_bytes: DEFAULT_BLOCK_BYTES,
            memory_budget: DEFAULT_MEMORY_BUDGET,
        }
    }
}

pub fn build_operator<T: Real>(disc: Discretization<T>, cfg: &OperatorConfig) -> Result<OperatorHandle<T>> {
    let par = Parallelism::new(cfg.threads)?.with_block_bytes(cfg.block_bytes);
    Ok(match cfg.strategy {
        Strategy::Sparse => OperatorHandle::Sparse(assemble_sparse(disc, par)?),
        Strategy::Block => OperatorHandle::Block(assemble_block_tensor(disc, par, cfg.memory_budget)?),
        Strategy::Onthefly => OperatorHandle::OnTheFly(OnTheFlyOperator::new(disc, par)?),
    })
}

impl<T: Real> OperatorHandle<T> {
    fn inner(&self) -> &dyn LinearOperator<T> {
        match self {
            OperatorHandle::Sparse(o) => o,
            OperatorHandle::Block(o) => o,
            OperatorHandle::OnTheFly(o) => o,
        }
    }

    pub fn strategy(&self) -> Strategy {
        match self {
            OperatorHandle::Sparse(_) => Strategy::Sparse,
            OperatorHandle::Block(_) => Strategy::Block,
            OperatorHandle::OnTheFly(_) => Strategy::Onthefly,
        }
    }

    /// Coefficient extents (nodes plus padding per axis).
    pub fn extents(&self) -> &[usize] {
        match self {
            OperatorHandle::Sparse(o) => &o.extents,
            OperatorHandle::Block(o) => &o.extents,
            OperatorHandle::OnTheFly(o) => &o.extents,
        }
    }

    /// `t = F(c)`.
    pub fn apply(&self, c: &CoeffTensor<T>) -> Result<CoeffTensor<T>> {
        c.check_extents(self.extents())?;
        c.ensure_finite()?;
        let mut t = vec![T::zero(); c.len()];
        self.apply_into(c.data(), &mut t);
        Ok(CoeffTensor::from_raw(self.extents().to_vec(), t))
    }

    /// Applies once and returns the analytic counts with measured wall time.
    pub fn apply_timed(&self, c: &CoeffTensor<T>) -> Result<(CoeffTensor<T>, OpStats)> {
        let start = Instant::now();
        let t = self.apply(c)?;
        let mut stats = self.flop_byte_report();
        stats.seconds = start.elapsed().as_secs_f64();
        Ok((t, stats))
    }

    /// Analytic flop and byte model of one application.
    pub fn flop_byte_report(&self) -> OpStats {
        let b = T::BYTES as f64;
        match self {
            OperatorHandle::OnTheFly(o) => {
                let n = o.len() as f64;
                let fields = (o.engine.d.len() + o.engine.mu.len()) as f64;
                OpStats {
                    flops: 2.0 * o.engine.node_fma() as f64 * n,
                    bytes_read: (n + fields) * b,
                    bytes_written: n * b,
                    seconds: 0.0,
                }
            }
            OperatorHandle::Block(o) => {
                let n = o.len() as f64;
                OpStats {
                    flops: 2.0 * o.stencils.len() as f64,
                    bytes_read: (o.stencils.len() as f64 + n) * b,
                    bytes_written: n * b,
                    seconds: 0.0,
                }
            }
            OperatorHandle::Sparse(o) => {
                let n = o.len() as f64;
                let nnz = o.nnz() as f64;
                OpStats {
                    flops: 2.0 * nnz,
                    bytes_read: nnz * (b + 4.0) + (n + 1.0) * 8.0 + n * b,
                    bytes_written: n * b,
                    seconds: 0.0,
                }
            }
        }
    }

    /// Operator diagonal `P^{ll}`.
    pub fn jacobi_diagonal(&self) -> CoeffTensor<T> {
        CoeffTensor::from_raw(self.extents().to_vec(), self.diagonal())
    }

    pub fn node_classes(&self) -> Option<&NodeClassification> {
        match self {
            OperatorHandle::Sparse(_) => None,
            OperatorHandle::Block(o) => o.node_classes(),
            OperatorHandle::OnTheFly(o) => o.node_classes(),
        }
    }

    /// Resident bytes of the operator's own storage.
    pub fn memory_bytes(&self) -> usize {
        match self {
            OperatorHandle::Sparse(o) => o.memory_bytes(),
            OperatorHandle::Block(o) => o.memory_bytes(),
            OperatorHandle::OnTheFly(o) => {
                o.table_bytes() + (o.engine.d.len() + o.engine.mu.len()) * T::BYTES
            }
        }
    }
}

impl<T: Real> LinearOperator<T> for OperatorHandle<T> {
    fn len(&self) -> usize {
        self.inner().len()
    }

    fn apply_into(&self, x: &[T], y: &mut [T]) {
        self.inner().apply_into(x, y)
    }

    fn diagonal(&self) -> Vec<T> {
        self.inner().diagonal()
    }

    fn inactive(&self, index: usize) -> bool {
        self.inner().inactive(index)
    }

    fn parallelism(&self) -> Option<&Parallelism> {
        self.inner().parallelism()
    }
}

/// Free-function form of [`OperatorHandle::apply`].
pub fn apply<T: Real>(op: &OperatorHandle<T>, c: &CoeffTensor<T>) -> Result<CoeffTensor<T>> {
    op.apply(c)
}

/// Diagonal with a warning for every active node whose entry is not positive.
pub fn jacobi_diagonal<T: Real>(op: &impl LinearOperator<T>) -> (Vec<T>, Vec<usize>) {
    let diag = op.diagonal();
    let bad = diag
        .iter()
        .enumerate()
        .filter(|(i, v)| !(v.as_f64() > 0.0) && !op.inactive(*i))
        .map(|(i, _)| i)
        .collect::<Vec<_>>();
    for &i in bad.iter().take(8) {
        log::warn!("non-positive diagonal {:e} at node {i}", diag[i].as_f64());
    }
    (diag, bad)
}

/// Analytic report for `op`.
pub fn flop_byte_report<T: Real>(op: &OperatorHandle<T>) -> OpStats {
    op.flop_byte_report()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{Grid, MaskDomain};

    fn line(n: usize, h: f64) -> Domain {
        Domain::boxed(Grid::new(vec![n], vec![h], vec![0.0]).unwrap())
    }

    fn all_ops(disc: &Discretization<f64>) -> Vec<OperatorHandle<f64>> {
        Strategy::ALL
            .iter()
            .map(|&s| {
                build_operator(
                    disc.clone(),
                    &OperatorConfig {
                        strategy: s,
                        ..Default::default()
                    },
                )
                .unwrap()
            })
            .collect()
    }

    #[test]
    fn second_difference_in_1d() {
        let disc = Discretization::<f64>::constant(line(8, 1.0), 1, 0, 1.0, 0.0, BoundaryWeights::none(1));
        for op in all_ops(&disc) {
            let c = CoeffTensor::from_fn(vec![8], |i| (i[0] * i[0]) as f64);
            let t = op.apply(&c).unwrap();
            for l in 1..7 {
                let expect = -c.data()[l - 1] + 2.0 * c.data()[l] - c.data()[l + 1];
                assert!((t.data()[l] - expect).abs() < 1e-12, "{:?}", op.strategy());
            }
            let diag = op.diagonal();
            assert!((diag[3] - 2.0).abs() < 1e-14);
            assert!((diag[0] - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn mass_diagonal_is_two_thirds() {
        let disc = Discretization::<f64>::constant(line(6, 1.0), 1, 0, 0.0, 1.0, BoundaryWeights::none(1));
        for op in all_ops(&disc) {
            assert!((op.diagonal()[2] - 2.0 / 3.0).abs() < 1e-14);
        }
    }

    #[test]
    fn constants_in_null_space_with_neumann() {
        let g = Grid::new(vec![5, 6, 4], vec![0.5, 0.25, 1.0], vec![0.0; 3]).unwrap();
        for nb in 1..=3 {
            let disc = Discretization::<f64>::constant(Domain::boxed(g.clone()), nb, nb, 1.3, 0.0, BoundaryWeights::none(3));
            let ext = disc.coeff_extents();
            for op in all_ops(&disc) {
                let t = op.apply(&CoeffTensor::filled(ext.clone(), 1.0)).unwrap();
                assert!(t.max_abs() < 1e-12, "nb {nb} {:?}: {}", op.strategy(), t.max_abs());
            }
        }
    }

    #[test]
    fn strategies_agree_on_mask_with_faces() {
        let g = Grid::new(vec![6, 5], vec![1.0, 0.5], vec![0.0; 2]).unwrap();
        let occ: Vec<bool> = (0..20).map(|i| i % 7 != 3 && i != 12).collect();
        let dom = Domain::Mask(MaskDomain::new(g, occ).unwrap());
        for nb in 1..=3 {
            let mut disc = Discretization::<f64>::constant(dom.clone(), nb, 1, 1.0, 0.3, BoundaryWeights::uniform(2, 2.0));
            disc.diffusion = CoeffTensor::from_fn(disc.diffusion.extents().to_vec(), |i| 1.0 + 0.1 * (i[0] + 2 * i[1]) as f64);
            let ops = all_ops(&disc);
            let c = CoeffTensor::from_fn(disc.coeff_extents(), |i| ((i[0] * 7 + i[1] * 3) % 5) as f64 - 2.0);
            let t: Vec<_> = ops.iter().map(|o| o.apply(&c).unwrap()).collect();
            let scale = t[0].max_abs();
            for other in &t[1..] {
                for (a, b) in t[0].data().iter().zip(other.data()) {
                    assert!((a - b).abs() <= 1e-12 * scale, "nb {nb}: {a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn block_budget_is_enforced() {
        let disc = Discretization::<f64>::constant(line(10, 1.0), 1, 1, 1.0, 0.0, BoundaryWeights::none(1));
        let err = assemble_block_tensor(disc, Parallelism::single(), 100).unwrap_err();
        assert!(matches!(err, TbsError::ResourceBudget { required: 240, budget: 100 }));
        assert_eq!(block_tensor_bytes(&[240, 240, 240], 3, 8), 242u64.pow(3) * 343 * 8);
    }
}
