//! Exact B-spline product integrals.
//!
//! Every integrand here is piecewise polynomial with knots at integers and
//! half-integers, so integrating each half cell with a Gauss rule of
//! sufficient order is exact. Tables live in two flavors: per-cell tables
//! (integral over one unit cell, indexed by offsets from the cell start) and
//! full-line kernels (sum over all cells, indexed by offsets from the test
//! index `l`). Grid axes additionally get per-node truncated tables, which
//! only differ from the full-line kernel within reach of the grid ends.

use crate::bspline::{bspline, bspline_derivative, check_degree, BSplineBasis};
use crate::error::{Result, TbsError};

/// Gauss-Legendre rule on (0, 1).
#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureRule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl QuadratureRule {
    /// Integrates `f` over `(a, b)`.
    pub fn integrate(&self, a: f64, b: f64, mut f: impl FnMut(f64) -> f64) -> f64 {
        let len = b - a;
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(&x, &w)| w * f(a + len * x))
            .sum::<f64>()
            * len
    }
}

/// Gauss-Legendre nodes and weights on (0, 1), exact up to degree `2·count - 1`.
pub fn gauss_rule(count: usize) -> Result<QuadratureRule> {
    if !(1..=16).contains(&count) {
        return Err(TbsError::QuadratureRange(count));
    }
    let n = count;
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        // Newton iteration on P_n from the Chebyshev-like initial guess.
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (p, d) = legendre(n, x);
            dp = d;
            let dx = p / d;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let (_, d) = legendre(n, x);
        if d != 0.0 {
            dp = d;
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        // Map from (-1, 1) to (0, 1).
        nodes[i] = 0.5 * (1.0 - x);
        nodes[n - 1 - i] = 0.5 * (1.0 + x);
        weights[i] = 0.5 * w;
        weights[n - 1 - i] = 0.5 * w;
    }
    Ok(QuadratureRule { nodes, weights })
}

/// Legendre polynomial P_n and its derivative at x.
fn legendre(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=n {
        let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
        p0 = p1;
        p1 = p2;
    }
    let d = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

/// Integrates a piecewise polynomial of degree `<= poly_degree` over `(a, b)`,
/// splitting at every half-integer knot.
pub(crate) fn integrate_piecewise(
    a: f64,
    b: f64,
    poly_degree: usize,
    mut f: impl FnMut(f64) -> f64,
) -> f64 {
    let rule = gauss_rule((poly_degree + 1).div_ceil(2)).expect("degree bounded by 20");
    let mut acc = 0.0;
    let mut lo = a;
    while lo < b {
        let next = ((lo * 2.0).floor() + 1.0) / 2.0;
        let hi = next.min(b);
        acc += rule.integrate(lo, hi, &mut f);
        lo = hi;
    }
    acc
}

/// Dense table over two integer offset ranges, zero outside.
#[derive(Debug, Clone, PartialEq)]
pub struct OffsetTable {
    pub row_min: isize,
    pub rows: usize,
    pub col_min: isize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl OffsetTable {
    pub fn zeros(row_min: isize, rows: usize, col_min: isize, cols: usize) -> Self {
        Self {
            row_min,
            rows,
            col_min,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn get(&self, row: isize, col: isize) -> f64 {
        let r = row - self.row_min;
        let c = col - self.col_min;
        if r < 0 || c < 0 || r >= self.rows as isize || c >= self.cols as isize {
            return 0.0;
        }
        self.data[r as usize * self.cols + c as usize]
    }

    pub(crate) fn add(&mut self, row: isize, col: isize, v: f64) {
        let r = (row - self.row_min) as usize;
        let c = (col - self.col_min) as usize;
        self.data[r * self.cols + c] += v;
    }

    pub fn row_max(&self) -> isize {
        self.row_min + self.rows as isize - 1
    }

    pub fn col_max(&self) -> isize {
        self.col_min + self.cols as isize - 1
    }

    /// Sum over the column index for each row.
    pub fn row_sums(&self) -> Vec<f64> {
        self.data.chunks(self.cols).map(|r| r.iter().sum()).collect()
    }
}

/// Local offsets (relative to the cell's lower node) of the degree-n B-splines
/// that are nonzero on a unit cell.
pub(crate) fn cell_offsets(n: usize) -> (isize, usize) {
    let r = (n / 2) as isize;
    (-r, (2 * r + 2) as usize)
}

/// Largest |m - l| for which β^{nb}_l and β^{np}_m overlap.
pub(crate) fn param_reach(nb: usize, np: usize) -> isize {
    // |m - l| < (nb + np + 2) / 2
    ((nb + np + 2) as isize + 1) / 2 - 1
}

fn check_flag(n: usize, order: usize) -> Result<()> {
    if order > n {
        return Err(TbsError::Smoothness { degree: n, order });
    }
    Ok(())
}

/// Per-cell integrals `∫_0^1 D^da β^nb(x-a_k) D^db β^nb(x-a_l) β^np(x-a_m) dx`.
#[derive(Debug, Clone)]
pub struct CellTrilinear {
    pub nb: usize,
    pub np: usize,
    pub da: usize,
    pub db: usize,
    pub kb_min: isize,
    pub kb: usize,
    pub kp_min: isize,
    pub kp: usize,
    /// `[a_k][a_l][a_m]`, row-major.
    pub data: Vec<f64>,
}

impl CellTrilinear {
    pub fn new(nb: usize, np: usize, da: usize, db: usize) -> Result<Self> {
        check_degree(nb)?;
        check_degree(np)?;
        check_flag(nb, da)?;
        check_flag(nb, db)?;
        let (kb_min, kb) = cell_offsets(nb);
        let (kp_min, kp) = cell_offsets(np);
        let deg = 3 * nb + np;
        let mut data = vec![0.0; kb * kb * kp];
        for ik in 0..kb {
            let ok = kb_min + ik as isize;
            for il in 0..kb {
                let ol = kb_min + il as isize;
                for im in 0..kp {
                    let om = kp_min + im as isize;
                    data[(ik * kb + il) * kp + im] = integrate_piecewise(0.0, 1.0, deg, |x| {
                        bspline_derivative(nb, x - ok as f64, da)
                            * bspline_derivative(nb, x - ol as f64, db)
                            * bspline(np, x - om as f64)
                    });
                }
            }
        }
        Ok(Self {
            nb,
            np,
            da,
            db,
            kb_min,
            kb,
            kp_min,
            kp,
            data,
        })
    }

    #[inline]
    pub fn get(&self, ak: isize, al: isize, am: isize) -> f64 {
        let ik = ak - self.kb_min;
        let il = al - self.kb_min;
        let im = am - self.kp_min;
        if ik < 0
            || il < 0
            || im < 0
            || ik >= self.kb as isize
            || il >= self.kb as isize
            || im >= self.kp as isize
        {
            return 0.0;
        }
        self.data[(ik as usize * self.kb + il as usize) * self.kp + im as usize]
    }
}

/// Per-cell integrals `∫_0^1 D^da β^n1(x-a_j) D^db β^n2(x-a_l) dx`.
#[derive(Debug, Clone)]
pub struct CellBilinear {
    pub n1: usize,
    pub n2: usize,
    pub da: usize,
    pub db: usize,
    pub k1_min: isize,
    pub k1: usize,
    pub k2_min: isize,
    pub k2: usize,
    /// `[a_j][a_l]`.
    pub data: Vec<f64>,
}

impl CellBilinear {
    pub fn new(n1: usize, n2: usize, da: usize, db: usize) -> Result<Self> {
        check_degree(n1)?;
        check_degree(n2)?;
        check_flag(n1, da)?;
        check_flag(n2, db)?;
        let (k1_min, k1) = cell_offsets(n1);
        let (k2_min, k2) = cell_offsets(n2);
        let mut data = vec![0.0; k1 * k2];
        for i in 0..k1 {
            let oj = k1_min + i as isize;
            for j in 0..k2 {
                let ol = k2_min + j as isize;
                data[i * k2 + j] = integrate_piecewise(0.0, 1.0, n1 + n2, |x| {
                    bspline_derivative(n1, x - oj as f64, da)
                        * bspline_derivative(n2, x - ol as f64, db)
                });
            }
        }
        Ok(Self {
            n1,
            n2,
            da,
            db,
            k1_min,
            k1,
            k2_min,
            k2,
            data,
        })
    }

    #[inline]
    pub fn get(&self, aj: isize, al: isize) -> f64 {
        let i = aj - self.k1_min;
        let j = al - self.k2_min;
        if i < 0 || j < 0 || i >= self.k1 as isize || j >= self.k2 as isize {
            return 0.0;
        }
        self.data[i as usize * self.k2 + j as usize]
    }
}

/// Per-cell integrals `∫_0^1 β^n(x - a) dx`.
pub(crate) fn cell_linear(n: usize) -> (isize, Vec<f64>) {
    let (kmin, k) = cell_offsets(n);
    let v = (0..k)
        .map(|i| {
            let o = kmin + i as isize;
            integrate_piecewise(0.0, 1.0, n, |x| bspline(n, x - o as f64))
        })
        .collect();
    (kmin, v)
}

/// Translation-invariant trilinear kernel over the whole line.
#[derive(Debug, Clone)]
pub struct UnivariateTrilinearKernel {
    pub nb: usize,
    pub np: usize,
    pub da: usize,
    pub db: usize,
    /// Rows: `k - l` in `[-nb, nb]`; columns: `m - l`.
    pub table: OffsetTable,
}

/// `∫ D^da β^nb(x - o_k) · D^db β^nb(x) · β^np(x - o_m) dx` for all offsets.
pub fn trilinear_kernel(
    nb: usize,
    np: usize,
    da: usize,
    db: usize,
) -> Result<UnivariateTrilinearKernel> {
    let cell = CellTrilinear::new(nb, np, da, db)?;
    Ok(UnivariateTrilinearKernel {
        nb,
        np,
        da,
        db,
        table: truncated_trilinear(&cell, 0, None),
    })
}

/// Translation-invariant bilinear kernel `∫ D^da β^n1(x - o) D^db β^n2(x) dx`, indexed by `o = k - l`.
#[derive(Debug, Clone)]
pub struct UnivariateBilinearKernel {
    pub n1: usize,
    pub n2: usize,
    pub da: usize,
    pub db: usize,
    pub offset_min: isize,
    pub values: Vec<f64>,
}

impl UnivariateBilinearKernel {
    pub fn at(&self, offset: isize) -> f64 {
        let i = offset - self.offset_min;
        if i < 0 || i >= self.values.len() as isize {
            return 0.0;
        }
        self.values[i as usize]
    }
}

pub fn bilinear_kernel(n1: usize, n2: usize, da: usize, db: usize) -> Result<UnivariateBilinearKernel> {
    let cell = CellBilinear::new(n1, n2, da, db)?;
    let t = truncated_bilinear(&cell, 0, None);
    Ok(UnivariateBilinearKernel {
        n1,
        n2,
        da,
        db,
        offset_min: t.col_min,
        values: t.data,
    })
}

/// Sums cell tables over the cells meeting the support of test index `l`,
/// restricted to cells `0..cells` when `cells` is given (grid truncation).
/// Rows are trial offsets `k - l`, columns parameter offsets `m - l`.
pub(crate) fn truncated_trilinear(cell: &CellTrilinear, l: isize, cells: Option<usize>) -> OffsetTable {
    let nb = cell.nb as isize;
    let reach = param_reach(cell.nb, cell.np);
    let mut t = OffsetTable::zeros(-nb, (2 * nb + 1) as usize, -reach, (2 * reach + 1) as usize);
    for j in support_cells(cell.nb, l, cells) {
        for ok in -nb..=nb {
            for om in -reach..=reach {
                let v = cell.get(l + ok - j, l - j, l + om - j);
                if v != 0.0 {
                    t.add(ok, om, v);
                }
            }
        }
    }
    t
}

/// As [`truncated_trilinear`] for bilinear tables: a single row indexed by `j - l`.
pub(crate) fn truncated_bilinear(cell: &CellBilinear, l: isize, cells: Option<usize>) -> OffsetTable {
    let reach = param_reach(cell.n1, cell.n2);
    let mut t = OffsetTable::zeros(0, 1, -reach, (2 * reach + 1) as usize);
    for j in support_cells(cell.n2, l, cells) {
        for o in -reach..=reach {
            let v = cell.get(l + o - j, l - j);
            if v != 0.0 {
                t.add(0, o, v);
            }
        }
    }
    t
}

/// Cells intersecting the support of β^n_l, optionally clipped to `0..cells`.
pub(crate) fn support_cells(n: usize, l: isize, cells: Option<usize>) -> std::ops::RangeInclusive<isize> {
    let r = (n / 2) as isize;
    let (mut lo, mut hi) = (l - r - 1, l + r);
    if let Some(c) = cells {
        lo = lo.max(0);
        hi = hi.min(c as isize - 1);
    }
    lo..=hi
}

/// One term of a separable d-dimensional kernel: an outer product of univariate tables.
#[derive(Debug, Clone)]
pub struct SeparableTerm {
    pub scale: f64,
    /// Axis index whose factor is the differentiated kernel, if any.
    pub differentiated_axis: Option<usize>,
    pub factors: Vec<OffsetTable>,
}

/// Stiffness and mass kernels composed from univariate factors.
#[derive(Debug, Clone)]
pub struct SeparableKernelSet {
    pub dim: usize,
    pub step: Vec<f64>,
    pub stiffness: Vec<SeparableTerm>,
    pub mass: SeparableTerm,
}

/// Composes `d` stiffness terms (derivative factor rotating through the axes,
/// scaled by `Π h / h_a²`) and one mass term (scaled by `Π h`).
pub fn compose_separable(
    stiffness_1d: &UnivariateTrilinearKernel,
    mass_1d: &UnivariateTrilinearKernel,
    step: &[f64],
) -> Result<SeparableKernelSet> {
    let dim = step.len();
    if !(1..=3).contains(&dim) {
        return Err(TbsError::InputValidation(format!("dimension {dim} not in 1..=3")));
    }
    if (stiffness_1d.da, stiffness_1d.db) != (1, 1) || (mass_1d.da, mass_1d.db) != (0, 0) {
        return Err(TbsError::InputValidation(
            "stiffness kernel must be (1,1)-differentiated and mass kernel undifferentiated".into(),
        ));
    }
    let volume: f64 = step.iter().product();
    let stiffness = (0..dim)
        .map(|a| SeparableTerm {
            scale: volume / (step[a] * step[a]),
            differentiated_axis: Some(a),
            factors: (0..dim)
                .map(|i| {
                    if i == a {
                        stiffness_1d.table.clone()
                    } else {
                        mass_1d.table.clone()
                    }
                })
                .collect(),
        })
        .collect();
    Ok(SeparableKernelSet {
        dim,
        step: step.to_vec(),
        stiffness,
        mass: SeparableTerm {
            scale: volume,
            differentiated_axis: None,
            factors: vec![mass_1d.table.clone(); dim],
        },
    })
}

impl SeparableKernelSet {
    /// Contracts the stiffness kernel with a parameter field `d(m)` and a
    /// trial field `c(k)` at test index `l`: `Σ_k Σ_m c_k d_m w^{klm}`.
    /// Reference evaluation for small checks; the operator never materializes this.
    pub fn stiffness_action(
        &self,
        l: &[isize],
        c: impl Fn(&[isize]) -> f64,
        d: impl Fn(&[isize]) -> f64,
    ) -> f64 {
        self.stiffness
            .iter()
            .map(|t| term_action(t, l, &c, &d))
            .sum()
    }

    /// Dense stiffness stencil `Σ_m d_m w^{klm}` for constant `d = 1`, indexed
    /// by `k - l` on the `(2nb+1)^d` window.
    pub fn materialize_stiffness(&self) -> (isize, usize, Vec<f64>) {
        let f = &self.stiffness[0].factors[0];
        let kmin = f.row_min;
        let k = f.rows;
        let len = k.pow(self.dim as u32);
        let mut out = vec![0.0; len];
        for (flat, v) in out.iter_mut().enumerate() {
            let mut o = vec![0isize; self.dim];
            let mut rem = flat;
            for a in (0..self.dim).rev() {
                o[a] = kmin + (rem % k) as isize;
                rem /= k;
            }
            *v = self
                .stiffness
                .iter()
                .map(|t| {
                    t.scale
                        * t.factors
                            .iter()
                            .zip(&o)
                            .map(|(fac, &oa)| fac.row_sums()[(oa - fac.row_min) as usize])
                            .product::<f64>()
                })
                .sum();
        }
        (kmin, k, out)
    }
}

fn term_action(
    term: &SeparableTerm,
    l: &[isize],
    c: &impl Fn(&[isize]) -> f64,
    d: &impl Fn(&[isize]) -> f64,
) -> f64 {
    let dim = l.len();
    let f0 = &term.factors[0];
    let ranges: Vec<(isize, isize, isize, isize)> = term
        .factors
        .iter()
        .map(|f| (f.row_min, f.row_max(), f.col_min, f.col_max()))
        .collect();
    let mut acc = 0.0;
    let mut ok = vec![0isize; dim];
    let mut om = vec![0isize; dim];
    fn rec(
        axis: usize,
        dim: usize,
        term: &SeparableTerm,
        ranges: &[(isize, isize, isize, isize)],
        ok: &mut [isize],
        om: &mut [isize],
        weight: f64,
        l: &[isize],
        c: &dyn Fn(&[isize]) -> f64,
        d: &dyn Fn(&[isize]) -> f64,
        acc: &mut f64,
    ) {
        if axis == dim {
            let k: Vec<isize> = l.iter().zip(ok.iter()).map(|(a, b)| a + b).collect();
            let m: Vec<isize> = l.iter().zip(om.iter()).map(|(a, b)| a + b).collect();
            *acc += weight * c(&k) * d(&m);
            return;
        }
        let (r0, r1, c0, c1) = ranges[axis];
        for a in r0..=r1 {
            for b in c0..=c1 {
                let w = term.factors[axis].get(a, b);
                if w == 0.0 {
                    continue;
                }
                ok[axis] = a;
                om[axis] = b;
                rec(axis + 1, dim, term, ranges, ok, om, weight * w, l, c, d, acc);
            }
        }
    }
    let _ = f0;
    rec(0, dim, term, &ranges, &mut ok, &mut om, term.scale, l, c, d, &mut acc);
    acc
}

/// Side of an axis-aligned box face.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Low,
    High,
}

/// An axis-aligned face of a box.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Face {
    pub axis: usize,
    pub side: Side,
}

impl Face {
    /// Identifies the face with outward normal `normal`; only axis-aligned normals are supported.
    pub fn from_normal(normal: &[f64]) -> Result<Self> {
        let nonzero: Vec<usize> = (0..normal.len()).filter(|&i| normal[i] != 0.0).collect();
        if nonzero.len() != 1 {
            return Err(TbsError::UnsupportedGeometry(format!(
                "face normal {normal:?} is not axis-aligned"
            )));
        }
        let axis = nonzero[0];
        let side = if normal[axis] < 0.0 { Side::Low } else { Side::High };
        Ok(Face { axis, side })
    }

    /// All `2·dim` faces in a fixed order.
    pub fn all(dim: usize) -> Vec<Face> {
        (0..dim)
            .flat_map(|axis| [Side::Low, Side::High].map(|side| Face { axis, side }))
            .collect()
    }
}

/// Surface kernel `∫_face β_k β_l ds` for a face through a grid node.
#[derive(Debug, Clone)]
pub struct FaceKernel {
    pub face: Face,
    /// Index (relative to the face node) of the first row/column of `normal`.
    pub normal_min: isize,
    /// Rank-one table `β(-i)·β(-j)` over indices near the face node.
    pub normal: Vec<Vec<f64>>,
    /// Undifferentiated bilinear kernels along the tangential axes.
    pub tangential: Vec<UnivariateBilinearKernel>,
}

pub fn boundary_face_kernel(basis: &BSplineBasis, face: Face) -> Result<FaceKernel> {
    if face.axis >= basis.dim() {
        return Err(TbsError::UnsupportedGeometry(format!(
            "face axis {} outside {}-D basis",
            face.axis,
            basis.dim()
        )));
    }
    let n = basis.degree();
    let m = (n / 2) as isize;
    let vals: Vec<f64> = (-m..=m).map(|i| bspline(n, -(i as f64))).collect();
    let normal = vals
        .iter()
        .map(|a| vals.iter().map(|b| a * b).collect())
        .collect();
    let tangential = (0..basis.dim() - 1)
        .map(|_| bilinear_kernel(n, n, 0, 0))
        .collect::<Result<_>>()?;
    Ok(FaceKernel {
        face,
        normal_min: -m,
        normal,
        tangential,
    })
}

/// Per-node univariate tables for one grid axis: the full-line table for
/// nodes whose support lies inside the grid, truncated copies near the ends.
#[derive(Debug, Clone)]
pub(crate) struct AxisTables {
    pub index: Vec<u16>,
    pub tables: Vec<OffsetTable>,
}

impl AxisTables {
    pub fn build(
        cells: usize,
        pad: usize,
        nb: usize,
        make: impl Fn(isize, Option<usize>) -> OffsetTable,
    ) -> Self {
        let first = -(pad as isize);
        let slots = cells + 1 + 2 * pad;
        let full = make(0, None);
        let mut tables = vec![full];
        let mut index = Vec::with_capacity(slots);
        for s in 0..slots {
            let l = first + s as isize;
            let sup = support_cells(nb, l, None);
            if *sup.start() >= 0 && *sup.end() < cells as isize {
                index.push(0);
            } else {
                tables.push(make(l, Some(cells)));
                index.push((tables.len() - 1) as u16);
            }
        }
        Self { index, tables }
    }
}
