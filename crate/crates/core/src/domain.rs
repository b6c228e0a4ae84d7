//! Uniform grids, box and voxel-mask domains, and cell/node classification.

use crate::bspline::{bspline, bspline_derivative, BSplineBasis};
use crate::error::{Result, TbsError};
use crate::kernels::{cell_linear, gauss_rule, support_cells, Face, Side};

/// Uniform grid of nodes `origin + i·h`, `i in 0..nodes`.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    nodes: Vec<usize>,
    step: Vec<f64>,
    origin: Vec<f64>,
}

impl Grid {
    pub fn new(nodes: Vec<usize>, step: Vec<f64>, origin: Vec<f64>) -> Result<Self> {
        let d = nodes.len();
        if !(1..=3).contains(&d) || step.len() != d || origin.len() != d {
            return Err(TbsError::InputValidation(format!(
                "grid needs 1 to 3 axes with matching step and origin (got {d}, {}, {})",
                step.len(),
                origin.len()
            )));
        }
        if let Some(n) = nodes.iter().find(|&&n| n < 2) {
            return Err(TbsError::InputValidation(format!(
                "every axis needs at least 2 nodes, got {n}"
            )));
        }
        if step.iter().any(|&h| !(h > 0.0 && h.is_finite())) {
            return Err(TbsError::InputValidation(format!(
                "grid steps must be positive, got {step:?}"
            )));
        }
        if origin.iter().any(|o| !o.is_finite()) {
            return Err(TbsError::InputValidation("grid origin must be finite".into()));
        }
        Ok(Self {
            nodes,
            step,
            origin,
        })
    }

    /// Grid spanning `[lo, hi]` per axis with `nodes` nodes.
    pub fn spanning(lo: &[f64], hi: &[f64], nodes: &[usize]) -> Result<Self> {
        let step = lo
            .iter()
            .zip(hi)
            .zip(nodes)
            .map(|((a, b), &n)| (b - a) / (n.max(2) - 1) as f64)
            .collect();
        Self::new(nodes.to_vec(), step, lo.to_vec())
    }

    pub fn dim(&self) -> usize {
        self.nodes.len()
    }

    pub fn nodes(&self) -> &[usize] {
        &self.nodes
    }

    pub fn step(&self) -> &[f64] {
        &self.step
    }

    pub fn origin(&self) -> &[f64] {
        &self.origin
    }

    pub fn cells(&self) -> Vec<usize> {
        self.nodes.iter().map(|n| n - 1).collect()
    }

    pub fn node_count(&self) -> usize {
        self.nodes.iter().product()
    }

    pub fn cell_count(&self) -> usize {
        self.cells().iter().product()
    }

    /// Physical extent of each axis.
    pub fn lengths(&self) -> Vec<f64> {
        self.nodes
            .iter()
            .zip(&self.step)
            .map(|(&n, h)| (n - 1) as f64 * h)
            .collect()
    }

    pub fn cell_volume(&self) -> f64 {
        self.step.iter().product()
    }

    /// Coefficient extents for degree `n`: nodes plus `floor(n/2)` per side.
    pub fn coeff_extents(&self, n: usize) -> Vec<usize> {
        self.nodes.iter().map(|&e| e + 2 * (n / 2)).collect()
    }

    pub fn basis(&self, degree: usize) -> Result<BSplineBasis> {
        BSplineBasis::new(degree, self.step.clone())
    }
}

/// The full rectangular grid region.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxDomain {
    pub grid: Grid,
}

/// Voxel-mask domain: a set of occupied grid cells.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskDomain {
    grid: Grid,
    occupied: Vec<bool>,
}

impl MaskDomain {
    /// `occupied` is row-major over the cell extents (nodes - 1 per axis).
    pub fn new(grid: Grid, occupied: Vec<bool>) -> Result<Self> {
        let cells = grid.cell_count();
        if occupied.len() != cells {
            return Err(TbsError::ExtentMismatch {
                expected: grid.cells(),
                actual: vec![occupied.len()],
            });
        }
        if !occupied.iter().any(|&o| o) {
            return Err(TbsError::EmptyDomain);
        }
        Ok(Self { grid, occupied })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn occupancy(&self) -> &[bool] {
        &self.occupied
    }

    pub fn occupied_count(&self) -> usize {
        self.occupied.iter().filter(|&&o| o).count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Domain {
    Box(BoxDomain),
    Mask(MaskDomain),
}

impl Domain {
    pub fn boxed(grid: Grid) -> Self {
        Domain::Box(BoxDomain { grid })
    }

    pub fn grid(&self) -> &Grid {
        match self {
            Domain::Box(b) => &b.grid,
            Domain::Mask(m) => &m.grid,
        }
    }

    pub fn is_box(&self) -> bool {
        matches!(self, Domain::Box(_))
    }

    /// Occupancy on the 3-D embedded cell lattice.
    pub(crate) fn occupancy3(&self) -> Occupancy {
        let cells = embed3(&self.grid().cells());
        match self {
            Domain::Box(_) => Occupancy {
                cells,
                data: None,
            },
            Domain::Mask(m) => Occupancy {
                cells,
                data: Some(m.occupied.clone()),
            },
        }
    }

    pub fn occupied(&self, cell: &[usize]) -> bool {
        match self {
            Domain::Box(_) => true,
            Domain::Mask(m) => m.occupied[flat(&self.grid().cells(), cell)],
        }
    }

    /// Measure of the domain.
    pub fn volume(&self) -> f64 {
        let n = match self {
            Domain::Box(b) => b.grid.cell_count(),
            Domain::Mask(m) => m.occupied_count(),
        };
        n as f64 * self.grid().cell_volume()
    }
}

fn embed3(e: &[usize]) -> [usize; 3] {
    crate::tensor::embed3(e)
}

fn flat(extents: &[usize], idx: &[usize]) -> usize {
    idx.iter().zip(extents).fold(0, |acc, (&i, &n)| acc * n + i)
}

/// Cell occupancy on the embedded 3-D lattice; `None` means every cell.
#[derive(Debug, Clone)]
pub(crate) struct Occupancy {
    pub cells: [usize; 3],
    pub data: Option<Vec<bool>>,
}

impl Occupancy {
    #[inline]
    pub fn get(&self, c: [isize; 3]) -> bool {
        for a in 0..3 {
            if c[a] < 0 || c[a] >= self.cells[a] as isize {
                return false;
            }
        }
        match &self.data {
            None => true,
            Some(d) => {
                d[(c[0] as usize * self.cells[1] + c[1] as usize) * self.cells[2] + c[2] as usize]
            }
        }
    }

    /// Whether the face of cell `c` on `(axis, side)` lies on the domain boundary.
    #[inline]
    pub fn exposed(&self, c: [isize; 3], axis: usize, side: Side) -> bool {
        let mut nb = c;
        nb[axis] += if side == Side::Low { -1 } else { 1 };
        !self.get(nb)
    }
}

/// Per-cell label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CellClass {
    Interior,
    Boundary,
    Exterior,
}

/// Labels every cell: occupied cells with an unoccupied face neighbor (or a
/// face on the grid edge) are `Boundary`.
pub fn classify_cells(domain: &Domain) -> Result<Vec<CellClass>> {
    let occ = domain.occupancy3();
    if let Some(d) = &occ.data {
        if !d.iter().any(|&o| o) {
            return Err(TbsError::EmptyDomain);
        }
    }
    let dim = domain.grid().dim();
    let [c0, c1, c2] = occ.cells;
    let mut out = Vec::with_capacity(c0 * c1 * c2);
    for i in 0..c0 as isize {
        for j in 0..c1 as isize {
            for k in 0..c2 as isize {
                let c = [i, j, k];
                let class = if !occ.get(c) {
                    CellClass::Exterior
                } else if (3 - dim..3).any(|a| {
                    occ.exposed(c, a, Side::Low) || occ.exposed(c, a, Side::High)
                }) {
                    CellClass::Boundary
                } else {
                    CellClass::Interior
                };
                out.push(class);
            }
        }
    }
    Ok(out)
}

/// Which integration path a test function takes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum NodeClass {
    /// Every in-grid cell under the support is occupied: truncated separable tables apply.
    Separable,
    /// Support partially occupied: needs a stored, cell-summed stencil.
    Stored,
    /// Negligible overlap with the domain: dropped from the system.
    Inactive,
}

/// Node classes over the coefficient lattice of degree `nb`.
#[derive(Debug, Clone)]
pub struct NodeClassification {
    /// Coefficient extents on the embedded 3-D lattice.
    pub slots: [usize; 3],
    pub classes: Vec<NodeClass>,
    pub separable: usize,
    pub stored: usize,
    pub inactive: usize,
}

impl NodeClassification {
    /// Fraction of active unknowns served by separable kernels.
    pub fn separable_fraction(&self) -> f64 {
        let active = self.separable + self.stored;
        if active == 0 {
            0.0
        } else {
            self.separable as f64 / active as f64
        }
    }
}

/// Mass-row magnitude below which an unknown is dropped.
pub const INACTIVE_THRESHOLD: f64 = 1e-14;

/// Classifies every coefficient of degree `nb` by how its support meets the domain.
pub fn classify_nodes(domain: &Domain, nb: usize) -> NodeClassification {
    let grid = domain.grid();
    let dim = grid.dim();
    let nodes3 = embed3(grid.nodes());
    let pad = (nb / 2) as isize;
    let mut slots = [1usize; 3];
    let mut first = [0isize; 3];
    for a in 3 - dim..3 {
        slots[a] = nodes3[a] + 2 * pad as usize;
        first[a] = -pad;
    }
    let occ = domain.occupancy3();
    let prefix = PrefixCount::new(&occ);
    let (lin_min, lin) = cell_linear(nb);
    let total = slots.iter().product();
    let mut classes = Vec::with_capacity(total);
    let (mut separable, mut stored, mut inactive) = (0, 0, 0);
    for s0 in 0..slots[0] {
        for s1 in 0..slots[1] {
            for s2 in 0..slots[2] {
                let l = [
                    s0 as isize + first[0],
                    s1 as isize + first[1],
                    s2 as isize + first[2],
                ];
                let mut lo = [0isize; 3];
                let mut hi = [0isize; 3];
                for a in 3 - dim..3 {
                    let r = support_cells(nb, l[a], Some(occ.cells[a]));
                    lo[a] = *r.start();
                    hi[a] = *r.end();
                }
                let cells: usize = (0..3).map(|a| (hi[a] - lo[a] + 1).max(0) as usize).product();
                let count = prefix.count(lo, hi);
                let class = if count == 0 {
                    NodeClass::Inactive
                } else if count == cells {
                    NodeClass::Separable
                } else {
                    // Mass row over the occupied cells.
                    let mut mass = 0.0;
                    for_cells(lo, hi, |c| {
                        if occ.get(c) {
                            let mut v = 1.0;
                            for a in 3 - dim..3 {
                                v *= lin[(l[a] - c[a] - lin_min) as usize];
                            }
                            mass += v;
                        }
                    });
                    if mass.abs() < INACTIVE_THRESHOLD {
                        NodeClass::Inactive
                    } else {
                        NodeClass::Stored
                    }
                };
                match class {
                    NodeClass::Separable => separable += 1,
                    NodeClass::Stored => stored += 1,
                    NodeClass::Inactive => inactive += 1,
                }
                classes.push(class);
            }
        }
    }
    NodeClassification {
        slots,
        classes,
        separable,
        stored,
        inactive,
    }
}

pub(crate) fn for_cells(lo: [isize; 3], hi: [isize; 3], mut f: impl FnMut([isize; 3])) {
    for i in lo[0]..=hi[0] {
        for j in lo[1]..=hi[1] {
            for k in lo[2]..=hi[2] {
                f([i, j, k]);
            }
        }
    }
}

/// Occupied-cell counts over boxes via a 3-D inclusive prefix sum.
struct PrefixCount {
    ext: [usize; 3],
    sums: Option<Vec<u32>>,
}

impl PrefixCount {
    fn new(occ: &Occupancy) -> Self {
        let [c0, c1, c2] = occ.cells;
        let ext = [c0 + 1, c1 + 1, c2 + 1];
        let Some(data) = &occ.data else {
            return Self { ext, sums: None };
        };
        let mut s = vec![0u32; ext[0] * ext[1] * ext[2]];
        let at = |i: usize, j: usize, k: usize| (i * ext[1] + j) * ext[2] + k;
        for i in 1..=c0 {
            for j in 1..=c1 {
                for k in 1..=c2 {
                    let v = data[((i - 1) * c1 + (j - 1)) * c2 + (k - 1)] as u32;
                    s[at(i, j, k)] = v + s[at(i - 1, j, k)] + s[at(i, j - 1, k)] + s[at(i, j, k - 1)]
                        - s[at(i - 1, j - 1, k)]
                        - s[at(i - 1, j, k - 1)]
                        - s[at(i, j - 1, k - 1)]
                        + s[at(i - 1, j - 1, k - 1)];
                }
            }
        }
        Self { ext, sums: Some(s) }
    }

    /// Occupied cells in the inclusive box `[lo, hi]`.
    fn count(&self, lo: [isize; 3], hi: [isize; 3]) -> usize {
        if (0..3).any(|a| hi[a] < lo[a]) {
            return 0;
        }
        let Some(s) = &self.sums else {
            return (0..3).map(|a| (hi[a] - lo[a] + 1) as usize).product();
        };
        let e = self.ext;
        let at = |i: isize, j: isize, k: isize| s[(i as usize * e[1] + j as usize) * e[2] + k as usize] as i64;
        let (a0, a1, a2) = (lo[0], lo[1], lo[2]);
        let (b0, b1, b2) = (hi[0] + 1, hi[1] + 1, hi[2] + 1);
        let v = at(b0, b1, b2) - at(a0, b1, b2) - at(b0, a1, b2) - at(b0, b1, a2)
            + at(a0, a1, b2)
            + at(a0, b1, a2)
            + at(b0, a1, a2)
            - at(a0, a1, a2);
        v as usize
    }
}

/// Integrand for [`boundary_cell_quadrature`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Integrand {
    /// `∫ ∇β_k · ∇β_l` (unit diffusion).
    Stiffness,
    /// `∫ β_k β_l` (unit absorption).
    Mass,
}

/// Element matrix of one cell over the B-splines that are nonzero on it.
#[derive(Debug, Clone)]
pub struct LocalKernel {
    /// Global coefficient index of local function 0 along each axis.
    pub first: Vec<isize>,
    /// Local functions per axis.
    pub width: usize,
    /// `[k_local][l_local]`, each flattened row-major over axes.
    pub values: Vec<f64>,
}

impl LocalKernel {
    pub fn size(&self) -> usize {
        self.width.pow(self.first.len() as u32)
    }

    pub fn get(&self, k: usize, l: usize) -> f64 {
        self.values[k * self.size() + l]
    }
}

/// Integrates the element matrix of a boundary cell by tensor-product Gauss
/// quadrature over its occupied part (the whole cell at mask resolution).
pub fn boundary_cell_quadrature(
    domain: &Domain,
    cell: &[usize],
    basis: &BSplineBasis,
    integrand: Integrand,
) -> Result<LocalKernel> {
    let grid = domain.grid();
    let dim = grid.dim();
    if cell.len() != dim || basis.dim() != dim {
        return Err(TbsError::InputValidation("cell and basis dimensions must match the grid".into()));
    }
    let cells = grid.cells();
    if cell.iter().zip(&cells).any(|(&c, &n)| c >= n) {
        return Err(TbsError::InputValidation(format!("cell {cell:?} outside grid")));
    }
    let classes = classify_cells(domain)?;
    match classes[flat(&cells, cell)] {
        CellClass::Boundary => {}
        other => {
            return Err(TbsError::Misuse(format!(
                "cell {cell:?} is {other:?}, not a boundary cell"
            )))
        }
    }
    let n = basis.degree();
    if integrand == Integrand::Stiffness && n == 0 {
        return Err(TbsError::Smoothness { degree: 0, order: 1 });
    }
    let r = (n / 2) as isize;
    let width = (2 * r + 2) as usize;
    let first: Vec<isize> = cell.iter().map(|&c| c as isize - r).collect();
    let rule = gauss_rule(n + 1)?;
    let size = width.pow(dim as u32);
    let h = grid.step();
    let vol = grid.cell_volume();
    let mut values = vec![0.0; size * size];
    // Values and derivatives of each local function at each quadrature point, per half cell.
    let pts: Vec<f64> = [0.0, 0.5]
        .iter()
        .flat_map(|&a| rule.nodes.iter().map(move |&x| a + 0.5 * x))
        .collect();
    let wts: Vec<f64> = (0..2).flat_map(|_| rule.weights.iter().map(|w| 0.5 * w)).collect();
    let mut val = vec![vec![0.0; width]; pts.len()];
    let mut der = vec![vec![0.0; width]; pts.len()];
    for (q, &x) in pts.iter().enumerate() {
        for i in 0..width {
            let off = -r + i as isize;
            val[q][i] = bspline(n, x - off as f64);
            der[q][i] = if n > 0 { bspline_derivative(n, x - off as f64, 1) } else { 0.0 };
        }
    }
    let npts = pts.len();
    let qcount = npts.pow(dim as u32);
    let mut qi = vec![0usize; dim];
    let mut ki = vec![0usize; dim];
    let mut li = vec![0usize; dim];
    for qf in 0..qcount {
        let mut rem = qf;
        for a in (0..dim).rev() {
            qi[a] = rem % npts;
            rem /= npts;
        }
        let w: f64 = qi.iter().map(|&q| wts[q]).product::<f64>() * vol;
        for kf in 0..size {
            unflatten(kf, width, &mut ki);
            for lf in 0..size {
                unflatten(lf, width, &mut li);
                let v: f64 = match integrand {
                    Integrand::Mass => (0..dim).map(|a| val[qi[a]][ki[a]] * val[qi[a]][li[a]]).product(),
                    Integrand::Stiffness => (0..dim)
                        .map(|g| {
                            (0..dim)
                                .map(|a| {
                                    if a == g {
                                        der[qi[a]][ki[a]] * der[qi[a]][li[a]] / (h[a] * h[a])
                                    } else {
                                        val[qi[a]][ki[a]] * val[qi[a]][li[a]]
                                    }
                                })
                                .product::<f64>()
                        })
                        .sum(),
                };
                values[kf * size + lf] += w * v;
            }
        }
    }
    Ok(LocalKernel {
        first,
        width,
        values,
    })
}

fn unflatten(mut f: usize, width: usize, out: &mut [usize]) {
    for a in (0..out.len()).rev() {
        out[a] = f % width;
        f /= width;
    }
}

/// The grid-edge faces of the domain's bounding box.
pub fn grid_faces(grid: &Grid) -> Vec<Face> {
    Face::all(grid.dim())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid1(n: usize) -> Grid {
        Grid::new(vec![n], vec![1.0], vec![0.0]).unwrap()
    }

    #[test]
    fn grid_validation() {
        assert!(Grid::new(vec![1], vec![1.0], vec![0.0]).is_err());
        assert!(Grid::new(vec![3], vec![0.0], vec![0.0]).is_err());
        let g = Grid::spanning(&[-25.0], &[25.0], &[101]).unwrap();
        assert!((g.step()[0] - 0.5).abs() < 1e-15);
        assert_eq!(g.coeff_extents(3), vec![103]);
    }

    #[test]
    fn full_box_outer_ring_is_boundary() {
        let g = Grid::new(vec![5, 5], vec![1.0; 2], vec![0.0; 2]).unwrap();
        let c = classify_cells(&Domain::boxed(g)).unwrap();
        let interior: Vec<usize> = (0..16).filter(|&i| c[i] == CellClass::Interior).collect();
        assert_eq!(interior, vec![5, 6, 9, 10]);
        assert!(c.iter().all(|&x| x != CellClass::Exterior));
    }

    #[test]
    fn mask_example_1d() {
        let m = MaskDomain::new(grid1(5), vec![true, true, true, false]).unwrap();
        let c = classify_cells(&Domain::Mask(m)).unwrap();
        assert_eq!(c[2], CellClass::Boundary);
        assert_eq!(c[3], CellClass::Exterior);
        assert!(matches!(
            MaskDomain::new(grid1(3), vec![false, false]),
            Err(TbsError::EmptyDomain)
        ));
    }

    #[test]
    fn node_classes_on_mask() {
        // Cells 0..=3 occupied out of 8.
        let occ = (0..8).map(|i| i < 4).collect();
        let m = Domain::Mask(MaskDomain::new(grid1(9), occ).unwrap());
        let nc = classify_nodes(&m, 1);
        use NodeClass::*;
        assert_eq!(
            nc.classes,
            vec![Separable, Separable, Separable, Separable, Stored, Inactive, Inactive, Inactive, Inactive]
        );
        let nc3 = classify_nodes(&m, 3);
        assert_eq!(nc3.classes.len(), 11);
        assert_eq!(nc3.inactive, 4);
    }

    #[test]
    fn interior_cell_quadrature_is_misuse() {
        let g = Grid::new(vec![5, 5], vec![1.0; 2], vec![0.0; 2]).unwrap();
        let d = Domain::boxed(g);
        let b = BSplineBasis::unit(1, 2).unwrap();
        assert!(matches!(
            boundary_cell_quadrature(&d, &[1, 1], &b, Integrand::Mass),
            Err(TbsError::Misuse(_))
        ));
        let k = boundary_cell_quadrature(&d, &[0, 0], &b, Integrand::Mass).unwrap();
        // Bilinear element mass matrix diagonal is 1/9.
        assert!((k.get(0, 0) - 1.0 / 9.0).abs() < 1e-14);
        let total: f64 = k.values.iter().sum();
        assert!((total - 1.0).abs() < 1e-14);
    }
}
