//! File input through solve and export on a masked domain.

use tbspline::domain::Domain;
use tbspline::io::{self, MaskFile};
use tbspline::operator::Strategy;
use tbspline::pde::{solve_problem, BcSpec, BoundaryCondition, FieldSpec, ProblemSpec, RunConfig};
use tbspline::solver::SolveConfig;

/// Disc of radius 6 cells in a 16×16 voxel volume, bytes ramping with distance.
fn disc_mask() -> MaskFile {
    let values = (0..256)
        .map(|f| {
            let (i, j) = ((f / 16) as f64 + 0.5, (f % 16) as f64 + 0.5);
            let r = ((i - 8.0).powi(2) + (j - 8.0).powi(2)).sqrt();
            (255.0 * (1.0 - r / 12.0).max(0.0)) as u8
        })
        .collect();
    MaskFile {
        extents: vec![16, 16],
        threshold: 128,
        values,
    }
}

#[test]
fn reaction_equilibrium_on_masked_domain() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("disc.mask");
    io::write_mask(&path, &disc_mask()).unwrap();
    let mask = io::read_mask(&path).unwrap();
    assert_eq!(mask, disc_mask());
    let domain = Domain::Mask(mask.to_domain(vec![0.1, 0.1], vec![0.0, 0.0]).unwrap());
    // Without flux through the boundary the balance μ φ = q holds pointwise.
    let spec = ProblemSpec::new(
        domain,
        2,
        FieldSpec::custom(|x| 1.0 + x[0] * x[1]),
        FieldSpec::Constant(0.5),
        FieldSpec::Constant(3.0),
        BcSpec::Global(BoundaryCondition::Neumann),
    );
    for strategy in Strategy::ALL {
        let mut cfg = RunConfig {
            solve: SolveConfig {
                tol: 1e-12,
                ..Default::default()
            },
            ..Default::default()
        };
        cfg.operator.strategy = strategy;
        let sol = solve_problem(&spec, &cfg).unwrap();
        assert!(sol.report.converged);
        if strategy == Strategy::Onthefly {
            let classes = sol.node_classes.as_ref().unwrap();
            assert!(classes.stored > 0 && classes.separable > 0);
        }
        let v = sol.field.eval(&[0.8, 0.8]).unwrap();
        assert!((v - 6.0).abs() < 1e-8, "{}: {v}", strategy.name());
    }
}

#[test]
fn solution_exports_to_vtk() {
    let domain = Domain::Mask(disc_mask().to_domain(vec![0.1, 0.1], vec![0.0, 0.0]).unwrap());
    let spec = ProblemSpec::new(
        domain,
        1,
        FieldSpec::Constant(1.0),
        FieldSpec::Constant(0.0),
        FieldSpec::Constant(1.0),
        BcSpec::Global(BoundaryCondition::DirichletPenalty { g: 20.0, epsilon: None }),
    );
    let sol = solve_problem(&spec, &RunConfig::default()).unwrap();
    assert!(sol.report.converged);
    let centre = sol.field.eval(&[0.8, 0.8]).unwrap();
    assert!(centre > 20.0, "source raises the interior: {centre}");
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("out.vtk");
    io::export_vtk(&path, &sol.samples, spec.grid()).unwrap();
    let h = io::validate_vtk(&std::fs::read_to_string(&path).unwrap()).unwrap();
    assert_eq!(h.dimensions, [17, 17, 1]);
    assert_eq!(h.points, 289);
}
