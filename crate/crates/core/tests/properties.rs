//! Structural invariants checked on random inputs.

use proptest::prelude::*;

use tbspline::bspline::{eval_bspline, eval_bspline_derivative, Extension, SplineField};
use tbspline::domain::{Domain, Grid};
use tbspline::io::{RawTensorFile, TensorData};
use tbspline::kernels::{bilinear_kernel, trilinear_kernel};
use tbspline::operator::{build_operator, BoundaryWeights, Discretization, OperatorConfig, Strategy as Kind};
use tbspline::CoeffTensor;

fn config() -> ProptestConfig {
    ProptestConfig {
        cases: 48,
        ..ProptestConfig::default()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Random 2-D box discretization and two coefficient vectors of matching shape.
fn operator_case() -> impl Strategy<Value = (Discretization<f64>, Vec<f64>, Vec<f64>)> {
    (2usize..7, 2usize..7, 1usize..=3, 0usize..=2, any::<u64>()).prop_map(|(n0, n1, nb, np, seed)| {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let grid = Grid::new(vec![n0, n1], vec![0.3, 0.7], vec![0.0, 0.0]).unwrap();
        let domain = Domain::boxed(grid);
        let pext = domain.grid().coeff_extents(np);
        let m: usize = pext.iter().product();
        let disc = Discretization {
            domain,
            nb,
            np,
            diffusion: CoeffTensor::from_vec(pext.clone(), (0..m).map(|_| rng.gen_range(0.1..2.0)).collect()).unwrap(),
            absorption: CoeffTensor::from_vec(pext, (0..m).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap(),
            boundary: BoundaryWeights {
                edge: (0..4).map(|_| rng.gen_range(0.0..2.0)).collect(),
                interior: 0.0,
            },
        };
        let n: usize = disc.coeff_extents().iter().product();
        let u = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let v = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        (disc, u, v)
    })
}

fn apply(disc: &Discretization<f64>, strategy: Kind, threads: usize, c: &[f64]) -> Vec<f64> {
    let op = build_operator(
        disc.clone(),
        &OperatorConfig {
            strategy,
            threads,
            ..Default::default()
        },
    )
    .unwrap();
    let c = CoeffTensor::from_vec(disc.coeff_extents(), c.to_vec()).unwrap();
    op.apply(&c).unwrap().into_data()
}

proptest! {
    #![proptest_config(config())]

    #[test]
    fn bspline_partition_of_unity(n in 0usize..=5, x in -3.0f64..3.0) {
        let s: f64 = (-6..=6).map(|k| eval_bspline(n, x - k as f64).unwrap()).sum();
        prop_assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn bspline_symmetric_and_nonnegative(n in 0usize..=5, x in -4.0f64..4.0) {
        let a = eval_bspline(n, x).unwrap();
        prop_assert!(a >= 0.0);
        prop_assert!((a - eval_bspline(n, -x).unwrap()).abs() < 1e-14);
    }

    #[test]
    fn bspline_derivative_matches_difference_quotient(n in 2usize..=5, x in -3.0f64..3.0) {
        let h = 1e-6;
        let fd = (eval_bspline(n, x + h).unwrap() - eval_bspline(n, x - h).unwrap()) / (2.0 * h);
        prop_assert!((eval_bspline_derivative(n, x, 1).unwrap() - fd).abs() < 1e-6);
    }

    #[test]
    fn trilinear_collapse_is_bilinear(nb in 0usize..=3, np in 0usize..=3, da in 0usize..=1, db in 0usize..=1) {
        prop_assume!(da <= nb && db <= nb);
        let t = trilinear_kernel(nb, np, da, db).unwrap().table;
        let b = bilinear_kernel(nb, nb, da, db).unwrap();
        for (i, s) in t.row_sums().iter().enumerate() {
            prop_assert!((s - b.at(t.row_min + i as isize)).abs() < 1e-13);
        }
    }

    #[test]
    fn stiffness_kernel_symmetric_with_zero_sum(n in 1usize..=3) {
        let k = bilinear_kernel(n, n, 1, 1).unwrap();
        let span = n as isize + 1;
        let sum: f64 = (-span..=span).map(|o| k.at(o)).sum();
        prop_assert!(sum.abs() < 1e-13);
        for o in 0..=span {
            prop_assert!((k.at(o) - k.at(-o)).abs() < 1e-14);
        }
    }

    #[test]
    fn operator_symmetric_psd_linear((disc, u, v) in operator_case()) {
        for strategy in Kind::ALL {
            let au = apply(&disc, strategy, 1, &u);
            let av = apply(&disc, strategy, 1, &v);
            let scale = dot(&au, &au).sqrt() * dot(&v, &v).sqrt() + 1e-300;
            prop_assert!((dot(&au, &v) - dot(&u, &av)).abs() / scale < 1e-12);
            prop_assert!(dot(&au, &u) >= -1e-12 * scale);
            let w: Vec<f64> = u.iter().zip(&v).map(|(a, b)| 2.0 * a - 3.0 * b).collect();
            let aw = apply(&disc, strategy, 1, &w);
            for ((x, a), b) in aw.iter().zip(&au).zip(&av) {
                prop_assert!((x - (2.0 * a - 3.0 * b)).abs() < 1e-12 * (1.0 + x.abs()));
            }
        }
    }

    #[test]
    fn operator_deterministic_across_threads((disc, u, _v) in operator_case(), threads in 2usize..=8) {
        for strategy in Kind::ALL {
            let a: Vec<u64> = apply(&disc, strategy, 1, &u).iter().map(|x| x.to_bits()).collect();
            let b: Vec<u64> = apply(&disc, strategy, threads, &u).iter().map(|x| x.to_bits()).collect();
            prop_assert_eq!(a, b);
        }
    }

    #[test]
    fn neumann_operator_annihilates_constants((mut disc, _u, _v) in operator_case(), c in -5.0f64..5.0) {
        disc.absorption = CoeffTensor::zeros(disc.absorption.extents().to_vec());
        disc.boundary = BoundaryWeights::none(2);
        let n: usize = disc.coeff_extents().iter().product();
        for strategy in Kind::ALL {
            let y = apply(&disc, strategy, 1, &vec![c; n]);
            prop_assert!(y.iter().all(|v| v.abs() < 1e-11 * (1.0 + c.abs())));
        }
    }

    #[test]
    fn interpolation_reproduces_samples(
        n in 2usize..=5,
        ext in prop::sample::select(vec![Extension::Mirror, Extension::Zero, Extension::Replicate]),
        values in prop::collection::vec(-100.0f64..100.0, 8..40),
    ) {
        let len = values.len();
        let samples = CoeffTensor::from_vec(vec![len], values).unwrap();
        let grid = Grid::new(vec![len], vec![0.25], vec![1.0]).unwrap();
        let f = SplineField::interpolate(&samples, &grid.basis(n).unwrap(), vec![1.0], ext).unwrap();
        let scale = samples.max_abs().max(1.0);
        for (a, b) in f.sample_nodes().data().iter().zip(samples.data()) {
            prop_assert!((a - b).abs() < 1e-10 * scale);
        }
    }

    #[test]
    fn tensor_file_round_trip(
        degree in prop::option::of(0u8..=5),
        extents in prop::collection::vec(1usize..5, 1..=3),
        single in any::<bool>(),
    ) {
        let t = CoeffTensor::from_fn(extents, |i| i.iter().sum::<usize>() as f64 * 0.37 - 1.0);
        let data = if single { TensorData::F32(t.cast()) } else { TensorData::F64(t) };
        let file = RawTensorFile { degree: degree.map(usize::from), data };
        let back = RawTensorFile::decode(&file.encode().unwrap()).unwrap();
        prop_assert_eq!(back, file);
    }
}
