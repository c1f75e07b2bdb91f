use nalgebra::DMatrix;
use num_rational::Rational64;
use proptest::prelude::*;
use rarenet::kernel::{compute_kernel, enumerate_paths, validate_energy, KernelBlock, KernelConfig, KernelMatrix};
use rarenet::matrices::{
    assemble_feedback, householder_block, sinkhorn_balance, specular_permutation, uniform_block_exact, Design,
    UnilosslessConfig, SINKHORN_MAX_ITER, SINKHORN_TOL,
};
use rarenet::scene::{discretize, load_scene, Scene};

fn scene(name: &str) -> Scene {
    load_scene(format!("{}/../../scenes/{name}.json", env!("CARGO_MANIFEST_DIR"))).unwrap()
}

fn square(max: usize, zeros: bool) -> impl Strategy<Value = DMatrix<f64>> {
    (1..=max).prop_flat_map(move |n| {
        let entry = if zeros { prop_oneof![Just(0.0), 0.0..1.0f64].boxed() } else { (0.01..1.0f64).boxed() };
        prop::collection::vec(entry, n * n).prop_map(move |v| DMatrix::from_vec(n, n, v))
    })
}

fn single_block(values: DMatrix<f64>) -> KernelMatrix {
    let n = values.nrows();
    KernelMatrix { blocks: vec![KernelBlock { patch: 0, incoming: (0..n).collect(), outgoing: (0..n).collect(), values }], size: n }
}

fn orthogonality(b: &DMatrix<f64>) -> f64 {
    (b.transpose() * b - DMatrix::identity(b.ncols(), b.ncols())).abs().max()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn permutation_is_bijective(block in square(12, true)) {
        let mut cols = specular_permutation(&block).mapping;
        cols.sort_unstable();
        prop_assert_eq!(cols, (0..block.nrows()).collect::<Vec<_>>());
    }

    #[test]
    fn permutation_takes_the_largest_entry(block in square(12, false)) {
        let perm = specular_permutation(&block);
        let max = block.max();
        prop_assert!((0..block.nrows()).any(|r| block[(r, perm.mapping[r])] == max));
    }

    #[test]
    fn uniform_block_is_exactly_doubly_stochastic(block in square(12, true), num in 0i64..=64) {
        let perm = specular_permutation(&block);
        let exact = uniform_block_exact(&perm, Rational64::new(num, 64));
        let one = Rational64::from_integer(1);
        for r in &exact {
            prop_assert_eq!(r.iter().sum::<Rational64>(), one);
        }
        for c in 0..exact.len() {
            prop_assert_eq!(exact.iter().map(|r| r[c]).sum::<Rational64>(), one);
        }
    }

    #[test]
    fn householder_squares_are_doubly_stochastic(block in square(16, true)) {
        let b = householder_block(&specular_permutation(&block));
        prop_assert!(orthogonality(&b) < 1e-12);
        let e = b.component_mul(&b);
        for r in 0..e.nrows() {
            prop_assert!((e.row(r).sum() - 1.0).abs() < 1e-12);
            prop_assert!((e.column(r).sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn sinkhorn_scalings_reproduce_the_balanced_block(block in square(10, false)) {
        let bal = sinkhorn_balance(&block, SINKHORN_TOL, SINKHORN_MAX_ITER).unwrap();
        let rebuilt = DMatrix::from_fn(block.nrows(), block.ncols(), |i, j| bal.row_scaling[i] * block[(i, j)] * bal.col_scaling[j]);
        prop_assert!((rebuilt - &bal.matrix).abs().max() < 1e-12);
        prop_assert!(bal.deviation < SINKHORN_TOL);
    }

    #[test]
    fn line_similarity_is_positive_and_trivial_off_sinkhorn(block in square(8, false), sigma in 0.0..1.0f64) {
        let kernel = single_block(block);
        let cfg = UnilosslessConfig { restarts: 8, ..UnilosslessConfig::default() };
        for design in Design::ALL {
            let m = assemble_feedback(&kernel, design, &[sigma], &cfg).unwrap();
            let s = m.line_similarity();
            prop_assert_eq!(s.len(), kernel.size);
            if design == Design::Sinkhorn {
                prop_assert!(s.iter().all(|v| v.is_finite() && *v > 0.0));
            } else {
                prop_assert!(s.iter().all(|v| *v == 1.0));
            }
        }
    }
}

#[test]
fn balanced_similarity_is_one_for_doubly_stochastic_kernels() {
    let t = DMatrix::from_row_slice(3, 3, &[0.5, 0.3, 0.2, 0.2, 0.5, 0.3, 0.3, 0.2, 0.5]);
    let m = assemble_feedback(&single_block(t), Design::Sinkhorn, &[0.5], &UnilosslessConfig::default()).unwrap();
    for s in m.line_similarity() {
        assert!((s - 1.0).abs() < 1e-9, "{s}");
    }
}

#[test]
fn discretization_sizes() {
    let cases = [("hallway", 6.0, 6, 30), ("hallway", 3.0, 10, 82), ("hallway", 2.0, 14, 158), ("uneven", 3.0, 16, 208)];
    for (name, edge, n, m) in cases {
        let s = scene(name);
        let patches = discretize(&s, edge).unwrap();
        let paths = enumerate_paths(&patches, &s, 48000.0).unwrap();
        assert_eq!((patches.len(), paths.len()), (n, m), "{name} at {edge} m");
    }
}

#[test]
fn uneven_room_line_counts() {
    let s = scene("uneven");
    for (edge, m) in [(2.0, 1458), (1.5, 3328)] {
        let patches = discretize(&s, edge).unwrap();
        assert_eq!(enumerate_paths(&patches, &s, 48000.0).unwrap().len(), m);
    }
}

#[test]
fn scene_kernels_conserve_energy() {
    for name in ["hallway", "uneven", "nonconvex"] {
        let s = scene(name);
        let cfg = KernelConfig::default();
        let patches = discretize(&s, 6.0).unwrap().with_sample_spacing(&s, cfg.sample_spacing);
        let paths = enumerate_paths(&patches, &s, cfg.fs).unwrap();
        let kernel = compute_kernel(&patches, &paths, &s, &cfg).unwrap();
        let report = validate_energy(&kernel);
        assert!(report.pass, "{name}: {:?}", report.problems);
        for b in &report.blocks {
            assert!(b.max_column_sum > 0.99, "{name} patch {} loses energy: {}", b.patch, b.max_column_sum);
        }
    }
}
