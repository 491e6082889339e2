//! The simplex solver against the enumerating reference solver, plus the
//! polytope-level properties: feasibility, vertex support bound, and
//! cost-scaling equivariance.

use ndarray::Array2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use zsl_core::transport::{brute_force_transportation, solve_transportation, Marginals};

fn random_cost(rng: &mut ChaCha20Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-1.0..1.0))
}

fn assert_feasible(values: &Array2<f64>, m: &Marginals, tol: f64) {
    for (i, &target) in m.row.iter().enumerate() {
        assert!((values.row(i).sum() - target).abs() < tol, "row {i} sum");
    }
    for (j, &target) in m.col.iter().enumerate() {
        assert!((values.column(j).sum() - target).abs() < tol, "col {j} sum");
    }
    assert!(values.iter().all(|&x| x >= 0.0), "negative entry");
}

/// Random exactly-feasible point: start from the uniform interior point
/// and apply rebalancing moves on random 2x2 minors, which preserve both
/// marginals and nonnegativity. Independent of both solvers.
fn random_feasible(rng: &mut ChaCha20Rng, rows: usize, cols: usize) -> Array2<f64> {
    let mut c = Array2::from_elem((rows, cols), rows as f64 / (rows * cols) as f64);
    if rows < 2 || cols < 2 {
        return c;
    }
    for _ in 0..200 {
        let i1 = rng.gen_range(0..rows);
        let i2 = rng.gen_range(0..rows);
        let j1 = rng.gen_range(0..cols);
        let j2 = rng.gen_range(0..cols);
        if i1 == i2 || j1 == j2 {
            continue;
        }
        let room = c[[i1, j2]].min(c[[i2, j1]]);
        let delta = rng.gen_range(0.0..=1.0) * room;
        c[[i1, j1]] += delta;
        c[[i2, j2]] += delta;
        c[[i1, j2]] -= delta;
        c[[i2, j1]] -= delta;
    }
    c
}

#[test]
fn simplex_matches_brute_force_on_random_instances() {
    let mut rng = ChaCha20Rng::seed_from_u64(0x7a11_0001);
    let mut checked = 0;
    while checked < 120 {
        let rows = rng.gen_range(1..=3);
        let cols = rng.gen_range(1..=6);
        let cost = random_cost(&mut rng, rows, cols);
        let m = Marginals::for_correspondence(rows, cols).unwrap();
        let fast = solve_transportation(cost.view(), &m).unwrap();
        let slow = brute_force_transportation(cost.view(), &m).unwrap();
        assert!(
            (fast.objective - slow.objective).abs() < 1e-9,
            "{rows}x{cols}: simplex {} vs enumeration {}",
            fast.objective,
            slow.objective
        );
        assert_feasible(&fast.values, &m, 1e-9);
        assert_feasible(&slow.values, &m, 1e-9);
        let support = fast.values.iter().filter(|&&x| x != 0.0).count();
        assert!(support <= rows + cols - 1, "support {support}");
        checked += 1;
    }
}

#[test]
fn simplex_handles_tied_and_structured_costs() {
    let mut rng = ChaCha20Rng::seed_from_u64(0x7a11_0002);
    for _ in 0..40 {
        let rows = rng.gen_range(2..=3);
        let cols = rng.gen_range(2..=5);
        // Costs drawn from a tiny value set force many exact ties.
        let cost =
            Array2::from_shape_fn((rows, cols), |_| [0.0, 1.0, -1.0][rng.gen_range(0..3)]);
        let m = Marginals::for_correspondence(rows, cols).unwrap();
        let fast = solve_transportation(cost.view(), &m).unwrap();
        let slow = brute_force_transportation(cost.view(), &m).unwrap();
        assert!((fast.objective - slow.objective).abs() < 1e-9);
        assert_feasible(&fast.values, &m, 1e-9);
    }
}

#[test]
fn positive_scaling_keeps_the_vertex_and_scales_the_objective() {
    let mut rng = ChaCha20Rng::seed_from_u64(0x7a11_0003);
    for _ in 0..25 {
        let rows = rng.gen_range(1..=3);
        let cols = rng.gen_range(1..=6);
        let cost = random_cost(&mut rng, rows, cols);
        let factor = rng.gen_range(0.1..50.0);
        let m = Marginals::for_correspondence(rows, cols).unwrap();
        let base = solve_transportation(cost.view(), &m).unwrap();
        let scaled = solve_transportation(cost.mapv(|c| factor * c).view(), &m).unwrap();
        assert_eq!(base.values, scaled.values, "vertex changed under scaling");
        assert!(
            (scaled.objective - factor * base.objective).abs()
                <= 1e-12 * (1.0 + factor * base.objective.abs())
        );
    }
}

#[test]
fn brute_force_dominates_random_feasible_points() {
    let mut rng = ChaCha20Rng::seed_from_u64(0x7a11_0004);
    let cost = random_cost(&mut rng, 3, 4);
    let m = Marginals::for_correspondence(3, 4).unwrap();
    let best = brute_force_transportation(cost.view(), &m).unwrap();
    for _ in 0..1000 {
        let c = random_feasible(&mut rng, 3, 4);
        assert_feasible(&c, &m, 1e-9);
        let obj: f64 = cost.iter().zip(c.iter()).map(|(a, b)| a * b).sum();
        assert!(best.objective <= obj + 1e-12);
    }
}

#[test]
fn one_by_k_polytope_is_a_point() {
    let mut rng = ChaCha20Rng::seed_from_u64(0x7a11_0005);
    for cols in 1..=6 {
        let cost = random_cost(&mut rng, 1, cols);
        let m = Marginals::for_correspondence(1, cols).unwrap();
        let plan = brute_force_transportation(cost.view(), &m).unwrap();
        for j in 0..cols {
            assert!((plan.values[[0, j]] - 1.0 / cols as f64).abs() < 1e-12);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn prop_simplex_output_is_an_optimal_vertex(
        rows in 1usize..=3,
        cols in 1usize..=4,
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let cost = random_cost(&mut rng, rows, cols);
        let m = Marginals::for_correspondence(rows, cols).unwrap();
        let fast = solve_transportation(cost.view(), &m).unwrap();
        let slow = brute_force_transportation(cost.view(), &m).unwrap();
        prop_assert!((fast.objective - slow.objective).abs() < 1e-9);
        assert_feasible(&fast.values, &m, 1e-9);
        prop_assert!(fast.values.iter().filter(|&&x| x != 0.0).count() <= rows + cols - 1);
    }
}
