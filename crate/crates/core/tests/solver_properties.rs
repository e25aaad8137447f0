use gbcd::blockstore::{BlockInverses, InMemoryBlocks};
use gbcd::linalg::{self, condition_numbers, p_norm_sq, sym_eigvals, DenseMatrix};
use gbcd::partition::{contiguous_partition, random_partition, rate_bound_dense, Partition};
use gbcd::problem::{gen_block_dominant, gen_random_spd, in_memory_source, solve_direct, UqpProblem};
use gbcd::solvers::{
    run, score_blocks, BcdStrategy, BkStrategy, Method, OracleMetrics, Solver, SolverConfig, StopRule,
};
use proptest::prelude::*;

fn setup(prob: &UqpProblem, part: Partition) -> (InMemoryBlocks, BlockInverses) {
    let src = in_memory_source(prob, part).unwrap();
    let inv = BlockInverses::compute(&src, 1).unwrap();
    (src, inv)
}

fn dense(prob: &UqpProblem) -> &DenseMatrix {
    prob.dense().unwrap()
}

/// `I + T` with `T_ij = 1/(1+|i−j|)`, positive definite and well conditioned.
fn toeplitz(n: usize) -> UqpProblem {
    let mut p = DenseMatrix::identity(n);
    for i in 0..n {
        for j in 0..n {
            p.set(i, j, p.get(i, j) + 1.0 / (1.0 + i.abs_diff(j) as f64));
        }
    }
    let q = (0..n).map(|i| (i as f64 * 0.7).sin()).collect();
    UqpProblem::new(p, q, 0.0).unwrap()
}

fn method_strategy() -> impl Strategy<Value = Method> {
    prop_oneof![
        Just(Method::Gbcd),
        Just(Method::Bcd(BcdStrategy::RoundRobin)),
        Just(Method::Bcd(BcdStrategy::RandEigWeighted)),
        (1usize..5).prop_map(|r| Method::GbcdBs { r }),
        Just(Method::SteepestDescent),
        Just(Method::ConjugateGradient),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn p_norm_error_never_increases(seed in 0u64..1000, d in 1usize..6, method in method_strategy()) {
        let n = 30;
        let prob = gen_random_spd(n, seed).unwrap();
        let oracle = solve_direct(&prob).unwrap();
        let (src, inv) = setup(&prob, random_partition(n, d, seed).unwrap());
        let mut solver = Solver::new(&src, prob.q(), Some(&inv), SolverConfig::new(method).seed(seed)).unwrap();
        let e0 = p_norm_sq(&linalg::sub(solver.x(), &oracle.x_opt), dense(&prob)).unwrap().sqrt();
        let mut prev = 1.0;
        for _ in 0..60 {
            solver.step().unwrap();
            let e = p_norm_sq(&linalg::sub(solver.x(), &oracle.x_opt), dense(&prob)).unwrap().sqrt() / e0;
            prop_assert!(e <= prev + 1e-10, "{method:?}: {e} after {prev}");
            prev = e;
        }
    }

    #[test]
    fn kaczmarz_two_norm_error_never_increases(seed in 0u64..1000, d in 1usize..6, greedy in any::<bool>()) {
        let n = 30;
        let prob = gen_random_spd(n, seed).unwrap();
        let oracle = solve_direct(&prob).unwrap();
        let (src, _) = setup(&prob, random_partition(n, d, seed).unwrap());
        let strategy = if greedy { BkStrategy::Greedy } else { BkStrategy::RandRowNormSq };
        let mut solver = Solver::new(&src, prob.q(), None, SolverConfig::new(Method::Bk(strategy)).seed(seed)).unwrap();
        let mut prev = linalg::norm2(&linalg::sub(solver.x(), &oracle.x_opt));
        for _ in 0..60 {
            solver.step().unwrap();
            let e = linalg::norm2(&linalg::sub(solver.x(), &oracle.x_opt));
            prop_assert!(e <= prev * (1.0 + 1e-12) + 1e-12);
            prev = e;
        }
    }

    #[test]
    fn maintained_gradient_tracks_recomputed(seed in 0u64..1000, method in method_strategy()) {
        let n = 40;
        let prob = gen_block_dominant(n, 8, 10.0, 0.1, seed).unwrap();
        let (src, inv) = setup(&prob, contiguous_partition(n, 5).unwrap());
        let mut solver = Solver::new(&src, prob.q(), Some(&inv), SolverConfig::new(method).seed(seed)).unwrap();
        for _ in 0..50 {
            solver.step().unwrap();
        }
        let fresh = prob.eval_grad(solver.x()).unwrap();
        let gap = linalg::norm_inf(&linalg::sub(solver.grad().unwrap(), &fresh));
        prop_assert!(gap <= 1e-9 * (1.0 + linalg::norm_inf(prob.q())));
    }

    #[test]
    fn greedy_choice_maximizes_fresh_scores(seed in 0u64..1000, x_seed in 0u64..1000) {
        let n = 24;
        let prob = gen_random_spd(n, seed).unwrap();
        let (src, inv) = setup(&prob, random_partition(n, 4, seed).unwrap());
        let x0 = gen_random_spd(n, x_seed).unwrap().q().to_vec();
        let mut solver = Solver::new(&src, prob.q(), Some(&inv), SolverConfig::new(Method::Gbcd).x0(x0)).unwrap();
        for _ in 0..10 {
            let fresh = prob.eval_grad(solver.x()).unwrap();
            let scores = score_blocks(&fresh, &src, &inv);
            let best = scores.iter().map(|s| s.beta).fold(f64::NEG_INFINITY, f64::max);
            let report = solver.step().unwrap();
            let chosen = scores[report.block.unwrap()].beta;
            prop_assert!(chosen >= best * (1.0 - 1e-9));
        }
    }

    #[test]
    fn permuted_matrix_keeps_its_spectrum(seed in 0u64..1000, d in 1usize..8) {
        let n = 24;
        let prob = gen_random_spd(n, seed).unwrap();
        let p = dense(&prob);
        let part = random_partition(n, d, seed).unwrap();
        let perm = part.permutation();
        let a = sym_eigvals(p).unwrap();
        let b = sym_eigvals(&p.submatrix(&perm, &perm)).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() <= 1e-9 * (1.0 + x.abs()));
        }
    }

    #[test]
    fn inverse_rate_is_at_most_condition_number(seed in 0u64..1000, d in 1usize..8) {
        let n = 24;
        let prob = gen_block_dominant(n, 6, 10.0, 0.5, seed).unwrap();
        let p = dense(&prob);
        let report = rate_bound_dense(p, &random_partition(n, d, seed).unwrap()).unwrap();
        let (kappa, _) = condition_numbers(p).unwrap();
        prop_assert!(report.lambda_min_pb > 0.0);
        prop_assert!(1.0 / report.lambda_min_pb <= kappa * (1.0 + 1e-9));
        prop_assert!(report.lambda_min_pb >= 1.0 - report.dominance_gap - 1e-9);
    }
}

#[test]
fn single_row_block_selection_matches_greedy_singletons() {
    let n = 40;
    let prob = gen_random_spd(n, 11).unwrap();
    let (src, inv) = setup(&prob, Partition::singletons(n));
    let mut greedy = Solver::new(&src, prob.q(), Some(&inv), SolverConfig::new(Method::Gbcd)).unwrap();
    let mut rows = Solver::new(&src, prob.q(), None, SolverConfig::new(Method::GbcdBs { r: 1 })).unwrap();
    for _ in 0..100 {
        let a = greedy.step().unwrap();
        rows.step().unwrap();
        assert!(a.block.is_some());
        let gap = linalg::norm_inf(&linalg::sub(greedy.x(), rows.x()));
        assert!(gap <= 1e-10 * (1.0 + linalg::norm_inf(greedy.x())), "gap {gap}");
    }
}

#[test]
fn conjugate_gradient_terminates_in_n_steps() {
    let n = 12;
    let prob = toeplitz(n);
    let oracle = solve_direct(&prob).unwrap();
    let (src, _) = setup(&prob, contiguous_partition(n, 3).unwrap());
    let mut solver = Solver::new(&src, prob.q(), None, SolverConfig::new(Method::ConjugateGradient)).unwrap();
    for _ in 0..n {
        solver.step().unwrap();
    }
    let err = linalg::norm_inf(&linalg::sub(solver.x(), &oracle.x_opt));
    assert!(err <= 1e-9 * (1.0 + linalg::norm_inf(&oracle.x_opt)), "error {err}");
}

#[test]
fn steepest_descent_reaches_tolerance_with_full_rows() {
    let n = 32;
    let prob = toeplitz(n);
    let oracle = solve_direct(&prob).unwrap();
    let (src, _) = setup(&prob, contiguous_partition(n, 8).unwrap());
    let mut solver = Solver::new(&src, prob.q(), None, SolverConfig::new(Method::SteepestDescent)).unwrap();
    let mut trace = Vec::new();
    let metrics = OracleMetrics { oracle: &oracle, p: None };
    let res = run(&mut solver, &StopRule::iterations(500).eps(1e-6), Some(metrics), &mut trace).unwrap();
    assert!(res.converged());
    assert!(res.iterations > 2);
    assert!(trace[1..].iter().all(|r| r.rows_touched == n as u64 && r.blocks_fetched == 4));
}

#[test]
fn trace_reports_one_block_per_gbcd_step() {
    let n = 32;
    let prob = gen_block_dominant(n, 8, 10.0, 0.1, 1).unwrap();
    let oracle = solve_direct(&prob).unwrap();
    let (src, inv) = setup(&prob, contiguous_partition(n, 8).unwrap());
    let mut solver = Solver::new(&src, prob.q(), Some(&inv), SolverConfig::new(Method::Gbcd)).unwrap();
    let mut trace = Vec::new();
    let metrics = OracleMetrics { oracle: &oracle, p: None };
    let res = run(&mut solver, &StopRule::iterations(1000).eps(1e-8), Some(metrics), &mut trace).unwrap();
    assert!(res.converged());
    assert_eq!(trace.len(), res.iterations + 1);
    assert_eq!(trace[0].blocks_fetched, 0);
    assert!(trace[1..].iter().all(|r| r.blocks_fetched == 1 && r.rows_touched == 8));
    assert!(trace.windows(2).all(|w| w[1].wall_nanos >= w[0].wall_nanos));
}
