use criterion::{criterion_group, criterion_main, Criterion};
use goalgrid_core::grid::{build_grid, stencil_at};
use goalgrid_core::hjb::{
    hamiltonian_min, solve_last_period, step_backward_two_goal, PolicyGrid, SolverConfig,
};
use goalgrid_core::model::{benchmark_ladder, MarketParams};
use goalgrid_core::coupling::couple_at_deadline;
use goalgrid_core::solve::{solve_full, GridSpec};
use std::hint::black_box;

fn hamiltonian_sweep(c: &mut Criterion) {
    let market = MarketParams::default();
    let pgrid = PolicyGrid::new(0.25).unwrap();
    let (axis, _) = build_grid(10.0, 0.2, 0.0, 1.0, 0.2).unwrap();
    let n = axis.count;
    // Smooth strictly decreasing dummy surface with curvature and cross term.
    let v: Vec<f64> = (0..n * n)
        .map(|cell| {
            let x1 = axis.coord(cell / n);
            let x2 = axis.coord(cell % n);
            9.0 * (-0.4 * x1 - 0.3 * x2 - 0.05 * x1 * x2).exp()
        })
        .collect();
    c.bench_function("hamiltonian_min full slice", |b| {
        b.iter(|| {
            let mut acc = 0.0;
            for i in 0..n {
                for j in 0..n {
                    let st = stencil_at(&[axis, axis], &v, &[i, j]);
                    let eval =
                        hamiltonian_min(&market, &pgrid, &[axis.coord(i), axis.coord(j)], &st);
                    acc += eval.value;
                }
            }
            black_box(acc)
        })
    });
}

fn last_period_solve(c: &mut Criterion) {
    let market = MarketParams::default();
    let ladder = benchmark_ladder();
    let config = SolverConfig::default();
    let (axis, times) = build_grid(10.0, 0.2, 1.0, 2.0, 0.05).unwrap();
    c.bench_function("last period 51 cells x 20 steps", |b| {
        b.iter(|| {
            black_box(solve_last_period(&market, &ladder, &axis, &times, &config).unwrap())
        })
    });
}

fn coupling_slice(c: &mut Criterion) {
    let market = MarketParams::default();
    let ladder = benchmark_ladder();
    let config = SolverConfig::default();
    let (axis, times) = build_grid(10.0, 0.2, 1.0, 2.0, 0.05).unwrap();
    let last = solve_last_period(&market, &ladder, &axis, &times, &config).unwrap();
    let slice = last.surface.slice(0).to_vec();
    c.bench_function("deadline coupling 51x51", |b| {
        b.iter(|| black_box(couple_at_deadline(&ladder, &axis, &slice)))
    });
}

fn two_goal_step(c: &mut Criterion) {
    let market = MarketParams::default();
    let ladder = benchmark_ladder();
    let config = SolverConfig::default();
    let goal = ladder.goals[0];
    let pgrid = PolicyGrid::new(config.allocation_step_coarse).unwrap();
    let (axis, times) = build_grid(10.0, 0.2, 1.0, 2.0, 0.05).unwrap();
    let last = solve_last_period(&market, &ladder, &axis, &times, &config).unwrap();
    let coupled = couple_at_deadline(&ladder, &axis, last.surface.slice(0));
    c.bench_function("two-goal implicit step 51x51", |b| {
        b.iter(|| {
            black_box(
                step_backward_two_goal(
                    &market,
                    &pgrid,
                    &config,
                    goal.penalty_in,
                    goal.penalty_out,
                    &axis,
                    &coupled.values,
                    0.2,
                    9.0,
                    0.8,
                )
                .unwrap(),
            )
        })
    });
}

fn full_coarse_solve(c: &mut Criterion) {
    let market = MarketParams::default();
    let ladder = benchmark_ladder();
    let grid = GridSpec {
        x_max: 10.0,
        dx: 0.5,
        dt_two_goal: 0.25,
        dt_last: 0.05,
    };
    let config = SolverConfig::default();
    c.bench_function("full solve coarse grid", |b| {
        b.iter(|| black_box(solve_full(&market, &ladder, &grid, &config).unwrap()))
    });
}

criterion_group!(
    benches,
    hamiltonian_sweep,
    last_period_solve,
    coupling_slice,
    two_goal_step,
    full_coarse_solve
);
criterion_main!(benches);
