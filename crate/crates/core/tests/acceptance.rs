//! Exit-gate checks. Each criterion prints one `PASS`/`FAIL` line; the
//! process fails if any criterion fails.

mod common;

use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::sync::Arc;
use std::time::{Duration, Instant};

use clap::Parser;
use common::{max_abs_diff, two_block_literal, TwoBlockIterate};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use padpd::baseline::{admm_direct_multiblock, AdmmConfig};
use padpd::cli::{cmd_run, RunSpec};
use padpd::distributed::{
    metropolis_weights, solve_consensus, solve_consensus_logged, validate_weights, AccessLog,
    ConsensusConfig, ConsensusProblem,
};
use padpd::graph::Graph;
use padpd::operator::{
    build_operator, lipschitz_bound_norm_product, norm_1, norm_inf, spectral_norm,
};
use padpd::problems::{example1, random_qp};
use padpd::prox::{prox_numeric_oracle, ProxFunction, Quadratic, Zero, L1};
use padpd::solver::{frb_step, frb_step_ordered, solve, SolverConfig, SolverState, StopReason};
use padpd::trace::IterationRecord;
use rand::seq::SliceRandom;
use rand::Rng;

/// Committed iteration budget for the Example 1 gate. Seeded random starts
/// need about 3,000 to 4,000 iterations at the reference step sizes.
const EXAMPLE1_BUDGET: usize = 10_000;
const EXAMPLE1_GATE: f64 = 1e-4;
const RUNTIME_LIMIT: Duration = Duration::from_secs(5);
const PROPERTY_CASES: u64 = 128;

type Check = Result<String, String>;
type Criterion = (&'static str, fn() -> Check);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn first_below(records: &[IterationRecord], gate: f64) -> Option<usize> {
    records.iter().find(|r| r.error < gate).map(|r| r.k)
}

fn example1_gate(rho: f64, eta: f64) -> Check {
    let p = example1();
    let config = SolverConfig::default()
        .with_rho(rho)
        .with_eta(eta)
        .with_max_iter(EXAMPLE1_BUDGET)
        .with_tol(0.0);
    let start = Instant::now();
    let zero = solve(&p, &config, None).map_err(|e| e.to_string())?;
    let k0 = first_below(&zero.records, EXAMPLE1_GATE);
    ensure(k0.is_some(), || "zero start never met the gate".into())?;
    let mut worst = 0;
    for seed in 0..3 {
        let init = common::uniform_vec(&mut common::rng(seed), p.stacked_dim(), 1.0);
        let out = solve(&p, &config, Some((init.clone(), init))).map_err(|e| e.to_string())?;
        let k = first_below(&out.records, EXAMPLE1_GATE).ok_or_else(|| {
            format!(
                "seed {seed}: e_k stayed above {EXAMPLE1_GATE} for {EXAMPLE1_BUDGET} iterations"
            )
        })?;
        worst = worst.max(k);
    }
    let elapsed = start.elapsed();
    ensure(elapsed < RUNTIME_LIMIT, || format!("took {elapsed:?}"))?;
    Ok(format!(
        "zero start at k={}, random starts by k={worst} (budget {EXAMPLE1_BUDGET}), {:.0?}",
        k0.unwrap(),
        elapsed
    ))
}

fn criterion_1() -> Check {
    example1_gate(1.0, 1.0 / 50.0)
}

fn criterion_2() -> Check {
    example1_gate(0.0, 0.1)
}

fn criterion_3() -> Check {
    let p = example1();
    let m1 = spectral_norm(build_operator(&p, 1.0).unwrap().matrix(), 1e-8)
        .map_err(|e| e.to_string())?;
    let m0 = spectral_norm(build_operator(&p, 0.0).unwrap().matrix(), 1e-8)
        .map_err(|e| e.to_string())?;
    ensure((m1 - 21.3217).abs() <= 5e-4, || format!("‖M̃₁‖₂ = {m1}"))?;
    ensure((m0 - 4.5129).abs() <= 5e-4, || format!("‖M̃₀‖₂ = {m0}"))?;
    Ok(format!("‖M̃₁‖₂ = {m1:.6}, ‖M̃₀‖₂ = {m0:.6}"))
}

fn error_at(records: &[IterationRecord], k: usize) -> Option<f64> {
    records.iter().find(|r| r.k == k).map(|r| r.error)
}

fn criterion_4() -> Check {
    let p = example1();
    let mut min_ratio = f64::INFINITY;
    for rho in [0.5, 1.0, 2.0] {
        for seed in 0..3 {
            let init = common::uniform_vec(&mut common::rng(100 + seed), p.stacked_dim(), 1.0);
            ensure(init.iter().any(|v| *v != 0.0), || {
                "zero initialization drawn".into()
            })?;
            let admm = admm_direct_multiblock(
                &p,
                &AdmmConfig::default().with_rho(rho).with_max_iter(2_000),
                Some(init.clone()),
            )
            .map_err(|e| e.to_string())?;
            ensure(admm.diverged(), || {
                format!("ADMM rho={rho} seed={seed} not flagged divergent")
            })?;
            let e10 = error_at(&admm.records, 10).ok_or("no record at k=10")?;
            // a run flagged before k=1000 has already passed the threshold
            let e1000 = error_at(&admm.records, 1000).unwrap_or(admm.records.last().unwrap().error);
            min_ratio = min_ratio.min(e1000 / e10);
            ensure(e1000 >= 10.0 * e10, || {
                format!("rho={rho} seed={seed}: e1000/e10 = {}", e1000 / e10)
            })?;

            let cfg = SolverConfig::default()
                .with_rho(rho)
                .with_max_iter(50_000)
                .with_tol(0.0);
            let padpd = solve(&p, &cfg, Some((init.clone(), init))).map_err(|e| e.to_string())?;
            ensure(first_below(&padpd.records, EXAMPLE1_GATE).is_some(), || {
                format!("PADPD rho={rho} seed={seed} did not converge")
            })?;
        }
    }
    Ok(format!(
        "9/9 ADMM runs diverged (min e1000/e10 = {min_ratio:.2e}); PADPD converged on all"
    ))
}

fn criterion_5() -> Check {
    let mut r = common::rng(5);
    let mut worst: f64 = 0.0;
    for case in 0..20u64 {
        let q = 1 + (case % 3) as usize;
        let p = r.random_range(1..=4);
        let dims: Vec<usize> = (0..q).map(|_| r.random_range(1..=3)).collect();
        let g = random_qp(q, p, &dims, 1_000 + case).map_err(|e| e.to_string())?;
        let out = solve(
            &g.problem,
            &SolverConfig::default().with_max_iter(500_000),
            None,
        )
        .map_err(|e| e.to_string())?;
        ensure(out.stop == StopReason::Converged, || {
            format!("case {case}: {}", out.stop.as_str())
        })?;
        let d = max_abs_diff(&out.primal(), &g.primal());
        worst = worst.max(d);
        ensure(d <= 1e-6, || format!("case {case}: primal off by {d:e}"))?;
    }

    let g = random_qp(2, 3, &[2, 2], 77).map_err(|e| e.to_string())?;
    let p = &g.problem;
    let config = SolverConfig::default().with_max_iter(200_000);
    let op = build_operator(p, config.rho).unwrap();
    let eta = 0.9 / (2.0 * op.lipschitz());
    let p0 = common::uniform_vec(&mut r, op.dim(), 1.0);
    let pm1 = common::uniform_vec(&mut r, op.dim(), 1.0);
    let out = solve(
        p,
        &config.clone().with_eta(eta),
        Some((p0.clone(), pm1.clone())),
    )
    .map_err(|e| e.to_string())?;
    let steps = out.state.k;
    let literal = two_block_literal(
        &p.blocks()[0].matrix,
        &p.blocks()[1].matrix,
        p.c(),
        &p.blocks()[0].function,
        &p.blocks()[1].function,
        config.rho,
        eta,
        TwoBlockIterate::split(&p0, 2, 2),
        TwoBlockIterate::split(&pm1, 2, 2),
        steps,
    );
    let res: Vec<Arc<dyn ProxFunction>> = p.blocks().iter().map(|b| b.function.clone()).collect();
    let mut state = SolverState::new(&op, p0, pm1).unwrap();
    let mut trace_dev: f64 = 0.0;
    for (k, expect) in literal.iter().enumerate() {
        trace_dev = trace_dev.max(max_abs_diff(&state.current, &expect.stacked()));
        let rec = &out.records[k];
        let e = expect
            .x
            .iter()
            .chain(expect.z.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
        trace_dev = trace_dev.max((rec.error - e).abs());
        if k < steps {
            frb_step(&mut state, &op, &res, eta).map_err(|e| e.to_string())?;
        }
    }
    ensure(state.current == out.state.current, || {
        "stepped state differs from solve".into()
    })?;
    ensure(trace_dev <= 1e-14, || {
        format!("two-block trace deviates by {trace_dev:e}")
    })?;
    Ok(format!(
        "20 QPs within {worst:.1e}; two-block trace ({steps} steps) within {trace_dev:.1e}"
    ))
}

fn random_block_problem(seed: u64) -> padpd::BlockProblem {
    let mut r = common::rng(seed);
    let q = r.random_range(1..=3);
    let p = r.random_range(1..=4);
    let dims: Vec<usize> = (0..q).map(|_| r.random_range(1..=3)).collect();
    let blocks = dims
        .iter()
        .map(|&n| {
            let f: Arc<dyn ProxFunction> = match r.random_range(0..3) {
                0 => Arc::new(Zero::new(n)),
                1 => Arc::new(L1::new(r.random_range(0.0..2.0), n).unwrap()),
                _ => Arc::new(Quadratic::isotropic(r.random_range(0.1..3.0), n).unwrap()),
            };
            padpd::Block::new(common::uniform_mat(&mut r, p, n, 3.0), f)
        })
        .collect();
    padpd::BlockProblem::new(blocks, common::uniform_vec(&mut r, p, 2.0)).unwrap()
}

fn criterion_6() -> Check {
    let cases = PROPERTY_CASES;
    for seed in 0..cases {
        let p = random_block_problem(seed);
        let rho = common::rng(seed ^ 1).random_range(0.0..5.0);

        let m0 = build_operator(&p, 0.0).unwrap().matrix().clone();
        ensure(
            &m0 + m0.transpose() == DMatrix::zeros(m0.nrows(), m0.ncols()),
            || format!("case {seed}: M₀ not skew"),
        )?;

        let m = build_operator(&p, rho).unwrap().matrix().clone();
        let min_eig = SymmetricEigen::new((&m + m.transpose()) * 0.5)
            .eigenvalues
            .min();
        ensure(min_eig >= -1e-10 * m.amax().max(1.0), || {
            format!("case {seed}: λ_min = {min_eig}")
        })?;

        let exact = m.clone().svd(false, false).singular_values.max();
        let bound = lipschitz_bound_norm_product(&m).unwrap();
        ensure(exact <= bound * (1.0 + 1e-12) + 1e-12, || {
            format!("case {seed}: {exact} > {bound}")
        })?;
    }

    for seed in 0..cases {
        let mut r = common::rng(600 + seed);
        let n = r.random_range(1..=4);
        let f: Arc<dyn ProxFunction> = match seed % 3 {
            0 => Arc::new(Zero::new(n)),
            1 => Arc::new(L1::new(r.random_range(0.0..3.0), n).unwrap()),
            _ => {
                let a: Vec<f64> = (0..n).map(|_| r.random_range(0.0..5.0)).collect();
                let b: Vec<f64> = (0..n).map(|_| r.random_range(-3.0..3.0)).collect();
                Arc::new(Quadratic::with_center(a, b).unwrap())
            }
        };
        let x: Vec<f64> = (0..n).map(|_| r.random_range(-10.0..10.0)).collect();
        let eta = r.random_range(0.01..5.0);
        let closed = f.prox(&x, eta);
        let numeric = prox_numeric_oracle(f.as_ref(), &x, eta, 1e-13).map_err(|e| e.to_string())?;
        let d = closed
            .iter()
            .zip(&numeric)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        ensure(d <= 1e-8, || format!("prox case {seed}: {d:e}"))?;
    }

    for seed in 0..cases {
        let mut r = common::rng(1200 + seed);
        let q = r.random_range(1..=3);
        let dims: Vec<usize> = (0..q).map(|_| r.random_range(1..=3)).collect();
        let g = random_qp(q, r.random_range(1..=4), &dims, seed).map_err(|e| e.to_string())?;
        let rho = r.random_range(0.0..3.0);
        let op = build_operator(&g.problem, rho).unwrap();
        let eta = 0.9 / (2.0 * op.lipschitz());
        let res: Vec<Arc<dyn ProxFunction>> = g
            .problem
            .blocks()
            .iter()
            .map(|b| b.function.clone())
            .collect();

        let p0 = common::uniform_vec(&mut r, op.dim(), 2.0);
        let pm1 = common::uniform_vec(&mut r, op.dim(), 2.0);
        let mut a = SolverState::new(&op, p0.clone(), pm1.clone()).unwrap();
        let mut b = SolverState::new(&op, p0, pm1).unwrap();
        let mut order: Vec<usize> = (0..=q).collect();
        for _ in 0..5 {
            frb_step(&mut a, &op, &res, eta).unwrap();
            order.shuffle(&mut r);
            frb_step_ordered(&mut b, &op, &res, eta, &order).unwrap();
        }
        let bits = |v: &DVector<f64>| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        ensure(bits(&a.current) == bits(&b.current), || {
            format!("order case {seed} differs")
        })?;

        let mut fixed = SolverState::new(&op, g.solution.clone(), g.solution.clone()).unwrap();
        for _ in 0..100 {
            frb_step(&mut fixed, &op, &res, eta).unwrap();
        }
        let drift = max_abs_diff(&fixed.current, &g.solution);
        ensure(drift <= 1e-10, || {
            format!("fixed-point case {seed} drifted {drift:e}")
        })?;
    }
    Ok(format!("6 suites x {cases} cases"))
}

fn connected_graph(seed: u64) -> Graph {
    let mut r = common::rng(seed);
    let m = r.random_range(2..=9);
    let mut edges: Vec<(usize, usize)> = (1..m).map(|i| (r.random_range(0..i), i)).collect();
    for _ in 0..r.random_range(0..m * 2) {
        let (a, b) = (r.random_range(0..m), r.random_range(0..m));
        if a != b {
            edges.push((a, b));
        }
    }
    Graph::from_edges(m, &edges).unwrap()
}

fn criterion_7() -> Check {
    let targets = [1.0, 2.0, 3.0, 4.0, 5.0];
    let mean = 3.0;
    let ls_costs = || -> Vec<Arc<dyn ProxFunction>> {
        targets
            .iter()
            .map(|b| {
                Arc::new(Quadratic::with_center(vec![1.0], vec![*b]).unwrap())
                    as Arc<dyn ProxFunction>
            })
            .collect()
    };
    let mut summary = Vec::new();
    for (name, g) in [("cycle", Graph::cycle(5)), ("complete", Graph::complete(5))] {
        let p = ConsensusProblem::with_metropolis(g.clone(), ls_costs(), 1)
            .map_err(|e| e.to_string())?;
        let cfg = ConsensusConfig {
            eta: 0.2,
            keep_history: true,
            ..Default::default()
        };
        let mut log = AccessLog::default();
        let init = common::uniform_vec(&mut common::rng(7), 10, 1.0);
        let out = solve_consensus_logged(&p, &cfg, Some((init.clone(), init.clone())), &mut log)
            .map_err(|e| e.to_string())?;
        ensure(out.stop == StopReason::Converged, || {
            format!("{name}: {}", out.stop.as_str())
        })?;
        let err = out
            .x
            .iter()
            .map(|x| (x[0] - mean).abs())
            .fold(0.0, f64::max);
        ensure(err <= 1e-6, || {
            format!("{name}: off the average by {err:e}")
        })?;
        let violations = log.violations(&g);
        ensure(violations.is_empty(), || {
            format!("{name}: {} out-of-neighbourhood reads", violations.len())
        })?;

        let lifted = p.lifted();
        let op = build_operator(&lifted, 0.0).unwrap();
        let res: Vec<Arc<dyn ProxFunction>> =
            lifted.blocks().iter().map(|b| b.function.clone()).collect();
        let mut state = SolverState::new(&op, init.clone(), init).unwrap();
        let mut dev: f64 = 0.0;
        for (k, h) in out.history.iter().enumerate() {
            dev = dev.max(max_abs_diff(h, &state.current));
            if k + 1 < out.history.len() {
                frb_step(&mut state, &op, &res, 0.2).unwrap();
            }
        }
        ensure(dev <= 1e-12, || {
            format!("{name}: local vs compact deviation {dev:e}")
        })?;
        summary.push(format!(
            "{name}: {} rounds, dev {dev:.0e}, {} reads",
            out.rounds,
            log.entries.len()
        ));
    }

    let mut checked = 0;
    for seed in 0..PROPERTY_CASES {
        let g = connected_graph(seed);
        let w = metropolis_weights(&g);
        ensure(validate_weights(&w, &g).passes(), || {
            format!("graph {seed}: weights invalid")
        })?;
        let n = 1 + (seed % 2) as usize;
        let big = w.kronecker(&DMatrix::<f64>::identity(n, n));
        let a = DMatrix::<f64>::identity(big.nrows(), big.ncols()) - big;
        ensure(
            norm_1(&a) <= 2.0 + 1e-12 && norm_inf(&a) <= 2.0 + 1e-12,
            || format!("graph {seed}: norm > 2"),
        )?;
        checked += 1;
    }
    let cycle = ConsensusProblem::with_metropolis(Graph::cycle(5), ls_costs(), 1)
        .map_err(|e| e.to_string())?;
    solve_consensus(
        &cycle,
        &ConsensusConfig {
            eta: 0.2,
            ..Default::default()
        },
        None,
    )
    .map_err(|e| e.to_string())?;
    summary.push(format!("‖I−W‖₁,∞ ≤ 2 on {checked} graphs"));
    Ok(summary.join("; "))
}

fn criterion_8() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut traces = Vec::new();
    for run in 0..2 {
        let path = dir.path().join(format!("run{run}.csv"));
        let mut spec = RunSpec::try_parse_from([
            "padpd",
            "--problem",
            "example1",
            "--algorithm",
            "padpd",
            "--seed",
            "3",
        ])
        .map_err(|e| e.to_string())?;
        spec.trace = Some(path.clone());
        cmd_run(&spec, &mut Vec::new()).map_err(|e| e.to_string())?;
        traces.push(fs::read(&path).map_err(|e| e.to_string())?);
    }
    ensure(traces[0] == traces[1], || "traces differ".into())?;
    Ok(format!("{} bytes, identical", traces[0].len()))
}

fn main() {
    let criteria: [Criterion; 8] = [
        ("Example 1 convergence, rho = 1, eta = 1/50", criterion_1),
        ("Example 1 convergence, rho = 0, eta = 0.1", criterion_2),
        ("spectral norms of the Example 1 operators", criterion_3),
        ("direct ADMM diverges where PADPD converges", criterion_4),
        ("random QPs and two-block transcription", criterion_5),
        ("randomized property suites", criterion_6),
        ("distributed consensus", criterion_7),
        ("CLI trace determinism", criterion_8),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let outcome = panic::catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        match outcome {
            Ok(detail) => println!("PASS criterion {}: {name} ({detail})", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL criterion {}: {name} ({why})", i + 1);
            }
        }
    }
    println!(
        "acceptance: {} passed, {failed} failed",
        criteria.len() - failed
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
