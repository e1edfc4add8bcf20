//! Cross-cutting engine behavior: scheduling determinism, agreement between
//! the constrained and unconstrained dynamics when the shared constraints
//! are slack, and error payloads on blow-up.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

use nashtrack::engine::{RoundMode, RunOptions};
use nashtrack::game::{AgentSpec, CouplingBlock, QuadraticCost};
use nashtrack::network::build_ring;
use nashtrack::oracles::solve_ne;
use nashtrack::projection::ProjectionOperator;
use nashtrack::trades::{Trades, TradesParams};
use nashtrack::trades_c::{TradesC, TradesCParams};
use nashtrack::{AggregativeGame, Error, Profile};

/// Random strongly convex quadratic agents with a shared 1-D aggregate.
/// `slack_coupling` attaches one shared constraint row per agent with a huge
/// offset so it never binds.
fn random_game(n_agents: usize, dim: usize, seed: u64, slack_coupling: bool) -> AggregativeGame {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    // Costs first, couplings after, so the same seed yields identical costs
    // with and without the constraint blocks.
    let costs: Vec<QuadraticCost> = (0..n_agents)
        .map(|_| {
            let a = DMatrix::from_fn(dim, dim, |_, _| rng.gen_range(-1.0..1.0));
            let q = &a * a.transpose() + DMatrix::identity(dim, dim) * 2.0;
            let lin = DVector::from_fn(dim, |_, _| rng.gen_range(-1.0..1.0));
            let c = DMatrix::from_fn(dim, 1, |_, _| rng.gen_range(-0.2..0.2));
            let phi = DMatrix::from_fn(1, dim, |_, _| rng.gen_range(0.0..1.0));
            QuadraticCost::new(q, lin, c, phi).unwrap()
        })
        .collect();
    let agents = costs
        .into_iter()
        .map(|cost| {
            let coupling = slack_coupling.then(|| {
                let a = DMatrix::from_fn(1, dim, |_, _| rng.gen_range(-1.0..1.0));
                CouplingBlock::new(a, DVector::from_element(1, 1e6)).unwrap()
            });
            AgentSpec::new(Box::new(cost), ProjectionOperator::free(dim), coupling).unwrap()
        })
        .collect();
    AggregativeGame::new(agents).unwrap()
}

fn start_profile(game: &AggregativeGame, seed: u64) -> Profile {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let blocks: Vec<DVector<f64>> = (0..game.n_agents())
        .map(|i| DVector::from_fn(game.layout().dim(i), |_, _| rng.gen_range(-1.0..1.0)))
        .collect();
    Profile::from_blocks(&blocks)
}

#[test]
fn parallel_rounds_match_sequential_bitwise() {
    let game = random_game(6, 2, 11, false);
    let net = build_ring(6, 0.5).unwrap();
    let x0 = start_profile(&game, 12);
    let params = TradesParams {
        delta: 0.5,
        gamma: 0.05,
    };
    let opts = RunOptions::default().with_max_iters(150).with_tol(None);

    let mut seq = Trades::new(&game, &net, params, &x0).unwrap();
    let seq_report = seq.run(&opts).unwrap();

    let mut par = Trades::new(&game, &net, params, &x0).unwrap();
    par.set_mode(RoundMode::Parallel);
    let par_report = par.run(&opts).unwrap();

    assert_eq!(seq_report.rows.len(), par_report.rows.len());
    for (a, b) in seq_report.rows.iter().zip(&par_report.rows) {
        assert_eq!(a.iter, b.iter);
        // Bitwise equality: scheduling must not change a single ulp.
        assert_eq!(a.step_norm.to_bits(), b.step_norm.to_bits());
        assert_eq!(a.tracking_err_max.to_bits(), b.tracking_err_max.to_bits());
        assert_eq!(a.mean_z_norm.to_bits(), b.mean_z_norm.to_bits());
    }
    assert_eq!(
        seq.x().as_vector().as_slice(),
        par.x().as_vector().as_slice()
    );
}

#[test]
fn parallel_rounds_match_sequential_bitwise_constrained() {
    let game = random_game(6, 2, 21, true);
    let net = build_ring(6, 0.6).unwrap();
    let x0 = start_profile(&game, 22);
    let params = TradesCParams {
        delta: 0.05,
        rho: 0.1,
    };
    let opts = RunOptions::default().with_max_iters(150).with_tol(None);

    let mut seq = TradesC::new(&game, &net, params, &x0, None).unwrap();
    let seq_report = seq.run(&opts).unwrap();

    let mut par = TradesC::new(&game, &net, params, &x0, None).unwrap();
    par.set_mode(RoundMode::Parallel);
    let par_report = par.run(&opts).unwrap();

    for (a, b) in seq_report.rows.iter().zip(&par_report.rows) {
        assert_eq!(a.step_norm.to_bits(), b.step_norm.to_bits());
        assert_eq!(a.mean_z_norm.to_bits(), b.mean_z_norm.to_bits());
        assert_eq!(a.mean_y_norm.to_bits(), b.mean_y_norm.to_bits());
        assert_eq!(a.lambda_min.to_bits(), b.lambda_min.to_bits());
        assert_eq!(
            a.dual_consensus_err.to_bits(),
            b.dual_consensus_err.to_bits()
        );
    }
    assert_eq!(
        seq.x().as_vector().as_slice(),
        par.x().as_vector().as_slice()
    );
}

#[test]
fn locality_guard_does_not_change_the_iterates() {
    let game = random_game(5, 2, 31, false);
    let net = build_ring(5, 0.5).unwrap();
    let x0 = start_profile(&game, 32);
    let params = TradesParams {
        delta: 0.5,
        gamma: 0.05,
    };
    let opts = RunOptions::default().with_max_iters(60).with_tol(None);

    let mut plain = Trades::new(&game, &net, params, &x0).unwrap();
    plain.run(&opts).unwrap();

    let mut guarded = Trades::new(&game, &net, params, &x0).unwrap();
    guarded.set_guard(true);
    guarded.run(&opts).unwrap();
    let reads = guarded.take_reads();
    assert!(!reads.is_empty(), "the guard should have recorded reads");

    assert_eq!(
        plain.x().as_vector().as_slice(),
        guarded.x().as_vector().as_slice()
    );
}

#[test]
fn slack_shared_constraints_reduce_to_the_unconstrained_equilibrium() {
    // The same costs once with never-binding shared constraints and once
    // without any; both dynamics must land on the same point, and the
    // multiplier of the constrained run must die out.
    let coupled = random_game(5, 2, 41, true);
    let plain = random_game(5, 2, 41, false);
    let net = build_ring(5, 0.6).unwrap();
    let x0 = start_profile(&plain, 42);

    let x_star = solve_ne(&plain, 0.05, 1e-12, 2_000_000).unwrap();

    let opts = RunOptions::default()
        .with_max_iters(60_000)
        .with_tol(Some(1e-12));
    let mut unconstrained = Trades::new(
        &plain,
        &net,
        TradesParams {
            delta: 0.5,
            gamma: 0.01,
        },
        &x0,
    )
    .unwrap();
    unconstrained.run(&opts).unwrap();

    let mut constrained = TradesC::new(
        &coupled,
        &net,
        TradesCParams {
            delta: 0.05,
            rho: 0.1,
        },
        &x0,
        None,
    )
    .unwrap();
    constrained.run(&opts).unwrap();

    let norm = x_star.norm();
    assert!(unconstrained.x().distance(&x_star) / norm < 1e-6);
    assert!(
        constrained.x().distance(&x_star) / norm < 1e-5,
        "constrained distance {}",
        constrained.x().distance(&x_star) / norm
    );
    assert!(constrained.lambda_mean().amax() < 1e-8);
}

#[test]
fn divergence_carries_the_last_finite_profile() {
    let game = random_game(4, 2, 51, false);
    let net = build_ring(4, 0.5).unwrap();
    let x0 = start_profile(&game, 52);
    // A step size far beyond the stable range blows the iterates up.
    let mut eng = Trades::new(
        &game,
        &net,
        TradesParams {
            delta: 0.5,
            gamma: 1e8,
        },
        &x0,
    )
    .unwrap();
    let err = eng
        .run(&RunOptions::default().with_max_iters(10_000).with_tol(None))
        .unwrap_err();
    match err {
        Error::Divergence {
            iteration,
            last_finite,
            ..
        } => {
            assert!(iteration > 0);
            assert!(last_finite.as_vector().iter().all(|v| v.is_finite()));
        }
        other => panic!("expected divergence, got {other}"),
    }
}
