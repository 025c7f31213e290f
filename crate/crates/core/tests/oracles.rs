use nalgebra::{dmatrix, DMatrix, DVector};
use rand::Rng;

use ensemble_bridge::controllers::{stream_rng, NoiseHistory};
use ensemble_bridge::oracles::{
    discrete_brute_force, discrete_closed_form, discrete_objective, discrete_terminal_residual, markov_bridge_oracle,
    markov_bridge_oracle_with, sweep_ensemble, DiscreteFeedforwardLaw,
};
use ensemble_bridge::{EnsembleSystem, PropagatorCache, TimeGrid};

#[test]
fn closed_form_beats_random_causal_perturbations() {
    let mut rng = stream_rng(17, 0);
    for (d, m) in [(1, 1), (2, 1), (2, 2)] {
        let (ens, cache) = sweep_ensemble(d, m, 1.0, 4).unwrap();
        let best = discrete_closed_form(&ens, &cache, 10.0).unwrap();
        let j0 = discrete_objective(&ens, &cache, &best);
        for _ in 0..100 {
            let mut law = best.clone();
            let scale = 10f64.powf(rng.random_range(-4.0..0.0));
            for b in law.f.iter_mut().flatten().chain(law.g.iter_mut()) {
                b.iter_mut().for_each(|v| *v += scale * rng.random_range(-1.0..1.0));
            }
            assert!(discrete_objective(&ens, &cache, &law) >= j0, "perturbation improved the objective");
        }
    }
}

#[test]
fn terminal_residual_is_non_increasing_in_weight() {
    for (d, m) in [(1, 1), (1, 2), (2, 1), (2, 2)] {
        let (ens, cache) = sweep_ensemble(d, m, 0.5, 4).unwrap();
        let mut last = f64::INFINITY;
        for a in [1.0, 10.0, 100.0, 1000.0] {
            let law = discrete_closed_form(&ens, &cache, a).unwrap();
            let r = discrete_terminal_residual(&ens, &cache, &law);
            assert!(r <= last + 1e-12, "(d,m)=({d},{m}) a={a}: {r} > {last}");
            last = r;
        }
    }
}

#[test]
fn brute_force_coefficient_vector_covers_causal_blocks_only() {
    assert_eq!(DiscreteFeedforwardLaw::coefficient_count(4, 2, 2), 4 * 10 + 16);
    let (ens, cache) = sweep_ensemble(2, 2, 1.0, 4).unwrap();
    let law = discrete_brute_force(&ens, &cache, 10.0).unwrap();
    assert!(law.is_finite());
    for (i, row) in law.f.iter().enumerate() {
        assert_eq!(row.len(), i + 1);
    }
}

#[test]
fn brute_force_refuses_oversized_problems() {
    let (ens, cache) = sweep_ensemble(1, 2, 1.0, 40).unwrap();
    assert!(discrete_brute_force(&ens, &cache, 1.0).is_err());
    assert!(discrete_closed_form(&ens, &cache, -1.0).is_err());
}

/// dx = (x_f − x)/(1 − t) dt + dW has x(t) = (1−t)x₀ + t x_f + (1−t)∫₀ᵗ dW/(1−s).
#[test]
fn unit_integrator_oracle_is_the_brownian_bridge() {
    let ens = EnsembleSystem::constant(dmatrix![0.0], dmatrix![1.0], 1.0, 1.0).unwrap();
    let mut worst = Vec::new();
    let fine = NoiseHistory::sample(21, TimeGrid::new(1.0, 800).unwrap(), 1);
    for factor in [4, 2, 1] {
        let hist = fine.coarsen(factor).unwrap();
        let grid = *hist.grid();
        let cache = PropagatorCache::build(&ens, grid).unwrap();
        let (x0, xf) = (DVector::from_element(1, 0.3), DVector::from_element(1, -0.2));
        let traj = markov_bridge_oracle_with(&ens, &cache, &x0, &xf, &hist).unwrap();
        let mut integral = 0.0;
        let mut dev: f64 = 0.0;
        for i in 1..=grid.steps() / 2 {
            let s = grid.time(i - 1);
            integral += hist.increment(i - 1)[0] / (1.0 - s);
            let t = grid.time(i);
            let want = (1.0 - t) * x0[0] + t * xf[0] + (1.0 - t) * integral;
            dev = dev.max((traj.x_avg[i][0] - want).abs());
        }
        worst.push(dev);
    }
    assert!(worst[2] < 5.0 * (1.0 / 800.0), "{worst:?}");
    assert!(worst[0] > worst[2], "{worst:?}");
}

#[test]
fn oracle_terminal_error_drops_under_refinement() {
    let a = dmatrix![0.0, 1.0; -1.0, 0.0];
    let b = dmatrix![0.0; 1.0];
    let (x0, xf) = (DVector::from_vec(vec![1.0, 0.0]), DVector::from_vec(vec![1.0, 1.0]));
    let mean_error = |k: usize| -> f64 {
        (0..100)
            .map(|s| {
                markov_bridge_oracle(&a, &b, 0.05, &x0, &xf, s, TimeGrid::new(1.0, k).unwrap())
                    .unwrap()
                    .terminal_error
                    .unwrap()
            })
            .sum::<f64>()
            / 100.0
    };
    assert!(mean_error(1000) <= mean_error(500));
}

#[test]
fn oracle_requires_a_controllable_pair() {
    let a = DMatrix::zeros(2, 2);
    let b = dmatrix![1.0; 0.0];
    let x = DVector::zeros(2);
    assert!(markov_bridge_oracle(&a, &b, 0.1, &x, &x, 0, TimeGrid::new(1.0, 10).unwrap()).is_err());
}
