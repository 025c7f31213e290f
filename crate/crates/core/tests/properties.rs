use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

use ensemble_bridge::controllers::{controllability_gramian, FeedforwardState, NoiseHistory};
use ensemble_bridge::marginals::{build_end_kernel, joint_coupling, sinkhorn, Axis, GridDensity};
use ensemble_bridge::simulator::{histogram_l1, run_pinned_bridge_with, simulate};
use ensemble_bridge::{averaged_input_map, averaged_state_map, gramian, mat_exp, EnsembleSystem, PropagatorCache, TimeGrid};

fn matrix(d: usize, c: usize) -> impl Strategy<Value = DMatrix<f64>> {
    prop::collection::vec(-1.5f64..1.5, d * c).prop_map(move |v| DMatrix::from_row_slice(d, c, &v))
}

fn rotation_like(n: usize, eps: f64) -> EnsembleSystem {
    EnsembleSystem::planar_rotation(n, eps, 1.0).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn exponential_group_law(a in matrix(2, 2), s in 0.0f64..1.0, t in 0.0f64..1.0) {
        let lhs = mat_exp(&a, s + t).unwrap();
        let rhs = mat_exp(&a, s).unwrap() * mat_exp(&a, t).unwrap();
        prop_assert!((&lhs - &rhs).amax() <= 1e-12 * (1.0 + lhs.amax()));
    }

    /// G_{t,s} = G_{t,τ} + e^{A(t−τ)} G_{τ,s} e^{Aᵀ(t−τ)} for a θ-independent pair.
    #[test]
    fn constant_gramian_composes(a in matrix(2, 2), b in matrix(2, 1), tau in 0.1f64..0.9) {
        let g = |t| controllability_gramian(&a, &b, t).unwrap();
        let e = mat_exp(&a, 1.0 - tau).unwrap();
        let lhs = g(1.0);
        let rhs = g(1.0 - tau) + &e * g(tau) * e.transpose();
        prop_assert!((&lhs - &rhs).amax() <= 1e-10 * (1.0 + lhs.amax()));
    }

    #[test]
    fn averaged_gramian_is_symmetric_and_monotone(s in 0.0f64..0.5, w in 0.05f64..0.5) {
        let ens = rotation_like(16, 1.0);
        let g1 = gramian(&ens, 1.0, s + w, 8).unwrap_or_else(|_| DMatrix::zeros(2, 2));
        let g2 = gramian(&ens, 1.0, s, 8).unwrap();
        prop_assert!((&g2 - g2.transpose()).amax() == 0.0);
        let diff = &g2 - &g1;
        prop_assert!(diff.symmetric_eigenvalues().min() >= -1e-12);
    }

    /// Splitting a node into two half-weight copies changes nothing.
    #[test]
    fn node_duplication_is_invisible(t in 0.0f64..1.0) {
        let ens = rotation_like(8, 1.0);
        let n = ens.node_count();
        let mut nodes = Vec::new();
        let mut weights = Vec::new();
        let mut a = Vec::new();
        let mut b = Vec::new();
        for j in 0..n {
            let copies = if j == 3 { 2 } else { 1 };
            for _ in 0..copies {
                nodes.push(ens.nodes()[j]);
                weights.push(ens.weights()[j] / copies as f64);
                a.push(ens.a(j).clone());
                b.push(ens.b(j).clone());
            }
        }
        let dup = EnsembleSystem::from_tables("dup", nodes, weights, a, b, 1.0, 1.0).unwrap();
        let m1 = averaged_state_map(&ens, t).unwrap();
        let m2 = averaged_state_map(&dup, t).unwrap();
        prop_assert!((&m1 - &m2).amax() < 1e-14);
        let p1 = averaged_input_map(&ens, 1.0, t).unwrap();
        let p2 = averaged_input_map(&dup, 1.0, t).unwrap();
        prop_assert!((&p1 - &p2).amax() < 1e-14);
    }

    /// Without noise the pinned law lands on any target.
    #[test]
    fn noiseless_pinned_law_lands(x0 in matrix(2, 1), xf in matrix(2, 1)) {
        let ens = rotation_like(16, 0.0);
        let grid = TimeGrid::new(1.0, 50).unwrap();
        let cache = PropagatorCache::build(&ens, grid).unwrap();
        let (x0, xf) = (x0.column(0).into_owned(), xf.column(0).into_owned());
        let traj = run_pinned_bridge_with(&ens, &cache, &x0, &xf, &NoiseHistory::zeros(grid, 2)).unwrap();
        prop_assert!(traj.terminal_error.unwrap() < 1e-10);
    }

    /// Changing noise from step j on leaves every earlier control and state untouched.
    #[test]
    fn pinned_law_is_causal(seed in 0u64..1000, j in 0usize..39, bump in -2.0f64..2.0) {
        let ens = rotation_like(8, 0.1);
        let grid = TimeGrid::new(1.0, 40).unwrap();
        let cache = PropagatorCache::build(&ens, grid).unwrap();
        let x0 = DVector::from_vec(vec![1.0, 0.0]);
        let xf = DVector::from_vec(vec![0.0, 1.0]);
        let h = NoiseHistory::sample(seed, grid, 2);
        let mut h2 = h.clone();
        for i in j..40 {
            h2.increment_mut(i)[0] += bump;
        }
        let run = |h: &NoiseHistory| {
            let mut ff = FeedforwardState::pinned(&ens, &cache, &x0, &xf).unwrap();
            simulate(&ens, &cache, &mut ff, &x0, h, false).unwrap()
        };
        let (a, b) = (run(&h), run(&h2));
        prop_assert_eq!(&a.u[..=j], &b.u[..=j]);
        prop_assert_eq!(&a.x_avg[..=j], &b.x_avg[..=j]);
    }

    /// Rescaling φ₀ by c and φ_f by 1/c leaves the coupling unchanged and
    /// both marginals are met.
    #[test]
    fn sinkhorn_marginals_and_gauge(
        v0 in prop::collection::vec(0.1f64..2.0, 24),
        vf in prop::collection::vec(0.1f64..2.0, 24),
        c in 0.01f64..100.0,
    ) {
        let ens = EnsembleSystem::scalar_decay(8, 0.2, 1.0).unwrap();
        let cache = PropagatorCache::build(&ens, TimeGrid::new(1.0, 10).unwrap()).unwrap();
        let axis = Axis::new(0.0, 1.0, 24).unwrap();
        let rho0 = GridDensity::new(vec![axis], v0).unwrap().normalized().unwrap();
        let rhof = GridDensity::new(vec![axis], vf).unwrap().normalized().unwrap();
        let k = build_end_kernel(&ens, &cache, &rho0, &rhof).unwrap();
        let pot = sinkhorn(&rho0, &rhof, &k, 1e-11, 100_000).unwrap();
        let cp = joint_coupling(&pot, &k);
        let vol = axis.spacing();
        for i in 0..24 {
            prop_assert!((cp.row(i).sum() / vol - rho0.values()[i]).abs() < 1e-8);
            prop_assert!((cp.column(i).sum() / vol - rhof.values()[i]).abs() < 1e-8);
        }
        let cg = joint_coupling(&pot.rescaled(c), &k);
        prop_assert!((&cg - &cp).amax() <= 1e-12 * cp.amax());
    }

    #[test]
    fn histogram_distance_is_bounded(xs in prop::collection::vec(-0.5f64..1.5, 1..200)) {
        let (_, rhof) = ensemble_bridge::marginals::build_cosine_marginals(32).unwrap();
        let samples: Vec<_> = xs.iter().map(|&x| DVector::from_element(1, x)).collect();
        let (l1, hist, outside) = histogram_l1(&samples, &rhof).unwrap();
        prop_assert!((0.0..=2.0 + 1e-12).contains(&l1));
        prop_assert!((hist.mass() + outside as f64 / xs.len() as f64 - 1.0).abs() < 1e-12);
    }
}
