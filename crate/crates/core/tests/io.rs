use nalgebra::dvector;

use ensemble_bridge::controllers::NoiseHistory;
use ensemble_bridge::marginals::{build_cosine_marginals, GridDensity};
use ensemble_bridge::simulator::run_pinned_bridge_with;
use ensemble_bridge::{EnsembleSystem, PropagatorCache, TimeGrid};

#[test]
fn density_files_round_trip_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let (rho0, _) = build_cosine_marginals(64).unwrap();
    let path = dir.path().join("rho0.csv");
    rho0.save_csv(&path).unwrap();
    let back = GridDensity::load_csv(&path).unwrap();
    assert_eq!(back.values(), rho0.values());
    assert_eq!(back.axes(), rho0.axes());

    let single = dir.path().join("point.csv");
    std::fs::write(&single, "x1,x2,density\n0.5,-1.0,1.0\n").unwrap();
    let d = GridDensity::load_csv(&single).unwrap();
    assert!(d.is_dirac());
    assert!((d.point(0) - dvector![0.5, -1.0]).amax() < 1e-12);

    assert!(GridDensity::load_csv(&dir.path().join("missing.csv")).is_err());
}

#[test]
fn trajectory_files_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let ens = EnsembleSystem::planar_rotation(16, 0.05, 1.0).unwrap();
    let grid = TimeGrid::new(1.0, 30).unwrap();
    let cache = PropagatorCache::build(&ens, grid).unwrap();
    let (x0, xf) = (dvector![1.0, 0.0], dvector![1.0, 1.0]);
    let write = |name: &str| {
        let traj = run_pinned_bridge_with(&ens, &cache, &x0, &xf, &NoiseHistory::sample(8, grid, 2)).unwrap();
        let p = dir.path().join(name);
        traj.save_csv(&p).unwrap();
        std::fs::read(p).unwrap()
    };
    let (a, b) = (write("a.csv"), write("b.csv"));
    assert_eq!(a, b);
    let text = String::from_utf8(a).unwrap();
    assert!(text.starts_with("t,x1,x2,u1,u2,cost\n"));
    assert_eq!(text.lines().count(), 32);
}
