use ergomfg::ergodic::{solve_ergodic, ErgodicConfig};
use ergomfg::experiments::run_sweep;
use ergomfg::hj::TimeGrid;
use ergomfg::measures::GridMeasure;
use ergomfg::mfg::{FixedPointConfig, MFGProblem};
use ergomfg::model::{CouplingSpec, FourierSum, HamiltonianSpec};
use ergomfg::torus::{GridField, MollifierKernel, TorusGrid};

#[test]
fn decoupled_sweep_decays_like_one_over_horizon() {
    let g = TorusGrid::new(1, 128).unwrap();
    let spec = HamiltonianSpec::quadratic(FourierSum::cosine(1.0, 1).sample(g));
    let coupling = CouplingSpec::zero(MollifierKernel::bump(g, 0.15).unwrap());
    let erg = solve_ergodic(&spec, &coupling, &ErgodicConfig::default()).unwrap();
    assert!((erg.lambda - 1.0).abs() < 1e-2);

    let m0 = GridMeasure::normalized(g, (0..128).map(|i| 1.0 + 0.5 * (std::f64::consts::TAU * g.coords(i)[0]).sin()).collect()).unwrap();
    let problem = MFGProblem::new(spec, coupling, m0, GridField::zeros(g), TimeGrid::new(1.0, 10).unwrap()).unwrap();
    let report = run_sweep(&problem, &[5.0, 10.0, 20.0, 40.0], 0.01, &erg, &FixedPointConfig::default()).unwrap();

    assert!(report.verdicts.slope_u, "{}", report.slope_u);
    assert!((report.slope_u + 1.0).abs() < 0.1, "{}", report.slope_u);
    assert!(report.rows.iter().all(|r| r.e_f == 0.0 && r.energy == 0.0));
    assert!(report.verdicts.slope_f && report.verdicts.bounded_f && report.verdicts.energy_bounded);
    assert!(report.verdicts.lipschitz_uniform);
    // 1/T decay over a factor 8 in T moves e_u sqrt(T) by sqrt(8) > 2
    assert!(!report.verdicts.bounded_u);
}
