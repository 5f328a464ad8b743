use conemv_core::bsde::{equilibrium_policy_random, solve_quadratic_bsde, BsdeConfig};
use conemv_core::cone::ConeSpec;
use conemv_core::equilibrium::solve_equilibrium;
use conemv_core::market::{sample_factor_paths, CoefficientBounds, DeterministicCoefficients, FactorThetaModel, Objective, OuParams, StepSchedule, TimeGrid};
use conemv_core::montecarlo::{simulate_wealth, spike_candidates, spike_variation_test, Feedback, Market, Scheme, SimulationConfig, SpikeConfig};

fn with_workers<T: Send>(n: usize, f: impl FnOnce() -> T + Send) -> T {
    rayon::ThreadPoolBuilder::new().num_threads(n).build().unwrap().install(f)
}

fn factor_model() -> FactorThetaModel {
    FactorThetaModel::new(
        1.0,
        StepSchedule::scalar(&[(0.0, 0.03)]).unwrap(),
        OuParams { kappa: 1.0, mean: 0.0, nu: 0.2, y0: 0.3 },
        0,
        vec![0.8, 0.2],
        vec![0.5, 0.0],
        CoefficientBounds::default(),
    )
    .unwrap()
}

#[test]
fn deterministic_simulation_ignores_worker_count() {
    let grid = TimeGrid::new(1.0, 100).unwrap();
    let coeffs = DeterministicCoefficients::constant(grid, 0.02, vec![0.7, -0.3]).unwrap();
    let cone = ConeSpec::nonnegative_orthant(2).unwrap();
    let obj = Objective::new(1.0, 0.0, 1.0).unwrap();
    let eq = solve_equilibrium(&coeffs, &cone, &obj).unwrap();
    for scheme in [Scheme::LogEuler, Scheme::Euler] {
        for antithetic in [false, true] {
            let cfg = SimulationConfig { scheme, antithetic, ..SimulationConfig::new(2000, 100, 5).unwrap() };
            let run = || simulate_wealth(Feedback::Linear(&eq.policy), Market::Deterministic(&coeffs), &obj, &cfg).unwrap();
            assert_eq!(with_workers(1, run), with_workers(4, run));
        }
    }
}

#[test]
fn spike_test_ignores_worker_count() {
    let grid = TimeGrid::new(1.0, 50).unwrap();
    let coeffs = DeterministicCoefficients::constant(grid, 0.0, vec![1.0]).unwrap();
    let cone = ConeSpec::nonnegative_orthant(1).unwrap();
    let obj = Objective::new(1.0, 0.0, 1.0).unwrap();
    let eq = solve_equilibrium(&coeffs, &cone, &obj).unwrap();
    let ws = spike_candidates(&eq.policy, &cone, 0.2).unwrap();
    let cfg = SpikeConfig { n_outer: 20, n_inner: 100, ..SpikeConfig::new(3) };
    let run = || spike_variation_test(&eq.policy, &coeffs, &cone, &obj, 0.2, &ws, &[0.04, 0.02], &cfg).unwrap();
    assert_eq!(with_workers(1, run), with_workers(3, run));
}

#[test]
fn bsde_and_factor_simulation_ignore_worker_count() {
    let model = factor_model();
    let cone = ConeSpec::nonnegative_orthant(2).unwrap();
    let obj = Objective::new(1.0, 0.0, 1.0).unwrap();
    let cfg = BsdeConfig::new(2000, 20, 3, 9).unwrap();
    let run = || {
        let sol = solve_quadratic_bsde(&model, &cone, 1.0, &cfg).unwrap();
        let check = sol.martingale_check(500, 10).unwrap();
        let alpha = equilibrium_policy_random(&sol);
        let sim = SimulationConfig::new(500, 20, 11).unwrap();
        let (xs, rep) = simulate_wealth(Feedback::State(&alpha), Market::Factor { model: &model, grid: *sol.grid() }, &obj, &sim).unwrap();
        let paths = sample_factor_paths(&model, sol.grid(), 10, 12).unwrap();
        let ys: Vec<f64> = (0..10).flat_map(|p| (0..=20).map(move |i| (p, i))).map(|(p, i)| paths.y(p, i)).collect();
        (sol, check, xs, rep, ys)
    };
    assert_eq!(with_workers(1, run), with_workers(4, run));
}
