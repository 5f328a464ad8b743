use std::path::Path;

use conemv_core::bsde::{deterministic_limit, equilibrium_policy_random, solve_quadratic_bsde};
use conemv_core::equilibrium;
use conemv_core::equilibrium::{compare_strategies, evaluate_linear_feedback, precommit_solution, solve_equilibrium, LinearFeedbackPolicy, PolicyValue};
use conemv_core::market::{sample_factor_paths, DeterministicCoefficients, TimeGrid};
use conemv_core::montecarlo::{simulate_wealth, spike_candidates, spike_variation_test, Feedback, Market, SimulationReport};

use crate::config::{MarketModel, RunConfig};
use crate::output::{header, indexed, real, vector, Output};
use crate::{CliError, SimPolicy, VerifyPolicy, EXIT_FAILED, EXIT_OK, EXIT_SUSPECT};

fn value_row(name: &str, v: &PolicyValue) -> Vec<String> {
    vec![name.into(), real(v.mean_t), real(v.var_t), real(v.j0)]
}

pub fn solve(cfg: &RunConfig, out: &Output, compare: bool, feedback: Option<&Path>) -> Result<u8, CliError> {
    let coeffs = cfg.deterministic(if compare { "compare" } else { "solve" })?;
    let cone = cfg.cone()?;
    let objective = cfg.objective()?;
    let eq = solve_equilibrium(&coeffs, &cone, &objective)?;
    let pre = precommit_solution(&coeffs, &cone, &objective)?;
    let grid = coeffs.grid();
    let l = coeffs.dim();

    let mut head = header(&["time", "M", "rho"]);
    head.extend(indexed("c", l));
    head.extend(indexed("c_cell", l));
    head.extend(indexed("pre_slope", l));
    head.extend(indexed("pre_intercept", l));
    let rows: Vec<Vec<String>> = (0..=grid.n_steps())
        .map(|i| {
            let mut r = vec![real(grid.node(i)), real(eq.m[i]), real(eq.rho[i])];
            r.extend(eq.node_feedback[i].iter().map(|x| real(*x)));
            let cell = i.min(grid.n_steps() - 1);
            r.extend(eq.policy.slope(cell).iter().map(|x| real(*x)));
            r.extend(pre.policy.slope(cell).iter().map(|x| real(*x)));
            r.extend(pre.node_intercept[i].iter().map(|x| real(*x)));
            r
        })
        .collect();
    out.csv("policy.csv", &head, &rows)?;

    let mut rows = vec![value_row("equilibrium", &eq.value), value_row("precommit", &pre.value)];
    let mut code = EXIT_OK;
    if compare {
        let fbe = feedback.map(|p| read_policy(p, grid, l)).transpose()?;
        let report = compare_strategies(&coeffs, &cone, &objective, fbe.as_ref())?;
        if let Some(v) = &report.feedback {
            rows.push(value_row("feedback", v));
        }
        for v in &report.violations {
            eprintln!("ordering violated: J({}) = {} vs J_pre = {}", v.strategy.name(), v.j, v.j_pre);
            code = EXIT_FAILED;
        }
    }
    out.csv("report.csv", &header(&["strategy", "mean_T", "var_T", "J0"]), &rows)?;
    println!("J_eq = {:.10}  J_pre = {:.10}  V_pre = {:.10}", eq.value.j0, pre.value.j0, pre.v_pre);
    Ok(code)
}

/// Reads a per-cell policy: `time, c_1..c_l` or `time, c_1..c_l, g_1..g_l`.
fn read_policy(path: &Path, grid: &TimeGrid, l: usize) -> Result<LinearFeedbackPolicy, CliError> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| CliError::Usage(format!("cannot read policy file {}: {e}", path.display())))?;
    let width = rdr.headers()?.len();
    if width != 1 + l && width != 1 + 2 * l {
        return Err(CliError::Usage(format!("policy file has {width} columns; expected {} (time, c) or {} (time, c, g)", 1 + l, 1 + 2 * l)));
    }
    let mut slope = Vec::new();
    let mut intercept = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        if rec.len() != width {
            return Err(CliError::Usage(format!("policy file row {} has {} columns; expected {width}", i + 1, rec.len())));
        }
        let vals = rec
            .iter()
            .map(|s| s.trim().parse::<f64>().map_err(|e| CliError::Usage(format!("policy file row {}: {e}", i + 1))))
            .collect::<Result<Vec<_>, _>>()?;
        if grid.node_index(vals[0]) != Some(i) {
            return Err(CliError::Usage(format!("policy file row {} has time {}; expected grid node {}", i + 1, vals[0], grid.node(i))));
        }
        slope.push(vals[1..1 + l].to_vec());
        if width == 1 + 2 * l {
            intercept.push(vals[1 + l..].to_vec());
        }
    }
    let intercept = if width == 1 + 2 * l { Some(intercept) } else { None };
    Ok(LinearFeedbackPolicy::new(*grid, slope, intercept)?)
}

fn sim_rows(label: &str, rep: &SimulationReport, analytic: Option<&PolicyValue>) -> Vec<Vec<String>> {
    let check = analytic.map(|a| rep.check(a, 3.0));
    let meta =
        vec![label.to_string(), rep.scheme.as_str().into(), rep.n_paths.to_string(), rep.n_steps.to_string(), rep.seed.to_string(), rep.antithetic.to_string()];
    let row = |q: &str, est: String, se: String, an: String, ok: String| {
        let mut r = meta.clone();
        r.extend([q.to_string(), est, se, an, ok]);
        r
    };
    let opt = |x: Option<f64>| x.map(real).unwrap_or_default();
    let flag = |b: Option<bool>| b.map(|b| b.to_string()).unwrap_or_default();
    vec![
        row("mean_T", real(rep.mean_t), real(rep.mean_se), opt(analytic.map(|a| a.mean_t)), flag(check.map(|c| c.mean_ok))),
        row("var_T", real(rep.var_t), real(rep.var_se), opt(analytic.map(|a| a.var_t)), flag(check.map(|c| c.var_ok))),
        row("J0", real(rep.j0), real(rep.j0_se), opt(analytic.map(|a| a.j0)), flag(check.map(|c| c.j0_ok))),
        row("min_T", real(rep.min_t), String::new(), String::new(), String::new()),
        row("max_T", real(rep.max_t), String::new(), String::new(), String::new()),
        row("nonpositive_paths", rep.nonpositive_paths.to_string(), String::new(), String::new(), String::new()),
    ]
}

pub fn simulate(cfg: &RunConfig, out: &Output, policy: SimPolicy, file: Option<&Path>, dump_paths: bool) -> Result<u8, CliError> {
    let objective = cfg.objective()?;
    let cone = cfg.cone()?;
    let sim = cfg.simulation()?;
    let market_model = cfg.market_model()?;
    let (terminal, report, analytic, label) = match (&market_model, policy) {
        (MarketModel::Deterministic(coeffs), SimPolicy::Equilibrium) => {
            let eq = solve_equilibrium(coeffs, &cone, &objective)?;
            let (xs, rep) = simulate_wealth(Feedback::Linear(&eq.policy), Market::Deterministic(coeffs), &objective, &sim)?;
            (xs, rep, Some(eq.value), "equilibrium")
        }
        (MarketModel::Deterministic(coeffs), SimPolicy::Precommit) => {
            let pre = precommit_solution(coeffs, &cone, &objective)?;
            let (xs, rep) = simulate_wealth(Feedback::Precommit(&pre), Market::Deterministic(coeffs), &objective, &sim)?;
            (xs, rep, Some(pre.value), "precommit")
        }
        (MarketModel::Factor { .. }, SimPolicy::Precommit) => {
            return Err(CliError::Usage("the precommitted strategy needs a deterministic theta".into()));
        }
        (_, SimPolicy::File) => {
            let path = file.ok_or_else(|| CliError::Usage("--policy file needs --policy-file PATH".into()))?;
            let grid = cfg.grid()?;
            let (market, dim) = match &market_model {
                MarketModel::Deterministic(c) => (Market::Deterministic(c), c.dim()),
                MarketModel::Factor { model, grid } => (Market::Factor { model, grid: *grid }, model.dim()),
            };
            let p = read_policy(path, &grid, dim)?;
            let analytic = match &market_model {
                MarketModel::Deterministic(c) if !p.is_affine() => Some(evaluate_linear_feedback(c, &p, &objective)?),
                _ => None,
            };
            let (xs, rep) = simulate_wealth(Feedback::Linear(&p), market, &objective, &sim)?;
            (xs, rep, analytic, "file")
        }
        (MarketModel::Factor { model, grid }, SimPolicy::Equilibrium) => {
            let sol = solve_quadratic_bsde(model, &cone, objective.mu1, &cfg.bsde(grid.n_steps())?)?;
            let alpha = equilibrium_policy_random(&sol);
            let (xs, rep) = simulate_wealth(Feedback::State(&alpha), Market::Factor { model, grid: *grid }, &objective, &sim)?;
            if alpha.clamped() > 0 || sol.floor_binds() {
                eprintln!("warning: the positivity floor was active ({} clamped evaluations)", alpha.clamped());
            }
            (xs, rep, None, "equilibrium")
        }
    };
    let mut head = header(&["policy", "scheme", "n_paths", "n_steps", "seed", "antithetic"]);
    head.extend(header(&["quantity", "estimate", "se", "analytic", "within_3se"]));
    out.csv("sim_report.csv", &head, &sim_rows(label, &report, analytic.as_ref()))?;
    if dump_paths {
        let rows: Vec<Vec<String>> = terminal.iter().enumerate().map(|(p, x)| vec![p.to_string(), real(*x)]).collect();
        out.csv("terminal_wealth.csv", &header(&["path_id", "X_T"]), &rows)?;
    }
    println!(
        "mean_T = {:.6} ± {:.6}  var_T = {:.6} ± {:.6}  J0 = {:.6} ± {:.6}",
        report.mean_t, report.mean_se, report.var_t, report.var_se, report.j0, report.j0_se
    );
    Ok(EXIT_OK)
}

fn parse_w(spec: &str, candidates: &[Vec<f64>]) -> Result<Vec<f64>, CliError> {
    Ok(match spec.trim() {
        "zero" | "0" => candidates[0].clone(),
        "c" => candidates[1].clone(),
        "2c" => candidates[2].clone(),
        "c+e1" => candidates[3].clone(),
        literal => {
            let v = literal
                .split(';')
                .map(|s| s.trim().parse::<f64>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|_| CliError::Usage(format!("--w {literal:?}: expected zero, c, 2c, c+e1 or a vector like \"0.5;1\"")))?;
            if v.len() != candidates[0].len() {
                return Err(CliError::Usage(format!("--w {literal:?} has {} components; expected {}", v.len(), candidates[0].len())));
            }
            v
        }
    })
}

pub fn verify(cfg: &RunConfig, out: &Output, t: Option<Vec<f64>>, w: Option<Vec<String>>, eps: Option<Vec<f64>>, policy: VerifyPolicy) -> Result<u8, CliError> {
    let coeffs: DeterministicCoefficients = cfg.deterministic("verify")?;
    let cone = cfg.cone()?;
    let objective = cfg.objective()?;
    let times = t.unwrap_or_else(|| cfg.numerics.spike.t.clone());
    let eps = eps.unwrap_or_else(|| cfg.numerics.spike.eps.clone());
    let w_specs = w.unwrap_or_else(|| ["zero", "c", "2c", "c+e1"].map(String::from).to_vec());
    let p = match policy {
        VerifyPolicy::Equilibrium => solve_equilibrium(&coeffs, &cone, &objective)?.policy,
        VerifyPolicy::Zero => LinearFeedbackPolicy::zero(*coeffs.grid(), coeffs.dim()),
    };
    let spike = cfg.spike();
    let mut rows = Vec::new();
    let mut all_pass = true;
    for &t in &times {
        let candidates = spike_candidates(&p, &cone, t)?;
        let ws = w_specs.iter().map(|s| parse_w(s, &candidates)).collect::<Result<Vec<_>, _>>()?;
        let report = spike_variation_test(&p, &coeffs, &cone, &objective, t, &ws, &eps, &spike)?;
        for r in &report.records {
            all_pass &= r.pass;
            rows.push(vec![
                real(r.t),
                real(r.epsilon),
                vector(&r.w),
                real(r.dj_over_eps),
                real(r.se),
                real(r.first_order),
                real(r.second_order),
                real(r.kappa),
                real(r.se_expansion),
                r.pass.to_string(),
                r.matches_expansion.to_string(),
            ]);
        }
    }
    let head = header(&["t", "epsilon", "w", "dJ_over_eps", "se", "first_order", "second_order", "kappa", "se_expansion", "pass", "matches_expansion"]);
    out.csv("spike.csv", &head, &rows)?;
    println!("{} spike tests, {}", rows.len(), if all_pass { "all pass" } else { "FAILURES" });
    Ok(if all_pass { EXIT_OK } else { EXIT_FAILED })
}

pub fn bsde(cfg: &RunConfig, out: &Output, factor_paths: usize) -> Result<u8, CliError> {
    let MarketModel::Factor { model, .. } = cfg.market_model()? else {
        return Err(CliError::Usage("`bsde` needs a factor-driven theta ([market.factor]); use `solve` for deterministic theta".into()));
    };
    let cone = cfg.cone()?;
    let objective = cfg.objective()?;
    let bcfg = cfg.bsde(cfg.numerics.bsde.steps)?;
    let sol = solve_quadratic_bsde(&model, &cone, objective.mu1, &bcfg)?;
    let grid = *sol.grid();
    let n = grid.n_steps();
    let l = model.dim();
    let p = bcfg.basis_degree + 1;

    let mut head = header(&["time", "mean_y", "sd_y", "M_at_mean_y"]);
    head.extend((0..p).map(|k| format!("m_coef_{k}")));
    for c in 1..=l {
        head.extend((0..p).map(|k| format!("u{c}_coef_{k}")));
    }
    head.extend(header(&["min_M", "max_abs_U", "residual_rms"]));
    let pad = |coef: &[f64]| (0..p).map(|k| real(coef.get(k).copied().unwrap_or(0.0))).collect::<Vec<_>>();
    let mut rows = Vec::with_capacity(n + 1);
    for (i, f) in sol.fits().iter().enumerate() {
        let mut r = vec![real(grid.node(i)), real(f.mean_y), real(f.sd_y), real(sol.m_at(i, f.mean_y)?)];
        r.extend(pad(&f.m_coef));
        for u in &f.u_coef {
            r.extend(pad(u));
        }
        r.extend([real(f.min_m), real(f.max_u), real(f.residual_rms)]);
        rows.push(r);
    }
    let mut last = vec![real(grid.horizon()), String::new(), String::new(), real(1.0)];
    last.extend(std::iter::repeat(String::new()).take(p * (l + 1)));
    last.extend([real(1.0), real(0.0), real(0.0)]);
    rows.push(last);
    out.csv("bsde.csv", &head, &rows)?;

    let check = sol.martingale_check(bcfg.n_paths, bcfg.seed)?;
    let rows: Vec<Vec<String>> =
        check.iter().enumerate().map(|(i, (m, se))| vec![real(grid.node(i)), real(*m), real(*se), ((*m).abs() <= 3.0 * se + 1e-14).to_string()]).collect();
    out.csv("bsde_check.csv", &header(&["time", "residual_mean", "residual_se", "within_3se"]), &rows)?;

    let mut code = EXIT_OK;
    if model.nu == 0.0 {
        let det = deterministic_limit(&model, &grid)?;
        let exact = equilibrium::compute_m(&det, &cone, objective.mu1)?;
        let mut y = model.y0;
        let zero = vec![0.0; l];
        let mut worst: f64 = 0.0;
        let mut rows = Vec::with_capacity(n + 1);
        for (i, e) in exact.iter().enumerate() {
            let m = sol.m_at(i, y)?;
            let rel = (m / e - 1.0).abs();
            worst = worst.max(rel);
            rows.push(vec![real(grid.node(i)), real(y), real(m), real(*e), real(rel)]);
            y = model.advance(y, grid.dt(), &zero);
        }
        out.csv("bsde_consistency.csv", &header(&["time", "y", "M_bsde", "M_analytic", "rel_error"]), &rows)?;
        println!("deterministic limit: max relative M error {worst:.3e}");
        if worst > 0.01 {
            code = EXIT_FAILED;
        }
    }
    if factor_paths > 0 {
        let paths = sample_factor_paths(&model, &grid, factor_paths, bcfg.seed)?;
        let mut head = header(&["path_id", "step", "time", "Y"]);
        head.extend(indexed("theta", l));
        let mut rows = Vec::new();
        for pid in 0..factor_paths {
            for i in 0..=n {
                let mut r = vec![pid.to_string(), i.to_string(), real(grid.node(i)), real(paths.y(pid, i))];
                r.extend(paths.theta(pid, i).iter().map(|x| real(*x)));
                rows.push(r);
            }
        }
        out.csv("factor_paths.csv", &head, &rows)?;
    }
    let d = &sol.diagnostics;
    println!("min M = {:.6}  max |U| = {:.6}  floor = {:.6}  floor binding = {}", d.min_m, d.max_abs_u, sol.floor(), d.floor_binding);
    if sol.floor_binds() {
        eprintln!("warning: the truncation floor binds; the solution is suspect");
        return Ok(EXIT_SUSPECT);
    }
    Ok(code)
}
