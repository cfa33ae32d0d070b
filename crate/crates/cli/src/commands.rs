//! One function per subcommand, each returning a populated [`RunReport`] and
//! any CSV summary rows.

use gbsde::bsde::{
    compare_solutions, fit_decay_rate, horizon_bound_constant, k_properties_check,
    max_z_per_slice, solve_bsde, solve_infinite_horizon, solve_linear_direct,
    solve_linear_explicit, solve_truncation, truncation_bound_check,
};
use gbsde::config::ExperimentConfig;
use gbsde::expr::Expr;
use gbsde::extspace::{
    girsanov_drift, verify_product_structure, CoeffSym, DriftMap, IndexMaps, LinComb, MeasureTerm,
};
use gbsde::gcore::{check_assumptions, sigma_bounds, CheckReport, SamplePlan};
use gbsde::lattice::{build_tree, GirsanovMode, NodeState, ScenarioTree, TimeGrid};
use gbsde::linearize::{max_residual, verify_linearization};
use gbsde::{Error, Result};
use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use serde_json::json;

use crate::report::{CsvRow, RunReport};

/// Evaluates a terminal-payoff expression at a node state; evaluation faults
/// surface as NaN and are caught by the solver's finiteness guard.
pub fn terminal_fn(xi: &Expr) -> impl Fn(&NodeState<f64>) -> f64 + '_ {
    move |s: &NodeState<f64>| {
        let env = |name: &str| match name {
            "t" => Some(s.t),
            _ => name
                .strip_prefix('b')
                .and_then(|x| x.parse::<usize>().ok())
                .filter(|i| (1..=s.b.len()).contains(i))
                .map(|i| s.b[i - 1]),
        };
        xi.eval(&env).unwrap_or(f64::NAN)
    }
}

fn sample_plan(cfg: &ExperimentConfig, seed_override: Option<u64>, samples: Option<usize>) -> SamplePlan {
    SamplePlan {
        samples: samples.unwrap_or(cfg.run.samples),
        seed: seed_override.unwrap_or(cfg.run.seed),
        scale: 3.0,
    }
}

fn build_run_tree(cfg: &ExperimentConfig, steps: usize, budget: usize) -> Result<ScenarioTree<f64>> {
    let grid = TimeGrid::new(0.0, cfg.run.t_end, steps)?;
    build_tree(&cfg.theta, &grid, budget)
}

fn xi_sup(tree: &ScenarioTree<f64>, xi: &Expr) -> Result<f64> {
    let term = terminal_fn(xi);
    let n = tree.grid().steps();
    let mut sup: f64 = 0.0;
    for idx in 0..tree.levels()[n].len() {
        sup = sup.max(term(&tree.state(n, idx)?).abs());
    }
    Ok(sup)
}

pub fn verify_extspace(dim: usize, samples: usize, seed: u64) -> Result<RunReport> {
    let mut report = RunReport::new("verify-extspace", dim, seed);
    let maps = IndexMaps::new(dim)?;

    let mut h_table = serde_json::Map::new();
    let mut hat_table = serde_json::Map::new();
    let mut bar_table = serde_json::Map::new();
    for i in 1..=dim {
        for j in (i + 1)..=dim {
            h_table.insert(format!("{i},{j}"), json!(gbsde::extspace::index_h(i, j, dim)?));
            for k in 1..=dim {
                bar_table.insert(
                    format!("{i},{j},{k}"),
                    json!(gbsde::extspace::index_bar(i, j, k, dim)?),
                );
            }
        }
        for k in 1..=dim {
            if k != i {
                hat_table.insert(format!("{i},{k}"), json!(gbsde::extspace::index_hat(i, k, dim)?));
            }
        }
    }

    // Product structure over seeded well-conditioned matrices.
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut max_dev: f64 = 0.0;
    for _ in 0..samples {
        let mut th = DMatrix::from_fn(dim, dim, |_, _| rng.gen_range(-1.0f64..1.0));
        for i in 0..dim {
            th[(i, i)] += 2.0;
        }
        let pr = verify_product_structure(&th)?;
        max_dev = max_dev.max(pr.max_deviation);
    }
    report.push_check(&CheckReport {
        name: "product-structure".into(),
        pass: max_dev < 1e-10,
        worst_margin: 1e-10 - max_dev,
        witness: (max_dev >= 1e-10).then(|| format!("max deviation {max_dev:.3e}")),
    });

    // Drift accumulation must collapse to b^m on ds, d^{ii,m} on the diagonal
    // brackets and 2 d^{ij,m} on the mixed ones.
    let mut drift_ok = true;
    let mut drift_witness = None;
    for m in 1..=dim {
        let mut expected = DriftMap::new();
        expected.insert(MeasureTerm::Ds, LinComb::from([(CoeffSym::B(m), 1)]));
        for i in 1..=dim {
            expected.insert(
                MeasureTerm::Qv(i, i),
                LinComb::from([(CoeffSym::d(i, i, m), 1)]),
            );
            for j in (i + 1)..=dim {
                expected.insert(
                    MeasureTerm::Qv(i, j),
                    LinComb::from([(CoeffSym::d(i, j, m), 2)]),
                );
            }
        }
        let got = girsanov_drift(m, dim)?;
        if got != expected {
            drift_ok = false;
            drift_witness = Some(format!("accumulated drift differs for coordinate m = {m}"));
            break;
        }
    }
    report.push_check(&CheckReport {
        name: "drift-identity".into(),
        pass: drift_ok,
        worst_margin: if drift_ok { 0.0 } else { -1.0 },
        witness: drift_witness,
    });

    report.outputs = json!({
        "d_tilde": maps.d_tilde(),
        "index_tables": { "h": h_table, "hat": hat_table, "bar": bar_table },
        "product_max_deviation": max_dev,
        "samples": samples,
    });
    Ok(report)
}

pub fn verify_linearization_cmd(
    cfg: &ExperimentConfig,
    seed: Option<u64>,
    samples: Option<usize>,
    eps: Option<f64>,
) -> Result<RunReport> {
    let gen = cfg.require_generator()?;
    let plan = sample_plan(cfg, seed, samples);
    let eps = eps.unwrap_or(cfg.run.eps);
    let mut report = RunReport::new("verify-linearization", cfg.theta.dim(), plan.seed);
    let checks = verify_linearization(gen, &cfg.theta, &plan, eps)?;
    report.push_checks(&checks);

    // Residual magnitude must scale linearly in the clipping width.
    let eps_grid = [1e-1, 1e-2, 1e-3];
    let mut residuals = Vec::new();
    for &e in &eps_grid {
        residuals.push(max_residual(gen, &cfg.theta, &plan, e)?);
    }
    let mut scaling_ok = true;
    let mut worst_ratio = f64::INFINITY;
    for w in residuals.windows(2) {
        let ratio = w[0] / w[1].max(1e-300);
        // Linear scaling across a decade, within factor 2.
        if !(5.0..=20.0).contains(&ratio) {
            scaling_ok = false;
        }
        worst_ratio = worst_ratio.min(ratio);
    }
    report.push_check(&CheckReport {
        name: "eps-scaling".into(),
        pass: scaling_ok,
        worst_margin: worst_ratio,
        witness: (!scaling_ok).then(|| format!("decade ratios from residuals {residuals:?}")),
    });

    report.outputs = json!({
        "eps": eps,
        "samples": plan.samples,
        "residual_by_eps": eps_grid
            .iter()
            .zip(&residuals)
            .map(|(e, r)| json!({ "eps": e, "max_residual": r }))
            .collect::<Vec<_>>(),
    });
    Ok(report)
}

pub fn verify_assumptions_cmd(cfg: &ExperimentConfig, seed: Option<u64>) -> Result<RunReport> {
    let gen = cfg.require_generator()?;
    let plan = sample_plan(cfg, seed, None);
    let mut report = RunReport::new("verify-assumptions", cfg.theta.dim(), plan.seed);
    let checks = check_assumptions(gen, &cfg.theta, &plan)?;
    report.push_checks(&checks);
    let bars = sigma_bounds(&cfg.theta);
    report.outputs = json!({
        "sigma_bar_sq_total": bars.total,
        "sigma_lower": cfg.theta.sigma_lower(),
        "mu": gen.mu,
    });
    Ok(report)
}

pub struct SolveOutput {
    pub report: RunReport,
    pub rows: Vec<CsvRow>,
}

pub fn solve_fh(
    cfg: &ExperimentConfig,
    steps_override: Option<usize>,
    budget: usize,
    dump_tree_stats: bool,
) -> Result<SolveOutput> {
    let d = cfg.theta.dim();
    let steps = steps_override.unwrap_or(cfg.run.steps);
    let mut report = RunReport::new("solve-fh", d, cfg.run.seed);
    report.steps = Some(steps);
    let tree = build_run_tree(cfg, steps, budget)?;
    report.dt = Some(tree.grid().dt());

    let term = terminal_fn(&cfg.run.xi);
    let sol = if let Ok(gen) = cfg.require_generator() {
        solve_bsde(&tree, &cfg.theta, gen, &term)?
    } else {
        let coeffs = cfg.require_linear().map_err(|_| {
            Error::parse("config: solve-fh needs a [generator] or [linear] section")
        })?;
        solve_linear_direct(&tree, &cfg.theta, coeffs, &term)?
    };

    let k_check = k_properties_check(&tree, &sol);
    report.push_check(&k_check);

    // A-priori bound when the dissipativity constant is declared.
    let mut bound = None;
    let mut margin = None;
    if let Ok(gen) = cfg.require_generator() {
        if let Some(mu) = gen.mu {
            let sup = xi_sup(&tree, &cfg.run.xi)?;
            let decay = (-mu * cfg.run.t_end).exp();
            let b = sup * decay + horizon_bound_constant(gen, &cfg.theta)? * (1.0 - decay);
            bound = Some(b);
            margin = Some(b - sol.y0().abs());
        }
    }

    let z_slices = max_z_per_slice(&tree, &sol);
    let mut outputs = serde_json::Map::new();
    outputs.insert("Y0".into(), json!(sol.y0()));
    outputs.insert("Z0".into(), json!(sol.z0().as_slice().to_vec()));
    outputs.insert("K_T_min".into(), json!(sol.k_t_min(&tree)));
    outputs.insert(
        "K_T_root_upper_expectation".into(),
        json!(sol.k_root_upper_expectation(&tree)),
    );
    outputs.insert("root_control".into(), json!(sol.control[0][0]));
    outputs.insert("max_z_per_slice".into(), json!(z_slices));
    if let Some(b) = bound {
        outputs.insert("bound".into(), json!(b));
        outputs.insert("margin".into(), json!(margin));
    }
    if dump_tree_stats {
        outputs.insert(
            "tree_stats".into(),
            json!({
                "node_count": tree.node_count(),
                "nodes_per_level": tree.levels().iter().map(|l| l.len()).collect::<Vec<_>>(),
            }),
        );
    }
    report.outputs = serde_json::Value::Object(outputs);

    let row = CsvRow {
        command: "solve-fh".into(),
        dim: d,
        steps,
        dt: tree.grid().dt(),
        y0: sol.y0(),
        z0: sol.z0().as_slice().to_vec(),
        k_t_min: sol.k_t_min(&tree),
        bound,
        margin,
        runtime_ms: 0,
    };
    println!("Y0 = {:.12}", sol.y0());
    Ok(SolveOutput { report, rows: vec![row] })
}

pub fn solve_ih(
    cfg: &ExperimentConfig,
    tol_override: Option<f64>,
    steps_per_horizon: usize,
    budget: usize,
) -> Result<SolveOutput> {
    let gen = cfg.require_generator()?;
    let mu = gen
        .mu
        .ok_or_else(|| Error::config("solve-ih requires [generator] mu"))?;
    if steps_per_horizon == 0 {
        return Err(Error::input("--steps-per-horizon must be positive"));
    }
    let tol = tol_override.unwrap_or(cfg.run.tol);
    let dt = 1.0 / steps_per_horizon as f64;
    let d = cfg.theta.dim();
    let mut report = RunReport::new("solve-ih", d, cfg.run.seed);
    report.dt = Some(dt);

    let res = solve_infinite_horizon(gen, &cfg.theta, dt, tol, budget)?;
    // Re-solve the final truncation for node-wise diagnostics.
    let (tree, sol) = solve_truncation(gen, &cfg.theta, res.n_used, dt, budget)?;
    report.steps = Some(tree.grid().steps());

    report.push_check(&truncation_bound_check(&tree, &cfg.theta, gen, &sol, 1.0)?);
    report.push_check(&k_properties_check(&tree, &sol));
    let rate = fit_decay_rate(&res.iterates);
    if let Some(r) = rate {
        report.push_check(&CheckReport {
            name: "truncation-decay-rate".into(),
            pass: r >= 0.9 * mu,
            worst_margin: r - 0.9 * mu,
            witness: (r < 0.9 * mu).then(|| format!("fitted rate {r:.4} below 0.9 mu")),
        });
    }

    let bound = horizon_bound_constant(gen, &cfg.theta)?;
    let margin = bound - res.y0.abs();
    report.outputs = json!({
        "Y0": res.y0,
        "n_used": res.n_used,
        "tail_bound": res.tail_bound,
        "tol": tol,
        "iterates": res.iterates.iter().map(|(n, y)| json!({ "n": n, "Y0": y })).collect::<Vec<_>>(),
        "fitted_rate": rate,
        "bound": bound,
        "margin": margin,
    });

    let row = CsvRow {
        command: "solve-ih".into(),
        dim: d,
        steps: tree.grid().steps(),
        dt,
        y0: res.y0,
        z0: sol.z0().as_slice().to_vec(),
        k_t_min: sol.k_t_min(&tree),
        bound: Some(bound),
        margin: Some(margin),
        runtime_ms: 0,
    };
    println!("Y0 = {:.12} at horizon n = {} (tail bound {:.3e})", res.y0, res.n_used, res.tail_bound);
    Ok(SolveOutput { report, rows: vec![row] })
}

pub fn compare_cmd(cfg: &ExperimentConfig, seed: Option<u64>, budget: usize) -> Result<RunReport> {
    let gen1 = cfg.require_generator()?;
    let gen2 = cfg
        .generator2
        .as_ref()
        .ok_or_else(|| Error::parse("config: compare needs a [generator2] section"))?;
    let plan = sample_plan(cfg, seed, None);
    let mut report = RunReport::new("compare", cfg.theta.dim(), plan.seed);
    let tree = build_run_tree(cfg, cfg.run.steps, budget)?;
    report.steps = Some(cfg.run.steps);
    report.dt = Some(tree.grid().dt());

    let xi2 = cfg.run.xi2.as_ref().unwrap_or(&cfg.run.xi);
    let term1 = terminal_fn(&cfg.run.xi);
    let term2 = terminal_fn(xi2);
    let cmp = compare_solutions(&tree, &cfg.theta, gen1, gen2, &term1, &term2, &plan)?;
    report.push_check(&CheckReport {
        name: "node-wise-ordering".into(),
        pass: cmp.pass,
        worst_margin: 1e-8 - cmp.worst_gap,
        witness: (!cmp.pass).then(|| format!("worst gap {:.3e} exceeds 1e-8", cmp.worst_gap)),
    });
    report.outputs = json!({ "worst_gap": cmp.worst_gap });
    Ok(report)
}

pub fn convergence_cmd(
    cfg: &ExperimentConfig,
    steps_list: &[usize],
    budget: usize,
) -> Result<SolveOutput> {
    let d = cfg.theta.dim();
    let mut report = RunReport::new("convergence", d, cfg.run.seed);
    let steps_list: Vec<usize> = if steps_list.is_empty() {
        vec![8, 16, 32, 64]
    } else {
        steps_list.to_vec()
    };
    let term = terminal_fn(&cfg.run.xi);

    let mut rows = Vec::new();
    let mut entries = Vec::new();
    if let Some(coeffs) = &cfg.linear {
        // Linear configs compare the explicit representation (both measure
        // change modes) against the direct backward solve.
        let mut diffs = Vec::new();
        for &n in &steps_list {
            let tree = build_run_tree(cfg, n, budget)?;
            let direct = solve_linear_direct(&tree, &cfg.theta, coeffs, &term)?;
            let weight =
                solve_linear_explicit(&tree, &cfg.theta, coeffs, &term, GirsanovMode::Weight)?;
            let shift = (d == 1 || coeffs.drift_rules_constant())
                .then(|| solve_linear_explicit(&tree, &cfg.theta, coeffs, &term, GirsanovMode::Shift))
                .transpose()?;
            let diff = (weight[0][0] - direct.y0()).abs();
            let mode_gap = shift.as_ref().map(|s| (weight[0][0] - s[0][0]).abs());
            diffs.push(diff);
            entries.push(json!({
                "steps": n,
                "dt": tree.grid().dt(),
                "Y0_direct": direct.y0(),
                "Y0_explicit_weight": weight[0][0],
                "Y0_explicit_shift": shift.as_ref().map(|s| s[0][0]),
                "explicit_vs_direct": diff,
                "mode_gap": mode_gap,
            }));
            rows.push(CsvRow {
                command: "convergence".into(),
                dim: d,
                steps: n,
                dt: tree.grid().dt(),
                y0: direct.y0(),
                z0: direct.z0().as_slice().to_vec(),
                k_t_min: direct.k_t_min(&tree),
                bound: Some(diff),
                margin: Some(5e-2 - diff),
                runtime_ms: 0,
            });
            if let Some(gap) = mode_gap {
                let tol = 2.0 * diff.max(5e-2);
                report.push_check(&CheckReport {
                    name: format!("mode-agreement-N{n}"),
                    pass: gap <= tol,
                    worst_margin: tol - gap,
                    witness: (gap > tol).then(|| format!("weight/shift gap {gap:.3e}")),
                });
            }
        }
        let last = *diffs.last().expect("nonempty steps list");
        report.push_check(&CheckReport {
            name: "explicit-vs-direct".into(),
            pass: last < 5e-2,
            worst_margin: 5e-2 - last,
            witness: (last >= 5e-2).then(|| format!("root difference {last:.3e} at finest grid")),
        });
        let mut worst_ratio = f64::INFINITY;
        for w in diffs.windows(2) {
            if w[0] > 1e-13 || w[1] > 1e-13 {
                worst_ratio = worst_ratio.min(w[0] / w[1].max(1e-300));
            }
        }
        if worst_ratio.is_finite() {
            report.push_check(&CheckReport {
                name: "halving-ratio".into(),
                pass: worst_ratio >= 1.5,
                worst_margin: worst_ratio - 1.5,
                witness: (worst_ratio < 1.5)
                    .then(|| format!("worst reduction factor {worst_ratio:.3} per doubling")),
            });
        }
    } else {
        let gen = cfg.require_generator().map_err(|_| {
            Error::parse("config: convergence needs a [generator] or [linear] section")
        })?;
        let mut prev: Option<f64> = None;
        for &n in &steps_list {
            let tree = build_run_tree(cfg, n, budget)?;
            let sol = solve_bsde(&tree, &cfg.theta, gen, &term)?;
            entries.push(json!({
                "steps": n,
                "dt": tree.grid().dt(),
                "Y0": sol.y0(),
                "diff_from_previous": prev.map(|p| (sol.y0() - p).abs()),
            }));
            rows.push(CsvRow {
                command: "convergence".into(),
                dim: d,
                steps: n,
                dt: tree.grid().dt(),
                y0: sol.y0(),
                z0: sol.z0().as_slice().to_vec(),
                k_t_min: sol.k_t_min(&tree),
                bound: None,
                margin: None,
                runtime_ms: 0,
            });
            prev = Some(sol.y0());
        }
    }
    report.outputs = json!({ "grids": entries });
    Ok(SolveOutput { report, rows })
}

/// Resolves the effective node budget: environment override first, then the
/// command-line flag, then the config.
pub fn effective_budget(cfg_budget: usize, flag: Option<usize>) -> usize {
    std::env::var("GBSDE_NODE_BUDGET")
        .ok()
        .and_then(|v| v.parse().ok())
        .or(flag)
        .unwrap_or(cfg_budget)
}

