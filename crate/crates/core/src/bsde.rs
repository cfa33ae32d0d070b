//! Backward solvers on scenario trees.
//!
//! The core engine runs one backward sweep: per node and volatility extreme it
//! averages the child values, regresses the martingale integrand Z from the
//! signed child values, evaluates the driver explicitly at the predictor pair
//! (Ȳ, Z), and keeps the maximizing extreme. The bookkeeping process K is the
//! per-branch residual of the discrete dynamics; its sign and monotonicity are
//! the testable content, and its worst-case expectation at the root vanishes
//! because the maximizing control makes every per-node average residual zero.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{Error, Result};
use crate::extspace::LinearCoefficients;
use crate::gcore::{eval_g, sigma_bounds, CheckReport, GeneratorSpec, SamplePlan, VolatilitySet};
use crate::lattice::{
    build_tree, GirsanovMode, NodeState, ScenarioTree, TimeGrid, DEFAULT_NODE_BUDGET,
};
use crate::scalar::Real;

/// Driver of a backward equation: the pair (f, gⁱʲ), possibly state-dependent.
pub trait Driver<T: Real> {
    fn dim(&self) -> usize;
    fn f(&self, state: &NodeState<T>, y: T, z: &DVector<T>) -> Result<T>;
    fn g(&self, i: usize, j: usize, state: &NodeState<T>, y: T, z: &DVector<T>) -> Result<T>;
}

impl<T: Real> Driver<T> for GeneratorSpec<T> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn f(&self, state: &NodeState<T>, y: T, z: &DVector<T>) -> Result<T> {
        self.eval_f(state.t, y, z)
    }

    fn g(&self, i: usize, j: usize, state: &NodeState<T>, y: T, z: &DVector<T>) -> Result<T> {
        self.eval_g(i, j, state.t, y, z)
    }
}

/// Linear driver f = a·y + b·z + m, gⁱʲ = cⁱʲ·y + dⁱʲ·z + nⁱʲ with coefficient
/// rules evaluated at (t, B).
pub struct LinearDriver<'a> {
    pub coeffs: &'a LinearCoefficients,
}

impl<T: Real> Driver<T> for LinearDriver<'_> {
    fn dim(&self) -> usize {
        self.coeffs.dim()
    }

    fn f(&self, state: &NodeState<T>, y: T, z: &DVector<T>) -> Result<T> {
        let a = self.coeffs.a_at(state.t, &state.b)?;
        let b = self.coeffs.b_at(state.t, &state.b)?;
        let m = self.coeffs.m_at(state.t, &state.b)?;
        Ok(a * y + b.dot(z) + m)
    }

    fn g(&self, i: usize, j: usize, state: &NodeState<T>, y: T, z: &DVector<T>) -> Result<T> {
        let c = self.coeffs.c_at(state.t, &state.b)?;
        let d = self.coeffs.d_at(i, j, state.t, &state.b)?;
        let n = self.coeffs.n_at(state.t, &state.b)?;
        Ok(c[(i, j)] * y + d.dot(z) + n[(i, j)])
    }
}

/// Per-node arrays of a solved backward equation.
#[derive(Debug, Clone)]
pub struct BsdeSolution<T: Real> {
    /// Y per level per node.
    pub y: Vec<Vec<T>>,
    /// Chosen extreme per node, levels 0..steps.
    pub control: Vec<Vec<u32>>,
    dim: usize,
    n_branches: usize,
    /// Z flattened with stride `dim`, levels 0..steps.
    z_flat: Vec<Vec<T>>,
    /// K increments flattened with stride `n_branches`, levels 0..steps.
    dk_flat: Vec<Vec<T>>,
}

impl<T: Real> BsdeSolution<T> {
    pub fn y0(&self) -> T {
        self.y[0][0]
    }

    pub fn z_at(&self, level: usize, node: usize) -> DVector<T> {
        DVector::from_fn(self.dim, |i, _| self.z_flat[level][node * self.dim + i])
    }

    pub fn z0(&self) -> DVector<T> {
        self.z_at(0, 0)
    }

    /// K increment along the edge (level, node) → branch.
    pub fn dk(&self, level: usize, node: usize, branch: usize) -> T {
        self.dk_flat[level][node * self.n_branches + branch]
    }

    pub fn n_branches(&self) -> usize {
        self.n_branches
    }

    /// Minimum terminal K over all branch sequences (any control).
    pub fn k_t_min(&self, tree: &ScenarioTree<T>) -> T {
        let n = tree.grid().steps();
        let mut next = vec![T::zero(); tree.levels()[n].len()];
        for k in (0..n).rev() {
            let mut cur = Vec::with_capacity(tree.levels()[k].len());
            for (idx, node) in tree.levels()[k].iter().enumerate() {
                let mut best: Option<T> = None;
                for (bi, &c) in node.children.iter().enumerate() {
                    let v = self.dk(k, idx, bi) + next[c];
                    best = Some(match best {
                        Some(b) if b <= v => b,
                        _ => v,
                    });
                }
                cur.push(best.expect("node has children"));
            }
            next = cur;
        }
        next[0]
    }

    /// Worst-case expectation of terminal K at the root; zero in the limit
    /// theory, and numerically zero here because the maximizing control has
    /// zero average residual at every node.
    pub fn k_root_upper_expectation(&self, tree: &ScenarioTree<T>) -> T {
        let n = tree.grid().steps();
        let w_sign = tree.sign_weight();
        let mut next = vec![T::zero(); tree.levels()[n].len()];
        for k in (0..n).rev() {
            let mut cur = Vec::with_capacity(tree.levels()[k].len());
            for (idx, node) in tree.levels()[k].iter().enumerate() {
                let mut best: Option<T> = None;
                for e in 0..tree.n_extremes() {
                    let mut avg = T::zero();
                    for s in 0..tree.n_signs() {
                        let bi = e * tree.n_signs() + s;
                        avg += self.dk(k, idx, bi) + next[node.children[bi]];
                    }
                    avg *= w_sign;
                    best = Some(match best {
                        Some(b) if b >= avg => b,
                        _ => avg,
                    });
                }
                cur.push(best.expect("node has children"));
            }
            next = cur;
        }
        next[0]
    }
}

/// Backward sweep over the tree for an arbitrary driver.
pub fn solve_bsde<T: Real>(
    tree: &ScenarioTree<T>,
    theta: &VolatilitySet<T>,
    driver: &dyn Driver<T>,
    terminal: &dyn Fn(&NodeState<T>) -> T,
) -> Result<BsdeSolution<T>> {
    let d = tree.dim();
    if driver.dim() != d || theta.dim() != d {
        return Err(Error::input("driver, volatility set and tree dimensions differ"));
    }
    let n = tree.grid().steps();
    let dt = tree.grid().dt();
    let sqrt_dt = dt.sqrt();
    let n_signs = tree.n_signs();
    let n_branches = tree.branches().len();
    let w_sign = tree.sign_weight();
    let theta_inv_t: Vec<DMatrix<T>> = theta
        .extremes()
        .iter()
        .map(|th| {
            th.transpose()
                .try_inverse()
                .ok_or_else(|| Error::numeric("volatility extreme is singular"))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut y: Vec<Vec<T>> = vec![Vec::new(); n + 1];
    let mut z_flat: Vec<Vec<T>> = vec![Vec::new(); n];
    let mut dk_flat: Vec<Vec<T>> = vec![Vec::new(); n];
    let mut control: Vec<Vec<u32>> = vec![Vec::new(); n];

    y[n] = (0..tree.levels()[n].len())
        .map(|i| {
            let v = terminal(&tree.state(n, i)?);
            if !v.as_f64().is_finite() {
                return Err(Error::numeric(format!(
                    "terminal payoff is not finite at leaf {i}"
                )));
            }
            Ok(v)
        })
        .collect::<Result<Vec<_>>>()?;

    for k in (0..n).rev() {
        let n_nodes = tree.levels()[k].len();
        let mut y_level = Vec::with_capacity(n_nodes);
        let mut z_level = vec![T::zero(); n_nodes * d];
        let mut dk_level = vec![T::zero(); n_nodes * n_branches];
        let mut ctrl_level = Vec::with_capacity(n_nodes);
        for (idx, node) in tree.levels()[k].iter().enumerate() {
            let state = tree.state(k, idx)?;
            let mut best: Option<(T, usize)> = None;
            // Per-extreme data kept for the residual pass below.
            let mut per_extreme: Vec<(T, DVector<T>, T, T)> = Vec::with_capacity(tree.n_extremes());
            for e in 0..tree.n_extremes() {
                let mut ybar = T::zero();
                let mut signed = DVector::zeros(d);
                for s in 0..n_signs {
                    let bi = e * n_signs + s;
                    let cy = y[k + 1][node.children[bi]];
                    ybar += cy;
                    signed += &tree.branches()[bi].signs * cy;
                }
                ybar *= w_sign;
                signed *= w_sign / sqrt_dt;
                let z_e = &theta_inv_t[e] * signed;
                let f_e = driver.f(&state, ybar, &z_e)?;
                let mut g_sum = T::zero();
                let dqv = &tree.branches()[e * n_signs].dqv;
                for i in 0..d {
                    for j in i..d {
                        let mult = if i == j { T::one() } else { T::of(2.0) };
                        g_sum += mult * driver.g(i, j, &state, ybar, &z_e)? * dqv[(i, j)];
                    }
                }
                let cand = ybar + f_e * dt + g_sum;
                if !cand.as_f64().is_finite() {
                    return Err(Error::numeric(format!(
                        "driver produced a non-finite value at level {k}, node {idx}, extreme {e}"
                    )));
                }
                per_extreme.push((f_e, z_e, g_sum, cand));
                best = Some(match best {
                    Some((bv, be)) if bv >= cand => (bv, be),
                    _ => (cand, e),
                });
            }
            let (y_node, e_star) = best.expect("at least one extreme");
            y_level.push(y_node);
            ctrl_level.push(e_star as u32);
            let z_star = &per_extreme[e_star].1;
            for i in 0..d {
                z_level[idx * d + i] = z_star[i];
            }
            // Residual per branch with the branch's own regression pair, so
            // the discrete dynamics identity is exact bookkeeping.
            for e in 0..tree.n_extremes() {
                let (f_e, ref z_e, g_sum, _) = per_extreme[e];
                for s in 0..n_signs {
                    let bi = e * n_signs + s;
                    let cy = y[k + 1][node.children[bi]];
                    let dk =
                        cy + f_e * dt + g_sum - z_e.dot(&tree.branches()[bi].db) - y_node;
                    dk_level[idx * n_branches + bi] = dk;
                }
            }
        }
        y[k] = y_level;
        z_flat[k] = z_level;
        dk_flat[k] = dk_level;
        control[k] = ctrl_level;
    }

    Ok(BsdeSolution { y, control, dim: d, n_branches, z_flat, dk_flat })
}

/// Solves the backward equation for a possibly quadratic generator.
pub fn solve_quadratic_fh<T: Real>(
    tree: &ScenarioTree<T>,
    theta: &VolatilitySet<T>,
    gen: &GeneratorSpec<T>,
    terminal: &dyn Fn(&NodeState<T>) -> T,
) -> Result<BsdeSolution<T>> {
    solve_bsde(tree, theta, gen, terminal)
}

/// Solves a linear specification through the general engine.
pub fn solve_linear_direct<T: Real>(
    tree: &ScenarioTree<T>,
    theta: &VolatilitySet<T>,
    coeffs: &LinearCoefficients,
    terminal: &dyn Fn(&NodeState<T>) -> T,
) -> Result<BsdeSolution<T>> {
    solve_bsde(tree, theta, &LinearDriver { coeffs }, terminal)
}

/// Solves a linear specification through its explicit representation: the
/// change of measure absorbs the (b, dⁱʲ) drift, the integrating factor
/// X = exp(∫a ds + Σ∫cⁱʲ d⟨B⟩ⁱʲ) absorbs (a, cⁱʲ), and the source terms
/// (m, nⁱʲ) accumulate under the transformed expectation. Returns Y per node.
///
/// Weight mode runs a one-step weighted recursion on the base tree with the
/// exactly marginalized extended weights. Shift mode evaluates everything on
/// the drift-reconstructed state and requires constant coefficient rules.
pub fn solve_linear_explicit<T: Real>(
    tree: &ScenarioTree<T>,
    theta: &VolatilitySet<T>,
    coeffs: &LinearCoefficients,
    terminal: &dyn Fn(&NodeState<T>) -> T,
    mode: GirsanovMode,
) -> Result<Vec<Vec<T>>> {
    let d = tree.dim();
    if coeffs.dim() != d || theta.dim() != d {
        return Err(Error::input("coefficients, volatility set and tree dimensions differ"));
    }
    let n = tree.grid().steps();
    let dt = tree.grid().dt();
    let n_signs = tree.n_signs();
    let w_sign = tree.sign_weight();

    match mode {
        GirsanovMode::Weight => {
            let ext = crate::lattice::ExtendedWeights::new(theta)?;
            let mut y: Vec<Vec<T>> = vec![Vec::new(); n + 1];
            y[n] = (0..tree.levels()[n].len())
                .map(|i| Ok(terminal(&tree.state(n, i)?)))
                .collect::<Result<Vec<_>>>()?;
            for k in (0..n).rev() {
                let mut level = Vec::with_capacity(tree.levels()[k].len());
                for (idx, node) in tree.levels()[k].iter().enumerate() {
                    let state = tree.state(k, idx)?;
                    let a = coeffs.a_at(state.t, &state.b)?;
                    let c = coeffs.c_at(state.t, &state.b)?;
                    let m = coeffs.m_at(state.t, &state.b)?;
                    let nn = coeffs.n_at(state.t, &state.b)?;
                    let mut best: Option<T> = None;
                    for e in 0..tree.n_extremes() {
                        let dqv = &tree.branches()[e * n_signs].dqv;
                        let mut growth = a * dt;
                        let mut source = m * dt;
                        for i in 0..d {
                            for j in i..d {
                                let mult = if i == j { T::one() } else { T::of(2.0) };
                                growth += mult * c[(i, j)] * dqv[(i, j)];
                                source += mult * nn[(i, j)] * dqv[(i, j)];
                            }
                        }
                        let factor = growth.exp();
                        let mut avg = T::zero();
                        for s in 0..n_signs {
                            let bi = e * n_signs + s;
                            let w = ext.weight(
                                coeffs,
                                e,
                                state.t,
                                &state.b,
                                &tree.branches()[bi].signs,
                                dt,
                            )?;
                            avg += w * (factor * y[k + 1][node.children[bi]] + source);
                        }
                        avg *= w_sign;
                        best = Some(match best {
                            Some(b) if b >= avg => b,
                            _ => avg,
                        });
                    }
                    level.push(best.expect("at least one extreme"));
                }
                y[k] = level;
            }
            Ok(y)
        }
        GirsanovMode::Shift => {
            if !coeffs.rules_constant() {
                return Err(Error::config(
                    "shift mode needs constant coefficient rules; state-dependent \
                     coefficients make the reconstructed drift path-dependent",
                ));
            }
            // Constant rules: evaluate everything once.
            let zero = DVector::zeros(d);
            let t0 = tree.grid().t0();
            let a = coeffs.a_at(t0, &zero)?;
            let c = coeffs.c_at(t0, &zero)?;
            let m = coeffs.m_at(t0, &zero)?;
            let nn = coeffs.n_at(t0, &zero)?;
            let bvec = coeffs.b_at(t0, &zero)?;
            let mut dvecs = Vec::new();
            for i in 0..d {
                for j in i..d {
                    dvecs.push((i, j, coeffs.d_at(i, j, t0, &zero)?));
                }
            }
            // Reconstructed noise value at a node: B plus the drift removed by
            // the measure change, a function of (t, ⟨B⟩) for constant rules.
            let shifted_b = |state: &NodeState<T>| -> DVector<T> {
                let mut b = state.b.clone();
                for mm in 0..d {
                    let mut drift = bvec[mm] * (state.t - t0);
                    for (i, j, dv) in &dvecs {
                        let mult = if i == j { T::one() } else { T::of(2.0) };
                        drift += mult * dv[mm] * state.qv[(*i, *j)];
                    }
                    b[mm] += drift;
                }
                b
            };

            let mut y: Vec<Vec<T>> = vec![Vec::new(); n + 1];
            y[n] = (0..tree.levels()[n].len())
                .map(|i| {
                    let state = tree.state(n, i)?;
                    let shifted = NodeState { t: state.t, b: shifted_b(&state), qv: state.qv };
                    Ok(terminal(&shifted))
                })
                .collect::<Result<Vec<_>>>()?;
            for k in (0..n).rev() {
                let mut level = Vec::with_capacity(tree.levels()[k].len());
                for node in tree.levels()[k].iter() {
                    let mut best: Option<T> = None;
                    for e in 0..tree.n_extremes() {
                        let dqv = &tree.branches()[e * n_signs].dqv;
                        let mut growth = a * dt;
                        let mut source = m * dt;
                        for i in 0..d {
                            for j in i..d {
                                let mult = if i == j { T::one() } else { T::of(2.0) };
                                growth += mult * c[(i, j)] * dqv[(i, j)];
                                source += mult * nn[(i, j)] * dqv[(i, j)];
                            }
                        }
                        let factor = growth.exp();
                        let mut avg = T::zero();
                        for s in 0..n_signs {
                            let bi = e * n_signs + s;
                            avg += factor * y[k + 1][node.children[bi]] + source;
                        }
                        avg *= w_sign;
                        best = Some(match best {
                            Some(b) if b >= avg => b,
                            _ => avg,
                        });
                    }
                    level.push(best.expect("at least one extreme"));
                }
                y[k] = level;
            }
            Ok(y)
        }
    }
}

/// A-priori bound for linear specifications with dissipative (a, cⁱʲ):
/// |Y_t| ≤ ‖ξ‖∞ e^{−μ(T−t)} + (1+σ̄_Σ²)·ρ·(1−e^{−μ(T−t)})/μ.
///
/// Verifies the dissipativity inequality a + 2G((cⁱʲ)) ≤ −μ on the node
/// states first; its failure is a configuration error, not a bound failure.
#[allow(clippy::too_many_arguments)]
pub fn lemma_ey_bound<T: Real>(
    tree: &ScenarioTree<T>,
    theta: &VolatilitySet<T>,
    coeffs: &LinearCoefficients,
    solution_y: &[Vec<T>],
    xi_sup: T,
    rho_bound: T,
    mu: T,
    scheme_tol: T,
) -> Result<CheckReport> {
    let t_end = tree.grid().t_end();
    let bars = sigma_bounds(theta);
    let mut worst = f64::INFINITY;
    let mut witness = None;
    for (k, level) in solution_y.iter().enumerate() {
        for (idx, &yv) in level.iter().enumerate() {
            let state = tree.state(k, idx)?;
            let a = coeffs.a_at(state.t, &state.b)?;
            let c = coeffs.c_at(state.t, &state.b)?;
            let diss = a + T::of(2.0) * eval_g(&c, theta)?;
            if diss > -mu + T::of(1e-9) {
                return Err(Error::config(format!(
                    "a + 2G(c) = {:.6e} violates the dissipativity level -mu = {:.6e}",
                    diss.as_f64(),
                    (-mu).as_f64()
                )));
            }
            let decay = (-mu * (t_end - state.t)).exp();
            let bound = xi_sup * decay
                + (T::one() + bars.total) * rho_bound * (T::one() - decay) / mu
                + scheme_tol;
            let margin = (bound - yv.abs()).as_f64();
            if margin < worst {
                worst = margin;
                if margin < 0.0 {
                    witness = Some(format!(
                        "|Y| = {:.6e} exceeds bound {:.6e} at level {k}, node {idx}",
                        yv.abs().as_f64(),
                        bound.as_f64()
                    ));
                }
            }
        }
    }
    Ok(CheckReport {
        name: "a-priori-bound".into(),
        pass: witness.is_none(),
        worst_margin: worst,
        witness,
    })
}

/// Outcome of the ordering harness.
#[derive(Debug, Clone)]
pub struct ComparisonReport {
    pub pass: bool,
    /// Largest Y¹ − Y² over all nodes (≤ tolerance when ordered).
    pub worst_gap: f64,
}

/// Solves both specifications and asserts node-wise ordering Y¹ ≤ Y² after
/// verifying the data ordering (terminal on all leaves, drivers on samples).
#[allow(clippy::too_many_arguments)]
pub fn compare_solutions<T: Real>(
    tree: &ScenarioTree<T>,
    theta: &VolatilitySet<T>,
    gen1: &GeneratorSpec<T>,
    gen2: &GeneratorSpec<T>,
    terminal1: &dyn Fn(&NodeState<T>) -> T,
    terminal2: &dyn Fn(&NodeState<T>) -> T,
    plan: &SamplePlan,
) -> Result<ComparisonReport> {
    let n = tree.grid().steps();
    for idx in 0..tree.levels()[n].len() {
        let state = tree.state(n, idx)?;
        if terminal1(&state) > terminal2(&state) + T::of(1e-12) {
            return Err(Error::config(format!(
                "terminal data are not ordered at leaf {idx}: {} > {}",
                terminal1(&state).as_f64(),
                terminal2(&state).as_f64()
            )));
        }
    }
    let d = gen1.dim;
    let mut rng = plan.rng();
    for _ in 0..plan.samples {
        let t = T::of(rng.gen_range(0.0..1.0)) * tree.grid().t_end();
        let y = T::of(rng.gen_range(-plan.scale..plan.scale));
        let z = DVector::from_fn(d, |_, _| T::of(rng.gen_range(-plan.scale..plan.scale)));
        let f1 = gen1.eval_f(t, y, &z)?;
        let f2 = gen2.eval_f(t, y, &z)?;
        if f1 > f2 + T::of(1e-12) {
            return Err(Error::config(format!(
                "drivers are not ordered at t={:.3}, y={:.3}: {} > {}",
                t.as_f64(),
                y.as_f64(),
                f1.as_f64(),
                f2.as_f64()
            )));
        }
        for i in 0..d {
            for j in i..d {
                let g1 = gen1.eval_g(i, j, t, y, &z)?;
                let g2 = gen2.eval_g(i, j, t, y, &z)?;
                if g1 > g2 + T::of(1e-12) {
                    return Err(Error::config(format!(
                        "g{}{} terms are not ordered at a sampled point",
                        i + 1,
                        j + 1
                    )));
                }
            }
        }
    }

    let sol1 = solve_quadratic_fh(tree, theta, gen1, terminal1)?;
    let sol2 = solve_quadratic_fh(tree, theta, gen2, terminal2)?;
    let mut worst = f64::NEG_INFINITY;
    for k in 0..=n {
        for idx in 0..sol1.y[k].len() {
            let gap = (sol1.y[k][idx] - sol2.y[k][idx]).as_f64();
            if gap > worst {
                worst = gap;
            }
        }
    }
    Ok(ComparisonReport { pass: worst <= 1e-8, worst_gap: worst })
}

/// Result of the horizon-truncation driver.
#[derive(Debug, Clone)]
pub struct InfiniteHorizonResult<T: Real> {
    pub y0: T,
    pub n_used: usize,
    /// Remaining truncation error per the decay estimate at t = 0.
    pub tail_bound: T,
    /// (horizon, root value) per solved truncation.
    pub iterates: Vec<(usize, T)>,
}

/// Uniform-in-horizon bound constant (1 + σ̄_Σ²)·M₀/μ.
pub fn horizon_bound_constant<T: Real>(gen: &GeneratorSpec<T>, theta: &VolatilitySet<T>) -> Result<T> {
    let mu = gen
        .mu
        .ok_or_else(|| Error::config("horizon truncation requires the constant mu"))?;
    let bars = sigma_bounds(theta);
    Ok((T::one() + bars.total) * gen.m0 / mu)
}

/// Smallest integer horizon whose tail bound is below the tolerance.
pub fn minimal_horizon<T: Real>(gen: &GeneratorSpec<T>, theta: &VolatilitySet<T>, tol: T) -> Result<usize> {
    let mu = gen
        .mu
        .ok_or_else(|| Error::config("horizon truncation requires the constant mu"))?;
    if tol <= T::zero() {
        return Err(Error::input("tolerance must be positive"));
    }
    let k = horizon_bound_constant(gen, theta)?;
    if k <= tol {
        return Ok(1);
    }
    let n = ((k / tol).ln() / mu).as_f64().ceil();
    Ok(n.max(1.0) as usize)
}

/// Solves the truncation to horizon `n` with zero terminal data.
pub fn solve_truncation<T: Real>(
    gen: &GeneratorSpec<T>,
    theta: &VolatilitySet<T>,
    horizon: usize,
    dt: T,
    node_budget: usize,
) -> Result<(ScenarioTree<T>, BsdeSolution<T>)> {
    let steps = (T::of(horizon as f64) / dt).as_f64().round().max(1.0) as usize;
    let grid = TimeGrid::new(T::zero(), T::of(horizon as f64), steps)?;
    let tree = build_tree(theta, &grid, node_budget)?;
    let sol = solve_bsde(&tree, theta, gen, &|_: &NodeState<T>| T::zero())?;
    Ok((tree, sol))
}

/// Horizon-truncation driver: solves a short ladder of horizons ending at the
/// minimal one for the tolerance, at a shared dt so the truncation decay is
/// visible without discretization bias.
pub fn solve_infinite_horizon<T: Real>(
    gen: &GeneratorSpec<T>,
    theta: &VolatilitySet<T>,
    dt: T,
    tol: T,
    node_budget: usize,
) -> Result<InfiniteHorizonResult<T>> {
    let mu = gen
        .mu
        .ok_or_else(|| Error::config("horizon truncation requires the constant mu"))?;
    let n_min = minimal_horizon(gen, theta, tol)?;
    let first = n_min.saturating_sub(2).max(1);
    let mut iterates = Vec::new();
    for horizon in first..=n_min {
        let (_, sol) = solve_truncation(gen, theta, horizon, dt, node_budget).map_err(|e| {
            match e {
                Error::Resource(msg) => Error::Resource(format!(
                    "{msg}; coarsen dt (currently {:.3e}) to reach horizon {horizon}",
                    dt.as_f64()
                )),
                other => other,
            }
        })?;
        iterates.push((horizon, sol.y0()));
    }
    let k = horizon_bound_constant(gen, theta)?;
    let &(n_used, y0) = iterates.last().expect("at least one horizon");
    Ok(InfiniteHorizonResult {
        y0,
        n_used,
        tail_bound: k * (-mu * T::of(n_used as f64)).exp(),
        iterates,
    })
}

/// Decay bound for the gap between two truncations at t = 0:
/// (1+σ̄_Σ²)M₀/μ · (e^{−μn} − e^{−μm}) for horizons n < m.
pub fn truncation_difference_bound<T: Real>(
    gen: &GeneratorSpec<T>,
    theta: &VolatilitySet<T>,
    n: usize,
    m: usize,
) -> Result<T> {
    let mu = gen
        .mu
        .ok_or_else(|| Error::config("horizon truncation requires the constant mu"))?;
    let k = horizon_bound_constant(gen, theta)?;
    Ok(k * ((-mu * T::of(n as f64)).exp() - (-mu * T::of(m as f64)).exp()))
}

/// Node-wise check of the uniform truncation bound
/// |Yⁿ_t| ≤ (1+σ̄_Σ²)M₀/μ·(1−e^{−μ(n−t)}) + C·dt.
pub fn truncation_bound_check<T: Real>(
    tree: &ScenarioTree<T>,
    theta: &VolatilitySet<T>,
    gen: &GeneratorSpec<T>,
    sol: &BsdeSolution<T>,
    c_scheme: T,
) -> Result<CheckReport> {
    let mu = gen
        .mu
        .ok_or_else(|| Error::config("horizon truncation requires the constant mu"))?;
    let k_const = horizon_bound_constant(gen, theta)?;
    let t_end = tree.grid().t_end();
    let slack = c_scheme * tree.grid().dt();
    let mut worst = f64::INFINITY;
    let mut witness = None;
    for (k, level) in sol.y.iter().enumerate() {
        let t = tree.grid().time(k);
        let bound = k_const * (T::one() - (-mu * (t_end - t)).exp()) + slack;
        for (idx, &yv) in level.iter().enumerate() {
            let margin = (bound - yv.abs()).as_f64();
            if margin < worst {
                worst = margin;
                if margin < 0.0 {
                    witness = Some(format!(
                        "|Y| = {:.6e} exceeds bound {:.6e} at level {k}, node {idx}",
                        yv.abs().as_f64(),
                        bound.as_f64()
                    ));
                }
            }
        }
    }
    Ok(CheckReport {
        name: "truncation-bound".into(),
        pass: witness.is_none(),
        worst_margin: worst,
        witness,
    })
}

/// Least-squares decay rate of the successive horizon differences: fits
/// ln|Y₀ⁿ⁺¹ − Y₀ⁿ| against n and returns the negated slope.
pub fn fit_decay_rate<T: Real>(iterates: &[(usize, T)]) -> Option<f64> {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for w in iterates.windows(2) {
        let gap = (w[1].1 - w[0].1).abs().as_f64();
        if gap <= 0.0 {
            return None;
        }
        xs.push(w[0].0 as f64);
        ys.push(gap.ln());
    }
    if xs.len() < 2 {
        return None;
    }
    let n = xs.len() as f64;
    let sx: f64 = xs.iter().sum();
    let sy: f64 = ys.iter().sum();
    let sxx: f64 = xs.iter().map(|x| x * x).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| x * y).sum();
    let denom = n * sxx - sx * sx;
    if denom.abs() < 1e-14 {
        return None;
    }
    Some(-(n * sxy - sx * sy) / denom)
}

/// Checks the K arrays of a solved instance: root value, sign, monotonicity
/// along paths (automatic for nonpositive increments) and the vanishing
/// worst-case expectation at the root.
pub fn k_properties_check<T: Real>(tree: &ScenarioTree<T>, sol: &BsdeSolution<T>) -> CheckReport {
    let n = tree.grid().steps();
    let mut worst = f64::INFINITY;
    let mut witness = None;
    for k in 0..n {
        for idx in 0..tree.levels()[k].len() {
            for bi in 0..sol.n_branches() {
                let dk = sol.dk(k, idx, bi).as_f64();
                let margin = -dk;
                if margin < worst {
                    worst = margin;
                    if dk > 1e-10 {
                        witness = Some(format!(
                            "positive K increment {dk:.3e} at level {k}, node {idx}, branch {bi}"
                        ));
                    }
                }
            }
        }
    }
    let root_k = sol.k_root_upper_expectation(tree).as_f64();
    if root_k < -1e-8 && witness.is_none() {
        witness = Some(format!("root worst-case expectation of K is {root_k:.3e}"));
    }
    CheckReport {
        name: "k-properties".into(),
        pass: witness.is_none(),
        worst_margin: worst.min(root_k + 1e-8),
        witness,
    }
}

/// Largest |Z| per time slice, reported for stability monitoring of
/// quadratic drivers.
pub fn max_z_per_slice<T: Real>(tree: &ScenarioTree<T>, sol: &BsdeSolution<T>) -> Vec<T> {
    let n = tree.grid().steps();
    (0..n)
        .map(|k| {
            let mut m = T::zero();
            for idx in 0..tree.levels()[k].len() {
                m = m.max(sol.z_at(k, idx).norm());
            }
            m
        })
        .collect()
}

/// Hard node budget honoring the environment override.
pub fn node_budget_from_env() -> usize {
    std::env::var("GBSDE_NODE_BUDGET")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(DEFAULT_NODE_BUDGET)
}
