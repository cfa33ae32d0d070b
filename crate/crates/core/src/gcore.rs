//! Volatility sets, the sublinear function G, and standing-assumption checks.
//!
//! The set Θ is carried by its extreme points. G(A) = ½ sup tr[θθᵀA] is linear
//! in θθᵀ, so the sup over the convex hull is attained at an extreme point and
//! the restriction is exact.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::expr::Expr;
use crate::scalar::Real;

/// Absolute tolerance for sampled assumption checks.
pub const CHECK_TOL: f64 = 1e-9;

/// Extreme-point representation of the volatility set Θ.
#[derive(Debug, Clone)]
pub struct VolatilitySet<T: Real> {
    dim: usize,
    extremes: Vec<DMatrix<T>>,
    sigma_lower: T,
}

impl<T: Real> VolatilitySet<T> {
    pub fn new(dim: usize, extremes: Vec<DMatrix<T>>, sigma_lower: T) -> Result<Self> {
        if dim == 0 {
            return Err(Error::input("dimension must be positive"));
        }
        if extremes.is_empty() {
            return Err(Error::input("volatility set needs at least one extreme point"));
        }
        if sigma_lower <= T::zero() {
            return Err(Error::input("sigma_lower must be positive"));
        }
        for (idx, th) in extremes.iter().enumerate() {
            if th.nrows() != dim || th.ncols() != dim {
                return Err(Error::input(format!(
                    "extreme point {idx} is {}x{}, expected {dim}x{dim}",
                    th.nrows(),
                    th.ncols()
                )));
            }
            let scale = th.amax();
            let det = th.clone().determinant().abs();
            if det.as_f64() <= 1e-12 * scale.as_f64().powi(dim as i32).max(1e-300) {
                return Err(Error::input(format!(
                    "extreme point {idx} is singular (|det| = {:.3e})",
                    det.as_f64()
                )));
            }
        }
        Ok(VolatilitySet { dim, extremes, sigma_lower })
    }

    /// Scalar shorthand for d = 1 sets.
    pub fn scalar(extremes: &[T], sigma_lower: T) -> Result<Self> {
        let mats = extremes
            .iter()
            .map(|&s| DMatrix::from_element(1, 1, s))
            .collect();
        VolatilitySet::new(1, mats, sigma_lower)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn extremes(&self) -> &[DMatrix<T>] {
        &self.extremes
    }

    pub fn sigma_lower(&self) -> T {
        self.sigma_lower
    }

    /// θθᵀ for each extreme point.
    pub fn gammas(&self) -> Vec<DMatrix<T>> {
        self.extremes.iter().map(|th| th * th.transpose()).collect()
    }
}

/// Entrywise bounds on the quadratic-variation density.
#[derive(Debug, Clone)]
pub struct SigmaBars<T: Real> {
    pub entry_bounds: DMatrix<T>,
    pub total: T,
}

/// G(A) = ½ max over extreme points of tr[θθᵀA].
pub fn eval_g<T: Real>(a: &DMatrix<T>, theta: &VolatilitySet<T>) -> Result<T> {
    let d = theta.dim();
    if a.nrows() != d || a.ncols() != d {
        return Err(Error::input(format!(
            "matrix is {}x{}, volatility set has dimension {d}",
            a.nrows(),
            a.ncols()
        )));
    }
    let asym = (a - a.transpose()).amax();
    let scale = a.amax().max(T::one());
    if asym.as_f64() > 1e-9 * scale.as_f64() {
        return Err(Error::input("matrix argument of G must be symmetric"));
    }
    let mut best: Option<T> = None;
    for gamma in theta.gammas() {
        let tr = (gamma * a).trace();
        best = Some(match best {
            Some(b) if b >= tr => b,
            _ => tr,
        });
    }
    Ok(best.expect("nonempty extremes") * T::of(0.5))
}

/// σ̄²ᵢⱼ = max over extremes of |(θθᵀ)ᵢⱼ|, and their sum.
pub fn sigma_bounds<T: Real>(theta: &VolatilitySet<T>) -> SigmaBars<T> {
    let d = theta.dim();
    let mut entry = DMatrix::zeros(d, d);
    for gamma in theta.gammas() {
        for i in 0..d {
            for j in 0..d {
                let v = gamma[(i, j)].abs();
                if v > entry[(i, j)] {
                    entry[(i, j)] = v;
                }
            }
        }
    }
    let total = entry.iter().fold(T::zero(), |acc, &v| acc + v);
    SigmaBars { entry_bounds: entry, total }
}

/// Φ(q) = (1 + q⁻² ln((2q−1)/(2(q−1))))^{1/2} − 1, defined for q > 1.
pub fn phi_of_q<T: Real>(q: T) -> Result<T> {
    if q <= T::one() {
        return Err(Error::domain("phi_of_q requires q > 1"));
    }
    let two = T::of(2.0);
    let inner = (two * q - T::one()) / (two * (q - T::one()));
    Ok((T::one() + inner.ln() / (q * q)).sqrt() - T::one())
}

/// The d×d all-ones matrix.
pub fn all_ones<T: Real>(d: usize) -> DMatrix<T> {
    DMatrix::from_element(d, d, T::one())
}

/// Deterministic sample plan for assumption spot checks.
#[derive(Debug, Clone, Copy)]
pub struct SamplePlan {
    pub samples: usize,
    pub seed: u64,
    /// Half-width of the uniform box the (y, z) samples are drawn from.
    pub scale: f64,
}

impl Default for SamplePlan {
    fn default() -> Self {
        SamplePlan { samples: 1000, seed: 0, scale: 3.0 }
    }
}

impl SamplePlan {
    pub fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed)
    }
}

/// Outcome of a sampled or certified check.
#[derive(Debug, Clone)]
pub struct CheckReport {
    pub name: String,
    pub pass: bool,
    /// Worst observed margin; negative means a violation of that size.
    pub worst_margin: f64,
    pub witness: Option<String>,
}

impl CheckReport {
    fn pass(name: &str, margin: f64) -> Self {
        CheckReport { name: name.into(), pass: true, worst_margin: margin, witness: None }
    }

    fn fail(name: &str, margin: f64, witness: String) -> Self {
        CheckReport { name: name.into(), pass: false, worst_margin: margin, witness: Some(witness) }
    }
}

/// Certifies σ̲ via the smallest eigenvalue of θθᵀ over the extremes and spot
/// checks the defining inequality G(A) − G(B) ≥ ½σ̲² tr[A−B] on random A ≥ B.
pub fn check_nondegenerate<T: Real>(theta: &VolatilitySet<T>, plan: &SamplePlan) -> CheckReport {
    let d = theta.dim();
    let mut min_eig = f64::INFINITY;
    for gamma in theta.gammas() {
        let eig = gamma.symmetric_eigenvalues();
        for v in eig.iter() {
            min_eig = min_eig.min(v.as_f64());
        }
    }
    let certified = if min_eig > 0.0 { min_eig.sqrt() } else { 0.0 };
    let declared = theta.sigma_lower().as_f64();
    if certified + CHECK_TOL < declared {
        return CheckReport::fail(
            "nondegeneracy",
            certified - declared,
            format!("certified sigma_lower {certified:.6e} below declared {declared:.6e}"),
        );
    }

    let mut rng = plan.rng();
    let mut worst = f64::INFINITY;
    for _ in 0..plan.samples.min(200) {
        let b_raw = DMatrix::from_fn(d, d, |_, _| T::of(rng.gen_range(-1.0..1.0)));
        let b = (&b_raw + b_raw.transpose()) * T::of(0.5);
        let m = DMatrix::from_fn(d, d, |_, _| T::of(rng.gen_range(-1.0..1.0)));
        let diff = &m * m.transpose();
        let a = &b + &diff;
        let ga = eval_g(&a, theta).expect("symmetric by construction");
        let gb = eval_g(&b, theta).expect("symmetric by construction");
        let lhs = (ga - gb).as_f64();
        let rhs = 0.5 * declared * declared * diff.trace().as_f64();
        let margin = lhs - rhs;
        if margin < worst {
            worst = margin;
        }
        if margin < -CHECK_TOL {
            return CheckReport::fail(
                "nondegeneracy",
                margin,
                format!("sampled G(A)-G(B) = {lhs:.6e} below bound {rhs:.6e}"),
            );
        }
    }
    CheckReport::pass("nondegeneracy", worst.min(certified - declared))
}

/// Generator (f, gⁱʲ) with declared growth constants.
#[derive(Debug, Clone)]
pub struct GeneratorSpec<T: Real> {
    pub dim: usize,
    f: Expr,
    /// Upper triangle of the symmetric d×d array, row-major: (0,0), (0,1), ...
    g: Vec<Expr>,
    pub m0: T,
    pub ly: T,
    pub lz: T,
    pub mu: Option<T>,
}

pub(crate) fn upper_index(d: usize, i: usize, j: usize) -> usize {
    let (i, j) = if i <= j { (i, j) } else { (j, i) };
    // Row-major offset into the packed upper triangle.
    i * d - i * (i + 1) / 2 + j
}

impl<T: Real> GeneratorSpec<T> {
    pub fn new(
        dim: usize,
        f: Expr,
        g_upper: Vec<Expr>,
        m0: T,
        ly: T,
        lz: T,
        mu: Option<T>,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::input("generator dimension must be positive"));
        }
        let expected = dim * (dim + 1) / 2;
        if g_upper.len() != expected {
            return Err(Error::input(format!(
                "g needs {expected} upper-triangle entries for dimension {dim}, got {}",
                g_upper.len()
            )));
        }
        Ok(GeneratorSpec { dim, f, g: g_upper, m0, ly, lz, mu })
    }

    /// Generator with g ≡ 0.
    pub fn without_g(dim: usize, f: Expr, m0: T, ly: T, lz: T, mu: Option<T>) -> Self {
        let g = vec![Expr::Const(0.0); dim * (dim + 1) / 2];
        GeneratorSpec { dim, f, g, m0, ly, lz, mu }
    }

    pub fn f_expr(&self) -> &Expr {
        &self.f
    }

    pub fn g_expr(&self, i: usize, j: usize) -> &Expr {
        &self.g[upper_index(self.dim, i, j)]
    }

    pub fn eval_f(&self, t: T, y: T, z: &DVector<T>) -> Result<T> {
        self.f.eval(&generator_env(t, y, z))
    }

    /// gⁱʲ with zero-based (i, j); symmetric by packed storage.
    pub fn eval_g(&self, i: usize, j: usize, t: T, y: T, z: &DVector<T>) -> Result<T> {
        self.g[upper_index(self.dim, i, j)].eval(&generator_env(t, y, z))
    }
}

/// Variable environment for generator expressions: t, y, z1..zd, znorm, znorm2.
pub fn generator_env<T: Real>(t: T, y: T, z: &DVector<T>) -> impl Fn(&str) -> Option<T> + '_ {
    move |name: &str| match name {
        "t" => Some(t),
        "y" => Some(y),
        "znorm" => Some(z.norm()),
        "znorm2" => Some(z.norm_squared()),
        _ => {
            let idx: usize = name.strip_prefix('z')?.parse().ok()?;
            (1..=z.len()).contains(&idx).then(|| z[idx - 1])
        }
    }
}

/// Checks the dissipativity condition on a sample plan:
/// (y−y′)(f(t,y,z)−f(t,y′,z)) + 2G(((y−y′)(gⁱʲ(t,y,z)−gⁱʲ(t,y′,z)))ᵢⱼ) ≤ −μ|y−y′|².
pub fn check_condition_dissipative<T: Real>(
    gen: &GeneratorSpec<T>,
    theta: &VolatilitySet<T>,
    plan: &SamplePlan,
) -> Result<CheckReport> {
    let mu = gen
        .mu
        .ok_or_else(|| Error::config("dissipativity check requires the constant mu"))?;
    let d = gen.dim;
    if theta.dim() != d {
        return Err(Error::input("generator and volatility set dimensions differ"));
    }
    let mut rng = plan.rng();
    let mut worst = f64::INFINITY;
    let mut witness = None;
    for _ in 0..plan.samples {
        let t = T::of(rng.gen_range(0.0..1.0));
        let y = T::of(rng.gen_range(-plan.scale..plan.scale));
        let yp = T::of(rng.gen_range(-plan.scale..plan.scale));
        let z = DVector::from_fn(d, |_, _| T::of(rng.gen_range(-plan.scale..plan.scale)));
        let dy = y - yp;
        let fy = gen.eval_f(t, y, &z)?;
        let fyp = gen.eval_f(t, yp, &z)?;
        let mut gmat = DMatrix::zeros(d, d);
        for i in 0..d {
            for j in i..d {
                let gij = gen.eval_g(i, j, t, y, &z)? - gen.eval_g(i, j, t, yp, &z)?;
                gmat[(i, j)] = dy * gij;
                gmat[(j, i)] = dy * gij;
            }
        }
        let lhs = dy * (fy - fyp) + T::of(2.0) * eval_g(&gmat, theta)?;
        let margin = (-mu * dy * dy - lhs).as_f64();
        if margin < worst {
            worst = margin;
            if margin < -CHECK_TOL {
                witness = Some(format!(
                    "t={:.4}, y={:.4}, y'={:.4}: lhs {:.6e} exceeds -mu|y-y'|^2 {:.6e}",
                    t.as_f64(),
                    y.as_f64(),
                    yp.as_f64(),
                    lhs.as_f64(),
                    (-mu * dy * dy).as_f64()
                ));
            }
        }
    }
    Ok(match witness {
        Some(w) => CheckReport::fail("dissipativity", worst, w),
        None => CheckReport::pass("dissipativity", worst),
    })
}

/// Spot checks the declared Lipschitz constants and the mu/Ly consistency
/// relation Ly ≥ μ/(1 − 2G(−J_d)); returns one report per check.
pub fn check_assumptions<T: Real>(
    gen: &GeneratorSpec<T>,
    theta: &VolatilitySet<T>,
    plan: &SamplePlan,
) -> Result<Vec<CheckReport>> {
    let d = gen.dim;
    if theta.dim() != d {
        return Err(Error::input("generator and volatility set dimensions differ"));
    }
    let mut reports = Vec::new();
    reports.push(check_nondegenerate(theta, plan));

    let mut rng = plan.rng();
    let mut worst_ly = f64::INFINITY;
    let mut worst_lz = f64::INFINITY;
    let mut ly_witness = None;
    let mut lz_witness = None;
    for _ in 0..plan.samples {
        let t = T::of(rng.gen_range(0.0..1.0));
        let y = T::of(rng.gen_range(-plan.scale..plan.scale));
        let yp = T::of(rng.gen_range(-plan.scale..plan.scale));
        let z = DVector::from_fn(d, |_, _| T::of(rng.gen_range(-plan.scale..plan.scale)));
        let zp = DVector::from_fn(d, |_, _| T::of(rng.gen_range(-plan.scale..plan.scale)));

        // |h(t,y,z) - h(t,y',z)| <= Ly |y-y'| for f and every g entry.
        let dy = (y - yp).abs();
        if dy > T::of(1e-12) {
            let mut diff = (gen.eval_f(t, y, &z)? - gen.eval_f(t, yp, &z)?).abs();
            for i in 0..d {
                for j in i..d {
                    let gd = (gen.eval_g(i, j, t, y, &z)? - gen.eval_g(i, j, t, yp, &z)?).abs();
                    if gd > diff {
                        diff = gd;
                    }
                }
            }
            let margin = (gen.ly * dy - diff).as_f64();
            if margin < worst_ly {
                worst_ly = margin;
                if margin < -CHECK_TOL {
                    ly_witness = Some(format!(
                        "y={:.4}, y'={:.4}: difference {:.6e} exceeds Ly*|y-y'| {:.6e}",
                        y.as_f64(),
                        yp.as_f64(),
                        diff.as_f64(),
                        (gen.ly * dy).as_f64()
                    ));
                }
            }
        }

        // |h(t,y,z) - h(t,y,z')| <= Lz (1 + |z| + |z'|) |z-z'|.
        let dz = (&z - &zp).norm();
        if dz > T::of(1e-12) {
            let mut diff = (gen.eval_f(t, y, &z)? - gen.eval_f(t, y, &zp)?).abs();
            for i in 0..d {
                for j in i..d {
                    let gd = (gen.eval_g(i, j, t, y, &z)? - gen.eval_g(i, j, t, y, &zp)?).abs();
                    if gd > diff {
                        diff = gd;
                    }
                }
            }
            let bound = gen.lz * (T::one() + z.norm() + zp.norm()) * dz;
            let margin = (bound - diff).as_f64();
            if margin < worst_lz {
                worst_lz = margin;
                if margin < -CHECK_TOL {
                    lz_witness = Some(format!(
                        "|z-z'|={:.4}: difference {:.6e} exceeds Lz(1+|z|+|z'|)|z-z'| {:.6e}",
                        dz.as_f64(),
                        diff.as_f64(),
                        bound.as_f64()
                    ));
                }
            }
        }
    }
    reports.push(match ly_witness {
        Some(w) => CheckReport::fail("lipschitz-y", worst_ly, w),
        None => CheckReport::pass("lipschitz-y", worst_ly),
    });
    reports.push(match lz_witness {
        Some(w) => CheckReport::fail("lipschitz-z", worst_lz, w),
        None => CheckReport::pass("lipschitz-z", worst_lz),
    });

    if let Some(mu) = gen.mu {
        // Ly >= mu / (1 - 2G(-J_d)); the denominator is positive because
        // G(-J_d) <= -sigma_lower^2 * d / 2 < 0.
        let g_neg = eval_g(&(-all_ones::<T>(d)), theta)?;
        let denom = T::one() - T::of(2.0) * g_neg;
        let floor = mu / denom;
        let margin = (gen.ly - floor).as_f64();
        reports.push(if margin >= -CHECK_TOL {
            CheckReport::pass("ly-mu-consistency", margin)
        } else {
            CheckReport::fail(
                "ly-mu-consistency",
                margin,
                format!(
                    "Ly = {:.6e} below mu/(1-2G(-J)) = {:.6e}",
                    gen.ly.as_f64(),
                    floor.as_f64()
                ),
            )
        });
        reports.push(check_condition_dissipative(gen, theta, plan)?);
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn scalar_set(lo: f64, hi: f64) -> VolatilitySet<f64> {
        VolatilitySet::scalar(&[lo, hi], lo).unwrap()
    }

    fn mat(d: usize, vals: &[f64]) -> DMatrix<f64> {
        DMatrix::from_row_slice(d, d, vals)
    }

    #[test]
    fn eval_g_scalar_endpoints() {
        let theta = scalar_set(0.5, 1.0);
        assert_relative_eq!(eval_g(&mat(1, &[2.0]), &theta).unwrap(), 1.0);
        assert_relative_eq!(eval_g(&mat(1, &[0.0]), &theta).unwrap(), 0.0);
        assert_relative_eq!(eval_g(&mat(1, &[-2.0]), &theta).unwrap(), -0.25);
    }

    #[test]
    fn eval_g_rejects_mismatch_and_asymmetry() {
        let theta = scalar_set(0.5, 1.0);
        assert!(eval_g(&DMatrix::zeros(2, 2), &theta).is_err());
        let t2 = VolatilitySet::new(2, vec![DMatrix::identity(2, 2)], 1.0).unwrap();
        assert!(eval_g(&mat(2, &[0.0, 1.0, -1.0, 0.0]), &t2).is_err());
    }

    #[test]
    fn sigma_bounds_examples() {
        let s = sigma_bounds(&scalar_set(0.5, 1.0));
        assert_relative_eq!(s.entry_bounds[(0, 0)], 1.0);
        assert_relative_eq!(s.total, 1.0);

        let t2 = VolatilitySet::new(2, vec![DMatrix::identity(2, 2)], 1.0).unwrap();
        let s2 = sigma_bounds(&t2);
        assert_relative_eq!(s2.entry_bounds[(0, 0)], 1.0);
        assert_relative_eq!(s2.entry_bounds[(0, 1)], 0.0);
        assert_relative_eq!(s2.total, 2.0);

        let t3 = VolatilitySet::new(
            2,
            vec![
                DMatrix::identity(2, 2),
                DMatrix::from_row_slice(2, 2, &[0.5, 0.0, 0.0, 2.0]),
            ],
            0.5,
        )
        .unwrap();
        let s3 = sigma_bounds(&t3);
        assert_relative_eq!(s3.entry_bounds[(0, 0)], 1.0);
        assert_relative_eq!(s3.entry_bounds[(1, 1)], 4.0);
        assert_relative_eq!(s3.entry_bounds[(0, 1)], 0.0);
        assert_relative_eq!(s3.total, 5.0);
    }

    #[test]
    fn phi_values() {
        assert!(phi_of_q(1e9f64).unwrap() < 1e-8);
        assert_relative_eq!(phi_of_q(2.0f64).unwrap(), 0.049460, epsilon = 1e-5);
        assert!(phi_of_q(1.0001f64).unwrap() > 2.0);
        assert!(phi_of_q(1.0f64).is_err());
        assert!(phi_of_q(0.5f64).is_err());
    }

    #[test]
    fn phi_strictly_decreasing() {
        let grid = [1.01f64, 1.1, 2.0, 5.0, 10.0, 100.0];
        for w in grid.windows(2) {
            assert!(phi_of_q(w[0]).unwrap() > phi_of_q(w[1]).unwrap());
        }
    }

    #[test]
    fn nondegeneracy_reports() {
        let plan = SamplePlan::default();
        let r = check_nondegenerate(&scalar_set(0.5, 1.0), &plan);
        assert!(r.pass, "{:?}", r);

        let t2 = VolatilitySet::new(2, vec![DMatrix::identity(2, 2)], 1.0).unwrap();
        assert!(check_nondegenerate(&t2, &plan).pass);

        // Declared sigma_lower above what the extremes certify.
        let over = VolatilitySet::scalar(&[0.5, 1.0], 0.9).unwrap();
        assert!(!check_nondegenerate(&over, &plan).pass);
    }

    #[test]
    fn singular_extreme_rejected() {
        let r = VolatilitySet::new(
            2,
            vec![DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0])],
            0.1,
        );
        assert!(r.is_err());
    }

    #[test]
    fn dissipativity_examples() {
        let theta = scalar_set(0.5, 1.0);
        let plan = SamplePlan::default();

        let decay = GeneratorSpec::without_g(
            1,
            Expr::parse("-y").unwrap(),
            0.0,
            2.0,
            1.0,
            Some(1.0),
        );
        assert!(check_condition_dissipative(&decay, &theta, &plan).unwrap().pass);

        let growth = GeneratorSpec::without_g(
            1,
            Expr::parse("y").unwrap(),
            0.0,
            2.0,
            1.0,
            Some(1.0),
        );
        let r = check_condition_dissipative(&growth, &theta, &plan).unwrap();
        assert!(!r.pass);
        assert!(r.witness.is_some());

        let trig = GeneratorSpec::without_g(
            1,
            Expr::parse("-2*y + sin(z1)").unwrap(),
            1.0,
            4.0,
            1.0,
            Some(2.0),
        );
        assert!(check_condition_dissipative(&trig, &theta, &plan).unwrap().pass);

        let no_mu = GeneratorSpec::without_g(1, Expr::parse("-y").unwrap(), 0.0, 1.0, 1.0, None);
        assert!(check_condition_dissipative(&no_mu, &theta, &plan).is_err());
    }

    #[test]
    fn assumption_suite_flags_misdeclared_ly() {
        let theta = scalar_set(0.5, 1.0);
        let plan = SamplePlan::default();
        let bad = GeneratorSpec::without_g(1, Expr::parse("-5*y").unwrap(), 0.0, 1.0, 1.0, None);
        let reports = check_assumptions(&bad, &theta, &plan).unwrap();
        let ly = reports.iter().find(|r| r.name == "lipschitz-y").unwrap();
        assert!(!ly.pass);
    }

    #[test]
    fn assumption_suite_passes_honest_declaration() {
        let theta = scalar_set(0.5, 1.0);
        let plan = SamplePlan::default();
        let gen = GeneratorSpec::without_g(
            1,
            Expr::parse("-y + sin(z1)").unwrap(),
            0.0,
            2.0,
            1.0,
            Some(1.0),
        );
        let reports = check_assumptions(&gen, &theta, &plan).unwrap();
        for r in &reports {
            assert!(r.pass, "{:?}", r);
        }
    }

    #[test]
    fn quadratic_generator_env() {
        let gen = GeneratorSpec::without_g(
            1,
            Expr::parse("znorm2 - y").unwrap(),
            0.0,
            1.0,
            1.0,
            None,
        );
        let z = DVector::from_element(1, 3.0);
        assert_relative_eq!(gen.eval_f(0.0, 1.0, &z).unwrap(), 8.0);
    }

    proptest! {
        #[test]
        fn g_positively_homogeneous(a in -5.0f64..5.0, c in 0.0f64..10.0) {
            let theta = scalar_set(0.5, 1.0);
            let lhs = eval_g(&mat(1, &[c * a]), &theta).unwrap();
            let rhs = c * eval_g(&mat(1, &[a]), &theta).unwrap();
            prop_assert!((lhs - rhs).abs() <= 1e-12 * rhs.abs().max(1.0));
        }

        #[test]
        fn g_subadditive_2d(
            a in proptest::array::uniform3(-3.0f64..3.0),
            b in proptest::array::uniform3(-3.0f64..3.0),
        ) {
            let theta = VolatilitySet::new(
                2,
                vec![
                    DMatrix::identity(2, 2),
                    DMatrix::from_row_slice(2, 2, &[0.5, 0.0, 0.3, 1.5]),
                ],
                0.4,
            ).unwrap();
            let ma = mat(2, &[a[0], a[1], a[1], a[2]]);
            let mb = mat(2, &[b[0], b[1], b[1], b[2]]);
            let sum = eval_g(&(&ma + &mb), &theta).unwrap();
            let parts = eval_g(&ma, &theta).unwrap() + eval_g(&mb, &theta).unwrap();
            prop_assert!(sum <= parts + 1e-12);
        }

        #[test]
        fn g_monotone_2d(
            b in proptest::array::uniform3(-3.0f64..3.0),
            m in proptest::array::uniform4(-2.0f64..2.0),
        ) {
            let theta = VolatilitySet::new(
                2,
                vec![
                    DMatrix::identity(2, 2),
                    DMatrix::from_row_slice(2, 2, &[0.5, 0.0, 0.3, 1.5]),
                ],
                0.4,
            ).unwrap();
            let mb = mat(2, &[b[0], b[1], b[1], b[2]]);
            let mm = mat(2, &[m[0], m[1], m[2], m[3]]);
            let ma = &mb + mm.transpose() * &mm;
            prop_assert!(eval_g(&ma, &theta).unwrap() >= eval_g(&mb, &theta).unwrap() - 1e-12);
        }

        #[test]
        fn g_scalar_closed_form(a in -10.0f64..10.0, sigma in 0.1f64..1.0) {
            let theta = VolatilitySet::scalar(&[sigma, 1.0], sigma).unwrap();
            let lhs = eval_g(&mat(1, &[a]), &theta).unwrap();
            let rhs = 0.5 * (a.max(0.0) - sigma * sigma * (-a).max(0.0));
            prop_assert_eq!(lhs, rhs);
        }

        #[test]
        fn sigma_total_is_entry_sum(v in proptest::collection::vec(0.2f64..2.0, 4)) {
            let theta = VolatilitySet::new(
                2,
                vec![
                    DMatrix::from_row_slice(2, 2, &[v[0], 0.0, v[1], v[2]]),
                    DMatrix::from_row_slice(2, 2, &[v[3], 0.1, 0.0, 1.0]),
                ],
                0.01,
            ).unwrap();
            let s = sigma_bounds(&theta);
            let manual: f64 = s.entry_bounds.iter().sum();
            prop_assert_eq!(s.total, manual);
        }
    }
}
