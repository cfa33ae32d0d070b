//! Extended-space construction for linear drivers.
//!
//! A d-dimensional driving noise is embedded into a space of dimension
//! d̃ = 2d + d(d−1) + d(d−1)d/2 whose extra coordinates absorb the `ds` and
//! `d⟨B⟩ⁱʲ` drift contributions of linear coefficients, so that a single
//! exponential change of measure removes the whole drift. This module holds
//! the dimension formula, the three index bijections, the block matrix θ̃ per
//! extreme point, the Λ assembly, and the exact symbolic drift identity.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::expr::Expr;
use crate::gcore::{upper_index, VolatilitySet};
use crate::scalar::Real;

/// Dimension of the extended space: 2d + d(d−1) + d(d−1)d/2.
pub fn d_tilde(d: usize) -> Result<usize> {
    if d == 0 {
        return Err(Error::domain("dimension must be positive"));
    }
    Ok(2 * d + d * (d - 1) + d * (d - 1) * d / 2)
}

/// Role of one extended coordinate. All indices are 1-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CoordLabel {
    /// Original noise component i.
    Base(usize),
    /// ds-absorbing component i.
    Dot(usize),
    /// d⟨B⟩ⁱⁱ-absorbing component, tagged (i, k) with i ≠ k.
    Hat(usize, usize),
    /// d⟨B⟩ⁱʲ-absorbing component, tagged (i, j, k) with i < j.
    Bar(usize, usize, usize),
}

/// The three index bijections between coordinate tags and positions 1..d̃.
#[derive(Debug, Clone)]
pub struct IndexMaps {
    dim: usize,
    dt: usize,
    h_inverse: Vec<(usize, usize)>,
    hat_inverse: Vec<(usize, usize)>,
    bar_inverse: Vec<(usize, usize, usize)>,
}

impl IndexMaps {
    pub fn new(d: usize) -> Result<Self> {
        let dt = d_tilde(d)?;
        // Inverses materialized by enumeration; forward formulas are checked
        // to land in range as the tables are filled.
        let npairs = d * (d - 1) / 2;
        let mut h_inverse = vec![(0, 0); npairs];
        let mut hat_inverse = vec![(0, 0); d * (d - 1)];
        let mut bar_inverse = vec![(0, 0, 0); d * (d - 1) * d / 2];
        for i in 1..=d {
            for j in (i + 1)..=d {
                let h = index_h(i, j, d)?;
                h_inverse[h - 1] = (i, j);
                for k in 1..=d {
                    let l = index_bar(i, j, k, d)?;
                    bar_inverse[l - 2 * d - d * (d - 1) - 1] = (i, j, k);
                }
            }
            for k in 1..=d {
                if k != i {
                    let l = index_hat(i, k, d)?;
                    hat_inverse[l - 2 * d - 1] = (i, k);
                }
            }
        }
        Ok(IndexMaps { dim: d, dt, h_inverse, hat_inverse, bar_inverse })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn d_tilde(&self) -> usize {
        self.dt
    }

    /// Tag of extended coordinate l ∈ 1..d̃.
    pub fn label(&self, l: usize) -> Result<CoordLabel> {
        let d = self.dim;
        if l == 0 || l > self.dt {
            return Err(Error::domain(format!("coordinate {l} out of range 1..{}", self.dt)));
        }
        Ok(if l <= d {
            CoordLabel::Base(l)
        } else if l <= 2 * d {
            CoordLabel::Dot(l - d)
        } else if l <= 2 * d + d * (d - 1) {
            let (i, k) = self.hat_inverse[l - 2 * d - 1];
            CoordLabel::Hat(i, k)
        } else {
            let (i, j, k) = self.bar_inverse[l - 2 * d - d * (d - 1) - 1];
            CoordLabel::Bar(i, j, k)
        })
    }

    pub fn labels(&self) -> Result<Vec<CoordLabel>> {
        (1..=self.dt).map(|l| self.label(l)).collect()
    }

    pub fn h_inverse(&self, h: usize) -> Result<(usize, usize)> {
        self.h_inverse
            .get(h.wrapping_sub(1))
            .copied()
            .ok_or_else(|| Error::domain(format!("pair index {h} out of range")))
    }
}

/// Position of the unordered pair (i, j), i < j, in lexicographic order.
pub fn index_h(i: usize, j: usize, d: usize) -> Result<usize> {
    if !(1 <= i && i < j && j <= d) {
        return Err(Error::domain(format!("need 1 <= i < j <= d, got ({i}, {j}) with d = {d}")));
    }
    let prefix: usize = (0..i).map(|m| d - m).sum();
    Ok(prefix - d + j - i)
}

/// Position of the ds-block tag (i, k), i ≠ k, offset past the first 2d coordinates.
pub fn index_hat(i: usize, k: usize, d: usize) -> Result<usize> {
    if i == 0 || k == 0 || i > d || k > d || i == k {
        return Err(Error::domain(format!("need 1 <= i, k <= d with i != k, got ({i}, {k})")));
    }
    Ok(2 * d + (i - 1) * (d - 1) + k - usize::from(k > i))
}

/// Position of the mixed-variation tag (i, j, k), i < j, 1 ≤ k ≤ d.
pub fn index_bar(i: usize, j: usize, k: usize, d: usize) -> Result<usize> {
    if !(1 <= i && i < j && j <= d) || k == 0 || k > d {
        return Err(Error::domain(format!(
            "need 1 <= i < j <= d and 1 <= k <= d, got ({i}, {j}, {k})"
        )));
    }
    let prefix: usize = (0..i).map(|m| d - m).sum();
    Ok(2 * d + d * (d - 1) + (prefix - d) * d + (j - i - 1) * d + k)
}

/// Builds the d̃×d̃ block matrix θ̃ for one extreme point θ.
///
/// Column block 1 stacks θ, θ^{−1,⊤}, θ̂, θ̄; the remaining diagonal carries
/// identity blocks for the Dot, Hat and Bar rows; everything else is zero.
pub fn build_theta_tilde<T: Real>(theta: &DMatrix<T>) -> Result<DMatrix<T>> {
    let d = theta.nrows();
    if theta.ncols() != d || d == 0 {
        return Err(Error::input("theta must be square and nonempty"));
    }
    let dt = d_tilde(d)?;
    let theta_inv_t = theta
        .clone()
        .try_inverse()
        .ok_or_else(|| {
            Error::numeric(format!(
                "theta is singular (det = {:.3e})",
                theta.clone().determinant().as_f64()
            ))
        })?
        .transpose();
    let gamma = theta * theta.transpose();

    let mut out = DMatrix::zeros(dt, dt);
    // Base rows: theta itself.
    out.view_mut((0, 0), (d, d)).copy_from(theta);
    // Dot rows: theta^{-T} plus identity.
    out.view_mut((d, 0), (d, d)).copy_from(&theta_inv_t);
    for r in 0..d {
        out[(d + r, d + r)] = T::one();
    }
    // Hat rows: for each i, gamma_ii * (I_d with row i removed) * theta^{-T}.
    let mut row = 2 * d;
    for i in 0..d {
        for r in 0..d {
            if r == i {
                continue;
            }
            for c in 0..d {
                out[(row, c)] = gamma[(i, i)] * theta_inv_t[(r, c)];
            }
            out[(row, row)] = T::one();
            row += 1;
        }
    }
    // Bar rows: for each pair h ~ (i, j), gamma_ij * I_d * theta^{-T}.
    for i in 0..d {
        for j in (i + 1)..d {
            for r in 0..d {
                for c in 0..d {
                    out[(row, c)] = gamma[(i, j)] * theta_inv_t[(r, c)];
                }
                out[(row, row)] = T::one();
                row += 1;
            }
        }
    }
    debug_assert_eq!(row, dt);
    Ok(out)
}

/// Deviations of θ̃θ̃ᵀ from its displayed block formulas.
#[derive(Debug, Clone)]
pub struct ProductReport {
    pub max_deviation: f64,
    pub pass: bool,
}

/// Checks the first column block of θ̃θ̃ᵀ against the closed-form blocks:
/// (Base,Base) = θθᵀ, (Dot,Base) = I, (Hat,Base) rows = γⁱⁱ·(row k of I, k≠i),
/// (Bar,Base) rows = γⁱʲ·(rows of I).
pub fn verify_product_structure<T: Real>(theta: &DMatrix<T>) -> Result<ProductReport> {
    let d = theta.nrows();
    let tt = build_theta_tilde(theta)?;
    let prod = &tt * tt.transpose();
    let gamma = theta * theta.transpose();

    let mut dev = 0.0f64;
    let mut upd = |x: T, expect: T| {
        let e = (x - expect).abs().as_f64();
        if e > dev {
            dev = e;
        }
    };

    for r in 0..d {
        for c in 0..d {
            upd(prod[(r, c)], gamma[(r, c)]);
            upd(prod[(d + r, c)], if r == c { T::one() } else { T::zero() });
        }
    }
    let mut row = 2 * d;
    for i in 0..d {
        for k in 0..d {
            if k == i {
                continue;
            }
            for c in 0..d {
                let expect = if c == k { gamma[(i, i)] } else { T::zero() };
                upd(prod[(row, c)], expect);
            }
            row += 1;
        }
    }
    for i in 0..d {
        for j in (i + 1)..d {
            for k in 0..d {
                for c in 0..d {
                    let expect = if c == k { gamma[(i, j)] } else { T::zero() };
                    upd(prod[(row, c)], expect);
                }
                row += 1;
            }
        }
    }
    Ok(ProductReport { max_deviation: dev, pass: dev < 1e-10 })
}

/// Extended construction for a whole volatility set.
#[derive(Debug, Clone)]
pub struct ExtendedConstruction<T: Real> {
    pub d_tilde: usize,
    pub theta_tildes: Vec<DMatrix<T>>,
    pub labels: Vec<CoordLabel>,
}

impl<T: Real> ExtendedConstruction<T> {
    pub fn new(theta: &VolatilitySet<T>) -> Result<Self> {
        let maps = IndexMaps::new(theta.dim())?;
        let theta_tildes = theta
            .extremes()
            .iter()
            .map(build_theta_tilde)
            .collect::<Result<Vec<_>>>()?;
        Ok(ExtendedConstruction {
            d_tilde: maps.d_tilde(),
            theta_tildes,
            labels: maps.labels()?,
        })
    }
}

/// Coefficient rules of a linear driver
/// f = a·y + b·z + m plus g-part cⁱʲ·y + dⁱʲ·z + nⁱʲ.
///
/// Each rule is an expression in `t` and the current noise value `b1..bd`,
/// so coefficients may be time-dependent and Markovian in the state.
#[derive(Debug, Clone)]
pub struct LinearCoefficients {
    dim: usize,
    a: Expr,
    b: Vec<Expr>,
    /// Packed upper triangles, row-major: (1,1), (1,2), ..., (d,d).
    c: Vec<Expr>,
    dcoef: Vec<Vec<Expr>>,
    m: Expr,
    n: Vec<Expr>,
}

impl LinearCoefficients {
    pub fn new(
        dim: usize,
        a: Expr,
        b: Vec<Expr>,
        c_upper: Vec<Expr>,
        d_upper: Vec<Vec<Expr>>,
        m: Expr,
        n_upper: Vec<Expr>,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::input("dimension must be positive"));
        }
        let pairs = dim * (dim + 1) / 2;
        if b.len() != dim {
            return Err(Error::input(format!("b needs {dim} entries, got {}", b.len())));
        }
        if c_upper.len() != pairs || n_upper.len() != pairs || d_upper.len() != pairs {
            return Err(Error::input(format!(
                "c, d, n need {pairs} upper-triangle entries for dimension {dim}"
            )));
        }
        for (idx, dv) in d_upper.iter().enumerate() {
            if dv.len() != dim {
                return Err(Error::input(format!(
                    "d entry {idx} needs a {dim}-vector of rules, got {}",
                    dv.len()
                )));
            }
        }
        Ok(LinearCoefficients { dim, a, b, c: c_upper, dcoef: d_upper, m, n: n_upper })
    }

    /// All-zero coefficients (driver reduces to the terminal expectation).
    pub fn zero(dim: usize) -> Self {
        let pairs = dim * (dim + 1) / 2;
        let z = || Expr::Const(0.0);
        LinearCoefficients {
            dim,
            a: z(),
            b: vec![z(); dim],
            c: vec![z(); pairs],
            dcoef: vec![vec![z(); dim]; pairs],
            m: z(),
            n: vec![z(); pairs],
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn with_a(mut self, a: Expr) -> Self {
        self.a = a;
        self
    }

    pub fn with_b(mut self, k: usize, b: Expr) -> Self {
        self.b[k] = b;
        self
    }

    pub fn with_c(mut self, i: usize, j: usize, c: Expr) -> Self {
        self.c[upper_index(self.dim, i, j)] = c;
        self
    }

    pub fn with_d(mut self, i: usize, j: usize, k: usize, e: Expr) -> Self {
        self.dcoef[upper_index(self.dim, i, j)][k] = e;
        self
    }

    pub fn with_m(mut self, m: Expr) -> Self {
        self.m = m;
        self
    }

    pub fn with_n(mut self, i: usize, j: usize, n: Expr) -> Self {
        self.n[upper_index(self.dim, i, j)] = n;
        self
    }

    pub fn a_at<T: Real>(&self, t: T, state: &DVector<T>) -> Result<T> {
        self.a.eval(&coeff_env(t, state))
    }

    pub fn b_at<T: Real>(&self, t: T, state: &DVector<T>) -> Result<DVector<T>> {
        let env = coeff_env(t, state);
        let vals = self
            .b
            .iter()
            .map(|e| e.eval(&env))
            .collect::<Result<Vec<_>>>()?;
        Ok(DVector::from_vec(vals))
    }

    pub fn c_at<T: Real>(&self, t: T, state: &DVector<T>) -> Result<DMatrix<T>> {
        let env = coeff_env(t, state);
        let mut out = DMatrix::zeros(self.dim, self.dim);
        for i in 0..self.dim {
            for j in i..self.dim {
                let v = self.c[upper_index(self.dim, i, j)].eval(&env)?;
                out[(i, j)] = v;
                out[(j, i)] = v;
            }
        }
        Ok(out)
    }

    /// dⁱʲ as a d-vector; (i, j) zero-based, symmetric.
    pub fn d_at<T: Real>(&self, i: usize, j: usize, t: T, state: &DVector<T>) -> Result<DVector<T>> {
        let env = coeff_env(t, state);
        let vals = self.dcoef[upper_index(self.dim, i, j)]
            .iter()
            .map(|e| e.eval(&env))
            .collect::<Result<Vec<_>>>()?;
        Ok(DVector::from_vec(vals))
    }

    pub fn m_at<T: Real>(&self, t: T, state: &DVector<T>) -> Result<T> {
        self.m.eval(&coeff_env(t, state))
    }

    pub fn n_at<T: Real>(&self, t: T, state: &DVector<T>) -> Result<DMatrix<T>> {
        let env = coeff_env(t, state);
        let mut out = DMatrix::zeros(self.dim, self.dim);
        for i in 0..self.dim {
            for j in i..self.dim {
                let v = self.n[upper_index(self.dim, i, j)].eval(&env)?;
                out[(i, j)] = v;
                out[(j, i)] = v;
            }
        }
        Ok(out)
    }

    /// True when every b and d rule is the zero constant.
    pub fn drift_free(&self) -> bool {
        let is_zero = |e: &Expr| e.as_const() == Some(0.0);
        self.b.iter().all(is_zero) && self.dcoef.iter().all(|dv| dv.iter().all(is_zero))
    }

    /// True when every b and d rule is a constant, which makes the
    /// accumulated drift a function of (t, ⟨B⟩) alone.
    pub fn drift_rules_constant(&self) -> bool {
        let is_const = |e: &Expr| e.as_const().is_some();
        self.b.iter().all(is_const) && self.dcoef.iter().all(|dv| dv.iter().all(is_const))
    }

    /// True when every coefficient rule is a constant.
    pub fn rules_constant(&self) -> bool {
        let is_const = |e: &Expr| e.as_const().is_some();
        is_const(&self.a)
            && is_const(&self.m)
            && self.b.iter().all(is_const)
            && self.c.iter().all(is_const)
            && self.n.iter().all(is_const)
            && self.dcoef.iter().all(|dv| dv.iter().all(is_const))
    }
}

fn coeff_env<T: Real>(t: T, state: &DVector<T>) -> impl Fn(&str) -> Option<T> + '_ {
    move |name: &str| match name {
        "t" => Some(t),
        _ => {
            let idx: usize = name.strip_prefix('b')?.parse().ok()?;
            (1..=state.len()).contains(&idx).then(|| state[idx - 1])
        }
    }
}

/// Assembles the d̃-dimensional Λ from (b, dⁱʲ) evaluated at (t, state).
///
/// Coordinates: Λˡ = dˡˡ·eₗ for l ≤ d; bⁱ on the Dot block; dⁱⁱ·e_k on Hat
/// (i,k); 2dⁱʲ·e_k − dⁱⁱ·eᵢ·1_{k=j} − dʲʲ·eⱼ·1_{k=i} on Bar (i,j,k).
pub fn build_lambda<T: Real>(
    coeffs: &LinearCoefficients,
    t: T,
    state: &DVector<T>,
) -> Result<DVector<T>> {
    let d = coeffs.dim();
    let maps = IndexMaps::new(d)?;
    let b = coeffs.b_at(t, state)?;
    // dval[(i, j)] holds the d-vector d^{ij}, zero-based i <= j.
    let mut dval = Vec::new();
    for i in 0..d {
        for j in i..d {
            dval.push(coeffs.d_at(i, j, t, state)?);
        }
    }
    let dv = |i: usize, j: usize| &dval[upper_index(d, i, j)];

    let mut lam = DVector::zeros(maps.d_tilde());
    for l in 1..=maps.d_tilde() {
        lam[l - 1] = match maps.label(l)? {
            CoordLabel::Base(i) => dv(i - 1, i - 1)[i - 1],
            CoordLabel::Dot(i) => b[i - 1],
            CoordLabel::Hat(i, k) => dv(i - 1, i - 1)[k - 1],
            CoordLabel::Bar(i, j, k) => {
                let mut v = T::of(2.0) * dv(i - 1, j - 1)[k - 1];
                if k == j {
                    v -= dv(i - 1, i - 1)[i - 1];
                }
                if k == i {
                    v -= dv(j - 1, j - 1)[j - 1];
                }
                v
            }
        };
    }
    Ok(lam)
}

/// Coefficient symbol: bⁱ or dⁱʲ,ᵏ (stored with i ≤ j). 1-based indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum CoeffSym {
    B(usize),
    D(usize, usize, usize),
}

impl CoeffSym {
    pub fn d(i: usize, j: usize, k: usize) -> CoeffSym {
        if i <= j {
            CoeffSym::D(i, j, k)
        } else {
            CoeffSym::D(j, i, k)
        }
    }
}

/// Integrator symbol: ds or d⟨B⟩ⁱʲ (stored with i ≤ j). 1-based indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum MeasureTerm {
    Ds,
    Qv(usize, usize),
}

impl MeasureTerm {
    pub fn qv(i: usize, j: usize) -> MeasureTerm {
        if i <= j {
            MeasureTerm::Qv(i, j)
        } else {
            MeasureTerm::Qv(j, i)
        }
    }
}

/// Integer linear combination of coefficient symbols.
pub type LinComb = BTreeMap<CoeffSym, i64>;

/// Exact symbolic drift map accumulated per measure term.
pub type DriftMap = BTreeMap<MeasureTerm, LinComb>;

/// Λ coordinates as exact symbol combinations, indexed l − 1.
pub fn lambda_symbols(d: usize) -> Result<Vec<LinComb>> {
    let maps = IndexMaps::new(d)?;
    let mut out = Vec::with_capacity(maps.d_tilde());
    for l in 1..=maps.d_tilde() {
        let mut comb = LinComb::new();
        match maps.label(l)? {
            CoordLabel::Base(i) => {
                comb.insert(CoeffSym::d(i, i, i), 1);
            }
            CoordLabel::Dot(i) => {
                comb.insert(CoeffSym::B(i), 1);
            }
            CoordLabel::Hat(i, k) => {
                comb.insert(CoeffSym::d(i, i, k), 1);
            }
            CoordLabel::Bar(i, j, k) => {
                *comb.entry(CoeffSym::d(i, j, k)).or_insert(0) += 2;
                if k == j {
                    *comb.entry(CoeffSym::d(i, i, i)).or_insert(0) -= 1;
                }
                if k == i {
                    *comb.entry(CoeffSym::d(j, j, j)).or_insert(0) -= 1;
                }
            }
        }
        out.push(comb);
    }
    Ok(out)
}

/// Cross-variation integrator d⟨B̃ᵐ, B̃ˡ⟩ for a base coordinate m ≤ d and any
/// extended coordinate l; `None` when the bracket vanishes.
pub fn pairing(m: usize, label: CoordLabel) -> Option<MeasureTerm> {
    match label {
        CoordLabel::Base(l) => Some(MeasureTerm::qv(m, l)),
        CoordLabel::Dot(i) => (i == m).then_some(MeasureTerm::Ds),
        CoordLabel::Hat(i, k) => (k == m).then_some(MeasureTerm::Qv(i, i)),
        CoordLabel::Bar(i, j, k) => (k == m).then_some(MeasureTerm::qv(i, j)),
    }
}

/// Symbolically accumulates Σₗ Λˡ d⟨B̃ᵐ, B̃ˡ⟩, cancelling the dⁱⁱ,ⁱ terms.
///
/// The result is the drift removed from coordinate m: bᵐ on ds, dⁱⁱ,ᵐ on
/// d⟨B⟩ⁱⁱ and 2dⁱʲ,ᵐ on d⟨B⟩ⁱʲ for i < j.
pub fn girsanov_drift(m: usize, d: usize) -> Result<DriftMap> {
    if m == 0 || m > d {
        return Err(Error::domain(format!("coordinate m = {m} out of range 1..{d}")));
    }
    let maps = IndexMaps::new(d)?;
    let mut drift = DriftMap::new();
    let mut add = |term: MeasureTerm, comb: &LinComb, scale: i64| {
        let slot = drift.entry(term).or_default();
        for (&sym, &mult) in comb {
            *slot.entry(sym).or_insert(0) += scale * mult;
        }
    };

    // Group by block instead of a flat coordinate scan: base pairs give the
    // d^{ll,l} terms, the Dot block gives b^m, Hat gives diagonal brackets,
    // Bar gives the mixed brackets whose corrections cancel the base terms.
    for l in 1..=d {
        let mut comb = LinComb::new();
        comb.insert(CoeffSym::d(l, l, l), 1);
        add(MeasureTerm::qv(m, l), &comb, 1);
    }
    {
        let mut comb = LinComb::new();
        comb.insert(CoeffSym::B(m), 1);
        add(MeasureTerm::Ds, &comb, 1);
    }
    for i in 1..=d {
        if i != m {
            let mut comb = LinComb::new();
            comb.insert(CoeffSym::d(i, i, m), 1);
            add(MeasureTerm::Qv(i, i), &comb, 1);
        }
    }
    for h in 1..=(d * (d - 1) / 2) {
        let (i, j) = maps.h_inverse(h)?;
        let mut comb = LinComb::new();
        *comb.entry(CoeffSym::d(i, j, m)).or_insert(0) += 2;
        if m == j {
            *comb.entry(CoeffSym::d(i, i, i)).or_insert(0) -= 1;
        }
        if m == i {
            *comb.entry(CoeffSym::d(j, j, j)).or_insert(0) -= 1;
        }
        add(MeasureTerm::Qv(i, j), &comb, 1);
    }

    // Drop cancelled symbols and empty terms.
    drift.retain(|_, comb| {
        comb.retain(|_, mult| *mult != 0);
        !comb.is_empty()
    });
    Ok(drift)
}
