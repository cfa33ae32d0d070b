//! Pathwise linearization of locally-Lipschitz generators.
//!
//! Between two candidate solutions (y, z) and (y′, z′) the generator
//! difference is written as a·(y−y′) + b·(z−z′) + m, with matching
//! coefficients c, d, n for the quadratic-variation part. The slope in each
//! coordinate is the clipped difference quotient l^ε·Δf/Δ, which stays
//! bounded near the diagonal; the residuals m, n absorb the clipping and are
//! O(ε). The y-slope falls back to −μ/(1 − 2G(−J)) where the quotient is
//! clipped, which preserves the dissipativity inequality.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{Error, Result};
use crate::gcore::{
    all_ones, eval_g, upper_index, CheckReport, GeneratorSpec, SamplePlan, VolatilitySet,
    CHECK_TOL,
};
use crate::scalar::Real;

/// Clipping factor: 1 when |x − x′| ≥ ε, else |x − x′|/ε.
pub fn l_eps<T: Real>(x: T, xp: T, eps: T) -> Result<T> {
    if eps <= T::zero() {
        return Err(Error::domain("clipping width eps must be positive"));
    }
    let gap = (x - xp).abs();
    Ok(if gap >= eps { T::one() } else { gap / eps })
}

/// Coefficients linearizing one generator difference.
#[derive(Debug, Clone)]
pub struct LinearizationOutput<T: Real> {
    pub a: T,
    pub b: DVector<T>,
    pub c: DMatrix<T>,
    /// Packed upper triangle of the symmetric array of d-vectors.
    d: Vec<DVector<T>>,
    pub m: T,
    pub n: DMatrix<T>,
    pub eps: T,
    dim: usize,
}

impl<T: Real> LinearizationOutput<T> {
    /// dⁱʲ slope vector, zero-based symmetric indices.
    pub fn d_coef(&self, i: usize, j: usize) -> &DVector<T> {
        &self.d[upper_index(self.dim, i, j)]
    }
}

/// Intermediate point with the first k coordinates replaced by z′.
fn theta_point<T: Real>(z: &DVector<T>, zp: &DVector<T>, k: usize) -> DVector<T> {
    DVector::from_fn(z.len(), |i, _| if i < k { zp[i] } else { z[i] })
}

/// Linearizes f and every gⁱʲ between (y, z) and (y′, z′).
///
/// The residuals are defined so the reconstruction identities hold exactly:
/// f(t,y,z) − f(t,y′,z′) = a(y−y′) + b·(z−z′) + m, and likewise per gⁱʲ.
#[allow(clippy::too_many_arguments)]
pub fn linearize_pair<T: Real>(
    gen: &GeneratorSpec<T>,
    theta: &VolatilitySet<T>,
    t: T,
    y: T,
    yp: T,
    z: &DVector<T>,
    zp: &DVector<T>,
    eps: T,
) -> Result<LinearizationOutput<T>> {
    let d = gen.dim;
    if z.len() != d || zp.len() != d || theta.dim() != d {
        return Err(Error::input("dimension mismatch in linearization inputs"));
    }
    if eps <= T::zero() {
        return Err(Error::domain("clipping width eps must be positive"));
    }
    // Fallback slope where the y-quotient is clipped.
    let kappa = match gen.mu {
        Some(mu) => {
            let g_neg = eval_g(&(-all_ones::<T>(d)), theta)?;
            mu / (T::one() - T::of(2.0) * g_neg)
        }
        None => T::zero(),
    };

    let ly = l_eps(y, yp, eps)?;
    let dy = y - yp;
    let quot_y = |hy: T, hyp: T| -> T {
        if ly == T::zero() {
            T::zero()
        } else {
            ly * (hy - hyp) / dy
        }
    };

    let a = quot_y(gen.eval_f(t, y, z)?, gen.eval_f(t, yp, z)?) - kappa * (T::one() - ly);

    let mut b = DVector::zeros(d);
    for k in 0..d {
        let lz = l_eps(z[k], zp[k], eps)?;
        let slope = if lz == T::zero() {
            T::zero()
        } else {
            let prev = theta_point(z, zp, k);
            let next = theta_point(z, zp, k + 1);
            lz * (gen.eval_f(t, yp, &prev)? - gen.eval_f(t, yp, &next)?) / (z[k] - zp[k])
        };
        b[k] = slope + gen.lz * (T::one() - lz);
    }

    let mut c = DMatrix::zeros(d, d);
    let mut n = DMatrix::zeros(d, d);
    let mut dvecs = vec![DVector::zeros(d); d * (d + 1) / 2];
    for i in 0..d {
        for j in i..d {
            let cij =
                quot_y(gen.eval_g(i, j, t, y, z)?, gen.eval_g(i, j, t, yp, z)?)
                    - kappa * (T::one() - ly);
            c[(i, j)] = cij;
            c[(j, i)] = cij;
            let mut dij = DVector::zeros(d);
            for k in 0..d {
                let lz = l_eps(z[k], zp[k], eps)?;
                let slope = if lz == T::zero() {
                    T::zero()
                } else {
                    let prev = theta_point(z, zp, k);
                    let next = theta_point(z, zp, k + 1);
                    lz * (gen.eval_g(i, j, t, yp, &prev)? - gen.eval_g(i, j, t, yp, &next)?)
                        / (z[k] - zp[k])
                };
                dij[k] = slope + gen.lz * (T::one() - lz);
            }
            let diff = gen.eval_g(i, j, t, y, z)? - gen.eval_g(i, j, t, yp, zp)?;
            let nij = diff - cij * dy - dij.dot(&(z - zp));
            n[(i, j)] = nij;
            n[(j, i)] = nij;
            dvecs[upper_index(d, i, j)] = dij;
        }
    }

    let f_diff = gen.eval_f(t, y, z)? - gen.eval_f(t, yp, zp)?;
    let m = f_diff - a * dy - b.dot(&(z - zp));

    Ok(LinearizationOutput { a, b, c, d: dvecs, m, n, eps, dim: d })
}

/// Sampled verification of the linearization bounds:
/// |a|, |cⁱʲ| ≤ L_y; |bᵏ|, |dⁱʲᵏ| ≤ 2dL_z(1+|z|+|z′|);
/// |m|, |nⁱʲ| ≤ 2L_yε + 4dL_zε(1+|z|+|z′|); and, when μ is declared,
/// a + 2G((cⁱʲ)) ≤ −μ. Reconstruction is recomputed independently.
pub fn verify_linearization<T: Real>(
    gen: &GeneratorSpec<T>,
    theta: &VolatilitySet<T>,
    plan: &SamplePlan,
    eps: T,
) -> Result<Vec<CheckReport>> {
    let d = gen.dim;
    let mut rng = plan.rng();
    let mut checks: Vec<(&str, f64, Option<String>)> = vec![
        ("reconstruction", f64::INFINITY, None),
        ("slope-bound-y", f64::INFINITY, None),
        ("slope-bound-z", f64::INFINITY, None),
        ("residual-bound", f64::INFINITY, None),
        ("dissipativity-linearized", f64::INFINITY, None),
    ];
    let has_mu = gen.mu.is_some();

    for _ in 0..plan.samples {
        let t = T::of(rng.gen_range(0.0..1.0));
        let y = T::of(rng.gen_range(-plan.scale..plan.scale));
        // Mix wide and near-diagonal pairs so both clipping regimes appear.
        let near: bool = rng.gen_bool(0.5);
        let yp = if near {
            y + T::of(rng.gen_range(-1.0..1.0)) * eps
        } else {
            T::of(rng.gen_range(-plan.scale..plan.scale))
        };
        let z = DVector::from_fn(d, |_, _| T::of(rng.gen_range(-plan.scale..plan.scale)));
        let zp = if near {
            &z + DVector::from_fn(d, |_, _| T::of(rng.gen_range(-1.0..1.0)) * eps)
        } else {
            DVector::from_fn(d, |_, _| T::of(rng.gen_range(-plan.scale..plan.scale)))
        };

        let out = linearize_pair(gen, theta, t, y, yp, &z, &zp, eps)?;
        let scale_z = T::one() + z.norm() + zp.norm();

        // Reconstruction, recomputed from raw generator evaluations.
        let f_diff = gen.eval_f(t, y, &z)? - gen.eval_f(t, yp, &zp)?;
        let recon = out.a * (y - yp) + out.b.dot(&(&z - &zp)) + out.m;
        let rel = (f_diff - recon).abs().as_f64()
            / f_diff.abs().as_f64().max(1.0);
        let margin = 1e-10 - rel;
        if margin < checks[0].1 {
            checks[0].1 = margin;
            if margin < 0.0 {
                checks[0].2 = Some(format!(
                    "reconstruction off by {rel:.3e} relative at y={:.4}, y'={:.4}",
                    y.as_f64(),
                    yp.as_f64()
                ));
            }
        }
        for i in 0..d {
            for j in i..d {
                let g_diff = gen.eval_g(i, j, t, y, &z)? - gen.eval_g(i, j, t, yp, &zp)?;
                let recon_g =
                    out.c[(i, j)] * (y - yp) + out.d_coef(i, j).dot(&(&z - &zp)) + out.n[(i, j)];
                let rel = (g_diff - recon_g).abs().as_f64() / g_diff.abs().as_f64().max(1.0);
                if 1e-10 - rel < checks[0].1 {
                    checks[0].1 = 1e-10 - rel;
                }
            }
        }

        // |a|, |c| <= Ly.
        let mut amax = out.a.abs();
        for i in 0..d {
            for j in i..d {
                amax = amax.max(out.c[(i, j)].abs());
            }
        }
        let margin = (gen.ly - amax).as_f64();
        if margin < checks[1].1 {
            checks[1].1 = margin;
            if margin < -CHECK_TOL {
                checks[1].2 = Some(format!(
                    "y-slope {:.6e} exceeds Ly {:.6e}",
                    amax.as_f64(),
                    gen.ly.as_f64()
                ));
            }
        }

        // |b|, |d| <= 2 d Lz (1 + |z| + |z'|), per coordinate.
        let z_bound = T::of(2.0 * d as f64) * gen.lz * scale_z;
        let mut bmax = T::zero();
        for k in 0..d {
            bmax = bmax.max(out.b[k].abs());
        }
        for i in 0..d {
            for j in i..d {
                for k in 0..d {
                    bmax = bmax.max(out.d_coef(i, j)[k].abs());
                }
            }
        }
        let margin = (z_bound - bmax).as_f64();
        if margin < checks[2].1 {
            checks[2].1 = margin;
            if margin < -CHECK_TOL {
                checks[2].2 = Some(format!(
                    "z-slope {:.6e} exceeds bound {:.6e}",
                    bmax.as_f64(),
                    z_bound.as_f64()
                ));
            }
        }

        // |m|, |n| <= 2 Ly eps + 4 d Lz eps (1 + |z| + |z'|).
        let res_bound =
            T::of(2.0) * gen.ly * eps + T::of(4.0 * d as f64) * gen.lz * eps * scale_z;
        let mut rmax = out.m.abs();
        for i in 0..d {
            for j in i..d {
                rmax = rmax.max(out.n[(i, j)].abs());
            }
        }
        let margin = (res_bound - rmax).as_f64();
        if margin < checks[3].1 {
            checks[3].1 = margin;
            if margin < -CHECK_TOL {
                checks[3].2 = Some(format!(
                    "residual {:.6e} exceeds bound {:.6e} (eps = {:.1e})",
                    rmax.as_f64(),
                    res_bound.as_f64(),
                    eps.as_f64()
                ));
            }
        }

        if has_mu {
            let mu = gen.mu.expect("checked");
            let lhs = out.a + T::of(2.0) * eval_g(&out.c, theta)?;
            let margin = (-mu - lhs).as_f64();
            if margin < checks[4].1 {
                checks[4].1 = margin;
                if margin < -CHECK_TOL {
                    checks[4].2 = Some(format!(
                        "a + 2G(c) = {:.6e} above -mu = {:.6e}",
                        lhs.as_f64(),
                        (-mu).as_f64()
                    ));
                }
            }
        }
    }

    let mut reports = Vec::new();
    for (idx, (name, worst, witness)) in checks.into_iter().enumerate() {
        if idx == 4 && !has_mu {
            continue;
        }
        reports.push(CheckReport {
            name: name.into(),
            pass: witness.is_none(),
            worst_margin: worst,
            witness,
        });
    }
    Ok(reports)
}

/// Largest sampled |m^ε| over a fixed seeded sample set; used to exhibit the
/// linear ε-scaling of the residual.
pub fn max_residual<T: Real>(
    gen: &GeneratorSpec<T>,
    theta: &VolatilitySet<T>,
    plan: &SamplePlan,
    eps: T,
) -> Result<T> {
    let d = gen.dim;
    let mut rng = plan.rng();
    let mut worst = T::zero();
    for _ in 0..plan.samples {
        let t = T::of(rng.gen_range(0.0..1.0));
        let y = T::of(rng.gen_range(-plan.scale..plan.scale));
        let z = DVector::from_fn(d, |_, _| T::of(rng.gen_range(-plan.scale..plan.scale)));
        // Differences spread over magnitudes so some fall inside every
        // clipping window.
        let mag = T::of(10f64.powf(rng.gen_range(-5.0..0.0)));
        let yp = y + mag * T::of(rng.gen_range(-1.0..1.0));
        let zp = &z + DVector::from_fn(d, |_, _| mag * T::of(rng.gen_range(-1.0..1.0)));
        let out = linearize_pair(gen, theta, t, y, yp, &z, &zp, eps)?;
        let mut r = out.m.abs();
        for i in 0..d {
            for j in i..d {
                r = r.max(out.n[(i, j)].abs());
            }
        }
        worst = worst.max(r);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::Expr;
    use approx::assert_relative_eq;

    fn theta1() -> VolatilitySet<f64> {
        VolatilitySet::scalar(&[0.5, 1.0], 0.5).unwrap()
    }

    #[test]
    fn clipping_factor() {
        assert_relative_eq!(l_eps(1.0, 1.0, 0.5).unwrap(), 0.0);
        assert_relative_eq!(l_eps(2.0, 0.0, 1.0).unwrap(), 1.0);
        assert_relative_eq!(l_eps(0.5, 0.0, 1.0).unwrap(), 0.5);
        assert!(l_eps(1.0, 0.0, 0.0).is_err());
        assert!(l_eps(1.0, 0.0, -1.0).is_err());
    }

    #[test]
    fn linear_generator_slopes() {
        let gen = crate::gcore::GeneratorSpec::without_g(
            1,
            Expr::parse("-y").unwrap(),
            0.0,
            2.0,
            1.0,
            Some(1.0),
        );
        let z = DVector::from_element(1, 0.3);
        let zp = DVector::from_element(1, -0.4);
        let out = linearize_pair(&gen, &theta1(), 0.0, 2.0, 0.0, &z, &zp, 0.5).unwrap();
        assert_relative_eq!(out.a, -1.0);
        assert_relative_eq!(out.b[0], 0.0);
        assert_relative_eq!(out.m, 0.0);
    }

    #[test]
    fn coincident_point_is_trivial() {
        let gen = crate::gcore::GeneratorSpec::without_g(
            1,
            Expr::parse("znorm2 - y").unwrap(),
            0.0,
            1.0,
            1.0,
            None,
        );
        let z = DVector::from_element(1, 1.5);
        let out = linearize_pair(&gen, &theta1(), 0.0, 0.7, 0.7, &z, &z, 0.5).unwrap();
        assert_relative_eq!(out.m, 0.0);
        // With mu absent the clipped y-slope falls back to zero.
        assert_relative_eq!(out.a, 0.0);
    }

    #[test]
    fn quadratic_difference_quotient() {
        let gen = crate::gcore::GeneratorSpec::without_g(
            1,
            Expr::parse("znorm2").unwrap(),
            0.0,
            1.0,
            1.0,
            None,
        );
        let z = DVector::from_element(1, 3.0);
        let zp = DVector::from_element(1, 1.0);
        let out = linearize_pair(&gen, &theta1(), 0.0, 1.0, 1.0, &z, &zp, 0.5).unwrap();
        assert_relative_eq!(out.b[0], 4.0);
        assert_relative_eq!(out.m, 0.0);
    }

    #[test]
    fn y_slope_is_convex_mix_for_linear_decay() {
        // f = -y with mu = 1: the slope interpolates between -1 and
        // -mu/(1 - 2G(-J)).
        let theta = theta1();
        let gen = crate::gcore::GeneratorSpec::without_g(
            1,
            Expr::parse("-y").unwrap(),
            0.0,
            2.0,
            1.0,
            Some(1.0),
        );
        let g_neg = eval_g(&(-all_ones::<f64>(1)), &theta).unwrap();
        let kappa = 1.0 / (1.0 - 2.0 * g_neg);
        let z = DVector::zeros(1);
        for dy in [0.0, 0.1, 0.3, 0.6, 1.0, 2.0] {
            let out = linearize_pair(&gen, &theta, 0.0, dy, 0.0, &z, &z, 1.0).unwrap();
            let lo = (-1.0f64).min(-kappa) - 1e-12;
            let hi = (-1.0f64).max(-kappa) + 1e-12;
            assert!(out.a >= lo && out.a <= hi, "a = {} outside [{lo}, {hi}]", out.a);
        }
    }

    #[test]
    fn telescoping_matches_direct_difference_2d() {
        // When every z-coordinate clears the clipping window, the chain of
        // intermediate points telescopes to the direct difference exactly.
        let gen = crate::gcore::GeneratorSpec::without_g(
            2,
            Expr::parse("z1*z2 + sin(z1)").unwrap(),
            0.0,
            1.0,
            2.0,
            None,
        );
        let theta = VolatilitySet::new(
            2,
            vec![nalgebra::DMatrix::identity(2, 2)],
            1.0,
        )
        .unwrap();
        let z = DVector::from_vec(vec![2.0, -1.0]);
        let zp = DVector::from_vec(vec![-0.5, 1.5]);
        let out = linearize_pair(&gen, &theta, 0.0, 0.3, 0.3, &z, &zp, 0.25).unwrap();
        let direct = gen.eval_f(0.0, 0.3, &z).unwrap() - gen.eval_f(0.0, 0.3, &zp).unwrap();
        let telescoped = out.b.dot(&(&z - &zp));
        assert_relative_eq!(direct, telescoped, epsilon = 1e-12);
        assert_relative_eq!(out.m, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn verification_suite_passes_for_standard_generators() {
        let theta = theta1();
        let plan = SamplePlan { samples: 2000, seed: 3, scale: 2.0 };
        let cases = [
            ("-y", 2.0, 1.0, Some(1.0)),
            ("-y + sin(z1)", 2.0, 1.0, Some(1.0)),
            ("znorm2 - 2*y", 4.0, 1.0, Some(2.0)),
        ];
        for (src, ly, lz, mu) in cases {
            let gen = crate::gcore::GeneratorSpec::without_g(
                1,
                Expr::parse(src).unwrap(),
                1.0,
                ly,
                lz,
                mu,
            );
            let reports = verify_linearization(&gen, &theta, &plan, 0.1).unwrap();
            for r in &reports {
                assert!(r.pass, "{src}: {:?}", r);
            }
        }
    }

    #[test]
    fn misdeclared_ly_fails_slope_bound() {
        let theta = theta1();
        let plan = SamplePlan { samples: 500, seed: 1, scale: 2.0 };
        let gen = crate::gcore::GeneratorSpec::without_g(
            1,
            Expr::parse("-5*y").unwrap(),
            0.0,
            1.0,
            1.0,
            None,
        );
        let reports = verify_linearization(&gen, &theta, &plan, 0.1).unwrap();
        let slope = reports.iter().find(|r| r.name == "slope-bound-y").unwrap();
        assert!(!slope.pass);
        assert!(slope.witness.is_some());
    }

    #[test]
    fn residual_scales_linearly_in_eps() {
        let theta = theta1();
        let plan = SamplePlan { samples: 4000, seed: 9, scale: 2.0 };
        let gen = crate::gcore::GeneratorSpec::without_g(
            1,
            Expr::parse("-y + sin(z1)").unwrap(),
            1.0,
            2.0,
            1.0,
            Some(1.0),
        );
        let m1 = max_residual(&gen, &theta, &plan, 1e-1).unwrap();
        let m2 = max_residual(&gen, &theta, &plan, 1e-2).unwrap();
        let m3 = max_residual(&gen, &theta, &plan, 1e-3).unwrap();
        for (big, small) in [(m1, m2), (m2, m3)] {
            let ratio = big / small;
            assert!(
                (5.0..=20.0).contains(&ratio),
                "residual ratio {ratio} not within factor 2 of linear (values {m1:.3e}, {m2:.3e}, {m3:.3e})"
            );
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let gen = crate::gcore::GeneratorSpec::without_g(
            1,
            Expr::parse("-y").unwrap(),
            0.0,
            1.0,
            1.0,
            None,
        );
        let z = DVector::zeros(1);
        assert!(linearize_pair(&gen, &theta1(), 0.0, 1.0, 0.0, &z, &z, 0.0).is_err());
        let z2 = DVector::zeros(2);
        assert!(linearize_pair(&gen, &theta1(), 0.0, 1.0, 0.0, &z2, &z2, 0.5).is_err());
    }
}
