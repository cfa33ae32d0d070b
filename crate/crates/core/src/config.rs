//! TOML experiment schema (`schema = 1`).
//!
//! A config names a volatility set, optionally one or two generators, an
//! optional linear coefficient block and the run settings. Matrices are
//! row-major lists; expressions use the variables documented per section
//! (generators: t, y, z1..zd, znorm, znorm2; coefficient rules and terminal
//! data: t, b1..bd). Missing required sections are parse errors so the caller
//! can distinguish them from semantic misconfiguration.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use serde::Deserialize;

use crate::error::{Error, Result};
use crate::expr::Expr;
use crate::extspace::LinearCoefficients;
use crate::gcore::{GeneratorSpec, VolatilitySet};
use crate::lattice::DEFAULT_NODE_BUDGET;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    schema: u32,
    volatility: Option<RawVolatility>,
    generator: Option<RawGenerator>,
    /// Second generator of a comparison pair.
    generator2: Option<RawGenerator>,
    linear: Option<RawLinear>,
    run: Option<RawRun>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawVolatility {
    dim: usize,
    /// One row-major d·d list per extreme point.
    extremes: Vec<Vec<f64>>,
    sigma_lower: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGenerator {
    f: String,
    /// Keys "ij" with 1-based i ≤ j; absent entries are zero.
    g: Option<BTreeMap<String, String>>,
    #[serde(rename = "M0")]
    m0: f64,
    #[serde(rename = "Ly")]
    ly: f64,
    #[serde(rename = "Lz")]
    lz: f64,
    mu: Option<f64>,
}

#[derive(Debug, Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RawLinear {
    a: Option<String>,
    /// Length-d list of rules for the z coefficient.
    b: Option<Vec<String>>,
    m: Option<String>,
    /// Keys "ij" with 1-based i ≤ j.
    c: Option<BTreeMap<String, String>>,
    /// Keys "ij", each a length-d list.
    d: Option<BTreeMap<String, Vec<String>>>,
    n: Option<BTreeMap<String, String>>,
}

#[derive(Debug, Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RawRun {
    steps: Option<usize>,
    t_end: Option<f64>,
    tol: Option<f64>,
    node_budget: Option<usize>,
    seed: Option<u64>,
    samples: Option<usize>,
    eps: Option<f64>,
    /// Terminal payoff expression in t, b1..bd.
    xi: Option<String>,
    /// Terminal payoff of the second member of a comparison pair.
    xi2: Option<String>,
}

/// Resolved run settings with schema defaults applied.
#[derive(Debug, Clone)]
pub struct RunSettings {
    pub steps: usize,
    pub t_end: f64,
    pub tol: f64,
    pub node_budget: usize,
    pub seed: u64,
    pub samples: usize,
    pub eps: f64,
    pub xi: Expr,
    pub xi2: Option<Expr>,
}

impl Default for RunSettings {
    fn default() -> Self {
        RunSettings {
            steps: 16,
            t_end: 1.0,
            tol: 1e-2,
            node_budget: DEFAULT_NODE_BUDGET,
            seed: 0,
            samples: 1000,
            eps: 1e-2,
            xi: Expr::Const(0.0),
            xi2: None,
        }
    }
}

/// Fully resolved experiment description.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub theta: VolatilitySet<f64>,
    pub generator: Option<GeneratorSpec<f64>>,
    pub generator2: Option<GeneratorSpec<f64>>,
    pub linear: Option<LinearCoefficients>,
    pub run: RunSettings,
}

impl ExperimentConfig {
    /// Parses and validates a schema-1 document.
    pub fn from_toml(text: &str) -> Result<Self> {
        let raw: RawConfig = toml::from_str(text)
            .map_err(|e| Error::parse(format!("config: {e}")))?;
        if raw.schema != 1 {
            return Err(Error::parse(format!(
                "config: unsupported schema version {} (expected 1)",
                raw.schema
            )));
        }
        let vol = raw
            .volatility
            .ok_or_else(|| Error::parse("config: missing required section [volatility]"))?;
        let theta = resolve_volatility(&vol)?;
        let d = theta.dim();
        let generator = raw.generator.map(|g| resolve_generator(&g, d)).transpose()?;
        let generator2 = raw.generator2.map(|g| resolve_generator(&g, d)).transpose()?;
        let linear = raw.linear.map(|l| resolve_linear(&l, d)).transpose()?;
        let run = resolve_run(raw.run.unwrap_or_default(), d)?;
        Ok(ExperimentConfig { theta, generator, generator2, linear, run })
    }

    /// The generator section, required by the calling command.
    pub fn require_generator(&self) -> Result<&GeneratorSpec<f64>> {
        self.generator
            .as_ref()
            .ok_or_else(|| Error::parse("config: missing required section [generator]"))
    }

    /// The linear coefficient section, required by the calling command.
    pub fn require_linear(&self) -> Result<&LinearCoefficients> {
        self.linear
            .as_ref()
            .ok_or_else(|| Error::parse("config: missing required section [linear]"))
    }
}

fn resolve_volatility(raw: &RawVolatility) -> Result<VolatilitySet<f64>> {
    let d = raw.dim;
    if d == 0 {
        return Err(Error::config("[volatility] dim must be positive"));
    }
    if raw.sigma_lower <= 0.0 {
        return Err(Error::config("[volatility] sigma_lower must be positive"));
    }
    let mut extremes = Vec::with_capacity(raw.extremes.len());
    for (idx, flat) in raw.extremes.iter().enumerate() {
        if flat.len() != d * d {
            return Err(Error::config(format!(
                "[volatility] extreme {idx} has {} entries, expected {} for dim {d}",
                flat.len(),
                d * d
            )));
        }
        extremes.push(DMatrix::from_row_slice(d, d, flat));
    }
    VolatilitySet::new(d, extremes, raw.sigma_lower)
}

fn parse_expr(section: &str, key: &str, text: &str) -> Result<Expr> {
    Expr::parse(text)
        .map_err(|e| Error::parse(format!("config: [{section}] {key}: {e}")))
}

fn parse_pair_key(section: &str, key: &str, d: usize) -> Result<(usize, usize)> {
    let digits: Vec<u32> = key.chars().filter_map(|c| c.to_digit(10)).collect();
    if digits.len() != 2 || key.len() != 2 {
        return Err(Error::config(format!(
            "[{section}] key '{key}' must be two digits 'ij' with 1-based i <= j"
        )));
    }
    let (i, j) = (digits[0] as usize, digits[1] as usize);
    if i < 1 || j < i || j > d {
        return Err(Error::config(format!(
            "[{section}] key '{key}' out of range for dim {d} (need 1 <= i <= j <= {d})"
        )));
    }
    Ok((i - 1, j - 1))
}

fn resolve_generator(raw: &RawGenerator, d: usize) -> Result<GeneratorSpec<f64>> {
    for (name, v) in [("M0", raw.m0), ("Ly", raw.ly), ("Lz", raw.lz)] {
        if v < 0.0 {
            return Err(Error::config(format!("[generator] {name} must be nonnegative")));
        }
    }
    if let Some(mu) = raw.mu {
        if mu <= 0.0 {
            return Err(Error::config("[generator] mu must be positive when present"));
        }
    }
    let f = parse_expr("generator", "f", &raw.f)?;
    let mut g = vec![Expr::Const(0.0); d * (d + 1) / 2];
    if let Some(map) = &raw.g {
        for (key, text) in map {
            let (i, j) = parse_pair_key("generator.g", key, d)?;
            g[i * d - i * (i + 1) / 2 + j] = parse_expr("generator", &format!("g{key}"), text)?;
        }
    }
    GeneratorSpec::new(d, f, g, raw.m0, raw.ly, raw.lz, raw.mu)
}

fn resolve_linear(raw: &RawLinear, d: usize) -> Result<LinearCoefficients> {
    let mut coeffs = LinearCoefficients::zero(d);
    if let Some(a) = &raw.a {
        coeffs = coeffs.with_a(parse_expr("linear", "a", a)?);
    }
    if let Some(b) = &raw.b {
        if b.len() != d {
            return Err(Error::config(format!(
                "[linear] b has {} entries, expected {d}",
                b.len()
            )));
        }
        for (k, text) in b.iter().enumerate() {
            coeffs = coeffs.with_b(k, parse_expr("linear", &format!("b[{k}]"), text)?);
        }
    }
    if let Some(m) = &raw.m {
        coeffs = coeffs.with_m(parse_expr("linear", "m", m)?);
    }
    if let Some(map) = &raw.c {
        for (key, text) in map {
            let (i, j) = parse_pair_key("linear.c", key, d)?;
            coeffs = coeffs.with_c(i, j, parse_expr("linear", &format!("c{key}"), text)?);
        }
    }
    if let Some(map) = &raw.d {
        for (key, texts) in map {
            let (i, j) = parse_pair_key("linear.d", key, d)?;
            if texts.len() != d {
                return Err(Error::config(format!(
                    "[linear] d{key} has {} entries, expected {d}",
                    texts.len()
                )));
            }
            for (k, text) in texts.iter().enumerate() {
                coeffs =
                    coeffs.with_d(i, j, k, parse_expr("linear", &format!("d{key}[{k}]"), text)?);
            }
        }
    }
    if let Some(map) = &raw.n {
        for (key, text) in map {
            let (i, j) = parse_pair_key("linear.n", key, d)?;
            coeffs = coeffs.with_n(i, j, parse_expr("linear", &format!("n{key}"), text)?);
        }
    }
    Ok(coeffs)
}

fn resolve_run(raw: RawRun, d: usize) -> Result<RunSettings> {
    let defaults = RunSettings::default();
    let settings = RunSettings {
        steps: raw.steps.unwrap_or(defaults.steps),
        t_end: raw.t_end.unwrap_or(defaults.t_end),
        tol: raw.tol.unwrap_or(defaults.tol),
        node_budget: raw.node_budget.unwrap_or(defaults.node_budget),
        seed: raw.seed.unwrap_or(defaults.seed),
        samples: raw.samples.unwrap_or(defaults.samples),
        eps: raw.eps.unwrap_or(defaults.eps),
        xi: raw
            .xi
            .as_deref()
            .map(|t| parse_expr("run", "xi", t))
            .transpose()?
            .unwrap_or(defaults.xi),
        xi2: raw
            .xi2
            .as_deref()
            .map(|t| parse_expr("run", "xi2", t))
            .transpose()?,
    };
    if settings.steps == 0 {
        return Err(Error::config("[run] steps must be positive"));
    }
    if settings.t_end <= 0.0 {
        return Err(Error::config("[run] t_end must be positive"));
    }
    if settings.tol <= 0.0 {
        return Err(Error::config("[run] tol must be positive"));
    }
    if settings.eps <= 0.0 {
        return Err(Error::config("[run] eps must be positive"));
    }
    for (name, expr) in std::iter::once(("xi", &settings.xi))
        .chain(settings.xi2.iter().map(|e| ("xi2", e)))
    {
        for var in expr.variables() {
            let ok = var == "t"
                || var
                    .strip_prefix('b')
                    .and_then(|s| s.parse::<usize>().ok())
                    .map(|i| (1..=d).contains(&i))
                    .unwrap_or(false);
            if !ok {
                return Err(Error::config(format!(
                    "[run] {name} references unknown variable '{var}' (allowed: t, b1..b{d})"
                )));
            }
        }
    }
    Ok(settings)
}
