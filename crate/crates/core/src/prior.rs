//! Independent-marginal priors over the parameter vector, per inference
//! scenario, with quantile fitting and a round-trippable text manifest.

use std::fmt;
use std::path::Path;

use rand::Rng;
use rand_distr::{Beta, Distribution, Gamma, Normal};
use statrs::distribution::{ContinuousCDF, Normal as StatNormal};
use statrs::function::beta::ln_beta;
use statrs::function::gamma::{gamma_lr, ln_gamma};

use crate::error::{bail, Error, Result};
use crate::histogram::Histogram;
use crate::model::{fecundability, N_PARAMS, PARAM_NAMES};
use crate::simulate::SummaryLayout;

#[derive(Debug, Clone, PartialEq)]
pub enum MarginalPrior {
    Gamma { shape: f64, rate: f64 },
    Uniform { lo: f64, hi: f64 },
    Beta { a: f64, b: f64 },
    Normal { mean: f64, sd: f64 },
    /// Piecewise-constant density on histogram bins.
    Empirical { edges: Vec<f64>, masses: Vec<f64> },
}

impl MarginalPrior {
    pub fn validate(&self) -> Result<()> {
        let ok = match self {
            MarginalPrior::Gamma { shape, rate } => *shape > 0.0 && *rate > 0.0,
            MarginalPrior::Uniform { lo, hi } => lo < hi && lo.is_finite() && hi.is_finite(),
            MarginalPrior::Beta { a, b } => *a > 0.0 && *b > 0.0,
            MarginalPrior::Normal { mean, sd } => mean.is_finite() && *sd > 0.0,
            MarginalPrior::Empirical { edges, masses } => {
                edges.len() == masses.len() + 1
                    && edges.iter().all(|e| e.is_finite())
                    && edges.windows(2).all(|w| w[0] < w[1])
                    && masses.iter().all(|m| *m >= 0.0)
                    && (masses.iter().sum::<f64>() - 1.0).abs() < 1e-9
            }
        };
        if !ok {
            bail!(Config, "invalid prior marginal {self}");
        }
        Ok(())
    }

    /// Builds an empirical marginal from a histogram, renormalizing masses.
    pub fn from_histogram(h: &Histogram) -> Result<Self> {
        let total: f64 = h.masses.iter().sum();
        if !(total > 0.0) || h.edges.iter().any(|e| !e.is_finite()) {
            bail!(Format, "histogram cannot be used as a prior: needs finite edges and positive mass");
        }
        let m = MarginalPrior::Empirical {
            edges: h.edges.clone(),
            masses: h.masses.iter().map(|m| m / total).collect(),
        };
        m.validate()?;
        Ok(m)
    }

    pub fn ln_pdf(&self, x: f64) -> f64 {
        if !x.is_finite() {
            return f64::NEG_INFINITY;
        }
        match self {
            MarginalPrior::Gamma { shape, rate } => {
                if x <= 0.0 {
                    return f64::NEG_INFINITY;
                }
                shape * rate.ln() - ln_gamma(*shape) + (shape - 1.0) * x.ln() - rate * x
            }
            MarginalPrior::Uniform { lo, hi } => {
                if x < *lo || x > *hi {
                    f64::NEG_INFINITY
                } else {
                    -(hi - lo).ln()
                }
            }
            MarginalPrior::Beta { a, b } => {
                if x <= 0.0 || x >= 1.0 {
                    return f64::NEG_INFINITY;
                }
                (a - 1.0) * x.ln() + (b - 1.0) * (1.0 - x).ln() - ln_beta(*a, *b)
            }
            MarginalPrior::Normal { mean, sd } => {
                let z = (x - mean) / sd;
                -0.5 * z * z - sd.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
            }
            MarginalPrior::Empirical { edges, masses } => {
                match edges.windows(2).position(|e| x >= e[0] && x < e[1]) {
                    Some(k) if masses[k] > 0.0 => (masses[k] / (edges[k + 1] - edges[k])).ln(),
                    _ => f64::NEG_INFINITY,
                }
            }
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self {
            MarginalPrior::Gamma { shape, rate } => {
                let d = Gamma::new(*shape, 1.0 / rate).expect("validated gamma");
                loop {
                    let v = d.sample(rng);
                    if v > 0.0 {
                        return v;
                    }
                }
            }
            MarginalPrior::Uniform { lo, hi } => rng.random_range(*lo..*hi),
            MarginalPrior::Beta { a, b } => {
                let d = Beta::new(*a, *b).expect("validated beta");
                loop {
                    let v = d.sample(rng);
                    if v > 0.0 && v < 1.0 {
                        return v;
                    }
                }
            }
            MarginalPrior::Normal { mean, sd } => {
                Normal::new(*mean, *sd).expect("validated normal").sample(rng)
            }
            MarginalPrior::Empirical { edges, masses } => {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let mut k = masses.len() - 1;
                for (i, m) in masses.iter().enumerate() {
                    acc += m;
                    if u < acc && *m > 0.0 {
                        k = i;
                        break;
                    }
                }
                while masses[k] == 0.0 && k > 0 {
                    k -= 1;
                }
                let (lo, hi) = (edges[k], edges[k + 1]);
                let v = lo + rng.random::<f64>() * (hi - lo);
                if v < hi {
                    v
                } else {
                    lo
                }
            }
        }
    }

    pub fn mean(&self) -> f64 {
        match self {
            MarginalPrior::Gamma { shape, rate } => shape / rate,
            MarginalPrior::Uniform { lo, hi } => 0.5 * (lo + hi),
            MarginalPrior::Beta { a, b } => a / (a + b),
            MarginalPrior::Normal { mean, .. } => *mean,
            MarginalPrior::Empirical { edges, masses } => edges
                .windows(2)
                .zip(masses)
                .map(|(e, m)| m * 0.5 * (e[0] + e[1]))
                .sum(),
        }
    }

    pub fn sd(&self) -> f64 {
        match self {
            MarginalPrior::Gamma { shape, rate } => shape.sqrt() / rate,
            MarginalPrior::Uniform { lo, hi } => (hi - lo) / 12f64.sqrt(),
            MarginalPrior::Beta { a, b } => {
                let s = a + b;
                (a * b / (s * s * (s + 1.0))).sqrt()
            }
            MarginalPrior::Normal { sd, .. } => *sd,
            MarginalPrior::Empirical { edges, masses } => {
                let mean = self.mean();
                let second: f64 = edges
                    .windows(2)
                    .zip(masses)
                    .map(|(e, m)| m * (e[0] * e[0] + e[0] * e[1] + e[1] * e[1]) / 3.0)
                    .sum();
                (second - mean * mean).max(0.0).sqrt()
            }
        }
    }

    /// Closed support interval `(lo, hi)`; endpoints may carry zero density.
    pub fn support(&self) -> (f64, f64) {
        match self {
            MarginalPrior::Gamma { .. } => (0.0, f64::INFINITY),
            MarginalPrior::Uniform { lo, hi } => (*lo, *hi),
            MarginalPrior::Beta { .. } => (0.0, 1.0),
            MarginalPrior::Normal { .. } => (f64::NEG_INFINITY, f64::INFINITY),
            MarginalPrior::Empirical { edges, .. } => (edges[0], *edges.last().unwrap()),
        }
    }

    fn family(&self) -> &'static str {
        match self {
            MarginalPrior::Gamma { .. } => "gamma",
            MarginalPrior::Uniform { .. } => "uniform",
            MarginalPrior::Beta { .. } => "beta",
            MarginalPrior::Normal { .. } => "normal",
            MarginalPrior::Empirical { .. } => "empirical",
        }
    }

    /// Parses the `family key=value ...` form written by `Display`.
    pub fn parse(s: &str) -> Result<Self> {
        let mut parts = s.split_whitespace();
        let family = parts.next().unwrap_or("");
        let mut kv = std::collections::HashMap::new();
        for p in parts {
            let (k, v) = p
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("malformed prior field '{p}'")))?;
            kv.insert(k, v);
        }
        let num = |k: &str| -> Result<f64> {
            kv.get(k)
                .ok_or_else(|| Error::Format(format!("prior '{s}' is missing '{k}'")))?
                .parse::<f64>()
                .map_err(|e| Error::Format(format!("prior '{s}' field '{k}': {e}")))
        };
        let list = |k: &str| -> Result<Vec<f64>> {
            kv.get(k)
                .ok_or_else(|| Error::Format(format!("prior '{s}' is missing '{k}'")))?
                .split(';')
                .map(|v| {
                    v.parse::<f64>()
                        .map_err(|e| Error::Format(format!("prior '{s}' field '{k}': {e}")))
                })
                .collect()
        };
        let m = match family {
            "gamma" => MarginalPrior::Gamma {
                shape: num("shape")?,
                rate: num("rate")?,
            },
            "uniform" => MarginalPrior::Uniform {
                lo: num("lo")?,
                hi: num("hi")?,
            },
            "beta" => MarginalPrior::Beta {
                a: num("a")?,
                b: num("b")?,
            },
            "normal" => MarginalPrior::Normal {
                mean: num("mean")?,
                sd: num("sd")?,
            },
            "empirical" => MarginalPrior::Empirical {
                edges: list("edges")?,
                masses: list("masses")?,
            },
            other => bail!(Format, "unknown prior family '{other}'"),
        };
        m.validate()?;
        Ok(m)
    }
}

impl fmt::Display for MarginalPrior {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let join = |v: &[f64]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(";");
        write!(f, "{}", self.family())?;
        match self {
            MarginalPrior::Gamma { shape, rate } => write!(f, " shape={shape} rate={rate}"),
            MarginalPrior::Uniform { lo, hi } => write!(f, " lo={lo} hi={hi}"),
            MarginalPrior::Beta { a, b } => write!(f, " a={a} b={b}"),
            MarginalPrior::Normal { mean, sd } => write!(f, " mean={mean} sd={sd}"),
            MarginalPrior::Empirical { edges, masses } => {
                write!(f, " edges={} masses={}", join(edges), join(masses))
            }
        }
    }
}

/// Product of independent marginals, one per named parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Prior {
    pub names: Vec<String>,
    pub marginals: Vec<MarginalPrior>,
}

impl Prior {
    pub fn new(names: Vec<String>, marginals: Vec<MarginalPrior>) -> Result<Self> {
        if names.len() != marginals.len() || names.is_empty() {
            bail!(Contract, "prior needs one marginal per parameter name");
        }
        for m in &marginals {
            m.validate()?;
        }
        Ok(Prior { names, marginals })
    }

    pub fn dim(&self) -> usize {
        self.marginals.len()
    }

    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| self.marginals.iter().map(|m| m.sample(rng)).collect())
            .collect()
    }

    pub fn marginal_log_densities(&self, theta: &[f64]) -> Vec<f64> {
        self.marginals
            .iter()
            .zip(theta)
            .map(|(m, &x)| m.ln_pdf(x))
            .collect()
    }

    /// Joint log density; `-inf` outside the support.
    pub fn log_density(&self, theta: &[f64]) -> f64 {
        if theta.len() != self.dim() {
            return f64::NEG_INFINITY;
        }
        let mut total = 0.0;
        for (m, &x) in self.marginals.iter().zip(theta) {
            total += m.ln_pdf(x);
            if total == f64::NEG_INFINITY {
                break;
            }
        }
        total
    }

    pub fn in_support(&self, theta: &[f64]) -> bool {
        self.log_density(theta).is_finite()
    }

    pub fn means(&self) -> Vec<f64> {
        self.marginals.iter().map(MarginalPrior::mean).collect()
    }

    pub fn sds(&self) -> Vec<f64> {
        self.marginals.iter().map(MarginalPrior::sd).collect()
    }

    pub fn to_manifest(&self) -> String {
        let mut s = String::from("# prior marginals: name = family hyperparameters\n");
        for (n, m) in self.names.iter().zip(&self.marginals) {
            s.push_str(&format!("{n} = {m}\n"));
        }
        s
    }

    pub fn from_manifest(text: &str) -> Result<Self> {
        let mut names = Vec::new();
        let mut marginals = Vec::new();
        for line in text.lines().map(str::trim) {
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("malformed manifest line '{line}'")))?;
            names.push(k.trim().to_string());
            marginals.push(MarginalPrior::parse(v.trim())?);
        }
        Prior::new(names, marginals)
    }
}

/// Inference scenario: how informative the prior is and which rates are
/// observed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scenario {
    /// ASFR with weak priors.
    One,
    /// ASFR with informative priors on mu_d, delta_r and mu_b.
    Two,
    /// ASFR and ASUFR with weak priors.
    Three,
}

impl Scenario {
    pub fn from_number(n: u32) -> Result<Self> {
        match n {
            1 => Ok(Scenario::One),
            2 => Ok(Scenario::Two),
            3 => Ok(Scenario::Three),
            _ => bail!(Config, "scenario must be 1, 2 or 3, got {n}"),
        }
    }

    pub fn number(self) -> u32 {
        match self {
            Scenario::One => 1,
            Scenario::Two => 2,
            Scenario::Three => 3,
        }
    }

    pub fn layout(self) -> SummaryLayout {
        match self {
            Scenario::Three => SummaryLayout::AsfrAsufr,
            _ => SummaryLayout::Asfr,
        }
    }
}

/// Targets and overrides for prior construction.
#[derive(Debug, Clone)]
pub struct PriorConfig {
    /// Central 95% interval of the mean age at sexual initiation, years.
    pub mu_s_interval: (f64, f64),
    /// Central 95% interval of the mean desired family size.
    pub mu_d_interval: (f64, f64),
    pub delta_r_range: (f64, f64),
    pub mu_b_range: (f64, f64),
    pub kappa_beta: (f64, f64),
    /// Prior means of sigma_s, sigma_r, sigma_d, sigma_b.
    pub dispersion_means: [f64; 4],
    /// Coefficient of variation of the dispersion priors.
    pub dispersion_cv: f64,
    pub beta_range: (f64, f64),
    /// Informative sources for scenario 2.
    pub mu_d_histogram: Option<Histogram>,
    pub delta_r_histogram: Option<Histogram>,
    pub mu_b_histogram: Option<Histogram>,
}

impl Default for PriorConfig {
    fn default() -> Self {
        PriorConfig {
            mu_s_interval: (14.4, 28.9),
            mu_d_interval: (1.9, 8.1),
            delta_r_range: (0.0, 8.0),
            mu_b_range: (10.0, 100.0),
            kappa_beta: (2.0, 8.0),
            dispersion_means: [3.0, 3.0, 1.5, 12.0],
            dispersion_cv: 0.5,
            beta_range: (0.0, 0.9),
            mu_d_histogram: None,
            delta_r_histogram: None,
            mu_b_histogram: None,
        }
    }
}

impl PriorConfig {
    /// Loads the scenario-2 sources from `bin_lo,bin_hi,mass` files.
    pub fn with_histogram_files(
        mut self,
        mu_d: Option<&Path>,
        delta_r: Option<&Path>,
        mu_b: Option<&Path>,
    ) -> Result<Self> {
        let load = |p: Option<&Path>| p.map(crate::io::read_histogram).transpose();
        self.mu_d_histogram = load(mu_d)?;
        self.delta_r_histogram = load(delta_r)?;
        self.mu_b_histogram = load(mu_b)?;
        Ok(self)
    }
}

fn gamma_with_mean_cv(mean: f64, cv: f64) -> MarginalPrior {
    let shape = 1.0 / (cv * cv);
    MarginalPrior::Gamma {
        shape,
        rate: shape / mean,
    }
}

pub fn build_prior(scenario: Scenario, config: &PriorConfig) -> Result<Prior> {
    let (mu_s_shape, mu_s_rate) = fit_gamma_to_quantiles(config.mu_s_interval.0, config.mu_s_interval.1)?;
    let (mu_d_shape, mu_d_rate) = fit_gamma_to_quantiles(config.mu_d_interval.0, config.mu_d_interval.1)?;
    let [ss, sr, sd, sb] = config.dispersion_means;
    let cv = config.dispersion_cv;
    let mut marginals = vec![
        MarginalPrior::Gamma {
            shape: mu_s_shape,
            rate: mu_s_rate,
        },
        gamma_with_mean_cv(ss, cv),
        MarginalPrior::Uniform {
            lo: config.delta_r_range.0,
            hi: config.delta_r_range.1,
        },
        gamma_with_mean_cv(sr, cv),
        MarginalPrior::Gamma {
            shape: mu_d_shape,
            rate: mu_d_rate,
        },
        gamma_with_mean_cv(sd, cv),
        MarginalPrior::Uniform {
            lo: config.mu_b_range.0,
            hi: config.mu_b_range.1,
        },
        gamma_with_mean_cv(sb, cv),
        MarginalPrior::Beta {
            a: config.kappa_beta.0,
            b: config.kappa_beta.1,
        },
        MarginalPrior::Uniform {
            lo: config.beta_range.0,
            hi: config.beta_range.1,
        },
        MarginalPrior::Uniform {
            lo: config.beta_range.0,
            hi: config.beta_range.1,
        },
    ];
    if scenario == Scenario::Two {
        let sources = [
            (4, "mu_d", &config.mu_d_histogram),
            (2, "delta_r", &config.delta_r_histogram),
            (6, "mu_b", &config.mu_b_histogram),
        ];
        for (idx, name, hist) in sources {
            let h = hist.as_ref().ok_or_else(|| {
                Error::Config(format!("scenario 2 requires an informative histogram for {name}"))
            })?;
            marginals[idx] = MarginalPrior::from_histogram(h)?;
        }
        let (lo, _) = marginals[4].support();
        if lo < 0.0 || marginals[2].support().0 < 0.0 || marginals[6].support().0 < 0.0 {
            bail!(Config, "informative histograms must lie on non-negative values");
        }
    }
    Prior::new(PARAM_NAMES.iter().map(|s| s.to_string()).collect(), marginals)
}

/// Quantile of the unit-rate gamma distribution.
pub fn gamma_quantile(shape: f64, p: f64) -> Result<f64> {
    if !(shape > 0.0) || !(0.0..1.0).contains(&p) || p == 0.0 {
        bail!(Domain, "gamma quantile needs shape > 0 and p in (0,1)");
    }
    let z = StatNormal::standard().inverse_cdf(p);
    let c = 1.0 / (9.0 * shape);
    let wh = shape * (1.0 - c + z * c.sqrt()).powi(3);
    let mut x = if wh > 0.0 { wh } else { shape.max(1e-3) };
    let (mut lo, mut hi) = (0.0, f64::INFINITY);
    let ln_norm = ln_gamma(shape);
    for _ in 0..300 {
        let f = gamma_lr(shape, x) - p;
        if f > 0.0 {
            hi = x;
        } else {
            lo = x;
        }
        let density = ((shape - 1.0) * x.ln() - x - ln_norm).exp();
        let mut next = x - f / density;
        if !(next > lo && next < hi) || !next.is_finite() {
            next = if hi.is_finite() { 0.5 * (lo + hi) } else { 2.0 * x.max(lo) + 1.0 };
        }
        if (next - x).abs() <= 1e-15 * x {
            return Ok(next);
        }
        x = next;
    }
    bail!(Numeric, "gamma quantile did not converge (shape {shape}, p {p})")
}

/// Gamma `(shape, rate)` whose 2.5% and 97.5% quantiles are `q025`, `q975`.
///
/// The quantile ratio depends on the shape alone and is decreasing in it, so
/// the shape is found by bisection on its logarithm and the rate follows.
pub fn fit_gamma_to_quantiles(q025: f64, q975: f64) -> Result<(f64, f64)> {
    if !(q025 > 0.0 && q975 > q025 && q975.is_finite()) {
        bail!(Domain, "quantile targets must satisfy 0 < q025 < q975, got ({q025}, {q975})");
    }
    let target = (q975 / q025).ln();
    let log_ratio = |ln_shape: f64| -> Result<f64> {
        let a = ln_shape.exp();
        Ok((gamma_quantile(a, 0.975)? / gamma_quantile(a, 0.025)?).ln())
    };
    let (mut lo, mut hi) = (-4.0f64, 16.0f64);
    if log_ratio(lo)? < target || log_ratio(hi)? > target {
        bail!(Numeric, "quantile ratio {} outside the fittable range", q975 / q025);
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if log_ratio(mid)? > target {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-15 {
            break;
        }
    }
    let shape = (0.5 * (lo + hi)).exp();
    let rate = gamma_quantile(shape, 0.025)? / q025;
    Ok((shape, rate))
}

/// Central-95% envelope of prior-implied fecundability at `age`, from
/// `n` prior draws.
pub fn fecundability_envelope<R: Rng + ?Sized>(
    prior: &Prior,
    age: f64,
    n: usize,
    rng: &mut R,
) -> Result<(f64, f64)> {
    if prior.dim() != N_PARAMS {
        bail!(Contract, "fecundability envelope needs the full parameter prior");
    }
    let mut phi: Vec<f64> = prior
        .sample(n, rng)
        .iter()
        .map(|t| fecundability(age, t[9], t[10]))
        .collect::<Result<_>>()?;
    phi.sort_by(f64::total_cmp);
    Ok((
        crate::validation::quantile_sorted(&phi, 0.025),
        crate::validation::quantile_sorted(&phi, 0.975),
    ))
}
