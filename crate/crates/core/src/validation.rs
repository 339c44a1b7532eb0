//! Parameter recovery by cross-validation, posterior predictive checks and
//! micro-distribution comparison.

use crate::error::{bail, Result};
use crate::exec::{derive_seed, rng_from, tags, Execution};
use crate::histogram::Histogram;
use crate::model::ParameterVector;
use crate::prior::{Prior, Scenario};
use crate::simulate::{compute_asfr, extract_micro_distributions, simulate_cohort_with, MicroDistributions, N_AGES};
use crate::snpe::{run_snpe_with, CohortSimulator, PosteriorArtifact, Simulator, SnpeConfig};

/// Empirical quantile of sorted data, linear between order statistics.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of empty data");
    let h = (sorted.len() - 1) as f64 * q.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Root-mean-squared error per parameter, in units of the prior sd.
pub fn normalized_rmse(estimates: &[Vec<f64>], truths: &[Vec<f64>], prior: &Prior) -> Result<Vec<f64>> {
    if estimates.is_empty() || estimates.len() != truths.len() {
        bail!(Contract, "need equally many estimates and truths, at least one");
    }
    let sds = prior.sds();
    let n = estimates.len() as f64;
    let mut out = Vec::with_capacity(sds.len());
    for (i, sd) in sds.iter().enumerate() {
        let mut ss = 0.0;
        for (e, t) in estimates.iter().zip(truths) {
            if e.len() != sds.len() || t.len() != sds.len() {
                bail!(Contract, "estimate and truth must have {} entries", sds.len());
            }
            ss += (e[i] - t[i]) * (e[i] - t[i]);
        }
        out.push((ss / n).sqrt() / sd);
    }
    Ok(out)
}

/// What an inference routine sees for one fold.
#[derive(Debug, Clone, Copy)]
pub struct FoldInput<'a> {
    pub index: usize,
    pub seed: u64,
    pub x_o: &'a [f64],
    /// Exposed for stub estimators; real inference ignores it.
    pub theta_true: &'a [f64],
}

/// Produces a point estimate of the parameters from a fold's data.
pub trait Inference: Sync {
    fn estimate(&self, fold: &FoldInput) -> Result<Vec<f64>>;
}

/// Full sequential inference; the estimate is the posterior mean of the
/// stored draws.
pub struct SnpeInference<'a> {
    pub simulator: &'a dyn Simulator,
    pub prior: &'a Prior,
    pub config: SnpeConfig,
}

impl Inference for SnpeInference<'_> {
    fn estimate(&self, fold: &FoldInput) -> Result<Vec<f64>> {
        let mut config = self.config.clone();
        config.seed = fold.seed;
        let art = run_snpe_with(self.simulator, fold.x_o, self.prior, &config)?;
        Ok(posterior_mean(&art.draws))
    }
}

pub fn posterior_mean(draws: &[Vec<f64>]) -> Vec<f64> {
    let n = draws.len() as f64;
    let mut mean = vec![0.0; draws.first().map_or(0, Vec::len)];
    for d in draws {
        mean.iter_mut().zip(d).for_each(|(m, v)| *m += v / n);
    }
    mean
}

#[derive(Debug, Clone, PartialEq)]
pub struct CvFold {
    pub index: usize,
    pub seed: u64,
    /// Seed of the ground-truth simulation producing `x_o`.
    pub data_seed: u64,
    pub theta_true: Vec<f64>,
    pub x_o: Vec<f64>,
    pub theta_hat: Option<Vec<f64>>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CvReport {
    pub scenario: Option<Scenario>,
    pub names: Vec<String>,
    pub folds: Vec<CvFold>,
    /// Over successful folds; NaN when none succeeded.
    pub nrmse: Vec<f64>,
    pub n_failed: usize,
}

/// Draws a truth per fold from the prior, simulates its data, and scores
/// `inference` against the truth.
pub fn cross_validate_with(
    prior: &Prior,
    simulator: &dyn Simulator,
    inference: &dyn Inference,
    n_folds: usize,
    seed: u64,
    exec: Execution,
) -> Result<CvReport> {
    if n_folds == 0 {
        bail!(Config, "cross-validation needs at least one fold");
    }
    let folds = exec.map(n_folds, |i| {
        let fold_seed = derive_seed(seed, tags::FOLD, i as u64);
        let data_seed = derive_seed(fold_seed, tags::SIMULATION, 0);
        let theta_true = prior.sample(1, &mut rng_from(fold_seed)).remove(0);
        let mut fold = CvFold {
            index: i,
            seed: fold_seed,
            data_seed,
            theta_true,
            x_o: Vec::new(),
            theta_hat: None,
            error: None,
        };
        let result = simulator.simulate(&fold.theta_true, data_seed).and_then(|x| {
            fold.x_o = x;
            inference.estimate(&FoldInput {
                index: i,
                seed: derive_seed(fold_seed, tags::TRAINING, 0),
                x_o: &fold.x_o,
                theta_true: &fold.theta_true,
            })
        });
        match result {
            Ok(t) => fold.theta_hat = Some(t),
            Err(e) => fold.error = Some(format!("error[{}]: {e}", e.class())),
        }
        fold
    });
    let (est, tru): (Vec<Vec<f64>>, Vec<Vec<f64>>) = folds
        .iter()
        .filter_map(|f| f.theta_hat.clone().map(|h| (h, f.theta_true.clone())))
        .unzip();
    let n_failed = n_folds - est.len();
    let nrmse = if est.is_empty() {
        vec![f64::NAN; prior.dim()]
    } else {
        normalized_rmse(&est, &tru, prior)?
    };
    Ok(CvReport {
        scenario: None,
        names: prior.names.clone(),
        folds,
        nrmse,
        n_failed,
    })
}

/// Cross-validation of the full pipeline on the cohort model.
pub fn cross_validate(prior: &Prior, n_folds: usize, config: &SnpeConfig) -> Result<CvReport> {
    config.validate()?;
    let sim = CohortSimulator::new(config.n_women, config.scenario.layout());
    let inference = SnpeInference {
        simulator: &sim,
        prior,
        config: config.clone(),
    };
    let mut report = cross_validate_with(prior, &sim, &inference, n_folds, config.seed, config.exec)?;
    report.scenario = Some(config.scenario);
    Ok(report)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PpcReport {
    pub observed: Vec<f64>,
    pub mean: Vec<f64>,
    pub lo95: Vec<f64>,
    pub hi95: Vec<f64>,
    /// Share of ages whose observed rate lies inside [lo95, hi95].
    pub coverage: f64,
    pub n_draws: usize,
}

/// Bands of ASFR simulated at each of `draws`, compared with `observed`.
pub fn ppc_from_draws(
    draws: &[Vec<f64>],
    observed: &[f64],
    n_women: usize,
    seed: u64,
    exec: Execution,
) -> Result<PpcReport> {
    if observed.len() != N_AGES {
        bail!(Contract, "observed ASFR must have {N_AGES} ages, got {}", observed.len());
    }
    if draws.is_empty() {
        bail!(Contract, "posterior predictive check needs at least one draw");
    }
    let sims = exec.try_map(draws.len(), |j| {
        let theta = ParameterVector::from_slice(&draws[j])?;
        let cohort = simulate_cohort_with(&theta, n_women, derive_seed(seed, tags::PPC, j as u64), Execution::Sequential)?;
        Ok::<_, crate::Error>(compute_asfr(&cohort))
    })?;
    let n = sims.len() as f64;
    let mut report = PpcReport {
        observed: observed.to_vec(),
        mean: Vec::with_capacity(N_AGES),
        lo95: Vec::with_capacity(N_AGES),
        hi95: Vec::with_capacity(N_AGES),
        coverage: 0.0,
        n_draws: draws.len(),
    };
    let mut inside = 0;
    for a in 0..N_AGES {
        let mut col: Vec<f64> = sims.iter().map(|s| s[a]).collect();
        let mean = col.iter().sum::<f64>() / n;
        col.sort_by(f64::total_cmp);
        // at ages with rare births a few draws can pull the mean past the
        // upper quantile; the band is stretched to keep it inside
        let lo = quantile_sorted(&col, 0.025).min(mean);
        let hi = quantile_sorted(&col, 0.975).max(mean);
        report.mean.push(mean);
        if lo <= observed[a] && observed[a] <= hi {
            inside += 1;
        }
        report.lo95.push(lo);
        report.hi95.push(hi);
    }
    report.coverage = inside as f64 / N_AGES as f64;
    Ok(report)
}

/// PPC with `n_draws` fresh posterior draws from `artifact`.
pub fn posterior_predictive_check(
    artifact: &PosteriorArtifact,
    observed: &[f64],
    n_draws: usize,
    n_women: usize,
    seed: u64,
) -> Result<PpcReport> {
    let draws = artifact.sample(n_draws, derive_seed(seed, tags::POSTERIOR, 1))?;
    ppc_from_draws(&draws, observed, n_women, seed, artifact.config.exec)
}

/// Jensen-Shannon divergence in bits between histograms on the same grid.
pub fn js_divergence(p: &Histogram, q: &Histogram) -> Result<f64> {
    if p.edges != q.edges {
        bail!(Contract, "histograms must share a bin grid; rebin first");
    }
    let total_p: f64 = p.masses.iter().sum();
    let total_q: f64 = q.masses.iter().sum();
    if total_p <= 0.0 || total_q <= 0.0 {
        bail!(Contract, "cannot compare an empty histogram");
    }
    let mut js = 0.0;
    for (a, b) in p.masses.iter().zip(&q.masses) {
        let (a, b) = (a / total_p, b / total_q);
        let m = 0.5 * (a + b);
        if a > 0.0 {
            js += 0.5 * a * (a / m).log2();
        }
        if b > 0.0 {
            js += 0.5 * b * (b / m).log2();
        }
    }
    Ok(js.clamp(0.0, 1.0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MicroOutcome {
    pub name: &'static str,
    pub js_bits: f64,
    pub observed: Histogram,
    /// Simulated distribution rebinned onto the observed grid.
    pub simulated: Histogram,
    /// Simulated mass falling outside the observed grid.
    pub dropped_mass: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MicroValidationReport {
    pub outcomes: Vec<MicroOutcome>,
}

impl MicroValidationReport {
    pub fn max_js(&self) -> f64 {
        self.outcomes.iter().map(|o| o.js_bits).fold(0.0, f64::max)
    }
}

/// Compares two sets of micro distributions on the observed grids.
pub fn compare_micro(simulated: &MicroDistributions, observed: &MicroDistributions) -> Result<MicroValidationReport> {
    let pairs = [
        ("age_first_sex", &simulated.age_first_sex, &observed.age_first_sex),
        ("desired_family_size", &simulated.desired_family_size, &observed.desired_family_size),
        ("birth_interval", &simulated.birth_intervals, &observed.birth_intervals),
    ];
    let mut outcomes = Vec::with_capacity(3);
    for (name, sim, obs) in pairs {
        let (rebinned, dropped) = sim.rebin_onto(&obs.edges)?;
        outcomes.push(MicroOutcome {
            name,
            js_bits: js_divergence(&rebinned, obs).map_err(|e| e.context(name))?,
            observed: obs.clone(),
            simulated: rebinned,
            dropped_mass: dropped,
        });
    }
    Ok(MicroValidationReport { outcomes })
}

/// Simulates a cohort at `theta_hat` and compares its micro distributions
/// with `observed`.
pub fn validate_micro(
    theta_hat: &ParameterVector,
    observed: &MicroDistributions,
    n_women: usize,
    seed: u64,
    exec: Execution,
) -> Result<MicroValidationReport> {
    let cohort = simulate_cohort_with(theta_hat, n_women, derive_seed(seed, tags::MICRO, 0), exec)?;
    compare_micro(&extract_micro_distributions(&cohort), observed)
}
