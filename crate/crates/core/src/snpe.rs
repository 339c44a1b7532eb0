//! Multi-round sequential posterior estimation: propose, simulate, append,
//! retrain, and move the proposal to the current posterior at `x_o`.

use std::path::Path;

use crate::apt::{sample_posterior, train, Dataset, Objective, TrainingOptions};
use crate::error::{bail, Error, Result};
use crate::exec::{derive_seed, rng_from, tags, Execution};
use crate::histogram::Histogram;
use crate::io::{self, Manifest};
use crate::mdn::{Architecture, Estimator, MixtureDensityNetwork, Standardizer};
use crate::model::ParameterVector;
use crate::prior::{Prior, Scenario};
use crate::simulate::{simulate_cohort_with, summarize, SummaryLayout, SummaryVector};
use crate::validation::quantile_sorted;

/// A stochastic map from parameters to a summary vector.
pub trait Simulator: Sync {
    fn summary_len(&self) -> usize;
    fn simulate(&self, theta: &[f64], seed: u64) -> Result<Vec<f64>>;
}

/// The cohort model reduced to rates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CohortSimulator {
    pub n_women: usize,
    pub layout: SummaryLayout,
    /// Parallelism inside one cohort. Batches of simulations are already
    /// spread over workers, so this is usually sequential.
    pub exec: Execution,
}

impl CohortSimulator {
    pub fn new(n_women: usize, layout: SummaryLayout) -> Self {
        CohortSimulator {
            n_women,
            layout,
            exec: Execution::Sequential,
        }
    }
}

impl Simulator for CohortSimulator {
    fn summary_len(&self) -> usize {
        self.layout.len()
    }

    fn simulate(&self, theta: &[f64], seed: u64) -> Result<Vec<f64>> {
        let theta = ParameterVector::from_slice(theta)?;
        let cohort = simulate_cohort_with(&theta, self.n_women, seed, self.exec)?;
        Ok(summarize(&cohort, self.layout).to_vec())
    }
}

pub mod toy {
    //! Linear-Gaussian simulator with a closed-form posterior.

    use rand_distr::{Distribution, StandardNormal};

    use super::Simulator;
    use crate::error::{bail, Result};
    use crate::exec::rng_from;

    /// `x = A theta + noise_sd * eps` with two parameters and two outputs.
    #[derive(Debug, Clone, Copy, PartialEq)]
    pub struct LinearGaussian {
        pub a: [[f64; 2]; 2],
        pub noise_sd: f64,
    }

    impl LinearGaussian {
        /// Posterior mean and covariance under independent normal priors.
        pub fn posterior(&self, prior_mean: [f64; 2], prior_sd: [f64; 2], x: &[f64]) -> ([f64; 2], [[f64; 2]; 2]) {
            let a = self.a;
            let s2 = self.noise_sd * self.noise_sd;
            let mut prec = [[0.0; 2]; 2];
            for i in 0..2 {
                for j in 0..2 {
                    prec[i][j] = (a[0][i] * a[0][j] + a[1][i] * a[1][j]) / s2;
                }
                prec[i][i] += 1.0 / (prior_sd[i] * prior_sd[i]);
            }
            let det = prec[0][0] * prec[1][1] - prec[0][1] * prec[1][0];
            let cov = [
                [prec[1][1] / det, -prec[0][1] / det],
                [-prec[1][0] / det, prec[0][0] / det],
            ];
            let mut h = [0.0; 2];
            for i in 0..2 {
                h[i] = (a[0][i] * x[0] + a[1][i] * x[1]) / s2 + prior_mean[i] / (prior_sd[i] * prior_sd[i]);
            }
            let mean = [
                cov[0][0] * h[0] + cov[0][1] * h[1],
                cov[1][0] * h[0] + cov[1][1] * h[1],
            ];
            (mean, cov)
        }
    }

    impl Simulator for LinearGaussian {
        fn summary_len(&self) -> usize {
            2
        }

        fn simulate(&self, theta: &[f64], seed: u64) -> Result<Vec<f64>> {
            if theta.len() != 2 {
                bail!(Contract, "linear-Gaussian simulator takes two parameters");
            }
            let mut rng = rng_from(seed);
            Ok((0..2)
                .map(|i| {
                    let e: f64 = StandardNormal.sample(&mut rng);
                    self.a[i][0] * theta[0] + self.a[i][1] * theta[1] + self.noise_sd * e
                })
                .collect())
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SnpeConfig {
    pub rounds: usize,
    pub sims_per_round: usize,
    /// Women per simulated cohort.
    pub n_women: usize,
    pub scenario: Scenario,
    pub seed: u64,
    pub training: TrainingOptions,
    /// Objective for round 1, where every row comes from the prior. Later
    /// rounds use `training.objective`.
    pub first_round_objective: Objective,
    pub hidden: Vec<usize>,
    pub components: usize,
    /// Draws stored in the artifact.
    pub posterior_draws: usize,
    pub exec: Execution,
}

impl Default for SnpeConfig {
    fn default() -> Self {
        SnpeConfig {
            rounds: 5,
            sims_per_round: 2000,
            n_women: 2000,
            scenario: Scenario::One,
            seed: 0,
            training: TrainingOptions::default(),
            first_round_objective: Objective::Likelihood,
            hidden: vec![64, 64],
            components: 10,
            posterior_draws: 1000,
            exec: Execution::default(),
        }
    }
}

impl SnpeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            bail!(Config, "rounds must be at least 1");
        }
        if self.sims_per_round < self.training.batch_size {
            bail!(
                Config,
                "simulations per round ({}) must be at least the batch size ({})",
                self.sims_per_round,
                self.training.batch_size
            );
        }
        if self.n_women == 0 {
            bail!(Config, "cohort size must be at least 1");
        }
        if self.components == 0 || self.hidden.iter().any(|h| *h == 0) {
            bail!(Config, "network sizes must be positive");
        }
        self.training.validate()
    }

    pub fn architecture(&self, x_dim: usize, theta_dim: usize) -> Architecture {
        Architecture {
            x_dim,
            theta_dim,
            hidden: self.hidden.clone(),
            components: self.components,
        }
    }

    pub fn to_manifest(&self, m: &mut Manifest) {
        m.set("rounds", self.rounds);
        m.set("sims_per_round", self.sims_per_round);
        m.set("n_women", self.n_women);
        m.set("scenario", self.scenario.number());
        m.set("seed", self.seed);
        m.set("hidden", self.hidden.iter().map(|h| h.to_string()).collect::<Vec<_>>().join(","));
        m.set("components", self.components);
        m.set("posterior_draws", self.posterior_draws);
        let t = &self.training;
        m.set("batch_size", t.batch_size);
        m.set("atoms", t.atoms);
        m.set("learning_rate", t.learning_rate);
        m.set("validation_fraction", t.validation_fraction);
        m.set("patience", t.patience);
        m.set("max_epochs", t.max_epochs);
        m.set("clip_norm", t.clip_norm);
        m.set("adam_beta1", t.adam_beta1);
        m.set("adam_beta2", t.adam_beta2);
        m.set("objective", t.objective.name());
        m.set("first_round_objective", self.first_round_objective.name());
    }

    pub fn from_manifest(m: &Manifest) -> Result<Self> {
        let hidden = m
            .require("hidden")?
            .split(',')
            .filter(|s| !s.is_empty())
            .map(|s| s.trim().parse().map_err(|_| Error::Format(format!("bad hidden size `{s}`"))))
            .collect::<Result<Vec<usize>>>()?;
        Ok(SnpeConfig {
            rounds: m.parse_value("rounds")?,
            sims_per_round: m.parse_value("sims_per_round")?,
            n_women: m.parse_value("n_women")?,
            scenario: Scenario::from_number(m.parse_value("scenario")?)?,
            seed: m.parse_value("seed")?,
            hidden,
            components: m.parse_value("components")?,
            posterior_draws: m.parse_value("posterior_draws")?,
            training: TrainingOptions {
                batch_size: m.parse_value("batch_size")?,
                atoms: m.parse_value("atoms")?,
                learning_rate: m.parse_value("learning_rate")?,
                validation_fraction: m.parse_value("validation_fraction")?,
                patience: m.parse_value("patience")?,
                max_epochs: m.parse_value("max_epochs")?,
                clip_norm: m.parse_value("clip_norm")?,
                adam_beta1: m.parse_value("adam_beta1")?,
                adam_beta2: m.parse_value("adam_beta2")?,
                objective: Objective::from_name(m.require("objective")?)?,
                exec: Execution::default(),
            },
            first_round_objective: Objective::from_name(m.require("first_round_objective")?)?,
            exec: Execution::default(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundLog {
    pub round: usize,
    /// Cumulative training rows after this round.
    pub dataset_size: usize,
    /// Fraction of proposal draws rejected for leaving the prior support.
    pub proposal_leakage: f64,
    pub best_val_loss: f64,
    pub best_epoch: usize,
    pub epochs: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorArtifact {
    pub estimator: Estimator,
    pub x_o: Vec<f64>,
    pub prior: Prior,
    pub rounds: Vec<RoundLog>,
    pub draws: Vec<Vec<f64>>,
    /// Rejected fraction while drawing `draws`.
    pub leakage: f64,
    pub config: SnpeConfig,
}

const ESTIMATOR_FILE: &str = "estimator.txt";
const DRAWS_FILE: &str = "draws.csv";
const MANIFEST_FILE: &str = "manifest.txt";
const ROUNDS_FILE: &str = "rounds.csv";
const PRIOR_FILE: &str = "prior.manifest";

impl PosteriorArtifact {
    /// Fresh rejection-filtered draws at `x_o`.
    pub fn sample(&self, n: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
        let mut rng = rng_from(seed);
        Ok(sample_posterior(&self.estimator, &self.x_o, n, &self.prior, &mut rng)?.0)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        io::create_dir(dir)?;
        io::write_text(&dir.join(ESTIMATOR_FILE), &self.estimator.to_text())?;
        io::write_draws(&dir.join(DRAWS_FILE), &self.prior.names, &self.draws)?;
        io::write_text(&dir.join(PRIOR_FILE), &self.prior.to_manifest())?;
        let mut m = Manifest::new();
        m.set("format", "cohort-sbi-artifact 1");
        m.set("version", env!("CARGO_PKG_VERSION"));
        self.config.to_manifest(&mut m);
        m.set_floats("x_o", &self.x_o);
        m.set("leakage", self.leakage);
        m.write(&dir.join(MANIFEST_FILE))?;
        let header: Vec<String> = ["round", "dataset_size", "proposal_leakage", "best_val_loss", "best_epoch", "epochs"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let rows: Vec<Vec<f64>> = self
            .rounds
            .iter()
            .map(|r| {
                vec![
                    r.round as f64,
                    r.dataset_size as f64,
                    r.proposal_leakage,
                    r.best_val_loss,
                    r.best_epoch as f64,
                    r.epochs as f64,
                ]
            })
            .collect();
        io::write_table(&dir.join(ROUNDS_FILE), &header, &rows)?;
        for (i, name) in self.prior.names.iter().enumerate() {
            let col: Vec<f64> = self.draws.iter().map(|d| d[i]).collect();
            if let Ok(h) = Histogram::from_samples(&col, 30) {
                io::write_histogram(&dir.join(format!("posterior_{name}.csv")), &h)?;
            }
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let m = Manifest::read(&dir.join(MANIFEST_FILE))?;
        if m.require("format")? != "cohort-sbi-artifact 1" {
            bail!(Format, "{}: not an artifact directory", dir.display());
        }
        let estimator = Estimator::from_text(&io::read_text(&dir.join(ESTIMATOR_FILE))?)?;
        let prior = Prior::from_manifest(&io::read_text(&dir.join(PRIOR_FILE))?)?;
        let (names, draws) = io::read_table(&dir.join(DRAWS_FILE))?;
        if names != prior.names {
            bail!(Consistency, "draw columns do not match the prior parameters");
        }
        let (_, round_rows) = io::read_table(&dir.join(ROUNDS_FILE))?;
        let rounds = round_rows
            .iter()
            .map(|r| RoundLog {
                round: r[0] as usize,
                dataset_size: r[1] as usize,
                proposal_leakage: r[2],
                best_val_loss: r[3],
                best_epoch: r[4] as usize,
                epochs: r[5] as usize,
            })
            .collect();
        Ok(PosteriorArtifact {
            estimator,
            x_o: m.parse_floats("x_o")?,
            prior,
            rounds,
            draws,
            leakage: m.parse_value("leakage")?,
            config: SnpeConfig::from_manifest(&m)?,
        })
    }
}

fn simulate_batch(
    simulator: &dyn Simulator,
    thetas: &[Vec<f64>],
    seed: u64,
    exec: Execution,
) -> Result<Vec<Vec<f64>>> {
    exec.try_map(thetas.len(), |j| {
        let x = simulator
            .simulate(&thetas[j], derive_seed(seed, tags::SIMULATION, j as u64))
            .map_err(|e| e.context(format_args!("simulation at theta {:?}", thetas[j])))?;
        if x.len() != simulator.summary_len() || x.iter().any(|v| !v.is_finite()) {
            bail!(Numeric, "simulation at theta {:?} returned a malformed summary", thetas[j]);
        }
        Ok(x)
    })
}

/// Runs the sequential loop against any simulator.
pub fn run_snpe_with(
    simulator: &dyn Simulator,
    x_o: &[f64],
    prior: &Prior,
    config: &SnpeConfig,
) -> Result<PosteriorArtifact> {
    config.validate()?;
    if x_o.len() != simulator.summary_len() {
        bail!(
            Contract,
            "observed summary has {} dimensions, simulator produces {}",
            x_o.len(),
            simulator.summary_len()
        );
    }
    let mut training = config.training.clone();
    training.exec = config.exec;
    let mut data = Dataset::default();
    let mut estimator: Option<Estimator> = None;
    let mut rounds = Vec::with_capacity(config.rounds);
    for r in 1..=config.rounds {
        let round_seed = derive_seed(config.seed, tags::ROUND_PROPOSAL, r as u64);
        let mut rng = rng_from(round_seed);
        let (thetas, proposal_leakage) = match &estimator {
            None => (prior.sample(config.sims_per_round, &mut rng), 0.0),
            Some(est) => sample_posterior(est, x_o, config.sims_per_round, prior, &mut rng)
                .map_err(|e| e.context(format_args!("round {r} proposal")))?,
        };
        let xs = simulate_batch(
            simulator,
            &thetas,
            derive_seed(config.seed, tags::SIMULATION, r as u64),
            config.exec,
        )?;
        data.extend(Dataset { thetas, xs });
        let est = match estimator.as_mut() {
            Some(e) => e,
            None => {
                let net = MixtureDensityNetwork::new(
                    config.architecture(simulator.summary_len(), prior.dim()),
                    derive_seed(config.seed, tags::TRAINING, 0),
                );
                estimator.insert(Estimator::new(net, Standardizer::fit(&data.thetas, &data.xs)?)?)
            }
        };
        training.objective = if r == 1 { config.first_round_objective } else { config.training.objective };
        let report = train(est, &data, prior, &training, derive_seed(config.seed, tags::TRAINING, r as u64))
            .map_err(|e| e.context(format_args!("round {r} training")))?;
        rounds.push(RoundLog {
            round: r,
            dataset_size: data.len(),
            proposal_leakage,
            best_val_loss: report.best_val_loss,
            best_epoch: report.best_epoch,
            epochs: report.train_loss.len(),
        });
    }
    let estimator = estimator.expect("at least one round ran");
    let mut rng = rng_from(derive_seed(config.seed, tags::POSTERIOR, 0));
    let (draws, leakage) = sample_posterior(&estimator, x_o, config.posterior_draws, prior, &mut rng)?;
    Ok(PosteriorArtifact {
        estimator,
        x_o: x_o.to_vec(),
        prior: prior.clone(),
        rounds,
        draws,
        leakage,
        config: config.clone(),
    })
}

/// Runs the loop on the cohort model; the summary layout follows the
/// scenario.
pub fn run_snpe(x_o: &SummaryVector, prior: &Prior, config: &SnpeConfig) -> Result<PosteriorArtifact> {
    let layout = config.scenario.layout();
    if x_o.layout() != layout {
        bail!(
            Consistency,
            "scenario {} needs a {} summary ({} values), got {}",
            config.scenario.number(),
            layout.name(),
            layout.len(),
            x_o.layout().name()
        );
    }
    let sim = CohortSimulator::new(config.n_women, layout);
    run_snpe_with(&sim, &x_o.to_vec(), prior, config)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSummary {
    pub name: String,
    pub mean: f64,
    pub sd: f64,
    pub lo95: f64,
    pub hi95: f64,
}

/// Mean, sd and central 95% interval of each column of `draws`.
pub fn summarize_draws(names: &[String], draws: &[Vec<f64>]) -> Result<Vec<ParamSummary>> {
    if draws.is_empty() {
        bail!(Contract, "no draws to summarize");
    }
    let n = draws.len() as f64;
    Ok(names
        .iter()
        .enumerate()
        .map(|(i, name)| {
            let mut col: Vec<f64> = draws.iter().map(|d| d[i]).collect();
            let mean = col.iter().sum::<f64>() / n;
            let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0).max(1.0);
            col.sort_by(f64::total_cmp);
            ParamSummary {
                name: name.clone(),
                mean,
                sd: var.sqrt(),
                lo95: quantile_sorted(&col, 0.025),
                hi95: quantile_sorted(&col, 0.975),
            }
        })
        .collect())
}

pub fn posterior_summaries(artifact: &PosteriorArtifact, n_draws: usize, seed: u64) -> Result<Vec<ParamSummary>> {
    summarize_draws(&artifact.prior.names, &artifact.sample(n_draws, seed)?)
}

#[cfg(test)]
mod tests {
    use super::toy::LinearGaussian;
    use super::*;
    use crate::prior::MarginalPrior;

    fn toy() -> LinearGaussian {
        LinearGaussian {
            a: [[1.0, 0.5], [-0.3, 1.0]],
            noise_sd: 0.5,
        }
    }

    fn toy_prior() -> Prior {
        Prior::new(
            vec!["a".into(), "b".into()],
            vec![MarginalPrior::Normal { mean: 0.0, sd: 1.0 }; 2],
        )
        .unwrap()
    }

    fn small_config(rounds: usize) -> SnpeConfig {
        SnpeConfig {
            rounds,
            sims_per_round: 200,
            n_women: 1,
            seed: 11,
            hidden: vec![16],
            components: 2,
            posterior_draws: 200,
            training: TrainingOptions {
                batch_size: 50,
                max_epochs: 20,
                ..TrainingOptions::default()
            },
            ..SnpeConfig::default()
        }
    }

    #[test]
    fn conjugate_posterior_by_hand() {
        let sim = LinearGaussian {
            a: [[1.0, 0.0], [0.0, 1.0]],
            noise_sd: 1.0,
        };
        let (mean, cov) = sim.posterior([0.0, 0.0], [1.0, 1.0], &[2.0, -1.0]);
        assert!((mean[0] - 1.0).abs() < 1e-15 && (mean[1] + 0.5).abs() < 1e-15);
        assert!((cov[0][0] - 0.5).abs() < 1e-15 && cov[0][1] == 0.0);
    }

    #[test]
    fn dataset_grows_by_round_and_draws_in_support() {
        let art = run_snpe_with(&toy(), &[0.3, -0.2], &toy_prior(), &small_config(3)).unwrap();
        let sizes: Vec<usize> = art.rounds.iter().map(|r| r.dataset_size).collect();
        assert_eq!(sizes, vec![200, 400, 600]);
        assert_eq!(art.rounds[0].proposal_leakage, 0.0);
        assert_eq!(art.draws.len(), 200);
        assert!(art.draws.iter().all(|d| art.prior.in_support(d)));
    }

    #[test]
    fn single_round_is_plain_npe() {
        let art = run_snpe_with(&toy(), &[0.3, -0.2], &toy_prior(), &small_config(1)).unwrap();
        assert_eq!(art.rounds.len(), 1);
        assert_eq!(art.rounds[0].dataset_size, 200);
    }

    #[test]
    fn reproducible_and_thread_independent() {
        let mut cfg = small_config(2);
        let a = run_snpe_with(&toy(), &[0.3, -0.2], &toy_prior(), &cfg).unwrap();
        cfg.exec = Execution::Sequential;
        let b = run_snpe_with(&toy(), &[0.3, -0.2], &toy_prior(), &cfg).unwrap();
        assert_eq!(a.estimator, b.estimator);
        assert_eq!(a.draws, b.draws);
    }

    #[test]
    fn artifact_round_trips_through_directory() {
        let art = run_snpe_with(&toy(), &[0.3, -0.2], &toy_prior(), &small_config(1)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        art.save(dir.path()).unwrap();
        let back = PosteriorArtifact::load(dir.path()).unwrap();
        assert_eq!(back.estimator, art.estimator);
        assert_eq!(back.draws, art.draws);
        assert_eq!(back.rounds, art.rounds);
        assert_eq!(back.x_o, art.x_o);
        assert_eq!(back.leakage, art.leakage);
        let mut cfg = art.config.clone();
        cfg.training.exec = back.config.training.exec;
        assert_eq!(back.config, cfg);
    }

    #[test]
    fn wrong_layout_rejected() {
        let prior = crate::prior::build_prior(Scenario::Three, &Default::default()).unwrap();
        let x = SummaryVector {
            asfr: vec![0.0; 40],
            asufr: None,
        };
        let cfg = SnpeConfig {
            scenario: Scenario::Three,
            ..SnpeConfig::default()
        };
        assert_eq!(run_snpe(&x, &prior, &cfg).unwrap_err().class(), "consistency");
    }

    #[test]
    fn config_invariants() {
        let mut c = SnpeConfig::default();
        c.rounds = 0;
        assert_eq!(c.validate().unwrap_err().class(), "config");
        let mut c = SnpeConfig::default();
        c.sims_per_round = 100;
        assert!(c.validate().is_err());
        let mut m = Manifest::new();
        SnpeConfig::default().to_manifest(&mut m);
        assert_eq!(SnpeConfig::from_manifest(&m).unwrap(), SnpeConfig::default());
    }

    #[test]
    fn summaries_of_point_mass_and_ordering() {
        let names = vec!["a".to_string(), "b".to_string()];
        let draws: Vec<Vec<f64>> = (0..100).map(|i| vec![2.0, i as f64]).collect();
        let s = summarize_draws(&names, &draws).unwrap();
        assert_eq!(s[0].sd, 0.0);
        assert_eq!(s[0].hi95 - s[0].lo95, 0.0);
        assert!((s[1].mean - 49.5).abs() < 1e-12);
        assert!(s[1].lo95 <= s[1].mean && s[1].mean <= s[1].hi95);
    }

    #[test]
    fn simulator_domain_error_names_theta() {
        let sim = CohortSimulator::new(10, SummaryLayout::Asfr);
        let mut bad = vec![20.0, 3.0, 2.0, 3.0, 4.0, 1.0, 30.0, 10.0, 0.2, 0.3, 0.3];
        bad[8] = 1.5;
        let err = simulate_batch(&sim, &[bad], 1, Execution::Sequential).unwrap_err();
        assert_eq!(err.class(), "domain");
        assert!(err.to_string().contains("1.5"), "{err}");
    }
}
