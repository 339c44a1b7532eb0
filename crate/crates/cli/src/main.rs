//! Command-line front end: simulate cohorts, run inference, and validate.
//!
//! Every command writes `run.manifest` into its output directory; `rerun`
//! replays it with the recorded seed.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};

use clap::{Args, Parser, Subcommand};
use cohort_sbi::apt::TrainingOptions;
use cohort_sbi::io::{self, load_observed, Manifest, ObservedPaths};
use cohort_sbi::prior::{build_prior, Prior, PriorConfig, Scenario};
use cohort_sbi::simulate::{extract_micro_distributions, simulate_cohort, summarize, SummaryLayout};
use cohort_sbi::snpe::{run_snpe, summarize_draws, PosteriorArtifact, SnpeConfig};
use cohort_sbi::validation::{cross_validate, posterior_mean, posterior_predictive_check, validate_micro};
use cohort_sbi::{Error, Execution, ParameterVector, Result, PARAM_NAMES};

const SEED_ENV: &str = "COHORT_SBI_SEED";
const RUN_MANIFEST: &str = "run.manifest";

#[derive(Parser, Debug)]
#[command(name = "cohort-sbi", version, about = "Reproductive microsimulation and posterior inference")]
struct Cli {
    /// Worker threads; defaults to all cores. Output does not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate one cohort and write its histories, rates and micro histograms.
    Simulate(SimulateArgs),
    /// Estimate the posterior for an observed cohort.
    Infer(InferArgs),
    /// Parameter recovery over folds with known ground truth.
    CrossValidate(CrossValidateArgs),
    /// Posterior predictive check of an artifact against observed ASFR.
    Ppc(PpcArgs),
    /// Compare micro distributions simulated at the posterior mean with observed ones.
    ValidateMicro(ValidateMicroArgs),
    /// Write the prior manifest of a scenario.
    FitPriors(FitPriorsArgs),
    /// Repeat a run from its manifest.
    Rerun(RerunArgs),
}

#[derive(Args, Debug)]
struct SimulateArgs {
    /// Parameters as `name=value` pairs separated by commas, all eleven required.
    #[arg(long)]
    theta: String,
    #[arg(long, default_value_t = 2000)]
    n_women: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Clone)]
struct PriorArgs {
    #[arg(long, default_value_t = 1)]
    scenario: u32,
    /// Informative source for mu_d (scenario 2), `bin_lo,bin_hi,mass`.
    #[arg(long)]
    mu_d_hist: Option<PathBuf>,
    #[arg(long)]
    delta_r_hist: Option<PathBuf>,
    #[arg(long)]
    mu_b_hist: Option<PathBuf>,
}

impl PriorArgs {
    fn scenario(&self) -> Result<Scenario> {
        Scenario::from_number(self.scenario)
    }

    fn prior(&self) -> Result<Prior> {
        let config = PriorConfig::default().with_histogram_files(
            self.mu_d_hist.as_deref(),
            self.delta_r_hist.as_deref(),
            self.mu_b_hist.as_deref(),
        )?;
        build_prior(self.scenario()?, &config)
    }
}

#[derive(Args, Debug, Clone)]
struct SnpeArgs {
    #[arg(long, default_value_t = 5)]
    rounds: usize,
    /// Simulations per round.
    #[arg(long, default_value_t = 2000)]
    sims: usize,
    #[arg(long, default_value_t = 2000)]
    n_women: usize,
    #[arg(long, default_value_t = 1000)]
    posterior_draws: usize,
    #[arg(long, default_value_t = 500)]
    max_epochs: usize,
    #[arg(long, default_value_t = 256)]
    batch_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl SnpeArgs {
    fn config(&self, scenario: Scenario, seed: u64) -> SnpeConfig {
        SnpeConfig {
            rounds: self.rounds,
            sims_per_round: self.sims,
            n_women: self.n_women,
            scenario,
            seed,
            posterior_draws: self.posterior_draws,
            training: TrainingOptions {
                max_epochs: self.max_epochs,
                batch_size: self.batch_size,
                ..TrainingOptions::default()
            },
            ..SnpeConfig::default()
        }
    }
}

#[derive(Args, Debug)]
struct InferArgs {
    #[arg(long)]
    asfr: PathBuf,
    #[arg(long)]
    asufr: Option<PathBuf>,
    #[arg(long, default_value = "cohort")]
    label: String,
    #[command(flatten)]
    prior: PriorArgs,
    #[command(flatten)]
    snpe: SnpeArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct CrossValidateArgs {
    #[arg(long, default_value_t = 25)]
    folds: usize,
    #[command(flatten)]
    prior: PriorArgs,
    #[command(flatten)]
    snpe: SnpeArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct PpcArgs {
    #[arg(long)]
    artifact: PathBuf,
    #[arg(long)]
    asfr: PathBuf,
    #[arg(long, default_value_t = 5000)]
    draws: usize,
    #[arg(long, default_value_t = 2000)]
    n_women: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ValidateMicroArgs {
    #[arg(long)]
    artifact: PathBuf,
    #[arg(long)]
    age_first_sex: PathBuf,
    #[arg(long)]
    desired_family_size: PathBuf,
    #[arg(long)]
    birth_intervals: PathBuf,
    #[arg(long, default_value_t = 10_000)]
    n_women: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct FitPriorsArgs {
    #[command(flatten)]
    prior: PriorArgs,
    /// Output manifest path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct RerunArgs {
    /// A `run.manifest` written by an earlier command.
    manifest: PathBuf,
    /// Write to this directory instead of the recorded one.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Set while replaying a manifest, whose recorded seed wins over the
/// environment.
static REPLAY: AtomicBool = AtomicBool::new(false);

fn effective_seed(flag: u64) -> Result<u64> {
    if REPLAY.load(Ordering::Relaxed) {
        return Ok(flag);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("{SEED_ENV} must be an unsigned integer, got `{v}`"))),
        Err(_) => Ok(flag),
    }
}

/// Records the arguments with the seed that was actually used.
fn write_run_manifest(path: &Path, args: &[String], seed: Option<u64>) -> Result<()> {
    let mut m = Manifest::new();
    m.set("format", "cohort-sbi-run 1");
    m.set("version", env!("CARGO_PKG_VERSION"));
    let mut recorded = Vec::with_capacity(args.len());
    let mut i = 0;
    while i < args.len() {
        if args[i] == "--seed" || args[i] == "--threads" {
            i += 2;
            continue;
        }
        if args[i].starts_with("--seed=") || args[i].starts_with("--threads=") {
            i += 1;
            continue;
        }
        recorded.push(args[i].clone());
        i += 1;
    }
    if let Some(s) = seed {
        recorded.push("--seed".into());
        recorded.push(s.to_string());
        m.set("seed", s);
    }
    m.set("argc", recorded.len());
    for (k, a) in recorded.iter().enumerate() {
        m.set(&format!("arg.{k}"), a);
    }
    m.write(path)
}

fn parse_theta(spec: &str) -> Result<ParameterVector> {
    let mut values = [f64::NAN; PARAM_NAMES.len()];
    for pair in spec.split(',').filter(|s| !s.trim().is_empty()) {
        let Some((k, v)) = pair.split_once('=') else {
            return Err(Error::Config(format!("expected `name=value`, got `{pair}`")));
        };
        let k = k.trim();
        let idx = PARAM_NAMES
            .iter()
            .position(|n| *n == k)
            .ok_or_else(|| Error::Config(format!("unknown parameter `{k}`")))?;
        values[idx] = v
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("parameter `{k}` has bad value `{v}`")))?;
    }
    if let Some(i) = values.iter().position(|v| v.is_nan()) {
        return Err(Error::Config(format!("parameter `{}` is missing", PARAM_NAMES[i])));
    }
    ParameterVector::from_slice(&values)
}

fn simulate(a: &SimulateArgs, argv: &[String]) -> Result<String> {
    let seed = effective_seed(a.seed)?;
    let theta = parse_theta(&a.theta)?;
    let cohort = simulate_cohort(&theta, a.n_women, seed)?;
    io::create_dir(&a.out)?;
    io::write_births(&a.out.join("births.csv"), &cohort)?;
    io::write_traits(&a.out.join("traits.csv"), &cohort)?;
    let rates = summarize(&cohort, SummaryLayout::AsfrAsufr);
    io::write_rates(&a.out.join("asfr.csv"), &rates.asfr)?;
    io::write_rates(&a.out.join("asufr.csv"), rates.asufr.as_deref().unwrap_or_default())?;
    let micro = extract_micro_distributions(&cohort);
    io::write_histogram(&a.out.join("age_first_sex.csv"), &micro.age_first_sex)?;
    io::write_histogram(&a.out.join("desired_family_size.csv"), &micro.desired_family_size)?;
    io::write_histogram(&a.out.join("birth_intervals.csv"), &micro.birth_intervals)?;
    write_run_manifest(&a.out.join(RUN_MANIFEST), argv, Some(seed))?;
    Ok(format!(
        "simulated {} women, {} births, TFR {:.4}",
        cohort.n_women,
        cohort.births.len(),
        rates.asfr.iter().sum::<f64>()
    ))
}

fn infer(a: &InferArgs, argv: &[String]) -> Result<String> {
    let seed = effective_seed(a.snpe.seed)?;
    let scenario = a.prior.scenario()?;
    let observed = load_observed(&ObservedPaths {
        asfr: a.asfr.clone(),
        asufr: a.asufr.clone(),
        label: a.label.clone(),
        ..Default::default()
    })?;
    let x_o = observed.summary(scenario.layout())?;
    let prior = a.prior.prior()?;
    let config = a.snpe.config(scenario, seed);
    let artifact = run_snpe(&x_o, &prior, &config)?;
    artifact.save(&a.out)?;
    write_run_manifest(&a.out.join(RUN_MANIFEST), argv, Some(seed))?;
    let mut text = format!(
        "cohort {} (TFR {:.3}), scenario {}, {} rounds, leakage {:.4}\n",
        observed.label,
        observed.tfr(),
        scenario.number(),
        artifact.rounds.len(),
        artifact.leakage
    );
    for s in summarize_draws(&prior.names, &artifact.draws)? {
        text.push_str(&format!(
            "{:>8}  mean {:>10.4}  sd {:>9.4}  95% [{:.4}, {:.4}]\n",
            s.name, s.mean, s.sd, s.lo95, s.hi95
        ));
    }
    io::write_text(&a.out.join("summary.txt"), &text)?;
    Ok(text.trim_end().to_string())
}

fn cross_validate_cmd(a: &CrossValidateArgs, argv: &[String]) -> Result<String> {
    let seed = effective_seed(a.snpe.seed)?;
    let scenario = a.prior.scenario()?;
    let prior = a.prior.prior()?;
    let report = cross_validate(&prior, a.folds, &a.snpe.config(scenario, seed))?;
    io::create_dir(&a.out)?;
    io::write_cv_folds(&a.out.join("cv_folds.csv"), &report)?;
    io::write_nrmse(&a.out.join("cv_nrmse.csv"), &report)?;
    write_run_manifest(&a.out.join(RUN_MANIFEST), argv, Some(seed))?;
    let mut text = format!(
        "scenario {}, {} folds, {} failed\n",
        scenario.number(),
        report.folds.len(),
        report.n_failed
    );
    for (n, v) in report.names.iter().zip(&report.nrmse) {
        text.push_str(&format!("{n:>8}  nRMSE {v:.4}\n"));
    }
    io::write_text(&a.out.join("summary.txt"), &text)?;
    Ok(text.trim_end().to_string())
}

fn ppc(a: &PpcArgs, argv: &[String]) -> Result<String> {
    let seed = effective_seed(a.seed)?;
    let artifact = PosteriorArtifact::load(&a.artifact)?;
    let observed = io::read_rates(&a.asfr)?;
    let report = posterior_predictive_check(&artifact, &observed, a.draws, a.n_women, seed)?;
    io::create_dir(&a.out)?;
    io::write_ppc(&a.out.join("ppc.csv"), &report)?;
    write_run_manifest(&a.out.join(RUN_MANIFEST), argv, Some(seed))?;
    let text = format!(
        "{} posterior draws, {} women per cohort\ncoverage {:.4}\n",
        report.n_draws, a.n_women, report.coverage
    );
    io::write_text(&a.out.join("summary.txt"), &text)?;
    Ok(text.trim_end().to_string())
}

fn validate_micro_cmd(a: &ValidateMicroArgs, argv: &[String]) -> Result<String> {
    let seed = effective_seed(a.seed)?;
    let artifact = PosteriorArtifact::load(&a.artifact)?;
    let theta_hat = ParameterVector::from_slice(&posterior_mean(&artifact.draws))?;
    let observed = cohort_sbi::simulate::MicroDistributions {
        age_first_sex: io::read_histogram(&a.age_first_sex)?,
        desired_family_size: io::read_histogram(&a.desired_family_size)?,
        birth_intervals: io::read_histogram(&a.birth_intervals)?,
    };
    let report = validate_micro(&theta_hat, &observed, a.n_women, seed, Execution::default())?;
    io::create_dir(&a.out)?;
    io::write_micro_report(&a.out.join("micro.csv"), &report)?;
    for o in &report.outcomes {
        io::write_histogram(&a.out.join(format!("simulated_{}.csv", o.name)), &o.simulated)?;
    }
    write_run_manifest(&a.out.join(RUN_MANIFEST), argv, Some(seed))?;
    let mut text = String::new();
    for o in &report.outcomes {
        text.push_str(&format!(
            "{:>20}  JS {:.4} bits  (dropped mass {:.4})\n",
            o.name, o.js_bits, o.dropped_mass
        ));
    }
    io::write_text(&a.out.join("summary.txt"), &text)?;
    Ok(text.trim_end().to_string())
}

fn fit_priors(a: &FitPriorsArgs, argv: &[String]) -> Result<String> {
    let prior = a.prior.prior()?;
    io::write_text(&a.out, &prior.to_manifest())?;
    let mut run = a.out.clone().into_os_string();
    run.push(".run");
    write_run_manifest(Path::new(&run), argv, None)?;
    Ok(prior.to_manifest().trim_end().to_string())
}

fn rerun(a: &RerunArgs) -> Result<String> {
    let m = Manifest::read(&a.manifest)?;
    if m.require("format")? != "cohort-sbi-run 1" {
        return Err(Error::Format(format!("{}: not a run manifest", a.manifest.display())));
    }
    let argc: usize = m.parse_value("argc")?;
    let mut args = vec!["cohort-sbi".to_string()];
    for k in 0..argc {
        args.push(m.require(&format!("arg.{k}"))?.to_string());
    }
    if let Some(out) = &a.out {
        match args.iter().position(|s| s == "--out") {
            Some(i) if i + 1 < args.len() => args[i + 1] = out.display().to_string(),
            _ => return Err(Error::Config("recorded run has no --out to replace".into())),
        }
    }
    let cli = Cli::try_parse_from(&args).map_err(|e| Error::Format(format!("recorded arguments: {}", first_line(&e.to_string()))))?;
    if matches!(cli.command, Command::Rerun(_)) {
        return Err(Error::Config("a rerun manifest cannot point at another rerun".into()));
    }
    REPLAY.store(true, Ordering::Relaxed);
    dispatch(&cli.command, &args[1..])
}

fn dispatch(command: &Command, argv: &[String]) -> Result<String> {
    match command {
        Command::Simulate(a) => simulate(a, argv),
        Command::Infer(a) => infer(a, argv),
        Command::CrossValidate(a) => cross_validate_cmd(a, argv),
        Command::Ppc(a) => ppc(a, argv),
        Command::ValidateMicro(a) => validate_micro_cmd(a, argv),
        Command::FitPriors(a) => fit_priors(a, argv),
        Command::Rerun(a) => rerun(a),
    }
}

fn first_line(s: &str) -> &str {
    s.lines().find(|l| !l.trim().is_empty()).unwrap_or(s).trim()
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand) {
                e.exit();
            }
            eprintln!("error[usage]: {}", first_line(&e.to_string()).trim_start_matches("error: "));
            return ExitCode::from(2);
        }
    };
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error[config]: cannot set up {n} threads: {e}");
            return ExitCode::from(1);
        }
    }
    match dispatch(&cli.command, &argv[1..]) {
        Ok(text) => {
            // a closed pipe downstream is not a failure of the run
            let _ = writeln!(std::io::stdout(), "{text}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error[{}]: {}", e.class(), first_line(&e.to_string()));
            ExitCode::from(1)
        }
    }
}
