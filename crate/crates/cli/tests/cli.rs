use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::tempdir;

const THETA: &str = "mu_s=18,sigma_s=3,delta_r=2,sigma_r=2,mu_d=4,sigma_d=1.5,mu_b=30,sigma_b=10,kappa=0.2,beta1=0.4,beta2=0.3";

fn run(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cohort-sbi"))
        .args(args)
        .current_dir(cwd)
        .env_remove("COHORT_SBI_SEED")
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const SMALL: [&str; 12] = [
    "--rounds", "1", "--sims", "256", "--n-women", "200", "--max-epochs", "3", "--posterior-draws", "60",
    "--batch-size", "64",
];

#[test]
fn simulate_without_fecundity_gives_zero_rates() {
    let d = tempdir().unwrap();
    let theta = THETA.replace("beta1=0.4,beta2=0.3", "beta1=0,beta2=0");
    let o = run(&["simulate", "--theta", &theta, "--n-women", "500", "--out", "sim"], d.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let asfr = fs::read_to_string(d.path().join("sim/asfr.csv")).unwrap();
    let lines: Vec<&str> = asfr.lines().collect();
    assert_eq!(lines.len(), 41);
    assert!(lines[1..].iter().all(|l| l.ends_with(",0")));
    for f in ["births.csv", "traits.csv", "asufr.csv", "age_first_sex.csv", "desired_family_size.csv", "birth_intervals.csv", "run.manifest"] {
        assert!(d.path().join("sim").join(f).exists(), "{f}");
    }
    let births = fs::read_to_string(d.path().join("sim/births.csv")).unwrap();
    assert_eq!(births.trim(), "woman_id,mother_age_months,conception_month,planned");
}

#[test]
fn errors_are_single_classified_lines() {
    let d = tempdir().unwrap();
    let o = run(&["no-such-command"], d.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).starts_with("error[usage]:"));
    assert_eq!(stderr(&o).lines().count(), 1);

    let o = run(&["simulate", "--theta", "mu_s=18", "--out", "x"], d.path());
    assert!(!o.status.success());
    assert!(stderr(&o).starts_with("error[config]:"), "{}", stderr(&o));

    let o = run(&["ppc", "--artifact", "missing", "--asfr", "missing.csv", "--out", "p"], d.path());
    assert!(stderr(&o).starts_with("error[io]:"), "{}", stderr(&o));
}

#[test]
fn scenario_three_needs_asufr() {
    let d = tempdir().unwrap();
    assert!(run(&["simulate", "--theta", THETA, "--n-women", "300", "--out", "sim"], d.path()).status.success());
    let o = run(&["infer", "--asfr", "sim/asfr.csv", "--scenario", "3", "--out", "post"], d.path());
    assert!(!o.status.success());
    assert!(stderr(&o).starts_with("error[consistency]:"), "{}", stderr(&o));
}

#[test]
fn missing_age_is_named() {
    let d = tempdir().unwrap();
    let mut s = String::from("age,rate\n");
    for a in (10..50).filter(|a| *a != 31) {
        s.push_str(&format!("{a},0.1\n"));
    }
    fs::write(d.path().join("asfr.csv"), s).unwrap();
    let o = run(&["infer", "--asfr", "asfr.csv", "--out", "post"], d.path());
    assert!(stderr(&o).starts_with("error[format]:") && stderr(&o).contains("age 31"), "{}", stderr(&o));
}

#[test]
fn infer_then_ppc_and_micro() {
    let d = tempdir().unwrap();
    assert!(run(&["simulate", "--theta", THETA, "--n-women", "400", "--seed", "5", "--out", "sim"], d.path()).status.success());
    let mut args = vec!["infer", "--asfr", "sim/asfr.csv", "--asufr", "sim/asufr.csv", "--scenario", "3", "--out", "post"];
    args.extend(SMALL);
    let o = run(&args, d.path());
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["estimator.txt", "draws.csv", "manifest.txt", "rounds.csv", "prior.manifest", "summary.txt"] {
        assert!(d.path().join("post").join(f).exists(), "{f}");
    }

    let o = run(&["ppc", "--artifact", "post", "--asfr", "sim/asfr.csv", "--draws", "20", "--n-women", "200", "--out", "ppc"], d.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let ppc = fs::read_to_string(d.path().join("ppc/ppc.csv")).unwrap();
    assert_eq!(ppc.lines().count(), 41);
    assert_eq!(ppc.lines().next().unwrap(), "age,observed,mean,lo95,hi95");
    let summary = fs::read_to_string(d.path().join("ppc/summary.txt")).unwrap();
    assert!(summary.lines().any(|l| l.starts_with("coverage ")));

    let o = run(
        &[
            "validate-micro", "--artifact", "post", "--age-first-sex", "sim/age_first_sex.csv",
            "--desired-family-size", "sim/desired_family_size.csv", "--birth-intervals", "sim/birth_intervals.csv",
            "--n-women", "500", "--out", "micro",
        ],
        d.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let micro = fs::read_to_string(d.path().join("micro/micro.csv")).unwrap();
    assert_eq!(micro.lines().count(), 4);
}

#[test]
fn rerun_reproduces_outputs_exactly() {
    let d = tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_cohort-sbi"))
        .args(["simulate", "--theta", THETA, "--n-women", "300", "--out", "a"])
        .current_dir(d.path())
        .env("COHORT_SBI_SEED", "77")
        .output()
        .unwrap();
    assert!(o.status.success());
    let manifest = fs::read_to_string(d.path().join("a/run.manifest")).unwrap();
    assert!(manifest.contains("seed = 77"));
    let o = run(&["--threads", "2", "rerun", "a/run.manifest", "--out", "b"], d.path());
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["births.csv", "traits.csv", "asfr.csv", "asufr.csv", "birth_intervals.csv"] {
        assert_eq!(
            fs::read(d.path().join("a").join(f)).unwrap(),
            fs::read(d.path().join("b").join(f)).unwrap(),
            "{f}"
        );
    }
    let other = run(&["simulate", "--theta", THETA, "--n-women", "300", "--seed", "78", "--out", "c"], d.path());
    assert!(other.status.success());
    assert_ne!(fs::read(d.path().join("a/births.csv")).unwrap(), fs::read(d.path().join("c/births.csv")).unwrap());
}

#[test]
fn fit_priors_writes_manifest() {
    let d = tempdir().unwrap();
    let o = run(&["fit-priors", "--scenario", "1", "--out", "priors.manifest"], d.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let text = fs::read_to_string(d.path().join("priors.manifest")).unwrap();
    assert!(text.contains("mu_s = gamma"));
    assert!(text.contains("kappa = beta a=2 b=8"));
    let o = run(&["fit-priors", "--scenario", "2", "--out", "p2.manifest"], d.path());
    assert!(stderr(&o).starts_with("error[config]:"));
}
