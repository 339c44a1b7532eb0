use cohort_sbi::io;
use cohort_sbi::prior::{MarginalPrior, Prior};
use cohort_sbi::simulate::{compute_asfr, extract_micro_distributions, simulate_cohort};
use cohort_sbi::snpe::{run_snpe_with, toy::LinearGaussian, PosteriorArtifact, Simulator, SnpeConfig};
use cohort_sbi::{ParameterVector, SummaryLayout};
use proptest::prelude::*;

fn theta() -> ParameterVector {
    ParameterVector::from_slice(&[17.0, 2.0, 3.0, 1.5, 4.0, 1.0, 30.0, 8.0, 0.1, 0.5, 0.5]).unwrap()
}

#[test]
fn simulated_rates_and_histograms_survive_csv() {
    let dir = tempfile::tempdir().unwrap();
    let cohort = simulate_cohort(&theta(), 500, 3).unwrap();
    let asfr = compute_asfr(&cohort);
    io::write_rates(&dir.path().join("asfr.csv"), &asfr).unwrap();
    let back = io::read_rates(&dir.path().join("asfr.csv")).unwrap();
    assert_eq!(back.len(), 40);
    for (a, b) in asfr.iter().zip(&back) {
        assert!((a - b).abs() < 1e-12);
    }

    let micro = extract_micro_distributions(&cohort);
    let path = dir.path().join("family.csv");
    io::write_histogram(&path, &micro.desired_family_size).unwrap();
    let h = io::read_histogram(&path).unwrap();
    assert_eq!(h.edges, micro.desired_family_size.edges);
    for (a, b) in h.masses.iter().zip(&micro.desired_family_size.masses) {
        assert!((a - b).abs() < 1e-9);
    }
}

#[test]
fn small_run_round_trips_through_disk() {
    let sim = LinearGaussian {
        a: [[1.0, 0.0], [0.0, 1.0]],
        noise_sd: 0.3,
    };
    let prior = Prior::new(
        vec!["a".into(), "b".into()],
        vec![MarginalPrior::Uniform { lo: -3.0, hi: 3.0 }; 2],
    )
    .unwrap();
    let x_o = sim.simulate(&[0.5, -1.0], 1).unwrap();
    let config = SnpeConfig {
        rounds: 2,
        sims_per_round: 300,
        posterior_draws: 200,
        seed: 4,
        training: cohort_sbi::apt::TrainingOptions {
            max_epochs: 30,
            ..Default::default()
        },
        ..SnpeConfig::default()
    };
    let art = run_snpe_with(&sim, &x_o, &prior, &config).unwrap();
    assert_eq!(art.rounds.len(), 2);
    assert_eq!(art.rounds[1].dataset_size, 600);
    assert!(art.draws.iter().all(|d| prior.in_support(d)));

    let dir = tempfile::tempdir().unwrap();
    art.save(dir.path()).unwrap();
    let loaded = PosteriorArtifact::load(dir.path()).unwrap();
    assert_eq!(loaded.estimator, art.estimator);
    assert_eq!(loaded.draws, art.draws);
    assert_eq!(loaded.config, art.config);
    assert_eq!(loaded.sample(50, 9).unwrap(), art.sample(50, 9).unwrap());
}

#[test]
fn cohort_summary_matches_layout_length() {
    let cohort = simulate_cohort(&theta(), 200, 8).unwrap();
    assert_eq!(cohort_sbi::simulate::summarize(&cohort, SummaryLayout::Asfr).to_vec().len(), 40);
    assert_eq!(cohort_sbi::simulate::summarize(&cohort, SummaryLayout::AsfrAsufr).to_vec().len(), 80);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn births_respect_gestation_and_amenorrhea(seed in 0u64..1000, kappa in 0.0f64..0.5, mu_d in 0.5f64..8.0) {
        let mut t = theta();
        t.kappa = kappa;
        t.mu_d = mu_d;
        let cohort = simulate_cohort(&t, 100, seed).unwrap();
        let mut by_woman = std::collections::BTreeMap::<u32, Vec<u32>>::new();
        for b in &cohort.births {
            prop_assert!(b.mother_age_months >= 129);
            by_woman.entry(b.woman_id).or_default().push(b.mother_age_months);
        }
        for ages in by_woman.values() {
            for w in ages.windows(2) {
                prop_assert!(w[1] >= w[0] + 12);
            }
        }
        let asfr = compute_asfr(&cohort);
        prop_assert!(asfr.iter().all(|r| r.is_finite() && *r >= 0.0));
    }
}
