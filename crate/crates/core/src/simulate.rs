//! Monthly life-course simulation of a cohort and its reduction to rates and
//! micro-level outcome distributions.

use rand::Rng;

use crate::error::{bail, Result};
use crate::exec::{derive_seed, rng_from, tags, Execution};
use crate::histogram::Histogram;
use crate::model::{
    effective_kappa, is_trying, FecundityTable, ParameterVector, TraitSampler, WomanTraits,
    AMENORRHEA_MONTHS, END_MONTH, FIRST_MONTH, GESTATION_MONTHS, MAX_AGE_YEARS, MIN_AGE_YEARS,
};

/// Single-year ages on the rate grid (10..=49).
pub const N_AGES: usize = (MAX_AGE_YEARS - MIN_AGE_YEARS) as usize;

/// Bin edges for inter-birth intervals, months. The final bin is open.
pub fn birth_interval_edges() -> Vec<f64> {
    let mut edges: Vec<f64> = (0..=18).map(|i| 12.0 + 6.0 * i as f64).collect();
    edges.push(f64::INFINITY);
    edges
}

const AGE_FIRST_SEX_CAP: i64 = 100;
const FAMILY_SIZE_CAP: i64 = 30;

/// Women per scheduling block.
const BLOCK: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BirthRecord {
    pub woman_id: u32,
    pub mother_age_months: u32,
    pub conception_month: u32,
    pub planned: bool,
}

/// Mutable state of one woman while her months are stepped through.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct WomanState {
    pub parity: u32,
    /// First month in which she can conceive again.
    pub susceptible_until: Option<u32>,
    pub last_birth_month: Option<u32>,
    pub conception_pending: Option<(u32, bool)>,
}

impl WomanState {
    fn susceptible(&self, month: u32) -> bool {
        self.susceptible_until.is_none_or(|until| month >= until)
    }
}

/// Complete synthetic histories. Month indices are the woman's age in months;
/// births are grouped by woman and ordered in time.
#[derive(Debug, Clone, PartialEq)]
pub struct CohortResult {
    pub births: Vec<BirthRecord>,
    pub traits: Vec<WomanTraits>,
    pub n_women: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SummaryLayout {
    Asfr,
    AsfrAsufr,
}

impl SummaryLayout {
    pub fn len(self) -> usize {
        match self {
            SummaryLayout::Asfr => N_AGES,
            SummaryLayout::AsfrAsufr => 2 * N_AGES,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SummaryLayout::Asfr => "asfr",
            SummaryLayout::AsfrAsufr => "asfr+asufr",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "asfr" => Ok(SummaryLayout::Asfr),
            "asfr+asufr" => Ok(SummaryLayout::AsfrAsufr),
            _ => bail!(Config, "unknown summary layout '{s}'"),
        }
    }
}

/// Age-specific rates over ages 10..49, optionally with unplanned rates.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryVector {
    pub asfr: Vec<f64>,
    pub asufr: Option<Vec<f64>>,
}

impl SummaryVector {
    pub fn layout(&self) -> SummaryLayout {
        if self.asufr.is_some() {
            SummaryLayout::AsfrAsufr
        } else {
            SummaryLayout::Asfr
        }
    }

    /// Flat estimator input: ASFR block, then the ASUFR block when present.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = self.asfr.clone();
        if let Some(u) = &self.asufr {
            v.extend_from_slice(u);
        }
        v
    }

    pub fn from_vec(layout: SummaryLayout, v: &[f64]) -> Result<Self> {
        if v.len() != layout.len() {
            bail!(
                Contract,
                "summary of length {} does not match layout {}",
                v.len(),
                layout.name()
            );
        }
        Ok(SummaryVector {
            asfr: v[..N_AGES].to_vec(),
            asufr: (layout == SummaryLayout::AsfrAsufr).then(|| v[N_AGES..].to_vec()),
        })
    }

    /// Reduces to the requested layout, dropping ASUFR if not wanted.
    pub fn with_layout(&self, layout: SummaryLayout) -> Result<Self> {
        match (layout, &self.asufr) {
            (SummaryLayout::Asfr, _) => Ok(SummaryVector {
                asfr: self.asfr.clone(),
                asufr: None,
            }),
            (SummaryLayout::AsfrAsufr, Some(_)) => Ok(self.clone()),
            (SummaryLayout::AsfrAsufr, None) => {
                bail!(Consistency, "layout asfr+asufr requires unplanned rates")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MicroDistributions {
    pub age_first_sex: Histogram,
    pub desired_family_size: Histogram,
    pub birth_intervals: Histogram,
}

/// Steps one woman through the reproductive window, appending her births.
fn simulate_woman<R: Rng>(
    woman_id: u32,
    traits: &WomanTraits,
    kappa: f64,
    table: &FecundityTable,
    rng: &mut R,
    births: &mut Vec<BirthRecord>,
) -> WomanState {
    let mut state = WomanState::default();
    let start = FIRST_MONTH.max(traits.x_i.ceil().min(END_MONTH as f64) as u32);
    for month in start..END_MONTH {
        if !state.susceptible(month) {
            continue;
        }
        let since = state.last_birth_month.map(|b| month.saturating_sub(b));
        let trying = is_trying(traits, state.parity, since, month);
        let phi = table.at_month(month);
        let p = if trying {
            phi
        } else {
            effective_kappa(kappa, state.parity, traits.d_i) * phi
        };
        if rng.random::<f64>() < p {
            state.conception_pending = Some((month, trying));
            let birth = month + GESTATION_MONTHS;
            births.push(BirthRecord {
                woman_id,
                mother_age_months: birth,
                conception_month: month,
                planned: trying,
            });
            state.parity += 1;
            state.last_birth_month = Some(birth);
            state.susceptible_until = Some(birth + AMENORRHEA_MONTHS);
            state.conception_pending = None;
        }
    }
    state
}

/// Simulates `n_women` life courses. Each woman draws from her own stream
/// derived from `seed`, so output is independent of `exec`.
pub fn simulate_cohort_with(
    theta: &ParameterVector,
    n_women: usize,
    seed: u64,
    exec: Execution,
) -> Result<CohortResult> {
    if n_women == 0 {
        bail!(Domain, "cohort needs at least one woman");
    }
    if n_women > u32::MAX as usize {
        bail!(Domain, "cohort of {n_women} women is too large");
    }
    let sampler = TraitSampler::new(theta)?;
    let table = FecundityTable::new(theta.beta1, theta.beta2);
    let n_blocks = n_women.div_ceil(BLOCK);
    let blocks = exec.map(n_blocks, |b| {
        let range = b * BLOCK..((b + 1) * BLOCK).min(n_women);
        let mut traits = Vec::with_capacity(range.len());
        let mut births = Vec::new();
        for i in range {
            let mut rng = rng_from(derive_seed(seed, tags::WOMAN, i as u64));
            let t = sampler.sample(&mut rng);
            simulate_woman(i as u32, &t, theta.kappa, &table, &mut rng, &mut births);
            traits.push(t);
        }
        (traits, births)
    });
    let mut result = CohortResult {
        births: Vec::new(),
        traits: Vec::with_capacity(n_women),
        n_women,
    };
    for (t, b) in blocks {
        result.traits.extend(t);
        result.births.extend(b);
    }
    Ok(result)
}

pub fn simulate_cohort(theta: &ParameterVector, n_women: usize, seed: u64) -> Result<CohortResult> {
    simulate_cohort_with(theta, n_women, seed, Execution::default())
}

fn rates_where(result: &CohortResult, keep: impl Fn(&BirthRecord) -> bool) -> Vec<f64> {
    let mut counts = [0u64; N_AGES];
    for b in result.births.iter().filter(|b| keep(b)) {
        let age = (b.mother_age_months / 12) as usize;
        if (MIN_AGE_YEARS as usize..MAX_AGE_YEARS as usize).contains(&age) {
            counts[age - MIN_AGE_YEARS as usize] += 1;
        }
    }
    let exposure = result.n_women as f64;
    counts.iter().map(|&c| c as f64 / exposure).collect()
}

/// Births per person-year at each single-year age 10..49. Every woman is
/// exposed for the full window, so the denominator is the cohort size.
pub fn compute_asfr(result: &CohortResult) -> Vec<f64> {
    rates_where(result, |_| true)
}

/// As [`compute_asfr`] restricted to births conceived while contracepting.
pub fn compute_asufr(result: &CohortResult) -> Vec<f64> {
    rates_where(result, |b| !b.planned)
}

pub fn summarize(result: &CohortResult, layout: SummaryLayout) -> SummaryVector {
    SummaryVector {
        asfr: compute_asfr(result),
        asufr: (layout == SummaryLayout::AsfrAsufr).then(|| compute_asufr(result)),
    }
}

fn integer_histogram(values: impl Iterator<Item = i64>, cap: i64) -> Histogram {
    let values: Vec<i64> = values.collect();
    if values.is_empty() {
        return Histogram::from_integer_counts(0, &[0], None);
    }
    let lo = values.iter().copied().min().unwrap().min(cap - 1);
    let hi = values.iter().copied().max().unwrap().min(cap - 1);
    let mut counts = vec![0u64; (hi - lo + 1) as usize];
    let mut overflow = 0u64;
    for v in values {
        if v >= cap {
            overflow += 1;
        } else {
            counts[(v - lo) as usize] += 1;
        }
    }
    Histogram::from_integer_counts(lo, &counts, (overflow > 0).then_some(overflow))
}

/// Gaps in months between consecutive births of each woman.
pub fn birth_gaps(result: &CohortResult) -> Vec<u32> {
    result
        .births
        .windows(2)
        .filter(|w| w[0].woman_id == w[1].woman_id)
        .map(|w| w[1].mother_age_months - w[0].mother_age_months)
        .collect()
}

pub fn extract_micro_distributions(result: &CohortResult) -> MicroDistributions {
    let age_first_sex = integer_histogram(
        result.traits.iter().map(|t| (t.x_i / 12.0).floor() as i64),
        AGE_FIRST_SEX_CAP,
    );
    let desired_family_size =
        integer_histogram(result.traits.iter().map(|t| t.d_i as i64), FAMILY_SIZE_CAP);

    let edges = birth_interval_edges();
    let mut counts = vec![0.0; edges.len() - 1];
    let gaps = birth_gaps(result);
    for &g in &gaps {
        let g = g as f64;
        if let Some(k) = edges.windows(2).position(|e| g >= e[0] && g < e[1]) {
            counts[k] += 1.0;
        }
    }
    let birth_intervals = Histogram::from_weights(edges, counts, gaps.len() as u64)
        .expect("fixed interval grid is well formed");
    MicroDistributions {
        age_first_sex,
        desired_family_size,
        birth_intervals,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{conception_probability, IntentState};

    fn theta() -> ParameterVector {
        ParameterVector {
            mu_s: 18.0,
            sigma_s: 3.0,
            delta_r: 4.0,
            sigma_r: 3.0,
            mu_d: 2.5,
            sigma_d: 1.2,
            mu_b: 30.0,
            sigma_b: 10.0,
            kappa: 0.2,
            beta1: 0.4,
            beta2: 0.2,
        }
    }

    #[test]
    fn zero_fecundability_gives_no_births() {
        let t = ParameterVector {
            beta1: 0.0,
            beta2: 0.0,
            ..theta()
        };
        let r = simulate_cohort(&t, 500, 1).unwrap();
        assert!(r.births.is_empty());
        assert!(compute_asfr(&r).iter().all(|&v| v == 0.0));
        let s = summarize(&r, SummaryLayout::AsfrAsufr);
        assert_eq!(s.to_vec(), vec![0.0; 80]);
    }

    #[test]
    fn late_intention_and_perfect_contraception_gives_no_births() {
        let t = ParameterVector {
            kappa: 0.0,
            delta_r: 100.0,
            sigma_r: 0.0,
            ..theta()
        };
        let r = simulate_cohort(&t, 500, 2).unwrap();
        assert!(r.births.is_empty());
    }

    #[test]
    fn perfect_contraception_gives_no_unplanned_births() {
        let t = ParameterVector {
            kappa: 0.0,
            ..theta()
        };
        let r = simulate_cohort(&t, 2000, 8).unwrap();
        assert!(!r.births.is_empty());
        assert!(compute_asufr(&r).iter().all(|u| *u == 0.0));
    }

    #[test]
    fn deterministic_and_schedule_independent() {
        let a = simulate_cohort_with(&theta(), 1000, 42, Execution::Sequential).unwrap();
        let b = simulate_cohort_with(&theta(), 1000, 42, Execution::Parallel).unwrap();
        assert_eq!(a, b);
        let c = simulate_cohort_with(&theta(), 1000, 43, Execution::Parallel).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn gaps_respect_gestation_and_amenorrhea() {
        let r = simulate_cohort(&theta(), 3000, 5).unwrap();
        assert!(!r.births.is_empty());
        assert!(birth_gaps(&r).iter().all(|&g| g >= 12));
        for b in &r.births {
            assert_eq!(b.mother_age_months, b.conception_month + 9);
            assert!(b.conception_month >= FIRST_MONTH && b.conception_month < END_MONTH);
        }
    }

    #[test]
    fn tfr_identity_and_asufr_subset() {
        let r = simulate_cohort(&theta(), 2000, 9).unwrap();
        let asfr = compute_asfr(&r);
        let asufr = compute_asufr(&r);
        let in_grid = r
            .births
            .iter()
            .filter(|b| b.mother_age_months < END_MONTH)
            .count();
        let total: u64 = asfr.iter().map(|v| (v * 2000.0).round() as u64).sum();
        assert_eq!(total as usize, in_grid);
        assert!((asfr.iter().sum::<f64>() - in_grid as f64 / 2000.0).abs() < 1e-12);
        assert!(asfr.iter().zip(&asufr).all(|(a, u)| u <= a));
    }

    #[test]
    fn single_birth_rate() {
        let r = CohortResult {
            births: vec![BirthRecord {
                woman_id: 0,
                mother_age_months: 25 * 12 + 4,
                conception_month: 25 * 12 - 5,
                planned: true,
            }],
            traits: vec![WomanTraits {
                x_i: 200.0,
                r_i: 250.0,
                d_i: 1,
                b_i: 20.0,
            }],
            n_women: 1,
        };
        let asfr = compute_asfr(&r);
        assert_eq!(asfr[15], 1.0);
        assert_eq!(asfr.iter().sum::<f64>(), 1.0);
        assert!(compute_asufr(&r).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn edge_delivery_counts_in_parity_not_rates() {
        let r = CohortResult {
            births: vec![BirthRecord {
                woman_id: 0,
                mother_age_months: 608,
                conception_month: 599,
                planned: false,
            }],
            traits: vec![WomanTraits {
                x_i: 200.0,
                r_i: 250.0,
                d_i: 1,
                b_i: 20.0,
            }],
            n_women: 1,
        };
        assert!(compute_asfr(&r).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn planned_flag_replays_trying_predicate() {
        let t = theta();
        let r = simulate_cohort(&t, 1000, 12).unwrap();
        let mut parity = vec![0u32; r.n_women];
        let mut last = vec![None::<u32>; r.n_women];
        for b in &r.births {
            let w = b.woman_id as usize;
            let tr = &r.traits[w];
            let since = last[w].map(|l| b.conception_month - l);
            let (_, state) =
                conception_probability(tr, parity[w], since, b.conception_month, &t, true);
            assert_eq!(b.planned, state == IntentState::Trying);
            assert_ne!(state, IntentState::NotYetActive);
            parity[w] += 1;
            last[w] = Some(b.mother_age_months);
        }
    }

    #[test]
    fn summary_layouts() {
        let r = simulate_cohort(&theta(), 300, 3).unwrap();
        let a = summarize(&r, SummaryLayout::Asfr);
        let b = summarize(&r, SummaryLayout::AsfrAsufr);
        assert_eq!(a.to_vec().len(), 40);
        assert_eq!(b.to_vec().len(), 80);
        assert_eq!(&b.to_vec()[..40], &compute_asfr(&r)[..]);
        let round = SummaryVector::from_vec(SummaryLayout::AsfrAsufr, &b.to_vec()).unwrap();
        assert_eq!(round, b);
        assert!(SummaryVector::from_vec(SummaryLayout::Asfr, &b.to_vec()).is_err());
    }

    #[test]
    fn micro_distributions_normalized() {
        let r = simulate_cohort(&theta(), 2000, 4).unwrap();
        let m = extract_micro_distributions(&r);
        for h in [&m.age_first_sex, &m.desired_family_size, &m.birth_intervals] {
            assert!((h.masses.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert_eq!(m.birth_intervals.edges[0], 12.0);
    }

    #[test]
    fn point_mass_initiation_age() {
        let t = ParameterVector {
            sigma_s: 0.0,
            mu_s: 17.5,
            ..theta()
        };
        let r = simulate_cohort(&t, 200, 4).unwrap();
        let m = extract_micro_distributions(&r);
        assert_eq!(m.age_first_sex.edges, vec![17.0, 18.0]);
        assert_eq!(m.age_first_sex.masses, vec![1.0]);
    }

    #[test]
    fn rejects_empty_cohort_and_bad_theta() {
        assert!(simulate_cohort(&theta(), 0, 1).is_err());
        let bad = ParameterVector {
            mu_s: -1.0,
            ..theta()
        };
        assert!(simulate_cohort(&bad, 10, 1).is_err());
    }
}
