//! Individual-level reproductive model: parameters, latent traits, and the
//! monthly conception kernel.

use rand::Rng;
use rand_distr::{Distribution, LogNormal, Weibull};
use statrs::function::gamma::gamma;

use crate::error::{bail, Result};

/// Lower edge of the reproductive window, years.
pub const MIN_AGE_YEARS: u32 = 10;
/// Upper edge of the reproductive window, years.
pub const MAX_AGE_YEARS: u32 = 50;
pub const FIRST_MONTH: u32 = MIN_AGE_YEARS * 12;
/// One past the last month in which a conception may occur.
pub const END_MONTH: u32 = MAX_AGE_YEARS * 12;
pub const GESTATION_MONTHS: u32 = 9;
pub const AMENORRHEA_MONTHS: u32 = 3;

/// Number of estimated parameters.
pub const N_PARAMS: usize = 11;

/// Parameter names in canonical order. This order is used for every
/// serialized matrix and for estimator inputs.
pub const PARAM_NAMES: [&str; N_PARAMS] = [
    "mu_s", "sigma_s", "delta_r", "sigma_r", "mu_d", "sigma_d", "mu_b", "sigma_b", "kappa",
    "beta1", "beta2",
];

/// The eleven behavioral parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParameterVector {
    /// Mean age at sexual initiation, years.
    pub mu_s: f64,
    pub sigma_s: f64,
    /// Mean gap from sexual initiation to intentional reproduction, years.
    pub delta_r: f64,
    pub sigma_r: f64,
    /// Mean desired family size.
    pub mu_d: f64,
    pub sigma_d: f64,
    /// Mean desired birth spacing, months.
    pub mu_b: f64,
    pub sigma_b: f64,
    /// Monthly contraceptive-failure probability.
    pub kappa: f64,
    pub beta1: f64,
    pub beta2: f64,
}

impl ParameterVector {
    pub fn to_array(&self) -> [f64; N_PARAMS] {
        [
            self.mu_s,
            self.sigma_s,
            self.delta_r,
            self.sigma_r,
            self.mu_d,
            self.sigma_d,
            self.mu_b,
            self.sigma_b,
            self.kappa,
            self.beta1,
            self.beta2,
        ]
    }

    /// Builds a vector from values in canonical order and validates it.
    pub fn from_slice(v: &[f64]) -> Result<Self> {
        if v.len() != N_PARAMS {
            bail!(Contract, "expected {N_PARAMS} parameters, got {}", v.len());
        }
        let theta = ParameterVector {
            mu_s: v[0],
            sigma_s: v[1],
            delta_r: v[2],
            sigma_r: v[3],
            mu_d: v[4],
            sigma_d: v[5],
            mu_b: v[6],
            sigma_b: v[7],
            kappa: v[8],
            beta1: v[9],
            beta2: v[10],
        };
        theta.validate()?;
        Ok(theta)
    }

    pub fn validate(&self) -> Result<()> {
        let checks: [(&str, f64, bool); N_PARAMS] = [
            ("mu_s", self.mu_s, self.mu_s > 0.0),
            ("sigma_s", self.sigma_s, self.sigma_s >= 0.0),
            ("delta_r", self.delta_r, self.delta_r >= 0.0),
            ("sigma_r", self.sigma_r, self.sigma_r >= 0.0),
            ("mu_d", self.mu_d, self.mu_d > 0.0),
            ("sigma_d", self.sigma_d, self.sigma_d > 0.0),
            ("mu_b", self.mu_b, self.mu_b > 0.0),
            ("sigma_b", self.sigma_b, self.sigma_b >= 0.0),
            ("kappa", self.kappa, (0.0..1.0).contains(&self.kappa)),
            ("beta1", self.beta1, self.beta1 >= 0.0),
            ("beta2", self.beta2, self.beta2 >= 0.0),
        ];
        for (name, value, ok) in checks {
            if !ok || !value.is_finite() {
                bail!(Domain, "parameter {name} = {value} is outside its domain");
            }
        }
        Ok(())
    }
}

/// Latent traits of one woman. Ages and spacing are in months.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WomanTraits {
    /// Age at sexual initiation.
    pub x_i: f64,
    /// Age at intentional reproduction.
    pub r_i: f64,
    /// Desired family size.
    pub d_i: u32,
    /// Desired birth spacing.
    pub b_i: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LognormalMoments {
    pub mu_ln: f64,
    pub sigma_ln: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeibullMoments {
    pub alpha: f64,
    pub lambda: f64,
}

/// Log-scale parameters of the lognormal with the given mean and sd.
pub fn lognormal_params_from_moments(mean: f64, sd: f64) -> Result<LognormalMoments> {
    if !(mean > 0.0 && mean.is_finite()) {
        bail!(Domain, "lognormal mean must be positive, got {mean}");
    }
    if !(sd >= 0.0 && sd.is_finite()) {
        bail!(Domain, "lognormal sd must be non-negative, got {sd}");
    }
    let m2 = mean * mean;
    Ok(LognormalMoments {
        mu_ln: (m2 / (m2 + sd * sd).sqrt()).ln(),
        sigma_ln: (1.0 + sd * sd / m2).ln().sqrt(),
    })
}

/// Weibull shape and scale matched to a mean and sd through the
/// power-law approximation of the shape, `alpha = (sd/mean)^-1.086`.
pub fn weibull_params_from_moments(mean: f64, sd: f64) -> Result<WeibullMoments> {
    if !(mean > 0.0 && mean.is_finite() && sd > 0.0 && sd.is_finite()) {
        bail!(Domain, "Weibull mean and sd must be positive, got ({mean}, {sd})");
    }
    let alpha = (sd / mean).powf(-1.086);
    let lambda = mean / gamma(1.0 + 1.0 / alpha);
    if !(lambda.is_finite() && lambda > 0.0) {
        bail!(Numeric, "Weibull scale underflow for mean {mean}, sd {sd}");
    }
    Ok(WeibullMoments { alpha, lambda })
}

/// Baseline monthly fecundability at `age` years, clamped to [0, 1].
pub fn fecundability(age: f64, beta1: f64, beta2: f64) -> Result<f64> {
    if !(MIN_AGE_YEARS as f64..=MAX_AGE_YEARS as f64).contains(&age) {
        bail!(Domain, "fecundability age {age} outside [10, 50]");
    }
    Ok(fecundability_unclamped(age, beta1, beta2).clamp(0.0, 1.0))
}

pub(crate) fn fecundability_unclamped(age: f64, beta1: f64, beta2: f64) -> f64 {
    let xs = (age - MIN_AGE_YEARS as f64) / (MAX_AGE_YEARS - MIN_AGE_YEARS) as f64;
    let b13 = 3.0 * xs * (1.0 - xs) * (1.0 - xs);
    let b23 = 3.0 * xs * xs * (1.0 - xs);
    beta1 * b13 + beta2 * b23
}

/// True when the curve exceeds 1 somewhere on the window and the clamp bites.
pub fn fecundability_clamps(beta1: f64, beta2: f64) -> bool {
    (FIRST_MONTH..END_MONTH).any(|m| fecundability_unclamped(m as f64 / 12.0, beta1, beta2) > 1.0)
}

/// Fecundability by month of age for the whole window, so the monthly loop
/// does no polynomial evaluation.
#[derive(Debug, Clone)]
pub struct FecundityTable {
    by_month: Vec<f64>,
}

impl FecundityTable {
    pub fn new(beta1: f64, beta2: f64) -> Self {
        let by_month = (FIRST_MONTH..END_MONTH)
            .map(|m| fecundability_unclamped(m as f64 / 12.0, beta1, beta2).clamp(0.0, 1.0))
            .collect();
        FecundityTable { by_month }
    }

    #[inline]
    pub fn at_month(&self, age_months: u32) -> f64 {
        self.by_month[(age_months - FIRST_MONTH) as usize]
    }
}

/// A trait distribution after moment conversion. A zero sd collapses to a
/// point mass at the mean.
#[derive(Debug, Clone, Copy)]
enum TraitDist {
    Point(f64),
    LogNormal(LogNormal<f64>),
    Weibull(Weibull<f64>),
}

impl TraitDist {
    fn lognormal(mean: f64, sd: f64) -> Result<Self> {
        if sd == 0.0 {
            return Ok(TraitDist::Point(mean));
        }
        let p = lognormal_params_from_moments(mean, sd)?;
        LogNormal::new(p.mu_ln, p.sigma_ln)
            .map(TraitDist::LogNormal)
            .map_err(|e| crate::Error::Domain(format!("lognormal({mean}, {sd}): {e}")))
    }

    fn weibull(mean: f64, sd: f64) -> Result<Self> {
        if sd == 0.0 {
            return Ok(TraitDist::Point(mean));
        }
        let p = weibull_params_from_moments(mean, sd)?;
        Weibull::new(p.lambda, p.alpha)
            .map(TraitDist::Weibull)
            .map_err(|e| crate::Error::Domain(format!("Weibull({mean}, {sd}): {e}")))
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self {
            TraitDist::Point(v) => *v,
            TraitDist::LogNormal(d) => d.sample(rng),
            TraitDist::Weibull(d) => d.sample(rng),
        }
    }
}

/// Pre-converted trait distributions for one parameter vector.
#[derive(Debug, Clone, Copy)]
pub struct TraitSampler {
    initiation: TraitDist,
    reproduction: TraitDist,
    family_size: TraitDist,
    spacing: TraitDist,
}

impl TraitSampler {
    pub fn new(theta: &ParameterVector) -> Result<Self> {
        theta.validate()?;
        Ok(TraitSampler {
            initiation: TraitDist::lognormal(theta.mu_s, theta.sigma_s)?,
            reproduction: TraitDist::lognormal(theta.mu_s + theta.delta_r, theta.sigma_r)?,
            family_size: TraitDist::weibull(theta.mu_d, theta.sigma_d)?,
            spacing: TraitDist::lognormal(theta.mu_b, theta.sigma_b)?,
        })
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> WomanTraits {
        let x_i = 12.0 * self.initiation.sample(rng);
        let r_i = 12.0 * self.reproduction.sample(rng);
        let d_i = round_family_size(self.family_size.sample(rng));
        let b_i = self.spacing.sample(rng);
        WomanTraits { x_i, r_i, d_i, b_i }
    }
}

/// Nearest-integer rounding of a desired-family-size draw.
pub fn round_family_size(draw: f64) -> u32 {
    // `as` saturates, which absorbs the far Weibull tail.
    draw.round().max(0.0) as u32
}

pub fn sample_woman<R: Rng + ?Sized>(theta: &ParameterVector, rng: &mut R) -> Result<WomanTraits> {
    Ok(TraitSampler::new(theta)?.sample(rng))
}

/// What a woman is doing in a given month.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum IntentState {
    /// Pregnant or in postpartum amenorrhea.
    NonSusceptible,
    /// Before sexual initiation.
    NotYetActive,
    /// Actively trying to conceive; no contraception.
    Trying,
    /// Sexually active and using contraception.
    Contracepting,
}

/// Whether a woman is actively trying to conceive this month.
#[inline]
pub fn is_trying(
    traits: &WomanTraits,
    parity: u32,
    months_since_last_birth: Option<u32>,
    age_months: u32,
) -> bool {
    let age = age_months as f64;
    let spaced = match (parity, months_since_last_birth) {
        (0, _) | (_, None) => true,
        (_, Some(gap)) => gap as f64 >= traits.b_i,
    };
    age >= traits.r_i && parity < traits.d_i && spaced
}

/// Effective contraceptive failure rate given parity relative to the target.
#[inline]
pub fn effective_kappa(kappa: f64, parity: u32, desired: u32) -> f64 {
    if parity < desired {
        kappa
    } else {
        kappa * kappa
    }
}

/// Conception probability for one woman-month, with the intent state that
/// produced it.
pub fn conception_probability(
    traits: &WomanTraits,
    parity: u32,
    months_since_last_birth: Option<u32>,
    age_months: u32,
    theta: &ParameterVector,
    susceptible: bool,
) -> (f64, IntentState) {
    if !susceptible {
        return (0.0, IntentState::NonSusceptible);
    }
    if (age_months as f64) < traits.x_i {
        return (0.0, IntentState::NotYetActive);
    }
    let age = (age_months as f64 / 12.0).clamp(MIN_AGE_YEARS as f64, MAX_AGE_YEARS as f64);
    let phi = fecundability_unclamped(age, theta.beta1, theta.beta2).clamp(0.0, 1.0);
    if is_trying(traits, parity, months_since_last_birth, age_months) {
        (phi, IntentState::Trying)
    } else {
        (
            effective_kappa(theta.kappa, parity, traits.d_i) * phi,
            IntentState::Contracepting,
        )
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    pub(crate) fn reference_theta() -> ParameterVector {
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
    fn lognormal_degenerate_sd() {
        let p = lognormal_params_from_moments(18.0, 0.0).unwrap();
        assert_relative_eq!(p.mu_ln, 18f64.ln(), epsilon = 1e-15);
        assert_eq!(p.sigma_ln, 0.0);
    }

    #[test]
    fn lognormal_known_values() {
        let p = lognormal_params_from_moments(18.0, 3.0).unwrap();
        assert_relative_eq!(p.mu_ln, 2.876_672_270_802_107_5, epsilon = 1e-12);
        assert_relative_eq!(p.sigma_ln, 0.165_526_354_965_347_87, epsilon = 1e-12);
    }

    #[test]
    fn lognormal_rejects_bad_inputs() {
        assert!(lognormal_params_from_moments(0.0, 1.0).is_err());
        assert!(lognormal_params_from_moments(-1.0, 1.0).is_err());
        assert!(lognormal_params_from_moments(1.0, -0.1).is_err());
    }

    #[test]
    fn weibull_exponential_case() {
        let p = weibull_params_from_moments(3.0, 3.0).unwrap();
        assert_relative_eq!(p.alpha, 1.0, epsilon = 1e-15);
        assert_relative_eq!(p.lambda, 3.0, epsilon = 1e-12);
    }

    #[test]
    fn weibull_known_values() {
        let p = weibull_params_from_moments(4.5, 2.0).unwrap();
        assert_relative_eq!(p.alpha, 2.412_516_068_702_592_6, epsilon = 1e-10);
        assert_relative_eq!(p.lambda, 5.075_745_085_835_369, epsilon = 1e-9);
    }

    #[test]
    fn weibull_rejects_bad_inputs() {
        assert!(weibull_params_from_moments(0.0, 1.0).is_err());
        assert!(weibull_params_from_moments(1.0, 0.0).is_err());
    }

    #[test]
    fn fecundability_boundaries_and_midpoint() {
        for (b1, b2) in [(0.4, 0.2), (0.0, 0.0), (0.9, 0.9)] {
            assert_eq!(fecundability(10.0, b1, b2).unwrap(), 0.0);
            assert_eq!(fecundability(50.0, b1, b2).unwrap(), 0.0);
        }
        assert_relative_eq!(fecundability(30.0, 0.4, 0.2).unwrap(), 0.225, epsilon = 1e-15);
        assert!(fecundability(9.99, 0.4, 0.2).is_err());
        assert!(fecundability(50.01, 0.4, 0.2).is_err());
    }

    #[test]
    fn fecundability_clamps_large_coefficients() {
        assert_eq!(fecundability(30.0, 5.0, 5.0).unwrap(), 1.0);
        assert!(fecundability_clamps(5.0, 5.0));
        assert!(!fecundability_clamps(0.9, 0.9));
    }

    #[test]
    fn degenerate_traits_are_exact() {
        let theta = ParameterVector {
            sigma_s: 0.0,
            sigma_r: 0.0,
            sigma_b: 0.0,
            ..reference_theta()
        };
        let mut rng = crate::exec::rng_from(3);
        let t = sample_woman(&theta, &mut rng).unwrap();
        assert_eq!(t.x_i, 12.0 * 18.0);
        assert_eq!(t.r_i, 12.0 * 22.0);
        assert_eq!(t.b_i, 30.0);
    }

    #[test]
    fn family_size_rounds_to_nearest() {
        assert_eq!(round_family_size(2.4), 2);
        assert_eq!(round_family_size(2.6), 3);
        assert_eq!(round_family_size(0.3), 0);
    }

    #[test]
    fn initiation_age_sample_mean() {
        let theta = reference_theta();
        let sampler = TraitSampler::new(&theta).unwrap();
        let mut rng = crate::exec::rng_from(11);
        let n = 100_000;
        let years: Vec<f64> = (0..n).map(|_| sampler.sample(&mut rng).x_i / 12.0).collect();
        let mean = years.iter().sum::<f64>() / n as f64;
        let var = years.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let se = (var / n as f64).sqrt();
        assert!((mean - 18.0).abs() < 3.0 * se, "mean {mean}, se {se}");
    }

    #[test]
    fn conception_states() {
        let theta = reference_theta();
        let traits = WomanTraits {
            x_i: 200.0,
            r_i: 260.0,
            d_i: 2,
            b_i: 24.0,
        };
        let phi = |m: u32| fecundability(m as f64 / 12.0, 0.4, 0.2).unwrap();

        assert_eq!(
            conception_probability(&traits, 0, None, 300, &theta, false),
            (0.0, IntentState::NonSusceptible)
        );
        assert_eq!(
            conception_probability(&traits, 0, None, 199, &theta, true),
            (0.0, IntentState::NotYetActive)
        );
        // active, before r_i
        let (p, s) = conception_probability(&traits, 0, None, 220, &theta, true);
        assert_eq!(s, IntentState::Contracepting);
        assert_relative_eq!(p, 0.2 * phi(220), epsilon = 1e-15);
        // trying
        let (p, s) = conception_probability(&traits, 0, None, 300, &theta, true);
        assert_eq!(s, IntentState::Trying);
        assert_eq!(p, phi(300));
        // inside spacing interval
        let (p, s) = conception_probability(&traits, 1, Some(12), 320, &theta, true);
        assert_eq!(s, IntentState::Contracepting);
        assert_relative_eq!(p, 0.2 * phi(320), epsilon = 1e-15);
        // spacing elapsed
        let (p, s) = conception_probability(&traits, 1, Some(24), 332, &theta, true);
        assert_eq!(s, IntentState::Trying);
        assert_eq!(p, phi(332));
        // target reached
        let (p, s) = conception_probability(&traits, 2, Some(100), 400, &theta, true);
        assert_eq!(s, IntentState::Contracepting);
        assert_relative_eq!(p, 0.04 * phi(400), epsilon = 1e-15);
    }

    #[test]
    fn zero_desired_children_always_contracepts_at_kappa_squared() {
        let theta = reference_theta();
        let traits = WomanTraits {
            x_i: 150.0,
            r_i: 160.0,
            d_i: 0,
            b_i: 20.0,
        };
        let (p, s) = conception_probability(&traits, 0, None, 300, &theta, true);
        assert_eq!(s, IntentState::Contracepting);
        assert_relative_eq!(p, 0.04 * fecundability(25.0, 0.4, 0.2).unwrap(), epsilon = 1e-15);
    }

    #[test]
    fn parameter_validation() {
        assert!(reference_theta().validate().is_ok());
        let bad = ParameterVector {
            kappa: 1.0,
            ..reference_theta()
        };
        assert!(bad.validate().is_err());
        assert!(ParameterVector::from_slice(&[1.0; 10]).is_err());
        let round = ParameterVector::from_slice(&reference_theta().to_array()).unwrap();
        assert_eq!(round, reference_theta());
    }

    proptest! {
        #[test]
        fn lognormal_conversion_round_trips(mean in 0.1f64..200.0, sd in 0.0f64..100.0) {
            let p = lognormal_params_from_moments(mean, sd).unwrap();
            let s2 = p.sigma_ln * p.sigma_ln;
            let m = (p.mu_ln + s2 / 2.0).exp();
            let v = (s2.exp() - 1.0) * (2.0 * p.mu_ln + s2).exp();
            prop_assert!((m - mean).abs() <= 1e-9 * mean);
            prop_assert!((v - sd * sd).abs() <= 1e-9 * (mean * mean + sd * sd));
        }

        #[test]
        fn weibull_scale_equivariance(mean in 0.5f64..10.0, sd in 0.2f64..5.0, c in 0.1f64..10.0) {
            let a = weibull_params_from_moments(mean, sd).unwrap();
            let b = weibull_params_from_moments(c * mean, c * sd).unwrap();
            prop_assert!((a.alpha - b.alpha).abs() <= 1e-12 * a.alpha);
            prop_assert!((b.lambda - c * a.lambda).abs() <= 1e-10 * b.lambda);
        }

        #[test]
        fn fecundability_nonnegative(age in 10.0f64..=50.0, b1 in 0.0f64..2.0, b2 in 0.0f64..2.0) {
            let phi = fecundability(age, b1, b2).unwrap();
            prop_assert!((0.0..=1.0).contains(&phi));
        }

        #[test]
        fn conception_probability_in_unit_interval(
            x in 100.0f64..400.0, r in 100.0f64..500.0, d in 0u32..6, b in 1.0f64..80.0,
            parity in 0u32..8, gap in proptest::option::of(12u32..200), age in 120u32..600,
            kappa in 0.001f64..0.999, susceptible in any::<bool>(),
        ) {
            let theta = ParameterVector { kappa, ..reference_theta() };
            let traits = WomanTraits { x_i: x, r_i: r, d_i: d, b_i: b };
            let (p, s) = conception_probability(&traits, parity, gap, age, &theta, susceptible);
            prop_assert!((0.0..=1.0).contains(&p));
            let again = conception_probability(&traits, parity, gap, age, &theta, susceptible);
            prop_assert_eq!((p, s), again);
            // stopping lowers risk relative to the same month below target
            if s == IntentState::Contracepting && p > 0.0 && parity >= d {
                let below = WomanTraits { d_i: parity + 1, r_i: 1e9, ..traits };
                let (q, _) = conception_probability(&below, parity, gap, age, &theta, true);
                prop_assert!(p < q);
            }
        }
    }
}
