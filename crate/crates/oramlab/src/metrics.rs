//! Run accounting and the statistical obliviousness checks.
//!
//! The chi-square machinery is self-contained: the p-value comes from the
//! regularized incomplete gamma function implemented below (series for
//! `x < a + 1`, continued fraction otherwise), validated against tabulated
//! chi-square critical values and closed-form special cases.

use std::collections::BTreeMap;

use crate::error::{OramError, Result};
use crate::tree::LeafId;

/// Monotone run counters plus the stash-occupancy timeline.
/// `blocks_transferred` counts slots moved in either direction: every path
/// fetch moves the full path down and back up, dummies included.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Counters {
    pub real_accesses: u64,
    pub real_path_reads: u64,
    pub dummy_reads: u64,
    pub blocks_transferred: u64,
    pub stash_peak: u64,
    /// `(step, stash occupancy)` recorded after every served request.
    pub stash_timeline: Vec<(u64, u64)>,
}

impl Counters {
    pub fn bytes_transferred(&self, block_size: usize) -> u64 {
        self.blocks_transferred * block_size as u64
    }
}

/// Dummy path reads per served request.
pub fn dummy_read_ratio(counters: &Counters) -> Result<f64> {
    if counters.real_accesses == 0 {
        return Err(OramError::MetricUndefined(
            "dummy read ratio needs at least one real access".into(),
        ));
    }
    Ok(counters.dummy_reads as f64 / counters.real_accesses as f64)
}

/// How much less the candidate moved than the baseline, as
/// `baseline.blocks_transferred / candidate.blocks_transferred`.
/// Both runs must have served the same number of requests.
pub fn traffic_reduction(baseline: &Counters, candidate: &Counters) -> Result<f64> {
    if baseline.real_accesses != candidate.real_accesses {
        return Err(OramError::MetricUndefined(format!(
            "traffic comparison across different workloads: {} vs {} accesses",
            baseline.real_accesses, candidate.real_accesses
        )));
    }
    if candidate.blocks_transferred == 0 {
        return Err(OramError::MetricUndefined(
            "candidate moved no blocks".into(),
        ));
    }
    Ok(baseline.blocks_transferred as f64 / candidate.blocks_transferred as f64)
}

/// Closed-form traffic model for superblock size `s` on bucket width `z`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrafficBounds {
    /// Best-case reduction on a normal tree: one path fetch serves `s`
    /// requests.
    pub normal_bound: f64,
    /// Best-case reduction on a fat tree, discounted by the wider paths.
    pub fat_bound: f64,
    /// Per-access transfer of the fat tree relative to the normal tree.
    pub fat_per_access_factor: f64,
}

pub fn theoretical_bounds(z: u64, s: u64) -> Result<TrafficBounds> {
    if z == 0 || s == 0 {
        return Err(OramError::InvalidParameter(
            "traffic bounds need positive bucket and superblock sizes".into(),
        ));
    }
    let zf = z as f64;
    let sf = s as f64;
    let fat_per_access_factor = (3.0 * zf + 1.0) / (2.0 * (zf + 1.0));
    Ok(TrafficBounds {
        normal_bound: sf,
        fat_bound: 2.0 * (zf + 1.0) / (3.0 * zf + 1.0) * sf,
        fat_per_access_factor,
    })
}

/// Pearson goodness-of-fit result.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChiSquare {
    pub statistic: f64,
    pub p_value: f64,
}

/// Pearson chi-square test of `histogram` against the uniform distribution
/// over its cells, `k - 1` degrees of freedom. Requires at least two cells
/// and five expected counts per cell.
pub fn chi_square_uniformity(histogram: &[u64]) -> Result<ChiSquare> {
    let k = histogram.len();
    if k < 2 {
        return Err(OramError::InvalidParameter(
            "uniformity test needs at least two cells".into(),
        ));
    }
    let n: u64 = histogram.iter().sum();
    let needed = 5 * k as u64;
    if n < needed {
        return Err(OramError::InsufficientSamples {
            needed,
            got: n,
            cells: k,
        });
    }
    let expected = n as f64 / k as f64;
    let statistic: f64 = histogram
        .iter()
        .map(|&observed| {
            let d = observed as f64 - expected;
            d * d / expected
        })
        .sum();
    let df = (k - 1) as f64;
    Ok(ChiSquare {
        statistic,
        p_value: chi_square_p_value(statistic, df),
    })
}

/// Two-sample chi-square homogeneity test over the leaves fetched by two
/// equal-length runs: do both logs draw from the same leaf distribution?
/// Returns the p-value; identical logs give exactly 1.
pub fn two_sample_leaf_test(log_a: &[LeafId], log_b: &[LeafId]) -> Result<f64> {
    if log_a.len() != log_b.len() {
        return Err(OramError::LogLengthMismatch {
            a: log_a.len(),
            b: log_b.len(),
        });
    }
    if log_a.is_empty() {
        return Err(OramError::MetricUndefined("empty leaf logs".into()));
    }
    let mut cells: BTreeMap<LeafId, (u64, u64)> = BTreeMap::new();
    for &leaf in log_a {
        cells.entry(leaf).or_default().0 += 1;
    }
    for &leaf in log_b {
        cells.entry(leaf).or_default().1 += 1;
    }
    if cells.len() < 2 {
        // Both logs visit one shared leaf; no divergence is observable.
        return Ok(1.0);
    }
    let n = log_a.len() as f64;
    let total = 2.0 * n;
    let mut statistic = 0.0;
    for &(a, b) in cells.values() {
        let pooled = (a + b) as f64;
        // Equal sample sizes: expected count is half the pooled mass.
        let expected = pooled * n / total;
        let da = a as f64 - expected;
        let db = b as f64 - expected;
        statistic += da * da / expected + db * db / expected;
    }
    let df = (cells.len() - 1) as f64;
    Ok(chi_square_p_value(statistic, df))
}

/// Upper-tail probability of the chi-square distribution:
/// `Q(df/2, x/2)` through the regularized incomplete gamma function.
pub fn chi_square_p_value(statistic: f64, df: f64) -> f64 {
    assert!(df > 0.0, "degrees of freedom must be positive");
    assert!(statistic >= 0.0, "chi-square statistic cannot be negative");
    upper_regularized_gamma(df / 2.0, statistic / 2.0)
}

/// Regularized lower incomplete gamma P(a, x).
pub fn lower_regularized_gamma(a: f64, x: f64) -> f64 {
    assert!(a > 0.0 && x >= 0.0);
    if x == 0.0 {
        return 0.0;
    }
    // Series converges fast left of the mean, the continued fraction right of
    // it; a + 1 is the usual crossover.
    if x < a + 1.0 {
        gamma_series(a, x)
    } else {
        1.0 - gamma_continued_fraction(a, x)
    }
}

/// Regularized upper incomplete gamma Q(a, x) = 1 - P(a, x).
pub fn upper_regularized_gamma(a: f64, x: f64) -> f64 {
    assert!(a > 0.0 && x >= 0.0);
    if x == 0.0 {
        return 1.0;
    }
    if x < a + 1.0 {
        1.0 - gamma_series(a, x)
    } else {
        gamma_continued_fraction(a, x)
    }
}

const GAMMA_EPS: f64 = 1e-15;
const GAMMA_MAX_ITER: usize = 1_000;

/// P(a, x) by the power series around zero.
fn gamma_series(a: f64, x: f64) -> f64 {
    let mut term = 1.0 / a;
    let mut sum = term;
    let mut ap = a;
    for _ in 0..GAMMA_MAX_ITER {
        ap += 1.0;
        term *= x / ap;
        sum += term;
        if term.abs() < sum.abs() * GAMMA_EPS {
            break;
        }
    }
    let log_prefactor = a * x.ln() - x - ln_gamma(a);
    (sum * log_prefactor.exp()).clamp(0.0, 1.0)
}

/// Q(a, x) by the Lentz-evaluated continued fraction.
fn gamma_continued_fraction(a: f64, x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    let mut b = x + 1.0 - a;
    let mut c = 1.0 / TINY;
    let mut d = 1.0 / b;
    let mut h = d;
    for i in 1..=GAMMA_MAX_ITER {
        let an = -(i as f64) * (i as f64 - a);
        b += 2.0;
        d = an * d + b;
        if d.abs() < TINY {
            d = TINY;
        }
        c = b + an / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let delta = d * c;
        h *= delta;
        if (delta - 1.0).abs() < GAMMA_EPS {
            break;
        }
    }
    let log_prefactor = a * x.ln() - x - ln_gamma(a);
    ((log_prefactor.exp()) * h).clamp(0.0, 1.0)
}

/// Natural log of the gamma function, Lanczos approximation (g = 7, n = 9).
pub fn ln_gamma(z: f64) -> f64 {
    const COEFFS: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if z < 0.5 {
        // Reflection for the left half plane.
        return std::f64::consts::PI.ln()
            - (std::f64::consts::PI * z).sin().ln()
            - ln_gamma(1.0 - z);
    }
    let z = z - 1.0;
    let mut x = COEFFS[0];
    for (i, &c) in COEFFS.iter().enumerate().skip(1) {
        x += c / (z + i as f64);
    }
    let t = z + 7.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (z + 0.5) * t.ln() - t + x.ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::LeafStream;

    #[test]
    fn ln_gamma_known_values() {
        // Gamma(0.5) = sqrt(pi), Gamma(1) = Gamma(2) = 1, Gamma(5) = 24.
        assert!((ln_gamma(0.5) - 0.5 * std::f64::consts::PI.ln()).abs() < 1e-12);
        assert!(ln_gamma(1.0).abs() < 1e-12);
        assert!(ln_gamma(2.0).abs() < 1e-12);
        assert!((ln_gamma(5.0) - 24.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn incomplete_gamma_closed_forms() {
        // P(1, x) = 1 - exp(-x).
        for &x in &[0.1f64, 0.5, 1.0, 3.0, 10.0] {
            let expect = 1.0 - (-x).exp();
            assert!(
                (lower_regularized_gamma(1.0, x) - expect).abs() < 1e-10,
                "x={x}"
            );
        }
        // P(3, 2) = 1 - e^-2 (1 + 2 + 2) = 0.3233235838...
        assert!((lower_regularized_gamma(3.0, 2.0) - 0.323_323_583_816_936_5).abs() < 1e-10);
        // P(0.5, 1) = erf(1).
        assert!((lower_regularized_gamma(0.5, 1.0) - 0.842_700_792_949_714_9).abs() < 1e-8);
        // P + Q = 1 across the series/continued-fraction switch.
        for &a in &[0.5, 1.0, 2.5, 7.0, 40.0] {
            for &x in &[0.01, a, a + 0.999, a + 1.001, 4.0 * a + 10.0] {
                let p = lower_regularized_gamma(a, x);
                let q = upper_regularized_gamma(a, x);
                assert!((p + q - 1.0).abs() < 1e-10, "a={a} x={x}");
                assert!((0.0..=1.0).contains(&p));
            }
        }
    }

    #[test]
    fn chi_square_critical_values() {
        // Tabulated 5% critical points: df 1 -> 3.841, df 2 -> 5.991,
        // df 4 -> 9.488. The df 2 case is exactly -2 ln 0.05.
        assert!((chi_square_p_value(3.841_458_820_694_124, 1.0) - 0.05).abs() < 1e-9);
        assert!((chi_square_p_value(3.841, 1.0) - 0.05).abs() < 5e-4);
        let exact_df2 = 2.0 * 20.0f64.ln();
        assert!((chi_square_p_value(exact_df2, 2.0) - 0.05).abs() < 1e-12);
        assert!((chi_square_p_value(9.487_729_036_781_154, 4.0) - 0.05).abs() < 1e-9);
        // 1% point for df 1.
        assert!((chi_square_p_value(6.634_896_601_021_213, 1.0) - 0.01).abs() < 1e-9);
    }

    #[test]
    fn uniformity_equal_counts_is_certain() {
        let result = chi_square_uniformity(&[250, 250, 250, 250]).unwrap();
        assert_eq!(result.statistic, 0.0);
        assert_eq!(result.p_value, 1.0);
    }

    #[test]
    fn uniformity_one_hot_rejected() {
        let result = chi_square_uniformity(&[1000, 0, 0, 0]).unwrap();
        assert!((result.statistic - 3000.0).abs() < 1e-9);
        assert!(result.p_value < 1e-12);
    }

    #[test]
    fn uniformity_preconditions() {
        assert!(matches!(
            chi_square_uniformity(&[100]),
            Err(OramError::InvalidParameter(_))
        ));
        assert!(matches!(
            chi_square_uniformity(&[3, 3, 3, 3]),
            Err(OramError::InsufficientSamples { .. })
        ));
    }

    #[test]
    fn uniformity_calibration_on_seeded_uniform_draws() {
        // 20 seeded uniform histograms over 256 cells; the test should accept
        // nearly all of them at the 1% level, and the p-values should spread
        // rather than pile at the extremes.
        let cells = 256u64;
        let draws = 100_000;
        let mut passes = 0;
        let mut p_values = Vec::new();
        for seed in 0..20 {
            let mut stream = LeafStream::new(seed, cells);
            let mut hist = vec![0u64; cells as usize];
            for _ in 0..draws {
                hist[stream.next_leaf() as usize] += 1;
            }
            let result = chi_square_uniformity(&hist).unwrap();
            p_values.push(result.p_value);
            if result.p_value > 0.01 {
                passes += 1;
            }
        }
        assert!(passes >= 19, "{passes}/20 passed, p values {p_values:?}");
        assert!(p_values.iter().any(|&p| p < 0.9));
    }

    #[test]
    fn two_sample_self_comparison_is_certain() {
        let log: Vec<u64> = (0..64).cycle().take(1000).collect();
        assert_eq!(two_sample_leaf_test(&log, &log).unwrap(), 1.0);
    }

    #[test]
    fn two_sample_disjoint_logs_rejected() {
        let a = vec![0u64; 1000];
        let b = vec![1u64; 1000];
        let p = two_sample_leaf_test(&a, &b).unwrap();
        assert!(p < 1e-12);
    }

    #[test]
    fn two_sample_matched_uniform_logs_accepted() {
        let mut s1 = LeafStream::new(5, 128);
        let mut s2 = LeafStream::new(6, 128);
        let a: Vec<u64> = (0..20_000).map(|_| s1.next_leaf()).collect();
        let b: Vec<u64> = (0..20_000).map(|_| s2.next_leaf()).collect();
        let p = two_sample_leaf_test(&a, &b).unwrap();
        assert!(p > 0.01, "p = {p}");
    }

    #[test]
    fn two_sample_length_mismatch_rejected() {
        assert!(matches!(
            two_sample_leaf_test(&[1, 2], &[1]),
            Err(OramError::LogLengthMismatch { .. })
        ));
    }

    #[test]
    fn bounds_formulas() {
        let b = theoretical_bounds(4, 8).unwrap();
        assert_eq!(b.normal_bound, 8.0);
        assert!((b.fat_bound - 80.0 / 13.0).abs() < 1e-12);
        assert!((b.fat_per_access_factor - 1.3).abs() < 1e-12);
        let b2 = theoretical_bounds(4, 2).unwrap();
        assert_eq!(b2.normal_bound, 2.0);
        assert!((b2.fat_bound - 20.0 / 13.0).abs() < 1e-12);
        assert!(theoretical_bounds(0, 2).is_err());
        assert!(theoretical_bounds(4, 0).is_err());
    }

    #[test]
    fn ratio_metrics() {
        let base = Counters {
            real_accesses: 100,
            blocks_transferred: 8800,
            dummy_reads: 10,
            ..Counters::default()
        };
        assert!((dummy_read_ratio(&base).unwrap() - 0.1).abs() < 1e-12);

        let mut cand = Counters {
            real_accesses: 100,
            blocks_transferred: 4400,
            ..Counters::default()
        };
        assert!((traffic_reduction(&base, &cand).unwrap() - 2.0).abs() < 1e-12);

        cand.real_accesses = 50;
        assert!(traffic_reduction(&base, &cand).is_err());
        assert!(dummy_read_ratio(&Counters::default()).is_err());
    }
}
