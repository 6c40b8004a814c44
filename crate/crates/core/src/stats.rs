//! Goodness-of-fit and convergence statistics.

use crate::error::{Error, Result};

/// One-sample Kolmogorov–Smirnov test result.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KsResult {
    pub statistic: f64,
    pub p_value: f64,
    pub n: usize,
}

/// One-sample KS test of `sample` against the continuous CDF `cdf`.
/// The p-value uses the asymptotic Kolmogorov distribution with the
/// usual small-sample correction of the scaled statistic.
pub fn ks_test<F: Fn(f64) -> f64>(sample: &[f64], cdf: F) -> Result<KsResult> {
    if sample.is_empty() {
        return Err(Error::Validation("KS test on an empty sample".into()));
    }
    if sample.iter().any(|x| x.is_nan()) {
        return Err(Error::Validation("KS test sample contains NaN".into()));
    }
    let mut xs = sample.to_vec();
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = xs.len() as f64;
    let mut d: f64 = 0.0;
    for (i, &x) in xs.iter().enumerate() {
        let f = cdf(x);
        d = d.max(f - i as f64 / n).max((i + 1) as f64 / n - f);
    }
    let sn = n.sqrt();
    Ok(KsResult {
        statistic: d,
        p_value: kolmogorov_survival((sn + 0.12 + 0.11 / sn) * d),
        n: xs.len(),
    })
}

/// `P(K > t)` for the Kolmogorov distribution.
pub fn kolmogorov_survival(t: f64) -> f64 {
    if t < 0.2 {
        return 1.0;
    }
    let mut s = 0.0;
    for k in 1..=100 {
        let kf = k as f64;
        let term = (-2.0 * kf * kf * t * t).exp();
        s += if k % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * s).clamp(0.0, 1.0)
}

/// Split-R̂ over chains of equal length: each chain is halved and the
/// potential scale reduction is computed on the `2m` halves.
pub fn split_rhat(chains: &[Vec<f64>]) -> Result<f64> {
    let n = chains.iter().map(|c| c.len()).min().unwrap_or(0) / 2;
    if chains.is_empty() || n < 2 {
        return Err(Error::Validation("split-Rhat needs chains with at least 4 draws".into()));
    }
    let halves: Vec<&[f64]> = chains
        .iter()
        .flat_map(|c| [&c[..n], &c[n..2 * n]])
        .collect();
    let m = halves.len() as f64;
    let nf = n as f64;
    let means: Vec<f64> = halves.iter().map(|h| h.iter().sum::<f64>() / nf).collect();
    let grand = means.iter().sum::<f64>() / m;
    let b = nf / (m - 1.0) * means.iter().map(|mu| (mu - grand).powi(2)).sum::<f64>();
    let w = halves
        .iter()
        .zip(&means)
        .map(|(h, mu)| h.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / (nf - 1.0))
        .sum::<f64>()
        / m;
    if w == 0.0 {
        return Ok(if b == 0.0 { 1.0 } else { f64::INFINITY });
    }
    let var_plus = (nf - 1.0) / nf * w + b / nf;
    Ok((var_plus / w).sqrt())
}

/// Empirical quantile with linear interpolation (type 7).
pub fn quantile(sample: &[f64], p: f64) -> f64 {
    let mut xs = sample.to_vec();
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let h = (xs.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    xs[lo] + (h - lo as f64) * (xs[hi] - xs[lo])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn kolmogorov_reference_values() {
        // Tabulated critical values of the limiting distribution.
        assert!((kolmogorov_survival(1.3581) - 0.05).abs() < 1e-4);
        assert!((kolmogorov_survival(1.6276) - 0.01).abs() < 1e-4);
        assert!((kolmogorov_survival(1.2239) - 0.10).abs() < 1e-4);
    }

    #[test]
    fn uniform_sample_passes_and_shifted_fails() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let xs: Vec<f64> = (0..5000).map(|_| rng.random::<f64>()).collect();
        let ok = ks_test(&xs, |x| x.clamp(0.0, 1.0)).unwrap();
        assert!(ok.p_value > 0.01);
        let bad = ks_test(&xs, |x| (x * x).clamp(0.0, 1.0)).unwrap();
        assert!(bad.p_value < 1e-6);
    }

    #[test]
    fn ks_statistic_by_hand() {
        let r = ks_test(&[0.5], |x| x).unwrap();
        assert!((r.statistic - 0.5).abs() < 1e-15);
        let r = ks_test(&[0.1, 0.2, 0.9], |x| x).unwrap();
        assert!((r.statistic - (2.0 / 3.0 - 0.2)).abs() < 1e-15);
    }

    #[test]
    fn rhat_identical_chains_is_near_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let chains: Vec<Vec<f64>> = (0..4).map(|_| (0..1000).map(|_| rng.random::<f64>()).collect()).collect();
        let r = split_rhat(&chains).unwrap();
        assert!((r - 1.0).abs() < 0.01);
        let shifted: Vec<Vec<f64>> = chains
            .iter()
            .enumerate()
            .map(|(i, c)| c.iter().map(|x| x + i as f64).collect())
            .collect();
        assert!(split_rhat(&shifted).unwrap() > 1.5);
    }

    #[test]
    fn quantile_interpolates() {
        assert_eq!(quantile(&[3.0, 1.0, 2.0], 0.5), 2.0);
        assert_eq!(quantile(&[1.0, 2.0], 0.25), 1.25);
    }
}
