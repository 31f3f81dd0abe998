//! Chain and fit diagnostics: effective sample size, efficiency scores,
//! error and coverage metrics, credible bands, stationarity checks and the
//! machine-readable fit report.

use crate::error::{Error, Result};
use serde::Serialize;

/// Effective sample size of a scalar chain.
///
/// Uses the initial positive sequence estimator with the monotone
/// correction: autocorrelations are summed in consecutive pairs until a pair
/// turns non-positive, the pair sums are forced non-increasing, and
/// `ESS = N / (1 + 2 Σ ρ̂_k)` is clipped to `(0, N]`.
pub fn ess(chain: &[f64]) -> Result<f64> {
    let n = chain.len();
    if n < 10 {
        return Err(Error::ChainTooShort { minimum: 10 });
    }
    if chain.iter().any(|v| !v.is_finite()) {
        return Err(Error::DegenerateChain);
    }
    let nf = n as f64;
    let mean = chain.iter().sum::<f64>() / nf;
    let gamma0: f64 = chain.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / nf;
    if gamma0 <= 0.0 || !gamma0.is_finite() {
        return Err(Error::DegenerateChain);
    }
    let rho = |k: usize| -> f64 {
        let mut acc = 0.0;
        for t in 0..n - k {
            acc += (chain[t] - mean) * (chain[t + k] - mean);
        }
        acc / nf / gamma0
    };

    // pair sums P_j = ρ_{2j} + ρ_{2j+1}, kept while positive, forced monotone
    let mut pair_sums: Vec<f64> = Vec::new();
    let mut j = 0;
    loop {
        let k0 = 2 * j;
        let k1 = 2 * j + 1;
        if k1 >= n - 1 {
            break;
        }
        let p = rho(k0) + rho(k1);
        if p <= 0.0 {
            break;
        }
        pair_sums.push(p);
        j += 1;
    }
    let mut running = f64::INFINITY;
    let mut tau = -1.0;
    for p in &pair_sums {
        running = running.min(*p);
        tau += 2.0 * running;
    }
    if tau < 1.0 / nf {
        tau = 1.0 / nf;
    }
    Ok((nf / tau).min(nf))
}

/// Overall efficiency score: effective sample size per unit of time.
pub fn oes(ess: f64, cpu_minutes: f64) -> f64 {
    ess / cpu_minutes
}

/// Mean absolute error between an estimate and the noiseless truth.
pub fn mae(estimate: &[f64], truth: &[f64]) -> Result<f64> {
    if estimate.len() != truth.len() || estimate.is_empty() {
        return Err(Error::DimensionMismatch {
            expected: truth.len(),
            actual: estimate.len(),
        });
    }
    Ok(estimate
        .iter()
        .zip(truth)
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
        / estimate.len() as f64)
}

/// Empirical coverage: the fraction of truth values inside the bands.
pub fn ec(lo: &[f64], hi: &[f64], truth: &[f64]) -> Result<f64> {
    if lo.len() != truth.len() || hi.len() != truth.len() || truth.is_empty() {
        return Err(Error::DimensionMismatch {
            expected: truth.len(),
            actual: lo.len(),
        });
    }
    let inside = truth
        .iter()
        .enumerate()
        .filter(|(i, t)| lo[*i] <= **t && **t <= hi[*i])
        .count();
    Ok(inside as f64 / truth.len() as f64)
}

/// Empirical quantile with linear interpolation between order statistics.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = q * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    if lo == hi {
        sorted[lo]
    } else {
        let w = pos - lo as f64;
        sorted[lo] * (1.0 - w) + sorted[hi] * w
    }
}

/// Per-coordinate empirical credible band at the given level.
///
/// `samples` is a list of kept draws, each a vector over coordinates.
pub fn credible_band(samples: &[Vec<f64>], level: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    if samples.is_empty() {
        return Err(Error::ChainTooShort { minimum: 1 });
    }
    if !(0.0 < level && level < 1.0) {
        return Err(Error::Config(format!(
            "band level must be in (0,1), got {level}"
        )));
    }
    let dim = samples[0].len();
    let tail = (1.0 - level) / 2.0;
    let mut lo = vec![0.0; dim];
    let mut hi = vec![0.0; dim];
    let mut buf = vec![0.0; samples.len()];
    for d in 0..dim {
        for (t, s) in samples.iter().enumerate() {
            buf[t] = s[d];
        }
        buf.sort_by(|a, b| a.total_cmp(b));
        lo[d] = quantile(&buf, tail);
        hi[d] = quantile(&buf, 1.0 - tail);
    }
    Ok((lo, hi))
}

/// Per-coordinate posterior mean of kept draws.
pub fn posterior_mean(samples: &[Vec<f64>]) -> Vec<f64> {
    if samples.is_empty() {
        return Vec::new();
    }
    let dim = samples[0].len();
    let mut out = vec![0.0; dim];
    for s in samples {
        for d in 0..dim {
            out[d] += s[d];
        }
    }
    let nf = samples.len() as f64;
    for v in &mut out {
        *v /= nf;
    }
    out
}

/// Geweke-style stationarity score: the difference of the early and late
/// segment means in units of their combined standard error, with the
/// effective sample size correcting for autocorrelation.
pub fn geweke_z(chain: &[f64], first: f64, last: f64) -> Result<f64> {
    let n = chain.len();
    if n < 20 {
        return Err(Error::ChainTooShort { minimum: 20 });
    }
    let a = &chain[..(first * n as f64) as usize];
    let b = &chain[n - (last * n as f64) as usize..];
    let seg_stats = |seg: &[f64]| -> Result<(f64, f64)> {
        let m = seg.iter().sum::<f64>() / seg.len() as f64;
        let var = seg.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (seg.len() as f64 - 1.0);
        let neff = ess(seg)?;
        Ok((m, var / neff))
    };
    let (ma, va) = seg_stats(a)?;
    let (mb, vb) = seg_stats(b)?;
    if va + vb <= 0.0 {
        return Err(Error::DegenerateChain);
    }
    Ok((ma - mb) / (va + vb).sqrt())
}

/// Fraction of coordinate chains failing the Geweke check at `|z| > 3`;
/// degenerate (stuck) coordinates count as failures.
pub fn geweke_failure_fraction(coord_chains: &[Vec<f64>]) -> f64 {
    if coord_chains.is_empty() {
        return 0.0;
    }
    let failures = coord_chains
        .iter()
        .filter(|c| match geweke_z(c, 0.1, 0.5) {
            Ok(z) => z.abs() > 3.0,
            Err(_) => true,
        })
        .count();
    failures as f64 / coord_chains.len() as f64
}

/// Standard normal CDF through an Abramowitz-Stegun style erf approximation
/// (absolute error below 1.5e-7, ample for the tail tests here).
pub fn normal_cdf(x: f64, mean: f64, sd: f64) -> f64 {
    let z = (x - mean) / (sd * std::f64::consts::SQRT_2);
    0.5 * (1.0 + erf(z))
}

fn erf(x: f64) -> f64 {
    let sign = if x < 0.0 { -1.0 } else { 1.0 };
    let x = x.abs();
    let t = 1.0 / (1.0 + 0.3275911 * x);
    let poly = t
        * (0.254829592
            + t * (-0.284496736 + t * (1.421413741 + t * (-1.453152027 + t * 1.061405429))));
    sign * (1.0 - poly * (-x * x).exp())
}

/// One-sample Kolmogorov-Smirnov test against `N(mean, sd²)`.
///
/// Returns the statistic and the asymptotic p-value
/// `Q(√n·D) = 2 Σ (−1)^{k−1} e^{−2k²λ²}`.
pub fn ks_test_normal(samples: &[f64], mean: f64, sd: f64) -> Result<(f64, f64)> {
    let n = samples.len();
    if n < 10 {
        return Err(Error::ChainTooShort { minimum: 10 });
    }
    let mut xs = samples.to_vec();
    xs.sort_by(|a, b| a.total_cmp(b));
    let nf = n as f64;
    let mut d = 0.0f64;
    for (i, x) in xs.iter().enumerate() {
        let f = normal_cdf(*x, mean, sd);
        d = d.max((f - i as f64 / nf).abs());
        d = d.max(((i + 1) as f64 / nf - f).abs());
    }
    Ok((d, ks_pvalue(nf.sqrt() * d)))
}

/// One-sample Kolmogorov-Smirnov test for autocorrelated (MCMC) output:
/// the statistic is computed on the full series, but the p-value uses the
/// effective sample size so that dependence does not inflate rejections.
pub fn ks_test_normal_ess(samples: &[f64], mean: f64, sd: f64) -> Result<(f64, f64)> {
    let (d, _) = ks_test_normal(samples, mean, sd)?;
    let neff = ess(samples)?.min(samples.len() as f64);
    Ok((d, ks_pvalue(neff.sqrt() * d)))
}

/// Two-sample Kolmogorov-Smirnov test.
pub fn ks_test_two_sample(a: &[f64], b: &[f64]) -> Result<(f64, f64)> {
    if a.len() < 10 || b.len() < 10 {
        return Err(Error::ChainTooShort { minimum: 10 });
    }
    let mut xs = a.to_vec();
    let mut ys = b.to_vec();
    xs.sort_by(|u, v| u.total_cmp(v));
    ys.sort_by(|u, v| u.total_cmp(v));
    let (na, nb) = (xs.len() as f64, ys.len() as f64);
    let mut d = 0.0f64;
    let (mut i, mut j) = (0usize, 0usize);
    while i < xs.len() && j < ys.len() {
        if xs[i] <= ys[j] {
            i += 1;
        } else {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    let neff = (na * nb / (na + nb)).sqrt();
    Ok((d, ks_pvalue(neff * d)))
}

fn ks_pvalue(lambda: f64) -> f64 {
    if lambda <= 0.0 {
        return 1.0;
    }
    let mut p = 0.0;
    for k in 1..101 {
        let kf = k as f64;
        let term = 2.0 * (-1.0f64).powi(k as i32 - 1) * (-2.0 * kf * kf * lambda * lambda).exp();
        p += term;
        if term.abs() < 1e-12 {
            break;
        }
    }
    p.clamp(0.0, 1.0)
}

/// Per-parameter effective sample sizes reported in a fit.
#[derive(Debug, Clone, Serialize)]
pub struct EssSummary {
    pub log_lambda: Option<f64>,
    pub log_sigma2: Option<f64>,
    /// Minimum across latent-field coordinates.
    pub z_min: Option<f64>,
    /// Minimum across log length-scale coordinates.
    pub u_min: Option<f64>,
}

/// Wall-clock split of a run, in minutes, plus the derived efficiency
/// scores. These fields are the only run outputs that are not reproducible
/// bit-for-bit under a fixed seed.
#[derive(Debug, Clone, Serialize)]
pub struct TimingReport {
    pub burned_minutes: f64,
    pub sampling_minutes: f64,
    pub total_minutes: f64,
    /// OES per parameter, ESS / total CPU minutes.
    pub oes_log_lambda: Option<f64>,
    pub oes_log_sigma2: Option<f64>,
    pub oes_z_min: Option<f64>,
    pub oes_u_min: Option<f64>,
}

/// Machine-readable summary of one fitted chain.
#[derive(Debug, Clone, Serialize)]
pub struct FitReport {
    pub ess: EssSummary,
    /// Mean absolute error at observation locations, when truth is known.
    pub mae: Option<f64>,
    /// Coverage of the 95% bands at observation locations.
    pub ec_obs: Option<f64>,
    /// Coverage of the 95% bands at grid locations, when grid truth is known.
    pub ec_grid: Option<f64>,
    pub posterior_mean_z: Vec<f64>,
    pub band_z_lo: Vec<f64>,
    pub band_z_hi: Vec<f64>,
    pub posterior_mean_ell: Vec<f64>,
    pub band_ell_lo: Vec<f64>,
    pub band_ell_hi: Vec<f64>,
    pub timing: TimingReport,
}
