use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::prng::{derive_seed, rademacher_fill, stream_seed};

/// Continuous randomized gradient estimate
///
/// `ĝ = 1/|T| Σ_(s, seed) ∈ T (ℓ(θ + μξ; s) − ℓ(θ; s)) / μ · ξ`,
///
/// with `ξ = rademacher_fill(seed, d)`, accumulated in the order of `terms`.
pub fn rge(
    theta: &[f64],
    terms: &[(usize, u32)],
    mu: f64,
    mut loss: impl FnMut(&[f64], usize) -> f64,
) -> Result<Vec<f64>> {
    let d = theta.len();
    let mut g = vec![0.0; d];
    let mut tp = vec![0.0; d];
    let k = terms.len() as f64;
    for &(s, seed) in terms {
        let xi = rademacher_fill(seed, d)?;
        for ((p, &t), &x) in tp.iter_mut().zip(theta).zip(&xi) {
            *p = t + mu * x as f64;
        }
        let coef = (loss(&tp, s) - loss(theta, s)) / mu / k;
        for (gi, &x) in g.iter_mut().zip(&xi) {
            *gi += coef * x as f64;
        }
    }
    Ok(g)
}

/// How samples pair with perturbation directions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sampling {
    /// `N` samples reused by every query, each term with its own `ξ_{q,n}`.
    PerSample,
    /// A fresh sample for every one of the `N·Q` terms.
    IndependentTerms,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VarianceSetup {
    pub d: usize,
    pub n: usize,
    pub q: usize,
    pub mu: f64,
    /// Squared norm of the true gradient.
    pub s: f64,
    /// Per-coordinate standard deviation of per-sample gradients.
    pub sigma: f64,
    pub trials: usize,
    pub seed: u32,
    pub sampling: Sampling,
}

/// Empirical MSE of the estimator against its closed-form terms.
#[derive(Debug, Clone, PartialEq)]
pub struct VarianceReport {
    pub d: usize,
    pub n: usize,
    pub q: usize,
    pub trials: usize,
    pub s: f64,
    pub v: f64,
    pub empirical: f64,
    /// `(d − 1)/(NQ) · S`.
    pub term_s: f64,
    /// `d/(NQ) · V`.
    pub term_v: f64,
    /// `(d − 1 + Q)/(NQ) · V`, the noise term when samples are reused
    /// across queries.
    pub term_v_shared: f64,
    /// Relative deviation from `term_s + term_v`.
    pub rel_dev: f64,
    /// Relative deviation from the prediction matching `sampling`.
    pub rel_dev_exact: f64,
}

impl VarianceReport {
    pub const CSV_HEADER: &'static str =
        "d,n,q,trials,s,v,empirical,term_s,term_v,term_v_shared,rel_dev,rel_dev_exact";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            self.d,
            self.n,
            self.q,
            self.trials,
            self.s,
            self.v,
            self.empirical,
            self.term_s,
            self.term_v,
            self.term_v_shared,
            self.rel_dev,
            self.rel_dev_exact
        )
    }
}

/// Monte-Carlo MSE of [`rge`] on the quadratic family
/// `ℓ(θ; c) = ½‖θ − c‖²`, `c ~ N(m, σ² I)`, so that `∇ℒ = θ − m`,
/// `S = ‖θ − m‖²` and `V = dσ²`.
pub fn variance_report(setup: &VarianceSetup) -> Result<VarianceReport> {
    let VarianceSetup {
        d,
        n,
        q,
        mu,
        s,
        sigma,
        trials,
        seed,
        sampling,
    } = *setup;
    if d == 0 || n == 0 || q == 0 || trials == 0 || mu.is_nan() || mu <= 0.0 || s < 0.0 || sigma < 0.0 {
        return Err(Error::InvalidArgument("invalid variance setup".into()));
    }
    if seed == 0 {
        return Err(Error::ZeroSeed);
    }
    // θ − m spread evenly over coordinates with alternating signs
    let r = (s / d as f64).sqrt();
    let theta: Vec<f64> = (0..d).map(|i| if i % 2 == 0 { r } else { -r }).collect();
    let grad = theta.clone();
    let samples = match sampling {
        Sampling::PerSample => n,
        Sampling::IndependentTerms => n * q,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed as u64);
    let mut centres = vec![vec![0.0; d]; samples];
    let mut terms = Vec::with_capacity(n * q);
    let mut total = 0.0;
    for t in 0..trials {
        for c in centres.iter_mut() {
            for v in c.iter_mut() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *v = sigma * z;
            }
        }
        let base = stream_seed(seed, t as u64);
        terms.clear();
        for qi in 0..q {
            for k in 0..n {
                let sample = match sampling {
                    Sampling::PerSample => k,
                    Sampling::IndependentTerms => qi * n + k,
                };
                terms.push((sample, derive_seed(base, 0, qi, k)));
            }
        }
        let g = rge(&theta, &terms, mu, |p, k| {
            0.5 * p
                .iter()
                .zip(&centres[k])
                .map(|(a, c)| (a - c) * (a - c))
                .sum::<f64>()
        })?;
        total += g.iter().zip(&grad).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    }
    let empirical = total / trials as f64;
    let v = d as f64 * sigma * sigma;
    let nq = (n * q) as f64;
    let term_s = (d as f64 - 1.0) / nq * s;
    let term_v = d as f64 / nq * v;
    let term_v_shared = (d as f64 - 1.0 + q as f64) / nq * v;
    let exact = match sampling {
        Sampling::PerSample => term_s + term_v_shared,
        Sampling::IndependentTerms => term_s + term_v,
    };
    let rel = |pred: f64| {
        if pred > 0.0 {
            (empirical - pred).abs() / pred
        } else {
            empirical
        }
    };
    Ok(VarianceReport {
        d,
        n,
        q,
        trials,
        s,
        v,
        empirical,
        term_s,
        term_v,
        term_v_shared,
        rel_dev: rel(term_s + term_v),
        rel_dev_exact: rel(exact),
    })
}
