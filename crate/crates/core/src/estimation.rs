//! Monte Carlo estimates of smoothed class probabilities and their exact
//! binomial (Clopper-Pearson) confidence bounds.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::classifiers::{BaseClassifier, Label};
use crate::error::{Error, Result};
use crate::mechanism::{apply_mask, sample_mask, RateFunction};
use crate::numeric::{ln_choose, Accumulator};
use crate::sequence::TokenSequence;

/// Significance level used when none is given.
pub const DEFAULT_ALPHA: f64 = 0.05;

/// Perturbed samples classified per call to the base classifier.
const SAMPLE_CHUNK: usize = 1024;

/// Bisection stops once the bracket is this narrow.
const CP_TOLERANCE: f64 = 1e-13;

fn check_counts(successes: u64, total: u64, alpha: f64) -> Result<()> {
    if total == 0 {
        return Err(Error::invalid("confidence bound needs at least one trial"));
    }
    if successes > total {
        return Err(Error::invalid(format!("{successes} successes out of {total} trials")));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::invalid(format!("alpha = {alpha} must lie in (0, 1)")));
    }
    Ok(())
}

/// `P(X ≥ k)` for `X ~ Binomial(n, p)` given precomputed `ln C(n, j)`.
fn survival(ln_c: &[f64], k: usize, p: f64) -> f64 {
    let n = ln_c.len() - 1;
    if p <= 0.0 {
        return if k == 0 { 1.0 } else { 0.0 };
    }
    if p >= 1.0 {
        return 1.0;
    }
    let (lp, lq) = (p.ln(), (-p).ln_1p());
    let mut acc = Accumulator::default();
    for (j, &c) in ln_c.iter().enumerate().skip(k) {
        acc.add((c + j as f64 * lp + (n - j) as f64 * lq).exp());
    }
    acc.value()
}

/// One-sided lower confidence bound on a binomial proportion: the `p` at
/// which `P(X ≥ successes)` equals `alpha`, found by bisection on the exact
/// survival function.
pub fn clopper_pearson_lb(successes: u64, total: u64, alpha: f64) -> Result<f64> {
    check_counts(successes, total, alpha)?;
    if successes == 0 {
        return Ok(0.0);
    }
    let n = total as usize;
    let k = successes as usize;
    let ln_c: Vec<f64> = (0..=n).map(|j| ln_choose(n, j)).collect();
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    while hi - lo > CP_TOLERANCE {
        let mid = 0.5 * (lo + hi);
        if survival(&ln_c, k, mid) > alpha {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(lo)
}

/// One-sided upper bound, `1 - lb(total - successes, total, alpha)`.
pub fn clopper_pearson_ub(successes: u64, total: u64, alpha: f64) -> Result<f64> {
    check_counts(successes, total, alpha)?;
    Ok(1.0 - clopper_pearson_lb(total - successes, total, alpha)?)
}

/// Class counts from one batch of perturbed samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreEstimate {
    pub class_counts: Vec<u64>,
    pub total: u64,
    pub alpha: f64,
}

impl ScoreEstimate {
    pub fn new(class_counts: Vec<u64>, alpha: f64) -> Result<Self> {
        let total = class_counts.iter().sum();
        check_counts(0, total, alpha)?;
        Ok(ScoreEstimate {
            class_counts,
            total,
            alpha,
        })
    }

    /// Most frequent class, ties broken towards the lowest label.
    pub fn plurality(&self) -> Label {
        let mut best = 0;
        for (label, &c) in self.class_counts.iter().enumerate() {
            if c > self.class_counts[best] {
                best = label;
            }
        }
        best
    }

    fn count(&self, label: Label) -> u64 {
        self.class_counts.get(label).copied().unwrap_or(0)
    }

    pub fn lower_bound(&self, label: Label) -> Result<f64> {
        clopper_pearson_lb(self.count(label), self.total, self.alpha)
    }

    pub fn upper_bound(&self, label: Label) -> Result<f64> {
        clopper_pearson_ub(self.count(label), self.total, self.alpha)
    }

    /// Largest upper bound over classes other than `label` (0 with one class).
    pub fn runner_up_upper_bound(&self, label: Label) -> Result<f64> {
        let mut best = 0.0f64;
        for other in 0..self.class_counts.len() {
            if other != label {
                best = best.max(self.upper_bound(other)?);
            }
        }
        Ok(best)
    }
}

/// Classifies `n` perturbed copies of `x` and tallies the labels.
pub fn sample_counts<R: Rng + ?Sized>(
    base: &dyn BaseClassifier,
    x: &TokenSequence,
    policy: &dyn RateFunction,
    n: u64,
    rng: &mut R,
) -> Result<Vec<u64>> {
    let rate = policy.rate(x)?;
    let mut counts = vec![0u64; base.num_classes()];
    let mut remaining = n as usize;
    let mut batch = Vec::with_capacity(remaining.min(SAMPLE_CHUNK));
    while remaining > 0 {
        let take = remaining.min(SAMPLE_CHUNK);
        batch.clear();
        for _ in 0..take {
            let mask = sample_mask(rate, x.len(), rng);
            batch.push(apply_mask(x, &mask)?);
        }
        let labels = base.classify_batch(&batch)?;
        if labels.len() != take {
            return Err(Error::Classifier(format!(
                "classifier returned {} labels for {take} inputs",
                labels.len()
            )));
        }
        for l in labels {
            let slot = counts.get_mut(l).ok_or_else(|| {
                Error::Classifier(format!("label {l} outside 0..{}", base.num_classes()))
            })?;
            *slot += 1;
        }
        remaining -= take;
    }
    Ok(counts)
}

/// Prediction of the smoothed classifier from `n_pred` samples.
pub fn predict<R: Rng + ?Sized>(
    base: &dyn BaseClassifier,
    x: &TokenSequence,
    policy: &dyn RateFunction,
    n_pred: u64,
    rng: &mut R,
) -> Result<(Label, ScoreEstimate)> {
    if n_pred == 0 {
        return Err(Error::invalid("n_pred must be positive"));
    }
    let est = ScoreEstimate::new(sample_counts(base, x, policy, n_pred, rng)?, DEFAULT_ALPHA)?;
    Ok((est.plurality(), est))
}

/// Confidence bounds from a certification batch.
#[derive(Clone, Debug, PartialEq)]
pub struct CertBounds {
    /// Lower bound on the probability of the predicted class.
    pub t1_lb: f64,
    /// Upper bound on the probability of any other class.
    pub t2_ub: f64,
    /// `false` when this batch's plurality differs from the prediction; the
    /// certificate must then abstain.
    pub agrees: bool,
    pub estimate: ScoreEstimate,
}

/// Draws a fresh batch of `n_cert` samples and bounds the class
/// probabilities. Each of the two bounds is taken at level `alpha / 2` so
/// that they hold jointly with probability `1 - alpha`.
pub fn estimate_cert_bounds<R: Rng + ?Sized>(
    base: &dyn BaseClassifier,
    x: &TokenSequence,
    policy: &dyn RateFunction,
    y1: Label,
    n_cert: u64,
    alpha: f64,
    rng: &mut R,
) -> Result<CertBounds> {
    if n_cert == 0 {
        return Err(Error::invalid("n_cert must be positive"));
    }
    let counts = sample_counts(base, x, policy, n_cert, rng)?;
    bounds_from_counts(counts, y1, alpha)
}

/// Bounds for `y1` from already-collected certification counts.
pub fn bounds_from_counts(counts: Vec<u64>, y1: Label, alpha: f64) -> Result<CertBounds> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::invalid(format!("alpha = {alpha} must lie in (0, 1)")));
    }
    let estimate = ScoreEstimate::new(counts, alpha / 2.0)?;
    Ok(CertBounds {
        t1_lb: estimate.lower_bound(y1)?,
        t2_ub: estimate.runner_up_upper_bound(y1)?,
        agrees: estimate.plurality() == y1,
        estimate,
    })
}
