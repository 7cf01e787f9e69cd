//! Ground truth for small inputs: exact smoothed probabilities by summing over
//! every deletion mask, and exhaustive checks of the pairwise bounds.

use std::io::Write;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bounds::{pairwise_lb, pairwise_ub, BoundInputs, PairwiseGeometry};
use crate::classifiers::{sequence_hash, BaseClassifier, Label};
use crate::error::{Error, Result};
use crate::mechanism::{apply_mask, mask_pmf_counts, DeletionMask, RateFn, RateFunction};
use crate::numeric::compensated_sum;
use crate::seeding::{stream, Substream};
use crate::sequence::{enumerate_ball_levels, lcs_length, EditOps, TokenSequence, Vocabulary, DEFAULT_BALL_CAP};

/// Longest input whose masks are enumerated.
pub const MAX_EXACT_LENGTH: usize = 22;

/// Bounds may undershoot or overshoot the exact value by this much before a
/// check counts as a violation.
pub const NUMERICAL_SLACK: f64 = 1e-10;

/// Exact class probabilities of the smoothed classifier at one input.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExactScores {
    pub probs: Vec<f64>,
    pub rate: f64,
}

/// Base-classifier labels of every perturbation of `x`, indexed by mask
/// code (bit `i` set = token `i` retained). Lets the exact scores be
/// re-evaluated at many rates for the cost of one pass over the classifier.
#[derive(Clone, Debug)]
pub struct MaskLabels {
    len: usize,
    num_classes: usize,
    labels: Vec<Label>,
}

impl MaskLabels {
    pub fn new(base: &dyn BaseClassifier, x: &TokenSequence) -> Result<Self> {
        if x.len() > MAX_EXACT_LENGTH {
            return Err(Error::BudgetExceeded {
                what: format!("exact enumeration of 2^{} masks", x.len()),
                limit: MAX_EXACT_LENGTH,
            });
        }
        let perturbed = (0..1u64 << x.len())
            .map(|code| apply_mask(x, &DeletionMask::from_code(code, x.len())))
            .collect::<Result<Vec<_>>>()?;
        let labels = base.classify_batch(&perturbed)?;
        let num_classes = base.num_classes();
        if labels.len() != perturbed.len() || labels.iter().any(|&l| l >= num_classes) {
            return Err(Error::Classifier("classifier returned malformed labels".into()));
        }
        Ok(MaskLabels {
            len: x.len(),
            num_classes,
            labels,
        })
    }

    pub fn scores(&self, rate: f64) -> ExactScores {
        // group mask probabilities by (class, retained count) before summing
        let mut per_class = vec![vec![0u64; self.len + 1]; self.num_classes];
        for (code, &label) in self.labels.iter().enumerate() {
            per_class[label][(code as u64).count_ones() as usize] += 1;
        }
        let probs = per_class
            .iter()
            .map(|counts| {
                compensated_sum(counts.iter().enumerate().map(|(kept, &m)| {
                    m as f64 * mask_pmf_counts(self.len - kept, kept, rate)
                }))
            })
            .collect();
        ExactScores { probs, rate }
    }
}

/// `p_y(x) = Σ_ε q(ε | x) 1[f(apply(x, ε)) = y]` for every class `y`.
pub fn exact_smoothed_scores(base: &dyn BaseClassifier, x: &TokenSequence, rate: f64) -> Result<ExactScores> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::invalid(format!("rate = {rate} is not a probability")));
    }
    Ok(MaskLabels::new(base, x)?.scores(rate))
}

/// A random label table over all sequences, materialized lazily by hashing.
///
/// With probability `bias` a sequence gets the favoured class 0; otherwise a
/// uniformly chosen other class. High bias gives the large smoothed
/// probabilities for which the bounds are non-trivial.
#[derive(Clone, Debug)]
pub struct RandomTableClassifier {
    seed: u64,
    num_classes: usize,
    bias: f64,
}

impl RandomTableClassifier {
    pub fn new(seed: u64, num_classes: usize, bias: f64) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::invalid("a random table needs at least two classes"));
        }
        if !(0.0..=1.0).contains(&bias) {
            return Err(Error::invalid(format!("bias = {bias} is not a probability")));
        }
        Ok(RandomTableClassifier {
            seed,
            num_classes,
            bias,
        })
    }

    fn label(&self, x: &TokenSequence) -> Label {
        let h = sequence_hash(self.seed, x.tokens());
        let u = (h >> 11) as f64 / (1u64 << 53) as f64;
        if u < self.bias {
            0
        } else {
            1 + (h % (self.num_classes as u64 - 1)) as Label
        }
    }
}

impl BaseClassifier for RandomTableClassifier {
    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn classify_batch(&self, batch: &[TokenSequence]) -> Result<Vec<Label>> {
        Ok(batch.iter().map(|x| self.label(x)).collect())
    }
}

/// One bound check at one neighbour for one class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundCheck {
    pub neighbor: TokenSequence,
    pub distance: usize,
    pub class: Label,
    pub len_lcs: usize,
    pub psi: f64,
    pub psi_p: f64,
    pub mu: f64,
    pub exact: f64,
    pub lb: f64,
    pub ub: f64,
}

impl BoundCheck {
    /// `exact - lb`; negative means the lower bound overshot.
    pub fn lb_margin(&self) -> f64 {
        self.exact - self.lb
    }

    /// `ub - exact`; negative means the upper bound undershot.
    pub fn ub_margin(&self) -> f64 {
        self.ub - self.exact
    }

    pub fn is_violation(&self) -> bool {
        self.lb_margin() < -NUMERICAL_SLACK || self.ub_margin() < -NUMERICAL_SLACK
    }
}

/// Every check made around one input.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub checks: Vec<BoundCheck>,
}

impl ValidationReport {
    pub fn violations(&self) -> impl Iterator<Item = &BoundCheck> {
        self.checks.iter().filter(|c| c.is_violation())
    }

    pub fn violation_count(&self) -> usize {
        self.violations().count()
    }

    pub fn min_lb_margin(&self) -> f64 {
        self.checks.iter().map(BoundCheck::lb_margin).fold(f64::INFINITY, f64::min)
    }

    pub fn min_ub_margin(&self) -> f64 {
        self.checks.iter().map(BoundCheck::ub_margin).fold(f64::INFINITY, f64::min)
    }

    pub fn merge(&mut self, other: ValidationReport) {
        self.checks.extend(other.checks);
    }

    /// One JSON object per check.
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        for c in &self.checks {
            serde_json::to_writer(&mut out, c)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// Checks `lb(μ) ≤ p_y(x̃) ≤ ub(μ)` for every class `y` and every `x̃` in the
/// radius-`r` ball, using exact probabilities and the true LCS length.
pub fn validate_bounds(
    base: &dyn BaseClassifier,
    x: &TokenSequence,
    rate: &dyn RateFunction,
    ops: EditOps,
    r: usize,
    vocab: &Vocabulary,
) -> Result<ValidationReport> {
    validate_bounds_shifted(base, x, rate, ops, r, vocab, 0.0)
}

/// [`validate_bounds`] with `shift` added to every lower bound. A positive
/// shift is a deliberately broken bound, used to confirm that violations are
/// detected.
pub fn validate_bounds_shifted(
    base: &dyn BaseClassifier,
    x: &TokenSequence,
    rate: &dyn RateFunction,
    ops: EditOps,
    r: usize,
    vocab: &Vocabulary,
    shift: f64,
) -> Result<ValidationReport> {
    let psi = rate.rate(x)?;
    let mu = exact_smoothed_scores(base, x, psi)?;
    let levels = enumerate_ball_levels(x, r, ops, vocab, DEFAULT_BALL_CAP)?;
    let mut report = ValidationReport::default();
    for (distance, level) in levels.iter().enumerate() {
        for xp in level {
            let psi_p = rate.rate(xp)?;
            let exact = exact_smoothed_scores(base, xp, psi_p)?;
            let n = lcs_length(x, xp);
            let geometry = PairwiseGeometry::new(x.len(), xp.len(), n, psi, psi_p)?;
            for (class, (&m, &e)) in mu.probs.iter().zip(&exact.probs).enumerate() {
                let inputs = BoundInputs::new(m.clamp(0.0, 1.0), geometry)?;
                report.checks.push(BoundCheck {
                    neighbor: xp.clone(),
                    distance,
                    class,
                    len_lcs: n,
                    psi,
                    psi_p,
                    mu: m,
                    exact: e,
                    lb: pairwise_lb(&inputs) + shift,
                    ub: pairwise_ub(&inputs),
                });
            }
        }
    }
    Ok(report)
}

/// A sweep of random classifiers, inputs and rate pairs.
///
/// Input `t` gets a random length from `lengths`, a random classifier with
/// bias cycling through `biases`, and is checked under every ordered pair
/// `(ψ, ψ̃)` from `rates`: rate `ψ` at the input and `ψ̃` at all neighbours.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteConfig {
    pub tables: usize,
    pub vocab_size: usize,
    pub num_classes: usize,
    pub lengths: Vec<usize>,
    pub radius: usize,
    pub rates: Vec<f64>,
    pub biases: Vec<f64>,
    pub ops: EditOps,
    pub seed: u64,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        SuiteConfig {
            tables: 100,
            vocab_size: 2,
            num_classes: 2,
            lengths: vec![4, 5, 6],
            radius: 2,
            rates: vec![0.5, 0.7, 0.9],
            biases: vec![0.5, 0.8, 0.95, 0.99],
            ops: EditOps::ALL,
            seed: 0,
        }
    }
}

impl SuiteConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lengths.is_empty() || self.rates.is_empty() || self.biases.is_empty() {
            return Err(Error::invalid("suite needs at least one length, rate and bias"));
        }
        let longest = self.lengths.iter().max().copied().unwrap_or(0) + self.radius;
        if longest > MAX_EXACT_LENGTH {
            return Err(Error::BudgetExceeded {
                what: format!("inputs up to {longest} tokens need exact enumeration"),
                limit: MAX_EXACT_LENGTH,
            });
        }
        if let Some(r) = self.rates.iter().find(|r| !(0.0..1.0).contains(*r)) {
            return Err(Error::invalid(format!("rate {r} must lie in [0, 1)")));
        }
        Vocabulary::new(self.vocab_size)?;
        Ok(())
    }
}

/// Runs the sweep, adding `shift` to every lower bound.
pub fn run_suite(config: &SuiteConfig, shift: f64) -> Result<ValidationReport> {
    config.validate()?;
    let vocab = Vocabulary::new(config.vocab_size)?;
    let reports = (0..config.tables)
        .into_par_iter()
        .map(|t| {
            let mut rng = stream(config.seed, Substream::Certification, t as u64);
            let len = config.lengths[rng.gen_range(0..config.lengths.len())];
            let x = TokenSequence::new((0..len).map(|_| rng.gen_range(0..config.vocab_size as u32)).collect());
            let bias = config.biases[t % config.biases.len()];
            let base = RandomTableClassifier::new(rng.gen(), config.num_classes, bias)?;
            let mut report = ValidationReport::default();
            for &a in &config.rates {
                for &b in &config.rates {
                    let x0 = x.clone();
                    let rate = RateFn(move |s: &TokenSequence| if *s == x0 { a } else { b });
                    report.merge(validate_bounds_shifted(&base, &x, &rate, config.ops, config.radius, &vocab, shift)?);
                }
            }
            Ok(report)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut all = ValidationReport::default();
    for r in reports {
        all.merge(r);
    }
    Ok(all)
}
