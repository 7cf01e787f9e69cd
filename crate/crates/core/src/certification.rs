//! Edit-distance certificates.
//!
//! Two certifiers share one semantics: the returned radius is the largest `r`
//! such that every sequence in the ball `B_r(x)` provably keeps the
//! prediction; a failing neighbour at distance `d` yields `d - 1`.
//!
//! * [`certify_from_bounds`] handles rates that depend on the input only
//!   through its length. The bounds then depend on a neighbour only through
//!   `(|x̃|, |z⋆|)`, so it suffices to enumerate edit counts. For every
//!   neighbour at distance `d` with LCS length `L`, the composition
//!   `sub = min(|x|, |x̃|) - L`, `del = |x| - L - sub`, `ins = |x̃| - L - sub`
//!   totals at most `d` and yields exactly that pair, so no realizable pair is
//!   skipped.
//! * [`certify_general_from_bounds`] enumerates the actual ball and works for
//!   any rate function, at exponential cost.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bounds::{pairwise_lb, pairwise_ub, BoundInputs, PairwiseGeometry};
use crate::classifiers::{BaseClassifier, Label};
use crate::error::{Error, Result};
use crate::estimation::{estimate_cert_bounds, predict};
use crate::mechanism::{DeletionPolicy, RateFunction};
use crate::numeric::ln_choose;
use crate::sequence::{enumerate_ball_levels, lcs_length, EditOps, TokenSequence, Vocabulary};

/// Numbers of deletions, insertions and substitutions in an edit script.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EditComposition {
    pub n_del: usize,
    pub n_ins: usize,
    pub n_sub: usize,
}

impl EditComposition {
    pub fn new(n_del: usize, n_ins: usize, n_sub: usize) -> Self {
        EditComposition { n_del, n_ins, n_sub }
    }

    pub fn total(&self) -> usize {
        self.n_del + self.n_ins + self.n_sub
    }
}

/// All ways to split exactly `r` edits among the enabled operations, in
/// descending lexicographic order of `(n_del, n_ins, n_sub)`.
pub fn edit_compositions(ops: EditOps, r: usize) -> Vec<EditComposition> {
    let max_del = if ops.allows_del() { r } else { 0 };
    let mut out = Vec::new();
    for n_del in (0..=max_del).rev() {
        let rest = r - n_del;
        let max_ins = if ops.allows_ins() { rest } else { 0 };
        for n_ins in (0..=max_ins).rev() {
            let n_sub = rest - n_ins;
            if n_sub > 0 && !ops.allows_sub() {
                continue;
            }
            out.push(EditComposition { n_del, n_ins, n_sub });
        }
    }
    out
}

/// Geometry of the worst neighbour reachable with the given edit counts:
/// `|x̃| = |x| + ins - del` and `|z⋆| = |x| - del - sub`. `None` when the
/// counts cannot be applied to a sequence of length `len_x`.
pub fn worst_case_geometry(
    len_x: usize,
    comp: EditComposition,
    policy: &DeletionPolicy,
) -> Result<Option<PairwiseGeometry>> {
    let Some(len_lcs) = len_x.checked_sub(comp.n_del + comp.n_sub) else {
        return Ok(None);
    };
    let len_xp = len_x - comp.n_del + comp.n_ins;
    let geometry = PairwiseGeometry::new(
        len_x,
        len_xp,
        len_lcs,
        policy.rate_or_limit(len_x),
        policy.rate_or_limit(len_xp),
    )?;
    Ok(Some(geometry))
}

/// Whether the bounds transported to `geometry` still separate the classes.
fn separates(t1_lb: f64, t2_ub: f64, geometry: PairwiseGeometry) -> Result<bool> {
    let lb = pairwise_lb(&BoundInputs::new(t1_lb, geometry)?);
    let ub = pairwise_ub(&BoundInputs::new(t2_ub, geometry)?);
    Ok(lb > ub)
}

fn check_bounds(t1_lb: f64, t2_ub: f64) -> Result<()> {
    for (name, v) in [("t1_lb", t1_lb), ("t2_ub", t2_ub)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::invalid(format!("{name} = {v} is not a probability")));
        }
    }
    Ok(())
}

/// Certified radius for a length-only rate, given bounds on the top-class
/// probability (`t1_lb`) and the runner-up probability (`t2_ub`) at `x`.
///
/// `None` (abstain) when the bounds do not separate at `x` itself.
pub fn certify_from_bounds(
    len_x: usize,
    t1_lb: f64,
    t2_ub: f64,
    policy: &DeletionPolicy,
    ops: EditOps,
    r_max: usize,
) -> Result<Option<usize>> {
    check_bounds(t1_lb, t2_ub)?;
    if t1_lb <= t2_ub {
        return Ok(None);
    }
    for r in 1..=r_max {
        for comp in edit_compositions(ops, r) {
            let Some(geometry) = worst_case_geometry(len_x, comp, policy)? else {
                continue;
            };
            if !separates(t1_lb, t2_ub, geometry)? {
                return Ok(Some(r - 1));
            }
        }
    }
    Ok(Some(r_max))
}

/// Certified radius by exhaustive search of the ball around `x`, for any
/// rate function. Desk scale only: the ball is materialized up to `cap`
/// elements.
#[allow(clippy::too_many_arguments)]
pub fn certify_general_from_bounds(
    x: &TokenSequence,
    t1_lb: f64,
    t2_ub: f64,
    rate: &dyn RateFunction,
    ops: EditOps,
    vocab: &Vocabulary,
    r_max: usize,
    cap: usize,
) -> Result<Option<usize>> {
    check_bounds(t1_lb, t2_ub)?;
    if t1_lb <= t2_ub {
        return Ok(None);
    }
    let psi = rate.rate(x)?;
    let levels = enumerate_ball_levels(x, r_max, ops, vocab, cap)?;
    // many neighbours share a geometry; the bounds only depend on it
    let mut verdicts: HashMap<(usize, usize, u64), bool> = HashMap::new();
    for (d, level) in levels.iter().enumerate().skip(1) {
        for xp in level {
            let psi_p = rate.rate(xp)?;
            let n = lcs_length(x, xp);
            let key = (xp.len(), n, psi_p.to_bits());
            let ok = match verdicts.get(&key) {
                Some(&ok) => ok,
                None => {
                    let g = PairwiseGeometry::new(x.len(), xp.len(), n, psi, psi_p)?;
                    let ok = separates(t1_lb, t2_ub, g)?;
                    verdicts.insert(key, ok);
                    ok
                }
            };
            if !ok {
                return Ok(Some(d - 1));
            }
        }
    }
    Ok(Some(r_max))
}

/// [`certify_general_from_bounds`] fed with exact class probabilities at `x`:
/// the top class against the largest other class.
pub fn certify_general(
    scores: &[f64],
    x: &TokenSequence,
    rate: &dyn RateFunction,
    ops: EditOps,
    vocab: &Vocabulary,
    r_max: usize,
    cap: usize,
) -> Result<Option<usize>> {
    let (t1, t2) = top_two(scores)?;
    certify_general_from_bounds(x, t1, t2, rate, ops, vocab, r_max, cap)
}

/// Largest score and the largest score of any other class.
pub fn top_two(scores: &[f64]) -> Result<(f64, f64)> {
    if scores.is_empty() {
        return Err(Error::invalid("no class scores"));
    }
    let top = crate::numeric::argmax(scores);
    let second = scores
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != top)
        .map(|(_, &s)| s)
        .fold(0.0f64, f64::max);
    Ok((scores[top].clamp(0.0, 1.0), second.clamp(0.0, 1.0)))
}

/// `log10` of a number of sequences provably inside `B_r(x)`.
///
/// Takes the best of three explicit families of distinct sequences, each
/// within distance `r`: substituting `min(r, |x|)` chosen positions, prepending
/// `r` arbitrary tokens, and deleting a prefix of each length up to `r`. The
/// last family is small but survives inputs whose tokens all coincide.
pub fn region_log_cardinality(len_x: usize, r: usize, ops: EditOps, vocab_size: usize) -> f64 {
    if r == 0 {
        return 0.0;
    }
    let mut best = 0.0f64;
    let v = vocab_size as f64;
    if ops.allows_sub() && vocab_size >= 2 {
        let k = r.min(len_x);
        let ln = ln_choose(len_x, k) + k as f64 * (v - 1.0).ln();
        best = best.max(ln / std::f64::consts::LN_10);
    }
    if ops.allows_ins() {
        best = best.max(r as f64 * v.log10());
    }
    if ops.allows_del() {
        best = best.max(((r.min(len_x) + 1) as f64).log10());
    }
    best
}

/// Settings shared by every certification in a run.
#[derive(Clone, Debug)]
pub struct CertifyConfig {
    pub ops: EditOps,
    pub alpha: f64,
    pub n_pred: u64,
    pub n_cert: u64,
    /// Largest radius examined; `None` uses `|x|`.
    pub r_max: Option<usize>,
    /// Vocabulary size used for the cardinality bound.
    pub vocab_size: usize,
}

impl Default for CertifyConfig {
    fn default() -> Self {
        CertifyConfig {
            ops: EditOps::ALL,
            alpha: crate::estimation::DEFAULT_ALPHA,
            n_pred: 1000,
            n_cert: 4000,
            r_max: None,
            vocab_size: 2,
        }
    }
}

impl CertifyConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::invalid(format!("alpha = {} must lie in (0, 1)", self.alpha)));
        }
        if self.n_pred == 0 || self.n_cert == 0 {
            return Err(Error::invalid("sample sizes must be positive"));
        }
        if self.vocab_size == 0 {
            return Err(Error::invalid("vocabulary size must be positive"));
        }
        Ok(())
    }
}

/// Outcome of certifying one input.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Certificate {
    /// `None` means abstain.
    pub radius: Option<usize>,
    pub ops: EditOps,
    pub alpha: f64,
    pub log10_cardinality: f64,
    pub t1_lb: f64,
    pub t2_ub: f64,
}

impl Certificate {
    /// Radius with abstentions counted as 0.
    pub fn reported_radius(&self) -> usize {
        self.radius.unwrap_or(0)
    }
}

/// Predicts with `n_pred` samples from `pred_rng`, bounds the class
/// probabilities with a fresh batch of `n_cert` samples from `cert_rng`, and
/// certifies. Abstains when the two batches disagree on the top class.
pub fn certify_length_dependent<R: Rng + ?Sized>(
    base: &dyn BaseClassifier,
    x: &TokenSequence,
    policy: &DeletionPolicy,
    config: &CertifyConfig,
    pred_rng: &mut R,
    cert_rng: &mut R,
) -> Result<(Label, Certificate)> {
    config.validate()?;
    let (label, _) = predict(base, x, policy, config.n_pred, pred_rng)?;
    let cb = estimate_cert_bounds(base, x, policy, label, config.n_cert, config.alpha, cert_rng)?;
    let r_max = config.r_max.unwrap_or(x.len());
    let radius = if cb.agrees {
        certify_from_bounds(x.len(), cb.t1_lb, cb.t2_ub, policy, config.ops, r_max)?
    } else {
        None
    };
    let log10_cardinality = match radius {
        Some(r) => region_log_cardinality(x.len(), r, config.ops, config.vocab_size),
        None => 0.0,
    };
    Ok((
        label,
        Certificate {
            radius,
            ops: config.ops,
            alpha: config.alpha,
            log10_cardinality,
            t1_lb: cb.t1_lb,
            t2_ub: cb.t2_ub,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifiers::ConstantClassifier;
    use crate::sequence::{edit_distance, enumerate_ball, DEFAULT_BALL_CAP};
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;
    use std::collections::HashSet;

    fn ops(s: &str) -> EditOps {
        s.parse().unwrap()
    }

    #[test]
    fn composition_examples() {
        assert_eq!(edit_compositions(EditOps::ALL, 0), vec![EditComposition::new(0, 0, 0)]);
        assert_eq!(edit_compositions(ops("sub"), 3), vec![EditComposition::new(0, 0, 3)]);
        let got: Vec<(usize, usize, usize)> = edit_compositions(EditOps::ALL, 2)
            .into_iter()
            .map(|c| (c.n_del, c.n_ins, c.n_sub))
            .collect();
        assert_eq!(got, vec![(2, 0, 0), (1, 1, 0), (1, 0, 1), (0, 2, 0), (0, 1, 1), (0, 0, 2)]);
        assert_eq!(edit_compositions(ops("del,ins"), 3).len(), 4);
        for r in 0..10 {
            assert_eq!(edit_compositions(EditOps::ALL, r).len(), (r + 1) * (r + 2) / 2);
            assert!(edit_compositions(EditOps::ALL, r).iter().all(|c| c.total() == r));
        }
    }

    #[test]
    fn geometry_examples() {
        let p = DeletionPolicy::fixed(0.9).unwrap();
        let g = worst_case_geometry(10, EditComposition::new(0, 0, 0), &p).unwrap().unwrap();
        assert_eq!((g.len_xp, g.len_lcs), (10, 10));
        assert_eq!(g.psi, g.psi_p);
        let g = worst_case_geometry(10, EditComposition::new(2, 1, 0), &p).unwrap().unwrap();
        assert_eq!((g.len_xp, g.len_lcs), (9, 8));
        assert!(worst_case_geometry(3, EditComposition::new(4, 0, 0), &p).unwrap().is_none());
    }

    /// Every (|x̃|, LCS) pair found in a real ball is produced by some
    /// composition of no more edits than the neighbour's distance.
    #[test]
    fn compositions_cover_realizable_geometries() {
        let vocab = Vocabulary::new(2).unwrap();
        for opset in ["del", "ins", "sub", "del,ins", "del,sub", "ins,sub", "del,ins,sub"] {
            let o = ops(opset);
            for code in 0..64u32 {
                let len = (code % 6) as usize;
                let x = TokenSequence::new((0..len).map(|i| (code >> i) & 1).collect());
                let mut reachable: HashMap<(usize, usize), usize> = HashMap::new();
                for r in 0..=3 {
                    for c in edit_compositions(o, r) {
                        if let Some(lcs) = len.checked_sub(c.n_del + c.n_sub) {
                            reachable.entry((len + c.n_ins - c.n_del, lcs)).or_insert(r);
                        }
                    }
                }
                for xp in enumerate_ball(&x, 3, o, &vocab).unwrap() {
                    let d = edit_distance(&x, &xp, o).unwrap();
                    let key = (xp.len(), lcs_length(&x, &xp));
                    let r = reachable.get(&key).copied();
                    assert!(r.is_some_and(|r| r <= d), "{opset} x {x:?} x̃ {xp:?}: {r:?} vs {d}");
                }
            }
        }
    }

    #[test]
    fn abstains_without_separation() {
        let p = DeletionPolicy::fixed(0.9).unwrap();
        assert_eq!(certify_from_bounds(8, 0.5, 0.5, &p, EditOps::ALL, 8).unwrap(), None);
        assert_eq!(certify_from_bounds(8, 0.4, 0.6, &p, EditOps::ALL, 8).unwrap(), None);
        let x = TokenSequence::new(vec![0, 1]);
        let v = Vocabulary::new(2).unwrap();
        assert_eq!(certify_general(&[0.5, 0.5], &x, &p, EditOps::ALL, &v, 2, 1000).unwrap(), None);
    }

    #[test]
    fn zero_budget_radius() {
        let p = DeletionPolicy::fixed(0.9).unwrap();
        assert_eq!(certify_from_bounds(8, 0.9, 0.1, &p, EditOps::ALL, 0).unwrap(), Some(0));
        let x = TokenSequence::new(vec![0, 1, 1]);
        let v = Vocabulary::new(2).unwrap();
        assert_eq!(
            certify_general(&[0.9, 0.1], &x, &p, EditOps::ALL, &v, 0, DEFAULT_BALL_CAP).unwrap(),
            Some(0)
        );
    }

    #[test]
    fn first_composition_failure_gives_zero() {
        // barely separated: any edit breaks it
        let p = DeletionPolicy::fixed(0.5).unwrap();
        assert_eq!(certify_from_bounds(8, 0.51, 0.49, &p, EditOps::ALL, 8).unwrap(), Some(0));
    }

    #[test]
    fn radius_is_monotone_in_bounds() {
        let p = DeletionPolicy::length_dependent(0.6, 0.95, 2).unwrap();
        let grid: Vec<f64> = (0..=20).map(|i| i as f64 / 20.0).collect();
        let r = |a: f64, b: f64| certify_from_bounds(12, a, b, &p, EditOps::ALL, 12).unwrap().map_or(-1, |r| r as i64);
        for &t2 in &grid {
            for w in grid.windows(2) {
                assert!(r(w[0], t2) <= r(w[1], t2));
            }
        }
        for &t1 in &grid {
            for w in grid.windows(2) {
                assert!(r(t1, w[0]) >= r(t1, w[1]));
            }
        }
    }

    #[test]
    fn cardinality_examples() {
        assert_eq!(region_log_cardinality(10, 0, EditOps::ALL, 100), 0.0);
        let v = region_log_cardinality(10, 1, ops("sub"), 100);
        assert!((v - 990f64.log10()).abs() < 1e-12 && (v - 2.9956).abs() < 1e-4);
        assert!(region_log_cardinality(5, 2, ops("ins"), 2) >= 4f64.log10() - 1e-15);
        assert_eq!(region_log_cardinality(4, 3, ops("sub"), 1), 0.0);
    }

    #[test]
    fn cardinality_never_exceeds_ball() {
        for opset in ["del", "ins", "sub", "del,ins,sub"] {
            let o = ops(opset);
            for v in 1..=3usize {
                let vocab = Vocabulary::new(v).unwrap();
                for len in 0..=4usize {
                    let x = TokenSequence::new((0..len).map(|i| (i % v) as u32).collect());
                    let same = TokenSequence::new(vec![0; len]);
                    for seq in [x, same] {
                        for r in 0..=2 {
                            let ball = enumerate_ball(&seq, r, o, &vocab).unwrap().len();
                            let lc = region_log_cardinality(len, r, o, v);
                            assert!(lc <= (ball as f64).log10() + 1e-12, "{opset} {seq:?} r {r} V {v}");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn substitution_count_is_exact_on_small_instance() {
        // pure substitutions of exactly r positions are all distinct
        let vocab = Vocabulary::new(3).unwrap();
        let x = TokenSequence::new(vec![0, 1, 2, 0]);
        let ball: HashSet<_> = enumerate_ball(&x, 1, ops("sub"), &vocab).unwrap().into_iter().collect();
        assert_eq!(ball.len() - 1, 4 * 2);
        assert!((region_log_cardinality(4, 1, ops("sub"), 3) - 8f64.log10()).abs() < 1e-12);
    }

    #[test]
    fn certificate_end_to_end_constant() {
        let c = ConstantClassifier::new(1, 2).unwrap();
        let x = TokenSequence::new(vec![3; 8]);
        let p = DeletionPolicy::fixed(0.9).unwrap();
        let cfg = CertifyConfig {
            vocab_size: 5,
            ..CertifyConfig::default()
        };
        let mut a = ChaCha20Rng::seed_from_u64(1);
        let mut b = ChaCha20Rng::seed_from_u64(2);
        let (label, cert) = certify_length_dependent(&c, &x, &p, &cfg, &mut a, &mut b).unwrap();
        assert_eq!(label, 1);
        let expected = certify_from_bounds(8, cert.t1_lb, cert.t2_ub, &p, EditOps::ALL, 8).unwrap();
        assert_eq!(cert.radius, expected);
        assert!(cert.radius.is_some());
        let r = cert.reported_radius();
        assert_eq!(cert.log10_cardinality, region_log_cardinality(8, r, EditOps::ALL, 5));
    }

    #[test]
    fn top_two_scores() {
        assert_eq!(top_two(&[0.2, 0.7, 0.1]).unwrap(), (0.7, 0.2));
        assert_eq!(top_two(&[1.0]).unwrap(), (1.0, 0.0));
        assert!(top_two(&[]).is_err());
    }
}
