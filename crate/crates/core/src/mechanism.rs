//! The deletion smoothing mechanism: deletion-rate policies, mask sampling,
//! mask application and mask probability mass.
//!
//! A mask bit of `true` means the token is retained.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::ln_pow;
use crate::sequence::TokenSequence;

/// Per-token deletion probability as a function of the input.
///
/// Policies serialize with a `kind` tag: `fixed`, `length_dependent` or `binned`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DeletionPolicy {
    /// Constant rate `p_del`.
    Fixed { p_del: f64 },
    /// `max(p_lb, p * (1 - k / |x|))`.
    LengthDependent { p_lb: f64, p: f64, k: u64 },
    /// `max(0, 1 - K[g] / |x|)` where `g` is the bin containing `|x|`.
    Binned {
        #[serde(with = "boundary_serde")]
        boundaries: Vec<f64>,
        expected_lengths: Vec<f64>,
    },
}

fn is_probability(p: f64) -> bool {
    (0.0..=1.0).contains(&p)
}

impl DeletionPolicy {
    pub fn fixed(p_del: f64) -> Result<Self> {
        let policy = DeletionPolicy::Fixed { p_del };
        policy.validate()?;
        Ok(policy)
    }

    pub fn length_dependent(p_lb: f64, p: f64, k: u64) -> Result<Self> {
        let policy = DeletionPolicy::LengthDependent { p_lb, p, k };
        policy.validate()?;
        Ok(policy)
    }

    pub fn binned(boundaries: Vec<f64>, expected_lengths: Vec<f64>) -> Result<Self> {
        let policy = DeletionPolicy::Binned {
            boundaries,
            expected_lengths,
        };
        policy.validate()?;
        Ok(policy)
    }

    /// Length-dependent policy matched to a fixed rate at the mean length:
    /// `p_lb = p_del`, `p = 1`, `k = floor((1 - p_del) * mean_length)`.
    pub fn matched_to_fixed(p_del: f64, mean_length: f64) -> Result<Self> {
        if !(mean_length.is_finite() && mean_length > 0.0) {
            return Err(Error::InvalidPolicy("mean length must be positive".into()));
        }
        // snap before flooring so that e.g. (1 - 0.9) * 230 gives 23, not 22
        let raw = (1.0 - p_del) * mean_length;
        let k = (raw + 1e-9 * raw.max(1.0)).floor();
        if k < 1.0 {
            return Err(Error::InvalidPolicy(format!(
                "(1 - {p_del}) * {mean_length} rounds down to k = 0"
            )));
        }
        DeletionPolicy::length_dependent(p_del, 1.0, k as u64)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidPolicy(m));
        match *self {
            DeletionPolicy::Fixed { p_del } => {
                if !(0.0..1.0).contains(&p_del) {
                    return bad(format!("p_del = {p_del} must lie in [0, 1)"));
                }
            }
            DeletionPolicy::LengthDependent { p_lb, p, k } => {
                if !(is_probability(p_lb) && is_probability(p) && p_lb <= p) {
                    return bad(format!("need 0 <= p_lb <= p <= 1, got p_lb = {p_lb}, p = {p}"));
                }
                if k == 0 {
                    return bad("k must be positive".into());
                }
            }
            DeletionPolicy::Binned {
                ref boundaries,
                ref expected_lengths,
            } => {
                if boundaries.len() < 2 {
                    return bad("need at least two bin boundaries".into());
                }
                if boundaries[0] != 0.0 {
                    return bad("first bin boundary must be 0".into());
                }
                if *boundaries.last().unwrap() != f64::INFINITY {
                    return bad("last bin boundary must be inf".into());
                }
                if boundaries.windows(2).any(|w| !(w[0] < w[1])) {
                    return bad("bin boundaries must be strictly ascending".into());
                }
                if expected_lengths.len() != boundaries.len() - 1 {
                    return bad(format!(
                        "{} expected lengths for {} bins",
                        expected_lengths.len(),
                        boundaries.len() - 1
                    ));
                }
                if expected_lengths.iter().any(|&k| !(k.is_finite() && k > 0.0)) {
                    return bad("expected lengths must be positive and finite".into());
                }
            }
        }
        Ok(())
    }

    /// Whether the rate depends on the input through its length at all.
    pub fn is_constant(&self) -> bool {
        matches!(self, DeletionPolicy::Fixed { .. })
    }

    /// Deletion probability for a sequence of the given length.
    pub fn deletion_rate(&self, length: usize) -> Result<f64> {
        if length == 0 && !self.is_constant() {
            return Err(Error::DegenerateInput(
                "length-dependent deletion rate undefined for the empty sequence".into(),
            ));
        }
        Ok(self.rate_or_limit(length))
    }

    /// Like [`deletion_rate`](Self::deletion_rate) but total: at length 0 it
    /// returns the limit of the rate formula as `k / |x| -> inf`. The empty
    /// sequence has a single deletion outcome, so the value is only used to
    /// orient bound computations.
    pub fn rate_or_limit(&self, length: usize) -> f64 {
        match *self {
            DeletionPolicy::Fixed { p_del } => p_del,
            DeletionPolicy::LengthDependent { p_lb, p, k } => {
                if length == 0 {
                    return p_lb;
                }
                p_lb.max(p * (1.0 - k as f64 / length as f64))
            }
            DeletionPolicy::Binned {
                ref boundaries,
                ref expected_lengths,
            } => {
                if length == 0 {
                    return 0.0;
                }
                let g = bin_index(boundaries, length as f64);
                (1.0 - expected_lengths[g] / length as f64).max(0.0)
            }
        }
    }
}

/// Index `i` of the bin `[boundaries[i], boundaries[i + 1])` containing `value`.
///
/// Values past the last finite boundary land in the final bin.
pub fn bin_index(boundaries: &[f64], value: f64) -> usize {
    let bins = boundaries.len() - 1;
    // first boundary strictly greater than value, minus one
    let upper = boundaries.partition_point(|&b| b <= value);
    upper.saturating_sub(1).min(bins - 1)
}

/// Something that assigns a deletion rate to each input.
///
/// Length-only policies implement this through [`DeletionPolicy`]; arbitrary
/// closures can be used for the brute-force certifier and the oracle.
pub trait RateFunction: Sync {
    fn rate(&self, x: &TokenSequence) -> Result<f64>;
}

impl RateFunction for DeletionPolicy {
    fn rate(&self, x: &TokenSequence) -> Result<f64> {
        Ok(self.rate_or_limit(x.len()))
    }
}

/// Adapts a closure into a [`RateFunction`].
pub struct RateFn<F>(pub F);

impl<F> RateFunction for RateFn<F>
where
    F: Fn(&TokenSequence) -> f64 + Sync,
{
    fn rate(&self, x: &TokenSequence) -> Result<f64> {
        Ok((self.0)(x))
    }
}

/// Deletion indicators, one per token; `true` retains the token.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct DeletionMask {
    bits: Vec<bool>,
}

impl DeletionMask {
    pub fn new(bits: Vec<bool>) -> Self {
        DeletionMask { bits }
    }

    /// Mask of `length` bits from the low bits of `code` (bit `i` = token `i`).
    pub fn from_code(code: u64, length: usize) -> Self {
        DeletionMask {
            bits: (0..length).map(|i| code >> i & 1 == 1).collect(),
        }
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn retained_count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn deleted_count(&self) -> usize {
        self.bits.len() - self.retained_count()
    }
}

/// Draws each bit independently: deleted with probability `rate`.
pub fn sample_mask<R: Rng + ?Sized>(rate: f64, length: usize, rng: &mut R) -> DeletionMask {
    let rate = rate.clamp(0.0, 1.0);
    DeletionMask {
        bits: (0..length).map(|_| !rng.gen_bool(rate)).collect(),
    }
}

/// The subsequence of `x` at the retained positions.
pub fn apply_mask(x: &TokenSequence, mask: &DeletionMask) -> Result<TokenSequence> {
    if mask.len() != x.len() {
        return Err(Error::LengthMismatch {
            mask: mask.len(),
            sequence: x.len(),
        });
    }
    Ok(x.tokens()
        .iter()
        .zip(mask.bits())
        .filter(|(_, &keep)| keep)
        .map(|(&t, _)| t)
        .collect())
}

/// `rate^deleted * (1 - rate)^retained`, evaluated in log space.
pub fn mask_pmf(mask: &DeletionMask, rate: f64) -> f64 {
    mask_pmf_counts(mask.deleted_count(), mask.retained_count(), rate)
}

pub(crate) fn mask_pmf_counts(deleted: usize, retained: usize, rate: f64) -> f64 {
    // repeated multiplication is exact enough and cheaper for short inputs
    if deleted <= 64 && retained <= 64 {
        return rate.powi(deleted as i32) * (1.0 - rate).powi(retained as i32);
    }
    let ln = ln_pow(rate, deleted) + ln_pow(1.0 - rate, retained);
    ln.exp()
}

mod boundary_serde {
    use serde::de::Error as _;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Boundary {
        Finite(f64),
        Text(String),
    }

    pub fn serialize<S: Serializer>(values: &[f64], s: S) -> Result<S::Ok, S::Error> {
        let out: Vec<Boundary> = values
            .iter()
            .map(|&v| {
                if v == f64::INFINITY {
                    Boundary::Text("inf".into())
                } else {
                    Boundary::Finite(v)
                }
            })
            .collect();
        out.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        Vec::<Boundary>::deserialize(d)?
            .into_iter()
            .map(|b| match b {
                Boundary::Finite(v) => Ok(v),
                Boundary::Text(t) if t == "inf" => Ok(f64::INFINITY),
                Boundary::Text(t) => Err(D::Error::custom(format!("invalid bin boundary `{t}`"))),
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn length_dependent_rates() {
        let p = DeletionPolicy::length_dependent(0.9, 1.0, 23).unwrap();
        assert_eq!(p.deletion_rate(230).unwrap(), 0.9);
        assert!((p.deletion_rate(460).unwrap() - 0.95).abs() < 1e-15);
        assert_eq!(p.deletion_rate(100).unwrap(), 0.9);
        assert!(matches!(p.deletion_rate(0), Err(Error::DegenerateInput(_))));
    }

    #[test]
    fn matched_to_fixed_uses_exact_k() {
        let p = DeletionPolicy::matched_to_fixed(0.9, 230.0).unwrap();
        assert_eq!(p, DeletionPolicy::LengthDependent { p_lb: 0.9, p: 1.0, k: 23 });
        assert_eq!(p.deletion_rate(230).unwrap(), 0.9);
        // non-integral product floors
        let p = DeletionPolicy::matched_to_fixed(0.9, 134.1).unwrap();
        assert_eq!(p, DeletionPolicy::LengthDependent { p_lb: 0.9, p: 1.0, k: 13 });
    }

    #[test]
    fn length_dependent_monotone_in_length() {
        let p = DeletionPolicy::length_dependent(0.5, 0.97, 40).unwrap();
        let rates: Vec<f64> = (1..2000).map(|n| p.deletion_rate(n).unwrap()).collect();
        assert!(rates.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn fixed_is_exact_everywhere() {
        let p = DeletionPolicy::fixed(0.9).unwrap();
        for n in [0, 1, 5, 1000] {
            assert_eq!(p.deletion_rate(n).unwrap(), 0.9);
        }
        let ld = DeletionPolicy::length_dependent(0.9, 0.9, 7).unwrap();
        for n in 1..100 {
            assert_eq!(ld.deletion_rate(n).unwrap(), 0.9);
        }
    }

    #[test]
    fn binned_rates_and_clamp() {
        let p = DeletionPolicy::binned(vec![0.0, 137.0, 230.0, 324.0, f64::INFINITY], vec![10.0, 20.0, 30.0, 40.0])
            .unwrap();
        assert!((p.deletion_rate(100).unwrap() - 0.9).abs() < 1e-15);
        assert!((p.deletion_rate(137).unwrap() - (1.0 - 20.0 / 137.0)).abs() < 1e-15);
        assert!((p.deletion_rate(400).unwrap() - 0.9).abs() < 1e-15);
        assert!((p.deletion_rate(100_000).unwrap() - (1.0 - 40.0 / 100_000.0)).abs() < 1e-15);
        // shorter than the bin's expected length: retain everything
        assert_eq!(p.deletion_rate(5).unwrap(), 0.0);
    }

    #[test]
    fn policy_validation() {
        assert!(DeletionPolicy::fixed(1.0).is_err());
        assert!(DeletionPolicy::fixed(-0.1).is_err());
        assert!(DeletionPolicy::length_dependent(0.9, 0.8, 3).is_err());
        assert!(DeletionPolicy::length_dependent(0.5, 0.8, 0).is_err());
        assert!(DeletionPolicy::binned(vec![0.0, 5.0, 5.0, f64::INFINITY], vec![1.0; 3]).is_err());
        assert!(DeletionPolicy::binned(vec![0.0, 5.0, f64::INFINITY], vec![1.0; 3]).is_err());
        assert!(DeletionPolicy::binned(vec![1.0, f64::INFINITY], vec![1.0]).is_err());
        assert!(DeletionPolicy::binned(vec![0.0, 50.0], vec![1.0]).is_err());
        assert!(DeletionPolicy::binned(vec![0.0, f64::INFINITY], vec![0.0]).is_err());
    }

    #[test]
    fn policy_json() {
        let p = DeletionPolicy::binned(vec![0.0, 137.0, 230.0, 324.0, f64::INFINITY], vec![1.5, 2.0, 3.0, 4.0]).unwrap();
        let json = serde_json::to_string(&p).unwrap();
        assert_eq!(
            json,
            r#"{"kind":"binned","boundaries":[0.0,137.0,230.0,324.0,"inf"],"expected_lengths":[1.5,2.0,3.0,4.0]}"#
        );
        let back: DeletionPolicy = serde_json::from_str(r#"{"kind":"binned","boundaries":[0,137,230,324,"inf"],"expected_lengths":[1.5,2,3,4]}"#).unwrap();
        assert_eq!(back, p);
        let fixed: DeletionPolicy = serde_json::from_str(r#"{"kind":"fixed","p_del":0.9}"#).unwrap();
        assert_eq!(fixed, DeletionPolicy::Fixed { p_del: 0.9 });
        let ld: DeletionPolicy = serde_json::from_str(r#"{"kind":"length_dependent","p_lb":0.9,"p":1.0,"k":23}"#).unwrap();
        assert_eq!(ld, DeletionPolicy::LengthDependent { p_lb: 0.9, p: 1.0, k: 23 });
        assert!(serde_json::from_str::<DeletionPolicy>(r#"{"kind":"binned","boundaries":[0,"infinity"],"expected_lengths":[1]}"#).is_err());
    }

    #[test]
    fn bin_index_edges() {
        let b = [0.0, 10.0, 20.0, f64::INFINITY];
        assert_eq!(bin_index(&b, 0.0), 0);
        assert_eq!(bin_index(&b, 9.99), 0);
        assert_eq!(bin_index(&b, 10.0), 1);
        assert_eq!(bin_index(&b, 25.0), 2);
        assert_eq!(bin_index(&b, 1e12), 2);
    }

    #[test]
    fn mask_sampling_edges() {
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        assert_eq!(sample_mask(0.0, 5, &mut rng).bits(), &[true; 5]);
        assert_eq!(sample_mask(1.0, 5, &mut rng).bits(), &[false; 5]);
    }

    #[test]
    fn mask_sampling_concentrates() {
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let n = 10_000;
        let m = sample_mask(0.9, n, &mut rng);
        let frac = m.retained_count() as f64 / n as f64;
        let tol = 3.0 * (0.9f64 * 0.1 / n as f64).sqrt();
        assert!((frac - 0.1).abs() <= tol, "retained fraction {frac}");
    }

    #[test]
    fn mask_sampling_is_seeded() {
        let a = sample_mask(0.5, 64, &mut ChaCha20Rng::seed_from_u64(3));
        let b = sample_mask(0.5, 64, &mut ChaCha20Rng::seed_from_u64(3));
        assert_eq!(a, b);
    }

    #[test]
    fn apply_mask_examples() {
        let x = TokenSequence::new(vec![7, 8, 9]);
        let apply = |bits: [bool; 3]| apply_mask(&x, &DeletionMask::new(bits.to_vec())).unwrap();
        assert_eq!(apply([true, false, true]).tokens(), &[7, 9]);
        assert_eq!(apply([true, true, true]), x);
        assert!(apply([false, false, false]).is_empty());
        let err = apply_mask(&x, &DeletionMask::new(vec![true])).unwrap_err();
        assert!(matches!(err, Error::LengthMismatch { mask: 1, sequence: 3 }));
    }

    #[test]
    fn mask_pmf_examples() {
        assert!((mask_pmf(&DeletionMask::new(vec![true, true]), 0.9) - 0.01).abs() < 1e-15);
        assert!((mask_pmf(&DeletionMask::new(vec![false; 3]), 0.9) - 0.729).abs() < 1e-15);
        let total: f64 = (0..8).map(|c| mask_pmf(&DeletionMask::from_code(c, 3), 0.7)).sum();
        assert!((total - 1.0).abs() < 1e-12);
        assert_eq!(mask_pmf(&DeletionMask::new(vec![false, false]), 1.0), 1.0);
        assert_eq!(mask_pmf(&DeletionMask::new(vec![true, false]), 1.0), 0.0);
    }

    #[test]
    fn mask_pmf_normalizes() {
        for rate in [0.1, 0.5, 0.9, 0.99] {
            for len in 0..=12usize {
                let total = crate::numeric::compensated_sum(
                    (0..1u64 << len).map(|c| mask_pmf(&DeletionMask::from_code(c, len), rate)),
                );
                assert!((total - 1.0).abs() < 1e-10, "rate {rate} len {len}: {total}");
            }
        }
    }

    #[test]
    fn apply_mask_is_order_preserving() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let x = TokenSequence::new((0..40).map(|i| (i * 7 % 5) as u32).collect());
        for _ in 0..50 {
            let m = sample_mask(0.6, x.len(), &mut rng);
            let z = apply_mask(&x, &m).unwrap();
            assert_eq!(z.len(), m.retained_count());
            assert_eq!(crate::sequence::lcs_length(&z, &x), z.len());
        }
    }
}
