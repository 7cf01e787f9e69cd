//! Calibration of binned deletion rates.
//!
//! Training lengths are split into equal-width bins, and each bin gets an
//! expected retained length `K` chosen by golden-section search to maximize
//! the certified radius achievable at a target certified accuracy `tau`.
//! The result is a [`DeletionPolicy::Binned`].

use rand::seq::{index, SliceRandom};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::certification::{certify_length_dependent, CertifyConfig};
use crate::classifiers::BaseClassifier;
use crate::dataset::Example;
use crate::error::{Error, Result};
use crate::mechanism::{bin_index, DeletionPolicy};
use crate::seeding::{derive_seed, stream, Substream};

/// Fraction of the bracket kept away from each end: `(3 - √5) / 2`.
pub const GOLDEN_FRACTION: f64 = 0.381_966_011_250_105_2;

/// Upper limit on the initial bin count.
pub const MAX_INITIAL_BINS: usize = 20;

/// Default lower deletion rate used to size `K` for the first bin, which is
/// not optimized.
pub const DEFAULT_FIRST_BIN_RATE: f64 = 0.9;

/// Length bins: `[boundaries[i], boundaries[i + 1])`, first boundary 0 and
/// last infinite.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinSpec {
    pub boundaries: Vec<f64>,
    pub min_count: usize,
    pub outlier_pct: f64,
    /// Training samples per bin after trimming.
    pub counts: Vec<usize>,
}

impl BinSpec {
    pub fn num_bins(&self) -> usize {
        self.boundaries.len() - 1
    }

    /// Bins given explicitly; counts are left empty.
    pub fn from_boundaries(boundaries: Vec<f64>) -> Result<Self> {
        // reuse the policy's boundary checks
        let n = boundaries.len().saturating_sub(1);
        DeletionPolicy::binned(boundaries.clone(), vec![1.0; n])?;
        Ok(BinSpec {
            boundaries,
            min_count: 0,
            outlier_pct: 0.0,
            counts: Vec::new(),
        })
    }
}

/// Equal-width bins over the trimmed length range, as many as possible (up
/// to `min(⌈√n⌉, 20)`) such that every bin holds at least `min_count` of the
/// trimmed samples.
///
/// Trimming drops lengths below the `outlier_pct` and above the
/// `100 - outlier_pct` percentile, taking the order statistics at
/// `⌊(n-1)q⌋` and `⌈(n-1)q⌉` so that no retained sample is interpolated away.
pub fn create_bins(lengths: &[usize], min_count: usize, outlier_pct: f64) -> Result<BinSpec> {
    if lengths.is_empty() {
        return Err(Error::EmptyInput("no lengths to bin".into()));
    }
    if min_count == 0 {
        return Err(Error::invalid("min_count must be positive"));
    }
    if !(0.0..50.0).contains(&outlier_pct) {
        return Err(Error::invalid(format!("outlier percentage {outlier_pct} must lie in [0, 50)")));
    }
    let mut sorted: Vec<f64> = lengths.iter().map(|&l| l as f64).collect();
    sorted.sort_by(f64::total_cmp);
    let last = (sorted.len() - 1) as f64;
    let lo = sorted[(last * outlier_pct / 100.0).floor() as usize];
    let hi = sorted[(last * (1.0 - outlier_pct / 100.0)).ceil() as usize];
    let trimmed: Vec<f64> = sorted.into_iter().filter(|&l| l >= lo && l <= hi).collect();

    let spec = |boundaries: Vec<f64>| {
        let mut counts = vec![0usize; boundaries.len() - 1];
        for &l in &trimmed {
            counts[bin_index(&boundaries, l)] += 1;
        }
        BinSpec {
            boundaries,
            min_count,
            outlier_pct,
            counts,
        }
    };

    if hi <= lo {
        let single = spec(vec![0.0, f64::INFINITY]);
        return if single.counts[0] >= min_count {
            Ok(single)
        } else {
            Err(Error::UnsatisfiableBins { min_count })
        };
    }

    let initial = ((trimmed.len() as f64).sqrt().ceil() as usize).clamp(1, MAX_INITIAL_BINS);
    for k in (1..=initial).rev() {
        let width = (hi - lo) / k as f64;
        let mut boundaries = vec![0.0];
        boundaries.extend((1..k).map(|i| lo + i as f64 * width));
        boundaries.push(f64::INFINITY);
        if boundaries.windows(2).any(|w| w[0] >= w[1]) {
            continue;
        }
        let candidate = spec(boundaries);
        if candidate.counts.iter().all(|&c| c >= min_count) {
            return Ok(candidate);
        }
    }
    Err(Error::UnsatisfiableBins { min_count })
}

/// Best certified radius at accuracy `tau` for one value of `K`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RadiusAccuracy {
    /// `None` when even radius 0 misses the target accuracy.
    pub radius: Option<usize>,
    pub accuracy: f64,
}

impl RadiusAccuracy {
    /// Larger radius wins; equal radii are split by accuracy.
    pub fn beats(&self, other: &RadiusAccuracy) -> bool {
        self.radius > other.radius || (self.radius == other.radius && self.accuracy > other.accuracy)
    }
}

/// Certifies `data` under `ψ(x) = max(0, 1 - k/|x|)` and returns the largest
/// radius `r` whose certified accuracy (fraction correct with radius ≥ r)
/// reaches `tau`, with that accuracy.
pub fn max_cert_radius(
    base: &dyn BaseClassifier,
    k: f64,
    data: &[Example],
    tau: f64,
    config: &CertifyConfig,
    seed: u64,
) -> Result<RadiusAccuracy> {
    if data.is_empty() {
        return Err(Error::EmptyInput("no samples to certify".into()));
    }
    let policy = DeletionPolicy::binned(vec![0.0, f64::INFINITY], vec![k])?;
    let radii: Vec<Option<usize>> = data
        .par_iter()
        .enumerate()
        .map(|(i, ex)| {
            let i = i as u64;
            let mut pred = stream(seed, Substream::Prediction, i);
            let mut cert = stream(seed, Substream::Certification, i);
            let (label, c) = certify_length_dependent(base, &ex.x, &policy, config, &mut pred, &mut cert)?;
            Ok((label == ex.label).then(|| c.reported_radius()))
        })
        .collect::<Result<_>>()?;

    Ok(radius_at_accuracy(&radii, tau))
}

/// Fraction of samples that are correct with reported radius at least `r`;
/// `None` marks a misclassified sample.
pub fn certified_accuracy(radii: &[Option<usize>], r: usize) -> f64 {
    if radii.is_empty() {
        return 0.0;
    }
    radii.iter().filter(|c| c.is_some_and(|cr| cr >= r)).count() as f64 / radii.len() as f64
}

/// Largest `r` whose certified accuracy reaches `tau`.
pub fn radius_at_accuracy(radii: &[Option<usize>], tau: f64) -> RadiusAccuracy {
    let acc0 = certified_accuracy(radii, 0);
    if acc0 < tau {
        return RadiusAccuracy {
            radius: None,
            accuracy: acc0,
        };
    }
    let top = radii.iter().flatten().copied().max().unwrap_or(0);
    let mut best = RadiusAccuracy {
        radius: Some(0),
        accuracy: acc0,
    };
    for r in 1..=top {
        let acc = certified_accuracy(radii, r);
        if acc < tau {
            break;
        }
        best = RadiusAccuracy {
            radius: Some(r),
            accuracy: acc,
        };
    }
    best
}

/// Trace of a golden-section search.
#[derive(Clone, Debug, PartialEq)]
pub struct GoldenSearch {
    /// Midpoint of the final bracket.
    pub argmax: f64,
    /// Bracket before each iteration and after the last.
    pub brackets: Vec<(f64, f64)>,
}

impl GoldenSearch {
    pub fn iterations(&self) -> usize {
        self.brackets.len() - 1
    }
}

/// Golden-section search for a maximum on `[low, high]`.
///
/// Both probes are evaluated every iteration. When the lower probe `m1` beats
/// the upper probe `m2` the bracket becomes `[low, m2]`, otherwise `[m1, high]`;
/// either way it shrinks by `1 - (3 - √5)/2 ≈ 0.618`. Stops once the width is
/// at most `tol`.
pub fn golden_section_search<T, F, B>(mut low: f64, mut high: f64, tol: f64, mut f: F, beats: B) -> Result<GoldenSearch>
where
    F: FnMut(f64) -> Result<T>,
    B: Fn(&T, &T) -> bool,
{
    if !(tol > 0.0) {
        return Err(Error::invalid(format!("tolerance {tol} must be positive")));
    }
    if !(low.is_finite() && high.is_finite() && low <= high) {
        return Err(Error::invalid(format!("bad bracket [{low}, {high}]")));
    }
    let mut brackets = vec![(low, high)];
    while high - low > tol {
        let step = GOLDEN_FRACTION * (high - low);
        let (m1, m2) = (low + step, high - step);
        let (v1, v2) = (f(m1)?, f(m2)?);
        if beats(&v1, &v2) {
            high = m2;
        } else {
            low = m1;
        }
        brackets.push((low, high));
    }
    Ok(GoldenSearch {
        argmax: 0.5 * (low + high),
        brackets,
    })
}

/// Settings for [`optimize_expected_lengths`].
#[derive(Clone, Debug)]
pub struct CalibrationParams {
    /// Target certified accuracy.
    pub tau: f64,
    /// Golden-section stopping width.
    pub tol: f64,
    /// Samples drawn per bin.
    pub m: usize,
    /// Sets `K = (1 - rate) · midpoint` for the first bin.
    pub first_bin_rate: f64,
    /// Monte Carlo settings for each probe.
    pub certify: CertifyConfig,
}

impl Default for CalibrationParams {
    fn default() -> Self {
        CalibrationParams {
            tau: 0.75,
            tol: 1.0,
            m: 100,
            first_bin_rate: DEFAULT_FIRST_BIN_RATE,
            certify: CertifyConfig {
                n_pred: 32,
                n_cert: 256,
                ..CertifyConfig::default()
            },
        }
    }
}

impl CalibrationParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) {
            return Err(Error::invalid(format!("tol = {} must be positive", self.tol)));
        }
        if self.m == 0 {
            return Err(Error::invalid("m must be positive"));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::invalid(format!("tau = {} must lie in [0, 1]", self.tau)));
        }
        if !(0.0..1.0).contains(&self.first_bin_rate) {
            return Err(Error::invalid("first-bin rate must lie in [0, 1)"));
        }
        self.certify.validate()
    }
}

/// Outcome of calibrating one bin.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinCalibration {
    pub bin: usize,
    /// Search bracket; equal ends for the first bin, which is not searched.
    pub low: f64,
    pub high: f64,
    pub k: f64,
    pub samples: usize,
    /// Radius and accuracy at the chosen `K` (absent for the first bin).
    pub achieved: Option<RadiusAccuracy>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    #[serde(skip)]
    pub boundaries: Vec<f64>,
    pub expected_lengths: Vec<f64>,
    pub bins: Vec<BinCalibration>,
}

impl CalibrationResult {
    pub fn policy(&self) -> Result<DeletionPolicy> {
        DeletionPolicy::binned(self.boundaries.clone(), self.expected_lengths.clone())
    }
}

/// Search bracket `[0.01 g_{i+1}, 0.3 g_i]` for bin `i`, ordered.
pub fn search_bracket(lower_edge: f64, upper_edge: f64) -> (f64, f64) {
    let (low, high) = (0.01 * upper_edge, 0.3 * lower_edge);
    if low > high {
        log::warn!("empty bracket [{low}, {high}] for bin [{lower_edge}, {upper_edge}); searching [{high}, {low}]");
        (high, low)
    } else {
        (low, high)
    }
}

fn draw_samples<'a, R: Rng>(pool: &[&'a Example], m: usize, bin: usize, rng: &mut R) -> Vec<&'a Example> {
    if pool.len() >= m {
        index::sample(rng, pool.len(), m).into_iter().map(|i| pool[i]).collect()
    } else {
        log::warn!("bin {bin} has {} samples, fewer than {m}; sampling with replacement", pool.len());
        (0..m).map(|_| *pool.choose(rng).expect("pool is non-empty")).collect()
    }
}

/// Chooses `K` for every bin after the first by golden-section search.
///
/// Each bin draws `m` samples with lengths in the bin and searches the
/// bracket from [`search_bracket`]; the open last bin uses its longest
/// sample as upper edge. Every probe within a bin reuses one seed, so the
/// objective is a deterministic function of `K`.
pub fn optimize_expected_lengths(
    base: &dyn BaseClassifier,
    data: &[Example],
    bins: &BinSpec,
    params: &CalibrationParams,
    seed: u64,
) -> Result<CalibrationResult> {
    params.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyInput("no calibration data".into()));
    }
    let nb = bins.num_bins();
    let b = &bins.boundaries;
    let mut pools: Vec<Vec<&Example>> = vec![Vec::new(); nb];
    for ex in data {
        pools[bin_index(b, ex.x.len() as f64)].push(ex);
    }

    let first_k = if b[1].is_finite() {
        (1.0 - params.first_bin_rate) * 0.5 * (b[0] + b[1])
    } else {
        let mean = data.iter().map(|e| e.x.len()).sum::<usize>() as f64 / data.len() as f64;
        (1.0 - params.first_bin_rate) * mean
    };
    if !(first_k > 0.0) {
        return Err(Error::invalid("first bin would get a non-positive expected length"));
    }
    let mut results = vec![BinCalibration {
        bin: 0,
        low: first_k,
        high: first_k,
        k: first_k,
        samples: pools[0].len(),
        achieved: None,
    }];

    for (i, pool) in pools.iter().enumerate().skip(1) {
        if pool.is_empty() {
            return Err(Error::EmptyInput(format!("bin {i} [{}, {}) has no samples", b[i], b[i + 1])));
        }
        let mut rng = stream(seed, Substream::Calibration, i as u64);
        let chosen: Vec<Example> = draw_samples(pool, params.m, i, &mut rng).into_iter().cloned().collect();
        let upper_edge = if b[i + 1].is_finite() {
            b[i + 1]
        } else {
            chosen.iter().map(|e| e.x.len()).max().unwrap_or(0) as f64
        };
        let (low, high) = search_bracket(b[i], upper_edge);
        let probe_seed = derive_seed(seed, Substream::Calibration, 1 << 32 | i as u64);
        let objective = |k: f64| max_cert_radius(base, k, &chosen, params.tau, &params.certify, probe_seed);
        let search = golden_section_search(low, high, params.tol, objective, RadiusAccuracy::beats)?;
        let k = search.argmax;
        if !(k > 0.0) {
            return Err(Error::invalid(format!("bin {i} search settled on non-positive K = {k}")));
        }
        let achieved = objective(k)?;
        log::info!(
            "bin {i} [{}, {}): K = {k:.3} after {} iterations, radius {:?} at accuracy {:.3}",
            b[i],
            b[i + 1],
            search.iterations(),
            achieved.radius,
            achieved.accuracy
        );
        results.push(BinCalibration {
            bin: i,
            low,
            high,
            k,
            samples: chosen.len(),
            achieved: Some(achieved),
        });
    }

    Ok(CalibrationResult {
        boundaries: b.clone(),
        expected_lengths: results.iter().map(|r| r.k).collect(),
        bins: results,
    })
}
