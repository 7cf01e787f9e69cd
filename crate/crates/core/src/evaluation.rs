//! Certifies a whole dataset.
//!
//! Each input draws its prediction and certification samples from substreams
//! keyed by its index, so results do not depend on scheduling or thread count
//! and output order matches input order.

use std::time::Instant;

use rayon::prelude::*;

use crate::certification::{certify_length_dependent, CertifyConfig};
use crate::classifiers::BaseClassifier;
use crate::dataset::Example;
use crate::error::Result;
use crate::mechanism::DeletionPolicy;
use crate::report::EvalRecord;
use crate::seeding::{stream, Substream};

/// Certifies `examples[i]` with seeds derived from `(seed, i)`.
pub fn certify_example(
    base: &dyn BaseClassifier,
    index: usize,
    example: &Example,
    policy: &DeletionPolicy,
    config: &CertifyConfig,
    seed: u64,
    timing: bool,
) -> Result<EvalRecord> {
    let start = Instant::now();
    let mut pred = stream(seed, Substream::Prediction, index as u64);
    let mut cert = stream(seed, Substream::Certification, index as u64);
    let (label, c) = certify_length_dependent(base, &example.x, policy, config, &mut pred, &mut cert)?;
    let correct = label == example.label;
    Ok(EvalRecord {
        index,
        length: example.x.len(),
        true_label: example.label,
        predicted_label: label,
        radius: if correct { c.reported_radius() } else { 0 },
        log10_cc: if correct { c.log10_cardinality } else { 0.0 },
        abstained: c.radius.is_none(),
        t1_lb: c.t1_lb,
        t2_ub: c.t2_ub,
        seconds: timing.then(|| start.elapsed().as_secs_f64()),
    })
}

/// Certifies every example in parallel on the current rayon pool.
pub fn certify_dataset(
    base: &dyn BaseClassifier,
    examples: &[Example],
    policy: &DeletionPolicy,
    config: &CertifyConfig,
    seed: u64,
    timing: bool,
) -> Result<Vec<EvalRecord>> {
    config.validate()?;
    policy.validate()?;
    examples
        .par_iter()
        .enumerate()
        .map(|(i, ex)| certify_example(base, i, ex, policy, config, seed, timing))
        .collect()
}
