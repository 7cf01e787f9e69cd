//! Acceptance run: one PASS/FAIL line per criterion, non-zero exit if any
//! criterion fails. Tolerances are fixed constants below and are not tuned
//! to make results pass.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use delcert::bounds::{fixed_rate_lb, pairwise_lb, BoundInputs, PairwiseGeometry};
use delcert::calibration::golden_section_search;
use delcert::certification::{certify_from_bounds, certify_general_from_bounds, region_log_cardinality, CertifyConfig};
use delcert::classifiers::KeywordClassifier;
use delcert::dataset::{load_dataset, DatasetFormat};
use delcert::estimation::clopper_pearson_lb;
use delcert::evaluation::certify_dataset;
use delcert::mechanism::DeletionPolicy;
use delcert::oracle::{run_suite, SuiteConfig, NUMERICAL_SLACK};
use delcert::report::{certified_accuracy_curve, default_thresholds, write_records, CurveMode};
use delcert::sequence::{enumerate_ball, EditOps, TokenSequence, TokenTable, Vocabulary, DEFAULT_BALL_CAP};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

const SOUNDNESS_TABLES: usize = 100;
const SOUNDNESS_BUDGET: Duration = Duration::from_secs(300);
const RECOVERY_GAP: f64 = 1e-6;
const EQUIVALENCE_INSTANCES: usize = 60;
const COVERAGE_TRIALS: usize = 2000;
const COVERAGE_N: u64 = 500;
const COVERAGE_ALPHA: f64 = 0.05;
const COVERAGE_MARGIN: f64 = 0.01;
const GOLDEN_TOL: f64 = 1.0;
const SHRINK: f64 = 0.618;
const SHRINK_TOL: f64 = 0.001;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn soundness() -> Outcome {
    let config = SuiteConfig {
        tables: SOUNDNESS_TABLES,
        vocab_size: 2,
        lengths: vec![4, 5, 6],
        radius: 2,
        rates: vec![0.5, 0.7, 0.9],
        ops: EditOps::ALL,
        seed: 20_240_601,
        ..SuiteConfig::default()
    };
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let start = Instant::now();
    let report = match pool.install(|| run_suite(&config, 0.0)) {
        Ok(r) => r,
        Err(e) => return outcome(false, format!("suite error: {e}")),
    };
    let elapsed = start.elapsed();
    let violations = report.violation_count();
    outcome(
        violations == 0 && elapsed <= SOUNDNESS_BUDGET,
        format!(
            "{} tables, {} checks, {violations} violations beyond {NUMERICAL_SLACK:e}, min margins lb {:.3e} ub {:.3e}, {:.1}s single-threaded",
            config.tables,
            report.checks.len(),
            report.min_lb_margin(),
            report.min_ub_margin(),
            elapsed.as_secs_f64()
        ),
    )
}

/// Retained-count pmf by the ratio recurrence, independent of the library.
fn pmf_by_recurrence(n: usize, p_del: f64) -> Vec<f64> {
    let mut out = vec![p_del.powi(n as i32)];
    for k in 0..n {
        let next = out[k] * (n - k) as f64 / (k + 1) as f64 * (1.0 - p_del) / p_del;
        out.push(next);
    }
    out
}

fn fixed_rate_recovery() -> Outcome {
    let p = 0.9;
    let mut worst_gap: f64 = 0.0;
    let mut failures = Vec::new();
    for len in [100usize, 200] {
        let n = len - 3;
        for mu in [0.9, 0.99] {
            let g = PairwiseGeometry::new(len, len, n, p, p).unwrap();
            let lb = pairwise_lb(&BoundInputs::new(mu, g).unwrap());
            let closed = fixed_rate_lb(mu, len, len, n, p);
            let w = mu - 1.0 + p.powi(3);
            let pmf = pmf_by_recurrence(n, p);
            let mut acc = 0.0;
            let h = pmf
                .iter()
                .position(|&m| {
                    acc += m;
                    acc >= w
                })
                .unwrap_or(n);
            let slack = (1.0 - p).powi(h as i32) * p.powi((n - h) as i32);
            let gap = lb - closed;
            worst_gap = worst_gap.max(gap.abs());
            if !(gap >= 0.0 && gap <= slack && gap < RECOVERY_GAP) {
                failures.push(format!("|x|={len} mu={mu}: gap {gap:e}, slack {slack:e}"));
            }
        }
    }
    outcome(
        failures.is_empty(),
        if failures.is_empty() {
            format!("4 cases, largest gap {worst_gap:.3e} < {RECOVERY_GAP:e}")
        } else {
            failures.join("; ")
        },
    )
}

fn algorithm_equivalence() -> Outcome {
    let mut rng = ChaCha20Rng::seed_from_u64(77);
    let op_sets = ["del", "ins", "sub", "del,ins", "del,sub", "ins,sub", "del,ins,sub"];
    let mut mismatches = Vec::new();
    let mut certified = 0;
    for i in 0..EQUIVALENCE_INSTANCES {
        let vocab_size = rng.gen_range(2..=3usize);
        let vocab = Vocabulary::new(vocab_size).unwrap();
        let len = rng.gen_range(2..=6usize);
        let x = TokenSequence::new((0..len).map(|_| rng.gen_range(0..vocab_size as u32)).collect());
        let ops: EditOps = op_sets[i % op_sets.len()].parse().unwrap();
        let policy = if i % 3 == 2 {
            DeletionPolicy::binned(vec![0.0, 3.0, 5.0, f64::INFINITY], vec![0.3, 0.5, 0.6]).unwrap()
        } else {
            let p_lb = rng.gen_range(0.3..0.8);
            DeletionPolicy::length_dependent(p_lb, rng.gen_range(p_lb..0.99), rng.gen_range(1..4)).unwrap()
        };
        let t1 = rng.gen_range(0.6..0.99999);
        let t2 = rng.gen_range(0.0..(1.0 - t1));
        let r_max = 3;
        let a1 = certify_from_bounds(len, t1, t2, &policy, ops, r_max);
        let a2 = certify_general_from_bounds(&x, t1, t2, &policy, ops, &vocab, r_max, DEFAULT_BALL_CAP);
        match (a1, a2) {
            (Ok(r1), Ok(r2)) if r1 == r2 => certified += usize::from(r1.unwrap_or(0) > 0),
            (r1, r2) => mismatches.push(format!("x={:?} ops={ops} {policy:?}: {r1:?} vs {r2:?}", x.tokens())),
        }
    }
    outcome(
        mismatches.is_empty(),
        if mismatches.is_empty() {
            format!("{EQUIVALENCE_INSTANCES} instances identical ({certified} with radius > 0)")
        } else {
            format!("{} mismatches, first: {}", mismatches.len(), mismatches[0])
        },
    )
}

fn clopper_pearson_coverage() -> Outcome {
    let mut rng = ChaCha20Rng::seed_from_u64(9);
    let target = 1.0 - COVERAGE_ALPHA - COVERAGE_MARGIN;
    let mut parts = Vec::new();
    let mut pass = true;
    for p in [0.1, 0.5, 0.9] {
        let mut covered = 0;
        for _ in 0..COVERAGE_TRIALS {
            let k = (0..COVERAGE_N).filter(|_| rng.gen::<f64>() < p).count() as u64;
            if clopper_pearson_lb(k, COVERAGE_N, COVERAGE_ALPHA).unwrap() <= p {
                covered += 1;
            }
        }
        let rate = covered as f64 / COVERAGE_TRIALS as f64;
        pass &= rate >= target;
        parts.push(format!("p={p}: {rate:.4}"));
    }
    outcome(pass, format!("{} (need >= {target:.2})", parts.join(", ")))
}

fn cardinality_bound() -> Outcome {
    let mut rng = ChaCha20Rng::seed_from_u64(31);
    let op_sets = ["del", "ins", "sub", "del,ins", "del,sub", "ins,sub", "del,ins,sub"];
    let mut instances = 0;
    let mut failures = Vec::new();
    for vocab_size in 2..=3usize {
        let vocab = Vocabulary::new(vocab_size).unwrap();
        for len in 0..=6usize {
            for _ in 0..3 {
                let x = TokenSequence::new((0..len).map(|_| rng.gen_range(0..vocab_size as u32)).collect());
                for ops in op_sets {
                    let ops: EditOps = ops.parse().unwrap();
                    for r in 0..=2 {
                        let ball = enumerate_ball(&x, r, ops, &vocab).unwrap().len();
                        let bound = region_log_cardinality(len, r, ops, vocab_size);
                        instances += 1;
                        if !(bound <= (ball as f64).log10()) {
                            failures.push(format!("x={:?} ops={ops} r={r}: {bound} > log10 {ball}", x.tokens()));
                        }
                    }
                }
            }
        }
    }
    outcome(
        failures.is_empty(),
        if failures.is_empty() {
            format!("{instances} instances, bound never exceeds log10 |ball|")
        } else {
            format!("{} failures, first: {}", failures.len(), failures[0])
        },
    )
}

fn adaptive_rate_parity() -> Outcome {
    let policy = DeletionPolicy::length_dependent(0.9, 1.0, 23).unwrap();
    let at_mean = policy.deletion_rate(230).unwrap();
    let matched = DeletionPolicy::matched_to_fixed(0.9, 230.0).unwrap();
    let mut pass = at_mean == 0.9 && matched == policy;
    // every mean with integral 0.1 * mean
    for m in 1..=500u64 {
        let p = DeletionPolicy::matched_to_fixed(0.9, (10 * m) as f64).unwrap();
        pass &= p.deletion_rate(10 * m as usize).unwrap() == 0.9;
        pass &= matches!(p, DeletionPolicy::LengthDependent { k, .. } if k == m);
    }
    outcome(
        pass,
        format!("rate at 230 = {at_mean:?}, matched policy {matched:?}, means 10..=5000 exact"),
    )
}

fn golden_section() -> Outcome {
    let search = match golden_section_search(10.0, 90.0, GOLDEN_TOL, |k| Ok(-(k - 50.0) * (k - 50.0)), |a: &f64, b: &f64| a > b) {
        Ok(s) => s,
        Err(e) => return outcome(false, e.to_string()),
    };
    let ratios: Vec<f64> = search
        .brackets
        .windows(2)
        .map(|w| (w[1].1 - w[1].0) / (w[0].1 - w[0].0))
        .collect();
    let worst = ratios.iter().map(|r| (r - SHRINK).abs()).fold(0.0, f64::max);
    let bound = ((80.0 / GOLDEN_TOL).ln() / (1.0 / SHRINK).ln()).ceil() as usize + 1;
    let pass = (search.argmax - 50.0).abs() <= GOLDEN_TOL && worst <= SHRINK_TOL && search.iterations() <= bound;
    outcome(
        pass,
        format!(
            "argmax {:.4}, {} iterations (bound {bound}), shrink factors within {worst:.2e} of {SHRINK}",
            search.argmax,
            search.iterations()
        ),
    )
}

fn tests_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests")
}

fn end_to_end() -> Outcome {
    let mut table = TokenTable::new();
    let keywords = vec![table.intern("good"), table.intern("great")];
    let ds = load_dataset(&tests_dir().join("fixtures/reviews50.jsonl"), DatasetFormat::Auto, table).unwrap();
    let base = KeywordClassifier::new(keywords, 1);
    let policy = DeletionPolicy::length_dependent(0.8, 0.99, 2).unwrap();
    let config = CertifyConfig {
        n_pred: 200,
        n_cert: 1000,
        vocab_size: ds.inferred_vocab_size(),
        ..CertifyConfig::default()
    };
    let mut outputs = Vec::new();
    for threads in [1, 4] {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        let records = pool
            .install(|| certify_dataset(&base, &ds.examples, &policy, &config, 2024, false))
            .unwrap();
        let mut buf = Vec::new();
        write_records(&mut buf, &records).unwrap();
        outputs.push((buf, records));
    }
    let golden = fs::read(tests_dir().join("golden/reviews50_results.jsonl")).unwrap();
    let identical = outputs.iter().all(|(b, _)| *b == golden);
    let records = &outputs[0].1;
    let zero_when_wrong = records.iter().filter(|r| !r.correct()).all(|r| r.radius == 0 && r.log10_cc == 0.0);
    let mut monotone = true;
    for mode in [CurveMode::Radius, CurveMode::LogCardinality] {
        let curve = certified_accuracy_curve(records, &default_thresholds(records, mode, 40), mode).unwrap();
        monotone &= curve.windows(2).all(|w| w[1].accuracy <= w[0].accuracy);
    }
    let wrong = records.iter().filter(|r| !r.correct()).count();
    outcome(
        ds.len() == 50 && identical && zero_when_wrong && monotone,
        format!(
            "{} inputs, byte-identical to golden at 1 and 4 threads: {identical}, curves non-increasing: {monotone}, {wrong} misclassified all with CR = CC = 0: {zero_when_wrong}",
            ds.len()
        ),
    )
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("bound soundness", soundness),
        ("fixed-rate recovery", fixed_rate_recovery),
        ("algorithm equivalence", algorithm_equivalence),
        ("confidence coverage", clopper_pearson_coverage),
        ("cardinality lower bound", cardinality_bound),
        ("adaptive rate parity", adaptive_rate_parity),
        ("calibration optimizer", golden_section),
        ("end-to-end golden run", end_to_end),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        let start = Instant::now();
        let o = check();
        println!(
            "{} {name}: {} [{:.2}s]",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail,
            start.elapsed().as_secs_f64()
        );
        failed += usize::from(!o.pass);
    }
    println!("acceptance: {} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
