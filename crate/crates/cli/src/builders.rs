//! Parsing of classifier and policy descriptions given on the command line.

use std::path::Path;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use delcert::classifiers::{
    BaseClassifier, ConstantClassifier, Endpoint, HashClassifier, KeywordClassifier, RemoteClassifier,
    RemoteOptions,
};
use delcert::mechanism::DeletionPolicy;
use delcert::sequence::TokenTable;

/// How to reach a remote classifier.
#[derive(Clone, Debug)]
pub struct RemoteSettings {
    pub endpoint: Option<String>,
    pub max_batch: usize,
    pub timeout_secs: f64,
    pub attempts: u32,
}

/// Builds a classifier from one of
/// `constant:LABEL[:CLASSES]`, `keyword:W1,W2,..[:THRESHOLD]`,
/// `hash:SEED:CLASSES`, `remote[:ENDPOINT]`.
///
/// Keywords that are not integers are interned into `table`, so they must be
/// parsed before a text dataset that uses the same table.
pub fn build_classifier(
    desc: &str,
    table: &mut TokenTable,
    remote: &RemoteSettings,
) -> Result<Box<dyn BaseClassifier>> {
    let (kind, rest) = desc.split_once(':').unwrap_or((desc, ""));
    let parts: Vec<&str> = if rest.is_empty() { Vec::new() } else { rest.split(':').collect() };
    let num = |s: &str, what: &str| -> Result<u64> {
        s.parse::<u64>().with_context(|| format!("classifier `{desc}`: bad {what} `{s}`"))
    };
    Ok(match (kind, parts.as_slice()) {
        ("constant", [label]) => {
            let label = num(label, "label")? as usize;
            Box::new(ConstantClassifier::new(label, (label + 1).max(2))?)
        }
        ("constant", [label, classes]) => Box::new(ConstantClassifier::new(
            num(label, "label")? as usize,
            num(classes, "class count")? as usize,
        )?),
        ("keyword", [words, rest @ ..]) if rest.len() <= 1 => {
            let threshold = match rest.first() {
                Some(t) => num(t, "threshold")? as usize,
                None => 1,
            };
            let tokens = words
                .split(',')
                .filter(|w| !w.is_empty())
                .map(|w| w.parse::<u32>().unwrap_or_else(|_| table.intern(w)))
                .collect::<Vec<_>>();
            if tokens.is_empty() {
                bail!("classifier `{desc}`: no keywords");
            }
            Box::new(KeywordClassifier::new(tokens, threshold))
        }
        ("hash", [seed, classes]) => Box::new(HashClassifier::new(
            num(seed, "seed")?,
            num(classes, "class count")? as usize,
        )?),
        ("remote", endpoint) => {
            let endpoint = match (endpoint, &remote.endpoint) {
                ([], Some(e)) => e.clone(),
                ([], None) => bail!("remote classifier needs --endpoint"),
                // host:port splits on the colon
                (parts, _) => parts.join(":"),
            };
            let endpoint: Endpoint = endpoint.parse()?;
            if !(remote.timeout_secs > 0.0) {
                bail!("timeout must be positive");
            }
            let options = RemoteOptions {
                max_batch: remote.max_batch,
                timeout: Duration::from_secs_f64(remote.timeout_secs),
                attempts: remote.attempts,
            };
            let client = RemoteClassifier::connect(endpoint, options)?;
            log::info!("connected to `{}` at {}", client.name(), client.endpoint());
            Box::new(client)
        }
        _ => bail!("unrecognised classifier `{desc}` (constant:L[:C], keyword:W,..[:T], hash:S:C, remote[:ENDPOINT])"),
    })
}

/// Builds a deletion policy from a JSON file, inline JSON, or one of
/// `fixed:P`, `length:P_LB:P:K`, `matched:P` (parity with a fixed rate `P`
/// at the dataset's mean length).
pub fn build_policy(desc: &str, mean_length: f64) -> Result<DeletionPolicy> {
    let desc = desc.trim();
    let policy: DeletionPolicy = if desc.starts_with('{') {
        serde_json::from_str(desc).context("inline policy JSON")?
    } else if let Some((kind, rest)) = desc.split_once(':').filter(|(k, _)| !Path::new(k).exists()) {
        let nums = rest
            .split(':')
            .map(|s| s.parse::<f64>().with_context(|| format!("policy `{desc}`: bad number `{s}`")))
            .collect::<Result<Vec<_>>>()?;
        match (kind, nums.as_slice()) {
            ("fixed", [p]) => DeletionPolicy::fixed(*p)?,
            ("length", [p_lb, p, k]) => {
                if k.fract() != 0.0 || *k < 0.0 {
                    bail!("policy `{desc}`: K must be a non-negative integer");
                }
                DeletionPolicy::length_dependent(*p_lb, *p, *k as u64)?
            }
            ("matched", [p]) => DeletionPolicy::matched_to_fixed(*p, mean_length)?,
            _ => bail!("unrecognised policy `{desc}` (fixed:P, length:P_LB:P:K, matched:P, or JSON)"),
        }
    } else {
        let text = std::fs::read_to_string(desc).with_context(|| format!("reading policy file {desc}"))?;
        serde_json::from_str(&text).with_context(|| format!("parsing policy file {desc}"))?
    };
    policy.validate()?;
    Ok(policy)
}

/// Comma-separated numbers, with `inf` allowed.
pub fn parse_list(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| match t {
            "inf" | "Infinity" | "∞" => Ok(f64::INFINITY),
            _ => t.parse::<f64>().with_context(|| format!("bad number `{t}`")),
        })
        .collect()
}
