//! Statistical comparison of original and synthetic trace sets.
//!
//! Latencies are compared per (API, upstream caller) group: empirical
//! quantiles, the two-sample Kolmogorov-Smirnov statistic, and relative
//! median error, gated against thresholds once both sides have enough
//! samples. Per API, the report also carries the L1 distance between
//! first-step transition distributions. This is exactly the comparison that
//! exposes a mean-only model: pooled statistics erase caller-conditioned
//! behavior, and the per-caller median error shows it.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::causal::collect_observations;
use crate::ingest::TraceTree;
use crate::pfa::extract_steps;
use crate::stats::{ks_statistic, quantile_sorted};
use crate::topology::ApiId;

pub const VALIDATION_VERSION: &str = "palette-validation/v1";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    /// Maximum two-sample KS statistic per gated group.
    pub ks_max: f64,
    /// Maximum |median_orig - median_synth| / median_orig per gated group.
    pub median_error_max: f64,
    /// Groups with fewer samples on either side are reported but not gated.
    pub min_samples: usize,
    /// Maximum fraction of spans belonging to APIs present in only one
    /// dataset.
    pub uncovered_fraction_max: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds {
            ks_max: 0.15,
            median_error_max: 0.10,
            min_samples: 1000,
            uncovered_fraction_max: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupReport {
    pub api: ApiId,
    pub caller: Option<ApiId>,
    pub original_count: usize,
    pub synthetic_count: usize,
    pub original_p50_us: f64,
    pub original_p90_us: f64,
    pub original_p99_us: f64,
    pub synthetic_p50_us: f64,
    pub synthetic_p90_us: f64,
    pub synthetic_p99_us: f64,
    pub ks: f64,
    pub relative_median_error: f64,
    /// Whether this group counts toward the overall verdict.
    pub gated: bool,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructureReport {
    pub api: ApiId,
    pub first_step_l1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncoveredApi {
    pub api: ApiId,
    pub side: String,
    pub span_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub version: String,
    pub thresholds: Thresholds,
    pub groups: Vec<GroupReport>,
    pub structure: Vec<StructureReport>,
    pub uncovered: Vec<UncoveredApi>,
    pub uncovered_fraction: f64,
    pub passed: bool,
}

impl ValidationReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    /// Plain-text summary, one line per comparison group.
    pub fn summary(&self) -> String {
        let mut out = String::new();
        for g in &self.groups {
            let caller = g
                .caller
                .as_ref()
                .map(|c| c.to_string())
                .unwrap_or_else(|| "(root)".to_string());
            out.push_str(&format!(
                "{:<30} caller={:<24} n={}/{} p50={:.0}/{:.0} ks={:.4} med_err={:.4} {}\n",
                g.api.to_string(),
                caller,
                g.original_count,
                g.synthetic_count,
                g.original_p50_us,
                g.synthetic_p50_us,
                g.ks,
                g.relative_median_error,
                match (g.gated, g.pass) {
                    (false, _) => "ungated",
                    (true, true) => "pass",
                    (true, false) => "FAIL",
                }
            ));
        }
        for s in &self.structure {
            out.push_str(&format!(
                "{:<30} first-step L1 = {:.4}\n",
                s.api.to_string(),
                s.first_step_l1
            ));
        }
        for u in &self.uncovered {
            out.push_str(&format!(
                "uncovered: {} only in {} ({} spans)\n",
                u.api, u.side, u.span_count
            ));
        }
        out.push_str(&format!(
            "uncovered span fraction: {:.4}\noverall: {}\n",
            self.uncovered_fraction,
            if self.passed { "PASS" } else { "FAIL" }
        ));
        out
    }
}

/// Empirical CDF as (value, cumulative probability) pairs, for external
/// plotting. Ties collapse to the highest cumulative step.
pub fn cdf_points(sorted_values: &[f64]) -> Vec<(f64, f64)> {
    let n = sorted_values.len();
    let mut out: Vec<(f64, f64)> = Vec::new();
    for (i, v) in sorted_values.iter().enumerate() {
        let p = (i + 1) as f64 / n as f64;
        match out.last_mut() {
            Some(last) if last.0 == *v => last.1 = p,
            _ => out.push((*v, p)),
        }
    }
    out
}

pub type CdfSeries = Vec<(f64, f64)>;

/// Per-group CDFs of both datasets, keyed by a filesystem-safe group name.
pub fn export_cdfs(
    original: &[TraceTree],
    synthetic: &[TraceTree],
) -> Vec<(String, CdfSeries, CdfSeries)> {
    let orig = grouped_durations(original);
    let synth = grouped_durations(synthetic);
    let mut out = Vec::new();
    for ((api, caller), orig_values) in &orig {
        let Some(synth_values) = synth.get(&(api.clone(), caller.clone())) else {
            continue;
        };
        let caller_part = caller
            .as_ref()
            .map(|c| c.key())
            .unwrap_or_else(|| "root".to_string());
        let name: String = format!("{}__from__{}", api.key(), caller_part)
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '_' { c } else { '-' })
            .collect();
        out.push((name, cdf_points(orig_values), cdf_points(synth_values)));
    }
    out
}

type GroupKey = (ApiId, Option<ApiId>);

fn grouped_durations(traces: &[TraceTree]) -> BTreeMap<GroupKey, Vec<f64>> {
    let mut out: BTreeMap<GroupKey, Vec<f64>> = BTreeMap::new();
    for (api, observations) in collect_observations(traces) {
        for obs in observations {
            out.entry((api.clone(), obs.caller.clone()))
                .or_default()
                .push(obs.total_us);
        }
    }
    for values in out.values_mut() {
        values.sort_by(|a, b| a.total_cmp(b));
    }
    out
}

fn first_step_distributions(traces: &[TraceTree]) -> BTreeMap<ApiId, BTreeMap<String, f64>> {
    let mut counts: BTreeMap<ApiId, BTreeMap<String, u64>> = BTreeMap::new();
    for trace in traces {
        for node in trace.preorder() {
            let steps = extract_steps(node, 0);
            let label = match steps.first() {
                None => "finish".to_string(),
                Some(set) => set
                    .iter()
                    .map(ApiId::to_string)
                    .collect::<Vec<_>>()
                    .join("||"),
            };
            *counts
                .entry(node.span.api())
                .or_default()
                .entry(label)
                .or_default() += 1;
        }
    }
    counts
        .into_iter()
        .map(|(api, by_label)| {
            let total: u64 = by_label.values().sum();
            (
                api,
                by_label
                    .into_iter()
                    .map(|(l, c)| (l, c as f64 / total as f64))
                    .collect(),
            )
        })
        .collect()
}

fn l1(a: &BTreeMap<String, f64>, b: &BTreeMap<String, f64>) -> f64 {
    let mut keys: Vec<&String> = a.keys().chain(b.keys()).collect();
    keys.sort();
    keys.dedup();
    keys.into_iter()
        .map(|k| (a.get(k).copied().unwrap_or(0.0) - b.get(k).copied().unwrap_or(0.0)).abs())
        .sum()
}

/// Compare two trace sets and gate against thresholds.
pub fn compare(
    original: &[TraceTree],
    synthetic: &[TraceTree],
    thresholds: &Thresholds,
) -> ValidationReport {
    let orig = grouped_durations(original);
    let synth = grouped_durations(synthetic);

    let mut groups = Vec::new();
    for ((api, caller), orig_values) in &orig {
        let Some(synth_values) = synth.get(&(api.clone(), caller.clone())) else {
            continue;
        };
        let m1 = quantile_sorted(orig_values, 0.5);
        let m2 = quantile_sorted(synth_values, 0.5);
        let relative_median_error = if m1 == 0.0 {
            if m2 == 0.0 {
                0.0
            } else {
                f64::INFINITY
            }
        } else {
            (m1 - m2).abs() / m1
        };
        let ks = ks_statistic(orig_values, synth_values);
        let gated =
            orig_values.len() >= thresholds.min_samples && synth_values.len() >= thresholds.min_samples;
        groups.push(GroupReport {
            api: api.clone(),
            caller: caller.clone(),
            original_count: orig_values.len(),
            synthetic_count: synth_values.len(),
            original_p50_us: m1,
            original_p90_us: quantile_sorted(orig_values, 0.9),
            original_p99_us: quantile_sorted(orig_values, 0.99),
            synthetic_p50_us: m2,
            synthetic_p90_us: quantile_sorted(synth_values, 0.9),
            synthetic_p99_us: quantile_sorted(synth_values, 0.99),
            ks,
            relative_median_error,
            gated,
            pass: !gated
                || (ks <= thresholds.ks_max
                    && relative_median_error <= thresholds.median_error_max),
        });
    }

    // API-level coverage, span weighted.
    let mut total = [0usize; 2];
    let mut missing = [0usize; 2];
    let mut uncovered = Vec::new();
    let count_per_api = |grouped: &BTreeMap<GroupKey, Vec<f64>>| -> BTreeMap<ApiId, usize> {
        let mut out: BTreeMap<ApiId, usize> = BTreeMap::new();
        for ((api, _), values) in grouped {
            *out.entry(api.clone()).or_default() += values.len();
        }
        out
    };
    let orig_apis = count_per_api(&orig);
    let synth_apis = count_per_api(&synth);
    for (side_idx, (side, ours, theirs)) in [
        ("original", &orig_apis, &synth_apis),
        ("synthetic", &synth_apis, &orig_apis),
    ]
    .into_iter()
    .enumerate()
    {
        for (api, count) in ours {
            total[side_idx] += count;
            if !theirs.contains_key(api) {
                missing[side_idx] += count;
                uncovered.push(UncoveredApi {
                    api: api.clone(),
                    side: side.to_string(),
                    span_count: *count,
                });
            }
        }
    }
    let fraction = |m: usize, t: usize| if t == 0 { 0.0 } else { m as f64 / t as f64 };
    let uncovered_fraction = fraction(missing[0], total[0]).max(fraction(missing[1], total[1]));

    let orig_steps = first_step_distributions(original);
    let synth_steps = first_step_distributions(synthetic);
    let structure: Vec<StructureReport> = orig_steps
        .iter()
        .filter_map(|(api, dist)| {
            synth_steps.get(api).map(|other| StructureReport {
                api: api.clone(),
                first_step_l1: l1(dist, other),
            })
        })
        .collect();

    let passed = groups.iter().all(|g| g.pass)
        && uncovered_fraction <= thresholds.uncovered_fraction_max;
    ValidationReport {
        version: VALIDATION_VERSION.to_string(),
        thresholds: *thresholds,
        groups,
        structure,
        uncovered,
        uncovered_fraction,
        passed,
    }
}
