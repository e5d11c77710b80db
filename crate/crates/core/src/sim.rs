//! Deterministic virtual-time execution of a fitted bundle.
//!
//! Per request: walk the root API's automaton, recursively execute each
//! step's callees (concurrent members share a virtual start; the step
//! occupies the max of its members), plug measured child durations into the
//! causal equation, add sampled local work (caller-conditioned for leaves),
//! and emit spans in the input schema. All sampling draws from a stream
//! derived from (seed, request index), so output is byte-identical across
//! runs and independent of scheduling.

use std::collections::{BTreeMap, BinaryHeap};
use std::cmp::Reverse;

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use crate::bundle::ModelBundle;
use crate::causal::{evaluate, expected_value, CausalEquation};
use crate::error::{Error, Result};
use crate::ingest::{Span, TraceTree};
use crate::intervene::validate_bundle;
use crate::pfa::sample_path_capped;
use crate::rng::derive_rng;
use crate::topology::ApiId;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArrivalModel {
    /// Exponential inter-arrival times at this many requests per virtual
    /// second.
    OpenLoop { rate_per_sec: f64 },
    /// A fixed number of in-flight requests; the next request starts when
    /// one completes.
    ClosedLoop { concurrency: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WorkModelKind {
    /// Advance the virtual clock only.
    Virtual,
    /// Additionally burn wall-clock CPU for each span's local work via a
    /// self-calibrated spin loop. Statistics are unaffected.
    Busy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub root: ApiId,
    pub request_count: u64,
    pub seed: u64,
    pub arrivals: ArrivalModel,
    pub work_model: WorkModelKind,
    /// Mean-only baseline: every API takes its pooled mean duration,
    /// ignoring causal structure and caller conditioning.
    pub naive: bool,
    pub max_depth: usize,
}

impl SimConfig {
    pub fn new(root: ApiId, request_count: u64, seed: u64) -> Self {
        SimConfig {
            root,
            request_count,
            seed,
            arrivals: ArrivalModel::ClosedLoop { concurrency: 1 },
            work_model: WorkModelKind::Virtual,
            naive: false,
            max_depth: 64,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.request_count < 1 {
            return Err(Error::SimConfig("request_count must be >= 1".into()));
        }
        if self.max_depth < 1 {
            return Err(Error::SimConfig("max_depth must be >= 1".into()));
        }
        match self.arrivals {
            ArrivalModel::OpenLoop { rate_per_sec } if rate_per_sec <= 0.0 => {
                Err(Error::SimConfig("open-loop rate must be > 0".into()))
            }
            ArrivalModel::ClosedLoop { concurrency } if concurrency < 1 => {
                Err(Error::SimConfig("closed-loop concurrency must be >= 1".into()))
            }
            _ => Ok(()),
        }
    }
}

/// Key-value context carried down the call chain. The upstream caller is a
/// reserved, runtime-maintained field rewritten at every hop; measurement
/// entries are write-once.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Baggage {
    upstream_caller: Option<ApiId>,
    entries: BTreeMap<String, String>,
}

impl Baggage {
    pub fn new() -> Self {
        Baggage::default()
    }

    pub fn upstream_caller(&self) -> Option<&ApiId> {
        self.upstream_caller.as_ref()
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }
}

/// Child baggage: parent entries plus the caller id plus declared upstream
/// measurements. The parent is unchanged; overwriting an existing
/// measurement key is a contract violation.
pub fn make_baggage(
    parent: &Baggage,
    caller: &ApiId,
    declared: &[(String, String)],
) -> Result<Baggage> {
    let mut entries = parent.entries.clone();
    for (key, value) in declared {
        if entries.contains_key(key) {
            return Err(Error::BaggageOverwrite { key: key.clone() });
        }
        entries.insert(key.clone(), value.clone());
    }
    Ok(Baggage {
        upstream_caller: Some(caller.clone()),
        entries,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApiSimStats {
    pub api: ApiId,
    pub executions: u64,
    pub mean_expected_us: f64,
    pub mean_realized_us: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SimStats {
    pub requests: u64,
    pub completed: u64,
    pub aborted_depth: u64,
    pub walk_overruns: u64,
    pub virtual_makespan_us: u64,
    pub per_api: Vec<ApiSimStats>,
}

#[derive(Debug)]
pub struct SimOutput {
    pub spans: Vec<Span>,
    pub stats: SimStats,
}

struct PerApiAccum {
    executions: u64,
    expected_sum: f64,
    realized_sum: f64,
}

struct SimContext<'a> {
    bundle: &'a ModelBundle,
    config: &'a SimConfig,
    /// Per-API pooled mean durations: the fitted expectations used by
    /// live-correction reporting, and the naive baseline's samples.
    means: BTreeMap<ApiId, f64>,
    accum: BTreeMap<ApiId, PerApiAccum>,
    spin: Option<SpinCalibration>,
}

struct RequestState {
    spans: Vec<Span>,
    next_span: u32,
    trace_id: String,
}

/// Execute the bundle. Deterministic: identical (bundle, config) produce
/// byte-identical span output; requests aborted by the depth cap or an
/// automaton walk overrun are counted and skipped.
pub fn simulate(bundle: &ModelBundle, config: &SimConfig) -> Result<SimOutput> {
    config.validate()?;
    if !bundle.is_fitted() {
        return Err(Error::SimConfig(
            "bundle has no fitted causal models; run the fit stage first".into(),
        ));
    }
    let violations = validate_bundle(bundle);
    if let Some(first) = violations.first() {
        return Err(Error::InvalidBundle {
            count: violations.len(),
            first: first.to_string(),
        });
    }
    if bundle.topology.vertex(&config.root).is_none() {
        return Err(Error::UnknownApi(config.root.clone()));
    }

    let means: BTreeMap<ApiId, f64> = bundle
        .topology
        .vertices
        .iter()
        .map(|v| (v.id.clone(), v.mean_duration_us()))
        .collect();
    let mut ctx = SimContext {
        bundle,
        config,
        means,
        accum: BTreeMap::new(),
        spin: match config.work_model {
            WorkModelKind::Busy => Some(SpinCalibration::calibrate()),
            WorkModelKind::Virtual => None,
        },
    };

    let root_slug: String = config
        .root
        .key()
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c } else { '-' })
        .collect();

    let mut stats = SimStats {
        requests: config.request_count,
        ..SimStats::default()
    };
    let mut spans = Vec::new();
    let mut arrivals_rng = derive_rng(config.seed, "arrivals", 0);
    let mut open_clock = 0u64;
    let mut completions: BinaryHeap<Reverse<u64>> = BinaryHeap::new();

    for index in 0..config.request_count {
        let start_us = match config.arrivals {
            ArrivalModel::OpenLoop { rate_per_sec } => {
                let exp = Exp::new(rate_per_sec / 1e6).expect("positive rate");
                open_clock += exp.sample(&mut arrivals_rng).round() as u64;
                open_clock
            }
            ArrivalModel::ClosedLoop { concurrency } => {
                if completions.len() < concurrency {
                    0
                } else {
                    completions.pop().expect("non-empty heap").0
                }
            }
        };

        let mut rng = derive_rng(config.seed, "request", index);
        let mut request = RequestState {
            spans: Vec::new(),
            next_span: 0,
            trace_id: format!("sim-{root_slug}-{index:08}"),
        };
        let outcome = exec_api(
            &mut ctx,
            &config.root,
            start_us as i64,
            None,
            &Baggage::new(),
            &mut rng,
            0,
            &mut request,
        );
        match outcome {
            Ok(duration) => {
                stats.completed += 1;
                let end = start_us + duration;
                stats.virtual_makespan_us = stats.virtual_makespan_us.max(end);
                if let ArrivalModel::ClosedLoop { .. } = config.arrivals {
                    completions.push(Reverse(end));
                }
                spans.extend(request.spans);
            }
            Err(Error::DepthExceeded { .. }) => {
                stats.aborted_depth += 1;
            }
            Err(Error::WalkOverrun { .. }) => {
                stats.walk_overruns += 1;
            }
            Err(other) => return Err(other),
        }
    }

    stats.per_api = ctx
        .accum
        .into_iter()
        .map(|(api, a)| ApiSimStats {
            api,
            executions: a.executions,
            mean_expected_us: a.expected_sum / a.executions as f64,
            mean_realized_us: a.realized_sum / a.executions as f64,
        })
        .collect();
    Ok(SimOutput { spans, stats })
}

#[allow(clippy::too_many_arguments)]
fn exec_api(
    ctx: &mut SimContext<'_>,
    api: &ApiId,
    start_us: i64,
    parent_span_id: Option<&str>,
    baggage: &Baggage,
    rng: &mut ChaCha8Rng,
    depth: usize,
    request: &mut RequestState,
) -> Result<u64> {
    if depth >= ctx.config.max_depth {
        return Err(Error::DepthExceeded {
            api: api.clone(),
            max_depth: ctx.config.max_depth,
        });
    }
    let pfa = ctx
        .bundle
        .pfa(api)
        .ok_or_else(|| Error::UnknownApi(api.clone()))?;
    let equation: &CausalEquation = &ctx
        .bundle
        .gcm(api)
        .ok_or_else(|| Error::UnknownApi(api.clone()))?
        .equation;

    let path = sample_path_capped(pfa, rng, crate::pfa::MAX_WALK_STEPS)?;

    let span_slot = request.spans.len();
    let span_id = format!("s{:04}", request.next_span);
    request.next_span += 1;
    request.spans.push(Span {
        trace_id: request.trace_id.clone(),
        span_id: span_id.clone(),
        parent_span_id: parent_span_id.map(str::to_string),
        service: api.service.clone(),
        operation: api.operation.clone(),
        start_us,
        duration_us: 0,
    });

    let mut cursor = start_us;
    let mut measured: BTreeMap<ApiId, f64> = BTreeMap::new();
    let mut called: BTreeMap<ApiId, bool> = BTreeMap::new();
    for call_set in &path {
        let step_start = cursor;
        let mut realized_end = step_start;
        let mut step_eq = 0.0f64;
        for callee in call_set {
            let child_baggage = make_baggage(baggage, api, &[])?;
            let duration = exec_api(
                ctx,
                callee,
                step_start,
                Some(&span_id),
                &child_baggage,
                rng,
                depth + 1,
                request,
            )?;
            *measured.entry(callee.clone()).or_insert(0.0) += duration as f64;
            called.insert(callee.clone(), true);
            realized_end = realized_end.max(step_start + duration as i64);
            step_eq = step_eq.max(equation.coefficient(callee) * duration as f64);
        }
        // The step occupies the max of its members per the concurrent
        // equation; coefficients above one show up as overhead gaps.
        cursor = realized_end.max(step_start + step_eq.round() as i64);
    }
    let children_extent = (cursor - start_us) as u64;

    let residual = equation.local_work.sample(baggage.upstream_caller(), rng);
    let own_us = if ctx.config.naive {
        ctx.means.get(api).copied().unwrap_or(0.0)
    } else {
        evaluate(equation, &measured, &called)? + residual
    };
    let duration = (own_us.round().max(0.0) as u64).max(children_extent);
    request.spans[span_slot].duration_us = duration;

    if let Some(spin) = &ctx.spin {
        spin.spin(residual.min(5_000.0));
    }

    let expected = expected_value(equation, &ctx.means, baggage.upstream_caller());
    let acc = ctx.accum.entry(api.clone()).or_insert(PerApiAccum {
        executions: 0,
        expected_sum: 0.0,
        realized_sum: 0.0,
    });
    acc.executions += 1;
    acc.expected_sum += expected;
    acc.realized_sum += duration as f64;

    Ok(duration)
}

/// Self-calibrated spin loop for the busy work model.
pub struct SpinCalibration {
    iters_per_us: f64,
}

impl SpinCalibration {
    pub fn calibrate() -> Self {
        let mut iters: u64 = 10_000;
        loop {
            let start = std::time::Instant::now();
            spin_iters(iters);
            let elapsed = start.elapsed();
            if elapsed.as_micros() >= 2_000 || iters >= 1_000_000_000 {
                return SpinCalibration {
                    iters_per_us: iters as f64 / elapsed.as_micros().max(1) as f64,
                };
            }
            iters *= 4;
        }
    }

    pub fn spin(&self, us: f64) {
        spin_iters((self.iters_per_us * us.max(0.0)) as u64);
    }
}

fn spin_iters(iters: u64) {
    let mut acc: u64 = 0x9e3779b97f4a7c15;
    for i in 0..iters {
        acc = std::hint::black_box(acc.rotate_left(7) ^ i);
    }
    std::hint::black_box(acc);
}

/// Virtual-time geometry violations in one synthetic trace: children must
/// nest within their parent, same-start concurrent siblings must overlap,
/// and step groups must be pairwise disjoint.
pub fn check_span_geometry(trace: &TraceTree) -> Vec<String> {
    let mut violations = Vec::new();
    for node in trace.preorder() {
        let p_start = node.span.start_us;
        let p_end = node.span.end_us();
        // Group children by identical start: a simulated concurrent step.
        let mut groups: BTreeMap<i64, Vec<&Span>> = BTreeMap::new();
        for child in &node.children {
            if child.span.start_us < p_start || child.span.end_us() > p_end {
                violations.push(format!(
                    "{}: child {} [{}, {}) escapes parent {} [{p_start}, {p_end})",
                    trace.trace_id,
                    child.span.span_id,
                    child.span.start_us,
                    child.span.end_us(),
                    node.span.span_id,
                ));
            }
            groups.entry(child.span.start_us).or_default().push(&child.span);
        }
        let mut prev_end: Option<i64> = None;
        for (start, members) in &groups {
            if let Some(end) = prev_end {
                if *start < end {
                    violations.push(format!(
                        "{}: sequential steps overlap at {start} (previous ends {end})",
                        trace.trace_id
                    ));
                }
            }
            for (i, a) in members.iter().enumerate() {
                for b in members.iter().skip(i + 1) {
                    if a.duration_us == 0 || b.duration_us == 0 {
                        continue;
                    }
                    let overlap = a.start_us < b.end_us() && b.start_us < a.end_us();
                    if !overlap {
                        violations.push(format!(
                            "{}: concurrent siblings {} and {} do not overlap",
                            trace.trace_id, a.span_id, b.span_id
                        ));
                    }
                }
            }
            prev_end = Some(
                members
                    .iter()
                    .map(|s| s.end_us())
                    .max()
                    .expect("non-empty group"),
            );
        }
    }
    violations
}
