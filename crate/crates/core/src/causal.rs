//! Per-API graphical causal model for latency.
//!
//! The automaton determines the structure: each callee gets one latency node
//! and one Bernoulli `called` node; callees whose spans overlap form a
//! concurrent max-group, otherwise they contribute additively. Coefficients
//! are fitted by nonnegative least squares on indicator-weighted child
//! latencies; local work is kept as an empirical residual distribution,
//! conditioned on the upstream caller for leaf APIs.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{SpanNode, TraceTree};
use crate::nnls::nnls;
use crate::pfa::{Pfa, StateId, StateKind, FINISH, START};
use crate::reservoir::Reservoir;
use crate::rng;
use crate::stats;
use crate::topology::ApiId;

pub const FIT_REPORT_VERSION: &str = "palette-fit-report/v1";

/// How a node combines its parents' latencies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EquationKind {
    Sequential,
    Concurrent,
    Choice,
    Probability,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupKind {
    Single,
    Concurrent,
}

/// One callee's contribution: call probability `p` (the Bernoulli `called`
/// parameter) and fitted coefficient `lambda`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquationTerm {
    pub callee: ApiId,
    pub probability: f64,
    pub coefficient: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TermGroup {
    pub kind: GroupKind,
    pub terms: Vec<EquationTerm>,
}

/// Local-work term `C`: an empirical residual distribution (optionally
/// conditioned on the upstream caller, for leaf APIs) or a constant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualModel {
    pub mode: ResidualMode,
    pub constant_us: f64,
    pub pooled: Reservoir<f64>,
    pub by_caller: Vec<CallerResidual>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResidualMode {
    Empirical,
    Constant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CallerResidual {
    pub caller: ApiId,
    pub samples: Reservoir<f64>,
}

impl ResidualModel {
    pub fn constant(value_us: f64) -> Self {
        ResidualModel {
            mode: ResidualMode::Constant,
            constant_us: value_us,
            pooled: Reservoir::new(1),
            by_caller: Vec::new(),
        }
    }

    fn caller_samples(&self, caller: &ApiId) -> Option<&Reservoir<f64>> {
        self.by_caller
            .binary_search_by(|c| c.caller.cmp(caller))
            .ok()
            .map(|i| &self.by_caller[i].samples)
    }

    fn reservoir_for(&self, caller: Option<&ApiId>) -> &Reservoir<f64> {
        caller
            .and_then(|c| self.caller_samples(c))
            .filter(|r| !r.is_empty())
            .unwrap_or(&self.pooled)
    }

    /// Draw one local-work duration; never negative.
    pub fn sample(&self, caller: Option<&ApiId>, rng: &mut impl Rng) -> f64 {
        match self.mode {
            ResidualMode::Constant => self.constant_us.max(0.0),
            ResidualMode::Empirical => self
                .reservoir_for(caller)
                .pick(rng)
                .copied()
                .unwrap_or(0.0)
                .max(0.0),
        }
    }

    /// Expected value of `sample` for the given conditioning key.
    pub fn expected(&self, caller: Option<&ApiId>) -> f64 {
        match self.mode {
            ResidualMode::Constant => self.constant_us.max(0.0),
            ResidualMode::Empirical => {
                let r = self.reservoir_for(caller);
                if r.is_empty() {
                    0.0
                } else {
                    r.samples().iter().map(|v| v.max(0.0)).sum::<f64>() / r.len() as f64
                }
            }
        }
    }
}

/// The per-API structural formula: a sequential composition of term groups
/// plus local work.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CausalEquation {
    pub kind: EquationKind,
    pub groups: Vec<TermGroup>,
    pub local_work: ResidualModel,
}

impl CausalEquation {
    pub fn terms(&self) -> impl Iterator<Item = &EquationTerm> {
        self.groups.iter().flat_map(|g| g.terms.iter())
    }

    pub fn term(&self, callee: &ApiId) -> Option<&EquationTerm> {
        self.terms().find(|t| &t.callee == callee)
    }

    pub fn term_count(&self) -> usize {
        self.groups.iter().map(|g| g.terms.len()).sum()
    }

    pub fn coefficient(&self, callee: &ApiId) -> f64 {
        self.term(callee).map_or(0.0, |t| t.coefficient)
    }

    pub fn is_leaf(&self) -> bool {
        self.groups.is_empty()
    }
}

/// Fitted model for one API, as stored in the topology document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gcm {
    pub api: ApiId,
    pub equation: CausalEquation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CausalNode {
    ApiLatency(ApiId),
    ChildLatency(ApiId),
    Called { api: ApiId, probability: f64 },
}

/// Latency causal graph for one API: child latency and `called` nodes, each
/// with a directed edge into the API's own latency node (index 0).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CausalGraph {
    pub api: ApiId,
    pub nodes: Vec<CausalNode>,
    pub edges: Vec<(usize, usize)>,
}

/// Composition skeleton for a single automaton state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateSkeleton {
    pub state: StateId,
    pub kind: EquationKind,
    pub call_set: BTreeSet<ApiId>,
    /// Successor labels with branch probabilities (a Choice weighting).
    pub choice: Vec<(StateKind, f64)>,
}

pub struct CausalGraphBundle {
    pub graph: CausalGraph,
    /// Equation skeleton with coefficients initialized to 1.
    pub skeleton: CausalEquation,
    pub state_equations: Vec<StateSkeleton>,
}

/// Derive the causal graph and equation skeleton for one API from its
/// automaton. Callees that ever overlap in a call set share a concurrent
/// max-group; groups compose sequentially. `called` probabilities are the
/// automaton's reach probabilities.
pub fn build_causal_graph(pfa: &Pfa) -> CausalGraphBundle {
    let callees: Vec<ApiId> = pfa.callees().into_iter().collect();
    let index: BTreeMap<&ApiId, usize> = callees.iter().enumerate().map(|(i, a)| (a, i)).collect();

    // Union-find over callees: members of one call set belong together.
    let mut parent: Vec<usize> = (0..callees.len()).collect();
    fn find(parent: &mut Vec<usize>, i: usize) -> usize {
        if parent[i] != i {
            let root = find(parent, parent[i]);
            parent[i] = root;
        }
        parent[i]
    }
    for state in &pfa.states {
        if let StateKind::Step(set) = &state.kind {
            let mut members = set.iter().map(|a| index[a]);
            if let Some(first) = members.next() {
                for m in members {
                    let ra = find(&mut parent, first);
                    let rb = find(&mut parent, m);
                    if ra != rb {
                        parent[rb.max(ra)] = rb.min(ra);
                    }
                }
            }
        }
    }
    let mut grouped: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in 0..callees.len() {
        let root = find(&mut parent, i);
        grouped.entry(root).or_default().push(i);
    }

    let reach: BTreeMap<&ApiId, f64> = callees
        .iter()
        .map(|a| (a, pfa.reach_probability(a)))
        .collect();

    let groups: Vec<TermGroup> = grouped
        .into_values()
        .map(|members| TermGroup {
            kind: if members.len() >= 2 {
                GroupKind::Concurrent
            } else {
                GroupKind::Single
            },
            terms: members
                .into_iter()
                .map(|i| EquationTerm {
                    callee: callees[i].clone(),
                    probability: reach[&callees[i]],
                    coefficient: 1.0,
                })
                .collect(),
        })
        .collect();

    let kind = match groups.as_slice() {
        [only] if only.kind == GroupKind::Concurrent => EquationKind::Concurrent,
        _ => EquationKind::Sequential,
    };
    let skeleton = CausalEquation {
        kind,
        groups,
        local_work: ResidualModel::constant(0.0),
    };

    let mut nodes = vec![CausalNode::ApiLatency(pfa.api.clone())];
    let mut edges = Vec::new();
    for callee in &callees {
        nodes.push(CausalNode::ChildLatency(callee.clone()));
        edges.push((nodes.len() - 1, 0));
    }
    for callee in &callees {
        nodes.push(CausalNode::Called {
            api: callee.clone(),
            probability: reach[callee],
        });
        edges.push((nodes.len() - 1, 0));
    }

    let mut state_equations = Vec::new();
    for state in &pfa.states {
        if state.id == FINISH {
            continue;
        }
        let call_set: BTreeSet<ApiId> = state.kind.call_set().cloned().unwrap_or_default();
        let choice: Vec<(StateKind, f64)> = pfa
            .successor_distribution(state.id)
            .into_iter()
            .collect();
        let kind = if call_set.len() >= 2 {
            EquationKind::Concurrent
        } else if state.id == START && choice.len() > 1 {
            EquationKind::Choice
        } else {
            EquationKind::Sequential
        };
        state_equations.push(StateSkeleton {
            state: state.id,
            kind,
            call_set,
            choice,
        });
    }

    CausalGraphBundle {
        graph: CausalGraph {
            api: pfa.api.clone(),
            nodes,
            edges,
        },
        skeleton,
        state_equations,
    }
}

/// One observed execution of an API: its own duration, the summed duration
/// of each called child, and the immediate upstream caller.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub total_us: f64,
    pub children: BTreeMap<ApiId, f64>,
    pub caller: Option<ApiId>,
}

/// Extract per-API observations from trace trees (self-calls excluded, as
/// in topology and automaton construction).
pub fn collect_observations(traces: &[TraceTree]) -> BTreeMap<ApiId, Vec<Observation>> {
    fn walk(
        node: &SpanNode,
        caller: Option<&ApiId>,
        out: &mut BTreeMap<ApiId, Vec<Observation>>,
    ) {
        let api = node.span.api();
        let mut children: BTreeMap<ApiId, f64> = BTreeMap::new();
        for child in &node.children {
            let child_api = child.span.api();
            if child_api != api {
                *children.entry(child_api).or_insert(0.0) += child.span.duration_us as f64;
            }
        }
        out.entry(api.clone()).or_default().push(Observation {
            total_us: node.span.duration_us as f64,
            children,
            caller: caller.cloned(),
        });
        for child in &node.children {
            walk(child, Some(&api), out);
        }
    }
    let mut out = BTreeMap::new();
    for trace in traces {
        walk(&trace.root, None, &mut out);
    }
    out
}

/// Fit summary for one API.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitEntry {
    pub api: ApiId,
    pub kind: EquationKind,
    pub lambdas: Vec<(ApiId, f64)>,
    pub sample_count: usize,
    pub skipped_observations: usize,
    pub residual_mean_us: f64,
    pub residual_p50_us: f64,
    pub residual_p99_us: f64,
    pub converged: bool,
    pub iterations: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub version: String,
    pub entries: Vec<FitEntry>,
}

impl FitReport {
    pub fn new(entries: Vec<FitEntry>) -> Self {
        FitReport {
            version: FIT_REPORT_VERSION.to_string(),
            entries,
        }
    }
}

/// Per-observation argmax member of each concurrent group (flat term index),
/// or None when no member was called.
type Assignment = Vec<Vec<Option<usize>>>;

struct FlatTerms {
    callees: Vec<ApiId>,
    /// Flat term indices of each concurrent group.
    concurrent_groups: Vec<Vec<usize>>,
    /// Flat term indices of single groups.
    singles: Vec<usize>,
}

fn flatten(skeleton: &CausalEquation) -> FlatTerms {
    let mut callees = Vec::new();
    let mut concurrent_groups = Vec::new();
    let mut singles = Vec::new();
    for group in &skeleton.groups {
        let start = callees.len();
        for term in &group.terms {
            callees.push(term.callee.clone());
        }
        let idxs: Vec<usize> = (start..callees.len()).collect();
        match group.kind {
            GroupKind::Concurrent => concurrent_groups.push(idxs),
            GroupKind::Single => singles.extend(idxs),
        }
    }
    FlatTerms {
        callees,
        concurrent_groups,
        singles,
    }
}

fn assignments(flat: &FlatTerms, observations: &[&Observation], lambdas: &[f64]) -> Assignment {
    observations
        .iter()
        .map(|obs| {
            flat.concurrent_groups
                .iter()
                .map(|group| {
                    let mut best: Option<(usize, f64)> = None;
                    for &idx in group {
                        if let Some(x) = obs.children.get(&flat.callees[idx]) {
                            let v = lambdas[idx] * x;
                            if best.is_none_or(|(_, bv)| v > bv) {
                                best = Some((idx, v));
                            }
                        }
                    }
                    best.map(|(idx, _)| idx)
                })
                .collect()
        })
        .collect()
}

fn structural_value(flat: &FlatTerms, obs: &Observation, lambdas: &[f64]) -> f64 {
    let mut total = 0.0;
    for &idx in &flat.singles {
        if let Some(x) = obs.children.get(&flat.callees[idx]) {
            total += lambdas[idx] * x;
        }
    }
    for group in &flat.concurrent_groups {
        let mut mx = 0.0f64;
        for &idx in group {
            if let Some(x) = obs.children.get(&flat.callees[idx]) {
                mx = mx.max(lambdas[idx] * x);
            }
        }
        total += mx;
    }
    total
}

/// Fit coefficients and the local-work residual for one API.
///
/// Sequential terms enter a nonnegative least squares directly (feature =
/// indicator times measured child latency, plus an intercept column).
/// Concurrent groups are fitted by argmax reassignment: pick each group's
/// dominating member per observation under the current coefficients, refit,
/// and repeat until the assignment is stable or 100 iterations pass.
pub fn fit(
    api: &ApiId,
    skeleton: &CausalEquation,
    observations: &[Observation],
    residual_cap: usize,
    seed: u64,
) -> Result<(CausalEquation, FitEntry)> {
    let flat = flatten(skeleton);
    let n = flat.callees.len();
    let known: BTreeSet<&ApiId> = flat.callees.iter().collect();
    let usable: Vec<&Observation> = observations
        .iter()
        .filter(|o| o.children.keys().all(|c| known.contains(c)))
        .collect();
    let skipped = observations.len() - usable.len();
    if usable.is_empty() {
        return Err(Error::NoObservations { api: api.clone() });
    }
    if usable.len() < n + 1 {
        return Err(Error::UnderdeterminedFit {
            api: api.clone(),
            observations: usable.len(),
            terms: n,
        });
    }

    let ys: Vec<f64> = usable.iter().map(|o| o.total_us).collect();
    let mut lambdas = vec![1.0f64; n];
    let mut assignment = assignments(&flat, &usable, &lambdas);
    let mut iterations = 0u32;
    let mut converged = false;
    while iterations < 100 {
        iterations += 1;
        let rows: Vec<Vec<f64>> = usable
            .iter()
            .zip(&assignment)
            .map(|(obs, assigned)| {
                let mut row = vec![0.0f64; n + 1];
                for &idx in &flat.singles {
                    if let Some(x) = obs.children.get(&flat.callees[idx]) {
                        row[idx] = *x;
                    }
                }
                for (group_idx, _) in flat.concurrent_groups.iter().enumerate() {
                    if let Some(term_idx) = assigned[group_idx] {
                        row[term_idx] = obs.children[&flat.callees[term_idx]];
                    }
                }
                row[n] = 1.0;
                row
            })
            .collect();
        let solution = nnls(&rows, &ys, n + 1);
        lambdas.copy_from_slice(&solution[..n]);
        let next = assignments(&flat, &usable, &lambdas);
        if next == assignment {
            converged = true;
            break;
        }
        assignment = next;
    }

    let residuals: Vec<f64> = usable
        .iter()
        .map(|obs| obs.total_us - structural_value(&flat, obs, &lambdas))
        .collect();

    let mut residual_rng = rng::derive_rng(seed, "residuals", rng::mix(0, &api.key(), 0));
    let mut pooled = Reservoir::new(residual_cap);
    let mut by_caller: BTreeMap<ApiId, Reservoir<f64>> = BTreeMap::new();
    for (obs, r) in usable.iter().zip(&residuals) {
        pooled.add(*r, &mut residual_rng);
        if n == 0 {
            if let Some(caller) = &obs.caller {
                by_caller
                    .entry(caller.clone())
                    .or_insert_with(|| Reservoir::new(residual_cap))
                    .add(*r, &mut residual_rng);
            }
        }
    }
    let local_work = ResidualModel {
        mode: ResidualMode::Empirical,
        constant_us: 0.0,
        pooled,
        by_caller: by_caller
            .into_iter()
            .map(|(caller, samples)| CallerResidual { caller, samples })
            .collect(),
    };

    let mut equation = skeleton.clone();
    let mut flat_idx = 0usize;
    for group in &mut equation.groups {
        for term in &mut group.terms {
            term.coefficient = lambdas[flat_idx];
            flat_idx += 1;
        }
    }
    equation.local_work = local_work;

    let entry = FitEntry {
        api: api.clone(),
        kind: equation.kind,
        lambdas: flat
            .callees
            .iter()
            .cloned()
            .zip(lambdas.iter().copied())
            .collect(),
        sample_count: usable.len(),
        skipped_observations: skipped,
        residual_mean_us: stats::mean(&residuals).unwrap_or(0.0),
        residual_p50_us: stats::quantile(&residuals, 0.5).unwrap_or(0.0),
        residual_p99_us: stats::quantile(&residuals, 0.99).unwrap_or(0.0),
        converged,
        iterations,
    };
    Ok((equation, entry))
}

/// Structural latency (no residual sampling): additive over single terms,
/// max over concurrent groups, indicator-gated. Every called callee must
/// have a measurement.
pub fn evaluate(
    equation: &CausalEquation,
    measured: &BTreeMap<ApiId, f64>,
    called: &BTreeMap<ApiId, bool>,
) -> Result<f64> {
    let mut total = 0.0;
    for group in &equation.groups {
        let mut group_max = 0.0f64;
        for term in &group.terms {
            if !called.get(&term.callee).copied().unwrap_or(false) {
                continue;
            }
            let x = measured.get(&term.callee).ok_or_else(|| Error::MissingMeasurement {
                callee: term.callee.clone(),
            })?;
            let v = term.coefficient * x;
            match group.kind {
                GroupKind::Single => total += v,
                GroupKind::Concurrent => group_max = group_max.max(v),
            }
        }
        if group.kind == GroupKind::Concurrent {
            total += group_max;
        }
    }
    Ok(total)
}

/// `evaluate` with measured values for completed callees and fitted
/// expectations for pending ones; callees in neither map count as not
/// called.
pub fn correct(
    equation: &CausalEquation,
    measured: &BTreeMap<ApiId, f64>,
    expected: &BTreeMap<ApiId, f64>,
) -> f64 {
    let mut total = 0.0;
    for group in &equation.groups {
        let mut group_max = 0.0f64;
        for term in &group.terms {
            let value = measured
                .get(&term.callee)
                .or_else(|| expected.get(&term.callee));
            let Some(x) = value else { continue };
            let v = term.coefficient * x;
            match group.kind {
                GroupKind::Single => total += v,
                GroupKind::Concurrent => group_max = group_max.max(v),
            }
        }
        if group.kind == GroupKind::Concurrent {
            total += group_max;
        }
    }
    total
}

/// Bernoulli draw of a `called` node.
pub fn sample_called(term: &EquationTerm, rng: &mut impl Rng) -> bool {
    rng.random::<f64>() < term.probability
}

/// Probability-weighted structural expectation: each term contributes
/// `p * lambda * E[a]`, with the max taken over concurrent groups, plus the
/// expected local work for the given caller.
pub fn expected_value(
    equation: &CausalEquation,
    expectations: &BTreeMap<ApiId, f64>,
    caller: Option<&ApiId>,
) -> f64 {
    let mut total = 0.0;
    for group in &equation.groups {
        let mut group_max = 0.0f64;
        for term in &group.terms {
            let e = expectations.get(&term.callee).copied().unwrap_or(0.0);
            let v = term.probability * term.coefficient * e;
            match group.kind {
                GroupKind::Single => total += v,
                GroupKind::Concurrent => group_max = group_max.max(v),
            }
        }
        if group.kind == GroupKind::Concurrent {
            total += group_max;
        }
    }
    total + equation.local_work.expected(caller)
}
