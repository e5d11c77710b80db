//! Per-API probabilistic finite automata.
//!
//! States are concurrent call sets; weighted transitions encode sequential
//! execution order. A trace contributes one path start -> g1 -> ... -> gk ->
//! finish, where each g is the set of callees whose spans overlap in time.
//! The initial automaton is a prefix tree over those label sequences;
//! coarsening then merges same-label states whose successor distributions
//! are close in L1.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{SpanNode, TraceTree};
use crate::topology::ApiId;

pub type StateId = u32;
pub type CallSet = BTreeSet<ApiId>;

pub const START: StateId = 0;
pub const FINISH: StateId = 1;

/// Walk length cap for `sample_path`; exceeding it flags a probable cycle
/// with no finish mass.
pub const MAX_WALK_STEPS: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StateKind {
    Start,
    Finish,
    Step(CallSet),
}

impl StateKind {
    pub fn call_set(&self) -> Option<&CallSet> {
        match self {
            StateKind::Step(set) => Some(set),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PfaState {
    pub id: StateId,
    pub kind: StateKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub from: StateId,
    pub to: StateId,
    pub count: u64,
    pub probability: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pfa {
    pub api: ApiId,
    /// Sorted by id; exactly one start and one finish.
    pub states: Vec<PfaState>,
    /// Sorted by (from, to).
    pub transitions: Vec<Transition>,
}

/// Similarity controls for state merging.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoarsenConfig {
    /// L1 tolerance on successor distributions for merging.
    pub tau: f64,
    /// Slack added to the interval-overlap test when grouping siblings.
    pub overlap_epsilon_us: i64,
}

impl Default for CoarsenConfig {
    fn default() -> Self {
        CoarsenConfig {
            tau: 0.05,
            overlap_epsilon_us: 0,
        }
    }
}

impl CoarsenConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=2.0).contains(&self.tau) {
            return Err(Error::Document(format!(
                "coarsen tau must lie in [0, 2], got {}",
                self.tau
            )));
        }
        if self.overlap_epsilon_us < 0 {
            return Err(Error::Document("overlap epsilon must be >= 0".to_string()));
        }
        Ok(())
    }
}

impl Pfa {
    pub fn state(&self, id: StateId) -> Option<&PfaState> {
        self.states
            .binary_search_by(|s| s.id.cmp(&id))
            .ok()
            .map(|i| &self.states[i])
    }

    pub fn outgoing(&self, from: StateId) -> &[Transition] {
        let lo = self.transitions.partition_point(|t| t.from < from);
        let hi = self.transitions.partition_point(|t| t.from <= from);
        &self.transitions[lo..hi]
    }

    /// Successor probability mass grouped by target label.
    pub fn successor_distribution(&self, from: StateId) -> BTreeMap<StateKind, f64> {
        let mut dist = BTreeMap::new();
        for t in self.outgoing(from) {
            let kind = self.state(t.to).expect("transition target exists").kind.clone();
            *dist.entry(kind).or_insert(0.0) += t.probability;
        }
        dist
    }

    /// Distribution over the first executed call set (and direct finishes).
    pub fn first_step_distribution(&self) -> BTreeMap<StateKind, f64> {
        self.successor_distribution(START)
    }

    /// Every callee named by any step state.
    pub fn callees(&self) -> BTreeSet<ApiId> {
        self.states
            .iter()
            .filter_map(|s| s.kind.call_set())
            .flatten()
            .cloned()
            .collect()
    }

    pub fn step_state_count(&self) -> usize {
        self.states
            .iter()
            .filter(|s| matches!(s.kind, StateKind::Step(_)))
            .count()
    }

    /// Probability that a walk from start ever enters a state whose call set
    /// contains `callee`. Fixed-point iteration; exact on acyclic automata,
    /// geometric convergence otherwise.
    pub fn reach_probability(&self, callee: &ApiId) -> f64 {
        let ids: Vec<StateId> = self.states.iter().map(|s| s.id).collect();
        let target: BTreeSet<StateId> = self
            .states
            .iter()
            .filter(|s| s.kind.call_set().is_some_and(|cs| cs.contains(callee)))
            .map(|s| s.id)
            .collect();
        if target.is_empty() {
            return 0.0;
        }
        let mut hit: BTreeMap<StateId, f64> = ids.iter().map(|id| (*id, 0.0)).collect();
        for _ in 0..10_000 {
            let mut delta: f64 = 0.0;
            for id in &ids {
                let value = if target.contains(id) {
                    1.0
                } else {
                    self.outgoing(*id)
                        .iter()
                        .map(|t| t.probability * hit[&t.to])
                        .sum()
                };
                let prev = hit.insert(*id, value).expect("initialized");
                delta = delta.max((value - prev).abs());
            }
            if delta < 1e-13 {
                break;
            }
        }
        hit[&START]
    }
}

/// Group a span's children into maximal sets of time-overlapping intervals.
///
/// Two intervals overlap iff `start_a < end_b + eps` and `start_b < end_a +
/// eps`; overlap is closed transitively, so a group is a connected component
/// swept in start order. Children that call back into the parent's own API
/// are excluded (self-loops are rejected model-wide). Grouping depends only
/// on the intervals, not on input order.
pub fn extract_steps(parent: &SpanNode, epsilon_us: i64) -> Vec<CallSet> {
    let parent_api = parent.span.api();
    let mut children: Vec<&SpanNode> = parent
        .children
        .iter()
        .filter(|c| c.span.api() != parent_api)
        .collect();
    children.sort_by(|a, b| {
        (a.span.start_us, &a.span.span_id).cmp(&(b.span.start_us, &b.span.span_id))
    });

    let mut steps: Vec<CallSet> = Vec::new();
    let mut group_end: i64 = i64::MIN;
    for child in children {
        let start = child.span.start_us;
        let end = child.span.end_us();
        if steps.is_empty() || start >= group_end.saturating_add(epsilon_us) {
            steps.push(CallSet::new());
            group_end = end;
        } else {
            group_end = group_end.max(end);
        }
        steps.last_mut().expect("group exists").insert(child.span.api());
    }
    steps
}

/// Collect, per API, one step sequence per observed execution of that API.
pub fn step_sequences(
    traces: &[TraceTree],
    epsilon_us: i64,
) -> BTreeMap<ApiId, Vec<Vec<CallSet>>> {
    let mut out: BTreeMap<ApiId, Vec<Vec<CallSet>>> = BTreeMap::new();
    for trace in traces {
        for node in trace.preorder() {
            out.entry(node.span.api())
                .or_default()
                .push(extract_steps(node, epsilon_us));
        }
    }
    out
}

/// Build the automaton as a prefix tree over call-set label sequences, with
/// MLE transition probabilities. States carry the label only; distinct
/// prefixes reaching the same label stay distinct until coarsening.
pub fn build_pfa(api: &ApiId, sequences: &[Vec<CallSet>]) -> Pfa {
    let mut states = vec![
        PfaState {
            id: START,
            kind: StateKind::Start,
        },
        PfaState {
            id: FINISH,
            kind: StateKind::Finish,
        },
    ];
    let mut next_id: StateId = 2;
    let mut children: HashMap<(StateId, CallSet), StateId> = HashMap::new();
    let mut counts: BTreeMap<(StateId, StateId), u64> = BTreeMap::new();

    for seq in sequences {
        let mut cur = START;
        for call_set in seq {
            debug_assert!(!call_set.is_empty(), "step call sets are non-empty");
            let child = *children
                .entry((cur, call_set.clone()))
                .or_insert_with(|| {
                    let id = next_id;
                    next_id += 1;
                    states.push(PfaState {
                        id,
                        kind: StateKind::Step(call_set.clone()),
                    });
                    id
                });
            *counts.entry((cur, child)).or_default() += 1;
            cur = child;
        }
        *counts.entry((cur, FINISH)).or_default() += 1;
    }

    let mut pfa = Pfa {
        api: api.clone(),
        states,
        transitions: counts
            .into_iter()
            .map(|((from, to), count)| Transition {
                from,
                to,
                count,
                probability: 0.0,
            })
            .collect(),
    };
    recompute_probabilities(&mut pfa);
    pfa
}

fn recompute_probabilities(pfa: &mut Pfa) {
    let mut totals: BTreeMap<StateId, u64> = BTreeMap::new();
    for t in &pfa.transitions {
        *totals.entry(t.from).or_default() += t.count;
    }
    for t in &mut pfa.transitions {
        let total = totals[&t.from];
        t.probability = t.count as f64 / total as f64;
    }
}

fn l1_distance(a: &BTreeMap<StateKind, f64>, b: &BTreeMap<StateKind, f64>) -> f64 {
    let mut keys: BTreeSet<&StateKind> = a.keys().collect();
    keys.extend(b.keys());
    keys.into_iter()
        .map(|k| (a.get(k).copied().unwrap_or(0.0) - b.get(k).copied().unwrap_or(0.0)).abs())
        .sum()
}

/// Merge same-label states whose successor distributions differ by at most
/// `tau` in L1, repeatedly until fixpoint. Merge order is deterministic:
/// lowest id pair first, survivor keeps the lower id. Counts are conserved
/// and probabilities recomputed from merged counts.
pub fn coarsen(pfa: &Pfa, config: &CoarsenConfig) -> Result<Pfa> {
    config.validate()?;
    let mut pfa = pfa.clone();
    while let Some((keep, drop)) = find_merge_pair(&pfa, config.tau) {
        merge_states(&mut pfa, keep, drop);
    }
    Ok(pfa)
}

fn find_merge_pair(pfa: &Pfa, tau: f64) -> Option<(StateId, StateId)> {
    let steps: Vec<&PfaState> = pfa
        .states
        .iter()
        .filter(|s| matches!(s.kind, StateKind::Step(_)))
        .collect();
    for (i, a) in steps.iter().enumerate() {
        for b in steps.iter().skip(i + 1) {
            if a.kind != b.kind {
                continue;
            }
            let da = pfa.successor_distribution(a.id);
            let db = pfa.successor_distribution(b.id);
            if l1_distance(&da, &db) <= tau + 1e-12 {
                return Some((a.id, b.id));
            }
        }
    }
    None
}

fn merge_states(pfa: &mut Pfa, keep: StateId, drop: StateId) {
    let mut counts: BTreeMap<(StateId, StateId), u64> = BTreeMap::new();
    for t in &pfa.transitions {
        let from = if t.from == drop { keep } else { t.from };
        let to = if t.to == drop { keep } else { t.to };
        *counts.entry((from, to)).or_default() += t.count;
    }
    pfa.states.retain(|s| s.id != drop);
    pfa.transitions = counts
        .into_iter()
        .map(|((from, to), count)| Transition {
            from,
            to,
            count,
            probability: 0.0,
        })
        .collect();
    recompute_probabilities(pfa);
}

/// Random walk start -> finish following transition probabilities; returns
/// the visited call sets in order. Deterministic given the RNG state.
pub fn sample_path(pfa: &Pfa, rng: &mut impl Rng) -> Result<Vec<CallSet>> {
    sample_path_capped(pfa, rng, MAX_WALK_STEPS)
}

pub fn sample_path_capped(
    pfa: &Pfa,
    rng: &mut impl Rng,
    max_steps: usize,
) -> Result<Vec<CallSet>> {
    let mut path = Vec::new();
    let mut cur = START;
    let mut steps = 0usize;
    while cur != FINISH {
        if steps > max_steps {
            return Err(Error::WalkOverrun {
                api: pfa.api.clone(),
                max_steps,
            });
        }
        let out = pfa.outgoing(cur);
        if out.is_empty() {
            return Err(Error::Document(format!(
                "pfa for {} has a dead state {}",
                pfa.api, cur
            )));
        }
        let total: f64 = out.iter().map(|t| t.probability).sum();
        let mut u: f64 = rng.random::<f64>() * total;
        let mut chosen = out.last().expect("non-empty");
        for t in out {
            if u < t.probability {
                chosen = t;
                break;
            }
            u -= t.probability;
        }
        cur = chosen.to;
        if let StateKind::Step(set) = &pfa.state(cur).expect("state exists").kind {
            path.push(set.clone());
        }
        steps += 1;
    }
    Ok(path)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::ingest::Span;
    use crate::rng::derive_rng;

    fn api(service: &str, op: &str) -> ApiId {
        ApiId::new(service, op)
    }

    fn set(apis: &[&ApiId]) -> CallSet {
        apis.iter().map(|a| (*a).clone()).collect()
    }

    fn node(service: &str, op: &str, start: i64, dur: u64, children: Vec<SpanNode>) -> SpanNode {
        SpanNode {
            span: Span {
                trace_id: "t".to_string(),
                span_id: format!("{service}-{op}-{start}"),
                parent_span_id: None,
                service: service.to_string(),
                operation: op.to_string(),
                start_us: start,
                duration_us: dur,
            },
            children,
        }
    }

    #[test]
    fn extract_steps_leaf() {
        assert!(extract_steps(&node("A", "x", 0, 100, vec![]), 0).is_empty());
    }

    #[test]
    fn extract_steps_sequential() {
        let parent = node(
            "A",
            "x",
            0,
            100,
            vec![node("B", "y", 0, 10, vec![]), node("C", "z", 20, 10, vec![])],
        );
        let steps = extract_steps(&parent, 0);
        assert_eq!(
            steps,
            vec![set(&[&api("B", "y")]), set(&[&api("C", "z")])]
        );
    }

    #[test]
    fn extract_steps_concurrent_overlap() {
        let parent = node(
            "A",
            "x",
            0,
            100,
            vec![node("D", "w", 0, 10, vec![]), node("E", "v", 5, 10, vec![])],
        );
        let steps = extract_steps(&parent, 0);
        assert_eq!(steps, vec![set(&[&api("D", "w"), &api("E", "v")])]);
    }

    #[test]
    fn extract_steps_adjacent_intervals_stay_sequential() {
        // [0,10) and [10,20) share only the boundary instant.
        let parent = node(
            "A",
            "x",
            0,
            100,
            vec![node("B", "y", 0, 10, vec![]), node("C", "z", 10, 10, vec![])],
        );
        assert_eq!(extract_steps(&parent, 0).len(), 2);
    }

    #[test]
    fn extract_steps_epsilon_bridges_small_gaps() {
        let parent = node(
            "A",
            "x",
            0,
            100,
            vec![node("B", "y", 0, 10, vec![]), node("C", "z", 12, 10, vec![])],
        );
        assert_eq!(extract_steps(&parent, 0).len(), 2);
        assert_eq!(extract_steps(&parent, 3).len(), 1);
    }

    #[test]
    fn extract_steps_chained_overlap_is_one_group() {
        let parent = node(
            "A",
            "x",
            0,
            100,
            vec![
                node("B", "y", 0, 10, vec![]),
                node("C", "z", 8, 12, vec![]),
                node("D", "w", 18, 12, vec![]),
            ],
        );
        assert_eq!(extract_steps(&parent, 0).len(), 1);
    }

    #[test]
    fn extract_steps_is_permutation_invariant() {
        let children = vec![
            node("B", "y", 40, 10, vec![]),
            node("D", "w", 0, 12, vec![]),
            node("E", "v", 8, 10, vec![]),
            node("C", "z", 60, 5, vec![]),
        ];
        let forward = extract_steps(&node("A", "x", 0, 100, children.clone()), 0);
        let mut reversed = children;
        reversed.reverse();
        let backward = extract_steps(&node("A", "x", 0, 100, reversed), 0);
        assert_eq!(forward, backward);
        assert_eq!(forward.len(), 3); // {D, E}, {B}, {C}
    }

    #[test]
    fn extract_steps_ignores_self_calls() {
        let parent = node(
            "A",
            "x",
            0,
            100,
            vec![node("A", "x", 5, 10, vec![]), node("B", "y", 30, 10, vec![])],
        );
        assert_eq!(extract_steps(&parent, 0), vec![set(&[&api("B", "y")])]);
    }

    /// Step sequences realizing the golden branching automaton: first step is
    /// B (40), C (50), or D||E (10); 20% of B paths and 10% of C paths then
    /// run D||E before finishing.
    pub(crate) fn golden_sequences() -> Vec<Vec<CallSet>> {
        let b = set(&[&api("svc_b", "b")]);
        let c = set(&[&api("svc_c", "c")]);
        let de = set(&[&api("svc_d", "d"), &api("svc_e", "e")]);
        let mut seqs = Vec::new();
        for _ in 0..32 {
            seqs.push(vec![b.clone()]);
        }
        for _ in 0..8 {
            seqs.push(vec![b.clone(), de.clone()]);
        }
        for _ in 0..45 {
            seqs.push(vec![c.clone()]);
        }
        for _ in 0..5 {
            seqs.push(vec![c.clone(), de.clone()]);
        }
        for _ in 0..10 {
            seqs.push(vec![de.clone()]);
        }
        seqs
    }

    fn label_prob(pfa: &Pfa, from_label: &StateKind, to_label: &StateKind) -> f64 {
        let from: Vec<StateId> = pfa
            .states
            .iter()
            .filter(|s| &s.kind == from_label)
            .map(|s| s.id)
            .collect();
        assert!(!from.is_empty(), "no state labeled {from_label:?}");
        let mut probs = BTreeSet::new();
        for f in &from {
            let dist = pfa.successor_distribution(*f);
            probs.insert(dist.get(to_label).copied().unwrap_or(0.0).to_bits());
        }
        assert_eq!(probs.len(), 1, "label transition probability is ambiguous");
        f64::from_bits(probs.into_iter().next().unwrap())
    }

    #[test]
    fn golden_pfa_probabilities_exact() {
        let a = api("svc_a", "a");
        let pfa = build_pfa(&a, &golden_sequences());
        let b = StateKind::Step(set(&[&api("svc_b", "b")]));
        let c = StateKind::Step(set(&[&api("svc_c", "c")]));
        let de = StateKind::Step(set(&[&api("svc_d", "d"), &api("svc_e", "e")]));
        let fin = StateKind::Finish;
        let start = StateKind::Start;
        assert_eq!(label_prob(&pfa, &start, &b), 0.4);
        assert_eq!(label_prob(&pfa, &start, &c), 0.5);
        assert_eq!(label_prob(&pfa, &start, &de), 0.1);
        assert_eq!(label_prob(&pfa, &b, &fin), 0.8);
        assert_eq!(label_prob(&pfa, &b, &de), 0.2);
        assert_eq!(label_prob(&pfa, &c, &fin), 0.9);
        assert_eq!(label_prob(&pfa, &c, &de), 0.1);
        assert_eq!(label_prob(&pfa, &de, &fin), 1.0);
    }

    #[test]
    fn leaf_api_goes_straight_to_finish() {
        let pfa = build_pfa(&api("A", "x"), &[vec![], vec![], vec![]]);
        assert_eq!(pfa.step_state_count(), 0);
        assert_eq!(pfa.transitions.len(), 1);
        assert_eq!(pfa.transitions[0].probability, 1.0);
        assert_eq!(pfa.transitions[0].count, 3);
    }

    #[test]
    fn single_sequence_chain() {
        let b = set(&[&api("B", "y")]);
        let pfa = build_pfa(&api("A", "x"), &[vec![b.clone()]]);
        assert_eq!(pfa.step_state_count(), 1);
        let first = pfa.first_step_distribution();
        assert_eq!(first[&StateKind::Step(b)], 1.0);
    }

    #[test]
    fn probabilities_sum_to_one() {
        let pfa = build_pfa(&api("svc_a", "a"), &golden_sequences());
        for s in &pfa.states {
            if s.kind == StateKind::Finish {
                assert!(pfa.outgoing(s.id).is_empty());
                continue;
            }
            let sum: f64 = pfa.outgoing(s.id).iter().map(|t| t.probability).sum();
            assert!((sum - 1.0).abs() < 1e-9, "state {} sums to {sum}", s.id);
        }
    }

    #[test]
    fn coarsen_merges_identical_distributions_at_tau_zero() {
        // The golden prefix tree has three D||E states, all going straight
        // to finish; tau = 0 collapses them into one.
        let pfa = build_pfa(&api("svc_a", "a"), &golden_sequences());
        assert_eq!(pfa.step_state_count(), 5);
        let coarse = coarsen(
            &pfa,
            &CoarsenConfig {
                tau: 0.0,
                overlap_epsilon_us: 0,
            },
        )
        .unwrap();
        assert_eq!(coarse.step_state_count(), 3);
        let de = StateKind::Step(set(&[&api("svc_d", "d"), &api("svc_e", "e")]));
        let merged = coarse.states.iter().find(|s| s.kind == de).unwrap();
        let into: u64 = coarse
            .transitions
            .iter()
            .filter(|t| t.to == merged.id)
            .map(|t| t.count)
            .sum();
        assert_eq!(into, 23);
    }

    #[test]
    fn coarsen_within_tau() {
        // Two {B} states with successor distributions (0.8, 0.2) and
        // (0.82, 0.18): L1 = |0.8-0.82| + |0.2-0.18| = 0.04 <= 0.05.
        let b = set(&[&api("B", "y")]);
        let d = set(&[&api("D", "w")]);
        let mut seqs = Vec::new();
        for _ in 0..80 {
            seqs.push(vec![b.clone()]);
        }
        for _ in 0..20 {
            seqs.push(vec![b.clone(), d.clone()]);
        }
        for _ in 0..41 {
            seqs.push(vec![d.clone(), b.clone()]);
        }
        for _ in 0..9 {
            seqs.push(vec![d.clone(), b.clone(), d.clone()]);
        }
        let pfa = build_pfa(&api("A", "x"), &seqs);
        // Distinct prefixes: {B} at depth 1 (0.8/0.2) and {B} after {D}
        // (41/50 = 0.82 finish, 0.18 onward).
        assert_eq!(
            pfa.states
                .iter()
                .filter(|s| s.kind == StateKind::Step(b.clone()))
                .count(),
            2
        );
        let merged = coarsen(
            &pfa,
            &CoarsenConfig {
                tau: 0.05,
                overlap_epsilon_us: 0,
            },
        )
        .unwrap();
        assert_eq!(
            merged
                .states
                .iter()
                .filter(|s| s.kind == StateKind::Step(b.clone()))
                .count(),
            1
        );
        let tight = coarsen(
            &pfa,
            &CoarsenConfig {
                tau: 0.03,
                overlap_epsilon_us: 0,
            },
        )
        .unwrap();
        assert_eq!(
            tight
                .states
                .iter()
                .filter(|s| s.kind == StateKind::Step(b.clone()))
                .count(),
            2
        );
    }

    #[test]
    fn coarsen_tau_two_merges_all_same_label() {
        let pfa = build_pfa(&api("svc_a", "a"), &golden_sequences());
        let coarse = coarsen(
            &pfa,
            &CoarsenConfig {
                tau: 2.0,
                overlap_epsilon_us: 0,
            },
        )
        .unwrap();
        // One state per distinct label.
        assert_eq!(coarse.step_state_count(), 3);
    }

    #[test]
    fn coarsen_conserves_counts() {
        let pfa = build_pfa(&api("svc_a", "a"), &golden_sequences());
        let coarse = coarsen(&pfa, &CoarsenConfig::default()).unwrap();
        let total_before: u64 = pfa.transitions.iter().map(|t| t.count).sum();
        let total_after: u64 = coarse.transitions.iter().map(|t| t.count).sum();
        assert_eq!(total_before, total_after);
        assert!(coarse.states.len() <= pfa.states.len());
        for s in &coarse.states {
            if s.kind == StateKind::Finish {
                continue;
            }
            let sum: f64 = coarse.outgoing(s.id).iter().map(|t| t.probability).sum();
            assert!((sum - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn sample_path_trivial_cases() {
        let mut rng = derive_rng(5, "walk", 0);
        let leaf = build_pfa(&api("A", "x"), &[vec![]]);
        assert!(sample_path(&leaf, &mut rng).unwrap().is_empty());

        let b = set(&[&api("B", "y")]);
        let chain = build_pfa(&api("A", "x"), &[vec![b.clone()]]);
        for _ in 0..10 {
            assert_eq!(sample_path(&chain, &mut rng).unwrap(), vec![b.clone()]);
        }
    }

    #[test]
    fn sample_path_first_step_frequencies() {
        let pfa = build_pfa(&api("svc_a", "a"), &golden_sequences());
        let mut rng = derive_rng(11, "walk", 0);
        let n = 100_000usize;
        let b = set(&[&api("svc_b", "b")]);
        let c = set(&[&api("svc_c", "c")]);
        let de = set(&[&api("svc_d", "d"), &api("svc_e", "e")]);
        let mut counts: BTreeMap<CallSet, usize> = BTreeMap::new();
        for _ in 0..n {
            let path = sample_path(&pfa, &mut rng).unwrap();
            *counts.entry(path[0].clone()).or_default() += 1;
        }
        // Binomial bound: sigma <= 0.0016 at n = 1e5, so 0.01 is > 6 sigma.
        for (set, expected) in [(b, 0.4), (c, 0.5), (de, 0.1)] {
            let freq = counts[&set] as f64 / n as f64;
            assert!((freq - expected).abs() < 0.01, "{freq} vs {expected}");
        }
    }

    #[test]
    fn rebuilding_from_samples_converges() {
        let pfa = build_pfa(&api("svc_a", "a"), &golden_sequences());
        let mut rng = derive_rng(13, "walk", 0);
        let n = 50_000usize;
        let mut seqs = Vec::with_capacity(n);
        for _ in 0..n {
            seqs.push(sample_path(&pfa, &mut rng).unwrap());
        }
        let rebuilt = build_pfa(&api("svc_a", "a"), &seqs);
        let da = pfa.first_step_distribution();
        let db = rebuilt.first_step_distribution();
        let bound = 3.0 * ((n as f64).ln() / n as f64).sqrt();
        assert!(l1_distance(&da, &db) <= bound);
    }

    #[test]
    fn walk_overrun_is_reported() {
        // Hand-built automaton whose only step state loops on itself with
        // probability 1; the finish edge has zero mass.
        let b = set(&[&api("B", "y")]);
        let pfa = Pfa {
            api: api("A", "x"),
            states: vec![
                PfaState {
                    id: START,
                    kind: StateKind::Start,
                },
                PfaState {
                    id: FINISH,
                    kind: StateKind::Finish,
                },
                PfaState {
                    id: 2,
                    kind: StateKind::Step(b),
                },
            ],
            transitions: vec![
                Transition {
                    from: START,
                    to: 2,
                    count: 1,
                    probability: 1.0,
                },
                Transition {
                    from: 2,
                    to: 2,
                    count: 1,
                    probability: 1.0,
                },
                Transition {
                    from: 2,
                    to: FINISH,
                    count: 0,
                    probability: 0.0,
                },
            ],
        };
        let mut rng = derive_rng(17, "walk", 0);
        assert!(matches!(
            sample_path_capped(&pfa, &mut rng, 100),
            Err(Error::WalkOverrun { max_steps: 100, .. })
        ));
    }

    #[test]
    fn reach_probability_golden() {
        let pfa = build_pfa(&api("svc_a", "a"), &golden_sequences());
        let b = api("svc_b", "b");
        let d = api("svc_d", "d");
        assert!((pfa.reach_probability(&b) - 0.4).abs() < 1e-12);
        // D is reached first-step (0.1), after B (0.4 * 0.2), after C (0.5 * 0.1).
        assert!((pfa.reach_probability(&d) - 0.23).abs() < 1e-12);
        assert_eq!(pfa.reach_probability(&api("svc_z", "zz")), 0.0);
    }
}
