//! Targeted, validity-preserving edits to a built model bundle.
//!
//! A script is an ordered list of primitive ops applied transactionally:
//! either every op applies and the result passes full validation, or the
//! input bundle is returned untouched (apply is pure). After each op, local
//! repairs run: zero-mass transitions are dropped, states off every
//! start->finish path are pruned, surviving sibling transitions renormalize
//! proportionally, and `called` probabilities are recomputed from the
//! repaired automaton. Every derived repair lands in the change log.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bundle::{check_version, ModelBundle};
use crate::causal::{
    CausalEquation, EquationKind, EquationTerm, Gcm, GroupKind, ResidualModel, TermGroup,
};
use crate::error::{Error, Result};
use crate::pfa::{Pfa, PfaState, StateId, StateKind, Transition, FINISH, START};
use crate::reservoir::Reservoir;
use crate::topology::{ApiId, ApiVertex, CallEdge};

pub const INTERVENTIONS_VERSION: &str = "palette-interventions/v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum InterventionOp {
    AddVertex {
        service: String,
        operation: String,
    },
    RemoveVertex {
        api: ApiId,
    },
    AddEdge {
        caller: ApiId,
        callee: ApiId,
        /// First-step branch probability; stolen proportionally from the
        /// caller's existing start transitions.
        probability: f64,
        #[serde(default = "default_coefficient")]
        coefficient: f64,
    },
    RemoveEdge {
        caller: ApiId,
        callee: ApiId,
    },
    SetTransitionProb {
        api: ApiId,
        from: StateId,
        to: StateId,
        probability: f64,
    },
    ScaleCoefficient {
        api: ApiId,
        callee: ApiId,
        factor: f64,
    },
    SetLocalWork {
        api: ApiId,
        constant_us: f64,
    },
    Downscale {
        keep_services: BTreeSet<String>,
    },
    MergeServices {
        services: Vec<String>,
        new_name: String,
    },
}

fn default_coefficient() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionScript {
    pub version: String,
    pub ops: Vec<InterventionOp>,
}

impl InterventionScript {
    pub fn new(ops: Vec<InterventionOp>) -> Self {
        InterventionScript {
            version: INTERVENTIONS_VERSION.to_string(),
            ops,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        check_version(text, INTERVENTIONS_VERSION)?;
        serde_json::from_str(text).map_err(|e| Error::Document(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

/// Record of everything an applied script changed, including derived repairs.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ChangeLog {
    pub entries: Vec<String>,
}

impl ChangeLog {
    fn note(&mut self, entry: String) {
        self.entries.push(entry);
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// One invariant breach found by `validate_bundle`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub api: Option<ApiId>,
    pub state: Option<StateId>,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if let Some(api) = &self.api {
            write!(f, "[{api}] ")?;
        }
        if let Some(state) = self.state {
            write!(f, "state {state}: ")?;
        }
        f.write_str(&self.message)
    }
}

fn violation(api: Option<&ApiId>, state: Option<StateId>, message: String) -> Violation {
    Violation {
        api: api.cloned(),
        state,
        message,
    }
}

/// Check every structural invariant of the bundle; empty means valid.
pub fn validate_bundle(bundle: &ModelBundle) -> Vec<Violation> {
    let mut out = Vec::new();
    let t = &bundle.topology;

    let mut vertex_ids = BTreeSet::new();
    for v in &t.vertices {
        if !vertex_ids.insert(v.id.clone()) {
            out.push(violation(Some(&v.id), None, "duplicate vertex".into()));
        }
        if (v.latency_samples.len() as u64) > v.invocation_count {
            out.push(violation(
                Some(&v.id),
                None,
                "reservoir larger than invocation count".into(),
            ));
        }
        if !t.partitions.contains(&v.id.service) {
            out.push(violation(
                Some(&v.id),
                None,
                format!("service {:?} missing from partitions", v.id.service),
            ));
        }
    }
    let services: BTreeSet<&String> = t.vertices.iter().map(|v| &v.id.service).collect();
    for p in &t.partitions {
        if !services.contains(p) {
            out.push(violation(None, None, format!("empty partition {p:?}")));
        }
    }

    let mut edge_keys = BTreeSet::new();
    for e in &t.edges {
        if !edge_keys.insert((e.caller.clone(), e.callee.clone())) {
            out.push(violation(
                Some(&e.caller),
                None,
                format!("duplicate edge to {}", e.callee),
            ));
        }
        if e.caller == e.callee {
            out.push(violation(Some(&e.caller), None, "self-loop edge".into()));
        }
        if e.call_count == 0 {
            out.push(violation(
                Some(&e.caller),
                None,
                format!("edge to {} has zero call count", e.callee),
            ));
        }
        for end in [&e.caller, &e.callee] {
            if !vertex_ids.contains(end) {
                out.push(violation(
                    Some(end),
                    None,
                    "edge endpoint is not a vertex".into(),
                ));
            }
        }
        if e.is_remote != (e.caller.service != e.callee.service) {
            out.push(violation(
                Some(&e.caller),
                None,
                format!("edge to {} has inconsistent is_remote", e.callee),
            ));
        }
    }

    let mut pfa_apis = BTreeSet::new();
    for pfa in &bundle.pfas {
        if !pfa_apis.insert(pfa.api.clone()) {
            out.push(violation(Some(&pfa.api), None, "duplicate pfa".into()));
        }
        if !vertex_ids.contains(&pfa.api) {
            out.push(violation(Some(&pfa.api), None, "pfa without vertex".into()));
        }
        validate_pfa(pfa, t.edges.as_slice(), &mut out);
    }
    for v in &t.vertices {
        if !pfa_apis.contains(&v.id) {
            out.push(violation(Some(&v.id), None, "vertex without pfa".into()));
        }
    }

    if bundle.is_fitted() {
        let mut gcm_apis = BTreeSet::new();
        for gcm in &bundle.gcms {
            if !gcm_apis.insert(gcm.api.clone()) {
                out.push(violation(Some(&gcm.api), None, "duplicate gcm".into()));
            }
            let Some(pfa) = bundle.pfa(&gcm.api) else {
                out.push(violation(Some(&gcm.api), None, "gcm without pfa".into()));
                continue;
            };
            validate_gcm(gcm, pfa, &mut out);
        }
        for pfa in &bundle.pfas {
            if !gcm_apis.contains(&pfa.api) {
                out.push(violation(Some(&pfa.api), None, "pfa without gcm".into()));
            }
        }
    }
    out
}

fn validate_pfa(pfa: &Pfa, edges: &[CallEdge], out: &mut Vec<Violation>) {
    let api = Some(&pfa.api);
    let mut ids = BTreeSet::new();
    let mut starts = 0usize;
    let mut finishes = 0usize;
    for s in &pfa.states {
        if !ids.insert(s.id) {
            out.push(violation(api, Some(s.id), "duplicate state id".into()));
        }
        match &s.kind {
            StateKind::Start => {
                starts += 1;
                if s.id != START {
                    out.push(violation(api, Some(s.id), "start state must have id 0".into()));
                }
            }
            StateKind::Finish => {
                finishes += 1;
                if s.id != FINISH {
                    out.push(violation(api, Some(s.id), "finish state must have id 1".into()));
                }
            }
            StateKind::Step(set) => {
                if set.is_empty() {
                    out.push(violation(api, Some(s.id), "step state with empty call set".into()));
                }
                for callee in set {
                    if callee == &pfa.api {
                        out.push(violation(api, Some(s.id), "call set contains self".into()));
                    }
                    let has_edge = edges
                        .iter()
                        .any(|e| e.caller == pfa.api && &e.callee == callee);
                    if !has_edge {
                        out.push(violation(
                            api,
                            Some(s.id),
                            format!("call set names {callee} but no such edge exists"),
                        ));
                    }
                }
            }
        }
    }
    if starts != 1 || finishes != 1 {
        out.push(violation(
            api,
            None,
            format!("expected exactly one start and finish, got {starts}/{finishes}"),
        ));
    }

    let mut outgoing: BTreeMap<StateId, f64> = BTreeMap::new();
    let mut seen = BTreeSet::new();
    for tr in &pfa.transitions {
        if !seen.insert((tr.from, tr.to)) {
            out.push(violation(api, Some(tr.from), format!("duplicate transition to {}", tr.to)));
        }
        if !ids.contains(&tr.from) || !ids.contains(&tr.to) {
            out.push(violation(api, Some(tr.from), "transition endpoint missing".into()));
        }
        if tr.to == START {
            out.push(violation(api, Some(tr.from), "transition into start".into()));
        }
        if tr.from == FINISH {
            out.push(violation(api, Some(tr.from), "transition out of finish".into()));
        }
        if !(0.0..=1.0).contains(&tr.probability) {
            out.push(violation(
                api,
                Some(tr.from),
                format!("probability {} out of range", tr.probability),
            ));
        }
        *outgoing.entry(tr.from).or_insert(0.0) += tr.probability;
    }
    for s in &pfa.states {
        if s.kind == StateKind::Finish {
            continue;
        }
        let sum = outgoing.get(&s.id).copied().unwrap_or(0.0);
        if (sum - 1.0).abs() > 1e-9 {
            out.push(violation(
                api,
                Some(s.id),
                format!("outgoing probabilities sum to {sum}"),
            ));
        }
    }

    let (reach, coreach) = reachability(pfa);
    for s in &pfa.states {
        if !reach.contains(&s.id) || !coreach.contains(&s.id) {
            out.push(violation(
                api,
                Some(s.id),
                "state lies on no start->finish path".into(),
            ));
        }
    }
}

fn validate_gcm(gcm: &Gcm, pfa: &Pfa, out: &mut Vec<Violation>) {
    let api = Some(&gcm.api);
    let callees = pfa.callees();
    let mut seen = BTreeSet::new();
    for group in &gcm.equation.groups {
        match group.kind {
            GroupKind::Single if group.terms.len() != 1 => {
                out.push(violation(api, None, "single group without exactly one term".into()));
            }
            GroupKind::Concurrent if group.terms.len() < 2 => {
                out.push(violation(api, None, "concurrent group with fewer than two terms".into()));
            }
            _ => {}
        }
        for term in &group.terms {
            if !seen.insert(term.callee.clone()) {
                out.push(violation(
                    api,
                    None,
                    format!("callee {} has more than one term", term.callee),
                ));
            }
            if !callees.contains(&term.callee) {
                out.push(violation(
                    api,
                    None,
                    format!("term for {} not present in pfa call sets", term.callee),
                ));
            }
            if term.coefficient < 0.0 || !term.coefficient.is_finite() {
                out.push(violation(
                    api,
                    None,
                    format!("coefficient {} for {} out of range", term.coefficient, term.callee),
                ));
            }
            if !(0.0..=1.0).contains(&term.probability) {
                out.push(violation(
                    api,
                    None,
                    format!("call probability {} for {} out of range", term.probability, term.callee),
                ));
            }
        }
    }
    for callee in &callees {
        if !seen.contains(callee) {
            out.push(violation(api, None, format!("pfa callee {callee} has no term")));
        }
    }
}

fn reachability(pfa: &Pfa) -> (BTreeSet<StateId>, BTreeSet<StateId>) {
    let mut reach = BTreeSet::from([START]);
    let mut frontier = vec![START];
    while let Some(s) = frontier.pop() {
        for tr in pfa.outgoing(s) {
            if reach.insert(tr.to) {
                frontier.push(tr.to);
            }
        }
    }
    let mut coreach = BTreeSet::from([FINISH]);
    loop {
        let mut grew = false;
        for tr in &pfa.transitions {
            if coreach.contains(&tr.to) && coreach.insert(tr.from) {
                grew = true;
            }
        }
        if !grew {
            break;
        }
    }
    (reach, coreach)
}

/// Apply a script transactionally. On success, returns the modified bundle
/// plus a change log covering ops and derived repairs; the input bundle is
/// never mutated.
pub fn apply(bundle: &ModelBundle, script: &InterventionScript) -> Result<(ModelBundle, ChangeLog)> {
    if script.version != INTERVENTIONS_VERSION {
        return Err(Error::SchemaVersion {
            expected: INTERVENTIONS_VERSION.to_string(),
            found: script.version.clone(),
        });
    }
    let mut work = bundle.clone();
    let mut log = ChangeLog::default();
    for (index, op) in script.ops.iter().enumerate() {
        apply_op(&mut work, op, &mut log).map_err(|e| Error::ScriptRejected {
            index,
            reason: e.to_string(),
        })?;
        work.normalize_order();
    }
    let violations = validate_bundle(&work);
    if let Some(first) = violations.first() {
        return Err(Error::InvalidBundle {
            count: violations.len(),
            first: first.to_string(),
        });
    }
    Ok((work, log))
}

fn reject(reason: impl Into<String>) -> Error {
    Error::Document(reason.into())
}

fn apply_op(bundle: &mut ModelBundle, op: &InterventionOp, log: &mut ChangeLog) -> Result<()> {
    match op {
        InterventionOp::AddVertex { service, operation } => {
            add_vertex(bundle, service, operation, log)
        }
        InterventionOp::RemoveVertex { api } => remove_vertex(bundle, api, log),
        InterventionOp::AddEdge {
            caller,
            callee,
            probability,
            coefficient,
        } => add_edge(bundle, caller, callee, *probability, *coefficient, log),
        InterventionOp::RemoveEdge { caller, callee } => remove_edge(bundle, caller, callee, log),
        InterventionOp::SetTransitionProb {
            api,
            from,
            to,
            probability,
        } => set_transition_prob(bundle, api, *from, *to, *probability, log),
        InterventionOp::ScaleCoefficient { api, callee, factor } => {
            scale_coefficient(bundle, api, callee, *factor, log)
        }
        InterventionOp::SetLocalWork { api, constant_us } => {
            set_local_work(bundle, api, *constant_us, log)
        }
        InterventionOp::Downscale { keep_services } => downscale(bundle, keep_services, log),
        InterventionOp::MergeServices { services, new_name } => {
            merge_services(bundle, services, new_name, log)
        }
    }
}

fn add_vertex(
    bundle: &mut ModelBundle,
    service: &str,
    operation: &str,
    log: &mut ChangeLog,
) -> Result<()> {
    let id = ApiId::new(service, operation);
    if bundle.topology.vertex(&id).is_some() {
        return Err(reject(format!("vertex {id} already exists")));
    }
    let size = bundle.topology.reservoir_size;
    bundle.topology.partitions.insert(service.to_string());
    bundle.topology.vertices.push(ApiVertex {
        id: id.clone(),
        invocation_count: 0,
        duration_sum_us: 0,
        latency_samples: Reservoir::new(size),
    });
    bundle.pfas.push(Pfa {
        api: id.clone(),
        states: vec![
            PfaState {
                id: START,
                kind: StateKind::Start,
            },
            PfaState {
                id: FINISH,
                kind: StateKind::Finish,
            },
        ],
        transitions: vec![Transition {
            from: START,
            to: FINISH,
            count: 0,
            probability: 1.0,
        }],
    });
    if bundle.is_fitted() {
        bundle.gcms.push(Gcm {
            api: id.clone(),
            equation: CausalEquation {
                kind: EquationKind::Sequential,
                groups: Vec::new(),
                local_work: ResidualModel::constant(0.0),
            },
        });
    }
    log.note(format!("add_vertex: created {id} with empty behavior"));
    Ok(())
}

fn remove_vertex(bundle: &mut ModelBundle, api: &ApiId, log: &mut ChangeLog) -> Result<()> {
    if bundle.topology.vertex(api).is_none() {
        return Err(reject(format!("vertex {api} does not exist")));
    }
    // Scrub the vertex out of every caller first; each scrub may reject.
    let callers: Vec<ApiId> = bundle
        .topology
        .edges
        .iter()
        .filter(|e| &e.callee == api)
        .map(|e| e.caller.clone())
        .collect();
    for caller in &callers {
        scrub_callee(bundle, caller, api, log)?;
    }
    bundle.topology.vertices.retain(|v| &v.id != api);
    bundle
        .topology
        .edges
        .retain(|e| &e.caller != api && &e.callee != api);
    bundle.pfas.retain(|p| &p.api != api);
    bundle.gcms.retain(|g| &g.api != api);
    recompute_partitions(bundle);
    log.note(format!("remove_vertex: removed {api} and incident edges"));
    Ok(())
}

/// Remove `callee` from every call set of `caller`'s automaton, repair, and
/// refresh the caller's equation terms.
fn scrub_callee(
    bundle: &mut ModelBundle,
    caller: &ApiId,
    callee: &ApiId,
    log: &mut ChangeLog,
) -> Result<()> {
    let pfa = bundle
        .pfa_mut(caller)
        .ok_or_else(|| reject(format!("no pfa for {caller}")))?;
    let mut emptied: BTreeSet<StateId> = BTreeSet::new();
    for state in &mut pfa.states {
        if let StateKind::Step(set) = &mut state.kind {
            if set.remove(callee) {
                log.note(format!(
                    "repair: dropped {callee} from call set of {caller} state {}",
                    state.id
                ));
                if set.is_empty() {
                    emptied.insert(state.id);
                }
            }
        }
    }
    if !emptied.is_empty() {
        pfa.states.retain(|s| !emptied.contains(&s.id));
        pfa.transitions
            .retain(|t| !emptied.contains(&t.from) && !emptied.contains(&t.to));
        log.note(format!(
            "repair: removed {} emptied state(s) from {caller}",
            emptied.len()
        ));
    }
    repair_pfa(pfa, log)?;
    if bundle.is_fitted() {
        let pfa = bundle.pfa(caller).expect("caller pfa").clone();
        if let Some(gcm) = bundle.gcm_mut(caller) {
            remove_term(&mut gcm.equation, callee);
            refresh_probabilities(&mut gcm.equation, &pfa, log);
        }
    }
    Ok(())
}

/// Drop zero-mass transitions, prune states off every start->finish path,
/// and renormalize surviving sibling transitions proportionally.
fn repair_pfa(pfa: &mut Pfa, log: &mut ChangeLog) -> Result<()> {
    let before = pfa.transitions.len();
    pfa.transitions.retain(|t| t.probability > 1e-15);
    if pfa.transitions.len() != before {
        log.note(format!(
            "repair: dropped {} zero-mass transition(s) in {}",
            before - pfa.transitions.len(),
            pfa.api
        ));
    }
    loop {
        let (reach, coreach) = reachability(pfa);
        let keep: BTreeSet<StateId> = reach.intersection(&coreach).copied().collect();
        if !keep.contains(&START) || !keep.contains(&FINISH) {
            return Err(reject(format!(
                "{} has no start->finish path left; removing the only outgoing behavior of a reachable state is not repairable",
                pfa.api
            )));
        }
        let doomed: Vec<StateId> = pfa
            .states
            .iter()
            .filter(|s| !keep.contains(&s.id))
            .map(|s| s.id)
            .collect();
        if doomed.is_empty() {
            break;
        }
        log.note(format!(
            "repair: pruned orphaned state(s) {doomed:?} in {}",
            pfa.api
        ));
        pfa.states.retain(|s| keep.contains(&s.id));
        pfa.transitions
            .retain(|t| keep.contains(&t.from) && keep.contains(&t.to));
    }

    let mut sums: BTreeMap<StateId, f64> = BTreeMap::new();
    for t in &pfa.transitions {
        *sums.entry(t.from).or_insert(0.0) += t.probability;
    }
    for (state, sum) in sums {
        if (sum - 1.0).abs() > 1e-12 {
            for t in &mut pfa.transitions {
                if t.from == state {
                    t.probability /= sum;
                }
            }
            log.note(format!(
                "repair: renormalized outgoing mass of {} state {state} from {sum:.6} to 1",
                pfa.api
            ));
        }
    }
    Ok(())
}

fn remove_term(equation: &mut CausalEquation, callee: &ApiId) {
    for group in &mut equation.groups {
        group.terms.retain(|t| &t.callee != callee);
        if group.terms.len() == 1 {
            group.kind = GroupKind::Single;
        }
    }
    equation.groups.retain(|g| !g.terms.is_empty());
}

/// Recompute `called` probabilities from the (repaired) automaton.
fn refresh_probabilities(equation: &mut CausalEquation, pfa: &Pfa, log: &mut ChangeLog) {
    for group in &mut equation.groups {
        for term in &mut group.terms {
            let p = pfa.reach_probability(&term.callee);
            if (p - term.probability).abs() > 1e-12 {
                log.note(format!(
                    "repair: call probability of {} in {} updated {:.6} -> {p:.6}",
                    term.callee, pfa.api, term.probability
                ));
                term.probability = p;
            }
        }
    }
}

fn add_edge(
    bundle: &mut ModelBundle,
    caller: &ApiId,
    callee: &ApiId,
    probability: f64,
    coefficient: f64,
    log: &mut ChangeLog,
) -> Result<()> {
    if caller == callee {
        return Err(reject("self-loop edges are not accepted"));
    }
    if !(0.0 < probability && probability <= 1.0) {
        return Err(reject(format!("probability {probability} not in (0, 1]")));
    }
    if coefficient <= 0.0 || !coefficient.is_finite() {
        return Err(reject(format!("coefficient {coefficient} must be positive")));
    }
    if bundle.topology.vertex(caller).is_none() {
        return Err(reject(format!("caller {caller} does not exist")));
    }
    if bundle.topology.vertex(callee).is_none() {
        return Err(reject(format!("callee {callee} does not exist")));
    }
    if bundle.topology.edge(caller, callee).is_some() {
        return Err(reject(format!("edge {caller} -> {callee} already exists")));
    }
    let size = bundle.topology.reservoir_size;
    bundle.topology.edges.push(CallEdge {
        caller: caller.clone(),
        callee: callee.clone(),
        call_count: 1,
        latency_samples: Reservoir::new(size),
        is_remote: caller.service != callee.service,
    });

    // New first-step branch: steal mass proportionally from the start
    // state's existing transitions, then run straight to finish.
    let pfa = bundle.pfa_mut(caller).expect("caller pfa exists");
    let new_id = pfa.states.iter().map(|s| s.id).max().unwrap_or(FINISH) + 1;
    pfa.states.push(PfaState {
        id: new_id,
        kind: StateKind::Step([callee.clone()].into()),
    });
    for t in &mut pfa.transitions {
        if t.from == START {
            t.probability *= 1.0 - probability;
        }
    }
    pfa.transitions.push(Transition {
        from: START,
        to: new_id,
        count: 0,
        probability,
    });
    pfa.transitions.push(Transition {
        from: new_id,
        to: FINISH,
        count: 0,
        probability: 1.0,
    });
    pfa.transitions.sort_by_key(|t| (t.from, t.to));
    repair_pfa(pfa, log)?;

    if bundle.is_fitted() {
        let pfa = bundle.pfa(caller).expect("caller pfa").clone();
        let gcm = bundle
            .gcm_mut(caller)
            .ok_or_else(|| reject(format!("no gcm for {caller}")))?;
        gcm.equation.groups.push(TermGroup {
            kind: GroupKind::Single,
            terms: vec![EquationTerm {
                callee: callee.clone(),
                probability,
                coefficient,
            }],
        });
        refresh_probabilities(&mut gcm.equation, &pfa, log);
    }
    log.note(format!(
        "add_edge: {caller} -> {callee} as a first-step branch with probability {probability}"
    ));
    Ok(())
}

fn remove_edge(
    bundle: &mut ModelBundle,
    caller: &ApiId,
    callee: &ApiId,
    log: &mut ChangeLog,
) -> Result<()> {
    if bundle.topology.edge(caller, callee).is_none() {
        return Err(reject(format!("edge {caller} -> {callee} does not exist")));
    }
    bundle
        .topology
        .edges
        .retain(|e| !(&e.caller == caller && &e.callee == callee));
    scrub_callee(bundle, caller, callee, log)?;
    log.note(format!("remove_edge: {caller} -> {callee}"));
    Ok(())
}

fn set_transition_prob(
    bundle: &mut ModelBundle,
    api: &ApiId,
    from: StateId,
    to: StateId,
    probability: f64,
    log: &mut ChangeLog,
) -> Result<()> {
    if !(0.0..=1.0).contains(&probability) {
        return Err(reject(format!("probability {probability} not in [0, 1]")));
    }
    let pfa = bundle
        .pfa_mut(api)
        .ok_or_else(|| reject(format!("no pfa for {api}")))?;
    let Some(target) = pfa
        .transitions
        .iter()
        .position(|t| t.from == from && t.to == to)
    else {
        return Err(reject(format!(
            "{api} has no transition {from} -> {to}"
        )));
    };
    let old = pfa.transitions[target].probability;
    let sibling_mass: f64 = pfa
        .transitions
        .iter()
        .filter(|t| t.from == from && t.to != to)
        .map(|t| t.probability)
        .sum();
    if sibling_mass <= 0.0 && (probability - 1.0).abs() > 1e-12 {
        return Err(reject(format!(
            "{api} state {from}: no sibling transitions to absorb mass {}",
            1.0 - probability
        )));
    }
    let scale = if sibling_mass > 0.0 {
        (1.0 - probability) / sibling_mass
    } else {
        0.0
    };
    for t in &mut pfa.transitions {
        if t.from == from {
            t.probability = if t.to == to {
                probability
            } else {
                t.probability * scale
            };
        }
    }
    repair_pfa(pfa, log)?;
    if bundle.is_fitted() {
        let pfa = bundle.pfa(api).expect("pfa").clone();
        if let Some(gcm) = bundle.gcm_mut(api) {
            refresh_probabilities(&mut gcm.equation, &pfa, log);
        }
    }
    log.note(format!(
        "set_transition_prob: {api} {from} -> {to} changed {old:.6} -> {probability:.6}"
    ));
    Ok(())
}

fn scale_coefficient(
    bundle: &mut ModelBundle,
    api: &ApiId,
    callee: &ApiId,
    factor: f64,
    log: &mut ChangeLog,
) -> Result<()> {
    if factor <= 0.0 || !factor.is_finite() {
        return Err(reject(format!("factor {factor} must be positive")));
    }
    if !bundle.is_fitted() {
        return Err(reject("bundle has no fitted models to scale"));
    }
    let gcm = bundle
        .gcm_mut(api)
        .ok_or_else(|| reject(format!("no gcm for {api}")))?;
    let term = gcm
        .equation
        .groups
        .iter_mut()
        .flat_map(|g| g.terms.iter_mut())
        .find(|t| &t.callee == callee)
        .ok_or_else(|| reject(format!("{api} has no term for {callee}")))?;
    let old = term.coefficient;
    term.coefficient *= factor;
    log.note(format!(
        "scale_coefficient: {api} term {callee} scaled {old:.6} -> {:.6}",
        term.coefficient
    ));
    Ok(())
}

fn set_local_work(
    bundle: &mut ModelBundle,
    api: &ApiId,
    constant_us: f64,
    log: &mut ChangeLog,
) -> Result<()> {
    if constant_us < 0.0 || !constant_us.is_finite() {
        return Err(reject(format!("local work {constant_us} must be >= 0")));
    }
    if !bundle.is_fitted() {
        return Err(reject("bundle has no fitted models"));
    }
    let gcm = bundle
        .gcm_mut(api)
        .ok_or_else(|| reject(format!("no gcm for {api}")))?;
    gcm.equation.local_work = ResidualModel::constant(constant_us);
    log.note(format!("set_local_work: {api} local work fixed at {constant_us} us"));
    Ok(())
}

fn downscale(
    bundle: &mut ModelBundle,
    keep_services: &BTreeSet<String>,
    log: &mut ChangeLog,
) -> Result<()> {
    if keep_services.is_empty() {
        return Err(reject("keep set is empty"));
    }
    for s in keep_services {
        if !bundle.topology.partitions.contains(s) {
            return Err(reject(format!("keep set names unknown service {s:?}")));
        }
    }
    let doomed: BTreeSet<ApiId> = bundle
        .topology
        .vertices
        .iter()
        .filter(|v| !keep_services.contains(&v.id.service))
        .map(|v| v.id.clone())
        .collect();
    // Surviving callers lose their doomed callees; doomed callers need no
    // repair of their own since their automata go away wholesale.
    let scrubs: Vec<(ApiId, ApiId)> = bundle
        .topology
        .edges
        .iter()
        .filter(|e| !doomed.contains(&e.caller) && doomed.contains(&e.callee))
        .map(|e| (e.caller.clone(), e.callee.clone()))
        .collect();
    bundle
        .topology
        .edges
        .retain(|e| !doomed.contains(&e.caller) && !doomed.contains(&e.callee));
    bundle.topology.vertices.retain(|v| !doomed.contains(&v.id));
    bundle.pfas.retain(|p| !doomed.contains(&p.api));
    bundle.gcms.retain(|g| !doomed.contains(&g.api));
    for (caller, callee) in &scrubs {
        scrub_callee(bundle, caller, callee, log)?;
    }
    recompute_partitions(bundle);
    log.note(format!(
        "downscale: kept {} service(s), removed {} vertex(es)",
        keep_services.len(),
        doomed.len()
    ));
    Ok(())
}

fn merge_services(
    bundle: &mut ModelBundle,
    services: &[String],
    new_name: &str,
    log: &mut ChangeLog,
) -> Result<()> {
    if services.is_empty() {
        return Err(reject("no services to merge"));
    }
    for s in services {
        if !bundle.topology.partitions.contains(s) {
            return Err(reject(format!("unknown service {s:?}")));
        }
    }
    // Vertices renamed in service order, then operation order; colliding
    // operation names get a numeric suffix.
    let mut rename: BTreeMap<ApiId, ApiId> = BTreeMap::new();
    let mut taken: BTreeSet<String> = bundle
        .topology
        .vertices
        .iter()
        .filter(|v| v.id.service == new_name && !services.contains(&v.id.service))
        .map(|v| v.id.operation.clone())
        .collect();
    for service in services {
        let mut ops: Vec<String> = bundle
            .topology
            .vertices
            .iter()
            .filter(|v| &v.id.service == service)
            .map(|v| v.id.operation.clone())
            .collect();
        ops.sort();
        for op in ops {
            let old = ApiId::new(service, &op);
            if rename.contains_key(&old) {
                continue;
            }
            let mut candidate = op.clone();
            let mut n = 2;
            while taken.contains(&candidate) {
                candidate = format!("{op}#{n}");
                n += 1;
            }
            taken.insert(candidate.clone());
            if candidate != op {
                log.note(format!(
                    "repair: operation {old} renamed to {new_name}.{candidate} to avoid collision"
                ));
            }
            rename.insert(old, ApiId::new(new_name, &candidate));
        }
    }
    let map = |id: &ApiId| rename.get(id).cloned().unwrap_or_else(|| id.clone());

    for v in &mut bundle.topology.vertices {
        v.id = map(&v.id);
    }
    for e in &mut bundle.topology.edges {
        e.caller = map(&e.caller);
        e.callee = map(&e.callee);
        e.is_remote = e.caller.service != e.callee.service;
    }
    for pfa in &mut bundle.pfas {
        pfa.api = map(&pfa.api);
        for state in &mut pfa.states {
            if let StateKind::Step(set) = &mut state.kind {
                *set = set.iter().map(&map).collect();
            }
        }
    }
    for gcm in &mut bundle.gcms {
        gcm.api = map(&gcm.api);
        for group in &mut gcm.equation.groups {
            for term in &mut group.terms {
                term.callee = map(&term.callee);
            }
        }
        for cr in &mut gcm.equation.local_work.by_caller {
            cr.caller = map(&cr.caller);
        }
        gcm.equation
            .local_work
            .by_caller
            .sort_by(|a, b| a.caller.cmp(&b.caller));
    }
    recompute_partitions(bundle);
    log.note(format!(
        "merge_services: {services:?} merged into {new_name:?} ({} vertices)",
        rename.len()
    ));
    Ok(())
}

fn recompute_partitions(bundle: &mut ModelBundle) {
    bundle.topology.partitions = bundle
        .topology
        .vertices
        .iter()
        .map(|v| v.id.service.clone())
        .collect();
}
