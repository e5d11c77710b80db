//! Learns a system topology (service graph, per-API probabilistic finite
//! automata, per-API causal latency models) from distributed traces, applies
//! targeted interventions to it, executes it in a deterministic virtual-time
//! runtime, and statistically compares synthetic traces against originals.

pub mod bundle;
pub mod causal;
pub mod error;
#[doc(hidden)]
pub mod fixtures;
pub mod ingest;
pub mod intervene;
pub mod nnls;
pub mod pfa;
pub mod reservoir;
pub mod rng;
pub mod sim;
pub mod stats;
pub mod topology;
pub mod validate;

pub use bundle::{build_bundle, fit_bundle, ModelBundle, TOPOLOGY_VERSION};
pub use causal::{
    build_causal_graph, collect_observations, correct, evaluate, expected_value, fit,
    sample_called, CausalEquation, CausalGraph, EquationKind, EquationTerm, FitReport, Gcm,
    GroupKind, Observation, ResidualModel, TermGroup,
};
pub use error::{Error, Result};
pub use intervene::{
    apply, validate_bundle, ChangeLog, InterventionOp, InterventionScript, Violation,
    INTERVENTIONS_VERSION,
};
pub use pfa::{
    build_pfa, coarsen, extract_steps, sample_path, step_sequences, CallSet, CoarsenConfig, Pfa,
    PfaState, StateKind, Transition,
};
pub use sim::{
    check_span_geometry, make_baggage, simulate, ArrivalModel, Baggage, SimConfig, SimOutput,
    SimStats, WorkModelKind,
};
pub use validate::{compare, Thresholds, ValidationReport, VALIDATION_VERSION};
pub use ingest::{
    apply_filters, assemble_traces, parse_spans, parse_spans_str, spans_to_jsonl, FilterSpec,
    ParseOutcome, RejectedTrace, Span, SpanNode, TraceTree,
};
pub use topology::{build_topology, merge_topologies, ApiId, ApiVertex, CallEdge, Topology};
