//! Span parsing, per-request tree assembly, and trace filtering.
//!
//! Input is line-delimited JSON, one span record per line:
//! `trace_id`, `span_id`, `parent_span_id` (null for roots), `service`,
//! `operation`, `start_us`, `duration_us`. Timestamps are integer
//! microseconds; only differences carry meaning.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::io::BufRead;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::topology::ApiId;

pub const FILTERS_VERSION: &str = "palette-filters/v1";

/// One recorded API execution within a request.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub trace_id: String,
    pub span_id: String,
    #[serde(default)]
    pub parent_span_id: Option<String>,
    pub service: String,
    pub operation: String,
    pub start_us: i64,
    pub duration_us: u64,
}

impl Span {
    pub fn api(&self) -> ApiId {
        ApiId::new(&self.service, &self.operation)
    }

    pub fn end_us(&self) -> i64 {
        self.start_us + self.duration_us as i64
    }
}

/// A span plus its children, ordered by (start_us, span_id).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpanNode {
    pub span: Span,
    pub children: Vec<SpanNode>,
}

impl SpanNode {
    fn sort_children(&mut self) {
        self.children
            .sort_by(|a, b| (a.span.start_us, &a.span.span_id).cmp(&(b.span.start_us, &b.span.span_id)));
        for child in &mut self.children {
            child.sort_children();
        }
    }
}

/// The per-request tree reconstructed from parent links.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceTree {
    pub trace_id: String,
    pub root: SpanNode,
}

impl TraceTree {
    /// Depth-first, parent before children, siblings in deterministic order.
    pub fn preorder(&self) -> Preorder<'_> {
        Preorder {
            stack: vec![&self.root],
        }
    }

    pub fn span_count(&self) -> usize {
        self.preorder().count()
    }

    pub fn services(&self) -> BTreeSet<&str> {
        self.preorder().map(|n| n.span.service.as_str()).collect()
    }

    /// Flatten back to span records (preorder).
    pub fn to_spans(&self) -> Vec<Span> {
        self.preorder().map(|n| n.span.clone()).collect()
    }
}

pub struct Preorder<'a> {
    stack: Vec<&'a SpanNode>,
}

impl<'a> Iterator for Preorder<'a> {
    type Item = &'a SpanNode;

    fn next(&mut self) -> Option<&'a SpanNode> {
        let node = self.stack.pop()?;
        self.stack.extend(node.children.iter().rev());
        Some(node)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    MissingParent,
    MultipleRoots,
    DuplicateSpanId,
    Cycle,
}

impl fmt::Display for RejectReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            RejectReason::MissingParent => "missing_parent",
            RejectReason::MultipleRoots => "multiple_roots",
            RejectReason::DuplicateSpanId => "duplicate_span_id",
            RejectReason::Cycle => "cycle",
        };
        f.write_str(s)
    }
}

/// A trace that failed structural validation, with the offending detail.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RejectedTrace {
    pub trace_id: String,
    pub reason: RejectReason,
    pub detail: String,
}

/// A malformed input line, skipped during parsing.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParseDiagnostic {
    pub line: usize,
    pub message: String,
}

impl fmt::Display for ParseDiagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}: {}", self.line, self.message)
    }
}

#[derive(Debug, Default)]
pub struct ParseOutcome {
    pub spans: Vec<Span>,
    pub skipped: Vec<ParseDiagnostic>,
}

/// Parse line-delimited span records. Malformed lines are reported and
/// skipped; an unreadable stream is fatal.
pub fn parse_spans(reader: impl BufRead) -> Result<ParseOutcome> {
    let mut out = ParseOutcome::default();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<Span>(&line) {
            Ok(span) => {
                if span.trace_id.is_empty() || span.span_id.is_empty() {
                    out.skipped.push(ParseDiagnostic {
                        line: line_no,
                        message: "empty trace_id or span_id".to_string(),
                    });
                } else {
                    out.spans.push(span);
                }
            }
            Err(e) => out.skipped.push(ParseDiagnostic {
                line: line_no,
                message: e.to_string(),
            }),
        }
    }
    Ok(out)
}

pub fn parse_spans_str(input: &str) -> Result<ParseOutcome> {
    parse_spans(input.as_bytes())
}

/// Serialize spans as line-delimited JSON, one record per line.
pub fn spans_to_jsonl(spans: &[Span]) -> String {
    let mut out = String::new();
    for span in spans {
        out.push_str(&serde_json::to_string(span).expect("span serializes"));
        out.push('\n');
    }
    out
}

/// Group spans by trace id and build trees via parent links.
///
/// Traces with duplicate span ids, unresolved parents, multiple roots, or
/// parent cycles are rejected whole; accepted trees satisfy all structural
/// invariants. Output is ordered by trace id.
pub fn assemble_traces(spans: Vec<Span>) -> (Vec<TraceTree>, Vec<RejectedTrace>) {
    let mut by_trace: BTreeMap<String, Vec<Span>> = BTreeMap::new();
    for span in spans {
        by_trace.entry(span.trace_id.clone()).or_default().push(span);
    }

    let mut accepted = Vec::new();
    let mut rejected = Vec::new();
    'traces: for (trace_id, spans) in by_trace {
        let mut ids: HashSet<&str> = HashSet::with_capacity(spans.len());
        for span in &spans {
            if !ids.insert(&span.span_id) {
                rejected.push(RejectedTrace {
                    trace_id,
                    reason: RejectReason::DuplicateSpanId,
                    detail: format!("span_id {:?} appears more than once", span.span_id),
                });
                continue 'traces;
            }
        }
        for span in &spans {
            if let Some(parent) = &span.parent_span_id {
                if !ids.contains(parent.as_str()) {
                    rejected.push(RejectedTrace {
                        trace_id,
                        reason: RejectReason::MissingParent,
                        detail: format!(
                            "span {:?} references missing parent {:?}",
                            span.span_id, parent
                        ),
                    });
                    continue 'traces;
                }
            }
        }
        let roots: Vec<&Span> = spans.iter().filter(|s| s.parent_span_id.is_none()).collect();
        if roots.len() > 1 {
            let names: Vec<&str> = roots.iter().map(|s| s.span_id.as_str()).collect();
            rejected.push(RejectedTrace {
                trace_id,
                reason: RejectReason::MultipleRoots,
                detail: format!("root spans: {names:?}"),
            });
            continue;
        }
        let Some(root) = roots.first() else {
            rejected.push(RejectedTrace {
                trace_id,
                reason: RejectReason::Cycle,
                detail: "no root span; parent links form a cycle".to_string(),
            });
            continue;
        };

        let root_id = root.span_id.clone();
        let mut nodes: HashMap<String, SpanNode> = spans
            .into_iter()
            .map(|s| {
                (
                    s.span_id.clone(),
                    SpanNode {
                        span: s,
                        children: Vec::new(),
                    },
                )
            })
            .collect();

        // Attach children bottom-up in reverse topological order: repeatedly
        // move leaves into their parents. Spans left over are unreachable
        // from the root, i.e. they sit on a parent cycle.
        let mut child_count: HashMap<String, usize> = HashMap::new();
        for node in nodes.values() {
            if let Some(p) = &node.span.parent_span_id {
                *child_count.entry(p.clone()).or_default() += 1;
            }
        }
        let mut leaves: Vec<String> = nodes
            .keys()
            .filter(|id| !child_count.contains_key(*id))
            .cloned()
            .collect();
        while let Some(id) = leaves.pop() {
            if id == root_id {
                continue;
            }
            let node = nodes.remove(&id).expect("leaf exists");
            let parent_id = node.span.parent_span_id.clone().expect("non-root has parent");
            nodes
                .get_mut(&parent_id)
                .expect("parent present")
                .children
                .push(node);
            let remaining = child_count.get_mut(&parent_id).expect("tracked");
            *remaining -= 1;
            if *remaining == 0 {
                leaves.push(parent_id);
            }
        }
        if nodes.len() != 1 {
            rejected.push(RejectedTrace {
                trace_id,
                reason: RejectReason::Cycle,
                detail: format!("{} span(s) unreachable from root", nodes.len() - 1),
            });
            continue;
        }
        let mut root_node = nodes.remove(&root_id).expect("root remains");
        root_node.sort_children();
        accepted.push(TraceTree {
            trace_id,
            root: root_node,
        });
    }
    (accepted, rejected)
}

/// Predicates applied per trace. The empty spec is the identity.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterSpec {
    #[serde(default)]
    pub version: Option<String>,
    #[serde(default)]
    pub min_span_count: Option<usize>,
    #[serde(default)]
    pub max_span_count: Option<usize>,
    /// Keep only traces whose root span runs in this service.
    #[serde(default)]
    pub required_root_service: Option<String>,
    /// Drop traces containing any zero-duration span.
    #[serde(default)]
    pub drop_zero_duration: bool,
    /// Keep only traces whose spans all run in allowlisted services.
    #[serde(default)]
    pub service_allowlist: Option<BTreeSet<String>>,
    /// Drop traces containing any span in a denylisted service.
    #[serde(default)]
    pub service_denylist: BTreeSet<String>,
}

impl FilterSpec {
    pub fn validate(&self) -> Result<()> {
        if let Some(v) = &self.version {
            if v != FILTERS_VERSION {
                return Err(Error::SchemaVersion {
                    expected: FILTERS_VERSION.to_string(),
                    found: v.clone(),
                });
            }
        }
        if let (Some(min), Some(max)) = (self.min_span_count, self.max_span_count) {
            if min > max {
                return Err(Error::FilterConfig(format!(
                    "min_span_count {min} exceeds max_span_count {max}"
                )));
            }
        }
        Ok(())
    }

    pub fn accepts(&self, trace: &TraceTree) -> bool {
        let count = trace.span_count();
        if let Some(min) = self.min_span_count {
            if count < min {
                return false;
            }
        }
        if let Some(max) = self.max_span_count {
            if count > max {
                return false;
            }
        }
        if let Some(root_service) = &self.required_root_service {
            if &trace.root.span.service != root_service {
                return false;
            }
        }
        for node in trace.preorder() {
            if self.drop_zero_duration && node.span.duration_us == 0 {
                return false;
            }
            if self.service_denylist.contains(&node.span.service) {
                return false;
            }
            if let Some(allow) = &self.service_allowlist {
                if !allow.contains(&node.span.service) {
                    return false;
                }
            }
        }
        true
    }
}

/// Keep exactly the traces satisfying every predicate, preserving order.
pub fn apply_filters(traces: Vec<TraceTree>, spec: &FilterSpec) -> Result<Vec<TraceTree>> {
    spec.validate()?;
    Ok(traces.into_iter().filter(|t| spec.accepts(t)).collect())
}
