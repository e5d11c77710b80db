//! Directed system graph aggregated from trace trees: services (partitions),
//! API vertices, and caller-callee edges with bounded latency reservoirs.

use std::collections::BTreeMap;
use std::collections::BTreeSet;
use std::fmt;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::TraceTree;
use crate::reservoir::Reservoir;
use crate::rng;

/// Vertex identity: one unique API, belonging to exactly one service.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ApiId {
    pub service: String,
    pub operation: String,
}

impl ApiId {
    pub fn new(service: &str, operation: &str) -> Self {
        ApiId {
            service: service.to_string(),
            operation: operation.to_string(),
        }
    }

    /// Parse `service.operation` (split at the first dot).
    pub fn parse(s: &str) -> Result<Self> {
        match s.split_once('.') {
            Some((service, operation)) if !service.is_empty() && !operation.is_empty() => {
                Ok(ApiId::new(service, operation))
            }
            _ => Err(Error::Document(format!(
                "expected service.operation, got {s:?}"
            ))),
        }
    }

    /// Stable string key, e.g. for conditioning maps in documents.
    pub fn key(&self) -> String {
        format!("{}.{}", self.service, self.operation)
    }
}

impl fmt::Display for ApiId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.service, self.operation)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApiVertex {
    pub id: ApiId,
    pub invocation_count: u64,
    pub duration_sum_us: u64,
    pub latency_samples: Reservoir<u64>,
}

impl ApiVertex {
    /// Exact mean over every observed invocation, not just the reservoir.
    pub fn mean_duration_us(&self) -> f64 {
        if self.invocation_count == 0 {
            0.0
        } else {
            self.duration_sum_us as f64 / self.invocation_count as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CallEdge {
    pub caller: ApiId,
    pub callee: ApiId,
    pub call_count: u64,
    /// Callee durations observed on this edge (caller-conditioned).
    pub latency_samples: Reservoir<u64>,
    pub is_remote: bool,
}

/// The directed graph G = (P, V, E) plus build metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Topology {
    pub partitions: BTreeSet<String>,
    pub vertices: Vec<ApiVertex>,
    pub edges: Vec<CallEdge>,
    pub reservoir_size: usize,
    pub seed: u64,
    /// Parent-child span pairs on the same API, rejected at build time.
    pub skipped_self_loops: u64,
}

impl Topology {
    pub fn empty(reservoir_size: usize, seed: u64) -> Self {
        Topology {
            partitions: BTreeSet::new(),
            vertices: Vec::new(),
            edges: Vec::new(),
            reservoir_size,
            seed,
            skipped_self_loops: 0,
        }
    }

    pub fn vertex(&self, id: &ApiId) -> Option<&ApiVertex> {
        self.vertices
            .binary_search_by(|v| v.id.cmp(id))
            .ok()
            .map(|i| &self.vertices[i])
    }

    pub fn edge(&self, caller: &ApiId, callee: &ApiId) -> Option<&CallEdge> {
        self.edges
            .binary_search_by(|e| (&e.caller, &e.callee).cmp(&(caller, callee)))
            .ok()
            .map(|i| &self.edges[i])
    }

    pub fn out_edges<'a>(&'a self, caller: &'a ApiId) -> impl Iterator<Item = &'a CallEdge> {
        self.edges.iter().filter(move |e| &e.caller == caller)
    }
}

struct TopologyAccum {
    vertices: BTreeMap<ApiId, ApiVertex>,
    edges: BTreeMap<(ApiId, ApiId), CallEdge>,
    reservoir_size: usize,
    seed: u64,
    skipped_self_loops: u64,
}

impl TopologyAccum {
    fn new(reservoir_size: usize, seed: u64) -> Self {
        TopologyAccum {
            vertices: BTreeMap::new(),
            edges: BTreeMap::new(),
            reservoir_size,
            seed,
            skipped_self_loops: 0,
        }
    }

    fn record_vertex(&mut self, id: ApiId, duration_us: u64, rng: &mut ChaCha8Rng) {
        let size = self.reservoir_size;
        let v = self.vertices.entry(id.clone()).or_insert_with(|| ApiVertex {
            id,
            invocation_count: 0,
            duration_sum_us: 0,
            latency_samples: Reservoir::new(size),
        });
        v.invocation_count += 1;
        v.duration_sum_us += duration_us;
        v.latency_samples.add(duration_us, rng);
    }

    fn record_edge(
        &mut self,
        caller: ApiId,
        callee: ApiId,
        callee_duration_us: u64,
        rng: &mut ChaCha8Rng,
    ) {
        let size = self.reservoir_size;
        let is_remote = caller.service != callee.service;
        let e = self
            .edges
            .entry((caller.clone(), callee.clone()))
            .or_insert_with(|| CallEdge {
                caller,
                callee,
                call_count: 0,
                latency_samples: Reservoir::new(size),
                is_remote,
            });
        e.call_count += 1;
        e.latency_samples.add(callee_duration_us, rng);
    }

    fn freeze(self) -> Topology {
        let partitions = self
            .vertices
            .keys()
            .map(|id| id.service.clone())
            .collect();
        Topology {
            partitions,
            vertices: self.vertices.into_values().collect(),
            edges: self.edges.into_values().collect(),
            reservoir_size: self.reservoir_size,
            seed: self.seed,
            skipped_self_loops: self.skipped_self_loops,
        }
    }
}

/// Aggregate trace trees into the directed topology. Deterministic given
/// trace order and seed; an empty trace set yields an empty topology.
pub fn build_topology(traces: &[TraceTree], reservoir_size: usize, seed: u64) -> Topology {
    assert!(reservoir_size >= 1, "reservoir_size must be >= 1");
    let mut accum = TopologyAccum::new(reservoir_size, seed);
    let mut rng = rng::derive_rng(seed, "topology", 0);
    for trace in traces {
        for node in trace.preorder() {
            let caller = node.span.api();
            accum.record_vertex(caller.clone(), node.span.duration_us, &mut rng);
            for child in &node.children {
                let callee = child.span.api();
                if callee == caller {
                    accum.skipped_self_loops += 1;
                    continue;
                }
                accum.record_edge(caller.clone(), callee, child.span.duration_us, &mut rng);
            }
        }
    }
    accum.freeze()
}

/// Combine two topologies built over disjoint trace shards. Counts add;
/// reservoirs merge by weighted seeded resampling (commutative for a fixed
/// merge-seed schedule).
pub fn merge_topologies(a: &Topology, b: &Topology) -> Result<Topology> {
    if a.reservoir_size != b.reservoir_size {
        return Err(Error::ReservoirSizeMismatch {
            left: a.reservoir_size,
            right: b.reservoir_size,
        });
    }
    let merge_seed = a.seed ^ b.seed;
    let mut vertices: BTreeMap<ApiId, ApiVertex> =
        a.vertices.iter().map(|v| (v.id.clone(), v.clone())).collect();
    for v in &b.vertices {
        match vertices.get_mut(&v.id) {
            None => {
                vertices.insert(v.id.clone(), v.clone());
            }
            Some(existing) => {
                existing.invocation_count += v.invocation_count;
                existing.duration_sum_us += v.duration_sum_us;
                let mut rng =
                    rng::derive_rng(merge_seed, "merge-vertex", rng::mix(0, &v.id.key(), 0));
                existing.latency_samples =
                    existing.latency_samples.merge(&v.latency_samples, &mut rng);
            }
        }
    }
    let mut edges: BTreeMap<(ApiId, ApiId), CallEdge> = a
        .edges
        .iter()
        .map(|e| ((e.caller.clone(), e.callee.clone()), e.clone()))
        .collect();
    for e in &b.edges {
        match edges.get_mut(&(e.caller.clone(), e.callee.clone())) {
            None => {
                edges.insert((e.caller.clone(), e.callee.clone()), e.clone());
            }
            Some(existing) => {
                existing.call_count += e.call_count;
                let key = format!("{}->{}", e.caller.key(), e.callee.key());
                let mut rng = rng::derive_rng(merge_seed, "merge-edge", rng::mix(0, &key, 0));
                existing.latency_samples =
                    existing.latency_samples.merge(&e.latency_samples, &mut rng);
            }
        }
    }
    let mut partitions = a.partitions.clone();
    partitions.extend(b.partitions.iter().cloned());
    Ok(Topology {
        partitions,
        vertices: vertices.into_values().collect(),
        edges: edges.into_values().collect(),
        reservoir_size: a.reservoir_size,
        seed: merge_seed,
        skipped_self_loops: a.skipped_self_loops + b.skipped_self_loops,
    })
}
