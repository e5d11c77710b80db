//! The versioned model document: topology, per-API automata, and fitted
//! causal models in one canonical, byte-stable JSON form.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::causal::{build_causal_graph, collect_observations, fit, FitEntry, FitReport, Gcm};
use crate::error::{Error, Result};
use crate::ingest::TraceTree;
use crate::pfa::{build_pfa, coarsen, step_sequences, CoarsenConfig, Pfa};
use crate::topology::{build_topology, ApiId, Topology};

pub const TOPOLOGY_VERSION: &str = "palette-topology/v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelBundle {
    pub version: String,
    pub topology: Topology,
    /// One automaton per vertex, sorted by API id.
    pub pfas: Vec<Pfa>,
    /// Fitted models, sorted by API id; empty until the fit stage runs.
    pub gcms: Vec<Gcm>,
    pub coarsen: CoarsenConfig,
}

impl ModelBundle {
    pub fn pfa(&self, api: &ApiId) -> Option<&Pfa> {
        self.pfas
            .binary_search_by(|p| p.api.cmp(api))
            .ok()
            .map(|i| &self.pfas[i])
    }

    pub fn pfa_mut(&mut self, api: &ApiId) -> Option<&mut Pfa> {
        self.pfas
            .binary_search_by(|p| p.api.cmp(api))
            .ok()
            .map(|i| &mut self.pfas[i])
    }

    pub fn gcm(&self, api: &ApiId) -> Option<&Gcm> {
        self.gcms
            .binary_search_by(|g| g.api.cmp(api))
            .ok()
            .map(|i| &self.gcms[i])
    }

    pub fn gcm_mut(&mut self, api: &ApiId) -> Option<&mut Gcm> {
        self.gcms
            .binary_search_by(|g| g.api.cmp(api))
            .ok()
            .map(|i| &mut self.gcms[i])
    }

    pub fn is_fitted(&self) -> bool {
        !self.gcms.is_empty()
    }

    /// Re-establish the sorted orders lookups rely on.
    pub fn normalize_order(&mut self) {
        self.topology.vertices.sort_by(|a, b| a.id.cmp(&b.id));
        self.topology
            .edges
            .sort_by(|a, b| (&a.caller, &a.callee).cmp(&(&b.caller, &b.callee)));
        self.pfas.sort_by(|a, b| a.api.cmp(&b.api));
        self.gcms.sort_by(|a, b| a.api.cmp(&b.api));
    }

    /// Canonical JSON form (field order fixed, keys sorted, trailing newline).
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("bundle serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        check_version(text, TOPOLOGY_VERSION)?;
        let bundle: ModelBundle =
            serde_json::from_str(text).map_err(|e| Error::Document(e.to_string()))?;
        Ok(bundle)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::from_json(&text)
    }
}

/// Check the `version` field of a JSON document before full parsing, so
/// stage mismatches produce a version error rather than a shape error.
pub fn check_version(text: &str, expected: &str) -> Result<()> {
    let value: serde_json::Value =
        serde_json::from_str(text).map_err(|e| Error::Document(e.to_string()))?;
    match value.get("version").and_then(|v| v.as_str()) {
        Some(found) if found == expected => Ok(()),
        Some(found) => Err(Error::SchemaVersion {
            expected: expected.to_string(),
            found: found.to_string(),
        }),
        None => Err(Error::SchemaVersion {
            expected: expected.to_string(),
            found: "<missing>".to_string(),
        }),
    }
}

/// Build topology plus coarsened per-API automata from traces.
pub fn build_bundle(
    traces: &[TraceTree],
    reservoir_size: usize,
    seed: u64,
    config: &CoarsenConfig,
) -> Result<ModelBundle> {
    config.validate()?;
    let topology = build_topology(traces, reservoir_size, seed);
    let sequences = step_sequences(traces, config.overlap_epsilon_us);
    let mut pfas = Vec::with_capacity(sequences.len());
    for (api, seqs) in &sequences {
        pfas.push(coarsen(&build_pfa(api, seqs), config)?);
    }
    Ok(ModelBundle {
        version: TOPOLOGY_VERSION.to_string(),
        topology,
        pfas,
        gcms: Vec::new(),
        coarsen: *config,
    })
}

/// Fit a causal model for every API in the bundle from the given traces.
pub fn fit_bundle(bundle: &ModelBundle, traces: &[TraceTree]) -> Result<(ModelBundle, FitReport)> {
    let observations = collect_observations(traces);
    let mut gcms = Vec::with_capacity(bundle.pfas.len());
    let mut entries: Vec<FitEntry> = Vec::with_capacity(bundle.pfas.len());
    for pfa in &bundle.pfas {
        let skeleton = build_causal_graph(pfa).skeleton;
        let obs = observations
            .get(&pfa.api)
            .ok_or_else(|| Error::NoObservations {
                api: pfa.api.clone(),
            })?;
        let (equation, entry) = fit(
            &pfa.api,
            &skeleton,
            obs,
            bundle.topology.reservoir_size,
            bundle.topology.seed,
        )?;
        gcms.push(Gcm {
            api: pfa.api.clone(),
            equation,
        });
        entries.push(entry);
    }
    let mut fitted = bundle.clone();
    fitted.gcms = gcms;
    fitted.normalize_order();
    Ok((fitted, FitReport::new(entries)))
}
