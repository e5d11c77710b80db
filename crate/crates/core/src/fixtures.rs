//! Synthetic trace generators for tests and benchmarks.

use rand::Rng;
use rand_distr::{Distribution, LogNormal};

use std::collections::BTreeSet;

use crate::bundle::{build_bundle, fit_bundle, ModelBundle};
use crate::causal::FitReport;
use crate::ingest::{assemble_traces, Span, TraceTree};
use crate::intervene::{InterventionOp, InterventionScript};
use crate::pfa::CoarsenConfig;
use crate::rng::derive_rng;
use crate::topology::ApiId;

fn span(
    trace: &str,
    id: &str,
    parent: Option<&str>,
    api: &ApiId,
    start: i64,
    dur: u64,
) -> Span {
    Span {
        trace_id: trace.to_string(),
        span_id: id.to_string(),
        parent_span_id: parent.map(str::to_string),
        service: api.service.clone(),
        operation: api.operation.clone(),
        start_us: start,
        duration_us: dur,
    }
}

pub fn golden_apis() -> (ApiId, ApiId, ApiId, ApiId, ApiId) {
    (
        ApiId::new("svc_a", "a"),
        ApiId::new("svc_b", "b"),
        ApiId::new("svc_c", "c"),
        ApiId::new("svc_d", "d"),
        ApiId::new("svc_e", "e"),
    )
}

/// Traces realizing the golden branching system: per block of 100 root
/// executions, the first step is B (40), C (50), or the concurrent pair
/// D||E (10); 20% of B paths and 10% of C paths run D||E afterwards.
/// Probabilities are exact for every `scale`.
pub fn golden_traces(scale: usize, seed: u64) -> Vec<TraceTree> {
    let (a, b, c, d, e) = golden_apis();
    let mut rng = derive_rng(seed, "golden-traces", 0);
    let lat_b = LogNormal::new((20_000.0f64).ln(), 0.4).unwrap();
    let lat_c = LogNormal::new((30_000.0f64).ln(), 0.4).unwrap();
    let lat_d = LogNormal::new((25_000.0f64).ln(), 0.4).unwrap();
    let lat_e = LogNormal::new((40_000.0f64).ln(), 0.4).unwrap();
    let local = LogNormal::new((5_000.0f64).ln(), 0.3).unwrap();

    let mut spans = Vec::new();
    let mut idx = 0usize;
    // (has_b, has_c, has_de, copies per block)
    let kinds: [(bool, bool, bool, usize); 5] = [
        (true, false, false, 32),
        (true, false, true, 8),
        (false, true, false, 45),
        (false, true, true, 5),
        (false, false, true, 10),
    ];
    for _ in 0..scale {
        for (has_b, has_c, has_de, copies) in kinds {
            for _ in 0..copies {
                let t = format!("g{idx:07}");
                idx += 1;
                let gap = (local.sample(&mut rng) / 3.0).max(1.0) as i64;
                let mut cursor: i64 = gap;
                let mut total: u64 = 0;
                if has_b {
                    let dur = lat_b.sample(&mut rng) as u64;
                    spans.push(span(&t, "s1", Some("root"), &b, cursor, dur));
                    cursor += dur as i64 + gap;
                    total += dur;
                }
                if has_c {
                    let dur = lat_c.sample(&mut rng) as u64;
                    spans.push(span(&t, "s2", Some("root"), &c, cursor, dur));
                    cursor += dur as i64 + gap;
                    total += dur;
                }
                if has_de {
                    let dur_d = lat_d.sample(&mut rng) as u64;
                    let dur_e = lat_e.sample(&mut rng) as u64;
                    spans.push(span(&t, "s3", Some("root"), &d, cursor, dur_d));
                    spans.push(span(&t, "s4", Some("root"), &e, cursor, dur_e));
                    total += dur_d.max(dur_e);
                }
                let own = total + 3 * gap as u64;
                spans.push(span(&t, "root", None, &a, 0, own));
            }
        }
    }
    let (trees, rejected) = assemble_traces(spans);
    assert!(rejected.is_empty(), "golden fixture must assemble cleanly");
    trees
}

/// Built and fitted golden bundle plus the generating traces.
pub fn golden_bundle(scale: usize, seed: u64) -> (ModelBundle, FitReport, Vec<TraceTree>) {
    let traces = golden_traces(scale, seed);
    let bundle = build_bundle(&traces, 10_000, seed, &CoarsenConfig::default())
        .expect("golden bundle builds");
    let (fitted, report) = fit_bundle(&bundle, &traces).expect("golden bundle fits");
    (fitted, report, traces)
}

pub fn strawman_apis() -> (ApiId, ApiId, ApiId) {
    (
        ApiId::new("svc_a", "front"),
        ApiId::new("svc_c", "batch"),
        ApiId::new("svc_b", "work"),
    )
}

/// The two-caller scenario: A -> B with light work (median 10 ms) and
/// C -> B with heavy work (median 100 ms). A per-API mean erases the
/// caller-conditioned difference; the fitted model must keep it.
pub fn strawman_traces(per_caller: usize, seed: u64) -> Vec<TraceTree> {
    let (front, batch, work) = strawman_apis();
    let mut rng = derive_rng(seed, "strawman-traces", 0);
    let light = LogNormal::new((10_000.0f64).ln(), 0.6).unwrap();
    let heavy = LogNormal::new((100_000.0f64).ln(), 0.6).unwrap();
    let local = LogNormal::new((2_000.0f64).ln(), 0.3).unwrap();

    let mut spans = Vec::new();
    for i in 0..per_caller {
        for (tag, root, dist) in [("l", &front, &light), ("h", &batch, &heavy)] {
            let t = format!("s{tag}{i:07}");
            let b_dur = dist.sample(&mut rng) as u64;
            let own_local = local.sample(&mut rng) as u64;
            let lead = (own_local / 2).max(1);
            spans.push(span(&t, "root", None, root, 0, b_dur + own_local));
            spans.push(span(&t, "leaf", Some("root"), &work, lead as i64, b_dur));
        }
    }
    let (trees, rejected) = assemble_traces(spans);
    assert!(rejected.is_empty());
    trees
}

/// A randomized layered system: `services` services with 1-2 APIs each,
/// every non-root API reachable from the root. Used for intervention
/// robustness sweeps.
pub fn random_traces(services: usize, trace_count: usize, seed: u64) -> Vec<TraceTree> {
    assert!(services >= 2);
    let mut rng = derive_rng(seed, "random-design", 0);
    let mut apis: Vec<ApiId> = Vec::new();
    for s in 0..services {
        let ops = 1 + (rng.random::<u32>() % 2) as usize;
        for o in 0..ops {
            apis.push(ApiId::new(&format!("svc{s:02}"), &format!("op{o}")));
        }
    }
    // Layered call design: api i may call apis with larger indices; each
    // non-root api gets one guaranteed caller so every service shows up.
    let n = apis.len();
    let mut callees: Vec<Vec<(usize, f64, bool)>> = vec![Vec::new(); n];
    for i in 1..n {
        let caller = rng.random_range(0..i);
        callees[caller].push((i, 0.6 + rng.random::<f64>() * 0.4, rng.random::<f64>() < 0.3));
    }
    for (i, list) in callees.iter_mut().enumerate() {
        if list.len() < 3 && i + 1 < n {
            let extra = rng.random_range(i + 1..n);
            if !list.iter().any(|(c, _, _)| *c == extra) && rng.random::<f64>() < 0.5 {
                list.push((extra, rng.random::<f64>().max(0.1), false));
            }
        }
        list.sort_by_key(|(c, _, _)| *c);
    }

    #[allow(clippy::too_many_arguments)]
    fn emit(
        api_idx: usize,
        apis: &[ApiId],
        callees: &[Vec<(usize, f64, bool)>],
        trace: &str,
        parent: Option<&str>,
        start: i64,
        next_span: &mut usize,
        spans: &mut Vec<Span>,
        rng: &mut impl Rng,
        dist: &LogNormal<f64>,
        depth: usize,
    ) -> u64 {
        let my_id = format!("n{}", *next_span);
        *next_span += 1;
        let slot = spans.len();
        spans.push(span(trace, &my_id, parent, &apis[api_idx], start, 0));
        let mut cursor = start + 50;
        let mut max_end = start;
        let mut prev: Option<(i64, i64)> = None;
        for (child, p, overlap) in &callees[api_idx] {
            if depth >= 6 || rng.random::<f64>() >= *p {
                continue;
            }
            // An overlapping child starts halfway into the previous one.
            let child_start = match (overlap, prev) {
                (true, Some((ps, pe))) if pe - ps >= 2 => ps + (pe - ps) / 2,
                _ => cursor,
            };
            let dur = emit(
                *child, apis, callees, trace, Some(&my_id), child_start, next_span, spans,
                rng, dist, depth + 1,
            );
            let child_end = child_start + dur as i64;
            max_end = max_end.max(child_end);
            cursor = max_end + 50;
            prev = Some((child_start, child_end));
        }
        let local = dist.sample(rng) as u64;
        let dur = (max_end.max(start) - start) as u64 + local;
        spans[slot].duration_us = dur;
        dur
    }

    let dist = LogNormal::new((3_000.0f64).ln(), 0.5).unwrap();
    let mut spans = Vec::new();
    let mut rng_lat = derive_rng(seed, "random-latency", 0);
    for t_idx in 0..trace_count {
        let trace = format!("r{t_idx:06}");
        let mut next_span = 0usize;
        emit(
            0, &apis, &callees, &trace, None, 0, &mut next_span, &mut spans, &mut rng_lat,
            &dist, 0,
        );
    }
    let (trees, rejected) = assemble_traces(spans);
    assert!(rejected.is_empty());
    trees
}

pub fn random_bundle(services: usize, trace_count: usize, seed: u64) -> ModelBundle {
    let traces = random_traces(services, trace_count, seed);
    let bundle =
        build_bundle(&traces, 256, seed, &CoarsenConfig::default()).expect("random bundle builds");
    let (fitted, _) = fit_bundle(&bundle, &traces).expect("random bundle fits");
    fitted
}

/// A short random intervention script over entities of `bundle`. Ops are
/// drawn to be mostly applicable; scripts may still be rejected (e.g. a
/// removal that leaves a caller with no behavior), which callers count.
pub fn random_script(bundle: &ModelBundle, rng: &mut impl Rng) -> InterventionScript {
    fn pick_api(apis: &[ApiId], rng: &mut impl Rng) -> ApiId {
        apis[rng.random_range(0..apis.len())].clone()
    }
    let apis: Vec<ApiId> = bundle.topology.vertices.iter().map(|v| v.id.clone()).collect();
    let services: Vec<String> = bundle.topology.partitions.iter().cloned().collect();

    let mut ops = Vec::new();
    let op_count = 1 + rng.random_range(0..4);
    for _ in 0..op_count {
        let op = match rng.random_range(0..10u32) {
            0 => InterventionOp::AddVertex {
                service: format!("aux{:03}", rng.random_range(0..40u32)),
                operation: "op0".to_string(),
            },
            1 | 2 => {
                let candidates: Vec<&ApiId> = bundle
                    .gcms
                    .iter()
                    .filter(|g| g.equation.term_count() > 0)
                    .map(|g| &g.api)
                    .collect();
                if candidates.is_empty() {
                    InterventionOp::SetLocalWork {
                        api: pick_api(&apis, rng),
                        constant_us: rng.random_range(0.0..20_000.0),
                    }
                } else {
                    let api = candidates[rng.random_range(0..candidates.len())].clone();
                    let gcm = bundle.gcm(&api).expect("candidate gcm");
                    let terms: Vec<ApiId> =
                        gcm.equation.terms().map(|t| t.callee.clone()).collect();
                    InterventionOp::ScaleCoefficient {
                        api,
                        callee: terms[rng.random_range(0..terms.len())].clone(),
                        factor: 0.25 + rng.random::<f64>() * 3.75,
                    }
                }
            }
            3 => InterventionOp::SetLocalWork {
                api: pick_api(&apis, rng),
                constant_us: rng.random_range(0.0..20_000.0),
            },
            4 | 5 => {
                let with_steps: Vec<&crate::pfa::Pfa> = bundle
                    .pfas
                    .iter()
                    .filter(|p| p.transitions.len() > 1)
                    .collect();
                if with_steps.is_empty() {
                    InterventionOp::SetLocalWork {
                        api: pick_api(&apis, rng),
                        constant_us: 1_000.0,
                    }
                } else {
                    let pfa = with_steps[rng.random_range(0..with_steps.len())];
                    let t = &pfa.transitions[rng.random_range(0..pfa.transitions.len())];
                    InterventionOp::SetTransitionProb {
                        api: pfa.api.clone(),
                        from: t.from,
                        to: t.to,
                        probability: 0.05 + rng.random::<f64>() * 0.9,
                    }
                }
            }
            6 => {
                if bundle.topology.edges.is_empty() {
                    InterventionOp::AddVertex {
                        service: "aux_empty".to_string(),
                        operation: "op0".to_string(),
                    }
                } else {
                    let e = &bundle.topology.edges
                        [rng.random_range(0..bundle.topology.edges.len())];
                    InterventionOp::RemoveEdge {
                        caller: e.caller.clone(),
                        callee: e.callee.clone(),
                    }
                }
            }
            7 => {
                let caller = pick_api(&apis, rng);
                let callee = pick_api(&apis, rng);
                InterventionOp::AddEdge {
                    caller,
                    callee,
                    probability: 0.05 + rng.random::<f64>() * 0.45,
                    coefficient: 1.0,
                }
            }
            8 => {
                let keep: BTreeSet<String> = services
                    .iter()
                    .filter(|_| rng.random::<f64>() < 0.85)
                    .cloned()
                    .collect();
                if keep.is_empty() {
                    InterventionOp::Downscale {
                        keep_services: services.iter().cloned().collect(),
                    }
                } else {
                    InterventionOp::Downscale {
                        keep_services: keep,
                    }
                }
            }
            _ => {
                if services.len() < 2 {
                    InterventionOp::SetLocalWork {
                        api: pick_api(&apis, rng),
                        constant_us: 500.0,
                    }
                } else {
                    let a = rng.random_range(0..services.len());
                    let mut b = rng.random_range(0..services.len());
                    while b == a {
                        b = rng.random_range(0..services.len());
                    }
                    InterventionOp::MergeServices {
                        services: vec![services[a].clone(), services[b].clone()],
                        new_name: format!("merged{:02}", rng.random_range(0..30u32)),
                    }
                }
            }
        };
        ops.push(op);
    }
    InterventionScript::new(ops)
}
