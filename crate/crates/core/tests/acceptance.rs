//! Acceptance suite: one test per release criterion, each printing a
//! pass/fail line and holding a runtime budget. Run with `--nocapture` to
//! see the lines.

use std::collections::{BTreeMap, BTreeSet};
use std::time::{Duration, Instant};

use palette_core::bundle::build_bundle;
use palette_core::causal::{
    evaluate, fit, CausalEquation, EquationKind, EquationTerm, GroupKind, Observation,
    ResidualModel, TermGroup,
};
use palette_core::fixtures::{
    golden_apis, golden_bundle, golden_traces, random_bundle, random_script, strawman_apis,
    strawman_traces,
};
use palette_core::ingest::assemble_traces;
use palette_core::intervene::{apply, validate_bundle, InterventionOp, InterventionScript};
use palette_core::pfa::{build_pfa, coarsen, step_sequences, CoarsenConfig, StateKind};
use palette_core::rng::derive_rng;
use palette_core::sim::{check_span_geometry, simulate, SimConfig};
use palette_core::topology::ApiId;
use palette_core::validate::{compare, Thresholds};
use rand::Rng;

struct Budget {
    name: &'static str,
    start: Instant,
    limit: Duration,
}

impl Budget {
    fn new(name: &'static str, limit_secs: u64) -> Self {
        Budget {
            name,
            start: Instant::now(),
            limit: Duration::from_secs(limit_secs),
        }
    }

    fn pass(self) {
        let elapsed = self.start.elapsed();
        println!(
            "{}: PASS ({:.2}s, budget {}s)",
            self.name,
            elapsed.as_secs_f64(),
            self.limit.as_secs()
        );
        assert!(
            elapsed <= self.limit,
            "{} exceeded its runtime budget: {elapsed:?}",
            self.name
        );
    }
}

fn step(apis: &[&ApiId]) -> StateKind {
    StateKind::Step(apis.iter().map(|a| (*a).clone()).collect())
}

/// Probability of the unique label-level transition `from` -> `to`.
fn label_prob(pfa: &palette_core::pfa::Pfa, from: &StateKind, to: &StateKind) -> f64 {
    let froms: Vec<u32> = pfa
        .states
        .iter()
        .filter(|s| &s.kind == from)
        .map(|s| s.id)
        .collect();
    assert_eq!(froms.len(), 1, "expected one state labeled {from:?}");
    pfa.successor_distribution(froms[0])
        .get(to)
        .copied()
        .unwrap_or(0.0)
}

#[test]
fn criterion_1_golden_pfa_exact() {
    let budget = Budget::new("criterion 1 (golden automaton, exact probabilities)", 1);
    let (a, b, c, d, e) = golden_apis();
    let traces = golden_traces(1, 42);
    assert_eq!(traces.len(), 100);
    let sequences = step_sequences(&traces, 0);
    let pfa = build_pfa(&a, &sequences[&a]);
    let pfa = coarsen(&pfa, &CoarsenConfig::default()).unwrap();

    let sb = step(&[&b]);
    let sc = step(&[&c]);
    let sde = step(&[&d, &e]);
    let start = StateKind::Start;
    let finish = StateKind::Finish;
    assert_eq!(pfa.step_state_count(), 3, "coarsened to one state per label");
    assert_eq!(label_prob(&pfa, &start, &sb), 0.4);
    assert_eq!(label_prob(&pfa, &start, &sc), 0.5);
    assert_eq!(label_prob(&pfa, &start, &sde), 0.1);
    assert_eq!(label_prob(&pfa, &sb, &finish), 0.8);
    assert_eq!(label_prob(&pfa, &sb, &sde), 0.2);
    assert_eq!(label_prob(&pfa, &sc, &finish), 0.9);
    assert_eq!(label_prob(&pfa, &sc, &sde), 0.1);
    assert_eq!(label_prob(&pfa, &sde, &finish), 1.0);
    budget.pass();
}

#[test]
fn criterion_2_coefficient_recovery() {
    let budget = Budget::new("criterion 2 (coefficient recovery to 1e-6)", 5);
    let api = ApiId::new("svc_p", "parent");
    let b = ApiId::new("svc_b", "b");
    let c = ApiId::new("svc_c", "c");
    let d = ApiId::new("svc_d", "d");
    let e = ApiId::new("svc_e", "e");

    // Sequential: parent = 2*a_B + 3*a_C + 5, noiseless.
    let mut rng = derive_rng(2024, "criterion2", 0);
    let observations: Vec<Observation> = (0..1000)
        .map(|_| {
            let xb = 50.0 + rng.random::<f64>() * 500.0;
            let xc = 20.0 + rng.random::<f64>() * 300.0;
            Observation {
                total_us: 2.0 * xb + 3.0 * xc + 5.0,
                children: BTreeMap::from([(b.clone(), xb), (c.clone(), xc)]),
                caller: None,
            }
        })
        .collect();
    let skeleton = CausalEquation {
        kind: EquationKind::Sequential,
        groups: vec![
            TermGroup {
                kind: GroupKind::Single,
                terms: vec![EquationTerm {
                    callee: b.clone(),
                    probability: 1.0,
                    coefficient: 1.0,
                }],
            },
            TermGroup {
                kind: GroupKind::Single,
                terms: vec![EquationTerm {
                    callee: c.clone(),
                    probability: 1.0,
                    coefficient: 1.0,
                }],
            },
        ],
        local_work: ResidualModel::constant(0.0),
    };
    let (eq, entry) = fit(&api, &skeleton, &observations, 1000, 7).unwrap();
    assert!((eq.coefficient(&b) - 2.0).abs() < 1e-6, "lambda_B {}", eq.coefficient(&b));
    assert!((eq.coefficient(&c) - 3.0).abs() < 1e-6, "lambda_C {}", eq.coefficient(&c));
    assert!((entry.residual_mean_us - 5.0).abs() < 1e-6, "C {}", entry.residual_mean_us);
    assert!((entry.residual_p50_us - 5.0).abs() < 1e-6);
    // Oracle: the fitted structural part reproduces the generating equation.
    for obs in observations.iter().take(50) {
        let called: BTreeMap<ApiId, bool> =
            obs.children.keys().map(|k| (k.clone(), true)).collect();
        let structural = evaluate(&eq, &obs.children, &called).unwrap();
        assert!((structural + 5.0 - obs.total_us).abs() < 1e-6);
    }

    // Concurrent: parent = max(a_D, a_E) + 1, noiseless.
    let observations: Vec<Observation> = (0..1000)
        .map(|_| {
            let xd = 50.0 + rng.random::<f64>() * 500.0;
            let xe = 50.0 + rng.random::<f64>() * 500.0;
            Observation {
                total_us: xd.max(xe) + 1.0,
                children: BTreeMap::from([(d.clone(), xd), (e.clone(), xe)]),
                caller: None,
            }
        })
        .collect();
    let skeleton = CausalEquation {
        kind: EquationKind::Concurrent,
        groups: vec![TermGroup {
            kind: GroupKind::Concurrent,
            terms: vec![
                EquationTerm {
                    callee: d.clone(),
                    probability: 1.0,
                    coefficient: 1.0,
                },
                EquationTerm {
                    callee: e.clone(),
                    probability: 1.0,
                    coefficient: 1.0,
                },
            ],
        }],
        local_work: ResidualModel::constant(0.0),
    };
    let (eq, entry) = fit(&api, &skeleton, &observations, 1000, 7).unwrap();
    assert!(entry.converged, "concurrent fit must converge within 100 iterations");
    assert!(entry.iterations <= 100);
    assert!((eq.coefficient(&d) - 1.0).abs() < 1e-6);
    assert!((eq.coefficient(&e) - 1.0).abs() < 1e-6);
    assert!((entry.residual_mean_us - 1.0).abs() < 1e-6);
    budget.pass();
}

#[test]
fn criterion_3_strawman_reproduction() {
    let budget = Budget::new("criterion 3 (caller-conditioned strawman)", 60);
    let (front, batch, work) = strawman_apis();
    let traces = strawman_traces(10_000, 1234);
    let bundle = build_bundle(&traces, 10_000, 77, &CoarsenConfig::default()).unwrap();
    let (fitted, _) = palette_core::bundle::fit_bundle(&bundle, &traces).unwrap();

    let run = |naive: bool, seed_base: u64| {
        let mut spans = Vec::new();
        for (i, root) in [&front, &batch].into_iter().enumerate() {
            let mut config = SimConfig::new(root.clone(), 10_000, seed_base + i as u64);
            config.naive = naive;
            spans.extend(simulate(&fitted, &config).unwrap().spans);
        }
        let (trees, rejected) = assemble_traces(spans);
        assert!(rejected.is_empty());
        trees
    };

    // Fitted model: per-caller medians within 10%, KS within 0.15.
    let synthetic = run(false, 500);
    let report = compare(&traces, &synthetic, &Thresholds::default());
    let group = |caller: &ApiId| {
        report
            .groups
            .iter()
            .find(|g| g.api == work && g.caller.as_ref() == Some(caller))
            .expect("leaf group present")
    };
    for caller in [&front, &batch] {
        let g = group(caller);
        assert!(g.gated);
        assert!(
            g.relative_median_error <= 0.10,
            "median error {} for caller {caller}",
            g.relative_median_error
        );
        assert!(g.ks <= 0.15, "ks {} for caller {caller}", g.ks);
    }
    assert!(report.passed, "fitted pipeline must pass validation");

    // Mean-only baseline: at least one caller's median is off by >= 4x and
    // validation fails.
    let naive_synthetic = run(true, 900);
    let naive_report = compare(&traces, &naive_synthetic, &Thresholds::default());
    assert!(!naive_report.passed, "naive pipeline must fail validation");
    let worst = [&front, &batch]
        .into_iter()
        .map(|caller| {
            naive_report
                .groups
                .iter()
                .find(|g| g.api == work && g.caller.as_ref() == Some(caller))
                .expect("leaf group present")
                .relative_median_error
        })
        .fold(0.0f64, f64::max);
    assert!(worst >= 4.0, "naive median error only {worst}");
    budget.pass();
}

#[test]
fn criterion_4_closure_and_criterion_7_geometry() {
    let budget4 = Budget::new("criterion 4 (closure within 0.01 at 100k requests)", 120);
    let (bundle, _, _) = golden_bundle(20, 42);
    let (a, ..) = golden_apis();
    let out = simulate(&bundle, &SimConfig::new(a.clone(), 100_000, 4242)).unwrap();
    assert_eq!(out.stats.completed, 100_000);
    let (synthetic, rejected) = assemble_traces(out.spans);
    assert!(rejected.is_empty());

    let rebuilt = build_bundle(&synthetic, 10_000, 99, &CoarsenConfig::default()).unwrap();

    // Graph structure identical: partitions, vertices, edges.
    assert_eq!(rebuilt.topology.partitions, bundle.topology.partitions);
    let ids = |b: &palette_core::bundle::ModelBundle| -> BTreeSet<ApiId> {
        b.topology.vertices.iter().map(|v| v.id.clone()).collect()
    };
    assert_eq!(ids(&rebuilt), ids(&bundle));
    let edge_set = |b: &palette_core::bundle::ModelBundle| -> BTreeSet<(ApiId, ApiId)> {
        b.topology
            .edges
            .iter()
            .map(|e| (e.caller.clone(), e.callee.clone()))
            .collect()
    };
    assert_eq!(edge_set(&rebuilt), edge_set(&bundle));

    // Every API's first-step transition probabilities within +/- 0.01.
    for pfa in &bundle.pfas {
        let other = rebuilt.pfa(&pfa.api).expect("api present in rebuilt model");
        let dist_a = pfa.first_step_distribution();
        let dist_b = other.first_step_distribution();
        let labels: BTreeSet<&StateKind> = dist_a.keys().chain(dist_b.keys()).collect();
        for label in labels {
            let pa = dist_a.get(label).copied().unwrap_or(0.0);
            let pb = dist_b.get(label).copied().unwrap_or(0.0);
            assert!(
                (pa - pb).abs() <= 0.01,
                "{}: first-step mass for {label:?} drifted {pa} -> {pb}",
                pfa.api
            );
        }
    }
    budget4.pass();

    let budget7 = Budget::new("criterion 7 (virtual-time span geometry)", 120);
    let mut checked = 0usize;
    for tree in &synthetic {
        let violations = check_span_geometry(tree);
        assert!(violations.is_empty(), "{}: {violations:?}", tree.trace_id);
        checked += 1;
    }
    assert_eq!(checked, 100_000);
    budget7.pass();
}

#[test]
fn criterion_5_intervention_validity() {
    let budget = Budget::new("criterion 5 (1000 random scripts preserve validity)", 60);
    let bundle = random_bundle(20, 600, 77);
    assert_eq!(bundle.topology.partitions.len(), 20);
    assert_eq!(validate_bundle(&bundle), Vec::new());

    let mut rng = derive_rng(20_000, "criterion5", 0);
    let mut accepted = 0usize;
    let mut attempts = 0usize;
    while accepted < 1000 {
        attempts += 1;
        assert!(
            attempts <= 10_000,
            "only {accepted} scripts accepted in {attempts} attempts"
        );
        let script = random_script(&bundle, &mut rng);
        if let Ok((modified, _)) = apply(&bundle, &script) {
            accepted += 1;
            let violations = validate_bundle(&modified);
            assert!(
                violations.is_empty(),
                "script {script:?} produced violations {violations:?}"
            );
        }
    }

    // Hand arithmetic on the golden case: removing the 0.5 branch leaves
    // 0.4/0.5 = 0.8 and 0.1/0.5 = 0.2.
    let (golden, _, _) = golden_bundle(2, 11);
    let (a, b, c, d, e) = golden_apis();
    let script = InterventionScript::new(vec![InterventionOp::RemoveEdge {
        caller: a.clone(),
        callee: c.clone(),
    }]);
    let (modified, _) = apply(&golden, &script).unwrap();
    let pfa = modified.pfa(&a).unwrap();
    let dist = pfa.first_step_distribution();
    assert_eq!(dist[&step(&[&b])], 0.8);
    assert_eq!(dist[&step(&[&d, &e])], 0.2);
    assert_eq!(validate_bundle(&modified), Vec::new());
    budget.pass();
}

#[test]
fn criterion_6_determinism() {
    let budget = Budget::new("criterion 6 (byte-identical determinism)", 10);
    let (bundle, _, _) = golden_bundle(2, 11);
    let (a, ..) = golden_apis();
    let config = SimConfig::new(a.clone(), 10_000, 31337);
    let first = simulate(&bundle, &config).unwrap();
    let second = simulate(&bundle, &config).unwrap();
    let bytes_a = palette_core::ingest::spans_to_jsonl(&first.spans);
    let bytes_b = palette_core::ingest::spans_to_jsonl(&second.spans);
    assert_eq!(bytes_a, bytes_b, "identical config must be byte-identical");

    let mut reseeded = config.clone();
    reseeded.seed += 1;
    let third = simulate(&bundle, &reseeded).unwrap();
    assert_ne!(
        bytes_a,
        palette_core::ingest::spans_to_jsonl(&third.spans),
        "changing the seed must change the output"
    );
    budget.pass();
}
