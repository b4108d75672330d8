use meshran::scenario::{self, compare_matrix, parse, run_scenario, Scenario, ScenarioError};
use meshran::session::Approach;
use meshran::{LinkKind, NodeId, NodeKind, Variant};
use proptest::prelude::*;

fn bundled(name: &str) -> Scenario {
    parse(scenario::bundled(name).expect("bundled scenario")).expect("valid scenario")
}

fn p50(run: &scenario::ScenarioRun, v: Variant, a: Approach) -> u64 {
    run.report
        .cell(v, a)
        .unwrap()
        .metrics()
        .unwrap()
        .p50_us()
        .unwrap()
}

#[test]
fn bundled_scenarios_parse_and_run() {
    for (name, text) in scenario::BUNDLED {
        let s = parse(text).unwrap();
        assert_eq!(s.name, name);
        let run = run_scenario(&s, s.seed).unwrap();
        assert!(run.report.feasible().count() > 0, "{name}");
        for (_, m) in run.report.feasible() {
            assert_eq!(m.injected(), m.delivered() + m.dropped(), "{name}");
        }
    }
}

#[test]
fn three_placement_latency_bands() {
    let s = bundled("fig1_compare");
    let run = run_scenario(&s, s.seed).unwrap();
    let core = p50(&run, Variant::EmbbCentral, Approach::C);
    let agg = p50(&run, Variant::AggUpf, Approach::C);
    let mesh = p50(&run, Variant::MeshUrllc, Approach::C);
    assert!(core >= 10_000, "{core}");
    assert!((1_000..10_000).contains(&agg), "{agg}");
    assert!(mesh < 1_000, "{mesh}");
    // Frozen values for this calibration.
    assert_eq!((core, agg, mesh), (20_300, 3_900, 900));
    for (_, m) in run.report.feasible() {
        assert_eq!(m.delivered(), 100);
    }
}

#[test]
fn mesh_urllc_signalling_uses_the_aggregation_site_but_data_does_not() {
    let s = bundled("fig1_compare");
    let run = run_scenario(&s, s.seed).unwrap();
    let m = run
        .report
        .cell(Variant::MeshUrllc, Approach::C)
        .unwrap()
        .metrics()
        .unwrap();
    assert!(m.signalling.agg > 0);
    assert_eq!(m.signalling.core, 0);
    let (_, trace) = run
        .traces
        .iter()
        .find(|(k, _)| *k == (Variant::MeshUrllc, Approach::C))
        .unwrap();
    assert!(trace.data().count() > 0);
    assert!(trace.data().all(|l| !l.path.contains(&NodeId(20))));
}

#[test]
fn approach_b_without_uu_mesh_is_infeasible() {
    let mut s = bundled("fig1_compare");
    s.approaches = vec![Approach::B, Approach::C];
    let run = run_scenario(&s, s.seed).unwrap();
    let cell = run.report.cell(Variant::MeshUrllc, Approach::B).unwrap();
    assert!(cell.metrics().is_none());
    let text = cell.outcome.to_string();
    assert!(text.contains("interface rule"), "{text}");
    assert!(text.contains("Uu"), "{text}");
    assert!(run.report.to_string().contains("interface rule"));
    // Infeasible cells stay out of the CSV.
    assert!(!run.report.csv().contains(",B,"));

    s.approaches = vec![Approach::B];
    match run_scenario(&s, s.seed) {
        Err(ScenarioError::NoFeasibleCell(why)) => assert!(why.contains("interface rule")),
        other => panic!("expected NoFeasibleCell, got {other:?}"),
    }
}

#[test]
fn mesh_urllc_is_the_only_coreless_cell() {
    let mut s = bundled("fig1_compare");
    s.variants = [
        Variant::EmbbCentral,
        Variant::CloudConverged,
        Variant::AggUpf,
        Variant::MeshUrllc,
    ]
    .map(Into::into)
    .to_vec();
    let run = run_scenario(&s, s.seed).unwrap();
    for (c, m) in run.report.feasible() {
        let coreless = m.signalling.core == 0;
        assert_eq!(coreless, c.variant == Variant::MeshUrllc, "{}", c.variant);
    }
}

#[test]
fn iab_placements_keep_signalling_local() {
    let s = bundled("iab_variants");
    let run = run_scenario(&s, s.seed).unwrap();
    for (c, m) in run.report.feasible() {
        match c.variant {
            Variant::IabCoreInDu | Variant::IabP2p => {
                assert_eq!(m.signalling.core, 0, "{} {}", c.variant, c.approach);
                assert_eq!(m.signalling.donor_hops, 0, "{} {}", c.variant, c.approach);
            }
            Variant::IabCoreInCu => {
                assert_eq!(m.signalling.core, 0, "{} {}", c.variant, c.approach);
                assert!(m.signalling.donor_hops > 0, "{}", c.approach);
            }
            Variant::IabCentral => assert!(m.signalling.core > 0),
            _ => unreachable!(),
        }
    }
}

#[test]
fn failure_scenario_reports_reconvergence() {
    let s = bundled("failure_selfheal");
    let run = run_scenario(&s, s.seed).unwrap();
    for (c, m) in run.report.feasible() {
        assert_eq!(m.failures.len(), 1, "{}", c.approach);
        assert!(
            m.delivered() as f64 / m.injected() as f64 > 0.95,
            "{}",
            c.approach
        );
    }
    let a = run
        .report
        .cell(Variant::IabP2p, Approach::A)
        .unwrap()
        .metrics()
        .unwrap();
    assert_eq!(a.failures[0].reconvergence_us(), Some(0));
    let c = run
        .report
        .cell(Variant::IabP2p, Approach::C)
        .unwrap()
        .metrics()
        .unwrap();
    assert!(c.failures[0].reconvergence_us().unwrap() > 0);
}

#[test]
fn reliability_rows_are_within_three_sigma() {
    let s = bundled("reliability_kpaths");
    let run = run_scenario(&s, s.seed).unwrap();
    assert_eq!(run.report.reliability.len(), 3);
    let mut last = 0.0;
    for (label, e) in &run.report.reliability {
        assert!(e.within_sigmas(3.0), "{label}");
        assert!(e.analytic >= last);
        last = e.analytic;
    }
    assert!(run.report.to_string().contains("within 3 sigma"));
}

#[test]
fn csv_is_deterministic_and_well_formed() {
    let s = bundled("iab_variants");
    let a = run_scenario(&s, 99).unwrap().report.csv();
    let b = run_scenario(&s, 99).unwrap().report.csv();
    assert_eq!(a, b);
    let mut lines = a.lines();
    assert_eq!(lines.next(), Some(scenario::CSV_HEADER));
    for l in lines {
        assert_eq!(l.split(',').count(), 12, "{l}");
    }
}

#[test]
fn matrix_is_sorted_and_seed_is_shared() {
    let s = vec![bundled("iab_variants"), bundled("fig1_compare")];
    let run = compare_matrix(&s, 5).unwrap();
    assert_eq!(run.report.seed, 5);
    let keys: Vec<_> = run
        .report
        .cells
        .iter()
        .map(|c| (c.variant, c.approach))
        .collect();
    let mut sorted = keys.clone();
    sorted.sort();
    assert_eq!(keys, sorted);
    assert_eq!(keys.len(), 4 * 3 + 3);
}

#[test]
fn parse_errors_name_the_field() {
    let base = scenario::bundled("fig1_compare").unwrap();
    let cases = [
        (
            base.replace("src_ue = 1", "src_ue = 10"),
            "sessions[0].src_ue",
        ),
        (
            base.replace("dst_ue = 2", "dst_ue = 1"),
            "sessions[0].dst_ue",
        ),
        (
            base.replace("horizon_us = 400000", "horizon_us = 0"),
            "horizon_us",
        ),
        (
            base.replace("count = 100", "count = 100, interval_us = 0")
                .replace("interval_us = 1000, ", ""),
            "sessions[0].traffic.interval_us",
        ),
        (
            format!("{base}\n[[failures]]\nat_us = 5\nlink = [1, 2]\n"),
            "failures[0].link",
        ),
    ];
    for (text, field) in cases {
        match parse(&text) {
            Err(ScenarioError::Invalid { field: f, .. }) => assert_eq!(f, field),
            other => panic!("{field}: {other:?}"),
        }
    }
    let unknown = base.replace("seed = 42", "seed = 42\nsede = 1");
    match parse(&unknown) {
        Err(ScenarioError::Parse(m)) => assert!(m.contains("sede"), "{m}"),
        other => panic!("{other:?}"),
    }
    let bad_kind = base.replace("kind = \"Xn\"", "kind = \"Xx\"");
    assert!(matches!(parse(&bad_kind), Err(ScenarioError::Parse(_))));
}

#[test]
fn same_seed_same_trace() {
    for (name, text) in scenario::BUNDLED {
        let s = parse(text).unwrap();
        let x = run_scenario(&s, 1234).unwrap();
        let y = run_scenario(&s, 1234).unwrap();
        assert_eq!(x.report.csv(), y.report.csv(), "{name}");
        let render = |r: &scenario::ScenarioRun| {
            r.traces
                .iter()
                .map(|(_, t)| t.to_string())
                .collect::<Vec<_>>()
        };
        assert_eq!(render(&x), render(&y), "{name}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    /// Core > aggregation > direct for any latencies ordered like the
    /// bundled ones (Xn no slower than a RAN uplink, uplink no slower than
    /// the core link).
    #[test]
    fn band_ordering_survives_recalibration(
        uu in 1u64..2_000,
        xn in 1u64..3_000,
        up_extra in 0u64..5_000,
        core_extra in 0u64..20_000,
        proc_ran in 0u64..500,
        proc_core in 0u64..2_000,
    ) {
        let mut s = bundled("fig1_compare");
        let uplink = xn + up_extra;
        let core = uplink + core_extra;
        for l in &mut s.topology.links {
            l.latency_us = match (l.kind, l.a.max(l.b)) {
                (LinkKind::Uu, _) => uu,
                (LinkKind::Xn, _) => xn,
                (_, 30) => core,
                _ => uplink,
            };
        }
        // Leave room for slow handshakes and a loose budget.
        s.horizon_us = 4_000_000;
        for e in &mut s.sessions {
            e.max_latency_us = 1_000_000;
            e.traffic.as_mut().unwrap().start_us = 2_000_000;
        }
        s.calibration.proc_ran_us = proc_ran;
        s.calibration.proc_core_us = proc_core.max(proc_ran);
        let run = run_scenario(&s, 1).unwrap();
        let c = p50(&run, Variant::EmbbCentral, Approach::C);
        let a = p50(&run, Variant::AggUpf, Approach::C);
        let m = p50(&run, Variant::MeshUrllc, Approach::C);
        prop_assert!(c > a && a > m, "{} {} {}", c, a, m);
        prop_assert!(s.topology.nodes.iter().any(|n| n.kind == NodeKind::CoreSite));
    }
}
