use proptest::prelude::*;

use webrl_core::latency::{
    crossover, report, simulate, trace_ndjson, Distribution, MessageSizes, NetworkModel,
    ProtocolVariant, Trace, VariantKind,
};

fn variant(kind: VariantKind, actions: u32, compute: f64, think: Distribution) -> ProtocolVariant {
    ProtocolVariant {
        kind,
        action_count: actions,
        compute_ms: compute,
        think,
    }
}

fn mean(t: &Trace) -> f64 {
    t.steps.iter().map(|s| s.perceived_ms).sum::<f64>() / t.steps.len() as f64
}

fn sizes() -> MessageSizes {
    MessageSizes::gridnav_default()
}

#[test]
fn naive_fixed_rtt_is_rtt_plus_compute() {
    let v = variant(
        VariantKind::Naive,
        5,
        5.0,
        Distribution::Fixed { ms: 400.0 },
    );
    let t = simulate(&v, &NetworkModel::fixed(100.0), &sizes(), 2_000, 1).unwrap();
    assert_eq!(t.steps.len(), 2_000);
    assert!((mean(&t) - 105.0).abs() / 105.0 < 0.01);
}

#[test]
fn speculative_render_is_local_when_the_frame_is_cached() {
    let v = variant(
        VariantKind::Speculative,
        5,
        5.0,
        Distribution::Fixed { ms: 400.0 },
    );
    let t = simulate(&v, &NetworkModel::fixed(100.0), &sizes(), 2_000, 1).unwrap();
    assert!(mean(&t) < 1.0);
    assert!(t.steps.iter().all(|s| !s.waited));
}

#[test]
fn lognormal_naive_mean_matches_closed_form() {
    let rtt = Distribution::Lognormal {
        mu: 4.0,
        sigma: 0.5,
    };
    let expected = 5.0 + (4.0f64 + 0.125).exp();
    let net = NetworkModel {
        rtt,
        ..NetworkModel::fixed(0.0)
    };
    let v = variant(
        VariantKind::Naive,
        5,
        5.0,
        Distribution::Exponential { mean: 500.0 },
    );
    let t = simulate(&v, &net, &sizes(), 10_000, 42).unwrap();
    let m = mean(&t);
    assert!(
        (m - expected).abs() / expected < 0.02,
        "mean {m}, expected {expected}"
    );
}

#[test]
fn serialization_and_loss_add_to_the_naive_path() {
    let base = variant(
        VariantKind::Naive,
        5,
        5.0,
        Distribution::Fixed { ms: 300.0 },
    );
    let s = sizes();
    let mut net = NetworkModel::fixed(100.0);
    net.serialization_ms_per_kb = 2.0;
    let t = simulate(&base, &net, &s, 100, 3).unwrap();
    let expected = 105.0 + 2.0 * (s.action + s.naive_reply()) as f64 / 1024.0;
    assert!((mean(&t) - expected).abs() < 1e-9);

    net.serialization_ms_per_kb = 0.0;
    net.loss = 0.2;
    net.retransmit_ms = 250.0;
    let t = simulate(&base, &net, &s, 5_000, 3).unwrap();
    // Each direction needs a geometric number of tries: mean extra 250·p/(1−p) per message.
    let expected = 105.0 + 2.0 * 250.0 * 0.2 / 0.8;
    assert!(
        (mean(&t) - expected).abs() / expected < 0.05,
        "{}",
        mean(&t)
    );
    assert!(t.transmissions > 2 * 5_000);
}

#[test]
fn bandwidth_grows_by_one_successor_per_action() {
    let s = sizes();
    for a in 1..12 {
        let per_step = s.frame(a) - s.frame_base;
        // JSON separators add one byte between entries.
        assert_eq!(per_step, a as u64 * s.successor + (a as u64 - 1));
    }
    let c = crossover(&s, s.frame(6), 20);
    assert_eq!(c.action_count, Some(7));
    assert_eq!(c.series.len(), 20);
}

#[test]
fn report_figures_recompute_from_the_raw_trace() {
    let s = sizes();
    let traces: Vec<Trace> = [VariantKind::Speculative, VariantKind::Naive]
        .into_iter()
        .map(|k| {
            let v = variant(
                k,
                5,
                5.0,
                Distribution::Uniform {
                    lo: 50.0,
                    hi: 400.0,
                },
            );
            let net = NetworkModel {
                rtt: Distribution::Uniform {
                    lo: 40.0,
                    hi: 200.0,
                },
                ..NetworkModel::fixed(0.0)
            };
            simulate(&v, &net, &s, 997, 8).unwrap()
        })
        .collect();
    let r = report(&traces, &s, 4_096);
    assert_eq!(r.rows.len(), 2);
    let csv = r.to_csv();
    assert_eq!(csv.lines().count(), 3);
    for (trace, line) in traces.iter().zip(csv.lines().skip(1)) {
        // Independent recomputation from the NDJSON series.
        let mut lat: Vec<f64> = trace_ndjson(trace)
            .lines()
            .map(|l| {
                serde_json::from_str::<serde_json::Value>(l).unwrap()["perceived_ms"]
                    .as_f64()
                    .unwrap()
            })
            .collect();
        let n = lat.len();
        let mean: f64 = lat.iter().sum::<f64>() / n as f64;
        lat.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median = lat[n.div_ceil(2) - 1];
        let p95 = lat[(95 * n).div_ceil(100) - 1];
        let cols: Vec<&str> = line.split(',').collect();
        assert_eq!(cols[2].parse::<usize>().unwrap(), n);
        assert_eq!(cols[3].parse::<f64>().unwrap(), mean);
        assert_eq!(cols[4].parse::<f64>().unwrap(), median);
        assert_eq!(cols[5].parse::<f64>().unwrap(), p95);
    }
    assert!(r.to_table().contains("speculative"));
}

fn rtt_strategy() -> impl Strategy<Value = Distribution> {
    prop_oneof![
        (1.0..400.0f64).prop_map(|ms| Distribution::Fixed { ms }),
        (1.0..100.0f64, 0.0..300.0f64).prop_map(|(lo, w)| Distribution::Uniform { lo, hi: lo + w }),
        (1.0..5.5f64, 0.0..1.0f64).prop_map(|(mu, sigma)| Distribution::Lognormal { mu, sigma }),
    ]
}

fn think_strategy() -> impl Strategy<Value = Distribution> {
    prop_oneof![
        (0.0..1_000.0f64).prop_map(|ms| Distribution::Fixed { ms }),
        (1.0..800.0f64).prop_map(|mean| Distribution::Exponential { mean }),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn speculative_beats_naive_whenever_rtt_is_positive(
        rtt in rtt_strategy(),
        think in think_strategy(),
        actions in 1u32..12,
        compute in 0.0..20.0f64,
        loss in 0.0..0.3f64,
        seed in any::<u64>(),
    ) {
        let net = NetworkModel { rtt, serialization_ms_per_kb: 0.1, loss, retransmit_ms: 150.0 };
        let s = sizes();
        let spec = simulate(&variant(VariantKind::Speculative, actions, compute, think.clone()), &net, &s, 300, seed).unwrap();
        let naive = simulate(&variant(VariantKind::Naive, actions, compute, think), &net, &s, 300, seed).unwrap();
        prop_assert!(mean(&spec) < mean(&naive));
    }

    #[test]
    fn simulation_is_deterministic_and_conserves_bytes(
        rtt in rtt_strategy(),
        think in think_strategy(),
        actions in 1u32..12,
        loss in 0.0..0.5f64,
        seed in any::<u64>(),
        kind in prop_oneof![Just(VariantKind::Speculative), Just(VariantKind::Naive)],
    ) {
        let net = NetworkModel { rtt, serialization_ms_per_kb: 0.5, loss, retransmit_ms: 100.0 };
        let v = variant(kind, actions, 2.0, think);
        let a = simulate(&v, &net, &sizes(), 200, seed).unwrap();
        let b = simulate(&v, &net, &sizes(), 200, seed).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert_eq!(a.steps.len(), 200);
        prop_assert_eq!(a.bytes_by_message.values().sum::<u64>(), a.total_bytes);
        for s in &a.steps {
            prop_assert!(s.perceived_ms >= 0.0);
            prop_assert!(s.render_ms >= s.keypress_ms);
        }
        prop_assert!(a.steps.windows(2).all(|w| w[1].keypress_ms >= w[0].render_ms));
    }
}

#[test]
fn invalid_models_are_rejected() {
    let v = variant(VariantKind::Naive, 0, 1.0, Distribution::Fixed { ms: 1.0 });
    assert!(simulate(&v, &NetworkModel::fixed(10.0), &sizes(), 10, 0).is_err());
    let v = variant(VariantKind::Naive, 2, 1.0, Distribution::Fixed { ms: 1.0 });
    let mut net = NetworkModel::fixed(10.0);
    net.loss = 1.0;
    assert!(simulate(&v, &net, &sizes(), 10, 0).is_err());
    assert!(simulate(&v, &NetworkModel::fixed(10.0), &sizes(), 0, 0).is_err());
}
