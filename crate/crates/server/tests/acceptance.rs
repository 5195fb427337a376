//! Acceptance run: one PASS/FAIL line per criterion, each checked at full
//! size and within its time budget.

mod common;

use std::sync::Arc;
use std::time::{Duration, Instant};

use common::{config, drive, serve, Drive, WsClient};
use webrl_core::env::twocooks::TwoCooksParams;
use webrl_core::env::EnvParams;
use webrl_core::latency::{
    simulate, Distribution, MessageSizes, NetworkModel, ProtocolVariant, Trace, VariantKind,
};
use webrl_core::persistence::{read_log, BackoffConfig, QueueConfig, Record};
use webrl_core::rng::Rng;
use webrl_core::sim::{hashed_policy, SimClient};
use webrl_testkit::harness::{
    bfs_optimal_walks, codec_round_trips, concurrent_sessions, crash_and_recover,
    faulty_persistence, network_faults, speculation_matches_direct,
};
use webrl_testkit::{
    as_params, gridnav_experiment, random_maze, three_stage_experiment, twocooks_experiment,
};

type Outcome = Result<String, String>;

struct Run {
    failed: Vec<&'static str>,
}

impl Run {
    fn check(&mut self, name: &'static str, budget: Option<Duration>, f: impl FnOnce() -> Outcome) {
        let start = Instant::now();
        let result = f();
        let took = start.elapsed();
        let outcome = match (result, budget) {
            (Ok(detail), Some(b)) if took > b => {
                Err(format!("{detail}; took {took:.2?}, budget {b:?}"))
            }
            (r, _) => r,
        };
        let budget = budget.map(|b| format!(" / {b:?}")).unwrap_or_default();
        match outcome {
            Ok(detail) => println!("PASS  {name}: {detail} [{took:.2?}{budget}]"),
            Err(why) => {
                println!("FAIL  {name}: {why} [{took:.2?}{budget}]");
                self.failed.push(name);
            }
        }
    }
}

fn speculation() -> Outcome {
    let mut maze = random_maze(11, 8, 8, 0.2);
    maze.slip = 0.25;
    maze.max_steps = 40;
    let nav = speculation_matches_direct(&as_params(maze), 3, 1_000)?;
    let kitchen = EnvParams::TwoCooks(TwoCooksParams {
        max_steps: 120,
        ..TwoCooksParams::default()
    });
    let cook = speculation_matches_direct(&kitchen, 4, 1_000)?;
    Ok(format!("1000 GridNav steps ({nav} episodes) and 1000 TwoCooks steps ({cook} episodes) bit-identical"))
}

fn concurrency() -> Outcome {
    let exp = Arc::new(gridnav_experiment("acceptance-concurrency", 200, 25));
    let r = concurrent_sessions(exp, 64, 200)?;
    if r.interleavings < 64 {
        return Err(format!(
            "only {} interleavings between sessions",
            r.interleavings
        ));
    }
    Ok(format!(
        "{} sessions x {} steps equal their oracles, records gapless and ordered, {} interleavings",
        r.sessions, r.steps_per_session, r.interleavings
    ))
}

fn crash_recovery() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let exp = Arc::new(twocooks_experiment("acceptance-crash", 10, 50));
    let mut s = Rng::new(0xC4A5).stream();
    let mut points = Vec::new();
    for trial in 0..20u64 {
        let crash_at = s.below(500) as usize;
        let r = crash_and_recover(exp.clone(), dir.path(), trial, crash_at, trial % 2 == 1)
            .map_err(|e| format!("trial {trial} (crash at {crash_at}): {e}"))?;
        points.push(r.crash_at);
    }
    Ok(format!(
        "20 trials, crash steps {points:?}, every completed trajectory equals its oracle"
    ))
}

fn persistence_faults() -> Outcome {
    let config = QueueConfig {
        backoff: BackoffConfig {
            base_ms: 0.5,
            jitter: 0.5,
            max_delay_ms: 2_000.0,
            max_attempts: 16,
        },
        seed: 0x5A7E,
        ..QueueConfig::default()
    };
    let r = faulty_persistence(10_000, 16, 0.3, config)?;
    Ok(format!(
        "{} records, {} failed attempts, {} written, {} dead-lettered, no loss or duplicate, {} delays within backoff bounds",
        r.records, r.failed_attempts, r.written, r.dead_lettered, r.delays_checked
    ))
}

fn network() -> Outcome {
    let exp = Arc::new(twocooks_experiment("acceptance-network", 10, 50));
    let r = network_faults(exp, 31, 50, 0.05, 0.05, 0.1)?;
    if r.steps != 500 || r.disconnects != 50 {
        return Err(format!(
            "ran {} steps with {} disconnects",
            r.steps, r.disconnects
        ));
    }
    if r.dropped == 0 || r.duplicated == 0 || r.reordered == 0 {
        return Err(format!("a fault kind never fired: {r:?}"));
    }
    Ok(format!(
        "{} steps exactly once with {} dropped, {} duplicated, {} reordered, {} disconnects; trajectory equals oracle",
        r.steps, r.dropped, r.duplicated, r.reordered, r.disconnects
    ))
}

fn mean(t: &Trace) -> f64 {
    t.steps.iter().map(|s| s.perceived_ms).sum::<f64>() / t.steps.len() as f64
}

fn latency() -> Outcome {
    let sizes = MessageSizes::gridnav_default();
    let variant = |kind, think| ProtocolVariant {
        kind,
        action_count: 5,
        compute_ms: 5.0,
        think,
    };
    let fixed = NetworkModel::fixed(100.0);
    let think = Distribution::Fixed { ms: 400.0 };
    let naive = mean(
        &simulate(
            &variant(VariantKind::Naive, think.clone()),
            &fixed,
            &sizes,
            10_000,
            1,
        )
        .map_err(|e| e.to_string())?,
    );
    if (naive - 105.0).abs() / 105.0 > 0.01 {
        return Err(format!("naive mean {naive} ms, expected 105 ±1%"));
    }
    let spec = mean(
        &simulate(
            &variant(VariantKind::Speculative, think),
            &fixed,
            &sizes,
            10_000,
            1,
        )
        .map_err(|e| e.to_string())?,
    );
    if spec >= 1.0 {
        return Err(format!("speculative mean {spec} ms"));
    }
    let lognormal = NetworkModel {
        rtt: Distribution::Lognormal {
            mu: 4.0,
            sigma: 0.5,
        },
        ..NetworkModel::fixed(0.0)
    };
    let closed = 5.0 + (4.0f64 + 0.5 * 0.5 * 0.5).exp();
    let t = simulate(
        &variant(
            VariantKind::Naive,
            Distribution::Exponential { mean: 500.0 },
        ),
        &lognormal,
        &sizes,
        10_000,
        42,
    )
    .map_err(|e| e.to_string())?;
    let m = mean(&t);
    let err = (m - closed).abs() / closed;
    if err > 0.02 {
        return Err(format!(
            "lognormal naive mean {m:.3} ms vs closed form {closed:.3} ms"
        ));
    }
    Ok(format!(
        "naive {naive:.3} ms, speculative {spec:.4} ms, lognormal naive {m:.3} ms vs {closed:.3} ms ({:.2}%)",
        err * 100.0
    ))
}

async fn response_times() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = config(dir.path());
    let server = serve(&cfg, three_stage_experiment("acceptance-timing")).await;
    let mut sessions = Vec::new();
    for (salt, (d, actions)) in [(50u64, 8usize), (200, 6), (1_000, 4)]
        .into_iter()
        .enumerate()
    {
        let mut client = SimClient::new(hashed_policy(salt as u64));
        let mut ws = WsClient::connect(server.addr).await;
        ws.send(&client.hello()).await;
        let opts = Drive {
            think: Some(Duration::from_millis(d)),
            stop_after: Some(actions),
            ..Drive::default()
        };
        let run = drive(&mut ws, &mut client, &opts).await;
        if run.actions < actions {
            return Err(format!("d = {d}: only {} actions sent", run.actions));
        }
        // Let the last action reach the queue before closing.
        tokio::time::sleep(Duration::from_millis(50)).await;
        ws.close().await;
        sessions.push((d, client.session.ok_or("no session")?, actions));
    }
    server.shutdown().await.map_err(|e| e.to_string())?;
    let records = read_log(cfg.log_path()).map_err(|e| e.to_string())?.records;
    let mut worst = Vec::new();
    for (d, id, actions) in sessions {
        let rts: Vec<f64> = records
            .iter()
            .filter_map(|r| match r {
                Record::Step(s) if s.session == id => Some(s.t2 - s.t1),
                _ => None,
            })
            .collect();
        if rts.len() != actions {
            return Err(format!(
                "d = {d}: {} step records, expected {actions}",
                rts.len()
            ));
        }
        let dev = rts
            .iter()
            .map(|rt| (rt - d as f64).abs())
            .fold(0.0, f64::max);
        if dev > 5.0 {
            return Err(format!("d = {d}: recorded {rts:?}"));
        }
        worst.push(format!("d={d}: max |t2-t1-d| {dev:.2} ms"));
    }
    Ok(worst.join(", "))
}

fn env_oracles() -> Outcome {
    let walked = bfs_optimal_walks(100)?;
    let states = codec_round_trips(10_000, 2024)?;
    Ok(format!(
        "100 mazes follow BFS ({walked} steps), {states} states round-trip bit-exactly"
    ))
}

#[test]
fn acceptance() {
    let secs = |s| Some(Duration::from_secs(s));
    let mut run = Run { failed: Vec::new() };
    run.check("speculative soundness", secs(5), speculation);
    run.check("concurrency", secs(60), concurrency);
    run.check("crash recovery", secs(120), crash_recovery);
    run.check("fault-injected persistence", secs(60), persistence_faults);
    run.check("network faults", secs(60), network);
    run.check("latency model", secs(10), latency);
    let rt = tokio::runtime::Runtime::new().unwrap();
    run.check("response-time fidelity", None, || {
        rt.block_on(response_times())
    });
    run.check("environment oracles", None, env_oracles);
    assert!(run.failed.is_empty(), "failed: {:?}", run.failed);
}
