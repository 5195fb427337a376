//! End-to-end scenarios shared by the integration tests and the acceptance
//! target. Each returns `Err` with a human-readable reason on the first
//! divergence.

use std::collections::{BTreeMap, BTreeSet, HashSet, VecDeque};
use std::path::Path;
use std::sync::{Arc, Barrier};
use std::time::Duration;

use webrl_core::env::gridnav::{GridWorld, StartSpec};
use webrl_core::env::twocooks::{Cook, Held, Kitchen, Pot, TwoCooksParams};
use webrl_core::env::{
    self, decode_state, encode_state, ActionId, EnvParams, EnvState, Observation, World,
};
use webrl_core::hub::{Hub, HubOptions, RecordQueue};
use webrl_core::persistence::{
    backoff_bounds, FaultPlan, FaultySink, LogFile, MemorySink, QueueConfig, Record, SaveQueue,
    SessionId, StepRecord,
};
use webrl_core::protocol::ClientMessage;
use webrl_core::rng::{Rng, RngStream};
use webrl_core::sim::{hashed_policy, LocalLink, SimClient};
use webrl_core::speculation::{commit_action, open_frame, ActionEvent};
use webrl_core::stage::Experiment;

use crate::{bfs_distance, logged_steps, oracle_trajectory, random_maze, Step};

fn policy_fn(salt: u64) -> impl FnMut(u64, &Observation) -> ActionId {
    let mut p = hashed_policy(salt);
    move |f, o| p(f, o)
}

/// Steps `params` through `open_frame`/`commit_action` and, separately,
/// through plain `env::step` with explicitly split rngs, comparing state,
/// observation, reward and done after every step. Returns the number of
/// episodes played.
pub fn speculation_matches_direct(
    params: &EnvParams,
    seed: u64,
    steps: usize,
) -> Result<u32, String> {
    let mut policy = policy_fn(seed ^ 0x5EC);
    let root = Rng::new(seed);
    let mut episode = 0u32;
    let (mut spec_state, mut spec_obs) =
        env::reset(params, &root.split(episode as u64)).map_err(|e| e.to_string())?;
    let (mut direct_state, _) =
        env::reset(params, &root.split(episode as u64)).map_err(|e| e.to_string())?;
    let mut local_step = 0u64;
    for i in 0..steps as u64 {
        let frame = open_frame(i, params, &spec_state, 0.0).map_err(|e| e.to_string())?;
        let action = policy(i, &spec_obs);
        let (next, result) = commit_action(
            &frame,
            &ActionEvent {
                frame_id: i,
                action,
                t1: 0.0,
                t2: 1.0,
            },
        )
        .map_err(|e| e.to_string())?;

        let step_rng = root.split(episode as u64).split(local_step);
        let direct =
            env::step(&direct_state, action, params, &step_rng).map_err(|e| e.to_string())?;
        if next != direct.state
            || result.observation != direct.observation
            || result.reward.to_bits() != direct.reward.to_bits()
            || result.done != direct.done
        {
            return Err(format!("step {i} (episode {episode}, local step {local_step}): speculative and direct results differ"));
        }
        local_step += 1;
        if direct.done {
            episode += 1;
            local_step = 0;
            let rng = root.split(episode as u64);
            let (s, o) = env::reset(params, &rng).map_err(|e| e.to_string())?;
            direct_state = env::reset(params, &rng).map_err(|e| e.to_string())?.0;
            spec_state = s;
            spec_obs = o;
        } else {
            spec_state = next;
            spec_obs = result.observation;
            direct_state = direct.state;
        }
    }
    Ok(episode)
}

fn memory_queue(config: QueueConfig) -> (Arc<SaveQueue>, MemorySink) {
    let mem = MemorySink::new();
    let q = SaveQueue::start(config, Box::new(mem.clone()), Box::new(MemorySink::new()))
        .expect("queue starts");
    (Arc::new(q), mem)
}

/// Checks that a session's step records are exactly frames `0..n` in order
/// and equal the oracle.
fn check_session(records: &[Record], session: SessionId, oracle: &[Step]) -> Result<(), String> {
    let steps = logged_steps(records, session);
    for (i, s) in steps.iter().enumerate() {
        if s.frame_id != i as u64 {
            return Err(format!(
                "session {session}: record {i} has frame id {}",
                s.frame_id
            ));
        }
    }
    if steps.len() != oracle.len() {
        return Err(format!(
            "session {session}: {} steps logged, oracle has {}",
            steps.len(),
            oracle.len()
        ));
    }
    if let Some(i) = (0..steps.len()).find(|&i| steps[i] != oracle[i]) {
        return Err(format!(
            "session {session}: step {i} differs from the oracle"
        ));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConcurrencyReport {
    pub sessions: usize,
    pub steps_per_session: usize,
    /// Adjacent step records in the log that belong to different sessions.
    pub interleavings: usize,
}

/// Runs `sessions` clients on their own threads against one hub, each
/// sending `steps` actions, then compares every logged trajectory with its
/// single-session oracle.
pub fn concurrent_sessions(
    exp: Arc<Experiment>,
    sessions: usize,
    steps: usize,
) -> Result<ConcurrencyReport, String> {
    let (queue, mem) = memory_queue(QueueConfig::default());
    let hub = Hub::new(
        exp.clone(),
        queue.clone() as Arc<dyn RecordQueue>,
        HubOptions::default(),
    );
    let barrier = Barrier::new(sessions);
    let ids: Vec<(SessionId, u64)> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..sessions as u64)
            .map(|salt| {
                let (hub, barrier) = (&hub, &barrier);
                scope.spawn(move || {
                    let mut client = SimClient::new(hashed_policy(salt));
                    let (mut link, first) = LocalLink::connect(hub, &mut client);
                    barrier.wait();
                    let mut queue = first;
                    for _ in 0..steps {
                        let Some(msg) = queue.pop_front() else { break };
                        queue.extend(link.send(&mut client, &msg));
                        // Give other sessions a chance between every command.
                        std::thread::yield_now();
                    }
                    (client.session.expect("session issued"), salt)
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("client thread"))
            .collect()
    });
    if !queue.flush(Duration::from_secs(30)) {
        return Err("save queue did not drain".into());
    }
    let records = mem.records();
    for (id, salt) in &ids {
        let state = hub.state(*id).ok_or("session missing")?;
        let oracle = oracle_trajectory(
            &exp,
            state.seed,
            state.condition,
            &mut policy_fn(*salt),
            steps,
        );
        check_session(&records, *id, &oracle)?;
    }
    let step_sessions: Vec<SessionId> = records
        .iter()
        .filter(|r| matches!(r, Record::Step(_)))
        .map(|r| r.session())
        .collect();
    let interleavings = step_sessions.windows(2).filter(|w| w[0] != w[1]).count();
    Ok(ConcurrencyReport {
        sessions,
        steps_per_session: steps,
        interleavings,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrashReport {
    /// Steps the client had sent when the server died.
    pub crash_at: usize,
    /// Committed steps that survived in the log.
    pub recovered_steps: usize,
    pub torn_tail: bool,
}

/// Runs one client against a log-backed hub, kills the server after
/// `crash_at` actions (queue aborted, optionally a torn frame appended),
/// restores a fresh hub from the log, reconnects and finishes. The final log
/// must hold exactly the oracle trajectory.
pub fn crash_and_recover(
    exp: Arc<Experiment>,
    dir: &Path,
    salt: u64,
    crash_at: usize,
    torn_tail: bool,
) -> Result<CrashReport, String> {
    let path = dir.join(format!("crash-{salt}.log"));
    let dead = dir.join(format!("crash-{salt}.dead"));
    let open = |p: &Path| LogFile::open(p, false).map_err(|e| e.to_string());
    let (log, _) = open(&path)?;
    let (dl, _) = open(&dead)?;
    let queue = Arc::new(SaveQueue::start(
        QueueConfig::default(),
        Box::new(log),
        Box::new(dl),
    )?);
    let hub = Hub::new(
        exp.clone(),
        queue.clone() as Arc<dyn RecordQueue>,
        HubOptions::default(),
    );
    let mut client = SimClient::new(hashed_policy(salt));
    let (mut link, mut first) = LocalLink::connect(&hub, &mut client);
    link.pump(&mut client, &mut first, crash_at);
    let session = client.session.ok_or("no session")?;
    drop(link);
    drop(hub);
    let queue = Arc::try_unwrap(queue).map_err(|_| "queue still shared")?;
    queue.abort();
    if torn_tail {
        use std::io::Write;
        let mut f = std::fs::OpenOptions::new()
            .append(true)
            .open(&path)
            .map_err(|e| e.to_string())?;
        // A frame header promising more bytes than follow.
        f.write_all(&[200, 0, 0, 0, 1, 2, 3, 4, 1, 9, 9])
            .map_err(|e| e.to_string())?;
    }

    let (log, scan) = open(&path)?;
    if torn_tail && scan.corruption.is_none() {
        return Err("torn tail not detected".into());
    }
    let recovered_steps = logged_steps(&scan.records, session).len();
    let (dl, _) = open(&dead)?;
    let queue = Arc::new(SaveQueue::start(
        QueueConfig::default(),
        Box::new(log),
        Box::new(dl),
    )?);
    let (hub, report) = Hub::restore(
        exp.clone(),
        queue.clone() as Arc<dyn RecordQueue>,
        HubOptions::default(),
        &scan.records,
    );
    if !report.failed.is_empty() || !report.truncated.is_empty() {
        return Err(format!("restore problems: {report:?}"));
    }
    if hub.state(session).is_none() {
        // The crash came before the session start was saved; begin afresh.
        client = SimClient::new(hashed_policy(salt));
    }
    let (mut link, mut first) = LocalLink::connect(&hub, &mut client);
    link.pump(&mut client, &mut first, usize::MAX);
    if !client.complete {
        return Err(format!(
            "client did not finish after recovery: {:?}",
            client.errors
        ));
    }
    let session = client.session.ok_or("no session")?;
    let seed = hub.state(session).ok_or("session missing")?.seed;
    if !queue.flush(Duration::from_secs(30)) {
        return Err("save queue did not drain".into());
    }
    drop(link);
    drop(hub);
    Arc::try_unwrap(queue)
        .map_err(|_| "queue still shared")?
        .shutdown();
    let records = LogFile::open(&path, false)
        .map_err(|e| e.to_string())?
        .1
        .records;
    let oracle = oracle_trajectory(&exp, seed, None, &mut policy_fn(salt), usize::MAX);
    check_session(&records, session, &oracle)?;
    Ok(CrashReport {
        crash_at,
        recovered_steps,
        torn_tail,
    })
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct NetworkFaultReport {
    pub steps: usize,
    pub delivered: usize,
    pub dropped: usize,
    pub duplicated: usize,
    pub reordered: usize,
    pub disconnects: usize,
    pub retries: usize,
    pub resyncs: u64,
}

/// Drives one client through a link that drops, duplicates and reorders
/// client messages, and tears down the connection at `disconnects` random
/// points. Exactly-once stepping means the log holds each frame id once, in
/// order, matching the oracle.
pub fn network_faults(
    exp: Arc<Experiment>,
    seed: u64,
    disconnects: usize,
    p_drop: f64,
    p_dup: f64,
    p_reorder: f64,
) -> Result<NetworkFaultReport, String> {
    let (queue, mem) = memory_queue(QueueConfig::default());
    let hub = Hub::new(
        exp.clone(),
        queue.clone() as Arc<dyn RecordQueue>,
        HubOptions::default(),
    );
    let salt = seed;
    let mut s = Rng::new(seed).split(0x4E7).stream();
    let mut client = SimClient::new(hashed_policy(salt));
    let (mut link, first) = LocalLink::connect(&hub, &mut client);
    let session = client.session.ok_or("no session")?;
    let seed_of_session = hub.state(session).ok_or("session missing")?.seed;
    let oracle = oracle_trajectory(
        &exp,
        seed_of_session,
        None,
        &mut policy_fn(salt),
        usize::MAX,
    );
    let total = oracle.len();
    if total < disconnects {
        return Err("fewer steps than disconnects".into());
    }
    let mut cut_points: BTreeSet<u64> = BTreeSet::new();
    while cut_points.len() < disconnects {
        cut_points.insert(s.below(total as u64));
    }
    let mut cuts: VecDeque<u64> = cut_points.into_iter().collect();

    let mut report = NetworkFaultReport::default();
    let mut wire: VecDeque<ClientMessage> = first;
    let mut iterations = 0usize;
    while !client.complete {
        iterations += 1;
        if iterations > 200 * total + 10_000 {
            return Err(format!(
                "no progress after {iterations} deliveries: {report:?}"
            ));
        }
        let committed = hub.frame_id(session).unwrap_or(total as u64);
        if cuts.front().is_some_and(|&c| committed >= c) {
            cuts.pop_front();
            report.disconnects += 1;
            link.close();
            let (l, first) = LocalLink::connect(&hub, &mut client);
            link = l;
            wire = first;
            continue;
        }
        let Some(msg) = pick(&mut wire, &mut s, p_reorder, &mut report) else {
            // Nothing in flight: the client's reply timer fires.
            report.retries += 1;
            wire.push_back(client.retry());
            continue;
        };
        if s.bernoulli(p_drop) {
            report.dropped += 1;
            continue;
        }
        if s.bernoulli(p_dup) {
            report.duplicated += 1;
            let at = s.below(wire.len() as u64 + 1) as usize;
            wire.insert(at, msg.clone());
        }
        report.delivered += 1;
        wire.extend(link.send(&mut client, &msg));
    }
    link.close();
    if !cuts.is_empty() {
        return Err(format!("{} disconnects were never reached", cuts.len()));
    }
    if !queue.flush(Duration::from_secs(30)) {
        return Err("save queue did not drain".into());
    }
    check_session(&mem.records(), session, &oracle)?;
    report.steps = total;
    report.resyncs = client.resyncs;
    Ok(report)
}

fn pick(
    wire: &mut VecDeque<ClientMessage>,
    s: &mut webrl_core::rng::RngStream,
    p_reorder: f64,
    report: &mut NetworkFaultReport,
) -> Option<ClientMessage> {
    if wire.len() > 1 && s.bernoulli(p_reorder) {
        report.reordered += 1;
        let i = 1 + s.below(wire.len() as u64 - 1) as usize;
        return wire.remove(i);
    }
    wire.pop_front()
}

#[derive(Debug, Clone, PartialEq)]
pub struct PersistenceFaultReport {
    pub records: usize,
    pub written: usize,
    pub dead_lettered: usize,
    pub failed_attempts: u64,
    pub delays_checked: usize,
}

/// Saves `records` step records spread over `sessions` sessions through a
/// sink that fails with probability `p`. Every record must land in the log
/// or the dead-letter sink exactly once, each session's log order must be
/// its enqueue order, and every retry delay must sit inside its jitter
/// envelope.
pub fn faulty_persistence(
    records: usize,
    sessions: usize,
    p: f64,
    config: QueueConfig,
) -> Result<PersistenceFaultReport, String> {
    let mem = MemorySink::new();
    let dead = MemorySink::new();
    let sink = FaultySink::new(
        mem.clone(),
        FaultPlan::Random {
            p,
            seed: config.seed ^ 0xFA17,
        },
    );
    let backoff = config.backoff.clone();
    let queue = SaveQueue::start(config, Box::new(sink), Box::new(dead.clone()))?;
    let ids: Vec<SessionId> = (0..sessions as u128)
        .map(|i| SessionId(0x00C0_FFEE_0000 + i))
        .collect();
    let mut next_frame = vec![0u64; sessions];
    for i in 0..records {
        let k = i % sessions;
        let frame_id = next_frame[k];
        next_frame[k] += 1;
        let rec = Record::Step(StepRecord {
            session: ids[k],
            stage_index: 0,
            stage_id: "s".into(),
            episode: 0,
            step: frame_id as u32,
            frame_id,
            pre_state: vec![k as u8, (frame_id & 0xFF) as u8],
            action: (i % 5) as u8,
            reward: 0.0,
            done: false,
            t1: i as f64,
            t2: i as f64 + 1.0,
            server_ms: i as f64,
            flags: 0,
        });
        queue.enqueue(rec).map_err(|e| e.to_string())?;
    }
    if !queue.flush(Duration::from_secs(120)) {
        return Err("save queue did not drain".into());
    }
    let stats = queue.shutdown();
    let written = mem.records();
    let dead = dead.records();

    let key = |r: &Record| match r {
        Record::Step(s) => (s.session, s.frame_id),
        _ => unreachable!(),
    };
    let mut seen = HashSet::new();
    for r in written.iter().chain(dead.iter()) {
        if !seen.insert(key(r)) {
            return Err(format!("record {:?} stored twice", key(r)));
        }
    }
    if seen.len() != records {
        return Err(format!("{} of {records} records accounted for", seen.len()));
    }
    let mut last: BTreeMap<SessionId, u64> = BTreeMap::new();
    for r in &written {
        let (s, f) = key(r);
        if let Some(prev) = last.insert(s, f) {
            if f <= prev {
                return Err(format!("session {s}: frame {f} written after {prev}"));
            }
        }
    }
    for d in &stats.delays {
        let (lo, hi) = backoff_bounds(d.attempt, backoff.base_ms, backoff.jitter);
        let hi = hi.min(backoff.max_delay_ms);
        let lo = lo.min(backoff.max_delay_ms);
        if d.delay_ms < lo || d.delay_ms > hi {
            return Err(format!(
                "delay {} ms for attempt {} outside [{lo}, {hi}]",
                d.delay_ms, d.attempt
            ));
        }
    }
    Ok(PersistenceFaultReport {
        records,
        written: written.len(),
        dead_lettered: dead.len(),
        failed_attempts: stats.failed_attempts,
        delays_checked: stats.delays.len(),
    })
}

const MOVES: [(i32, i32); 4] = [(-1, 0), (1, 0), (0, -1), (0, 1)];

fn agent(s: &EnvState) -> Result<(u16, u16), String> {
    match &s.world {
        World::GridNav(g) => Ok(g.agent),
        other => Err(format!("expected a grid state, got {other:?}")),
    }
}

/// Walks the BFS gradient on `mazes` random mazes: every step must move to a
/// neighbour one closer to the goal, and the episode must end exactly on
/// arrival with the goal reward. Returns the total number of steps walked.
pub fn bfs_optimal_walks(mazes: u64) -> Result<u64, String> {
    let mut walked = 0u64;
    for seed in 0..mazes {
        let maze = random_maze(seed, 4 + (seed % 6) as u16, 4 + (seed % 5) as u16, 0.3);
        let StartSpec::Fixed(start) = maze.start else {
            return Err(format!("maze {seed}: start is not fixed"));
        };
        let shortest =
            bfs_distance(&maze, start).ok_or(format!("maze {seed}: goal unreachable"))?;
        let params = EnvParams::GridNav(maze.clone());
        let (mut state, _) = env::reset(&params, &Rng::new(seed)).map_err(|e| e.to_string())?;
        if agent(&state)? != start {
            return Err(format!(
                "maze {seed}: reset did not place the agent at {start:?}"
            ));
        }
        let mut total = 0.0;
        for k in 0..shortest {
            let here = agent(&state)?;
            let d =
                bfs_distance(&maze, here).ok_or(format!("maze {seed}: stranded at {here:?}"))?;
            if d != shortest - k {
                return Err(format!(
                    "maze {seed} step {k}: {d} from goal, expected {}",
                    shortest - k
                ));
            }
            let action = (0..4u8)
                .find(|&a| {
                    let (dr, dc) = MOVES[a as usize];
                    let (r, c) = (here.0 as i32 + dr, here.1 as i32 + dc);
                    r >= 0
                        && c >= 0
                        && maze.in_bounds((r as u16, c as u16))
                        && !maze.is_wall((r as u16, c as u16))
                        && bfs_distance(&maze, (r as u16, c as u16)) == Some(d - 1)
                })
                .ok_or(format!("maze {seed}: no downhill move from {here:?}"))?;
            let r = env::step(&state, ActionId(action), &params, &env::step_rng(&state))
                .map_err(|e| e.to_string())?;
            total += r.reward;
            if r.done != (k + 1 == shortest) {
                return Err(format!("maze {seed} step {k}: done = {}", r.done));
            }
            state = r.state;
            walked += 1;
        }
        if agent(&state)? != maze.goal || total != maze.goal_reward {
            return Err(format!(
                "maze {seed}: ended at {:?} with return {total}",
                agent(&state)?
            ));
        }
    }
    Ok(walked)
}

fn random_rng(s: &mut RngStream) -> Rng {
    let mut r = Rng::new(s.next_u64());
    for _ in 0..s.below(4) {
        r = r.split(s.next_u64());
    }
    r
}

/// A state with arbitrary field values, not necessarily reachable.
pub fn random_state(s: &mut RngStream) -> EnvState {
    let world = if s.bernoulli(0.5) {
        World::GridNav(GridWorld {
            agent: (s.next_u64() as u16, s.next_u64() as u16),
        })
    } else {
        let cook = |s: &mut RngStream| Cook {
            pos: (s.below(40) as u16, s.below(40) as u16),
            facing: s.below(4) as u8,
            held: [Held::Nothing, Held::Onion, Held::Soup][s.below(3) as usize],
        };
        World::TwoCooks(Kitchen {
            human: cook(s),
            partner: cook(s),
            pots: (0..s.below(5))
                .map(|_| Pot {
                    onions: s.next_u64() as u8,
                    timer: s.next_u64() as u16,
                    ready: s.bernoulli(0.5),
                })
                .collect(),
            delivered: s.next_u64() as u32,
        })
    };
    EnvState {
        world,
        rng: random_rng(s),
        step: s.next_u64() as u32,
        done: s.bernoulli(0.3),
    }
}

/// Encodes and decodes `count` states: reachable ones from rollouts of both
/// environments, then arbitrary ones. Each must decode to an equal state and
/// re-encode to the same bytes.
pub fn codec_round_trips(count: usize, seed: u64) -> Result<usize, String> {
    let mut s = Rng::new(seed).stream();
    let mut states = Vec::new();
    for m in 0..50 {
        let params = EnvParams::GridNav(random_maze(m, 8, 8, 0.25));
        let (mut st, _) = env::reset(&params, &Rng::new(m).split(1)).map_err(|e| e.to_string())?;
        for _ in 0..60 {
            states.push(st.clone());
            if st.done {
                break;
            }
            st = env::step(
                &st,
                ActionId(s.below(5) as u8),
                &params,
                &env::step_rng(&st),
            )
            .map_err(|e| e.to_string())?
            .state;
        }
    }
    let kitchen = EnvParams::TwoCooks(TwoCooksParams::default());
    let (mut st, _) = env::reset(&kitchen, &Rng::new(seed)).map_err(|e| e.to_string())?;
    for _ in 0..199 {
        states.push(st.clone());
        st = env::step(
            &st,
            ActionId(s.below(6) as u8),
            &kitchen,
            &env::step_rng(&st),
        )
        .map_err(|e| e.to_string())?
        .state;
    }
    states.truncate(count);
    while states.len() < count {
        states.push(random_state(&mut s));
    }
    for (i, st) in states.iter().enumerate() {
        let bytes = encode_state(st);
        let back = decode_state(&bytes).map_err(|e| format!("state {i}: {e}"))?;
        if &back != st {
            return Err(format!("state {i}: decoded {back:?}, expected {st:?}"));
        }
        if encode_state(&back) != bytes {
            return Err(format!("state {i}: re-encoding differs"));
        }
    }
    Ok(states.len())
}
