use std::sync::Arc;
use std::time::Duration;

use webrl_core::hub::{Hub, HubOptions, RecordQueue};
use webrl_core::persistence::{
    export_log, replay_session, restore_session, session_records, Dataset, LogFile, MemorySink,
    QueueConfig, Record, SaveQueue, SessionId, SNAPSHOT_EVERY,
};
use webrl_core::sim::{hashed_policy, LocalLink, SimClient};
use webrl_core::stage::Experiment;
use webrl_testkit::three_stage_experiment;

/// Plays the three-stage experiment to completion, asking the assistant a
/// question every few actions.
fn play(hub: &Hub, salt: u64, think_ms: f64) -> SimClient {
    let mut client = SimClient::new(hashed_policy(salt));
    client.think_ms = think_ms;
    let (mut link, mut queue) = LocalLink::connect(hub, &mut client);
    link.pump(&mut client, &mut queue, 1);
    for q in [
        "where is the goal?",
        "what are the rules?",
        "anything else?",
    ] {
        let ask = client.ask(q);
        queue.extend(link.send(&mut client, &ask));
        link.pump(&mut client, &mut queue, 7);
    }
    link.pump(&mut client, &mut queue, usize::MAX);
    assert!(client.complete, "{:?}", client.errors);
    link.close();
    client
}

fn recorded_run(sessions: u64) -> (Arc<Experiment>, Vec<Record>, Vec<SessionId>, Hub) {
    let exp = Arc::new(three_stage_experiment("fold"));
    let mem = MemorySink::new();
    let queue = Arc::new(
        SaveQueue::start(
            QueueConfig::default(),
            Box::new(mem.clone()),
            Box::new(MemorySink::new()),
        )
        .unwrap(),
    );
    let hub = Hub::new(
        exp.clone(),
        queue.clone() as Arc<dyn RecordQueue>,
        HubOptions::default(),
    );
    let ids = (0..sessions)
        .map(|s| play(&hub, s, 250.0 + s as f64).session.unwrap())
        .collect();
    assert!(queue.flush(Duration::from_secs(10)));
    (exp, mem.records(), ids, hub)
}

#[test]
fn snapshot_restore_equals_full_replay_at_every_prefix() {
    let (exp, records, ids, hub) = recorded_run(3);
    for id in ids {
        let own = session_records(&records, id);
        assert!(
            own.iter().any(|r| matches!(r, Record::Snapshot { .. })),
            "no snapshot among {} records",
            own.len()
        );
        for k in 1..=own.len() {
            let fast = restore_session(&exp, &own[..k]).unwrap();
            let slow = replay_session(&exp, &own[..k]).unwrap();
            assert_eq!(fast.corruption, None);
            assert_eq!(fast.state, slow.state, "prefix {k}");
        }
        let full = restore_session(&exp, &own).unwrap().state;
        assert_eq!(
            Some(full.clone()),
            hub.state(id).map(|mut s| {
                s.idle = full.idle;
                s
            })
        );
        assert!(full.progress.is_complete());
        // Restoring the restored state's own snapshot changes nothing.
        let mut again = own.clone();
        again.push(Record::Snapshot {
            session: id,
            state: full.encode(),
        });
        assert_eq!(restore_session(&exp, &again).unwrap().state, full);
    }
}

#[test]
fn snapshots_are_spaced_by_record_count() {
    let (_, records, ids, _) = recorded_run(1);
    let own = session_records(&records, ids[0]);
    let mut since = 0u64;
    for r in &own {
        match r {
            Record::Snapshot { .. } => {
                assert_eq!(since, SNAPSHOT_EVERY);
                since = 0;
            }
            _ => since += 1,
        }
    }
}

#[test]
fn fresh_session_restores_to_first_stage() {
    let (exp, records, ids, _) = recorded_run(1);
    let own = session_records(&records, ids[0]);
    let r = restore_session(&exp, &own[..1]).unwrap();
    assert_eq!(r.state.progress.stage_index, 0);
    assert_eq!(r.state.frame_id, 0);
    assert!(r.state.env.is_none());
}

#[test]
fn inconsistent_record_stops_the_fold_at_the_prefix() {
    let (exp, records, ids, _) = recorded_run(1);
    let own: Vec<Record> = session_records(&records, ids[0])
        .into_iter()
        .filter(|r| !matches!(r, Record::Snapshot { .. }))
        .collect();
    let bad = own
        .iter()
        .position(|r| matches!(r, Record::Step(s) if s.frame_id == 20))
        .unwrap();
    let mut damaged = own.clone();
    if let Record::Step(s) = &mut damaged[bad] {
        s.pre_state[6] ^= 0x40;
    }
    let r = replay_session(&exp, &damaged).unwrap();
    let (at, err) = r.corruption.unwrap();
    assert_eq!(at, bad);
    assert_eq!(err.kind, "step");
    assert_eq!(r.state, replay_session(&exp, &own[..bad]).unwrap().state);
    assert_eq!(r.state.frame_id, 20);
}

#[test]
fn export_round_trip_is_byte_identical() {
    let (exp, records, ids, _) = recorded_run(3);
    let dir = tempfile::tempdir().unwrap();
    let ds = Dataset::from_records(exp.id(), &records);
    let m = ds.write(&dir.path().join("a")).unwrap();
    let steps = records
        .iter()
        .filter(|r| matches!(r, Record::Step(_)))
        .count() as u64;
    assert_eq!(m.counts.sessions, ids.len() as u64);
    assert_eq!(m.counts.steps, steps);
    assert_eq!(m.counts.feedback, 3);
    assert_eq!(m.counts.chat, 3 * 3 * 2);
    assert_eq!(m.rows, steps + 3 + 18);
    let back = Dataset::read(&dir.path().join("a")).unwrap();
    assert_eq!(back, ds);
    back.write(&dir.path().join("b")).unwrap();
    for f in [
        "manifest.json",
        "sessions.ndjson",
        "steps.ndjson",
        "feedback.ndjson",
        "chat.ndjson",
    ] {
        let a = std::fs::read(dir.path().join("a").join(f)).unwrap();
        let b = std::fs::read(dir.path().join("b").join(f)).unwrap();
        assert_eq!(a, b, "{f}");
    }
}

#[test]
fn exported_response_times_are_t2_minus_t1() {
    let (exp, records, _, _) = recorded_run(3);
    let ds = Dataset::from_records(exp.id(), &records);
    for row in &ds.steps {
        assert!(!row.clock_anomaly);
        assert_eq!(row.response_time_ms, Some(row.t2 - row.t1));
    }
    // Each client thinks for a fixed time per frame.
    for s in &ds.sessions {
        let values: Vec<f64> = ds
            .steps
            .iter()
            .filter(|r| r.session == s.session)
            .map(|r| r.response_time_ms.unwrap())
            .collect();
        assert!(values.windows(2).all(|w| w[0] == w[1]), "{values:?}");
        assert!((250.0..253.0).contains(&values[0]));
    }
}

#[test]
fn export_from_log_file_matches_in_memory_export() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("records.log");
    let exp = Arc::new(three_stage_experiment("logged"));
    let (log, _) = LogFile::open(&path, true).unwrap();
    let queue = Arc::new(
        SaveQueue::start(
            QueueConfig::default(),
            Box::new(log),
            Box::new(MemorySink::new()),
        )
        .unwrap(),
    );
    let hub = Hub::new(
        exp.clone(),
        queue.clone() as Arc<dyn RecordQueue>,
        HubOptions::default(),
    );
    play(&hub, 7, 120.0);
    drop(hub);
    Arc::try_unwrap(queue).ok().unwrap().shutdown();
    let m = export_log(&path, exp.id(), &dir.path().join("out")).unwrap();
    let records = LogFile::open(&path, false).unwrap().1.records;
    assert_eq!(m, Dataset::from_records(exp.id(), &records).manifest());
    assert!(m.counts.steps > 0 && m.counts.feedback == 1);
}

#[test]
fn restarted_hub_resumes_every_session_mid_stage() {
    let exp = Arc::new(three_stage_experiment("resume"));
    let mem = MemorySink::new();
    let queue = Arc::new(
        SaveQueue::start(
            QueueConfig::default(),
            Box::new(mem.clone()),
            Box::new(MemorySink::new()),
        )
        .unwrap(),
    );
    let hub = Hub::new(
        exp.clone(),
        queue.clone() as Arc<dyn RecordQueue>,
        HubOptions::default(),
    );
    let mut client = SimClient::new(hashed_policy(1));
    let (mut link, mut q) = LocalLink::connect(&hub, &mut client);
    link.pump(&mut client, &mut q, 40);
    assert!(queue.flush(Duration::from_secs(5)));
    let before = hub.state(client.session.unwrap()).unwrap();

    let (hub2, report) = Hub::restore(
        exp.clone(),
        queue.clone() as Arc<dyn RecordQueue>,
        HubOptions::default(),
        &mem.records(),
    );
    assert_eq!(report.restored, 1);
    assert_eq!(hub2.state(before.session), Some(before.clone()));
    let (mut link2, mut q2) = LocalLink::connect(&hub2, &mut client);
    assert_eq!(client.resyncs, 1);
    assert_eq!(client.frame().map(|f| f.frame_id), Some(before.frame_id));
    link2.pump(&mut client, &mut q2, usize::MAX);
    assert!(client.complete);
}
