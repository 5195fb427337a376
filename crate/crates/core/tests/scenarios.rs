//! Whole-system scenarios at reduced size; the acceptance target runs them
//! at full size.

use std::sync::Arc;

use webrl_core::env::twocooks::TwoCooksParams;
use webrl_core::env::EnvParams;
use webrl_core::persistence::{BackoffConfig, QueueConfig};
use webrl_testkit::harness::{
    concurrent_sessions, crash_and_recover, faulty_persistence, network_faults,
    speculation_matches_direct,
};
use webrl_testkit::{as_params, gridnav_experiment, random_maze, twocooks_experiment};

#[test]
fn speculative_frames_match_direct_stepping() {
    let mut maze = random_maze(11, 8, 8, 0.2);
    maze.slip = 0.25;
    maze.max_steps = 40;
    let episodes = speculation_matches_direct(&as_params(maze), 3, 1_000).unwrap();
    assert!(episodes > 5);
    let kitchen = EnvParams::TwoCooks(TwoCooksParams {
        max_steps: 120,
        ..TwoCooksParams::default()
    });
    speculation_matches_direct(&kitchen, 4, 1_000).unwrap();
}

#[test]
fn interleaved_sessions_stay_isolated() {
    let exp = Arc::new(gridnav_experiment("iso", 100, 25));
    let report = concurrent_sessions(exp, 16, 80).unwrap();
    assert!(report.interleavings > 16, "{report:?}");
}

#[test]
fn crash_then_restore_finishes_the_oracle_trajectory() {
    let dir = tempfile::tempdir().unwrap();
    let exp = Arc::new(twocooks_experiment("crash", 4, 30));
    for (salt, crash_at) in [(1, 0), (2, 1), (3, 37), (4, 60), (5, 119)] {
        let r = crash_and_recover(exp.clone(), dir.path(), salt, crash_at, salt % 2 == 0).unwrap();
        assert!(r.recovered_steps <= crash_at);
    }
}

#[test]
fn lossy_reordering_link_with_disconnects_steps_exactly_once() {
    let exp = Arc::new(twocooks_experiment("net", 4, 40));
    let r = network_faults(exp, 9, 12, 0.1, 0.1, 0.2).unwrap();
    assert_eq!(r.disconnects, 12);
    assert!(
        r.dropped > 0 && r.duplicated > 0 && r.reordered > 0,
        "{r:?}"
    );
}

#[test]
fn failing_sink_loses_and_duplicates_nothing() {
    let config = QueueConfig {
        backoff: BackoffConfig {
            base_ms: 0.5,
            jitter: 0.5,
            max_delay_ms: 1_000.0,
            max_attempts: 8,
        },
        seed: 17,
        ..QueueConfig::default()
    };
    let r = faulty_persistence(2_000, 8, 0.3, config).unwrap();
    assert!(r.failed_attempts > 400, "{r:?}");
    assert_eq!(
        r.delays_checked as u64,
        r.failed_attempts - r.dead_lettered as u64
    );
}

#[test]
fn exhausted_retries_dead_letter_and_do_not_block_other_records() {
    let config = QueueConfig {
        backoff: BackoffConfig {
            base_ms: 0.1,
            jitter: 0.2,
            max_delay_ms: 10.0,
            max_attempts: 2,
        },
        seed: 3,
        ..QueueConfig::default()
    };
    let r = faulty_persistence(600, 3, 0.6, config).unwrap();
    assert!(r.dead_lettered > 0);
    assert_eq!(r.written + r.dead_lettered, 600);
}
