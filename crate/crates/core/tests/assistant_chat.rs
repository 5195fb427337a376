use std::sync::Arc;

use webrl_core::assistant::{describe_state, StateDescription, Visibility};
use webrl_core::env::gridnav::{GridNavParams, StartSpec, TILE_GOAL};
use webrl_core::env::twocooks::TwoCooksParams;
use webrl_core::env::{self, ActionId, EnvParams, EnvState, World};
use webrl_core::hub::{Hub, HubOptions};
use webrl_core::persistence::{ChatRole, MemorySink, QueueConfig, SaveQueue};
use webrl_core::protocol::{ClientMessage, ErrorCode, ServerMessage, PROTOCOL_VERSION};
use webrl_core::rng::Rng;
use webrl_core::sim::{hashed_policy, LocalLink, SimClient};
use webrl_testkit::{as_params, random_maze, three_stage_experiment};

/// Reads `- <identity> at (<row>, <col>)` lines back out of a rendering.
fn parse_objects(text: &str) -> Vec<(String, (u16, u16))> {
    text.lines()
        .filter_map(|l| l.strip_prefix("- "))
        .map(|l| {
            let (id, cell) = l.rsplit_once(" at (").unwrap();
            let (r, c) = cell.trim_end_matches(')').split_once(", ").unwrap();
            (id.to_string(), (r.parse().unwrap(), c.parse().unwrap()))
        })
        .collect()
}

fn rollout(params: &EnvParams, seed: u64, n: usize) -> Vec<EnvState> {
    let (mut st, _) = env::reset(params, &Rng::new(seed)).unwrap();
    let mut out = Vec::new();
    let mut s = Rng::new(seed).split(1).stream();
    let actions = params.action_count() as u64;
    while out.len() < n && !st.done {
        out.push(st.clone());
        st = env::step(
            &st,
            ActionId(s.below(actions) as u8),
            params,
            &env::step_rng(&st),
        )
        .unwrap()
        .state;
    }
    out
}

#[test]
fn gridnav_descriptions_parse_back_to_the_state() {
    let mut checked = 0;
    let mut seed = 0;
    while checked < 600 {
        let mut maze = random_maze(seed, 7, 6, 0.25);
        maze.max_steps = 30;
        let params = as_params(maze.clone());
        for st in rollout(&params, seed, 30) {
            let d = describe_state(&st, &params, Visibility::State).unwrap();
            let objects = parse_objects(&d.render());
            let World::GridNav(g) = &st.world else {
                unreachable!()
            };
            assert_eq!(objects[0], ("agent".to_string(), g.agent));
            assert_eq!(objects[1], ("goal".to_string(), maze.goal));
            let mut walls: Vec<_> = objects[2..]
                .iter()
                .map(|(id, c)| {
                    assert_eq!(id, "wall");
                    *c
                })
                .collect();
            let mut expected = maze.walls.clone();
            expected.sort();
            walls.sort();
            assert_eq!(walls, expected);
            checked += 1;
        }
        seed += 1;
    }
}

#[test]
fn twocooks_descriptions_parse_back_to_the_state() {
    let params = EnvParams::TwoCooks(TwoCooksParams::default());
    let states = rollout(&params, 3, 400);
    assert_eq!(states.len(), 200);
    for st in rollout(&params, 4, 200).into_iter().chain(states) {
        let d = describe_state(&st, &params, Visibility::State).unwrap();
        let objects = parse_objects(&d.render());
        let World::TwoCooks(k) = &st.world else {
            unreachable!()
        };
        assert!(objects.contains(&(format!("you holding {}", k.human.held.name()), k.human.pos)));
        assert!(objects.contains(&(
            format!("partner holding {}", k.partner.held.name()),
            k.partner.pos
        )));
        assert_eq!(
            objects
                .iter()
                .filter(|(id, _)| id.starts_with("pot with"))
                .count(),
            k.pots.len()
        );
    }
}

#[test]
fn descriptions_ignore_the_rng_branch() {
    let params = as_params(random_maze(1, 6, 6, 0.2));
    let (a, _) = env::reset(&params, &Rng::new(1)).unwrap();
    let mut b = a.clone();
    b.rng = Rng::new(999).split(4);
    let da: StateDescription = describe_state(&a, &params, Visibility::State).unwrap();
    assert_eq!(da, describe_state(&b, &params, Visibility::State).unwrap());
}

/// The participant never sees a hidden goal; the assistant does unless it is
/// restricted to the observation.
#[test]
fn hidden_goal_reaches_only_the_assistant() {
    let mut p = GridNavParams::open(6, 6, (5, 0), (1, 4));
    p.goal_visible = false;
    p.start = StartSpec::Fixed((5, 0));
    let params = EnvParams::GridNav(p);
    let (st, obs) = env::reset(&params, &Rng::new(0)).unwrap();
    assert!(!obs.grid.tiles.contains(&TILE_GOAL));
    let frame = webrl_core::speculation::open_frame(0, &params, &st, 0.0).unwrap();
    let wire = serde_json::to_string(&frame.client_view()).unwrap();
    assert!(frame.client_view().successors.iter().all(|s| !s
        .observation
        .grid
        .tiles
        .contains(&TILE_GOAL)));
    assert!(!wire.contains("goal"));

    let full = describe_state(&st, &params, Visibility::State)
        .unwrap()
        .render();
    assert!(full.contains("goal at (1, 4)"));
    let limited = describe_state(&st, &params, Visibility::Observation)
        .unwrap()
        .render();
    assert!(!limited.contains("(1, 4)"));
}

#[test]
fn transcript_grows_two_per_exchange_and_survives_reconnect() {
    let exp = Arc::new(three_stage_experiment("chat"));
    let queue = Arc::new(
        SaveQueue::start(
            QueueConfig::default(),
            Box::new(MemorySink::new()),
            Box::new(MemorySink::new()),
        )
        .unwrap(),
    );
    let hub = Hub::new(exp, queue, HubOptions::default());
    let mut client = SimClient::new(hashed_policy(2));
    let (mut link, mut q) = LocalLink::connect(&hub, &mut client);
    link.pump(&mut client, &mut q, 1);
    let session = client.session.unwrap();
    for k in 1..=4 {
        let ask = client.ask("where is the goal?");
        link.send(&mut client, &ask);
        let st = hub.state(session).unwrap();
        assert_eq!(st.episode_transcript().count(), 2 * k);
        let roles: Vec<_> = st.episode_transcript().map(|e| e.role).collect();
        assert_eq!(
            roles[roles.len() - 2..],
            [ChatRole::User, ChatRole::Assistant]
        );
    }
    assert_eq!(client.assistant_replies.len(), 4);
    assert!(client
        .assistant_replies
        .iter()
        .all(|(t, unavailable)| !unavailable && t.contains("(0, 4)")));
    link.close();

    let conn = hub.next_conn_id();
    let (_, fx) = hub.hello(
        conn,
        &ClientMessage::Hello {
            protocol: PROTOCOL_VERSION,
            experiment_version: Some(3),
            session: Some(session),
            last_seq: None,
        },
    );
    let resync = fx.messages_for(conn).find_map(|m| match m {
        ServerMessage::Resync { transcript, .. } => Some(transcript.clone()),
        _ => None,
    });
    assert_eq!(resync.unwrap().len(), 8);
}

#[test]
fn chat_outside_an_assisted_stage_is_refused() {
    let exp = Arc::new(three_stage_experiment("nochat"));
    let queue = Arc::new(
        SaveQueue::start(
            QueueConfig::default(),
            Box::new(MemorySink::new()),
            Box::new(MemorySink::new()),
        )
        .unwrap(),
    );
    let hub = Hub::new(exp, queue, HubOptions::default());
    let mut client = SimClient::new(hashed_policy(2));
    let (mut link, _) = LocalLink::connect(&hub, &mut client);
    // Still on the instruction screen.
    let ask = client.ask("hello?");
    link.send(&mut client, &ask);
    assert_eq!(
        client.errors.last().map(|e| e.0),
        Some(ErrorCode::ChatDisabled)
    );
}
