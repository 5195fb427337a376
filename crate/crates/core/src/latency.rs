//! Discrete-event model of perceived latency under the speculative and the
//! naive request/response protocols.
//!
//! Perceived latency is the time from a keypress to the paint of the
//! resulting observation. Under the naive protocol the client must send the
//! action and wait for the server's reply. Under the speculative protocol the
//! reply to the previous action already carried every possible next
//! observation, so the paint is local unless that frame is still in flight.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap};
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{self, ActionId, EnvParams, GridNavParams};
use crate::protocol::{ClientMessage, FramePayload, ServerMessage};
use crate::rng::{Rng, RngStream};
use crate::speculation::open_frame;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Distribution {
    Fixed {
        ms: f64,
    },
    Uniform {
        lo: f64,
        hi: f64,
    },
    /// `exp(N(mu, sigma²))`, parameters in ln-ms.
    Lognormal {
        mu: f64,
        sigma: f64,
    },
    Exponential {
        mean: f64,
    },
}

impl Distribution {
    pub fn sample(&self, s: &mut RngStream) -> f64 {
        match *self {
            Distribution::Fixed { ms } => ms,
            Distribution::Uniform { lo, hi } => lo + s.next_f64() * (hi - lo),
            Distribution::Lognormal { mu, sigma } => (mu + sigma * standard_normal(s)).exp(),
            Distribution::Exponential { mean } => -mean * (1.0 - s.next_f64()).ln(),
        }
    }

    pub fn mean(&self) -> f64 {
        match *self {
            Distribution::Fixed { ms } => ms,
            Distribution::Uniform { lo, hi } => (lo + hi) / 2.0,
            Distribution::Lognormal { mu, sigma } => (mu + sigma * sigma / 2.0).exp(),
            Distribution::Exponential { mean } => mean,
        }
    }

    fn check(&self, what: &str) -> Result<(), LatencyError> {
        let bad = |m: String| Err(LatencyError::Invalid(format!("{what}: {m}")));
        match *self {
            Distribution::Fixed { ms } if !(ms >= 0.0 && ms.is_finite()) => {
                bad(format!("fixed value {ms} must be ≥ 0"))
            }
            Distribution::Uniform { lo, hi } if !(0.0 <= lo && lo <= hi && hi.is_finite()) => bad(
                format!("uniform bounds [{lo}, {hi}] must satisfy 0 ≤ lo ≤ hi"),
            ),
            Distribution::Lognormal { mu, sigma }
                if !(mu.is_finite() && sigma >= 0.0 && sigma.is_finite()) =>
            {
                bad(format!("lognormal sigma {sigma} must be ≥ 0"))
            }
            Distribution::Exponential { mean } if !(mean >= 0.0 && mean.is_finite()) => {
                bad(format!("mean {mean} must be ≥ 0"))
            }
            _ => Ok(()),
        }
    }

    /// Parses `100`, `fixed:100`, `uniform:50,150`, `lognormal:4.0,0.5` or
    /// `exponential:300`.
    pub fn parse(text: &str) -> Result<Self, LatencyError> {
        let bad = || LatencyError::Invalid(format!("cannot parse distribution `{text}`"));
        let (kind, args) = text.split_once(':').unwrap_or(("fixed", text));
        let nums = args
            .split(',')
            .map(|a| a.trim().parse::<f64>().map_err(|_| bad()))
            .collect::<Result<Vec<_>, _>>()?;
        let d = match (kind.trim(), nums.as_slice()) {
            ("fixed", [ms]) => Distribution::Fixed { ms: *ms },
            ("uniform", [lo, hi]) => Distribution::Uniform { lo: *lo, hi: *hi },
            ("lognormal", [mu, sigma]) => Distribution::Lognormal {
                mu: *mu,
                sigma: *sigma,
            },
            ("exponential", [mean]) => Distribution::Exponential { mean: *mean },
            _ => return Err(bad()),
        };
        d.check("distribution")?;
        Ok(d)
    }
}

/// Box-Muller transform.
fn standard_normal(s: &mut RngStream) -> f64 {
    let u1 = 1.0 - s.next_f64();
    let u2 = s.next_f64();
    (-2.0 * u1.ln()).sqrt() * (2.0 * PI * u2).cos()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkModel {
    /// Round-trip time; each one-way trip takes half of an independent draw.
    pub rtt: Distribution,
    pub serialization_ms_per_kb: f64,
    /// Probability that one transmission is lost.
    pub loss: f64,
    /// Wait before a lost message is sent again.
    pub retransmit_ms: f64,
}

impl NetworkModel {
    pub fn fixed(rtt_ms: f64) -> Self {
        Self {
            rtt: Distribution::Fixed { ms: rtt_ms },
            serialization_ms_per_kb: 0.0,
            loss: 0.0,
            retransmit_ms: 200.0,
        }
    }

    pub fn validate(&self) -> Result<(), LatencyError> {
        self.rtt.check("rtt")?;
        if !(self.serialization_ms_per_kb >= 0.0 && self.serialization_ms_per_kb.is_finite()) {
            return Err(LatencyError::Invalid(
                "serialization_ms_per_kb must be ≥ 0".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.loss) {
            return Err(LatencyError::Invalid(format!(
                "loss {} must be in [0, 1)",
                self.loss
            )));
        }
        if !(self.retransmit_ms >= 0.0 && self.retransmit_ms.is_finite()) {
            return Err(LatencyError::Invalid("retransmit_ms must be ≥ 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariantKind {
    Speculative,
    Naive,
}

impl std::str::FromStr for VariantKind {
    type Err = LatencyError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "speculative" => Ok(VariantKind::Speculative),
            "naive" => Ok(VariantKind::Naive),
            other => Err(LatencyError::Invalid(format!("unknown variant `{other}`"))),
        }
    }
}

impl VariantKind {
    pub fn name(self) -> &'static str {
        match self {
            VariantKind::Speculative => "speculative",
            VariantKind::Naive => "naive",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtocolVariant {
    pub kind: VariantKind,
    pub action_count: u32,
    /// Server time to produce one reply (a naive step, or one batched
    /// evaluation of every successor).
    pub compute_ms: f64,
    pub think: Distribution,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LatencyError {
    #[error("{0}")]
    Invalid(String),
}

/// Serialized sizes of the real wire messages, in bytes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MessageSizes {
    /// One `action` message.
    pub action: u64,
    /// `env_ack` carrying a frame with no successors.
    pub frame_base: u64,
    /// One serialized successor entry.
    pub successor: u64,
}

impl MessageSizes {
    /// Measures the messages for one frame of `params`.
    pub fn measure(params: &EnvParams) -> Self {
        let (state, _) = env::reset(params, &Rng::new(0)).expect("valid params");
        let frame = open_frame(0, params, &state, 0.0).expect("fresh state");
        let mut payload = FramePayload::new(0, 0, 0, frame.client_view());
        let successor = serde_json::to_string(&payload.successors[0]).unwrap().len() as u64;
        payload.successors.clear();
        let ack = |frame: FramePayload| ServerMessage::EnvAck {
            committed: 1_000_000,
            action: ActionId(0),
            reward: 0.0,
            done: false,
            frame: Some(frame),
        };
        let frame_base = crate::protocol::encode_server(1_000_000, &ack(payload)).len() as u64;
        let action = serde_json::to_string(&crate::protocol::Envelope {
            seq: 1_000_000,
            body: ClientMessage::Action {
                frame_id: 1_000_000,
                action: ActionId(0),
                t1: 123456.789,
                t2: 123789.123,
            },
        })
        .unwrap()
        .len() as u64;
        Self {
            action,
            frame_base,
            successor,
        }
    }

    /// Sizes for a 5×5 GridNav frame.
    pub fn gridnav_default() -> Self {
        Self::measure(&EnvParams::GridNav(GridNavParams::open(
            5,
            5,
            (4, 0),
            (0, 4),
        )))
    }

    /// Reply carrying `n` successors (JSON adds a comma between entries).
    pub fn frame(&self, n: u32) -> u64 {
        self.frame_base + n as u64 * self.successor + (n as u64).saturating_sub(1)
    }

    /// Naive reply: the observation alone, the size of a one-entry frame.
    pub fn naive_reply(&self) -> u64 {
        self.frame(1)
    }

    pub fn reply(&self, kind: VariantKind, action_count: u32) -> u64 {
        match kind {
            VariantKind::Speculative => self.frame(action_count),
            VariantKind::Naive => self.naive_reply(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepTrace {
    pub step: u32,
    pub keypress_ms: f64,
    pub render_ms: f64,
    pub perceived_ms: f64,
    /// The paint waited for a message from the server.
    pub waited: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub variant: ProtocolVariant,
    pub network: NetworkModel,
    pub seed: u64,
    pub steps: Vec<StepTrace>,
    /// Bytes put on the wire, including retransmissions, by message type.
    pub bytes_by_message: BTreeMap<String, u64>,
    pub transmissions: u64,
    pub total_bytes: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Event {
    /// Client receives the reply for step `k` (the initial frame is `k = 0`).
    ClientReceive(u32),
    ServerReceive(u32),
    Keypress(u32),
}

#[derive(Debug, PartialEq)]
struct Scheduled {
    at: f64,
    order: u64,
    event: Event,
}

impl Eq for Scheduled {}

impl Ord for Scheduled {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.at
            .total_cmp(&other.at)
            .then(self.order.cmp(&other.order))
    }
}

impl PartialOrd for Scheduled {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

struct Sim<'a> {
    net: &'a NetworkModel,
    queue: BinaryHeap<Reverse<Scheduled>>,
    order: u64,
    rtt: RngStream,
    loss: RngStream,
    bytes: BTreeMap<String, u64>,
    transmissions: u64,
}

impl Sim<'_> {
    fn schedule(&mut self, at: f64, event: Event) {
        self.order += 1;
        self.queue.push(Reverse(Scheduled {
            at,
            order: self.order,
            event,
        }));
    }

    /// Time at which a message sent at `now` is delivered.
    fn transmit(&mut self, now: f64, kind: &str, size: u64) -> f64 {
        let mut t = now;
        loop {
            self.transmissions += 1;
            *self.bytes.entry(kind.to_string()).or_default() += size;
            if !self.loss.bernoulli(self.net.loss) {
                break;
            }
            t += self.net.retransmit_ms;
        }
        let one_way = self.net.rtt.sample(&mut self.rtt).max(0.0) / 2.0;
        t + one_way + self.net.serialization_ms_per_kb * size as f64 / 1024.0
    }
}

/// Runs `steps` keypresses. Deterministic in `seed`.
pub fn simulate(
    variant: &ProtocolVariant,
    net: &NetworkModel,
    sizes: &MessageSizes,
    steps: u32,
    seed: u64,
) -> Result<Trace, LatencyError> {
    net.validate()?;
    variant.think.check("think")?;
    if variant.action_count == 0 {
        return Err(LatencyError::Invalid("action_count must be ≥ 1".into()));
    }
    if steps == 0 {
        return Err(LatencyError::Invalid("steps must be ≥ 1".into()));
    }
    if !(variant.compute_ms >= 0.0 && variant.compute_ms.is_finite()) {
        return Err(LatencyError::Invalid("compute_ms must be ≥ 0".into()));
    }
    let root = Rng::new(seed);
    let mut think = root.split(3).stream();
    let mut sim = Sim {
        net,
        queue: BinaryHeap::new(),
        order: 0,
        rtt: root.split(1).stream(),
        loss: root.split(2).stream(),
        bytes: BTreeMap::new(),
        transmissions: 0,
    };
    let speculative = variant.kind == VariantKind::Speculative;
    let reply_size = sizes.reply(variant.kind, variant.action_count);
    // Successors are evaluated as one batch, so a speculative step costs the
    // same server time as a naive one.
    let server_compute = variant.compute_ms;

    // The server opens the session by computing and sending the first reply.
    let first = sim.transmit(server_compute, "env_frame", reply_size);
    sim.schedule(first, Event::ClientReceive(0));

    let mut out = Vec::with_capacity(steps as usize);
    // Highest reply index the client holds, and a keypress waiting on a reply.
    let mut received: Option<u32> = None;
    let mut waiting: Option<(u32, f64)> = None;

    while let Some(Reverse(Scheduled { at: now, event, .. })) = sim.queue.pop() {
        match event {
            Event::ClientReceive(k) => {
                received = Some(received.map_or(k, |r| r.max(k)));
                match waiting {
                    Some((step, pressed)) if step_needs(speculative, step) <= k => {
                        waiting = None;
                        out.push(StepTrace {
                            step,
                            keypress_ms: pressed,
                            render_ms: now,
                            perceived_ms: now - pressed,
                            waited: true,
                        });
                        if speculative {
                            let at = sim.transmit(now, "action", sizes.action);
                            sim.schedule(at, Event::ServerReceive(step));
                        }
                        if (out.len() as u32) < steps {
                            sim.schedule(
                                now + variant.think.sample(&mut think),
                                Event::Keypress(step + 1),
                            );
                        }
                    }
                    None if k == 0 => {
                        sim.schedule(now + variant.think.sample(&mut think), Event::Keypress(0));
                    }
                    _ => {}
                }
            }
            Event::Keypress(step) => {
                if speculative && received.is_some_and(|r| r >= step) {
                    out.push(StepTrace {
                        step,
                        keypress_ms: now,
                        render_ms: now,
                        perceived_ms: 0.0,
                        waited: false,
                    });
                    let at = sim.transmit(now, "action", sizes.action);
                    sim.schedule(at, Event::ServerReceive(step));
                    if (out.len() as u32) < steps {
                        sim.schedule(
                            now + variant.think.sample(&mut think),
                            Event::Keypress(step + 1),
                        );
                    }
                } else {
                    waiting = Some((step, now));
                    if !speculative {
                        let at = sim.transmit(now, "action", sizes.action);
                        sim.schedule(at, Event::ServerReceive(step));
                    }
                }
            }
            Event::ServerReceive(step) => {
                // Speculative: frame `step + 1`; naive: the observation
                // answering this step.
                let reply = step + 1;
                let kind = if speculative {
                    "env_ack+frame"
                } else {
                    "env_ack"
                };
                if speculative && reply >= steps {
                    // No frame is needed after the last step.
                    continue;
                }
                let at = sim.transmit(now + server_compute, kind, reply_size);
                sim.schedule(at, Event::ClientReceive(reply));
            }
        }
        if out.len() as u32 >= steps && waiting.is_none() {
            break;
        }
    }
    let total_bytes = sim.bytes.values().sum();
    Ok(Trace {
        variant: variant.clone(),
        network: net.clone(),
        seed,
        steps: out,
        bytes_by_message: sim.bytes,
        transmissions: sim.transmissions,
        total_bytes,
    })
}

/// Reply index a step's paint depends on: the frame for that step
/// (speculative) or the reply to that step's action (naive).
fn step_needs(speculative: bool, step: u32) -> u32 {
    if speculative {
        step
    } else {
        step + 1
    }
}

/// Nearest-rank percentile of unsorted data, `p` in (0, 100].
pub fn percentile(values: &[f64], p: f64) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((p / 100.0) * v.len() as f64).ceil().max(1.0) as usize;
    v[rank.min(v.len()) - 1]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub variant: String,
    pub actions: u32,
    pub steps: u64,
    pub mean_ms: f64,
    pub median_ms: f64,
    pub p95_ms: f64,
    pub max_ms: f64,
    pub total_bytes: u64,
    pub bytes_per_step: f64,
}

impl SummaryRow {
    pub fn of(trace: &Trace) -> Self {
        let lat: Vec<f64> = trace.steps.iter().map(|s| s.perceived_ms).collect();
        let n = lat.len().max(1) as f64;
        SummaryRow {
            variant: trace.variant.kind.name().to_string(),
            actions: trace.variant.action_count,
            steps: lat.len() as u64,
            mean_ms: lat.iter().sum::<f64>() / n,
            median_ms: percentile(&lat, 50.0),
            p95_ms: percentile(&lat, 95.0),
            max_ms: lat.iter().copied().fold(f64::NAN, f64::max),
            total_bytes: trace.total_bytes,
            bytes_per_step: trace.total_bytes as f64 / n,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Crossover {
    pub budget_bytes_per_step: u64,
    /// Smallest action count whose speculative reply exceeds the budget.
    pub action_count: Option<u32>,
    /// `(action count, speculative reply bytes)` for plotting.
    pub series: Vec<(u32, u64)>,
}

/// Action count at which one speculative reply first exceeds `budget`.
pub fn crossover(sizes: &MessageSizes, budget: u64, max_actions: u32) -> Crossover {
    let series: Vec<(u32, u64)> = (1..=max_actions).map(|a| (a, sizes.frame(a))).collect();
    Crossover {
        budget_bytes_per_step: budget,
        action_count: series.iter().find(|(_, b)| *b > budget).map(|(a, _)| *a),
        series,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub rows: Vec<SummaryRow>,
    pub sizes: MessageSizes,
    pub crossover: Crossover,
}

pub fn report(traces: &[Trace], sizes: &MessageSizes, budget: u64) -> Report {
    let max_actions = traces
        .iter()
        .map(|t| t.variant.action_count)
        .max()
        .unwrap_or(1)
        .max(32);
    Report {
        rows: traces.iter().map(SummaryRow::of).collect(),
        sizes: *sizes,
        crossover: crossover(sizes, budget, max_actions),
    }
}

impl Report {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "variant,actions,steps,mean_ms,median_ms,p95_ms,max_ms,total_bytes,bytes_per_step\n",
        );
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                r.variant,
                r.actions,
                r.steps,
                r.mean_ms,
                r.median_ms,
                r.p95_ms,
                r.max_ms,
                r.total_bytes,
                r.bytes_per_step
            ));
        }
        s
    }

    pub fn to_table(&self) -> String {
        let mut s = format!(
            "{:<12} {:>7} {:>7} {:>10} {:>10} {:>10} {:>12}\n",
            "variant", "actions", "steps", "mean ms", "median ms", "p95 ms", "bytes/step"
        );
        for r in &self.rows {
            s.push_str(&format!(
                "{:<12} {:>7} {:>7} {:>10.3} {:>10.3} {:>10.3} {:>12.1}\n",
                r.variant, r.actions, r.steps, r.mean_ms, r.median_ms, r.p95_ms, r.bytes_per_step
            ));
        }
        match self.crossover.action_count {
            Some(a) => s.push_str(&format!(
                "speculative reply exceeds {} bytes at {} actions\n",
                self.crossover.budget_bytes_per_step, a
            )),
            None => s.push_str(&format!(
                "speculative reply stays within {} bytes up to {} actions\n",
                self.crossover.budget_bytes_per_step,
                self.crossover.series.len()
            )),
        }
        s
    }
}

/// One JSON object per step, tagged with the variant.
pub fn trace_ndjson(trace: &Trace) -> String {
    let mut s = String::new();
    for step in &trace.steps {
        let row = serde_json::json!({
            "variant": trace.variant.kind.name(),
            "actions": trace.variant.action_count,
            "seed": trace.seed,
            "step": step.step,
            "keypress_ms": step.keypress_ms,
            "render_ms": step.render_ms,
            "perceived_ms": step.perceived_ms,
            "waited": step.waited,
        });
        s.push_str(&row.to_string());
        s.push('\n');
    }
    s
}
