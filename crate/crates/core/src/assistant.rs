//! Task-assistant chat: ground-truth state descriptions and pluggable
//! advisors.

use std::time::Duration;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::twocooks::{Layout, Station};
use crate::env::{
    Cell, EnvError, EnvParams, EnvState, GridNavParams, GridWorld, Kitchen, TwoCooksParams, World,
};
use crate::persistence::ChatRole;

/// Per-stage assistant configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AssistantConfig {
    /// `scripted` or `remote`.
    pub advisor: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<String>,
    /// Name of the environment variable holding the bearer token.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_env: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    #[serde(default = "default_deadline")]
    pub deadline_ms: u64,
    #[serde(default)]
    pub visibility: Visibility,
    #[serde(default = "default_max_exchanges")]
    pub max_exchanges: u32,
}

fn default_deadline() -> u64 {
    20_000
}

fn default_max_exchanges() -> u32 {
    50
}

/// What the advisor is shown.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Visibility {
    /// Full ground-truth state.
    #[default]
    State,
    /// Only what the participant's observation shows.
    Observation,
}

/// Reply delivered when the advisor misses its deadline or fails.
pub const UNAVAILABLE_MESSAGE: &str =
    "The assistant is unavailable right now. Please continue with the task.";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectEntry {
    pub identity: String,
    pub cell: Cell,
}

/// Text account of an environment state: goal, objects with locations, and
/// rules.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateDescription {
    pub goal: String,
    pub objects: Vec<ObjectEntry>,
    pub rules: String,
}

impl StateDescription {
    /// Plain-text form handed to advisors. Object lines read
    /// `- <identity> at (<row>, <col>)`.
    pub fn render(&self) -> String {
        let mut out = format!("Goal: {}\nObjects:\n", self.goal);
        for o in &self.objects {
            out.push_str(&format!(
                "- {} at ({}, {})\n",
                o.identity, o.cell.0, o.cell.1
            ));
        }
        out.push_str("Rules: ");
        out.push_str(&self.rules);
        out
    }

    pub fn object_list(&self) -> String {
        self.objects
            .iter()
            .map(|o| format!("{} at ({}, {})", o.identity, o.cell.0, o.cell.1))
            .collect::<Vec<_>>()
            .join("; ")
    }
}

/// Describes a state. Depends only on the world and params, never on the
/// state's rng branch.
pub fn describe_state(
    state: &EnvState,
    params: &EnvParams,
    visibility: Visibility,
) -> Result<StateDescription, EnvError> {
    match (&state.world, params) {
        (World::GridNav(w), EnvParams::GridNav(p)) => Ok(describe_gridnav(w, p, visibility)),
        (World::TwoCooks(k), EnvParams::TwoCooks(p)) => Ok(describe_twocooks(k, p)),
        _ => Err(EnvError::KindMismatch),
    }
}

fn describe_gridnav(w: &GridWorld, p: &GridNavParams, visibility: Visibility) -> StateDescription {
    let goal_shown = visibility == Visibility::State || p.goal_visible;
    let mut objects = vec![ObjectEntry {
        identity: "agent".into(),
        cell: w.agent,
    }];
    if goal_shown {
        objects.push(ObjectEntry {
            identity: "goal".into(),
            cell: p.goal,
        });
    }
    let mut walls = p.walls.clone();
    walls.sort();
    walls.dedup();
    objects.extend(walls.into_iter().map(|cell| ObjectEntry {
        identity: "wall".into(),
        cell,
    }));
    let goal = if goal_shown {
        format!(
            "Move the agent to the goal at cell ({}, {}). Cells are (row, column) with row 0 at the top.",
            p.goal.0, p.goal.1
        )
    } else {
        "Find the hidden goal cell. Its location is not shown.".to_string()
    };
    let mut rules = format!(
        "The grid has {} rows and {} columns. Actions are up, down, left, right and stay. \
         Moving into a wall or off the grid leaves the agent in place. \
         Reaching the goal gives reward {} and ends the episode. \
         An episode ends after at most {} steps.",
        p.height, p.width, p.goal_reward, p.max_steps
    );
    if p.slip > 0.0 {
        rules.push_str(&format!(
            " With probability {} the chosen action is replaced by a random one.",
            p.slip
        ));
    }
    StateDescription {
        goal,
        objects,
        rules,
    }
}

fn describe_twocooks(k: &Kitchen, p: &TwoCooksParams) -> StateDescription {
    let layout = Layout::parse(&p.layout).expect("params validated before use");
    let mut objects = vec![
        ObjectEntry {
            identity: format!("you holding {}", k.human.held.name()),
            cell: k.human.pos,
        },
        ObjectEntry {
            identity: format!("partner holding {}", k.partner.held.name()),
            cell: k.partner.pos,
        },
    ];
    objects.extend(
        layout
            .cells_of(Station::Dispenser)
            .into_iter()
            .map(|cell| ObjectEntry {
                identity: "onion dispenser".into(),
                cell,
            }),
    );
    for (cell, pot) in layout.pots.iter().zip(&k.pots) {
        let status = if pot.ready {
            "soup ready".to_string()
        } else if pot.onions >= p.pot_capacity {
            format!("cooking, {} steps left", pot.timer)
        } else {
            format!("{} of {} onions", pot.onions, p.pot_capacity)
        };
        objects.push(ObjectEntry {
            identity: format!("pot with {status}"),
            cell: *cell,
        });
    }
    objects.extend(
        layout
            .cells_of(Station::Serving)
            .into_iter()
            .map(|cell| ObjectEntry {
                identity: "serving window".into(),
                cell,
            }),
    );
    StateDescription {
        goal: format!(
            "Cook onion soup with your partner and deliver it at the serving window. Soups delivered so far: {}.",
            k.delivered
        ),
        objects,
        rules: format!(
            "Actions are up, down, left, right, stay and interact. A move turns you to face that \
             direction and steps forward if the cell is free floor; two cooks cannot share or swap cells. \
             Interact acts on the station you face: take an onion from a dispenser, put an onion in a pot, \
             pick up a ready soup from a pot, or deliver soup at the serving window. A pot cooks for {} \
             steps once it holds {} onions. Each delivered soup gives reward {}. The episode lasts {} steps.",
            p.cook_time, p.pot_capacity, p.soup_reward, p.max_steps
        ),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: ChatRole,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("advisor failed: {0}")]
pub struct AdvisorError(pub String);

/// Produces the assistant's next message. Implementations keep no
/// per-session state; everything they know arrives in the arguments.
#[async_trait]
pub trait Advisor: Send + Sync {
    async fn advise(
        &self,
        description: &StateDescription,
        transcript: &[ChatMessage],
    ) -> Result<String, AdvisorError>;
}

/// Keyword-matching advisor that answers goal, location and rule questions
/// straight from the description.
#[derive(Debug, Clone, Default)]
pub struct ScriptedAdvisor {
    /// Artificial latency before replying.
    pub delay: Duration,
}

impl ScriptedAdvisor {
    pub fn reply(description: &StateDescription, question: &str) -> String {
        let q = question.to_lowercase();
        let mut parts = Vec::new();
        if q.contains("goal") || q.contains("objective") || q.contains("what should") {
            parts.push(description.goal.clone());
        }
        if q.contains("where") || q.contains("locat") || q.contains("object") {
            parts.push(format!("Objects: {}.", description.object_list()));
        }
        if q.contains("rule") || q.contains("how") {
            parts.push(description.rules.clone());
        }
        if parts.is_empty() {
            "I can tell you about the goal, where things are, or the rules.".to_string()
        } else {
            parts.join(" ")
        }
    }
}

#[async_trait]
impl Advisor for ScriptedAdvisor {
    async fn advise(
        &self,
        description: &StateDescription,
        transcript: &[ChatMessage],
    ) -> Result<String, AdvisorError> {
        if !self.delay.is_zero() {
            tokio::time::sleep(self.delay).await;
        }
        let question = transcript
            .iter()
            .rev()
            .find(|m| m.role == ChatRole::User)
            .map(|m| m.text.as_str())
            .unwrap_or("");
        Ok(Self::reply(description, question))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Consultation {
    pub text: String,
    pub unavailable: bool,
    /// Why the advisor's own reply was not used.
    pub failure: Option<String>,
}

/// Calls the advisor under a deadline. A timeout or error yields
/// [`UNAVAILABLE_MESSAGE`].
pub async fn consult(
    advisor: &dyn Advisor,
    description: &StateDescription,
    transcript: &[ChatMessage],
    deadline: Duration,
) -> Consultation {
    let failure =
        match tokio::time::timeout(deadline, advisor.advise(description, transcript)).await {
            Ok(Ok(text)) => {
                return Consultation {
                    text,
                    unavailable: false,
                    failure: None,
                }
            }
            Ok(Err(e)) => e.to_string(),
            Err(_) => format!("no reply within {} ms", deadline.as_millis()),
        };
    tracing::warn!(%failure, "assistant unavailable");
    Consultation {
        text: UNAVAILABLE_MESSAGE.to_string(),
        unavailable: true,
        failure: Some(failure),
    }
}

/// Request body sent to a remote advisor endpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemoteRequest {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    /// The rendered state description.
    pub system: String,
    pub messages: Vec<RemoteMessage>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RemoteMessage {
    /// `user` or `assistant`.
    pub role: String,
    pub content: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RemoteResponse {
    pub text: String,
}

impl RemoteRequest {
    pub fn new(
        model: Option<String>,
        description: &StateDescription,
        transcript: &[ChatMessage],
    ) -> Self {
        Self {
            model,
            system: description.render(),
            messages: transcript
                .iter()
                .map(|m| RemoteMessage {
                    role: match m.role {
                        ChatRole::User => "user",
                        ChatRole::Assistant => "assistant",
                    }
                    .into(),
                    content: m.text.clone(),
                })
                .collect(),
        }
    }
}
