//! Experiment definitions: the document researchers write, its validation,
//! and the resolved form the server runs.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::form::FormSchema;
use crate::assistant::AssistantConfig;
use crate::env::{self, EnvError, EnvParams};
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentDefinition {
    pub experiment_id: String,
    pub version: u32,
    #[serde(default)]
    pub title: String,
    #[serde(default)]
    pub consent: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub stages: Vec<StageConfig>,
    /// Alternative stage lists; each session is assigned one by its seed.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub conditions: Vec<Condition>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Condition {
    pub id: String,
    pub stages: Vec<StageConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StageConfig {
    Instruction(InstructionStage),
    Feedback(FeedbackStage),
    Environment(EnvironmentStage),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstructionStage {
    pub id: String,
    #[serde(default)]
    pub title: String,
    pub body: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeedbackStage {
    pub id: String,
    #[serde(default)]
    pub title: String,
    pub questions: FormSchema,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvironmentStage {
    pub id: String,
    #[serde(default)]
    pub title: String,
    #[serde(default)]
    pub instructions: String,
    /// Registered environment kind id.
    pub env: String,
    /// Environment parameters, decoded according to `env`.
    pub params: serde_json::Value,
    pub max_episodes: u32,
    #[serde(default)]
    pub min_successes: u32,
    /// An episode succeeds when its return is at least this value.
    #[serde(default = "default_threshold")]
    pub success_threshold: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_steps_per_episode: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub assistant: Option<AssistantConfig>,
}

fn default_threshold() -> f64 {
    1.0
}

impl StageConfig {
    pub fn id(&self) -> &str {
        match self {
            StageConfig::Instruction(s) => &s.id,
            StageConfig::Feedback(s) => &s.id,
            StageConfig::Environment(s) => &s.id,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            StageConfig::Instruction(_) => "instruction",
            StageConfig::Feedback(_) => "feedback",
            StageConfig::Environment(_) => "environment",
        }
    }
}

impl EnvironmentStage {
    /// Decoded parameters with the stage's step cap applied.
    pub fn resolve_params(&self) -> Result<EnvParams, EnvError> {
        Ok(EnvParams::from_value(&self.env, &self.params)?
            .with_step_cap(self.max_steps_per_episode))
    }
}

/// One problem found by [`validate_definition`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Issue {
    pub stage_id: Option<String>,
    /// Dotted path of the offending field, e.g. `stages[1].params.goal`.
    pub path: String,
    pub message: String,
}

impl fmt::Display for Issue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.stage_id {
            Some(id) => write!(f, "{} (stage `{id}`): {}", self.path, self.message),
            None => write!(f, "{}: {}", self.path, self.message),
        }
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot parse experiment config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("cannot serialize experiment config: {0}")]
    Serialize(#[from] toml::ser::Error),
    #[error("experiment config has {} issue(s): {}", .0.len(), .0.iter().map(|i| i.to_string()).collect::<Vec<_>>().join("; "))]
    Invalid(Vec<Issue>),
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

impl ExperimentDefinition {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        Ok(toml::from_str(text)?)
    }

    pub fn to_toml_string(&self) -> Result<String, ConfigError> {
        Ok(toml::to_string(self)?)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml_str(&text)
    }
}

const ADVISOR_KINDS: [&str; 2] = ["scripted", "remote"];

/// Lists every problem with a definition; empty means it can be served.
pub fn validate_definition(def: &ExperimentDefinition) -> Vec<Issue> {
    let mut issues = Vec::new();
    let top = |path: &str, message: &str| Issue {
        stage_id: None,
        path: path.to_string(),
        message: message.to_string(),
    };
    if def.experiment_id.trim().is_empty() {
        issues.push(top("experiment_id", "must not be empty"));
    }
    if def.version == 0 {
        issues.push(top("version", "must be at least 1"));
    }
    match (def.stages.is_empty(), def.conditions.is_empty()) {
        (true, true) => issues.push(top("stages", "experiment has no stages")),
        (false, false) => issues.push(top(
            "conditions",
            "use either a top-level stage list or conditions, not both",
        )),
        _ => {}
    }
    validate_stage_list(&def.stages, "stages", &mut issues);
    let mut condition_ids = BTreeSet::new();
    for (ci, cond) in def.conditions.iter().enumerate() {
        if !condition_ids.insert(cond.id.as_str()) {
            issues.push(top(
                &format!("conditions[{ci}].id"),
                "duplicate condition id",
            ));
        }
        if cond.stages.is_empty() {
            issues.push(top(
                &format!("conditions[{ci}].stages"),
                "condition has no stages",
            ));
        }
        validate_stage_list(
            &cond.stages,
            &format!("conditions[{ci}].stages"),
            &mut issues,
        );
    }
    issues
}

fn validate_stage_list(stages: &[StageConfig], prefix: &str, issues: &mut Vec<Issue>) {
    let mut ids = BTreeSet::new();
    for (i, stage) in stages.iter().enumerate() {
        let base = format!("{prefix}[{i}]");
        let mut push = |field: &str, message: String| {
            issues.push(Issue {
                stage_id: Some(stage.id().to_string()),
                path: if field.is_empty() {
                    base.clone()
                } else {
                    format!("{base}.{field}")
                },
                message,
            })
        };
        if stage.id().is_empty() {
            push("id", "empty stage id".into());
        }
        if !ids.insert(stage.id()) {
            push("id", format!("duplicate stage id `{}`", stage.id()));
        }
        match stage {
            StageConfig::Instruction(_) => {}
            StageConfig::Feedback(f) => {
                for (path, message) in f.questions.problems() {
                    push(&path, message);
                }
            }
            StageConfig::Environment(e) => {
                if !env::is_registered(&e.env) {
                    push(
                        "env",
                        format!(
                            "unknown environment kind `{}` (registered: {})",
                            e.env,
                            env::KINDS.join(", ")
                        ),
                    );
                } else if let Err(err) = EnvParams::from_value(&e.env, &e.params) {
                    match err {
                        EnvError::Config { field, reason } => {
                            push(&format!("params.{field}"), reason)
                        }
                        other => push("params", other.to_string()),
                    }
                }
                if e.max_episodes == 0 {
                    push("max_episodes", "must be at least 1".into());
                }
                if e.min_successes > e.max_episodes {
                    push(
                        "min_successes",
                        format!(
                            "min_successes ({}) exceeds max_episodes ({})",
                            e.min_successes, e.max_episodes
                        ),
                    );
                }
                if !e.success_threshold.is_finite() {
                    push("success_threshold", "must be finite".into());
                }
                if e.max_steps_per_episode == Some(0) {
                    push("max_steps_per_episode", "must be positive".into());
                }
                if let Some(a) = &e.assistant {
                    if !ADVISOR_KINDS.contains(&a.advisor.as_str()) {
                        push(
                            "assistant.advisor",
                            format!("unknown advisor `{}`", a.advisor),
                        );
                    }
                    if a.advisor == "remote" && a.endpoint.is_none() {
                        push(
                            "assistant.endpoint",
                            "remote advisor needs an endpoint".into(),
                        );
                    }
                    if a.deadline_ms == 0 {
                        push("assistant.deadline_ms", "must be positive".into());
                    }
                }
            }
        }
    }
}

/// A validated definition with environment parameters decoded once.
#[derive(Debug, Clone)]
pub struct Experiment {
    definition: ExperimentDefinition,
    /// Per condition (a single entry when the definition has none), per stage.
    params: Vec<Vec<Option<EnvParams>>>,
}

const CONDITION_LABEL: u64 = 0xC0_4D17;

impl Experiment {
    pub fn new(definition: ExperimentDefinition) -> Result<Self, ConfigError> {
        let issues = validate_definition(&definition);
        if !issues.is_empty() {
            return Err(ConfigError::Invalid(issues));
        }
        let lists: Vec<&[StageConfig]> = if definition.conditions.is_empty() {
            vec![&definition.stages]
        } else {
            definition
                .conditions
                .iter()
                .map(|c| c.stages.as_slice())
                .collect()
        };
        let params = lists
            .iter()
            .map(|stages| {
                stages
                    .iter()
                    .map(|s| match s {
                        StageConfig::Environment(e) => Some(e.resolve_params().expect("validated")),
                        _ => None,
                    })
                    .collect()
            })
            .collect();
        Ok(Self { definition, params })
    }

    pub fn definition(&self) -> &ExperimentDefinition {
        &self.definition
    }

    pub fn id(&self) -> &str {
        &self.definition.experiment_id
    }

    pub fn version(&self) -> u32 {
        self.definition.version
    }

    /// Condition a session with this seed is assigned to, if the definition
    /// has conditions.
    pub fn assign_condition(&self, seed: u64) -> Option<u32> {
        let n = self.definition.conditions.len() as u64;
        (n > 0).then(|| Rng::new(seed).split(CONDITION_LABEL).stream().below(n) as u32)
    }

    pub fn stages(&self, condition: Option<u32>) -> &[StageConfig] {
        match condition {
            Some(c) => &self.definition.conditions[c as usize].stages,
            None => &self.definition.stages,
        }
    }

    pub fn env_params(&self, condition: Option<u32>, stage: u32) -> Option<&EnvParams> {
        self.params[condition.unwrap_or(0) as usize]
            .get(stage as usize)
            .and_then(|p| p.as_ref())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const DOC: &str = r#"
experiment_id = "demo"
version = 1
title = "Demo"

[[stages]]
kind = "instruction"
id = "welcome"
body = "Use the arrow keys."

[[stages]]
kind = "environment"
id = "maze"
env = "gridnav"
max_episodes = 3
min_successes = 2
[stages.params]
width = 5
height = 5
goal = [0, 4]
start = { fixed = [2, 2] }

[[stages]]
kind = "feedback"
id = "survey"
[[stages.questions]]
id = "helpful"
prompt = "How helpful was the AI?"
input = { kind = "likert", min = 1, max = 5 }
"#;

    #[test]
    fn parses_and_validates() {
        let def = ExperimentDefinition::from_toml_str(DOC).unwrap();
        assert_eq!(def.stages.len(), 3);
        assert!(validate_definition(&def).is_empty());
        let exp = Experiment::new(def).unwrap();
        assert!(exp.env_params(None, 1).is_some());
        assert!(exp.env_params(None, 0).is_none());
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let bad = DOC.replace("title = \"Demo\"", "titel = \"Demo\"");
        assert!(ExperimentDefinition::from_toml_str(&bad).is_err());
        let bad = DOC.replace("body = \"Use", "colour = 1\nbody = \"Use");
        assert!(ExperimentDefinition::from_toml_str(&bad).is_err());
    }

    #[test]
    fn env_kind_typo_names_stage_and_field() {
        let def = ExperimentDefinition::from_toml_str(&DOC.replace("\"gridnav\"", "\"gridnavv\""))
            .unwrap();
        let issues = validate_definition(&def);
        assert_eq!(issues.len(), 1);
        assert_eq!(issues[0].stage_id.as_deref(), Some("maze"));
        assert_eq!(issues[0].path, "stages[1].env");
    }

    #[test]
    fn min_successes_bound() {
        let text = DOC.replace("min_successes = 2", "min_successes = 5");
        let issues = validate_definition(&ExperimentDefinition::from_toml_str(&text).unwrap());
        assert_eq!(issues.len(), 1);
        assert_eq!(issues[0].path, "stages[1].min_successes");
    }

    #[test]
    fn bad_params_carry_field_path() {
        let text = DOC.replace("goal = [0, 4]", "goal = [9, 9]");
        let issues = validate_definition(&ExperimentDefinition::from_toml_str(&text).unwrap());
        assert_eq!(issues[0].path, "stages[1].params.goal");
    }

    #[test]
    fn serialize_round_trip() {
        let def = ExperimentDefinition::from_toml_str(DOC).unwrap();
        let text = def.to_toml_string().unwrap();
        assert_eq!(ExperimentDefinition::from_toml_str(&text).unwrap(), def);
    }

    #[test]
    fn condition_assignment_is_seed_deterministic() {
        let mut def = ExperimentDefinition::from_toml_str(DOC).unwrap();
        let stages = std::mem::take(&mut def.stages);
        def.conditions = (0..3)
            .map(|i| Condition {
                id: format!("c{i}"),
                stages: stages.clone(),
            })
            .collect();
        let exp = Experiment::new(def).unwrap();
        let mut counts = [0; 3];
        for seed in 0..300 {
            let c = exp.assign_condition(seed).unwrap();
            assert_eq!(exp.assign_condition(seed), Some(c));
            counts[c as usize] += 1;
        }
        assert!(counts.iter().all(|&n| n > 60), "{counts:?}");
    }
}
