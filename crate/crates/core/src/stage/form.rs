//! Feedback forms and answer validation.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Question {
    pub id: String,
    pub prompt: String,
    pub input: InputKind,
    #[serde(default = "default_required")]
    pub required: bool,
}

fn default_required() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InputKind {
    Likert {
        min: i64,
        max: i64,
        #[serde(default)]
        labels: Vec<String>,
    },
    Radio {
        options: Vec<String>,
    },
    FreeText {
        #[serde(default)]
        max_len: Option<usize>,
    },
    Slider {
        min: f64,
        max: f64,
        step: f64,
    },
}

/// Ordered list of questions shown on one feedback screen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(transparent)]
pub struct FormSchema {
    pub questions: Vec<Question>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AnswerValue {
    Number(f64),
    Text(String),
}

/// An accepted answer, stored together with the prompt it answered.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordedAnswer {
    pub question_id: String,
    pub prompt: String,
    pub value: AnswerValue,
}

/// Per-question problems with a submission.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnswerProblem {
    pub question_id: String,
    pub reason: String,
}

impl FormSchema {
    /// Structural problems with the schema itself, as `(field path, message)`.
    pub fn problems(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        if self.questions.is_empty() {
            out.push(("questions".to_string(), "form has no questions".to_string()));
        }
        let mut seen = BTreeSet::new();
        for (i, q) in self.questions.iter().enumerate() {
            let path = format!("questions[{i}]");
            if q.id.is_empty() {
                out.push((format!("{path}.id"), "empty question id".into()));
            }
            if !seen.insert(q.id.as_str()) {
                out.push((
                    format!("{path}.id"),
                    format!("duplicate question id `{}`", q.id),
                ));
            }
            match &q.input {
                InputKind::Likert { min, max, labels } => {
                    if min >= max {
                        out.push((format!("{path}.input"), "likert requires min < max".into()));
                    } else if !labels.is_empty() && labels.len() as i64 != max - min + 1 {
                        out.push((
                            format!("{path}.input.labels"),
                            format!("expected {} labels", max - min + 1),
                        ));
                    }
                }
                InputKind::Radio { options } => {
                    let unique: BTreeSet<_> = options.iter().collect();
                    if options.is_empty() || unique.len() != options.len() {
                        out.push((
                            format!("{path}.input.options"),
                            "radio needs distinct options".into(),
                        ));
                    }
                }
                InputKind::FreeText { .. } => {}
                InputKind::Slider { min, max, step } => {
                    if min.partial_cmp(max) != Some(std::cmp::Ordering::Less)
                        || step.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater)
                    {
                        out.push((
                            format!("{path}.input"),
                            "slider requires min < max and step > 0".into(),
                        ));
                    }
                }
            }
        }
        out
    }

    /// Checks a submission against the schema. On success returns the
    /// answers in question order.
    pub fn check(
        &self,
        answers: &BTreeMap<String, AnswerValue>,
    ) -> Result<Vec<RecordedAnswer>, Vec<AnswerProblem>> {
        let mut problems = Vec::new();
        let mut recorded = Vec::new();
        for q in &self.questions {
            let Some(value) = answers.get(&q.id) else {
                if q.required {
                    problems.push(AnswerProblem {
                        question_id: q.id.clone(),
                        reason: "missing answer".into(),
                    });
                }
                continue;
            };
            match check_value(&q.input, value) {
                Ok(()) => recorded.push(RecordedAnswer {
                    question_id: q.id.clone(),
                    prompt: q.prompt.clone(),
                    value: value.clone(),
                }),
                Err(reason) => problems.push(AnswerProblem {
                    question_id: q.id.clone(),
                    reason,
                }),
            }
        }
        for id in answers.keys() {
            if !self.questions.iter().any(|q| &q.id == id) {
                problems.push(AnswerProblem {
                    question_id: id.clone(),
                    reason: "no such question".into(),
                });
            }
        }
        if problems.is_empty() {
            Ok(recorded)
        } else {
            Err(problems)
        }
    }
}

fn check_value(input: &InputKind, value: &AnswerValue) -> Result<(), String> {
    match (input, value) {
        (InputKind::Likert { min, max, .. }, AnswerValue::Number(v)) => {
            if v.fract() != 0.0 || *v < *min as f64 || *v > *max as f64 {
                Err(format!("expected an integer in [{min}, {max}]"))
            } else {
                Ok(())
            }
        }
        (InputKind::Radio { options }, AnswerValue::Text(t)) => {
            if options.contains(t) {
                Ok(())
            } else {
                Err(format!("`{t}` is not one of the options"))
            }
        }
        (InputKind::FreeText { max_len }, AnswerValue::Text(t)) => match max_len {
            Some(n) if t.chars().count() > *n => Err(format!("longer than {n} characters")),
            _ => Ok(()),
        },
        (InputKind::Slider { min, max, step }, AnswerValue::Number(v)) => {
            let k = (v - min) / step;
            if !v.is_finite() || v < min || v > max || (k - k.round()).abs() > 1e-9 {
                Err(format!("expected a multiple of {step} in [{min}, {max}]"))
            } else {
                Ok(())
            }
        }
        (_, AnswerValue::Number(_)) => Err("expected text".into()),
        (_, AnswerValue::Text(_)) => Err("expected a number".into()),
    }
}
