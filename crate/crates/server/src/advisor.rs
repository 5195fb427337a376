//! Advisor over HTTP: posts the state description and transcript as JSON and
//! expects `{"text": ...}` back.

use std::collections::HashMap;
use std::sync::Arc;

use async_trait::async_trait;
use parking_lot::Mutex;
use webrl_core::assistant::{
    Advisor, AdvisorError, AssistantConfig, ChatMessage, RemoteRequest, RemoteResponse,
    ScriptedAdvisor, StateDescription,
};

pub struct RemoteAdvisor {
    client: reqwest::Client,
    endpoint: String,
    token: Option<String>,
    model: Option<String>,
}

impl RemoteAdvisor {
    pub fn new(endpoint: impl Into<String>, token: Option<String>, model: Option<String>) -> Self {
        Self {
            client: reqwest::Client::new(),
            endpoint: endpoint.into(),
            token,
            model,
        }
    }
}

#[async_trait]
impl Advisor for RemoteAdvisor {
    async fn advise(
        &self,
        description: &StateDescription,
        transcript: &[ChatMessage],
    ) -> Result<String, AdvisorError> {
        let body = RemoteRequest::new(self.model.clone(), description, transcript);
        let mut req = self.client.post(&self.endpoint).json(&body);
        if let Some(t) = &self.token {
            req = req.bearer_auth(t);
        }
        let resp = req.send().await.map_err(|e| AdvisorError(e.to_string()))?;
        let status = resp.status();
        if !status.is_success() {
            return Err(AdvisorError(format!("endpoint answered {status}")));
        }
        let reply: RemoteResponse = resp.json().await.map_err(|e| AdvisorError(e.to_string()))?;
        if reply.text.trim().is_empty() {
            return Err(AdvisorError("empty reply".into()));
        }
        Ok(reply.text)
    }
}

/// Builds advisors from stage configs, reusing one per distinct config.
#[derive(Default)]
pub struct Advisors {
    cache: Mutex<HashMap<String, Arc<dyn Advisor>>>,
}

impl Advisors {
    pub fn get(&self, config: &AssistantConfig) -> Arc<dyn Advisor> {
        let key = serde_json::to_string(config).unwrap_or_default();
        self.cache
            .lock()
            .entry(key)
            .or_insert_with(|| match config.advisor.as_str() {
                "remote" => {
                    let token = config
                        .token_env
                        .as_deref()
                        .and_then(|v| std::env::var(v).ok());
                    Arc::new(RemoteAdvisor::new(
                        config.endpoint.clone().unwrap_or_default(),
                        token,
                        config.model.clone(),
                    ))
                }
                _ => Arc::new(ScriptedAdvisor::default()),
            })
            .clone()
    }
}
