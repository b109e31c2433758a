use std::collections::{HashMap, VecDeque};
use std::sync::{LazyLock, Mutex};
use std::time::Duration;

use rand::Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{ChatMessage, Role};
use crate::error::{Error, Result};
use crate::seed;

/// A chat-completion backend: messages in, assistant text out.
pub trait ChatCompletion: Send + Sync {
    fn complete(&self, messages: &[ChatMessage]) -> Result<String>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChatClientConfig {
    pub base_url: String,
    pub model: String,
    /// Name of the environment variable holding the bearer token.
    pub api_key_env: String,
    pub timeout_secs: f64,
    pub max_concurrency: usize,
    pub temperature: f64,
    pub max_retries: usize,
    pub backoff_ms: u64,
    /// Log request and response bodies at debug level.
    pub log_bodies: bool,
}

impl Default for ChatClientConfig {
    fn default() -> Self {
        Self {
            base_url: "http://localhost:8000/v1".into(),
            model: "teacher".into(),
            api_key_env: "OPENAI_API_KEY".into(),
            timeout_secs: 120.0,
            max_concurrency: 4,
            temperature: 0.7,
            max_retries: 3,
            backoff_ms: 500,
            log_bodies: false,
        }
    }
}

impl ChatClientConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.timeout_secs > 0.0 && self.timeout_secs.is_finite()) {
            return Err(Error::Config(format!(
                "timeout must be positive, got {}",
                self.timeout_secs
            )));
        }
        if self.max_concurrency == 0 {
            return Err(Error::Config("max_concurrency must be at least 1".into()));
        }
        Ok(())
    }
}

/// OpenAI-compatible `POST {base_url}/chat/completions` client.
pub struct HttpChatClient {
    cfg: ChatClientConfig,
    http: reqwest::blocking::Client,
    token: Option<String>,
}

impl HttpChatClient {
    pub fn new(cfg: ChatClientConfig) -> Result<Self> {
        cfg.validate()?;
        let token = std::env::var(&cfg.api_key_env).ok().filter(|t| !t.is_empty());
        if token.is_none() {
            log::warn!(
                "environment variable {} is unset; sending requests without authorization",
                cfg.api_key_env
            );
        }
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs_f64(cfg.timeout_secs))
            .build()
            .map_err(|e| Error::Client(e.to_string()))?;
        Ok(Self { cfg, http, token })
    }

    fn endpoint(&self) -> String {
        format!("{}/chat/completions", self.cfg.base_url.trim_end_matches('/'))
    }

    fn attempt(&self, body: &Value) -> std::result::Result<String, (bool, String)> {
        let mut req = self.http.post(self.endpoint()).json(body);
        if let Some(t) = &self.token {
            req = req.bearer_auth(t);
        }
        let resp = req.send().map_err(|e| (true, e.to_string()))?;
        let status = resp.status();
        let text = resp.text().map_err(|e| (true, e.to_string()))?;
        if self.cfg.log_bodies {
            log::debug!("response {status}: {text}");
        }
        if !status.is_success() {
            let retry = status.as_u16() == 429 || status.is_server_error();
            return Err((retry, format!("HTTP {status}: {text}")));
        }
        let v: Value = serde_json::from_str(&text).map_err(|e| (false, e.to_string()))?;
        v.pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| (false, "response has no choices[0].message.content".into()))
    }
}

impl ChatCompletion for HttpChatClient {
    fn complete(&self, messages: &[ChatMessage]) -> Result<String> {
        let body = json!({
            "model": self.cfg.model,
            "messages": messages,
            "temperature": self.cfg.temperature,
        });
        if self.cfg.log_bodies {
            // The token travels only in the Authorization header, never in the body.
            log::debug!("request to {}: {body}", self.endpoint());
        }
        let mut last = String::new();
        for attempt in 0..=self.cfg.max_retries {
            match self.attempt(&body) {
                Ok(text) => return Ok(text),
                Err((retry, msg)) => {
                    last = msg;
                    if !retry || attempt == self.cfg.max_retries {
                        break;
                    }
                    let wait = self.cfg.backoff_ms.saturating_mul(1 << attempt.min(16));
                    log::info!("chat request failed ({last}); retrying in {wait} ms");
                    std::thread::sleep(Duration::from_millis(wait));
                }
            }
        }
        Err(Error::Client(last))
    }
}

/// Returns canned responses in order and records every request.
#[derive(Debug, Default)]
pub struct ScriptedClient {
    responses: Mutex<VecDeque<Result<String, String>>>,
    requests: Mutex<Vec<Vec<ChatMessage>>>,
}

impl ScriptedClient {
    pub fn new<S: Into<String>>(responses: impl IntoIterator<Item = S>) -> Self {
        Self {
            responses: Mutex::new(responses.into_iter().map(|s| Ok(s.into())).collect()),
            requests: Mutex::default(),
        }
    }

    /// Queue a transport failure.
    pub fn push_error(&self, message: impl Into<String>) {
        self.responses.lock().expect("lock").push_back(Err(message.into()));
    }

    pub fn requests(&self) -> Vec<Vec<ChatMessage>> {
        self.requests.lock().expect("lock").clone()
    }
}

impl ChatCompletion for ScriptedClient {
    fn complete(&self, messages: &[ChatMessage]) -> Result<String> {
        self.requests.lock().expect("lock").push(messages.to_vec());
        match self.responses.lock().expect("lock").pop_front() {
            Some(Ok(s)) => Ok(s),
            Some(Err(e)) => Err(Error::Client(e)),
            None => Err(Error::Client("scripted responses exhausted".into())),
        }
    }
}

static DISCLOSED: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"The correct answer is Candidate (\d+)").expect("valid regex"));
static CANDIDATE_LINE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?m)^Candidate (\d+): .*\nCategories: (.*)$").expect("valid regex"));
static HISTORY_SID: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?m)^Item SID: (.*)$").expect("valid regex"));
static HISTORY_CATEGORY: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?m)^Item SID: .*\nTitle: .*\nCategories: (.*)$").expect("valid regex")
});

/// Offline teacher. It answers targeted prompts with the disclosed
/// candidate and rejection prompts with a uniformly drawn candidate, citing
/// history SIDs from the prompt. Draws depend on the seed, the prompt text
/// and how often that prompt has been asked, so runs are reproducible
/// regardless of scheduling.
#[derive(Debug)]
pub struct MockTeacher {
    seed: u64,
    calls: Mutex<HashMap<u64, u64>>,
}

impl MockTeacher {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            calls: Mutex::default(),
        }
    }

    fn respond(&self, prompt: &str) -> Result<String> {
        let candidates: Vec<(usize, String)> = CANDIDATE_LINE
            .captures_iter(prompt)
            .filter_map(|c| Some((c[1].parse().ok()?, c[2].trim().to_string())))
            .collect();
        if candidates.is_empty() {
            return Err(Error::Client("mock teacher found no candidates in the prompt".into()));
        }
        let choice = match DISCLOSED.captures(prompt) {
            Some(c) => c[1].parse::<usize>().map_err(|e| Error::Client(e.to_string()))?,
            None => {
                let key = seed::stable_hash(prompt);
                let call = {
                    let mut calls = self.calls.lock().expect("lock");
                    let n = calls.entry(key).or_insert(0);
                    *n += 1;
                    *n
                };
                let mut rng = seed::rng(seed::derive(self.seed ^ key, &format!("call-{call}")));
                candidates[rng.random_range(0..candidates.len())].0
            }
        };
        let sids: Vec<&str> = HISTORY_SID
            .captures_iter(prompt)
            .map(|c| c.get(1).expect("group").as_str())
            .collect();
        let cats: Vec<&str> = HISTORY_CATEGORY
            .captures_iter(prompt)
            .map(|c| c.get(1).expect("group").as_str())
            .collect();
        let first = sids.first().copied().unwrap_or("the earliest item");
        let last = sids.last().copied().unwrap_or("the latest item");
        let broad = cats
            .first()
            .and_then(|c| c.split(" > ").next())
            .unwrap_or("General");
        let recent_cat = cats.last().copied().unwrap_or(broad);
        let chosen_cat = candidates
            .iter()
            .find(|(i, _)| *i == choice)
            .map(|(_, c)| c.as_str())
            .unwrap_or(recent_cat);
        Ok(format!(
            "Step 1 Reasoning: \"Looking at the purchase history, {first} and {last} show where the user spends.\"\n\
             Step 1 Category: \"{broad}\"\n\
             Step 2 Reasoning: \"The recent purchase of {last} points to {recent_cat}.\"\n\
             Step 2 Category: \"{recent_cat}\"\n\
             Step 3 Reasoning: \"Based on their pattern, Candidate {choice} would naturally complement their existing items.\"\n\
             Step 3 Category: \"{chosen_cat}\"\n\
             Prediction: Candidate {choice}"
        ))
    }
}

impl ChatCompletion for MockTeacher {
    fn complete(&self, messages: &[ChatMessage]) -> Result<String> {
        let prompt = messages
            .iter()
            .find(|m| m.role == Role::User)
            .ok_or_else(|| Error::Client("no user message".into()))?;
        self.respond(&prompt.content)
    }
}
