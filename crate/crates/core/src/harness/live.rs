//! Live replay adapter: a single chat-completion request per prompt
//! against an OpenAI-compatible endpoint.
//!
//! Strictly advisory. Every failure mode (transport, HTTP status,
//! malformed body) is recorded as an outcome rather than raised, so a
//! flaky endpoint can never abort a campaign. The API key comes from the
//! `KROPFORGE_API_KEY` environment variable and is never taken on the
//! command line.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::resolver::MatchPolicy;

pub const API_KEY_ENV: &str = "KROPFORGE_API_KEY";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LiveConfig {
    /// Base URL; `/v1/chat/completions` is appended.
    pub endpoint: String,
    pub model: String,
    #[serde(default)]
    pub temperature: f64,
    /// How the reply is compared to the payload; live models tend to wrap
    /// answers in prose, so containment is the default.
    #[serde(default = "default_live_policy")]
    pub match_policy: MatchPolicy,
}

fn default_live_policy() -> MatchPolicy {
    MatchPolicy::Contains
}

impl LiveConfig {
    pub fn new(endpoint: String, model: String) -> Self {
        LiveConfig {
            endpoint,
            model,
            temperature: 0.0,
            match_policy: default_live_policy(),
        }
    }
}

/// What a live replay produced.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LiveOutcome {
    Responded { response: String, matched: bool },
    TransportError { detail: String },
    HttpError { status: u16, detail: String },
    MalformedResponse { detail: String },
}

fn truncate(text: &str, limit: usize) -> String {
    if text.len() <= limit {
        return text.to_string();
    }
    let mut end = limit;
    while !text.is_char_boundary(end) {
        end -= 1;
    }
    format!("{}…", &text[..end])
}

/// Sends the prompt as a single user message at the configured
/// temperature and compares the first choice's content to the payload
/// under the configured match policy.
pub fn live_submit(prompt: &str, payload_text: &str, config: &LiveConfig) -> LiveOutcome {
    let client = match reqwest::blocking::Client::builder()
        .connect_timeout(Duration::from_secs(5))
        .timeout(Duration::from_secs(30))
        .build()
    {
        Ok(client) => client,
        Err(err) => {
            return LiveOutcome::TransportError {
                detail: err.to_string(),
            }
        }
    };

    let url = format!(
        "{}/v1/chat/completions",
        config.endpoint.trim_end_matches('/')
    );
    // integral temperatures serialize as integers to match the wire format
    let temperature = if config.temperature.fract() == 0.0 {
        json!(config.temperature as i64)
    } else {
        json!(config.temperature)
    };
    let body = json!({
        "model": config.model,
        "temperature": temperature,
        "messages": [{"role": "user", "content": prompt}],
    });

    let mut request = client.post(&url).json(&body);
    if let Ok(key) = std::env::var(API_KEY_ENV) {
        request = request.bearer_auth(key);
    }

    let response = match request.send() {
        Ok(response) => response,
        Err(err) => {
            return LiveOutcome::TransportError {
                detail: err.to_string(),
            }
        }
    };

    let status = response.status();
    let text = match response.text() {
        Ok(text) => text,
        Err(err) => {
            return LiveOutcome::TransportError {
                detail: err.to_string(),
            }
        }
    };
    if !status.is_success() {
        return LiveOutcome::HttpError {
            status: status.as_u16(),
            detail: truncate(&text, 200),
        };
    }

    let parsed: serde_json::Value = match serde_json::from_str(&text) {
        Ok(parsed) => parsed,
        Err(err) => {
            return LiveOutcome::MalformedResponse {
                detail: format!("{err}: {}", truncate(&text, 200)),
            }
        }
    };
    let content = parsed
        .get("choices")
        .and_then(|c| c.get(0))
        .and_then(|c| c.get("message"))
        .and_then(|m| m.get("content"))
        .and_then(|c| c.as_str());
    match content {
        Some(content) => LiveOutcome::Responded {
            matched: config.match_policy.compare(content, payload_text),
            response: content.to_string(),
        },
        None => LiveOutcome::MalformedResponse {
            detail: format!("no message content in {}", truncate(&text, 200)),
        },
    }
}
