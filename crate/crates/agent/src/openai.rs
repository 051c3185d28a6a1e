//! Backend for endpoints speaking the chat-completions wire protocol.

use std::time::Duration;

use log::warn;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::gateway::{ChatBackend, ChatRequest, Completion, GatewayError, Usage};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OpenAiConfig {
    /// Full chat-completions URL.
    pub url: String,
    pub model: String,
    /// Environment variable holding the bearer token.
    pub api_key_env: String,
    pub timeout_secs: u64,
}

impl Default for OpenAiConfig {
    fn default() -> Self {
        Self {
            url: "https://api.openai.com/v1/chat/completions".into(),
            model: "gpt-4o-mini".into(),
            api_key_env: "OPENAI_API_KEY".into(),
            timeout_secs: 120,
        }
    }
}

pub struct OpenAiBackend {
    config: OpenAiConfig,
    api_key: Option<String>,
    agent: ureq::Agent,
}

impl OpenAiBackend {
    pub fn new(config: OpenAiConfig) -> Self {
        let api_key = std::env::var(&config.api_key_env).ok().filter(|k| !k.is_empty());
        if api_key.is_none() {
            warn!("{} is not set; sending unauthenticated requests", config.api_key_env);
        }
        let agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs(config.timeout_secs.max(1))))
            .build()
            .into();
        Self { config, api_key, agent }
    }

    fn body(&self, request: &ChatRequest<'_>) -> Value {
        let messages: Vec<Value> = request
            .messages
            .iter()
            .map(|m| json!({"role": m.role.as_str(), "content": m.content}))
            .collect();
        let mut body = json!({
            "model": self.config.model,
            "messages": messages,
            "temperature": request.decoding.temperature,
            "max_tokens": request.decoding.max_output_tokens,
        });
        if let Some(seed) = request.decoding.seed {
            body["seed"] = json!(seed);
        }
        body
    }
}

pub fn classify_status(status: u16, body: &str) -> GatewayError {
    let lower = body.to_ascii_lowercase();
    if lower.contains("context_length") || lower.contains("maximum context") || lower.contains("context length") {
        return GatewayError::ContextTooLong(truncate(body));
    }
    match status {
        429 => GatewayError::RateLimited(truncate(body)),
        500..=599 => GatewayError::EndpointUnavailable(format!("status {status}: {}", truncate(body))),
        _ => GatewayError::Rejected {
            status,
            body: truncate(body),
        },
    }
}

fn truncate(body: &str) -> String {
    body.chars().take(500).collect()
}

pub fn parse_completion(body: &Value) -> Result<Completion, GatewayError> {
    let text = body["choices"][0]["message"]["content"]
        .as_str()
        .ok_or_else(|| GatewayError::BadResponse("missing choices[0].message.content".into()))?
        .to_string();
    let usage = match (
        body["usage"]["prompt_tokens"].as_u64(),
        body["usage"]["completion_tokens"].as_u64(),
    ) {
        (Some(p), Some(c)) => Some(Usage {
            prompt_tokens: p,
            completion_tokens: c,
            estimated: false,
        }),
        _ => None,
    };
    Ok(Completion { text, usage })
}

impl ChatBackend for OpenAiBackend {
    fn model(&self) -> &str {
        &self.config.model
    }

    fn complete(&self, request: &ChatRequest<'_>) -> Result<Completion, GatewayError> {
        let mut req = self.agent.post(&self.config.url).header("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut response = req
            .send_json(self.body(request))
            .map_err(|e| GatewayError::EndpointUnavailable(e.to_string()))?;
        let status = response.status().as_u16();
        let text = response
            .body_mut()
            .read_to_string()
            .map_err(|e| GatewayError::EndpointUnavailable(e.to_string()))?;
        if !(200..300).contains(&status) {
            return Err(classify_status(status, &text));
        }
        let value: Value = serde_json::from_str(&text).map_err(|e| GatewayError::BadResponse(e.to_string()))?;
        parse_completion(&value)
    }
}

#[cfg(test)]
mod tests {
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;
    use std::thread;

    use super::*;
    use crate::gateway::{ChatMessage, ConversationKey, DecodingConfig, Gateway, RetryPolicy};

    /// Serves one canned HTTP response per entry, returning request bodies.
    fn serve(responses: Vec<(u16, String)>) -> (String, thread::JoinHandle<Vec<String>>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/v1/chat/completions", listener.local_addr().unwrap());
        let handle = thread::spawn(move || {
            let mut bodies = Vec::new();
            for (status, body) in responses {
                let (stream, _) = listener.accept().unwrap();
                let mut reader = BufReader::new(stream);
                let mut len = 0usize;
                loop {
                    let mut line = String::new();
                    reader.read_line(&mut line).unwrap();
                    if line == "\r\n" || line.is_empty() {
                        break;
                    }
                    if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                        len = v.trim().parse().unwrap();
                    }
                }
                let mut buf = vec![0u8; len];
                reader.read_exact(&mut buf).unwrap();
                bodies.push(String::from_utf8(buf).unwrap());
                let mut stream = reader.into_inner();
                write!(
                    stream,
                    "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                    body.len()
                )
                .unwrap();
            }
            bodies
        });
        (url, handle)
    }

    fn backend(url: String) -> OpenAiBackend {
        OpenAiBackend::new(OpenAiConfig {
            url,
            model: "test-model".into(),
            api_key_env: "TKGQA_TEST_UNSET_KEY".into(),
            timeout_secs: 5,
        })
    }

    #[test]
    fn round_trip_with_usage_and_retry() {
        let ok = r#"{"choices":[{"message":{"role":"assistant","content":"<answer>A</answer>"}}],"usage":{"prompt_tokens":11,"completion_tokens":3}}"#;
        let (url, server) = serve(vec![(503, "busy".into()), (200, ok.into())]);
        let g = Gateway::new(backend(url)).with_retry(RetryPolicy::immediate());
        let decoding = DecodingConfig {
            seed: Some(7),
            ..DecodingConfig::default()
        };
        let out = g
            .chat(&ConversationKey::new("q", "0"), &[ChatMessage::system("s"), ChatMessage::user("u")], &decoding)
            .unwrap();
        assert_eq!(out, "<answer>A</answer>");
        let t = g.totals();
        assert_eq!((t.prompt_tokens, t.completion_tokens, t.estimated_calls), (11, 3, 0));
        let bodies = server.join().unwrap();
        let sent: Value = serde_json::from_str(&bodies[1]).unwrap();
        assert_eq!(sent["model"], "test-model");
        assert_eq!(sent["messages"][1]["role"], "user");
        assert_eq!(sent["temperature"], 1.0);
        assert_eq!(sent["seed"], 7);
    }

    #[test]
    fn status_classification() {
        assert!(matches!(classify_status(429, ""), GatewayError::RateLimited(_)));
        assert!(matches!(classify_status(502, ""), GatewayError::EndpointUnavailable(_)));
        assert!(matches!(
            classify_status(400, r#"{"error":{"code":"context_length_exceeded"}}"#),
            GatewayError::ContextTooLong(_)
        ));
        assert!(matches!(classify_status(401, "no"), GatewayError::Rejected { status: 401, .. }));
    }

    #[test]
    fn unreachable_endpoint_is_transient() {
        let b = backend("http://127.0.0.1:9/v1/chat/completions".into());
        let key = ConversationKey::new("q", "0");
        let msgs = [ChatMessage::user("x")];
        let decoding = DecodingConfig::default();
        let err = b
            .complete(&ChatRequest {
                conversation: &key,
                messages: &msgs,
                decoding: &decoding,
            })
            .unwrap_err();
        assert!(err.is_transient());
    }

    #[test]
    fn missing_content_is_bad_response() {
        assert!(matches!(parse_completion(&json!({"choices": []})), Err(GatewayError::BadResponse(_))));
    }
}
