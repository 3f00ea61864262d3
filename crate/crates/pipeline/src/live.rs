//! Client for chat-completions style HTTP endpoints.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::client::{ClientError, ClientRequest, MllmClient, Role};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LiveBinding {
    /// Full URL of the chat-completions endpoint.
    pub endpoint: String,
    pub model: String,
    /// Environment variable holding the bearer token; none sends no header.
    #[serde(default)]
    pub api_key_env: Option<String>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
}

fn default_timeout() -> u64 {
    120
}

pub struct LiveClient {
    role: Role,
    binding: LiveBinding,
    api_key: Option<String>,
    http: reqwest::blocking::Client,
}

impl std::fmt::Debug for LiveClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LiveClient")
            .field("role", &self.role)
            .field("binding", &self.binding)
            .finish()
    }
}

impl LiveClient {
    pub fn new(role: Role, binding: LiveBinding) -> Result<Self, ClientError> {
        let transport = |detail: String| ClientError::Transport { role, detail };
        let api_key = match &binding.api_key_env {
            Some(var) => Some(std::env::var(var).map_err(|_| transport(format!("environment variable {var} is not set")))?),
            None => None,
        };
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(binding.timeout_secs))
            .build()
            .map_err(|e| transport(e.to_string()))?;
        Ok(Self {
            role,
            binding,
            api_key,
            http,
        })
    }

    fn body(&self, req: &ClientRequest) -> Value {
        let mut content = vec![json!({"type": "text", "text": req.prompt.text})];
        for uri in &req.images {
            content.push(json!({"type": "image_url", "image_url": {"url": uri}}));
        }
        json!({
            "model": self.binding.model,
            "temperature": 0,
            "messages": [{"role": "user", "content": content}],
        })
    }
}

impl MllmClient for LiveClient {
    fn role(&self) -> Role {
        self.role
    }

    fn deterministic(&self) -> bool {
        false
    }

    fn call(&self, req: &ClientRequest) -> Result<String, ClientError> {
        let transport = |detail: String| ClientError::Transport { role: self.role, detail };
        let mut builder = self.http.post(&self.binding.endpoint).json(&self.body(req));
        if let Some(key) = &self.api_key {
            builder = builder.bearer_auth(key);
        }
        let resp = builder.send().map_err(|e| transport(e.to_string()))?;
        let status = resp.status();
        let text = resp.text().map_err(|e| transport(e.to_string()))?;
        if !status.is_success() {
            return Err(transport(format!("HTTP {status}: {text}")));
        }
        let v: Value = serde_json::from_str(&text).map_err(|e| ClientError::Parse {
            role: self.role,
            detail: e.to_string(),
            raw: text.clone(),
        })?;
        v.pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| ClientError::Parse {
                role: self.role,
                detail: "no choices[0].message.content".into(),
                raw: text,
            })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompts::PromptInstance;
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;

    /// Answers one request with `body` and returns the request it saw.
    fn serve_once(status: &'static str, body: &'static str) -> (String, std::thread::JoinHandle<String>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/v1/chat/completions", listener.local_addr().unwrap());
        let handle = std::thread::spawn(move || {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut head = String::new();
            let mut len = 0;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap();
                }
                head.push_str(&line);
                if line == "\r\n" {
                    break;
                }
            }
            let mut body_in = vec![0; len];
            reader.read_exact(&mut body_in).unwrap();
            let mut stream = stream;
            write!(
                stream,
                "HTTP/1.1 {status}\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
                body.len()
            )
            .unwrap();
            head + &String::from_utf8(body_in).unwrap()
        });
        (url, handle)
    }

    fn request() -> ClientRequest {
        ClientRequest {
            prompt: PromptInstance {
                template_id: "pair_check".into(),
                version: "v1".into(),
                text: "question".into(),
            },
            images: vec!["https://img/a.png".into()],
            inputs: Default::default(),
        }
    }

    fn binding(url: String) -> LiveBinding {
        LiveBinding {
            endpoint: url,
            model: "m".into(),
            api_key_env: None,
            timeout_secs: 10,
        }
    }

    #[test]
    fn posts_prompt_and_images() {
        let (url, h) = serve_once("200 OK", r#"{"choices":[{"message":{"content":"Yes. No. Yes."}}]}"#);
        let c = LiveClient::new(Role::PairChecker, binding(url)).unwrap();
        assert_eq!(c.call(&request()).unwrap(), "Yes. No. Yes.");
        let seen = h.join().unwrap();
        assert!(seen.starts_with("POST /v1/chat/completions"));
        assert!(seen.contains("https://img/a.png") && seen.contains("\"question\""));
    }

    #[test]
    fn surfaces_http_errors() {
        let (url, h) = serve_once("500 Internal Server Error", r#"{"error":"boom"}"#);
        let c = LiveClient::new(Role::Refiner, binding(url)).unwrap();
        assert!(matches!(c.call(&request()), Err(ClientError::Transport { .. })));
        h.join().unwrap();
    }

    #[test]
    fn missing_credential_variable() {
        let mut b = binding("http://127.0.0.1:9".into());
        b.api_key_env = Some("CIRLAB_TEST_UNSET_VARIABLE".into());
        assert!(LiveClient::new(Role::Compressor, b).is_err());
    }
}
