use std::collections::BTreeMap;
use std::time::Duration;

use serde_json::{json, Value};

use super::{strip_fixture_key, Backend, BackendError, GatewayError, PromptRequest};

/// JSON-over-HTTP completion backend.
///
/// Sends `{model, prompt, max_tokens, temperature}` and reads the completion
/// from a dotted path into the response body (`choices.0.text`).
#[derive(Debug)]
pub struct HttpBackend {
    endpoint: String,
    model: String,
    api_key_env: Option<String>,
    response_path: Vec<String>,
    temperature: f64,
}

impl HttpBackend {
    pub const DEFAULT_RESPONSE_PATH: &'static str = "choices.0.text";
    pub const DEFAULT_TEMPERATURE: f64 = 0.7;

    pub fn from_config(config: &BTreeMap<String, String>) -> Result<Self, GatewayError> {
        let endpoint = config
            .get("endpoint")
            .filter(|e| !e.is_empty())
            .ok_or_else(|| GatewayError::InvalidConfig("http backend needs an endpoint URL".into()))?;
        if !(endpoint.starts_with("http://") || endpoint.starts_with("https://")) {
            return Err(GatewayError::InvalidConfig(format!(
                "endpoint {endpoint:?} is not an http(s) URL"
            )));
        }
        let temperature = match config.get("temperature") {
            Some(t) => t
                .parse::<f64>()
                .ok()
                .filter(|t| t.is_finite() && *t >= 0.0)
                .ok_or_else(|| GatewayError::InvalidConfig(format!("bad temperature {t:?}")))?,
            None => Self::DEFAULT_TEMPERATURE,
        };
        let path = config
            .get("response_path")
            .map(String::as_str)
            .unwrap_or(Self::DEFAULT_RESPONSE_PATH);
        Ok(Self {
            endpoint: endpoint.clone(),
            model: config.get("model").cloned().unwrap_or_default(),
            api_key_env: config.get("api_key_env").cloned(),
            response_path: path.split('.').filter(|s| !s.is_empty()).map(str::to_string).collect(),
            temperature,
        })
    }

    fn body(&self, req: &PromptRequest) -> Value {
        json!({
            "model": self.model,
            // fixture keys only steer the mock
            "prompt": strip_fixture_key(&req.rendered_text),
            "max_tokens": req.max_tokens,
            "temperature": if req.greedy { 0.0 } else { self.temperature },
        })
    }
}

/// Follows a dotted path of object keys and array indices.
pub(crate) fn select_path<'a>(mut v: &'a Value, path: &[String]) -> Option<&'a Value> {
    for seg in path {
        v = match v {
            Value::Object(m) => m.get(seg)?,
            Value::Array(a) => a.get(seg.parse::<usize>().ok()?)?,
            _ => return None,
        };
    }
    Some(v)
}

impl Backend for HttpBackend {
    fn complete(&self, req: &PromptRequest) -> Result<String, BackendError> {
        let agent = ureq::AgentBuilder::new()
            .timeout(Duration::from_millis(req.timeout_ms))
            .build();
        let mut call = agent.post(&self.endpoint).set("content-type", "application/json");
        if let Some(var) = &self.api_key_env {
            let key = std::env::var(var)
                .map_err(|_| BackendError::Rejected(format!("environment variable {var} is not set")))?;
            call = call.set("authorization", &format!("Bearer {key}"));
        }
        let resp = match call.send_json(self.body(req)) {
            Ok(r) => r,
            Err(ureq::Error::Status(code, r)) if code >= 500 => {
                return Err(BackendError::Unavailable(format!("status {code}: {}", r.status_text())))
            }
            Err(ureq::Error::Status(code, r)) => {
                return Err(BackendError::Rejected(format!("status {code}: {}", r.status_text())))
            }
            Err(ureq::Error::Transport(t)) => {
                let msg = t.to_string();
                return Err(if is_timeout(&t) {
                    BackendError::Timeout
                } else {
                    BackendError::Unavailable(msg)
                });
            }
        };
        let body: Value = resp
            .into_json()
            .map_err(|e| BackendError::Rejected(format!("undecodable response body: {e}")))?;
        match select_path(&body, &self.response_path) {
            Some(Value::String(s)) => Ok(s.clone()),
            Some(other) => Err(BackendError::Rejected(format!(
                "response path holds {other}, not a string"
            ))),
            None => Err(BackendError::Rejected(format!(
                "response path {} missing",
                self.response_path.join(".")
            ))),
        }
    }
}

fn is_timeout(t: &ureq::Transport) -> bool {
    use std::error::Error;
    let mut src: Option<&(dyn Error + 'static)> = t.source();
    while let Some(e) = src {
        if let Some(io) = e.downcast_ref::<std::io::Error>() {
            if matches!(io.kind(), std::io::ErrorKind::TimedOut | std::io::ErrorKind::WouldBlock) {
                return true;
            }
        }
        src = e.source();
    }
    t.to_string().contains("timed out")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{with_fixture_key, TemplateId};
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;

    /// Serves one canned HTTP response per entry and returns the request
    /// bodies it received.
    fn serve(responses: Vec<(u16, String)>) -> (String, std::thread::JoinHandle<Vec<String>>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/v1/completions", listener.local_addr().unwrap());
        let handle = std::thread::spawn(move || {
            let mut bodies = Vec::new();
            for (status, body) in responses {
                let (stream, _) = listener.accept().unwrap();
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut len = 0usize;
                let mut auth = String::new();
                loop {
                    let mut line = String::new();
                    reader.read_line(&mut line).unwrap();
                    let l = line.trim_end().to_ascii_lowercase();
                    if l.is_empty() {
                        break;
                    }
                    if let Some(v) = l.strip_prefix("content-length:") {
                        len = v.trim().parse().unwrap();
                    }
                    if l.starts_with("authorization:") {
                        auth = line.trim_end().to_string();
                    }
                }
                let mut buf = vec![0; len];
                reader.read_exact(&mut buf).unwrap();
                bodies.push(format!("{auth}|{}", String::from_utf8(buf).unwrap()));
                let mut stream = stream;
                write!(
                    stream,
                    "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
                    body.len()
                )
                .unwrap();
            }
            bodies
        });
        (url, handle)
    }

    fn cfg(pairs: &[(&str, &str)]) -> BTreeMap<String, String> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn posts_contract_body_and_reads_path() {
        let (url, h) = serve(vec![(200, r#"{"out":{"text":"[]"}}"#.into())]);
        std::env::set_var("RISKSCOPE_TEST_KEY_A", "sekret");
        let b = HttpBackend::from_config(&cfg(&[
            ("endpoint", &url),
            ("model", "m-10b"),
            ("response_path", "out.text"),
            ("api_key_env", "RISKSCOPE_TEST_KEY_A"),
        ]))
        .unwrap();
        let req = PromptRequest::new(TemplateId::ConceptScoring, with_fixture_key("hello", "k1"));
        assert_eq!(b.complete(&req).unwrap(), "[]");
        let seen = h.join().unwrap();
        let (auth, body) = seen[0].split_once('|').unwrap();
        assert!(auth.ends_with("Bearer sekret"));
        let body: Value = serde_json::from_str(body).unwrap();
        assert_eq!(body["model"], "m-10b");
        assert_eq!(body["prompt"], "hello");
        assert_eq!(body["max_tokens"], 2048);
        assert_eq!(body["temperature"], 0.0);
    }

    #[test]
    fn server_errors_are_transient_client_errors_are_not() {
        let (url, h) = serve(vec![(503, "{}".into()), (400, "{}".into())]);
        let b = HttpBackend::from_config(&cfg(&[("endpoint", &url)])).unwrap();
        let req = PromptRequest::new(TemplateId::InitialAnalysis, "x");
        assert!(matches!(b.complete(&req), Err(BackendError::Unavailable(_))));
        assert!(matches!(b.complete(&req), Err(BackendError::Rejected(_))));
        h.join().unwrap();
    }

    #[test]
    fn gateway_retries_http_5xx() {
        let (url, h) = serve(vec![(502, "{}".into()), (200, r#"{"choices":[{"text":"4"}]}"#.into())]);
        let gw = crate::gateway::Gateway::new(crate::gateway::GatewayConfig {
            retry: crate::gateway::RetryPolicy {
                attempts: 3,
                base_backoff_ms: 1,
            },
            ..Default::default()
        });
        gw.register_backend("h", crate::gateway::BackendKind::Http, &cfg(&[("endpoint", &url)]))
            .unwrap();
        let out = gw
            .complete(&PromptRequest::new(TemplateId::ConceptScoring, "x"))
            .unwrap();
        assert_eq!(out.text, "4");
        assert_eq!(h.join().unwrap().len(), 2);
    }

    #[test]
    fn config_validation() {
        assert!(HttpBackend::from_config(&cfg(&[])).is_err());
        assert!(HttpBackend::from_config(&cfg(&[("endpoint", "ftp://x")])).is_err());
        assert!(HttpBackend::from_config(&cfg(&[("endpoint", "http://x"), ("temperature", "-1")])).is_err());
        let path: Vec<String> = vec!["a".into(), "1".into()];
        assert_eq!(
            select_path(&serde_json::json!({"a": [0, 7]}), &path),
            Some(&serde_json::json!(7))
        );
    }
}
