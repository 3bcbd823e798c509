//! Service configuration: a JSON or TOML file, then `RISKSCOPE_*`
//! environment overrides.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use riskscope_core::engine::{Engine, EngineSettings};
use riskscope_core::gateway::{BackendKind, Gateway, GatewayConfig, RetryPolicy};
use riskscope_core::kb::{HashingEmbedder, Kb};
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: {message}")]
    Read { path: PathBuf, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("startup failed: {0}")]
    Startup(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendSpec {
    pub id: String,
    pub kind: BackendKind,
    /// Backend options: for http `endpoint`, `model`, `api_key_env`,
    /// `response_path`, `temperature`; for mock `script`.
    #[serde(default)]
    pub options: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub kb_path: PathBuf,
    /// Directory holding cases, drafts, reports, the flywheel log, the audit
    /// log and exports.
    pub case_store_path: PathBuf,
    pub backends: Vec<BackendSpec>,
    pub default_backend: Option<String>,
    pub term_k: usize,
    pub pattern_k: usize,
    pub alpha: f64,
    pub embedding_dimension: usize,
    pub pool_size: usize,
    pub retry_attempts: u32,
    pub retry_backoff_ms: u64,
    pub force_greedy: bool,
    pub listen: String,
    /// Name of the environment variable holding the bearer-token secret.
    /// Authentication is off when that variable is unset.
    pub auth_token_env: String,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        let settings = EngineSettings::default();
        Self {
            kb_path: PathBuf::from("riskscope-data/kb"),
            case_store_path: PathBuf::from("riskscope-data"),
            backends: vec![BackendSpec {
                id: "mock".into(),
                kind: BackendKind::Mock,
                options: BTreeMap::new(),
            }],
            default_backend: None,
            term_k: settings.term_k,
            pattern_k: settings.pattern_k,
            alpha: 0.5,
            embedding_dimension: HashingEmbedder::DEFAULT_DIMENSION,
            pool_size: 8,
            retry_attempts: RetryPolicy::default().attempts,
            retry_backoff_ms: RetryPolicy::default().base_backoff_ms,
            force_greedy: false,
            listen: "127.0.0.1:8080".into(),
            auth_token_env: "RISKSCOPE_AUTH_SECRET".into(),
        }
    }
}

fn parse_env<T: std::str::FromStr>(name: &str, raw: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    raw.parse()
        .map_err(|e| ConfigError::Invalid(format!("{name}={raw:?}: {e}")))
}

impl ServiceConfig {
    /// Reads a config file; `.toml` files are TOML, anything else JSON.
    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let read_err = |message: String| ConfigError::Read {
            path: path.to_path_buf(),
            message,
        };
        let text = fs::read_to_string(path).map_err(|e| read_err(e.to_string()))?;
        if path.extension().is_some_and(|e| e == "toml") {
            toml::from_str(&text).map_err(|e| read_err(e.to_string()))
        } else {
            serde_json::from_str(&text).map_err(|e| read_err(e.to_string()))
        }
    }

    /// File (or defaults), then process environment overrides, then
    /// validation.
    pub fn load(path: Option<&Path>) -> Result<Self, ConfigError> {
        let mut c = match path {
            Some(p) => Self::from_file(p)?,
            None => Self::default(),
        };
        c.apply_env(|k| std::env::var(k).ok())?;
        c.validate()?;
        Ok(c)
    }

    /// Applies `RISKSCOPE_<FIELD>` overrides for the scalar fields.
    pub fn apply_env(&mut self, var: impl Fn(&str) -> Option<String>) -> Result<(), ConfigError> {
        let get = |k: &str| var(k).filter(|v| !v.is_empty());
        if let Some(v) = get("RISKSCOPE_KB_PATH") {
            self.kb_path = v.into();
        }
        if let Some(v) = get("RISKSCOPE_CASE_STORE_PATH") {
            self.case_store_path = v.into();
        }
        if let Some(v) = get("RISKSCOPE_DEFAULT_BACKEND") {
            self.default_backend = Some(v);
        }
        if let Some(v) = get("RISKSCOPE_TERM_K") {
            self.term_k = parse_env("RISKSCOPE_TERM_K", &v)?;
        }
        if let Some(v) = get("RISKSCOPE_PATTERN_K") {
            self.pattern_k = parse_env("RISKSCOPE_PATTERN_K", &v)?;
        }
        if let Some(v) = get("RISKSCOPE_ALPHA") {
            self.alpha = parse_env("RISKSCOPE_ALPHA", &v)?;
        }
        if let Some(v) = get("RISKSCOPE_POOL_SIZE") {
            self.pool_size = parse_env("RISKSCOPE_POOL_SIZE", &v)?;
        }
        if let Some(v) = get("RISKSCOPE_LISTEN") {
            self.listen = v;
        }
        if let Some(v) = get("RISKSCOPE_AUTH_TOKEN_ENV") {
            self.auth_token_env = v;
        }
        if let Some(v) = get("RISKSCOPE_MOCK_SCRIPT") {
            self.set_mock_script(&v);
        }
        Ok(())
    }

    /// Points the `mock` backend at a script file, adding the backend if
    /// the config has none.
    pub fn set_mock_script(&mut self, path: &str) {
        match self.backends.iter_mut().find(|b| b.id == "mock") {
            Some(b) => {
                b.kind = BackendKind::Mock;
                b.options.insert("script".into(), path.to_string());
            }
            None => self.backends.push(BackendSpec {
                id: "mock".into(),
                kind: BackendKind::Mock,
                options: BTreeMap::from([("script".to_string(), path.to_string())]),
            }),
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad(format!("alpha must lie in [0, 1], got {}", self.alpha));
        }
        if self.pool_size == 0 || self.term_k == 0 || self.pattern_k == 0 || self.embedding_dimension == 0 {
            return bad("pool_size, term_k, pattern_k and embedding_dimension must be positive".into());
        }
        if self.backends.is_empty() {
            return bad("no backends configured".into());
        }
        let mut ids = HashSet::new();
        for b in &self.backends {
            if !ids.insert(b.id.as_str()) {
                return bad(format!("backend id {} appears twice", b.id));
            }
        }
        if let Some(d) = &self.default_backend {
            if !ids.contains(d.as_str()) {
                return bad(format!("default_backend {d} is not configured"));
            }
        }
        if self.listen.parse::<std::net::SocketAddr>().is_err() {
            return bad(format!("listen address {:?} is not host:port", self.listen));
        }
        Ok(())
    }

    pub fn engine_settings(&self) -> EngineSettings {
        EngineSettings {
            term_k: self.term_k,
            pattern_k: self.pattern_k,
        }
    }

    pub fn build_gateway(&self) -> Result<Gateway, ConfigError> {
        let gw = Gateway::new(GatewayConfig {
            retry: RetryPolicy {
                attempts: self.retry_attempts,
                base_backoff_ms: self.retry_backoff_ms,
            },
            pool_size: self.pool_size,
            force_greedy: self.force_greedy,
        });
        for b in &self.backends {
            gw.register_backend(&b.id, b.kind, &b.options)
                .map_err(|e| ConfigError::Startup(format!("backend {}: {e}", b.id)))?;
        }
        if let Some(d) = &self.default_backend {
            gw.set_default(d).map_err(|e| ConfigError::Startup(e.to_string()))?;
        }
        Ok(gw)
    }

    /// Builds the engine, creating the store directories when missing.
    pub fn build_engine(&self) -> Result<Engine, ConfigError> {
        let startup = |e: &dyn std::fmt::Display| ConfigError::Startup(e.to_string());
        fs::create_dir_all(&self.case_store_path).map_err(|e| startup(&e))?;
        let kb = Kb::open(
            &self.kb_path,
            Arc::new(HashingEmbedder::new(self.embedding_dimension)),
            self.alpha,
        )
        .map_err(|e| startup(&e))?;
        let gw = self.build_gateway()?;
        Engine::open(
            &self.case_store_path,
            Arc::new(gw),
            Arc::new(kb),
            self.engine_settings(),
        )
        .map_err(|e| startup(&e))
    }

    pub fn export_path(&self, kind: &str) -> PathBuf {
        self.case_store_path.join("exports").join(format!("{kind}.jsonl"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        ServiceConfig::default().validate().unwrap();
    }

    #[test]
    fn env_overrides() {
        let mut c = ServiceConfig::default();
        let env = BTreeMap::from([
            ("RISKSCOPE_ALPHA", "0.25"),
            ("RISKSCOPE_TERM_K", "3"),
            ("RISKSCOPE_MOCK_SCRIPT", "/tmp/s.json"),
            ("RISKSCOPE_LISTEN", ""),
        ]);
        c.apply_env(|k| env.get(k).map(|v| v.to_string())).unwrap();
        assert_eq!((c.alpha, c.term_k), (0.25, 3));
        assert_eq!(c.backends[0].options["script"], "/tmp/s.json");
        assert_eq!(c.listen, "127.0.0.1:8080");
        let mut c = ServiceConfig::default();
        assert!(c
            .apply_env(|k| (k == "RISKSCOPE_ALPHA").then(|| "high".to_string()))
            .is_err());
    }

    #[test]
    fn rejects_bad_values() {
        let c = ServiceConfig {
            alpha: 1.5,
            ..Default::default()
        };
        assert!(c.validate().is_err());
        let c = ServiceConfig {
            default_backend: Some("gpt".into()),
            ..Default::default()
        };
        assert!(c.validate().is_err());
        let mut c = ServiceConfig::default();
        c.backends.push(c.backends[0].clone());
        assert!(c.validate().is_err());
    }

    #[test]
    fn toml_and_json_files() {
        let dir = tempfile::tempdir().unwrap();
        let t = dir.path().join("c.toml");
        fs::write(
            &t,
            "alpha = 0.7\nlisten = \"0.0.0.0:9000\"\n\n[[backends]]\nid = \"llm\"\nkind = \"http\"\noptions = { endpoint = \"http://localhost:1/v1\" }\n",
        )
        .unwrap();
        let c = ServiceConfig::from_file(&t).unwrap();
        assert_eq!(c.alpha, 0.7);
        assert_eq!(c.backends[0].kind, BackendKind::Http);
        let j = dir.path().join("c.json");
        fs::write(&j, serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(ServiceConfig::from_file(&j).unwrap(), c);
        fs::write(&j, r#"{"unknown_field": 1}"#).unwrap();
        assert!(ServiceConfig::from_file(&j).is_err());
    }
}
