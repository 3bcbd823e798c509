use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{fixture_key, Backend, BackendError, GatewayError, PromptRequest, TemplateId};

/// One scripted response. A rule matches when the template agrees, the
/// fixture key agrees (or the rule has none), and every `contains` needle is
/// a substring of the rendered prompt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MockRule {
    pub template: TemplateId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub key: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub contains: Vec<String>,
    pub text: String,
}

/// Serialized form of a mock script file.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MockScript {
    pub rules: Vec<MockRule>,
}

impl MockScript {
    pub fn parse(json: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(json)
    }
}

/// Deterministic scripted backend: the first matching rule, in insertion
/// order, answers. No rule → [`BackendError::NoScript`].
#[derive(Debug, Clone, Default)]
pub struct MockBackend {
    rules: Vec<MockRule>,
}

impl MockBackend {
    pub fn from_script(script: MockScript) -> Self {
        Self { rules: script.rules }
    }

    pub fn from_script_file(path: &Path) -> Result<Self, GatewayError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| GatewayError::InvalidConfig(format!("mock script {}: {e}", path.display())))?;
        let script = MockScript::parse(&text)
            .map_err(|e| GatewayError::InvalidConfig(format!("mock script {}: {e}", path.display())))?;
        Ok(Self::from_script(script))
    }

    pub fn script(&self) -> MockScript {
        MockScript {
            rules: self.rules.clone(),
        }
    }

    pub fn push(&mut self, rule: MockRule) {
        self.rules.push(rule);
    }

    pub fn on(mut self, template: TemplateId, key: &str, text: &str) -> Self {
        self.push(MockRule {
            template,
            key: Some(key.to_string()),
            contains: Vec::new(),
            text: text.to_string(),
        });
        self
    }

    pub fn on_any_key(mut self, template: TemplateId, text: &str) -> Self {
        self.push(MockRule {
            template,
            key: None,
            contains: Vec::new(),
            text: text.to_string(),
        });
        self
    }

    pub fn on_when(mut self, template: TemplateId, key: &str, contains: &[&str], text: &str) -> Self {
        self.push(MockRule {
            template,
            key: Some(key.to_string()),
            contains: contains.iter().map(|s| s.to_string()).collect(),
            text: text.to_string(),
        });
        self
    }

    pub fn lookup(&self, template: TemplateId, rendered: &str) -> Option<&str> {
        let key = fixture_key(rendered);
        self.rules
            .iter()
            .find(|r| {
                r.template == template
                    && r.key.as_deref().is_none_or(|k| Some(k) == key)
                    && r.contains.iter().all(|c| rendered.contains(c.as_str()))
            })
            .map(|r| r.text.as_str())
    }
}

impl Backend for MockBackend {
    fn complete(&self, req: &PromptRequest) -> Result<String, BackendError> {
        self.lookup(req.template_id, &req.rendered_text)
            .map(str::to_string)
            .ok_or_else(|| BackendError::NoScript {
                template: req.template_id,
                key: fixture_key(&req.rendered_text).map(str::to_string),
            })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::with_fixture_key;

    #[test]
    fn first_matching_rule_wins() {
        let m = MockBackend::default()
            .on_when(TemplateId::KnowledgeCheck, "c1", &["tightened"], "B")
            .on(TemplateId::KnowledgeCheck, "c1", "A")
            .on_any_key(TemplateId::KnowledgeCheck, "Z");
        let p = |body: &str, key: &str| with_fixture_key(body, key);
        assert_eq!(m.lookup(TemplateId::KnowledgeCheck, &p("plain", "c1")), Some("A"));
        assert_eq!(
            m.lookup(TemplateId::KnowledgeCheck, &p("tightened rule", "c1")),
            Some("B")
        );
        assert_eq!(m.lookup(TemplateId::KnowledgeCheck, &p("plain", "c2")), Some("Z"));
        assert_eq!(m.lookup(TemplateId::FactVerification, &p("plain", "c1")), None);
    }

    #[test]
    fn script_file_round_trip() {
        let m = MockBackend::default().on(TemplateId::ConceptScoring, "k", "3");
        let json = serde_json::to_string(&m.script()).unwrap();
        let back = MockBackend::from_script(MockScript::parse(&json).unwrap());
        assert_eq!(back.script(), m.script());
    }

    #[test]
    fn unscripted_request_reports_key() {
        let m = MockBackend::default();
        let req = PromptRequest::new(TemplateId::ConceptScoring, with_fixture_key("x", "k9"));
        assert_eq!(
            m.complete(&req),
            Err(BackendError::NoScript {
                template: TemplateId::ConceptScoring,
                key: Some("k9".into())
            })
        );
    }
}
