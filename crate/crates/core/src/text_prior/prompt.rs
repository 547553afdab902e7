//! Per-organ text prompts: a fixed anatomical template, or an LLM endpoint with
//! a persistent cache and template fallback.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::{Mutex, OnceLock};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::organ_class;

pub const ENDPOINT_ENV: &str = "PGSEG_LLM_ENDPOINT";
pub const KEY_ENV: &str = "PGSEG_LLM_KEY";
pub const DEFAULT_MODEL: &str = "medical-llm";
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(10);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptSource {
    Llm,
    Template,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextPrompt {
    pub organ: String,
    pub text: String,
    pub source: PromptSource,
    /// Set when client mode was requested but the template had to be used.
    #[serde(default)]
    pub fallback: bool,
}

#[derive(Deserialize)]
struct Descriptor {
    display: String,
    descriptor: String,
}

fn descriptors() -> &'static BTreeMap<String, Descriptor> {
    static TABLE: OnceLock<BTreeMap<String, Descriptor>> = OnceLock::new();
    TABLE.get_or_init(|| {
        serde_json::from_str(include_str!("../../data/organ_descriptors.json")).expect("bundled descriptor table")
    })
}

/// "A CT scan showing the {organ}, a {descriptor}".
pub fn template_prompt(organ: &str) -> Result<TextPrompt> {
    organ_class(organ)?;
    let d = descriptors().get(organ).ok_or_else(|| Error::Vocabulary(organ.to_string()))?;
    Ok(TextPrompt {
        organ: organ.to_string(),
        text: format!("A CT scan showing the {}, a {}", d.display, d.descriptor),
        source: PromptSource::Template,
        fallback: false,
    })
}

pub enum PromptMode<'a> {
    Template,
    Client(&'a LlmClient),
}

/// One prompt per organ, in input order. In client mode an unreachable or
/// failing endpoint degrades to the template prompt with `fallback = true`.
pub fn generate_prompts(organs: &[&str], mode: PromptMode<'_>) -> Result<Vec<TextPrompt>> {
    for organ in organs {
        organ_class(organ)?;
    }
    organs
        .iter()
        .map(|organ| match &mode {
            PromptMode::Template => template_prompt(organ),
            PromptMode::Client(client) => match client.describe(organ) {
                Ok(text) => Ok(TextPrompt { organ: organ.to_string(), text, source: PromptSource::Llm, fallback: false }),
                Err(err) => {
                    log::warn!("LLM prompt for {organ} failed ({err}); using template");
                    let mut p = template_prompt(organ)?;
                    p.fallback = true;
                    Ok(p)
                }
            },
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct LlmConfig {
    pub endpoint: String,
    pub api_key: Option<String>,
    pub model: String,
    pub timeout: Duration,
    pub cache_path: Option<PathBuf>,
}

impl LlmConfig {
    /// Reads `PGSEG_LLM_ENDPOINT` / `PGSEG_LLM_KEY`. `None` when no endpoint is set.
    pub fn from_env() -> Option<Self> {
        let endpoint = std::env::var(ENDPOINT_ENV).ok().filter(|s| !s.is_empty())?;
        Some(Self {
            endpoint,
            api_key: std::env::var(KEY_ENV).ok().filter(|s| !s.is_empty()),
            model: DEFAULT_MODEL.to_string(),
            timeout: DEFAULT_TIMEOUT,
            cache_path: None,
        })
    }
}

/// Chat-completion client with a JSON cache keyed by `"organ|model-id"`.
pub struct LlmClient {
    config: LlmConfig,
    cache: Mutex<BTreeMap<String, String>>,
}

impl LlmClient {
    pub fn new(config: LlmConfig) -> Result<Self> {
        let cache = match &config.cache_path {
            Some(path) if path.exists() => load_cache(path)?,
            _ => BTreeMap::new(),
        };
        Ok(Self { config, cache: Mutex::new(cache) })
    }

    pub fn config(&self) -> &LlmConfig {
        &self.config
    }

    pub fn cache_key(&self, organ: &str) -> String {
        format!("{organ}|{}", self.config.model)
    }

    pub fn cached(&self, organ: &str) -> Option<String> {
        self.cache.lock().expect("cache lock").get(&self.cache_key(organ)).cloned()
    }

    /// Cached description or a fresh request; successful answers are cached.
    pub fn describe(&self, organ: &str) -> Result<String> {
        if let Some(hit) = self.cached(organ) {
            return Ok(hit);
        }
        let text = self.request(organ)?;
        let mut cache = self.cache.lock().expect("cache lock");
        cache.insert(self.cache_key(organ), text.clone());
        if let Some(path) = &self.config.cache_path {
            let json = serde_json::to_string_pretty(&*cache)?;
            std::fs::write(path, json).map_err(|e| Error::io(path, e))?;
        }
        Ok(text)
    }

    pub fn request_body(&self, organ: &str) -> serde_json::Value {
        let display = descriptors().get(organ).map(|d| d.display.as_str()).unwrap_or(organ);
        serde_json::json!({
            "model": self.config.model,
            "messages": [
                {"role": "system", "content": "You are a radiologist. Answer with one sentence."},
                {"role": "user", "content": format!(
                    "Describe the appearance and location of the {display} on a contrast-enhanced abdominal CT slice."
                )}
            ]
        })
    }

    #[cfg(feature = "llm-client")]
    fn request(&self, organ: &str) -> Result<String> {
        let agent: ureq::Agent = ureq::Agent::config_builder().timeout_global(Some(self.config.timeout)).build().into();
        let mut req = agent.post(&self.config.endpoint).header("Content-Type", "application/json");
        if let Some(key) = &self.config.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req
            .send_json(self.request_body(organ))
            .map_err(|e| Error::State(format!("LLM request failed: {e}")))?;
        let value: serde_json::Value = resp
            .body_mut()
            .read_json()
            .map_err(|e| Error::State(format!("LLM response is not JSON: {e}")))?;
        extract_text(&value).ok_or_else(|| Error::State("LLM response has no text field".into()))
    }

    #[cfg(not(feature = "llm-client"))]
    fn request(&self, _organ: &str) -> Result<String> {
        Err(Error::State("built without the llm-client feature".into()))
    }
}

/// Pulls the single text field out of the common response shapes.
pub fn extract_text(v: &serde_json::Value) -> Option<String> {
    let candidates = [
        v.pointer("/choices/0/message/content"),
        v.pointer("/choices/0/text"),
        v.pointer("/message/content"),
        v.get("text"),
        v.get("content"),
        v.get("response"),
    ];
    candidates
        .into_iter()
        .flatten()
        .filter_map(|s| s.as_str())
        .map(str::trim)
        .find(|s| !s.is_empty())
        .map(str::to_string)
}

fn load_cache(path: &Path) -> Result<BTreeMap<String, String>> {
    let raw = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&raw).map_err(|e| Error::load(path, e.to_string()))
}
