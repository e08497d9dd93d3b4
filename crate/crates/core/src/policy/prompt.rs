use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::retrieval::RetrievedContext;

pub const QUERY_SLOT: &str = "{query}";
pub const PROFILES_SLOT: &str = "{profiles}";

const DEFAULT_TEMPLATE: &str = include_str!("../../templates/prompt.toml");

#[derive(Debug, Error)]
pub enum TemplateError {
    #[error("template is missing the {0} placeholder")]
    MissingPlaceholder(&'static str),
    #[error("template parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Editable prompt layout. `body` must contain both placeholders.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub profile_header: String,
    pub body: String,
}

impl Default for PromptTemplate {
    fn default() -> Self {
        PromptTemplate::from_toml_str(DEFAULT_TEMPLATE).expect("bundled template is valid")
    }
}

impl PromptTemplate {
    pub fn from_toml_str(text: &str) -> Result<Self, TemplateError> {
        let t: PromptTemplate = toml::from_str(text).map_err(|e| TemplateError::Parse(e.to_string()))?;
        t.validate()?;
        Ok(t)
    }

    pub fn load(path: &Path) -> Result<Self, TemplateError> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<(), TemplateError> {
        for slot in [QUERY_SLOT, PROFILES_SLOT] {
            if !self.body.contains(slot) {
                return Err(TemplateError::MissingPlaceholder(slot));
            }
        }
        Ok(())
    }

    fn profiles_block(&self, ctx: &RetrievedContext) -> String {
        if ctx.is_empty() {
            return String::new();
        }
        let mut s = String::new();
        s.push_str(&self.profile_header);
        s.push('\n');
        for (i, text) in ctx.texts().enumerate() {
            s.push_str(&format!("{}. {}\n", i + 1, text));
        }
        s.push('\n');
        s
    }
}

/// Renders the prompt in one pass so placeholder-like text inside the query
/// or the profiles is never expanded.
pub fn build_prompt(query: &str, ctx: &RetrievedContext, template: &PromptTemplate) -> Result<String, TemplateError> {
    template.validate()?;
    let profiles = template.profiles_block(ctx);
    let body = template.body.as_str();
    let mut out = String::with_capacity(body.len() + profiles.len() + query.len());
    let mut rest = body;
    while !rest.is_empty() {
        if let Some(tail) = rest.strip_prefix(QUERY_SLOT) {
            out.push_str(query);
            rest = tail;
        } else if let Some(tail) = rest.strip_prefix(PROFILES_SLOT) {
            out.push_str(&profiles);
            rest = tail;
        } else {
            let ch = rest.chars().next().expect("non-empty");
            out.push(ch);
            rest = &rest[ch.len_utf8()..];
        }
    }
    Ok(out)
}
