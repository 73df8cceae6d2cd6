//! `{placeholder}` templates and the default prompt set.
//!
//! Placeholders are `{name}` with `name` matching `[A-Za-z_][A-Za-z0-9_]*`.
//! Any other brace is literal text. Substituted values are never re-scanned.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

static PLACEHOLDER: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"\{([A-Za-z_][A-Za-z0-9_]*)\}").expect("static regex"));

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum TemplateError {
    #[error("template `{template}` has unbound placeholder(s): {}", missing.join(", "))]
    Unbound {
        template: String,
        missing: Vec<String>,
    },
    #[error("cannot read prompt file {path}: {message}")]
    Io { path: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub name: String,
    pub body: String,
}

impl PromptTemplate {
    pub fn new(name: impl Into<String>, body: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            body: body.into(),
        }
    }

    pub fn placeholders(&self) -> BTreeSet<&str> {
        PLACEHOLDER
            .captures_iter(&self.body)
            .map(|c| c.get(1).unwrap().as_str())
            .collect()
    }

    /// Substitutes every placeholder. Extra bindings are ignored; a
    /// placeholder without a binding is an error.
    pub fn render(&self, bindings: &BTreeMap<&str, String>) -> Result<String, TemplateError> {
        let missing: Vec<String> = self
            .placeholders()
            .into_iter()
            .filter(|p| !bindings.contains_key(p))
            .map(str::to_string)
            .collect();
        if !missing.is_empty() {
            return Err(TemplateError::Unbound {
                template: self.name.clone(),
                missing,
            });
        }
        Ok(PLACEHOLDER
            .replace_all(&self.body, |caps: &regex::Captures<'_>| {
                bindings[caps.get(1).unwrap().as_str()].clone()
            })
            .into_owned())
    }

    pub fn render_pairs(&self, pairs: &[(&str, &str)]) -> Result<String, TemplateError> {
        let bindings = pairs.iter().map(|(k, v)| (*k, (*v).to_string())).collect();
        self.render(&bindings)
    }
}

/// Every prompt the harness sends. Defaults are compiled in; a prompts
/// directory may override any file by name.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSet {
    pub client: PromptTemplate,
    pub therapist: PromptTemplate,
    pub rapport: PromptTemplate,
    pub exploration: PromptTemplate,
    pub extraction: PromptTemplate,
    pub strategy: PromptTemplate,
    pub ctrs: BTreeMap<String, PromptTemplate>,
}

const DEFAULTS: &[(&str, &str)] = &[
    ("client", include_str!("../prompts/client.txt")),
    ("therapist", include_str!("../prompts/therapist.txt")),
    ("rapport", include_str!("../prompts/rapport.txt")),
    ("exploration", include_str!("../prompts/exploration.txt")),
    ("extraction", include_str!("../prompts/extraction.txt")),
    ("strategy", include_str!("../prompts/strategy.txt")),
    ("ctrs_understanding", include_str!("../prompts/ctrs_understanding.txt")),
    (
        "ctrs_interpersonal_effectiveness",
        include_str!("../prompts/ctrs_interpersonal_effectiveness.txt"),
    ),
    ("ctrs_collaboration", include_str!("../prompts/ctrs_collaboration.txt")),
    ("ctrs_guided_discovery", include_str!("../prompts/ctrs_guided_discovery.txt")),
    (
        "ctrs_key_cognitions_or_behaviors",
        include_str!("../prompts/ctrs_key_cognitions_or_behaviors.txt"),
    ),
    ("ctrs_strategy_for_change", include_str!("../prompts/ctrs_strategy_for_change.txt")),
];

fn default_body(name: &str) -> &'static str {
    DEFAULTS
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, body)| *body)
        .unwrap_or_else(|| panic!("no default prompt named {name}"))
}

impl Default for PromptSet {
    fn default() -> Self {
        Self::build(|name| Ok(PromptTemplate::new(name, default_body(name))))
            .expect("defaults never fail")
    }
}

impl PromptSet {
    fn build(
        mut load: impl FnMut(&str) -> Result<PromptTemplate, TemplateError>,
    ) -> Result<Self, TemplateError> {
        let mut ctrs = BTreeMap::new();
        for (name, _) in DEFAULTS.iter().filter(|(n, _)| n.starts_with("ctrs_")) {
            ctrs.insert(name.trim_start_matches("ctrs_").to_string(), load(name)?);
        }
        Ok(Self {
            client: load("client")?,
            therapist: load("therapist")?,
            rapport: load("rapport")?,
            exploration: load("exploration")?,
            extraction: load("extraction")?,
            strategy: load("strategy")?,
            ctrs,
        })
    }

    /// Loads `<name>.txt` files from `dir`, falling back to the compiled-in
    /// default for any file that is absent.
    pub fn load_dir(dir: &Path) -> Result<Self, TemplateError> {
        Self::build(|name| {
            let path = dir.join(format!("{name}.txt"));
            if path.exists() {
                let body = std::fs::read_to_string(&path).map_err(|e| TemplateError::Io {
                    path: path.display().to_string(),
                    message: e.to_string(),
                })?;
                Ok(PromptTemplate::new(name, body))
            } else {
                Ok(PromptTemplate::new(name, default_body(name)))
            }
        })
    }

    /// Writes the defaults as editable files.
    pub fn write_defaults(dir: &Path) -> std::io::Result<()> {
        std::fs::create_dir_all(dir)?;
        for (name, body) in DEFAULTS {
            std::fs::write(dir.join(format!("{name}.txt")), body)?;
        }
        Ok(())
    }

    pub fn ctrs_prompt(&self, criterion: &str) -> Option<&PromptTemplate> {
        self.ctrs.get(criterion)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn renders_and_leaves_other_braces() {
        let t = PromptTemplate::new("t", "Hello {name}, {not a slot} {{x}}");
        let out = t.render_pairs(&[("name", "Alex"), ("x", "y")]).unwrap();
        assert_eq!(out, "Hello Alex, {not a slot} {y}");
    }

    #[test]
    fn unbound_placeholder_fails() {
        let t = PromptTemplate::new("t", "{a} and {b}");
        let err = t.render_pairs(&[("a", "1")]).unwrap_err();
        assert_eq!(
            err,
            TemplateError::Unbound {
                template: "t".into(),
                missing: vec!["b".into()]
            }
        );
    }

    #[test]
    fn values_are_not_rescanned() {
        let t = PromptTemplate::new("t", "{a}");
        assert_eq!(t.render_pairs(&[("a", "{a}")]).unwrap(), "{a}");
    }

    #[test]
    fn default_placeholders() {
        let set = PromptSet::default();
        assert!(set.rapport.placeholders().contains("dialogue_context"));
        assert!(set.exploration.placeholders().contains("dialogue_history"));
        assert!(set.client.placeholders().contains("accessible_diagram"));
        assert_eq!(set.ctrs.len(), 6);
        for t in set.ctrs.values() {
            assert!(t.placeholders().contains("conversation"), "{}", t.name);
        }
    }

    #[test]
    fn directory_overrides_single_file() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("rapport.txt"), "Rate: {dialogue_context}").unwrap();
        let set = PromptSet::load_dir(dir.path()).unwrap();
        assert_eq!(set.rapport.body, "Rate: {dialogue_context}");
        assert_eq!(set.exploration, PromptSet::default().exploration);
    }
}
