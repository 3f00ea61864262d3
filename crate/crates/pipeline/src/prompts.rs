//! Versioned prompt templates. The built-in set is compiled in from
//! `prompts/v1`; a directory of `<id>.txt` files can replace it.

use std::collections::BTreeMap;
use std::path::Path;

use regex::Regex;
use serde::Serialize;

use crate::PipelineError;

pub const PAIR_CHECK: &str = "pair_check";
pub const FINE_PROMPT_A: &str = "fine_prompt_a";
pub const FINE_PROMPT_B: &str = "fine_prompt_b";
pub const FINE_PROMPT: &str = "fine_prompt_c";
pub const FASHION_ADDENDUM: &str = "fashion_addendum";
pub const REFINE: &str = "refine";
pub const ASSESS_REFINE: &str = "assess_refine";
pub const COMPRESS: &str = "compress";

/// Template id and the placeholders it must contain.
const REQUIRED: &[(&str, &[&str])] = &[
    (PAIR_CHECK, &["<img1>", "<img2>"]),
    (FINE_PROMPT_A, &["<img1>", "<img2>"]),
    (FINE_PROMPT_B, &["<img1>", "<img2>", "<eval>"]),
    (FINE_PROMPT, &["<img1>", "<img2>", "<eval>"]),
    (FASHION_ADDENDUM, &[]),
    (REFINE, &["<img1>", "<text>"]),
    (ASSESS_REFINE, &["<img1>", "<img2>", "<text>"]),
    (COMPRESS, &["<text>", "<limit>"]),
];

const BUILTIN: &[(&str, &str)] = &[
    (PAIR_CHECK, include_str!("../prompts/v1/pair_check.txt")),
    (FINE_PROMPT_A, include_str!("../prompts/v1/fine_prompt_a.txt")),
    (FINE_PROMPT_B, include_str!("../prompts/v1/fine_prompt_b.txt")),
    (FINE_PROMPT, include_str!("../prompts/v1/fine_prompt_c.txt")),
    (FASHION_ADDENDUM, include_str!("../prompts/v1/fashion_addendum.txt")),
    (REFINE, include_str!("../prompts/v1/refine.txt")),
    (ASSESS_REFINE, include_str!("../prompts/v1/assess_refine.txt")),
    (COMPRESS, include_str!("../prompts/v1/compress.txt")),
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptRegistry {
    version: String,
    templates: BTreeMap<String, String>,
}

/// A template with its slots filled in.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PromptInstance {
    pub template_id: String,
    pub version: String,
    pub text: String,
}

impl PromptRegistry {
    pub fn builtin() -> Self {
        Self::from_templates(
            "v1",
            BUILTIN.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
        )
        .expect("built-in templates are complete")
    }

    pub fn from_templates(version: &str, templates: BTreeMap<String, String>) -> Result<Self, PipelineError> {
        for (id, slots) in REQUIRED {
            let text = templates
                .get(*id)
                .ok_or_else(|| PipelineError::Prompt(format!("{version}: template {id} is missing")))?;
            for slot in *slots {
                if !text.contains(slot) {
                    return Err(PipelineError::Prompt(format!("{version}/{id}: placeholder {slot} is missing")));
                }
            }
        }
        Ok(Self {
            version: version.to_string(),
            templates,
        })
    }

    /// Loads every `<id>.txt` in `dir`; the directory name is the version.
    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self, PipelineError> {
        let dir = dir.as_ref();
        let version = dir
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "custom".into());
        let mut templates = BTreeMap::new();
        for entry in std::fs::read_dir(dir)? {
            let path = entry?.path();
            if path.extension().is_some_and(|e| e == "txt") {
                let id = path.file_stem().expect("file has a stem").to_string_lossy().into_owned();
                templates.insert(id, std::fs::read_to_string(&path)?);
            }
        }
        Self::from_templates(&version, templates)
    }

    pub fn version(&self) -> &str {
        &self.version
    }

    pub fn template(&self, id: &str) -> Option<&str> {
        self.templates.get(id).map(String::as_str)
    }

    /// Fills `<name>` slots. Every placeholder in the template must be
    /// supplied and none may survive substitution.
    pub fn render(&self, id: &str, slots: &[(&str, &str)]) -> Result<PromptInstance, PipelineError> {
        let mut text = self
            .template(id)
            .ok_or_else(|| PipelineError::Prompt(format!("unknown template {id}")))?
            .to_string();
        for (name, value) in slots {
            text = text.replace(&format!("<{name}>"), value);
        }
        let leftover = Regex::new(r"<(img1|img2|eval|text|limit)>").expect("valid pattern");
        if let Some(m) = leftover.find(&text) {
            return Err(PipelineError::Prompt(format!("{id}: placeholder {} was not supplied", m.as_str())));
        }
        Ok(PromptInstance {
            template_id: id.to_string(),
            version: self.version.clone(),
            text,
        })
    }
}

impl Default for PromptRegistry {
    fn default() -> Self {
        Self::builtin()
    }
}
