//! Prompt templates for the image editor and the critic.
//!
//! Templates are plain text with `<name>` placeholders. Text placeholders
//! (`<target color>`, `<target object>`, `<short edit instruction>`) must be
//! substituted; image slots (`<image>`, `<original image>`, `<Image N>`) are
//! left in place for the backend to bind to the attached images.
//!
//! Camera-specific variants are stored as `<name>_overhead` / `<name>_wrist`;
//! short critic instructions as `short_<name>`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use thiserror::Error;

use super::Camera;

pub const CRITIC_TEMPLATE: &str = "critic";

const BUILTIN: &[(&str, &str)] = &[
    ("person", include_str!("../../templates/person.txt")),
    ("large_distractor", include_str!("../../templates/large_distractor.txt")),
    ("small_distractor", include_str!("../../templates/small_distractor.txt")),
    ("background", include_str!("../../templates/background.txt")),
    (
        "lighting_overhead",
        include_str!("../../templates/lighting_overhead.txt"),
    ),
    ("lighting_wrist", include_str!("../../templates/lighting_wrist.txt")),
    ("table_height", include_str!("../../templates/table_height.txt")),
    ("critic", include_str!("../../templates/critic.txt")),
    ("short_person", include_str!("../../templates/short_person.txt")),
    (
        "short_large_distractor",
        include_str!("../../templates/short_large_distractor.txt"),
    ),
    (
        "short_small_distractor",
        include_str!("../../templates/short_small_distractor.txt"),
    ),
    ("short_background", include_str!("../../templates/short_background.txt")),
    ("short_lighting", include_str!("../../templates/short_lighting.txt")),
    (
        "short_table_height",
        include_str!("../../templates/short_table_height.txt"),
    ),
];

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PromptError {
    #[error("unknown template '{0}'")]
    UnknownTemplate(String),
    #[error("template '{template}' needs a value for <{placeholder}>")]
    MissingPlaceholder { template: String, placeholder: String },
    #[error("cannot read templates: {0}")]
    Io(String),
}

fn is_placeholder_name(name: &str) -> bool {
    let bytes = name.as_bytes();
    match (bytes.first(), bytes.last()) {
        (Some(first), Some(last)) => {
            first.is_ascii_alphanumeric()
                && last.is_ascii_alphanumeric()
                && bytes
                    .iter()
                    .all(|b| b.is_ascii_alphanumeric() || matches!(b, b' ' | b'_' | b'-'))
        }
        _ => false,
    }
}

fn is_image_slot(name: &str) -> bool {
    matches!(name, "image" | "original image")
        || name
            .strip_prefix("Image ")
            .is_some_and(|n| !n.is_empty() && n.bytes().all(|b| b.is_ascii_digit()))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemplateLibrary {
    templates: BTreeMap<String, String>,
}

impl Default for TemplateLibrary {
    fn default() -> Self {
        Self::builtin()
    }
}

impl TemplateLibrary {
    pub fn builtin() -> Self {
        Self {
            templates: BUILTIN
                .iter()
                .map(|(k, v)| (k.to_string(), v.trim_end().to_string()))
                .collect(),
        }
    }

    /// Builtins overlaid with every `*.txt` file in `dir`, keyed by file stem.
    pub fn with_dir(dir: &Path) -> Result<Self, PromptError> {
        let mut library = Self::builtin();
        let entries = fs::read_dir(dir).map_err(|e| PromptError::Io(format!("{}: {e}", dir.display())))?;
        let mut paths: Vec<_> = entries.filter_map(|e| e.ok().map(|e| e.path())).collect();
        paths.sort();
        for path in paths {
            if path.extension().and_then(|e| e.to_str()) != Some("txt") {
                continue;
            }
            let Some(stem) = path.file_stem().and_then(|s| s.to_str()) else {
                continue;
            };
            let text = fs::read_to_string(&path).map_err(|e| PromptError::Io(format!("{}: {e}", path.display())))?;
            library.templates.insert(stem.to_string(), text.trim_end().to_string());
        }
        Ok(library)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.templates.keys().map(String::as_str)
    }

    pub fn get(&self, name: &str) -> Result<&str, PromptError> {
        self.templates
            .get(name)
            .map(String::as_str)
            .ok_or_else(|| PromptError::UnknownTemplate(name.to_string()))
    }

    /// Key of the full edit prompt for a factor template on one camera.
    pub fn full_key(&self, template: &str, camera: Camera) -> Result<String, PromptError> {
        let specific = format!("{template}_{camera}");
        if self.templates.contains_key(&specific) {
            Ok(specific)
        } else if self.templates.contains_key(template) {
            Ok(template.to_string())
        } else {
            Err(PromptError::UnknownTemplate(template.to_string()))
        }
    }

    pub fn render(&self, name: &str, substitutions: &BTreeMap<String, String>) -> Result<String, PromptError> {
        render_text(name, self.get(name)?, substitutions)
    }

    pub fn render_full(
        &self,
        template: &str,
        camera: Camera,
        substitutions: &BTreeMap<String, String>,
    ) -> Result<String, PromptError> {
        self.render(&self.full_key(template, camera)?, substitutions)
    }

    pub fn render_short(
        &self,
        template: &str,
        substitutions: &BTreeMap<String, String>,
    ) -> Result<String, PromptError> {
        self.render(&format!("short_{template}"), substitutions)
    }
}

/// Renders a builtin template.
pub fn render_prompt(template_name: &str, substitutions: &BTreeMap<String, String>) -> Result<String, PromptError> {
    TemplateLibrary::builtin().render(template_name, substitutions)
}

fn render_text(
    template_name: &str,
    text: &str,
    substitutions: &BTreeMap<String, String>,
) -> Result<String, PromptError> {
    let mut out = String::with_capacity(text.len());
    let mut rest = text;
    while let Some(open) = rest.find('<') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let close = after.find(['>', '<', '\n']);
        match close {
            Some(end) if after.as_bytes()[end] == b'>' && is_placeholder_name(&after[..end]) => {
                let name = &after[..end];
                if let Some(value) = substitutions.get(name) {
                    out.push_str(value);
                } else if is_image_slot(name) {
                    out.push('<');
                    out.push_str(name);
                    out.push('>');
                } else {
                    return Err(PromptError::MissingPlaceholder {
                        template: template_name.to_string(),
                        placeholder: name.to_string(),
                    });
                }
                rest = &after[end + 1..];
            }
            _ => {
                out.push('<');
                rest = after;
            }
        }
    }
    out.push_str(rest);
    Ok(out)
}
