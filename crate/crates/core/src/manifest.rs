//! Run manifest: where the nominal, validation and per-factor embedding sets
//! live, the nominal success rate, and optionally measured per-factor success.
//!
//! Relative paths are resolved against the manifest's own directory.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use serde::de::{MapAccess, Visitor};
use serde::{Deserialize, Deserializer, Serialize};
use thiserror::Error;

use crate::embedding::{load_embedding_set, EmbeddingError, EmbeddingSet};

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Parse {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("invalid manifest: {0}")]
    Invalid(String),
    #[error("{path}: {source}")]
    Load {
        path: PathBuf,
        #[source]
        source: EmbeddingError,
    },
}

/// Whether factor sets hold generated edits or real off-nominal observations.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObservationSource {
    #[default]
    Edited,
    Real,
}

impl fmt::Display for ObservationSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Edited => "edited",
            Self::Real => "real",
        })
    }
}

fn is_edited(source: &ObservationSource) -> bool {
    *source == ObservationSource::Edited
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub nominal: PathBuf,
    pub validation: PathBuf,
    #[serde(deserialize_with = "unique_keys")]
    pub factors: IndexMap<String, PathBuf>,
    pub r_nom: f64,
    #[serde(
        default,
        skip_serializing_if = "Option::is_none",
        deserialize_with = "optional_unique_keys"
    )]
    pub measured_success: Option<IndexMap<String, f64>>,
    #[serde(default, skip_serializing_if = "is_edited")]
    pub source: ObservationSource,
    #[serde(skip)]
    base_dir: PathBuf,
}

/// Every embedding set a manifest points at, loaded and validated.
#[derive(Debug, Clone)]
pub struct ManifestSets {
    pub nominal: EmbeddingSet,
    pub validation: EmbeddingSet,
    /// In manifest order, labelled `factor:<name>`.
    pub factors: Vec<(String, EmbeddingSet)>,
}

impl Manifest {
    pub fn new(
        nominal: impl Into<PathBuf>,
        validation: impl Into<PathBuf>,
        factors: IndexMap<String, PathBuf>,
        r_nom: f64,
    ) -> Result<Self, ManifestError> {
        let manifest = Self {
            nominal: nominal.into(),
            validation: validation.into(),
            factors,
            r_nom,
            measured_success: None,
            source: ObservationSource::Edited,
            base_dir: PathBuf::new(),
        };
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn with_measured_success(mut self, measured: IndexMap<String, f64>) -> Result<Self, ManifestError> {
        self.measured_success = Some(measured);
        self.validate()?;
        Ok(self)
    }

    pub fn with_source(mut self, source: ObservationSource) -> Self {
        self.source = source;
        self
    }

    pub fn with_base_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.base_dir = dir.into();
        self
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self, ManifestError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| ManifestError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let manifest: Self = serde_json::from_str::<Self>(&text)
            .map_err(|source| ManifestError::Parse {
                path: path.to_path_buf(),
                source,
            })?
            .with_base_dir(path.parent().unwrap_or(Path::new(".")));
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes") + "\n"
    }

    pub fn validate(&self) -> Result<(), ManifestError> {
        if !(0.0..=1.0).contains(&self.r_nom) {
            return Err(ManifestError::Invalid(format!("r_nom {} outside [0, 1]", self.r_nom)));
        }
        if self.factors.is_empty() {
            return Err(ManifestError::Invalid("no factors listed".into()));
        }
        if let Some(name) = self.factors.keys().find(|k| k.trim().is_empty()) {
            return Err(ManifestError::Invalid(format!("empty factor name {name:?}")));
        }
        if let Some(measured) = &self.measured_success {
            for (name, value) in measured {
                if !(0.0..=1.0).contains(value) {
                    return Err(ManifestError::Invalid(format!(
                        "measured success for '{name}' is {value}, outside [0, 1]"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn base_dir(&self) -> &Path {
        &self.base_dir
    }

    pub fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.base_dir.join(path)
        }
    }

    fn load(&self, path: &Path, label: &str) -> Result<EmbeddingSet, ManifestError> {
        let resolved = self.resolve(path);
        load_embedding_set(&resolved, label).map_err(|source| ManifestError::Load { path: resolved, source })
    }

    pub fn load_sets(&self) -> Result<ManifestSets, ManifestError> {
        let nominal = self.load(&self.nominal, "nominal")?;
        let validation = self.load(&self.validation, "validation")?;
        let factors = self
            .factors
            .iter()
            .map(|(name, path)| Ok((name.clone(), self.load(path, &format!("factor:{name}"))?)))
            .collect::<Result<Vec<_>, ManifestError>>()?;
        Ok(ManifestSets {
            nominal,
            validation,
            factors,
        })
    }
}

struct UniqueKeys<V>(std::marker::PhantomData<V>);

impl<'de, V: Deserialize<'de>> Visitor<'de> for UniqueKeys<V> {
    type Value = IndexMap<String, V>;

    fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("an object with distinct keys")
    }

    fn visit_map<A: MapAccess<'de>>(self, mut access: A) -> Result<Self::Value, A::Error> {
        let mut map = IndexMap::new();
        let mut seen = HashSet::new();
        while let Some((key, value)) = access.next_entry::<String, V>()? {
            if !seen.insert(key.clone()) {
                return Err(serde::de::Error::custom(format!("duplicate key '{key}'")));
            }
            map.insert(key, value);
        }
        Ok(map)
    }
}

fn unique_keys<'de, D, V>(deserializer: D) -> Result<IndexMap<String, V>, D::Error>
where
    D: Deserializer<'de>,
    V: Deserialize<'de>,
{
    deserializer.deserialize_map(UniqueKeys(std::marker::PhantomData))
}

fn optional_unique_keys<'de, D, V>(deserializer: D) -> Result<Option<IndexMap<String, V>>, D::Error>
where
    D: Deserializer<'de>,
    V: Deserialize<'de>,
{
    unique_keys(deserializer).map(Some)
}

#[cfg(test)]
mod tests {
    use super::*;

    const VALID: &str = r#"{
        "nominal": "nom.emb",
        "validation": "val.emb",
        "factors": {"blue_lighting": "f1.emb", "table_height": "/abs/f2.emb"},
        "r_nom": 0.65,
        "measured_success": {"blue_lighting": 0.2, "table_height": 0.1}
    }"#;

    fn parse(text: &str) -> Result<Manifest, serde_json::Error> {
        serde_json::from_str(text)
    }

    #[test]
    fn parses_and_preserves_factor_order() {
        let m = parse(VALID).unwrap().with_base_dir("/data/run");
        m.validate().unwrap();
        let names: Vec<_> = m.factors.keys().cloned().collect();
        assert_eq!(names, ["blue_lighting", "table_height"]);
        assert_eq!(m.source, ObservationSource::Edited);
        assert_eq!(m.resolve(Path::new("f1.emb")), PathBuf::from("/data/run/f1.emb"));
        assert_eq!(m.resolve(Path::new("/abs/f2.emb")), PathBuf::from("/abs/f2.emb"));
    }

    #[test]
    fn rejects_duplicate_factor_names() {
        let text = r#"{"nominal":"a","validation":"b","factors":{"x":"1","x":"2"},"r_nom":0.5}"#;
        let err = parse(text).unwrap_err();
        assert!(err.to_string().contains("duplicate key 'x'"));
    }

    #[test]
    fn rejects_out_of_range_values() {
        let text = r#"{"nominal":"a","validation":"b","factors":{"x":"1"},"r_nom":1.5}"#;
        assert!(parse(text).unwrap().validate().is_err());
        let text = r#"{"nominal":"a","validation":"b","factors":{"x":"1"},"r_nom":0.5,
                      "measured_success":{"x":-0.1}}"#;
        assert!(parse(text).unwrap().validate().is_err());
        let text = r#"{"nominal":"a","validation":"b","factors":{"":"1"},"r_nom":0.5}"#;
        assert!(parse(text).unwrap().validate().is_err());
    }

    #[test]
    fn real_source_round_trips() {
        let text = r#"{"nominal":"a","validation":"b","factors":{"x":"1"},"r_nom":0.5,"source":"real"}"#;
        let m = parse(text).unwrap();
        assert_eq!(m.source, ObservationSource::Real);
        let back = parse(&m.to_json()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn parse_errors_carry_location() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        fs::write(&path, "{\n  \"nominal\": \"a\",\n  \"r_nom\": oops\n}").unwrap();
        let err = Manifest::from_path(&path).unwrap_err().to_string();
        assert!(err.contains("m.json"), "{err}");
        assert!(err.contains("line 3"), "{err}");
    }
}
