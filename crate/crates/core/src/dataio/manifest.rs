//! Dataset manifests: JSON files listing image/annotation pairs plus the
//! landmark conventions (pupil and eye-corner indices, boundary
//! definitions, flip permutation) of the annotation scheme.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heatmaps::BoundaryDefinition;

#[derive(Debug, Clone, Serialize, Deserialize, Default, PartialEq)]
pub struct LandmarkConventions {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pupils: Option<PupilIndices>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eye_corners: Option<EyeCorners>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub boundaries: Option<Vec<Vec<usize>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flip_permutation: Option<Vec<usize>>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PupilIndices {
    pub left: Vec<usize>,
    pub right: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EyeCorners {
    pub left_outer: usize,
    pub right_outer: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ManifestEntry {
    pub image: String,
    pub annotation: String,
    /// Ground-truth detection box (width, height) in pixels.
    #[serde(default, rename = "box", skip_serializing_if = "Option::is_none")]
    pub box_wh: Option<(f64, f64)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub visibility: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub tags: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize, Default, PartialEq)]
pub struct DatasetManifest {
    #[serde(default)]
    pub conventions: LandmarkConventions,
    #[serde(default)]
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    /// Parse and structurally validate a manifest without touching the
    /// filesystem.
    pub fn from_json(json: &str) -> Result<Self> {
        let manifest: DatasetManifest =
            serde_json::from_str(json).map_err(|e| Error::Parse(format!("manifest: {e}")))?;
        manifest.validate_structure()?;
        Ok(manifest)
    }

    /// Load a manifest and verify every referenced path resolves relative
    /// to the manifest's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let json = std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let manifest = Self::from_json(&json)?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        for entry in &manifest.entries {
            for p in [Some(&entry.image), Some(&entry.annotation), entry.visibility.as_ref()]
                .into_iter()
                .flatten()
            {
                let full = base.join(p);
                if !full.exists() {
                    return Err(Error::Format {
                        path: path.display().to_string(),
                        message: format!("referenced path {} does not exist", full.display()),
                    });
                }
            }
        }
        Ok(manifest)
    }

    fn validate_structure(&self) -> Result<()> {
        if let Some(perm) = &self.conventions.flip_permutation {
            for (i, &j) in perm.iter().enumerate() {
                if j >= perm.len() || perm[j] != i {
                    return Err(Error::invalid(format!(
                        "flip permutation is not an involution at index {i}"
                    )));
                }
            }
        }
        if let Some(bounds) = &self.conventions.boundaries {
            BoundaryDefinition::new(bounds.clone())?;
        }
        Ok(())
    }

    pub fn boundary_definition(&self) -> Result<Option<BoundaryDefinition>> {
        match &self.conventions.boundaries {
            Some(b) => Ok(Some(BoundaryDefinition::new(b.clone())?)),
            None => Ok(None),
        }
    }

    /// Resolve an entry's paths against the manifest location.
    pub fn resolve(base: impl AsRef<Path>, relative: &str) -> PathBuf {
        base.as_ref().join(relative)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_minimal_manifest() {
        let m = DatasetManifest::from_json(r#"{"entries": []}"#).unwrap();
        assert!(m.entries.is_empty());
    }

    #[test]
    fn rejects_non_involution_flip() {
        let json = r#"{"conventions": {"flip_permutation": [1, 2, 0]}, "entries": []}"#;
        assert!(DatasetManifest::from_json(json).is_err());
        let json = r#"{"conventions": {"flip_permutation": [1, 0, 2]}, "entries": []}"#;
        assert!(DatasetManifest::from_json(json).is_ok());
    }

    #[test]
    fn load_checks_referenced_paths() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("a.pgm"), b"x").unwrap();
        let manifest_path = dir.path().join("m.json");
        let json = r#"{"entries": [{"image": "a.pgm", "annotation": "a.pts"}]}"#;
        std::fs::write(&manifest_path, json).unwrap();
        assert!(DatasetManifest::load(&manifest_path).is_err());
        std::fs::write(dir.path().join("a.pts"), b"x").unwrap();
        let m = DatasetManifest::load(&manifest_path).unwrap();
        assert_eq!(m.entries.len(), 1);
    }

    #[test]
    fn json_roundtrip() {
        let m = DatasetManifest {
            conventions: LandmarkConventions {
                pupils: Some(PupilIndices {
                    left: vec![36, 37],
                    right: vec![42, 43],
                }),
                eye_corners: Some(EyeCorners {
                    left_outer: 36,
                    right_outer: 45,
                }),
                boundaries: Some(vec![vec![0, 1, 2]]),
                flip_permutation: Some(vec![1, 0, 2]),
            },
            entries: vec![ManifestEntry {
                image: "img/x.ppm".into(),
                annotation: "pts/x.pts".into(),
                box_wh: Some((100.0, 80.0)),
                visibility: None,
                tags: vec!["pose".into()],
            }],
        };
        let json = serde_json::to_string(&m).unwrap();
        let back = DatasetManifest::from_json(&json).unwrap();
        assert_eq!(m, back);
    }
}
