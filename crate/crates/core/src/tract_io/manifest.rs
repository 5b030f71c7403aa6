use super::{read_tck, TractIoError};
use crate::geometry::{FiberCluster, ShapeVector};
use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterEntry {
    pub cluster_id: String,
    /// Relative paths resolve against the manifest's directory.
    pub file_path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth: Option<ShapeVector>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectEntry {
    pub subject_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
    pub clusters: Vec<ClusterEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    /// Provenance echo (tool version, generator config); free-form.
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    pub generator: serde_json::Value,
    pub subjects: Vec<SubjectEntry>,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl DatasetManifest {
    pub fn new(subjects: Vec<SubjectEntry>) -> Self {
        Self {
            generator: serde_json::Value::Null,
            subjects,
            base_dir: PathBuf::new(),
        }
    }

    pub fn n_clusters(&self) -> usize {
        self.subjects.iter().map(|s| s.clusters.len()).sum()
    }

    pub fn subject_ids(&self) -> Vec<String> {
        self.subjects.iter().map(|s| s.subject_id.clone()).collect()
    }

    pub fn subject(&self, subject_id: &str) -> Option<&SubjectEntry> {
        self.subjects.iter().find(|s| s.subject_id == subject_id)
    }

    /// `(subject_id, cluster)` pairs in manifest order.
    pub fn entries(&self) -> impl Iterator<Item = (&str, &ClusterEntry)> {
        self.subjects
            .iter()
            .flat_map(|s| s.clusters.iter().map(move |c| (s.subject_id.as_str(), c)))
    }

    pub fn resolve(&self, file_path: &Path) -> PathBuf {
        if file_path.is_absolute() {
            file_path.to_path_buf()
        } else {
            self.base_dir.join(file_path)
        }
    }

    pub fn load_cluster(
        &self,
        subject_id: &str,
        entry: &ClusterEntry,
    ) -> Result<FiberCluster, TractIoError> {
        let mut cluster = read_tck(self.resolve(&entry.file_path))?;
        cluster.id = entry.cluster_id.clone();
        cluster.subject_id = subject_id.to_string();
        Ok(cluster)
    }

    fn validate(&self, path: &Path) -> Result<(), TractIoError> {
        let schema = |field: String, message: &str| TractIoError::SchemaError {
            path: path.into(),
            line: None,
            field,
            message: message.into(),
        };
        let mut subjects = HashSet::new();
        for (si, subject) in self.subjects.iter().enumerate() {
            if !subjects.insert(subject.subject_id.as_str()) {
                return Err(schema(
                    format!("subjects[{si}].subject_id"),
                    &format!("duplicate subject id '{}'", subject.subject_id),
                ));
            }
            let mut ids = HashSet::new();
            for (ci, cluster) in subject.clusters.iter().enumerate() {
                if !ids.insert(cluster.cluster_id.as_str()) {
                    return Err(schema(
                        format!("subjects[{si}].clusters[{ci}].cluster_id"),
                        &format!("duplicate cluster id '{}'", cluster.cluster_id),
                    ));
                }
                if let Some(gt) = &cluster.ground_truth {
                    if !gt.is_valid() {
                        return Err(schema(
                            format!("subjects[{si}].clusters[{ci}].ground_truth"),
                            "shape measures must be finite and non-negative",
                        ));
                    }
                }
                let resolved = self.resolve(&cluster.file_path);
                if !resolved.is_file() {
                    return Err(TractIoError::MissingFile { path: resolved });
                }
            }
        }
        Ok(())
    }
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest, TractIoError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| TractIoError::io(path, e))?;
    let mut manifest: DatasetManifest =
        serde_json::from_str(&text).map_err(|e| TractIoError::SchemaError {
            path: path.into(),
            line: Some(e.line()),
            field: format!("column {}", e.column()),
            message: e.to_string(),
        })?;
    manifest.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    manifest.validate(path)?;
    Ok(manifest)
}

pub fn write_manifest(manifest: &DatasetManifest, path: impl AsRef<Path>) -> Result<(), TractIoError> {
    let path = path.as_ref();
    let mut text = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    text.push('\n');
    fs::write(path, text).map_err(|e| TractIoError::io(path, e))
}
