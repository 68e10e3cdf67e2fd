//! Shared service state: uploaded cohorts, the model registry and the
//! artifact directory.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use dosegp_core::cohort::{PatientRecord, VariableSchema};
use dosegp_core::pipeline::{TrainReport, TrainedPipeline};
use dosegp_core::store::{self, ModelArtifact};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::ErrorBody;

pub struct StoredCohort {
    pub records: Vec<PatientRecord>,
    pub schema: VariableSchema,
}

pub struct ReadyModel {
    pub pipeline: TrainedPipeline,
    pub digest: String,
    pub cohort_id: Option<String>,
    pub metrics: Value,
}

pub enum ModelEntry {
    Training { cohort_id: String },
    Ready(Arc<ReadyModel>),
    Failed { cohort_id: String, error: ErrorBody },
}

/// Sidecar written next to each artifact so restarts keep the metrics.
#[derive(Debug, Serialize, Deserialize)]
pub struct ReportFile {
    pub model_id: String,
    pub cohort_id: Option<String>,
    pub digest: String,
    pub metrics: Value,
}

pub struct AppState {
    pub artifact_dir: PathBuf,
    pub default_seed: u64,
    pub cohorts: RwLock<HashMap<String, Arc<StoredCohort>>>,
    pub models: RwLock<BTreeMap<String, ModelEntry>>,
    /// Cohorts with a training job in flight.
    pub training: Mutex<HashSet<String>>,
    next_id: Mutex<u64>,
}

fn parse_model_id(file_name: &str) -> Option<u64> {
    let stem = file_name.strip_suffix(".json")?.strip_prefix('m')?;
    if stem.is_empty() || !stem.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    stem.parse().ok()
}

pub fn model_id(n: u64) -> String {
    format!("m{n:04}")
}

impl AppState {
    /// Open the artifact directory, creating it if needed, and restore every
    /// model artifact found there.
    pub fn open(artifact_dir: &Path, default_seed: u64) -> std::io::Result<Self> {
        fs::create_dir_all(artifact_dir)?;
        let mut found: Vec<(u64, PathBuf)> = fs::read_dir(artifact_dir)?
            .filter_map(|e| e.ok())
            .filter_map(|e| {
                let name = e.file_name().to_string_lossy().into_owned();
                parse_model_id(&name).map(|n| (n, e.path()))
            })
            .collect();
        found.sort();
        let mut models = BTreeMap::new();
        let mut last = 0;
        for (n, path) in found {
            last = last.max(n);
            let id = model_id(n);
            let artifact = match fs::read(&path).map_err(|e| e.to_string()).and_then(|b| store::restore(&b).map_err(|e| e.to_string())) {
                Ok(a) => a,
                Err(e) => {
                    log::warn!("skipping {}: {e}", path.display());
                    continue;
                }
            };
            let report: Option<ReportFile> = fs::read(artifact_dir.join(format!("{id}.report.json")))
                .ok()
                .and_then(|b| serde_json::from_slice(&b).ok());
            let (cohort_id, metrics) = match report {
                Some(r) if r.digest == artifact.digest => (r.cohort_id, r.metrics),
                _ => (None, Value::Null),
            };
            log::info!("restored model {id} ({})", artifact.digest);
            let digest = artifact.digest.clone();
            models.insert(
                id,
                ModelEntry::Ready(Arc::new(ReadyModel {
                    pipeline: artifact.into_pipeline(),
                    digest,
                    cohort_id,
                    metrics,
                })),
            );
        }
        Ok(AppState {
            artifact_dir: artifact_dir.to_path_buf(),
            default_seed,
            cohorts: RwLock::new(HashMap::new()),
            models: RwLock::new(models),
            training: Mutex::new(HashSet::new()),
            next_id: Mutex::new(last + 1),
        })
    }

    pub fn allocate_model_id(&self) -> String {
        let mut next = self.next_id.lock().unwrap();
        let id = model_id(*next);
        *next += 1;
        id
    }

    /// Write the artifact and its report; the artifact is renamed into place
    /// so a crash never leaves a partial file under a model name.
    pub fn persist(&self, id: &str, pipeline: &TrainedPipeline, cohort_id: &str, metrics: &Value) -> std::io::Result<String> {
        let artifact = ModelArtifact::from_pipeline(pipeline);
        let bytes = store::serialize(&artifact);
        let path = self.artifact_dir.join(format!("{id}.json"));
        let tmp = self.artifact_dir.join(format!(".{id}.json.tmp"));
        fs::write(&tmp, &bytes)?;
        fs::rename(&tmp, &path)?;
        let report = ReportFile {
            model_id: id.into(),
            cohort_id: Some(cohort_id.into()),
            digest: artifact.digest.clone(),
            metrics: metrics.clone(),
        };
        let mut text = serde_json::to_vec_pretty(&report).expect("report encodes");
        text.push(b'\n');
        fs::write(self.artifact_dir.join(format!("{id}.report.json")), text)?;
        Ok(artifact.digest)
    }
}

/// Metrics returned by training: the CV table, the cross-entropy pair and
/// the selected hyperparameters.
pub fn metrics_of(report: &TrainReport) -> Value {
    let ce = |d: &dosegp_core::outcome::ClassifierDiagnostics| {
        serde_json::json!({
            "calibrated": d.cross_entropy,
            "baseline": d.baseline_cross_entropy,
        })
    };
    serde_json::json!({
        "cv_mse": report.cv.as_ref().map(|t| &t.rows),
        "folds": report.cv.as_ref().map(|t| t.folds),
        "cross_entropy": {
            "lc": ce(&report.cross_entropy.lc),
            "rp2": ce(&report.cross_entropy.rp2),
        },
        "hyperparameters": report.hyperparameters,
        "compensation_note": report.compensation_note,
    })
}
