//! Versioned, self-describing model artifacts.
//!
//! An artifact is a pretty-printed JSON object with the top-level keys
//! `version`, `schema`, `scaling`, `transition`, `evaluation`,
//! `compensation`, `config` and `digest`. The digest is the SHA-256 of the
//! compact, key-sorted encoding of every other key. Floats are written in
//! shortest round-trip form, so restored models predict bit-identically.

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::cohort::{Scaling, VariableSchema};
use crate::config::RunConfig;
use crate::decision::CompensationModel;
use crate::outcome::EvaluationModel;
use crate::pipeline::TrainedPipeline;
use crate::transition::TransitionModel;

pub const FORMAT_VERSION: u64 = 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StoreError {
    #[error("truncated artifact: {0}")]
    Truncated(String),
    #[error("malformed artifact: {0}")]
    Malformed(String),
    #[error("artifact format version {found} is not supported (this build reads version {supported})")]
    VersionMismatch { found: u64, supported: u64 },
    #[error("digest mismatch: recorded {recorded}, computed {computed}")]
    DigestMismatch { recorded: String, computed: String },
    #[error("cannot rebuild models from artifact: {0}")]
    Rebuild(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelArtifact {
    pub version: u64,
    pub schema: VariableSchema,
    pub scaling: Scaling,
    pub transition: TransitionModel,
    pub evaluation: EvaluationModel,
    pub compensation: Option<CompensationModel>,
    pub config: RunConfig,
    pub digest: String,
}

fn digest_of(payload: &Value) -> String {
    // Value maps are BTreeMaps, so the compact encoding has sorted keys.
    let text = serde_json::to_string(payload).expect("json values always encode");
    hex::encode(Sha256::digest(text.as_bytes()))
}

impl ModelArtifact {
    pub fn from_pipeline(p: &TrainedPipeline) -> Self {
        let mut a = ModelArtifact {
            version: FORMAT_VERSION,
            schema: p.schema.clone(),
            scaling: p.scaling.clone(),
            transition: p.transition.clone(),
            evaluation: p.evaluation.clone(),
            compensation: p.compensation.clone(),
            config: p.config.clone(),
            digest: String::new(),
        };
        a.digest = a.compute_digest();
        a
    }

    fn payload(&self) -> Value {
        let mut v = serde_json::to_value(self).expect("artifact encodes");
        v.as_object_mut().expect("artifact is an object").remove("digest");
        v
    }

    pub fn compute_digest(&self) -> String {
        digest_of(&self.payload())
    }

    pub fn into_pipeline(self) -> TrainedPipeline {
        TrainedPipeline {
            schema: self.schema,
            scaling: self.scaling,
            transition: self.transition,
            evaluation: self.evaluation,
            compensation: self.compensation,
            config: self.config,
        }
    }
}

/// Encode an artifact. Deterministic: equal artifacts give equal bytes.
pub fn serialize(artifact: &ModelArtifact) -> Vec<u8> {
    let mut v = artifact.payload();
    v.as_object_mut()
        .expect("artifact is an object")
        .insert("digest".into(), Value::String(artifact.compute_digest()));
    let mut out = serde_json::to_vec_pretty(&v).expect("json values always encode");
    out.push(b'\n');
    out
}

/// Decode an artifact, checking the format version and the digest before
/// rebuilding the models.
pub fn restore(bytes: &[u8]) -> Result<ModelArtifact, StoreError> {
    let mut value: Value = serde_json::from_slice(bytes).map_err(|e| match e.classify() {
        serde_json::error::Category::Eof => StoreError::Truncated(e.to_string()),
        _ => StoreError::Malformed(e.to_string()),
    })?;
    let obj = value
        .as_object_mut()
        .ok_or_else(|| StoreError::Malformed("top level is not an object".into()))?;
    let found = obj
        .get("version")
        .and_then(Value::as_u64)
        .ok_or_else(|| StoreError::Malformed("missing integer `version`".into()))?;
    if found != FORMAT_VERSION {
        return Err(StoreError::VersionMismatch {
            found,
            supported: FORMAT_VERSION,
        });
    }
    let recorded = match obj.remove("digest") {
        Some(Value::String(s)) => s,
        _ => return Err(StoreError::Malformed("missing string `digest`".into())),
    };
    let computed = digest_of(&value);
    if computed != recorded {
        return Err(StoreError::DigestMismatch { recorded, computed });
    }
    value
        .as_object_mut()
        .expect("checked above")
        .insert("digest".into(), Value::String(recorded));
    serde_json::from_value(value).map_err(|e| StoreError::Rebuild(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::train;
    use crate::synth::SyntheticTruth;
    use crate::transition::PredictorConfig;

    fn pipeline() -> (TrainedPipeline, Vec<crate::cohort::PatientRecord>) {
        let mut c = RunConfig::default();
        c.predictor = PredictorConfig::Linear { ridge: 1e-6 };
        c.cross_validate = false;
        c.fit_compensation = false;
        c.schema.truncation_quantile = 1.0;
        let recs = SyntheticTruth::default().generate_records(25, 8, "p");
        let cohort = crate::cohort::preprocess(&recs, &c.schema).unwrap();
        (train(&cohort, &c).unwrap().0, recs)
    }

    #[test]
    fn round_trip_is_exact_and_deterministic() {
        let (p, recs) = pipeline();
        let a = ModelArtifact::from_pipeline(&p);
        let bytes = serialize(&a);
        assert_eq!(bytes, serialize(&a));
        let back = restore(&bytes).unwrap();
        assert_eq!(back, a);
        assert_eq!(serialize(&back), bytes);
        let q = back.into_pipeline();
        let state = &recs[3].states[2];
        let doses: Vec<f64> = (0..10).map(|i| 1.5 + 0.35 * i as f64).collect();
        assert_eq!(p.whatif(state, &doses, 3).unwrap(), q.whatif(state, &doses, 3).unwrap());
    }

    #[test]
    fn distinct_failure_kinds() {
        let a = ModelArtifact::from_pipeline(&pipeline().0);
        let bytes = serialize(&a);
        let text = String::from_utf8(bytes.clone()).unwrap();

        assert!(matches!(restore(&bytes[..bytes.len() / 2]), Err(StoreError::Truncated(_))));
        assert!(matches!(restore(b"[1, 2"), Err(StoreError::Truncated(_))));
        assert!(matches!(restore(b"{\"version\": 1,}"), Err(StoreError::Malformed(_))));

        // flip one digit inside the payload
        let pos = text.find("\"precision\": ").unwrap() + "\"precision\": ".len();
        let mut corrupted = bytes.clone();
        corrupted[pos] = if corrupted[pos] == b'1' { b'2' } else { b'1' };
        assert!(matches!(restore(&corrupted), Err(StoreError::DigestMismatch { .. })));

        let future = text.replacen("\"version\": 1", "\"version\": 7", 1);
        let err = restore(future.as_bytes()).unwrap_err();
        assert_eq!(
            err,
            StoreError::VersionMismatch {
                found: 7,
                supported: 1
            }
        );
        let msg = err.to_string();
        assert!(msg.contains('7') && msg.contains('1'));
    }
}
