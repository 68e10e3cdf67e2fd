//! Run configuration shared by the CLI, the service and model artifacts.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cohort::VariableSchema;
use crate::decision::DecisionConfig;
use crate::gp::{GridSpec, DEFAULT_JITTER};
use crate::propagation::EivVariant;
use crate::transition::PredictorConfig;
use crate::{Error, Result};

/// Everything needed to reproduce a run. Every field has a default, so a
/// config file only lists what it changes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub states: Option<PathBuf>,
    pub outcomes: Option<PathBuf>,
    pub seed: u64,
    pub folds: usize,
    /// Compute the cross-validated transition table during training.
    pub cross_validate: bool,
    pub schema: VariableSchema,
    pub predictor: PredictorConfig,
    pub jitter: f64,
    pub transition_grid: GridSpec,
    pub evaluation_grid: GridSpec,
    pub compensation_grid: GridSpec,
    pub decision: DecisionConfig,
    pub eiv: EivVariant,
    pub laplace_variance: bool,
    /// Fit the compensation model on the training cohort's own verdicts.
    pub fit_compensation: bool,
    pub compensation_variables: Vec<String>,
    pub map_resolution: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            states: None,
            outcomes: None,
            seed: 0,
            folds: 5,
            cross_validate: true,
            schema: VariableSchema::default(),
            predictor: PredictorConfig::default(),
            jitter: DEFAULT_JITTER,
            transition_grid: GridSpec::default(),
            evaluation_grid: GridSpec::default(),
            compensation_grid: GridSpec::default(),
            decision: DecisionConfig::default(),
            eiv: EivVariant::default(),
            laplace_variance: false,
            fit_compensation: true,
            compensation_variables: vec!["tumor_geud".into(), "lung_geud".into()],
            map_resolution: 20,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let c: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut c = Self::from_json(&text)?;
        // relative data paths are resolved against the config file
        if let Some(dir) = path.parent() {
            for p in [&mut c.states, &mut c.outcomes].into_iter().flatten() {
                if p.is_relative() {
                    *p = dir.join(&*p);
                }
            }
            if let PredictorConfig::External { path: p } = &mut c.predictor {
                if p.is_relative() {
                    *p = dir.join(&*p);
                }
            }
        }
        Ok(c)
    }

    /// Set the run seed and the builtin predictor's seed together.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        if let PredictorConfig::Mlp(m) = &mut self.predictor {
            m.seed = seed;
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.schema.validate()?;
        for g in [&self.transition_grid, &self.evaluation_grid, &self.compensation_grid] {
            g.validate()?;
        }
        self.decision.grid.validate()?;
        if self.folds < 2 {
            return Err(Error::Config(format!("folds must be at least 2, got {}", self.folds)));
        }
        if self.decision.samples < 2 {
            return Err(Error::Config("decision.samples must be at least 2".into()));
        }
        if !(self.decision.alpha > 0.0 && self.decision.alpha < 1.0) {
            return Err(Error::Config("decision.alpha must be in (0, 1)".into()));
        }
        if !(self.jitter >= 0.0 && self.jitter.is_finite()) {
            return Err(Error::Config("jitter must be finite and non-negative".into()));
        }
        let b = self.schema.dose_bounds;
        let g = &self.decision.grid;
        if g.min < b.min - 1e-12 || g.max > b.max + 1e-12 {
            return Err(Error::Config(format!(
                "dose grid [{}, {}] exceeds dose bounds [{}, {}]",
                g.min, g.max, b.min, b.max
            )));
        }
        for v in &self.compensation_variables {
            if self.schema.index_of(v).is_none() {
                return Err(Error::Config(format!("unknown compensation variable `{v}`")));
            }
        }
        if self.map_resolution == 0 {
            return Err(Error::Config("map_resolution must be positive".into()));
        }
        Ok(())
    }
}
