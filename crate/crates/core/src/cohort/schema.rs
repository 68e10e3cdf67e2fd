use serde::{Deserialize, Serialize};

use super::CohortError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Variable {
    /// Column identifier used in CSV files and API payloads.
    pub name: String,
    /// Human-readable label.
    pub label: String,
    pub unit: String,
    /// Constant within a patient across stages (the SNP genotypes). Constant
    /// variables are neither truncated nor scaled and are never predicted.
    pub constant: bool,
}

impl Variable {
    fn new(name: &str, label: &str, unit: &str, constant: bool) -> Self {
        Variable {
            name: name.into(),
            label: label.into(),
            unit: unit.into(),
            constant,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DoseBounds {
    pub min: f64,
    pub max: f64,
}

impl Default for DoseBounds {
    fn default() -> Self {
        DoseBounds { min: 1.5, max: 5.0 }
    }
}

impl DoseBounds {
    pub fn contains(&self, dose: f64) -> bool {
        dose >= self.min && dose <= self.max
    }
}

/// The ordered set of patient variables the models are trained on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VariableSchema {
    pub variables: Vec<Variable>,
    pub truncation_quantile: f64,
    pub dose_bounds: DoseBounds,
}

impl Default for VariableSchema {
    /// The twelve Markov-blanket variables of the lung cohort.
    ///
    /// `il5` follows the variable list used for model selection; the variable
    /// glossary of the same study describes interleukin 15 instead, so treat
    /// the name as a label rather than an assay identifier.
    fn default() -> Self {
        let vars = vec![
            Variable::new("il4", "il4", "pg/mL", false),
            Variable::new("il10", "il10", "pg/mL", false),
            Variable::new("il5", "il5", "pg/mL", false),
            Variable::new("ip10", "ip10", "pg/mL", false),
            Variable::new("mtv", "MTV", "cm^3", false),
            Variable::new("glszm_lzlge", "GLSZM_LZLGE", "a.u.", false),
            Variable::new("glszm_zsv", "GLSZM_ZSV", "a.u.", false),
            Variable::new("tumor_geud", "Tumor_gEUD", "Gy", false),
            Variable::new("lung_geud", "Lung_gEUD", "Gy", false),
            Variable::new("rs2234671", "Rs2234671", "carrier (0/1)", true),
            Variable::new("rs238406", "Rs238406", "carrier (0/1)", true),
            Variable::new("rs1047768", "Rs1047768", "carrier (0/1)", true),
        ];
        VariableSchema {
            variables: vars,
            truncation_quantile: 0.7,
            dose_bounds: DoseBounds::default(),
        }
    }
}

impl VariableSchema {
    pub fn validate(&self) -> Result<(), CohortError> {
        if self.variables.is_empty() {
            return Err(CohortError::Schema("no variables".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for v in &self.variables {
            if !seen.insert(v.name.as_str()) {
                return Err(CohortError::Schema(format!("duplicate variable `{}`", v.name)));
            }
        }
        if !(self.truncation_quantile > 0.0 && self.truncation_quantile <= 1.0) {
            return Err(CohortError::Schema(format!(
                "truncation quantile {} outside (0, 1]",
                self.truncation_quantile
            )));
        }
        let b = self.dose_bounds;
        if !(b.min > 0.0 && b.min < b.max && b.max.is_finite()) {
            return Err(CohortError::Schema(format!(
                "dose bounds ({}, {}) must satisfy 0 < min < max",
                b.min, b.max
            )));
        }
        Ok(())
    }

    pub fn q(&self) -> usize {
        self.variables.len()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.variables.iter().position(|v| v.name == name)
    }

    pub fn names(&self) -> Vec<&str> {
        self.variables.iter().map(|v| v.name.as_str()).collect()
    }

    pub fn constant_dims(&self) -> Vec<usize> {
        (0..self.q()).filter(|&k| self.variables[k].constant).collect()
    }

    pub fn active_dims(&self) -> Vec<usize> {
        (0..self.q()).filter(|&k| !self.variables[k].constant).collect()
    }
}
