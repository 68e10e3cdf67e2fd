use serde::{Deserialize, Serialize};

use super::{CohortError, DoseBounds, PatientRecord, ScaledCohort, VariableSchema};
use crate::STAGES;

/// Dose column name accepted by [`inverse_scale`] and [`Scaling::index_of`].
pub const DOSE_NAME: &str = "dose_gy_per_frac";

/// Empirical quantile with linear interpolation between order statistics
/// (`h = (n - 1) q`, the "type 7" definition).
pub fn empirical_quantile(values: &[f64], q: f64) -> Option<f64> {
    if values.is_empty() || !(0.0..=1.0).contains(&q) {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    Some(sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo]))
}

/// Cap every value above the empirical `q`-quantile at that quantile.
/// Returns the capped values and the cap.
pub fn truncate_quantile(values: &[f64], q: f64) -> Result<(Vec<f64>, f64), CohortError> {
    if values.is_empty() {
        return Err(CohortError::Variable {
            variable: String::new(),
            message: "cannot truncate an empty vector".into(),
        });
    }
    if !(q > 0.0 && q <= 1.0) {
        return Err(CohortError::Variable {
            variable: String::new(),
            message: format!("quantile {q} outside (0, 1]"),
        });
    }
    let cap = empirical_quantile(values, q).expect("non-empty");
    Ok((values.iter().map(|&v| v.min(cap)).collect(), cap))
}

/// Per-variable truncation cap and affine scaling range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariableScaling {
    pub name: String,
    pub constant: bool,
    /// Truncation cap in original units; `None` for constant variables.
    pub cap: Option<f64>,
    /// Cohort minimum after truncation (maps to 0).
    pub min: f64,
    /// Cohort maximum after truncation (maps to 1).
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaling {
    pub variables: Vec<VariableScaling>,
    pub dose_bounds: DoseBounds,
}

impl Scaling {
    pub fn q(&self) -> usize {
        self.variables.len()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.variables.iter().position(|v| v.name == name)
    }

    /// Truncate and scale one original-unit value of variable `k`.
    pub fn scale_value(&self, k: usize, v: f64) -> f64 {
        let s = &self.variables[k];
        if s.constant {
            return v;
        }
        let v = match s.cap {
            Some(cap) => v.min(cap),
            None => v,
        };
        (v - s.min) / (s.max - s.min)
    }

    pub fn unscale_value(&self, k: usize, x: f64) -> f64 {
        let s = &self.variables[k];
        if s.constant {
            return x;
        }
        s.min + x * (s.max - s.min)
    }

    pub fn scale_state(&self, state: &[f64]) -> Vec<f64> {
        state.iter().enumerate().map(|(k, &v)| self.scale_value(k, v)).collect()
    }

    pub fn unscale_state(&self, state: &[f64]) -> Vec<f64> {
        state.iter().enumerate().map(|(k, &x)| self.unscale_value(k, x)).collect()
    }

    pub fn scale_dose(&self, dose: f64) -> f64 {
        let b = self.dose_bounds;
        (dose - b.min) / (b.max - b.min)
    }

    pub fn unscale_dose(&self, x: f64) -> f64 {
        let b = self.dose_bounds;
        b.min + x * (b.max - b.min)
    }
}

/// Truncate every non-constant variable at its pooled (all patients, all
/// stages) empirical quantile. Returns the truncated records and per-variable
/// caps (`None` for constant variables).
pub fn truncate_cohort(
    records: &[PatientRecord],
    schema: &VariableSchema,
) -> Result<(Vec<PatientRecord>, Vec<Option<f64>>), CohortError> {
    schema.validate()?;
    if records.is_empty() {
        return Err(CohortError::Empty("cohort".into()));
    }
    let mut out = records.to_vec();
    let mut caps = Vec::with_capacity(schema.q());
    for (k, var) in schema.variables.iter().enumerate() {
        if var.constant {
            caps.push(None);
            continue;
        }
        let pooled: Vec<f64> = records
            .iter()
            .flat_map(|r| r.states.iter().map(move |s| s[k]))
            .collect();
        let (_, cap) = truncate_quantile(&pooled, schema.truncation_quantile).map_err(|e| match e {
            CohortError::Variable { message, .. } => CohortError::Variable {
                variable: var.name.clone(),
                message,
            },
            e => e,
        })?;
        for r in &mut out {
            for s in &mut r.states {
                s[k] = s[k].min(cap);
            }
        }
        caps.push(Some(cap));
    }
    Ok((out, caps))
}

/// Min-max scale truncated records into `[0, 1]`.
pub fn scale_unit_interval(
    records: &[PatientRecord],
    caps: &[Option<f64>],
    schema: &VariableSchema,
) -> Result<ScaledCohort, CohortError> {
    schema.validate()?;
    if records.is_empty() {
        return Err(CohortError::Empty("cohort".into()));
    }
    let mut variables = Vec::with_capacity(schema.q());
    for (k, var) in schema.variables.iter().enumerate() {
        if var.constant {
            variables.push(VariableScaling {
                name: var.name.clone(),
                constant: true,
                cap: None,
                min: 0.0,
                max: 1.0,
            });
            continue;
        }
        let (min, max) = records
            .iter()
            .flat_map(|r| r.states.iter().map(move |s| s[k]))
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
        if min == max {
            return Err(CohortError::Variable {
                variable: var.name.clone(),
                message: format!(
                    "minimum equals maximum ({min}) after truncation; flag the variable as constant"
                ),
            });
        }
        variables.push(VariableScaling {
            name: var.name.clone(),
            constant: false,
            cap: caps.get(k).copied().flatten(),
            min,
            max,
        });
    }
    let scaling = Scaling {
        variables,
        dose_bounds: schema.dose_bounds,
    };

    let mut states: [Vec<Vec<f64>>; STAGES] = Default::default();
    let mut doses: [Vec<f64>; STAGES] = Default::default();
    for r in records {
        for t in 0..STAGES {
            states[t].push(scaling.scale_state(&r.states[t]));
            doses[t].push(scaling.scale_dose(r.doses[t]));
        }
    }
    Ok(ScaledCohort {
        patient_ids: records.iter().map(|r| r.patient_id.clone()).collect(),
        states,
        doses,
        lc: records.iter().map(|r| r.lc as u8).collect(),
        rp2: records.iter().map(|r| r.rp2 as u8).collect(),
        scaling,
    })
}

/// Truncate then scale.
pub fn preprocess(records: &[PatientRecord], schema: &VariableSchema) -> Result<ScaledCohort, CohortError> {
    let (truncated, caps) = truncate_cohort(records, schema)?;
    scale_unit_interval(&truncated, &caps, schema)
}

/// Map a scaled value of `variable` back to original units. Accepts the dose
/// column name as well as schema variables.
pub fn inverse_scale(x: f64, variable: &str, cohort: &ScaledCohort) -> Result<f64, CohortError> {
    if variable == DOSE_NAME {
        return Ok(cohort.scaling.unscale_dose(x));
    }
    let k = cohort
        .scaling
        .index_of(variable)
        .ok_or_else(|| CohortError::UnknownVariable(variable.into()))?;
    Ok(cohort.scaling.unscale_value(k, x))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Independent order-statistic oracle: sort, locate rank (n-1)q, interpolate.
    fn oracle_quantile(v: &[f64], q: f64) -> f64 {
        let mut s = v.to_vec();
        s.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let rank = q * (s.len() as f64 - 1.0);
        let below = rank as usize;
        if below + 1 >= s.len() {
            return s[s.len() - 1];
        }
        let frac = rank - below as f64;
        (1.0 - frac) * s[below] + frac * s[below + 1]
    }

    #[test]
    fn seventy_percent_cap_of_one_to_ten() {
        let v: Vec<f64> = (1..=10).map(f64::from).collect();
        let expected = oracle_quantile(&v, 0.7);
        assert!((expected - 7.3).abs() < 1e-12);
        let (capped, cap) = truncate_quantile(&v, 0.7).unwrap();
        assert!((cap - expected).abs() < 1e-12);
        for (orig, c) in v.iter().zip(&capped) {
            if *orig > expected {
                assert_eq!(*c, cap);
            } else {
                assert_eq!(c, orig);
            }
        }
    }

    #[test]
    fn degenerate_and_full_quantile_leave_values_unchanged() {
        let v = vec![3.5; 6];
        assert_eq!(truncate_quantile(&v, 0.7).unwrap().0, v);
        let w = vec![4.0, -1.0, 2.0, 9.0];
        let (c, cap) = truncate_quantile(&w, 1.0).unwrap();
        assert_eq!(c, w);
        assert_eq!(cap, 9.0);
        assert!(truncate_quantile(&[], 0.7).is_err());
    }

    fn record(id: &str, base: f64) -> PatientRecord {
        let schema = VariableSchema::default();
        let mk = |t: f64| {
            (0..schema.q())
                .map(|k| if schema.variables[k].constant { 1.0 } else { base + t + k as f64 })
                .collect::<Vec<_>>()
        };
        PatientRecord {
            patient_id: id.into(),
            states: [mk(0.0), mk(1.0), mk(2.0)],
            doses: [2.0, 2.0, 3.0],
            lc: true,
            rp2: false,
        }
    }

    #[test]
    fn scaling_endpoints_and_midpoint() {
        let mut schema = VariableSchema::default();
        schema.truncation_quantile = 1.0;
        let recs = vec![record("a", 0.0), record("b", 2.0)];
        let c = preprocess(&recs, &schema).unwrap();
        // variable 0 ranges over 0..=4 pooled; stage 3 of patient a is 2.0
        assert_eq!(c.states[0][0][0], 0.0);
        assert_eq!(c.states[2][1][0], 1.0);
        assert_eq!(c.states[2][0][0], 0.5);
        assert_eq!(inverse_scale(0.0, "il4", &c).unwrap(), 0.0);
        assert_eq!(inverse_scale(1.0, "il4", &c).unwrap(), 4.0);
        assert!(inverse_scale(0.3, "nope", &c).is_err());
        assert!((c.doses[2][0] - (3.0 - 1.5) / 3.5).abs() < 1e-15);
    }

    #[test]
    fn one_maps_to_truncation_cap() {
        let schema = VariableSchema::default();
        let recs: Vec<_> = (0..5).map(|i| record(&format!("p{i}"), i as f64)).collect();
        let c = preprocess(&recs, &schema).unwrap();
        let cap = c.scaling.variables[0].cap.unwrap();
        assert_eq!(inverse_scale(1.0, "il4", &c).unwrap(), cap);
        for t in 0..STAGES {
            for s in &c.states[t] {
                assert!(s.iter().all(|&x| (0.0..=1.0).contains(&x)));
            }
        }
    }

    #[test]
    fn zero_range_variable_suggests_constant_flag() {
        let schema = VariableSchema::default();
        let mut recs = vec![record("a", 0.0), record("b", 2.0)];
        for r in &mut recs {
            for s in &mut r.states {
                s[3] = 7.0;
            }
        }
        match preprocess(&recs, &schema).unwrap_err() {
            CohortError::Variable { variable, message } => {
                assert_eq!(variable, "ip10");
                assert!(message.contains("constant"));
            }
            e => panic!("unexpected {e:?}"),
        }
    }

    #[test]
    fn constant_variables_pass_through_bit_identically() {
        let schema = VariableSchema::default();
        let mut recs: Vec<_> = (0..6).map(|i| record(&format!("p{i}"), i as f64)).collect();
        for (i, r) in recs.iter_mut().enumerate() {
            for s in &mut r.states {
                s[10] = 0.1 * i as f64 + 0.013;
            }
        }
        let c = preprocess(&recs, &schema).unwrap();
        for (i, r) in recs.iter().enumerate() {
            for t in 0..STAGES {
                assert_eq!(c.states[t][i][10].to_bits(), r.states[t][10].to_bits());
            }
        }
    }

    proptest! {
        #[test]
        fn cap_application_is_idempotent(v in proptest::collection::vec(-1e3f64..1e3, 1..60), q in 0.05f64..1.0) {
            let (once, cap) = truncate_quantile(&v, q).unwrap();
            let twice: Vec<f64> = once.iter().map(|&x| x.min(cap)).collect();
            prop_assert_eq!(&once, &twice);
            // Re-estimating the quantile on truncated data never raises the cap.
            let (_, cap2) = truncate_quantile(&once, q).unwrap();
            prop_assert!(cap2 <= cap);
        }

        #[test]
        fn quantile_matches_sort_oracle(v in proptest::collection::vec(-1e3f64..1e3, 1..60), q in 0.0f64..=1.0) {
            let got = empirical_quantile(&v, q).unwrap();
            let want = oracle_quantile(&v, q);
            prop_assert!((got - want).abs() <= 1e-9 * (1.0 + want.abs()));
        }

        #[test]
        fn scale_round_trip(vals in proptest::collection::vec(0.0f64..1.0, 20)) {
            let schema = VariableSchema::default();
            let recs: Vec<_> = (0..5).map(|i| record(&format!("p{i}"), i as f64 * 1.7)).collect();
            let c = preprocess(&recs, &schema).unwrap();
            for (j, x) in vals.iter().enumerate() {
                let k = j % 9;
                let orig = c.scaling.unscale_value(k, *x);
                let back = c.scaling.scale_value(k, orig);
                prop_assert!((back - x).abs() < 1e-12);
                let again = c.scaling.unscale_value(k, back);
                prop_assert!((again - orig).abs() < 1e-12 * (1.0 + orig.abs()));
            }
        }
    }
}
