use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::Read;
use std::path::Path;

use super::{CohortError, PatientRecord, VariableSchema};
use crate::STAGES;

/// Non-variable columns of the states file, in addition to the schema names.
pub const STATE_ID_COLUMNS: [&str; 3] = ["patient_id", "stage", "dose_gy_per_frac"];
/// Columns of the outcomes file.
pub const OUTCOME_COLUMNS: [&str; 3] = ["patient_id", "lc", "rp2"];

/// Load and validate a cohort from a states file and an outcomes file.
///
/// The whole cohort is rejected on the first violation.
pub fn load_cohort(
    states_path: &Path,
    outcomes_path: &Path,
    schema: &VariableSchema,
) -> Result<Vec<PatientRecord>, CohortError> {
    let open = |p: &Path| File::open(p).map_err(|e| CohortError::Io(format!("{}: {e}", p.display())));
    load_cohort_from_readers(
        open(states_path)?,
        &states_path.display().to_string(),
        open(outcomes_path)?,
        &outcomes_path.display().to_string(),
        schema,
    )
}

pub fn load_cohort_from_readers<R1: Read, R2: Read>(
    states: R1,
    states_name: &str,
    outcomes: R2,
    outcomes_name: &str,
    schema: &VariableSchema,
) -> Result<Vec<PatientRecord>, CohortError> {
    schema.validate()?;
    let staged = read_states(states, states_name, schema)?;
    let labels = read_outcomes(outcomes, outcomes_name)?;

    let mut records = Vec::with_capacity(staged.order.len());
    for id in &staged.order {
        let rows = &staged.rows[id];
        let mut states: [Vec<f64>; STAGES] = Default::default();
        let mut doses = [0.0; STAGES];
        for t in 0..STAGES {
            match &rows[t] {
                Some((s, d)) => {
                    states[t] = s.clone();
                    doses[t] = *d;
                }
                None => {
                    return Err(CohortError::Patient {
                        patient: id.clone(),
                        message: format!("missing stage {}", t + 1),
                    })
                }
            }
        }
        for k in schema.constant_dims() {
            if states.iter().any(|s| s[k] != states[0][k]) {
                return Err(CohortError::Patient {
                    patient: id.clone(),
                    message: format!(
                        "constant variable `{}` differs across stages",
                        schema.variables[k].name
                    ),
                });
            }
        }
        let (lc, rp2) = labels.get(id).copied().ok_or_else(|| CohortError::Patient {
            patient: id.clone(),
            message: format!("no row in {outcomes_name}"),
        })?;
        records.push(PatientRecord {
            patient_id: id.clone(),
            states,
            doses,
            lc,
            rp2,
        });
    }
    for id in labels.keys() {
        if !staged.rows.contains_key(id) {
            return Err(CohortError::Patient {
                patient: id.clone(),
                message: format!("has outcomes but no rows in {states_name}"),
            });
        }
    }
    Ok(records)
}

type StageRow = Option<(Vec<f64>, f64)>;

struct StagedRows {
    order: Vec<String>,
    rows: HashMap<String, [StageRow; STAGES]>,
}

fn header_index(
    headers: &csv::StringRecord,
    expected: &[&str],
    file: &str,
) -> Result<HashMap<String, usize>, CohortError> {
    let mut index = HashMap::new();
    for (i, h) in headers.iter().enumerate() {
        let h = h.trim().to_ascii_lowercase();
        if !expected.contains(&h.as_str()) {
            return Err(CohortError::UnknownColumn {
                file: file.into(),
                column: h,
            });
        }
        if index.insert(h.clone(), i).is_some() {
            return Err(CohortError::Parse {
                file: file.into(),
                row: 1,
                column: h,
                message: "duplicate column".into(),
            });
        }
    }
    for e in expected {
        if !index.contains_key(*e) {
            return Err(CohortError::MissingColumn {
                file: file.into(),
                column: (*e).into(),
            });
        }
    }
    Ok(index)
}

fn csv_reader<R: Read>(r: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .flexible(false)
        .comment(Some(b'#'))
        .from_reader(r)
}

fn csv_error(file: &str, e: csv::Error) -> CohortError {
    let row = e.position().map(|p| p.line() as usize).unwrap_or(0);
    CohortError::Parse {
        file: file.into(),
        row,
        column: String::new(),
        message: e.to_string(),
    }
}

fn parse_real(
    rec: &csv::StringRecord,
    idx: usize,
    column: &str,
    file: &str,
    row: usize,
) -> Result<f64, CohortError> {
    let raw = rec.get(idx).unwrap_or("");
    let err = |message: String| CohortError::Parse {
        file: file.into(),
        row,
        column: column.into(),
        message,
    };
    if raw.is_empty() {
        return Err(err("missing value".into()));
    }
    let v: f64 = raw.parse().map_err(|_| err(format!("non-numeric value `{raw}`")))?;
    if !v.is_finite() {
        return Err(err(format!("non-finite value `{raw}`")));
    }
    Ok(v)
}

fn read_states<R: Read>(r: R, file: &str, schema: &VariableSchema) -> Result<StagedRows, CohortError> {
    let mut rdr = csv_reader(r);
    let mut expected: Vec<&str> = vec![STATE_ID_COLUMNS[0], STATE_ID_COLUMNS[1]];
    expected.extend(schema.names());
    expected.push(STATE_ID_COLUMNS[2]);
    let headers = rdr.headers().map_err(|e| csv_error(file, e))?.clone();
    let index = header_index(&headers, &expected, file)?;

    let mut out = StagedRows {
        order: Vec::new(),
        rows: HashMap::new(),
    };
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_error(file, e))?;
        let row = rec.position().map(|p| p.line() as usize).unwrap_or(0);
        let id = rec.get(index["patient_id"]).unwrap_or("").to_string();
        if id.is_empty() {
            return Err(CohortError::Parse {
                file: file.into(),
                row,
                column: "patient_id".into(),
                message: "missing value".into(),
            });
        }
        let stage_raw = rec.get(index["stage"]).unwrap_or("");
        let stage: usize = match stage_raw.parse() {
            Ok(s) if (1..=STAGES).contains(&s) => s,
            _ => {
                return Err(CohortError::Parse {
                    file: file.into(),
                    row,
                    column: "stage".into(),
                    message: format!("stage must be 1, 2 or 3, got `{stage_raw}`"),
                })
            }
        };
        let mut state = Vec::with_capacity(schema.q());
        for v in &schema.variables {
            let x = parse_real(&rec, index[&v.name], &v.name, file, row)?;
            if v.constant && !(0.0..=1.0).contains(&x) {
                return Err(CohortError::Parse {
                    file: file.into(),
                    row,
                    column: v.name.clone(),
                    message: format!("constant-flagged variable must be coded in [0, 1], got {x}"),
                });
            }
            state.push(x);
        }
        let dose = parse_real(&rec, index["dose_gy_per_frac"], "dose_gy_per_frac", file, row)?;
        if dose <= 0.0 {
            return Err(CohortError::Parse {
                file: file.into(),
                row,
                column: "dose_gy_per_frac".into(),
                message: format!("dose must be positive, got {dose}"),
            });
        }
        let slots = out.rows.entry(id.clone()).or_insert_with(|| {
            out.order.push(id.clone());
            Default::default()
        });
        if slots[stage - 1].is_some() {
            return Err(CohortError::Patient {
                patient: id,
                message: format!("duplicate stage {stage} (row {row})"),
            });
        }
        slots[stage - 1] = Some((state, dose));
    }
    if out.order.is_empty() {
        return Err(CohortError::Empty(file.into()));
    }
    Ok(out)
}

fn read_outcomes<R: Read>(r: R, file: &str) -> Result<BTreeMap<String, (bool, bool)>, CohortError> {
    let mut rdr = csv_reader(r);
    let headers = rdr.headers().map_err(|e| csv_error(file, e))?.clone();
    let index = header_index(&headers, &OUTCOME_COLUMNS, file)?;
    let mut out = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_error(file, e))?;
        let row = rec.position().map(|p| p.line() as usize).unwrap_or(0);
        let id = rec.get(index["patient_id"]).unwrap_or("").to_string();
        if id.is_empty() {
            return Err(CohortError::Parse {
                file: file.into(),
                row,
                column: "patient_id".into(),
                message: "missing value".into(),
            });
        }
        let label = |column: &str| -> Result<bool, CohortError> {
            match rec.get(index[column]).unwrap_or("") {
                "0" => Ok(false),
                "1" => Ok(true),
                other => Err(CohortError::Parse {
                    file: file.into(),
                    row,
                    column: column.into(),
                    message: format!("non-binary outcome `{other}`"),
                }),
            }
        };
        let lc = label("lc")?;
        let rp2 = label("rp2")?;
        if out.insert(id.clone(), (lc, rp2)).is_some() {
            return Err(CohortError::DuplicatePatient(id));
        }
    }
    if out.is_empty() {
        return Err(CohortError::Empty(file.into()));
    }
    Ok(out)
}
