//! `dosegp` command-line driver.
//!
//! ```text
//! dosegp simulate   --out data                      # synthetic cohorts + config.json
//! dosegp train      --config data/config.json --out run
//! dosegp evaluate   --config data/config.json --out run
//! dosegp decide     --states data/study_states.csv --outcomes data/study_outcomes.csv --out run
//! dosegp compensate --states data/study_states.csv --outcomes data/study_outcomes.csv --out run
//! dosegp serve
//! ```
//!
//! Commands that need a model read `<out>/model.json` unless `--model` is
//! given, and use the config stored in the model.

pub mod output;
pub mod simulate;

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use dosegp_core::cohort::{load_cohort, preprocess, PatientRecord, STATE_ID_COLUMNS};
use dosegp_core::config::RunConfig;
use dosegp_core::decision::{CompensationCase, Choice};
use dosegp_core::pipeline::{train, CrossEntropyPair, PatientVerdict, TrainedPipeline};
use dosegp_core::store::{self, ModelArtifact};
use dosegp_core::STAGES;
use serde::Serialize;
use serde_json::{json, Value};

use output::{num, opt, Outputs, Provenance, NO_MODEL};

pub const MODEL_FILE: &str = "model.json";
pub const TRAIN_REPORT: &str = "train_report.json";
pub const CV_TABLE: &str = "cv_mse.csv";
pub const CROSS_ENTROPY: &str = "cross_entropy.csv";
pub const VERDICTS: &str = "verdicts.csv";
pub const COMPENSATION_MODEL: &str = "compensation_model.json";
pub const COMPENSATION_MAP: &str = "compensation_map.csv";
pub const COMPENSATION_TRAINING: &str = "compensation_training.csv";

#[derive(Debug, Parser)]
#[command(name = "dosegp", version, about = "GP-calibrated dose decision support")]
pub struct Cli {
    /// Run config (JSON). Relative data paths resolve against its directory.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override the run seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = ".")]
    pub out: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Default)]
pub struct CohortArgs {
    /// States CSV; overrides the config.
    #[arg(long)]
    pub states: Option<PathBuf>,
    /// Outcomes CSV; overrides the config.
    #[arg(long)]
    pub outcomes: Option<PathBuf>,
}

#[derive(Debug, Args, Default)]
pub struct ModelArgs {
    /// Model artifact [default: <out>/model.json].
    #[arg(long)]
    pub model: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Validate, truncate and scale a cohort.
    Preprocess(CohortArgs),
    /// Train the pipeline and write the model artifact.
    Train(CohortArgs),
    /// Cross-validated transition MSE table and outcome cross-entropy pair.
    Evaluate {
        #[command(flatten)]
        cohort: CohortArgs,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Per-patient verdicts, taking each final-stage dose as the physician's.
    Decide {
        #[command(flatten)]
        cohort: CohortArgs,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Fit the dose compensation model on verdicts and tabulate its map.
    Compensate {
        #[command(flatten)]
        cohort: CohortArgs,
        #[command(flatten)]
        model: ModelArgs,
        /// Verdict table [default: <out>/verdicts.csv].
        #[arg(long)]
        verdicts: Option<PathBuf>,
        #[arg(long)]
        var1: Option<String>,
        #[arg(long)]
        var2: Option<String>,
        #[arg(long)]
        resolution: Option<usize>,
    },
    /// Run the HTTP service (env: DOSEGP_BIND, DOSEGP_ARTIFACT_DIR, DOSEGP_SEED).
    Serve {
        #[arg(long)]
        bind: Option<String>,
        #[arg(long)]
        artifact_dir: Option<PathBuf>,
    },
    /// Write synthetic training and decision-study cohorts with a config.
    Simulate {
        /// Training cohort size.
        #[arg(long, default_value_t = 200)]
        n: usize,
        /// Decision-study cohort size.
        #[arg(long, default_value_t = 50)]
        study_n: usize,
    },
}

/// Failure with the module it came from.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CliError {
    pub module: String,
    pub message: String,
}

impl CliError {
    pub fn new(module: &str, message: impl Into<String>) -> Self {
        CliError {
            module: module.into(),
            message: message.into(),
        }
    }

    pub fn io(path: &Path, e: std::io::Error) -> Self {
        Self::new("io", format!("{}: {e}", path.display()))
    }

    pub fn csv(e: csv::Error) -> Self {
        Self::new("io", e.to_string())
    }

    /// `{"error": {"module": .., "message": ..}}`
    pub fn to_json(&self) -> String {
        json!({ "error": self }).to_string()
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.module, self.message)
    }
}

impl std::error::Error for CliError {}

impl From<dosegp_core::Error> for CliError {
    fn from(e: dosegp_core::Error) -> Self {
        Self::new(e.module(), e.to_string())
    }
}

impl From<dosegp_core::store::StoreError> for CliError {
    fn from(e: dosegp_core::store::StoreError) -> Self {
        dosegp_core::Error::from(e).into()
    }
}

impl From<dosegp_core::cohort::CohortError> for CliError {
    fn from(e: dosegp_core::cohort::CohortError) -> Self {
        dosegp_core::Error::from(e).into()
    }
}

type CliResult<T> = Result<T, CliError>;

fn run_config(cli: &Cli) -> CliResult<RunConfig> {
    let mut c = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        c.set_seed(seed);
    }
    Ok(c)
}

/// Cohort paths: flags first, then the `--config` file, then `fallback`.
fn cohort_paths(cli: &Cli, args: &CohortArgs, fallback: Option<&RunConfig>) -> CliResult<(PathBuf, PathBuf)> {
    let from_file = match &cli.config {
        Some(p) => Some(RunConfig::load(p)?),
        None => None,
    };
    let pick = |flag: &Option<PathBuf>, get: fn(&RunConfig) -> &Option<PathBuf>, what: &str| {
        flag.clone()
            .or_else(|| from_file.as_ref().and_then(|c| get(c).clone()))
            .or_else(|| fallback.and_then(|c| get(c).clone()))
            .ok_or_else(|| CliError::new("config", format!("no {what} file: pass --{what} or set `{what}` in the config")))
    };
    Ok((
        pick(&args.states, |c| &c.states, "states")?,
        pick(&args.outcomes, |c| &c.outcomes, "outcomes")?,
    ))
}

fn load_records(cli: &Cli, args: &CohortArgs, config: &RunConfig, fallback: Option<&RunConfig>) -> CliResult<Vec<PatientRecord>> {
    let (states, outcomes) = cohort_paths(cli, args, fallback)?;
    log::info!("loading {} and {}", states.display(), outcomes.display());
    Ok(load_cohort(&states, &outcomes, &config.schema)?)
}

fn load_model(cli: &Cli, args: &ModelArgs) -> CliResult<(TrainedPipeline, String)> {
    let path = args.model.clone().unwrap_or_else(|| cli.out.join(MODEL_FILE));
    let bytes = std::fs::read(&path).map_err(|e| CliError::io(&path, e))?;
    let artifact = store::restore(&bytes)?;
    let digest = artifact.digest.clone();
    let mut pipeline = artifact.into_pipeline();
    if let Some(seed) = cli.seed {
        pipeline.config.set_seed(seed);
    }
    Ok((pipeline, digest))
}

pub fn run(cli: &Cli) -> CliResult<Vec<PathBuf>> {
    let mut out = Outputs::new(&cli.out)?;
    match &cli.command {
        Command::Preprocess(args) => preprocess_cmd(cli, args, &mut out)?,
        Command::Train(args) => train_cmd(cli, args, &mut out)?,
        Command::Evaluate { cohort, model } => evaluate_cmd(cli, cohort, model, &mut out)?,
        Command::Decide { cohort, model } => decide_cmd(cli, cohort, model, &mut out)?,
        Command::Compensate {
            cohort,
            model,
            verdicts,
            var1,
            var2,
            resolution,
        } => compensate_cmd(
            cli,
            cohort,
            model,
            verdicts.as_deref(),
            (var1.as_deref(), var2.as_deref()),
            *resolution,
            &mut out,
        )?,
        Command::Serve { bind, artifact_dir } => serve_cmd(cli, bind.as_deref(), artifact_dir.clone())?,
        Command::Simulate { n, study_n } => simulate_cmd(cli, *n, *study_n, &mut out)?,
    }
    Ok(out.written().to_vec())
}

fn preprocess_cmd(cli: &Cli, args: &CohortArgs, out: &mut Outputs) -> CliResult<()> {
    let config = run_config(cli)?;
    let records = load_records(cli, args, &config, None)?;
    let cohort = preprocess(&records, &config.schema)?;
    let prov = Provenance::new(&config, NO_MODEL);

    let mut columns: Vec<&str> = STATE_ID_COLUMNS.to_vec();
    columns.extend(cohort.scaling.variables.iter().map(|v| v.name.as_str()));
    let mut rows = Vec::with_capacity(cohort.n() * STAGES);
    for i in 0..cohort.n() {
        for t in 0..STAGES {
            let mut row = vec![cohort.patient_ids[i].clone(), (t + 1).to_string(), num(cohort.doses[t][i])];
            row.extend(cohort.states[t][i].iter().map(|&x| num(x)));
            rows.push(row);
        }
    }
    out.table("preprocessed_states.csv", &prov, &columns, &rows)?;
    out.json("scaling.json", &prov, json!({ "n": cohort.n(), "scaling": cohort.scaling }))
}

fn cross_entropy_json(ce: &CrossEntropyPair) -> Value {
    json!({
        "lc": {"calibrated": ce.lc.cross_entropy, "baseline": ce.lc.baseline_cross_entropy},
        "rp2": {"calibrated": ce.rp2.cross_entropy, "baseline": ce.rp2.baseline_cross_entropy},
    })
}

fn train_cmd(cli: &Cli, args: &CohortArgs, out: &mut Outputs) -> CliResult<()> {
    let config = run_config(cli)?;
    let records = load_records(cli, args, &config, None)?;
    let cohort = preprocess(&records, &config.schema)?;
    log::info!("training on {} patients", cohort.n());
    let (pipeline, report) = train(&cohort, &config)?;
    let artifact = ModelArtifact::from_pipeline(&pipeline);
    out.bytes(MODEL_FILE, &store::serialize(&artifact))?;
    let prov = Provenance::new(&config, &artifact.digest);
    let ai = report.verdicts.iter().filter(|v| v.verdict.chosen == Choice::Ai).count();
    out.json(
        TRAIN_REPORT,
        &prov,
        json!({
            "n": cohort.n(),
            "cross_entropy": cross_entropy_json(&report.cross_entropy),
            "cv_mse": report.cv.as_ref().map(|t| &t.rows),
            "hyperparameters": report.hyperparameters,
            "training_verdicts": {"patients": report.verdicts.len(), "ai_chosen": ai},
            "compensation_note": report.compensation_note,
        }),
    )?;
    println!("model digest {}", artifact.digest);
    Ok(())
}

fn evaluate_cmd(cli: &Cli, cohort_args: &CohortArgs, model_args: &ModelArgs, out: &mut Outputs) -> CliResult<()> {
    let (pipeline, digest) = load_model(cli, model_args)?;
    let records = load_records(cli, cohort_args, &pipeline.config, Some(&pipeline.config))?;
    let cohort = preprocess(&records, &pipeline.schema)?;
    let (cv, ce) = pipeline.evaluate(&cohort)?;
    let prov = Provenance::new(&pipeline.config, &digest);

    let rows: Vec<Vec<String>> = cv
        .rows
        .iter()
        .map(|r| {
            vec![
                r.variable.clone(),
                num(r.dnn_mse),
                num(r.gp_mse),
                opt(r.verbatim_ri),
                opt(r.standard_ri),
            ]
        })
        .collect();
    out.table(
        CV_TABLE,
        &prov,
        &["variable", "dnn_mse", "gp_mse", "verbatim_ri", "standard_ri"],
        &rows,
    )?;
    let ce_rows = [("lc", &ce.lc), ("rp2", &ce.rp2)]
        .iter()
        .map(|(name, d)| vec![name.to_string(), num(d.cross_entropy), num(d.baseline_cross_entropy)])
        .collect::<Vec<_>>();
    out.table(CROSS_ENTROPY, &prov, &["outcome", "calibrated", "baseline"], &ce_rows)?;

    println!("{:<14} {:>12} {:>12}", "variable", "dnn_mse", "gp_mse");
    for r in &cv.rows {
        println!("{:<14} {:>12.6} {:>12.6}", r.variable, r.dnn_mse, r.gp_mse);
    }
    for (name, d) in [("lc", &ce.lc), ("rp2", &ce.rp2)] {
        println!("cross-entropy {name}: {:.4} (point predictor {:.4})", d.cross_entropy, d.baseline_cross_entropy);
    }
    Ok(())
}

pub const VERDICT_COLUMNS: [&str; 17] = [
    "patient_id",
    "physician_dose",
    "ai_dose",
    "chosen",
    "p_value",
    "t_statistic",
    "degrees_of_freedom",
    "reliability_flag",
    "ai_reward_mean",
    "ai_reward_std",
    "physician_reward_mean",
    "physician_reward_std",
    "ai_prob_lc",
    "ai_prob_rp2",
    "physician_prob_lc",
    "physician_prob_rp2",
    "seed",
];

fn verdict_row(v: &PatientVerdict) -> Vec<String> {
    let d = &v.verdict;
    vec![
        v.patient_id.clone(),
        num(d.physician_dose),
        num(d.ai_dose),
        d.chosen.as_str().into(),
        num(d.p_value),
        num(d.t_statistic),
        num(d.degrees_of_freedom),
        d.reliability_flag.to_string(),
        num(d.ai_reward.mean),
        num(d.ai_reward.std),
        num(d.physician_reward.mean),
        num(d.physician_reward.std),
        num(d.ai_outcomes.lc.prob_mean),
        num(d.ai_outcomes.rp2.prob_mean),
        num(d.physician_outcomes.lc.prob_mean),
        num(d.physician_outcomes.rp2.prob_mean),
        d.seed.to_string(),
    ]
}

fn decide_cmd(cli: &Cli, cohort_args: &CohortArgs, model_args: &ModelArgs, out: &mut Outputs) -> CliResult<()> {
    let (pipeline, digest) = load_model(cli, model_args)?;
    let records = load_records(cli, cohort_args, &pipeline.config, Some(&pipeline.config))?;
    let verdicts = pipeline.decide_records(&records, pipeline.config.seed)?;
    let prov = Provenance::new(&pipeline.config, &digest);
    let rows: Vec<Vec<String>> = verdicts.iter().map(verdict_row).collect();
    out.table(VERDICTS, &prov, &VERDICT_COLUMNS, &rows)?;
    let ai = verdicts.iter().filter(|v| v.verdict.chosen == Choice::Ai).count();
    println!("{ai} of {} patients: AI dose preferred", verdicts.len());
    Ok(())
}

/// `(ai_dose, physician_dose, p_value)` per patient from a verdict table.
pub fn read_verdicts(path: &Path) -> CliResult<HashMap<String, (f64, f64, f64)>> {
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(CliError::csv)?;
    let headers = rdr.headers().map_err(CliError::csv)?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| CliError::new("io", format!("{}: missing column `{name}`", path.display())))
    };
    let (id, ai, phys, p) = (col("patient_id")?, col("ai_dose")?, col("physician_dose")?, col("p_value")?);
    let mut out = HashMap::new();
    for rec in rdr.records() {
        let rec = rec.map_err(CliError::csv)?;
        let row = rec.position().map(|p| p.line()).unwrap_or(0);
        let real = |i: usize| {
            rec[i].parse::<f64>().map_err(|_| {
                CliError::new(
                    "io",
                    format!("{}: row {row}, column `{}`: not a number", path.display(), &headers[i]),
                )
            })
        };
        out.insert(rec[id].to_string(), (real(ai)?, real(phys)?, real(p)?));
    }
    Ok(out)
}

fn compensate_cmd(
    cli: &Cli,
    cohort_args: &CohortArgs,
    model_args: &ModelArgs,
    verdicts: Option<&Path>,
    vars: (Option<&str>, Option<&str>),
    resolution: Option<usize>,
    out: &mut Outputs,
) -> CliResult<()> {
    let (mut pipeline, _) = load_model(cli, model_args)?;
    let records = load_records(cli, cohort_args, &pipeline.config, Some(&pipeline.config))?;
    let verdict_path = verdicts.map(Path::to_path_buf).unwrap_or_else(|| cli.out.join(VERDICTS));
    let table = read_verdicts(&verdict_path)?;
    let cases = records
        .iter()
        .map(|r| {
            let &(ai_dose, physician_dose, p_value) = table.get(&r.patient_id).ok_or_else(|| {
                CliError::new("decision", format!("no verdict for patient `{}`", r.patient_id))
            })?;
            Ok(CompensationCase {
                state: pipeline.scale_state(&r.states[STAGES - 1])?,
                ai_dose,
                physician_dose,
                p_value,
            })
        })
        .collect::<CliResult<Vec<_>>>()?;
    pipeline.compensation = Some(pipeline.fit_compensation(&cases)?);

    let artifact = ModelArtifact::from_pipeline(&pipeline);
    out.bytes(COMPENSATION_MODEL, &store::serialize(&artifact))?;
    let config = &pipeline.config;
    let pick = |given: Option<&str>, k: usize| {
        given
            .map(str::to_string)
            .or_else(|| config.compensation_variables.get(k).cloned())
            .ok_or_else(|| CliError::new("config", format!("--var{} is required", k + 1)))
    };
    let (v1, v2) = (pick(vars.0, 0)?, pick(vars.1, 1)?);
    let map = pipeline.compensation_map(&v1, &v2, resolution.unwrap_or(config.map_resolution))?;
    let prov = Provenance::new(config, &artifact.digest);
    let cell_rows = |cells: &[dosegp_core::decision::MapCell]| -> Vec<Vec<String>> {
        cells.iter().map(|c| vec![num(c.var1), num(c.var2), num(c.delta)]).collect()
    };
    let columns = [map.var1.as_str(), map.var2.as_str(), "delta_gy_per_frac"];
    out.table(COMPENSATION_MAP, &prov, &columns, &cell_rows(&map.cells))?;
    out.table(COMPENSATION_TRAINING, &prov, &columns, &cell_rows(&map.training))?;
    let positive = map.cells.iter().filter(|c| c.delta > 0.0).count();
    println!(
        "compensation map {}x{}: {positive} of {} cells positive",
        map.resolution,
        map.resolution,
        map.cells.len()
    );
    Ok(())
}

fn serve_cmd(cli: &Cli, bind: Option<&str>, artifact_dir: Option<PathBuf>) -> CliResult<()> {
    let mut config = dosegp_service::ServiceConfig::from_env().map_err(|e| CliError::new("config", e))?;
    if let Some(b) = bind {
        config.bind = b.parse().map_err(|e| CliError::new("config", format!("--bind {b}: {e}")))?;
    }
    if let Some(d) = artifact_dir {
        config.artifact_dir = d;
    }
    if let Some(s) = cli.seed {
        config.default_seed = s;
    }
    let rt = tokio::runtime::Runtime::new().map_err(|e| CliError::new("io", e.to_string()))?;
    rt.block_on(dosegp_service::serve(config))
        .map_err(|e| CliError::new("service-api", e.to_string()))
}

fn simulate_cmd(cli: &Cli, n: usize, study_n: usize, out: &mut Outputs) -> CliResult<()> {
    let seed = match (&cli.config, cli.seed) {
        (_, Some(s)) => s,
        (Some(_), None) => run_config(cli)?.seed,
        (None, None) => 1,
    };
    let config = simulate::study_config(seed);
    let sim = simulate::simulate(n, study_n, seed);
    let prov = Provenance::new(&config, NO_MODEL);
    out.raw_table(simulate::TRAIN_STATES, &prov, &sim.train_states)?;
    out.raw_table(simulate::TRAIN_OUTCOMES, &prov, &sim.train_outcomes)?;
    out.raw_table(simulate::STUDY_STATES, &prov, &sim.study_states)?;
    out.raw_table(simulate::STUDY_OUTCOMES, &prov, &sim.study_outcomes)?;
    let truth: Vec<Vec<String>> = sim
        .study
        .iter()
        .map(|s| {
            vec![
                s.record.patient_id.clone(),
                num(s.optimal_dose),
                num(s.physician_dose),
                num(s.reward_gap),
            ]
        })
        .collect();
    out.table(
        simulate::STUDY_TRUTH,
        &prov,
        &["patient_id", "optimal_dose", "physician_dose", "true_reward_gap"],
        &truth,
    )?;
    let mut bytes = serde_json::to_vec_pretty(&config).expect("config encodes");
    bytes.push(b'\n');
    out.bytes(simulate::CONFIG, &bytes)?;
    println!("simulated {n} training and {study_n} study patients (seed {seed})");
    Ok(())
}
