//! Subcommand implementations: run, sweep, validate, report.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::SystemTime;

use icl_core::backend::{
    Backend, FixtureBackend, HttpBackend, HttpConfig, MockBackend, SyntheticBackend,
};
use icl_core::data::{Dataset, LabelPermutation, Task};
use icl_core::embed::{fetch_embeddings, EmbeddingEndpoint, EmbeddingMatrix};
use icl_core::error::EvalError;
use icl_core::eval::{run_eval, sweep, sweep_csv, EvalInputs, EvalOptions, EvalReport, SweepAxis};
use icl_core::par::configure_workers;
use icl_core::rank::sample_organizations;
use icl_core::render_demo;

use crate::config::{BackendSpec, ResolvedRun};

/// Failure classes map one-to-one onto exit codes.
#[derive(Debug)]
pub enum CliError {
    /// Exit 1: configuration is unusable.
    Config(String),
    /// Exit 2: datasets, embeddings or templates are bad.
    Data(String),
    /// Exit 3: the scoring backend failed.
    Backend(String),
    /// Exit 4: too many per-sample failures.
    Threshold(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            CliError::Data(_) => 2,
            CliError::Backend(_) => 3,
            CliError::Threshold(_) => 4,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Config(m)
            | CliError::Data(m)
            | CliError::Backend(m)
            | CliError::Threshold(m) => m,
        }
    }
}

fn eval_error(e: EvalError) -> CliError {
    match e {
        EvalError::FailureThreshold { .. } => CliError::Threshold(e.to_string()),
        EvalError::Rank(icl_core::error::RankError::Scoring { .. }) => {
            CliError::Backend(e.to_string())
        }
        EvalError::InvalidSetup(_) => CliError::Config(e.to_string()),
        _ => CliError::Data(e.to_string()),
    }
}

/// Everything loaded and validated for a run.
pub struct Setup {
    pub task: Task,
    pub pool: Dataset,
    pub test: Dataset,
    pub pool_index: Option<Arc<EmbeddingMatrix>>,
    pub test_index: Option<Arc<EmbeddingMatrix>>,
    pub backend: Box<dyn Backend>,
    pub corruption: Option<LabelPermutation>,
    pub max_in_flight: Option<usize>,
}

pub fn load_setup(resolved: &ResolvedRun) -> Result<Setup, CliError> {
    let file = &resolved.file;
    let task = Task::load(&file.task).map_err(|e| CliError::Data(e.to_string()))?;
    let pool =
        Dataset::load(&file.pool, &task.label_space).map_err(|e| CliError::Data(e.to_string()))?;
    let test =
        Dataset::load(&file.test, &task.label_space).map_err(|e| CliError::Data(e.to_string()))?;

    let endpoint = match &file.embedding_http {
        None => None,
        Some(spec) => {
            let auth_token =
                match &spec.auth_token_env {
                    None => None,
                    Some(var) => Some(std::env::var(var).map_err(|_| {
                        CliError::Config(format!("auth env var `{var}` is not set"))
                    })?),
                };
            Some(EmbeddingEndpoint {
                endpoint: spec.endpoint.clone(),
                model: spec.model.clone(),
                auth_token,
                timeout_ms: spec.timeout_ms,
            })
        }
    };
    let load_index = |path: &Option<PathBuf>,
                      dataset: &Dataset|
     -> Result<Option<Arc<EmbeddingMatrix>>, CliError> {
        match (path, &endpoint) {
            (Some(p), _) => {
                let ids: Vec<String> = dataset.ids().map(str::to_string).collect();
                EmbeddingMatrix::load(p, &ids)
                    .map(|m| Some(Arc::new(m)))
                    .map_err(|e| CliError::Data(e.to_string()))
            }
            (None, Some(endpoint)) => {
                let items: Vec<(String, String)> = dataset
                    .examples()
                    .iter()
                    .map(|ex| {
                        let text = ex.fields.values().cloned().collect::<Vec<_>>().join(" ");
                        (ex.id.clone(), text)
                    })
                    .collect();
                log::info!(
                    "fetching {} embeddings from {}",
                    items.len(),
                    endpoint.endpoint
                );
                fetch_embeddings(endpoint, &items)
                    .map(|m| Some(Arc::new(m)))
                    .map_err(|e| CliError::Backend(e.to_string()))
            }
            (None, None) => Ok(None),
        }
    };
    let pool_index = load_index(&file.pool_embeddings, &pool)?;
    let test_index = load_index(&file.test_embeddings, &test)?;

    let corruption = parse_corruption(&file.corrupt_labels, &task)?;

    let (backend, max_in_flight): (Box<dyn Backend>, Option<usize>) = match &file.backend {
        BackendSpec::Mock => (Box::new(MockBackend), None),
        BackendSpec::Synthetic { alpha } => {
            let pool_arc = pool_index.clone().ok_or_else(|| {
                CliError::Config("synthetic backend requires pool_embeddings".into())
            })?;
            let test_arc = test_index.clone().ok_or_else(|| {
                CliError::Config("synthetic backend requires test_embeddings".into())
            })?;
            (
                Box::new(SyntheticBackend::with_alpha(pool_arc, test_arc, *alpha)),
                None,
            )
        }
        BackendSpec::Http {
            endpoint,
            model,
            auth_token_env,
            max_in_flight,
            length_normalize,
            timeout_ms,
        } => {
            let auth_token =
                match auth_token_env {
                    None => None,
                    Some(var) => Some(std::env::var(var).map_err(|_| {
                        CliError::Config(format!("auth env var `{var}` is not set"))
                    })?),
                };
            let config = HttpConfig {
                endpoint: endpoint.clone(),
                model: model.clone(),
                auth_token,
                max_in_flight: *max_in_flight,
                length_normalize: *length_normalize,
                retry: Default::default(),
                timeout_ms: *timeout_ms,
            };
            (Box::new(HttpBackend::new(config)), Some(*max_in_flight))
        }
        BackendSpec::Fixture { path, model } => (
            Box::new(
                FixtureBackend::load(path, model.clone())
                    .map_err(|e| CliError::Data(e.to_string()))?,
            ),
            None,
        ),
    };

    Ok(Setup {
        task,
        pool,
        test,
        pool_index,
        test_index,
        backend,
        corruption,
        max_in_flight,
    })
}

fn parse_corruption(
    value: &Option<serde_json::Value>,
    task: &Task,
) -> Result<Option<LabelPermutation>, CliError> {
    let Some(value) = value else { return Ok(None) };
    match value {
        serde_json::Value::Null => Ok(None),
        serde_json::Value::Bool(false) => Ok(None),
        serde_json::Value::Bool(true) => Ok(Some(LabelPermutation::cyclic(&task.label_space))),
        serde_json::Value::String(s) if s == "cyclic" => {
            Ok(Some(LabelPermutation::cyclic(&task.label_space)))
        }
        serde_json::Value::Object(map) => {
            let pairs = map
                .iter()
                .map(|(k, v)| {
                    v.as_str()
                        .map(|s| (k.clone(), s.to_string()))
                        .ok_or_else(|| {
                            CliError::Config("corrupt_labels map must be label -> label".into())
                        })
                })
                .collect::<Result<std::collections::BTreeMap<_, _>, _>>()?;
            LabelPermutation::new(pairs, &task.label_space)
                .map(Some)
                .map_err(|e| CliError::Config(e.to_string()))
        }
        other => Err(CliError::Config(format!(
            "corrupt_labels must be null, true, \"cyclic\" or a map, got {other}"
        ))),
    }
}

fn setup_workers(resolved: &ResolvedRun, setup: &Setup) {
    let logical = std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1);
    let mut workers = resolved.file.workers.unwrap_or(logical);
    if let Some(cap) = setup.max_in_flight {
        workers = workers.min(cap);
    }
    configure_workers(workers);
    log::info!("worker pool: {workers} thread(s)");
}

fn eval_inputs<'a>(setup: &'a Setup) -> EvalInputs<'a> {
    EvalInputs {
        task: &setup.task,
        pool: &setup.pool,
        test: &setup.test,
        pool_index: setup.pool_index.as_deref(),
        test_index: setup.test_index.as_deref(),
    }
}

fn eval_options(resolved: &ResolvedRun, setup: &Setup) -> EvalOptions {
    EvalOptions {
        corruption: setup.corruption.clone(),
        failure_threshold: resolved.file.failure_threshold,
    }
}

const SUMMARY_HEADER: &str = "task,method,backend,seed,accuracy,oracle_accuracy,mean_bias_rate,avg_mdl_of_chosen,evaluated,failed,backend_calls\n";

fn summary_row(report: &EvalReport) -> String {
    format!(
        "{},{},{},{},{:.6},{},{},{},{},{},{}\n",
        report.task,
        report.method,
        report.backend,
        report.seed,
        report.accuracy,
        report
            .oracle_accuracy
            .map(|v| format!("{v:.6}"))
            .unwrap_or_default(),
        report
            .mean_bias_rate
            .map(|v| format!("{v:.6}"))
            .unwrap_or_default(),
        report
            .avg_mdl_of_chosen
            .map(|v| format!("{v:.6}"))
            .unwrap_or_default(),
        report.evaluated,
        report.failed,
        report.backend_calls,
    )
}

fn write(path: &Path, contents: &str) -> Result<(), CliError> {
    std::fs::write(path, contents)
        .map_err(|e| CliError::Config(format!("cannot write `{}`: {e}", path.display())))
}

// ---------------------------------------------------------------------------
// run
// ---------------------------------------------------------------------------

pub fn cmd_run(resolved: &ResolvedRun) -> Result<(), CliError> {
    let setup = load_setup(resolved)?;
    setup_workers(resolved, &setup);
    let out = &resolved.file.output_dir;
    std::fs::create_dir_all(out)
        .map_err(|e| CliError::Config(format!("cannot create `{}`: {e}", out.display())))?;
    write(&out.join("resolved_config.json"), &resolved.to_json())?;

    let inputs = eval_inputs(&setup);
    let options = eval_options(resolved, &setup);
    let mut summary = String::from(SUMMARY_HEADER);
    let mut meta_runs = Vec::new();
    let mut accuracies = Vec::new();
    for &seed in &resolved.file.seeds {
        let report = run_eval(
            &inputs,
            setup.backend.as_ref(),
            resolved.method,
            &resolved.file.selection,
            &resolved.file.rank,
            seed,
            &options,
        )
        .map_err(eval_error)?;
        log::info!(
            "seed {seed}: accuracy {:.4} over {} samples ({} failed, {} backend calls)",
            report.accuracy,
            report.evaluated,
            report.failed,
            report.backend_calls
        );
        let report_path = out.join(format!("report_seed{seed}.json"));
        write(&report_path, &(report.to_json_pretty() + "\n"))?;
        if resolved.file.trace {
            report
                .write_trace(out.join(format!("trace_seed{seed}.jsonl")))
                .map_err(eval_error)?;
        }
        summary.push_str(&summary_row(&report));
        meta_runs.push(serde_json::json!({
            "seed": seed,
            "wall_clock_ms": report.wall_clock_ms as u64,
            "report": report_path.file_name().and_then(|n| n.to_str()),
        }));
        accuracies.push(report.accuracy);
    }
    write(&out.join("summary.csv"), &summary)?;
    let meta = serde_json::json!({
        "finished_unix_ms": SystemTime::now()
            .duration_since(SystemTime::UNIX_EPOCH)
            .map(|d| d.as_millis() as u64)
            .unwrap_or(0),
        "runs": meta_runs,
    });
    write(
        &out.join("run_meta.json"),
        &(serde_json::to_string_pretty(&meta).expect("meta serializes") + "\n"),
    )?;

    let mean = accuracies.iter().sum::<f64>() / accuracies.len() as f64;
    println!(
        "{} seeds done; mean accuracy {:.4}; reports in {}",
        accuracies.len(),
        mean,
        out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// sweep
// ---------------------------------------------------------------------------

pub fn cmd_sweep(
    resolved: &ResolvedRun,
    axis: SweepAxis,
    values: &[usize],
) -> Result<(), CliError> {
    if values.is_empty() {
        return Err(CliError::Config("sweep needs at least one value".into()));
    }
    let setup = load_setup(resolved)?;
    setup_workers(resolved, &setup);
    let out = &resolved.file.output_dir;
    std::fs::create_dir_all(out)
        .map_err(|e| CliError::Config(format!("cannot create `{}`: {e}", out.display())))?;
    write(&out.join("resolved_config.json"), &resolved.to_json())?;

    let inputs = eval_inputs(&setup);
    let options = eval_options(resolved, &setup);
    let points = sweep(
        &inputs,
        setup.backend.as_ref(),
        resolved.method,
        &resolved.file.selection,
        &resolved.file.rank,
        &resolved.file.seeds,
        axis,
        values,
        &options,
    )
    .map_err(eval_error)?;

    for point in &points {
        let path = out.join(format!(
            "report_{}{}_seed{}.json",
            point.axis, point.value, point.report.seed
        ));
        write(&path, &(point.report.to_json_pretty() + "\n"))?;
        log::info!(
            "{}={}: seed {} accuracy {:.4}",
            point.axis,
            point.value,
            point.report.seed,
            point.report.accuracy
        );
    }
    write(&out.join("sweep.csv"), &sweep_csv(&points))?;
    println!("{} sweep points written to {}", points.len(), out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// validate
// ---------------------------------------------------------------------------

pub fn cmd_validate(resolved: &ResolvedRun) -> Result<(), CliError> {
    let setup = load_setup(resolved)?;
    let task = &setup.task;
    println!(
        "task `{}`: {} labels, pool {}, test {}",
        task.name,
        task.label_space.len(),
        setup.pool.len(),
        setup.test.len()
    );

    // Templates must render on real pool samples.
    for ex in setup.pool.examples().iter().take(3) {
        let demo = render_demo(&task.template, ex, &task.verbalizer)
            .map_err(|e| CliError::Data(e.to_string()))?;
        println!("demo [{}]: {demo}", ex.id);
    }

    // Embedding dimensions and coverage.
    if let (Some(pool_index), Some(test_index)) = (&setup.pool_index, &setup.test_index) {
        if pool_index.dim() != test_index.dim() {
            return Err(CliError::Data(format!(
                "pool embeddings are {}-dimensional but test embeddings are {}-dimensional",
                pool_index.dim(),
                test_index.dim()
            )));
        }
        pool_index
            .ensure_covers(setup.pool.ids())
            .map_err(|e| CliError::Data(e.to_string()))?;
        test_index
            .ensure_covers(setup.test.ids())
            .map_err(|e| CliError::Data(e.to_string()))?;
        println!(
            "embeddings: {} pool rows, {} test rows, dim {}",
            pool_index.len(),
            test_index.len(),
            pool_index.dim()
        );
    } else if resolved.method.needs_query_embedding() {
        return Err(CliError::Config(format!(
            "method `{}` needs pool_embeddings and test_embeddings",
            resolved.method
        )));
    }

    // One fully-assembled prompt for human inspection.
    if let (Some(x), false) = (setup.test.examples().first(), setup.pool.is_empty()) {
        let shots = resolved.file.rank.shots.min(setup.pool.len());
        let candidate_ids: Vec<String> = setup
            .pool
            .ids()
            .take(shots.max(1))
            .map(str::to_string)
            .collect();
        let orgs = sample_organizations(&candidate_ids, 1, shots, 0)
            .map_err(|e| CliError::Data(e.to_string()))?;
        let prompt = icl_core::render_prompt(
            &setup.pool,
            &orgs[0],
            x,
            &task.template,
            &task.verbalizer,
            &task.label_space,
        )
        .map_err(|e| CliError::Data(e.to_string()))?;
        println!("--- assembled prompt for [{}] ---", x.id);
        println!("{}", prompt.prefix);
        println!("--- continuations: {:?}", prompt.continuations);
    }

    // Backend answers a probe request.
    setup
        .backend
        .probe()
        .map_err(|e| CliError::Backend(e.to_string()))?;
    println!("backend `{}` answered the probe", setup.backend.name());
    println!("ok");
    Ok(())
}

// ---------------------------------------------------------------------------
// synth
// ---------------------------------------------------------------------------

pub fn cmd_synth(output: &Path, spec: icl_core::fixture::SyntheticSpec) -> Result<(), CliError> {
    if !(1..=6).contains(&spec.labels) {
        return Err(CliError::Config("labels must be between 1 and 6".into()));
    }
    if spec.dim < spec.labels {
        return Err(CliError::Config("dim must be >= labels".into()));
    }
    std::fs::create_dir_all(output)
        .map_err(|e| CliError::Config(format!("cannot create `{}`: {e}", output.display())))?;
    let synthetic = icl_core::fixture::generate(&spec);
    let files = synthetic
        .write_files(output)
        .map_err(|e| CliError::Data(e.to_string()))?;
    println!(
        "synthetic task `{}` written: {} pool / {} test examples, dim {}",
        synthetic.task.name,
        synthetic.pool.len(),
        synthetic.test.len(),
        spec.dim
    );
    for path in [
        &files.task,
        &files.pool,
        &files.test,
        &files.pool_embeddings,
        &files.test_embeddings,
    ] {
        println!("  {}", path.display());
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// report
// ---------------------------------------------------------------------------

pub fn cmd_report(paths: &[PathBuf], csv_out: Option<&Path>) -> Result<(), CliError> {
    let mut files = Vec::new();
    for path in paths {
        if path.is_dir() {
            let mut entries: Vec<PathBuf> = std::fs::read_dir(path)
                .map_err(|e| CliError::Data(format!("cannot read `{}`: {e}", path.display())))?
                .filter_map(|entry| entry.ok().map(|e| e.path()))
                .filter(|p| {
                    p.file_name()
                        .and_then(|n| n.to_str())
                        .map(|n| n.starts_with("report") && n.ends_with(".json"))
                        .unwrap_or(false)
                })
                .collect();
            entries.sort();
            files.extend(entries);
        } else {
            files.push(path.clone());
        }
    }
    if files.is_empty() {
        return Err(CliError::Data("no report files found".into()));
    }

    let mut summary = String::from(SUMMARY_HEADER);
    println!(
        "{:<16} {:<18} {:>6} {:>9} {:>9} {:>9}",
        "method", "task", "seed", "accuracy", "oracle", "avg_mdl"
    );
    for file in &files {
        let text = std::fs::read_to_string(file)
            .map_err(|e| CliError::Data(format!("cannot read `{}`: {e}", file.display())))?;
        let report: EvalReport = serde_json::from_str(&text)
            .map_err(|e| CliError::Data(format!("`{}` is not a report: {e}", file.display())))?;
        println!(
            "{:<16} {:<18} {:>6} {:>9.4} {:>9} {:>9}",
            report.method,
            report.task,
            report.seed,
            report.accuracy,
            report
                .oracle_accuracy
                .map(|v| format!("{v:.4}"))
                .unwrap_or_else(|| "-".into()),
            report
                .avg_mdl_of_chosen
                .map(|v| format!("{v:.4}"))
                .unwrap_or_else(|| "-".into()),
        );
        summary.push_str(&summary_row(&report));
    }
    if let Some(csv_path) = csv_out {
        write(csv_path, &summary)?;
        println!("summary written to {}", csv_path.display());
    }
    Ok(())
}
