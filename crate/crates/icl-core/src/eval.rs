//! Evaluation harness: per-sample pipelines, aggregate metrics, bias and
//! corruption analyses, and sweep drivers.
//!
//! Every method funnels through the same pipeline — select candidates, sample
//! a window of organizations, rank, predict — with the method choosing the
//! selection algorithm and ranking criterion. Samples are independent and run
//! in the worker pool; per-sample randomness is keyed by `(run seed, test
//! id)` so results do not depend on dataset order or schedule.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::backend::{Backend, CountingBackend};
use crate::data::{corrupt_verbalizer, Dataset, Example, LabelPermutation, Organization, Task};
use crate::embed::EmbeddingMatrix;
use crate::error::{DataError, EvalError, SelectError};
use crate::par::map_ordered;
use crate::rank::{predict, PromptSetup, RankConfig, RankCriterion, ScoredOrganization};
use crate::rng::fnv1a64;
use crate::select::{
    select_dpp, select_random, select_topk, select_votek, SelectionConfig, SelectionMethod,
};

// ---------------------------------------------------------------------------
// Methods
// ---------------------------------------------------------------------------

/// A named evaluation arm: which selection feeds the window and which
/// criterion ranks it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Zero-shot: the empty organization for every sample.
    Prompting,
    /// Random candidates, one unranked organization.
    Random,
    /// Nearest-neighbor candidates, one unranked organization.
    TopK,
    TopKMdl,
    TopKLocalE,
    /// Majority label of the `shots` nearest examples; no model calls.
    MajorityVote,
    VoteKMdl,
    DppMdl,
    RandomMdl,
}

impl Method {
    pub const ALL: [Method; 9] = [
        Method::Prompting,
        Method::Random,
        Method::TopK,
        Method::TopKMdl,
        Method::TopKLocalE,
        Method::MajorityVote,
        Method::VoteKMdl,
        Method::DppMdl,
        Method::RandomMdl,
    ];

    pub fn selection_method(&self) -> Option<SelectionMethod> {
        match self {
            Method::Prompting => None,
            Method::Random | Method::RandomMdl => Some(SelectionMethod::Random),
            Method::TopK | Method::TopKMdl | Method::TopKLocalE | Method::MajorityVote => {
                Some(SelectionMethod::TopK)
            }
            Method::VoteKMdl => Some(SelectionMethod::VoteK),
            Method::DppMdl => Some(SelectionMethod::Dpp),
        }
    }

    pub fn criterion(&self) -> RankCriterion {
        match self {
            Method::TopKMdl | Method::VoteKMdl | Method::DppMdl | Method::RandomMdl => {
                RankCriterion::Mdl
            }
            Method::TopKLocalE => RankCriterion::Locale,
            _ => RankCriterion::None,
        }
    }

    pub fn uses_backend(&self) -> bool {
        !matches!(self, Method::MajorityVote)
    }

    pub fn needs_query_embedding(&self) -> bool {
        !matches!(self, Method::Prompting | Method::Random | Method::RandomMdl)
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            Method::Prompting => "prompting",
            Method::Random => "random",
            Method::TopK => "topk",
            Method::TopKMdl => "topk_mdl",
            Method::TopKLocalE => "topk_locale",
            Method::MajorityVote => "majority_vote",
            Method::VoteKMdl => "votek_mdl",
            Method::DppMdl => "dpp_mdl",
            Method::RandomMdl => "random_mdl",
        };
        f.write_str(name)
    }
}

impl std::str::FromStr for Method {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Method::ALL
            .iter()
            .copied()
            .find(|m| m.to_string() == s)
            .ok_or_else(|| EvalError::InvalidSetup(format!("unknown method `{s}`")))
    }
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

/// Fraction of the organization's demonstrations whose label equals the
/// gold label. Absent (`None`) for the empty organization so zero-shot runs
/// do not skew means.
pub fn bias_rate(org: &Organization, gold: &str, pool: &Dataset) -> Result<Option<f64>, EvalError> {
    if org.is_empty() {
        return Ok(None);
    }
    let mut matching = 0usize;
    for id in org.ids() {
        let ex = pool
            .get(id)
            .ok_or_else(|| DataError::UnknownExample(id.clone()))?;
        if ex.label == gold {
            matching += 1;
        }
    }
    Ok(Some(matching as f64 / org.len() as f64))
}

/// Most frequent demonstration label; ties break by label-space order.
pub fn majority_vote(org: &Organization, pool: &Dataset, task: &Task) -> Result<String, EvalError> {
    if org.is_empty() {
        return Err(EvalError::InvalidSetup(
            "majority vote needs at least one demonstration".into(),
        ));
    }
    let mut counts = vec![0usize; task.label_space.len()];
    for id in org.ids() {
        let ex = pool
            .get(id)
            .ok_or_else(|| DataError::UnknownExample(id.clone()))?;
        let idx = task
            .label_space
            .index_of(&ex.label)
            .ok_or_else(|| EvalError::InvalidSetup(format!("label `{}` not in space", ex.label)))?;
        counts[idx] += 1;
    }
    let mut best = 0usize;
    for (i, &c) in counts.iter().enumerate().skip(1) {
        if c > counts[best] {
            best = i;
        }
    }
    Ok(task.label_space.labels()[best].clone())
}

/// Fraction of records where some scored organization predicted the gold
/// label. `None` when no record carries oracle information (methods without
/// scored organizations).
pub fn oracle_accuracy(records: &[SampleRecord]) -> Option<f64> {
    let with_oracle: Vec<bool> = records.iter().filter_map(|r| r.oracle_solvable).collect();
    if with_oracle.is_empty() {
        return None;
    }
    let solvable = with_oracle.iter().filter(|&&b| b).count();
    Some(solvable as f64 / with_oracle.len() as f64)
}

// ---------------------------------------------------------------------------
// Records and reports
// ---------------------------------------------------------------------------

/// Outcome of one test sample. `all_scored` (the full window with
/// distributions) is kept in memory for oracle metrics and the optional
/// trace, but is not serialized into the report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleRecord {
    pub test_id: String,
    pub gold_label: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub predicted_label: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub chosen_org: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bias_rate: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub oracle_solvable: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub chosen_mdl_bits: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub chosen_distribution: Option<Vec<f64>>,
    #[serde(skip)]
    pub all_scored: Vec<ScoredOrganization>,
}

impl SampleRecord {
    pub fn is_correct(&self) -> Option<bool> {
        self.predicted_label.as_ref().map(|p| p == &self.gold_label)
    }
}

/// Aggregate results for one (method, seed) run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: String,
    pub method: String,
    pub backend: String,
    pub seed: u64,
    pub selection: SelectionConfig,
    pub rank: RankConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub corruption: Option<BTreeMap<String, String>>,
    pub failure_threshold: f64,
    pub evaluated: usize,
    pub failed: usize,
    pub accuracy: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_bias_rate: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub oracle_accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub avg_mdl_of_chosen: Option<f64>,
    pub backend_calls: u64,
    pub records: Vec<SampleRecord>,
    /// Timing is environment noise, not part of the reproducible report; the
    /// CLI writes it to a sidecar meta file instead.
    #[serde(skip)]
    pub wall_clock_ms: u128,
}

impl EvalReport {
    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// One JSONL line per sample with the full scored window, for offline
    /// analysis of all W distributions.
    pub fn write_trace(&self, path: impl AsRef<Path>) -> Result<(), EvalError> {
        let path = path.as_ref();
        let mut out = Vec::new();
        for record in &self.records {
            let line = serde_json::json!({
                "test_id": record.test_id,
                "gold_label": record.gold_label,
                "predicted_label": record.predicted_label,
                "bias_rate": record.bias_rate,
                "organizations": record
                    .all_scored
                    .iter()
                    .map(|s| {
                        serde_json::json!({
                            "example_ids": s.organization.ids(),
                            "mdl_bits": s.mdl_bits,
                            "probs": s.distribution.probs(),
                        })
                    })
                    .collect::<Vec<_>>(),
            });
            writeln!(out, "{line}").expect("write to vec");
        }
        std::fs::write(path, out).map_err(|source| {
            EvalError::Data(DataError::Io {
                path: path.display().to_string(),
                source,
            })
        })
    }
}

// ---------------------------------------------------------------------------
// run_eval
// ---------------------------------------------------------------------------

/// Shared inputs for one evaluation run. Embedding matrices are optional;
/// methods that query by similarity fail fast without them.
pub struct EvalInputs<'a> {
    pub task: &'a Task,
    pub pool: &'a Dataset,
    pub test: &'a Dataset,
    pub pool_index: Option<&'a EmbeddingMatrix>,
    pub test_index: Option<&'a EmbeddingMatrix>,
}

#[derive(Debug, Clone)]
pub struct EvalOptions {
    /// Re-render demonstrations with this corrupted label permutation while
    /// scoring stays on the true verbalizer.
    pub corruption: Option<LabelPermutation>,
    /// Abort the run when more than this fraction of samples fail.
    pub failure_threshold: f64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            corruption: None,
            failure_threshold: 0.01,
        }
    }
}

fn sub_seed(seed: u64, domain: &str) -> u64 {
    seed ^ fnv1a64(domain.as_bytes())
}

/// Evaluate `method` over the whole test set. Deterministic given
/// (inputs, configs, seed, backend behavior); per-sample failures are
/// recorded, excluded from accuracy, and only fail the run past the
/// configured threshold.
pub fn run_eval(
    inputs: &EvalInputs<'_>,
    backend: &dyn Backend,
    method: Method,
    selection: &SelectionConfig,
    rank: &RankConfig,
    seed: u64,
    options: &EvalOptions,
) -> Result<EvalReport, EvalError> {
    let started = Instant::now();
    selection.validate()?;
    let rank = rank.clone().normalized().map_err(EvalError::Rank)?;
    if inputs.test.is_empty() {
        return Err(EvalError::InvalidSetup("test set is empty".into()));
    }
    if matches!(method, Method::MajorityVote) && rank.shots == 0 {
        return Err(EvalError::InvalidSetup(
            "majority_vote needs shots >= 1".into(),
        ));
    }
    if inputs.pool.is_empty() && !matches!(method, Method::Prompting) {
        return Err(EvalError::Select(SelectError::EmptyPool));
    }
    if method.needs_query_embedding() {
        let pool_index = inputs
            .pool_index
            .ok_or_else(|| EvalError::InvalidSetup("method needs pool embeddings".into()))?;
        pool_index.ensure_covers(inputs.pool.ids())?;
        let test_index = inputs
            .test_index
            .ok_or_else(|| EvalError::InvalidSetup("method needs test embeddings".into()))?;
        test_index.ensure_covers(inputs.test.ids())?;
    }

    let corrupted_verbalizer = options
        .corruption
        .as_ref()
        .map(|perm| corrupt_verbalizer(&inputs.task.verbalizer, perm));
    let setup = match &corrupted_verbalizer {
        Some(v) => PromptSetup::corrupted(inputs.task, v),
        None => PromptSetup::plain(inputs.task),
    };

    let counting = CountingBackend::new(backend);
    let run =
        |x: &Example| evaluate_sample(inputs, &counting, &setup, method, selection, &rank, seed, x);
    let mut records: Vec<SampleRecord> = map_ordered(inputs.test.examples(), run);

    records.sort_by(|a, b| a.test_id.cmp(&b.test_id));

    let failed = records.iter().filter(|r| r.error.is_some()).count();
    let total = records.len();
    if total > 0 && failed as f64 / total as f64 > options.failure_threshold {
        return Err(EvalError::FailureThreshold {
            failed,
            total,
            threshold: options.failure_threshold,
        });
    }
    let evaluated = total - failed;
    let correct = records
        .iter()
        .filter(|r| r.is_correct() == Some(true))
        .count();
    let accuracy = if evaluated > 0 {
        correct as f64 / evaluated as f64
    } else {
        0.0
    };
    let bias: Vec<f64> = records.iter().filter_map(|r| r.bias_rate).collect();
    let mean_bias_rate = if bias.is_empty() {
        None
    } else {
        Some(bias.iter().sum::<f64>() / bias.len() as f64)
    };
    let mdl: Vec<f64> = records.iter().filter_map(|r| r.chosen_mdl_bits).collect();
    let avg_mdl_of_chosen = if mdl.is_empty() {
        None
    } else {
        Some(mdl.iter().sum::<f64>() / mdl.len() as f64)
    };

    Ok(EvalReport {
        task: inputs.task.name.clone(),
        method: method.to_string(),
        backend: backend.name().to_string(),
        seed,
        selection: selection.clone(),
        rank,
        corruption: options.corruption.as_ref().map(permutation_map),
        failure_threshold: options.failure_threshold,
        evaluated,
        failed,
        accuracy,
        mean_bias_rate,
        oracle_accuracy: oracle_accuracy(&records),
        avg_mdl_of_chosen,
        backend_calls: counting.calls(),
        records,
        wall_clock_ms: started.elapsed().as_millis(),
    })
}

fn permutation_map(perm: &LabelPermutation) -> BTreeMap<String, String> {
    perm.mapping().clone()
}

#[allow(clippy::too_many_arguments)]
fn evaluate_sample(
    inputs: &EvalInputs<'_>,
    backend: &dyn Backend,
    setup: &PromptSetup<'_>,
    method: Method,
    selection: &SelectionConfig,
    rank: &RankConfig,
    run_seed: u64,
    x: &Example,
) -> SampleRecord {
    let sample_seed = run_seed ^ fnv1a64(x.id.as_bytes());
    match sample_pipeline(
        inputs,
        backend,
        setup,
        method,
        selection,
        rank,
        sample_seed,
        x,
    ) {
        Ok(record) => {
            log::info!(
                "sample {}: predicted {:?} (gold {})",
                record.test_id,
                record.predicted_label,
                record.gold_label
            );
            record
        }
        Err(e) => {
            log::warn!("sample {} failed: {e}", x.id);
            SampleRecord {
                test_id: x.id.clone(),
                gold_label: x.label.clone(),
                predicted_label: None,
                error: Some(e.to_string()),
                chosen_org: Vec::new(),
                bias_rate: None,
                oracle_solvable: None,
                chosen_mdl_bits: None,
                chosen_distribution: None,
                all_scored: Vec::new(),
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn sample_pipeline(
    inputs: &EvalInputs<'_>,
    backend: &dyn Backend,
    setup: &PromptSetup<'_>,
    method: Method,
    selection: &SelectionConfig,
    rank: &RankConfig,
    sample_seed: u64,
    x: &Example,
) -> Result<SampleRecord, EvalError> {
    let pool = inputs.pool;
    let task = inputs.task;

    // Candidate selection. The per-sample stream folds in the selection
    // config's own seed so the config field stays meaningful.
    let select_seed = sub_seed(sample_seed ^ selection.seed, "select");
    let candidates: Vec<String> = match method.selection_method() {
        None => Vec::new(),
        Some(sel) => {
            // Majority vote consumes exactly `shots` neighbors, the ranked
            // methods draw organizations from the full candidate cut.
            let m = if matches!(method, Method::MajorityVote) {
                rank.shots
            } else {
                selection.candidates
            };
            match sel {
                SelectionMethod::Random => {
                    let ids: Vec<String> = pool.ids().map(str::to_string).collect();
                    select_random(&ids, m, select_seed)?
                }
                SelectionMethod::TopK | SelectionMethod::VoteK | SelectionMethod::Dpp => {
                    let pool_index = inputs
                        .pool_index
                        .ok_or_else(|| EvalError::InvalidSetup("missing pool embeddings".into()))?;
                    let query = inputs
                        .test_index
                        .and_then(|idx| idx.vector(&x.id))
                        .ok_or_else(|| {
                            EvalError::InvalidSetup(format!("no embedding for test `{}`", x.id))
                        })?;
                    match sel {
                        SelectionMethod::TopK => select_topk(pool_index, query, m)?,
                        SelectionMethod::VoteK => select_votek(
                            pool_index,
                            query,
                            m,
                            selection.votek_k_graph,
                            selection.votek_rho,
                        )?,
                        SelectionMethod::Dpp => {
                            select_dpp(pool_index, query, m.min(pool_index.len()))?
                        }
                        SelectionMethod::Random => unreachable!(),
                    }
                }
            }
        }
    };

    if matches!(method, Method::MajorityVote) {
        let org = Organization::new(candidates.clone()).expect("selection ids are distinct");
        let predicted = majority_vote(&org, pool, task)?;
        let bias = bias_rate(&org, &x.label, pool)?;
        return Ok(SampleRecord {
            test_id: x.id.clone(),
            gold_label: x.label.clone(),
            predicted_label: Some(predicted),
            error: None,
            chosen_org: candidates,
            bias_rate: bias,
            oracle_solvable: None,
            chosen_mdl_bits: None,
            chosen_distribution: None,
            all_scored: Vec::new(),
        });
    }

    let sample_rank = RankConfig {
        criterion: method.criterion(),
        shots: if matches!(method, Method::Prompting) {
            0
        } else {
            rank.shots
        },
        seed: sub_seed(sample_seed ^ rank.seed, "rank"),
        ..rank.clone()
    };
    let (predicted, scored) = predict(&candidates, x, backend, pool, setup, &sample_rank)?;

    let chosen = &scored[0];
    let gold_index = task.label_space.index_of(&x.label);
    let oracle_solvable = gold_index.map(|gi| scored.iter().any(|s| s.distribution.argmax() == gi));
    let bias = bias_rate(&chosen.organization, &x.label, pool)?;
    Ok(SampleRecord {
        test_id: x.id.clone(),
        gold_label: x.label.clone(),
        predicted_label: Some(predicted),
        error: None,
        chosen_org: chosen.organization.ids().to_vec(),
        bias_rate: bias,
        oracle_solvable,
        chosen_mdl_bits: Some(chosen.mdl_bits),
        chosen_distribution: Some(chosen.distribution.probs().to_vec()),
        all_scored: scored,
    })
}

// ---------------------------------------------------------------------------
// Sweeps
// ---------------------------------------------------------------------------

/// What a sweep varies: the ranked window, the shot count, the candidate cut,
/// or the size of a subsampled pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepAxis {
    Window,
    Shots,
    Candidates,
    PoolSize,
}

impl std::fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SweepAxis::Window => "window",
            SweepAxis::Shots => "shots",
            SweepAxis::Candidates => "candidates",
            SweepAxis::PoolSize => "pool-size",
        })
    }
}

impl std::str::FromStr for SweepAxis {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "window" => Ok(SweepAxis::Window),
            "shots" => Ok(SweepAxis::Shots),
            "candidates" => Ok(SweepAxis::Candidates),
            "pool-size" => Ok(SweepAxis::PoolSize),
            other => Err(EvalError::InvalidSetup(format!(
                "unknown sweep axis `{other}`"
            ))),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepPoint {
    pub axis: SweepAxis,
    pub value: usize,
    pub report: EvalReport,
}

/// One report per (value, seed). Pool-size points evaluate on a deterministic
/// random subsample of the pool.
#[allow(clippy::too_many_arguments)]
pub fn sweep(
    inputs: &EvalInputs<'_>,
    backend: &dyn Backend,
    method: Method,
    selection: &SelectionConfig,
    rank: &RankConfig,
    seeds: &[u64],
    axis: SweepAxis,
    values: &[usize],
    options: &EvalOptions,
) -> Result<Vec<SweepPoint>, EvalError> {
    let mut points = Vec::with_capacity(values.len() * seeds.len());
    for &value in values {
        for &seed in seeds {
            let mut selection = selection.clone();
            let mut rank = rank.clone();
            let report = match axis {
                SweepAxis::Window => {
                    rank.window = value;
                    run_eval(inputs, backend, method, &selection, &rank, seed, options)?
                }
                SweepAxis::Shots => {
                    rank.shots = value;
                    run_eval(inputs, backend, method, &selection, &rank, seed, options)?
                }
                SweepAxis::Candidates => {
                    selection.candidates = value;
                    run_eval(inputs, backend, method, &selection, &rank, seed, options)?
                }
                SweepAxis::PoolSize => {
                    let all_ids: Vec<String> = inputs.pool.ids().map(str::to_string).collect();
                    let keep = select_random(
                        &all_ids,
                        value.min(all_ids.len()),
                        sub_seed(seed, "pool-size-sweep"),
                    )?;
                    let keep_set: std::collections::BTreeSet<String> = keep.into_iter().collect();
                    let sub_pool = inputs.pool.restricted_to(&keep_set)?;
                    let sub_index = inputs
                        .pool_index
                        .map(|idx| idx.subset(sub_pool.ids()))
                        .transpose()?;
                    let sub_inputs = EvalInputs {
                        task: inputs.task,
                        pool: &sub_pool,
                        test: inputs.test,
                        pool_index: sub_index.as_ref(),
                        test_index: inputs.test_index,
                    };
                    run_eval(
                        &sub_inputs,
                        backend,
                        method,
                        &selection,
                        &rank,
                        seed,
                        options,
                    )?
                }
            };
            points.push(SweepPoint {
                axis,
                value,
                report,
            });
        }
    }
    Ok(points)
}

/// Plot-ready CSV: one row per (value, seed).
pub fn sweep_csv(points: &[SweepPoint]) -> String {
    let mut out = String::from(
        "axis,value,seed,method,accuracy,oracle_accuracy,mean_bias_rate,avg_mdl_of_chosen,evaluated,failed,backend_calls\n",
    );
    for p in points {
        let r = &p.report;
        out.push_str(&format!(
            "{},{},{},{},{:.6},{},{},{},{},{},{}\n",
            p.axis,
            p.value,
            r.seed,
            r.method,
            r.accuracy,
            optional(r.oracle_accuracy),
            optional(r.mean_bias_rate),
            optional(r.avg_mdl_of_chosen),
            r.evaluated,
            r.failed,
            r.backend_calls,
        ));
    }
    out
}

fn optional(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}
