//! Run configuration: a JSON config file plus flag overrides, resolved into
//! one fully-expanded config with per-field provenance so any report can be
//! reproduced from its own output directory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use icl_core::eval::Method;
use icl_core::rank::{OrgMode, PriorMode, RankConfig, RankCriterion};
use icl_core::select::{SelectionConfig, SelectionMethod};

/// Which backend scores labels.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum BackendSpec {
    Mock,
    Synthetic {
        #[serde(default = "default_alpha")]
        alpha: f64,
    },
    Http {
        endpoint: String,
        model: String,
        /// Name of the environment variable holding the bearer token.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        auth_token_env: Option<String>,
        #[serde(default = "default_max_in_flight")]
        max_in_flight: usize,
        #[serde(default)]
        length_normalize: bool,
        #[serde(default = "default_timeout_ms")]
        timeout_ms: u64,
    },
    Fixture {
        path: PathBuf,
        model: String,
    },
}

fn default_alpha() -> f64 {
    0.1
}

fn default_max_in_flight() -> usize {
    8
}

fn default_timeout_ms() -> u64 {
    60_000
}

/// Fetch embeddings from an endpoint instead of files. The example text sent
/// for embedding is the concatenation of its fields in field-name order.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmbeddingHttpSpec {
    pub endpoint: String,
    pub model: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub auth_token_env: Option<String>,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
}

/// The on-disk run config. Every field has a default so minimal configs work.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfigFile {
    pub task: PathBuf,
    pub pool: PathBuf,
    pub test: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pool_embeddings: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_embeddings: Option<PathBuf>,
    /// Used for any split without an embeddings file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding_http: Option<EmbeddingHttpSpec>,
    #[serde(default = "default_backend")]
    pub backend: BackendSpec,
    #[serde(default = "default_method")]
    pub method: String,
    #[serde(default)]
    pub selection: SelectionConfig,
    #[serde(default)]
    pub rank: RankConfig,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// `null` for a clean run, `"cyclic"` for the cyclic shift (pairwise swap
    /// on two labels), or an explicit label -> label map.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corrupt_labels: Option<serde_json::Value>,
    #[serde(default = "default_failure_threshold")]
    pub failure_threshold: f64,
    pub output_dir: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,
    #[serde(default)]
    pub trace: bool,
}

fn default_backend() -> BackendSpec {
    BackendSpec::Mock
}

fn default_method() -> String {
    "topk_mdl".into()
}

fn default_seeds() -> Vec<u64> {
    vec![1]
}

fn default_failure_threshold() -> f64 {
    0.01
}

/// Flag overrides shared by `run` and `sweep`.
#[derive(Debug, Clone, Default, clap::Args)]
pub struct Overrides {
    /// Evaluation method (prompting, random, topk, topk_mdl, topk_locale,
    /// majority_vote, votek_mdl, dpp_mdl, random_mdl).
    #[arg(long)]
    pub method: Option<String>,
    /// Candidate selection algorithm.
    #[arg(long = "select", value_parser = ["random", "topk", "votek", "dpp"])]
    pub select: Option<String>,
    /// Candidate count fed to ranking.
    #[arg(long)]
    pub candidates: Option<usize>,
    /// Vote graph neighbor count.
    #[arg(long = "votek-k")]
    pub votek_k: Option<usize>,
    /// Vote discount base (> 1).
    #[arg(long = "votek-rho")]
    pub votek_rho: Option<f64>,
    /// Organizations ranked per sample.
    #[arg(long)]
    pub window: Option<usize>,
    /// Demonstrations per organization.
    #[arg(long)]
    pub shots: Option<usize>,
    /// Ranking criterion (mdl, locale, none).
    #[arg(long)]
    pub criterion: Option<String>,
    /// Codelength prior (model, uniform).
    #[arg(long)]
    pub prior: Option<String>,
    /// Organization sampling mode (arrangements, fixed-subset-permutations).
    #[arg(long = "org-mode")]
    pub org_mode: Option<String>,
    /// Run seeds; repeat or comma-separate for multiple.
    #[arg(long = "seed", value_delimiter = ',')]
    pub seeds: Vec<u64>,
    /// Corrupt demonstration labels with the cyclic shift.
    #[arg(long = "corrupt-labels")]
    pub corrupt_labels: bool,
    /// Abort when more than this fraction of samples fail.
    #[arg(long = "failure-threshold")]
    pub failure_threshold: Option<f64>,
    /// Worker threads (default: logical cores, capped by the backend's
    /// max-in-flight).
    #[arg(long)]
    pub workers: Option<usize>,
    /// Output directory.
    #[arg(long, short = 'o')]
    pub output: Option<PathBuf>,
    /// Write per-sample traces with all scored organizations.
    #[arg(long)]
    pub trace: bool,
}

/// The fully-resolved run: the effective config plus provenance per
/// overridable field.
#[derive(Debug, Clone)]
pub struct ResolvedRun {
    pub file: RunConfigFile,
    pub method: Method,
    pub provenance: BTreeMap<&'static str, &'static str>,
}

pub fn load_config(path: &Path) -> Result<RunConfigFile, String> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| format!("cannot read config `{}`: {e}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| format!("invalid config `{}`: {e}", path.display()))
}

/// Apply flag overrides on top of the file config. Flags always win; the
/// provenance map records default/config/flag per field.
pub fn resolve(
    mut file: RunConfigFile,
    overrides: &Overrides,
    config_text: &str,
) -> Result<ResolvedRun, String> {
    let raw: serde_json::Value =
        serde_json::from_str(config_text).map_err(|e| format!("invalid config: {e}"))?;
    let present = |key: &str| raw.get(key).is_some();
    let mut provenance: BTreeMap<&'static str, &'static str> = BTreeMap::new();
    let mut note = |key: &'static str, flagged: bool, in_file: bool| {
        provenance.insert(
            key,
            if flagged {
                "flag"
            } else if in_file {
                "config"
            } else {
                "default"
            },
        );
    };

    note("method", overrides.method.is_some(), present("method"));
    if let Some(m) = &overrides.method {
        file.method = m.clone();
    }
    let mut method: Method = file.method.parse().map_err(|e| format!("--method: {e}"))?;

    let sel_in_file = present("selection");
    note("selection.method", overrides.select.is_some(), sel_in_file);
    if let Some(s) = &overrides.select {
        let selector = s.parse::<SelectionMethod>().map_err(|e| e.to_string())?;
        method = remap_selector(method, selector)?;
        file.method = method.to_string();
    }
    if let Some(m) = method.selection_method() {
        // The method names the selector; keep the config field aligned so
        // the report's snapshot is truthful.
        file.selection.method = m;
    }
    note(
        "selection.candidates",
        overrides.candidates.is_some(),
        sel_in_file,
    );
    if let Some(c) = overrides.candidates {
        file.selection.candidates = c;
    }
    note(
        "selection.votek_k_graph",
        overrides.votek_k.is_some(),
        sel_in_file,
    );
    if let Some(k) = overrides.votek_k {
        file.selection.votek_k_graph = k;
    }
    note(
        "selection.votek_rho",
        overrides.votek_rho.is_some(),
        sel_in_file,
    );
    if let Some(r) = overrides.votek_rho {
        file.selection.votek_rho = r;
    }

    let rank_in_file = present("rank");
    note("rank.window", overrides.window.is_some(), rank_in_file);
    if let Some(w) = overrides.window {
        file.rank.window = w;
    }
    note("rank.shots", overrides.shots.is_some(), rank_in_file);
    if let Some(s) = overrides.shots {
        file.rank.shots = s;
    }
    note(
        "rank.criterion",
        overrides.criterion.is_some(),
        rank_in_file,
    );
    if let Some(c) = &overrides.criterion {
        file.rank.criterion = c.parse::<RankCriterion>().map_err(|e| e.to_string())?;
    }
    note("rank.prior", overrides.prior.is_some(), rank_in_file);
    if let Some(p) = &overrides.prior {
        file.rank.prior = p.parse::<PriorMode>().map_err(|e| e.to_string())?;
    }
    note("rank.org_mode", overrides.org_mode.is_some(), rank_in_file);
    if let Some(m) = &overrides.org_mode {
        file.rank.org_mode = m.parse::<OrgMode>().map_err(|e| e.to_string())?;
    }

    note("seeds", !overrides.seeds.is_empty(), present("seeds"));
    if !overrides.seeds.is_empty() {
        file.seeds = overrides.seeds.clone();
    }
    if file.seeds.is_empty() {
        return Err("seeds must be non-empty".into());
    }

    note(
        "corrupt_labels",
        overrides.corrupt_labels,
        present("corrupt_labels"),
    );
    if overrides.corrupt_labels {
        file.corrupt_labels = Some(serde_json::Value::String("cyclic".into()));
    }

    note(
        "failure_threshold",
        overrides.failure_threshold.is_some(),
        present("failure_threshold"),
    );
    if let Some(t) = overrides.failure_threshold {
        file.failure_threshold = t;
    }

    note("workers", overrides.workers.is_some(), present("workers"));
    if let Some(w) = overrides.workers {
        file.workers = Some(w);
    }

    note(
        "output_dir",
        overrides.output.is_some(),
        present("output_dir"),
    );
    if let Some(o) = &overrides.output {
        file.output_dir = o.clone();
    }

    note("trace", overrides.trace, present("trace"));
    if overrides.trace {
        file.trace = true;
    }

    Ok(ResolvedRun {
        file,
        method,
        provenance,
    })
}

/// `--select` switches the evaluation arm to the one using that selector and
/// the same ranking behavior. Combinations without a named arm are rejected
/// rather than silently reinterpreted.
fn remap_selector(method: Method, selector: SelectionMethod) -> Result<Method, String> {
    let ranked = matches!(
        method,
        Method::TopKMdl | Method::VoteKMdl | Method::DppMdl | Method::RandomMdl
    );
    let plain = matches!(method, Method::Random | Method::TopK);
    let remapped = match selector {
        SelectionMethod::Random if ranked => Method::RandomMdl,
        SelectionMethod::TopK if ranked => Method::TopKMdl,
        SelectionMethod::VoteK if ranked => Method::VoteKMdl,
        SelectionMethod::Dpp if ranked => Method::DppMdl,
        SelectionMethod::Random if plain => Method::Random,
        SelectionMethod::TopK if plain => Method::TopK,
        SelectionMethod::TopK if matches!(method, Method::TopKLocalE | Method::MajorityVote) => {
            method
        }
        _ => {
            return Err(format!(
                "--select {selector} has no counterpart for method `{method}`"
            ))
        }
    };
    Ok(remapped)
}

impl ResolvedRun {
    /// The resolved config with provenance, written alongside results.
    pub fn to_json(&self) -> String {
        let mut value = serde_json::to_value(&self.file).expect("config serializes");
        let provenance: BTreeMap<&str, &str> = self.provenance.clone();
        value["provenance"] = serde_json::to_value(provenance).expect("provenance serializes");
        serde_json::to_string_pretty(&value).expect("resolved config serializes")
    }
}
