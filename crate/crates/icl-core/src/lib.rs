//! Select-then-rank engine for in-context example organizations.
//!
//! For each test input the engine (1) filters the example pool down to a
//! small candidate set (random / nearest-neighbor / vote-diverse / DPP), (2)
//! samples a window of candidate organizations — ordered subsets of the
//! candidates — and (3) scores each organization by the description length of
//! the predicted label distribution, predicting with the most compressible
//! one. An evaluation harness layers accuracy, bias-rate, oracle and sweep
//! analyses on top.

pub mod backend;
pub mod data;
pub mod embed;
pub mod error;
pub mod eval;
pub mod fixture;
pub mod par;
pub mod rank;
pub mod rng;
pub mod select;

pub use backend::{
    Backend, HttpBackend, LabelScoreRequest, LabelScores, MockBackend, SyntheticBackend,
};
pub use data::{
    corrupt_verbalizer, render_demo, render_prompt, Dataset, Example, LabelPermutation, LabelSpace,
    Organization, Task, Template, Verbalizer,
};
pub use embed::{cosine, knn, EmbeddingMatrix};
pub use error::{BackendError, DataError, Error, EvalError, IndexError, RankError, SelectError};
pub use eval::{run_eval, EvalOptions, EvalReport, Method, SampleRecord};
pub use rank::{
    mdl_score, predict, rank_organizations, sample_organizations, LabelDistribution, OrgMode,
    PriorMode, RankConfig, RankCriterion, ScoredOrganization,
};
pub use select::{
    select_dpp, select_random, select_topk, select_votek, SelectionConfig, SelectionMethod,
};
