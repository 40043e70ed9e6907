//! Stage-2 ranking: sample candidate organizations, score each one's label
//! distribution with the description-length criterion, pick the best.
//!
//! The score of an organization is the expected codelength of the label under
//! the model's own predictive distribution, which reduces to the Shannon
//! entropy of that distribution in bits. Minimizing it searches for contexts
//! that make the model confident; the `locale` criterion is the exact
//! inverse (maximize entropy), kept as a baseline.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::backend::{Backend, DemoContext, LabelScoreRequest, ScoreContext};
use crate::data::{render_prompt_parts, Dataset, Example, Organization, Task, Verbalizer};
use crate::error::{DataError, RankError};
use crate::par::map_ordered;
use crate::rng::{sample_indices, seeded_rng};

// ---------------------------------------------------------------------------
// Config
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RankCriterion {
    /// Minimize entropy (description length).
    Mdl,
    /// Maximize entropy.
    Locale,
    /// No ranking; keep the sampled order.
    None,
}

impl fmt::Display for RankCriterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RankCriterion::Mdl => "mdl",
            RankCriterion::Locale => "locale",
            RankCriterion::None => "none",
        })
    }
}

impl std::str::FromStr for RankCriterion {
    type Err = RankError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mdl" => Ok(RankCriterion::Mdl),
            "locale" => Ok(RankCriterion::Locale),
            "none" => Ok(RankCriterion::None),
            other => Err(RankError::InvalidConfig(format!(
                "unknown criterion `{other}`"
            ))),
        }
    }
}

/// Prior q(y|Y) used in the expected-codelength objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum PriorMode {
    /// The model's own distribution; the objective becomes the entropy.
    #[default]
    Model,
    /// Uniform prior: the mean per-label codelength. Ablation variant.
    Uniform,
}

impl std::str::FromStr for PriorMode {
    type Err = RankError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "model" => Ok(PriorMode::Model),
            "uniform" => Ok(PriorMode::Uniform),
            other => Err(RankError::InvalidConfig(format!("unknown prior `{other}`"))),
        }
    }
}

/// How the candidate organizations are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum OrgMode {
    /// Random arrangements: subset and order drawn jointly.
    #[default]
    Arrangements,
    /// One random subset, permuted `window` ways. Isolates order effects.
    FixedSubsetPermutations,
}

impl std::str::FromStr for OrgMode {
    type Err = RankError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "arrangements" => Ok(OrgMode::Arrangements),
            "fixed-subset-permutations" => Ok(OrgMode::FixedSubsetPermutations),
            other => Err(RankError::InvalidConfig(format!(
                "unknown org mode `{other}`"
            ))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RankConfig {
    /// Number of organizations scored per test sample.
    #[serde(default = "default_window")]
    pub window: usize,
    /// Demonstrations per organization; zero means zero-shot prompting.
    #[serde(default = "default_shots")]
    pub shots: usize,
    #[serde(default = "default_criterion")]
    pub criterion: RankCriterion,
    #[serde(default)]
    pub prior: PriorMode,
    #[serde(default)]
    pub org_mode: OrgMode,
    #[serde(default)]
    pub seed: u64,
}

fn default_window() -> usize {
    10
}

fn default_shots() -> usize {
    8
}

fn default_criterion() -> RankCriterion {
    RankCriterion::Mdl
}

impl Default for RankConfig {
    fn default() -> Self {
        Self {
            window: default_window(),
            shots: default_shots(),
            criterion: default_criterion(),
            prior: PriorMode::default(),
            org_mode: OrgMode::default(),
            seed: 0,
        }
    }
}

impl RankConfig {
    /// Enforce invariants; with `criterion = none` the window collapses to 1.
    pub fn normalized(mut self) -> Result<Self, RankError> {
        if self.window < 1 {
            return Err(RankError::InvalidConfig("window must be >= 1".into()));
        }
        if self.criterion == RankCriterion::None {
            self.window = 1;
        }
        Ok(self)
    }
}

// ---------------------------------------------------------------------------
// Distributions and scores
// ---------------------------------------------------------------------------

/// Normalized probabilities over the label space, in label-space order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LabelDistribution {
    probs: Vec<f64>,
}

impl LabelDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self, RankError> {
        if probs
            .iter()
            .any(|&p| !(0.0..=1.0).contains(&p) || !p.is_finite())
        {
            return Err(RankError::InvalidConfig(
                "distribution entries must be finite and in [0, 1]".into(),
            ));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(RankError::InvalidConfig(format!(
                "distribution sums to {total}, not 1"
            )));
        }
        Ok(Self { probs })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    /// Index of the highest-probability label; ties go to the earlier
    /// label-space position.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate().skip(1) {
            if p > self.probs[best] {
                best = i;
            }
        }
        best
    }
}

/// Softmax over natural-log scores, shifted by the max for stability.
pub fn softmax_distribution(logprobs: &[f64]) -> LabelDistribution {
    let max = logprobs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logprobs.iter().map(|&l| (l - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    LabelDistribution {
        probs: weights.iter().map(|w| w / total).collect(),
    }
}

/// Entropy of the distribution in bits: `-sum p_i log2 p_i`, with the
/// convention `0 * log2 0 = 0`. This is the expected codelength when the
/// prior is the model's own distribution.
pub fn mdl_score(dist: &LabelDistribution) -> f64 {
    dist.probs
        .iter()
        .map(|&p| {
            if p == 0.0 {
                0.0
            } else {
                -p * p.max(1e-300).log2()
            }
        })
        .sum()
}

/// Expected codelength under a uniform prior: the mean of `-log2 p_i`.
/// Degenerate zero-probability labels make this infinite, so entries are
/// floored at 1e-300.
pub fn uniform_prior_codelength(dist: &LabelDistribution) -> f64 {
    let n = dist.probs.len() as f64;
    dist.probs
        .iter()
        .map(|&p| -(p.max(1e-300)).log2())
        .sum::<f64>()
        / n
}

fn criterion_score(dist: &LabelDistribution, prior: PriorMode) -> f64 {
    match prior {
        PriorMode::Model => mdl_score(dist),
        PriorMode::Uniform => uniform_prior_codelength(dist),
    }
}

/// An organization with its scored label distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredOrganization {
    pub organization: Organization,
    pub distribution: LabelDistribution,
    /// Description length in bits under the configured prior; equals the
    /// entropy of `distribution` for the default model prior.
    pub mdl_bits: f64,
}

// ---------------------------------------------------------------------------
// Organization sampling
// ---------------------------------------------------------------------------

/// Count of length-`k` arrangements of `n` items, capped to keep the math in
/// range; anything above the cap is "effectively infinite" for sampling.
fn arrangement_count(n: usize, k: usize, cap: u128) -> u128 {
    let mut total: u128 = 1;
    for i in 0..k {
        total = total.saturating_mul((n - i) as u128);
        if total > cap {
            return cap + 1;
        }
    }
    total
}

/// Enumerate all length-`k` index arrangements of `0..n` in lexicographic
/// order. Only called when the space is small.
fn enumerate_arrangements(n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut current = Vec::with_capacity(k);
    let mut used = vec![false; n];
    fn walk(
        n: usize,
        k: usize,
        current: &mut Vec<usize>,
        used: &mut Vec<bool>,
        out: &mut Vec<Vec<usize>>,
    ) {
        if current.len() == k {
            out.push(current.clone());
            return;
        }
        for i in 0..n {
            if used[i] {
                continue;
            }
            used[i] = true;
            current.push(i);
            walk(n, k, current, used, out);
            current.pop();
            used[i] = false;
        }
    }
    walk(n, k, &mut current, &mut used, &mut out);
    out
}

/// Sample `window` pairwise-distinct organizations of `shots` candidates.
///
/// Each draw picks `shots` distinct ids without replacement and keeps them in
/// drawn order, so subset and permutation are sampled jointly. If the whole
/// arrangement space is no larger than the window it is returned in full, in
/// lexicographic candidate order. `shots = 0` collapses to the single empty
/// organization.
pub fn sample_organizations(
    candidate_ids: &[String],
    window: usize,
    shots: usize,
    seed: u64,
) -> Result<Vec<Organization>, RankError> {
    sample_organizations_mode(candidate_ids, window, shots, seed, OrgMode::Arrangements)
}

pub fn sample_organizations_mode(
    candidate_ids: &[String],
    window: usize,
    shots: usize,
    seed: u64,
    mode: OrgMode,
) -> Result<Vec<Organization>, RankError> {
    if shots == 0 {
        return Ok(vec![Organization::empty()]);
    }
    let n = candidate_ids.len();
    if n < shots {
        return Err(RankError::TooFewCandidates {
            need: shots,
            have: n,
        });
    }
    let mut rng = seeded_rng(seed);
    let base: Vec<String> = match mode {
        OrgMode::Arrangements => candidate_ids.to_vec(),
        OrgMode::FixedSubsetPermutations => {
            // One subset for all organizations; only the order varies.
            sample_indices(&mut rng, n, shots)
                .into_iter()
                .map(|i| candidate_ids[i].clone())
                .collect()
        }
    };
    let pool_n = base.len();

    const ENUM_CAP: u128 = 4096;
    let space = arrangement_count(pool_n, shots, ENUM_CAP);
    let organizations: Vec<Vec<usize>> = if space <= ENUM_CAP {
        let all = enumerate_arrangements(pool_n, shots);
        if all.len() > window {
            // Uniform without replacement from the enumerated space.
            let picks = sample_indices(&mut rng, all.len(), window);
            picks.into_iter().map(|i| all[i].clone()).collect()
        } else {
            all
        }
    } else {
        // Rejection-sample distinct sequences; collisions are negligible in a
        // space this large but are handled anyway.
        let mut seen = std::collections::HashSet::new();
        let mut out = Vec::with_capacity(window);
        while out.len() < window {
            let draw = sample_indices(&mut rng, pool_n, shots);
            if seen.insert(draw.clone()) {
                out.push(draw);
            }
        }
        out
    };

    Ok(organizations
        .into_iter()
        .map(|indices| {
            let ids = indices.into_iter().map(|i| base[i].clone()).collect();
            Organization::new(ids).expect("sampled ids are distinct")
        })
        .collect())
}

// ---------------------------------------------------------------------------
// Scoring and ranking
// ---------------------------------------------------------------------------

/// Everything needed to turn (organization, test input) into a score request.
/// `demo_verbalizer` differs from the task verbalizer only in corruption
/// studies.
pub struct PromptSetup<'a> {
    pub task: &'a Task,
    pub demo_verbalizer: &'a Verbalizer,
}

impl<'a> PromptSetup<'a> {
    pub fn plain(task: &'a Task) -> Self {
        Self {
            task,
            demo_verbalizer: &task.verbalizer,
        }
    }

    pub fn corrupted(task: &'a Task, demo_verbalizer: &'a Verbalizer) -> Self {
        Self {
            task,
            demo_verbalizer,
        }
    }

    fn request(
        &self,
        pool: &Dataset,
        org: &Organization,
        x: &Example,
    ) -> Result<LabelScoreRequest, DataError> {
        let prompt = render_prompt_parts(
            pool,
            org,
            x,
            &self.task.template,
            self.demo_verbalizer,
            &self.task.verbalizer,
            &self.task.label_space,
        )?;
        let demos = org
            .ids()
            .iter()
            .zip(&prompt.demo_words)
            .map(|(id, word)| DemoContext {
                example_id: id.clone(),
                word: word.clone(),
            })
            .collect();
        Ok(LabelScoreRequest {
            prefix: prompt.prefix,
            continuations: prompt.continuations,
            context: Some(ScoreContext {
                demos,
                query_id: x.id.clone(),
            }),
        })
    }
}

/// Normalized label distribution for one (organization, test input) pair:
/// softmax over the backend's per-label logprob sums.
pub fn label_distribution(
    backend: &dyn Backend,
    pool: &Dataset,
    org: &Organization,
    x: &Example,
    setup: &PromptSetup<'_>,
) -> Result<LabelDistribution, RankError> {
    let request = setup.request(pool, org, x)?;
    let scores = backend
        .score_labels(&request)
        .map_err(|source| RankError::Scoring {
            org_ids: org.ids().to_vec(),
            source,
        })?;
    Ok(softmax_distribution(&scores.logprobs))
}

/// Score every organization and sort by the criterion: ascending bits for
/// `mdl` (most compressible first), descending for `locale`. Ties break by
/// lexicographic id sequence; `none` keeps the sampled order. The full scored
/// list is returned because oracle evaluation needs every candidate.
pub fn rank_organizations(
    orgs: &[Organization],
    x: &Example,
    backend: &dyn Backend,
    pool: &Dataset,
    setup: &PromptSetup<'_>,
    criterion: RankCriterion,
    prior: PriorMode,
) -> Result<Vec<ScoredOrganization>, RankError> {
    if orgs.is_empty() {
        return Err(RankError::InvalidConfig("no organizations to rank".into()));
    }
    let scored = map_ordered(orgs, |org| {
        label_distribution(backend, pool, org, x, setup).map(|distribution| {
            let mdl_bits = criterion_score(&distribution, prior);
            log::debug!("org {:?}: {mdl_bits:.4} bits", org.ids());
            ScoredOrganization {
                organization: org.clone(),
                distribution,
                mdl_bits,
            }
        })
    });
    let mut scored = scored.into_iter().collect::<Result<Vec<_>, _>>()?;
    match criterion {
        RankCriterion::Mdl => scored.sort_by(|a, b| {
            a.mdl_bits
                .partial_cmp(&b.mdl_bits)
                .expect("bits are finite")
                .then_with(|| a.organization.cmp(&b.organization))
        }),
        RankCriterion::Locale => scored.sort_by(|a, b| {
            b.mdl_bits
                .partial_cmp(&a.mdl_bits)
                .expect("bits are finite")
                .then_with(|| a.organization.cmp(&b.organization))
        }),
        RankCriterion::None => {}
    }
    Ok(scored)
}

/// One prediction: sample organizations from the candidates, rank them, and
/// read the label off the best organization's distribution.
pub fn predict(
    candidate_ids: &[String],
    x: &Example,
    backend: &dyn Backend,
    pool: &Dataset,
    setup: &PromptSetup<'_>,
    config: &RankConfig,
) -> Result<(String, Vec<ScoredOrganization>), RankError> {
    let config = config.clone().normalized()?;
    let orgs = sample_organizations_mode(
        candidate_ids,
        config.window,
        config.shots,
        config.seed,
        config.org_mode,
    )?;
    let scored = rank_organizations(
        &orgs,
        x,
        backend,
        pool,
        setup,
        config.criterion,
        config.prior,
    )?;
    let best = &scored[0];
    let label = setup.task.label_space.labels()[best.distribution.argmax()].clone();
    Ok((label, scored))
}
