//! Stage-1 candidate selection: cut the pool down to a small per-input
//! candidate set before any organization is sampled or ranked.
//!
//! Four methods: uniform random, nearest-neighbor (TopK), vote-based diverse
//! selection (VoteK) and determinantal point process greedy MAP (DPP). All of
//! them return distinct ids, deterministically given their inputs and seed.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::embed::{cosine, knn, EmbeddingMatrix};
use crate::error::SelectError;
use crate::rng::{sample_indices, seeded_rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectionMethod {
    Random,
    TopK,
    VoteK,
    Dpp,
}

impl fmt::Display for SelectionMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            SelectionMethod::Random => "random",
            SelectionMethod::TopK => "topk",
            SelectionMethod::VoteK => "votek",
            SelectionMethod::Dpp => "dpp",
        };
        f.write_str(name)
    }
}

impl std::str::FromStr for SelectionMethod {
    type Err = SelectError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "random" => Ok(SelectionMethod::Random),
            "topk" => Ok(SelectionMethod::TopK),
            "votek" => Ok(SelectionMethod::VoteK),
            "dpp" => Ok(SelectionMethod::Dpp),
            other => Err(SelectError::InvalidConfig(format!(
                "unknown selection method `{other}`"
            ))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SelectionConfig {
    pub method: SelectionMethod,
    /// Candidate count m fed to the ranking stage.
    #[serde(default = "default_candidates")]
    pub candidates: usize,
    #[serde(default = "default_votek_k_graph")]
    pub votek_k_graph: usize,
    #[serde(default = "default_votek_rho")]
    pub votek_rho: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_candidates() -> usize {
    30
}

fn default_votek_k_graph() -> usize {
    15
}

fn default_votek_rho() -> f64 {
    10.0
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self {
            method: SelectionMethod::TopK,
            candidates: default_candidates(),
            votek_k_graph: default_votek_k_graph(),
            votek_rho: default_votek_rho(),
            seed: 0,
        }
    }
}

impl SelectionConfig {
    pub fn validate(&self) -> Result<(), SelectError> {
        if self.candidates < 1 {
            return Err(SelectError::InvalidConfig("candidates must be >= 1".into()));
        }
        if self.votek_rho <= 1.0 {
            return Err(SelectError::InvalidConfig("votek rho must be > 1".into()));
        }
        if self.votek_k_graph < 1 {
            return Err(SelectError::InvalidConfig(
                "votek k_graph must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Uniform sample of `m` distinct ids, whole pool if smaller. Ids are
/// canonicalized by sorting before the draw so the result depends only on the
/// pool *set*, the count and the seed.
pub fn select_random(pool_ids: &[String], m: usize, seed: u64) -> Result<Vec<String>, SelectError> {
    if pool_ids.is_empty() {
        return Err(SelectError::EmptyPool);
    }
    let mut sorted: Vec<&String> = pool_ids.iter().collect();
    sorted.sort();
    let mut rng = seeded_rng(seed);
    let picks = sample_indices(&mut rng, sorted.len(), m);
    Ok(picks.into_iter().map(|i| sorted[i].clone()).collect())
}

/// The `m` nearest pool examples to the query embedding, most similar first.
pub fn select_topk(
    index: &EmbeddingMatrix,
    query: &[f32],
    m: usize,
) -> Result<Vec<String>, SelectError> {
    let hits = knn(index, query, m)?;
    Ok(hits.into_iter().map(|(id, _)| id).collect())
}

/// Diversity-aware selection. A k-NN vote graph is built over the pool once;
/// each step picks the unselected example `u` maximizing
///
/// ```text
/// score(u) = sum over v in N(u) of rho^(-|N(v) ∩ S|) + cos(query, u)
/// ```
///
/// where `S` is the already-selected set. Votes from neighbors whose own
/// neighborhoods already overlap the selection are discounted geometrically,
/// which pushes later picks away from covered regions.
pub fn select_votek(
    index: &EmbeddingMatrix,
    query: &[f32],
    m: usize,
    k_graph: usize,
    rho: f64,
) -> Result<Vec<String>, SelectError> {
    if index.is_empty() {
        return Err(SelectError::EmptyPool);
    }
    if rho <= 1.0 {
        return Err(SelectError::InvalidConfig("votek rho must be > 1".into()));
    }
    let n = index.len();
    let query = index.normalize_query(query)?;
    let query_sim: Vec<f64> = (0..n)
        .map(|row| cosine(&query, index.row(row)).expect("dims match"))
        .collect();
    let neighbors = knn_graph(index, k_graph);

    let m = m.min(n);
    let mut selected: Vec<usize> = Vec::with_capacity(m);
    let mut is_selected = vec![false; n];
    while selected.len() < m {
        // |N(v) ∩ S| per node, recomputed per step; pools are small.
        let overlap: Vec<usize> = (0..n)
            .map(|v| neighbors[v].iter().filter(|&&w| is_selected[w]).count())
            .collect();
        let mut best: Option<(usize, f64)> = None;
        for u in 0..n {
            if is_selected[u] {
                continue;
            }
            let votes: f64 = neighbors[u]
                .iter()
                .map(|&v| rho.powi(-(overlap[v] as i32)))
                .sum();
            let score = votes + query_sim[u];
            let better = match best {
                None => true,
                Some((b, bs)) => score > bs || (score == bs && index.id_at(u) < index.id_at(b)),
            };
            if better {
                best = Some((u, score));
            }
        }
        let (pick, _) = best.expect("unselected candidates remain");
        is_selected[pick] = true;
        selected.push(pick);
    }
    Ok(selected
        .into_iter()
        .map(|row| index.id_at(row).to_string())
        .collect())
}

/// k-NN neighborhoods over the pool (self excluded), ties by ascending id.
fn knn_graph(index: &EmbeddingMatrix, k: usize) -> Vec<Vec<usize>> {
    let n = index.len();
    (0..n)
        .map(|u| {
            let mut others: Vec<(usize, f64)> = (0..n)
                .filter(|&v| v != u)
                .map(|v| {
                    let sim = cosine(index.row(u), index.row(v)).expect("dims match");
                    (v, sim)
                })
                .collect();
            others.sort_by(|a, b| {
                b.1.partial_cmp(&a.1)
                    .expect("scores are finite")
                    .then_with(|| index.id_at(a.0).cmp(index.id_at(b.0)))
            });
            others.truncate(k);
            others.into_iter().map(|(v, _)| v).collect()
        })
        .collect()
}

/// Greedy MAP inference on the quality-times-similarity DPP kernel
/// `L = diag(q) · S · diag(q)` with `S[i][j] = (1 + cos(e_i, e_j)) / 2` and
/// `q[i] = exp(cos(query, e_i))`.
///
/// Items are added by maximal log-determinant gain via incremental Cholesky
/// updates. If no remaining item has positive gain (numerically singular
/// kernel), the rest of the picks fall back to quality order with a warning.
pub fn select_dpp(
    index: &EmbeddingMatrix,
    query: &[f32],
    m: usize,
) -> Result<Vec<String>, SelectError> {
    if index.is_empty() {
        return Err(SelectError::EmptyPool);
    }
    if index.len() < m {
        return Err(SelectError::PoolTooSmall {
            need: m,
            have: index.len(),
        });
    }
    let n = index.len();
    let query = index.normalize_query(query)?;
    let quality: Vec<f64> = (0..n)
        .map(|row| cosine(&query, index.row(row)).expect("dims match").exp())
        .collect();
    let kernel = |i: usize, j: usize| -> f64 {
        let sim = (1.0 + cosine(index.row(i), index.row(j)).expect("dims match")) / 2.0;
        quality[i] * quality[j] * sim
    };

    const SINGULAR_EPS: f64 = 1e-12;
    let mut selected: Vec<usize> = Vec::with_capacity(m);
    let mut is_selected = vec![false; n];
    // d2[i] = residual conditional variance of i; gain of adding i = ln(d2[i]).
    let mut d2: Vec<f64> = (0..n).map(|i| kernel(i, i)).collect();
    // cho[t][i] = Cholesky factor row for the t-th selected item.
    let mut cho: Vec<Vec<f64>> = Vec::new();

    while selected.len() < m {
        let mut best: Option<usize> = None;
        for i in 0..n {
            if is_selected[i] {
                continue;
            }
            let better = match best {
                None => true,
                Some(b) => d2[i] > d2[b] || (d2[i] == d2[b] && index.id_at(i) < index.id_at(b)),
            };
            if better {
                best = Some(i);
            }
        }
        let pick = best.expect("unselected candidates remain");
        if d2[pick] <= SINGULAR_EPS {
            log::warn!(
                "dpp kernel became singular after {} picks; falling back to quality order",
                selected.len()
            );
            fill_by_quality(index, &quality, &mut selected, &mut is_selected, m);
            break;
        }
        let root = d2[pick].sqrt();
        let mut row = vec![0.0f64; n];
        for i in 0..n {
            if is_selected[i] || i == pick {
                continue;
            }
            let mut proj = kernel(pick, i);
            for c in &cho {
                proj -= c[pick] * c[i];
            }
            let e = proj / root;
            row[i] = e;
            d2[i] -= e * e;
        }
        row[pick] = root;
        cho.push(row);
        is_selected[pick] = true;
        selected.push(pick);
    }
    Ok(selected
        .into_iter()
        .map(|row| index.id_at(row).to_string())
        .collect())
}

fn fill_by_quality(
    index: &EmbeddingMatrix,
    quality: &[f64],
    selected: &mut Vec<usize>,
    is_selected: &mut [bool],
    m: usize,
) {
    let mut rest: Vec<usize> = (0..index.len()).filter(|&i| !is_selected[i]).collect();
    rest.sort_by(|&a, &b| {
        quality[b]
            .partial_cmp(&quality[a])
            .expect("quality is finite")
            .then_with(|| index.id_at(a).cmp(index.id_at(b)))
    });
    for i in rest {
        if selected.len() >= m {
            break;
        }
        is_selected[i] = true;
        selected.push(i);
    }
}

/// Log-determinant of the DPP kernel restricted to `ids`, for diagnostics and
/// oracle tests. Plain Gaussian elimination; subsets are tiny.
pub fn dpp_subset_logdet(
    index: &EmbeddingMatrix,
    query: &[f32],
    ids: &[String],
) -> Result<f64, SelectError> {
    let query = index.normalize_query(query)?;
    let rows: Vec<usize> = ids
        .iter()
        .map(|id| {
            index
                .row_of(id)
                .ok_or_else(|| crate::error::IndexError::UnknownId(id.clone()))
        })
        .collect::<Result<_, _>>()?;
    let quality: Vec<f64> = rows
        .iter()
        .map(|&r| cosine(&query, index.row(r)).expect("dims match").exp())
        .collect();
    let k = rows.len();
    let mut a = vec![0.0f64; k * k];
    for i in 0..k {
        for j in 0..k {
            let sim =
                (1.0 + cosine(index.row(rows[i]), index.row(rows[j])).expect("dims match")) / 2.0;
            a[i * k + j] = quality[i] * quality[j] * sim;
        }
    }
    // LU elimination with partial pivoting; determinant from the diagonal.
    let mut det_sign = 1.0f64;
    let mut log_det = 0.0f64;
    for col in 0..k {
        let mut pivot = col;
        for row in col + 1..k {
            if a[row * k + col].abs() > a[pivot * k + col].abs() {
                pivot = row;
            }
        }
        let pivot_value = a[pivot * k + col];
        if pivot_value == 0.0 {
            return Ok(f64::NEG_INFINITY);
        }
        if pivot != col {
            for j in 0..k {
                a.swap(col * k + j, pivot * k + j);
            }
            det_sign = -det_sign;
        }
        if pivot_value < 0.0 {
            det_sign = -det_sign;
        }
        log_det += pivot_value.abs().ln();
        for row in col + 1..k {
            let factor = a[row * k + col] / pivot_value;
            for j in col..k {
                a[row * k + j] -= factor * a[col * k + j];
            }
        }
    }
    if det_sign < 0.0 {
        // A PSD kernel minor should never be negative; treat as singular.
        return Ok(f64::NEG_INFINITY);
    }
    Ok(log_det)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashSet;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("e{i:03}")).collect()
    }

    fn random_index(n: usize, d: usize, seed: u64) -> EmbeddingMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vectors = (0..n)
            .map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        EmbeddingMatrix::build(ids(n), vectors).unwrap()
    }

    #[test]
    fn random_exhausts_whole_pool() {
        let pool = ids(3);
        let got = select_random(&pool, 3, 9).unwrap();
        let set: HashSet<_> = got.iter().collect();
        assert_eq!(set.len(), 3);
        assert_eq!(set, pool.iter().collect());
    }

    #[test]
    fn random_is_deterministic_and_pool_order_free() {
        let pool = ids(50);
        let a = select_random(&pool, 10, 123).unwrap();
        let b = select_random(&pool, 10, 123).unwrap();
        assert_eq!(a, b);
        let mut shuffled = pool.clone();
        shuffled.reverse();
        assert_eq!(select_random(&shuffled, 10, 123).unwrap(), a);
    }

    #[test]
    fn random_seeds_differ() {
        let pool = ids(1000);
        let a: HashSet<String> = select_random(&pool, 30, 1).unwrap().into_iter().collect();
        let b: HashSet<String> = select_random(&pool, 30, 2).unwrap().into_iter().collect();
        assert_eq!(a.len(), 30);
        assert_eq!(b.len(), 30);
        // Two independent 30-of-1000 draws matching exactly is ~impossible.
        assert_ne!(a, b);
        let overlap = a.intersection(&b).count();
        assert!(overlap < 15, "suspicious overlap {overlap}");
    }

    #[test]
    fn random_empty_pool_errors() {
        assert!(matches!(
            select_random(&[], 5, 0),
            Err(SelectError::EmptyPool)
        ));
    }

    #[test]
    fn topk_single_element_pool() {
        let index = EmbeddingMatrix::build(vec!["only".into()], vec![vec![1.0, 0.0]]).unwrap();
        assert_eq!(select_topk(&index, &[0.3, 0.7], 5).unwrap(), vec!["only"]);
    }

    #[test]
    fn topk_exact_duplicate_of_query_first() {
        let index = EmbeddingMatrix::build(
            vec!["far".into(), "same".into(), "near".into()],
            vec![vec![0.0, 1.0], vec![0.6, 0.8], vec![0.7, 0.6]],
        )
        .unwrap();
        let got = select_topk(&index, &[0.6, 0.8], 3).unwrap();
        assert_eq!(got[0], "same");
    }

    #[test]
    fn topk_matches_exhaustive_sort() {
        let index = random_index(50, 6, 21);
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let query: Vec<f32> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let got = select_topk(&index, &query, 30).unwrap();

        let q = index.normalize_query(&query).unwrap();
        let mut all: Vec<(String, f64)> = (0..index.len())
            .map(|r| {
                (
                    index.id_at(r).to_string(),
                    cosine(&q, index.row(r)).unwrap(),
                )
            })
            .collect();
        all.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0)));
        let expect: Vec<String> = all.into_iter().take(30).map(|(id, _)| id).collect();
        assert_eq!(got, expect);
    }

    #[test]
    fn votek_identical_embeddings_still_distinct_ids() {
        let index = EmbeddingMatrix::build(ids(6), vec![vec![1.0, 0.0]; 6]).unwrap();
        let got = select_votek(&index, &[1.0, 0.0], 4, 3, 10.0).unwrap();
        assert_eq!(got.len(), 4);
        assert_eq!(got.iter().collect::<HashSet<_>>().len(), 4);
    }

    /// Two tight clusters, m=2: the second pick must come from the other
    /// cluster because votes around the first pick are discounted.
    #[test]
    fn votek_two_clusters_one_pick_each() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut vectors = Vec::new();
        let mut names = Vec::new();
        for i in 0..10 {
            let eps: f32 = rng.gen_range(-0.02..0.02);
            vectors.push(vec![1.0, eps, 0.0]);
            names.push(format!("a{i:02}"));
        }
        for i in 0..10 {
            let eps: f32 = rng.gen_range(-0.02..0.02);
            vectors.push(vec![0.0, eps, 1.0]);
            names.push(format!("b{i:02}"));
        }
        let index = EmbeddingMatrix::build(names, vectors).unwrap();
        let query = [0.7, 0.0, 0.7];
        let got = select_votek(&index, &query, 2, 5, 10.0).unwrap();
        let clusters: HashSet<char> = got.iter().map(|id| id.chars().next().unwrap()).collect();
        assert_eq!(clusters.len(), 2, "picks {got:?} land in one cluster");
    }

    /// m=1 must agree with a direct evaluation of the scoring formula.
    #[test]
    fn votek_first_pick_matches_hand_formula() {
        let index = random_index(25, 4, 31);
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let query: Vec<f32> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let k_graph = 5;

        let got = select_votek(&index, &query, 1, k_graph, 10.0).unwrap();

        // Independent reimplementation: with S empty every vote is rho^0 = 1,
        // so score(u) = |N(u)| + cos(query, u).
        let q = index.normalize_query(&query).unwrap();
        let graph = knn_graph(&index, k_graph);
        let mut best: Option<(String, f64)> = None;
        for (u, neighbors) in graph.iter().enumerate() {
            let score = neighbors.len() as f64 + cosine(&q, index.row(u)).unwrap();
            let better = match &best {
                None => true,
                Some((bid, bs)) => score > *bs || (score == *bs && index.id_at(u) < bid.as_str()),
            };
            if better {
                best = Some((index.id_at(u).to_string(), score));
            }
        }
        assert_eq!(got, vec![best.unwrap().0]);
    }

    /// With a huge rho any nonzero overlap wipes out a vote, so the second
    /// pick avoids the first pick's neighborhood entirely when a non-neighbor
    /// exists. Clusters sized k_graph + 1 make every member's neighborhood
    /// contain the first pick.
    #[test]
    fn votek_huge_rho_second_pick_avoids_neighbors() {
        let k_graph = 4;
        let mut vectors = Vec::new();
        let mut names = Vec::new();
        for i in 0..5 {
            vectors.push(vec![1.0f32, i as f32 * 0.001, 0.0]);
            names.push(format!("a{i}"));
        }
        for i in 0..5 {
            vectors.push(vec![0.0, i as f32 * 0.001, 1.0]);
            names.push(format!("b{i}"));
        }
        let index = EmbeddingMatrix::build(names, vectors).unwrap();
        let got = select_votek(&index, &[1.0, 0.0, 0.0], 2, k_graph, 1e6).unwrap();
        assert!(
            got[0].starts_with('a'),
            "query pulls the first pick into a: {got:?}"
        );
        assert!(
            got[1].starts_with('b'),
            "second pick should leave the first cluster: {got:?}"
        );
        let graph = knn_graph(&index, k_graph);
        let first = index.row_of(&got[0]).unwrap();
        let second = index.row_of(&got[1]).unwrap();
        assert!(!graph[first].contains(&second));
    }

    #[test]
    fn votek_empty_pool_errors() {
        let index = EmbeddingMatrix::build(vec![], vec![]).unwrap();
        assert!(matches!(
            select_votek(&index, &[1.0], 2, 3, 10.0),
            Err(SelectError::EmptyPool)
        ));
    }

    #[test]
    fn dpp_orthogonal_pool_selects_all() {
        let mut vectors = Vec::new();
        for i in 0..4 {
            let mut v = vec![0.0f32; 4];
            v[i] = 1.0;
            vectors.push(v);
        }
        let index = EmbeddingMatrix::build(ids(4), vectors).unwrap();
        let got = select_dpp(&index, &[0.5, 0.5, 0.5, 0.5], 4).unwrap();
        let set: HashSet<_> = got.iter().collect();
        assert_eq!(set.len(), 4);
    }

    #[test]
    fn dpp_never_coselects_duplicates() {
        let index = EmbeddingMatrix::build(
            vec!["dup1".into(), "dup2".into(), "other".into()],
            vec![vec![1.0, 0.0], vec![1.0, 0.0], vec![0.6, 0.8]],
        )
        .unwrap();
        let got = select_dpp(&index, &[1.0, 0.0], 2).unwrap();
        assert!(
            !(got.contains(&"dup1".to_string()) && got.contains(&"dup2".to_string())),
            "both duplicates selected: {got:?}"
        );
        assert!(got.contains(&"other".to_string()));
    }

    #[test]
    fn dpp_pool_smaller_than_m_errors() {
        let index = random_index(2, 3, 1);
        assert!(matches!(
            select_dpp(&index, &[1.0, 0.0, 0.0], 3),
            Err(SelectError::PoolTooSmall { need: 3, have: 2 })
        ));
    }

    #[test]
    fn dpp_all_duplicates_falls_back_to_full_length() {
        let index = EmbeddingMatrix::build(ids(4), vec![vec![1.0, 0.0]; 4]).unwrap();
        let got = select_dpp(&index, &[1.0, 0.0], 3).unwrap();
        assert_eq!(got.len(), 3);
        assert_eq!(got.iter().collect::<HashSet<_>>().len(), 3);
    }

    /// Greedy log-det on small pools stays near the exhaustive optimum.
    #[test]
    fn dpp_greedy_near_exhaustive_optimum() {
        let mut close = 0;
        let trials = 20;
        for seed in 0..trials {
            let n = 8 + (seed as usize % 3);
            let index = random_index(n, 5, 100 + seed);
            let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
            let query: Vec<f32> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let m = 3;

            let picked = select_dpp(&index, &query, m).unwrap();
            let greedy = dpp_subset_logdet(&index, &query, &picked).unwrap();

            let mut best = f64::NEG_INFINITY;
            let all: Vec<String> = index.ids().to_vec();
            for i in 0..n {
                for j in i + 1..n {
                    for k in j + 1..n {
                        let subset = vec![all[i].clone(), all[j].clone(), all[k].clone()];
                        let logdet = dpp_subset_logdet(&index, &query, &subset).unwrap();
                        if logdet > best {
                            best = logdet;
                        }
                    }
                }
            }
            if greedy >= best - 0.05 * best.abs() {
                close += 1;
            }
        }
        assert!(
            close >= trials * 9 / 10,
            "only {close}/{trials} near-optimal"
        );
    }

    #[test]
    fn selectors_return_min_m_pool_distinct() {
        let index = random_index(7, 3, 77);
        let query = [0.2f32, -0.4, 0.9];
        for m in [1usize, 5, 7, 12] {
            let expected = m.min(7);
            let topk = select_topk(&index, &query, m).unwrap();
            assert_eq!(topk.len(), expected);
            assert_eq!(topk.iter().collect::<HashSet<_>>().len(), expected);
            let votek = select_votek(&index, &query, m, 3, 10.0).unwrap();
            assert_eq!(votek.len(), expected);
            assert_eq!(votek.iter().collect::<HashSet<_>>().len(), expected);
            let random = select_random(index.ids(), m, 3).unwrap();
            assert_eq!(random.len(), expected);
            assert_eq!(random.iter().collect::<HashSet<_>>().len(), expected);
        }
    }
}
