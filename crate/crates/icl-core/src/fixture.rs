//! Seeded synthetic classification tasks with clustered embeddings.
//!
//! Desk-scale stand-in for a real dataset + encoder: each label owns an
//! orthogonal centroid direction, examples are noisy unit vectors around
//! their centroid, and texts are deterministic pseudo-words. Paired with
//! [`SyntheticBackend`](crate::backend::SyntheticBackend) this gives an end
//! to end pipeline whose label-bias, ranking and oracle behaviors are real
//! but fully reproducible. Also the workload generator for the benches.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::data::{Dataset, Example, LabelSpace, Task, Template, Verbalizer};
use crate::embed::EmbeddingMatrix;
use crate::error::Error;
use crate::rng::seeded_rng;

const COLOR_LABELS: [&str; 6] = ["crimson", "azure", "jade", "amber", "violet", "teal"];
const COLOR_WORDS: [&str; 6] = ["Crimson", "Azure", "Jade", "Amber", "Violet", "Teal"];

#[derive(Debug, Clone)]
pub struct SyntheticSpec {
    /// Number of labels, up to 6.
    pub labels: usize,
    pub pool_size: usize,
    pub test_size: usize,
    /// Embedding dimension; must be >= labels so centroids are orthogonal.
    pub dim: usize,
    /// Gaussian noise scale around each centroid. Around 0.5 the clusters
    /// overlap enough that organization choice matters but signal remains.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            labels: 2,
            pool_size: 120,
            test_size: 200,
            dim: 8,
            noise: 0.5,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticTask {
    pub task: Task,
    pub pool: Dataset,
    pub test: Dataset,
    pub pool_index: EmbeddingMatrix,
    pub test_index: EmbeddingMatrix,
}

/// Paths written by [`SyntheticTask::write_files`].
#[derive(Debug, Clone)]
pub struct SyntheticFiles {
    pub task: PathBuf,
    pub pool: PathBuf,
    pub test: PathBuf,
    pub pool_embeddings: PathBuf,
    pub test_embeddings: PathBuf,
}

pub fn generate(spec: &SyntheticSpec) -> SyntheticTask {
    assert!(
        (1..=COLOR_LABELS.len()).contains(&spec.labels),
        "labels must be 1..=6"
    );
    assert!(spec.dim >= spec.labels, "dim must be >= labels");

    let labels: Vec<String> = COLOR_LABELS[..spec.labels]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let space = LabelSpace::new(labels.clone()).expect("labels valid");
    let verbalizer_map: BTreeMap<String, String> = labels
        .iter()
        .enumerate()
        .map(|(i, l)| (l.clone(), COLOR_WORDS[i].to_string()))
        .collect();
    let verbalizer = Verbalizer::new(verbalizer_map, &space).expect("verbalizer valid");
    let template = Template::new(
        "Item: \"<text>\" Color: <LABEL>.",
        "Item: \"<text>\" Color:",
    );
    let task = Task::new("synthetic-colors", space, verbalizer, template).expect("task valid");

    let mut rng = seeded_rng(spec.seed);
    let (pool, pool_index) = generate_split("p", spec.pool_size, spec, &task, &mut rng);
    let (test, test_index) = generate_split("t", spec.test_size, spec, &task, &mut rng);

    SyntheticTask {
        task,
        pool,
        test,
        pool_index,
        test_index,
    }
}

fn generate_split(
    prefix: &str,
    count: usize,
    spec: &SyntheticSpec,
    task: &Task,
    rng: &mut ChaCha8Rng,
) -> (Dataset, EmbeddingMatrix) {
    let labels = task.label_space.labels();
    let mut examples = Vec::with_capacity(count);
    let mut ids = Vec::with_capacity(count);
    let mut vectors = Vec::with_capacity(count);
    for i in 0..count {
        let label_idx = i % labels.len();
        let id = format!("{prefix}{i:04}");
        let mut vector = vec![0.0f32; spec.dim];
        vector[label_idx] = 1.0;
        for value in vector.iter_mut() {
            *value += (spec.noise * gaussian(rng)) as f32;
        }
        let fields: BTreeMap<String, String> = [(
            "text".to_string(),
            format!("swatch {i:04} {}", pseudo_word(rng)),
        )]
        .into_iter()
        .collect();
        examples.push(Example {
            id: id.clone(),
            label: labels[label_idx].clone(),
            fields,
        });
        ids.push(id);
        vectors.push(vector);
    }
    let dataset = Dataset::new(examples, task.label_space.clone()).expect("dataset valid");
    let index = EmbeddingMatrix::build(ids, vectors).expect("index valid");
    (dataset, index)
}

/// Box-Muller standard normal.
fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

fn pseudo_word(rng: &mut ChaCha8Rng) -> String {
    const CONSONANTS: &[u8] = b"bcdfgklmnprstvz";
    const VOWELS: &[u8] = b"aeiou";
    let mut word = String::new();
    for _ in 0..3 {
        word.push(CONSONANTS[rng.gen_range(0..CONSONANTS.len())] as char);
        word.push(VOWELS[rng.gen_range(0..VOWELS.len())] as char);
    }
    word
}

impl SyntheticTask {
    /// Write the task, datasets and embeddings under `dir` in the formats the
    /// CLI consumes.
    pub fn write_files(&self, dir: impl AsRef<Path>) -> Result<SyntheticFiles, Error> {
        let dir = dir.as_ref();
        let files = SyntheticFiles {
            task: dir.join("task.json"),
            pool: dir.join("pool.jsonl"),
            test: dir.join("test.jsonl"),
            pool_embeddings: dir.join("pool_embeddings.jsonl"),
            test_embeddings: dir.join("test_embeddings.jsonl"),
        };
        self.task.save(&files.task)?;
        write_dataset(&self.pool, &files.pool)?;
        write_dataset(&self.test, &files.test)?;
        self.pool_index.write_jsonl(&files.pool_embeddings)?;
        self.test_index.write_jsonl(&files.test_embeddings)?;
        Ok(files)
    }
}

fn write_dataset(dataset: &Dataset, path: &Path) -> Result<(), Error> {
    let mut out = String::new();
    for ex in dataset.examples() {
        let mut record = serde_json::Map::new();
        record.insert("id".into(), serde_json::Value::String(ex.id.clone()));
        record.insert("label".into(), serde_json::Value::String(ex.label.clone()));
        for (key, value) in &ex.fields {
            record.insert(key.clone(), serde_json::Value::String(value.clone()));
        }
        out.push_str(&serde_json::Value::Object(record).to_string());
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|source| {
        Error::Data(crate::error::DataError::Io {
            path: path.display().to_string(),
            source,
        })
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic() {
        let spec = SyntheticSpec::default();
        let a = generate(&spec);
        let b = generate(&spec);
        assert_eq!(a.pool.examples(), b.pool.examples());
        assert_eq!(a.test_index.ids(), b.test_index.ids());
        for id in a.pool_index.ids() {
            assert_eq!(a.pool_index.vector(id), b.pool_index.vector(id));
        }
    }

    #[test]
    fn clusters_are_label_coherent() {
        let task = generate(&SyntheticSpec {
            labels: 3,
            pool_size: 90,
            test_size: 30,
            dim: 8,
            noise: 0.3,
            seed: 11,
        });
        // Same-label pairs should be more similar than cross-label pairs on
        // average, by a wide margin at this noise level.
        let mut same = Vec::new();
        let mut cross = Vec::new();
        let examples = task.pool.examples();
        for i in 0..40 {
            for j in (i + 1)..40 {
                let a = &examples[i];
                let b = &examples[j];
                let sim = crate::embed::cosine(
                    task.pool_index.vector(&a.id).unwrap(),
                    task.pool_index.vector(&b.id).unwrap(),
                )
                .unwrap();
                if a.label == b.label {
                    same.push(sim);
                } else {
                    cross.push(sim);
                }
            }
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        assert!(mean(&same) > mean(&cross) + 0.3);
    }

    #[test]
    fn files_roundtrip_through_loaders() {
        let synthetic = generate(&SyntheticSpec {
            pool_size: 10,
            test_size: 4,
            ..SyntheticSpec::default()
        });
        let dir = tempfile::tempdir().unwrap();
        let files = synthetic.write_files(dir.path()).unwrap();
        let task = Task::load(&files.task).unwrap();
        let pool = Dataset::load(&files.pool, &task.label_space).unwrap();
        let index = EmbeddingMatrix::load(&files.pool_embeddings, &[]).unwrap();
        assert_eq!(pool.len(), 10);
        index.ensure_covers(pool.ids()).unwrap();
        assert_eq!(task.template, synthetic.task.template);
    }
}
