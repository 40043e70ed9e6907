//! Domain types and prompt assembly: examples, label spaces, verbalizers,
//! templates and organizations.
//!
//! A prompt is built in two halves. The *prefix* concatenates the rendered
//! demonstrations and the rendered query up to the position where the label
//! word would appear; the *continuations* are the verbalized label words, one
//! per label. Appending `continuations[i]` to the prefix yields the full text
//! whose final-segment probability is the model's score for label `i`.
//!
//! All types here are immutable after construction and rendering is pure, so
//! everything can be shared freely across threads.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::DataError;

/// Placeholder token substituted with the verbalized label in demo patterns.
pub const LABEL_PLACEHOLDER: &str = "<LABEL>";

// ---------------------------------------------------------------------------
// Core types
// ---------------------------------------------------------------------------

/// One labeled pool or test instance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub id: String,
    pub label: String,
    /// Named text fields the template can reference, e.g. `text`, `premise`.
    pub fields: BTreeMap<String, String>,
}

/// The fixed, ordered set of label ids for a task. The order defines how
/// distribution vectors are indexed for the whole run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSpace {
    labels: Vec<String>,
}

impl LabelSpace {
    pub fn new(labels: Vec<String>) -> Result<Self, DataError> {
        if labels.is_empty() {
            return Err(DataError::InvalidLabelSpace("no labels".into()));
        }
        let mut seen = BTreeSet::new();
        for label in &labels {
            if !seen.insert(label.as_str()) {
                return Err(DataError::InvalidLabelSpace(format!(
                    "duplicate label `{label}`"
                )));
            }
        }
        Ok(Self { labels })
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    pub fn contains(&self, label: &str) -> bool {
        self.index_of(label).is_some()
    }
}

/// Maps each label id to the word(s) the model must generate for it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verbalizer {
    mapping: BTreeMap<String, String>,
}

impl Verbalizer {
    /// The mapping must be total over the label space, with distinct,
    /// non-empty continuation strings.
    pub fn new(mapping: BTreeMap<String, String>, space: &LabelSpace) -> Result<Self, DataError> {
        for label in space.labels() {
            match mapping.get(label) {
                None => {
                    return Err(DataError::InvalidVerbalizer(format!(
                        "label `{label}` has no verbalization"
                    )))
                }
                Some(word) if word.is_empty() => {
                    return Err(DataError::InvalidVerbalizer(format!(
                        "label `{label}` verbalizes to an empty string"
                    )))
                }
                Some(_) => {}
            }
        }
        for extra in mapping.keys() {
            if !space.contains(extra) {
                return Err(DataError::InvalidVerbalizer(format!(
                    "verbalizer maps unknown label `{extra}`"
                )));
            }
        }
        let mut words = BTreeSet::new();
        for word in mapping.values() {
            if !words.insert(word.as_str()) {
                return Err(DataError::InvalidVerbalizer(format!(
                    "continuation `{word}` is used by more than one label"
                )));
            }
        }
        Ok(Self { mapping })
    }

    pub fn word(&self, label: &str) -> Option<&str> {
        self.mapping.get(label).map(String::as_str)
    }

    pub fn mapping(&self) -> &BTreeMap<String, String> {
        &self.mapping
    }
}

/// A bijection on the label space, used to corrupt verbalizers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelPermutation {
    map: BTreeMap<String, String>,
}

impl LabelPermutation {
    pub fn new(map: BTreeMap<String, String>, space: &LabelSpace) -> Result<Self, DataError> {
        if map.len() != space.len() {
            return Err(DataError::InvalidPermutation(format!(
                "maps {} labels, space has {}",
                map.len(),
                space.len()
            )));
        }
        let mut images = BTreeSet::new();
        for (from, to) in &map {
            if !space.contains(from) {
                return Err(DataError::InvalidPermutation(format!(
                    "unknown source label `{from}`"
                )));
            }
            if !space.contains(to) {
                return Err(DataError::InvalidPermutation(format!(
                    "unknown target label `{to}`"
                )));
            }
            if !images.insert(to.as_str()) {
                return Err(DataError::InvalidPermutation(format!(
                    "label `{to}` is the image of two labels"
                )));
            }
        }
        Ok(Self { map })
    }

    pub fn identity(space: &LabelSpace) -> Self {
        let map = space
            .labels()
            .iter()
            .map(|l| (l.clone(), l.clone()))
            .collect();
        Self { map }
    }

    /// Cyclic shift: each label maps to the next one in label-space order.
    /// For two labels this is the pairwise swap.
    pub fn cyclic(space: &LabelSpace) -> Self {
        let labels = space.labels();
        let map = labels
            .iter()
            .enumerate()
            .map(|(i, l)| (l.clone(), labels[(i + 1) % labels.len()].clone()))
            .collect();
        Self { map }
    }

    pub fn apply<'a>(&'a self, label: &'a str) -> &'a str {
        self.map.get(label).map(String::as_str).unwrap_or(label)
    }

    pub fn mapping(&self) -> &BTreeMap<String, String> {
        &self.map
    }

    pub fn inverse(&self) -> Self {
        let map = self
            .map
            .iter()
            .map(|(from, to)| (to.clone(), from.clone()))
            .collect();
        Self { map }
    }
}

/// Builds a new verbalizer with `mapping[label] = v.mapping[perm(label)]`,
/// i.e. each label now renders with the word of its permuted image.
pub fn corrupt_verbalizer(v: &Verbalizer, perm: &LabelPermutation) -> Verbalizer {
    let mapping = v
        .mapping
        .keys()
        .map(|label| (label.clone(), v.mapping[perm.apply(label)].clone()))
        .collect();
    Verbalizer { mapping }
}

/// Text patterns wrapping examples into prompt segments.
///
/// `demo_pattern` must contain exactly one `<LABEL>` placeholder plus any
/// number of `<FIELD>` placeholders; `query_pattern` must contain no label
/// placeholder and by construction ends where the label word would begin.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Template {
    pub demo_pattern: String,
    pub query_pattern: String,
    #[serde(default = "default_separator")]
    pub separator: String,
    /// Prepend a space to each continuation. Logprob backends are
    /// whitespace-sensitive; BPE vocabularies usually want " word".
    #[serde(default = "default_leading_space")]
    pub continuation_leading_space: bool,
}

fn default_separator() -> String {
    "\n".to_string()
}

fn default_leading_space() -> bool {
    true
}

impl Template {
    pub fn new(demo_pattern: impl Into<String>, query_pattern: impl Into<String>) -> Self {
        Self {
            demo_pattern: demo_pattern.into(),
            query_pattern: query_pattern.into(),
            separator: default_separator(),
            continuation_leading_space: default_leading_space(),
        }
    }

    pub fn with_separator(mut self, sep: impl Into<String>) -> Self {
        self.separator = sep.into();
        self
    }

    pub fn with_leading_space(mut self, on: bool) -> Self {
        self.continuation_leading_space = on;
        self
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let demo_labels = placeholders(&self.demo_pattern)
            .iter()
            .filter(|p| *p == "LABEL")
            .count();
        if demo_labels != 1 {
            return Err(DataError::InvalidTemplate(format!(
                "demo pattern must contain exactly one {LABEL_PLACEHOLDER}, found {demo_labels}"
            )));
        }
        if placeholders(&self.query_pattern)
            .iter()
            .any(|p| p == "LABEL")
        {
            return Err(DataError::InvalidTemplate(format!(
                "query pattern must not contain {LABEL_PLACEHOLDER}"
            )));
        }
        Ok(())
    }
}

/// Extract `<NAME>` placeholder names from a pattern. Tokens that are not a
/// bare identifier (e.g. `a < b`) are left alone.
fn placeholders(pattern: &str) -> Vec<String> {
    let mut out = Vec::new();
    let bytes = pattern.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'<' {
            if let Some(end) = pattern[i + 1..].find('>') {
                let name = &pattern[i + 1..i + 1 + end];
                if is_placeholder_name(name) {
                    out.push(name.to_string());
                    i += end + 2;
                    continue;
                }
            }
        }
        i += 1;
    }
    out
}

fn is_placeholder_name(name: &str) -> bool {
    !name.is_empty()
        && name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_')
        && name.chars().next().is_some_and(|c| !c.is_ascii_digit())
}

/// Substitute placeholders in `pattern`. `label_word` is used for `<LABEL>`
/// when given; field placeholders resolve against the example's fields.
fn substitute(pattern: &str, ex: &Example, label_word: Option<&str>) -> Result<String, DataError> {
    let mut out = String::with_capacity(pattern.len());
    let mut rest = pattern;
    while let Some(start) = rest.find('<') {
        out.push_str(&rest[..start]);
        let tail = &rest[start..];
        match tail[1..].find('>') {
            Some(end) if is_placeholder_name(&tail[1..1 + end]) => {
                let name = &tail[1..1 + end];
                if name == "LABEL" {
                    match label_word {
                        Some(word) => out.push_str(word),
                        None => {
                            return Err(DataError::InvalidTemplate(
                                "label placeholder in a label-free pattern".into(),
                            ))
                        }
                    }
                } else {
                    match ex.fields.get(name) {
                        Some(value) => out.push_str(value),
                        None => {
                            return Err(DataError::MissingField {
                                example_id: ex.id.clone(),
                                field: name.to_string(),
                            })
                        }
                    }
                }
                rest = &tail[end + 2..];
            }
            _ => {
                out.push('<');
                rest = &tail[1..];
            }
        }
    }
    out.push_str(rest);
    Ok(out)
}

/// Render one demonstration: the demo pattern with field placeholders filled
/// in and the label placeholder replaced by the example's verbalized label.
pub fn render_demo(
    template: &Template,
    ex: &Example,
    verbalizer: &Verbalizer,
) -> Result<String, DataError> {
    let word = verbalizer.word(&ex.label).ok_or_else(|| {
        DataError::InvalidVerbalizer(format!("no verbalization for label `{}`", ex.label))
    })?;
    substitute(&template.demo_pattern, ex, Some(word))
}

/// An ordered sequence of pool example ids: which demonstrations to show and
/// in what order. Length zero means zero-shot prompting.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Organization {
    example_ids: Vec<String>,
}

impl Organization {
    pub fn new(example_ids: Vec<String>) -> Result<Self, DataError> {
        let mut seen = BTreeSet::new();
        for id in &example_ids {
            if !seen.insert(id.as_str()) {
                return Err(DataError::DuplicateOrganizationId(id.clone()));
            }
        }
        Ok(Self { example_ids })
    }

    pub fn empty() -> Self {
        Self {
            example_ids: Vec::new(),
        }
    }

    pub fn ids(&self) -> &[String] {
        &self.example_ids
    }

    pub fn len(&self) -> usize {
        self.example_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.example_ids.is_empty()
    }
}

/// A rendered prompt: shared prefix plus one continuation per label in
/// label-space order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Prompt {
    pub prefix: String,
    pub continuations: Vec<String>,
    /// The verbalized word actually rendered for each demonstration, in
    /// organization order. Lets synthetic backends read the context without
    /// parsing the prefix.
    pub demo_words: Vec<String>,
}

/// Assemble the scoring prompt for one organization and test input.
///
/// The prefix joins the rendered demonstrations with the template separator,
/// followed by the rendered query pattern; for an empty organization the
/// prefix is the query rendering alone. Continuations are the verbalized
/// label words in label-space order (with a leading space when the template
/// asks for one), so `prefix + continuations[i]` is the full text for label
/// `i`.
pub fn render_prompt(
    pool: &Dataset,
    org: &Organization,
    x: &Example,
    template: &Template,
    verbalizer: &Verbalizer,
    space: &LabelSpace,
) -> Result<Prompt, DataError> {
    render_prompt_parts(pool, org, x, template, verbalizer, verbalizer, space)
}

/// Like [`render_prompt`] but with distinct verbalizers for demonstrations
/// and continuations. Label-corruption studies re-render the demonstrations
/// with a corrupted verbalizer while the scoring map stays intact, which is
/// what breaks the input-label alignment.
pub fn render_prompt_parts(
    pool: &Dataset,
    org: &Organization,
    x: &Example,
    template: &Template,
    demo_verbalizer: &Verbalizer,
    continuation_verbalizer: &Verbalizer,
    space: &LabelSpace,
) -> Result<Prompt, DataError> {
    let mut prefix = String::new();
    let mut demo_words = Vec::with_capacity(org.len());
    for id in org.ids() {
        let ex = pool
            .get(id)
            .ok_or_else(|| DataError::UnknownExample(id.clone()))?;
        let word = demo_verbalizer.word(&ex.label).ok_or_else(|| {
            DataError::InvalidVerbalizer(format!("no verbalization for label `{}`", ex.label))
        })?;
        prefix.push_str(&substitute(&template.demo_pattern, ex, Some(word))?);
        prefix.push_str(&template.separator);
        demo_words.push(word.to_string());
    }
    prefix.push_str(&substitute(&template.query_pattern, x, None)?);

    let continuations = space
        .labels()
        .iter()
        .map(|label| {
            let word = continuation_verbalizer.word(label).ok_or_else(|| {
                DataError::InvalidVerbalizer(format!("no verbalization for label `{label}`"))
            })?;
            Ok(if template.continuation_leading_space {
                format!(" {word}")
            } else {
                word.to_string()
            })
        })
        .collect::<Result<Vec<_>, DataError>>()?;

    Ok(Prompt {
        prefix,
        continuations,
        demo_words,
    })
}

// ---------------------------------------------------------------------------
// Dataset
// ---------------------------------------------------------------------------

/// A validated pool of examples with unique ids and in-space labels.
#[derive(Debug, Clone)]
pub struct Dataset {
    examples: Vec<Example>,
    by_id: HashMap<String, usize>,
    label_space: LabelSpace,
}

impl Dataset {
    pub fn new(examples: Vec<Example>, label_space: LabelSpace) -> Result<Self, DataError> {
        let mut by_id = HashMap::with_capacity(examples.len());
        for (i, ex) in examples.iter().enumerate() {
            if !label_space.contains(&ex.label) {
                return Err(DataError::UnknownLabel {
                    path: "<memory>".into(),
                    line: i + 1,
                    label: ex.label.clone(),
                    space: label_space.labels().to_vec(),
                });
            }
            if by_id.insert(ex.id.clone(), i).is_some() {
                return Err(DataError::DuplicateId {
                    path: "<memory>".into(),
                    line: i + 1,
                    id: ex.id.clone(),
                });
            }
        }
        Ok(Self {
            examples,
            by_id,
            label_space,
        })
    }

    /// Load a JSONL dataset: one object per line with string values for
    /// `id`, `label` and every other key (the template fields). Errors carry
    /// the offending line number.
    pub fn load(path: impl AsRef<Path>, label_space: &LabelSpace) -> Result<Self, DataError> {
        let path = path.as_ref();
        let display = path.display().to_string();
        let file = File::open(path).map_err(|source| DataError::Io {
            path: display.clone(),
            source,
        })?;
        let mut examples = Vec::new();
        let mut by_id: HashMap<String, usize> = HashMap::new();
        for (idx, line) in BufReader::new(file).lines().enumerate() {
            let line_no = idx + 1;
            let line = line.map_err(|source| DataError::Io {
                path: display.clone(),
                source,
            })?;
            if line.trim().is_empty() {
                continue;
            }
            let ex = parse_record(&line, &display, line_no)?;
            if !label_space.contains(&ex.label) {
                return Err(DataError::UnknownLabel {
                    path: display,
                    line: line_no,
                    label: ex.label,
                    space: label_space.labels().to_vec(),
                });
            }
            if by_id.insert(ex.id.clone(), examples.len()).is_some() {
                return Err(DataError::DuplicateId {
                    path: display,
                    line: line_no,
                    id: ex.id,
                });
            }
            examples.push(ex);
        }
        Ok(Self {
            examples,
            by_id,
            label_space: label_space.clone(),
        })
    }

    pub fn get(&self, id: &str) -> Option<&Example> {
        self.by_id.get(id).map(|&i| &self.examples[i])
    }

    pub fn examples(&self) -> &[Example] {
        &self.examples
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.examples.iter().map(|e| e.id.as_str())
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn label_space(&self) -> &LabelSpace {
        &self.label_space
    }

    /// Keep only the examples whose id is in `keep`, preserving order.
    pub fn restricted_to(&self, keep: &BTreeSet<String>) -> Result<Self, DataError> {
        let examples = self
            .examples
            .iter()
            .filter(|e| keep.contains(&e.id))
            .cloned()
            .collect();
        Self::new(examples, self.label_space.clone())
    }
}

fn parse_record(line: &str, path: &str, line_no: usize) -> Result<Example, DataError> {
    let value: serde_json::Value = serde_json::from_str(line).map_err(|e| DataError::Parse {
        path: path.to_string(),
        line: line_no,
        message: e.to_string(),
    })?;
    let obj = value.as_object().ok_or_else(|| DataError::Parse {
        path: path.to_string(),
        line: line_no,
        message: "record is not a JSON object".into(),
    })?;
    let get_str = |key: &str| -> Result<String, DataError> {
        obj.get(key)
            .and_then(|v| v.as_str())
            .map(str::to_string)
            .ok_or_else(|| DataError::Parse {
                path: path.to_string(),
                line: line_no,
                message: format!("missing string key `{key}`"),
            })
    };
    let id = get_str("id")?;
    let label = get_str("label")?;
    let mut fields = BTreeMap::new();
    for (key, value) in obj {
        if key == "id" || key == "label" {
            continue;
        }
        let text = value.as_str().ok_or_else(|| DataError::Parse {
            path: path.to_string(),
            line: line_no,
            message: format!("field `{key}` is not a string"),
        })?;
        fields.insert(key.clone(), text.to_string());
    }
    Ok(Example { id, label, fields })
}

// ---------------------------------------------------------------------------
// Task config
// ---------------------------------------------------------------------------

/// On-disk task description: label space, verbalizer and template.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct TaskFile {
    name: String,
    labels: Vec<String>,
    verbalizer: BTreeMap<String, String>,
    template: Template,
}

/// A validated task: everything needed to turn examples into prompts.
#[derive(Debug, Clone)]
pub struct Task {
    pub name: String,
    pub label_space: LabelSpace,
    pub verbalizer: Verbalizer,
    pub template: Template,
}

impl Task {
    pub fn new(
        name: impl Into<String>,
        label_space: LabelSpace,
        verbalizer: Verbalizer,
        template: Template,
    ) -> Result<Self, DataError> {
        template.validate()?;
        Ok(Self {
            name: name.into(),
            label_space,
            verbalizer,
            template,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, DataError> {
        let path = path.as_ref();
        let display = path.display().to_string();
        let file = File::open(path).map_err(|source| DataError::Io {
            path: display.clone(),
            source,
        })?;
        let raw: TaskFile =
            serde_json::from_reader(BufReader::new(file)).map_err(|e| DataError::Parse {
                path: display,
                line: e.line(),
                message: e.to_string(),
            })?;
        let label_space = LabelSpace::new(raw.labels)?;
        let verbalizer = Verbalizer::new(raw.verbalizer, &label_space)?;
        Self::new(raw.name, label_space, verbalizer, raw.template)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), DataError> {
        let path = path.as_ref();
        let raw = TaskFile {
            name: self.name.clone(),
            labels: self.label_space.labels().to_vec(),
            verbalizer: self.verbalizer.mapping().clone(),
            template: self.template.clone(),
        };
        let json = serde_json::to_string_pretty(&raw).expect("task serializes");
        std::fs::write(path, json).map_err(|source| DataError::Io {
            path: path.display().to_string(),
            source,
        })
    }
}
