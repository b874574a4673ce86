//! Structured knowledge base: parts, step rules, the workflow transition graph,
//! role-tagged evidence snippets, the canonical phrase catalog and the
//! task-success rubrics.
//!
//! The on-disk form is a single TOML document with the sections `categories`,
//! `parts`, `steps`, `workflow`, `phrases` and `rubrics`. Loading validates
//! referential integrity; a loaded [`KnowledgeBase`] is immutable.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::AgentRole;
use crate::text;

#[derive(Debug, Error)]
pub enum KbError {
    #[error("cannot read knowledge base {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("knowledge base parse error: {0}")]
    Parse(String),
    #[error("duplicate {kind} id \"{id}\"")]
    DuplicateId { kind: &'static str, id: String },
    #[error("step \"{step}\" references unknown part \"{part}\"")]
    UnknownPart { step: String, part: String },
    #[error("{owner} references unknown category \"{category}\"")]
    UnknownCategory { owner: String, category: String },
    #[error("workflow references unknown step \"{0}\"")]
    UnknownStep(String),
    #[error("invalid {entity}: {reason}")]
    Invalid { entity: String, reason: String },
}

/// One retrievable passage attached to a part.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Snippet {
    pub id: String,
    /// Agent role the passage is written for; untagged passages serve every role.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub role: Option<AgentRole>,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartEntry {
    pub id: String,
    pub name: String,
    pub category: String,
    #[serde(default)]
    pub attributes: BTreeMap<String, String>,
    #[serde(default)]
    pub snippets: Vec<Snippet>,
}

/// Rule triple for one assembly step: required, alternative and forbidden
/// components with their multiplicities.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StepRule {
    pub id: String,
    pub title: String,
    pub all_of: BTreeMap<String, u32>,
    pub any_of: BTreeMap<String, u32>,
    pub forbid: BTreeSet<String>,
}

/// Allowed successor sets, indexed by step position. Every set contains the
/// step itself.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WorkflowGraph {
    allowed: Vec<BTreeSet<usize>>,
}

impl WorkflowGraph {
    /// Graph over `k` steps where every transition is allowed.
    pub fn complete(k: usize) -> Self {
        Self {
            allowed: (0..k).map(|_| (0..k).collect()).collect(),
        }
    }

    /// Builds a graph from successor lists, inserting the self-loops.
    pub fn from_successors(successors: Vec<BTreeSet<usize>>) -> Self {
        let allowed = successors
            .into_iter()
            .enumerate()
            .map(|(i, mut set)| {
                set.insert(i);
                set
            })
            .collect();
        Self { allowed }
    }

    pub fn len(&self) -> usize {
        self.allowed.len()
    }

    pub fn is_empty(&self) -> bool {
        self.allowed.is_empty()
    }

    pub fn allowed_from(&self, prev: usize) -> &BTreeSet<usize> {
        &self.allowed[prev]
    }

    pub fn allows(&self, prev: usize, next: usize) -> bool {
        self.allowed.get(prev).is_some_and(|s| s.contains(&next))
    }

    /// True when `to` can be reached from `from` by following allowed edges.
    pub fn reachable(&self, from: usize, to: usize) -> bool {
        if from >= self.allowed.len() || to >= self.allowed.len() {
            return false;
        }
        let mut seen = vec![false; self.allowed.len()];
        let mut stack = vec![from];
        while let Some(s) = stack.pop() {
            if s == to {
                return true;
            }
            if std::mem::replace(&mut seen[s], true) {
                continue;
            }
            stack.extend(self.allowed[s].iter().copied().filter(|n| !seen[*n]));
        }
        false
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Phrase {
    pub text: String,
    pub category: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhraseCatalog {
    pub catalog: Vec<Phrase>,
    /// Non-KB high-risk substrings penalised by KBA precision.
    #[serde(default)]
    pub risk: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SuccessRubric {
    pub id: String,
    /// Each inner list holds alternatives; at least one of them must appear.
    pub required: Vec<Vec<String>>,
    #[serde(default)]
    pub forbidden: Vec<String>,
}

/// A ranked retrieval hit.
#[derive(Debug, Clone, PartialEq)]
pub struct Evidence {
    pub snippet_id: String,
    pub part_id: String,
    pub text: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
struct IndexedSnippet {
    part: usize,
    snippet: usize,
    tokens: BTreeSet<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KnowledgeBase {
    categories: Vec<String>,
    parts: Vec<PartEntry>,
    steps: Vec<StepRule>,
    workflow: WorkflowGraph,
    phrases: PhraseCatalog,
    rubrics: Vec<SuccessRubric>,
    index: Vec<IndexedSnippet>,
    idf: BTreeMap<String, f64>,
}

impl KnowledgeBase {
    /// Validates the content and builds the retrieval index.
    pub fn new(
        categories: Vec<String>,
        parts: Vec<PartEntry>,
        steps: Vec<StepRule>,
        workflow: WorkflowGraph,
        phrases: PhraseCatalog,
        rubrics: Vec<SuccessRubric>,
    ) -> Result<Self, KbError> {
        validate(&categories, &parts, &steps, &workflow, &phrases, &rubrics)?;

        let mut index = Vec::new();
        for (pi, part) in parts.iter().enumerate() {
            for (si, snip) in part.snippets.iter().enumerate() {
                index.push(IndexedSnippet {
                    part: pi,
                    snippet: si,
                    tokens: text::tokens(&snip.text).into_iter().collect(),
                });
            }
        }
        index.sort_by(|a, b| {
            parts[a.part].snippets[a.snippet]
                .id
                .cmp(&parts[b.part].snippets[b.snippet].id)
        });
        let mut df: HashMap<&str, usize> = HashMap::new();
        for entry in &index {
            for t in &entry.tokens {
                *df.entry(t.as_str()).or_default() += 1;
            }
        }
        let n = index.len() as f64;
        let idf = df
            .into_iter()
            .map(|(t, d)| (t.to_string(), (1.0 + n / d as f64).ln()))
            .collect();

        Ok(Self {
            categories,
            parts,
            steps,
            workflow,
            phrases,
            rubrics,
            index,
            idf,
        })
    }

    pub fn from_toml_str(src: &str) -> Result<Self, KbError> {
        let file: KbFile = toml::from_str(src).map_err(|e| KbError::Parse(e.to_string()))?;
        file.into_kb()
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(&KbFile::from_kb(self)).expect("knowledge base serializes")
    }

    pub fn categories(&self) -> &[String] {
        &self.categories
    }

    pub fn parts(&self) -> &[PartEntry] {
        &self.parts
    }

    pub fn part(&self, id: &str) -> Option<&PartEntry> {
        self.parts.iter().find(|p| p.id == id)
    }

    pub fn steps(&self) -> &[StepRule] {
        &self.steps
    }

    /// Number of steps K.
    pub fn num_steps(&self) -> usize {
        self.steps.len()
    }

    pub fn step_index(&self, id: &str) -> Option<usize> {
        self.steps
            .iter()
            .position(|s| s.id.eq_ignore_ascii_case(id))
    }

    pub fn workflow(&self) -> &WorkflowGraph {
        &self.workflow
    }

    pub fn phrases(&self) -> &PhraseCatalog {
        &self.phrases
    }

    pub fn rubrics(&self) -> &[SuccessRubric] {
        &self.rubrics
    }

    pub fn rubric(&self, id: &str) -> Option<&SuccessRubric> {
        self.rubrics.iter().find(|r| r.id == id)
    }

    pub fn has_snippet(&self, id: &str) -> bool {
        self.snippet(id).is_some()
    }

    pub fn snippet(&self, id: &str) -> Option<&Snippet> {
        self.parts
            .iter()
            .flat_map(|p| p.snippets.iter())
            .find(|s| s.id == id)
    }

    /// Ranks the snippets available to `role` (tagged with it or untagged) by
    /// IDF-weighted overlap of case-folded token sets. Zero-score snippets are
    /// dropped; ties go to the lower snippet id.
    pub fn retrieve_evidence(&self, query: &str, role: AgentRole, k: usize) -> Vec<Evidence> {
        let k = k.max(1);
        let query: BTreeSet<String> = text::tokens(query).into_iter().collect();
        let mut hits: Vec<Evidence> = self
            .index
            .iter()
            .filter_map(|entry| {
                let part = &self.parts[entry.part];
                let snip = &part.snippets[entry.snippet];
                if snip.role.is_some_and(|r| r != role) {
                    return None;
                }
                let score: f64 = query
                    .iter()
                    .filter(|t| entry.tokens.contains(*t))
                    .map(|t| self.idf[t])
                    .sum();
                (score > 0.0).then(|| Evidence {
                    snippet_id: snip.id.clone(),
                    part_id: part.id.clone(),
                    text: snip.text.clone(),
                    score,
                })
            })
            .collect();
        // index is id-sorted and the sort is stable, so equal scores keep id order
        hits.sort_by(|a, b| b.score.total_cmp(&a.score));
        hits.truncate(k);
        hits
    }
}

/// Reads and validates a knowledge base file.
pub fn load_kb(path: impl AsRef<Path>) -> Result<KnowledgeBase, KbError> {
    let path = path.as_ref();
    let src = std::fs::read_to_string(path).map_err(|source| KbError::Io {
        path: path.display().to_string(),
        source,
    })?;
    KnowledgeBase::from_toml_str(&src)
}

fn validate(
    categories: &[String],
    parts: &[PartEntry],
    steps: &[StepRule],
    workflow: &WorkflowGraph,
    phrases: &PhraseCatalog,
    rubrics: &[SuccessRubric],
) -> Result<(), KbError> {
    let invalid = |entity: &str, reason: &str| KbError::Invalid {
        entity: entity.to_string(),
        reason: reason.to_string(),
    };
    if categories.is_empty() {
        return Err(invalid("categories", "at least one category is required"));
    }
    unique("category", categories.iter().map(String::as_str))?;
    let category_set: HashSet<&str> = categories.iter().map(String::as_str).collect();

    unique("part", parts.iter().map(|p| p.id.as_str()))?;
    unique(
        "snippet",
        parts
            .iter()
            .flat_map(|p| p.snippets.iter().map(|s| s.id.as_str())),
    )?;
    for part in parts {
        if !category_set.contains(part.category.as_str()) {
            return Err(KbError::UnknownCategory {
                owner: format!("part \"{}\"", part.id),
                category: part.category.clone(),
            });
        }
    }
    let part_set: HashSet<&str> = parts.iter().map(|p| p.id.as_str()).collect();

    if steps.is_empty() {
        return Err(invalid("steps", "at least one step is required"));
    }
    unique("step", steps.iter().map(|s| s.id.as_str()))?;
    for step in steps {
        let referenced = step
            .all_of
            .keys()
            .chain(step.any_of.keys())
            .chain(step.forbid.iter());
        for part in referenced {
            if !part_set.contains(part.as_str()) {
                return Err(KbError::UnknownPart {
                    step: step.id.clone(),
                    part: part.clone(),
                });
            }
        }
        if let Some(p) = step.all_of.keys().find(|p| step.forbid.contains(*p)) {
            return Err(invalid(
                &format!("step \"{}\"", step.id),
                &format!("part \"{p}\" is both required and forbidden"),
            ));
        }
        if step
            .all_of
            .values()
            .chain(step.any_of.values())
            .any(|m| *m == 0)
        {
            return Err(invalid(
                &format!("step \"{}\"", step.id),
                "multiplicities must be at least 1",
            ));
        }
    }
    if workflow.len() != steps.len() {
        return Err(invalid("workflow", "one allowed set per step is required"));
    }

    if phrases.catalog.is_empty() {
        return Err(invalid("phrases", "the phrase catalog is empty"));
    }
    for phrase in &phrases.catalog {
        if !category_set.contains(phrase.category.as_str()) {
            return Err(KbError::UnknownCategory {
                owner: format!("phrase \"{}\"", phrase.text),
                category: phrase.category.clone(),
            });
        }
    }

    unique("rubric", rubrics.iter().map(|r| r.id.as_str()))?;
    for rubric in rubrics {
        if rubric.required.is_empty() || rubric.required.iter().any(Vec::is_empty) {
            return Err(invalid(
                &format!("rubric \"{}\"", rubric.id),
                "needs at least one non-empty required phrase set",
            ));
        }
    }
    Ok(())
}

fn unique<'a>(kind: &'static str, ids: impl Iterator<Item = &'a str>) -> Result<(), KbError> {
    let mut seen = HashSet::new();
    for id in ids {
        if !seen.insert(id) {
            return Err(KbError::DuplicateId {
                kind,
                id: id.to_string(),
            });
        }
    }
    Ok(())
}

// ---- file representation ----

/// A part list with optional multiplicities: `["a", "b"]` or `{ a = 1, b = 2 }`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
enum Multiset {
    Ids(Vec<String>),
    Counts(BTreeMap<String, u32>),
}

impl Default for Multiset {
    fn default() -> Self {
        Multiset::Counts(BTreeMap::new())
    }
}

impl Multiset {
    fn into_counts(self) -> BTreeMap<String, u32> {
        match self {
            Multiset::Ids(ids) => ids.into_iter().map(|id| (id, 1)).collect(),
            Multiset::Counts(map) => map,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct StepFile {
    id: String,
    #[serde(default)]
    title: String,
    #[serde(default)]
    all_of: Multiset,
    #[serde(default)]
    any_of: Multiset,
    #[serde(default)]
    forbid: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct KbFile {
    categories: Vec<String>,
    parts: Vec<PartEntry>,
    steps: Vec<StepFile>,
    #[serde(default)]
    workflow: BTreeMap<String, Vec<String>>,
    phrases: PhraseCatalog,
    #[serde(default)]
    rubrics: Vec<SuccessRubric>,
}

impl KbFile {
    fn into_kb(self) -> Result<KnowledgeBase, KbError> {
        let steps: Vec<StepRule> = self
            .steps
            .into_iter()
            .map(|s| StepRule {
                id: s.id,
                title: s.title,
                all_of: s.all_of.into_counts(),
                any_of: s.any_of.into_counts(),
                forbid: s.forbid.into_iter().collect(),
            })
            .collect();
        let position: HashMap<&str, usize> = steps
            .iter()
            .enumerate()
            .map(|(i, s)| (s.id.as_str(), i))
            .collect();
        let mut successors = vec![BTreeSet::new(); steps.len()];
        for (from, tos) in &self.workflow {
            let &fi = position
                .get(from.as_str())
                .ok_or_else(|| KbError::UnknownStep(from.clone()))?;
            for to in tos {
                let &ti = position
                    .get(to.as_str())
                    .ok_or_else(|| KbError::UnknownStep(to.clone()))?;
                successors[fi].insert(ti);
            }
        }
        KnowledgeBase::new(
            self.categories,
            self.parts,
            steps,
            WorkflowGraph::from_successors(successors),
            self.phrases,
            self.rubrics,
        )
    }

    fn from_kb(kb: &KnowledgeBase) -> Self {
        let steps = kb
            .steps
            .iter()
            .map(|s| StepFile {
                id: s.id.clone(),
                title: s.title.clone(),
                all_of: Multiset::Counts(s.all_of.clone()),
                any_of: Multiset::Counts(s.any_of.clone()),
                forbid: s.forbid.iter().cloned().collect(),
            })
            .collect();
        let workflow = kb
            .steps
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let next = kb
                    .workflow
                    .allowed_from(i)
                    .iter()
                    .map(|j| kb.steps[*j].id.clone())
                    .collect();
                (s.id.clone(), next)
            })
            .collect();
        Self {
            categories: kb.categories.clone(),
            parts: kb.parts.clone(),
            steps,
            workflow,
            phrases: kb.phrases.clone(),
            rubrics: kb.rubrics.clone(),
        }
    }
}

impl fmt::Display for StepRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.title.is_empty() {
            write!(f, "{}", self.id)
        } else {
            write!(f, "{} ({})", self.id, self.title)
        }
    }
}
