//! The two step detectors: the KB-rule state-graph scorer and the
//! embedding-retrieval scorer.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kb::StepRule;

#[derive(Debug, Error)]
pub enum ExpertError {
    #[error("query embedding is the zero vector; cosine is undefined")]
    ZeroQuery,
    #[error("dimension mismatch: gallery has {expected}, query has {got}")]
    Dimension { expected: usize, got: usize },
    #[error("no step rules to score")]
    NoSteps,
    #[error("gallery line {line}: {reason}")]
    Gallery { line: usize, reason: String },
    #[error("cannot read gallery {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpertKind {
    StateGraph,
    Retrieval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertOutput {
    pub expert: ExpertKind,
    /// Per-step scores, indexed by step position.
    pub scores: Vec<f64>,
    /// Argmax step index, lowest index on ties.
    pub winner: usize,
    pub confidence: f64,
    /// Per-step required-component coverage; empty for the retrieval expert.
    pub coverage: Vec<f64>,
}

impl ExpertOutput {
    pub fn from_scores(expert: ExpertKind, scores: Vec<f64>, coverage: Vec<f64>) -> Self {
        let winner = argmax(&scores);
        Self {
            expert,
            confidence: scores[winner],
            scores,
            winner,
            coverage,
        }
    }

    /// An output that names a winner and confidence directly; the score
    /// vector is the confidence at the winner and zero elsewhere.
    pub fn point(expert: ExpertKind, k: usize, winner: usize, confidence: f64) -> Self {
        let mut scores = vec![0.0; k];
        scores[winner] = confidence;
        Self {
            expert,
            scores,
            winner,
            confidence,
            coverage: Vec::new(),
        }
    }
}

/// Index of the maximum, lowest index on ties. Panics on an empty slice.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Per-step terms of the state-graph score.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RuleTerms {
    pub all: f64,
    pub any: f64,
    pub pen: f64,
}

impl RuleTerms {
    pub fn score(&self, alpha: f64) -> f64 {
        alpha * self.all + (1.0 - alpha) * self.any - self.pen
    }
}

pub fn rule_terms(counts: &BTreeMap<String, u32>, rule: &StepRule) -> RuleTerms {
    let n = |k: &str| counts.get(k).copied().unwrap_or(0);
    let satisfaction: f64 = rule
        .all_of
        .iter()
        .map(|(k, r)| (n(k) as f64 / (*r).max(1) as f64).min(1.0))
        .sum();
    let all = satisfaction / rule.all_of.len().max(1) as f64;
    let any_hit = rule.any_of.is_empty() || rule.any_of.iter().any(|(k, r)| n(k) >= *r);
    let forbidden_seen = rule.forbid.iter().any(|k| n(k) > 0);
    RuleTerms {
        all,
        any: if any_hit { 1.0 } else { 0.0 },
        pen: if forbidden_seen { 0.5 } else { 0.0 },
    }
}

/// Scores every step rule against the observed part counts. Missing counts
/// read as zero.
pub fn state_graph_score(
    counts: &BTreeMap<String, u32>,
    rules: &[StepRule],
    alpha: f64,
) -> Result<ExpertOutput, ExpertError> {
    if rules.is_empty() {
        return Err(ExpertError::NoSteps);
    }
    let terms: Vec<RuleTerms> = rules.iter().map(|r| rule_terms(counts, r)).collect();
    let scores = terms.iter().map(|t| t.score(alpha)).collect();
    let coverage = terms.iter().map(|t| t.all).collect();
    Ok(ExpertOutput::from_scores(
        ExpertKind::StateGraph,
        scores,
        coverage,
    ))
}

/// Per-step reference embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceGallery {
    dim: usize,
    steps: Vec<Vec<Vec<f64>>>,
}

impl ReferenceGallery {
    pub fn new(steps: Vec<Vec<Vec<f64>>>) -> Result<Self, ExpertError> {
        let bad = |reason: String| ExpertError::Gallery { line: 0, reason };
        let dim = steps
            .first()
            .and_then(|refs| refs.first())
            .map(Vec::len)
            .ok_or_else(|| bad("gallery has no references".into()))?;
        for (j, refs) in steps.iter().enumerate() {
            if refs.is_empty() {
                return Err(bad(format!("step {} has no references", j + 1)));
            }
            for v in refs {
                if v.len() != dim {
                    return Err(ExpertError::Dimension {
                        expected: dim,
                        got: v.len(),
                    });
                }
                if norm(v) == 0.0 {
                    return Err(bad(format!("step {} has a zero reference", j + 1)));
                }
            }
        }
        Ok(Self { dim, steps })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_steps(&self) -> usize {
        self.steps.len()
    }

    pub fn references(&self, step: usize) -> &[Vec<f64>] {
        &self.steps[step]
    }

    /// Text form: a `<dim> <K>` header, then for each step a `step <id> <n>`
    /// line followed by `n` lines of whitespace-separated components. Lines
    /// starting with `#` are comments.
    pub fn parse(src: &str) -> Result<Self, ExpertError> {
        let err = |line: usize, reason: &str| ExpertError::Gallery {
            line,
            reason: reason.to_string(),
        };
        let mut lines = src
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));

        let (ln, header) = lines.next().ok_or_else(|| err(1, "missing header"))?;
        let header: Vec<usize> = header
            .split_whitespace()
            .map(str::parse)
            .collect::<Result<_, _>>()
            .map_err(|_| err(ln, "header must be `<dim> <K>`"))?;
        let [dim, k] = header[..] else {
            return Err(err(ln, "header must be `<dim> <K>`"));
        };

        let mut steps = Vec::with_capacity(k);
        for _ in 0..k {
            let (ln, block) = lines.next().ok_or_else(|| err(ln, "missing step block"))?;
            let fields: Vec<&str> = block.split_whitespace().collect();
            let count: usize = match fields[..] {
                ["step", _, n] => n.parse().map_err(|_| err(ln, "bad reference count"))?,
                _ => return Err(err(ln, "expected `step <id> <count>`")),
            };
            let mut refs = Vec::with_capacity(count);
            for _ in 0..count {
                let (ln, row) = lines
                    .next()
                    .ok_or_else(|| err(ln, "missing reference row"))?;
                let v: Vec<f64> = row
                    .split_whitespace()
                    .map(str::parse)
                    .collect::<Result<_, _>>()
                    .map_err(|_| err(ln, "non-numeric component"))?;
                if v.len() != dim {
                    return Err(err(
                        ln,
                        &format!("expected {dim} components, got {}", v.len()),
                    ));
                }
                refs.push(v);
            }
            steps.push(refs);
        }
        if let Some((ln, _)) = lines.next() {
            return Err(err(ln, "trailing content after the last step block"));
        }
        Self::new(steps)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ExpertError> {
        let path = path.as_ref();
        let src = std::fs::read_to_string(path).map_err(|source| ExpertError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&src)
    }
}

/// Produces query embeddings for a frame. No model ships; streams carry
/// precomputed vectors.
pub trait Embedder {
    fn embed(&self, frame: &crate::perception::StreamRecord) -> Option<Vec<f64>>;
}

/// Reads the `embedding` field of the stream record.
#[derive(Debug, Default, Clone, Copy)]
pub struct RecordedEmbeddings;

impl Embedder for RecordedEmbeddings {
    fn embed(&self, frame: &crate::perception::StreamRecord) -> Option<Vec<f64>> {
        frame.embedding.clone()
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    dot / (norm(a) * norm(b))
}

/// Mean of the `top_k` largest cosine similarities per step (all references
/// when a step has fewer).
pub fn retrieval_score(
    query: &[f64],
    gallery: &ReferenceGallery,
    top_k: usize,
) -> Result<ExpertOutput, ExpertError> {
    if query.len() != gallery.dim {
        return Err(ExpertError::Dimension {
            expected: gallery.dim,
            got: query.len(),
        });
    }
    if norm(query) == 0.0 {
        return Err(ExpertError::ZeroQuery);
    }
    let top_k = top_k.max(1);
    let scores = gallery
        .steps
        .iter()
        .map(|refs| {
            let mut sims: Vec<f64> = refs.iter().map(|g| cosine(query, g)).collect();
            sims.sort_by(|a, b| b.total_cmp(a));
            sims.truncate(top_k);
            sims.iter().sum::<f64>() / sims.len() as f64
        })
        .collect();
    Ok(ExpertOutput::from_scores(
        ExpertKind::Retrieval,
        scores,
        Vec::new(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn rule(all: &[(&str, u32)], any: &[(&str, u32)], forbid: &[&str]) -> StepRule {
        StepRule {
            id: "S".into(),
            title: String::new(),
            all_of: all.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
            any_of: any.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
            forbid: forbid
                .iter()
                .map(|s| s.to_string())
                .collect::<BTreeSet<_>>(),
        }
    }

    fn counts(pairs: &[(&str, u32)]) -> BTreeMap<String, u32> {
        pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
    }

    #[test]
    fn empty_rule_scores_one_minus_alpha() {
        let out = state_graph_score(&counts(&[]), &[rule(&[], &[], &[])], 0.6).unwrap();
        assert!((out.scores[0] - 0.4).abs() < 1e-12);
        assert_eq!(out.coverage, vec![0.0]);
    }

    #[test]
    fn full_satisfaction_scores_one() {
        let r = rule(&[("a", 2)], &[("b", 1)], &["c"]);
        let out = state_graph_score(&counts(&[("a", 2), ("b", 1)]), &[r], 0.6).unwrap();
        assert!((out.scores[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn mixed_terms_hand_case() {
        let r = rule(&[("p1", 1), ("p2", 2)], &[("p3", 1)], &["p4"]);
        let c = counts(&[("p1", 1), ("p2", 1), ("p3", 0), ("p4", 1)]);
        let t = rule_terms(&c, &r);
        assert_eq!(
            t,
            RuleTerms {
                all: 0.75,
                any: 0.0,
                pen: 0.5
            }
        );
        let out = state_graph_score(&c, &[r], 0.6).unwrap();
        assert!((out.scores[0] - -0.05).abs() < 1e-12);
    }

    #[test]
    fn ties_go_to_lowest_step() {
        let r = rule(&[], &[], &[]);
        let out = state_graph_score(&counts(&[]), &[r.clone(), r], 0.6).unwrap();
        assert_eq!(out.winner, 0);
    }

    #[test]
    fn no_rules_is_an_error() {
        assert!(matches!(
            state_graph_score(&counts(&[]), &[], 0.6),
            Err(ExpertError::NoSteps)
        ));
    }

    fn gallery(steps: Vec<Vec<Vec<f64>>>) -> ReferenceGallery {
        ReferenceGallery::new(steps).unwrap()
    }

    #[test]
    fn self_match_scores_one() {
        let g = gallery(vec![vec![vec![1.0, 2.0, 0.0]], vec![vec![0.0, 0.0, 1.0]]]);
        let out = retrieval_score(&[1.0, 2.0, 0.0], &g, 1).unwrap();
        assert!((out.scores[0] - 1.0).abs() < 1e-12);
        assert_eq!(out.scores[1], 0.0);
        assert_eq!(out.winner, 0);
    }

    #[test]
    fn top_k_average_hand_case() {
        // unit query along x; references at cosines 0.8, 0.6 and 0.1
        let refs = [0.8f64, 0.6, 0.1]
            .iter()
            .map(|c| vec![*c, (1.0 - c * c).sqrt()])
            .collect();
        let g = gallery(vec![refs]);
        let out = retrieval_score(&[1.0, 0.0], &g, 2).unwrap();
        assert!((out.scores[0] - 0.7).abs() < 1e-12);
        let all = retrieval_score(&[1.0, 0.0], &g, 10).unwrap();
        assert!((all.scores[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn zero_query_and_bad_dimension_rejected() {
        let g = gallery(vec![vec![vec![1.0, 0.0]]]);
        assert!(matches!(
            retrieval_score(&[0.0, 0.0], &g, 1),
            Err(ExpertError::ZeroQuery)
        ));
        assert!(matches!(
            retrieval_score(&[1.0], &g, 1),
            Err(ExpertError::Dimension {
                expected: 2,
                got: 1
            })
        ));
    }

    #[test]
    fn gallery_text_format() {
        let src = "# two steps\n2 2\nstep S1 2\n1 0\n0.5 0.5\nstep S2 1\n0 1\n";
        let g = ReferenceGallery::parse(src).unwrap();
        assert_eq!(g.dim(), 2);
        assert_eq!(g.references(0).len(), 2);
        assert!(ReferenceGallery::parse("2 1\nstep S1 1\n1 0 3\n").is_err());
        assert!(ReferenceGallery::parse("2 1\nstep S1 1\n0 0\n").is_err());
        assert!(ReferenceGallery::parse("2 1\nstep S1 1\n1 0\nextra\n").is_err());
    }
}
