use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::AgentRole;
use crate::text;

/// Weighted intent keywords per role. Multi-word keywords match as
/// contiguous token runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Lexicon(pub BTreeMap<AgentRole, BTreeMap<String, f64>>);

impl Default for Lexicon {
    fn default() -> Self {
        let entries = |pairs: &[(&str, f64)]| -> BTreeMap<String, f64> {
            pairs.iter().map(|(k, w)| (k.to_string(), *w)).collect()
        };
        Self(BTreeMap::from([
            (
                AgentRole::AssemblyGuide,
                entries(&[
                    ("assembly", 2.0),
                    ("assemble", 2.0),
                    ("order", 1.5),
                    ("sequence", 1.5),
                    ("step", 1.5),
                    ("next", 1.0),
                    ("install", 1.5),
                    ("mount", 1.5),
                    ("insert", 1.0),
                    ("attach", 1.0),
                    ("fit", 1.0),
                ]),
            ),
            (
                AgentRole::PartsAdvisor,
                entries(&[
                    ("material", 2.0),
                    ("made of", 2.0),
                    ("dimension", 2.0),
                    ("diameter", 2.0),
                    ("size", 1.5),
                    ("weight", 1.5),
                    ("teeth", 1.5),
                    ("specification", 1.5),
                    ("spec", 1.5),
                    ("rating", 1.5),
                    ("attribute", 2.0),
                ]),
            ),
            (
                AgentRole::MaintenanceAdvisor,
                entries(&[
                    ("maintenance", 2.0),
                    ("maintain", 2.0),
                    ("service", 2.0),
                    ("lubricate", 2.0),
                    ("lubrication", 2.0),
                    ("grease", 1.5),
                    ("inspect", 1.5),
                    ("inspection", 1.5),
                    ("clean", 1.5),
                    ("interval", 1.5),
                    ("replace", 1.0),
                    ("wear", 1.0),
                ]),
            ),
            (
                AgentRole::FaultHandler,
                entries(&[
                    ("fix", 2.0),
                    ("jammed", 2.0),
                    ("jam", 2.0),
                    ("stuck", 2.0),
                    ("broken", 2.0),
                    ("fault", 2.0),
                    ("troubleshoot", 2.0),
                    ("noise", 1.5),
                    ("vibration", 1.5),
                    ("problem", 1.5),
                    ("error", 1.5),
                    ("wrong", 1.0),
                ]),
            ),
        ]))
    }
}

/// Deterministic lexicon router. A query that scores zero for every role
/// goes to the General agent; equal scores go to the earlier role.
#[derive(Debug, Clone, Default)]
pub struct Router {
    lexicon: Lexicon,
}

impl Router {
    pub fn new(lexicon: Lexicon) -> Self {
        Self { lexicon }
    }

    pub fn scores(&self, query: &str) -> Vec<(AgentRole, f64)> {
        let padded = format!(" {} ", text::tokens(query).join(" "));
        AgentRole::ALL
            .into_iter()
            .map(|role| {
                let score = self.lexicon.0.get(&role).map_or(0.0, |words| {
                    words
                        .iter()
                        .filter(|(k, _)| {
                            let key = text::tokens(k).join(" ");
                            !key.is_empty() && padded.contains(&format!(" {key} "))
                        })
                        .map(|(_, w)| w)
                        .sum()
                });
                (role, score)
            })
            .collect()
    }

    pub fn route(&self, query: &str) -> AgentRole {
        let mut best = (AgentRole::General, 0.0);
        for (role, score) in self.scores(query) {
            if score > best.1 {
                best = (role, score);
            }
        }
        best.0
    }
}
