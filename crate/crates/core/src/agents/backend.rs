use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{AgentRole, CallPurpose, QueryContext};
use crate::text;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackendError {
    #[error("backend transport error after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("backend returned a malformed response: {0}")]
    Malformed(String),
}

/// Structured inputs for deterministic backends. Remote backends only see
/// the rendered `system`/`user` messages.
#[derive(Debug, Clone, PartialEq)]
pub enum TemplateHint {
    Answer {
        evidence: Vec<String>,
        context: QueryContext,
    },
    Refine {
        previous: String,
        evidence: Vec<String>,
        context: QueryContext,
    },
    Critique {
        target: AgentRole,
        missing: Vec<String>,
    },
    Vote {
        choice: AgentRole,
    },
    Route {
        choice: AgentRole,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationRequest {
    pub role: AgentRole,
    pub purpose: CallPurpose,
    pub system: String,
    pub user: String,
    pub hint: TemplateHint,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Completion {
    pub text: String,
    /// Generated tokens charged to this call.
    pub tokens: usize,
}

pub trait Backend: Send + Sync {
    fn name(&self) -> &'static str;

    fn complete(&self, request: &GenerationRequest) -> Result<Completion, BackendError>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoleTemplate {
    /// Slots: `{label}`, `{evidence}`, `{step}`, `{focus}`.
    pub answer: String,
    pub insufficient: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RoleTemplates(pub BTreeMap<AgentRole, RoleTemplate>);

impl Default for RoleTemplates {
    fn default() -> Self {
        let t = |answer: &str| RoleTemplate {
            answer: answer.into(),
            insufficient: "{label}: the knowledge base has no entry for this question.".into(),
        };
        Self(BTreeMap::from([
            (AgentRole::AssemblyGuide, t("For {step}: {evidence}")),
            (AgentRole::PartsAdvisor, t("Part information: {evidence}")),
            (
                AgentRole::MaintenanceAdvisor,
                t("Maintenance guidance: {evidence}"),
            ),
            (AgentRole::FaultHandler, t("Troubleshooting: {evidence}")),
            (AgentRole::General, t("{evidence}")),
        ]))
    }
}

impl RoleTemplates {
    fn get(&self, role: AgentRole) -> RoleTemplate {
        self.0
            .get(&role)
            .cloned()
            .unwrap_or_else(|| RoleTemplates::default().0[&role].clone())
    }
}

/// Deterministic slot-filling backend: answers quote the retrieved evidence
/// verbatim. Never fails.
#[derive(Debug, Clone, Default)]
pub struct TemplateBackend {
    templates: RoleTemplates,
}

impl TemplateBackend {
    pub fn new(templates: RoleTemplates) -> Self {
        Self { templates }
    }

    fn fill(&self, role: AgentRole, evidence: &[String], context: &QueryContext) -> String {
        let template = self.templates.get(role);
        let raw = if evidence.is_empty() {
            template.insufficient
        } else {
            template.answer
        };
        raw.replace("{label}", role.label())
            .replace("{evidence}", &sentences(evidence))
            .replace("{step}", context.step.as_deref().unwrap_or("this step"))
            .replace(
                "{focus}",
                context.focus.as_deref().unwrap_or("the part in view"),
            )
    }
}

fn sentence(s: &str) -> String {
    let s = s.trim();
    if s.ends_with(['.', '!', '?']) {
        s.to_string()
    } else {
        format!("{s}.")
    }
}

fn sentences(evidence: &[String]) -> String {
    evidence
        .iter()
        .map(|e| sentence(e))
        .collect::<Vec<_>>()
        .join(" ")
}

impl Backend for TemplateBackend {
    fn name(&self) -> &'static str {
        "template"
    }

    fn complete(&self, request: &GenerationRequest) -> Result<Completion, BackendError> {
        let counted = |text: String| Completion {
            tokens: text::whitespace_tokens(&text),
            text,
        };
        Ok(match &request.hint {
            TemplateHint::Answer { evidence, context } => {
                counted(self.fill(request.role, evidence, context))
            }
            // Relay stages with nothing new to add pass the text through.
            TemplateHint::Refine {
                previous,
                evidence,
                context,
            } => {
                if previous.trim().is_empty() {
                    if evidence.is_empty() {
                        Completion {
                            text: previous.clone(),
                            tokens: 0,
                        }
                    } else {
                        counted(self.fill(request.role, evidence, context))
                    }
                } else {
                    let fresh: Vec<String> = evidence
                        .iter()
                        .filter(|e| {
                            !text::contains_folded(previous, e.trim().trim_end_matches('.'))
                        })
                        .cloned()
                        .collect();
                    if fresh.is_empty() {
                        Completion {
                            text: previous.clone(),
                            tokens: 0,
                        }
                    } else {
                        let addition = sentences(&fresh);
                        Completion {
                            tokens: text::whitespace_tokens(&addition),
                            text: format!("{} {addition}", previous.trim_end()),
                        }
                    }
                }
            }
            TemplateHint::Critique { target, missing } => {
                let body = if missing.is_empty() {
                    "consistent with my evidence.".to_string()
                } else {
                    format!("missing {}.", missing.join("; "))
                };
                counted(format!("Critique of {}: {body}", target.label()))
            }
            TemplateHint::Vote { choice } => counted(format!("Vote: {}.", choice.label())),
            TemplateHint::Route { choice } => counted(choice.as_str().to_string()),
        })
    }
}
