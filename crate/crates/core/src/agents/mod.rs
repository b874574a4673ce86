//! The answering layer: an intent router, five role-specialised agents that
//! answer from KB evidence, a rule-based safety auditor, and interchangeable
//! text-generation backends.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::kb::KnowledgeBase;

mod audit;
mod backend;
mod remote;
mod router;

pub use audit::{AuditRules, AuditedAnswer, Auditor, HazardRule};
pub use backend::{
    Backend, BackendError, Completion, GenerationRequest, RoleTemplate, RoleTemplates,
    TemplateBackend, TemplateHint,
};
pub use remote::{RemoteBackend, RemoteConfig};
pub use router::{Lexicon, Router};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentRole {
    AssemblyGuide,
    PartsAdvisor,
    MaintenanceAdvisor,
    FaultHandler,
    General,
}

impl AgentRole {
    /// Canonical role order, used for every tie-break.
    pub const ALL: [AgentRole; 5] = [
        AgentRole::AssemblyGuide,
        AgentRole::PartsAdvisor,
        AgentRole::MaintenanceAdvisor,
        AgentRole::FaultHandler,
        AgentRole::General,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AgentRole::AssemblyGuide => "assembly_guide",
            AgentRole::PartsAdvisor => "parts_advisor",
            AgentRole::MaintenanceAdvisor => "maintenance_advisor",
            AgentRole::FaultHandler => "fault_handler",
            AgentRole::General => "general",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            AgentRole::AssemblyGuide => "Assembly Guide",
            AgentRole::PartsAdvisor => "Parts Advisor",
            AgentRole::MaintenanceAdvisor => "Maintenance Advisor",
            AgentRole::FaultHandler => "Fault Handler",
            AgentRole::General => "General Agent",
        }
    }

    pub fn position(self) -> usize {
        Self::ALL
            .iter()
            .position(|r| *r == self)
            .expect("closed set")
    }
}

impl fmt::Display for AgentRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AgentRole {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.trim().to_ascii_lowercase().replace([' ', '-'], "_");
        Self::ALL
            .into_iter()
            .find(|r| {
                r.as_str() == norm || r.label().to_ascii_lowercase().replace(' ', "_") == norm
            })
            .ok_or_else(|| format!("unknown agent role \"{s}\""))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CallPurpose {
    Propose,
    Aggregate,
    Critique,
    Vote,
    Route,
    Refine,
    Audit,
    Evaluate,
}

impl CallPurpose {
    pub fn as_str(self) -> &'static str {
        match self {
            CallPurpose::Propose => "propose",
            CallPurpose::Aggregate => "aggregate",
            CallPurpose::Critique => "critique",
            CallPurpose::Vote => "vote",
            CallPurpose::Route => "route",
            CallPurpose::Refine => "refine",
            CallPurpose::Audit => "audit",
            CallPurpose::Evaluate => "evaluate",
        }
    }
}

/// Perception and step state available to an agent when answering.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct QueryContext {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub focus: Option<String>,
    #[serde(default)]
    pub parts: Vec<String>,
}

impl QueryContext {
    pub fn from_context_set(ctx: &crate::perception::ContextSet, step: Option<String>) -> Self {
        Self {
            step,
            focus: Some(ctx.focus.part.clone()),
            parts: ctx
                .counts
                .iter()
                .map(|(p, n)| {
                    if *n > 1 {
                        format!("{p} x{n}")
                    } else {
                        p.clone()
                    }
                })
                .collect(),
        }
    }

    pub fn describe(&self) -> String {
        let mut out = Vec::new();
        if let Some(step) = &self.step {
            out.push(format!("current step: {step}"));
        }
        if let Some(focus) = &self.focus {
            out.push(format!("focus: {focus}"));
        }
        if !self.parts.is_empty() {
            out.push(format!("visible parts: {}", self.parts.join(", ")));
        }
        out.join("; ")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Draft {
    pub role: AgentRole,
    pub text: String,
    pub evidence_ids: Vec<String>,
    pub token_count: usize,
    pub gen_time: f64,
}

/// Shared answering setup: how many snippets each agent retrieves and the
/// per-role system prompts sent to remote backends.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AgentSettings {
    pub evidence_k: usize,
    pub system_prompt: String,
}

impl Default for AgentSettings {
    fn default() -> Self {
        Self {
            evidence_k: 2,
            system_prompt: "You are the {role} of an industrial assembly assistant. \
                Answer only from the provided knowledge-base evidence and keep the answer short."
                .into(),
        }
    }
}

impl AgentSettings {
    pub fn system_for(&self, role: AgentRole) -> String {
        self.system_prompt.replace("{role}", role.label())
    }
}

pub fn evidence_block(evidence: &[String]) -> String {
    if evidence.is_empty() {
        "Evidence: none".into()
    } else {
        let lines: Vec<String> = evidence.iter().map(|e| format!("- {e}")).collect();
        format!("Evidence:\n{}", lines.join("\n"))
    }
}

/// Retrieves role evidence and asks the backend for an answer.
pub fn answer(
    role: AgentRole,
    query: &str,
    context: &QueryContext,
    kb: &KnowledgeBase,
    backend: &dyn Backend,
    settings: &AgentSettings,
) -> Result<Draft, BackendError> {
    answer_with_notes(role, query, context, "", kb, backend, settings)
}

/// Like [`answer`], with extra shared notes (e.g. a blackboard) appended to
/// the prompt.
pub fn answer_with_notes(
    role: AgentRole,
    query: &str,
    context: &QueryContext,
    notes: &str,
    kb: &KnowledgeBase,
    backend: &dyn Backend,
    settings: &AgentSettings,
) -> Result<Draft, BackendError> {
    let evidence = kb.retrieve_evidence(query, role, settings.evidence_k);
    let texts: Vec<String> = evidence.iter().map(|e| e.text.clone()).collect();
    let mut user = format!(
        "Question: {query}\nContext: {}\n{}",
        context.describe(),
        evidence_block(&texts)
    );
    if !notes.is_empty() {
        user.push('\n');
        user.push_str(notes);
    }
    let request = GenerationRequest {
        role,
        purpose: CallPurpose::Propose,
        system: settings.system_for(role),
        user,
        hint: TemplateHint::Answer {
            evidence: texts,
            context: context.clone(),
        },
    };
    let started = Instant::now();
    let completion = backend.complete(&request)?;
    Ok(Draft {
        role,
        text: completion.text,
        evidence_ids: evidence.into_iter().map(|e| e.snippet_id).collect(),
        token_count: completion.tokens,
        gen_time: started.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roles_parse_from_ids_and_labels() {
        assert_eq!(
            "fault_handler".parse::<AgentRole>().unwrap(),
            AgentRole::FaultHandler
        );
        assert_eq!(
            "Parts Advisor".parse::<AgentRole>().unwrap(),
            AgentRole::PartsAdvisor
        );
        assert_eq!(
            "General Agent".parse::<AgentRole>().unwrap(),
            AgentRole::General
        );
        assert!("planner".parse::<AgentRole>().is_err());
    }

    #[test]
    fn exactly_five_roles_in_order() {
        assert_eq!(AgentRole::ALL.len(), 5);
        for (i, r) in AgentRole::ALL.iter().enumerate() {
            assert_eq!(r.position(), i);
        }
    }
}
