use serde::{Deserialize, Serialize};

use crate::kb::{KnowledgeBase, WorkflowGraph};
use crate::text;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HazardRule {
    pub keyword: String,
    pub warning: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AuditRules {
    /// Substrings that block an answer outright.
    pub forbidden: Vec<String>,
    pub hazards: Vec<HazardRule>,
    /// Block answers that assert a step sequence the workflow does not allow.
    pub check_step_order: bool,
    pub refusal: String,
}

impl Default for AuditRules {
    fn default() -> Self {
        Self {
            forbidden: Vec::new(),
            hazards: Vec::new(),
            check_step_order: true,
            refusal: "This request cannot be answered safely. Please consult the line supervisor."
                .into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditedAnswer {
    pub text: String,
    pub flags: Vec<String>,
    pub safe: bool,
    pub warnings: Vec<String>,
}

/// Rule-based safety checker over a fixed workflow.
#[derive(Debug, Clone)]
pub struct Auditor {
    rules: AuditRules,
    step_ids: Vec<String>,
    workflow: WorkflowGraph,
}

const FORWARD: [&str; 4] = ["then", "before", "-", "followed"];
const BACKWARD: [&str; 1] = ["after"];

impl Auditor {
    pub fn new(rules: AuditRules, kb: &KnowledgeBase) -> Self {
        Self {
            rules,
            step_ids: kb.steps().iter().map(|s| s.id.to_lowercase()).collect(),
            workflow: kb.workflow().clone(),
        }
    }

    pub fn rules(&self) -> &AuditRules {
        &self.rules
    }

    pub fn audit(&self, draft: &str) -> AuditedAnswer {
        let mut flags = Vec::new();
        for phrase in &self.rules.forbidden {
            if text::contains_folded(draft, phrase) {
                flags.push(format!("forbidden: {phrase}"));
            }
        }
        if self.rules.check_step_order {
            for (a, b) in self.asserted_sequences(draft) {
                if !self.workflow.reachable(a, b) {
                    flags.push(format!(
                        "step_order: {} then {}",
                        self.step_ids[a].to_uppercase(),
                        self.step_ids[b].to_uppercase()
                    ));
                }
            }
        }
        if !flags.is_empty() {
            return AuditedAnswer {
                text: self.rules.refusal.clone(),
                flags,
                safe: false,
                warnings: Vec::new(),
            };
        }

        let mut text = draft.to_string();
        let mut warnings: Vec<String> = Vec::new();
        for hazard in &self.rules.hazards {
            if text::contains_folded(draft, &hazard.keyword) && !warnings.contains(&hazard.warning)
            {
                warnings.push(hazard.warning.clone());
                flags.push(format!("hazard: {}", hazard.keyword));
            }
        }
        for w in &warnings {
            text.push(' ');
            text.push_str(w);
        }
        AuditedAnswer {
            text,
            flags,
            safe: true,
            warnings,
        }
    }

    /// Ordered step pairs asserted by phrases like `S1 then S2`,
    /// `step 1 before step 2` or `S3 after S2`.
    fn asserted_sequences(&self, draft: &str) -> Vec<(usize, usize)> {
        let tokens = text::tokens(draft);
        let mut refs: Vec<(usize, usize)> = Vec::new(); // (token position, step)
        let mut i = 0;
        while i < tokens.len() {
            if let Some(s) = self.step_ids.iter().position(|id| *id == tokens[i]) {
                refs.push((i, s));
            } else if tokens[i] == "step" {
                if let Some(n) = tokens.get(i + 1).and_then(|t| t.parse::<usize>().ok()) {
                    if (1..=self.step_ids.len()).contains(&n) {
                        refs.push((i + 1, n - 1));
                        i += 1;
                    }
                }
            }
            i += 1;
        }
        refs.windows(2)
            .filter_map(|w| {
                let ((pa, a), (pb, b)) = (w[0], w[1]);
                let between = &tokens[pa + 1..pb];
                let between = if between.last().is_some_and(|t| t == "step") {
                    &between[..between.len() - 1]
                } else {
                    between
                };
                if between.len() > 3 {
                    None
                } else if between.iter().any(|t| FORWARD.contains(&t.as_str())) {
                    Some((a, b))
                } else if between.iter().any(|t| BACKWARD.contains(&t.as_str())) {
                    Some((b, a))
                } else {
                    None
                }
            })
            .collect()
    }
}
