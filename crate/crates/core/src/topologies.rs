//! Five coordination structures over the same agents, KB, backend and
//! auditor. Every run yields an [`AnswerTrace`] with per-call accounting.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::agents::{
    self, AgentRole, AgentSettings, AuditedAnswer, Auditor, Backend, BackendError, CallPurpose,
    Completion, Draft, GenerationRequest, QueryContext, Router, TemplateHint,
};
use crate::kb::KnowledgeBase;
use crate::metrics::{self, Activity, PowerSample, PowerSampler};

/// Final text when no agent found any evidence.
pub const INSUFFICIENT: &str = "The knowledge base has no entry for this question.";

pub const RELAY_ORDER: [AgentRole; 5] = [
    AgentRole::MaintenanceAdvisor,
    AgentRole::AssemblyGuide,
    AgentRole::PartsAdvisor,
    AgentRole::FaultHandler,
    AgentRole::General,
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Topology {
    SharedMemory,
    CentralizedBroadcast,
    HierarchicalPipeline,
    DebateVoting,
    MicaCore,
}

impl Topology {
    pub const ALL: [Topology; 5] = [
        Topology::SharedMemory,
        Topology::CentralizedBroadcast,
        Topology::HierarchicalPipeline,
        Topology::DebateVoting,
        Topology::MicaCore,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Topology::SharedMemory => "shared_memory",
            Topology::CentralizedBroadcast => "centralized_broadcast",
            Topology::HierarchicalPipeline => "hierarchical_pipeline",
            Topology::DebateVoting => "debate_voting",
            Topology::MicaCore => "mica_core",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Topology::SharedMemory => "Shared Memory",
            Topology::CentralizedBroadcast => "Centralized Broadcast",
            Topology::HierarchicalPipeline => "Hierarchical Pipeline",
            Topology::DebateVoting => "Debate & Voting",
            Topology::MicaCore => "MICA Core (routed specialist)",
        }
    }

    /// Calls per trace on success.
    pub fn expected_calls(self, debate_rounds: usize) -> usize {
        match self {
            Topology::SharedMemory | Topology::CentralizedBroadcast => 7,
            Topology::HierarchicalPipeline => 6,
            Topology::DebateVoting => 5 + 5 * debate_rounds + 5 + 1,
            Topology::MicaCore => 3,
        }
    }
}

impl fmt::Display for Topology {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Topology {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.trim().to_ascii_lowercase().replace('-', "_");
        Self::ALL
            .into_iter()
            .find(|t| t.as_str() == norm)
            .ok_or_else(|| format!("unknown topology \"{s}\""))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CallRecord {
    /// `None` for hub, evaluator, router and auditor steps.
    pub role: Option<AgentRole>,
    pub purpose: CallPurpose,
    pub tokens: usize,
    /// True when the call went to the generation backend; rule steps are false.
    #[serde(default)]
    pub generated: bool,
    pub start: f64,
    pub wall_time: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerTrace {
    pub topology: Topology,
    pub query_id: String,
    pub final_answer: AuditedAnswer,
    /// Agent whose draft became the answer, where one was chosen.
    pub selected: Option<AgentRole>,
    pub calls: Vec<CallRecord>,
    #[serde(default)]
    pub energy_samples: Vec<PowerSample>,
    pub start: f64,
    pub end: f64,
    #[serde(default)]
    pub failed: Option<String>,
}

impl AnswerTrace {
    pub fn duration(&self) -> f64 {
        self.end - self.start
    }

    pub fn total_tokens(&self) -> usize {
        self.calls.iter().map(|c| c.tokens).sum()
    }

    pub fn attach_energy(&mut self, sampler: &dyn PowerSampler) {
        self.energy_samples = sampler.sample(&Activity {
            start: self.start,
            end: self.end,
            tokens: self.total_tokens(),
        });
    }

    /// The trace with its energy samples dropped and timing zeroed, for
    /// determinism comparisons.
    pub fn without_timing(&self) -> AnswerTrace {
        let mut t = self.clone();
        t.energy_samples.clear();
        t.start = 0.0;
        t.end = 0.0;
        for c in &mut t.calls {
            c.start = 0.0;
            c.wall_time = 0.0;
        }
        t
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoardEntry {
    pub author: AgentRole,
    pub text: String,
    pub round: usize,
}

/// Append-only blackboard.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SharedBoard {
    entries: Vec<BoardEntry>,
}

impl SharedBoard {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn post(&mut self, author: AgentRole, text: impl Into<String>, round: usize) {
        self.entries.push(BoardEntry {
            author,
            text: text.into(),
            round,
        });
    }

    pub fn entries(&self) -> &[BoardEntry] {
        &self.entries
    }

    pub fn render(&self) -> String {
        if self.entries.is_empty() {
            return String::new();
        }
        let lines: Vec<String> = self
            .entries
            .iter()
            .map(|e| format!("[{}] {}: {}", e.round, e.author.label(), e.text))
            .collect();
        format!("Shared board:\n{}", lines.join("\n"))
    }
}

/// How trace timestamps are produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Timing {
    /// Durations come from the cost model; reproducible.
    Virtual,
    /// Measured wall-clock time.
    Wall,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RouterMode {
    Lexicon,
    Backend,
}

/// Virtual duration of a call: generation calls cost a fixed overhead plus
/// a per-token time, rule-based steps a small constant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CostModel {
    pub call_overhead_s: f64,
    pub seconds_per_token: f64,
    pub rule_call_s: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        Self {
            call_overhead_s: 0.12,
            seconds_per_token: 0.02,
            rule_call_s: 0.002,
        }
    }
}

impl CostModel {
    pub fn duration(&self, generated: bool, tokens: usize) -> f64 {
        if generated {
            self.call_overhead_s + self.seconds_per_token * tokens as f64
        } else {
            self.rule_call_s
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TopologyConfig {
    pub debate_rounds: usize,
    /// Run fan-out stages on the rayon pool. Results are identical either way.
    pub parallel: bool,
    pub router: RouterMode,
    pub timing: Timing,
    pub cost: CostModel,
}

impl Default for TopologyConfig {
    fn default() -> Self {
        Self {
            debate_rounds: 1,
            parallel: false,
            router: RouterMode::Lexicon,
            timing: Timing::Virtual,
            cost: CostModel::default(),
        }
    }
}

struct Recorder<'c> {
    config: &'c TopologyConfig,
    started: Instant,
    clock: f64,
    calls: Vec<CallRecord>,
}

impl<'c> Recorder<'c> {
    fn new(config: &'c TopologyConfig) -> Self {
        Self {
            config,
            started: Instant::now(),
            clock: 0.0,
            calls: Vec::new(),
        }
    }

    fn record(
        &mut self,
        role: Option<AgentRole>,
        purpose: CallPurpose,
        tokens: usize,
        measured: f64,
        generated: bool,
    ) {
        let (start, wall_time) = match self.config.timing {
            Timing::Virtual => (self.clock, self.config.cost.duration(generated, tokens)),
            Timing::Wall => {
                let now = self.started.elapsed().as_secs_f64();
                ((now - measured).max(0.0), measured)
            }
        };
        self.clock = self.clock.max(start + wall_time);
        self.calls.push(CallRecord {
            role,
            purpose,
            tokens,
            generated,
            start,
            wall_time,
        });
    }

    fn end(&self) -> f64 {
        match self.config.timing {
            Timing::Virtual => self.clock,
            Timing::Wall => self.started.elapsed().as_secs_f64().max(self.clock),
        }
    }
}

fn kba_of(text: &str, kb: &KnowledgeBase) -> f64 {
    metrics::kba(text, kb.phrases(), kb.categories().len())
}

/// Index of the highest-KBA candidate; the earliest wins ties.
pub fn select_by_kba(candidates: &[&str], kb: &KnowledgeBase) -> usize {
    let mut best = 0;
    let mut best_score = f64::NEG_INFINITY;
    for (i, c) in candidates.iter().enumerate() {
        let s = kba_of(c, kb);
        if s > best_score {
            best = i;
            best_score = s;
        }
    }
    best
}

/// Concatenates the two highest-KBA drafts that carry evidence, in rank
/// order. Earlier roles rank first on equal scores.
pub fn aggregate_top2(drafts: &[Draft], kb: &KnowledgeBase) -> String {
    let mut ranked: Vec<(f64, &Draft)> = drafts
        .iter()
        .filter(|d| !d.evidence_ids.is_empty() && !d.text.trim().is_empty())
        .map(|d| (kba_of(&d.text, kb), d))
        .collect();
    if ranked.is_empty() {
        return INSUFFICIENT.to_string();
    }
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0));
    ranked
        .iter()
        .take(2)
        .map(|(_, d)| d.text.trim())
        .collect::<Vec<_>>()
        .join(" ")
}

/// Plurality over ballots (indices into role order); ties go to the earliest.
pub fn plurality(ballots: &[usize], candidates: usize) -> usize {
    let mut tally = vec![0usize; candidates];
    for b in ballots {
        tally[*b] += 1;
    }
    let mut best = 0;
    for (i, n) in tally.iter().enumerate() {
        if *n > tally[best] {
            best = i;
        }
    }
    best
}

/// First role id or label mentioned in a router reply.
pub fn parse_role(reply: &str) -> Option<AgentRole> {
    let folded = reply.to_lowercase();
    AgentRole::ALL
        .into_iter()
        .filter_map(|r| {
            let hits = [r.as_str().to_string(), r.label().to_lowercase()];
            hits.iter()
                .filter_map(|h| folded.find(h.as_str()))
                .min()
                .map(|p| (p, r))
        })
        .min()
        .map(|(_, r)| r)
}

/// Everything a topology run needs.
pub struct Team<'a> {
    pub kb: &'a KnowledgeBase,
    pub backend: &'a dyn Backend,
    pub settings: &'a AgentSettings,
    pub router: &'a Router,
    pub auditor: &'a Auditor,
    pub config: &'a TopologyConfig,
}

type Outcome = Result<(String, Option<AgentRole>), BackendError>;

impl<'a> Team<'a> {
    pub fn run(
        &self,
        topology: Topology,
        query_id: &str,
        query: &str,
        context: &QueryContext,
    ) -> AnswerTrace {
        let mut rec = Recorder::new(self.config);
        let outcome = match topology {
            Topology::SharedMemory => self.shared_memory(&mut rec, query, context),
            Topology::CentralizedBroadcast => self.centralized_broadcast(&mut rec, query, context),
            Topology::HierarchicalPipeline => self.hierarchical_pipeline(&mut rec, query, context),
            Topology::DebateVoting => self.debate_voting(&mut rec, query, context),
            Topology::MicaCore => self.mica_core(&mut rec, query, context),
        };
        let (final_answer, selected, failed) = match outcome {
            Ok((text, selected)) => {
                let t0 = Instant::now();
                let audited = self.auditor.audit(&text);
                rec.record(
                    None,
                    CallPurpose::Audit,
                    0,
                    t0.elapsed().as_secs_f64(),
                    false,
                );
                (audited, selected, None)
            }
            Err(e) => (
                AuditedAnswer {
                    text: String::new(),
                    flags: vec!["backend_failure".into()],
                    safe: false,
                    warnings: Vec::new(),
                },
                None,
                Some(e.to_string()),
            ),
        };
        let end = rec.end();
        AnswerTrace {
            topology,
            query_id: query_id.to_string(),
            final_answer,
            selected,
            calls: rec.calls,
            energy_samples: Vec::new(),
            start: 0.0,
            end,
            failed,
        }
    }

    fn generate(
        &self,
        rec: &mut Recorder,
        request: &GenerationRequest,
    ) -> Result<Completion, BackendError> {
        let t0 = Instant::now();
        let result = self.backend.complete(request);
        let tokens = result.as_ref().map_or(0, |c| c.tokens);
        rec.record(
            Some(request.role),
            request.purpose,
            tokens,
            t0.elapsed().as_secs_f64(),
            true,
        );
        result
    }

    fn propose(
        &self,
        role: AgentRole,
        query: &str,
        ctx: &QueryContext,
        notes: &str,
    ) -> Result<Draft, BackendError> {
        agents::answer_with_notes(
            role,
            query,
            ctx,
            notes,
            self.kb,
            self.backend,
            self.settings,
        )
    }

    /// Proposals from all five roles, recorded in role order whatever the
    /// completion order.
    fn fan_out(
        &self,
        rec: &mut Recorder,
        query: &str,
        ctx: &QueryContext,
        notes: &str,
    ) -> Result<Vec<Draft>, BackendError> {
        let results: Vec<Result<Draft, BackendError>> = if self.config.parallel {
            AgentRole::ALL
                .par_iter()
                .map(|r| self.propose(*r, query, ctx, notes))
                .collect()
        } else {
            AgentRole::ALL
                .iter()
                .map(|r| self.propose(*r, query, ctx, notes))
                .collect()
        };
        for (role, r) in AgentRole::ALL.iter().zip(&results) {
            let (tokens, measured) = r.as_ref().map_or((0, 0.0), |d| (d.token_count, d.gen_time));
            rec.record(Some(*role), CallPurpose::Propose, tokens, measured, true);
        }
        results.into_iter().collect()
    }

    fn shared_memory(&self, rec: &mut Recorder, query: &str, ctx: &QueryContext) -> Outcome {
        let mut board = SharedBoard::new();
        let mut drafts = Vec::new();
        for role in AgentRole::ALL {
            let result = self.propose(role, query, ctx, &board.render());
            let (tokens, measured) = result
                .as_ref()
                .map_or((0, 0.0), |d| (d.token_count, d.gen_time));
            rec.record(Some(role), CallPurpose::Propose, tokens, measured, true);
            let draft = result?;
            board.post(role, draft.text.clone(), 0);
            drafts.push(draft);
        }
        let t0 = Instant::now();
        let texts: Vec<&str> = board.entries().iter().map(|e| e.text.as_str()).collect();
        let best = select_by_kba(&texts, self.kb);
        rec.record(
            None,
            CallPurpose::Evaluate,
            0,
            t0.elapsed().as_secs_f64(),
            false,
        );
        Ok((drafts[best].text.clone(), Some(drafts[best].role)))
    }

    fn centralized_broadcast(
        &self,
        rec: &mut Recorder,
        query: &str,
        ctx: &QueryContext,
    ) -> Outcome {
        let snapshot = format!("Hub snapshot: {}", ctx.describe());
        let drafts = self.fan_out(rec, query, ctx, &snapshot)?;
        let t0 = Instant::now();
        let merged = aggregate_top2(&drafts, self.kb);
        rec.record(
            None,
            CallPurpose::Aggregate,
            0,
            t0.elapsed().as_secs_f64(),
            false,
        );
        Ok((merged, None))
    }

    fn hierarchical_pipeline(
        &self,
        rec: &mut Recorder,
        query: &str,
        ctx: &QueryContext,
    ) -> Outcome {
        let mut text = String::new();
        for role in RELAY_ORDER {
            let evidence: Vec<String> = self
                .kb
                .retrieve_evidence(query, role, self.settings.evidence_k)
                .into_iter()
                .map(|e| e.text)
                .collect();
            let user = format!(
                "Question: {query}\nContext: {}\nPrevious answer: {}\n{}\n\
                 Refine the previous answer with your evidence, or return it unchanged.",
                ctx.describe(),
                if text.is_empty() {
                    "(none)"
                } else {
                    text.as_str()
                },
                agents::evidence_block(&evidence)
            );
            let request = GenerationRequest {
                role,
                purpose: CallPurpose::Refine,
                system: self.settings.system_for(role),
                user,
                hint: TemplateHint::Refine {
                    previous: text.clone(),
                    evidence,
                    context: ctx.clone(),
                },
            };
            text = self.generate(rec, &request)?.text;
        }
        if text.trim().is_empty() {
            text = INSUFFICIENT.to_string();
        }
        Ok((text, None))
    }

    fn debate_voting(&self, rec: &mut Recorder, query: &str, ctx: &QueryContext) -> Outcome {
        let mut drafts = self.fan_out(rec, query, ctx, "")?;
        let n = drafts.len();
        let catalog = self.kb.phrases();
        for _ in 0..self.config.debate_rounds {
            let snapshot: Vec<String> = drafts.iter().map(|d| d.text.clone()).collect();
            for i in 0..n {
                let j = (i + 1) % n;
                let missing: Vec<String> = catalog
                    .catalog
                    .iter()
                    .filter(|p| {
                        crate::text::contains_folded(&snapshot[j], &p.text)
                            && !crate::text::contains_folded(&snapshot[i], &p.text)
                    })
                    .map(|p| p.text.clone())
                    .collect();
                let role = drafts[i].role;
                let target = drafts[j].role;
                let request = GenerationRequest {
                    role,
                    purpose: CallPurpose::Critique,
                    system: self.settings.system_for(role),
                    user: format!(
                        "Question: {query}\nDraft from {}:\n{}\nYour draft:\n{}\n\
                         Point out what the other draft gets wrong or what yours lacks.",
                        target.label(),
                        snapshot[j],
                        snapshot[i]
                    ),
                    hint: TemplateHint::Critique {
                        target,
                        missing: missing.clone(),
                    },
                };
                self.generate(rec, &request)?;
                if !missing.is_empty() {
                    let own = &mut drafts[i].text;
                    *own = format!("{} Also relevant: {}.", own.trim_end(), missing.join("; "));
                }
            }
        }
        let texts: Vec<&str> = drafts.iter().map(|d| d.text.as_str()).collect();
        let ballot = select_by_kba(&texts, self.kb);
        let listing: String = drafts
            .iter()
            .map(|d| format!("{}: {}", d.role.label(), d.text))
            .collect::<Vec<_>>()
            .join("\n");
        let mut ballots = Vec::with_capacity(n);
        for d in &drafts {
            let request = GenerationRequest {
                role: d.role,
                purpose: CallPurpose::Vote,
                system: self.settings.system_for(d.role),
                user: format!(
                    "Question: {query}\nCandidate answers:\n{listing}\n\
                     Vote for the answer best supported by the knowledge base."
                ),
                hint: TemplateHint::Vote {
                    choice: drafts[ballot].role,
                },
            };
            self.generate(rec, &request)?;
            ballots.push(ballot);
        }
        let winner = plurality(&ballots, n);
        Ok((drafts[winner].text.clone(), Some(drafts[winner].role)))
    }

    fn mica_core(&self, rec: &mut Recorder, query: &str, ctx: &QueryContext) -> Outcome {
        let lexical = self.router.route(query);
        let role = match self.config.router {
            RouterMode::Lexicon => {
                rec.record(None, CallPurpose::Route, 0, 0.0, false);
                lexical
            }
            RouterMode::Backend => {
                let roles: Vec<&str> = AgentRole::ALL.iter().map(|r| r.as_str()).collect();
                let request = GenerationRequest {
                    role: AgentRole::General,
                    purpose: CallPurpose::Route,
                    system: format!(
                        "Route the question to one assistant role. Reply with one of: {}.",
                        roles.join(", ")
                    ),
                    user: format!("Question: {query}\nContext: {}", ctx.describe()),
                    hint: TemplateHint::Route { choice: lexical },
                };
                let t0 = Instant::now();
                let result = self.backend.complete(&request);
                let tokens = result.as_ref().map_or(0, |c| c.tokens);
                rec.record(
                    None,
                    CallPurpose::Route,
                    tokens,
                    t0.elapsed().as_secs_f64(),
                    true,
                );
                parse_role(&result?.text).unwrap_or(lexical)
            }
        };
        let result = self.propose(role, query, ctx, "");
        let (tokens, measured) = result
            .as_ref()
            .map_or((0, 0.0), |d| (d.token_count, d.gen_time));
        rec.record(Some(role), CallPurpose::Propose, tokens, measured, true);
        Ok((result?.text, Some(role)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agents::{AuditRules, TemplateBackend};

    const KB: &str = r#"
categories = ["structure", "drivetrain"]

[[parts]]
id = "housing"
name = "Housing"
category = "structure"
[[parts.snippets]]
id = "housing-material"
role = "parts_advisor"
text = "The housing is cast aluminium"
[[parts.snippets]]
id = "housing-service"
role = "maintenance_advisor"
text = "Inspect the housing seals every 500 hours"

[[parts]]
id = "gear"
name = "Gear"
category = "drivetrain"
[[parts.snippets]]
id = "gear-material"
role = "parts_advisor"
text = "The gear is hardened steel"
[[parts.snippets]]
id = "gear-jam"
role = "fault_handler"
text = "A jammed gear usually means a misaligned shaft"

[[steps]]
id = "S1"
all_of = ["housing"]
[[steps]]
id = "S2"
all_of = ["gear"]

[workflow]
S1 = ["S2"]

[phrases]
catalog = [
  { text = "cast aluminium", category = "structure" },
  { text = "hardened steel", category = "drivetrain" },
  { text = "misaligned shaft", category = "drivetrain" },
]
"#;

    fn kb() -> KnowledgeBase {
        KnowledgeBase::from_toml_str(KB).unwrap()
    }

    fn run(topology: Topology, query: &str, config: &TopologyConfig) -> AnswerTrace {
        let kb = kb();
        let backend = TemplateBackend::default();
        let settings = AgentSettings::default();
        let router = Router::default();
        let auditor = Auditor::new(AuditRules::default(), &kb);
        let team = Team {
            kb: &kb,
            backend: &backend,
            settings: &settings,
            router: &router,
            auditor: &auditor,
            config,
        };
        team.run(topology, "q1", query, &QueryContext::default())
    }

    #[test]
    fn call_counts_per_topology() {
        let cfg = TopologyConfig::default();
        for t in Topology::ALL {
            let trace = run(t, "what is the gear made of", &cfg);
            assert_eq!(trace.calls.len(), t.expected_calls(1), "{t}");
            assert_eq!(trace.calls.last().unwrap().purpose, CallPurpose::Audit);
            assert!(trace.failed.is_none());
        }
        let vote_only = TopologyConfig {
            debate_rounds: 0,
            ..TopologyConfig::default()
        };
        assert_eq!(
            run(Topology::DebateVoting, "gear", &vote_only).calls.len(),
            11
        );
    }

    #[test]
    fn pipeline_relays_in_fixed_order() {
        let trace = run(
            Topology::HierarchicalPipeline,
            "gear material",
            &TopologyConfig::default(),
        );
        let roles: Vec<_> = trace.calls.iter().filter_map(|c| c.role).collect();
        assert_eq!(roles, RELAY_ORDER);
    }

    #[test]
    fn routed_specialist_answers_alone() {
        let trace = run(
            Topology::MicaCore,
            "how do I fix the jammed gear",
            &TopologyConfig::default(),
        );
        assert_eq!(trace.selected, Some(AgentRole::FaultHandler));
        assert!(trace.final_answer.text.contains("misaligned shaft"));

        let general = run(
            Topology::MicaCore,
            "hello there",
            &TopologyConfig::default(),
        );
        assert_eq!(general.selected, Some(AgentRole::General));
    }

    #[test]
    fn parallel_fan_out_matches_sequential() {
        let seq = TopologyConfig::default();
        let par = TopologyConfig {
            parallel: true,
            ..TopologyConfig::default()
        };
        for t in [Topology::CentralizedBroadcast, Topology::DebateVoting] {
            assert_eq!(
                run(t, "gear material", &seq),
                run(t, "gear material", &par),
                "{t}"
            );
        }
    }

    #[test]
    fn virtual_timing_follows_cost_model() {
        let cfg = TopologyConfig::default();
        let trace = run(Topology::MicaCore, "gear material", &cfg);
        let propose = &trace.calls[1];
        let expected = 0.002 + (0.12 + 0.02 * propose.tokens as f64) + 0.002;
        assert!((trace.duration() - expected).abs() < 1e-12);
        assert!(trace.calls.windows(2).all(|w| w[1].start >= w[0].start));
    }

    #[test]
    fn evaluator_prefers_highest_kba_then_role_order() {
        let kb = kb();
        assert_eq!(
            select_by_kba(&["nothing", "hardened steel", "cast aluminium"], &kb),
            1
        );
        assert_eq!(select_by_kba(&["same", "same", "same"], &kb), 0);
        assert_eq!(
            select_by_kba(
                &["hardened steel", "cast aluminium and hardened steel"],
                &kb
            ),
            1
        );
    }

    fn draft(role: AgentRole, text: &str, evidence: bool) -> Draft {
        Draft {
            role,
            text: text.into(),
            evidence_ids: if evidence { vec!["e".into()] } else { vec![] },
            token_count: 1,
            gen_time: 0.0,
        }
    }

    #[test]
    fn aggregator_cases() {
        let kb = kb();
        let one = [
            draft(AgentRole::AssemblyGuide, "no entry", false),
            draft(AgentRole::PartsAdvisor, "The gear is hardened steel.", true),
        ];
        assert_eq!(aggregate_top2(&one, &kb), "The gear is hardened steel.");
        let none = [draft(AgentRole::AssemblyGuide, "no entry", false)];
        assert_eq!(aggregate_top2(&none, &kb), INSUFFICIENT);
        let three = [
            draft(AgentRole::AssemblyGuide, "plain", true),
            draft(AgentRole::PartsAdvisor, "hardened steel", true),
            draft(
                AgentRole::FaultHandler,
                "cast aluminium, misaligned shaft",
                true,
            ),
        ];
        assert_eq!(
            aggregate_top2(&three, &kb),
            "cast aluminium, misaligned shaft hardened steel"
        );
    }

    #[test]
    fn plurality_ties_go_to_role_order() {
        assert_eq!(plurality(&[2, 2, 1, 1, 4], 5), 1);
        assert_eq!(plurality(&[3, 3, 3, 0, 0], 5), 3);
    }

    #[test]
    fn router_replies_parse_to_roles() {
        assert_eq!(parse_role("fault_handler"), Some(AgentRole::FaultHandler));
        assert_eq!(
            parse_role("I'd send this to the Parts Advisor, not the General Agent"),
            Some(AgentRole::PartsAdvisor)
        );
        assert_eq!(parse_role("no idea"), None);
    }

    #[test]
    fn board_is_append_only_and_rendered_in_order() {
        let mut b = SharedBoard::new();
        b.post(AgentRole::AssemblyGuide, "first", 0);
        b.post(AgentRole::PartsAdvisor, "second", 0);
        assert_eq!(b.entries().len(), 2);
        let r = b.render();
        assert!(r.find("first").unwrap() < r.find("second").unwrap());
    }

    struct Failing;
    impl Backend for Failing {
        fn name(&self) -> &'static str {
            "failing"
        }
        fn complete(&self, _: &GenerationRequest) -> Result<Completion, BackendError> {
            Err(BackendError::Transport {
                attempts: 1,
                message: "down".into(),
            })
        }
    }

    #[test]
    fn backend_failure_marks_trace_and_keeps_partial_calls() {
        let kb = kb();
        let settings = AgentSettings::default();
        let router = Router::default();
        let auditor = Auditor::new(AuditRules::default(), &kb);
        let config = TopologyConfig::default();
        let team = Team {
            kb: &kb,
            backend: &Failing,
            settings: &settings,
            router: &router,
            auditor: &auditor,
            config: &config,
        };
        let t = team.run(Topology::MicaCore, "q", "gear", &QueryContext::default());
        assert!(t.failed.is_some());
        assert_eq!(t.calls.len(), 2);
        assert!(!t.final_answer.safe);
        assert!(t.final_answer.text.is_empty());
    }
}
