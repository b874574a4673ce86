//! Adaptive Step Fusion.
//!
//! Class-level fusion of the state-graph and retrieval experts with a
//! coverage bonus and a transition penalty, plus the feedback-driven online
//! update of per-class weights `W` (K x 2), biases `b` and the two global
//! gates `g`. No gradients are involved: updates are multiplicative within a
//! trust region, damped by per-class feedback counts and by how often the
//! label appeared recently.

use std::collections::VecDeque;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kb::WorkflowGraph;
use crate::step_experts::{argmax, ExpertOutput};

pub const STATE_VERSION: u32 = 1;

/// Column 0 is the state-graph expert, column 1 the retrieval expert.
pub const STATE_GRAPH: usize = 0;
pub const RETRIEVAL: usize = 1;

const TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum AsfError {
    #[error("dimension mismatch: state has K={expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("invalid ASF config: {0}")]
    Config(String),
    #[error("unsupported state version {found} (expected {STATE_VERSION})")]
    Version { found: u32 },
    #[error("state invariant violated: {0}")]
    Invariant(String),
    #[error("state file parse error: {0}")]
    Parse(String),
    #[error("state file {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AsfConfig {
    /// Rule balance of the state-graph score.
    pub alpha: f64,
    pub leak_s: f64,
    pub leak_r: f64,
    pub lambda_cov: f64,
    pub lambda_tr: f64,
    /// Focal exponent of the update impact.
    pub gamma: f64,
    pub eta: f64,
    /// Decay exponent on the per-class feedback count.
    pub rho: f64,
    pub trust: f64,
    pub b_max: f64,
    pub floor: f64,
    pub c_freeze: f64,
    /// Feedback history window H.
    pub history: usize,
    pub d_min: f64,
    pub temperature: f64,
    pub gate_rate: f64,
}

impl Default for AsfConfig {
    fn default() -> Self {
        Self {
            alpha: 0.6,
            leak_s: 0.1,
            leak_r: 0.1,
            lambda_cov: 0.3,
            lambda_tr: 0.5,
            gamma: 2.0,
            eta: 0.1,
            rho: 0.5,
            trust: 0.2,
            b_max: 1.0,
            floor: 1e-3,
            c_freeze: 0.85,
            history: 20,
            d_min: 0.1,
            temperature: 0.1,
            gate_rate: 0.05,
        }
    }
}

impl AsfConfig {
    pub fn validate(&self) -> Result<(), AsfError> {
        let check = |ok: bool, what: &str| {
            if ok {
                Ok(())
            } else {
                Err(AsfError::Config(what.to_string()))
            }
        };
        check(
            (0.0..=1.0).contains(&self.alpha),
            "alpha must lie in [0, 1]",
        )?;
        check(
            (0.0..1.0).contains(&self.leak_s) && (0.0..1.0).contains(&self.leak_r),
            "leaks must lie in [0, 1)",
        )?;
        check(
            self.lambda_cov >= 0.0 && self.lambda_tr >= 0.0,
            "coverage and transition weights must be non-negative",
        )?;
        check(self.gamma > 0.0, "gamma must be positive")?;
        check(self.eta > 0.0, "eta must be positive")?;
        check(self.rho > 0.0 && self.rho <= 1.0, "rho must lie in (0, 1]")?;
        check(
            self.trust > 0.0 && self.trust < 1.0,
            "trust must lie in (0, 1)",
        )?;
        check(self.b_max >= 0.0, "b_max must be non-negative")?;
        check(
            self.floor > 0.0 && self.floor <= 1.0,
            "floor must lie in (0, 1]",
        )?;
        check(
            self.history >= 1,
            "history window must hold at least one label",
        )?;
        check(
            (0.0..=1.0).contains(&self.d_min),
            "d_min must lie in [0, 1]",
        )?;
        check(self.temperature > 0.0, "temperature must be positive")?;
        check(self.gate_rate >= 0.0, "gate rate must be non-negative")
    }

    fn leak(&self, expert: usize) -> f64 {
        if expert == STATE_GRAPH {
            self.leak_s
        } else {
            self.leak_r
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AsfState {
    /// Per-class expert weights, `weights[j][e]`.
    pub weights: Vec<[f64; 2]>,
    pub bias: Vec<f64>,
    pub gates: [f64; 2],
    pub feedback_counts: Vec<u64>,
    pub history: VecDeque<usize>,
    pub prev_step: Option<usize>,
    /// Sum of the biases, conserved by every update.
    pub bias_total: f64,
}

impl AsfState {
    /// Symmetric start: `W = 1`, `b = 0`, `g = (0.5, 0.5)`.
    pub fn new(k: usize) -> Self {
        Self {
            weights: vec![[1.0, 1.0]; k],
            bias: vec![0.0; k],
            gates: [0.5, 0.5],
            feedback_counts: vec![0; k],
            history: VecDeque::new(),
            prev_step: None,
            bias_total: 0.0,
        }
    }

    pub fn num_steps(&self) -> usize {
        self.weights.len()
    }

    pub fn check_invariants(&self, cfg: &AsfConfig) -> Result<(), AsfError> {
        let k = self.num_steps();
        let bad = |msg: String| Err(AsfError::Invariant(msg));
        if k == 0 {
            return bad("state has no classes".into());
        }
        if self.bias.len() != k || self.feedback_counts.len() != k {
            return bad(format!("vectors disagree on K={k}"));
        }
        for e in 0..2 {
            let sum: f64 = self.weights.iter().map(|w| w[e]).sum();
            if (sum - k as f64).abs() > TOL {
                return bad(format!("weight column {e} sums to {sum}, expected {k}"));
            }
        }
        if let Some((j, w)) = self
            .weights
            .iter()
            .enumerate()
            .find(|(_, w)| w.iter().any(|x| !(*x >= cfg.floor - TOL)))
        {
            return bad(format!("weight row {j} {w:?} below floor {}", cfg.floor));
        }
        let [gs, gr] = self.gates;
        if gs < 0.0 || gr < 0.0 || (gs + gr - 1.0).abs() > TOL {
            return bad(format!("gates ({gs}, {gr}) do not form a distribution"));
        }
        if let Some(b) = self.bias.iter().find(|b| !(b.abs() <= cfg.b_max + TOL)) {
            return bad(format!("bias {b} exceeds b_max {}", cfg.b_max));
        }
        let total: f64 = self.bias.iter().sum();
        if (total - self.bias_total).abs() > TOL {
            return bad(format!(
                "bias sum {total} differs from conserved total {}",
                self.bias_total
            ));
        }
        if let Some(h) = self.history.iter().find(|h| **h >= k) {
            return bad(format!("history label {h} out of range"));
        }
        if self.prev_step.is_some_and(|p| p >= k) {
            return bad("previous step out of range".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusedPrediction {
    pub scores: Vec<f64>,
    pub step: usize,
    /// Softmax probability of `step`.
    pub confidence: f64,
    pub probabilities: Vec<f64>,
    /// `g_e * W_{j,e} * c_{e,j}` per expert.
    pub contributions: [Vec<f64>; 2],
}

/// Credits the full confidence to the expert's winner and `leak` times the
/// confidence to every other class.
pub fn leak_scores(expert: &ExpertOutput, leak: f64) -> Vec<f64> {
    (0..expert.scores.len())
        .map(|j| {
            if j == expert.winner {
                expert.confidence
            } else {
                leak * expert.confidence
            }
        })
        .collect()
}

pub fn softmax(scores: &[f64], temperature: f64) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = scores
        .iter()
        .map(|s| ((s - max) / temperature).exp())
        .collect();
    let z: f64 = exp.iter().sum();
    exp.into_iter().map(|e| e / z).collect()
}

/// Scores every class without touching the state.
pub fn score(
    state: &AsfState,
    out_s: &ExpertOutput,
    out_r: &ExpertOutput,
    workflow: &WorkflowGraph,
    cfg: &AsfConfig,
) -> Result<FusedPrediction, AsfError> {
    let k = state.num_steps();
    for len in [out_s.scores.len(), out_r.scores.len(), workflow.len()] {
        if len != k {
            return Err(AsfError::Dimension {
                expected: k,
                got: len,
            });
        }
    }
    if !out_s.coverage.is_empty() && out_s.coverage.len() != k {
        return Err(AsfError::Dimension {
            expected: k,
            got: out_s.coverage.len(),
        });
    }

    let leaked = [
        leak_scores(out_s, cfg.leak(STATE_GRAPH)),
        leak_scores(out_r, cfg.leak(RETRIEVAL)),
    ];
    let contributions: [Vec<f64>; 2] = [0, 1].map(|e| {
        (0..k)
            .map(|j| state.gates[e] * state.weights[j][e] * leaked[e][j])
            .collect()
    });
    let scores: Vec<f64> = (0..k)
        .map(|j| {
            let cov = out_s.coverage.get(j).copied().unwrap_or(0.0);
            let jump = state
                .prev_step
                .is_some_and(|prev| !workflow.allows(prev, j));
            state.bias[j] + contributions[0][j] + contributions[1][j] + cfg.lambda_cov * cov
                - if jump { cfg.lambda_tr } else { 0.0 }
        })
        .collect();
    let step = argmax(&scores);
    let probabilities = softmax(&scores, cfg.temperature);
    Ok(FusedPrediction {
        confidence: probabilities[step],
        scores,
        step,
        probabilities,
        contributions,
    })
}

/// Scores the frame and records the fused step as the new previous step.
pub fn fuse(
    state: &mut AsfState,
    out_s: &ExpertOutput,
    out_r: &ExpertOutput,
    workflow: &WorkflowGraph,
    cfg: &AsfConfig,
) -> Result<FusedPrediction, AsfError> {
    let pred = score(state, out_s, out_r, workflow, cfg)?;
    state.prev_step = Some(pred.step);
    Ok(pred)
}

/// What one feedback event did, for audit logs and invariant checks.
#[derive(Debug, Clone, PartialEq)]
pub struct FeedbackOutcome {
    pub eta_eff: f64,
    pub damping: f64,
    pub kappa: [f64; 2],
    /// Trust-clipped step per expert column, `None` when the column was not updated.
    pub delta: [Option<f64>; 2],
    pub rival: Option<usize>,
    /// Bias actually transferred from the rival to the target class.
    pub bias_shift: f64,
    pub gate_nudged: Option<usize>,
    /// Weights after the multiplicative step, before clamping and renormalisation.
    pub pre_renorm: Vec<[f64; 2]>,
}

/// Applies one correction `y` to the state. `last_scores` are the fused
/// scores of the frame being corrected.
pub fn feedback_update(
    state: &mut AsfState,
    y: usize,
    out_s: &ExpertOutput,
    out_r: &ExpertOutput,
    last_scores: &[f64],
    cfg: &AsfConfig,
) -> Result<FeedbackOutcome, AsfError> {
    let k = state.num_steps();
    if y >= k {
        return Err(AsfError::Dimension {
            expected: k,
            got: y + 1,
        });
    }
    if last_scores.len() != k {
        return Err(AsfError::Dimension {
            expected: k,
            got: last_scores.len(),
        });
    }
    let outs = [out_s, out_r];

    // focal impact, frozen for confident hits
    let kappa = outs.map(|o| {
        let hit = o.winner == y;
        if hit && o.confidence >= cfg.c_freeze {
            0.0
        } else {
            (1.0 - o.confidence).clamp(0.0, 1.0).powf(cfg.gamma)
        }
    });

    // step size damped by class frequency and recent dominance
    state.feedback_counts[y] += 1;
    let recent = state.history.iter().filter(|h| **h == y).count() as f64 / cfg.history as f64;
    let damping = (1.0 - recent).clamp(cfg.d_min, 1.0);
    let eta_eff = cfg.eta * (state.feedback_counts[y] as f64).powf(-cfg.rho) * damping;

    let rival = (0..k).filter(|j| *j != y).reduce(|best, j| {
        if last_scores[j] > last_scores[best] {
            j
        } else {
            best
        }
    });

    let hits = outs.map(|o| o.winner == y);
    let columns: Vec<usize> = if !hits[0] && !hits[1] {
        // both wrong: only the less confident column, state graph on ties
        if out_r.confidence < out_s.confidence {
            vec![RETRIEVAL]
        } else {
            vec![STATE_GRAPH]
        }
    } else {
        vec![STATE_GRAPH, RETRIEVAL]
    };

    let mut delta = [None, None];
    let mut bias_shift = 0.0;
    if let Some(rival) = rival {
        for &e in &columns {
            let d = (eta_eff * kappa[e]).min(cfg.trust);
            state.weights[y][e] *= 1.0 + d;
            state.weights[rival][e] *= 1.0 - d;
            delta[e] = Some(d);
        }

        let mean_kappa = columns.iter().map(|e| kappa[*e]).sum::<f64>() / columns.len() as f64;
        let beta = 0.25 * eta_eff * mean_kappa;
        // clipped excess stays with the counterpart, so the sum is unchanged
        let room_up = (cfg.b_max - state.bias[y]).max(0.0);
        let room_down = (state.bias[rival] + cfg.b_max).max(0.0);
        bias_shift = beta.min(room_up).min(room_down);
        state.bias[y] += bias_shift;
        state.bias[rival] -= bias_shift;
    }
    let pre_renorm = state.weights.clone();

    let gate_nudged = match hits {
        [true, false] => Some(STATE_GRAPH),
        [false, true] => Some(RETRIEVAL),
        _ => None,
    };
    if let Some(e) = gate_nudged {
        state.gates[e] += cfg.gate_rate * eta_eff;
        state.gates = project_gates(state.gates);
    }

    for e in 0..2 {
        let mut column: Vec<f64> = state.weights.iter().map(|w| w[e]).collect();
        floor_and_normalize(&mut column, cfg.floor, k as f64);
        for (w, v) in state.weights.iter_mut().zip(column) {
            w[e] = v;
        }
    }

    state.history.push_back(y);
    while state.history.len() > cfg.history {
        state.history.pop_front();
    }

    Ok(FeedbackOutcome {
        eta_eff,
        damping,
        kappa,
        delta,
        rival,
        bias_shift,
        gate_nudged,
        pre_renorm,
    })
}

/// Euclidean projection of the gates back onto `g_s + g_r = 1`, `g >= 0`.
fn project_gates([gs, gr]: [f64; 2]) -> [f64; 2] {
    let shift = (gs + gr - 1.0) / 2.0;
    let (gs, gr) = (gs - shift, gr - shift);
    if gs < 0.0 {
        [0.0, 1.0]
    } else if gr < 0.0 {
        [1.0, 0.0]
    } else {
        [gs, 1.0 - gs]
    }
}

/// Rescales `column` to sum `target` with every entry `>= floor`. Entries
/// that would fall below the floor are pinned to it and the remainder is
/// scaled over the free entries.
fn floor_and_normalize(column: &mut [f64], floor: f64, target: f64) {
    let n = column.len();
    let mut pinned = vec![false; n];
    for (v, p) in column.iter_mut().zip(pinned.iter_mut()) {
        if !(*v > floor) {
            *v = floor;
            *p = true;
        }
    }
    loop {
        let fixed = pinned.iter().filter(|p| **p).count() as f64 * floor;
        let free: f64 = column
            .iter()
            .zip(&pinned)
            .filter(|(_, p)| !**p)
            .map(|(v, _)| v)
            .sum();
        if free <= 0.0 {
            // everything pinned; only possible when n * floor >= target
            column.iter_mut().for_each(|v| *v = target / n as f64);
            return;
        }
        let scale = (target - fixed) / free;
        let mut changed = false;
        for (v, p) in column.iter_mut().zip(pinned.iter_mut()) {
            if !*p && *v * scale < floor {
                *v = floor;
                *p = true;
                changed = true;
            }
        }
        if !changed {
            for (v, p) in column.iter_mut().zip(&pinned) {
                if !*p {
                    *v *= scale;
                }
            }
            return;
        }
    }
}

// ---- persistence ----

#[derive(Debug, Serialize, Deserialize)]
struct StateFile {
    version: u32,
    k: usize,
    weights: Vec<[f64; 2]>,
    bias: Vec<f64>,
    bias_total: f64,
    gates: [f64; 2],
    feedback_counts: Vec<u64>,
    /// Step indices, oldest first.
    history: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    prev_step: Option<usize>,
}

pub fn state_to_string(state: &AsfState) -> String {
    let file = StateFile {
        version: STATE_VERSION,
        k: state.num_steps(),
        weights: state.weights.clone(),
        bias: state.bias.clone(),
        bias_total: state.bias_total,
        gates: state.gates,
        feedback_counts: state.feedback_counts.clone(),
        history: state.history.iter().copied().collect(),
        prev_step: state.prev_step,
    };
    toml::to_string(&file).expect("ASF state serializes")
}

pub fn state_from_str(src: &str, cfg: &AsfConfig) -> Result<AsfState, AsfError> {
    #[derive(Deserialize)]
    struct VersionProbe {
        version: u32,
    }
    let probe: VersionProbe = toml::from_str(src).map_err(|e| AsfError::Parse(e.to_string()))?;
    if probe.version != STATE_VERSION {
        return Err(AsfError::Version {
            found: probe.version,
        });
    }
    let file: StateFile = toml::from_str(src).map_err(|e| AsfError::Parse(e.to_string()))?;
    if file.weights.len() != file.k {
        return Err(AsfError::Dimension {
            expected: file.k,
            got: file.weights.len(),
        });
    }
    let state = AsfState {
        weights: file.weights,
        bias: file.bias,
        gates: file.gates,
        feedback_counts: file.feedback_counts,
        history: file.history.into(),
        prev_step: file.prev_step,
        bias_total: file.bias_total,
    };
    state.check_invariants(cfg)?;
    Ok(state)
}

pub fn save_state(state: &AsfState, path: impl AsRef<Path>) -> Result<(), AsfError> {
    let path = path.as_ref();
    std::fs::write(path, state_to_string(state)).map_err(|source| AsfError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_state(path: impl AsRef<Path>, cfg: &AsfConfig) -> Result<AsfState, AsfError> {
    let path = path.as_ref();
    let src = std::fs::read_to_string(path).map_err(|source| AsfError::Io {
        path: path.display().to_string(),
        source,
    })?;
    state_from_str(&src, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::step_experts::ExpertKind;

    fn point(kind: ExpertKind, k: usize, winner: usize, c: f64) -> ExpertOutput {
        ExpertOutput::point(kind, k, winner, c)
    }

    fn plain_cfg() -> AsfConfig {
        AsfConfig {
            lambda_cov: 0.0,
            lambda_tr: 0.0,
            ..AsfConfig::default()
        }
    }

    #[test]
    fn default_config_is_valid() {
        AsfConfig::default().validate().unwrap();
        let bad = AsfConfig {
            leak_r: 1.0,
            ..AsfConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn leak_hand_cases() {
        let out = point(ExpertKind::Retrieval, 3, 1, 0.8);
        let c = leak_scores(&out, 0.1);
        assert!((c[0] - 0.08).abs() < 1e-15 && c[1] == 0.8 && (c[2] - 0.08).abs() < 1e-15);
        assert_eq!(leak_scores(&out, 0.0), vec![0.0, 0.8, 0.0]);
        let zero = point(ExpertKind::Retrieval, 3, 1, 0.0);
        assert_eq!(leak_scores(&zero, 0.1), vec![0.0; 3]);
    }

    #[test]
    fn fuse_hand_case() {
        let mut st = AsfState::new(2);
        let s = point(ExpertKind::StateGraph, 2, 0, 0.8);
        let r = point(ExpertKind::Retrieval, 2, 1, 0.6);
        let p = fuse(&mut st, &s, &r, &WorkflowGraph::complete(2), &plain_cfg()).unwrap();
        assert!((p.scores[0] - 0.43).abs() < 1e-12);
        assert!((p.scores[1] - 0.34).abs() < 1e-12);
        assert_eq!(p.step, 0);
        assert_eq!(st.prev_step, Some(0));
    }

    #[test]
    fn transition_penalty_hand_case() {
        // allowed set from step 1 is exactly {1}
        let wf = WorkflowGraph::from_successors(vec![[1].into(), [].into()]);
        assert_eq!(wf.allowed_from(1).iter().copied().collect::<Vec<_>>(), [1]);
        let mut st = AsfState::new(2);
        st.prev_step = Some(1);
        let cfg = AsfConfig {
            lambda_tr: 0.5,
            ..plain_cfg()
        };
        let s = point(ExpertKind::StateGraph, 2, 0, 0.8);
        let r = point(ExpertKind::Retrieval, 2, 1, 0.6);
        let p = fuse(&mut st, &s, &r, &wf, &cfg).unwrap();
        assert!((p.scores[0] - -0.07).abs() < 1e-12);
        assert!((p.scores[1] - 0.34).abs() < 1e-12);
        assert_eq!(p.step, 1);
    }

    #[test]
    fn no_penalty_without_previous_step() {
        let st = AsfState::new(2);
        let cfg = AsfConfig {
            lambda_tr: 10.0,
            ..plain_cfg()
        };
        let wf = WorkflowGraph::from_successors(vec![[].into(), [].into()]);
        let s = point(ExpertKind::StateGraph, 2, 1, 0.8);
        let r = point(ExpertKind::Retrieval, 2, 1, 0.6);
        let p = score(&st, &s, &r, &wf, &cfg).unwrap();
        assert!(p.scores.iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn agreement_wins() {
        let mut st = AsfState::new(4);
        for j in 0..4 {
            let s = point(ExpertKind::StateGraph, 4, j, 0.05);
            let r = point(ExpertKind::Retrieval, 4, j, 0.02);
            st.prev_step = None;
            let p = fuse(&mut st, &s, &r, &WorkflowGraph::complete(4), &plain_cfg()).unwrap();
            assert_eq!(p.step, j);
        }
    }

    #[test]
    fn softmax_sums_to_one_and_is_shift_invariant() {
        let s = [0.3, -1.2, 0.9, 0.9];
        let p = softmax(&s, 0.1);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let shifted: Vec<f64> = s.iter().map(|v| v + 7.5).collect();
        let q = softmax(&shifted, 0.1);
        for (a, b) in p.iter().zip(&q) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(argmax(&s), argmax(&shifted));
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let st = AsfState::new(3);
        let s = point(ExpertKind::StateGraph, 2, 0, 0.5);
        let r = point(ExpertKind::Retrieval, 2, 0, 0.5);
        assert!(matches!(
            score(&st, &s, &r, &WorkflowGraph::complete(2), &plain_cfg()),
            Err(AsfError::Dimension {
                expected: 3,
                got: 2
            })
        ));
    }

    #[test]
    fn feedback_hand_case() {
        let cfg = AsfConfig::default();
        let mut st = AsfState::new(2);
        let s = point(ExpertKind::StateGraph, 2, 0, 0.8);
        let r = point(ExpertKind::Retrieval, 2, 1, 0.6);
        let last = [0.43, 0.34];
        let out = feedback_update(&mut st, 1, &s, &r, &last, &cfg).unwrap();

        assert_eq!(out.damping, 1.0);
        assert!((out.eta_eff - 0.1).abs() < 1e-15);
        assert!((out.kappa[0] - 0.04).abs() < 1e-12);
        assert!((out.kappa[1] - 0.16).abs() < 1e-12);
        assert!((out.delta[0].unwrap() - 0.004).abs() < 1e-12);
        assert!((out.delta[1].unwrap() - 0.016).abs() < 1e-12);
        assert_eq!(out.rival, Some(0));

        assert!((st.weights[1][0] - 1.004).abs() < 1e-12);
        assert!((st.weights[0][0] - 0.996).abs() < 1e-12);
        assert!((st.weights[1][1] - 1.016).abs() < 1e-12);
        assert!((st.weights[0][1] - 0.984).abs() < 1e-12);
        for e in 0..2 {
            assert!((st.weights[0][e] + st.weights[1][e] - 2.0).abs() < 1e-12);
        }
        assert!((st.gates[0] - 0.4975).abs() < 1e-12);
        assert!((st.gates[1] - 0.5025).abs() < 1e-12);
        assert!((st.bias[1] - 0.0025).abs() < 1e-12);
        assert!((st.bias[0] + 0.0025).abs() < 1e-12);
        assert_eq!(st.feedback_counts, vec![0, 1]);
        assert_eq!(st.history, [1]);
        st.check_invariants(&cfg).unwrap();
    }

    #[test]
    fn confident_hit_is_frozen() {
        let cfg = AsfConfig::default();
        let mut st = AsfState::new(3);
        let s = point(ExpertKind::StateGraph, 3, 0, 0.7);
        let r = point(ExpertKind::Retrieval, 3, 2, 0.95);
        let out = feedback_update(&mut st, 2, &s, &r, &[0.5, 0.1, 0.4], &cfg).unwrap();
        assert_eq!(out.kappa[1], 0.0);
        assert_eq!(out.delta[1], Some(0.0));
        assert!(st.weights.iter().all(|w| w[1] == 1.0));
    }

    #[test]
    fn nothing_to_correct() {
        let cfg = AsfConfig::default();
        let mut st = AsfState::new(3);
        let before = st.clone();
        let s = point(ExpertKind::StateGraph, 3, 1, 0.9);
        let r = point(ExpertKind::Retrieval, 3, 1, 0.95);
        let out = feedback_update(&mut st, 1, &s, &r, &[0.1, 0.9, 0.1], &cfg).unwrap();
        assert_eq!(out.gate_nudged, None);
        assert_eq!(st.weights, before.weights);
        assert_eq!(st.bias, before.bias);
        assert_eq!(st.gates, before.gates);
        assert_eq!(st.feedback_counts, vec![0, 1, 0]);
        assert_eq!(st.history, [1]);
    }

    #[test]
    fn both_wrong_updates_less_confident_column() {
        let cfg = AsfConfig::default();
        let mut st = AsfState::new(3);
        let s = point(ExpertKind::StateGraph, 3, 0, 0.7);
        let r = point(ExpertKind::Retrieval, 3, 1, 0.4);
        let out = feedback_update(&mut st, 2, &s, &r, &[0.4, 0.3, 0.1], &cfg).unwrap();
        assert_eq!(out.delta[0], None);
        assert!(out.delta[1].unwrap() > 0.0);
        assert!(st.weights.iter().all(|w| w[0] == 1.0));
    }

    #[test]
    fn damping_follows_history_fraction() {
        let cfg = AsfConfig {
            history: 4,
            ..AsfConfig::default()
        };
        let mut st = AsfState::new(2);
        st.history = [1, 1, 0, 1].into();
        let s = point(ExpertKind::StateGraph, 2, 0, 0.5);
        let r = point(ExpertKind::Retrieval, 2, 0, 0.5);
        let out = feedback_update(&mut st, 1, &s, &r, &[0.5, 0.2], &cfg).unwrap();
        assert!((out.damping - 0.25).abs() < 1e-15);
        st.history = [1, 1, 1, 1].into();
        let out = feedback_update(&mut st, 1, &s, &r, &[0.5, 0.2], &cfg).unwrap();
        assert_eq!(out.damping, cfg.d_min);
    }

    #[test]
    fn gate_projection_clips_at_zero() {
        assert_eq!(project_gates([0.0, 1.3]), [0.0, 1.0]);
        let g = project_gates([0.6, 0.5]);
        assert!((g[0] - 0.55).abs() < 1e-15 && (g[1] - 0.45).abs() < 1e-15);
    }

    #[test]
    fn floor_normalization_respects_floor() {
        let mut col = vec![1e-6, 3.0, 1.0];
        floor_and_normalize(&mut col, 1e-3, 3.0);
        assert!(col.iter().all(|v| *v >= 1e-3));
        assert!((col.iter().sum::<f64>() - 3.0).abs() < 1e-12);
        assert_eq!(col[0], 1e-3);
    }

    #[test]
    fn bias_clip_returns_excess() {
        let cfg = AsfConfig {
            b_max: 0.001,
            eta: 0.9,
            ..AsfConfig::default()
        };
        let mut st = AsfState::new(2);
        let s = point(ExpertKind::StateGraph, 2, 0, 0.1);
        let r = point(ExpertKind::Retrieval, 2, 0, 0.1);
        for _ in 0..5 {
            feedback_update(&mut st, 1, &s, &r, &[0.5, 0.1], &cfg).unwrap();
            st.check_invariants(&cfg).unwrap();
        }
        assert!((st.bias[1] - 0.001).abs() < 1e-15);
        assert!((st.bias.iter().sum::<f64>()).abs() < 1e-15);
    }

    #[test]
    fn state_round_trip_and_tamper() {
        let cfg = AsfConfig::default();
        let st = AsfState::new(4);
        let text = state_to_string(&st);
        assert_eq!(state_from_str(&text, &cfg).unwrap(), st);

        let tampered = text.replace("gates = [0.5, 0.5]", "gates = [0.5, 1.0]");
        assert_ne!(tampered, text);
        assert!(matches!(
            state_from_str(&tampered, &cfg),
            Err(AsfError::Invariant(_))
        ));
        let wrong_version = text.replace("version = 1", "version = 9");
        assert!(matches!(
            state_from_str(&wrong_version, &cfg),
            Err(AsfError::Version { found: 9 })
        ));
    }
}
