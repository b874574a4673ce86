//! Before/after evaluation of step fusion with a replayed feedback schedule.

use std::collections::HashMap;
use std::path::Path;

use mica_core::asf::{self, AsfConfig, AsfState, FusedPrediction};
use mica_core::kb::KnowledgeBase;
use mica_core::metrics::{self, ClassScores};
use mica_core::perception::{ContextTracker, PerceptionParams, StreamRecord};
use mica_core::step_experts::{self, Embedder, ExpertOutput, RecordedEmbeddings, ReferenceGallery};
use serde::{Deserialize, Serialize};

use crate::HarnessError;

fn default_budget() -> usize {
    10
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduledUpdate {
    pub frame: u64,
    pub step: String,
}

/// Feedback replayed in stream order, at most `budget_per_step` per step.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeedbackSchedule {
    #[serde(default = "default_budget")]
    pub budget_per_step: usize,
    #[serde(default)]
    pub updates: Vec<ScheduledUpdate>,
}

impl Default for FeedbackSchedule {
    fn default() -> Self {
        Self {
            budget_per_step: default_budget(),
            updates: Vec::new(),
        }
    }
}

impl FeedbackSchedule {
    pub fn from_toml_str(src: &str) -> Result<Self, HarnessError> {
        toml::from_str(src).map_err(|e| HarnessError::Schedule(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, HarnessError> {
        let path = path.as_ref();
        let src = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        Self::from_toml_str(&src)
    }
}

/// Expert outputs for one frame that has a perception context.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub frame: u64,
    pub segment: Option<String>,
    pub truth: Option<usize>,
    pub state_graph: ExpertOutput,
    pub retrieval: ExpertOutput,
}

pub struct AsfInputs<'a> {
    pub kb: &'a KnowledgeBase,
    pub gallery: &'a ReferenceGallery,
    pub stream: &'a [StreamRecord],
    pub perception: PerceptionParams,
    pub top_k: usize,
    pub asf: AsfConfig,
    pub ece_bins: usize,
}

/// Runs perception and both experts over the stream. Frames without a
/// stable context produce no observation.
pub fn observe(inputs: &AsfInputs) -> Result<Vec<Observation>, HarnessError> {
    let kb = inputs.kb;
    if inputs.gallery.num_steps() != kb.num_steps() {
        return Err(HarnessError::Config(format!(
            "gallery has {} steps, knowledge base has {}",
            inputs.gallery.num_steps(),
            kb.num_steps()
        )));
    }
    let mut tracker = ContextTracker::new(inputs.perception);
    let mut segment: Option<&Option<String>> = None;
    let mut out = Vec::new();
    for rec in inputs.stream {
        if segment.is_some_and(|s| *s != rec.segment) {
            tracker.reset();
        }
        segment = Some(&rec.segment);
        let Some(ctx) = tracker.push(rec.frame, &rec.detections) else {
            continue;
        };
        let truth = match &rec.truth {
            Some(id) => Some(kb.step_index(id).ok_or_else(|| {
                HarnessError::Config(format!(
                    "frame {} labelled with unknown step \"{id}\"",
                    rec.frame
                ))
            })?),
            None => None,
        };
        let state_graph =
            step_experts::state_graph_score(&ctx.counts, kb.steps(), inputs.asf.alpha)?;
        let embedding = RecordedEmbeddings
            .embed(rec)
            .ok_or(HarnessError::MissingEmbedding(rec.frame))?;
        let retrieval = step_experts::retrieval_score(&embedding, inputs.gallery, inputs.top_k)?;
        out.push(Observation {
            frame: rec.frame,
            segment: rec.segment.clone(),
            truth,
            state_graph,
            retrieval,
        });
    }
    Ok(out)
}

/// Fuses every observation with a frozen copy of `state`. The previous step
/// resets at segment boundaries.
pub fn predict(
    state: &AsfState,
    observations: &[Observation],
    kb: &KnowledgeBase,
    cfg: &AsfConfig,
) -> Result<Vec<FusedPrediction>, HarnessError> {
    let mut s = state.clone();
    s.prev_step = None;
    let mut out = Vec::with_capacity(observations.len());
    for (i, obs) in observations.iter().enumerate() {
        if i > 0 && observations[i - 1].segment != obs.segment {
            s.prev_step = None;
        }
        out.push(asf::fuse(
            &mut s,
            &obs.state_graph,
            &obs.retrieval,
            kb.workflow(),
            cfg,
        )?);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Over frames whose true step is this one; `None` when there are none.
    pub ece: Option<f64>,
    pub frames: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AsfRow {
    pub step: String,
    pub before: StepMetrics,
    pub after: StepMetrics,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PassSummary {
    /// Share of evaluated frames labelled correctly, in percent.
    pub accuracy: f64,
    pub ece: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AsfReport {
    pub seed: u64,
    pub rows: Vec<AsfRow>,
    pub before: PassSummary,
    pub after: PassSummary,
    /// Labelled frames with a context that were not used for feedback.
    pub evaluated_frames: usize,
    pub frames_without_context: usize,
    pub updates_applied: usize,
    pub updates_over_budget: usize,
    pub config_echo: String,
}

pub struct AsfEvalOutput {
    pub report: AsfReport,
    pub state: AsfState,
}

/// Replays the schedule over the stream, updating `state` in place. Returns
/// (applied, over budget).
pub fn adapt(
    state: &mut AsfState,
    observations: &[Observation],
    schedule: &FeedbackSchedule,
    inputs: &AsfInputs,
) -> Result<(usize, usize), HarnessError> {
    let kb = inputs.kb;
    let cfg = &inputs.asf;
    let mut wanted: HashMap<u64, usize> = HashMap::new();
    for u in &schedule.updates {
        let y = kb
            .step_index(&u.step)
            .ok_or_else(|| HarnessError::Schedule(format!("unknown step \"{}\"", u.step)))?;
        if !inputs.stream.iter().any(|r| r.frame == u.frame) {
            return Err(HarnessError::Schedule(format!(
                "frame {} is beyond the stream",
                u.frame
            )));
        }
        if !observations.iter().any(|o| o.frame == u.frame) {
            return Err(HarnessError::Schedule(format!(
                "frame {} has no perception context to correct",
                u.frame
            )));
        }
        if wanted.insert(u.frame, y).is_some() {
            return Err(HarnessError::Schedule(format!(
                "frame {} scheduled twice",
                u.frame
            )));
        }
    }

    let mut used = vec![0usize; kb.num_steps()];
    let (mut applied, mut over) = (0, 0);
    state.prev_step = None;
    for (i, obs) in observations.iter().enumerate() {
        if i > 0 && observations[i - 1].segment != obs.segment {
            state.prev_step = None;
        }
        let pred = asf::fuse(state, &obs.state_graph, &obs.retrieval, kb.workflow(), cfg)?;
        let Some(&y) = wanted.get(&obs.frame) else {
            continue;
        };
        if used[y] >= schedule.budget_per_step {
            over += 1;
            continue;
        }
        used[y] += 1;
        applied += 1;
        asf::feedback_update(
            state,
            y,
            &obs.state_graph,
            &obs.retrieval,
            &pred.scores,
            cfg,
        )?;
    }
    state.prev_step = None;
    Ok((applied, over))
}

fn pass_metrics(
    preds: &[FusedPrediction],
    truths: &[usize],
    k: usize,
    bins: usize,
) -> Result<(Vec<StepMetrics>, PassSummary), HarnessError> {
    let predicted: Vec<usize> = preds.iter().map(|p| p.step).collect();
    let scores: Vec<ClassScores> = metrics::classification_suite(&predicted, truths, k)?;
    let calib: Vec<(f64, bool)> = preds
        .iter()
        .zip(truths)
        .map(|(p, t)| (p.confidence, p.step == *t))
        .collect();
    let rows = scores
        .into_iter()
        .enumerate()
        .map(|(j, s)| {
            let own: Vec<(f64, bool)> = calib
                .iter()
                .zip(truths)
                .filter(|(_, t)| **t == j)
                .map(|(c, _)| *c)
                .collect();
            Ok(StepMetrics {
                accuracy: s.accuracy,
                precision: s.precision,
                recall: s.recall,
                f1: s.f1,
                ece: if own.is_empty() {
                    None
                } else {
                    Some(metrics::ece(&own, bins)?)
                },
                frames: own.len(),
            })
        })
        .collect::<Result<Vec<_>, HarnessError>>()?;
    let correct = calib.iter().filter(|(_, ok)| *ok).count();
    Ok((
        rows,
        PassSummary {
            accuracy: 100.0 * correct as f64 / calib.len() as f64,
            ece: metrics::ece(&calib, bins)?,
        },
    ))
}

/// Pass 1 with the initial state, schedule replay, pass 2 with the adapted
/// state. Both passes score the same held-out frames: labelled frames that
/// carry no scheduled feedback.
pub fn run_asf_eval(
    inputs: &AsfInputs,
    schedule: &FeedbackSchedule,
    initial: AsfState,
    seed: u64,
    config_echo: String,
) -> Result<AsfEvalOutput, HarnessError> {
    let kb = inputs.kb;
    let k = kb.num_steps();
    if initial.num_steps() != k {
        return Err(HarnessError::Config(format!(
            "initial state has {} steps, knowledge base has {k}",
            initial.num_steps()
        )));
    }
    let observations = observe(inputs)?;
    let with_context: usize = observations.len();

    let before = predict(&initial, &observations, kb, &inputs.asf)?;
    let mut state = initial;
    let (applied, over) = adapt(&mut state, &observations, schedule, inputs)?;
    let after = predict(&state, &observations, kb, &inputs.asf)?;

    let scheduled: Vec<u64> = schedule.updates.iter().map(|u| u.frame).collect();
    let held_out: Vec<usize> = observations
        .iter()
        .enumerate()
        .filter(|(_, o)| o.truth.is_some() && !scheduled.contains(&o.frame))
        .map(|(i, _)| i)
        .collect();
    if held_out.is_empty() {
        return Err(HarnessError::Config(
            "no labelled held-out frames to evaluate".into(),
        ));
    }
    let truths: Vec<usize> = held_out
        .iter()
        .map(|i| observations[*i].truth.expect("filtered"))
        .collect();
    let pick = |preds: &[FusedPrediction]| -> Vec<FusedPrediction> {
        held_out.iter().map(|i| preds[*i].clone()).collect()
    };
    let bins = inputs.ece_bins;
    let (rows_before, sum_before) = pass_metrics(&pick(&before), &truths, k, bins)?;
    let (rows_after, sum_after) = pass_metrics(&pick(&after), &truths, k, bins)?;

    let rows = kb
        .steps()
        .iter()
        .zip(rows_before.into_iter().zip(rows_after))
        .map(|(s, (b, a))| AsfRow {
            step: s.id.clone(),
            before: b,
            after: a,
        })
        .collect();
    Ok(AsfEvalOutput {
        report: AsfReport {
            seed,
            rows,
            before: sum_before,
            after: sum_after,
            evaluated_frames: held_out.len(),
            frames_without_context: inputs.stream.len() - with_context,
            updates_applied: applied,
            updates_over_budget: over,
            config_echo,
        },
        state,
    })
}
