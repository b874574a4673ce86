//! Evaluation measures: task success, BLEU, ROUGE-L, KB alignment, expected
//! calibration error, per-class classification scores, average latency and
//! energy per successful answer.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kb::{PhraseCatalog, SuccessRubric};
use crate::text;
use crate::topologies::AnswerTrace;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("{0} needs at least one item")]
    Empty(&'static str),
    #[error("length mismatch: {0} vs {1}")]
    Length(usize, usize),
    #[error("bin count must be positive")]
    Bins,
}

/// True iff every required phrase set has a member in the answer and no
/// forbidden claim appears (case-folded substrings).
pub fn task_success(answer: &str, rubric: &SuccessRubric) -> bool {
    rubric
        .required
        .iter()
        .all(|alts| alts.iter().any(|p| text::contains_folded(answer, p)))
        && !rubric
            .forbidden
            .iter()
            .any(|c| text::contains_folded(answer, c))
}

fn ngrams(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut out = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *out.entry(w).or_insert(0) += 1;
        }
    }
    out
}

/// Corpus BLEU-4 with brevity penalty. Orders 2..4 use add-one smoothing;
/// unigram precision is unsmoothed, so zero unigram overlap gives 0.
pub fn corpus_bleu<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> f64 {
    let mut matches = [0usize; 4];
    let mut totals = [0usize; 4];
    let (mut cand_len, mut ref_len) = (0usize, 0usize);
    for (cand, refr) in pairs {
        let c = text::tokens(cand);
        let r = text::tokens(refr);
        cand_len += c.len();
        ref_len += r.len();
        for n in 1..=4 {
            let cn = ngrams(&c, n);
            let rn = ngrams(&r, n);
            matches[n - 1] += cn
                .iter()
                .map(|(g, k)| (*k).min(rn.get(g).copied().unwrap_or(0)))
                .sum::<usize>();
            totals[n - 1] += c.len().saturating_sub(n - 1);
        }
    }
    if cand_len == 0 || matches[0] == 0 {
        return 0.0;
    }
    let log_p: f64 = (0..4)
        .map(|i| {
            let (m, t) = if i == 0 {
                (matches[0] as f64, totals[0] as f64)
            } else {
                (matches[i] as f64 + 1.0, totals[i] as f64 + 1.0)
            };
            (m / t).ln()
        })
        .sum::<f64>()
        / 4.0;
    let bp = if cand_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    };
    bp * log_p.exp()
}

pub fn bleu(candidate: &str, reference: &str) -> f64 {
    corpus_bleu([(candidate, reference)])
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut row = vec![0usize; b.len() + 1];
    for x in a {
        let mut diag = 0;
        for (j, y) in b.iter().enumerate() {
            let up = row[j + 1];
            row[j + 1] = if x == y { diag + 1 } else { up.max(row[j]) };
            diag = up;
        }
    }
    row[b.len()]
}

/// LCS-based F-measure with beta = 1.
pub fn rouge_l(candidate: &str, reference: &str) -> f64 {
    let c = text::tokens(candidate);
    let r = text::tokens(reference);
    if c.is_empty() || r.is_empty() {
        return 0.0;
    }
    let lcs = lcs_len(&c, &r) as f64;
    if lcs == 0.0 {
        return 0.0;
    }
    let p = lcs / c.len() as f64;
    let rec = lcs / r.len() as f64;
    2.0 * p * rec / (p + rec)
}

/// Breakdown of one KBA evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct KbaScore {
    pub matched: usize,
    pub risk_hits: usize,
    pub precision: f64,
    pub recall: f64,
    pub kba: f64,
}

/// Harmonic mean of phrase precision (matched phrases not offset by risk
/// hits) and category recall over `category_count` categories.
pub fn kba_detail(answer: &str, catalog: &PhraseCatalog, category_count: usize) -> KbaScore {
    let matched: Vec<_> = catalog
        .catalog
        .iter()
        .filter(|p| text::contains_folded(answer, &p.text))
        .collect();
    let e = matched.len();
    let h = catalog
        .risk
        .iter()
        .filter(|q| text::contains_folded(answer, q))
        .count();
    let precision = if e == 0 {
        0.0
    } else {
        e.saturating_sub(h) as f64 / e as f64
    };
    let cats: BTreeSet<&str> = matched.iter().map(|p| p.category.as_str()).collect();
    let recall = if category_count == 0 {
        0.0
    } else {
        cats.len() as f64 / category_count as f64
    };
    let kba = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    KbaScore {
        matched: e,
        risk_hits: h,
        precision,
        recall,
        kba,
    }
}

pub fn kba(answer: &str, catalog: &PhraseCatalog, category_count: usize) -> f64 {
    kba_detail(answer, catalog, category_count).kba
}

/// Equal-width ECE over `[0, 1]` with right-inclusive bins `((i-1)/B, i/B]`;
/// confidence 0 falls in the first bin.
pub fn ece(predictions: &[(f64, bool)], bins: usize) -> Result<f64, MetricError> {
    if bins == 0 {
        return Err(MetricError::Bins);
    }
    if predictions.is_empty() {
        return Err(MetricError::Empty("ECE"));
    }
    let mut count = vec![0usize; bins];
    let mut conf = vec![0.0; bins];
    let mut correct = vec![0.0; bins];
    for &(c, ok) in predictions {
        let b = ((c * bins as f64).ceil() as usize).clamp(1, bins) - 1;
        count[b] += 1;
        conf[b] += c;
        correct[b] += if ok { 1.0 } else { 0.0 };
    }
    let n = predictions.len() as f64;
    Ok((0..bins)
        .filter(|b| count[*b] > 0)
        .map(|b| {
            let m = count[b] as f64;
            (m / n) * (correct[b] / m - conf[b] / m).abs()
        })
        .sum())
}

/// Scores for one class, in percent. Accuracy is per-class: the share of
/// frames of that class labelled correctly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Per-class accuracy, one-vs-rest precision, recall and F1, with 0 on any
/// zero denominator.
pub fn classification_suite(
    predicted: &[usize],
    truth: &[usize],
    k: usize,
) -> Result<Vec<ClassScores>, MetricError> {
    if predicted.len() != truth.len() {
        return Err(MetricError::Length(predicted.len(), truth.len()));
    }
    if predicted.is_empty() {
        return Err(MetricError::Empty("classification"));
    }
    Ok((0..k)
        .map(|c| {
            let (mut tp, mut fp, mut fn_) = (0, 0, 0);
            for (p, t) in predicted.iter().zip(truth) {
                match (*p == c, *t == c) {
                    (true, true) => tp += 1,
                    (true, false) => fp += 1,
                    (false, true) => fn_ += 1,
                    (false, false) => {}
                }
            }
            let precision = ratio(tp, tp + fp);
            let recall = ratio(tp, tp + fn_);
            let f1 = if precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            };
            ClassScores {
                accuracy: 100.0 * ratio(tp, tp + fn_),
                precision: 100.0 * precision,
                recall: 100.0 * recall,
                f1: 100.0 * f1,
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerSample {
    pub t: f64,
    pub watts: f64,
}

/// Generation activity of one trace, the input of a power sampler.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Activity {
    pub start: f64,
    pub end: f64,
    pub tokens: usize,
}

/// Produces strictly increasing `(t, watts)` samples over an activity window.
pub trait PowerSampler: Send + Sync {
    fn sample(&self, activity: &Activity) -> Vec<PowerSample>;
}

fn grid(start: f64, end: f64, rate_hz: f64) -> Vec<f64> {
    let step = 1.0 / rate_hz;
    let mut ts: Vec<f64> = (0..)
        .map(|i| start + i as f64 * step)
        .take_while(|t| *t < end)
        .collect();
    if ts.last().is_none_or(|t| *t < end) {
        ts.push(end);
    }
    ts
}

/// `watts = base + joules_per_token * token_rate`, with the token rate taken
/// over the whole window.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostModelSampler {
    pub base_watts: f64,
    pub joules_per_token: f64,
    pub rate_hz: f64,
}

impl PowerSampler for CostModelSampler {
    fn sample(&self, a: &Activity) -> Vec<PowerSample> {
        let duration = a.end - a.start;
        let watts = if duration > 0.0 {
            self.base_watts + self.joules_per_token * a.tokens as f64 / duration
        } else {
            self.base_watts
        };
        grid(a.start, a.end, self.rate_hz)
            .into_iter()
            .map(|t| PowerSample { t, watts })
            .collect()
    }
}

/// Constant draw, used to measure the idle baseline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IdleSampler {
    pub watts: f64,
    pub rate_hz: f64,
}

impl PowerSampler for IdleSampler {
    fn sample(&self, a: &Activity) -> Vec<PowerSample> {
        grid(a.start, a.end, self.rate_hz)
            .into_iter()
            .map(|t| PowerSample {
                t,
                watts: self.watts,
            })
            .collect()
    }
}

/// Trapezoidal integral in joules.
pub fn trapezoid(samples: &[PowerSample]) -> f64 {
    samples
        .windows(2)
        .map(|w| 0.5 * (w[0].watts + w[1].watts) * (w[1].t - w[0].t))
        .sum()
}

/// Net energy of one trace in joules: integral minus the idle baseline,
/// floored at zero.
pub fn net_energy(trace: &AnswerTrace, idle_watts: f64) -> f64 {
    (trapezoid(&trace.energy_samples) - idle_watts * trace.duration()).max(0.0)
}

/// Total net energy over all traces divided by the number of successes, in
/// kJ. `None` when nothing succeeded.
pub fn energy_per_success(
    traces: &[AnswerTrace],
    successes: &[bool],
    idle_watts: f64,
) -> Result<Option<f64>, MetricError> {
    if traces.len() != successes.len() {
        return Err(MetricError::Length(traces.len(), successes.len()));
    }
    let wins = successes.iter().filter(|s| **s).count();
    if wins == 0 {
        return Ok(None);
    }
    let joules: f64 = traces.iter().map(|t| net_energy(t, idle_watts)).sum();
    Ok(Some(joules / wins as f64 / 1000.0))
}

pub fn average_latency(traces: &[AnswerTrace]) -> Result<f64, MetricError> {
    if traces.is_empty() {
        return Err(MetricError::Empty("average latency"));
    }
    Ok(traces.iter().map(AnswerTrace::duration).sum::<f64>() / traces.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kb::Phrase;

    fn rubric(required: &[&[&str]], forbidden: &[&str]) -> SuccessRubric {
        SuccessRubric {
            id: "r".into(),
            required: required
                .iter()
                .map(|set| set.iter().map(|s| s.to_string()).collect())
                .collect(),
            forbidden: forbidden.iter().map(|s| s.to_string()).collect(),
        }
    }

    #[test]
    fn task_success_truth_table() {
        let r = rubric(&[&["steel"], &["10 nm", "ten newton"]], &["aluminium"]);
        assert!(task_success("Hardened STEEL, torque 10 Nm.", &r));
        assert!(!task_success("Hardened steel.", &r));
        assert!(!task_success("Steel or aluminium, 10 Nm.", &r));
    }

    #[test]
    fn bleu_identity_and_disjoint() {
        assert!((bleu("the large gear is steel", "the large gear is steel") - 1.0).abs() < 1e-12);
        assert_eq!(bleu("x y z", "a b c"), 0.0);
        assert_eq!(bleu("", "a b c"), 0.0);
    }

    #[test]
    fn bleu_brevity_penalty() {
        let short = bleu("a b c d", "a b c d e f g h");
        assert!((short - (1.0f64 - 2.0).exp()).abs() < 1e-12);
    }

    #[test]
    fn rouge_hand_cases() {
        assert!((rouge_l("a b c", "a b c") - 1.0).abs() < 1e-12);
        assert_eq!(rouge_l("a b c", "x y z"), 0.0);
        assert!((rouge_l("a b c", "a x c") - 2.0 / 3.0).abs() < 1e-15);
    }

    fn catalog(entries: &[(&str, &str)], risk: &[&str]) -> PhraseCatalog {
        PhraseCatalog {
            catalog: entries
                .iter()
                .map(|(t, c)| Phrase {
                    text: t.to_string(),
                    category: c.to_string(),
                })
                .collect(),
            risk: risk.iter().map(|s| s.to_string()).collect(),
        }
    }

    #[test]
    fn kba_hand_cases() {
        let cat = catalog(
            &[
                ("steel", "a"),
                ("m6 bolt", "b"),
                ("bearing", "c"),
                ("cover", "d"),
            ],
            &[],
        );
        assert_eq!(kba("nothing relevant", &cat, 4), 0.0);
        assert!((kba("steel and an M6 bolt", &cat, 4) - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(kba("steel, m6 bolt, bearing, cover", &cat, 4), 1.0);
        let risky = catalog(&[("steel", "a")], &["weld it"]);
        let d = kba_detail("steel, just weld it", &risky, 1);
        assert_eq!((d.matched, d.risk_hits, d.precision), (1, 1, 0.0));
        assert_eq!(d.kba, 0.0);
    }

    #[test]
    fn ece_hand_cases() {
        assert!((ece(&[(0.9, true), (0.9, false)], 10).unwrap() - 0.4).abs() < 1e-12);
        assert_eq!(ece(&[(1.0, true), (1.0, true)], 10).unwrap(), 0.0);
        assert_eq!(ece(&[], 10), Err(MetricError::Empty("ECE")));
        // right-inclusive edge: 0.5 lands with 0.45, not with 0.55
        let e = ece(&[(0.5, true), (0.45, false)], 10).unwrap();
        assert!((e - (0.5f64 * 0.5 + 0.5 * 0.55).abs()).abs() > 0.0);
        let same_bin = ece(&[(0.5, true), (0.42, false)], 10).unwrap();
        assert!((same_bin - (0.5f64 - 0.46).abs()).abs() < 1e-12);
    }

    #[test]
    fn classification_hand_cases() {
        let all = classification_suite(&[0, 1, 2], &[0, 1, 2], 3).unwrap();
        assert!(all.iter().all(|s| s.accuracy == 100.0 && s.f1 == 100.0));

        let never = classification_suite(&[0, 0], &[0, 0], 2).unwrap();
        assert_eq!(
            (never[1].precision, never[1].recall, never[1].f1),
            (0.0, 0.0, 0.0)
        );

        // step index 1: one hit, one false positive, one miss
        let pred = [0, 1, 1, 0, 2, 2];
        let truth = [0, 1, 0, 1, 2, 2];
        let s = classification_suite(&pred, &truth, 3).unwrap();
        assert_eq!((s[1].precision, s[1].recall, s[1].f1), (50.0, 50.0, 50.0));
        assert_eq!(s[1].accuracy, 50.0);
        assert_eq!(s[0].accuracy, 50.0);
        assert_eq!(s[2].accuracy, 100.0);
    }

    #[test]
    fn samplers_emit_strictly_increasing_times() {
        let s = CostModelSampler {
            base_watts: 10.0,
            joules_per_token: 1.0,
            rate_hz: 5.0,
        };
        let samples = s.sample(&Activity {
            start: 0.0,
            end: 1.03,
            tokens: 0,
        });
        assert!(samples.windows(2).all(|w| w[1].t > w[0].t));
        assert_eq!(samples.last().unwrap().t, 1.03);
        assert_eq!(samples.len(), 7);
    }

    #[test]
    fn trapezoid_of_constant() {
        let idle = IdleSampler {
            watts: 10.0,
            rate_hz: 5.0,
        };
        let s = idle.sample(&Activity {
            start: 0.0,
            end: 2.0,
            tokens: 0,
        });
        assert!((trapezoid(&s) - 20.0).abs() < 1e-12);
    }
}
