//! Detection-stream ingestion and depth-refined object context.
//!
//! Per frame, detections from the last `L` frames are clustered per part by
//! IoU single linkage, each cluster is fused by confidence-weighted averaging,
//! unstable objects are dropped, and the nearest remaining object becomes the
//! focus of the context set.

use std::cmp::Ordering;
use std::collections::{BTreeMap, VecDeque};
use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PerceptionError {
    #[error("cluster is empty")]
    EmptyCluster,
    #[error("cluster confidences sum to zero; weighting is undefined")]
    ZeroConfidence,
    #[error("invalid detection: {0}")]
    InvalidDetection(String),
    #[error("stream line {line}: {reason}")]
    Stream { line: usize, reason: String },
    #[error("cannot read stream {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Axis-aligned box in pixels, `x1 < x2`, `y1 < y2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl From<[f64; 4]> for BBox {
    fn from([x1, y1, x2, y2]: [f64; 4]) -> Self {
        Self { x1, y1, x2, y2 }
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        [b.x1, b.y1, b.x2, b.y2]
    }
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self { x1, y1, x2, y2 }
    }

    pub fn area(&self) -> f64 {
        (self.x2 - self.x1).max(0.0) * (self.y2 - self.y1).max(0.0)
    }

    pub fn center(&self) -> [f64; 2] {
        [(self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0]
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let iw = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(0.0);
        let ih = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(0.0);
        let inter = iw * ih;
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    fn is_well_ordered(&self) -> bool {
        self.x1 < self.x2 && self.y1 < self.y2
    }

    fn key_cmp(&self, other: &BBox) -> Ordering {
        self.x1
            .total_cmp(&other.x1)
            .then(self.y1.total_cmp(&other.y1))
            .then(self.x2.total_cmp(&other.x2))
            .then(self.y2.total_cmp(&other.y2))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(default, skip_serializing)]
    pub frame: u64,
    pub part: String,
    pub bbox: BBox,
    #[serde(rename = "conf")]
    pub confidence: f64,
    pub depth: f64,
    /// Falls back to the box center when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub centroid: Option<[f64; 2]>,
}

impl Detection {
    pub fn validate(&self) -> Result<(), PerceptionError> {
        if !(0.0..=1.0).contains(&self.confidence) {
            return Err(PerceptionError::InvalidDetection(format!(
                "{}: confidence {} outside [0, 1]",
                self.part, self.confidence
            )));
        }
        if !self.bbox.is_well_ordered() {
            return Err(PerceptionError::InvalidDetection(format!(
                "{}: box {:?} is not well ordered",
                self.part, self.bbox
            )));
        }
        if !(self.depth >= 0.0) {
            return Err(PerceptionError::InvalidDetection(format!(
                "{}: negative depth {}",
                self.part, self.depth
            )));
        }
        Ok(())
    }

    fn key_cmp(&self, other: &Detection) -> Ordering {
        self.frame
            .cmp(&other.frame)
            .then_with(|| self.bbox.key_cmp(&other.bbox))
            .then(self.confidence.total_cmp(&other.confidence))
            .then(self.depth.total_cmp(&other.depth))
    }
}

/// Same-part detections linked by IoU, sorted by (frame, box, confidence).
#[derive(Debug, Clone, PartialEq)]
pub struct Cluster {
    pub part: String,
    pub members: Vec<Detection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusedObject {
    pub part: String,
    pub bbox: BBox,
    pub confidence: f64,
    pub depth: f64,
    pub centroid: [f64; 2],
    pub support: usize,
    /// Consecutive frames, ending at `last_frame`, in which the cluster has a member.
    pub persistence: usize,
    pub last_frame: u64,
}

impl FusedObject {
    fn focus_cmp(&self, other: &FusedObject) -> Ordering {
        self.depth
            .total_cmp(&other.depth)
            .then(other.confidence.total_cmp(&self.confidence))
            .then_with(|| self.part.cmp(&other.part))
            .then_with(|| self.bbox.key_cmp(&other.bbox))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContextSet {
    pub focus: FusedObject,
    /// Includes the focus; ordered by (part, depth, box).
    pub members: Vec<FusedObject>,
    pub counts: BTreeMap<String, u32>,
}

impl ContextSet {
    pub fn count(&self, part: &str) -> u32 {
        self.counts.get(part).copied().unwrap_or(0)
    }
}

/// Single-linkage clustering within each part id: a detection joins a
/// cluster iff its IoU with at least one member is `>= tau_iou`.
pub fn cluster_window(detections: &[Detection], tau_iou: f64) -> Vec<Cluster> {
    let mut by_part: BTreeMap<&str, Vec<&Detection>> = BTreeMap::new();
    for d in detections {
        by_part.entry(d.part.as_str()).or_default().push(d);
    }

    let mut clusters = Vec::new();
    for (part, mut dets) in by_part {
        dets.sort_by(|a, b| a.key_cmp(b));
        let mut parent: Vec<usize> = (0..dets.len()).collect();
        for i in 0..dets.len() {
            for j in (i + 1)..dets.len() {
                if dets[i].bbox.iou(&dets[j].bbox) >= tau_iou {
                    let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
                    if ri != rj {
                        parent[ri.max(rj)] = ri.min(rj);
                    }
                }
            }
        }
        let mut groups: BTreeMap<usize, Vec<Detection>> = BTreeMap::new();
        for (i, d) in dets.iter().enumerate() {
            let root = find(&mut parent, i);
            groups.entry(root).or_default().push((*d).clone());
        }
        // roots are the smallest sorted index of each group, so BTreeMap
        // order is (earliest frame, box) within the part
        clusters.extend(groups.into_values().map(|members| Cluster {
            part: part.to_string(),
            members,
        }));
    }
    clusters
}

fn find(parent: &mut [usize], mut i: usize) -> usize {
    while parent[i] != i {
        parent[i] = parent[parent[i]];
        i = parent[i];
    }
    i
}

/// Confidence-weighted box average; the fused confidence is the plain mean.
pub fn fuse_cluster(cluster: &Cluster) -> Result<FusedObject, PerceptionError> {
    let m = cluster.members.len();
    if m == 0 {
        return Err(PerceptionError::EmptyCluster);
    }
    let mut members: Vec<&Detection> = cluster.members.iter().collect();
    members.sort_by(|a, b| a.key_cmp(b));

    let weight: f64 = members.iter().map(|d| d.confidence).sum();
    if weight <= 0.0 {
        return Err(PerceptionError::ZeroConfidence);
    }
    // Normalised weights keep a lone member bit-exact.
    let mut acc = [0.0; 4];
    for d in &members {
        let w = d.confidence / weight;
        let b: [f64; 4] = d.bbox.into();
        for (a, v) in acc.iter_mut().zip(b) {
            *a += w * v;
        }
    }
    let bbox = BBox::from(acc);
    let depth = members.iter().map(|d| d.depth).sum::<f64>() / m as f64;

    let mut frames: Vec<u64> = members.iter().map(|d| d.frame).collect();
    frames.dedup();
    let last_frame = *frames.last().expect("non-empty");
    let persistence = 1 + frames
        .windows(2)
        .rev()
        .take_while(|w| w[1] == w[0] + 1)
        .count();

    Ok(FusedObject {
        part: cluster.part.clone(),
        bbox,
        confidence: weight / m as f64,
        depth,
        centroid: bbox.center(),
        support: m,
        persistence,
        last_frame,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StabilityParams {
    pub min_support: usize,
    pub min_persistence: usize,
    pub conf_floor: f64,
}

impl Default for StabilityParams {
    fn default() -> Self {
        Self {
            min_support: 3,
            min_persistence: 5,
            conf_floor: 0.4,
        }
    }
}

/// Keeps objects with enough support, confidence and consecutive-frame
/// persistence. When `current_frame` is given, objects must also be present in
/// that frame.
pub fn stable_objects(
    objects: &[FusedObject],
    current_frame: Option<u64>,
    params: &StabilityParams,
) -> Vec<FusedObject> {
    objects
        .iter()
        .filter(|o| {
            o.support >= params.min_support
                && o.confidence >= params.conf_floor
                && o.persistence >= params.min_persistence
                && current_frame.is_none_or(|f| o.last_frame == f)
        })
        .cloned()
        .collect()
}

/// Picks the nearest object as focus and keeps every object within `tau_p`
/// pixels and `tau_d` depth units of it (both inclusive). `None` means there
/// is no context for this frame.
pub fn select_context(objects: &[FusedObject], tau_p: f64, tau_d: f64) -> Option<ContextSet> {
    let focus = objects.iter().min_by(|a, b| a.focus_cmp(b))?.clone();
    let mut members: Vec<FusedObject> = objects
        .iter()
        .filter(|o| {
            let dx = o.centroid[0] - focus.centroid[0];
            let dy = o.centroid[1] - focus.centroid[1];
            dx.hypot(dy) <= tau_p && (o.depth - focus.depth).abs() <= tau_d
        })
        .cloned()
        .collect();
    members.sort_by(|a, b| a.part.cmp(&b.part).then_with(|| a.focus_cmp(b)));
    let mut counts = BTreeMap::new();
    for o in &members {
        *counts.entry(o.part.clone()).or_insert(0) += 1;
    }
    Some(ContextSet {
        focus,
        members,
        counts,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PerceptionParams {
    pub tau_iou: f64,
    /// Sliding window length L in frames.
    pub window: usize,
    pub tau_p: f64,
    pub tau_d: f64,
    #[serde(flatten)]
    pub stability: StabilityParams,
}

impl Default for PerceptionParams {
    fn default() -> Self {
        Self {
            tau_iou: 0.5,
            window: 5,
            tau_p: 300.0,
            tau_d: 0.5,
            stability: StabilityParams::default(),
        }
    }
}

/// One line of a detection stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamRecord {
    pub frame: u64,
    /// Recording segment; step tracking restarts at segment boundaries.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub segment: Option<String>,
    /// Annotated ground-truth step id.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding: Option<Vec<f64>>,
    #[serde(default)]
    pub detections: Vec<Detection>,
}

pub fn parse_stream_line(line: &str, line_no: usize) -> Result<StreamRecord, PerceptionError> {
    let mut rec: StreamRecord =
        serde_json::from_str(line).map_err(|e| PerceptionError::Stream {
            line: line_no,
            reason: e.to_string(),
        })?;
    for d in &mut rec.detections {
        d.frame = rec.frame;
        d.validate().map_err(|e| PerceptionError::Stream {
            line: line_no,
            reason: e.to_string(),
        })?;
    }
    Ok(rec)
}

pub fn read_stream(reader: impl BufRead) -> Result<Vec<StreamRecord>, PerceptionError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| PerceptionError::Stream {
            line: i + 1,
            reason: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse_stream_line(&line, i + 1)?);
    }
    Ok(out)
}

pub fn load_stream(path: impl AsRef<Path>) -> Result<Vec<StreamRecord>, PerceptionError> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|source| PerceptionError::Io {
        path: path.display().to_string(),
        source,
    })?;
    read_stream(std::io::BufReader::new(file))
}

/// Sliding-window context extractor. Single writer: feed frames in order.
#[derive(Debug, Clone)]
pub struct ContextTracker {
    params: PerceptionParams,
    window: VecDeque<(u64, Vec<Detection>)>,
}

impl ContextTracker {
    pub fn new(params: PerceptionParams) -> Self {
        Self {
            params,
            window: VecDeque::new(),
        }
    }

    pub fn reset(&mut self) {
        self.window.clear();
    }

    /// Adds one frame and returns the context for it, if any object is stable.
    pub fn push(&mut self, frame: u64, detections: &[Detection]) -> Option<ContextSet> {
        let span = self.params.window.max(1) as u64;
        self.window.push_back((frame, detections.to_vec()));
        while self
            .window
            .front()
            .is_some_and(|(f, _)| frame.saturating_sub(*f) >= span)
        {
            self.window.pop_front();
        }
        let dets: Vec<Detection> = self
            .window
            .iter()
            .flat_map(|(_, d)| d.iter().cloned())
            .collect();
        let fused: Vec<FusedObject> = cluster_window(&dets, self.params.tau_iou)
            .iter()
            .filter_map(|c| fuse_cluster(c).ok())
            .collect();
        let stable = stable_objects(&fused, Some(frame), &self.params.stability);
        select_context(&stable, self.params.tau_p, self.params.tau_d)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(frame: u64, part: &str, b: [f64; 4], conf: f64, depth: f64) -> Detection {
        Detection {
            frame,
            part: part.into(),
            bbox: b.into(),
            confidence: conf,
            depth,
            centroid: None,
        }
    }

    fn obj(part: &str, center: [f64; 2], depth: f64, conf: f64) -> FusedObject {
        FusedObject {
            part: part.into(),
            bbox: BBox::new(
                center[0] - 5.0,
                center[1] - 5.0,
                center[0] + 5.0,
                center[1] + 5.0,
            ),
            confidence: conf,
            depth,
            centroid: center,
            support: 3,
            persistence: 5,
            last_frame: 0,
        }
    }

    #[test]
    fn identical_boxes_form_one_cluster() {
        let b = [0.0, 0.0, 10.0, 10.0];
        let c = cluster_window(&[det(0, "p", b, 0.9, 1.0), det(1, "p", b, 0.8, 1.0)], 0.5);
        assert_eq!(c.len(), 1);
        assert_eq!(c[0].members.len(), 2);
    }

    #[test]
    fn disjoint_boxes_stay_apart() {
        let c = cluster_window(
            &[
                det(0, "p", [0.0, 0.0, 10.0, 10.0], 0.9, 1.0),
                det(0, "p", [20.0, 20.0, 30.0, 30.0], 0.9, 1.0),
            ],
            0.5,
        );
        assert_eq!(c.len(), 2);
    }

    #[test]
    fn iou_threshold_is_inclusive() {
        let a = BBox::new(0.0, 0.0, 10.0, 10.0);
        let b = BBox::new(0.0, 0.0, 10.0, 20.0);
        assert_eq!(a.iou(&b), 0.5);
        let c = cluster_window(
            &[
                det(0, "p", a.into(), 0.9, 1.0),
                det(0, "p", b.into(), 0.9, 1.0),
            ],
            0.5,
        );
        assert_eq!(c.len(), 1);
    }

    #[test]
    fn different_parts_never_cluster() {
        let b = [0.0, 0.0, 10.0, 10.0];
        let c = cluster_window(&[det(0, "a", b, 0.9, 1.0), det(0, "b", b, 0.9, 1.0)], 0.5);
        assert_eq!(c.len(), 2);
        assert_eq!(c[0].part, "a");
    }

    #[test]
    fn empty_window_gives_no_clusters() {
        assert!(cluster_window(&[], 0.5).is_empty());
    }

    #[test]
    fn single_member_fuses_to_itself() {
        let c = Cluster {
            part: "p".into(),
            members: vec![det(3, "p", [1.0, 2.0, 3.0, 4.0], 0.7, 2.0)],
        };
        let f = fuse_cluster(&c).unwrap();
        assert_eq!(f.bbox, BBox::new(1.0, 2.0, 3.0, 4.0));
        assert_eq!(f.confidence, 0.7);
        assert_eq!(f.support, 1);
        assert_eq!(f.persistence, 1);
    }

    #[test]
    fn equal_weights_average_boxes() {
        let c = Cluster {
            part: "p".into(),
            members: vec![
                det(0, "p", [0.0, 0.0, 10.0, 10.0], 0.5, 1.0),
                det(1, "p", [0.0, 0.0, 20.0, 20.0], 0.5, 2.0),
            ],
        };
        let f = fuse_cluster(&c).unwrap();
        assert_eq!(f.bbox, BBox::new(0.0, 0.0, 15.0, 15.0));
        assert_eq!(f.confidence, 0.5);
        assert_eq!(f.depth, 1.5);
        assert_eq!(f.persistence, 2);
    }

    #[test]
    fn skewed_weights_hand_case() {
        let c = Cluster {
            part: "p".into(),
            members: vec![
                det(0, "p", [0.0, 0.0, 10.0, 10.0], 0.9, 1.0),
                det(0, "p", [0.0, 0.0, 20.0, 20.0], 0.1, 1.0),
            ],
        };
        let f = fuse_cluster(&c).unwrap();
        assert!((f.bbox.x2 - 11.0).abs() < 1e-12);
        assert!((f.bbox.y2 - 11.0).abs() < 1e-12);
        assert_eq!(f.bbox.x1, 0.0);
        assert!((f.confidence - 0.5).abs() < 1e-12);
    }

    #[test]
    fn zero_confidence_cluster_is_an_error() {
        let c = Cluster {
            part: "p".into(),
            members: vec![det(0, "p", [0.0, 0.0, 1.0, 1.0], 0.0, 1.0)],
        };
        assert!(matches!(
            fuse_cluster(&c),
            Err(PerceptionError::ZeroConfidence)
        ));
        let empty = Cluster {
            part: "p".into(),
            members: vec![],
        };
        assert!(matches!(
            fuse_cluster(&empty),
            Err(PerceptionError::EmptyCluster)
        ));
    }

    #[test]
    fn persistence_counts_trailing_run() {
        let b = [0.0, 0.0, 10.0, 10.0];
        let c = Cluster {
            part: "p".into(),
            members: [0, 2, 3, 4]
                .iter()
                .map(|f| det(*f, "p", b, 0.9, 1.0))
                .collect(),
        };
        let f = fuse_cluster(&c).unwrap();
        assert_eq!(f.persistence, 3);
        assert_eq!(f.last_frame, 4);
    }

    #[test]
    fn single_object_context() {
        let ctx = select_context(&[obj("a", [0.0, 0.0], 1.0, 0.9)], 300.0, 0.5).unwrap();
        assert_eq!(ctx.focus.part, "a");
        assert_eq!(ctx.members.len(), 1);
        assert_eq!(ctx.count("a"), 1);
    }

    #[test]
    fn depth_boundary_is_inclusive() {
        let objs = [
            obj("a", [0.0, 0.0], 1.0, 0.9),
            obj("b", [0.0, 0.0], 1.5, 0.9),
        ];
        let ctx = select_context(&objs, 300.0, 0.5).unwrap();
        assert_eq!(ctx.members.len(), 2);
    }

    #[test]
    fn depth_threshold_hand_case() {
        let objs = [
            obj("c", [10.0, 0.0], 5.0, 0.9),
            obj("a", [0.0, 0.0], 1.0, 0.9),
            obj("b", [0.0, 10.0], 1.2, 0.9),
        ];
        let ctx = select_context(&objs, 300.0, 0.5).unwrap();
        let parts: Vec<_> = ctx.members.iter().map(|o| o.part.as_str()).collect();
        assert_eq!(parts, ["a", "b"]);
        assert_eq!(ctx.count("c"), 0);
    }

    #[test]
    fn focus_ties_prefer_confidence_then_part() {
        let objs = [
            obj("b", [0.0, 0.0], 1.0, 0.9),
            obj("a", [0.0, 0.0], 1.0, 0.8),
            obj("c", [0.0, 0.0], 1.0, 0.9),
        ];
        assert_eq!(select_context(&objs, 1.0, 0.1).unwrap().focus.part, "b");
    }

    #[test]
    fn no_objects_no_context() {
        assert!(select_context(&[], 300.0, 0.5).is_none());
    }

    #[test]
    fn stability_thresholds() {
        let p = StabilityParams::default();
        let mut o = obj("a", [0.0, 0.0], 1.0, 0.5);
        assert_eq!(stable_objects(&[o.clone()], None, &p).len(), 1);
        o.persistence = 4;
        assert!(stable_objects(&[o.clone()], None, &p).is_empty());
        o.persistence = 5;
        o.support = 2;
        assert!(stable_objects(&[o.clone()], None, &p).is_empty());
        o.support = 3;
        o.confidence = 0.39;
        assert!(stable_objects(&[o], None, &p).is_empty());
    }

    #[test]
    fn stale_objects_are_dropped() {
        let o = obj("a", [0.0, 0.0], 1.0, 0.5);
        assert!(stable_objects(&[o], Some(1), &StabilityParams::default()).is_empty());
    }

    #[test]
    fn tracker_needs_t_consecutive_frames() {
        let mut tracker = ContextTracker::new(PerceptionParams::default());
        let d = |f| vec![det(f, "housing", [100.0, 100.0, 200.0, 200.0], 0.9, 1.0)];
        for f in 0..4 {
            assert!(tracker.push(f, &d(f)).is_none(), "frame {f}");
        }
        let ctx = tracker.push(4, &d(4)).expect("stable after five frames");
        assert_eq!(ctx.count("housing"), 1);
        // a gap resets persistence
        assert!(tracker.push(5, &[]).is_none());
        assert!(tracker.push(6, &d(6)).is_none());
    }

    #[test]
    fn stream_line_parses_and_validates() {
        let line = r#"{"frame":7,"truth":"S2","embedding":[1,0],"detections":[{"part":"gear","bbox":[0,0,10,10],"conf":0.8,"depth":1.5}]}"#;
        let rec = parse_stream_line(line, 1).unwrap();
        assert_eq!(rec.detections[0].frame, 7);
        assert_eq!(rec.truth.as_deref(), Some("S2"));

        let bad =
            r#"{"frame":1,"detections":[{"part":"g","bbox":[10,0,0,10],"conf":0.8,"depth":1}]}"#;
        assert!(matches!(
            parse_stream_line(bad, 3),
            Err(PerceptionError::Stream { line: 3, .. })
        ));
    }
}
