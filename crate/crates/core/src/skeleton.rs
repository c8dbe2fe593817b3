//! Keypoint sequences: the 18-joint layout, the line-delimited file format,
//! coordinate normalization and repair of low-confidence detections.
//!
//! # File format
//!
//! A keypoint file is JSON Lines. The first record carries sequence metadata,
//! every following record one frame:
//!
//! ```text
//! {"record":"meta","fps":30.0,"frame_width":640.0,"frame_height":480.0,"subject_id":"s01","video_id":"v01","site_id":"a","label":"ataxic","severity":2}
//! {"record":"frame","frame_index":0,"keypoints":[[x,y,c], ... 18 triples ...]}
//! ```
//!
//! `label` (`healthy` | `ataxic`), `severity` (0..=3) and `sara_gait_score`
//! (0..=8, grouped into a severity when `severity` is absent) are optional.
//! `coordinates` is `pixels` (default) or `normalized`.

use std::collections::VecDeque;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const JOINT_COUNT: usize = 18;

pub const JOINT_NAMES: [&str; JOINT_COUNT] = [
    "nose",
    "neck",
    "right_shoulder",
    "right_elbow",
    "right_wrist",
    "left_shoulder",
    "left_elbow",
    "left_wrist",
    "right_hip",
    "right_knee",
    "right_ankle",
    "left_hip",
    "left_knee",
    "left_ankle",
    "right_eye",
    "left_eye",
    "right_ear",
    "left_ear",
];

pub const LEFT_ANKLE: usize = 13;
pub const RIGHT_ANKLE: usize = 10;

/// Limb connections of the 18-joint pose estimator output.
pub const LIMBS: [(usize, usize); 17] = [
    (4, 3),
    (3, 2),
    (7, 6),
    (6, 5),
    (13, 12),
    (12, 11),
    (10, 9),
    (9, 8),
    (11, 5),
    (8, 2),
    (5, 1),
    (2, 1),
    (0, 1),
    (15, 0),
    (14, 0),
    (17, 15),
    (16, 14),
];

/// Skeleton topology: joint names plus a tree of limb edges.
///
/// The graph compiler works on any tree, so small layouts are allowed for
/// tests; only the 18-joint layout carries ankle indices.
#[derive(Debug, Clone, PartialEq)]
pub struct SkeletonLayout {
    joint_names: Vec<String>,
    edges: Vec<(usize, usize)>,
    ankles: Option<(usize, usize)>,
}

impl SkeletonLayout {
    pub fn openpose18() -> Self {
        Self::with_ankles(
            JOINT_NAMES.iter().map(|s| s.to_string()).collect(),
            LIMBS.to_vec(),
            LEFT_ANKLE,
            RIGHT_ANKLE,
        )
        .expect("built-in layout is a valid tree")
    }

    /// A layout without ankle designations.
    pub fn tree(joint_names: Vec<String>, edges: Vec<(usize, usize)>) -> Result<Self> {
        validate_tree(joint_names.len(), &edges)?;
        Ok(Self {
            joint_names,
            edges,
            ankles: None,
        })
    }

    pub fn with_ankles(
        joint_names: Vec<String>,
        edges: Vec<(usize, usize)>,
        left_ankle: usize,
        right_ankle: usize,
    ) -> Result<Self> {
        let n = joint_names.len();
        validate_tree(n, &edges)?;
        for idx in [left_ankle, right_ankle] {
            if idx >= n {
                return Err(Error::JointIndex { index: idx, len: n });
            }
        }
        if left_ankle == right_ankle {
            return Err(Error::Validation(
                "left and right ankle must be distinct joints".into(),
            ));
        }
        Ok(Self {
            joint_names,
            edges,
            ankles: Some((left_ankle, right_ankle)),
        })
    }

    pub fn joint_count(&self) -> usize {
        self.joint_names.len()
    }

    pub fn joint_names(&self) -> &[String] {
        &self.joint_names
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    /// `(left, right)` ankle joint indices.
    pub fn ankles(&self) -> Option<(usize, usize)> {
        self.ankles
    }

    pub fn neighbors(&self, joint: usize) -> impl Iterator<Item = usize> + '_ {
        self.edges.iter().filter_map(move |&(a, b)| {
            if a == joint {
                Some(b)
            } else if b == joint {
                Some(a)
            } else {
                None
            }
        })
    }

    /// All-pairs shortest path lengths (hop counts) by breadth-first search.
    pub fn hop_distances(&self) -> Vec<Vec<usize>> {
        let n = self.joint_count();
        (0..n)
            .map(|src| {
                let mut dist = vec![usize::MAX; n];
                dist[src] = 0;
                let mut queue = VecDeque::from([src]);
                while let Some(u) = queue.pop_front() {
                    for v in self.neighbors(u) {
                        if dist[v] == usize::MAX {
                            dist[v] = dist[u] + 1;
                            queue.push_back(v);
                        }
                    }
                }
                dist
            })
            .collect()
    }
}

fn validate_tree(n: usize, edges: &[(usize, usize)]) -> Result<()> {
    if n == 0 {
        return Err(Error::Validation("layout has no joints".into()));
    }
    if edges.len() != n - 1 {
        return Err(Error::Validation(format!(
            "a tree over {n} joints needs {} edges, got {}",
            n - 1,
            edges.len()
        )));
    }
    // union-find; a cycle or a disconnected part shows up as a redundant edge
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    for &(a, b) in edges {
        for idx in [a, b] {
            if idx >= n {
                return Err(Error::JointIndex { index: idx, len: n });
            }
        }
        if a == b {
            return Err(Error::Validation(format!("self-loop on joint {a}")));
        }
        let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
        if ra == rb {
            return Err(Error::Validation(format!(
                "edge ({a}, {b}) closes a cycle"
            )));
        }
        parent[ra] = rb;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    pub confidence: f64,
}

impl Keypoint {
    pub fn new(x: f64, y: f64, confidence: f64) -> Self {
        Self { x, y, confidence }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SkeletonFrame {
    pub frame_index: u64,
    pub keypoints: [Keypoint; JOINT_COUNT],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GaitLabel {
    Healthy,
    Ataxic,
}

impl GaitLabel {
    /// Class index used by the classifier; ataxic is the positive class.
    pub fn class_index(self) -> usize {
        match self {
            GaitLabel::Healthy => 0,
            GaitLabel::Ataxic => 1,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            GaitLabel::Healthy => "healthy",
            GaitLabel::Ataxic => "ataxic",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "healthy" => Ok(GaitLabel::Healthy),
            "ataxic" => Ok(GaitLabel::Ataxic),
            other => Err(Error::Validation(format!("unknown label `{other}`"))),
        }
    }
}

/// Groups a SARA gait item score (0..=8) into the four severity levels used
/// for regression: scores of 3 and above collapse to 3.
pub fn severity_group(sara_gait_score: u8) -> u8 {
    sara_gait_score.min(3)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CoordinateSpace {
    #[default]
    Pixels,
    Normalized,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceMeta {
    pub fps: f64,
    pub frame_width: f64,
    pub frame_height: f64,
    #[serde(default)]
    pub subject_id: String,
    pub video_id: String,
    #[serde(default)]
    pub site_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<GaitLabel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub severity: Option<u8>,
    #[serde(default)]
    pub coordinates: CoordinateSpace,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SkeletonSequence {
    pub meta: SequenceMeta,
    pub frames: Vec<SkeletonFrame>,
}

impl SkeletonSequence {
    /// Checks every sequence invariant.
    pub fn validate(&self) -> Result<()> {
        let m = &self.meta;
        if !(m.fps.is_finite() && m.fps > 0.0) {
            return Err(Error::Validation(format!("fps must be positive, got {}", m.fps)));
        }
        if self.frames.len() < 2 {
            return Err(Error::Validation(format!(
                "a sequence needs at least 2 frames, got {}",
                self.frames.len()
            )));
        }
        match (m.label, m.severity) {
            (None, Some(_)) => {
                return Err(Error::Validation("severity given without a label".into()))
            }
            (Some(GaitLabel::Healthy), Some(s)) if s != 0 => {
                return Err(Error::Validation(format!(
                    "healthy sequence with severity {s}"
                )))
            }
            (_, Some(s)) if s > 3 => {
                return Err(Error::Validation(format!("severity {s} outside 0..=3")))
            }
            _ => {}
        }
        for pair in self.frames.windows(2) {
            if pair[1].frame_index <= pair[0].frame_index {
                return Err(Error::Ordering {
                    previous: pair[0].frame_index,
                    current: pair[1].frame_index,
                });
            }
        }
        for (f, frame) in self.frames.iter().enumerate() {
            for (j, kp) in frame.keypoints.iter().enumerate() {
                if !(kp.x.is_finite() && kp.y.is_finite()) {
                    return Err(Error::Validation(format!(
                        "non-finite coordinate at frame {f}, joint {j}"
                    )));
                }
                if !(0.0..=1.0).contains(&kp.confidence) {
                    return Err(Error::Validation(format!(
                        "confidence {} outside [0, 1] at frame {f}, joint {j}",
                        kp.confidence
                    )));
                }
            }
        }
        Ok(())
    }

    /// Severity with the healthy default filled in.
    pub fn severity_or_default(&self) -> Option<u8> {
        match (self.meta.label, self.meta.severity) {
            (_, Some(s)) => Some(s),
            (Some(GaitLabel::Healthy), None) => Some(0),
            _ => None,
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "lowercase")]
enum Record {
    Meta(MetaRecord),
    Frame(FrameRecord),
}

#[derive(Serialize, Deserialize)]
struct MetaRecord {
    #[serde(flatten)]
    meta: SequenceMeta,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    sara_gait_score: Option<u8>,
}

#[derive(Serialize, Deserialize)]
struct FrameRecord {
    frame_index: u64,
    keypoints: Vec<[f64; 3]>,
}

pub fn parse_sequence(path: impl AsRef<Path>) -> Result<SkeletonSequence> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::from(e).in_file(path))?;
    read_sequence(file).map_err(|e| e.in_file(path))
}

pub fn read_sequence(reader: impl Read) -> Result<SkeletonSequence> {
    let mut meta: Option<SequenceMeta> = None;
    let mut frames = Vec::new();
    for (i, line) in BufReader::new(reader).lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: Record = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        match record {
            Record::Meta(m) => {
                if meta.is_some() {
                    return Err(Error::Parse {
                        line: line_no,
                        message: "duplicate meta record".into(),
                    });
                }
                let mut seq_meta = m.meta;
                if seq_meta.severity.is_none() {
                    seq_meta.severity = m.sara_gait_score.map(severity_group);
                }
                meta = Some(seq_meta);
            }
            Record::Frame(f) => {
                if meta.is_none() {
                    return Err(Error::Parse {
                        line: line_no,
                        message: "frame record before meta record".into(),
                    });
                }
                if f.keypoints.len() != JOINT_COUNT {
                    return Err(Error::Schema {
                        frame: frames.len(),
                        expected: JOINT_COUNT,
                        found: f.keypoints.len(),
                    });
                }
                let mut keypoints = [Keypoint::default(); JOINT_COUNT];
                for (kp, [x, y, c]) in keypoints.iter_mut().zip(f.keypoints) {
                    *kp = Keypoint::new(x, y, c);
                }
                frames.push(SkeletonFrame {
                    frame_index: f.frame_index,
                    keypoints,
                });
            }
        }
    }
    let meta = meta.ok_or_else(|| Error::Parse {
        line: 1,
        message: "missing meta record".into(),
    })?;
    let seq = SkeletonSequence { meta, frames };
    seq.validate()?;
    Ok(seq)
}

pub fn write_sequence(seq: &SkeletonSequence, writer: impl Write) -> Result<()> {
    let mut w = BufWriter::new(writer);
    let meta = Record::Meta(MetaRecord {
        meta: seq.meta.clone(),
        sara_gait_score: None,
    });
    serde_json::to_writer(&mut w, &meta).map_err(std::io::Error::from)?;
    w.write_all(b"\n")?;
    for frame in &seq.frames {
        let rec = Record::Frame(FrameRecord {
            frame_index: frame.frame_index,
            keypoints: frame
                .keypoints
                .iter()
                .map(|k| [k.x, k.y, k.confidence])
                .collect(),
        });
        serde_json::to_writer(&mut w, &rec).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_sequence(seq: &SkeletonSequence, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::from(e).in_file(path))?;
    write_sequence(seq, file)
}

/// Maps pixel coordinates to `[-1, 1]` using the frame dimensions.
pub fn normalize_coordinates(seq: &SkeletonSequence) -> Result<SkeletonSequence> {
    let (w, h) = (seq.meta.frame_width, seq.meta.frame_height);
    if !(w > 0.0 && h > 0.0 && w.is_finite() && h.is_finite()) {
        return Err(Error::Validation(format!(
            "frame dimensions must be positive, got {w}x{h}"
        )));
    }
    if seq.meta.coordinates == CoordinateSpace::Normalized {
        return Err(Error::Validation("sequence is already normalized".into()));
    }
    let mut out = seq.clone();
    for frame in &mut out.frames {
        for kp in &mut frame.keypoints {
            kp.x = 2.0 * kp.x / w - 1.0;
            kp.y = 2.0 * kp.y / h - 1.0;
        }
    }
    out.meta.coordinates = CoordinateSpace::Normalized;
    Ok(out)
}

/// Replaces keypoints whose confidence is below `threshold` by linear
/// interpolation in time between the nearest valid observations of the same
/// joint, holding the first/last valid value at the sequence ends.
pub fn mask_low_confidence(seq: &SkeletonSequence, threshold: f64) -> Result<SkeletonSequence> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::Parameter(format!(
            "confidence threshold {threshold} outside [0, 1]"
        )));
    }
    let mut out = seq.clone();
    let times: Vec<f64> = seq.frames.iter().map(|f| f.frame_index as f64).collect();
    for joint in 0..JOINT_COUNT {
        let valid: Vec<usize> = seq
            .frames
            .iter()
            .enumerate()
            .filter(|(_, f)| f.keypoints[joint].confidence >= threshold)
            .map(|(i, _)| i)
            .collect();
        if valid.is_empty() {
            return Err(Error::UnusableJoint { joint });
        }
        if valid.len() == seq.frames.len() {
            continue;
        }
        let mut next = 0usize; // position in `valid` of the first valid index >= t
        for t in 0..seq.frames.len() {
            while next < valid.len() && valid[next] < t {
                next += 1;
            }
            if next < valid.len() && valid[next] == t {
                continue;
            }
            let src = |i: usize| seq.frames[i].keypoints[joint];
            let (x, y) = match (next.checked_sub(1).map(|p| valid[p]), valid.get(next)) {
                (Some(a), Some(&b)) => {
                    let w = (times[t] - times[a]) / (times[b] - times[a]);
                    let (ka, kb) = (src(a), src(b));
                    (ka.x + w * (kb.x - ka.x), ka.y + w * (kb.y - ka.y))
                }
                (Some(a), None) => (src(a).x, src(a).y),
                (None, Some(&b)) => (src(b).x, src(b).y),
                (None, None) => unreachable!("valid is non-empty"),
            };
            let kp = &mut out.frames[t].keypoints[joint];
            kp.x = x;
            kp.y = y;
        }
    }
    Ok(out)
}

/// One row of a dataset manifest (CSV with a header row).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub video_id: String,
    #[serde(default)]
    pub subject_id: String,
    pub label: GaitLabel,
    pub severity: u8,
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let path = path.as_ref();
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::from(e).in_file(path))?;
    let base = path.parent().unwrap_or_else(|| Path::new(""));
    let mut rows = Vec::new();
    for row in reader.deserialize() {
        let mut entry: ManifestEntry = row.map_err(|e| Error::from(e).in_file(path))?;
        if entry.path.is_relative() {
            entry.path = base.join(&entry.path);
        }
        rows.push(entry);
    }
    Ok(rows)
}

/// Writes manifest rows; paths are written as given.
pub fn write_manifest(path: impl AsRef<Path>, rows: &[ManifestEntry]) -> Result<()> {
    let path = path.as_ref();
    let mut writer = csv::Writer::from_path(path).map_err(|e| Error::from(e).in_file(path))?;
    for row in rows {
        writer.serialize(row)?;
    }
    writer.flush()?;
    Ok(())
}
