//! Gait-cycle extraction from the inter-ankle distance signal.
//!
//! The distance between the two ankles oscillates twice per gait cycle
//! (maxima at heel strike and terminal swing), so three consecutive peaks
//! bound one cycle. The raw signal is smoothed by a configurable chain of
//! [`SignalFilter`]s before peak picking.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::skeleton::{
    mask_low_confidence, normalize_coordinates, parse_sequence, save_sequence, CoordinateSpace, GaitLabel,
    Keypoint, SequenceMeta, SkeletonFrame, SkeletonLayout, SkeletonSequence, JOINT_COUNT,
};

/// Temporal length every cycle is resampled to.
pub const CYCLE_FRAMES: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct DistanceSignal {
    pub values: Vec<f64>,
    pub fps: f64,
}

impl DistanceSignal {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn map(&self, values: Vec<f64>) -> Self {
        Self {
            values,
            fps: self.fps,
        }
    }
}

/// Per-frame Euclidean distance between the left and right ankle.
pub fn ankle_distance(seq: &SkeletonSequence, layout: &SkeletonLayout) -> Result<DistanceSignal> {
    let (left, right) = layout
        .ankles()
        .ok_or_else(|| Error::Validation("layout has no ankle joints".into()))?;
    let values = seq
        .frames
        .iter()
        .map(|f| {
            let (a, b) = (f.keypoints[left], f.keypoints[right]);
            (a.x - b.x).hypot(a.y - b.y)
        })
        .collect();
    Ok(DistanceSignal {
        values,
        fps: seq.meta.fps,
    })
}

/// Reflects an out-of-range index about the first/last sample, without
/// repeating the edge sample (`x[-1] = x[1]`).
fn mirror(index: isize, len: usize) -> usize {
    let last = len as isize - 1;
    if last == 0 {
        return 0;
    }
    let period = 2 * last;
    let mut i = index.rem_euclid(period);
    if i > last {
        i = period - i;
    }
    i as usize
}

fn convolve_mirrored(values: &[f64], kernel: &[f64], offset: isize) -> Vec<f64> {
    let n = values.len();
    (0..n as isize)
        .map(|t| {
            kernel
                .iter()
                .enumerate()
                .map(|(k, w)| w * values[mirror(t + k as isize + offset, n)])
                .sum()
        })
        .collect()
}

/// Least-squares weights that evaluate a local polynomial of degree
/// `polyorder` at the window center.
pub fn savitzky_golay_coefficients(window: usize, polyorder: usize) -> Result<Vec<f64>> {
    if window.is_multiple_of(2) || window <= polyorder {
        return Err(Error::Parameter(format!(
            "Savitzky-Golay window must be odd and exceed polyorder (window {window}, polyorder {polyorder})"
        )));
    }
    let half = (window / 2) as isize;
    let terms = polyorder + 1;
    // normal equations G a = e0 with G[p][q] = sum_d d^(p+q); weights w_d = sum_p a_p d^p
    let mut gram = vec![vec![0.0; terms]; terms];
    for d in -half..=half {
        let d = d as f64;
        for (p, row) in gram.iter_mut().enumerate() {
            for (q, g) in row.iter_mut().enumerate() {
                *g += d.powi((p + q) as i32);
            }
        }
    }
    let mut rhs = vec![0.0; terms];
    rhs[0] = 1.0;
    let a = solve_dense(gram, rhs)?;
    Ok((-half..=half)
        .map(|d| {
            let d = d as f64;
            a.iter().enumerate().map(|(p, ap)| ap * d.powi(p as i32)).sum()
        })
        .collect())
}

/// Gaussian elimination with partial pivoting.
fn solve_dense(mut m: Vec<Vec<f64>>, mut b: Vec<f64>) -> Result<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| m[i][col].abs().total_cmp(&m[j][col].abs()))
            .expect("non-empty range");
        if m[pivot][col].abs() < 1e-300 {
            return Err(Error::Parameter("singular least-squares system".into()));
        }
        m.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..n {
            let f = m[row][col] / m[col][col];
            for k in col..n {
                m[row][k] -= f * m[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let s: f64 = (row + 1..n).map(|k| m[row][k] * x[k]).sum();
        x[row] = (b[row] - s) / m[row][row];
    }
    Ok(x)
}

pub fn savitzky_golay(signal: &DistanceSignal, window: usize, polyorder: usize) -> Result<DistanceSignal> {
    SavitzkyGolay::new(window, polyorder)?
        .apply(&signal.values)
        .map(|v| signal.map(v))
}

pub fn moving_average(signal: &DistanceSignal, window: usize) -> Result<DistanceSignal> {
    MovingAverage::new(window)?
        .apply(&signal.values)
        .map(|v| signal.map(v))
}

/// A linear smoothing stage with mirrored boundary handling.
pub trait SignalFilter: fmt::Debug + Send + Sync {
    fn name(&self) -> &'static str;

    /// Compact `name:arg:arg` form accepted by [`FilterRegistry::parse`].
    fn describe(&self) -> String;

    fn apply(&self, values: &[f64]) -> Result<Vec<f64>>;
}

#[derive(Debug, Clone)]
pub struct SavitzkyGolay {
    window: usize,
    polyorder: usize,
    coefficients: Vec<f64>,
}

impl SavitzkyGolay {
    pub fn new(window: usize, polyorder: usize) -> Result<Self> {
        Ok(Self {
            window,
            polyorder,
            coefficients: savitzky_golay_coefficients(window, polyorder)?,
        })
    }
}

impl SignalFilter for SavitzkyGolay {
    fn name(&self) -> &'static str {
        "savgol"
    }

    fn describe(&self) -> String {
        format!("savgol:{}:{}", self.window, self.polyorder)
    }

    fn apply(&self, values: &[f64]) -> Result<Vec<f64>> {
        if self.window > values.len() {
            return Err(Error::Parameter(format!(
                "Savitzky-Golay window {} exceeds signal length {}",
                self.window,
                values.len()
            )));
        }
        Ok(convolve_mirrored(
            values,
            &self.coefficients,
            -((self.window / 2) as isize),
        ))
    }
}

/// Centered moving mean. Even windows lean one sample to the right.
#[derive(Debug, Clone)]
pub struct MovingAverage {
    window: usize,
}

impl MovingAverage {
    pub fn new(window: usize) -> Result<Self> {
        if window == 0 {
            return Err(Error::Parameter("moving-average window must be >= 1".into()));
        }
        Ok(Self { window })
    }
}

impl SignalFilter for MovingAverage {
    fn name(&self) -> &'static str {
        "moving-average"
    }

    fn describe(&self) -> String {
        format!("moving-average:{}", self.window)
    }

    fn apply(&self, values: &[f64]) -> Result<Vec<f64>> {
        if self.window > values.len() {
            return Err(Error::Parameter(format!(
                "moving-average window {} exceeds signal length {}",
                self.window,
                values.len()
            )));
        }
        let kernel = vec![1.0 / self.window as f64; self.window];
        Ok(convolve_mirrored(
            values,
            &kernel,
            -(((self.window - 1) / 2) as isize),
        ))
    }
}

type FilterFactory = fn(&[usize]) -> Result<Box<dyn SignalFilter>>;

/// Name-indexed constructors for the available smoothing filters.
pub struct FilterRegistry {
    factories: BTreeMap<&'static str, FilterFactory>,
}

impl Default for FilterRegistry {
    fn default() -> Self {
        let mut registry = Self {
            factories: BTreeMap::new(),
        };
        registry.register("savgol", |args| match args {
            [w, p] => Ok(Box::new(SavitzkyGolay::new(*w, *p)?)),
            _ => Err(Error::Parameter("savgol takes `savgol:<window>:<polyorder>`".into())),
        });
        registry.register("moving-average", |args| match args {
            [w] => Ok(Box::new(MovingAverage::new(*w)?)),
            _ => Err(Error::Parameter("moving-average takes `moving-average:<window>`".into())),
        });
        registry
    }
}

impl FilterRegistry {
    pub fn register(&mut self, name: &'static str, factory: FilterFactory) {
        self.factories.insert(name, factory);
    }

    pub fn names(&self) -> impl Iterator<Item = &'static str> + '_ {
        self.factories.keys().copied()
    }

    pub fn create(&self, name: &str, args: &[usize]) -> Result<Box<dyn SignalFilter>> {
        let factory = self.factories.get(name).ok_or_else(|| Error::UnknownStrategy {
            kind: "filter",
            name: name.to_string(),
            available: self.names().collect::<Vec<_>>().join(", "),
        })?;
        factory(args)
    }

    /// Parses `name:arg:arg`, e.g. `savgol:11:3`.
    pub fn parse(&self, spec: &str) -> Result<Box<dyn SignalFilter>> {
        let mut parts = spec.split(':');
        let name = parts.next().unwrap_or_default();
        let args = parts
            .map(|p| {
                p.parse::<usize>()
                    .map_err(|_| Error::Parameter(format!("bad filter argument `{p}` in `{spec}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        self.create(name, &args)
    }
}

/// Indices of local maxima whose topographic prominence is at least
/// `min_prominence`, thinned so that no two kept peaks are closer than
/// `min_separation` frames. Higher peaks win; ties keep the earlier index.
/// A flat top bordered by lower samples counts once, at its middle (the
/// left one of two middle samples).
pub fn detect_peaks(values: &[f64], min_separation: usize, min_prominence: f64) -> Vec<usize> {
    let candidates: Vec<usize> = local_maxima(values)
        .into_iter()
        .filter(|&i| prominence(values, i) >= min_prominence)
        .collect();
    let mut order = candidates.clone();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        if kept.iter().all(|&k| k.abs_diff(i) >= min_separation) {
            kept.push(i);
        }
    }
    kept.sort_unstable();
    kept
}

fn local_maxima(values: &[f64]) -> Vec<usize> {
    let n = values.len();
    let mut out = Vec::new();
    let mut i = 1;
    while i + 1 < n {
        if values[i - 1] < values[i] {
            let mut ahead = i + 1;
            while ahead + 1 < n && values[ahead] == values[i] {
                ahead += 1;
            }
            if values[ahead] < values[i] {
                out.push((i + ahead - 1) / 2);
                i = ahead;
                continue;
            }
        }
        i += 1;
    }
    out
}

fn prominence(values: &[f64], peak: usize) -> f64 {
    let h = values[peak];
    let mut left_min = h;
    for &v in values[..peak].iter().rev() {
        if v > h {
            break;
        }
        left_min = left_min.min(v);
    }
    let mut right_min = h;
    for &v in &values[peak + 1..] {
        if v > h {
            break;
        }
        right_min = right_min.min(v);
    }
    h - left_min.max(right_min)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaitCycle {
    pub source_video_id: String,
    pub subject_id: String,
    /// Position of the first bounding peak in the source sequence.
    pub start_frame: usize,
    /// Position of the third bounding peak in the source sequence.
    pub end_frame: usize,
    pub frames: Vec<[Keypoint; JOINT_COUNT]>,
    pub label: Option<GaitLabel>,
    pub severity: Option<u8>,
}

/// Pairs peaks `[p1, p3], [p3, p5], ...` and resamples each span to
/// `frames` samples by linear interpolation of x, y and confidence.
pub fn segment_cycles(seq: &SkeletonSequence, peaks: &[usize], frames: usize) -> Vec<GaitCycle> {
    let mut cycles = Vec::new();
    let mut k = 0;
    while k + 2 < peaks.len() {
        let (start, end) = (peaks[k], peaks[k + 2]);
        if start < end && end < seq.frames.len() {
            cycles.push(GaitCycle {
                source_video_id: seq.meta.video_id.clone(),
                subject_id: seq.meta.subject_id.clone(),
                start_frame: start,
                end_frame: end,
                frames: resample(seq, start, end, frames),
                label: seq.meta.label,
                severity: seq.severity_or_default(),
            });
        }
        k += 2;
    }
    cycles
}

fn resample(
    seq: &SkeletonSequence,
    start: usize,
    end: usize,
    frames: usize,
) -> Vec<[Keypoint; JOINT_COUNT]> {
    let span = (end - start) as f64;
    (0..frames)
        .map(|s| {
            let pos = if frames == 1 {
                start as f64
            } else {
                start as f64 + span * s as f64 / (frames - 1) as f64
            };
            let lo = (pos.floor() as usize).min(end);
            let hi = (lo + 1).min(end);
            let w = pos - lo as f64;
            let (a, b) = (&seq.frames[lo].keypoints, &seq.frames[hi].keypoints);
            std::array::from_fn(|j| {
                let lerp = |p: f64, q: f64| p + w * (q - p);
                Keypoint::new(
                    lerp(a[j].x, b[j].x),
                    lerp(a[j].y, b[j].y),
                    lerp(a[j].confidence, b[j].confidence),
                )
            })
        })
        .collect()
}

/// Parameters of the extraction pipeline.
#[derive(Debug)]
pub struct CycleConfig {
    pub filters: Vec<Box<dyn SignalFilter>>,
    /// Minimum peak spacing as a fraction of the frame rate (seconds).
    pub min_separation_seconds: f64,
    /// Minimum prominence as a fraction of the smoothed signal's range.
    pub min_prominence_fraction: f64,
    pub frames: usize,
    pub confidence_threshold: f64,
}

impl Default for CycleConfig {
    fn default() -> Self {
        Self {
            filters: vec![
                Box::new(SavitzkyGolay::new(11, 3).expect("valid default")),
                Box::new(MovingAverage::new(5).expect("valid default")),
            ],
            min_separation_seconds: 0.25,
            min_prominence_fraction: 0.05,
            frames: CYCLE_FRAMES,
            confidence_threshold: 0.0,
        }
    }
}

impl CycleConfig {
    pub fn min_separation_frames(&self, fps: f64) -> usize {
        (self.min_separation_seconds * fps).round().max(1.0) as usize
    }
}

/// Everything the extraction produced for one sequence.
#[derive(Debug, Clone)]
pub struct Extraction {
    pub raw: DistanceSignal,
    pub smoothed: DistanceSignal,
    pub peaks: Vec<usize>,
    pub cycles: Vec<GaitCycle>,
}

/// Normalizes (when in pixels), repairs low-confidence joints, smooths the
/// ankle distance, picks peaks and cuts resampled cycles.
pub fn extract_cycles(
    seq: &SkeletonSequence,
    layout: &SkeletonLayout,
    config: &CycleConfig,
) -> Result<Extraction> {
    let normalized = match seq.meta.coordinates {
        CoordinateSpace::Pixels => normalize_coordinates(seq)?,
        CoordinateSpace::Normalized => seq.clone(),
    };
    let repaired = if config.confidence_threshold > 0.0 {
        mask_low_confidence(&normalized, config.confidence_threshold)?
    } else {
        normalized
    };
    let raw = ankle_distance(&repaired, layout)?;
    let mut values = raw.values.clone();
    for filter in &config.filters {
        values = filter.apply(&values)?;
    }
    let smoothed = raw.map(values);
    let (lo, hi) = smoothed
        .values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let peaks = detect_peaks(
        &smoothed.values,
        config.min_separation_frames(raw.fps),
        config.min_prominence_fraction * (hi - lo),
    );
    let cycles = segment_cycles(&repaired, &peaks, config.frames);
    Ok(Extraction {
        raw,
        smoothed,
        peaks,
        cycles,
    })
}

/// One row of a cycle manifest (CSV with a header row).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CycleEntry {
    pub path: PathBuf,
    pub source_video_id: String,
    pub subject_id: String,
    pub label: Option<GaitLabel>,
    pub severity: Option<u8>,
    pub start_frame: usize,
    pub end_frame: usize,
}

/// Writes each cycle as a normalized keypoint file under `dir/cycles/` and
/// the manifest to `dir/cycles.csv`, paths relative to `dir`. `fps` is
/// recorded in the per-cycle metadata.
pub fn save_cycles(dir: impl AsRef<Path>, cycles: &[GaitCycle], fps: f64) -> Result<Vec<CycleEntry>> {
    let dir = dir.as_ref();
    let sub = dir.join("cycles");
    fs::create_dir_all(&sub).map_err(|e| Error::from(e).in_file(&sub))?;
    let mut counters: BTreeMap<&str, usize> = BTreeMap::new();
    let mut rows = Vec::with_capacity(cycles.len());
    for cycle in cycles {
        let k = counters.entry(&cycle.source_video_id).or_insert(0);
        let rel = PathBuf::from("cycles").join(format!("{}-c{:03}.jsonl", cycle.source_video_id, *k));
        *k += 1;
        let seq = SkeletonSequence {
            meta: SequenceMeta {
                fps,
                frame_width: 2.0,
                frame_height: 2.0,
                subject_id: cycle.subject_id.clone(),
                video_id: cycle.source_video_id.clone(),
                site_id: String::new(),
                label: cycle.label,
                severity: cycle.severity,
                coordinates: CoordinateSpace::Normalized,
            },
            frames: cycle
                .frames
                .iter()
                .enumerate()
                .map(|(i, kp)| SkeletonFrame { frame_index: i as u64, keypoints: *kp })
                .collect(),
        };
        save_sequence(&seq, dir.join(&rel))?;
        rows.push(CycleEntry {
            path: rel,
            source_video_id: cycle.source_video_id.clone(),
            subject_id: cycle.subject_id.clone(),
            label: cycle.label,
            severity: cycle.severity,
            start_frame: cycle.start_frame,
            end_frame: cycle.end_frame,
        });
    }
    let manifest = dir.join("cycles.csv");
    let mut writer = csv::Writer::from_path(&manifest).map_err(|e| Error::from(e).in_file(&manifest))?;
    for row in &rows {
        writer.serialize(row).map_err(|e| Error::from(e).in_file(&manifest))?;
    }
    writer.flush().map_err(|e| Error::from(e).in_file(&manifest))?;
    Ok(rows)
}

/// Reads a cycle manifest and every cycle it lists. Relative paths resolve
/// against the manifest's directory.
pub fn load_cycles(manifest: impl AsRef<Path>) -> Result<Vec<GaitCycle>> {
    let manifest = manifest.as_ref();
    let base = manifest.parent().unwrap_or_else(|| Path::new(""));
    let mut reader = csv::Reader::from_path(manifest).map_err(|e| Error::from(e).in_file(manifest))?;
    let mut cycles = Vec::new();
    for row in reader.deserialize() {
        let entry: CycleEntry = row.map_err(|e| Error::from(e).in_file(manifest))?;
        let path = if entry.path.is_relative() { base.join(&entry.path) } else { entry.path.clone() };
        let seq = parse_sequence(&path)?;
        if let Some(first) = cycles.first().map(|c: &GaitCycle| c.frames.len()) {
            if first != seq.frames.len() {
                return Err(Error::Shape(format!(
                    "cycle {} has {} frames, earlier cycles {first}",
                    path.display(),
                    seq.frames.len()
                ))
                .in_file(manifest));
            }
        }
        cycles.push(GaitCycle {
            source_video_id: entry.source_video_id,
            subject_id: entry.subject_id,
            start_frame: entry.start_frame,
            end_frame: entry.end_frame,
            frames: seq.frames.into_iter().map(|f| f.keypoints).collect(),
            label: entry.label,
            severity: entry.severity,
        });
    }
    if cycles.is_empty() {
        return Err(Error::Empty(format!("cycle manifest {} lists no cycles", manifest.display())));
    }
    Ok(cycles)
}
