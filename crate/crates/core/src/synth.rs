//! Synthetic walkers seen from behind, for tests and desk-scale runs.
//!
//! This is a kinematic cartoon. The ankles move fore-aft in antiphase,
//! which a rear camera sees as opposite vertical offsets `±A sin(phi)`, so
//! the inter-ankle distance is `sqrt(w^2 + 4 A^2 sin^2(phi))` for step width
//! `w`: two peaks per gait cycle, at `phi = pi/2 + k pi`. Severity widens
//! the base, adds lateral trunk sway and jitters step timing.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, seeded, tag, SeededRng};
use crate::skeleton::{
    save_sequence, write_manifest, CoordinateSpace, GaitLabel, Keypoint, ManifestEntry, SequenceMeta,
    SkeletonFrame, SkeletonSequence, JOINT_COUNT, LEFT_ANKLE, RIGHT_ANKLE,
};

const FRAME_WIDTH: f64 = 640.0;
const FRAME_HEIGHT: f64 = 480.0;
const CONFIDENCE: f64 = 0.9;
/// Vertical ankle excursion in normalized units.
const STRIDE_AMPLITUDE: f64 = 0.06;

/// Standing pose in normalized image coordinates (x right, y down), before
/// the ankles are placed.
const TEMPLATE: [(f64, f64); JOINT_COUNT] = [
    (0.0, -0.55),   // nose
    (0.0, -0.42),   // neck
    (0.12, -0.40),  // right shoulder
    (0.15, -0.22),  // right elbow
    (0.16, -0.05),  // right wrist
    (-0.12, -0.40), // left shoulder
    (-0.15, -0.22), // left elbow
    (-0.16, -0.05), // left wrist
    (0.07, -0.02),  // right hip
    (0.0, 0.0),     // right knee, set from hip and ankle
    (0.0, 0.45),    // right ankle
    (-0.07, -0.02), // left hip
    (0.0, 0.0),     // left knee
    (0.0, 0.45),    // left ankle
    (0.03, -0.58),  // right eye
    (-0.03, -0.58), // left eye
    (0.06, -0.56),  // right ear
    (-0.06, -0.56), // left ear
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaitParams {
    /// Gait cycles per second.
    pub cadence: f64,
    /// Lateral ankle separation at severity 0, normalized units.
    pub step_width: f64,
    /// Lateral trunk oscillation at severity 0, normalized units.
    pub sway_amplitude: f64,
    /// Standard deviation of each step's duration as a fraction of the
    /// nominal step, at severity 0.
    pub step_variability: f64,
    /// Standard deviation of per-keypoint jitter, normalized units.
    pub noise_sigma: f64,
    pub duration: f64,
    pub fps: f64,
    pub label: GaitLabel,
    pub severity: u8,
    pub seed: u64,
}

impl Default for GaitParams {
    fn default() -> Self {
        Self {
            cadence: 1.0,
            step_width: 0.10,
            sway_amplitude: 0.01,
            step_variability: 0.0,
            noise_sigma: 0.0,
            duration: 6.0,
            fps: 30.0,
            label: GaitLabel::Healthy,
            severity: 0,
            seed: 0,
        }
    }
}

impl GaitParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("cadence", self.cadence), ("fps", self.fps), ("duration", self.duration)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Parameter(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [
            ("step width", self.step_width),
            ("sway amplitude", self.sway_amplitude),
            ("step variability", self.step_variability),
            ("noise", self.noise_sigma),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Parameter(format!("{name} must be >= 0, got {v}")));
            }
        }
        if self.severity > 3 {
            return Err(Error::Parameter(format!("severity {} outside 0..=3", self.severity)));
        }
        if self.label == GaitLabel::Healthy && self.severity != 0 {
            return Err(Error::Parameter("healthy walkers have severity 0".into()));
        }
        if self.frame_count() < 2 {
            return Err(Error::Parameter("walk is shorter than two frames".into()));
        }
        Ok(())
    }

    pub fn frame_count(&self) -> usize {
        (self.duration * self.fps).round() as usize
    }

    fn severity_scale(&self, per_level: f64) -> f64 {
        1.0 + per_level * self.severity as f64
    }

    /// Step width after severity scaling.
    pub fn effective_step_width(&self) -> f64 {
        self.step_width * self.severity_scale(0.6)
    }

    pub fn effective_sway(&self) -> f64 {
        self.sway_amplitude * self.severity_scale(1.5)
    }

    pub fn effective_variability(&self) -> f64 {
        self.step_variability * self.severity_scale(1.0)
    }

    /// Randomized walker of the given class: healthy walkers are narrow and
    /// steady, ataxic ones wider, swaying and irregular.
    pub fn sample(label: GaitLabel, severity: u8, seed: u64) -> Self {
        let mut rng = seeded(derive_seed(seed, tag("params")));
        let ataxic = label == GaitLabel::Ataxic;
        Self {
            cadence: rng.gen_range(0.8..1.2),
            step_width: rng.gen_range(0.08..0.11) * if ataxic { 1.3 } else { 1.0 },
            sway_amplitude: rng.gen_range(0.005..0.015) * if ataxic { 2.0 } else { 1.0 },
            step_variability: if ataxic { rng.gen_range(0.03..0.06) } else { rng.gen_range(0.0..0.02) },
            noise_sigma: 0.002,
            duration: 6.0,
            fps: 30.0,
            label,
            severity,
            seed,
        }
    }
}

/// Gait phase at each frame. Each step advances the phase by `pi`; with
/// variability its duration is jittered, otherwise `phi = 2 pi cadence t`.
fn phase_track(params: &GaitParams, rng: &mut SeededRng) -> Result<Vec<f64>> {
    let n = params.frame_count();
    let nominal = 0.5 / params.cadence;
    let sigma = params.effective_variability();
    let jitter = Normal::new(0.0, sigma.max(f64::MIN_POSITIVE)).map_err(|e| Error::Parameter(e.to_string()))?;
    let end = n as f64 / params.fps;
    let mut boundaries = vec![0.0];
    while *boundaries.last().expect("non-empty") <= end {
        let eps = if sigma > 0.0 { jitter.sample(rng).clamp(-0.5, 0.5) } else { 0.0 };
        let last = *boundaries.last().expect("non-empty");
        boundaries.push(last + nominal * (1.0 + eps));
    }
    Ok((0..n)
        .map(|f| {
            let t = f as f64 / params.fps;
            let step = boundaries.partition_point(|&b| b <= t) - 1;
            let (a, b) = (boundaries[step], boundaries[step + 1]);
            PI * (step as f64 + (t - a) / (b - a))
        })
        .collect())
}

pub fn generate_sequence(params: &GaitParams) -> Result<SkeletonSequence> {
    params.validate()?;
    let mut phase_rng = seeded(derive_seed(params.seed, tag("phase")));
    let mut noise_rng = seeded(derive_seed(params.seed, tag("noise")));
    let phases = phase_track(params, &mut phase_rng)?;
    let noise = Normal::new(0.0, params.noise_sigma.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::Parameter(e.to_string()))?;
    let half_width = params.effective_step_width() / 2.0;
    let sway = params.effective_sway();

    let frames = phases
        .iter()
        .enumerate()
        .map(|(f, &phi)| {
            let lift = STRIDE_AMPLITUDE * phi.sin();
            let trunk = sway * phi.sin();
            let bob = 0.01 * (2.0 * phi).cos();
            let mut pos = TEMPLATE;
            for (j, p) in pos.iter_mut().enumerate() {
                if j != RIGHT_ANKLE && j != LEFT_ANKLE {
                    let weight = if p.1 < -0.1 { 1.0 } else { 0.5 };
                    p.0 += trunk * weight;
                    p.1 += bob;
                }
            }
            pos[RIGHT_ANKLE] = (half_width, TEMPLATE[RIGHT_ANKLE].1 - lift);
            pos[LEFT_ANKLE] = (-half_width, TEMPLATE[LEFT_ANKLE].1 + lift);
            // arms swing against the legs
            pos[4].1 += 0.5 * lift;
            pos[7].1 -= 0.5 * lift;
            for (knee, hip, ankle) in [(9, 8, RIGHT_ANKLE), (12, 11, LEFT_ANKLE)] {
                pos[knee] = ((pos[hip].0 + pos[ankle].0) / 2.0, (pos[hip].1 + pos[ankle].1) / 2.0);
            }
            let keypoints = std::array::from_fn(|j| {
                let (mut x, mut y) = pos[j];
                if params.noise_sigma > 0.0 {
                    x += noise.sample(&mut noise_rng);
                    y += noise.sample(&mut noise_rng);
                }
                Keypoint::new((x + 1.0) / 2.0 * FRAME_WIDTH, (y + 1.0) / 2.0 * FRAME_HEIGHT, CONFIDENCE)
            });
            SkeletonFrame { frame_index: f as u64, keypoints }
        })
        .collect();

    let id = format!("synth-{:016x}", params.seed);
    let seq = SkeletonSequence {
        meta: SequenceMeta {
            fps: params.fps,
            frame_width: FRAME_WIDTH,
            frame_height: FRAME_HEIGHT,
            subject_id: id.clone(),
            video_id: id,
            site_id: "synthetic".into(),
            label: Some(params.label),
            severity: Some(params.severity),
            coordinates: CoordinateSpace::Pixels,
        },
        frames,
    };
    seq.validate()?;
    Ok(seq)
}

/// Ankle-distance peak frames of a noise-free, jitter-free walk:
/// `(2k + 1) fps / (4 cadence)`, kept when the nearest sample has a
/// neighbour on both sides (a maximum on the first or last frame is not a
/// peak of the sampled signal).
pub fn closed_form_peaks(params: &GaitParams) -> Vec<f64> {
    let last = params.frame_count().saturating_sub(1) as f64;
    (0..)
        .map(|k| (2 * k + 1) as f64 * params.fps / (4.0 * params.cadence))
        .take_while(|&p| p.round() < last)
        .filter(|&p| p.round() >= 1.0)
        .collect()
}

/// Number of walkers per severity level; level 0 is healthy, 1..=3 ataxic.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetPlan {
    pub counts: BTreeMap<u8, usize>,
}

impl DatasetPlan {
    /// `n` healthy and `n` ataxic walkers, ataxic severities cycling 1, 2, 3.
    pub fn per_class(n: usize) -> Self {
        let mut counts = BTreeMap::from([(0, n)]);
        for i in 0..n {
            *counts.entry(1 + (i % 3) as u8).or_insert(0) += 1;
        }
        Self { counts }
    }

    pub fn mix(counts: BTreeMap<u8, usize>) -> Result<Self> {
        if let Some(bad) = counts.keys().find(|&&s| s > 3) {
            return Err(Error::Parameter(format!("severity {bad} outside 0..=3")));
        }
        if counts.values().sum::<usize>() == 0 {
            return Err(Error::Parameter("dataset plan is empty".into()));
        }
        Ok(Self { counts })
    }

    pub fn total(&self) -> usize {
        self.counts.values().sum()
    }
}

/// Writes one keypoint file per walker under `dir/sequences/` and
/// `dir/manifest.csv` with paths relative to `dir`.
pub fn generate_dataset(dir: impl AsRef<Path>, plan: &DatasetPlan, seed: u64) -> Result<Vec<ManifestEntry>> {
    let dir = dir.as_ref();
    let seq_dir = dir.join("sequences");
    fs::create_dir_all(&seq_dir).map_err(|e| Error::from(e).in_file(&seq_dir))?;
    let mut rows = Vec::with_capacity(plan.total());
    let mut index = 0u64;
    for (&severity, &count) in &plan.counts {
        let label = if severity == 0 { GaitLabel::Healthy } else { GaitLabel::Ataxic };
        for _ in 0..count {
            let params = GaitParams::sample(label, severity, derive_seed(seed, index));
            let mut seq = generate_sequence(&params)?;
            let id = format!("synth-{index:04}");
            seq.meta.video_id = id.clone();
            seq.meta.subject_id = format!("walker-{index:04}");
            let rel = PathBuf::from("sequences").join(format!("{id}.jsonl"));
            save_sequence(&seq, dir.join(&rel))?;
            rows.push(ManifestEntry {
                path: rel,
                video_id: id,
                subject_id: seq.meta.subject_id.clone(),
                label,
                severity,
            });
            index += 1;
        }
    }
    write_manifest(dir.join("manifest.csv"), &rows)?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cycles::{ankle_distance, extract_cycles, CycleConfig};
    use crate::skeleton::{read_manifest, SkeletonLayout};

    fn quiet(cadence: f64) -> GaitParams {
        GaitParams { cadence, ..GaitParams::default() }
    }

    #[test]
    fn frame_count() {
        let seq = generate_sequence(&GaitParams::default()).unwrap();
        assert_eq!(seq.frames.len(), 180);
    }

    #[test]
    fn invalid_params() {
        assert!(generate_sequence(&GaitParams { cadence: 0.0, ..GaitParams::default() }).is_err());
        assert!(generate_sequence(&GaitParams { noise_sigma: -1.0, ..GaitParams::default() }).is_err());
        assert!(generate_sequence(&GaitParams { severity: 2, ..GaitParams::default() }).is_err());
    }

    #[test]
    fn half_hertz_peaks_are_one_second_apart() {
        let params = quiet(0.5);
        let seq = generate_sequence(&params).unwrap();
        let ex = extract_cycles(&seq, &SkeletonLayout::openpose18(), &CycleConfig::default()).unwrap();
        let expected = closed_form_peaks(&params);
        assert_eq!(ex.peaks.len(), expected.len());
        for (got, want) in ex.peaks.iter().zip(&expected) {
            assert!((*got as f64 - want).abs() <= 1.0);
        }
        for pair in ex.peaks.windows(2) {
            assert!((pair[1] - pair[0]).abs_diff(30) <= 1);
        }
        assert_eq!(ex.cycles.len(), 2);
    }

    #[test]
    fn closed_form_matches_sampled_maxima() {
        for cadence in [0.55, 0.71, 0.96, 1.0, 1.38, 1.46] {
            let params = quiet(cadence);
            let seq = generate_sequence(&params).unwrap();
            let raw = ankle_distance(&seq, &SkeletonLayout::openpose18()).unwrap().values;
            // interior maxima by exhaustive scan; a two-sample flat top counts once
            let mut scanned = 0;
            for t in 1..raw.len() - 1 {
                let rises = raw[t] > raw[t - 1] + 1e-12;
                let falls = raw[t] > raw[t + 1] + 1e-12;
                let flat_top = t + 2 < raw.len() && (raw[t] - raw[t + 1]).abs() <= 1e-12 && raw[t] > raw[t + 2] + 1e-12;
                scanned += usize::from(rises && (falls || flat_top));
            }
            assert_eq!(closed_form_peaks(&params).len(), scanned, "cadence {cadence}");
        }
    }

    fn mean_step_width(seq: &SkeletonSequence) -> f64 {
        seq.frames
            .iter()
            .map(|f| f.keypoints[RIGHT_ANKLE].x - f.keypoints[LEFT_ANKLE].x)
            .sum::<f64>()
            / seq.frames.len() as f64
    }

    fn neck_sway(seq: &SkeletonSequence) -> f64 {
        let xs: Vec<f64> = seq.frames.iter().map(|f| f.keypoints[1].x).collect();
        let m = xs.iter().sum::<f64>() / xs.len() as f64;
        (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / xs.len() as f64).sqrt()
    }

    #[test]
    fn severity_widens_and_sways() {
        let base = GaitParams { label: GaitLabel::Ataxic, noise_sigma: 0.002, step_variability: 0.05, ..GaitParams::default() };
        let mild = generate_sequence(&base).unwrap();
        let severe = generate_sequence(&GaitParams { severity: 3, ..base }).unwrap();
        assert!(mean_step_width(&severe) > mean_step_width(&mild));
        assert!(neck_sway(&severe) > neck_sway(&mild));
    }

    #[test]
    fn severity_monotone_over_seeds() {
        let widths: Vec<f64> = (0..=3u8)
            .map(|s| {
                (0..20)
                    .map(|seed| {
                        let p = GaitParams::sample(GaitLabel::Ataxic, s, seed);
                        mean_step_width(&generate_sequence(&p).unwrap())
                    })
                    .sum::<f64>()
                    / 20.0
            })
            .collect();
        assert!(widths.windows(2).all(|w| w[1] > w[0]), "{widths:?}");
    }

    #[test]
    fn autocorrelation_peaks_at_cycle_lag() {
        let params = quiet(0.75);
        let seq = generate_sequence(&params).unwrap();
        let d = ankle_distance(&seq, &SkeletonLayout::openpose18()).unwrap().values;
        let m = d.iter().sum::<f64>() / d.len() as f64;
        let c: Vec<f64> = d.iter().map(|v| v - m).collect();
        let ac = |lag: usize| (0..c.len() - lag).map(|i| c[i] * c[i + lag]).sum::<f64>() / (c.len() - lag) as f64;
        let cycle = params.fps / params.cadence;
        let local_max: Vec<usize> = (2..80).filter(|&l| ac(l) > ac(l - 1) && ac(l) > ac(l + 1)).collect();
        assert!(local_max.iter().any(|&l| (l as f64 - cycle).abs() <= 1.0), "{local_max:?}");
    }

    #[test]
    fn deterministic_per_seed() {
        let p = GaitParams::sample(GaitLabel::Ataxic, 2, 17);
        assert_eq!(generate_sequence(&p).unwrap(), generate_sequence(&p).unwrap());
        let q = GaitParams::sample(GaitLabel::Ataxic, 2, 18);
        assert_ne!(generate_sequence(&p).unwrap(), generate_sequence(&q).unwrap());
    }

    #[test]
    fn dataset_files_and_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let rows = generate_dataset(dir.path(), &DatasetPlan::per_class(1), 5).unwrap();
        assert_eq!(rows.len(), 2);
        let manifest = read_manifest(dir.path().join("manifest.csv")).unwrap();
        assert_eq!(manifest.len(), 2);
        assert_eq!(fs::read_dir(dir.path().join("sequences")).unwrap().count(), 2);
        for row in &manifest {
            crate::skeleton::parse_sequence(&row.path).unwrap().validate().unwrap();
        }

        let other = tempfile::tempdir().unwrap();
        generate_dataset(other.path(), &DatasetPlan::per_class(1), 5).unwrap();
        for name in ["manifest.csv", "sequences/synth-0000.jsonl", "sequences/synth-0001.jsonl"] {
            assert_eq!(fs::read(dir.path().join(name)).unwrap(), fs::read(other.path().join(name)).unwrap());
        }
    }

    #[test]
    fn severity_mix_histogram() {
        let dir = tempfile::tempdir().unwrap();
        let mix = BTreeMap::from([(0, 10), (1, 5), (2, 5), (3, 5)]);
        let rows = generate_dataset(dir.path(), &DatasetPlan::mix(mix.clone()).unwrap(), 1).unwrap();
        let mut hist = BTreeMap::new();
        for r in &rows {
            *hist.entry(r.severity).or_insert(0) += 1;
        }
        assert_eq!(hist, mix);
    }

    #[test]
    fn unwritable_path_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("plain-file");
        fs::write(&file, b"x").unwrap();
        assert!(generate_dataset(&file, &DatasetPlan::per_class(1), 0).is_err());
    }
}
