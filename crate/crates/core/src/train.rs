//! Fine-tuning, scoring and the truncation search.

use std::collections::BTreeMap;
use std::ops::ControlFlow;
use std::sync::Arc;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{sgd_step, softmax_rows, Tape, Tensor, Var};
use crate::cycles::GaitCycle;
use crate::error::{Error, Result};
use crate::model::{cycles_to_tensor, HeadKind, Mode, Model};
use crate::rng::{derive_seed, seeded, tag};

/// What the model learns from a cycle and how it is judged.
pub trait Task: Send + Sync {
    fn name(&self) -> &'static str;
    fn head(&self) -> HeadKind;
    /// Training target of a cycle (class index or severity level).
    fn target(&self, cycle: &GaitCycle) -> Result<f64>;
    fn loss(&self, tape: &mut Tape, output: Var, targets: &[f64]) -> Result<Var>;
    /// One value per row of a head output: ataxic probability or severity.
    fn outputs(&self, head_output: &Tensor) -> Vec<f64>;
    /// Higher is better.
    fn score(&self, predicted: &[f64], targets: &[f64]) -> Result<f64>;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Classification;

impl Task for Classification {
    fn name(&self) -> &'static str {
        "classification"
    }

    fn head(&self) -> HeadKind {
        HeadKind::Classification
    }

    fn target(&self, cycle: &GaitCycle) -> Result<f64> {
        cycle
            .label
            .map(|l| l.class_index() as f64)
            .ok_or_else(|| Error::Training(format!("cycle from {} has no label", cycle.source_video_id)))
    }

    fn loss(&self, tape: &mut Tape, output: Var, targets: &[f64]) -> Result<Var> {
        let labels: Vec<usize> = targets.iter().map(|&t| t as usize).collect();
        tape.softmax_cross_entropy(output, &labels)
    }

    fn outputs(&self, head_output: &Tensor) -> Vec<f64> {
        let k = head_output.shape()[1];
        softmax_rows(head_output.data(), k).chunks(k).map(|p| p[1]).collect()
    }

    /// Accuracy with ataxic decided at probability >= 0.5.
    fn score(&self, predicted: &[f64], targets: &[f64]) -> Result<f64> {
        if predicted.is_empty() || predicted.len() != targets.len() {
            return Err(Error::Empty("nothing to score".into()));
        }
        let correct = predicted
            .iter()
            .zip(targets)
            .filter(|(p, t)| (**p >= 0.5) == (**t >= 0.5))
            .count();
        Ok(correct as f64 / predicted.len() as f64)
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Regression;

impl Task for Regression {
    fn name(&self) -> &'static str {
        "regression"
    }

    fn head(&self) -> HeadKind {
        HeadKind::Regression
    }

    fn target(&self, cycle: &GaitCycle) -> Result<f64> {
        cycle
            .severity
            .map(f64::from)
            .ok_or_else(|| Error::Training(format!("cycle from {} has no severity", cycle.source_video_id)))
    }

    fn loss(&self, tape: &mut Tape, output: Var, targets: &[f64]) -> Result<Var> {
        tape.mse_loss(output, targets)
    }

    fn outputs(&self, head_output: &Tensor) -> Vec<f64> {
        head_output.data().to_vec()
    }

    /// Negated mean absolute error.
    fn score(&self, predicted: &[f64], targets: &[f64]) -> Result<f64> {
        if predicted.is_empty() || predicted.len() != targets.len() {
            return Err(Error::Empty("nothing to score".into()));
        }
        let mae = predicted.iter().zip(targets).map(|(p, t)| (p - t).abs()).sum::<f64>() / predicted.len() as f64;
        Ok(-mae)
    }
}

type TaskFactory = fn() -> Arc<dyn Task>;

/// Name-indexed learning tasks.
pub struct TaskRegistry {
    factories: BTreeMap<&'static str, TaskFactory>,
}

impl Default for TaskRegistry {
    fn default() -> Self {
        let mut registry = Self { factories: BTreeMap::new() };
        registry.register("classification", || Arc::new(Classification));
        registry.register("regression", || Arc::new(Regression));
        registry
    }
}

impl TaskRegistry {
    pub fn register(&mut self, name: &'static str, factory: TaskFactory) {
        self.factories.insert(name, factory);
    }

    pub fn names(&self) -> impl Iterator<Item = &'static str> + '_ {
        self.factories.keys().copied()
    }

    pub fn create(&self, name: &str) -> Result<Arc<dyn Task>> {
        self.factories
            .get(name)
            .map(|f| f())
            .ok_or_else(|| Error::UnknownStrategy {
                kind: "task",
                name: name.to_string(),
                available: self.names().collect::<Vec<_>>().join(", "),
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub shuffle: bool,
}

impl TrainConfig {
    /// Settings reported for the published model.
    pub fn paper(seed: u64) -> Self {
        Self { lr: 3e-5, batch_size: 64, epochs: 500, seed, shuffle: true }
    }

    /// Small-scale settings for synthetic data and CI.
    pub fn desk(seed: u64) -> Self {
        Self { lr: 1e-3, batch_size: 16, epochs: 100, seed, shuffle: true }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Parameter(format!("learning rate {} must be >= 0", self.lr)));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Parameter("batch size and epochs must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochReport {
    /// 1-based.
    pub epoch: usize,
    pub mean_loss: f64,
    pub steps: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    /// Mean training loss of each completed epoch.
    pub losses: Vec<f64>,
    pub steps: usize,
}

fn check_head(model: &Model, task: &dyn Task) -> Result<()> {
    match model.head_kind() {
        Some(h) if h == task.head() => Ok(()),
        other => Err(Error::Training(format!(
            "{} task needs a {} head, model has {:?}",
            task.name(),
            task.head().as_str(),
            other.map(HeadKind::as_str)
        ))),
    }
}

/// Plain SGD over `epochs` seeded shuffles of `train`. All parameters are
/// unfrozen first. `on_epoch` sees each epoch's report and the current
/// model and may stop training early.
pub fn finetune(
    model: &Model,
    train: &[&GaitCycle],
    task: &dyn Task,
    config: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochReport, &Model) -> Result<ControlFlow<()>>,
) -> Result<TrainOutcome> {
    config.validate()?;
    check_head(model, task)?;
    if train.is_empty() {
        return Err(Error::Empty("training set has no cycles".into()));
    }
    let targets = train.iter().map(|c| task.target(c)).collect::<Result<Vec<_>>>()?;
    let mut model = model.clone();
    model.set_trainable(true);
    let mut shuffle_rng = seeded(derive_seed(config.seed, tag("shuffle")));
    let mut dropout_rng = seeded(derive_seed(config.seed, tag("dropout")));
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut losses = Vec::with_capacity(config.epochs);
    let mut steps = 0;
    for epoch in 1..=config.epochs {
        if config.shuffle {
            order.shuffle(&mut shuffle_rng);
        }
        let mut total = 0.0;
        for batch in order.chunks(config.batch_size) {
            let cycles: Vec<&GaitCycle> = batch.iter().map(|&i| train[i]).collect();
            let batch_targets: Vec<f64> = batch.iter().map(|&i| targets[i]).collect();
            let mut tape = Tape::new();
            let x = tape.constant(cycles_to_tensor(&cycles)?);
            let fwd = model.forward(&mut tape, x, Mode::Train(&mut dropout_rng))?;
            let loss = task.loss(&mut tape, fwd.output, &batch_targets)?;
            total += tape.value(loss).item()? * batch.len() as f64;
            let grads = tape.backward(loss)?;
            model.commit_stats(fwd.stats)?;
            for p in model.parameters_mut() {
                p.accumulate(&grads)?;
            }
            sgd_step(model.parameters_mut(), config.lr);
            steps += 1;
        }
        let mean_loss = total / train.len() as f64;
        if !mean_loss.is_finite() {
            return Err(Error::Training(format!("loss diverged at epoch {epoch}")));
        }
        losses.push(mean_loss);
        let report = EpochReport { epoch, mean_loss, steps };
        if on_epoch(&report, &model)?.is_break() {
            break;
        }
    }
    Ok(TrainOutcome { model, losses, steps })
}

/// Runs every epoch.
pub fn finetune_all(model: &Model, train: &[&GaitCycle], task: &dyn Task, config: &TrainConfig) -> Result<TrainOutcome> {
    finetune(model, train, task, config, &mut |_, _| Ok(ControlFlow::Continue(())))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VideoPrediction {
    pub video_id: String,
    /// Mean of the cycle outputs.
    pub value: f64,
    pub cycles: usize,
    /// Target of the video's first cycle, when known.
    pub target: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Prediction {
    pub per_cycle: Vec<f64>,
    /// In order of first appearance.
    pub per_video: Vec<VideoPrediction>,
}

/// Groups cycle outputs by video and averages them.
pub fn aggregate_videos(cycles: &[&GaitCycle], outputs: &[f64], task: &dyn Task) -> Vec<VideoPrediction> {
    let mut order: Vec<String> = Vec::new();
    let mut acc: BTreeMap<&str, (f64, usize, Option<f64>)> = BTreeMap::new();
    for (c, &v) in cycles.iter().zip(outputs) {
        let entry = acc.entry(&c.source_video_id).or_insert_with(|| {
            order.push(c.source_video_id.clone());
            (0.0, 0, task.target(c).ok())
        });
        entry.0 += v;
        entry.1 += 1;
    }
    order
        .into_iter()
        .map(|id| {
            let (sum, n, target) = acc[id.as_str()];
            VideoPrediction { value: sum / n as f64, cycles: n, target, video_id: id }
        })
        .collect()
}

const PREDICT_BATCH: usize = 32;

/// Eval-mode outputs per cycle and their per-video means.
pub fn predict(model: &Model, cycles: &[&GaitCycle], task: &dyn Task) -> Result<Prediction> {
    check_head(model, task)?;
    let mut per_cycle = Vec::with_capacity(cycles.len());
    for chunk in cycles.chunks(PREDICT_BATCH) {
        let out = model.infer(&cycles_to_tensor(chunk)?)?;
        per_cycle.extend(task.outputs(&out));
    }
    let per_video = aggregate_videos(cycles, &per_cycle, task);
    Ok(Prediction { per_cycle, per_video })
}

/// Video-level score: accuracy for classification, negated MAE for
/// regression.
pub fn score(model: &Model, val: &[&GaitCycle], task: &dyn Task) -> Result<f64> {
    if val.is_empty() {
        return Err(Error::Empty("validation set has no cycles".into()));
    }
    let pred = predict(model, val, task)?;
    score_videos(&pred.per_video, task)
}

pub fn score_videos(videos: &[VideoPrediction], task: &dyn Task) -> Result<f64> {
    let targets = videos
        .iter()
        .map(|v| v.target.ok_or_else(|| Error::Training(format!("video {} has no target", v.video_id))))
        .collect::<Result<Vec<_>>>()?;
    let values: Vec<f64> = videos.iter().map(|v| v.value).collect();
    task.score(&values, &targets)
}

#[derive(Debug, Clone)]
pub struct SearchResult<T> {
    pub levels: Vec<usize>,
    pub scores: Vec<f64>,
    pub best_l: usize,
    /// Whatever the evaluation produced per level (e.g. trained models).
    pub artifacts: Vec<T>,
}

impl<T> SearchResult<T> {
    pub fn best(&self) -> &T {
        let idx = self.levels.iter().position(|&l| l == self.best_l).expect("best level evaluated");
        &self.artifacts[idx]
    }
}

/// Evaluates each level and keeps the arg-max; ties go to the smallest
/// level.
pub fn search_levels<T>(levels: &[usize], mut evaluate: impl FnMut(usize) -> Result<(f64, T)>) -> Result<SearchResult<T>> {
    if levels.is_empty() {
        return Err(Error::Empty("no truncation levels to search".into()));
    }
    let mut sorted = levels.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let mut scores = Vec::new();
    let mut artifacts = Vec::new();
    for &l in &sorted {
        let (s, a) = evaluate(l).map_err(|e| Error::AtLevel { level: l, source: Box::new(e) })?;
        if s.is_nan() {
            return Err(Error::AtLevel { level: l, source: Box::new(Error::Training("score is NaN".into())) });
        }
        scores.push(s);
        artifacts.push(a);
    }
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    Ok(SearchResult { best_l: sorted[best], levels: sorted, scores, artifacts })
}

#[derive(Debug, Clone)]
pub struct LevelRun {
    pub model: Model,
    pub losses: Vec<f64>,
    pub seed: u64,
}

/// For each level: truncate a copy of `backbone`, attach a fresh seeded
/// head, fine-tune on `train` and score on `val`.
pub fn truncation_search(
    backbone: &Model,
    train: &[&GaitCycle],
    val: &[&GaitCycle],
    task: &dyn Task,
    config: &TrainConfig,
    levels: &[usize],
) -> Result<SearchResult<LevelRun>> {
    search_levels(levels, |l| {
        let seed = derive_seed(config.seed, l as u64);
        let model = backbone.truncate(l)?.attach_head(task.head(), seed)?;
        let cfg = TrainConfig { seed, ..config.clone() };
        let outcome = finetune_all(&model, train, task, &cfg)?;
        let s = score(&outcome.model, val, task)?;
        Ok((s, LevelRun { model: outcome.model, losses: outcome.losses, seed }))
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::build_backbone;
    use crate::model::tests::test_graph;
    use crate::skeleton::{GaitLabel, Keypoint, JOINT_COUNT};

    pub(crate) fn cycle(video: &str, label: GaitLabel, severity: u8, phase: f64) -> GaitCycle {
        let frames = (0..16)
            .map(|t| {
                std::array::from_fn::<_, JOINT_COUNT, _>(|j| {
                    let s = (t as f64 * 0.4 + j as f64 + phase).sin();
                    let amp = if label == GaitLabel::Ataxic { 0.6 } else { 0.1 };
                    Keypoint::new(amp * s, 0.05 * j as f64, 1.0)
                })
            })
            .collect();
        GaitCycle {
            source_video_id: video.into(),
            subject_id: video.into(),
            start_frame: 0,
            end_frame: 15,
            frames,
            label: Some(label),
            severity: Some(severity),
        }
    }

    fn tiny(task: &dyn Task, seed: u64) -> Model {
        build_backbone(test_graph(), seed).unwrap().truncate(1).unwrap().attach_head(task.head(), seed).unwrap()
    }

    #[test]
    fn registry_lookup() {
        let reg = TaskRegistry::default();
        assert_eq!(reg.create("regression").unwrap().head(), HeadKind::Regression);
        assert!(matches!(reg.create("ranking"), Err(Error::UnknownStrategy { .. })));
        assert_eq!(reg.names().collect::<Vec<_>>(), ["classification", "regression"]);
    }

    #[test]
    fn score_examples() {
        let c = Classification;
        assert_eq!(c.score(&[0.9, 0.2], &[1.0, 0.0]).unwrap(), 1.0);
        assert_eq!(c.score(&[0.9, 0.8], &[1.0, 0.0]).unwrap(), 0.5);
        assert_eq!(Regression.score(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert!(c.score(&[], &[]).is_err());
    }

    #[test]
    fn video_aggregation_is_the_mean() {
        let a = cycle("v1", GaitLabel::Ataxic, 2, 0.0);
        let b = cycle("v1", GaitLabel::Ataxic, 2, 1.0);
        let videos = aggregate_videos(&[&a, &b], &[0.9, 0.7], &Classification);
        assert_eq!(videos.len(), 1);
        assert!((videos[0].value - 0.8).abs() < 1e-15);
        let videos = aggregate_videos(&[&a, &b], &[1.0, 3.0], &Regression);
        assert_eq!(videos[0].value, 2.0);
        assert_eq!(videos[0].target, Some(2.0));
        let single = aggregate_videos(&[&a], &[0.3], &Classification);
        assert_eq!(single[0].value, 0.3);
    }

    #[test]
    fn zero_lr_keeps_weights() {
        let task = Classification;
        let m = tiny(&task, 1);
        let data = [cycle("a", GaitLabel::Ataxic, 1, 0.0), cycle("b", GaitLabel::Healthy, 0, 0.5)];
        let refs: Vec<&GaitCycle> = data.iter().collect();
        let cfg = TrainConfig { lr: 0.0, batch_size: 1, epochs: 2, seed: 0, shuffle: true };
        let out = finetune_all(&m, &refs, &task, &cfg).unwrap();
        let before: Vec<_> = m.parameters().iter().map(|p| p.value.clone()).collect();
        let after: Vec<_> = out.model.parameters().iter().map(|p| p.value.clone()).collect();
        assert_eq!(before, after);
        assert_eq!(out.losses.len(), 2);
        assert_eq!(out.steps, 4);
    }

    #[test]
    fn single_sample_single_step() {
        let task = Regression;
        let m = tiny(&task, 1);
        let data = [cycle("a", GaitLabel::Ataxic, 3, 0.0)];
        let cfg = TrainConfig { lr: 1e-3, batch_size: 64, epochs: 1, seed: 0, shuffle: true };
        let out = finetune_all(&m, &[&data[0]], &task, &cfg).unwrap();
        assert_eq!(out.steps, 1);
        assert_ne!(out.model.parameters()[0].value, m.parameters()[0].value);
    }

    #[test]
    fn mismatches_are_errors() {
        let m = tiny(&Classification, 1);
        let cfg = TrainConfig::desk(0);
        assert!(finetune_all(&m, &[], &Classification, &cfg).is_err());
        let c = cycle("a", GaitLabel::Ataxic, 3, 0.0);
        assert!(matches!(finetune_all(&m, &[&c], &Regression, &cfg), Err(Error::Training(_))));
        let mut unlabeled = c.clone();
        unlabeled.label = None;
        assert!(matches!(finetune_all(&m, &[&unlabeled], &Classification, &cfg), Err(Error::Training(_))));
        assert!(score(&m, &[], &Classification).is_err());
    }

    #[test]
    fn training_is_reproducible() {
        let task = Classification;
        let m = tiny(&task, 4);
        let data: Vec<GaitCycle> = (0..6)
            .map(|i| {
                let label = if i % 2 == 0 { GaitLabel::Ataxic } else { GaitLabel::Healthy };
                cycle(&format!("v{i}"), label, 0, i as f64)
            })
            .collect();
        let refs: Vec<&GaitCycle> = data.iter().collect();
        let cfg = TrainConfig { lr: 1e-2, batch_size: 4, epochs: 3, seed: 8, shuffle: true };
        let a = finetune_all(&m, &refs, &task, &cfg).unwrap();
        let b = finetune_all(&m, &refs, &task, &cfg).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.losses, b.losses);
    }

    #[test]
    fn early_stop_callback() {
        let task = Classification;
        let m = tiny(&task, 4);
        let c = cycle("a", GaitLabel::Ataxic, 0, 0.0);
        let cfg = TrainConfig { epochs: 10, ..TrainConfig::desk(1) };
        let out = finetune(&m, &[&c], &task, &cfg, &mut |r, _| {
            Ok(if r.epoch == 3 { ControlFlow::Break(()) } else { ControlFlow::Continue(()) })
        })
        .unwrap();
        assert_eq!(out.losses.len(), 3);
    }

    #[test]
    fn stubbed_search() {
        let stub = [0.2, 0.9, 0.5];
        let r = search_levels(&[1, 2, 3], |l| Ok((stub[l - 1], ()))).unwrap();
        assert_eq!(r.best_l, 2);
        let r = search_levels(&[1, 2], |_| Ok((0.9, ()))).unwrap();
        assert_eq!(r.best_l, 1);
        let err = search_levels(&[1, 2], |l| if l == 2 { Err(Error::Training("boom".into())) } else { Ok((0.0, ())) })
            .unwrap_err();
        assert!(matches!(err, Error::AtLevel { level: 2, .. }));
    }

    #[test]
    fn search_leaves_backbone_untouched() {
        let task = Classification;
        let backbone = build_backbone(test_graph(), 2).unwrap();
        let snapshot = backbone.clone();
        let data: Vec<GaitCycle> = (0..4)
            .map(|i| {
                let label = if i % 2 == 0 { GaitLabel::Ataxic } else { GaitLabel::Healthy };
                cycle(&format!("v{i}"), label, 0, i as f64)
            })
            .collect();
        let refs: Vec<&GaitCycle> = data.iter().collect();
        let cfg = TrainConfig { lr: 1e-3, batch_size: 4, epochs: 1, seed: 8, shuffle: true };
        let r = truncation_search(&backbone, &refs, &refs, &task, &cfg, &[1, 2]).unwrap();
        assert_eq!(r.scores.len(), 2);
        assert!([1, 2].contains(&r.best_l));
        assert_eq!(backbone, snapshot);
    }
}
