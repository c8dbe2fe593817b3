//! Metrics and repeated, grouped, stratified k-fold cross-validation.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::sync::Arc;

use rand::seq::SliceRandom;
use serde::Serialize;

use crate::cycles::GaitCycle;
use crate::error::{Error, Result};
use crate::graph::{graph_from_cycles, PartitionConfig};
use crate::model::{build_backbone, Model};
use crate::rng::{derive_seed, seeded, tag};
use crate::skeleton::SkeletonLayout;
use crate::train::{finetune_all, predict, Task, TrainConfig, VideoPrediction};

pub const DEFAULT_FOLDS: usize = 10;
pub const DEFAULT_REPEATS: usize = 20;

/// Percentages; the ataxic class (label 1) is positive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ClassificationMetrics {
    pub accuracy: f64,
    pub f1: f64,
    /// `None` when only one class is present.
    pub roc_auc: Option<f64>,
}

fn check_pairs(a: usize, b: usize, min: usize) -> Result<()> {
    if a != b {
        return Err(Error::Shape(format!("{a} predictions for {b} targets")));
    }
    if a < min {
        return Err(Error::Empty(format!("metrics need at least {min} samples, got {a}")));
    }
    Ok(())
}

pub fn metrics_classification(probs: &[f64], labels: &[u8]) -> Result<ClassificationMetrics> {
    check_pairs(probs.len(), labels.len(), 1)?;
    if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(Error::Validation("probabilities must lie in [0, 1]".into()));
    }
    if labels.iter().any(|&l| l > 1) {
        return Err(Error::Validation("labels must be 0 or 1".into()));
    }
    let (mut tp, mut fp, mut fn_, mut correct) = (0usize, 0usize, 0usize, 0usize);
    for (&p, &l) in probs.iter().zip(labels) {
        let predicted = p >= 0.5;
        let actual = l == 1;
        correct += usize::from(predicted == actual);
        match (predicted, actual) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            _ => {}
        }
    }
    let f1 = if tp == 0 { 0.0 } else { 2.0 * tp as f64 / (2 * tp + fp + fn_) as f64 };
    Ok(ClassificationMetrics {
        accuracy: 100.0 * correct as f64 / probs.len() as f64,
        f1: 100.0 * f1,
        roc_auc: roc_auc(probs, labels).ok(),
    })
}

/// Area under the ROC curve (×100), trapezoidal over every distinct
/// threshold.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_pairs(scores.len(), labels.len(), 1)?;
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric("ROC AUC needs both classes".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut fp) = (0usize, 0usize);
    let (mut prev_tpr, mut prev_fpr) = (0.0, 0.0);
    let mut area = 0.0;
    let mut i = 0;
    while i < order.len() {
        let threshold = scores[order[i]];
        while i < order.len() && scores[order[i]] == threshold {
            if labels[order[i]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let (tpr, fpr) = (tp as f64 / pos as f64, fp as f64 / neg as f64);
        area += (fpr - prev_fpr) * (tpr + prev_tpr) / 2.0;
        (prev_tpr, prev_fpr) = (tpr, fpr);
    }
    Ok(100.0 * area)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RegressionMetrics {
    pub mae: f64,
    pub mse: f64,
    /// `None` when either side has zero variance.
    pub pearson: Option<f64>,
}

pub fn metrics_regression(pred: &[f64], target: &[f64]) -> Result<RegressionMetrics> {
    check_pairs(pred.len(), target.len(), 2)?;
    let n = pred.len() as f64;
    let mae = pred.iter().zip(target).map(|(p, t)| (p - t).abs()).sum::<f64>() / n;
    let mse = pred.iter().zip(target).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / n;
    Ok(RegressionMetrics { mae, mse, pearson: pearson(pred, target).ok() })
}

pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    check_pairs(a.len(), b.len(), 2)?;
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    if va == 0.0 || vb == 0.0 {
        return Err(Error::UndefinedMetric("Pearson correlation of a constant vector".into()));
    }
    Ok((cov / (va * vb).sqrt()).clamp(-1.0, 1.0))
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> Result<(f64, f64)> {
    if values.is_empty() {
        return Err(Error::Empty("no values to summarize".into()));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Ok((mean, var.sqrt()))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FoldPlan {
    pub fold_count: usize,
    pub seed: u64,
    pub assignments: BTreeMap<String, usize>,
}

impl FoldPlan {
    pub fn fold_of(&self, video_id: &str) -> Option<usize> {
        self.assignments.get(video_id).copied()
    }

    pub fn members(&self, fold: usize) -> BTreeSet<&str> {
        self.assignments
            .iter()
            .filter(|(_, &f)| f == fold)
            .map(|(v, _)| v.as_str())
            .collect()
    }
}

/// Assigns whole videos to folds. Within each stratum the videos are
/// shuffled and dealt round-robin; the dealing position carries over from
/// one stratum to the next so fold sizes stay within one of each other.
pub fn make_folds(videos: &[(String, usize)], fold_count: usize, seed: u64) -> Result<FoldPlan> {
    if fold_count < 2 {
        return Err(Error::Parameter("need at least 2 folds".into()));
    }
    let mut strata: BTreeMap<usize, Vec<&str>> = BTreeMap::new();
    let mut seen: BTreeMap<&str, usize> = BTreeMap::new();
    for (video, stratum) in videos {
        match seen.insert(video, *stratum) {
            Some(prev) if prev != *stratum => {
                return Err(Error::Validation(format!("video {video} appears with two strata")));
            }
            Some(_) => continue,
            None => strata.entry(*stratum).or_default().push(video),
        }
    }
    if seen.len() < fold_count {
        return Err(Error::Validation(format!(
            "{} videos cannot fill {fold_count} folds",
            seen.len()
        )));
    }
    let mut rng = seeded(derive_seed(seed, tag("folds")));
    let mut assignments = BTreeMap::new();
    let mut next = 0;
    for members in strata.values_mut() {
        members.sort_unstable();
        members.shuffle(&mut rng);
        for v in members.iter() {
            assignments.insert(v.to_string(), next % fold_count);
            next += 1;
        }
    }
    Ok(FoldPlan { fold_count, seed, assignments })
}

/// How a model is trained on one side of a split and evaluated on the other.
pub trait Recipe {
    fn task(&self) -> &dyn Task;
    /// Learnable scalars of the model this recipe trains, if known.
    fn parameter_count(&self) -> Option<usize> {
        None
    }
    fn fit_predict(&self, train: &[&GaitCycle], eval: &[&GaitCycle], seed: u64) -> Result<Vec<VideoPrediction>>;
}

/// Truncated model with a fresh head, fine-tuned per fold. Without a
/// supplied backbone the graph radii come from each fold's training cycles
/// and the backbone is freshly initialized.
pub struct AtgcnRecipe {
    pub level: usize,
    pub task: Arc<dyn Task>,
    pub config: TrainConfig,
    pub backbone: Option<Model>,
    pub layout: SkeletonLayout,
    pub partition: PartitionConfig,
}

impl AtgcnRecipe {
    pub fn new(level: usize, task: Arc<dyn Task>, config: TrainConfig) -> Self {
        Self {
            level,
            task,
            config,
            backbone: None,
            layout: SkeletonLayout::openpose18(),
            partition: PartitionConfig::default(),
        }
    }

    pub fn build(&self, train: &[&GaitCycle], seed: u64) -> Result<Model> {
        let backbone = match &self.backbone {
            Some(b) => b.clone(),
            None => {
                let owned: Vec<GaitCycle> = train.iter().map(|c| (*c).clone()).collect();
                let graph = graph_from_cycles(&self.layout, &owned, &self.partition)?;
                build_backbone(graph, derive_seed(seed, tag("backbone")))?
            }
        };
        backbone.truncate(self.level)?.attach_head(self.task.head(), derive_seed(seed, tag("head")))
    }
}

impl Recipe for AtgcnRecipe {
    fn task(&self) -> &dyn Task {
        self.task.as_ref()
    }

    fn parameter_count(&self) -> Option<usize> {
        let spec = crate::model::ModelSpec::backbone(self.layout.joint_count())
            .truncated(self.level)
            .ok()?
            .with_head(self.task.head());
        let graph = crate::graph::build_partitioned_adjacency(
            &self.layout,
            &crate::graph::GravityRadii { r: vec![0.0; self.layout.joint_count()] },
            self.partition.radius_tolerance,
        )
        .ok()?;
        Model::new(spec, graph, 0).ok().map(|m| m.parameter_count())
    }

    fn fit_predict(&self, train: &[&GaitCycle], eval: &[&GaitCycle], seed: u64) -> Result<Vec<VideoPrediction>> {
        let model = self.build(train, seed)?;
        let config = TrainConfig { seed, ..self.config.clone() };
        let trained = finetune_all(&model, train, self.task.as_ref(), &config)?;
        Ok(predict(&trained.model, eval, self.task.as_ref())?.per_video)
    }
}

/// One (repeat, fold) evaluation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellRecord {
    pub repeat: usize,
    pub fold: usize,
    pub train_videos: Vec<String>,
    pub eval_videos: Vec<String>,
    pub train_cycles: usize,
    pub eval_cycles: usize,
    pub metrics: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricSummary {
    pub metric: String,
    pub mean: f64,
    /// Population standard deviation over all cells where the metric is
    /// defined.
    pub std: f64,
    pub cells: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricReport {
    pub task: String,
    pub fold_count: usize,
    pub repeats: usize,
    pub base_seed: u64,
    pub parameter_count: Option<usize>,
    pub summary: Vec<MetricSummary>,
    pub cells: Vec<CellRecord>,
}

impl MetricReport {
    pub fn from_cells(
        task: &str,
        fold_count: usize,
        repeats: usize,
        base_seed: u64,
        parameter_count: Option<usize>,
        cells: Vec<CellRecord>,
    ) -> Result<Self> {
        let mut names: Vec<&String> = Vec::new();
        for c in &cells {
            for k in c.metrics.keys() {
                if !names.contains(&k) {
                    names.push(k);
                }
            }
        }
        let summary = names
            .into_iter()
            .map(|name| {
                let values: Vec<f64> = cells.iter().filter_map(|c| c.metrics.get(name).copied()).collect();
                let (mean, std) = mean_std(&values)?;
                Ok(MetricSummary { metric: name.clone(), mean, std, cells: values.len() })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { task: task.into(), fold_count, repeats, base_seed, parameter_count, summary, cells })
    }

    pub fn metric(&self, name: &str) -> Option<&MetricSummary> {
        self.summary.iter().find(|m| m.metric == name)
    }

    /// `metric  mean  std  parameter_count`, tab-separated.
    pub fn summary_tsv(&self) -> String {
        let params = self.parameter_count.map_or_else(|| "NA".to_string(), |p| p.to_string());
        let mut out = String::from("metric\tmean\tstd\tparameter_count\n");
        for m in &self.summary {
            let _ = writeln!(out, "{}\t{}\t{}\t{params}", m.metric, m.mean, m.std);
        }
        out
    }

    /// `repeat  fold  metric  value`, tab-separated.
    pub fn cells_tsv(&self) -> String {
        let mut out = String::from("repeat\tfold\tmetric\tvalue\n");
        for c in &self.cells {
            for (k, v) in &c.metrics {
                let _ = writeln!(out, "{}\t{}\t{k}\t{v}", c.repeat, c.fold);
            }
        }
        out
    }
}

/// Metrics of one cell from its video-level predictions.
pub fn video_metrics(videos: &[VideoPrediction], task: &dyn Task) -> Result<BTreeMap<String, f64>> {
    let targets = videos
        .iter()
        .map(|v| v.target.ok_or_else(|| Error::Training(format!("video {} has no target", v.video_id))))
        .collect::<Result<Vec<_>>>()?;
    let values: Vec<f64> = videos.iter().map(|v| v.value).collect();
    let mut out = BTreeMap::new();
    match task.head() {
        crate::model::HeadKind::Regression => {
            if values.len() >= 2 {
                let m = metrics_regression(&values, &targets)?;
                out.insert("mae".into(), m.mae);
                out.insert("mse".into(), m.mse);
                if let Some(r) = m.pearson {
                    out.insert("pearson".into(), r);
                }
            } else {
                out.insert("mae".into(), (values[0] - targets[0]).abs());
                out.insert("mse".into(), (values[0] - targets[0]).powi(2));
            }
        }
        _ => {
            let labels: Vec<u8> = targets.iter().map(|&t| t as u8).collect();
            let m = metrics_classification(&values, &labels)?;
            out.insert("accuracy".into(), m.accuracy);
            out.insert("f1".into(), m.f1);
            if let Some(a) = m.roc_auc {
                out.insert("roc_auc".into(), a);
            }
        }
    }
    Ok(out)
}

/// Repeat `r` reseeds the fold plan and training with `base_seed + r`; each
/// fold trains on the other folds' cycles and is scored per video.
pub fn cross_validate(
    cycles: &[GaitCycle],
    recipe: &dyn Recipe,
    fold_count: usize,
    repeats: usize,
    base_seed: u64,
) -> Result<MetricReport> {
    if repeats == 0 {
        return Err(Error::Parameter("need at least one repeat".into()));
    }
    let task = recipe.task();
    let mut videos: Vec<(String, usize)> = Vec::new();
    for c in cycles {
        let stratum = task.target(c)?.round() as usize;
        if !videos.iter().any(|(v, _)| v == &c.source_video_id) {
            videos.push((c.source_video_id.clone(), stratum));
        }
    }
    let mut cells = Vec::with_capacity(fold_count * repeats);
    for repeat in 0..repeats {
        let seed = base_seed.wrapping_add(repeat as u64);
        let plan = make_folds(&videos, fold_count, seed)?;
        for fold in 0..fold_count {
            let (eval, train): (Vec<&GaitCycle>, Vec<&GaitCycle>) =
                cycles.iter().partition(|c| plan.fold_of(&c.source_video_id) == Some(fold));
            let ids = |set: &[&GaitCycle]| {
                set.iter().map(|c| c.source_video_id.clone()).collect::<BTreeSet<_>>().into_iter().collect()
            };
            let annotate = |e: Error| Error::AtFold { repeat, fold, source: Box::new(e) };
            let preds = recipe
                .fit_predict(&train, &eval, derive_seed(seed, fold as u64))
                .map_err(annotate)?;
            let metrics = video_metrics(&preds, task).map_err(annotate)?;
            cells.push(CellRecord {
                repeat,
                fold,
                train_videos: ids(&train),
                eval_videos: ids(&eval),
                train_cycles: train.len(),
                eval_cycles: eval.len(),
                metrics,
            });
        }
    }
    MetricReport::from_cells(task.name(), fold_count, repeats, base_seed, recipe.parameter_count(), cells)
}
