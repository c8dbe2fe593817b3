use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use atgcn::checkpoint::{self, TrainingState};
use atgcn::cycles::{extract_cycles, load_cycles, save_cycles, CycleConfig, FilterRegistry, GaitCycle};
use atgcn::eval::{cross_validate, make_folds, AtgcnRecipe};
use atgcn::graph::{graph_from_cycles, PartitionConfig, SUBSETS};
use atgcn::model::{build_backbone, HeadKind, Model};
use atgcn::rng::{derive_seed, tag};
use atgcn::skeleton::{
    mask_low_confidence, normalize_coordinates, parse_sequence, read_manifest, save_sequence, CoordinateSpace,
    GaitLabel, SkeletonLayout, SkeletonSequence,
};
use atgcn::synth::{generate_dataset, generate_sequence, DatasetPlan, GaitParams};
use atgcn::train::{finetune_all, predict, score, truncation_search, Classification, Regression, Task, TaskRegistry, TrainConfig};
use atgcn::Error;
use serde::Serialize;

use crate::outputs::{distance_svg, manifest_inputs, write_run_manifest};
use crate::{
    Command, CyclesArgs, EvalArgs, GraphArgs, Hyper, IngestArgs, LabelArg, PlotArgs, PredictArgs, Profile, SearchArgs,
    SignalArgs, SynthCommand, SynthDatasetArgs, SynthSequenceArgs, TrainArgs,
};

pub fn run(command: &Command) -> Result<()> {
    match command {
        Command::Ingest(a) => ingest(command, a),
        Command::Cycles(a) => cycles(command, a),
        Command::Plot(a) => plot(command, a),
        Command::Graph(a) => graph(command, a),
        Command::Synth(SynthCommand::Sequence(a)) => synth_sequence(command, a),
        Command::Synth(SynthCommand::Dataset(a)) => synth_dataset(command, a),
        Command::Train(a) => train(command, a),
        Command::Search(a) => search(command, a),
        Command::Eval(a) => eval(command, a),
        Command::Predict(a) => predict_cmd(command, a),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// `<file>.run-manifest.json` next to a single-file output.
fn sidecar(output: &Path) -> PathBuf {
    let mut name = output.file_name().unwrap_or_default().to_os_string();
    name.push(".run-manifest.json");
    output.with_file_name(name)
}

fn ingest(command: &Command, a: &IngestArgs) -> Result<()> {
    let seq = parse_sequence(&a.input)?;
    let mut out = match seq.meta.coordinates {
        CoordinateSpace::Pixels => normalize_coordinates(&seq)?,
        CoordinateSpace::Normalized => seq,
    };
    if a.confidence_threshold > 0.0 {
        out = mask_low_confidence(&out, a.confidence_threshold)?;
    }
    save_sequence(&out, &a.output)?;
    println!("{}: {} frames at {} fps", out.meta.video_id, out.frames.len(), out.meta.fps);
    write_run_manifest(&sidecar(&a.output), command, None, std::slice::from_ref(&a.input), std::slice::from_ref(&a.output))
}

fn cycle_config(s: &SignalArgs, frames: usize) -> Result<CycleConfig> {
    let registry = FilterRegistry::default();
    let filters = if s.filters.is_empty() {
        CycleConfig::default().filters
    } else {
        s.filters.iter().map(|f| registry.parse(f)).collect::<atgcn::Result<Vec<_>>>()?
    };
    if frames < 2 {
        bail!(Error::Parameter(format!("cycles need at least 2 frames, got {frames}")));
    }
    Ok(CycleConfig {
        filters,
        min_separation_seconds: s.min_separation,
        min_prominence_fraction: s.min_prominence,
        frames,
        confidence_threshold: s.confidence_threshold,
    })
}

fn load_sequences(a: &CyclesArgs) -> Result<(Vec<SkeletonSequence>, Vec<PathBuf>)> {
    if let Some(input) = &a.input {
        return Ok((vec![parse_sequence(input)?], vec![input.clone()]));
    }
    let manifest = a.manifest.as_ref().expect("clap requires --input or --manifest");
    let mut seqs = Vec::new();
    for entry in read_manifest(manifest)? {
        let mut seq = parse_sequence(&entry.path)?;
        seq.meta.video_id = entry.video_id;
        if !entry.subject_id.is_empty() {
            seq.meta.subject_id = entry.subject_id;
        }
        seq.meta.label = Some(entry.label);
        seq.meta.severity = Some(entry.severity);
        seqs.push(seq);
    }
    Ok((seqs, manifest_inputs(manifest)?))
}

fn cycles(command: &Command, a: &CyclesArgs) -> Result<()> {
    let config = cycle_config(&a.signal, a.frames)?;
    let layout = SkeletonLayout::openpose18();
    let (seqs, inputs) = load_sequences(a)?;
    let mut all: Vec<GaitCycle> = Vec::new();
    let mut summary = String::from("video_id\tframes\tpeaks\tcycles\n");
    for seq in &seqs {
        let ex = extract_cycles(seq, &layout, &config)?;
        let _ = writeln!(summary, "{}\t{}\t{}\t{}", seq.meta.video_id, seq.frames.len(), ex.peaks.len(), ex.cycles.len());
        all.extend(ex.cycles);
    }
    if all.is_empty() {
        bail!(Error::Empty("no gait cycles found in any sequence".into()));
    }
    create_dir(&a.out_dir)?;
    let rows = save_cycles(&a.out_dir, &all, seqs[0].meta.fps)?;
    let summary_path = a.out_dir.join("sequences.tsv");
    write_text(&summary_path, &summary)?;
    println!("{} cycles from {} sequences", all.len(), seqs.len());
    let mut outputs = vec![a.out_dir.join("cycles.csv"), summary_path];
    outputs.extend(rows.iter().map(|r| a.out_dir.join(&r.path)));
    write_run_manifest(&a.out_dir.join("run-manifest.json"), command, None, &inputs, &outputs)
}

fn plot(command: &Command, a: &PlotArgs) -> Result<()> {
    let config = cycle_config(&a.signal, atgcn::cycles::CYCLE_FRAMES)?;
    let seq = parse_sequence(&a.input)?;
    let ex = extract_cycles(&seq, &SkeletonLayout::openpose18(), &config)?;
    let peaks: BTreeSet<usize> = ex.peaks.iter().copied().collect();
    let mut tsv = String::from("frame\traw\tsmoothed\tpeak\n");
    for (t, (r, s)) in ex.raw.values.iter().zip(&ex.smoothed.values).enumerate() {
        let _ = writeln!(tsv, "{t}\t{r}\t{s}\t{}", u8::from(peaks.contains(&t)));
    }
    let with_ext = |ext: &str| {
        let mut name = a.out_prefix.file_name().unwrap_or_default().to_os_string();
        name.push(ext);
        a.out_prefix.with_file_name(name)
    };
    let (tsv_path, svg_path) = (with_ext(".tsv"), with_ext(".svg"));
    if let Some(parent) = tsv_path.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    write_text(&tsv_path, &tsv)?;
    let title = format!("{}: ankle distance, {} peaks", seq.meta.video_id, ex.peaks.len());
    write_text(&svg_path, &distance_svg(&title, &ex.raw.values, &ex.smoothed.values, &ex.peaks))?;
    println!("{} frames, {} peaks, {} cycles", ex.raw.len(), ex.peaks.len(), ex.cycles.len());
    write_run_manifest(&sidecar(&tsv_path), command, None, std::slice::from_ref(&a.input), &[tsv_path.clone(), svg_path])
}

fn graph(command: &Command, a: &GraphArgs) -> Result<()> {
    let cycles = load_cycles(&a.cycles)?;
    let layout = SkeletonLayout::openpose18();
    let partition = PartitionConfig { radius_tolerance: a.radius_tolerance, ..PartitionConfig::default() };
    let g = graph_from_cycles(&layout, &cycles, &partition)?;
    let names = layout.joint_names();
    create_dir(&a.out_dir)?;

    let mut radii = String::from("joint\tname\tradius\n");
    for (j, r) in g.radii.r.iter().enumerate() {
        let _ = writeln!(radii, "{j}\t{}\t{r}", names[j]);
    }
    let mut labels = String::from("root\troot_name\tneighbour\tneighbour_name\tsubset\n");
    for (&(i, j), &k) in &g.labels {
        let _ = writeln!(labels, "{i}\t{}\t{j}\t{}\t{k}", names[i], names[j]);
    }
    let mut adjacency = String::from("subset\troot\tneighbour\tweight\n");
    for k in 0..SUBSETS {
        for i in 0..g.joint_count() {
            for j in 0..g.joint_count() {
                let w = g.entry(k, i, j);
                if w != 0.0 {
                    let _ = writeln!(adjacency, "{k}\t{i}\t{j}\t{w}");
                }
            }
        }
    }
    let outputs: Vec<PathBuf> = [("radii.tsv", radii), ("labels.tsv", labels), ("adjacency.tsv", adjacency)]
        .into_iter()
        .map(|(name, text)| {
            let path = a.out_dir.join(name);
            write_text(&path, &text).map(|_| path)
        })
        .collect::<Result<_>>()?;
    println!("{} labelled pairs over {} joints", g.labels.len(), g.joint_count());
    write_run_manifest(&a.out_dir.join("run-manifest.json"), command, None, &manifest_inputs(&a.cycles)?, &outputs)
}

fn synth_sequence(command: &Command, a: &SynthSequenceArgs) -> Result<()> {
    let params = GaitParams {
        cadence: a.cadence,
        step_width: a.step_width,
        sway_amplitude: a.sway_amplitude,
        step_variability: a.step_variability,
        noise_sigma: a.noise_sigma,
        duration: a.duration,
        fps: a.fps,
        label: match a.label {
            LabelArg::Healthy => GaitLabel::Healthy,
            LabelArg::Ataxic => GaitLabel::Ataxic,
        },
        severity: a.severity,
        seed: a.seed,
    };
    let seq = generate_sequence(&params)?;
    if let Some(parent) = a.output.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    save_sequence(&seq, &a.output)?;
    println!("{}: {} frames", seq.meta.video_id, seq.frames.len());
    write_run_manifest(&sidecar(&a.output), command, Some(a.seed), &[], std::slice::from_ref(&a.output))
}

fn parse_mix(mix: &str) -> Result<DatasetPlan> {
    let mut counts = BTreeMap::new();
    for part in mix.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let (level, count) = part
            .split_once(':')
            .ok_or_else(|| Error::Parameter(format!("mix entry `{part}` is not `severity:count`")))?;
        let parse_err = |_| Error::Parameter(format!("mix entry `{part}` is not `severity:count`"));
        counts.insert(level.parse::<u8>().map_err(parse_err)?, count.parse::<usize>().map_err(parse_err)?);
    }
    Ok(DatasetPlan::mix(counts)?)
}

fn synth_dataset(command: &Command, a: &SynthDatasetArgs) -> Result<()> {
    let plan = match (&a.mix, a.per_class) {
        (Some(mix), _) => parse_mix(mix)?,
        (None, Some(n)) => DatasetPlan::per_class(n),
        (None, None) => unreachable!("clap requires --per-class or --mix"),
    };
    create_dir(&a.out_dir)?;
    let rows = generate_dataset(&a.out_dir, &plan, a.seed)?;
    println!("{} walkers in {}", rows.len(), a.out_dir.display());
    let mut outputs = vec![a.out_dir.join("manifest.csv")];
    outputs.extend(rows.iter().map(|r| a.out_dir.join(&r.path)));
    write_run_manifest(&a.out_dir.join("run-manifest.json"), command, Some(a.seed), &[], &outputs)
}

/// Settings after applying the profile and any explicit overrides.
#[derive(Debug, Serialize)]
struct Resolved {
    profile: Profile,
    task: String,
    #[serde(flatten)]
    train: TrainConfig,
}

fn resolve(h: &Hyper) -> Result<(Arc<dyn Task>, Resolved)> {
    let task = TaskRegistry::default().create(&h.task)?;
    let mut train = match h.profile {
        Profile::Paper => TrainConfig::paper(h.seed),
        Profile::Desk => TrainConfig::desk(h.seed),
    };
    if let Some(lr) = h.lr {
        train.lr = lr;
    }
    if let Some(b) = h.batch_size {
        train.batch_size = b;
    }
    if let Some(e) = h.epochs {
        train.epochs = e;
    }
    train.validate()?;
    Ok((task, Resolved { profile: h.profile, task: h.task.clone(), train }))
}

fn load_model(path: &Path) -> Result<(Model, TrainingState)> {
    let raw = checkpoint::read_file(path)?;
    let graph = raw.manifest.graph()?;
    Ok(raw.into_model(graph)?)
}

fn backbone_for(h: &Hyper, train: &[GaitCycle]) -> Result<Model> {
    match &h.backbone {
        Some(path) => Ok(load_model(path)?.0),
        None => {
            let graph = graph_from_cycles(&SkeletonLayout::openpose18(), train, &PartitionConfig::default())?;
            Ok(build_backbone(graph, derive_seed(h.seed, tag("backbone")))?)
        }
    }
}

fn hyper_inputs(h: &Hyper, cycles: &Path) -> Result<Vec<PathBuf>> {
    let mut inputs = manifest_inputs(cycles)?;
    inputs.extend(h.backbone.iter().cloned());
    Ok(inputs)
}

fn train(command: &Command, a: &TrainArgs) -> Result<()> {
    let (task, resolved) = resolve(&a.hyper)?;
    let cycles = load_cycles(&a.cycles)?;
    let refs: Vec<&GaitCycle> = cycles.iter().collect();
    let model = backbone_for(&a.hyper, &cycles)?
        .truncate(a.level)?
        .attach_head(task.head(), derive_seed(a.hyper.seed, tag("head")))?;
    let outcome = finetune_all(&model, &refs, task.as_ref(), &resolved.train)?;
    let train_score = score(&outcome.model, &refs, task.as_ref())?;

    create_dir(&a.out_dir)?;
    let ckpt = a.out_dir.join("model.ckpt");
    let state = TrainingState { seed: a.hyper.seed, epochs_completed: outcome.losses.len(), steps: outcome.steps };
    checkpoint::save(&outcome.model, &state, &ckpt)?;
    let mut losses = String::from("epoch\tloss\n");
    for (e, l) in outcome.losses.iter().enumerate() {
        let _ = writeln!(losses, "{}\t{l}", e + 1);
    }
    let loss_path = a.out_dir.join("losses.tsv");
    write_text(&loss_path, &losses)?;
    println!(
        "l={} {} parameters, final loss {:.6}, training score {train_score:.4}",
        a.level,
        outcome.model.parameter_count(),
        outcome.losses.last().copied().unwrap_or(f64::NAN)
    );
    write_run_manifest(
        &a.out_dir.join("run-manifest.json"),
        command,
        Some(a.hyper.seed),
        &hyper_inputs(&a.hyper, &a.cycles)?,
        &[ckpt, loss_path],
    )
}

fn parse_levels(spec: &str) -> Result<Vec<usize>> {
    let bad = || Error::Parameter(format!("levels `{spec}` are not `a-b` or a comma list"));
    let levels: Vec<usize> = if let Some((a, b)) = spec.split_once('-') {
        let (a, b): (usize, usize) = (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?);
        (a..=b).collect()
    } else {
        spec.split(',').map(|s| s.trim().parse().map_err(|_| bad())).collect::<Result<_, _>>()?
    };
    if levels.is_empty() {
        bail!(bad());
    }
    Ok(levels)
}

fn strata(cycles: &[GaitCycle], task: &dyn Task) -> Result<Vec<(String, usize)>> {
    let mut seen = BTreeSet::new();
    let mut videos = Vec::new();
    for c in cycles {
        if seen.insert(c.source_video_id.clone()) {
            videos.push((c.source_video_id.clone(), task.target(c)?.round() as usize));
        }
    }
    Ok(videos)
}

fn search(command: &Command, a: &SearchArgs) -> Result<()> {
    let (task, resolved) = resolve(&a.hyper)?;
    let levels = parse_levels(&a.levels)?;
    if !(a.val_fraction > 0.0 && a.val_fraction < 1.0) {
        bail!(Error::Parameter(format!("validation fraction {} outside (0, 1)", a.val_fraction)));
    }
    let cycles = load_cycles(&a.cycles)?;
    let folds = ((1.0 / a.val_fraction).round() as usize).max(2);
    let plan = make_folds(&strata(&cycles, task.as_ref())?, folds, derive_seed(a.hyper.seed, tag("validation")))?;
    let (val, train): (Vec<&GaitCycle>, Vec<&GaitCycle>) =
        cycles.iter().partition(|c| plan.fold_of(&c.source_video_id) == Some(0));
    let train_owned: Vec<GaitCycle> = train.iter().map(|c| (*c).clone()).collect();
    let backbone = backbone_for(&a.hyper, &train_owned)?;
    let result = truncation_search(&backbone, &train, &val, task.as_ref(), &resolved.train, &levels)?;

    create_dir(&a.out_dir)?;
    let mut scores = String::from("level\tscore\tfinal_loss\tparameters\n");
    let mut losses = String::from("level\tepoch\tloss\n");
    for ((l, s), run) in result.levels.iter().zip(&result.scores).zip(&result.artifacts) {
        let last = run.losses.last().copied().unwrap_or(f64::NAN);
        let _ = writeln!(scores, "{l}\t{s}\t{last}\t{}", run.model.parameter_count());
        for (e, v) in run.losses.iter().enumerate() {
            let _ = writeln!(losses, "{l}\t{}\t{v}", e + 1);
        }
    }
    let best = result.best();
    let ckpt = a.out_dir.join("best.ckpt");
    let state = TrainingState { seed: best.seed, epochs_completed: best.losses.len(), steps: 0 };
    checkpoint::save(&best.model, &state, &ckpt)?;
    let (scores_path, losses_path) = (a.out_dir.join("scores.tsv"), a.out_dir.join("losses.tsv"));
    write_text(&scores_path, &scores)?;
    write_text(&losses_path, &losses)?;
    print!("{scores}");
    println!("best l={} ({} training, {} validation cycles)", result.best_l, train.len(), val.len());
    write_run_manifest(
        &a.out_dir.join("run-manifest.json"),
        command,
        Some(a.hyper.seed),
        &hyper_inputs(&a.hyper, &a.cycles)?,
        &[scores_path, losses_path, ckpt],
    )
}

#[derive(Serialize)]
struct EvalPlan<'a> {
    #[serde(flatten)]
    resolved: &'a Resolved,
    level: usize,
    folds: usize,
    repeats: usize,
}

fn eval(command: &Command, a: &EvalArgs) -> Result<()> {
    let (task, resolved) = resolve(&a.hyper)?;
    let (default_folds, default_repeats) = match a.hyper.profile {
        Profile::Paper => (10, 20),
        Profile::Desk => (10, 2),
    };
    let plan = EvalPlan {
        resolved: &resolved,
        level: a.level,
        folds: a.folds.unwrap_or(default_folds),
        repeats: a.repeats.unwrap_or(default_repeats),
    };
    if a.dry_run {
        println!("{}", serde_json::to_string_pretty(&plan)?);
        return Ok(());
    }
    let (cycles_path, out_dir) = match (&a.cycles, &a.out_dir) {
        (Some(c), Some(o)) => (c, o),
        _ => unreachable!("clap requires --cycles and --out-dir without --dry-run"),
    };
    let cycles = load_cycles(cycles_path)?;
    let mut recipe = AtgcnRecipe::new(a.level, task, resolved.train.clone());
    if let Some(path) = &a.hyper.backbone {
        recipe.backbone = Some(load_model(path)?.0);
    }
    let report = cross_validate(&cycles, &recipe, plan.folds, plan.repeats, a.hyper.seed)?;

    create_dir(out_dir)?;
    let outputs: Vec<PathBuf> = [
        ("summary.tsv", report.summary_tsv()),
        ("cells.tsv", report.cells_tsv()),
        ("report.json", serde_json::to_string_pretty(&report)?),
    ]
    .into_iter()
    .map(|(name, text)| {
        let path = out_dir.join(name);
        write_text(&path, &text).map(|_| path)
    })
    .collect::<Result<_>>()?;
    print!("{}", report.summary_tsv());
    write_run_manifest(
        &out_dir.join("run-manifest.json"),
        command,
        Some(a.hyper.seed),
        &hyper_inputs(&a.hyper, cycles_path)?,
        &outputs,
    )
}

fn predict_cmd(command: &Command, a: &PredictArgs) -> Result<()> {
    let (model, _) = load_model(&a.checkpoint)?;
    let task: &dyn Task = match model.head_kind() {
        Some(HeadKind::Classification) => &Classification,
        Some(HeadKind::Regression) => &Regression,
        other => bail!(Error::Model(format!(
            "checkpoint head {:?} is neither a classifier nor a regressor",
            other.map(HeadKind::as_str)
        ))),
    };
    let cycles = load_cycles(&a.cycles)?;
    let refs: Vec<&GaitCycle> = cycles.iter().collect();
    let prediction = predict(&model, &refs, task)?;
    let mut tsv = String::from("video_id\tcycles\tvalue\ttarget\n");
    for v in &prediction.per_video {
        let target = v.target.map_or_else(|| "NA".to_string(), |t| t.to_string());
        let _ = writeln!(tsv, "{}\t{}\t{}\t{target}", v.video_id, v.cycles, v.value);
    }
    if let Some(parent) = a.output.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    write_text(&a.output, &tsv)?;
    print!("{tsv}");
    let mut inputs = vec![a.checkpoint.clone()];
    inputs.extend(manifest_inputs(&a.cycles)?);
    write_run_manifest(&sidecar(&a.output), command, None, &inputs, std::slice::from_ref(&a.output))
}
