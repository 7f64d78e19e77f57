use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::net::SocketAddr;
use std::path::Path;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use serde_json::json;

use rollout_eval::annotation::{
    self, render_study_table, server, study_report, AnnotationPacket, Rating, RatingStore, Study,
};
use rollout_eval::bridge::{
    collect_predictions, BridgeClient, BridgeError, MockOracle, MockOracleConfig, Prediction,
};
use rollout_eval::describe::{
    answer_space, load_phrase_table, ActionRules, DescribeError, Describer,
};
use rollout_eval::ingest::{
    discover_manifests, ingest_manifests, Clip, IngestConfig, IngestError, DEFAULT_CLIP_LENGTH,
};
use rollout_eval::metrics::{aggregate, render_table, score, Grouping, NgramMode, ScoreRecord};
use rollout_eval::prompt::{assemble, PromptParams, PromptRecord, DEFAULT_CUE, DEFAULT_PATCHES_PER_FRAME};
use rollout_eval::qa::{AnswerSpaces, QaBuilder, QaItem, QaMode, QaTemplates};
use rollout_eval::sampler::{
    enumerate_grid, plan_epoch, sample_frames, EpochPlan, FrameSamplingPolicy, MixConfig,
    SamplingKind,
};
use rollout_eval::synthetic::{write_corpus, SyntheticConfig};
use rollout_eval::util::{digest_file, read_records, write_records, FileHeader, RecordError};
use rollout_eval::Task;

use crate::config::{pick, require, RunConfig};
use crate::{
    AnnotateCommand, AssembleArgs, BuildQaArgs, Cli, CliError, Command, EvaluateArgs, GridArgs,
    IngestArgs, MockServeArgs, PlanMixArgs, PolicyArgs, SynthArgs,
};

const DEFAULT_BUDGET: usize = 1000;
const DEFAULT_N_FRAMES: usize = 8;
const DEFAULT_ENDPOINT: &str = "127.0.0.1:7878";
const DEFAULT_PORT: u16 = 7878;
const DEFAULT_ANNOTATE_PORT: u16 = 8080;

impl From<RecordError> for CliError {
    fn from(e: RecordError) -> Self {
        match e {
            RecordError::Parse { .. } => CliError::Validation(e.to_string()),
            RecordError::Io { .. } => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<IngestError> for CliError {
    fn from(e: IngestError) -> Self {
        match e {
            IngestError::Io { .. } => CliError::Runtime(e.to_string()),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<DescribeError> for CliError {
    fn from(e: DescribeError) -> Self {
        match e {
            DescribeError::Io(_) => CliError::Runtime(e.to_string()),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<BridgeError> for CliError {
    fn from(e: BridgeError) -> Self {
        match e {
            BridgeError::InvalidRequest(_) | BridgeError::EmptyInput | BridgeError::UnknownItem(_) => {
                CliError::Validation(e.to_string())
            }
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<annotation::AnnotationError> for CliError {
    fn from(e: annotation::AnnotationError) -> Self {
        match e {
            annotation::AnnotationError::Io(_) => CliError::Runtime(e.to_string()),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

fn validation(e: impl std::fmt::Display) -> CliError {
    CliError::Validation(e.to_string())
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

struct Ctx {
    cfg: RunConfig,
    seed: u64,
}

impl Ctx {
    fn header(&self, kind: &str, inputs: &[(&str, &Path)], config: serde_json::Value) -> Result<FileHeader, CliError> {
        let mut h = FileHeader::new(kind, self.seed).with_config(config);
        for (name, path) in inputs {
            h = h.with_input(name, digest_file(path).map_err(|e| runtime(format!("{}: {e}", path.display())))?);
        }
        Ok(h)
    }

    fn clip_length(&self, flag: Option<usize>) -> usize {
        pick(flag, self.cfg.clip_length, DEFAULT_CLIP_LENGTH)
    }

    fn policy(&self, args: &PolicyArgs) -> Result<(FrameSamplingPolicy, usize), CliError> {
        let kind = pick(args.policy, self.cfg.policy, SamplingKind::Uniform);
        let n = pick(args.n_frames, self.cfg.n_frames, DEFAULT_N_FRAMES);
        let length = self.clip_length(args.clip_length);
        let policy = FrameSamplingPolicy { kind, n };
        sample_frames(length, policy).map_err(validation)?;
        Ok((policy, length))
    }
}

fn ensure_parent(path: &Path) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| runtime(format!("{}: {e}", dir.display())))?;
    }
    Ok(())
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    ensure_parent(path)?;
    let text = serde_json::to_string_pretty(value).map_err(runtime)? + "\n";
    std::fs::write(path, text).map_err(|e| runtime(format!("{}: {e}", path.display())))
}

fn write_out<T: Serialize>(path: &Path, header: &FileHeader, records: &[T]) -> Result<(), CliError> {
    ensure_parent(path)?;
    write_records(path, Some(header), records)?;
    log::info!("wrote {} records to {}", records.len(), path.display());
    Ok(())
}

fn read<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>, CliError> {
    Ok(read_records(require(path)?)?.1)
}

pub fn dispatch(cli: Cli) -> Result<(), CliError> {
    let cfg = match &cli.config {
        Some(path) => RunConfig::load(require(path)?)?,
        None => RunConfig::default(),
    };
    let ctx = Ctx {
        seed: pick(cli.seed, cfg.seed, 0),
        cfg,
    };
    match cli.command {
        Command::Ingest(a) => ingest(&ctx, a),
        Command::BuildQa(a) => build_qa(&ctx, a),
        Command::PlanMix(a) => plan_mix(&ctx, a),
        Command::Assemble(a) => assemble_prompts(&ctx, a),
        Command::Evaluate(a) => evaluate(&ctx, a),
        Command::MockServe(a) => mock_serve(&ctx, a),
        Command::Annotate(a) => annotate(&ctx, a),
        Command::Grid(a) => grid(&ctx, a),
        Command::Synth(a) => synth(&ctx, a),
    }
}

fn ingest(ctx: &Ctx, a: IngestArgs) -> Result<(), CliError> {
    let mut manifests = Vec::new();
    for input in &a.inputs {
        if require(input)?.is_dir() {
            manifests.extend(discover_manifests(input)?);
        } else {
            manifests.push(input.clone());
        }
    }
    manifests.sort();
    manifests.dedup();
    if manifests.is_empty() {
        return Err(validation("no session manifests found"));
    }
    let clip_length = ctx.clip_length(a.clip_length);
    let cfg = IngestConfig {
        character_vocabulary: (!a.any_character).then(|| {
            rollout_eval::describe::LabelVocabulary::default_cr()
                .labels()
                .to_vec()
        }),
        sync_tolerance: a.sync_tolerance,
        check_frames: !a.no_check_frames,
    };
    let out = ingest_manifests(&manifests, clip_length, &cfg)?;
    log::info!(
        "{} clips from {} manifests; {} sessions rejected; {} clips dropped",
        out.clips.len(),
        manifests.len(),
        out.rejected.len(),
        out.dropped.total
    );
    let mut header = FileHeader::new("clips", ctx.seed).with_config(json!({
        "clip_length": clip_length,
        "sync_tolerance": a.sync_tolerance,
        "any_character": a.any_character,
        "check_frames": !a.no_check_frames,
    }));
    for m in &manifests {
        let digest = digest_file(m).map_err(runtime)?;
        let name = m
            .parent()
            .and_then(Path::file_name)
            .map(|d| Path::new(d).join(m.file_name().unwrap_or_default()))
            .unwrap_or_else(|| m.clone());
        header = header.with_input(&name.to_string_lossy(), digest);
    }
    write_out(&a.out, &header, &out.clips)?;
    if let Some(path) = &a.summary {
        write_json(
            path,
            &json!({
                "manifests": manifests.len(),
                "clips": out.clips.len(),
                "rejected": out.rejected,
                "dropped": out.dropped,
            }),
        )?;
    }
    Ok(())
}

fn build_qa(ctx: &Ctx, a: BuildQaArgs) -> Result<(), CliError> {
    let clips: Vec<Clip> = read(&a.clips)?;
    let mode = pick(a.mode, ctx.cfg.mode, QaMode::Sampled6);
    let templates_path = a.templates.or(ctx.cfg.templates.clone());
    let rules_path = a.rules.or(ctx.cfg.rules.clone());
    let phrases_path = a.phrases.or(ctx.cfg.phrases.clone());

    let templates = match &templates_path {
        Some(p) => QaTemplates::from_file(require(p)?).map_err(validation)?,
        None => QaTemplates::default(),
    };
    let mut describer = Describer::default();
    if let Some(p) = &rules_path {
        describer = Describer::new(
            ActionRules::from_file(require(p)?)?,
            describer.ar.clone(),
            describer.cr.clone(),
        )?;
    }
    if let Some(p) = &phrases_path {
        describer.phrases = load_phrase_table(require(p)?)?;
    }
    let (descs, skipped) = describer.describe_all(&clips)?;
    if !skipped.is_empty() {
        log::warn!("{} clips could not be labelled and were skipped", skipped.len());
    }
    let spaces = AnswerSpaces {
        ar: answer_space(&descs, Task::AR, &describer.ar, a.full_answer_space)?,
        cr: answer_space(&descs, Task::CR, &describer.cr, a.full_answer_space)?,
    };
    let items = QaBuilder::new(templates, false)
        .build_dataset(&descs, &spaces, mode, ctx.seed)
        .map_err(validation)?;
    log::info!("{} items from {} clips ({mode:?})", items.len(), descs.len());

    let mut inputs: Vec<(&str, &Path)> = vec![("clips", &a.clips)];
    for (name, p) in [("templates", &templates_path), ("rules", &rules_path), ("phrases", &phrases_path)] {
        if let Some(p) = p {
            inputs.push((name, p.as_path()));
        }
    }
    let header = ctx.header(
        "qa_dataset",
        &inputs,
        json!({
            "mode": mode,
            "full_answer_space": a.full_answer_space,
            "answer_space": {"AR": spaces.ar.labels(), "CR": spaces.cr.labels()},
            "skipped_clips": skipped.len(),
        }),
    )?;
    write_out(&a.out, &header, &items)?;
    if let Some(path) = &a.descriptions {
        let h = ctx.header("descriptions", &inputs, json!({}))?;
        write_out(path, &h, &descs)?;
    }
    Ok(())
}

fn resolve_mix(flag: Option<&str>, file: Option<MixConfig>) -> Result<MixConfig, CliError> {
    let mix = match flag {
        Some("optimized") => MixConfig::optimized(),
        Some("uniform") => MixConfig::uniform(),
        Some(path) => MixConfig::from_file(require(Path::new(path))?).map_err(validation)?,
        None => file.unwrap_or_else(MixConfig::optimized),
    };
    mix.validate().map_err(validation)?;
    Ok(mix)
}

fn plan_mix(ctx: &Ctx, a: PlanMixArgs) -> Result<(), CliError> {
    let items: Vec<QaItem> = read(&a.dataset)?;
    let mix = resolve_mix(a.mix.as_deref(), ctx.cfg.mix)?;
    let budget = pick(a.budget, ctx.cfg.budget, DEFAULT_BUDGET);
    let plan = plan_epoch(&items, &mix, budget, ctx.seed).map_err(validation)?;
    let header = ctx.header("epoch_plan", &[("dataset", &a.dataset)], json!({"mix": mix, "budget": budget}))?;
    write_out(&a.out, &header, &[plan])
}

fn read_plan(path: &Path) -> Result<EpochPlan, CliError> {
    let mut plans: Vec<EpochPlan> = read(path)?;
    if plans.len() != 1 {
        return Err(validation(format!("{}: expected one plan record", path.display())));
    }
    Ok(plans.remove(0))
}

fn assemble_prompts(ctx: &Ctx, a: AssembleArgs) -> Result<(), CliError> {
    let plan = read_plan(&a.plan)?;
    let items: Vec<QaItem> = read(&a.dataset)?;
    let by_id: HashMap<&str, &QaItem> = items.iter().map(|i| (i.item_id.as_str(), i)).collect();
    let (policy, length) = ctx.policy(&a.policy)?;
    let frame_indices = sample_frames(length, policy).map_err(validation)?;
    let patches = pick(a.patches_per_frame, ctx.cfg.patches_per_frame, DEFAULT_PATCHES_PER_FRAME);
    let pad_to = a.pad_to.or(ctx.cfg.pad_to);
    let mut records = Vec::with_capacity(plan.entries.len());
    for id in &plan.entries {
        let item = by_id
            .get(id.as_str())
            .ok_or_else(|| validation(format!("plan entry `{id}` is not in the dataset")))?;
        let params = PromptParams {
            patches_per_frame: patches,
            pad_to,
            ..PromptParams::new(
                policy.n,
                &item.question,
                (!a.inference).then_some(item.answer.as_str()),
            )
        };
        let ps = assemble(&params).map_err(validation)?;
        records.push(PromptRecord::from_sequence(id, &params, frame_indices.clone(), &ps));
    }
    let header = ctx.header(
        "prompts",
        &[("plan", &a.plan), ("dataset", &a.dataset)],
        json!({
            "policy": policy,
            "clip_length": length,
            "patches_per_frame": patches,
            "pad_to": pad_to,
            "cue": DEFAULT_CUE,
            "inference": a.inference,
            "eos_in_loss": !a.inference,
        }),
    )?;
    write_out(&a.out, &header, &records)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunPrediction {
    pub run: usize,
    #[serde(flatten)]
    pub prediction: Prediction,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunScore {
    pub run: usize,
    #[serde(flatten)]
    pub score: ScoreRecord,
}

fn evaluate(ctx: &Ctx, a: EvaluateArgs) -> Result<(), CliError> {
    let mut items: Vec<QaItem> = read(&a.dataset)?;
    let mut inputs: Vec<(&str, &Path)> = vec![("dataset", &a.dataset)];
    if let Some(p) = &a.plan {
        let plan = read_plan(p)?;
        let wanted: BTreeSet<&str> = plan.entries.iter().map(String::as_str).collect();
        items.retain(|i| wanted.contains(i.item_id.as_str()));
        inputs.push(("plan", p));
    }
    if items.is_empty() {
        return Err(validation("nothing to evaluate"));
    }
    let (policy, length) = ctx.policy(&a.policy)?;
    let indices = sample_frames(length, policy).map_err(validation)?;
    let clip_frames: Option<HashMap<String, Vec<String>>> = match &a.clips {
        Some(p) => {
            inputs.push(("clips", p));
            let clips: Vec<Clip> = read(p)?;
            Some(clips.into_iter().map(|c| (c.clip_id, c.frames)).collect())
        }
        None => None,
    };
    let frames_for = |item: &QaItem| -> Option<Vec<String>> {
        match &clip_frames {
            Some(map) => {
                let frames = map.get(&item.clip_id)?;
                indices.iter().map(|&i| frames.get(i).cloned()).collect()
            }
            None => Some(indices.iter().map(|i| format!("{}#{i}", item.clip_id)).collect()),
        }
    };

    let endpoint = pick(a.endpoint, ctx.cfg.endpoint.clone(), DEFAULT_ENDPOINT.to_string());
    let num_samples = pick(a.num_samples, ctx.cfg.num_samples, rollout_eval::bridge::DEFAULT_NUM_SAMPLES);
    let runs = pick(a.runs, ctx.cfg.runs, 1).max(1);
    let client = BridgeClient::new(&endpoint);

    let mut all_preds = Vec::new();
    let mut all_scores = Vec::new();
    let mut per_run = Vec::new();
    let mut model_tags = BTreeSet::new();
    for run in 0..runs {
        let seed = rollout_eval::util::derive_seed(ctx.seed, &["run", &run.to_string()]);
        let preds = collect_predictions(&client, &items, frames_for, num_samples, seed)?;
        let scores = score(&preds, &items, NgramMode::Set).map_err(validation)?;
        model_tags.extend(preds.iter().map(|p| p.model_tag.clone()));
        all_preds.extend(preds.into_iter().map(|prediction| RunPrediction { run, prediction }));
        all_scores.extend(scores.iter().cloned().map(|score| RunScore { run, score }));
        per_run.push(scores);
    }
    let groupings = [Grouping::TaskFormat, Grouping::Task, Grouping::Format, Grouping::Overall];
    let reports = aggregate(&per_run, &groupings);

    let config = json!({
        "policy": policy,
        "clip_length": length,
        "num_samples": num_samples,
        "runs": runs,
        "ngram": NgramMode::Set,
        "model_tags": model_tags,
    });
    let out = &a.out;
    std::fs::create_dir_all(out).map_err(|e| runtime(format!("{}: {e}", out.display())))?;
    let header = ctx.header("predictions", &inputs, config.clone())?;
    write_out(&out.join("predictions.jsonl"), &header, &all_preds)?;
    let header = ctx.header("scores", &inputs, config.clone())?;
    write_out(&out.join("scores.jsonl"), &header, &all_scores)?;
    let header = ctx.header("report", &inputs, config)?;
    write_out(&out.join("report.jsonl"), &header, &reports)?;
    std::fs::write(out.join("report.md"), render_table(&reports)).map_err(runtime)?;
    Ok(())
}

fn mock_serve(ctx: &Ctx, a: MockServeArgs) -> Result<(), CliError> {
    let items: Vec<QaItem> = read(&a.dataset)?;
    let epsilon = pick(a.epsilon, ctx.cfg.epsilon, 0.0);
    let port = pick(a.port, ctx.cfg.port, DEFAULT_PORT);
    let oracle = MockOracle::new(items, MockOracleConfig { epsilon, seed: ctx.seed })?;
    let listener = std::net::TcpListener::bind((a.host.as_str(), port)).map_err(runtime)?;
    let addr = listener.local_addr().map_err(runtime)?;
    eprintln!("mock evaluator ({}) listening on {addr}", oracle.model_tag);
    rollout_eval::bridge::serve_loop(
        listener,
        Arc::new(oracle),
        Arc::new(std::sync::atomic::AtomicBool::new(false)),
    );
    Ok(())
}

fn read_predictions(path: &Path) -> Result<Vec<Prediction>, CliError> {
    let preds: Vec<RunPrediction> = read(path)?;
    Ok(preds
        .into_iter()
        .filter(|p| p.run == 0)
        .map(|p| p.prediction)
        .collect())
}

fn annotate(ctx: &Ctx, cmd: AnnotateCommand) -> Result<(), CliError> {
    match cmd {
        AnnotateCommand::Export {
            dataset,
            predictions,
            clips,
            hints,
            out,
        } => {
            let items: Vec<QaItem> = read(&dataset)?;
            let preds = read_predictions(&predictions)?;
            let clip_list: Vec<Clip> = read(&clips)?;
            let hint_map: BTreeMap<Task, Vec<String>> = match &hints {
                Some(p) => serde_json::from_str(
                    &std::fs::read_to_string(require(p)?).map_err(runtime)?,
                )
                .map_err(|e| validation(format!("{}: {e}", p.display())))?,
                None => BTreeMap::new(),
            };
            let wanted: BTreeSet<&str> = preds.iter().map(|p| p.item_id.as_str()).collect();
            let items: Vec<QaItem> = items
                .into_iter()
                .filter(|i| wanted.contains(i.item_id.as_str()))
                .collect();
            let packets = annotation::export_packets(&items, &preds, &clip_list, &hint_map)?;
            let mut inputs: Vec<(&str, &Path)> =
                vec![("dataset", &dataset), ("predictions", &predictions), ("clips", &clips)];
            if let Some(h) = &hints {
                inputs.push(("hints", h));
            }
            let header = ctx.header("packets", &inputs, json!({}))?;
            write_out(&out, &header, &packets)
        }
        AnnotateCommand::Serve {
            packets,
            ratings,
            port,
            host,
        } => {
            let packet_list: Vec<AnnotationPacket> = read(&packets)?;
            ensure_parent(&ratings)?;
            let study = Study::new(packet_list, RatingStore::open(&ratings)?);
            let port = pick(port, ctx.cfg.port, DEFAULT_ANNOTATE_PORT);
            let addr: SocketAddr = format!("{host}:{port}").parse().map_err(validation)?;
            server::serve_blocking(addr, Arc::new(Mutex::new(study)), |bound| {
                eprintln!("annotation server listening on http://{bound}");
            })
            .map_err(runtime)
        }
        AnnotateCommand::Import {
            packets,
            ratings,
            files,
        } => {
            let packet_list: Vec<AnnotationPacket> = read(&packets)?;
            let known: BTreeSet<&str> = packet_list.iter().map(|p| p.packet_id.as_str()).collect();
            let mut incoming: Vec<Rating> = Vec::new();
            for f in &files {
                incoming.extend(annotation::store::read_ratings(require(f)?)?);
            }
            if let Some(r) = incoming.iter().find(|r| !known.contains(r.packet_id.as_str())) {
                return Err(validation(format!("rating for unknown packet `{}`", r.packet_id)));
            }
            ensure_parent(&ratings)?;
            let mut study = Study::new(packet_list.clone(), RatingStore::open(&ratings)?);
            let applied = study.import(incoming)?;
            log::info!("imported {applied} ratings into {}", ratings.display());
            Ok(())
        }
        AnnotateCommand::Report {
            packets,
            ratings,
            group,
            sigma,
            confidence,
            out,
            table,
        } => {
            let packet_list: Vec<AnnotationPacket> = read(&packets)?;
            let store = RatingStore::open(require(&ratings)?)?;
            let reports = study_report(&packet_list, &store.ratings(), group, sigma, confidence)?;
            let header = ctx.header(
                "study_report",
                &[("packets", &packets), ("ratings", &ratings)],
                json!({"group": group, "sigma": sigma, "confidence": confidence}),
            )?;
            write_out(&out, &header, &reports)?;
            if let Some(t) = &table {
                ensure_parent(t)?;
                std::fs::write(t, render_study_table(&reports)).map_err(runtime)?;
            }
            Ok(())
        }
    }
}

fn grid(ctx: &Ctx, a: GridArgs) -> Result<(), CliError> {
    let items: Vec<QaItem> = read(&a.dataset)?;
    let budget = pick(a.budget, ctx.cfg.budget, DEFAULT_BUDGET);
    std::fs::create_dir_all(&a.out).map_err(runtime)?;
    let mut index = Vec::new();
    for (i, mix) in enumerate_grid(a.stage).into_iter().enumerate() {
        let plan = plan_epoch(&items, &mix, budget, ctx.seed).map_err(validation)?;
        let name = format!("plan-{i:02}.jsonl");
        let header = ctx.header(
            "epoch_plan",
            &[("dataset", &a.dataset)],
            json!({"mix": mix, "budget": budget, "stage": a.stage, "index": i}),
        )?;
        write_out(&a.out.join(&name), &header, &[plan])?;
        index.push(json!({"index": i, "file": name, "mix": mix}));
    }
    let header = ctx.header("grid_index", &[("dataset", &a.dataset)], json!({"stage": a.stage, "budget": budget}))?;
    write_out(&a.out.join("index.jsonl"), &header, &index)
}

fn synth(ctx: &Ctx, a: SynthArgs) -> Result<(), CliError> {
    for (name, v) in [("rollout_fraction", a.rollout_fraction), ("flagged_fraction", a.flagged_fraction)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(validation(format!("{name} must lie in [0, 1]")));
        }
    }
    let cfg = SyntheticConfig {
        sessions: a.sessions,
        clips_per_session: a.clips_per_session,
        rollout_fraction: a.rollout_fraction,
        flagged_fraction: a.flagged_fraction,
        write_frames: !a.no_frames,
        seed: ctx.seed,
        ..SyntheticConfig::default()
    };
    let corpus = write_corpus(&a.out, &cfg).map_err(runtime)?;
    log::info!("wrote {} sessions under {}", corpus.manifests.len(), a.out.display());
    Ok(())
}
