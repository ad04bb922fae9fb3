//! The commands: data generation, staged training, evaluation and the
//! ablation sweeps. Every output lands in the run directory.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use onellm_core::data::{build_examples, Example, Renderer};
use onellm_core::model::{ExpertInit, OneLlm};
use onellm_core::optim::AdamWConfig;
use onellm_core::pipeline::{
    evaluate, pretrain_decoder, train_alignment_stage, train_instruction, validation_loss, Corpus, EvalFormat,
    EvalReport, EvalTask, Phase, ReplayMode, StageId, StagePlan, StageReport, TrainOptions, TrainState, TrainingMode,
};
use onellm_core::upm::RouterType;
use onellm_core::ModalityId;
use serde::Serialize;

use crate::binio::{fnv64, write_atomic};
use crate::checkpoint::{checkpoint_path, read_checkpoint, save};
use crate::config::{RunConfig, StageSection};
use crate::exec::PoolExecutor;
use crate::manifest::{load_manifest, write_manifest, Manifest, Split};
use crate::metrics::{cell, write_json, StepLog, Table};
use crate::{Error, Result};

type Sets = BTreeMap<ModalityId, Vec<Example<f32>>>;

fn corpus(sets: &Sets) -> Corpus<'_> {
    sets.iter().map(|(m, v)| (*m, v.as_slice())).collect()
}

/// Modalities a model has been aligned on once `stage` is done.
pub fn stage_modalities(stage: StageId) -> Vec<ModalityId> {
    use ModalityId::*;
    match stage {
        StageId::I => vec![Image],
        StageId::II => vec![Image, Video, Audio, Point],
        StageId::III | StageId::Instruct => ModalityId::ALL.to_vec(),
    }
}

fn prerequisite(stage: StageId) -> Option<StageId> {
    match stage {
        StageId::I => None,
        StageId::II => Some(StageId::I),
        StageId::III => Some(StageId::II),
        StageId::Instruct => Some(StageId::III),
    }
}

fn hex(h: u64) -> String {
    format!("{h:016x}")
}

fn routing_cell(r: &[f64]) -> String {
    r.iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>().join("/")
}

/// Summary of one `train` invocation, written as `report_<stage>.json`.
#[derive(Debug, Clone, Serialize)]
pub struct TrainSummary {
    pub stage: StageId,
    pub seed: u64,
    pub data_seed: u64,
    pub config_hash: String,
    pub checkpoint: PathBuf,
    pub phases: Vec<StageReport>,
    /// Held-out caption loss per aligned modality.
    pub validation: Vec<(ModalityId, f64)>,
}

impl TrainSummary {
    pub fn table(&self) -> Table {
        let mut t = Table::new(
            format!("stage {} report", self.stage),
            &["modality", "train loss", "val loss", "routing"],
        );
        t.note(format!("seed {}  data seed {}  checkpoint {}", self.seed, self.data_seed, self.checkpoint.display()));
        for p in &self.phases {
            t.note(format!(
                "{} phase: {} steps, {} trainable values, loss {:.4} -> {:.4}",
                p.phase, p.steps, p.trainable_params, p.first_loss, p.final_loss
            ));
        }
        let last = self.phases.last();
        for &(m, v) in &self.validation {
            let train = last.and_then(|p| p.modality_losses.iter().find(|x| x.0 == m)).map(|x| x.1);
            let routing = last
                .and_then(|p| p.routing.iter().find(|x| x.0 == m))
                .map_or_else(|| "-".into(), |x| routing_cell(&x.1));
            t.row(vec![m.to_string(), cell(train, 4), format!("{v:.4}"), routing]);
        }
        t
    }
}

/// Result of one `eval` invocation, written as `eval_<label>.json`.
#[derive(Debug, Clone, Serialize)]
pub struct EvalSummary {
    pub label: String,
    pub checkpoint: PathBuf,
    pub tasks: Vec<EvalTask>,
    pub eval_seeds: (u64, u64),
    pub report: EvalReport,
}

fn eval_table(title: String, report: &EvalReport) -> Table {
    let mut t = Table::new(
        title,
        &["modality", "items", "caption EM", "QA token acc", "option acc", "perplexity", "routing"],
    );
    for r in &report.per_modality {
        t.row(vec![
            r.modality.to_string(),
            r.items.to_string(),
            cell(r.caption_exact_match, 4),
            cell(r.qa_token_accuracy, 4),
            cell(r.option_accuracy, 4),
            cell(r.perplexity, 4),
            routing_cell(&r.routing),
        ]);
    }
    t
}

impl EvalSummary {
    pub fn table(&self) -> Table {
        let mut t = eval_table(format!("eval {} ({:?} format)", self.label, self.report.format), &self.report);
        t.note(format!(
            "checkpoint {}  held-out seeds {}..{}",
            self.checkpoint.display(),
            self.eval_seeds.0,
            self.eval_seeds.1
        ));
        t
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    /// Joint versus separate instruction tuning.
    Mode,
    /// Image-initialised versus random experts.
    Init,
    Experts,
    Router,
    /// Frozen versus trainable encoder.
    Encoder,
    /// Uniform, half and no replay in stage II.
    Replay,
}

impl Axis {
    pub const ALL: [Axis; 6] = [Axis::Mode, Axis::Init, Axis::Experts, Axis::Router, Axis::Encoder, Axis::Replay];

    pub fn as_str(self) -> &'static str {
        match self {
            Axis::Mode => "mode",
            Axis::Init => "init",
            Axis::Experts => "experts",
            Axis::Router => "router",
            Axis::Encoder => "encoder",
            Axis::Replay => "replay",
        }
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation axis `{s}`")))
    }
}

/// Settings of one stage-II ablation row.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Variant {
    pub experts: usize,
    pub init: ExpertInit,
    pub router: RouterType,
    pub frozen_encoder: bool,
    pub replay: ReplayMode,
}

/// One row of an alignment ablation.
#[derive(Debug, Clone, Serialize)]
pub struct AlignRow {
    pub label: String,
    pub variant: Variant,
    pub final_train_loss: f64,
    pub validation: Vec<(ModalityId, f64)>,
    pub report: EvalReport,
}

/// One row of the training-mode comparison.
#[derive(Debug, Clone, Serialize)]
pub struct ModeRow {
    pub mode: String,
    pub modality: ModalityId,
    pub steps: u64,
    pub metrics: onellm_core::pipeline::ModalityMetrics,
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationSummary {
    pub axis: Axis,
    pub seed: u64,
    pub data_seed: u64,
    pub eval_seeds: (u64, u64),
    pub align_rows: Vec<AlignRow>,
    pub mode_rows: Vec<ModeRow>,
}

impl AblationSummary {
    pub fn table(&self) -> Table {
        let mut t = if self.axis == Axis::Mode {
            let mut t = Table::new(
                "ablation: training mode",
                &["mode", "modality", "steps", "caption EM", "QA token acc", "option acc", "perplexity"],
            );
            for r in &self.mode_rows {
                t.row(vec![
                    r.mode.clone(),
                    r.modality.to_string(),
                    r.steps.to_string(),
                    cell(r.metrics.caption_exact_match, 4),
                    cell(r.metrics.qa_token_accuracy, 4),
                    cell(r.metrics.option_accuracy, 4),
                    cell(r.metrics.perplexity, 4),
                ]);
            }
            t
        } else {
            let mods: Vec<ModalityId> = self
                .align_rows
                .first()
                .map(|r| r.report.per_modality.iter().map(|m| m.modality).collect())
                .unwrap_or_default();
            let mut header: Vec<String> = vec![self.axis.to_string()];
            header.extend(mods.iter().map(|m| format!("{m} EM")));
            header.extend(["mean EM", "image val loss", "mean val loss", "train loss"].map(String::from));
            let h: Vec<&str> = header.iter().map(String::as_str).collect();
            let mut t = Table::new(format!("ablation: {}", self.axis), &h);
            for r in &self.align_rows {
                let ems: Vec<Option<f64>> = r.report.per_modality.iter().map(|m| m.caption_exact_match).collect();
                let mean_em = ems.iter().copied().sum::<Option<f64>>().map(|s| s / ems.len().max(1) as f64);
                let img = r.validation.iter().find(|v| v.0 == ModalityId::Image).map(|v| v.1);
                let mean_val = r.validation.iter().map(|v| v.1).sum::<f64>() / r.validation.len().max(1) as f64;
                let mut row = vec![r.label.clone()];
                row.extend(ems.iter().map(|e| cell(*e, 4)));
                row.push(cell(mean_em, 4));
                row.push(cell(img, 4));
                row.push(format!("{mean_val:.4}"));
                row.push(format!("{:.4}", r.final_train_loss));
                t.row(row);
            }
            t
        };
        t.note(format!(
            "seed {}  data seed {}  held-out seeds {}..{}",
            self.seed, self.data_seed, self.eval_seeds.0, self.eval_seeds.1
        ));
        t
    }
}

/// One configured run directory.
pub struct Runner {
    pub cfg: RunConfig,
    pub dir: PathBuf,
    exec: PoolExecutor,
    renderer: Renderer,
    hash: u64,
    /// Progress lines on stderr.
    pub verbose: bool,
}

impl Runner {
    /// Validates `cfg`, creates the run directory and writes the resolved
    /// configuration into it.
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let dir = cfg.io.run_dir.clone();
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        write_atomic(&dir.join("config.toml"), cfg.to_toml().as_bytes())?;
        let renderer = Renderer::new(cfg.render())?;
        Ok(Self {
            hash: cfg.hash(),
            cfg,
            dir,
            exec: PoolExecutor::from_env(),
            renderer,
            verbose: false,
        })
    }

    fn say(&self, msg: impl fmt::Display) {
        if self.verbose {
            eprintln!("{msg}");
        }
    }

    fn sub_seed(&self, tag: &str) -> u64 {
        fnv64(format!("{}:{tag}", self.cfg.seed).as_bytes())
    }

    pub fn manifest_path(&self, m: ModalityId) -> PathBuf {
        self.dir.join("data").join(format!("{m}.olmf"))
    }

    /// Writes one training manifest per modality and returns the paths
    /// with their integrity hashes.
    pub fn generate_data(&self) -> Result<Vec<(ModalityId, PathBuf, u64)>> {
        let mut out = Vec::new();
        for m in ModalityId::ALL {
            let path = self.manifest_path(m);
            let hash = write_manifest(&self.build_manifest(m), &path)?;
            self.say(format_args!("{m}: {} items -> {} ({})", self.cfg.data.size(m), path.display(), hex(hash)));
            out.push((m, path, hash));
        }
        Ok(out)
    }

    fn build_manifest(&self, m: ModalityId) -> Manifest {
        let seeds = self.cfg.data.train_seeds(m);
        let items = build_examples(&self.renderer, m, seeds.start, self.cfg.data.size(m));
        Manifest::new(m, Split::Train, items)
    }

    /// Training examples of `m`, from its manifest when present.
    fn train_set(&self, m: ModalityId) -> Result<Vec<Example<f32>>> {
        let path = self.manifest_path(m);
        if !path.exists() {
            let man = self.build_manifest(m);
            write_manifest(&man, &path)?;
            return Ok(man.items);
        }
        let man = load_manifest(&path)?;
        man.validate_layout(&self.cfg.render())?;
        let seeds = self.cfg.data.train_seeds(m);
        let fits = man.modality == m
            && man.split == Split::Train
            && man.items.len() == self.cfg.data.size(m)
            && man.items.iter().zip(seeds).all(|(ex, s)| ex.scene.seed == s);
        if !fits {
            return Err(Error::Config(format!(
                "{} does not match the data settings; rerun generate-data",
                path.display()
            )));
        }
        Ok(man.items)
    }

    fn train_sets(&self, ms: &[ModalityId]) -> Result<Sets> {
        ms.iter().map(|&m| Ok((m, self.train_set(m)?))).collect()
    }

    /// Held-out examples; their seeds never overlap the training seeds.
    pub fn eval_set(&self, m: ModalityId, n: usize) -> Vec<Example<f32>> {
        build_examples(&self.renderer, m, self.cfg.data.eval_seed, n)
    }

    fn eval_sets(&self, ms: &[ModalityId], n: usize) -> Sets {
        ms.iter().map(|&m| (m, self.eval_set(m, n))).collect()
    }

    /// Global step count once `stage` is done, counted across stages.
    pub fn stage_end(&self, stage: StageId) -> u64 {
        let s = &self.cfg.stages;
        let mut total = s.text.steps;
        for st in StageId::ALL {
            total += s.get(st).steps;
            if st == stage {
                break;
            }
        }
        total
    }

    pub fn checkpoint_path(&self, stage: StageId) -> PathBuf {
        checkpoint_path(&self.dir, self.stage_end(stage))
    }

    fn require(&self, stage: StageId) -> Result<(OneLlm<f32>, PathBuf)> {
        let path = self.checkpoint_path(stage);
        if !path.exists() {
            return Err(Error::Precondition(format!(
                "the stage {stage} checkpoint {} does not exist; run `train --stage {stage}` first",
                path.display()
            )));
        }
        let (model, _) = read_checkpoint(&path)?.restore(&path)?;
        Ok((model, path))
    }

    fn options(&self, replay: ReplayMode) -> TrainOptions {
        TrainOptions {
            replay,
            ..TrainOptions::default()
        }
    }

    fn fresh_state(&self, model: &OneLlm<f32>, phase: Phase, tag: &str) -> TrainState {
        TrainState::new(phase, self.sub_seed(tag), model.store.len(), AdamWConfig::default())
    }

    /// Saves a snapshot next to the run's checkpoints when a phase aborts
    /// on a non-finite value, then passes the error on.
    fn guard(&self, r: onellm_core::Result<StageReport>, model: &OneLlm<f32>, state: &TrainState, label: &str) -> Result<StageReport> {
        match r {
            Err(e @ onellm_core::Error::NumericalAbort { .. }) => {
                let path = self.dir.join(format!("abort_{label}.olmc"));
                if save(model, state, self.hash, label, &path).is_ok() {
                    eprintln!("numerical abort; snapshot written to {}", path.display());
                }
                Err(e.into())
            }
            other => Ok(other?),
        }
    }

    fn validation(&self, model: &OneLlm<f32>, ms: &[ModalityId], n: usize, format: EvalFormat) -> Result<Vec<(ModalityId, f64)>> {
        ms.iter()
            .map(|&m| Ok((m, validation_loss(model, &self.eval_set(m, n), format, &self.exec)?)))
            .collect()
    }

    /// One alignment run over the standard modality sets of `stage`.
    #[allow(clippy::too_many_arguments)]
    fn align(
        &self,
        model: &mut OneLlm<f32>,
        stage: StageId,
        section: &StageSection,
        replay: ReplayMode,
        sets: &Sets,
        log: &mut StepLog,
        label: &str,
    ) -> Result<(StageReport, TrainState)> {
        let mut state = self.fresh_state(model, Phase::Alignment, stage.as_str());
        let plan = section.plan(stage);
        let r = train_alignment_stage(model, &mut state, &plan, &corpus(sets), &self.options(replay), &self.exec, &mut |r| {
            log.record(r)
        });
        Ok((self.guard(r, model, &state, label)?, state))
    }

    /// Runs one stage from its prerequisite checkpoint and writes the
    /// checkpoint, metric stream and report.
    pub fn train(&self, stage: StageId) -> Result<TrainSummary> {
        if let Some(prev) = prerequisite(stage) {
            // fail before any work if the input is missing
            let path = self.checkpoint_path(prev);
            if !path.exists() {
                self.require(prev)?;
            }
        }
        let cfg = &self.cfg;
        let label = stage.as_str();
        let mut log = StepLog::create(&self.dir, &format!("metrics_{label}"), label)?;
        let mut phases = Vec::new();
        let (model, state) = match stage {
            StageId::I => {
                let mut model = OneLlm::<f32>::new(cfg.model.model_config(1)?, cfg.seed)?;
                let sets = self.train_sets(&stage_modalities(stage))?;
                if cfg.stages.text.steps > 0 {
                    self.say("stage I: decoder text warm-up");
                    let mut state = self.fresh_state(&model, Phase::Text, "text");
                    let plan = cfg.stages.text.plan(stage);
                    let r = pretrain_decoder(&mut model, &mut state, &plan, &corpus(&sets), &self.options(ReplayMode::Off), &self.exec, &mut |r| log.record(r));
                    phases.push(self.guard(r, &model, &state, label)?);
                }
                self.say("stage I: image alignment");
                let (r, state) = self.align(&mut model, stage, &cfg.stages.stage_i, cfg.stages.replay, &sets, &mut log, label)?;
                phases.push(r);
                (model, state)
            }
            StageId::II | StageId::III => {
                let (base, _) = self.require(prerequisite(stage).expect("stages II and III have one"))?;
                let mut model = if stage == StageId::II {
                    let mut m = base.with_experts(cfg.model.experts, cfg.model.expert_init, self.sub_seed("experts"))?;
                    m.set_encoder_frozen(cfg.model.frozen_encoder);
                    m
                } else {
                    base
                };
                let sets = self.train_sets(&stage_modalities(stage))?;
                self.say(format_args!("stage {stage}: alignment"));
                let (r, state) = self.align(&mut model, stage, cfg.stages.get(stage), cfg.stages.replay, &sets, &mut log, label)?;
                phases.push(r);
                (model, state)
            }
            StageId::Instruct => {
                let (mut model, _) = self.require(StageId::III)?;
                let sets = self.train_sets(&ModalityId::ALL)?;
                self.say("instruction tuning");
                let mut state = self.fresh_state(&model, Phase::Instruction, label);
                let plan = cfg.stages.instruct.plan(stage);
                let r = train_instruction(&mut model, &mut state, &plan, &corpus(&sets), TrainingMode::Joint, &self.options(ReplayMode::Off), &self.exec, &mut |r| log.record(r));
                phases.push(self.guard(r, &model, &state, label)?);
                (model, state)
            }
        };
        log.finish()?;
        let format = match stage {
            StageId::Instruct => EvalFormat::Instruction,
            _ => EvalFormat::Alignment,
        };
        let validation = self.validation(&model, &stage_modalities(stage), cfg.data.eval_size, format)?;
        if let Some(last) = phases.last_mut() {
            last.validation = validation.clone();
        }
        let path = self.checkpoint_path(stage);
        save(&model, &state, self.hash, label, &path)?;
        let summary = TrainSummary {
            stage,
            seed: cfg.seed,
            data_seed: cfg.data.seed,
            config_hash: hex(self.hash),
            checkpoint: path,
            phases,
            validation,
        };
        write_json(&self.dir.join(format!("report_{label}.json")), &summary)?;
        summary.table().write(&self.dir, &format!("report_{label}"))?;
        Ok(summary)
    }

    /// Scores the checkpoint of `stage` on the held-out split.
    pub fn eval(&self, stage: StageId, tasks: &[EvalTask]) -> Result<EvalSummary> {
        let path = self.checkpoint_path(stage);
        if !path.exists() {
            self.require(stage)?;
        }
        self.eval_checkpoint(&path, tasks)
    }

    /// Scores any checkpoint. Alignment checkpoints are scored on plain
    /// captions, instruction checkpoints on conversations.
    pub fn eval_checkpoint(&self, path: &Path, tasks: &[EvalTask]) -> Result<EvalSummary> {
        if tasks.is_empty() {
            return Err(Error::Config("no evaluation tasks".into()));
        }
        let ck = read_checkpoint(path)?;
        let (model, state) = ck.restore(path)?;
        let (format, ms) = match (state.phase, ck.label.parse::<StageId>()) {
            (Phase::Instruction, _) => (EvalFormat::Instruction, ModalityId::ALL.to_vec()),
            (_, Ok(stage)) => (EvalFormat::Alignment, stage_modalities(stage)),
            (_, Err(_)) => (EvalFormat::Alignment, ModalityId::ALL.to_vec()),
        };
        let n = self.cfg.data.eval_size;
        let sets = self.eval_sets(&ms, n);
        let report = evaluate(&model, &corpus(&sets), tasks, format, &self.exec)?;
        let label = ck.label.clone();
        let summary = EvalSummary {
            label: label.clone(),
            checkpoint: path.to_path_buf(),
            tasks: tasks.to_vec(),
            eval_seeds: (self.cfg.data.eval_seed, self.cfg.data.eval_seed + n as u64),
            report,
        };
        write_json(&self.dir.join(format!("eval_{label}.json")), &summary)?;
        summary.table().write(&self.dir, &format!("eval_{label}"))?;
        Ok(summary)
    }

    fn default_variant(&self) -> Variant {
        let m = &self.cfg.model;
        Variant {
            experts: m.experts,
            init: m.expert_init,
            router: m.router,
            frozen_encoder: m.frozen_encoder,
            replay: self.cfg.stages.replay,
        }
    }

    fn variants(&self, axis: Axis) -> Vec<(String, Variant)> {
        let base = self.default_variant();
        match axis {
            Axis::Mode => vec![("default".into(), base)],
            Axis::Experts => self
                .cfg
                .ablation
                .experts
                .iter()
                .map(|&k| (format!("K={k}"), Variant { experts: k, ..base }))
                .collect(),
            Axis::Router => [RouterType::Constant, RouterType::Sparse, RouterType::Soft]
                .into_iter()
                .map(|r| (format!("{r:?}").to_lowercase(), Variant { router: r, ..base }))
                .collect(),
            Axis::Init => [ExpertInit::Random, ExpertInit::Image]
                .into_iter()
                .map(|i| (format!("{i:?}").to_lowercase(), Variant { init: i, ..base }))
                .collect(),
            Axis::Encoder => [true, false]
                .into_iter()
                .map(|f| ((if f { "frozen" } else { "trainable" }).to_string(), Variant { frozen_encoder: f, ..base }))
                .collect(),
            Axis::Replay => [ReplayMode::Uniform, ReplayMode::Half, ReplayMode::Off]
                .into_iter()
                .map(|r| (format!("{r:?}").to_lowercase(), Variant { replay: r, ..base }))
                .collect(),
        }
    }

    /// Stage-II model of one variant, trained from the stage-I checkpoint.
    fn ablation_model(&self, stage_i: &OneLlm<f32>, v: &Variant, sets: &Sets, log_name: &str) -> Result<(OneLlm<f32>, StageReport)> {
        let mut model = stage_i.with_experts(v.experts, v.init, self.sub_seed("experts"))?;
        model.config.upm.router = v.router;
        model.set_encoder_frozen(v.frozen_encoder);
        let mut log = StepLog::create(&self.dir.join("ablation"), log_name, "II")?;
        let (r, _) = self.align(&mut model, StageId::II, &self.cfg.ablation.align, v.replay, sets, &mut log, log_name)?;
        log.finish()?;
        Ok((model, r))
    }

    /// Runs the sweep of `axis` from the stage-I checkpoint and writes
    /// `ablate_<axis>.{json,txt,csv}`.
    pub fn ablate(&self, axis: Axis) -> Result<AblationSummary> {
        let (stage_i, _) = self.require(StageId::I)?;
        let ab = &self.cfg.ablation;
        let n = ab.eval_size;
        let align_mods = stage_modalities(StageId::II);
        let mut summary = AblationSummary {
            axis,
            seed: self.cfg.seed,
            data_seed: self.cfg.data.seed,
            eval_seeds: (self.cfg.data.eval_seed, self.cfg.data.eval_seed + n as u64),
            align_rows: Vec::new(),
            mode_rows: Vec::new(),
        };
        let sets = self.train_sets(&align_mods)?;
        if axis == Axis::Mode {
            let base_variant = self.default_variant();
            self.say("ablation mode: shared stage-II model");
            let (base, _) = self.ablation_model(&stage_i, &base_variant, &sets, "mode_align")?;
            let mods = ab.mode_modalities.clone();
            let inst_sets = self.train_sets(&mods)?;
            let evals = self.eval_sets(&mods, n);
            let tasks = EvalTask::ALL;
            let mut runs: Vec<(String, TrainingMode, u64)> = mods
                .iter()
                .map(|&m| ("separate".to_string(), TrainingMode::Separate(m), ab.instruct.steps / mods.len() as u64))
                .collect();
            runs.push(("joint".into(), TrainingMode::Joint, ab.instruct.steps));
            for (mode, tm, steps) in runs {
                self.say(format_args!("ablation mode: {mode} {tm:?}"));
                let mut model = base.clone();
                let mut plan: StagePlan = ab.instruct.plan(StageId::Instruct);
                plan.steps = steps;
                plan.warmup = plan.warmup.min(steps / 10);
                plan.new_modalities = mods.clone();
                let mut state = self.fresh_state(&model, Phase::Instruction, "instruct");
                let tag = match tm {
                    TrainingMode::Joint => "mode_joint".to_string(),
                    TrainingMode::Separate(m) => format!("mode_separate_{m}"),
                };
                let mut log = StepLog::create(&self.dir.join("ablation"), &tag, "instruct")?;
                let r = train_instruction(&mut model, &mut state, &plan, &corpus(&inst_sets), tm, &self.options(ReplayMode::Off), &self.exec, &mut |r| log.record(r));
                self.guard(r, &model, &state, &tag)?;
                log.finish()?;
                let scored: Vec<ModalityId> = match tm {
                    TrainingMode::Joint => mods.clone(),
                    TrainingMode::Separate(m) => vec![m],
                };
                let eval: Corpus = scored.iter().map(|m| (*m, evals[m].as_slice())).collect();
                let report = evaluate(&model, &eval, &tasks, EvalFormat::Instruction, &self.exec)?;
                for metrics in report.per_modality {
                    summary.mode_rows.push(ModeRow {
                        mode: mode.clone(),
                        modality: metrics.modality,
                        steps,
                        metrics,
                    });
                }
            }
            // separate rows first in run order; group them for the table
            summary.mode_rows.sort_by_key(|r| (r.mode != "separate", r.modality));
        } else {
            let evals = self.eval_sets(&align_mods, n);
            let tasks = [EvalTask::CaptionExactMatch, EvalTask::Perplexity];
            for (label, v) in self.variants(axis) {
                self.say(format_args!("ablation {axis}: {label}"));
                let (model, r) = self.ablation_model(&stage_i, &v, &sets, &format!("{axis}_{label}"))?;
                let report = evaluate(&model, &corpus(&evals), &tasks, EvalFormat::Alignment, &self.exec)?;
                let validation = align_mods
                    .iter()
                    .map(|m| Ok((*m, validation_loss(&model, &evals[m], EvalFormat::Alignment, &self.exec)?)))
                    .collect::<Result<Vec<_>>>()?;
                summary.align_rows.push(AlignRow {
                    label,
                    variant: v,
                    final_train_loss: r.final_loss,
                    validation,
                    report,
                });
            }
        }
        write_json(&self.dir.join(format!("ablate_{axis}.json")), &summary)?;
        summary.table().write(&self.dir, &format!("ablate_{axis}"))?;
        Ok(summary)
    }
}
