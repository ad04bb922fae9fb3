//! Staged training: decoder text warm-up, progressive alignment with
//! replay, instruction tuning, freezing policies and evaluation.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{option_question, Example, OPTION_LETTERS};
use crate::decoder::{instruction_text, TextVocab, EOS};
use crate::exec::Executor;
use crate::model::{instruction_prompt, OneLlm};
use crate::optim::{AdamW, AdamWConfig, LrSchedule};
use crate::prompts::{caption_prompt, render_prompt, PromptTask};
use crate::{Error, Grads, Graph, ModalityId, ParamStore, Result, Scalar, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum StageId {
    I,
    II,
    III,
    Instruct,
}

impl StageId {
    pub const ALL: [StageId; 4] = [StageId::I, StageId::II, StageId::III, StageId::Instruct];

    pub fn as_str(self) -> &'static str {
        match self {
            StageId::I => "I",
            StageId::II => "II",
            StageId::III => "III",
            StageId::Instruct => "instruct",
        }
    }

    pub fn phase(self) -> Phase {
        match self {
            StageId::Instruct => Phase::Instruction,
            _ => Phase::Alignment,
        }
    }
}

impl fmt::Display for StageId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StageId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|st| st.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Argument(format!("unknown stage `{s}` (expected I, II, III or instruct)")))
    }
}

/// Which parameter groups train.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    /// Text-only warm-up of the decoder, standing in for a pretrained
    /// language model.
    Text,
    /// Tokenizers, projection module and adapter; language model frozen.
    Alignment,
    /// Decoder only.
    Instruction,
}

impl Phase {
    pub const ALL: [Phase; 3] = [Phase::Text, Phase::Alignment, Phase::Instruction];

    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Text => "text",
            Phase::Alignment => "alignment",
            Phase::Instruction => "instruction",
        }
    }

    pub fn tag(self) -> u8 {
        self as u8
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        Self::ALL.get(tag as usize).copied()
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Phase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| Error::Argument(format!("unknown phase `{s}`")))
    }
}

/// Trainable parameter-name prefixes of a phase.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FreezePolicy {
    pub phase: Phase,
    pub trainable: Vec<&'static str>,
}

impl FreezePolicy {
    pub fn for_phase(phase: Phase, train_encoder: bool) -> Self {
        let mut trainable = match phase {
            Phase::Text | Phase::Instruction => vec!["decoder."],
            Phase::Alignment => vec!["tokenizer.", "upm.", "adapter."],
        };
        if train_encoder && phase == Phase::Alignment {
            trainable.push("encoder.");
        }
        Self { phase, trainable }
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.trainable.iter().any(|p| name.starts_with(p))
    }
}

/// Sets every frozen flag from the policy and returns the number of
/// trainable scalars.
pub fn apply_freeze_policy<F: Scalar>(store: &mut ParamStore<F>, policy: &FreezePolicy) -> usize {
    store.set_trainable_where(|n| policy.is_trainable(n));
    store.trainable_numel()
}

/// How replay modalities are mixed into a stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReplayMode {
    /// Modality uniform over new and replay modalities together.
    Uniform,
    /// Half the draws from new modalities, half from replay modalities.
    Half,
    /// New modalities only.
    Off,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StagePlan {
    pub stage: StageId,
    pub new_modalities: Vec<ModalityId>,
    pub replay_modalities: Vec<ModalityId>,
    pub steps: u64,
    pub batch: usize,
    /// Micro-batches accumulated per optimizer step.
    pub accum: usize,
    pub peak_lr: f64,
    pub warmup: u64,
}

impl StagePlan {
    /// Modality sets of the standard curriculum.
    pub fn standard(stage: StageId, steps: u64, batch: usize, peak_lr: f64, warmup: u64) -> Self {
        use ModalityId::*;
        let (new, replay): (Vec<ModalityId>, Vec<ModalityId>) = match stage {
            StageId::I => (vec![Image], vec![]),
            StageId::II => (vec![Video, Audio, Point], vec![Image]),
            StageId::III => (vec![Depth, Normal, Imu, Fmri], vec![Image, Video, Audio, Point]),
            StageId::Instruct => (ModalityId::ALL.to_vec(), vec![]),
        };
        Self {
            stage,
            new_modalities: new,
            replay_modalities: replay,
            steps,
            batch,
            accum: 1,
            peak_lr,
            warmup,
        }
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule::new(self.peak_lr, self.warmup, self.steps)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || self.accum == 0 {
            return Err(Error::Config("batch size and accumulation must be positive".into()));
        }
        if self.new_modalities.is_empty() {
            return Err(Error::Config(format!("stage {} has no new modalities", self.stage)));
        }
        Ok(())
    }
}

/// One sampled training item.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Draw {
    pub modality: ModalityId,
    pub index: usize,
    /// Task variant (see [`instruction_turn`]); 0 outside instruction.
    pub variant: usize,
}

/// Draws (modality, example, variant) triples for a stage.
#[derive(Debug, Clone, PartialEq)]
pub struct StageSampler {
    new: Vec<(ModalityId, usize)>,
    replay: Vec<(ModalityId, usize)>,
    mode: ReplayMode,
    variants: usize,
}

/// Builds the sampler of `plan`; `sizes` gives the dataset size of each
/// available modality.
pub fn build_stage_sampler(
    plan: &StagePlan,
    sizes: &BTreeMap<ModalityId, usize>,
    mode: ReplayMode,
    variants: usize,
) -> Result<StageSampler> {
    let lookup = |ms: &[ModalityId]| -> Result<Vec<(ModalityId, usize)>> {
        ms.iter()
            .map(|&m| match sizes.get(&m) {
                Some(&n) if n > 0 => Ok((m, n)),
                Some(_) => Err(Error::Config(format!("{m} dataset is empty"))),
                None => Err(Error::Config(format!("stage {} needs a {m} dataset", plan.stage))),
            })
            .collect()
    };
    let new = lookup(&plan.new_modalities)?;
    let replay = if mode == ReplayMode::Off {
        Vec::new()
    } else {
        lookup(&plan.replay_modalities)?
    };
    if new.is_empty() {
        return Err(Error::Config(format!("stage {} has no new modalities", plan.stage)));
    }
    Ok(StageSampler {
        new,
        replay,
        mode,
        variants: variants.max(1),
    })
}

impl StageSampler {
    pub fn active(&self) -> Vec<ModalityId> {
        self.new.iter().chain(&self.replay).map(|(m, _)| *m).collect()
    }

    pub fn draw(&self, rng: &mut ChaCha8Rng) -> Draw {
        let pool = match self.mode {
            ReplayMode::Half if !self.replay.is_empty() => {
                if rng.random_bool(0.5) {
                    &self.new[..]
                } else {
                    &self.replay[..]
                }
            }
            _ => &self.new[..],
        };
        let (modality, size) = if self.mode == ReplayMode::Uniform && !self.replay.is_empty() {
            let k = rng.random_range(0..self.new.len() + self.replay.len());
            if k < self.new.len() {
                self.new[k]
            } else {
                self.replay[k - self.new.len()]
            }
        } else {
            pool[rng.random_range(0..pool.len())]
        };
        Draw {
            modality,
            index: rng.random_range(0..size),
            variant: if self.variants > 1 { rng.random_range(0..self.variants) } else { 0 },
        }
    }
}

/// Number of instruction variants per example: one caption prompt, one
/// open question per QA pair and one multiple-choice question per pair.
pub const INSTRUCTION_VARIANTS: usize = 9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TurnKind {
    Caption,
    OpenQa,
    OptionQa,
}

/// The single-turn conversation `variant` of an example.
pub fn instruction_turn<F>(ex: &Example<F>, variant: usize) -> Result<(TurnKind, String, String)> {
    let m = ex.signal.modality;
    let nq = ex.qa.len();
    match variant {
        0 => Ok((TurnKind::Caption, caption_prompt(m), ex.caption.clone())),
        v if v <= nq => {
            let (q, a) = &ex.qa[v - 1];
            let p = render_prompt(PromptTask::OpenQa, &[("Question", q)])?;
            Ok((TurnKind::OpenQa, p, a.clone()))
        }
        v if v <= 2 * nq => {
            let (q, a) = &ex.qa[v - 1 - nq];
            let (options, letter) = option_question(a, ex.scene.seed.wrapping_mul(31).wrapping_add(v as u64));
            let p = render_prompt(PromptTask::OptionQa, &[("Question", q), ("Options", &options)])?;
            Ok((TurnKind::OptionQa, p, letter))
        }
        _ => Err(Error::Argument(format!("instruction variant {variant} out of range"))),
    }
}

/// Per-modality examples a phase draws from.
pub type Corpus<'a> = BTreeMap<ModalityId, &'a [Example<f32>]>;

/// How instruction tuning selects its data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "mode", content = "modality")]
pub enum TrainingMode {
    /// All modalities in one run.
    Joint,
    /// A single modality's data only.
    Separate(ModalityId),
}

/// Everything a training run needs to resume exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub phase: Phase,
    pub step: u64,
    pub rng: ChaCha8Rng,
    pub optimizer: AdamW<f32>,
    /// Exponential moving average of each modality's loss.
    pub running: [Option<f64>; 8],
}

impl TrainState {
    pub fn new(phase: Phase, seed: u64, n_params: usize, config: AdamWConfig) -> Self {
        Self {
            phase,
            step: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
            optimizer: AdamW::new(config, n_params),
            running: [None; 8],
        }
    }
}

/// Metrics of one optimizer step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub phase: Phase,
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
    /// Mean loss of each modality drawn in this step.
    pub modality_losses: Vec<(ModalityId, f64)>,
    /// Mean routing weight per expert of each modality drawn in this step.
    pub routing: Vec<(ModalityId, Vec<f64>)>,
}

/// Summary of a finished (or paused) phase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: String,
    pub phase: Phase,
    pub steps: u64,
    pub trainable_params: usize,
    pub first_loss: f64,
    pub final_loss: f64,
    /// Mean loss over the last tenth of the steps, per modality.
    pub modality_losses: Vec<(ModalityId, f64)>,
    /// Mean routing weight per expert over the same window.
    pub routing: Vec<(ModalityId, Vec<f64>)>,
    /// Held-out losses filled in by the caller.
    pub validation: Vec<(ModalityId, f64)>,
}

/// Options shared by every phase.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub replay: ReplayMode,
    /// Verify every this many steps that no frozen parameter changed.
    pub ledger_interval: u64,
    /// Stop (resumably) once this many steps are done; `None` runs the plan.
    pub stop_at: Option<u64>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            replay: ReplayMode::Uniform,
            ledger_interval: 100,
            stop_at: None,
        }
    }
}

/// Loss of one draw plus the mean routing weight per expert.
pub fn example_loss<F: Scalar>(
    model: &OneLlm<F>,
    g: &mut Graph<'_, F>,
    phase: Phase,
    ex: &Example<F>,
    variant: usize,
) -> Result<(Var, Option<Vec<f64>>)> {
    match phase {
        Phase::Text => Ok((model.text_loss(g, &ex.caption, variant == 1)?, None)),
        Phase::Alignment => {
            let q = model.project(g, &ex.signal)?;
            let routing = mean_rows(g.value(q.routing_weights).data(), model.config.upm.experts);
            let seq = crate::decoder::assemble_alignment_sequence(
                g,
                &model.adapter,
                &q,
                &ex.caption,
                model.config.decoder.max_seq,
            )?;
            Ok((model.decoder.lm_loss(g, &seq)?, Some(routing)))
        }
        Phase::Instruction => {
            let (_, prompt, answer) = instruction_turn(ex, variant)?;
            let q = model.project(g, &ex.signal)?;
            let routing = mean_rows(g.value(q.routing_weights).data(), model.config.upm.experts);
            let seq = crate::decoder::assemble_instruction_sequence(
                g,
                &model.adapter,
                core::slice::from_ref(&q),
                "",
                &[(prompt, answer)],
            )?;
            Ok((model.decoder.lm_loss(g, &seq)?, Some(routing)))
        }
    }
}

fn mean_rows<F: Scalar>(data: &[F], k: usize) -> Vec<f64> {
    let rows = data.len() / k;
    let mut out = vec![0.0; k];
    for r in 0..rows {
        for j in 0..k {
            out[j] += data[r * k + j].to_f64();
        }
    }
    out.iter_mut().for_each(|v| *v /= rows as f64);
    out
}

fn frozen_fingerprint<F: Scalar>(store: &ParamStore<F>) -> u64 {
    let frozen: Vec<String> = store.iter().filter(|(_, p)| p.frozen).map(|(_, p)| p.name.clone()).collect();
    store.fingerprint(|n| frozen.iter().any(|f| f == n))
}

fn abort(step: u64, e: Error) -> Error {
    match e {
        Error::NonFinite { op } => Error::NumericalAbort {
            step,
            detail: format!("non-finite values in {op}"),
        },
        other => other,
    }
}

/// Runs optimizer steps of `phase` until the plan (or `opts.stop_at`) is
/// done. The frozen flags already on the model are respected as they are.
#[allow(clippy::too_many_arguments)]
pub fn run_phase<E: Executor>(
    model: &mut OneLlm<f32>,
    state: &mut TrainState,
    plan: &StagePlan,
    sampler: &StageSampler,
    corpus: &Corpus<'_>,
    opts: &TrainOptions,
    exec: &E,
    observer: &mut dyn FnMut(&StepRecord),
) -> Result<StageReport> {
    plan.validate()?;
    let phase = state.phase;
    let schedule = plan.schedule();
    let end = opts.stop_at.map_or(plan.steps, |s| s.min(plan.steps));
    let n_params = model.store.len();
    let frozen_hash = frozen_fingerprint(&model.store);
    let window = (plan.steps / 10).max(1);
    let mut first_loss = f64::NAN;
    let mut final_loss = f64::NAN;
    let mut tail_losses: BTreeMap<ModalityId, (f64, usize)> = BTreeMap::new();
    let mut tail_routing: BTreeMap<ModalityId, (Vec<f64>, usize)> = BTreeMap::new();
    while state.step < end {
        let step = state.step;
        let lr = schedule.lr(step);
        let mut grads = Grads::empty(n_params);
        let mut loss_sum = 0.0;
        let mut per_mod: BTreeMap<ModalityId, (f64, usize)> = BTreeMap::new();
        let mut routing: BTreeMap<ModalityId, (Vec<f64>, usize)> = BTreeMap::new();
        for _ in 0..plan.accum {
            let draws: Vec<Draw> = (0..plan.batch).map(|_| sampler.draw(&mut state.rng)).collect();
            let store = &model.store;
            let m: &OneLlm<f32> = model;
            let results = exec.map(draws.len(), |i| {
                let d = draws[i];
                let ex = corpus
                    .get(&d.modality)
                    .and_then(|set| set.get(d.index))
                    .ok_or_else(|| Error::Config(format!("no {} example {}", d.modality, d.index)))?;
                let mut g = Graph::new(store);
                let (loss, r) = example_loss(m, &mut g, phase, ex, d.variant)?;
                let value = g.value(loss).data()[0].to_f64();
                let grads = g.backward(loss)?;
                Ok::<_, Error>((value, r, grads))
            });
            for (d, res) in draws.iter().zip(results) {
                let (value, r, g) = res.map_err(|e| abort(step, e))?;
                if !value.is_finite() {
                    return Err(Error::NumericalAbort {
                        step,
                        detail: format!("{} loss is {value}", d.modality),
                    });
                }
                grads.accumulate(&g);
                loss_sum += value;
                let e = per_mod.entry(d.modality).or_insert((0.0, 0));
                e.0 += value;
                e.1 += 1;
                if let Some(r) = r {
                    let e = routing.entry(d.modality).or_insert_with(|| (vec![0.0; r.len()], 0));
                    e.0.iter_mut().zip(&r).for_each(|(a, b)| *a += b);
                    e.1 += 1;
                }
            }
        }
        let count = plan.batch * plan.accum;
        grads.scale(1.0 / count as f32);
        let grad_norm = state.optimizer.step(&mut model.store, &grads, lr);
        if !grad_norm.is_finite() {
            return Err(Error::NumericalAbort {
                step,
                detail: format!("gradient norm is {grad_norm}"),
            });
        }
        state.step += 1;
        let loss = loss_sum / count as f64;
        if step == 0 || first_loss.is_nan() {
            first_loss = loss;
        }
        final_loss = loss;
        let modality_losses: Vec<(ModalityId, f64)> =
            per_mod.iter().map(|(m, (s, n))| (*m, s / *n as f64)).collect();
        for &(m, l) in &modality_losses {
            let r = &mut state.running[m.index()];
            *r = Some(r.map_or(l, |prev| 0.9 * prev + 0.1 * l));
        }
        let routing: Vec<(ModalityId, Vec<f64>)> = routing
            .into_iter()
            .map(|(m, (s, n))| (m, s.into_iter().map(|v| v / n as f64).collect()))
            .collect();
        if state.step + window > plan.steps {
            for &(m, l) in &modality_losses {
                let e = tail_losses.entry(m).or_insert((0.0, 0));
                e.0 += l;
                e.1 += 1;
            }
            for (m, r) in &routing {
                let e = tail_routing.entry(*m).or_insert_with(|| (vec![0.0; r.len()], 0));
                e.0.iter_mut().zip(r).for_each(|(a, b)| *a += b);
                e.1 += 1;
            }
        }
        observer(&StepRecord {
            phase,
            step,
            loss,
            lr,
            grad_norm,
            modality_losses,
            routing,
        });
        if opts.ledger_interval > 0 && state.step.is_multiple_of(opts.ledger_interval) {
            let now = frozen_fingerprint(&model.store);
            if now != frozen_hash {
                return Err(Error::Config(format!("a frozen parameter changed by step {}", state.step)));
            }
        }
    }
    Ok(StageReport {
        stage: plan.stage.to_string(),
        phase,
        steps: state.step,
        trainable_params: model.store.trainable_numel(),
        first_loss,
        final_loss,
        modality_losses: tail_losses.into_iter().map(|(m, (s, n))| (m, s / n as f64)).collect(),
        routing: tail_routing
            .into_iter()
            .map(|(m, (s, n))| (m, s.into_iter().map(|v| v / n as f64).collect()))
            .collect(),
        validation: Vec::new(),
    })
}

fn sizes(corpus: &Corpus<'_>) -> BTreeMap<ModalityId, usize> {
    corpus.iter().map(|(m, s)| (*m, s.len())).collect()
}

/// Decoder warm-up on caption text of the modalities in `plan`. Half the
/// draws see the caption's word prefix (variant 1), half plain text.
pub fn pretrain_decoder<E: Executor>(
    model: &mut OneLlm<f32>,
    state: &mut TrainState,
    plan: &StagePlan,
    corpus: &Corpus<'_>,
    opts: &TrainOptions,
    exec: &E,
    observer: &mut dyn FnMut(&StepRecord),
) -> Result<StageReport> {
    expect_phase(state, Phase::Text)?;
    apply_freeze_policy(&mut model.store, &FreezePolicy::for_phase(Phase::Text, false));
    let sampler = build_stage_sampler(plan, &sizes(corpus), ReplayMode::Off, 2)?;
    run_phase(model, state, plan, &sampler, corpus, opts, exec, observer)
}

/// One progressive alignment stage (caption loss, language model frozen).
pub fn train_alignment_stage<E: Executor>(
    model: &mut OneLlm<f32>,
    state: &mut TrainState,
    plan: &StagePlan,
    corpus: &Corpus<'_>,
    opts: &TrainOptions,
    exec: &E,
    observer: &mut dyn FnMut(&StepRecord),
) -> Result<StageReport> {
    expect_phase(state, Phase::Alignment)?;
    let policy = FreezePolicy::for_phase(Phase::Alignment, !model.config.encoder.frozen);
    apply_freeze_policy(&mut model.store, &policy);
    let sampler = build_stage_sampler(plan, &sizes(corpus), opts.replay, 1)?;
    run_phase(model, state, plan, &sampler, corpus, opts, exec, observer)
}

/// Instruction tuning of the decoder on single-turn conversations.
#[allow(clippy::too_many_arguments)]
pub fn train_instruction<E: Executor>(
    model: &mut OneLlm<f32>,
    state: &mut TrainState,
    plan: &StagePlan,
    corpus: &Corpus<'_>,
    mode: TrainingMode,
    opts: &TrainOptions,
    exec: &E,
    observer: &mut dyn FnMut(&StepRecord),
) -> Result<StageReport> {
    expect_phase(state, Phase::Instruction)?;
    apply_freeze_policy(&mut model.store, &FreezePolicy::for_phase(Phase::Instruction, false));
    let mut plan = plan.clone();
    if let TrainingMode::Separate(m) = mode {
        plan.new_modalities = vec![m];
        plan.replay_modalities.clear();
    }
    let sampler = build_stage_sampler(&plan, &sizes(corpus), ReplayMode::Off, INSTRUCTION_VARIANTS)?;
    run_phase(model, state, &plan, &sampler, corpus, opts, exec, observer)
}

fn expect_phase(state: &TrainState, phase: Phase) -> Result<()> {
    if state.phase != phase {
        return Err(Error::Argument(format!(
            "train state is for the {} phase, not {phase}",
            state.phase
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalTask {
    CaptionExactMatch,
    QaTokenAccuracy,
    Perplexity,
}

impl EvalTask {
    pub const ALL: [EvalTask; 3] = [EvalTask::CaptionExactMatch, EvalTask::QaTokenAccuracy, EvalTask::Perplexity];

    pub fn as_str(self) -> &'static str {
        match self {
            EvalTask::CaptionExactMatch => "caption-exact-match",
            EvalTask::QaTokenAccuracy => "qa-token-accuracy",
            EvalTask::Perplexity => "perplexity",
        }
    }
}

impl fmt::Display for EvalTask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EvalTask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::Argument(format!("unknown eval task `{s}`")))
    }
}

/// Input format evaluated against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalFormat {
    /// `[q̄ | BOS caption EOS]`, no prompt; QA is not applicable.
    Alignment,
    /// Single-turn conversations with the fixed prompts.
    Instruction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModalityMetrics {
    pub modality: ModalityId,
    pub items: usize,
    pub caption_exact_match: Option<f64>,
    /// Teacher-forced argmax accuracy over open-question answer tokens.
    pub qa_token_accuracy: Option<f64>,
    /// Four-way multiple-choice accuracy (argmax over the option letters).
    pub option_accuracy: Option<f64>,
    pub perplexity: Option<f64>,
    /// Mean routing weight per expert.
    pub routing: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub format: EvalFormat,
    pub per_modality: Vec<ModalityMetrics>,
}

impl EvalReport {
    pub fn get(&self, m: ModalityId) -> Option<&ModalityMetrics> {
        self.per_modality.iter().find(|r| r.modality == m)
    }
}

#[derive(Debug, Default, Clone)]
struct ItemScores {
    exact: Option<bool>,
    qa: Option<(usize, usize)>,
    option: Option<bool>,
    nll: (f64, usize),
    routing: Vec<f64>,
}

/// Longest caption the grammar produces is well under this.
const MAX_CAPTION_BYTES: usize = 40;

fn argmax<F: Scalar>(row: &[F]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

struct TeacherForced<F> {
    nll: f64,
    hits: Vec<bool>,
    routing: Vec<f64>,
    /// Logits predicting the first target.
    first_row: Option<Vec<F>>,
}

/// Negative log-likelihood of the masked targets and per-target argmax hits.
fn teacher_forced<F: Scalar>(
    model: &OneLlm<F>,
    ex: &Example<F>,
    format: EvalFormat,
    variant: usize,
) -> Result<TeacherForced<F>> {
    let mut g = Graph::new(&model.store);
    let q = model.project(&mut g, &ex.signal)?;
    let routing = mean_rows(g.value(q.routing_weights).data(), model.config.upm.experts);
    let seq = match format {
        EvalFormat::Alignment => crate::decoder::assemble_alignment_sequence(
            &mut g,
            &model.adapter,
            &q,
            &ex.caption,
            model.config.decoder.max_seq,
        )?,
        EvalFormat::Instruction => {
            let (_, prompt, answer) = instruction_turn(ex, variant)?;
            crate::decoder::assemble_instruction_sequence(
                &mut g,
                &model.adapter,
                core::slice::from_ref(&q),
                "",
                &[(prompt, answer)],
            )?
        }
    };
    let logits = model.decoder.all_logits(&mut g, &seq)?;
    let lv = g.value(logits);
    let v = lv.last_dim();
    let mut nll = 0.0;
    let mut hits = Vec::new();
    let mut first_target_row = None;
    for (r, (&t, &m)) in seq.ids[1..].iter().zip(&seq.loss_mask[1..]).enumerate() {
        if !m {
            continue;
        }
        let row = &lv.data()[r * v..(r + 1) * v];
        let mx = row.iter().map(|x| x.to_f64()).fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + libm::log(row.iter().map(|x| libm::exp(x.to_f64() - mx)).sum::<f64>());
        nll += lse - row[t].to_f64();
        hits.push(argmax(row) == t);
        if first_target_row.is_none() {
            first_target_row = Some(row.to_vec());
        }
    }
    Ok(TeacherForced {
        nll,
        hits,
        routing,
        first_row: first_target_row,
    })
}

fn score_item<F: Scalar>(
    model: &OneLlm<F>,
    ex: &Example<F>,
    format: EvalFormat,
    variant: usize,
    tasks: &[EvalTask],
) -> Result<ItemScores> {
    let mut s = ItemScores::default();
    let TeacherForced {
        nll,
        hits,
        routing,
        first_row,
    } = teacher_forced(model, ex, format, variant)?;
    s.routing = routing;
    s.nll = (nll, hits.len());
    let kind = match format {
        EvalFormat::Alignment => TurnKind::Caption,
        EvalFormat::Instruction => instruction_turn(ex, variant)?.0,
    };
    match kind {
        TurnKind::Caption => {
            if tasks.contains(&EvalTask::CaptionExactMatch) {
                let text = match format {
                    EvalFormat::Alignment => model.generate_caption(&ex.signal, MAX_CAPTION_BYTES)?,
                    EvalFormat::Instruction => {
                        let prompt = caption_prompt(ex.signal.modality);
                        model.generate_answer(&[&ex.signal], "", &prompt, MAX_CAPTION_BYTES)?
                    }
                };
                s.exact = Some(text == ex.caption);
            }
        }
        TurnKind::OpenQa => {
            if tasks.contains(&EvalTask::QaTokenAccuracy) {
                s.qa = Some((hits.iter().filter(|h| **h).count(), hits.len()));
            }
        }
        TurnKind::OptionQa => {
            if tasks.contains(&EvalTask::QaTokenAccuracy) {
                let (_, _, gold) = instruction_turn(ex, variant)?;
                let row = first_row.ok_or(Error::EmptyInput("answer tokens"))?;
                let letters: Vec<usize> = OPTION_LETTERS.iter().map(|l| l.as_bytes()[0] as usize).collect();
                let pick = letters
                    .iter()
                    .enumerate()
                    .fold(0, |best, (i, &id)| if row[id] > row[letters[best]] { i } else { best });
                s.option = Some(OPTION_LETTERS[pick] == gold);
            }
        }
    }
    Ok(s)
}

/// Scores every example of every modality in `sets`.
///
/// Alignment format: one item per example. Instruction format: a caption
/// item, an open question and a multiple-choice question per example, the
/// questions chosen by the example index.
pub fn evaluate<F: Scalar + Send + Sync, E: Executor>(
    model: &OneLlm<F>,
    sets: &BTreeMap<ModalityId, &[Example<F>]>,
    tasks: &[EvalTask],
    format: EvalFormat,
    exec: &E,
) -> Result<EvalReport> {
    let mut per_modality = Vec::new();
    for (&m, set) in sets {
        let items: Vec<(usize, usize)> = match format {
            EvalFormat::Alignment => (0..set.len()).map(|i| (i, 0)).collect(),
            EvalFormat::Instruction => (0..set.len())
                .flat_map(|i| {
                    let nq = set[i].qa.len().max(1);
                    [(i, 0), (i, 1 + i % nq), (i, 1 + nq + (i / nq) % nq)]
                })
                .collect(),
        };
        let scores = exec.map(items.len(), |j| {
            let (i, variant) = items[j];
            score_item(model, &set[i], format, variant, tasks)
        });
        let scores = scores.into_iter().collect::<Result<Vec<_>>>()?;
        let k = model.config.upm.experts;
        let mut routing = vec![0.0; k];
        let (mut nll, mut ntok) = (0.0, 0usize);
        let (mut ex_hit, mut ex_n, mut qa_hit, mut qa_n, mut op_hit, mut op_n) = (0, 0, 0, 0, 0, 0);
        for s in &scores {
            routing.iter_mut().zip(&s.routing).for_each(|(a, b)| *a += b);
            nll += s.nll.0;
            ntok += s.nll.1;
            if let Some(e) = s.exact {
                ex_hit += e as usize;
                ex_n += 1;
            }
            if let Some((h, n)) = s.qa {
                qa_hit += h;
                qa_n += n;
            }
            if let Some(o) = s.option {
                op_hit += o as usize;
                op_n += 1;
            }
        }
        routing.iter_mut().for_each(|v| *v /= scores.len().max(1) as f64);
        let ratio = |h: usize, n: usize| (n > 0).then(|| h as f64 / n as f64);
        per_modality.push(ModalityMetrics {
            modality: m,
            items: scores.len(),
            caption_exact_match: if tasks.contains(&EvalTask::CaptionExactMatch) { ratio(ex_hit, ex_n) } else { None },
            qa_token_accuracy: if tasks.contains(&EvalTask::QaTokenAccuracy) { ratio(qa_hit, qa_n) } else { None },
            option_accuracy: if tasks.contains(&EvalTask::QaTokenAccuracy) { ratio(op_hit, op_n) } else { None },
            perplexity: (tasks.contains(&EvalTask::Perplexity) && ntok > 0).then(|| libm::exp(nll / ntok as f64)),
            routing,
        });
    }
    Ok(EvalReport { format, per_modality })
}

/// Mean caption loss over `set`: the bare caption after the projected
/// signal, or the caption answer to the captioning prompt.
pub fn validation_loss<F: Scalar + Send + Sync, E: Executor>(
    model: &OneLlm<F>,
    set: &[Example<F>],
    format: EvalFormat,
    exec: &E,
) -> Result<f64> {
    if set.is_empty() {
        return Err(Error::EmptyInput("validation set"));
    }
    let losses = exec.map(set.len(), |i| {
        let ex = &set[i];
        let mut g = Graph::new(&model.store);
        let l = match format {
            EvalFormat::Alignment => model.caption_loss(&mut g, &ex.signal, &ex.caption)?,
            EvalFormat::Instruction => {
                let turn = [(caption_prompt(ex.signal.modality), ex.caption.clone())];
                model.instruction_loss(&mut g, &[&ex.signal], "", &turn)?
            }
        };
        Ok::<_, Error>(g.value(l).data()[0].to_f64())
    });
    let mut sum = 0.0;
    for l in losses {
        sum += l?;
    }
    Ok(sum / set.len() as f64)
}

/// Full conversation text of a variant, as trained (for inspection).
pub fn conversation_text<F>(ex: &Example<F>, variant: usize) -> Result<String> {
    let (_, p, a) = instruction_turn(ex, variant)?;
    let (ids, _) = instruction_text("", &[(p, a)])?;
    let body: Vec<usize> = ids.into_iter().filter(|&i| i != EOS).collect();
    Ok(TextVocab::decode_lossy(&body))
}

/// Ids a model is prompted with before answering `variant`.
pub fn prompt_ids<F>(ex: &Example<F>, variant: usize) -> Result<Vec<usize>> {
    let (_, p, _) = instruction_turn(ex, variant)?;
    instruction_prompt("", &p)
}
