//! TOML run configuration.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use onellm_core::data::RenderConfig;
use onellm_core::model::{ExpertInit, ModelConfig};
use onellm_core::pipeline::{EvalTask, ReplayMode, StageId, StagePlan};
use onellm_core::upm::RouterType;
use onellm_core::ModalityId;
use serde::{Deserialize, Serialize};

use crate::binio::fnv64;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed for initialisation and sampling (`--seed`).
    pub seed: u64,
    pub model: ModelSection,
    pub data: DataSection,
    pub stages: StagesSection,
    pub eval: EvalSection,
    pub ablation: AblationSection,
    pub io: IoSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    /// Token width D of tokenizers, encoder and projection module.
    pub width: usize,
    /// Modality tokens N.
    pub tokens: usize,
    /// Projection experts K from stage II on (stage I always uses one).
    pub experts: usize,
    pub heads: usize,
    pub encoder_depth: usize,
    pub expert_depth: usize,
    pub decoder_depth: usize,
    pub decoder_width: usize,
    pub max_seq: usize,
    pub router: RouterType,
    pub frozen_encoder: bool,
    /// How stage II builds its experts from the stage-I expert.
    pub expert_init: ExpertInit,
}

impl Default for ModelSection {
    fn default() -> Self {
        let d = ModelConfig::desk();
        Self {
            width: d.encoder.width,
            tokens: d.upm.tokens,
            experts: d.upm.experts,
            heads: d.encoder.heads,
            encoder_depth: d.encoder.depth,
            expert_depth: d.upm.expert_depth,
            decoder_depth: d.decoder.depth,
            decoder_width: d.decoder.width,
            max_seq: d.decoder.max_seq,
            router: d.upm.router,
            frozen_encoder: d.encoder.frozen,
            expert_init: ExpertInit::Image,
        }
    }
}

impl ModelSection {
    /// Full model config with `experts` projection experts.
    pub fn model_config(&self, experts: usize) -> Result<ModelConfig> {
        let sizes = [
            ("width", self.width),
            ("tokens", self.tokens),
            ("experts", experts),
            ("heads", self.heads),
            ("encoder_depth", self.encoder_depth),
            ("expert_depth", self.expert_depth),
            ("decoder_depth", self.decoder_depth),
            ("decoder_width", self.decoder_width),
        ];
        if let Some((name, _)) = sizes.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("model.{name} must be positive")));
        }
        if !self.width.is_multiple_of(self.heads) || !self.decoder_width.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "model.heads = {} must divide width {} and decoder_width {}",
                self.heads, self.width, self.decoder_width
            )));
        }
        let mut c = ModelConfig::desk();
        c.tokenizer.width = self.width;
        c.encoder.width = self.width;
        c.encoder.depth = self.encoder_depth;
        c.encoder.heads = self.heads;
        c.encoder.frozen = self.frozen_encoder;
        c.upm.width = self.width;
        c.upm.tokens = self.tokens;
        c.upm.experts = experts;
        c.upm.expert_depth = self.expert_depth;
        c.upm.heads = self.heads;
        c.upm.router = self.router;
        c.decoder.depth = self.decoder_depth;
        c.decoder.width = self.decoder_width;
        c.decoder.heads = self.heads;
        c.decoder.max_seq = self.max_seq;
        c.validate()?;
        Ok(c)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Training scenes use seeds `seed..seed + size`.
    pub seed: u64,
    /// Held-out scenes use seeds `eval_seed..eval_seed + eval_size`.
    pub eval_seed: u64,
    pub train_size: usize,
    pub eval_size: usize,
    /// Per-modality training sizes overriding `train_size`.
    pub sizes: BTreeMap<String, usize>,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            seed: 0,
            eval_seed: 1_000_000,
            train_size: 2000,
            eval_size: 200,
            sizes: BTreeMap::new(),
        }
    }
}

impl DataSection {
    pub fn size(&self, m: ModalityId) -> usize {
        self.sizes.get(m.as_str()).copied().unwrap_or(self.train_size)
    }

    pub fn train_seeds(&self, m: ModalityId) -> std::ops::Range<u64> {
        self.seed..self.seed + self.size(m) as u64
    }

    pub fn eval_seeds(&self) -> std::ops::Range<u64> {
        self.eval_seed..self.eval_seed + self.eval_size as u64
    }

    /// Every training seed of every modality.
    pub fn train_span(&self) -> std::ops::Range<u64> {
        let end = ModalityId::ALL.iter().map(|&m| self.train_seeds(m).end).max().unwrap_or(self.seed);
        self.seed..end
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSection {
    pub steps: u64,
    pub batch: usize,
    #[serde(default = "one")]
    pub accum: usize,
    pub lr: f64,
    pub warmup: u64,
}

fn one() -> usize {
    1
}

impl StageSection {
    pub fn plan(&self, stage: StageId) -> StagePlan {
        let mut p = StagePlan::standard(stage, self.steps, self.batch, self.lr, self.warmup);
        p.accum = self.accum;
        p
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StagesSection {
    pub replay: ReplayMode,
    /// Caption-text warm-up of the decoder before stage I.
    pub text: StageSection,
    #[serde(rename = "I")]
    pub stage_i: StageSection,
    #[serde(rename = "II")]
    pub stage_ii: StageSection,
    #[serde(rename = "III")]
    pub stage_iii: StageSection,
    pub instruct: StageSection,
}

impl Default for StagesSection {
    fn default() -> Self {
        let s = |steps, batch, lr, warmup| StageSection {
            steps,
            batch,
            accum: 1,
            lr,
            warmup,
        };
        Self {
            replay: ReplayMode::Uniform,
            text: s(300, 16, 3e-3, 30),
            stage_i: s(1000, 16, 3e-3, 100),
            stage_ii: s(800, 8, 6e-4, 80),
            stage_iii: s(400, 8, 6e-4, 40),
            instruct: s(2000, 8, 3e-3, 100),
        }
    }
}

impl StagesSection {
    pub fn get(&self, stage: StageId) -> &StageSection {
        match stage {
            StageId::I => &self.stage_i,
            StageId::II => &self.stage_ii,
            StageId::III => &self.stage_iii,
            StageId::Instruct => &self.instruct,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub tasks: Vec<EvalTask>,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            tasks: EvalTask::ALL.to_vec(),
        }
    }
}

/// Short runs used by every ablation row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationSection {
    /// Stage-II alignment run of each row.
    pub align: StageSection,
    /// Instruction run of the joint row (split evenly over the separate rows).
    pub instruct: StageSection,
    /// Modalities of the training-mode comparison.
    pub mode_modalities: Vec<ModalityId>,
    /// Held-out examples per modality.
    pub eval_size: usize,
    pub experts: Vec<usize>,
}

impl Default for AblationSection {
    fn default() -> Self {
        Self {
            align: StageSection {
                steps: 300,
                batch: 8,
                accum: 1,
                lr: 6e-4,
                warmup: 30,
            },
            instruct: StageSection {
                steps: 400,
                batch: 8,
                accum: 1,
                lr: 3e-3,
                warmup: 40,
            },
            mode_modalities: vec![ModalityId::Image, ModalityId::Video, ModalityId::Audio, ModalityId::Point],
            eval_size: 50,
            experts: vec![1, 3, 5, 7],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IoSection {
    pub run_dir: PathBuf,
}

impl Default for IoSection {
    fn default() -> Self {
        Self {
            run_dir: PathBuf::from("runs/desk"),
        }
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            model: ModelSection::default(),
            data: DataSection::default(),
            stages: StagesSection::default(),
            eval: EvalSection::default(),
            ablation: AblationSection::default(),
            io: IoSection::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let c: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serialises")
    }

    /// Hash of the resolved configuration text.
    pub fn hash(&self) -> u64 {
        fnv64(self.to_toml().as_bytes())
    }

    pub fn render(&self) -> RenderConfig {
        RenderConfig::desk()
    }

    pub fn validate(&self) -> Result<()> {
        self.model.model_config(1)?;
        self.model.model_config(self.model.experts)?;
        for name in self.data.sizes.keys() {
            if name.parse::<ModalityId>().is_err() {
                return Err(Error::Config(format!("data.sizes: unknown modality `{name}`")));
            }
        }
        for m in ModalityId::ALL {
            if self.data.size(m) == 0 {
                return Err(Error::Config(format!("data: {m} training size is 0")));
            }
        }
        if self.data.eval_size == 0 {
            return Err(Error::Config("data.eval_size is 0".into()));
        }
        let train = self.data.train_span();
        let n = self.data.eval_size.max(self.ablation.eval_size) as u64;
        let eval = self.data.eval_seed..self.data.eval_seed + n;
        if eval.start < train.end && train.start < eval.end {
            return Err(Error::Config(format!("held-out seeds {eval:?} overlap training seeds {train:?}")));
        }
        let stages = [
            ("text", &self.stages.text),
            ("I", &self.stages.stage_i),
            ("II", &self.stages.stage_ii),
            ("III", &self.stages.stage_iii),
            ("instruct", &self.stages.instruct),
            ("ablation.align", &self.ablation.align),
            ("ablation.instruct", &self.ablation.instruct),
        ];
        for (name, s) in stages {
            if s.batch == 0 || s.accum == 0 || !(s.lr > 0.0 && s.lr.is_finite()) {
                return Err(Error::Config(format!("stages.{name}: batch, accum and lr must be positive")));
            }
        }
        if self.ablation.mode_modalities.is_empty() || self.ablation.eval_size == 0 {
            return Err(Error::Config("ablation needs modalities and a nonzero eval size".into()));
        }
        if self.ablation.experts.contains(&0) {
            return Err(Error::Config("ablation.experts must be positive".into()));
        }
        if self.eval.tasks.is_empty() {
            return Err(Error::Config("eval.tasks is empty".into()));
        }
        Ok(())
    }
}
