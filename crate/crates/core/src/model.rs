//! The full model: tokenizers, encoder, projection module, adapter and
//! decoder sharing one parameter store.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::decoder::{
    assemble_alignment_sequence, assemble_instruction_sequence, instruction_text, Adapter, AssembledSequence,
    Decoder, DecoderConfig, TextVocab, BOS, EOS,
};
use crate::encoder::{average_video_frames, Encoder, EncoderConfig};
use crate::init::Initializer;
use crate::tokenizers::{RawSignal, TokenizerConfig, Tokenizers};
use crate::upm::{expert_prefix, tokens_name, Upm, UpmConfig, UpmOutput};
use crate::{Error, Graph, ModalityId, ParamStore, Result, Scalar, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub tokenizer: TokenizerConfig,
    pub encoder: EncoderConfig,
    pub upm: UpmConfig,
    pub decoder: DecoderConfig,
}

impl ModelConfig {
    pub fn desk() -> Self {
        Self {
            tokenizer: TokenizerConfig::desk(),
            encoder: EncoderConfig::desk(),
            upm: UpmConfig::desk(),
            decoder: DecoderConfig::desk(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.tokenizer.validate()?;
        let d = self.encoder.width;
        if self.tokenizer.width != d || self.upm.width != d {
            return Err(Error::Config(format!(
                "tokenizer width {}, encoder width {d} and projection width {} must agree",
                self.tokenizer.width, self.upm.width
            )));
        }
        if self.decoder.max_seq <= self.upm.tokens + 2 {
            return Err(Error::Config("decoder context cannot hold the modality prefix".into()));
        }
        Ok(())
    }
}

/// How experts are initialised when the projection module is widened.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExpertInit {
    /// Every expert starts as a copy of the image-trained expert.
    Image,
    /// Experts start from fresh random weights.
    Random,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OneLlm<F> {
    pub config: ModelConfig,
    pub store: ParamStore<F>,
    pub tokenizers: Tokenizers,
    pub encoder: Encoder,
    pub upm: Upm,
    pub adapter: Adapter,
    pub decoder: Decoder,
}

impl<F: Scalar> OneLlm<F> {
    /// Builds every component in a fixed order from `seed`. Encoder weights
    /// are frozen when the encoder config says so.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut init = Initializer::new(seed);
        let tokenizers = Tokenizers::new(config.tokenizer, &mut store, &mut init)?;
        let encoder = Encoder::new(config.encoder, &mut store, &mut init)?;
        let upm = Upm::new(config.upm, &mut store, &mut init)?;
        let adapter = Adapter::new(&mut store, &mut init, config.upm.width, config.decoder.width)?;
        let decoder = Decoder::new(config.decoder, &mut store, &mut init)?;
        let mut model = Self {
            config,
            store,
            tokenizers,
            encoder,
            upm,
            adapter,
            decoder,
        };
        model.set_encoder_frozen(config.encoder.frozen);
        Ok(model)
    }

    pub fn set_encoder_frozen(&mut self, frozen: bool) {
        self.config.encoder.frozen = frozen;
        for (_, p) in self.store.iter_mut() {
            if p.name.starts_with("encoder.") {
                p.frozen = frozen;
            }
        }
    }

    /// Tokenize, encode (averaging video frames) and project one signal.
    pub fn project(&self, g: &mut Graph<'_, F>, signal: &RawSignal<F>) -> Result<UpmOutput> {
        let seqs = self.tokenizers.tokenize(g, signal)?;
        let frames = seqs
            .into_iter()
            .map(|s| self.encoder.encode(g, s))
            .collect::<Result<Vec<_>>>()?;
        let features = if frames.len() == 1 {
            frames[0]
        } else {
            average_video_frames(g, &frames)?
        };
        self.upm.forward(g, features, self.config.upm.router)
    }

    pub fn caption_sequence(
        &self,
        g: &mut Graph<'_, F>,
        signal: &RawSignal<F>,
        caption: &str,
    ) -> Result<AssembledSequence> {
        let q = self.project(g, signal)?;
        assemble_alignment_sequence(g, &self.adapter, &q, caption, self.config.decoder.max_seq)
    }

    /// Next-token loss on `caption` conditioned on the projected signal.
    pub fn caption_loss(&self, g: &mut Graph<'_, F>, signal: &RawSignal<F>, caption: &str) -> Result<Var> {
        let seq = self.caption_sequence(g, signal, caption)?;
        self.decoder.lm_loss(g, &seq)
    }

    pub fn instruction_sequence(
        &self,
        g: &mut Graph<'_, F>,
        signals: &[&RawSignal<F>],
        sys: &str,
        turns: &[(String, String)],
    ) -> Result<AssembledSequence> {
        let qs = signals
            .iter()
            .map(|s| self.project(g, s))
            .collect::<Result<Vec<_>>>()?;
        assemble_instruction_sequence(g, &self.adapter, &qs, sys, turns)
    }

    /// Loss on the answers of a conversation about `signals`.
    pub fn instruction_loss(
        &self,
        g: &mut Graph<'_, F>,
        signals: &[&RawSignal<F>],
        sys: &str,
        turns: &[(String, String)],
    ) -> Result<Var> {
        let seq = self.instruction_sequence(g, signals, sys, turns)?;
        self.decoder.lm_loss(g, &seq)
    }

    /// `[N×D_lm]` soft prompt summarising `text`: its words are split into
    /// `N` consecutive groups and each row is the mean token embedding of
    /// one group (BOS for an empty group).
    pub fn word_prefix(&self, g: &mut Graph<'_, F>, text: &str) -> Result<Var> {
        let words: Vec<&str> = text.split(' ').filter(|w| !w.is_empty()).collect();
        if words.is_empty() {
            return Err(Error::Argument("text must contain a word".into()));
        }
        let n = self.config.upm.tokens;
        let mut ids = Vec::new();
        let mut rows: Vec<(usize, usize)> = Vec::with_capacity(n);
        for r in 0..n {
            let start = ids.len();
            for (w, word) in words.iter().enumerate() {
                if w * n / words.len() == r {
                    ids.extend(TextVocab::encode(word.as_bytes()));
                }
            }
            if ids.len() == start {
                ids.push(BOS);
            }
            rows.push((start, ids.len()));
        }
        let mut avg = Tensor::<F>::zeros(&[n, ids.len()]);
        for (r, &(a, b)) in rows.iter().enumerate() {
            let w = F::ONE / F::from_usize(b - a);
            avg.data_mut()[r * ids.len() + a..r * ids.len() + b].iter_mut().for_each(|v| *v = w);
        }
        let table = g.param(self.decoder.token_embedding());
        let emb = g.embedding(table, &ids)?;
        let avg = g.input(avg);
        g.matmul(avg, emb)
    }

    /// Decoder loss on `BOS text EOS`, after the [`Self::word_prefix`] of
    /// `text` when `conditioned`.
    pub fn text_loss(&self, g: &mut Graph<'_, F>, text: &str, conditioned: bool) -> Result<Var> {
        if text.is_empty() {
            return Err(Error::Argument("text must be nonempty".into()));
        }
        let prefix = if conditioned { Some(self.word_prefix(g, text)?) } else { None };
        let prefix_len = prefix.map_or(0, |p| g.shape(p)[0]);
        let mut ids = Vec::with_capacity(text.len() + 2);
        ids.push(BOS);
        ids.extend(TextVocab::encode(text.as_bytes()));
        ids.push(EOS);
        let mut loss_mask = alloc::vec![true; ids.len()];
        loss_mask[0] = false;
        let seq = AssembledSequence {
            prefix,
            prefix_len,
            modality_order: Vec::new(),
            ids,
            loss_mask,
            truncated: false,
        };
        self.decoder.lm_loss(g, &seq)
    }

    /// Adapted prefix embeddings `[M×D_lm]` of the given signals, in order,
    /// with the routing weights of each signal.
    pub fn prefix(&self, signals: &[&RawSignal<F>]) -> Result<(Tensor<F>, Vec<Tensor<F>>)> {
        if signals.is_empty() {
            return Err(Error::EmptyInput("signals"));
        }
        let mut g = Graph::new(&self.store);
        let qs = signals
            .iter()
            .map(|s| self.project(&mut g, s))
            .collect::<Result<Vec<_>>>()?;
        let routing = qs.iter().map(|q| g.value(q.routing_weights).clone()).collect();
        let blocks: Vec<Var> = qs.iter().map(|q| q.q_bar).collect();
        let joined = if blocks.len() == 1 { blocks[0] } else { g.concat_rows(&blocks)? };
        let p = self.adapter.forward(&mut g, joined)?;
        Ok((g.value(p).clone(), routing))
    }

    /// Greedy caption of a signal in the alignment format (no prompt).
    pub fn generate_caption(&self, signal: &RawSignal<F>, max_new: usize) -> Result<String> {
        let (prefix, _) = self.prefix(&[signal])?;
        let ids = self.decoder.generate_greedy(&self.store, Some(&prefix), &[BOS], max_new)?;
        Ok(TextVocab::decode_lossy(&ids))
    }

    /// Greedy answer to `instruction` about `signals` in the instruction
    /// format.
    pub fn generate_answer(
        &self,
        signals: &[&RawSignal<F>],
        sys: &str,
        instruction: &str,
        max_new: usize,
    ) -> Result<String> {
        let (prefix, _) = self.prefix(signals)?;
        let prompt = instruction_prompt(sys, instruction)?;
        let ids = self.decoder.generate_greedy(&self.store, Some(&prefix), &prompt, max_new)?;
        Ok(TextVocab::decode_lossy(&ids))
    }

    pub fn cast<G: Scalar>(&self) -> OneLlm<G> {
        OneLlm {
            config: self.config,
            store: self.store.cast(),
            tokenizers: self.tokenizers.clone(),
            encoder: self.encoder.clone(),
            upm: self.upm.clone(),
            adapter: self.adapter.clone(),
            decoder: self.decoder.clone(),
        }
    }

    /// A copy with `experts` projection experts.
    ///
    /// The encoder, decoder, adapter, image tokenizer and image modality
    /// tokens are copied. Experts copy expert 0 under [`ExpertInit::Image`]
    /// and keep fresh weights under [`ExpertInit::Random`]. Routers, other
    /// modality tokens and other tokenizers are freshly initialised from
    /// `seed`.
    pub fn with_experts(&self, experts: usize, init: ExpertInit, seed: u64) -> Result<Self> {
        let mut config = self.config;
        config.upm.experts = experts;
        let mut out = Self::new(config, seed)?;
        let image_tokens = tokens_name(ModalityId::Image);
        let image_tok = Tokenizers::param_prefix(ModalityId::Image);
        let e0 = expert_prefix(0);
        let mut copies: Vec<(String, String)> = Vec::new();
        for (_, p) in out.store.iter() {
            let name = p.name.as_str();
            let src = if name.starts_with("upm.experts.") {
                match init {
                    ExpertInit::Image => {
                        let rest = name.splitn(4, '.').nth(3).unwrap_or_default();
                        Some(format!("{e0}{rest}"))
                    }
                    ExpertInit::Random => None,
                }
            } else if name.starts_with("upm.routers.") || name.starts_with("upm.tokens.") {
                (name == image_tokens).then(|| String::from(name))
            } else if name.starts_with("tokenizer.") {
                name.starts_with(image_tok).then(|| String::from(name))
            } else {
                Some(String::from(name))
            };
            if let Some(src) = src {
                copies.push((String::from(name), src));
            }
        }
        for (dst, src) in copies {
            let from = self
                .store
                .by_name(&src)
                .ok_or_else(|| Error::Config(format!("source model has no parameter `{src}`")))?;
            let (t, frozen) = (from.tensor.clone(), from.frozen);
            let id = out.store.id(&dst).expect("name came from this store");
            out.store.assign(id, &t)?;
            out.store.get_mut(id).frozen = frozen;
        }
        Ok(out)
    }
}

/// Text ids of `BOS sys \n instruction \n`, after which the answer starts.
pub fn instruction_prompt(sys: &str, instruction: &str) -> Result<Vec<usize>> {
    let turns = [(String::from(instruction), String::new())];
    let (mut ids, _) = instruction_text(sys, &turns)?;
    ids.pop();
    Ok(ids)
}
