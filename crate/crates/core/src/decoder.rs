//! Byte-level causal language model and input-sequence assembly.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::encoder::Block;
use crate::init::Initializer;
use crate::upm::UpmOutput;
use crate::{Error, Graph, ModalityId, ParamId, ParamStore, Result, Scalar, Tensor, Var};

pub const BOS: usize = 256;
pub const EOS: usize = 257;
pub const PAD: usize = 258;
pub const VOCAB_SIZE: usize = 259;

/// Separator appended to every instruction (and to a non-empty system
/// prompt) so that the answer starts on its own line.
pub const TURN_SEPARATOR: &[u8] = b"\n";

/// Byte vocabulary: ids `0..256` are raw bytes, then BOS, EOS and PAD.
pub struct TextVocab;

impl TextVocab {
    pub fn encode(text: &[u8]) -> Vec<usize> {
        text.iter().map(|&b| b as usize).collect()
    }

    /// Bytes of the non-special ids.
    pub fn decode(ids: &[usize]) -> Vec<u8> {
        ids.iter().filter(|&&i| i < 256).map(|&i| i as u8).collect()
    }

    pub fn decode_lossy(ids: &[usize]) -> String {
        String::from_utf8_lossy(&Self::decode(ids)).into_owned()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderConfig {
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    pub max_seq: usize,
    pub vocab: usize,
}

impl DecoderConfig {
    pub fn desk() -> Self {
        Self {
            depth: 2,
            width: 64,
            heads: 4,
            max_seq: 160,
            vocab: VOCAB_SIZE,
        }
    }
}

/// Linear map from projected modality tokens into the decoder's
/// embedding space.
#[derive(Debug, Clone, PartialEq)]
pub struct Adapter {
    w: ParamId,
    b: ParamId,
}

impl Adapter {
    pub fn new<F: Scalar>(store: &mut ParamStore<F>, init: &mut Initializer, d_in: usize, d_out: usize) -> Result<Self> {
        Ok(Self {
            w: init.linear(store, "adapter.w", d_in, d_out, 1.0)?,
            b: init.zeros(store, "adapter.b", &[d_out])?,
        })
    }

    pub fn forward<F: Scalar>(&self, g: &mut Graph<'_, F>, x: Var) -> Result<Var> {
        let w = g.param(self.w);
        let b = g.param(self.b);
        let y = g.matmul(x, w)?;
        g.add_bias(y, b)
    }
}

/// Decoder input: embedded modality prefix followed by text tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct AssembledSequence {
    /// `[M×D_lm]` prefix embeddings, `None` for text-only sequences.
    pub prefix: Option<Var>,
    pub prefix_len: usize,
    pub modality_order: Vec<ModalityId>,
    /// Text token ids, starting with BOS.
    pub ids: Vec<usize>,
    /// Per text position: whether that token is a prediction target.
    pub loss_mask: Vec<bool>,
    /// Set when the caption had to be cut to fit `max_seq`.
    pub truncated: bool,
}

impl AssembledSequence {
    pub fn total_len(&self) -> usize {
        self.prefix_len + self.ids.len()
    }
}

fn adapted_prefix<F: Scalar>(
    g: &mut Graph<'_, F>,
    adapter: &Adapter,
    q_bars: &[UpmOutput],
) -> Result<(Option<Var>, usize, Vec<ModalityId>)> {
    if q_bars.is_empty() {
        return Ok((None, 0, Vec::new()));
    }
    let blocks: Vec<Var> = q_bars.iter().map(|q| q.q_bar).collect();
    let joined = if blocks.len() == 1 {
        blocks[0]
    } else {
        g.concat_rows(&blocks)?
    };
    let prefix = adapter.forward(g, joined)?;
    let len = g.shape(prefix)[0];
    Ok((Some(prefix), len, q_bars.iter().map(|q| q.modality).collect()))
}

/// `[q̄ | BOS caption EOS]` with loss on the caption bytes and EOS.
pub fn assemble_alignment_sequence<F: Scalar>(
    g: &mut Graph<'_, F>,
    adapter: &Adapter,
    q_bar: &UpmOutput,
    caption: &str,
    max_seq: usize,
) -> Result<AssembledSequence> {
    if caption.is_empty() {
        return Err(Error::Argument("caption must be nonempty".into()));
    }
    let (prefix, prefix_len, modality_order) = adapted_prefix(g, adapter, core::slice::from_ref(q_bar))?;
    let mut body = TextVocab::encode(caption.as_bytes());
    let room = max_seq.saturating_sub(prefix_len + 2);
    let truncated = body.len() > room;
    if room == 0 {
        return Err(Error::Length {
            len: prefix_len + 2,
            max: max_seq,
        });
    }
    body.truncate(room);
    let mut ids = Vec::with_capacity(body.len() + 2);
    ids.push(BOS);
    ids.extend_from_slice(&body);
    ids.push(EOS);
    let mut loss_mask = vec![true; ids.len()];
    loss_mask[0] = false;
    Ok(AssembledSequence {
        prefix,
        prefix_len,
        modality_order,
        ids,
        loss_mask,
        truncated,
    })
}

/// Text portion of an instruction sequence:
/// `BOS Sys [Ins_t Ans_t]… EOS`, loss on the answers and EOS only.
pub fn instruction_text(sys: &str, turns: &[(String, String)]) -> Result<(Vec<usize>, Vec<bool>)> {
    if turns.is_empty() {
        return Err(Error::Argument("instruction sequence needs at least one turn".into()));
    }
    let mut ids = vec![BOS];
    let mut mask = vec![false];
    let push = |bytes: &[u8], target: bool, ids: &mut Vec<usize>, mask: &mut Vec<bool>| {
        ids.extend(TextVocab::encode(bytes));
        mask.extend(core::iter::repeat_n(target, bytes.len()));
    };
    if !sys.is_empty() {
        push(sys.as_bytes(), false, &mut ids, &mut mask);
        push(TURN_SEPARATOR, false, &mut ids, &mut mask);
    }
    for (i, (ins, ans)) in turns.iter().enumerate() {
        if i > 0 {
            push(TURN_SEPARATOR, false, &mut ids, &mut mask);
        }
        push(ins.as_bytes(), false, &mut ids, &mut mask);
        push(TURN_SEPARATOR, false, &mut ids, &mut mask);
        push(ans.as_bytes(), true, &mut ids, &mut mask);
    }
    ids.push(EOS);
    mask.push(true);
    Ok((ids, mask))
}

/// `[q̄₁ … q̄_M | Sys | Ins₁ Ans₁ … | EOS]`; all modality blocks precede
/// the text, in the order given.
pub fn assemble_instruction_sequence<F: Scalar>(
    g: &mut Graph<'_, F>,
    adapter: &Adapter,
    q_bars: &[UpmOutput],
    sys: &str,
    turns: &[(String, String)],
) -> Result<AssembledSequence> {
    if q_bars.is_empty() {
        return Err(Error::Argument("instruction sequence needs at least one modality".into()));
    }
    let (ids, loss_mask) = instruction_text(sys, turns)?;
    let (prefix, prefix_len, modality_order) = adapted_prefix(g, adapter, q_bars)?;
    Ok(AssembledSequence {
        prefix,
        prefix_len,
        modality_order,
        ids,
        loss_mask,
        truncated: false,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decoder {
    pub config: DecoderConfig,
    tok_emb: ParamId,
    pos: ParamId,
    blocks: Vec<Block>,
    ln_f: (ParamId, ParamId),
    head: (ParamId, ParamId),
}

impl Decoder {
    pub fn new<F: Scalar>(config: DecoderConfig, store: &mut ParamStore<F>, init: &mut Initializer) -> Result<Self> {
        if config.vocab < VOCAB_SIZE {
            return Err(Error::Config(format!(
                "decoder vocabulary {} smaller than the byte vocabulary {VOCAB_SIZE}",
                config.vocab
            )));
        }
        let d = config.width;
        let tok_emb = init.tensor(store, "decoder.tok_emb", &[config.vocab, d], 1.0, true)?;
        let pos = init.tensor(store, "decoder.pos", &[config.max_seq, d], 0.1, false)?;
        let blocks = (0..config.depth)
            .map(|i| Block::new(store, init, &format!("decoder.blocks.{i}"), d, config.heads, config.depth))
            .collect::<Result<Vec<_>>>()?;
        let ln_f = (
            init.ones(store, "decoder.ln_f.g", &[d])?,
            init.zeros(store, "decoder.ln_f.b", &[d])?,
        );
        let head = (
            init.tensor(store, "decoder.head.w", &[d, config.vocab], 0.02, true)?,
            init.zeros(store, "decoder.head.b", &[config.vocab])?,
        );
        Ok(Self {
            config,
            tok_emb,
            pos,
            blocks,
            ln_f,
            head,
        })
    }

    pub fn token_embedding(&self) -> ParamId {
        self.tok_emb
    }

    /// Logits `[rows × vocab]` for the last `rows` positions of
    /// `[prefix ; embed(ids)]`.
    pub fn logits<F: Scalar>(&self, g: &mut Graph<'_, F>, prefix: Option<Var>, ids: &[usize], rows: usize) -> Result<Var> {
        let prefix_len = prefix.map_or(0, |p| g.shape(p)[0]);
        let total = prefix_len + ids.len();
        if total > self.config.max_seq {
            return Err(Error::Length {
                len: total,
                max: self.config.max_seq,
            });
        }
        if rows == 0 || rows > total {
            return Err(Error::Argument(format!("{rows} logit rows for a sequence of {total}")));
        }
        let emb = g.param(self.tok_emb);
        let text = g.embedding(emb, ids)?;
        let x = match prefix {
            Some(p) => {
                let pd = g.shape(p)[1];
                if pd != self.config.width {
                    return Err(Error::Config(format!(
                        "prefix width {pd}, decoder width {}",
                        self.config.width
                    )));
                }
                g.concat_rows(&[p, text])?
            }
            None => text,
        };
        let pos = g.param(self.pos);
        let pos = g.slice_rows(pos, 0, total)?;
        let mut x = g.add(x, pos)?;
        for b in &self.blocks {
            x = b.forward(g, x, true)?;
        }
        let tail = if rows == total { x } else { g.slice_rows(x, total - rows, rows)? };
        let (lg, lb) = (g.param(self.ln_f.0), g.param(self.ln_f.1));
        let h = g.layer_norm(tail, lg, lb)?;
        let (hw, hb) = (g.param(self.head.0), g.param(self.head.1));
        let logits = g.matmul(h, hw)?;
        g.add_bias(logits, hb)
    }

    /// Mean next-token cross-entropy over the masked text positions.
    pub fn lm_loss<F: Scalar>(&self, g: &mut Graph<'_, F>, seq: &AssembledSequence) -> Result<Var> {
        if seq.ids.len() < 2 || !seq.loss_mask[1..].iter().any(|&m| m) {
            return Err(Error::Argument("loss mask selects no positions".into()));
        }
        // Position prefix_len + j - 1 predicts text token j, for j >= 1.
        let rows = seq.ids.len() - 1;
        let logits = self.logits(g, seq.prefix, &seq.ids[..rows], rows)?;
        g.cross_entropy(logits, &seq.ids[1..], &seq.loss_mask[1..])
    }

    /// Greedy decoding after `[prefix ; prompt]`; stops at EOS (not
    /// included in the result) or after `max_new` tokens.
    pub fn generate_greedy<F: Scalar>(
        &self,
        store: &ParamStore<F>,
        prefix: Option<&Tensor<F>>,
        prompt: &[usize],
        max_new: usize,
    ) -> Result<Vec<usize>> {
        if max_new == 0 {
            return Err(Error::Argument("max_new must be at least 1".into()));
        }
        let mut ids = prompt.to_vec();
        let mut out = Vec::new();
        let prefix_len = prefix.map_or(0, |p| p.shape()[0]);
        for _ in 0..max_new {
            if prefix_len + ids.len() >= self.config.max_seq {
                break;
            }
            let mut g = Graph::new(store);
            let p = prefix.map(|p| g.input(p.clone()));
            let logits = self.logits(&mut g, p, &ids, 1)?;
            let row = g.value(logits).data();
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            if best == EOS {
                break;
            }
            out.push(best);
            ids.push(best);
        }
        Ok(out)
    }

    /// Teacher-forced logits for every text position after the first.
    pub fn all_logits<F: Scalar>(&self, g: &mut Graph<'_, F>, seq: &AssembledSequence) -> Result<Var> {
        let rows = seq.ids.len() - 1;
        self.logits(g, seq.prefix, &seq.ids[..rows], rows)
    }
}
