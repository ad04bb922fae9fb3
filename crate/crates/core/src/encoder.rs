//! Transformer blocks and the shared universal encoder.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::init::Initializer;
use crate::tokenizers::TokenSequence;
use crate::{Error, Graph, ModalityId, ParamId, ParamStore, Result, Scalar, Var};

/// Pre-norm transformer block: `x + Attn(LN(x))`, then `+ MLP(LN(·))`
/// with a GELU MLP of expansion 4.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    ln1: (ParamId, ParamId),
    wq: (ParamId, ParamId),
    wk: (ParamId, ParamId),
    wv: (ParamId, ParamId),
    wo: (ParamId, ParamId),
    ln2: (ParamId, ParamId),
    fc1: (ParamId, ParamId),
    fc2: (ParamId, ParamId),
    heads: usize,
}

impl Block {
    /// Registers the block's parameters under `prefix`. `depth` scales the
    /// residual output projections down by `1/sqrt(2·depth)`.
    pub fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        init: &mut Initializer,
        prefix: &str,
        width: usize,
        heads: usize,
        depth: usize,
    ) -> Result<Self> {
        if heads == 0 || !width.is_multiple_of(heads) {
            return Err(Error::Config(format!("width {width} not divisible by {heads} heads")));
        }
        let resid = 1.0 / libm::sqrt(2.0 * depth.max(1) as f64);
        let mut lin = |name: &str, fi: usize, fo: usize, gain: f64| -> Result<(ParamId, ParamId)> {
            let w = init.linear(store, &format!("{prefix}.{name}.w"), fi, fo, gain)?;
            let b = init.zeros(store, &format!("{prefix}.{name}.b"), &[fo])?;
            Ok((w, b))
        };
        let wq = lin("attn.q", width, width, 1.0)?;
        let wk = lin("attn.k", width, width, 1.0)?;
        let wv = lin("attn.v", width, width, 1.0)?;
        let wo = lin("attn.o", width, width, resid)?;
        let fc1 = lin("mlp.fc1", width, 4 * width, 1.0)?;
        let fc2 = lin("mlp.fc2", 4 * width, width, resid)?;
        let mut norm = |name: &str| -> Result<(ParamId, ParamId)> {
            let g = init.ones(store, &format!("{prefix}.{name}.g"), &[width])?;
            let b = init.zeros(store, &format!("{prefix}.{name}.b"), &[width])?;
            Ok((g, b))
        };
        let ln1 = norm("ln1")?;
        let ln2 = norm("ln2")?;
        Ok(Self {
            ln1,
            wq,
            wk,
            wv,
            wo,
            ln2,
            fc1,
            fc2,
            heads,
        })
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    /// Parameters of the attention and MLP output projections, which make
    /// the block an identity map when zeroed.
    pub fn output_projections(&self) -> [ParamId; 4] {
        [self.wo.0, self.wo.1, self.fc2.0, self.fc2.1]
    }

    fn linear<F: Scalar>(g: &mut Graph<'_, F>, x: Var, (w, b): (ParamId, ParamId)) -> Result<Var> {
        let w = g.param(w);
        let b = g.param(b);
        let y = g.matmul(x, w)?;
        g.add_bias(y, b)
    }

    fn norm<F: Scalar>(g: &mut Graph<'_, F>, x: Var, (gam, b): (ParamId, ParamId)) -> Result<Var> {
        let gam = g.param(gam);
        let b = g.param(b);
        g.layer_norm(x, gam, b)
    }

    pub fn forward<F: Scalar>(&self, g: &mut Graph<'_, F>, x: Var, causal: bool) -> Result<Var> {
        let h = Self::norm(g, x, self.ln1)?;
        let q = Self::linear(g, h, self.wq)?;
        let k = Self::linear(g, h, self.wk)?;
        let v = Self::linear(g, h, self.wv)?;
        let a = g.attention(q, k, v, self.heads, causal)?;
        let o = Self::linear(g, a, self.wo)?;
        let x = g.add(x, o)?;
        let h = Self::norm(g, x, self.ln2)?;
        let h = Self::linear(g, h, self.fc1)?;
        let h = g.gelu(h)?;
        let m = Self::linear(g, h, self.fc2)?;
        g.add(x, m)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    /// Rows of the learned positional table.
    pub max_len: usize,
    pub frozen: bool,
}

impl EncoderConfig {
    pub fn desk() -> Self {
        Self {
            depth: 2,
            width: 64,
            heads: 4,
            max_len: 64,
            frozen: true,
        }
    }
}

/// Output of the encoder for one modality input.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EncodedFeatures {
    pub modality: ModalityId,
    /// `[L×D]`, same `L` as the token sequence.
    pub features: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub config: EncoderConfig,
    pos: ParamId,
    blocks: Vec<Block>,
    ln_post: (ParamId, ParamId),
}

impl Encoder {
    pub fn new<F: Scalar>(config: EncoderConfig, store: &mut ParamStore<F>, init: &mut Initializer) -> Result<Self> {
        if config.max_len == 0 || config.depth == 0 {
            return Err(Error::Config("encoder depth and max_len must be positive".into()));
        }
        let pos = init.tensor(store, "encoder.pos", &[config.max_len, config.width], 0.1, false)?;
        let blocks = (0..config.depth)
            .map(|i| {
                Block::new(
                    store,
                    init,
                    &format!("encoder.blocks.{i}"),
                    config.width,
                    config.heads,
                    config.depth,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let ln_post = (
            init.ones(store, "encoder.ln_post.g", &[config.width])?,
            init.zeros(store, "encoder.ln_post.b", &[config.width])?,
        );
        Ok(Self {
            config,
            pos,
            blocks,
            ln_post,
        })
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    /// Adds positions (the table truncated to `L`) and runs every block
    /// bidirectionally. Whether gradients reach the encoder weights is
    /// governed by their `frozen` flags; gradients always pass through to
    /// the tokens.
    pub fn encode<F: Scalar>(&self, g: &mut Graph<'_, F>, tokens: TokenSequence) -> Result<EncodedFeatures> {
        let (l, d) = g.value(tokens.tokens).dims2()?;
        if d != self.config.width {
            return Err(Error::Config(format!(
                "{} tokens have width {d}, encoder expects {}",
                tokens.modality, self.config.width
            )));
        }
        if l > self.config.max_len {
            return Err(Error::Length {
                len: l,
                max: self.config.max_len,
            });
        }
        let pos = g.param(self.pos);
        let pos = g.slice_rows(pos, 0, l)?;
        let mut x = g.add(tokens.tokens, pos)?;
        for b in &self.blocks {
            x = b.forward(g, x, false)?;
        }
        let (lg, lb) = (g.param(self.ln_post.0), g.param(self.ln_post.1));
        let features = g.layer_norm(x, lg, lb)?;
        Ok(EncodedFeatures {
            modality: tokens.modality,
            features,
        })
    }
}

/// Token-wise mean over video frames.
pub fn average_video_frames<F: Scalar>(g: &mut Graph<'_, F>, frames: &[EncodedFeatures]) -> Result<EncodedFeatures> {
    let first = frames.first().ok_or(Error::EmptyInput("video frames"))?;
    let vars: Vec<Var> = frames.iter().map(|f| f.features).collect();
    Ok(EncodedFeatures {
        modality: first.modality,
        features: g.mean_stack(&vars)?,
    })
}
