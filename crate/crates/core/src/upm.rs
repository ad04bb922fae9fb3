//! Universal projection module: `K` transformer experts mixed per token by
//! a modality-specific router, read out at learnable modality tokens.
//!
//! For modality `m` with tokens `q_m ∈ R^{N×D}` and encoded input `x_m`,
//! the joint sequence `[q_m, x_m]` goes through every expert `P_k`, the
//! router gives `w_m = softmax(R_m([q_m, x_m]))` restricted to the `N`
//! modality-token rows, and the projected tokens are
//! `q̄_m = Σ_k w_m[:, k] · P_k([q_m, x_m])[:N]`.

use alloc::format;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::encoder::{Block, EncodedFeatures};
use crate::init::Initializer;
use crate::{Error, Graph, ModalityId, ParamId, ParamStore, Result, Scalar, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RouterType {
    /// Softmax-weighted mixture of all experts.
    Soft,
    /// Only the highest-weighted expert, scaled by its weight.
    Sparse,
    /// Uniform `1/K` mixture; the router MLP is ignored.
    Constant,
}

impl RouterType {
    pub const ALL: [RouterType; 3] = [RouterType::Constant, RouterType::Sparse, RouterType::Soft];

    pub fn as_str(self) -> &'static str {
        match self {
            RouterType::Soft => "soft",
            RouterType::Sparse => "sparse",
            RouterType::Constant => "constant",
        }
    }
}

impl fmt::Display for RouterType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RouterType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "soft" => Ok(RouterType::Soft),
            "sparse" => Ok(RouterType::Sparse),
            "constant" => Ok(RouterType::Constant),
            _ => Err(Error::Argument(format!("unknown router type `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UpmConfig {
    pub width: usize,
    /// Modality tokens per modality (N).
    pub tokens: usize,
    /// Number of projection experts (K).
    pub experts: usize,
    pub expert_depth: usize,
    pub heads: usize,
    pub router: RouterType,
}

impl UpmConfig {
    pub fn desk() -> Self {
        Self {
            width: 64,
            tokens: 4,
            experts: 3,
            expert_depth: 2,
            heads: 4,
            router: RouterType::Soft,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Router {
    fc1: (ParamId, ParamId),
    fc2: (ParamId, ParamId),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Expert {
    pub blocks: Vec<Block>,
}

impl Expert {
    pub fn forward<F: Scalar>(&self, g: &mut Graph<'_, F>, joint: Var) -> Result<Var> {
        let mut x = joint;
        for b in &self.blocks {
            x = b.forward(g, x, false)?;
        }
        Ok(x)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpmOutput {
    pub modality: ModalityId,
    /// Projected modality tokens, `[N×D]`.
    pub q_bar: Var,
    /// Effective per-token expert weights, `[N×K]`.
    pub routing_weights: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Upm {
    pub config: UpmConfig,
    experts: Vec<Expert>,
    tokens: Vec<ParamId>,
    routers: Vec<Router>,
}

pub fn expert_prefix(k: usize) -> alloc::string::String {
    format!("upm.experts.{k}.")
}

pub fn router_prefix(m: ModalityId) -> alloc::string::String {
    format!("upm.routers.{m}.")
}

pub fn tokens_name(m: ModalityId) -> alloc::string::String {
    format!("upm.tokens.{m}")
}

impl Upm {
    pub fn new<F: Scalar>(config: UpmConfig, store: &mut ParamStore<F>, init: &mut Initializer) -> Result<Self> {
        if config.experts == 0 {
            return Err(Error::Argument("the projection module needs at least one expert".into()));
        }
        if config.tokens == 0 || config.expert_depth == 0 {
            return Err(Error::Config("modality token count and expert depth must be positive".into()));
        }
        let d = config.width;
        let experts = (0..config.experts)
            .map(|k| {
                let blocks = (0..config.expert_depth)
                    .map(|i| {
                        Block::new(
                            store,
                            init,
                            &format!("upm.experts.{k}.blocks.{i}"),
                            d,
                            config.heads,
                            config.expert_depth,
                        )
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(Expert { blocks })
            })
            .collect::<Result<Vec<_>>>()?;
        let tokens = ModalityId::ALL
            .iter()
            .map(|&m| init.tensor(store, &tokens_name(m), &[config.tokens, d], 0.5, true))
            .collect::<Result<Vec<_>>>()?;
        let routers = ModalityId::ALL
            .iter()
            .map(|&m| {
                let p = format!("upm.routers.{m}");
                Ok(Router {
                    fc1: (
                        init.linear(store, &format!("{p}.fc1.w"), d, d, 1.0)?,
                        init.zeros(store, &format!("{p}.fc1.b"), &[d])?,
                    ),
                    fc2: (
                        init.linear(store, &format!("{p}.fc2.w"), d, config.experts, 1.0)?,
                        init.zeros(store, &format!("{p}.fc2.b"), &[config.experts])?,
                    ),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config,
            experts,
            tokens,
            routers,
        })
    }

    pub fn experts(&self) -> &[Expert] {
        &self.experts
    }

    pub fn modality_tokens(&self, m: ModalityId) -> ParamId {
        self.tokens[m.index()]
    }

    /// Router weights of modality `m` as `(fc1.w, fc1.b, fc2.w, fc2.b)`.
    pub fn router_params(&self, m: ModalityId) -> [ParamId; 4] {
        let r = &self.routers[m.index()];
        [r.fc1.0, r.fc1.1, r.fc2.0, r.fc2.1]
    }

    /// Soft routing weights `[N×K]` over the modality-token rows of `joint`.
    ///
    /// The router MLP acts on each position independently, so applying it
    /// to the first `N` rows only gives exactly the rows that are kept.
    pub fn route<F: Scalar>(&self, g: &mut Graph<'_, F>, modality: ModalityId, joint: Var) -> Result<Var> {
        let r = self
            .routers
            .get(modality.index())
            .ok_or_else(|| Error::Config(format!("no router registered for {modality}")))?;
        let n = self.config.tokens;
        let head = g.slice_rows(joint, 0, n)?;
        let (w1, b1) = (g.param(r.fc1.0), g.param(r.fc1.1));
        let (w2, b2) = (g.param(r.fc2.0), g.param(r.fc2.1));
        let h = g.matmul(head, w1)?;
        let h = g.add_bias(h, b1)?;
        let h = g.gelu(h)?;
        let logits = g.matmul(h, w2)?;
        let logits = g.add_bias(logits, b2)?;
        g.softmax(logits)
    }

    pub fn forward<F: Scalar>(
        &self,
        g: &mut Graph<'_, F>,
        x: EncodedFeatures,
        router: RouterType,
    ) -> Result<UpmOutput> {
        let m = x.modality;
        let (_, d) = g.value(x.features).dims2()?;
        if d != self.config.width {
            return Err(Error::Config(format!(
                "{m} features have width {d}, projection module expects {}",
                self.config.width
            )));
        }
        let n = self.config.tokens;
        let q = g.param(self.tokens[m.index()]);
        let joint = g.concat_rows(&[q, x.features])?;
        let outs = self
            .experts
            .iter()
            .map(|e| {
                let y = e.forward(g, joint)?;
                g.slice_rows(y, 0, n)
            })
            .collect::<Result<Vec<_>>>()?;
        let weights = match router {
            RouterType::Constant => None,
            _ => Some(self.route(g, m, joint)?),
        };
        let (q_bar, routing_weights) = combine_experts(g, &outs, weights, router)?;
        Ok(UpmOutput {
            modality: m,
            q_bar,
            routing_weights,
        })
    }
}

/// Combines per-expert `[N×D]` outputs. `weights` are soft router weights
/// `[N×K]` (ignored by, and not needed for, the constant router).
///
/// Returns the combined tokens and the effective weights used: the soft
/// weights, the soft weights masked to each row's argmax (ties to the
/// lower expert) for sparse, or `1/K` everywhere for constant. The sparse
/// mask is a constant, so gradients reach only the winning expert and its
/// weight.
pub fn combine_experts<F: Scalar>(
    g: &mut Graph<'_, F>,
    outs: &[Var],
    weights: Option<Var>,
    router: RouterType,
) -> Result<(Var, Var)> {
    let first = *outs.first().ok_or(Error::EmptyInput("expert outputs"))?;
    let k = outs.len();
    let (n, _) = g.value(first).dims2()?;
    let w = match router {
        RouterType::Constant => g.input(Tensor::full(&[n, k], F::ONE / F::from_usize(k))),
        RouterType::Soft => weights.ok_or_else(|| Error::Argument("soft router needs weights".into()))?,
        RouterType::Sparse => {
            let w = weights.ok_or_else(|| Error::Argument("sparse router needs weights".into()))?;
            let mut mask = Tensor::<F>::zeros(&[n, k]);
            for r in 0..n {
                let row = g.value(w).row(r);
                let mut best = 0;
                for j in 1..k {
                    if row[j] > row[best] {
                        best = j;
                    }
                }
                mask.data_mut()[r * k + best] = F::ONE;
            }
            let mask = g.input(mask);
            g.mul(w, mask)?
        }
    };
    let mixed = g.mix(outs, w)?;
    Ok((mixed, w))
}
