//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every op in execution order, so the node list is
//! already topologically sorted; [`Graph::backward`] walks it once in
//! reverse. Parameters enter the tape through [`Graph::param`] and their
//! gradients are returned as a [`Grads`] keyed by [`ParamId`]. Frozen
//! parameters and constant inputs do not require gradients, and any node
//! whose inputs all lack gradients is skipped during the backward walk.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::kernels::{add_into, axpy, dot, mm_acc, mm_nt_acc, mm_tn_acc, pairwise_sum};
use crate::{Error, ParamId, ParamStore, Result, Scalar, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    c_in: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    sh: usize,
    sw: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.oh * self.ow
    }

    fn im2col<F: Scalar>(&self, x: &[F]) -> Vec<F> {
        let patch = self.patch();
        let mut cols = vec![F::ZERO; self.positions() * patch];
        for oy in 0..self.oh {
            for ox in 0..self.ow {
                let row = &mut cols[(oy * self.ow + ox) * patch..][..patch];
                let mut j = 0;
                for c in 0..self.c_in {
                    for ky in 0..self.kh {
                        let src = c * self.h * self.w + (oy * self.sh + ky) * self.w + ox * self.sw;
                        row[j..j + self.kw].copy_from_slice(&x[src..src + self.kw]);
                        j += self.kw;
                    }
                }
            }
        }
        cols
    }

    fn col2im_acc<F: Scalar>(&self, cols: &[F], dx: &mut [F]) {
        let patch = self.patch();
        for oy in 0..self.oh {
            for ox in 0..self.ow {
                let row = &cols[(oy * self.ow + ox) * patch..][..patch];
                let mut j = 0;
                for c in 0..self.c_in {
                    for ky in 0..self.kh {
                        let dst = c * self.h * self.w + (oy * self.sh + ky) * self.w + ox * self.sw;
                        add_into(&mut dx[dst..dst + self.kw], &row[j..j + self.kw]);
                        j += self.kw;
                    }
                }
            }
        }
    }
}

#[derive(Debug)]
enum Op<F> {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    Gelu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<F>,
        rstd: Vec<F>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<F>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        mask: Vec<bool>,
        probs: Vec<F>,
        count: usize,
    },
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        cols: Vec<F>,
    },
    Reshape(Var),
    ConcatRows(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    MaxMiddle {
        x: Var,
        argmax: Vec<usize>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    MeanStack(Vec<Var>),
    Sum(Var),
    Mix {
        outs: Vec<Var>,
        w: Var,
    },
}

#[derive(Debug)]
struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
}

/// Per-parameter gradients produced by [`Graph::backward`].
///
/// Parameters that did not influence the loss (or are frozen) have no
/// entry, which reads as an exactly-zero gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Grads<F> {
    by_param: Vec<Option<Vec<F>>>,
}

impl<F: Scalar> Grads<F> {
    pub fn empty(n_params: usize) -> Self {
        Self {
            by_param: vec![None; n_params],
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&[F]> {
        self.by_param.get(id.0).and_then(|g| g.as_deref())
    }

    /// Gradient as a dense vector, zeros when the parameter was unused.
    pub fn get_or_zeros(&self, id: ParamId, numel: usize) -> Vec<F> {
        self.get(id).map(|g| g.to_vec()).unwrap_or_else(|| vec![F::ZERO; numel])
    }

    pub fn accumulate(&mut self, other: &Grads<F>) {
        if self.by_param.len() < other.by_param.len() {
            self.by_param.resize(other.by_param.len(), None);
        }
        for (dst, src) in self.by_param.iter_mut().zip(&other.by_param) {
            if let Some(src) = src {
                match dst {
                    Some(d) => add_into(d, src),
                    None => *dst = Some(src.clone()),
                }
            }
        }
    }

    pub fn scale(&mut self, factor: F) {
        for g in self.by_param.iter_mut().flatten() {
            for v in g.iter_mut() {
                *v *= factor;
            }
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.by_param
            .iter()
            .flatten()
            .flat_map(|g| g.iter())
            .map(|v| {
                let x = v.to_f64();
                x * x
            })
            .sum::<f64>()
            .sqrt()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &[F])> {
        self.by_param
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_deref().map(|g| (ParamId(i), g)))
    }
}

/// An expression tape over a borrowed [`ParamStore`].
pub struct Graph<'a, F: Scalar> {
    store: &'a ParamStore<F>,
    nodes: Vec<Node<F>>,
    param_vars: Vec<Option<Var>>,
}

fn check_finite<F: Scalar>(op: &'static str, t: &Tensor<F>) -> Result<()> {
    if t.all_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

fn gelu<F: Scalar>(x: F) -> F {
    let x3 = x * x * x;
    let t = (F::from_f64(GELU_C) * (x + F::from_f64(0.044715) * x3)).tanh();
    F::from_f64(0.5) * x * (F::ONE + t)
}

fn gelu_grad<F: Scalar>(x: F) -> F {
    let c = F::from_f64(GELU_C);
    let a = F::from_f64(0.044715);
    let t = (c * (x + a * x * x * x)).tanh();
    let half = F::from_f64(0.5);
    half * (F::ONE + t) + half * x * (F::ONE - t * t) * c * (F::ONE + F::from_f64(3.0) * a * x * x)
}

fn softmax_rows<F: Scalar>(x: &[F], cols: usize, out: &mut [F]) {
    for (xr, or) in x.chunks(cols).zip(out.chunks_mut(cols)) {
        softmax_in_place(xr, or);
    }
}

fn softmax_in_place<F: Scalar>(x: &[F], out: &mut [F]) {
    let m = x.iter().copied().fold(x[0], F::max);
    let mut s = F::ZERO;
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - m).exp();
        s += *o;
    }
    let inv = F::ONE / s;
    for o in out.iter_mut() {
        *o *= inv;
    }
}

impl<'a, F: Scalar> Graph<'a, F> {
    pub fn new(store: &'a ParamStore<F>) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            param_vars: vec![None; store.len()],
        }
    }

    pub fn store(&self) -> &'a ParamStore<F> {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A constant input; no gradient flows into it.
    pub fn input(&mut self, t: Tensor<F>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// The current value of a parameter; requires grad unless frozen.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let p = self.store.get(id);
        let v = self.push(p.tensor.clone(), Op::Param(id), !p.frozen);
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        if k != k2 {
            return Err(Error::dim(
                "matmul",
                format!("{:?} x {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let mut out = vec![F::ZERO; m * n];
        mm_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let t = Tensor::new(&[m, n], out)?;
        check_finite("matmul", &t)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        let src = self.value(x).data();
        let mut out = vec![F::ZERO; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let t = Tensor::new(&[c, r], out)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Transpose(x), rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let t = Tensor::new(self.shape(a), data)?;
        check_finite("add", &t)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let t = Tensor::new(self.shape(a), data)?;
        check_finite("mul", &t)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    /// Adds a bias vector along the trailing axis.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let n = self.value(x).last_dim();
        if self.value(bias).numel() != n {
            return Err(Error::dim(
                "add_bias",
                format!("bias {:?} for input {:?}", self.shape(bias), self.shape(x)),
            ));
        }
        let b = self.value(bias).data();
        let data = self
            .value(x)
            .data()
            .chunks(n)
            .flat_map(|row| row.iter().zip(b).map(|(&v, &bv)| v + bv))
            .collect();
        let t = Tensor::new(self.shape(x), data)?;
        check_finite("add_bias", &t)?;
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(t, Op::AddBias(x, bias), rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let c = F::from_f64(c);
        let data = self.value(x).data().iter().map(|&v| v * c).collect();
        let t = Tensor::new(self.shape(x), data)?;
        check_finite("scale", &t)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Scale(x, c), rg))
    }

    /// GELU with the tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let data = self.value(x).data().iter().map(|&v| gelu(v)).collect();
        let t = Tensor::new(self.shape(x), data)?;
        check_finite("gelu", &t)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Gelu(x), rg))
    }

    /// Softmax over the trailing axis, stabilised by max subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        check_finite("softmax", xv)?;
        let cols = xv.last_dim();
        let mut out = vec![F::ZERO; xv.numel()];
        softmax_rows(xv.data(), cols, &mut out);
        let t = Tensor::new(xv.shape(), out)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Softmax(x), rg))
    }

    /// Layer normalisation over the trailing axis with affine parameters.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let d = self.value(x).last_dim();
        if self.value(gamma).numel() != d || self.value(beta).numel() != d {
            return Err(Error::dim(
                "layer_norm",
                format!("affine of {:?} for input {:?}", self.shape(gamma), self.shape(x)),
            ));
        }
        let xv = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let rows = xv.len() / d;
        let mut xhat = vec![F::ZERO; xv.len()];
        let mut rstd = vec![F::ZERO; rows];
        let mut out = vec![F::ZERO; xv.len()];
        let inv_d = F::ONE / F::from_usize(d);
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<F>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() * inv_d;
            let rs = F::ONE / (var + F::from_f64(LN_EPS)).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let t = Tensor::new(self.shape(x), out)?;
        check_finite("layer_norm", &t)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Multi-head scaled dot-product attention over `[L×D]` inputs.
    ///
    /// With `causal`, position `i` attends to positions `0..=i` only.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, causal: bool) -> Result<Var> {
        let (lq, d) = self.value(q).dims2()?;
        let (lk, dk) = self.value(k).dims2()?;
        let (lv, dv) = self.value(v).dims2()?;
        if d != dk || d != dv || lk != lv || heads == 0 || d % heads != 0 || (causal && lq != lk) {
            return Err(Error::dim(
                "attention",
                format!(
                    "q {:?}, k {:?}, v {:?}, heads {heads}, causal {causal}",
                    self.shape(q),
                    self.shape(k),
                    self.shape(v)
                ),
            ));
        }
        let dh = d / heads;
        let scale = F::ONE / F::from_usize(dh).sqrt();
        let qd = self.value(q).data();
        let kd = self.value(k).data();
        let vd = self.value(v).data();
        let mut probs = vec![F::ZERO; heads * lq * lk];
        let mut out = vec![F::ZERO; lq * d];
        let mut qh = vec![F::ZERO; lq * dh];
        let mut kh = vec![F::ZERO; lk * dh];
        let mut vh = vec![F::ZERO; lk * dh];
        let mut oh = vec![F::ZERO; lq * dh];
        for h in 0..heads {
            gather_head(qd, d, h * dh, dh, &mut qh);
            gather_head(kd, d, h * dh, dh, &mut kh);
            gather_head(vd, d, h * dh, dh, &mut vh);
            let p = &mut probs[h * lq * lk..(h + 1) * lq * lk];
            for i in 0..lq {
                let qi = &qh[i * dh..(i + 1) * dh];
                let valid = if causal { i + 1 } else { lk };
                let row = &mut p[i * lk..(i + 1) * lk];
                for j in 0..valid {
                    row[j] = dot(qi, &kh[j * dh..(j + 1) * dh]) * scale;
                }
                let mut tmp = vec![F::ZERO; valid];
                softmax_in_place(&row[..valid], &mut tmp);
                row[..valid].copy_from_slice(&tmp);
                for r in row[valid..].iter_mut() {
                    *r = F::ZERO;
                }
            }
            oh.iter_mut().for_each(|o| *o = F::ZERO);
            mm_acc(p, &vh, &mut oh, lq, lk, dh);
            scatter_head(&oh, d, h * dh, dh, &mut out);
        }
        let t = Tensor::new(&[lq, d], out)?;
        check_finite("attention", &t)?;
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(
            t,
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
            rg,
        ))
    }

    /// Mean next-token cross-entropy over rows where `mask` is true.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let (t_len, vocab) = self.value(logits).dims2()?;
        if targets.len() != t_len || mask.len() != t_len {
            return Err(Error::dim(
                "cross_entropy",
                format!(
                    "logits {:?}, {} targets, {} mask entries",
                    self.shape(logits),
                    targets.len(),
                    mask.len()
                ),
            ));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= vocab) {
            return Err(Error::Argument(format!("target {bad} outside vocabulary {vocab}")));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::Argument("loss mask selects no positions".into()));
        }
        let lv = self.value(logits);
        check_finite("cross_entropy", lv)?;
        let mut probs = vec![F::ZERO; t_len * vocab];
        softmax_rows(lv.data(), vocab, &mut probs);
        let mut total = F::ZERO;
        for (i, (&t, &m)) in targets.iter().zip(mask).enumerate() {
            if m {
                let row = lv.row(i);
                let mx = row.iter().copied().fold(row[0], F::max);
                let lse = row.iter().map(|&z| (z - mx).exp()).sum::<F>().ln() + mx;
                total += lse - row[t];
            }
        }
        let t = Tensor::scalar(total / F::from_usize(count));
        check_finite("cross_entropy", &t)?;
        let rg = self.rg(logits);
        Ok(self.push(
            t,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                probs,
                count,
            },
            rg,
        ))
    }

    /// Valid (unpadded) 2-D convolution: `[C_in×H×W]` with weight
    /// `[C_out×C_in×Kh×Kw]` gives `[C_out×H'×W']`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: (usize, usize)) -> Result<Var> {
        let (c_in, h, wd) = match self.shape(x) {
            &[c, h, w] => (c, h, w),
            s => return Err(Error::dim("conv2d", format!("input must be C×H×W, got {s:?}"))),
        };
        let (c_out, kc, kh, kw) = match self.shape(w) {
            &[o, c, kh, kw] => (o, c, kh, kw),
            s => {
                return Err(Error::dim(
                    "conv2d",
                    format!("weight must be Cout×Cin×Kh×Kw, got {s:?}"),
                ))
            }
        };
        if kc != c_in || kh > h || kw > wd || stride.0 == 0 || stride.1 == 0 {
            return Err(Error::dim(
                "conv2d",
                format!(
                    "input {:?}, weight {:?}, stride {stride:?}",
                    self.shape(x),
                    self.shape(w)
                ),
            ));
        }
        let geom = ConvGeom {
            c_in,
            h,
            w: wd,
            kh,
            kw,
            sh: stride.0,
            sw: stride.1,
            oh: (h - kh) / stride.0 + 1,
            ow: (wd - kw) / stride.1 + 1,
        };
        self.conv(x, w, b, c_out, geom, &[c_out, geom.oh, geom.ow], "conv2d")
    }

    /// Valid 1-D convolution: `[C_in×L]` with weight `[C_out×C_in×K]`
    /// gives `[C_out×L']`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize) -> Result<Var> {
        let (c_in, l) = match self.shape(x) {
            &[c, l] => (c, l),
            s => return Err(Error::dim("conv1d", format!("input must be C×L, got {s:?}"))),
        };
        let (c_out, kc, k) = match self.shape(w) {
            &[o, c, k] => (o, c, k),
            s => return Err(Error::dim("conv1d", format!("weight must be Cout×Cin×K, got {s:?}"))),
        };
        if kc != c_in || k > l || stride == 0 {
            return Err(Error::dim(
                "conv1d",
                format!(
                    "input {:?}, weight {:?}, stride {stride}",
                    self.shape(x),
                    self.shape(w)
                ),
            ));
        }
        let geom = ConvGeom {
            c_in,
            h: 1,
            w: l,
            kh: 1,
            kw: k,
            sh: 1,
            sw: stride,
            oh: 1,
            ow: (l - k) / stride + 1,
        };
        self.conv(x, w, b, c_out, geom, &[c_out, geom.ow], "conv1d")
    }

    #[allow(clippy::too_many_arguments)]
    fn conv(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        c_out: usize,
        geom: ConvGeom,
        out_shape: &[usize],
        op: &'static str,
    ) -> Result<Var> {
        if let Some(b) = b {
            if self.value(b).numel() != c_out {
                return Err(Error::dim(op, format!("bias {:?} for {c_out} channels", self.shape(b))));
            }
        }
        let cols = geom.im2col(self.value(x).data());
        let p = geom.positions();
        let mut out = vec![F::ZERO; c_out * p];
        mm_nt_acc(self.value(w).data(), &cols, &mut out, c_out, geom.patch(), p);
        if let Some(b) = b {
            for (row, &bv) in out.chunks_mut(p).zip(self.value(b).data()) {
                row.iter_mut().for_each(|o| *o += bv);
            }
        }
        let t = Tensor::new(out_shape, out)?;
        check_finite(op, &t)?;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(t, Op::Conv { x, w, b, geom, cols }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    /// Stacks 2-D tensors with equal column counts vertically.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(Error::EmptyInput("concat_rows"))?;
        let (_, c) = self.value(first).dims2()?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (r, pc) = self.value(p).dims2()?;
            if pc != c {
                return Err(Error::dim(
                    "concat_rows",
                    format!("{:?} vs {:?}", self.shape(first), self.shape(p)),
                ));
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        let t = Tensor::new(&[rows, c], data)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(t, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        if len == 0 || start + len > r {
            return Err(Error::dim(
                "slice_rows",
                format!("rows {start}..{} of {:?}", start + len, self.shape(x)),
            ));
        }
        let data = self.value(x).data()[start * c..(start + len) * c].to_vec();
        let t = Tensor::new(&[len, c], data)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::SliceRows { x, start }, rg))
    }

    /// Maximum over the middle axis of an `[A×B×C]` tensor, giving `[A×C]`.
    /// Ties resolve to the lowest index along the reduced axis.
    pub fn max_middle(&mut self, x: Var) -> Result<Var> {
        let (a, b, c) = match self.shape(x) {
            &[a, b, c] => (a, b, c),
            s => return Err(Error::dim("max_middle", format!("expected 3-D, got {s:?}"))),
        };
        let src = self.value(x).data();
        let mut out = vec![F::ZERO; a * c];
        let mut argmax = vec![0usize; a * c];
        for i in 0..a {
            for k in 0..c {
                let mut best = src[i * b * c + k];
                let mut best_j = 0;
                for j in 1..b {
                    let v = src[(i * b + j) * c + k];
                    if v > best {
                        best = v;
                        best_j = j;
                    }
                }
                out[i * c + k] = best;
                argmax[i * c + k] = best_j;
            }
        }
        let t = Tensor::new(&[a, c], out)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::MaxMiddle { x, argmax }, rg))
    }

    /// Row lookup into a `[V×D]` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.value(table).dims2()?;
        if ids.is_empty() {
            return Err(Error::EmptyInput("embedding ids"));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::Argument(format!("token id {bad} outside table of {v}")));
        }
        let tab = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(&tab[i * d..(i + 1) * d]);
        }
        let t = Tensor::new(&[ids.len(), d], data)?;
        let rg = self.rg(table);
        Ok(self.push(
            t,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Elementwise mean of equally shaped tensors (pairwise summation).
    pub fn mean_stack(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(Error::EmptyInput("mean_stack"))?;
        for &p in parts {
            self.same_shape("mean_stack", first, p)?;
        }
        let slices: Vec<&[F]> = parts.iter().map(|&p| self.value(p).data()).collect();
        let mut out = vec![F::ZERO; self.value(first).numel()];
        pairwise_sum(&slices, &mut out);
        let inv = F::ONE / F::from_usize(parts.len());
        out.iter_mut().for_each(|o| *o *= inv);
        let t = Tensor::new(self.shape(first), out)?;
        check_finite("mean_stack", &t)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(t, Op::MeanStack(parts.to_vec()), rg))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().copied().sum::<F>();
        let t = Tensor::scalar(s);
        check_finite("sum", &t)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Sum(x), rg))
    }

    /// Per-row weighted combination of `K` equally shaped `[N×D]` tensors
    /// by the columns of `w: [N×K]`.
    pub fn mix(&mut self, outs: &[Var], w: Var) -> Result<Var> {
        let first = *outs.first().ok_or(Error::EmptyInput("mix"))?;
        let (n, d) = self.value(first).dims2()?;
        let (wn, k) = self.value(w).dims2()?;
        if wn != n || k != outs.len() {
            return Err(Error::dim(
                "mix",
                format!("{} outputs of {:?} with weights {:?}", outs.len(), self.shape(first), self.shape(w)),
            ));
        }
        for &o in outs {
            self.same_shape("mix", first, o)?;
        }
        let wd = self.value(w).data();
        let mut out = vec![F::ZERO; n * d];
        for (ki, &o) in outs.iter().enumerate() {
            let od = self.value(o).data();
            for r in 0..n {
                axpy(wd[r * k + ki], &od[r * d..(r + 1) * d], &mut out[r * d..(r + 1) * d]);
            }
        }
        let t = Tensor::new(&[n, d], out)?;
        check_finite("mix", &t)?;
        let rg = self.rg(w) || outs.iter().any(|&o| self.rg(o));
        Ok(self.push(
            t,
            Op::Mix {
                outs: outs.to_vec(),
                w,
            },
            rg,
        ))
    }

    /// Reverse pass from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Grads<F>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::dim(
                "backward",
                format!("loss must be a scalar, got {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Vec<F>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![F::ONE]);
        let mut out = Grads::empty(self.store.len());
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads, &mut out);
        }
        Ok(out)
    }

    fn buf<'g>(&self, grads: &'g mut [Option<Vec<F>>], v: Var) -> Option<&'g mut Vec<F>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let n = self.nodes[v.0].value.numel();
        Some(grads[v.0].get_or_insert_with(|| vec![F::ZERO; n]))
    }

    fn backward_node(&self, node: &Node<F>, g: &[F], grads: &mut [Option<Vec<F>>], out: &mut Grads<F>) {
        match &node.op {
            Op::Leaf => {}
            Op::Param(id) => match &mut out.by_param[id.0] {
                Some(acc) => add_into(acc, g),
                slot => *slot = Some(g.to_vec()),
            },
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2().expect("2-D");
                let n = self.value(*b).last_dim();
                let bd = self.value(*b).data();
                if let Some(da) = self.buf(grads, *a) {
                    mm_nt_acc(g, bd, da, m, n, k);
                }
                let ad = self.value(*a).data();
                if let Some(db) = self.buf(grads, *b) {
                    mm_tn_acc(ad, g, db, m, k, n);
                }
            }
            Op::Transpose(x) => {
                let (r, c) = self.value(*x).dims2().expect("2-D");
                if let Some(dx) = self.buf(grads, *x) {
                    for i in 0..r {
                        for j in 0..c {
                            dx[i * c + j] += g[j * r + i];
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                if let Some(da) = self.buf(grads, *a) {
                    add_into(da, g);
                }
                if let Some(db) = self.buf(grads, *b) {
                    add_into(db, g);
                }
            }
            Op::Mul(a, b) => {
                let bd = self.value(*b).data();
                if let Some(da) = self.buf(grads, *a) {
                    for ((d, &gv), &bv) in da.iter_mut().zip(g).zip(bd) {
                        *d += gv * bv;
                    }
                }
                let ad = self.value(*a).data();
                if let Some(db) = self.buf(grads, *b) {
                    for ((d, &gv), &av) in db.iter_mut().zip(g).zip(ad) {
                        *d += gv * av;
                    }
                }
            }
            Op::AddBias(x, b) => {
                if let Some(dx) = self.buf(grads, *x) {
                    add_into(dx, g);
                }
                let n = self.value(*b).numel();
                if let Some(db) = self.buf(grads, *b) {
                    for row in g.chunks(n) {
                        add_into(db, row);
                    }
                }
            }
            Op::Scale(x, c) => {
                if let Some(dx) = self.buf(grads, *x) {
                    axpy(*c, g, dx);
                }
            }
            Op::Gelu(x) => {
                let xd = self.value(*x).data();
                if let Some(dx) = self.buf(grads, *x) {
                    for ((d, &gv), &xv) in dx.iter_mut().zip(g).zip(xd) {
                        *d += gv * gelu_grad(xv);
                    }
                }
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let cols = node.value.last_dim();
                if let Some(dx) = self.buf(grads, *x) {
                    for ((dr, gr), yr) in dx.chunks_mut(cols).zip(g.chunks(cols)).zip(y.chunks(cols)) {
                        let s = dot(gr, yr);
                        for ((d, &gv), &yv) in dr.iter_mut().zip(gr).zip(yr) {
                            *d += yv * (gv - s);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = self.value(*gamma).numel();
                let gam = self.value(*gamma).data();
                if let Some(dg) = self.buf(grads, *gamma) {
                    for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            dg[j] += gr[j] * hr[j];
                        }
                    }
                }
                if let Some(db) = self.buf(grads, *beta) {
                    for gr in g.chunks(d) {
                        add_into(db, gr);
                    }
                }
                if let Some(dx) = self.buf(grads, *x) {
                    let inv_d = F::ONE / F::from_usize(d);
                    let mut dh = vec![F::ZERO; d];
                    for (r, (gr, hr)) in g.chunks(d).zip(xhat.chunks(d)).enumerate() {
                        for j in 0..d {
                            dh[j] = gr[j] * gam[j];
                        }
                        let m1 = dh.iter().copied().sum::<F>() * inv_d;
                        let m2 = dot(&dh, hr) * inv_d;
                        let dxr = &mut dx[r * d..(r + 1) * d];
                        for j in 0..d {
                            dxr[j] += rstd[r] * (dh[j] - m1 - hr[j] * m2);
                        }
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => self.attention_backward(*q, *k, *v, *heads, probs, g, grads),
            Op::CrossEntropy {
                logits,
                targets,
                mask,
                probs,
                count,
            } => {
                let vocab = self.value(*logits).last_dim();
                let scale = g[0] / F::from_usize(*count);
                if let Some(dl) = self.buf(grads, *logits) {
                    for (i, (&t, &m)) in targets.iter().zip(mask).enumerate() {
                        if !m {
                            continue;
                        }
                        let row = &mut dl[i * vocab..(i + 1) * vocab];
                        axpy(scale, &probs[i * vocab..(i + 1) * vocab], row);
                        row[t] -= scale;
                    }
                }
            }
            Op::Conv { x, w, b, geom, cols } => {
                let c_out = self.value(*w).shape()[0];
                let p = geom.positions();
                let patch = geom.patch();
                if let Some(dw) = self.buf(grads, *w) {
                    mm_acc(g, cols, dw, c_out, p, patch);
                }
                if let Some(b) = b {
                    if let Some(db) = self.buf(grads, *b) {
                        for (d, row) in db.iter_mut().zip(g.chunks(p)) {
                            *d += row.iter().copied().sum::<F>();
                        }
                    }
                }
                let wd = self.value(*w).data();
                if let Some(dx) = self.buf(grads, *x) {
                    let mut dcols = vec![F::ZERO; p * patch];
                    mm_tn_acc(g, wd, &mut dcols, c_out, p, patch);
                    geom.col2im_acc(&dcols, dx);
                }
            }
            Op::Reshape(x) => {
                if let Some(dx) = self.buf(grads, *x) {
                    add_into(dx, g);
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    if let Some(dp) = self.buf(grads, p) {
                        add_into(dp, &g[off..off + n]);
                    }
                    off += n;
                }
            }
            Op::SliceRows { x, start } => {
                let c = self.value(*x).last_dim();
                if let Some(dx) = self.buf(grads, *x) {
                    add_into(&mut dx[start * c..start * c + g.len()], g);
                }
            }
            Op::MaxMiddle { x, argmax } => {
                let (b, c) = match self.shape(*x) {
                    &[_, b, c] => (b, c),
                    _ => unreachable!("checked in forward"),
                };
                if let Some(dx) = self.buf(grads, *x) {
                    for (idx, (&gv, &j)) in g.iter().zip(argmax).enumerate() {
                        let (i, k) = (idx / c, idx % c);
                        dx[(i * b + j) * c + k] += gv;
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let d = self.value(*table).last_dim();
                if let Some(dt) = self.buf(grads, *table) {
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut dt[id * d..(id + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                }
            }
            Op::MeanStack(parts) => {
                let inv = F::ONE / F::from_usize(parts.len());
                for &p in parts {
                    if let Some(dp) = self.buf(grads, p) {
                        axpy(inv, g, dp);
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(dx) = self.buf(grads, *x) {
                    dx.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Mix { outs, w } => {
                let (n, k) = self.value(*w).dims2().expect("2-D");
                let d = node.value.last_dim();
                let wd = self.value(*w).data();
                for (ki, &o) in outs.iter().enumerate() {
                    if let Some(dout) = self.buf(grads, o) {
                        for r in 0..n {
                            axpy(wd[r * k + ki], &g[r * d..(r + 1) * d], &mut dout[r * d..(r + 1) * d]);
                        }
                    }
                }
                if self.rg(*w) {
                    let vals: Vec<&[F]> = outs.iter().map(|&o| self.value(o).data()).collect();
                    let dw = self.buf(grads, *w).expect("requires grad");
                    for r in 0..n {
                        for (ki, od) in vals.iter().enumerate() {
                            dw[r * k + ki] += dot(&g[r * d..(r + 1) * d], &od[r * d..(r + 1) * d]);
                        }
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: &[F],
        g: &[F],
        grads: &mut [Option<Vec<F>>],
    ) {
        let (lq, d) = self.value(q).dims2().expect("2-D");
        let lk = self.value(k).shape()[0];
        let dh = d / heads;
        let scale = F::ONE / F::from_usize(dh).sqrt();
        let (need_q, need_k, need_v) = (self.rg(q), self.rg(k), self.rg(v));
        let mut dq = vec![F::ZERO; if need_q { lq * d } else { 0 }];
        let mut dk = vec![F::ZERO; if need_k { lk * d } else { 0 }];
        let mut dv = vec![F::ZERO; if need_v { lk * d } else { 0 }];
        let mut qh = vec![F::ZERO; lq * dh];
        let mut kh = vec![F::ZERO; lk * dh];
        let mut vh = vec![F::ZERO; lk * dh];
        let mut gh = vec![F::ZERO; lq * dh];
        let mut tmp_k = vec![F::ZERO; lk * dh];
        let mut tmp_q = vec![F::ZERO; lq * dh];
        let mut ds = vec![F::ZERO; lq * lk];
        for h in 0..heads {
            let p = &probs[h * lq * lk..(h + 1) * lq * lk];
            gather_head(g, d, h * dh, dh, &mut gh);
            if need_v {
                tmp_k.iter_mut().for_each(|t| *t = F::ZERO);
                mm_tn_acc(p, &gh, &mut tmp_k, lq, lk, dh);
                scatter_head_acc(&tmp_k, d, h * dh, dh, &mut dv);
            }
            if !(need_q || need_k) {
                continue;
            }
            gather_head(self.value(v).data(), d, h * dh, dh, &mut vh);
            // dP = dO · Vᵀ, then dS = P ⊙ (dP − rowsum(dP ⊙ P)).
            ds.iter_mut().for_each(|t| *t = F::ZERO);
            mm_nt_acc(&gh, &vh, &mut ds, lq, dh, lk);
            for i in 0..lq {
                let pr = &p[i * lk..(i + 1) * lk];
                let dr = &mut ds[i * lk..(i + 1) * lk];
                let s = dot(dr, pr);
                for (dv_, &pv) in dr.iter_mut().zip(pr) {
                    *dv_ = pv * (*dv_ - s) * scale;
                }
            }
            if need_q {
                gather_head(self.value(k).data(), d, h * dh, dh, &mut kh);
                tmp_q.iter_mut().for_each(|t| *t = F::ZERO);
                mm_acc(&ds, &kh, &mut tmp_q, lq, lk, dh);
                scatter_head_acc(&tmp_q, d, h * dh, dh, &mut dq);
            }
            if need_k {
                gather_head(self.value(q).data(), d, h * dh, dh, &mut qh);
                tmp_k.iter_mut().for_each(|t| *t = F::ZERO);
                mm_tn_acc(&ds, &qh, &mut tmp_k, lq, lk, dh);
                scatter_head_acc(&tmp_k, d, h * dh, dh, &mut dk);
            }
        }
        if let Some(b) = self.buf(grads, q) {
            add_into(b, &dq);
        }
        if let Some(b) = self.buf(grads, k) {
            add_into(b, &dk);
        }
        if let Some(b) = self.buf(grads, v) {
            add_into(b, &dv);
        }
    }
}

fn gather_head<F: Scalar>(src: &[F], d: usize, off: usize, dh: usize, dst: &mut [F]) {
    for (row, out) in src.chunks(d).zip(dst.chunks_mut(dh)) {
        out.copy_from_slice(&row[off..off + dh]);
    }
}

fn scatter_head<F: Scalar>(src: &[F], d: usize, off: usize, dh: usize, dst: &mut [F]) {
    for (row, out) in src.chunks(dh).zip(dst.chunks_mut(d)) {
        out[off..off + dh].copy_from_slice(row);
    }
}

fn scatter_head_acc<F: Scalar>(src: &[F], d: usize, off: usize, dh: usize, dst: &mut [F]) {
    for (row, out) in src.chunks(dh).zip(dst.chunks_mut(d)) {
        add_into(&mut out[off..off + dh], row);
    }
}
