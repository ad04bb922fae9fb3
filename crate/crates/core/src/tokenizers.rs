//! Lightweight per-modality tokenizers: one convolution each, turning a
//! raw signal into `[L×D]` tokens for the shared encoder.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::init::Initializer;
use crate::{Error, Graph, ModalityId, ParamId, ParamStore, Result, Scalar, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenizerConfig {
    /// Token width D shared by every tokenizer and the encoder.
    pub width: usize,
    /// Square patch size of the visual tokenizer (kernel = stride).
    pub patch: usize,
    pub audio_kernel: (usize, usize),
    pub audio_stride: (usize, usize),
    /// Points kept by furthest point sampling.
    pub point_samples: usize,
    /// Number of KNN groups, i.e. point tokens.
    pub point_groups: usize,
    pub point_group_size: usize,
    pub imu_kernel: usize,
    /// Length of the fMRI voxel vector.
    pub fmri_dim: usize,
    /// Tokens produced from one fMRI vector.
    pub fmri_tokens: usize,
}

impl TokenizerConfig {
    pub fn full_scale() -> Self {
        Self {
            width: 1024,
            patch: 14,
            audio_kernel: (16, 16),
            audio_stride: (10, 10),
            point_samples: 8192,
            point_groups: 512,
            point_group_size: 32,
            imu_kernel: 10,
            fmri_dim: 15724,
            fmri_tokens: 8,
        }
    }

    pub fn desk() -> Self {
        Self {
            width: 64,
            patch: 7,
            audio_kernel: (16, 16),
            audio_stride: (10, 10),
            point_samples: 64,
            point_groups: 8,
            point_group_size: 8,
            imu_kernel: 10,
            fmri_dim: 64,
            fmri_tokens: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let c = self;
        if c.width == 0 || c.patch == 0 || c.imu_kernel == 0 || c.fmri_dim == 0 || c.fmri_tokens == 0 {
            return Err(Error::Config("tokenizer extents must be positive".into()));
        }
        if c.point_groups > c.point_samples || c.point_group_size > c.point_samples || c.point_group_size == 0 {
            return Err(Error::Config(format!(
                "point tokenizer needs groups ({}) and group size ({}) within the {} samples",
                c.point_groups, c.point_group_size, c.point_samples
            )));
        }
        Ok(())
    }

    /// Number of tokens one signal of `shape` produces, from the
    /// convolution output-size formula alone (no weights involved).
    pub fn token_count(&self, modality: ModalityId, shape: &[usize]) -> Result<usize> {
        validate_layout(self, modality, shape)?;
        Ok(match modality {
            ModalityId::Image | ModalityId::Depth | ModalityId::Normal => {
                (shape[1] / self.patch) * (shape[2] / self.patch)
            }
            ModalityId::Video => (shape[2] / self.patch) * (shape[3] / self.patch),
            ModalityId::Audio => {
                let (kh, kw) = self.audio_kernel;
                let (sh, sw) = self.audio_stride;
                ((shape[1] - kh) / sh + 1) * ((shape[2] - kw) / sw + 1)
            }
            ModalityId::Point => self.point_groups,
            ModalityId::Imu => shape[1] - self.imu_kernel + 1,
            ModalityId::Fmri => self.fmri_tokens,
        })
    }
}

/// A raw per-modality signal.
///
/// Payload layouts: image/depth/normal `3×H×W`, video `T×3×H×W`, audio
/// spectrogram `1×F×W`, point cloud `P×6` (xyz + rgb), IMU `6×L`, fMRI a
/// vector of the configured dimensionality.
#[derive(Debug, Clone, PartialEq)]
pub struct RawSignal<F> {
    pub modality: ModalityId,
    pub payload: Tensor<F>,
}

impl<F: Scalar> RawSignal<F> {
    pub fn new(modality: ModalityId, payload: Tensor<F>) -> Self {
        Self { modality, payload }
    }

    pub fn cast<G: Scalar>(&self) -> RawSignal<G> {
        RawSignal {
            modality: self.modality,
            payload: self.payload.cast(),
        }
    }
}

/// Token sequence of one modality (one frame, for video).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TokenSequence {
    pub modality: ModalityId,
    /// `[L×D]` node of the graph.
    pub tokens: Var,
}

fn validate_layout(cfg: &TokenizerConfig, m: ModalityId, shape: &[usize]) -> Result<()> {
    let bad = |what: &str| Err(Error::dim("tokenize", format!("{m} payload {shape:?}: {what}")));
    match m {
        ModalityId::Image | ModalityId::Depth | ModalityId::Normal | ModalityId::Video => {
            let s = if m == ModalityId::Video {
                match shape {
                    [t, rest @ ..] if rest.len() == 3 => {
                        if *t == 0 {
                            return Err(Error::EmptyInput("video frames"));
                        }
                        rest
                    }
                    _ => return bad("expected T×3×H×W"),
                }
            } else {
                shape
            };
            match s {
                [3, h, w] => {
                    if h % cfg.patch != 0 || w % cfg.patch != 0 {
                        return Err(Error::Config(format!(
                            "{m} extent {h}×{w} is not divisible by patch {}",
                            cfg.patch
                        )));
                    }
                    Ok(())
                }
                _ => bad("expected 3×H×W"),
            }
        }
        ModalityId::Audio => match shape {
            [1, h, w] if *h >= cfg.audio_kernel.0 && *w >= cfg.audio_kernel.1 => Ok(()),
            [1, _, _] => bad("spectrogram smaller than the audio kernel"),
            _ => bad("expected 1×F×W"),
        },
        ModalityId::Point => match shape {
            [p, 6] if *p >= cfg.point_samples => Ok(()),
            [_, 6] => bad("fewer points than the sample count"),
            _ => bad("expected P×6"),
        },
        ModalityId::Imu => match shape {
            [6, l] if *l >= cfg.imu_kernel => Ok(()),
            [6, _] => bad("sequence shorter than the IMU kernel"),
            _ => bad("expected 6×L"),
        },
        ModalityId::Fmri => match shape {
            [n] | [n, 1] if *n == cfg.fmri_dim => Ok(()),
            _ => bad("length differs from the configured fMRI dimensionality"),
        },
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct ConvParams {
    weight: ParamId,
    bias: ParamId,
}

/// Weights of all tokenizers. Video reuses the image tokenizer.
#[derive(Debug, Clone, PartialEq)]
pub struct Tokenizers {
    pub config: TokenizerConfig,
    image: ConvParams,
    depth: ConvParams,
    normal: ConvParams,
    audio: ConvParams,
    point: ConvParams,
    imu: ConvParams,
    fmri: ConvParams,
}

impl Tokenizers {
    pub fn new<F: Scalar>(config: TokenizerConfig, store: &mut ParamStore<F>, init: &mut Initializer) -> Result<Self> {
        config.validate()?;
        let d = config.width;
        let p = config.patch;
        let mut conv = |name: &str, shape: &[usize]| -> Result<ConvParams> {
            let fan_in: usize = shape[1..].iter().product();
            let weight = init.tensor(store, &format!("tokenizer.{name}.weight"), shape, 1.0 / libm::sqrt(fan_in as f64), true)?;
            let bias = init.zeros(store, &format!("tokenizer.{name}.bias"), &[shape[0]])?;
            Ok(ConvParams { weight, bias })
        };
        let (akh, akw) = config.audio_kernel;
        Ok(Self {
            config,
            image: conv("image", &[d, 3, p, p])?,
            depth: conv("depth", &[d, 3, p, p])?,
            normal: conv("normal", &[d, 3, p, p])?,
            audio: conv("audio", &[d, 1, akh, akw])?,
            point: conv("point", &[d, 6, 1, 1])?,
            imu: conv("imu", &[d, 6, config.imu_kernel])?,
            fmri: conv("fmri", &[config.fmri_tokens * d, config.fmri_dim, 1])?,
        })
    }

    /// Name prefix of the parameters owned by `modality`'s tokenizer.
    pub fn param_prefix(modality: ModalityId) -> &'static str {
        match modality {
            ModalityId::Image | ModalityId::Video => "tokenizer.image.",
            ModalityId::Depth => "tokenizer.depth.",
            ModalityId::Normal => "tokenizer.normal.",
            ModalityId::Audio => "tokenizer.audio.",
            ModalityId::Point => "tokenizer.point.",
            ModalityId::Imu => "tokenizer.imu.",
            ModalityId::Fmri => "tokenizer.fmri.",
        }
    }

    /// Tokenizes a signal into one sequence per frame (exactly one for
    /// every modality but video).
    pub fn tokenize<F: Scalar>(&self, g: &mut Graph<'_, F>, signal: &RawSignal<F>) -> Result<Vec<TokenSequence>> {
        validate_layout(&self.config, signal.modality, signal.payload.shape())?;
        match signal.modality {
            ModalityId::Video => self.tokenize_video(g, &signal.payload),
            ModalityId::Image => Ok(vec![self.visual(g, self.image, ModalityId::Image, &signal.payload)?]),
            ModalityId::Depth => Ok(vec![self.visual(g, self.depth, ModalityId::Depth, &signal.payload)?]),
            ModalityId::Normal => Ok(vec![self.visual(g, self.normal, ModalityId::Normal, &signal.payload)?]),
            ModalityId::Audio => Ok(vec![self.tokenize_audio(g, &signal.payload)?]),
            ModalityId::Point => Ok(vec![self.tokenize_point(g, &signal.payload)?]),
            ModalityId::Imu => Ok(vec![self.tokenize_imu(g, &signal.payload)?]),
            ModalityId::Fmri => Ok(vec![self.tokenize_fmri(g, &signal.payload)?]),
        }
    }

    /// `[C_out × positions]` conv output to `[positions × C_out]` tokens.
    fn to_tokens<F: Scalar>(g: &mut Graph<'_, F>, conv_out: Var) -> Result<Var> {
        let shape = g.shape(conv_out).to_vec();
        let c = shape[0];
        let l: usize = shape[1..].iter().product();
        let flat = g.reshape(conv_out, &[c, l])?;
        g.transpose(flat)
    }

    fn visual<F: Scalar>(&self, g: &mut Graph<'_, F>, p: ConvParams, m: ModalityId, frame: &Tensor<F>) -> Result<TokenSequence> {
        let x = g.input(frame.clone());
        let w = g.param(p.weight);
        let b = g.param(p.bias);
        let patch = self.config.patch;
        let y = g.conv2d(x, w, Some(b), (patch, patch))?;
        Ok(TokenSequence {
            modality: m,
            tokens: Self::to_tokens(g, y)?,
        })
    }

    fn tokenize_video<F: Scalar>(&self, g: &mut Graph<'_, F>, video: &Tensor<F>) -> Result<Vec<TokenSequence>> {
        let shape = video.shape();
        let frame_shape = &shape[1..];
        let frame_len: usize = frame_shape.iter().product();
        video
            .data()
            .chunks(frame_len)
            .map(|frame| {
                let t = Tensor::new(frame_shape, frame.to_vec())?;
                let mut seq = self.visual(g, self.image, ModalityId::Video, &t)?;
                seq.modality = ModalityId::Video;
                Ok(seq)
            })
            .collect()
    }

    fn tokenize_audio<F: Scalar>(&self, g: &mut Graph<'_, F>, spec: &Tensor<F>) -> Result<TokenSequence> {
        let x = g.input(spec.clone());
        let w = g.param(self.audio.weight);
        let b = g.param(self.audio.bias);
        let y = g.conv2d(x, w, Some(b), self.config.audio_stride)?;
        Ok(TokenSequence {
            modality: ModalityId::Audio,
            tokens: Self::to_tokens(g, y)?,
        })
    }

    fn tokenize_point<F: Scalar>(&self, g: &mut Graph<'_, F>, cloud: &Tensor<F>) -> Result<TokenSequence> {
        let c = &self.config;
        let grouped = group_points(cloud, c.point_samples, c.point_groups, c.point_group_size)?;
        // [groups × size × 6] -> [6 × size × groups] so the 1×1 conv sees
        // channels first and the max runs over the within-group axis.
        let (ng, gs) = (c.point_groups, c.point_group_size);
        let src = grouped.data();
        let mut chw = vec![F::ZERO; 6 * gs * ng];
        for i in 0..ng {
            for j in 0..gs {
                for ch in 0..6 {
                    chw[(ch * gs + j) * ng + i] = src[(i * gs + j) * 6 + ch];
                }
            }
        }
        let x = g.input(Tensor::new(&[6, gs, ng], chw)?);
        let w = g.param(self.point.weight);
        let b = g.param(self.point.bias);
        let y = g.conv2d(x, w, Some(b), (1, 1))?; // [D × gs × ng]
        let pooled = g.max_middle(y)?; // [D × ng]
        Ok(TokenSequence {
            modality: ModalityId::Point,
            tokens: g.transpose(pooled)?,
        })
    }

    fn tokenize_imu<F: Scalar>(&self, g: &mut Graph<'_, F>, imu: &Tensor<F>) -> Result<TokenSequence> {
        let x = g.input(imu.clone());
        let w = g.param(self.imu.weight);
        let b = g.param(self.imu.bias);
        let y = g.conv1d(x, w, Some(b), 1)?;
        Ok(TokenSequence {
            modality: ModalityId::Imu,
            tokens: Self::to_tokens(g, y)?,
        })
    }

    fn tokenize_fmri<F: Scalar>(&self, g: &mut Graph<'_, F>, voxels: &Tensor<F>) -> Result<TokenSequence> {
        let c = &self.config;
        let x = g.input(voxels.clone().reshape(&[c.fmri_dim, 1])?);
        let w = g.param(self.fmri.weight);
        let b = g.param(self.fmri.bias);
        let y = g.conv1d(x, w, Some(b), 1)?; // [L_f·D × 1]
        // The flat output is read as D × L_f, one column per token.
        let grid = g.reshape(y, &[c.width, c.fmri_tokens])?;
        Ok(TokenSequence {
            modality: ModalityId::Fmri,
            tokens: g.transpose(grid)?,
        })
    }
}

fn lex_cmp<F: Scalar>(a: &[F], b: &[F]) -> Ordering {
    for (x, y) in a.iter().zip(b) {
        match x.to_f64().total_cmp(&y.to_f64()) {
            Ordering::Equal => continue,
            o => return o,
        }
    }
    Ordering::Equal
}

fn sq_dist<F: Scalar>(a: &[F], b: &[F]) -> f64 {
    a[..3]
        .iter()
        .zip(&b[..3])
        .map(|(&x, &y)| {
            let d = x.to_f64() - y.to_f64();
            d * d
        })
        .sum()
}

/// Greedy furthest point sampling over the xyz columns of `points`
/// (`P×k`, `k ≥ 3`). The first pick is `start`; each later pick maximises
/// the distance to the already selected set, ties to the lower index.
pub fn fps_sample<F: Scalar>(points: &Tensor<F>, n: usize, start: usize) -> Result<Vec<usize>> {
    let (p, k) = points.dims2()?;
    if k < 3 {
        return Err(Error::dim("fps_sample", format!("points need xyz columns, got {:?}", points.shape())));
    }
    if n == 0 || n > p || start >= p {
        return Err(Error::Argument(format!("cannot sample {n} of {p} points from start {start}")));
    }
    let mut selected = Vec::with_capacity(n);
    let mut min_d = vec![f64::INFINITY; p];
    let mut taken = vec![false; p];
    let mut cur = start;
    for _ in 0..n {
        selected.push(cur);
        taken[cur] = true;
        let c = points.row(cur);
        let mut best = 0usize;
        let mut best_d = -1.0;
        for i in 0..p {
            if taken[i] {
                continue;
            }
            let d = sq_dist(points.row(i), c);
            if d < min_d[i] {
                min_d[i] = d;
            }
            if min_d[i] > best_d {
                best_d = min_d[i];
                best = i;
            }
        }
        cur = best;
    }
    Ok(selected)
}

/// For each center, its `group_size` nearest points by xyz distance
/// (the center itself included), ties broken by the lower index.
/// Returns `[centers × group_size × k]`.
pub fn knn_group<F: Scalar>(points: &Tensor<F>, centers: &[usize], group_size: usize) -> Result<Tensor<F>> {
    let (p, k) = points.dims2()?;
    if group_size == 0 || group_size > p {
        return Err(Error::Argument(format!("group size {group_size} for {p} points")));
    }
    if centers.is_empty() {
        return Err(Error::EmptyInput("knn centers"));
    }
    let mut out = Vec::with_capacity(centers.len() * group_size * k);
    let mut order: Vec<(f64, usize)> = Vec::with_capacity(p);
    for &c in centers {
        if c >= p {
            return Err(Error::Argument(format!("center {c} outside {p} points")));
        }
        let cp = points.row(c);
        order.clear();
        order.extend((0..p).map(|i| (sq_dist(points.row(i), cp), i)));
        let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        if group_size < p {
            order.select_nth_unstable_by(group_size - 1, cmp);
        }
        order[..group_size].sort_by(cmp);
        for &(_, i) in &order[..group_size] {
            out.extend_from_slice(points.row(i));
        }
    }
    Tensor::new(&[centers.len(), group_size, k], out)
}

/// Sorts a `P×6` cloud lexicographically, samples `samples` points by FPS
/// from index 0, and gathers KNN groups around the first `groups` picks.
pub fn group_points<F: Scalar>(cloud: &Tensor<F>, samples: usize, groups: usize, group_size: usize) -> Result<Tensor<F>> {
    let (p, k) = cloud.dims2()?;
    if p < samples {
        return Err(Error::dim("tokenize_point", format!("{p} points, need at least {samples}")));
    }
    let mut idx: Vec<usize> = (0..p).collect();
    idx.sort_by(|&a, &b| lex_cmp(cloud.row(a), cloud.row(b)).then(a.cmp(&b)));
    let sorted: Vec<F> = idx.iter().flat_map(|&i| cloud.row(i).iter().copied()).collect();
    let sorted = Tensor::new(&[p, k], sorted)?;
    let picks = fps_sample(&sorted, samples, 0)?;
    let sampled: Vec<F> = picks.iter().flat_map(|&i| sorted.row(i).iter().copied()).collect();
    let sampled = Tensor::new(&[samples, k], sampled)?;
    // FPS picks are in selection order, so the first `groups` sampled rows
    // are the furthest-point centers.
    let centers: Vec<usize> = (0..groups).collect();
    knn_group(&sampled, &centers, group_size)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(xs: &[f64]) -> Tensor<f64> {
        let data: Vec<f64> = xs.iter().flat_map(|&x| [x, 0.0, 0.0, x, 1.0, 2.0]).collect();
        Tensor::new(&[xs.len(), 6], data).unwrap()
    }

    #[test]
    fn fps_on_a_line() {
        let pts = line(&[0.0, 1.0, 2.0, 10.0]);
        assert_eq!(fps_sample(&pts, 2, 0).unwrap(), vec![0, 3]);
        assert_eq!(fps_sample(&pts, 1, 0).unwrap(), vec![0]);
        let mut all = fps_sample(&pts, 4, 0).unwrap();
        all.sort();
        assert_eq!(all, vec![0, 1, 2, 3]);
        assert!(matches!(fps_sample(&pts, 5, 0), Err(Error::Argument(_))));
    }

    #[test]
    fn knn_on_a_line() {
        let pts = line(&[0.0, 1.0, 2.0, 10.0]);
        let g = knn_group(&pts, &[0, 3], 2).unwrap();
        assert_eq!(g.shape(), &[2, 2, 6]);
        let xs: Vec<f64> = g.data().chunks(6).map(|r| r[0]).collect();
        assert_eq!(xs, vec![0.0, 1.0, 10.0, 2.0]);
        let single = knn_group(&pts, &[0, 3], 1).unwrap();
        let xs: Vec<f64> = single.data().chunks(6).map(|r| r[0]).collect();
        assert_eq!(xs, vec![0.0, 10.0]);
    }

    #[test]
    fn knn_ties_prefer_lower_index() {
        // Points 1 and 2 are both at distance 1 from the center.
        let pts = line(&[5.0, 4.0, 6.0, 5.0]);
        let g = knn_group(&pts, &[0], 3).unwrap();
        let xs: Vec<f64> = g.data().chunks(6).map(|r| r[0]).collect();
        assert_eq!(xs, vec![5.0, 5.0, 4.0]);
    }

    #[test]
    fn token_count_formula() {
        let full = TokenizerConfig::full_scale();
        assert_eq!(full.token_count(ModalityId::Image, &[3, 224, 224]).unwrap(), 256);
        assert_eq!(full.token_count(ModalityId::Audio, &[1, 128, 1024]).unwrap(), 1212);
        assert_eq!(full.token_count(ModalityId::Imu, &[6, 2000]).unwrap(), 1991);
        assert_eq!(full.token_count(ModalityId::Point, &[9000, 6]).unwrap(), 512);
        assert_eq!(full.token_count(ModalityId::Fmri, &[15724]).unwrap(), 8);
        assert!(matches!(
            full.token_count(ModalityId::Image, &[3, 225, 224]),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            full.token_count(ModalityId::Imu, &[6, 9]),
            Err(Error::Dimension { .. })
        ));
    }
}
