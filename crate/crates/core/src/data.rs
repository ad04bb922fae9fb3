//! Synthetic paired multimodal data.
//!
//! A [`SceneSpec`] (shape, color, size, count and a jitter seed) is the
//! ground truth; every modality is rendered from it deterministically and
//! the caption and QA pairs are derived from it, so all eight modalities
//! share the same gold text.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::tokenizers::RawSignal;
use crate::{Error, ModalityId, Result, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ShapeKind {
    Square,
    Circle,
    Triangle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Color {
    Red,
    Green,
    Blue,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum SizeKind {
    Small,
    Large,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Square, ShapeKind::Circle, ShapeKind::Triangle];
    pub fn word(self) -> &'static str {
        match self {
            ShapeKind::Square => "square",
            ShapeKind::Circle => "circle",
            ShapeKind::Triangle => "triangle",
        }
    }
}

impl Color {
    pub const ALL: [Color; 3] = [Color::Red, Color::Green, Color::Blue];
    pub fn word(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
        }
    }
    fn rgb(self) -> [f64; 3] {
        match self {
            Color::Red => [1.0, 0.0, 0.0],
            Color::Green => [0.0, 1.0, 0.0],
            Color::Blue => [0.0, 0.0, 1.0],
        }
    }
}

impl SizeKind {
    pub const ALL: [SizeKind; 2] = [SizeKind::Small, SizeKind::Large];
    pub fn word(self) -> &'static str {
        match self {
            SizeKind::Small => "small",
            SizeKind::Large => "large",
        }
    }
}

const COUNT_WORDS: [&str; 3] = ["one", "two", "three"];

/// Number of distinct (shape, color, size, count) combinations.
pub const SCENE_GRID: usize = 54;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SceneSpec {
    pub shape: ShapeKind,
    pub color: Color,
    pub size: SizeKind,
    /// 1, 2 or 3.
    pub count: u8,
    /// Drives the per-scene jitter of every rendering.
    pub seed: u64,
}

impl SceneSpec {
    /// Position of the (shape, color, size, count) tuple in the 54-grid.
    pub fn grid_index(&self) -> usize {
        ((self.shape as usize * 3 + self.color as usize) * 2 + self.size as usize) * 3 + (self.count as usize - 1)
    }

    pub fn from_grid_index(index: usize, seed: u64) -> Self {
        let count = (index % 3) as u8 + 1;
        let size = SizeKind::ALL[(index / 3) % 2];
        let color = Color::ALL[(index / 6) % 3];
        let shape = ShapeKind::ALL[(index / 18) % 3];
        Self {
            shape,
            color,
            size,
            count,
            seed,
        }
    }
}

const SCENE_SALT: u64 = 0x5ce4_e5eed_u64;

/// Uniform draw over the 54-element grid, deterministic in `seed`.
pub fn generate_scene(seed: u64) -> SceneSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ SCENE_SALT);
    SceneSpec::from_grid_index(rng.random_range(0..SCENE_GRID), seed)
}

pub fn caption_for_scene(spec: &SceneSpec) -> String {
    let (size, color, shape) = (spec.size.word(), spec.color.word(), spec.shape.word());
    match spec.count {
        1 => format!("a {size} {color} {shape}"),
        n => format!("{} {size} {color} {shape}s", COUNT_WORDS[n as usize - 1]),
    }
}

/// Inverse of [`caption_for_scene`] up to the seed (returned as 0).
pub fn parse_caption(text: &str) -> Option<SceneSpec> {
    let words: Vec<&str> = text.split(' ').collect();
    let [count, size, color, shape] = words[..] else {
        return None;
    };
    let count = match count {
        "a" => 1,
        "two" => 2,
        "three" => 3,
        _ => return None,
    };
    let shape = if count == 1 { shape } else { shape.strip_suffix('s')? };
    Some(SceneSpec {
        shape: *ShapeKind::ALL.iter().find(|s| s.word() == shape)?,
        color: *Color::ALL.iter().find(|c| c.word() == color)?,
        size: *SizeKind::ALL.iter().find(|s| s.word() == size)?,
        count,
        seed: 0,
    })
}

/// Questions with one-word answers.
pub fn qa_for_scene(spec: &SceneSpec) -> Vec<(String, String)> {
    vec![
        ("What color is the shape?".to_string(), spec.color.word().to_string()),
        ("What shape is it?".to_string(), spec.shape.word().to_string()),
        ("What size is the shape?".to_string(), spec.size.word().to_string()),
        (
            "How many shapes are there?".to_string(),
            COUNT_WORDS[spec.count as usize - 1].to_string(),
        ),
    ]
}

/// Every word that can appear as a QA answer.
pub fn answer_vocabulary() -> Vec<&'static str> {
    let mut v: Vec<&'static str> = Vec::new();
    v.extend(Color::ALL.iter().map(|c| c.word()));
    v.extend(ShapeKind::ALL.iter().map(|s| s.word()));
    v.extend(SizeKind::ALL.iter().map(|s| s.word()));
    v.extend(COUNT_WORDS);
    v
}

/// Option letters used by multiple-choice questions.
pub const OPTION_LETTERS: [&str; 4] = ["A", "B", "C", "D"];

/// A four-way multiple-choice version of `question`: the gold answer and
/// three distractors from the answer vocabulary, shuffled by `seed`.
/// Returns the options text and the gold letter.
pub fn option_question(answer: &str, seed: u64) -> (String, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0b7_1045);
    let mut pool: Vec<&str> = answer_vocabulary().into_iter().filter(|w| *w != answer).collect();
    let mut options = vec![answer];
    for _ in 0..3 {
        let i = rng.random_range(0..pool.len());
        options.push(pool.swap_remove(i));
    }
    for i in (1..options.len()).rev() {
        let j = rng.random_range(0..=i);
        options.swap(i, j);
    }
    let gold = options.iter().position(|o| *o == answer).expect("gold present");
    let text = options
        .iter()
        .zip(OPTION_LETTERS)
        .map(|(o, l)| format!("({l}) {o}"))
        .collect::<Vec<_>>()
        .join(" ");
    (text, OPTION_LETTERS[gold].to_string())
}

/// Signal extents of every rendered modality.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RenderConfig {
    /// Side of the square image, depth, normal and video frames.
    pub image_size: usize,
    pub audio_bins: usize,
    pub audio_frames: usize,
    pub point_count: usize,
    pub imu_len: usize,
    pub fmri_dim: usize,
}

impl RenderConfig {
    pub fn desk() -> Self {
        Self {
            image_size: 28,
            audio_bins: 32,
            audio_frames: 64,
            point_count: 128,
            imu_len: 64,
            fmri_dim: 64,
        }
    }

    /// Payload shape of `modality` (video with its maximum frame count).
    pub fn payload_shape(&self, modality: ModalityId) -> Vec<usize> {
        let s = self.image_size;
        match modality {
            ModalityId::Image | ModalityId::Depth | ModalityId::Normal => vec![3, s, s],
            ModalityId::Video => vec![MAX_VIDEO_FRAMES, 3, s, s],
            ModalityId::Audio => vec![1, self.audio_bins, self.audio_frames],
            ModalityId::Point => vec![self.point_count, 6],
            ModalityId::Imu => vec![6, self.imu_len],
            ModalityId::Fmri => vec![self.fmri_dim],
        }
    }
}

pub const MAX_VIDEO_FRAMES: usize = 4;
const FMRI_PROJECTION_SEED: u64 = 0xf3a1_2024;

/// Renders scenes into every modality.
#[derive(Debug, Clone)]
pub struct Renderer {
    pub config: RenderConfig,
    /// Fixed `[fmri_dim × 3·S·S]` projection shared by all scenes.
    fmri_projection: Vec<f64>,
}

#[derive(Debug, Clone, Copy)]
struct Instance {
    cx: f64,
    cy: f64,
    r: f64,
}

impl Renderer {
    pub fn new(config: RenderConfig) -> Result<Self> {
        if config.image_size < 8 || config.audio_bins < 8 || config.audio_frames < 8 || config.point_count < 3 * 3 {
            return Err(Error::Config("render extents too small".into()));
        }
        let pixels = 3 * config.image_size * config.image_size;
        let mut rng = ChaCha8Rng::seed_from_u64(FMRI_PROJECTION_SEED);
        let std = 1.0 / libm::sqrt(pixels as f64);
        let fmri_projection = (0..config.fmri_dim * pixels)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * std
            })
            .collect();
        Ok(Self {
            config,
            fmri_projection,
        })
    }

    fn jitter(spec: &SceneSpec) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(spec.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ 0x7e7d)
    }

    fn instances(&self, spec: &SceneSpec, shift: f64) -> Vec<Instance> {
        let s = self.config.image_size as f64;
        let unit = s / 28.0;
        let mut rng = Self::jitter(spec);
        let jx = rng.random_range(-1i32..=1) as f64 * unit;
        let jy = rng.random_range(-1i32..=1) as f64 * unit;
        let r = match spec.size {
            SizeKind::Small => 0.1 * s,
            SizeKind::Large => 0.18 * s,
        };
        let slots: &[(f64, f64)] = match spec.count {
            1 => &[(0.5, 0.5)],
            2 => &[(0.25, 0.5), (0.75, 0.5)],
            _ => &[(0.25, 0.3), (0.75, 0.3), (0.5, 0.72)],
        };
        slots
            .iter()
            .map(|&(fx, fy)| Instance {
                cx: fx * s + jx + shift * unit,
                cy: fy * s + jy,
                r,
            })
            .collect()
    }

    /// Height (0..=1, relative to r) and surface normal of `shape` at an
    /// offset from its center, `None` outside the footprint.
    fn surface(shape: ShapeKind, dx: f64, dy: f64, r: f64) -> Option<(f64, [f64; 3])> {
        match shape {
            ShapeKind::Square => {
                if dx.abs() > r || dy.abs() > r {
                    return None;
                }
                let m = dx.abs().max(dy.abs());
                let n = if dx.abs() >= dy.abs() {
                    [dx.signum() * 0.6, 0.0, 0.8]
                } else {
                    [0.0, dy.signum() * 0.6, 0.8]
                };
                Some((1.0 - m / r, n))
            }
            ShapeKind::Circle => {
                let d2 = dx * dx + dy * dy;
                if d2 > r * r {
                    return None;
                }
                let h = libm::sqrt(1.0 - d2 / (r * r));
                Some((h, [dx / r, dy / r, h]))
            }
            ShapeKind::Triangle => {
                if dy < -r || dy > r || dx.abs() > (dy + r) / 2.0 {
                    return None;
                }
                Some((0.5 + 0.5 * dy / r, [0.0, 0.6, 0.8]))
            }
        }
    }

    /// `[3×S×S]` planes of one visual rendering.
    fn raster(&self, spec: &SceneSpec, modality: ModalityId, shift: f64) -> Vec<f64> {
        let s = self.config.image_size;
        let plane = s * s;
        let mut out = vec![0.0; 3 * plane];
        let bg: [f64; 3] = match modality {
            ModalityId::Depth => [1.0, 1.0, 1.0],
            ModalityId::Normal => [0.5, 0.5, 1.0],
            _ => [1.0, 1.0, 1.0],
        };
        for c in 0..3 {
            out[c * plane..(c + 1) * plane].iter_mut().for_each(|v| *v = bg[c]);
        }
        let rgb = spec.color.rgb();
        for inst in self.instances(spec, shift) {
            for y in 0..s {
                for x in 0..s {
                    let dx = x as f64 + 0.5 - inst.cx;
                    let dy = y as f64 + 0.5 - inst.cy;
                    let Some((h, n)) = Self::surface(spec.shape, dx, dy, inst.r) else {
                        continue;
                    };
                    let px: [f64; 3] = match modality {
                        ModalityId::Depth => {
                            let d = 1.0 - 0.5 * h;
                            [d, d, d]
                        }
                        ModalityId::Normal => {
                            let len = libm::sqrt(n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).max(1e-9);
                            [
                                (n[0] / len + 1.0) / 2.0,
                                (n[1] / len + 1.0) / 2.0,
                                (n[2] / len + 1.0) / 2.0,
                            ]
                        }
                        _ => rgb,
                    };
                    for c in 0..3 {
                        out[c * plane + y * s + x] = px[c];
                    }
                }
            }
        }
        out
    }

    pub fn video_frames(spec: &SceneSpec) -> usize {
        2 + (spec.seed % 3) as usize
    }

    pub fn render<F: Scalar>(&self, spec: &SceneSpec, modality: ModalityId) -> RawSignal<F> {
        let cfg = &self.config;
        let s = cfg.image_size;
        let (shape, data): (Vec<usize>, Vec<f64>) = match modality {
            ModalityId::Image | ModalityId::Depth | ModalityId::Normal => {
                (vec![3, s, s], self.raster(spec, modality, 0.0))
            }
            ModalityId::Video => {
                let t = Self::video_frames(spec);
                let data = (0..t)
                    .flat_map(|f| self.raster(spec, ModalityId::Image, f as f64))
                    .collect();
                (vec![t, 3, s, s], data)
            }
            ModalityId::Audio => (vec![1, cfg.audio_bins, cfg.audio_frames], self.audio(spec)),
            ModalityId::Point => (vec![cfg.point_count, 6], self.points(spec)),
            ModalityId::Imu => (vec![6, cfg.imu_len], self.imu(spec)),
            ModalityId::Fmri => (vec![cfg.fmri_dim], self.fmri(spec)),
        };
        let payload = Tensor::from_f64(&shape, &data).expect("renderer produces matching shapes");
        RawSignal::new(modality, payload)
    }

    /// Frequency band per shape, band width per size, amplitude per color
    /// and one pulse per counted object.
    fn audio(&self, spec: &SceneSpec) -> Vec<f64> {
        let (bins, frames) = (self.config.audio_bins, self.config.audio_frames);
        let mut out = vec![0.0; bins * frames];
        let mut rng = Self::jitter(spec);
        let offset = rng.random_range(0..4usize);
        let center = bins as f64 * (spec.shape as usize + 1) as f64 / 4.0;
        let half = match spec.size {
            SizeKind::Small => bins as f64 / 32.0,
            SizeKind::Large => 3.0 * bins as f64 / 32.0,
        };
        let amp = (spec.color as usize + 1) as f64 / 3.0;
        let n = spec.count as usize;
        let seg = frames / 3;
        let width = seg / 2;
        for p in 0..n {
            let start = p * seg + offset;
            for t in start..(start + width).min(frames) {
                for f in 0..bins {
                    let d = (f as f64 + 0.5 - center).abs();
                    if d <= half + 0.5 {
                        out[f * frames + t] = amp;
                    }
                }
            }
        }
        out
    }

    /// Outline points of every instance, xyz in [-1, 1] and rgb = color.
    fn points(&self, spec: &SceneSpec) -> Vec<f64> {
        let total = self.config.point_count;
        let s = self.config.image_size as f64;
        let insts = self.instances(spec, 0.0);
        let mut rng = Self::jitter(spec);
        let phase: f64 = rng.random::<f64>();
        let rgb = spec.color.rgb();
        let per = total / insts.len();
        let mut out = Vec::with_capacity(total * 6);
        for (k, inst) in insts.iter().enumerate() {
            let n = if k == 0 { total - per * (insts.len() - 1) } else { per };
            for i in 0..n {
                let t = (i as f64 + phase) / n as f64;
                let (ox, oy) = outline(spec.shape, t, inst.r);
                let x = (inst.cx + ox) / (s / 2.0) - 1.0;
                let y = (inst.cy + oy) / (s / 2.0) - 1.0;
                let z = 0.1 * libm::sin(2.0 * PI * t) * inst.r / s;
                out.extend_from_slice(&[x, y, z, rgb[0], rgb[1], rgb[2]]);
            }
        }
        out
    }

    /// Six channels of sinusoids: frequency from shape, phase from count,
    /// amplitude from color (channels 0-2) and size (channels 3-5).
    fn imu(&self, spec: &SceneSpec) -> Vec<f64> {
        let l = self.config.imu_len;
        let mut rng = Self::jitter(spec);
        let jitter = 0.2 * rng.random::<f64>();
        let cycles = 2.0 * (spec.shape as usize + 1) as f64;
        let phase = (spec.count as f64 - 1.0) * 2.0 * PI / 3.0 + jitter;
        let amp = (spec.color as usize + 1) as f64 / 3.0;
        let size_amp = match spec.size {
            SizeKind::Small => 0.5,
            SizeKind::Large => 1.0,
        };
        let mut out = vec![0.0; 6 * l];
        for ch in 0..6 {
            let off = (ch % 3) as f64 * PI / 3.0;
            for t in 0..l {
                let arg = 2.0 * PI * cycles * t as f64 / l as f64 + phase + off;
                out[ch * l + t] = if ch < 3 {
                    amp * libm::sin(arg)
                } else {
                    size_amp * libm::cos(arg)
                };
            }
        }
        out
    }

    /// Fixed random linear view of the centred image pixels.
    fn fmri(&self, spec: &SceneSpec) -> Vec<f64> {
        let pixels = self.raster(spec, ModalityId::Image, 0.0);
        let n = pixels.len();
        (0..self.config.fmri_dim)
            .map(|i| {
                let row = &self.fmri_projection[i * n..(i + 1) * n];
                row.iter().zip(&pixels).map(|(w, p)| w * (p - 0.5)).sum::<f64>() * 4.0
            })
            .collect()
    }
}

/// Point on the outline at perimeter fraction `t`, relative to the center.
fn outline(shape: ShapeKind, t: f64, r: f64) -> (f64, f64) {
    match shape {
        ShapeKind::Circle => (r * libm::cos(2.0 * PI * t), r * libm::sin(2.0 * PI * t)),
        ShapeKind::Square => {
            let u = t * 4.0;
            let side = (u as usize).min(3);
            let f = 2.0 * (u - side as f64) - 1.0;
            match side {
                0 => (f * r, -r),
                1 => (r, f * r),
                2 => (-f * r, r),
                _ => (-r, -f * r),
            }
        }
        ShapeKind::Triangle => {
            let verts = [(0.0, -r), (r, r), (-r, r)];
            let u = t * 3.0;
            let side = (u as usize).min(2);
            let f = u - side as f64;
            let (a, b) = (verts[side], verts[(side + 1) % 3]);
            (a.0 + f * (b.0 - a.0), a.1 + f * (b.1 - a.1))
        }
    }
}

/// One scene rendered into one modality with its gold texts.
#[derive(Debug, Clone, PartialEq)]
pub struct Example<F> {
    pub scene: SceneSpec,
    pub signal: RawSignal<F>,
    pub caption: String,
    pub qa: Vec<(String, String)>,
}

/// Examples for scene seeds `first_seed..first_seed + size`.
pub fn build_examples<F: Scalar>(
    renderer: &Renderer,
    modality: ModalityId,
    first_seed: u64,
    size: usize,
) -> Vec<Example<F>> {
    (0..size as u64)
        .map(|i| {
            let scene = generate_scene(first_seed + i);
            Example {
                signal: renderer.render(&scene, modality),
                caption: caption_for_scene(&scene),
                qa: qa_for_scene(&scene),
                scene,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn caption_grammar() {
        let s = SceneSpec {
            shape: ShapeKind::Circle,
            color: Color::Red,
            size: SizeKind::Large,
            count: 1,
            seed: 0,
        };
        assert_eq!(caption_for_scene(&s), "a large red circle");
        let two = SceneSpec { count: 2, ..s };
        assert_eq!(caption_for_scene(&two), "two large red circles");
        assert_eq!(parse_caption("two large red circles"), Some(two));
    }

    #[test]
    fn answer_vocabulary_is_closed() {
        let v = answer_vocabulary();
        assert_eq!(v.len(), 11);
        for i in 0..SCENE_GRID {
            let s = SceneSpec::from_grid_index(i, 0);
            assert_eq!(s.grid_index(), i);
            for (_, a) in qa_for_scene(&s) {
                assert!(v.contains(&a.as_str()));
                assert!(!a.contains(' '));
            }
        }
    }

    #[test]
    fn option_question_contains_gold_once() {
        for seed in 0..50 {
            let (text, letter) = option_question("red", seed);
            assert_eq!(text.matches("red").count(), 1);
            assert!(text.contains(&format!("({letter}) red")));
        }
    }
}
