//! OLMF dataset manifests: one modality, one split, payloads inline.
//!
//! Layout (little-endian): magic `OLMF`, version `u32`, modality tag,
//! split tag, item count; the item table (scene, gold texts, payload
//! shape, payload byte range and payload FNV-1a hash); the payload section
//! of raw `f32` values; the FNV-1a hash of everything before it.

use std::path::Path;

use onellm_core::data::{Color, Example, RenderConfig, SceneSpec, ShapeKind, SizeKind, MAX_VIDEO_FRAMES};
use onellm_core::tokenizers::RawSignal;
use onellm_core::{ModalityId, Tensor};
use serde::{Deserialize, Serialize};

use crate::binio::{fnv64, read_file, verify_trailer, write_atomic, Reader, Writer};
use crate::{Error, Result};

pub const MANIFEST_MAGIC: &[u8; 4] = b"OLMF";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Eval,
}

impl Split {
    fn tag(self) -> u8 {
        self as u8
    }

    fn from_tag(t: u8) -> Option<Self> {
        match t {
            0 => Some(Split::Train),
            1 => Some(Split::Eval),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub version: u32,
    pub modality: ModalityId,
    pub split: Split,
    pub items: Vec<Example<f32>>,
}

impl Manifest {
    pub fn new(modality: ModalityId, split: Split, items: Vec<Example<f32>>) -> Self {
        Self {
            version: MANIFEST_VERSION,
            modality,
            split,
            items,
        }
    }

    /// Checks every payload against the renderer's declared layout.
    pub fn validate_layout(&self, cfg: &RenderConfig) -> Result<()> {
        let expect = cfg.payload_shape(self.modality);
        for (i, ex) in self.items.iter().enumerate() {
            let shape = ex.signal.payload.shape();
            let ok = if self.modality == ModalityId::Video {
                shape.len() == 4 && (2..=MAX_VIDEO_FRAMES).contains(&shape[0]) && shape[1..] == expect[1..]
            } else {
                shape == &expect[..]
            };
            if ex.signal.modality != self.modality || !ok {
                return Err(Error::Config(format!(
                    "{} manifest item {i} has layout {shape:?}, expected {expect:?}",
                    self.modality
                )));
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        if self.items.is_empty() {
            return Err(Error::Config(format!("{} manifest has no items", self.modality)));
        }
        let mut w = Writer::default();
        w.bytes(MANIFEST_MAGIC);
        w.u32(self.version);
        w.u8(self.modality.index() as u8);
        w.u8(self.split.tag());
        w.u32(self.items.len() as u32);
        let mut payload = Writer::default();
        for ex in &self.items {
            let s = &ex.scene;
            w.bytes(&[s.shape as u8, s.color as u8, s.size as u8, s.count]);
            w.u64(s.seed);
            w.str(&ex.caption);
            w.u8(ex.qa.len() as u8);
            for (q, a) in &ex.qa {
                w.str(q);
                w.str(a);
            }
            let t = &ex.signal.payload;
            w.u8(t.ndim() as u8);
            for &d in t.shape() {
                w.u64(d as u64);
            }
            let start = payload.buf.len();
            payload.values(t.data());
            w.u64(start as u64);
            w.u64((payload.buf.len() - start) as u64);
            w.u64(fnv64(&payload.buf[start..]));
        }
        w.u64(payload.buf.len() as u64);
        w.bytes(&payload.buf);
        Ok(w.finish())
    }

    pub fn from_bytes(path: &Path, bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(path, bytes);
        if r.take(4, "magic")? != MANIFEST_MAGIC {
            return Err(r.format("not an OLMF manifest"));
        }
        let version = r.u32("version")?;
        if version != MANIFEST_VERSION {
            return Err(Error::UnsupportedVersion {
                path: path.to_path_buf(),
                found: version,
                expected: MANIFEST_VERSION,
            });
        }
        let mtag = r.u8("modality")? as usize;
        let modality = *ModalityId::ALL.get(mtag).ok_or_else(|| r.format(format!("modality tag {mtag}")))?;
        let stag = r.u8("split")?;
        let split = Split::from_tag(stag).ok_or_else(|| r.format(format!("split tag {stag}")))?;
        let n = r.u32("item count")? as usize;
        struct Entry {
            scene: SceneSpec,
            caption: String,
            qa: Vec<(String, String)>,
            shape: Vec<usize>,
            start: usize,
            len: usize,
            hash: u64,
        }
        let mut entries = Vec::with_capacity(n.min(1 << 20));
        for i in 0..n {
            let what = format!("item {i}");
            let k = r.take(4, &what)?;
            let (shape, color, size) = (
                *ShapeKind::ALL.get(k[0] as usize).ok_or_else(|| r.format(format!("{what}: shape tag")))?,
                *Color::ALL.get(k[1] as usize).ok_or_else(|| r.format(format!("{what}: color tag")))?,
                *SizeKind::ALL.get(k[2] as usize).ok_or_else(|| r.format(format!("{what}: size tag")))?,
            );
            let count = k[3];
            let seed = r.u64(&what)?;
            let caption = r.str(&what)?;
            let nqa = r.u8(&what)? as usize;
            let mut qa = Vec::with_capacity(nqa);
            for _ in 0..nqa {
                qa.push((r.str(&what)?, r.str(&what)?));
            }
            let ndim = r.u8(&what)? as usize;
            let mut dims = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                dims.push(r.u64(&what)? as usize);
            }
            entries.push(Entry {
                scene: SceneSpec {
                    shape,
                    color,
                    size,
                    count,
                    seed,
                },
                caption,
                qa,
                shape: dims,
                start: r.u64(&what)? as usize,
                len: r.u64(&what)? as usize,
                hash: r.u64(&what)?,
            });
        }
        let total = r.u64("payload size")? as usize;
        let payload = r.take(total, "payload section")?;
        if r.remaining() < 8 {
            return Err(Error::Truncated {
                path: path.to_path_buf(),
                detail: "no integrity trailer".into(),
            });
        }
        for (i, e) in entries.iter().enumerate() {
            let end = e.start.checked_add(e.len).filter(|&end| end <= payload.len());
            let Some(end) = end else {
                return Err(Error::Truncated {
                    path: path.to_path_buf(),
                    detail: format!("payload of item {i}"),
                });
            };
            if fnv64(&payload[e.start..end]) != e.hash {
                return Err(Error::HashMismatch {
                    path: path.to_path_buf(),
                    item: Some(i),
                });
            }
        }
        verify_trailer(path, bytes)?;
        let mut items = Vec::with_capacity(entries.len());
        for (i, e) in entries.into_iter().enumerate() {
            let mut pr = Reader::new(path, &payload[e.start..e.start + e.len]);
            let numel: usize = e.shape.iter().product();
            let data = pr.values::<f32>(numel, &format!("payload of item {i}"))?;
            if pr.remaining() != 0 {
                return Err(r.format(format!("payload of item {i} does not match its shape")));
            }
            let payload = Tensor::new(&e.shape, data).map_err(|err| r.format(format!("item {i}: {err}")))?;
            items.push(Example {
                scene: e.scene,
                signal: RawSignal::new(modality, payload),
                caption: e.caption,
                qa: e.qa,
            });
        }
        Ok(Self {
            version,
            modality,
            split,
            items,
        })
    }
}

/// Writes the manifest atomically and returns its integrity hash.
pub fn write_manifest(manifest: &Manifest, path: &Path) -> Result<u64> {
    let bytes = manifest.to_bytes()?;
    let hash = u64::from_le_bytes(bytes[bytes.len() - 8..].try_into().expect("trailer"));
    write_atomic(path, &bytes)?;
    Ok(hash)
}

pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let bytes = read_file(path)?;
    Manifest::from_bytes(path, &bytes)
}
