//! Frozen backbone snapshots, ground-truth masks and dataset manifests.
//!
//! A snapshot captures everything the segmentation head needs from one
//! image: the text bank, the mask embeddings, the soft mask proposals and
//! optionally a dense feature map for visual injection. Payloads are stored
//! as little-endian binary32 and promoted to `f64` on load.
//!
//! POVS layout:
//!
//! | field            | type                      |
//! |------------------|---------------------------|
//! | magic            | `b"POVS"`                 |
//! | version          | `u8` (= 1)                |
//! | flags            | `u8`, bit 0: feature map  |
//! | V, D, N, H, W    | `u32` each                |
//! | Hf, Wf           | `u32` each (0 without F)  |
//! | logit scale      | `f64`                     |
//! | text bank        | `f32[V*D]`                |
//! | mask embeddings  | `f32[N*D]`                |
//! | mask proposals   | `f32[H*W*N]`              |
//! | feature map      | `f32[Hf*Wf*D]`            |
//! | vocab count      | `u32`                     |
//! | names            | `u16` length + UTF-8      |

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

pub const SNAPSHOT_MAGIC: [u8; 4] = *b"POVS";
pub const SNAPSHOT_VERSION: u8 = 1;
const FLAG_FEATURES: u8 = 0b1;

/// Header size in bytes: magic, version, flags, seven `u32`, one `f64`.
pub const SNAPSHOT_HEADER_LEN: usize = 4 + 1 + 1 + 7 * 4 + 8;

/// Dense `Hf x Wf x D` feature map, stored as `Hf*Wf` rows of length `D`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub height: usize,
    pub width: usize,
    pub data: Matrix,
}

impl FeatureMap {
    pub fn dim(&self) -> usize {
        self.data.cols()
    }
}

/// One image's frozen backbone export.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenSnapshot {
    /// `V x D` open-vocabulary text embeddings.
    pub text: Matrix,
    /// `N x D` mask embeddings.
    pub mask_embed: Matrix,
    /// `(H*W) x N` soft mask proposals, pixel-major.
    pub masks: Matrix,
    pub height: usize,
    pub width: usize,
    pub logit_scale: f64,
    pub vocab_names: Vec<String>,
    pub features: Option<FeatureMap>,
}

impl FrozenSnapshot {
    pub fn vocab_size(&self) -> usize {
        self.text.rows()
    }

    pub fn dim(&self) -> usize {
        self.text.cols()
    }

    pub fn num_masks(&self) -> usize {
        self.mask_embed.rows()
    }

    pub fn num_pixels(&self) -> usize {
        self.height * self.width
    }

    /// Checks every invariant the on-disk format promises.
    pub fn validate(&self) -> Result<()> {
        let (v, d, n) = (self.vocab_size(), self.dim(), self.num_masks());
        if self.mask_embed.cols() != d {
            return Err(Error::dims("mask embedding width", d, self.mask_embed.cols()));
        }
        if self.masks.rows() != self.num_pixels() {
            return Err(Error::dims("mask proposal pixels", self.num_pixels(), self.masks.rows()));
        }
        if self.masks.cols() != n {
            return Err(Error::dims("mask proposal channels", n, self.masks.cols()));
        }
        if self.vocab_names.len() != v {
            return Err(Error::dims("vocabulary names", v, self.vocab_names.len()));
        }
        if !(self.logit_scale.is_finite() && self.logit_scale > 0.0) {
            return Err(Error::InvalidLogitScale(self.logit_scale));
        }
        check_finite("text bank", self.text.as_slice())?;
        check_finite("mask embeddings", self.mask_embed.as_slice())?;
        for (i, &m) in self.masks.as_slice().iter().enumerate() {
            if !m.is_finite() {
                return Err(Error::NonFinite { field: "mask proposals", index: i });
            }
            if !(0.0..=1.0).contains(&m) {
                return Err(Error::MaskOutOfRange { index: i, value: m });
            }
        }
        if let Some(f) = &self.features {
            if f.dim() != d {
                return Err(Error::dims("feature map width", d, f.dim()));
            }
            if f.data.rows() != f.height * f.width {
                return Err(Error::dims("feature map cells", f.height * f.width, f.data.rows()));
            }
            if f.height == 0 || f.width == 0 {
                return Err(Error::Format("feature map with zero extent".into()));
            }
            check_finite("feature map", f.data.as_slice())?;
        }
        for (i, name) in self.vocab_names.iter().enumerate() {
            if name.len() > u16::MAX as usize {
                return Err(Error::Format(format!("vocabulary entry {i} exceeds 65535 bytes")));
            }
        }
        Ok(())
    }

    /// Rounds every floating payload through binary32 so the in-memory
    /// values equal what a save/load cycle produces.
    pub fn quantize(&mut self) {
        let round = |m: &mut Matrix| {
            for r in 0..m.rows() {
                for x in m.row_mut(r) {
                    *x = f64::from(*x as f32);
                }
            }
        };
        round(&mut self.text);
        round(&mut self.mask_embed);
        round(&mut self.masks);
        if let Some(f) = &mut self.features {
            round(&mut f.data);
        }
    }

    pub fn encoded_len(&self) -> usize {
        let (v, d, n) = (self.vocab_size(), self.dim(), self.num_masks());
        let feat = self.features.as_ref().map_or(0, |f| f.height * f.width * d);
        let names: usize = self.vocab_names.iter().map(|s| 2 + s.len()).sum();
        SNAPSHOT_HEADER_LEN + 4 * (v * d + n * d + self.num_pixels() * n + feat) + 4 + names
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(&SNAPSHOT_MAGIC);
        out.push(SNAPSHOT_VERSION);
        out.push(if self.features.is_some() { FLAG_FEATURES } else { 0 });
        let (hf, wf) = self.features.as_ref().map_or((0, 0), |f| (f.height, f.width));
        for x in [
            self.vocab_size(),
            self.dim(),
            self.num_masks(),
            self.height,
            self.width,
            hf,
            wf,
        ] {
            out.extend_from_slice(&to_u32(x)?.to_le_bytes());
        }
        out.extend_from_slice(&self.logit_scale.to_le_bytes());
        write_f32s(&mut out, "text bank", self.text.as_slice())?;
        write_f32s(&mut out, "mask embeddings", self.mask_embed.as_slice())?;
        write_f32s(&mut out, "mask proposals", self.masks.as_slice())?;
        if let Some(f) = &self.features {
            write_f32s(&mut out, "feature map", f.data.as_slice())?;
        }
        out.extend_from_slice(&to_u32(self.vocab_names.len())?.to_le_bytes());
        for name in &self.vocab_names {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        let magic: [u8; 4] = r.take(4, "magic")?.try_into().unwrap();
        if magic != SNAPSHOT_MAGIC {
            return Err(Error::BadMagic {
                expected: SNAPSHOT_MAGIC,
                found: magic,
            });
        }
        let version = r.u8("version")?;
        if version != SNAPSHOT_VERSION {
            return Err(Error::UnsupportedVersion {
                expected: SNAPSHOT_VERSION,
                found: version,
            });
        }
        let flags = r.u8("flags")?;
        if flags & !FLAG_FEATURES != 0 {
            return Err(Error::Format(format!("unknown flag bits {flags:#04x}")));
        }
        let v = r.u32("header")? as usize;
        let d = r.u32("header")? as usize;
        let n = r.u32("header")? as usize;
        let h = r.u32("header")? as usize;
        let w = r.u32("header")? as usize;
        let hf = r.u32("header")? as usize;
        let wf = r.u32("header")? as usize;
        let logit_scale = r.f64("logit scale")?;
        let has_features = flags & FLAG_FEATURES != 0;
        if !has_features && (hf != 0 || wf != 0) {
            return Err(Error::Format("feature extent set without feature flag".into()));
        }
        if !(logit_scale.is_finite() && logit_scale > 0.0) {
            return Err(Error::InvalidLogitScale(logit_scale));
        }

        let text = r.f32_matrix(v, d, "text bank")?;
        let mask_embed = r.f32_matrix(n, d, "mask embeddings")?;
        let pixels = h.checked_mul(w).ok_or_else(|| Error::Format("grid size overflow".into()))?;
        let masks = r.f32_matrix(pixels, n, "mask proposals")?;
        let features = if has_features {
            let cells = hf.checked_mul(wf).ok_or_else(|| Error::Format("feature grid overflow".into()))?;
            Some(FeatureMap {
                height: hf,
                width: wf,
                data: r.f32_matrix(cells, d, "feature map")?,
            })
        } else {
            None
        };
        let count = r.u32("vocab count")? as usize;
        if count != v {
            return Err(Error::dims("vocabulary names", v, count));
        }
        let mut vocab_names = Vec::with_capacity(count.min(bytes.len()));
        for index in 0..count {
            let len = r.u16("vocab entry length")? as usize;
            let raw = r.take(len, "vocab entry")?;
            let name = std::str::from_utf8(raw).map_err(|_| Error::InvalidName { index })?;
            vocab_names.push(name.to_owned());
        }
        if r.remaining() != 0 {
            return Err(Error::TrailingBytes { count: r.remaining() });
        }
        let snap = FrozenSnapshot {
            text,
            mask_embed,
            masks,
            height: h,
            width: w,
            logit_scale,
            vocab_names,
            features,
        };
        snap.validate()?;
        Ok(snap)
    }
}

pub fn save_snapshot(snapshot: &FrozenSnapshot, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = snapshot.to_bytes()?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_snapshot(path: impl AsRef<Path>) -> Result<FrozenSnapshot> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    FrozenSnapshot::from_bytes(&bytes)
}

fn check_finite(field: &'static str, xs: &[f64]) -> Result<()> {
    match xs.iter().position(|x| !x.is_finite()) {
        Some(index) => Err(Error::NonFinite { field, index }),
        None => Ok(()),
    }
}

fn to_u32(x: usize) -> Result<u32> {
    u32::try_from(x).map_err(|_| Error::Format(format!("dimension {x} exceeds u32")))
}

fn write_f32s(out: &mut Vec<u8>, field: &'static str, xs: &[f64]) -> Result<()> {
    for (index, &x) in xs.iter().enumerate() {
        let y = x as f32;
        if !y.is_finite() {
            return Err(Error::NonFinite { field, index });
        }
        out.extend_from_slice(&y.to_le_bytes());
    }
    Ok(())
}

/// Bounds-checked little-endian cursor.
pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub(crate) fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub(crate) fn take(&mut self, len: usize, what: &'static str) -> Result<&'a [u8]> {
        if len > self.remaining() {
            return Err(Error::Truncated {
                what,
                needed: len,
                available: self.remaining(),
            });
        }
        let s = &self.buf[self.pos..self.pos + len];
        self.pos += len;
        Ok(s)
    }

    pub(crate) fn u8(&mut self, what: &'static str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    pub(crate) fn u16(&mut self, what: &'static str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    pub(crate) fn u32(&mut self, what: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    pub(crate) fn f64(&mut self, what: &'static str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    pub(crate) fn f64s(&mut self, count: usize, what: &'static str) -> Result<Vec<f64>> {
        let bytes = count
            .checked_mul(8)
            .ok_or_else(|| Error::Format(format!("{what} size overflow")))?;
        let raw = self.take(bytes, what)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn f32_matrix(&mut self, rows: usize, cols: usize, what: &'static str) -> Result<Matrix> {
        let bytes = rows
            .checked_mul(cols)
            .and_then(|c| c.checked_mul(4))
            .ok_or_else(|| Error::Format(format!("{what} size overflow")))?;
        let raw = self.take(bytes, what)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
            .collect();
        Matrix::from_vec(rows, cols, data)
    }
}

/// Binary grid of 0/1 cells, row-major.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    pub height: usize,
    pub width: usize,
    data: Vec<u8>,
}

/// Foreground mask of the personal concept at proposal-grid resolution.
pub type GroundTruthMask = BinaryMask;
/// Foreground mask at feature-map resolution.
pub type FeatureMask = BinaryMask;

impl BinaryMask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::dims("mask cells", height * width, data.len()));
        }
        if let Some((index, &value)) = data.iter().enumerate().find(|(_, &b)| b > 1) {
            return Err(Error::InvalidMaskByte { index, value });
        }
        Ok(Self { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(u8::from(f(y, x)));
            }
        }
        Self { height, width, data }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x] == 1
    }

    #[inline]
    pub fn at(&self, p: usize) -> bool {
        self.data[p] == 1
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn foreground(&self) -> usize {
        self.data.iter().filter(|&&b| b == 1).count()
    }

    /// All-zero or all-one masks are allowed but carry no contrast.
    pub fn is_degenerate(&self) -> bool {
        let fg = self.foreground();
        fg == 0 || fg == self.data.len()
    }

    pub fn complement(&self) -> Self {
        Self {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|b| 1 - b).collect(),
        }
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.width, self.height, |y, x| self.get(x, y))
    }
}

/// Area-average pooling to `target_h x target_w`, then threshold at 0.5
/// (exact ties go to 1). Overlaps are computed in integer units so the
/// tie rule is exact for any ratio.
pub fn downsample_mask(mask: &GroundTruthMask, target_h: usize, target_w: usize) -> Result<FeatureMask> {
    if target_h == 0 || target_w == 0 {
        return Err(Error::InvalidTarget(format!("{target_h}x{target_w}")));
    }
    let (h, w) = (mask.height, mask.width);
    if target_h > h || target_w > w {
        return Err(Error::InvalidTarget(format!(
            "{target_h}x{target_w} exceeds source {h}x{w}"
        )));
    }
    // Source row y spans [y*th, (y+1)*th); target row i spans [i*h, (i+1)*h).
    let overlap = |src: usize, dst: usize, src_scale: usize, dst_scale: usize| -> usize {
        let (a0, a1) = (src * src_scale, (src + 1) * src_scale);
        let (b0, b1) = (dst * dst_scale, (dst + 1) * dst_scale);
        a1.min(b1).saturating_sub(a0.max(b0))
    };
    let mut out = Vec::with_capacity(target_h * target_w);
    for i in 0..target_h {
        let y0 = i * h / target_h;
        let y1 = ((i + 1) * h).div_ceil(target_h);
        for j in 0..target_w {
            let x0 = j * w / target_w;
            let x1 = ((j + 1) * w).div_ceil(target_w);
            let mut covered = 0usize;
            for y in y0..y1 {
                let oy = overlap(y, i, target_h, h);
                if oy == 0 {
                    continue;
                }
                for x in x0..x1 {
                    if mask.get(y, x) {
                        covered += oy * overlap(x, j, target_w, w);
                    }
                }
            }
            // Cell area in scaled units is h * w.
            out.push(u8::from(2 * covered >= h * w));
        }
    }
    BinaryMask::new(target_h, target_w, out)
}

pub fn load_mask(path: impl AsRef<Path>, height: usize, width: usize) -> Result<GroundTruthMask> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    BinaryMask::new(height, width, bytes)
}

pub fn save_mask(mask: &BinaryMask, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, mask.as_bytes()).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Polarity {
    Positive,
    Negative,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub snapshot: PathBuf,
    pub mask: Option<PathBuf>,
    pub split: Split,
    pub polarity: Polarity,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
    pub personal_class_name: String,
    /// Directory the manifest was read from.
    pub root: PathBuf,
}

impl Manifest {
    pub fn train(&self) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(|e| e.split == Split::Train)
    }

    pub fn test(&self) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(|e| e.split == Split::Test)
    }
}

/// Parses manifest text; relative paths resolve against `root`.
/// File existence is not checked here.
pub fn parse_manifest(text: &str, root: &Path) -> Result<Manifest> {
    let mut entries = Vec::new();
    let mut class: Option<String> = None;
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let err = |message: String| Error::Manifest { line, message };
        let fields: Vec<&str> = raw.split('\t').collect();
        if fields.len() != 5 {
            return Err(err(format!("expected 5 tab-separated fields, found {}", fields.len())));
        }
        let mask = match fields[1] {
            "-" => None,
            m => Some(root.join(m)),
        };
        let split = match fields[2] {
            "train" => Split::Train,
            "test" => Split::Test,
            other => return Err(err(format!("unknown split {other:?}"))),
        };
        let polarity = match fields[3] {
            "positive" => Polarity::Positive,
            "negative" => Polarity::Negative,
            other => return Err(err(format!("unknown polarity {other:?}"))),
        };
        if split == Split::Train && mask.is_none() {
            return Err(err("train entries need a mask".into()));
        }
        let name = fields[4];
        match &class {
            None => class = Some(name.to_owned()),
            Some(c) if c != name => {
                return Err(err(format!("second personal class {name:?} (already {c:?})")))
            }
            _ => {}
        }
        entries.push(ManifestEntry {
            snapshot: root.join(fields[0]),
            mask,
            split,
            polarity,
        });
    }
    let personal_class_name = class.ok_or_else(|| Error::Manifest {
        line: 0,
        message: "manifest has no entries".into(),
    })?;
    Ok(Manifest {
        entries,
        personal_class_name,
        root: root.to_path_buf(),
    })
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let root = path.parent().unwrap_or(Path::new("."));
    let manifest = parse_manifest(&text, root)?;
    for entry in &manifest.entries {
        for p in std::iter::once(&entry.snapshot).chain(entry.mask.as_ref()) {
            if !p.is_file() {
                return Err(Error::io(
                    p,
                    std::io::Error::new(std::io::ErrorKind::NotFound, "referenced file missing"),
                ));
            }
        }
    }
    Ok(manifest)
}

/// One loaded manifest entry.
#[derive(Debug, Clone)]
pub struct Sample {
    pub snapshot: FrozenSnapshot,
    pub mask: Option<GroundTruthMask>,
    pub split: Split,
    pub polarity: Polarity,
}

pub fn load_sample(entry: &ManifestEntry) -> Result<Sample> {
    let snapshot = load_snapshot(&entry.snapshot)?;
    let mask = entry
        .mask
        .as_ref()
        .map(|p| load_mask(p, snapshot.height, snapshot.width))
        .transpose()?;
    Ok(Sample {
        snapshot,
        mask,
        split: entry.split,
        polarity: entry.polarity,
    })
}

/// A loaded dataset directory: manifest plus every sample in manifest order.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: Manifest,
    pub samples: Vec<Sample>,
    /// Text embedding of the personal concept's name, when the exporter provided one.
    pub prompt: Option<Vec<f64>>,
}

pub const MANIFEST_FILE: &str = "manifest.tsv";
pub const PROMPT_FILE: &str = "prompt.vec";

impl Dataset {
    pub fn open(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest = load_manifest(dir.join(MANIFEST_FILE))?;
        let samples = manifest
            .entries
            .iter()
            .map(load_sample)
            .collect::<Result<Vec<_>>>()?;
        let prompt_path = dir.join(PROMPT_FILE);
        let prompt = if prompt_path.is_file() {
            Some(load_vector(&prompt_path)?)
        } else {
            None
        };
        Ok(Self {
            manifest,
            samples,
            prompt,
        })
    }

    pub fn train(&self) -> Vec<&Sample> {
        self.samples.iter().filter(|s| s.split == Split::Train).collect()
    }

    pub fn test(&self) -> Vec<&Sample> {
        self.samples.iter().filter(|s| s.split == Split::Test).collect()
    }

    /// Initial personal embedding: the exported prompt embedding when
    /// present, otherwise the text-bank row whose name matches the
    /// personal class name.
    pub fn init_vector(&self) -> Result<Vec<f64>> {
        if let Some(p) = &self.prompt {
            return Ok(p.clone());
        }
        let first = self
            .samples
            .first()
            .ok_or_else(|| Error::Config("dataset has no samples".into()))?;
        let name = &self.manifest.personal_class_name;
        let row = first
            .snapshot
            .vocab_names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| {
                Error::Config(format!(
                    "no {PROMPT_FILE} and personal class {name:?} is not in the vocabulary"
                ))
            })?;
        Ok(first.snapshot.text.row(row).to_vec())
    }
}

/// Plain-text vector: whitespace-separated decimal values.
pub fn load_vector(path: impl AsRef<Path>) -> Result<Vec<f64>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.split_whitespace()
        .enumerate()
        .map(|(i, tok)| {
            let v: f64 = tok
                .parse()
                .map_err(|_| Error::Format(format!("{}: bad number {tok:?}", path.display())))?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(Error::NonFinite { field: "vector", index: i })
            }
        })
        .collect()
}

pub fn save_vector(v: &[f64], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text: Vec<String> = v.iter().map(|x| format!("{x:?}")).collect();
    fs::write(path, text.join("\t") + "\n").map_err(|e| Error::io(path, e))
}
