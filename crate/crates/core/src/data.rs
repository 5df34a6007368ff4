//! Synthetic imbalanced scenes, crops and augmentation, and the binary
//! tensor and checkpoint formats.
//!
//! Tensor files (`PFT1`): magic, `u8` dtype code (1 = f32, 2 = f64,
//! 3 = u8), `u8` rank, one little-endian `u32` per dimension, then the
//! row-major little-endian payload.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::network::ParameterSet;
use crate::tensor::{check_shape, Real, Tensor};

pub const TENSOR_MAGIC: &[u8; 4] = b"PFT1";
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PFC1";
pub const DTYPE_U8: u8 = 3;
/// Generation attempts before a scene is declared unsatisfiable.
pub const MAX_ATTEMPTS: usize = 100;
/// Relative slack around the target foreground ratio.
pub const FG_TOLERANCE: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Texture {
    Flat,
    /// Sum of bilinearly interpolated random lattices at several scales.
    Noise,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneConfig {
    pub canvas: (usize, usize),
    /// Background plus object classes.
    pub num_classes: usize,
    pub objects_per_scene: (usize, usize),
    /// Side length range of object bounding boxes, inclusive.
    pub object_size: (usize, usize),
    pub target_fg_ratio: f64,
    pub texture: Texture,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            canvas: (128, 128),
            num_classes: 6,
            objects_per_scene: (1, 64),
            object_size: (2, 8),
            target_fg_ratio: 0.03,
            texture: Texture::Noise,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.canvas;
        let (lo, hi) = self.object_size;
        if h == 0 || w == 0 || self.num_classes < 2 || self.num_classes > 255 {
            return Err(Error::arg("scene", "canvas must be non-empty and classes in 2..=255"));
        }
        if lo == 0 || lo > hi || hi > h.min(w) {
            return Err(Error::arg("scene", format!("object sizes {lo}..={hi} do not fit the canvas")));
        }
        if self.objects_per_scene.0 > self.objects_per_scene.1 {
            return Err(Error::arg("scene", "object count range is inverted"));
        }
        if !(0.0..1.0).contains(&self.target_fg_ratio) {
            return Err(Error::arg("scene", "target foreground ratio must lie in [0, 1)"));
        }
        Ok(())
    }

    fn fg_window(&self) -> (f64, f64) {
        (self.target_fg_ratio * (1.0 - FG_TOLERANCE), self.target_fg_ratio * (1.0 + FG_TOLERANCE))
    }
}

/// An image `[3, H, W]` in `[0, 1]` with its `H×W` label grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSample {
    pub image: Tensor<f32>,
    pub mask: Vec<u8>,
}

impl SceneSample {
    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }

    pub fn fg_ratio(&self) -> f64 {
        self.mask.iter().filter(|&&l| l != 0).count() as f64 / self.mask.len() as f64
    }
}

fn class_color(class: usize) -> [f32; 3] {
    const PALETTE: [[f32; 3]; 8] = [
        [0.85, 0.20, 0.20],
        [0.20, 0.35, 0.90],
        [0.95, 0.85, 0.15],
        [0.90, 0.90, 0.90],
        [0.60, 0.20, 0.75],
        [0.10, 0.80, 0.80],
        [0.95, 0.55, 0.10],
        [0.15, 0.15, 0.15],
    ];
    if class <= PALETTE.len() {
        PALETTE[class - 1]
    } else {
        // extra classes get a deterministic hash colour
        let h = (class as u32).wrapping_mul(2_654_435_761);
        [(h & 0xff) as f32 / 255.0, ((h >> 8) & 0xff) as f32 / 255.0, ((h >> 16) & 0xff) as f32 / 255.0]
    }
}

fn noise_field(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Vec<f32> {
    let mut field = vec![0.0f32; h * w];
    let mut amp = 0.5f32;
    for cell in [32usize, 16, 8, 4] {
        let (gh, gw) = (h / cell + 2, w / cell + 2);
        let lattice: Vec<f32> = (0..gh * gw).map(|_| rng.gen::<f32>()).collect();
        for i in 0..h {
            let y = i as f32 / cell as f32;
            let (y0, fy) = (y.floor() as usize, y.fract());
            for j in 0..w {
                let x = j as f32 / cell as f32;
                let (x0, fx) = (x.floor() as usize, x.fract());
                let at = |a: usize, b: usize| lattice[a * gw + b];
                let top = at(y0, x0) * (1.0 - fx) + at(y0, x0 + 1) * fx;
                let bottom = at(y0 + 1, x0) * (1.0 - fx) + at(y0 + 1, x0 + 1) * fx;
                field[i * w + j] += amp * (top * (1.0 - fy) + bottom * fy);
            }
        }
        amp *= 0.5;
    }
    field
}

fn background(rng: &mut ChaCha8Rng, texture: Texture, h: usize, w: usize) -> Vec<f32> {
    let base = [0.35f32, 0.42, 0.30];
    let mut img = vec![0.0f32; 3 * h * w];
    match texture {
        Texture::Flat => {
            for (c, b) in base.iter().enumerate() {
                img[c * h * w..(c + 1) * h * w].fill(*b);
            }
        }
        Texture::Noise => {
            let field = noise_field(rng, h, w);
            for (c, b) in base.iter().enumerate() {
                for (px, f) in field.iter().enumerate() {
                    // field lies in [0, 0.9375)
                    img[c * h * w + px] = b + 0.3 * (f - 0.47);
                }
            }
        }
    }
    img
}

/// Places one object, refusing boxes that touch existing foreground (one
/// pixel margin). Returns the number of pixels painted.
fn place_object(rng: &mut ChaCha8Rng, cfg: &SceneConfig, img: &mut [f32], mask: &mut [u8]) -> usize {
    let (h, w) = cfg.canvas;
    let (lo, hi) = cfg.object_size;
    let (oh, ow) = (rng.gen_range(lo..=hi), rng.gen_range(lo..=hi));
    let (top, left) = (rng.gen_range(0..=h - oh), rng.gen_range(0..=w - ow));
    let class = rng.gen_range(1..cfg.num_classes);
    let ellipse = rng.gen_bool(0.5) && oh >= 3 && ow >= 3;
    for i in top.saturating_sub(1)..(top + oh + 1).min(h) {
        for j in left.saturating_sub(1)..(left + ow + 1).min(w) {
            if mask[i * w + j] != 0 {
                return 0;
            }
        }
    }
    let color = class_color(class);
    let (cy, cx) = (oh as f64 / 2.0, ow as f64 / 2.0);
    let mut painted = 0;
    for di in 0..oh {
        for dj in 0..ow {
            if ellipse {
                let (y, x) = ((di as f64 + 0.5 - cy) / cy, (dj as f64 + 0.5 - cx) / cx);
                if y * y + x * x > 1.0 {
                    continue;
                }
            }
            let px = (top + di) * w + left + dj;
            mask[px] = class as u8;
            for (c, &base) in color.iter().enumerate() {
                img[c * h * w + px] = (base + rng.gen_range(-0.05f32..0.05)).clamp(0.0, 1.0);
            }
            painted += 1;
        }
    }
    painted
}

/// Scene `index` of the stream defined by `cfg.seed`. Objects are added
/// until the foreground ratio reaches the target; scenes outside the
/// tolerance window are redrawn.
pub fn synth_scene(cfg: &SceneConfig, index: u64) -> Result<SceneSample> {
    cfg.validate()?;
    let (h, w) = cfg.canvas;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index);
    let (min_fg, max_fg) = cfg.fg_window();
    let total = (h * w) as f64;
    for _ in 0..MAX_ATTEMPTS {
        let mut img = background(&mut rng, cfg.texture, h, w);
        let mut mask = vec![0u8; h * w];
        if cfg.objects_per_scene.1 == 0 {
            return finish(img, mask, h, w);
        }
        let (mut objects, mut fg, mut misses) = (0, 0usize, 0);
        while objects < cfg.objects_per_scene.1 && (fg as f64) < cfg.target_fg_ratio * total && misses < 1000 {
            match place_object(&mut rng, cfg, &mut img, &mut mask) {
                0 => misses += 1,
                n => {
                    fg += n;
                    objects += 1;
                }
            }
        }
        let ratio = fg as f64 / total;
        if objects >= cfg.objects_per_scene.0 && ratio >= min_fg && ratio <= max_fg {
            return finish(img, mask, h, w);
        }
    }
    Err(Error::Unsatisfiable(MAX_ATTEMPTS))
}

fn finish(mut img: Vec<f32>, mask: Vec<u8>, h: usize, w: usize) -> Result<SceneSample> {
    for v in &mut img {
        *v = v.clamp(0.0, 1.0);
    }
    Ok(SceneSample { image: Tensor::from_vec(&[3, h, w], img)?, mask })
}

/// Window starts along an axis: every `stride` while the window fits,
/// then one window flush with the far border.
pub fn window_starts(len: usize, size: usize, stride: usize) -> Vec<usize> {
    let mut starts = Vec::new();
    let mut s = 0;
    loop {
        if s + size >= len {
            starts.push(len.saturating_sub(size));
            return starts;
        }
        starts.push(s);
        s += stride.max(1);
    }
}

/// Origins `(row, col)` of the sliding-window crops of an `h×w` canvas.
pub fn crop_origins(h: usize, w: usize, size: usize, stride: usize) -> Vec<(usize, usize)> {
    let cols = window_starts(w, size, stride);
    window_starts(h, size, stride).into_iter().flat_map(|r| cols.iter().map(move |&c| (r, c))).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Crop {
    pub origin: (usize, usize),
    pub sample: SceneSample,
}

pub fn crop_at(sample: &SceneSample, origin: (usize, usize), size: usize) -> Result<Crop> {
    let (h, w) = (sample.height(), sample.width());
    let (r0, c0) = origin;
    if size == 0 || r0 + size > h || c0 + size > w {
        return Err(Error::arg("sliding_crop", format!("crop {size} at {origin:?} leaves the {h}x{w} canvas")));
    }
    let src = sample.image.data();
    let mut img = Vec::with_capacity(3 * size * size);
    for c in 0..3 {
        for i in r0..r0 + size {
            img.extend_from_slice(&src[(c * h + i) * w + c0..(c * h + i) * w + c0 + size]);
        }
    }
    let mut mask = Vec::with_capacity(size * size);
    for i in r0..r0 + size {
        mask.extend_from_slice(&sample.mask[i * w + c0..i * w + c0 + size]);
    }
    Ok(Crop { origin, sample: SceneSample { image: Tensor::from_vec(&[3, size, size], img)?, mask } })
}

pub fn sliding_crop(sample: &SceneSample, size: usize, stride: usize) -> Result<Vec<Crop>> {
    crop_origins(sample.height(), sample.width(), size, stride)
        .into_iter()
        .map(|o| crop_at(sample, o, size))
        .collect()
}

/// Max-vote merge of per-crop label predictions onto the full canvas;
/// ties go to the smaller class.
pub fn stitch(crops: &[((usize, usize), usize, &[u8])], h: usize, w: usize, num_classes: usize) -> Result<Vec<u8>> {
    let mut votes = vec![0u32; h * w * num_classes];
    for &((r0, c0), size, labels) in crops {
        if r0 + size > h || c0 + size > w || labels.len() != size * size {
            return Err(Error::arg("stitch", format!("crop at ({r0}, {c0}) does not fit")));
        }
        for i in 0..size {
            for j in 0..size {
                let l = labels[i * size + j] as usize;
                if l < num_classes {
                    votes[((r0 + i) * w + c0 + j) * num_classes + l] += 1;
                }
            }
        }
    }
    votes
        .chunks(num_classes)
        .map(|v| {
            let best = (0..num_classes).fold(0, |b, c| if v[c] > v[b] { c } else { b });
            if v[best] == 0 {
                Err(Error::arg("stitch", "pixel not covered by any crop"))
            } else {
                Ok(best as u8)
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Augment {
    HFlip,
    VFlip,
    /// Clockwise quarter turns, `k ∈ {1, 2, 3}`; pixel `(i, j)` of an
    /// `H×H` grid goes to `(j, H − 1 − i)` per turn.
    Rot90(u8),
}

fn remap<V: Copy>(plane: &[V], h: usize, w: usize, op: Augment) -> Vec<V> {
    let mut out = plane.to_vec();
    for i in 0..h {
        for j in 0..w {
            let v = plane[i * w + j];
            let (a, b) = match op {
                Augment::HFlip => (i, w - 1 - j),
                Augment::VFlip => (h - 1 - i, j),
                Augment::Rot90(k) => match k % 4 {
                    0 => (i, j),
                    1 => (j, h - 1 - i),
                    2 => (h - 1 - i, w - 1 - j),
                    _ => (w - 1 - j, i),
                },
            };
            out[a * w + b] = v;
        }
    }
    out
}

/// Applies `op` to image and mask alike.
pub fn augment(sample: &SceneSample, op: Augment) -> Result<SceneSample> {
    let (h, w) = (sample.height(), sample.width());
    if let Augment::Rot90(k) = op {
        if h != w {
            return Err(Error::arg("augment", format!("rotation needs a square crop, got {h}x{w}")));
        }
        if !(1..=3).contains(&k) {
            return Err(Error::arg("augment", format!("rotation k = {k} outside 1..=3")));
        }
    }
    let img: Vec<f32> = sample.image.data().chunks(h * w).flat_map(|p| remap(p, h, w, op)).collect();
    Ok(SceneSample { image: Tensor::from_vec(&[3, h, w], img)?, mask: remap(&sample.mask, h, w, op) })
}

/// Draws the training-time augmentation: independent flips, then a random
/// number of quarter turns.
pub fn random_augment(sample: &SceneSample, rng: &mut impl Rng) -> Result<SceneSample> {
    let mut s = sample.clone();
    if rng.gen_bool(0.5) {
        s = augment(&s, Augment::HFlip)?;
    }
    if rng.gen_bool(0.5) {
        s = augment(&s, Augment::VFlip)?;
    }
    let k = rng.gen_range(0..4u8);
    if k > 0 && s.height() == s.width() {
        s = augment(&s, Augment::Rot90(k))?;
    }
    Ok(s)
}

// ---- binary formats ----

/// Contents of a tensor file.
#[derive(Debug, Clone, PartialEq)]
pub enum StoredTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
    U8 { shape: Vec<usize>, data: Vec<u8> },
}

impl StoredTensor {
    pub fn shape(&self) -> &[usize] {
        match self {
            StoredTensor::F32(t) => t.shape(),
            StoredTensor::F64(t) => t.shape(),
            StoredTensor::U8 { shape, .. } => shape,
        }
    }

    pub fn into_real<T: Real>(self) -> Result<Tensor<T>> {
        match self {
            StoredTensor::F32(t) => Ok(t.cast()),
            StoredTensor::F64(t) => Ok(t.cast()),
            StoredTensor::U8 { .. } => Err(Error::Format("expected a floating-point tensor, found u8".into())),
        }
    }

    pub fn into_u8(self) -> Result<(Vec<usize>, Vec<u8>)> {
        match self {
            StoredTensor::U8 { shape, data } => Ok((shape, data)),
            _ => Err(Error::Format("expected a u8 tensor".into())),
        }
    }
}

fn header(dtype: u8, shape: &[usize]) -> Result<Vec<u8>> {
    check_shape(shape)?;
    if shape.len() > u8::MAX as usize {
        return Err(Error::Format(format!("rank {} too large", shape.len())));
    }
    let mut out = TENSOR_MAGIC.to_vec();
    out.push(dtype);
    out.push(shape.len() as u8);
    for &d in shape {
        let d = u32::try_from(d).map_err(|_| Error::Format(format!("dimension {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    Ok(out)
}

pub fn encode_tensor<T: Real>(t: &Tensor<T>) -> Result<Vec<u8>> {
    let mut out = header(T::DTYPE, t.shape())?;
    out.extend_from_slice(&t.to_le_bytes());
    Ok(out)
}

pub fn encode_u8(shape: &[usize], data: &[u8]) -> Result<Vec<u8>> {
    if check_shape(shape)? != data.len() {
        return Err(Error::shape("encode_u8", format!("{} values for shape {shape:?}", data.len())));
    }
    let mut out = header(DTYPE_U8, shape)?;
    out.extend_from_slice(data);
    Ok(out)
}

/// Decodes one tensor record from the front of `bytes`, returning it with
/// the number of bytes consumed.
pub fn decode_tensor(bytes: &[u8]) -> Result<(StoredTensor, usize)> {
    let need = |n: usize| if bytes.len() < n { Err(Error::Truncated { expected: n, found: bytes.len() }) } else { Ok(()) };
    need(6)?;
    if &bytes[..4] != TENSOR_MAGIC {
        return Err(Error::BadMagic);
    }
    let (dtype, rank) = (bytes[4], bytes[5] as usize);
    let width = match dtype {
        1 => 4,
        2 => 8,
        DTYPE_U8 => 1,
        other => return Err(Error::UnknownDtype(other)),
    };
    need(6 + 4 * rank)?;
    let shape: Vec<usize> = (0..rank)
        .map(|i| u32::from_le_bytes(bytes[6 + 4 * i..10 + 4 * i].try_into().expect("4 bytes")) as usize)
        .collect();
    let count = check_shape(&shape)?;
    let start = 6 + 4 * rank;
    let end = start + count * width;
    need(end)?;
    let payload = &bytes[start..end];
    let t = match dtype {
        1 => StoredTensor::F32(Tensor::from_vec(&shape, payload.chunks(4).map(f32::read_le).collect())?),
        2 => StoredTensor::F64(Tensor::from_vec(&shape, payload.chunks(8).map(f64::read_le).collect())?),
        _ => StoredTensor::U8 { shape, data: payload.to_vec() },
    };
    Ok((t, end))
}

pub fn write_tensor<T: Real>(t: &Tensor<T>, path: &Path) -> Result<()> {
    Ok(fs::write(path, encode_tensor(t)?)?)
}

pub fn write_u8_tensor(shape: &[usize], data: &[u8], path: &Path) -> Result<()> {
    Ok(fs::write(path, encode_u8(shape, data)?)?)
}

pub fn read_tensor(path: &Path) -> Result<StoredTensor> {
    let bytes = fs::read(path)?;
    let (t, used) = decode_tensor(&bytes)?;
    if used != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes after tensor", bytes.len() - used)));
    }
    Ok(t)
}

/// Grey-scale PGM of a label grid, labels spread over the grey range.
pub fn write_pgm(mask: &[u8], h: usize, w: usize, num_classes: usize, path: &Path) -> Result<()> {
    let step = 255 / (num_classes.max(2) - 1);
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(mask.iter().map(|&l| if l as usize >= num_classes { 255 } else { (l as usize * step) as u8 }));
    Ok(fs::write(path, out)?)
}

/// Binary PPM of an `[3, H, W]` image in `[0, 1]`.
pub fn ppm_bytes(image: &Tensor<f32>) -> Result<Vec<u8>> {
    let [3, h, w] = image.shape()[..] else {
        return Err(Error::shape("ppm", format!("image shape {:?}", image.shape())));
    };
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let d = image.data();
    for px in 0..h * w {
        for c in 0..3 {
            out.push((d[c * h * w + px].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    Ok(out)
}

pub fn write_ppm(image: &Tensor<f32>, path: &Path) -> Result<()> {
    Ok(fs::write(path, ppm_bytes(image)?)?)
}

// ---- manifest ----

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            other => Err(Error::Format(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub image: String,
    pub mask: String,
    pub split: Split,
}

pub fn format_manifest(entries: &[ManifestEntry]) -> String {
    entries.iter().map(|e| format!("{}\t{}\t{}\n", e.image, e.mask, e.split.as_str())).collect()
}

pub fn parse_manifest(text: &str) -> Result<Vec<ManifestEntry>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, line)| {
            let fields: Vec<&str> = line.split('\t').collect();
            let [image, mask, split] = fields[..] else {
                return Err(Error::Format(format!("manifest line {}: expected 3 tab-separated fields", n + 1)));
            };
            Ok(ManifestEntry { image: image.to_string(), mask: mask.to_string(), split: split.parse()? })
        })
        .collect()
}

/// Loads the samples of a manifest, paths resolved against `root`.
pub fn load_samples(root: &Path, entries: &[ManifestEntry]) -> Result<Vec<(Split, SceneSample)>> {
    entries
        .iter()
        .map(|e| {
            let image: Tensor<f32> = read_tensor(&root.join(&e.image))?.into_real()?;
            let (shape, mask) = read_tensor(&root.join(&e.mask))?.into_u8()?;
            if image.shape().len() != 3 || image.shape()[0] != 3 || shape != image.shape()[1..] {
                return Err(Error::Format(format!("{}: image {:?} and mask {shape:?} disagree", e.image, image.shape())));
            }
            Ok((e.split, SceneSample { image, mask }))
        })
        .collect()
}

// ---- checkpoints ----

/// Serializes parameters: magic, `u32` manifest length, a text manifest of
/// `name<TAB>dims<TAB>offset` lines, then one tensor record per parameter
/// at the listed offset from the end of the manifest.
pub fn encode_checkpoint<T: Real>(params: &ParameterSet<T>) -> Result<Vec<u8>> {
    let mut manifest = String::new();
    let mut payload = Vec::new();
    for (name, t) in &params.tensors {
        if name.contains(['\t', '\n']) {
            return Err(Error::Format(format!("parameter name {name:?} contains a separator")));
        }
        let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
        manifest.push_str(&format!("{name}\t{}\t{}\n", dims.join("x"), payload.len()));
        payload.extend(encode_tensor(t)?);
    }
    let mut out = CHECKPOINT_MAGIC.to_vec();
    out.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
    out.extend_from_slice(manifest.as_bytes());
    out.extend(payload);
    Ok(out)
}

pub fn decode_checkpoint<T: Real>(bytes: &[u8]) -> Result<ParameterSet<T>> {
    if bytes.len() < 8 {
        return Err(Error::Truncated { expected: 8, found: bytes.len() });
    }
    if &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic);
    }
    let mlen = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    if bytes.len() < 8 + mlen {
        return Err(Error::Truncated { expected: 8 + mlen, found: bytes.len() });
    }
    let manifest = std::str::from_utf8(&bytes[8..8 + mlen]).map_err(|e| Error::Format(e.to_string()))?;
    let payload = &bytes[8 + mlen..];
    let mut tensors = BTreeMap::new();
    for line in manifest.lines() {
        let fields: Vec<&str> = line.split('\t').collect();
        let [name, _, offset] = fields[..] else {
            return Err(Error::Format(format!("bad checkpoint manifest line {line:?}")));
        };
        let offset: usize = offset.parse().map_err(|_| Error::Format(format!("bad offset in {line:?}")))?;
        let rest = payload.get(offset..).ok_or(Error::Truncated { expected: offset, found: payload.len() })?;
        let (t, _) = decode_tensor(rest)?;
        tensors.insert(name.to_string(), t.into_real()?);
    }
    Ok(ParameterSet { tensors })
}

pub fn save_checkpoint<T: Real>(params: &ParameterSet<T>, path: &Path) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode_checkpoint(params)?)?;
    Ok(())
}

pub fn load_checkpoint<T: Real>(path: &Path) -> Result<ParameterSet<T>> {
    decode_checkpoint(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn no_objects_means_all_background() {
        let cfg = SceneConfig { objects_per_scene: (0, 0), ..Default::default() };
        let s = synth_scene(&cfg, 0).unwrap();
        assert!(s.mask.iter().all(|&l| l == 0));
        assert_eq!(s.fg_ratio(), 0.0);
    }

    #[test]
    fn scenes_are_deterministic_and_distinct() {
        let cfg = SceneConfig::default();
        let a = synth_scene(&cfg, 3).unwrap();
        assert_eq!(a, synth_scene(&cfg, 3).unwrap());
        assert_ne!(a, synth_scene(&cfg, 4).unwrap());
        assert!(a.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(a.mask.iter().all(|&l| (l as usize) < cfg.num_classes));
    }

    #[test]
    fn impossible_window_is_unsatisfiable() {
        let cfg = SceneConfig { objects_per_scene: (1, 1), object_size: (2, 2), target_fg_ratio: 0.5, ..Default::default() };
        assert!(matches!(synth_scene(&cfg, 0), Err(Error::Unsatisfiable(MAX_ATTEMPTS))));
    }

    #[test]
    fn window_starts_cases() {
        assert_eq!(window_starts(64, 64, 37), vec![0]);
        assert_eq!(window_starts(1024, 896, 512), vec![0, 128]);
        assert_eq!(window_starts(128, 64, 32), vec![0, 32, 64]);
        assert_eq!(window_starts(128, 64, 37), vec![0, 37, 64]);
        assert_eq!(crop_origins(1024, 1024, 896, 512).len(), 4);
    }

    #[test]
    fn flips_and_rotations() {
        let s = synth_scene(&SceneConfig { canvas: (16, 16), ..Default::default() }, 1).unwrap();
        let hh = augment(&augment(&s, Augment::HFlip).unwrap(), Augment::HFlip).unwrap();
        assert_eq!(hh, s);
        let r2 = augment(&s, Augment::Rot90(2)).unwrap();
        let vh = augment(&augment(&s, Augment::HFlip).unwrap(), Augment::VFlip).unwrap();
        assert_eq!(r2, vh);
        let mut r = s.clone();
        for _ in 0..4 {
            r = augment(&r, Augment::Rot90(1)).unwrap();
        }
        assert_eq!(r, s);
    }

    #[test]
    fn rotation_moves_marked_corner() {
        let mut mask = vec![0u8; 9];
        mask[0] = 1;
        let sq = SceneSample { image: Tensor::zeros(&[3, 3, 3]).unwrap(), mask };
        let r = augment(&sq, Augment::Rot90(1)).unwrap();
        // (0, 0) → (0, 2)
        assert_eq!(r.mask[2], 1);
        let rect = SceneSample { image: Tensor::zeros(&[3, 3, 4]).unwrap(), mask: vec![0; 12] };
        assert!(augment(&rect, Augment::Rot90(1)).is_err());
    }

    #[test]
    fn tensor_round_trips() {
        let t = Tensor::<f32>::uniform(&[2, 3, 4], 5, -1.0, 1.0).unwrap();
        let bytes = encode_tensor(&t).unwrap();
        assert_eq!(&bytes[..4], b"PFT1");
        assert_eq!(decode_tensor(&bytes).unwrap().0, StoredTensor::F32(t.clone()));
        let d = Tensor::<f64>::uniform(&[3], 6, -1.0, 1.0).unwrap();
        assert_eq!(decode_tensor(&encode_tensor(&d).unwrap()).unwrap().0, StoredTensor::F64(d));

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert_eq!(decode_tensor(&bad).unwrap_err().to_string(), "bad magic");
        assert!(matches!(decode_tensor(&bytes[..bytes.len() - 1]), Err(Error::Truncated { .. })));
        let mut dt = bytes;
        dt[4] = 9;
        assert!(matches!(decode_tensor(&dt), Err(Error::UnknownDtype(9))));
    }

    #[test]
    fn mask_round_trip_keeps_histogram() {
        let s = synth_scene(&SceneConfig::default(), 2).unwrap();
        let bytes = encode_u8(&[128, 128], &s.mask).unwrap();
        let (shape, data) = decode_tensor(&bytes).unwrap().0.into_u8().unwrap();
        assert_eq!(shape, vec![128, 128]);
        assert_eq!(data, s.mask);
    }

    #[test]
    fn checkpoint_round_trip() {
        let cfg = crate::network::NetworkConfig { fpn_channels: 4, backbone_channels: [4, 4, 4, 4], ..Default::default() };
        let p = crate::network::init_params::<f32>(&cfg, 1).unwrap();
        let bytes = encode_checkpoint(&p).unwrap();
        assert_eq!(decode_checkpoint::<f32>(&bytes).unwrap(), p);
        assert!(decode_checkpoint::<f32>(&bytes[..bytes.len() - 3]).is_err());
    }

    #[test]
    fn stitch_reassembles_canvas() {
        let s = synth_scene(&SceneConfig::default(), 9).unwrap();
        let crops = sliding_crop(&s, 64, 37).unwrap();
        assert_eq!(crops.len(), 9);
        let parts: Vec<_> = crops.iter().map(|c| (c.origin, 64, c.sample.mask.as_slice())).collect();
        assert_eq!(stitch(&parts, 128, 128, 6).unwrap(), s.mask);
    }

    #[test]
    fn manifest_round_trip() {
        let e = vec![
            ManifestEntry { image: "a.pft".into(), mask: "a_mask.pft".into(), split: Split::Train },
            ManifestEntry { image: "b.pft".into(), mask: "b_mask.pft".into(), split: Split::Val },
        ];
        assert_eq!(parse_manifest(&format_manifest(&e)).unwrap(), e);
        assert!(parse_manifest("a\tb\n").is_err());
        assert!(parse_manifest("a\tb\ttest\n").is_err());
    }
}
