//! Synthetic motion videos, the clip file format, and clip sampling.
//!
//! Each video shows squares drifting in one direction across a torus; the
//! class is the direction. Positions, sizes and colours are drawn
//! independently of the class, so a single frame carries no class
//! information and only temporal structure separates the classes.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Shape5, Tensor5};

pub const NORM_MEAN: f32 = 0.45;
pub const NORM_STD: f32 = 0.225;

/// Per-frame displacement direction of each class, in (dy, dx) units.
pub const DIRECTIONS: [(i64, i64); 8] = [(0, 1), (0, -1), (1, 0), (-1, 0), (1, 1), (-1, -1), (1, -1), (-1, 1)];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthTaskSpec {
    pub num_classes: usize,
    pub clips_per_class: usize,
    /// `[T, H, W]` of every video.
    pub full_size: [usize; 3],
    /// Pixels moved per frame.
    pub speed: usize,
    pub squares: usize,
    /// Square side range, inclusive.
    pub square_size: [usize; 2],
    /// Standard deviation of additive pixel noise (0–255 scale).
    pub noise: f64,
    pub fps: u32,
    pub seed: u64,
}

impl Default for SynthTaskSpec {
    fn default() -> Self {
        SynthTaskSpec {
            num_classes: 4,
            clips_per_class: 50,
            full_size: [16, 64, 64],
            speed: 2,
            squares: 2,
            square_size: [8, 16],
            noise: 8.0,
            fps: 8,
            seed: 0,
        }
    }
}

impl SynthTaskSpec {
    pub fn validate(&self) -> Result<()> {
        let [t, h, w] = self.full_size;
        if self.num_classes == 0 || self.num_classes > DIRECTIONS.len() {
            return Err(Error::param(format!("num_classes must be 1..={}", DIRECTIONS.len())));
        }
        if self.clips_per_class == 0 || t == 0 || h == 0 || w == 0 || self.squares == 0 {
            return Err(Error::param("task sizes must be positive"));
        }
        let [lo, hi] = self.square_size;
        if lo == 0 || lo > hi || hi > h.min(w) {
            return Err(Error::param(format!("square size {lo}..={hi} does not fit {h}x{w}")));
        }
        if !(self.noise >= 0.0) {
            return Err(Error::param("noise must be non-negative"));
        }
        Ok(())
    }
}

/// RGB video stored as planes `(3, T, H, W)` of bytes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VideoClip {
    pub frames: Vec<u8>,
    /// `[T, H, W]`.
    pub size: [usize; 3],
    pub label: usize,
}

impl VideoClip {
    pub fn new(frames: Vec<u8>, size: [usize; 3], label: usize) -> Result<Self> {
        let n = 3usize
            .checked_mul(size[0])
            .and_then(|v| v.checked_mul(size[1]))
            .and_then(|v| v.checked_mul(size[2]))
            .ok_or_else(|| Error::Size(format!("clip {size:?} overflows")))?;
        if n == 0 || frames.len() != n {
            return Err(Error::shape(format!("clip {size:?} needs {n} bytes, got {}", frames.len())));
        }
        Ok(VideoClip { frames, size, label })
    }

    #[inline]
    pub fn at(&self, c: usize, t: usize, y: usize, x: usize) -> u8 {
        let [tt, h, w] = self.size;
        self.frames[((c * tt + t) * h + y) * w + x]
    }
}

/// One video of class `label`; the `index`-th draw of `spec.seed`.
pub fn gen_clip(spec: &SynthTaskSpec, label: usize, index: u64) -> VideoClip {
    let mut rng = Rng::stream(spec.seed, index);
    let [t_len, h, w] = spec.full_size;
    let (dy, dx) = DIRECTIONS[label];
    let bg: [f64; 3] = std::array::from_fn(|_| rng.uniform_in(0.0, 80.0));
    struct Square {
        y: usize,
        x: usize,
        side: usize,
        colour: [f64; 3],
    }
    let squares: Vec<Square> = (0..spec.squares)
        .map(|_| Square {
            y: rng.below(h as u64) as usize,
            x: rng.below(w as u64) as usize,
            side: rng.range_inclusive(spec.square_size[0], spec.square_size[1]),
            colour: std::array::from_fn(|_| rng.uniform_in(140.0, 255.0)),
        })
        .collect();

    let plane = h * w;
    let mut frames = vec![0u8; 3 * t_len * plane];
    let mut canvas = vec![[0f64; 3]; plane];
    for t in 0..t_len {
        canvas.fill(bg);
        let shift = (t * spec.speed) as i64;
        for s in &squares {
            let y0 = (s.y as i64 + dy * shift).rem_euclid(h as i64) as usize;
            let x0 = (s.x as i64 + dx * shift).rem_euclid(w as i64) as usize;
            for yy in 0..s.side {
                let row = (y0 + yy) % h * w;
                for xx in 0..s.side {
                    canvas[row + (x0 + xx) % w] = s.colour;
                }
            }
        }
        for (p, px) in canvas.iter().enumerate() {
            for c in 0..3 {
                let v = px[c] + spec.noise * rng.normal();
                frames[(c * t_len + t) * plane + p] = v.round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    VideoClip {
        frames,
        size: spec.full_size,
        label,
    }
}

/// Balanced dataset; clip `i` has label `i % num_classes`.
pub fn gen_dataset(spec: &SynthTaskSpec) -> Result<Vec<VideoClip>> {
    spec.validate()?;
    let n = spec.num_classes * spec.clips_per_class;
    Ok((0..n)
        .into_par_iter()
        .map(|i| gen_clip(spec, i % spec.num_classes, i as u64))
        .collect())
}

// ---------------------------------------------------------------------------
// Clip files: "CSNV", version, T, H, W, label (u32 little-endian), then
// 3·T·H·W bytes of RGB planes.

pub const CLIP_MAGIC: &[u8; 4] = b"CSNV";
pub const CLIP_VERSION: u32 = 1;
const CLIP_HEADER: usize = 4 + 5 * 4;

pub fn encode_clip(clip: &VideoClip) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(CLIP_HEADER + clip.frames.len());
    out.extend_from_slice(CLIP_MAGIC);
    out.extend_from_slice(&CLIP_VERSION.to_le_bytes());
    for v in [clip.size[0], clip.size[1], clip.size[2], clip.label] {
        let v = u32::try_from(v).map_err(|_| Error::Size(format!("clip field {v} exceeds u32")))?;
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&clip.frames);
    Ok(out)
}

pub fn decode_clip(bytes: &[u8]) -> Result<VideoClip> {
    if bytes.len() < 4 {
        return Err(Error::Truncated(format!("clip header: {} bytes", bytes.len())));
    }
    if &bytes[..4] != CLIP_MAGIC {
        return Err(Error::Format("not a clip file (bad magic)".into()));
    }
    if bytes.len() < CLIP_HEADER {
        return Err(Error::Truncated(format!("clip header: {} bytes", bytes.len())));
    }
    let field = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("four bytes"));
    let version = field(0);
    if version != CLIP_VERSION {
        return Err(Error::Version {
            found: version,
            expected: CLIP_VERSION,
        });
    }
    let size = [field(1) as usize, field(2) as usize, field(3) as usize];
    let label = field(4) as usize;
    let body = &bytes[CLIP_HEADER..];
    let need = size.iter().try_fold(3usize, |a, &d| a.checked_mul(d)).ok_or_else(|| Error::Format("clip size overflows".into()))?;
    if body.len() < need {
        return Err(Error::Truncated(format!("clip body: {} of {need} bytes", body.len())));
    }
    if body.len() > need {
        return Err(Error::Format(format!("clip body has {} trailing bytes", body.len() - need)));
    }
    VideoClip::new(body.to_vec(), size, label)
}

pub fn write_clip(path: impl AsRef<Path>, clip: &VideoClip) -> Result<()> {
    fs::write(path, encode_clip(clip)?)?;
    Ok(())
}

pub fn read_clip(path: impl AsRef<Path>) -> Result<VideoClip> {
    decode_clip(&fs::read(path)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub label: usize,
}

/// `manifest.json` of a dataset directory. Clip paths are relative to it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub fps: u32,
    pub task: SynthTaskSpec,
    pub clips: Vec<ManifestEntry>,
}

pub const MANIFEST_NAME: &str = "manifest.json";

pub fn write_dataset(dir: impl AsRef<Path>, task: &SynthTaskSpec, clips: &[VideoClip]) -> Result<Manifest> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(clips.len());
    for (i, c) in clips.iter().enumerate() {
        let name = format!("clip_{i:05}.csnv");
        write_clip(dir.join(&name), c)?;
        entries.push(ManifestEntry { path: name, label: c.label });
    }
    let manifest = Manifest {
        seed: task.seed,
        fps: task.fps,
        task: task.clone(),
        clips: entries,
    };
    fs::write(dir.join(MANIFEST_NAME), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(manifest)
}

pub fn read_dataset(dir: impl AsRef<Path>) -> Result<(Manifest, Vec<VideoClip>)> {
    let dir = dir.as_ref();
    let manifest: Manifest = serde_json::from_slice(&fs::read(dir.join(MANIFEST_NAME))?)?;
    let clips = manifest
        .clips
        .iter()
        .map(|e| {
            let p: PathBuf = dir.join(&e.path);
            let c = read_clip(&p)?;
            if c.label != e.label {
                return Err(Error::Format(format!("{}: label {} but manifest says {}", e.path, c.label, e.label)));
            }
            Ok(c)
        })
        .collect::<Result<_>>()?;
    Ok((manifest, clips))
}

// ---------------------------------------------------------------------------
// Sampling

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SampleMode {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SampleSpec {
    pub clip_len: usize,
    /// Temporal stride between sampled frames.
    pub skip: usize,
    /// Short-edge scale range for training, inclusive.
    pub scale: [usize; 2],
    /// Short-edge scale for evaluation.
    pub eval_scale: usize,
    pub crop: usize,
}

impl Default for SampleSpec {
    fn default() -> Self {
        SampleSpec {
            clip_len: 4,
            skip: 2,
            scale: [36, 48],
            eval_scale: 36,
            crop: 32,
        }
    }
}

impl SampleSpec {
    pub fn validate(&self) -> Result<()> {
        if self.clip_len == 0 || self.skip == 0 || self.crop == 0 {
            return Err(Error::param("clip length, skip and crop must be positive"));
        }
        if self.scale[0] > self.scale[1] {
            return Err(Error::param(format!("scale range {:?} is reversed", self.scale)));
        }
        if self.crop > self.scale[0] || self.crop > self.eval_scale {
            return Err(Error::param(format!(
                "crop {} exceeds the short edge (scales {:?}, eval {})",
                self.crop, self.scale, self.eval_scale
            )));
        }
        Ok(())
    }

    /// Largest valid start frame for a video of `frames` frames.
    pub fn max_start(&self, frames: usize) -> Result<usize> {
        frames.checked_sub(self.clip_len * self.skip).ok_or_else(|| {
            Error::param(format!(
                "video of {frames} frames is too short for {} frames at skip {}",
                self.clip_len, self.skip
            ))
        })
    }
}

/// Scaled frame size with the short edge at `s`, aspect preserved.
pub fn scaled_size(h: usize, w: usize, s: usize) -> (usize, usize) {
    if h <= w {
        (s, ((w * s) as f64 / h as f64).round() as usize)
    } else {
        (((h * s) as f64 / w as f64).round() as usize, s)
    }
}

/// A crop window of a frame rescaled to `scaled`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Window {
    pub start: usize,
    pub scaled: (usize, usize),
    pub y0: usize,
    pub x0: usize,
}

/// Bilinear source taps along one axis for output positions
/// `offset..offset+len` of an axis resampled from `src` to `dst`.
fn taps(src: usize, dst: usize, offset: usize, len: usize) -> Vec<(usize, usize, f32)> {
    let ratio = src as f64 / dst as f64;
    (offset..offset + len)
        .map(|o| {
            let p = ((o as f64 + 0.5) * ratio - 0.5).clamp(0.0, (src - 1) as f64);
            let i0 = p.floor() as usize;
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, (p - i0 as f64) as f32)
        })
        .collect()
}

pub fn normalize(v: f32) -> f32 {
    (v - NORM_MEAN) / NORM_STD
}

pub fn denormalize(v: f32) -> f32 {
    v * NORM_STD + NORM_MEAN
}

/// Render a window as a normalized `(1, 3, T, crop, crop)` tensor.
pub fn render(video: &VideoClip, spec: &SampleSpec, win: &Window) -> Result<Tensor5<f32>> {
    let [t_full, h, w] = video.size;
    let (sh, sw) = win.scaled;
    let (t, crop) = (spec.clip_len, spec.crop);
    if win.start + (t - 1) * spec.skip >= t_full || win.y0 + crop > sh || win.x0 + crop > sw {
        return Err(Error::param(format!("window {win:?} falls outside the video {:?}", video.size)));
    }
    let ys = taps(h, sh, win.y0, crop);
    let xs = taps(w, sw, win.x0, crop);
    let mut out = Vec::with_capacity(3 * t * crop * crop);
    for c in 0..3 {
        for k in 0..t {
            let f = win.start + k * spec.skip;
            for &(y0, y1, wy) in &ys {
                for &(x0, x1, wx) in &xs {
                    let p = |y, x| video.at(c, f, y, x) as f32;
                    let top = p(y0, x0) * (1.0 - wx) + p(y0, x1) * wx;
                    let bot = p(y1, x0) * (1.0 - wx) + p(y1, x1) * wx;
                    out.push(normalize((top * (1.0 - wy) + bot * wy) / 255.0));
                }
            }
        }
    }
    Tensor5::from_vec(Shape5::new(1, 3, t, crop, crop)?, out)
}

/// Random start frame, random short-edge scale, random crop.
pub fn train_window(video: &VideoClip, spec: &SampleSpec, rng: &mut Rng) -> Result<Window> {
    spec.validate()?;
    let [t_full, h, w] = video.size;
    let max_start = spec.max_start(t_full)?;
    let start = rng.range_inclusive(0, max_start);
    let s = rng.range_inclusive(spec.scale[0], spec.scale[1]);
    let (sh, sw) = scaled_size(h, w, s);
    let y0 = rng.range_inclusive(0, sh - spec.crop);
    let x0 = rng.range_inclusive(0, sw - spec.crop);
    Ok(Window {
        start,
        scaled: (sh, sw),
        y0,
        x0,
    })
}

pub fn sample_train_clip(video: &VideoClip, spec: &SampleSpec, rng: &mut Rng) -> Result<Tensor5<f32>> {
    let win = train_window(video, spec, rng)?;
    render(video, spec, &win)
}

/// `n` start frames evenly spaced over `[0, max_start]`; one clip sits at
/// the centre.
pub fn eval_offsets(max_start: usize, n: usize) -> Vec<usize> {
    match n {
        0 => Vec::new(),
        1 => vec![max_start / 2],
        _ => (0..n)
            .map(|i| ((i * max_start) as f64 / (n - 1) as f64).round() as usize)
            .collect(),
    }
}

pub fn eval_windows(video: &VideoClip, spec: &SampleSpec, n: usize) -> Result<Vec<Window>> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::param("at least one eval clip is needed"));
    }
    let [t_full, h, w] = video.size;
    let (sh, sw) = scaled_size(h, w, spec.eval_scale);
    Ok(eval_offsets(spec.max_start(t_full)?, n)
        .into_iter()
        .map(|start| Window {
            start,
            scaled: (sh, sw),
            y0: (sh - spec.crop) / 2,
            x0: (sw - spec.crop) / 2,
        })
        .collect())
}

/// Centre crops at the fixed eval scale, `n` clips evenly spaced in time.
pub fn sample_eval_clips(video: &VideoClip, spec: &SampleSpec, n: usize) -> Result<Vec<Tensor5<f32>>> {
    eval_windows(video, spec, n)?.iter().map(|w| render(video, spec, w)).collect()
}

/// Stack `(1, …)` tensors along the batch axis.
pub fn stack(items: &[Tensor5<f32>]) -> Result<Tensor5<f32>> {
    let first = items.first().ok_or_else(|| Error::param("cannot stack zero clips"))?;
    let s = *first.shape();
    let mut data = Vec::with_capacity(s.numel() * items.len());
    for it in items {
        it.expect_shape(&s, "stack")?;
        data.extend_from_slice(it.data());
    }
    Tensor5::from_vec(s.with_batch(items.len() * s.n())?, data)
}

/// A training batch: clip `videos[i]` is sampled with stream `i` of `seed`.
pub fn sample_batch(videos: &[&VideoClip], spec: &SampleSpec, seed: u64) -> Result<(Tensor5<f32>, Vec<usize>)> {
    let clips = videos
        .par_iter()
        .enumerate()
        .map(|(i, v)| sample_train_clip(v, spec, &mut Rng::stream(seed, i as u64)))
        .collect::<Result<Vec<_>>>()?;
    Ok((stack(&clips)?, videos.iter().map(|v| v.label).collect()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn offsets() {
        assert_eq!(eval_offsets(90, 10), (0..10).map(|i| 10 * i).collect::<Vec<_>>());
        assert_eq!(eval_offsets(8, 1), vec![4]);
        assert_eq!(eval_offsets(0, 3), vec![0, 0, 0]);
    }

    #[test]
    fn max_start_arithmetic() {
        let s = SampleSpec::default();
        assert_eq!(s.max_start(16).unwrap(), 8);
        assert!(s.max_start(7).is_err());
    }

    #[test]
    fn taps_identity_when_not_scaled() {
        for (i, &(a, b, w)) in taps(10, 10, 0, 10).iter().enumerate() {
            assert_eq!((a, w), (i, 0.0));
            assert!(b == i + 1 || b == 9);
        }
    }

    #[test]
    fn normalize_roundtrip() {
        for i in 0..=255 {
            let x = i as f32 / 255.0;
            assert!((denormalize(normalize(x)) - x).abs() <= 1e-6);
        }
    }
}
