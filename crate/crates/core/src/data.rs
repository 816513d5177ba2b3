//! Synthetic labeled images, RandResizeCrop, patchify, and the EVAD dataset file.

use std::f64::consts::PI;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::{streams, Prng};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageRecord {
    /// `3 × size × size`, channel-major.
    pub pixels: Vec<u8>,
    pub label: u16,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub image_size: usize,
    pub class_count: usize,
    pub records: Vec<ImageRecord>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.records.iter().map(|r| r.label as usize).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let px = 3 * self.image_size * self.image_size;
        for (i, r) in self.records.iter().enumerate() {
            if r.pixels.len() != px {
                return Err(Error::Format(format!("record {i} has {} pixels, expected {px}", r.pixels.len())));
            }
            if r.label as usize >= self.class_count {
                return Err(Error::OutOfRange { index: r.label as usize, limit: self.class_count });
            }
        }
        Ok(())
    }
}

/// Channel-major float image in pixel units (0..=255 before normalization).
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn from_record(r: &ImageRecord, size: usize) -> Self {
        Image { height: size, width: size, data: r.pixels.iter().map(|&p| p as f32).collect() }
    }

    fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.data.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }
}

// ── synthetic corpus ─────────────────────────────────────────────────

/// Pixel noise of the toy recipe, in 8-bit intensity units.
pub const DEFAULT_NOISE_SIGMA: f64 = 60.0;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub class_count: usize,
    pub image_size: usize,
    pub samples_per_class: usize,
    pub seed: u64,
    pub noise_sigma: f64,
    /// Index of the first sample drawn per class; disjoint ranges give disjoint splits.
    pub first_index: usize,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.class_count < 2 || self.class_count > u16::MAX as usize {
            return Err(Error::Config(format!("class_count must be in [2, 65535], got {}", self.class_count)));
        }
        if self.image_size < 4 {
            return Err(Error::Config(format!("image_size must be at least 4, got {}", self.image_size)));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::Config(format!("noise_sigma must be non-negative, got {}", self.noise_sigma)));
        }
        Ok(())
    }
}

// Per-image nuisance ranges.
const CONTRAST_MIN: f64 = 0.3;
const BRIGHTNESS_JITTER: f64 = 40.0;
const TINT_MIN: f64 = 0.3;
const RECT_COLOR_JITTER: f64 = 40.0;
/// Rectangle center shift, as a fraction of the image size.
const RECT_SHIFT: f64 = 0.15;

/// Fixed per-class pattern parameters.
#[derive(Debug, Clone)]
struct ClassPattern {
    orientation: f64,
    frequency: f64,
    rect_center: (f64, f64),
    rect_color: [f64; 3],
}

fn class_pattern(seed: u64, class: usize, classes: usize, size: usize) -> ClassPattern {
    let mut r = Prng::new(seed, streams::DATA).split(class as u64);
    let s = size as f64;
    let orientation = PI * class as f64 / classes as f64 + r.uniform_in(-0.1, 0.1);
    let frequency = r.uniform_in(1.5, 4.0);
    let rect_center = (r.uniform_in(0.25 * s, 0.75 * s), r.uniform_in(0.25 * s, 0.75 * s));
    let rect_color = [r.uniform_in(40.0, 215.0), r.uniform_in(40.0, 215.0), r.uniform_in(40.0, 215.0)];
    ClassPattern { orientation, frequency, rect_center, rect_color }
}

/// Renders sample `index` of `class`. Deterministic in `(spec.seed, class, index)`.
pub fn synth_image(spec: &SyntheticSpec, class: usize, index: usize) -> ImageRecord {
    let size = spec.image_size;
    let s = size as f64;
    let pat = class_pattern(spec.seed, class, spec.class_count, size);
    let mut r = Prng::new(spec.seed, streams::DATA).derive(&[1 << 32, class as u64, index as u64]);
    let phase = r.uniform_in(0.0, 2.0 * PI);
    let contrast = r.uniform_in(CONTRAST_MIN, 1.0);
    let brightness = r.uniform_in(-BRIGHTNESS_JITTER, BRIGHTNESS_JITTER);
    let tint: Vec<f64> = (0..3).map(|_| r.uniform_in(TINT_MIN, 1.0)).collect();
    let rc: Vec<f64> = pat.rect_color.iter().map(|c| c + r.uniform_in(-RECT_COLOR_JITTER, RECT_COLOR_JITTER)).collect();
    let jitter = RECT_SHIFT * s;
    let (cx, cy) = (pat.rect_center.0 + r.uniform_in(-jitter, jitter), pat.rect_center.1 + r.uniform_in(-jitter, jitter));
    let half = 0.125 * s;
    let (ox, oy) = (pat.orientation.cos(), pat.orientation.sin());
    let mut pixels = vec![0u8; 3 * size * size];
    for y in 0..size {
        for x in 0..size {
            let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
            let wave = (2.0 * PI * pat.frequency * (fx * ox + fy * oy) / s + phase).cos();
            let in_rect = (fx - cx).abs() <= half && (fy - cy).abs() <= half;
            for c in 0..3 {
                let base = if in_rect { rc[c] } else { 128.0 + 90.0 * contrast * tint[c] * wave };
                let noise = if spec.noise_sigma > 0.0 { spec.noise_sigma * r.normal() } else { 0.0 };
                pixels[(c * size + y) * size + x] = (base + brightness + noise).round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    ImageRecord { pixels, label: class as u16 }
}

/// `samples_per_class` records per class, ordered class-major.
pub fn synth_generate(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut records = Vec::with_capacity(spec.class_count * spec.samples_per_class);
    for class in 0..spec.class_count {
        for i in 0..spec.samples_per_class {
            records.push(synth_image(spec, class, spec.first_index + i));
        }
    }
    Ok(Dataset { image_size: spec.image_size, class_count: spec.class_count, records })
}

// ── augmentation ─────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CropParams {
    pub scale_min: f64,
    pub scale_max: f64,
    pub ratio_min: f64,
    pub ratio_max: f64,
}

impl Default for CropParams {
    fn default() -> Self {
        CropParams { scale_min: 0.2, scale_max: 1.0, ratio_min: 3.0 / 4.0, ratio_max: 4.0 / 3.0 }
    }
}

/// Bilinear resampling of the `h × w` window at (`top`, `left`) to `out × out`
/// with half-pixel centers.
fn resize_window(img: &Image, top: usize, left: usize, h: usize, w: usize, out: usize) -> Image {
    let mut data = vec![0f32; 3 * out * out];
    let sy = h as f64 / out as f64;
    let sx = w as f64 / out as f64;
    for oy in 0..out {
        let y = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = y.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let wy = (y - y0 as f64) as f32;
        for ox in 0..out {
            let x = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = x.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let wx = (x - x0 as f64) as f32;
            for c in 0..3 {
                let p00 = img.at(c, top + y0, left + x0);
                let p01 = img.at(c, top + y0, left + x1);
                let p10 = img.at(c, top + y1, left + x0);
                let p11 = img.at(c, top + y1, left + x1);
                let top_row = p00 + (p01 - p00) * wx;
                let bot_row = p10 + (p11 - p10) * wx;
                data[(c * out + oy) * out + ox] = top_row + (bot_row - top_row) * wy;
            }
        }
    }
    Image { height: out, width: out, data }
}

pub fn bilinear_resize(img: &Image, out: usize) -> Result<Image> {
    if out == 0 {
        return Err(Error::InvalidArgument("output size must be positive".into()));
    }
    Ok(resize_window(img, 0, 0, img.height, img.width, out))
}

/// Random area/aspect crop resized to `out × out`; falls back to a center crop
/// after 10 rejected placements.
pub fn rand_resize_crop(img: &Image, params: &CropParams, out: usize, rng: &mut Prng) -> Result<Image> {
    if out == 0 {
        return Err(Error::InvalidArgument("output size must be positive".into()));
    }
    let CropParams { scale_min, scale_max, ratio_min, ratio_max } = *params;
    if !(scale_min > 0.0 && scale_min <= scale_max && scale_max <= 1.0) {
        return Err(Error::InvalidArgument(format!("crop scale must satisfy 0 < min <= max <= 1, got ({scale_min}, {scale_max})")));
    }
    if !(ratio_min > 0.0 && ratio_min <= ratio_max) {
        return Err(Error::InvalidArgument(format!("crop ratio range invalid: ({ratio_min}, {ratio_max})")));
    }
    let (hh, ww) = (img.height, img.width);
    let area = (hh * ww) as f64;
    for _ in 0..10 {
        let target = area * rng.uniform_in(scale_min, scale_max);
        let aspect = rng.uniform_in(ratio_min.ln(), ratio_max.ln()).exp();
        let w = (target * aspect).sqrt().round() as usize;
        let h = (target / aspect).sqrt().round() as usize;
        if w > 0 && h > 0 && w <= ww && h <= hh {
            let top = rng.below(hh - h + 1);
            let left = rng.below(ww - w + 1);
            return Ok(resize_window(img, top, left, h, w, out));
        }
    }
    let in_ratio = ww as f64 / hh as f64;
    let (w, h) = if in_ratio < ratio_min {
        (ww, ((ww as f64 / ratio_min).round() as usize).clamp(1, hh))
    } else if in_ratio > ratio_max {
        (((hh as f64 * ratio_max).round() as usize).clamp(1, ww), hh)
    } else {
        (ww, hh)
    };
    Ok(resize_window(img, (hh - h) / 2, (ww - w) / 2, h, w, out))
}

// ── tensors ──────────────────────────────────────────────────────────

/// `(x/255 − 0.5)/0.5` per channel.
pub fn normalize(img: &Image) -> Image {
    Image { height: img.height, width: img.width, data: img.data.iter().map(|&v| (v / 255.0 - 0.5) / 0.5).collect() }
}

/// Row-major patch scan; each row holds one patch as `(channel, py, px)`.
pub fn patchify(img: &Image, patch: usize) -> Result<Vec<f32>> {
    if patch == 0 || img.height % patch != 0 || img.width % patch != 0 {
        return Err(Error::InvalidArgument(format!("{}x{} image not divisible by patch {patch}", img.height, img.width)));
    }
    let (gh, gw) = (img.height / patch, img.width / patch);
    let mut out = Vec::with_capacity(img.data.len());
    for gy in 0..gh {
        for gx in 0..gw {
            for c in 0..3 {
                for py in 0..patch {
                    let y = gy * patch + py;
                    let start = (c * img.height + y) * img.width + gx * patch;
                    out.extend_from_slice(&img.data[start..start + patch]);
                }
            }
        }
    }
    Ok(out)
}

/// Inverse of [`patchify`].
pub fn unpatchify(rows: &[f32], size: usize, patch: usize) -> Result<Image> {
    if patch == 0 || size % patch != 0 || rows.len() != 3 * size * size {
        return Err(Error::InvalidArgument(format!("cannot unpatchify {} values into {size}x{size}", rows.len())));
    }
    let g = size / patch;
    let mut data = vec![0f32; 3 * size * size];
    let mut it = rows.iter();
    for gy in 0..g {
        for gx in 0..g {
            for c in 0..3 {
                for py in 0..patch {
                    for px in 0..patch {
                        data[(c * size + gy * patch + py) * size + gx * patch + px] = *it.next().expect("length checked");
                    }
                }
            }
        }
    }
    Ok(Image { height: size, width: size, data })
}

/// Stacks normalized images into a `(batch · grid) × patch_dim` tensor.
pub fn patch_batch<T: Scalar>(images: &[Image], patch: usize) -> Result<Tensor<T>> {
    let mut data = Vec::new();
    let mut rows = 0;
    for img in images {
        let p = patchify(img, patch)?;
        rows += p.len() / (3 * patch * patch);
        data.extend(p.into_iter().map(|v| T::of(v as f64)));
    }
    Tensor::from_vec(&[rows, 3 * patch * patch], data)
}

/// Pure function of `(seed, epoch)`.
pub fn epoch_permutation(seed: u64, epoch: u64, n: usize) -> Vec<usize> {
    Prng::new(seed, streams::SHUFFLE).split(epoch).permutation(n)
}

// ── EVAD file ────────────────────────────────────────────────────────

const EVAD_MAGIC: &[u8; 4] = b"EVAD";
const EVAD_VERSION: u32 = 1;

pub fn write_evad(path: &Path, ds: &Dataset) -> Result<()> {
    ds.validate()?;
    let mut buf = Vec::with_capacity(20 + ds.len() * (2 + 3 * ds.image_size * ds.image_size));
    buf.extend_from_slice(EVAD_MAGIC);
    buf.extend_from_slice(&EVAD_VERSION.to_le_bytes());
    buf.extend_from_slice(&(ds.len() as u32).to_le_bytes());
    buf.extend_from_slice(&(ds.image_size as u32).to_le_bytes());
    buf.extend_from_slice(&(ds.class_count as u32).to_le_bytes());
    for r in &ds.records {
        buf.extend_from_slice(&r.label.to_le_bytes());
        buf.extend_from_slice(&r.pixels);
    }
    std::fs::File::create(path)?.write_all(&buf)?;
    Ok(())
}

fn u32_at(b: &[u8], off: usize) -> u32 {
    u32::from_le_bytes(b[off..off + 4].try_into().expect("4 bytes"))
}

pub fn read_evad(path: &Path) -> Result<Dataset> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 20 || &bytes[..4] != EVAD_MAGIC {
        return Err(Error::Format(format!("{}: not an EVAD file", path.display())));
    }
    let version = u32_at(&bytes, 4);
    if version != EVAD_VERSION {
        return Err(Error::Format(format!("unsupported EVAD version {version}")));
    }
    let count = u32_at(&bytes, 8) as usize;
    let image_size = u32_at(&bytes, 12) as usize;
    let class_count = u32_at(&bytes, 16) as usize;
    let px = 3 * image_size * image_size;
    let expected = 20 + count * (2 + px);
    if bytes.len() != expected {
        return Err(Error::Format(format!("EVAD length {} does not match header ({expected})", bytes.len())));
    }
    let mut records = Vec::with_capacity(count);
    let mut off = 20;
    for _ in 0..count {
        let label = u16::from_le_bytes([bytes[off], bytes[off + 1]]);
        off += 2;
        records.push(ImageRecord { pixels: bytes[off..off + px].to_vec(), label });
        off += px;
    }
    let ds = Dataset { image_size, class_count, records };
    ds.validate()?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(sigma: f64) -> SyntheticSpec {
        SyntheticSpec { class_count: 4, image_size: 16, samples_per_class: 5, seed: 9, noise_sigma: sigma, first_index: 0 }
    }

    #[test]
    fn zero_noise_is_reproducible() {
        let s = spec(0.0);
        assert_eq!(synth_image(&s, 2, 3), synth_image(&s, 2, 3));
        assert_ne!(synth_image(&s, 2, 3), synth_image(&s, 2, 4));
    }

    #[test]
    fn classes_are_balanced() {
        let ds = synth_generate(&spec(10.0)).unwrap();
        for c in 0..4 {
            assert_eq!(ds.records.iter().filter(|r| r.label == c).count(), 5);
        }
    }

    #[test]
    fn identity_crop_equals_resize() {
        let ds = synth_generate(&spec(5.0)).unwrap();
        let img = Image::from_record(&ds.records[0], 16);
        let p = CropParams { scale_min: 1.0, scale_max: 1.0, ratio_min: 1.0, ratio_max: 1.0 };
        let a = rand_resize_crop(&img, &p, 8, &mut Prng::new(0, 0)).unwrap();
        assert_eq!(a, bilinear_resize(&img, 8).unwrap());
        let same = rand_resize_crop(&img, &p, 16, &mut Prng::new(0, 0)).unwrap();
        assert_eq!(same, img);
    }

    #[test]
    fn crop_shape_and_convexity() {
        let ds = synth_generate(&spec(20.0)).unwrap();
        let mut rng = Prng::new(4, 3);
        for r in &ds.records {
            let img = Image::from_record(r, 16);
            let (lo, hi) = img.min_max();
            let out = rand_resize_crop(&img, &CropParams::default(), 12, &mut rng).unwrap();
            assert_eq!(out.data.len(), 3 * 12 * 12);
            let m = out.mean() as f32;
            assert!(m >= lo && m <= hi);
        }
        assert!(rand_resize_crop(&Image::from_record(&ds.records[0], 16), &CropParams::default(), 0, &mut rng).is_err());
    }

    #[test]
    fn patchify_layout_and_inverse() {
        let img = Image { height: 32, width: 32, data: (0..3 * 32 * 32).map(|v| v as f32).collect() };
        let rows = patchify(&img, 4).unwrap();
        assert_eq!(rows.len(), 64 * 48);
        assert_eq!(unpatchify(&rows, 32, 4).unwrap(), img);
        assert!(patchify(&img, 5).is_err());
    }

    #[test]
    fn evad_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.evad");
        let ds = synth_generate(&spec(3.0)).unwrap();
        write_evad(&p, &ds).unwrap();
        assert_eq!(read_evad(&p).unwrap(), ds);
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 1]).unwrap();
        assert!(matches!(read_evad(&p), Err(Error::Format(_))));
    }

    #[test]
    fn shuffle_is_pure() {
        assert_eq!(epoch_permutation(1, 2, 50), epoch_permutation(1, 2, 50));
        assert_ne!(epoch_permutation(1, 2, 50), epoch_permutation(1, 3, 50));
    }
}
