//! Raw content to feature vectors, plus the train/test-time augmentations.
//!
//! Text becomes L2-normalized hashed character-trigram counts followed by
//! `[char_count, word_count]`; images become a 16x16 area-averaged thumbnail
//! with four global statistics, followed by `[width, height]`. The trailing
//! auxiliary features are z-scored with statistics fitted on training data.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::SeededRng;

pub const TEXT_BUCKETS: usize = 4096;
pub const THUMB_SIDE: usize = 16;
pub const IMAGE_STATS: usize = 4;
pub const IMAGE_MAIN_DIM: usize = THUMB_SIDE * THUMB_SIDE + IMAGE_STATS;
pub const AUX_COUNT: usize = 2;
/// Padding symbol placed before and after the text when forming trigrams.
pub const BOUNDARY: char = '\u{2}';
const STD_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Text,
    Image,
}

impl Modality {
    pub fn main_dim(self) -> usize {
        match self {
            Modality::Text => TEXT_BUCKETS,
            Modality::Image => IMAGE_MAIN_DIM,
        }
    }

    /// Width of the full feature vector (main features plus auxiliaries).
    pub fn input_dim(self) -> usize {
        self.main_dim() + AUX_COUNT
    }
}

/// Row-major 8-bit grayscale image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageData {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl ImageData {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::EmptyImage);
        }
        if width.checked_mul(height) != Some(pixels.len()) {
            return Err(Error::DimensionMismatch {
                expected: width.saturating_mul(height),
                got: pixels.len(),
            });
        }
        Ok(Self { width, height, pixels })
    }

    pub fn at(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.width + x]
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Content {
    Text(String),
    Image(ImageData),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sample {
    pub id: String,
    pub content: Content,
    pub label: Option<String>,
}

impl Sample {
    pub fn text(id: impl Into<String>, text: impl Into<String>, label: Option<String>) -> Self {
        Self {
            id: id.into(),
            content: Content::Text(text.into()),
            label,
        }
    }

    pub fn image(id: impl Into<String>, image: ImageData, label: Option<String>) -> Self {
        Self {
            id: id.into(),
            content: Content::Image(image),
            label,
        }
    }

    pub fn modality(&self) -> Modality {
        match self.content {
            Content::Text(_) => Modality::Text,
            Content::Image(_) => Modality::Image,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    /// Main features followed by `aux_count` auxiliary features.
    pub values: Vec<f64>,
    pub aux_count: usize,
}

impl FeatureVector {
    pub fn main(&self) -> &[f64] {
        &self.values[..self.values.len() - self.aux_count]
    }

    pub fn aux(&self) -> &[f64] {
        &self.values[self.values.len() - self.aux_count..]
    }
}

impl AsRef<[f64]> for FeatureVector {
    fn as_ref(&self) -> &[f64] {
        &self.values
    }
}

/// Per-feature mean and standard deviation of the auxiliary features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuxScaler {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl AuxScaler {
    /// Leaves raw values unchanged.
    pub fn identity() -> Self {
        Self {
            mean: vec![0.0; AUX_COUNT],
            std: vec![1.0; AUX_COUNT],
        }
    }

    pub fn apply(&self, raw: &[f64]) -> Vec<f64> {
        raw.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }
}

/// Raw auxiliary features: `[chars, words]` for text, `[width, height]` for
/// images.
pub fn raw_aux(sample: &Sample) -> Result<[f64; AUX_COUNT]> {
    match &sample.content {
        Content::Text(t) => {
            if t.is_empty() {
                return Err(Error::EmptyText);
            }
            Ok([t.chars().count() as f64, t.split_whitespace().count() as f64])
        }
        Content::Image(img) => {
            if img.width == 0 || img.height == 0 {
                return Err(Error::EmptyImage);
            }
            Ok([img.width as f64, img.height as f64])
        }
    }
}

/// Population mean and standard deviation (floored at 1e-6) of the raw
/// auxiliary features over the given training samples.
pub fn fit_aux_scaler(train: &[Sample]) -> Result<AuxScaler> {
    if train.len() < 2 {
        return Err(Error::TooFewSamples {
            needed: 2,
            got: train.len(),
        });
    }
    let raws = train.iter().map(raw_aux).collect::<Result<Vec<_>>>()?;
    let n = raws.len() as f64;
    let mut mean = vec![0.0; AUX_COUNT];
    let mut std = vec![0.0; AUX_COUNT];
    for k in 0..AUX_COUNT {
        mean[k] = raws.iter().map(|r| r[k]).sum::<f64>() / n;
        let var = raws.iter().map(|r| (r[k] - mean[k]).powi(2)).sum::<f64>() / n;
        std[k] = var.sqrt().max(STD_FLOOR);
    }
    Ok(AuxScaler { mean, std })
}

/// FNV-1a, 64-bit.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Bucket of a character trigram.
pub fn trigram_bucket(tri: &[char]) -> usize {
    let s: String = tri.iter().collect();
    (fnv1a64(s.as_bytes()) % TEXT_BUCKETS as u64) as usize
}

pub fn featurize_text(sample: &Sample, scaler: &AuxScaler) -> Result<FeatureVector> {
    let Content::Text(text) = &sample.content else {
        return Err(Error::ModalityMismatch(format!("{} is not a text sample", sample.id)));
    };
    let aux = raw_aux(sample)?;
    let mut chars = Vec::with_capacity(text.len() + 2);
    chars.push(BOUNDARY);
    chars.extend(text.chars());
    chars.push(BOUNDARY);

    let mut values = vec![0.0; TEXT_BUCKETS + AUX_COUNT];
    for tri in chars.windows(3) {
        values[trigram_bucket(tri)] += 1.0;
    }
    let n = values[..TEXT_BUCKETS].iter().map(|v| v * v).sum::<f64>().sqrt();
    for v in &mut values[..TEXT_BUCKETS] {
        *v /= n;
    }
    values[TEXT_BUCKETS..].copy_from_slice(&scaler.apply(&aux));
    Ok(FeatureVector {
        values,
        aux_count: AUX_COUNT,
    })
}

/// Area weights mapping `len` source cells onto `THUMB_SIDE` equal bins;
/// `weights[o][p]` is the fraction of bin `o` covered by cell `p`.
fn area_weights(len: usize) -> Vec<Vec<f64>> {
    let bin = len as f64 / THUMB_SIDE as f64;
    (0..THUMB_SIDE)
        .map(|o| {
            let (lo, hi) = (o as f64 * bin, (o + 1) as f64 * bin);
            (0..len)
                .map(|p| {
                    let overlap = (hi.min(p as f64 + 1.0) - lo.max(p as f64)).max(0.0);
                    overlap / bin
                })
                .collect()
        })
        .collect()
}

/// Square canvas of side `max(w, h)` with the image centered and edges
/// replicated into the padding.
fn padded_square(img: &ImageData) -> (usize, Vec<f64>) {
    let side = img.width.max(img.height);
    let ox = (side - img.width) / 2;
    let oy = (side - img.height) / 2;
    let mut out = Vec::with_capacity(side * side);
    for y in 0..side {
        let sy = y.saturating_sub(oy).min(img.height - 1);
        for x in 0..side {
            let sx = x.saturating_sub(ox).min(img.width - 1);
            out.push(f64::from(img.at(sx, sy)) / 255.0);
        }
    }
    (side, out)
}

/// 16x16 area-averaged thumbnail in `[0, 1]`, aspect ratio preserved.
pub fn thumbnail(img: &ImageData) -> Vec<f64> {
    let (side, canvas) = padded_square(img);
    let w = area_weights(side);
    // Reduce columns first, then rows.
    let mut cols = vec![0.0; side * THUMB_SIDE];
    for y in 0..side {
        let row = &canvas[y * side..(y + 1) * side];
        for (o, wo) in w.iter().enumerate() {
            cols[y * THUMB_SIDE + o] = row.iter().zip(wo).map(|(v, k)| v * k).sum();
        }
    }
    let mut out = vec![0.0; THUMB_SIDE * THUMB_SIDE];
    for (oy, wy) in w.iter().enumerate() {
        for ox in 0..THUMB_SIDE {
            out[oy * THUMB_SIDE + ox] = (0..side).map(|y| wy[y] * cols[y * THUMB_SIDE + ox]).sum();
        }
    }
    out
}

/// `[mean, std, row-gradient energy, column-gradient energy]` of the image in
/// `[0, 1]` units. Row-gradient energy is the mean squared difference between
/// vertically adjacent pixels; column-gradient energy uses horizontal
/// neighbours.
pub fn image_stats(img: &ImageData) -> [f64; IMAGE_STATS] {
    let px = |x: usize, y: usize| f64::from(img.at(x, y)) / 255.0;
    let n = (img.width * img.height) as f64;
    let mean = img.pixels.iter().map(|&p| f64::from(p) / 255.0).sum::<f64>() / n;
    let var = img
        .pixels
        .iter()
        .map(|&p| (f64::from(p) / 255.0 - mean).powi(2))
        .sum::<f64>()
        / n;
    let mut row_energy = 0.0;
    if img.height > 1 {
        for y in 0..img.height - 1 {
            for x in 0..img.width {
                row_energy += (px(x, y + 1) - px(x, y)).powi(2);
            }
        }
        row_energy /= ((img.height - 1) * img.width) as f64;
    }
    let mut col_energy = 0.0;
    if img.width > 1 {
        for y in 0..img.height {
            for x in 0..img.width - 1 {
                col_energy += (px(x + 1, y) - px(x, y)).powi(2);
            }
        }
        col_energy /= ((img.width - 1) * img.height) as f64;
    }
    [mean, var.sqrt(), row_energy, col_energy]
}

pub fn featurize_image(sample: &Sample, scaler: &AuxScaler) -> Result<FeatureVector> {
    let Content::Image(img) = &sample.content else {
        return Err(Error::ModalityMismatch(format!("{} is not an image sample", sample.id)));
    };
    let aux = raw_aux(sample)?;
    if img.pixels.len() != img.width * img.height {
        return Err(Error::DimensionMismatch {
            expected: img.width * img.height,
            got: img.pixels.len(),
        });
    }
    let mut values = thumbnail(img);
    values.extend_from_slice(&image_stats(img));
    values.extend(scaler.apply(&aux));
    Ok(FeatureVector {
        values,
        aux_count: AUX_COUNT,
    })
}

/// A modality plus fitted auxiliary scaling: everything needed to turn a
/// sample into embedder input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Featurizer {
    pub modality: Modality,
    pub scaler: AuxScaler,
}

impl Featurizer {
    pub fn new(modality: Modality, scaler: AuxScaler) -> Self {
        Self { modality, scaler }
    }

    /// Fits the auxiliary scaler on `train`, which must be single-modality.
    pub fn fit(train: &[Sample]) -> Result<Self> {
        let modality = train.first().ok_or(Error::EmptyDataset)?.modality();
        if let Some(s) = train.iter().find(|s| s.modality() != modality) {
            return Err(Error::ModalityMismatch(format!("{} differs from the training modality", s.id)));
        }
        Ok(Self::new(modality, fit_aux_scaler(train)?))
    }

    pub fn input_dim(&self) -> usize {
        self.modality.input_dim()
    }

    pub fn featurize(&self, sample: &Sample) -> Result<FeatureVector> {
        if sample.modality() != self.modality {
            return Err(Error::ModalityMismatch(format!(
                "{} is {:?}, featurizer expects {:?}",
                sample.id,
                sample.modality(),
                self.modality
            )));
        }
        match self.modality {
            Modality::Text => featurize_text(sample, &self.scaler),
            Modality::Image => featurize_image(sample, &self.scaler),
        }
    }

    pub fn featurize_all(&self, samples: &[Sample]) -> Result<Vec<FeatureVector>> {
        samples.iter().map(|s| self.featurize(s)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TextAugment {
    pub crop_prob: f64,
    /// Largest fraction cut from each end.
    pub max_crop_frac: f64,
    pub junk_prob: f64,
    pub junk_len: (usize, usize),
    pub junk_alphabet: String,
}

impl Default for TextAugment {
    fn default() -> Self {
        Self {
            crop_prob: 0.5,
            max_crop_frac: 0.2,
            junk_prob: 0.5,
            junk_len: (1, 16),
            junk_alphabet: "abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImageAugment {
    pub hflip_prob: f64,
    pub noise_prob: f64,
    /// Gaussian noise standard deviation range, in intensity units.
    pub noise_sigma: (f64, f64),
    pub quant_prob: f64,
    /// Candidate intensity level counts for the compression surrogate.
    pub quant_levels: Vec<u32>,
    pub brightness_contrast_prob: f64,
    /// Brightness offsets are drawn from `[-brightness, brightness]`.
    pub brightness: f64,
    pub contrast: (f64, f64),
}

impl Default for ImageAugment {
    fn default() -> Self {
        Self {
            hflip_prob: 0.5,
            noise_prob: 0.5,
            noise_sigma: (0.0, 8.0),
            quant_prob: 0.5,
            quant_levels: vec![16, 32, 64],
            brightness_contrast_prob: 0.5,
            brightness: 20.0,
            contrast: (0.8, 1.25),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub text: TextAugment,
    pub image: ImageAugment,
}

fn check_prob(name: &str, p: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::InvalidConfig(format!("{name} must lie in [0, 1], got {p}")));
    }
    Ok(())
}

impl AugmentConfig {
    /// Every augmentation switched off.
    pub fn disabled() -> Self {
        Self {
            text: TextAugment {
                crop_prob: 0.0,
                junk_prob: 0.0,
                ..TextAugment::default()
            },
            image: ImageAugment {
                hflip_prob: 0.0,
                noise_prob: 0.0,
                quant_prob: 0.0,
                brightness_contrast_prob: 0.0,
                ..ImageAugment::default()
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (t, i) = (&self.text, &self.image);
        check_prob("crop_prob", t.crop_prob)?;
        check_prob("max_crop_frac", t.max_crop_frac)?;
        check_prob("junk_prob", t.junk_prob)?;
        check_prob("hflip_prob", i.hflip_prob)?;
        check_prob("noise_prob", i.noise_prob)?;
        check_prob("quant_prob", i.quant_prob)?;
        check_prob("brightness_contrast_prob", i.brightness_contrast_prob)?;
        if t.junk_len.0 == 0 || t.junk_len.0 > t.junk_len.1 || t.junk_alphabet.is_empty() {
            return Err(Error::InvalidConfig("junk length range or alphabet is degenerate".into()));
        }
        if !(i.noise_sigma.0 >= 0.0 && i.noise_sigma.0 <= i.noise_sigma.1) {
            return Err(Error::InvalidConfig("noise_sigma range is degenerate".into()));
        }
        if i.quant_levels.is_empty() || i.quant_levels.iter().any(|&l| l < 2) {
            return Err(Error::InvalidConfig("quant_levels must be non-empty and >= 2".into()));
        }
        if !(i.brightness >= 0.0 && i.contrast.0 > 0.0 && i.contrast.0 <= i.contrast.1) {
            return Err(Error::InvalidConfig("brightness/contrast ranges are degenerate".into()));
        }
        Ok(())
    }
}

/// Random crop of both ends followed by one junk-string insertion, each
/// with its configured probability. At least one original character is kept.
pub fn augment_text(sample: &Sample, cfg: &TextAugment, rng: &mut SeededRng) -> Result<Sample> {
    let Content::Text(text) = &sample.content else {
        return Err(Error::ModalityMismatch(format!("{} is not a text sample", sample.id)));
    };
    let mut chars: Vec<char> = text.chars().collect();
    if chars.is_empty() {
        return Err(Error::EmptyText);
    }
    if rng.bernoulli(cfg.crop_prob) {
        let n = chars.len();
        let mut front = (rng.uniform() * cfg.max_crop_frac * n as f64).floor() as usize;
        let mut back = (rng.uniform() * cfg.max_crop_frac * n as f64).floor() as usize;
        if front + back >= n {
            back = (n - 1).saturating_sub(front);
            front = front.min(n - 1 - back);
        }
        chars = chars[front..n - back].to_vec();
    }
    if rng.bernoulli(cfg.junk_prob) {
        let alphabet: Vec<char> = cfg.junk_alphabet.chars().collect();
        let len = rng.int_inclusive(cfg.junk_len.0, cfg.junk_len.1);
        let junk: Vec<char> = (0..len).map(|_| alphabet[rng.below(alphabet.len())]).collect();
        let at = rng.int_inclusive(0, chars.len());
        chars.splice(at..at, junk);
    }
    Ok(Sample {
        id: sample.id.clone(),
        content: Content::Text(chars.into_iter().collect()),
        label: sample.label.clone(),
    })
}

pub fn hflip(img: &ImageData) -> ImageData {
    let mut pixels = Vec::with_capacity(img.pixels.len());
    for row in img.pixels.chunks_exact(img.width) {
        pixels.extend(row.iter().rev());
    }
    ImageData {
        width: img.width,
        height: img.height,
        pixels,
    }
}

pub fn add_gaussian_noise(img: &ImageData, sigma: f64, rng: &mut SeededRng) -> ImageData {
    let pixels = img
        .pixels
        .iter()
        .map(|&p| (f64::from(p) + sigma * rng.normal()).round().clamp(0.0, 255.0) as u8)
        .collect();
    ImageData {
        pixels,
        ..img.clone()
    }
}

/// Rounds intensities to `levels` evenly spaced values.
pub fn quantize(img: &ImageData, levels: u32) -> ImageData {
    let steps = f64::from(levels.max(2) - 1);
    let pixels = img
        .pixels
        .iter()
        .map(|&p| ((f64::from(p) / 255.0 * steps).round() * 255.0 / steps).round() as u8)
        .collect();
    ImageData {
        pixels,
        ..img.clone()
    }
}

pub fn brightness_contrast(img: &ImageData, shift: f64, scale: f64) -> ImageData {
    let pixels = img
        .pixels
        .iter()
        .map(|&p| ((f64::from(p) - 128.0) * scale + 128.0 + shift).round().clamp(0.0, 255.0) as u8)
        .collect();
    ImageData {
        pixels,
        ..img.clone()
    }
}

pub fn augment_image(sample: &Sample, cfg: &ImageAugment, rng: &mut SeededRng) -> Result<Sample> {
    let Content::Image(img) = &sample.content else {
        return Err(Error::ModalityMismatch(format!("{} is not an image sample", sample.id)));
    };
    let mut img = img.clone();
    if rng.bernoulli(cfg.hflip_prob) {
        img = hflip(&img);
    }
    if rng.bernoulli(cfg.noise_prob) {
        let sigma = rng.uniform_range(cfg.noise_sigma.0, cfg.noise_sigma.1);
        img = add_gaussian_noise(&img, sigma, rng);
    }
    if rng.bernoulli(cfg.quant_prob) && !cfg.quant_levels.is_empty() {
        let levels = cfg.quant_levels[rng.below(cfg.quant_levels.len())];
        img = quantize(&img, levels);
    }
    if rng.bernoulli(cfg.brightness_contrast_prob) {
        let scale = rng.uniform_range(cfg.contrast.0, cfg.contrast.1);
        let shift = rng.uniform_range(-cfg.brightness, cfg.brightness);
        img = brightness_contrast(&img, shift, scale);
    }
    Ok(Sample {
        id: sample.id.clone(),
        content: Content::Image(img),
        label: sample.label.clone(),
    })
}

/// Dispatches on the sample's modality.
pub fn augment(sample: &Sample, cfg: &AugmentConfig, rng: &mut SeededRng) -> Result<Sample> {
    match sample.modality() {
        Modality::Text => augment_text(sample, &cfg.text, rng),
        Modality::Image => augment_image(sample, &cfg.image, rng),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    fn txt(s: &str) -> Sample {
        Sample::text("t", s, None)
    }

    fn img(w: usize, h: usize, pixels: Vec<u8>) -> Sample {
        Sample::image("i", ImageData::new(w, h, pixels).unwrap(), None)
    }

    fn random_image(w: usize, h: usize, seed: u64) -> ImageData {
        let mut rng = SeededRng::new(seed);
        ImageData::new(w, h, (0..w * h).map(|_| rng.below(256) as u8).collect()).unwrap()
    }

    #[test]
    fn text_aux_counts() {
        assert_eq!(raw_aux(&txt("ab")).unwrap(), [2.0, 1.0]);
        assert_eq!(raw_aux(&txt("two  words\n")).unwrap(), [11.0, 2.0]);
        assert!(matches!(raw_aux(&txt("")), Err(Error::EmptyText)));
    }

    #[test]
    fn repeated_char_trigrams_match_enumeration() {
        let f = featurize_text(&txt("aaaa"), &AuxScaler::identity()).unwrap();
        // independent enumeration of the padded trigrams
        let b = BOUNDARY;
        let grams = [[b, 'a', 'a'], ['a', 'a', 'a'], ['a', 'a', 'a'], ['a', 'a', b]];
        let mut counts: BTreeMap<usize, f64> = BTreeMap::new();
        for g in grams {
            let s: String = g.iter().collect();
            let h = s.bytes().fold(0xcbf29ce484222325u64, |h, x| (h ^ x as u64).wrapping_mul(0x100000001b3));
            *counts.entry((h % 4096) as usize).or_default() += 1.0;
        }
        let n = counts.values().map(|c| c * c).sum::<f64>().sqrt();
        let main = f.main();
        for (i, v) in main.iter().enumerate() {
            let want = counts.get(&i).copied().unwrap_or(0.0) / n;
            assert!((v - want).abs() < 1e-15, "bucket {i}");
        }
        assert!((main.iter().map(|v| v * v).sum::<f64>().sqrt() - 1.0).abs() < 1e-12);
        assert_eq!(f.aux(), &[4.0, 1.0]);
        assert_eq!(main.iter().filter(|v| **v != 0.0).count(), counts.len());
    }

    #[test]
    fn fnv_reference_vectors() {
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x85944171f73967e8);
    }

    #[test]
    fn text_featurization_is_pure() {
        let a = featurize_text(&txt("hello there"), &AuxScaler::identity()).unwrap();
        let b = featurize_text(&txt("hello there"), &AuxScaler::identity()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.values.len(), Modality::Text.input_dim());
    }

    #[test]
    fn constant_image_features() {
        let f = featurize_image(&img(2, 2, vec![128; 4]), &AuxScaler::identity()).unwrap();
        let thumb = &f.values[..THUMB_SIDE * THUMB_SIDE];
        assert!(thumb.iter().all(|v| (v - 128.0 / 255.0).abs() < 1e-12));
        let stats = &f.values[THUMB_SIDE * THUMB_SIDE..IMAGE_MAIN_DIM];
        assert!((stats[0] - 128.0 / 255.0).abs() < 1e-12);
        assert_eq!(&stats[1..], &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn image_aux_is_dimensions() {
        let s = img(640, 480, vec![0; 640 * 480]);
        assert_eq!(raw_aux(&s).unwrap(), [640.0, 480.0]);
        assert!(ImageData::new(0, 4, vec![]).is_err());
        assert!(ImageData::new(2, 2, vec![0; 3]).is_err());
    }

    /// Supersampling oracle: blow every canvas pixel up into a 16x16 block,
    /// so each thumbnail cell is an exact `side x side` block average.
    fn thumbnail_oracle(im: &ImageData) -> Vec<f64> {
        let side = im.width.max(im.height);
        let (ox, oy) = ((side - im.width) / 2, (side - im.height) / 2);
        let canvas = |x: usize, y: usize| {
            let sx = if x < ox { 0 } else { (x - ox).min(im.width - 1) };
            let sy = if y < oy { 0 } else { (y - oy).min(im.height - 1) };
            im.pixels[sy * im.width + sx] as f64 / 255.0
        };
        let mut out = vec![0.0; 256];
        for cy in 0..16 {
            for cx in 0..16 {
                let mut acc = 0.0;
                for yy in cy * side..(cy + 1) * side {
                    for xx in cx * side..(cx + 1) * side {
                        acc += canvas(xx / 16, yy / 16);
                    }
                }
                out[cy * 16 + cx] = acc / (side * side) as f64;
            }
        }
        out
    }

    #[test]
    fn thumbnail_matches_supersampling_oracle() {
        for (w, h, seed) in [(32, 32, 1), (20, 13, 2), (7, 30, 3), (1, 1, 4), (17, 16, 5)] {
            let im = random_image(w, h, seed);
            let got = thumbnail(&im);
            let want = thumbnail_oracle(&im);
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).abs() < 1e-12, "{w}x{h}");
            }
        }
    }

    #[test]
    fn scaler_two_point_and_degenerate() {
        let a = Sample::image("a", ImageData::new(1, 3, vec![0; 3]).unwrap(), None);
        let b = Sample::image("b", ImageData::new(3, 3, vec![0; 9]).unwrap(), None);
        let sc = fit_aux_scaler(&[a.clone(), b]).unwrap();
        assert_eq!(sc.mean, vec![2.0, 3.0]);
        assert_eq!(sc.std[0], 1.0);
        assert_eq!(sc.std[1], 1e-6);
        let f = featurize_image(&a, &sc).unwrap();
        assert_eq!(f.aux(), &[-1.0, 0.0]);
        assert!(matches!(fit_aux_scaler(&[a]), Err(Error::TooFewSamples { .. })));
    }

    #[test]
    fn scaler_centers_its_training_set() {
        let mut rng = SeededRng::new(3);
        let samples: Vec<Sample> = (0..50)
            .map(|i| {
                let len = 1 + rng.below(60);
                let t: String = (0..len).map(|_| if rng.bernoulli(0.2) { ' ' } else { 'x' }).collect();
                Sample::text(format!("s{i}"), format!("a{t}"), None)
            })
            .collect();
        let fz = Featurizer::fit(&samples).unwrap();
        let feats = fz.featurize_all(&samples).unwrap();
        for k in 0..AUX_COUNT {
            let mean = feats.iter().map(|f| f.aux()[k]).sum::<f64>() / feats.len() as f64;
            assert!(mean.abs() < 1e-9);
        }
    }

    #[test]
    fn disabled_augmentation_is_identity() {
        let cfg = AugmentConfig::disabled();
        let mut rng = SeededRng::new(1);
        let t = txt("some text here");
        assert_eq!(augment(&t, &cfg, &mut rng).unwrap(), t);
        let i = Sample::image("i", random_image(9, 5, 1), None);
        assert_eq!(augment(&i, &cfg, &mut rng).unwrap(), i);
    }

    #[test]
    fn junk_only_grows_text() {
        let cfg = TextAugment {
            crop_prob: 0.0,
            junk_prob: 1.0,
            ..TextAugment::default()
        };
        let mut rng = SeededRng::new(2);
        for _ in 0..50 {
            let out = augment_text(&txt("abc def"), &cfg, &mut rng).unwrap();
            let Content::Text(s) = out.content else { unreachable!() };
            assert!(s.chars().count() > 7 && s.chars().count() <= 7 + 16);
        }
    }

    #[test]
    fn cropping_keeps_a_character() {
        let cfg = TextAugment {
            crop_prob: 1.0,
            max_crop_frac: 1.0,
            junk_prob: 0.0,
            ..TextAugment::default()
        };
        let mut rng = SeededRng::new(3);
        for len in 1..30 {
            let s: String = "x".repeat(len);
            let out = augment_text(&txt(&s), &cfg, &mut rng).unwrap();
            let Content::Text(s) = out.content else { unreachable!() };
            assert!(!s.is_empty());
        }
    }

    #[test]
    fn augmentation_is_seeded() {
        let cfg = AugmentConfig::default();
        let t = txt("the quick brown fox jumps over the lazy dog");
        let a = augment(&t, &cfg, &mut SeededRng::new(11)).unwrap();
        let b = augment(&t, &cfg, &mut SeededRng::new(11)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn image_augment_keeps_shape_and_flip_is_involution() {
        let im = random_image(11, 6, 7);
        assert_eq!(hflip(&hflip(&im)), im);
        assert_eq!(hflip(&im).at(0, 2), im.at(10, 2));
        assert_eq!(add_gaussian_noise(&im, 0.0, &mut SeededRng::new(0)), im);
        let mut rng = SeededRng::new(8);
        let s = Sample::image("x", im.clone(), Some("l".into()));
        for _ in 0..20 {
            let out = augment_image(&s, &ImageAugment::default(), &mut rng).unwrap();
            let Content::Image(o) = &out.content else { unreachable!() };
            assert_eq!((o.width, o.height), (11, 6));
            assert_eq!(out.label, s.label);
        }
    }

    #[test]
    fn quantization_levels() {
        let im = ImageData::new(256, 1, (0..=255).collect()).unwrap();
        let q = quantize(&im, 16);
        let mut distinct = q.pixels.clone();
        distinct.dedup();
        assert_eq!(distinct.len(), 16);
        assert_eq!(q.pixels[0], 0);
        assert_eq!(q.pixels[255], 255);
    }

    #[test]
    fn noise_moves_thumbnail_boundedly() {
        // 32x32 images: each thumbnail cell averages a 2x2 block.
        let mut rng = SeededRng::new(21);
        let (mut within, mut total) = (0usize, 0usize);
        for trial in 0..40 {
            let im = random_image(32, 32, 100 + trial);
            let sigma = rng.uniform_range(0.0, 8.0);
            let noisy = add_gaussian_noise(&im, sigma, &mut rng);
            let bound = 8.0 / 255.0 + 3.0 * sigma / (255.0 * 2.0);
            for (a, b) in thumbnail(&im).iter().zip(thumbnail(&noisy)) {
                total += 1;
                within += usize::from((a - b).abs() <= bound);
            }
        }
        assert!(within as f64 >= 0.99 * total as f64, "{within}/{total}");
    }

    #[test]
    fn modality_mismatch_rejected() {
        let fz = Featurizer::new(Modality::Image, AuxScaler::identity());
        assert!(matches!(fz.featurize(&txt("x")), Err(Error::ModalityMismatch(_))));
    }
}
