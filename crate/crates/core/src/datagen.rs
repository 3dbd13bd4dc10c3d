//! Synthetic "generator fingerprint" datasets. Text classes are Markov
//! chains over a 64-symbol alphabet whose AI variants shift the human
//! transition logits by a trace common to all generators plus a per-class
//! style; image classes are smoothed noise fields carrying a class-specific
//! periodic artifact. `separation` scales every shift.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::featurizer::{augment, AugmentConfig, ImageData, Modality, Sample};
use crate::numeric::{derive_seed, stable_softmax, Matrix, SeededRng};
use crate::pipeline::DatasetSplit;

pub const ALPHABET: &str = "abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789 .";
pub const TEXT_LEN: (usize, usize) = (80, 400);
pub const IMAGE_SIDE: usize = 32;
/// Coarse grid of the smoothed noise field, upsampled bilinearly.
const FIELD_GRID: usize = 5;
const FIELD_AMPLITUDE: f64 = 80.0;
const PIXEL_JITTER: f64 = 8.0;
/// Artifact amplitude at separation 1.
const ARTIFACT_AMPLITUDE: f64 = 24.0;
const MAX_FREQUENCY: usize = 8;
/// Spread of the human (base) transition logits.
const BASE_TEMPERATURE: f64 = 1.5;
/// Logit shift shared by every AI class at separation 1.
const COMMON_WEIGHT: f64 = 4.0;
/// Per-class style shift at separation 1. Classes come in pairs that push
/// the same style axis in opposite directions.
const STYLE_WEIGHT: f64 = 1.0;

pub const HUMAN_LABEL: &str = "human";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub modality: Modality,
    /// Defaults to 6 for text and 5 for images.
    pub num_ai_classes: Option<usize>,
    pub per_class_train: usize,
    pub per_class_test: usize,
    pub pool_size: usize,
    pub separation: f64,
    pub seed: u64,
    /// Pass pool draws through the augmentations too.
    pub augment_pool: bool,
    pub augment: AugmentConfig,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            modality: Modality::Text,
            num_ai_classes: None,
            per_class_train: 500,
            per_class_test: 100,
            pool_size: 1000,
            separation: 0.5,
            seed: 42,
            augment_pool: false,
            augment: AugmentConfig::default(),
        }
    }
}

impl SyntheticSpec {
    /// The frozen reference text dataset used for end-to-end checks.
    pub fn reference() -> Self {
        Self::default()
    }

    pub fn ai_classes(&self) -> usize {
        self.num_ai_classes.unwrap_or(match self.modality {
            Modality::Text => 6,
            Modality::Image => 5,
        })
    }

    pub fn class_names(&self) -> Vec<String> {
        std::iter::once(HUMAN_LABEL.to_owned())
            .chain((1..=self.ai_classes()).map(|i| format!("ai{i}")))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.ai_classes() == 0 || self.per_class_train == 0 || self.per_class_test == 0 || self.pool_size == 0 {
            return Err(Error::InvalidConfig("class and sample counts must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.separation) {
            return Err(Error::InvalidConfig(format!(
                "separation must lie in [0, 1], got {}",
                self.separation
            )));
        }
        self.augment.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PeriodicArtifact {
    pub fx: usize,
    pub fy: usize,
    pub phase: f64,
    pub amplitude: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum GeneratorProfile {
    /// Row-stochastic 64 x 64 transition matrix over [`ALPHABET`].
    Text { transition: Matrix },
    Image { artifact: Option<PeriodicArtifact> },
}

impl GeneratorProfile {
    pub fn sample(&self, rng: &mut SeededRng) -> crate::featurizer::Content {
        use crate::featurizer::Content;
        match self {
            Self::Text { transition } => Content::Text(sample_text(transition, rng)),
            Self::Image { artifact } => Content::Image(sample_image(artifact.as_ref(), rng)),
        }
    }
}

fn alphabet() -> Vec<char> {
    ALPHABET.chars().collect()
}

/// Row-wise softmax of `base + shift` logits.
fn text_profile(base: &[f64], shift: Option<&[f64]>) -> GeneratorProfile {
    let n = ALPHABET.len();
    let mut m = Matrix::zeros(n, n);
    for r in 0..n {
        let row: Vec<f64> = (r * n..(r + 1) * n)
            .map(|j| base[j] + shift.map_or(0.0, |s| s[j]))
            .collect();
        m.row_mut(r).copy_from_slice(&stable_softmax(&row));
    }
    GeneratorProfile::Text { transition: m }
}

const PROFILE_TAG: u64 = 0x5052_4F46_0000;
const SPLIT_TAGS: [u64; 4] = [0x1000, 0x2000, 0x3000, 0x4000];

/// Human profile first, then one per AI class.
pub fn build_profiles(spec: &SyntheticSpec) -> Result<Vec<GeneratorProfile>> {
    spec.validate()?;
    let delta = spec.separation;
    let mut base_rng = SeededRng::new(derive_seed(spec.seed, PROFILE_TAG));
    let profiles = match spec.modality {
        Modality::Text => {
            let n = ALPHABET.len();
            let cells = n * n;
            let mut gaussian = |scale: f64| -> Vec<f64> { (0..cells).map(|_| scale * base_rng.normal()).collect() };
            let base = gaussian(BASE_TEMPERATURE);
            let common = gaussian(COMMON_WEIGHT);
            let axes: Vec<Vec<f64>> = (0..spec.ai_classes().div_ceil(2)).map(|_| gaussian(STYLE_WEIGHT)).collect();
            let mut out = Vec::with_capacity(spec.ai_classes() + 1);
            out.push(text_profile(&base, None));
            for i in 0..spec.ai_classes() {
                let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
                let shift: Vec<f64> = common
                    .iter()
                    .zip(&axes[i / 2])
                    .map(|(c, a)| delta * (c + sign * a))
                    .collect();
                out.push(text_profile(&base, Some(&shift)));
            }
            out
        }
        Modality::Image => {
            let mut out = vec![GeneratorProfile::Image { artifact: None }];
            // distinct frequency pairs, drawn without replacement
            let mut pairs: Vec<(usize, usize)> = (1..=MAX_FREQUENCY)
                .flat_map(|fx| (1..=MAX_FREQUENCY).map(move |fy| (fx, fy)))
                .collect();
            base_rng.shuffle(&mut pairs);
            if spec.ai_classes() > pairs.len() {
                return Err(Error::InvalidConfig(format!(
                    "at most {} image classes are supported",
                    pairs.len()
                )));
            }
            for (i, &(fx, fy)) in pairs.iter().take(spec.ai_classes()).enumerate() {
                let mut rng = SeededRng::new(derive_seed(spec.seed, PROFILE_TAG + 1 + i as u64));
                let phase = rng.uniform_range(0.0, std::f64::consts::TAU);
                out.push(GeneratorProfile::Image {
                    artifact: (delta > 0.0).then_some(PeriodicArtifact {
                        fx,
                        fy,
                        phase,
                        amplitude: delta * ARTIFACT_AMPLITUDE,
                    }),
                });
            }
            out
        }
    };
    Ok(profiles)
}

fn sample_text(transition: &Matrix, rng: &mut SeededRng) -> String {
    let symbols = alphabet();
    let len = rng.int_inclusive(TEXT_LEN.0, TEXT_LEN.1);
    let mut state = rng.below(symbols.len());
    let mut out = String::with_capacity(len);
    out.push(symbols[state]);
    for _ in 1..len {
        let row = transition.row(state);
        let u = rng.uniform();
        let mut acc = 0.0;
        // falls back to the last symbol if rounding leaves u above the total
        let mut next = row.len() - 1;
        for (j, p) in row.iter().enumerate() {
            acc += p;
            if u < acc {
                next = j;
                break;
            }
        }
        state = next;
        out.push(symbols[state]);
    }
    out
}

fn sample_image(artifact: Option<&PeriodicArtifact>, rng: &mut SeededRng) -> ImageData {
    let g = FIELD_GRID;
    let grid: Vec<f64> = (0..g * g).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
    let n = IMAGE_SIDE;
    let scale = (g - 1) as f64 / (n - 1) as f64;
    let mut pixels = Vec::with_capacity(n * n);
    for y in 0..n {
        let gy = y as f64 * scale;
        let (y0, ty) = (gy.floor().min((g - 2) as f64) as usize, gy - gy.floor().min((g - 2) as f64));
        for x in 0..n {
            let gx = x as f64 * scale;
            let (x0, tx) = (gx.floor().min((g - 2) as f64) as usize, gx - gx.floor().min((g - 2) as f64));
            let at = |r: usize, c: usize| grid[r * g + c];
            let field = (1.0 - ty) * ((1.0 - tx) * at(y0, x0) + tx * at(y0, x0 + 1))
                + ty * ((1.0 - tx) * at(y0 + 1, x0) + tx * at(y0 + 1, x0 + 1));
            let mut v = 128.0 + FIELD_AMPLITUDE * field + rng.uniform_range(-PIXEL_JITTER, PIXEL_JITTER);
            if let Some(a) = artifact {
                let arg = std::f64::consts::TAU * (a.fx * x + a.fy * y) as f64 / n as f64 + a.phase;
                v += a.amplitude * arg.cos();
            }
            // 128 +- (80 + 8 + 24) never leaves [0, 255]; clamp guards rounding only
            pixels.push(v.round().clamp(0.0, 255.0) as u8);
        }
    }
    ImageData::new(n, n, pixels).expect("fixed image shape")
}

fn draw_class(
    profile: &GeneratorProfile,
    label: &str,
    prefix: &str,
    count: usize,
    rng: &mut SeededRng,
) -> Vec<Sample> {
    (0..count)
        .map(|i| Sample {
            id: format!("{prefix}-{label}-{i:05}"),
            content: profile.sample(rng),
            label: Some(label.to_owned()),
        })
        .collect()
}

/// Deterministic split: class-major, index-minor train and test sets, an
/// augmented copy-like test set from fresh draws, and a shuffled pool whose
/// labels are hidden.
pub fn generate_split(spec: &SyntheticSpec) -> Result<DatasetSplit> {
    let profiles = build_profiles(spec)?;
    let names = spec.class_names();
    let rng_for = |split: usize, class: usize| SeededRng::new(derive_seed(spec.seed, SPLIT_TAGS[split] + class as u64));

    let mut train = Vec::new();
    let mut test = Vec::new();
    let mut test_aug = Vec::new();
    for (c, (profile, name)) in profiles.iter().zip(&names).enumerate() {
        train.extend(draw_class(profile, name, "train", spec.per_class_train, &mut rng_for(0, c)));
        test.extend(draw_class(profile, name, "test1", spec.per_class_test, &mut rng_for(1, c)));
        let mut rng = rng_for(2, c);
        for s in draw_class(profile, name, "test2", spec.per_class_test, &mut rng) {
            test_aug.push(augment(&s, &spec.augment, &mut rng)?);
        }
    }

    let mut rng = rng_for(3, 0);
    let mut pool = Vec::with_capacity(spec.pool_size);
    let mut truth = Vec::with_capacity(spec.pool_size);
    let mut order: Vec<usize> = (0..spec.pool_size).map(|i| i % profiles.len()).collect();
    rng.shuffle(&mut order);
    for (i, &c) in order.iter().enumerate() {
        let mut s = Sample {
            id: format!("pool-{i:05}"),
            content: profiles[c].sample(&mut rng),
            label: None,
        };
        if spec.augment_pool {
            s = augment(&s, &spec.augment, &mut rng)?;
        }
        pool.push(s);
        truth.push(names[c].clone());
    }
    Ok(DatasetSplit::new(train, test, test_aug, pool).with_pool_truth(truth))
}
