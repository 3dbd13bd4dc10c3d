//! The three stages: training (with per-epoch pseudo-labelling), new-label
//! adaptation, and inference; plus Task A / Task B scoring and the
//! leave-classes-out experiment.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::codec::{put_f64s, put_u32, write_atomic, Reader};
use crate::embedder::{
    self, embed_all, init_params, train_epoch, AdamState, EmbedderConfig, EmbedderParams, EpochStats, Example,
    TrainConfig,
};
use crate::error::{Error, Result};
use crate::featurizer::{AuxScaler, FeatureVector, Featurizer, Modality, Sample, AUX_COUNT};
use crate::losses::{inference_confidence, LossConfig};
use crate::numeric::{derive_seed, l2_normalize, SeededRng};
use crate::store::{ceil_fraction, HashStore, StoreConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub loss: LossConfig,
    pub embedder: EmbedderConfig,
    pub train: TrainConfig,
    /// Fraction of pool predictions adopted per predicted label each epoch.
    pub p_pseudo: f64,
    pub prune_retention: f64,
    pub store: StoreConfig,
    pub human_label_name: String,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            loss: LossConfig::default(),
            embedder: EmbedderConfig::default(),
            train: TrainConfig::default(),
            p_pseudo: 0.05,
            prune_retention: 1.0,
            store: StoreConfig::default(),
            human_label_name: "human".into(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        self.train.validate()?;
        if !(0.0..=1.0).contains(&self.p_pseudo) {
            return Err(Error::InvalidConfig(format!("p_pseudo must lie in [0, 1], got {}", self.p_pseudo)));
        }
        if !(self.prune_retention > 0.0 && self.prune_retention <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "prune_retention must lie in (0, 1], got {}",
                self.prune_retention
            )));
        }
        if self.store.k == 0 {
            return Err(Error::InvalidConfig("store.k must be >= 1".into()));
        }
        if self.human_label_name.is_empty() {
            return Err(Error::InvalidConfig("human_label_name must be non-empty".into()));
        }
        Ok(())
    }
}

/// Labelled train data, clean and augmented test sets, and an unlabelled
/// pool.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DatasetSplit {
    pub train_labeled: Vec<Sample>,
    pub test_clean: Vec<Sample>,
    pub test_augmented: Vec<Sample>,
    pub unlabeled_pool: Vec<Sample>,
    /// Ground truth for the pool, kept apart from the samples. Only
    /// evaluation code may look at it; training never does.
    pool_truth: Option<Vec<String>>,
}

impl DatasetSplit {
    pub fn new(
        train_labeled: Vec<Sample>,
        test_clean: Vec<Sample>,
        test_augmented: Vec<Sample>,
        unlabeled_pool: Vec<Sample>,
    ) -> Self {
        Self {
            train_labeled,
            test_clean,
            test_augmented,
            unlabeled_pool,
            pool_truth: None,
        }
    }

    pub(crate) fn with_pool_truth(mut self, truth: Vec<String>) -> Self {
        self.pool_truth = Some(truth);
        self
    }

    /// Hidden pool labels, for oracle evaluation only.
    pub fn pool_truth_for_evaluation(&self) -> Option<&[String]> {
        self.pool_truth.as_deref()
    }

    /// Checks id uniqueness across splits and that train/test samples carry
    /// labels.
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        let all = self
            .train_labeled
            .iter()
            .chain(&self.test_clean)
            .chain(&self.test_augmented)
            .chain(&self.unlabeled_pool);
        for s in all {
            if !seen.insert(s.id.as_str()) {
                return Err(Error::InvalidConfig(format!("sample id {:?} appears more than once", s.id)));
            }
        }
        for s in self.train_labeled.iter().chain(&self.test_clean).chain(&self.test_augmented) {
            if s.label.is_none() {
                return Err(Error::InvalidConfig(format!("sample {:?} has no label", s.id)));
            }
        }
        Ok(())
    }

    /// Training labels in order of first appearance.
    pub fn train_label_names(&self) -> Vec<String> {
        label_order(&self.train_labeled)
    }
}

fn label_order(samples: &[Sample]) -> Vec<String> {
    let mut seen = HashSet::new();
    samples
        .iter()
        .filter_map(|s| s.label.as_deref())
        .filter(|l| seen.insert(*l))
        .map(str::to_owned)
        .collect()
}

fn truth_labels(samples: &[Sample]) -> Result<Vec<String>> {
    samples
        .iter()
        .map(|s| {
            s.label
                .clone()
                .ok_or_else(|| Error::InvalidConfig(format!("sample {:?} has no label", s.id)))
        })
        .collect()
}

/// Anything that maps samples to digests the store can hold.
pub trait DigestModel {
    fn digest_dim(&self) -> usize;
    fn digests(&self, samples: &[Sample]) -> Result<Vec<Vec<f64>>>;
}

/// The trained embedder together with the featurizer it was trained on.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub featurizer: Featurizer,
    pub params: EmbedderParams,
}

const FEATURIZER_TAG: &[u8; 4] = b"FEAT";

impl TrainedModel {
    /// EMB1 parameters followed by a `FEAT` section: u32 modality
    /// (0 text, 1 image), u32 aux count, aux means f64, aux stds f64.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = self.params.to_bytes();
        out.extend_from_slice(FEATURIZER_TAG);
        put_u32(
            &mut out,
            match self.featurizer.modality {
                Modality::Text => 0,
                Modality::Image => 1,
            },
        );
        put_u32(&mut out, self.featurizer.scaler.mean.len() as u32);
        put_f64s(&mut out, &self.featurizer.scaler.mean);
        put_f64s(&mut out, &self.featurizer.scaler.std);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        let params = EmbedderParams::read_from(&mut r)?;
        r.expect_magic(FEATURIZER_TAG)?;
        let modality = match r.u32()? {
            0 => Modality::Text,
            1 => Modality::Image,
            m => return Err(Error::Format(format!("unknown modality code {m}"))),
        };
        let aux = r.u32()? as usize;
        if aux != AUX_COUNT {
            return Err(Error::Format(format!("expected {AUX_COUNT} aux features, found {aux}")));
        }
        let mean = r.f64_vec(aux)?;
        let std = r.f64_vec(aux)?;
        if r.remaining() != 0 {
            return Err(Error::Format(format!("{} trailing bytes in model file", r.remaining())));
        }
        if mean.iter().chain(&std).any(|v| !v.is_finite()) || std.iter().any(|s| *s <= 0.0) {
            return Err(Error::Format("invalid aux scaler".into()));
        }
        if params.input_dim() != modality.input_dim() {
            return Err(Error::Format(format!(
                "network input {} does not match {:?} features ({})",
                params.input_dim(),
                modality,
                modality.input_dim()
            )));
        }
        Ok(Self {
            featurizer: Featurizer::new(modality, AuxScaler { mean, std }),
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

impl DigestModel for TrainedModel {
    fn digest_dim(&self) -> usize {
        self.params.emb_dim()
    }

    fn digests(&self, samples: &[Sample]) -> Result<Vec<Vec<f64>>> {
        let feats = self.featurizer.featurize_all(samples)?;
        embed_all(&self.params, &feats)
    }
}

/// Untrained baseline: normalized featurizer output used directly as digest.
impl DigestModel for Featurizer {
    fn digest_dim(&self) -> usize {
        self.input_dim()
    }

    fn digests(&self, samples: &[Sample]) -> Result<Vec<Vec<f64>>> {
        samples
            .iter()
            .map(|s| l2_normalize(&self.featurize(s)?.values))
            .collect()
    }
}

/// One pool sample's head prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolPrediction {
    /// Position in the pool.
    pub index: usize,
    pub id: String,
    pub label: usize,
    pub confidence: f64,
}

/// For each predicted label with `n` pool predictions, keeps the
/// `ceil(p * n)` most confident (ties by ascending id). Output is grouped by
/// label id, most confident first.
pub fn select_pseudo(predictions: &[PoolPrediction], p: f64) -> Vec<PoolPrediction> {
    let mut by_label: BTreeMap<usize, Vec<&PoolPrediction>> = BTreeMap::new();
    for pred in predictions {
        by_label.entry(pred.label).or_default().push(pred);
    }
    let mut out = Vec::new();
    for (_, mut group) in by_label {
        let quota = ceil_fraction(p.clamp(0.0, 1.0), group.len()).min(group.len());
        group.sort_by(|a, b| b.confidence.total_cmp(&a.confidence).then_with(|| a.id.cmp(&b.id)));
        out.extend(group.into_iter().take(quota).cloned());
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub accuracy: f64,
    pub steps: usize,
    /// Pseudo-labelled samples mixed into this epoch.
    pub pseudo_count: usize,
}

#[derive(Debug, Clone)]
pub struct TrainingOutcome {
    pub model: TrainedModel,
    pub store: HashStore,
    pub epochs: Vec<EpochLog>,
    /// Class order of the training head (same as the store's label table).
    pub labels: Vec<String>,
}

/// Training stage: per epoch, train on labelled plus current pseudo set,
/// predict the pool with the class head, reselect pseudo labels. Afterwards
/// embed the labelled set into a fresh store and prune it.
pub fn run_training_stage(data: &DatasetSplit, cfg: &PipelineConfig) -> Result<TrainingOutcome> {
    run_training_stage_with(data, cfg, |_| {})
}

/// As [`run_training_stage`], reporting each finished epoch to `on_epoch`.
pub fn run_training_stage_with(
    data: &DatasetSplit,
    cfg: &PipelineConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainingOutcome> {
    cfg.validate()?;
    let train = &data.train_labeled;
    if train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let labels = label_order(train);
    if labels.len() < 2 {
        return Err(Error::TooFewClasses(labels.len()));
    }
    let label_index: HashMap<&str, usize> = labels.iter().enumerate().map(|(i, l)| (l.as_str(), i)).collect();
    let y: Vec<usize> = train
        .iter()
        .map(|s| {
            s.label
                .as_deref()
                .map(|l| label_index[l])
                .ok_or_else(|| Error::InvalidConfig(format!("training sample {:?} has no label", s.id)))
        })
        .collect::<Result<_>>()?;

    let featurizer = Featurizer::fit(train)?;
    let train_x = featurizer.featurize_all(train)?;
    let use_pool = cfg.p_pseudo > 0.0 && !data.unlabeled_pool.is_empty();
    let pool_x: Vec<FeatureVector> = if use_pool {
        featurizer.featurize_all(&data.unlabeled_pool)?
    } else {
        Vec::new()
    };

    let emb_cfg = EmbedderConfig {
        input_dim: featurizer.input_dim(),
        ..cfg.embedder.clone()
    };
    let mut params = init_params(&emb_cfg, labels.len())?;
    let mut adam = AdamState::new(&params, cfg.train.learning_rate);
    let labeled: Vec<Example<'_>> = train_x
        .iter()
        .zip(&y)
        .map(|(x, &label)| Example {
            features: &x.values,
            label,
        })
        .collect();

    let mut pseudo: Vec<PoolPrediction> = Vec::new();
    let mut log = Vec::with_capacity(cfg.train.epochs);
    let mut best_loss = f64::INFINITY;
    let mut stale = 0usize;
    for epoch in 0..cfg.train.epochs {
        let pseudo_examples: Vec<Example<'_>> = pseudo
            .iter()
            .map(|p| Example {
                features: &pool_x[p.index].values,
                label: p.label,
            })
            .collect();
        let stats: EpochStats = train_epoch(
            &mut params,
            &mut adam,
            &labeled,
            &pseudo_examples,
            &cfg.loss,
            &cfg.train,
            epoch,
        )?;
        let entry = EpochLog {
            epoch,
            mean_loss: stats.mean_loss,
            accuracy: stats.accuracy,
            steps: stats.steps,
            pseudo_count: pseudo_examples.len(),
        };
        on_epoch(&entry);
        log.push(entry);

        if stats.mean_loss < best_loss {
            best_loss = stats.mean_loss;
            stale = 0;
        } else {
            stale += 1;
        }
        let stop = cfg.train.patience.is_some_and(|p| stale >= p);
        if stop || epoch + 1 == cfg.train.epochs {
            break;
        }
        if use_pool {
            let preds = predict_pool(&params, &pool_x, &data.unlabeled_pool, &cfg.loss)?;
            pseudo = select_pseudo(&preds, cfg.p_pseudo);
        }
    }

    let model = TrainedModel { featurizer, params };
    let digests = embed_all(&model.params, &train_x)?;
    let mut store = HashStore::new(model.params.emb_dim())?;
    for (d, &l) in digests.iter().zip(&y) {
        store.add_entry(&labels[l], d)?;
    }
    if cfg.prune_retention < 1.0 {
        store = store.prune(cfg.prune_retention)?;
    }
    Ok(TrainingOutcome {
        model,
        store,
        epochs: log,
        labels,
    })
}

fn predict_pool(
    params: &EmbedderParams,
    pool_x: &[FeatureVector],
    pool: &[Sample],
    loss: &LossConfig,
) -> Result<Vec<PoolPrediction>> {
    pool_x
        .iter()
        .zip(pool)
        .enumerate()
        .map(|(index, (x, s))| {
            let emb = embedder::forward(params, &x.values)?;
            let (label, probs) = inference_confidence(&params.head, &emb, loss)?;
            Ok(PoolPrediction {
                index,
                id: s.id.clone(),
                label,
                confidence: probs[label],
            })
        })
        .collect()
}

/// Adds `class_name` to the store from the digests of `samples`. The model
/// is only read.
pub fn run_adaptation_stage<M: DigestModel>(
    model: &M,
    store: &mut HashStore,
    class_name: &str,
    samples: &[Sample],
) -> Result<usize> {
    if store.label_id(class_name).is_some() {
        return Err(Error::DuplicateLabel(class_name.to_owned()));
    }
    if samples.is_empty() {
        return Err(Error::EmptyClass(class_name.to_owned()));
    }
    let digests = model.digests(samples)?;
    store.add_class(class_name, &digests)?;
    Ok(digests.len())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub label: String,
    pub confidence: f64,
}

/// Featurize, embed and classify each sample; output follows input order.
pub fn run_inference_stage<M: DigestModel>(
    model: &M,
    store: &HashStore,
    samples: &[Sample],
    k: usize,
) -> Result<Vec<Prediction>> {
    if store.is_empty() {
        return Err(Error::EmptyStore);
    }
    model
        .digests(samples)?
        .iter()
        .map(|d| {
            let r = store.classify(d, k)?;
            Ok(Prediction {
                label: store.label_name(r.label_id).to_owned(),
                confidence: r.confidence,
            })
        })
        .collect()
}

/// Task A (human vs. generated, human positive) and Task B (per-generator)
/// scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub task_a_accuracy: f64,
    pub task_a_f1: f64,
    pub task_b_accuracy: f64,
    pub task_b_macro_f1: f64,
    pub per_class_recall: BTreeMap<String, f64>,
}

fn f1(tp: usize, fp: usize, fn_: usize) -> f64 {
    if tp + fp + fn_ == 0 {
        return 1.0;
    }
    2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
}

pub fn evaluate<P: AsRef<str>, T: AsRef<str>>(predicted: &[P], truth: &[T], human_label: &str) -> Result<Metrics> {
    if predicted.len() != truth.len() {
        return Err(Error::LengthMismatch {
            left: predicted.len(),
            right: truth.len(),
        });
    }
    let n = truth.len();
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    let pairs: Vec<(&str, &str)> = predicted.iter().zip(truth).map(|(p, t)| (p.as_ref(), t.as_ref())).collect();

    let (mut a_correct, mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize, 0usize);
    for &(p, t) in &pairs {
        let (ph, th) = (p == human_label, t == human_label);
        a_correct += usize::from(ph == th);
        match (ph, th) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            _ => {}
        }
    }

    let classes: BTreeSet<&str> = pairs.iter().map(|(_, t)| *t).collect();
    let mut per_class_recall = BTreeMap::new();
    let mut f1_sum = 0.0;
    for &c in &classes {
        let ctp = pairs.iter().filter(|(p, t)| *p == c && *t == c).count();
        let cfp = pairs.iter().filter(|(p, t)| *p == c && *t != c).count();
        let cfn = pairs.iter().filter(|(p, t)| *p != c && *t == c).count();
        per_class_recall.insert(c.to_owned(), ctp as f64 / (ctp + cfn) as f64);
        f1_sum += f1(ctp, cfp, cfn);
    }
    let b_correct = pairs.iter().filter(|(p, t)| p == t).count();

    Ok(Metrics {
        task_a_accuracy: a_correct as f64 / n as f64,
        task_a_f1: f1(tp, fp, fn_),
        task_b_accuracy: b_correct as f64 / n as f64,
        task_b_macro_f1: f1_sum / classes.len() as f64,
        per_class_recall,
    })
}

/// Inference plus scoring against the samples' own labels.
pub fn evaluate_samples<M: DigestModel>(
    model: &M,
    store: &HashStore,
    samples: &[Sample],
    k: usize,
    human_label: &str,
) -> Result<Metrics> {
    let preds = run_inference_stage(model, store, samples, k)?;
    let predicted: Vec<&str> = preds.iter().map(|p| p.label.as_str()).collect();
    evaluate(&predicted, &truth_labels(samples)?, human_label)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageMetrics {
    pub test_clean: Metrics,
    pub test_augmented: Option<Metrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config: PipelineConfig,
    pub seed: u64,
    pub excluded_classes: Vec<String>,
    pub adaptation_exemplars: usize,
    pub trained_labels: Vec<String>,
    pub epochs: Vec<EpochLog>,
    pub store_entries_before: usize,
    pub store_entries_after: usize,
    pub pre_adaptation: StageMetrics,
    pub post_adaptation: Option<StageMetrics>,
    pub wall_clock_seconds: f64,
}

fn stage_metrics<M: DigestModel>(model: &M, store: &HashStore, data: &DatasetSplit, cfg: &PipelineConfig) -> Result<StageMetrics> {
    let k = cfg.store.k;
    let human = &cfg.human_label_name;
    Ok(StageMetrics {
        test_clean: evaluate_samples(model, store, &data.test_clean, k, human)?,
        test_augmented: if data.test_augmented.is_empty() {
            None
        } else {
            Some(evaluate_samples(model, store, &data.test_augmented, k, human)?)
        },
    })
}

/// Exemplars for adapting to `class`: a seeded draw of up to `count` of its
/// training samples.
pub fn draw_exemplars(train: &[Sample], class: &str, count: usize, seed: u64) -> Vec<Sample> {
    let mut members: Vec<&Sample> = train.iter().filter(|s| s.label.as_deref() == Some(class)).collect();
    let mut rng = SeededRng::new(seed);
    rng.shuffle(&mut members);
    members.into_iter().take(count).cloned().collect()
}

/// Trains without `excluded`, scores, adds each excluded class back from
/// `exemplars` training samples, and scores again on the full test splits.
pub fn leave_k_out_experiment(
    data: &DatasetSplit,
    cfg: &PipelineConfig,
    excluded: &[String],
    exemplars: usize,
) -> Result<ExperimentReport> {
    let started = Instant::now();
    let all_labels = data.train_label_names();
    for c in excluded {
        if !all_labels.contains(c) {
            return Err(Error::UnknownLabel(c.clone()));
        }
    }
    let excluded_set: HashSet<&str> = excluded.iter().map(String::as_str).collect();
    let remaining = all_labels.iter().filter(|l| !excluded_set.contains(l.as_str())).count();
    if remaining < 2 {
        return Err(Error::TooFewClasses(remaining));
    }
    if !excluded.is_empty() && exemplars == 0 {
        return Err(Error::InvalidConfig("adaptation needs at least one exemplar".into()));
    }

    let reduced = DatasetSplit {
        train_labeled: data
            .train_labeled
            .iter()
            .filter(|s| !s.label.as_deref().is_some_and(|l| excluded_set.contains(l)))
            .cloned()
            .collect(),
        ..data.clone()
    };
    let outcome = run_training_stage(&reduced, cfg)?;
    let mut store = outcome.store;
    let before = store.len();
    let pre = stage_metrics(&outcome.model, &store, data, cfg)?;

    let post = if excluded.is_empty() {
        None
    } else {
        for (i, class) in excluded.iter().enumerate() {
            let seed = derive_seed(cfg.train.shuffle_seed, 0xADA9_0000 + i as u64);
            let picks = draw_exemplars(&data.train_labeled, class, exemplars, seed);
            run_adaptation_stage(&outcome.model, &mut store, class, &picks)?;
        }
        Some(stage_metrics(&outcome.model, &store, data, cfg)?)
    };

    Ok(ExperimentReport {
        config: cfg.clone(),
        seed: cfg.embedder.seed,
        excluded_classes: excluded.to_vec(),
        adaptation_exemplars: exemplars,
        trained_labels: outcome.labels,
        epochs: outcome.epochs,
        store_entries_before: before,
        store_entries_after: store.len(),
        pre_adaptation: pre,
        post_adaptation: post,
        wall_clock_seconds: started.elapsed().as_secs_f64(),
    })
}

/// Store built straight from normalized featurizer output, with no learned
/// embedder in between.
pub fn featurizer_baseline(train: &[Sample]) -> Result<(Featurizer, HashStore)> {
    let featurizer = Featurizer::fit(train)?;
    let digests = featurizer.digests(train)?;
    let mut store = HashStore::new(featurizer.input_dim())?;
    for (d, s) in digests.iter().zip(train) {
        let label = s
            .label
            .as_deref()
            .ok_or_else(|| Error::InvalidConfig(format!("training sample {:?} has no label", s.id)))?;
        store.add_entry(label, d)?;
    }
    Ok((featurizer, store))
}
