//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any fails.

mod common;

use std::time::Instant;

use common::*;
use hashprint::datagen::{generate_split, SyntheticSpec};
use hashprint::embedder::EmbedderParams;
use hashprint::losses::{loss_backward, Batch, ClassHead, LossConfig};
use hashprint::numeric::{l2_normalize, Matrix, SeededRng};
use hashprint::pipeline::{
    evaluate_samples, featurizer_baseline, leave_k_out_experiment, run_training_stage, DatasetSplit, ExperimentReport,
    Metrics, PipelineConfig, TrainedModel, TrainingOutcome,
};
use hashprint::store::{HashStore, Neighbor, QueryResult};
use hashprint::Error;

const HUMAN: &str = "human";
/// Excluded class for the single leave-one-out run, fixed in advance.
const HELD_OUT: &str = "ai1";
const EXEMPLARS: usize = 50;
const TRIALS: u64 = 5;

struct Outcome {
    pass: bool,
    detail: String,
}

fn check(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

/// Short schedule used for every training run here.
fn reference_config(seed: u64) -> PipelineConfig {
    let mut cfg = PipelineConfig::default();
    cfg.train.epochs = 6;
    cfg.train.learning_rate = 1e-3;
    cfg.embedder.seed = seed;
    cfg.train.shuffle_seed = seed;
    cfg
}

fn metrics(model: &TrainedModel, store: &HashStore, samples: &[hashprint::featurizer::Sample]) -> Metrics {
    evaluate_samples(model, store, samples, 5, HUMAN).unwrap()
}

// ---------------------------------------------------------------- losses

fn arcface_zero_margin_matches_normface() -> Outcome {
    let mut rng = SeededRng::new(101);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let s = rng.uniform_range(0.5, 64.0);
        let inst = random_loss_instance(&mut rng, LossConfig::normface(s));
        let batch = Batch::new(&inst.x, &inst.labels).unwrap();
        let nf = loss_backward(&inst.head, batch, &LossConfig::normface(s)).unwrap();
        let af = loss_backward(&inst.head, batch, &LossConfig::arcface(s, 0.0)).unwrap();
        let (gn, ga) = (nf.grads.unwrap(), af.grads.unwrap());
        worst = worst.max((nf.value - af.value).abs());
        for (a, b) in [
            (gn.weight.as_slice(), ga.weight.as_slice()),
            (&gn.bias[..], &ga.bias[..]),
            (gn.features.as_slice(), ga.features.as_slice()),
        ] {
            for (x, y) in a.iter().zip(b) {
                worst = worst.max((x - y).abs());
            }
        }
    }
    check(worst <= 1e-9, format!("max abs difference {worst:.2e} over 100 instances"))
}

fn hand_values() -> Outcome {
    let head = ClassHead::new(Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap(), vec![0.0; 2]).unwrap();
    let x = Matrix::from_rows(&[[1.0, 0.0]]).unwrap();
    let batch = Batch::new(&x, &[0]).unwrap();
    let nf = loss_backward(&head, batch, &LossConfig::normface(1.0)).unwrap().value;
    let af = loss_backward(&head, batch, &LossConfig::arcface(1.0, 0.5)).unwrap().value;
    // ln(1 + e^(0 - cos 0.5)) for the margin case
    let nf_want = (1.0 + (-1.0f64).exp()).ln();
    let af_want = 0.347_685_444_9;
    check(
        (nf - 0.313_262).abs() < 1e-6 && (nf - nf_want).abs() < 1e-12 && (af - af_want).abs() < 1e-6,
        format!("normface {nf:.9}, arcface {af:.9}"),
    )
}

fn gradient_oracle() -> Outcome {
    let started = Instant::now();
    let mut rng = SeededRng::new(303);
    let mut loss_worst: f64 = 0.0;
    for _ in 0..100 {
        let cfg = random_loss_config(&mut rng);
        loss_worst = loss_worst.max(loss_gradcheck(&random_loss_instance(&mut rng, cfg)));
    }
    let mut pipe_worst: f64 = 0.0;
    for _ in 0..100 {
        let inst = random_pipeline_instance(&mut rng);
        pipe_worst = pipe_worst.max(pipeline_gradcheck(&inst, &mut rng));
    }
    let secs = started.elapsed().as_secs_f64();
    check(
        loss_worst < 1e-4 && pipe_worst < 1e-4 && secs < 60.0,
        format!("loss {loss_worst:.2e}, pipeline {pipe_worst:.2e}, 200 instances in {secs:.1}s"),
    )
}

// ---------------------------------------------------------------- store

fn oracle_query(store: &HashStore, v: &[f64], k: usize) -> Vec<Neighbor> {
    let unit = l2_normalize(v).unwrap();
    let mut all: Vec<Neighbor> = (0..store.len())
        .map(|e| {
            let s: f64 = store.digest(e).iter().zip(&unit).map(|(a, b)| f64::from(*a) * b).sum();
            Neighbor {
                label_id: store.entry_label(e),
                similarity: s.clamp(-1.0, 1.0) + 0.0,
                entry: e,
            }
        })
        .collect();
    // stable sort keeps insertion order among equal similarities
    all.sort_by(|a, b| b.similarity.total_cmp(&a.similarity));
    all.truncate(k);
    all
}

fn oracle_classify(store: &HashStore, v: &[f64], k: usize) -> QueryResult {
    let neighbors = oracle_query(store, v, k);
    let labels = store.labels().len();
    let mut score = vec![0.0; labels];
    let mut top = vec![f64::NEG_INFINITY; labels];
    for n in &neighbors {
        score[n.label_id as usize] += n.similarity.max(0.0);
        top[n.label_id as usize] = top[n.label_id as usize].max(n.similarity);
    }
    let total: f64 = score.iter().sum();
    if total <= 0.0 {
        let label_id = neighbors[0].label_id;
        return QueryResult {
            neighbors,
            label_id,
            confidence: 1.0 / labels as f64,
        };
    }
    let mut ranked: Vec<usize> = (0..labels).collect();
    ranked.sort_by(|&a, &b| score[b].total_cmp(&score[a]).then(top[b].total_cmp(&top[a])).then(a.cmp(&b)));
    let w = ranked[0];
    QueryResult {
        neighbors,
        label_id: w as u32,
        confidence: score[w] / total,
    }
}

fn random_store(rng: &mut SeededRng, dim: usize) -> HashStore {
    let mut store = HashStore::new(dim).unwrap();
    let entries = 1 + rng.below(500);
    let labels = 1 + rng.below(6);
    // a coarse grid makes exact similarity ties common
    let coarse = rng.below(3) == 0;
    let mut pool: Vec<Vec<f64>> = Vec::new();
    for _ in 0..entries {
        let v: Vec<f64> = if !pool.is_empty() && rng.below(5) == 0 {
            pool[rng.below(pool.len())].clone()
        } else {
            loop {
                let v: Vec<f64> = (0..dim)
                    .map(|_| if coarse { rng.below(3) as f64 - 1.0 } else { rng.normal() })
                    .collect();
                if v.iter().any(|x| *x != 0.0) {
                    break v;
                }
            }
        };
        store.add_entry(&format!("c{}", rng.below(labels)), &v).unwrap();
        pool.push(v);
    }
    store
}

fn knn_exactness() -> Outcome {
    let mut rng = SeededRng::new(404);
    let dim = 16;
    let mut mismatches = 0;
    for _ in 0..1000 {
        let store = random_store(&mut rng, dim);
        let q: Vec<f64> = loop {
            let q: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
            if q.iter().any(|x| *x != 0.0) {
                break q;
            }
        };
        let k = 1 + rng.below(store.len() + 3);
        let want = oracle_classify(&store, &q, k);
        let got = store.classify(&q, k).unwrap();
        if got != want || store.query(&q, k).unwrap() != want.neighbors {
            mismatches += 1;
        }
    }
    check(mismatches == 0, format!("{mismatches} mismatches over 1000 stores"))
}

fn is_format(r: Result<impl Sized, Error>) -> bool {
    matches!(r, Err(Error::Format(_)))
}

fn serialization(full: &TrainingOutcome) -> Outcome {
    let store_bytes = full.store.to_bytes().unwrap();
    let store_rt = HashStore::from_bytes(&store_bytes).unwrap().to_bytes().unwrap() == store_bytes;
    let model_bytes = full.model.to_bytes();
    let model_rt = TrainedModel::from_bytes(&model_bytes).unwrap().to_bytes() == model_bytes;
    let params_bytes = full.model.params.to_bytes();
    let params_rt = EmbedderParams::from_bytes(&params_bytes).unwrap().to_bytes() == params_bytes;

    let mut small = HashStore::new(4).unwrap();
    small.add_entry("human", &[1.0, 0.0, 0.0, 0.0]).unwrap();
    small.add_entry("ai1", &[0.0, 0.6, 0.8, 0.0]).unwrap();
    let small_bytes = small.to_bytes().unwrap();
    let mut rejected = 0;
    let mut cases = 0;
    let mut tally = |ok: bool| {
        cases += 1;
        rejected += usize::from(ok);
    };
    for cut in 0..small_bytes.len() {
        tally(is_format(HashStore::from_bytes(&small_bytes[..cut])));
    }
    let mut extra = small_bytes.clone();
    extra.push(0);
    tally(is_format(HashStore::from_bytes(&extra)));
    let mut magic = small_bytes.clone();
    magic[0] ^= 0xFF;
    tally(is_format(HashStore::from_bytes(&magic)));
    let mut version = small_bytes.clone();
    version[4] = 9;
    tally(is_format(HashStore::from_bytes(&version)));
    // first digest component of the last entry: no longer unit norm
    let mut norm = small_bytes.clone();
    let at = norm.len() - 16;
    norm[at..at + 4].copy_from_slice(&2.0f32.to_le_bytes());
    tally(is_format(HashStore::from_bytes(&norm)));
    // label id of the last entry points past the label table
    let mut label = small_bytes.clone();
    let at = label.len() - 20;
    label[at..at + 4].copy_from_slice(&7u32.to_le_bytes());
    tally(is_format(HashStore::from_bytes(&label)));

    let step = (model_bytes.len() / 997).max(1);
    for cut in (0..model_bytes.len()).step_by(step) {
        tally(is_format(TrainedModel::from_bytes(&model_bytes[..cut])));
        tally(is_format(EmbedderParams::from_bytes(&params_bytes[..cut.min(params_bytes.len() - 1)])));
    }
    let mut trailing = model_bytes.clone();
    trailing.extend_from_slice(&[0; 3]);
    tally(is_format(TrainedModel::from_bytes(&trailing)));
    let mut magic = params_bytes.clone();
    magic[3] = b'9';
    tally(is_format(EmbedderParams::from_bytes(&magic)));

    check(
        store_rt && model_rt && params_rt && rejected == cases,
        format!("roundtrips store {store_rt} model {model_rt} params {params_rt}; rejected {rejected}/{cases} corrupted inputs"),
    )
}

fn storage_accounting() -> Outcome {
    let mut store = HashStore::new(512).unwrap();
    let mut v = vec![0.0; 512];
    v[0] = 1.0;
    store.add_entry("human", &v).unwrap();
    let bits = store.size_bits();
    check(bits == 16_384, format!("size_bits = {bits}"))
}

// ---------------------------------------------------------------- pipeline

struct Reference {
    data: DatasetSplit,
    full: TrainingOutcome,
    full_clean: Metrics,
    full_seconds: f64,
    held_out: ExperimentReport,
}

fn reference_runs() -> Reference {
    let started = Instant::now();
    let data = generate_split(&SyntheticSpec::reference()).unwrap();
    let cfg = reference_config(42);
    let full = run_training_stage(&data, &cfg).unwrap();
    let full_clean = metrics(&full.model, &full.store, &data.test_clean);
    let full_seconds = started.elapsed().as_secs_f64();
    let held_out = leave_k_out_experiment(&data, &cfg, &[HELD_OUT.to_owned()], EXEMPLARS).unwrap();
    Reference {
        data,
        full,
        full_clean,
        full_seconds,
        held_out,
    }
}

fn end_to_end(r: &Reference) -> Outcome {
    let m = &r.full_clean;
    check(
        m.task_a_accuracy >= 0.95 && m.task_b_macro_f1 >= 0.90 && r.full_seconds < 300.0,
        format!(
            "taskA acc {:.4}, taskB macro-F1 {:.4}, {:.1}s",
            m.task_a_accuracy, m.task_b_macro_f1, r.full_seconds
        ),
    )
}

fn leave_one_out(r: &Reference) -> Outcome {
    let pre = r.held_out.pre_adaptation.test_clean.per_class_recall[HELD_OUT];
    let post = r.held_out.post_adaptation.as_ref().unwrap().test_clean.clone();
    let recall = post.per_class_recall[HELD_OUT];
    let gap = r.full_clean.task_b_macro_f1 - post.task_b_macro_f1;
    check(
        pre == 0.0 && recall >= 0.7 && gap <= 0.10,
        format!(
            "{HELD_OUT} recall {pre:.3} -> {recall:.3}, post macro-F1 {:.4} vs full {:.4}",
            post.task_b_macro_f1, r.full_clean.task_b_macro_f1
        ),
    )
}

fn post_f1(report: &ExperimentReport) -> f64 {
    report.post_adaptation.as_ref().unwrap().test_clean.task_b_macro_f1
}

fn two_class_exclusion(r: &Reference) -> Outcome {
    let mut wins = 0;
    let mut pairs = Vec::new();
    for t in 0..TRIALS {
        let cfg = reference_config(42 + t);
        let a = format!("ai{}", t + 1);
        let b = format!("ai{}", t + 2);
        let one = leave_k_out_experiment(&r.data, &cfg, std::slice::from_ref(&a), EXEMPLARS).unwrap();
        let two = leave_k_out_experiment(&r.data, &cfg, &[a, b], EXEMPLARS).unwrap();
        let (f1, f2) = (post_f1(&one), post_f1(&two));
        wins += usize::from(f2 < f1);
        pairs.push(format!("{f1:.3}/{f2:.3}"));
    }
    check(
        wins * 2 > TRIALS as usize,
        format!("two-class lower in {wins}/{TRIALS} trials (one/two: {})", pairs.join(" ")),
    )
}

fn pseudo_labeling() -> Outcome {
    let data = generate_split(&SyntheticSpec {
        augment_pool: true,
        ..SyntheticSpec::reference()
    })
    .unwrap();
    let mut with = 0.0;
    let mut without = 0.0;
    for t in 0..TRIALS {
        for (p, acc) in [(0.05, &mut with), (0.0, &mut without)] {
            let cfg = PipelineConfig {
                p_pseudo: p,
                ..reference_config(42 + t)
            };
            let out = run_training_stage(&data, &cfg).unwrap();
            *acc += metrics(&out.model, &out.store, &data.test_augmented).task_b_accuracy / TRIALS as f64;
        }
    }
    check(
        with >= without - 0.01,
        format!("mean augmented taskB acc {with:.4} with pseudo-labels, {without:.4} without"),
    )
}

fn pruning(r: &Reference) -> Outcome {
    let pruned = r.full.store.prune(0.2).unwrap();
    let ceilings: u64 = r.full.store.class_counts().iter().map(|&n| n.div_ceil(5) as u64).sum();
    let exact = pruned.size_bits() == ceilings * r.full.store.dim() as u64 * 32;
    let ratio = pruned.size_bits() as f64 / r.full.store.size_bits() as f64;
    let before = r.full_clean.task_b_accuracy;
    let after = metrics(&r.full.model, &pruned, &r.data.test_clean).task_b_accuracy;
    check(
        exact && (ratio - 0.2).abs() < 1e-12 && before - after <= 0.03,
        format!(
            "bits {} -> {} ({:.1}% kept), taskB acc {before:.4} -> {after:.4}",
            r.full.store.size_bits(),
            pruned.size_bits(),
            100.0 * ratio
        ),
    )
}

fn baseline_ordering(r: &Reference) -> Outcome {
    let full = r.full_clean.task_b_macro_f1;
    let adapted = post_f1(&r.held_out);
    let (featurizer, store) = featurizer_baseline(&r.data.train_labeled).unwrap();
    let base = evaluate_samples(&featurizer, &store, &r.data.test_clean, 5, HUMAN)
        .unwrap()
        .task_b_macro_f1;
    check(
        full > adapted && adapted > base,
        format!("macro-F1 full {full:.6} > adapted {adapted:.6} > featurizer store {base:.6}"),
    )
}

fn main() {
    let mut failed = 0;
    let mut report = |n: usize, name: &str, o: Outcome| {
        let tag = if o.pass { "PASS" } else { "FAIL" };
        failed += usize::from(!o.pass);
        println!("{tag} [{n:>2}] {name}: {}", o.detail);
    };
    report(1, "arcface m=0 equals normface", arcface_zero_margin_matches_normface());
    report(2, "hand loss values", hand_values());
    report(3, "gradients vs finite differences", gradient_oracle());
    report(4, "k-NN matches brute force", knn_exactness());
    report(6, "storage accounting", storage_accounting());
    let r = reference_runs();
    report(5, "serialization", serialization(&r.full));
    report(7, "end-to-end reference run", end_to_end(&r));
    report(8, "leave-one-out adaptation", leave_one_out(&r));
    report(9, "two-class exclusion hurts more", two_class_exclusion(&r));
    report(10, "pseudo-labeling does not regress", pseudo_labeling());
    report(11, "pruning", pruning(&r));
    report(12, "baseline ordering", baseline_ordering(&r));
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
