use hashprint::datagen::{generate_split, SyntheticSpec};
use hashprint::featurizer::{Featurizer, Sample};

struct Centroids {
    means: Vec<Vec<f64>>,
    test: Vec<(Vec<f64>, usize)>,
}

/// Per-class means of featurizer output on the training split, plus the
/// featurized clean test split with class indices.
fn centroids(separation: f64) -> Centroids {
    let spec = SyntheticSpec {
        per_class_train: 200,
        per_class_test: 100,
        pool_size: 7,
        separation,
        ..SyntheticSpec::reference()
    };
    let names = spec.class_names();
    let data = generate_split(&spec).unwrap();
    let featurizer = Featurizer::fit(&data.train_labeled).unwrap();
    let class_of = |s: &Sample| names.iter().position(|n| Some(n.as_str()) == s.label.as_deref()).unwrap();
    let feats = |s: &[Sample]| -> Vec<(Vec<f64>, usize)> {
        featurizer
            .featurize_all(s)
            .unwrap()
            .into_iter()
            .zip(s)
            .map(|(f, s)| (f.values, class_of(s)))
            .collect()
    };

    let train = feats(&data.train_labeled);
    let dim = train[0].0.len();
    let mut means = vec![vec![0.0; dim]; names.len()];
    let mut counts = vec![0usize; names.len()];
    for (x, c) in &train {
        counts[*c] += 1;
        for (a, b) in means[*c].iter_mut().zip(x) {
            *a += b;
        }
    }
    for (m, n) in means.iter_mut().zip(&counts) {
        m.iter_mut().for_each(|v| *v /= *n as f64);
    }
    Centroids {
        means,
        test: feats(&data.test_clean),
    }
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

fn mean_between_class_distance(c: &Centroids) -> f64 {
    let k = c.means.len();
    let mut total = 0.0;
    for i in 0..k {
        for j in i + 1..k {
            total += dist(&c.means[i], &c.means[j]);
        }
    }
    total / (k * (k - 1) / 2) as f64
}

#[test]
fn zero_separation_is_chance_level() {
    let c = centroids(0.0);
    let correct = c
        .test
        .iter()
        .filter(|(x, y)| {
            let best = (0..c.means.len())
                .min_by(|&i, &j| dist(&c.means[i], x).total_cmp(&dist(&c.means[j], x)))
                .unwrap();
            best == *y
        })
        .count();
    let n = c.test.len() as f64;
    let acc = correct as f64 / n;
    let p = 1.0 / 7.0;
    let se = (p * (1.0 - p) / n).sqrt();
    assert!((acc - p).abs() <= 3.0 * se, "accuracy {acc} vs chance {p} (se {se})");
}

#[test]
fn centroid_distance_grows_with_separation() {
    let d: Vec<f64> = [0.0, 0.25, 0.5, 1.0]
        .iter()
        .map(|&s| mean_between_class_distance(&centroids(s)))
        .collect();
    for w in d.windows(2) {
        assert!(w[1] >= w[0], "centroid distances not monotone: {d:?}");
    }
}
