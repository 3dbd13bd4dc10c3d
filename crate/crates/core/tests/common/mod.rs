//! Shared oracles for the integration tests: central finite differences and
//! random instance generators that stay clear of non-differentiable points.
#![allow(dead_code)]

use hashprint::embedder::{backward, init_params, EmbedderConfig, EmbedderParams};
use hashprint::featurizer::{Featurizer, Sample};
use hashprint::losses::{loss_backward, loss_forward, Batch, ClassHead, LossConfig, LossVariant};
use hashprint::numeric::{Matrix, SeededRng};

pub const FD_STEP: f64 = 1e-4;
/// Points closer than this to a clamp boundary or kink are resampled.
pub const KINK_GAP: f64 = 1e-3;
/// Embeddings shorter than this sit too close to the singularity of
/// L2 normalization for a fixed-step difference to resolve.
pub const MIN_EMBED_NORM: f64 = 0.1;
/// Gradient magnitudes below this are compared absolutely.
pub const REL_FLOOR: f64 = 1e-3;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Central difference of `f` along each coordinate of `x`.
pub fn central_diff(x: &mut [f64], idx: &[usize], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    idx.iter()
        .map(|&i| {
            let orig = x[i];
            x[i] = orig + FD_STEP;
            let up = f(x);
            x[i] = orig - FD_STEP;
            let down = f(x);
            x[i] = orig;
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}

fn cos(u: &[f64], v: &[f64]) -> f64 {
    let d: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    d / (nu * nv)
}

/// True when any feature/class cosine lies near the clamp band or, for the
/// labelled class under ArcFace, near the `theta + m = pi` cutoff.
pub fn near_loss_kink(head: &ClassHead, x: &Matrix, labels: &[usize], cfg: &LossConfig) -> bool {
    if cfg.variant == LossVariant::Softmax {
        return false;
    }
    let lim = 1.0 - cfg.cos_clamp_eps;
    x.iter_rows().zip(labels).any(|(row, &y)| {
        head.weight.iter_rows().enumerate().any(|(j, w)| {
            let c = cos(row, w);
            let clamp = (c.abs() - lim).abs() < KINK_GAP || c.abs() > 1.0 - KINK_GAP;
            let cutoff = cfg.variant == LossVariant::ArcFace && j == y && (c + cfg.m.cos()).abs() < KINK_GAP;
            clamp || cutoff
        })
    })
}

pub fn random_matrix(rng: &mut SeededRng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.normal()).collect()).unwrap()
}

pub fn random_loss_config(rng: &mut SeededRng) -> LossConfig {
    match rng.below(3) {
        0 => LossConfig::softmax(),
        1 => LossConfig::normface(rng.uniform_range(1.0, 10.0)),
        _ => LossConfig::arcface(rng.uniform_range(1.0, 10.0), rng.uniform_range(0.0, 0.8)),
    }
}

pub struct LossInstance {
    pub head: ClassHead,
    pub x: Matrix,
    pub labels: Vec<usize>,
    pub cfg: LossConfig,
}

/// Small random head/batch pair away from every kink.
pub fn random_loss_instance(rng: &mut SeededRng, cfg: LossConfig) -> LossInstance {
    loop {
        let n = 2 + rng.below(4);
        let d = 2 + rng.below(5);
        let rows = 1 + rng.below(4);
        let head = ClassHead::new(random_matrix(rng, n, d), (0..n).map(|_| rng.normal()).collect()).unwrap();
        let x = random_matrix(rng, rows, d);
        let labels: Vec<usize> = (0..rows).map(|_| rng.below(n)).collect();
        if !near_loss_kink(&head, &x, &labels, &cfg) {
            return LossInstance { head, x, labels, cfg };
        }
    }
}

/// Worst relative error of head, bias and feature gradients against central
/// differences of the loss value.
pub fn loss_gradcheck(inst: &LossInstance) -> f64 {
    let LossInstance { head, x, labels, cfg } = inst;
    let grads = loss_backward(head, Batch::new(x, labels).unwrap(), cfg)
        .unwrap()
        .grads
        .unwrap();
    let mut worst: f64 = 0.0;

    let mut w = head.weight.as_slice().to_vec();
    let all: Vec<usize> = (0..w.len()).collect();
    let num = central_diff(&mut w, &all, |w| {
        let h = ClassHead::new(Matrix::from_vec(head.num_classes(), head.dim(), w.to_vec()).unwrap(), head.bias.clone())
            .unwrap();
        loss_forward(&h, Batch::new(x, labels).unwrap(), cfg).unwrap().value
    });
    for (a, n) in grads.weight.as_slice().iter().zip(&num) {
        worst = worst.max(rel_err(*a, *n));
    }

    let mut b = head.bias.clone();
    let all: Vec<usize> = (0..b.len()).collect();
    let num = central_diff(&mut b, &all, |b| {
        let h = ClassHead::new(head.weight.clone(), b.to_vec()).unwrap();
        loss_forward(&h, Batch::new(x, labels).unwrap(), cfg).unwrap().value
    });
    for (a, n) in grads.bias.iter().zip(&num) {
        worst = worst.max(rel_err(*a, *n));
    }

    let mut xs = x.as_slice().to_vec();
    let all: Vec<usize> = (0..xs.len()).collect();
    let num = central_diff(&mut xs, &all, |xs| {
        let m = Matrix::from_vec(x.rows(), x.cols(), xs.to_vec()).unwrap();
        loss_forward(head, Batch::new(&m, labels).unwrap(), cfg).unwrap().value
    });
    for (a, n) in grads.features.as_slice().iter().zip(&num) {
        worst = worst.max(rel_err(*a, *n));
    }
    worst
}

/// A short text sample drawn from a random alphabet subset.
pub fn random_text(rng: &mut SeededRng) -> String {
    let alphabet: Vec<char> = "abcdefgh ijklmn.".chars().collect();
    let len = 4 + rng.below(30);
    (0..len).map(|_| alphabet[rng.below(alphabet.len())]).collect()
}

pub struct PipelineInstance {
    pub params: EmbedderParams,
    pub inputs: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub cfg: LossConfig,
}

fn pre_activations(params: &EmbedderParams, x: &[f64]) -> (Vec<Vec<f64>>, Vec<f64>) {
    let mut h = x.to_vec();
    let mut pres = Vec::new();
    for layer in &params.layers {
        let mut z = layer.bias.clone();
        for (i, &hi) in h.iter().enumerate() {
            if hi != 0.0 {
                for (o, zo) in z.iter_mut().enumerate() {
                    *zo += hi * layer.weight.get(i, o);
                }
            }
        }
        h = z.iter().zip(&layer.slope).map(|(&v, &a)| if v > 0.0 { v } else { a * v }).collect();
        pres.push(z);
    }
    (pres, h)
}

/// Featurized text batch through a tiny embedder with an ArcFace head, with
/// no PReLU input or cosine near a kink and no near-zero embedding.
pub fn random_pipeline_instance(rng: &mut SeededRng) -> PipelineInstance {
    loop {
        let classes = 2 + rng.below(3);
        let texts: Vec<Sample> = (0..2 + rng.below(3))
            .map(|i| Sample::text(format!("t{i}"), random_text(rng), Some(format!("c{}", i % classes))))
            .collect();
        let featurizer = Featurizer::fit(&texts).unwrap();
        let inputs: Vec<Vec<f64>> = featurizer
            .featurize_all(&texts)
            .unwrap()
            .into_iter()
            .map(|f| f.values)
            .collect();
        let cfg = EmbedderConfig {
            input_dim: featurizer.input_dim(),
            hidden_dims: vec![2 + rng.below(4)],
            emb_dim: 2 + rng.below(4),
            prelu_init: rng.uniform_range(0.05, 0.5),
            seed: rng.next_u64(),
        };
        let mut params = init_params(&cfg, classes).unwrap();
        for layer in &mut params.layers {
            for b in &mut layer.bias {
                *b = 0.1 * rng.normal();
            }
            for a in &mut layer.slope {
                *a = rng.uniform_range(0.05, 0.5);
            }
        }
        let labels: Vec<usize> = (0..inputs.len()).map(|_| rng.below(classes)).collect();
        let loss = LossConfig::arcface(rng.uniform_range(1.0, 10.0), rng.uniform_range(0.0, 0.8));

        let mut kink = false;
        let mut emb = Vec::new();
        for x in &inputs {
            let (pres, out) = pre_activations(&params, x);
            kink |= pres.iter().flatten().any(|z| z.abs() < KINK_GAP);
            kink |= out.iter().map(|v| v * v).sum::<f64>().sqrt() < MIN_EMBED_NORM;
            emb.extend(out);
        }
        let emb = Matrix::from_vec(inputs.len(), params.emb_dim(), emb).unwrap();
        kink |= near_loss_kink(&params.head, &emb, &labels, &loss);
        if !kink {
            return PipelineInstance {
                params,
                inputs,
                labels,
                cfg: loss,
            };
        }
    }
}

/// Worst relative error over every non-first-layer parameter plus a sample
/// of first-layer weights, including all rows the inputs touch.
pub fn pipeline_gradcheck(inst: &PipelineInstance, rng: &mut SeededRng) -> f64 {
    let PipelineInstance {
        params,
        inputs,
        labels,
        cfg,
    } = inst;
    let grads = backward(params, inputs, labels, cfg).unwrap().grads;
    let analytic: Vec<Vec<f64>> = grads.tensors().into_iter().map(<[f64]>::to_vec).collect();
    let mut worst: f64 = 0.0;
    let mut work = params.clone();
    let tensor_count = analytic.len();
    for t in 0..tensor_count {
        let len = analytic[t].len();
        let idx: Vec<usize> = if t == 0 {
            // first-layer weights: the rows hit by nonzero inputs, plus a few random ones
            let cols = params.layers[0].out_dim();
            let mut hit: Vec<usize> = (0..params.layers[0].in_dim())
                .filter(|&r| inputs.iter().any(|x| x[r] != 0.0))
                .take(12)
                .flat_map(|r| (0..cols).map(move |c| r * cols + c))
                .collect();
            hit.extend((0..8).map(|_| rng.below(len)));
            hit
        } else {
            (0..len).collect()
        };
        for &i in &idx {
            let orig = work.tensors()[t][i];
            work.tensors_mut()[t][i] = orig + FD_STEP;
            let up = backward(&work, inputs, labels, cfg).unwrap().loss;
            work.tensors_mut()[t][i] = orig - FD_STEP;
            let down = backward(&work, inputs, labels, cfg).unwrap().loss;
            work.tensors_mut()[t][i] = orig;
            let num = (up - down) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic[t][i], num));
        }
    }
    worst
}
