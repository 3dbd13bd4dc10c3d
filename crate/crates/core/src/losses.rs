//! Softmax, NormFace and ArcFace classification losses with analytic
//! gradients.
//!
//! NormFace and ArcFace evaluate `s * cos(theta)` between L2-normalized class
//! rows and L2-normalized features; ArcFace adds the angular margin `m` to the
//! target-class angle while training. The target logit is evaluated as
//! `s * (c cos m - sin(theta) sin m)` so that `m = 0` reproduces NormFace
//! exactly, values and gradients alike.

use std::f64::consts::FRAC_PI_2;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{argmax, dot, log_sum_exp, norm, stable_softmax, Matrix, ZERO_NORM};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossVariant {
    Softmax,
    NormFace,
    ArcFace,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub variant: LossVariant,
    /// Logit scale.
    pub s: f64,
    /// Additive angular margin in radians.
    pub m: f64,
    /// `cos(theta)` is clamped to `±(1 - cos_clamp_eps)` before `acos`.
    pub cos_clamp_eps: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            variant: LossVariant::ArcFace,
            s: 30.0,
            m: 0.5,
            cos_clamp_eps: 1e-7,
        }
    }
}

impl LossConfig {
    pub fn softmax() -> Self {
        Self {
            variant: LossVariant::Softmax,
            ..Self::default()
        }
    }

    pub fn normface(s: f64) -> Self {
        Self {
            variant: LossVariant::NormFace,
            s,
            m: 0.0,
            ..Self::default()
        }
    }

    pub fn arcface(s: f64, m: f64) -> Self {
        Self {
            variant: LossVariant::ArcFace,
            s,
            m,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.s > 0.0) || !self.s.is_finite() {
            return Err(Error::InvalidConfig(format!("scale s must be > 0, got {}", self.s)));
        }
        if !(0.0..=FRAC_PI_2).contains(&self.m) {
            return Err(Error::InvalidConfig(format!("margin m must lie in [0, pi/2], got {}", self.m)));
        }
        if !(self.cos_clamp_eps > 0.0 && self.cos_clamp_eps < 0.5) {
            return Err(Error::InvalidConfig(format!(
                "cos_clamp_eps must lie in (0, 0.5), got {}",
                self.cos_clamp_eps
            )));
        }
        Ok(())
    }

    fn is_angular(&self) -> bool {
        self.variant != LossVariant::Softmax
    }
}

/// Class weight rows `W` (n x d) and biases `b` (used by Softmax only).
#[derive(Debug, Clone, PartialEq)]
pub struct ClassHead {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl ClassHead {
    pub fn new(weight: Matrix, bias: Vec<f64>) -> Result<Self> {
        if weight.rows() < 2 {
            return Err(Error::TooFewClasses(weight.rows()));
        }
        if bias.len() != weight.rows() {
            return Err(Error::DimensionMismatch {
                expected: weight.rows(),
                got: bias.len(),
            });
        }
        Ok(Self { weight, bias })
    }

    pub fn num_classes(&self) -> usize {
        self.weight.rows()
    }

    pub fn dim(&self) -> usize {
        self.weight.cols()
    }
}

/// Features `X` (N x d) with one class index per row.
#[derive(Debug, Clone, Copy)]
pub struct Batch<'a> {
    pub features: &'a Matrix,
    pub labels: &'a [usize],
}

impl<'a> Batch<'a> {
    pub fn new(features: &'a Matrix, labels: &'a [usize]) -> Result<Self> {
        if features.rows() == 0 {
            return Err(Error::EmptyDataset);
        }
        if features.rows() != labels.len() {
            return Err(Error::LengthMismatch {
                left: features.rows(),
                right: labels.len(),
            });
        }
        Ok(Self { features, labels })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossGradients {
    pub weight: Matrix,
    pub bias: Vec<f64>,
    pub features: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    /// Mean negative log-likelihood over the batch.
    pub value: f64,
    pub logits: Matrix,
    /// Angles between features and class rows (angular variants only).
    pub thetas: Option<Matrix>,
    pub grads: Option<LossGradients>,
}

/// Per-class logits. With `training` set, ArcFace applies the margin to each
/// row's labelled class; otherwise ArcFace and NormFace coincide.
pub fn compute_logits(head: &ClassHead, batch: Batch<'_>, cfg: &LossConfig, training: bool) -> Result<Matrix> {
    let labels = if training { Some(batch.labels) } else { None };
    Ok(run(head, batch.features, labels, cfg, false)?.logits)
}

pub fn loss_forward(head: &ClassHead, batch: Batch<'_>, cfg: &LossConfig) -> Result<LossOutput> {
    run(head, batch.features, Some(batch.labels), cfg, false)
}

pub fn loss_backward(head: &ClassHead, batch: Batch<'_>, cfg: &LossConfig) -> Result<LossOutput> {
    run(head, batch.features, Some(batch.labels), cfg, true)
}

/// Margin-free class probabilities for one feature vector; the predicted
/// class is the argmax with ties going to the lowest index.
pub fn inference_confidence(head: &ClassHead, x: &[f64], cfg: &LossConfig) -> Result<(usize, Vec<f64>)> {
    let features = Matrix::from_vec(1, x.len(), x.to_vec())?;
    let logits = run(head, &features, None, cfg, false)?.logits;
    let probs = stable_softmax(logits.row(0));
    Ok((argmax(&probs), probs))
}

/// Target logit `s cos(theta + m)` and its derivative with respect to
/// `c = cos(theta)`. Past `theta + m = pi` the angle is pinned to `pi`, and
/// the margin term contributes no gradient where `|c| > 1 - cos_clamp_eps`.
fn margin_logit(c: f64, cfg: &LossConfig) -> (f64, f64) {
    let (sin_m, cos_m) = cfg.m.sin_cos();
    if c <= -cos_m {
        return (-cfg.s, 0.0);
    }
    let lim = 1.0 - cfg.cos_clamp_eps;
    let sin_t = (1.0 - c * c).max(0.0).sqrt();
    let z = cfg.s * (c * cos_m - sin_t * sin_m);
    // d sin(theta)/dc is unbounded at |c| = 1; zero it inside the clamp band.
    let dz = if c.abs() < lim {
        cfg.s * (cos_m + c * sin_m / sin_t)
    } else {
        cfg.s * cos_m
    };
    (z, dz)
}

fn run(
    head: &ClassHead,
    x: &Matrix,
    labels: Option<&[usize]>,
    cfg: &LossConfig,
    want_grads: bool,
) -> Result<LossOutput> {
    cfg.validate()?;
    let (n_rows, d) = x.shape();
    let classes = head.num_classes();
    if head.dim() != d {
        return Err(Error::DimensionMismatch {
            expected: head.dim(),
            got: d,
        });
    }
    if head.bias.len() != classes {
        return Err(Error::DimensionMismatch {
            expected: classes,
            got: head.bias.len(),
        });
    }
    if let Some(y) = labels {
        if y.len() != n_rows {
            return Err(Error::LengthMismatch {
                left: n_rows,
                right: y.len(),
            });
        }
        if let Some(bad) = y.iter().find(|&&l| l >= classes) {
            return Err(Error::InvalidConfig(format!("label {bad} out of range for {classes} classes")));
        }
    }

    let angular = cfg.is_angular();
    let margin = angular && cfg.variant == LossVariant::ArcFace && labels.is_some();

    // Row norms of the class weights, reused for normalization and gradients.
    let w_norms: Vec<f64> = if angular {
        let norms: Vec<f64> = head.weight.iter_rows().map(norm).collect();
        if norms.iter().any(|n| !(*n > ZERO_NORM)) {
            return Err(Error::ZeroVector);
        }
        norms
    } else {
        Vec::new()
    };

    let mut logits = Matrix::zeros(n_rows, classes);
    let mut thetas = angular.then(|| Matrix::zeros(n_rows, classes));
    let mut grads = want_grads.then(|| LossGradients {
        weight: Matrix::zeros(classes, d),
        bias: vec![0.0; classes],
        features: Matrix::zeros(n_rows, d),
    });
    let mut total = 0.0;
    let inv_n = 1.0 / n_rows as f64;
    let lim = 1.0 - cfg.cos_clamp_eps;

    let mut cosines = vec![0.0; classes];
    let mut dz_dc = vec![0.0; classes];
    for i in 0..n_rows {
        let xi = x.row(i);
        let x_norm = if angular {
            let n = norm(xi);
            if !(n > ZERO_NORM) {
                return Err(Error::ZeroVector);
            }
            n
        } else {
            1.0
        };
        let target = labels.map(|y| y[i]);

        for j in 0..classes {
            let wj = head.weight.row(j);
            let z = if angular {
                let c = dot(wj, xi) / (w_norms[j] * x_norm);
                cosines[j] = c;
                if let Some(t) = thetas.as_mut() {
                    t.set(i, j, c.clamp(-lim, lim).acos());
                }
                if margin && Some(j) == target {
                    let (z, dz) = margin_logit(c, cfg);
                    dz_dc[j] = dz;
                    z
                } else {
                    dz_dc[j] = cfg.s;
                    cfg.s * c
                }
            } else {
                dot(wj, xi) + head.bias[j]
            };
            logits.set(i, j, z);
        }

        let Some(yi) = target else { continue };
        let row = logits.row(i);
        total += log_sum_exp(row) - row[yi];

        let Some(g) = grads.as_mut() else { continue };
        let probs = stable_softmax(row);
        for j in 0..classes {
            let gz = (probs[j] - if j == yi { 1.0 } else { 0.0 }) * inv_n;
            if gz == 0.0 {
                continue;
            }
            let wj = head.weight.row(j);
            if angular {
                // c = <w, x> / (|w||x|); dc/dw = (x/|x| - c w/|w|) / |w|, symmetric for x.
                let gc = gz * dz_dc[j];
                if gc == 0.0 {
                    continue;
                }
                let c = cosines[j];
                let (wn, xn) = (w_norms[j], x_norm);
                let gw = g.weight.row_mut(j);
                for k in 0..d {
                    gw[k] += gc * (xi[k] / xn - c * wj[k] / wn) / wn;
                }
                let gx = g.features.row_mut(i);
                for k in 0..d {
                    gx[k] += gc * (wj[k] / wn - c * xi[k] / xn) / xn;
                }
            } else {
                let gw = g.weight.row_mut(j);
                for k in 0..d {
                    gw[k] += gz * xi[k];
                }
                g.bias[j] += gz;
                let gx = g.features.row_mut(i);
                for k in 0..d {
                    gx[k] += gz * wj[k];
                }
            }
        }
    }

    Ok(LossOutput {
        value: total * inv_n,
        logits,
        thetas,
        grads,
    })
}
