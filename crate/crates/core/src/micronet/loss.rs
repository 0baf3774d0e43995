//! Per-cell loss terms with analytic gradients.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Seeded stream of standard-normal draws for the logit corruption noise.
#[derive(Clone, Debug)]
pub struct NoiseSampler {
    rng: ChaCha8Rng,
}

impl NoiseSampler {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn next(&mut self) -> f64 {
        StandardNormal.sample(&mut self.rng)
    }

    /// `rows` vectors of `len` i.i.d. N(0, 1) draws.
    pub fn draw(&mut self, rows: usize, len: usize) -> Vec<Vec<f64>> {
        (0..rows).map(|_| (0..len).map(|_| self.next()).collect()).collect()
    }
}

fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Softmax cross-entropy `-log softmax(z)[label]` and its gradient
/// `softmax(z) - onehot(label)`.
pub fn ce_loss(z: &[f64], label: usize) -> (f64, Vec<f64>) {
    let lse = log_sum_exp(z);
    let loss = (lse - z[label]).max(0.0);
    let mut grad: Vec<f64> = z.iter().map(|v| (v - lse).exp()).collect();
    grad[label] -= 1.0;
    (loss, grad)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttenuatedLoss {
    pub loss: f64,
    pub grad_z: Vec<f64>,
    pub grad_s: Vec<f64>,
}

/// Classification loss under Gaussian logit corruption with learned variance:
///
/// `L = -log( (1/T') * sum_t softmax(z + exp(s/2) * eps_t)[label] )`
///
/// where `s = log sigma^2` and `eps` holds the T' frozen noise vectors.
/// Gradients flow through the sampled noise (reparameterisation).
pub fn attenuated_cls_loss_with_noise(z: &[f64], s: &[f64], label: usize, eps: &[Vec<f64>]) -> Result<AttenuatedLoss> {
    let k = z.len();
    if s.len() != k || label >= k {
        return Err(Error::Argument(format!(
            "logits {k}, log-variances {}, label {label}",
            s.len()
        )));
    }
    if eps.is_empty() {
        return Err(Error::Argument("need at least one noise sample".into()));
    }
    if z.iter().chain(s).any(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("attenuated loss inputs z={z:?} s={s:?}")));
    }
    let sigma: Vec<f64> = s.iter().map(|v| (0.5 * v).exp()).collect();
    let t_count = eps.len() as f64;

    // log p_t for every sample, then the softmax weights w_t = p_t / sum p
    let mut corrupted = Vec::with_capacity(eps.len());
    let mut log_p = Vec::with_capacity(eps.len());
    for e in eps {
        let u: Vec<f64> = (0..k).map(|c| z[c] + sigma[c] * e[c]).collect();
        let lse = log_sum_exp(&u);
        log_p.push(u[label] - lse);
        corrupted.push((u, lse));
    }
    let lse_p = log_sum_exp(&log_p);
    let loss = (t_count.ln() - lse_p).max(0.0);
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("attenuated loss z={z:?} s={s:?}")));
    }

    let mut grad_z = vec![0.0; k];
    let mut grad_s = vec![0.0; k];
    for ((e, (u, lse)), lp) in eps.iter().zip(&corrupted).zip(&log_p) {
        let w = (lp - lse_p).exp();
        for c in 0..k {
            let q = (u[c] - lse).exp();
            let onehot = if c == label { 1.0 } else { 0.0 };
            // dL/du_tc = -w_t (onehot - q_tc)
            let du = w * (q - onehot);
            grad_z[c] += du;
            grad_s[c] += du * e[c] * 0.5 * sigma[c];
        }
    }
    if grad_z.iter().chain(&grad_s).any(|g| !g.is_finite()) {
        return Err(Error::Numeric(format!("attenuated loss gradient z={z:?} s={s:?}")));
    }
    Ok(AttenuatedLoss { loss, grad_z, grad_s })
}

/// [`attenuated_cls_loss_with_noise`] drawing `samples` noise vectors from `sampler`.
pub fn attenuated_cls_loss(
    z: &[f64],
    s: &[f64],
    label: usize,
    samples: usize,
    sampler: &mut NoiseSampler,
) -> Result<AttenuatedLoss> {
    let eps = sampler.draw(samples, z.len());
    attenuated_cls_loss_with_noise(z, s, label, &eps)
}

/// Summed smooth-L1 over components with its gradient.
pub fn smooth_l1(pred: &[f64], target: &[f64]) -> (f64, Vec<f64>) {
    debug_assert_eq!(pred.len(), target.len());
    let mut loss = 0.0;
    let grad = pred
        .iter()
        .zip(target)
        .map(|(p, t)| {
            let x = p - t;
            if x.abs() < 1.0 {
                loss += 0.5 * x * x;
                x
            } else {
                loss += x.abs() - 0.5;
                x.signum()
            }
        })
        .collect();
    (loss, grad)
}
