//! Epsilon-rule layer-wise relevance propagation through the classifier.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::neuralnet::layers::conv_backward_input_cl;
use crate::neuralnet::{ModelParameters, Net, FILTERS, KERNEL, POOL, TIP};
use crate::preprocess::Label;

pub const LRP_EPSILON: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelevanceMap {
    pub scores: Vec<f64>,
    pub target_class: Label,
    pub lead: usize,
    /// Relevance seeded at the target logit.
    pub seeded: f64,
}

impl RelevanceMap {
    pub fn total(&self) -> f64 {
        self.scores.iter().sum()
    }

    /// `|sum of scores - seeded| / |seeded|`.
    pub fn conservation_error(&self) -> f64 {
        (self.total() - self.seeded).abs() / self.seeded.abs()
    }
}

fn stabilise(z: f64, eps: f64) -> f64 {
    if z >= 0.0 {
        z + eps
    } else {
        z - eps
    }
}

/// Epsilon rule for a dense layer with `weights[in][out]`.
pub fn lrp_linear(
    relevance_out: &[f64],
    inputs: &[f64],
    weights: &[f64],
    biases: &[f64],
    epsilon: f64,
) -> Result<Vec<f64>> {
    let (n_in, n_out) = (inputs.len(), relevance_out.len());
    if weights.len() != n_in * n_out {
        return Err(Error::ShapeMismatch {
            what: "dense weights",
            expected: n_in * n_out,
            got: weights.len(),
        });
    }
    if biases.len() != n_out {
        return Err(Error::ShapeMismatch {
            what: "dense biases",
            expected: n_out,
            got: biases.len(),
        });
    }
    if !(epsilon > 0.0) {
        return Err(Error::InvalidConfig(format!("epsilon must be positive, got {epsilon}")));
    }
    let mut z = biases.to_vec();
    for (x, row) in inputs.iter().zip(weights.chunks_exact(n_out)) {
        for (zj, w) in z.iter_mut().zip(row) {
            *zj += x * w;
        }
    }
    let s: Vec<f64> = z
        .iter()
        .zip(relevance_out)
        .map(|(zj, r)| r / stabilise(*zj, epsilon))
        .collect();
    Ok(inputs
        .iter()
        .zip(weights.chunks_exact(n_out))
        .map(|(x, row)| x * row.iter().zip(&s).map(|(w, sj)| w * sj).sum::<f64>())
        .collect())
}

/// Average pooling seen as a fixed linear map with weights `1/pool`.
/// Inputs past the last full window receive no relevance.
pub fn lrp_avgpool(relevance_out: &[f64], inputs: &[f64], pool: usize, epsilon: f64) -> Result<Vec<f64>> {
    if pool == 0 || inputs.len() / pool != relevance_out.len() {
        return Err(Error::ShapeMismatch {
            what: "pooled length",
            expected: inputs.len() / pool.max(1),
            got: relevance_out.len(),
        });
    }
    Ok(pool_cl(relevance_out, inputs, 1, pool, epsilon))
}

/// Channel-last pooling rule.
fn pool_cl(relevance_out: &[f64], inputs: &[f64], ch: usize, pool: usize, eps: f64) -> Vec<f64> {
    let mut r_in = vec![0.0; inputs.len()];
    let scale = 1.0 / pool as f64;
    for (j, r_row) in relevance_out.chunks_exact(ch).enumerate() {
        for c in 0..ch {
            let z: f64 = (0..pool).map(|s| inputs[(j * pool + s) * ch + c] * scale).sum();
            let s_val = r_row[c] / stabilise(z, eps);
            for s in 0..pool {
                let at = (j * pool + s) * ch + c;
                r_in[at] = inputs[at] * scale * s_val;
            }
        }
    }
    r_in
}

/// Relevance of a ReLU'd convolution's inputs. `act` is the post-ReLU
/// output; units that were clipped carry no relevance.
fn conv_cl(relevance_out: &[f64], act: &[f64], inputs: &[f64], in_ch: usize, kernel_t: &[f64], eps: f64) -> Vec<f64> {
    let s: Vec<f64> = relevance_out
        .iter()
        .zip(act)
        .map(|(r, a)| if *a > 0.0 { r / (a + eps) } else { 0.0 })
        .collect();
    let mut c = vec![0.0; inputs.len()];
    conv_backward_input_cl(&s, FILTERS, kernel_t, in_ch, KERNEL, &mut c);
    for (ci, x) in c.iter_mut().zip(inputs) {
        *ci *= x;
    }
    c
}

/// Propagate the target logit back to the input time steps.
pub fn explain(model: &ModelParameters, segment: &[f64], target: Label) -> Result<RelevanceMap> {
    explain_with(model, segment, target, LRP_EPSILON)
}

pub fn explain_with(model: &ModelParameters, segment: &[f64], target: Label, eps: f64) -> Result<RelevanceMap> {
    if segment.len() != model.input_window {
        return Err(Error::ShapeMismatch {
            what: "segment length",
            expected: model.input_window,
            got: segment.len(),
        });
    }
    let net = Net::new(model);
    let act = net.forward(segment);
    let class = match target {
        Label::Tipping => TIP,
        Label::NonTipping => 1 - TIP,
    };
    let seeded = act.logits[class];
    let mut r_out = [0.0; 2];
    r_out[class] = seeded;

    let r_p2 = lrp_linear(&r_out, &act.p2, &model.dense_w, &model.dense_b, eps)?;
    let r_a2 = pool_cl(&r_p2, &act.a2, FILTERS, POOL, eps);
    let r_p1 = conv_cl(&r_a2, &act.a2, &act.p1, FILTERS, &net.k2t, eps);
    let r_a1 = pool_cl(&r_p1, &act.a1, FILTERS, POOL, eps);
    let scores = conv_cl(&r_a1, &act.a1, segment, 1, &net.k1t, eps);
    Ok(RelevanceMap {
        scores,
        target_class: target,
        lead: model.lead,
        seeded,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn linear_rule_examples() {
        let r = lrp_linear(&[4.0], &[1.0, 3.0], &[1.0, 1.0], &[0.0], 1e-9).unwrap();
        assert!((r[0] - 1.0).abs() < 1e-8 && (r[1] - 3.0).abs() < 1e-8);
        let zero = lrp_linear(&[0.0], &[1.0, 3.0], &[1.0, 1.0], &[0.0], 1e-6).unwrap();
        assert_eq!(zero, vec![0.0, 0.0]);

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x: Vec<f64> = (0..20).map(|_| rng.random_range(0.0..1.0)).collect();
        let w: Vec<f64> = (0..60).map(|_| rng.random_range(-1.0..1.0)).collect();
        let r_out = [0.3, -1.2, 2.0];
        let r = lrp_linear(&r_out, &x, &w, &[0.0; 3], 1e-6).unwrap();
        let (a, b): (f64, f64) = (r.iter().sum(), r_out.iter().sum());
        assert!((a - b).abs() / b.abs() < 1e-3);
        assert!(lrp_linear(&r_out, &x, &w[..59], &[0.0; 3], 1e-6).is_err());
    }

    #[test]
    fn pooling_rule_examples() {
        let r = lrp_avgpool(&[2.0], &[0.5, 0.5], 2, 1e-6).unwrap();
        assert!((r[0] - 1.0).abs() < 1e-5 && (r[1] - 1.0).abs() < 1e-5);
        let r = lrp_avgpool(&[2.0], &[0.0, 0.8], 2, 1e-9).unwrap();
        assert_eq!(r[0], 0.0);
        assert!((r[1] - 2.0).abs() < 1e-8);
        let r = lrp_avgpool(&[1.0, 3.0], &[2.0, 4.0, 9.0, 1.0], 2, 1e-6).unwrap();
        assert!((r.iter().sum::<f64>() - 4.0).abs() / 4.0 < 1e-6);
    }

    #[test]
    fn zero_model_has_no_relevance() {
        let m = ModelParameters::zeros(40, 0).unwrap();
        let map = explain(&m, &[0.7; 40], Label::Tipping).unwrap();
        assert!(map.scores.iter().all(|v| *v == 0.0));
        assert!(explain(&m, &[0.7; 41], Label::Tipping).is_err());
    }

    #[test]
    fn relevance_is_conserved_without_biases() {
        let m = ModelParameters::init(200, 0, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..10 {
            let x: Vec<f64> = (0..200).map(|_| rng.random_range(-2.0..2.0)).collect();
            for target in [Label::Tipping, Label::NonTipping] {
                let map = explain(&m, &x, target).unwrap();
                assert!(map.conservation_error() < 1e-3, "{}", map.conservation_error());
                assert!(map.scores.iter().all(|v| v.is_finite()));
            }
        }
    }

    /// Kernels symmetric in their taps and a dense layer symmetric in
    /// position make the network commute with time reversal.
    #[test]
    fn reversal_equivariance() {
        let w = 202;
        let mut m = ModelParameters::init(w, 0, 8).unwrap();
        for k in m.conv1_k.chunks_exact_mut(3).chain(m.conv2_k.chunks_exact_mut(3)) {
            k[2] = k[0];
        }
        let positions = m.shape().pool2;
        for j in 0..positions / 2 {
            for f in 0..FILTERS * 2 {
                let src = j * FILTERS * 2 + f;
                let dst = (positions - 1 - j) * FILTERS * 2 + f;
                m.dense_w[dst] = m.dense_w[src];
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x: Vec<f64> = (0..w).map(|_| rng.random_range(-2.0..2.0)).collect();
        let rev: Vec<f64> = x.iter().rev().copied().collect();
        let a = explain(&m, &x, Label::Tipping).unwrap();
        let b = explain(&m, &rev, Label::Tipping).unwrap();
        assert!((a.seeded - b.seeded).abs() < 1e-12);
        for (u, v) in a.scores.iter().zip(b.scores.iter().rev()) {
            assert!((u - v).abs() < 1e-12, "{u} {v}");
        }
    }
}
