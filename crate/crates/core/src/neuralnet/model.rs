//! The classifier: conv(64,3) -> ReLU -> avgpool(2) -> conv(64,3) -> ReLU ->
//! avgpool(2) -> dense(2) -> softmax.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::layers::*;
use crate::error::{Error, Result};

pub const FILTERS: usize = 64;
pub const KERNEL: usize = 3;
pub const POOL: usize = 2;
pub const CLASSES: usize = 2;
/// Class index of "tipping" in logits and probabilities.
pub const TIP: usize = 1;
pub const MIN_WINDOW: usize = 10;

/// Layer lengths implied by an input window.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Shape {
    pub window: usize,
    pub conv1: usize,
    pub pool1: usize,
    pub conv2: usize,
    pub pool2: usize,
}

impl Shape {
    pub fn new(window: usize) -> Result<Self> {
        if window < MIN_WINDOW {
            return Err(Error::InvalidConfig(format!(
                "input window {window} is below the minimum {MIN_WINDOW}"
            )));
        }
        let conv1 = window + 1 - KERNEL;
        let pool1 = conv1 / POOL;
        let conv2 = pool1 + 1 - KERNEL;
        let pool2 = conv2 / POOL;
        Ok(Self {
            window,
            conv1,
            pool1,
            conv2,
            pool2,
        })
    }

    pub fn features(&self) -> usize {
        self.pool2 * FILTERS
    }
}

/// All trainable parameters. Kernels are `[out][in][tap]`; the dense weight
/// is `[feature][class]` with features flattened position-major
/// (`position * FILTERS + channel`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParameters {
    pub conv1_k: Vec<f64>,
    pub conv1_b: Vec<f64>,
    pub conv2_k: Vec<f64>,
    pub conv2_b: Vec<f64>,
    pub dense_w: Vec<f64>,
    pub dense_b: Vec<f64>,
    pub lead: usize,
    pub input_window: usize,
}

fn glorot(rng: &mut ChaCha8Rng, n: usize, fan_in: usize, fan_out: usize) -> Vec<f64> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..n).map(|_| rng.random_range(-limit..limit)).collect()
}

impl ModelParameters {
    pub fn zeros(input_window: usize, lead: usize) -> Result<Self> {
        let shape = Shape::new(input_window)?;
        Ok(Self {
            conv1_k: vec![0.0; FILTERS * KERNEL],
            conv1_b: vec![0.0; FILTERS],
            conv2_k: vec![0.0; FILTERS * FILTERS * KERNEL],
            conv2_b: vec![0.0; FILTERS],
            dense_w: vec![0.0; shape.features() * CLASSES],
            dense_b: vec![0.0; CLASSES],
            lead,
            input_window,
        })
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init(input_window: usize, lead: usize, seed: u64) -> Result<Self> {
        let mut m = Self::zeros(input_window, lead)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let features = m.shape().features();
        m.conv1_k = glorot(&mut rng, m.conv1_k.len(), KERNEL, FILTERS * KERNEL);
        m.conv2_k = glorot(&mut rng, m.conv2_k.len(), FILTERS * KERNEL, FILTERS * KERNEL);
        m.dense_w = glorot(&mut rng, m.dense_w.len(), features, CLASSES);
        Ok(m)
    }

    pub fn shape(&self) -> Shape {
        Shape::new(self.input_window).expect("window validated at construction")
    }

    pub fn n_params(&self) -> usize {
        self.blocks().iter().map(|b| b.len()).sum()
    }

    /// Parameter blocks in file order.
    pub fn blocks(&self) -> [&Vec<f64>; 6] {
        [
            &self.conv1_k,
            &self.conv1_b,
            &self.conv2_k,
            &self.conv2_b,
            &self.dense_w,
            &self.dense_b,
        ]
    }

    pub fn blocks_mut(&mut self) -> [&mut Vec<f64>; 6] {
        [
            &mut self.conv1_k,
            &mut self.conv1_b,
            &mut self.conv2_k,
            &mut self.conv2_b,
            &mut self.dense_w,
            &mut self.dense_b,
        ]
    }

    pub fn validate(&self) -> Result<()> {
        let expected = Self::zeros(self.input_window, self.lead)?;
        for (what, (a, b)) in BLOCK_NAMES.iter().zip(self.blocks().iter().zip(expected.blocks())) {
            if a.len() != b.len() {
                return Err(Error::ShapeMismatch {
                    what,
                    expected: b.len(),
                    got: a.len(),
                });
            }
            if a.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidConfig(format!("non-finite value in {what}")));
            }
        }
        Ok(())
    }
}

pub const BLOCK_NAMES: [&str; 6] = ["conv1_k", "conv1_b", "conv2_k", "conv2_b", "dense_w", "dense_b"];

/// Gradients share the parameter layout.
pub type Gradients = ModelParameters;

impl Gradients {
    fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.blocks_mut().into_iter().zip(other.blocks()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }
}

/// Parameters rearranged for the channel-last kernels.
pub(crate) struct Net<'a> {
    pub p: &'a ModelParameters,
    pub shape: Shape,
    pub k1t: Vec<f64>,
    pub k2t: Vec<f64>,
}

/// Every intermediate of one forward pass, channel-last.
#[derive(Clone, Debug)]
pub struct Activations {
    pub input: Vec<f64>,
    /// conv1 output after ReLU.
    pub a1: Vec<f64>,
    pub p1: Vec<f64>,
    /// conv2 output after ReLU.
    pub a2: Vec<f64>,
    pub p2: Vec<f64>,
    pub logits: [f64; CLASSES],
    pub probs: [f64; CLASSES],
}

impl<'a> Net<'a> {
    pub fn new(p: &'a ModelParameters) -> Self {
        Self {
            p,
            shape: p.shape(),
            k1t: transpose_kernel(&p.conv1_k, FILTERS, 1, KERNEL),
            k2t: transpose_kernel(&p.conv2_k, FILTERS, FILTERS, KERNEL),
        }
    }

    pub fn forward(&self, x: &[f64]) -> Activations {
        let s = self.shape;
        let mut a1 = vec![0.0; s.conv1 * FILTERS];
        conv_forward_cl(x, 1, &self.k1t, &self.p.conv1_b, KERNEL, &mut a1);
        relu_in_place(&mut a1);
        let mut p1 = vec![0.0; s.pool1 * FILTERS];
        avgpool_forward_cl(&a1, FILTERS, POOL, &mut p1);
        let mut a2 = vec![0.0; s.conv2 * FILTERS];
        conv_forward_cl(&p1, FILTERS, &self.k2t, &self.p.conv2_b, KERNEL, &mut a2);
        relu_in_place(&mut a2);
        let mut p2 = vec![0.0; s.pool2 * FILTERS];
        avgpool_forward_cl(&a2, FILTERS, POOL, &mut p2);
        let mut logits = [self.p.dense_b[0], self.p.dense_b[1]];
        for (h, w) in p2.iter().zip(self.p.dense_w.chunks_exact(CLASSES)) {
            logits[0] += h * w[0];
            logits[1] += h * w[1];
        }
        let pr = softmax(&logits);
        Activations {
            input: x.to_vec(),
            a1,
            p1,
            a2,
            p2,
            logits,
            probs: [pr[0], pr[1]],
        }
    }

    /// Accumulate the gradient of `weight * (-ln p_label)` into `g`
    /// (kernels in transposed layout, see [`Net::finish`]).
    pub fn backward(&self, act: &Activations, label: usize, weight: f64, g: &mut Gradients) {
        let s = self.shape;
        let mut dlog = [act.probs[0] * weight, act.probs[1] * weight];
        dlog[label] -= weight;

        g.dense_b[0] += dlog[0];
        g.dense_b[1] += dlog[1];
        let mut dp2 = vec![0.0; s.pool2 * FILTERS];
        for ((h, w), (gw, dh)) in act
            .p2
            .iter()
            .zip(self.p.dense_w.chunks_exact(CLASSES))
            .zip(g.dense_w.chunks_exact_mut(CLASSES).zip(dp2.iter_mut()))
        {
            gw[0] += h * dlog[0];
            gw[1] += h * dlog[1];
            *dh = w[0] * dlog[0] + w[1] * dlog[1];
        }

        let mut dz2 = vec![0.0; s.conv2 * FILTERS];
        avgpool_backward_cl(&dp2, FILTERS, POOL, &mut dz2);
        relu_backward_in_place(&act.a2, &mut dz2);
        conv_backward_params_cl(&act.p1, FILTERS, &dz2, FILTERS, KERNEL, &mut g.conv2_k, &mut g.conv2_b);
        let mut dp1 = vec![0.0; s.pool1 * FILTERS];
        conv_backward_input_cl(&dz2, FILTERS, &self.k2t, FILTERS, KERNEL, &mut dp1);

        let mut dz1 = vec![0.0; s.conv1 * FILTERS];
        avgpool_backward_cl(&dp1, FILTERS, POOL, &mut dz1);
        relu_backward_in_place(&act.a1, &mut dz1);
        conv_backward_params_cl(&act.input, 1, &dz1, FILTERS, KERNEL, &mut g.conv1_k, &mut g.conv1_b);
    }

    /// Bring accumulated transposed kernel gradients back to file layout.
    fn finish(&self, mut g: Gradients) -> Gradients {
        g.conv1_k = untranspose_kernel(&g.conv1_k, FILTERS, 1, KERNEL);
        g.conv2_k = untranspose_kernel(&g.conv2_k, FILTERS, FILTERS, KERNEL);
        g
    }
}

fn check_input(model: &ModelParameters, len: usize) -> Result<()> {
    if len != model.input_window {
        return Err(Error::ShapeMismatch {
            what: "segment length",
            expected: model.input_window,
            got: len,
        });
    }
    Ok(())
}

/// `(p_tip, p_no_tip)` for one segment.
pub fn forward(model: &ModelParameters, segment: &[f64]) -> Result<(f64, f64)> {
    check_input(model, segment.len())?;
    let act = Net::new(model).forward(segment);
    Ok((act.probs[TIP], act.probs[1 - TIP]))
}

/// Samples per parallel task; fixed so reductions do not depend on the
/// thread count.
const CHUNK: usize = 16;

/// Tipping probability of each row of a flat `n x window` matrix.
pub fn predict_tip(model: &ModelParameters, flat: &[f64]) -> Result<Vec<f64>> {
    let w = model.input_window;
    if flat.len() % w != 0 {
        return Err(Error::ShapeMismatch {
            what: "flat segment matrix",
            expected: w,
            got: flat.len() % w,
        });
    }
    let net = Net::new(model);
    Ok(flat
        .par_chunks(w)
        .with_min_len(CHUNK)
        .map(|x| net.forward(x).probs[TIP])
        .collect())
}

/// Mean cross-entropy and its gradient over a batch given as row indices
/// into a flat `n x window` matrix.
pub fn loss_and_gradients_indexed(
    model: &ModelParameters,
    flat: &[f64],
    labels: &[usize],
    batch: &[usize],
) -> Result<(f64, Gradients, usize)> {
    if batch.is_empty() {
        return Err(Error::EmptySample);
    }
    let w = model.input_window;
    let net = Net::new(model);
    let weight = 1.0 / batch.len() as f64;
    let partials: Vec<(f64, Gradients, usize)> = batch
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut g = ModelParameters::zeros(w, model.lead).expect("validated window");
            let mut loss = 0.0;
            let mut correct = 0;
            for &i in chunk {
                let act = net.forward(&flat[i * w..(i + 1) * w]);
                let y = labels[i];
                loss -= weight * log_prob(&act.logits, y);
                correct += usize::from(is_correct(act.probs[TIP], y == TIP));
                net.backward(&act, y, weight, &mut g);
            }
            (loss, g, correct)
        })
        .collect();
    let mut iter = partials.into_iter();
    let (mut loss, mut grad, mut correct) = iter.next().expect("nonempty batch");
    for (l, g, c) in iter {
        loss += l;
        grad.add_assign(&g);
        correct += c;
    }
    Ok((loss, net.finish(grad), correct))
}

/// Mean cross-entropy and gradients over `(segment, label)` pairs.
pub fn loss_and_gradients(model: &ModelParameters, segments: &[&[f64]], labels: &[usize]) -> Result<(f64, Gradients)> {
    if segments.len() != labels.len() {
        return Err(Error::ShapeMismatch {
            what: "labels",
            expected: segments.len(),
            got: labels.len(),
        });
    }
    for s in segments {
        check_input(model, s.len())?;
    }
    let flat: Vec<f64> = segments.concat();
    let idx: Vec<usize> = (0..segments.len()).collect();
    let (loss, g, _) = loss_and_gradients_indexed(model, &flat, labels, &idx)?;
    Ok((loss, g))
}

fn log_prob(logits: &[f64; CLASSES], y: usize) -> f64 {
    let max = logits[0].max(logits[1]);
    let lse = max + ((logits[0] - max).exp() + (logits[1] - max).exp()).ln();
    logits[y] - lse
}

/// Strict decision rule: a tipping case needs `p > 0.5`, a non-tipping case
/// `p < 0.5`; exactly one half is wrong either way.
pub fn is_correct(p_tip: f64, is_tipping: bool) -> bool {
    if is_tipping {
        p_tip > 0.5
    } else {
        p_tip < 0.5
    }
}

/// Plain SGD: `param -= lr * grad`.
pub fn sgd_step(model: &mut ModelParameters, grads: &Gradients, learning_rate: f64) {
    for (p, g) in model.blocks_mut().into_iter().zip(grads.blocks()) {
        for (x, d) in p.iter_mut().zip(g) {
            *x -= learning_rate * d;
        }
    }
}

/// Accuracy of tipping probabilities against group membership.
pub fn accuracy_from_probs(p_a: &[f64], p_b: &[f64]) -> f64 {
    let n = p_a.len() + p_b.len();
    if n == 0 {
        return 0.0;
    }
    let hits = p_a.iter().filter(|p| is_correct(**p, true)).count()
        + p_b.iter().filter(|p| is_correct(**p, false)).count();
    hits as f64 / n as f64
}

/// Fraction of correct decisions on group A (tipping) and group B segments.
pub fn accuracy(model: &ModelParameters, group_a: &[&[f64]], group_b: &[&[f64]]) -> Result<f64> {
    for s in group_a.iter().chain(group_b) {
        check_input(model, s.len())?;
    }
    let p_a = predict_tip(model, &group_a.concat())?;
    let p_b = predict_tip(model, &group_b.concat())?;
    Ok(accuracy_from_probs(&p_a, &p_b))
}

fn perturbed(m: &ModelParameters, block: usize, idx: usize, h: f64) -> ModelParameters {
    let mut c = m.clone();
    c.blocks_mut()[block][idx] += h;
    c
}

/// Which ReLU units are active, over a whole batch.
fn relu_pattern(m: &ModelParameters, segments: &[Vec<f64>]) -> Vec<bool> {
    let net = Net::new(m);
    segments
        .iter()
        .flat_map(|x| {
            let act = net.forward(x);
            act.a1.iter().chain(&act.a2).map(|v| *v > 0.0).collect::<Vec<_>>()
        })
        .collect()
}

/// Worst relative gap between analytic and central finite-difference
/// gradients over `per_layer` random coordinates of every parameter block,
/// on a random 8-sample batch. Coordinates whose perturbation switches a
/// ReLU on or off are redrawn, since the loss has a kink there.
pub fn max_gradient_error(window: usize, per_layer: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = ModelParameters::init(window, 0, seed).unwrap();
    for b in [&mut m.conv1_b, &mut m.conv2_b, &mut m.dense_b] {
        for v in b.iter_mut() {
            *v = rng.random_range(-0.1..0.1);
        }
    }
    let segs: Vec<Vec<f64>> = (0..8)
        .map(|_| (0..window).map(|_| rng.random_range(-2.0..2.0)).collect())
        .collect();
    let refs: Vec<&[f64]> = segs.iter().map(|s| s.as_slice()).collect();
    let labels: Vec<usize> = (0..8).map(|i| i % 2).collect();
    let (_, g) = loss_and_gradients(&m, &refs, &labels).unwrap();
    let pattern = relu_pattern(&m, &segs);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for block in 0..6 {
        let n = m.blocks()[block].len();
        let mut checked = 0;
        let mut attempts = 0;
        while checked < per_layer.min(n) && attempts < 20 * per_layer {
            attempts += 1;
            let idx = rng.random_range(0..n);
            let plus = perturbed(&m, block, idx, h);
            let minus = perturbed(&m, block, idx, -h);
            if relu_pattern(&plus, &segs) != pattern || relu_pattern(&minus, &segs) != pattern {
                continue;
            }
            checked += 1;
            let (lp, _) = loss_and_gradients(&plus, &refs, &labels).unwrap();
            let (lm, _) = loss_and_gradients(&minus, &refs, &labels).unwrap();
            let numeric = (lp - lm) / (2.0 * h);
            let analytic = g.blocks()[block][idx];
            let denom = analytic.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max((analytic - numeric).abs() / denom);
        }
    }
    worst
}
