//! One-hidden-layer perceptron with hand-written backpropagation.
//!
//! Parameters live in one flat vector so that model deltas, top-k
//! sparsification and aggregation all operate on plain `&[f32]`. Layout:
//! `W1 (hidden x input) | b1 (hidden) | W2 (output x hidden) | b2 (output)`,
//! row-major.

use rand::Rng;
use rand_distr::{Distribution, Uniform};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TinyMlp {
    pub input: usize,
    pub hidden: usize,
    pub output: usize,
}

/// Borrowed mini-batch: `x` is row-major `labels.len() x input`.
#[derive(Debug, Clone, Copy)]
pub struct Batch<'a> {
    pub x: &'a [f32],
    pub labels: &'a [usize],
}

impl<'a> Batch<'a> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

struct Offsets {
    b1: usize,
    w2: usize,
    b2: usize,
}

impl TinyMlp {
    pub fn new(input: usize, hidden: usize, output: usize) -> Self {
        TinyMlp { input, hidden, output }
    }

    pub fn param_count(&self) -> usize {
        self.input * self.hidden + self.hidden + self.hidden * self.output + self.output
    }

    fn offsets(&self) -> Offsets {
        let b1 = self.input * self.hidden;
        let w2 = b1 + self.hidden;
        let b2 = w2 + self.hidden * self.output;
        Offsets { b1, w2, b2 }
    }

    /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases.
    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f32> {
        let o = self.offsets();
        let mut theta = vec![0.0f32; self.param_count()];
        let l1 = Uniform::new_inclusive(-1.0 / (self.input as f32).sqrt(), 1.0 / (self.input as f32).sqrt());
        let l2 = Uniform::new_inclusive(-1.0 / (self.hidden as f32).sqrt(), 1.0 / (self.hidden as f32).sqrt());
        for w in &mut theta[..o.b1] {
            *w = l1.sample(rng);
        }
        for w in &mut theta[o.w2..o.b2] {
            *w = l2.sample(rng);
        }
        theta
    }

    fn hidden_pre(&self, theta: &[f32], x: &[f32], out: &mut [f32]) {
        let o = self.offsets();
        for (h, slot) in out.iter_mut().enumerate() {
            let row = &theta[h * self.input..(h + 1) * self.input];
            let mut acc = theta[o.b1 + h];
            for (w, &xi) in row.iter().zip(x) {
                // Multi-hot attack inputs are mostly zero.
                if xi != 0.0 {
                    acc += w * xi;
                }
            }
            *slot = acc;
        }
    }

    fn logits(&self, theta: &[f32], hidden: &[f32], out: &mut [f32]) {
        let o = self.offsets();
        for (c, slot) in out.iter_mut().enumerate() {
            let row = &theta[o.w2 + c * self.hidden..o.w2 + (c + 1) * self.hidden];
            *slot = theta[o.b2 + c] + row.iter().zip(hidden).map(|(w, h)| w * h).sum::<f32>();
        }
    }

    /// Class probabilities for one example (inference: no dropout).
    pub fn predict_proba(&self, theta: &[f32], x: &[f32]) -> Vec<f32> {
        let mut h = vec![0.0; self.hidden];
        self.hidden_pre(theta, x, &mut h);
        h.iter_mut().for_each(|v| *v = v.max(0.0));
        let mut z = vec![0.0; self.output];
        self.logits(theta, &h, &mut z);
        softmax_in_place(&mut z);
        z
    }

    pub fn predict(&self, theta: &[f32], x: &[f32]) -> usize {
        argmax(&self.predict_proba(theta, x))
    }

    pub fn accuracy(&self, theta: &[f32], batch: Batch<'_>) -> f64 {
        if batch.is_empty() {
            return 0.0;
        }
        let correct = (0..batch.len())
            .filter(|&i| self.predict(theta, &batch.x[i * self.input..(i + 1) * self.input]) == batch.labels[i])
            .count();
        correct as f64 / batch.len() as f64
    }

    /// Mean cross-entropy over the batch and its gradient. With
    /// `dropout > 0` a fresh inverted-dropout mask is drawn per example.
    pub fn loss_and_grad<R: Rng + ?Sized>(
        &self,
        theta: &[f32],
        batch: Batch<'_>,
        dropout: f32,
        rng: &mut R,
    ) -> (f64, Vec<f32>) {
        let o = self.offsets();
        let mut grad = vec![0.0f32; self.param_count()];
        if batch.is_empty() {
            return (0.0, grad);
        }
        let scale = 1.0 / batch.len() as f32;
        let keep = 1.0 - dropout;
        let mut pre = vec![0.0f32; self.hidden];
        let mut act = vec![0.0f32; self.hidden];
        let mut z = vec![0.0f32; self.output];
        let mut dh = vec![0.0f32; self.hidden];
        let mut loss = 0.0f64;
        for i in 0..batch.len() {
            let x = &batch.x[i * self.input..(i + 1) * self.input];
            let y = batch.labels[i];
            self.hidden_pre(theta, x, &mut pre);
            for (a, &p) in act.iter_mut().zip(&pre) {
                let mask = if dropout > 0.0 {
                    if rng.gen::<f32>() < keep {
                        1.0 / keep
                    } else {
                        0.0
                    }
                } else {
                    1.0
                };
                *a = p.max(0.0) * mask;
            }
            self.logits(theta, &act, &mut z);
            softmax_in_place(&mut z);
            loss -= (z[y].max(1e-12) as f64).ln();
            z[y] -= 1.0;
            dh.iter_mut().for_each(|v| *v = 0.0);
            for c in 0..self.output {
                let dz = z[c] * scale;
                grad[o.b2 + c] += dz;
                let row = o.w2 + c * self.hidden;
                for h in 0..self.hidden {
                    grad[row + h] += dz * act[h];
                    dh[h] += dz * theta[row + h];
                }
            }
            for h in 0..self.hidden {
                // act is zero exactly where ReLU or dropout blocked the unit.
                if act[h] <= 0.0 {
                    continue;
                }
                let mask = if pre[h] > 0.0 { act[h] / pre[h] } else { 0.0 };
                let d = dh[h] * mask;
                grad[o.b1 + h] += d;
                let row = &mut grad[h * self.input..(h + 1) * self.input];
                for (g, &xi) in row.iter_mut().zip(x) {
                    if xi != 0.0 {
                        *g += d * xi;
                    }
                }
            }
        }
        (loss / batch.len() as f64, grad)
    }

    /// Plain minibatch SGD over `epochs` passes. `batch_size == 0` means
    /// full batch. Examples are visited in a fresh random order per epoch.
    #[allow(clippy::too_many_arguments)]
    pub fn sgd<R: Rng + ?Sized>(
        &self,
        theta: &mut [f32],
        data: Batch<'_>,
        lr: f32,
        epochs: usize,
        batch_size: usize,
        dropout: f32,
        rng: &mut R,
    ) {
        let n = data.len();
        if n == 0 {
            return;
        }
        let bs = if batch_size == 0 { n } else { batch_size.min(n) };
        let mut order: Vec<usize> = (0..n).collect();
        let mut xb = Vec::with_capacity(bs * self.input);
        let mut yb = Vec::with_capacity(bs);
        for _ in 0..epochs {
            if bs < n {
                rand::seq::SliceRandom::shuffle(order.as_mut_slice(), rng);
            }
            for chunk in order.chunks(bs) {
                xb.clear();
                yb.clear();
                for &i in chunk {
                    xb.extend_from_slice(&data.x[i * self.input..(i + 1) * self.input]);
                    yb.push(data.labels[i]);
                }
                let (_, g) = self.loss_and_grad(theta, Batch { x: &xb, labels: &yb }, dropout, rng);
                for (t, g) in theta.iter_mut().zip(&g) {
                    *t -= lr * g;
                }
            }
        }
    }
}

pub fn softmax_in_place(z: &mut [f32]) {
    let max = z.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0;
    for v in z.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in z.iter_mut() {
        *v /= sum;
    }
}

/// First index of the maximum.
pub fn argmax(v: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}
