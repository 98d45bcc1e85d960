//! Multinomial logistic regression on raw pixels of all modalities.
//! Confirms a dataset is linearly separable before a network is blamed for
//! failing on it. Plain full-batch gradient descent, no autodiff.

use crate::metrics::{metrics, Metrics};
use crate::synth::SyntheticDataset;
use crate::error::Result;

#[derive(Clone, Copy, Debug)]
pub struct ProbeConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    pub l2: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            iterations: 150,
            learning_rate: 1.0,
            l2: 1e-4,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LinearProbe {
    /// `classes × features`, row-major.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    features: usize,
    scale: f64,
}

fn features(ds: &SyntheticDataset, i: usize) -> Vec<f64> {
    (0..ds.spec.modalities)
        .flat_map(|j| ds.sample(i, j).iter().copied())
        .collect()
}

fn softmax_in_place(z: &mut [f64]) {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in z.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    z.iter_mut().for_each(|v| *v /= s);
}

impl LinearProbe {
    pub fn fit(ds: &SyntheticDataset, train: &[usize], cfg: ProbeConfig) -> Self {
        let k = ds.spec.classes;
        let xs: Vec<Vec<f64>> = train.iter().map(|&i| features(ds, i)).collect();
        let d = xs[0].len();
        let mut probe = Self {
            weights: vec![0.0; k * d],
            bias: vec![0.0; k],
            features: d,
            // Keeps logits of order one regardless of the pixel count.
            scale: 1.0 / (d as f64).sqrt(),
        };
        let n = xs.len() as f64;
        let mut gw = vec![0.0; k * d];
        let mut gb = vec![0.0; k];
        for _ in 0..cfg.iterations {
            gw.iter_mut().for_each(|v| *v = 0.0);
            gb.iter_mut().for_each(|v| *v = 0.0);
            for (x, &i) in xs.iter().zip(train) {
                let mut p = probe.logits(x);
                softmax_in_place(&mut p);
                p[ds.labels[i]] -= 1.0;
                for (c, &r) in p.iter().enumerate() {
                    gb[c] += r;
                    let row = &mut gw[c * d..(c + 1) * d];
                    row.iter_mut().zip(x).for_each(|(g, &xv)| *g += r * xv * probe.scale);
                }
            }
            let lr = cfg.learning_rate;
            for (w, g) in probe.weights.iter_mut().zip(&gw) {
                *w -= lr * (g / n + cfg.l2 * *w);
            }
            for (b, g) in probe.bias.iter_mut().zip(&gb) {
                *b -= lr * g / n;
            }
        }
        probe
    }

    fn logits(&self, x: &[f64]) -> Vec<f64> {
        let d = self.features;
        self.bias
            .iter()
            .enumerate()
            .map(|(c, &b)| {
                let row = &self.weights[c * d..(c + 1) * d];
                b + self.scale * row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()
            })
            .collect()
    }

    pub fn evaluate(&self, ds: &SyntheticDataset, indices: &[usize]) -> Result<Metrics> {
        let scores: Vec<Vec<f64>> = indices
            .iter()
            .map(|&i| {
                let mut z = self.logits(&features(ds, i));
                softmax_in_place(&mut z);
                z
            })
            .collect();
        metrics(&scores, &ds.labels_of(indices))
    }
}

/// Fits on the training split and scores the test split.
pub fn linear_probe(ds: &SyntheticDataset, cfg: ProbeConfig) -> Result<Metrics> {
    let (train, _, test) = ds.spec.split();
    let train: Vec<usize> = train.collect();
    let test: Vec<usize> = test.collect();
    LinearProbe::fit(ds, &train, cfg).evaluate(ds, &test)
}
