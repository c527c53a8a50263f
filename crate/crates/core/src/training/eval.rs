//! Frozen-backbone evaluation: nearest-neighbour retrieval and a linear probe.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::encoders::{rgb_batch, DualEncoder};
use crate::error::{Error, Result};
use crate::synth::{extract_clip, valid_starts, SyntheticVideo};
use crate::tensor::{Tape, Tensor};

/// Feature rows with one label each.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledFeatures {
    pub features: Tensor,
    pub labels: Vec<u32>,
}

impl LabeledFeatures {
    pub fn new(features: Tensor, labels: Vec<u32>) -> Result<Self> {
        if features.ndim() != 2 || features.shape()[0] != labels.len() {
            return Err(Error::shape(
                "labeled_features",
                format!("{:?} features for {} labels", features.shape(), labels.len()),
            ));
        }
        Ok(LabeledFeatures { features, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let d = self.dim();
        &self.features.data()[i * d..(i + 1) * d]
    }
}

/// Start of the middle candidate window, used as each video's evaluation clip.
pub fn eval_start(video: &SyntheticVideo, clip_len: usize, stride: usize) -> Result<usize> {
    let starts = valid_starts(video.num_frames, clip_len, stride)?;
    Ok(starts.end() / 2)
}

/// Pooled last-stage RGB features of each video's evaluation clip.
pub fn embed_videos(
    encoder: &DualEncoder,
    videos: &[SyntheticVideo],
    clip_len: usize,
    stride: usize,
) -> Result<LabeledFeatures> {
    const CHUNK: usize = 16;
    if videos.is_empty() {
        return Err(Error::invalid("no videos to embed"));
    }
    let mut data = Vec::new();
    let mut dim = 0;
    for chunk in videos.chunks(CHUNK) {
        let clips = chunk
            .iter()
            .map(|v| extract_clip(v, eval_start(v, clip_len, stride)?, clip_len, stride))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<_> = clips.iter().collect();
        let f = encoder.embed_rgb(&rgb_batch(&refs)?)?;
        dim = f.shape()[1];
        data.extend_from_slice(f.data());
    }
    let labels = videos.iter().map(|v| v.label).collect();
    LabeledFeatures::new(Tensor::new(vec![videos.len(), dim], data)?, labels)
}

fn unit(row: &[f64]) -> Vec<f64> {
    let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n == 0.0 {
        row.to_vec()
    } else {
        row.iter().map(|v| v / n).collect()
    }
}

/// Training-set indices ordered by decreasing cosine similarity to `query`; ties keep index order.
pub fn neighbours(query: &[f64], gallery: &LabeledFeatures) -> Vec<usize> {
    let q = unit(query);
    let sims: Vec<f64> = (0..gallery.len())
        .map(|i| unit(gallery.row(i)).iter().zip(&q).map(|(a, b)| a * b).sum())
        .collect();
    let mut order: Vec<usize> = (0..gallery.len()).collect();
    order.sort_by(|&a, &b| sims[b].total_cmp(&sims[a]).then(a.cmp(&b)));
    order
}

/// R@k for each `k`: the share of test queries with a same-class clip among their k nearest training clips.
pub fn recall_at_k(train: &LabeledFeatures, test: &LabeledFeatures, ks: &[usize]) -> Result<Vec<(usize, f64)>> {
    if train.is_empty() || test.is_empty() {
        return Err(Error::invalid("retrieval needs non-empty train and test sets"));
    }
    if train.dim() != test.dim() {
        return Err(Error::shape("retrieval", format!("{} vs {}", train.dim(), test.dim())));
    }
    if ks.contains(&0) {
        return Err(Error::invalid("k must be positive"));
    }
    let first_hit: Vec<usize> = (0..test.len())
        .map(|i| {
            neighbours(test.row(i), train)
                .iter()
                .position(|&j| train.labels[j] == test.labels[i])
                .unwrap_or(usize::MAX)
        })
        .collect();
    Ok(ks
        .iter()
        .map(|&k| {
            let hits = first_hit.iter().filter(|&&r| r < k).count();
            (k, hits as f64 / test.len() as f64)
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            epochs: 300,
            lr: 0.5,
            weight_decay: 1e-4,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeResult {
    pub train_accuracy: f64,
    pub test_accuracy: f64,
}

/// Standardises with training statistics, then fits softmax regression by full-batch gradient descent.
pub fn linear_probe(
    train: &LabeledFeatures,
    test: &LabeledFeatures,
    num_classes: usize,
    config: ProbeConfig,
) -> Result<ProbeResult> {
    if train.is_empty() || test.is_empty() {
        return Err(Error::invalid("probe needs non-empty train and test sets"));
    }
    if train.dim() != test.dim() {
        return Err(Error::shape("linear_probe", format!("{} vs {}", train.dim(), test.dim())));
    }
    if let Some(&l) = train.labels.iter().chain(&test.labels).find(|&&l| l as usize >= num_classes) {
        return Err(Error::invalid(format!("label {} outside {} classes", l, num_classes)));
    }
    let (n, d) = (train.len(), train.dim());
    let mut mean = vec![0.0; d];
    let mut std = vec![0.0; d];
    for i in 0..n {
        for (m, v) in mean.iter_mut().zip(train.row(i)) {
            *m += v / n as f64;
        }
    }
    for i in 0..n {
        for ((s, v), m) in std.iter_mut().zip(train.row(i)).zip(&mean) {
            *s += (v - m).powi(2) / n as f64;
        }
    }
    let std: Vec<f64> = std.iter().map(|s| s.sqrt().max(1e-8)).collect();
    let standardise = |f: &LabeledFeatures| {
        Tensor::from_fn(&[f.len(), d], |i| (f.features.data()[i] - mean[i % d]) / std[i % d])
    };
    let (xtr, xte) = (standardise(train), standardise(test));
    let onehot = Tensor::from_fn(&[n, num_classes], |i| {
        (train.labels[i / num_classes] as usize == i % num_classes) as u8 as f64
    });

    // Small random init breaks the tie between classes deterministically.
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut w = Tensor::from_fn(&[d, num_classes], |_| {
        *[-1e-3, 1e-3].choose(&mut rng).expect("non-empty")
    });
    let mut b = Tensor::zeros(&[num_classes]);
    for _ in 0..config.epochs {
        let mut tape = Tape::new();
        let wv = tape.variable(w.clone());
        let bv = tape.variable(b.clone());
        let x = tape.constant(xtr.clone());
        let y = tape.constant(onehot.clone());
        let z = tape.matmul(x, wv)?;
        let z = tape.add_bias(z, bv, 1)?;
        let ls = tape.log_softmax(z, 1)?;
        let picked = tape.mul(ls, y)?;
        let s = tape.sum(picked);
        let loss = tape.scale(s, -1.0 / n as f64);
        tape.backward(loss)?;
        let gw = tape.grad(wv).expect("trainable");
        let gb = tape.grad(bv).expect("trainable");
        for (p, g) in w.data_mut().iter_mut().zip(gw.data()) {
            *p -= config.lr * (g + config.weight_decay * *p);
        }
        for (p, g) in b.data_mut().iter_mut().zip(gb.data()) {
            *p -= config.lr * g;
        }
    }
    let accuracy = |x: &Tensor, labels: &[u32]| {
        let hits = (0..labels.len())
            .filter(|&i| {
                let scores: Vec<f64> = (0..num_classes)
                    .map(|c| b.data()[c] + (0..d).map(|k| x.data()[i * d + k] * w.data()[k * num_classes + c]).sum::<f64>())
                    .collect();
                let best = (0..num_classes)
                    .max_by(|&a, &c| scores[a].total_cmp(&scores[c]).then(c.cmp(&a)))
                    .expect("classes");
                best == labels[i] as usize
            })
            .count();
        hits as f64 / labels.len() as f64
    };
    Ok(ProbeResult {
        train_accuracy: accuracy(&xtr, &train.labels),
        test_accuracy: accuracy(&xte, &test.labels),
    })
}
