//! Training loops for both heads: MAPE on throughput, binary cross-entropy on
//! scheme pairs, Adam updates, 70/30 split by system.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::gin::{self, Block, GraphInput, Params};
use super::{make_pairs, PairSample, PredictorError, PredictorModel, Sample, DEFAULT_HIDDEN};
use crate::sysgraph::Normalizer;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
    pub hidden: usize,
    pub batch_size: usize,
    /// Share of systems used for training; the rest is held out.
    pub train_fraction: f64,
    /// Largest global gradient norm per step; 0 disables clipping.
    pub clip_norm: f64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            epochs: 100,
            lr: 1e-3,
            seed: 0,
            hidden: DEFAULT_HIDDEN,
            batch_size: 32,
            train_fraction: 0.7,
            clip_norm: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThroughputReport {
    /// Mean training loss of each epoch.
    pub epoch_loss: Vec<f64>,
    pub n_train: usize,
    pub n_val: usize,
    pub train_mape: f64,
    pub val_mape: f64,
    /// Fraction of held-out predictions within 20% of the target.
    pub val_within_20: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelativeReport {
    pub epoch_loss: Vec<f64>,
    pub n_train: usize,
    pub n_val: usize,
    pub train_accuracy: f64,
    pub val_accuracy: f64,
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = Self::B1 * self.m[i] + (1.0 - Self::B1) * g;
            self.v[i] = Self::B2 * self.v[i] + (1.0 - Self::B2) * g * g;
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= lr * mh / (vh.sqrt() + Self::EPS);
        }
    }
}

/// Averages over the batch, then clips the global norm.
fn scale_grads(grads: &mut [f64], batch: usize, clip: f64) {
    let mut scale = 1.0 / batch as f64;
    if clip > 0.0 {
        let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt() * scale;
        if norm > clip {
            scale *= clip / norm;
        }
    }
    grads.iter_mut().for_each(|g| *g *= scale);
}

/// Sample indices for training and validation. Whole systems go to one side
/// so validation measures generalization to unseen systems; with a single
/// system the samples themselves are split.
pub fn split_by_system(samples: &[Sample], train_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keys: Vec<u64> = samples
        .iter()
        .map(|s| s.system_key)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if keys.len() < 2 {
        let mut idx: Vec<usize> = (0..samples.len()).collect();
        idx.shuffle(&mut rng);
        let n_train = cut(idx.len(), train_fraction);
        let val = idx.split_off(n_train);
        idx.sort_unstable();
        let mut val = val;
        val.sort_unstable();
        return (idx, val);
    }
    keys.shuffle(&mut rng);
    let n_train = cut(keys.len(), train_fraction);
    let train_keys: BTreeSet<u64> = keys[..n_train].iter().copied().collect();
    (0..samples.len()).partition(|&i| train_keys.contains(&samples[i].system_key))
}

fn cut(n: usize, fraction: f64) -> usize {
    if n < 2 {
        return n;
    }
    ((n as f64 * fraction).round() as usize).clamp(1, n - 1)
}

fn check_samples(samples: &[Sample]) -> Result<(), PredictorError> {
    for (index, s) in samples.iter().enumerate() {
        if !(s.throughput > 0.0 && s.throughput.is_finite()) {
            return Err(PredictorError::InvalidSample {
                index,
                reason: format!("throughput {} is not positive", s.throughput),
            });
        }
        if s.raw.latency_ms.len() != s.graph.node_count() {
            return Err(PredictorError::InvalidSample {
                index,
                reason: "feature count differs from node count".into(),
            });
        }
    }
    Ok(())
}

fn fit_normalizer(samples: &[Sample], idx: &[usize]) -> Result<Normalizer, PredictorError> {
    let values: Vec<f64> = idx
        .iter()
        .flat_map(|&i| samples[i].raw.latency_ms.iter().copied())
        .collect();
    Ok(Normalizer::fit(&values)?)
}

fn inputs(samples: &[Sample], norm: &Normalizer) -> Vec<GraphInput> {
    samples
        .iter()
        .map(|s| GraphInput::new(s.graph.in_neighbors(), s.raw.normalize(norm).rows()))
        .collect()
}

/// MAPE of one prediction; accumulates its gradient into `grads`.
pub(crate) fn throughput_loss_grad(p: &Params, g: &GraphInput, target: f64, grads: &mut [f64]) -> f64 {
    let fwd = gin::forward(p, g);
    let z = gin::throughput_logit(p, &fwd.embedding);
    let pred = gin::softplus(z);
    let loss = (pred - target).abs() / target;
    let d_z = (pred - target).signum() / target * gin::sigmoid(z);
    for (gw, e) in grads[p.range(Block::ThroughputW)].iter_mut().zip(&fwd.embedding) {
        *gw += d_z * e;
    }
    grads[p.range(Block::ThroughputB)][0] += d_z;
    let d_e: Vec<f64> = p.block(Block::ThroughputW).iter().map(|w| d_z * w).collect();
    gin::backward(p, g, &fwd, &d_e, grads);
    loss
}

/// Cross-entropy of one pair (`y` = 1 when `a` is faster); accumulates its
/// gradient into `grads`.
pub(crate) fn pair_loss_grad(
    p: &Params,
    a: &GraphInput,
    b: &GraphInput,
    a_faster: bool,
    grads: &mut [f64],
) -> f64 {
    let fa = gin::forward(p, a);
    let fb = gin::forward(p, b);
    let (loss, d) = pair_loss(p, &fa.embedding, &fb.embedding, a_faster);
    accumulate_score_grad(p, a, &fa, d, grads);
    accumulate_score_grad(p, b, &fb, -d, grads);
    loss
}

/// Loss and its derivative w.r.t. score(a) (score(b) gets the negation).
fn pair_loss(p: &Params, ea: &[f64], eb: &[f64], a_faster: bool) -> (f64, f64) {
    let diff = gin::relative_score(p, ea) - gin::relative_score(p, eb);
    let y = if a_faster { 1.0 } else { 0.0 };
    // -log(sigmoid(diff)) for y = 1, -log(1 - sigmoid(diff)) for y = 0
    let loss = if a_faster { gin::softplus(-diff) } else { gin::softplus(diff) };
    (loss, gin::pair_probability(diff, 0.0) - y)
}

fn accumulate_score_grad(p: &Params, g: &GraphInput, fwd: &gin::Forward, d_score: f64, grads: &mut [f64]) {
    for (gw, e) in grads[p.range(Block::RelativeW)].iter_mut().zip(&fwd.embedding) {
        *gw += d_score * e;
    }
    let d_e: Vec<f64> = p.block(Block::RelativeW).iter().map(|w| d_score * w).collect();
    gin::backward(p, g, fwd, &d_e, grads);
}

/// The constant with the lowest MAPE over `targets`: their median weighted
/// by `1 / target`.
fn mape_constant(targets: &[f64]) -> f64 {
    let mut sorted = targets.to_vec();
    sorted.sort_by(f64::total_cmp);
    let half = sorted.iter().map(|t| 1.0 / t).sum::<f64>() / 2.0;
    let mut acc = 0.0;
    for &t in &sorted {
        acc += 1.0 / t;
        if acc >= half {
            return t;
        }
    }
    sorted[sorted.len() - 1]
}

/// Learning rate for `epoch`: cosine decay from `lr` to `lr * LR_FLOOR`.
fn scheduled_lr(opts: &TrainOptions, epoch: usize) -> f64 {
    let t = epoch as f64 / opts.epochs.max(1) as f64;
    let scale = LR_FLOOR + (1.0 - LR_FLOOR) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos());
    opts.lr * scale
}

const LR_FLOOR: f64 = 0.05;

/// Fits the encoder and throughput head on the training share of
/// `samples` and reports held-out error.
pub fn train_throughput(
    samples: &[Sample],
    opts: &TrainOptions,
) -> Result<(PredictorModel, ThroughputReport), PredictorError> {
    if samples.len() < 2 {
        return Err(PredictorError::NotEnoughSamples {
            needed: 2,
            got: samples.len(),
        });
    }
    check_samples(samples)?;
    let (train, val) = split_by_system(samples, opts.train_fraction, opts.seed);
    let norm = fit_normalizer(samples, &train)?;
    let data = inputs(samples, &norm);
    let mut model = PredictorModel::new(opts.hidden, opts.seed, norm)?;

    let targets: Vec<f64> = train.iter().map(|&i| samples[i].throughput).collect();
    if targets.iter().all(|&t| t == targets[0]) {
        log::warn!("all training targets equal {}; the throughput head has nothing to learn", targets[0]);
    }
    model.params.block_mut(Block::ThroughputB)[0] = gin::softplus_inverse(mape_constant(&targets));

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x5eed);
    let mut adam = Adam::new(model.params.len());
    let mut grads = vec![0.0; model.params.len()];
    let mut order = train.clone();
    let mut epoch_loss = Vec::with_capacity(opts.epochs);
    let batch = opts.batch_size.max(1);
    for epoch in 0..opts.epochs {
        order.shuffle(&mut rng);
        let lr = scheduled_lr(opts, epoch);
        let mut total = 0.0;
        for chunk in order.chunks(batch) {
            grads.iter_mut().for_each(|g| *g = 0.0);
            for &i in chunk {
                total += throughput_loss_grad(&model.params, &data[i], samples[i].throughput, &mut grads);
            }
            scale_grads(&mut grads, chunk.len(), opts.clip_norm);
            adam.step(&mut model.params.data, &grads, lr);
        }
        epoch_loss.push(total / order.len() as f64);
    }
    model.meta.throughput_trained = true;

    let errors = |idx: &[usize]| -> Vec<f64> {
        idx.iter()
            .map(|&i| {
                let e = gin::forward(&model.params, &data[i]).embedding;
                let pred = gin::softplus(gin::throughput_logit(&model.params, &e));
                (pred - samples[i].throughput).abs() / samples[i].throughput
            })
            .collect()
    };
    let mean_of = |v: &[f64]| if v.is_empty() { f64::NAN } else { v.iter().sum::<f64>() / v.len() as f64 };
    let train_err = errors(&train);
    let val_err = errors(&val);
    let within = val_err.iter().filter(|&&e| e <= 0.2).count() as f64 / val_err.len().max(1) as f64;
    let report = ThroughputReport {
        epoch_loss,
        n_train: train.len(),
        n_val: val.len(),
        train_mape: mean_of(&train_err),
        val_mape: mean_of(&val_err),
        val_within_20: within,
    };
    Ok((model, report))
}

/// Fits the encoder and pairwise head on pairs drawn within each training
/// system, and reports held-out pair accuracy. Pairs are built with
/// [`make_pairs`].
pub fn train_relative(
    samples: &[Sample],
    opts: &TrainOptions,
) -> Result<(PredictorModel, RelativeReport), PredictorError> {
    if samples.len() < 2 {
        return Err(PredictorError::NotEnoughSamples {
            needed: 2,
            got: samples.len(),
        });
    }
    check_samples(samples)?;
    let (train, _) = split_by_system(samples, opts.train_fraction, opts.seed);
    let in_train: BTreeSet<usize> = train.iter().copied().collect();
    let pairs = make_pairs(samples);
    let (train_pairs, val_pairs): (Vec<PairSample>, Vec<PairSample>) = pairs
        .iter()
        .filter(|p| in_train.contains(&p.a) == in_train.contains(&p.b))
        .partition(|p| in_train.contains(&p.a));
    if train_pairs.is_empty() {
        return Err(PredictorError::NoPairs);
    }
    let norm = fit_normalizer(samples, &train)?;
    let data = inputs(samples, &norm);
    let mut model = PredictorModel::new(opts.hidden, opts.seed, norm)?;
    let epoch_loss = fit_pairs(&mut model.params, &data, &train_pairs, opts);
    model.meta.relative_trained = true;

    let report = RelativeReport {
        epoch_loss,
        n_train: train_pairs.len(),
        n_val: val_pairs.len(),
        train_accuracy: accuracy_on(&model.params, &data, &train_pairs),
        val_accuracy: accuracy_on(&model.params, &data, &val_pairs),
    };
    Ok((model, report))
}

fn fit_pairs(params: &mut Params, data: &[GraphInput], pairs: &[PairSample], opts: &TrainOptions) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x9a1f);
    let mut adam = Adam::new(params.len());
    let mut grads = vec![0.0; params.len()];
    // Pairs of one system share samples, so batches drawn system by system
    // need far fewer encoder passes than uniformly shuffled ones.
    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut group_of: BTreeMap<usize, usize> = BTreeMap::new();
    for (k, pr) in pairs.iter().enumerate() {
        let g = match (group_of.get(&pr.a), group_of.get(&pr.b)) {
            (Some(&g), _) | (None, Some(&g)) => g,
            (None, None) => {
                groups.push(Vec::new());
                groups.len() - 1
            }
        };
        group_of.insert(pr.a, g);
        group_of.insert(pr.b, g);
        groups[g].push(k);
    }
    let mut order = Vec::with_capacity(pairs.len());
    let mut epoch_loss = Vec::with_capacity(opts.epochs);
    let batch = opts.batch_size.max(1);
    for epoch in 0..opts.epochs {
        groups.shuffle(&mut rng);
        order.clear();
        for g in groups.iter_mut() {
            g.shuffle(&mut rng);
            order.extend_from_slice(g);
        }
        let lr = scheduled_lr(opts, epoch);
        let mut total = 0.0;
        for chunk in order.chunks(batch) {
            grads.iter_mut().for_each(|g| *g = 0.0);
            // one forward/backward per distinct sample in the batch
            let mut fwd: BTreeMap<usize, (gin::Forward, f64)> = BTreeMap::new();
            for &k in chunk {
                for i in [pairs[k].a, pairs[k].b] {
                    fwd.entry(i).or_insert_with(|| (gin::forward(params, &data[i]), 0.0));
                }
            }
            for &k in chunk {
                let pr = pairs[k];
                let (loss, d) = pair_loss(params, &fwd[&pr.a].0.embedding, &fwd[&pr.b].0.embedding, pr.a_faster);
                total += loss;
                fwd.get_mut(&pr.a).unwrap().1 += d;
                fwd.get_mut(&pr.b).unwrap().1 -= d;
            }
            for (i, (f, d_score)) in &fwd {
                accumulate_score_grad(params, &data[*i], f, *d_score, &mut grads);
            }
            scale_grads(&mut grads, chunk.len(), opts.clip_norm);
            adam.step(&mut params.data, &grads, lr);
        }
        epoch_loss.push(total / pairs.len().max(1) as f64);
    }
    epoch_loss
}

fn accuracy_on(p: &Params, data: &[GraphInput], pairs: &[PairSample]) -> f64 {
    if pairs.is_empty() {
        return f64::NAN;
    }
    let mut scores: BTreeMap<usize, f64> = BTreeMap::new();
    let mut score = |i: usize| {
        *scores
            .entry(i)
            .or_insert_with(|| gin::relative_score(p, &gin::forward(p, &data[i]).embedding))
    };
    let correct = pairs
        .iter()
        .filter(|pr| {
            let prob = gin::pair_probability(score(pr.a), score(pr.b));
            (prob > 0.5) == pr.a_faster && prob != 0.5
        })
        .count();
    correct as f64 / pairs.len() as f64
}

/// Share of `pairs` whose label the pairwise head gets right. An exact 0.5
/// counts as wrong for both orientations.
pub fn pair_accuracy(model: &PredictorModel, samples: &[Sample], pairs: &[PairSample]) -> f64 {
    let data = inputs(samples, &model.normalizer);
    accuracy_on(&model.params, &data, pairs)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mape(c: f64, targets: &[f64]) -> f64 {
        targets.iter().map(|t| (c - t).abs() / t).sum::<f64>()
    }

    #[test]
    fn mape_constant_beats_every_other_candidate() {
        let targets = [0.5, 2.0, 3.0, 40.0, 100.0, 7.5];
        let best = mape_constant(&targets);
        assert!(targets.contains(&best));
        // MAPE is piecewise linear in the constant, so its minimum sits on a target
        let brute = targets
            .iter()
            .copied()
            .min_by(|a, b| mape(*a, &targets).total_cmp(&mape(*b, &targets)))
            .unwrap();
        assert_eq!(mape(best, &targets), mape(brute, &targets));
        assert_eq!(mape_constant(&[4.0]), 4.0);
    }

    #[test]
    fn lr_decays_from_full_to_floor() {
        let opts = TrainOptions { epochs: 10, lr: 2.0, ..Default::default() };
        assert_eq!(scheduled_lr(&opts, 0), 2.0);
        let lrs: Vec<f64> = (0..10).map(|e| scheduled_lr(&opts, e)).collect();
        assert!(lrs.windows(2).all(|w| w[1] < w[0]));
        assert!(lrs[9] > 2.0 * LR_FLOOR);
        let at_end = TrainOptions { epochs: 1, ..opts };
        assert_eq!(scheduled_lr(&at_end, 1), 2.0 * LR_FLOOR);
    }
}
