//! Finite-difference check of the analytic gradients of both losses.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::gin::GraphInput;
use super::train::{pair_loss_grad, throughput_loss_grad};
use super::{PredictorModel, Sample};

pub const STEP: f64 = 1e-5;
/// Weights checked per call.
pub const SUBSET: usize = 256;
/// Denominator floor for the relative error. Central differences carry about
/// `1e-16 * |loss| / STEP` of rounding noise, so gradients far below this
/// floor are compared absolutely.
pub const FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradCheck {
    /// Worst relative error of the throughput (MAPE) gradient.
    pub mape: f64,
    /// Worst relative error of the pairwise (cross-entropy) gradient.
    pub bce: f64,
    pub checked: usize,
}

impl GradCheck {
    pub fn max(&self) -> f64 {
        self.mape.max(self.bce)
    }
}

fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

/// Compares analytic gradients against central differences on a seeded
/// random subset of weights: the MAPE loss of `a`, and the cross-entropy of
/// the pair (`a`, `b`) labelled by their throughputs.
pub fn grad_check(model: &PredictorModel, a: &Sample, b: &Sample, seed: u64) -> GradCheck {
    let ga = GraphInput::new(a.graph.in_neighbors(), model.features(&a.raw).rows());
    let gb = GraphInput::new(b.graph.in_neighbors(), model.features(&b.raw).rows());
    let a_faster = a.throughput > b.throughput;
    let n = model.params.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let idx = sample(&mut rng, n, SUBSET.min(n)).into_vec();

    let mut p = model.params.clone();
    let mut analytic_t = vec![0.0; n];
    throughput_loss_grad(&p, &ga, a.throughput, &mut analytic_t);
    let mut analytic_r = vec![0.0; n];
    pair_loss_grad(&p, &ga, &gb, a_faster, &mut analytic_r);

    let mut scratch = vec![0.0; n];
    let mut worst = GradCheck {
        mape: 0.0,
        bce: 0.0,
        checked: idx.len(),
    };
    for &i in &idx {
        let orig = p.data[i];
        p.data[i] = orig + STEP;
        let tp = throughput_loss_grad(&p, &ga, a.throughput, &mut scratch);
        let rp = pair_loss_grad(&p, &ga, &gb, a_faster, &mut scratch);
        p.data[i] = orig - STEP;
        let tm = throughput_loss_grad(&p, &ga, a.throughput, &mut scratch);
        let rm = pair_loss_grad(&p, &ga, &gb, a_faster, &mut scratch);
        p.data[i] = orig;
        worst.mape = worst.mape.max(rel_error(analytic_t[i], (tp - tm) / (2.0 * STEP)));
        worst.bce = worst.bce.max(rel_error(analytic_r[i], (rp - rm) / (2.0 * STEP)));
    }
    worst
}
