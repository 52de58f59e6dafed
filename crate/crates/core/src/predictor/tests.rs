use proptest::prelude::*;

use super::gin::{self, Block, GraphInput, Params};
use super::*;
use crate::profiles::synth::{random_system, SynthLimits};
use crate::sysgraph::{build_raw_features, build_system_graph, GraphNode, NodeCategory};
use crate::types::Strategy;

fn unit_norm() -> Normalizer {
    Normalizer::new(0.0, 10.0).unwrap()
}

/// Samples from `systems` synthetic systems, `per` schemes each, with
/// throughput computed from the raw node latencies by `f`.
fn toy_samples(systems: u64, per: usize, f: impl Fn(&RawFeatures) -> f64) -> Vec<Sample> {
    let mut out = Vec::new();
    for seed in 0..systems {
        let sys = random_system(seed, &SynthLimits::small());
        let graph = build_system_graph(&sys.config).unwrap();
        for k in 0..per {
            let mut scheme = crate::types::Scheme::default();
            for (c, dev) in sys.config.clients().enumerate() {
                let n = sys.config.model_of(&dev.device_id).unwrap().n_layers;
                let s = match (k + c * 3) % (n + 2) {
                    0 => Strategy::Dp,
                    x => Strategy::Pp(x - 1),
                };
                scheme = scheme.with(&dev.device_id, s);
            }
            let raw = build_raw_features(&graph, &scheme, &sys.config, &sys.lut).unwrap();
            out.push(Sample {
                system_key: seed,
                graph: graph.clone(),
                throughput: f(&raw),
                raw,
                origin: None,
            });
        }
    }
    out
}

fn total_latency(raw: &RawFeatures) -> f64 {
    1000.0 / (1.0 + raw.latency_ms.iter().sum::<f64>())
}

fn sample_input(model: &PredictorModel, s: &Sample) -> (SystemGraph, FeatureMatrix) {
    (s.graph.clone(), model.features(&s.raw))
}

#[test]
fn zero_weights_give_zero_embedding_and_ln2() {
    let model = PredictorModel::zeros(8, unit_norm()).unwrap();
    let s = &toy_samples(1, 1, total_latency)[0];
    let (g, f) = sample_input(&model, s);
    assert!(model.encode(&g, &f).unwrap().iter().all(|&x| x == 0.0));
    assert_eq!(model.predict_throughput(&g, &f).unwrap(), std::f64::consts::LN_2);
}

#[test]
fn single_node_forward_by_hand() {
    // one node, self-loop, H = 2: aggregation gives (1 + 0 + 1) x
    let mut p = Params::zeros(FEATURE_DIM, 2);
    let x = [1.0, 0.0, 0.0, 0.0, 0.0, 0.5];
    // w[k][j] stored row-major as w[k * 2 + j]
    p.block_mut(Block::Gin1W1).copy_from_slice(&[
        0.5, -1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 2.0, 1.0,
    ]);
    p.block_mut(Block::Gin1B1).copy_from_slice(&[0.1, -0.2]);
    p.block_mut(Block::Gin1W2).copy_from_slice(&[1.0, 0.5, -0.5, 1.0]);
    p.block_mut(Block::Gin1B2).copy_from_slice(&[0.0, 0.3]);
    p.block_mut(Block::Gin2W1).copy_from_slice(&[0.2, 0.0, 0.0, 0.4]);
    p.block_mut(Block::Gin2B1).copy_from_slice(&[0.0, 0.0]);
    p.block_mut(Block::Gin2W2).copy_from_slice(&[1.0, -1.0, 1.0, 1.0]);
    p.block_mut(Block::Gin2B2).copy_from_slice(&[0.05, 0.0]);

    // layer 1: agg = 2x = [2,0,0,0,0,1]
    // z1 = [2*0.5 + 1*2 + 0.1, 2*-1 + 1*1 - 0.2] = [3.1, -1.2] -> relu [3.1, 0]
    // z2 = [3.1*1 + 0, 3.1*0.5 + 0.3] = [3.1, 1.85]
    // layer 2: agg = [6.2, 3.7]
    // z1 = [1.24, 1.48]; z2 = [1.24 + 1.48 + 0.05, -1.24 + 1.48] = [2.77, 0.24]
    let g = GraphInput::new(vec![vec![0]], &[x]);
    let e = gin::forward(&p, &g).embedding;
    assert!((e[0] - 2.77).abs() < 1e-12, "{e:?}");
    assert!((e[1] - 0.24).abs() < 1e-12, "{e:?}");
}

fn permute(s: &Sample, perm: &[usize]) -> Sample {
    // perm[old] = new
    let mut nodes = vec![None; perm.len()];
    let mut lat = vec![0.0; perm.len()];
    let mut cats = vec![NodeCategory::Global; perm.len()];
    for (old, &new) in perm.iter().enumerate() {
        nodes[new] = Some(s.graph.nodes()[old].clone());
        lat[new] = s.raw.latency_ms[old];
        cats[new] = s.raw.categories[old];
    }
    let nodes: Vec<GraphNode> = nodes.into_iter().map(Option::unwrap).collect();
    let edges = s.graph.edges().iter().map(|&(a, b)| (perm[a], perm[b])).collect();
    Sample {
        graph: SystemGraph::from_parts(nodes, edges).unwrap(),
        raw: RawFeatures {
            categories: cats,
            latency_ms: lat,
        },
        ..s.clone()
    }
}

#[test]
fn relabeling_nodes_leaves_outputs_unchanged() {
    let samples = toy_samples(3, 2, total_latency);
    let model = PredictorModel::new(16, 4, Normalizer::new(0.0, 8.0).unwrap()).unwrap();
    for s in &samples {
        let n = s.graph.node_count();
        let perm: Vec<usize> = (0..n).map(|i| (i * 7 + 3) % n).collect();
        if perm.iter().collect::<std::collections::HashSet<_>>().len() != n {
            continue;
        }
        let t = permute(s, &perm);
        let (g1, f1) = sample_input(&model, s);
        let (g2, f2) = sample_input(&model, &t);
        let a = model.predict_throughput(&g1, &f1).unwrap();
        let b = model.predict_throughput(&g2, &f2).unwrap();
        assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0));
        let ea = model.encode(&g1, &f1).unwrap();
        let eb = model.encode(&g2, &f2).unwrap();
        for (x, y) in ea.iter().zip(&eb) {
            assert!((x - y).abs() < 1e-9);
        }
    }
}

#[test]
fn identical_schemes_are_a_coin_flip() {
    let s = &toy_samples(1, 1, total_latency)[0];
    let model = PredictorModel::new(16, 1, unit_norm()).unwrap();
    let (g, f) = sample_input(&model, s);
    assert_eq!(model.predict_relative(&g, &f, &f).unwrap(), 0.5);
}

#[test]
fn mismatched_inputs_rejected() {
    let samples = toy_samples(2, 1, total_latency);
    let model = PredictorModel::new(8, 1, unit_norm()).unwrap();
    let (g0, f0) = sample_input(&model, &samples[0]);
    let (_, f1) = sample_input(&model, &samples[1]);
    if f0.node_count() != f1.node_count() {
        assert!(matches!(
            model.predict_relative(&g0, &f0, &f1),
            Err(PredictorError::TopologyMismatch)
        ));
        assert!(matches!(
            model.predict_throughput(&g0, &f1),
            Err(PredictorError::DimensionMismatch { .. })
        ));
    }
    let short = FeatureMatrix::from_rows(f0.rows()[1..].to_vec());
    assert!(matches!(
        model.encode(&g0, &short),
        Err(PredictorError::DimensionMismatch { .. })
    ));
}

#[test]
fn hidden_width_bounds() {
    assert!(PredictorModel::new(0, 0, unit_norm()).is_err());
    assert!(PredictorModel::new(MAX_HIDDEN + 1, 0, unit_norm()).is_err());
    assert!(PredictorModel::new(MAX_HIDDEN, 0, unit_norm()).is_ok());
}

#[test]
fn predictions_repeat_exactly() {
    let s = &toy_samples(1, 1, total_latency)[0];
    let model = PredictorModel::new(32, 9, unit_norm()).unwrap();
    let (g, f) = sample_input(&model, s);
    assert_eq!(
        model.predict_throughput(&g, &f).unwrap().to_bits(),
        model.predict_throughput(&g, &f).unwrap().to_bits()
    );
}

fn with_throughputs(group_sizes: &[usize], thr: &[f64]) -> Vec<Sample> {
    let base = &toy_samples(1, 1, total_latency)[0];
    let mut out = Vec::new();
    let mut k = 0;
    for (g, &n) in group_sizes.iter().enumerate() {
        for _ in 0..n {
            out.push(Sample {
                system_key: g as u64,
                throughput: thr[k],
                ..base.clone()
            });
            k += 1;
        }
    }
    out
}

#[test]
fn pair_counts() {
    let s = with_throughputs(&[5], &[1.0, 2.0, 3.0, 4.0, 5.0]);
    assert_eq!(make_pairs(&s).len(), 10);
    let s = with_throughputs(&[2], &[3.0, 3.0]);
    assert!(make_pairs(&s).is_empty());
    let s = with_throughputs(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0]);
    let pairs = make_pairs(&s);
    assert_eq!(pairs.len(), 4);
    assert_eq!(pairs[0], PairSample { a: 0, b: 1, a_faster: false });
    assert_eq!(pairs[3], PairSample { a: 3, b: 4, a_faster: false });
}

#[test]
fn checkpoint_round_trip() {
    let model = PredictorModel {
        meta: ModelMeta {
            throughput_trained: true,
            relative_trained: false,
        },
        ..PredictorModel::new(12, 5, Normalizer::new(0.25, 7.5).unwrap()).unwrap()
    };
    let mut buf = Vec::new();
    write_checkpoint(&model, &mut buf).unwrap();
    assert_eq!(&buf[..4], b"CIGN");
    assert_eq!(u16::from_le_bytes([buf[4], buf[5]]), 1);
    assert_eq!(u16::from_le_bytes([buf[6], buf[7]]), 1);
    let back = read_checkpoint(buf.as_slice()).unwrap();
    assert_eq!(back, model);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&model, &path).unwrap();
    assert_eq!(load_checkpoint(&path).unwrap(), model);

    let mut bad = buf.clone();
    bad[0] = b'X';
    assert!(read_checkpoint(bad.as_slice()).is_err());
    assert!(read_checkpoint(&buf[..buf.len() - 3]).is_err());
}

#[test]
fn gradients_match_finite_differences() {
    let samples = toy_samples(5, 2, total_latency);
    for (k, pair) in samples.chunks(2).enumerate() {
        let norm = Normalizer::new(0.0, 9.0).unwrap();
        let model = PredictorModel::new(16, k as u64 + 11, norm).unwrap();
        let report = grad_check(&model, &pair[0], &pair[1], k as u64);
        assert!(report.max() < 1e-4, "{report:?}");
        assert_eq!(report, grad_check(&model, &pair[0], &pair[1], k as u64));
    }
}

#[test]
fn zero_inputs_give_zero_first_layer_gradient() {
    let model = PredictorModel::new(8, 3, unit_norm()).unwrap();
    let adj = vec![vec![0, 1], vec![1, 0]];
    let g = GraphInput::new(adj, &[[0.0; FEATURE_DIM]; 2]);
    let mut grads = vec![0.0; model.params.len()];
    train::throughput_loss_grad(&model.params, &g, 5.0, &mut grads);
    assert!(grads[model.params.range(Block::Gin1W1)].iter().all(|&x| x == 0.0));
}

fn quick(epochs: usize) -> TrainOptions {
    TrainOptions {
        epochs,
        hidden: 16,
        lr: 1e-2,
        batch_size: 4,
        seed: 3,
        ..TrainOptions::default()
    }
}

#[test]
fn throughput_loss_falls_on_toy_set() {
    let samples = toy_samples(5, 2, total_latency);
    assert_eq!(samples.len(), 10);
    let (_, report) = train_throughput(&samples, &quick(50)).unwrap();
    let l = &report.epoch_loss;
    // minibatch noise makes single epochs jitter; compare 10-epoch means
    let means: Vec<f64> = l.chunks(10).map(|c| c.iter().sum::<f64>() / c.len() as f64).collect();
    assert!(means.windows(2).all(|w| w[1] < w[0]), "{means:?}");
}

#[test]
fn training_is_bit_reproducible() {
    let samples = toy_samples(4, 3, total_latency);
    let (a, ra) = train_throughput(&samples, &quick(5)).unwrap();
    let (b, rb) = train_throughput(&samples, &quick(5)).unwrap();
    assert_eq!(a, b);
    assert_eq!(ra, rb);
    let (a, _) = train_relative(&samples, &quick(5)).unwrap();
    let (b, _) = train_relative(&samples, &quick(5)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn empty_or_single_sample_rejected() {
    assert!(matches!(
        train_throughput(&[], &quick(1)),
        Err(PredictorError::NotEnoughSamples { .. })
    ));
    let one = toy_samples(1, 1, total_latency);
    assert!(train_relative(&one, &quick(1)).is_err());
}

#[test]
fn constant_targets_still_train() {
    let samples = toy_samples(3, 2, |_| 42.0);
    let (model, _) = train_throughput(&samples, &quick(3)).unwrap();
    assert!(model.meta.throughput_trained);
}

/// Systems whose schemes differ only in the device-node latency; lower is faster.
fn separable_samples(systems: u64, per: usize) -> Vec<Sample> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
    let base = toy_samples(systems, 1, total_latency);
    let mut out = Vec::new();
    for b in &base {
        for _ in 0..per {
            let mut raw = b.raw.clone();
            let device = rng.random_range(1.0..500.0);
            raw.latency_ms[0] = device;
            out.push(Sample {
                raw,
                throughput: 1000.0 / device,
                ..b.clone()
            });
        }
    }
    out
}

#[test]
fn separable_pairs_learned() {
    let samples = separable_samples(30, 4);
    let opts = TrainOptions {
        train_fraction: 1.0 - 1.0 / 30.0,
        ..quick(200)
    };
    let (model, report) = train_relative(&samples, &opts).unwrap();
    assert!(report.train_accuracy >= 0.99, "{report:?}");
    assert!(model.meta.relative_trained && !model.meta.throughput_trained);

    let pairs = make_pairs(&samples);
    let acc = pair_accuracy(&model, &samples, &pairs);
    let flipped: Vec<PairSample> = pairs
        .iter()
        .map(|p| PairSample { a_faster: !p.a_faster, ..*p })
        .collect();
    let acc_flipped = pair_accuracy(&model, &samples, &flipped);
    assert!((acc + acc_flipped - 1.0).abs() < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn pairwise_head_is_antisymmetric(seed in 0u64..1000, k in 0usize..6) {
        let samples = toy_samples(1, 6, total_latency);
        let model = PredictorModel::new(8, seed, Normalizer::new(0.0, 6.0).unwrap()).unwrap();
        let (g, fa) = sample_input(&model, &samples[0]);
        let (_, fb) = sample_input(&model, &samples[k]);
        let ab = model.predict_relative(&g, &fa, &fb).unwrap();
        let ba = model.predict_relative(&g, &fb, &fa).unwrap();
        prop_assert_eq!(ab + ba, 1.0);
        prop_assert!(ab > 0.0 && ab < 1.0);
    }
}
