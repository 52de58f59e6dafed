//! Seeded generator of random but internally consistent systems: device
//! kinds, models, LUTs and network conditions. Used to build training data
//! and the randomized scheduler checks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Lut, LutEntry};
use crate::types::{
    BatchPolicy, DeviceProfile, ModelProfile, NetworkState, Role, SystemConfig,
};

/// Largest batch size profiled for server kinds.
pub const MAX_PROFILED_BATCH: u32 = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthLimits {
    pub clients: (usize, usize),
    pub layers: (usize, usize),
    pub bandwidth_mbps: (f64, f64),
    pub max_idle: usize,
}

impl Default for SynthLimits {
    fn default() -> Self {
        Self {
            clients: (1, 5),
            layers: (2, 8),
            bandwidth_mbps: (1.0, 100.0),
            max_idle: 0,
        }
    }
}

impl SynthLimits {
    /// Small systems that brute force can cover: up to 3 clients, 6 layers.
    pub fn small() -> Self {
        Self {
            clients: (1, 3),
            layers: (2, 6),
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthSystem {
    pub config: SystemConfig,
    pub lut: Lut,
}

fn log_uniform(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    (rng.random_range(lo.ln()..=hi.ln())).exp()
}

/// Client device catalog: name and milliseconds per unit of layer work.
const CLIENT_KINDS: [(&str, f64); 3] = [("nano", 8.0), ("tx2", 4.0), ("nx", 2.0)];
const SERVER_KINDS: [(&str, f64); 2] = [("i7", 0.6), ("gpu", 0.3)];
/// Extra cost of each additional batch member, as a fraction of batch 1.
const SERVER_BATCH_SLOPE: f64 = 0.5;

struct KindSpec {
    name: String,
    ms_per_unit: f64,
    batch_slope: Option<f64>,
}

struct ModelSpec {
    profile: ModelProfile,
    layer_units: Vec<f64>,
}

fn range_ms(units: &[f64], i: usize, j: usize, kind: &KindSpec) -> f64 {
    0.2 + units[i..j].iter().sum::<f64>() * kind.ms_per_unit
}

fn push_kind_entries(lut: &mut Vec<LutEntry>, kind: &KindSpec, model: &ModelSpec) {
    let n = model.profile.n_layers;
    for i in 0..n {
        for j in i + 1..=n {
            let base = range_ms(&model.layer_units, i, j, kind);
            match kind.batch_slope {
                None => lut.push(LutEntry::new(&kind.name, &model.profile.model_id, i, j, 1, base)),
                Some(alpha) => {
                    for b in 1..=MAX_PROFILED_BATCH {
                        let ms = base * (1.0 + alpha * (b - 1) as f64);
                        lut.push(LutEntry::new(&kind.name, &model.profile.model_id, i, j, b, ms));
                    }
                }
            }
        }
    }
}

fn random_model(rng: &mut impl Rng, id: String, limits: &SynthLimits) -> ModelSpec {
    let n = rng.random_range(limits.layers.0..=limits.layers.1);
    let layer_units: Vec<f64> = (0..n).map(|_| log_uniform(rng, 0.5, 3.0)).collect();
    let mut volumes = Vec::with_capacity(n + 1);
    let raw = log_uniform(rng, 4_000.0, 200_000.0);
    volumes.push(raw);
    let mut v = raw;
    for _ in 1..n {
        v = (v * log_uniform(rng, 0.25, 4.0)).clamp(500.0, 800_000.0);
        volumes.push(v);
    }
    volumes.push(log_uniform(rng, 100.0, 2_000.0));
    ModelSpec {
        profile: ModelProfile::new(id, volumes, "synthetic"),
        layer_units,
    }
}

/// Builds the system for `seed`. The same seed always yields the same system.
pub fn random_system(seed: u64, limits: &SynthLimits) -> SynthSystem {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let n_clients = rng.random_range(limits.clients.0..=limits.clients.1);
    let n_models = rng.random_range(1..=2usize);
    let models: Vec<ModelSpec> = (0..n_models)
        .map(|k| random_model(&mut rng, format!("m{k}"), limits))
        .collect();

    let n_kinds = rng.random_range(1..=3usize);
    let kinds: Vec<KindSpec> = (0..n_kinds)
        .map(|k| {
            let (name, ms) = CLIENT_KINDS[rng.random_range(0..CLIENT_KINDS.len())];
            KindSpec {
                name: format!("{name}{k}"),
                ms_per_unit: ms,
                batch_slope: None,
            }
        })
        .collect();
    let (server_name, server_ms) = SERVER_KINDS[rng.random_range(0..SERVER_KINDS.len())];
    let server = KindSpec {
        name: server_name.to_string(),
        ms_per_unit: server_ms,
        batch_slope: Some(SERVER_BATCH_SLOPE),
    };

    let mut devices = Vec::new();
    let mut assigned = std::collections::BTreeMap::new();
    let mut used_kinds = vec![false; n_kinds];
    for c in 0..n_clients {
        let k = rng.random_range(0..n_kinds);
        used_kinds[k] = true;
        let id = format!("d{c}");
        devices.push(DeviceProfile::new(&id, &kinds[k].name, Role::Client));
        assigned.insert(id, models[rng.random_range(0..n_models)].profile.clone());
    }
    let n_idle = if limits.max_idle == 0 {
        0
    } else {
        rng.random_range(0..=limits.max_idle)
    };
    for i in 0..n_idle {
        let k = rng.random_range(0..n_kinds);
        used_kinds[k] = true;
        devices.push(DeviceProfile::new(format!("i{i}"), &kinds[k].name, Role::Idle));
    }
    devices.push(DeviceProfile::new("srv", &server.name, Role::Server));

    let mut entries = Vec::new();
    for m in &models {
        for (k, kind) in kinds.iter().enumerate() {
            if used_kinds[k] {
                push_kind_entries(&mut entries, kind, m);
            }
        }
        push_kind_entries(&mut entries, &server, m);
    }

    let bandwidth = log_uniform(&mut rng, limits.bandwidth_mbps.0, limits.bandwidth_mbps.1);
    let overhead = 0.5;
    let config = SystemConfig {
        devices,
        models: assigned,
        network: NetworkState::new(bandwidth, overhead),
        batch_policy: BatchPolicy::default(),
        worker_count: 1,
    };
    SynthSystem {
        config,
        lut: Lut::from_entries(entries).expect("generated entries are valid"),
    }
}
