//! Built-in model profiles and small reference systems.
//!
//! The ModelNet40 and Yelp profiles carry the forward communication volumes
//! measured for DGCNN, the GCoDE co-inference model, GCN and GAT, stored
//! verbatim in bytes (1 KB = 1000 bytes).

use super::{Lut, LutEntry};
use crate::types::{
    BandwidthTrace, BatchPolicy, DeviceProfile, ModelProfile, NetworkState, Role, SystemConfig,
    TraceSegment,
};

const KB: f64 = 1000.0;

/// Result volume of a 40-class classification head (40 float32 logits).
const CLASSIFIER_RESULT: f64 = 0.16 * KB;

pub fn gcode_modelnet40() -> ModelProfile {
    ModelProfile::new(
        "gcode-modelnet40",
        vec![12.2 * KB, 332.0 * KB, CLASSIFIER_RESULT],
        "modelnet40",
    )
}

pub fn dgcnn_modelnet40() -> ModelProfile {
    ModelProfile::new(
        "dgcnn-modelnet40",
        vec![12.2 * KB, 24.2 * KB, CLASSIFIER_RESULT],
        "modelnet40",
    )
}

pub fn gcn_yelp() -> ModelProfile {
    ModelProfile::new("gcn-yelp", vec![4396.1 * KB, 1154.2 * KB, 2.0 * KB], "yelp")
}

pub fn gat_yelp() -> ModelProfile {
    ModelProfile::new("gat-yelp", vec![4396.1 * KB, 5529.2 * KB, 2.0 * KB], "yelp")
}

/// A system plus its LUT.
#[derive(Debug, Clone)]
pub struct Fixture {
    pub config: SystemConfig,
    pub lut: Lut,
}

/// Two TX2-class clients running the GCoDE ModelNet40 profile against an
/// i7 CPU server. At 100 Mbps pipelining pays off; at 1 Mbps the 332 KB
/// intermediate tensor makes PP far slower than shipping the 12.2 KB input.
///
/// With `drop_at_ms` set, the link falls from 100 Mbps to 1 Mbps at that time.
pub fn adaptivity_scenario(drop_at_ms: Option<f64>) -> Fixture {
    let model = gcode_modelnet40();
    let id = model.model_id.clone();
    let devices = vec![
        DeviceProfile::new("tx2-a", "tx2", Role::Client),
        DeviceProfile::new("tx2-b", "tx2", Role::Client),
        DeviceProfile::new("edge", "i7-cpu", Role::Server),
    ];
    let mut entries = vec![
        LutEntry::new("tx2", &id, 0, 1, 1, 8.0),
        LutEntry::new("tx2", &id, 1, 2, 1, 50.0),
        LutEntry::new("tx2", &id, 0, 2, 1, 58.0),
    ];
    // CPU server: batching gives little.
    for b in 1..=8u32 {
        let scale = 1.0 + 0.9 * (b - 1) as f64;
        entries.push(LutEntry::new("i7-cpu", &id, 0, 1, b, 30.0 * scale));
        entries.push(LutEntry::new("i7-cpu", &id, 1, 2, b, 4.0 * scale));
        entries.push(LutEntry::new("i7-cpu", &id, 0, 2, b, 34.0 * scale));
    }
    let mut network = NetworkState::new(100.0, 0.5);
    if let Some(t) = drop_at_ms {
        network.trace = Some(BandwidthTrace::new(vec![
            TraceSegment { start_ms: 0.0, bandwidth_mbps: 100.0 },
            TraceSegment { start_ms: t, bandwidth_mbps: 1.0 },
        ]));
    }
    Fixture {
        config: SystemConfig {
            devices,
            models: [("tx2-a", &model), ("tx2-b", &model)]
                .into_iter()
                .map(|(d, m)| (d.to_string(), m.clone()))
                .collect(),
            network,
            batch_policy: BatchPolicy::default(),
            worker_count: 1,
        },
        lut: Lut::from_entries(entries).expect("fixture LUT is valid"),
    }
}

/// Server batch cost with a per-item cost minimum at batch size `knee`:
/// a fixed launch cost plus a linear term, and a steeper slope past the knee.
pub fn knee_batch_cost(b: u32, knee: u32) -> f64 {
    let fixed = 12.0;
    let per_item = 2.0;
    if b <= knee {
        fixed + per_item * b as f64
    } else {
        fixed + per_item * knee as f64 + 10.0 * (b - knee) as f64
    }
}

/// Many edge-only clients saturating a single-worker GPU server whose batch
/// cost is [`knee_batch_cost`].
pub fn batch_knee_scenario(knee: u32, max_batch: usize, clients: usize) -> Fixture {
    let model = ModelProfile::new("gcn-small", vec![2.0 * KB, 4.0 * KB, 0.1 * KB], "synthetic");
    let id = model.model_id.clone();
    let mut devices: Vec<DeviceProfile> = (0..clients)
        .map(|i| DeviceProfile::new(format!("c{i}"), "nano", Role::Client))
        .collect();
    devices.push(DeviceProfile::new("edge", "gpu1060", Role::Server));
    let mut entries = vec![
        LutEntry::new("nano", &id, 0, 1, 1, 20.0),
        LutEntry::new("nano", &id, 1, 2, 1, 20.0),
        LutEntry::new("nano", &id, 0, 2, 1, 40.0),
    ];
    for b in 1..=(2 * knee + 4) {
        let c = knee_batch_cost(b, knee);
        entries.push(LutEntry::new("gpu1060", &id, 0, 2, b, c));
        entries.push(LutEntry::new("gpu1060", &id, 0, 1, b, c / 2.0));
        entries.push(LutEntry::new("gpu1060", &id, 1, 2, b, c / 2.0));
    }
    Fixture {
        config: SystemConfig {
            models: devices
                .iter()
                .filter(|d| d.role == Role::Client)
                .map(|d| (d.device_id.clone(), model.clone()))
                .collect(),
            devices,
            network: NetworkState::new(1000.0, 0.0),
            batch_policy: BatchPolicy {
                max_batch,
                window_ms: 10.0,
            },
            worker_count: 1,
        },
        lut: Lut::from_entries(entries).expect("fixture LUT is valid"),
    }
}

/// One client running a 2-layer model split after layer 1, where the device
/// stage, the uplink transfer and the server stage take the given times.
/// The result returned to the device is a single byte.
pub fn pipeline_scenario(device_ms: f64, transfer_ms: f64, server_ms: f64) -> Fixture {
    // 8 Mbps = 1000 bytes per ms
    let model = ModelProfile::new("pipe", vec![1.0, transfer_ms * 1000.0, 1.0], "synthetic");
    let devices = vec![
        DeviceProfile::new("d0", "dev", Role::Client),
        DeviceProfile::new("srv", "srv", Role::Server),
    ];
    let entries = vec![
        LutEntry::new("dev", "pipe", 0, 1, 1, device_ms),
        LutEntry::new("dev", "pipe", 0, 2, 1, device_ms + server_ms),
        LutEntry::new("srv", "pipe", 1, 2, 1, server_ms),
        LutEntry::new("srv", "pipe", 0, 2, 1, device_ms + server_ms),
    ];
    Fixture {
        config: SystemConfig {
            models: [("d0".to_string(), model)].into_iter().collect(),
            devices,
            network: NetworkState::new(8.0, 0.0),
            batch_policy: BatchPolicy::unbatched(),
            worker_count: 1,
        },
        lut: Lut::from_entries(entries).expect("fixture LUT is valid"),
    }
}

/// Three TX2 clients on the GCoDE ModelNet40 profile sharing a GPU server
/// with cheap batching. Used for runtime loopback runs.
pub fn loopback_scenario(clients: usize) -> Fixture {
    let model = gcode_modelnet40();
    let id = model.model_id.clone();
    let mut devices: Vec<DeviceProfile> = (0..clients)
        .map(|i| DeviceProfile::new(format!("tx2-{i}"), "tx2", Role::Client))
        .collect();
    devices.push(DeviceProfile::new("edge", "gpu1060", Role::Server));
    let mut entries = vec![
        LutEntry::new("tx2", &id, 0, 1, 1, 8.0),
        LutEntry::new("tx2", &id, 1, 2, 1, 50.0),
        LutEntry::new("tx2", &id, 0, 2, 1, 58.0),
    ];
    for b in 1..=8u32 {
        let scale = 1.0 + 0.25 * (b - 1) as f64;
        entries.push(LutEntry::new("gpu1060", &id, 0, 1, b, 3.0 * scale));
        entries.push(LutEntry::new("gpu1060", &id, 1, 2, b, 1.0 * scale));
        entries.push(LutEntry::new("gpu1060", &id, 0, 2, b, 4.0 * scale));
    }
    Fixture {
        config: SystemConfig {
            models: devices
                .iter()
                .filter(|d| d.role == Role::Client)
                .map(|d| (d.device_id.clone(), model.clone()))
                .collect(),
            devices,
            network: NetworkState::new(100.0, 0.5),
            batch_policy: BatchPolicy::default(),
            worker_count: 2,
        },
        lut: Lut::from_entries(entries).expect("fixture LUT is valid"),
    }
}
