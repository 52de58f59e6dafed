//! Deterministic discrete-event simulator of the device-edge system.
//!
//! The model, per client device:
//!
//! * one compute unit, one uplink and one downlink, each a FIFO resource;
//!   transfers take `bytes / bandwidth + overhead`, integrated over the
//!   bandwidth trace when one is configured
//! * PP(s): device stage `[0, s)`, uplink of the boundary volume, server stage
//!   `[s, n)` through the batch queue, downlink of the result
//! * DP: every input goes whole to the node with the earliest projected
//!   completion: the local replica, the server, or an idle device that the
//!   scheme lends to DP dispatch (reached through the server)
//!
//! The server keeps one batch queue per (model, layer range). A queue flushes
//! when it holds `max_batch` requests or its oldest request has waited
//! `window_ms`; flushed batches run on the first free worker.
//!
//! Everything is single-threaded and ordered by (time, insertion sequence),
//! so identical inputs always produce identical results.

pub mod dataset;

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap};
use std::io::Write;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::profiles::{LayerRange, Lut, LutError};
use crate::types::{
    validate_config, ModelProfile, NetworkState, Scheme, Strategy, SystemConfig, ValidationErrors,
};

/// Tasks a closed-loop client keeps in flight. Enough to keep every stage of
/// a PP pipeline busy.
pub const DEFAULT_WINDOW: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum Workload {
    /// Each client keeps `window` tasks in flight and issues a new one as
    /// soon as one completes.
    ClosedLoop { window: usize },
    /// Each client issues a task every `interval_ms`, regardless of load.
    OpenLoop { interval_ms: f64 },
}

impl Default for Workload {
    fn default() -> Self {
        Workload::ClosedLoop {
            window: DEFAULT_WINDOW,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Horizon {
    /// Issue this many tasks in total, then run until all complete.
    Tasks { count: u64 },
    /// Stop at this simulated time; unfinished tasks stay in flight.
    Duration { ms: f64 },
    /// Stop at the first completion at which both bounds are met.
    AtLeast { ms: f64, tasks: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimOptions {
    pub workload: Workload,
    pub horizon: Horizon,
    pub seed: u64,
    /// Relative compute-time jitter, uniform in `[-jitter, jitter]`.
    #[serde(default)]
    pub jitter: f64,
    /// Keep one [`TaskRecord`] per completed task.
    #[serde(default)]
    pub record_tasks: bool,
}

impl Default for SimOptions {
    fn default() -> Self {
        Self::oracle()
    }
}

impl SimOptions {
    /// Settings used whenever the simulator acts as a ground-truth oracle.
    pub fn oracle() -> Self {
        Self {
            workload: Workload::default(),
            horizon: Horizon::AtLeast {
                ms: 2_000.0,
                tasks: 40,
            },
            seed: 0,
            jitter: 0.0,
            record_tasks: false,
        }
    }

    pub fn with_horizon(mut self, horizon: Horizon) -> Self {
        self.horizon = horizon;
        self
    }

    pub fn recording(mut self) -> Self {
        self.record_tasks = true;
        self
    }
}

/// A runnable experiment: system, LUT and run options.
#[derive(Debug, Clone)]
pub struct SimConfig {
    pub system: SystemConfig,
    pub lut: Arc<Lut>,
    pub options: SimOptions,
}

impl SimConfig {
    pub fn new(system: SystemConfig, lut: impl Into<Arc<Lut>>, options: SimOptions) -> Self {
        Self {
            system,
            lut: lut.into(),
            options,
        }
    }

    /// Same experiment with the network frozen at `network`.
    pub fn with_network(&self, network: NetworkState) -> Self {
        Self {
            system: self.system.with_network(network),
            lut: Arc::clone(&self.lut),
            options: self.options.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error(transparent)]
    Config(#[from] ValidationErrors),
    #[error(transparent)]
    Lut(#[from] LutError),
    #[error("scheme has no strategy for client {0:?}")]
    MissingStrategy(String),
    #[error("strategy {strategy} is out of range for client {device:?}")]
    InvalidStrategy { device: String, strategy: Strategy },
    #[error("invalid horizon: {0}")]
    InvalidHorizon(&'static str),
    #[error("horizon exhausted with zero completed tasks")]
    NoCompletions,
    #[error("no clients to simulate")]
    NoClients,
    #[error("reschedule failed: {0}")]
    Reschedule(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Route {
    /// PP stages, or DP on the client's own replica.
    Local,
    Server,
    Idle(String),
}

impl std::fmt::Display for Route {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Route::Local => f.write_str("local"),
            Route::Server => f.write_str("server"),
            Route::Idle(d) => write!(f, "idle:{d}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub task_id: u64,
    pub device: String,
    pub issue_ms: f64,
    pub complete_ms: f64,
    /// Strategy the task ran under.
    pub scheme: String,
    pub route: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceStats {
    pub device_id: String,
    pub completed: u64,
    pub mean_latency_ms: f64,
    pub p50_latency_ms: f64,
    pub p95_latency_ms: f64,
    pub p99_latency_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchemeSwitch {
    pub at_ms: f64,
    pub scheme: Scheme,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimResult {
    /// Completed tasks per second over all clients.
    pub throughput: f64,
    pub issued: u64,
    pub completed: u64,
    pub in_flight: u64,
    pub elapsed_ms: f64,
    pub mean_latency_ms: f64,
    pub devices: Vec<DeviceStats>,
    /// Busy fraction of every resource over the run.
    pub utilization: BTreeMap<String, f64>,
    pub scheme_log: Vec<SchemeSwitch>,
    #[serde(skip)]
    pub tasks: Vec<TaskRecord>,
}

impl SimResult {
    /// One row per completed task.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), csv::Error> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "task_id",
            "device",
            "issue_ms",
            "complete_ms",
            "latency_ms",
            "scheme",
            "route",
        ])?;
        for t in &self.tasks {
            w.write_record([
                t.task_id.to_string(),
                t.device.clone(),
                format!("{:.6}", t.issue_ms),
                format!("{:.6}", t.complete_ms),
                format!("{:.6}", t.complete_ms - t.issue_ms),
                t.scheme.clone(),
                t.route.clone(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn summary_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("result serializes")
    }

    /// Mean latency of tasks issued within `[from_ms, to_ms)`. Needs recorded tasks.
    pub fn mean_latency_issued_between(&self, from_ms: f64, to_ms: f64) -> Option<f64> {
        let lat: Vec<f64> = self
            .tasks
            .iter()
            .filter(|t| t.issue_ms >= from_ms && t.issue_ms < to_ms)
            .map(|t| t.complete_ms - t.issue_ms)
            .collect();
        (!lat.is_empty()).then(|| lat.iter().sum::<f64>() / lat.len() as f64)
    }
}

/// Hook consulted at every bandwidth-trace breakpoint of an adaptive run.
/// Returning a scheme switches all tasks issued from then on.
pub trait Monitor {
    fn observe(
        &mut self,
        now_ms: f64,
        network: &NetworkState,
        current: &Scheme,
    ) -> Result<Option<Scheme>, SimError>;
}

/// Runs `scheme` on the experiment.
pub fn simulate(cfg: &SimConfig, scheme: &Scheme) -> Result<SimResult, SimError> {
    Engine::new(cfg, scheme)?.run(None)
}

/// Runs `scheme`, letting `monitor` replace it at bandwidth changes. Tasks
/// already issued finish under the scheme they started with.
pub fn simulate_adaptive(
    cfg: &SimConfig,
    scheme: &Scheme,
    monitor: &mut dyn Monitor,
) -> Result<SimResult, SimError> {
    Engine::new(cfg, scheme)?.run(Some(monitor))
}

/// Simulates every scheme in `space` and returns the one with the highest
/// throughput; the earliest wins ties.
pub fn brute_force_best(
    cfg: &SimConfig,
    space: &[Scheme],
) -> Result<(Scheme, SimResult), SimError> {
    let results: Vec<Result<SimResult, SimError>> =
        space.par_iter().map(|s| simulate(cfg, s)).collect();
    let mut best: Option<(usize, SimResult)> = None;
    for (i, r) in results.into_iter().enumerate() {
        let r = match r {
            Ok(r) => r,
            Err(SimError::NoCompletions) => continue,
            Err(e) => return Err(e),
        };
        if best.as_ref().is_none_or(|(_, b)| r.throughput > b.throughput) {
            best = Some((i, r));
        }
    }
    let (i, r) = best.ok_or(SimError::NoCompletions)?;
    Ok((space[i].clone(), r))
}

/// Throughput of `scheme`, with zero for schemes that complete nothing.
pub fn oracle_throughput(cfg: &SimConfig, scheme: &Scheme) -> Result<f64, SimError> {
    match simulate(cfg, scheme) {
        Ok(r) => Ok(r.throughput),
        Err(SimError::NoCompletions) => Ok(0.0),
        Err(e) => Err(e),
    }
}

// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, Default)]
struct Fifo {
    free_at: f64,
    busy_ms: f64,
}

impl Fifo {
    fn run(&mut self, now: f64, duration: f64) -> f64 {
        let start = now.max(self.free_at);
        self.free_at = start + duration;
        self.busy_ms += duration;
        self.free_at
    }

    fn transfer(&mut self, now: f64, bytes: f64, net: &NetworkState) -> f64 {
        let start = now.max(self.free_at);
        let end = net.transfer_end(start, bytes);
        self.free_at = end;
        self.busy_ms += end - start;
        end
    }
}

struct Client {
    id: String,
    kind: String,
    model: ModelProfile,
    strategy: Strategy,
    full_local_ms: f64,
    full_server_ms: f64,
    compute: Fifo,
    uplink: Fifo,
    downlink: Fifo,
    in_flight: u64,
    latencies: Vec<f64>,
}

struct IdleNode {
    id: String,
    kind: String,
    compute: Fifo,
    link: Fifo,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Hop {
    ToServerQueue,
    ToIdle(usize),
    Done,
}

struct Task {
    client: usize,
    strategy: Strategy,
    route: Route,
    issue_ms: f64,
    after_uplink: Hop,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
struct BatchKey {
    model: String,
    range: LayerRange,
}

#[derive(Default)]
struct Pending {
    tasks: Vec<usize>,
    generation: u64,
}

#[derive(Debug, Clone)]
enum Event {
    Issue(usize),
    DeviceStageDone(usize),
    UplinkDone(usize),
    WindowExpired(BatchKey, u64),
    BatchDone(Vec<usize>),
    IdleInputArrived(usize, usize),
    IdleComputeDone(usize, usize),
    IdleResultArrived(usize),
    Completed(usize),
    Monitor(f64),
}

struct Scheduled {
    at: f64,
    seq: u64,
    event: Event,
}

impl PartialEq for Scheduled {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Scheduled {}
impl PartialOrd for Scheduled {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Scheduled {
    // min-heap on (time, seq)
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .at
            .total_cmp(&self.at)
            .then_with(|| other.seq.cmp(&self.seq))
    }
}

struct Engine<'a> {
    cfg: &'a SimConfig,
    lut: &'a Lut,
    net: &'a NetworkState,
    server_kind: String,
    now: f64,
    seq: u64,
    events: BinaryHeap<Scheduled>,
    clients: Vec<Client>,
    idle: Vec<IdleNode>,
    active_idle: Vec<usize>,
    workers: Vec<Fifo>,
    queues: BTreeMap<BatchKey, Pending>,
    tasks: Vec<Task>,
    records: Vec<TaskRecord>,
    issued: u64,
    completed: u64,
    issuing: bool,
    scheme: Scheme,
    scheme_log: Vec<SchemeSwitch>,
    rng: ChaCha8Rng,
    stop_at: Option<f64>,
}

impl<'a> Engine<'a> {
    fn new(cfg: &'a SimConfig, scheme: &Scheme) -> Result<Self, SimError> {
        validate_config(&cfg.system)?;
        match cfg.options.horizon {
            Horizon::Tasks { count: 0 } => return Err(SimError::InvalidHorizon("zero tasks")),
            Horizon::Duration { ms } | Horizon::AtLeast { ms, .. } if !(ms > 0.0) => {
                return Err(SimError::InvalidHorizon("non-positive duration"))
            }
            _ => {}
        }
        if let Workload::ClosedLoop { window: 0 } = cfg.options.workload {
            return Err(SimError::InvalidHorizon("closed-loop window must be positive"));
        }
        if let Workload::OpenLoop { interval_ms } = cfg.options.workload {
            if !(interval_ms > 0.0) {
                return Err(SimError::InvalidHorizon("open-loop interval must be positive"));
            }
        }
        let system = &cfg.system;
        let server_kind = system.server().expect("validated").kind.clone();
        let lut = cfg.lut.as_ref();
        let mut clients = Vec::new();
        for d in system.clients() {
            let model = system.model_of(&d.device_id).expect("validated").clone();
            let full = LayerRange::new(0, model.n_layers);
            clients.push(Client {
                id: d.device_id.clone(),
                kind: d.kind.clone(),
                strategy: Strategy::Dp,
                full_local_ms: lut.lookup(&d.kind, &model.model_id, full, 1).unwrap_or(f64::NAN),
                full_server_ms: lut
                    .lookup(&server_kind, &model.model_id, full, 1)
                    .unwrap_or(f64::NAN),
                model,
                compute: Fifo::default(),
                uplink: Fifo::default(),
                downlink: Fifo::default(),
                in_flight: 0,
                latencies: Vec::new(),
            });
        }
        if clients.is_empty() {
            return Err(SimError::NoClients);
        }
        let idle = system
            .idle_devices()
            .map(|d| IdleNode {
                id: d.device_id.clone(),
                kind: d.kind.clone(),
                compute: Fifo::default(),
                link: Fifo::default(),
            })
            .collect();
        let mut engine = Engine {
            cfg,
            lut,
            net: &system.network,
            server_kind,
            now: 0.0,
            seq: 0,
            events: BinaryHeap::new(),
            clients,
            idle,
            active_idle: Vec::new(),
            workers: vec![Fifo::default(); system.worker_count],
            queues: BTreeMap::new(),
            tasks: Vec::new(),
            records: Vec::new(),
            issued: 0,
            completed: 0,
            issuing: true,
            scheme: Scheme::default(),
            scheme_log: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(cfg.options.seed),
            stop_at: None,
        };
        engine.install(scheme)?;
        Ok(engine)
    }

    /// Checks `scheme` against the system and makes it current.
    fn install(&mut self, scheme: &Scheme) -> Result<(), SimError> {
        let mut strategies = Vec::with_capacity(self.clients.len());
        for c in &self.clients {
            let s = scheme
                .get(&c.id)
                .ok_or_else(|| SimError::MissingStrategy(c.id.clone()))?;
            if !s.is_valid_for(&c.model) {
                return Err(SimError::InvalidStrategy {
                    device: c.id.clone(),
                    strategy: s,
                });
            }
            // surface LUT gaps up front rather than mid-run
            let n = c.model.n_layers;
            match s {
                Strategy::Pp(split) => {
                    self.lut
                        .lookup(&c.kind, &c.model.model_id, LayerRange::new(0, split), 1)?;
                    self.lut.lookup(
                        &self.server_kind,
                        &c.model.model_id,
                        LayerRange::new(split, n),
                        1,
                    )?;
                }
                Strategy::Dp => {
                    let full = LayerRange::new(0, n);
                    self.lut.lookup(&c.kind, &c.model.model_id, full, 1)?;
                    self.lut
                        .lookup(&self.server_kind, &c.model.model_id, full, 1)?;
                }
            }
            strategies.push(s);
        }
        for (c, s) in self.clients.iter_mut().zip(strategies) {
            c.strategy = s;
        }
        self.active_idle = self
            .idle
            .iter()
            .enumerate()
            .filter(|(_, node)| scheme.idle.contains(&node.id))
            .map(|(i, _)| i)
            .collect();
        self.scheme = scheme.clone();
        self.scheme_log.push(SchemeSwitch {
            at_ms: self.now,
            scheme: scheme.clone(),
        });
        Ok(())
    }

    fn push(&mut self, at: f64, event: Event) {
        self.seq += 1;
        self.events.push(Scheduled {
            at,
            seq: self.seq,
            event,
        });
    }

    fn jittered(&mut self, ms: f64) -> f64 {
        let j = self.cfg.options.jitter;
        if j > 0.0 {
            ms * (1.0 + self.rng.random_range(-j..=j))
        } else {
            ms
        }
    }

    fn run(mut self, mut monitor: Option<&mut dyn Monitor>) -> Result<SimResult, SimError> {
        match self.cfg.options.workload {
            Workload::ClosedLoop { window } => {
                for c in 0..self.clients.len() {
                    for _ in 0..window {
                        self.push(0.0, Event::Issue(c));
                    }
                }
            }
            Workload::OpenLoop { interval_ms } => {
                for c in 0..self.clients.len() {
                    let phase = self.rng.random_range(0.0..interval_ms);
                    self.push(phase, Event::Issue(c));
                }
            }
        }
        if monitor.is_some() {
            if let Some(trace) = &self.net.trace {
                let points: Vec<f64> = trace.breakpoints().collect();
                for t in points {
                    self.push(t, Event::Monitor(t));
                }
            }
        }
        let limit = match self.cfg.options.horizon {
            Horizon::Duration { ms } => ms,
            _ => f64::INFINITY,
        };

        while let Some(Scheduled { at, event, .. }) = self.events.pop() {
            if at > limit {
                break;
            }
            self.now = at;
            match event {
                Event::Issue(c) => self.issue(c)?,
                Event::DeviceStageDone(t) => self.start_uplink(t),
                Event::UplinkDone(t) => self.after_uplink(t)?,
                Event::WindowExpired(key, generation) => {
                    if self.queues.get(&key).is_some_and(|p| p.generation == generation) {
                        self.flush(key)?;
                    }
                }
                Event::BatchDone(batch) => {
                    for t in batch {
                        self.start_downlink(t);
                    }
                }
                Event::IdleInputArrived(t, i) => {
                    let model = &self.clients[self.tasks[t].client].model;
                    let ms = self.lut.lookup(
                        &self.idle[i].kind,
                        &model.model_id,
                        LayerRange::new(0, model.n_layers),
                        1,
                    )?;
                    let ms = self.jittered(ms);
                    let end = self.idle[i].compute.run(self.now, ms);
                    self.push(end, Event::IdleComputeDone(t, i));
                }
                Event::IdleComputeDone(t, i) => {
                    let bytes = self.clients[self.tasks[t].client].model.result_volume();
                    let end = self.idle[i].link.transfer(self.now, bytes, self.net);
                    self.push(end, Event::IdleResultArrived(t));
                }
                Event::IdleResultArrived(t) => self.start_downlink(t),
                Event::Completed(t) => self.complete(t),
                Event::Monitor(t) => {
                    if let Some(m) = monitor.as_deref_mut() {
                        let snapshot = self.net.snapshot_at(t);
                        let current = self.scheme.clone();
                        if let Some(next) = m.observe(t, &snapshot, &current)? {
                            if next != current {
                                self.install(&next)?;
                            }
                        }
                    }
                }
            }
            if self.stop_at.is_some() {
                break;
            }
        }

        let elapsed = match self.cfg.options.horizon {
            Horizon::Duration { ms } => ms,
            _ => self.stop_at.unwrap_or(self.now),
        };
        if self.completed == 0 {
            return Err(SimError::NoCompletions);
        }
        Ok(self.finish(elapsed))
    }

    fn may_issue(&self) -> bool {
        if !self.issuing {
            return false;
        }
        match self.cfg.options.horizon {
            Horizon::Tasks { count } => self.issued < count,
            Horizon::Duration { ms } => self.now < ms,
            Horizon::AtLeast { .. } => true,
        }
    }

    fn issue(&mut self, c: usize) -> Result<(), SimError> {
        if !self.may_issue() {
            return Ok(());
        }
        if let Workload::OpenLoop { interval_ms } = self.cfg.options.workload {
            self.push(self.now + interval_ms, Event::Issue(c));
        }
        let id = self.tasks.len();
        self.issued += 1;
        self.clients[c].in_flight += 1;
        let strategy = self.clients[c].strategy;
        let n = self.clients[c].model.n_layers;
        let mut task = Task {
            client: c,
            strategy,
            route: Route::Local,
            issue_ms: self.now,
            after_uplink: Hop::ToServerQueue,
        };
        match strategy {
            Strategy::Pp(s) => {
                task.after_uplink = if s == n { Hop::Done } else { Hop::ToServerQueue };
                self.tasks.push(task);
                if s == 0 {
                    self.start_uplink(id);
                } else {
                    let client = &self.clients[c];
                    let ms = self.lut.lookup(
                        &client.kind,
                        &client.model.model_id,
                        LayerRange::new(0, s),
                        1,
                    )?;
                    let ms = self.jittered(ms);
                    let end = self.clients[c].compute.run(self.now, ms);
                    self.push(end, Event::DeviceStageDone(id));
                }
            }
            Strategy::Dp => {
                let route = self.dispatch(c);
                task.route = route.clone();
                match route {
                    Route::Local => {
                        self.tasks.push(task);
                        let ms = self.clients[c].full_local_ms;
                        let ms = self.jittered(ms);
                        let end = self.clients[c].compute.run(self.now, ms);
                        self.push(end, Event::Completed(id));
                    }
                    Route::Server => {
                        self.tasks.push(task);
                        self.start_uplink(id);
                    }
                    Route::Idle(_) => {
                        let i = self.idle_index(&task.route);
                        task.after_uplink = Hop::ToIdle(i);
                        self.tasks.push(task);
                        self.start_uplink(id);
                    }
                }
            }
        }
        Ok(())
    }

    fn idle_index(&self, route: &Route) -> usize {
        match route {
            Route::Idle(name) => self.idle.iter().position(|n| &n.id == name).expect("known idle"),
            _ => unreachable!(),
        }
    }

    /// Earliest projected completion among the DP replicas reachable by
    /// client `c`. Ties favour local, then server, then idle order.
    fn dispatch(&self, c: usize) -> Route {
        let client = &self.clients[c];
        let now = self.now;
        let net = self.net;
        let raw = client.model.raw_input_volume();
        let result = client.model.result_volume();

        let mut best = (now.max(client.compute.free_at) + client.full_local_ms, Route::Local);

        let up_end = net.transfer_end(now.max(client.uplink.free_at), raw);
        let worker_free = self
            .workers
            .iter()
            .map(|w| w.free_at)
            .fold(f64::INFINITY, f64::min);
        let srv_end = up_end.max(worker_free) + client.full_server_ms;
        let srv_done = net.transfer_end(srv_end.max(client.downlink.free_at), result);
        if srv_done < best.0 {
            best = (srv_done, Route::Server);
        }

        for &i in &self.active_idle {
            let node = &self.idle[i];
            let Ok(ms) = self.lut.lookup(
                &node.kind,
                &client.model.model_id,
                LayerRange::new(0, client.model.n_layers),
                1,
            ) else {
                continue;
            };
            let at_idle = net.transfer_end(up_end.max(node.link.free_at), raw);
            let computed = at_idle.max(node.compute.free_at) + ms;
            let back = net.transfer_end(computed, result);
            let done = net.transfer_end(back.max(client.downlink.free_at), result);
            if done < best.0 {
                best = (done, Route::Idle(node.id.clone()));
            }
        }
        best.1
    }

    fn start_uplink(&mut self, t: usize) {
        let task = &self.tasks[t];
        let client = &self.clients[task.client];
        let bytes = match task.strategy {
            Strategy::Pp(s) => client.model.boundary_volumes[s],
            Strategy::Dp => client.model.raw_input_volume(),
        };
        let c = task.client;
        let end = self.clients[c].uplink.transfer(self.now, bytes, self.net);
        self.push(end, Event::UplinkDone(t));
    }

    fn after_uplink(&mut self, t: usize) -> Result<(), SimError> {
        match self.tasks[t].after_uplink {
            Hop::Done => {
                self.complete(t);
                Ok(())
            }
            Hop::ToIdle(i) => {
                let raw = self.clients[self.tasks[t].client].model.raw_input_volume();
                let end = self.idle[i].link.transfer(self.now, raw, self.net);
                self.push(end, Event::IdleInputArrived(t, i));
                Ok(())
            }
            Hop::ToServerQueue => self.enqueue(t),
        }
    }

    fn enqueue(&mut self, t: usize) -> Result<(), SimError> {
        let task = &self.tasks[t];
        let model = &self.clients[task.client].model;
        let range = match task.strategy {
            Strategy::Pp(s) => LayerRange::new(s, model.n_layers),
            Strategy::Dp => LayerRange::new(0, model.n_layers),
        };
        let key = BatchKey {
            model: model.model_id.clone(),
            range,
        };
        let policy = self.cfg.system.batch_policy;
        let pending = self.queues.entry(key.clone()).or_default();
        pending.tasks.push(t);
        let len = pending.tasks.len();
        let generation = pending.generation;
        if len >= policy.max_batch || policy.window_ms <= 0.0 {
            self.flush(key)?;
        } else if len == 1 {
            self.push(
                self.now + policy.window_ms,
                Event::WindowExpired(key, generation),
            );
        }
        Ok(())
    }

    fn flush(&mut self, key: BatchKey) -> Result<(), SimError> {
        let pending = self.queues.get_mut(&key).expect("queue exists");
        let batch = std::mem::take(&mut pending.tasks);
        pending.generation += 1;
        if batch.is_empty() {
            return Ok(());
        }
        let ms = self
            .lut
            .lookup(&self.server_kind, &key.model, key.range, batch.len() as u32)?;
        let ms = self.jittered(ms);
        let w = (0..self.workers.len())
            .min_by(|&a, &b| self.workers[a].free_at.total_cmp(&self.workers[b].free_at))
            .expect("at least one worker");
        let end = self.workers[w].run(self.now, ms);
        self.push(end, Event::BatchDone(batch));
        Ok(())
    }

    fn start_downlink(&mut self, t: usize) {
        let c = self.tasks[t].client;
        let bytes = self.clients[c].model.result_volume();
        let end = self.clients[c].downlink.transfer(self.now, bytes, self.net);
        self.push(end, Event::Completed(t));
    }

    fn complete(&mut self, t: usize) {
        let task = &self.tasks[t];
        let c = task.client;
        let latency = self.now - task.issue_ms;
        self.completed += 1;
        self.clients[c].in_flight -= 1;
        self.clients[c].latencies.push(latency);
        if self.cfg.options.record_tasks {
            self.records.push(TaskRecord {
                task_id: t as u64,
                device: self.clients[c].id.clone(),
                issue_ms: task.issue_ms,
                complete_ms: self.now,
                scheme: task.strategy.to_string(),
                route: task.route.to_string(),
            });
        }
        if let Horizon::AtLeast { ms, tasks } = self.cfg.options.horizon {
            if self.now >= ms && self.completed >= tasks {
                self.issuing = false;
                self.stop_at = Some(self.now);
                return;
            }
        }
        if let Workload::ClosedLoop { .. } = self.cfg.options.workload {
            self.push(self.now, Event::Issue(c));
        }
    }

    fn finish(mut self, elapsed: f64) -> SimResult {
        let mut utilization = BTreeMap::new();
        let frac = |busy: f64| if elapsed > 0.0 { (busy / elapsed).min(1.0) } else { 0.0 };
        let mut devices = Vec::new();
        let mut all = Vec::new();
        for c in &mut self.clients {
            utilization.insert(format!("{}:compute", c.id), frac(c.compute.busy_ms));
            utilization.insert(format!("{}:uplink", c.id), frac(c.uplink.busy_ms));
            utilization.insert(format!("{}:downlink", c.id), frac(c.downlink.busy_ms));
            all.extend_from_slice(&c.latencies);
            c.latencies.sort_by(f64::total_cmp);
            let l = &c.latencies;
            let mean = if l.is_empty() { 0.0 } else { l.iter().sum::<f64>() / l.len() as f64 };
            devices.push(DeviceStats {
                device_id: c.id.clone(),
                completed: l.len() as u64,
                mean_latency_ms: mean,
                p50_latency_ms: percentile(l, 0.50),
                p95_latency_ms: percentile(l, 0.95),
                p99_latency_ms: percentile(l, 0.99),
            });
        }
        for node in &self.idle {
            utilization.insert(format!("{}:compute", node.id), frac(node.compute.busy_ms));
            utilization.insert(format!("{}:link", node.id), frac(node.link.busy_ms));
        }
        for (i, w) in self.workers.iter().enumerate() {
            utilization.insert(format!("server:worker{i}"), frac(w.busy_ms));
        }
        let mean_latency_ms = all.iter().sum::<f64>() / all.len().max(1) as f64;
        SimResult {
            throughput: self.completed as f64 / (elapsed / 1000.0),
            issued: self.issued,
            completed: self.completed,
            in_flight: self.issued - self.completed,
            elapsed_ms: elapsed,
            mean_latency_ms,
            devices,
            utilization,
            scheme_log: self.scheme_log,
            tasks: self.records,
        }
    }
}

/// Nearest-rank percentile of sorted data.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let rank = (q * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}
