//! Shared domain types: devices, model profiles, strategies, schemes, network
//! state and the aggregate [`SystemConfig`].
//!
//! Everything here is plain data. Values are immutable once built and can be
//! shared freely across threads.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

/// Role a device plays in the deployment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Client,
    Idle,
    Server,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DeviceProfile {
    pub device_id: String,
    /// Hardware class label, e.g. `pi4b` or `tx2-gpu`. LUT entries are keyed by it.
    pub kind: String,
    pub role: Role,
}

impl DeviceProfile {
    pub fn new(device_id: impl Into<String>, kind: impl Into<String>, role: Role) -> Self {
        Self {
            device_id: device_id.into(),
            kind: kind.into(),
            role,
        }
    }
}

/// A deployable model: layer count plus the byte volume crossing every layer
/// boundary.
///
/// `boundary_volumes[0]` is the raw input, `boundary_volumes[n_layers]` the
/// final result, and interior entries are intermediate feature volumes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelProfile {
    pub model_id: String,
    pub n_layers: usize,
    pub boundary_volumes: Vec<f64>,
    #[serde(default)]
    pub task: String,
}

impl ModelProfile {
    pub fn new(
        model_id: impl Into<String>,
        boundary_volumes: Vec<f64>,
        task: impl Into<String>,
    ) -> Self {
        Self {
            model_id: model_id.into(),
            n_layers: boundary_volumes.len().saturating_sub(1),
            boundary_volumes,
            task: task.into(),
        }
    }

    pub fn raw_input_volume(&self) -> f64 {
        self.boundary_volumes[0]
    }

    pub fn result_volume(&self) -> f64 {
        self.boundary_volumes[self.n_layers]
    }

    fn check(&self) -> Result<(), String> {
        if self.n_layers == 0 {
            return Err("n_layers must be positive".into());
        }
        if self.boundary_volumes.len() != self.n_layers + 1 {
            return Err(format!(
                "boundary_volumes has {} entries, expected n_layers + 1 = {}",
                self.boundary_volumes.len(),
                self.n_layers + 1
            ));
        }
        if let Some(v) = self
            .boundary_volumes
            .iter()
            .find(|v| !(v.is_finite() && **v > 0.0))
        {
            return Err(format!("boundary volume {v} must be positive"));
        }
        Ok(())
    }
}

/// Per-device co-inference strategy.
///
/// `Pp(s)` runs layers `[0, s)` on the device and `[s, n)` on the server.
/// `Pp(n)` is device-only and `Pp(0)` is edge-only.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Strategy {
    Dp,
    Pp(usize),
}

impl Strategy {
    pub fn is_dp(&self) -> bool {
        matches!(self, Strategy::Dp)
    }

    pub fn split(&self) -> Option<usize> {
        match self {
            Strategy::Dp => None,
            Strategy::Pp(s) => Some(*s),
        }
    }

    pub fn is_valid_for(&self, model: &ModelProfile) -> bool {
        match self {
            Strategy::Dp => true,
            Strategy::Pp(s) => *s <= model.n_layers,
        }
    }

    /// Split point moved one layer left, clamped at 0. DP is unchanged.
    pub fn shift_left(self) -> Strategy {
        match self {
            Strategy::Pp(s) => Strategy::Pp(s.saturating_sub(1)),
            dp => dp,
        }
    }

    /// Split point moved one layer right, clamped at `n_layers`.
    pub fn shift_right(self, n_layers: usize) -> Strategy {
        match self {
            Strategy::Pp(s) => Strategy::Pp((s + 1).min(n_layers)),
            dp => dp,
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Strategy::Dp => f.write_str("dp"),
            Strategy::Pp(s) => write!(f, "pp:{s}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("invalid strategy {0:?}: expected \"dp\" or \"pp:<split>\"")]
pub struct ParseStrategyError(pub String);

impl FromStr for Strategy {
    type Err = ParseStrategyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let t = s.trim();
        if t.eq_ignore_ascii_case("dp") {
            return Ok(Strategy::Dp);
        }
        let split = t
            .strip_prefix("pp:")
            .or_else(|| t.strip_prefix("PP:"))
            .ok_or_else(|| ParseStrategyError(s.to_string()))?;
        split
            .parse()
            .map(Strategy::Pp)
            .map_err(|_| ParseStrategyError(s.to_string()))
    }
}

impl Serialize for Strategy {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Strategy {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// A complete co-inference plan: one strategy per client device, plus the
/// idle devices lent to DP dispatch.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Scheme {
    pub assignment: BTreeMap<String, Strategy>,
    #[serde(default, skip_serializing_if = "BTreeSet::is_empty")]
    pub idle: BTreeSet<String>,
}

impl Scheme {
    pub fn new<I, K>(entries: I) -> Self
    where
        I: IntoIterator<Item = (K, Strategy)>,
        K: Into<String>,
    {
        Self {
            assignment: entries.into_iter().map(|(k, v)| (k.into(), v)).collect(),
            idle: BTreeSet::new(),
        }
    }

    /// Same strategy for every client device of `config`.
    pub fn uniform(config: &SystemConfig, strategy: Strategy) -> Self {
        Self::new(config.clients().map(|d| (d.device_id.clone(), strategy)))
    }

    pub fn get(&self, device_id: &str) -> Option<Strategy> {
        self.assignment.get(device_id).copied()
    }

    pub fn with(&self, device_id: &str, strategy: Strategy) -> Self {
        let mut next = self.clone();
        next.assignment.insert(device_id.to_string(), strategy);
        next
    }

    /// Compact tag such as `d0=pp:2,d1=dp+idle:i0`, used in logs and CSV rows.
    pub fn tag(&self) -> String {
        let mut out = self
            .assignment
            .iter()
            .map(|(d, s)| format!("{d}={s}"))
            .collect::<Vec<_>>()
            .join(",");
        for i in &self.idle {
            out.push_str("+idle:");
            out.push_str(i);
        }
        out
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.tag())
    }
}

/// One constant-rate piece of a bandwidth trace, in effect from `start_ms`
/// until the next segment starts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceSegment {
    pub start_ms: f64,
    pub bandwidth_mbps: f64,
}

/// Piecewise-constant bandwidth over time. The first segment starts at 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BandwidthTrace {
    pub segments: Vec<TraceSegment>,
}

impl BandwidthTrace {
    pub fn new(segments: Vec<TraceSegment>) -> Self {
        Self { segments }
    }

    fn segment_index(&self, t_ms: f64) -> usize {
        self.segments
            .partition_point(|s| s.start_ms <= t_ms)
            .saturating_sub(1)
    }

    pub fn rate_at(&self, t_ms: f64) -> f64 {
        self.segments[self.segment_index(t_ms)].bandwidth_mbps
    }

    /// Times at which the rate changes, excluding the start.
    pub fn breakpoints(&self) -> impl Iterator<Item = f64> + '_ {
        self.segments.iter().skip(1).map(|s| s.start_ms)
    }
}

/// Link state between each client and the server.
///
/// Bandwidth is per client link in decimal megabits per second.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkState {
    pub bandwidth_mbps: f64,
    #[serde(default)]
    pub per_message_overhead_ms: f64,
    /// Optional time-varying bandwidth. When present it overrides
    /// `bandwidth_mbps` for transfers.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace: Option<BandwidthTrace>,
}

impl NetworkState {
    pub fn new(bandwidth_mbps: f64, per_message_overhead_ms: f64) -> Self {
        Self {
            bandwidth_mbps,
            per_message_overhead_ms,
            trace: None,
        }
    }

    pub fn rate_at(&self, t_ms: f64) -> f64 {
        match &self.trace {
            Some(trace) => trace.rate_at(t_ms),
            None => self.bandwidth_mbps,
        }
    }

    /// The same link frozen at its rate at `t_ms`, without a trace.
    pub fn snapshot_at(&self, t_ms: f64) -> NetworkState {
        NetworkState::new(self.rate_at(t_ms), self.per_message_overhead_ms)
    }

    /// Milliseconds to push `bytes` at a constant `mbps`, excluding overhead.
    pub fn wire_ms(bytes: f64, mbps: f64) -> f64 {
        bytes * 8.0 / (mbps * 1000.0)
    }

    /// Nominal transfer time at the static bandwidth, overhead included.
    pub fn transfer_ms(&self, bytes: f64) -> f64 {
        Self::wire_ms(bytes, self.bandwidth_mbps) + self.per_message_overhead_ms
    }

    /// Completion time of a transfer of `bytes` started at `start_ms`,
    /// integrating the piecewise-constant rate, then adding the overhead.
    pub fn transfer_end(&self, start_ms: f64, bytes: f64) -> f64 {
        let trace = match &self.trace {
            None => return start_ms + self.transfer_ms(bytes),
            Some(t) => t,
        };
        let mut remaining_bits = bytes * 8.0;
        let mut t = start_ms;
        let mut idx = trace.segment_index(t);
        loop {
            let rate = trace.segments[idx].bandwidth_mbps * 1000.0; // bits per ms
            let seg_end = trace
                .segments
                .get(idx + 1)
                .map(|s| s.start_ms)
                .unwrap_or(f64::INFINITY);
            let capacity = (seg_end - t) * rate;
            if capacity >= remaining_bits {
                return t + remaining_bits / rate + self.per_message_overhead_ms;
            }
            remaining_bits -= capacity;
            t = seg_end;
            idx += 1;
        }
    }
}

/// Server-side request batching limits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BatchPolicy {
    pub max_batch: usize,
    pub window_ms: f64,
}

impl Default for BatchPolicy {
    fn default() -> Self {
        Self {
            max_batch: 5,
            window_ms: 10.0,
        }
    }
}

impl BatchPolicy {
    /// Every request is processed alone, immediately.
    pub fn unbatched() -> Self {
        Self {
            max_batch: 1,
            window_ms: 0.0,
        }
    }
}

fn default_workers() -> usize {
    1
}

/// Everything the scheduler, simulator and runtime need to know about a
/// deployment. This is the canonical JSON document consumed by the CLI.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemConfig {
    pub devices: Vec<DeviceProfile>,
    /// Model deployed by each client device, keyed by `device_id`.
    pub models: BTreeMap<String, ModelProfile>,
    pub network: NetworkState,
    #[serde(default)]
    pub batch_policy: BatchPolicy,
    #[serde(default = "default_workers")]
    pub worker_count: usize,
}

impl SystemConfig {
    pub fn clients(&self) -> impl Iterator<Item = &DeviceProfile> {
        self.devices.iter().filter(|d| d.role == Role::Client)
    }

    pub fn idle_devices(&self) -> impl Iterator<Item = &DeviceProfile> {
        self.devices.iter().filter(|d| d.role == Role::Idle)
    }

    pub fn server(&self) -> Option<&DeviceProfile> {
        self.devices.iter().find(|d| d.role == Role::Server)
    }

    pub fn device(&self, device_id: &str) -> Option<&DeviceProfile> {
        self.devices.iter().find(|d| d.device_id == device_id)
    }

    pub fn model_of(&self, device_id: &str) -> Option<&ModelProfile> {
        self.models.get(device_id)
    }

    pub fn with_network(&self, network: NetworkState) -> SystemConfig {
        let mut next = self.clone();
        next.network = network;
        next
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// One violated invariant found by [`validate_config`].
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConfigIssue {
    #[error("duplicate device_id {0:?}")]
    DuplicateDeviceId(String),
    #[error("no server device")]
    NoServer,
    #[error("more than one server device ({0})")]
    MultipleServers(usize),
    #[error("missing model for client device {0:?}")]
    MissingModel(String),
    #[error("model entry for unknown device {0:?}")]
    ModelForUnknownDevice(String),
    #[error("invalid model for device {device:?}: {reason}")]
    InvalidModel { device: String, reason: String },
    #[error("bandwidth must be positive")]
    BandwidthNotPositive,
    #[error("per-message overhead must be non-negative")]
    NegativeOverhead,
    #[error("invalid bandwidth trace: {0}")]
    InvalidTrace(String),
    #[error("max_batch must be at least 1")]
    ZeroBatch,
    #[error("batch window must be non-negative")]
    NegativeWindow,
    #[error("worker_count must be at least 1")]
    ZeroWorkers,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("invalid config: {}", .0.iter().map(|i| i.to_string()).collect::<Vec<_>>().join("; "))]
pub struct ValidationErrors(pub Vec<ConfigIssue>);

/// Checks every structural invariant of a [`SystemConfig`], reporting one
/// issue per violation.
pub fn validate_config(config: &SystemConfig) -> Result<(), ValidationErrors> {
    let mut issues = Vec::new();

    let mut seen = HashSet::new();
    for d in &config.devices {
        if !seen.insert(d.device_id.as_str()) {
            issues.push(ConfigIssue::DuplicateDeviceId(d.device_id.clone()));
        }
    }

    match config.devices.iter().filter(|d| d.role == Role::Server).count() {
        0 => issues.push(ConfigIssue::NoServer),
        1 => {}
        n => issues.push(ConfigIssue::MultipleServers(n)),
    }

    for c in config.clients() {
        match config.models.get(&c.device_id) {
            None => issues.push(ConfigIssue::MissingModel(c.device_id.clone())),
            Some(m) => {
                if let Err(reason) = m.check() {
                    issues.push(ConfigIssue::InvalidModel {
                        device: c.device_id.clone(),
                        reason,
                    });
                }
            }
        }
    }
    for id in config.models.keys() {
        if !seen.contains(id.as_str()) {
            issues.push(ConfigIssue::ModelForUnknownDevice(id.clone()));
        }
    }

    let net = &config.network;
    if !(net.bandwidth_mbps.is_finite() && net.bandwidth_mbps > 0.0) {
        issues.push(ConfigIssue::BandwidthNotPositive);
    }
    if !(net.per_message_overhead_ms >= 0.0) {
        issues.push(ConfigIssue::NegativeOverhead);
    }
    if let Some(trace) = &net.trace {
        if let Err(reason) = check_trace(trace) {
            issues.push(ConfigIssue::InvalidTrace(reason));
        }
    }

    if config.batch_policy.max_batch == 0 {
        issues.push(ConfigIssue::ZeroBatch);
    }
    if !(config.batch_policy.window_ms >= 0.0) {
        issues.push(ConfigIssue::NegativeWindow);
    }
    if config.worker_count == 0 {
        issues.push(ConfigIssue::ZeroWorkers);
    }

    if issues.is_empty() {
        Ok(())
    } else {
        Err(ValidationErrors(issues))
    }
}

fn check_trace(trace: &BandwidthTrace) -> Result<(), String> {
    let first = trace.segments.first().ok_or("trace has no segments")?;
    if first.start_ms != 0.0 {
        return Err("first segment must start at 0".into());
    }
    for w in trace.segments.windows(2) {
        if !(w[1].start_ms > w[0].start_ms) {
            return Err("segment start times must strictly increase".into());
        }
    }
    if trace
        .segments
        .iter()
        .any(|s| !(s.bandwidth_mbps.is_finite() && s.bandwidth_mbps > 0.0))
    {
        return Err("segment bandwidth must be positive".into());
    }
    Ok(())
}
