//! Scheme search: design-space enumeration, pairwise ranking, the two-stage
//! hierarchical optimizer, requirement-driven planning, reschedule triggers
//! and idle-device lending.
//!
//! Every comparison goes through an [`Evaluator`], so the same search runs
//! against the simulator (exact, slow) or the pairwise predictor (fast).

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::predictor::{PredictorError, PredictorModel};
use crate::profiles::{preset_pp_comm, preset_pp_comp, LayerRange, Lut, PresetError};
use crate::sim::{oracle_throughput, Monitor, SimConfig, SimError, SimOptions};
use crate::sysgraph::{build_raw_features, build_system_graph, GraphError, SystemGraph};
use crate::types::{NetworkState, Scheme, Strategy, SystemConfig};

#[derive(Debug, Error)]
pub enum SchedError {
    #[error("no client devices to schedule")]
    NoDevices,
    #[error("device {0:?} has no candidate strategies")]
    NoCandidates(String),
    #[error("empty scheme list")]
    EmptySpace,
    #[error("device {0:?} is not a client of the configuration")]
    UnknownDevice(String),
    #[error("invalid scheduler config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Preset(#[from] PresetError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Predictor(#[from] PredictorError),
}

/// Decides pairwise which of two schemes is faster.
pub trait Evaluator {
    /// True only when `challenger` is strictly better than `incumbent`.
    fn prefers(&mut self, incumbent: &Scheme, challenger: &Scheme) -> Result<bool, SchedError>;
}

/// Absolute throughput estimate, for [`plan`].
pub trait ThroughputEstimator {
    fn estimate(&mut self, scheme: &Scheme) -> Result<f64, SchedError>;
}

/// Ground truth: simulates each scheme once and compares throughputs.
pub struct OracleEvaluator {
    cfg: SimConfig,
    cache: HashMap<Scheme, f64>,
    simulations: usize,
}

impl OracleEvaluator {
    pub fn new(cfg: SimConfig) -> Self {
        Self {
            cfg,
            cache: HashMap::new(),
            simulations: 0,
        }
    }

    pub fn throughput(&mut self, scheme: &Scheme) -> Result<f64, SchedError> {
        if let Some(&t) = self.cache.get(scheme) {
            return Ok(t);
        }
        let t = oracle_throughput(&self.cfg, scheme)?;
        self.simulations += 1;
        self.cache.insert(scheme.clone(), t);
        Ok(t)
    }

    /// Distinct schemes simulated so far.
    pub fn simulations(&self) -> usize {
        self.simulations
    }
}

impl Evaluator for OracleEvaluator {
    fn prefers(&mut self, incumbent: &Scheme, challenger: &Scheme) -> Result<bool, SchedError> {
        Ok(self.throughput(challenger)? > self.throughput(incumbent)?)
    }
}

impl ThroughputEstimator for OracleEvaluator {
    fn estimate(&mut self, scheme: &Scheme) -> Result<f64, SchedError> {
        self.throughput(scheme)
    }
}

/// Pairwise predictor. Each scheme is encoded once; a comparison is then
/// `sigmoid(score(challenger) - score(incumbent)) > 0.5`.
pub struct LearnedEvaluator<'a> {
    model: &'a PredictorModel,
    config: &'a SystemConfig,
    lut: &'a Lut,
    graph: SystemGraph,
    scores: HashMap<Scheme, f64>,
}

impl<'a> LearnedEvaluator<'a> {
    pub fn new(model: &'a PredictorModel, config: &'a SystemConfig, lut: &'a Lut) -> Result<Self, SchedError> {
        Ok(Self {
            model,
            config,
            lut,
            graph: build_system_graph(config)?,
            scores: HashMap::new(),
        })
    }

    pub fn score(&mut self, scheme: &Scheme) -> Result<f64, SchedError> {
        // idle lending is invisible to the graph features
        let key = Scheme {
            assignment: scheme.assignment.clone(),
            idle: BTreeSet::new(),
        };
        if let Some(&s) = self.scores.get(&key) {
            return Ok(s);
        }
        let raw = build_raw_features(&self.graph, &key, self.config, self.lut)?;
        let s = self.model.score(&self.graph, &self.model.features(&raw))?;
        self.scores.insert(key, s);
        Ok(s)
    }
}

impl Evaluator for LearnedEvaluator<'_> {
    fn prefers(&mut self, incumbent: &Scheme, challenger: &Scheme) -> Result<bool, SchedError> {
        let inc = self.score(incumbent)?;
        let ch = self.score(challenger)?;
        Ok(crate::predictor::gin::pair_probability(ch, inc) > 0.5)
    }
}

/// Throughput head of a trained model as a [`ThroughputEstimator`].
pub struct LearnedThroughput<'a> {
    model: &'a PredictorModel,
    config: &'a SystemConfig,
    lut: &'a Lut,
    graph: SystemGraph,
}

impl<'a> LearnedThroughput<'a> {
    pub fn new(model: &'a PredictorModel, config: &'a SystemConfig, lut: &'a Lut) -> Result<Self, SchedError> {
        Ok(Self {
            model,
            config,
            lut,
            graph: build_system_graph(config)?,
        })
    }
}

impl ThroughputEstimator for LearnedThroughput<'_> {
    fn estimate(&mut self, scheme: &Scheme) -> Result<f64, SchedError> {
        let raw = build_raw_features(&self.graph, scheme, self.config, self.lut)?;
        Ok(self.model.predict_throughput(&self.graph, &self.model.features(&raw))?)
    }
}

/// Wraps an evaluator and counts calls.
pub struct Counting<E> {
    pub inner: E,
    pub calls: usize,
}

impl<E> Counting<E> {
    pub fn new(inner: E) -> Self {
        Self { inner, calls: 0 }
    }
}

impl<E: Evaluator> Evaluator for Counting<E> {
    fn prefers(&mut self, incumbent: &Scheme, challenger: &Scheme) -> Result<bool, SchedError> {
        self.calls += 1;
        self.inner.prefers(incumbent, challenger)
    }
}

/// Which evaluator to build for a given system state. Used where the system
/// changes under the scheduler (adaptive runs, the edge server).
#[derive(Debug, Clone)]
pub enum EvaluatorSpec {
    Oracle(SimOptions),
    Learned(Arc<PredictorModel>),
}

impl EvaluatorSpec {
    pub fn build<'a>(
        &'a self,
        config: &'a SystemConfig,
        lut: &'a Arc<Lut>,
    ) -> Result<Box<dyn Evaluator + 'a>, SchedError> {
        Ok(match self {
            EvaluatorSpec::Oracle(options) => Box::new(OracleEvaluator::new(SimConfig::new(
                config.clone(),
                Arc::clone(lut),
                options.clone(),
            ))),
            EvaluatorSpec::Learned(model) => Box::new(LearnedEvaluator::new(model, config, lut)?),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RescheduleThresholds {
    /// Relative bandwidth change that triggers rescheduling.
    pub bandwidth: f64,
}

impl Default for RescheduleThresholds {
    fn default() -> Self {
        Self { bandwidth: 0.2 }
    }
}

/// Per-device candidate strategies for the coarse stage.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Candidates {
    /// DP plus the compute- and communication-optimal presets.
    #[default]
    Presets,
    /// Fixed lists per device id; devices not listed fall back to presets.
    Explicit(BTreeMap<String, Vec<Strategy>>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchedulerConfig {
    /// Device visits allowed in the fine-grained stage.
    pub iteration_limit: usize,
    pub candidates: Candidates,
    pub thresholds: RescheduleThresholds,
    /// Tune devices with the same kind and model together, once.
    pub share_similar: bool,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        Self {
            iteration_limit: 10,
            candidates: Candidates::Presets,
            thresholds: RescheduleThresholds::default(),
            share_similar: false,
        }
    }
}

impl SchedulerConfig {
    pub fn validate(&self) -> Result<(), SchedError> {
        let b = self.thresholds.bandwidth;
        if !(b > 0.0 && b <= 1.0) {
            return Err(SchedError::InvalidConfig(format!(
                "bandwidth threshold {b} outside (0, 1]"
            )));
        }
        if let Candidates::Explicit(map) = &self.candidates {
            if let Some((d, _)) = map.iter().find(|(_, v)| v.is_empty()) {
                return Err(SchedError::NoCandidates(d.clone()));
            }
        }
        Ok(())
    }
}

/// DP, PP_comp and PP_comm without duplicates. Models too short for an
/// interior split get DP, edge-only and device-only instead.
pub fn candidate_options(config: &SystemConfig, lut: &Lut, device_id: &str) -> Result<Vec<Strategy>, SchedError> {
    let device = config
        .device(device_id)
        .ok_or_else(|| SchedError::UnknownDevice(device_id.to_string()))?;
    let model = config
        .model_of(device_id)
        .ok_or_else(|| GraphError::MissingModel(device_id.to_string()))?;
    let server = config.server().ok_or(GraphError::NoServer)?;
    let n = model.n_layers;
    let mut out = vec![Strategy::Dp];
    let presets = if n < 2 {
        vec![Strategy::Pp(0), Strategy::Pp(n)]
    } else {
        vec![
            Strategy::Pp(preset_pp_comp(model, &device.kind, &server.kind, lut)?),
            Strategy::Pp(preset_pp_comm(model)?),
        ]
    };
    for s in presets {
        if !out.contains(&s) {
            out.push(s);
        }
    }
    Ok(out)
}

fn device_candidates(
    config: &SystemConfig,
    lut: &Lut,
    candidates: &Candidates,
) -> Result<Vec<(String, Vec<Strategy>)>, SchedError> {
    config
        .clients()
        .map(|c| {
            let id = c.device_id.clone();
            let opts = match candidates {
                Candidates::Explicit(map) if map.contains_key(&id) => map[&id].clone(),
                _ => candidate_options(config, lut, &id)?,
            };
            Ok((id, opts))
        })
        .collect()
}

/// Cartesian product of the per-device candidates. The first device varies
/// slowest.
pub fn enumerate_design_space(devices: &[(String, Vec<Strategy>)]) -> Result<Vec<Scheme>, SchedError> {
    if devices.is_empty() {
        return Err(SchedError::NoDevices);
    }
    let mut space = vec![Scheme::default()];
    for (id, opts) in devices {
        if opts.is_empty() {
            return Err(SchedError::NoCandidates(id.clone()));
        }
        space = space
            .iter()
            .flat_map(|s| opts.iter().map(move |&o| s.with(id, o)))
            .collect();
    }
    Ok(space)
}

/// Every scheme reachable on `config`: DP or any split for each client.
pub fn full_design_space(config: &SystemConfig) -> Result<Vec<Scheme>, SchedError> {
    let devices = config
        .clients()
        .map(|c| {
            let n = config
                .model_of(&c.device_id)
                .ok_or_else(|| GraphError::MissingModel(c.device_id.clone()))?
                .n_layers;
            let opts = std::iter::once(Strategy::Dp).chain((0..=n).map(Strategy::Pp)).collect();
            Ok((c.device_id.clone(), opts))
        })
        .collect::<Result<Vec<_>, SchedError>>()?;
    enumerate_design_space(&devices)
}

/// Left fold of pairwise comparisons; the incumbent keeps ties.
pub fn rank_best(schemes: &[Scheme], eval: &mut dyn Evaluator) -> Result<Scheme, SchedError> {
    let (first, rest) = schemes.split_first().ok_or(SchedError::EmptySpace)?;
    let mut best = first;
    for s in rest {
        if eval.prefers(best, s)? {
            best = s;
        }
    }
    Ok(best.clone())
}

/// Coarse ranking over the candidate space, then one pass of split-point
/// shifts over the devices left on PP, bounded by `iteration_limit` visits.
pub fn optimize(
    config: &SystemConfig,
    lut: &Lut,
    sched: &SchedulerConfig,
    eval: &mut dyn Evaluator,
) -> Result<Scheme, SchedError> {
    sched.validate()?;
    let devices = device_candidates(config, lut, &sched.candidates)?;
    let space = enumerate_design_space(&devices)?;
    let mut best = rank_best(&space, eval)?;

    let groups = visit_groups(config, sched.share_similar);
    for (t, group) in groups.iter().enumerate() {
        if t >= sched.iteration_limit {
            break;
        }
        let lead = &group[0];
        let Some(Strategy::Pp(s)) = best.get(lead) else {
            continue;
        };
        let n = config
            .model_of(lead)
            .ok_or_else(|| GraphError::MissingModel(lead.clone()))?
            .n_layers;
        let mut set = vec![best.clone()];
        for shifted in [Strategy::Pp(s).shift_left(), Strategy::Pp(s).shift_right(n)] {
            let mut p = best.clone();
            for d in group {
                p.assignment.insert(d.clone(), shifted);
            }
            if !set.contains(&p) {
                set.push(p);
            }
        }
        best = rank_best(&set, eval)?;
    }
    Ok(best)
}

/// Clients in config order; with `share`, clients of the same kind and model
/// collapse into one group led by the first of them.
fn visit_groups(config: &SystemConfig, share: bool) -> Vec<Vec<String>> {
    let mut groups: Vec<Vec<String>> = Vec::new();
    let mut index: HashMap<(String, String), usize> = HashMap::new();
    for c in config.clients() {
        let model = config.model_of(&c.device_id).map(|m| m.model_id.clone()).unwrap_or_default();
        if share {
            if let Some(&g) = index.get(&(c.kind.clone(), model.clone())) {
                groups[g].push(c.device_id.clone());
                continue;
            }
            index.insert((c.kind.clone(), model), groups.len());
        }
        groups.push(vec![c.device_id.clone()]);
    }
    groups
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanOutcome {
    pub scheme: Scheme,
    pub predicted_throughput: f64,
    pub requirement_met: bool,
    pub examined: usize,
}

/// Walks `space` in order and returns the first scheme predicted to reach
/// `required`. Otherwise returns the best prediction among the first
/// `iteration_limit` schemes, flagged as unmet.
pub fn plan(
    space: &[Scheme],
    required: f64,
    iteration_limit: usize,
    estimator: &mut dyn ThroughputEstimator,
) -> Result<PlanOutcome, SchedError> {
    let mut best: Option<(usize, f64)> = None;
    let limit = iteration_limit.max(1).min(space.len());
    for (i, s) in space[..limit].iter().enumerate() {
        let t = estimator.estimate(s)?;
        if t >= required {
            return Ok(PlanOutcome {
                scheme: s.clone(),
                predicted_throughput: t,
                requirement_met: true,
                examined: i + 1,
            });
        }
        if best.is_none_or(|(_, bt)| t > bt) {
            best = Some((i, t));
        }
    }
    let (i, t) = best.ok_or(SchedError::EmptySpace)?;
    Ok(PlanOutcome {
        scheme: space[i].clone(),
        predicted_throughput: t,
        requirement_met: false,
        examined: limit,
    })
}

/// What the reschedule trigger watches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemState {
    pub bandwidth_mbps: f64,
    pub devices: BTreeSet<String>,
    pub idle: BTreeSet<String>,
}

impl SystemState {
    pub fn of(config: &SystemConfig) -> Self {
        Self {
            bandwidth_mbps: config.network.bandwidth_mbps,
            devices: config.clients().map(|d| d.device_id.clone()).collect(),
            idle: config.idle_devices().map(|d| d.device_id.clone()).collect(),
        }
    }
}

pub fn should_reschedule(old: &SystemState, new: &SystemState, th: &RescheduleThresholds) -> bool {
    let change = (new.bandwidth_mbps - old.bandwidth_mbps).abs() / old.bandwidth_mbps;
    change >= th.bandwidth || old.devices != new.devices || old.idle != new.idle
}

/// Lends idle devices of `config` to DP dispatch, one at a time in config
/// order, keeping each that the evaluator ranks at least as good as the
/// scheme without it. Nothing changes when no client runs DP.
pub fn assign_idle(
    scheme: &Scheme,
    config: &SystemConfig,
    lut: &Lut,
    eval: &mut dyn Evaluator,
) -> Result<Scheme, SchedError> {
    let dp_models: Vec<_> = scheme
        .assignment
        .iter()
        .filter(|(_, s)| s.is_dp())
        .filter_map(|(d, _)| config.model_of(d))
        .collect();
    if dp_models.is_empty() {
        return Ok(scheme.clone());
    }
    let mut current = scheme.clone();
    for idle in config.idle_devices() {
        if current.idle.contains(&idle.device_id) {
            continue;
        }
        let missing = dp_models
            .iter()
            .find(|m| !lut.contains(&idle.kind, &m.model_id, LayerRange::new(0, m.n_layers)));
        if let Some(m) = missing {
            log::warn!(
                "idle device {} ({}) has no LUT entry for model {}; skipped",
                idle.device_id,
                idle.kind,
                m.model_id
            );
            continue;
        }
        let mut extended = current.clone();
        extended.idle.insert(idle.device_id.clone());
        if !eval.prefers(&extended, &current)? {
            current = extended;
        }
    }
    Ok(current)
}

/// One reschedule performed by [`AdaptiveMonitor`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RescheduleEvent {
    pub at_ms: f64,
    pub bandwidth_mbps: f64,
    pub from: Scheme,
    pub to: Scheme,
}

/// Reruns [`optimize`] whenever the observed network moves past the
/// configured threshold, relative to the state of the last optimization.
pub struct AdaptiveMonitor {
    config: SystemConfig,
    lut: Arc<Lut>,
    sched: SchedulerConfig,
    evaluator: EvaluatorSpec,
    last: SystemState,
    pub events: Vec<RescheduleEvent>,
    /// Trigger checks that passed the threshold.
    pub triggers: usize,
}

impl AdaptiveMonitor {
    pub fn new(config: SystemConfig, lut: Arc<Lut>, sched: SchedulerConfig, evaluator: EvaluatorSpec) -> Self {
        let last = SystemState::of(&config);
        Self {
            config,
            lut,
            sched,
            evaluator,
            last,
            events: Vec::new(),
            triggers: 0,
        }
    }

    fn reschedule(&mut self, network: &NetworkState) -> Result<Scheme, SchedError> {
        let config = self.config.with_network(NetworkState {
            trace: None,
            ..network.clone()
        });
        let mut eval = self.evaluator.build(&config, &self.lut)?;
        let scheme = optimize(&config, &self.lut, &self.sched, eval.as_mut())?;
        assign_idle(&scheme, &config, &self.lut, eval.as_mut())
    }
}

impl Monitor for AdaptiveMonitor {
    fn observe(
        &mut self,
        now_ms: f64,
        network: &NetworkState,
        current: &Scheme,
    ) -> Result<Option<Scheme>, SimError> {
        let state = SystemState {
            bandwidth_mbps: network.bandwidth_mbps,
            ..self.last.clone()
        };
        if !should_reschedule(&self.last, &state, &self.sched.thresholds) {
            return Ok(None);
        }
        self.triggers += 1;
        self.last = state;
        let next = self
            .reschedule(network)
            .map_err(|e| SimError::Reschedule(e.to_string()))?;
        if &next == current {
            return Ok(None);
        }
        self.events.push(RescheduleEvent {
            at_ms: now_ms,
            bandwidth_mbps: network.bandwidth_mbps,
            from: current.clone(),
            to: next.clone(),
        });
        Ok(Some(next))
    }
}

#[cfg(test)]
mod tests;
