//! Edge server engine.
//!
//! Threads: one acceptor, one handler per connection, one batch dispatcher,
//! `worker_count` workers and one scheduler. Handlers push requests into a
//! shared queue guarded by a mutex and condvar; the dispatcher flushes a
//! queue when it reaches `max_batch` or its oldest request has waited
//! `window_ms`, and hands the batch to the workers over a channel. The
//! scheduler waits for an idle worker before running `optimize()` and never
//! touches the queue lock.

use std::collections::{BTreeMap, HashSet, VecDeque};
use std::io::{BufReader, BufWriter, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use crossbeam_channel::{unbounded, Receiver, RecvTimeoutError, Sender};
use serde::{Deserialize, Serialize};

use super::protocol::{
    read_message, write_message, Message, MsgType, ProtocolError, RegisterAck, Registration, SchedulingPayload,
    TaskBlock, TaskData,
};
use super::{sleep_ms, RuntimeError};
use crate::profiles::{LayerRange, Lut};
use crate::scheduler::{assign_idle, optimize, should_reschedule, EvaluatorSpec, SchedulerConfig, SystemState};
use crate::types::{validate_config, NetworkState, Role, Scheme, Strategy, SystemConfig};

/// Broadcast a fixed scheme once this many results have been sent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlannedSwitch {
    pub after_results: u64,
    pub scheme: Scheme,
}

#[derive(Debug, Clone)]
pub struct ServerOptions {
    pub config: SystemConfig,
    pub lut: Arc<Lut>,
    pub sched: SchedulerConfig,
    pub evaluator: EvaluatorSpec,
    /// Multiplies LUT milliseconds before waiting them out.
    pub time_scale: f64,
    /// Clients that must register before the first scheme goes out.
    pub wait_for: usize,
    /// Stop once this many device sessions have ended.
    pub sessions: Option<usize>,
    pub switch: Option<PlannedSwitch>,
}

impl ServerOptions {
    pub fn new(config: SystemConfig, lut: Arc<Lut>, evaluator: EvaluatorSpec) -> Self {
        Self {
            config,
            lut,
            sched: SchedulerConfig::default(),
            evaluator,
            time_scale: 1.0,
            wait_for: 1,
            sessions: None,
            switch: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlushCause {
    Cap,
    Window,
    Shutdown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlushRecord {
    pub at_ms: f64,
    pub model: String,
    pub range: (usize, usize),
    pub size: usize,
    pub cause: FlushCause,
    /// Arrival time of the oldest request in the batch.
    pub oldest_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchemeBroadcast {
    pub at_ms: f64,
    pub scheme: Scheme,
    pub recipients: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ServerReport {
    pub sessions: usize,
    pub tasks_received: u64,
    pub results_sent: u64,
    pub duplicate_ids: u64,
    /// Tasks whose result could not be delivered.
    pub undelivered: u64,
    pub flushes: Vec<FlushRecord>,
    pub broadcasts: Vec<SchemeBroadcast>,
    pub errors: Vec<String>,
}

impl ServerReport {
    /// Every received task was answered exactly once.
    pub fn conserved(&self) -> bool {
        self.tasks_received == self.results_sent && self.duplicate_ids == 0 && self.undelivered == 0
    }
}

type Writer = Arc<Mutex<BufWriter<TcpStream>>>;

struct Session {
    writer: Writer,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
struct BatchKey {
    model: String,
    range: LayerRange,
}

struct Pending {
    device: String,
    block: TaskBlock,
    arrived: Instant,
}

struct Batch {
    key: BatchKey,
    items: Vec<Pending>,
}

#[derive(Default)]
struct Queue {
    queues: BTreeMap<BatchKey, VecDeque<Pending>>,
    closed: bool,
}

enum SchedRequest {
    Membership,
    Network(NetworkState),
    Force(Scheme),
}

struct Shared {
    opts: ServerOptions,
    server_kind: String,
    start: Instant,
    queue: Mutex<Queue>,
    queue_cv: Condvar,
    sessions: Mutex<BTreeMap<String, Session>>,
    scheme: Mutex<Scheme>,
    report: Mutex<ServerReport>,
    seen: Mutex<HashSet<(String, u64)>>,
    idle_workers: AtomicUsize,
    stop: AtomicBool,
    sched_tx: Sender<SchedRequest>,
    switched: AtomicBool,
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|p| p.into_inner())
}

impl Shared {
    fn now_ms(&self) -> f64 {
        self.start.elapsed().as_secs_f64() * 1000.0
    }

    fn error(&self, msg: String) {
        log::warn!("{msg}");
        lock(&self.report).errors.push(msg);
    }

    fn send(&self, writer: &Writer, msg: &Message) -> Result<(), ProtocolError> {
        write_message(&mut *lock(writer), msg)
    }
}

/// Lets tests and the CLI steer a running server.
#[derive(Clone)]
pub struct ServerHandle {
    shared: Arc<Shared>,
    addr: SocketAddr,
}

impl ServerHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn stop(&self) {
        self.shared.stop.store(true, Ordering::SeqCst);
        self.shared.queue_cv.notify_all();
    }

    /// Reports a new network state; reschedules if it passes the threshold.
    pub fn observe_network(&self, network: NetworkState) {
        let _ = self.shared.sched_tx.send(SchedRequest::Network(network));
    }

    /// Broadcasts `scheme` without consulting the optimizer.
    pub fn push_scheme(&self, scheme: Scheme) {
        let _ = self.shared.sched_tx.send(SchedRequest::Force(scheme));
    }

    pub fn report(&self) -> ServerReport {
        lock(&self.shared.report).clone()
    }

    pub fn current_scheme(&self) -> Scheme {
        lock(&self.shared.scheme).clone()
    }
}

pub struct Server {
    listener: TcpListener,
    shared: Arc<Shared>,
    sched_rx: Receiver<SchedRequest>,
}

impl Server {
    pub fn bind(addr: &str, opts: ServerOptions) -> Result<Self, RuntimeError> {
        validate_config(&opts.config).map_err(|e| RuntimeError::Config(e.to_string()))?;
        let server_kind = opts
            .config
            .server()
            .map(|d| d.kind.clone())
            .ok_or_else(|| RuntimeError::Config("no server device".into()))?;
        let listener = TcpListener::bind(addr)?;
        listener.set_nonblocking(true)?;
        let (sched_tx, sched_rx) = unbounded();
        let workers = opts.config.worker_count.max(1);
        Ok(Self {
            listener,
            sched_rx,
            shared: Arc::new(Shared {
                server_kind,
                start: Instant::now(),
                queue: Mutex::new(Queue::default()),
                queue_cv: Condvar::new(),
                sessions: Mutex::new(BTreeMap::new()),
                scheme: Mutex::new(Scheme::default()),
                report: Mutex::new(ServerReport::default()),
                seen: Mutex::new(HashSet::new()),
                idle_workers: AtomicUsize::new(workers),
                stop: AtomicBool::new(false),
                sched_tx,
                switched: AtomicBool::new(false),
                opts,
            }),
        })
    }

    pub fn handle(&self) -> Result<ServerHandle, RuntimeError> {
        Ok(ServerHandle {
            shared: Arc::clone(&self.shared),
            addr: self.listener.local_addr()?,
        })
    }

    /// Serves until stopped through a handle or until the configured number
    /// of sessions has ended.
    pub fn run(self) -> Result<ServerReport, RuntimeError> {
        let shared = self.shared;
        let workers = shared.opts.config.worker_count.max(1);
        let (batch_tx, batch_rx) = unbounded::<Batch>();
        let mut threads: Vec<JoinHandle<()>> = Vec::new();
        {
            let s = Arc::clone(&shared);
            threads.push(thread::spawn(move || dispatcher(&s, batch_tx)));
        }
        for _ in 0..workers {
            let s = Arc::clone(&shared);
            let rx = batch_rx.clone();
            threads.push(thread::spawn(move || worker(&s, rx)));
        }
        let scheduler_thread = {
            let s = Arc::clone(&shared);
            let rx = self.sched_rx;
            thread::spawn(move || scheduler(&s, rx))
        };

        let mut handlers = Vec::new();
        while !shared.stop.load(Ordering::SeqCst) {
            match self.listener.accept() {
                Ok((stream, peer)) => {
                    let s = Arc::clone(&shared);
                    handlers.push(thread::spawn(move || {
                        if let Err(e) = handle_connection(&s, stream, peer) {
                            s.error(format!("connection {peer}: {e}"));
                        }
                    }));
                }
                Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                    thread::sleep(Duration::from_millis(5));
                }
                Err(e) => shared.error(format!("accept: {e}")),
            }
        }

        {
            let mut q = lock(&shared.queue);
            q.closed = true;
        }
        shared.queue_cv.notify_all();
        for t in threads {
            let _ = t.join();
        }
        // the scheduler exits once every sender is gone or the stop flag is seen
        let _ = scheduler_thread.join();
        for (_, s) in lock(&shared.sessions).iter() {
            let _ = lock(&s.writer).get_ref().shutdown(Shutdown::Both);
        }
        for h in handlers {
            let _ = h.join();
        }
        let report = lock(&shared.report).clone();
        Ok(report)
    }
}

fn handle_connection(shared: &Arc<Shared>, stream: TcpStream, peer: SocketAddr) -> Result<(), RuntimeError> {
    stream.set_nonblocking(false)?;
    stream.set_nodelay(true)?;
    let writer: Writer = Arc::new(Mutex::new(BufWriter::new(stream.try_clone()?)));
    let mut reader = BufReader::new(stream);
    let mut device: Option<String> = None;
    let result = loop {
        let msg = match read_message(&mut reader) {
            Ok(Some(m)) => m,
            Ok(None) => break Ok(()),
            Err(e) => break Err(RuntimeError::Protocol(e)),
        };
        match msg.msg_type {
            MsgType::Scheduling => match SchedulingPayload::decode(&msg.payload) {
                Ok(SchedulingPayload::Register(reg)) => {
                    let ack = register(shared, &writer, &reg);
                    let accepted = ack.accepted;
                    shared.send(&writer, &SchedulingPayload::RegisterAck(ack).to_message())?;
                    if !accepted {
                        break Ok(());
                    }
                    device = Some(reg.device.device_id.clone());
                    let _ = shared.sched_tx.send(SchedRequest::Membership);
                }
                Ok(other) => log::debug!("{peer}: ignoring scheduling frame {:?}", other.subtype()),
                Err(e) => break Err(e.into()),
            },
            MsgType::Task => {
                let Some(dev) = device.clone() else {
                    break Err(RuntimeError::Session("task before registration".into()));
                };
                let block = match TaskBlock::decode(&msg.payload) {
                    Ok(b) if b.meta.id == msg.task_id => b,
                    Ok(b) => {
                        break Err(RuntimeError::Session(format!(
                            "header id {} does not match task id {}",
                            msg.task_id, b.meta.id
                        )))
                    }
                    Err(e) => break Err(e.into()),
                };
                accept_task(shared, &writer, dev, block)?;
            }
            MsgType::Result => break Err(RuntimeError::Session("device sent a result frame".into())),
        }
    };
    if let Some(dev) = device {
        lock(&shared.sessions).remove(&dev);
        let ended = {
            let mut r = lock(&shared.report);
            r.sessions += 1;
            r.sessions
        };
        // departures do not trigger a reschedule; the next registration or
        // network change will
        if shared.opts.sessions.is_some_and(|n| ended >= n) {
            shared.stop.store(true, Ordering::SeqCst);
            shared.queue_cv.notify_all();
        }
    }
    result
}

fn register(shared: &Shared, writer: &Writer, reg: &Registration) -> RegisterAck {
    let id = reg.device.device_id.clone();
    let config = &shared.opts.config;
    let reason = match config.device(&id) {
        None => Some("device not in the server configuration".to_string()),
        Some(d) if d.role != Role::Client => Some("device is not a client".to_string()),
        Some(d) if d.kind != reg.device.kind => Some(format!("kind {} does not match configured {}", reg.device.kind, d.kind)),
        Some(_) if config.model_of(&id).is_none_or(|m| m.model_id != reg.model_id) => {
            Some(format!("model {} is not the one configured for {id}", reg.model_id))
        }
        Some(_) if lock(&shared.sessions).contains_key(&id) => Some("device already registered".to_string()),
        Some(_) => None,
    };
    if reason.is_none() {
        lock(&shared.sessions).insert(
            id.clone(),
            Session {
                writer: Arc::clone(writer),
            },
        );
    }
    RegisterAck {
        device_id: id,
        accepted: reason.is_none(),
        reason,
    }
}

fn task_range(shared: &Shared, device: &str, strategy: Strategy) -> Result<(String, LayerRange), RuntimeError> {
    let model = shared
        .opts
        .config
        .model_of(device)
        .ok_or_else(|| RuntimeError::Session(format!("no model for {device}")))?;
    if !strategy.is_valid_for(model) {
        return Err(RuntimeError::Session(format!("strategy {strategy} invalid for {}", model.model_id)));
    }
    let n = model.n_layers;
    let range = match strategy {
        Strategy::Dp => LayerRange::new(0, n),
        Strategy::Pp(s) => LayerRange::new(s, n),
    };
    Ok((model.model_id.clone(), range))
}

fn accept_task(shared: &Arc<Shared>, writer: &Writer, device: String, block: TaskBlock) -> Result<(), RuntimeError> {
    if !lock(&shared.seen).insert((device.clone(), block.meta.id)) {
        lock(&shared.report).duplicate_ids += 1;
        return Err(RuntimeError::Session(format!("duplicate task id {}", block.meta.id)));
    }
    lock(&shared.report).tasks_received += 1;
    let (model, range) = task_range(shared, &device, block.meta.strategy)?;
    if range.is_empty() {
        // device-only: nothing left to run here
        reply(shared, writer, &device, &block, &range, 0);
        return Ok(());
    }
    let mut q = lock(&shared.queue);
    q.queues.entry(BatchKey { model, range }).or_default().push_back(Pending {
        device,
        block,
        arrived: Instant::now(),
    });
    drop(q);
    shared.queue_cv.notify_all();
    Ok(())
}

fn reply(shared: &Shared, writer: &Writer, device: &str, block: &TaskBlock, range: &LayerRange, batch: usize) {
    let mut meta = block.meta.clone();
    meta.task_type = format!("result:{}-{}:b{batch}", range.start, range.end);
    let volume = shared
        .opts
        .config
        .model_of(device)
        .map_or(1.0, |m| m.result_volume());
    let result = TaskBlock {
        meta,
        data: TaskData::synthetic(volume as usize, 4, block.meta.id).encode(),
    };
    let msg = Message::new(MsgType::Result, block.meta.id, result.encode());
    let sent = shared.send(writer, &msg);
    let total = {
        let mut r = lock(&shared.report);
        match sent {
            Ok(()) => r.results_sent += 1,
            Err(_) => r.undelivered += 1,
        }
        r.results_sent
    };
    if let Some(sw) = &shared.opts.switch {
        if total >= sw.after_results && !shared.switched.swap(true, Ordering::SeqCst) {
            let _ = shared.sched_tx.send(SchedRequest::Force(sw.scheme.clone()));
        }
    }
}

fn dispatcher(shared: &Shared, out: Sender<Batch>) {
    let policy = shared.opts.config.batch_policy;
    let window = Duration::from_secs_f64(policy.window_ms * shared.opts.time_scale / 1000.0);
    let cap = policy.max_batch.max(1);
    let mut q = lock(&shared.queue);
    loop {
        let now = Instant::now();
        let mut next_deadline: Option<Instant> = None;
        let mut ready = Vec::new();
        let closed = q.closed;
        for (key, items) in q.queues.iter_mut() {
            while items.len() >= cap {
                ready.push((key.clone(), items.drain(..cap).collect::<Vec<_>>(), FlushCause::Cap));
            }
            if let Some(first) = items.front() {
                let due = first.arrived + window;
                if due <= now || closed {
                    let cause = if closed && due > now { FlushCause::Shutdown } else { FlushCause::Window };
                    ready.push((key.clone(), items.drain(..).collect(), cause));
                } else {
                    next_deadline = Some(next_deadline.map_or(due, |d: Instant| d.min(due)));
                }
            }
        }
        q.queues.retain(|_, v| !v.is_empty());
        if !ready.is_empty() {
            let at = shared.now_ms();
            let mut report = lock(&shared.report);
            for (key, items, cause) in ready {
                report.flushes.push(FlushRecord {
                    at_ms: at,
                    model: key.model.clone(),
                    range: (key.range.start, key.range.end),
                    size: items.len(),
                    cause,
                    oldest_ms: items[0].arrived.duration_since(shared.start).as_secs_f64() * 1000.0,
                });
                let _ = out.send(Batch { key, items });
            }
            continue;
        }
        if q.closed {
            return;
        }
        q = match next_deadline {
            Some(d) => shared.queue_cv.wait_timeout(q, d.saturating_duration_since(now)).map(|(g, _)| g),
            None => shared.queue_cv.wait_timeout(q, Duration::from_millis(50)).map(|(g, _)| g),
        }
        .unwrap_or_else(|p| p.into_inner().0);
        if shared.stop.load(Ordering::SeqCst) {
            q.closed = true;
        }
    }
}

fn worker(shared: &Shared, rx: Receiver<Batch>) {
    while let Ok(batch) = rx.recv() {
        shared.idle_workers.fetch_sub(1, Ordering::SeqCst);
        let b = batch.items.len();
        match shared
            .opts
            .lut
            .lookup(&shared.server_kind, &batch.key.model, batch.key.range, b as u32)
        {
            Ok(ms) => sleep_ms(ms * shared.opts.time_scale),
            Err(e) => shared.error(format!("batch {:?}: {e}", batch.key)),
        }
        for p in &batch.items {
            let writer = lock(&shared.sessions).get(&p.device).map(|s| Arc::clone(&s.writer));
            match writer {
                Some(w) => reply(shared, &w, &p.device, &p.block, &batch.key.range, b),
                None => lock(&shared.report).undelivered += 1,
            }
        }
        shared.idle_workers.fetch_add(1, Ordering::SeqCst);
    }
}

/// Registered clients of the configuration, with the network in force.
fn active_config(shared: &Shared, network: &NetworkState) -> (SystemConfig, Vec<String>) {
    let sessions = lock(&shared.sessions);
    let registered: Vec<String> = sessions.keys().cloned().collect();
    let mut config = shared.opts.config.clone();
    config
        .devices
        .retain(|d| d.role != Role::Client || sessions.contains_key(&d.device_id));
    config.models.retain(|d, _| sessions.contains_key(d));
    config.network = network.clone();
    (config, registered)
}

fn broadcast(shared: &Shared, scheme: Scheme, only_changed: bool, informed: &mut HashSet<String>) {
    let previous = std::mem::replace(&mut *lock(&shared.scheme), scheme.clone());
    let sessions: Vec<(String, Writer)> = lock(&shared.sessions)
        .iter()
        .map(|(id, s)| (id.clone(), Arc::clone(&s.writer)))
        .collect();
    let msg = SchedulingPayload::SchemeUpdate(scheme.clone()).to_message();
    let mut recipients = Vec::new();
    for (id, w) in sessions {
        let changed = previous.get(&id) != scheme.get(&id) || !informed.contains(&id);
        if scheme.get(&id).is_none() || (only_changed && !changed) {
            continue;
        }
        match shared.send(&w, &msg) {
            Ok(()) => {
                informed.insert(id.clone());
                recipients.push(id);
            }
            Err(e) => shared.error(format!("scheme update to {id}: {e}")),
        }
    }
    if !recipients.is_empty() {
        let at_ms = shared.now_ms();
        lock(&shared.report).broadcasts.push(SchemeBroadcast {
            at_ms,
            scheme,
            recipients,
        });
    }
}

fn scheduler(shared: &Shared, rx: Receiver<SchedRequest>) {
    let mut network = shared.opts.config.network.clone();
    let mut state: Option<SystemState> = None;
    let mut informed: HashSet<String> = HashSet::new();
    loop {
        let req = match rx.recv_timeout(Duration::from_millis(20)) {
            Ok(r) => r,
            Err(RecvTimeoutError::Timeout) if shared.stop.load(Ordering::SeqCst) => return,
            Err(RecvTimeoutError::Timeout) => continue,
            Err(RecvTimeoutError::Disconnected) => return,
        };
        if shared.stop.load(Ordering::SeqCst) {
            return;
        }
        match req {
            SchedRequest::Force(scheme) => {
                let registered: Vec<String> = lock(&shared.sessions).keys().cloned().collect();
                let mut next = lock(&shared.scheme).clone();
                for (d, s) in scheme.assignment {
                    if registered.contains(&d) {
                        next.assignment.insert(d, s);
                    }
                }
                broadcast(shared, next, true, &mut informed);
                continue;
            }
            SchedRequest::Network(n) => network = n,
            SchedRequest::Membership => {}
        }
        let (config, registered) = active_config(shared, &network);
        if registered.len() < shared.opts.wait_for.max(1) {
            continue;
        }
        let new_state = SystemState::of(&config);
        let uninformed = registered.iter().any(|d| !informed.contains(d));
        let due = match &state {
            None => true,
            Some(old) => uninformed || should_reschedule(old, &new_state, &shared.opts.sched.thresholds),
        };
        if !due {
            continue;
        }
        // run on spare capacity only
        while shared.idle_workers.load(Ordering::SeqCst) == 0 && !shared.stop.load(Ordering::SeqCst) {
            thread::sleep(Duration::from_micros(200));
        }
        let lut = Arc::clone(&shared.opts.lut);
        let scheme = shared
            .opts
            .evaluator
            .build(&config, &lut)
            .and_then(|mut eval| {
                let s = optimize(&config, &lut, &shared.opts.sched, eval.as_mut())?;
                assign_idle(&s, &config, &lut, eval.as_mut())
            });
        match scheme {
            Ok(s) => {
                state = Some(new_state);
                broadcast(shared, s, true, &mut informed);
            }
            Err(e) => shared.error(format!("optimize: {e}")),
        }
    }
}

/// Binds and serves on a background thread.
pub fn spawn_server(addr: &str, opts: ServerOptions) -> Result<(ServerHandle, JoinHandle<Result<ServerReport, RuntimeError>>), RuntimeError> {
    let server = Server::bind(addr, opts)?;
    let handle = server.handle()?;
    Ok((handle, thread::spawn(move || server.run())))
}

/// Sends a frame on a raw stream; for tests that speak the protocol by hand.
pub fn send_raw(stream: &mut TcpStream, msg: &Message) -> Result<(), ProtocolError> {
    write_message(stream, msg)?;
    stream.flush()?;
    Ok(())
}
