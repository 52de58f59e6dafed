//! Device client: registers, waits for a scheme, then streams tasks.
//!
//! One writer (the calling thread) and one reader thread. The writer keeps
//! at most `window` tasks outstanding at the server. Each task carries the
//! strategy it was issued under; a scheme update only affects tasks issued
//! after it arrives.

use std::collections::BTreeMap;
use std::io::{BufReader, BufWriter, Write};
use std::net::{Shutdown, TcpStream};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use crossbeam_channel::{unbounded, Receiver};
use serde::{Deserialize, Serialize};

use super::protocol::{read_message, write_message, Message, MsgType, Registration, SchedulingPayload, TaskBlock, TaskData, TaskMeta};
use super::{sleep_ms, RuntimeError};
use crate::profiles::{comm_volume, LayerRange, Lut};
use crate::types::{DeviceProfile, ModelProfile, NetworkState, Strategy};

#[derive(Debug, Clone)]
pub struct DeviceOptions {
    pub server_addr: String,
    pub device: DeviceProfile,
    pub model: ModelProfile,
    pub lut: Arc<Lut>,
    /// Server hardware class, for the DP dispatch estimate. Without it every
    /// DP task goes to the server.
    pub server_kind: Option<String>,
    /// Link emulation: uplink payloads are held back for their wire time.
    pub network: Option<NetworkState>,
    pub tasks: u64,
    pub window: usize,
    pub connect_attempts: u32,
    pub retry_delay_ms: u64,
    pub time_scale: f64,
    pub feature_dim: u32,
}

impl DeviceOptions {
    pub fn new(server_addr: impl Into<String>, device: DeviceProfile, model: ModelProfile, lut: Arc<Lut>) -> Self {
        Self {
            server_addr: server_addr.into(),
            device,
            model,
            lut,
            server_kind: None,
            network: None,
            tasks: 100,
            window: 32,
            connect_attempts: 3,
            retry_delay_ms: 200,
            time_scale: 1.0,
            feature_dim: 8,
        }
    }
}

/// One completed task as seen by the device.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceRecord {
    pub task_id: u64,
    pub issue_ms: f64,
    pub complete_ms: f64,
    pub latency_ms: f64,
    /// Tag of the scheme in force at issue.
    pub scheme: String,
    pub strategy: Strategy,
    /// `local` or `server`.
    pub route: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SessionStats {
    pub device_id: String,
    pub records: Vec<DeviceRecord>,
    /// `(ms, strategy)` each time the device's strategy was set or changed.
    pub strategy_log: Vec<(f64, Strategy)>,
    pub elapsed_ms: f64,
}

impl SessionStats {
    pub fn results_from_server(&self) -> usize {
        self.records.iter().filter(|r| r.route == "server").count()
    }

    /// Every id in `1..=n` appears exactly once.
    pub fn ids_bijective(&self, n: u64) -> bool {
        let mut ids: Vec<u64> = self.records.iter().map(|r| r.task_id).collect();
        ids.sort_unstable();
        ids.len() as u64 == n && ids.iter().copied().eq(1..=n)
    }

    pub fn mean_latency_ms(&self) -> Option<f64> {
        (!self.records.is_empty())
            .then(|| self.records.iter().map(|r| r.latency_ms).sum::<f64>() / self.records.len() as f64)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), csv::Error> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["task_id", "issue_ms", "complete_ms", "latency_ms", "scheme", "strategy", "route"])?;
        for r in &self.records {
            w.write_record([
                r.task_id.to_string(),
                format!("{:.3}", r.issue_ms),
                format!("{:.3}", r.complete_ms),
                format!("{:.3}", r.latency_ms),
                r.scheme.clone(),
                r.strategy.to_string(),
                r.route.clone(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

enum Event {
    Msg(Message),
    Closed,
    Failed(String),
}

struct Outstanding {
    issue_ms: f64,
    scheme: String,
    strategy: Strategy,
}

fn connect(opts: &DeviceOptions) -> Result<TcpStream, RuntimeError> {
    let attempts = opts.connect_attempts.max(1);
    let mut last = String::new();
    for i in 0..attempts {
        match TcpStream::connect(&opts.server_addr) {
            Ok(s) => return Ok(s),
            Err(e) => {
                log::info!("connect to {} failed ({}/{attempts}): {e}", opts.server_addr, i + 1);
                last = e.to_string();
            }
        }
        if i + 1 < attempts {
            thread::sleep(Duration::from_millis(opts.retry_delay_ms));
        }
    }
    Err(RuntimeError::Connect {
        addr: opts.server_addr.clone(),
        attempts,
        last,
    })
}

struct Client<'a> {
    opts: &'a DeviceOptions,
    start: Instant,
    events: Receiver<Event>,
    writer: BufWriter<TcpStream>,
    strategy: Option<Strategy>,
    scheme_tag: String,
    paused: bool,
    outstanding: BTreeMap<u64, Outstanding>,
    stats: SessionStats,
}

impl Client<'_> {
    fn now_ms(&self) -> f64 {
        self.start.elapsed().as_secs_f64() * 1000.0
    }

    fn handle(&mut self, ev: Event) -> Result<(), RuntimeError> {
        let msg = match ev {
            Event::Msg(m) => m,
            Event::Closed => {
                return Err(RuntimeError::ConnectionLost {
                    outstanding: self.outstanding.len(),
                })
            }
            Event::Failed(e) => return Err(RuntimeError::Session(e)),
        };
        match msg.msg_type {
            MsgType::Scheduling => match SchedulingPayload::decode(&msg.payload)? {
                SchedulingPayload::SchemeUpdate(scheme) => {
                    if let Some(s) = scheme.get(&self.opts.device.device_id) {
                        if !s.is_valid_for(&self.opts.model) {
                            return Err(RuntimeError::Session(format!("scheme assigns invalid strategy {s}")));
                        }
                        if self.strategy != Some(s) {
                            let at = self.now_ms();
                            self.stats.strategy_log.push((at, s));
                        }
                        self.strategy = Some(s);
                        self.scheme_tag = scheme.tag();
                    }
                }
                SchedulingPayload::Pause => self.paused = true,
                SchedulingPayload::Start => self.paused = false,
                other => log::debug!("ignoring scheduling frame {:?}", other.subtype()),
            },
            MsgType::Result => {
                let block = TaskBlock::decode(&msg.payload)?;
                if block.meta.id != msg.task_id {
                    return Err(RuntimeError::Session(format!(
                        "result header id {} carries task {}",
                        msg.task_id, block.meta.id
                    )));
                }
                let out = self
                    .outstanding
                    .remove(&msg.task_id)
                    .ok_or(RuntimeError::UnexpectedResult(msg.task_id))?;
                if block.meta.strategy != out.strategy || block.meta.scheme != out.scheme {
                    return Err(RuntimeError::Session(format!(
                        "task {} issued under {} came back under {}",
                        msg.task_id, out.strategy, block.meta.strategy
                    )));
                }
                let complete_ms = self.now_ms();
                self.stats.records.push(DeviceRecord {
                    task_id: msg.task_id,
                    issue_ms: out.issue_ms,
                    complete_ms,
                    latency_ms: complete_ms - out.issue_ms,
                    scheme: out.scheme,
                    strategy: out.strategy,
                    route: "server".into(),
                });
            }
            MsgType::Task => return Err(RuntimeError::Session("server sent a task frame".into())),
        }
        Ok(())
    }

    fn next_event(&mut self) -> Result<(), RuntimeError> {
        let ev = self.events.recv().unwrap_or(Event::Closed);
        self.handle(ev)
    }

    fn drain_pending(&mut self) -> Result<(), RuntimeError> {
        while let Ok(ev) = self.events.try_recv() {
            self.handle(ev)?;
        }
        Ok(())
    }

    fn lut_ms(&self, kind: &str, range: LayerRange) -> Option<f64> {
        self.opts.lut.lookup(kind, &self.opts.model.model_id, range, 1).ok()
    }

    fn link_ms(&self, bytes: f64) -> f64 {
        self.opts.network.as_ref().map_or(0.0, |n| n.transfer_ms(bytes))
    }

    /// Local replica versus the server, by projected completion. The server
    /// estimate queues behind the tasks already outstanding there.
    fn dp_goes_local(&self) -> bool {
        let n = self.opts.model.n_layers;
        let full = LayerRange::new(0, n);
        let Some(local) = self.lut_ms(&self.opts.device.kind, full) else {
            return false;
        };
        let Some(server) = self.opts.server_kind.as_deref().and_then(|k| self.lut_ms(k, full)) else {
            return false;
        };
        let per_task = server.max(self.link_ms(self.opts.model.raw_input_volume()));
        let remote = (self.outstanding.len() + 1) as f64 * per_task + self.link_ms(self.opts.model.result_volume());
        local < remote
    }

    fn issue(&mut self, id: u64, strategy: Strategy) -> Result<(), RuntimeError> {
        let scale = self.opts.time_scale;
        let issue_ms = self.now_ms();
        let model = &self.opts.model;
        if strategy.is_dp() && self.dp_goes_local() {
            let ms = self.lut_ms(&self.opts.device.kind, LayerRange::new(0, model.n_layers)).unwrap_or(0.0);
            sleep_ms(ms * scale);
            let complete_ms = self.now_ms();
            self.stats.records.push(DeviceRecord {
                task_id: id,
                issue_ms,
                complete_ms,
                latency_ms: complete_ms - issue_ms,
                scheme: self.scheme_tag.clone(),
                strategy,
                route: "local".into(),
            });
            return Ok(());
        }
        if let Strategy::Pp(s) = strategy {
            let ms = self
                .lut_ms(&self.opts.device.kind, LayerRange::new(0, s))
                .ok_or_else(|| RuntimeError::Config(format!("no LUT entry for the device stage [0, {s})")))?;
            sleep_ms(ms * scale);
        }
        let bytes = comm_volume(model, strategy);
        let data = TaskData::synthetic(bytes as usize, self.opts.feature_dim, id).encode();
        let meta = TaskMeta {
            id,
            device_type: self.opts.device.kind.clone(),
            source: self.writer.get_ref().local_addr().map(|a| a.to_string()).unwrap_or_default(),
            task_type: "infer".into(),
            arrival_ms: issue_ms,
            model: model.model_id.clone(),
            strategy,
            scheme: self.scheme_tag.clone(),
        };
        sleep_ms(self.link_ms(bytes) * scale);
        let msg = Message::new(MsgType::Task, id, TaskBlock { meta, data }.encode());
        write_message(&mut self.writer, &msg)?;
        self.outstanding.insert(
            id,
            Outstanding {
                issue_ms,
                scheme: self.scheme_tag.clone(),
                strategy,
            },
        );
        Ok(())
    }
}

/// Runs one device session against the server at `opts.server_addr`.
pub fn run_device(opts: &DeviceOptions) -> Result<SessionStats, RuntimeError> {
    if opts.tasks == 0 {
        return Ok(SessionStats {
            device_id: opts.device.device_id.clone(),
            ..SessionStats::default()
        });
    }
    let stream = connect(opts)?;
    stream.set_nodelay(true)?;
    let mut writer = BufWriter::new(stream.try_clone()?);
    let mut reader = BufReader::new(stream.try_clone()?);

    let reg = SchedulingPayload::Register(Registration {
        device: opts.device.clone(),
        model_id: opts.model.model_id.clone(),
    });
    write_message(&mut writer, &reg.to_message())?;
    loop {
        let msg = read_message(&mut reader)?.ok_or(RuntimeError::ConnectionLost { outstanding: 0 })?;
        if msg.msg_type != MsgType::Scheduling {
            return Err(RuntimeError::Session("expected a registration ack".into()));
        }
        match SchedulingPayload::decode(&msg.payload)? {
            SchedulingPayload::RegisterAck(ack) if ack.accepted => break,
            SchedulingPayload::RegisterAck(ack) => {
                return Err(RuntimeError::Rejected(ack.reason.unwrap_or_default()));
            }
            other => log::debug!("frame {:?} before ack", other.subtype()),
        }
    }

    let (tx, rx) = unbounded();
    let reader_thread = thread::spawn(move || loop {
        let ev = match read_message(&mut reader) {
            Ok(Some(m)) => Event::Msg(m),
            Ok(None) => Event::Closed,
            Err(e) => Event::Failed(e.to_string()),
        };
        let last = !matches!(ev, Event::Msg(_));
        if tx.send(ev).is_err() || last {
            return;
        }
    });

    let mut client = Client {
        opts,
        start: Instant::now(),
        events: rx,
        writer,
        strategy: None,
        scheme_tag: String::new(),
        paused: false,
        outstanding: BTreeMap::new(),
        stats: SessionStats {
            device_id: opts.device.device_id.clone(),
            ..SessionStats::default()
        },
    };
    let window = opts.window.max(1);
    let result = (|| {
        for id in 1..=opts.tasks {
            client.drain_pending()?;
            while client.strategy.is_none() || client.paused || client.outstanding.len() >= window {
                client.next_event()?;
            }
            let strategy = client.strategy.expect("scheme received");
            client.issue(id, strategy)?;
        }
        while !client.outstanding.is_empty() {
            client.next_event()?;
        }
        Ok(())
    })();
    client.stats.elapsed_ms = client.now_ms();
    let _ = stream.shutdown(Shutdown::Both);
    let _ = reader_thread.join();
    result.map(|()| {
        client.stats.records.sort_by_key(|r| r.task_id);
        client.stats
    })
}
