//! Networked middleware: the wire protocol, the edge server engine and the
//! device client. Compute is emulated with timed waits taken from the LUT.

pub mod device;
pub mod protocol;
pub mod server;

use std::time::{Duration, Instant};

use thiserror::Error;

pub use device::{run_device, DeviceOptions, DeviceRecord, SessionStats};
pub use protocol::{
    decode_message, encode_message, read_message, write_message, Message, MessageHeader, MsgType, ProtocolError,
    SchedulingPayload, TaskBlock, TaskData, TaskMeta,
};
pub use server::{spawn_server, PlannedSwitch, Server, ServerHandle, ServerOptions, ServerReport};

#[derive(Debug, Error)]
pub enum RuntimeError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error("session error: {0}")]
    Session(String),
    #[error("could not reach {addr} after {attempts} attempts: {last}")]
    Connect { addr: String, attempts: u32, last: String },
    #[error("registration rejected: {0}")]
    Rejected(String),
    #[error("result for task {0} that is not outstanding")]
    UnexpectedResult(u64),
    #[error("connection lost with {outstanding} task(s) outstanding")]
    ConnectionLost { outstanding: usize },
}

/// Waits out `ms` milliseconds. Sleeps for the bulk and yields through the last
/// stretch, since thread sleeps overshoot by tens of microseconds.
pub fn sleep_ms(ms: f64) {
    if !(ms > 0.0) {
        return;
    }
    let deadline = Instant::now() + Duration::from_secs_f64(ms / 1000.0);
    const SPIN: Duration = Duration::from_micros(200);
    loop {
        let now = Instant::now();
        if now >= deadline {
            return;
        }
        let left = deadline - now;
        if left > SPIN {
            std::thread::sleep(left - SPIN);
        } else {
            std::thread::yield_now();
        }
    }
}
