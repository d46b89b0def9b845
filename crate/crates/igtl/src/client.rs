//! Reconnecting tracker client. One background thread connects, decodes and
//! hands TRANSFORM/STATUS messages to the consumer callback in arrival order;
//! unknown message types are skipped. Connection loss and protocol errors are
//! recorded and followed by a reconnect with exponential backoff.

use std::io::{self, Read};
use std::net::{SocketAddr, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use crate::message::{decode_prefix, Message, MessageHeader, ProtocolError, HEADER_SIZE};

#[derive(Debug, Clone)]
pub struct ClientConfig {
    pub initial_backoff: Duration,
    pub max_backoff: Duration,
    pub connect_timeout: Duration,
    /// How often a blocked read wakes up to check for shutdown.
    pub poll_interval: Duration,
}

impl Default for ClientConfig {
    fn default() -> Self {
        Self {
            initial_backoff: Duration::from_millis(100),
            max_backoff: Duration::from_secs(5),
            connect_timeout: Duration::from_secs(2),
            poll_interval: Duration::from_millis(50),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ClientStatus {
    pub connected: bool,
    pub connections: u64,
    pub received: u64,
    pub last_error: Option<String>,
}

struct Shared {
    stop: AtomicBool,
    status: Mutex<ClientStatus>,
}

pub struct TrackerClient {
    shared: Arc<Shared>,
    handle: Option<JoinHandle<()>>,
}

impl TrackerClient {
    pub fn status(&self) -> ClientStatus {
        self.shared.status.lock().unwrap().clone()
    }

    pub fn stop(mut self) {
        self.halt();
    }

    fn halt(&mut self) {
        self.shared.stop.store(true, Ordering::Relaxed);
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

impl Drop for TrackerClient {
    fn drop(&mut self) {
        self.halt();
    }
}

pub fn connect_tracker_client(
    addr: &str,
    on_message: impl FnMut(Message) + Send + 'static,
) -> io::Result<TrackerClient> {
    connect_with(addr, ClientConfig::default(), on_message)
}

pub fn connect_with(
    addr: &str,
    cfg: ClientConfig,
    mut on_message: impl FnMut(Message) + Send + 'static,
) -> io::Result<TrackerClient> {
    let addr = addr.to_string();
    let shared = Arc::new(Shared { stop: AtomicBool::new(false), status: Mutex::new(ClientStatus::default()) });
    let s = Arc::clone(&shared);
    let handle = thread::Builder::new()
        .name("igtl-tracker-client".into())
        .spawn(move || run(&addr, &cfg, &s, &mut on_message))?;
    Ok(TrackerClient { shared, handle: Some(handle) })
}

fn record_error(shared: &Shared, e: impl ToString) {
    let mut st = shared.status.lock().unwrap();
    st.connected = false;
    st.last_error = Some(e.to_string());
}

fn resolve(addr: &str) -> io::Result<SocketAddr> {
    addr.to_socket_addrs()?
        .next()
        .ok_or_else(|| io::Error::new(io::ErrorKind::NotFound, format!("cannot resolve {addr}")))
}

fn run(addr: &str, cfg: &ClientConfig, shared: &Shared, on_message: &mut dyn FnMut(Message)) {
    let mut backoff = cfg.initial_backoff;
    while !shared.stop.load(Ordering::Relaxed) {
        match resolve(addr).and_then(|a| TcpStream::connect_timeout(&a, cfg.connect_timeout)) {
            Ok(stream) => {
                {
                    let mut st = shared.status.lock().unwrap();
                    st.connected = true;
                    st.connections += 1;
                }
                backoff = cfg.initial_backoff;
                if let Err(e) = pump(stream, cfg, shared, on_message) {
                    record_error(shared, e);
                } else {
                    shared.status.lock().unwrap().connected = false;
                }
            }
            Err(e) => record_error(shared, e),
        }
        // sleep in small slices so stop() is honoured promptly
        let until = Instant::now() + backoff;
        while Instant::now() < until && !shared.stop.load(Ordering::Relaxed) {
            thread::sleep(cfg.poll_interval.min(until.saturating_duration_since(Instant::now())));
        }
        backoff = (backoff * 2).min(cfg.max_backoff);
    }
}

/// Reads frames until the peer closes, an error occurs, or stop is requested.
fn pump(
    mut stream: TcpStream,
    cfg: &ClientConfig,
    shared: &Shared,
    on_message: &mut dyn FnMut(Message),
) -> Result<(), ProtocolError> {
    stream.set_read_timeout(Some(cfg.poll_interval))?;
    let mut buf: Vec<u8> = Vec::with_capacity(4096);
    let mut chunk = [0u8; 4096];
    loop {
        if shared.stop.load(Ordering::Relaxed) {
            return Ok(());
        }
        match stream.read(&mut chunk) {
            Ok(0) => return Err(ProtocolError::Io("connection closed by server".into())),
            Ok(n) => buf.extend_from_slice(&chunk[..n]),
            Err(e) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => continue,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => continue,
            Err(e) => return Err(e.into()),
        }
        let mut used = 0;
        while buf.len() - used >= HEADER_SIZE {
            // validate the header first so a huge declared body fails fast
            let header = MessageHeader::decode(&buf[used..])?;
            if buf.len() - used < HEADER_SIZE + header.body_size as usize {
                break;
            }
            let (msg, n) = decode_prefix(&buf[used..])?;
            used += n;
            if matches!(msg, Message::Unknown(_)) {
                continue;
            }
            shared.status.lock().unwrap().received += 1;
            on_message(msg);
        }
        buf.drain(..used);
    }
}
