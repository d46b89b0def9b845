//! TCP tracker server. Every connected client gets its own bounded queue and
//! writer thread; when a client falls behind, its oldest queued messages are
//! dropped so that it always catches up to the latest pose.

use std::collections::VecDeque;
use std::io::{self, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use crate::message::{encode_transform, Matrix34, ProtocolError};

pub const DEFAULT_PORT: u16 = 18944;
pub const DEFAULT_QUEUE_CAPACITY: usize = 64;
const ACCEPT_POLL: Duration = Duration::from_millis(5);

/// Bounded FIFO that discards its oldest entry on overflow.
#[derive(Debug)]
pub struct DropOldestQueue {
    inner: Mutex<QueueState>,
    ready: Condvar,
    capacity: usize,
    dropped: AtomicU64,
}

#[derive(Debug, Default)]
struct QueueState {
    items: VecDeque<Arc<[u8]>>,
    closed: bool,
}

impl DropOldestQueue {
    pub fn new(capacity: usize) -> Self {
        Self {
            inner: Mutex::new(QueueState::default()),
            ready: Condvar::new(),
            capacity: capacity.max(1),
            dropped: AtomicU64::new(0),
        }
    }

    pub fn push(&self, item: Arc<[u8]>) {
        let mut st = self.inner.lock().unwrap();
        if st.closed {
            return;
        }
        if st.items.len() == self.capacity {
            st.items.pop_front();
            self.dropped.fetch_add(1, Ordering::Relaxed);
        }
        st.items.push_back(item);
        self.ready.notify_one();
    }

    /// Next item, blocking until one arrives; `None` once closed and drained.
    pub fn pop(&self) -> Option<Arc<[u8]>> {
        let mut st = self.inner.lock().unwrap();
        loop {
            if let Some(item) = st.items.pop_front() {
                return Some(item);
            }
            if st.closed {
                return None;
            }
            st = self.ready.wait(st).unwrap();
        }
    }

    pub fn close(&self) {
        self.inner.lock().unwrap().closed = true;
        self.ready.notify_all();
    }

    pub fn is_closed(&self) -> bool {
        self.inner.lock().unwrap().closed
    }

    pub fn len(&self) -> usize {
        self.inner.lock().unwrap().items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dropped(&self) -> u64 {
        self.dropped.load(Ordering::Relaxed)
    }
}

struct Shared {
    clients: Mutex<Vec<Arc<DropOldestQueue>>>,
    stop: AtomicBool,
    capacity: usize,
    sent: AtomicU64,
}

pub struct TrackerServer {
    addr: SocketAddr,
    shared: Arc<Shared>,
    accept: Option<JoinHandle<()>>,
}

impl TrackerServer {
    /// Binds and starts accepting clients in the background.
    pub fn bind(addr: impl ToSocketAddrs, queue_capacity: usize) -> io::Result<Self> {
        let listener = TcpListener::bind(addr)?;
        listener.set_nonblocking(true)?;
        let addr = listener.local_addr()?;
        let shared = Arc::new(Shared {
            clients: Mutex::new(Vec::new()),
            stop: AtomicBool::new(false),
            capacity: queue_capacity,
            sent: AtomicU64::new(0),
        });
        let s = Arc::clone(&shared);
        let accept = thread::Builder::new().name("igtl-accept".into()).spawn(move || accept_loop(listener, s))?;
        Ok(Self { addr, shared, accept: Some(accept) })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn client_count(&self) -> usize {
        let mut clients = self.shared.clients.lock().unwrap();
        clients.retain(|q| !q.is_closed());
        clients.len()
    }

    /// Messages queued to clients so far (counted once per client).
    pub fn sent(&self) -> u64 {
        self.shared.sent.load(Ordering::Relaxed)
    }

    /// Queues an already-encoded message for every connected client.
    pub fn broadcast(&self, frame: &[u8]) {
        let frame: Arc<[u8]> = Arc::from(frame);
        let mut clients = self.shared.clients.lock().unwrap();
        clients.retain(|q| !q.is_closed());
        for q in clients.iter() {
            q.push(Arc::clone(&frame));
            self.shared.sent.fetch_add(1, Ordering::Relaxed);
        }
    }

    pub fn send_transform(&self, device: &str, timestamp: f64, matrix: &Matrix34) -> Result<(), ProtocolError> {
        self.broadcast(&encode_transform(device, timestamp, matrix)?);
        Ok(())
    }

    /// Broadcasts `frames` paced at `rate_hz`, blocking until done or stopped.
    pub fn stream(&self, frames: impl IntoIterator<Item = Vec<u8>>, rate_hz: f64) {
        let period = Duration::from_secs_f64(1.0 / rate_hz.max(1e-3));
        let start = Instant::now();
        for (n, f) in frames.into_iter().enumerate() {
            if self.shared.stop.load(Ordering::Relaxed) {
                break;
            }
            let due = start + period * n as u32;
            if let Some(wait) = due.checked_duration_since(Instant::now()) {
                thread::sleep(wait);
            }
            self.broadcast(&f);
        }
    }

    pub fn shutdown(mut self) {
        self.stop();
    }

    fn stop(&mut self) {
        self.shared.stop.store(true, Ordering::Relaxed);
        for q in self.shared.clients.lock().unwrap().drain(..) {
            q.close();
        }
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }
}

impl Drop for TrackerServer {
    fn drop(&mut self) {
        self.stop();
    }
}

fn accept_loop(listener: TcpListener, shared: Arc<Shared>) {
    while !shared.stop.load(Ordering::Relaxed) {
        match listener.accept() {
            Ok((stream, _)) => {
                let q = Arc::new(DropOldestQueue::new(shared.capacity));
                shared.clients.lock().unwrap().push(Arc::clone(&q));
                let spawned = thread::Builder::new().name("igtl-client".into()).spawn(move || writer(stream, q));
                if spawned.is_err() {
                    continue;
                }
            }
            Err(e) if e.kind() == io::ErrorKind::WouldBlock => thread::sleep(ACCEPT_POLL),
            Err(_) => thread::sleep(ACCEPT_POLL),
        }
    }
}

/// Drains one client's queue onto its socket; any write error ends only this client.
fn writer(mut stream: TcpStream, q: Arc<DropOldestQueue>) {
    let _ = stream.set_nonblocking(false);
    let _ = stream.set_nodelay(true);
    while let Some(frame) = q.pop() {
        if stream.write_all(&frame).is_err() {
            break;
        }
    }
    q.close();
    let _ = stream.shutdown(std::net::Shutdown::Both);
}
