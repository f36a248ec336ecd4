//! Real-network driver for [`NodeRuntime`].
//!
//! Each node owns a UDP socket and a TCP listener on the same `host:port`.
//! Gossip, probes and votes travel as single datagrams; the join handshake,
//! view installs, catch-up and anything too large for a datagram go over a
//! short-lived TCP connection. Both carry the framed [`Envelope`] encoding.
//!
//! A node runs one event loop thread that advances a logical tick every
//! `tick` of wall-clock time. Socket reader threads only decode and forward.

use std::collections::HashMap;
use std::io::{self, BufReader};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs, UdpSocket};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, Sender};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use crate::codec::{self, Envelope};
use crate::engine::{EngineOptions, NodeRuntime};
use crate::message::{Inbound, MessageKind, Outbound, Target};
use crate::model::{Configuration, Endpoint, Member, NodeId, ViewChangeEvent};

/// Datagrams above this size are sent over TCP instead.
pub const MAX_DATAGRAM: usize = 60 * 1024;

const POLL: Duration = Duration::from_millis(20);

pub type ViewCallback = Box<dyn FnMut(&ViewChangeEvent) + Send>;

fn resolve(ep: &Endpoint) -> io::Result<SocketAddr> {
    (ep.host.as_str(), ep.port).to_socket_addrs()?.next().ok_or_else(|| {
        io::Error::new(
            io::ErrorKind::NotFound,
            format!("no address for {}:{}", ep.host, ep.port),
        )
    })
}

fn uses_stream(kind: MessageKind) -> bool {
    matches!(kind, MessageKind::Join | MessageKind::Sync)
}

#[derive(Debug, Clone)]
pub struct TransportOptions {
    /// Wall-clock length of one logical tick.
    pub tick: Duration,
    pub connect_timeout: Duration,
}

impl Default for TransportOptions {
    fn default() -> Self {
        TransportOptions {
            tick: Duration::from_millis(50),
            connect_timeout: Duration::from_millis(500),
        }
    }
}

/// State shared between a node's loop and its handle.
#[derive(Default)]
struct Shared {
    view: Option<Arc<Configuration>>,
    departed: bool,
    leave: bool,
}

/// A running node. Dropping the handle stops it.
pub struct NodeHandle {
    me: Member,
    shared: Arc<Mutex<Shared>>,
    stop: Arc<AtomicBool>,
    threads: Vec<JoinHandle<()>>,
}

impl NodeHandle {
    /// Starts the first member of a new cluster.
    pub fn bootstrap(
        me: Member,
        config: Arc<Configuration>,
        opts: EngineOptions,
        topts: TransportOptions,
        on_view_change: Option<ViewCallback>,
    ) -> io::Result<Self> {
        let rt = NodeRuntime::bootstrap(me.clone(), config, opts, 0);
        Self::start(me, rt, topts, on_view_change)
    }

    /// Starts a process that joins through `seed`. Returns at once; the
    /// first view containing this process arrives via the callback and
    /// [`NodeHandle::view`].
    pub fn join(
        me: Member,
        seed: Endpoint,
        opts: EngineOptions,
        topts: TransportOptions,
        on_view_change: Option<ViewCallback>,
    ) -> io::Result<Self> {
        let rt = NodeRuntime::joining(me.clone(), seed, opts);
        Self::start(me, rt, topts, on_view_change)
    }

    fn start(me: Member, rt: NodeRuntime, topts: TransportOptions, callback: Option<ViewCallback>) -> io::Result<Self> {
        let addr = resolve(&me.endpoint)?;
        let udp = UdpSocket::bind(addr)?;
        udp.set_read_timeout(Some(POLL))?;
        let tcp = TcpListener::bind(addr)?;
        tcp.set_nonblocking(true)?;

        let (tx, rx) = mpsc::channel();
        let stop = Arc::new(AtomicBool::new(false));
        let shared = Arc::new(Mutex::new(Shared::default()));
        let mut threads = Vec::new();

        let (udp_rx, stop_rx, tx_rx) = (udp.try_clone()?, stop.clone(), tx.clone());
        threads.push(thread::spawn(move || udp_reader(udp_rx, tx_rx, stop_rx)));
        let (stop_tcp, tx_tcp) = (stop.clone(), tx);
        threads.push(thread::spawn(move || tcp_acceptor(tcp, tx_tcp, stop_tcp)));

        let lp = EventLoop {
            rt,
            me: me.clone(),
            udp,
            inbox: rx,
            directory: HashMap::new(),
            shared: shared.clone(),
            stop: stop.clone(),
            callback,
            topts,
        };
        threads.push(thread::spawn(move || lp.run()));
        Ok(NodeHandle {
            me,
            shared,
            stop,
            threads,
        })
    }

    pub fn id(&self) -> NodeId {
        self.me.id
    }

    pub fn member(&self) -> &Member {
        &self.me
    }

    /// The last installed configuration.
    pub fn view(&self) -> Option<Arc<Configuration>> {
        self.shared.lock().expect("node state lock").view.clone()
    }

    /// Metadata of a member of the current view.
    pub fn metadata(&self, id: NodeId) -> Option<std::collections::BTreeMap<String, String>> {
        self.view()?.member(id).map(|m| m.metadata.clone())
    }

    pub fn has_departed(&self) -> bool {
        self.shared.lock().expect("node state lock").departed
    }

    /// Asks the node to leave at its next tick.
    pub fn leave(&self) {
        self.shared.lock().expect("node state lock").leave = true;
    }

    /// Polls until `pred` holds for the current view or `timeout` passes.
    pub fn wait_for(&self, timeout: Duration, pred: impl Fn(&Configuration) -> bool) -> Option<Arc<Configuration>> {
        let deadline = Instant::now() + timeout;
        loop {
            if let Some(v) = self.view().filter(|v| pred(v)) {
                return Some(v);
            }
            if Instant::now() >= deadline {
                return None;
            }
            thread::sleep(POLL);
        }
    }

    pub fn shutdown(mut self) {
        self.stop_threads();
    }

    fn stop_threads(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }
}

impl Drop for NodeHandle {
    fn drop(&mut self) {
        self.stop_threads();
    }
}

fn udp_reader(sock: UdpSocket, tx: Sender<Envelope>, stop: Arc<AtomicBool>) {
    let mut buf = vec![0u8; 64 * 1024];
    while !stop.load(Ordering::Relaxed) {
        match sock.recv_from(&mut buf) {
            Ok((len, _)) => match codec::decode(&buf[..len]) {
                Ok(env) => {
                    if tx.send(env).is_err() {
                        return;
                    }
                }
                Err(e) => log::debug!("dropping datagram: {e}"),
            },
            Err(e) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => {}
            Err(e) => log::debug!("udp receive failed: {e}"),
        }
    }
}

fn tcp_acceptor(listener: TcpListener, tx: Sender<Envelope>, stop: Arc<AtomicBool>) {
    while !stop.load(Ordering::Relaxed) {
        match listener.accept() {
            Ok((stream, _)) => {
                let tx = tx.clone();
                // One frame per connection; a slow peer only stalls its own thread.
                thread::spawn(move || {
                    let _ = stream.set_nonblocking(false);
                    let _ = stream.set_read_timeout(Some(Duration::from_secs(2)));
                    match codec::read_frame(&mut BufReader::new(stream)) {
                        Ok(env) => {
                            let _ = tx.send(env);
                        }
                        Err(e) => log::debug!("bad stream frame: {e}"),
                    }
                });
            }
            Err(e) if e.kind() == io::ErrorKind::WouldBlock => thread::sleep(Duration::from_millis(5)),
            Err(e) => log::debug!("accept failed: {e}"),
        }
    }
}

struct EventLoop {
    rt: NodeRuntime,
    me: Member,
    udp: UdpSocket,
    inbox: Receiver<Envelope>,
    /// Endpoints of processes outside the current view that have talked to us.
    directory: HashMap<NodeId, Endpoint>,
    shared: Arc<Mutex<Shared>>,
    stop: Arc<AtomicBool>,
    callback: Option<ViewCallback>,
    topts: TransportOptions,
}

impl EventLoop {
    fn run(mut self) {
        let mut now = 0u64;
        let mut next = Instant::now();
        while !self.stop.load(Ordering::Relaxed) {
            let wait = next.saturating_duration_since(Instant::now());
            if !wait.is_zero() {
                thread::sleep(wait);
            }
            next += self.topts.tick;
            now += 1;

            let mut inbox = Vec::new();
            while let Ok(env) = self.inbox.try_recv() {
                self.directory.insert(env.from, env.from_addr.clone());
                inbox.push(Inbound {
                    from: env.from,
                    msg: Arc::new(env.msg),
                });
            }
            let wants_leave = std::mem::take(&mut self.shared.lock().expect("node state lock").leave);
            let mut out = if wants_leave { self.rt.leave(now) } else { Vec::new() };
            out.extend(self.rt.step(now, inbox));
            for o in out {
                self.send(o);
            }
            for ev in self.rt.drain_events() {
                if let Some(cb) = self.callback.as_mut() {
                    cb(&ev);
                }
            }
            let mut s = self.shared.lock().expect("node state lock");
            s.view = self.rt.configuration().cloned();
            s.departed = self.rt.departed_at().is_some();
        }
    }

    fn endpoint(&self, to: &Target) -> Option<Endpoint> {
        match to {
            Target::Addr(ep) => Some(ep.clone()),
            Target::Node(id) => self
                .rt
                .configuration()
                .and_then(|c| c.member(*id))
                .map(|m| m.endpoint.clone())
                .or_else(|| {
                    self.rt
                        .options()
                        .aux
                        .iter()
                        .find(|m| m.id == *id)
                        .map(|m| m.endpoint.clone())
                })
                .or_else(|| self.directory.get(id).cloned()),
        }
    }

    fn send(&self, o: Outbound) {
        let Some(ep) = self.endpoint(&o.to) else {
            log::debug!("no endpoint for {:?}", o.to);
            return;
        };
        let kind = o.msg.kind();
        let env = Envelope::new(self.me.id, self.me.endpoint.clone(), (*o.msg).clone());
        let bytes = match codec::encode(&env) {
            Ok(b) => b,
            Err(e) => {
                log::warn!("cannot encode {kind:?}: {e}");
                return;
            }
        };
        let result = resolve(&ep).and_then(|addr| {
            if uses_stream(kind) || bytes.len() > MAX_DATAGRAM {
                send_stream(addr, &bytes, self.topts.connect_timeout)
            } else {
                self.udp.send_to(&bytes, addr).map(|_| ())
            }
        });
        if let Err(e) = result {
            // Unreachable peers look like loss to the protocol.
            log::debug!("send {kind:?} to {}:{} failed: {e}", ep.host, ep.port);
        }
    }
}

fn send_stream(addr: SocketAddr, bytes: &[u8], timeout: Duration) -> io::Result<()> {
    use std::io::Write;
    let mut s = TcpStream::connect_timeout(&addr, timeout)?;
    s.set_write_timeout(Some(timeout))?;
    s.write_all(bytes)
}
