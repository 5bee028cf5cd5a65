//! Datagram transport for the FastLane path.
//!
//! [`SimulatedChannel`] is deterministic: fixed one-way latency, seeded
//! Bernoulli loss, per-endpoint link state and a bounded receive buffer per
//! socket. [`LoopbackChannel`] hands datagrams to real UDP sockets.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;
use std::io;
use std::net::{IpAddr, Ipv4Addr, SocketAddr, UdpSocket};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

/// Default FastLane UDP port.
pub const FASTLANE_PORT: u16 = 11783;
/// Largest UDP payload over IPv4.
pub const MAX_DATAGRAM: usize = 65_507;

#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct DatagramEndpoint(SocketAddr);

impl DatagramEndpoint {
    pub fn new(address: IpAddr, port: u16) -> Self {
        Self(SocketAddr::new(address, port))
    }

    pub fn v4(a: u8, b: u8, c: u8, d: u8, port: u16) -> Self {
        Self::new(IpAddr::V4(Ipv4Addr::new(a, b, c, d)), port)
    }

    pub fn address(&self) -> IpAddr {
        self.0.ip()
    }

    pub fn port(&self) -> u16 {
        self.0.port()
    }

    pub fn is_usable(&self) -> bool {
        self.port() != 0
    }

    pub fn socket_addr(&self) -> SocketAddr {
        self.0
    }
}

impl From<SocketAddr> for DatagramEndpoint {
    fn from(addr: SocketAddr) -> Self {
        Self(addr)
    }
}

impl fmt::Display for DatagramEndpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

impl fmt::Debug for DatagramEndpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

#[derive(Debug, Error)]
pub enum ChannelError {
    #[error("payload of {0} bytes exceeds the datagram limit")]
    TooLarge(usize),
    #[error("endpoint {0} is already bound")]
    AlreadyBound(DatagramEndpoint),
    #[error("endpoint {0} is not bound")]
    NotBound(DatagramEndpoint),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Datagram {
    pub from: DatagramEndpoint,
    pub payload: Vec<u8>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ChannelStats {
    pub sent: u64,
    pub delivered: u64,
    pub dropped_unknown: u64,
    pub dropped_loss: u64,
    pub dropped_link_down: u64,
    pub dropped_overflow: u64,
}

impl ChannelStats {
    pub fn dropped(&self) -> u64 {
        self.dropped_unknown + self.dropped_loss + self.dropped_link_down + self.dropped_overflow
    }
}

/// Common surface of the simulated and the socket-backed channel.
pub trait DatagramChannel {
    /// Opens a receive socket. Returns the endpoint actually bound, which
    /// differs from the request only when port 0 asked for an ephemeral port.
    fn bind(&mut self, endpoint: DatagramEndpoint) -> Result<DatagramEndpoint, ChannelError>;

    fn send_datagram(
        &mut self,
        now_us: u64,
        from: DatagramEndpoint,
        to: DatagramEndpoint,
        payload: &[u8],
    ) -> Result<(), ChannelError>;

    /// Earliest pending delivery, if the backend schedules deliveries.
    fn next_delivery(&self) -> Option<u64>;

    /// Moves every datagram due at or before `now_us` into receive buffers.
    fn deliver_due(&mut self, now_us: u64);

    fn recv(&mut self, at: DatagramEndpoint) -> Option<Datagram>;

    fn stats(&self) -> ChannelStats;
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelConfig {
    pub latency_us: u64,
    pub loss_rate: f64,
    pub rx_buffer_bytes: usize,
    /// Buffer space charged per queued datagram on top of its payload:
    /// kernel packet bookkeeping (2304) plus UDP and IPv4 headers (28).
    pub per_datagram_overhead: usize,
    pub seed: u64,
}

impl Default for ChannelConfig {
    fn default() -> Self {
        Self { latency_us: 50, loss_rate: 0.0, rx_buffer_bytes: 1 << 20, per_datagram_overhead: 2304 + 28, seed: 0 }
    }
}

impl ChannelConfig {
    /// How many datagrams of `len` bytes fit in one receive buffer.
    pub fn buffer_capacity(&self, len: usize) -> usize {
        self.rx_buffer_bytes / (len + self.per_datagram_overhead)
    }
}

#[derive(Default)]
struct SimSocket {
    queue: VecDeque<Datagram>,
    queued_bytes: usize,
    link_up: bool,
}

struct InFlight {
    deliver_at: u64,
    to: DatagramEndpoint,
    datagram: Datagram,
}

pub struct SimulatedChannel {
    config: ChannelConfig,
    rng: ChaCha8Rng,
    sockets: BTreeMap<DatagramEndpoint, SimSocket>,
    // constant latency keeps this sorted by delivery time
    in_flight: VecDeque<InFlight>,
    stats: ChannelStats,
}

impl SimulatedChannel {
    pub fn new(config: ChannelConfig) -> Self {
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        Self { config, rng, sockets: BTreeMap::new(), in_flight: VecDeque::new(), stats: ChannelStats::default() }
    }

    pub fn config(&self) -> &ChannelConfig {
        &self.config
    }

    /// Connects or disconnects an endpoint. Datagrams from or to a
    /// disconnected endpoint are dropped at send time.
    pub fn set_link_up(&mut self, endpoint: DatagramEndpoint, up: bool) {
        if let Some(s) = self.sockets.get_mut(&endpoint) {
            s.link_up = up;
        }
    }

    pub fn in_flight(&self) -> usize {
        self.in_flight.len()
    }
}

impl DatagramChannel for SimulatedChannel {
    fn bind(&mut self, endpoint: DatagramEndpoint) -> Result<DatagramEndpoint, ChannelError> {
        if self.sockets.contains_key(&endpoint) {
            return Err(ChannelError::AlreadyBound(endpoint));
        }
        self.sockets.insert(endpoint, SimSocket { link_up: true, ..Default::default() });
        Ok(endpoint)
    }

    fn send_datagram(
        &mut self,
        now_us: u64,
        from: DatagramEndpoint,
        to: DatagramEndpoint,
        payload: &[u8],
    ) -> Result<(), ChannelError> {
        if payload.len() > MAX_DATAGRAM {
            return Err(ChannelError::TooLarge(payload.len()));
        }
        self.stats.sent += 1;
        let from_up = self.sockets.get(&from).is_none_or(|s| s.link_up);
        let Some(dest) = self.sockets.get(&to) else {
            self.stats.dropped_unknown += 1;
            return Ok(());
        };
        if !from_up || !dest.link_up {
            self.stats.dropped_link_down += 1;
            return Ok(());
        }
        if self.config.loss_rate > 0.0 && self.rng.random::<f64>() < self.config.loss_rate {
            self.stats.dropped_loss += 1;
            return Ok(());
        }
        self.in_flight.push_back(InFlight {
            deliver_at: now_us + self.config.latency_us,
            to,
            datagram: Datagram { from, payload: payload.to_vec() },
        });
        Ok(())
    }

    fn next_delivery(&self) -> Option<u64> {
        self.in_flight.front().map(|d| d.deliver_at)
    }

    fn deliver_due(&mut self, now_us: u64) {
        while self.in_flight.front().is_some_and(|d| d.deliver_at <= now_us) {
            let d = self.in_flight.pop_front().expect("front exists");
            let socket = self.sockets.get_mut(&d.to).expect("destination checked at send");
            let charge = d.datagram.payload.len() + self.config.per_datagram_overhead;
            if socket.queued_bytes + charge > self.config.rx_buffer_bytes {
                self.stats.dropped_overflow += 1;
                continue;
            }
            socket.queued_bytes += charge;
            socket.queue.push_back(d.datagram);
            self.stats.delivered += 1;
        }
    }

    fn recv(&mut self, at: DatagramEndpoint) -> Option<Datagram> {
        let socket = self.sockets.get_mut(&at)?;
        let d = socket.queue.pop_front()?;
        socket.queued_bytes -= d.payload.len() + self.config.per_datagram_overhead;
        Some(d)
    }

    fn stats(&self) -> ChannelStats {
        self.stats
    }
}

/// Real UDP sockets, one per bound endpoint, in non-blocking mode.
#[derive(Default)]
pub struct LoopbackChannel {
    sockets: BTreeMap<DatagramEndpoint, UdpSocket>,
    stats: ChannelStats,
}

impl LoopbackChannel {
    pub fn new() -> Self {
        Self::default()
    }
}

impl DatagramChannel for LoopbackChannel {
    fn bind(&mut self, endpoint: DatagramEndpoint) -> Result<DatagramEndpoint, ChannelError> {
        let socket = UdpSocket::bind(endpoint.socket_addr())?;
        socket.set_nonblocking(true)?;
        let bound = DatagramEndpoint::from(socket.local_addr()?);
        if self.sockets.contains_key(&bound) {
            return Err(ChannelError::AlreadyBound(bound));
        }
        self.sockets.insert(bound, socket);
        Ok(bound)
    }

    fn send_datagram(
        &mut self,
        _now_us: u64,
        from: DatagramEndpoint,
        to: DatagramEndpoint,
        payload: &[u8],
    ) -> Result<(), ChannelError> {
        if payload.len() > MAX_DATAGRAM {
            return Err(ChannelError::TooLarge(payload.len()));
        }
        let socket = self.sockets.get(&from).ok_or(ChannelError::NotBound(from))?;
        self.stats.sent += 1;
        match socket.send_to(payload, to.socket_addr()) {
            Ok(_) => Ok(()),
            // nobody listening; datagram semantics
            Err(e) if e.kind() == io::ErrorKind::ConnectionRefused => {
                self.stats.dropped_unknown += 1;
                Ok(())
            }
            Err(e) => Err(e.into()),
        }
    }

    fn next_delivery(&self) -> Option<u64> {
        None
    }

    fn deliver_due(&mut self, _now_us: u64) {}

    fn recv(&mut self, at: DatagramEndpoint) -> Option<Datagram> {
        let socket = self.sockets.get(&at)?;
        let mut buf = [0u8; MAX_DATAGRAM];
        loop {
            match socket.recv_from(&mut buf) {
                Ok((n, from)) => {
                    self.stats.delivered += 1;
                    return Some(Datagram { from: from.into(), payload: buf[..n].to_vec() });
                }
                Err(e) if e.kind() == io::ErrorKind::ConnectionRefused => continue,
                Err(_) => return None,
            }
        }
    }

    fn stats(&self) -> ChannelStats {
        self.stats
    }
}
