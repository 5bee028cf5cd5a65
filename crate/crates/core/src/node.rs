//! A control function with both interfaces. Frames from the bus and frames
//! unpacked from datagrams enter the same receive pipeline; outgoing frames
//! are routed per peer.

use thiserror::Error;

use crate::aacl::{respond_to_aacl_request, AaclPayload, AaclResponse, DEFAULT_AACL_TIMEOUT_US};
use crate::can::{CanFrame, GLOBAL_ADDRESS, PGN_AACL, PGN_ADDRESS_CLAIMED, PGN_REQUEST};
use crate::channel::DatagramEndpoint;
use crate::fastlane::{
    encode_fastlane, route_frame, DatagramCounters, DatagramOutcome, FastLaneLayer, Medium, SessionConfig,
    SessionEvent, FASTLANE_FRAME_LEN,
};
use crate::netmgmt::{
    requested_pgn, ClaimState, DiscoveryStatus, FastLaneState, LifecycleConfig, LifecycleEvent, LifecycleKind, Name,
    NetMgmtError, NetworkManager, PeerTable,
};
use crate::transport::{
    ReceivedMessage, SendOutcome, TimingProfile, TransportConfig, TransportError, TransportEvent, TransportManager,
};

#[derive(Debug, Clone)]
pub struct NodeConfig {
    pub name: Name,
    pub preferred_address: u8,
    /// Own FastLane endpoint; `None` makes this a CAN-only node that never
    /// answers AACL requests nor starts discovery.
    pub endpoint: Option<DatagramEndpoint>,
    pub transport: TransportConfig,
    pub lifecycle: LifecycleConfig,
    pub session: SessionConfig,
    pub aacl_timeout_us: u64,
    /// Profile for transfers to Confirmed peers. CAN transfers always use
    /// the standard profile.
    pub udp_profile: TimingProfile,
}

impl NodeConfig {
    pub fn new(name: Name, preferred_address: u8, endpoint: Option<DatagramEndpoint>) -> Self {
        Self {
            name,
            preferred_address,
            endpoint,
            transport: TransportConfig::default(),
            lifecycle: LifecycleConfig::default(),
            session: SessionConfig::default(),
            aacl_timeout_us: DEFAULT_AACL_TIMEOUT_US,
            udp_profile: TimingProfile::Standard,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum NodeEvent {
    Message(ReceivedMessage),
    Lifecycle(LifecycleEvent),
    Discovered { sa: u8, endpoints: Vec<DatagramEndpoint> },
    /// Discovery ended without a usable answer.
    Legacy { sa: u8 },
    Session(SessionEvent),
    Transport(TransportEvent),
}

#[derive(Debug, Error)]
pub enum NodeError {
    #[error(transparent)]
    NetMgmt(#[from] NetMgmtError),
    #[error(transparent)]
    Transport(#[from] TransportError),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct NodeCounters {
    pub can_rx: u64,
    pub can_tx: u64,
    pub udp_rx: u64,
    pub udp_tx: u64,
    pub ignored_aacl: u64,
}

pub struct Node {
    config: NodeConfig,
    aacl: Option<AaclPayload>,
    nm: NetworkManager,
    tp: TransportManager,
    fl: FastLaneLayer,
    unrouted: Vec<CanFrame>,
    can_tx: Vec<CanFrame>,
    udp_tx: Vec<(DatagramEndpoint, [u8; FASTLANE_FRAME_LEN])>,
    events: Vec<NodeEvent>,
    counters: NodeCounters,
}

impl Node {
    pub fn new(config: NodeConfig) -> Self {
        let fastlane = config.endpoint.is_some();
        Self {
            aacl: config.endpoint.map(AaclPayload::from_endpoint),
            nm: NetworkManager::new(config.name, fastlane, config.lifecycle.clone()),
            tp: TransportManager::new(config.transport.clone()),
            fl: FastLaneLayer::new(config.session.clone()),
            config,
            unrouted: Vec::new(),
            can_tx: Vec::new(),
            udp_tx: Vec::new(),
            events: Vec::new(),
            counters: NodeCounters::default(),
        }
    }

    pub fn config(&self) -> &NodeConfig {
        &self.config
    }

    pub fn name(&self) -> Name {
        self.config.name
    }

    pub fn endpoint(&self) -> Option<DatagramEndpoint> {
        self.config.endpoint
    }

    pub fn is_fastlane(&self) -> bool {
        self.aacl.is_some()
    }

    /// Valid claimed address.
    pub fn address(&self) -> Option<u8> {
        self.nm.address()
    }

    pub fn claim_state(&self) -> ClaimState {
        self.nm.state()
    }

    pub fn peers(&self) -> &PeerTable {
        self.nm.peers()
    }

    pub fn peer_state(&self, sa: u8) -> Option<FastLaneState> {
        self.nm.peers().get(sa).map(|p| p.fastlane_state)
    }

    pub fn network(&self) -> &NetworkManager {
        &self.nm
    }

    pub fn transport(&self) -> &TransportManager {
        &self.tp
    }

    pub fn datagram_counters(&self) -> DatagramCounters {
        self.fl.counters()
    }

    pub fn counters(&self) -> NodeCounters {
        self.counters
    }

    /// The FastLane endpoint may have been rebound to an ephemeral port.
    pub fn set_endpoint(&mut self, endpoint: DatagramEndpoint) {
        self.config.endpoint = Some(endpoint);
        self.aacl = Some(AaclPayload::from_endpoint(endpoint));
    }

    pub fn start(&mut self, now: u64) -> Result<(), NodeError> {
        self.nm.start_claim(now, self.config.preferred_address, true)?;
        self.flush();
        Ok(())
    }

    /// Sends `data` to `to_sa` (or broadcast with 255). Transfers to a
    /// Confirmed peer use the configured UDP profile.
    pub fn send(&mut self, to_sa: u8, pgn: u32, data: Vec<u8>) -> Result<SendOutcome, NodeError> {
        let own = self.nm.address().ok_or(NetMgmtError::NoValidAddress)?;
        let profile = match self.peer_state(to_sa) {
            Some(FastLaneState::Confirmed) if to_sa != GLOBAL_ADDRESS => self.config.udp_profile,
            _ => TimingProfile::Standard,
        };
        let cts = self.config.transport.cts_packet_count.max(1) as u32;
        let out = self.tp.send_payload(own, to_sa, pgn, data, cts, profile)?;
        self.flush();
        Ok(out)
    }

    pub fn depart(&mut self) {
        self.nm.depart();
        let peers: Vec<u8> = self.nm.peers().iter().map(|p| p.sa).collect();
        for sa in peers {
            self.tp.close_peer(sa);
        }
        self.flush();
    }

    pub fn handle_can(&mut self, now: u64, frame: &CanFrame) {
        self.counters.can_rx += 1;
        self.process(now, frame);
        self.flush();
    }

    pub fn handle_datagram(&mut self, now: u64, from: DatagramEndpoint, bytes: &[u8]) {
        self.counters.udp_rx += 1;
        let outcome = self.fl.on_datagram(self.nm.peers_mut(), self.config.name, now, from, bytes);
        if let DatagramOutcome::Frame { frame, .. } = outcome {
            self.process(now, &frame);
        }
        self.flush();
    }

    pub fn tick(&mut self, now: u64) {
        for ev in self.nm.tick_lifecycle(now) {
            self.tp.close_peer(ev.sa);
            self.events.push(NodeEvent::Lifecycle(ev));
        }
        self.run_discovery(now);
        if let Some(own) = self.nm.current_address() {
            self.tp.tick(now, own);
        }
        self.fl.tick_session(self.nm.peers_mut(), self.config.name, now);
        self.flush();
    }

    pub fn take_can_tx(&mut self) -> Vec<CanFrame> {
        std::mem::take(&mut self.can_tx)
    }

    pub fn take_udp_tx(&mut self) -> Vec<(DatagramEndpoint, [u8; FASTLANE_FRAME_LEN])> {
        std::mem::take(&mut self.udp_tx)
    }

    pub fn take_events(&mut self) -> Vec<NodeEvent> {
        std::mem::take(&mut self.events)
    }

    fn process(&mut self, now: u64, frame: &CanFrame) {
        let id = frame.id();
        let da = id.destination_address();
        let own = self.nm.current_address();
        let global = da == GLOBAL_ADDRESS;
        if !global && Some(da) != own {
            return;
        }
        match id.pgn() {
            PGN_ADDRESS_CLAIMED => {
                let before = self.nm.current_address();
                if let Some(ev) = self.nm.handle_claim_frame(now, frame) {
                    if ev.kind != LifecycleKind::Present {
                        self.tp.close_peer(ev.sa);
                    }
                    self.events.push(NodeEvent::Lifecycle(ev));
                }
                if before.is_some() && self.nm.current_address() != before {
                    // lost our address; sessions under the old SA are void
                    let peers: Vec<u8> = self.nm.peers().iter().map(|p| p.sa).collect();
                    for sa in peers {
                        self.tp.close_peer(sa);
                    }
                }
            }
            PGN_REQUEST => self.on_request(id.source_address(), global, frame),
            PGN_AACL => self.on_aacl_response(id.source_address(), frame.data()),
            pgn if TransportManager::is_transport_pgn(pgn) => {
                let Some(own) = own else { return };
                if let Some(msg) = self.tp.handle_frame(now, own, frame) {
                    if msg.pgn == PGN_AACL {
                        self.on_aacl_response(msg.source, &msg.data);
                    } else {
                        self.events.push(NodeEvent::Message(msg));
                    }
                }
            }
            pgn => self.events.push(NodeEvent::Message(ReceivedMessage {
                source: id.source_address(),
                destination: da,
                pgn,
                data: frame.data().to_vec(),
                protocol: None,
                windows: 0,
            })),
        }
    }

    fn on_request(&mut self, source: u8, global: bool, frame: &CanFrame) {
        match requested_pgn(frame) {
            Some(PGN_ADDRESS_CLAIMED) => self.nm.announce(),
            // AACL is only answered to a destination-specific request
            Some(PGN_AACL) if !global => {
                let Some(own) = self.nm.address() else { return };
                match respond_to_aacl_request(self.aacl.as_ref(), own, source) {
                    AaclResponse::Silent => {}
                    AaclResponse::SingleFrame(f) => self.unrouted.push(f),
                    AaclResponse::Transport { destination, data } => {
                        let cts = self.config.transport.cts_packet_count.max(1) as u32;
                        // a busy session just means the requester times out and stays Legacy
                        let _ = self.tp.send_payload(own, destination, PGN_AACL, data, cts, TimingProfile::Standard);
                    }
                }
            }
            _ => {}
        }
    }

    /// Accepts only answers to a request we have outstanding.
    fn on_aacl_response(&mut self, source: u8, data: &[u8]) {
        let Some(peer) = self.nm.peers_mut().get_mut(source) else {
            self.counters.ignored_aacl += 1;
            return;
        };
        if !matches!(peer.discovery, DiscoveryStatus::Pending { .. }) {
            self.counters.ignored_aacl += 1;
            return;
        }
        peer.discovery = DiscoveryStatus::Done;
        match AaclPayload::decode(data) {
            Ok(payload) => {
                peer.endpoints = payload.endpoints();
                peer.fastlane_state = FastLaneState::Discovered;
                peer.last_udp_keepalive_sent = None;
                peer.last_udp_keepalive_time = None;
                self.events.push(NodeEvent::Discovered { sa: source, endpoints: peer.endpoints.clone() });
            }
            Err(_) => self.events.push(NodeEvent::Legacy { sa: source }),
        }
    }

    fn run_discovery(&mut self, now: u64) {
        if self.aacl.is_none() || self.nm.address().is_none() {
            return;
        }
        let validity = self.config.lifecycle.claim_validity_us;
        let mut due = Vec::new();
        for peer in self.nm.peers_mut().iter_mut() {
            match peer.discovery {
                DiscoveryStatus::NotStarted if now >= peer.last_claim_time + validity => due.push(peer.sa),
                DiscoveryStatus::Pending { deadline_us } if now >= deadline_us => {
                    peer.discovery = DiscoveryStatus::Done;
                    self.events.push(NodeEvent::Legacy { sa: peer.sa });
                }
                _ => {}
            }
        }
        for sa in due {
            if self.nm.send_request(sa, PGN_AACL).is_ok() {
                let peer = self.nm.peers_mut().get_mut(sa).expect("request checked the peer");
                peer.discovery = DiscoveryStatus::Pending { deadline_us: now + self.config.aacl_timeout_us };
            }
        }
    }

    fn flush(&mut self) {
        for ev in self.fl.take_events() {
            if let SessionEvent::Fallback { sa, .. } = ev {
                self.tp.close_peer(sa);
            }
            self.events.push(NodeEvent::Session(ev));
        }
        for ev in self.tp.take_events() {
            if !matches!(ev, TransportEvent::Received(_)) {
                self.events.push(NodeEvent::Transport(ev));
            }
        }
        let mut frames = self.nm.take_outgoing();
        frames.append(&mut self.unrouted);
        frames.append(&mut self.tp.take_outgoing());
        for f in frames {
            match route_frame(self.nm.peers(), &f) {
                Medium::Can => {
                    self.counters.can_tx += 1;
                    self.can_tx.push(f);
                }
                Medium::Udp(ep) => {
                    self.counters.udp_tx += 1;
                    self.udp_tx.push((ep, encode_fastlane(&f)));
                }
            }
        }
        self.udp_tx.append(&mut self.fl.take_outgoing());
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::can::{CanId, PGN_PROPRIETARY_A};
    use crate::netmgmt::{claim_frame, request_frame};

    const MS: u64 = 1000;

    fn ready(endpoint: Option<DatagramEndpoint>) -> Node {
        let mut node = Node::new(NodeConfig::new(Name(5), 0x80, endpoint));
        node.start(0).unwrap();
        node.tick(250 * MS);
        node.take_can_tx();
        node
    }

    fn ep() -> DatagramEndpoint {
        DatagramEndpoint::v4(10, 0, 0, 5, 11783)
    }

    #[test]
    fn answers_destination_specific_aacl_request() {
        let mut node = ready(Some(ep()));
        node.handle_can(300 * MS, &request_frame(0x90, 0x80, PGN_AACL));
        let out = node.take_can_tx();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].id().raw(), 0x184B_9080);
        assert_eq!(out[0].data(), &[0x01, 10, 0, 0, 5, 0x2E, 0x07]);
    }

    #[test]
    fn ignores_global_aacl_request() {
        let mut node = ready(Some(ep()));
        node.handle_can(300 * MS, &request_frame(0x90, GLOBAL_ADDRESS, PGN_AACL));
        assert!(node.take_can_tx().is_empty());
    }

    #[test]
    fn can_only_node_stays_silent() {
        let mut node = ready(None);
        node.handle_can(300 * MS, &request_frame(0x90, 0x80, PGN_AACL));
        assert!(node.take_can_tx().is_empty());
    }

    #[test]
    fn request_for_address_claimed_reannounces() {
        let mut node = ready(None);
        node.handle_can(300 * MS, &request_frame(0x90, GLOBAL_ADDRESS, PGN_ADDRESS_CLAIMED));
        assert_eq!(node.take_can_tx(), vec![claim_frame(Name(5), 0x80)]);
    }

    #[test]
    fn unsolicited_aacl_response_is_ignored() {
        let mut node = ready(Some(ep()));
        node.handle_can(10 * MS, &claim_frame(Name(9), 0x90));
        let id = CanId::new(6, PGN_AACL, 0x80, 0x90).unwrap();
        node.handle_can(20 * MS, &CanFrame::new(id, &[0x01, 10, 0, 0, 9, 0x2E, 0x07]).unwrap());
        assert_eq!(node.counters().ignored_aacl, 1);
        assert_eq!(node.peer_state(0x90), Some(FastLaneState::Legacy));
    }

    #[test]
    fn discovery_waits_for_claim_validity_then_times_out() {
        let mut node = ready(Some(ep()));
        node.handle_can(300 * MS, &claim_frame(Name(9), 0x90));
        node.tick(545 * MS);
        assert!(node.take_can_tx().is_empty());
        node.tick(550 * MS);
        let req = node.take_can_tx();
        assert_eq!(req, vec![request_frame(0x80, 0x90, PGN_AACL)]);
        node.take_events();
        node.tick(550 * MS + DEFAULT_AACL_TIMEOUT_US);
        assert_eq!(node.take_events(), vec![NodeEvent::Legacy { sa: 0x90 }]);
        assert_eq!(node.peer_state(0x90), Some(FastLaneState::Legacy));
    }

    #[test]
    fn send_needs_a_valid_address() {
        let mut node = Node::new(NodeConfig::new(Name(5), 0x80, None));
        assert!(matches!(node.send(0x90, PGN_PROPRIETARY_A, vec![1]), Err(NodeError::NetMgmt(NetMgmtError::NoValidAddress))));
    }
}
