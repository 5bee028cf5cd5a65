//! Address claiming, the Request PGN and the peer lifecycle
//! (entry by claim, presence on SA 253, departure on SA 252).

use std::collections::BTreeMap;
use std::fmt;

use thiserror::Error;

use crate::can::{
    CanFrame, CanId, DEPARTURE_ADDRESS, GLOBAL_ADDRESS, NULL_ADDRESS, PGN_ADDRESS_CLAIMED, PGN_REQUEST,
    PRESENCE_ADDRESS,
};
use crate::channel::DatagramEndpoint;

pub const CLAIM_PRIORITY: u8 = 6;
pub const REQUEST_PRIORITY: u8 = 6;
/// Highest address a control function can hold.
pub const MAX_CLAIMABLE_ADDRESS: u8 = 251;

/// 64-bit identity of a control function. Lower value wins contention.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Name(pub u64);

impl Name {
    pub fn to_bytes(self) -> [u8; 8] {
        self.0.to_le_bytes()
    }

    pub fn from_bytes(data: &[u8]) -> Option<Self> {
        data.try_into().ok().map(|b| Self(u64::from_le_bytes(b)))
    }
}

impl fmt::Debug for Name {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Name({:016X})", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FastLaneState {
    Legacy,
    Discovered,
    Confirmed,
    Failed,
}

/// Progress of the AACL exchange for the current claim epoch of a peer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DiscoveryStatus {
    NotStarted,
    Pending { deadline_us: u64 },
    Done,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PeerRecord {
    pub name: Name,
    pub sa: u8,
    pub endpoints: Vec<DatagramEndpoint>,
    pub fastlane_state: FastLaneState,
    pub discovery: DiscoveryStatus,
    /// Incremented every time this NAME claims again.
    pub epoch: u32,
    pub last_claim_time: u64,
    /// Set once the peer has sent a presence heartbeat; arms the timeout.
    pub last_presence_time: Option<u64>,
    pub last_udp_keepalive_time: Option<u64>,
    pub last_udp_keepalive_sent: Option<u64>,
}

impl PeerRecord {
    fn new(name: Name, sa: u8, now: u64, epoch: u32) -> Self {
        Self {
            name,
            sa,
            endpoints: Vec::new(),
            fastlane_state: FastLaneState::Legacy,
            discovery: DiscoveryStatus::NotStarted,
            epoch,
            last_claim_time: now,
            last_presence_time: None,
            last_udp_keepalive_time: None,
            last_udp_keepalive_sent: None,
        }
    }

    /// Preferred FastLane endpoint (the first announced object).
    pub fn endpoint(&self) -> Option<DatagramEndpoint> {
        self.endpoints.first().copied()
    }

    fn last_heard(&self) -> u64 {
        self.last_presence_time.map_or(self.last_claim_time, |p| p.max(self.last_claim_time))
    }
}

/// Address table keyed by source address.
#[derive(Debug, Default, Clone)]
pub struct PeerTable {
    by_sa: BTreeMap<u8, PeerRecord>,
}

impl PeerTable {
    pub fn get(&self, sa: u8) -> Option<&PeerRecord> {
        self.by_sa.get(&sa)
    }

    pub fn get_mut(&mut self, sa: u8) -> Option<&mut PeerRecord> {
        self.by_sa.get_mut(&sa)
    }

    pub fn by_name(&self, name: Name) -> Option<&PeerRecord> {
        self.by_sa.values().find(|p| p.name == name)
    }

    pub fn by_endpoint(&self, endpoint: DatagramEndpoint) -> Option<&PeerRecord> {
        self.by_sa.values().find(|p| p.endpoints.contains(&endpoint))
    }

    pub fn iter(&self) -> impl Iterator<Item = &PeerRecord> {
        self.by_sa.values()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut PeerRecord> {
        self.by_sa.values_mut()
    }

    pub fn len(&self) -> usize {
        self.by_sa.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_sa.is_empty()
    }

    fn insert(&mut self, record: PeerRecord) {
        self.by_sa.insert(record.sa, record);
    }

    fn remove(&mut self, sa: u8) -> Option<PeerRecord> {
        self.by_sa.remove(&sa)
    }

    fn remove_name(&mut self, name: Name) -> Option<PeerRecord> {
        let sa = self.by_name(name)?.sa;
        self.remove(sa)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LifecycleKind {
    Entered,
    Present,
    Departed,
    TimedOut,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LifecycleEvent {
    pub kind: LifecycleKind,
    pub name: Name,
    pub sa: u8,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LifecycleConfig {
    pub claim_validity_us: u64,
    pub heartbeat_enabled: bool,
    pub heartbeat_period_us: u64,
    pub presence_timeout_us: u64,
}

impl Default for LifecycleConfig {
    fn default() -> Self {
        Self {
            claim_validity_us: 250_000,
            heartbeat_enabled: false,
            heartbeat_period_us: 2_000_000,
            presence_timeout_us: 6_000_000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClaimState {
    Idle,
    Claiming { sa: u8, since_us: u64 },
    Valid { sa: u8 },
    CannotClaim,
    Departed,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum NetMgmtError {
    #[error("FastLane control functions must have their IP address before claiming")]
    IpNotReady,
    #[error("address {0} cannot be claimed")]
    InvalidAddress(u8),
    #[error("own address is not valid")]
    NoValidAddress,
    #[error("requesting from own address is meaningless")]
    SelfRequest,
    #[error("no live peer at address {0:#04x}")]
    UnknownPeer(u8),
}

pub fn claim_frame(name: Name, sa: u8) -> CanFrame {
    let id = CanId::new(CLAIM_PRIORITY, PGN_ADDRESS_CLAIMED, GLOBAL_ADDRESS, sa).expect("valid claim id");
    CanFrame::new(id, &name.to_bytes()).expect("8 bytes")
}

pub fn request_frame(source: u8, destination: u8, requested_pgn: u32) -> CanFrame {
    let id = CanId::new(REQUEST_PRIORITY, PGN_REQUEST, destination, source).expect("valid request id");
    let pgn = requested_pgn.to_le_bytes();
    CanFrame::new(id, &pgn[..3]).expect("3 bytes")
}

/// Requested PGN carried by a Request frame.
pub fn requested_pgn(frame: &CanFrame) -> Option<u32> {
    match frame.data() {
        [a, b, c, ..] => Some(u32::from_le_bytes([*a, *b, *c, 0])),
        _ => None,
    }
}

/// Per control function network management.
pub struct NetworkManager {
    name: Name,
    fastlane_capable: bool,
    config: LifecycleConfig,
    state: ClaimState,
    peers: PeerTable,
    outbox: Vec<CanFrame>,
    last_heartbeat: Option<u64>,
    malformed: u64,
    diagnostics: Vec<String>,
}

impl NetworkManager {
    pub fn new(name: Name, fastlane_capable: bool, config: LifecycleConfig) -> Self {
        Self {
            name,
            fastlane_capable,
            config,
            state: ClaimState::Idle,
            peers: PeerTable::default(),
            outbox: Vec::new(),
            last_heartbeat: None,
            malformed: 0,
            diagnostics: Vec::new(),
        }
    }

    pub fn name(&self) -> Name {
        self.name
    }

    pub fn state(&self) -> ClaimState {
        self.state
    }

    pub fn peers(&self) -> &PeerTable {
        &self.peers
    }

    pub fn peers_mut(&mut self) -> &mut PeerTable {
        &mut self.peers
    }

    /// Address once the claim has survived the validity period.
    pub fn address(&self) -> Option<u8> {
        match self.state {
            ClaimState::Valid { sa } => Some(sa),
            _ => None,
        }
    }

    /// Address being claimed or held.
    pub fn current_address(&self) -> Option<u8> {
        match self.state {
            ClaimState::Claiming { sa, .. } | ClaimState::Valid { sa } => Some(sa),
            _ => None,
        }
    }

    pub fn malformed_frames(&self) -> u64 {
        self.malformed
    }

    pub fn diagnostics(&self) -> &[String] {
        &self.diagnostics
    }

    pub fn take_outgoing(&mut self) -> Vec<CanFrame> {
        std::mem::take(&mut self.outbox)
    }

    pub fn start_claim(&mut self, now: u64, preferred_sa: u8, ip_ready: bool) -> Result<(), NetMgmtError> {
        if self.fastlane_capable && !ip_ready {
            return Err(NetMgmtError::IpNotReady);
        }
        if preferred_sa > MAX_CLAIMABLE_ADDRESS {
            return Err(NetMgmtError::InvalidAddress(preferred_sa));
        }
        self.claim(now, preferred_sa);
        Ok(())
    }

    fn claim(&mut self, now: u64, sa: u8) {
        self.state = ClaimState::Claiming { sa, since_us: now };
        self.outbox.push(claim_frame(self.name, sa));
    }

    /// Moves to the next free address after losing `lost`, or gives up with
    /// a cannot-claim announcement.
    fn reclaim(&mut self, now: u64, lost: u8) {
        let next = (lost as u16 + 1..=MAX_CLAIMABLE_ADDRESS as u16)
            .chain(0..lost as u16)
            .map(|sa| sa as u8)
            .find(|sa| self.peers.get(*sa).is_none());
        match next {
            Some(sa) => self.claim(now, sa),
            None => {
                self.state = ClaimState::CannotClaim;
                self.outbox.push(claim_frame(self.name, NULL_ADDRESS));
            }
        }
    }

    /// Re-announces the own claim, e.g. in answer to a Request.
    pub fn announce(&mut self) {
        if let Some(sa) = self.current_address() {
            self.outbox.push(claim_frame(self.name, sa));
        }
    }

    /// Processes an Address Claimed frame (including the SA 253/252
    /// pseudo-claims).
    pub fn handle_claim_frame(&mut self, now: u64, frame: &CanFrame) -> Option<LifecycleEvent> {
        debug_assert_eq!(frame.id().pgn(), PGN_ADDRESS_CLAIMED);
        let Some(name) = Name::from_bytes(frame.data()) else {
            self.malformed += 1;
            return None;
        };
        let sa = frame.id().source_address();
        if name == self.name {
            return None;
        }
        match sa {
            PRESENCE_ADDRESS => {
                let peer_sa = self.peers.by_name(name)?.sa;
                let peer = self.peers.get_mut(peer_sa).expect("found by name");
                peer.last_presence_time = Some(now);
                Some(LifecycleEvent { kind: LifecycleKind::Present, name, sa: peer_sa })
            }
            DEPARTURE_ADDRESS => {
                let peer = self.peers.remove_name(name)?;
                Some(LifecycleEvent { kind: LifecycleKind::Departed, name, sa: peer.sa })
            }
            NULL_ADDRESS => None,
            GLOBAL_ADDRESS => {
                self.malformed += 1;
                None
            }
            _ => self.handle_address_claim(now, name, sa),
        }
    }

    fn handle_address_claim(&mut self, now: u64, name: Name, sa: u8) -> Option<LifecycleEvent> {
        if self.current_address() == Some(sa) {
            if self.name < name {
                // defend; the rival moves on
                self.outbox.push(claim_frame(self.name, sa));
                return None;
            }
            self.reclaim(now, sa);
        }
        if let Some(holder) = self.peers.get(sa) {
            if holder.name != name {
                if holder.name < name {
                    return None;
                }
                self.peers.remove(sa);
            }
        }
        let epoch = self.peers.remove_name(name).map_or(0, |old| old.epoch + 1);
        self.peers.insert(PeerRecord::new(name, sa, now, epoch));
        Some(LifecycleEvent { kind: LifecycleKind::Entered, name, sa })
    }

    /// Queues a destination-specific Request for `requested_pgn`.
    pub fn send_request(&mut self, target_sa: u8, requested_pgn: u32) -> Result<(), NetMgmtError> {
        let own = self.address().ok_or(NetMgmtError::NoValidAddress)?;
        if target_sa == own {
            return Err(NetMgmtError::SelfRequest);
        }
        if self.peers.get(target_sa).is_none() {
            self.diagnostics.push(format!("request for PGN {requested_pgn} to unknown address {target_sa:#04x}"));
            return Err(NetMgmtError::UnknownPeer(target_sa));
        }
        self.outbox.push(request_frame(own, target_sa, requested_pgn));
        Ok(())
    }

    /// Claim validity, presence heartbeat and peer timeouts.
    pub fn tick_lifecycle(&mut self, now: u64) -> Vec<LifecycleEvent> {
        if let ClaimState::Claiming { sa, since_us } = self.state {
            if now >= since_us + self.config.claim_validity_us {
                self.state = ClaimState::Valid { sa };
            }
        }
        if self.config.heartbeat_enabled && self.address().is_some() {
            let due = self.last_heartbeat.is_none_or(|t| now >= t + self.config.heartbeat_period_us);
            if due {
                self.last_heartbeat = Some(now);
                self.outbox.push(claim_frame(self.name, PRESENCE_ADDRESS));
            }
        }
        let timeout = self.config.presence_timeout_us;
        let expired: Vec<u8> = self
            .peers
            .iter()
            .filter(|p| p.last_presence_time.is_some() && now >= p.last_heard() + timeout)
            .map(|p| p.sa)
            .collect();
        expired
            .into_iter()
            .filter_map(|sa| self.peers.remove(sa))
            .map(|p| LifecycleEvent { kind: LifecycleKind::TimedOut, name: p.name, sa: p.sa })
            .collect()
    }

    /// Announces graceful departure on SA 252.
    pub fn depart(&mut self) {
        if self.current_address().is_some() {
            self.outbox.push(claim_frame(self.name, DEPARTURE_ADDRESS));
        }
        self.state = ClaimState::Departed;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MS: u64 = 1000;

    fn manager(name: u64) -> NetworkManager {
        NetworkManager::new(Name(name), true, LifecycleConfig::default())
    }

    #[test]
    fn claim_becomes_valid_after_250ms() {
        let mut nm = manager(10);
        nm.start_claim(0, 0x80, true).unwrap();
        let out = nm.take_outgoing();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].id().raw(), 0x18EE_FF80);
        nm.tick_lifecycle(249 * MS);
        assert_eq!(nm.address(), None);
        nm.tick_lifecycle(250 * MS);
        assert_eq!(nm.address(), Some(0x80));
    }

    #[test]
    fn fastlane_claim_requires_ip() {
        let mut nm = manager(10);
        assert_eq!(nm.start_claim(0, 0x80, false), Err(NetMgmtError::IpNotReady));
        assert!(nm.take_outgoing().is_empty());
        let mut legacy = NetworkManager::new(Name(11), false, LifecycleConfig::default());
        assert!(legacy.start_claim(0, 0x80, false).is_ok());
    }

    #[test]
    fn contention_lower_name_keeps_address() {
        let mut low = manager(5);
        let mut high = manager(9);
        low.start_claim(0, 0x80, true).unwrap();
        high.start_claim(0, 0x80, true).unwrap();
        let low_claim = low.take_outgoing().pop().unwrap();
        let high_claim = high.take_outgoing().pop().unwrap();

        assert_eq!(low.handle_claim_frame(MS, &high_claim), None);
        assert_eq!(low.take_outgoing(), vec![claim_frame(Name(5), 0x80)]);

        let ev = high.handle_claim_frame(MS, &low_claim).unwrap();
        assert_eq!(ev.kind, LifecycleKind::Entered);
        assert_eq!(high.current_address(), Some(0x81));
        assert_eq!(high.take_outgoing(), vec![claim_frame(Name(9), 0x81)]);
    }

    #[test]
    fn exhausted_addresses_end_in_cannot_claim() {
        let mut nm = manager(u64::MAX);
        nm.start_claim(0, 0, true).unwrap();
        for sa in 0..=MAX_CLAIMABLE_ADDRESS {
            nm.handle_claim_frame(0, &claim_frame(Name(sa as u64), sa));
        }
        assert_eq!(nm.state(), ClaimState::CannotClaim);
        assert_eq!(nm.take_outgoing().last().unwrap().id().source_address(), NULL_ADDRESS);
    }

    #[test]
    fn entry_presence_departure() {
        let mut nm = manager(1);
        let ev = nm.handle_claim_frame(0, &claim_frame(Name(7), 0x26)).unwrap();
        assert_eq!(ev, LifecycleEvent { kind: LifecycleKind::Entered, name: Name(7), sa: 0x26 });
        assert_eq!(nm.peers().get(0x26).unwrap().name, Name(7));

        let ev = nm.handle_claim_frame(100, &claim_frame(Name(7), PRESENCE_ADDRESS)).unwrap();
        assert_eq!(ev.kind, LifecycleKind::Present);
        assert_eq!(nm.peers().get(0x26).unwrap().last_presence_time, Some(100));
        assert_eq!(nm.peers().get(0x26).unwrap().last_claim_time, 0);

        let ev = nm.handle_claim_frame(200, &claim_frame(Name(7), DEPARTURE_ADDRESS)).unwrap();
        assert_eq!(ev.kind, LifecycleKind::Departed);
        assert!(nm.peers().is_empty());
        assert_eq!(nm.handle_claim_frame(300, &claim_frame(Name(7), DEPARTURE_ADDRESS)), None);
    }

    #[test]
    fn cannot_claim_creates_no_entry() {
        let mut nm = manager(1);
        assert_eq!(nm.handle_claim_frame(0, &claim_frame(Name(7), NULL_ADDRESS)), None);
        assert!(nm.peers().is_empty());
    }

    #[test]
    fn malformed_claim_is_counted() {
        let mut nm = manager(1);
        let id = CanId::new(6, PGN_ADDRESS_CLAIMED, 255, 0x26).unwrap();
        let frame = CanFrame::new(id, &[1, 2, 3]).unwrap();
        assert_eq!(nm.handle_claim_frame(0, &frame), None);
        assert_eq!(nm.malformed_frames(), 1);
        assert!(nm.peers().is_empty());
    }

    #[test]
    fn reclaim_from_known_name_starts_new_epoch() {
        let mut nm = manager(1);
        nm.handle_claim_frame(0, &claim_frame(Name(7), 0x26));
        nm.peers_mut().get_mut(0x26).unwrap().fastlane_state = FastLaneState::Confirmed;
        nm.handle_claim_frame(10, &claim_frame(Name(7), 0x27)).unwrap();
        assert!(nm.peers().get(0x26).is_none());
        let peer = nm.peers().get(0x27).unwrap();
        assert_eq!(peer.epoch, 1);
        assert_eq!(peer.fastlane_state, FastLaneState::Legacy);
        assert_eq!(peer.discovery, DiscoveryStatus::NotStarted);
    }

    #[test]
    fn request_frame_layout() {
        let mut nm = manager(1);
        nm.start_claim(0, 0x80, true).unwrap();
        nm.tick_lifecycle(250 * MS);
        nm.handle_claim_frame(0, &claim_frame(Name(7), 0x26));
        nm.take_outgoing();
        nm.send_request(0x26, 19200).unwrap();
        let f = nm.take_outgoing().pop().unwrap();
        assert_eq!(f.id().pgn(), PGN_REQUEST);
        assert_eq!(f.id().destination_address(), 0x26);
        assert_eq!(f.data(), &[0x00, 0x4B, 0x00]);
        assert_eq!(requested_pgn(&f), Some(19200));
    }

    #[test]
    fn request_errors_put_nothing_on_the_wire() {
        let mut nm = manager(1);
        assert_eq!(nm.send_request(0x26, 19200), Err(NetMgmtError::NoValidAddress));
        nm.start_claim(0, 0x80, true).unwrap();
        nm.tick_lifecycle(250 * MS);
        nm.take_outgoing();
        assert_eq!(nm.send_request(0x80, 19200), Err(NetMgmtError::SelfRequest));
        nm.handle_claim_frame(0, &claim_frame(Name(7), 0x26));
        nm.handle_claim_frame(0, &claim_frame(Name(7), DEPARTURE_ADDRESS));
        assert_eq!(nm.send_request(0x26, 19200), Err(NetMgmtError::UnknownPeer(0x26)));
        assert!(nm.take_outgoing().is_empty());
        assert_eq!(nm.diagnostics().len(), 1);
    }

    #[test]
    fn silent_peer_times_out_after_three_periods() {
        let mut nm = manager(1);
        nm.handle_claim_frame(0, &claim_frame(Name(7), 0x26));
        nm.handle_claim_frame(0, &claim_frame(Name(7), PRESENCE_ADDRESS));
        assert!(nm.tick_lifecycle(5_999 * MS).is_empty());
        let evs = nm.tick_lifecycle(6_000 * MS);
        assert_eq!(evs, vec![LifecycleEvent { kind: LifecycleKind::TimedOut, name: Name(7), sa: 0x26 }]);
        assert!(nm.peers().is_empty());
    }

    #[test]
    fn refreshed_peer_does_not_time_out() {
        let mut nm = manager(1);
        nm.handle_claim_frame(0, &claim_frame(Name(7), 0x26));
        for t in (0..20).map(|s| s * 2_000 * MS) {
            nm.handle_claim_frame(t, &claim_frame(Name(7), PRESENCE_ADDRESS));
            assert!(nm.tick_lifecycle(t + 1000 * MS).is_empty());
        }
    }

    #[test]
    fn heartbeat_emitted_at_period() {
        let config = LifecycleConfig { heartbeat_enabled: true, ..Default::default() };
        let mut nm = NetworkManager::new(Name(1), true, config);
        nm.start_claim(0, 0x80, true).unwrap();
        nm.take_outgoing();
        let mut beats = Vec::new();
        for t in (250..=6_250).step_by(5).map(|ms| ms * MS) {
            nm.tick_lifecycle(t);
            if !nm.take_outgoing().is_empty() {
                beats.push(t / MS);
            }
        }
        assert_eq!(beats, vec![250, 2250, 4250, 6250]);
    }
}
