//! The UDP side of the dual stack: the 15-byte frame image, per-peer
//! session confirmation and keepalive, and the routing decision.

use thiserror::Error;

use crate::can::{CanFrame, CanId, GLOBAL_ADDRESS, MAX_DLC, MAX_RAW_ID, PGN_ADDRESS_CLAIMED, PRESENCE_ADDRESS};
use crate::channel::DatagramEndpoint;
use crate::netmgmt::{FastLaneState, Name, PeerTable};

pub const FASTLANE_FRAME_LEN: usize = 15;
pub const FASTLANE_VERSION: u8 = 0x01;
pub const TYPE_CAN: u8 = 0x01;
pub const TYPE_CAN_FD: u8 = 0x02;
pub const KEEPALIVE_PRIORITY: u8 = 6;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FastLaneError {
    #[error("datagram of {0} bytes, expected 15")]
    Length(usize),
    #[error("unsupported version {0:#04x}")]
    Version(u8),
    #[error("CAN FD frames are reserved and unsupported")]
    CanFdReserved,
    #[error("unknown frame type {0:#04x}")]
    Type(u8),
    #[error("DLC {0} out of range")]
    Dlc(u8),
    #[error("identifier {0:#x} exceeds 29 bits")]
    Id(u32),
    #[error("padding byte {0} is not 0xFF")]
    Padding(usize),
}

pub fn encode_fastlane(frame: &CanFrame) -> [u8; FASTLANE_FRAME_LEN] {
    let mut out = [0xFF; FASTLANE_FRAME_LEN];
    out[0] = FASTLANE_VERSION;
    out[1] = TYPE_CAN;
    out[2..6].copy_from_slice(&frame.id().raw().to_be_bytes());
    out[6] = frame.dlc() as u8;
    out[7..7 + frame.dlc()].copy_from_slice(frame.data());
    out
}

pub fn decode_fastlane(bytes: &[u8]) -> Result<CanFrame, FastLaneError> {
    if bytes.len() != FASTLANE_FRAME_LEN {
        return Err(FastLaneError::Length(bytes.len()));
    }
    if bytes[0] != FASTLANE_VERSION {
        return Err(FastLaneError::Version(bytes[0]));
    }
    match bytes[1] {
        TYPE_CAN => {}
        TYPE_CAN_FD => return Err(FastLaneError::CanFdReserved),
        t => return Err(FastLaneError::Type(t)),
    }
    let dlc = bytes[6];
    if dlc as usize > MAX_DLC {
        return Err(FastLaneError::Dlc(dlc));
    }
    let raw = u32::from_be_bytes([bytes[2], bytes[3], bytes[4], bytes[5]]);
    if raw > MAX_RAW_ID {
        return Err(FastLaneError::Id(raw));
    }
    let data = &bytes[7..];
    if let Some(i) = data[dlc as usize..].iter().position(|&b| b != 0xFF) {
        return Err(FastLaneError::Padding(7 + dlc as usize + i));
    }
    let id = CanId::from_raw(raw).map_err(|_| FastLaneError::Id(raw))?;
    Ok(CanFrame::new(id, &data[..dlc as usize]).expect("dlc checked"))
}

/// 253-over-UDP: an Address Claimed frame from the presence pseudo-source
/// carrying the sender's NAME.
pub fn keepalive_frame(name: Name) -> CanFrame {
    let id = CanId::new(KEEPALIVE_PRIORITY, PGN_ADDRESS_CLAIMED, GLOBAL_ADDRESS, PRESENCE_ADDRESS).expect("valid id");
    CanFrame::new(id, &name.to_bytes()).expect("8 bytes")
}

pub fn is_keepalive(frame: &CanFrame) -> bool {
    frame.id().pgn() == PGN_ADDRESS_CLAIMED && frame.id().source_address() == PRESENCE_ADDRESS
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Medium {
    Can,
    Udp(DatagramEndpoint),
}

/// Broadcasts always use CAN; destination-specific frames use UDP only
/// towards a Confirmed peer.
pub fn route_frame(peers: &PeerTable, frame: &CanFrame) -> Medium {
    let id = frame.id();
    if id.is_broadcast() {
        return Medium::Can;
    }
    match peers.get(id.destination_address()) {
        Some(p) if p.fastlane_state == FastLaneState::Confirmed => p.endpoint().map_or(Medium::Can, Medium::Udp),
        _ => Medium::Can,
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SessionConfig {
    pub keepalive_period_us: u64,
    pub keepalive_timeout_us: u64,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self { keepalive_period_us: 5_000_000, keepalive_timeout_us: 15_000_000 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SessionEvent {
    Confirmed { sa: u8, name: Name },
    /// Keepalives stopped; traffic to this peer is back on CAN.
    Fallback { sa: u8, name: Name },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct DatagramCounters {
    pub received: u64,
    pub keepalives: u64,
    pub decode_errors: u64,
    pub unknown_endpoint: u64,
    pub rejected_keepalive: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DatagramOutcome {
    /// A CAN frame for the normal receive pipeline.
    Frame { from_sa: u8, frame: CanFrame },
    Keepalive { sa: u8 },
    Dropped,
}

/// Session bookkeeping on top of the peer table. Outgoing datagrams are
/// queued and collected by the node.
#[derive(Debug, Default)]
pub struct FastLaneLayer {
    config: SessionConfig,
    counters: DatagramCounters,
    outbox: Vec<(DatagramEndpoint, [u8; FASTLANE_FRAME_LEN])>,
    events: Vec<SessionEvent>,
}

impl FastLaneLayer {
    pub fn new(config: SessionConfig) -> Self {
        Self { config, ..Default::default() }
    }

    pub fn config(&self) -> &SessionConfig {
        &self.config
    }

    pub fn counters(&self) -> DatagramCounters {
        self.counters
    }

    pub fn take_outgoing(&mut self) -> Vec<(DatagramEndpoint, [u8; FASTLANE_FRAME_LEN])> {
        std::mem::take(&mut self.outbox)
    }

    pub fn take_events(&mut self) -> Vec<SessionEvent> {
        std::mem::take(&mut self.events)
    }

    /// Sends due keepalives and fails Confirmed peers that went quiet.
    pub fn tick_session(&mut self, peers: &mut PeerTable, own_name: Name, now: u64) {
        let ka = encode_fastlane(&keepalive_frame(own_name));
        for p in peers.iter_mut() {
            if !matches!(p.fastlane_state, FastLaneState::Discovered | FastLaneState::Confirmed) {
                continue;
            }
            if p.fastlane_state == FastLaneState::Confirmed {
                let heard = p.last_udp_keepalive_time.unwrap_or(0);
                if now.saturating_sub(heard) > self.config.keepalive_timeout_us {
                    p.fastlane_state = FastLaneState::Failed;
                    self.events.push(SessionEvent::Fallback { sa: p.sa, name: p.name });
                    continue;
                }
            }
            let due = p.last_udp_keepalive_sent.is_none_or(|t| now >= t + self.config.keepalive_period_us);
            if let (true, Some(ep)) = (due, p.endpoint()) {
                p.last_udp_keepalive_sent = Some(now);
                self.outbox.push((ep, ka));
            }
        }
    }

    pub fn on_datagram(
        &mut self,
        peers: &mut PeerTable,
        own_name: Name,
        now: u64,
        from: DatagramEndpoint,
        bytes: &[u8],
    ) -> DatagramOutcome {
        self.counters.received += 1;
        let Some(sa) = peers.by_endpoint(from).map(|p| p.sa) else {
            self.counters.unknown_endpoint += 1;
            return DatagramOutcome::Dropped;
        };
        let frame = match decode_fastlane(bytes) {
            Ok(f) => f,
            Err(_) => {
                self.counters.decode_errors += 1;
                return DatagramOutcome::Dropped;
            }
        };
        if !is_keepalive(&frame) {
            return DatagramOutcome::Frame { from_sa: sa, frame };
        }
        let p = peers.get_mut(sa).expect("found by endpoint");
        if Name::from_bytes(frame.data()) != Some(p.name) {
            self.counters.rejected_keepalive += 1;
            return DatagramOutcome::Dropped;
        }
        match p.fastlane_state {
            FastLaneState::Discovered => {
                p.fastlane_state = FastLaneState::Confirmed;
                p.last_udp_keepalive_time = Some(now);
                p.last_udp_keepalive_sent = Some(now);
                self.events.push(SessionEvent::Confirmed { sa, name: p.name });
                // answer right away so the peer confirms without waiting a period
                self.outbox.push((from, encode_fastlane(&keepalive_frame(own_name))));
            }
            FastLaneState::Confirmed => p.last_udp_keepalive_time = Some(now),
            FastLaneState::Legacy | FastLaneState::Failed => {
                self.counters.rejected_keepalive += 1;
                return DatagramOutcome::Dropped;
            }
        }
        self.counters.keepalives += 1;
        DatagramOutcome::Keepalive { sa }
    }
}
