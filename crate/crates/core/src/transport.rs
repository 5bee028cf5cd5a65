//! ISO 11783-3 transport: single frames, TP (BAM and RTS/CTS up to 1785
//! bytes) and ETP (RTS/CTS with data packet offsets, beyond 1785 bytes).
//!
//! The state machines only see [`CanFrame`]s. Whether a frame travels on
//! the bus or inside a FastLane datagram is decided by the caller, so the
//! bytes produced here are identical for both media.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::can::{CanFrame, CanId, GLOBAL_ADDRESS, PGN_ETP_CM, PGN_ETP_DT, PGN_TP_CM, PGN_TP_DT};

pub const BYTES_PER_PACKET: usize = 7;
pub const TP_MAX_SIZE: usize = 1785;
pub const ETP_MAX_SIZE: usize = 117_440_505;
pub const TRANSPORT_PRIORITY: u8 = 7;
pub const DATA_PRIORITY: u8 = 6;
const PAD: u8 = 0xFF;

const TP_RTS: u8 = 16;
const TP_CTS: u8 = 17;
const TP_EOMA: u8 = 19;
const TP_BAM: u8 = 32;
const ETP_RTS: u8 = 20;
const ETP_CTS: u8 = 21;
const ETP_DPO: u8 = 22;
const ETP_EOMA: u8 = 23;
const ABORT: u8 = 255;

pub fn packet_count(size: usize) -> u32 {
    size.div_ceil(BYTES_PER_PACKET) as u32
}

/// CTS windows needed to move `size` bytes with a receive window of
/// `cts_packet_count` packets.
pub fn window_count(size: usize, cts_packet_count: u32) -> u32 {
    packet_count(size).div_ceil(cts_packet_count)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TimingProfile {
    /// Windows are released on the node tick, as on CAN.
    #[default]
    Standard,
    /// Windows are released as soon as the CTS is processed.
    Accelerated,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransportTimeouts {
    pub tr_us: u64,
    pub t1_us: u64,
    pub t2_us: u64,
    pub t3_us: u64,
    pub t4_us: u64,
}

impl Default for TransportTimeouts {
    fn default() -> Self {
        Self { tr_us: 200_000, t1_us: 750_000, t2_us: 1_250_000, t3_us: 1_250_000, t4_us: 1_050_000 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransportConfig {
    pub timeouts: TransportTimeouts,
    /// Packets granted per CTS when receiving.
    pub cts_packet_count: u8,
    pub bam_interval_us: u64,
}

impl Default for TransportConfig {
    fn default() -> Self {
        Self { timeouts: TransportTimeouts::default(), cts_packet_count: 16, bam_interval_us: 50_000 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AbortReason {
    AlreadyInSession,
    ResourcesNeeded,
    Timeout,
    CtsWhileSending,
    MaxRetransmit,
    UnexpectedData,
    BadSequence,
    DuplicateSequence,
    UnexpectedDpo,
    DpoTooManyPackets,
    BadDpoOffset,
    Other(u8),
}

impl AbortReason {
    pub fn code(self) -> u8 {
        match self {
            Self::AlreadyInSession => 1,
            Self::ResourcesNeeded => 2,
            Self::Timeout => 3,
            Self::CtsWhileSending => 4,
            Self::MaxRetransmit => 5,
            Self::UnexpectedData => 6,
            Self::BadSequence => 7,
            Self::DuplicateSequence => 8,
            Self::UnexpectedDpo => 9,
            Self::DpoTooManyPackets => 11,
            Self::BadDpoOffset => 12,
            Self::Other(c) => c,
        }
    }

    pub fn from_code(code: u8) -> Self {
        match code {
            1 => Self::AlreadyInSession,
            2 => Self::ResourcesNeeded,
            3 => Self::Timeout,
            4 => Self::CtsWhileSending,
            5 => Self::MaxRetransmit,
            6 => Self::UnexpectedData,
            7 => Self::BadSequence,
            8 => Self::DuplicateSequence,
            9 => Self::UnexpectedDpo,
            11 => Self::DpoTooManyPackets,
            12 => Self::BadDpoOffset,
            c => Self::Other(c),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SessionFailure {
    Timeout,
    /// The peer sent an abort.
    PeerAborted(AbortReason),
    /// We aborted because the peer broke the protocol.
    Violation(AbortReason),
    /// Closed locally: peer departed or its FastLane path failed.
    Closed,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TransportError {
    #[error("nothing to send")]
    Empty,
    #[error("{0} bytes exceeds the transport limit")]
    TooLarge(usize),
    #[error("a session with {0:#04x} is already active")]
    Busy(u8),
    #[error("unknown session")]
    UnknownSession,
    #[error("timing profile cannot change once a session has started")]
    ProfileLocked,
    #[error("CTS packet count must be at least 1")]
    ZeroWindow,
    #[error("invalid PGN {0:#x}")]
    Pgn(u32),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SessionHandle(pub u64);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Role {
    Sender,
    Receiver,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Protocol {
    Tp,
    Etp,
    Bam,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReceivedMessage {
    pub source: u8,
    pub destination: u8,
    pub pgn: u32,
    pub data: Vec<u8>,
    pub protocol: Option<Protocol>,
    /// CTS windows granted while receiving (0 for single frames and BAM).
    pub windows: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TransportEvent {
    Received(ReceivedMessage),
    Sent { handle: SessionHandle, peer: u8, pgn: u32, windows: u32 },
    Failed { handle: SessionHandle, peer: u8, role: Role, pgn: u32, reason: SessionFailure },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SendOutcome {
    SingleFrame,
    Session(SessionHandle),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    /// Sender created, RTS/BAM not yet emitted.
    Pending,
    AwaitCts,
    /// Window granted, waiting for the pacing slot.
    WindowReady,
    AwaitEoma,
    /// ETP receiver waiting for the DPO that opens a window.
    AwaitDpo,
    AwaitData,
    Bam { next_at: u64 },
}

/// One in-flight transfer.
#[derive(Debug, Clone)]
pub struct TransportSession {
    pub handle: SessionHandle,
    pub role: Role,
    pub protocol: Protocol,
    pub peer_sa: u8,
    pub pgn: u32,
    pub total_size: usize,
    pub cts_packet_count: u32,
    /// Next packet number (1-based) to send or to receive.
    pub next_packet: u32,
    pub dpo_offset: u32,
    window_end: u32,
    window_granted: u32,
    pub windows: u32,
    phase: Phase,
    deadline: Option<u64>,
    profile: TimingProfile,
    started: bool,
    buffer: Vec<u8>,
}

impl TransportSession {
    pub fn total_packets(&self) -> u32 {
        packet_count(self.total_size)
    }

    pub fn profile(&self) -> TimingProfile {
        self.profile
    }

    /// Bytes received so far (receiver) or acknowledged (sender).
    pub fn delivered(&self) -> usize {
        ((self.next_packet.saturating_sub(1)) as usize * BYTES_PER_PACKET).min(self.total_size)
    }

    fn cm_pgn(&self) -> u32 {
        if self.protocol == Protocol::Etp {
            PGN_ETP_CM
        } else {
            PGN_TP_CM
        }
    }

    fn dt_pgn(&self) -> u32 {
        if self.protocol == Protocol::Etp {
            PGN_ETP_DT
        } else {
            PGN_TP_DT
        }
    }

    fn packet(&self, number: u32) -> [u8; BYTES_PER_PACKET] {
        let start = (number as usize - 1) * BYTES_PER_PACKET;
        let end = (start + BYTES_PER_PACKET).min(self.total_size);
        let mut out = [PAD; BYTES_PER_PACKET];
        out[..end - start].copy_from_slice(&self.buffer[start..end]);
        out
    }
}

type SessionKey = (u8, Role, Protocol);

fn frame(pgn: u32, destination: u8, source: u8, data: &[u8]) -> CanFrame {
    let id = CanId::new(TRANSPORT_PRIORITY, pgn, destination, source).expect("transport ids are PDU1");
    CanFrame::new(id, data).expect("transport frames are 8 bytes")
}

fn pgn_bytes(pgn: u32) -> [u8; 3] {
    let b = pgn.to_le_bytes();
    [b[0], b[1], b[2]]
}

fn u24(b: &[u8]) -> u32 {
    u32::from_le_bytes([b[0], b[1], b[2], 0])
}

pub struct TransportManager {
    config: TransportConfig,
    sessions: BTreeMap<SessionKey, TransportSession>,
    next_handle: u64,
    outbox: Vec<CanFrame>,
    events: Vec<TransportEvent>,
}

impl TransportManager {
    pub fn new(config: TransportConfig) -> Self {
        Self { config, sessions: BTreeMap::new(), next_handle: 1, outbox: Vec::new(), events: Vec::new() }
    }

    pub fn config(&self) -> &TransportConfig {
        &self.config
    }

    pub fn sessions(&self) -> impl Iterator<Item = &TransportSession> {
        self.sessions.values()
    }

    pub fn session(&self, handle: SessionHandle) -> Option<&TransportSession> {
        self.sessions.values().find(|s| s.handle == handle)
    }

    pub fn take_outgoing(&mut self) -> Vec<CanFrame> {
        std::mem::take(&mut self.outbox)
    }

    pub fn take_events(&mut self) -> Vec<TransportEvent> {
        std::mem::take(&mut self.events)
    }

    pub fn is_transport_pgn(pgn: u32) -> bool {
        matches!(pgn, PGN_TP_CM | PGN_TP_DT | PGN_ETP_CM | PGN_ETP_DT)
    }

    fn handle(&mut self) -> SessionHandle {
        let h = SessionHandle(self.next_handle);
        self.next_handle += 1;
        h
    }

    /// Starts a transfer of `data` to `to_sa`. Up to 8 bytes go out as one
    /// frame immediately; longer payloads open a session whose first frame
    /// is emitted on the next [`tick`](Self::tick).
    #[allow(clippy::too_many_arguments)]
    pub fn send_payload(
        &mut self,
        own_sa: u8,
        to_sa: u8,
        pgn: u32,
        data: Vec<u8>,
        cts_packet_count: u32,
        profile: TimingProfile,
    ) -> Result<SendOutcome, TransportError> {
        if data.is_empty() {
            return Err(TransportError::Empty);
        }
        if cts_packet_count == 0 {
            return Err(TransportError::ZeroWindow);
        }
        if data.len() > ETP_MAX_SIZE {
            return Err(TransportError::TooLarge(data.len()));
        }
        if data.len() <= 8 {
            let id = CanId::new(DATA_PRIORITY, pgn, to_sa, own_sa).map_err(|_| TransportError::Pgn(pgn))?;
            self.outbox.push(CanFrame::new(id, &data).expect("at most 8 bytes"));
            return Ok(SendOutcome::SingleFrame);
        }
        let protocol = if to_sa == GLOBAL_ADDRESS {
            if data.len() > TP_MAX_SIZE {
                return Err(TransportError::TooLarge(data.len()));
            }
            Protocol::Bam
        } else if data.len() <= TP_MAX_SIZE {
            Protocol::Tp
        } else {
            Protocol::Etp
        };
        let key = (to_sa, Role::Sender, protocol);
        if self.sessions.contains_key(&key) {
            return Err(TransportError::Busy(to_sa));
        }
        let handle = self.handle();
        self.sessions.insert(
            key,
            TransportSession {
                handle,
                role: Role::Sender,
                protocol,
                peer_sa: to_sa,
                pgn,
                total_size: data.len(),
                cts_packet_count: cts_packet_count.min(255),
                next_packet: 1,
                dpo_offset: 0,
                window_end: 0,
                window_granted: 0,
                windows: 0,
                phase: Phase::Pending,
                deadline: None,
                profile,
                started: false,
                buffer: data,
            },
        );
        Ok(SendOutcome::Session(handle))
    }

    /// Changes the timing profile of a session that has not emitted any
    /// frame yet.
    pub fn set_timing_profile(&mut self, handle: SessionHandle, profile: TimingProfile) -> Result<(), TransportError> {
        let s = self.sessions.values_mut().find(|s| s.handle == handle).ok_or(TransportError::UnknownSession)?;
        if s.started {
            return Err(TransportError::ProfileLocked);
        }
        s.profile = profile;
        Ok(())
    }

    /// Releases pending RTS/BAM announcements and paced windows, and expires
    /// timers.
    pub fn tick(&mut self, now: u64, own_sa: u8) {
        let keys: Vec<SessionKey> = self.sessions.keys().copied().collect();
        for key in keys {
            let Some(s) = self.sessions.get_mut(&key) else { continue };
            match s.phase {
                Phase::Pending => self.announce(now, own_sa, key),
                Phase::WindowReady => self.emit_window(now, own_sa, key),
                Phase::Bam { next_at } if now >= next_at => self.emit_bam_packet(now, own_sa, key),
                _ => {
                    if s.deadline.is_some_and(|d| now >= d) {
                        self.fail(key, SessionFailure::Timeout, Some((own_sa, AbortReason::Timeout)));
                    }
                }
            }
        }
    }

    fn announce(&mut self, now: u64, own_sa: u8, key: SessionKey) {
        let t3 = self.config.timeouts.t3_us;
        let bam_interval = self.config.bam_interval_us;
        let s = self.sessions.get_mut(&key).expect("caller checked");
        s.started = true;
        let size = s.total_size;
        let pgn = pgn_bytes(s.pgn);
        let f = match s.protocol {
            Protocol::Tp => {
                s.phase = Phase::AwaitCts;
                s.deadline = Some(now + t3);
                let sz = (size as u16).to_le_bytes();
                frame(
                    PGN_TP_CM,
                    s.peer_sa,
                    own_sa,
                    &[TP_RTS, sz[0], sz[1], s.total_packets() as u8, s.cts_packet_count as u8, pgn[0], pgn[1], pgn[2]],
                )
            }
            Protocol::Etp => {
                s.phase = Phase::AwaitCts;
                s.deadline = Some(now + t3);
                let sz = (size as u32).to_le_bytes();
                frame(PGN_ETP_CM, s.peer_sa, own_sa, &[ETP_RTS, sz[0], sz[1], sz[2], sz[3], pgn[0], pgn[1], pgn[2]])
            }
            Protocol::Bam => {
                s.phase = Phase::Bam { next_at: now + bam_interval };
                s.deadline = None;
                let sz = (size as u16).to_le_bytes();
                frame(
                    PGN_TP_CM,
                    GLOBAL_ADDRESS,
                    own_sa,
                    &[TP_BAM, sz[0], sz[1], s.total_packets() as u8, 0xFF, pgn[0], pgn[1], pgn[2]],
                )
            }
        };
        self.outbox.push(f);
    }

    fn emit_window(&mut self, now: u64, own_sa: u8, key: SessionKey) {
        let t3 = self.config.timeouts.t3_us;
        let s = self.sessions.get_mut(&key).expect("caller checked");
        let first = s.next_packet;
        let last = s.window_end;
        if s.protocol == Protocol::Etp {
            let offset = (first - 1).to_le_bytes();
            let pgn = pgn_bytes(s.pgn);
            let count = (last - first + 1) as u8;
            self.outbox.push(frame(
                PGN_ETP_CM,
                s.peer_sa,
                own_sa,
                &[ETP_DPO, count, offset[0], offset[1], offset[2], pgn[0], pgn[1], pgn[2]],
            ));
            s.dpo_offset = first - 1;
        }
        let dt_pgn = s.dt_pgn();
        for number in first..=last {
            let seq = if s.protocol == Protocol::Etp { number - s.dpo_offset } else { number };
            let p = s.packet(number);
            self.outbox.push(frame(dt_pgn, s.peer_sa, own_sa, &[seq as u8, p[0], p[1], p[2], p[3], p[4], p[5], p[6]]));
        }
        s.next_packet = last + 1;
        s.phase = if last == s.total_packets() { Phase::AwaitEoma } else { Phase::AwaitCts };
        s.deadline = Some(now + t3);
    }

    fn emit_bam_packet(&mut self, now: u64, own_sa: u8, key: SessionKey) {
        let interval = self.config.bam_interval_us;
        let s = self.sessions.get_mut(&key).expect("caller checked");
        let number = s.next_packet;
        let p = s.packet(number);
        self.outbox.push(frame(PGN_TP_DT, GLOBAL_ADDRESS, own_sa, &[number as u8, p[0], p[1], p[2], p[3], p[4], p[5], p[6]]));
        s.next_packet += 1;
        if number == s.total_packets() {
            let s = self.sessions.remove(&key).expect("present");
            self.events.push(TransportEvent::Sent { handle: s.handle, peer: s.peer_sa, pgn: s.pgn, windows: 0 });
        } else {
            s.phase = Phase::Bam { next_at: now + interval };
        }
    }

    fn fail(&mut self, key: SessionKey, reason: SessionFailure, abort: Option<(u8, AbortReason)>) {
        let Some(s) = self.sessions.remove(&key) else { return };
        if let Some((own_sa, why)) = abort {
            if s.protocol != Protocol::Bam {
                self.outbox.push(abort_frame(s.cm_pgn(), s.peer_sa, own_sa, why, s.pgn));
            }
        }
        self.events.push(TransportEvent::Failed { handle: s.handle, peer: s.peer_sa, role: s.role, pgn: s.pgn, reason });
    }

    /// Closes every session with `peer_sa` without sending anything.
    pub fn close_peer(&mut self, peer_sa: u8) {
        let keys: Vec<SessionKey> = self.sessions.keys().filter(|k| k.0 == peer_sa).copied().collect();
        for key in keys {
            self.fail(key, SessionFailure::Closed, None);
        }
    }

    /// Feeds a TP/ETP frame addressed to `own_sa` (or broadcast) into the
    /// state machines. Returns the payload when a transfer completes.
    pub fn handle_frame(&mut self, now: u64, own_sa: u8, f: &CanFrame) -> Option<ReceivedMessage> {
        let id = f.id();
        let data = f.data();
        if data.len() < 8 {
            return None;
        }
        let source = id.source_address();
        let global = id.destination_address() == GLOBAL_ADDRESS;
        if !global && id.destination_address() != own_sa {
            return None;
        }
        match id.pgn() {
            PGN_TP_CM => self.on_tp_cm(now, own_sa, source, global, data),
            PGN_ETP_CM if !global => self.on_etp_cm(now, own_sa, source, data),
            PGN_TP_DT => {
                let protocol = if global { Protocol::Bam } else { Protocol::Tp };
                self.on_dt(now, own_sa, (source, Role::Receiver, protocol), data)
            }
            PGN_ETP_DT if !global => self.on_dt(now, own_sa, (source, Role::Receiver, Protocol::Etp), data),
            _ => None,
        }
    }

    fn on_tp_cm(&mut self, now: u64, own_sa: u8, source: u8, global: bool, d: &[u8]) -> Option<ReceivedMessage> {
        let pgn = u24(&d[5..8]);
        match d[0] {
            TP_BAM if global => {
                let size = u16::from_le_bytes([d[1], d[2]]) as usize;
                if size <= 8 || size > TP_MAX_SIZE || d[3] as u32 != packet_count(size) {
                    return None;
                }
                let key = (source, Role::Receiver, Protocol::Bam);
                self.sessions.remove(&key);
                let t1 = self.config.timeouts.t1_us;
                let handle = self.handle();
                let mut s = self.receiver(handle, Protocol::Bam, source, pgn, size);
                s.phase = Phase::AwaitData;
                s.window_end = s.total_packets();
                s.deadline = Some(now + t1);
                self.sessions.insert(key, s);
                None
            }
            _ if global => None,
            TP_RTS => {
                let size = u16::from_le_bytes([d[1], d[2]]) as usize;
                let key = (source, Role::Receiver, Protocol::Tp);
                if self.sessions.contains_key(&key) {
                    self.outbox.push(abort_frame(PGN_TP_CM, source, own_sa, AbortReason::AlreadyInSession, pgn));
                    return None;
                }
                if size <= 8 || size > TP_MAX_SIZE || d[3] as u32 != packet_count(size) {
                    self.outbox.push(abort_frame(PGN_TP_CM, source, own_sa, AbortReason::ResourcesNeeded, pgn));
                    return None;
                }
                let handle = self.handle();
                let mut s = self.receiver(handle, Protocol::Tp, source, pgn, size);
                let sender_max = if d[4] == 0 { 255 } else { d[4] as u32 };
                s.cts_packet_count = s.cts_packet_count.min(sender_max);
                self.sessions.insert(key, s);
                self.grant_window(now, own_sa, key);
                None
            }
            TP_CTS => {
                self.on_cts(now, own_sa, (source, Role::Sender, Protocol::Tp), d[1] as u32, d[2] as u32);
                None
            }
            TP_EOMA => {
                self.on_eoma((source, Role::Sender, Protocol::Tp));
                None
            }
            ABORT => {
                self.on_abort(source, Protocol::Tp, d[1]);
                None
            }
            _ => None,
        }
    }

    fn on_etp_cm(&mut self, now: u64, own_sa: u8, source: u8, d: &[u8]) -> Option<ReceivedMessage> {
        let pgn = u24(&d[5..8]);
        match d[0] {
            ETP_RTS => {
                let size = u32::from_le_bytes([d[1], d[2], d[3], d[4]]) as usize;
                let key = (source, Role::Receiver, Protocol::Etp);
                if self.sessions.contains_key(&key) {
                    self.outbox.push(abort_frame(PGN_ETP_CM, source, own_sa, AbortReason::AlreadyInSession, pgn));
                    return None;
                }
                if size <= TP_MAX_SIZE || size > ETP_MAX_SIZE {
                    self.outbox.push(abort_frame(PGN_ETP_CM, source, own_sa, AbortReason::ResourcesNeeded, pgn));
                    return None;
                }
                let handle = self.handle();
                let s = self.receiver(handle, Protocol::Etp, source, pgn, size);
                self.sessions.insert(key, s);
                self.grant_window(now, own_sa, key);
                None
            }
            ETP_CTS => {
                self.on_cts(now, own_sa, (source, Role::Sender, Protocol::Etp), d[1] as u32, u24(&d[2..5]));
                None
            }
            ETP_DPO => {
                let key = (source, Role::Receiver, Protocol::Etp);
                let t1 = self.config.timeouts.t1_us;
                let s = self.sessions.get_mut(&key)?;
                let count = d[1] as u32;
                let offset = u24(&d[2..5]);
                let violation = if s.phase != Phase::AwaitDpo {
                    Some(AbortReason::UnexpectedDpo)
                } else if count == 0 || count > s.window_granted {
                    Some(AbortReason::DpoTooManyPackets)
                } else if offset + 1 != s.next_packet {
                    Some(AbortReason::BadDpoOffset)
                } else {
                    None
                };
                if let Some(why) = violation {
                    self.fail(key, SessionFailure::Violation(why), Some((own_sa, why)));
                    return None;
                }
                s.dpo_offset = offset;
                s.window_end = offset + count;
                s.phase = Phase::AwaitData;
                s.deadline = Some(now + t1);
                None
            }
            ETP_EOMA => {
                self.on_eoma((source, Role::Sender, Protocol::Etp));
                None
            }
            ABORT => {
                self.on_abort(source, Protocol::Etp, d[1]);
                None
            }
            _ => None,
        }
    }

    fn receiver(&self, handle: SessionHandle, protocol: Protocol, peer_sa: u8, pgn: u32, size: usize) -> TransportSession {
        TransportSession {
            handle,
            role: Role::Receiver,
            protocol,
            peer_sa,
            pgn,
            total_size: size,
            cts_packet_count: self.config.cts_packet_count.max(1) as u32,
            next_packet: 1,
            dpo_offset: 0,
            window_end: 0,
            window_granted: 0,
            windows: 0,
            phase: Phase::AwaitData,
            deadline: None,
            profile: TimingProfile::Standard,
            started: true,
            buffer: vec![0; size],
        }
    }

    /// Receiver side: issue the CTS for the next window.
    fn grant_window(&mut self, now: u64, own_sa: u8, key: SessionKey) {
        let t2 = self.config.timeouts.t2_us;
        let s = self.sessions.get_mut(&key).expect("caller inserted");
        let remaining = s.total_packets() - s.next_packet + 1;
        let n = s.cts_packet_count.min(remaining).min(255);
        s.window_granted = n;
        s.windows += 1;
        s.deadline = Some(now + t2);
        let pgn = pgn_bytes(s.pgn);
        let f = if s.protocol == Protocol::Etp {
            s.phase = Phase::AwaitDpo;
            let next = s.next_packet.to_le_bytes();
            frame(PGN_ETP_CM, s.peer_sa, own_sa, &[ETP_CTS, n as u8, next[0], next[1], next[2], pgn[0], pgn[1], pgn[2]])
        } else {
            s.phase = Phase::AwaitData;
            s.window_end = s.next_packet + n - 1;
            frame(PGN_TP_CM, s.peer_sa, own_sa, &[TP_CTS, n as u8, s.next_packet as u8, 0xFF, 0xFF, pgn[0], pgn[1], pgn[2]])
        };
        self.outbox.push(f);
    }

    /// Sender side: a CTS opened (or held) a window.
    fn on_cts(&mut self, now: u64, own_sa: u8, key: SessionKey, count: u32, next: u32) {
        let t4 = self.config.timeouts.t4_us;
        let Some(s) = self.sessions.get_mut(&key) else { return };
        if s.phase != Phase::AwaitCts {
            self.fail(key, SessionFailure::Violation(AbortReason::CtsWhileSending), Some((own_sa, AbortReason::CtsWhileSending)));
            return;
        }
        if count == 0 {
            s.deadline = Some(now + t4);
            return;
        }
        let total = s.total_packets();
        if next == 0 || next > total || (s.protocol == Protocol::Tp && count > s.cts_packet_count) {
            self.fail(key, SessionFailure::Violation(AbortReason::Other(250)), Some((own_sa, AbortReason::Other(250))));
            return;
        }
        s.next_packet = next;
        s.window_end = (next + count - 1).min(total);
        s.windows += 1;
        s.phase = Phase::WindowReady;
        s.deadline = None;
        if s.profile == TimingProfile::Accelerated {
            self.emit_window(now, own_sa, key);
        }
    }

    fn on_eoma(&mut self, key: SessionKey) {
        let Some(s) = self.sessions.get(&key) else { return };
        if s.phase != Phase::AwaitEoma {
            return;
        }
        let s = self.sessions.remove(&key).expect("present");
        self.events.push(TransportEvent::Sent { handle: s.handle, peer: s.peer_sa, pgn: s.pgn, windows: s.windows });
    }

    fn on_abort(&mut self, source: u8, protocol: Protocol, code: u8) {
        let reason = SessionFailure::PeerAborted(AbortReason::from_code(code));
        for role in [Role::Sender, Role::Receiver] {
            self.fail((source, role, protocol), reason, None);
        }
    }

    fn on_dt(&mut self, now: u64, own_sa: u8, key: SessionKey, d: &[u8]) -> Option<ReceivedMessage> {
        let t1 = self.config.timeouts.t1_us;
        let s = self.sessions.get_mut(&key)?;
        if s.phase != Phase::AwaitData {
            let why = AbortReason::UnexpectedData;
            self.fail(key, SessionFailure::Violation(why), Some((own_sa, why)));
            return None;
        }
        let seq = d[0] as u32;
        let number = if s.protocol == Protocol::Etp { s.dpo_offset + seq } else { seq };
        if number != s.next_packet {
            let why = if number + 1 == s.next_packet { AbortReason::DuplicateSequence } else { AbortReason::BadSequence };
            self.fail(key, SessionFailure::Violation(why), Some((own_sa, why)));
            return None;
        }
        let start = (number as usize - 1) * BYTES_PER_PACKET;
        let end = (start + BYTES_PER_PACKET).min(s.total_size);
        s.buffer[start..end].copy_from_slice(&d[1..1 + end - start]);
        s.next_packet += 1;
        s.deadline = Some(now + t1);
        if number < s.window_end {
            return None;
        }
        if number < s.total_packets() {
            self.grant_window(now, own_sa, key);
            return None;
        }
        let s = self.sessions.remove(&key).expect("present");
        match s.protocol {
            Protocol::Tp => {
                let sz = (s.total_size as u16).to_le_bytes();
                let pgn = pgn_bytes(s.pgn);
                self.outbox.push(frame(
                    PGN_TP_CM,
                    s.peer_sa,
                    own_sa,
                    &[TP_EOMA, sz[0], sz[1], s.total_packets() as u8, 0xFF, pgn[0], pgn[1], pgn[2]],
                ));
            }
            Protocol::Etp => {
                let sz = (s.total_size as u32).to_le_bytes();
                let pgn = pgn_bytes(s.pgn);
                self.outbox.push(frame(PGN_ETP_CM, s.peer_sa, own_sa, &[ETP_EOMA, sz[0], sz[1], sz[2], sz[3], pgn[0], pgn[1], pgn[2]]));
            }
            Protocol::Bam => {}
        }
        let destination = if s.protocol == Protocol::Bam { GLOBAL_ADDRESS } else { own_sa };
        let msg = ReceivedMessage {
            source: s.peer_sa,
            destination,
            pgn: s.pgn,
            data: s.buffer,
            protocol: Some(s.protocol),
            windows: s.windows,
        };
        self.events.push(TransportEvent::Received(msg.clone()));
        Some(msg)
    }
}

fn abort_frame(cm_pgn: u32, destination: u8, source: u8, reason: AbortReason, pgn: u32) -> CanFrame {
    let p = pgn_bytes(pgn);
    frame(cm_pgn, destination, source, &[ABORT, reason.code(), 0xFF, 0xFF, 0xFF, p[0], p[1], p[2]])
}
