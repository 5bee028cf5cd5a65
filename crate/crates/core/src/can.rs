//! CAN 2.0B extended frames and the J1939 view of the 29-bit identifier.
//!
//! ```text
//! | Priority | EDP | DP | PF | PS (DA or group extension) | SA |
//! |   3 bit  | 1b  | 1b | 8b |            8b              | 8b |
//! ```
//!
//! PDU1 (PF < 240) is destination specific, PS carries the destination
//! address and the PGN low byte is zero. PDU2 (PF >= 240) is always
//! broadcast and PS is part of the PGN.

use std::fmt;

use thiserror::Error;

/// Address Claimed.
pub const PGN_ADDRESS_CLAIMED: u32 = 0xEE00;
/// Request.
pub const PGN_REQUEST: u32 = 0xEA00;
/// Augmented Address Claim (prototype PF 75).
pub const PGN_AACL: u32 = 0x4B00;
/// Transport Protocol connection management.
pub const PGN_TP_CM: u32 = 0xEC00;
/// Transport Protocol data transfer.
pub const PGN_TP_DT: u32 = 0xEB00;
/// Extended Transport Protocol connection management.
pub const PGN_ETP_CM: u32 = 0xC800;
/// Extended Transport Protocol data transfer.
pub const PGN_ETP_DT: u32 = 0xC700;
/// Proprietary A, destination specific.
pub const PGN_PROPRIETARY_A: u32 = 0xEF00;

pub const GLOBAL_ADDRESS: u8 = 0xFF;
pub const NULL_ADDRESS: u8 = 0xFE;
/// Pseudo source address used by presence heartbeats.
pub const PRESENCE_ADDRESS: u8 = 0xFD;
/// Pseudo source address used by departure announcements.
pub const DEPARTURE_ADDRESS: u8 = 0xFC;

pub const MAX_PGN: u32 = 0x3_FFFF;
pub const MAX_RAW_ID: u32 = 0x1FFF_FFFF;
pub const MAX_DLC: usize = 8;

/// Nominal size of an 8-byte extended frame used for capacity arithmetic.
pub const NOMINAL_FRAME_BITS: u32 = 135;

/// Bits after the CRC field that are never stuffed: CRC delimiter, ACK slot,
/// ACK delimiter, end of frame (7) and interframe space (3).
pub const UNSTUFFED_TAIL_BITS: u32 = 1 + 1 + 1 + 7 + 3;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CanError {
    #[error("priority {0} out of range 0..=7")]
    Priority(u8),
    #[error("PGN {0:#x} out of range")]
    Pgn(u32),
    #[error("PDU1 PGN {0:#x} has a non-zero low byte")]
    Pdu1LowByte(u32),
    #[error("PDU2 PGN {pgn:#x} cannot carry destination {da:#04x}")]
    Pdu2Destination { pgn: u32, da: u8 },
    #[error("raw identifier {0:#x} exceeds 29 bits")]
    RawId(u32),
    #[error("data length {0} exceeds 8 bytes")]
    Dlc(usize),
}

/// A J1939 identifier split into its logical parts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CanId {
    priority: u8,
    pgn: u32,
    destination_address: u8,
    source_address: u8,
}

impl CanId {
    /// Builds and validates an identifier. PDU2 PGNs must use the global
    /// destination.
    pub fn new(priority: u8, pgn: u32, destination_address: u8, source_address: u8) -> Result<Self, CanError> {
        if priority > 7 {
            return Err(CanError::Priority(priority));
        }
        if pgn > MAX_PGN {
            return Err(CanError::Pgn(pgn));
        }
        if pdu_format(pgn) < 240 {
            if pgn & 0xFF != 0 {
                return Err(CanError::Pdu1LowByte(pgn));
            }
        } else if destination_address != GLOBAL_ADDRESS {
            return Err(CanError::Pdu2Destination { pgn, da: destination_address });
        }
        Ok(Self { priority, pgn, destination_address, source_address })
    }

    /// Broadcast identifier for a PDU2 PGN.
    pub fn broadcast(priority: u8, pgn: u32, source_address: u8) -> Result<Self, CanError> {
        Self::new(priority, pgn, GLOBAL_ADDRESS, source_address)
    }

    /// Decodes a raw 29-bit identifier.
    pub fn from_raw(raw: u32) -> Result<Self, CanError> {
        if raw > MAX_RAW_ID {
            return Err(CanError::RawId(raw));
        }
        let priority = ((raw >> 26) & 0x7) as u8;
        let page = (raw >> 24) & 0x3;
        let pf = (raw >> 16) & 0xFF;
        let ps = ((raw >> 8) & 0xFF) as u8;
        let source_address = (raw & 0xFF) as u8;
        let (pgn, destination_address) = if pf >= 240 {
            ((page << 16) | (pf << 8) | ps as u32, GLOBAL_ADDRESS)
        } else {
            ((page << 16) | (pf << 8), ps)
        };
        Ok(Self { priority, pgn, destination_address, source_address })
    }

    /// The raw 29-bit identifier.
    pub fn raw(&self) -> u32 {
        let ps = if self.is_pdu1() { self.destination_address as u32 } else { self.pgn & 0xFF };
        ((self.priority as u32) << 26) | ((self.pgn >> 8) << 16) | (ps << 8) | self.source_address as u32
    }

    pub fn priority(&self) -> u8 {
        self.priority
    }

    pub fn pgn(&self) -> u32 {
        self.pgn
    }

    /// Destination address; 255 for PDU2.
    pub fn destination_address(&self) -> u8 {
        self.destination_address
    }

    pub fn source_address(&self) -> u8 {
        self.source_address
    }

    pub fn pdu_format(&self) -> u8 {
        pdu_format(self.pgn)
    }

    pub fn is_pdu1(&self) -> bool {
        self.pdu_format() < 240
    }

    /// PDU2, or PDU1 sent to the global address.
    pub fn is_broadcast(&self) -> bool {
        !self.is_pdu1() || self.destination_address == GLOBAL_ADDRESS
    }
}

impl fmt::Display for CanId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:08X}", self.raw())
    }
}

fn pdu_format(pgn: u32) -> u8 {
    ((pgn >> 8) & 0xFF) as u8
}

/// Encodes an identifier to its raw 29-bit form, validating every field.
pub fn encode_can_id(priority: u8, pgn: u32, destination_address: u8, source_address: u8) -> Result<u32, CanError> {
    CanId::new(priority, pgn, destination_address, source_address).map(|id| id.raw())
}

pub fn decode_can_id(raw: u32) -> Result<CanId, CanError> {
    CanId::from_raw(raw)
}

pub fn is_broadcast(id: &CanId) -> bool {
    id.is_broadcast()
}

/// An extended data frame with 0 to 8 payload bytes.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct CanFrame {
    id: CanId,
    dlc: u8,
    data: [u8; MAX_DLC],
}

impl CanFrame {
    pub fn new(id: CanId, data: &[u8]) -> Result<Self, CanError> {
        if data.len() > MAX_DLC {
            return Err(CanError::Dlc(data.len()));
        }
        let mut buf = [0u8; MAX_DLC];
        buf[..data.len()].copy_from_slice(data);
        Ok(Self { id, dlc: data.len() as u8, data: buf })
    }

    pub fn id(&self) -> CanId {
        self.id
    }

    pub fn dlc(&self) -> usize {
        self.dlc as usize
    }

    pub fn data(&self) -> &[u8] {
        &self.data[..self.dlc as usize]
    }
}

impl fmt::Debug for CanFrame {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} [{}]", self.id, self.dlc)?;
        for b in self.data() {
            write!(f, " {b:02X}")?;
        }
        Ok(())
    }
}

/// MSB-first bit accumulator. The stuffable part of an extended frame is at
/// most 118 bits, so a `u128` holds it.
#[derive(Default)]
struct Bits {
    word: u128,
    len: u32,
}

impl Bits {
    fn push(&mut self, value: u32, width: u32) {
        self.word = (self.word << width) | (value as u128 & ((1u128 << width) - 1));
        self.len += width;
    }

    fn iter(&self) -> impl Iterator<Item = bool> + '_ {
        (0..self.len).rev().map(move |i| (self.word >> i) & 1 == 1)
    }
}

fn crc15(bits: impl Iterator<Item = bool>) -> u32 {
    let mut crc: u32 = 0;
    for bit in bits {
        let feedback = bit ^ ((crc >> 14) & 1 == 1);
        crc = (crc << 1) & 0x7FFF;
        if feedback {
            crc ^= 0x4599;
        }
    }
    crc
}

/// Number of bits the frame occupies on the wire, including stuff bits,
/// the unstuffed tail and a 3-bit interframe space.
///
/// SOF through CRC are serialized and stuffed (a complementary bit after
/// every five equal bits). The CRC is computed over the real bits so its
/// own stuffing is exact.
pub fn frame_bit_cost(frame: &CanFrame) -> u32 {
    let raw = frame.id.raw();
    let mut bits = Bits::default();
    bits.push(0, 1); // SOF
    bits.push(raw >> 18, 11); // base identifier
    bits.push(1, 1); // SRR
    bits.push(1, 1); // IDE
    bits.push(raw & 0x3_FFFF, 18); // identifier extension
    bits.push(0, 1); // RTR
    bits.push(0, 2); // r1, r0
    bits.push(frame.dlc as u32, 4);
    for &b in frame.data() {
        bits.push(b as u32, 8);
    }
    let crc = crc15(bits.iter());
    bits.push(crc, 15);

    let mut stuffed = 0;
    let mut run = 0;
    let mut last = None;
    for bit in bits.iter() {
        if Some(bit) == last {
            run += 1;
        } else {
            last = Some(bit);
            run = 1;
        }
        if run == 5 {
            stuffed += 1;
            last = Some(!bit);
            run = 1;
        }
    }
    bits.len + stuffed + UNSTUFFED_TAIL_BITS
}
