#![allow(dead_code)]

use fastlane_core::bus::Transmission;
use fastlane_core::can::{CanFrame, CanId, GLOBAL_ADDRESS, PGN_AACL, PGN_REQUEST, PRESENCE_ADDRESS};
use fastlane_core::channel::{ChannelConfig, DatagramEndpoint};
use fastlane_core::netmgmt::Name;
use fastlane_core::node::{Node, NodeConfig, NodeEvent};
use fastlane_core::sim::{Application, SimConfig, Simulation};

pub mod scenarios;

/// Serializes SOF through CRC of an extended data frame, one bool per bit,
/// following the frame layout directly: SOF, 11-bit base id, SRR, IDE,
/// 18-bit id extension, RTR, r1, r0, DLC, data, CRC-15.
pub fn frame_bits(raw_id: u32, data: &[u8]) -> Vec<bool> {
    fn put(bits: &mut Vec<bool>, value: u64, width: usize) {
        for i in (0..width).rev() {
            bits.push((value >> i) & 1 == 1);
        }
    }
    let mut bits = vec![false];
    put(&mut bits, (raw_id >> 18) as u64, 11);
    bits.push(true);
    bits.push(true);
    put(&mut bits, (raw_id & 0x3FFFF) as u64, 18);
    bits.extend([false, false, false]);
    put(&mut bits, data.len() as u64, 4);
    for &b in data {
        put(&mut bits, b as u64, 8);
    }
    let crc = crc15_long_division(&bits);
    bits.extend(crc);
    bits
}

/// Remainder of M(x) * x^15 modulo x^15 + x^14 + x^10 + x^8 + x^7 + x^4 + x^3 + 1.
pub fn crc15_long_division(message: &[bool]) -> Vec<bool> {
    let generator: Vec<bool> = (0..16).rev().map(|i| (0xC599u32 >> i) & 1 == 1).collect();
    let mut work: Vec<bool> = message.to_vec();
    work.extend(std::iter::repeat_n(false, 15));
    for i in 0..message.len() {
        if work[i] {
            for (j, g) in generator.iter().enumerate() {
                work[i + j] ^= g;
            }
        }
    }
    work[message.len()..].to_vec()
}

/// Inserts a complementary bit after every run of five equal bits.
pub fn stuff(bits: &[bool]) -> Vec<bool> {
    let mut out = Vec::with_capacity(bits.len() + bits.len() / 4);
    let mut run = 0;
    for &b in bits {
        if out.last() == Some(&b) {
            run += 1;
        } else {
            run = 1;
        }
        out.push(b);
        if run == 5 {
            out.push(!b);
            run = 1;
        }
    }
    out
}

/// CRC delimiter, ACK slot, ACK delimiter, 7-bit EOF and 3-bit interframe space.
pub const TAIL_BITS: usize = 1 + 1 + 1 + 7 + 3;

pub fn oracle_bit_cost(raw_id: u32, data: &[u8]) -> u32 {
    (stuff(&frame_bits(raw_id, data)).len() + TAIL_BITS) as u32
}

/// The 15-byte datagram image spelled out field by field.
pub fn oracle_image(raw_id: u32, data: &[u8]) -> Vec<u8> {
    let mut img = vec![0x01, 0x01, (raw_id >> 24) as u8, (raw_id >> 16) as u8, (raw_id >> 8) as u8, raw_id as u8];
    img.push(data.len() as u8);
    img.extend_from_slice(data);
    while img.len() < 15 {
        img.push(0xFF);
    }
    img
}

/// Number of CTS windows, counted by walking the transfer.
pub fn oracle_windows(size: usize, cts: usize) -> usize {
    let mut packets = 0;
    let mut sent = 0;
    while sent < size {
        sent += 7;
        packets += 1;
    }
    let mut windows = 0;
    while packets > 0 {
        packets -= packets.min(cts);
        windows += 1;
    }
    windows
}

pub const MS: u64 = 1_000;
pub const S: u64 = 1_000_000;
pub const PORT: u16 = 11783;

pub fn endpoint(i: u8) -> DatagramEndpoint {
    DatagramEndpoint::v4(192, 168, 0, 10 + i, PORT)
}

/// One node of a test network.
pub struct Spec {
    pub name: u64,
    pub sa: u8,
    pub fastlane: bool,
}

pub fn spec(name: u64, sa: u8, fastlane: bool) -> Spec {
    Spec { name, sa, fastlane }
}

/// A traced simulation with the given nodes; node `i` binds `endpoint(i)`.
pub fn network(specs: &[Spec]) -> Simulation {
    let config = SimConfig { trace: true, channel: ChannelConfig { latency_us: 50, ..Default::default() }, ..Default::default() };
    let mut sim = Simulation::new(config);
    for (i, s) in specs.iter().enumerate() {
        let ep = s.fastlane.then(|| endpoint(i as u8));
        sim.add_node(Node::new(NodeConfig::new(Name(s.name), s.sa, ep))).unwrap();
    }
    sim
}

/// Records every event together with the node index and time.
#[derive(Default)]
pub struct Recorder {
    pub events: Vec<(u64, usize, NodeEvent)>,
}

impl Application for Recorder {
    fn on_event(&mut self, now: u64, index: usize, _node: &mut Node, event: &NodeEvent) {
        self.events.push((now, index, event.clone()));
    }
}

/// Frames a controller at `sa` accepts: addressed to it or broadcast.
pub fn accepted_by(trace: &[Transmission], sa: u8) -> Vec<CanFrame> {
    trace
        .iter()
        .map(|t| t.frame)
        .filter(|f| {
            let da = f.id().destination_address();
            da == sa || da == GLOBAL_ADDRESS
        })
        .collect()
}

/// AACL requests and responses and presence frames.
pub fn is_fastlane_control(frame: &CanFrame) -> bool {
    let id = frame.id();
    id.pgn() == PGN_AACL
        || id.source_address() == PRESENCE_ADDRESS
        || (id.pgn() == PGN_REQUEST && frame.data().get(..3) == Some(&[0x00, 0x4B, 0x00][..]))
}

pub fn frame(priority: u8, pgn: u32, da: u8, sa: u8, data: &[u8]) -> CanFrame {
    CanFrame::new(CanId::new(priority, pgn, da, sa).unwrap(), data).unwrap()
}
