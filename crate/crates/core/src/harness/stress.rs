//! Bidirectional stress test: two nodes send fixed-rate 8-byte frames to
//! each other every tick and count what arrives.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{build_simulation, start_network, NetworkSetup, BASE_ADDRESS};
use crate::bus::BITRATE;
use crate::can::{NOMINAL_FRAME_BITS, PGN_PROPRIETARY_A};
use crate::channel::DatagramChannel;
use crate::node::{Node, NodeEvent};
use crate::sim::{Application, TICK_US};
use crate::transport::TimingProfile;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StressConfig {
    pub frames_per_tick: u32,
    pub duration_ms: u64,
    pub grace_ms: u64,
    pub fastlane: bool,
    pub seed: u64,
    pub latency_us: u64,
    pub rx_buffer_bytes: usize,
    pub profile: TimingProfile,
}

impl Default for StressConfig {
    fn default() -> Self {
        Self {
            frames_per_tick: 10,
            duration_ms: 10_000,
            grace_ms: 500,
            fastlane: true,
            seed: 1,
            latency_us: 50,
            rx_buffer_bytes: 1 << 20,
            profile: TimingProfile::Standard,
        }
    }
}

impl StressConfig {
    /// Messages per second per node.
    pub fn rate(&self) -> u64 {
        self.frames_per_tick as u64 * (1_000_000 / TICK_US)
    }

    /// Bus load the same traffic would need on CAN at the nominal frame size.
    pub fn equivalent_can_load_percent(&self) -> f64 {
        (self.rate() * 2 * NOMINAL_FRAME_BITS as u64) as f64 / BITRATE as f64 * 100.0
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DirectionStats {
    pub sent: u64,
    pub received: u64,
    /// Sequence numbers that did not increase.
    pub out_of_order: u64,
}

impl DirectionStats {
    pub fn loss_percent(&self) -> f64 {
        if self.sent == 0 {
            0.0
        } else {
            (self.sent.saturating_sub(self.received)) as f64 / self.sent as f64 * 100.0
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StressReport {
    pub config: StressConfig,
    pub rate: u64,
    pub a_to_b: DirectionStats,
    pub b_to_a: DirectionStats,
    pub loss_percent: f64,
    pub can_bus_load_percent: f64,
    pub mean_frame_bits: f64,
    pub equivalent_can_load_percent: f64,
    pub datagrams_dropped: u64,
    pub failure: Option<String>,
    pub pass: bool,
}

struct StressApp {
    rng: ChaCha8Rng,
    per_tick: u32,
    send_until: u64,
    // indexed by sender
    dirs: [DirectionStats; 2],
    next_seq: [u32; 2],
    last_seen: [Option<u32>; 2],
    failure: Option<String>,
}

impl Application for StressApp {
    fn on_event(&mut self, _now: u64, index: usize, _node: &mut Node, event: &NodeEvent) {
        let NodeEvent::Message(m) = event else { return };
        if m.pgn != PGN_PROPRIETARY_A || m.data.len() != 8 {
            return;
        }
        let sender = 1 - index;
        if m.data[0] != m.source || m.source != BASE_ADDRESS + sender as u8 {
            self.failure.get_or_insert(format!("frame at node {index} claims sender {:#04x}", m.data[0]));
            return;
        }
        let seq = u32::from_be_bytes([m.data[1], m.data[2], m.data[3], m.data[4]]);
        let d = &mut self.dirs[sender];
        d.received += 1;
        if self.last_seen[sender].is_some_and(|last| seq <= last) {
            d.out_of_order += 1;
        }
        self.last_seen[sender] = Some(seq);
    }

    fn on_tick(&mut self, now: u64, index: usize, node: &mut Node) {
        if now >= self.send_until {
            return;
        }
        let peer = BASE_ADDRESS + (1 - index) as u8;
        for _ in 0..self.per_tick {
            let seq = self.next_seq[index];
            let mut data = [0u8; 8];
            // the sender identifier is the source address
            data[0] = BASE_ADDRESS + index as u8;
            data[1..5].copy_from_slice(&seq.to_be_bytes());
            self.rng.fill_bytes(&mut data[5..]);
            match node.send(peer, PGN_PROPRIETARY_A, data.to_vec()) {
                Ok(_) => {
                    self.next_seq[index] += 1;
                    self.dirs[index].sent += 1;
                }
                Err(e) => {
                    self.failure.get_or_insert(format!("send failed: {e}"));
                    return;
                }
            }
        }
    }
}

pub fn run_stress(config: &StressConfig) -> StressReport {
    let setup = NetworkSetup {
        nodes: 2,
        fastlane: config.fastlane,
        cts_packet_count: 16,
        latency_us: config.latency_us,
        rx_buffer_bytes: config.rx_buffer_bytes,
        profile: config.profile,
        seed: config.seed,
    };
    let mut sim = build_simulation(&setup);
    let mut app = StressApp {
        rng: ChaCha8Rng::seed_from_u64(config.seed),
        per_tick: config.frames_per_tick,
        send_until: 0,
        dirs: [DirectionStats::default(); 2],
        next_seq: [0; 2],
        last_seen: [None; 2],
        failure: None,
    };
    let mut load = 0.0;
    let mut mean_bits = 0.0;
    if config.frames_per_tick == 0 {
        app.failure = Some("frames per tick must be at least 1".into());
    } else if let Some(ready) = start_network(&mut sim, config.fastlane) {
        // sending starts on the tick after the network settled
        let start = ready + TICK_US;
        let duration_us = config.duration_ms * 1000;
        app.send_until = start + duration_us;
        sim.run_until(&mut app, start.saturating_sub(1));
        let before = sim.tally();
        let end = app.send_until;
        sim.run_until(&mut app, end - 1);
        let during = sim.tally();
        sim.run_until(&mut app, end + config.grace_ms * 1000);
        let bits = during.bits - before.bits;
        let frames = during.frames - before.frames;
        load = bits as f64 / (BITRATE as f64 * duration_us as f64 / 1e6) * 100.0;
        mean_bits = if frames == 0 { 0.0 } else { bits as f64 / frames as f64 };
    } else {
        app.failure = Some("network did not settle during startup".into());
    }

    let [a_to_b, b_to_a] = app.dirs;
    let sent = a_to_b.sent + b_to_a.sent;
    let received = a_to_b.received + b_to_a.received;
    let loss_percent = if sent == 0 { 0.0 } else { sent.saturating_sub(received) as f64 / sent as f64 * 100.0 };
    let ordered = a_to_b.out_of_order == 0 && b_to_a.out_of_order == 0;
    let pass = app.failure.is_none() && sent > 0 && received == sent && ordered;
    StressReport {
        config: config.clone(),
        rate: config.rate(),
        a_to_b,
        b_to_a,
        loss_percent,
        can_bus_load_percent: load,
        mean_frame_bits: mean_bits,
        equivalent_can_load_percent: config.equivalent_can_load_percent(),
        datagrams_dropped: sim.channel().stats().dropped(),
        failure: app.failure,
        pass,
    }
}
