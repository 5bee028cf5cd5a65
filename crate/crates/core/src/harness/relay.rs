//! Token-ring relay: A sends a random payload to B, B forwards it to C, C
//! back to A, and A compares it with what it sent.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{build_simulation, start_network, NetworkSetup, BASE_ADDRESS};
use crate::bus::BITRATE;
use crate::can::PGN_PROPRIETARY_A;
use crate::node::{Node, NodeEvent};
use crate::sim::{Application, CanTally};
use crate::transport::{window_count, TimingProfile, TransportEvent};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelayConfig {
    pub payload_size: usize,
    pub cts_packet_count: u8,
    pub fastlane: bool,
    pub rounds: u32,
    pub seed: u64,
    pub latency_us: u64,
    pub rx_buffer_bytes: usize,
    pub profile: TimingProfile,
}

impl Default for RelayConfig {
    fn default() -> Self {
        Self {
            payload_size: 1785,
            cts_packet_count: 128,
            fastlane: true,
            rounds: 5,
            seed: 1,
            latency_us: 50,
            rx_buffer_bytes: 1 << 20,
            profile: TimingProfile::Standard,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelayReport {
    pub config: RelayConfig,
    pub rounds_completed: u32,
    pub ms_per_round: f64,
    pub round_ms: Vec<f64>,
    /// Bus load over the active round intervals, all frames.
    pub can_bus_load_percent: f64,
    /// Bus load over the same intervals from transport and payload frames.
    pub can_data_load_percent: f64,
    pub can_data_frames: u64,
    /// CTS windows granted per hop, as counted by the receivers.
    pub windows_per_hop: Option<u32>,
    pub expected_windows_per_hop: Option<u32>,
    pub verified_bytes: u64,
    pub data_errors: u64,
    pub first_diff: Option<usize>,
    pub failure: Option<String>,
    pub pass: bool,
}

struct RelayApp {
    rng: ChaCha8Rng,
    size: usize,
    rounds: u32,
    started: u32,
    completed: u32,
    in_flight: Option<(u64, Vec<u8>)>,
    round_us: Vec<u64>,
    windows: Option<u32>,
    verified: u64,
    errors: u64,
    first_diff: Option<usize>,
    failure: Option<String>,
}

impl RelayApp {
    fn done(&self) -> bool {
        self.failure.is_some() || (self.completed == self.rounds && self.in_flight.is_none())
    }

    fn forward(&mut self, node: &mut Node, to: u8, data: Vec<u8>) {
        if let Err(e) = node.send(to, PGN_PROPRIETARY_A, data) {
            self.failure.get_or_insert(format!("send to {to:#04x} failed: {e}"));
        }
    }
}

fn hop_target(index: usize) -> u8 {
    BASE_ADDRESS + ((index + 1) % 3) as u8
}

impl Application for RelayApp {
    fn on_event(&mut self, now: u64, index: usize, node: &mut Node, event: &NodeEvent) {
        match event {
            NodeEvent::Message(m) if m.pgn == PGN_PROPRIETARY_A => {
                if m.windows > 0 {
                    self.windows.get_or_insert(m.windows);
                }
                if index != 0 {
                    self.forward(node, hop_target(index), m.data.clone());
                    return;
                }
                let Some((start, sent)) = self.in_flight.take() else {
                    self.failure.get_or_insert("unsolicited payload at A".into());
                    return;
                };
                self.verified += 3 * sent.len() as u64;
                if m.data != sent {
                    self.errors += 1;
                    let diff = sent.iter().zip(&m.data).position(|(a, b)| a != b).unwrap_or(sent.len().min(m.data.len()));
                    self.first_diff.get_or_insert(diff);
                }
                self.round_us.push(now - start);
                self.completed += 1;
            }
            NodeEvent::Transport(TransportEvent::Failed { peer, reason, .. }) => {
                self.failure.get_or_insert(format!("transfer with {peer:#04x} failed: {reason:?}"));
            }
            NodeEvent::Session(ev) => {
                self.failure.get_or_insert(format!("session change during relay: {ev:?}"));
            }
            _ => {}
        }
    }

    fn on_tick(&mut self, now: u64, index: usize, node: &mut Node) {
        if index != 0 || self.in_flight.is_some() || self.started == self.rounds || self.failure.is_some() {
            return;
        }
        let mut payload = vec![0; self.size];
        self.rng.fill_bytes(&mut payload);
        self.in_flight = Some((now, payload.clone()));
        self.started += 1;
        self.forward(node, hop_target(0), payload);
    }
}

/// Generous per-round limit: ten times the CAN wire time of three hops.
fn round_limit_us(size: usize) -> u64 {
    let packets = size.div_ceil(7).max(1) as u64;
    10_000_000 + packets * 3 * 2 * 600 * 10
}

pub fn run_relay(config: &RelayConfig) -> RelayReport {
    let setup = NetworkSetup {
        nodes: 3,
        fastlane: config.fastlane,
        cts_packet_count: config.cts_packet_count,
        latency_us: config.latency_us,
        rx_buffer_bytes: config.rx_buffer_bytes,
        profile: config.profile,
        seed: config.seed,
    };
    let mut sim = build_simulation(&setup);
    let mut app = RelayApp {
        rng: ChaCha8Rng::seed_from_u64(config.seed),
        size: config.payload_size,
        rounds: config.rounds,
        started: 0,
        completed: 0,
        in_flight: None,
        round_us: Vec::new(),
        windows: None,
        verified: 0,
        errors: 0,
        first_diff: None,
        failure: None,
    };
    if config.payload_size == 0 || config.rounds == 0 {
        app.failure = Some("payload size and rounds must be at least 1".into());
    } else if start_network(&mut sim, config.fastlane).is_none() {
        app.failure = Some("network did not settle during startup".into());
    }

    // tally snapshots at the start and end of each active round
    let mut active = CanTally::default();
    let mut mark: Option<CanTally> = None;
    let mut seen = 0;
    if app.failure.is_none() {
        let limit = sim.now() + round_limit_us(config.payload_size) * config.rounds as u64;
        let finished = sim.run(&mut app, limit, |app, s| {
            let t = s.tally();
            if app.completed > seen {
                seen = app.completed;
                if let Some(m) = mark.take() {
                    active.bits += t.bits - m.bits;
                    active.frames += t.frames - m.frames;
                    active.data_bits += t.data_bits - m.data_bits;
                    active.data_frames += t.data_frames - m.data_frames;
                }
            }
            if app.in_flight.is_some() && mark.is_none() {
                mark = Some(t);
            }
            app.done()
        });
        if !finished {
            app.failure.get_or_insert("relay did not finish in time".into());
        }
    }

    let active_us: u64 = app.round_us.iter().sum();
    let load = |bits: u64| if active_us == 0 { 0.0 } else { bits as f64 * 1e6 / (BITRATE as f64 * active_us as f64) * 100.0 };
    let round_ms: Vec<f64> = app.round_us.iter().map(|&us| us as f64 / 1000.0).collect();
    let ms_per_round = if round_ms.is_empty() { 0.0 } else { round_ms.iter().sum::<f64>() / round_ms.len() as f64 };
    let expected_windows =
        (config.payload_size > 8).then(|| window_count(config.payload_size, config.cts_packet_count.max(1) as u32));
    let pass = app.failure.is_none() && app.errors == 0 && app.completed == config.rounds;
    RelayReport {
        config: config.clone(),
        rounds_completed: app.completed,
        ms_per_round,
        round_ms,
        can_bus_load_percent: load(active.bits),
        can_data_load_percent: load(active.data_bits),
        can_data_frames: active.data_frames,
        windows_per_hop: app.windows,
        expected_windows_per_hop: expected_windows,
        verified_bytes: app.verified,
        data_errors: app.errors,
        first_diff: app.first_diff,
        failure: app.failure,
        pass,
    }
}
