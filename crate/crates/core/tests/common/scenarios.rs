//! Network scenarios shared by the integration tests and the acceptance
//! runner. Each panics on the first violated expectation.

use std::collections::BTreeSet;

use fastlane_core::can::{CanFrame, PGN_ADDRESS_CLAIMED, PGN_PROPRIETARY_A};
use fastlane_core::fastlane::SessionEvent;
use fastlane_core::netmgmt::{FastLaneState, LifecycleKind, Name};
use fastlane_core::node::{Node, NodeEvent};
use fastlane_core::sim::{Application, Simulation};
use fastlane_core::transport::{SessionFailure, TransportEvent};

use super::{accepted_by, is_fastlane_control, network, spec, Recorder, MS, S};

fn confirmed(sim: &Simulation, a: usize, b: usize) -> bool {
    let (sa_a, sa_b) = (sim.node(a).address(), sim.node(b).address());
    match (sa_a, sa_b) {
        (Some(sa_a), Some(sa_b)) => {
            sim.node(a).peer_state(sa_b) == Some(FastLaneState::Confirmed)
                && sim.node(b).peer_state(sa_a) == Some(FastLaneState::Confirmed)
        }
        _ => false,
    }
}

fn settle_pair(sim: &mut Simulation) -> u64 {
    sim.start_all();
    assert!(sim.run(&mut (), 5 * S, |_, s| confirmed(s, 0, 1)), "pair did not confirm");
    sim.now()
}

pub fn contention_resolves_by_name() {
    let outcome = || {
        let mut sim = network(&[spec(0x20, 0x80, true), spec(0x10, 0x80, true), spec(0x30, 0x80, false)]);
        sim.start_all();
        sim.run_until(&mut (), 2 * S);
        (0..3).map(|i| sim.node(i).address()).collect::<Vec<_>>()
    };
    let first = outcome();
    // the lowest NAME keeps the contested address, the others move up
    assert_eq!(first[1], Some(0x80));
    assert_ne!(first[0], Some(0x80));
    assert_ne!(first[2], Some(0x80));
    assert!(first.iter().all(Option::is_some));
    let distinct: BTreeSet<_> = first.iter().collect();
    assert_eq!(distinct.len(), 3);
    assert_eq!(outcome(), first);
}

pub fn every_node_knows_every_other_after_contention() {
    let mut sim = network(&[spec(0x20, 0x80, true), spec(0x10, 0x80, true)]);
    settle_pair(&mut sim);
    let a = sim.node(0).address().unwrap();
    let b = sim.node(1).address().unwrap();
    assert_eq!(sim.node(0).peers().get(b).map(|p| p.name), Some(Name(0x10)));
    assert_eq!(sim.node(1).peers().get(a).map(|p| p.name), Some(Name(0x20)));
    assert!(sim.node(0).peers().get(0x80).is_some_and(|p| p.name == Name(0x10)));
}

/// Starts a transfer from node 0 to node 1 once, at `at`.
struct OneTransfer {
    at: u64,
    size: usize,
    started: bool,
    inner: Recorder,
}

impl Application for OneTransfer {
    fn on_event(&mut self, now: u64, index: usize, node: &mut Node, event: &NodeEvent) {
        self.inner.on_event(now, index, node, event);
    }

    fn on_tick(&mut self, now: u64, index: usize, node: &mut Node) {
        if index == 0 && !self.started && now >= self.at {
            self.started = true;
            let data: Vec<u8> = (0..self.size).map(|i| i as u8).collect();
            node.send(0x81, PGN_PROPRIETARY_A, data).unwrap();
        }
    }
}

pub fn departure_removes_peer_and_closes_sessions() {
    let mut sim = network(&[spec(1, 0x80, true), spec(2, 0x81, true)]);
    let ready = settle_pair(&mut sim);
    // large enough to still be running over UDP when node 0 leaves
    let mut app = OneTransfer { at: ready + 10 * MS, size: 50_000, started: false, inner: Recorder::default() };
    sim.run_until(&mut app, ready + 30 * MS);
    assert_eq!(sim.node(1).transport().sessions().count(), 1);
    assert_eq!(sim.node(0).transport().sessions().count(), 1);

    sim.depart(0);
    let departed_at = sim.now();
    sim.run_until(&mut app, departed_at + 100 * MS);

    // the SA 252 frame went out and the peer vanished with its session
    assert!(sim
        .bus()
        .trace()
        .iter()
        .any(|t| t.frame.id().pgn() == PGN_ADDRESS_CLAIMED && t.frame.id().source_address() == 252));
    assert!(sim.node(1).peers().get(0x80).is_none());
    assert_eq!(sim.node(1).transport().sessions().count(), 0);
    assert_eq!(sim.node(0).transport().sessions().count(), 0);
    let events = &app.inner.events;
    assert!(events.iter().any(|(_, i, e)| *i == 1
        && matches!(e, NodeEvent::Lifecycle(l) if l.kind == LifecycleKind::Departed && l.sa == 0x80)));
    assert!(events.iter().any(|(_, i, e)| *i == 1
        && matches!(e, NodeEvent::Transport(TransportEvent::Failed { reason: SessionFailure::Closed, peer: 0x80, .. }))));
    assert!(!events.iter().any(|(_, i, e)| *i == 1 && matches!(e, NodeEvent::Message(_))));
}

/// Node 0 sends one numbered frame to node 1 every tick and notes the
/// session state it saw at the time.
#[derive(Default)]
struct EveryTick {
    until: u64,
    seq: u32,
    sent: Vec<(u32, Option<FastLaneState>)>,
    received: Vec<u32>,
}

impl Application for EveryTick {
    fn on_event(&mut self, _now: u64, index: usize, _node: &mut Node, event: &NodeEvent) {
        if let (1, NodeEvent::Message(m)) = (index, event) {
            if m.pgn == PGN_PROPRIETARY_A {
                self.received.push(u32::from_be_bytes(m.data[..4].try_into().unwrap()));
            }
        }
    }

    fn on_tick(&mut self, now: u64, index: usize, node: &mut Node) {
        if index != 0 || now > self.until || node.address().is_none() {
            return;
        }
        if node.peers().get(0x81).is_none() {
            return;
        }
        let state = node.peer_state(0x81);
        let mut data = self.seq.to_be_bytes().to_vec();
        data.extend([0xA5; 4]);
        node.send(0x81, PGN_PROPRIETARY_A, data).unwrap();
        self.sent.push((self.seq, state));
        self.seq += 1;
    }
}

fn can_seqs(sim: &Simulation, from_sa: u8, to_sa: u8) -> BTreeSet<u32> {
    sim.bus()
        .trace()
        .iter()
        .filter(|t| {
            let id = t.frame.id();
            id.pgn() == PGN_PROPRIETARY_A && id.source_address() == from_sa && id.destination_address() == to_sa
        })
        .map(|t| u32::from_be_bytes(t.frame.data()[..4].try_into().unwrap()))
        .collect()
}

pub fn confirmation_gates_routing() {
    let mut sim = network(&[spec(1, 0x80, true), spec(2, 0x81, true)]);
    sim.start_all();
    let mut app = EveryTick { until: 2 * S, ..Default::default() };
    sim.run_until(&mut app, 2 * S + 100 * MS);

    let on_can = can_seqs(&sim, 0x80, 0x81);
    let before: BTreeSet<u32> =
        app.sent.iter().filter(|(_, s)| *s != Some(FastLaneState::Confirmed)).map(|(q, _)| *q).collect();
    let after = app.sent.iter().filter(|(_, s)| *s == Some(FastLaneState::Confirmed)).count();
    assert!(!before.is_empty() && after > 100, "{} before, {after} after", before.len());
    // exactly the frames sent before confirmation used CAN
    assert_eq!(on_can, before);
    // Legacy and Discovered both route over CAN
    assert!(app.sent.iter().any(|(_, s)| *s == Some(FastLaneState::Discovered)));
    assert!(app.sent.iter().any(|(_, s)| *s == Some(FastLaneState::Legacy)));
    assert_eq!(app.received, (0..app.seq).collect::<Vec<_>>());
}

pub fn keepalives_hold_a_quiet_session() {
    let mut sim = network(&[spec(1, 0x80, true), spec(2, 0x81, true)]);
    let ready = settle_pair(&mut sim);
    let mut rec = Recorder::default();
    sim.run_until(&mut rec, ready + 60 * S);
    assert!(confirmed(&sim, 0, 1));
    assert!(!rec.events.iter().any(|(_, _, e)| matches!(e, NodeEvent::Session(SessionEvent::Fallback { .. }))));
    // one keepalive each way per period, nothing on CAN
    let ka = sim.node(1).datagram_counters().keepalives;
    assert!((11..=14).contains(&ka), "{ka}");
    assert!(sim.bus().trace().iter().all(|t| t.start_us <= ready));
}

/// Sends numbered frames from node 0 every 100 ms, plus transfers on demand.
#[derive(Default)]
struct Outage {
    seq: u32,
    sent: Vec<(u64, u32)>,
    received: Vec<(u64, u32)>,
    transfer_at: Vec<u64>,
    transfer_size: usize,
    transfers_done: Vec<(u64, Vec<u8>)>,
    failures: Vec<(u64, usize, SessionFailure)>,
    fallbacks: Vec<(u64, usize)>,
}

impl Outage {
    fn payload(&self) -> Vec<u8> {
        (0..self.transfer_size).map(|i| (i * 7 + 3) as u8).collect()
    }
}

impl Application for Outage {
    fn on_event(&mut self, now: u64, index: usize, _node: &mut Node, event: &NodeEvent) {
        match event {
            NodeEvent::Message(m) if index == 1 && m.data.len() == 8 => {
                self.received.push((now, u32::from_be_bytes(m.data[..4].try_into().unwrap())));
            }
            NodeEvent::Message(m) if index == 1 => self.transfers_done.push((now, m.data.clone())),
            NodeEvent::Transport(TransportEvent::Failed { reason, .. }) => self.failures.push((now, index, *reason)),
            NodeEvent::Session(SessionEvent::Fallback { .. }) => self.fallbacks.push((now, index)),
            _ => {}
        }
    }

    fn on_tick(&mut self, now: u64, index: usize, node: &mut Node) {
        if index != 0 {
            return;
        }
        if now % (100 * MS) == 0 {
            let mut data = self.seq.to_be_bytes().to_vec();
            data.extend([0x5A; 4]);
            node.send(0x81, PGN_PROPRIETARY_A, data).unwrap();
            self.sent.push((now, self.seq));
            self.seq += 1;
        }
        if self.transfer_at.first().is_some_and(|&t| now >= t) {
            self.transfer_at.remove(0);
            node.send(0x81, PGN_PROPRIETARY_A, self.payload()).unwrap();
        }
    }
}

pub fn outage_falls_back_to_can() {
    let mut sim = network(&[spec(1, 0x80, true), spec(2, 0x81, true)]);
    let ready = settle_pair(&mut sim);
    let outage = ready + 2 * S;
    let mut app = Outage { transfer_at: vec![outage - 10 * MS], transfer_size: 200_000, ..Default::default() };
    sim.run_until(&mut app, outage);
    // the transfer is mid-flight over UDP when the link drops
    assert_eq!(sim.node(0).transport().sessions().count(), 1);
    sim.channel_mut().set_link_up(super::endpoint(0), false);
    sim.run_until(&mut app, outage + 20 * S);

    // both sides give up on the session within the timeout
    assert_eq!(app.fallbacks.len(), 2, "{:?}", app.fallbacks);
    for &(t, _) in &app.fallbacks {
        assert!(t >= outage + 10 * S && t <= outage + 15 * S + 5 * MS, "fallback at {}", t - outage);
    }
    assert_eq!(sim.node(0).peer_state(0x81), Some(FastLaneState::Failed));
    assert_eq!(sim.node(1).peer_state(0x80), Some(FastLaneState::Failed));
    // the in-flight transfer failed with a reason instead of hanging
    assert!(app.failures.iter().any(|&(_, i, r)| i == 0 && !matches!(r, SessionFailure::PeerAborted(_))));
    assert!(app.transfers_done.is_empty());

    // after fallback every point-to-point frame is on CAN and arrives
    let fallback = app.fallbacks.iter().map(|&(t, _)| t).max().unwrap();
    let on_can = can_seqs(&sim, 0x80, 0x81);
    let late: Vec<u32> = app.sent.iter().filter(|&&(t, _)| t > fallback).map(|&(_, q)| q).collect();
    assert!(late.len() > 40);
    assert!(late.iter().all(|q| on_can.contains(q)));
    let got: BTreeSet<u32> = app.received.iter().map(|&(_, q)| q).collect();
    assert!(late.iter().all(|q| got.contains(q)));
    // frames sent while the link was down but the session still stood are lost
    let lost = app.sent.iter().filter(|&&(t, q)| t > outage && t <= fallback && !got.contains(&q)).count();
    assert!(lost > 0);

    // the harness re-sends the transfer; it completes over CAN
    let resend = sim.now() + 5 * MS;
    app.transfer_at.push(resend);
    app.transfer_size = 5_000;
    sim.run_until(&mut app, resend + 10 * S);
    assert_eq!(app.transfers_done.len(), 1);
    assert_eq!(app.transfers_done[0].1, app.payload());
    let tp_on_can = sim
        .bus()
        .trace()
        .iter()
        .filter(|t| t.start_us > resend && t.frame.id().pgn() == 0xC700 && t.frame.id().source_address() == 0x80)
        .count();
    assert_eq!(tp_on_can, 5_000usize.div_ceil(7));
}

pub fn failed_peer_stays_failed_until_it_claims_again() {
    let mut sim = network(&[spec(1, 0x80, true), spec(2, 0x81, true)]);
    let ready = settle_pair(&mut sim);
    sim.channel_mut().set_link_up(super::endpoint(1), false);
    sim.run_until(&mut (), ready + 20 * S);
    assert_eq!(sim.node(0).peer_state(0x81), Some(FastLaneState::Failed));
    sim.channel_mut().set_link_up(super::endpoint(1), true);
    // no autonomous retry
    sim.run_until(&mut (), ready + 60 * S);
    assert_eq!(sim.node(0).peer_state(0x81), Some(FastLaneState::Failed));
    assert_eq!(sim.node(1).peer_state(0x80), Some(FastLaneState::Failed));

    // an application restart on both sides means fresh claims and a new AACL exchange
    let now = sim.now();
    sim.start_node(0, now);
    sim.start_node(1, now);
    let mut rec = Recorder::default();
    assert!(sim.run(&mut rec, now + 5 * S, |_, s| confirmed(s, 0, 1)));
    let path: Vec<&str> = rec
        .events
        .iter()
        .filter(|(_, i, _)| *i == 0)
        .filter_map(|(_, _, e)| match e {
            NodeEvent::Lifecycle(l) if l.kind == LifecycleKind::Entered => Some("entered"),
            NodeEvent::Discovered { .. } => Some("discovered"),
            NodeEvent::Session(SessionEvent::Confirmed { .. }) => Some("confirmed"),
            _ => None,
        })
        .collect();
    assert_eq!(path, ["entered", "discovered", "confirmed"]);
    assert_eq!(sim.node(0).peers().get(0x81).unwrap().epoch, 1);
}

pub fn legacy_peer_stays_legacy() {
    let mut sim = network(&[spec(1, 0x80, true), spec(2, 0x81, false)]);
    sim.start_all();
    let mut rec = Recorder::default();
    sim.run_until(&mut rec, 5 * S);
    assert_eq!(sim.node(0).peer_state(0x81), Some(FastLaneState::Legacy));
    // the CAN-only node runs no discovery of its own
    assert_eq!(sim.node(1).peer_state(0x80), Some(FastLaneState::Legacy));
    assert!(rec.events.iter().any(|(t, i, e)| *i == 0 && matches!(e, NodeEvent::Legacy { sa: 0x81 }) && *t >= 1_250 * MS));
    assert_eq!(sim.node(0).datagram_counters().received, 0);
}

const BROADCAST_PGN: u32 = 0xFEF0;

/// Mixed traffic among nodes 0x80, 0x81 and 0x82 on a 100 ms cycle: node 0
/// acts at the top of the cycle, node 1 half way through.
#[derive(Default)]
struct Mixed {
    start: u64,
    stop: u64,
    cycle: u32,
    received: Vec<Vec<(u8, u32, Vec<u8>)>>,
    confirmed_at: Vec<(usize, u8, u64)>,
}

impl Mixed {
    fn new(start: u64, stop: u64) -> Self {
        Self { start, stop, received: vec![Vec::new(); 3], ..Default::default() }
    }

    fn payload(seed: u32, len: usize) -> Vec<u8> {
        (0..len).map(|i| (seed as usize * 31 + i * 13) as u8).collect()
    }
}

impl Application for Mixed {
    fn on_event(&mut self, now: u64, index: usize, _node: &mut Node, event: &NodeEvent) {
        match event {
            NodeEvent::Message(m) => self.received[index].push((m.source, m.pgn, m.data.clone())),
            NodeEvent::Session(SessionEvent::Confirmed { sa, .. }) => self.confirmed_at.push((index, *sa, now)),
            _ => {}
        }
    }

    fn on_tick(&mut self, now: u64, index: usize, node: &mut Node) {
        if now < self.start || now >= self.stop {
            return;
        }
        let phase = (now - self.start) % (100 * MS);
        let c = self.cycle;
        match (index, phase) {
            (0, 0) => {
                node.send(0x81, PGN_PROPRIETARY_A, Self::payload(c, 8)).unwrap();
                node.send(0x81, PGN_PROPRIETARY_A, Self::payload(c, 300)).unwrap();
                node.send(0x82, PGN_PROPRIETARY_A, Self::payload(c, 8)).unwrap();
                node.send(0xFF, BROADCAST_PGN, Self::payload(c, 8)).unwrap();
            }
            (1, 50_000) => {
                node.send(0x80, PGN_PROPRIETARY_A, Self::payload(c, 5)).unwrap();
                node.send(0x82, PGN_PROPRIETARY_A, Self::payload(c, 20)).unwrap();
                self.cycle += 1;
            }
            _ => {}
        }
    }
}

fn mixed_run(fastlane: bool) -> (Simulation, Mixed) {
    let mut sim = network(&[spec(1, 0x80, fastlane), spec(2, 0x81, fastlane), spec(3, 0x82, false)]);
    sim.start_all();
    let mut app = Mixed::new(2 * S, 8 * S);
    sim.run_until(&mut app, 9 * S);
    (sim, app)
}

fn between(f: &CanFrame, a: u8, b: u8) -> bool {
    let id = f.id();
    !id.is_broadcast()
        && ((id.source_address() == a && id.destination_address() == b)
            || (id.source_address() == b && id.destination_address() == a))
}

pub fn no_point_to_point_frames_on_can_while_confirmed() {
    let (sim, app) = mixed_run(true);
    assert_eq!(sim.node(0).peer_state(0x81), Some(FastLaneState::Confirmed));
    let confirmed = app.confirmed_at.iter().map(|&(_, _, t)| t).max().unwrap();
    assert!(confirmed < app.start);
    let leaked: Vec<_> = sim.bus().trace().iter().filter(|t| t.start_us > confirmed && between(&t.frame, 0x80, 0x81)).collect();
    assert!(leaked.is_empty(), "{} frames, first {:?}", leaked.len(), leaked[0].frame);
    // yet everything arrived
    assert_eq!(app.received[1].iter().filter(|(s, ..)| *s == 0x80).count(), 60 * 3);
    assert_eq!(app.received[0].iter().filter(|(s, ..)| *s == 0x81).count(), 60);
}

pub fn fastlane_off_puts_every_point_to_point_frame_on_can() {
    let (sim, app) = mixed_run(false);
    let trace = sim.bus().trace();
    let a_to_b = trace.iter().filter(|t| between(&t.frame, 0x80, 0x81) && t.frame.id().pgn() == PGN_PROPRIETARY_A);
    assert_eq!(a_to_b.count(), 60 * 2);
    let tp_data = trace.iter().filter(|t| t.frame.id().pgn() == 0xEB00 && t.frame.id().source_address() == 0x80).count();
    assert_eq!(tp_data, 60 * 300usize.div_ceil(7));
    assert_eq!(sim.node(0).datagram_counters().received, 0);
    assert_eq!(app.received[1].iter().filter(|(s, ..)| *s == 0x80).count(), 60 * 3);
}

pub fn legacy_node_sees_the_same_can_traffic() {
    let (on, app_on) = mixed_run(true);
    let (off, app_off) = mixed_run(false);
    let view = |sim: &Simulation| -> Vec<CanFrame> {
        accepted_by(sim.bus().trace(), 0x82).into_iter().filter(|f| !is_fastlane_control(f)).collect()
    };
    let (v_on, v_off) = (view(&on), view(&off));
    // per cycle: a single frame, a broadcast, and RTS plus three packets
    assert!(v_on.len() >= 60 * 6);
    assert_eq!(v_on, v_off);
    // the FastLane run did carry extra control traffic the legacy node ignored
    assert!(accepted_by(on.bus().trace(), 0x82).len() > v_on.len());
    assert_eq!(app_on.received[2], app_off.received[2]);
    // and the two FastLane nodes really did move their own traffic off the bus
    assert!(on.bus().total_frames() < off.bus().total_frames());
}
