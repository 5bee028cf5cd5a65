//! Discrete-event scheduler driving nodes, the CAN bus and the datagram
//! channel from one virtual clock.
//!
//! All nodes tick on a shared 5 ms grid. At one instant the order is: bus
//! completion, datagram delivery, node ticks (in node order), arbitration.
//! CAN frames produced during a tick are handed to the controller at the
//! next tick by default, which stands in for the adapter round trip; UDP
//! datagrams leave immediately.

use std::time::{Duration, Instant};

use crate::bus::{CanBus, NodeId, VirtualClock};
use crate::can::{CanFrame, PGN_ETP_CM, PGN_ETP_DT, PGN_TP_CM, PGN_TP_DT};
use crate::channel::{ChannelConfig, DatagramChannel, SimulatedChannel};
use crate::node::{Node, NodeEvent};

pub const TICK_US: u64 = 5_000;

/// Hooks called from inside a node's tick.
pub trait Application {
    fn on_event(&mut self, _now: u64, _index: usize, _node: &mut Node, _event: &NodeEvent) {}
    fn on_tick(&mut self, _now: u64, _index: usize, _node: &mut Node) {}
}

impl Application for () {}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CanTxTiming {
    /// Frames produced in a tick reach the controller on the next tick.
    #[default]
    NextTick,
    Immediate,
}

#[derive(Debug, Clone)]
pub struct SimConfig {
    pub tick_us: u64,
    pub can_tx: CanTxTiming,
    /// Handle datagrams on arrival instead of on the next tick.
    pub immediate_datagrams: bool,
    pub channel: ChannelConfig,
    pub trace: bool,
    /// Sleep so that virtual time does not outrun wall time (for real
    /// sockets).
    pub realtime: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            tick_us: TICK_US,
            can_tx: CanTxTiming::default(),
            immediate_datagrams: false,
            channel: ChannelConfig::default(),
            trace: false,
            realtime: false,
        }
    }
}

/// Running CAN totals, split by whether a frame carries transfer data.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CanTally {
    pub frames: u64,
    pub bits: u64,
    pub data_frames: u64,
    pub data_bits: u64,
}

/// Transport frames and application payload PGNs count as data.
pub fn is_data_frame(frame: &CanFrame, payload_pgn: u32) -> bool {
    matches!(frame.id().pgn(), PGN_TP_CM | PGN_TP_DT | PGN_ETP_CM | PGN_ETP_DT) || frame.id().pgn() == payload_pgn
}

struct Slot {
    node: Node,
    staged: Vec<CanFrame>,
    online: bool,
}

pub struct Simulation<C: DatagramChannel = SimulatedChannel> {
    config: SimConfig,
    clock: VirtualClock,
    bus: CanBus,
    channel: C,
    slots: Vec<Slot>,
    next_tick: u64,
    tally: CanTally,
    payload_pgn: u32,
    wall_start: Option<Instant>,
}

impl Simulation<SimulatedChannel> {
    pub fn new(config: SimConfig) -> Self {
        let channel = SimulatedChannel::new(config.channel.clone());
        Self::with_channel(config, channel)
    }
}

impl<C: DatagramChannel> Simulation<C> {
    pub fn with_channel(config: SimConfig, channel: C) -> Self {
        let mut bus = CanBus::new();
        if config.trace {
            bus.enable_trace();
        }
        Self {
            config,
            clock: VirtualClock::new(),
            bus,
            channel,
            slots: Vec::new(),
            next_tick: 0,
            tally: CanTally::default(),
            payload_pgn: crate::can::PGN_PROPRIETARY_A,
            wall_start: None,
        }
    }

    /// Which PGN [`CanTally::data_frames`] treats as application payload.
    pub fn set_payload_pgn(&mut self, pgn: u32) {
        self.payload_pgn = pgn;
    }

    /// Attaches a node to the bus and binds its endpoint. Returns its index.
    pub fn add_node(&mut self, mut node: Node) -> Result<usize, crate::channel::ChannelError> {
        let index = self.slots.len();
        if let Some(ep) = node.endpoint() {
            let bound = self.channel.bind(ep)?;
            if bound != ep {
                node.set_endpoint(bound);
            }
        }
        self.bus.attach_node(NodeId(index as u32)).expect("indices are unique");
        self.slots.push(Slot { node, staged: Vec::new(), online: false });
        Ok(index)
    }

    pub fn now(&self) -> u64 {
        self.clock.now()
    }

    pub fn node(&self, index: usize) -> &Node {
        &self.slots[index].node
    }

    pub fn node_mut(&mut self, index: usize) -> &mut Node {
        &mut self.slots[index].node
    }

    pub fn node_count(&self) -> usize {
        self.slots.len()
    }

    pub fn bus(&self) -> &CanBus {
        &self.bus
    }

    pub fn channel(&self) -> &C {
        &self.channel
    }

    pub fn channel_mut(&mut self) -> &mut C {
        &mut self.channel
    }

    pub fn tally(&self) -> CanTally {
        self.tally
    }

    /// Starts address claiming on every node.
    pub fn start_all(&mut self) {
        let now = self.now();
        for i in 0..self.slots.len() {
            self.start_node(i, now);
        }
    }

    pub fn start_node(&mut self, index: usize, now: u64) {
        let slot = &mut self.slots[index];
        slot.online = true;
        // a FastLane node always has its endpoint, so claiming cannot fail here
        let _ = slot.node.start(now);
        self.collect(index);
    }

    /// Removes a node from the schedule without any announcement.
    pub fn set_online(&mut self, index: usize, online: bool) {
        self.slots[index].online = online;
    }

    /// Announces departure and stops ticking the node.
    pub fn depart(&mut self, index: usize) {
        self.slots[index].node.depart();
        self.collect(index);
        let staged = std::mem::take(&mut self.slots[index].staged);
        for f in staged {
            self.bus.enqueue(NodeId(index as u32), f).expect("attached");
        }
        self.slots[index].online = false;
        self.arbitrate();
    }

    fn arbitrate(&mut self) {
        self.bus.arbitrate(self.clock.now());
    }

    /// Processes every event up to and including `until`.
    pub fn run_until<A: Application>(&mut self, app: &mut A, until: u64) {
        self.run(app, until, |_, _| false);
    }

    /// Runs until `stop` returns true (checked after every tick) or `until`
    /// is reached. Returns whether `stop` fired.
    pub fn run<A: Application>(&mut self, app: &mut A, until: u64, mut stop: impl FnMut(&A, &Self) -> bool) -> bool {
        loop {
            let mut t = self.next_tick;
            if let Some(b) = self.bus.next_event() {
                t = t.min(b);
            }
            if self.config.immediate_datagrams {
                if let Some(d) = self.channel.next_delivery() {
                    t = t.min(d);
                }
            }
            if t > until {
                return false;
            }
            self.clock.advance_to(t);
            if self.bus.next_event() == Some(t) {
                if let Some(tx) = self.bus.complete() {
                    self.tally.frames += 1;
                    self.tally.bits += tx.bits as u64;
                    if is_data_frame(&tx.frame, self.payload_pgn) {
                        self.tally.data_frames += 1;
                        self.tally.data_bits += tx.bits as u64;
                    }
                }
            }
            self.channel.deliver_due(t);
            if self.config.immediate_datagrams {
                for i in 0..self.slots.len() {
                    if self.slots[i].online {
                        self.drain_datagrams(app, i, t);
                        self.collect(i);
                    }
                }
            }
            let ticked = t == self.next_tick;
            if ticked {
                self.pace(t);
                for i in 0..self.slots.len() {
                    if self.slots[i].online {
                        self.tick_node(app, i, t);
                    } else {
                        // offline controllers drop what arrives
                        let _ = self.bus.take_received(NodeId(i as u32));
                    }
                }
                self.next_tick += self.config.tick_us;
            }
            self.arbitrate();
            if ticked && stop(app, self) {
                return true;
            }
        }
    }

    fn pace(&mut self, t: u64) {
        if !self.config.realtime {
            return;
        }
        let start = *self.wall_start.get_or_insert_with(|| Instant::now() - Duration::from_micros(t));
        let target = start + Duration::from_micros(t);
        let now = Instant::now();
        if target > now {
            std::thread::sleep(target - now);
        }
    }

    fn tick_node<A: Application>(&mut self, app: &mut A, i: usize, t: u64) {
        let staged = std::mem::take(&mut self.slots[i].staged);
        for f in staged {
            self.bus.enqueue(NodeId(i as u32), f).expect("attached");
        }
        for rx in self.bus.take_received(NodeId(i as u32)).expect("attached") {
            self.slots[i].node.handle_can(t, &rx.frame);
        }
        self.drain_datagrams(app, i, t);
        self.dispatch(app, i, t);
        app.on_tick(t, i, &mut self.slots[i].node);
        self.slots[i].node.tick(t);
        self.dispatch(app, i, t);
        self.collect(i);
    }

    fn drain_datagrams<A: Application>(&mut self, app: &mut A, i: usize, t: u64) {
        let Some(ep) = self.slots[i].node.endpoint() else { return };
        while let Some(d) = self.channel.recv(ep) {
            self.slots[i].node.handle_datagram(t, d.from, &d.payload);
            if self.config.immediate_datagrams {
                self.dispatch(app, i, t);
            }
        }
    }

    fn dispatch<A: Application>(&mut self, app: &mut A, i: usize, t: u64) {
        // events raised by the application's own calls are handled in the same pass
        loop {
            let events = self.slots[i].node.take_events();
            if events.is_empty() {
                return;
            }
            for ev in &events {
                app.on_event(t, i, &mut self.slots[i].node, ev);
            }
        }
    }

    fn collect(&mut self, i: usize) {
        let t = self.clock.now();
        let slot = &mut self.slots[i];
        let from = slot.node.endpoint();
        for (to, bytes) in slot.node.take_udp_tx() {
            if let Some(from) = from {
                // oversize is impossible for 15-byte images; IO errors count as loss
                let _ = self.channel.send_datagram(t, from, to, &bytes);
            }
        }
        let frames = slot.node.take_can_tx();
        match self.config.can_tx {
            CanTxTiming::NextTick => slot.staged.extend(frames),
            CanTxTiming::Immediate => {
                for f in frames {
                    self.bus.enqueue(NodeId(i as u32), f).expect("attached");
                }
            }
        }
    }
}
