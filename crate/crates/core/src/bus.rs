//! Deterministic shared CAN medium at 250 kbit/s.
//!
//! Frames wait in per-node transmit queues. Whenever the medium is idle the
//! head-of-queue frame with the lowest raw identifier wins arbitration and
//! occupies the bus for its stuffed bit cost. On completion every other
//! attached node receives a copy.

use std::collections::{BTreeMap, VecDeque};

use thiserror::Error;

use crate::can::{frame_bit_cost, CanFrame};

pub const BITRATE: u64 = 250_000;
/// Duration of one bit in microseconds at [`BITRATE`].
pub const BIT_TIME_US: u64 = 1_000_000 / BITRATE;
/// Sliding window used for [`CanBus::statistics`].
pub const LOAD_WINDOW_US: u64 = 1_000_000;

/// Simulation time in microseconds. Only moves forward.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord)]
pub struct VirtualClock {
    now_us: u64,
}

impl VirtualClock {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn now(&self) -> u64 {
        self.now_us
    }

    /// Moves the clock to `t_us`. Earlier targets are ignored.
    pub fn advance_to(&mut self, t_us: u64) {
        debug_assert!(t_us >= self.now_us, "clock moved backwards: {} -> {}", self.now_us, t_us);
        self.now_us = self.now_us.max(t_us);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub u32);

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BusError {
    #[error("node {0:?} is already attached")]
    DuplicateNode(NodeId),
    #[error("node {0:?} is not attached")]
    UnknownNode(NodeId),
}

/// Load figures for a measurement window.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BusStatistics {
    pub window_s: f64,
    pub bits_transferred: u64,
    pub frames_transferred: u64,
    pub load_percent: f64,
}

impl BusStatistics {
    pub fn from_bits(bits: u64, frames: u64, window_us: u64) -> Self {
        let window_s = window_us as f64 / 1e6;
        let load_percent = if window_us == 0 { 0.0 } else { bits as f64 / (BITRATE as f64 * window_s) * 100.0 };
        Self { window_s, bits_transferred: bits, frames_transferred: frames, load_percent }
    }
}

/// A frame that has finished transmission.
#[derive(Debug, Clone)]
pub struct Transmission {
    pub from: NodeId,
    pub frame: CanFrame,
    pub start_us: u64,
    pub end_us: u64,
    pub bits: u32,
}

#[derive(Debug, Clone, Copy)]
pub struct ReceivedFrame {
    pub from: NodeId,
    pub frame: CanFrame,
    pub at_us: u64,
}

struct Attachment {
    node: NodeId,
    tx: VecDeque<CanFrame>,
    rx: VecDeque<ReceivedFrame>,
}

#[derive(Default)]
struct BusMeter {
    total_bits: u64,
    total_frames: u64,
    // (start, end, bits) for transmissions that may still overlap the window
    recent: VecDeque<(u64, u64, u32)>,
}

impl BusMeter {
    fn record(&mut self, t: &Transmission) {
        self.total_bits += t.bits as u64;
        self.total_frames += 1;
        self.recent.push_back((t.start_us, t.end_us, t.bits));
        let horizon = t.end_us.saturating_sub(LOAD_WINDOW_US);
        while self.recent.front().is_some_and(|&(_, end, _)| end <= horizon) {
            self.recent.pop_front();
        }
    }

    fn window(&self, now: u64) -> BusStatistics {
        let from = now.saturating_sub(LOAD_WINDOW_US);
        let mut busy_us = 0;
        let mut frames = 0;
        for &(start, end, _) in &self.recent {
            let lo = start.max(from);
            let hi = end.min(now);
            if hi > lo {
                busy_us += hi - lo;
            }
            if end > from && end <= now {
                frames += 1;
            }
        }
        BusStatistics::from_bits(busy_us / BIT_TIME_US, frames, now - from)
    }
}

struct InFlight {
    index: usize,
    frame: CanFrame,
    start_us: u64,
    end_us: u64,
    bits: u32,
}

pub struct CanBus {
    attachments: Vec<Attachment>,
    index: BTreeMap<NodeId, usize>,
    in_flight: Option<InFlight>,
    meter: BusMeter,
    trace: Option<Vec<Transmission>>,
}

impl Default for CanBus {
    fn default() -> Self {
        Self::new()
    }
}

impl CanBus {
    pub fn new() -> Self {
        Self { attachments: Vec::new(), index: BTreeMap::new(), in_flight: None, meter: BusMeter::default(), trace: None }
    }

    /// Keeps every completed transmission for later inspection.
    pub fn enable_trace(&mut self) {
        self.trace.get_or_insert_with(Vec::new);
    }

    pub fn trace(&self) -> &[Transmission] {
        self.trace.as_deref().unwrap_or(&[])
    }

    pub fn attach_node(&mut self, node: NodeId) -> Result<(), BusError> {
        if self.index.contains_key(&node) {
            return Err(BusError::DuplicateNode(node));
        }
        self.index.insert(node, self.attachments.len());
        self.attachments.push(Attachment { node, tx: VecDeque::new(), rx: VecDeque::new() });
        Ok(())
    }

    fn slot(&self, node: NodeId) -> Result<usize, BusError> {
        self.index.get(&node).copied().ok_or(BusError::UnknownNode(node))
    }

    pub fn enqueue(&mut self, node: NodeId, frame: CanFrame) -> Result<(), BusError> {
        let i = self.slot(node)?;
        self.attachments[i].tx.push_back(frame);
        Ok(())
    }

    pub fn pending(&self) -> usize {
        self.attachments.iter().map(|a| a.tx.len()).sum::<usize>() + self.in_flight.is_some() as usize
    }

    /// Completion time of the frame currently on the medium.
    pub fn next_event(&self) -> Option<u64> {
        self.in_flight.as_ref().map(|f| f.end_us)
    }

    /// Starts the arbitration winner if the medium is idle. Returns the time
    /// at which it completes.
    pub fn arbitrate(&mut self, now: u64) -> Option<u64> {
        if self.in_flight.is_some() {
            return None;
        }
        let (index, _) = self
            .attachments
            .iter()
            .enumerate()
            .filter_map(|(i, a)| a.tx.front().map(|f| (i, f.id().raw())))
            .min_by_key(|&(i, raw)| (raw, i))?;
        let frame = self.attachments[index].tx.pop_front().expect("head exists");
        let bits = frame_bit_cost(&frame);
        let end_us = now + bits as u64 * BIT_TIME_US;
        self.in_flight = Some(InFlight { index, frame, start_us: now, end_us, bits });
        Some(end_us)
    }

    /// Finishes the in-flight frame and hands it to every other node.
    pub fn complete(&mut self) -> Option<Transmission> {
        let f = self.in_flight.take()?;
        let from = self.attachments[f.index].node;
        for (i, a) in self.attachments.iter_mut().enumerate() {
            if i != f.index {
                a.rx.push_back(ReceivedFrame { from, frame: f.frame, at_us: f.end_us });
            }
        }
        let t = Transmission { from, frame: f.frame, start_us: f.start_us, end_us: f.end_us, bits: f.bits };
        self.meter.record(&t);
        if let Some(trace) = &mut self.trace {
            trace.push(t.clone());
        }
        Some(t)
    }

    /// Transmits one frame and advances `clock` to its end. Returns `None`
    /// without touching the clock when nothing is pending.
    pub fn step(&mut self, clock: &mut VirtualClock) -> Option<Transmission> {
        if self.in_flight.is_none() {
            self.arbitrate(clock.now())?;
        }
        let end = self.next_event()?;
        clock.advance_to(end);
        self.complete()
    }

    pub fn take_received(&mut self, node: NodeId) -> Result<Vec<ReceivedFrame>, BusError> {
        let i = self.slot(node)?;
        Ok(self.attachments[i].rx.drain(..).collect())
    }

    /// Load over the sliding one-second window ending at `now`.
    pub fn statistics(&self, now: u64) -> BusStatistics {
        self.meter.window(now)
    }

    /// Cumulative bits of all completed transmissions.
    pub fn total_bits(&self) -> u64 {
        self.meter.total_bits
    }

    pub fn total_frames(&self) -> u64 {
        self.meter.total_frames
    }
}
