//! Dual-stack CAN + UDP point-to-point acceleration for ISO 11783 networks.
//!
//! Layers, bottom up: [`can`] identifiers and frames, the simulated [`bus`]
//! and datagram [`channel`], network management ([`netmgmt`], [`aacl`]),
//! [`transport`], the [`fastlane`] session layer, and the [`node`] that
//! combines them. [`sim`] schedules nodes on a virtual clock and
//! [`harness`] runs the relay and stress experiments.

pub mod aacl;
pub mod bus;
pub mod can;
pub mod channel;
pub mod fastlane;
pub mod harness;
pub mod netmgmt;
pub mod node;
pub mod sim;
pub mod transport;

pub use aacl::{decode_aacl, encode_aacl, AaclError, AaclObject, AaclPayload};
pub use bus::{BusStatistics, CanBus, NodeId, VirtualClock};
pub use can::{decode_can_id, encode_can_id, frame_bit_cost, is_broadcast, CanError, CanFrame, CanId};
pub use channel::{ChannelConfig, DatagramChannel, DatagramEndpoint, LoopbackChannel, SimulatedChannel};
pub use fastlane::{decode_fastlane, encode_fastlane, route_frame, FastLaneError, Medium};
pub use netmgmt::{FastLaneState, Name, PeerRecord};
pub use node::{Node, NodeConfig, NodeEvent};
pub use sim::{Application, SimConfig, Simulation};
pub use transport::{SessionHandle, TimingProfile, TransportConfig, TransportManager};
