//! Experiment runner: the three-node relay, the two-node stress test, report
//! rendering and the suite driven by a TOML file.

pub mod relay;
pub mod report;
pub mod stress;
pub mod suite;

use crate::channel::{ChannelConfig, DatagramEndpoint, FASTLANE_PORT};
use crate::netmgmt::Name;
use crate::node::{Node, NodeConfig};
use crate::sim::{SimConfig, Simulation};
use crate::transport::TimingProfile;

pub use relay::{run_relay, RelayConfig, RelayReport};
pub use report::{emit_report, Format, Report};
pub use stress::{run_stress, StressConfig, StressReport};
pub use suite::{run_suite, SuiteConfig, SuiteError, SuiteReport};

/// First address of the experiment nodes; node `i` claims `BASE_ADDRESS + i`.
pub const BASE_ADDRESS: u8 = 0x80;
/// Longest wait for claims and FastLane confirmation before the run starts.
pub const STARTUP_LIMIT_US: u64 = 5_000_000;

/// Network parameters shared by both experiments.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkSetup {
    pub nodes: usize,
    pub fastlane: bool,
    pub cts_packet_count: u8,
    pub latency_us: u64,
    pub rx_buffer_bytes: usize,
    pub profile: TimingProfile,
    pub seed: u64,
}

pub fn node_name(index: usize) -> Name {
    // identity number in the low bits, a fixed manufacturer code above
    Name(0xA00C_8000_0000_0000 | (0x1000 + index as u64))
}

pub fn node_endpoint(index: usize) -> DatagramEndpoint {
    DatagramEndpoint::v4(10, 0, 0, 1 + index as u8, FASTLANE_PORT)
}

pub fn build_simulation(setup: &NetworkSetup) -> Simulation {
    let config = SimConfig {
        immediate_datagrams: setup.profile == TimingProfile::Accelerated,
        channel: ChannelConfig {
            latency_us: setup.latency_us,
            rx_buffer_bytes: setup.rx_buffer_bytes,
            seed: setup.seed,
            ..Default::default()
        },
        ..Default::default()
    };
    let mut sim = Simulation::new(config);
    for i in 0..setup.nodes {
        let endpoint = setup.fastlane.then(|| node_endpoint(i));
        let mut nc = NodeConfig::new(node_name(i), BASE_ADDRESS + i as u8, endpoint);
        nc.transport.cts_packet_count = setup.cts_packet_count;
        nc.udp_profile = setup.profile;
        sim.add_node(Node::new(nc)).expect("distinct simulated endpoints");
    }
    sim
}

/// True once every node holds its address, knows every other node, and (in
/// FastLane mode) has a Confirmed session with each of them.
pub fn network_ready(sim: &Simulation, fastlane: bool) -> bool {
    let n = sim.node_count();
    (0..n).all(|i| {
        let node = sim.node(i);
        node.address().is_some()
            && (0..n).filter(|&j| j != i).all(|j| match node.peer_state(BASE_ADDRESS + j as u8) {
                None => false,
                Some(s) => !fastlane || s == crate::netmgmt::FastLaneState::Confirmed,
            })
    })
}

/// Claims addresses and waits for the network to settle. Returns the time
/// at which it became ready, or `None` after [`STARTUP_LIMIT_US`].
pub fn start_network(sim: &mut Simulation, fastlane: bool) -> Option<u64> {
    sim.start_all();
    let limit = sim.now() + STARTUP_LIMIT_US;
    sim.run(&mut (), limit, |_, s| network_ready(s, fastlane)).then(|| sim.now())
}
