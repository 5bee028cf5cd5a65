//! Two nodes over real UDP sockets on 127.0.0.1, with the CAN simulator
//! paced against the wall clock.

use fastlane_core::can::PGN_PROPRIETARY_A;
use fastlane_core::channel::{DatagramChannel, DatagramEndpoint, LoopbackChannel};
use fastlane_core::netmgmt::{FastLaneState, Name};
use fastlane_core::node::{Node, NodeConfig, NodeEvent};
use fastlane_core::sim::{Application, SimConfig, Simulation};

#[derive(Default)]
struct Collect {
    payloads: Vec<Vec<u8>>,
}

impl Application for Collect {
    fn on_event(&mut self, _now: u64, index: usize, _node: &mut Node, event: &NodeEvent) {
        if let (1, NodeEvent::Message(m)) = (index, event) {
            self.payloads.push(m.data.clone());
        }
    }
}

#[test]
fn transfer_over_loopback_sockets() {
    let config = SimConfig { realtime: true, ..Default::default() };
    let mut sim = Simulation::with_channel(config, LoopbackChannel::new());
    let any_port = DatagramEndpoint::v4(127, 0, 0, 1, 0);
    for (i, name) in [11u64, 12].into_iter().enumerate() {
        let index = sim.add_node(Node::new(NodeConfig::new(Name(name), 0x80 + i as u8, Some(any_port)))).unwrap();
        // the ephemeral port is what gets announced
        assert_ne!(sim.node(index).endpoint().unwrap().port(), 0);
    }
    sim.start_all();
    let ready = sim.run(&mut (), 3_000_000, |_, s| {
        s.node(0).peer_state(0x81) == Some(FastLaneState::Confirmed)
            && s.node(1).peer_state(0x80) == Some(FastLaneState::Confirmed)
    });
    assert!(ready, "no session over loopback");

    let data: Vec<u8> = (0..1785u32).map(|i| (i * 5) as u8).collect();
    let frames_before = sim.bus().total_frames();
    sim.node_mut(0).send(0x81, PGN_PROPRIETARY_A, data.clone()).unwrap();
    let mut app = Collect::default();
    let until = sim.now() + 2_000_000;
    assert!(sim.run(&mut app, until, |a, _| !a.payloads.is_empty()));
    assert_eq!(app.payloads, [data]);
    assert_eq!(sim.bus().total_frames(), frames_before);
    assert!(sim.channel().stats().delivered > 20);
}
