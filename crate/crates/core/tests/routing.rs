mod common;

use common::scenarios;

#[test]
fn no_point_to_point_frames_on_can_while_confirmed() {
    scenarios::no_point_to_point_frames_on_can_while_confirmed();
}

#[test]
fn fastlane_off_puts_every_point_to_point_frame_on_can() {
    scenarios::fastlane_off_puts_every_point_to_point_frame_on_can();
}

#[test]
fn legacy_node_sees_the_same_can_traffic() {
    scenarios::legacy_node_sees_the_same_can_traffic();
}
