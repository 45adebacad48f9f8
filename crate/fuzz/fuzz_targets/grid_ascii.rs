#![no_main]

use ctrl_core::env::{FourRoomGrid, RewardMode};
use ctrl_core::mdp::Environment;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(grid) = FourRoomGrid::from_ascii(text, RewardMode::Dense, 0.1) {
        assert!(grid.goal_state() < grid.n_states());
        let mut g = ctrl_core::rng(0);
        let s = grid.reset(&mut g);
        for a in 0..grid.n_actions() {
            let step = grid.step(&s, &ctrl_core::spaces::Point::Discrete(a), &mut g).expect("step from start");
            assert!((0.0..=1.0).contains(&step.reward));
        }
    }
});
