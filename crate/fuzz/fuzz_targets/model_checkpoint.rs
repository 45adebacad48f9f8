#![no_main]

use ctrl_core::lowrank::LowRankModel;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(model) = LowRankModel::from_bytes(data) {
        let back = LowRankModel::from_bytes(&model.to_bytes()).expect("round trip");
        assert_eq!(back.to_bytes(), model.to_bytes());
    }
});
