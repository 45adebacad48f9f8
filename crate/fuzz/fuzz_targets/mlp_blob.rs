#![no_main]

use ctrl_core::diffnet::Mlp;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(net) = Mlp::from_bytes(data) {
        let back = Mlp::from_bytes(&net.to_bytes()).expect("round trip");
        assert_eq!(back.to_bytes(), net.to_bytes());
    }
});
