#![no_main]

use ctrl_core::mdp::TabularMdp;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(mdp) = TabularMdp::parse(text) {
        // anything accepted must survive its own text form
        let again = TabularMdp::parse(&mdp.to_text()).expect("re-parse of to_text");
        assert_eq!(again, mdp);
    }
});
