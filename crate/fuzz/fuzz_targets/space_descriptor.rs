#![no_main]

use ctrl_core::spaces::Space;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let (desc, point) = text.split_once('\n').unwrap_or((text, ""));
    if let Ok(space) = Space::parse_descriptor(desc) {
        assert_eq!(Space::parse_descriptor(&space.descriptor()).expect("re-parse"), space);
        if let Ok(p) = space.parse_point(point) {
            assert_eq!(space.parse_point(&p.to_string()).expect("point round trip"), p);
        }
    }
});
