#![no_main]

use ctrl_cli::config::{parse, render, ConsistencyFile, GenerateFile, OfflineFile, OnlineFile};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(c) = parse::<OnlineFile>(text) {
        // the echoed config must load back to the same values
        if let Ok(echo) = render(&c) {
            assert_eq!(parse::<OnlineFile>(&echo).ok().map(|d| render(&d).ok()), Some(Some(echo)));
        }
    }
    let _ = parse::<OfflineFile>(text);
    let _ = parse::<ConsistencyFile>(text);
    let _ = parse::<GenerateFile>(text);
});
