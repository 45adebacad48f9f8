#![no_main]

use ctrl_core::driver::{read_dataset, write_dataset};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(ds) = read_dataset(data) {
        let mut out = vec![];
        write_dataset(&ds.states, &ds.actions, &ds.transitions, &mut out).expect("write to memory");
        let again = read_dataset(out.as_slice()).expect("re-read");
        assert_eq!(again.transitions, ds.transitions);
    }
});
