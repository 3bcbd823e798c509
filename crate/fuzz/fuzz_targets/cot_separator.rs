#![no_main]

use libfuzzer_sys::fuzz_target;
use riskscope_core::flywheel::{format_law_holds, split_separator};

fuzz_target!(|data: &str| {
    if let Some((head, tail)) = split_separator(data) {
        assert!(head.len() + tail.len() <= data.len());
    }
    let _ = format_law_holds(data, &["a"], &["b"]);
});
