#![no_main]

use libfuzzer_sys::fuzz_target;
use riskscope_core::eval::parse_labels;

fuzz_target!(|data: &str| {
    let _ = parse_labels(data);
});
