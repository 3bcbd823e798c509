#![no_main]

use libfuzzer_sys::fuzz_target;
use riskscope_core::extraction::parse_pattern_array;

fuzz_target!(|data: &str| {
    let _ = parse_pattern_array(data);
});
