#![no_main]

use libfuzzer_sys::fuzz_target;
use riskscope_core::extraction::parse_score;

fuzz_target!(|data: &str| {
    if let Some(s) = parse_score(data) {
        assert!((1..=5).contains(&s));
    }
});
