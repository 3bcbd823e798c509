#![no_main]

use libfuzzer_sys::fuzz_target;
use std::path::Path;

use riskscope_core::eval::GoldCase;
use riskscope_core::jsonl::parse_lines;
use riskscope_core::kb::KbEntry;

fuzz_target!(|data: &str| {
    let origin = Path::new("fuzz.jsonl");
    let _ = parse_lines::<KbEntry>(data, origin);
    let _ = parse_lines::<GoldCase>(data, origin);
});
