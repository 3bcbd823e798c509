#![no_main]

use libfuzzer_sys::fuzz_target;
use riskscope_core::extraction::parse_scenario_sections;

fuzz_target!(|data: &str| {
    let _ = parse_scenario_sections(data);
});
