#![no_main]

use libfuzzer_sys::fuzz_target;
use riskscope_core::gateway::MockScript;

fuzz_target!(|data: &str| {
    let _ = MockScript::parse(data);
});
