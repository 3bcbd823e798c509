#![no_main]

use libfuzzer_sys::fuzz_target;
use riskscope_core::text::extract_json_array;

fuzz_target!(|data: &str| {
    let _ = extract_json_array(data);
});
