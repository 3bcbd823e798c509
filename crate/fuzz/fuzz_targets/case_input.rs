#![no_main]

use libfuzzer_sys::fuzz_target;
use riskscope_core::case_model::{serialize_case, CaseInput};

fuzz_target!(|data: &str| {
    if let Ok(case) = CaseInput::from_json(data) {
        let _ = serialize_case(&case);
    }
});
