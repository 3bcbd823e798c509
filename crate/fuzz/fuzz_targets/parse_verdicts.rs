#![no_main]

use libfuzzer_sys::fuzz_target;
use riskscope_core::rnr::parse_verdicts;

fuzz_target!(|data: &str| {
    let strict = parse_verdicts(data, false);
    let lenient = parse_verdicts(data, true);
    // anything the strict parser accepts, the lenient one accepts too
    if strict.is_ok() {
        assert!(lenient.is_ok());
    }
});
