#![no_main]

use libfuzzer_sys::fuzz_target;
use riskscope::auth::verify;

fuzz_target!(|data: &str| {
    let _ = verify(b"fuzz", data);
});
