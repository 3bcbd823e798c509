#![no_main]

use libfuzzer_sys::fuzz_target;
use riskscope_core::pipeline::parse_claims;

fuzz_target!(|data: &str| {
    if let Ok(claims) = parse_claims(data) {
        for (i, c) in claims.iter().enumerate() {
            assert_eq!(c.claim_id, format!("c{}", i + 1));
            assert!(!c.text.trim().is_empty());
        }
    }
});
