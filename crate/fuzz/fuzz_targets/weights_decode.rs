#![no_main]

use libfuzzer_sys::fuzz_target;
use vig_core::weights;

fuzz_target!(|data: &[u8]| {
    if let Ok((config, params)) = weights::decode(data) {
        // Anything accepted must re-encode to the same bytes.
        let again = weights::encode(&config, &params).expect("decoded weights re-encode");
        assert_eq!(again, data);
    }
});
