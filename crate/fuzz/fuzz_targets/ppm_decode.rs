#![no_main]

use libfuzzer_sys::fuzz_target;
use vig_core::ppm;

fuzz_target!(|data: &[u8]| {
    if let Ok(img) = ppm::decode(data) {
        assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let bytes = ppm::encode(&img).expect("decoded image encodes");
        let back = ppm::decode(&bytes).expect("encoded image decodes");
        assert_eq!(ppm::encode(&back).expect("re-encode"), bytes);
    }
});
