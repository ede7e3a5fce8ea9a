#![no_main]

use libfuzzer_sys::fuzz_target;
use vig_core::bench::{read_csv, write_csv};

fuzz_target!(|data: &[u8]| {
    if let Ok(rows) = read_csv(data) {
        let mut once = Vec::new();
        write_csv(&mut once, &rows).expect("write parsed rows");
        let reparsed = read_csv(&once[..]).expect("re-read written rows");
        let mut twice = Vec::new();
        write_csv(&mut twice, &reparsed).expect("write re-read rows");
        assert_eq!(once, twice);
    }
});
