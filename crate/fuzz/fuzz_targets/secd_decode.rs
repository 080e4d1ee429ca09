#![no_main]

use libfuzzer_sys::fuzz_target;
use second_core::secd::{decode, encode};

fuzz_target!(|data: &[u8]| {
    if let Ok(tensor) = decode(data) {
        assert_eq!(encode(&tensor), data);
    }
});
