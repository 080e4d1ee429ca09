#![no_main]

use libfuzzer_sys::fuzz_target;
use second_core::harness::RunConfigFile;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(file) = RunConfigFile::parse(text) {
            let _ = file.resolve();
        }
    }
});
