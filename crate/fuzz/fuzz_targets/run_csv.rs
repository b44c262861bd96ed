#![no_main]
use ddmech::bench::csv::parse_run_csv;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        let _ = parse_run_csv(text);
    }
});
