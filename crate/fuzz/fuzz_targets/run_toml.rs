#![no_main]
use ddmech::bench::RunSpec;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(spec) = RunSpec::from_toml(text) {
        let _ = spec.validate();
    }
});
