#![no_main]
use ddmech::dataset_io::{decode_csv, encode_csv};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(d) = decode_csv(text) {
        let again = decode_csv(&encode_csv(&d)).expect("re-encoded dataset decodes");
        assert_eq!(again.points(), d.points());
    }
});
