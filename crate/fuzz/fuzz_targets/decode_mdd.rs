#![no_main]
use ddmech::dataset_io::{decode_mdd, encode_mdd};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(d) = decode_mdd(data) {
        let again = decode_mdd(&encode_mdd(&d)).expect("re-encoded dataset decodes");
        assert_eq!(again.points(), d.points());
    }
});
