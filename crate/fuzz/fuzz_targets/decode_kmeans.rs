#![no_main]
use std::sync::OnceLock;

use ddmech::bench::{experiment_dataset, MaterialSpec};
use ddmech::nn::serialize::{decode_kmeans, encode_kmeans};
use ddmech::nn::{NnIndex, QueryParams};
use ddmech::MaterialDataset;
use libfuzzer_sys::fuzz_target;

// Same points as `ddmech gen --n 64 --seed 1`.
fn points() -> &'static MaterialDataset {
    static D: OnceLock<MaterialDataset> = OnceLock::new();
    D.get_or_init(|| experiment_dataset(&MaterialSpec::default(), 64, 1).unwrap())
}

fuzz_target!(|data: &[u8]| {
    let d = points();
    if let Ok(index) = decode_kmeans(data, d.mapped()) {
        let again = decode_kmeans(&encode_kmeans(&index), d.mapped()).expect("re-encoded index decodes");
        for q in d.mapped().iter().step_by(7) {
            for f_d in [0.0, 1.0] {
                let p = QueryParams { f_s: Some(4), ..QueryParams::with_fd(f_d) };
                let r = index.query(q, &p);
                assert!(r.best_id < d.len());
                assert_eq!(r, again.query(q, &p));
            }
        }
    }
});
