#![no_main]

use credassign::data::{parse_records, Dataset, Split};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok((pixels, labels)) = parse_records(data) {
        assert_eq!(pixels.len(), labels.len() * 3072);
        assert!(labels.iter().all(|&l| l < 10));
        let ds = Dataset::from_parts(pixels, labels, Split::Test).unwrap();
        if !ds.is_empty() {
            let _ = ds.eval_batch(&[0]);
        }
    }
});
