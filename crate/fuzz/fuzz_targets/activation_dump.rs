#![no_main]

use std::io::Write;

use credassign::analysis::{ActivationDump, ActivationSource};
use libfuzzer_sys::fuzz_target;

// The dump reader works on files, so each input goes through a scratch file.
fuzz_target!(|data: &[u8]| {
    let path = std::env::temp_dir().join(format!("credassign-fuzz-{}.dump", std::process::id()));
    std::fs::File::create(&path).unwrap().write_all(data).unwrap();
    if let Ok(mut dump) = ActivationDump::open(&path) {
        let n = dump.sample_ids().len();
        let rows: Vec<usize> = (0..n).collect();
        for layer in 0..dump.layer_names().len() {
            if let Ok(t) = dump.rows(layer, &rows) {
                assert_eq!(t.shape()[0], n);
            }
        }
    }
    let _ = std::fs::remove_file(&path);
});
