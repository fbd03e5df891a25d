#![no_main]

use credassign::Tensor;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok((t, used)) = Tensor::<f32>::from_bytes(data) {
        assert!(used <= data.len());
        let again = t.to_bytes();
        assert_eq!(again, data[..used]);
    }
});
