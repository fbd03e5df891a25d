#![no_main]

use credassign::container::Container;
use credassign::Checkpoint;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(c) = Container::from_bytes(data) {
        let back = Container::from_bytes(&c.to_bytes()).unwrap();
        assert_eq!(back, c);
    }
    if let Ok(ck) = Checkpoint::from_bytes(data) {
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back.to_bytes(), ck.to_bytes());
    }
});
