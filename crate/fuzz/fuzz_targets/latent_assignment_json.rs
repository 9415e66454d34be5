#![no_main]

use libfuzzer_sys::fuzz_target;
use sentvae::manipulate::LatentAssignment;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(a) = LatentAssignment::from_json_str(text) {
        assert_eq!(a.values.len(), a.len() * a.z_size);
        for i in 0..a.len() {
            let _ = a.lv(i);
        }
        assert_eq!(LatentAssignment::from_json_str(&a.to_json_string()).unwrap(), a);
    }
});
