#![no_main]

use bevalign::camera::Rig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(rig) = Rig::from_json(text) {
            let again = Rig::from_json(&rig.to_json()).expect("a parsed rig re-parses");
            assert_eq!(again.cameras.len(), rig.cameras.len());
        }
    }
});
