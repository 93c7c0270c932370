#![no_main]

use bevalign::scene::SceneFile;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(file) = SceneFile::from_json(text) {
            assert_eq!(SceneFile::from_json(&file.to_json()).expect("round trip"), file);
        }
    }
});
