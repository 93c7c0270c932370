#![no_main]

use bevalign::io::Tensor;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(t) = Tensor::decode(data) {
        // anything that decodes must re-encode to the same bytes
        assert_eq!(t.encode(), data);
        let _ = t.into_feature_map();
    }
});
