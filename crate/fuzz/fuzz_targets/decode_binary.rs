#![no_main]

use dfbscan::FinalLayerParams;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(p) = FinalLayerParams::from_binary(data) {
        assert_eq!(p.to_binary(), data);
    }
});
