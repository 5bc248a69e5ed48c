#![no_main]

use dfbscan::FinalLayerParams;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(p) = FinalLayerParams::from_json(data) {
        let again = FinalLayerParams::from_json(p.to_json().as_bytes()).unwrap();
        assert_eq!(again.weights(), p.weights());
        assert_eq!(again.bias(), p.bias());
    }
});
