#![no_main]

use dfbscan::{FinalLayerParams, LayerFormat};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let _ = FinalLayerParams::decode(data, LayerFormat::Auto);
});
