#![no_main]

use dfbscan::ClueProfile;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(p) = ClueProfile::from_json(data) {
        assert_eq!(ClueProfile::from_json(p.to_json().as_bytes()).unwrap(), p);
    }
});
