#![no_main]

use libfuzzer_sys::fuzz_target;

use afusion_core::datapipe::TrialRecord;

fuzz_target!(|data: &[u8]| {
    if let Ok(r) = TrialRecord::decode(data) {
        let bytes = r.encode();
        assert_eq!(TrialRecord::decode(&bytes).unwrap().encode(), bytes);
    }
});
