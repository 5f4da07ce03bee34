#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let _ = afusion_core::datapipe::decode_linguistic(data);
});
