#![no_main]

use libfuzzer_sys::fuzz_target;

use afusion_core::config::RunConfig;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(c) = RunConfig::from_text(text) {
            let text = c.to_text();
            assert_eq!(RunConfig::from_text(&text).unwrap().to_text(), text);
        }
    }
});
