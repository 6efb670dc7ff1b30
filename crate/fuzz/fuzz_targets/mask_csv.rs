#![no_main]

use arnn::export::{mask_to_csv, parse_mask_csv};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(mask) = parse_mask_csv(text) {
        if let Ok(csv) = mask_to_csv(&mask) {
            let back = parse_mask_csv(&csv).expect("written mask parses");
            assert_eq!(back.shape(), mask.shape());
        }
    }
});
