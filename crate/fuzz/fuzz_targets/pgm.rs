#![no_main]

use arnn::export::parse_pgm;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok((rows, cols, pixels)) = parse_pgm(data) {
        assert_eq!(pixels.len(), rows * cols);
    }
});
