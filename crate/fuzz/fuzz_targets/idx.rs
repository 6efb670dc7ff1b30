#![no_main]

use arnn::datagen::{parse_idx, GlyphSet};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    for rank in 1..=3 {
        let _ = parse_idx(data, rank);
    }
    // First two bytes give the length of the image file; the rest is labels.
    if data.len() >= 2 {
        let split = (usize::from(data[0]) << 8 | usize::from(data[1])).min(data.len() - 2);
        let (images, labels) = data[2..].split_at(split);
        let _ = GlyphSet::from_idx(images, labels);
    }
});
