#![no_main]

use arnn::datagen::{decode_samples, encode_samples};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok((size, qdim, samples)) = decode_samples(data) {
        // Padding bits of the roi and NaN payloads need not survive, so
        // compare the decoded form rather than the bytes.
        let bytes = encode_samples(size, qdim, &samples).expect("decoded samples re-encode");
        assert_eq!(bytes.len(), data.len());
        let (_, _, again) = decode_samples(&bytes).expect("re-encoded samples decode");
        assert_eq!(again.len(), samples.len());
        for (a, b) in again.iter().zip(&samples) {
            assert_eq!((a.index, a.label, &a.roi, &a.query), (b.index, b.label, &b.roi, &b.query));
        }
    }
});
