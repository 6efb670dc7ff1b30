#![no_main]

use arnn::tensor::{decode_checkpoint, ParamStore};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(entries) = decode_checkpoint(data) {
        let mut store = ParamStore::new();
        for (name, value) in &entries {
            if store.add(name, value.clone()).is_err() {
                return;
            }
        }
        let again = decode_checkpoint(&arnn::tensor::encode_checkpoint(&store)).expect("re-encoded checkpoint decodes");
        assert_eq!(again.len(), entries.len());
    }
});
