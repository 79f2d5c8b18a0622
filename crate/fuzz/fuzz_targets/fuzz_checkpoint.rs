#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(model) = dpmp::checkpoint::decode_checkpoint(data) {
        // Accepted checkpoints re-encode exactly.
        let encoded = dpmp::checkpoint::encode_checkpoint(&model);
        assert_eq!(encoded, data);
    }
});
