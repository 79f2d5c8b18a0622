#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok((joint, task)) = dpmp::dataset_io::decode_trajectory_pair(data) {
        // Accepted input must re-encode to the identical byte stream.
        let encoded = dpmp::dataset_io::encode_trajectory_pair(&joint, &task).unwrap();
        assert_eq!(encoded, data);
    }
});
