#![no_main]

use libfuzzer_sys::fuzz_target;

// First two bytes pick bounded image dimensions; the rest is the blob.
fuzz_target!(|data: &[u8]| {
    if data.len() < 2 {
        return;
    }
    let h = 1 + (data[0] as usize % 64);
    let w = 1 + (data[1] as usize % 64);
    let _ = dpmp::dataset_io::decode_image(&data[2..], h, w);
});
