#![no_main]

use deepnorm::data::Dataset;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(ds) = Dataset::read_text(data, 64) {
        let mut buf = Vec::new();
        ds.write_text(&mut buf).expect("in-memory write");
        assert_eq!(Dataset::read_text(&buf[..], 64).expect("reparse"), ds);
    }
});
