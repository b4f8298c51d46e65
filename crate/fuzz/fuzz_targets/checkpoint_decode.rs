#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(model) = deepnorm::checkpoint::decode(data) {
        let again = deepnorm::checkpoint::encode(&model).expect("decoded model re-encodes");
        deepnorm::checkpoint::decode(&again).expect("re-encoded checkpoint decodes");
    }
});
