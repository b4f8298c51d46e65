#![no_main]

use deepnorm_cli::config::CliConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(cfg) = CliConfig::from_json(text) {
            let _ = cfg.validate();
        }
    }
});
