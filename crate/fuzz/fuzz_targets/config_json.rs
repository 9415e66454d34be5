#![no_main]

use libfuzzer_sys::fuzz_target;
use sentvae::config::RunConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cfg) = RunConfig::from_json_str(text) {
        if cfg.validate().is_ok() {
            let _ = cfg.model_config(40);
            let _ = cfg.train_config();
        }
        let _ = RunConfig::from_json_str(&cfg.to_json_string()).expect("re-parse");
    }
});
