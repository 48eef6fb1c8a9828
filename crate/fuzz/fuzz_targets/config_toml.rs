#![no_main]

use cocycle_lab::cli::config::ExperimentConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    let Ok(cfg) = ExperimentConfig::from_toml_str(text) else {
        return;
    };
    // a parsed config must survive its own serialisation unchanged
    let first = cfg.to_toml_string();
    let again = ExperimentConfig::from_toml_str(&first).expect("serialised config parses");
    assert_eq!(first, again.to_toml_string());

    if let Ok((resolved, _)) = cfg.resolve() {
        let text = resolved.to_toml_string();
        let reparsed = ExperimentConfig::from_toml_str(&text).expect("resolved config parses");
        assert_eq!(text, reparsed.to_toml_string());
    }
});
