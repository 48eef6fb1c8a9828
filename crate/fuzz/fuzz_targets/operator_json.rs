#![no_main]

use cocycle_lab::opcore::RandomOperator;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    let Ok(op) = RandomOperator::from_json(text) else {
        return;
    };
    let first = op.to_json();
    let again = RandomOperator::from_json(&first).expect("serialised operator decodes");
    assert_eq!(first, again.to_json());
    let _ = op.ess_sup_norm();
});
