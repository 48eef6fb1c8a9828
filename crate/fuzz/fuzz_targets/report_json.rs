#![no_main]

use cocycle_lab::cli::RunReport;
use cocycle_lab::perturb::PerturbationResult;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    let Ok(report) = RunReport::from_json(text) else {
        return;
    };
    let first = report.to_json();
    let again = RunReport::from_json(&first).expect("serialised report decodes");
    assert_eq!(first, again.to_json());

    if let Some(Ok(doc)) = report.document() {
        let _ = PerturbationResult::from_document(doc);
    }
});
