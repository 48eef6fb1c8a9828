//! Replays the checked-in fuzz corpus through the properties the fuzz targets
//! assert, so the seeds stay valid on a stable toolchain.

use std::fs;
use std::path::PathBuf;

use cocycle_lab::cli::config::ExperimentConfig;
use cocycle_lab::cli::RunReport;
use cocycle_lab::opcore::RandomOperator;
use cocycle_lab::perturb::PerturbationResult;

fn seeds(target: &str) -> Vec<(String, String)> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../fuzz/corpus")
        .join(target);
    let mut out: Vec<(String, String)> = fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|entry| {
            let path = entry.unwrap().path();
            let name = path.file_name().unwrap().to_string_lossy().into_owned();
            (name, fs::read_to_string(&path).unwrap())
        })
        .collect();
    out.sort();
    assert!(!out.is_empty(), "no seeds in {}", dir.display());
    out
}

#[test]
fn config_seeds_parse_and_reserialise_stably() {
    for (name, text) in seeds("config_toml") {
        let cfg = ExperimentConfig::from_toml_str(&text).unwrap_or_else(|e| panic!("{name}: {e}"));
        let first = cfg.to_toml_string();
        let again = ExperimentConfig::from_toml_str(&first).unwrap();
        assert_eq!(first, again.to_toml_string(), "{name}");
        if let Ok((resolved, _)) = cfg.resolve() {
            let text = resolved.to_toml_string();
            let reparsed = ExperimentConfig::from_toml_str(&text).unwrap();
            assert_eq!(text, reparsed.to_toml_string(), "{name}");
        }
    }
}

#[test]
fn operator_seeds_decode_and_reencode_stably() {
    for (name, text) in seeds("operator_json") {
        let op = RandomOperator::from_json(&text).unwrap_or_else(|e| panic!("{name}: {e}"));
        let first = op.to_json();
        assert_eq!(
            first,
            RandomOperator::from_json(&first).unwrap().to_json(),
            "{name}"
        );
        assert!(op.ess_sup_norm().is_finite());
    }
}

#[test]
fn report_seeds_decode_and_reencode_stably() {
    for (name, text) in seeds("report_json") {
        let report = RunReport::from_json(&text).unwrap_or_else(|e| panic!("{name}: {e}"));
        let first = report.to_json();
        assert_eq!(
            first,
            RunReport::from_json(&first).unwrap().to_json(),
            "{name}"
        );
        if let Some(doc) = report.document() {
            let doc = doc.unwrap_or_else(|e| panic!("{name}: {e}"));
            PerturbationResult::from_document(doc).unwrap_or_else(|e| panic!("{name}: {e}"));
        }
    }
}

#[test]
fn oversized_iid_family_is_rejected_before_allocation() {
    let text = "[base]\nkind = \"golden-rotation\"\n[operator]\nkind = \"iid-family\"\n\
                dim = 1000000000\npieces = 2\n[task]\nkind = \"spectrum\"\n";
    let err = ExperimentConfig::from_toml_str(text)
        .unwrap()
        .resolve()
        .unwrap_err();
    assert_eq!(err.field, "operator.dim");
}
