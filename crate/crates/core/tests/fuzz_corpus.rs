//! Replays the checked-in fuzz seeds through the same entry points the fuzz
//! targets exercise.

use std::fs;
use std::path::PathBuf;

use second_core::backends::Manifest;
use second_core::harness::RunConfigFile;
use second_core::secd::{decode, encode};

fn seeds(target: &str) -> Vec<(String, Vec<u8>)> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../fuzz/corpus")
        .join(target);
    let mut out: Vec<_> = fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|entry| {
            let path = entry.unwrap().path();
            (
                path.file_name().unwrap().to_string_lossy().into_owned(),
                fs::read(&path).unwrap(),
            )
        })
        .collect();
    out.sort();
    assert!(!out.is_empty(), "no seeds in {}", dir.display());
    out
}

#[test]
fn secd_seeds() {
    let valid = [
        "attn_6x6.secd",
        "empty_dim.secd",
        "logits_1x2.secd",
        "matrix_2x3.secd",
        "scalar.secd",
        "vector.secd",
    ];
    for (name, bytes) in seeds("secd_decode") {
        match decode(&bytes) {
            Ok(t) => {
                assert!(valid.contains(&name.as_str()), "{name} should be rejected");
                assert_eq!(encode(&t), bytes, "{name}");
            }
            Err(e) => assert!(!valid.contains(&name.as_str()), "{name}: {e}"),
        }
    }
}

#[test]
fn manifest_seeds() {
    for (name, bytes) in seeds("manifest_parse") {
        let parsed = Manifest::parse(std::str::from_utf8(&bytes).unwrap());
        let expect_ok = matches!(name.as_str(), "minimal.json" | "tokens_rect.json");
        assert_eq!(parsed.is_ok(), expect_ok, "{name}: {parsed:?}");
    }
}

#[test]
fn run_config_seeds() {
    for (name, bytes) in seeds("run_config_parse") {
        let resolved = RunConfigFile::parse(std::str::from_utf8(&bytes).unwrap()).and_then(|f| f.resolve());
        let expect_ok = name != "invalid_values.json";
        assert_eq!(resolved.is_ok(), expect_ok, "{name}: {resolved:?}");
    }
}
