use std::path::PathBuf;

use mcupatch::network_file::ParseError;
use mcupatch::{load_network, network_to_json, parse_network, resolve_network, save_network};
use mcupatch_core::builtin_network;
use mcupatch_core::search::{materialize, sample, SearchSpace};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn bundled(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("networks").join(format!("{name}.json"))
}

#[test]
fn golden_files_match_builtins() {
    for name in ["mbv2", "mbv2-rd"] {
        let from_file = load_network(&bundled(name)).unwrap();
        assert_eq!(from_file, builtin_network(name).unwrap(), "{name}");
        let text = std::fs::read_to_string(bundled(name)).unwrap();
        assert_eq!(text, network_to_json(&from_file), "{name} is not in canonical form");
    }
}

#[test]
fn resolve_prefers_builtin_then_path() {
    assert_eq!(resolve_network("mbv2").unwrap().name, "mbv2");
    let path = bundled("mbv2-rd");
    assert_eq!(resolve_network(path.to_str().unwrap()).unwrap().name, "mbv2-rd");
    let err = resolve_network("no-such-net").unwrap_err().to_string();
    assert!(err.contains("mbv2"), "{err}");
}

#[test]
fn even_kernel_is_rejected_with_field_path() {
    let mut net = builtin_network("mbv2").unwrap();
    net.blocks[3].kernel = 4;
    let text = network_to_json(&net);
    match parse_network(&text).unwrap_err() {
        ParseError::Field { field, message } => {
            assert_eq!(field, "blocks[3].kernel");
            assert_eq!(message, "kernel must be odd");
        }
        other => panic!("unexpected {other}"),
    }
}

#[test]
fn unknown_fields_are_rejected() {
    let text = network_to_json(&builtin_network("mbv2").unwrap()).replacen("\"name\"", "\"colour\": 1,\n  \"name\"", 1);
    let err = parse_network(&text).unwrap_err().to_string();
    assert!(err.contains("colour"), "{err}");
}

#[test]
fn save_and_load() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("net.json");
    let net = builtin_network("mbv2").unwrap().with_resolution(160);
    save_network(&path, &net).unwrap();
    assert_eq!(load_network(&path).unwrap(), net);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn sampled_networks_round_trip(seed in any::<u64>()) {
        let space = SearchSpace::default();
        let net = materialize(&space, &sample(&space, &mut ChaCha8Rng::seed_from_u64(seed))).unwrap();
        let text = network_to_json(&net);
        let back = parse_network(&text).unwrap();
        prop_assert_eq!(&back, &net);
        prop_assert_eq!(network_to_json(&back), text);
    }
}
