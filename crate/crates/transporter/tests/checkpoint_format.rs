use transporter::checkpoint::{decode, encode, load, load_params, save};
use transporter::Error;
use transporter_core::model::{ModelConfig, ModelParams};

/// Payload bytes of the 2×2 tensor [[1, -2], [0.5, 3.25]] as little-endian f32.
const FIXTURE_PAYLOAD: &str = "0000803f000000c00000003f00005040";
/// SHA-256 of those bytes, computed outside this crate.
const FIXTURE_SHA: &str = "511521a121d228da0eba54ee5481104dd928880d040adfcf8be1fa42b41138f8";

fn unhex(s: &str) -> Vec<u8> {
    (0..s.len())
        .step_by(2)
        .map(|i| u8::from_str_radix(&s[i..i + 2], 16).unwrap())
        .collect()
}

fn fixture() -> Vec<u8> {
    let header = format!(
        r#"{{"format":"transporter-checkpoint","version":1,"model":{{}},"tensors":[{{"name":"w","dtype":"f32","shape":[2,2],"offset":0,"sha256":"{FIXTURE_SHA}"}}]}}"#
    );
    let mut bytes = (header.len() as u64).to_le_bytes().to_vec();
    bytes.extend_from_slice(header.as_bytes());
    bytes.extend_from_slice(&unhex(FIXTURE_PAYLOAD));
    bytes
}

#[test]
fn hand_built_fixture_loads() {
    let c = decode(&fixture()).unwrap();
    let w = &c.params.tensors["w"];
    assert_eq!(w.shape(), &[2, 2]);
    assert_eq!(w.data(), &[1.0, -2.0, 0.5, 3.25]);
    assert_eq!(c.header.step, 0);
    assert_eq!(c.params.config, ModelConfig::default());
}

#[test]
fn flipped_payload_bit_fails_the_checksum() {
    let mut bytes = fixture();
    let last = bytes.len() - 1;
    bytes[last] ^= 1;
    assert!(matches!(decode(&bytes), Err(Error::Checksum(_))));
}

#[test]
fn truncated_payload_fails_the_integrity_check() {
    let bytes = fixture();
    assert!(matches!(
        decode(&bytes[..bytes.len() - 3]),
        Err(Error::Checksum(_))
    ));
    let mut long = bytes.clone();
    long.push(0);
    assert!(matches!(decode(&long), Err(Error::Checksum(_))));
}

#[test]
fn broken_headers_are_format_errors() {
    assert!(matches!(decode(&[1, 2, 3]), Err(Error::Format(_))));
    let mut bytes = fixture();
    bytes[0] = 0xff;
    assert!(matches!(decode(&bytes), Err(Error::Format(_))));
    let overlap = r#"{"format":"transporter-checkpoint","version":1,"model":{},"tensors":[{"name":"a","dtype":"f32","shape":[2],"offset":0,"sha256":""},{"name":"b","dtype":"f32","shape":[2],"offset":4,"sha256":""}]}"#;
    let mut bytes = (overlap.len() as u64).to_le_bytes().to_vec();
    bytes.extend_from_slice(overlap.as_bytes());
    bytes.extend_from_slice(&[0; 12]);
    assert!(matches!(decode(&bytes), Err(Error::Format(m)) if m.contains("overlap")));
}

#[test]
fn model_round_trip_is_bit_exact() {
    let params = ModelParams::init(&ModelConfig::micro(), 3).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save(&path, &params, 17, serde_json::json!({"note": "x"})).unwrap();
    let c = load_params(&path).unwrap();
    assert_eq!(c.header.step, 17);
    assert_eq!(c.params.config, params.config);
    for (name, t) in &params.tensors {
        let back = &c.params.tensors[name];
        assert_eq!(back.shape(), t.shape());
        for (a, b) in t.data().iter().zip(back.data()) {
            assert_eq!((*a as f32).to_bits(), (*b as f32).to_bits(), "{name}");
        }
    }
    // the f32 image is a fixed point
    let again = encode(&c.params, 17, serde_json::json!({"note": "x"})).unwrap();
    assert_eq!(again, std::fs::read(&path).unwrap());
}

#[test]
fn mismatched_config_is_rejected_on_validated_load() {
    let mut params = ModelParams::init(&ModelConfig::micro(), 0).unwrap();
    params.config.keypoints = 3;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save(&path, &params, 0, serde_json::Value::Null).unwrap();
    assert!(load(&path).is_ok());
    let e = load_params(&path).unwrap_err();
    assert_eq!(e.exit_code(), 2, "{e}");
}
