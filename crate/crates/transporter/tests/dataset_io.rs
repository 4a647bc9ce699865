use transporter::dataset::{
    read_dataset, read_index, read_sequence, sequence_dir, write_dataset, MANIFEST_FILE,
};
use transporter::Error;
use transporter_core::synth::{generate_dataset, DataConfig};

fn small() -> DataConfig {
    DataConfig {
        pairs_per_scene: 2,
        triplets_per_scene: 1,
        points_per_frame: 96,
        positive_queries: 8,
        negative_queries: 8,
        ..DataConfig::default()
    }
}

#[test]
fn written_dataset_reads_back() {
    let cfg = small();
    let data = generate_dataset(&cfg, 2, 5).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let summary = write_dataset(dir.path(), &data, 2, 5, serde_json::json!({"k": 1})).unwrap();
    assert_eq!(summary.frames, 2 * cfg.frames_per_scene());
    assert_eq!((summary.pairs, summary.triplets), (4, 2));
    let index = read_index(dir.path()).unwrap();
    assert_eq!(index.config_echo, serde_json::json!({"k": 1}));
    let back = read_dataset(dir.path()).unwrap();
    assert_eq!(back.len(), data.len());
    for (a, b) in data.iter().zip(&back) {
        assert_eq!(a.scene, b.scene);
        assert_eq!(a.normalization, b.normalization);
        for (fa, fb) in a.frames.iter().zip(&b.frames) {
            assert_eq!(fa.part, fb.part);
            assert_eq!(fa.joint_value, fb.joint_value);
            assert_eq!(fa.pose, fb.pose);
            for (p, q) in fa.points.iter().zip(&fb.points) {
                assert!((0..3).all(|k| (p[k] - q[k]).abs() < 1e-6));
            }
        }
    }
}

#[test]
fn manifest_matches_the_schema() {
    let data = generate_dataset(&small(), 1, 0).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), &data, 1, 0, serde_json::Value::Null).unwrap();
    let path = sequence_dir(dir.path(), 0).join(MANIFEST_FILE);
    let v: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    let obj = v.as_object().unwrap();
    assert!(obj["scene"].is_object());
    let frames = obj["frames"].as_array().unwrap();
    assert_eq!(frames.len(), 2);
    for f in frames {
        let f = f.as_object().unwrap();
        let mut keys: Vec<&str> = f.keys().map(String::as_str).collect();
        keys.sort();
        assert_eq!(keys, ["joint_value", "path", "pose"]);
        assert!(f["path"].as_str().unwrap().ends_with(".ply"));
        assert_eq!(f["pose"]["R"].as_array().unwrap().len(), 9);
        assert_eq!(f["pose"]["t"].as_array().unwrap().len(), 3);
    }
    // the first frame is the reference pose
    let r: Vec<f64> = frames[0]["pose"]["R"]
        .as_array()
        .unwrap()
        .iter()
        .map(|x| x.as_f64().unwrap())
        .collect();
    let eye = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
    assert!(
        r.iter().zip(eye).all(|(a, b)| (a - b).abs() < 1e-12),
        "{r:?}"
    );
}

#[test]
fn corrupt_manifests_are_rejected() {
    let data = generate_dataset(&small(), 1, 0).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), &data, 1, 0, serde_json::Value::Null).unwrap();
    let path = sequence_dir(dir.path(), 0).join(MANIFEST_FILE);
    let good = std::fs::read_to_string(&path).unwrap();
    let mut v: serde_json::Value = serde_json::from_str(&good).unwrap();
    v["frames"][1]["pose"]["R"][0] = serde_json::json!(2.0);
    std::fs::write(&path, v.to_string()).unwrap();
    assert!(matches!(read_sequence(&path), Err(Error::Format(m)) if m.contains("orthonormal")));
    let mut v: serde_json::Value = serde_json::from_str(&good).unwrap();
    v["frames"][0]["extra"] = serde_json::json!(1);
    std::fs::write(&path, v.to_string()).unwrap();
    assert!(matches!(read_sequence(&path), Err(Error::Json { .. })));
    let mut v: serde_json::Value = serde_json::from_str(&good).unwrap();
    v["frames"][0]["joint_value"] = serde_json::json!(100.0);
    std::fs::write(&path, v.to_string()).unwrap();
    assert!(read_sequence(&path).is_err());
    std::fs::write(&path, &good).unwrap();
    std::fs::remove_file(sequence_dir(dir.path(), 0).join("frame_1.ply")).unwrap();
    assert!(matches!(read_sequence(&path), Err(Error::Io { .. })));
}
