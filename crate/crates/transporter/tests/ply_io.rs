use transporter::ply::{self, parse};
use transporter::Error;

const FIXTURE: &str = "\
ply
format ascii 1.0
comment three points, the last on the part
element vertex 3
property float x
property float y
property float z
property uchar part
end_header
0 0 0 0
1.5 -2 0.25 0
-0.125 3 1e-3 1
";

#[test]
fn three_point_fixture() {
    let c = parse(FIXTURE).unwrap();
    assert_eq!(
        c.points,
        vec![[0.0, 0.0, 0.0], [1.5, -2.0, 0.25], [-0.125, 3.0, 0.001]]
    );
    assert_eq!(c.part, Some(vec![false, false, true]));
}

#[test]
fn write_then_read_round_trips() {
    let pts: Vec<[f64; 3]> = (0..200)
        .map(|i| {
            let t = i as f64 * 0.137;
            [t.sin() * 0.49, t.cos() * 0.31, (t * 0.5).sin() * 1e-3]
        })
        .collect();
    let mask: Vec<bool> = (0..200).map(|i| i % 3 == 0).collect();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.ply");
    ply::write(&path, &pts, Some(&mask)).unwrap();
    let c = ply::read(&path).unwrap();
    assert_eq!(c.points.len(), pts.len());
    for (a, b) in pts.iter().zip(&c.points) {
        for k in 0..3 {
            assert!((a[k] - b[k]).abs() < 1e-6);
        }
    }
    assert_eq!(c.part.unwrap(), mask);
    ply::write(&path, &pts, None).unwrap();
    assert_eq!(ply::read(&path).unwrap().part, None);
}

#[test]
fn empty_cloud_is_an_error() {
    let text = "ply\nformat ascii 1.0\nelement vertex 0\nproperty float x\nproperty float y\nproperty float z\nend_header\n";
    let e = parse(text).unwrap_err();
    assert_eq!(e.line, 3);
    assert!(e.msg.contains("empty"));
}

#[test]
fn file_errors_carry_path_and_line() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.ply");
    std::fs::write(&path, FIXTURE.replace("1.5 -2", "1.5 x")).unwrap();
    match ply::read(&path) {
        Err(Error::Ply { line, .. }) => assert_eq!(line, 11),
        other => panic!("{other:?}"),
    }
    let e = ply::read(&dir.path().join("missing.ply")).unwrap_err();
    assert!(matches!(e, Error::Io { .. }));
}
