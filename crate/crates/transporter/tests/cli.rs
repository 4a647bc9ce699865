use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use transporter::checkpoint;
use transporter::report::{read_episode, read_loss_csv, EvalReport, ManipReport};
use transporter_core::manip::manipulation_metrics;

const SMALL: &str = r#"{
  "model": {"grid_res": 8, "keypoints": 3, "point_channels": 4, "unet_channels": 2, "feature_channels": 3,
            "attention_channels": 4, "fused_channels": 3, "query_channels": 4, "input_points": 64, "sampled_points": 8},
  "data": {"scenes": ["door"], "pairs_per_scene": 2, "triplets_per_scene": 1, "points_per_frame": 96,
           "positive_queries": 16, "negative_queries": 16},
  "train": {"epochs": 2, "lr": 0.001},
  "manip": {"policy": {"points": 400}}
}"#;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_transporter"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

struct Fixture {
    dir: tempfile::TempDir,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("cfg.json"), SMALL).unwrap();
        Self { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn s(&self, name: &str) -> String {
        self.path(name).display().to_string()
    }

    fn gen(&self, out: &str, seed: &str, scenes: &str) -> Output {
        run(&[
            "gen-data",
            "--config",
            &self.s("cfg.json"),
            "--out",
            &self.s(out),
            "--seed",
            seed,
            "--scenes",
            scenes,
        ])
    }
}

fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(
                    p.strip_prefix(root).unwrap().to_path_buf(),
                    std::fs::read(&p).unwrap(),
                );
            }
        }
    }
    out
}

#[test]
fn gen_data_is_byte_identical_across_runs() {
    let f = Fixture::new();
    assert_eq!(code(&f.gen("a", "7", "1")), 0);
    assert_eq!(code(&f.gen("b", "7", "1")), 0);
    let (a, b) = (tree(&f.path("a")), tree(&f.path("b")));
    assert!(!a.is_empty());
    assert_eq!(a, b);
    assert_eq!(code(&f.gen("c", "8", "1")), 0);
    assert_ne!(a, tree(&f.path("c")));
}

#[test]
fn gen_data_frame_count_and_summary() {
    let f = Fixture::new();
    let o = f.gen("d", "1", "3");
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let stdout = String::from_utf8_lossy(&o.stdout);
    // 3 scenes × (2 pairs × 2 + 1 triplet × 3) frames
    assert!(
        stdout.contains("3 scenes, 9 sequences (6 pairs, 3 triplets), 21 frames"),
        "{stdout}"
    );
    let plys = tree(&f.path("d"))
        .keys()
        .filter(|p| p.extension().is_some_and(|e| e == "ply"))
        .count();
    assert_eq!(plys, 21);
    assert_eq!(
        transporter::dataset::read_dataset(&f.path("d"))
            .unwrap()
            .len(),
        9
    );
}

#[test]
fn train_eval_pipeline() {
    let f = Fixture::new();
    assert_eq!(code(&f.gen("data", "0", "1")), 0);
    let cfg = f.s("cfg.json");
    let o = run(&[
        "train",
        "--config",
        &cfg,
        "--set",
        "train.checkpoint_every=2",
        "--data",
        &f.s("data"),
        "--out",
        &f.s("run"),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(f.path("run/loss.csv")).unwrap();
    assert_eq!(
        text.lines().next().unwrap(),
        "step,L_occ_t,L_occ_s,L_corr,L_axis,total"
    );
    let rows = read_loss_csv(&f.path("run/loss.csv")).unwrap();
    // 3 sequences per epoch, 2 epochs
    assert_eq!(rows.len(), 6);
    assert!(rows
        .iter()
        .enumerate()
        .all(|(i, r)| r.step == i && r.corr.is_some()));
    // only triplets carry the axis term
    assert!(rows.iter().any(|r| r.axis.is_none()) && rows.iter().any(|r| r.axis.is_some()));
    let ck = checkpoint::load_params(&f.path("run/checkpoint.ckpt")).unwrap();
    assert_eq!(ck.header.step, 6);
    let echo: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(f.path("run/config.json")).unwrap()).unwrap();
    assert_eq!(ck.header.config_echo, echo);
    assert_eq!(echo["train"]["checkpoint_every"], 2);
    for s in [2, 4, 6] {
        assert_eq!(
            checkpoint::load_params(&f.path(&format!("run/checkpoints/step_{s:06}.ckpt")))
                .unwrap()
                .header
                .step,
            s
        );
    }

    let o = run(&[
        "eval",
        "--config",
        &cfg,
        "--checkpoint",
        &f.s("run/checkpoint.ckpt"),
        "--data",
        &f.s("data"),
        "--out",
        &f.s("ev"),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report: EvalReport =
        serde_json::from_str(&std::fs::read_to_string(f.path("ev/report.json")).unwrap()).unwrap();
    // 2 pairs + 1 triplet with two consecutive pairs
    assert_eq!(report.per_pair.len(), 4);
    assert_eq!(report.aggregate.pairs, 4);
    assert!(report
        .per_pair
        .iter()
        .all(|p| (0.0..=1.0).contains(&p.rr) && p.ackd >= 0.0 && p.add >= 0.0));
    let mean = report.per_pair.iter().map(|p| p.ackd).sum::<f64>() / 4.0;
    assert!((mean - report.aggregate.ackd).abs() < 1e-12);
    assert_eq!(report.config_echo["data"]["pairs_per_scene"], 2);
    let dumps = tree(&f.path("ev/keypoints"));
    assert_eq!(dumps.len(), 8);
    let k = transporter::ply::read(&f.path("ev/keypoints/pair_0000_a.ply")).unwrap();
    assert_eq!(k.points.len(), 3);

    // a different model request is a data error
    let o = run(&[
        "eval",
        "--config",
        &cfg,
        "--set",
        "model.keypoints=4",
        "--checkpoint",
        &f.s("run/checkpoint.ckpt"),
        "--data",
        &f.s("data"),
        "--out",
        &f.s("ev2"),
    ]);
    assert_eq!(code(&o), 2);

    // the learned policy runs from the checkpoint
    let o = run(&[
        "manip",
        "--config",
        &cfg,
        "--checkpoint",
        &f.s("run/checkpoint.ckpt"),
        "--episodes",
        "2",
        "--out",
        &f.s("mp"),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn interrupted_training_leaves_a_loadable_checkpoint() {
    let f = Fixture::new();
    assert_eq!(code(&f.gen("data", "0", "1")), 0);
    let mut child = bin()
        .args([
            "train",
            "--config",
            &f.s("cfg.json"),
            "--set",
            "train.epochs=100000",
            "--set",
            "train.checkpoint_every=1",
        ])
        .args(["--data", &f.s("data"), "--out", &f.s("run")])
        .stderr(std::process::Stdio::null())
        .spawn()
        .unwrap();
    let dir = f.path("run/checkpoints");
    let start = Instant::now();
    let count = || {
        std::fs::read_dir(&dir)
            .map(|d| {
                d.filter(|e| {
                    e.as_ref()
                        .unwrap()
                        .path()
                        .extension()
                        .is_some_and(|x| x == "ckpt")
                })
                .count()
            })
            .unwrap_or(0)
    };
    while count() < 3 {
        assert!(
            start.elapsed() < Duration::from_secs(120),
            "no checkpoints appeared"
        );
        std::thread::sleep(Duration::from_millis(20));
    }
    child.kill().unwrap();
    child.wait().unwrap();
    let mut ckpts: Vec<PathBuf> = std::fs::read_dir(&dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "ckpt"))
        .collect();
    ckpts.sort();
    let last = ckpts.last().unwrap();
    let c = checkpoint::load_params(last).unwrap();
    assert_eq!(c.header.step, ckpts.len());
}

#[test]
fn oracle_manip_aggregate_recomputes_from_logs() {
    let f = Fixture::new();
    let o = run(&[
        "manip",
        "--config",
        &f.s("cfg.json"),
        "--oracle",
        "--episodes",
        "4",
        "--out",
        &f.s("m"),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("success_rate"));
    let report: ManipReport =
        serde_json::from_str(&std::fs::read_to_string(f.path("m/aggregate.json")).unwrap())
            .unwrap();
    assert_eq!(report.source, "oracle");
    assert_eq!(report.episodes.len(), 4);
    let logs: Vec<_> = report
        .episodes
        .iter()
        .map(|p| read_episode(&f.path("m").join(p)).unwrap())
        .collect();
    assert_eq!(manipulation_metrics(&logs).unwrap(), report.aggregate);
    let n = logs.iter().filter(|e| e.success).count() as f64;
    assert_eq!(report.aggregate.success_rate, n / 4.0);
    assert_eq!(report.config_echo["manip"]["policy"]["points"], 400);
}

#[test]
fn usage_errors_exit_with_one() {
    let f = Fixture::new();
    let cfg = f.s("cfg.json");
    let out = f.s("m");
    let cases: Vec<Vec<&str>> = vec![
        vec![
            "manip",
            "--config",
            &cfg,
            "--oracle",
            "--episodes",
            "0",
            "--out",
            &out,
        ],
        vec!["manip", "--config", &cfg, "--out", &out],
        vec!["manip", "--oracle", "--checkpoint", "x", "--out", &out],
        vec!["frobnicate"],
        vec!["gen-data", "--out", &out, "--set", "data.no_such_field=1"],
        vec!["gen-data", "--out", &out, "--scenes", "0"],
        vec!["gen-data", "--out", &out, "--set", "model.grid_res=12"],
        vec!["grad-check", "--scale", "huge"],
        vec!["grad-check", "--corrupt-op", "no_such_op"],
    ];
    for args in cases {
        let o = run(&args);
        assert_eq!(
            code(&o),
            1,
            "{args:?}: {}",
            String::from_utf8_lossy(&o.stderr)
        );
    }
    assert_eq!(code(&run(&["--help"])), 0);
}

#[test]
fn data_errors_exit_with_two() {
    let f = Fixture::new();
    let o = run(&["train", "--data", &f.s("missing"), "--out", &f.s("run")]);
    assert_eq!(code(&o), 2);
    std::fs::write(f.path("junk.ckpt"), b"not a checkpoint").unwrap();
    let o = run(&[
        "manip",
        "--checkpoint",
        &f.s("junk.ckpt"),
        "--out",
        &f.s("m"),
    ]);
    assert_eq!(code(&o), 2);
}

#[test]
fn corrupted_operator_fails_grad_check() {
    let o = run(&["grad-check", "--scale", "micro", "--corrupt-op", "conv3d"]);
    assert_eq!(code(&o), 3);
    let table = String::from_utf8_lossy(&o.stdout);
    let failed: Vec<&str> = table.lines().filter(|l| l.ends_with("FAIL")).collect();
    assert!(!failed.is_empty());
    assert!(failed.iter().any(|l| l.starts_with("conv3d ")), "{table}");
}
