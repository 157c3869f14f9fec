use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ngc_core::checkpoint::{load_checkpoint, save_checkpoint};
use ngc_core::data::{load_dataset, save_dataset, Dataset, PoseSequence};
use ngc_core::skeleton::SkeletonTopology;
use ngc_core::tensor::Tensor;
use tempfile::TempDir;

const TINY: &str = "tau = 4\nhorizon = 3\ntc_hidden = 8\nbatch_size = 4\n";

fn ngc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ngc")).args(args).output().expect("run ngc")
}

fn ok(args: &[&str]) -> String {
    let out = ngc(args);
    assert!(
        out.status.success(),
        "ngc {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

struct Work {
    dir: TempDir,
}

impl Work {
    fn new() -> Self {
        Self {
            dir: tempfile::tempdir().unwrap(),
        }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn s(&self, name: &str) -> String {
        self.path(name).to_str().unwrap().to_string()
    }

    /// Small 3-class dataset with 14-frame sequences.
    fn data(&self, name: &str, seed: u64) -> String {
        let seed = seed.to_string();
        ok(&[
            "gen-data", "--out", &self.s(name), "--classes", "3", "--per-class", "2", "--joints", "5", "--frames", "14",
            "--seed", &seed,
        ]);
        self.s(name)
    }

    fn config(&self, extra: &str) -> String {
        let p = self.path("tiny.cfg");
        fs::write(&p, format!("{TINY}{extra}")).unwrap();
        p.to_str().unwrap().to_string()
    }

    fn train(&self, data: &str, extra: &[&str]) -> String {
        let out = self.s("m.ckpt");
        let cfg = self.config("");
        let mut args = vec!["train", "--data", data, "--out", &out, "--config", &cfg, "--quiet"];
        args.extend_from_slice(extra);
        ok(&args);
        out
    }
}

fn metrics_rows(path: &Path) -> Vec<Vec<String>> {
    let mut r = csv::Reader::from_path(path).unwrap();
    r.records().map(|rec| rec.unwrap().iter().map(String::from).collect()).collect()
}

#[test]
fn gen_data_counts_and_is_deterministic() {
    let w = Work::new();
    let args = |out: &str| {
        vec![
            "gen-data".to_string(), "--out".into(), out.into(), "--classes".into(), "4".into(), "--per-class".into(),
            "8".into(), "--joints".into(), "17".into(), "--frames".into(), "60".into(), "--fps".into(), "25".into(),
            "--seed".into(), "42".into(),
        ]
    };
    let run = |out: &str| {
        let a = args(out);
        ok(&a.iter().map(String::as_str).collect::<Vec<_>>())
    };
    let stdout = run(&w.s("a.skel"));
    run(&w.s("b.skel"));
    assert!(stdout.contains("32 sequences"));
    let ds = load_dataset(&w.path("a.skel")).unwrap();
    assert_eq!(ds.sequences.len(), 32);
    assert_eq!(ds.labels.len(), 4);
    assert_eq!(fs::read(w.path("a.skel")).unwrap(), fs::read(w.path("b.skel")).unwrap());
}

#[test]
fn gen_data_rejects_a_single_class() {
    let w = Work::new();
    let out = ngc(&["gen-data", "--out", &w.s("d.skel"), "--classes", "1"]);
    assert_eq!(code(&out), 1);
    assert!(!w.path("d.skel").exists());
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(code(&ngc(&["train", "--bogus"])), 1);
    assert_eq!(code(&ngc(&["ablate", "--data", "x", "--variants", "wide"])), 1);
    assert_eq!(code(&ngc(&["gradcheck", "--tol=-1"])), 1);
    assert_eq!(code(&ngc(&["--help"])), 0);
}

#[test]
fn zero_epochs_saves_the_initialized_checkpoint() {
    let w = Work::new();
    let data = w.data("d.skel", 1);
    let ckpt = w.train(&data, &["--epochs", "0"]);
    let state = load_checkpoint(Path::new(&ckpt)).unwrap();
    assert_eq!(state.epoch, 0);
    assert_eq!(state.adam.step, 0);
    assert!(w.path("m.ckpt.last").exists());
    assert!(metrics_rows(&w.path("m.ckpt.metrics.csv")).is_empty());
}

#[test]
fn flags_override_the_config_file() {
    let w = Work::new();
    let data = w.data("d.skel", 1);
    let cfg = w.config("lambda = 0.5\nlr = 0.002\n");
    let out = w.s("m.ckpt");
    ok(&["train", "--data", &data, "--out", &out, "--config", &cfg, "--lambda", "0.7", "--epochs", "0"]);
    let c = load_checkpoint(Path::new(&out)).unwrap().config;
    assert_eq!(c.lambda, 0.7);
    assert_eq!(c.lr, 0.002);
    assert_eq!(c.batch_size, 4);
    assert_eq!(c.huber_beta, ngc_core::train::TrainConfig::default().huber_beta);
}

#[test]
fn bad_config_file_is_a_usage_error() {
    let w = Work::new();
    let data = w.data("d.skel", 1);
    let cfg = w.config("epochs = many\n");
    let out = ngc(&["train", "--data", &data, "--out", &w.s("m.ckpt"), "--config", &cfg]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("config line 5"), "{}", stderr(&out));
}

#[test]
fn lambda_one_logs_loss_equal_to_prediction_loss() {
    let w = Work::new();
    let data = w.data("d.skel", 2);
    w.train(&data, &["--lambda", "1.0", "--epochs", "2"]);
    let rows = metrics_rows(&w.path("m.ckpt.metrics.csv"));
    assert_eq!(rows.len(), 2);
    for row in rows {
        // columns: epoch, lr, tf_p, l_pred, l_rec, loss, ...
        assert_eq!(row[3], row[5]);
        assert_ne!(row[4], row[5]);
    }
}

#[test]
fn resume_continues_the_log_and_rejects_new_settings() {
    let w = Work::new();
    let data = w.data("d.skel", 3);
    w.train(&data, &["--epochs", "1"]);
    let last = w.s("m.ckpt.last");
    let out = w.s("m.ckpt");
    ok(&["train", "--data", &data, "--out", &out, "--resume", &last, "--epochs", "2", "--quiet"]);
    let rows = metrics_rows(&w.path("m.ckpt.metrics.csv"));
    assert_eq!(rows.iter().map(|r| r[0].as_str()).collect::<Vec<_>>(), ["0", "1"]);
    let bad = ngc(&["train", "--data", &data, "--out", &out, "--resume", &last, "--lr", "0.1"]);
    assert_eq!(code(&bad), 1);
}

#[test]
fn too_short_data_is_a_data_error() {
    let w = Work::new();
    let short = w.s("short.skel");
    ok(&["gen-data", "--out", &short, "--classes", "2", "--per-class", "1", "--joints", "5", "--frames", "6"]);
    let out = ngc(&["train", "--data", &short, "--out", &w.s("m.ckpt"), "--config", &w.config("")]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("need at least 7"), "{}", stderr(&out));
}

#[test]
fn eval_labels_rows_in_milliseconds() {
    let w = Work::new();
    let data = w.data("d.skel", 4);
    let ckpt = w.train(&data, &["--epochs", "1"]);
    let report = w.s("r.csv");
    let stdout = ok(&["eval", "--model", &ckpt, "--data", &data, "--horizons", "2,4,8,10", "--out", &report]);
    assert!(stdout.contains("native coordinate space"));
    assert!(stdout.contains("true\\pred"));
    let mut r = csv::Reader::from_path(&report).unwrap();
    assert_eq!(r.headers().unwrap(), vec!["horizon_ms", "model_mae", "zerov_mae"]);
    let ms: Vec<String> = r.records().map(|rec| rec.unwrap()[0].to_string()).collect();
    assert_eq!(ms, ["80", "160", "320", "400"]);
}

#[test]
fn eval_with_zeroed_decoder_output_matches_zero_velocity() {
    let w = Work::new();
    let data = w.data("d.skel", 5);
    let ckpt = w.train(&data, &["--epochs", "1"]);
    let mut state = load_checkpoint(Path::new(&ckpt)).unwrap();
    let out = state.model.motion.out.clone();
    for id in std::iter::once(out.weight).chain(out.bias) {
        let shape = state.model.params.value(id).shape().to_vec();
        state.model.params.get_mut(id).value = Tensor::zeros(&shape);
    }
    save_checkpoint(&w.path("zero.ckpt"), &state).unwrap();
    let report = w.s("r.csv");
    ok(&["eval", "--model", &w.s("zero.ckpt"), "--data", &data, "--horizons", "1,2,5,10", "--out", &report]);
    let mut r = csv::Reader::from_path(&report).unwrap();
    for rec in r.records() {
        let rec = rec.unwrap();
        assert_eq!(rec[1], rec[2]);
    }
}

#[test]
fn eval_rejects_empty_and_mismatched_data() {
    let w = Work::new();
    let data = w.data("d.skel", 6);
    let ckpt = w.train(&data, &["--epochs", "0"]);

    let mut empty = load_dataset(Path::new(&data)).unwrap();
    empty.sequences.clear();
    save_dataset(&empty, &w.path("empty.skel")).unwrap();
    let out = ngc(&["eval", "--model", &ckpt, "--data", &w.s("empty.skel")]);
    assert_eq!(code(&out), 2);

    ok(&["gen-data", "--out", &w.s("six.skel"), "--classes", "3", "--per-class", "1", "--joints", "6", "--frames", "14"]);
    let out = ngc(&["eval", "--model", &ckpt, "--data", &w.s("six.skel")]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("joints"), "{}", stderr(&out));
}

#[test]
fn predict_writes_requested_frames() {
    let w = Work::new();
    let data = w.data("d.skel", 7);
    let ckpt = w.train(&data, &["--epochs", "1"]);
    ok(&[
        "predict", "--model", &ckpt, "--input", &data, "--frames", "10", "--out", &w.s("p.skel"), "--csv", &w.s("p.csv"),
    ]);
    let pred = load_dataset(&w.path("p.skel")).unwrap();
    assert_eq!(pred.sequences.len(), 6);
    assert!(pred.sequences.iter().all(|s| s.n_frames() == 10 && s.label.is_some()));
    let rows = metrics_rows(&w.path("p.csv"));
    assert_eq!(rows.len(), 6 * 10 * 5);
}

#[test]
fn predict_reports_bad_input() {
    let w = Work::new();
    let data = w.data("d.skel", 8);
    let ckpt = w.train(&data, &["--epochs", "0"]);

    let text = fs::read_to_string(&data).unwrap();
    let header = text.lines().next().unwrap();
    fs::write(w.path("bad.skel"), format!("{header}\n{{\"frames\": oops}}\n")).unwrap();
    let out = ngc(&["predict", "--model", &ckpt, "--input", &w.s("bad.skel"), "--out", &w.s("p.skel")]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("line 2"), "{}", stderr(&out));

    ok(&["gen-data", "--out", &w.s("short.skel"), "--classes", "3", "--per-class", "1", "--joints", "5", "--frames", "3"]);
    let out = ngc(&["predict", "--model", &ckpt, "--input", &w.s("short.skel"), "--out", &w.s("p.skel")]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("need at least 4"), "{}", stderr(&out));
}

/// Every frame is the same pose, so a model trained on it should hold still.
fn constant_dataset(frames: usize) -> Dataset {
    let topology = SkeletonTopology::default_for(5).unwrap();
    let pose: Vec<f64> = ngc_core::data::rest_pose(5).into_iter().flatten().collect();
    let labels = vec!["still".to_string(), "idle".to_string()];
    let sequences = (0..8)
        .map(|i| PoseSequence::new(pose.repeat(frames), 5, Some(labels[i % 2].clone())).unwrap())
        .collect();
    Dataset {
        topology,
        sequences,
        labels,
        fps: 25.0,
    }
}

#[test]
fn constant_input_yields_near_constant_prediction() {
    let w = Work::new();
    let ds = constant_dataset(14);
    save_dataset(&ds, &w.path("c.skel")).unwrap();
    let cfg = w.config("lambda = 1.0\nhuber_beta = 0.1\nlr_decay_every = 1000\nval_fraction = 0\n");
    let ckpt = w.s("m.ckpt");
    ok(&["train", "--data", &w.s("c.skel"), "--out", &ckpt, "--config", &cfg, "--epochs", "60", "--quiet"]);
    ok(&["predict", "--model", &ckpt, "--input", &w.s("c.skel"), "--frames", "10", "--out", &w.s("p.skel")]);
    let pred = load_dataset(&w.path("p.skel")).unwrap();
    let pose = ds.sequences[0].frame(0);
    for s in &pred.sequences {
        let mae = s.frames.iter().zip(pose.iter().cycle()).map(|(a, b)| (a - b).abs()).sum::<f64>() / s.frames.len() as f64;
        assert!(mae < 0.05, "mae {mae}");
    }
}

#[test]
fn gradcheck_is_deterministic_and_tolerance_sensitive() {
    let a = ngc(&["gradcheck", "--seed", "3", "--per-param", "1"]);
    let b = ngc(&["gradcheck", "--seed", "3", "--per-param", "1"]);
    assert_eq!(code(&a), 0, "{}", String::from_utf8_lossy(&a.stdout));
    assert_eq!(a.stdout, b.stdout);
    let strict = ngc(&["gradcheck", "--seed", "3", "--per-param", "1", "--tol", "1e-12"]);
    assert_ne!(code(&strict), 0);
    assert!(String::from_utf8_lossy(&strict.stdout).contains("FAIL"));
}

#[test]
fn ablate_emits_rows_per_seed_and_a_mean() {
    let w = Work::new();
    let data = w.data("d.skel", 9);
    let cfg = w.config("");
    let out = w.s("ab.csv");
    let stdout = ok(&[
        "ablate", "--data", &data, "--config", &cfg, "--epochs", "1", "--seeds", "1,2,3", "--variants", "full", "--out", &out,
    ]);
    let rows = metrics_rows(Path::new(&out));
    let seeds: Vec<&str> = rows.iter().map(|r| r[1].as_str()).collect();
    assert_eq!(seeds, ["1", "2", "3", "mean"]);
    assert!(rows.iter().all(|r| r[0] == "full"));
    assert!(!stdout.contains("directional"));
}
