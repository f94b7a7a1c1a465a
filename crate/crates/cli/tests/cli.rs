use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Duration;

use stam::data::{load_batch, Dataset, Window};
use stam::explain::{inspect_temporal_attention, AttentionInspection};
use stam::model::{load_checkpoint, Variant};
use stam::train::AblationReport;

struct Run {
    code: i32,
    stdout: String,
    stderr: String,
}

fn stam(args: &[&str], env: &[(&str, &str)]) -> Run {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_stam"));
    cmd.args(args).env("RUST_LOG", "warn");
    for (k, v) in env {
        cmd.env(k, v);
    }
    let Output { status, stdout, stderr } = cmd.output().unwrap();
    Run {
        code: status.code().unwrap_or(-1),
        stdout: String::from_utf8(stdout).unwrap(),
        stderr: String::from_utf8(stderr).unwrap(),
    }
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Small workspace: a config file plus data/run directories under one tempdir.
struct Workspace {
    _dir: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
}

impl Workspace {
    fn new(extra: &str) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let config = root.join("run.cfg");
        let text = format!(
            "data_dir = {}\nout_dir = {}\nclasses = 2\nsequences_per_class = 20\nframes_per_sequence = 7\n\
             frame_height = 16\nframe_width = 16\nbackbone_channels = 2,3,4\nheads = 2\nn = 3\nepochs = 3\n\
             patience = 3\n{extra}",
            s(&root.join("data")),
            s(&root.join("run"))
        );
        fs::write(&config, text).unwrap();
        Workspace { _dir: dir, root, config }
    }

    fn cfg(&self) -> &str {
        s(&self.config)
    }

    fn data(&self) -> PathBuf {
        self.root.join("data")
    }

    fn run_dir(&self) -> PathBuf {
        self.root.join("run")
    }

    fn gen(&self) -> Run {
        let r = stam(&["gen-data", "--config", self.cfg()], &[]);
        assert_eq!(r.code, 0, "{}", r.stderr);
        r
    }
}

fn files(dir: &Path) -> Vec<String> {
    let mut names: Vec<String> = fs::read_dir(dir).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    names.sort();
    names
}

#[test]
fn default_gen_data_reports_split_and_detects_up_to_date() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("data");
    let first = stam(&["gen-data", "--out", s(&out)], &[]);
    assert_eq!(first.code, 0, "{}", first.stderr);
    assert!(first.stdout.contains("classes=10 sequences=600 train=420 val=120 test=60"), "{}", first.stdout);
    let index_before = fs::read(out.join("index.tsv")).unwrap();
    let modified = fs::metadata(out.join("sequences/seq_000000.tseq")).unwrap().modified().unwrap();

    let second = stam(&["gen-data", "--out", s(&out)], &[]);
    assert_eq!(second.code, 0);
    assert!(second.stdout.starts_with("up-to-date"), "{}", second.stdout);
    assert_eq!(fs::read(out.join("index.tsv")).unwrap(), index_before);
    assert_eq!(fs::metadata(out.join("sequences/seq_000000.tseq")).unwrap().modified().unwrap(), modified);
    assert_eq!(files(&out), ["config.resolved.txt", "index.tsv", "manifest.txt", "sequences"]);
}

#[test]
fn regenerated_datasets_are_byte_identical() {
    let ws = Workspace::new("");
    ws.gen();
    let other = ws.root.join("again");
    assert_eq!(stam(&["gen-data", "--config", ws.cfg(), "--out", s(&other)], &[]).code, 0);
    for name in ["index.tsv", "manifest.txt", "sequences/seq_000013.tseq"] {
        assert_eq!(fs::read(ws.data().join(name)).unwrap(), fs::read(other.join(name)).unwrap(), "{name}");
    }
    let reseeded = stam(&["gen-data", "--config", ws.cfg(), "--seed", "5"], &[]);
    assert_eq!(reseeded.code, 3, "different manifest in the same directory must be refused");
}

#[test]
fn config_errors_exit_2_with_line_numbers() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "seed = 1\nepochs = lots\n").unwrap();
    let r = stam(&["gen-data", "--config", s(&cfg)], &[]);
    assert_eq!(r.code, 2);
    assert!(r.stderr.contains("line 2"), "{}", r.stderr);

    fs::write(&cfg, "# fine\nmystery_key = 3\n").unwrap();
    let r = stam(&["train", "--config", s(&cfg)], &[]);
    assert_eq!(r.code, 2);
    assert!(r.stderr.contains("line 2") && r.stderr.contains("mystery_key"), "{}", r.stderr);

    let r = stam(&["gen-data", "--config", s(&dir.path().join("absent.cfg"))], &[]);
    assert_eq!(r.code, 3);
}

#[test]
fn missing_prerequisites_exit_4() {
    let ws = Workspace::new("");
    assert_eq!(stam(&["train", "--config", ws.cfg()], &[]).code, 4);
    assert_eq!(stam(&["ablate", "--config", ws.cfg()], &[]).code, 4);
    ws.gen();
    let r = stam(&["explain", "--config", ws.cfg(), "--checkpoint", s(&ws.root.join("none.stam"))], &[]);
    assert_eq!(r.code, 4);
    assert!(r.stderr.contains("none.stam"));
    let changed = Workspace::new("classes = 3\n");
    fs::rename(ws.data(), changed.data()).unwrap();
    assert_eq!(stam(&["train", "--config", changed.cfg()], &[]).code, 4, "manifest mismatch");
}

#[test]
fn locked_output_directory_is_refused() {
    let ws = Workspace::new("");
    fs::create_dir_all(ws.data()).unwrap();
    fs::write(ws.data().join(".stam.lock"), "123\n").unwrap();
    let r = stam(&["gen-data", "--config", ws.cfg()], &[]);
    assert_eq!(r.code, 3);
    assert!(r.stderr.contains(".stam.lock"), "{}", r.stderr);
    fs::remove_file(ws.data().join(".stam.lock")).unwrap();
    ws.gen();
    assert!(!ws.data().join(".stam.lock").exists());
}

#[test]
fn toy_two_class_run_is_accurate_and_deterministic() {
    let ws = Workspace::new(
        "variant = cnn-only\nepochs = 10\npatience = 10\nsequences_per_class = 40\nframes_per_sequence = 8\n\
         frame_height = 32\nframe_width = 32\nbackbone_channels = 8,16,32\nn = 4\nbatch_size = 4\n",
    );
    ws.gen();
    let a = stam(&["train", "--config", ws.cfg()], &[]);
    assert_eq!(a.code, 0, "{}", a.stderr);
    let line = a.stdout.lines().find(|l| l.starts_with("test_accuracy=")).unwrap();
    let acc: f64 = line["test_accuracy=".len()..].parse().unwrap();
    assert!(acc >= 0.95, "{acc}");
    assert_eq!(
        files(&ws.run_dir()),
        ["checkpoint.stam", "config.resolved.txt", "evaluation.txt", "metrics.tsv"]
    );

    let other = ws.root.join("run2");
    let b = stam(&["train", "--config", ws.cfg(), "--out", s(&other)], &[]);
    assert_eq!(b.stdout, a.stdout);
    for name in ["metrics.tsv", "checkpoint.stam", "evaluation.txt"] {
        assert_eq!(fs::read(ws.run_dir().join(name)).unwrap(), fs::read(other.join(name)).unwrap(), "{name}");
    }
    let resolved = fs::read_to_string(ws.run_dir().join("config.resolved.txt")).unwrap();
    assert!(resolved.contains("variant = cnn-only") && resolved.contains("epochs = 10"));
}

#[test]
fn interrupted_training_keeps_previous_checkpoint_intact() {
    let ws = Workspace::new("epochs = 50\npatience = 50\n");
    ws.gen();
    assert_eq!(stam(&["train", "--config", ws.cfg()], &[]).code, 0);
    let ckpt = ws.run_dir().join("checkpoint.stam");
    let before = fs::read(&ckpt).unwrap();

    let mut child = Command::new(env!("CARGO_BIN_EXE_stam"))
        .args(["train", "--config", ws.cfg()])
        .env("RUST_LOG", "off")
        .spawn()
        .unwrap();
    std::thread::sleep(Duration::from_millis(300));
    child.kill().unwrap();
    child.wait().unwrap();
    let after = fs::read(&ckpt).unwrap();
    assert!(after == before || load_checkpoint(&ckpt).is_ok());
    assert!(load_checkpoint(&ckpt).is_ok());
}

#[test]
fn ablation_report_round_trips_and_gaps_recompute() {
    let ws = Workspace::new(
        "epochs = 1\nablation_variants = cnn-only,full-stam\nablation_lengths = 2,3\nablation_seeds = 0,1\n",
    );
    ws.gen();
    let r = stam(&["ablate", "--config", ws.cfg()], &[("STAM_THREADS", "2")]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    let table = fs::read_to_string(ws.run_dir().join("ablation.tsv")).unwrap();
    let report = AblationReport::from_table(&table).unwrap();
    assert_eq!(report.cells.len(), 2 * 2 * 2 * 2);
    assert_eq!(report.to_table(), table);
    assert_eq!(fs::read_to_string(ws.run_dir().join("ablation_summary.txt")).unwrap(), r.stdout);

    // hand recomputation from the raw cells
    let mean = |v: Variant, n: usize, w: Window| {
        let accs: Vec<f64> = report
            .cells
            .iter()
            .filter(|c| c.key.variant == v && c.key.n == n && c.key.window == w)
            .map(|c| c.outcome.as_ref().unwrap().test_accuracy)
            .collect();
        accs.iter().sum::<f64>() / accs.len() as f64
    };
    let gap = |w: Window| {
        [2, 3].iter().map(|&n| mean(Variant::FullStam, n, w) - mean(Variant::CnnOnly, n, w)).sum::<f64>() / 2.0
    };
    let g = report.gap_summary().unwrap();
    assert!((g.clean_gap - gap(Window::FromOnset)).abs() < 1e-12);
    assert!((g.noisy_gap - gap(Window::FromStart)).abs() < 1e-12);
    assert!(r.stdout.contains(&format!("clean: {:+.4}", gap(Window::FromOnset))), "{}", r.stdout);
    assert!(r.stdout.contains(&format!("noisy: {:+.4}", gap(Window::FromStart))));
}

#[test]
fn grid_below_ninety_percent_exits_5() {
    // from_onset cannot supply 7 frames from 7-frame sequences with a prefix
    let ws = Workspace::new("epochs = 1\nablation_variants = cnn-only\nablation_lengths = 2,7\nablation_seeds = 0\n");
    ws.gen();
    let r = stam(&["ablate", "--config", ws.cfg()], &[("STAM_THREADS", "1")]);
    assert_eq!(r.code, 5, "{}", r.stderr);
    let report = AblationReport::from_table(&fs::read_to_string(ws.run_dir().join("ablation.tsv")).unwrap()).unwrap();
    assert_eq!((report.completed(), report.cells.len()), (3, 4));
}

#[test]
fn bad_thread_budget_is_a_config_error() {
    let ws = Workspace::new("");
    assert_eq!(stam(&["ablate", "--config", ws.cfg()], &[("STAM_THREADS", "zero")]).code, 2);
    assert_eq!(stam(&["ablate", "--config", ws.cfg()], &[("STAM_THREADS", "0")]).code, 2);
}

#[test]
fn explain_writes_maps_and_matches_library() {
    let ws = Workspace::new("epochs = 2\nquery_token = 5\ntop_k = 3\n");
    ws.gen();
    assert_eq!(stam(&["train", "--config", ws.cfg()], &[]).code, 0);
    let ckpt = ws.run_dir().join("checkpoint.stam");
    let out = ws.root.join("explain");
    let r = stam(&["explain", "--config", ws.cfg(), "--checkpoint", s(&ckpt), "--sample", "7", "--out", s(&out)], &[]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    let names = files(&out);
    let saliency: Vec<_> = names.iter().filter(|n| n.starts_with("saliency_") && !n.contains("overlay")).collect();
    let overlays: Vec<_> = names.iter().filter(|n| n.ends_with("_overlay.pgm")).collect();
    assert_eq!((saliency.len(), overlays.len()), (3, 3));
    for name in saliency {
        assert!(fs::read(out.join(name)).unwrap().starts_with(b"P5\n16 16\n255\n"));
    }

    let text = fs::read_to_string(out.join("attention.txt")).unwrap();
    let rows = AttentionInspection::parse_rows(&text).unwrap();
    let params = load_checkpoint(&ckpt).unwrap();
    let ds = Dataset::open(&ws.data()).unwrap();
    let item = load_batch(&ds, &[7], Window::FromOnset, 3).items.remove(0);
    let lib = inspect_temporal_attention(&params, &item.frames, 5, 3).unwrap();
    assert_eq!(rows, lib.top);

    let again = ws.root.join("explain2");
    stam(&["explain", "--config", ws.cfg(), "--checkpoint", s(&ckpt), "--sample", "7", "--out", s(&again)], &[]);
    for name in &names {
        if name != "config.resolved.txt" {
            assert_eq!(fs::read(out.join(name)).unwrap(), fs::read(again.join(name)).unwrap(), "{name}");
        }
    }
    let r = stam(&["explain", "--config", ws.cfg(), "--checkpoint", s(&ckpt), "--sample", "999"], &[]);
    assert_eq!(r.code, 4);
}
