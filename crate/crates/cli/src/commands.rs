use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use stam::config::RunConfig;
use stam::data::{build_dataset, load_batch, Dataset, DatasetManifest, Split};
use stam::explain::{export_heatmap, grad_cam, inspect_temporal_attention};
use stam::model::{load_checkpoint, model_forward, predict, save_checkpoint};
use stam::train::{evaluate, run_ablation, train as train_model};

use crate::error::CliError;
use crate::output::OutputDir;

pub const RESOLVED_CONFIG: &str = "config.resolved.txt";
pub const CHECKPOINT: &str = "checkpoint.stam";

#[derive(Debug, Default)]
pub struct Options {
    pub config: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
}

fn load_config(opts: &Options) -> Result<RunConfig, CliError> {
    let mut cfg = match &opts.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
            RunConfig::parse(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = opts.seed {
        cfg.set_seed(seed);
        cfg.validate()?;
    }
    Ok(cfg)
}

fn echo_config(out: &OutputDir, cfg: &RunConfig) -> Result<(), CliError> {
    let path = out.write(RESOLVED_CONFIG, cfg.to_text().as_bytes())?;
    log::info!("resolved config written to {}", path.display());
    Ok(())
}

fn read_manifest(root: &Path) -> Result<Option<DatasetManifest>, CliError> {
    let path = root.join("manifest.txt");
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
    DatasetManifest::from_text(&text).map(Some).map_err(|e| CliError::invalid_file(&path, e))
}

/// Opens the configured dataset, insisting that it was generated from the
/// same manifest as the config describes.
fn open_dataset(cfg: &RunConfig) -> Result<Dataset, CliError> {
    let root = &cfg.data_dir;
    let Some(found) = read_manifest(root)? else {
        return Err(CliError::Missing(format!("no dataset at {}; run `stam gen-data` first", root.display())));
    };
    if found.hash() != cfg.dataset.hash() {
        return Err(CliError::Missing(format!(
            "dataset at {} was generated from manifest {} but the config describes {}; rerun `stam gen-data`",
            root.display(),
            &found.hash()[..12],
            &cfg.dataset.hash()[..12]
        )));
    }
    Ok(Dataset::open(root)?)
}

fn split_summary(counts: [usize; 3], classes: usize) -> String {
    let [train, val, test] = counts;
    format!("classes={classes} sequences={} train={train} val={val} test={test}", train + val + test)
}

pub fn gen_data(opts: &Options) -> Result<(), CliError> {
    let mut cfg = load_config(opts)?;
    if let Some(out) = &opts.out {
        cfg.data_dir = out.clone();
    }
    let out = OutputDir::claim(&cfg.data_dir)?;
    let manifest = &cfg.dataset;
    if let Some(existing) = read_manifest(out.root())? {
        if existing.hash() == manifest.hash() {
            let ds = Dataset::open(out.root())?;
            println!("up-to-date: {} (manifest {})", out.root().display(), &manifest.hash()[..12]);
            println!("{}", split_summary(ds.split_counts(), manifest.classes));
            return Ok(());
        }
        return Err(CliError::invalid_file(
            &out.path("manifest.txt"),
            "directory holds a dataset generated from a different manifest; choose another --out",
        ));
    }
    for stale in ["sequences", "index.tsv", ".staging"] {
        let p = out.path(stale);
        if p.exists() {
            log::warn!("removing incomplete output {}", p.display());
            let removed = if p.is_dir() { fs::remove_dir_all(&p) } else { fs::remove_file(&p) };
            removed.map_err(|e| CliError::io(&p, e))?;
        }
    }
    let staging = out.path(".staging");
    let ds = build_dataset(manifest, &staging)?;
    for name in ["sequences", "index.tsv", "manifest.txt"] {
        let (from, to) = (staging.join(name), out.path(name));
        fs::rename(&from, &to).map_err(|e| CliError::io(&to, e))?;
    }
    fs::remove_dir(&staging).map_err(|e| CliError::io(&staging, e))?;
    echo_config(&out, &cfg)?;
    println!("wrote {} (manifest {})", out.root().display(), &manifest.hash()[..12]);
    println!("{}", split_summary(ds.split_counts(), manifest.classes));
    Ok(())
}

pub fn train(opts: &Options) -> Result<(), CliError> {
    let mut cfg = load_config(opts)?;
    if let Some(out) = &opts.out {
        cfg.out_dir = out.clone();
    }
    let ds = open_dataset(&cfg)?;
    let out = OutputDir::claim(&cfg.out_dir)?;
    echo_config(&out, &cfg)?;
    log::info!("training {}", cfg.train);
    let outcome = train_model(&cfg.train, &ds)?;
    let test = evaluate(&outcome.params, &ds, Split::Test, &cfg.train)?;
    let ckpt = out.path(CHECKPOINT);
    save_checkpoint(&outcome.params, &ckpt).map_err(|e| CliError::invalid_file(&ckpt, e))?;
    out.write("metrics.tsv", outcome.metrics_table().as_bytes())?;
    let mut eval = format!("best_epoch={}\ntest_accuracy={}\ntest_loss={}\n", outcome.best_epoch, test.accuracy, test.mean_loss);
    eval.push_str("# confusion[true][predicted]\n");
    for row in &test.confusion {
        let cells: Vec<String> = row.iter().map(usize::to_string).collect();
        let _ = writeln!(eval, "{}", cells.join("\t"));
    }
    out.write("evaluation.txt", eval.as_bytes())?;
    log::info!("best epoch {} of {}; checkpoint {}", outcome.best_epoch, outcome.epochs.len(), ckpt.display());
    println!("test_accuracy={}", test.accuracy);
    Ok(())
}

fn thread_budget() -> Result<usize, CliError> {
    match std::env::var("STAM_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(CliError::Config(format!("STAM_THREADS must be a positive integer, got {v:?}"))),
        },
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, usize::from)),
    }
}

pub fn ablate(opts: &Options) -> Result<(), CliError> {
    let mut cfg = load_config(opts)?;
    if let Some(out) = &opts.out {
        cfg.out_dir = out.clone();
    }
    let threads = thread_budget()?;
    let ds = open_dataset(&cfg)?;
    if ds.manifest.noise_prefix.1 == 0 {
        return Err(CliError::Missing("the ablation needs a dataset generated with noise prefixes".into()));
    }
    let out = OutputDir::claim(&cfg.out_dir)?;
    echo_config(&out, &cfg)?;
    let total = cfg.ablation.cells().len();
    log::info!("running {total} cells on {threads} thread(s)");
    let report = run_ablation(&cfg.train, &ds, &cfg.ablation, threads)?;
    out.write("ablation.tsv", report.to_table().as_bytes())?;
    let summary = report.summary_text();
    out.write("ablation_summary.txt", summary.as_bytes())?;
    print!("{summary}");
    if report.completion_rate() < 0.9 {
        return Err(CliError::Grid { completed: report.completed(), total });
    }
    Ok(())
}

pub fn explain(opts: &Options, checkpoint: Option<PathBuf>, sample: Option<usize>) -> Result<(), CliError> {
    let mut cfg = load_config(opts)?;
    let ckpt = checkpoint.unwrap_or_else(|| cfg.out_dir.join(CHECKPOINT));
    if let Some(out) = &opts.out {
        cfg.out_dir = out.clone();
    }
    if !ckpt.exists() {
        return Err(CliError::Missing(format!("checkpoint {} not found; run `stam train` first", ckpt.display())));
    }
    let params = load_checkpoint(&ckpt).map_err(|e| CliError::invalid_file(&ckpt, e))?;
    let ds = open_dataset(&cfg)?;
    let id = match sample {
        Some(id) => id,
        None => *ds.ids(Split::Test).first().ok_or_else(|| CliError::Missing("dataset has no test sequences".into()))?,
    };
    if ds.sample(id).is_none() {
        return Err(CliError::Missing(format!("sequence {id} is not in {}", cfg.data_dir.display())));
    }
    let n = params.config.seq_len;
    let batch = load_batch(&ds, &[id], cfg.train.window, n);
    let Some(item) = batch.items.into_iter().next() else {
        let why = batch.skipped.first().map_or(String::new(), |s| s.1.clone());
        return Err(CliError::Missing(format!("sequence {id} cannot supply {n} frames: {why}")));
    };

    let out = OutputDir::claim(&cfg.out_dir)?;
    echo_config(&out, &cfg)?;
    let logits = model_forward(&item.frames, &params)?;
    let class = predict(logits.values());
    let (fh, _, _) = params.config.feature_dims();
    let upscale = params.config.frame_height / fh;
    for i in 0..n {
        let cam = grad_cam(&params, &item.frames, class, i)?;
        if cam.vanished {
            log::warn!("frame {i}: gradients vanished, saliency map is empty");
        }
        export_heatmap(&cam.values, &item.frames[i], &out.path(&format!("saliency_{i}.pgm")), upscale)?;
    }
    let mut text = format!("# sequence {id} label {} predicted {class} start {}\n", item.label, item.start);
    if params.config.variant.has_temporal() {
        let insp = inspect_temporal_attention(&params, &item.frames, cfg.query_token, cfg.top_k)?;
        text.push_str(&insp.to_text());
    } else {
        let _ = writeln!(text, "# variant {} has no temporal attention", params.config.variant);
    }
    out.write("attention.txt", text.as_bytes())?;
    println!("sequence={id} label={} predicted={class} frames={n} out={}", item.label, out.root().display());
    Ok(())
}
