//! Dataset generation and the on-disk layout:
//!
//! ```text
//! <root>/manifest.txt          key = value generator settings
//! <root>/index.tsv             id, label, motion, onset_index, split, path
//! <root>/sequences/seq_NNNNNN.tseq
//! ```
//!
//! A `.tseq` file is `"TSEQ1"`, then `H`, `W`, `n_total` as little-endian
//! `u32`, then `n_total·H·W` little-endian `f64` frame values, then
//! `n_total·H·W` mask bytes (0 or 1).

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::detect::detect_first_contact;
use super::render::{generate_sequence, Motion, RenderParams, SequenceSample};
use super::texture::{default_classes, TextureClass};
use super::{derive_seed, DataError, Result};
use crate::io::write_atomic;
use crate::tensor::Tensor;

const TSEQ_MAGIC: &[u8; 5] = b"TSEQ1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(format!("unknown split {s:?}")),
        }
    }
}

/// Where an input window starts within a sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Window {
    /// `n` frames starting at the detected contact onset.
    FromOnset,
    /// The first `n` frames, pre-contact noise included.
    FromStart,
}

impl Window {
    pub const ALL: [Window; 2] = [Window::FromOnset, Window::FromStart];

    pub fn as_str(self) -> &'static str {
        match self {
            Window::FromOnset => "from_onset",
            Window::FromStart => "from_start",
        }
    }
}

impl fmt::Display for Window {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Window {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "from_onset" => Ok(Window::FromOnset),
            "from_start" => Ok(Window::FromStart),
            _ => Err(format!("unknown window {s:?} (expected from_onset or from_start)")),
        }
    }
}

/// Generator settings; together with the seed they determine every byte of
/// a dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub seed: u64,
    pub classes: usize,
    pub sequences_per_class: usize,
    pub frames_per_sequence: usize,
    pub frame_height: usize,
    pub frame_width: usize,
    /// Relative frequency of press, slip and twist.
    pub motion_mix: [u32; 3],
    /// Inclusive range of pre-contact frames; `(0, 0)` disables them.
    pub noise_prefix: (usize, usize),
    /// Relative size of train, val and test.
    pub split_ratio: [u32; 3],
}

impl Default for DatasetManifest {
    fn default() -> Self {
        DatasetManifest {
            seed: 0,
            classes: 10,
            sequences_per_class: 60,
            frames_per_sequence: 12,
            frame_height: 32,
            frame_width: 32,
            motion_mix: [7, 1, 2],
            noise_prefix: (1, 3),
            split_ratio: [7, 2, 1],
        }
    }
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(DataError::Parameter(m));
        if self.classes < 2 {
            return err(format!("need at least 2 classes, got {}", self.classes));
        }
        if self.sequences_per_class == 0 {
            return err("sequences_per_class must be positive".into());
        }
        if self.frame_height < 16 || self.frame_width < 16 {
            return err(format!("frames must be at least 16x16, got {}x{}", self.frame_height, self.frame_width));
        }
        let (lo, hi) = self.noise_prefix;
        if lo > hi || hi >= self.frames_per_sequence {
            return err(format!(
                "noise prefix range [{lo}, {hi}] must be ordered and below {} frames",
                self.frames_per_sequence
            ));
        }
        if self.motion_mix.iter().sum::<u32>() == 0 || self.split_ratio.iter().sum::<u32>() == 0 {
            return err("motion mix and split ratio need a positive total".into());
        }
        Ok(())
    }

    pub fn render_params(&self) -> RenderParams {
        RenderParams::with_size(self.frame_height, self.frame_width)
    }

    pub fn total_sequences(&self) -> usize {
        self.classes * self.sequences_per_class
    }

    pub fn to_text(&self) -> String {
        let [p, s, t] = self.motion_mix;
        let [a, b, c] = self.split_ratio;
        format!(
            "seed = {}\nclasses = {}\nsequences_per_class = {}\nframes_per_sequence = {}\nframe_height = {}\nframe_width = {}\nmotion_mix = {p}:{s}:{t}\nnoise_prefix_min = {}\nnoise_prefix_max = {}\nsplit_ratio = {a}:{b}:{c}\n",
            self.seed,
            self.classes,
            self.sequences_per_class,
            self.frames_per_sequence,
            self.frame_height,
            self.frame_width,
            self.noise_prefix.0,
            self.noise_prefix.1,
        )
    }

    pub fn from_text(text: &str) -> std::result::Result<Self, String> {
        let mut m = DatasetManifest::default();
        for (no, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or(format!("line {}: expected key = value", no + 1))?;
            let (k, v) = (k.trim(), v.trim());
            let bad = || format!("line {}: bad value for {k}: {v:?}", no + 1);
            let num = || v.parse::<usize>().map_err(|_| bad());
            let ratio = || -> std::result::Result<[u32; 3], String> {
                let parts: Vec<u32> = v.split(':').map(|p| p.trim().parse().map_err(|_| bad())).collect::<std::result::Result<_, _>>()?;
                parts.try_into().map_err(|_| bad())
            };
            match k {
                "seed" => m.seed = v.parse().map_err(|_| bad())?,
                "classes" => m.classes = num()?,
                "sequences_per_class" => m.sequences_per_class = num()?,
                "frames_per_sequence" => m.frames_per_sequence = num()?,
                "frame_height" => m.frame_height = num()?,
                "frame_width" => m.frame_width = num()?,
                "motion_mix" => m.motion_mix = ratio()?,
                "noise_prefix_min" => m.noise_prefix.0 = num()?,
                "noise_prefix_max" => m.noise_prefix.1 = num()?,
                "split_ratio" => m.split_ratio = ratio()?,
                _ => return Err(format!("line {}: unknown key {k:?}", no + 1)),
            }
        }
        Ok(m)
    }

    /// SHA-256 of the canonical text form, hex encoded.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_text().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Splits `total` items by integer ratio with rounding; the last bucket
/// absorbs the remainder.
fn apportion(total: usize, ratio: &[u32; 3]) -> [usize; 3] {
    let sum: u32 = ratio.iter().sum();
    let first = ((total as f64) * ratio[0] as f64 / sum as f64).round() as usize;
    let second = (((total as f64) * ratio[1] as f64 / sum as f64).round() as usize).min(total - first.min(total));
    let first = first.min(total);
    [first, second, total - first - second]
}

#[derive(Clone, Debug, PartialEq)]
pub struct IndexRecord {
    pub id: usize,
    pub label: usize,
    pub motion: Motion,
    pub onset_index: usize,
    pub split: Split,
    /// Relative to the dataset root.
    pub path: String,
}

/// A generated dataset held in memory.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub records: Vec<IndexRecord>,
    pub samples: Vec<SequenceSample>,
}

impl Dataset {
    /// Generates every sequence in memory.
    pub fn generate(manifest: &DatasetManifest) -> Result<Self> {
        Self::generate_with(manifest, &default_classes(manifest.classes), &manifest.render_params())
    }

    /// Like [`Dataset::generate`] with explicit texture classes and sensor
    /// model; `classes` must hold `manifest.classes` entries with ids `0..K`.
    pub fn generate_with(manifest: &DatasetManifest, classes: &[TextureClass], params: &RenderParams) -> Result<Self> {
        manifest.validate()?;
        if classes.len() != manifest.classes || classes.iter().enumerate().any(|(i, c)| c.class_id != i) {
            return Err(DataError::Parameter(format!(
                "expected {} classes with ids 0..{}",
                manifest.classes, manifest.classes
            )));
        }
        if (params.frame_height, params.frame_width) != (manifest.frame_height, manifest.frame_width) {
            return Err(DataError::Parameter("render size differs from the manifest frame size".into()));
        }
        let per_class = manifest.sequences_per_class;
        let motions = Motion::ALL;
        let mut records = Vec::with_capacity(manifest.total_sequences());
        let mut samples = Vec::with_capacity(manifest.total_sequences());
        for class in classes {
            let c = class.class_id;
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(manifest.seed, 1_000_000 + c as u64));
            let mut motion_of: Vec<Motion> = apportion(per_class, &manifest.motion_mix)
                .iter()
                .zip(motions)
                .flat_map(|(&n, m)| std::iter::repeat_n(m, n))
                .collect();
            motion_of.shuffle(&mut rng);
            let mut split_of: Vec<Split> = apportion(per_class, &manifest.split_ratio)
                .iter()
                .zip([Split::Train, Split::Val, Split::Test])
                .flat_map(|(&n, s)| std::iter::repeat_n(s, n))
                .collect();
            split_of.shuffle(&mut rng);
            for i in 0..per_class {
                let id = c * per_class + i;
                let seq_seed = derive_seed(manifest.seed, id as u64);
                let (lo, hi) = manifest.noise_prefix;
                let prefix = ChaCha8Rng::seed_from_u64(derive_seed(seq_seed, 7)).random_range(lo..=hi);
                let sample =
                    generate_sequence(class, motion_of[i], manifest.frames_per_sequence, prefix, seq_seed, params)?;
                records.push(IndexRecord {
                    id,
                    label: c,
                    motion: motion_of[i],
                    onset_index: prefix,
                    split: split_of[i],
                    path: format!("sequences/seq_{id:06}.tseq"),
                });
                samples.push(sample);
            }
        }
        Ok(Dataset { manifest: manifest.clone(), records, samples })
    }

    /// Reads a dataset written by [`build_dataset`].
    pub fn open(root: &Path) -> Result<Self> {
        let manifest_path = root.join("manifest.txt");
        let text = fs::read_to_string(&manifest_path).map_err(|e| DataError::io(&manifest_path, e))?;
        let manifest = DatasetManifest::from_text(&text)
            .map_err(|detail| DataError::Format { path: manifest_path.display().to_string(), detail })?;
        let records = read_index(&root.join("index.tsv"))?;
        let mut samples = Vec::with_capacity(records.len());
        for r in &records {
            let (frames, masks) = read_sequence_file(&root.join(&r.path))?;
            samples.push(SequenceSample {
                frames,
                label: r.label,
                motion: r.motion,
                onset_index: r.onset_index,
                contact_masks: masks,
            });
        }
        Ok(Dataset { manifest, records, samples })
    }

    pub fn ids(&self, split: Split) -> Vec<usize> {
        self.records.iter().filter(|r| r.split == split).map(|r| r.id).collect()
    }

    pub fn sample(&self, id: usize) -> Option<&SequenceSample> {
        self.records.iter().position(|r| r.id == id).map(|i| &self.samples[i])
    }

    /// `[train, val, test]` counts.
    pub fn split_counts(&self) -> [usize; 3] {
        let mut c = [0; 3];
        for r in &self.records {
            c[r.split as usize] += 1;
        }
        c
    }
}

/// Writes the dataset under `root`, refusing to overwrite an existing index.
pub fn build_dataset(manifest: &DatasetManifest, root: &Path) -> Result<Dataset> {
    let dataset = Dataset::generate(manifest)?;
    let index_path = root.join("index.tsv");
    if index_path.exists() {
        return Err(DataError::io(
            &index_path,
            std::io::Error::new(std::io::ErrorKind::AlreadyExists, "dataset already exists"),
        ));
    }
    let seq_dir = root.join("sequences");
    fs::create_dir_all(&seq_dir).map_err(|e| DataError::io(&seq_dir, e))?;
    for (r, s) in dataset.records.iter().zip(&dataset.samples) {
        write_sequence_file(&root.join(&r.path), &s.frames, &s.contact_masks)?;
    }
    let mut index = String::from("id\tlabel\tmotion\tonset_index\tsplit\tpath\n");
    for r in &dataset.records {
        index.push_str(&format!("{}\t{}\t{}\t{}\t{}\t{}\n", r.id, r.label, r.motion, r.onset_index, r.split, r.path));
    }
    write_atomic(&index_path, index.as_bytes()).map_err(|e| DataError::io(&index_path, e))?;
    // manifest last: its presence marks a complete dataset
    let manifest_path = root.join("manifest.txt");
    write_atomic(&manifest_path, manifest.to_text().as_bytes()).map_err(|e| DataError::io(&manifest_path, e))?;
    Ok(dataset)
}

pub fn read_index(path: &Path) -> Result<Vec<IndexRecord>> {
    let text = fs::read_to_string(path).map_err(|e| DataError::io(path, e))?;
    let fmt_err = |line: usize, detail: String| DataError::Format {
        path: path.display().to_string(),
        detail: format!("line {line}: {detail}"),
    };
    let mut out = Vec::new();
    for (no, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        let [id, label, motion, onset, split, p] = f[..] else {
            return Err(fmt_err(no + 1, format!("expected 6 fields, got {}", f.len())));
        };
        let num = |s: &str| s.parse::<usize>().map_err(|_| fmt_err(no + 1, format!("bad integer {s:?}")));
        out.push(IndexRecord {
            id: num(id)?,
            label: num(label)?,
            motion: motion.parse().map_err(|e| fmt_err(no + 1, e))?,
            onset_index: num(onset)?,
            split: split.parse().map_err(|e| fmt_err(no + 1, e))?,
            path: p.to_string(),
        });
    }
    Ok(out)
}

pub fn write_sequence_file(path: &Path, frames: &[Tensor], masks: &[Tensor]) -> Result<()> {
    let Some(first) = frames.first() else {
        return Err(DataError::Parameter("sequence has no frames".into()));
    };
    let (h, w) = (first.shape()[0], first.shape()[1]);
    let mut out = TSEQ_MAGIC.to_vec();
    for v in [h, w, frames.len()] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for f in frames {
        for v in f.values() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    for m in masks {
        out.extend(m.values().iter().map(|&v| u8::from(v != 0.0)));
    }
    write_atomic(path, &out).map_err(|e| DataError::io(path, e))
}

pub fn read_sequence_file(path: &Path) -> Result<(Vec<Tensor>, Vec<Tensor>)> {
    let bytes = fs::read(path).map_err(|e| DataError::io(path, e))?;
    let bad = |detail: &str| DataError::Format { path: path.display().to_string(), detail: detail.into() };
    if bytes.len() < 17 || &bytes[..5] != TSEQ_MAGIC {
        return Err(bad("missing TSEQ1 header"));
    }
    let u = |i: usize| u32::from_le_bytes(bytes[5 + 4 * i..9 + 4 * i].try_into().unwrap()) as usize;
    let (h, w, n) = (u(0), u(1), u(2));
    let px = h * w;
    if h == 0 || w == 0 || n == 0 || bytes.len() != 17 + n * px * 9 {
        return Err(bad("payload size does not match header"));
    }
    let body = &bytes[17..];
    let (vals, mask_bytes) = body.split_at(n * px * 8);
    let frames = vals
        .chunks_exact(px * 8)
        .map(|c| {
            let v = c.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect();
            Tensor::new(&[h, w, 1], v).expect("extents checked")
        })
        .collect();
    let masks = mask_bytes
        .chunks_exact(px)
        .map(|c| Tensor::new(&[h, w], c.iter().map(|&b| f64::from(b)).collect()).expect("extents checked"))
        .collect();
    Ok((frames, masks))
}

/// One input window.
#[derive(Clone, Debug)]
pub struct BatchItem {
    pub id: usize,
    pub frames: Vec<Tensor>,
    pub masks: Vec<Tensor>,
    pub label: usize,
    /// Index of the first returned frame within the full sequence.
    pub start: usize,
}

#[derive(Clone, Debug, Default)]
pub struct BatchReport {
    pub items: Vec<BatchItem>,
    /// Sequences that could not supply `n` frames, with the reason.
    pub skipped: Vec<(usize, String)>,
}

/// Slices `n`-frame windows for the given sequence ids. Onsets come from
/// [`detect_first_contact`], not from the generator's ground truth.
pub fn load_batch(dataset: &Dataset, ids: &[usize], window: Window, n: usize) -> BatchReport {
    let mut report = BatchReport::default();
    for &id in ids {
        let Some(s) = dataset.sample(id) else {
            report.skipped.push((id, "unknown sequence id".into()));
            continue;
        };
        let start = match window {
            Window::FromStart => 0,
            Window::FromOnset => detect_first_contact(&s.frames),
        };
        if start + n > s.frames.len() {
            report.skipped.push((id, format!("needs frames {start}..{} but has {}", start + n, s.frames.len())));
            continue;
        }
        report.items.push(BatchItem {
            id,
            frames: s.frames[start..start + n].to_vec(),
            masks: s.contact_masks[start..start + n].to_vec(),
            label: s.label,
            start,
        });
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn apportion_default_split() {
        assert_eq!(apportion(60, &[7, 2, 1]), [42, 12, 6]);
        assert_eq!(apportion(60, &[7, 1, 2]), [42, 6, 12]);
        assert_eq!(apportion(5, &[7, 2, 1]), [4, 1, 0]);
        assert_eq!(apportion(1, &[1, 1, 1]), [0, 0, 1]);
    }

    #[test]
    fn manifest_text_round_trip() {
        let m = DatasetManifest { seed: 77, noise_prefix: (0, 2), ..DatasetManifest::default() };
        assert_eq!(DatasetManifest::from_text(&m.to_text()).unwrap(), m);
        assert_ne!(m.hash(), DatasetManifest::default().hash());
        assert!(DatasetManifest::from_text("bogus = 1").is_err());
    }

    #[test]
    fn invalid_manifests_rejected() {
        let bad = [
            DatasetManifest { classes: 1, ..Default::default() },
            DatasetManifest { noise_prefix: (3, 1), ..Default::default() },
            DatasetManifest { noise_prefix: (1, 12), ..Default::default() },
            DatasetManifest { frame_height: 8, ..Default::default() },
        ];
        for m in bad {
            assert!(m.validate().is_err(), "{m:?}");
        }
    }
}
