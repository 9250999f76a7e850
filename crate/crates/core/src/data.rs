//! Synthetic fine-grained "vehicle" images.
//!
//! Every image shows the same template: a textured background, a car body
//! in a random paint colour, a window band and two wheels. Class identity
//! lives only in three small striped patches (front light, grille, tail
//! light). Each patch comes in one of a few stripe patterns with identical
//! ink coverage, so classes differ in local texture rather than in colour
//! or brightness. Patch positions jitter by up to 3 px and brightness by
//! up to 10% per sample.
//!
//! On disk a dataset is a directory with `manifest.txt`, `mean.cmpt` and
//! one CMPT blob per image under `train/` and `test/`.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::tensor::{Rng, Tensor};

pub const MANIFEST_FILE: &str = "manifest.txt";
pub const MEAN_FILE: &str = "mean.cmpt";
const CHANNELS: usize = 3;
const SLOTS: usize = 3;
const MOTIF_JITTER: i64 = 3;
const BRIGHTNESS_JITTER: f64 = 0.10;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Split::Train),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DatasetConfig {
    pub seed: u64,
    pub num_classes: usize,
    pub per_class_train: usize,
    pub per_class_test: usize,
    pub image_size: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            num_classes: 8,
            per_class_train: 64,
            per_class_test: 16,
            image_size: 32,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::arg(format!("need at least 2 classes, got {}", self.num_classes)));
        }
        if self.num_classes > MAX_CLASSES {
            return Err(Error::arg(format!("at most {MAX_CLASSES} classes supported, got {}", self.num_classes)));
        }
        if self.image_size < 16 {
            return Err(Error::arg(format!("image size must be >= 16, got {}", self.image_size)));
        }
        if self.per_class_train == 0 || self.per_class_test == 0 {
            return Err(Error::arg("each class needs at least one train and one test sample"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SampleEntry {
    pub file: String,
    pub label: usize,
    pub split: Split,
}

/// Parsed `manifest.txt`.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub num_classes: usize,
    pub per_class_train: usize,
    pub per_class_test: usize,
    pub image_size: usize,
    pub channels: usize,
    pub seed: u64,
    pub mean_image_file: String,
    pub samples: Vec<SampleEntry>,
}

impl DatasetManifest {
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "num_classes={}\nper_class_train={}\nper_class_test={}\nimage_size={}\nchannels={}\nseed={}\nmean_image_file={}\n\n",
            self.num_classes,
            self.per_class_train,
            self.per_class_test,
            self.image_size,
            self.channels,
            self.seed,
            self.mean_image_file
        );
        for s in &self.samples {
            out.push_str(&format!("{}\t{}\t{}\n", s.file, s.label, s.split));
        }
        out
    }

    pub fn parse(path: &Path, text: &str) -> Result<Self> {
        let bad = |reason: String| Error::format(path, reason);
        let (head, body) = text
            .split_once("\n\n")
            .ok_or_else(|| bad("missing blank line between header and sample list".into()))?;
        let mut keys = std::collections::BTreeMap::new();
        for line in head.lines() {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| bad(format!("header line {line:?} is not key=value")))?;
            keys.insert(k.trim(), v.trim());
        }
        let int = |k: &str| -> Result<u64> {
            keys.get(k)
                .ok_or_else(|| bad(format!("missing header key {k}")))?
                .parse()
                .map_err(|_| bad(format!("header key {k} is not an integer")))
        };
        let manifest = Self {
            num_classes: int("num_classes")? as usize,
            per_class_train: int("per_class_train")? as usize,
            per_class_test: int("per_class_test")? as usize,
            image_size: int("image_size")? as usize,
            channels: int("channels")? as usize,
            seed: int("seed")?,
            mean_image_file: keys
                .get("mean_image_file")
                .ok_or_else(|| bad("missing header key mean_image_file".into()))?
                .to_string(),
            samples: body
                .lines()
                .filter(|l| !l.is_empty())
                .enumerate()
                .map(|(n, line)| {
                    let fields: Vec<&str> = line.split('\t').collect();
                    let [file, label, split] = fields[..] else {
                        return Err(bad(format!("sample line {}: expected path<TAB>label<TAB>split", n + 1)));
                    };
                    Ok(SampleEntry {
                        file: file.to_string(),
                        label: label
                            .parse()
                            .map_err(|_| bad(format!("{file}: label {label:?} is not an integer")))?,
                        split: Split::parse(split).ok_or_else(|| bad(format!("{file}: unknown split {split:?}")))?,
                    })
                })
                .collect::<Result<_>>()?,
        };
        if manifest.channels != CHANNELS {
            return Err(bad(format!("channels={} unsupported, expected {CHANNELS}", manifest.channels)));
        }
        Ok(manifest)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `(3, S, S)`, values in `[0, 1]`.
    pub image: Tensor,
    pub label: usize,
}

/// A dataset held in memory.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
    /// Per-pixel mean of the training images, `(3, S, S)`.
    pub mean: Tensor,
}

impl Dataset {
    pub fn num_classes(&self) -> usize {
        self.manifest.num_classes
    }

    pub fn image_size(&self) -> usize {
        self.manifest.image_size
    }
}

// --- rendering ------------------------------------------------------------

/// 4x4 stripe patterns, all with eight inked cells.
const PATTERNS: [[[u8; 4]; 4]; 4] = [
    [[1, 1, 1, 1], [0, 0, 0, 0], [1, 1, 1, 1], [0, 0, 0, 0]],
    [[1, 0, 1, 0], [1, 0, 1, 0], [1, 0, 1, 0], [1, 0, 1, 0]],
    [[1, 1, 0, 0], [1, 1, 0, 0], [0, 0, 1, 1], [0, 0, 1, 1]],
    [[1, 0, 0, 1], [0, 1, 1, 0], [0, 1, 1, 0], [1, 0, 0, 1]],
];
const MAX_CLASSES: usize = 64; // 4 patterns ^ 3 slots

fn variants_per_slot(num_classes: usize) -> usize {
    (2..=PATTERNS.len())
        .find(|v| v.pow(SLOTS as u32) >= num_classes)
        .unwrap_or(PATTERNS.len())
}

/// Pattern index for each slot of `class`.
pub fn class_motifs(class: usize, num_classes: usize) -> [usize; SLOTS] {
    let v = variants_per_slot(num_classes);
    [class % v, (class / v) % v, (class / (v * v)) % v]
}

/// Per-sample nuisance variables, shared by every class.
#[derive(Clone, Debug, PartialEq)]
pub struct Nuisance {
    background: [f64; 3],
    gradient: f64,
    paint: [f64; 3],
    brightness: f64,
    body_shift: (i64, i64),
    motif_shift: [(i64, i64); SLOTS],
    texture: Vec<f64>,
}

impl Nuisance {
    pub fn sample(rng: &mut Rng, size: usize) -> Self {
        let mut jitter = |r: i64| rng.below((2 * r + 1) as usize) as i64 - r;
        let body_shift = (jitter(1), jitter(1));
        let motif_shift = [
            (jitter(MOTIF_JITTER), jitter(MOTIF_JITTER)),
            (jitter(MOTIF_JITTER), jitter(MOTIF_JITTER)),
            (jitter(MOTIF_JITTER), jitter(MOTIF_JITTER)),
        ];
        let background = [rng.uniform(0.25, 0.55), rng.uniform(0.25, 0.55), rng.uniform(0.25, 0.55)];
        let gradient = rng.uniform(-0.15, 0.15);
        let paint = [rng.uniform(0.1, 0.9), rng.uniform(0.1, 0.9), rng.uniform(0.1, 0.9)];
        let brightness = rng.uniform(1.0 - BRIGHTNESS_JITTER, 1.0 + BRIGHTNESS_JITTER);
        let texture = (0..size * size).map(|_| rng.uniform(-0.06, 0.06)).collect();
        Self {
            background,
            gradient,
            paint,
            brightness,
            body_shift,
            motif_shift,
            texture,
        }
    }
}

struct Canvas {
    size: usize,
    px: Vec<f64>,
}

impl Canvas {
    fn fill_rect(&mut self, x0: i64, y0: i64, w: i64, h: i64, rgb: [f64; 3]) {
        let s = self.size as i64;
        for y in y0.max(0)..(y0 + h).min(s) {
            for x in x0.max(0)..(x0 + w).min(s) {
                for (c, &v) in rgb.iter().enumerate() {
                    self.px[(c * self.size + y as usize) * self.size + x as usize] = v;
                }
            }
        }
    }

    fn fill_disc(&mut self, cx: f64, cy: f64, r: f64, rgb: [f64; 3]) {
        for y in 0..self.size {
            for x in 0..self.size {
                let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                if dx * dx + dy * dy <= r * r {
                    for (c, &v) in rgb.iter().enumerate() {
                        self.px[(c * self.size + y) * self.size + x] = v;
                    }
                }
            }
        }
    }
}

/// Motif anchors on the 32 px template: front light, grille, tail light.
/// The side slots sit at different heights so a horizontal flip never maps
/// one onto the other.
const ANCHORS: [(f64, f64); SLOTS] = [(3.0, 19.0), (14.0, 15.0), (25.0, 10.0)];

const INK: [f64; 3] = [0.95, 0.9, 0.55];
const BACKING: [f64; 3] = [0.12, 0.12, 0.14];

/// Renders one `(3, S, S)` image of `class` under `nuisance`.
pub fn render(class: usize, num_classes: usize, nuisance: &Nuisance, size: usize) -> Tensor {
    let mut canvas = Canvas {
        size,
        px: vec![0.0; CHANNELS * size * size],
    };
    for y in 0..size {
        let shade = nuisance.gradient * (y as f64 / size as f64 - 0.5);
        for x in 0..size {
            for c in 0..CHANNELS {
                canvas.px[(c * size + y) * size + x] = nuisance.background[c] + shade;
            }
        }
    }

    let unit = size as f64 / 32.0;
    let at = |v: f64| (v * unit).round() as i64;
    let (bx, by) = nuisance.body_shift;
    // body, cabin, window band, wheels
    canvas.fill_rect(at(3.0) + bx, at(12.0) + by, at(26.0), at(10.0), nuisance.paint);
    canvas.fill_rect(at(9.0) + bx, at(6.0) + by, at(14.0), at(7.0), nuisance.paint);
    canvas.fill_rect(at(11.0) + bx, at(7.0) + by, at(10.0), at(4.0), [0.7, 0.8, 0.9]);
    let wheel = [0.08, 0.08, 0.08];
    canvas.fill_disc((8.5 * unit) + bx as f64, (22.5 * unit) + by as f64, 3.2 * unit, wheel);
    canvas.fill_disc((23.5 * unit) + bx as f64, (22.5 * unit) + by as f64, 3.2 * unit, wheel);

    let anchors = ANCHORS;
    let motifs = class_motifs(class, num_classes);
    let cell = ((size / 32).max(1)) as i64;
    for (slot, &(ax, ay)) in anchors.iter().enumerate() {
        let (jx, jy) = nuisance.motif_shift[slot];
        let pattern = &PATTERNS[motifs[slot]];
        for (r, row) in pattern.iter().enumerate() {
            for (col, &on) in row.iter().enumerate() {
                let x = at(ax) + bx + jx + col as i64 * cell;
                let y = at(ay) + by + jy + r as i64 * cell;
                canvas.fill_rect(x, y, cell, cell, if on == 1 { INK } else { BACKING });
            }
        }
    }

    for y in 0..size {
        for x in 0..size {
            let noise = nuisance.texture[y * size + x];
            for c in 0..CHANNELS {
                let v = &mut canvas.px[(c * size + y) * size + x];
                *v = ((*v + noise) * nuisance.brightness).clamp(0.0, 1.0);
            }
        }
    }
    Tensor::from_vec(&[CHANNELS, size, size], canvas.px).expect("canvas shape")
}

fn mse(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

/// Mean pixel MSE between random same-class pairs (nuisance variation)
/// and between different-class renders sharing one nuisance draw (motif
/// variation).
pub fn nuisance_vs_motif_mse(cfg: &DatasetConfig, pairs: usize) -> (f64, f64) {
    let mut rng = Rng::new(cfg.seed ^ 0x5eed);
    let (mut within, mut between) = (0.0, 0.0);
    for _ in 0..pairs {
        let class = rng.below(cfg.num_classes);
        let other = (class + 1 + rng.below(cfg.num_classes - 1)) % cfg.num_classes;
        let n1 = Nuisance::sample(&mut rng, cfg.image_size);
        let n2 = Nuisance::sample(&mut rng, cfg.image_size);
        within += mse(
            &render(class, cfg.num_classes, &n1, cfg.image_size),
            &render(class, cfg.num_classes, &n2, cfg.image_size),
        );
        between += mse(
            &render(class, cfg.num_classes, &n1, cfg.image_size),
            &render(other, cfg.num_classes, &n1, cfg.image_size),
        );
    }
    (within / pairs as f64, between / pairs as f64)
}

// --- generation and loading ----------------------------------------------

/// Renders all samples in memory. Sample order: train split then test
/// split, class-major within each.
pub fn synthesize(cfg: &DatasetConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = Rng::new(cfg.seed);
    let mut samples = Vec::new();
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (split, per_class) in [(Split::Train, cfg.per_class_train), (Split::Test, cfg.per_class_test)] {
        for label in 0..cfg.num_classes {
            for _ in 0..per_class {
                let nuisance = Nuisance::sample(&mut rng, cfg.image_size);
                let image = render(label, cfg.num_classes, &nuisance, cfg.image_size);
                let index = train.len() + test.len();
                samples.push(SampleEntry {
                    file: format!("{split}/{index:06}.cmpt"),
                    label,
                    split,
                });
                let sample = Sample { image, label };
                match split {
                    Split::Train => train.push(sample),
                    Split::Test => test.push(sample),
                }
            }
        }
    }
    let mean = mean_image(&train, cfg.image_size)?;
    Ok(Dataset {
        manifest: DatasetManifest {
            num_classes: cfg.num_classes,
            per_class_train: cfg.per_class_train,
            per_class_test: cfg.per_class_test,
            image_size: cfg.image_size,
            channels: CHANNELS,
            seed: cfg.seed,
            mean_image_file: MEAN_FILE.to_string(),
            samples,
        },
        train,
        test,
        mean,
    })
}

fn mean_image(train: &[Sample], size: usize) -> Result<Tensor> {
    let mut acc = vec![0.0; CHANNELS * size * size];
    for s in train {
        for (a, v) in acc.iter_mut().zip(s.image.data()) {
            *a += v;
        }
    }
    let n = train.len() as f64;
    Tensor::from_vec(&[CHANNELS, size, size], acc.into_iter().map(|v| v / n).collect())
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Generates the dataset under `dir` and returns its manifest.
pub fn generate_dataset(cfg: &DatasetConfig, dir: impl AsRef<Path>) -> Result<DatasetManifest> {
    let dir = dir.as_ref();
    let data = synthesize(cfg)?;
    for split in [Split::Train, Split::Test] {
        let sub = dir.join(split.name());
        fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
    }
    let entries = data.manifest.samples.iter();
    for (entry, sample) in entries.zip(data.train.iter().chain(&data.test)) {
        write_file(&dir.join(&entry.file), &sample.image.to_bytes())?;
    }
    write_file(&dir.join(MEAN_FILE), &data.mean.to_bytes())?;
    write_file(&dir.join(MANIFEST_FILE), data.manifest.to_text().as_bytes())?;
    Ok(data.manifest)
}

fn read_blob(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|_| Error::format(path, "file missing or unreadable"))?;
    let (t, used) = Tensor::from_bytes(&bytes).map_err(|e| Error::format(path, e))?;
    if used != bytes.len() {
        return Err(Error::format(path, "trailing bytes after CMPT blob"));
    }
    Ok(t)
}

/// Loads and verifies a dataset. `path` may be the manifest or its directory.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let manifest_path: PathBuf = if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    };
    let root = manifest_path.parent().unwrap_or(Path::new("."));
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest = DatasetManifest::parse(&manifest_path, &text)?;
    let size = manifest.image_size;
    let shape = [CHANNELS, size, size];

    let mut seen = std::collections::HashSet::new();
    let mut counts = vec![[0usize; 2]; manifest.num_classes];
    let mut train = Vec::new();
    let mut test = Vec::new();
    for entry in &manifest.samples {
        let file = root.join(&entry.file);
        if !seen.insert(entry.file.as_str()) {
            return Err(Error::format(&file, "listed more than once"));
        }
        if entry.label >= manifest.num_classes {
            return Err(Error::format(
                &file,
                format!("label {} out of range for {} classes", entry.label, manifest.num_classes),
            ));
        }
        let image = read_blob(&file)?;
        if image.shape() != shape {
            return Err(Error::format(&file, format!("shape {:?}, expected {shape:?}", image.shape())));
        }
        if image.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::format(&file, "pixel values outside [0, 1]"));
        }
        let sample = Sample {
            image,
            label: entry.label,
        };
        match entry.split {
            Split::Train => {
                counts[entry.label][0] += 1;
                train.push(sample)
            }
            Split::Test => {
                counts[entry.label][1] += 1;
                test.push(sample)
            }
        }
    }
    if let Some(label) = counts
        .iter()
        .position(|c| *c != [manifest.per_class_train, manifest.per_class_test])
    {
        return Err(Error::format(
            &manifest_path,
            format!(
                "class {label} has {:?} train/test samples, header says [{}, {}]",
                counts[label], manifest.per_class_train, manifest.per_class_test
            ),
        ));
    }
    let mean_path = root.join(&manifest.mean_image_file);
    let mean = read_blob(&mean_path)?;
    if mean.shape() != shape {
        return Err(Error::format(&mean_path, format!("shape {:?}, expected {shape:?}", mean.shape())));
    }
    Ok(Dataset {
        manifest,
        train,
        test,
        mean,
    })
}

/// Test accuracy of a per-class pixel-centroid classifier fit on the
/// training split.
pub fn nearest_centroid_accuracy(data: &Dataset) -> f64 {
    let len = data.mean.len();
    let mut centroids = vec![vec![0.0; len]; data.num_classes()];
    let mut counts = vec![0usize; data.num_classes()];
    for s in &data.train {
        counts[s.label] += 1;
        for (c, v) in centroids[s.label].iter_mut().zip(s.image.data()) {
            *c += v;
        }
    }
    for (c, n) in centroids.iter_mut().zip(&counts) {
        c.iter_mut().for_each(|v| *v /= (*n).max(1) as f64);
    }
    let correct = data
        .test
        .iter()
        .filter(|s| {
            let dist = |c: &Vec<f64>| c.iter().zip(s.image.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
            let best = (0..centroids.len())
                .min_by(|&a, &b| dist(&centroids[a]).total_cmp(&dist(&centroids[b])))
                .unwrap();
            best == s.label
        })
        .count();
    correct as f64 / data.test.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> DatasetConfig {
        DatasetConfig {
            seed: 3,
            num_classes: 4,
            per_class_train: 3,
            per_class_test: 2,
            image_size: 16,
        }
    }

    fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
        let mut out = Vec::new();
        let mut stack = vec![dir.to_path_buf()];
        while let Some(d) = stack.pop() {
            for e in fs::read_dir(&d).unwrap() {
                let p = e.unwrap().path();
                if p.is_dir() {
                    stack.push(p);
                } else {
                    out.push((p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap()));
                }
            }
        }
        out.sort();
        out
    }

    #[test]
    fn motif_codes_are_distinct() {
        for n in [2, 8, 9, 27, 64] {
            let codes: std::collections::HashSet<_> = (0..n).map(|c| class_motifs(c, n)).collect();
            assert_eq!(codes.len(), n);
        }
        assert!(PATTERNS.iter().all(|p| p.iter().flatten().filter(|&&v| v == 1).count() == 8));
    }

    #[test]
    fn generation_is_byte_identical() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        generate_dataset(&small(), a.path()).unwrap();
        generate_dataset(&small(), b.path()).unwrap();
        assert_eq!(dir_bytes(a.path()), dir_bytes(b.path()));
    }

    #[test]
    fn default_counts() {
        let data = synthesize(&DatasetConfig::default()).unwrap();
        assert_eq!((data.train.len(), data.test.len()), (512, 128));
        assert_eq!(data.manifest.samples.len(), 640);
        for label in 0..8 {
            assert_eq!(data.train.iter().filter(|s| s.label == label).count(), 64);
            assert_eq!(data.test.iter().filter(|s| s.label == label).count(), 16);
        }
    }

    #[test]
    fn round_trip_and_mean() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = generate_dataset(&small(), dir.path()).unwrap();
        let data = load_dataset(dir.path().join(MANIFEST_FILE)).unwrap();
        let direct = synthesize(&small()).unwrap();
        assert_eq!(data.manifest, manifest);
        assert_eq!(data.train, direct.train);
        assert_eq!(data.test, direct.test);

        // reverse-order summation as an independent averaging route
        let n = data.train.len() as f64;
        for i in 0..data.mean.len() {
            let m = data.train.iter().rev().map(|s| s.image.data()[i]).sum::<f64>() / n;
            assert!((m - data.mean.data()[i]).abs() < 1e-12);
        }
        let files: std::collections::HashSet<_> = manifest.samples.iter().map(|s| &s.file).collect();
        assert_eq!(files.len(), manifest.samples.len());
    }

    #[test]
    fn faults_are_format_errors() {
        let dir = tempfile::tempdir().unwrap();
        generate_dataset(&small(), dir.path()).unwrap();
        let mpath = dir.path().join(MANIFEST_FILE);
        let text = fs::read_to_string(&mpath).unwrap();

        fs::write(&mpath, text.replacen("train/000000.cmpt", "train/missing.cmpt", 1)).unwrap();
        match load_dataset(&mpath) {
            Err(Error::Format { path, .. }) => assert!(path.ends_with("train/missing.cmpt")),
            other => panic!("{other:?}"),
        }

        fs::write(&mpath, text.replacen("train/000000.cmpt\t0", "train/000000.cmpt\t255", 1)).unwrap();
        match load_dataset(&mpath) {
            Err(Error::Format { reason, .. }) => assert!(reason.contains("label 255")),
            other => panic!("{other:?}"),
        }

        fs::write(&mpath, &text).unwrap();
        fs::write(dir.path().join("test/000012.cmpt"), b"CMPT\x01").unwrap();
        assert!(matches!(load_dataset(&mpath), Err(Error::Format { .. })));
    }

    #[test]
    fn pixels_in_unit_range() {
        let data = synthesize(&small()).unwrap();
        assert!(data
            .train
            .iter()
            .all(|s| s.image.data().iter().all(|v| (0.0..=1.0).contains(v))));
    }

    #[test]
    fn nuisance_dominates_motif_difference() {
        let (within, between) = nuisance_vs_motif_mse(&DatasetConfig::default(), 200);
        assert!(within > between, "within {within} between {between}");
    }

    #[test]
    fn flipped_slots_stay_distinguishable() {
        // reachable top-left corners per slot, including body shift and jitter
        let reach = |(x, y): (f64, f64), flip: bool| {
            let r = (MOTIF_JITTER + 1) as f64;
            let x = if flip { 32.0 - 4.0 - x } else { x };
            (x - r, x + r, y - r, y + r)
        };
        let overlap = |a: (f64, f64, f64, f64), b: (f64, f64, f64, f64)| {
            a.0 <= b.1 && b.0 <= a.1 && a.2 <= b.3 && b.2 <= a.3
        };
        for (i, &a) in ANCHORS.iter().enumerate() {
            for (j, &b) in ANCHORS.iter().enumerate() {
                if i != j {
                    assert!(!overlap(reach(a, false), reach(b, true)), "slots {i} {j}");
                    assert!(!overlap(reach(a, false), reach(b, false)), "slots {i} {j}");
                }
            }
        }
    }

    #[test]
    fn rejects_bad_config() {
        let mut cfg = small();
        cfg.num_classes = 1;
        assert!(synthesize(&cfg).is_err());
        cfg.num_classes = 4;
        cfg.image_size = 8;
        assert!(synthesize(&cfg).is_err());
    }
}
