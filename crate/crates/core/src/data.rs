//! Dataset loading and the synthetic hierarchical generator.
//!
//! Images are stored row-major as `H x W x C` with values in `[0, 1]`;
//! vector data has a one-element shape. Everything is kept in `f32` and
//! converted per batch.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::DataError;
use crate::model::LikelihoodKind;

/// Environment variable naming the dataset cache root.
pub const DATA_ENV: &str = "TREEVAE_DATA";

pub const KNOWN: &[&str] = &[
    "mnist",
    "mnist-t10k",
    "fashion",
    "newsgroups",
    "omniglot",
    "omniglot5",
    "cifar10",
    "cifar100",
    "celeba",
];

const OMNIGLOT5: [&str; 5] = ["Bengali", "Braille", "Cyrillic", "Glagolitic", "Oriya"];
const NEWSGROUP_VOCAB: usize = 2000;

/// Inputs (one row per sample) and integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub x: Array2<f32>,
    pub y: Vec<usize>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn select(&self, idx: &[usize]) -> Split {
        Split {
            x: self.x.select(Axis(0), idx),
            y: idx.iter().map(|&i| self.y[i]).collect(),
        }
    }

    /// The first `n` samples.
    pub fn head(&self, n: usize) -> Split {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.select(&idx)
    }

    pub fn rows<F: crate::autodiff::Real>(&self, idx: &[usize]) -> Array2<F> {
        let mut out = Array2::zeros((idx.len(), self.x.ncols()));
        for (r, &i) in idx.iter().enumerate() {
            for (o, &v) in out.row_mut(r).iter_mut().zip(self.x.row(i)) {
                *o = F::c(v as f64);
            }
        }
        out
    }
}

/// Ground truth of [`synthetic_hierarchical`]: cluster means and the balanced
/// dendrogram over cluster indices (clusters `2j` and `2j+1` are siblings, and
/// so on upwards).
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub means: Array2<f64>,
    pub levels: usize,
}

impl GroundTruth {
    /// Whether two clusters share a parent in the generating hierarchy.
    pub fn siblings(&self, a: usize, b: usize) -> bool {
        a != b && a / 2 == b / 2
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileChecksum {
    pub file: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub input_shape: Vec<usize>,
    pub likelihood: LikelihoodKind,
    pub n_classes: usize,
    pub train: Split,
    pub test: Split,
    pub checksums: Vec<FileChecksum>,
    pub ground_truth: Option<GroundTruth>,
}

impl Dataset {
    pub fn input_dim(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn is_image(&self) -> bool {
        self.input_shape.len() == 3
    }

    /// Keep at most `n` training samples.
    pub fn truncate_train(&mut self, n: usize) {
        self.train = self.train.head(n);
    }
}

/// Cache root: `$TREEVAE_DATA`, else `~/.cache/treevae`.
pub fn default_root() -> PathBuf {
    if let Some(p) = std::env::var_os(DATA_ENV) {
        return PathBuf::from(p);
    }
    let home = std::env::var_os("HOME")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("."));
    home.join(".cache").join("treevae")
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn format_err(path: &Path, reason: impl Into<String>) -> DataError {
    DataError::Format {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn missing(name: &str, root: &Path, hint: impl Into<String>) -> DataError {
    DataError::MissingData {
        name: name.to_string(),
        root: root.to_path_buf(),
        hint: hint.into(),
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Read a file, transparently gunzipping `.gz`.
fn read_raw(path: &Path) -> Result<Vec<u8>, DataError> {
    let mut raw = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut raw))
        .map_err(io(path))?;
    if path.extension().is_some_and(|e| e == "gz") {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice()).read_to_end(&mut out).map_err(io(path))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

/// `name` or `name.gz`, whichever exists.
fn find_file(dir: &Path, name: &str) -> Option<PathBuf> {
    [dir.join(name), dir.join(format!("{name}.gz"))]
        .into_iter()
        .find(|p| p.is_file())
}

/// Parse an IDX file: returns the dimensions and the raw `u8` payload.
pub fn parse_idx(bytes: &[u8], path: &Path) -> Result<(Vec<usize>, Vec<u8>), DataError> {
    if bytes.len() < 4 || bytes[0] != 0 || bytes[1] != 0 {
        return Err(format_err(path, "bad IDX magic"));
    }
    if bytes[2] != 0x08 {
        return Err(format_err(
            path,
            format!("unsupported IDX element type {:#x}", bytes[2]),
        ));
    }
    let rank = bytes[3] as usize;
    let header = 4 + 4 * rank;
    if bytes.len() < header {
        return Err(format_err(path, "truncated IDX header"));
    }
    let dims: Vec<usize> = (0..rank)
        .map(|i| u32::from_be_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize)
        .collect();
    let n: usize = dims.iter().product();
    if bytes.len() != header + n {
        return Err(format_err(
            path,
            format!("expected {} payload bytes, found {}", n, bytes.len() - header),
        ));
    }
    Ok((dims, bytes[header..].to_vec()))
}

/// Images and labels of one IDX split, pixels scaled to `[0, 1]`.
pub fn read_idx_split(
    dir: &Path,
    prefix: &str,
    sums: &mut Vec<FileChecksum>,
) -> Option<Result<(Split, [usize; 2]), DataError>> {
    let img = find_file(dir, &format!("{prefix}-images-idx3-ubyte"))?;
    let lab = find_file(dir, &format!("{prefix}-labels-idx1-ubyte"))?;
    let mut load = || -> Result<(Split, [usize; 2]), DataError> {
        let ib = read_raw(&img)?;
        let lb = read_raw(&lab)?;
        for (p, b) in [(&img, &ib), (&lab, &lb)] {
            sums.push(FileChecksum {
                file: p.file_name().unwrap().to_string_lossy().into_owned(),
                sha256: sha256_hex(b),
            });
        }
        let (idims, pixels) = parse_idx(&ib, &img)?;
        let (ldims, labels) = parse_idx(&lb, &lab)?;
        if idims.len() != 3 || ldims.len() != 1 || idims[0] != ldims[0] {
            return Err(format_err(
                &img,
                format!("image dims {idims:?} do not fit label dims {ldims:?}"),
            ));
        }
        let (n, h, w) = (idims[0], idims[1], idims[2]);
        let x = Array2::from_shape_vec((n, h * w), pixels.iter().map(|&p| p as f32 / 255.0).collect())
            .expect("sizes checked");
        Ok((
            Split {
                x,
                y: labels.into_iter().map(usize::from).collect(),
            },
            [h, w],
        ))
    };
    Some(load())
}

fn load_idx_dataset(name: &str, root: &Path, sub: &str, t10k_only: bool) -> Result<Dataset, DataError> {
    let dir = root.join(sub);
    let hint = format!(
        "place train-images-idx3-ubyte.gz, train-labels-idx1-ubyte.gz, t10k-images-idx3-ubyte.gz and \
         t10k-labels-idx1-ubyte.gz in {}",
        dir.display()
    );
    let mut sums = Vec::new();
    let (test, hw) = read_idx_split(&dir, "t10k", &mut sums).ok_or_else(|| missing(name, root, &hint))??;
    let (train, test) = if t10k_only {
        // first 8000 train, last 2000 test
        let cut = test.len() * 4 / 5;
        let idx: Vec<usize> = (0..test.len()).collect();
        (test.select(&idx[..cut]), test.select(&idx[cut..]))
    } else {
        let (train, _) = read_idx_split(&dir, "train", &mut sums).ok_or_else(|| missing(name, root, &hint))??;
        (train, test)
    };
    let n_classes = train.y.iter().chain(&test.y).max().map_or(0, |m| m + 1);
    Ok(Dataset {
        name: name.to_string(),
        input_shape: vec![hw[0], hw[1], 1],
        likelihood: LikelihoodKind::Bernoulli,
        n_classes,
        train,
        test,
        checksums: sums,
        ground_truth: None,
    })
}

/// Lowercase tokens of two or more word characters.
fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() || ch == '_' {
            cur.extend(ch.to_lowercase());
        } else {
            if cur.chars().count() >= 2 {
                out.push(std::mem::take(&mut cur));
            }
            cur.clear();
        }
    }
    if cur.chars().count() >= 2 {
        out.push(cur);
    }
    out
}

/// TF-IDF over the `vocab` most frequent terms (by corpus count), smoothed
/// idf, rows L2-normalized.
pub fn tfidf(docs: &[String], vocab: usize) -> (Array2<f32>, Vec<String>) {
    let tokenized: Vec<Vec<String>> = docs.iter().map(|d| tokenize(d)).collect();
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for doc in &tokenized {
        for t in doc {
            *counts.entry(t.as_str()).or_default() += 1;
        }
    }
    let mut terms: Vec<(&str, usize)> = counts.into_iter().collect();
    terms.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    terms.truncate(vocab);
    let mut words: Vec<String> = terms.iter().map(|(w, _)| w.to_string()).collect();
    words.sort();
    let index: HashMap<&str, usize> = words.iter().enumerate().map(|(i, w)| (w.as_str(), i)).collect();

    let n = docs.len();
    let mut tf = Array2::<f64>::zeros((n, words.len()));
    for (r, doc) in tokenized.iter().enumerate() {
        for t in doc {
            if let Some(&c) = index.get(t.as_str()) {
                tf[[r, c]] += 1.0;
            }
        }
    }
    let df: Vec<f64> = tf
        .axis_iter(Axis(1))
        .map(|col| col.iter().filter(|&&v| v > 0.0).count() as f64)
        .collect();
    let idf: Vec<f64> = df.iter().map(|&d| ((1.0 + n as f64) / (1.0 + d)).ln() + 1.0).collect();
    let mut out = Array2::<f32>::zeros(tf.dim());
    for (r, row) in tf.axis_iter(Axis(0)).enumerate() {
        let w: Vec<f64> = row.iter().zip(&idf).map(|(t, i)| t * i).collect();
        let norm = w.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            for (c, v) in w.into_iter().enumerate() {
                out[[r, c]] = (v / norm) as f32;
            }
        }
    }
    (out, words)
}

fn sorted_dirs(dir: &Path) -> Result<Vec<PathBuf>, DataError> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(io(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    out.sort();
    Ok(out)
}

fn sorted_files(dir: &Path) -> Result<Vec<PathBuf>, DataError> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(io(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    out.sort();
    Ok(out)
}

fn split_indices(n: usize, train_frac: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let cut = (n as f64 * train_frac).round() as usize;
    let (a, b) = idx.split_at(cut);
    let (mut a, mut b) = (a.to_vec(), b.to_vec());
    a.sort_unstable();
    b.sort_unstable();
    (a, b)
}

fn load_newsgroups(root: &Path) -> Result<Dataset, DataError> {
    let dir = root.join("20newsgroups");
    if !dir.is_dir() {
        return Err(missing(
            "newsgroups",
            root,
            format!(
                "extract the 20news-18828 archive so that {}/<topic>/<document> exists",
                dir.display()
            ),
        ));
    }
    let mut docs = Vec::new();
    let mut labels = Vec::new();
    let mut hasher = Sha256::new();
    for (label, topic) in sorted_dirs(&dir)?.into_iter().enumerate() {
        for file in sorted_files(&topic)? {
            let bytes = std::fs::read(&file).map_err(io(&file))?;
            hasher.update(&bytes);
            docs.push(String::from_utf8_lossy(&bytes).into_owned());
            labels.push(label);
        }
    }
    if docs.is_empty() {
        return Err(missing("newsgroups", root, "no documents found"));
    }
    let (x, _) = tfidf(&docs, NEWSGROUP_VOCAB);
    let (tr, te) = split_indices(docs.len(), 0.6, 0);
    let all = Split { x, y: labels };
    let n_classes = all.y.iter().max().map_or(0, |m| m + 1);
    Ok(Dataset {
        name: "newsgroups".into(),
        input_shape: vec![all.x.ncols()],
        likelihood: LikelihoodKind::Bernoulli,
        n_classes,
        train: all.select(&tr),
        test: all.select(&te),
        checksums: vec![FileChecksum {
            file: "20newsgroups/*".into(),
            sha256: hasher.finalize().iter().map(|b| format!("{b:02x}")).collect(),
        }],
        ground_truth: None,
    })
}

/// Decode an image file to `side x side` grayscale in `[0, 1]`.
fn load_gray(path: &Path, side: u32, invert: bool) -> Result<Vec<f32>, DataError> {
    let img = image::open(path).map_err(|e| format_err(path, e.to_string()))?;
    let img = img
        .resize_exact(side, side, image::imageops::FilterType::Triangle)
        .to_luma8();
    Ok(img
        .pixels()
        .map(|p| {
            let v = p.0[0] as f32 / 255.0;
            if invert {
                1.0 - v
            } else {
                v
            }
        })
        .collect())
}

fn load_omniglot(root: &Path, five: bool) -> Result<Dataset, DataError> {
    let name = if five { "omniglot5" } else { "omniglot" };
    let dir = root.join("omniglot");
    let hint = format!(
        "extract images_background.zip and images_evaluation.zip into {} (layout <set>/<alphabet>/<character>/*.png)",
        dir.display()
    );
    let mut alphabets: BTreeMap<String, Vec<PathBuf>> = BTreeMap::new();
    for set in ["images_background", "images_evaluation"] {
        let d = dir.join(set);
        if !d.is_dir() {
            continue;
        }
        for a in sorted_dirs(&d)? {
            let key = a.file_name().unwrap().to_string_lossy().into_owned();
            alphabets.entry(key).or_default().extend(sorted_dirs(&a)?);
        }
    }
    if five {
        alphabets.retain(|k, _| OMNIGLOT5.iter().any(|n| k.starts_with(n)));
    }
    if alphabets.is_empty() {
        return Err(missing(name, root, hint));
    }
    let mut rows = Vec::new();
    let (mut train, mut test) = (Vec::new(), Vec::new());
    let mut labels = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for (label, chars) in alphabets.values().enumerate() {
        for ch in chars {
            // stratified per character
            let mut files = sorted_files(ch)?;
            files.shuffle(&mut rng);
            let cut = (files.len() as f64 * 0.8).round() as usize;
            for (k, f) in files.iter().enumerate() {
                let i = labels.len();
                rows.extend(load_gray(f, 28, true)?);
                labels.push(label);
                if k < cut {
                    train.push(i)
                } else {
                    test.push(i)
                }
            }
        }
    }
    let all = Split {
        x: Array2::from_shape_vec((labels.len(), 28 * 28), rows).expect("row length"),
        y: labels,
    };
    Ok(Dataset {
        name: name.into(),
        input_shape: vec![28, 28, 1],
        likelihood: LikelihoodKind::Bernoulli,
        n_classes: alphabets.len(),
        train: all.select(&train),
        test: all.select(&test),
        checksums: Vec::new(),
        ground_truth: None,
    })
}

/// CIFAR binary records: `label_bytes` label bytes (the first is used)
/// followed by a 3x32x32 channel-major image, converted to HWC.
fn parse_cifar(bytes: &[u8], label_bytes: usize, path: &Path) -> Result<Split, DataError> {
    let rec = label_bytes + 3072;
    if !bytes.len().is_multiple_of(rec) {
        return Err(format_err(
            path,
            format!("size {} is not a multiple of {rec}", bytes.len()),
        ));
    }
    let n = bytes.len() / rec;
    let mut x = Array2::<f32>::zeros((n, 3072));
    let mut y = Vec::with_capacity(n);
    for (i, r) in bytes.chunks_exact(rec).enumerate() {
        y.push(r[0] as usize);
        let px = &r[label_bytes..];
        for c in 0..3 {
            for p in 0..1024 {
                x[[i, p * 3 + c]] = px[c * 1024 + p] as f32 / 255.0;
            }
        }
    }
    Ok(Split { x, y })
}

fn concat(parts: Vec<Split>) -> Split {
    let views: Vec<_> = parts.iter().map(|s| s.x.view()).collect();
    Split {
        x: ndarray::concatenate(Axis(0), &views).expect("same width"),
        y: parts.iter().flat_map(|s| s.y.iter().copied()).collect(),
    }
}

fn load_cifar(root: &Path, hundred: bool) -> Result<Dataset, DataError> {
    let (name, sub, train_files, test_file, label_bytes, classes) = if hundred {
        (
            "cifar100",
            "cifar-100-binary",
            vec!["train.bin".to_string()],
            "test.bin",
            2,
            20,
        )
    } else {
        (
            "cifar10",
            "cifar-10-batches-bin",
            (1..=5).map(|i| format!("data_batch_{i}.bin")).collect(),
            "test_batch.bin",
            1,
            10,
        )
    };
    let dir = root.join(sub);
    let read = |f: &str| -> Result<Split, DataError> {
        let p = dir.join(f);
        if !p.is_file() {
            return Err(missing(
                name,
                root,
                format!("extract the binary version of the dataset into {}", dir.display()),
            ));
        }
        parse_cifar(&read_raw(&p)?, label_bytes, &p)
    };
    let train = concat(train_files.iter().map(|f| read(f)).collect::<Result<_, _>>()?);
    let test = read(test_file)?;
    Ok(Dataset {
        name: name.into(),
        input_shape: vec![32, 32, 3],
        likelihood: LikelihoodKind::Gaussian,
        n_classes: classes,
        train,
        test,
        checksums: Vec::new(),
        ground_truth: None,
    })
}

/// Pre-cropped 64x64 RGB images under `celeba/{train,test}`; no labels.
fn load_celeba(root: &Path) -> Result<Dataset, DataError> {
    let dir = root.join("celeba");
    let read = |sub: &str| -> Result<Split, DataError> {
        let d = dir.join(sub);
        if !d.is_dir() {
            return Err(missing(
                "celeba",
                root,
                format!(
                    "place 64x64 crops in {}/train and {}/test",
                    dir.display(),
                    dir.display()
                ),
            ));
        }
        let files = sorted_files(&d)?;
        let mut rows = Vec::new();
        for f in &files {
            let img = image::open(f).map_err(|e| format_err(f, e.to_string()))?;
            let img = img
                .resize_exact(64, 64, image::imageops::FilterType::Triangle)
                .to_rgb8();
            rows.extend(img.as_raw().iter().map(|&v| v as f32 / 255.0));
        }
        Ok(Split {
            x: Array2::from_shape_vec((files.len(), 64 * 64 * 3), rows).expect("row length"),
            y: vec![0; files.len()],
        })
    };
    Ok(Dataset {
        name: "celeba".into(),
        input_shape: vec![64, 64, 3],
        likelihood: LikelihoodKind::Gaussian,
        n_classes: 1,
        train: read("train")?,
        test: read("test")?,
        checksums: Vec::new(),
        ground_truth: None,
    })
}

/// Load a named dataset from the cache root.
pub fn load_dataset(name: &str, root: &Path) -> Result<Dataset, DataError> {
    match name {
        "mnist" => load_idx_dataset(name, root, "mnist", false),
        "mnist-t10k" => load_idx_dataset(name, root, "mnist", true),
        "fashion" | "fashion-mnist" => load_idx_dataset("fashion", root, "fashion-mnist", false),
        "newsgroups" | "20newsgroups" => load_newsgroups(root),
        "omniglot" => load_omniglot(root, false),
        "omniglot5" => load_omniglot(root, true),
        "cifar10" => load_cifar(root, false),
        "cifar100" => load_cifar(root, true),
        "celeba" => load_celeba(root),
        other => Err(missing(
            other,
            root,
            format!("unknown dataset; known names: {}", KNOWN.join(", ")),
        )),
    }
}

/// Gaussian clusters at the leaves of a balanced binary hierarchy.
///
/// Offsets halve at every level, so the leaf-level half-distance is
/// `separation / 2` and siblings are closer than cousins. Offset directions
/// are orthonormal when `dim` allows it. Unit noise. The test split has
/// `n / 4` samples drawn from the same clusters.
pub fn synthetic_hierarchical(n: usize, dim: usize, clusters: usize, separation: f64, seed: u64) -> Dataset {
    assert!(
        clusters >= 2 && clusters.is_power_of_two(),
        "cluster count must be a power of two"
    );
    let levels = clusters.trailing_zeros() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // one direction per internal node of the generating tree, heap order
    let mut dirs: Vec<Vec<f64>> = Vec::new();
    for _ in 0..clusters - 1 {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        if dirs.len() < dim {
            for d in &dirs {
                let p: f64 = v.iter().zip(d).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(d).for_each(|(a, b)| *a -= p * b);
            }
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        dirs.push(v.into_iter().map(|a| a / norm).collect());
    }
    let mut means = Array2::<f64>::zeros((clusters, dim));
    for c in 0..clusters {
        let mut heap = 0;
        for level in 0..levels {
            let bit = (c >> (levels - 1 - level)) & 1;
            let scale = separation / 2.0 * 2f64.powi((levels - 1 - level) as i32);
            let sign = if bit == 1 { 1.0 } else { -1.0 };
            for (m, d) in means.row_mut(c).iter_mut().zip(&dirs[heap]) {
                *m += sign * scale * d;
            }
            heap = 2 * heap + 1 + bit;
        }
    }
    let draw = |count: usize, rng: &mut ChaCha8Rng| {
        let mut y: Vec<usize> = (0..count).map(|i| i % clusters).collect();
        y.shuffle(rng);
        let mut x = Array2::<f32>::zeros((count, dim));
        for (i, &c) in y.iter().enumerate() {
            for j in 0..dim {
                let e: f64 = rng.sample(StandardNormal);
                x[[i, j]] = (means[[c, j]] + e) as f32;
            }
        }
        Split { x, y }
    };
    let train = draw(n, &mut rng);
    let test = draw((n / 4).max(1), &mut rng);
    Dataset {
        name: "synthetic".into(),
        input_shape: vec![dim],
        likelihood: LikelihoodKind::Gaussian,
        n_classes: clusters,
        train,
        test,
        checksums: Vec::new(),
        ground_truth: Some(GroundTruth { means, levels }),
    }
}
