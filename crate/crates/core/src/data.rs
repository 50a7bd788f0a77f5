//! Datasets: synthetic generators, CSV and IDX loaders, batching.

use std::f64::consts::PI;
use std::fmt;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seedstream::{stream_rng, StreamDomain};

/// Tolerance used when validating that soft targets are probability vectors.
pub const SOFT_TARGET_SUM_TOL: f64 = 1e-9;

/// A labeled classification dataset with dense feature vectors.
#[derive(Debug, Clone)]
pub struct Dataset {
    features: Vec<Vec<f64>>,
    labels: Vec<usize>,
    dim: usize,
    classes: usize,
}

impl Dataset {
    pub fn new(features: Vec<Vec<f64>>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if features.is_empty() {
            return Err(Error::Empty("dataset has no examples"));
        }
        if features.len() != labels.len() {
            return Err(Error::LengthMismatch {
                expected: features.len(),
                got: labels.len(),
            });
        }
        if classes < 2 {
            return Err(Error::Config("a dataset needs at least 2 classes".into()));
        }
        let dim = features[0].len();
        if dim == 0 {
            return Err(Error::Empty("feature vectors have zero length"));
        }
        for (i, f) in features.iter().enumerate() {
            if f.len() != dim {
                return Err(Error::Data(format!(
                    "example {i} has {} features, expected {dim}",
                    f.len()
                )));
            }
        }
        if let Some((i, &y)) = labels.iter().enumerate().find(|(_, &y)| y >= classes) {
            return Err(Error::Data(format!(
                "example {i} has label {y}, expected < {classes}"
            )));
        }
        Ok(Self {
            features,
            labels,
            dim,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn feature(&self, i: usize) -> &[f64] {
        &self.features[i]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Gather the examples at `indices` into an owned batch.
    pub fn batch(&self, indices: &[usize]) -> LabeledBatch {
        let inputs = indices.iter().map(|&i| self.features[i].clone()).collect();
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        LabeledBatch {
            inputs,
            labels,
            soft_targets: None,
        }
    }

    /// The whole dataset as one batch.
    pub fn as_batch(&self) -> LabeledBatch {
        LabeledBatch {
            inputs: self.features.clone(),
            labels: self.labels.clone(),
            soft_targets: None,
        }
    }

    /// Count of examples per class.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    /// Widen the class count (e.g. to align a train/test pair loaded from
    /// separate files). Narrowing below an observed label is an error.
    pub fn with_classes(self, classes: usize) -> Result<Self> {
        Dataset::new(self.features, self.labels, classes)
    }
}

/// A train/test pair over the same feature space.
#[derive(Debug, Clone)]
pub struct TrainTest {
    pub train: Dataset,
    pub test: Dataset,
}

/// A batch of examples: inputs, hard labels, and optional per-example soft
/// targets (probability vectors).
#[derive(Debug, Clone)]
pub struct LabeledBatch {
    inputs: Vec<Vec<f64>>,
    labels: Vec<usize>,
    soft_targets: Option<Vec<Vec<f64>>>,
}

impl LabeledBatch {
    pub fn new(inputs: Vec<Vec<f64>>, labels: Vec<usize>) -> Result<Self> {
        if inputs.len() != labels.len() {
            return Err(Error::LengthMismatch {
                expected: inputs.len(),
                got: labels.len(),
            });
        }
        if let Some(first) = inputs.first() {
            let dim = first.len();
            if inputs.iter().any(|x| x.len() != dim) {
                return Err(Error::Data("batch inputs have mixed dimensions".into()));
            }
        }
        Ok(Self {
            inputs,
            labels,
            soft_targets: None,
        })
    }

    /// Attach one soft target per example. Each row must be a probability
    /// vector: nonnegative entries summing to 1 within `SOFT_TARGET_SUM_TOL`.
    pub fn with_soft_targets(mut self, soft: Vec<Vec<f64>>) -> Result<Self> {
        if soft.len() != self.inputs.len() {
            return Err(Error::LengthMismatch {
                expected: self.inputs.len(),
                got: soft.len(),
            });
        }
        for (i, row) in soft.iter().enumerate() {
            validate_probability_row(row, SOFT_TARGET_SUM_TOL).map_err(|e| {
                Error::Data(format!("soft target {i}: {e}"))
            })?;
        }
        self.soft_targets = Some(soft);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn inputs(&self) -> &[Vec<f64>] {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn soft_targets(&self) -> Option<&[Vec<f64>]> {
        self.soft_targets.as_deref()
    }

    /// Gather a sub-batch (clones the selected rows, soft targets included).
    pub fn select(&self, indices: &[usize]) -> LabeledBatch {
        LabeledBatch {
            inputs: indices.iter().map(|&i| self.inputs[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            soft_targets: self
                .soft_targets
                .as_ref()
                .map(|s| indices.iter().map(|&i| s[i].clone()).collect()),
        }
    }
}

fn validate_probability_row(row: &[f64], tol: f64) -> std::result::Result<(), String> {
    if row.is_empty() {
        return Err("empty row".into());
    }
    if row.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
        return Err("entries must be finite and nonnegative".into());
    }
    let sum: f64 = row.iter().sum();
    if (sum - 1.0).abs() > tol {
        return Err(format!("row sums to {sum}, expected 1"));
    }
    Ok(())
}

/// Which synthetic generator to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SyntheticKind {
    Gaussians,
    Spirals,
    XorRings,
}

impl fmt::Display for SyntheticKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SyntheticKind::Gaussians => write!(f, "gaussians"),
            SyntheticKind::Spirals => write!(f, "spirals"),
            SyntheticKind::XorRings => write!(f, "xor-rings"),
        }
    }
}

/// Generate a synthetic dataset and split it 80/20 into train/test (seeded).
pub fn generate_synthetic(
    kind: SyntheticKind,
    n: usize,
    dim: usize,
    classes: usize,
    noise: f64,
    seed: u64,
) -> Result<TrainTest> {
    if classes < 2 {
        return Err(Error::Config("need at least 2 classes".into()));
    }
    if n < classes {
        return Err(Error::Config(format!(
            "need at least one example per class: n={n} < classes={classes}"
        )));
    }
    if !(noise >= 0.0) {
        return Err(Error::Config(format!("noise must be >= 0, got {noise}")));
    }
    let mut rng = stream_rng(seed, StreamDomain::DataGen, kind as u64);
    let full = match kind {
        SyntheticKind::Gaussians => gaussians(n, dim, classes, noise, &mut rng)?,
        SyntheticKind::Spirals => spirals(n, dim, classes, noise, &mut rng)?,
        SyntheticKind::XorRings => xor_rings(n, dim, classes, noise, &mut rng)?,
    };
    train_test_split(full, seed)
}

/// Seeded 80/20 split: shuffle indices and carve the last fifth off as test.
pub fn train_test_split(ds: Dataset, seed: u64) -> Result<TrainTest> {
    let n = ds.len();
    let test_n = n / 5;
    if test_n == 0 || n - test_n == 0 {
        return Err(Error::Config(format!(
            "dataset of {n} examples is too small for an 80/20 split"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = stream_rng(seed, StreamDomain::Split, 0);
    idx.shuffle(&mut rng);
    let (train_idx, test_idx) = idx.split_at(n - test_n);
    let gather = |ids: &[usize]| -> Result<Dataset> {
        Dataset::new(
            ids.iter().map(|&i| ds.features[i].clone()).collect(),
            ids.iter().map(|&i| ds.labels[i]).collect(),
            ds.classes,
        )
    };
    Ok(TrainTest {
        train: gather(train_idx)?,
        test: gather(test_idx)?,
    })
}

fn normal(noise: f64) -> Result<Normal<f64>> {
    Normal::new(0.0, noise.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::Config(format!("bad noise parameter: {e}")))
}

/// Isotropic Gaussian blobs, one per class. Means sit on a circle of radius 4
/// in the first two dimensions (spread along the axis when `dim == 1`).
fn gaussians(
    n: usize,
    dim: usize,
    classes: usize,
    noise: f64,
    rng: &mut impl Rng,
) -> Result<Dataset> {
    if dim == 0 {
        return Err(Error::Config("dim must be >= 1".into()));
    }
    const RADIUS: f64 = 4.0;
    let means: Vec<Vec<f64>> = (0..classes)
        .map(|c| {
            let mut m = vec![0.0; dim];
            if dim == 1 {
                m[0] = RADIUS * (2.0 * c as f64 / (classes - 1) as f64 - 1.0);
            } else {
                let angle = 2.0 * PI * c as f64 / classes as f64;
                m[0] = RADIUS * angle.cos();
                m[1] = RADIUS * angle.sin();
            }
            m
        })
        .collect();
    let gauss = normal(noise)?;
    let mut features = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % classes;
        let x: Vec<f64> = means[c]
            .iter()
            .map(|&m| m + if noise > 0.0 { gauss.sample(rng) } else { 0.0 })
            .collect();
        features.push(x);
        labels.push(c);
    }
    Dataset::new(features, labels, classes)
}

/// Interleaved spiral arms in the plane, one arm per class. Classes are
/// assigned round-robin, so counts are balanced within one.
fn spirals(n: usize, dim: usize, classes: usize, noise: f64, rng: &mut impl Rng) -> Result<Dataset> {
    if dim != 2 {
        return Err(Error::Config(format!(
            "spirals are two-dimensional, got dim={dim}"
        )));
    }
    // Each arm sweeps ~480 degrees while the radius grows from 0.3 to 3.0,
    // so adjacent arms interleave for most of the disk.
    const SWEEP: f64 = 8.5;
    let gauss = normal(noise)?;
    let mut features = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % classes;
        let u: f64 = rng.random::<f64>();
        let r = 0.3 + 2.7 * u;
        let theta = 2.0 * PI * c as f64 / classes as f64 + SWEEP * u;
        let jitter = |rng: &mut dyn rand::RngCore| {
            if noise > 0.0 {
                gauss.sample(rng)
            } else {
                0.0
            }
        };
        features.push(vec![
            r * theta.cos() + jitter(rng),
            r * theta.sin() + jitter(rng),
        ]);
        labels.push(c);
    }
    Dataset::new(features, labels, classes)
}

/// Concentric ring bands crossed with quadrant parity. A point in ring band
/// `b` and quadrant-parity `q` belongs to class `(b + q) mod classes`, which
/// makes the decision boundary both radial and angular.
fn xor_rings(
    n: usize,
    dim: usize,
    classes: usize,
    noise: f64,
    rng: &mut impl Rng,
) -> Result<Dataset> {
    if dim != 2 {
        return Err(Error::Config(format!(
            "xor-rings are two-dimensional, got dim={dim}"
        )));
    }
    const OUTER: f64 = 3.0;
    let band = OUTER / classes as f64;
    let gauss = normal(noise)?;
    let mut features = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        // Pick the cell round-robin so classes stay balanced, then sample
        // a point inside it.
        let ring = i % classes;
        let parity = (i / classes) % 2;
        let class = (ring + parity) % classes;
        let r = band * (ring as f64 + rng.random::<f64>());
        // Parity 0 lives in quadrants 1 and 3, parity 1 in quadrants 2 and 4.
        let quadrant = 2 * rng.random_range(0..2usize) + parity;
        let theta = (quadrant as f64 + rng.random::<f64>()) * PI / 2.0;
        let jitter = |rng: &mut dyn rand::RngCore| {
            if noise > 0.0 {
                gauss.sample(rng)
            } else {
                0.0
            }
        };
        features.push(vec![
            r * theta.cos() + jitter(rng),
            r * theta.sin() + jitter(rng),
        ]);
        labels.push(class);
    }
    Dataset::new(features, labels, classes)
}

/// Load a dataset from CSV with header `label,f0,...,f{d-1}`.
pub fn load_csv(path: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_csv(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

fn parse_csv(text: &str) -> std::result::Result<Dataset, String> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines.next().ok_or("empty file")?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    if cols.first() != Some(&"label") {
        return Err(format!("first column must be `label`, got `{header}`"));
    }
    let dim = cols.len() - 1;
    if dim == 0 {
        return Err("no feature columns".into());
    }
    for (j, col) in cols[1..].iter().enumerate() {
        if *col != format!("f{j}") {
            return Err(format!("column {} must be `f{j}`, got `{col}`", j + 1));
        }
    }
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != dim + 1 {
            return Err(format!(
                "row {}: expected {} fields, got {}",
                lineno + 2,
                dim + 1,
                fields.len()
            ));
        }
        let label: usize = fields[0]
            .parse()
            .map_err(|e| format!("row {}: bad label: {e}", lineno + 2))?;
        let row: std::result::Result<Vec<f64>, String> = fields[1..]
            .iter()
            .map(|f| {
                f.parse::<f64>()
                    .map_err(|e| format!("row {}: bad value `{f}`: {e}", lineno + 2))
            })
            .collect();
        features.push(row?);
        labels.push(label);
    }
    let classes = labels.iter().copied().max().ok_or("no data rows")? + 1;
    Dataset::new(features, labels, classes.max(2)).map_err(|e| e.to_string())
}

/// Write a dataset in the CSV format accepted by `load_csv`.
pub fn write_csv(ds: &Dataset, path: &Path) -> Result<()> {
    let mut out = String::from("label");
    for j in 0..ds.dim() {
        out.push_str(&format!(",f{j}"));
    }
    out.push('\n');
    for i in 0..ds.len() {
        out.push_str(&ds.label(i).to_string());
        for v in ds.feature(i) {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

const IDX_IMAGE_MAGIC: u32 = 0x0000_0803;
const IDX_LABEL_MAGIC: u32 = 0x0000_0801;

/// Load an IDX image/label file pair (the MNIST container format).
/// Pixels are scaled to `[0, 1]`.
pub fn load_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    let image_bytes = fs::read(images).map_err(|e| Error::io(images, e))?;
    let label_bytes = fs::read(labels).map_err(|e| Error::io(labels, e))?;
    let (features, _rows, _cols) = parse_idx_images(&image_bytes)
        .map_err(|e| Error::Data(format!("{}: {e}", images.display())))?;
    let label_vals = parse_idx_labels(&label_bytes)
        .map_err(|e| Error::Data(format!("{}: {e}", labels.display())))?;
    if features.len() != label_vals.len() {
        return Err(Error::LengthMismatch {
            expected: features.len(),
            got: label_vals.len(),
        });
    }
    let classes = label_vals.iter().copied().max().unwrap_or(0) + 1;
    Dataset::new(features, label_vals, classes.max(2))
}

fn read_u32_be(bytes: &[u8], at: usize) -> std::result::Result<u32, String> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| "truncated header".to_string())
}

fn parse_idx_images(
    bytes: &[u8],
) -> std::result::Result<(Vec<Vec<f64>>, usize, usize), String> {
    let magic = read_u32_be(bytes, 0)?;
    if magic != IDX_IMAGE_MAGIC {
        return Err(format!("bad image magic {magic:#010x}"));
    }
    let count = read_u32_be(bytes, 4)? as usize;
    let rows = read_u32_be(bytes, 8)? as usize;
    let cols = read_u32_be(bytes, 12)? as usize;
    let pixels = rows * cols;
    let body = &bytes[16..];
    if body.len() != count * pixels {
        return Err(format!(
            "expected {} pixel bytes, found {}",
            count * pixels,
            body.len()
        ));
    }
    let features = body
        .chunks_exact(pixels)
        .map(|img| img.iter().map(|&b| b as f64 / 255.0).collect())
        .collect();
    Ok((features, rows, cols))
}

fn parse_idx_labels(bytes: &[u8]) -> std::result::Result<Vec<usize>, String> {
    let magic = read_u32_be(bytes, 0)?;
    if magic != IDX_LABEL_MAGIC {
        return Err(format!("bad label magic {magic:#010x}"));
    }
    let count = read_u32_be(bytes, 4)? as usize;
    let body = &bytes[8..];
    if body.len() != count {
        return Err(format!("expected {count} label bytes, found {}", body.len()));
    }
    Ok(body.iter().map(|&b| b as usize).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gaussians_separated_when_noiseless() {
        let tt = generate_synthetic(SyntheticKind::Gaussians, 100, 2, 2, 0.0, 1).unwrap();
        // Noiseless blobs collapse onto their means; nearest-mean (a linear
        // rule for two classes) classifies the test split perfectly.
        for i in 0..tt.test.len() {
            let x = tt.test.feature(i);
            let d0 = (x[0] - 4.0).powi(2) + x[1].powi(2);
            let d1 = (x[0] + 4.0).powi(2) + x[1].powi(2);
            let pred = if d0 < d1 { 0 } else { 1 };
            assert_eq!(pred, tt.test.label(i));
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_synthetic(SyntheticKind::Spirals, 300, 2, 3, 0.1, 42).unwrap();
        let b = generate_synthetic(SyntheticKind::Spirals, 300, 2, 3, 0.1, 42).unwrap();
        assert_eq!(a.train.features, b.train.features);
        assert_eq!(a.train.labels, b.train.labels);
        assert_eq!(a.test.features, b.test.features);
    }

    #[test]
    fn spirals_classes_balanced() {
        let tt = generate_synthetic(SyntheticKind::Spirals, 3000, 2, 3, 0.15, 7).unwrap();
        let mut counts = tt.train.class_counts();
        let test_counts = tt.test.class_counts();
        for (c, t) in counts.iter_mut().zip(test_counts) {
            *c += t;
        }
        let max = counts.iter().max().unwrap();
        let min = counts.iter().min().unwrap();
        assert!(max - min <= 1, "class counts {counts:?} not balanced");
    }

    #[test]
    fn xor_rings_balanced_and_2d() {
        let tt = generate_synthetic(SyntheticKind::XorRings, 600, 2, 3, 0.05, 3).unwrap();
        let mut counts = tt.train.class_counts();
        for (c, t) in counts.iter_mut().zip(tt.test.class_counts()) {
            *c += t;
        }
        let spread = counts.iter().max().unwrap() - counts.iter().min().unwrap();
        assert!(spread <= 2, "class counts {counts:?}");
    }

    #[test]
    fn split_is_80_20() {
        let tt = generate_synthetic(SyntheticKind::Gaussians, 3000, 2, 3, 0.5, 9).unwrap();
        assert_eq!(tt.train.len(), 2400);
        assert_eq!(tt.test.len(), 600);
    }

    #[test]
    fn rejects_small_n() {
        let err = generate_synthetic(SyntheticKind::Gaussians, 2, 2, 3, 0.5, 1).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn soft_targets_must_be_probabilities() {
        let batch = LabeledBatch::new(vec![vec![0.0], vec![1.0]], vec![0, 1]).unwrap();
        let err = batch
            .clone()
            .with_soft_targets(vec![vec![0.9, 0.2], vec![0.5, 0.5]])
            .unwrap_err();
        assert!(matches!(err, Error::Data(_)));
        let ok = batch.with_soft_targets(vec![vec![0.4, 0.6], vec![0.5, 0.5]]);
        assert!(ok.is_ok());
    }

    #[test]
    fn csv_round_trip() {
        let ds = Dataset::new(
            vec![vec![0.5, -1.25], vec![3.0, 0.1], vec![-0.75, 2.0]],
            vec![0, 1, 1],
            2,
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("toy.csv");
        write_csv(&ds, &path).unwrap();
        let back = load_csv(&path).unwrap();
        assert_eq!(back.features, ds.features);
        assert_eq!(back.labels, ds.labels);
    }

    #[test]
    fn csv_rejects_bad_header() {
        assert!(parse_csv("x,f0\n1,2\n").is_err());
        assert!(parse_csv("label,f0,f2\n1,2,3\n").is_err());
    }

    #[test]
    fn idx_round_trip_tiny() {
        // Two 2x2 images with labels 1 and 0, handcrafted bytes.
        let mut images = Vec::new();
        images.extend_from_slice(&IDX_IMAGE_MAGIC.to_be_bytes());
        images.extend_from_slice(&2u32.to_be_bytes());
        images.extend_from_slice(&2u32.to_be_bytes());
        images.extend_from_slice(&2u32.to_be_bytes());
        images.extend_from_slice(&[0, 255, 128, 0, 255, 0, 0, 64]);
        let mut labels = Vec::new();
        labels.extend_from_slice(&IDX_LABEL_MAGIC.to_be_bytes());
        labels.extend_from_slice(&2u32.to_be_bytes());
        labels.extend_from_slice(&[1, 0]);

        let dir = tempfile::tempdir().unwrap();
        let ip = dir.path().join("im.idx");
        let lp = dir.path().join("lb.idx");
        fs::write(&ip, &images).unwrap();
        fs::write(&lp, &labels).unwrap();
        let ds = load_idx(&ip, &lp).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.dim(), 4);
        assert_eq!(ds.label(0), 1);
        assert!((ds.feature(0)[1] - 1.0).abs() < 1e-12);
        assert!((ds.feature(1)[3] - 64.0 / 255.0).abs() < 1e-12);
    }

    #[test]
    fn idx_rejects_bad_magic() {
        let bytes = 0xdeadbeefu32.to_be_bytes().to_vec();
        assert!(parse_idx_labels(&bytes).is_err());
    }
}
