//! Synthetic concept task generation.
//!
//! A task draws K binary ground-truth concepts per row, embeds them linearly
//! into an n-dimensional input with Gaussian noise, and derives the class
//! label from the concept bits: `y = (sum_i 2^i * c*_i) mod L`. Only the
//! first k concepts are exposed for training, which makes the concept set
//! incomplete whenever the hidden bits still carry label information — the
//! regime where bottleneck leakage matters.
//!
//! Because the generative process is fully known, the exact Bayes posterior
//! over labels given any subset of observed training concepts is computable
//! by enumerating the unobserved bits. That posterior is the reference
//! against which intervention curves are judged.
//!
//! Distribution shift comes in two flavors: salt-and-pepper corruption that
//! pins random features to their training min/max, and an optional spurious
//! block of columns correlated with the label in train/val but permuted at
//! test time.

use crate::seeding::subseed;
use crate::tensor::TensorError;
use crate::Array;
use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::path::Path;
use thiserror::Error;

/// Largest number of unobserved bits `exact_posterior` will enumerate.
pub const MAX_ENUM_BITS: usize = 20;

#[derive(Debug, Error)]
pub enum DatagenError {
    #[error("invalid task spec: {field}: {detail}")]
    InvalidSpec { field: String, detail: String },
    #[error("split fractions {0:?} must be non-negative and sum to 1")]
    BadFractions([f64; 3]),
    #[error("{split} split would be empty under the requested fractions")]
    EmptySplit { split: Split },
    #[error("posterior enumeration over {bits} unobserved bits exceeds the {MAX_ENUM_BITS}-bit guard")]
    EnumerationTooLarge { bits: usize },
    #[error("concept index {index} out of range for {limit} training concepts")]
    ConceptIndexOutOfRange { index: usize, limit: usize },
    #[error("duplicate concept index {index} in observation set")]
    DuplicateConceptIndex { index: usize },
    #[error("observed values count {values} does not match concept set size {concepts}")]
    ObservationLengthMismatch { concepts: usize, values: usize },
    #[error("noise level {0} outside [0, 1]")]
    BadNoiseLevel(f64),
    #[error("feature stats cover {stats} columns but x has {cols}")]
    StatsWidthMismatch { stats: usize, cols: usize },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error in {path} line {line}: {detail}")]
    Parse {
        path: String,
        line: usize,
        detail: String,
    },
    #[error("meta.json error: {0}")]
    Meta(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Spurious-correlation block: extra columns tied to the label in train/val
/// rows and decoupled (label-permuted) in test rows.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpuriousSpec {
    pub n_extra: usize,
    pub strength: f64,
}

/// Full description of a synthetic concept task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    /// Total rows generated (before splitting).
    pub n_samples: usize,
    /// Signal feature count (spurious columns come on top).
    pub n_features: usize,
    /// Total concept bits K driving the label.
    pub n_concepts_total: usize,
    /// Leading k <= K concepts exposed as training annotations.
    pub n_concepts_train: usize,
    /// Class count L; the label is the concept integer mod L.
    pub n_classes: usize,
    /// Standard deviation of the additive feature noise.
    pub sigma_x: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spurious: Option<SpuriousSpec>,
    pub seed: u64,
}

impl TaskSpec {
    pub fn validate(&self) -> Result<(), DatagenError> {
        let err = |field: &str, detail: String| {
            Err(DatagenError::InvalidSpec {
                field: field.to_string(),
                detail,
            })
        };
        if self.n_samples == 0 {
            return err("n_samples", "must be positive".into());
        }
        if self.n_features == 0 {
            return err("n_features", "must be positive".into());
        }
        let k_total = self.n_concepts_total;
        if k_total == 0 || k_total > MAX_ENUM_BITS {
            return err(
                "n_concepts_total",
                format!("must lie in 1..={MAX_ENUM_BITS}"),
            );
        }
        if self.n_concepts_train == 0 || self.n_concepts_train > k_total {
            return err(
                "n_concepts_train",
                format!("must lie in 1..={k_total} (n_concepts_total)"),
            );
        }
        if self.n_classes < 2 {
            return err("n_classes", "must be at least 2".into());
        }
        let patterns = 1u64 << k_total;
        if self.n_classes as u64 > patterns {
            return err(
                "n_classes",
                format!("exceeds the {patterns} concept patterns of K={k_total} bits"),
            );
        }
        if !(self.sigma_x.is_finite() && self.sigma_x >= 0.0) {
            return err("sigma_x", "must be finite and non-negative".into());
        }
        if let Some(sp) = &self.spurious {
            if sp.n_extra == 0 {
                return err("spurious.n_extra", "must be positive when present".into());
            }
            if !(sp.strength.is_finite() && sp.strength >= 0.0) {
                return err("spurious.strength", "must be finite and non-negative".into());
            }
        }
        Ok(())
    }

    /// Total column count of generated inputs.
    pub fn width(&self) -> usize {
        self.n_features + self.spurious.map_or(0, |s| s.n_extra)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Split::Train => write!(f, "train"),
            Split::Val => write!(f, "val"),
            Split::Test => write!(f, "test"),
        }
    }
}

/// Per-feature min/max over the training rows; the anchor for
/// salt-and-pepper corruption.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

/// A generated task instance with split tags and training feature stats.
#[derive(Debug, Clone)]
pub struct ConceptDataset {
    pub spec: TaskSpec,
    /// Inputs, `[N, width]`.
    pub x: Array,
    /// All K ground-truth concept bits, `[N, K]`, values 0/1.
    pub c_star: Array,
    /// Training concept annotations: the leading k columns of `c_star`.
    pub c: Array,
    /// Class labels in `0..L`.
    pub y: Vec<usize>,
    pub split: Vec<Split>,
    pub feature_stats: FeatureStats,
}

impl ConceptDataset {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn width(&self) -> usize {
        self.x.shape()[1]
    }

    /// Row indices carrying a split tag, in dataset order.
    pub fn indices(&self, split: Split) -> Vec<usize> {
        self.split
            .iter()
            .enumerate()
            .filter(|(_, s)| **s == split)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn x_rows(&self, rows: &[usize]) -> Array {
        take_rows(&self.x, rows)
    }

    pub fn c_rows(&self, rows: &[usize]) -> Array {
        take_rows(&self.c, rows)
    }

    pub fn c_star_rows(&self, rows: &[usize]) -> Array {
        take_rows(&self.c_star, rows)
    }

    pub fn y_rows(&self, rows: &[usize]) -> Vec<usize> {
        rows.iter().map(|&r| self.y[r]).collect()
    }

    /// Fraction of positive labels per training concept over one split.
    pub fn concept_frequencies(&self, split: Split) -> Vec<f64> {
        let rows = self.indices(split);
        let k = self.c.shape()[1];
        let mut freq = vec![0.0; k];
        for &r in &rows {
            for (j, f) in freq.iter_mut().enumerate() {
                *f += self.c.at(r, j);
            }
        }
        let n = rows.len().max(1) as f64;
        for f in freq.iter_mut() {
            *f /= n;
        }
        freq
    }
}

/// Gathers the given rows of a rank-2 array into a new array.
pub fn take_rows(arr: &Array, rows: &[usize]) -> Array {
    let cols = arr.shape()[1];
    let mut data = Vec::with_capacity(rows.len() * cols);
    for &r in rows {
        data.extend_from_slice(arr.row(r));
    }
    Array::from_raw(vec![rows.len(), cols], data)
}

fn split_counts(n: usize, fractions: [f64; 3]) -> Result<[usize; 3], DatagenError> {
    let sum: f64 = fractions.iter().sum();
    if fractions.iter().any(|f| !f.is_finite() || *f < 0.0) || (sum - 1.0).abs() > 1e-9 {
        return Err(DatagenError::BadFractions(fractions));
    }
    let n_train = (fractions[0] * n as f64).round() as usize;
    let n_val = (fractions[1] * n as f64).round() as usize;
    if n_train + n_val > n {
        return Err(DatagenError::BadFractions(fractions));
    }
    let n_test = n - n_train - n_val;
    let counts = [n_train, n_val, n_test];
    for (count, split) in counts.iter().zip([Split::Train, Split::Val, Split::Test]) {
        if *count == 0 {
            return Err(DatagenError::EmptySplit { split });
        }
    }
    Ok(counts)
}

fn assign_splits(n: usize, fractions: [f64; 3], seed: u64) -> Result<Vec<Split>, DatagenError> {
    let counts = split_counts(n, fractions)?;
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let mut tags = vec![Split::Test; n];
    for (pos, &row) in order.iter().enumerate() {
        tags[row] = if pos < counts[0] {
            Split::Train
        } else if pos < counts[0] + counts[1] {
            Split::Val
        } else {
            Split::Test
        };
    }
    Ok(tags)
}

fn train_feature_stats(x: &Array, tags: &[Split]) -> FeatureStats {
    let cols = x.shape()[1];
    let mut min = vec![f64::INFINITY; cols];
    let mut max = vec![f64::NEG_INFINITY; cols];
    for (r, tag) in tags.iter().enumerate() {
        if *tag != Split::Train {
            continue;
        }
        for (j, &v) in x.row(r).iter().enumerate() {
            min[j] = min[j].min(v);
            max[j] = max[j].max(v);
        }
    }
    FeatureStats { min, max }
}

/// Label rule shared by the generator and the exact posterior.
fn label_of_bits(bits: &[u8], n_classes: usize) -> usize {
    let mut acc: u64 = 0;
    for (i, &b) in bits.iter().enumerate() {
        acc += (b as u64) << i;
    }
    (acc % n_classes as u64) as usize
}

/// Draws a complete task instance: concepts, inputs, labels, split tags and
/// training feature stats. Deterministic in the spec (including its seed).
pub fn generate_task(spec: &TaskSpec) -> Result<ConceptDataset, DatagenError> {
    spec.validate()?;
    let n = spec.n_samples;
    let kk = spec.n_concepts_total;
    let k = spec.n_concepts_train;
    let d = spec.n_features;
    let width = spec.width();

    // Concept bits, row-major.
    let mut rng = ChaCha12Rng::seed_from_u64(subseed(spec.seed, "datagen/cstar"));
    let mut cstar = vec![0u8; n * kk];
    for b in cstar.iter_mut() {
        *b = rng.gen_bool(0.5) as u8;
    }

    // Mixing matrix A, [d, K], standard normal scaled by 1/sqrt(K).
    let mut rng = ChaCha12Rng::seed_from_u64(subseed(spec.seed, "datagen/mixing"));
    let scale = 1.0 / (kk as f64).sqrt();
    let a: Vec<f64> = (0..d * kk)
        .map(|_| rng.sample::<f64, _>(StandardNormal) * scale)
        .collect();

    // Labels from the concept integer.
    let y: Vec<usize> = (0..n)
        .map(|r| label_of_bits(&cstar[r * kk..(r + 1) * kk], spec.n_classes))
        .collect();

    // Inputs: x = A (2 c* - 1) + sigma * eps, then the spurious block.
    let mut rng = ChaCha12Rng::seed_from_u64(subseed(spec.seed, "datagen/noise"));
    let mut x = vec![0.0f64; n * width];
    for r in 0..n {
        let bits = &cstar[r * kk..(r + 1) * kk];
        let row = &mut x[r * width..r * width + d];
        for (j, slot) in row.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (i, &b) in bits.iter().enumerate() {
                let signed = 2.0 * b as f64 - 1.0;
                acc += a[j * kk + i] * signed;
            }
            *slot = acc + spec.sigma_x * rng.sample::<f64, _>(StandardNormal);
        }
    }

    // Split tags are drawn before the spurious block because the block's
    // test-time decorrelation needs to know which rows are test rows.
    let split = assign_splits(n, [0.6, 0.2, 0.2], subseed(spec.seed, "datagen/split"))?;

    if let Some(sp) = spec.spurious {
        let mut rng = ChaCha12Rng::seed_from_u64(subseed(spec.seed, "datagen/spurious"));
        // Template row per label, [L, n_extra].
        let b: Vec<f64> = (0..spec.n_classes * sp.n_extra)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        // Seed-fixed label permutation applied to test rows only. Redrawn
        // until it is a derangement so the test-time association really does
        // move for every label.
        let mut perm: Vec<usize> = (0..spec.n_classes).collect();
        loop {
            perm.shuffle(&mut rng);
            if perm.iter().enumerate().all(|(i, &p)| i != p) {
                break;
            }
        }
        for r in 0..n {
            let label = if split[r] == Split::Test { perm[y[r]] } else { y[r] };
            let template = &b[label * sp.n_extra..(label + 1) * sp.n_extra];
            let row = &mut x[r * width + d..(r + 1) * width];
            for (slot, &t) in row.iter_mut().zip(template) {
                *slot = sp.strength * t + spec.sigma_x * rng.sample::<f64, _>(StandardNormal);
            }
        }
    }

    let x = Array::new(vec![n, width], x)?;
    let c_star = Array::from_raw(vec![n, kk], cstar.iter().map(|&b| b as f64).collect());
    let c = Array::from_raw(
        vec![n, k],
        (0..n)
            .flat_map(|r| (0..k).map(move |j| r * kk + j))
            .map(|idx| cstar[idx] as f64)
            .collect(),
    );
    let feature_stats = train_feature_stats(&x, &split);

    Ok(ConceptDataset {
        spec: spec.clone(),
        x,
        c_star,
        c,
        y,
        split,
        feature_stats,
    })
}

/// Exact label posterior given observed training concepts.
///
/// `concepts` are 0-based indices into the k training concepts, `values`
/// their observed bits. Every unobserved bit (the remaining training
/// concepts and all hidden ones) is enumerated under its uniform prior, so
/// the result is a vector of dyadic rationals summing to exactly 1.
pub fn exact_posterior(
    spec: &TaskSpec,
    concepts: &[usize],
    values: &[bool],
) -> Result<Vec<f64>, DatagenError> {
    spec.validate()?;
    if concepts.len() != values.len() {
        return Err(DatagenError::ObservationLengthMismatch {
            concepts: concepts.len(),
            values: values.len(),
        });
    }
    let kk = spec.n_concepts_total;
    let k = spec.n_concepts_train;
    let mut seen = vec![false; k];
    for &idx in concepts {
        if idx >= k {
            return Err(DatagenError::ConceptIndexOutOfRange { index: idx, limit: k });
        }
        if seen[idx] {
            return Err(DatagenError::DuplicateConceptIndex { index: idx });
        }
        seen[idx] = true;
    }
    let free: Vec<usize> = (0..kk)
        .filter(|i| !(*i < k && seen[*i]))
        .collect();
    if free.len() > MAX_ENUM_BITS {
        return Err(DatagenError::EnumerationTooLarge { bits: free.len() });
    }

    let mut bits = vec![0u8; kk];
    for (&idx, &val) in concepts.iter().zip(values) {
        bits[idx] = val as u8;
    }
    let mut counts = vec![0u64; spec.n_classes];
    let total = 1u64 << free.len();
    for pattern in 0..total {
        for (pos, &bit_idx) in free.iter().enumerate() {
            bits[bit_idx] = ((pattern >> pos) & 1) as u8;
        }
        counts[label_of_bits(&bits, spec.n_classes)] += 1;
    }
    Ok(counts
        .iter()
        .map(|&cnt| cnt as f64 / total as f64)
        .collect())
}

/// Salt-and-pepper corruption anchored at the training extremes.
///
/// Per row, `floor(level/2 * width)` feature indices are drawn with
/// replacement and pinned to the training maximum of their column, then the
/// same number of draws are pinned to the training minimum. Level 0 returns
/// a byte-identical copy.
pub fn inject_salt_pepper(
    x: &Array,
    level: f64,
    stats: &FeatureStats,
    seed: u64,
) -> Result<Array, DatagenError> {
    if !(level.is_finite() && (0.0..=1.0).contains(&level)) {
        return Err(DatagenError::BadNoiseLevel(level));
    }
    let cols = x.shape()[1];
    if stats.min.len() != cols || stats.max.len() != cols {
        return Err(DatagenError::StatsWidthMismatch {
            stats: stats.min.len().min(stats.max.len()),
            cols,
        });
    }
    let per_row = ((level / 2.0) * cols as f64).floor() as usize;
    let mut out = x.clone();
    if per_row == 0 {
        return Ok(out);
    }
    let rows = x.shape()[0];
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    for r in 0..rows {
        for _ in 0..per_row {
            let j = rng.gen_range(0..cols);
            out.set(r, j, stats.max[j]);
        }
        for _ in 0..per_row {
            let j = rng.gen_range(0..cols);
            out.set(r, j, stats.min[j]);
        }
    }
    Ok(out)
}

/// Re-tags the dataset with a fresh seeded split and recomputes the training
/// feature stats. Rows themselves are unchanged.
pub fn split_dataset(
    dataset: &ConceptDataset,
    fractions: [f64; 3],
    seed: u64,
) -> Result<ConceptDataset, DatagenError> {
    let split = assign_splits(dataset.len(), fractions, seed)?;
    let feature_stats = train_feature_stats(&dataset.x, &split);
    Ok(ConceptDataset {
        spec: dataset.spec.clone(),
        x: dataset.x.clone(),
        c_star: dataset.c_star.clone(),
        c: dataset.c.clone(),
        y: dataset.y.clone(),
        split,
        feature_stats,
    })
}

#[derive(Serialize, Deserialize)]
struct DatasetMeta {
    spec: TaskSpec,
    split: Vec<Split>,
    feature_stats: FeatureStats,
}

fn io_err(path: &Path, source: std::io::Error) -> DatagenError {
    DatagenError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Formats a float with 9 significant digits; parsing and re-formatting the
/// result is the identity, which makes dataset round trips value-exact.
pub fn format_f64(v: f64) -> String {
    format!("{v:.8e}")
}

fn write_float_csv(path: &Path, arr: &Array) -> Result<(), DatagenError> {
    let mut out = String::new();
    for r in 0..arr.shape()[0] {
        for (j, v) in arr.row(r).iter().enumerate() {
            if j > 0 {
                out.push(',');
            }
            out.push_str(&format_f64(*v));
        }
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| io_err(path, e))
}

fn write_bit_csv(path: &Path, arr: &Array) -> Result<(), DatagenError> {
    let mut out = String::new();
    for r in 0..arr.shape()[0] {
        for (j, v) in arr.row(r).iter().enumerate() {
            if j > 0 {
                out.push(',');
            }
            out.push(if *v != 0.0 { '1' } else { '0' });
        }
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| io_err(path, e))
}

fn read_csv_matrix(path: &Path) -> Result<(usize, usize, Vec<f64>), DatagenError> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut data = Vec::new();
    let mut cols = None;
    let mut rows = 0;
    for (lineno, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        match cols {
            None => cols = Some(fields.len()),
            Some(c) if c != fields.len() => {
                return Err(DatagenError::Parse {
                    path: path.display().to_string(),
                    line: lineno + 1,
                    detail: format!("expected {c} fields, found {}", fields.len()),
                })
            }
            _ => {}
        }
        for f in fields {
            let v: f64 = f.parse().map_err(|e| DatagenError::Parse {
                path: path.display().to_string(),
                line: lineno + 1,
                detail: format!("bad float `{f}`: {e}"),
            })?;
            data.push(v);
        }
        rows += 1;
    }
    Ok((rows, cols.unwrap_or(0), data))
}

/// Writes `x.csv`, `c_star.csv`, `c.csv`, `y.csv` (headerless) and
/// `meta.json` into `dir`, creating it if needed.
pub fn save_dataset(dataset: &ConceptDataset, dir: &Path) -> Result<(), DatagenError> {
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    write_float_csv(&dir.join("x.csv"), &dataset.x)?;
    write_bit_csv(&dir.join("c_star.csv"), &dataset.c_star)?;
    write_bit_csv(&dir.join("c.csv"), &dataset.c)?;
    let y_path = dir.join("y.csv");
    let mut out = String::new();
    for &label in &dataset.y {
        out.push_str(&label.to_string());
        out.push('\n');
    }
    std::fs::write(&y_path, out).map_err(|e| io_err(&y_path, e))?;
    let meta = DatasetMeta {
        spec: dataset.spec.clone(),
        split: dataset.split.clone(),
        feature_stats: dataset.feature_stats.clone(),
    };
    let meta_path = dir.join("meta.json");
    let text = serde_json::to_string_pretty(&meta).map_err(|e| DatagenError::Meta(e.to_string()))?;
    std::fs::write(&meta_path, text + "\n").map_err(|e| io_err(&meta_path, e))
}

/// Loads a dataset directory written by [`save_dataset`], validating shapes
/// against the stored spec.
pub fn load_dataset(dir: &Path) -> Result<ConceptDataset, DatagenError> {
    let meta_path = dir.join("meta.json");
    let text = std::fs::read_to_string(&meta_path).map_err(|e| io_err(&meta_path, e))?;
    let meta: DatasetMeta =
        serde_json::from_str(&text).map_err(|e| DatagenError::Meta(e.to_string()))?;
    meta.spec.validate()?;

    let (rows, cols, xdata) = read_csv_matrix(&dir.join("x.csv"))?;
    let expect = |name: &str, got: (usize, usize), want: (usize, usize)| {
        if got != want {
            Err(DatagenError::Meta(format!(
                "{name} is {got:?} but spec implies {want:?}"
            )))
        } else {
            Ok(())
        }
    };
    expect("x.csv", (rows, cols), (meta.spec.n_samples, meta.spec.width()))?;
    let x = Array::new(vec![rows, cols], xdata)?;

    let (rows, cols, data) = read_csv_matrix(&dir.join("c_star.csv"))?;
    expect(
        "c_star.csv",
        (rows, cols),
        (meta.spec.n_samples, meta.spec.n_concepts_total),
    )?;
    let c_star = Array::new(vec![rows, cols], data)?;

    let (rows, cols, data) = read_csv_matrix(&dir.join("c.csv"))?;
    expect(
        "c.csv",
        (rows, cols),
        (meta.spec.n_samples, meta.spec.n_concepts_train),
    )?;
    let c = Array::new(vec![rows, cols], data)?;

    let y_path = dir.join("y.csv");
    let y_text = std::fs::read_to_string(&y_path).map_err(|e| io_err(&y_path, e))?;
    let mut y = Vec::new();
    for (lineno, line) in y_text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let v: usize = line.trim().parse().map_err(|e| DatagenError::Parse {
            path: y_path.display().to_string(),
            line: lineno + 1,
            detail: format!("bad label `{line}`: {e}"),
        })?;
        if v >= meta.spec.n_classes {
            return Err(DatagenError::Parse {
                path: y_path.display().to_string(),
                line: lineno + 1,
                detail: format!("label {v} outside 0..{}", meta.spec.n_classes),
            });
        }
        y.push(v);
    }
    if y.len() != meta.spec.n_samples || meta.split.len() != meta.spec.n_samples {
        return Err(DatagenError::Meta(format!(
            "row counts disagree: y={}, split={}, spec={}",
            y.len(),
            meta.split.len(),
            meta.spec.n_samples
        )));
    }

    Ok(ConceptDataset {
        spec: meta.spec,
        x,
        c_star,
        c,
        y,
        split: meta.split,
        feature_stats: meta.feature_stats,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_spec() -> TaskSpec {
        TaskSpec {
            n_samples: 40,
            n_features: 6,
            n_concepts_total: 2,
            n_concepts_train: 2,
            n_classes: 4,
            sigma_x: 0.1,
            spurious: None,
            seed: 11,
        }
    }

    #[test]
    fn validation_rejects_infeasible_specs() {
        let mut s = tiny_spec();
        s.n_concepts_train = 3;
        assert!(matches!(
            s.validate(),
            Err(DatagenError::InvalidSpec { field, .. }) if field == "n_concepts_train"
        ));
        let mut s = tiny_spec();
        s.n_classes = 8; // more classes than 2^2 concept patterns
        assert!(s.validate().is_err());
        let mut s = tiny_spec();
        s.sigma_x = -0.5;
        assert!(s.validate().is_err());
        let mut s = tiny_spec();
        s.n_concepts_total = 32;
        assert!(s.validate().is_err());
    }

    #[test]
    fn labels_follow_the_bit_rule() {
        let ds = generate_task(&tiny_spec()).unwrap();
        for r in 0..ds.len() {
            let expected = (ds.c_star.at(r, 0) + 2.0 * ds.c_star.at(r, 1)) as usize % 4;
            assert_eq!(ds.y[r], expected);
        }
        // c is the leading-column prefix of c_star.
        for r in 0..ds.len() {
            for j in 0..2 {
                assert_eq!(ds.c.at(r, j), ds.c_star.at(r, j));
            }
        }
    }

    #[test]
    fn zero_noise_makes_x_an_exact_linear_image() {
        let mut spec = tiny_spec();
        spec.sigma_x = 0.0;
        let ds = generate_task(&spec).unwrap();
        // Rows with identical concept patterns must produce identical x rows.
        for r in 1..ds.len() {
            for q in 0..r {
                if ds.c_star.row(r) == ds.c_star.row(q) {
                    assert_eq!(ds.x.row(r), ds.x.row(q));
                }
            }
        }
    }

    #[test]
    fn label_frequencies_are_near_uniform() {
        let spec = TaskSpec {
            n_samples: 2000,
            n_features: 8,
            n_concepts_total: 4,
            n_concepts_train: 2,
            n_classes: 8,
            sigma_x: 0.3,
            spurious: None,
            seed: 5,
        };
        let ds = generate_task(&spec).unwrap();
        let mut counts = vec![0usize; 8];
        for &label in &ds.y {
            counts[label] += 1;
        }
        for count in counts {
            let freq = count as f64 / 2000.0;
            assert!((freq - 0.125).abs() < 0.05, "freq {freq}");
        }
    }

    #[test]
    fn generation_is_deterministic_in_the_seed() {
        let a = generate_task(&tiny_spec()).unwrap();
        let b = generate_task(&tiny_spec()).unwrap();
        assert!(a.x.value_eq(&b.x));
        assert_eq!(a.y, b.y);
        assert_eq!(a.split, b.split);
        let mut other = tiny_spec();
        other.seed = 12;
        let c = generate_task(&other).unwrap();
        assert!(!a.x.value_eq(&c.x));
    }

    #[test]
    fn posterior_matches_hand_enumeration() {
        let spec = TaskSpec {
            n_samples: 1,
            n_features: 1,
            n_concepts_total: 2,
            n_concepts_train: 2,
            n_classes: 4,
            sigma_x: 0.0,
            spurious: None,
            seed: 0,
        };
        // Observe concept 1 (0-based 0) = 1: y = 1 + 2*b -> {1, 3}.
        let p = exact_posterior(&spec, &[0], &[true]).unwrap();
        assert_eq!(p, vec![0.0, 0.5, 0.0, 0.5]);
        // All concepts observed: one-hot at the realized label.
        let p = exact_posterior(&spec, &[0, 1], &[true, true]).unwrap();
        assert_eq!(p, vec![0.0, 0.0, 0.0, 1.0]);
        // Nothing observed, L = 2^K: uniform.
        let p = exact_posterior(&spec, &[], &[]).unwrap();
        assert_eq!(p, vec![0.25; 4]);
    }

    #[test]
    fn posterior_sums_to_exactly_one() {
        let spec = TaskSpec {
            n_samples: 1,
            n_features: 1,
            n_concepts_total: 7,
            n_concepts_train: 3,
            n_classes: 5,
            sigma_x: 0.0,
            spurious: None,
            seed: 0,
        };
        for pattern in 0..8u8 {
            let vals: Vec<bool> = (0..3).map(|i| (pattern >> i) & 1 == 1).collect();
            let p = exact_posterior(&spec, &[0, 1, 2], &vals).unwrap();
            let total: f64 = p.iter().sum();
            assert_eq!(total, 1.0);
        }
    }

    #[test]
    fn empty_observation_is_the_average_of_full_posteriors() {
        // Law of total probability over the uniform concept prior.
        let spec = TaskSpec {
            n_samples: 1,
            n_features: 1,
            n_concepts_total: 5,
            n_concepts_train: 5,
            n_classes: 6,
            sigma_x: 0.0,
            spurious: None,
            seed: 0,
        };
        let marginal = exact_posterior(&spec, &[], &[]).unwrap();
        let mut avg = vec![0.0; 6];
        let all: Vec<usize> = (0..5).collect();
        for pattern in 0..32u32 {
            let vals: Vec<bool> = (0..5).map(|i| (pattern >> i) & 1 == 1).collect();
            let p = exact_posterior(&spec, &all, &vals).unwrap();
            for (a, v) in avg.iter_mut().zip(p) {
                *a += v / 32.0;
            }
        }
        for (m, a) in marginal.iter().zip(avg) {
            assert!((m - a).abs() < 1e-12);
        }
    }

    #[test]
    fn posterior_rejects_bad_observations() {
        let spec = tiny_spec();
        assert!(matches!(
            exact_posterior(&spec, &[5], &[true]),
            Err(DatagenError::ConceptIndexOutOfRange { index: 5, .. })
        ));
        assert!(matches!(
            exact_posterior(&spec, &[0, 0], &[true, false]),
            Err(DatagenError::DuplicateConceptIndex { index: 0 })
        ));
        assert!(matches!(
            exact_posterior(&spec, &[0], &[]),
            Err(DatagenError::ObservationLengthMismatch { .. })
        ));
    }

    #[test]
    fn salt_pepper_level_zero_is_identity() {
        let ds = generate_task(&tiny_spec()).unwrap();
        let out = inject_salt_pepper(&ds.x, 0.0, &ds.feature_stats, 3).unwrap();
        assert!(out.value_eq(&ds.x));
    }

    #[test]
    fn salt_pepper_pins_to_training_extremes() {
        let ds = generate_task(&tiny_spec()).unwrap();
        // width 6, level 0.4 -> floor(0.2 * 6) = 1 draw to max then 1 to min.
        let out = inject_salt_pepper(&ds.x, 0.4, &ds.feature_stats, 3).unwrap();
        for r in 0..ds.len() {
            let changed: Vec<usize> = (0..6).filter(|&j| out.at(r, j) != ds.x.at(r, j)).collect();
            assert!(changed.len() <= 2, "row {r} changed {changed:?}");
            for j in changed {
                let v = out.at(r, j);
                assert!(
                    v == ds.feature_stats.min[j] || v == ds.feature_stats.max[j],
                    "row {r} col {j} pinned to {v}"
                );
            }
        }
        // Deterministic replay.
        let again = inject_salt_pepper(&ds.x, 0.4, &ds.feature_stats, 3).unwrap();
        assert!(again.value_eq(&out));
    }

    #[test]
    fn salt_pepper_level_one_pins_everything_it_touches() {
        let ds = generate_task(&tiny_spec()).unwrap();
        let out = inject_salt_pepper(&ds.x, 1.0, &ds.feature_stats, 9).unwrap();
        for r in 0..ds.len() {
            for j in 0..6 {
                let v = out.at(r, j);
                let untouched = v == ds.x.at(r, j);
                let pinned = v == ds.feature_stats.min[j] || v == ds.feature_stats.max[j];
                assert!(untouched || pinned);
            }
        }
    }

    #[test]
    fn split_counts_round_to_requested_fractions() {
        let counts = split_counts(10, [0.6, 0.2, 0.2]).unwrap();
        assert_eq!(counts, [6, 2, 2]);
        assert!(matches!(
            split_counts(10, [1.0, 0.0, 0.0]),
            Err(DatagenError::EmptySplit { split: Split::Val })
        ));
        assert!(split_counts(10, [0.5, 0.4, 0.3]).is_err());
    }

    #[test]
    fn resplit_retags_and_recomputes_stats() {
        let ds = generate_task(&tiny_spec()).unwrap();
        let re = split_dataset(&ds, [0.5, 0.25, 0.25], 77).unwrap();
        assert_eq!(re.indices(Split::Train).len(), 20);
        assert_eq!(re.indices(Split::Val).len(), 10);
        assert_eq!(re.indices(Split::Test).len(), 10);
        assert!(re.x.value_eq(&ds.x));
        // Same seed replays identically.
        let re2 = split_dataset(&ds, [0.5, 0.25, 0.25], 77).unwrap();
        assert_eq!(re.split, re2.split);
    }

    #[test]
    fn spurious_block_correlates_in_train_and_permutes_in_test() {
        let spec = TaskSpec {
            n_samples: 600,
            n_features: 4,
            n_concepts_total: 3,
            n_concepts_train: 3,
            n_classes: 4,
            sigma_x: 0.0,
            spurious: Some(SpuriousSpec {
                n_extra: 2,
                strength: 3.0,
            }),
            seed: 21,
        };
        let ds = generate_task(&spec).unwrap();
        assert_eq!(ds.width(), 6);
        // With zero feature noise the spurious block is exactly the label
        // template, so within train rows it is a function of y...
        let train = ds.indices(Split::Train);
        let test = ds.indices(Split::Test);
        let template_of = |rows: &[usize], label: usize| -> Option<Vec<f64>> {
            rows.iter()
                .find(|&&r| ds.y[r] == label)
                .map(|&r| ds.x.row(r)[4..].to_vec())
        };
        let mut moved = 0;
        for label in 0..4 {
            let (Some(tr), Some(te)) = (template_of(&train, label), template_of(&test, label))
            else {
                continue;
            };
            for &r in train.iter().filter(|&&r| ds.y[r] == label) {
                assert_eq!(ds.x.row(r)[4..].to_vec(), tr);
            }
            for &r in test.iter().filter(|&&r| ds.y[r] == label) {
                assert_eq!(ds.x.row(r)[4..].to_vec(), te);
            }
            // ...while in test rows the same label carries a different
            // template: the permutation is a derangement.
            assert_ne!(tr, te);
            moved += 1;
        }
        assert!(moved >= 2, "too few labels observed in both splits");
    }

    #[test]
    fn dataset_round_trips_byte_identically() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_task(&tiny_spec()).unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let loaded = load_dataset(dir.path()).unwrap();
        let dir2 = tempfile::tempdir().unwrap();
        save_dataset(&loaded, dir2.path()).unwrap();
        for name in ["x.csv", "c_star.csv", "c.csv", "y.csv", "meta.json"] {
            let a = std::fs::read(dir.path().join(name)).unwrap();
            let b = std::fs::read(dir2.path().join(name)).unwrap();
            assert_eq!(a, b, "{name} differs after round trip");
        }
        assert_eq!(loaded.y, ds.y);
        assert_eq!(loaded.split, ds.split);
    }
}
