//! Datasets, stratified splitting and client partitioning.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeededRng;

/// Labeled samples, one row per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Array2<f64>,
    labels: Vec<usize>,
    classes: usize,
}

impl Dataset {
    pub fn new(features: Array2<f64>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        Error::check_len(features.nrows(), labels.len())?;
        if classes < 2 {
            return Err(Error::Argument(format!("need at least 2 classes, got {classes}")));
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::Argument(format!("label {y} out of range for {classes} classes")));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("features must be finite".into()));
        }
        Ok(Self {
            features,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    /// Rows at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        Dataset {
            features: self.features.select(Axis(0), indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
        }
    }

    /// Writes `f0,...,f{d-1},label` CSV. Floats use the shortest
    /// representation that parses back to the same value.
    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let io = |source| Error::Io {
            path: path.to_path_buf(),
            source,
        };
        let mut out = BufWriter::new(File::create(path).map_err(io)?);
        let header: Vec<String> = (0..self.input_dim())
            .map(|j| format!("f{j}"))
            .chain(std::iter::once("label".to_string()))
            .collect();
        writeln!(out, "{}", header.join(",")).map_err(io)?;
        for (row, y) in self.features.rows().into_iter().zip(&self.labels) {
            let mut line = String::new();
            for v in row {
                line.push_str(&format!("{v:?},"));
            }
            line.push_str(&y.to_string());
            writeln!(out, "{line}").map_err(io)?;
        }
        out.flush().map_err(io)
    }

    /// Reads the format written by [`Dataset::save_csv`]. The class count is
    /// `max label + 1` (at least 2). Row numbers in errors count the header
    /// as row 1.
    pub fn load_csv(path: &Path) -> Result<Dataset> {
        let fail = |row: usize, message: String| Error::Ingestion {
            path: path.to_path_buf(),
            row,
            message,
        };
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_path(path)
            .map_err(|e| match e.into_kind() {
                csv::ErrorKind::Io(source) => Error::Io {
                    path: path.to_path_buf(),
                    source,
                },
                other => fail(1, format!("{other:?}")),
            })?;
        let header = reader.headers().map_err(|e| fail(1, e.to_string()))?.clone();
        let dim = header.len().saturating_sub(1);
        let expected: Vec<String> = (0..dim)
            .map(|j| format!("f{j}"))
            .chain(std::iter::once("label".to_string()))
            .collect();
        if dim == 0 || header.iter().ne(expected.iter().map(String::as_str)) {
            return Err(fail(
                1,
                format!("header must be `{}`", expected.join(",")),
            ));
        }
        let mut values = Vec::new();
        let mut labels = Vec::new();
        for (i, record) in reader.records().enumerate() {
            let row = i + 2;
            let record = record.map_err(|e| fail(row, e.to_string()))?;
            if record.len() != dim + 1 {
                return Err(fail(row, format!("expected {} fields, found {}", dim + 1, record.len())));
            }
            for (j, cell) in record.iter().take(dim).enumerate() {
                let v: f64 = cell
                    .trim()
                    .parse()
                    .map_err(|_| fail(row, format!("f{j}: `{cell}` is not a number")))?;
                if !v.is_finite() {
                    return Err(fail(row, format!("f{j}: `{cell}` is not finite")));
                }
                values.push(v);
            }
            let cell = record[dim].trim();
            let y: usize = cell
                .parse()
                .map_err(|_| fail(row, format!("label `{cell}` is not a nonnegative integer")))?;
            labels.push(y);
        }
        let classes = labels.iter().max().map_or(2, |m| (m + 1).max(2));
        let features = Array2::from_shape_vec((labels.len(), dim), values)
            .expect("row lengths checked");
        Dataset::new(features, labels, classes)
    }
}

/// Parameters for Gaussian blob generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct BlobSpec {
    pub class_counts: Vec<usize>,
    pub input_dim: usize,
    /// Minimum pairwise distance between class centers.
    pub separation: f64,
    pub noise_std: f64,
}

const CENTER_ATTEMPTS: usize = 10_000;

/// Gaussian blobs: class `c` has `class_counts[c]` samples from
/// `N(center_c, noise_std² I)`. Centers are drawn uniformly from a ball
/// whose radius grows slowly until all pairs are `separation` apart.
/// Samples are ordered by class.
pub fn generate_blobs(spec: &BlobSpec, rng: &mut SeededRng) -> Result<Dataset> {
    let c = spec.class_counts.len();
    if c < 2 {
        return Err(Error::Argument(format!("need at least 2 classes, got {c}")));
    }
    if spec.class_counts.contains(&0) {
        return Err(Error::Argument("class counts must be positive".into()));
    }
    if spec.input_dim == 0 {
        return Err(Error::Argument("input dimension must be positive".into()));
    }
    if !spec.separation.is_finite() || spec.separation <= 0.0 {
        return Err(Error::Argument(format!("separation {} must be positive", spec.separation)));
    }
    if !spec.noise_std.is_finite() || spec.noise_std < 0.0 {
        return Err(Error::Argument(format!("noise std {} must be nonnegative", spec.noise_std)));
    }
    let centers = place_centers(c, spec.input_dim, spec.separation, rng)?;
    let noise = Normal::new(0.0, spec.noise_std).map_err(|e| Error::Argument(e.to_string()))?;
    let n: usize = spec.class_counts.iter().sum();
    let mut features = Array2::zeros((n, spec.input_dim));
    let mut labels = Vec::with_capacity(n);
    let mut row = 0;
    for (class, &count) in spec.class_counts.iter().enumerate() {
        for _ in 0..count {
            for j in 0..spec.input_dim {
                features[[row, j]] = centers[class][j] + noise.sample(rng);
            }
            labels.push(class);
            row += 1;
        }
    }
    Dataset::new(features, labels, c)
}

fn place_centers(c: usize, dim: usize, separation: f64, rng: &mut SeededRng) -> Result<Vec<Vec<f64>>> {
    let mut radius = separation;
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(c);
    let mut failures = 0;
    for _ in 0..CENTER_ATTEMPTS {
        if centers.len() == c {
            break;
        }
        let candidate = sample_ball(dim, radius, rng);
        let far_enough = centers
            .iter()
            .all(|other| dist(other, &candidate) >= separation);
        if far_enough {
            centers.push(candidate);
        } else {
            failures += 1;
            if failures % 50 == 0 {
                radius *= 1.1;
            }
        }
    }
    if centers.len() < c {
        return Err(Error::Generation(format!(
            "placed only {} of {c} centers {separation} apart after {CENTER_ATTEMPTS} attempts",
            centers.len()
        )));
    }
    Ok(centers)
}

fn sample_ball(dim: usize, radius: f64, rng: &mut SeededRng) -> Vec<f64> {
    let dir: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
    let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    let r = radius * rng.random::<f64>().powf(1.0 / dim as f64);
    dir.into_iter().map(|v| v / norm * r).collect()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor() as usize
}

/// Train / validation / test row indices from [`stratified_split`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

/// Per class: shuffle, send `round(count · test_ratio)` to test, then
/// `round(remaining · val_ratio)` of the rest to validation; the remainder
/// is train. Rounding is half-up. Each output lists indices class by class.
pub fn stratified_split(
    ds: &Dataset,
    test_ratio: f64,
    val_ratio: f64,
    rng: &mut SeededRng,
) -> Result<SplitIndices> {
    if !(test_ratio > 0.0 && test_ratio < 1.0) {
        return Err(Error::Argument(format!("test ratio {test_ratio} must lie in (0, 1)")));
    }
    if !(0.0..1.0).contains(&val_ratio) {
        return Err(Error::Argument(format!("validation ratio {val_ratio} must lie in [0, 1)")));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); ds.classes()];
    for (i, &y) in ds.labels().iter().enumerate() {
        by_class[y].push(i);
    }
    let mut split = SplitIndices {
        train: Vec::new(),
        validation: Vec::new(),
        test: Vec::new(),
    };
    for (class, mut idx) in by_class.into_iter().enumerate() {
        if idx.is_empty() {
            continue;
        }
        if idx.len() < 3 {
            return Err(Error::Argument(format!(
                "class {class} has {} samples; stratified splitting needs at least 3",
                idx.len()
            )));
        }
        idx.shuffle(rng);
        let n_test = round_half_up(idx.len() as f64 * test_ratio).min(idx.len());
        let rest = idx.len() - n_test;
        let n_val = round_half_up(rest as f64 * val_ratio).min(rest);
        split.test.extend_from_slice(&idx[..n_test]);
        split.validation.extend_from_slice(&idx[n_test..n_test + n_val]);
        split.train.extend_from_slice(&idx[n_test + n_val..]);
    }
    Ok(split)
}

/// Sample indices held by each client.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PartitionPlan {
    assignments: Vec<Vec<usize>>,
}

impl PartitionPlan {
    /// Validates that `assignments` is a disjoint cover of `0..n` with no
    /// empty client.
    pub fn new(assignments: Vec<Vec<usize>>, n: usize) -> Result<Self> {
        let mut seen = vec![false; n];
        for (k, shard) in assignments.iter().enumerate() {
            if shard.is_empty() {
                return Err(Error::Partition(format!("client {k} has no samples")));
            }
            for &i in shard {
                if i >= n {
                    return Err(Error::Partition(format!("index {i} out of range for {n} samples")));
                }
                if std::mem::replace(&mut seen[i], true) {
                    return Err(Error::Partition(format!("index {i} assigned twice")));
                }
            }
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(Error::Partition(format!("index {i} not assigned")));
        }
        Ok(Self { assignments })
    }

    pub fn clients(&self) -> usize {
        self.assignments.len()
    }

    pub fn assignments(&self) -> &[Vec<usize>] {
        &self.assignments
    }

    pub fn shard(&self, client: usize) -> &[usize] {
        &self.assignments[client]
    }
}

/// How training data is spread over clients.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum PartitionScheme {
    Iid,
    Dirichlet {
        alpha: f64,
    },
    /// Label-sorted shards, `per_client` shards per client.
    Shards {
        #[serde(rename = "per-client")]
        per_client: usize,
    },
}

impl PartitionScheme {
    pub fn label(&self) -> String {
        match self {
            PartitionScheme::Iid => "iid".into(),
            PartitionScheme::Dirichlet { alpha } => format!("dirichlet({alpha})"),
            PartitionScheme::Shards { per_client } => format!("shards({per_client})"),
        }
    }

    pub fn apply(&self, labels: &[usize], classes: usize, clients: usize, rng: &mut SeededRng) -> Result<PartitionPlan> {
        match *self {
            PartitionScheme::Iid => partition_iid(labels.len(), clients, rng),
            PartitionScheme::Dirichlet { alpha } => {
                partition_dirichlet(labels, classes, clients, alpha, rng)
            }
            PartitionScheme::Shards { per_client } => {
                partition_shards(labels, clients, per_client, rng)
            }
        }
    }
}

/// Global shuffle, then contiguous chunks whose sizes differ by at most one.
pub fn partition_iid(n: usize, clients: usize, rng: &mut SeededRng) -> Result<PartitionPlan> {
    if clients == 0 || clients > n {
        return Err(Error::Argument(format!(
            "cannot split {n} samples over {clients} clients"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let (base, extra) = (n / clients, n % clients);
    let mut assignments = Vec::with_capacity(clients);
    let mut start = 0;
    for k in 0..clients {
        let len = base + usize::from(k < extra);
        assignments.push(order[start..start + len].to_vec());
        start += len;
    }
    PartitionPlan::new(assignments, n)
}

const DIRICHLET_RETRIES: usize = 100;

/// Label skew: each class's samples are dealt to clients in proportions
/// drawn from `Dirichlet(alpha · 1_K)`. Resamples until no client is empty.
pub fn partition_dirichlet(
    labels: &[usize],
    classes: usize,
    clients: usize,
    alpha: f64,
    rng: &mut SeededRng,
) -> Result<PartitionPlan> {
    if clients < 2 {
        return Err(Error::Argument(format!("Dirichlet partition needs at least 2 clients, got {clients}")));
    }
    if clients > labels.len() {
        return Err(Error::Argument(format!(
            "cannot split {} samples over {clients} clients",
            labels.len()
        )));
    }
    if !alpha.is_finite() || alpha <= 0.0 {
        return Err(Error::Argument(format!("alpha {alpha} must be positive")));
    }
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| Error::Argument(e.to_string()))?;
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &y) in labels.iter().enumerate() {
        by_class[y].push(i);
    }
    for _ in 0..DIRICHLET_RETRIES {
        let mut assignments = vec![Vec::new(); clients];
        for idx in &by_class {
            if idx.is_empty() {
                continue;
            }
            let mut idx = idx.clone();
            idx.shuffle(rng);
            let props = dirichlet(&gamma, clients, rng);
            let mut cum = 0.0;
            let mut start = 0;
            for (k, p) in props.iter().enumerate() {
                cum += p;
                let end = if k + 1 == clients {
                    idx.len()
                } else {
                    round_half_up(cum * idx.len() as f64).clamp(start, idx.len())
                };
                assignments[k].extend_from_slice(&idx[start..end]);
                start = end;
            }
        }
        if assignments.iter().all(|a| !a.is_empty()) {
            for a in &mut assignments {
                a.sort_unstable();
            }
            return PartitionPlan::new(assignments, labels.len());
        }
    }
    Err(Error::Partition(format!(
        "no Dirichlet({alpha}) draw left every one of {clients} clients nonempty after {DIRICHLET_RETRIES} tries"
    )))
}

fn dirichlet(gamma: &Gamma<f64>, k: usize, rng: &mut SeededRng) -> Vec<f64> {
    loop {
        let draws: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
        let total: f64 = draws.iter().sum();
        // Small alpha can underflow every draw to zero.
        if total > 0.0 && total.is_finite() {
            return draws.into_iter().map(|g| g / total).collect();
        }
    }
}

/// Sorts indices by label, cuts them into `clients · per_client` contiguous
/// shards and deals `per_client` random shards to each client.
pub fn partition_shards(
    labels: &[usize],
    clients: usize,
    per_client: usize,
    rng: &mut SeededRng,
) -> Result<PartitionPlan> {
    let shards = clients * per_client;
    if clients == 0 || per_client == 0 || shards > labels.len() {
        return Err(Error::Argument(format!(
            "cannot cut {} samples into {clients} x {per_client} shards",
            labels.len()
        )));
    }
    let mut order: Vec<usize> = (0..labels.len()).collect();
    order.sort_by_key(|&i| (labels[i], i));
    let mut shard_ids: Vec<usize> = (0..shards).collect();
    shard_ids.shuffle(rng);
    let (base, extra) = (labels.len() / shards, labels.len() % shards);
    let bounds = |s: usize| {
        let start = s * base + s.min(extra);
        (start, start + base + usize::from(s < extra))
    };
    let assignments = shard_ids
        .chunks(per_client)
        .map(|ids| {
            let mut a: Vec<usize> = ids
                .iter()
                .flat_map(|&s| {
                    let (lo, hi) = bounds(s);
                    order[lo..hi].iter().copied()
                })
                .collect();
            a.sort_unstable();
            a
        })
        .collect();
    PartitionPlan::new(assignments, labels.len())
}
