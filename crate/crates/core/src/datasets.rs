//! Synthetic benchmark construction and CSV persistence for labeled samples.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::seed::{self, StreamRng};

/// Row-major feature matrix paired with integer class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSet {
    features: Vec<f64>,
    labels: Vec<usize>,
    dim: usize,
    num_classes: usize,
}

impl LabeledSet {
    pub fn new(features: Vec<f64>, labels: Vec<usize>, dim: usize, num_classes: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("feature dimension must be at least 1"));
        }
        if num_classes == 0 {
            return Err(Error::invalid("class count must be at least 1"));
        }
        if features.len() != labels.len() * dim {
            return Err(Error::invalid(format!(
                "{} feature values do not form {} rows of width {}",
                features.len(),
                labels.len(),
                dim
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::invalid(format!("label {bad} outside [0, {num_classes})")));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("feature values must be finite"));
        }
        Ok(LabeledSet { features, labels, dim, num_classes })
    }

    pub fn empty(dim: usize, num_classes: usize) -> Self {
        LabeledSet { features: Vec::new(), labels: Vec::new(), dim, num_classes }
    }

    /// Unlabeled sample set; every label is 0.
    pub fn unlabeled(features: Vec<f64>, dim: usize) -> Result<Self> {
        let n = features.len().checked_div(dim).unwrap_or(0);
        Self::new(features, vec![0; n], dim, 1)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        self.features.chunks_exact(self.dim)
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    /// Rows at the given indices, in that order.
    pub fn select(&self, indices: &[usize]) -> LabeledSet {
        let mut features = Vec::with_capacity(indices.len() * self.dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            features.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        LabeledSet { features, labels, dim: self.dim, num_classes: self.num_classes }
    }

    pub fn push(&mut self, row: &[f64], label: usize) {
        debug_assert_eq!(row.len(), self.dim);
        debug_assert!(label < self.num_classes);
        self.features.extend_from_slice(row);
        self.labels.push(label);
    }

    pub fn with_labels(mut self, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        crate::error::ensure_dim(self.labels.len(), labels.len())?;
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::invalid(format!("label {bad} outside [0, {num_classes})")));
        }
        self.labels = labels;
        self.num_classes = num_classes;
        Ok(self)
    }

    pub fn concat(&self, other: &LabeledSet) -> Result<LabeledSet> {
        crate::error::ensure_dim(self.dim, other.dim)?;
        let mut out = self.clone();
        out.num_classes = self.num_classes.max(other.num_classes);
        out.features.extend_from_slice(&other.features);
        out.labels.extend_from_slice(&other.labels);
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkSpec {
    pub num_classes: usize,
    pub dim: usize,
    pub n_train_per_class: usize,
    pub n_test_per_class: usize,
    pub n_near: usize,
    pub n_far: usize,
    /// Radius of the class means.
    pub r_id: f64,
    /// Within-class standard deviation.
    pub spread: f64,
    /// Far-OOD displacement, as a multiple of `r_id`.
    pub r_far: f64,
    pub seed: u64,
}

impl Default for BenchmarkSpec {
    fn default() -> Self {
        BenchmarkSpec {
            num_classes: 8,
            dim: 16,
            n_train_per_class: 200,
            n_test_per_class: 100,
            n_near: 800,
            n_far: 800,
            r_id: 4.0,
            spread: 1.0,
            r_far: 1.1,
            seed: 0,
        }
    }
}

impl BenchmarkSpec {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("num_classes", self.num_classes),
            ("dim", self.dim),
            ("n_train_per_class", self.n_train_per_class),
            ("n_test_per_class", self.n_test_per_class),
            ("n_near", self.n_near),
            ("n_far", self.n_far),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::invalid(format!("benchmark {name} must be at least 1")));
            }
        }
        if self.num_classes > 2 * self.dim {
            return Err(Error::invalid(format!(
                "{} classes cannot be placed on the axes of a {}-dimensional space (max {})",
                self.num_classes,
                self.dim,
                2 * self.dim
            )));
        }
        if !(self.r_id > 0.0 && self.r_id.is_finite()) {
            return Err(Error::invalid("r_id must be positive"));
        }
        if !(self.spread > 0.0 && self.spread.is_finite()) {
            return Err(Error::invalid("spread must be positive"));
        }
        // r_far scales r_id, so the far displacement must exceed the class radius.
        if !(self.r_far > 1.0 && self.r_far.is_finite()) {
            return Err(Error::invalid("r_far must exceed 1 so far-OOD lies beyond r_id"));
        }
        Ok(())
    }

    /// Class mean `k`: class 2i sits at +r_id on axis i, class 2i+1 at -r_id.
    pub fn class_mean(&self, k: usize) -> Vec<f64> {
        let mut m = vec![0.0; self.dim];
        let sign = if k.is_multiple_of(2) { 1.0 } else { -1.0 };
        m[k / 2] = sign * self.r_id;
        m
    }

    pub fn class_means(&self) -> Vec<Vec<f64>> {
        (0..self.num_classes).map(|k| self.class_mean(k)).collect()
    }

    /// Cyclically adjacent class pairs whose means are not antipodal. Falls
    /// back to every adjacent pair when all of them are antipodal (K = 2).
    pub fn near_pairs(&self) -> Vec<(usize, usize)> {
        let k = self.num_classes;
        if k < 2 {
            return Vec::new();
        }
        let all: Vec<(usize, usize)> = if k == 2 {
            vec![(0, 1)]
        } else {
            (0..k).map(|a| (a, (a + 1) % k)).collect()
        };
        let kept: Vec<_> = all.iter().copied().filter(|&(a, b)| a / 2 != b / 2).collect();
        if kept.is_empty() {
            all
        } else {
            kept
        }
    }
}

#[derive(Debug, Clone)]
pub struct BenchmarkSuite {
    pub id_train: LabeledSet,
    pub id_test: LabeledSet,
    pub near_ood: LabeledSet,
    pub far_ood: LabeledSet,
    pub spec: BenchmarkSpec,
}

fn gaussian_row(rng: &mut StreamRng, center: &[f64], std: f64, out: &mut Vec<f64>) {
    for &c in center {
        let z: f64 = rng.sample(StandardNormal);
        out.push(c + std * z);
    }
}

fn class_blocks(spec: &BenchmarkSpec, per_class: usize, purpose: &str) -> LabeledSet {
    let mut set = LabeledSet::empty(spec.dim, spec.num_classes);
    let mut row = Vec::with_capacity(spec.dim);
    for k in 0..spec.num_classes {
        let mut rng = seed::stream(spec.seed, purpose, k as u64);
        let mean = spec.class_mean(k);
        for _ in 0..per_class {
            row.clear();
            gaussian_row(&mut rng, &mean, spec.spread, &mut row);
            set.push(&row, k);
        }
    }
    set
}

pub fn make_benchmark(spec: &BenchmarkSpec) -> Result<BenchmarkSuite> {
    spec.validate()?;
    let d = spec.dim;
    let id_train = class_blocks(spec, spec.n_train_per_class, "bench.id_train");
    let id_test = class_blocks(spec, spec.n_test_per_class, "bench.id_test");

    let means = spec.class_means();
    let centers: Vec<Vec<f64>> = spec
        .near_pairs()
        .into_iter()
        .map(|(a, b)| means[a].iter().zip(&means[b]).map(|(x, y)| 0.5 * (x + y)).collect())
        .collect();
    let mut rng = seed::stream(spec.seed, "bench.near", 0);
    let mut near = Vec::with_capacity(spec.n_near * d);
    for i in 0..spec.n_near {
        gaussian_row(&mut rng, &centers[i % centers.len()], spec.spread, &mut near);
    }

    let reach = spec.r_far * spec.r_id;
    let mut rng = seed::stream(spec.seed, "bench.far", 0);
    let mut far = Vec::with_capacity(spec.n_far * d);
    let n_box = spec.n_far / 2;
    for _ in 0..n_box {
        for _ in 0..d {
            far.push(rng.random_range(-reach..=reach));
        }
    }
    let mut far_center = vec![0.0; d];
    far_center[d - 1] = reach;
    for _ in n_box..spec.n_far {
        gaussian_row(&mut rng, &far_center, spec.spread, &mut far);
    }

    Ok(BenchmarkSuite {
        id_train,
        id_test,
        near_ood: LabeledSet::unlabeled(near, d)?,
        far_ood: LabeledSet::unlabeled(far, d)?,
        spec: spec.clone(),
    })
}

/// Auxiliary outliers for outlier-exposure training: uniform draws from the
/// far-OOD box, on a stream disjoint from every evaluation split.
pub fn make_outlier_exposure_set(spec: &BenchmarkSpec, n: usize) -> Result<LabeledSet> {
    spec.validate()?;
    let reach = spec.r_far * spec.r_id;
    let mut rng = seed::stream(spec.seed, "bench.oe_aux", 0);
    let features: Vec<f64> = (0..n * spec.dim).map(|_| rng.random_range(-reach..=reach)).collect();
    LabeledSet::unlabeled(features, spec.dim)
}

/// Stratified split; the first part takes round(fraction * n_k) of each class.
pub fn split(set: &LabeledSet, fraction: f64, seed: u64) -> Result<(LabeledSet, LabeledSet)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::invalid(format!("split fraction {fraction} outside (0, 1)")));
    }
    if set.len() < 2 {
        return Err(Error::invalid("split needs at least two samples"));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); set.num_classes()];
    for (i, &y) in set.labels().iter().enumerate() {
        by_class[y].push(i);
    }
    let mut first = Vec::new();
    let mut second = Vec::new();
    for (k, mut idx) in by_class.into_iter().enumerate() {
        let take = (fraction * idx.len() as f64).round() as usize;
        let mut rng = seed::stream(seed, "split", k as u64);
        idx.shuffle(&mut rng);
        first.extend_from_slice(&idx[..take]);
        second.extend_from_slice(&idx[take..]);
    }
    first.sort_unstable();
    second.sort_unstable();
    Ok((set.select(&first), set.select(&second)))
}

pub fn to_csv_string(set: &LabeledSet) -> String {
    let mut out = String::new();
    for j in 0..set.dim() {
        let _ = write!(out, "f{j},");
    }
    out.push_str("label\n");
    for (row, y) in set.rows().zip(set.labels()) {
        for v in row {
            let _ = write!(out, "{v},");
        }
        let _ = writeln!(out, "{y}");
    }
    out
}

pub fn save_csv(set: &LabeledSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, to_csv_string(set)).map_err(|e| Error::io(path, e))
}

/// Parse CSV text. With `num_classes` given, labels are range-checked against
/// it; otherwise the class count is one past the largest label.
pub fn parse_csv(text: &str, origin: &Path, num_classes: Option<usize>) -> Result<LabeledSet> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::parse(origin, 1, "missing header"))?;
    let cols: Vec<&str> = header.split(',').collect();
    let dim = cols.len().saturating_sub(1);
    let well_formed = dim >= 1
        && cols.last() == Some(&"label")
        && cols[..dim].iter().enumerate().all(|(j, c)| *c == format!("f{j}"));
    if !well_formed {
        return Err(Error::parse(origin, 1, format!("malformed header `{header}`; expected f0,...,f<d-1>,label")));
    }
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for (i, line) in lines.enumerate() {
        let lineno = i + 2;
        if line.is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != dim + 1 {
            return Err(Error::parse(origin, lineno, format!("expected {} cells, found {}", dim + 1, cells.len())));
        }
        for cell in &cells[..dim] {
            let v: f64 = cell
                .trim()
                .parse()
                .map_err(|_| Error::parse(origin, lineno, format!("non-numeric cell `{cell}`")))?;
            if !v.is_finite() {
                return Err(Error::parse(origin, lineno, format!("non-finite value `{cell}`")));
            }
            features.push(v);
        }
        let raw = cells[dim].trim();
        let y: usize = raw
            .parse()
            .map_err(|_| Error::parse(origin, lineno, format!("label `{raw}` is not a non-negative integer")))?;
        if let Some(k) = num_classes {
            if y >= k {
                return Err(Error::parse(origin, lineno, format!("label {y} outside [0, {k})")));
            }
        }
        labels.push(y);
    }
    let k = num_classes.unwrap_or_else(|| labels.iter().max().map_or(1, |m| m + 1));
    LabeledSet::new(features, labels, dim, k).map_err(|e| Error::parse(origin, 0, e.to_string()))
}

pub fn load_csv(path: impl AsRef<Path>, num_classes: Option<usize>) -> Result<LabeledSet> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_csv(&text, path, num_classes)
}
