//! Class-conditional Gaussian density model: fitting, sampling, pseudo-labels,
//! fidelity degradation and the Fréchet distance used as a quality proxy.

use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::datasets::LabeledSet;
use crate::error::{ensure_dim, Error, Result};
use crate::nnet::{argmax, parse_row, push_row, MlpClassifier};
use crate::seed;

/// Mean and covariance of one multivariate Gaussian.
#[derive(Debug, Clone, PartialEq)]
pub struct Gaussian {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl Gaussian {
    /// Maximum-likelihood fit (divides by n) plus `ridge * I`.
    pub fn fit<'a>(rows: impl IntoIterator<Item = &'a [f64]>, dim: usize, ridge: f64) -> Result<Gaussian> {
        let rows: Vec<&[f64]> = rows.into_iter().collect();
        if rows.is_empty() {
            return Err(Error::fit("gaussian", "no samples"));
        }
        let n = rows.len() as f64;
        let mut mean = DVector::zeros(dim);
        for r in &rows {
            ensure_dim(dim, r.len())?;
            for (m, v) in mean.iter_mut().zip(r.iter()) {
                *m += v;
            }
        }
        mean /= n;
        let mut cov = DMatrix::zeros(dim, dim);
        let mut centered = vec![0.0; dim];
        for r in &rows {
            for (c, (v, m)) in centered.iter_mut().zip(r.iter().zip(mean.iter())) {
                *c = v - m;
            }
            for i in 0..dim {
                for j in i..dim {
                    cov[(i, j)] += centered[i] * centered[j];
                }
            }
        }
        for i in 0..dim {
            for j in i..dim {
                let v = cov[(i, j)] / n;
                cov[(i, j)] = v;
                cov[(j, i)] = v;
            }
            cov[(i, i)] += ridge;
        }
        Ok(Gaussian { mean, cov })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Mean per-coordinate variance of a sample set.
pub fn mean_feature_variance(set: &LabeledSet) -> f64 {
    if set.len() < 2 {
        return 0.0;
    }
    let g = Gaussian::fit(set.rows(), set.dim(), 0.0).expect("nonempty");
    g.cov.trace() / set.dim() as f64
}

/// 1e-6 times the mean feature variance, floored so constant data still gets a positive ridge.
pub fn default_ridge(set: &LabeledSet) -> f64 {
    (1e-6 * mean_feature_variance(set)).max(1e-12)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassGaussianModel {
    /// One component per class when conditional, a single pooled one otherwise.
    pub components: Vec<Gaussian>,
    pub num_classes: usize,
    pub ridge: f64,
    pub conditional: bool,
}

impl ClassGaussianModel {
    pub fn dim(&self) -> usize {
        self.components[0].dim()
    }

    pub fn hash(&self) -> u64 {
        seed::content_hash(&to_model_string(self))
    }
}

pub fn fit_class_gaussians(train: &LabeledSet, ridge: f64, conditional: bool) -> Result<ClassGaussianModel> {
    if !(ridge > 0.0 && ridge.is_finite()) {
        return Err(Error::invalid(format!("ridge {ridge} must be positive")));
    }
    let d = train.dim();
    let components = if conditional {
        let mut by_class: Vec<Vec<&[f64]>> = vec![Vec::new(); train.num_classes()];
        for (row, &y) in train.rows().zip(train.labels()) {
            by_class[y].push(row);
        }
        by_class
            .into_iter()
            .enumerate()
            .map(|(k, rows)| {
                if rows.len() < 2 {
                    return Err(Error::fit(format!("class {k}"), format!("{} sample(s); need at least 2", rows.len())));
                }
                Gaussian::fit(rows, d, ridge)
            })
            .collect::<Result<Vec<_>>>()?
    } else {
        if train.len() < 2 {
            return Err(Error::fit("pooled model", "need at least 2 samples"));
        }
        vec![Gaussian::fit(train.rows(), d, ridge)?]
    };
    Ok(ClassGaussianModel { components, num_classes: train.num_classes(), ridge, conditional })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Provenance {
    pub model_hash: u64,
    pub seed: u64,
    pub quality: f64,
    pub pseudo_labeled: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticPool {
    pub samples: LabeledSet,
    pub provenance: Provenance,
}

impl SyntheticPool {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// The first `n_per_class` samples of each class, preserving order.
    pub fn take_per_class(&self, n_per_class: usize) -> SyntheticPool {
        let mut seen = vec![0usize; self.samples.num_classes()];
        let keep: Vec<usize> = self
            .samples
            .labels()
            .iter()
            .enumerate()
            .filter(|(_, &y)| {
                seen[y] += 1;
                seen[y] <= n_per_class
            })
            .map(|(i, _)| i)
            .collect();
        SyntheticPool { samples: self.samples.select(&keep), provenance: self.provenance.clone() }
    }
}

fn cholesky_factor(cov: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    cov.clone()
        .cholesky()
        .map(|c| c.l())
        .ok_or_else(|| Error::invalid("covariance is not positive definite"))
}

/// Draw `n_per_class` samples per class (or `n_per_class * K` from a pooled
/// model, labelled 0 until pseudo-labelled) as mean + L z.
pub fn sample(model: &ClassGaussianModel, n_per_class: usize, seed: u64) -> Result<SyntheticPool> {
    let d = model.dim();
    let mut out = LabeledSet::empty(d, model.num_classes);
    let draws = if model.conditional { n_per_class } else { n_per_class * model.num_classes };
    let mut row = vec![0.0; d];
    let mut z = DVector::zeros(d);
    for (k, comp) in model.components.iter().enumerate() {
        let l = cholesky_factor(&comp.cov)?;
        let mut rng = seed::stream(seed, "gen.sample", k as u64);
        for _ in 0..draws {
            for v in z.iter_mut() {
                *v = rng.sample(StandardNormal);
            }
            let x = &comp.mean + &l * &z;
            row.copy_from_slice(x.as_slice());
            out.push(&row, k);
        }
    }
    Ok(SyntheticPool {
        samples: out,
        provenance: Provenance { model_hash: model.hash(), seed, quality: 1.0, pseudo_labeled: false },
    })
}

/// Replace every label by the classifier's argmax (ties to the lowest index).
pub fn pseudo_label(pool: &SyntheticPool, classifier: &MlpClassifier) -> Result<SyntheticPool> {
    ensure_dim(classifier.input_dim(), pool.samples.dim())?;
    let labels = pool
        .samples
        .rows()
        .map(|x| classifier.logits(x).map(|l| argmax(&l)))
        .collect::<Result<Vec<_>>>()?;
    let samples = pool.samples.clone().with_labels(labels, classifier.num_classes())?;
    let mut provenance = pool.provenance.clone();
    provenance.pseudo_labeled = true;
    Ok(SyntheticPool { samples, provenance })
}

/// Lower the fidelity of a model. Each mean moves by (1 - q) * shift_radius
/// along a per-class random unit direction, and each covariance is blended
/// towards the isotropic matrix of equal trace. q = 1 returns the model as is.
pub fn degrade(model: &ClassGaussianModel, quality: f64, shift_radius: f64, jitter_seed: u64) -> Result<ClassGaussianModel> {
    if !(quality > 0.0 && quality <= 1.0) {
        return Err(Error::invalid(format!("quality {quality} outside (0, 1]")));
    }
    if quality == 1.0 {
        return Ok(model.clone());
    }
    let d = model.dim();
    let components = model
        .components
        .iter()
        .enumerate()
        .map(|(k, comp)| {
            let mut rng = seed::stream(jitter_seed, "gen.jitter", k as u64);
            let mut u = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
            let norm = u.norm();
            if norm > 0.0 {
                u /= norm;
            }
            let mean = &comp.mean + u * ((1.0 - quality) * shift_radius);
            let iso = comp.cov.trace() / d as f64;
            let mut cov = &comp.cov * quality;
            for i in 0..d {
                cov[(i, i)] += (1.0 - quality) * iso;
            }
            Gaussian { mean, cov }
        })
        .collect();
    Ok(ClassGaussianModel { components, ..model.clone() })
}

fn check_covariance(cov: &DMatrix<f64>) -> Result<()> {
    if !cov.is_square() {
        return Err(Error::invalid("covariance must be square"));
    }
    let scale = cov.amax().max(1e-300);
    for i in 0..cov.nrows() {
        for j in 0..i {
            if (cov[(i, j)] - cov[(j, i)]).abs() > 1e-9 * scale {
                return Err(Error::invalid("covariance is not symmetric"));
            }
        }
    }
    let eig = SymmetricEigen::new(cov.clone());
    if eig.eigenvalues.min() < -1e-9 * scale {
        return Err(Error::invalid("covariance is indefinite"));
    }
    Ok(())
}

/// Principal square root of a symmetric PSD matrix, negative eigenvalues clamped to 0.
pub fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// Squared 2-Wasserstein distance between two Gaussians:
/// |m1 - m2|^2 + tr(S1 + S2 - 2 (S1^1/2 S2 S1^1/2)^1/2).
pub fn frechet_distance(a: &Gaussian, b: &Gaussian) -> Result<f64> {
    ensure_dim(a.dim(), b.dim())?;
    ensure_dim(a.dim(), a.cov.nrows())?;
    ensure_dim(b.dim(), b.cov.nrows())?;
    check_covariance(&a.cov)?;
    check_covariance(&b.cov)?;
    let diff = &a.mean - &b.mean;
    let root_a = sym_sqrt(&a.cov);
    let cross = sym_sqrt(&(&root_a * &b.cov * &root_a));
    let value = diff.norm_squared() + a.cov.trace() + b.cov.trace() - 2.0 * cross.trace();
    Ok(value.max(0.0))
}

/// Fréchet distance between pooled Gaussian fits of a synthetic pool and a
/// real set, both regularised with the real set's default ridge.
pub fn pool_frechet(pool: &SyntheticPool, real: &LabeledSet) -> Result<f64> {
    set_frechet(&pool.samples, real)
}

pub fn set_frechet(a: &LabeledSet, real: &LabeledSet) -> Result<f64> {
    ensure_dim(real.dim(), a.dim())?;
    if a.len() < 2 || real.len() < 2 {
        return Err(Error::invalid("Fréchet distance needs at least 2 samples per set"));
    }
    let ridge = default_ridge(real);
    let ga = Gaussian::fit(a.rows(), a.dim(), ridge)?;
    let gr = Gaussian::fit(real.rows(), real.dim(), ridge)?;
    frechet_distance(&ga, &gr)
}

pub fn to_model_string(model: &ClassGaussianModel) -> String {
    let mut out = format!(
        "classgauss v1 {} {} ridge={} conditional={} classes={}\n",
        model.components.len(),
        model.dim(),
        model.ridge,
        model.conditional,
        model.num_classes
    );
    for comp in &model.components {
        push_row(&mut out, comp.mean.as_slice());
        for i in 0..comp.dim() {
            let row: Vec<f64> = comp.cov.row(i).iter().copied().collect();
            push_row(&mut out, &row);
        }
    }
    out
}

pub fn parse_model(text: &str, origin: &Path) -> Result<ClassGaussianModel> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| Error::parse(origin, 1, "empty model file"))?;
    let toks: Vec<&str> = header.split_whitespace().collect();
    if toks.len() < 4 || toks[0] != "classgauss" || toks[1] != "v1" {
        return Err(Error::parse(origin, 1, "expected `classgauss v1 K d` header"));
    }
    let bad = |what: &str| Error::parse(origin, 1, format!("bad {what} in header"));
    let k: usize = toks[2].parse().map_err(|_| bad("component count"))?;
    let d: usize = toks[3].parse().map_err(|_| bad("dimension"))?;
    if k == 0 || d == 0 {
        return Err(bad("size"));
    }
    let (mut ridge, mut conditional, mut classes) = (0.0, true, k);
    for tok in &toks[4..] {
        match tok.split_once('=') {
            Some(("ridge", v)) => ridge = v.parse().map_err(|_| bad("ridge"))?,
            Some(("conditional", v)) => conditional = v.parse().map_err(|_| bad("conditional flag"))?,
            Some(("classes", v)) => classes = v.parse().map_err(|_| bad("class count"))?,
            _ => return Err(bad(&format!("token `{tok}`"))),
        }
    }
    let mut components = Vec::with_capacity(k);
    for _ in 0..k {
        let mean = DVector::from_vec(parse_row(lines.next(), d, origin)?);
        let mut cov = DMatrix::zeros(d, d);
        for i in 0..d {
            let row = parse_row(lines.next(), d, origin)?;
            for (j, v) in row.into_iter().enumerate() {
                cov[(i, j)] = v;
            }
        }
        components.push(Gaussian { mean, cov });
    }
    Ok(ClassGaussianModel { components, num_classes: classes, ridge, conditional })
}

pub fn save_model(model: &ClassGaussianModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, to_model_string(model)).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<ClassGaussianModel> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_model(&text, path)
}
