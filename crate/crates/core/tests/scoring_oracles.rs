#![allow(clippy::needless_range_loop)]

use rand::Rng;
use rand_distr::StandardNormal;
use siolab_core::harness::{evaluate, Split};
use siolab_core::nnet::{Dense, MlpClassifier};
use siolab_core::scoring::{self, Activations, Decision, DetectorConfig, ScoreMethod, ScorerParams};
use siolab_core::seed::stream;
use siolab_core::trainer::{train, SioConfig};
use siolab_core::{make_benchmark, BenchmarkSpec, BenchmarkSuite};

fn trained(seed: u64) -> (BenchmarkSuite, MlpClassifier) {
    let suite = make_benchmark(&BenchmarkSpec { seed, ..BenchmarkSpec::default() }).unwrap();
    let run = train(&suite.id_train, None, &SioConfig { alpha: 1.0, seed, ..SioConfig::default() }, None).unwrap();
    (suite, run.model)
}

fn affine(layer: &Dense, x: &[f64]) -> Vec<f64> {
    let mut out = Vec::new();
    for o in 0..layer.outputs {
        let mut s = layer.bias[o];
        for i in 0..layer.inputs {
            s += layer.weights[o * layer.inputs + i] * x[i];
        }
        out.push(s);
    }
    out
}

fn penultimate(model: &MlpClassifier, x: &[f64]) -> Vec<f64> {
    let layers = model.layers();
    let mut h = x.to_vec();
    for layer in &layers[..layers.len() - 1] {
        h = affine(layer, &h).into_iter().map(|v| if v > 0.0 { v } else { 0.0 }).collect();
    }
    h
}

fn neg_lse(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::MIN, f64::max);
    -(m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln())
}

#[test]
fn react_pipeline_matches_straight_line_oracle() {
    let (suite, model) = trained(4);
    let params = ScorerParams::default();
    let stats = scoring::fit_stats(&model, &suite.id_train, &[ScoreMethod::React], &params).unwrap();

    let mut all: Vec<f64> = suite.id_train.rows().flat_map(|x| penultimate(&model, x)).collect();
    all.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let pos = 0.9 * (all.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    let c = all[lo] + (all[hi] - all[lo]) * (pos - lo as f64);
    assert!((stats.react_threshold.unwrap() - c).abs() < 1e-12);

    let acts = Activations::compute(&model, &suite.near_ood).unwrap();
    let got = scoring::score_set(&model, &suite.near_ood, &acts, ScoreMethod::React, &stats, &params).unwrap();
    for (x, s) in suite.near_ood.rows().zip(&got.scores) {
        let clipped: Vec<f64> = penultimate(&model, x).into_iter().map(|v| if v > c { c } else { v }).collect();
        let logits = affine(model.last_layer(), &clipped);
        assert!((neg_lse(&logits) - s).abs() < 1e-9);
    }
}

/// Leading eigenvectors by power iteration with deflation.
fn power_basis(cov: &[Vec<f64>], count: usize) -> Vec<Vec<f64>> {
    let d = cov.len();
    let mut m: Vec<Vec<f64>> = cov.to_vec();
    let mut basis = Vec::new();
    for j in 0..count {
        let mut v: Vec<f64> = (0..d).map(|i| 1.0 + (i + j) as f64 * 0.37).collect();
        let mut lambda = 0.0;
        for _ in 0..5000 {
            let w: Vec<f64> = (0..d).map(|r| (0..d).map(|c| m[r][c] * v[c]).sum()).collect();
            let n = w.iter().map(|x| x * x).sum::<f64>().sqrt();
            v = w.iter().map(|x| x / n).collect();
            lambda = n;
        }
        for r in 0..d {
            for c in 0..d {
                m[r][c] -= lambda * v[r] * v[c];
            }
        }
        basis.push(v);
    }
    basis
}

#[test]
fn vim_matches_power_iteration_oracle() {
    let mut rng = stream(21, "test.vim", 0);
    let d = 4;
    let scales = [3.0, 2.0, 1.0, 0.5];
    let feats: Vec<Vec<f64>> = (0..10)
        .map(|_| (0..d).map(|i| scales[i] * rng.sample::<f64, _>(StandardNormal) + 1.0).collect())
        .collect();
    let last = Dense {
        inputs: d,
        outputs: 3,
        weights: (0..3 * d).map(|_| rng.random_range(-1.0..1.0)).collect(),
        bias: vec![0.1, -0.2, 0.3],
    };
    let params = scoring::fit_vim(&feats, &last, 2).unwrap();

    let n = feats.len() as f64;
    let mean: Vec<f64> = (0..d).map(|i| feats.iter().map(|f| f[i]).sum::<f64>() / n).collect();
    let cov: Vec<Vec<f64>> = (0..d)
        .map(|r| (0..d).map(|c| feats.iter().map(|f| (f[r] - mean[r]) * (f[c] - mean[c])).sum::<f64>() / n).collect())
        .collect();
    let basis = power_basis(&cov, 2);
    let residual = |f: &[f64]| {
        let c: Vec<f64> = f.iter().zip(&mean).map(|(a, b)| a - b).collect();
        let total: f64 = c.iter().map(|x| x * x).sum();
        let along: f64 = basis.iter().map(|v| v.iter().zip(&c).map(|(a, b)| a * b).sum::<f64>().powi(2)).sum();
        (total - along).max(0.0).sqrt()
    };
    let max_logit_sum: f64 = feats.iter().map(|f| affine(&last, f).into_iter().fold(f64::MIN, f64::max)).sum();
    let alpha = max_logit_sum / feats.iter().map(|f| residual(f)).sum::<f64>();
    assert!((params.alpha - alpha).abs() < 1e-8 * alpha.abs().max(1.0));
    for f in &feats {
        let logits = affine(&last, f);
        let expected = alpha * residual(f) + neg_lse(&logits);
        let got = scoring::score_vim(f, &logits, &params).unwrap();
        assert!((got - expected).abs() < 1e-8, "{got} vs {expected}");
    }
}

#[test]
fn knn_matches_full_sort() {
    let mut rng = stream(22, "test.knn", 0);
    for normalize in [false, true] {
        let points: Vec<Vec<f64>> = (0..50).map(|_| (0..6).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let index = scoring::fit_knn(&points, 5, normalize).unwrap();
        let unit = |v: &[f64]| -> Vec<f64> {
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if normalize { v.iter().map(|x| x / n).collect() } else { v.to_vec() }
        };
        for _ in 0..20 {
            let q: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
            let qn = unit(&q);
            let mut dists: Vec<f64> = points
                .iter()
                .map(|p| unit(p).iter().zip(&qn).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
                .collect();
            dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let got = scoring::score_knn(&q, &index).unwrap();
            assert!((got - dists[4]).abs() < 1e-12);
        }
    }
}

#[test]
fn quantile_threshold_flags_expected_fraction() {
    let mut rng = stream(23, "test.detect", 0);
    let mut fit: Vec<f64> = (0..10_000).map(|_| rng.sample(StandardNormal)).collect();
    let fresh: Vec<f64> = (0..10_000).map(|_| rng.sample(StandardNormal)).collect();
    for q in [0.5, 0.9, 0.95] {
        let tau = scoring::percentile(&mut fit, 100.0 * q).unwrap();
        let cfg = DetectorConfig { threshold: tau, method: ScoreMethod::Msp };
        let flagged = fresh.iter().filter(|&&s| scoring::detect(s, &cfg) == Decision::Ood).count() as f64 / fresh.len() as f64;
        assert!((flagged - (1.0 - q)).abs() < 0.015, "q {q}: flagged {flagged}");
    }
}

#[test]
fn every_scorer_ranks_far_ood_above_id() {
    let (suite, model) = trained(6);
    let report = evaluate(&model, &suite, &ScoreMethod::ALL, &ScorerParams::default()).unwrap();
    for m in ScoreMethod::ALL {
        let a = report.get(m, Split::Far).unwrap().auroc;
        assert!(a > 0.5, "{m}: far AUROC {a}");
    }
}
