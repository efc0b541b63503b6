use mvpad_core::bsif::enumerate_views;
use mvpad_core::fusion::majority_vote;
use mvpad_core::metrics::evaluate;
use mvpad_core::selection::svm::{fit_svm, solve_dual, SolverConfig};
use mvpad_core::selection::{predict_meta, train_meta_svm, Kernel, MetaConfig};
use mvpad_core::{rng, EnsembleMatrix, Label};
use rand::Rng;

fn toy(seed: u64, n: usize, d: usize, overlap: f64) -> (Vec<f64>, Vec<Label>) {
    let mut r = rng::seeded(seed);
    let mut x = Vec::with_capacity(n * d);
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let l = if i % 2 == 0 { Label::BonaFide } else { Label::Attack };
        let centre = if l == Label::BonaFide { 1.0 } else { -1.0 };
        for _ in 0..d {
            x.push(centre + overlap * (r.random::<f64>() * 2.0 - 1.0));
        }
        y.push(l);
    }
    (x, y)
}

fn standardize(x: &[f64], d: usize) -> Vec<f64> {
    let n = (x.len() / d) as f64;
    let mut out = x.to_vec();
    for j in 0..d {
        let mean = x.iter().skip(j).step_by(d).sum::<f64>() / n;
        let var = x.iter().skip(j).step_by(d).map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let sd = if var.sqrt() > 1e-12 { var.sqrt() } else { 1.0 };
        for v in out.iter_mut().skip(j).step_by(d) {
            *v = (*v - mean) / sd;
        }
    }
    out
}

fn rbf(a: &[f64], b: &[f64], gamma: f64) -> f64 {
    (-gamma * a.iter().zip(b).map(|(p, q)| (p - q).powi(2)).sum::<f64>()).exp()
}

/// Euclidean projection onto {0 <= a <= c, y'a = 0}: a = clip(z - t y),
/// with t found by bisection on the monotone constraint residual.
fn project(z: &[f64], y: &[f64], c: f64) -> Vec<f64> {
    let at = |t: f64| -> Vec<f64> { z.iter().zip(y).map(|(zi, yi)| (zi - t * yi).clamp(0.0, c)).collect() };
    let resid = |t: f64| -> f64 { at(t).iter().zip(y).map(|(a, yi)| a * yi).sum() };
    let (mut lo, mut hi) = (-1e6, 1e6);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if resid(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    at(0.5 * (lo + hi))
}

/// Dense dual QP by projected gradient; returns (alpha, bias).
fn reference_qp(k: &[f64], y: &[f64], c: f64) -> (Vec<f64>, f64) {
    let n = y.len();
    let q = |i: usize, j: usize| y[i] * y[j] * k[i * n + j];
    // step below 1/L with L bounded by the largest row sum
    let lip = (0..n).map(|i| (0..n).map(|j| q(i, j).abs()).sum::<f64>()).fold(0.0, f64::max);
    let step = 1.0 / lip;
    let mut a = vec![0.0; n];
    for _ in 0..200_000 {
        let grad: Vec<f64> = (0..n).map(|i| (0..n).map(|j| q(i, j) * a[j]).sum::<f64>() - 1.0).collect();
        let z: Vec<f64> = a.iter().zip(&grad).map(|(ai, g)| ai - step * g).collect();
        let next = project(&z, y, c);
        let moved = next.iter().zip(&a).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
        a = next;
        if moved < 1e-13 {
            break;
        }
    }
    // bias from margin support vectors
    let f = |i: usize| (0..n).map(|j| a[j] * y[j] * k[j * n + i]).sum::<f64>();
    let free: Vec<usize> = (0..n).filter(|&i| a[i] > 1e-6 * c && a[i] < c * (1.0 - 1e-6)).collect();
    let b = if free.is_empty() {
        0.0
    } else {
        free.iter().map(|&i| y[i] - f(i)).sum::<f64>() / free.len() as f64
    };
    (a, b)
}

#[test]
fn decision_values_match_reference_qp() {
    for seed in 0..5u64 {
        let (x, labels) = toy(seed, 20, 2, 1.6);
        let (gamma, c) = (0.5, 1.0);
        let model = fit_svm(&x, 2, &labels, Kernel::Rbf { gamma }, c, &SolverConfig::default()).unwrap();

        let z = standardize(&x, 2);
        let y: Vec<f64> = labels.iter().map(|&l| if l == Label::BonaFide { 1.0 } else { -1.0 }).collect();
        let k: Vec<f64> = (0..20).flat_map(|i| (0..20).map(move |j| (i, j))).map(|(i, j)| rbf(&z[2 * i..2 * i + 2], &z[2 * j..2 * j + 2], gamma)).collect();
        let (alpha, b) = reference_qp(&k, &y, c);
        let eq: f64 = alpha.iter().zip(&y).map(|(a, yi)| a * yi).sum();
        assert!(eq.abs() < 1e-9);

        let mut r = rng::seeded(seed + 50);
        let probes: Vec<Vec<f64>> = (0..20)
            .map(|i| x[2 * i..2 * i + 2].to_vec())
            .chain((0..10).map(|_| vec![r.random_range(-2.5..2.5), r.random_range(-2.5..2.5)]))
            .collect();
        for p in &probes {
            let zp = standardize_with(&x, 2, p);
            let want: f64 = (0..20).map(|j| alpha[j] * y[j] * rbf(&z[2 * j..2 * j + 2], &zp, gamma)).sum::<f64>() + b;
            let got = model.decision_value(p);
            assert!((got - want).abs() < 1e-3, "seed {seed}: {got} vs {want}");
        }
    }
}

/// Standardize one probe with the statistics of `x`.
fn standardize_with(x: &[f64], d: usize, p: &[f64]) -> Vec<f64> {
    let n = (x.len() / d) as f64;
    (0..d)
        .map(|j| {
            let mean = x.iter().skip(j).step_by(d).sum::<f64>() / n;
            let sd = (x.iter().skip(j).step_by(d).map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
            (p[j] - mean) / if sd > 1e-12 { sd } else { 1.0 }
        })
        .collect()
}

#[test]
fn duals_are_feasible() {
    for seed in 0..10u64 {
        let (x, labels) = toy(seed, 30, 3, 2.0);
        let y: Vec<f64> = labels.iter().map(|&l| if l == Label::BonaFide { 1.0 } else { -1.0 }).collect();
        for &c in &[0.1, 1.0, 10.0] {
            let k = Kernel::Rbf { gamma: 0.3 }.gram(&standardize(&x, 3), 3);
            let sol = solve_dual(&k, &y, c, &SolverConfig::default()).unwrap();
            assert!(sol.alpha.iter().all(|&a| (0.0..=c).contains(&a)));
            let eq: f64 = sol.alpha.iter().zip(&y).map(|(a, yi)| a * yi).sum();
            assert!(eq.abs() < 1e-6, "{eq}");
            let m = fit_svm(&x, 3, &labels, Kernel::Rbf { gamma: 0.3 }, c, &SolverConfig::default()).unwrap();
            assert!(m.alpha.iter().all(|&a| a > 0.0 && a <= c));
        }
    }
}

#[test]
fn small_gamma_behaves_like_linear_kernel() {
    let gamma = 1e-6;
    let c_lin = 1.0;
    for seed in 0..3u64 {
        let (x, labels) = toy(seed, 40, 2, 1.8);
        let lin = fit_svm(&x, 2, &labels, Kernel::Linear, c_lin, &SolverConfig::default()).unwrap();
        // exp(-g|a-b|^2) = 1 - g|a|^2 - g|b|^2 + 2g a.b + O(g^2); the first
        // three terms cancel under y'a = 0, leaving 2g times the linear
        // kernel, so the matching penalty is c_lin / (2g).
        let rbf = fit_svm(&x, 2, &labels, Kernel::Rbf { gamma }, c_lin / (2.0 * gamma), &SolverConfig::default()).unwrap();
        let mut r = rng::seeded(seed);
        for _ in 0..200 {
            let p = [r.random_range(-3.0..3.0), r.random_range(-3.0..3.0)];
            let (a, b) = (lin.decision_value(&p), rbf.decision_value(&p));
            if a.abs() > 1e-3 {
                assert_eq!(lin.decide(&p), rbf.decide(&p), "{p:?}: {a} vs {b}");
            }
        }
    }
}

#[test]
fn kernel_matrix_is_psd() {
    let mut r = rng::seeded(2);
    for _ in 0..10 {
        let x: Vec<f64> = (0..30 * 4).map(|_| r.random_range(-3.0..3.0)).collect();
        let k = Kernel::Rbf { gamma: r.random_range(0.01..10.0) }.gram(&x, 4);
        for i in 0..30 {
            for j in 0..30 {
                assert_eq!(k[i * 30 + j], k[j * 30 + i]);
            }
        }
        let eig = nalgebra::SymmetricEigen::new(nalgebra::DMatrix::from_row_slice(30, 30, &k));
        assert!(eig.eigenvalues.min() >= -1e-8);
    }
}

fn ensemble(x: Vec<f64>, labels: Vec<Label>, d: usize) -> EnsembleMatrix {
    let n = labels.len();
    let views = enumerate_views().into_iter().take(d).collect();
    EnsembleMatrix::new((0..n).map(|i| format!("s{i}")).collect(), views, x, Some(labels)).unwrap()
}

#[test]
fn separable_scores_fit_without_error_and_beat_majority() {
    // Three views: two vote wrong half of the time but the third view's
    // score cleanly separates, so a majority vote errs where the SVM does not.
    let mut r = rng::seeded(11);
    let (mut x, mut labels) = (Vec::new(), Vec::new());
    for i in 0..60 {
        let live = i % 2 == 0;
        labels.push(if live { Label::BonaFide } else { Label::Attack });
        x.push(if live { r.random_range(0.6..0.95) } else { r.random_range(0.05..0.4) });
        x.push(r.random_range(0.0..1.0));
        x.push(r.random_range(0.0..1.0));
    }
    let m = ensemble(x, labels.clone(), 3);
    let fit = train_meta_svm(&m, &MetaConfig::default()).unwrap();
    let out = predict_meta(&fit.model, &m).unwrap();
    let meta = evaluate(&out.decisions, &labels, "train").unwrap().hter.unwrap();
    let mv = evaluate(&majority_vote(&m).decisions, &labels, "train").unwrap().hter.unwrap();
    assert_eq!(meta, 0.0);
    assert!(meta <= mv);
    assert!(out.margins.iter().all(|v| v.is_finite()));
}

#[test]
fn training_point_far_from_others_keeps_its_label() {
    let (mut x, mut labels) = toy(4, 20, 2, 0.5);
    x.extend([3.0, 3.0]);
    labels.push(Label::BonaFide);
    let m = fit_svm(&x, 2, &labels, Kernel::Rbf { gamma: 1.0 }, 100.0, &SolverConfig::default()).unwrap();
    assert!(m.decision_value(&[3.0, 3.0]) > 0.5);
}
