//! Oracles shared by the integration and acceptance tests. They use only
//! the public API plus brute-force numerics.

#![allow(dead_code)]

use deepcascade::distill::{self, loss, loss_gradient_wrt_gram, training_scores, DistillConfig};
use deepcascade::kernel_net::{Architecture, KernelNetwork};
use deepcascade::matrix::SquareMatrix;
use deepcascade::svm::{self, dual_objective, SolverParams, SvmProblem};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Random RBF Gram matrix over points in the unit square, with both labels present.
pub fn gaussian_problem(n: usize, seed: u64) -> (SquareMatrix, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pts: Vec<(f64, f64)> = (0..n).map(|_| (rng.gen::<f64>(), rng.gen::<f64>())).collect();
    let mut y: Vec<f64> = (0..n).map(|_| if rng.gen::<bool>() { 1.0 } else { -1.0 }).collect();
    y[0] = 1.0;
    y[n - 1] = -1.0;
    let width = rng.gen_range(0.05..1.0);
    let gram = SquareMatrix::from_fn(n, |i, j| {
        let d = (pts[i].0 - pts[j].0).powi(2) + (pts[i].1 - pts[j].1).powi(2);
        (-d / width).exp()
    });
    (gram, y)
}

/// Euclidean projection onto `{0 <= a <= c, y.a = 0}` by bisection on the multiplier.
fn project(v: &[f64], y: &[f64], c: f64) -> Vec<f64> {
    let at = |mu: f64| -> Vec<f64> { v.iter().zip(y).map(|(vi, yi)| (vi - mu * yi).clamp(0.0, c)).collect() };
    let residual = |mu: f64| -> f64 { at(mu).iter().zip(y).map(|(a, yi)| a * yi).sum() };
    let (mut lo, mut hi) = (-1e6, 1e6);
    for _ in 0..300 {
        let mid = 0.5 * (lo + hi);
        // residual is non-increasing in mu
        if residual(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    at(0.5 * (lo + hi))
}

/// Maximum of the SVM dual by projected gradient ascent with a 1/L step.
pub fn projected_gradient_dual(gram: &SquareMatrix, y: &[f64], c: f64) -> f64 {
    let n = y.len();
    let q: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| y[i] * y[j] * gram.get(i, j)).collect()).collect();
    let lip = q.iter().flatten().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
    let mut a = vec![0.0; n];
    for _ in 0..500_000 {
        let v: Vec<f64> = (0..n)
            .map(|i| a[i] + (1.0 - (0..n).map(|j| q[i][j] * a[j]).sum::<f64>()) / lip)
            .collect();
        let next = project(&v, y, c);
        let moved = next.iter().zip(&a).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
        a = next;
        if moved < 1e-14 {
            break;
        }
    }
    dual_objective(&a, y, gram)
}

/// Random network with mixed-sign weights so ReLUs are in both regimes.
pub fn random_network(arch: &Architecture, rng: &mut ChaCha8Rng) -> KernelNetwork {
    let sizes = arch.layer_sizes();
    let weights = sizes
        .windows(2)
        .map(|w| (0..w[0] * w[1]).map(|_| rng.gen_range(-0.5..1.0)).collect())
        .collect();
    KernelNetwork::from_weights(arch.clone(), weights).unwrap()
}

/// Worst relative error of `backward` against central differences over all weights.
pub fn backward_fd_error(arch: &Architecture, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let net = random_network(arch, &mut rng);
    let base: Vec<f64> = (0..arch.input_size()).map(|_| rng.gen_range(0.05..1.0)).collect();
    let trace = net.forward(&base).unwrap();
    let upstream = rng.gen_range(0.5..2.0);
    let grads = net.backward(&trace, upstream).unwrap();
    let h = 1e-6;
    let mut worst = 0.0f64;
    for l in 0..net.weights().len() {
        for k in 0..net.weights()[l].len() {
            let eval = |delta: f64| {
                let mut w = net.weights().clone();
                w[l][k] += delta;
                let n = KernelNetwork::from_weights(arch.clone(), w).unwrap();
                upstream * n.forward(&base).unwrap().output
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let an = grads[l][k];
            let scale = fd.abs().max(an.abs());
            if scale < 1e-8 {
                continue;
            }
            worst = worst.max((fd - an).abs() / scale);
        }
    }
    worst
}

/// Worst relative error of the Gram gradient against central differences,
/// perturbing `K_ij` and `K_ji` together with the SVM held fixed.
pub fn gram_gradient_fd_error(n: usize, seed: u64) -> f64 {
    let (gram, y) = gaussian_problem(n, seed);
    let model = svm::solve_dual(&SvmProblem { gram: &gram, labels: &y, c: 1.0 }, &SolverParams::default()).unwrap();
    let gamma = 1.0 + (seed % 4) as f64;
    let cfg = DistillConfig { gamma, ..DistillConfig::default() }.with_betas(distill::betas_for_f(&y).unwrap());
    let g = training_scores(&gram, &model);
    let an = loss_gradient_wrt_gram(&g, &y, &model, &cfg).unwrap();
    let h = 1e-6;
    let mut worst = 0.0f64;
    for i in 0..n {
        for j in i..n {
            let at = |delta: f64| {
                let mut m = gram.clone();
                m.set(i, j, gram.get(i, j) + delta);
                if i != j {
                    m.set(j, i, gram.get(j, i) + delta);
                }
                let scores: Vec<f64> = (0..n)
                    .map(|r| model.bias + (0..n).map(|c| model.alphas[c] * y[c] * m.get(r, c)).sum::<f64>())
                    .collect();
                loss(&scores, &y, &cfg)
            };
            let fd = (at(h) - at(-h)) / (2.0 * h);
            let a = an.get(i, j);
            let scale = fd.abs().max(a.abs());
            if scale < 1e-9 {
                continue;
            }
            worst = worst.max((fd - a).abs() / scale);
        }
    }
    worst
}
