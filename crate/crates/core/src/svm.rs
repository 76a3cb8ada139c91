//! SVM layer trained on a fixed Gram matrix.
//!
//! Solves the C-SVM dual
//!
//! ```text
//! max_a  sum_i a_i - 1/2 sum_ij a_i a_j y_i y_j K_ij
//! s.t.   0 <= a_i <= C,  sum_i a_i y_i = 0
//! ```
//!
//! with sequential minimal optimization. The working pair is the maximal
//! violating `i` and the second-order best `j`; each pair update is exact
//! along the feasible segment, including segments where the kernel network
//! produced non-positive curvature.

use crate::error::{Error, Result};
use crate::matrix::SquareMatrix;

pub const DEFAULT_TOL: f64 = 1e-3;
pub const DEFAULT_C: f64 = 1.0;
pub const DEFAULT_MAX_PASSES: usize = 200;

const SYMMETRY_TOL: f64 = 1e-9;
const TAU: f64 = 1e-12;

/// A dual problem over a borrowed Gram matrix and labels in `{-1, +1}`.
#[derive(Debug, Clone, Copy)]
pub struct SvmProblem<'a> {
    pub gram: &'a SquareMatrix,
    pub labels: &'a [f64],
    pub c: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverParams {
    /// KKT violation tolerance.
    pub tol: f64,
    /// Iteration budget, in units of `l` pair updates.
    pub max_passes: usize,
}

impl Default for SolverParams {
    fn default() -> Self {
        Self {
            tol: DEFAULT_TOL,
            max_passes: DEFAULT_MAX_PASSES,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SvmModel {
    pub alphas: Vec<f64>,
    pub labels: Vec<f64>,
    pub bias: f64,
    pub c: f64,
    /// False if the iteration budget ran out before the KKT tolerance was met.
    pub converged: bool,
    /// Set when only one class was present; the model then predicts a constant.
    pub degenerate: bool,
    pub iterations: usize,
}

pub fn validate_labels(labels: &[f64]) -> Result<()> {
    if let Some(i) = labels.iter().position(|&y| y != 1.0 && y != -1.0) {
        return Err(Error::invalid(format!("label {i} is {}, expected -1 or +1", labels[i])));
    }
    Ok(())
}

/// Dual objective `sum a - 1/2 a^T Q a`.
pub fn dual_objective(alphas: &[f64], labels: &[f64], gram: &SquareMatrix) -> f64 {
    let n = alphas.len();
    let mut quad = 0.0;
    for i in 0..n {
        if alphas[i] == 0.0 {
            continue;
        }
        let row = gram.row(i);
        let mut s = 0.0;
        for j in 0..n {
            s += alphas[j] * labels[j] * row[j];
        }
        quad += alphas[i] * labels[i] * s;
    }
    alphas.iter().sum::<f64>() - 0.5 * quad
}

pub fn solve_dual(problem: &SvmProblem<'_>, params: &SolverParams) -> Result<SvmModel> {
    smo(problem, params, |_, _| {})
}

#[inline]
fn in_up(y: f64, a: f64, c: f64) -> bool {
    (y > 0.0 && a < c) || (y < 0.0 && a > 0.0)
}

#[inline]
fn in_low(y: f64, a: f64, c: f64) -> bool {
    (y > 0.0 && a > 0.0) || (y < 0.0 && a < c)
}

/// SMO core. `on_step(alphas, gain)` is called after every accepted pair update.
pub(crate) fn smo(
    problem: &SvmProblem<'_>,
    params: &SolverParams,
    mut on_step: impl FnMut(&[f64], f64),
) -> Result<SvmModel> {
    let SvmProblem { gram, labels, c } = *problem;
    let n = labels.len();
    if n == 0 {
        return Err(Error::invalid("empty SVM problem"));
    }
    if gram.size() != n {
        return Err(Error::invalid(format!(
            "gram matrix is {0}x{0} but there are {n} labels",
            gram.size()
        )));
    }
    if !(c.is_finite() && c > 0.0) {
        return Err(Error::invalid(format!("C must be positive, got {c}")));
    }
    if !(params.tol > 0.0) || params.max_passes == 0 {
        return Err(Error::invalid("tolerance and max_passes must be positive"));
    }
    validate_labels(labels)?;
    let asym = gram.max_asymmetry();
    if !(asym <= SYMMETRY_TOL) {
        return Err(Error::invalid(format!("gram matrix is not symmetric (max asymmetry {asym:e})")));
    }
    if gram.as_slice().iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("gram matrix has non-finite entries"));
    }

    let has_pos = labels.iter().any(|&y| y > 0.0);
    let has_neg = labels.iter().any(|&y| y < 0.0);
    if !(has_pos && has_neg) {
        return Ok(SvmModel {
            alphas: vec![0.0; n],
            labels: labels.to_vec(),
            bias: labels[0],
            c,
            converged: true,
            degenerate: true,
            iterations: 0,
        });
    }

    let mut alpha = vec![0.0; n];
    // grad[t] = (Q a)_t - 1
    let mut grad = vec![-1.0; n];
    let max_iter = params.max_passes.saturating_mul(n).max(1);
    let mut iterations = 0;
    let mut converged = false;

    while iterations < max_iter {
        let mut gmax = f64::NEG_INFINITY;
        let mut i = usize::MAX;
        for t in 0..n {
            if in_up(labels[t], alpha[t], c) {
                let v = -labels[t] * grad[t];
                if v > gmax {
                    gmax = v;
                    i = t;
                }
            }
        }
        let mut gmin = f64::INFINITY;
        let mut j = usize::MAX;
        let mut best = f64::INFINITY;
        if i != usize::MAX {
            let kii = gram.get(i, i);
            let row_i = gram.row(i);
            for t in 0..n {
                if !in_low(labels[t], alpha[t], c) {
                    continue;
                }
                let v = -labels[t] * grad[t];
                gmin = gmin.min(v);
                let b = gmax - v;
                if b > 0.0 {
                    let mut a = kii + gram.get(t, t) - 2.0 * row_i[t];
                    if a <= 0.0 {
                        a = TAU;
                    }
                    let score = -(b * b) / a;
                    if score < best {
                        best = score;
                        j = t;
                    }
                }
            }
        }
        if i == usize::MAX || j == usize::MAX || gmax - gmin < params.tol {
            converged = true;
            break;
        }
        iterations += 1;

        let (yi, yj) = (labels[i], labels[j]);
        // Move along d with d_i = y_i, d_j = -y_j; sum a y stays fixed.
        let slope = -yi * grad[i] + yj * grad[j];
        let eta = gram.get(i, i) + gram.get(j, j) - 2.0 * gram.get(i, j);
        let hi_i = if yi > 0.0 { c - alpha[i] } else { alpha[i] };
        let hi_j = if yj > 0.0 { alpha[j] } else { c - alpha[j] };
        let lo_i = if yi > 0.0 { -alpha[i] } else { alpha[i] - c };
        let lo_j = if yj > 0.0 { alpha[j] - c } else { -alpha[j] };
        let d_max = hi_i.min(hi_j);
        let d_min = lo_i.max(lo_j);
        let gain = |d: f64| slope * d - 0.5 * eta * d * d;
        let delta = if eta > 0.0 {
            (slope / eta).clamp(d_min, d_max)
        } else if gain(d_max) >= gain(d_min) {
            d_max
        } else {
            d_min
        };
        let step_gain = gain(delta);
        debug_assert!(step_gain >= -1e-12 * (1.0 + slope.abs()), "SMO step decreased the dual: {step_gain}");

        let old_i = alpha[i];
        let old_j = alpha[j];
        let mut new_i = old_i + yi * delta;
        let mut new_j = old_j - yj * delta;
        // Land exactly on the box when the step hit it.
        if delta == d_max {
            if hi_i <= hi_j {
                new_i = if yi > 0.0 { c } else { 0.0 };
            }
            if hi_j <= hi_i {
                new_j = if yj > 0.0 { 0.0 } else { c };
            }
        } else if delta == d_min {
            if lo_i >= lo_j {
                new_i = if yi > 0.0 { 0.0 } else { c };
            }
            if lo_j >= lo_i {
                new_j = if yj > 0.0 { c } else { 0.0 };
            }
        }
        new_i = new_i.clamp(0.0, c);
        new_j = new_j.clamp(0.0, c);
        let di = new_i - old_i;
        let dj = new_j - old_j;
        alpha[i] = new_i;
        alpha[j] = new_j;

        let row_i = gram.row(i);
        let row_j = gram.row(j);
        for t in 0..n {
            grad[t] += labels[t] * (yi * row_i[t] * di + yj * row_j[t] * dj);
        }
        on_step(&alpha, step_gain);
    }

    let bias = kkt_bias(&alpha, labels, &grad, c);
    Ok(SvmModel {
        alphas: alpha,
        labels: labels.to_vec(),
        bias,
        c,
        converged,
        degenerate: false,
        iterations,
    })
}

/// Bias from free support vectors, else the midpoint of the KKT bounds.
fn kkt_bias(alpha: &[f64], labels: &[f64], grad: &[f64], c: f64) -> f64 {
    // With s_t = sum_j a_j y_j K_tj we have y_t * s_t = grad_t + 1, so
    // y_t - s_t = -y_t * grad_t.
    let mut sum = 0.0;
    let mut free = 0usize;
    let mut lb = f64::NEG_INFINITY;
    let mut ub = f64::INFINITY;
    for t in 0..alpha.len() {
        let y = labels[t];
        let r = -y * grad[t];
        if alpha[t] > 0.0 && alpha[t] < c {
            sum += r;
            free += 1;
        } else {
            // a = 0 needs y (s + b) >= 1; a = C needs y (s + b) <= 1.
            let at_lower = alpha[t] == 0.0;
            if (y > 0.0) == at_lower {
                lb = lb.max(r);
            } else {
                ub = ub.min(r);
            }
        }
    }
    if free > 0 {
        sum / free as f64
    } else if lb.is_finite() && ub.is_finite() {
        0.5 * (lb + ub)
    } else if lb.is_finite() {
        lb
    } else if ub.is_finite() {
        ub
    } else {
        0.0
    }
}

/// Prediction rule: positive iff the score is strictly positive.
#[inline]
pub fn sign_label(score: f64) -> f64 {
    if score > 0.0 {
        1.0
    } else {
        -1.0
    }
}

impl SvmModel {
    pub fn len(&self) -> usize {
        self.alphas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alphas.is_empty()
    }

    /// `sum_i a_i y_i row_i + b` where `row_i = kappa(x, x_i)`.
    pub fn decision(&self, kernel_row: &[f64]) -> Result<f64> {
        if kernel_row.len() != self.alphas.len() {
            return Err(Error::invalid(format!(
                "kernel row has length {}, model has {} samples",
                kernel_row.len(),
                self.alphas.len()
            )));
        }
        Ok(self.decision_unchecked(kernel_row))
    }

    #[inline]
    pub fn decision_unchecked(&self, kernel_row: &[f64]) -> f64 {
        let mut s = 0.0;
        for ((a, y), k) in self.alphas.iter().zip(&self.labels).zip(kernel_row) {
            if *a != 0.0 {
                s += a * y * k;
            }
        }
        s + self.bias
    }

    pub fn predict(&self, kernel_row: &[f64]) -> Result<f64> {
        self.decision(kernel_row).map(sign_label)
    }

    /// Indices with `a_i > 0`, ascending.
    pub fn nonzero_support(&self) -> Vec<usize> {
        self.alphas
            .iter()
            .enumerate()
            .filter(|(_, &a)| a > 0.0)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn equilibrium_residual(&self) -> f64 {
        self.alphas.iter().zip(&self.labels).map(|(a, y)| a * y).sum::<f64>()
    }

    /// Restrict to the support; returns the compact model and the kept indices.
    pub fn compact(&self) -> (SvmModel, Vec<usize>) {
        let keep = self.nonzero_support();
        let model = SvmModel {
            alphas: keep.iter().map(|&i| self.alphas[i]).collect(),
            labels: keep.iter().map(|&i| self.labels[i]).collect(),
            ..self.clone()
        };
        (model, keep)
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Euclidean projection onto `{0 <= a <= C, y^T a = 0}` by bisection on
    /// the multiplier of the equality constraint.
    fn project(v: &[f64], y: &[f64], c: f64) -> Vec<f64> {
        let at = |lam: f64| -> Vec<f64> { v.iter().zip(y).map(|(vi, yi)| (vi - lam * yi).clamp(0.0, c)).collect() };
        let resid = |a: &[f64]| a.iter().zip(y).map(|(ai, yi)| ai * yi).sum::<f64>();
        let (mut lo, mut hi) = (-1e6, 1e6);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            // resid is non-increasing in lam
            if resid(&at(mid)) > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        at(0.5 * (lo + hi))
    }

    /// Projected gradient ascent with a 1/L step, run to convergence.
    pub(crate) fn projected_gradient_oracle(gram: &SquareMatrix, y: &[f64], c: f64) -> f64 {
        let n = y.len();
        let q = SquareMatrix::from_fn(n, |i, j| y[i] * y[j] * gram.get(i, j));
        let lip = q.as_slice().iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        let mut a = vec![0.0; n];
        for _ in 0..200_000 {
            let g: Vec<f64> = (0..n)
                .map(|i| 1.0 - (0..n).map(|j| q.get(i, j) * a[j]).sum::<f64>())
                .collect();
            let v: Vec<f64> = a.iter().zip(&g).map(|(ai, gi)| ai + gi / lip).collect();
            let next = project(&v, y, c);
            let moved = next.iter().zip(&a).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            a = next;
            if moved < 1e-15 {
                break;
            }
        }
        dual_objective(&a, y, gram)
    }

    pub(crate) fn gaussian_problem(n: usize, seed: u64) -> (SquareMatrix, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts: Vec<[f64; 2]> = (0..n).map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]).collect();
        let mut y: Vec<f64> = (0..n).map(|_| if rng.gen_bool(0.5) { 1.0 } else { -1.0 }).collect();
        y[0] = 1.0;
        y[1] = -1.0;
        let gram = SquareMatrix::from_fn(n, |i, j| {
            let d = (pts[i][0] - pts[j][0]).powi(2) + (pts[i][1] - pts[j][1]).powi(2);
            (-d / 0.5).exp()
        });
        (gram, y)
    }

    fn tight() -> SolverParams {
        SolverParams {
            tol: 1e-10,
            max_passes: 100_000,
        }
    }

    #[test]
    fn two_point_identity_problem() {
        let gram = SquareMatrix::from_fn(2, |i, j| if i == j { 1.0 } else { 0.0 });
        let y = [1.0, -1.0];
        let m = solve_dual(&SvmProblem { gram: &gram, labels: &y, c: 1e6 }, &tight()).unwrap();
        assert!((m.alphas[0] - 1.0).abs() < 1e-12 && (m.alphas[1] - 1.0).abs() < 1e-12);
        assert!(m.bias.abs() < 1e-12);
        assert!(m.converged && !m.degenerate);

        // exhaustive grid over the feasible line a1 = a2 = t
        let best_t = (0..=4000)
            .map(|k| k as f64 * 0.001)
            .max_by(|a, b| {
                let obj = |t: f64| dual_objective(&[t, t], &y, &gram);
                obj(*a).total_cmp(&obj(*b))
            })
            .unwrap();
        assert!((best_t - 1.0).abs() < 1e-9);

        assert!((m.decision(&[1.0, 0.0]).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(m.nonzero_support(), vec![0, 1]);
    }

    #[test]
    fn single_class_is_degenerate() {
        let gram = SquareMatrix::from_fn(3, |i, j| if i == j { 1.0 } else { 0.2 });
        let y = [1.0; 3];
        let m = solve_dual(&SvmProblem { gram: &gram, labels: &y, c: 1.0 }, &SolverParams::default()).unwrap();
        assert!(m.degenerate);
        assert!(m.alphas.iter().all(|&a| a == 0.0));
        assert_eq!(m.bias, 1.0);
        assert!(m.nonzero_support().is_empty());
        assert_eq!(m.decision(&[0.3, 0.1, 0.9]).unwrap(), m.bias);
    }

    #[test]
    fn input_validation() {
        let gram = SquareMatrix::from_fn(2, |i, j| if i == j { 1.0 } else if i == 0 { 0.5 } else { 0.1 });
        let y = [1.0, -1.0];
        assert!(matches!(
            solve_dual(&SvmProblem { gram: &gram, labels: &y, c: 1.0 }, &SolverParams::default()),
            Err(Error::InvalidInput(_))
        ));
        let sym = SquareMatrix::from_fn(2, |i, j| if i == j { 1.0 } else { 0.0 });
        assert!(solve_dual(&SvmProblem { gram: &sym, labels: &[1.0, 0.5], c: 1.0 }, &SolverParams::default()).is_err());
        let m = solve_dual(&SvmProblem { gram: &sym, labels: &y, c: 1.0 }, &SolverParams::default()).unwrap();
        assert!(m.decision(&[1.0]).is_err());
    }

    #[test]
    fn budget_exhaustion_reports_non_convergence() {
        let (gram, y) = gaussian_problem(8, 3);
        let m = solve_dual(&SvmProblem { gram: &gram, labels: &y, c: 10.0 }, &SolverParams { tol: 1e-12, max_passes: 1 }).unwrap();
        assert!(!m.converged);
        assert!(m.alphas.iter().all(|&a| (0.0..=10.0).contains(&a)));
    }

    #[test]
    fn matches_projected_gradient_oracle() {
        for seed in 0..10 {
            let (gram, y) = gaussian_problem(8, seed);
            let c = 0.5 + seed as f64;
            let m = solve_dual(&SvmProblem { gram: &gram, labels: &y, c }, &tight()).unwrap();
            let ours = dual_objective(&m.alphas, &y, &gram);
            let oracle = projected_gradient_oracle(&gram, &y, c);
            assert!((ours - oracle).abs() < 1e-6, "seed {seed}: {ours} vs {oracle}");
        }
    }

    #[test]
    fn constraints_hold_after_every_step_and_objective_increases() {
        let (gram, y) = gaussian_problem(8, 21);
        let c = 2.0;
        let mut last = 0.0;
        let mut steps = 0;
        smo(&SvmProblem { gram: &gram, labels: &y, c }, &tight(), |a, _| {
            steps += 1;
            assert!(a.iter().all(|&v| (0.0..=c).contains(&v)));
            let eq: f64 = a.iter().zip(&y).map(|(a, y)| a * y).sum();
            assert!(eq.abs() <= 1e-9);
            let obj = dual_objective(a, &y, &gram);
            assert!(obj >= last - 1e-12, "objective decreased {last} -> {obj}");
            last = obj;
        })
        .unwrap();
        assert!(steps > 0);
    }

    #[test]
    fn kkt_conditions_at_solution() {
        let (gram, y) = gaussian_problem(30, 8);
        let tol = 1e-3;
        let c = 1.0;
        let m = solve_dual(&SvmProblem { gram: &gram, labels: &y, c }, &SolverParams { tol, max_passes: 10_000 }).unwrap();
        assert!(m.converged);
        for i in 0..y.len() {
            let margin = y[i] * m.decision(gram.row(i)).unwrap();
            let a = m.alphas[i];
            if a == 0.0 {
                assert!(margin >= 1.0 - tol, "i={i} margin={margin}");
            } else if a == c {
                assert!(margin <= 1.0 + tol, "i={i} margin={margin}");
            } else {
                assert!((margin - 1.0).abs() <= tol, "i={i} margin={margin}");
            }
        }
    }

    #[test]
    fn separable_training_margins() {
        // two well separated clusters
        let pts: Vec<f64> = vec![-2.0, -1.8, -2.2, -1.9, 2.0, 1.7, 2.3, 2.1];
        let y: Vec<f64> = pts.iter().map(|&p| if p > 0.0 { 1.0 } else { -1.0 }).collect();
        let gram = SquareMatrix::from_fn(8, |i, j| (-(pts[i] - pts[j]).powi(2)).exp());
        let tol = 1e-3;
        let m = solve_dual(&SvmProblem { gram: &gram, labels: &y, c: 1e3 }, &SolverParams { tol, max_passes: 10_000 }).unwrap();
        for i in 0..8 {
            assert!(y[i] * m.decision(gram.row(i)).unwrap() >= 1.0 - tol);
        }
        let (compact, keep) = m.compact();
        assert_eq!(keep, m.nonzero_support());
        assert!(keep.len() <= 8);
        let row: Vec<f64> = keep.iter().map(|&k| gram.get(0, k)).collect();
        assert!((compact.decision(&row).unwrap() - m.decision(gram.row(0)).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn indefinite_gram_still_feasible_and_monotone() {
        // symmetric but indefinite
        let gram = SquareMatrix::from_fn(4, |i, j| if i == j { 0.1 } else { 0.9 - 0.1 * (i + j) as f64 });
        let y = [1.0, -1.0, 1.0, -1.0];
        let mut last = 0.0;
        let m = smo(&SvmProblem { gram: &gram, labels: &y, c: 1.0 }, &SolverParams::default(), |a, _| {
            let obj = dual_objective(a, &y, &gram);
            assert!(obj >= last - 1e-12);
            last = obj;
        })
        .unwrap();
        assert!(m.alphas.iter().all(|&a| (0.0..=1.0).contains(&a)));
        assert!(m.equilibrium_residual().abs() <= 1e-9);
    }

    #[test]
    fn sign_of_zero_rejects() {
        assert_eq!(sign_label(0.0), -1.0);
        assert_eq!(sign_label(1e-300), 1.0);
        assert_eq!(sign_label(-2.0), -1.0);
    }
}
