//! Solve a small SVM dual with SMO and inspect the solution.
//!
//! cargo run --example svm_smo

use deepcascade::matrix::SquareMatrix;
use deepcascade::svm::{dual_objective, solve_dual, SolverParams, SvmProblem};

fn main() -> deepcascade::Result<()> {
    let points: [(f64, f64); 6] = [(0.0, 0.0), (0.2, 0.1), (0.1, 0.3), (1.0, 1.0), (0.9, 0.8), (0.4, 0.5)];
    let labels = [-1.0, -1.0, -1.0, 1.0, 1.0, 1.0];
    let gram = SquareMatrix::from_fn(points.len(), |i, j| {
        let (a, b) = (points[i], points[j]);
        (-((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)) / 0.5).exp()
    });
    let model = solve_dual(&SvmProblem { gram: &gram, labels: &labels, c: 10.0 }, &SolverParams::default())?;
    println!("alphas     {:?}", model.alphas.iter().map(|a| format!("{a:.4}")).collect::<Vec<_>>());
    println!("bias       {:.4}", model.bias);
    println!("support    {:?}", model.nonzero_support());
    println!("dual       {:.6}", dual_objective(&model.alphas, &labels, &gram));
    println!("sum a*y    {:.2e}", model.equilibrium_residual());
    println!("converged  {} after {} iterations", model.converged, model.iterations);
    for (i, y) in labels.iter().enumerate() {
        println!("  x{i} label {y:+} decision {:+.4}", model.decision(gram.row(i))?);
    }
    Ok(())
}
