//! Fit per-chunk Gaussian scales on a synthetic set and inspect base kernel vectors.
//!
//! cargo run --example base_kernels

use deepcascade::base_kernels::{KernelBank, DEFAULT_K_NEIGHBORS};
use deepcascade::data::{generate_synthetic, SyntheticSpec};

fn main() -> deepcascade::Result<()> {
    let data = generate_synthetic(&SyntheticSpec { n: 500, dim: 16, positive_fraction: 0.1, separation: 6.0, seed: 1 })?;
    let (bank, estimate) = KernelBank::fit(&data.features, 4, DEFAULT_K_NEIGHBORS)?;
    println!("{} chunks of {} features", bank.num_chunks(), bank.chunk_size());
    for (q, s) in bank.scales().iter().enumerate() {
        println!("  sigma[{q}] = {s:.4}");
    }
    println!("degenerate chunks: {:?}", estimate.degenerate_chunks);

    let labels = data.labels()?;
    let pos = labels.iter().position(|&y| y > 0.0).unwrap();
    let neg = labels.iter().position(|&y| y < 0.0).unwrap();
    let x = &data.features[neg];
    println!("self      : {:?}", bank.base_kernel_vector(x, x)?);
    println!("negative  : {:?}", bank.base_kernel_vector(x, &data.features[(neg + 1..).find(|&i| labels[i] < 0.0).unwrap()])?);
    println!("positive  : {:?}", bank.base_kernel_vector(x, &data.features[pos])?);
    Ok(())
}
