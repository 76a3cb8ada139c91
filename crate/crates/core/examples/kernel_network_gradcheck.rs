//! Forward and backward passes of a deep kernel network, checked against
//! central finite differences.
//!
//! cargo run --example kernel_network_gradcheck

use deepcascade::kernel_net::{Architecture, KernelNetwork};

fn main() -> deepcascade::Result<()> {
    let arch = Architecture::new(vec![4, 3, 3, 1])?;
    println!("layers {:?}, {} MACs per forward", arch.layer_sizes(), arch.mac_count());

    let flat = KernelNetwork::init_flat(&arch);
    println!("flat network on all-ones input: {}", flat.forward(&[1.0; 4])?.output);

    // mixed-sign weights so some units are inactive
    let weights: Vec<Vec<f64>> = arch
        .layer_sizes()
        .windows(2)
        .enumerate()
        .map(|(l, w)| (0..w[0] * w[1]).map(|k| ((k * 7 + l * 3) % 11) as f64 / 10.0 - 0.3).collect())
        .collect();
    let net = KernelNetwork::from_weights(arch.clone(), weights)?;
    let base = [0.9, 0.2, 0.55, 0.7];
    let trace = net.forward(&base)?;
    let grads = net.backward(&trace, 1.0)?;

    let h = 1e-6;
    let mut worst = 0.0f64;
    for l in 0..grads.len() {
        for k in 0..grads[l].len() {
            let at = |d: f64| {
                let mut w = net.weights().clone();
                w[l][k] += d;
                KernelNetwork::from_weights(arch.clone(), w).unwrap().forward(&base).unwrap().output
            };
            let fd = (at(h) - at(-h)) / (2.0 * h);
            let scale = fd.abs().max(grads[l][k].abs());
            if scale > 1e-10 {
                worst = worst.max((fd - grads[l][k]).abs() / scale);
            }
        }
    }
    println!("kernel value {:.6}, worst relative gradient error {worst:.2e}", trace.output);
    Ok(())
}
