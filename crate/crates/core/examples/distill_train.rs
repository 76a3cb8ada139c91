//! Train a reference kernel network on true labels, then distill a much
//! smaller surrogate from its scores with conservation weighting.
//!
//! cargo run --release --example distill_train

use deepcascade::base_kernels::KernelBank;
use deepcascade::data::{generate_synthetic, SyntheticSpec};
use deepcascade::distill::{betas_for_f, betas_for_g, pseudo_labels, train_with, DistillConfig, Targets};
use deepcascade::kernel_net::{Architecture, KernelNetwork};
use deepcascade::metrics::conservation_metrics;

fn main() -> deepcascade::Result<()> {
    let data = generate_synthetic(&SyntheticSpec { n: 200, dim: 8, positive_fraction: 0.15, separation: 3.0, seed: 4 })?;
    let labels = data.labels()?.to_vec();
    let (bank, _) = KernelBank::fit(&data.features, 4, 10)?;

    let f_arch = Architecture::uniform(4, 8, 7)?;
    let f_cfg = DistillConfig { max_epochs: 60, ..DistillConfig::default() }.with_betas(betas_for_f(&labels)?);
    let f = train_with(&data.features, Targets::Labels(&labels), KernelNetwork::init_flat(&f_arch), &bank, &f_cfg, None, |r| {
        if r.epoch % 10 == 0 {
            println!("f  {}", r.log_line());
        }
    })?;

    let g_arch = Architecture::uniform(4, 2, 3)?;
    let (bp, bm) = betas_for_g(&f.train_scores)?;
    println!("surrogate betas: {bp:.4e} / {bm:.4e}");
    let g_cfg = DistillConfig { max_epochs: 40, ..DistillConfig::default() }.with_betas((bp, bm));
    let g = train_with(&data.features, Targets::Scores(&f.train_scores), KernelNetwork::init_flat(&g_arch), &bank, &g_cfg, None, |r| {
        if r.epoch % 10 == 0 {
            println!("g  {}", r.log_line());
        }
    })?;

    let (cons, rfa) = conservation_metrics(&pseudo_labels(&g.train_scores), &pseudo_labels(&f.train_scores))?;
    println!("f: {} MACs/kernel, g: {} MACs/kernel", f_arch.mac_count(), g_arch.mac_count());
    println!("surrogate cons {cons:.2}%  rFA {rfa:.2}%");
    Ok(())
}
