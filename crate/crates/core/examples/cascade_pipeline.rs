//! Full pipeline on a small synthetic set: reference training, five
//! distilled stages, the assembled cascade, its report and a benchmark.
//!
//! cargo run --release --example cascade_pipeline

use deepcascade::cascade::Cascade;
use deepcascade::cli::Workspace;
use deepcascade::config::RunConfig;

fn main() -> deepcascade::Result<()> {
    let config = RunConfig::from_toml("seed = 5\n[data]\nn = 3000\nlabeled_count = 450\n[train]\nf_epochs = 50\ng_epochs = 30\n")?;
    let ws = Workspace::new(config)?;
    println!(
        "train {} / validation {} / test {}",
        ws.split.train.len(),
        ws.split.validation.len(),
        ws.split.test.len()
    );

    let (f, log) = ws.train_reference(|_| {})?;
    println!("reference: {}", log.last().unwrap().log_line());
    let mut stages = Vec::new();
    for t in 1..ws.config.num_stages() {
        let (g, _) = ws.distill(&f, t, |_| {})?;
        println!("stage {t}: {:?}, {} support vectors", g.stages[0].network.arch().layer_sizes(), g.stages[0].support.len());
        stages.push(g);
    }
    let cascade: Cascade = ws.assemble(stages, f)?;
    print!("{}", ws.eval_report(&cascade, None)?);
    print!("{}", ws.bench_report(&cascade, None)?);

    let x = &ws.dataset.features[ws.split.test[0]];
    let o = cascade.evaluate(x)?;
    println!("first test pattern: label {:+}, {} stages, scores {:?}", o.label, o.stages_consumed, o.scores);
    Ok(())
}
