//! Write and re-read the binary pair format, then render a stage map for a
//! hand-made set of cascade outcomes.
//!
//! cargo run --example pair_format_and_map

use deepcascade::data::{generate_synthetic, load_pairs, render_stage_map, split, SplitSpec, SyntheticSpec};

fn main() -> deepcascade::Result<()> {
    let data = generate_synthetic(&SyntheticSpec { n: 64, dim: 4, positive_fraction: 0.1, separation: 5.0, seed: 2 })?;
    let dir = std::env::temp_dir().join("deepcascade-example");
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("pairs.dkp");
    data.write(&path)?;
    let back = load_pairs(&path)?;
    println!("{} bytes, round trip exact: {}, grid {:?}", std::fs::metadata(&path)?.len(), back == data, back.grid);

    let s = split(&back, &SplitSpec { labeled_count: 30, seed: 2 })?;
    println!("train {:?}...", &s.train[..5]);
    println!("sizes {} / {} / {}", s.train.len(), s.validation.len(), s.test.len());

    // pretend six-stage outcomes: positives reach the end, others leave early
    let labels = back.labels()?;
    let outcomes: Vec<(usize, bool)> = labels
        .iter()
        .enumerate()
        .map(|(i, &y)| if y > 0.0 { (6, true) } else { (1 + i % 3, false) })
        .collect();
    let map = render_stage_map(&outcomes, back.grid, 6)?;
    std::fs::write(dir.join("stage_map.pgm"), &map.pgm)?;
    println!("map written to {}", dir.display());
    for line in map.csv.lines().take(4) {
        println!("  {line}");
    }
    Ok(())
}
