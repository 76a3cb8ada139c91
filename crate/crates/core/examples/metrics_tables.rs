//! Detection, conservation and EER arithmetic, rendered as a report table.
//!
//! cargo run --example metrics_tables

use deepcascade::metrics::{conservation_metrics, detection_metrics, eer, render_table, ReportRow};

fn main() -> deepcascade::Result<()> {
    println!("eer(97.14, 4.44)  = {:.3}", eer(97.14, 4.44));
    println!("eer(97.55, 43.56) = {:.3}", eer(97.55, 43.56));

    let truth = [1.0, 1.0, 1.0, 1.0, -1.0, -1.0, -1.0, -1.0, -1.0, -1.0];
    let reference = [1.0, 1.0, 1.0, -1.0, 1.0, -1.0, -1.0, -1.0, -1.0, -1.0];
    let cheap = [1.0, 1.0, 1.0, 1.0, 1.0, 1.0, -1.0, -1.0, -1.0, -1.0];

    let mut rows = Vec::new();
    for (label, pred, cons) in [("cheap", &cheap, true), ("reference", &reference, false)] {
        let r = detection_metrics(pred, &truth)?;
        let (c, f) = if cons {
            let (c, f) = conservation_metrics(pred, &reference)?;
            (Some(c), Some(f))
        } else {
            (None, None)
        };
        rows.push(ReportRow {
            label: label.into(),
            cons: c,
            rfa: f,
            dr: r.dr,
            fa: r.fa,
            eer: r.eer(),
            time_ms: None,
            mean_kernel_evals: 0.0,
            mean_cost: 0.0,
        });
    }
    print!("{}", render_table(&["toy decisions".into()], &rows));
    match detection_metrics(&[1.0, -1.0], &[-1.0, -1.0]) {
        Err(e) => println!("no positives: {e}"),
        Ok(_) => unreachable!(),
    }
    Ok(())
}
