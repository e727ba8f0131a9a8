//! Desk-scale metric suite: score a perfect edit and a no-op edit of a
//! synthetic scene, and recompute the published comparison rows.
//!
//! cargo run --example metrics

use mcot::eval::{metric_report, Embedders, MetricReport, REFERENCE_ROWS};
use mcot::scene::{generate_scenes, Action, SceneConfig};

fn main() -> mcot::Result<()> {
    let embedders = Embedders::default();
    let scene = generate_scenes(&SceneConfig::default(), 1, 5)?.remove(0);
    let req = scene.primary_request();
    let mask = scene.region(&req.request)?;
    let gt = scene.apply(&scene.image, &req.request)?;
    let local = match req.request.action {
        Action::Recolor { to } => format!("a {} {}", to.name(), req.request.target.kind.name()),
        _ => req.prompt.clone(),
    };
    println!("request: {}", req.prompt);
    println!("{:<10} {}", "", MetricReport::CSV_HEADER);
    for (name, out) in [("perfect", &gt), ("no-op", &scene.image)] {
        let r = metric_report(out, &gt, &local, &local, Some(&mask), &embedders)?;
        println!("{name:<10} {}", r.csv_row());
    }

    println!("\n{:<20} {:>8} {:>10}", "method", "printed", "recomputed");
    for row in &REFERENCE_ROWS {
        println!(
            "{:<20} {:>8.4} {:>10.5}",
            row.method,
            row.total,
            row.recomputed().total
        );
    }
    Ok(())
}
