//! Train the toy region reasoner on synthetic scenes and measure held-out IoU.
//!
//! cargo run --release --example train_reasoner -- [epochs] [lr]

use mcot::image::{binarize, mask_iou};
use mcot::plan::SubPrompt;
use mcot::reasoner::{predict_region, train_toy_reasoner};
use mcot::scene::{generate_scenes, Action, SceneConfig};

fn main() -> mcot::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let epochs = args.first().and_then(|a| a.parse().ok()).unwrap_or(200);
    let lr = args.get(1).and_then(|a| a.parse().ok()).unwrap_or(0.05);
    let config = SceneConfig::default();
    let train = generate_scenes(&config, 128, 7)?;
    let held_out = generate_scenes(&config, 32, 1007)?;

    let start = std::time::Instant::now();
    let (model, report) = train_toy_reasoner(&train, epochs, lr, 7, |epoch, loss| {
        if epoch % 20 == 0 {
            println!("epoch {epoch:>4}  bce {loss:.4}");
        }
    })?;
    println!(
        "trained {} examples in {:.1?}, final bce {:.4}",
        report.examples,
        start.elapsed(),
        report.final_loss
    );

    let (mut all, mut add) = (Vec::new(), Vec::new());
    for scene in &held_out {
        let req = scene.primary_request();
        let soft = predict_region(&model, &scene.image, &SubPrompt::new(1, &req.prompt))?;
        let iou = mask_iou(&binarize(&soft, 0.5), &scene.region(&req.request)?)?;
        if matches!(req.request.action, Action::AddBeside { .. }) {
            add.push(iou);
        }
        all.push(iou);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let worst = all.iter().cloned().fold(1.0, f64::min);
    println!(
        "held-out IoU {:.3} (worst {worst:.3}); add-beside {:.3} over {} scenes",
        mean(&all),
        mean(&add),
        add.len()
    );
    Ok(())
}
