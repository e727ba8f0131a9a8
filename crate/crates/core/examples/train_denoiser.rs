//! Train the tiny conditional denoiser on recolor edits of synthetic scenes
//! with condition dropout, then save and reload it.
//!
//! cargo run --release --example train_denoiser -- [epochs] [lr]

use mcot::denoiser::{train_denoiser, DenoiserExample, TinyDenoiser, TEXT_DIM};
use mcot::diffusion::{ConditionSet, DiffusionSchedule, DropoutPolicy, IdentityCodec, LatentCodec};
use mcot::embed::{HashedTextEmbedder, TextEmbedder};
use mcot::image::split_foreground;
use mcot::scene::{generate_scenes, SceneConfig};

fn main() -> mcot::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let epochs = args.first().and_then(|a| a.parse().ok()).unwrap_or(10);
    let lr = args.get(1).and_then(|a| a.parse().ok()).unwrap_or(0.002);

    let text = HashedTextEmbedder::new(TEXT_DIM, 0);
    let codec = IdentityCodec;
    let mut examples = Vec::new();
    for s in generate_scenes(&SceneConfig::default(), 24, 9)? {
        let req = s.primary_request();
        let mask = s.region(&req.request)?;
        let (fg, bg) = split_foreground(&s.image, &mask)?;
        examples.push(DenoiserExample {
            z0: codec.encode(&s.apply(&s.image, &req.request)?)?,
            cond: ConditionSet::full(
                codec.encode(&fg)?,
                codec.encode(&bg)?,
                text.embed(&req.prompt)?,
            ),
        });
    }
    let schedule = DiffusionSchedule::default();
    let (model, report) = train_denoiser(
        &examples,
        epochs,
        lr,
        9,
        &DropoutPolicy::default(),
        &schedule,
        |e, loss| {
            println!("epoch {e:>3}  mse {loss:.4}");
        },
    )?;
    println!(
        "{} parameters, {} examples",
        model.param_count(),
        report.examples
    );

    let path = std::env::temp_dir().join("mcot_denoiser.weights");
    model.save(&path, &schedule)?;
    let (back, _) = TinyDenoiser::load(&path)?;
    println!(
        "reloaded from {}: identical params {}",
        path.display(),
        back.params() == model.params()
    );
    Ok(())
}
