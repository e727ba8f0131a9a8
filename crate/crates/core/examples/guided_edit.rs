//! One guided edit in a Gaussian world: recolor the square, then show how
//! the image guidance scales change the region and the background.
//!
//! cargo run --release --example guided_edit -- [out_dir]

use mcot::diffusion::{
    AnalyticDenoiser, DiffusionSchedule, EditWorldParams, Editor, GaussianWorld, GuidanceScales,
    IdentityCodec, LatentCodec,
};
use mcot::embed::HashedTextEmbedder;
use mcot::io::{write_image, write_mask};
use mcot::plan::SubPrompt;
use mcot::scene::{Color, SceneConfig, Shape, ShapeKind, SyntheticScene};

fn main() -> mcot::Result<()> {
    let config = SceneConfig::default();
    let scene = SyntheticScene::from_shapes(
        config,
        vec![
            Shape {
                kind: ShapeKind::Square,
                color: Color::Blue,
                top: 3,
                left: 2,
                size: 4,
            },
            Shape {
                kind: ShapeKind::Circle,
                color: Color::Green,
                top: 9,
                left: 9,
                size: 4,
            },
        ],
    )?;
    let prompt = SubPrompt::new(1, "make the square red");
    let mask = scene.region_for_prompt(&prompt.text)?;

    let mut target = scene.image.clone();
    for r in 0..16 {
        for c in 0..16 {
            if mask.get(r, c) {
                target.set_pixel(r, c, &Color::Red.rgb());
            }
        }
    }
    let codec = IdentityCodec;
    let schedule = DiffusionSchedule::default();
    let world = GaussianWorld::for_edit(
        &codec.encode(&scene.image)?,
        &mask,
        &codec.encode(&target)?,
        EditWorldParams {
            text_response: 0.3,
            text_leak: 0.02,
            ..EditWorldParams::default()
        },
    )?;
    let denoiser = AnalyticDenoiser {
        world,
        schedule: schedule.clone(),
    };
    let text = HashedTextEmbedder::new(8, 0);
    let editor = Editor {
        denoiser: &denoiser,
        codec: &codec,
        text_encoder: &text,
        schedule: &schedule,
    };

    let out_dir = std::env::args().nth(1);
    for s in [1.0, 1.5, 2.0] {
        let out = editor.edit(
            &scene.image,
            &mask,
            &prompt,
            &GuidanceScales::new(s, s, 7.5)?,
            100,
            42,
        )?;
        let red = out.region_mean(Some(&mask)).expect("region")[0];
        let bg = out.region_mean(Some(&mask.invert())).expect("background");
        let bg_in = scene
            .image
            .region_mean(Some(&mask.invert()))
            .expect("background");
        let drift: f64 = bg
            .iter()
            .zip(&bg_in)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / 3.0;
        println!("s_f = s_b = {s:.1}: region red {red:.3}, background mean drift {drift:.4}");
        if let Some(dir) = &out_dir {
            std::fs::create_dir_all(dir).map_err(|e| mcot::Error::Io {
                path: dir.clone(),
                source: e,
            })?;
            write_image(&out, format!("{dir}/edit_s{s:.1}.png"))?;
        }
    }
    if let Some(dir) = &out_dir {
        write_image(&scene.image, format!("{dir}/input.png"))?;
        write_mask(&mask, format!("{dir}/mask.pgm"))?;
    }
    Ok(())
}
