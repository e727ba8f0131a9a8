//! Full plan / reason / edit loop on a synthetic scene with a mock planner
//! and the scene oracle as reasoner, then replay, a hint override and the
//! on-disk record.
//!
//! cargo run --release --example pipeline_run -- [out_dir]

use mcot::backends::{PlannerClient, ReasonerClient};
use mcot::diffusion::{DiffusionSchedule, Editor, IdentityCodec, ReconstructionDenoiser};
use mcot::embed::HashedTextEmbedder;
use mcot::pipeline::{override_hints, persist, replay, run_edit, same_trajectory, PipelineConfig};
use mcot::plan::{Instruction, SubPrompt};
use mcot::scene::{generate_scenes, SceneConfig};

fn main() -> mcot::Result<()> {
    let scene = generate_scenes(&SceneConfig::default(), 1, 3)?.remove(0);
    let prompts: Vec<&str> = scene
        .requests
        .iter()
        .take(2)
        .map(|r| r.prompt.as_str())
        .collect();
    let instr = Instruction::new(prompts.join(" then "), "")?;
    println!("instruction: {}", instr.text);

    let schedule = DiffusionSchedule::default();
    let denoiser = ReconstructionDenoiser {
        null_value: 0.5,
        sigma: 0.02,
        schedule: schedule.clone(),
    };
    let text = HashedTextEmbedder::new(8, 0);
    let editor = Editor {
        denoiser: &denoiser,
        codec: &IdentityCodec,
        text_encoder: &text,
        schedule: &schedule,
    };
    let planner = PlannerClient::mock("split")?;
    let reasoner = ReasonerClient::oracle(scene.clone());
    let cfg = PipelineConfig {
        steps: 25,
        ..PipelineConfig::default()
    };

    let record =
        run_edit(&planner, &reasoner, &editor, &scene.image, &instr, &cfg).map_err(|f| f.error)?;
    for s in &record.steps {
        println!(
            "step {} {:?}: {} mask pixels, {} ms",
            s.index,
            s.sub_prompt.text,
            s.mask.count(),
            s.wall_ms
        );
    }
    let again = replay(&record, &planner, &reasoner, &editor).map_err(|f| f.error)?;
    println!("replay identical: {}", same_trajectory(&record, &again));

    let full = mcot::image::Mask::full(16, 16)?;
    let changed = override_hints(
        &record,
        2,
        (full, SubPrompt::new(2, "touch everything")),
        &reasoner,
        &editor,
    )
    .map_err(|f| f.error)?;
    println!(
        "override changes step 2: {}",
        !same_trajectory(&record, &changed)
    );

    if let Some(dir) = std::env::args().nth(1) {
        let (run_dir, files) = persist(&record, dir)?;
        println!("wrote {} files to {}", files.len(), run_dir.display());
    }
    println!(
        "{}",
        serde_json::to_string_pretty(&record.summary()).expect("summary")
    );
    Ok(())
}
