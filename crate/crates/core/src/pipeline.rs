//! The plan / reason / edit loop with a replayable audit trail.
//!
//! The plan is requested once. Step `i` then asks the reasoner for a region
//! on the latest image (or on the input, see
//! [`PipelineConfig::reason_per_step`]) and edits it with seed `seed + i`.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::backends::{PlannerClient, ReasonerClient, DEFAULT_THRESHOLD};
use crate::diffusion::{Editor, GuidanceScales};
use crate::error::{Error, Result};
use crate::image::{Image, Mask};
use crate::io::{write_image, write_mask};
use crate::plan::{
    build_planner_prompt, serialize_plan, EditPlan, Instruction, PlannerPromptConfig, SubPrompt,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(rename = "K")]
    pub max_steps: usize,
    /// DDIM steps per edit.
    pub steps: usize,
    pub scales: GuidanceScales,
    pub seed: u64,
    /// Reason against the latest intermediate image rather than the input.
    pub reason_per_step: bool,
    pub threshold: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            max_steps: 3,
            steps: 100,
            scales: GuidanceScales::default(),
            seed: 42,
            reason_per_step: true,
            threshold: DEFAULT_THRESHOLD,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_steps == 0 {
            return Err(Error::validation("K must be at least 1"));
        }
        if self.steps == 0 {
            return Err(Error::validation("steps must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::validation("threshold must lie in [0,1]"));
        }
        self.scales.validate()
    }
}

/// The ordered `(mask, sub-prompt)` pairs actually used by a run.
#[derive(Debug, Clone, PartialEq)]
pub struct HintSet(pub Vec<(Mask, SubPrompt)>);

impl HintSet {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    /// 1-based.
    pub index: usize,
    pub sub_prompt: SubPrompt,
    pub mask: Mask,
    pub pre: Image,
    pub post: Image,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub input: Image,
    pub instruction: Instruction,
    pub planner_prompt: String,
    pub plan: Option<EditPlan>,
    pub steps: Vec<StepRecord>,
    pub config: PipelineConfig,
    pub planner: String,
    pub reasoner: String,
    pub complete: bool,
    pub error: Option<String>,
}

impl RunRecord {
    /// Last edited image, or the input when no step ran.
    pub fn final_image(&self) -> &Image {
        self.steps.last().map(|s| &s.post).unwrap_or(&self.input)
    }

    pub fn hints(&self) -> HintSet {
        HintSet(
            self.steps
                .iter()
                .map(|s| (s.mask.clone(), s.sub_prompt.clone()))
                .collect(),
        )
    }

    /// Per-step `(pre, mask, post)` hashes.
    pub fn step_hashes(&self) -> Vec<[String; 3]> {
        self.steps
            .iter()
            .map(|s| [image_hash(&s.pre), mask_hash(&s.mask), image_hash(&s.post)])
            .collect()
    }

    /// Content address: hash of input, instruction and configuration (which
    /// includes the seed).
    pub fn run_id(&self) -> String {
        let mut h = Sha256::new();
        h.update(image_hash(&self.input));
        h.update(self.instruction.text.as_bytes());
        h.update([0]);
        h.update(self.instruction.global_description.as_bytes());
        h.update([0]);
        h.update(serde_json::to_vec(&self.config).expect("config serializes"));
        hex::encode(&h.finalize()[..8])
    }

    /// Metadata written as `record.json`.
    pub fn summary(&self) -> serde_json::Value {
        json!({
            "run_id": self.run_id(),
            "instruction": self.instruction.text,
            "global_description": self.instruction.global_description,
            "planner_prompt": self.planner_prompt,
            "plan": self.plan.as_ref().map(|p| serde_json::from_str::<serde_json::Value>(&serialize_plan(p)).expect("plan JSON")),
            "config": self.config,
            "planner": self.planner,
            "reasoner": self.reasoner,
            "complete": self.complete,
            "error": self.error,
            "input_hash": image_hash(&self.input),
            "final_hash": image_hash(self.final_image()),
            "steps": self.steps.iter().map(|s| json!({
                "index": s.index,
                "sub_prompt": s.sub_prompt,
                "mask_pixels": s.mask.count(),
                "pre_hash": image_hash(&s.pre),
                "mask_hash": mask_hash(&s.mask),
                "post_hash": image_hash(&s.post),
                "wall_ms": s.wall_ms,
            })).collect::<Vec<_>>(),
        })
    }
}

/// A failed run together with everything completed before the failure.
#[derive(Debug)]
pub struct RunFailure {
    pub error: Error,
    pub record: RunRecord,
}

impl std::fmt::Display for RunFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "run aborted after {} step(s): {}",
            self.record.steps.len(),
            self.error
        )
    }
}

impl std::error::Error for RunFailure {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

pub type RunResult = std::result::Result<RunRecord, Box<RunFailure>>;

/// SHA-256 of the dimensions and exact `f64` bit patterns.
pub fn image_hash(image: &Image) -> String {
    let mut h = Sha256::new();
    for d in [image.height(), image.width(), image.channels()] {
        h.update((d as u64).to_le_bytes());
    }
    for v in image.data() {
        h.update(v.to_le_bytes());
    }
    hex::encode(h.finalize())
}

pub fn mask_hash(mask: &Mask) -> String {
    let mut h = Sha256::new();
    h.update((mask.height() as u64).to_le_bytes());
    h.update((mask.width() as u64).to_le_bytes());
    h.update(mask.data());
    hex::encode(h.finalize())
}

fn fail(error: Error, mut record: RunRecord) -> Box<RunFailure> {
    record.complete = false;
    record.error = Some(error.to_string());
    Box::new(RunFailure { error, record })
}

fn edit_step(
    editor: &Editor<'_>,
    cfg: &PipelineConfig,
    index: usize,
    pre: &Image,
    mask: Mask,
    sub_prompt: SubPrompt,
) -> Result<StepRecord> {
    if !pre.same_size(&mask) {
        return Err(Error::shape(format!(
            "hint mask is {}x{}, image is {}x{}",
            mask.height(),
            mask.width(),
            pre.height(),
            pre.width()
        )));
    }
    let start = Instant::now();
    let post = editor.edit(
        pre,
        &mask,
        &sub_prompt,
        &cfg.scales,
        cfg.steps,
        cfg.seed.wrapping_add(index as u64),
    )?;
    Ok(StepRecord {
        index,
        sub_prompt,
        mask,
        pre: pre.clone(),
        post,
        wall_ms: start.elapsed().as_secs_f64() * 1e3,
    })
}

/// Runs steps `from..=k` of `record`'s plan, appending to `record.steps`.
fn continue_run(
    mut record: RunRecord,
    from: usize,
    reasoner: &ReasonerClient,
    editor: &Editor<'_>,
) -> RunResult {
    let plan = record.plan.clone().expect("plan present");
    let cfg = record.config.clone();
    for sub_prompt in plan.sub_prompts().iter().skip(from - 1) {
        let index = sub_prompt.id;
        let current = record.final_image().clone();
        let basis = if cfg.reason_per_step {
            &current
        } else {
            &record.input
        };
        let mask = match reasoner.request_region(basis, sub_prompt, cfg.threshold) {
            Ok(m) => m,
            Err(e) => return Err(fail(e, record)),
        };
        match edit_step(editor, &cfg, index, &current, mask, sub_prompt.clone()) {
            Ok(step) => record.steps.push(step),
            Err(e) => return Err(fail(e, record)),
        }
    }
    record.complete = true;
    record.error = None;
    Ok(record)
}

pub fn run_edit(
    planner: &PlannerClient,
    reasoner: &ReasonerClient,
    editor: &Editor<'_>,
    x0: &Image,
    instr: &Instruction,
    cfg: &PipelineConfig,
) -> RunResult {
    let mut record = RunRecord {
        input: x0.clone(),
        instruction: instr.clone(),
        planner_prompt: String::new(),
        plan: None,
        steps: Vec::new(),
        config: cfg.clone(),
        planner: planner.descriptor(),
        reasoner: reasoner.descriptor(),
        complete: false,
        error: None,
    };
    if let Err(e) = cfg.validate() {
        return Err(fail(e, record));
    }
    let prompt_cfg = PlannerPromptConfig::with_max_steps(cfg.max_steps);
    record.planner_prompt = match build_planner_prompt(instr, &prompt_cfg) {
        Ok(p) => p,
        Err(e) => return Err(fail(e, record)),
    };
    let plan = match planner.request_plan(&record.planner_prompt, cfg.max_steps) {
        Ok(p) => p,
        Err(e) => return Err(fail(e, record)),
    };
    if plan.is_empty() || plan.len() > cfg.max_steps {
        let k = plan.len();
        return Err(fail(
            Error::PlanBounds {
                k,
                max: cfg.max_steps,
            },
            record,
        ));
    }
    record.plan = Some(plan);
    continue_run(record, 1, reasoner, editor)
}

/// Replaces the hint of `step` (1-based), keeps earlier steps as recorded
/// and re-runs every later step, re-reasoning on the new images.
pub fn override_hints(
    record: &RunRecord,
    step: usize,
    new_hint: (Mask, SubPrompt),
    reasoner: &ReasonerClient,
    editor: &Editor<'_>,
) -> RunResult {
    let k = record.plan.as_ref().map_or(0, EditPlan::len);
    if step == 0 || step > k || step > record.steps.len() {
        return Err(fail(
            Error::validation(format!(
                "step {step} outside 1..={}",
                record.steps.len().min(k)
            )),
            record.clone(),
        ));
    }
    let mut out = record.clone();
    out.steps.truncate(step - 1);
    out.complete = false;
    let pre = record.steps[step - 1].pre.clone();
    let (mask, sub_prompt) = new_hint;
    match edit_step(editor, &out.config, step, &pre, mask, sub_prompt) {
        Ok(s) => out.steps.push(s),
        Err(e) => return Err(fail(e, out)),
    }
    if step == k {
        out.complete = true;
        out.error = None;
        return Ok(out);
    }
    continue_run(out, step + 1, reasoner, editor)
}

/// Re-executes a record's input, instruction and configuration.
pub fn replay(
    record: &RunRecord,
    planner: &PlannerClient,
    reasoner: &ReasonerClient,
    editor: &Editor<'_>,
) -> RunResult {
    run_edit(
        planner,
        reasoner,
        editor,
        &record.input,
        &record.instruction,
        &record.config,
    )
}

/// Whether two records agree on every per-step image and mask hash.
pub fn same_trajectory(a: &RunRecord, b: &RunRecord) -> bool {
    a.complete == b.complete && a.step_hashes() == b.step_hashes()
}

/// Writes `<root>/<run_id>/` with `record.json`, `input.png`, per-step
/// `step<i>_pre.png`, `step<i>_mask.pgm`, `step<i>_post.png` and `final.png`.
/// Returns the directory and the files written.
pub fn persist(record: &RunRecord, root: impl AsRef<Path>) -> Result<(PathBuf, Vec<PathBuf>)> {
    let dir = root.as_ref().join(record.run_id());
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut files = Vec::new();
    let put_image = |name: String, image: &Image, files: &mut Vec<PathBuf>| -> Result<()> {
        let p = dir.join(name);
        write_image(image, &p)?;
        files.push(p);
        Ok(())
    };
    put_image("input.png".into(), &record.input, &mut files)?;
    for s in &record.steps {
        put_image(format!("step{}_pre.png", s.index), &s.pre, &mut files)?;
        put_image(format!("step{}_post.png", s.index), &s.post, &mut files)?;
        let p = dir.join(format!("step{}_mask.pgm", s.index));
        write_mask(&s.mask, &p)?;
        files.push(p);
    }
    put_image("final.png".into(), record.final_image(), &mut files)?;
    let p = dir.join("record.json");
    let text = serde_json::to_string_pretty(&record.summary()).expect("summary serializes");
    std::fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
    files.push(p);
    Ok((dir, files))
}
