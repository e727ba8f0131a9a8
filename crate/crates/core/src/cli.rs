//! Command-line front end. Every subcommand writes under the output
//! directory, echoes its effective settings to `config.json` there and
//! prints a JSON manifest of the files it produced.
//!
//! Exit codes: 0 ok, 1 validation or parse error, 2 backend error,
//! 3 numeric or training error, 4 acceptance failure.

use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use crate::backends::{PlannerClient, ReasonerClient};
use crate::denoiser::{train_denoiser, DenoiserExample, TinyDenoiser, TEXT_DIM};
use crate::diffusion::{
    ConditionSet, Denoiser, DiffusionSchedule, DropoutPolicy, Editor, IdentityCodec, LatentCodec,
    ReconstructionDenoiser,
};
use crate::embed::{HashedTextEmbedder, TextEmbedder};
use crate::error::{Error, Result};
use crate::eval::{
    load_manifest, metric_report, parse_scale_range, sweep_cfg, Embedders, MetricReport,
    SweepScenario, SweepSettings,
};
use crate::image::{split_foreground, Image};
use crate::io::{read_image, read_mask, write_image, write_mask};
use crate::pipeline::{persist, run_edit, PipelineConfig, RunRecord};
use crate::plan::{
    build_planner_prompt, serialize_plan, Instruction, PlannerPromptConfig, SubPrompt,
};
use crate::reasoner::train_toy_reasoner;
use crate::scene::{generate_scenes, SceneConfig};

/// Seed of the hashed text encoder shared by training and editing.
pub const TEXT_ENCODER_SEED: u64 = 0;

#[derive(Parser, Debug)]
#[command(
    name = "mcot",
    version,
    about = "Planned, region-aware image editing at desk scale"
)]
struct Cli {
    /// Seed for every random choice [default: 42, or the config file's seed]
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory
    #[arg(long, global = true, env = "MCOT_OUT", default_value = "mcot-out")]
    out: PathBuf,
    /// JSON file with pipeline settings; flags override it
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Print one JSON progress line per epoch or step on stderr
    #[arg(long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate synthetic scenes with their primary requests
    GenScenes {
        #[arg(long, default_value_t = 16)]
        count: usize,
    },
    /// Train the toy region reasoner on generated scenes
    TrainReasoner {
        #[arg(long, default_value_t = 128)]
        scenes: usize,
        #[arg(long, default_value_t = 200)]
        epochs: usize,
        #[arg(long, default_value_t = 0.05)]
        lr: f64,
    },
    /// Train the tiny conditional denoiser on generated scene edits
    TrainDenoiser {
        #[arg(long, default_value_t = 32)]
        scenes: usize,
        #[arg(long, default_value_t = 20)]
        epochs: usize,
        #[arg(long, default_value_t = 0.002)]
        lr: f64,
    },
    /// Ask the planner for sub-prompts
    Plan {
        #[arg(long)]
        instruction: String,
        #[arg(long, default_value = "")]
        description: String,
        /// Maximum number of sub-prompts [default: 3, or the config file's K]
        #[arg(long)]
        k: Option<usize>,
        #[command(flatten)]
        planner: PlannerArgs,
    },
    /// Ask the reasoner for the region of one sub-prompt
    Reason {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        prompt: String,
        #[command(flatten)]
        reasoner: ReasonerArgs,
        /// Binarization threshold [default: 0.5, or the config file's]
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Plan, reason and edit one image
    Run {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        instruction: String,
        #[arg(long, default_value = "")]
        description: String,
        #[command(flatten)]
        pipeline: PipelineArgs,
    },
    /// Run the pipeline over a dataset manifest and score every output
    Eval {
        #[arg(long)]
        manifest: PathBuf,
        #[command(flatten)]
        pipeline: PipelineArgs,
    },
    /// Sweep the image guidance scales with the text scale fixed
    SweepCfg {
        /// Inclusive range start:end:step for s_f = s_b
        #[arg(long, default_value = "1.0:2.0:0.2")]
        scales: String,
        #[arg(long, default_value_t = 7.5)]
        text_scale: f64,
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = 100)]
        steps: usize,
    },
    /// Run the acceptance checks
    Verify,
}

#[derive(Args, Debug, Clone)]
struct PlannerArgs {
    /// mock:<demo|echo|split|empty> or an http(s) base URL
    #[arg(long, default_value = "mock:echo")]
    planner: String,
    /// Backend timeout in seconds
    #[arg(long, default_value_t = 30.0)]
    timeout: f64,
    /// Extra attempts on transport errors and 5xx answers
    #[arg(long, default_value_t = 2)]
    retries: u32,
}

#[derive(Args, Debug, Clone)]
struct ReasonerArgs {
    /// full, toy:<weights>, oracle:<scene.json> or an http(s) base URL
    #[arg(long, default_value = "full")]
    reasoner: String,
}

#[derive(Args, Debug, Clone)]
struct PipelineArgs {
    #[command(flatten)]
    planner: PlannerArgs,
    #[command(flatten)]
    reasoner: ReasonerArgs,
    /// reconstruction or tiny:<weights>
    #[arg(long, default_value = "reconstruction")]
    denoiser: String,
    /// Maximum number of sub-prompts [default: 3]
    #[arg(long)]
    k: Option<usize>,
    /// DDIM steps per edit [default: 100]
    #[arg(long)]
    steps: Option<usize>,
    /// Foreground image guidance s_f [default: 1.5]
    #[arg(long)]
    fg_scale: Option<f64>,
    /// Background image guidance s_b [default: 1.5]
    #[arg(long)]
    bg_scale: Option<f64>,
    /// Text guidance s_p [default: 7.5]
    #[arg(long)]
    text_scale: Option<f64>,
    /// Mask binarization threshold [default: 0.5]
    #[arg(long)]
    threshold: Option<f64>,
    /// Reason on the input image at every step instead of the latest one
    #[arg(long)]
    reason_on_input: bool,
}

struct Ctx {
    seed: Option<u64>,
    out: PathBuf,
    config: Option<PathBuf>,
    verbose: bool,
    files: Vec<PathBuf>,
}

impl Ctx {
    fn progress(&self, value: Value) {
        if self.verbose {
            eprintln!("{value}");
        }
    }

    fn dir(&self) -> Result<&Path> {
        std::fs::create_dir_all(&self.out).map_err(|e| Error::io(&self.out, e))?;
        Ok(&self.out)
    }

    fn write(&mut self, name: &str, contents: impl AsRef<[u8]>) -> Result<PathBuf> {
        let p = self.dir()?.join(name);
        std::fs::write(&p, contents).map_err(|e| Error::io(&p, e))?;
        self.files.push(p.clone());
        Ok(p)
    }

    fn write_json(&mut self, name: &str, value: &Value) -> Result<PathBuf> {
        self.write(
            name,
            serde_json::to_string_pretty(value).expect("json values serialize") + "\n",
        )
    }

    fn seed(&self) -> u64 {
        self.seed.unwrap_or(42)
    }

    fn pipeline_config(&self, a: &PipelineArgs) -> Result<PipelineConfig> {
        let mut cfg = self.file_config()?;
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(k) = a.k {
            cfg.max_steps = k;
        }
        if let Some(s) = a.steps {
            cfg.steps = s;
        }
        if let Some(v) = a.fg_scale {
            cfg.scales.fg = v;
        }
        if let Some(v) = a.bg_scale {
            cfg.scales.bg = v;
        }
        if let Some(v) = a.text_scale {
            cfg.scales.text = v;
        }
        if let Some(v) = a.threshold {
            cfg.threshold = v;
        }
        if a.reason_on_input {
            cfg.reason_per_step = false;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn file_config(&self) -> Result<PipelineConfig> {
        match &self.config {
            None => Ok(PipelineConfig::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                serde_json::from_str(&text)
                    .map_err(|e| Error::Parse(format!("{}: {e}", p.display())))
            }
        }
    }
}

fn timeout(secs: f64) -> Result<Duration> {
    Duration::try_from_secs_f64(secs)
        .map_err(|_| Error::validation(format!("invalid timeout {secs}")))
}

fn planner(a: &PlannerArgs, verbose: bool) -> Result<PlannerClient> {
    Ok(PlannerClient::new(&a.planner, timeout(a.timeout)?, a.retries)?.with_verbose(verbose))
}

fn reasoner(a: &ReasonerArgs, p: &PlannerArgs, verbose: bool) -> Result<ReasonerClient> {
    Ok(ReasonerClient::new(&a.reasoner, timeout(p.timeout)?)?
        .with_retries(p.retries)
        .with_verbose(verbose))
}

/// Denoiser plus the schedule it was trained with.
fn denoiser(spec: &str) -> Result<(Box<dyn Denoiser>, DiffusionSchedule)> {
    if spec == "reconstruction" {
        let schedule = DiffusionSchedule::default();
        let d = ReconstructionDenoiser {
            null_value: 0.5,
            sigma: 0.01,
            schedule: schedule.clone(),
        };
        Ok((Box::new(d), schedule))
    } else if let Some(path) = spec.strip_prefix("tiny:") {
        let (model, schedule) = TinyDenoiser::load(path)?;
        Ok((Box::new(model), schedule))
    } else {
        Err(Error::validation(format!(
            "unknown denoiser `{spec}` (reconstruction or tiny:<weights>)"
        )))
    }
}

fn text_encoder() -> HashedTextEmbedder {
    HashedTextEmbedder::new(TEXT_DIM, TEXT_ENCODER_SEED)
}

fn run_one(
    ctx: &Ctx,
    a: &PipelineArgs,
    cfg: &PipelineConfig,
    image: &Image,
    instr: &Instruction,
) -> Result<std::result::Result<RunRecord, Box<crate::pipeline::RunFailure>>> {
    let planner = planner(&a.planner, ctx.verbose)?;
    let reasoner = reasoner(&a.reasoner, &a.planner, ctx.verbose)?;
    let (den, schedule) = denoiser(&a.denoiser)?;
    let text = text_encoder();
    let editor = Editor {
        denoiser: den.as_ref(),
        codec: &IdentityCodec,
        text_encoder: &text,
        schedule: &schedule,
    };
    let result = run_edit(&planner, &reasoner, &editor, image, instr, cfg);
    if let Ok(r) = &result {
        for s in &r.steps {
            ctx.progress(json!({"event": "step", "index": s.index, "sub_prompt": s.sub_prompt.text, "wall_ms": s.wall_ms}));
        }
    }
    Ok(result)
}

fn execute(command: Command, ctx: &mut Ctx) -> Result<Value> {
    match command {
        Command::GenScenes { count } => {
            let seed = ctx.seed();
            ctx.write_json("config.json", &json!({"command": "gen-scenes", "count": count, "seed": seed, "scene": SceneConfig::default()}))?;
            let scenes = generate_scenes(&SceneConfig::default(), count, seed)?;
            let dir = ctx.dir()?.to_path_buf();
            let mut index = Vec::new();
            for (i, s) in scenes.iter().enumerate() {
                let (json_p, png_p, mask_p) = (
                    dir.join(format!("scene{i:03}.json")),
                    dir.join(format!("scene{i:03}.png")),
                    dir.join(format!("scene{i:03}_mask.pgm")),
                );
                s.save(&json_p)?;
                write_image(&s.image, &png_p)?;
                write_mask(&s.region(&s.primary_request().request)?, &mask_p)?;
                index.push(json!({"scene": json_p, "image": png_p, "mask": mask_p, "prompt": s.primary_request().prompt}));
                ctx.files.extend([json_p, png_p, mask_p]);
            }
            ctx.write_json("scenes.json", &Value::Array(index))?;
            Ok(json!({}))
        }
        Command::TrainReasoner { scenes, epochs, lr } => {
            let seed = ctx.seed();
            ctx.write_json(
                "config.json",
                &json!({"command": "train-reasoner", "scenes": scenes, "epochs": epochs, "lr": lr, "seed": seed}),
            )?;
            let data = generate_scenes(&SceneConfig::default(), scenes, seed)?;
            let (model, report) = train_toy_reasoner(&data, epochs, lr, seed, |epoch, loss| {
                ctx.progress(json!({"event": "epoch", "epoch": epoch, "bce": loss}));
            })?;
            let p = ctx.dir()?.join("reasoner.weights");
            model.save(&p)?;
            ctx.files.push(p);
            ctx.write_json(
                "report.json",
                &serde_json::to_value(&report).expect("report serializes"),
            )?;
            Ok(json!({"final_loss": report.final_loss}))
        }
        Command::TrainDenoiser { scenes, epochs, lr } => {
            let seed = ctx.seed();
            ctx.write_json(
                "config.json",
                &json!({"command": "train-denoiser", "scenes": scenes, "epochs": epochs, "lr": lr, "seed": seed}),
            )?;
            let text = text_encoder();
            let codec = IdentityCodec;
            let mut examples = Vec::new();
            for s in generate_scenes(&SceneConfig::default(), scenes, seed)? {
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
                seed,
                &DropoutPolicy::default(),
                &schedule,
                |epoch, loss| {
                    ctx.progress(json!({"event": "epoch", "epoch": epoch, "mse": loss}));
                },
            )?;
            let p = ctx.dir()?.join("denoiser.weights");
            model.save(&p, &schedule)?;
            ctx.files.push(p);
            ctx.write_json(
                "report.json",
                &serde_json::to_value(&report).expect("report serializes"),
            )?;
            Ok(json!({"final_loss": report.loss_history.last()}))
        }
        Command::Plan {
            instruction,
            description,
            k,
            planner: pa,
        } => {
            let k = match k {
                Some(k) => k,
                None => ctx.file_config()?.max_steps,
            };
            ctx.write_json("config.json", &json!({"command": "plan", "K": k, "planner": pa.planner, "instruction": instruction}))?;
            let instr = Instruction::new(instruction, description)?;
            let prompt = build_planner_prompt(&instr, &PlannerPromptConfig::with_max_steps(k))?;
            let plan = planner(&pa, ctx.verbose)?.request_plan(&prompt, k)?;
            let text = serialize_plan(&plan);
            ctx.write("planner_prompt.txt", &prompt)?;
            ctx.write("plan.json", &text)?;
            Ok(
                json!({"plan": serde_json::from_str::<Value>(&text).expect("plan serializes to json")}),
            )
        }
        Command::Reason {
            image,
            prompt,
            reasoner: ra,
            threshold,
        } => {
            let threshold = match threshold {
                Some(t) => t,
                None => ctx.file_config()?.threshold,
            };
            ctx.write_json(
                "config.json",
                &json!({"command": "reason", "image": image, "prompt": prompt, "reasoner": ra.reasoner, "threshold": threshold}),
            )?;
            let pa = PlannerArgs {
                planner: String::new(),
                timeout: 30.0,
                retries: 2,
            };
            let img = read_image(&image)?;
            let mask = reasoner(&ra, &pa, ctx.verbose)?.request_region(
                &img,
                &SubPrompt::new(1, prompt),
                threshold,
            )?;
            let p = ctx.dir()?.join("mask.pgm");
            write_mask(&mask, &p)?;
            ctx.files.push(p);
            Ok(json!({"mask_pixels": mask.count()}))
        }
        Command::Run {
            image,
            instruction,
            description,
            pipeline,
        } => {
            let cfg = ctx.pipeline_config(&pipeline)?;
            ctx.write_json(
                "config.json",
                &serde_json::to_value(&cfg).expect("config serializes"),
            )?;
            let img = read_image(&image)?;
            let instr = Instruction::new(instruction, description)?;
            let (record, failure) = match run_one(ctx, &pipeline, &cfg, &img, &instr)? {
                Ok(r) => (r, None),
                Err(f) => (f.record, Some(f.error)),
            };
            let (dir, files) = persist(&record, &ctx.out)?;
            ctx.files.extend(files);
            match failure {
                Some(e) => Err(e),
                None => Ok(
                    json!({"run_dir": dir, "run_id": record.run_id(), "steps": record.steps.len()}),
                ),
            }
        }
        Command::Eval { manifest, pipeline } => {
            let cfg = ctx.pipeline_config(&pipeline)?;
            ctx.write_json(
                "config.json",
                &serde_json::to_value(&cfg).expect("config serializes"),
            )?;
            let m = load_manifest(&manifest)?;
            let embedders = Embedders::desk(cfg.seed);
            let mut rows = Vec::new();
            let mut csv = format!("index,run_id,{}\n", MetricReport::CSV_HEADER);
            for (i, e) in m.entries.iter().enumerate() {
                let img = read_image(&e.input)?;
                let gt = read_image(&e.ground_truth)?;
                let mask = e.mask.as_ref().map(read_mask).transpose()?;
                let instr = Instruction::new(e.instruction.clone(), e.global_description.clone())?;
                let record = run_one(ctx, &pipeline, &cfg, &img, &instr)?.map_err(|f| f.error)?;
                let (_, files) = persist(&record, ctx.dir()?.join("runs"))?;
                ctx.files.extend(files);
                let report = metric_report(
                    record.final_image(),
                    &gt,
                    &e.global_description,
                    &e.local_description,
                    mask.as_ref(),
                    &embedders,
                )?;
                ctx.progress(json!({"event": "eval", "index": i, "total": report.total}));
                csv.push_str(&format!("{i},{},{}\n", record.run_id(), report.csv_row()));
                rows.push(json!({"index": i, "run_id": record.run_id(), "metrics": report}));
            }
            let n = rows.len().max(1) as f64;
            let mean = |f: fn(&MetricReport) -> f64| -> f64 {
                rows.iter()
                    .map(|r| {
                        f(&serde_json::from_value(r["metrics"].clone())
                            .expect("metric rows round-trip"))
                    })
                    .sum::<f64>()
                    / n
            };
            let avg = MetricReport::from_scores(
                mean(|r| r.clip_i),
                mean(|r| r.dino_i),
                mean(|r| r.clip_t_global),
                mean(|r| r.clip_t_local),
            );
            let tags = embedders.tags();
            ctx.write_json(
                "metrics.json",
                &json!({"embedders": tags, "rows": rows, "mean": avg}),
            )?;
            ctx.write("metrics.csv", &csv)?;
            Ok(json!({"mean": avg}))
        }
        Command::SweepCfg {
            scales,
            text_scale,
            trials,
            steps,
        } => {
            let settings = SweepSettings {
                scales: parse_scale_range(&scales)?,
                text_scale,
                trials,
                steps,
                seed: ctx.seed(),
            };
            ctx.write_json(
                "config.json",
                &serde_json::to_value(&settings).expect("settings serialize"),
            )?;
            let report = sweep_cfg(
                &SweepScenario::textured(settings.seed)?,
                &settings,
                &Embedders::desk(settings.seed),
            )?;
            ctx.write_json(
                "sweep.json",
                &serde_json::to_value(&report).expect("report serializes"),
            )?;
            ctx.write("sweep.csv", report.to_csv())?;
            ctx.write("sweep.svg", report.to_svg())?;
            Ok(json!({
                "preservation_rho": report.preservation_rank.rho,
                "alignment_rho": report.alignment_rank.rho,
            }))
        }
        Command::Verify => {
            ctx.write_json("config.json", &json!({"command": "verify"}))?;
            let verbose = ctx.verbose;
            let results = crate::verify::run_all(|r| {
                if verbose {
                    eprintln!("{}", serde_json::to_string(r).expect("results serialize"));
                }
            });
            for r in &results {
                println!("{}", r.line());
            }
            ctx.write_json(
                "verify.json",
                &serde_json::to_value(&results).expect("results serialize"),
            )?;
            let failed = results.iter().filter(|r| !r.passed).count();
            Ok(json!({"passed": results.len() - failed, "failed": failed}))
        }
    }
}

/// Parses `argv` (without the program name), runs the subcommand and
/// returns the process exit code.
pub fn dispatch(argv: impl IntoIterator<Item = String>) -> i32 {
    let cli = match Cli::try_parse_from(std::iter::once("mcot".to_string()).chain(argv)) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let is_verify = matches!(cli.command, Command::Verify);
    let mut ctx = Ctx {
        seed: cli.seed,
        out: cli.out,
        config: cli.config,
        verbose: cli.verbose,
        files: Vec::new(),
    };
    let outcome = execute(cli.command, &mut ctx);
    let files: Vec<String> = ctx.files.iter().map(|p| p.display().to_string()).collect();
    match outcome {
        Ok(extra) => {
            let mut manifest = json!({"status": "ok", "out": ctx.out, "files": files});
            if let (Value::Object(m), Value::Object(x)) = (&mut manifest, extra) {
                m.extend(x);
            }
            if is_verify && manifest["failed"].as_u64().unwrap_or(0) > 0 {
                manifest["status"] = json!("failed");
                println!("{manifest}");
                return 4;
            }
            println!("{manifest}");
            0
        }
        Err(e) => {
            eprintln!(
                "{}",
                json!({"status": "error", "error": e.to_string(), "files": files})
            );
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn argv(items: &[&str]) -> Vec<String> {
        items.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn unknown_subcommand_is_usage_error() {
        assert_eq!(dispatch(argv(&["frobnicate"])), 1);
        assert_eq!(dispatch(argv(&[])), 1);
    }

    #[test]
    fn help_succeeds() {
        assert_eq!(dispatch(argv(&["run", "--help"])), 0);
    }

    #[test]
    fn plan_writes_demo_plan() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().to_str().unwrap();
        let code = dispatch(argv(&[
            "plan",
            "--instruction",
            "make it dramatic",
            "--k",
            "3",
            "--planner",
            "mock:demo",
            "--out",
            out,
        ]));
        assert_eq!(code, 0);
        let plan = std::fs::read_to_string(dir.path().join("plan.json")).unwrap();
        let waves = plan.find("add turbulent waves").unwrap();
        assert!(plan[waves..].contains("storm clouds"));
        assert!(dir.path().join("config.json").is_file());
    }

    #[test]
    fn bad_planner_and_plan_bounds_are_validation_errors() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().to_str().unwrap();
        assert_eq!(
            dispatch(argv(&[
                "plan",
                "--instruction",
                "x",
                "--planner",
                "ftp://x",
                "--out",
                out
            ])),
            1
        );
        assert_eq!(
            dispatch(argv(&[
                "plan",
                "--instruction",
                "a; b; c",
                "--k",
                "2",
                "--planner",
                "mock:split",
                "--out",
                out
            ])),
            1
        );
    }

    #[test]
    fn unreachable_planner_is_backend_error() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().to_str().unwrap();
        let code = dispatch(argv(&[
            "plan",
            "--instruction",
            "x",
            "--planner",
            "http://127.0.0.1:9",
            "--retries",
            "0",
            "--timeout",
            "1",
            "--out",
            out,
        ]));
        assert_eq!(code, 2);
    }

    #[test]
    fn run_with_config_file_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let img = Image::new(8, 8, 3, (0..192).map(|i| (i % 11) as f64 / 10.0).collect()).unwrap();
        let img_p = dir.path().join("x.png");
        write_image(&img, &img_p).unwrap();
        let cfg_p = dir.path().join("c.json");
        std::fs::write(&cfg_p, r#"{"K": 2, "steps": 5, "seed": 9}"#).unwrap();
        let mut ids = Vec::new();
        for sub in ["a", "b"] {
            let out = dir.path().join(sub);
            let code = dispatch(argv(&[
                "run",
                "--image",
                img_p.to_str().unwrap(),
                "--instruction",
                "make it dramatic",
                "--config",
                cfg_p.to_str().unwrap(),
                "--out",
                out.to_str().unwrap(),
            ]));
            assert_eq!(code, 0);
            let echoed: PipelineConfig =
                serde_json::from_str(&std::fs::read_to_string(out.join("config.json")).unwrap())
                    .unwrap();
            assert_eq!((echoed.max_steps, echoed.steps, echoed.seed), (2, 5, 9));
            let runs: Vec<_> = std::fs::read_dir(&out)
                .unwrap()
                .filter_map(|e| e.ok())
                .filter(|e| e.path().is_dir())
                .collect();
            assert_eq!(runs.len(), 1);
            ids.push(runs[0].file_name());
            let final_png = std::fs::read(runs[0].path().join("final.png")).unwrap();
            ids.push(final_png.len().to_string().into());
        }
        assert_eq!(ids[0], ids[2]);
        assert_eq!(ids[1], ids[3]);
    }

    #[test]
    fn unknown_config_field_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let cfg_p = dir.path().join("c.json");
        std::fs::write(&cfg_p, r#"{"K": 2, "bogus": 1}"#).unwrap();
        let img_p = dir.path().join("x.png");
        write_image(&Image::filled(4, 4, 3, 0.2).unwrap(), &img_p).unwrap();
        let code = dispatch(argv(&[
            "run",
            "--image",
            img_p.to_str().unwrap(),
            "--instruction",
            "x",
            "--config",
            cfg_p.to_str().unwrap(),
            "--out",
            dir.path().to_str().unwrap(),
        ]));
        assert_eq!(code, 1);
    }
}
