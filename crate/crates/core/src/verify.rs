//! Acceptance checks. Each check computes its expectation independently of
//! the code under test (direct formulas, Monte-Carlo estimates, finite
//! differences, closed-form trajectories) and reports pass or fail.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::backends::{PlannerClient, ReasonerClient};
use crate::denoiser::{TinyDenoiser, TEXT_DIM};
use crate::diffusion::{
    analytic_gaussian_eps, cfg_combine, ddim_step, forward_noise, gaussian_latent, sample_dropout,
    AnalyticDenoiser, ConditionSet, DiffusionSchedule, DropoutPolicy, EditWorldParams, Editor,
    GaussianWorld, GuidanceScales, IdentityCodec, LatentCodec, Presence,
};
use crate::embed::HashedTextEmbedder;
use crate::error::Result;
use crate::eval::{sweep_cfg, Embedders, SweepScenario, SweepSettings, REFERENCE_ROWS};
use crate::image::{binarize, composite, mask_iou, split_foreground, Image, Latent, Mask};
use crate::pipeline::{replay, run_edit, same_trajectory, PipelineConfig};
use crate::plan::{Instruction, SubPrompt};
use crate::reasoner::{examples_from_scenes, predict_region, train_toy_reasoner, ToyReasonerModel};
use crate::scene::{generate_scenes, Action, Color, SceneConfig, Shape, ShapeKind, SyntheticScene};

#[derive(Debug, Clone, Serialize)]
pub struct CriterionResult {
    pub id: usize,
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

impl CriterionResult {
    pub fn line(&self) -> String {
        format!(
            "[{}] {:>2} {}: {} ({:.2}s)",
            if self.passed { "PASS" } else { "FAIL" },
            self.id,
            self.name,
            self.detail,
            self.seconds
        )
    }
}

type Check = fn() -> Result<(bool, String)>;

pub const CHECKS: [(usize, &str, Check); 12] = [
    (1, "cfg telescoping", cfg_telescoping),
    (2, "guidance formula oracle", guidance_formula),
    (3, "mask algebra", mask_algebra),
    (4, "ddim inversion", ddim_inversion),
    (
        5,
        "analytic posterior vs monte carlo",
        analytic_vs_monte_carlo,
    ),
    (6, "gradient checks", gradient_checks),
    (7, "dropout frequencies", dropout_frequencies),
    (8, "toy reasoner quality", toy_reasoner_quality),
    (9, "guidance sweep trend", sweep_trend),
    (10, "reference table arithmetic", table_arithmetic),
    (
        11,
        "pipeline determinism and step bound",
        pipeline_determinism,
    ),
    (12, "end-to-end toy edit", end_to_end_edit),
];

/// Runs one check by id; errors count as failures.
pub fn run_check(id: usize) -> Option<CriterionResult> {
    let &(id, name, check) = CHECKS.iter().find(|c| c.0 == id)?;
    let start = Instant::now();
    let (passed, detail) = match check() {
        Ok(r) => r,
        Err(e) => (false, format!("error: {e}")),
    };
    Some(CriterionResult {
        id,
        name,
        passed,
        detail,
        seconds: start.elapsed().as_secs_f64(),
    })
}

pub fn run_all(mut progress: impl FnMut(&CriterionResult)) -> Vec<CriterionResult> {
    CHECKS
        .iter()
        .map(|c| {
            let r = run_check(c.0).expect("listed check");
            progress(&r);
            r
        })
        .collect()
}

fn max_diff(a: &Latent, b: &Latent) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn random_quad(rng: &mut ChaCha8Rng) -> [Latent; 4] {
    let (h, w, c) = (
        rng.gen_range(1..6),
        rng.gen_range(1..6),
        rng.gen_range(1..5),
    );
    std::array::from_fn(|_| gaussian_latent(h, w, c, rng))
}

fn cfg_telescoping() -> Result<(bool, String)> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut e_one, mut e_zero) = (0.0f64, 0.0f64);
    for _ in 0..1000 {
        let [u, f, fb, full] = random_quad(&mut rng);
        let one = cfg_combine(&u, &f, &fb, &full, &GuidanceScales::unit())?;
        let zero = cfg_combine(&u, &f, &fb, &full, &GuidanceScales::new(0.0, 0.0, 0.0)?)?;
        e_one = e_one.max(max_diff(&one, &full));
        e_zero = e_zero.max(max_diff(&zero, &u));
    }
    let secs = start.elapsed().as_secs_f64();
    Ok((
        e_one <= 1e-12 && e_zero <= 1e-12 && secs < 1.0,
        format!("max err (1,1,1) {e_one:.1e}, (0,0,0) {e_zero:.1e}, {secs:.3}s"),
    ))
}

fn guidance_formula() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let [u, f, fb, full] = random_quad(&mut rng);
        let (sf, sb, sp) = (
            rng.gen_range(0.0..8.0),
            rng.gen_range(0.0..8.0),
            rng.gen_range(0.0..8.0),
        );
        let got = cfg_combine(&u, &f, &fb, &full, &GuidanceScales::new(sf, sb, sp)?)?;
        for i in 0..u.len() {
            let (eu, ef, efb, efull) = (u.data()[i], f.data()[i], fb.data()[i], full.data()[i]);
            let direct = eu + sf * (ef - eu) + sb * (efb - ef) + sp * (efull - efb);
            worst = worst.max((got.data()[i] - direct).abs());
        }
    }
    Ok((
        worst <= 1e-12,
        format!("max err {worst:.1e} over 1000 random cases"),
    ))
}

fn mask_algebra() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut bad = 0;
    for _ in 0..10_000 {
        let (h, w) = (rng.gen_range(1..9), rng.gen_range(1..9));
        let ch = if rng.gen_bool(0.5) { 1 } else { 3 };
        let img = Image::new(
            h,
            w,
            ch,
            (0..h * w * ch).map(|_| rng.gen::<f64>()).collect(),
        )?;
        let p = rng.gen::<f64>();
        let mask = Mask::from_fn(h, w, |_, _| rng.gen_bool(p))?;
        let (fg, bg) = split_foreground(&img, &mask)?;
        let back = composite(&fg, &bg, &mask)?;
        let exact = back
            .data()
            .iter()
            .zip(img.data())
            .all(|(a, b)| a.to_bits() == b.to_bits());
        let disjoint = (0..h * w * ch).all(|i| {
            let on = mask.data()[i / ch] == 1;
            if on {
                bg.data()[i] == 0.0
            } else {
                fg.data()[i] == 0.0
            }
        });
        if !(exact && disjoint) {
            bad += 1;
        }
    }
    Ok((bad == 0, format!("{bad} of 10000 random pairs failed")))
}

/// Timesteps ending at 1000: `steps - 1` distinct interior points drawn at
/// random, plus the end point.
fn random_partition(rng: &mut ChaCha8Rng, train_steps: usize, steps: usize) -> Vec<usize> {
    let mut pool: Vec<usize> = (1..train_steps).collect();
    let mut picked = Vec::with_capacity(steps);
    for _ in 0..steps - 1 {
        let i = rng.gen_range(0..pool.len());
        picked.push(pool.swap_remove(i));
    }
    picked.push(train_steps);
    picked.sort_unstable_by(|a, b| b.cmp(a));
    picked
}

fn ddim_inversion() -> Result<(bool, String)> {
    let start = Instant::now();
    let sched = DiffusionSchedule::default();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    let trials = 50;
    for trial in 0..trials {
        let z0 = gaussian_latent(4, 4, 3, &mut rng);
        let eps = gaussian_latent(4, 4, 3, &mut rng);
        let ts = if trial == 0 {
            (1..=100).rev().map(|i| i * 10).collect()
        } else {
            random_partition(&mut rng, 1000, 100)
        };
        let mut z = forward_noise(&z0, ts[0], &eps, &sched)?;
        for (i, &t) in ts.iter().enumerate() {
            let t_prev = ts.get(i + 1).copied().unwrap_or(0);
            // Exact noise: the one that maps z0 to z at this step.
            let ab = sched.alpha_bar(t);
            let exact = z.zip_with(&z0, |zt, x| (zt - ab.sqrt() * x) / (1.0 - ab).sqrt())?;
            z = ddim_step(&z, &exact, t, t_prev, &sched)?;
        }
        worst = worst.max(max_diff(&z, &z0));
    }
    let secs = start.elapsed().as_secs_f64();
    Ok((
        worst <= 1e-10 && secs < 5.0,
        format!("max |z0 - recon| {worst:.1e} over {trials} partitions, {secs:.3}s"),
    ))
}

fn analytic_vs_monte_carlo() -> Result<(bool, String)> {
    let sched = DiffusionSchedule::default();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let samples = 1_000_000;
    let mut worst_z = 0.0f64;
    for _ in 0..20 {
        let mu = rng.gen_range(-1.0..1.0);
        let sigma = rng.gen_range(0.05..1.0);
        let t = rng.gen_range(1..=1000);
        let ab = sched.alpha_bar(t);
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        // A plausible z_t from the marginal.
        let z = a * (mu + sigma * rng.sample::<f64, _>(StandardNormal))
            + b * rng.sample::<f64, _>(StandardNormal);
        let world = GaussianWorld::uniform(Latent::new(1, 1, 1, vec![mu])?, sigma)?;
        let got = analytic_gaussian_eps(
            &Latent::new(1, 1, 1, vec![z])?,
            t,
            &world,
            &ConditionSet::default(),
            &sched,
        )?
        .data()[0];
        // Self-normalized importance sampling of E[eps | z_t] with prior proposals.
        let mut draws = Vec::with_capacity(samples);
        let mut log_w = Vec::with_capacity(samples);
        for _ in 0..samples {
            let x0 = mu + sigma * rng.sample::<f64, _>(StandardNormal);
            let e = (z - a * x0) / b;
            draws.push(e);
            log_w.push(-0.5 * e * e);
        }
        let m = log_w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = log_w.iter().map(|l| (l - m).exp()).collect();
        let sw: f64 = w.iter().sum();
        let est: f64 = w.iter().zip(&draws).map(|(w, e)| w * e).sum::<f64>() / sw;
        let var: f64 = w
            .iter()
            .zip(&draws)
            .map(|(w, e)| w * w * (e - est) * (e - est))
            .sum::<f64>()
            / (sw * sw);
        let se = var.sqrt();
        worst_z = worst_z.max((got - est).abs() / se);
    }
    Ok((
        worst_z <= 3.0,
        format!("worst deviation {worst_z:.2} standard errors over 20 configurations"),
    ))
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs())
}

/// Central differences on 32 random coordinates with a nonzero analytic
/// gradient. Returns the worst relative error.
fn grad_check(
    params: &[f64],
    grad: &[f64],
    seed: u64,
    mut loss_at: impl FnMut(&[f64]) -> Result<f64>,
) -> Result<f64> {
    let live: Vec<usize> = (0..grad.len()).filter(|&i| grad[i].abs() > 1e-7).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let h = 1e-5;
    for _ in 0..32 {
        let i = live[rng.gen_range(0..live.len())];
        let mut p = params.to_vec();
        p[i] = params[i] + h;
        let up = loss_at(&p)?;
        p[i] = params[i] - h;
        let down = loss_at(&p)?;
        worst = worst.max(rel_err(grad[i], (up - down) / (2.0 * h)));
    }
    Ok(worst)
}

fn gradient_checks() -> Result<(bool, String)> {
    let sched = DiffusionSchedule::default();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let model = TinyDenoiser::random(3, 6);
    let z0 = gaussian_latent(6, 5, 3, &mut rng);
    let eps = gaussian_latent(6, 5, 3, &mut rng);
    let text: Vec<f64> = (0..TEXT_DIM).map(|_| rng.sample(StandardNormal)).collect();
    let cond = ConditionSet::full(
        gaussian_latent(6, 5, 3, &mut rng),
        gaussian_latent(6, 5, 3, &mut rng),
        text,
    );
    let (_, grad) = model.training_loss(&z0, &cond, 400, &eps, &sched)?;
    let mut probe = model.clone();
    let den = grad_check(&model.params(), &grad, 61, |p| {
        probe.set_params(p);
        Ok(probe.training_loss(&z0, &cond, 400, &eps, &sched)?.0)
    })?;

    let scenes = generate_scenes(&SceneConfig::default(), 1, 62)?;
    let reasoner = ToyReasonerModel::random(SceneConfig::default().shape_size, 62);
    let example = examples_from_scenes(&reasoner, &scenes)?.swap_remove(0);
    let (_, grad) = reasoner.loss_and_grad(&example)?;
    let mut probe = reasoner.clone();
    let rea = grad_check(&reasoner.params(), &grad, 63, |p| {
        probe.set_params(p);
        probe.loss(&example)
    })?;
    Ok((
        den < 1e-4 && rea < 1e-4,
        format!(
            "worst relative error: denoiser {den:.1e}, reasoner {rea:.1e} (32 coordinates each)"
        ),
    ))
}

fn dropout_frequencies() -> Result<(bool, String)> {
    let policy = DropoutPolicy::default();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let n = 100_000;
    let mut counts = [0usize; 4];
    for _ in 0..n {
        counts[sample_dropout(&policy, rng.gen::<f64>()).index()] += 1;
    }
    let want = [
        (Presence::None, 0.05),
        (Presence::Fg, 0.05),
        (Presence::FgBg, 0.05),
        (Presence::Full, 0.85),
    ];
    let freqs: Vec<f64> = want
        .iter()
        .map(|(p, _)| counts[p.index()] as f64 / n as f64)
        .collect();
    let ok = want
        .iter()
        .zip(&freqs)
        .all(|((_, w), f)| (f - w).abs() <= 0.01);
    Ok((
        ok,
        format!(
            "none {:.4}, fg {:.4}, fg+bg {:.4}, full {:.4}",
            freqs[0], freqs[1], freqs[2], freqs[3]
        ),
    ))
}

fn toy_reasoner_quality() -> Result<(bool, String)> {
    let start = Instant::now();
    let config = SceneConfig::default();
    let train = generate_scenes(&config, 128, 7)?;
    let held_out = generate_scenes(&config, 32, 1007)?;
    let (model, _) = train_toy_reasoner(&train, 200, 0.05, 7, |_, _| {})?;
    let (mut all, mut add) = (Vec::new(), Vec::new());
    for scene in &held_out {
        let req = scene.primary_request();
        let soft = predict_region(&model, &scene.image, &SubPrompt::new(1, &req.prompt))?;
        let truth = scene.region(&req.request)?;
        let iou = mask_iou(&binarize(&soft, 0.5), &truth)?;
        if let Action::AddBeside { .. } = req.request.action {
            // Not an object mask: no shape pixel lies in the region.
            let object = scene.shapes.iter().any(|s| {
                (0..truth.data().len())
                    .any(|i| truth.data()[i] == 1 && s.covers(i / truth.width(), i % truth.width()))
            });
            if !object {
                add.push(iou);
            }
        }
        all.push(iou);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
    let secs = start.elapsed().as_secs_f64();
    Ok((
        mean(&all) >= 0.9 && add.len() >= 8 && mean(&add) >= 0.9 && secs < 120.0,
        format!(
            "held-out IoU {:.3} on {} scenes, add-beside {:.3} on {}, {secs:.1}s",
            mean(&all),
            all.len(),
            mean(&add),
            add.len()
        ),
    ))
}

fn sweep_trend() -> Result<(bool, String)> {
    let start = Instant::now();
    let settings = SweepSettings::default();
    let report = sweep_cfg(
        &SweepScenario::textured(0)?,
        &settings,
        &Embedders::default(),
    )?;
    let secs = start.elapsed().as_secs_f64();
    let (p, a) = (&report.preservation_rank, &report.alignment_rank);
    Ok((
        p.sign() > 0 && a.sign() < 0 && settings.trials >= 100 && secs < 120.0,
        format!(
            "{} points x {} trials, preservation rho {:+.3}, alignment rho {:+.3}, {secs:.1}s",
            report.points.len(),
            report.trials,
            p.rho,
            a.rho
        ),
    ))
}

fn table_arithmetic() -> Result<(bool, String)> {
    let mut worst = 0.0f64;
    for row in &REFERENCE_ROWS {
        let direct = (row.clip_i + row.dino_i + row.clip_t_global + row.clip_t_local) / 4.0;
        worst = worst
            .max((direct - row.total).abs())
            .max((row.recomputed().total - direct).abs());
    }
    Ok((
        worst <= 0.0002 + 1e-12,
        format!(
            "{} rows, worst |mean - printed total| {worst:.5}",
            REFERENCE_ROWS.len()
        ),
    ))
}

fn pipeline_determinism() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let scenes = generate_scenes(&SceneConfig::default(), 50, 11)?;
    let schedule = DiffusionSchedule::default();
    let text = HashedTextEmbedder::new(TEXT_DIM, 0);
    let den = TinyDenoiser::random(3, 11);
    let editor = Editor {
        denoiser: &den,
        codec: &IdentityCodec,
        text_encoder: &text,
        schedule: &schedule,
    };
    let planner = PlannerClient::mock("split")?;
    let (mut over, mut mismatched, mut completed, mut bounded) = (0, 0, 0, 0);
    for scene in scenes {
        let n = rng.gen_range(1..=5);
        let prompts: Vec<&str> = (0..n)
            .map(|_| {
                scene.requests[rng.gen_range(0..scene.requests.len())]
                    .prompt
                    .as_str()
            })
            .collect();
        let instr = Instruction::new(prompts.join("; "), "")?;
        let cfg = PipelineConfig {
            steps: 10,
            seed: rng.gen_range(0..1000),
            ..PipelineConfig::default()
        };
        let reasoner = ReasonerClient::oracle(scene.clone());
        let record = match run_edit(&planner, &reasoner, &editor, &scene.image, &instr, &cfg) {
            Ok(r) => r,
            Err(f) => {
                if f.record.steps.len() > cfg.max_steps {
                    over += 1;
                }
                bounded += 1;
                continue;
            }
        };
        completed += 1;
        if record.steps.len() > cfg.max_steps {
            over += 1;
        }
        let again = replay(&record, &planner, &reasoner, &editor).map_err(|f| f.error)?;
        if !same_trajectory(&record, &again) {
            mismatched += 1;
        }
    }
    Ok((
        over == 0 && mismatched == 0 && completed > 0,
        format!("{completed} completed, {bounded} rejected, {over} over K, {mismatched} replay mismatches"),
    ))
}

fn end_to_end_edit() -> Result<(bool, String)> {
    let start = Instant::now();
    let config = SceneConfig::default();
    let shape = |kind, color, top, left| Shape {
        kind,
        color,
        top,
        left,
        size: config.shape_size,
    };
    let scene = SyntheticScene::from_shapes(
        config,
        vec![
            shape(ShapeKind::Square, Color::Blue, 3, 2),
            shape(ShapeKind::Circle, Color::Green, 9, 9),
            shape(ShapeKind::Triangle, Color::Yellow, 2, 10),
        ],
    )?;
    let instruction = "make the square red";
    let mask = scene.region_for_prompt(instruction)?;
    let codec = IdentityCodec;
    let mut target = scene.image.clone();
    for r in 0..target.height() {
        for c in 0..target.width() {
            if mask.get(r, c) {
                target.set_pixel(r, c, &Color::Red.rgb());
            }
        }
    }
    let schedule = DiffusionSchedule::default();
    let world = GaussianWorld::for_edit(
        &codec.encode(&scene.image)?,
        &mask,
        &codec.encode(&target)?,
        EditWorldParams {
            text_response: 1.0,
            sigma: 0.01,
            ..EditWorldParams::default()
        },
    )?;
    let den = AnalyticDenoiser {
        world,
        schedule: schedule.clone(),
    };
    let text = HashedTextEmbedder::new(TEXT_DIM, 0);
    let editor = Editor {
        denoiser: &den,
        codec: &codec,
        text_encoder: &text,
        schedule: &schedule,
    };
    let record = run_edit(
        &PlannerClient::mock("echo")?,
        &ReasonerClient::oracle(scene.clone()),
        &editor,
        &scene.image,
        &Instruction::new(instruction, "")?,
        &PipelineConfig::default(),
    )
    .map_err(|f| f.error)?;
    let out = record.final_image();
    let red = out.region_mean(Some(&mask)).expect("nonempty region")[0];
    let outside = mask.invert();
    let (mut diff, mut n) = (0.0, 0usize);
    for r in 0..out.height() {
        for c in 0..out.width() {
            if outside.get(r, c) {
                for k in 0..3 {
                    diff += (out.pixel(r, c)[k] - scene.image.pixel(r, c)[k]).abs();
                    n += 1;
                }
            }
        }
    }
    let diff = diff / n as f64;
    let secs = start.elapsed().as_secs_f64();
    Ok((
        red >= 0.8 && diff <= 0.05 && secs < 30.0,
        format!("masked red mean {red:.3}, unmasked mean abs diff {diff:.4}, {secs:.2}s"),
    ))
}
