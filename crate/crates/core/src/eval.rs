//! Embedding-based edit metrics, the reference table rows, the guidance
//! sweep harness and dataset manifests.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{
    edit_sample, AnalyticDenoiser, DiffusionSchedule, EditWorldParams, GaussianWorld,
    GuidanceScales, IdentityCodec, LatentCodec,
};
use crate::embed::{
    cosine, ColorJointSpace, HashedTextEmbedder, ImageEmbedder, RandomProjectionEmbedder, EMBED_DIM,
};
use crate::error::{Error, Result};
use crate::image::{Image, Mask};
use crate::plan::SubPrompt;

/// One row of metric scores. `total` is the plain mean of the other four.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub clip_i: f64,
    pub dino_i: f64,
    pub clip_t_global: f64,
    pub clip_t_local: f64,
    pub total: f64,
}

impl MetricReport {
    pub fn from_scores(clip_i: f64, dino_i: f64, clip_t_global: f64, clip_t_local: f64) -> Self {
        Self {
            clip_i,
            dino_i,
            clip_t_global,
            clip_t_local,
            total: (clip_i + dino_i + clip_t_global + clip_t_local) / 4.0,
        }
    }

    pub const CSV_HEADER: &'static str = "clip_i,dino_i,clip_t_global,clip_t_local,total";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.clip_i, self.dino_i, self.clip_t_global, self.clip_t_local, self.total
        )
    }
}

/// Two image towers plus a joint image/text space.
pub struct Embedders {
    pub clip: Box<dyn ImageEmbedder>,
    pub dino: Box<dyn ImageEmbedder>,
    pub joint: ColorJointSpace,
}

impl Embedders {
    /// Seeded random projections for both towers (distinct seeds) and the
    /// color joint space.
    pub fn desk(seed: u64) -> Self {
        Self {
            clip: Box::new(RandomProjectionEmbedder::new(seed)),
            dino: Box::new(RandomProjectionEmbedder::new(seed.wrapping_add(1))),
            joint: ColorJointSpace::new(seed.wrapping_add(2)),
        }
    }

    pub fn tags(&self) -> [String; 3] {
        [self.clip.tag(), self.dino.tag(), self.joint.tag()]
    }
}

impl Default for Embedders {
    fn default() -> Self {
        Self::desk(42)
    }
}

/// Scores `output` against the ground truth and both descriptions. The local
/// description is scored on the masked region only; without a mask it falls
/// back to the whole image.
pub fn metric_report(
    output: &Image,
    gt: &Image,
    global_desc: &str,
    local_desc: &str,
    local_mask: Option<&Mask>,
    embedders: &Embedders,
) -> Result<MetricReport> {
    if output.height() != gt.height() || output.width() != gt.width() {
        return Err(Error::shape("output and ground truth differ in size"));
    }
    if let Some(m) = local_mask {
        if !output.same_size(m) {
            return Err(Error::shape("local mask does not match the output"));
        }
    }
    let clip_i = cosine(&embedders.clip.embed(output)?, &embedders.clip.embed(gt)?)?;
    let dino_i = cosine(&embedders.dino.embed(output)?, &embedders.dino.embed(gt)?)?;
    let j = &embedders.joint;
    let clip_t_global = cosine(
        &j.embed_region(output, None)?,
        &j.embed_description(global_desc)?,
    )?;
    let clip_t_local = cosine(
        &j.embed_region(output, local_mask)?,
        &j.embed_description(local_desc)?,
    )?;
    Ok(MetricReport::from_scores(
        clip_i,
        dino_i,
        clip_t_global,
        clip_t_local,
    ))
}

/// A published comparison row: four scores and the printed total.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ReferenceRow {
    pub method: &'static str,
    pub total: f64,
    pub clip_i: f64,
    pub dino_i: f64,
    pub clip_t_global: f64,
    pub clip_t_local: f64,
}

impl ReferenceRow {
    pub fn recomputed(&self) -> MetricReport {
        MetricReport::from_scores(
            self.clip_i,
            self.dino_i,
            self.clip_t_global,
            self.clip_t_local,
        )
    }
}

const fn row(method: &'static str, total: f64, s: [f64; 4]) -> ReferenceRow {
    ReferenceRow {
        method,
        total,
        clip_i: s[0],
        dino_i: s[1],
        clip_t_global: s[2],
        clip_t_local: s[3],
    }
}

pub const REFERENCE_ROWS: [ReferenceRow; 6] = [
    row("InstructPix2Pix", 0.5457, [0.8595, 0.7501, 0.2942, 0.2791]),
    row(
        "InstructDiffusion",
        0.5754,
        [0.8980, 0.8226, 0.2997, 0.2814],
    ),
    row("MagicBrush", 0.5853, [0.9080, 0.8443, 0.3035, 0.2855]),
    row("HIVE", 0.5493, [0.8599, 0.7681, 0.2928, 0.2762]),
    row(
        "Ours w/o planning",
        0.5881,
        [0.9117, 0.8554, 0.3026, 0.2826],
    ),
    row("Ours", 0.5904, [0.9172, 0.8658, 0.2995, 0.2789]),
];

/// Spearman correlation with average ranks for ties. `None` when either side
/// has no rank variance or the lengths differ.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = avg;
        }
        i = j + 1;
    }
    out
}

/// Everything a guidance sweep edits: an input, its region, the target
/// color for the region and the world knobs.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepScenario {
    pub input: Image,
    pub mask: Mask,
    pub target: [f64; 3],
    pub prompt: String,
    pub world: EditWorldParams,
}

impl SweepScenario {
    /// 16x16 textured input with a bluish center square, asked to turn red.
    /// The text branch responds weakly inside the region and leaks a little
    /// tint outside it, so raising the image scales trades alignment for
    /// preservation.
    pub fn textured(seed: u64) -> Result<Self> {
        let side = 16;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mask = Mask::from_fn(side, side, |r, c| {
            (4..12).contains(&r) && (4..12).contains(&c)
        })?;
        let mut data = Vec::with_capacity(side * side * 3);
        for r in 0..side {
            for c in 0..side {
                let base = if mask.get(r, c) {
                    [0.35, 0.5, 0.65]
                } else {
                    [0.5; 3]
                };
                let spread = if mask.get(r, c) { 0.1 } else { 0.2 };
                for b in base {
                    data.push(b + spread * rng.gen_range(-1.0..1.0));
                }
            }
        }
        Ok(Self {
            input: Image::new(side, side, 3, data)?,
            mask,
            target: [1.0, 0.0, 0.0],
            prompt: "make the square red".into(),
            world: EditWorldParams {
                null_value: 0.5,
                text_response: 0.1,
                text_leak: 0.02,
                sigma: 0.05,
            },
        })
    }

    pub fn gaussian_world(&self) -> Result<GaussianWorld> {
        let codec = IdentityCodec;
        let x = codec.encode(&self.input)?;
        let mut target = self.input.clone();
        for r in 0..target.height() {
            for c in 0..target.width() {
                if self.mask.get(r, c) {
                    target.set_pixel(r, c, &self.target);
                }
            }
        }
        GaussianWorld::for_edit(&x, &self.mask, &codec.encode(&target)?, self.world)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSettings {
    /// Scales used for both image guidance terms.
    pub scales: Vec<f64>,
    pub text_scale: f64,
    pub trials: usize,
    pub steps: usize,
    pub seed: u64,
}

impl Default for SweepSettings {
    fn default() -> Self {
        Self {
            scales: vec![1.0, 1.2, 1.4, 1.6, 1.8, 2.0],
            text_scale: 7.5,
            trials: 100,
            steps: 100,
            seed: 42,
        }
    }
}

/// Parses `start:end:step` into an inclusive list of scales.
pub fn parse_scale_range(spec: &str) -> Result<Vec<f64>> {
    let parts: Vec<&str> = spec.split(':').collect();
    let bad = || Error::Parse(format!("scale range must be start:end:step, got {spec:?}"));
    if parts.len() != 3 {
        return Err(bad());
    }
    let nums: Vec<f64> = parts
        .iter()
        .map(|p| p.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| bad())?;
    let (start, end, step) = (nums[0], nums[1], nums[2]);
    if step.is_nan() || step <= 0.0 || end < start || !start.is_finite() || !end.is_finite() {
        return Err(bad());
    }
    let n = ((end - start) / step + 1e-9).floor() as usize;
    Ok((0..=n)
        .map(|i| start + step * i as f64)
        .map(|v| (v * 1e9).round() / 1e9)
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub scale: f64,
    pub preservation: f64,
    pub preservation_sd: f64,
    pub alignment: f64,
    pub alignment_sd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub rho: f64,
    /// Set when the correlation is undefined and `rho` was reported as 0.
    pub degenerate: bool,
}

impl Correlation {
    fn of(x: &[f64], y: &[f64]) -> Self {
        match spearman(x, y) {
            Some(rho) => Self {
                rho,
                degenerate: false,
            },
            None => Self {
                rho: 0.0,
                degenerate: true,
            },
        }
    }

    pub fn sign(&self) -> i8 {
        if self.degenerate || self.rho == 0.0 {
            0
        } else if self.rho > 0.0 {
            1
        } else {
            -1
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub text_scale: f64,
    pub trials: usize,
    pub steps: usize,
    pub seed: u64,
    pub points: Vec<SweepPoint>,
    pub preservation_rank: Correlation,
    pub alignment_rank: Correlation,
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0).max(1.0);
    (m, var.sqrt())
}

/// Replaces the masked region with flat `fill`, leaving the background.
fn background_only(image: &Image, mask: &Mask, fill: f64) -> Result<Image> {
    let ch = image.channels();
    let data = image
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| if mask.data()[i / ch] == 1 { fill } else { v })
        .collect();
    Image::new(image.height(), image.width(), ch, data)
}

/// Sweeps `s_f = s_b` over `settings.scales` with `s_p` fixed. Every scale
/// point reuses the same trial seeds. Preservation is the cosine between
/// background-only embeddings of output and input; alignment is the cosine
/// between the masked region's mean color and the target color in the joint
/// space.
pub fn sweep_cfg(
    scenario: &SweepScenario,
    settings: &SweepSettings,
    embedders: &Embedders,
) -> Result<SweepReport> {
    if settings.scales.len() < 3 {
        return Err(Error::validation("a sweep needs at least 3 scale points"));
    }
    if settings.trials < 50 {
        return Err(Error::validation(
            "a sweep needs at least 50 trials per point",
        ));
    }
    let world = scenario.gaussian_world()?;
    let schedule = DiffusionSchedule::default();
    let denoiser = AnalyticDenoiser {
        world,
        schedule: schedule.clone(),
    };
    let text = HashedTextEmbedder::new(EMBED_DIM, settings.seed);
    let prompt = SubPrompt::new(1, scenario.prompt.clone());
    let null = scenario.world.null_value;
    let reference =
        embedders
            .clip
            .embed(&background_only(&scenario.input, &scenario.mask, null)?)?;
    let target = embedders.joint.embed_color(scenario.target)?;
    let mut points = Vec::with_capacity(settings.scales.len());
    for &s in &settings.scales {
        let scales = GuidanceScales::new(s, s, settings.text_scale)?;
        let mut pres = Vec::with_capacity(settings.trials);
        let mut align = Vec::with_capacity(settings.trials);
        for trial in 0..settings.trials {
            let out = edit_sample(
                &denoiser,
                &scenario.input,
                &scenario.mask,
                &prompt,
                &scales,
                settings.steps,
                settings.seed.wrapping_add(trial as u64),
                &IdentityCodec,
                &text,
                &schedule,
            )?;
            let bg = embedders
                .clip
                .embed(&background_only(&out, &scenario.mask, null)?)?;
            pres.push(cosine(&bg, &reference)?);
            align.push(cosine(
                &embedders.joint.embed_region(&out, Some(&scenario.mask))?,
                &target,
            )?);
        }
        let (preservation, preservation_sd) = mean_sd(&pres);
        let (alignment, alignment_sd) = mean_sd(&align);
        points.push(SweepPoint {
            scale: s,
            preservation,
            preservation_sd,
            alignment,
            alignment_sd,
        });
    }
    let xs: Vec<f64> = points.iter().map(|p| p.scale).collect();
    let ps: Vec<f64> = points.iter().map(|p| p.preservation).collect();
    let al: Vec<f64> = points.iter().map(|p| p.alignment).collect();
    Ok(SweepReport {
        text_scale: settings.text_scale,
        trials: settings.trials,
        steps: settings.steps,
        seed: settings.seed,
        preservation_rank: Correlation::of(&xs, &ps),
        alignment_rank: Correlation::of(&xs, &al),
        points,
    })
}

impl SweepReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("scale,preservation,preservation_sd,alignment,alignment_sd\n");
        for p in &self.points {
            s.push_str(&format!(
                "{},{},{},{},{}\n",
                p.scale, p.preservation, p.preservation_sd, p.alignment, p.alignment_sd
            ));
        }
        s
    }

    /// Two line charts side by side, scale on x.
    pub fn to_svg(&self) -> String {
        let (w, h, pad) = (320.0, 240.0, 40.0);
        let xs: Vec<f64> = self.points.iter().map(|p| p.scale).collect();
        let mut svg = format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{}\" height=\"{}\" font-family=\"sans-serif\" font-size=\"10\">\n",
            2.0 * w,
            h
        );
        let curves: [(&str, Vec<f64>, &str); 2] = [
            (
                "preservation",
                self.points.iter().map(|p| p.preservation).collect(),
                "#1f77b4",
            ),
            (
                "alignment",
                self.points.iter().map(|p| p.alignment).collect(),
                "#d62728",
            ),
        ];
        for (k, (name, ys, color)) in curves.iter().enumerate() {
            let ox = k as f64 * w;
            let span = |v: &[f64]| {
                let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                if hi > lo {
                    (lo, hi)
                } else {
                    (lo - 0.5, lo + 0.5)
                }
            };
            let (x0, x1) = span(&xs);
            let (y0, y1) = span(ys);
            let px = |x: f64| ox + pad + (x - x0) / (x1 - x0) * (w - 2.0 * pad);
            let py = |y: f64| h - pad - (y - y0) / (y1 - y0) * (h - 2.0 * pad);
            svg.push_str(&format!(
                "<line x1=\"{a}\" y1=\"{b}\" x2=\"{c}\" y2=\"{b}\" stroke=\"black\"/>\n<line x1=\"{a}\" y1=\"{d}\" x2=\"{a}\" y2=\"{b}\" stroke=\"black\"/>\n",
                a = ox + pad,
                b = h - pad,
                c = ox + w - pad,
                d = pad
            ));
            svg.push_str(&format!(
                "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{name} vs scale</text>\n",
                ox + w / 2.0,
                pad / 2.0
            ));
            svg.push_str(&format!(
                "<text x=\"{}\" y=\"{}\">{x0:.2}</text><text x=\"{}\" y=\"{}\" text-anchor=\"end\">{x1:.2}</text>\n",
                ox + pad,
                h - pad + 14.0,
                ox + w - pad,
                h - pad + 14.0
            ));
            svg.push_str(&format!(
                "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{y0:.4}</text><text x=\"{}\" y=\"{}\" text-anchor=\"end\">{y1:.4}</text>\n",
                ox + pad - 4.0,
                h - pad,
                ox + pad - 4.0,
                pad + 4.0
            ));
            let pts: Vec<String> = xs
                .iter()
                .zip(ys)
                .map(|(&x, &y)| format!("{:.2},{:.2}", px(x), py(y)))
                .collect();
            svg.push_str(&format!(
                "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>\n",
                pts.join(" ")
            ));
            for (&x, &y) in xs.iter().zip(ys) {
                svg.push_str(&format!(
                    "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"3\" fill=\"{color}\"/>\n",
                    px(x),
                    py(y)
                ));
            }
        }
        svg.push_str("</svg>\n");
        svg
    }
}

/// One evaluation item. Paths are resolved against the manifest's folder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub input: PathBuf,
    pub instruction: String,
    pub ground_truth: PathBuf,
    pub global_description: String,
    pub local_description: String,
    /// Region for the local description; whole image when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut entries: Vec<ManifestEntry> = serde_json::from_str(&text)
        .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    let base = path.parent().unwrap_or(Path::new(""));
    let mut missing = Vec::new();
    for e in &mut entries {
        for p in [
            Some(&mut e.input),
            Some(&mut e.ground_truth),
            e.mask.as_mut(),
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
            if !p.is_file() {
                missing.push(p.display().to_string());
            }
        }
    }
    if !missing.is_empty() {
        return Err(Error::validation(format!(
            "manifest references missing files: {}",
            missing.join(", ")
        )));
    }
    Ok(DatasetManifest { entries })
}
