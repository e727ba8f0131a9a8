//! Closed-world synthetic scenes: flat gray canvases with a few colored
//! squares, circles and triangles, plus the edit requests that can be made
//! against them and their ground-truth editing regions.
//!
//! Requests use a tiny grammar:
//!
//! * `make the [color] <shape> <color>` / `recolor the [color] <shape> to <color>`
//! * `remove the [color] <shape>`
//! * `add a <color> <shape> beside the [color] <shape>`
//!
//! The region of an "add beside" request is the referenced shape's
//! silhouette shifted one shape-width to the right, or one shape-height down
//! when it would leave the canvas. It is deliberately not an object mask.

use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image, Mask};

/// Canvas gray; 128/255 survives PNG quantization exactly.
pub const BACKGROUND: f64 = 128.0 / 255.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Square,
    Circle,
    Triangle,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Square, ShapeKind::Circle, ShapeKind::Triangle];

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Square => "square",
            ShapeKind::Circle => "circle",
            ShapeKind::Triangle => "triangle",
        }
    }

    fn from_word(w: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == w)
    }

    /// Whether `(dy, dx)` inside a `size x size` box belongs to the shape.
    pub fn covers(self, size: usize, dy: usize, dx: usize) -> bool {
        match self {
            ShapeKind::Square => true,
            ShapeKind::Circle => {
                let c = size as f64 / 2.0;
                let (y, x) = (dy as f64 + 0.5 - c, dx as f64 + 0.5 - c);
                y * y + x * x <= 0.8 * c * c
            }
            ShapeKind::Triangle => dx <= dy,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
}

impl Color {
    pub const ALL: [Color; 4] = [Color::Red, Color::Green, Color::Blue, Color::Yellow];

    pub fn name(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
        }
    }

    pub fn rgb(self) -> [f64; 3] {
        match self {
            Color::Red => [1.0, 0.0, 0.0],
            Color::Green => [0.0, 1.0, 0.0],
            Color::Blue => [0.0, 0.0, 1.0],
            Color::Yellow => [1.0, 1.0, 0.0],
        }
    }

    pub fn from_word(w: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.name() == w)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shape {
    pub kind: ShapeKind,
    pub color: Color,
    pub top: usize,
    pub left: usize,
    pub size: usize,
}

impl Shape {
    pub fn covers(&self, row: usize, col: usize) -> bool {
        row >= self.top
            && col >= self.left
            && row < self.top + self.size
            && col < self.left + self.size
            && self.kind.covers(self.size, row - self.top, col - self.left)
    }

    pub fn area(&self) -> usize {
        (0..self.size)
            .flat_map(|y| (0..self.size).map(move |x| (y, x)))
            .filter(|&(y, x)| self.kind.covers(self.size, y, x))
            .count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShapeRef {
    pub kind: ShapeKind,
    pub color: Option<Color>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "kebab-case")]
pub enum Action {
    Recolor { to: Color },
    Remove,
    AddBeside { color: Color, kind: ShapeKind },
}

impl Action {
    /// The keyword naming this action in the reasoner vocabulary.
    pub fn keyword(&self) -> &'static str {
        match self {
            Action::Recolor { .. } => "recolor",
            Action::Remove => "remove",
            Action::AddBeside { .. } => "add",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditRequest {
    #[serde(flatten)]
    pub action: Action,
    pub target: ShapeRef,
}

impl EditRequest {
    /// Keywords that determine the editing region: action, referenced color, referenced shape.
    pub fn region_keywords(&self) -> Vec<&'static str> {
        let mut k = vec![self.action.keyword()];
        if let Some(c) = self.target.color {
            k.push(c.name());
        }
        k.push(self.target.kind.name());
        k
    }
}

impl fmt::Display for EditRequest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let target = match self.target.color {
            Some(c) => format!("the {} {}", c.name(), self.target.kind.name()),
            None => format!("the {}", self.target.kind.name()),
        };
        match self.action {
            Action::Recolor { to } => write!(f, "make {target} {}", to.name()),
            Action::Remove => write!(f, "remove {target}"),
            Action::AddBeside { color, kind } => {
                write!(f, "add a {} {} beside {target}", color.name(), kind.name())
            }
        }
    }
}

const STOPWORDS: &[&str] = &["the", "a", "an", "to", "beside", "next", "it", "please"];

pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_ascii_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_ascii_lowercase)
        .collect()
}

enum Word {
    Color(Color),
    Shape(ShapeKind),
    Boundary,
}

/// Parses a sub-prompt in the scene grammar.
///
/// Any token outside the closed vocabulary yields [`Error::Vocabulary`];
/// in-vocabulary text that does not fit a template yields [`Error::Validation`].
pub fn parse_request(text: &str) -> Result<EditRequest> {
    let tokens = tokenize(text);
    let Some((verb, rest)) = tokens.split_first() else {
        return Err(Error::validation("empty edit request"));
    };
    let mut words = Vec::new();
    for t in rest {
        if t == "beside" || t == "next" {
            words.push(Word::Boundary);
        } else if let Some(c) = Color::from_word(t) {
            words.push(Word::Color(c));
        } else if let Some(k) = ShapeKind::from_word(t) {
            words.push(Word::Shape(k));
        } else if !STOPWORDS.contains(&t.as_str()) {
            return Err(Error::Vocabulary(t.clone()));
        }
    }
    let bad = || Error::validation(format!("`{text}` does not match the edit grammar"));
    // [color] shape
    let shape_ref = |ws: &[Word]| -> Option<ShapeRef> {
        match ws {
            [Word::Shape(k)] => Some(ShapeRef {
                kind: *k,
                color: None,
            }),
            [Word::Color(c), Word::Shape(k)] => Some(ShapeRef {
                kind: *k,
                color: Some(*c),
            }),
            _ => None,
        }
    };
    match verb.as_str() {
        "make" | "recolor" | "paint" => match words.split_last() {
            Some((Word::Color(to), head)) => Ok(EditRequest {
                action: Action::Recolor { to: *to },
                target: shape_ref(head).ok_or_else(bad)?,
            }),
            _ => Err(bad()),
        },
        "remove" | "delete" => Ok(EditRequest {
            action: Action::Remove,
            target: shape_ref(&words).ok_or_else(bad)?,
        }),
        "add" => {
            let split = words
                .iter()
                .position(|w| matches!(w, Word::Boundary))
                .ok_or_else(bad)?;
            let (new, target) = (&words[..split], &words[split + 1..]);
            match new {
                [Word::Color(color), Word::Shape(kind)] => Ok(EditRequest {
                    action: Action::AddBeside {
                        color: *color,
                        kind: *kind,
                    },
                    target: shape_ref(target).ok_or_else(bad)?,
                }),
                _ => Err(bad()),
            }
        }
        other if Color::from_word(other).is_some() || ShapeKind::from_word(other).is_some() => {
            Err(bad())
        }
        other if STOPWORDS.contains(&other) => Err(bad()),
        other => Err(Error::Vocabulary(other.to_string())),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    pub shape_size: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            height: 16,
            width: 16,
            shape_size: 4,
            min_shapes: 2,
            max_shapes: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneRequest {
    pub prompt: String,
    pub request: EditRequest,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub config: SceneConfig,
    pub image: Image,
    pub shapes: Vec<Shape>,
    /// Every request the scene supports; `requests[primary]` is the designated one.
    pub requests: Vec<SceneRequest>,
    pub primary: usize,
}

impl SyntheticScene {
    /// Renders `shapes` and enumerates requests. Shapes must not overlap
    /// and must have distinct colors.
    pub fn from_shapes(config: SceneConfig, shapes: Vec<Shape>) -> Result<Self> {
        if config.shape_size < 3 {
            return Err(Error::validation("shapes need a size of at least 3"));
        }
        for (i, s) in shapes.iter().enumerate() {
            if s.top + s.size > config.height || s.left + s.size > config.width {
                return Err(Error::validation(format!("shape {i} leaves the canvas")));
            }
            if s.area() < 4 {
                return Err(Error::validation(format!("shape {i} is degenerate")));
            }
            if shapes[..i].iter().any(|o| o.color == s.color) {
                return Err(Error::validation("shape colors must be distinct"));
            }
            if shapes[..i].iter().any(|o| boxes_touch(o, s, 0)) {
                return Err(Error::validation("shapes overlap"));
            }
        }
        let image = render(&config, &shapes)?;
        let mut requests = Vec::new();
        for s in &shapes {
            let target = ShapeRef {
                kind: s.kind,
                color: Some(s.color),
            };
            let to = Color::ALL
                .into_iter()
                .find(|&c| c != s.color)
                .expect("four colors");
            requests.push(EditRequest {
                action: Action::Recolor { to },
                target,
            });
            requests.push(EditRequest {
                action: Action::Remove,
                target,
            });
            if s.left + 2 * s.size <= config.width {
                requests.push(EditRequest {
                    action: Action::AddBeside {
                        color: to,
                        kind: ShapeKind::Circle,
                    },
                    target,
                });
            }
        }
        let requests = requests
            .into_iter()
            .map(|request| SceneRequest {
                prompt: request.to_string(),
                request,
            })
            .collect();
        Ok(Self {
            config,
            image,
            shapes,
            requests,
            primary: 0,
        })
    }

    pub fn primary_request(&self) -> &SceneRequest {
        &self.requests[self.primary]
    }

    /// Resolves a reference to exactly one shape of this scene.
    pub fn resolve(&self, target: &ShapeRef) -> Result<&Shape> {
        let mut hits = self
            .shapes
            .iter()
            .filter(|s| s.kind == target.kind && target.color.is_none_or(|c| c == s.color));
        match (hits.next(), hits.next()) {
            (Some(s), None) => Ok(s),
            (None, _) => Err(Error::validation(format!(
                "no {} in scene",
                target.kind.name()
            ))),
            _ => Err(Error::validation(format!(
                "reference to the {} is ambiguous",
                target.kind.name()
            ))),
        }
    }

    pub fn region(&self, request: &EditRequest) -> Result<Mask> {
        let shape = self.resolve(&request.target)?;
        let (h, w) = (self.config.height, self.config.width);
        match request.action {
            Action::Recolor { .. } | Action::Remove => {
                Mask::from_fn(h, w, |r, c| shape.covers(r, c))
            }
            Action::AddBeside { .. } => {
                let (dy, dx) = beside_offset(shape, h, w);
                Mask::from_fn(h, w, |r, c| {
                    r >= dy && c >= dx && shape.covers(r - dy, c - dx)
                })
            }
        }
    }

    /// Ground-truth region for a free-text sub-prompt.
    pub fn region_for_prompt(&self, prompt: &str) -> Result<Mask> {
        self.region(&parse_request(prompt)?)
    }

    /// The image after applying `request`; pixels outside the region are untouched.
    pub fn apply(&self, image: &Image, request: &EditRequest) -> Result<Image> {
        let region = self.region(request)?;
        let mut out = image.clone();
        let shape = self.resolve(&request.target)?;
        let (dy, dx) = beside_offset(shape, self.config.height, self.config.width);
        for r in 0..self.config.height {
            for c in 0..self.config.width {
                if !region.get(r, c) {
                    continue;
                }
                match request.action {
                    Action::Recolor { to } => out.set_pixel(r, c, &to.rgb()),
                    Action::Remove => out.set_pixel(r, c, &[BACKGROUND; 3]),
                    Action::AddBeside { color, kind } => {
                        let (y, x) = (r - shape.top - dy, c - shape.left - dx);
                        if kind.covers(shape.size, y, x) {
                            out.set_pixel(r, c, &color.rgb());
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Serializable description of a scene; the image and requests are
/// re-derived from the shapes on load.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub config: SceneConfig,
    pub shapes: Vec<Shape>,
    pub primary: usize,
}

impl SyntheticScene {
    pub fn spec(&self) -> SceneSpec {
        SceneSpec {
            config: self.config,
            shapes: self.shapes.clone(),
            primary: self.primary,
        }
    }

    pub fn from_spec(spec: SceneSpec) -> Result<Self> {
        let mut scene = Self::from_shapes(spec.config, spec.shapes)?;
        if spec.primary >= scene.requests.len() {
            return Err(Error::validation("primary request index out of range"));
        }
        scene.primary = spec.primary;
        Ok(scene)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(&self.spec()).expect("scene spec serializes");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let spec: SceneSpec = serde_json::from_str(&text)
            .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
        Self::from_spec(spec)
    }
}

/// Shift from a shape to its "beside" region: right, or down when that overflows.
fn beside_offset(shape: &Shape, height: usize, width: usize) -> (usize, usize) {
    if shape.left + 2 * shape.size <= width {
        (0, shape.size)
    } else if shape.top + 2 * shape.size <= height {
        (shape.size, 0)
    } else {
        // Neither fits: keep the rightward shift and let the canvas clip it.
        (0, shape.size)
    }
}

fn boxes_touch(a: &Shape, b: &Shape, gap: usize) -> bool {
    a.left < b.left + b.size + gap
        && b.left < a.left + a.size + gap
        && a.top < b.top + b.size + gap
        && b.top < a.top + a.size + gap
}

fn render(config: &SceneConfig, shapes: &[Shape]) -> Result<Image> {
    let mut image = Image::filled(config.height, config.width, 3, BACKGROUND)?;
    for s in shapes {
        for r in s.top..s.top + s.size {
            for c in s.left..s.left + s.size {
                if s.covers(r, c) {
                    image.set_pixel(r, c, &s.color.rgb());
                }
            }
        }
    }
    Ok(image)
}

/// Draws one random scene. `action_slot` picks the primary request's action:
/// 0 recolor, 1 remove, 2 add-beside (the first shape is placed with room on
/// its right so that add-beside is always available).
pub fn random_scene(
    config: &SceneConfig,
    action_slot: usize,
    rng: &mut impl Rng,
) -> Result<SyntheticScene> {
    let s = config.shape_size;
    if config.min_shapes == 0
        || config.min_shapes > config.max_shapes
        || config.max_shapes > Color::ALL.len()
    {
        return Err(Error::validation(
            "shape counts must satisfy 1 <= min <= max <= 4",
        ));
    }
    if config.height < s || config.width < 2 * s {
        return Err(Error::validation("canvas too small for the shape size"));
    }
    for _attempt in 0..1000 {
        let n = rng.gen_range(config.min_shapes..=config.max_shapes);
        let mut colors = Color::ALL.to_vec();
        colors.shuffle(rng);
        let mut shapes: Vec<Shape> = Vec::with_capacity(n);
        let mut failed = false;
        for (i, color) in colors.into_iter().take(n).enumerate() {
            let max_left = if i == 0 {
                config.width - 2 * s
            } else {
                config.width - s
            };
            let mut placed = false;
            for _ in 0..200 {
                let cand = Shape {
                    kind: ShapeKind::ALL[rng.gen_range(0..3)],
                    color,
                    top: rng.gen_range(0..=config.height - s),
                    left: rng.gen_range(0..=max_left),
                    size: s,
                };
                if shapes.iter().all(|o| !boxes_touch(o, &cand, 1)) {
                    shapes.push(cand);
                    placed = true;
                    break;
                }
            }
            if !placed {
                failed = true;
                break;
            }
        }
        if failed || shapes.len() < config.min_shapes {
            continue;
        }
        let mut scene = SyntheticScene::from_shapes(*config, shapes)?;
        // Requests for shape 0 come first: recolor, remove, add-beside.
        scene.primary = action_slot % 3;
        return Ok(scene);
    }
    Err(Error::validation(
        "could not place shapes; canvas too crowded",
    ))
}

/// `count` scenes from one seed, cycling the primary action.
pub fn generate_scenes(
    config: &SceneConfig,
    count: usize,
    seed: u64,
) -> Result<Vec<SyntheticScene>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| random_scene(config, i, &mut rng))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::mask_iou;

    fn one_square() -> SyntheticScene {
        let shapes = vec![Shape {
            kind: ShapeKind::Square,
            color: Color::Blue,
            top: 2,
            left: 3,
            size: 4,
        }];
        SyntheticScene::from_shapes(SceneConfig::default(), shapes).unwrap()
    }

    #[test]
    fn silhouettes_have_expected_areas() {
        let mk = |kind| Shape {
            kind,
            color: Color::Red,
            top: 0,
            left: 0,
            size: 4,
        };
        assert_eq!(mk(ShapeKind::Square).area(), 16);
        assert_eq!(mk(ShapeKind::Circle).area(), 12);
        assert_eq!(mk(ShapeKind::Triangle).area(), 10);
    }

    #[test]
    fn parses_the_grammar() {
        let r = parse_request("make the square red").unwrap();
        assert_eq!(r.action, Action::Recolor { to: Color::Red });
        assert_eq!(
            r.target,
            ShapeRef {
                kind: ShapeKind::Square,
                color: None
            }
        );
        let r = parse_request("Add a yellow circle beside the blue triangle.").unwrap();
        assert_eq!(
            r.action,
            Action::AddBeside {
                color: Color::Yellow,
                kind: ShapeKind::Circle
            }
        );
        assert_eq!(r.target.color, Some(Color::Blue));
        assert_eq!(
            parse_request("remove the green circle").unwrap().action,
            Action::Remove
        );
        assert_eq!(
            parse_request("recolor the square to green").unwrap().action,
            Action::Recolor { to: Color::Green }
        );
    }

    #[test]
    fn display_round_trips_through_parser() {
        let scene = generate_scenes(&SceneConfig::default(), 6, 3).unwrap();
        for s in &scene {
            for r in &s.requests {
                assert_eq!(parse_request(&r.prompt).unwrap(), r.request);
            }
        }
    }

    #[test]
    fn unknown_words_are_vocabulary_errors() {
        assert!(
            matches!(parse_request("make the hexagon red"), Err(Error::Vocabulary(w)) if w == "hexagon")
        );
        assert!(matches!(
            parse_request("add turbulent waves"),
            Err(Error::Vocabulary(_))
        ));
        assert!(matches!(
            parse_request("make the square"),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn recolor_region_is_the_object() {
        let scene = one_square();
        let m = scene.region_for_prompt("make the square red").unwrap();
        let want =
            Mask::from_fn(16, 16, |r, c| (2..6).contains(&r) && (3..7).contains(&c)).unwrap();
        assert_eq!(m, want);
    }

    #[test]
    fn beside_region_is_shifted_not_the_object() {
        let scene = one_square();
        let m = scene
            .region_for_prompt("add a red circle beside the square")
            .unwrap();
        let want =
            Mask::from_fn(16, 16, |r, c| (2..6).contains(&r) && (7..11).contains(&c)).unwrap();
        assert_eq!(m, want);
        let obj = scene.region_for_prompt("remove the square").unwrap();
        assert_eq!(mask_iou(&m, &obj).unwrap(), 0.0);
    }

    #[test]
    fn beside_region_moves_down_on_overflow() {
        let shapes = vec![Shape {
            kind: ShapeKind::Triangle,
            color: Color::Green,
            top: 1,
            left: 11,
            size: 4,
        }];
        let scene = SyntheticScene::from_shapes(SceneConfig::default(), shapes).unwrap();
        let m = scene
            .region_for_prompt("add a red square beside the triangle")
            .unwrap();
        assert_eq!(m.count(), 10);
        assert!(m.get(5, 11) && m.get(8, 14) && !m.get(5, 12));
    }

    #[test]
    fn apply_only_touches_the_region() {
        let scene = one_square();
        let req = parse_request("make the square red").unwrap();
        let out = scene.apply(&scene.image, &req).unwrap();
        let region = scene.region(&req).unwrap();
        for r in 0..16 {
            for c in 0..16 {
                if region.get(r, c) {
                    assert_eq!(out.pixel(r, c), &[1.0, 0.0, 0.0]);
                } else {
                    assert_eq!(out.pixel(r, c), scene.image.pixel(r, c));
                }
            }
        }
    }

    #[test]
    fn generated_scenes_are_valid_and_deterministic() {
        let cfg = SceneConfig::default();
        let a = generate_scenes(&cfg, 30, 11).unwrap();
        let b = generate_scenes(&cfg, 30, 11).unwrap();
        assert_eq!(a, b);
        for (i, s) in a.iter().enumerate() {
            assert!(s.shapes.len() >= 2);
            let primary = s.primary_request();
            let expected = ["recolor", "remove", "add"][i % 3];
            assert_eq!(primary.request.action.keyword(), expected);
            let m = s.region(&primary.request).unwrap();
            assert!(m.count() >= 4);
        }
    }

    #[test]
    fn ambiguous_or_missing_references_fail() {
        let scene = one_square();
        assert!(scene.region_for_prompt("remove the circle").is_err());
        assert!(scene.region_for_prompt("remove the red square").is_err());
    }
}
