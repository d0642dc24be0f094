//! Synthetic referring-expression scenes, rendering, and dataset files.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{FanError, Result};
use crate::head::BinaryMask;
use crate::pnm;
use crate::rng;
use crate::text::{tokenize, TokenSequence, Vocabulary};
use crate::vision::{Image, STRIDE_DIVISOR};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Shape {
    Circle,
    Square,
    Triangle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
}

pub const SHAPES: [Shape; 3] = [Shape::Circle, Shape::Square, Shape::Triangle];
pub const COLORS: [Color; 4] = [Color::Red, Color::Green, Color::Blue, Color::Yellow];
pub const BACKGROUND: [u8; 3] = [128, 128, 128];

impl Shape {
    pub fn word(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
        }
    }

    /// Exact area of the continuous shape with half-extent `s`.
    pub fn area(self, s: f64) -> f64 {
        match self {
            Shape::Circle => std::f64::consts::PI * s * s,
            Shape::Square => 4.0 * s * s,
            Shape::Triangle => 2.0 * s * s,
        }
    }

    /// Perimeter of the continuous shape with half-extent `s`.
    pub fn perimeter(self, s: f64) -> f64 {
        match self {
            Shape::Circle => 2.0 * std::f64::consts::PI * s,
            Shape::Square => 8.0 * s,
            Shape::Triangle => 2.0 * s + 2.0 * (s * s + 4.0 * s * s).sqrt(),
        }
    }
}

impl Color {
    pub fn word(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
        }
    }

    pub fn rgb(self) -> [u8; 3] {
        match self {
            Color::Red => [220, 40, 40],
            Color::Green => [40, 180, 60],
            Color::Blue => [40, 80, 220],
            Color::Yellow => [230, 210, 40],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Relation {
    LeftOf,
    RightOf,
    Above,
    Below,
}

pub const RELATIONS: [Relation; 4] = [Relation::LeftOf, Relation::RightOf, Relation::Above, Relation::Below];

impl Relation {
    pub fn phrase(self) -> &'static str {
        match self {
            Relation::LeftOf => "left of",
            Relation::RightOf => "right of",
            Relation::Above => "above",
            Relation::Below => "below",
        }
    }

    /// Signed distance by which `o` satisfies the relation to `anchor`;
    /// positive means it holds.
    pub fn margin(self, o: &SceneObject, anchor: &SceneObject) -> f64 {
        match self {
            Relation::LeftOf => anchor.cx - o.cx,
            Relation::RightOf => o.cx - anchor.cx,
            Relation::Above => anchor.cy - o.cy,
            Relation::Below => o.cy - anchor.cy,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneObject {
    pub shape: Shape,
    pub color: Color,
    pub cx: f64,
    pub cy: f64,
    /// Half-extent: circle radius, half the square side, half the triangle base and height.
    pub size: f64,
}

impl SceneObject {
    /// Whether the point `(px, py)` in continuous image coordinates lies inside.
    pub fn contains(&self, px: f64, py: f64) -> bool {
        let (dx, dy, s) = (px - self.cx, py - self.cy, self.size);
        match self.shape {
            Shape::Circle => dx * dx + dy * dy <= s * s,
            Shape::Square => dx.abs() <= s && dy.abs() <= s,
            // Apex at the top, base along y = cy + s.
            Shape::Triangle => dy <= s && dx.abs() <= (dy + s) / 2.0,
        }
    }

    /// Pixels whose centres fall inside the shape.
    pub fn coverage(&self, width: usize, height: usize) -> BinaryMask {
        let mut m = BinaryMask::empty(height, width);
        for y in 0..height {
            for x in 0..width {
                if self.contains(x as f64 + 0.5, y as f64 + 0.5) {
                    m.set(y, x, true);
                }
            }
        }
        m
    }

    /// Radius of a circle around the centre that encloses the shape.
    pub fn bounding_radius(&self) -> f64 {
        self.size * std::f64::consts::SQRT_2
    }

    pub fn same_kind(&self, other: &SceneObject) -> bool {
        self.shape == other.shape && self.color == other.color
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub objects: Vec<SceneObject>,
    pub seed: u64,
}

impl SceneSpec {
    pub fn render(&self) -> Result<Image> {
        let mut rgb = Vec::with_capacity(self.width * self.height * 3);
        for y in 0..self.height {
            for x in 0..self.width {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let c = self.objects.iter().find(|o| o.contains(px, py)).map_or(BACKGROUND, |o| o.color.rgb());
                rgb.extend_from_slice(&c);
            }
        }
        Image::from_rgb8(self.height, self.width, &rgb)
    }
}

/// Parsed referring expression.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Expression {
    pub color: Color,
    pub shape: Shape,
    pub relation: Option<(Relation, Color, Shape)>,
}

impl Expression {
    pub fn text(&self) -> String {
        let mut s = format!("the {} {}", self.color.word(), self.shape.word());
        if let Some((rel, c, sh)) = self.relation {
            s.push_str(&format!(" {} the {} {}", rel.phrase(), c.word(), sh.word()));
        }
        s
    }

    pub fn parse(text: &str) -> Option<Self> {
        let words: Vec<&str> = text.split_whitespace().collect();
        let color = |w: &str| COLORS.iter().copied().find(|c| c.word() == w);
        let shape = |w: &str| SHAPES.iter().copied().find(|s| s.word() == w);
        let head = |w: &[&str]| match w {
            ["the", c, s] => Some((color(c)?, shape(s)?)),
            _ => None,
        };
        let (c, s) = head(words.get(..3)?)?;
        let rest = &words[3..];
        let relation = match rest {
            [] => None,
            [r, "of", tail @ ..] if *r == "left" || *r == "right" => {
                let rel = if *r == "left" { Relation::LeftOf } else { Relation::RightOf };
                let (ac, ash) = head(tail)?;
                Some((rel, ac, ash))
            }
            [r, tail @ ..] if *r == "above" || *r == "below" => {
                let rel = if *r == "above" { Relation::Above } else { Relation::Below };
                let (ac, ash) = head(tail)?;
                Some((rel, ac, ash))
            }
            _ => return None,
        };
        Some(Self { color: c, shape: s, relation })
    }
}

/// Indices of objects the expression describes. Relations are judged on
/// centres and need an anchor that is the only object of its kind.
pub fn resolve(objects: &[SceneObject], expr: &Expression) -> Vec<usize> {
    let kind = |o: &SceneObject, c: Color, s: Shape| o.color == c && o.shape == s;
    let candidates = objects.iter().enumerate().filter(|(_, o)| kind(o, expr.color, expr.shape));
    match expr.relation {
        None => candidates.map(|(i, _)| i).collect(),
        Some((rel, ac, ash)) => {
            let anchors: Vec<&SceneObject> = objects.iter().filter(|o| kind(o, ac, ash)).collect();
            let [anchor] = anchors.as_slice() else { return Vec::new() };
            candidates
                .filter(|(_, o)| !std::ptr::eq(*o, *anchor) && rel.margin(o, anchor) > 0.0)
                .map(|(i, _)| i)
                .collect()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GenConfig {
    pub size: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Object half-extent range as fractions of the image size.
    pub min_extent: f64,
    pub max_extent: f64,
    /// Probability that one object copies another's colour and shape.
    pub duplicate_prob: f64,
    /// Minimum centre offset for a relation to be used.
    pub relation_margin: f64,
    /// Pixel gap kept between bounding circles.
    pub gap: f64,
    pub max_retries: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            size: 64,
            min_objects: 2,
            max_objects: 4,
            min_extent: 0.09,
            max_extent: 0.16,
            duplicate_prob: 0.25,
            relation_margin: 4.0,
            gap: 1.0,
            max_retries: 200,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.size == 0 || !self.size.is_multiple_of(STRIDE_DIVISOR) {
            return Err(FanError::Config(format!("image size {} must be a positive multiple of 32", self.size)));
        }
        if self.min_objects == 0 || self.min_objects > self.max_objects {
            return Err(FanError::Config("object count range is empty".into()));
        }
        if !(self.min_extent > 0.0 && self.min_extent <= self.max_extent && self.max_extent < 0.5) {
            return Err(FanError::Config("object extent range must satisfy 0 < min <= max < 0.5".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageSample {
    pub id: String,
    pub image: Image,
    pub expression: String,
    pub tokens: TokenSequence,
    pub mask: BinaryMask,
}

/// A generated sample together with the scene it was drawn from.
#[derive(Debug, Clone, PartialEq)]
pub struct Generated {
    pub scene: SceneSpec,
    pub referent: usize,
    pub expression: Expression,
    pub sample: ImageSample,
}

fn place_objects(rng: &mut impl Rng, cfg: &GenConfig, count: usize) -> Option<Vec<SceneObject>> {
    let size = cfg.size as f64;
    let mut objects: Vec<SceneObject> = Vec::with_capacity(count);
    for _ in 0..count {
        let mut placed = false;
        for _ in 0..cfg.max_retries {
            let s = rng.gen_range(cfg.min_extent * size..=cfg.max_extent * size);
            let lo = s + 1.0;
            let hi = size - s - 1.0;
            let o = SceneObject {
                shape: SHAPES[rng.gen_range(0..SHAPES.len())],
                color: COLORS[rng.gen_range(0..COLORS.len())],
                cx: rng.gen_range(lo..hi),
                cy: rng.gen_range(lo..hi),
                size: s,
            };
            let clear = objects.iter().all(|p| {
                let d = ((p.cx - o.cx).powi(2) + (p.cy - o.cy).powi(2)).sqrt();
                d >= p.bounding_radius() + o.bounding_radius() + cfg.gap
            });
            if clear {
                objects.push(o);
                placed = true;
                break;
            }
        }
        if !placed {
            return None;
        }
    }
    Some(objects)
}

/// Chooses a referent and an expression that singles it out.
fn describe(rng: &mut impl Rng, objects: &[SceneObject], margin: f64) -> Option<(usize, Expression)> {
    let start = rng.gen_range(0..objects.len());
    for k in 0..objects.len() {
        let r = (start + k) % objects.len();
        let o = &objects[r];
        let base = Expression { color: o.color, shape: o.shape, relation: None };
        if objects.iter().filter(|p| p.same_kind(o)).count() == 1 {
            return Some((r, base));
        }
        let mut options = Vec::new();
        for (a, anchor) in objects.iter().enumerate() {
            if a == r || objects.iter().filter(|p| p.same_kind(anchor)).count() != 1 {
                continue;
            }
            for rel in RELATIONS {
                let distractors_fail = objects
                    .iter()
                    .enumerate()
                    .filter(|&(i, p)| i != r && p.same_kind(o))
                    .all(|(_, p)| rel.margin(p, anchor) <= 0.0);
                if rel.margin(o, anchor) >= margin && distractors_fail {
                    options.push((rel, anchor.color, anchor.shape));
                }
            }
        }
        if !options.is_empty() {
            let relation = options[rng.gen_range(0..options.len())];
            return Some((r, Expression { relation: Some(relation), ..base }));
        }
    }
    None
}

/// Deterministic scene, referent, and expression for `seed`.
pub fn generate(seed: u64, cfg: &GenConfig, vocab: &Vocabulary, max_len: usize) -> Result<Generated> {
    cfg.validate()?;
    let mut rng = rng::stream(seed, "scene");
    for _ in 0..cfg.max_retries {
        let count = rng.gen_range(cfg.min_objects..=cfg.max_objects);
        let Some(mut objects) = place_objects(&mut rng, cfg, count) else { continue };
        if objects.len() >= 2 && rng.gen_bool(cfg.duplicate_prob) {
            let (src, dst) = (rng.gen_range(0..objects.len()), rng.gen_range(0..objects.len()));
            if src != dst {
                objects[dst].shape = objects[src].shape;
                objects[dst].color = objects[src].color;
            }
        }
        let Some((referent, expression)) = describe(&mut rng, &objects, cfg.relation_margin) else { continue };
        let scene = SceneSpec { width: cfg.size, height: cfg.size, objects, seed };
        let image = scene.render()?;
        let mask = scene.objects[referent].coverage(cfg.size, cfg.size);
        let text = expression.text();
        let tokens = tokenize(&text, vocab, max_len)?;
        let sample = ImageSample { id: format!("{seed:08}"), image, expression: text, tokens, mask };
        return Ok(Generated { scene, referent, expression, sample });
    }
    Err(FanError::Generation(format!(
        "no valid scene of {}..={} objects at {}px after {} attempts (seed {seed})",
        cfg.min_objects, cfg.max_objects, cfg.size, cfg.max_retries
    )))
}

pub fn generate_sample(seed: u64, cfg: &GenConfig, vocab: &Vocabulary, max_len: usize) -> Result<ImageSample> {
    Ok(generate(seed, cfg, vocab, max_len)?.sample)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    /// Seeds of different splits never collide for fewer than a million samples.
    pub fn seed(self, base: u64, index: usize) -> u64 {
        let offset = match self {
            Split::Train => 0,
            Split::Val => 1_000_000,
            Split::Test => 2_000_000,
        };
        base.wrapping_add(offset).wrapping_add(index as u64)
    }
}

pub fn generate_split(
    split: Split,
    count: usize,
    base_seed: u64,
    cfg: &GenConfig,
    vocab: &Vocabulary,
    max_len: usize,
) -> Result<Vec<ImageSample>> {
    if count >= 1_000_000 {
        return Err(FanError::Config(format!("split size {count} would overlap the next split's seeds")));
    }
    (0..count).map(|i| generate_sample(split.seed(base_seed, i), cfg, vocab, max_len)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub vocab: Vocabulary,
    pub samples: Vec<ImageSample>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestRecord {
    id: String,
    image: String,
    mask: String,
    expression: String,
    tokens: Vec<usize>,
}

pub const MANIFEST: &str = "manifest.jsonl";
pub const VOCAB: &str = "vocab.txt";

fn check_id(id: &str) -> Result<()> {
    if id.is_empty() || !id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_') {
        return Err(FanError::Data(format!("sample id {id:?} must be non-empty ASCII alphanumerics, '-' or '_'")));
    }
    Ok(())
}

pub fn write_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    let images = dir.join("images");
    let masks = dir.join("masks");
    for d in [dir, &images, &masks] {
        fs::create_dir_all(d).map_err(|e| FanError::io(d, e))?;
    }
    dataset.vocab.save(&dir.join(VOCAB))?;
    let manifest_path = dir.join(MANIFEST);
    let mut manifest = Vec::new();
    for s in &dataset.samples {
        check_id(&s.id)?;
        let image_rel = format!("images/{}.ppm", s.id);
        let mask_rel = format!("masks/{}.pgm", s.id);
        pnm::write_ppm(&dir.join(&image_rel), s.image.width(), s.image.height(), &s.image.to_rgb8())?;
        let gray: Vec<u8> = s.mask.values().iter().map(|&v| if v { 255 } else { 0 }).collect();
        pnm::write_pgm(&dir.join(&mask_rel), s.mask.width(), s.mask.height(), &gray)?;
        let rec = ManifestRecord {
            id: s.id.clone(),
            image: image_rel,
            mask: mask_rel,
            expression: s.expression.clone(),
            tokens: s.tokens.ids.clone(),
        };
        serde_json::to_writer(&mut manifest, &rec).expect("manifest record serializes");
        manifest.push(b'\n');
    }
    let mut f = fs::File::create(&manifest_path).map_err(|e| FanError::io(&manifest_path, e))?;
    f.write_all(&manifest).map_err(|e| FanError::io(&manifest_path, e))
}

fn resolve_path(dir: &Path, rel: &str) -> Result<PathBuf> {
    let p = Path::new(rel);
    if p.is_absolute() || p.components().any(|c| matches!(c, std::path::Component::ParentDir)) {
        return Err(FanError::Data(format!("manifest path {rel:?} must stay inside the dataset directory")));
    }
    Ok(dir.join(p))
}

pub fn read_mask(path: &Path) -> Result<BinaryMask> {
    let (w, h, gray) = pnm::read_pgm(path)?;
    let values = gray
        .iter()
        .map(|&v| match v {
            0 => Ok(false),
            255 => Ok(true),
            other => Err(FanError::Data(format!("{}: mask value {other} is neither 0 nor 255", path.display()))),
        })
        .collect::<Result<_>>()?;
    BinaryMask::new(h, w, values)
}

pub fn write_mask(path: &Path, mask: &BinaryMask) -> Result<()> {
    let gray: Vec<u8> = mask.values().iter().map(|&v| if v { 255 } else { 0 }).collect();
    pnm::write_pgm(path, mask.width(), mask.height(), &gray)
}

pub fn read_image(path: &Path) -> Result<Image> {
    let (w, h, rgb) = pnm::read_ppm(path)?;
    Image::from_rgb8(h, w, &rgb)
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let vocab = Vocabulary::load(&dir.join(VOCAB))?;
    let manifest_path = dir.join(MANIFEST);
    let text = fs::read_to_string(&manifest_path).map_err(|e| FanError::io(&manifest_path, e))?;
    let mut samples = Vec::new();
    let mut dims: Option<(usize, usize)> = None;
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let at = || format!("{} line {}", manifest_path.display(), n + 1);
        let rec: ManifestRecord =
            serde_json::from_str(line).map_err(|e| FanError::Data(format!("{}: {e}", at())))?;
        check_id(&rec.id).map_err(|e| FanError::Data(format!("{}: {e}", at())))?;
        let tokens = TokenSequence::from_ids(rec.tokens).map_err(|e| FanError::Data(format!("{}: {e}", at())))?;
        if let Some(&bad) = tokens.ids.iter().find(|&&t| t >= vocab.len()) {
            return Err(FanError::Data(format!("{}: token id {bad} outside vocabulary", at())));
        }
        let image_path = resolve_path(dir, &rec.image)?;
        let mask_path = resolve_path(dir, &rec.mask)?;
        let image = read_image(&image_path).map_err(|e| missing_as_data(e, &image_path))?;
        let mask = read_mask(&mask_path).map_err(|e| missing_as_data(e, &mask_path))?;
        if (mask.height(), mask.width()) != (image.height(), image.width()) {
            return Err(FanError::Data(format!(
                "{}: mask {}×{} does not match image {}×{}",
                mask_path.display(),
                mask.height(),
                mask.width(),
                image.height(),
                image.width()
            )));
        }
        match dims {
            None => dims = Some((image.height(), image.width())),
            Some(d) if d != (image.height(), image.width()) => {
                return Err(FanError::Data(format!(
                    "{}: image {}×{} differs from the dataset size {}×{}",
                    image_path.display(),
                    image.height(),
                    image.width(),
                    d.0,
                    d.1
                )));
            }
            Some(_) => {}
        }
        samples.push(ImageSample { id: rec.id, image, expression: rec.expression, tokens, mask });
    }
    Ok(Dataset { vocab, samples })
}

fn missing_as_data(e: FanError, path: &Path) -> FanError {
    match e {
        FanError::Io { source, .. } => FanError::Data(format!("{}: {source}", path.display())),
        other => other,
    }
}
