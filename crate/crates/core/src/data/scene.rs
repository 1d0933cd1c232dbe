//! Deterministic synthetic scenes of colored polygons.
//!
//! A scene is rendered once and annotated twice: a detection sample whose
//! concepts are `"color shape, a n-sided shape colored color."`, and a
//! dense-caption sample with templated region captions (plus occasional
//! sub-region captions). Held-out (shape, color) combinations are only ever
//! annotated in the dense-caption sample.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::concept::{build_concept, ConceptDictionary};
use crate::data::sample::{Image, Source, UnifiedSample};
use crate::error::{Error, Result};
use crate::geometry::BBox;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Triangle,
    Square,
    Hexagon,
    Cross,
}

impl ShapeKind {
    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Triangle => "triangle",
            ShapeKind::Square => "square",
            ShapeKind::Hexagon => "hexagon",
            ShapeKind::Cross => "cross",
        }
    }

    pub fn sides(self) -> usize {
        match self {
            ShapeKind::Triangle => 3,
            ShapeKind::Square => 4,
            ShapeKind::Hexagon => 6,
            ShapeKind::Cross => 12,
        }
    }

    /// Polygon inscribed in the `size × size` square at `(x0, y0)`, plus its exact bounds.
    fn polygon(self, x0: f32, y0: f32, size: f32) -> (Vec<(f32, f32)>, BBox) {
        let s = size;
        let pts: Vec<(f32, f32)> = match self {
            ShapeKind::Square => vec![(0.0, 0.0), (s, 0.0), (s, s), (0.0, s)],
            ShapeKind::Triangle => vec![(s / 2.0, 0.0), (s, s), (0.0, s)],
            ShapeKind::Hexagon => {
                let r = s / 2.0;
                let dy = r * 3f32.sqrt() / 2.0;
                (0..6)
                    .map(|i| {
                        let a = std::f32::consts::PI / 3.0 * i as f32;
                        (r + r * a.cos(), dy - r * a.sin())
                    })
                    .collect()
            }
            ShapeKind::Cross => {
                let a = s / 3.0;
                let b = 2.0 * s / 3.0;
                vec![
                    (a, 0.0),
                    (b, 0.0),
                    (b, a),
                    (s, a),
                    (s, b),
                    (b, b),
                    (b, s),
                    (a, s),
                    (a, b),
                    (0.0, b),
                    (0.0, a),
                    (a, a),
                ]
            }
        };
        let pts: Vec<(f32, f32)> = pts.into_iter().map(|(x, y)| (x0 + x, y0 + y)).collect();
        let (mut x1, mut y1, mut x2, mut y2) = (f32::MAX, f32::MAX, f32::MIN, f32::MIN);
        for &(x, y) in &pts {
            x1 = x1.min(x);
            y1 = y1.min(y);
            x2 = x2.max(x);
            y2 = y2.max(y);
        }
        (pts, BBox::new(x1, y1, x2, y2))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColorDef {
    pub name: String,
    pub rgb: [u8; 3],
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Combo {
    pub shape: ShapeKind,
    pub color: String,
}

impl Combo {
    pub fn category(&self) -> String {
        format!("{} {}", self.color, self.shape.name())
    }

    pub fn definition(&self) -> String {
        format!("a {}-sided shape colored {}", self.shape.sides(), self.color)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSpec {
    pub id: String,
    pub height: usize,
    pub width: usize,
    /// Objects are placed one per cell of a `grid × grid` partition of the canvas.
    pub grid: usize,
    pub shapes: Vec<ShapeKind>,
    pub colors: Vec<ColorDef>,
    pub min_size: usize,
    pub max_size: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub held_out: Vec<Combo>,
    /// When false only base combinations are drawn.
    pub include_held_out: bool,
    /// Chance that an object also gets a half-object caption region.
    pub subregion_prob: f32,
    pub color_jitter: u8,
    pub noise: u8,
}

impl Default for SceneSpec {
    fn default() -> Self {
        let color = |name: &str, rgb: [u8; 3]| ColorDef {
            name: name.into(),
            rgb,
        };
        let combo = |shape, color: &str| Combo {
            shape,
            color: color.into(),
        };
        Self {
            id: "default".into(),
            height: 64,
            width: 64,
            grid: 2,
            shapes: vec![
                ShapeKind::Triangle,
                ShapeKind::Square,
                ShapeKind::Hexagon,
                ShapeKind::Cross,
            ],
            colors: vec![
                color("red", [220, 40, 40]),
                color("green", [40, 190, 60]),
                color("blue", [50, 80, 230]),
                color("yellow", [230, 210, 40]),
            ],
            min_size: 12,
            max_size: 24,
            min_objects: 1,
            max_objects: 3,
            held_out: vec![
                combo(ShapeKind::Triangle, "green"),
                combo(ShapeKind::Square, "blue"),
                combo(ShapeKind::Hexagon, "yellow"),
                combo(ShapeKind::Cross, "red"),
            ],
            include_held_out: true,
            subregion_prob: 0.1,
            color_jitter: 15,
            noise: 10,
        }
    }
}

impl SceneSpec {
    pub fn with_held_out(mut self, include: bool) -> Self {
        self.include_held_out = include;
        self
    }

    pub fn all_combos(&self) -> Vec<Combo> {
        let mut out = Vec::new();
        for c in &self.colors {
            for &s in &self.shapes {
                out.push(Combo {
                    shape: s,
                    color: c.name.clone(),
                });
            }
        }
        out
    }

    pub fn is_held_out(&self, combo: &Combo) -> bool {
        self.held_out.contains(combo)
    }

    /// Combinations that may appear in detection annotations.
    pub fn base_combos(&self) -> Vec<Combo> {
        self.all_combos()
            .into_iter()
            .filter(|c| !self.is_held_out(c))
            .collect()
    }

    pub fn base_categories(&self) -> Vec<String> {
        self.base_combos().iter().map(Combo::category).collect()
    }

    pub fn held_out_categories(&self) -> Vec<String> {
        self.held_out.iter().map(Combo::category).collect()
    }

    /// Dictionary of every combination (zero frequencies) or of base ones only.
    pub fn dictionary(&self, include_held_out: bool) -> ConceptDictionary {
        let mut d = ConceptDictionary::new();
        let combos = if include_held_out {
            self.all_combos()
        } else {
            self.base_combos()
        };
        for c in combos {
            d.insert(&c.category(), &c.definition(), 0)
                .expect("combo names are unique and definitions non-empty");
        }
        d
    }

    pub fn validate(&self) -> Result<()> {
        if self.shapes.is_empty() || self.colors.is_empty() {
            return Err(Error::SceneSpec("no shapes or colors".into()));
        }
        if self.grid == 0 || !self.height.is_multiple_of(self.grid) || !self.width.is_multiple_of(self.grid) {
            return Err(Error::SceneSpec(format!(
                "grid {} does not divide the {}x{} canvas",
                self.grid, self.width, self.height
            )));
        }
        if self.min_size < 4 || self.min_size > self.max_size {
            return Err(Error::SceneSpec(format!(
                "bad size range {}..={}",
                self.min_size, self.max_size
            )));
        }
        let cell = (self.height / self.grid).min(self.width / self.grid);
        if self.max_size + 2 * CELL_MARGIN > cell {
            return Err(Error::SceneSpec(format!(
                "objects up to {} px do not fit a {cell} px cell",
                self.max_size
            )));
        }
        if self.min_objects > self.max_objects {
            return Err(Error::SceneSpec("min_objects > max_objects".into()));
        }
        if self.max_objects > self.grid * self.grid {
            return Err(Error::SceneSpec(format!(
                "{} objects cannot be placed without overlap in {} cells",
                self.max_objects,
                self.grid * self.grid
            )));
        }
        if self.max_objects > 0 {
            let pool = if self.include_held_out {
                self.all_combos()
            } else {
                self.base_combos()
            };
            if pool.is_empty() {
                return Err(Error::SceneSpec("no drawable combinations".into()));
            }
        }
        Ok(())
    }

    fn color(&self, name: &str) -> [u8; 3] {
        self.colors
            .iter()
            .find(|c| c.name == name)
            .map(|c| c.rgb)
            .unwrap_or([255, 255, 255])
    }
}

const CELL_MARGIN: usize = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct SceneObject {
    pub combo: Combo,
    pub bbox: BBox,
    pub held_out: bool,
}

/// A rendered scene with its full object list (held-out objects included).
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub image: Image,
    pub objects: Vec<SceneObject>,
    subregions: Vec<(usize, HalfRegion)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum HalfRegion {
    Left,
    Right,
    Top,
    Bottom,
}

impl HalfRegion {
    fn name(self) -> &'static str {
        match self {
            HalfRegion::Left => "left",
            HalfRegion::Right => "right",
            HalfRegion::Top => "top",
            HalfRegion::Bottom => "bottom",
        }
    }

    fn of(self, b: &BBox) -> BBox {
        let (cx, cy) = b.center();
        match self {
            HalfRegion::Left => BBox::new(b.x1, b.y1, cx, b.y2),
            HalfRegion::Right => BBox::new(cx, b.y1, b.x2, b.y2),
            HalfRegion::Top => BBox::new(b.x1, b.y1, b.x2, cy),
            HalfRegion::Bottom => BBox::new(b.x1, cy, b.x2, b.y2),
        }
    }
}

fn point_in_polygon(x: f32, y: f32, poly: &[(f32, f32)]) -> bool {
    let mut inside = false;
    let mut j = poly.len() - 1;
    for i in 0..poly.len() {
        let (xi, yi) = poly[i];
        let (xj, yj) = poly[j];
        if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

fn jitter(rng: &mut ChaCha8Rng, v: u8, amount: u8) -> u8 {
    if amount == 0 {
        return v;
    }
    let a = amount as i16;
    (v as i16 + rng.random_range(-a..=a)).clamp(0, 255) as u8
}

/// Render the scene for `seed`. Pure in `(seed, spec)`.
pub fn render_scene(seed: u64, spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (spec.height, spec.width);
    let mut image = Image::new(h, w);

    let base: u8 = rng.random_range(60..=110);
    for y in 0..h {
        for x in 0..w {
            let g = jitter(&mut rng, base, spec.noise);
            image.set_rgb(y, x, [g, g, g]);
        }
    }

    let pool = if spec.include_held_out {
        spec.all_combos()
    } else {
        spec.base_combos()
    };
    let n = rng.random_range(spec.min_objects..=spec.max_objects);
    let cells = spec.grid * spec.grid;
    let mut cell_order: Vec<usize> = (0..cells).collect();
    for i in 0..n {
        let j = rng.random_range(i..cells);
        cell_order.swap(i, j);
    }
    let (cell_h, cell_w) = (h / spec.grid, w / spec.grid);

    let mut objects = Vec::with_capacity(n);
    let mut subregions = Vec::new();
    for &cell in &cell_order[..n] {
        let combo = pool[rng.random_range(0..pool.len())].clone();
        let size = rng.random_range(spec.min_size..=spec.max_size);
        let (cy0, cx0) = ((cell / spec.grid) * cell_h, (cell % spec.grid) * cell_w);
        let x0 = cx0 + rng.random_range(CELL_MARGIN..=cell_w - size - CELL_MARGIN);
        let y0 = cy0 + rng.random_range(CELL_MARGIN..=cell_h - size - CELL_MARGIN);
        let (poly, bbox) = combo.shape.polygon(x0 as f32, y0 as f32, size as f32);
        let rgb = spec.color(&combo.color);
        let rgb = rgb.map(|c| jitter(&mut rng, c, spec.color_jitter));
        let (ys, ye) = (bbox.y1.floor() as usize, (bbox.y2.ceil() as usize).min(h));
        let (xs, xe) = (bbox.x1.floor() as usize, (bbox.x2.ceil() as usize).min(w));
        for y in ys..ye {
            for x in xs..xe {
                if point_in_polygon(x as f32 + 0.5, y as f32 + 0.5, &poly) {
                    image.set_rgb(y, x, rgb);
                }
            }
        }
        if rng.random::<f32>() < spec.subregion_prob {
            let part = match rng.random_range(0..4) {
                0 => HalfRegion::Left,
                1 => HalfRegion::Right,
                2 => HalfRegion::Top,
                _ => HalfRegion::Bottom,
            };
            subregions.push((objects.len(), part));
        }
        objects.push(SceneObject {
            held_out: spec.is_held_out(&combo),
            combo,
            bbox,
        });
    }
    Ok(Scene {
        image,
        objects,
        subregions,
    })
}

fn position_phrase(b: &BBox, w: f32, h: f32) -> String {
    let (cx, cy) = b.center();
    let v = if cy < h / 3.0 {
        "top"
    } else if cy < 2.0 * h / 3.0 {
        "middle"
    } else {
        "bottom"
    };
    let hz = if cx < w / 3.0 {
        "left"
    } else if cx < 2.0 * w / 3.0 {
        "center"
    } else {
        "right"
    };
    if v == "middle" && hz == "center" {
        "center".into()
    } else {
        format!("{v} {hz}")
    }
}

/// Region caption for an object, e.g. "a small red square near the top left".
pub fn object_caption(obj: &SceneObject, spec: &SceneSpec) -> String {
    let mid = (spec.min_size + spec.max_size) as f32 / 2.0;
    let size = if obj.bbox.width().max(obj.bbox.height()) < mid {
        "small"
    } else {
        "large"
    };
    format!(
        "a {size} {} {} near the {}",
        obj.combo.color,
        obj.combo.shape.name(),
        position_phrase(&obj.bbox, spec.width as f32, spec.height as f32)
    )
}

impl Scene {
    /// Detection sample: base objects only, concepts from the category template.
    pub fn detection_sample(&self, spec: &SceneSpec) -> Result<UnifiedSample> {
        let base = spec.base_categories();
        let mut boxes = Vec::new();
        let mut concepts = Vec::new();
        let mut ids = Vec::new();
        for obj in self.objects.iter().filter(|o| !o.held_out) {
            let cat = obj.combo.category();
            boxes.push(obj.bbox);
            concepts.push(build_concept(
                Some(&cat),
                &obj.combo.definition(),
                Source::Detection,
            )?);
            ids.push(base.iter().position(|c| *c == cat).expect("base category"));
        }
        Ok(UnifiedSample {
            image: self.image.clone(),
            boxes,
            concepts,
            source: Source::Detection,
            category_ids: Some(ids),
        })
    }

    /// Dense-caption sample: every object plus any sub-region captions.
    pub fn caption_sample(&self, spec: &SceneSpec) -> Result<UnifiedSample> {
        let mut boxes = Vec::new();
        let mut concepts = Vec::new();
        for obj in &self.objects {
            boxes.push(obj.bbox);
            concepts.push(build_concept(
                None,
                &object_caption(obj, spec),
                Source::DenseCaption,
            )?);
        }
        for &(i, part) in &self.subregions {
            let obj = &self.objects[i];
            boxes.push(part.of(&obj.bbox));
            concepts.push(build_concept(
                None,
                &format!(
                    "the {} half of the {} {}",
                    part.name(),
                    obj.combo.color,
                    obj.combo.shape.name()
                ),
                Source::DenseCaption,
            )?);
        }
        Ok(UnifiedSample {
            image: self.image.clone(),
            boxes,
            concepts,
            source: Source::DenseCaption,
            category_ids: None,
        })
    }
}

/// Render a scene and return its (detection, dense-caption) samples.
pub fn generate_scene(seed: u64, spec: &SceneSpec) -> Result<(UnifiedSample, UnifiedSample)> {
    let scene = render_scene(seed, spec)?;
    Ok((scene.detection_sample(spec)?, scene.caption_sample(spec)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic() {
        let spec = SceneSpec::default();
        assert_eq!(
            generate_scene(0, &spec).unwrap(),
            generate_scene(0, &spec).unwrap()
        );
        assert_ne!(
            generate_scene(0, &spec).unwrap().0.image,
            generate_scene(1, &spec).unwrap().0.image
        );
    }

    #[test]
    fn empty_scene() {
        let spec = SceneSpec {
            min_objects: 0,
            max_objects: 0,
            ..SceneSpec::default()
        };
        let (det, cap) = generate_scene(3, &spec).unwrap();
        assert_eq!(det.len(), 0);
        assert_eq!(cap.len(), 0);
        det.validate().unwrap();
        cap.validate().unwrap();
    }

    #[test]
    fn impossible_spec_rejected() {
        let spec = SceneSpec {
            min_objects: 5,
            max_objects: 5,
            ..SceneSpec::default()
        };
        assert!(matches!(generate_scene(0, &spec), Err(Error::SceneSpec(_))));
        let spec = SceneSpec {
            max_size: 40,
            ..SceneSpec::default()
        };
        assert!(matches!(generate_scene(0, &spec), Err(Error::SceneSpec(_))));
    }

    #[test]
    fn held_out_only_in_captions() {
        let spec = SceneSpec::default();
        let held = spec.held_out_categories();
        let mut seen_held = 0;
        for seed in 0..200 {
            let scene = render_scene(seed, &spec).unwrap();
            let det = scene.detection_sample(&spec).unwrap();
            let cap = scene.caption_sample(&spec).unwrap();
            det.validate().unwrap();
            cap.validate().unwrap();
            for c in &det.concepts {
                assert!(!held.iter().any(|h| c.starts_with(&format!("{h},"))));
            }
            seen_held += scene.objects.iter().filter(|o| o.held_out).count();
            let n_obj = scene.objects.len();
            assert_eq!(det.len(), scene.objects.iter().filter(|o| !o.held_out).count());
            assert!(cap.len() >= n_obj);
        }
        assert!(seen_held > 0);
    }

    #[test]
    fn base_only_spec_draws_no_held_out() {
        let spec = SceneSpec::default().with_held_out(false);
        for seed in 0..100 {
            let scene = render_scene(seed, &spec).unwrap();
            assert!(scene.objects.iter().all(|o| !o.held_out));
        }
    }

    #[test]
    fn caption_wording() {
        let spec = SceneSpec::default();
        let obj = SceneObject {
            combo: Combo {
                shape: ShapeKind::Square,
                color: "red".into(),
            },
            bbox: BBox::new(2.0, 3.0, 15.0, 16.0),
            held_out: false,
        };
        assert_eq!(
            object_caption(&obj, &spec),
            "a small red square near the top left"
        );
    }

    #[test]
    fn hexagon_is_wider_than_tall() {
        let (_, b) = ShapeKind::Hexagon.polygon(0.0, 0.0, 20.0);
        assert!((b.width() - 20.0).abs() < 1e-4);
        assert!((b.height() - 20.0 * 3f32.sqrt() / 2.0).abs() < 1e-3);
    }
}
