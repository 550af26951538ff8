//! Procedural scenes with exact depth, template captions, and the dataset
//! directory format.
//!
//! Camera frame: `x` right, `y` up, `z` away from the camera. Orthographic
//! views span `[-ORTHO_HALF_SPAN, ORTHO_HALF_SPAN]` meters horizontally.
//! Background pixels are a valid surface at the far plane, so masks are all
//! ones.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{self, Raster};
use crate::rng::{self, tag, Stream};
use crate::templates::Templates;
use crate::vocab::{TokenSequence, Vocabulary, UNK};

pub const BACKGROUND_ALBEDO: f64 = 0.1;
pub const AMBIENT: f64 = 0.1;
pub const ORTHO_HALF_SPAN: f64 = 2.0;
pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const VOCABULARY_FILE: &str = "vocabulary.json";

const RECT_LABELS: [&str; 3] = ["cube", "box", "panel"];
const SPHERE_LABELS: [&str; 2] = ["sphere", "ball"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Shape {
    /// Fronto-parallel square.
    Rectangle,
    Sphere,
    /// Horizontal plane at `center.y`.
    FloorPlane,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub shape: Shape,
    pub center: [f64; 3],
    /// Half side length (rectangle) or radius (sphere).
    pub half_extent: f64,
    pub albedo: f64,
    pub label: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Projection {
    Orthographic,
    Perspective,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraSpec {
    pub mode: Projection,
    pub height: usize,
    pub width: usize,
    /// Focal length in pixels (perspective only).
    pub focal: f64,
    pub far: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AmbiguityTag {
    None,
    LeftNear,
    RightNear,
}

impl AmbiguityTag {
    pub fn flipped(self) -> Self {
        match self {
            AmbiguityTag::None => AmbiguityTag::None,
            AmbiguityTag::LeftNear => AmbiguityTag::RightNear,
            AmbiguityTag::RightNear => AmbiguityTag::LeftNear,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub objects: Vec<ObjectSpec>,
    pub camera: CameraSpec,
    /// Unit vector toward the light (perspective shading only).
    pub light: [f64; 3],
    pub ambiguity: AmbiguityTag,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub height: usize,
    pub width: usize,
    pub focal: f64,
    pub far: f64,
    pub z_min: f64,
    pub z_max: f64,
    pub min_objects: usize,
    pub max_objects: usize,
    pub ambiguous_fraction: f64,
    /// Depths of the two rectangles in an ambiguity scene.
    pub near_depth: f64,
    pub far_depth: f64,
    pub min_size: f64,
    pub max_size: f64,
    pub floor_height: f64,
    pub light: [f64; 3],
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            focal: 64.0,
            far: 10.0,
            z_min: 1.5,
            z_max: 9.0,
            min_objects: 1,
            max_objects: 3,
            ambiguous_fraction: 0.0,
            near_depth: 2.0,
            far_depth: 8.0,
            min_size: 0.3,
            max_size: 0.8,
            floor_height: -1.0,
            light: [-0.3, 0.7, -0.6],
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.height < 8 || self.width < 8 {
            return bad("image size must be at least 8x8");
        }
        if !(self.focal > 0.0 && self.far > 0.0) {
            return bad("focal length and far plane must be positive");
        }
        if !(self.z_min > 0.0 && self.z_min < self.z_max && self.z_max < self.far) {
            return bad("need 0 < z_min < z_max < far");
        }
        if self.min_objects == 0 || self.min_objects > self.max_objects {
            return bad("object-count range is empty");
        }
        if !(0.0..=1.0).contains(&self.ambiguous_fraction) {
            return bad("ambiguous_fraction must be in [0, 1]");
        }
        if !(self.near_depth > 0.0 && self.near_depth < self.far_depth && self.far_depth < self.far) {
            return bad("need 0 < near_depth < far_depth < far");
        }
        if !(self.min_size > 0.0 && self.min_size <= self.max_size) {
            return bad("need 0 < min_size <= max_size");
        }
        let vspan = ORTHO_HALF_SPAN * self.height as f64 / self.width as f64;
        if self.max_size + 0.1 > (ORTHO_HALF_SPAN / 2.0).min(vspan) {
            return bad("max_size too large for the orthographic view");
        }
        if !(self.floor_height < 0.0) {
            return bad("floor must be below the camera");
        }
        if norm(self.light) == 0.0 {
            return bad("light direction must be nonzero");
        }
        Ok(())
    }

    fn camera(&self, mode: Projection) -> CameraSpec {
        CameraSpec {
            mode,
            height: self.height,
            width: self.width,
            focal: self.focal,
            far: self.far,
        }
    }
}

fn norm(v: [f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

fn unit(v: [f64; 3]) -> [f64; 3] {
    let n = norm(v);
    [v[0] / n, v[1] / n, v[2] / n]
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

impl SceneSpec {
    pub fn validate(&self, vocab: &Vocabulary) -> Result<()> {
        let c = &self.camera;
        if c.height < 8 || c.width < 8 || !(c.focal > 0.0) || !(c.far > 0.0) {
            return Err(Error::InvalidData("invalid camera".into()));
        }
        for o in &self.objects {
            if !(o.center[2] > 0.0 || o.shape == Shape::FloorPlane)
                || !(o.half_extent > 0.0)
                || !(0.0..=1.0).contains(&o.albedo)
            {
                return Err(Error::InvalidData(format!("invalid object {o:?}")));
            }
            if vocab.id(&o.label) == UNK {
                return Err(Error::InvalidData(format!("label {:?} not in vocabulary", o.label)));
            }
        }
        if self.ambiguity != AmbiguityTag::None {
            let ok = c.mode == Projection::Orthographic
                && self.objects.len() == 2
                && self.objects.iter().all(|o| o.shape == Shape::Rectangle)
                && self.objects[0].albedo == self.objects[1].albedo;
            if !ok {
                return Err(Error::InvalidData(
                    "ambiguity scenes need two equal-albedo rectangles under an orthographic camera"
                        .into(),
                ));
            }
        }
        Ok(())
    }
}

/// Draws a scene; with probability `ambiguous_fraction` it is an ambiguity
/// scene with a random tag.
pub fn generate_scene(rng: &mut Stream, cfg: &GeneratorConfig) -> Result<SceneSpec> {
    cfg.validate()?;
    if rng.random::<f64>() < cfg.ambiguous_fraction {
        let tag = if rng.random::<bool>() {
            AmbiguityTag::LeftNear
        } else {
            AmbiguityTag::RightNear
        };
        let geom = pair_geometry(rng, cfg);
        return Ok(geom.scene(cfg, tag));
    }
    Ok(perspective_scene(rng, cfg))
}

fn perspective_scene(rng: &mut Stream, cfg: &GeneratorConfig) -> SceneSpec {
    let count = rng.random_range(cfg.min_objects..=cfg.max_objects);
    let mut objects = vec![ObjectSpec {
        shape: Shape::FloorPlane,
        center: [0.0, cfg.floor_height, 1.0],
        half_extent: 1.0,
        albedo: 0.5,
        label: "floor".into(),
    }];
    let half_fov = cfg.width as f64 / 2.0 / cfg.focal;
    for _ in 0..count {
        let sphere = rng.random::<bool>();
        let z = rng.random_range(cfg.z_min..=cfg.z_max);
        let size = rng.random_range(cfg.min_size..=cfg.max_size);
        let reach = 0.8 * z * half_fov;
        let x = rng.random_range(-reach..=reach);
        let albedo = rng.random_range(0.3..=1.0);
        let label = if sphere {
            SPHERE_LABELS[rng.random_range(0..SPHERE_LABELS.len())]
        } else {
            RECT_LABELS[rng.random_range(0..RECT_LABELS.len())]
        };
        objects.push(ObjectSpec {
            shape: if sphere { Shape::Sphere } else { Shape::Rectangle },
            center: [x, cfg.floor_height + size, z],
            half_extent: size,
            albedo,
            label: label.into(),
        });
    }
    SceneSpec {
        objects,
        camera: cfg.camera(Projection::Perspective),
        light: unit(cfg.light),
        ambiguity: AmbiguityTag::None,
    }
}

/// Everything about an ambiguity scene except which side is near.
#[derive(Debug, Clone)]
struct PairGeometry {
    left: [f64; 2],
    right: [f64; 2],
    left_size: f64,
    right_size: f64,
    albedo: f64,
    label: &'static str,
}

fn pair_geometry(rng: &mut Stream, cfg: &GeneratorConfig) -> PairGeometry {
    let margin = 0.1;
    let vspan = ORTHO_HALF_SPAN * cfg.height as f64 / cfg.width as f64;
    let place = |rng: &mut Stream, sign: f64| {
        let h = rng.random_range(cfg.min_size..=cfg.max_size);
        let x = rng.random_range(h + margin..=ORTHO_HALF_SPAN - h - margin) * sign;
        let y = rng.random_range(-vspan + h + margin..=vspan - h - margin);
        (h, [x, y])
    };
    let (left_size, left) = place(rng, -1.0);
    let (right_size, right) = place(rng, 1.0);
    PairGeometry {
        left,
        right,
        left_size,
        right_size,
        albedo: rng.random_range(0.4..=1.0),
        label: RECT_LABELS[rng.random_range(0..RECT_LABELS.len())],
    }
}

impl PairGeometry {
    fn scene(&self, cfg: &GeneratorConfig, tag: AmbiguityTag) -> SceneSpec {
        let (zl, zr) = match tag {
            AmbiguityTag::RightNear => (cfg.far_depth, cfg.near_depth),
            _ => (cfg.near_depth, cfg.far_depth),
        };
        let rect = |c: [f64; 2], h: f64, z: f64| ObjectSpec {
            shape: Shape::Rectangle,
            center: [c[0], c[1], z],
            half_extent: h,
            albedo: self.albedo,
            label: self.label.into(),
        };
        SceneSpec {
            objects: vec![
                rect(self.left, self.left_size, zl),
                rect(self.right, self.right_size, zr),
            ],
            camera: cfg.camera(Projection::Orthographic),
            light: unit(cfg.light),
            ambiguity: tag,
        }
    }
}

struct Hit {
    depth: f64,
    normal: [f64; 3],
    albedo: f64,
}

fn intersect(o: &ObjectSpec, origin: [f64; 3], d: [f64; 3]) -> Option<Hit> {
    // `d.z == 1` for every ray, so the ray parameter is the z-depth.
    let [cx, cy, cz] = o.center;
    let h = o.half_extent;
    match o.shape {
        Shape::Rectangle => {
            let t = cz - origin[2];
            let (x, y) = (origin[0] + t * d[0], origin[1] + t * d[1]);
            ((x - cx).abs() <= h && (y - cy).abs() <= h && t > 0.0).then_some(Hit {
                depth: t,
                normal: [0.0, 0.0, -1.0],
                albedo: o.albedo,
            })
        }
        Shape::Sphere => {
            let oc = [origin[0] - cx, origin[1] - cy, origin[2] - cz];
            let a = dot(d, d);
            let b = dot(d, oc);
            let c = dot(oc, oc) - h * h;
            let disc = b * b - a * c;
            if disc < 0.0 {
                return None;
            }
            let t = (-b - disc.sqrt()) / a;
            if t <= 0.0 {
                return None;
            }
            let p = [origin[0] + t * d[0], origin[1] + t * d[1], origin[2] + t * d[2]];
            Some(Hit {
                depth: p[2],
                normal: [(p[0] - cx) / h, (p[1] - cy) / h, (p[2] - cz) / h],
                albedo: o.albedo,
            })
        }
        Shape::FloorPlane => {
            if d[1] >= 0.0 {
                return None;
            }
            let t = (cy - origin[1]) / d[1];
            (t > 0.0).then_some(Hit {
                depth: t,
                normal: [0.0, 1.0, 0.0],
                albedo: o.albedo,
            })
        }
    }
}

/// Casts one ray per pixel; returns (image, depth, mask).
///
/// Image values are quantized to multiples of 1/255 so they survive the 8-bit
/// image format unchanged.
pub fn render(scene: &SceneSpec) -> (Raster<f32>, Raster<f32>, Raster<u8>) {
    let c = &scene.camera;
    let (h, w) = (c.height, c.width);
    let mut image = Raster::filled(h, w, 3, 0.0f32);
    let mut depth = Raster::filled(h, w, 1, c.far as f32);
    let mask = Raster::filled(h, w, 1, 1u8);
    let pixel = 2.0 * ORTHO_HALF_SPAN / w as f64;
    for i in 0..h {
        for j in 0..w {
            let u = j as f64 + 0.5 - w as f64 / 2.0;
            let v = h as f64 / 2.0 - i as f64 - 0.5;
            let (origin, dir) = match c.mode {
                Projection::Orthographic => ([u * pixel, v * pixel, 0.0], [0.0, 0.0, 1.0]),
                Projection::Perspective => ([0.0; 3], [u / c.focal, v / c.focal, 1.0]),
            };
            let hit = scene
                .objects
                .iter()
                .filter_map(|o| intersect(o, origin, dir))
                .filter(|hit| hit.depth <= c.far)
                .min_by(|a, b| a.depth.total_cmp(&b.depth));
            let shade = match &hit {
                None => BACKGROUND_ALBEDO,
                Some(hit) => match c.mode {
                    Projection::Orthographic => hit.albedo,
                    Projection::Perspective => {
                        (hit.albedo * dot(hit.normal, scene.light).max(0.0) + AMBIENT).clamp(0.0, 1.0)
                    }
                },
            };
            let q = raster::quantize(shade as f32) as f32 / 255.0;
            for ch in 0..3 {
                image.set(i, j, ch, q);
            }
            if let Some(hit) = hit {
                depth.set(i, j, 0, hit.depth as f32);
            }
        }
    }
    (image, depth, mask)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Detail {
    Blank,
    Generic,
    Full,
}

fn position_word<'a>(t: &'a Templates, col: f64, width: usize) -> &'a str {
    let w = width as f64;
    if col < w / 3.0 {
        &t.positions.left
    } else if col >= 2.0 * w / 3.0 {
        &t.positions.right
    } else {
        &t.positions.center
    }
}

fn depth_word<'a>(t: &'a Templates, z: f64, z_min: f64, z_max: f64) -> &'a str {
    let third = (z_max - z_min) / 3.0;
    if z < z_min + third {
        &t.depths.near
    } else if z < z_min + 2.0 * third {
        &t.depths.middle
    } else {
        &t.depths.far
    }
}

/// Caption at the requested detail level. Full captions of ordinary scenes
/// mention every non-floor object (in an order drawn from `rng`); ambiguity
/// scenes use the two-rectangle template.
pub fn caption_for(scene: &SceneSpec, detail: Detail, cfg: &GeneratorConfig, rng: &mut Stream) -> String {
    let t = Templates::shipped();
    match detail {
        Detail::Blank => String::new(),
        Detail::Generic => t.generic.clone(),
        Detail::Full => {
            if scene.ambiguity != AmbiguityTag::None {
                let (l, r) = match scene.ambiguity {
                    AmbiguityTag::LeftNear => (&t.depths.near, &t.depths.far),
                    _ => (&t.depths.far, &t.depths.near),
                };
                return t
                    .ambiguity
                    .replace("{label}", &scene.objects[0].label)
                    .replace("{left_depth}", l)
                    .replace("{right_depth}", r);
            }
            let c = &scene.camera;
            let mut objs: Vec<&ObjectSpec> = scene
                .objects
                .iter()
                .filter(|o| o.shape != Shape::FloorPlane)
                .collect();
            objs.shuffle(rng);
            let phrases: Vec<String> = objs
                .iter()
                .map(|o| {
                    let col = match c.mode {
                        Projection::Perspective => {
                            c.width as f64 / 2.0 + c.focal * o.center[0] / o.center[2]
                        }
                        Projection::Orthographic => {
                            c.width as f64 / 2.0 + o.center[0] * c.width as f64 / (2.0 * ORTHO_HALF_SPAN)
                        }
                    };
                    t.object
                        .replace("{label}", &o.label)
                        .replace("{position}", position_word(&t, col, c.width))
                        .replace("{depth}", depth_word(&t, o.center[2], cfg.z_min, cfg.z_max))
                })
                .collect();
            phrases.join(&t.joiner)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: Raster<f32>,
    pub depth: Raster<f32>,
    pub mask: Raster<u8>,
    pub caption: String,
    pub ambiguity: AmbiguityTag,
    pub seed: u64,
}

impl Sample {
    pub fn tokens(&self, vocab: &Vocabulary) -> TokenSequence {
        vocab.tokenize(&self.caption)
    }

    pub fn depth_f64(&self) -> Vec<f64> {
        self.depth.data.iter().map(|&v| v as f64).collect()
    }

    pub fn mask_bool(&self) -> Vec<bool> {
        self.mask.data.iter().map(|&m| m != 0).collect()
    }
}

/// Swaps the words "left" and "right", keeping surrounding punctuation.
pub fn swap_sides(caption: &str) -> String {
    caption
        .split(' ')
        .map(|word| {
            let start = word.find(|c: char| !c.is_ascii_punctuation()).unwrap_or(word.len());
            let end = word
                .rfind(|c: char| !c.is_ascii_punctuation())
                .map_or(start, |i| i + 1);
            let core = &word[start..end.max(start)];
            let swapped = match core {
                "left" => "right",
                "right" => "left",
                "Left" => "Right",
                "Right" => "Left",
                _ => return word.to_string(),
            };
            format!("{}{swapped}{}", &word[..start], &word[end..])
        })
        .collect::<Vec<_>>()
        .join(" ")
}

/// Mirrors the rasters and swaps direction words so the caption stays true.
pub fn horizontal_flip(s: &Sample) -> Sample {
    Sample {
        id: s.id.clone(),
        image: s.image.flip_horizontal(),
        depth: s.depth.flip_horizontal(),
        mask: s.mask.flip_horizontal(),
        caption: swap_sides(&s.caption),
        ambiguity: s.ambiguity.flipped(),
        seed: s.seed,
    }
}

fn sample_from(id: String, seed: u64, scene: &SceneSpec, caption: String) -> Sample {
    let (image, depth, mask) = render(scene);
    Sample {
        id,
        image,
        depth,
        mask,
        caption,
        ambiguity: scene.ambiguity,
        seed,
    }
}

fn pair_scenes(rng: &mut Stream, cfg: &GeneratorConfig) -> Result<(SceneSpec, SceneSpec)> {
    cfg.validate()?;
    let geom = pair_geometry(rng, cfg);
    Ok((
        geom.scene(cfg, AmbiguityTag::LeftNear),
        geom.scene(cfg, AmbiguityTag::RightNear),
    ))
}

/// Two samples with identical images: A puts the left rectangle at
/// `near_depth`, B mirrors the assignment. Captions are the full ones.
pub fn make_ambiguous_pair(rng: &mut Stream, cfg: &GeneratorConfig) -> Result<(Sample, Sample)> {
    let (a, b) = pair_scenes(rng, cfg)?;
    let ca = caption_for(&a, Detail::Full, cfg, rng);
    let cb = caption_for(&b, Detail::Full, cfg, rng);
    Ok((
        sample_from(String::new(), 0, &a, ca),
        sample_from(String::new(), 0, &b, cb),
    ))
}

/// What `gen` produces: ambiguity pairs plus ordinary perspective scenes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub pairs: usize,
    pub scenes: usize,
    pub detail: Detail,
    pub scene: GeneratorConfig,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            pairs: 2000,
            scenes: 2000,
            detail: Detail::Full,
            scene: GeneratorConfig::default(),
        }
    }
}

pub fn pair_id(i: usize, side: char) -> String {
    format!("pair-{i:05}-{side}")
}

pub fn scene_id(i: usize) -> String {
    format!("scene-{i:05}")
}

/// Deterministic sample list: pairs (ids `pair-NNNNN-a/b`) then scenes
/// (`scene-NNNNN`). Every sample's stream depends only on `(seed, index)`.
pub fn generate_samples(cfg: &DatasetConfig, seed: u64) -> Result<Vec<Sample>> {
    cfg.scene.validate()?;
    let mut out = Vec::with_capacity(2 * cfg.pairs + cfg.scenes);
    for i in 0..cfg.pairs {
        let s = rng::derive_seed(seed, &[tag::PAIR, i as u64]);
        let (a, b) = pair_scenes(&mut rng::stream(s, &[]), &cfg.scene)?;
        let mut r = rng::stream(seed, &[tag::CAPTION, i as u64]);
        let ca = caption_for(&a, cfg.detail, &cfg.scene, &mut r);
        let cb = caption_for(&b, cfg.detail, &cfg.scene, &mut r);
        out.push(sample_from(pair_id(i, 'a'), s, &a, ca));
        out.push(sample_from(pair_id(i, 'b'), s, &b, cb));
    }
    let scene_cfg = GeneratorConfig {
        ambiguous_fraction: 0.0,
        ..cfg.scene.clone()
    };
    for i in 0..cfg.scenes {
        let s = rng::derive_seed(seed, &[tag::SCENE, i as u64]);
        let scene = generate_scene(&mut rng::stream(s, &[]), &scene_cfg)?;
        let caption = caption_for(
            &scene,
            cfg.detail,
            &cfg.scene,
            &mut rng::stream(seed, &[tag::CAPTION, (cfg.pairs + i) as u64]),
        );
        out.push(sample_from(scene_id(i), s, &scene, caption));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub image: String,
    pub depth: String,
    pub mask: String,
    pub caption: String,
    pub ambiguity_tag: AmbiguityTag,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub vocabulary: String,
    pub entries: Vec<ManifestEntry>,
}

/// Writes `{id}.ppm`, `{id}.depth.pdr`, `{id}.mask.pdr` per sample, the
/// shipped vocabulary and `manifest.json` into `dir`.
pub fn write_dataset(samples: &[Sample], dir: &Path) -> Result<Manifest> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut seen = HashSet::new();
    let mut entries = Vec::with_capacity(samples.len());
    for s in samples {
        if s.id.is_empty() || s.id.contains(['/', '\\']) || !seen.insert(s.id.clone()) {
            return Err(Error::InvalidData(format!("bad or duplicate sample id {:?}", s.id)));
        }
        let e = ManifestEntry {
            id: s.id.clone(),
            image: format!("{}.ppm", s.id),
            depth: format!("{}.depth.pdr", s.id),
            mask: format!("{}.mask.pdr", s.id),
            caption: s.caption.clone(),
            ambiguity_tag: s.ambiguity,
            seed: s.seed,
        };
        raster::write_ppm(&dir.join(&e.image), &s.image)?;
        raster::write_pdr(&dir.join(&e.depth), &s.depth)?;
        raster::write_pdr(&dir.join(&e.mask), &s.mask)?;
        entries.push(e);
    }
    let vpath = dir.join(VOCABULARY_FILE);
    std::fs::write(&vpath, Vocabulary::shipped_json()).map_err(|e| Error::io(&vpath, e))?;
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        vocabulary: VOCABULARY_FILE.into(),
        entries,
    };
    let mpath = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(&mpath, text + "\n").map_err(|e| Error::io(&mpath, e))?;
    Ok(manifest)
}

/// A dataset directory whose samples are parsed on demand.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub dir: PathBuf,
    pub manifest: Manifest,
    pub vocab: Vocabulary,
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let mpath = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::data(&mpath, e.to_string()))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::data(
            &mpath,
            format!(
                "format version {} (expected {FORMAT_VERSION})",
                manifest.format_version
            ),
        ));
    }
    let mut seen = HashSet::new();
    for e in &manifest.entries {
        if !seen.insert(e.id.as_str()) {
            return Err(Error::data(&mpath, format!("duplicate id {:?}", e.id)));
        }
        for f in [&e.image, &e.depth, &e.mask] {
            let p = dir.join(f);
            if !p.is_file() {
                return Err(Error::data(p, "referenced file is missing"));
            }
        }
    }
    let vocab = Vocabulary::load(&dir.join(&manifest.vocabulary))?;
    Ok(Dataset {
        dir: dir.to_path_buf(),
        manifest,
        vocab,
    })
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.manifest.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.entries.is_empty()
    }

    pub fn load(&self, index: usize) -> Result<Sample> {
        let e = &self.manifest.entries[index];
        let image = raster::read_ppm(&self.dir.join(&e.image))?;
        let depth: Raster<f32> = raster::read_pdr(&self.dir.join(&e.depth))?;
        let mask: Raster<u8> = raster::read_pdr(&self.dir.join(&e.mask))?;
        let dims = |r: (usize, usize, usize)| (r.0, r.1);
        let want = (image.height, image.width);
        for (path, got, ch) in [
            (&e.depth, (depth.height, depth.width, depth.channels), 1),
            (&e.mask, (mask.height, mask.width, mask.channels), 1),
        ] {
            if dims(got) != want || got.2 != ch {
                return Err(Error::data(
                    self.dir.join(path),
                    format!("raster is {got:?}, image is {want:?}"),
                ));
            }
        }
        Ok(Sample {
            id: e.id.clone(),
            image,
            depth,
            mask,
            caption: e.caption.clone(),
            ambiguity: e.ambiguity_tag,
            seed: e.seed,
        })
    }

    pub fn load_all(&self) -> Result<Vec<Sample>> {
        (0..self.len()).map(|i| self.load(i)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_rectangle_depth() {
        let scene = SceneSpec {
            objects: vec![ObjectSpec {
                shape: Shape::Rectangle,
                center: [0.0, 0.0, 5.0],
                half_extent: 0.5,
                albedo: 0.8,
                label: "cube".into(),
            }],
            camera: GeneratorConfig::default().camera(Projection::Orthographic),
            light: [0.0, 1.0, 0.0],
            ambiguity: AmbiguityTag::None,
        };
        let (img, depth, mask) = render(&scene);
        assert!(mask.data.iter().all(|&m| m == 1));
        let covered = depth.data.iter().filter(|&&d| d == 5.0).count();
        let rest = depth.data.iter().filter(|&&d| d == 10.0).count();
        // 1 m square at 16 px/m
        assert_eq!(covered, 16 * 16);
        assert_eq!(covered + rest, 64 * 64);
        assert_eq!(img.at(32, 32, 0), raster::quantize(0.8) as f32 / 255.0);
    }

    #[test]
    fn empty_scene_is_background() {
        let scene = SceneSpec {
            objects: vec![],
            camera: GeneratorConfig::default().camera(Projection::Perspective),
            light: [0.0, 1.0, 0.0],
            ambiguity: AmbiguityTag::None,
        };
        let (img, depth, _) = render(&scene);
        assert!(depth.data.iter().all(|&d| d == 10.0));
        let bg = raster::quantize(BACKGROUND_ALBEDO as f32) as f32 / 255.0;
        assert!(img.data.iter().all(|&v| v == bg));
    }

    #[test]
    fn pair_contract() {
        let cfg = GeneratorConfig::default();
        let (a, b) = make_ambiguous_pair(&mut rng::stream(3, &[]), &cfg).unwrap();
        assert_eq!(a.image, b.image);
        assert_eq!(a.caption, "the left cube is near and the right cube is far".replace("cube", label_of(&a)));
        assert_eq!(b.caption, "the left cube is far and the right cube is near".replace("cube", label_of(&a)));
        let w = cfg.width;
        let mut diff = 0.0f32;
        for i in 0..cfg.height {
            for j in 0..w {
                let (da, db) = (a.depth.at(i, j, 0), b.depth.at(i, j, 0));
                if da < 10.0 {
                    let expect = if j < w / 2 { (2.0, 8.0) } else { (8.0, 2.0) };
                    assert_eq!((da, db), expect);
                    diff = diff.max((da - db).abs());
                }
            }
        }
        assert!(diff >= 3.0);
        assert!(make_ambiguous_pair(
            &mut rng::stream(3, &[]),
            &GeneratorConfig {
                near_depth: 8.0,
                ..cfg
            }
        )
        .is_err());
    }

    fn label_of(s: &Sample) -> &str {
        s.caption.split(' ').nth(2).unwrap()
    }

    #[test]
    fn generation_fraction_and_determinism() {
        let mut cfg = GeneratorConfig {
            ambiguous_fraction: 1.0,
            ..Default::default()
        };
        for i in 0..20 {
            let s = generate_scene(&mut rng::stream(i, &[]), &cfg).unwrap();
            assert_ne!(s.ambiguity, AmbiguityTag::None);
            s.validate(&Vocabulary::shipped()).unwrap();
        }
        cfg.ambiguous_fraction = 0.0;
        for i in 0..20 {
            let s = generate_scene(&mut rng::stream(i, &[]), &cfg).unwrap();
            assert_eq!(s.ambiguity, AmbiguityTag::None);
            s.validate(&Vocabulary::shipped()).unwrap();
        }
        let a = generate_scene(&mut rng::stream(42, &[]), &cfg).unwrap();
        let b = generate_scene(&mut rng::stream(42, &[]), &cfg).unwrap();
        assert_eq!(a, b);
        cfg.z_min = 0.0;
        assert!(matches!(generate_scene(&mut rng::stream(1, &[]), &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn caption_levels() {
        let cfg = GeneratorConfig::default();
        let scene = SceneSpec {
            objects: vec![ObjectSpec {
                shape: Shape::Sphere,
                center: [0.0, -0.5, 2.0],
                half_extent: 0.5,
                albedo: 0.7,
                label: "sphere".into(),
            }],
            camera: cfg.camera(Projection::Perspective),
            light: unit(cfg.light),
            ambiguity: AmbiguityTag::None,
        };
        let mut r = rng::stream(0, &[]);
        assert_eq!(caption_for(&scene, Detail::Blank, &cfg, &mut r), "");
        assert_eq!(caption_for(&scene, Detail::Generic, &cfg, &mut r), "an image of simple shapes");
        assert_eq!(caption_for(&scene, Detail::Full, &cfg, &mut r), "a sphere in the center, near");
    }

    #[test]
    fn generated_captions_have_no_unknown_words() {
        let v = Vocabulary::shipped();
        let cfg = DatasetConfig {
            pairs: 5,
            scenes: 20,
            ..Default::default()
        };
        for s in generate_samples(&cfg, 9).unwrap() {
            assert!(!s.tokens(&v).ids.contains(&UNK), "{}", s.caption);
            assert!(s.depth.data.iter().all(|&d| d > 0.0 && d <= 10.0));
        }
    }

    #[test]
    fn flip_swaps_direction_words() {
        assert_eq!(
            swap_sides("the left cube is near and the right cube is far"),
            "the right cube is near and the left cube is far"
        );
        assert_eq!(swap_sides("a ball on the left, far"), "a ball on the right, far");
        let cfg = DatasetConfig {
            pairs: 1,
            scenes: 1,
            ..Default::default()
        };
        for s in generate_samples(&cfg, 1).unwrap() {
            let f = horizontal_flip(&s);
            assert_eq!(f.depth.at(5, 0, 0), s.depth.at(5, 63, 0));
            assert_eq!(horizontal_flip(&f), s);
        }
    }
}
