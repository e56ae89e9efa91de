//! Procedural layered scenes: parametric "toppings" on a "pizza" base over a
//! textured background, with exact per-class amodal and visible masks and
//! the depth ordering of the classes.
//!
//! All colours are 8-bit codes and rasterization is binary (pixel centres),
//! so a rendered scene is exactly the painter's composite of its layers and
//! survives a PNG round trip bit for bit.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::compositor::LayerOutput;
use crate::error::{Error, Result};
use crate::image::{dequantize, Image, Mask};

pub type Rgb = [u8; 3];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Disc,
    Ring,
    Triangle,
    Square,
    Ellipse,
    Crescent,
}

impl ShapeKind {
    /// Whether the point `(u, v)`, expressed in the shape's rotated frame
    /// relative to its centre, lies inside a shape of size `r`.
    fn contains(self, u: f32, v: f32, r: f32) -> bool {
        let d2 = u * u + v * v;
        match self {
            ShapeKind::Disc => d2 <= r * r,
            ShapeKind::Ring => d2 <= r * r && d2 >= 0.25 * r * r,
            ShapeKind::Ellipse => (u / r).powi(2) + (v / (0.55 * r)).powi(2) <= 1.0,
            ShapeKind::Square => u.abs() <= 0.8 * r && v.abs() <= 0.8 * r,
            ShapeKind::Triangle => (0..3).all(|k| {
                let a = -std::f32::consts::FRAC_PI_2 + k as f32 * 2.0 * std::f32::consts::FRAC_PI_3;
                u * a.cos() + v * a.sin() <= 0.5 * r
            }),
            ShapeKind::Crescent => d2 <= r * r && (u - 0.55 * r).powi(2) + v * v > (0.85 * r).powi(2),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassDef {
    pub name: String,
    pub shape: ShapeKind,
    pub color: Rgb,
    /// Per-instance uniform jitter applied to each colour channel.
    pub color_jitter: u8,
    /// Instance size (circumradius in pixels), sampled uniformly.
    pub size_range: [f32; 2],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackgroundKind {
    Solid,
    Stripes,
    Checker,
    Gradient,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackgroundStyle {
    pub kind: BackgroundKind,
    pub colors: [Rgb; 2],
    pub color_jitter: u8,
    /// Stripe period / checker cell size in pixels.
    pub scale_range: [f32; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaseConfig {
    pub radius_range: [f32; 2],
    pub crust_width: f32,
    pub cheese_color: Rgb,
    pub crust_color: Rgb,
    pub color_jitter: u8,
    /// Amplitude of per-pixel speckle on the cheese.
    pub speckle: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub canvas_size: usize,
    pub classes: Vec<ClassDef>,
    /// Number of distinct classes ("toppings") per scene, inclusive range.
    pub topping_count_range: [usize; 2],
    /// Instances per present class, inclusive range.
    pub instances_per_class: [usize; 2],
    pub backgrounds: Vec<BackgroundStyle>,
    pub base: BaseConfig,
    pub max_placement_attempts: usize,
}

fn class(name: &str, shape: ShapeKind, color: Rgb, size: [f32; 2]) -> ClassDef {
    ClassDef {
        name: name.into(),
        shape,
        color,
        color_jitter: 12,
        size_range: size,
    }
}

/// The ten built-in topping classes; desk configurations use a prefix.
pub fn class_catalog() -> Vec<ClassDef> {
    use ShapeKind::*;
    vec![
        class("pepperoni", Disc, [186, 36, 36], [3.5, 5.5]),
        class("basil", Ellipse, [46, 150, 58], [4.0, 6.0]),
        class("olive", Ring, [34, 34, 40], [3.0, 4.5]),
        class("pepper", Triangle, [250, 226, 24], [4.0, 6.0]),
        class("ham", Square, [228, 120, 168], [3.5, 5.0]),
        class("onion", Crescent, [238, 132, 28], [4.0, 6.0]),
        class("mushroom", Disc, [120, 76, 40], [3.0, 4.5]),
        class("pineapple", Ring, [244, 244, 196], [3.0, 4.5]),
        class("eggplant", Triangle, [126, 58, 156], [4.0, 5.5]),
        class("broccoli", Square, [38, 150, 150], [3.0, 4.5]),
    ]
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self::desk(4)
    }
}

impl SceneConfig {
    /// 64x64 canvas, the first `k` catalog classes, 0-3 toppings and 3-8
    /// instances per topping.
    pub fn desk(k: usize) -> Self {
        use BackgroundKind::*;
        let bg = |kind, a: Rgb, b: Rgb, scale: [f32; 2]| BackgroundStyle {
            kind,
            colors: [a, b],
            color_jitter: 16,
            scale_range: scale,
        };
        SceneConfig {
            canvas_size: 64,
            classes: class_catalog().into_iter().take(k).collect(),
            topping_count_range: [0, 3],
            instances_per_class: [3, 8],
            backgrounds: vec![
                bg(Solid, [92, 110, 140], [92, 110, 140], [4.0, 4.0]),
                bg(Stripes, [150, 120, 90], [110, 84, 60], [4.0, 9.0]),
                bg(Checker, [210, 210, 214], [150, 60, 60], [5.0, 10.0]),
                bg(Gradient, [60, 90, 70], [130, 150, 120], [4.0, 4.0]),
            ],
            base: BaseConfig {
                radius_range: [24.0, 29.0],
                crust_width: 3.0,
                cheese_color: [246, 214, 150],
                crust_color: [176, 114, 58],
                color_jitter: 10,
                speckle: 6,
            },
            max_placement_attempts: 200,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let k = self.classes.len();
        if !(1..=10).contains(&k) {
            return bad(format!("number of classes must be in 1..=10, got {k}"));
        }
        if self.canvas_size < 8 {
            return bad(format!("canvas_size {} too small", self.canvas_size));
        }
        let [tmin, tmax] = self.topping_count_range;
        if tmin > tmax || tmax > k {
            return bad(format!("topping_count_range [{tmin}, {tmax}] invalid for {k} classes"));
        }
        let [imin, imax] = self.instances_per_class;
        if imin == 0 || imin > imax {
            return bad(format!("instances_per_class [{imin}, {imax}] invalid"));
        }
        if self.backgrounds.is_empty() {
            return bad("no background styles".into());
        }
        let half = self.canvas_size as f32 / 2.0;
        let [rmin, rmax] = self.base.radius_range;
        if !(rmin > self.base.crust_width && rmin <= rmax && rmax <= half) {
            return bad(format!("base radius range [{rmin}, {rmax}] must fit the canvas"));
        }
        for c in &self.classes {
            let [smin, smax] = c.size_range;
            if !(smin > 0.0 && smin <= smax && smax < rmin - self.base.crust_width) {
                return bad(format!("size range of class {} must fit inside the base", c.name));
            }
        }
        for b in &self.backgrounds {
            if !(b.scale_range[0] > 0.0 && b.scale_range[0] <= b.scale_range[1]) {
                return bad("background scale range must be positive and ordered".into());
            }
        }
        Ok(())
    }

    /// Short content hash of the configuration.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        let digest = Sha256::digest(&json);
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Reads a JSON configuration; missing fields take the `desk(4)` values.
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let cfg: SceneConfig = serde_json::from_slice(&bytes).map_err(|e| Error::Json {
            path: path.to_path_buf(),
            source: e,
        })?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Background {
    pub kind: BackgroundKind,
    pub colors: [Rgb; 2],
    pub scale: f32,
    pub angle: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Base {
    pub cx: f32,
    pub cy: f32,
    pub radius: f32,
    pub crust_width: f32,
    pub cheese: Rgb,
    pub crust: Rgb,
    pub speckle: u8,
    pub speckle_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub shape: ShapeKind,
    pub cx: f32,
    pub cy: f32,
    pub size: f32,
    pub angle: f32,
    pub color: Rgb,
}

impl Instance {
    fn covers(&self, px: f32, py: f32) -> bool {
        let (dx, dy) = (px - self.cx, py - self.cy);
        if dx.abs() > self.size + 1.0 || dy.abs() > self.size + 1.0 {
            return false;
        }
        let (s, c) = self.angle.sin_cos();
        self.shape.contains(dx * c + dy * s, -dx * s + dy * c, self.size)
    }
}

/// All instances of one class, rendered at a single depth rank.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub class_id: usize,
    pub instances: Vec<Instance>,
}

/// Parametric description of a scene; everything else is derived from it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub canvas_size: usize,
    pub num_classes: usize,
    pub seed: u64,
    pub background: Background,
    pub base: Base,
    /// Bottom to top.
    pub layers: Vec<Layer>,
}

/// A scene with its multi-layer ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct LayeredScene {
    pub spec: SceneSpec,
    /// `label_vector[c] == 1` iff class `c` has at least one instance.
    pub label_vector: Vec<u8>,
    /// Present classes, bottom to top.
    pub ordering: Vec<usize>,
    pub amodal_masks: BTreeMap<usize, Mask>,
    pub visible_masks: BTreeMap<usize, Mask>,
}

fn hash_noise(seed: u64, x: usize, y: usize) -> u64 {
    splitmix64(seed ^ ((y as u64) << 32 | x as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// SplitMix64 finalizer; used to derive independent seeds.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of scene `index` in a dataset generated from `master`.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    splitmix64(splitmix64(master) ^ splitmix64(index.wrapping_add(0xD1B5_4A32_D192_ED03)))
}

fn lerp_rgb(a: Rgb, b: Rgb, t: f32) -> Rgb {
    std::array::from_fn(|c| (a[c] as f32 + (b[c] as f32 - a[c] as f32) * t).round() as u8)
}

fn to_image_rgb(c: Rgb) -> [f32; 3] {
    c.map(dequantize)
}

impl SceneSpec {
    fn background_at(&self, x: usize, y: usize) -> Rgb {
        let b = &self.background;
        let (px, py) = (x as f32 + 0.5, y as f32 + 0.5);
        let (s, c) = b.angle.sin_cos();
        let u = px * c + py * s;
        let v = -px * s + py * c;
        match b.kind {
            BackgroundKind::Solid => b.colors[0],
            BackgroundKind::Stripes => b.colors[((u / b.scale).floor() as i64).rem_euclid(2) as usize],
            BackgroundKind::Checker => {
                let i = (u / b.scale).floor() as i64 + (v / b.scale).floor() as i64;
                b.colors[i.rem_euclid(2) as usize]
            }
            BackgroundKind::Gradient => {
                let n = self.canvas_size as f32;
                let t = ((u + n) / (2.0 * n)).clamp(0.0, 1.0);
                lerp_rgb(b.colors[0], b.colors[1], t)
            }
        }
    }

    /// Colour of background plus base at a pixel.
    fn base_at(&self, x: usize, y: usize) -> Rgb {
        let b = &self.base;
        let (dx, dy) = (x as f32 + 0.5 - b.cx, y as f32 + 0.5 - b.cy);
        let d2 = dx * dx + dy * dy;
        if d2 > b.radius * b.radius {
            return self.background_at(x, y);
        }
        let inner = b.radius - b.crust_width;
        if d2 > inner * inner {
            return b.crust;
        }
        let amp = b.speckle as i32;
        if amp == 0 {
            return b.cheese;
        }
        let n = hash_noise(b.speckle_seed, x, y);
        let off = (n % (2 * amp as u64 + 1)) as i32 - amp;
        b.cheese.map(|v| (v as i32 + off).clamp(0, 255) as u8)
    }

    /// Colour of the topmost instance of `layer` covering the pixel.
    fn layer_at(layer: &Layer, x: usize, y: usize) -> Option<Rgb> {
        let (px, py) = (x as f32 + 0.5, y as f32 + 0.5);
        layer.instances.iter().rev().find(|i| i.covers(px, py)).map(|i| i.color)
    }

    /// Painter's algorithm over the layers whose class passes `include`.
    pub fn render_filtered(&self, include: impl Fn(usize) -> bool) -> Image {
        let n = self.canvas_size;
        let mut img = Image::filled(n, n, [0.0; 3]);
        let layers: Vec<&Layer> = self.layers.iter().filter(|l| include(l.class_id)).collect();
        for y in 0..n {
            for x in 0..n {
                let mut rgb = self.base_at(x, y);
                for l in &layers {
                    if let Some(c) = Self::layer_at(l, x, y) {
                        rgb = c;
                    }
                }
                img.set_pixel(y, x, to_image_rgb(rgb));
            }
        }
        img
    }

    pub fn render(&self) -> Image {
        self.render_filtered(|_| true)
    }

    /// Background and base only.
    pub fn render_base(&self) -> Image {
        self.render_filtered(|_| false)
    }

    fn layer(&self, class_id: usize) -> Option<&Layer> {
        self.layers.iter().find(|l| l.class_id == class_id)
    }

    /// Appearance and binary amodal mask of one class's layer, such that
    /// compositing it over the scene rendered without it (and without
    /// anything above) reproduces the painter's result.
    pub fn layer_output(&self, class_id: usize) -> Option<LayerOutput> {
        let layer = self.layer(class_id)?;
        let n = self.canvas_size;
        let mut app = Image::filled(n, n, [0.0; 3]);
        let mut mask = Mask::zeros(n, n);
        for y in 0..n {
            for x in 0..n {
                if let Some(c) = Self::layer_at(layer, x, y) {
                    app.set_pixel(y, x, to_image_rgb(c));
                    mask.data_mut()[y * n + x] = 1.0;
                }
            }
        }
        Some(LayerOutput { appearance: app, mask })
    }
}

impl LayeredScene {
    /// Derives labels, ordering and ground-truth masks from a spec.
    pub fn build(spec: SceneSpec) -> Self {
        let n = spec.canvas_size;
        let mut label_vector = vec![0u8; spec.num_classes];
        let mut ordering = Vec::new();
        let mut amodal = BTreeMap::new();
        for layer in &spec.layers {
            if layer.instances.is_empty() {
                continue;
            }
            label_vector[layer.class_id] = 1;
            ordering.push(layer.class_id);
            let m = Mask::from_fn(n, n, |y, x| SceneSpec::layer_at(layer, x, y).is_some());
            amodal.insert(layer.class_id, m);
        }
        let mut visible = BTreeMap::new();
        for (i, &c) in ordering.iter().enumerate() {
            let mut v = amodal[&c].clone();
            for above in &ordering[i + 1..] {
                v = v.minus(&amodal[above]);
            }
            visible.insert(c, v);
        }
        LayeredScene {
            spec,
            label_vector,
            ordering,
            amodal_masks: amodal,
            visible_masks: visible,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    pub fn render(&self) -> Image {
        self.spec.render()
    }

    /// Present classes, top to bottom.
    pub fn top_to_bottom(&self) -> Vec<usize> {
        self.ordering.iter().rev().copied().collect()
    }

    /// Rank of a class in the ordering (0 = bottom).
    pub fn depth_rank(&self, class_id: usize) -> Option<usize> {
        self.ordering.iter().position(|&c| c == class_id)
    }

    /// Checks the ground-truth invariants: visible ⊆ amodal, visible masks
    /// pairwise disjoint, every hidden amodal pixel covered by a higher
    /// class, labels consistent with the layers.
    pub fn check_invariants(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Invalid(m));
        for (c, label) in self.label_vector.iter().enumerate() {
            if (*label == 1) != self.amodal_masks.contains_key(&c) {
                return fail(format!("label of class {c} disagrees with layers"));
            }
        }
        for (i, &c) in self.ordering.iter().enumerate() {
            let (am, vis) = (&self.amodal_masks[&c], &self.visible_masks[&c]);
            if !vis.is_subset_of(am) {
                return fail(format!("visible mask of class {c} leaves its amodal mask"));
            }
            let hidden = am.minus(vis);
            let mut above = Mask::zeros(am.height(), am.width());
            for a in &self.ordering[i + 1..] {
                above = above.union(&self.amodal_masks[a]);
            }
            if !hidden.is_subset_of(&above) {
                return fail(format!("hidden pixels of class {c} not covered by a higher class"));
            }
            for &d in &self.ordering[i + 1..] {
                if !vis.intersect(&self.visible_masks[&d]).is_empty() {
                    return fail(format!("visible masks of classes {c} and {d} overlap"));
                }
            }
        }
        Ok(())
    }
}

fn jitter(rng: &mut ChaCha8Rng, c: Rgb, amp: u8) -> Rgb {
    if amp == 0 {
        return c;
    }
    let a = amp as i32;
    c.map(|v| (v as i32 + rng.random_range(-a..=a)).clamp(0, 255) as u8)
}

fn uniform(rng: &mut ChaCha8Rng, [lo, hi]: [f32; 2]) -> f32 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

/// Samples a scene: a uniform topping count, a uniform subset of classes of
/// that size, a uniformly random depth order and per-instance placements
/// inside the base. Deterministic in `(config, seed)`.
pub fn generate_scene(config: &SceneConfig, seed: u64) -> Result<LayeredScene> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = config.canvas_size as f32;

    let style = &config.backgrounds[rng.random_range(0..config.backgrounds.len())];
    let background = Background {
        kind: style.kind,
        colors: [
            jitter(&mut rng, style.colors[0], style.color_jitter),
            jitter(&mut rng, style.colors[1], style.color_jitter),
        ],
        scale: uniform(&mut rng, style.scale_range),
        angle: rng.random_range(0.0..std::f32::consts::PI),
    };

    let bc = &config.base;
    let radius = uniform(&mut rng, bc.radius_range);
    let slack = (n / 2.0 - radius).clamp(0.0, 2.0);
    let base = Base {
        cx: n / 2.0 + uniform(&mut rng, [-slack, slack]),
        cy: n / 2.0 + uniform(&mut rng, [-slack, slack]),
        radius,
        crust_width: bc.crust_width,
        cheese: jitter(&mut rng, bc.cheese_color, bc.color_jitter),
        crust: jitter(&mut rng, bc.crust_color, bc.color_jitter),
        speckle: bc.speckle,
        speckle_seed: rng.random(),
    };

    let k = config.num_classes();
    let [tmin, tmax] = config.topping_count_range;
    let count = rng.random_range(tmin..=tmax);
    let mut classes: Vec<usize> = rand::seq::index::sample(&mut rng, k, count).into_vec();
    classes.shuffle(&mut rng);

    let inner = base.radius - base.crust_width;
    let mut layers = Vec::with_capacity(count);
    for &class_id in &classes {
        let def = &config.classes[class_id];
        let [imin, imax] = config.instances_per_class;
        let n_inst = rng.random_range(imin..=imax);
        let mut instances = Vec::with_capacity(n_inst);
        for _ in 0..n_inst {
            let size = uniform(&mut rng, def.size_range);
            let avail = inner - size;
            let mut placed = None;
            for _ in 0..config.max_placement_attempts {
                if avail <= 0.0 {
                    break;
                }
                let dx = rng.random_range(-avail..avail);
                let dy = rng.random_range(-avail..avail);
                if dx * dx + dy * dy <= avail * avail {
                    placed = Some((base.cx + dx, base.cy + dy));
                    break;
                }
            }
            let Some((cx, cy)) = placed else {
                return Err(Error::Placement {
                    class: class_id,
                    name: def.name.clone(),
                    attempts: config.max_placement_attempts,
                });
            };
            instances.push(Instance {
                shape: def.shape,
                cx,
                cy,
                size,
                angle: rng.random_range(0.0..std::f32::consts::TAU),
                color: jitter(&mut rng, def.color, def.color_jitter),
            });
        }
        layers.push(Layer { class_id, instances });
    }

    Ok(LayeredScene::build(SceneSpec {
        canvas_size: config.canvas_size,
        num_classes: k,
        seed,
        background,
        base,
        layers,
    }))
}

/// Writes a scene's parametric record as JSON.
pub fn save_scene(scene: &LayeredScene, path: &Path) -> Result<()> {
    let json = serde_json::to_vec(&scene.spec).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })?;
    std::fs::write(path, json).map_err(|e| Error::io(path, e))
}

pub fn load_scene(path: &Path) -> Result<LayeredScene> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let spec: SceneSpec = serde_json::from_slice(&bytes).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(LayeredScene::build(spec))
}
