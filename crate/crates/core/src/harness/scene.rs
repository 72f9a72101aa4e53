//! Synthetic scenes: rectangles and ellipses of flat class color composited
//! over a background class, plus per-pixel noise.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::boundary::LabelMap;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::rng::{child_seed, substream};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub height: u32,
    pub width: u32,
    pub num_classes: u16,
    pub min_regions: u32,
    pub max_regions: u32,
    /// Probability that a scene has no regions at all.
    pub uniform_fraction: f64,
    /// Region extent range in pixels (side, or diameter for ellipses).
    pub min_extent: u32,
    pub max_extent: u32,
    pub ellipse_probability: f64,
    /// Standard deviation of the per-channel Gaussian noise.
    pub noise: f64,
}

impl SceneSpec {
    pub fn desk(height: u32, width: u32, num_classes: u16) -> Self {
        SceneSpec {
            height,
            width,
            num_classes,
            min_regions: 1,
            max_regions: 3,
            uniform_fraction: 0.25,
            min_extent: 8,
            max_extent: height.min(width) / 2,
            ellipse_probability: 0.5,
            noise: 0.03,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(format!("scene spec: {m}")));
        if self.height == 0 || self.width == 0 {
            return fail("empty image");
        }
        if self.num_classes < 2 && self.max_regions > 0 {
            return fail("regions need at least two classes");
        }
        if self.min_regions > self.max_regions || self.min_extent == 0 || self.min_extent > self.max_extent {
            return fail("inverted or empty ranges");
        }
        if !(0.0..=1.0).contains(&self.uniform_fraction) || !(0.0..=1.0).contains(&self.ellipse_probability) {
            return fail("probabilities must lie in [0, 1]");
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return fail("noise must be non-negative");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case")]
pub enum Region {
    Rect { y0: u32, x0: u32, h: u32, w: u32, class: u16 },
    Ellipse { cy: f64, cx: f64, ry: f64, rx: f64, class: u16 },
}

impl Region {
    pub fn class(&self) -> u16 {
        match *self {
            Region::Rect { class, .. } | Region::Ellipse { class, .. } => class,
        }
    }

    /// Whether the pixel's center lies inside the region.
    pub fn contains(&self, y: u32, x: u32) -> bool {
        match *self {
            Region::Rect { y0, x0, h, w, .. } => y >= y0 && y < y0 + h && x >= x0 && x < x0 + w,
            Region::Ellipse { cy, cx, ry, rx, .. } => {
                let (dy, dx) = ((y as f64 + 0.5 - cy) / ry, (x as f64 + 0.5 - cx) / rx);
                dy * dy + dx * dx <= 1.0
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub background: u16,
    pub regions: Vec<Region>,
    pub image: Image,
    pub labels: LabelMap,
}

impl Scene {
    /// Class at a pixel straight from the region geometry; later regions
    /// paint over earlier ones.
    pub fn label_at(&self, y: u32, x: u32) -> u16 {
        self.regions.iter().rev().find(|r| r.contains(y, x)).map_or(self.background, Region::class)
    }

    pub fn is_uniform(&self) -> bool {
        let first = self.labels.labels()[0];
        self.labels.labels().iter().all(|&l| l == first)
    }
}

/// Flat RGB color of a class.
pub fn palette(class: u16) -> [f64; 3] {
    const BASE: [[f64; 3]; 8] = [
        [0.15, 0.15, 0.20],
        [0.85, 0.25, 0.20],
        [0.20, 0.70, 0.30],
        [0.25, 0.35, 0.85],
        [0.90, 0.80, 0.20],
        [0.70, 0.30, 0.80],
        [0.20, 0.80, 0.85],
        [0.95, 0.55, 0.15],
    ];
    if (class as usize) < BASE.len() {
        return BASE[class as usize];
    }
    let h = class as f64 * 0.618_033_988_75;
    let f = |o: f64| 0.5 + 0.4 * (std::f64::consts::TAU * (h + o)).sin();
    [f(0.0), f(1.0 / 3.0), f(2.0 / 3.0)]
}

pub fn generate_scene(seed: u64, spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    let mut rng = substream(seed, 0);
    let background = rng.gen_range(0..spec.num_classes.max(1));
    let uniform = rng.gen_bool(spec.uniform_fraction);
    let count = if uniform { 0 } else { rng.gen_range(spec.min_regions..=spec.max_regions) };
    let mut regions = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let mut class = rng.gen_range(0..spec.num_classes - 1);
        if class >= background {
            class += 1;
        }
        let eh = rng.gen_range(spec.min_extent..=spec.max_extent).min(spec.height);
        let ew = rng.gen_range(spec.min_extent..=spec.max_extent).min(spec.width);
        let y0 = rng.gen_range(0..=spec.height - eh);
        let x0 = rng.gen_range(0..=spec.width - ew);
        regions.push(if rng.gen_bool(spec.ellipse_probability) {
            Region::Ellipse {
                cy: y0 as f64 + eh as f64 / 2.0,
                cx: x0 as f64 + ew as f64 / 2.0,
                ry: eh as f64 / 2.0,
                rx: ew as f64 / 2.0,
                class,
            }
        } else {
            Region::Rect { y0, x0, h: eh, w: ew, class }
        });
    }
    let mut scene = Scene {
        background,
        regions,
        image: Image::zeros(spec.height, spec.width),
        labels: LabelMap::filled(spec.height, spec.width, background),
    };
    let noise = Normal::new(0.0, spec.noise).map_err(|e| Error::Config(e.to_string()))?;
    let mut noise_rng = substream(seed, 1);
    for y in 0..spec.height {
        for x in 0..spec.width {
            let class = scene.label_at(y, x);
            scene.labels.set(y, x, class);
            let base = palette(class);
            let rgb = base.map(|c| (c + noise.sample(&mut noise_rng)).clamp(0.0, 1.0));
            scene.image.set_pixel(y, x, rgb);
        }
    }
    Ok(scene)
}

/// Scene `index` of the corpus seeded by `seed`.
pub fn corpus_scene(seed: u64, index: u64, spec: &SceneSpec) -> Result<Scene> {
    generate_scene(child_seed(seed, index), spec)
}
