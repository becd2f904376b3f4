//! Parametric-shape scenes with per-pixel class masks.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::catalog::{ClassCatalog, ClassEntry, ShapeFamily};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Array;

/// Downsampling factor between image and feature grids. Masks are sampled at
/// the centre of each `STRIDE×STRIDE` block.
pub const FEATURE_STRIDE: usize = 4;

pub const GRID_MIN: usize = 24;
pub const GRID_MAX: usize = 96;

/// Minimum pixel count of every declared foreground class.
pub const MIN_CLASS_PIXELS: usize = 16;

pub const CHANNELS: usize = 3;

/// Standard deviation of the additive pixel noise.
pub const PIXEL_NOISE: f64 = 0.05;

const DISTRACTOR_PROB: f64 = 0.5;
const SECOND_INSTANCE_PROB: f64 = 0.3;
const MAX_ATTEMPTS: usize = 200;

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub id: usize,
    /// Class the scene was generated for.
    pub primary: u32,
    /// Sorted set of foreground classes present in the mask.
    pub classes: Vec<u32>,
    /// `[H, W, 3]`, values in `[0, 1]`.
    pub image: Array<f32>,
    /// `H·W` labels, 0 = background.
    pub mask: Vec<u8>,
}

impl Scene {
    pub fn height(&self) -> usize {
        self.image.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[1]
    }

    /// Channel-first copy of the image, `[3, H, W]`.
    pub fn image_chw(&self) -> Array<f32> {
        let (h, w) = (self.height(), self.width());
        let src = self.image.data();
        Array::from_fn([CHANNELS, h, w], |i| {
            let c = i / (h * w);
            let p = i % (h * w);
            src[p * CHANNELS + c]
        })
    }

    /// Mask with every label outside `visible` mapped to background.
    pub fn visible_mask(&self, visible: &[u32]) -> Vec<u8> {
        self.mask
            .iter()
            .map(|&l| {
                if l == 0 || l == IGNORE_LABEL || visible.contains(&(l as u32)) {
                    l
                } else {
                    0
                }
            })
            .collect()
    }

    pub fn class_pixels(&self, class: u32) -> usize {
        self.mask.iter().filter(|&&l| l as u32 == class).count()
    }
}

/// Label excluded from losses and metrics. Never generated here.
pub const IGNORE_LABEL: u8 = 255;

/// Nearest-neighbour downsampling of a label grid by [`FEATURE_STRIDE`].
pub fn downsample_labels(mask: &[u8], h: usize, w: usize) -> Vec<u8> {
    let (fh, fw) = (h / FEATURE_STRIDE, w / FEATURE_STRIDE);
    let off = FEATURE_STRIDE / 2;
    let mut out = Vec::with_capacity(fh * fw);
    for i in 0..fh {
        for j in 0..fw {
            out.push(mask[(i * FEATURE_STRIDE + off) * w + j * FEATURE_STRIDE + off]);
        }
    }
    out
}

/// Generates `scenes_per_class` scenes for every catalog class, class-major.
/// Each scene draws from its own counter-derived stream of `seed`, so the
/// output is a pure function of the arguments.
pub fn generate_corpus(
    catalog: &ClassCatalog,
    scenes_per_class: usize,
    grid: (usize, usize),
    seed: u64,
) -> Result<Vec<Scene>> {
    let (h, w) = grid;
    for extent in [h, w] {
        if !(GRID_MIN..=GRID_MAX).contains(&extent) {
            return Err(Error::InvalidConfig(format!(
                "grid {h}x{w} outside [{GRID_MIN}, {GRID_MAX}]"
            )));
        }
    }
    if h % FEATURE_STRIDE != 0 || w % FEATURE_STRIDE != 0 {
        return Err(Error::InvalidConfig(format!(
            "grid {h}x{w} must be a multiple of {FEATURE_STRIDE}"
        )));
    }
    for entry in catalog.entries() {
        let r = entry.appearance.radius * entry.appearance.scale.lo * h.min(w) as f32;
        if 2.0 * r > h.min(w) as f32 {
            return Err(Error::PlacementInfeasible(format!(
                "class {} needs diameter {:.1} on a {h}x{w} grid",
                entry.id,
                2.0 * r
            )));
        }
    }
    let n = catalog.len() * scenes_per_class;
    (0..n)
        .into_par_iter()
        .map(|id| {
            let primary = catalog.entries()[id / scenes_per_class].id;
            let mut rng = rng::item_stream(seed, "corpus", id as u64);
            generate_scene(catalog, primary, id, h, w, &mut rng)
        })
        .collect()
}

struct Instance<'a> {
    entry: &'a ClassEntry,
    cx: f32,
    cy: f32,
    radius: f32,
    angle: f32,
    rgb: [f32; 3],
}

fn sample_in(rng: &mut ChaCha8Rng, lo: f32, hi: f32) -> f32 {
    if hi > lo {
        rng.gen_range(lo..=hi)
    } else {
        lo
    }
}

fn sample_instance<'a>(
    rng: &mut ChaCha8Rng,
    entry: &'a ClassEntry,
    h: usize,
    w: usize,
) -> Instance<'a> {
    let a = &entry.appearance;
    let radius = a.radius * sample_in(rng, a.scale.lo, a.scale.hi) * h.min(w) as f32;
    let cx = sample_in(rng, radius, w as f32 - radius);
    let cy = sample_in(rng, radius, h as f32 - radius);
    let angle = sample_in(rng, -a.rotation, a.rotation);
    let hue = sample_in(rng, a.hue.lo, a.hue.hi).rem_euclid(1.0);
    let sat = sample_in(rng, a.saturation.lo, a.saturation.hi);
    let val = sample_in(rng, a.value.lo, a.value.hi);
    Instance {
        entry,
        cx,
        cy,
        radius,
        angle,
        rgb: hsv_to_rgb(hue, sat, val),
    }
}

fn generate_scene(
    catalog: &ClassCatalog,
    primary: u32,
    id: usize,
    h: usize,
    w: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Scene> {
    let primary_entry = catalog.get(primary).expect("primary class in catalog");
    for _ in 0..MAX_ATTEMPTS {
        let mut instances = Vec::new();
        if catalog.len() > 1 && rng.gen_bool(DISTRACTOR_PROB) {
            let mut other = rng.gen_range(1..catalog.len() as u32);
            if other >= primary {
                other += 1;
            }
            instances.push(sample_instance(rng, catalog.get(other).unwrap(), h, w));
        }
        let copies = if rng.gen_bool(SECOND_INSTANCE_PROB) { 2 } else { 1 };
        for _ in 0..copies {
            instances.push(sample_instance(rng, primary_entry, h, w));
        }

        let bg_level = rng.gen_range(0.25f32..0.55);
        let bg: [f32; 3] = std::array::from_fn(|_| bg_level + rng.gen_range(-0.05f32..0.05));
        let mut image = vec![0.0f32; h * w * CHANNELS];
        let mut mask = vec![0u8; h * w];
        for p in 0..h * w {
            image[p * CHANNELS..(p + 1) * CHANNELS].copy_from_slice(&bg);
        }
        for inst in &instances {
            paint(inst, h, w, &mut image, &mut mask);
        }

        let mut classes: Vec<u32> = instances.iter().map(|i| i.entry.id).collect();
        classes.sort_unstable();
        classes.dedup();
        let lattice = downsample_labels(&mask, h, w);
        let ok = classes.iter().all(|&c| {
            mask.iter().filter(|&&l| l as u32 == c).count() >= MIN_CLASS_PIXELS
                && lattice.iter().any(|&l| l as u32 == c)
        });
        if !ok {
            continue;
        }

        for v in image.iter_mut() {
            *v = (*v + (PIXEL_NOISE * rng::normal(rng)) as f32).clamp(0.0, 1.0);
        }
        return Ok(Scene {
            id,
            primary,
            classes,
            image: Array::new([h, w, CHANNELS], image)?,
            mask,
        });
    }
    Err(Error::PlacementInfeasible(format!(
        "scene {id} (class {primary}) could not be placed on a {h}x{w} grid"
    )))
}

fn paint(inst: &Instance<'_>, h: usize, w: usize, image: &mut [f32], mask: &mut [u8]) {
    let (sin, cos) = inst.angle.sin_cos();
    let family = inst.entry.family;
    let dark = inst.rgb.map(|c| c * 0.45);
    let r = inst.radius;
    let y0 = (inst.cy - r * 1.5).floor().max(0.0) as usize;
    let y1 = ((inst.cy + r * 1.5).ceil() as usize).min(h);
    let x0 = (inst.cx - r * 1.5).floor().max(0.0) as usize;
    let x1 = ((inst.cx + r * 1.5).ceil() as usize).min(w);
    for y in y0..y1 {
        for x in x0..x1 {
            let dx = x as f32 + 0.5 - inst.cx;
            let dy = y as f32 + 0.5 - inst.cy;
            let u = (cos * dx + sin * dy) / r;
            let v = (-sin * dx + cos * dy) / r;
            if !family.contains(u, v) {
                continue;
            }
            let p = y * w + x;
            mask[p] = inst.entry.id as u8;
            let checker = family == ShapeFamily::CheckerBlob
                && (((u + 1.0) * 2.0).floor() as i32 + ((v + 1.0) * 2.0).floor() as i32) % 2 != 0;
            let rgb = if checker { dark } else { inst.rgb };
            image[p * CHANNELS..(p + 1) * CHANNELS].copy_from_slice(&rgb);
        }
    }
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> [f32; 3] {
    let i = (h * 6.0).floor();
    let f = h * 6.0 - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - f * s);
    let t = v * (1.0 - (1.0 - f) * s);
    match (i as i32).rem_euclid(6) {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::catalog::Range;

    #[test]
    fn empty_when_no_scenes_requested() {
        let cat = ClassCatalog::default_shapes();
        assert!(generate_corpus(&cat, 0, (48, 48), 1).unwrap().is_empty());
    }

    #[test]
    fn oversized_class_is_infeasible() {
        let mut entries = ClassCatalog::default_shapes().entries().to_vec();
        entries[0].appearance.radius = 0.5;
        entries[0].appearance.scale = Range::new(1.2, 1.4);
        let cat = ClassCatalog::new(entries).unwrap();
        assert!(matches!(
            generate_corpus(&cat, 1, (24, 24), 0),
            Err(Error::PlacementInfeasible(_))
        ));
    }

    #[test]
    fn grid_out_of_range_rejected() {
        let cat = ClassCatalog::default_shapes();
        assert!(generate_corpus(&cat, 1, (16, 48), 0).is_err());
        assert!(generate_corpus(&cat, 1, (48, 128), 0).is_err());
    }

    #[test]
    fn downsample_picks_block_centres() {
        let (h, w) = (8, 8);
        let mask: Vec<u8> = (0..h * w).map(|i| i as u8).collect();
        let d = downsample_labels(&mask, h, w);
        assert_eq!(d, vec![18, 22, 50, 54]);
    }

    #[test]
    fn visible_mask_hides_unseen_classes() {
        let cat = ClassCatalog::default_shapes();
        let scenes = generate_corpus(&cat, 4, (32, 32), 3).unwrap();
        let s = scenes.iter().find(|s| s.classes.len() == 2).unwrap();
        let keep = [s.primary];
        let vis = s.visible_mask(&keep);
        assert!(vis.iter().all(|&l| l == 0 || l as u32 == s.primary));
        assert_eq!(
            vis.iter().filter(|&&l| l as u32 == s.primary).count(),
            s.class_pixels(s.primary)
        );
    }

    #[test]
    fn chw_layout() {
        let cat = ClassCatalog::default_shapes();
        let s = &generate_corpus(&cat, 1, (24, 24), 9).unwrap()[0];
        let chw = s.image_chw();
        let (h, w) = (24, 24);
        for p in [0, 17, h * w - 1] {
            for c in 0..3 {
                assert_eq!(chw.data()[c * h * w + p], s.image.data()[p * 3 + c]);
            }
        }
    }
}
