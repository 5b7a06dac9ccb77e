//! Seeded synthetic fundus-image generator.
//!
//! Each image is a dark frame holding a circular fundus field with an optic
//! disc, a darker macular spot, and branching vessels. Degradations (blur,
//! illumination gradient, occlusion patches, contrast flattening) cover a
//! controlled fraction of the fundus area; the ground-truth label follows
//! the three-way grading rule implemented by [`quality_label`].

use std::fs;
use std::path::Path;

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use super::{DatasetManifest, ManifestRecord, Split};
use crate::error::{Error, Result};
use crate::imgio::{write_ppm, RgbImage};
use crate::label::QualityLabel;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DegradationKind {
    Blur,
    IlluminationGradient,
    OcclusionPatch,
    LowContrast,
}

impl DegradationKind {
    pub const ALL: [DegradationKind; 4] = [
        DegradationKind::Blur,
        DegradationKind::IlluminationGradient,
        DegradationKind::OcclusionPatch,
        DegradationKind::LowContrast,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DegradationKind::Blur => "blur",
            DegradationKind::IlluminationGradient => "illumination",
            DegradationKind::OcclusionPatch => "occlusion",
            DegradationKind::LowContrast => "low-contrast",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "blur" => Some(DegradationKind::Blur),
            "illumination" | "illumination-gradient" => Some(DegradationKind::IlluminationGradient),
            "occlusion" | "occlusion-patch" => Some(DegradationKind::OcclusionPatch),
            "low-contrast" => Some(DegradationKind::LowContrast),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SplitCounts {
    pub good: usize,
    pub usable: usize,
    pub unusable: usize,
}

impl SplitCounts {
    pub fn balanced(per_class: usize) -> Self {
        SplitCounts { good: per_class, usable: per_class, unusable: per_class }
    }

    pub fn total(&self) -> usize {
        self.good + self.usable + self.unusable
    }

    fn count(&self, label: QualityLabel) -> usize {
        match label {
            QualityLabel::Good => self.good,
            QualityLabel::Usable => self.usable,
            QualityLabel::Unusable => self.unusable,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticConfig {
    pub resolution: usize,
    pub train: SplitCounts,
    pub test: SplitCounts,
    pub degradations: Vec<DegradationKind>,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            resolution: 64,
            train: SplitCounts::balanced(300),
            test: SplitCounts::balanced(100),
            degradations: DegradationKind::ALL.to_vec(),
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.resolution < 32 {
            return Err(Error::data(format!("synthetic resolution {} below minimum 32", self.resolution)));
        }
        if self.degradations.is_empty() {
            return Err(Error::data("at least one degradation kind must be enabled"));
        }
        Ok(())
    }
}

/// The three-way grading rule: missing structures or more than 20% of the
/// fundus degraded is unusable; any degradation up to 20% with structures
/// present is usable; pristine images are good.
pub fn quality_label(structures_intact: bool, degraded_fraction: f64) -> QualityLabel {
    if !structures_intact || degraded_fraction > 0.20 {
        QualityLabel::Unusable
    } else if degraded_fraction > 0.0 {
        QualityLabel::Usable
    } else {
        QualityLabel::Good
    }
}

/// One generated image plus the ground truth used to label it.
#[derive(Clone, Debug)]
pub struct SyntheticImage {
    pub image: RgbImage,
    pub label: QualityLabel,
    /// Degraded area fraction the generator aimed for.
    pub requested_fraction: f64,
    /// Fraction actually covered, by pixel count over the fundus field.
    pub mask_fraction: f64,
    pub structures_intact: bool,
}

struct Scene {
    resolution: usize,
    center: (f64, f64),
    fundus_radius: f64,
    od_center: (f64, f64),
    od_radius: f64,
    macula_center: (f64, f64),
    macula_radius: f64,
}

fn dist(a: (f64, f64), b: (f64, f64)) -> f64 {
    ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()
}

/// Smooth 1 -> 0 edge over `soft` pixels at radius `r`.
fn soft_disc(d: f64, r: f64, soft: f64) -> f64 {
    ((r - d) / soft + 0.5).clamp(0.0, 1.0)
}

fn mix(a: [f32; 3], b: [f32; 3], t: f32) -> [f32; 3] {
    [a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t, a[2] + (b[2] - a[2]) * t]
}

fn build_scene(resolution: usize, rng: &mut StdRng) -> Scene {
    let r = resolution as f64;
    let center = (r / 2.0, r / 2.0);
    let fundus_radius = 0.47 * r;
    let side = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
    let phi: f64 = rng.gen_range(-0.35..0.35);
    let dir = (side * phi.cos(), phi.sin());
    let od_center = (
        center.0 + dir.0 * fundus_radius * rng.gen_range(0.5..0.62),
        center.1 + dir.1 * fundus_radius * rng.gen_range(0.5..0.62),
    );
    let od_radius = 0.11 * fundus_radius * rng.gen_range(0.85..1.15);
    let macula_center = (
        center.0 - dir.0 * fundus_radius * rng.gen_range(0.25..0.42),
        center.1 - dir.1 * fundus_radius * rng.gen_range(0.25..0.42) + rng.gen_range(-2.0..2.0),
    );
    let macula_radius = 0.13 * fundus_radius * rng.gen_range(0.85..1.15);
    Scene { resolution, center, fundus_radius, od_center, od_radius, macula_center, macula_radius }
}

fn render_scene(scene: &Scene, rng: &mut StdRng) -> RgbImage {
    let res = scene.resolution;
    let mut img = RgbImage::new(res, res);
    let tint: [f32; 3] = [
        0.72 + rng.gen_range(-0.05..0.05),
        0.34 + rng.gen_range(-0.04..0.04),
        0.11 + rng.gen_range(-0.03..0.03),
    ];
    let tilt_angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let tilt = (tilt_angle.cos(), tilt_angle.sin());
    let background = 0.03f32;

    for y in 0..res {
        for x in 0..res {
            let p = (x as f64 + 0.5, y as f64 + 0.5);
            let d = dist(p, scene.center);
            if d > scene.fundus_radius {
                img.set_pixel(x, y, [background; 3]);
                continue;
            }
            let rel = d / scene.fundus_radius;
            let shade = 1.0 - 0.35 * (rel * rel) as f32;
            let u = ((p.0 - scene.center.0) * tilt.0 + (p.1 - scene.center.1) * tilt.1)
                / scene.fundus_radius;
            let tilt_gain = 1.0 + 0.08 * u as f32;
            let mut rgb = [tint[0] * shade * tilt_gain, tint[1] * shade * tilt_gain, tint[2] * shade * tilt_gain];

            // optic disc: bright, slightly yellow
            let od = soft_disc(dist(p, scene.od_center), scene.od_radius, 1.5) as f32;
            rgb = mix(rgb, [0.95, 0.83, 0.48], od);

            img.set_pixel(x, y, rgb);
        }
    }

    draw_vessels(&mut img, scene, rng);

    // macula: darker central spot, drawn after vessels
    for y in 0..res {
        for x in 0..res {
            let p = (x as f64 + 0.5, y as f64 + 0.5);
            if dist(p, scene.center) > scene.fundus_radius {
                continue;
            }
            let m = soft_disc(dist(p, scene.macula_center), scene.macula_radius, 2.0) as f32;
            if m > 0.0 {
                let mut rgb = img.pixel(x, y);
                let dark = 1.0 - 0.45 * m;
                rgb = [rgb[0] * dark, rgb[1] * dark, rgb[2] * dark];
                img.set_pixel(x, y, rgb);
            }
        }
    }
    img
}

fn draw_vessels(img: &mut RgbImage, scene: &Scene, rng: &mut StdRng) {
    let color = [0.45f32, 0.12, 0.10];
    let res = scene.resolution as f64;
    let trunk_count = rng.gen_range(4..7);
    for _ in 0..trunk_count {
        let mut angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        let mut pos = (
            scene.od_center.0 + angle.cos() * scene.od_radius * 0.6,
            scene.od_center.1 + angle.sin() * scene.od_radius * 0.6,
        );
        let steps = (res * 0.7) as usize;
        let thickness = rng.gen_range(0.8..1.4) * res / 64.0;
        for step in 0..steps {
            angle += rng.gen_range(-0.25..0.25);
            pos = (pos.0 + angle.cos(), pos.1 + angle.sin());
            if dist(pos, scene.center) > scene.fundus_radius * 0.97 {
                break;
            }
            let taper = 1.0 - 0.5 * step as f64 / steps as f64;
            stamp_disc(img, pos, thickness * taper, color, 0.85);
        }
    }
}

fn stamp_disc(img: &mut RgbImage, center: (f64, f64), radius: f64, color: [f32; 3], alpha: f32) {
    let r_ceil = radius.ceil() as isize + 1;
    let (cx, cy) = (center.0 as isize, center.1 as isize);
    for dy in -r_ceil..=r_ceil {
        for dx in -r_ceil..=r_ceil {
            let (x, y) = (cx + dx, cy + dy);
            if x < 0 || y < 0 || x as usize >= img.width() || y as usize >= img.height() {
                continue;
            }
            let p = (x as f64 + 0.5, y as f64 + 0.5);
            let w = soft_disc(dist(p, center), radius, 1.0) as f32 * alpha;
            if w > 0.0 {
                let rgb = mix(img.pixel(x as usize, y as usize), color, w);
                img.set_pixel(x as usize, y as usize, rgb);
            }
        }
    }
}

/// Degradation mask over the fundus field: a union of discs scaled to hit
/// the requested area fraction.
struct Mask {
    inside: Vec<bool>,
    fraction: f64,
    od_coverage: f64,
    macula_coverage: f64,
}

fn rasterize_mask(scene: &Scene, centers: &[(f64, f64)], radii: &[f64]) -> Mask {
    let res = scene.resolution;
    let mut inside = vec![false; res * res];
    let mut fundus_px = 0usize;
    let mut mask_px = 0usize;
    let (mut od_in, mut od_total) = (0usize, 0usize);
    let (mut mac_in, mut mac_total) = (0usize, 0usize);
    for y in 0..res {
        for x in 0..res {
            let p = (x as f64 + 0.5, y as f64 + 0.5);
            if dist(p, scene.center) > scene.fundus_radius {
                continue;
            }
            fundus_px += 1;
            let covered = centers.iter().zip(radii).any(|(&c, &r)| dist(p, c) <= r);
            let in_od = dist(p, scene.od_center) <= scene.od_radius;
            let in_mac = dist(p, scene.macula_center) <= scene.macula_radius;
            if in_od {
                od_total += 1;
            }
            if in_mac {
                mac_total += 1;
            }
            if covered {
                inside[y * res + x] = true;
                mask_px += 1;
                if in_od {
                    od_in += 1;
                }
                if in_mac {
                    mac_in += 1;
                }
            }
        }
    }
    Mask {
        inside,
        fraction: mask_px as f64 / fundus_px.max(1) as f64,
        od_coverage: if od_total == 0 { 0.0 } else { od_in as f64 / od_total as f64 },
        macula_coverage: if mac_total == 0 { 0.0 } else { mac_in as f64 / mac_total as f64 },
    }
}

/// Scale disc radii by binary search until the rasterized mask area hits
/// the requested fraction (union growth is monotone in the common scale).
fn fit_mask(scene: &Scene, centers: &[(f64, f64)], base_radii: &[f64], fraction: f64) -> Mask {
    let mut lo = 0.0f64;
    let mut hi = 4.0f64;
    let mut best: Option<Mask> = None;
    for _ in 0..28 {
        let mid = 0.5 * (lo + hi);
        let radii: Vec<f64> = base_radii.iter().map(|r| r * mid).collect();
        let mask = rasterize_mask(scene, centers, &radii);
        let better = match &best {
            None => true,
            Some(b) => (mask.fraction - fraction).abs() < (b.fraction - fraction).abs(),
        };
        if better {
            best = Some(Mask { inside: mask.inside.clone(), ..mask });
        }
        if mask.fraction < fraction {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    best.expect("at least one iteration")
}

fn random_point_in_fundus(scene: &Scene, rng: &mut StdRng, margin: f64) -> (f64, f64) {
    let r = scene.fundus_radius * (1.0 - margin) * rng.gen_range(0.0f64..1.0).sqrt();
    let a = rng.gen_range(0.0..std::f64::consts::TAU);
    (scene.center.0 + r * a.cos(), scene.center.1 + r * a.sin())
}

fn apply_degradation(img: &mut RgbImage, mask: &Mask, kind: DegradationKind, rng: &mut StdRng) {
    let res = img.width();
    match kind {
        DegradationKind::Blur => {
            let radius = (res / 16).max(3) as isize;
            for _pass in 0..2 {
                let src = img.clone();
                for y in 0..res {
                    for x in 0..res {
                        if !mask.inside[y * res + x] {
                            continue;
                        }
                        let mut acc = [0.0f32; 3];
                        let mut n = 0.0f32;
                        for dy in -radius..=radius {
                            for dx in -radius..=radius {
                                let (sx, sy) = (x as isize + dx, y as isize + dy);
                                if sx < 0 || sy < 0 || sx as usize >= res || sy as usize >= res {
                                    continue;
                                }
                                let p = src.pixel(sx as usize, sy as usize);
                                for c in 0..3 {
                                    acc[c] += p[c];
                                }
                                n += 1.0;
                            }
                        }
                        img.set_pixel(
                            x,
                            y,
                            [
                                acc[0] / n * 0.8 + 0.22,
                                acc[1] / n * 0.8 + 0.22,
                                acc[2] / n * 0.8 + 0.22,
                            ],
                        );
                    }
                }
            }
        }
        DegradationKind::IlluminationGradient => {
            let a: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let dir = (a.cos(), a.sin());
            let brighten = rng.gen_bool(0.5);
            for y in 0..res {
                for x in 0..res {
                    if !mask.inside[y * res + x] {
                        continue;
                    }
                    let t = ((x as f64 * dir.0 + y as f64 * dir.1) / res as f64 + 1.0) / 2.0;
                    let gain = if brighten { 1.4 + 1.1 * t } else { 0.55 - 0.45 * t } as f32;
                    let p = img.pixel(x, y);
                    img.set_pixel(x, y, [p[0] * gain, p[1] * gain, p[2] * gain]);
                }
            }
        }
        DegradationKind::OcclusionPatch => {
            let bright = rng.gen_bool(0.3);
            let fill: [f32; 3] = if bright { [0.92, 0.90, 0.85] } else { [0.05, 0.05, 0.06] };
            for y in 0..res {
                for x in 0..res {
                    if mask.inside[y * res + x] {
                        let noise = rng.gen_range(-0.02..0.02f32);
                        img.set_pixel(x, y, [fill[0] + noise, fill[1] + noise, fill[2] + noise]);
                    }
                }
            }
        }
        DegradationKind::LowContrast => {
            for y in 0..res {
                for x in 0..res {
                    if mask.inside[y * res + x] {
                        let p = img.pixel(x, y);
                        img.set_pixel(
                            x,
                            y,
                            [
                                0.58 + (p[0] - 0.5) * 0.08,
                                0.58 + (p[1] - 0.5) * 0.08,
                                0.58 + (p[2] - 0.5) * 0.08,
                            ],
                        );
                    }
                }
            }
        }
    }
}

/// Generate one image whose ground truth matches `target`.
pub fn generate_image(
    resolution: usize,
    enabled: &[DegradationKind],
    target: QualityLabel,
    rng: &mut StdRng,
) -> SyntheticImage {
    let scene = build_scene(resolution, rng);
    let mut image = render_scene(&scene, rng);

    // pristine image: no degradation at all
    if target == QualityLabel::Good {
        return SyntheticImage {
            image,
            label: quality_label(true, 0.0),
            requested_fraction: 0.0,
            mask_fraction: 0.0,
            structures_intact: true,
        };
    }

    let occlude_structure = target == QualityLabel::Unusable
        && enabled.contains(&DegradationKind::OcclusionPatch)
        && rng.gen_bool(0.4);

    let kind = if occlude_structure {
        DegradationKind::OcclusionPatch
    } else {
        enabled[rng.gen_range(0..enabled.len())]
    };

    let requested = match target {
        QualityLabel::Good => unreachable!(),
        QualityLabel::Usable => rng.gen_range(0.08..0.18),
        QualityLabel::Unusable => {
            if occlude_structure {
                rng.gen_range(0.08..0.16)
            } else {
                rng.gen_range(0.24..0.42)
            }
        }
    };

    let mut requested = requested;
    let mut attempt = 0usize;
    let mask = loop {
        attempt += 1;
        let (centers, radii): (Vec<(f64, f64)>, Vec<f64>) = if occlude_structure {
            // one patch centered on the optic disc, large enough to bury it
            (vec![scene.od_center], vec![scene.od_radius])
        } else {
            let k = rng.gen_range(1..=3usize);
            let centers = (0..k).map(|_| random_point_in_fundus(&scene, rng, 0.15)).collect();
            let radii = (0..k).map(|_| scene.fundus_radius * rng.gen_range(0.2..0.4)).collect();
            (centers, radii)
        };
        let mask = fit_mask(&scene, &centers, &radii, requested);
        if occlude_structure {
            if mask.od_coverage >= 0.99 {
                break mask;
            }
            // enough area always buries the disc; above 20% the label holds
            // by area alone even if a sliver of the disc survives
            requested = (requested * 1.5).min(0.45);
            if attempt > 6 {
                break mask;
            }
            continue;
        }
        // usable (and area-driven unusable) images should keep both
        // landmarks: hard occlusion may not swallow the disc or macula
        if kind == DegradationKind::OcclusionPatch
            && target == QualityLabel::Usable
            && attempt <= 50
            && (mask.od_coverage.max(mask.macula_coverage) > if attempt <= 20 { 0.6 } else { 0.98 })
        {
            continue;
        }
        break mask;
    };

    apply_degradation(&mut image, &mask, kind, rng);
    for v in image.data_mut() {
        *v = v.clamp(0.0, 1.0);
    }

    let structures_intact = if kind == DegradationKind::OcclusionPatch {
        mask.od_coverage < 0.99 && mask.macula_coverage < 0.99
    } else {
        true
    };
    let label = quality_label(structures_intact, mask.fraction);
    debug_assert_eq!(label, target, "generator produced an off-target label");

    SyntheticImage {
        image,
        label,
        requested_fraction: requested,
        mask_fraction: mask.fraction,
        structures_intact,
    }
}

fn per_image_rng(seed: u64, index: u64) -> StdRng {
    StdRng::seed_from_u64(seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0x5851_F42D))
}

/// Generate the configured dataset under `out_dir`: PPM files in
/// `images/` plus `manifest.csv`. Byte-identical for a given config.
pub fn synthesize(cfg: &SyntheticConfig, out_dir: impl AsRef<Path>) -> Result<DatasetManifest> {
    cfg.validate()?;
    let out = out_dir.as_ref();
    fs::create_dir_all(out.join("images"))?;
    let mut manifest = DatasetManifest::default();
    let mut index = 0u64;
    for (split, counts) in [(Split::Train, &cfg.train), (Split::Test, &cfg.test)] {
        for label in QualityLabel::ALL {
            for _ in 0..counts.count(label) {
                let mut rng = per_image_rng(cfg.seed, index);
                let synth = generate_image(cfg.resolution, &cfg.degradations, label, &mut rng);
                let name = format!("images/fp_{}_{:05}.ppm", split, index);
                write_ppm(out.join(&name), &synth.image)?;
                manifest.records.push(ManifestRecord { image: name, label: synth.label, split });
                index += 1;
            }
        }
    }
    super::write_manifest(out.join("manifest.csv"), &manifest)?;
    Ok(manifest)
}
