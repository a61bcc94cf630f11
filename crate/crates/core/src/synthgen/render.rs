use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::parts::{PartLabel, PartVocabulary};
use crate::error::{Error, Result};
use crate::rng::{self, stream};

/// Knobs of the synthetic person renderer and dataset layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub height: usize,
    pub width: usize,
    pub num_parts: usize,
    pub train_identities: usize,
    pub test_identities: usize,
    pub instances_per_identity: usize,
    pub cameras: usize,
    /// Minimum colour distance separating two identities on at least one part.
    pub color_separation: f32,
    /// Colours available per body part; identities are palette combinations.
    pub palette_size: usize,
    /// Minimum distance between two colours of one part palette.
    pub palette_separation: f32,
    /// Minimum number of parts on which two identities pick different palette entries.
    pub min_differing_parts: usize,
    pub identity_color_jitter: f32,
    pub brightness_jitter: f32,
    pub camera_tint: f32,
    pub pixel_noise: f32,
    pub scale_jitter: f32,
    /// Maximum whole-body offset in pixels.
    pub pose_offset: i32,
    pub clutter_blobs: usize,
    pub proportion_jitter: f32,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 32,
            num_parts: 5,
            train_identities: 32,
            test_identities: 16,
            instances_per_identity: 8,
            cameras: 4,
            color_separation: 0.15,
            palette_size: 6,
            palette_separation: 0.35,
            min_differing_parts: 2,
            identity_color_jitter: 0.03,
            brightness_jitter: 0.1,
            camera_tint: 0.08,
            pixel_noise: 0.02,
            scale_jitter: 0.15,
            pose_offset: 2,
            clutter_blobs: 3,
            proportion_jitter: 0.15,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        PartVocabulary::new(self.num_parts)?;
        if self.height < 16 || self.width < 16 || self.height % 16 != 0 || self.width % 16 != 0 {
            return Err(Error::Config(format!(
                "image dims must be positive multiples of 16, got {}x{}",
                self.height, self.width
            )));
        }
        if self.cameras < 2 {
            return Err(Error::Config(
                "at least 2 cameras are required for cross-camera queries".into(),
            ));
        }
        if self.instances_per_identity < 2 {
            return Err(Error::Config(
                "at least 2 instances per identity are required".into(),
            ));
        }
        if self.train_identities < 2 || self.test_identities < 1 {
            return Err(Error::Config("need >= 2 train and >= 1 test identities".into()));
        }
        if self.palette_size < 2 || self.min_differing_parts == 0 {
            return Err(Error::Config("palette_size >= 2 and min_differing_parts >= 1".into()));
        }
        if self.min_differing_parts > self.num_parts - 1 {
            return Err(Error::Config(
                "min_differing_parts exceeds the number of body parts".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.scale_jitter) {
            return Err(Error::Config("scale_jitter must lie in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn total_identities(&self) -> usize {
        self.train_identities + self.test_identities
    }
}

pub type Rgb = [f32; 3];

/// Appearance of one identity: a colour per part plus body proportions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdentitySpec {
    pub identity: usize,
    /// Indexed by part id; entry 0 (background) is unused.
    pub colors: Vec<Rgb>,
    /// Height fraction of each body band (parts 1..K), top to bottom.
    pub heights: Vec<f32>,
    /// Width fraction of each body band relative to the image width.
    pub widths: Vec<f32>,
}

impl IdentitySpec {
    pub fn num_parts(&self) -> usize {
        self.colors.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bands = self.num_parts().saturating_sub(1);
        if self.heights.len() != bands || self.widths.len() != bands {
            return Err(Error::InvalidProportions(format!(
                "identity {}: expected {bands} band heights/widths, got {}/{}",
                self.identity,
                self.heights.len(),
                self.widths.len()
            )));
        }
        for (i, (&h, &w)) in self.heights.iter().zip(&self.widths).enumerate() {
            if !(h > 0.0 && h < 1.0) || !(w > 0.0 && w < 1.0) {
                return Err(Error::InvalidProportions(format!(
                    "identity {}: part {} has ratios h={h}, w={w} outside (0,1)",
                    self.identity,
                    i + 1
                )));
            }
        }
        let total: f32 = self.heights.iter().sum();
        if (total - 1.0).abs() > 1e-3 {
            return Err(Error::InvalidProportions(format!(
                "identity {}: band heights sum to {total}, expected 1",
                self.identity
            )));
        }
        for c in self.colors.iter().flatten() {
            if !(0.0..=1.0).contains(c) {
                return Err(Error::InvalidProportions(format!(
                    "identity {}: colour channel {c} outside [0,1]",
                    self.identity
                )));
            }
        }
        Ok(())
    }
}

/// One rendered person image with its exact parsing map.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSample {
    pub height: usize,
    pub width: usize,
    /// Row-major H x W x 3, values in [0,1] on the 8-bit grid.
    pub image: Vec<f32>,
    /// Row-major H x W part ids.
    pub parsing: Vec<u8>,
    pub identity: usize,
    pub camera: usize,
}

impl SyntheticSample {
    pub fn pixel(&self, y: usize, x: usize) -> Rgb {
        let o = (y * self.width + x) * 3;
        [self.image[o], self.image[o + 1], self.image[o + 2]]
    }

    /// Mean colour of every part, background included; absent parts give zeros.
    pub fn part_mean_colors(&self, num_parts: usize) -> Vec<f32> {
        let mut sums = vec![0f64; num_parts * 3];
        let mut counts = vec![0usize; num_parts];
        for (i, &p) in self.parsing.iter().enumerate() {
            let p = p as usize;
            if p >= num_parts {
                continue;
            }
            counts[p] += 1;
            for c in 0..3 {
                sums[p * 3 + c] += self.image[i * 3 + c] as f64;
            }
        }
        sums.iter()
            .enumerate()
            .map(|(i, &s)| {
                let n = counts[i / 3];
                if n == 0 {
                    0.0
                } else {
                    (s / n as f64) as f32
                }
            })
            .collect()
    }
}

/// Deterministic renderer for a fixed configuration and dataset seed.
#[derive(Clone, Debug)]
pub struct Renderer {
    cfg: SynthConfig,
    camera_gains: Vec<Rgb>,
}

fn quantize(v: f32) -> f32 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

impl Renderer {
    pub fn new(cfg: SynthConfig, dataset_seed: u64) -> Result<Self> {
        cfg.validate()?;
        let camera_gains = (0..cfg.cameras)
            .map(|c| {
                let mut r = rng::rng_for(dataset_seed, &[stream::CAMERA, c as u64]);
                let t = cfg.camera_tint;
                [
                    1.0 + r.gen_range(-t..=t),
                    1.0 + r.gen_range(-t..=t),
                    1.0 + r.gen_range(-t..=t),
                ]
            })
            .collect();
        Ok(Self { cfg, camera_gains })
    }

    pub fn config(&self) -> &SynthConfig {
        &self.cfg
    }

    /// Renders `spec` under the variation drawn from `variation_seed` as seen by `camera`.
    pub fn render_sample(
        &self,
        spec: &IdentitySpec,
        variation_seed: u64,
        camera: usize,
    ) -> Result<SyntheticSample> {
        spec.validate()?;
        let cfg = &self.cfg;
        if spec.num_parts() != cfg.num_parts {
            return Err(Error::Config(format!(
                "identity has {} parts, renderer expects {}",
                spec.num_parts(),
                cfg.num_parts
            )));
        }
        if camera >= cfg.cameras {
            return Err(Error::Config(format!(
                "camera {camera} out of range [0, {})",
                cfg.cameras
            )));
        }
        let (h, w) = (cfg.height, cfg.width);
        let mut r = <rng::Rng as rand::SeedableRng>::seed_from_u64(variation_seed);
        let noise = Normal::new(0.0f32, cfg.pixel_noise.max(0.0)).expect("finite sigma");
        let gain = self.camera_gains[camera];

        let mut rgb = vec![[0f32; 3]; h * w];
        let mut parsing = vec![PartLabel::BACKGROUND.id; h * w];

        let bg: Rgb = [
            r.gen_range(0.1..0.9),
            r.gen_range(0.1..0.9),
            r.gen_range(0.1..0.9),
        ];
        rgb.iter_mut().for_each(|px| *px = bg);
        for _ in 0..cfg.clutter_blobs {
            let bh = r.gen_range(2..=h / 6);
            let bw = r.gen_range(2..=w / 3);
            let y0 = r.gen_range(0..h - bh);
            let x0 = r.gen_range(0..w - bw);
            let color: Rgb = [r.gen_range(0.0..1.0), r.gen_range(0.0..1.0), r.gen_range(0.0..1.0)];
            for y in y0..y0 + bh {
                for x in x0..x0 + bw {
                    rgb[y * w + x] = color;
                }
            }
        }

        let scale = 1.0 + r.gen_range(-cfg.scale_jitter..=cfg.scale_jitter);
        let brightness = 1.0 + r.gen_range(-cfg.brightness_jitter..=cfg.brightness_jitter);
        let body_h = 0.85 * h as f32 * scale;
        let off = cfg.pose_offset;
        let dy = if off > 0 { r.gen_range(-off..=off) } else { 0 };
        let dx = if off > 0 { r.gen_range(-off..=off) } else { 0 };
        let top = (h as f32 - body_h) / 2.0 + dy as f32;
        let cx = w as f32 / 2.0 + dx as f32;

        let mut cum = 0f32;
        for (band, (&fh, &fw)) in spec.heights.iter().zip(&spec.widths).enumerate() {
            let part = band + 1;
            let y_start = (top + cum * body_h).round() as i64;
            cum += fh;
            let y_end = (top + cum * body_h).round() as i64;
            // per-band sway mimics articulation
            let sway = r.gen_range(-1i64..=1);
            let half = fw * w as f32 * scale / 2.0;
            let x_start = (cx - half).round() as i64 + sway;
            let x_end = (cx + half).round() as i64 + sway;
            let base = spec.colors[part];
            for y in y_start.max(0)..y_end.min(h as i64) {
                for x in x_start.max(0)..x_end.min(w as i64) {
                    let i = y as usize * w + x as usize;
                    rgb[i] = [
                        base[0] * brightness,
                        base[1] * brightness,
                        base[2] * brightness,
                    ];
                    parsing[i] = part as u8;
                }
            }
        }

        let mut image = Vec::with_capacity(h * w * 3);
        for px in &rgb {
            for c in 0..3 {
                image.push(quantize(px[c] * gain[c] + noise.sample(&mut r)));
            }
        }

        let min_area = (h * w).div_ceil(100);
        let mut counts = vec![0usize; cfg.num_parts];
        for &p in &parsing {
            counts[p as usize] += 1;
        }
        if let Some((part, &n)) = counts.iter().enumerate().skip(1).find(|(_, &n)| n < min_area) {
            return Err(Error::InvalidProportions(format!(
                "identity {}: part {part} covers {n} pixels, below the 1% minimum of {min_area}",
                spec.identity
            )));
        }

        Ok(SyntheticSample {
            height: h,
            width: w,
            image,
            parsing,
            identity: spec.identity,
            camera,
        })
    }
}

fn color_distance(a: &Rgb, b: &Rgb) -> f32 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f32>()
        .sqrt()
}

fn base_proportions(bands: usize) -> (Vec<f32>, Vec<f32>) {
    if bands == 4 {
        (vec![0.16, 0.36, 0.38, 0.10], vec![0.35, 0.62, 0.5, 0.56])
    } else {
        (vec![1.0 / bands as f32; bands], vec![0.5; bands])
    }
}

/// Draws every identity of a dataset. Identities pick per-part colours from
/// shared palettes, so unseen identities recombine colours seen in training.
pub fn generate_identities(cfg: &SynthConfig, dataset_seed: u64) -> Result<Vec<IdentitySpec>> {
    cfg.validate()?;
    let bands = cfg.num_parts - 1;
    let mut pr = rng::rng_for(dataset_seed, &[stream::PALETTE]);
    let mut palettes: Vec<Vec<Rgb>> = Vec::with_capacity(bands);
    for _ in 0..bands {
        let mut palette: Vec<Rgb> = Vec::with_capacity(cfg.palette_size);
        let mut attempts = 0;
        while palette.len() < cfg.palette_size {
            attempts += 1;
            if attempts > 100_000 {
                return Err(Error::Config(format!(
                    "cannot place {} colours {} apart",
                    cfg.palette_size, cfg.palette_separation
                )));
            }
            let c: Rgb = [
                pr.gen_range(0.08..0.92),
                pr.gen_range(0.08..0.92),
                pr.gen_range(0.08..0.92),
            ];
            if palette
                .iter()
                .all(|p| color_distance(p, &c) >= cfg.palette_separation)
            {
                palette.push(c);
            }
        }
        palettes.push(palette);
    }

    let (base_h, base_w) = base_proportions(bands);
    let mut chosen: Vec<Vec<usize>> = Vec::new();
    let mut specs = Vec::with_capacity(cfg.total_identities());
    for identity in 0..cfg.total_identities() {
        let mut r = rng::rng_for(dataset_seed, &[stream::IDENTITY, identity as u64]);
        let mut attempts = 0;
        let combo = loop {
            attempts += 1;
            if attempts > 10_000 {
                return Err(Error::Config(
                    "palette too small for the requested identity count".into(),
                ));
            }
            let combo: Vec<usize> = (0..bands).map(|_| r.gen_range(0..cfg.palette_size)).collect();
            let ok = chosen.iter().all(|other| {
                other.iter().zip(&combo).filter(|(a, b)| a != b).count() >= cfg.min_differing_parts
            });
            if ok {
                break combo;
            }
        };
        let j = cfg.identity_color_jitter;
        let mut colors = vec![[0f32; 3]];
        for (band, &idx) in combo.iter().enumerate() {
            let p = palettes[band][idx];
            colors.push([
                (p[0] + r.gen_range(-j..=j)).clamp(0.0, 1.0),
                (p[1] + r.gen_range(-j..=j)).clamp(0.0, 1.0),
                (p[2] + r.gen_range(-j..=j)).clamp(0.0, 1.0),
            ]);
        }
        let pj = cfg.proportion_jitter;
        let mut heights: Vec<f32> = base_h
            .iter()
            .map(|&b| b * (1.0 + r.gen_range(-pj..=pj)))
            .collect();
        let total: f32 = heights.iter().sum();
        heights.iter_mut().for_each(|v| *v /= total);
        let widths = base_w
            .iter()
            .map(|&b| (b * (1.0 + r.gen_range(-pj..=pj))).min(0.95))
            .collect();
        chosen.push(combo);
        specs.push(IdentitySpec {
            identity,
            colors,
            heights,
            widths,
        });
    }

    for (i, a) in specs.iter().enumerate() {
        for b in &specs[i + 1..] {
            let max_gap = a
                .colors
                .iter()
                .zip(&b.colors)
                .skip(1)
                .map(|(x, y)| color_distance(x, y))
                .fold(0f32, f32::max);
            if max_gap < cfg.color_separation {
                return Err(Error::Config(format!(
                    "identities {} and {} differ by only {max_gap} in colour",
                    a.identity, b.identity
                )));
            }
        }
    }
    Ok(specs)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn renderer() -> (Renderer, Vec<IdentitySpec>) {
        let cfg = SynthConfig::default();
        let specs = generate_identities(&cfg, 0).unwrap();
        (Renderer::new(cfg, 0).unwrap(), specs)
    }

    #[test]
    fn rendering_is_deterministic() {
        let (r, specs) = renderer();
        let a = r.render_sample(&specs[0], 0, 0).unwrap();
        let b = r.render_sample(&specs[0], 0, 0).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.image.len(), 64 * 32 * 3);
    }

    #[test]
    fn parsing_ids_stay_in_range_and_cover_parts() {
        let (r, specs) = renderer();
        for seed in 0..20u64 {
            let s = r.render_sample(&specs[(seed % 5) as usize], seed, (seed % 4) as usize).unwrap();
            assert!(s.parsing.iter().all(|&p| (p as usize) < 5));
            for part in 1..5u8 {
                let n = s.parsing.iter().filter(|&&p| p == part).count();
                assert!(n * 100 >= 64 * 32, "part {part} covers {n} pixels");
            }
        }
    }

    #[test]
    fn different_seeds_vary_appearance_not_identity() {
        let (r, specs) = renderer();
        let a = r.render_sample(&specs[3], 0, 1).unwrap();
        let b = r.render_sample(&specs[3], 1, 1).unwrap();
        assert_ne!(a.image, b.image);
        assert_eq!(a.identity, b.identity);
    }

    #[test]
    fn body_pixels_carry_the_painted_part_colour() {
        let mut cfg = SynthConfig::default();
        cfg.pixel_noise = 0.0;
        cfg.brightness_jitter = 0.0;
        cfg.camera_tint = 0.0;
        let specs = generate_identities(&cfg, 3).unwrap();
        let r = Renderer::new(cfg, 3).unwrap();
        let s = r.render_sample(&specs[2], 11, 0).unwrap();
        for y in 0..s.height {
            for x in 0..s.width {
                let p = s.parsing[y * s.width + x] as usize;
                if p == 0 {
                    continue;
                }
                let got = s.pixel(y, x);
                for c in 0..3 {
                    assert!((got[c] - quantize(specs[2].colors[p][c])).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn zero_area_parts_are_rejected() {
        let (r, specs) = renderer();
        let mut bad = specs[0].clone();
        bad.widths[3] = 0.0;
        let err = r.render_sample(&bad, 0, 0).unwrap_err();
        assert!(matches!(err, Error::InvalidProportions(_)), "{err}");

        // valid ratios, but a sliver too thin to reach 1% of the image
        let mut thin = specs[0].clone();
        thin.heights = vec![0.005, 0.5, 0.445, 0.05];
        let err = r.render_sample(&thin, 0, 0).unwrap_err();
        assert!(matches!(err, Error::InvalidProportions(_)), "{err}");
    }

    #[test]
    fn identities_respect_colour_separation() {
        let cfg = SynthConfig::default();
        let specs = generate_identities(&cfg, 9).unwrap();
        assert_eq!(specs.len(), 48);
        for (i, a) in specs.iter().enumerate() {
            for b in &specs[i + 1..] {
                let gap = a
                    .colors
                    .iter()
                    .zip(&b.colors)
                    .skip(1)
                    .map(|(x, y)| color_distance(x, y))
                    .fold(0f32, f32::max);
                assert!(gap >= cfg.color_separation);
            }
        }
    }

    #[test]
    fn twenty_part_vocabulary_renders() {
        let mut cfg = SynthConfig::default();
        cfg.num_parts = 20;
        cfg.min_differing_parts = 3;
        cfg.scale_jitter = 0.1;
        let specs = generate_identities(&cfg, 1).unwrap();
        let r = Renderer::new(cfg, 1).unwrap();
        let s = r.render_sample(&specs[0], 5, 2).unwrap();
        let distinct: std::collections::BTreeSet<u8> = s.parsing.iter().copied().collect();
        assert_eq!(distinct.len(), 20);
    }
}
