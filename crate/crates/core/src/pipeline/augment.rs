use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::rng::Rng;
use crate::synthgen::{SyntheticSample, IGNORE};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub enabled: bool,
    /// Zero padding before the random crop, in pixels.
    pub pad: usize,
    pub flip_prob: f64,
    pub erase_prob: f64,
    /// Erased area as a fraction of the image, lower and upper bound.
    pub erase_area: (f64, f64),
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            pad: 4,
            flip_prob: 0.5,
            erase_prob: 0.5,
            erase_area: (0.02, 0.2),
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            (0.0..=1.0).contains(&self.flip_prob) && (0.0..=1.0).contains(&self.erase_prob),
            Config,
            "augmentation probabilities must lie in [0, 1]"
        );
        let (lo, hi) = self.erase_area;
        ensure!(0.0 < lo && lo <= hi && hi < 1.0, Config, "erase_area must satisfy 0 < lo <= hi < 1");
        Ok(())
    }
}

/// Image and parsing after the joint geometric transforms.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedSample {
    pub height: usize,
    pub width: usize,
    pub image: Vec<f32>,
    pub parsing: Vec<u8>,
}

/// Pad-and-crop, horizontal flip and random erasing. Padding counts as
/// background; erased pixels become `IGNORE` in the parsing map.
pub fn augment(sample: &SyntheticSample, cfg: &AugmentConfig, rng: &mut Rng) -> AugmentedSample {
    let (h, w) = (sample.height, sample.width);
    if !cfg.enabled {
        return AugmentedSample {
            height: h,
            width: w,
            image: sample.image.clone(),
            parsing: sample.parsing.clone(),
        };
    }
    let pad = cfg.pad as isize;
    let dy = rng.gen_range(-pad..=pad);
    let dx = rng.gen_range(-pad..=pad);
    let flip = rng.gen_bool(cfg.flip_prob);
    let mut image = vec![0f32; h * w * 3];
    let mut parsing = vec![0u8; h * w];
    for y in 0..h {
        for x in 0..w {
            let sy = y as isize + dy;
            let sx0 = if flip { (w - 1 - x) as isize } else { x as isize };
            let sx = sx0 + dx;
            if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                continue;
            }
            let (sy, sx) = (sy as usize, sx as usize);
            let src = sy * w + sx;
            let dst = y * w + x;
            parsing[dst] = sample.parsing[src];
            image[dst * 3..dst * 3 + 3].copy_from_slice(&sample.image[src * 3..src * 3 + 3]);
        }
    }
    if rng.gen_bool(cfg.erase_prob) {
        let area = rng.gen_range(cfg.erase_area.0..=cfg.erase_area.1) * (h * w) as f64;
        let aspect = (rng.gen_range((0.3f64).ln()..=(3.3f64).ln())).exp();
        let eh = ((area * aspect).sqrt().round() as usize).clamp(1, h);
        let ew = ((area / aspect).sqrt().round() as usize).clamp(1, w);
        let y0 = rng.gen_range(0..=h - eh);
        let x0 = rng.gen_range(0..=w - ew);
        let fill: [f32; 3] = [rng.gen(), rng.gen(), rng.gen()];
        for y in y0..y0 + eh {
            for x in x0..x0 + ew {
                let i = y * w + x;
                parsing[i] = IGNORE;
                image[i * 3..i * 3 + 3].copy_from_slice(&fill);
            }
        }
    }
    AugmentedSample {
        height: h,
        width: w,
        image,
        parsing,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_for;

    /// Sample whose colour encodes the part id, so geometry can be checked.
    fn marker() -> SyntheticSample {
        let (h, w) = (16, 8);
        let parsing: Vec<u8> = (0..h * w).map(|i| ((i / w) / 4 + (i % w) / 4) as u8 % 5).collect();
        let image = parsing.iter().flat_map(|&p| [p as f32 / 4.0, 0.5, 1.0]).collect();
        SyntheticSample {
            height: h,
            width: w,
            image,
            parsing,
            identity: 0,
            camera: 0,
        }
    }

    #[test]
    fn parsing_tracks_image_geometry() {
        let s = marker();
        let cfg = AugmentConfig {
            erase_prob: 1.0,
            ..Default::default()
        };
        for seed in 0..50 {
            let a = augment(&s, &cfg, &mut rng_for(seed, &[]));
            let mut erased = 0;
            for i in 0..a.parsing.len() {
                let px = &a.image[i * 3..i * 3 + 3];
                match a.parsing[i] {
                    IGNORE => erased += 1,
                    0 if px == [0.0, 0.0, 0.0] => {}
                    p => assert_eq!(px, [p as f32 / 4.0, 0.5, 1.0]),
                }
            }
            assert!(erased > 0);
        }
    }

    #[test]
    fn disabled_is_identity_and_seeded_is_deterministic() {
        let s = marker();
        let off = AugmentConfig {
            enabled: false,
            ..Default::default()
        };
        let a = augment(&s, &off, &mut rng_for(0, &[]));
        assert_eq!(a.image, s.image);
        let cfg = AugmentConfig::default();
        assert_eq!(augment(&s, &cfg, &mut rng_for(4, &[])), augment(&s, &cfg, &mut rng_for(4, &[])));
    }
}
