use rand::seq::SliceRandom;
use rayon::prelude::*;

use super::parts::IGNORE;
use super::render::{generate_identities, IdentitySpec, Renderer, SynthConfig, SyntheticSample};
use crate::error::{Error, Result};
use crate::rng::{self, stream};

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<SyntheticSample>,
    pub query: Vec<SyntheticSample>,
    pub gallery: Vec<SyntheticSample>,
    /// Number of train identities; train labels are `0..num_train_ids`.
    pub num_train_ids: usize,
}

impl DatasetSplit {
    pub fn test_identities(&self) -> std::collections::BTreeSet<usize> {
        self.query
            .iter()
            .chain(&self.gallery)
            .map(|s| s.identity)
            .collect()
    }

    /// Checks disjointness of train/test identities and that every query has a
    /// same-identity gallery entry from another camera.
    pub fn check_invariants(&self) -> Result<()> {
        let test = self.test_identities();
        if self.train.iter().any(|s| test.contains(&s.identity)) {
            return Err(Error::Precondition("train and test identities overlap".into()));
        }
        if self.train.iter().any(|s| s.identity >= self.num_train_ids) {
            return Err(Error::Precondition("train label outside [0, N)".into()));
        }
        let offenders: Vec<usize> = self
            .query
            .iter()
            .enumerate()
            .filter(|(_, q)| {
                !self
                    .gallery
                    .iter()
                    .any(|g| g.identity == q.identity && g.camera != q.camera)
            })
            .map(|(i, _)| i)
            .collect();
        if !offenders.is_empty() {
            return Err(Error::Unevaluable(offenders));
        }
        Ok(())
    }
}

fn camera_assignment(cfg: &SynthConfig, dataset_seed: u64, identity: usize, attempt: u64) -> Vec<usize> {
    let mut r = rng::rng_for(dataset_seed, &[stream::CAMERA, 1_000 + identity as u64, attempt]);
    let mut perm: Vec<usize> = (0..cfg.cameras).collect();
    perm.shuffle(&mut r);
    (0..cfg.instances_per_identity)
        .map(|i| perm[i % cfg.cameras])
        .collect()
}

/// Renders the full train/query/gallery split. Every sample is seeded from
/// `(dataset_seed, identity, instance)` so the output does not depend on the
/// order or parallelism of rendering.
pub fn generate_dataset(cfg: &SynthConfig, dataset_seed: u64) -> Result<DatasetSplit> {
    cfg.validate()?;
    let specs = generate_identities(cfg, dataset_seed)?;
    let renderer = Renderer::new(cfg.clone(), dataset_seed)?;

    let mut cameras: Vec<Vec<usize>> = Vec::with_capacity(specs.len());
    for identity in 0..specs.len() {
        let mut attempt = 0;
        loop {
            let cams = camera_assignment(cfg, dataset_seed, identity, attempt);
            let distinct = cams.iter().collect::<std::collections::BTreeSet<_>>().len();
            if distinct >= 2 {
                cameras.push(cams);
                break;
            }
            attempt += 1;
            if attempt > 64 {
                return Err(Error::Config(format!(
                    "identity {identity}: cannot spread instances over two cameras"
                )));
            }
        }
    }

    let jobs: Vec<(usize, usize)> = (0..specs.len())
        .flat_map(|id| (0..cfg.instances_per_identity).map(move |k| (id, k)))
        .collect();
    let samples: Vec<SyntheticSample> = jobs
        .par_iter()
        .map(|&(id, k)| {
            let seed = rng::derive_seed(dataset_seed, &[stream::SAMPLE, id as u64, k as u64]);
            renderer.render_sample(&specs[id], seed, cameras[id][k])
        })
        .collect::<Result<_>>()?;

    let mut split = DatasetSplit {
        train: Vec::new(),
        query: Vec::new(),
        gallery: Vec::new(),
        num_train_ids: cfg.train_identities,
    };
    // One query per (identity, camera), but only from cameras that keep
    // another instance for the gallery.
    let mut seen = std::collections::BTreeSet::new();
    for (sample, &(id, _)) in samples.into_iter().zip(&jobs) {
        let shots = cameras[id].iter().filter(|&&c| c == sample.camera).count();
        if id < cfg.train_identities {
            split.train.push(sample);
        } else if shots >= 2 && seen.insert((id, sample.camera)) {
            split.query.push(sample);
        } else {
            split.gallery.push(sample);
        }
    }
    split.check_invariants()?;
    Ok(split)
}

/// Identity specs of a dataset, exposed for inspection and tests.
pub fn dataset_identities(cfg: &SynthConfig, dataset_seed: u64) -> Result<Vec<IdentitySpec>> {
    generate_identities(cfg, dataset_seed)
}

/// Majority-vote downsampling of a parsing map. Ties go to the smallest part
/// id; `IGNORE` pixels never vote, and blocks made only of `IGNORE` stay `IGNORE`.
pub fn downsample_parsing(parsing: &[u8], height: usize, width: usize, stride: usize) -> Result<Vec<u8>> {
    if parsing.len() != height * width {
        return Err(Error::Shape(format!(
            "parsing has {} entries, expected {height}x{width}",
            parsing.len()
        )));
    }
    if stride == 0 || height % stride != 0 || width % stride != 0 {
        return Err(Error::Shape(format!(
            "stride {stride} does not divide {height}x{width}"
        )));
    }
    let (oh, ow) = (height / stride, width / stride);
    let mut out = Vec::with_capacity(oh * ow);
    let mut hist = [0u32; 256];
    for by in 0..oh {
        for bx in 0..ow {
            hist.iter_mut().for_each(|h| *h = 0);
            for y in by * stride..(by + 1) * stride {
                for x in bx * stride..(bx + 1) * stride {
                    let p = parsing[y * width + x];
                    if p != IGNORE {
                        hist[p as usize] += 1;
                    }
                }
            }
            let mut best = IGNORE;
            let mut best_count = 0;
            for (p, &c) in hist.iter().enumerate() {
                if c > best_count {
                    best = p as u8;
                    best_count = c;
                }
            }
            out.push(best);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_split_sizes() {
        let split = generate_dataset(&SynthConfig::default(), 0).unwrap();
        assert_eq!(split.train.len(), 32 * 8);
        assert_eq!(split.query.len() + split.gallery.len(), 16 * 8);
        // one query per (identity, camera)
        assert_eq!(split.query.len(), 16 * 4);
        split.check_invariants().unwrap();
    }

    #[test]
    fn single_camera_is_rejected() {
        let cfg = SynthConfig {
            cameras: 1,
            ..SynthConfig::default()
        };
        assert!(matches!(generate_dataset(&cfg, 0), Err(Error::Config(_))));
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = SynthConfig {
            train_identities: 4,
            test_identities: 2,
            instances_per_identity: 3,
            ..SynthConfig::default()
        };
        assert_eq!(generate_dataset(&cfg, 5).unwrap(), generate_dataset(&cfg, 5).unwrap());
        assert_ne!(generate_dataset(&cfg, 5).unwrap(), generate_dataset(&cfg, 6).unwrap());
    }

    #[test]
    fn downsample_rules() {
        assert_eq!(downsample_parsing(&[2; 16], 4, 4, 4).unwrap(), vec![2]);
        assert_eq!(downsample_parsing(&[1, 1, 3, 3], 2, 2, 2).unwrap(), vec![1]);
        assert_eq!(downsample_parsing(&[3, 1, 3, 1], 2, 2, 2).unwrap(), vec![1]);
        assert_eq!(downsample_parsing(&[IGNORE; 4], 2, 2, 2).unwrap(), vec![IGNORE]);
        assert_eq!(downsample_parsing(&[IGNORE, IGNORE, IGNORE, 4], 2, 2, 2).unwrap(), vec![4]);
        assert!(matches!(downsample_parsing(&[0; 12], 3, 4, 2), Err(Error::Shape(_))));
    }
}
