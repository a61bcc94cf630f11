use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::error::{ensure, Result};
use crate::rng::Rng;
use crate::synthgen::SyntheticSample;

/// One P x K batch, as indices into the sample list it was drawn from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BatchBundle {
    pub indices: Vec<usize>,
    pub identities: Vec<usize>,
    pub cameras: Vec<usize>,
}

/// Draws P distinct identities and K instances of each; instances repeat only
/// when an identity has fewer than K of them.
pub fn pk_sample(samples: &[SyntheticSample], p: usize, k: usize, rng: &mut Rng) -> Result<BatchBundle> {
    let mut by_id: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        by_id.entry(s.identity).or_default().push(i);
    }
    ensure!(
        by_id.len() >= p,
        Precondition,
        "PK sampling needs {p} identities, the set has {}",
        by_id.len()
    );
    let ids: Vec<usize> = by_id.keys().copied().collect();
    let chosen: Vec<usize> = ids.choose_multiple(rng, p).copied().collect();
    let mut indices = Vec::with_capacity(p * k);
    for id in &chosen {
        let pool = &by_id[id];
        if pool.len() >= k {
            indices.extend(pool.choose_multiple(rng, k).copied());
        } else {
            indices.extend((0..k).map(|_| pool[rng.gen_range(0..pool.len())]));
        }
    }
    Ok(BatchBundle {
        identities: indices.iter().map(|&i| samples[i].identity).collect(),
        cameras: indices.iter().map(|&i| samples[i].camera).collect(),
        indices,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_for;

    fn fake(ids: &[usize]) -> Vec<SyntheticSample> {
        ids.iter()
            .map(|&identity| SyntheticSample {
                height: 1,
                width: 1,
                image: vec![0.0; 3],
                parsing: vec![0],
                identity,
                camera: 0,
            })
            .collect()
    }

    #[test]
    fn p_by_k_construction() {
        let set = fake(&[0, 0, 0, 0, 0, 1, 1, 1, 1, 2, 2, 2, 2, 2, 3, 3, 3, 3, 4, 4, 4, 4]);
        let b = pk_sample(&set, 4, 4, &mut rng_for(1, &[])).unwrap();
        assert_eq!(b.indices.len(), 16);
        let mut counts = BTreeMap::new();
        for id in &b.identities {
            *counts.entry(*id).or_insert(0) += 1;
        }
        assert_eq!(counts.len(), 4);
        assert!(counts.values().all(|&c| c == 4));
        let again = pk_sample(&set, 4, 4, &mut rng_for(1, &[])).unwrap();
        assert_eq!(b, again);
    }

    #[test]
    fn small_identities_repeat() {
        let set = fake(&[0, 0, 1, 1]);
        let b = pk_sample(&set, 2, 4, &mut rng_for(2, &[])).unwrap();
        assert_eq!(b.indices.len(), 8);
        assert!(pk_sample(&set, 3, 2, &mut rng_for(2, &[])).unwrap_err().is_validation());
    }
}
