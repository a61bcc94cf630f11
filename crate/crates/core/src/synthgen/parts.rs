use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Reserved parsing id for pixels removed by random erasing.
pub const IGNORE: u8 = 255;

/// Largest supported part vocabulary (background included).
pub const MAX_PARTS: usize = 20;

const COARSE: [&str; 5] = ["background", "head", "torso", "legs", "shoes"];

const FINE: [&str; MAX_PARTS] = [
    "background",
    "hat",
    "hair",
    "glove",
    "sunglasses",
    "upperclothes",
    "dress",
    "coat",
    "socks",
    "pants",
    "jumpsuit",
    "scarf",
    "skirt",
    "face",
    "leftarm",
    "rightarm",
    "leftleg",
    "rightleg",
    "leftshoe",
    "rightshoe",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PartLabel {
    pub id: u8,
}

impl PartLabel {
    pub const BACKGROUND: PartLabel = PartLabel { id: 0 };

    pub fn is_background(self) -> bool {
        self.id == 0
    }
}

/// Dense id <-> name mapping for the body-part categories of a dataset.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PartVocabulary {
    names: Vec<&'static str>,
}

impl PartVocabulary {
    /// Five coarse parts for `k == 5`, otherwise the first `k` of the twenty
    /// fine-grained human-parsing categories.
    pub fn new(k: usize) -> Result<Self> {
        if !(2..=MAX_PARTS).contains(&k) {
            return Err(Error::Config(format!(
                "part count must lie in [2, {MAX_PARTS}], got {k}"
            )));
        }
        let names = if k == COARSE.len() {
            COARSE.to_vec()
        } else {
            FINE[..k].to_vec()
        };
        Ok(Self { names })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn name(&self, part: PartLabel) -> Option<&'static str> {
        self.names.get(part.id as usize).copied()
    }

    pub fn id_of(&self, name: &str) -> Result<PartLabel> {
        self.names
            .iter()
            .position(|n| *n == name)
            .map(|i| PartLabel { id: i as u8 })
            .ok_or_else(|| Error::UnknownPart(name.to_string()))
    }

    pub fn labels(&self) -> impl Iterator<Item = PartLabel> + '_ {
        (0..self.names.len()).map(|i| PartLabel { id: i as u8 })
    }

    pub fn names(&self) -> &[&'static str] {
        &self.names
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn name_id_mapping_is_a_bijection() {
        for k in 2..=MAX_PARTS {
            let vocab = PartVocabulary::new(k).unwrap();
            assert_eq!(vocab.len(), k);
            for label in vocab.labels() {
                let name = vocab.name(label).unwrap();
                assert_eq!(vocab.id_of(name).unwrap(), label);
            }
        }
    }

    #[test]
    fn default_vocabulary_is_coarse() {
        let vocab = PartVocabulary::new(5).unwrap();
        assert_eq!(vocab.names(), &["background", "head", "torso", "legs", "shoes"]);
        assert!(matches!(vocab.id_of("hat"), Err(Error::UnknownPart(_))));
        assert!(PartVocabulary::new(1).is_err());
        assert!(PartVocabulary::new(21).is_err());
    }
}
