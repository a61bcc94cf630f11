//! Identity and part prompts over learnable context tokens, and the per-cell
//! text-embedding map used as the dense alignment target.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoders::TextEncoder;
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::rng::{self, stream};
use crate::synthgen::{PartLabel, PartVocabulary, IGNORE};

/// Template words of "a photo of a [X]_1..[X]_M person".
pub const TEMPLATE_WORDS: [&str; 4] = ["a", "photo", "of", "person"];

/// Fixed word embeddings for template words and part names.
#[derive(Clone, Debug)]
pub struct Vocabulary {
    words: Vec<String>,
    table: Tensor,
}

impl Vocabulary {
    pub fn new(parts: &PartVocabulary, token_dim: usize, dtype: DType, seed: u64) -> Result<Self> {
        let mut words: Vec<String> = TEMPLATE_WORDS.iter().map(|w| w.to_string()).collect();
        words.extend(parts.names().iter().map(|w| w.to_string()));
        let mut r = rng::rng_for(seed, &[stream::PROMPT_INIT, 1]);
        let mut scratch = ParamStore::new(dtype);
        let table = scratch.normal("vocab", &[words.len(), token_dim], 0.02, &mut r)?.detach();
        Ok(Self { words, table })
    }

    fn index(&self, word: &str) -> Result<u32> {
        self.words
            .iter()
            .position(|w| w == word)
            .map(|i| i as u32)
            .ok_or_else(|| Error::UnknownPart(word.to_string()))
    }

    /// (n, d_t) embeddings of `words`.
    pub fn embed(&self, words: &[&str]) -> Result<Tensor> {
        let ids = words.iter().map(|w| self.index(w)).collect::<Result<Vec<u32>>>()?;
        let ids = Tensor::new(ids.as_slice(), &Device::Cpu)?;
        Ok(self.table.index_select(&ids, 0)?)
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn table(&self) -> &Tensor {
        &self.table
    }

    pub fn digest(&self) -> Result<String> {
        let mut h = Sha256::new();
        for w in &self.words {
            h.update(w.as_bytes());
            h.update([0]);
        }
        for v in self.table.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()? {
            h.update(v.to_le_bytes());
        }
        Ok(hex::encode(h.finalize()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptMeta {
    pub m: usize,
    pub token_dim: usize,
    pub identities: Vec<usize>,
    pub parts: Vec<String>,
    pub vocab_hash: String,
    pub stage: String,
}

/// Learnable per-identity context tokens plus the frozen vocabulary.
#[derive(Clone, Debug)]
pub struct PromptContextStore {
    m: usize,
    token_dim: usize,
    identities: Vec<usize>,
    rows: BTreeMap<usize, u32>,
    params: ParamStore,
    /// (N, M, d_t); absent when M = 0.
    context: Option<Tensor>,
    vocab: Vocabulary,
    parts: PartVocabulary,
}

impl PromptContextStore {
    pub fn new(identities: &[usize], m: usize, parts: &PartVocabulary, token_dim: usize, dtype: DType, seed: u64) -> Result<Self> {
        let vocab = Vocabulary::new(parts, token_dim, dtype, seed)?;
        let mut params = ParamStore::new(dtype);
        let context = if m > 0 {
            let mut r = rng::rng_for(seed, &[stream::PROMPT_INIT, 2]);
            Some(params.normal("prompt.context", &[identities.len(), m, token_dim], 0.02, &mut r)?)
        } else {
            None
        };
        let rows = identities.iter().enumerate().map(|(i, &id)| (id, i as u32)).collect();
        Ok(Self {
            m,
            token_dim,
            identities: identities.to_vec(),
            rows,
            params,
            context,
            vocab,
            parts: parts.clone(),
        })
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn identities(&self) -> &[usize] {
        &self.identities
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn parts(&self) -> &PartVocabulary {
        &self.parts
    }

    /// Learnable variables (the context tokens only).
    pub fn trainable(&self) -> Vec<Var> {
        self.params.vars()
    }

    /// Length of an identity prompt: template (5 tokens) plus M context tokens.
    pub fn identity_prompt_len(&self) -> usize {
        5 + self.m
    }

    fn row(&self, identity: usize) -> Result<u32> {
        self.rows.get(&identity).copied().ok_or(Error::UnknownIdentity(identity))
    }

    /// (B, 5+M, d_t): "a photo of a X_1..X_M person" per identity.
    pub fn identity_prompts(&self, identities: &[usize]) -> Result<Tensor> {
        let rows = identities.iter().map(|&i| self.row(i)).collect::<Result<Vec<u32>>>()?;
        let b = rows.len();
        let t = self.token_dim;
        let prefix = self.vocab.embed(&["a", "photo", "of", "a"])?.unsqueeze(0)?.broadcast_as((b, 4, t))?;
        let suffix = self.vocab.embed(&["person"])?.unsqueeze(0)?.broadcast_as((b, 1, t))?;
        match &self.context {
            Some(ctx) => {
                let ids = Tensor::new(rows.as_slice(), &Device::Cpu)?;
                let x = ctx.index_select(&ids, 0)?;
                Ok(Tensor::cat(&[&prefix, &x, &suffix], 1)?)
            }
            None => Ok(Tensor::cat(&[&prefix, &suffix], 1)?),
        }
    }

    pub fn assemble_identity_prompt(&self, identity: usize) -> Result<Tensor> {
        Ok(self.identity_prompts(&[identity])?.squeeze(0)?)
    }

    /// (B, 6+M, d_t): identity prompt followed directly by the part-name token.
    pub fn part_prompts(&self, pairs: &[(usize, PartLabel)]) -> Result<Tensor> {
        let ids: Vec<usize> = pairs.iter().map(|p| p.0).collect();
        let base = self.identity_prompts(&ids)?;
        let names = pairs
            .iter()
            .map(|(_, p)| self.parts.name(*p).ok_or_else(|| Error::UnknownPart(format!("id {}", p.id))))
            .collect::<Result<Vec<_>>>()?;
        let part_tokens = self.vocab.embed(&names)?.unsqueeze(1)?;
        Ok(Tensor::cat(&[&base, &part_tokens], 1)?)
    }

    pub fn assemble_part_prompt(&self, identity: usize, part: &str) -> Result<Tensor> {
        let label = self.parts.id_of(part)?;
        Ok(self.part_prompts(&[(identity, label)])?.squeeze(0)?)
    }

    /// (K, 6, d_t): "a photo of a person <part>", no identity context.
    pub fn generic_part_prompts(&self, parts: &[PartLabel]) -> Result<Tensor> {
        let names = parts
            .iter()
            .map(|p| self.parts.name(*p).ok_or_else(|| Error::UnknownPart(format!("id {}", p.id))))
            .collect::<Result<Vec<_>>>()?;
        let k = names.len();
        let t = self.token_dim;
        let template = self
            .vocab
            .embed(&["a", "photo", "of", "a", "person"])?
            .unsqueeze(0)?
            .broadcast_as((k, 5, t))?;
        let part_tokens = self.vocab.embed(&names)?.unsqueeze(1)?;
        Ok(Tensor::cat(&[&template, &part_tokens], 1)?)
    }

    /// Identity-prompt embeddings (N, d) for all stored identities, in row order.
    pub fn encode_identities(&self, text: &TextEncoder) -> Result<Tensor> {
        text.forward(&self.identity_prompts(&self.identities)?)
    }

    /// Part-prompt embeddings laid out as (N * K, d), row `n * K + k`.
    pub fn encode_part_table(&self, text: &TextEncoder, identities: &[usize]) -> Result<Tensor> {
        let pairs: Vec<(usize, PartLabel)> = identities
            .iter()
            .flat_map(|&id| self.parts.labels().map(move |p| (id, p)))
            .collect();
        text.forward(&self.part_prompts(&pairs)?)
    }

    /// Identity-agnostic part embeddings (K, d).
    pub fn encode_generic_parts(&self, text: &TextEncoder) -> Result<Tensor> {
        let labels: Vec<PartLabel> = self.parts.labels().collect();
        text.forward(&self.generic_part_prompts(&labels)?)
    }

    /// Deep copy with independent context storage.
    pub fn snapshot(&self) -> Result<Self> {
        let mut params = ParamStore::new(self.params.dtype());
        let context = match &self.context {
            Some(ctx) => Some(params.from_values(
                "prompt.context",
                ctx.dims(),
                ctx.flatten_all()?.to_dtype(DType::F64)?.to_vec1()?,
            )?),
            None => None,
        };
        Ok(Self {
            params,
            context,
            ..self.clone()
        })
    }

    pub fn meta(&self, stage: &str) -> Result<PromptMeta> {
        Ok(PromptMeta {
            m: self.m,
            token_dim: self.token_dim,
            identities: self.identities.clone(),
            parts: self.parts.names().iter().map(|s| s.to_string()).collect(),
            vocab_hash: self.vocab.digest()?,
            stage: stage.to_string(),
        })
    }

    /// Writes `<stem>.json` metadata and `<stem>.safetensors` (context and vocabulary).
    pub fn save(&self, dir: &Path, stem: &str, stage: &str) -> Result<Vec<std::path::PathBuf>> {
        fs::create_dir_all(dir)?;
        let mut tensors = HashMap::new();
        tensors.insert("vocab".to_string(), self.vocab.table.clone());
        if let Some(ctx) = &self.context {
            tensors.insert("context".to_string(), ctx.clone());
        }
        let blob = dir.join(format!("{stem}.safetensors"));
        let meta = dir.join(format!("{stem}.json"));
        crate::pipeline::write_atomic(&blob, |p| Ok(candle_core::safetensors::save(&tensors, p)?))?;
        let json = serde_json::to_vec_pretty(&self.meta(stage)?)?;
        crate::pipeline::write_atomic(&meta, |p| Ok(fs::write(p, &json)?))?;
        Ok(vec![meta, blob])
    }

    pub fn load(dir: &Path, stem: &str, dtype: DType) -> Result<Self> {
        let meta: PromptMeta = serde_json::from_slice(&fs::read(dir.join(format!("{stem}.json")))?)?;
        let tensors = candle_core::safetensors::load(dir.join(format!("{stem}.safetensors")), &Device::Cpu)?;
        let parts = PartVocabulary::new(meta.parts.len())?;
        if parts.names().iter().zip(&meta.parts).any(|(a, b)| a != b) {
            return Err(Error::Checkpoint("part vocabulary mismatch".into()));
        }
        let table = tensors
            .get("vocab")
            .ok_or_else(|| Error::Checkpoint("missing vocab table".into()))?
            .to_dtype(dtype)?;
        let mut words: Vec<String> = TEMPLATE_WORDS.iter().map(|w| w.to_string()).collect();
        words.extend(meta.parts.iter().cloned());
        let vocab = Vocabulary { words, table };
        if vocab.digest()? != meta.vocab_hash {
            return Err(Error::Checkpoint("vocabulary hash mismatch".into()));
        }
        let mut params = ParamStore::new(dtype);
        let context = if meta.m > 0 {
            let ctx = tensors
                .get("context")
                .ok_or_else(|| Error::Checkpoint("missing context tensor".into()))?;
            let expected = [meta.identities.len(), meta.m, meta.token_dim];
            if ctx.dims() != expected {
                return Err(Error::Checkpoint(format!("context shape {:?} != {expected:?}", ctx.dims())));
            }
            Some(params.from_values("prompt.context", &expected, ctx.flatten_all()?.to_dtype(DType::F64)?.to_vec1()?)?)
        } else {
            None
        };
        let rows = meta.identities.iter().enumerate().map(|(i, &id)| (id, i as u32)).collect();
        Ok(Self {
            m: meta.m,
            token_dim: meta.token_dim,
            identities: meta.identities,
            rows,
            params,
            context,
            vocab,
            parts,
        })
    }
}

/// Per-cell text targets at fusion resolution.
#[derive(Clone, Debug)]
pub struct AlignmentTarget {
    /// (d, h, w); ignored cells hold zeros.
    pub cells: Tensor,
    /// Row-major h x w; true where the cell carries no target.
    pub ignore: Vec<bool>,
    pub height: usize,
    pub width: usize,
}

/// Encodes each distinct part present in `parsing_ds` once and scatters the
/// resulting embeddings over the grid.
pub fn build_alignment_target(
    parsing_ds: &[u8],
    height: usize,
    width: usize,
    identity: usize,
    prompts: &PromptContextStore,
    text: &TextEncoder,
) -> Result<AlignmentTarget> {
    if parsing_ds.len() != height * width {
        return Err(Error::Shape(format!(
            "parsing grid has {} cells, expected {height}x{width}",
            parsing_ds.len()
        )));
    }
    let present: Vec<u8> = parsing_ds
        .iter()
        .copied()
        .filter(|&p| p != IGNORE)
        .collect::<std::collections::BTreeSet<u8>>()
        .into_iter()
        .collect();
    let ignore: Vec<bool> = parsing_ds.iter().map(|&p| p == IGNORE).collect();
    let dtype = prompts.params().dtype();
    if present.is_empty() {
        let d = text.embed_dim();
        return Ok(AlignmentTarget {
            cells: Tensor::zeros((d, height, width), dtype, &Device::Cpu)?,
            ignore,
            height,
            width,
        });
    }
    let pairs: Vec<(usize, PartLabel)> = present.iter().map(|&p| (identity, PartLabel { id: p })).collect();
    let table = text.forward(&prompts.part_prompts(&pairs)?)?;
    let d = table.dim(1)?;
    let table = Tensor::cat(&[&table, &Tensor::zeros((1, d), table.dtype(), &Device::Cpu)?], 0)?;
    let index: Vec<u32> = parsing_ds
        .iter()
        .map(|&p| match present.iter().position(|&q| q == p) {
            Some(i) => i as u32,
            None => present.len() as u32,
        })
        .collect();
    let cells = table
        .index_select(&Tensor::new(index.as_slice(), &Device::Cpu)?, 0)?
        .t()?
        .reshape((d, height, width))?;
    Ok(AlignmentTarget {
        cells,
        ignore,
        height,
        width,
    })
}
