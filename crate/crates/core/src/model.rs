//! The full model: image encoder, text encoder, score head and caption decoder over one parameter store.

use candle_core::DType;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::assign::DEFAULT_TOPK;
use crate::caption::{CaptionDecoder, CaptionDecoderConfig, BACKGROUND_CONCEPT, FOREGROUND_CONCEPT};
use crate::data::{ConceptDictionary, Vocab};
use crate::encoders::{AlignHead, ImageEncoder, ImageEncoderConfig, TextEncoder, TextEncoderConfig};
use crate::error::{Error, Result};
use crate::nn::{ParamStore, TransformerConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> DType {
        match self {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Shared region/text embedding width `D`.
    pub embed_dim: usize,
    pub image: ImageEncoderConfig,
    pub text: TransformerConfig,
    pub caption: TransformerConfig,
    pub max_context: usize,
    pub topk_per_level: usize,
    pub precision: Precision,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let t = TransformerConfig {
            width: 128,
            layers: 2,
            heads: 4,
            mlp_ratio: 2,
        };
        Self {
            embed_dim: 64,
            image: ImageEncoderConfig::default(),
            text: t,
            caption: t,
            max_context: crate::data::tokenizer::DEFAULT_MAX_CONTEXT,
            topk_per_level: DEFAULT_TOPK,
            precision: Precision::F32,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        for t in [&self.text, &self.caption] {
            if t.heads == 0 || t.width % t.heads != 0 {
                return Err(Error::Config(format!("width {} is not divisible by {} heads", t.width, t.heads)));
            }
        }
        if self.embed_dim == 0 || self.max_context < 3 || self.topk_per_level == 0 {
            return Err(Error::Config("embed_dim, max_context and topk_per_level must be positive".into()));
        }
        Ok(())
    }
}

/// Corpus text the vocabulary is built from: every dictionary concept, the training captions,
/// and the two class-agnostic concepts.
pub fn build_vocab<'a>(dictionary: &ConceptDictionary, captions: impl IntoIterator<Item = &'a str>) -> Vocab {
    let concepts = dictionary.concepts();
    let fixed = [FOREGROUND_CONCEPT, BACKGROUND_CONCEPT];
    let mut corpus: Vec<&str> = concepts.iter().map(String::as_str).collect();
    corpus.extend(fixed);
    corpus.extend(captions.into_iter().map(|c| -> &str { c }));
    Vocab::build(corpus)
}

pub struct CapDet {
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub params: ParamStore,
    pub image: ImageEncoder,
    pub text: TextEncoder,
    pub align: AlignHead,
    pub caption: CaptionDecoder,
}

impl CapDet {
    pub fn new(config: ModelConfig, vocab: Vocab, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut ps = ParamStore::new(seed, config.precision.dtype());
        let mut image_cfg = config.image.clone();
        image_cfg.embed_dim = config.embed_dim;
        let image = ImageEncoder::new(&mut ps, image_cfg)?;
        let text = TextEncoder::new(
            &mut ps,
            TextEncoderConfig {
                transformer: config.text,
                max_context: config.max_context,
                embed_dim: config.embed_dim,
            },
            vocab.len(),
        )?;
        let align = AlignHead::new(&mut ps)?;
        let caption = CaptionDecoder::new(
            &mut ps,
            CaptionDecoderConfig {
                transformer: config.caption,
                max_context: config.max_context,
                embed_dim: config.embed_dim,
            },
            vocab.len(),
        )?;
        Ok(Self {
            config,
            vocab,
            params: ps,
            image,
            text,
            align,
            caption,
        })
    }

    pub fn dtype(&self) -> DType {
        self.config.precision.dtype()
    }

    /// Hash over the parameter names and shapes plus the vocabulary size.
    pub fn arch_hash(&self) -> String {
        let mut h = Sha256::new();
        for (name, shape) in self.params.signature() {
            h.update(name.as_bytes());
            for d in shape {
                h.update((d as u64).to_le_bytes());
            }
            h.update([0xff]);
        }
        h.update((self.vocab.len() as u64).to_le_bytes());
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}
