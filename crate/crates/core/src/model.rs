//! The full tagger: char encoder → attention → fusion gate → CRF.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attention::{Attention, AttentionConfig, Blocking, FusionGate, Variant};
use crate::autograd::{Graph, Var};
use crate::char_encoder::{CharEncoderDims, CharLstmEncoder, CharVocab};
use crate::crf::{CrfHead, TagSet};
use crate::data::{SlotSpan, Utterance};
use crate::error::{Error, Result};
use crate::layers::DropoutSite;
use crate::params::ParameterStore;
use crate::tensor::{DType, Real, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub betas: (f64, f64),
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            betas: (0.9, 0.999),
            eps: 1e-8,
        }
    }
}

/// Architecture and training settings. Missing fields in a config file take
/// these defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub char_embed_dim: usize,
    pub lstm_units: usize,
    pub d_model: usize,
    pub num_heads: usize,
    pub head_size: usize,
    pub num_blocks: usize,
    /// Kernels are blocked only when both widths are at least this.
    pub block_min_dim: usize,
    pub use_block_dense: bool,
    pub dropout: f64,
    pub attention_dropout: f64,
    pub weight_decay: f64,
    pub variant: Variant,
    pub mask_current: Option<bool>,
    pub max_relative_distance: usize,
    pub optimizer: OptimizerConfig,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    /// Stop as soon as dev F1 reaches this.
    pub target_dev_f1: Option<f64>,
    pub seed: u64,
    pub dtype: DType,
    /// Use worker threads for gradients and evaluation. Results do not
    /// depend on this.
    pub parallel: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            char_embed_dim: 64,
            lstm_units: 128,
            d_model: 256,
            num_heads: 4,
            head_size: 128,
            num_blocks: 8,
            block_min_dim: 128,
            use_block_dense: true,
            dropout: 0.1,
            attention_dropout: 0.1,
            weight_decay: 0.01,
            variant: Variant::AbstractRel,
            mask_current: None,
            max_relative_distance: 8,
            optimizer: OptimizerConfig::default(),
            batch_size: 32,
            max_epochs: 100,
            patience: 10,
            target_dev_f1: None,
            seed: 0,
            dtype: DType::F32,
            parallel: true,
        }
    }
}

impl ModelConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn attention(&self) -> AttentionConfig {
        AttentionConfig {
            num_heads: self.num_heads,
            head_size: self.head_size,
            d_model: self.d_model,
            max_relative_distance: self.max_relative_distance,
            attention_dropout: self.attention_dropout,
            variant: self.variant,
            mask_current: self.mask_current,
        }
    }

    pub fn blocking(&self) -> Blocking {
        if self.use_block_dense {
            Blocking {
                num_blocks: self.num_blocks,
                min_dim: self.block_min_dim,
            }
        } else {
            Blocking::NONE
        }
    }

    pub fn encoder_dims(&self, vocab_size: usize) -> CharEncoderDims {
        let b = self.blocking();
        CharEncoderDims {
            vocab_size,
            embed_dim: self.char_embed_dim,
            units: self.lstm_units,
            d_model: self.d_model,
            num_blocks: b.num_blocks,
            block_min_dim: b.min_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("char_embed_dim", self.char_embed_dim),
            ("lstm_units", self.lstm_units),
            ("d_model", self.d_model),
            ("num_heads", self.num_heads),
            ("head_size", self.head_size),
            ("num_blocks", self.num_blocks),
            ("batch_size", self.batch_size),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        for (name, rate) in [
            ("dropout", self.dropout),
            ("attention_dropout", self.attention_dropout),
        ] {
            if !(0.0..1.0).contains(&rate) {
                return Err(Error::Config(format!("{name} {rate} outside [0, 1)")));
            }
        }
        let o = &self.optimizer;
        if o.lr < 0.0
            || !(0.0..1.0).contains(&o.betas.0)
            || !(0.0..1.0).contains(&o.betas.1)
            || o.eps <= 0.0
        {
            return Err(Error::Config(format!("invalid optimizer settings {o:?}")));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        self.attention().validate()?;
        // Divisibility of every blocked kernel.
        count_parameters(self, 2, 1).map(|_| ())
    }

    /// SHA-256 of the canonical JSON form, hex encoded.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serialises");
        Sha256::digest(json.as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

/// Trainable scalars per tensor group.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCount {
    pub entries: Vec<(String, usize)>,
    pub total: usize,
}

/// Exact count of what [`SlotModel::new`] would store.
pub fn count_parameters(
    config: &ModelConfig,
    vocab_size: usize,
    num_tags: usize,
) -> Result<ParamCount> {
    let b = config.blocking();
    let mut entries = config.encoder_dims(vocab_size).param_breakdown();
    entries.extend(config.attention().param_breakdown(b));
    let gate = FusionGate::spec(config.d_model, b);
    gate.validate()?;
    entries.push(("gate".into(), gate.param_count()));
    entries.extend(CrfHead::param_breakdown(config.d_model, num_tags));
    let checks: [(usize, usize); 4] = [
        (config.lstm_units, 4 * config.lstm_units),
        (config.lstm_units, config.d_model),
        (config.d_model, config.num_heads * config.head_size),
        (config.num_heads * config.head_size, config.d_model),
    ];
    for (i, o) in checks {
        crate::layers::DenseSpec::new(i, o)
            .blocks(b.blocks(i, o))
            .validate()?;
    }
    let total = entries.iter().map(|(_, n)| n).sum();
    Ok(ParamCount { entries, total })
}

/// Full-dense total, block-dense total and their ratio for one config.
pub fn block_reduction(
    config: &ModelConfig,
    vocab_size: usize,
    num_tags: usize,
) -> Result<(usize, usize, f64)> {
    let full = count_parameters(
        &ModelConfig {
            use_block_dense: false,
            ..config.clone()
        },
        vocab_size,
        num_tags,
    )?
    .total;
    let blocked = count_parameters(
        &ModelConfig {
            use_block_dense: true,
            ..config.clone()
        },
        vocab_size,
        num_tags,
    )?
    .total;
    Ok((full, blocked, full as f64 / blocked as f64))
}

/// Char ids per word and gold tag indices for one utterance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub chars: Vec<Vec<usize>>,
    pub tags: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct SlotModel<T> {
    pub config: ModelConfig,
    pub vocab: CharVocab,
    pub tagset: TagSet,
    pub store: ParameterStore<T>,
    pub encoder: CharLstmEncoder,
    pub attention: Attention,
    pub gate: FusionGate,
    pub crf: CrfHead,
}

impl<T: Real> SlotModel<T> {
    pub fn new(config: ModelConfig, vocab: CharVocab, tagset: TagSet) -> Result<Self> {
        config.validate()?;
        let mut store = ParameterStore::new(config.seed);
        let b = config.blocking();
        let encoder = CharLstmEncoder::new(&mut store, config.encoder_dims(vocab.size()))?;
        let attention = Attention::new(&mut store, config.attention(), b)?;
        let gate = FusionGate::new(&mut store, config.d_model, b)?;
        let crf = CrfHead::new(&mut store, config.d_model, tagset.len())?;
        Ok(Self {
            config,
            vocab,
            tagset,
            store,
            encoder,
            attention,
            gate,
            crf,
        })
    }

    /// Vocabulary from the training tokens and tag set from its slots.
    pub fn for_dataset(config: ModelConfig, train: &[Utterance]) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::data("training set", "no utterances"));
        }
        let vocab = CharVocab::build(
            train
                .iter()
                .flat_map(|u| u.tokens.iter().map(|t| t.surface.as_str())),
        );
        let tagset = TagSet::new(&crate::data::slot_inventory(train))?;
        Self::new(config, vocab, tagset)
    }

    pub fn param_count(&self) -> usize {
        self.store.total_count()
    }

    pub fn chars_of(&self, words: &[&str]) -> Vec<Vec<usize>> {
        words.iter().map(|w| self.vocab.encode(w)).collect()
    }

    pub fn example(&self, utt: &Utterance) -> Result<Example> {
        if utt.is_empty() {
            return Err(Error::data(
                "utterance",
                format!("`{}` has no tokens", utt.text),
            ));
        }
        Ok(Example {
            chars: self.chars_of(&utt.words()),
            tags: self.tagset.bio_from_spans(&utt.spans, utt.len())?,
        })
    }

    /// Fused features `H: [T, d_model]`. `dropout` names the random stream
    /// for a training pass; `None` disables every dropout.
    pub fn features(
        &self,
        g: &mut Graph<'_, T>,
        chars: &[Vec<usize>],
        dropout: Option<&DropoutSite>,
    ) -> Result<Var> {
        let word_site = dropout.map(|s| DropoutSite {
            seed: s.seed,
            path: format!("{}/word", s.path),
        });
        let attn_site = dropout.map(|s| DropoutSite {
            seed: s.seed,
            path: format!("{}/attn", s.path),
        });
        let e = self
            .encoder
            .encode_utterance(g, chars, self.config.dropout, word_site.as_ref())?;
        let a = self.attention.attend(g, e, attn_site.as_ref())?;
        self.gate.fuse(g, a.output, e)
    }

    pub fn emissions(&self, g: &mut Graph<'_, T>, chars: &[Vec<usize>]) -> Result<Var> {
        let h = self.features(g, chars, None)?;
        self.crf.emissions(g, h)
    }

    pub fn nll(
        &self,
        g: &mut Graph<'_, T>,
        ex: &Example,
        dropout: Option<&DropoutSite>,
    ) -> Result<Var> {
        let h = self.features(g, &ex.chars, dropout)?;
        self.crf.nll(g, h, &ex.tags)
    }

    pub fn predict_tags(&self, words: &[&str]) -> Result<Vec<usize>> {
        if words.is_empty() {
            return Ok(Vec::new());
        }
        let mut g = Graph::new(&self.store);
        let h = self.features(&mut g, &self.chars_of(words), None)?;
        Ok(self.crf.decode(&mut g, h)?.0)
    }

    pub fn predict_words(&self, words: &[&str]) -> Result<Vec<SlotSpan>> {
        let tags = self.predict_tags(words)?;
        Ok(self.tagset.spans_from_bio(&tags))
    }

    pub fn predict(&self, utt: &Utterance) -> Result<Vec<SlotSpan>> {
        self.predict_words(&utt.words())
    }

    /// Emission scores `[T, K]` with dropout off.
    pub fn logits(&self, words: &[&str]) -> Result<Tensor<T>> {
        let mut g = Graph::new(&self.store);
        let em = self.emissions(&mut g, &self.chars_of(words))?;
        Ok(g.value(em).clone())
    }

    /// The same model with parameters converted to another precision.
    pub fn cast<U: Real>(&self) -> SlotModel<U> {
        SlotModel {
            config: ModelConfig {
                dtype: U::DTYPE,
                ..self.config.clone()
            },
            vocab: self.vocab.clone(),
            tagset: self.tagset.clone(),
            store: self.store.cast(),
            encoder: self.encoder.clone(),
            attention: self.attention.clone(),
            gate: self.gate.clone(),
            crf: self.crf.clone(),
        }
    }
}
