//! Character vocabulary and the character-level LSTM that turns each word
//! into a `d_model` embedding.
//!
//! The words of an utterance run through the LSTM together as one padded
//! batch. A word's state stops updating once its characters run out, so the
//! final hidden state of each row is that word's own last step.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::layers::{blocks_for, dropout, Dense, DenseSpec, DropoutSite, KernelInit};
use crate::params::{glorot_uniform, rng_for, ParamId, ParameterStore};
use crate::tensor::Real;

pub const PAD: usize = 0;
pub const UNK: usize = 1;

/// Characters seen in the training split, ids `2..`; frozen after building.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CharVocab {
    chars: Vec<char>,
    index: HashMap<char, usize>,
}

impl CharVocab {
    pub fn from_chars(chars: impl IntoIterator<Item = char>) -> Self {
        let chars: Vec<char> = chars
            .into_iter()
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let index = chars.iter().enumerate().map(|(i, &c)| (c, i + 2)).collect();
        Self { chars, index }
    }

    /// Every character of every token in `words`.
    pub fn build<'a>(words: impl IntoIterator<Item = &'a str>) -> Self {
        Self::from_chars(words.into_iter().flat_map(str::chars))
    }

    /// Distinct characters plus PAD and UNK.
    pub fn size(&self) -> usize {
        self.chars.len() + 2
    }

    pub fn chars(&self) -> &[char] {
        &self.chars
    }

    pub fn id(&self, c: char) -> usize {
        self.index.get(&c).copied().unwrap_or(UNK)
    }

    pub fn encode(&self, word: &str) -> Vec<usize> {
        word.chars().map(|c| self.id(c)).collect()
    }
}

impl Serialize for CharVocab {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let text: String = self.chars.iter().collect();
        text.serialize(s)
    }
}

impl<'de> Deserialize<'de> for CharVocab {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let text = String::deserialize(d)?;
        let vocab = Self::from_chars(text.chars());
        if vocab.chars.len() != text.chars().count() {
            return Err(serde::de::Error::custom("char vocabulary has duplicates"));
        }
        Ok(vocab)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CharEncoderDims {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub units: usize,
    pub d_model: usize,
    pub num_blocks: usize,
    pub block_min_dim: usize,
}

impl CharEncoderDims {
    fn recurrent_spec(&self) -> DenseSpec {
        let blocks = blocks_for(
            self.units,
            4 * self.units,
            self.num_blocks,
            self.block_min_dim,
        );
        DenseSpec::new(self.units, 4 * self.units)
            .without_bias()
            .blocks(blocks)
            .init(KernelInit::Orthogonal)
    }

    fn projection_spec(&self) -> DenseSpec {
        let blocks = blocks_for(
            self.units,
            self.d_model,
            self.num_blocks,
            self.block_min_dim,
        );
        DenseSpec::new(self.units, self.d_model).blocks(blocks)
    }

    /// Per-tensor counts in registration order.
    pub fn param_breakdown(&self) -> Vec<(String, usize)> {
        vec![
            ("char_embed".into(), self.vocab_size * self.embed_dim),
            (
                "char_lstm.input".into(),
                DenseSpec::new(self.embed_dim, 4 * self.units).param_count(),
            ),
            (
                "char_lstm.recurrent".into(),
                self.recurrent_spec().param_count(),
            ),
            ("char_proj".into(), self.projection_spec().param_count()),
        ]
    }
}

/// Gate order along the `4·units` axis is input, forget, candidate, output.
#[derive(Debug, Clone)]
pub struct CharLstmEncoder {
    pub dims: CharEncoderDims,
    pub embed: ParamId,
    pub input: Dense,
    pub recurrent: Dense,
    pub projection: Dense,
}

impl CharLstmEncoder {
    pub fn new<T: Real>(store: &mut ParameterStore<T>, dims: CharEncoderDims) -> Result<Self> {
        if dims.vocab_size < 2 || dims.embed_dim == 0 || dims.units == 0 || dims.d_model == 0 {
            return Err(Error::Config(format!("invalid char encoder dims {dims:?}")));
        }
        let mut rng = rng_for(store.seed(), "init/char_embed");
        let table = glorot_uniform(
            &[dims.vocab_size, dims.embed_dim],
            dims.vocab_size,
            dims.embed_dim,
            &mut rng,
        );
        let embed = store.add("char_embed", table, true)?;
        let input = Dense::new(
            store,
            "char_lstm.input",
            &DenseSpec::new(dims.embed_dim, 4 * dims.units),
        )?;
        let forget = store.get_mut(input.bias.expect("input gate has a bias"));
        for v in &mut forget.value.data_mut()[dims.units..2 * dims.units] {
            *v = T::one();
        }
        let recurrent = Dense::new(store, "char_lstm.recurrent", &dims.recurrent_spec())?;
        let projection = Dense::new(store, "char_proj", &dims.projection_spec())?;
        Ok(Self {
            dims,
            embed,
            input,
            recurrent,
            projection,
        })
    }

    /// `[W, d_model]`: one row per word of character ids.
    pub fn encode_words<T: Real>(&self, g: &mut Graph<'_, T>, words: &[Vec<usize>]) -> Result<Var> {
        if words.is_empty() {
            return Err(Error::Contract("no words to encode".into()));
        }
        if let Some(i) = words.iter().position(Vec::is_empty) {
            return Err(Error::Contract(format!("word {i} has no characters")));
        }
        let vocab = self.dims.vocab_size;
        if let Some(&bad) = words.iter().flatten().find(|&&c| c >= vocab) {
            return Err(Error::Contract(format!(
                "char id {bad} outside vocabulary of {vocab}"
            )));
        }
        let u = self.dims.units;
        let longest = words.iter().map(Vec::len).max().unwrap_or(0);
        let table = g.param(self.embed);
        let mut state: Option<(Var, Var)> = None;
        for t in 0..longest {
            let ids: Vec<usize> = words
                .iter()
                .map(|w| w.get(t).copied().unwrap_or(PAD))
                .collect();
            let active: Vec<bool> = words.iter().map(|w| t < w.len()).collect();
            let x = g.gather(table, &ids)?;
            let mut z = self.input.linear(g, x)?;
            if let Some((h, _)) = state {
                let r = self.recurrent.linear(g, h)?;
                z = g.add(z, r)?;
            }
            let zi = g.slice_cols(z, 0, u)?;
            let zf = g.slice_cols(z, u, u)?;
            let zg = g.slice_cols(z, 2 * u, u)?;
            let zo = g.slice_cols(z, 3 * u, u)?;
            let i = g.sigmoid(zi);
            let cand = g.tanh(zg);
            let o = g.sigmoid(zo);
            let ig = g.mul(i, cand)?;
            let c_new = match state {
                Some((_, c)) => {
                    let f = g.sigmoid(zf);
                    let fc = g.mul(f, c)?;
                    g.add(fc, ig)?
                }
                None => ig,
            };
            let tc = g.tanh(c_new);
            let h_new = g.mul(o, tc)?;
            state = Some(match state {
                Some((h, c)) if active.iter().any(|a| !a) => {
                    let h = g.select_rows(active.clone(), h_new, h)?;
                    let c = g.select_rows(active, c_new, c)?;
                    (h, c)
                }
                _ => (h_new, c_new),
            });
        }
        let (h, _) = state.expect("at least one step");
        self.projection.forward(g, h)
    }

    pub fn encode_word<T: Real>(&self, g: &mut Graph<'_, T>, chars: &[usize]) -> Result<Var> {
        self.encode_words(g, &[chars.to_vec()])
    }

    /// `[T, d_model]` word embeddings, with dropout when `site` is given.
    pub fn encode_utterance<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        words: &[Vec<usize>],
        dropout_rate: f64,
        site: Option<&DropoutSite>,
    ) -> Result<Var> {
        let e = self.encode_words(g, words)?;
        dropout(g, e, dropout_rate, site)
    }
}
